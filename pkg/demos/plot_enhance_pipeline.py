"""
Dehaze then super-resolve
=========================

Chain a dehazing checkpoint with a x4 super-resolution checkpoint: any
input is resized to the working size, translated, then enlarged.
Freshly initialised networks are used so the script runs in seconds; the
point here is the geometry of the pipeline, not the image quality.
"""

import tempfile
from pathlib import Path

import numpy as np

from miinet import imaging
from miinet.training import IDM_PRESETS, ISR_PRESETS, Enhancer, IdmTrainer, IsrTrainer

out = Path(tempfile.mkdtemp(prefix="miinet_enhance_"))

idm = IdmTrainer(IDM_PRESETS["desk"].replace(working_size=(160, 90), gen_width=8, gen_blocks=2))
isr = IsrTrainer(ISR_PRESETS["desk"].replace(sr_feat=8, sr_blocks=1, sr_growth=8))
pipeline = Enhancer.load(idm.save_checkpoint(out / "idm"), isr.save_checkpoint(out / "isr"))

frame = imaging.from_tensor(imaging.render_scene(640, 360, np.random.default_rng(0)))
result = pipeline(frame)
print("input", frame.shape, "-> working", pipeline.working_size[::-1], "-> output", result.shape)
imaging.save_image(result, out / "frame.enhanced.png")
