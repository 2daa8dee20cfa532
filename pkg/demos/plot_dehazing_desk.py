"""
Unpaired dehazing at desk scale
===============================

Train the two-generator translation model on unpaired hazy and clean
scenes, once with the feature-preservation term and once without it, then
score both on the paired ground truth.

This takes a few minutes on one CPU core; raise ``EPOCHS`` for better
models.
"""

import tempfile
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from miinet import imaging
from miinet.evaluation import benchmark, load_translator
from miinet.networks import FeatureExtractor
from miinet.training import IDM_PRESETS, train_idm

EPOCHS = 4
out = Path(tempfile.mkdtemp(prefix="miinet_idm_"))

imaging.make_clean_images(out / "clean", 40, size=(96, 96), seed=0)
pairs = imaging.synth_dataset(out / "clean", out / "pairs", 40, imaging.ParamRanges(), seed=1)

# unpaired split: hazy images 0-19 against clean images 20-39
lq = pairs.subset(range(20))
hq = imaging.hq_manifest(pairs).subset(range(20, 40))

config = IDM_PRESETS["desk"].replace(working_size=(96, 96), epochs=EPOCHS)
methods = {}
for beta in (1.5, 0.0):
    ckpt = train_idm(config.replace(beta_percep=beta), lq, hq, out / f"beta_{beta}")
    methods[f"beta={beta}"] = load_translator(ckpt)

report = benchmark(methods, lq, FeatureExtractor())
for name, s in report.summary().items():
    print(f"{name:10s} PSNR {s['psnr_mean']:.2f}  SSIM {s['ssim_mean']:.3f}  "
          f"feature distance {s['feature_distance_mean']:.4f}")
report.to_csv(out / "bench.csv")

# rows: hazy input, each model's output, clean ground truth
records = lq.records[:4]
fig, axes = plt.subplots(2 + len(methods), len(records), figsize=(2 * len(records), 2 * (2 + len(methods))))
for j, rec in enumerate(records):
    hazy = imaging.to_tensor(imaging.load_image(lq.resolve(rec.image_path)))
    clean = imaging.to_tensor(imaging.load_image(lq.resolve(rec.clean_path)))
    rows = [("input", hazy)] + [(name, fn(hazy)) for name, fn in methods.items()] + [("clean", clean)]
    for i, (name, img) in enumerate(rows):
        axes[i, j].imshow(imaging.from_tensor(img))
        axes[i, j].set_title(name, fontsize=8)
        axes[i, j].axis("off")
fig.tight_layout()
fig.savefig(out / "dehazing_grid.png", dpi=100)
print("wrote", out)
