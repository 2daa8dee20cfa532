"""Unpaired medical image dehazing with feature preservation, x4 super-resolution
and opinion-score evaluation."""

from .imaging import (
    AugmentSpec,
    DatasetManifest,
    DegradationParams,
    ParamRanges,
    apply_degradation,
    augment,
    from_tensor,
    gaussian_blur,
    load_image,
    resize_bicubic,
    save_image,
    synth_dataset,
    to_tensor,
)
from .networks import (
    FeatureExtractor,
    FeatureExtractorConfig,
    GeneratorNet,
    PatchDiscriminator,
    SRDiscriminator,
    SRGeneratorNet,
    extract_features,
    generator_forward,
    load_weights,
    save_weights,
    sr_forward,
)
from .objectives import IdmLossWeights, LossBreakdown, idm_total
from .training import IDM_PRESETS, ISR_PRESETS, Enhancer, IdmConfig, IsrConfig, enhance, train_idm, train_isr

__version__ = "0.1.0"
