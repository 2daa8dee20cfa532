"""Training loops for the dehazing (IDM) and super-resolution (ISR) stages,
plus checkpointing and the inference pipeline.

Randomness is keyed rather than streamed: data order is drawn from
``(seed, epoch)`` and every augmentation from ``(seed, domain, epoch, index)``.
Only the fake-image pools consume a running generator, and its state is
checkpointed, so a resumed run reproduces an uninterrupted one bitwise.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from safetensors.torch import load_file, save_file

from . import imaging
from .imaging import AugmentSpec, DatasetManifest
from .networks import (
    FeatureExtractor,
    FeatureExtractorConfig,
    GeneratorConfig,
    PatchDiscriminatorConfig,
    SRDiscriminatorConfig,
    SRGeneratorConfig,
    build,
    generator_forward,
    load_weights,
    read_weights_metadata,
    save_weights,
    sr_forward,
)
from .objectives import (
    DivergenceError,
    IdmLossWeights,
    LossBreakdown,
    SrLossWeights,
    cycle_loss,
    idm_total,
    lsgan_d_loss,
    lsgan_g_loss,
    perceptual_loss,
    relativistic_losses,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


class _Config:
    """Shared JSON round-tripping for the flat config dataclasses."""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict):
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - set(names))
        if unknown:
            raise ValueError(f"unknown {cls.__name__} keys: {unknown}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class IdmConfig(_Config):
    preset: str = "paper"
    working_size: tuple = (480, 270)
    crop_size: tuple | None = None
    epochs: int = 400
    batch_size: int = 1
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_cyc: float = 10.0
    beta_percep: float = 1.5
    pool_size: int = 50
    seed: int = 0
    gen_width: int = 64
    gen_blocks: int = 9
    disc_width: int = 64
    disc_layers: int = 3
    fe_mode: str = "vgg16"
    fe_seed: int = 0
    fe_weights: str | None = None
    hflip_prob: float = 0.5
    scale_range: tuple = (0.8, 1.2)
    aug_multiplier: int = 23
    offline_augment: bool = False
    checkpoint_every: int = 10
    deterministic: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1 or self.aug_multiplier < 1 or self.pool_size < 0:
            raise ValueError("batch_size and aug_multiplier must be >= 1, pool_size >= 0")
        IdmLossWeights(self.lambda_cyc, self.beta_percep)

    @property
    def weights(self) -> IdmLossWeights:
        return IdmLossWeights(self.lambda_cyc, self.beta_percep)

    @property
    def train_size(self) -> tuple:
        return tuple(self.crop_size or self.working_size)


@dataclass(frozen=True)
class IsrConfig(_Config):
    preset: str = "paper"
    crop: int = 224
    blur_sigma: float = 5.0
    p_blur: float = 0.5
    blur_stage: str = "lr"  # "lr": blur after downsampling, "hr": before
    epochs: int = 400
    batch_size: int = 16
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    sr_feat: int = 64
    sr_blocks: int = 23
    sr_growth: int = 32
    disc_width: int = 64
    fe_mode: str = "vgg16"
    fe_seed: int = 0
    fe_weights: str | None = None
    w_percep: float = 1.0
    w_adv: float = 5e-3
    w_l1: float = 1e-2
    pretrain_steps: int = 0
    pretrain_lr: float = 2e-4
    seed: int = 0
    checkpoint_every: int = 10
    deterministic: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0 or self.pretrain_lr <= 0:
            raise ValueError("lr and pretrain_lr must be > 0")
        if self.crop % 32:
            raise ValueError(f"crop must be a multiple of 32, got {self.crop}")
        if not 0 <= self.p_blur <= 1:
            raise ValueError("p_blur must lie in [0, 1]")
        if self.blur_stage not in ("lr", "hr"):
            raise ValueError("blur_stage must be 'lr' or 'hr'")

    @property
    def loss_weights(self) -> SrLossWeights:
        return SrLossWeights(self.w_percep, self.w_adv, self.w_l1)


IDM_PRESETS = {
    "paper": IdmConfig(),
    "desk": IdmConfig(preset="desk", working_size=(128, 72), epochs=50, batch_size=4, gen_width=32,
                      gen_blocks=4, disc_width=32, fe_mode="random", aug_multiplier=1),
}

ISR_PRESETS = {
    "paper": IsrConfig(),
    "desk": IsrConfig(preset="desk", crop=96, epochs=50, batch_size=4, sr_feat=32, sr_blocks=4,
                      sr_growth=16, disc_width=16, fe_mode="random", pretrain_steps=300),
}


def lr_factor(epoch: int, epochs: int) -> float:
    """Constant for the first half of training, then linear decay towards 0."""
    n_const = epochs - epochs // 2
    n_decay = epochs // 2
    return 1.0 - max(0, epoch + 1 - n_const) / float(n_decay + 1)


def _rng(*keys) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in keys])


def set_deterministic(flag: bool = True):
    if flag:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


# --------------------------------------------------------------------------
# Data
# --------------------------------------------------------------------------


class ImagePool:
    """History buffer of generated images for discriminator updates.

    Until full, every incoming image is stored and returned. Afterwards each
    incoming image is, with probability 0.5, swapped with a random stored one
    (the stored one is returned); otherwise it is returned unchanged.
    """

    def __init__(self, capacity: int = 50, rng: np.random.Generator | None = None):
        self.capacity = capacity
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.images = []

    def __len__(self):
        return len(self.images)

    def query(self, images: torch.Tensor) -> torch.Tensor:
        if self.capacity == 0:
            return images
        out = []
        for img in images.detach():
            if len(self.images) < self.capacity:
                self.images.append(img.clone())
                out.append(img)
            elif self.rng.random() > 0.5:
                idx = int(self.rng.integers(0, self.capacity))
                out.append(self.images[idx])
                self.images[idx] = img.clone()
            else:
                out.append(img)
        return torch.stack(out)


class DomainData:
    """One image domain, held in memory at the working size in ``[0, 1]``.

    ``len(self)`` counts augmented instances: every source image appears
    ``multiplier`` times per epoch under different augmentations.
    """

    def __init__(self, manifest: DatasetManifest, working_size, aug: AugmentSpec, multiplier: int,
                 seed: int, domain_id: int, offline: bool = False):
        if len(manifest) == 0:
            raise ValueError("manifest is empty")
        w, h = working_size
        self.images = []
        for rec in manifest:
            t = imaging.to_tensor(imaging.load_image(manifest.resolve(rec.image_path)))
            if tuple(t.shape[-2:]) != (h, w):
                t = imaging.resize_bicubic(t, w, h).clamp(0, 1)
            self.images.append(t)
        self.aug, self.multiplier, self.seed = aug, multiplier, seed
        self.domain_id, self.offline = domain_id, offline

    def __len__(self):
        return len(self.images) * self.multiplier

    def get(self, epoch: int, index: int) -> torch.Tensor:
        key = 0 if self.offline else epoch
        img = self.images[index % len(self.images)]
        return imaging.augment(img, self.aug, _rng(self.seed, self.domain_id, key, index))

    def batch(self, epoch: int, indices) -> torch.Tensor:
        return torch.stack([self.get(epoch, int(i)) for i in indices]) * 2.0 - 1.0


def epoch_batches(n_x: int, n_y: int, batch_size: int, seed: int, epoch: int):
    """Index batches pairing the two domains; the smaller domain is cycled."""
    rng = _rng(seed, 99, epoch)
    perm_x, perm_y = rng.permutation(n_x), rng.permutation(n_y)
    n = max(n_x, n_y)
    steps = max(1, n // batch_size)
    for s in range(steps):
        pos = range(s * batch_size, (s + 1) * batch_size)
        yield [perm_x[i % n_x] for i in pos], [perm_y[i % n_y] for i in pos]


# --------------------------------------------------------------------------
# Checkpoint helpers
# --------------------------------------------------------------------------


def _optimizer_tensors(prefix: str, opt: torch.optim.Optimizer):
    sd = opt.state_dict()
    tensors = {}
    for idx, st in sd["state"].items():
        for k, v in st.items():
            tensors[f"{prefix}.{idx}.{k}"] = torch.as_tensor(v).detach().clone().contiguous()
    return tensors, sd["param_groups"]


def _restore_optimizer(prefix: str, opt: torch.optim.Optimizer, tensors: dict, groups):
    state = {}
    for key, value in tensors.items():
        head, idx, name = key.split(".", 2)
        if head == prefix:
            state.setdefault(int(idx), {})[name] = value
    opt.load_state_dict({"state": state, "param_groups": groups})


def _write_state(path: Path, state: dict):
    path.write_text(json.dumps(state, sort_keys=True, indent=1) + "\n")


def _read_state(ckpt_dir: Path) -> dict:
    path = Path(ckpt_dir) / "state.json"
    if not path.is_file():
        raise FileNotFoundError(f"not a checkpoint directory (no state.json): {ckpt_dir}")
    return json.loads(path.read_text())


def _make_fe(mode, seed, weights):
    return FeatureExtractor(FeatureExtractorConfig(mode=mode, seed=seed, weights_path=weights))


# --------------------------------------------------------------------------
# Dehazing trainer
# --------------------------------------------------------------------------


class IdmTrainer:
    """Owns the two generators, two discriminators, optimizers and pools."""

    def __init__(self, config: IdmConfig, fe: FeatureExtractor | None = None):
        self.config = config
        set_deterministic(config.deterministic)
        s = config.seed
        gcfg = GeneratorConfig(config.gen_width, config.gen_blocks)
        dcfg = PatchDiscriminatorConfig(config.disc_width, config.disc_layers)
        self.G = build("GeneratorNet", gcfg, seed=s * 10 + 1)
        self.F = build("GeneratorNet", gcfg, seed=s * 10 + 2)
        self.D_X = build("PatchDiscriminator", dcfg, seed=s * 10 + 3)
        self.D_Y = build("PatchDiscriminator", dcfg, seed=s * 10 + 4)
        self.fe = fe if fe is not None else _make_fe(config.fe_mode, config.fe_seed, config.fe_weights)
        betas = (config.beta1, config.beta2)
        self.opt_g = torch.optim.Adam(list(self.G.parameters()) + list(self.F.parameters()), config.lr, betas)
        self.opt_d = torch.optim.Adam(list(self.D_X.parameters()) + list(self.D_Y.parameters()), config.lr, betas)
        self.pool_rng = _rng(s, 7)
        self.pool_x = ImagePool(config.pool_size, self.pool_rng)
        self.pool_y = ImagePool(config.pool_size, self.pool_rng)
        self.epoch = 0  # next epoch to run
        self.iteration = 0

    def networks(self):
        return {"G": self.G, "F": self.F, "D_X": self.D_X, "D_Y": self.D_Y}

    def set_lr(self, epoch: int):
        lr = self.config.lr * lr_factor(epoch, self.config.epochs)
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr

    def _check(self, name, value):
        if not torch.isfinite(value).all():
            raise DivergenceError(f"non-finite {name} loss at iteration {self.iteration}")

    def _term(self, name, fn, *args):
        try:
            value = fn(*args)
        except DivergenceError as exc:
            raise DivergenceError(f"non-finite {name} loss at iteration {self.iteration} ({exc})") from exc
        self._check(name, value)
        return value

    def step(self, x: torch.Tensor, y: torch.Tensor) -> LossBreakdown:
        """One generator update then one discriminator update.

        ``x`` (LQ) and ``y`` (HQ) are ``(N, 3, H, W)`` batches in ``[-1, 1]``.
        """
        w = self.config.weights
        for d in (self.D_X, self.D_Y):
            d.requires_grad_(False)
        fake_y = generator_forward(self.G, x)
        rec_x = generator_forward(self.F, fake_y)
        fake_x = generator_forward(self.F, y)
        rec_y = generator_forward(self.G, fake_x)
        adv_xy = self._term("adv_g_xy", lsgan_g_loss, self.D_Y(fake_y))
        adv_yx = self._term("adv_g_yx", lsgan_g_loss, self.D_X(fake_x))
        cyc = self._term("cyc", cycle_loss, x, rec_x, y, rec_y)
        if w.beta_percep > 0:
            percep = self._term("percep", perceptual_loss, self.fe, x, fake_y, y, fake_x)
        else:
            percep = torch.zeros((), dtype=x.dtype)
        total = self._term("total", idm_total, adv_xy, adv_yx, cyc, percep, w)
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        self.opt_g.step()

        for d in (self.D_X, self.D_Y):
            d.requires_grad_(True)
        pooled_y = self.pool_y.query(fake_y.detach())
        pooled_x = self.pool_x.query(fake_x.detach())
        adv_d_y = 0.5 * self._term("adv_d_y", lsgan_d_loss, self.D_Y(y), self.D_Y(pooled_y))
        adv_d_x = 0.5 * self._term("adv_d_x", lsgan_d_loss, self.D_X(x), self.D_X(pooled_x))
        self.opt_d.zero_grad(set_to_none=True)
        (adv_d_x + adv_d_y).backward()
        self.opt_d.step()
        self.iteration += 1
        return LossBreakdown(adv_g_xy=adv_xy.item(), adv_g_yx=adv_yx.item(), adv_d_x=adv_d_x.item(),
                             adv_d_y=adv_d_y.item(), cyc=cyc.item(), percep=percep.item(),
                             total=total.item())

    @torch.no_grad()
    def translate(self, x: torch.Tensor) -> torch.Tensor:
        """LQ -> HQ on ``[-1, 1]`` inputs of any size."""
        return generator_forward(self.G, x)

    # -- checkpoints -------------------------------------------------------

    def save_checkpoint(self, ckpt_dir) -> Path:
        ckpt_dir = Path(ckpt_dir)
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        for name, net in self.networks().items():
            save_weights(net, ckpt_dir / f"{name}.safetensors", seed=self.config.seed, epoch=self.epoch)
        t_g, groups_g = _optimizer_tensors("opt_g", self.opt_g)
        t_d, groups_d = _optimizer_tensors("opt_d", self.opt_d)
        save_file({**t_g, **t_d}, str(ckpt_dir / "optimizer.safetensors"))
        pools = {}
        if self.pool_x.images:
            pools["pool_x"] = torch.stack(self.pool_x.images).contiguous()
        if self.pool_y.images:
            pools["pool_y"] = torch.stack(self.pool_y.images).contiguous()
        save_file(pools, str(ckpt_dir / "pools.safetensors"))
        _write_state(ckpt_dir / "state.json", {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "kind": "idm",
            "epoch": self.epoch,
            "iteration": self.iteration,
            "config": self.config.to_dict(),
            "config_hash": self.config.config_hash(),
            "pool_rng": self.pool_rng.bit_generator.state,
            "param_groups": {"opt_g": groups_g, "opt_d": groups_d},
        })
        return ckpt_dir

    @classmethod
    def from_checkpoint(cls, ckpt_dir, fe: FeatureExtractor | None = None) -> "IdmTrainer":
        ckpt_dir = Path(ckpt_dir)
        state = _read_state(ckpt_dir)
        if state.get("kind") != "idm":
            raise ValueError(f"{ckpt_dir} is not a dehazing checkpoint")
        trainer = cls(IdmConfig.from_dict(state["config"]), fe=fe)
        if trainer.config.config_hash() != state["config_hash"]:
            raise ValueError(f"{ckpt_dir}: config hash mismatch")
        for name, net in trainer.networks().items():
            load_weights(ckpt_dir / f"{name}.safetensors", net)
        opt_tensors = load_file(str(ckpt_dir / "optimizer.safetensors"))
        _restore_optimizer("opt_g", trainer.opt_g, opt_tensors, state["param_groups"]["opt_g"])
        _restore_optimizer("opt_d", trainer.opt_d, opt_tensors, state["param_groups"]["opt_d"])
        pools = load_file(str(ckpt_dir / "pools.safetensors"))
        trainer.pool_x.images = list(pools["pool_x"].unbind(0)) if "pool_x" in pools else []
        trainer.pool_y.images = list(pools["pool_y"].unbind(0)) if "pool_y" in pools else []
        trainer.pool_rng.bit_generator.state = state["pool_rng"]
        trainer.epoch = state["epoch"]
        trainer.iteration = state["iteration"]
        return trainer


def _append_log(path: Path, record: dict):
    for k, v in record.items():
        if isinstance(v, float) and not math.isfinite(v):
            raise DivergenceError(f"non-finite {k} in log record at iteration {record.get('iter')}")
    with path.open("a") as fh:
        fh.write(json.dumps(record) + "\n")


def train_idm(config: IdmConfig, lq_manifest: DatasetManifest, hq_manifest: DatasetManifest, out_dir,
              resume=None, fe: FeatureExtractor | None = None, stop_epoch: int | None = None) -> Path:
    """Train the dehazing networks; returns the final checkpoint directory.

    Writes ``config.json``, ``train_log.jsonl`` and ``checkpoints/epoch_XXXX``
    under ``out_dir``. ``resume`` continues from a checkpoint directory;
    ``stop_epoch`` ends early (used to split a run for resumption).
    """
    if len(lq_manifest) == 0:
        raise ValueError("LQ manifest is empty")
    if len(hq_manifest) == 0:
        raise ValueError("HQ manifest is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trainer = IdmTrainer.from_checkpoint(resume, fe) if resume else IdmTrainer(config, fe)
    config = trainer.config
    (out_dir / "config.json").write_text(json.dumps(config.to_dict(), sort_keys=True, indent=1) + "\n")
    aug = AugmentSpec(target_size=config.train_size, hflip_prob=config.hflip_prob,
                      scale_range=config.scale_range, seed=config.seed)
    data_x = DomainData(lq_manifest, config.working_size, aug, config.aug_multiplier, config.seed, 1,
                        config.offline_augment)
    data_y = DomainData(hq_manifest, config.working_size, aug, config.aug_multiplier, config.seed, 2,
                        config.offline_augment)
    log_path = out_dir / "train_log.jsonl"
    last = stop_epoch if stop_epoch is not None else config.epochs
    ckpt = None
    for epoch in range(trainer.epoch, last):
        trainer.set_lr(epoch)
        for ix, iy in epoch_batches(len(data_x), len(data_y), config.batch_size, config.seed, epoch):
            losses = trainer.step(data_x.batch(epoch, ix), data_y.batch(epoch, iy))
            _append_log(log_path, {"epoch": epoch, "iter": trainer.iteration, **losses.as_dict()})
        trainer.epoch = epoch + 1
        log.info("epoch %d/%d done: %s", epoch + 1, config.epochs, losses)
        if (epoch + 1) % config.checkpoint_every == 0 or epoch + 1 == last:
            ckpt = trainer.save_checkpoint(out_dir / "checkpoints" / f"epoch_{epoch + 1:04d}")
    if ckpt is None:
        ckpt = trainer.save_checkpoint(out_dir / "checkpoints" / f"epoch_{trainer.epoch:04d}")
    return ckpt


# --------------------------------------------------------------------------
# Super-resolution trainer
# --------------------------------------------------------------------------


def make_lr(hr: torch.Tensor, config: IsrConfig, rng: np.random.Generator) -> torch.Tensor:
    """Bicubic 1/4 downsample with Gaussian blur applied with probability
    ``p_blur`` (to the LR result by default, or to the HR input)."""
    size = hr.shape[-1] // 4
    out = []
    for img in hr:
        blur = rng.random() < config.p_blur
        if blur and config.blur_stage == "hr":
            img = imaging.gaussian_blur(img, config.blur_sigma)
        lr = imaging.resize_bicubic(img, size, hr.shape[-2] // 4)
        if blur and config.blur_stage == "lr":
            lr = imaging.gaussian_blur(lr, config.blur_sigma)
        out.append(lr)
    return torch.stack(out)


class IsrTrainer:
    def __init__(self, config: IsrConfig, fe: FeatureExtractor | None = None):
        self.config = config
        set_deterministic(config.deterministic)
        s = config.seed
        self.S = build("SRGeneratorNet", SRGeneratorConfig(config.sr_feat, config.sr_blocks, config.sr_growth),
                       seed=s * 10 + 5)
        self.D = build("SRDiscriminator", SRDiscriminatorConfig(config.crop, config.disc_width), seed=s * 10 + 6)
        self.fe = fe if fe is not None else _make_fe(config.fe_mode, config.fe_seed, config.fe_weights)
        self.opt_s = torch.optim.Adam(self.S.parameters(), config.lr, (config.beta1, config.beta2))
        self.opt_d = torch.optim.Adam(self.D.parameters(), config.lr, (config.beta1, config.beta2))
        self.epoch = 0
        self.iteration = 0

    def networks(self):
        return {"S": self.S, "D_SR": self.D}

    def step(self, hr: torch.Tensor, lr: torch.Tensor) -> dict:
        """One S update then (after the L1 warm-up) one D_SR update.

        ``hr`` is an ``(N, 3, crop, crop)`` batch in ``[0, 1]`` and ``lr`` its
        degraded quarter-size version.
        """
        if tuple(hr.shape[-2:]) != (self.config.crop, self.config.crop):
            raise ValueError(f"HR crops must be {self.config.crop}x{self.config.crop}")
        w = self.config.loss_weights
        warmup = self.iteration < self.config.pretrain_steps
        for group in self.opt_s.param_groups:
            group["lr"] = self.config.pretrain_lr if warmup else self.config.lr
        self.D.requires_grad_(False)
        sr = self.S(lr)
        l1 = (sr - hr).abs().mean()
        if warmup:
            g_total = l1
            percep = adv_g = adv_d = torch.zeros(())
        else:
            percep = (self.fe(sr, "unit") - self.fe(hr, "unit")).abs().mean()
            d_real = self.D(hr).detach()
            try:
                adv_g, _ = relativistic_losses(d_real, self.D(sr))
            except DivergenceError as exc:
                raise DivergenceError(f"non-finite SR adversarial loss at iteration {self.iteration}") from exc
            g_total = w.perceptual * percep + w.adversarial * adv_g + w.l1 * l1
        if not torch.isfinite(g_total):
            raise DivergenceError(f"non-finite SR generator loss at iteration {self.iteration}")
        self.opt_s.zero_grad(set_to_none=True)
        g_total.backward()
        self.opt_s.step()
        if not warmup:
            self.D.requires_grad_(True)
            try:
                _, adv_d = relativistic_losses(self.D(hr), self.D(sr.detach()))
            except DivergenceError as exc:
                raise DivergenceError(f"non-finite SR discriminator loss at iteration {self.iteration}") from exc
            if not torch.isfinite(adv_d):
                raise DivergenceError(f"non-finite SR discriminator loss at iteration {self.iteration}")
            self.opt_d.zero_grad(set_to_none=True)
            adv_d.backward()
            self.opt_d.step()
        self.iteration += 1
        return {"l1": l1.item(), "perceptual": percep.item(), "adv_g": adv_g.item(),
                "adv_d": adv_d.item(), "g_total": g_total.item()}

    def save_checkpoint(self, ckpt_dir) -> Path:
        ckpt_dir = Path(ckpt_dir)
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        for name, net in self.networks().items():
            save_weights(net, ckpt_dir / f"{name}.safetensors", seed=self.config.seed, epoch=self.epoch)
        t_s, groups_s = _optimizer_tensors("opt_s", self.opt_s)
        t_d, groups_d = _optimizer_tensors("opt_d", self.opt_d)
        save_file({**t_s, **t_d}, str(ckpt_dir / "optimizer.safetensors"))
        _write_state(ckpt_dir / "state.json", {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "kind": "isr",
            "epoch": self.epoch,
            "iteration": self.iteration,
            "config": self.config.to_dict(),
            "config_hash": self.config.config_hash(),
            "param_groups": {"opt_s": groups_s, "opt_d": groups_d},
        })
        return ckpt_dir

    @classmethod
    def from_checkpoint(cls, ckpt_dir, fe: FeatureExtractor | None = None) -> "IsrTrainer":
        ckpt_dir = Path(ckpt_dir)
        state = _read_state(ckpt_dir)
        if state.get("kind") != "isr":
            raise ValueError(f"{ckpt_dir} is not a super-resolution checkpoint")
        trainer = cls(IsrConfig.from_dict(state["config"]), fe=fe)
        for name, net in trainer.networks().items():
            load_weights(ckpt_dir / f"{name}.safetensors", net)
        opt_tensors = load_file(str(ckpt_dir / "optimizer.safetensors"))
        _restore_optimizer("opt_s", trainer.opt_s, opt_tensors, state["param_groups"]["opt_s"])
        _restore_optimizer("opt_d", trainer.opt_d, opt_tensors, state["param_groups"]["opt_d"])
        trainer.epoch = state["epoch"]
        trainer.iteration = state["iteration"]
        return trainer


def random_crops(images, crop: int, count: int, rng: np.random.Generator) -> torch.Tensor:
    """``count`` random ``crop x crop`` patches drawn from ``images`` (reflect-padded if small)."""
    out = []
    for _ in range(count):
        img = images[int(rng.integers(0, len(images)))]
        h, w = img.shape[-2:]
        if h < crop or w < crop:
            ph, pw = max(0, crop - h), max(0, crop - w)
            img = imaging.reflect_pad(img, ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
            h, w = img.shape[-2:]
        top = int(rng.integers(0, h - crop + 1))
        left = int(rng.integers(0, w - crop + 1))
        out.append(img[:, top:top + crop, left:left + crop])
    return torch.stack(out)


def train_isr(config: IsrConfig, hq_manifest: DatasetManifest, out_dir, resume=None,
              fe: FeatureExtractor | None = None) -> Path:
    """Train the x4 super-resolution networks on HQ images only."""
    hq = hq_manifest.filter("HQ")
    if len(hq) == 0:
        # A paired manifest contributes its clean halves.
        hq = imaging.hq_manifest(hq_manifest)
    if len(hq) == 0:
        raise ValueError("manifest holds no HQ-domain images")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trainer = IsrTrainer.from_checkpoint(resume, fe) if resume else IsrTrainer(config, fe)
    config = trainer.config
    (out_dir / "config.json").write_text(json.dumps(config.to_dict(), sort_keys=True, indent=1) + "\n")
    images = [imaging.to_tensor(imaging.load_image(hq.resolve(r.image_path))) for r in hq]
    log_path = out_dir / "train_log.jsonl"
    steps = max(1, len(images) // config.batch_size)
    ckpt = None
    for epoch in range(trainer.epoch, config.epochs):
        for s in range(steps):
            rng = _rng(config.seed, 3, epoch, s)
            hr = random_crops(images, config.crop, config.batch_size, rng)
            parts = trainer.step(hr, make_lr(hr, config, rng))
            _append_log(log_path, {"epoch": epoch, "iter": trainer.iteration, **parts})
        trainer.epoch = epoch + 1
        if (epoch + 1) % config.checkpoint_every == 0 or epoch + 1 == config.epochs:
            ckpt = trainer.save_checkpoint(out_dir / "checkpoints" / f"epoch_{epoch + 1:04d}")
    if ckpt is None:
        ckpt = trainer.save_checkpoint(out_dir / "checkpoints" / f"epoch_{trainer.epoch:04d}")
    return ckpt


# --------------------------------------------------------------------------
# Inference
# --------------------------------------------------------------------------


@dataclass
class Enhancer:
    """Loaded inference pipeline: resize to the working size, translate,
    optionally super-resolve by 4x."""

    generator: torch.nn.Module
    working_size: tuple
    sr: torch.nn.Module | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def load(cls, idm_checkpoint, isr_checkpoint=None) -> "Enhancer":
        idm_checkpoint = Path(idm_checkpoint)
        state = _read_state(idm_checkpoint)
        if state.get("kind") != "idm":
            raise ValueError(f"{idm_checkpoint} is not a dehazing checkpoint")
        meta = read_weights_metadata(idm_checkpoint / "G.safetensors")
        if meta["class"] != "GeneratorNet":
            raise ValueError(f"{idm_checkpoint}/G.safetensors holds a {meta['class']}")
        cfg = state["config"]
        if meta["config"] != asdict(GeneratorConfig(cfg["gen_width"], cfg["gen_blocks"])):
            raise ValueError(f"{idm_checkpoint}: generator weights do not match the checkpoint config")
        gen = load_weights(idm_checkpoint / "G.safetensors").eval()
        sr = None
        if isr_checkpoint is not None:
            isr_state = _read_state(Path(isr_checkpoint))
            if isr_state.get("kind") != "isr":
                raise ValueError(f"{isr_checkpoint} is not a super-resolution checkpoint")
            sr = load_weights(Path(isr_checkpoint) / "S.safetensors").eval()
        return cls(gen, tuple(cfg["working_size"]), sr, {"idm": str(idm_checkpoint),
                                                          "isr": str(isr_checkpoint) if isr_checkpoint else None})

    @torch.no_grad()
    def __call__(self, img: np.ndarray) -> np.ndarray:
        w, h = self.working_size
        t = imaging.to_tensor(img)
        if tuple(t.shape[-2:]) != (h, w):
            t = imaging.resize_bicubic(t, w, h)
        t = t.clamp(0, 1) * 2.0 - 1.0
        out = (generator_forward(self.generator, t) + 1.0) / 2.0
        if self.sr is not None:
            out = sr_forward(self.sr, out)
        return imaging.from_tensor(out.clamp(0, 1))


def enhance(idm_checkpoint, image: np.ndarray, isr_checkpoint=None) -> np.ndarray:
    return Enhancer.load(idm_checkpoint, isr_checkpoint)(image)
