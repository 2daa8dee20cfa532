"""Image I/O, tensor conversion, resampling, augmentation and synthetic haze.

Images on disk are 8-bit RGB and live in memory as ``uint8`` arrays of shape
``(H, W, 3)``. Everything numeric works on float tensors of shape ``(3, H, W)``
or ``(N, 3, H, W)``; the I/O domain is ``[0, 1]`` and the network domain is
``[-1, 1]``.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage
from PIL import UnidentifiedImageError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class ImageDecodeError(ValueError):
    pass


class NonFiniteTensorError(ValueError):
    pass


# --------------------------------------------------------------------------
# I/O and conversion
# --------------------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """Read a PNG/JPEG as an ``(H, W, 3)`` uint8 RGB array.

    Grayscale and palette images are expanded to three channels.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    try:
        with PILImage.open(path) as im:
            im.load()
            rgb = im.convert("RGB")
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc
    return np.asarray(rgb, dtype=np.uint8).copy()


def save_image(img: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(np.ascontiguousarray(img, dtype=np.uint8), "RGB").save(path)


def to_tensor(img: np.ndarray, value_range: str = "unit") -> torch.Tensor:
    """uint8 ``(H, W, 3)`` -> float32 ``(3, H, W)`` in ``[0, 1]`` or ``[-1, 1]``."""
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    t = torch.from_numpy(arr.astype(np.float64).transpose(2, 0, 1) / 255.0)
    if value_range == "symmetric":
        t = 2.0 * t - 1.0
    elif value_range != "unit":
        raise ValueError(f"unknown value_range {value_range!r}")
    return t.float()


def from_tensor(t: torch.Tensor, value_range: str = "unit") -> np.ndarray:
    """Inverse of :func:`to_tensor`: clamp, scale, round half up to uint8."""
    t = t.detach()
    if t.ndim == 4:
        if t.shape[0] != 1:
            raise ValueError("from_tensor expects a single image")
        t = t[0]
    if not torch.isfinite(t).all():
        raise NonFiniteTensorError("tensor contains NaN/Inf values")
    v = t.double()
    if value_range == "symmetric":
        v = (v.clamp(-1.0, 1.0) + 1.0) / 2.0
    elif value_range == "unit":
        v = v.clamp(0.0, 1.0)
    else:
        raise ValueError(f"unknown value_range {value_range!r}")
    q = torch.floor(v * 255.0 + 0.5).clamp(0, 255).to(torch.uint8)
    return q.permute(1, 2, 0).contiguous().numpy()


def _as_batch(t: torch.Tensor):
    if t.ndim == 3:
        return t.unsqueeze(0), True
    if t.ndim == 4:
        return t, False
    raise ValueError(f"expected (C,H,W) or (N,C,H,W) tensor, got shape {tuple(t.shape)}")


# --------------------------------------------------------------------------
# Resampling
# --------------------------------------------------------------------------


def cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    out = np.zeros_like(x)
    near = x < 1
    far = (x >= 1) & (x < 2)
    out[near] = ((a + 2) * x[near] - (a + 3)) * x[near] ** 2 + 1
    out[far] = (((x[far] - 5) * x[far] + 8) * x[far] - 4) * a
    return out


@lru_cache(maxsize=64)
def _resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    # Window-clipped, renormalized cubic taps; the kernel is widened by the
    # scale factor when shrinking so downsampling is antialiased.
    scale = n_in / n_out
    stretch = max(scale, 1.0)
    support = 2.0 * stretch
    centers = (np.arange(n_out) + 0.5) * scale
    lo = np.maximum((centers - support + 0.5).astype(np.int64), 0)
    hi = np.minimum((centers + support + 0.5).astype(np.int64), n_in)
    xs = np.arange(n_in)[None, :]
    weights = cubic_kernel((xs - centers[:, None] + 0.5) / stretch)
    weights[(xs < lo[:, None]) | (xs >= hi[:, None])] = 0.0
    weights /= weights.sum(axis=1, keepdims=True)
    return weights


def resize_bicubic(t: torch.Tensor, out_w: int, out_h: int) -> torch.Tensor:
    """Separable Catmull-Rom (a=-0.5) resize of a ``(…, H, W)`` tensor."""
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output size must be positive, got {out_w}x{out_h}")
    h, w = t.shape[-2:]
    rows = torch.as_tensor(_resample_matrix(h, out_h), dtype=t.dtype, device=t.device)
    cols = torch.as_tensor(_resample_matrix(w, out_w), dtype=t.dtype, device=t.device)
    return rows @ t @ cols.T


def reflect_indices(n: int, idx: np.ndarray) -> np.ndarray:
    """Map arbitrary integer positions into ``[0, n)`` by mirror reflection
    about the edge samples (``abcd -> dcb|abcd|cba``)."""
    idx = np.asarray(idx)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    m = np.abs(idx) % period
    return np.where(m >= n, period - m, m)


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    with np.errstate(over="ignore", divide="ignore"):
        k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


@lru_cache(maxsize=64)
def _blur_matrix(n: int, sigma: float) -> np.ndarray:
    k = gaussian_kernel1d(sigma)
    radius = len(k) // 2
    mat = np.zeros((n, n))
    rows = np.arange(n)
    for j, kv in zip(range(-radius, radius + 1), k):
        np.add.at(mat, (rows, reflect_indices(n, rows + j)), kv)
    return mat


def gaussian_blur(t: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur, radius ``ceil(3*sigma)``, reflect borders."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return t.clone()
    h, w = t.shape[-2:]
    rows = torch.as_tensor(_blur_matrix(h, float(sigma)), dtype=t.dtype, device=t.device)
    cols = torch.as_tensor(_blur_matrix(w, float(sigma)), dtype=t.dtype, device=t.device)
    return rows @ t @ cols.T


def reflect_pad(t: torch.Tensor, top: int, bottom: int, left: int, right: int) -> torch.Tensor:
    """Reflect padding that also works when the pad exceeds the image size."""
    h, w = t.shape[-2:]
    ri = torch.as_tensor(reflect_indices(h, np.arange(-top, h + bottom)), device=t.device)
    ci = torch.as_tensor(reflect_indices(w, np.arange(-left, w + right)), device=t.device)
    return t.index_select(-2, ri).index_select(-1, ci)


# --------------------------------------------------------------------------
# Augmentation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentSpec:
    target_size: tuple  # (width, height)
    hflip_prob: float = 0.5
    scale_range: tuple = (0.8, 1.2)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must lie in [0, 1]")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid scale_range {self.scale_range}")
        if min(self.target_size) < 1:
            raise ValueError(f"invalid target_size {self.target_size}")


def _fit_axis(t: torch.Tensor, dim: int, target: int, rng: np.random.Generator) -> torch.Tensor:
    n = t.shape[dim]
    offset = int(rng.integers(0, max(n - target, 0) + 1))
    if n > target:
        return t.narrow(dim, offset, target)
    if n < target:
        before = (target - n) // 2
        after = target - n - before
        if dim == t.ndim - 2:
            return reflect_pad(t, before, after, 0, 0)
        return reflect_pad(t, 0, 0, before, after)
    return t


def augment(t: torch.Tensor, spec: AugmentSpec, rng=None) -> torch.Tensor:
    """Random horizontal flip, random scale, then crop or reflect-pad to
    ``spec.target_size``.

    The input is resized by ``u ~ U(scale_range)``; oversize axes get a random
    crop and undersize axes a centered reflect pad.
    ``rng`` may be a ``numpy.random.Generator`` or an int seed; when omitted
    ``spec.seed`` is used. Every call draws the same number of variates, so
    results depend only on the generator state.
    """
    if rng is None:
        rng = spec.seed
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    flip = rng.random() < spec.hflip_prob
    u = rng.uniform(*spec.scale_range)
    tw, th = spec.target_size
    out = torch.flip(t, dims=[-1]) if flip else t
    h, w = out.shape[-2:]
    new_w, new_h = max(1, round(w * u)), max(1, round(h * u))
    if (new_h, new_w) != tuple(out.shape[-2:]):
        out = resize_bicubic(out, new_w, new_h)
    out = _fit_axis(out, out.ndim - 2, th, rng)
    out = _fit_axis(out, out.ndim - 1, tw, rng)
    return out.contiguous()


# --------------------------------------------------------------------------
# Haze synthesis
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DegradationParams:
    """Atmospheric scattering ``I = J*t + A*(1-t)`` followed by defocus blur.

    ``field_amplitude > 0`` turns the scalar transmission into a smooth
    spatial field built from a seeded 8x8 grid.
    """

    airlight: float | tuple = 1.0
    transmission: float = 1.0
    defocus_sigma: float = 0.0
    seed: int = 0
    field_amplitude: float = 0.0

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.airlight, dtype=np.float64))
        if a.size not in (1, 3) or (a < 0).any() or (a > 1).any():
            raise ValueError(f"airlight must be in [0, 1] (scalar or RGB), got {self.airlight}")
        # t = 0 (pure airlight) is accepted; the formula is still well defined.
        if not 0.0 <= self.transmission <= 1.0:
            raise ValueError(f"transmission must be in [0, 1], got {self.transmission}")
        if self.defocus_sigma < 0:
            raise ValueError("defocus_sigma must be >= 0")
        if self.field_amplitude < 0:
            raise ValueError("field_amplitude must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(self.airlight, tuple):
            d["airlight"] = list(self.airlight)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationParams":
        d = dict(d)
        if isinstance(d.get("airlight"), list):
            d["airlight"] = tuple(d["airlight"])
        return cls(**d)


def transmission_map(p: DegradationParams, height: int, width: int) -> torch.Tensor:
    """``(1, H, W)`` float64 transmission; constant unless ``field_amplitude``."""
    if p.field_amplitude == 0:
        return torch.full((1, height, width), float(p.transmission), dtype=torch.float64)
    grid = np.random.default_rng(p.seed).uniform(-1.0, 1.0, size=(1, 1, 8, 8))
    smooth = F.interpolate(torch.from_numpy(grid), size=(height, width), mode="bilinear", align_corners=True)
    return (p.transmission + p.field_amplitude * smooth[0]).clamp(1e-3, 1.0)


def apply_degradation(clean: torch.Tensor, p: DegradationParams) -> torch.Tensor:
    """Haze then defocus a ``[0, 1]`` image; output is clamped to ``[0, 1]``."""
    batch, squeeze = _as_batch(clean)
    h, w = batch.shape[-2:]
    j = batch.double()
    t = transmission_map(p, h, w)
    a = torch.as_tensor(np.broadcast_to(np.asarray(p.airlight, dtype=np.float64), (3,)).copy()).view(3, 1, 1)
    hazy = j * t + a * (1.0 - t)
    out = gaussian_blur(hazy, p.defocus_sigma).clamp(0.0, 1.0).to(clean.dtype)
    return out[0] if squeeze else out


@dataclass(frozen=True)
class ParamRanges:
    transmission: tuple = (0.4, 0.9)
    airlight: tuple = (0.7, 1.0)
    defocus_sigma: tuple = (0.0, 3.0)
    field_amplitude: float = 0.0

    def sample(self, rng: np.random.Generator, seed: int) -> DegradationParams:
        # Fixed draw order keeps manifests stable.
        t = float(rng.uniform(*self.transmission))
        a = float(rng.uniform(*self.airlight))
        s = float(rng.uniform(*self.defocus_sigma))
        return DegradationParams(airlight=a, transmission=t, defocus_sigma=s, seed=seed,
                                 field_amplitude=self.field_amplitude)


# --------------------------------------------------------------------------
# Manifests
# --------------------------------------------------------------------------


@dataclass
class ManifestRecord:
    image_path: str
    domain: str
    clean_path: str | None = None
    params: dict | None = None

    def __post_init__(self):
        if self.domain not in ("LQ", "HQ"):
            raise ValueError(f"domain must be 'LQ' or 'HQ', got {self.domain!r}")

    def to_json(self) -> str:
        d = {"image_path": self.image_path, "domain": self.domain}
        if self.clean_path is not None:
            d["clean_path"] = self.clean_path
        if self.params is not None:
            d["params"] = self.params
        return json.dumps(d, sort_keys=True)


@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)
    root: Path = Path(".")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def filter(self, domain: str) -> "DatasetManifest":
        return DatasetManifest([r for r in self.records if r.domain == domain], self.root)

    def subset(self, indices: Iterable[int]) -> "DatasetManifest":
        return DatasetManifest([self.records[i] for i in indices], self.root)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        # Paths are stored relative to the manifest so copies stay valid.
        lines = []
        for r in self.records:
            rel = ManifestRecord(
                image_path=_relpath(self.resolve(r.image_path), path.parent),
                domain=r.domain,
                clean_path=None if r.clean_path is None else _relpath(self.resolve(r.clean_path), path.parent),
                params=r.params,
            )
            lines.append(rel.to_json())
        path.write_text("".join(line + "\n" for line in lines))
        return path

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"manifest not found: {path}")
        records = []
        for n, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                records.append(ManifestRecord(**json.loads(line)))
            except (json.JSONDecodeError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{n}: bad manifest record: {exc}") from exc
        return cls(records, path.parent)


def _relpath(p: Path, start: Path) -> str:
    return Path(os.path.relpath(Path(p).resolve(), Path(start).resolve())).as_posix()


def list_images(directory) -> list:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def synth_dataset(clean_dir, out_dir, count: int, param_ranges: ParamRanges | None = None,
                  seed: int = 0, size: Sequence[int] | None = None, threads: int = 1) -> DatasetManifest:
    """Write ``count`` hazy/clean pairs and ``manifest.jsonl`` under ``out_dir``.

    Source images are taken from ``clean_dir`` in sorted order, cycling when
    ``count`` exceeds their number, optionally resized to ``size=(w, h)``.
    Parameters for pair ``i`` come from a generator seeded with ``(seed, i)``,
    so output does not depend on ``threads`` or scheduling.
    """
    param_ranges = param_ranges or ParamRanges()
    sources = list_images(clean_dir)
    if not sources:
        raise ValueError(f"no decodable images in {clean_dir}")
    out_dir = Path(out_dir)
    try:
        (out_dir / "lq").mkdir(parents=True, exist_ok=True)
        (out_dir / "hq").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write to {out_dir}: {exc}") from exc

    def make_pair(i):
        rng = np.random.default_rng([seed, i])
        params = param_ranges.sample(rng, seed=int(rng.integers(2**31)))
        clean = to_tensor(load_image(sources[i % len(sources)]))
        if size is not None and tuple(size) != (clean.shape[2], clean.shape[1]):
            clean = resize_bicubic(clean.double(), size[0], size[1]).clamp(0, 1).float()
        clean_img = from_tensor(clean)
        # Degrade the quantized clean image so pairs are exactly consistent.
        hazy = apply_degradation(to_tensor(clean_img), params)
        lq_path = out_dir / "lq" / f"{i:05d}.png"
        hq_path = out_dir / "hq" / f"{i:05d}.png"
        save_image(from_tensor(hazy), lq_path)
        save_image(clean_img, hq_path)
        return ManifestRecord(str(lq_path), "LQ", str(hq_path), params.to_dict())

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            records = list(pool.map(make_pair, range(count)))
    else:
        records = [make_pair(i) for i in range(count)]
    DatasetManifest(records, Path(".")).write(out_dir / "manifest.jsonl")
    return DatasetManifest.read(out_dir / "manifest.jsonl")


def hq_manifest(paired: DatasetManifest) -> DatasetManifest:
    """HQ-domain manifest made from the clean halves of a paired manifest."""
    return DatasetManifest(
        [ManifestRecord(r.clean_path, "HQ") for r in paired.records if r.clean_path is not None],
        paired.root,
    )


# --------------------------------------------------------------------------
# Procedural clean scenes
# --------------------------------------------------------------------------


def render_scene(width: int, height: int, rng: np.random.Generator) -> torch.Tensor:
    """Procedural mucosa-like scene in ``[0, 1]``: saturated reddish tissue,
    bright blobs, dark vessel strokes and fine texture."""
    yy, xx = np.meshgrid(np.linspace(0, 1, height), np.linspace(0, 1, width), indexing="ij")
    base = np.array([0.75, 0.25, 0.25]) + rng.uniform(-0.1, 0.1, 3)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5)
    img = base[:, None, None] * (1.0 + 0.6 * ramp)[None]
    for _ in range(rng.integers(4, 9)):
        cx, cy = rng.uniform(0, 1, 2)
        rx, ry = rng.uniform(0.05, 0.25, 2)
        color = rng.choice([np.array([0.95, 0.75, 0.7]), np.array([0.5, 0.05, 0.1]),
                            np.array([0.9, 0.45, 0.4]), np.array([0.25, 0.05, 0.08])])
        mask = np.exp(-(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2))
        img = img * (1 - mask) + color[:, None, None] * mask
    for _ in range(rng.integers(2, 5)):
        a, b, c, ph = rng.uniform(-1, 1), rng.uniform(0.2, 0.8), rng.uniform(2, 8), rng.uniform(0, 6)
        curve = b + 0.15 * a * np.sin(c * xx + ph)
        mask = np.exp(-(((yy - curve) / rng.uniform(0.008, 0.02)) ** 2))
        img = img * (1 - 0.8 * mask) + np.array([0.3, 0.02, 0.05])[:, None, None] * 0.8 * mask
    noise = rng.normal(0, 1, (1, height, width))
    noise = gaussian_blur(torch.from_numpy(noise), 1.0).numpy()
    img = img + 0.04 * noise
    return torch.from_numpy(np.clip(img, 0, 1)).float()


def make_clean_images(out_dir, count: int, size=(96, 96), seed: int = 0) -> list:
    """Render ``count`` procedural clean scenes to ``out_dir`` as PNG."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        rng = np.random.default_rng([seed, i, 17])
        path = out_dir / f"scene_{i:05d}.png"
        save_image(from_tensor(render_scene(size[0], size[1], rng)), path)
        paths.append(path)
    return paths
