"""Full-reference metrics, feature-preservation distance, the doctor opinion
score harness (rating records, aggregation, reports) and the paired
synthetic benchmark."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from . import imaging
from .networks import FeatureExtractor, generator_forward, load_weights

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 8
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

CONDITIONS = ("original_lq", "cyclegan", "miinet", "hq")
QUALITY_ONLY = frozenset({"original_lq", "hq"})


def _check_pair(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """PSNR in dB for ``[0, 1]`` images, capped at 99 dB for near-identical inputs."""
    _check_pair(a, b)
    mse = float(((a.double() - b.double()) ** 2).mean())
    if mse < 1e-10:
        return PSNR_CAP_DB
    return 10.0 * math.log10(1.0 / mse)


def luma(t: torch.Tensor) -> torch.Tensor:
    w = torch.tensor(LUMA_WEIGHTS, dtype=torch.float64).view(3, 1, 1)
    return (t.double() * w).sum(dim=-3)


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """Mean SSIM of the luma channel over non-overlapping 8x8 windows.

    Trailing rows/columns that do not fill a window are ignored.
    """
    _check_pair(a, b)
    h, w = a.shape[-2:]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")
    hh, ww = h // SSIM_WINDOW * SSIM_WINDOW, w // SSIM_WINDOW * SSIM_WINDOW

    def blocks(t):
        y = luma(t)[..., :hh, :ww]
        y = y.reshape(*y.shape[:-2], hh // SSIM_WINDOW, SSIM_WINDOW, ww // SSIM_WINDOW, SSIM_WINDOW)
        return y.transpose(-3, -2).flatten(-2)

    x, y = blocks(a), blocks(b)
    mx, my = x.mean(-1), y.mean(-1)
    vx = ((x - mx[..., None]) ** 2).mean(-1)
    vy = ((y - my[..., None]) ** 2).mean(-1)
    cov = ((x - mx[..., None]) * (y - my[..., None])).mean(-1)
    num = (2 * mx * my + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mx**2 + my**2 + SSIM_C1) * (vx + vy + SSIM_C2)
    return float((num / den).mean())


@torch.no_grad()
def feature_distance(fe: FeatureExtractor, a: torch.Tensor, b: torch.Tensor, value_range: str = "unit") -> float:
    """``mean |fe(a) - fe(b)|``; inputs default to the ``[0, 1]`` domain."""
    _check_pair(a, b)
    if a.ndim == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    return float((fe(a, value_range) - fe(b, value_range)).abs().double().mean())


# --------------------------------------------------------------------------
# Opinion scores
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RatingRecord:
    image_id: str
    condition: str
    rater_id: str
    quality: int
    reproducibility: int | None = None

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise ValueError(f"unknown condition {self.condition!r}; expected one of {CONDITIONS}")
        for name in ("quality", "reproducibility"):
            v = getattr(self, name)
            if v is None and name == "reproducibility":
                continue
            if isinstance(v, bool) or not isinstance(v, int) or not 1 <= v <= 5:
                raise ValueError(f"{name} score must be an integer 1-5, got {v!r}")
        if (self.reproducibility is None) != (self.condition in QUALITY_ONLY):
            raise ValueError(f"reproducibility must be given for generated conditions only "
                             f"(condition {self.condition!r})")

    @property
    def score(self) -> float:
        if self.reproducibility is None:
            return float(self.quality)
        return (self.quality + self.reproducibility) / 2.0

    def to_json(self) -> str:
        d = asdict(self)
        if d["reproducibility"] is None:
            del d["reproducibility"]
        return json.dumps(d, sort_keys=True)


def read_ratings(path) -> list:
    path = Path(path)
    records = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if line.strip():
            try:
                records.append(RatingRecord(**json.loads(line)))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{n}: {exc}") from exc
    return records


def append_ratings(path, records: Iterable[RatingRecord]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


@dataclass
class ConditionStats:
    mean: float
    std: float
    n: int
    scores: list  # descending


@dataclass
class MdosReport:
    conditions: dict
    metadata: dict = field(default_factory=lambda: {
        "std": "population",
        "per_image_pre_averaging": False,
        "generated_score": "mean(quality, reproducibility)",
    })

    def rows(self):
        order = [c for c in CONDITIONS if c in self.conditions]
        return [(c, self.conditions[c].mean, self.conditions[c].std, self.conditions[c].n) for c in order]

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["condition", "mean", "std", "n"])
            for c, m, s, n in self.rows():
                writer.writerow([c, f"{m:.4f}", f"{s:.4f}", n])
        return path

    def distribution_csv(self, path) -> Path:
        """Descending score curve per condition, one row per rank."""
        path = Path(path)
        order = [c for c in CONDITIONS if c in self.conditions]
        longest = max(len(self.conditions[c].scores) for c in order)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rank", *order])
            for i in range(longest):
                writer.writerow([i] + [self.conditions[c].scores[i] if i < len(self.conditions[c].scores) else ""
                                       for c in order])
        return path

    def plot_svg(self, path) -> Path:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        path = Path(path)
        fig, ax = plt.subplots(figsize=(6, 4))
        for c, m, s, n in self.rows():
            ax.plot(range(1, n + 1), self.conditions[c].scores, label=f"{c} ({m:.2f}±{s:.2f})")
        ax.set_xlabel("rank")
        ax.set_ylabel("score")
        ax.set_ylim(0.8, 5.2)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        return path


def aggregate_mdos(records: Iterable[RatingRecord]) -> MdosReport:
    """Per-condition mean and population std over all (rater, image) scores.

    Generated conditions score each record as the mean of its quality and
    reproducibility ratings. Sums run over sorted values, so the report is
    independent of record order.
    """
    records = list(records)
    if not records:
        raise ValueError("no rating records")
    seen = set()
    by_condition = {}
    for r in records:
        key = (r.image_id, r.condition, r.rater_id)
        if key in seen:
            raise ValueError(f"duplicate rating for image {r.image_id!r}, condition {r.condition!r}, "
                             f"rater {r.rater_id!r}")
        seen.add(key)
        by_condition.setdefault(r.condition, []).append(r.score)
    stats = {}
    for cond, scores in by_condition.items():
        scores = sorted(scores, reverse=True)
        n = len(scores)
        mean = math.fsum(scores) / n
        var = math.fsum((s - mean) ** 2 for s in scores) / n
        stats[cond] = ConditionStats(mean=mean, std=math.sqrt(var), n=n, scores=scores)
    return MdosReport(stats)


@dataclass(frozen=True)
class RatingItem:
    image_id: str
    condition: str
    image_path: str
    original_path: str | None = None


def read_rating_items(path) -> list:
    """Rating queue: JSONL with ``image_id``, ``condition``, ``image_path`` and
    optionally ``original_path`` (shown alongside for reproducibility)."""
    path = Path(path)
    items = []
    for line in path.read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            if d["condition"] not in CONDITIONS:
                raise ValueError(f"{path}: unknown condition {d['condition']!r}")
            items.append(RatingItem(**d))
    return items


def _ask_score(prompt: str, input_fn, output_fn) -> int:
    while True:
        answer = input_fn(prompt).strip()
        if answer in {"1", "2", "3", "4", "5"}:
            return int(answer)
        output_fn("please enter an integer from 1 (bad) to 5 (excellent)")


def rate_session(items, out_path, rater_id: str, seed: int = 0, input_fn=None, output_fn=None) -> list:
    """Present ``items`` in a seeded blinded order and append one record each.

    The condition is never shown. Generated images are also rated for
    reproducibility against the original shown next to them.
    """
    input_fn = input_fn or input
    output_fn = output_fn or print
    order = np.random.default_rng(seed).permutation(len(items))
    records = []
    for k, idx in enumerate(order, 1):
        item = items[int(idx)]
        output_fn(f"[{k}/{len(items)}] image: {item.image_path}")
        quality = _ask_score("quality (1-5): ", input_fn, output_fn)
        repro = None
        if item.condition not in QUALITY_ONLY:
            output_fn(f"        original: {item.original_path}")
            repro = _ask_score("reproducibility (1-5): ", input_fn, output_fn)
        rec = RatingRecord(item.image_id, item.condition, rater_id, quality, repro)
        append_ratings(out_path, [rec])
        records.append(rec)
    return records


# --------------------------------------------------------------------------
# Paired benchmark
# --------------------------------------------------------------------------


@dataclass
class MethodResult:
    psnr: list
    ssim: list
    feature_distance: list

    def summary(self) -> dict:
        out = {"n": len(self.psnr)}
        for name in ("psnr", "ssim", "feature_distance"):
            vals = np.asarray(getattr(self, name), dtype=np.float64)
            out[f"{name}_mean"] = float(vals.mean())
            out[f"{name}_std"] = float(vals.std())
        return out


@dataclass
class BenchReport:
    methods: dict  # name -> MethodResult

    def summary(self) -> dict:
        return {name: res.summary() for name, res in self.methods.items()}

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        cols = ["psnr_mean", "psnr_std", "ssim_mean", "ssim_std", "feature_distance_mean", "feature_distance_std", "n"]
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", *cols])
            for name, s in self.summary().items():
                writer.writerow([name, *[s[c] for c in cols]])
        return path

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps({"summary": self.summary(),
                                    "per_image": {k: asdict(v) for k, v in self.methods.items()}},
                                   indent=1, sort_keys=True) + "\n")
        return path


def load_translator(ckpt_dir) -> Callable:
    """LQ->HQ generator from a dehazing checkpoint, applied at native size to
    ``[0, 1]`` tensors."""
    gen = load_weights(Path(ckpt_dir) / "G.safetensors").eval()

    @torch.no_grad()
    def run(t: torch.Tensor) -> torch.Tensor:
        return ((generator_forward(gen, t * 2.0 - 1.0) + 1.0) / 2.0).clamp(0, 1)

    return run


def benchmark(methods: dict, paired_manifest: imaging.DatasetManifest, fe: FeatureExtractor,
              include_identity: bool = True) -> BenchReport:
    """Score restoration methods on degraded images with clean ground truth.

    ``methods`` maps a name to a callable on ``(3, H, W)`` ``[0, 1]`` tensors.
    Reports PSNR/SSIM against the clean image and feature distance to the
    degraded input, per image in manifest order.
    """
    records = [r for r in paired_manifest if r.domain == "LQ"]
    if not records:
        raise ValueError("manifest has no degraded (LQ) images")
    missing = [r.image_path for r in records if r.clean_path is None]
    if missing:
        raise ValueError(f"no clean ground truth for {missing[0]} (and {len(missing) - 1} more)")
    all_methods = {"identity": lambda t: t} if include_identity else {}
    all_methods.update(methods)
    results = {name: MethodResult([], [], []) for name in all_methods}
    for r in records:
        degraded = imaging.to_tensor(imaging.load_image(paired_manifest.resolve(r.image_path)))
        clean = imaging.to_tensor(imaging.load_image(paired_manifest.resolve(r.clean_path)))
        for name, fn in all_methods.items():
            out = fn(degraded)
            res = results[name]
            res.psnr.append(psnr(out, clean))
            res.ssim.append(ssim(out, clean))
            res.feature_distance.append(feature_distance(fe, out, degraded))
    return BenchReport(results)
