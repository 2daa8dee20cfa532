"""Command line entry point: ``miinet <command> ...``.

Exit codes: 0 success, 1 validation error, 2 runtime error (divergence, I/O).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import imaging
from .objectives import DivergenceError

log = logging.getLogger("miinet")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _pair(type_=int):
    return dict(nargs=2, type=type_, metavar=("A", "B"))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="miinet", description="Medical image improvement: unpaired dehazing + x4 super-resolution.")
    p.add_argument("--log-level", default="INFO", help="logging level (default INFO)")
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads for per-image work; training stays single-threaded in deterministic mode")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="build a paired hazy/clean benchmark")
    s.add_argument("--clean-dir", required=True, help="directory of clean PNG/JPEG sources")
    s.add_argument("--out", required=True, help="output directory (lq/, hq/, manifest.jsonl, hq.jsonl)")
    s.add_argument("--count", type=int, required=True, help="number of pairs to write")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", **_pair(), help="resize sources to W H")
    s.add_argument("--t-range", **_pair(float), default=(0.4, 0.9), help="transmission range")
    s.add_argument("--airlight-range", **_pair(float), default=(0.7, 1.0), help="airlight range")
    s.add_argument("--sigma-range", **_pair(float), default=(0.0, 3.0), help="defocus sigma range (pixels)")
    s.add_argument("--field-amplitude", type=float, default=0.0, help="spatial transmission variation")
    s.add_argument("--render-scenes", type=int, default=0,
                   help="first render this many procedural clean scenes into --clean-dir")

    t = sub.add_parser("train-idm", help="train the unpaired dehazing networks")
    t.add_argument("--lq", required=True, help="LQ-domain manifest")
    t.add_argument("--hq", required=True, help="HQ-domain manifest")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--preset", choices=("paper", "desk"), help="base configuration: full-size \"paper\" (default) or CPU-sized \"desk\"")
    t.add_argument("--config", help="resolved config.json from a previous run")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lambda", dest="lambda_cyc", type=float, help="cycle loss weight (default 10.0)")
    t.add_argument("--beta", dest="beta_percep", type=float, help="feature-preservation loss weight (default 1.5)")
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--working-size", **_pair(), help="W H images are resized to")
    t.add_argument("--crop", dest="crop_size", **_pair(), help="W H training crop")
    t.add_argument("--fe-mode", choices=("vgg16", "random"))
    t.add_argument("--fe-weights", help="VGG16 weights file")
    t.add_argument("--aug-multiplier", type=int)
    t.add_argument("--offline-augment", action="store_true", default=None,
                   help="reuse one fixed augmented set every epoch")
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--resume", help="checkpoint directory to continue from")

    r = sub.add_parser("train-isr", help="train the x4 super-resolution networks")
    r.add_argument("--hq", required=True, help="HQ-domain manifest")
    r.add_argument("--out", required=True)
    r.add_argument("--preset", choices=("paper", "desk"))
    r.add_argument("--config")
    r.add_argument("--crop", type=int)
    r.add_argument("--blur-sigma", type=float)
    r.add_argument("--p-blur", type=float)
    r.add_argument("--blur-stage", choices=("lr", "hr"))
    r.add_argument("--epochs", type=int)
    r.add_argument("--batch-size", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--fe-mode", choices=("vgg16", "random"))
    r.add_argument("--fe-weights")
    r.add_argument("--pretrain-steps", type=int, help="L1-only warm-up steps before the adversarial phase")
    r.add_argument("--pretrain-lr", type=float, help="learning rate during the warm-up")
    r.add_argument("--checkpoint-every", type=int)
    r.add_argument("--resume")

    e = sub.add_parser("enhance", help="dehaze (and optionally upscale) images")
    e.add_argument("--idm", required=True, help="dehazing checkpoint directory")
    e.add_argument("--isr", help="super-resolution checkpoint directory")
    e.add_argument("--in", dest="inp", required=True, help="image file or directory")
    e.add_argument("--out", required=True, help="output directory")

    a = sub.add_parser("rate", help="collect blinded 1-5 opinion scores")
    a.add_argument("--items", required=True, help="rating queue JSONL")
    a.add_argument("--out", required=True, help="ratings JSONL to append to")
    a.add_argument("--rater", required=True)
    a.add_argument("--seed", type=int, default=0)

    o = sub.add_parser("report", help="aggregate opinion scores into a table and plot")
    o.add_argument("--ratings", required=True, nargs="+")
    o.add_argument("--out", required=True)

    b = sub.add_parser("bench", help="score checkpoints on a paired benchmark")
    b.add_argument("--manifest", required=True, help="paired manifest from `synth`")
    b.add_argument("--ckpt", action="append", default=[], metavar="NAME=DIR",
                   help="dehazing checkpoint to score (repeatable)")
    b.add_argument("--out", required=True)
    b.add_argument("--fe-mode", choices=("vgg16", "random"), default="random")
    b.add_argument("--fe-weights")
    return p


def _write_run_config(out_dir, command, args, extra=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {"command": command, "args": {k: v for k, v in vars(args).items() if k != "func"}}
    if extra:
        record.update(extra)
    (out_dir / "run_config.json").write_text(json.dumps(record, indent=1, sort_keys=True, default=str) + "\n")


def _resolve_config(args, presets, cls, fields):
    base = None
    if args.config:
        base = cls.from_dict(json.loads(Path(args.config).read_text()))
        if args.preset and args.preset != base.preset:
            raise UsageError(f"--preset {args.preset} conflicts with preset {base.preset!r} in {args.config}")
    else:
        base = presets[args.preset or "paper"]
    changes = {f: getattr(args, f) for f in fields if getattr(args, f, None) is not None}
    for k, v in changes.items():
        if isinstance(v, list):
            changes[k] = tuple(v)
    return base.replace(**changes)


def _read_domain(path, domain):
    manifest = imaging.DatasetManifest.read(path)
    if domain == "HQ" and not manifest.filter("HQ").records and manifest.records:
        manifest = imaging.hq_manifest(manifest)
    manifest = manifest.filter(domain)
    if len(manifest) == 0:
        raise UsageError(f"manifest {path} holds no {domain} images")
    return manifest


def cmd_synth(args):
    if args.render_scenes:
        w, h = args.size or (96, 96)
        imaging.make_clean_images(args.clean_dir, args.render_scenes, (w, h), seed=args.seed)
    ranges = imaging.ParamRanges(tuple(args.t_range), tuple(args.airlight_range), tuple(args.sigma_range),
                                 args.field_amplitude)
    manifest = imaging.synth_dataset(args.clean_dir, args.out, args.count, ranges, args.seed, args.size,
                                     threads=args.threads)
    imaging.hq_manifest(manifest).write(Path(args.out) / "hq.jsonl")
    _write_run_config(args.out, "synth", args)
    print(Path(args.out) / "manifest.jsonl")


def cmd_train_idm(args):
    from .training import IDM_PRESETS, IdmConfig, train_idm

    fields = ("epochs", "lambda_cyc", "beta_percep", "seed", "batch_size", "working_size", "crop_size",
              "fe_mode", "fe_weights", "aug_multiplier", "offline_augment", "checkpoint_every")
    config = _resolve_config(args, IDM_PRESETS, IdmConfig, fields)
    lq = _read_domain(args.lq, "LQ")
    hq = _read_domain(args.hq, "HQ")
    _write_run_config(args.out, "train-idm", args, {"config": config.to_dict()})
    ckpt = train_idm(config, lq, hq, args.out, resume=args.resume)
    print(ckpt)


def cmd_train_isr(args):
    from .training import ISR_PRESETS, IsrConfig, train_isr

    fields = ("crop", "blur_sigma", "p_blur", "blur_stage", "epochs", "batch_size", "seed", "fe_mode",
              "fe_weights", "pretrain_steps", "pretrain_lr", "checkpoint_every")
    config = _resolve_config(args, ISR_PRESETS, IsrConfig, fields)
    hq = _read_domain(args.hq, "HQ")
    _write_run_config(args.out, "train-isr", args, {"config": config.to_dict()})
    print(train_isr(config, hq, args.out, resume=args.resume))


def cmd_enhance(args):
    from .training import Enhancer

    pipeline = Enhancer.load(args.idm, args.isr)
    inp = Path(args.inp)
    files = imaging.list_images(inp) if inp.is_dir() else [inp]
    if not files:
        raise UsageError(f"no images found in {inp}")
    out = Path(args.out)
    for f in files:
        target = out / f"{f.stem}.enhanced.png"
        imaging.save_image(pipeline(imaging.load_image(f)), target)
        print(target)
    _write_run_config(out, "enhance", args)


def cmd_rate(args):
    from .evaluation import rate_session, read_rating_items

    items = read_rating_items(args.items)
    rate_session(items, args.out, args.rater, seed=args.seed)


def cmd_report(args):
    from .evaluation import aggregate_mdos, read_ratings

    records = [r for path in args.ratings for r in read_ratings(path)]
    report = aggregate_mdos(records)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "mdos.csv")
    report.distribution_csv(out / "mdos_distribution.csv")
    report.plot_svg(out / "mdos_distribution.svg")
    (out / "mdos.json").write_text(json.dumps(
        {"rows": report.rows(), "metadata": report.metadata}, indent=1) + "\n")
    _write_run_config(out, "report", args)
    for row in report.rows():
        print("%-12s %.2f ± %.2f (n=%d)" % row)


def cmd_bench(args):
    from .evaluation import benchmark, load_translator
    from .networks import FeatureExtractor, FeatureExtractorConfig

    methods = {}
    for spec in args.ckpt:
        name, sep, path = spec.partition("=")
        if not sep:
            raise UsageError(f"--ckpt expects NAME=DIR, got {spec!r}")
        methods[name] = load_translator(path)
    fe = FeatureExtractor(FeatureExtractorConfig(mode=args.fe_mode, weights_path=args.fe_weights))
    report = benchmark(methods, imaging.DatasetManifest.read(args.manifest), fe)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "bench.csv")
    report.to_json(out / "bench.json")
    _write_run_config(out, "bench", args)
    for name, s in report.summary().items():
        print(f"{name:12s} PSNR {s['psnr_mean']:.2f}±{s['psnr_std']:.2f}  SSIM {s['ssim_mean']:.3f}  "
              f"feat {s['feature_distance_mean']:.4f}")


COMMANDS = {
    "synth": cmd_synth,
    "train-idm": cmd_train_idm,
    "train-isr": cmd_train_isr,
    "enhance": cmd_enhance,
    "rate": cmd_rate,
    "report": cmd_report,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ValueError, KeyError, FileNotFoundError, imaging.ImageDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
