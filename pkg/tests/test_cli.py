import json
import subprocess
import sys

import numpy as np
import pytest

from miinet import imaging
from miinet.cli import main
from miinet.training import IDM_PRESETS, ISR_PRESETS

TINY_IDM = IDM_PRESETS["desk"].replace(working_size=(32, 18), gen_width=4, gen_blocks=1, disc_width=4,
                                       disc_layers=2, batch_size=2, epochs=1)
TINY_ISR = ISR_PRESETS["desk"].replace(crop=32, sr_feat=4, sr_blocks=1, sr_growth=4, disc_width=4,
                                       batch_size=2, epochs=1, pretrain_steps=0)


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    code = main(["synth", "--clean-dir", str(root / "clean"), "--render-scenes", "6", "--size", "40", "40",
                 "--out", str(root / "pairs"), "--count", "6", "--seed", "7"])
    assert code == 0
    return root


def write_config(path, cfg):
    path.write_text(json.dumps(cfg.to_dict()))
    return str(path)


def test_synth_deterministic(synth, tmp_path):
    args = ["synth", "--clean-dir", str(synth / "clean"), "--count", "6", "--seed", "7", "--size", "40", "40"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(["--threads", "3"] + args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("manifest.jsonl", "hq.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "manifest.jsonl").read_bytes() == (synth / "pairs" / "manifest.jsonl").read_bytes()
    for k in range(6):
        assert (tmp_path / "a" / "lq" / f"{k:05d}.png").read_bytes() == (tmp_path / "b" / "lq" / f"{k:05d}.png").read_bytes()
    assert json.loads((tmp_path / "a" / "run_config.json").read_text())["command"] == "synth"


def test_empty_manifest_exit_1(synth, tmp_path, capsys):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    code = main(["train-idm", "--lq", str(empty), "--hq", str(synth / "pairs" / "hq.jsonl"), "--out",
                 str(tmp_path / "run"), "--preset", "desk"])
    assert code == 1
    assert str(empty) in capsys.readouterr().err


def test_usage_errors(synth, tmp_path, capsys):
    assert main(["synth", "--bogus"]) == 1
    assert main(["nonsense"]) == 1
    cfg = write_config(tmp_path / "c.json", TINY_IDM)
    code = main(["train-idm", "--lq", str(synth / "pairs" / "manifest.jsonl"), "--hq", str(synth / "pairs" / "hq.jsonl"),
                 "--out", str(tmp_path / "run"), "--config", cfg, "--preset", "paper"])
    assert code == 1
    assert "conflicts" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({**TINY_IDM.to_dict(), "unknown_key": 1}))
    assert main(["train-idm", "--lq", str(synth / "pairs" / "manifest.jsonl"), "--hq", str(synth / "pairs" / "hq.jsonl"),
                 "--out", str(tmp_path / "run2"), "--config", str(bad)]) == 1


def test_divergence_exit_2(synth, tmp_path, monkeypatch):
    from miinet import training
    from miinet.objectives import DivergenceError

    def boom(*a, **k):
        raise DivergenceError("non-finite cyc loss at iteration 0")

    monkeypatch.setattr(training.IdmTrainer, "step", boom)
    cfg = write_config(tmp_path / "c.json", TINY_IDM)
    assert main(["train-idm", "--lq", str(synth / "pairs" / "manifest.jsonl"), "--hq", str(synth / "pairs" / "hq.jsonl"),
                 "--out", str(tmp_path / "run"), "--config", cfg]) == 2


def test_train_and_enhance(synth, tmp_path):
    pairs = synth / "pairs"
    cfg = write_config(tmp_path / "idm.json", TINY_IDM)
    assert main(["train-idm", "--lq", str(pairs / "manifest.jsonl"), "--hq", str(pairs / "hq.jsonl"),
                 "--out", str(tmp_path / "idm"), "--config", cfg, "--beta", "0.5"]) == 0
    run_cfg = json.loads((tmp_path / "idm" / "run_config.json").read_text())
    assert run_cfg["config"]["beta_percep"] == 0.5
    resolved = json.loads((tmp_path / "idm" / "config.json").read_text())
    assert resolved == run_cfg["config"]

    cfg = write_config(tmp_path / "isr.json", TINY_ISR)
    assert main(["train-isr", "--hq", str(pairs / "manifest.jsonl"), "--out", str(tmp_path / "isr"),
                 "--config", cfg]) == 0

    idm_ckpt = tmp_path / "idm" / "checkpoints" / "epoch_0001"
    isr_ckpt = tmp_path / "isr" / "checkpoints" / "epoch_0001"
    img = tmp_path / "img.png"
    imaging.save_image(np.random.default_rng(0).integers(0, 256, (50, 70, 3), dtype=np.uint8), img)
    assert main(["enhance", "--idm", str(idm_ckpt), "--isr", str(isr_ckpt), "--in", str(img),
                 "--out", str(tmp_path / "out")]) == 0
    out = imaging.load_image(tmp_path / "out" / "img.enhanced.png")
    assert out.shape == (18 * 4, 32 * 4, 3)
    assert main(["enhance", "--idm", str(idm_ckpt), "--in", str(img), "--out", str(tmp_path / "out2")]) == 0
    assert imaging.load_image(tmp_path / "out2" / "img.enhanced.png").shape == (18, 32, 3)

    assert main(["bench", "--manifest", str(pairs / "manifest.jsonl"), "--ckpt", f"model={idm_ckpt}",
                 "--out", str(tmp_path / "bench")]) == 0
    summary = json.loads((tmp_path / "bench" / "bench.json").read_text())["summary"]
    assert set(summary) == {"identity", "model"} and summary["model"]["n"] == 6


def test_rate_and_report(tmp_path, monkeypatch, capsys):
    items = tmp_path / "items.jsonl"
    items.write_text("".join(json.dumps({"image_id": f"i{k}", "condition": c, "image_path": f"{c}.png",
                                         "original_path": "lq.png"}) + "\n"
                             for k, c in enumerate(["original_lq", "miinet", "hq"])))
    answers = iter(["5", "4", "4", "3"])
    monkeypatch.setattr("builtins.input", lambda prompt="": next(answers))
    assert main(["rate", "--items", str(items), "--out", str(tmp_path / "r.jsonl"), "--rater", "d1"]) == 0
    assert main(["report", "--ratings", str(tmp_path / "r.jsonl"), "--out", str(tmp_path / "rep")]) == 0
    header = (tmp_path / "rep" / "mdos.csv").read_text().splitlines()[0]
    assert header == "condition,mean,std,n"
    assert (tmp_path / "rep" / "mdos_distribution.svg").exists()


def test_help_lists_every_subcommand():
    out = subprocess.run([sys.executable, "-m", "miinet.cli", "--help"], capture_output=True, text=True, check=True).stdout
    for cmd in ("synth", "train-idm", "train-isr", "enhance", "rate", "report", "bench"):
        assert cmd in out
