import json
from pathlib import Path

import numpy as np
import pytest

from umnmt import cli
from umnmt.errors import ConfigError


TINY_CONFIG = {
    "data": {"vocab_size": 8, "len_min": 3, "len_max": 5, "n_train": 30,
             "n_valid": 8, "n_test": 6, "k_img": 4, "d_img": 8, "seed": 5},
    "model": {"d_model": 16, "n_heads": 2, "n_layers": 2, "n_shared": 1,
              "d_ff": 24, "d_img": 8, "k_img": 4, "max_len": 20,
              "dropout_p": 0.1},
    "train": {"steps": 6, "batch_size": 6, "seed": 5, "validate_every": 3,
              "checkpoint_every": 3},
    "eval": {"max_len": 12},
}


def write_config(tmp_path, doc=None, name="config.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc if doc is not None else TINY_CONFIG))
    return str(p)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Prepared data + one finished training run, shared across CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root)
    data_dir = root / "data"
    assert cli.main(["prepare-data", "--config", cfg, "--out", str(data_dir)]) == 0
    run_dir = root / "run"
    assert cli.main(["train", "--config", cfg, "--data", str(data_dir),
                     "--out", str(run_dir)]) == 0
    return {"root": root, "config": cfg, "data": data_dir, "run": run_dir,
            "ckpt": run_dir / "ckpt" / "step-6.umck"}


# --- config ------------------------------------------------------------------

def test_config_rejects_unknown_keys(tmp_path):
    bad = {"data": {"vocab_size": 8, "bogus": 1}}
    with pytest.raises(ConfigError):
        cli.load_config(write_config(tmp_path, bad))
    with pytest.raises(ConfigError):
        cli.resolve_config({"nonsense": {}})


def test_config_defaults_and_echo_roundtrip():
    cfg = cli.resolve_config({})
    echoed = cfg.echo()
    assert echoed["train"]["steps"] == 600
    assert echoed["data"]["vocab_size"] == 24
    again = cli.resolve_config(echoed)
    assert again.echo() == echoed


def test_env_seed_override(monkeypatch):
    monkeypatch.setenv("UMNMT_SEED", "99")
    cfg = cli.resolve_config({"train": {"seed": 1}, "data": {"seed": 2}})
    assert cfg.train.seed == 99
    assert cfg.data_seed == 99
    assert cfg.echo()["data"]["seed"] == 99


def test_usage_error_exits_one():
    assert cli.main(["translate"]) == 1  # missing required args
    assert cli.main(["evaluate", "--ckpt", "x", "--data", "y",
                     "--modality", "nope"]) == 1


# --- prepare-data ---------------------------------------------------------------

def test_prepare_data_manifest_and_files(workspace):
    data_dir = workspace["data"]
    manifest = json.loads((data_dir / "manifest.json").read_text())
    assert manifest["counts"]["n_x"] == manifest["counts"]["n_y"] == 30
    for name in manifest["hashes"]:
        assert (data_dir / name).exists()
    vocab_lines = (data_dir / "vocab.x.txt").read_text().splitlines()
    assert vocab_lines[:4] == ["<pad>", "<s>", "</s>", "<unk>"]
    assert (data_dir / "config.json").exists()


def test_prepare_data_deterministic_hashes(tmp_path):
    cfg = write_config(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["prepare-data", "--config", cfg, "--out", str(a)]) == 0
    assert cli.main(["prepare-data", "--config", cfg, "--out", str(b)]) == 0
    ma = json.loads((a / "manifest.json").read_text())["hashes"]
    mb = json.loads((b / "manifest.json").read_text())["hashes"]
    assert ma == mb


def _decipher_y_lines(data_dir):
    manifest = json.loads((data_dir / "manifest.json").read_text())
    inverse = {y: x for x, y in manifest["cipher"].items()}
    out = []
    for line in (data_dir / "train.y.txt").read_text().splitlines():
        undone = [inverse[t] for t in line.split()]
        for i in range(0, len(undone) - 1, 2):  # undo the pair-swap reordering
            undone[i], undone[i + 1] = undone[i + 1], undone[i]
        out.append(" ".join(undone))
    return out


def test_prepare_data_halves_disjoint_vs_overlap(workspace, tmp_path):
    # disjoint mode: the y half comes from different draws than the x half
    xs = (workspace["data"] / "train.x.txt").read_text().splitlines()
    back = _decipher_y_lines(workspace["data"])
    aligned = sum(a == b for a, b in zip(xs, back)) / len(xs)
    assert aligned < 0.5

    # overlap mode: the same sentences pretend to be unparalleled halves
    doc = json.loads(Path(workspace["config"]).read_text())
    doc["data"]["overlap"] = True
    cfg = write_config(tmp_path, doc, name="overlap.json")
    out = tmp_path / "overlap-data"
    assert cli.main(["prepare-data", "--config", cfg, "--out", str(out)]) == 0
    xs2 = (out / "train.x.txt").read_text().splitlines()
    assert _decipher_y_lines(out) == xs2


def test_prepare_data_refuses_nonempty_dir(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "out"
    out.mkdir()
    (out / "junk.txt").write_text("x")
    assert cli.main(["prepare-data", "--config", cfg, "--out", str(out)]) == 2
    assert cli.main(["prepare-data", "--config", cfg, "--out", str(out), "--force"]) == 0


# --- train ------------------------------------------------------------------------

def test_train_artifacts(workspace):
    run = workspace["run"]
    assert (run / "config.json").exists()
    assert (run / "summary.json").exists()
    metrics = [json.loads(l) for l in (run / "metrics.jsonl").read_text().splitlines()]
    assert len(metrics) == 6
    assert {m["modality"] for m in metrics} == {"text_only", "text_image"}
    assert workspace["ckpt"].exists()


def test_train_echoed_config_reproduces_run(workspace, tmp_path):
    echoed = json.loads((workspace["run"] / "config.json").read_text())
    cfg2 = tmp_path / "echo.json"
    cfg2.write_text(json.dumps(echoed))
    rerun = tmp_path / "rerun"
    assert cli.main(["train", "--config", str(cfg2), "--data", str(workspace["data"]),
                     "--out", str(rerun)]) == 0
    a = workspace["ckpt"].read_bytes()
    b = (rerun / "ckpt" / "step-6.umck").read_bytes()
    assert a == b


def test_train_detects_corrupt_data(workspace, tmp_path):
    import shutil
    broken = tmp_path / "broken"
    shutil.copytree(workspace["data"], broken)
    (broken / "train.x.txt").write_text("tampered\n")
    assert cli.main(["train", "--config", workspace["config"],
                     "--data", str(broken), "--out", str(tmp_path / "r")]) == 2


def test_train_rejects_missing_corpus_for_pretrain(workspace, tmp_path):
    import shutil
    broken = tmp_path / "missing"
    shutil.copytree(workspace["data"], broken)
    (broken / "train.x.txt").unlink()
    doc = json.loads(Path(workspace["config"]).read_text())
    doc["train"]["schedule"] = "pretrain_text"
    cfg = write_config(tmp_path, doc, name="pre.json")
    assert cli.main(["train", "--config", cfg, "--data", str(broken),
                     "--out", str(tmp_path / "r2")]) == 2


def test_train_rejects_vocab_size_mismatch(workspace, tmp_path):
    doc = json.loads(Path(workspace["config"]).read_text())
    doc["model"]["vocab_size_x"] = 99
    cfg = write_config(tmp_path, doc, name="bad.json")
    assert cli.main(["train", "--config", cfg, "--data", str(workspace["data"]),
                     "--out", str(tmp_path / "r3")]) == 2


# --- translate ----------------------------------------------------------------------

def test_translate_deterministic_and_gate_contract(workspace, tmp_path, capsys):
    inp = tmp_path / "in.txt"
    lines = (workspace["data"] / "test.x.txt").read_text().splitlines()[:4]
    inp.write_text("\n".join(lines) + "\n")

    assert cli.main(["translate", "--ckpt", str(workspace["ckpt"]),
                     "--input", str(inp), "--lang-pair", "x-y"]) == 0
    out1 = capsys.readouterr().out
    assert cli.main(["translate", "--ckpt", str(workspace["ckpt"]),
                     "--input", str(inp), "--lang-pair", "x-y"]) == 0
    out2 = capsys.readouterr().out
    assert out1 == out2
    assert len(out1.splitlines()) == 4
    vocab_y = set((workspace["data"] / "vocab.y.txt").read_text().split())
    for line in out1.splitlines():
        assert set(line.split()) <= vocab_y


def test_translate_feature_count_mismatch(workspace, tmp_path):
    inp = tmp_path / "in.txt"
    lines = (workspace["data"] / "test.x.txt").read_text().splitlines()[:3]
    inp.write_text("\n".join(lines) + "\n")
    assert cli.main(["translate", "--ckpt", str(workspace["ckpt"]),
                     "--input", str(inp),
                     "--features", str(workspace["data"] / "test.umfm")]) == 2


def test_translate_with_features_runs(workspace, tmp_path, capsys):
    n = json.loads((workspace["data"] / "manifest.json").read_text())["counts"]["n_test"]
    inp = tmp_path / "in.txt"
    inp.write_text((workspace["data"] / "test.x.txt").read_text())
    assert cli.main(["translate", "--ckpt", str(workspace["ckpt"]),
                     "--input", str(inp),
                     "--features", str(workspace["data"] / "test.umfm")]) == 0
    assert len(capsys.readouterr().out.splitlines()) == n


# --- evaluate / export-attention -----------------------------------------------------

def test_evaluate_writes_report_both_modalities(workspace, tmp_path):
    for modality in ("with_image", "text_only"):
        out = tmp_path / f"report-{modality}.json"
        assert cli.main(["evaluate", "--ckpt", str(workspace["ckpt"]),
                         "--data", str(workspace["data"]),
                         "--modality", modality, "--out", str(out)]) == 0
        doc = json.loads(out.read_text())
        assert set(doc) == {"bleu", "precisions", "bp", "token_accuracy",
                            "n_sentences", "modality", "src_lang"}
        assert doc["modality"] == modality
        assert 0.0 <= doc["bleu"] <= 1.0


def test_export_attention_rows_sum_to_one(workspace, tmp_path):
    inp = tmp_path / "in.txt"
    lines = (workspace["data"] / "test.x.txt").read_text().splitlines()[:2]
    inp.write_text("\n".join(lines) + "\n")
    out = tmp_path / "maps.jsonl"
    assert cli.main(["export-attention", "--ckpt", str(workspace["ckpt"]),
                     "--input", str(inp), "--out", str(out)]) == 0
    records = [json.loads(l) for l in out.read_text().splitlines()]
    assert records
    for r in records:
        assert r["kind"] == "text"  # no features supplied
        total = sum(sum(row) for row in r["rows"])
        assert abs(total - 1.0) < 1e-6
        flat = [v for row in r["heat"] for v in row]
        assert min(flat) >= 0.0 and max(flat) <= 1.0


def test_gradcheck_command_exit_codes(monkeypatch):
    from umnmt import gradcheck

    monkeypatch.setattr(gradcheck, "run_all", lambda eps: [("op", 1e-9)])
    assert cli.main(["gradcheck"]) == 0
    monkeypatch.setattr(gradcheck, "run_all", lambda eps: [("op", 0.5)])
    assert cli.main(["gradcheck"]) == 3


def test_train_resume_flag(workspace, tmp_path):
    doc = json.loads(Path(workspace["config"]).read_text())
    doc["train"]["steps"] = 8
    cfg = write_config(tmp_path, doc, name="more.json")
    out = tmp_path / "resumed"
    assert cli.main(["train", "--config", cfg, "--data", str(workspace["data"]),
                     "--out", str(out),
                     "--resume", str(workspace["ckpt"])]) == 0
    metrics = (out / "metrics.jsonl").read_text().splitlines()
    assert len(metrics) == 2  # steps 7 and 8 only
    assert (out / "ckpt" / "step-8.umck").exists()


def test_export_attention_with_features_has_image_maps(workspace, tmp_path):
    import shutil
    inp = tmp_path / "in.txt"
    lines = (workspace["data"] / "test.x.txt").read_text().splitlines()
    inp.write_text("\n".join(lines) + "\n")
    out = tmp_path / "maps.jsonl"
    assert cli.main(["export-attention", "--ckpt", str(workspace["ckpt"]),
                     "--input", str(inp),
                     "--features", str(workspace["data"] / "test.umfm"),
                     "--out", str(out)]) == 0
    kinds = {json.loads(l)["kind"] for l in out.read_text().splitlines()}
    assert kinds == {"text", "image"}
    img = next(json.loads(l) for l in out.read_text().splitlines()
               if json.loads(l)["kind"] == "image")
    assert img["grid_side"] == 2
    assert np.array(img["rows"]).shape == (2, 2)
