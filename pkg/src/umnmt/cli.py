"""Operator command line: prepare-data, train, translate, evaluate,
export-attention, gradcheck.

One JSON run config drives everything; it has four sections (data, model,
train, eval) mirroring the module configs.  Unknown keys are rejected, every
field has a default, and the fully resolved document is echoed into the
output directory so a run can be reproduced from its own artifacts.  The
environment variable UMNMT_SEED overrides the data/train seeds.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerics.
"""

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import evaluation, kernels, training
from .corpus import (ALTERNATE, Example, PairExample, SynthConfig, TokenSeq, Vocab,
                     gen_synthetic, load_corpus, load_features, save_corpus,
                     save_features, tokenize)
from .errors import ConfigError, DataError, NumericsError, UmnmtError
from .model import ModelConfig, model_from_checkpoint
from .training import TrainConfig, TrainData

DEFAULT_DATA_SEED = 1234


@dataclass(frozen=True)
class EvalConfig:
    max_len: int = 24
    modality: str = "with_image"
    src_lang: str = "x"


@dataclass(frozen=True)
class RunConfig:
    data: SynthConfig
    data_seed: int
    model: dict  # ModelConfig overrides; vocab sizes resolved against the data
    train: TrainConfig
    eval: EvalConfig

    def echo(self, model_cfg=None):
        model = dict(self.model) if model_cfg is None else asdict(model_cfg)
        return {
            "data": {**asdict(self.data), "seed": self.data_seed},
            "model": model,
            "train": asdict(self.train),
            "eval": asdict(self.eval),
        }


def _check_keys(section, given, allowed):
    unknown = set(given) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}' section: {sorted(unknown)}")


def resolve_config(doc):
    """Validate a raw config dict into a RunConfig with defaults filled in."""
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    _check_keys("top-level", doc, ("data", "model", "train", "eval"))

    data_raw = dict(doc.get("data", {}))
    _check_keys("data", data_raw, [f.name for f in fields(SynthConfig)] + ["seed"])
    data_seed = int(data_raw.pop("seed", DEFAULT_DATA_SEED))
    data_cfg = SynthConfig(**data_raw)

    model_raw = dict(doc.get("model", {}))
    _check_keys("model", model_raw, [f.name for f in fields(ModelConfig)])

    train_raw = dict(doc.get("train", {}))
    _check_keys("train", train_raw, [f.name for f in fields(TrainConfig)])
    train_cfg = TrainConfig(**train_raw)

    eval_raw = dict(doc.get("eval", {}))
    _check_keys("eval", eval_raw, [f.name for f in fields(EvalConfig)])
    eval_cfg = EvalConfig(**eval_raw)

    env_seed = os.environ.get("UMNMT_SEED")
    if env_seed is not None:
        data_seed = int(env_seed)
        train_cfg = replace(train_cfg, seed=int(env_seed))

    return RunConfig(data_cfg, data_seed, model_raw, train_cfg, eval_cfg)


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
    return resolve_config(doc)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _status(msg):
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# prepare-data
# ---------------------------------------------------------------------------

_SPLIT_FILES = (
    "train.x.txt", "train.y.txt", "train.x.umfm", "train.y.umfm",
    "valid.x.txt", "valid.y.txt", "valid.umfm",
    "test.x.txt", "test.y.txt", "test.umfm",
    "vocab.x.txt", "vocab.y.txt",
)


def cmd_prepare_data(args):
    cfg = load_config(args.config)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"{out} exists and is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)

    data = gen_synthetic(cfg.data, np.random.default_rng(cfg.data_seed))
    data.vocab_x.save(out / "vocab.x.txt")
    data.vocab_y.save(out / "vocab.y.txt")
    save_corpus(out / "train.x.txt", data.corpus_x())
    save_corpus(out / "train.y.txt", data.corpus_y())
    save_features(out / "train.x.umfm", [e.image for e in data.train_x])
    save_features(out / "train.y.umfm", [e.image for e in data.train_y])
    for split, pairs in (("valid", data.valid), ("test", data.test)):
        save_corpus(out / f"{split}.x.txt",
                    [[data.vocab_x.tokens[i] for i in p.x.ids] for p in pairs])
        save_corpus(out / f"{split}.y.txt",
                    [[data.vocab_y.tokens[i] for i in p.y.ids] for p in pairs])
        save_features(out / f"{split}.umfm", [p.image for p in pairs])

    manifest = {
        "counts": {
            "n_x": len(data.train_x),
            "n_y": len(data.train_y),
            "n_valid": len(data.valid),
            "n_test": len(data.test),
        },
        "hashes": {name: _sha256(out / name) for name in _SPLIT_FILES},
        "data_config": {**asdict(cfg.data), "seed": cfg.data_seed},
        "cipher": data.cipher,
        "cell_of_x": data.cell_of_x,
        "cell_of_y": data.cell_of_y,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg.echo(), fh, sort_keys=True, indent=2)
    _status(f"wrote {manifest['counts']} to {out}")
    return 0


# ---------------------------------------------------------------------------
# data dir loading
# ---------------------------------------------------------------------------

def _encode_corpus(path, vocab, lang):
    return [TokenSeq(lang, vocab.encode(toks)) for toks in load_corpus(path)]


def load_prepared(data_dir, verify_hashes=True, need_images=True):
    d = Path(data_dir)
    if not (d / "manifest.json").exists():
        raise DataError(f"{d} has no manifest.json (run prepare-data first)")
    with open(d / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if verify_hashes:
        for name, want in manifest["hashes"].items():
            p = d / name
            if not p.exists():
                raise DataError(f"{d}: missing data file {name}")
            if _sha256(p) != want:
                raise DataError(f"{d}: hash mismatch for {name}")

    vocab_x = Vocab.load(d / "vocab.x.txt")
    vocab_y = Vocab.load(d / "vocab.y.txt")
    seqs_x = _encode_corpus(d / "train.x.txt", vocab_x, "x")
    seqs_y = _encode_corpus(d / "train.y.txt", vocab_y, "y")

    def with_features(seqs, feat_path):
        if not need_images:
            return [Example(s, None) for s in seqs]
        grids = load_features(feat_path)
        if len(grids) != len(seqs):
            raise DataError(f"{feat_path}: {len(grids)} grids for {len(seqs)} sentences")
        return [Example(s, g) for s, g in zip(seqs, grids)]

    train_x = with_features(seqs_x, d / "train.x.umfm")
    train_y = with_features(seqs_y, d / "train.y.umfm")

    def pairs(split):
        xs = _encode_corpus(d / f"{split}.x.txt", vocab_x, "x")
        ys = _encode_corpus(d / f"{split}.y.txt", vocab_y, "y")
        grids = load_features(d / f"{split}.umfm")
        if not (len(xs) == len(ys) == len(grids)):
            raise DataError(f"{split} split sizes disagree")
        return [PairExample(x, y, g) for x, y, g in zip(xs, ys, grids)]

    return {
        "train": TrainData(train_x, train_y, pairs("valid"), vocab_x, vocab_y),
        "test": pairs("test"),
        "manifest": manifest,
    }


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _resolve_model_cfg(cfg, vocab_x, vocab_y):
    overrides = dict(cfg.model)
    vx = overrides.pop("vocab_size_x", len(vocab_x))
    vy = overrides.pop("vocab_size_y", len(vocab_y))
    if vx != len(vocab_x) or vy != len(vocab_y):
        raise DataError(
            f"config vocab sizes ({vx}, {vy}) do not match the data "
            f"({len(vocab_x)}, {len(vocab_y)})")
    return ModelConfig(vocab_size_x=vx, vocab_size_y=vy, **overrides)


def cmd_train(args):
    cfg = load_config(args.config)
    need_images = (cfg.train.schedule == training.FINETUNE_MULTIMODAL
                   or (cfg.train.schedule == training.SCRATCH
                       and cfg.train.modality != "text_only"))
    prepared = load_prepared(args.data, need_images=need_images)
    tdata = prepared["train"]
    model_cfg = _resolve_model_cfg(cfg, tdata.vocab_x, tdata.vocab_y)

    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg.echo(model_cfg), fh, sort_keys=True, indent=2)

    summary, model, _ = training.run_schedule(
        tdata, model_cfg, cfg.train, run_dir=run_dir,
        resume=args.resume, log=_status)
    with open(run_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump({
            "steps_run": summary.steps_run,
            "val_history": summary.val_history,
            "best_step": summary.best_step,
            "best_accuracy": summary.best_accuracy,
            "final_ckpt": summary.final_ckpt,
            "best_ckpt": summary.best_ckpt,
        }, fh, sort_keys=True, indent=2)
    _status(f"finished {summary.steps_run} steps; final checkpoint {summary.final_ckpt}")
    return 0


# ---------------------------------------------------------------------------
# translate / evaluate / export-attention
# ---------------------------------------------------------------------------

def _lang_pair(s):
    parts = s.split("-")
    if len(parts) != 2 or set(parts) != {"x", "y"}:
        raise ConfigError(f"--lang-pair must be x-y or y-x, got {s!r}")
    return parts[0], parts[1]


def _read_inputs(path, vocab, lang):
    seqs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                seqs.append(TokenSeq(lang, vocab.encode(tokenize(line))))
    if not seqs:
        raise DataError(f"no sentences in {path}")
    return seqs


def cmd_translate(args):
    model, vocab_x, vocab_y, _, _ = model_from_checkpoint(args.ckpt)
    src_lang, _ = _lang_pair(args.lang_pair)
    src_vocab = vocab_x if src_lang == "x" else vocab_y
    tgt_vocab = vocab_y if src_lang == "x" else vocab_x
    seqs = _read_inputs(args.input, src_vocab, src_lang)
    images = None
    if args.features:
        images = load_features(args.features)
        if len(images) != len(seqs):
            raise DataError(
                f"{args.features}: {len(images)} feature grids for {len(seqs)} input lines")
    outs = evaluation.translate_batch(model, seqs, images, max_len=args.max_len)
    for ids in outs:
        print(" ".join(tgt_vocab.tokens[i] for i in ids))
    return 0


def cmd_evaluate(args):
    model, _, _, _, _ = model_from_checkpoint(args.ckpt)
    prepared = load_prepared(args.data, verify_hashes=False)
    report = evaluation.evaluate(model, prepared["test"], args.modality,
                                 src_lang=args.src_lang, max_len=args.max_len)
    doc = json.dumps(report.to_dict(), sort_keys=True, indent=2)
    if args.out:
        Path(args.out).write_text(doc + "\n", encoding="utf-8")
        _status(f"wrote {args.out}")
    else:
        print(doc)
    return 0


def cmd_export_attention(args):
    model, vocab_x, vocab_y, _, _ = model_from_checkpoint(args.ckpt)
    src_lang, _ = _lang_pair(args.lang_pair)
    src_vocab = vocab_x if src_lang == "x" else vocab_y
    tgt_vocab = vocab_y if src_lang == "x" else vocab_x
    seqs = _read_inputs(args.input, src_vocab, src_lang)
    images = [None] * len(seqs)
    if args.features:
        images = load_features(args.features)
        if len(images) != len(seqs):
            raise DataError(
                f"{args.features}: {len(images)} feature grids for {len(seqs)} input lines")
    n = 0
    with open(args.out, "w", encoding="utf-8") as fh:
        for i, (seq, img) in enumerate(zip(seqs, images)):
            maps = evaluation.extract_attention(model, seq, img, max_len=args.max_len)
            for record in evaluation.attention_records(maps, tgt_vocab):
                record["sentence"] = i
                fh.write(json.dumps(record, sort_keys=True) + "\n")
                n += 1
    _status(f"wrote {n} attention records to {args.out}")
    return 0


def cmd_gradcheck(args):
    from . import gradcheck

    results = gradcheck.run_all(eps=args.eps)
    worst = 0.0
    for name, err in results:
        flag = "ok" if err < args.threshold else "FAIL"
        print(f"{name:24s} {err:12.3e}  {flag}")
        worst = max(worst, err)
    print(f"max relative error: {worst:.3e} (threshold {args.threshold:g})")
    if worst >= args.threshold:
        raise NumericsError(f"gradient check failed: {worst:.3e} >= {args.threshold:g}")
    return 0


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        raise ConfigError(message)


def build_parser():
    p = _Parser(prog="umnmt", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare-data", help="generate the synthetic bilingual dataset")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_prepare_data)

    sp = sub.add_parser("train", help="run a training schedule")
    sp.add_argument("--config", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("translate", help="translate one sentence per input line")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--features", default=None)
    sp.add_argument("--lang-pair", default="x-y")
    sp.add_argument("--max-len", type=int, default=24)
    sp.set_defaults(func=cmd_translate)

    sp = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--modality", choices=["with_image", "text_only"], required=True)
    sp.add_argument("--src-lang", choices=["x", "y"], default="x")
    sp.add_argument("--max-len", type=int, default=24)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("export-attention", help="dump decoder attention maps as JSON lines")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--features", default=None)
    sp.add_argument("--lang-pair", default="x-y")
    sp.add_argument("--max-len", type=int, default=24)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export_attention)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every op")
    sp.add_argument("--eps", type=float, default=1e-6)
    sp.add_argument("--threshold", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)

    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args) or 0
    except ConfigError as e:
        _status(f"config error: {e}")
        return 1
    except NumericsError as e:
        _status(f"numerics error: {e}")
        return 3
    except DataError as e:
        _status(f"data error: {e}")
        return 2
    except UmnmtError as e:
        _status(f"error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
