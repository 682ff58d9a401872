"""Denoised auto-encoding and cycle-consistency training.

Each step draws one batch per language (same modality), computes the four
losses (auto x, auto y, cycle x, cycle y), sums them with their weights into
a single scalar and runs one Adam update.  The cycle loss decodes a
pseudo-translation in inference mode (no gradient, fresh every step) and
teacher-forces the reverse direction on the pseudo pair.

Everything is a pure function of (seed, config, corpora): per-step RNG
streams are derived from the seed and step index, so an interrupted run
resumed from a checkpoint replays exactly.
"""

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import evaluation, kernels
from . import tensor as T
from .corpus import TEXT_IMAGE, TEXT_ONLY, corrupt_image, make_batches, noise_delete, noise_permute
from .errors import ConfigError, ModalityError, NumericsError
from .model import (Model, ModelConfig, load_checkpoint, load_params, model_blob,
                    save_checkpoint_records)

SCRATCH = "scratch"
PRETRAIN_TEXT = "pretrain_text"
FINETUNE_MULTIMODAL = "finetune_multimodal"
REGIMES = (SCRATCH, PRETRAIN_TEXT, FINETUNE_MULTIMODAL)

# rng stream tags
_INIT, _STEP, _EPOCH_X, _EPOCH_Y = 0, 1, 2, 3


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 600
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    w_auto: float = 1.0
    w_cyc: float = 1.0
    p_del: float = 0.1
    k_w: int = 3
    p_drop: float = 0.1
    cycle_max_len: int = 12
    schedule: str = SCRATCH
    modality: str = "alternate"
    seed: int = 0
    checkpoint_every: int = 0  # 0: final checkpoint only
    validate_every: int = 100

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.w_auto < 0 or self.w_cyc < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.schedule not in REGIMES:
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.modality not in ("alternate", TEXT_ONLY, "image_only"):
            raise ConfigError(f"unknown modality schedule {self.modality!r}")


@dataclass
class StepMetrics:
    step: int
    loss_auto_x: float
    loss_auto_y: float
    loss_cyc_x: float
    loss_cyc_y: float
    total: float
    modality: str
    tokens_per_sec: float

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainData:
    train_x: list
    train_y: list
    valid: list
    vocab_x: object
    vocab_y: object


def _rng(seed, tag, k=0):
    return np.random.default_rng(np.random.SeedSequence(entropy=(seed, tag, k)))


def _pad_ids(seqs):
    width = max((len(s) for s in seqs), default=0)
    out = np.zeros((len(seqs), width), dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = tuple(s)
    return out


def _gates(model, batch, lam1):
    if lam1 and batch.modality != TEXT_IMAGE:
        raise ModalityError("lambda1=1 requires a text+image batch")
    lam2 = model.cfg.lambda2 if batch.modality == TEXT_IMAGE else 0
    return lam1, lam2


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_auto(model, batch, lam1, tc, rng):
    """Reconstruct the clean text from its noised encoding (and, when the
    image gate is open, the dropout-corrupted image features)."""
    lam1, lam2 = _gates(model, batch, lam1)
    p = model.cfg.dropout_p
    corrupted = []
    for e in batch.examples:
        s = noise_permute(e.text, tc.k_w, rng)
        s = noise_delete(s, tc.p_del, rng)
        corrupted.append(s.ids)
    enc = model.encode_text_batch(_pad_ids(corrupted), batch.lang, p, rng)
    img = None
    if lam1 or lam2:
        grids = [corrupt_image(e.image, tc.p_drop, rng) for e in batch.examples]
        img = model.encode_image_batch(grids)
    logits, targets = model.teacher_logits_batch(
        batch.padded_ids(), enc, img, batch.lang, lam1, lam2, p, rng)
    return T.cross_entropy_rows(logits, targets, ignore_id=0)


def loss_cycle(model, batch, lam1, tc, rng):
    """Round trip: greedy-decode a pseudo-translation in inference mode (no
    gradient, recomputed every call), then teacher-force the way back and
    score against the original text."""
    lam1, lam2 = _gates(model, batch, lam1)
    p = model.cfg.dropout_p
    other = "y" if batch.lang == "x" else "x"
    src_ids = batch.padded_ids()
    grids = [e.image for e in batch.examples] if (lam1 or lam2) else None

    # pseudo-translations a couple of tokens longer than the longest source
    # cover this task; the config cap still applies
    cap = min(tc.cycle_max_len, src_ids.shape[1] + 2)
    with T.no_grad():
        enc_inf = model.encode_text_batch(src_ids, batch.lang)
        img_inf = model.encode_image_batch(grids) if grids else None
        pseudo = model.greedy_decode_batch(enc_inf, img_inf, other, cap, lam1, lam2)

    enc_back = model.encode_text_batch(_pad_ids(pseudo), other, p, rng)
    img = model.encode_image_batch(grids) if grids else None
    logits, targets = model.teacher_logits_batch(
        src_ids, enc_back, img, batch.lang, lam1, lam2, p, rng)
    return T.cross_entropy_rows(logits, targets, ignore_id=0)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamState:
    def __init__(self, model):
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in model.named_parameters()}
        self.v = {n: np.zeros_like(p.data) for n, p in model.named_parameters()}

    def records(self):
        out = [("opt.t", np.array(float(self.t), dtype=np.float32))]
        for n in self.m:
            out.append((f"opt.m.{n}", self.m[n]))
            out.append((f"opt.v.{n}", self.v[n]))
        return out

    def restore(self, records):
        self.t = int(records["opt.t"])
        for n in self.m:
            self.m[n][...] = records[f"opt.m.{n}"]
            self.v[n][...] = records[f"opt.v.{n}"]


def optimizer_update(model, state, tc):
    """Bias-corrected adaptive-moment update; grads are zeroed afterwards."""
    state.t += 1
    bc1 = 1.0 - tc.beta1 ** state.t
    bc2 = 1.0 - tc.beta2 ** state.t
    for name, p in model.named_parameters():
        if not np.all(np.isfinite(p.grad)):
            raise NumericsError(f"non-finite gradient for parameter {name}")
        kernels.adam_step(p.data.reshape(-1), p.grad.reshape(-1),
                          state.m[name].reshape(-1), state.v[name].reshape(-1),
                          tc.lr, tc.beta1, tc.beta2, tc.adam_eps, bc1, bc2)
        p.grad[...] = 0.0
    return state


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------

def train_step(model, batch_x, batch_y, tc, state, rng):
    if batch_x.modality != batch_y.modality:
        raise ConfigError("per-step batches must share a modality")
    lam1 = 1 if (batch_x.modality == TEXT_IMAGE and model.cfg.lambda1) else 0
    started = time.perf_counter()

    la_x = loss_auto(model, batch_x, lam1, tc, rng)
    la_y = loss_auto(model, batch_y, lam1, tc, rng)
    lc_x = loss_cycle(model, batch_x, lam1, tc, rng)
    lc_y = loss_cycle(model, batch_y, lam1, tc, rng)
    total = T.add(T.scale(T.add(la_x, la_y), tc.w_auto),
                  T.scale(T.add(lc_x, lc_y), tc.w_cyc))
    T.backward(total)
    optimizer_update(model, state, tc)

    n_tokens = sum(len(e.text) for e in batch_x.examples + batch_y.examples)
    dt = max(time.perf_counter() - started, 1e-9)
    return StepMetrics(
        step=state.t,
        loss_auto_x=float(la_x.data),
        loss_auto_y=float(la_y.data),
        loss_cyc_x=float(lc_x.data),
        loss_cyc_y=float(lc_y.data),
        total=float(total.data),
        modality=batch_x.modality,
        tokens_per_sec=n_tokens / dt,
    )


def _batch_stream(examples, tc, modality, seed, tag):
    epoch = 0
    phase = 0
    while True:
        rng = _rng(seed, tag, epoch)
        n = 0
        for batch in make_batches(examples, tc.batch_size, modality, rng, phase=phase):
            yield batch
            n += 1
        phase += n
        epoch += 1


# ---------------------------------------------------------------------------
# schedule runner
# ---------------------------------------------------------------------------

@dataclass
class TrainSummary:
    steps_run: int
    metrics: list
    val_history: list = field(default_factory=list)  # (step, acc_xy, acc_yx)
    best_step: int = 0
    best_accuracy: float = 0.0
    final_ckpt: str = ""
    best_ckpt: str = ""


def _validate(model, valid_pairs, max_len):
    xy = evaluation.evaluate(model, valid_pairs, evaluation.WITH_IMAGE
                             if model.cfg.lambda1 else evaluation.TEXT_ONLY_EVAL,
                             src_lang="x", max_len=max_len)
    yx = evaluation.evaluate(model, valid_pairs, xy.modality, src_lang="y",
                             max_len=max_len)
    return xy.token_accuracy, yx.token_accuracy


def run_schedule(data, model_cfg, tc, run_dir=None, resume=None, log=None):
    """Train under one of the three regimes and emit the checkpoint series.

    scratch              train directly on ``tc.modality`` batches
    pretrain_text        text-only batches, the image pathway never runs
    finetune_multimodal  load ``resume``, keep text weights, reinit the image
                         projection, then train with alternating modality
    """
    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / "ckpt").mkdir(parents=True, exist_ok=True)

    modality = tc.modality
    if tc.schedule == PRETRAIN_TEXT:
        modality = TEXT_ONLY
    elif tc.schedule == FINETUNE_MULTIMODAL:
        modality = tc.modality if tc.modality != TEXT_ONLY else "alternate"

    model = Model(model_cfg, _rng(tc.seed, _INIT))
    state = AdamState(model)
    start_step = 0

    if tc.schedule == FINETUNE_MULTIMODAL:
        if resume is None:
            raise ConfigError("finetune_multimodal needs a checkpoint to start from")
        blob, records = load_checkpoint(resume)
        if blob["model"] != asdict(model_cfg):
            raise ConfigError("checkpoint model config does not match the run config")
        load_params(model, records, skip_prefixes=("img.",))
    elif resume is not None:
        blob, records = load_checkpoint(resume)
        if blob["model"] != asdict(model_cfg):
            raise ConfigError("checkpoint model config does not match the run config")
        load_params(model, records)
        state.restore(records)
        start_step = int(blob["train"]["step"])

    stream_x = _batch_stream(data.train_x, tc, modality, tc.seed, _EPOCH_X)
    stream_y = _batch_stream(data.train_y, tc, modality, tc.seed, _EPOCH_Y)
    for _ in range(start_step):  # replay the consumed prefix of the streams
        next(stream_x)
        next(stream_y)

    max_len = tc.cycle_max_len
    summary = TrainSummary(steps_run=0, metrics=[])

    def checkpoint(step, name=None):
        if run_dir is None:
            return ""
        path = run_dir / "ckpt" / (name or f"step-{step}.umck")
        blob = model_blob(model, data.vocab_x, data.vocab_y,
                          train={"step": step, "schedule": tc.schedule, "seed": tc.seed})
        records = [(n, p.data) for n, p in model.named_parameters()] + state.records()
        save_checkpoint_records(path, blob, records)
        return str(path)

    metrics_fh = open(run_dir / "metrics.jsonl", "a") if run_dir is not None else None
    try:
        for step in range(start_step + 1, tc.steps + 1):
            batch_x = next(stream_x)
            batch_y = next(stream_y)
            rng = _rng(tc.seed, _STEP, step)
            metrics = train_step(model, batch_x, batch_y, tc, state, rng)
            summary.metrics.append(metrics)
            summary.steps_run += 1
            if metrics_fh is not None:
                metrics_fh.write(metrics.to_json() + "\n")
            if log is not None and (step % 50 == 0 or step == tc.steps):
                log(f"step {step}/{tc.steps} total={metrics.total:.4f} "
                    f"modality={metrics.modality}")
            if data.valid and tc.validate_every and (
                    step % tc.validate_every == 0 or step == tc.steps):
                acc_xy, acc_yx = _validate(model, data.valid, max_len)
                summary.val_history.append((step, acc_xy, acc_yx))
                mean_acc = 0.5 * (acc_xy + acc_yx)
                if mean_acc >= summary.best_accuracy:
                    summary.best_accuracy = mean_acc
                    summary.best_step = step
                    summary.best_ckpt = checkpoint(step, name="best.umck")
            if tc.checkpoint_every and step % tc.checkpoint_every == 0:
                checkpoint(step)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    summary.final_ckpt = checkpoint(tc.steps)
    if not summary.best_ckpt:
        summary.best_ckpt = summary.final_ckpt
    return summary, model, state
