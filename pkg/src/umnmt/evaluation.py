"""Translation quality metrics, the mutual-information-gap diagnostic, and
attention heat-map extraction."""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .corpus import Vocab  # noqa: F401  (re-exported for CLI convenience)
from .errors import DataError, DistributionError, ModalityError


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BleuReport:
    score: float
    precisions: tuple
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    empty_hypothesis: bool = False


def _ngrams(tokens, n):
    counts = {}
    for i in range(len(tokens) - n + 1):
        g = tuple(tokens[i : i + n])
        counts[g] = counts.get(g, 0) + 1
    return counts


def _bleu_from_counts(clipped, totals, hyp_len, ref_len, max_n):
    precisions = []
    for n in range(1, max_n + 1):
        c, t = clipped[n], totals[n]
        if n >= 2 and c == 0:
            precisions.append((c + 1.0) / (t + 1.0))  # add-1 smoothing on zeros
        elif t == 0:
            precisions.append(0.0)
        else:
            precisions.append(c / t)
    bp = 1.0 if hyp_len >= ref_len else float(np.exp(1.0 - ref_len / hyp_len))
    if min(precisions) <= 0.0:
        score = 0.0
    else:
        score = bp * float(np.exp(np.mean(np.log(precisions))))
    return BleuReport(score, tuple(precisions), bp, hyp_len, ref_len)


def corpus_bleu(hypotheses, references, max_n=4):
    """Pooled modified n-gram precisions over the whole corpus, add-1
    smoothing on zero counts for n >= 2, brevity penalty from pooled
    lengths."""
    if len(hypotheses) != len(references):
        raise DataError("hypothesis/reference count mismatch")
    if any(len(r) == 0 for r in references):
        raise DataError("empty reference sentence")
    clipped = {n: 0 for n in range(1, max_n + 1)}
    totals = {n: 0 for n in range(1, max_n + 1)}
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            cand = _ngrams(hyp, n)
            refc = _ngrams(ref, n)
            clipped[n] += sum(min(c, refc.get(g, 0)) for g, c in cand.items())
            totals[n] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0:
        return BleuReport(0.0, tuple(0.0 for _ in range(max_n)), 0.0, 0, ref_len,
                          empty_hypothesis=True)
    return _bleu_from_counts(clipped, totals, hyp_len, ref_len, max_n)


def bleu(hypothesis, reference, max_n=4):
    """Sentence BLEU of one hypothesis/reference pair."""
    hyp = list(hypothesis.ids if hasattr(hypothesis, "ids") else hypothesis)
    ref = list(reference.ids if hasattr(reference, "ids") else reference)
    if not ref:
        raise DataError("empty reference")
    return corpus_bleu([hyp], [ref], max_n=max_n)


# ---------------------------------------------------------------------------
# mutual-information gap
# ---------------------------------------------------------------------------

def _xlogx_sum(p, q):
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def mi_gap(joint):
    """I(X;Y,Z) - I(X;Y) computed twice over an explicit p(X,Y,Z) table:
    once from mutual informations, once as KL(p(X,Y,Z) || p(X|Y)p(Z|Y)p(Y)).
    Returns (gap, |difference between the two routes|)."""
    p = np.asarray(joint, dtype=np.float64)
    if p.ndim != 3:
        raise DistributionError(f"joint must be 3-D, got shape {p.shape}")
    if np.any(p < 0):
        raise DistributionError("negative probability mass")
    if abs(p.sum() - 1.0) > 1e-9:
        raise DistributionError(f"mass sums to {p.sum():.12f}, not 1")

    px = p.sum(axis=(1, 2))
    py = p.sum(axis=(0, 2))
    pxy = p.sum(axis=2)
    pyz = p.sum(axis=0)

    # route 1: mutual informations by definition
    i_xyz = _xlogx_sum(p, px[:, None, None] * pyz[None, :, :])
    i_xy = _xlogx_sum(pxy, px[:, None] * py[None, :])
    gap = i_xyz - i_xy

    # route 2: the KL form, q(x,y,z) = p(x|y) p(z|y) p(y) = p(x,y) p(y,z) / p(y)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = pxy[:, :, None] * pyz[None, :, :] / py[None, :, None]
    q = np.where(np.isfinite(q), q, 0.0)
    kl = _xlogx_sum(p, q)

    return gap, abs(gap - kl)


# ---------------------------------------------------------------------------
# attention extraction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AttentionMap:
    target_tokens: tuple  # token ids, length l_T
    kind: str  # "text" | "image"
    layer: int
    weights: np.ndarray = field(repr=False)  # l_T x l_S, rows sum to 1
    grid_side: int = 0  # image kind only

    @property
    def l_t(self):
        return self.weights.shape[0]

    @property
    def l_s(self):
        return self.weights.shape[1]

    def normalized(self):
        """Heat-map scaling of the raw weights into [0, 1]."""
        w = self.weights
        lo, hi = w.min(), w.max()
        if hi - lo < 1e-12:
            return np.zeros_like(w)
        return (w - lo) / (hi - lo)


def extract_attention(model, x, image=None, target=None, max_len=24):
    """Decode ``x`` (greedy) while recording decoder cross-attention, one map
    per decoder layer and kind.  Text maps are trimmed of the BOS/EOS key
    columns and row-renormalized; image maps are over raw grid cells."""
    lam1 = 1 if (image is not None and model.cfg.lambda1) else 0
    lam2 = model.cfg.lambda2 if image is not None else 0
    other = "y" if x.lang == "x" else "x"
    trace = []
    with T.no_grad():
        enc = model.encode_text(x)
        img = model.encode_image(image) if image is not None else None
        if target is None:
            out = model.greedy_decode_batch(enc, img, other, max_len, lam1, lam2,
                                            trace=trace)[0]
        else:
            out = tuple(target.ids)
            model.teacher_logits_batch(np.array([out]), enc, img, other, lam1, lam2,
                                       trace=trace)
    if not out:
        return []

    l_t = len(out)
    n_src = len(x.ids)
    maps = []
    for layer, rec in enumerate(trace):
        text_w = rec["text"].mean(axis=1)[0]  # head average, batch 1
        trimmed = text_w[:l_t, 1 : n_src + 1]
        sums = trimmed.sum(axis=1, keepdims=True)
        rows = np.where(sums > 1e-12, trimmed / np.maximum(sums, 1e-300),
                        np.full_like(trimmed, 1.0 / max(n_src, 1)))
        maps.append(AttentionMap(tuple(out), "text", layer, rows))
        if rec["image"] is not None:
            img_w = rec["image"].mean(axis=1)[0][:l_t]
            side = int(round(np.sqrt(img_w.shape[1])))
            maps.append(AttentionMap(tuple(out), "image", layer, img_w, grid_side=side))
    return maps


def attention_records(maps, vocab):
    """JSON-ready dicts, one per (target token, layer, kind)."""
    records = []
    for m in maps:
        heat = m.normalized()
        for row_i, tok in enumerate(m.target_tokens):
            raw_row = m.weights[row_i]
            heat_row = heat[row_i]
            if m.kind == "image":
                raw_row = raw_row.reshape(m.grid_side, m.grid_side)
                heat_row = heat_row.reshape(m.grid_side, m.grid_side)
                rows = raw_row.tolist()
                heat_rows = heat_row.tolist()
            else:
                rows = [raw_row.tolist()]
                heat_rows = [heat_row.tolist()]
            records.append({
                "token": vocab.tokens[tok],
                "position": row_i,
                "layer": m.layer,
                "kind": m.kind,
                "rows": rows,
                "heat": heat_rows,
                "grid_side": m.grid_side or None,
            })
    return records


# ---------------------------------------------------------------------------
# test-set evaluation
# ---------------------------------------------------------------------------

WITH_IMAGE = "with_image"
TEXT_ONLY_EVAL = "text_only"


@dataclass(frozen=True)
class EvalReport:
    bleu: float
    precisions: tuple
    brevity_penalty: float
    token_accuracy: float
    n_sentences: int
    modality: str
    src_lang: str

    def to_dict(self):
        return {
            "bleu": self.bleu,
            "precisions": list(self.precisions),
            "bp": self.brevity_penalty,
            "token_accuracy": self.token_accuracy,
            "n_sentences": self.n_sentences,
            "modality": self.modality,
            "src_lang": self.src_lang,
        }


def token_accuracy(hypotheses, references):
    """Position-aligned token match rate, denominated by reference length."""
    hits = total = 0
    for hyp, ref in zip(hypotheses, references):
        hits += sum(1 for a, b in zip(hyp, ref) if a == b)
        total += len(ref)
    return hits / max(total, 1)


def translate_batch(model, seqs, images=None, max_len=24, batch_size=64):
    """Greedy translation of TokenSeqs into the other language; returns id
    tuples.  ``images`` enables the image gate."""
    src_lang = seqs[0].lang
    other = "y" if src_lang == "x" else "x"
    lam1 = 1 if (images is not None and model.cfg.lambda1) else 0
    lam2 = model.cfg.lambda2 if images is not None else 0
    outs = []
    for at in range(0, len(seqs), batch_size):
        chunk = seqs[at : at + batch_size]
        width = max(len(s) for s in chunk)
        ids = np.zeros((len(chunk), width), dtype=np.int64)
        for i, s in enumerate(chunk):
            ids[i, : len(s)] = s.ids
        with T.no_grad():
            enc = model.encode_text_batch(ids, src_lang)
            img = (model.encode_image_batch(images[at : at + batch_size])
                   if lam1 or lam2 else None)
            outs.extend(model.greedy_decode_batch(enc, img, other, max_len, lam1, lam2))
    return outs


def evaluate(model, pairs, modality, src_lang="x", max_len=24):
    """Corpus BLEU + token accuracy translating every pair's source.  In
    ``text_only`` mode the images are ignored even when present, which is how
    an image-trained checkpoint is probed without features."""
    if modality not in (WITH_IMAGE, TEXT_ONLY_EVAL):
        raise DataError(f"unknown eval modality {modality!r}")
    srcs = [p.x if src_lang == "x" else p.y for p in pairs]
    refs = [tuple((p.y if src_lang == "x" else p.x).ids) for p in pairs]
    images = None
    if modality == WITH_IMAGE:
        if any(p.image is None for p in pairs):
            raise ModalityError("with_image evaluation needs features for every pair")
        images = [p.image for p in pairs]
    hyps = translate_batch(model, srcs, images, max_len=max_len)
    report = corpus_bleu(hyps, refs)
    return EvalReport(
        bleu=report.score,
        precisions=report.precisions,
        brevity_penalty=report.brevity_penalty,
        token_accuracy=token_accuracy(hyps, refs),
        n_sentences=len(pairs),
        modality=modality,
        src_lang=src_lang,
    )
