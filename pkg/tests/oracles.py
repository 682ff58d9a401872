"""Independent straight-line reference implementations used only by tests.

These deliberately avoid the package's Tensor/attention machinery: plain
numpy, explicit per-head loops, textbook formulas.
"""

import math
from collections import Counter

import numpy as np


def softmax_rows(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def _lin(x, wb):
    return x @ wb[0] + wb[1]


def _att_heads(q, k, v, n_heads, col_mask=None):
    """Per-head scaled dot attention with an optional additive key mask row."""
    d = q.shape[1]
    dh = d // n_heads
    outs = []
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        if col_mask is not None:
            scores = scores + col_mask[None, :]
        outs.append(softmax_rows(scores) @ v[:, sl])
    return np.concatenate(outs, axis=1)


def gated_context(qd, text, image, prm, n_heads, lam1, lam2, text_col_mask=None):
    """Four-term gated context, term by term:

        ctx = Att(q, text) + lam1 * Att(q, image)
            + lam2 * Att(q, FFN(Att(text, image)))   # pseudo keys/values
            + lam2 * Att(q, FFN(Att(image, text)))   # mirror direction

    ``prm`` maps names to (weight, bias) numpy pairs taken from a model's
    cross-attention layer.
    """
    d = qd.shape[1]
    q = _lin(qd, prm["wq"])
    kt = _lin(text, prm["wk_t"])
    vt = _lin(text, prm["wv_t"])
    ctx = _att_heads(q, kt, vt, n_heads, text_col_mask)
    if lam1 or lam2:
        ki = _lin(image, prm["wk_i"])
        vi = _lin(image, prm["wv_i"])
    if lam1:
        ctx = ctx + _att_heads(q, ki, vi, n_heads)
    if lam2:
        qe = _lin(text, prm["wq_e"])
        m_ei = _att_heads(qe, ki, vi, n_heads)
        kv_ei = _lin(np.maximum(_lin(m_ei, prm["ffn_ei1"]), 0.0), prm["ffn_ei2"])
        ctx = ctx + _att_heads(q, kv_ei[:, :d], kv_ei[:, d:], n_heads, text_col_mask)
        qi = _lin(image, prm["wq_i"])
        m_ie = _att_heads(qi, kt, vt, n_heads, text_col_mask)
        kv_ie = _lin(np.maximum(_lin(m_ie, prm["ffn_ie1"]), 0.0), prm["ffn_ie2"])
        ctx = ctx + _att_heads(q, kv_ie[:, :d], kv_ie[:, d:], n_heads)
    return _lin(ctx, prm["wo"])


def cross_entropy(logits, targets, ignore_id=-1):
    """Mean negative log-likelihood over non-ignored rows, computed with the
    plain definition (normalize, pick, log)."""
    total, n = 0.0, 0
    for row, t in zip(logits, targets):
        if t == ignore_id:
            continue
        p = np.exp(row - row.max())
        p = p / p.sum()
        total += -math.log(p[t])
        n += 1
    return total / max(n, 1)


def ngram_counts(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_by_hand(hyp, ref, max_n=4):
    """Hand BLEU: clipped precisions with add-1 smoothing on zero counts for
    n >= 2, brevity penalty exp(1 - r/h) when the hypothesis is short."""
    if not hyp:
        return 0.0, [0.0] * max_n, 0.0
    precisions = []
    for n in range(1, max_n + 1):
        cand = ngram_counts(hyp, n)
        refc = ngram_counts(ref, n)
        clipped = sum(min(c, refc[g]) for g, c in cand.items())
        total = max(len(hyp) - n + 1, 0)
        if n >= 2 and clipped == 0:
            precisions.append((clipped + 1.0) / (total + 1.0))
        elif total == 0:
            precisions.append(0.0)
        else:
            precisions.append(clipped / total)
    bp = 1.0 if len(hyp) >= len(ref) else math.exp(1.0 - len(ref) / len(hyp))
    if min(precisions) == 0.0:
        return 0.0, precisions, bp
    score = bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return score, precisions, bp


def entropy(p):
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def mutual_information(joint, axes_a, axes_b):
    """I(A;B) for a joint array, marginalizing everything else out."""
    all_axes = set(range(joint.ndim))
    pa = joint.sum(axis=tuple(all_axes - set(axes_a)))
    pb = joint.sum(axis=tuple(all_axes - set(axes_b)))
    pab = joint.sum(axis=tuple(all_axes - set(axes_a) - set(axes_b)))
    return entropy(pa.ravel()) + entropy(pb.ravel()) - entropy(pab.ravel())
