"""Text/vocab plumbing, denoising corruptions, the synthetic cipher dataset,
and modality-aware batching.

Language "x" sentences come from a small role-structured grammar; language
"y" is a token bijection of the same concept stream with a deterministic
pair-swap reordering.  Every sentence gets a pseudo-image: a feature grid in
which each concept deposits a fixed pattern into a fixed cell, so image
grounding has a known ground truth.
"""

import struct
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DataError, EmptyCorpus, EmptySentence, FormatError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<s>", "</s>", "<unk>")

TEXT_ONLY = "text_only"
TEXT_IMAGE = "text_image"

ALTERNATE = "alternate"
SCHEDULES = (ALTERNATE, TEXT_ONLY, "image_only")


class Vocab:
    """Token <-> id table with the four reserved specials at ids 0..3."""

    def __init__(self, tokens):
        self.tokens = tuple(SPECIAL_TOKENS) + tuple(tokens)
        self.id_of = {t: i for i, t in enumerate(self.tokens)}
        if len(self.id_of) != len(self.tokens):
            raise DataError("duplicate token in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def encode(self, tokens):
        return [self.id_of.get(t, UNK) for t in tokens]

    def decode(self, ids):
        return [self.tokens[i] for i in ids]

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for t in self.tokens:
                fh.write(t + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            lines = [ln.rstrip("\n") for ln in fh]
        lines = [ln for ln in lines if ln != ""]
        if tuple(lines[:4]) != SPECIAL_TOKENS:
            raise FormatError(f"vocab file {path} must begin with {' '.join(SPECIAL_TOKENS)}")
        return cls(lines[4:])


@dataclass(frozen=True)
class TokenSeq:
    lang: str
    ids: tuple

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        if len(self.ids) < 1:
            raise EmptySentence(f"empty {self.lang} sequence")

    def __len__(self):
        return len(self.ids)


@dataclass(frozen=True)
class ImageFeatureGrid:
    data: np.ndarray  # k x d_img, float32

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        object.__setattr__(self, "data", data)
        if data.ndim != 2:
            raise DataError(f"feature grid must be 2-D, got {data.shape}")
        side = int(round(np.sqrt(data.shape[0])))
        if side * side != data.shape[0]:
            raise DataError(f"grid cell count {data.shape[0]} is not a perfect square")
        if not np.all(np.isfinite(data)):
            raise DataError("feature grid contains non-finite entries")

    @property
    def k(self):
        return self.data.shape[0]

    @property
    def d_img(self):
        return self.data.shape[1]

    @property
    def grid_side(self):
        return int(round(np.sqrt(self.data.shape[0])))


@dataclass(frozen=True)
class Example:
    text: TokenSeq
    image: Optional[ImageFeatureGrid] = None


@dataclass(frozen=True)
class Batch:
    examples: tuple
    modality: str

    def __post_init__(self):
        object.__setattr__(self, "examples", tuple(self.examples))
        if not self.examples:
            raise DataError("empty batch")
        langs = {e.text.lang for e in self.examples}
        if len(langs) != 1:
            raise DataError(f"batch mixes languages {sorted(langs)}")
        if self.modality == TEXT_IMAGE and any(e.image is None for e in self.examples):
            raise DataError("text_image batch contains an example without an image")

    @property
    def lang(self):
        return self.examples[0].text.lang

    def __len__(self):
        return len(self.examples)

    def padded_ids(self):
        """(B, T) int64 id matrix padded with PAD to the longest example."""
        width = max(len(e.text) for e in self.examples)
        out = np.full((len(self.examples), width), PAD, dtype=np.int64)
        for i, e in enumerate(self.examples):
            out[i, : len(e.text)] = e.text.ids
        return out


# ---------------------------------------------------------------------------
# tokenization / vocabulary
# ---------------------------------------------------------------------------

def _is_punct(ch):
    return unicodedata.category(ch).startswith("P")


def tokenize(text):
    """Lowercased whitespace split; leading/trailing punctuation becomes
    separate tokens, interior punctuation (hyphens etc.) stays attached."""
    pieces = text.lower().split()
    if not pieces:
        raise EmptySentence("cannot tokenize empty input")
    out = []
    for piece in pieces:
        head = []
        while piece and _is_punct(piece[0]):
            head.append(piece[0])
            piece = piece[1:]
        tail = []
        while piece and _is_punct(piece[-1]):
            tail.append(piece[-1])
            piece = piece[:-1]
        out.extend(head)
        if piece:
            out.append(piece)
        out.extend(reversed(tail))
    return out


def build_vocab(corpus, min_freq=1):
    """Frequency-ordered vocab (ties lexicographic) over tokenized sentences;
    tokens below ``min_freq`` fall through to UNK."""
    if min_freq < 1:
        raise DataError(f"min_freq must be >= 1, got {min_freq}")
    if not corpus:
        raise EmptyCorpus("no sentences to build a vocabulary from")
    counts = Counter()
    for tokens in corpus:
        counts.update(tokens)
    keep = sorted(
        (t for t, c in counts.items() if c >= min_freq),
        key=lambda t: (-counts[t], t),
    )
    return Vocab(keep)


# ---------------------------------------------------------------------------
# denoising corruptions
# ---------------------------------------------------------------------------

def noise_delete(seq, p_del, rng):
    """Drop each token with probability ``p_del``; always keeps at least the
    first token so the encoder never sees an empty input."""
    if not 0.0 <= p_del < 1.0:
        raise DataError(f"p_del must be in [0, 1), got {p_del}")
    keep = rng.random(len(seq)) >= p_del
    if not keep.any():
        keep[0] = True
    ids = tuple(i for i, k in zip(seq.ids, keep) if k)
    return TokenSeq(seq.lang, ids)


def noise_permute(seq, window, rng):
    """Local shuffle: add uniform(0, window+1) jitter to each position and
    stable-sort.  Every token moves at most ``window`` places."""
    if window < 0:
        raise DataError(f"permutation window must be >= 0, got {window}")
    keys = np.arange(len(seq)) + rng.uniform(0.0, window + 1.0, size=len(seq))
    order = np.argsort(keys, kind="stable")
    return TokenSeq(seq.lang, tuple(seq.ids[i] for i in order))


def corrupt_image(grid, p_drop, rng):
    """Inverted dropout on feature entries: zero with probability ``p_drop``,
    scale survivors by 1/(1-p_drop) so the expectation is unchanged."""
    if not 0.0 <= p_drop < 1.0:
        raise DataError(f"p_drop must be in [0, 1), got {p_drop}")
    if p_drop == 0.0:
        return grid
    mask = rng.random(grid.data.shape) >= p_drop
    return ImageFeatureGrid(grid.data * mask / (1.0 - p_drop))


# ---------------------------------------------------------------------------
# synthetic cipher dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    vocab_size: int = 24
    len_min: int = 4
    len_max: int = 8
    n_train: int = 2000
    n_valid: int = 200
    n_test: int = 200
    k_img: int = 16
    d_img: int = 32
    n_roles: int = 4
    zipf_power: float = 0.6
    image_noise: float = 0.1
    overlap: bool = False

    def __post_init__(self):
        if min(self.vocab_size, self.len_min, self.n_train) < 1:
            raise DataError("vocab size, sentence length and sample count must be positive")
        if self.len_max < self.len_min:
            raise DataError("len_max < len_min")
        if self.vocab_size % self.n_roles:
            raise DataError("vocab_size must divide evenly into roles")


@dataclass(frozen=True)
class PairExample:
    x: TokenSeq
    y: TokenSeq
    image: ImageFeatureGrid


@dataclass
class SynthData:
    config: SynthConfig
    vocab_x: Vocab
    vocab_y: Vocab
    train_x: list
    train_y: list
    valid: list
    test: list
    cipher: dict = field(repr=False)  # x token string -> y token string
    cell_of_x: dict = field(repr=False)  # x token string -> generating grid cell
    cell_of_y: dict = field(repr=False)

    def corpus_x(self):
        return [[self.vocab_x.tokens[i] for i in e.text.ids] for e in self.train_x]

    def corpus_y(self):
        return [[self.vocab_y.tokens[i] for i in e.text.ids] for e in self.train_y]


def _x_surface(concept):
    return f"x{concept:02d}"


def _reorder(items):
    """Deterministic local reordering: swap adjacent pairs.  Self-inverse and
    every token moves at most one position."""
    out = list(items)
    for i in range(0, len(out) - 1, 2):
        out[i], out[i + 1] = out[i + 1], out[i]
    return out


def apply_cipher(tokens, cipher):
    """x-language tokens -> y-language tokens (bijection + pair swap)."""
    return _reorder([cipher[t] for t in tokens])


def invert_cipher(tokens, cipher):
    inv = {y: x for x, y in cipher.items()}
    return [inv[t] for t in _reorder(tokens)]


def gen_synthetic(config, rng):
    """Build the toy bilingual multi-modal dataset.

    Concepts are partitioned into roles; sentence slots cycle through the
    roles and sample a concept with mildly skewed within-role weights (enough
    statistical signal for text-only alignment, enough ambiguity that image
    grounding pays off).  Training halves are disjoint unless
    ``config.overlap`` pretends the same sentences are unparalleled halves.
    """
    cfg = config
    v = cfg.vocab_size
    per_role = v // cfg.n_roles
    weights = 1.0 / (1.0 + np.arange(per_role)) ** cfg.zipf_power
    weights /= weights.sum()

    perm = rng.permutation(v)
    cipher = {_x_surface(c): f"y{perm[c]:02d}" for c in range(v)}
    patterns = rng.normal(size=(v, cfg.d_img))
    patterns /= np.linalg.norm(patterns, axis=1, keepdims=True)
    cell = np.arange(v) % cfg.k_img

    def draw_content():
        length = int(rng.integers(cfg.len_min, cfg.len_max + 1))
        concepts = []
        for pos in range(length):
            role = pos % cfg.n_roles
            pick = rng.choice(per_role, p=weights)
            concepts.append(role * per_role + int(pick))
        return concepts

    def render_image(concepts):
        grid = np.zeros((cfg.k_img, cfg.d_img))
        for c in concepts:
            grid[cell[c]] += patterns[c]
        grid += rng.normal(0.0, cfg.image_noise, size=grid.shape)
        return ImageFeatureGrid(grid.astype(np.float32))

    n_halves = cfg.n_train if cfg.overlap else 2 * cfg.n_train
    contents = [draw_content() for _ in range(n_halves + cfg.n_valid + cfg.n_test)]

    x_tokens = [[_x_surface(c) for c in s] for s in contents]
    y_tokens = [apply_cipher(toks, cipher) for toks in x_tokens]
    vocab_x = build_vocab(x_tokens, min_freq=1)
    vocab_y = build_vocab(y_tokens, min_freq=1)

    def x_example(i):
        return Example(TokenSeq("x", vocab_x.encode(x_tokens[i])), render_image(contents[i]))

    def y_example(i):
        return Example(TokenSeq("y", vocab_y.encode(y_tokens[i])), render_image(contents[i]))

    if cfg.overlap:
        ix = iy = range(cfg.n_train)
        eval_at = cfg.n_train
    else:
        ix = range(cfg.n_train)
        iy = range(cfg.n_train, 2 * cfg.n_train)
        eval_at = 2 * cfg.n_train

    train_x = [x_example(i) for i in ix]
    train_y = [y_example(i) for i in iy]

    def pair(i):
        return PairExample(
            TokenSeq("x", vocab_x.encode(x_tokens[i])),
            TokenSeq("y", vocab_y.encode(y_tokens[i])),
            render_image(contents[i]),
        )

    valid = [pair(i) for i in range(eval_at, eval_at + cfg.n_valid)]
    test = [pair(i) for i in range(eval_at + cfg.n_valid, eval_at + cfg.n_valid + cfg.n_test)]

    cell_of_x = {_x_surface(c): int(cell[c]) for c in range(v)}
    cell_of_y = {cipher[_x_surface(c)]: int(cell[c]) for c in range(v)}
    return SynthData(
        config=cfg,
        vocab_x=vocab_x,
        vocab_y=vocab_y,
        train_x=train_x,
        train_y=train_y,
        valid=valid,
        test=test,
        cipher=cipher,
        cell_of_x=cell_of_x,
        cell_of_y=cell_of_y,
    )


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def make_batches(examples, batch_size, schedule, rng, phase=0):
    """One shuffled pass over ``examples`` in batches of ``batch_size`` (the
    last batch may be short).  ``schedule`` tags modality: "text_only",
    "image_only", or "alternate" (strict TextOnly/TextImage alternation,
    continued across epochs via ``phase``)."""
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    if schedule not in SCHEDULES:
        raise DataError(f"unknown schedule {schedule!r}")
    order = rng.permutation(len(examples))
    for b, at in enumerate(range(0, len(examples), batch_size)):
        chunk = [examples[i] for i in order[at : at + batch_size]]
        if schedule == TEXT_ONLY:
            modality = TEXT_ONLY
        elif schedule == "image_only":
            modality = TEXT_IMAGE
        else:
            modality = TEXT_ONLY if (phase + b) % 2 == 0 else TEXT_IMAGE
        if modality == TEXT_ONLY:
            chunk = [Example(e.text, None) for e in chunk]
        yield Batch(tuple(chunk), modality)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

_UMFM_MAGIC = b"UMFM"
_UMFM_VERSION = 1


def save_corpus(path, sentences):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for tokens in sentences:
            fh.write(" ".join(tokens) + "\n")


def load_corpus(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line:
                out.append(tokenize(line))
    if not out:
        raise EmptyCorpus(f"no sentences in {path}")
    return out


def save_features(path, grids):
    """UMFM container: magic, version, N, k, d_img, then N float32 grids."""
    if not grids:
        raise DataError("no feature grids to save")
    k, d_img = grids[0].k, grids[0].d_img
    with open(path, "wb") as fh:
        fh.write(_UMFM_MAGIC)
        fh.write(struct.pack("<IIII", _UMFM_VERSION, len(grids), k, d_img))
        for g in grids:
            if g.data.shape != (k, d_img):
                raise DataError(f"inconsistent grid shape {g.data.shape} vs ({k}, {d_img})")
            fh.write(g.data.astype("<f4").tobytes())


def load_features(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _UMFM_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        version, n, k, d_img = struct.unpack("<IIII", fh.read(16))
        if version != _UMFM_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        raw = fh.read(n * k * d_img * 4)
        if len(raw) != n * k * d_img * 4:
            raise FormatError(f"{path}: truncated feature data")
        data = np.frombuffer(raw, dtype="<f4").reshape(n, k, d_img)
    return [ImageFeatureGrid(data[i].copy()) for i in range(n)]
