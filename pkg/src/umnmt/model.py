"""The five networks: text encoder/decoder per language, plus the frozen
image-feature projection, wired through gated cross-modal attention.

Both languages' encoders alias their first ``n_shared`` transformer layers
(same Tensor storage, not copies), and likewise for the decoders.  The
decoder's cross-attention context is a gated sum of up to four terms: text
attention always, image attention when ``lam1`` is set, and two composed
text<->image routes when ``lam2`` is set.  Closed gates skip their branch
entirely, so a text-only forward is bit-identical to a model without an
image pathway.

Batched calls stack examples row-wise: a (B, T) id matrix becomes a
(B*(T+2), d_model) state matrix after framing with BOS/EOS and padding.
"""

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .corpus import BOS, EOS, PAD, ImageFeatureGrid, TokenSeq
from .errors import ConfigError, FormatError, LengthError, ModalityError, ShapeError

MASK = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size_x: int
    vocab_size_y: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    n_shared: int = 1
    d_ff: int = 128
    d_img: int = 32
    k_img: int = 16
    max_len: int = 32
    lambda1: int = 1
    lambda2: int = 0
    dropout_p: float = 0.1
    dtype: str = "float32"

    def __post_init__(self):
        if self.n_shared > self.n_layers:
            raise ConfigError(f"n_shared {self.n_shared} > n_layers {self.n_layers}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.lambda1 not in (0, 1) or self.lambda2 not in (0, 1):
            raise ConfigError("lambda gates must be 0 or 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @classmethod
    def paper_scale(cls, vocab_size_x, vocab_size_y):
        """Full-size configuration: 4-layer / 512-wide transformers sharing
        the first 3 layers, 196 image cells of width 1024."""
        return cls(
            vocab_size_x=vocab_size_x,
            vocab_size_y=vocab_size_y,
            d_model=512,
            n_heads=8,
            n_layers=4,
            n_shared=3,
            d_ff=2048,
            d_img=1024,
            k_img=196,
            max_len=128,
        )


@dataclass
class EncodedText:
    states: T.Tensor  # (batch * width, d_model)
    batch: int
    width: int  # framed length incl. BOS/EOS, padded
    lengths: np.ndarray  # content token counts per example
    key_mask: np.ndarray  # (batch, 1, 1, width) additive

    @property
    def matrix(self):
        return self.states.data


@dataclass
class EncodedImage:
    states: T.Tensor  # (batch * k, d_model)
    batch: int
    k: int

    @property
    def matrix(self):
        return self.states.data


def sinusoidal_positions(max_len, d_model, dtype):
    pos = np.arange(max_len)[:, None].astype(np.float64)
    div = np.exp(np.arange(0, d_model, 2) * -(np.log(10000.0) / d_model))
    table = np.zeros((max_len, d_model))
    table[:, 0::2] = np.sin(pos * div)
    table[:, 1::2] = np.cos(pos * div[: (d_model + 1) // 2])
    return table.astype(dtype)


class _Init:
    def __init__(self, rng, dtype):
        self.rng = rng
        self.dtype = dtype

    def linear(self, fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = self.rng.uniform(-limit, limit, size=(fan_in, fan_out))
        return T.param(w, dtype=self.dtype), T.param(np.zeros(fan_out), dtype=self.dtype)

    def embedding(self, n, d):
        return T.param(self.rng.normal(0.0, 1.0 / np.sqrt(d), size=(n, d)), dtype=self.dtype)

    def layer_norm(self, d):
        return T.param(np.ones(d), dtype=self.dtype), T.param(np.zeros(d), dtype=self.dtype)


def _attn_params(init, d):
    return {
        "wq": init.linear(d, d), "wk": init.linear(d, d),
        "wv": init.linear(d, d), "wo": init.linear(d, d),
    }


def _cross_params(init, d, d_ff):
    return {
        "wq": init.linear(d, d),
        "wk_t": init.linear(d, d), "wv_t": init.linear(d, d),
        "wk_i": init.linear(d, d), "wv_i": init.linear(d, d),
        "wo": init.linear(d, d),
        # composed text<->image routes, touched only when lambda2 = 1
        "wq_e": init.linear(d, d), "wq_i": init.linear(d, d),
        "ffn_ei1": init.linear(d, d_ff), "ffn_ei2": init.linear(d_ff, 2 * d),
        "ffn_ie1": init.linear(d, d_ff), "ffn_ie2": init.linear(d_ff, 2 * d),
    }


def _ffn_params(init, d, d_ff):
    return {"w1": init.linear(d, d_ff), "w2": init.linear(d_ff, d)}


def _enc_layer(init, cfg):
    return {
        "attn": _attn_params(init, cfg.d_model),
        "ln1": init.layer_norm(cfg.d_model),
        "ffn": _ffn_params(init, cfg.d_model, cfg.d_ff),
        "ln2": init.layer_norm(cfg.d_model),
    }


def _dec_layer(init, cfg):
    return {
        "self": _attn_params(init, cfg.d_model),
        "ln1": init.layer_norm(cfg.d_model),
        "cross": _cross_params(init, cfg.d_model, cfg.d_ff),
        "ln2": init.layer_norm(cfg.d_model),
        "ffn": _ffn_params(init, cfg.d_model, cfg.d_ff),
        "ln3": init.layer_norm(cfg.d_model),
    }


class Model:
    def __init__(self, config, rng=None):
        self.cfg = config
        rng = rng if rng is not None else np.random.default_rng(0)
        init = _Init(rng, config.np_dtype)
        d = config.d_model

        self.emb = {
            "x": init.embedding(config.vocab_size_x, d),
            "y": init.embedding(config.vocab_size_y, d),
        }
        self.pos = T.constant(
            sinusoidal_positions(config.max_len, d, config.np_dtype), dtype=config.np_dtype
        )

        shared_enc = [_enc_layer(init, config) for _ in range(config.n_shared)]
        self.enc_layers = {
            lang: shared_enc + [_enc_layer(init, config)
                                for _ in range(config.n_layers - config.n_shared)]
            for lang in ("x", "y")
        }
        shared_dec = [_dec_layer(init, config) for _ in range(config.n_shared)]
        self.dec_layers = {
            lang: shared_dec + [_dec_layer(init, config)
                                for _ in range(config.n_layers - config.n_shared)]
            for lang in ("x", "y")
        }
        self.enc_ln = {"x": init.layer_norm(d), "y": init.layer_norm(d)}
        self.dec_ln = {"x": init.layer_norm(d), "y": init.layer_norm(d)}
        self.img_proj = init.linear(config.d_img, d)
        self.img_ln = init.layer_norm(d)
        self.out = {
            "x": init.linear(d, config.vocab_size_x),
            "y": init.linear(d, config.vocab_size_y),
        }
        self._registry = self._build_registry()

    # -- parameter registry -------------------------------------------------

    def _build_registry(self):
        reg = []

        def put(name, item):
            if isinstance(item, dict):
                for k, v in item.items():
                    put(f"{name}.{k}", v)
            elif isinstance(item, tuple):
                put(f"{name}.w", item[0])
                put(f"{name}.b", item[1])
            else:
                reg.append((name, item))

        put("emb.x", self.emb["x"])
        put("emb.y", self.emb["y"])
        for kind, table in (("enc", self.enc_layers), ("dec", self.dec_layers)):
            for i in range(self.cfg.n_shared):
                put(f"{kind}.shared.{i}", table["x"][i])
            for lang in ("x", "y"):
                for i in range(self.cfg.n_shared, self.cfg.n_layers):
                    put(f"{kind}.{lang}.{i}", table[lang][i])
        for lang in ("x", "y"):
            put(f"enc.{lang}.final_ln", self.enc_ln[lang])
            put(f"dec.{lang}.final_ln", self.dec_ln[lang])
            put(f"out.{lang}", self.out[lang])
        put("img.proj", self.img_proj)
        put("img.ln", self.img_ln)
        assert len({id(t) for _, t in reg}) == len(reg)
        return reg

    def named_parameters(self):
        return list(self._registry)

    def parameters(self):
        return [t for _, t in self._registry]

    # -- masks & framing ------------------------------------------------------

    def _key_mask(self, lengths, width):
        cols = np.arange(width)[None, :]
        blocked = cols >= lengths[:, None]
        mask = np.where(blocked, MASK, 0.0).astype(self.cfg.np_dtype)
        return mask[:, None, None, :]

    def _causal_mask(self, width):
        tri = np.triu(np.full((width, width), MASK), k=1).astype(self.cfg.np_dtype)
        return tri[None, None]

    @staticmethod
    def _frame_encoder(ids):
        ids = np.asarray(ids, dtype=np.int64)
        lengths = (ids != PAD).sum(axis=1)
        b, t = ids.shape
        framed = np.full((b, t + 2), PAD, dtype=np.int64)
        framed[:, 0] = BOS
        framed[:, 1 : t + 1] = ids
        framed[np.arange(b), lengths + 1] = EOS
        return framed, lengths

    @staticmethod
    def _frame_decoder(ids):
        ids = np.asarray(ids, dtype=np.int64)
        lengths = (ids != PAD).sum(axis=1)
        b, t = ids.shape
        dec_in = np.full((b, t + 1), PAD, dtype=np.int64)
        dec_in[:, 0] = BOS
        dec_in[:, 1:] = ids
        targets = np.full((b, t + 1), PAD, dtype=np.int64)
        targets[:, :t] = ids
        targets[np.arange(b), lengths] = EOS
        return dec_in, targets, lengths

    # -- building blocks ------------------------------------------------------

    def _embed(self, framed, lang, p, rng):
        b, width = framed.shape
        if width > self.cfg.max_len:
            raise LengthError(f"sequence of framed length {width} exceeds max_len {self.cfg.max_len}")
        flat = framed.reshape(-1)
        h = T.scale(T.embedding_lookup(self.emb[lang], flat), np.sqrt(self.cfg.d_model))
        pos = np.tile(self.pos.data[:width], (b, 1))
        h = T.add(h, T.constant(pos, dtype=self.cfg.np_dtype))
        return T.dropout(h, p, rng)

    def _linear(self, x, wb):
        return T.affine(x, wb[0], wb[1])

    def _mha(self, q_in, kv_in, prm, batch, mask, scores_out=None):
        q = self._linear(q_in, prm["wq"])
        k = self._linear(kv_in, prm["wk"])
        v = self._linear(kv_in, prm["wv"])
        ctx = T.attention(q, k, v, self.cfg.n_heads, batch, mask, scores_out)
        return self._linear(ctx, prm["wo"])

    def _ffn(self, x, prm):
        return self._linear(T.relu(self._linear(x, prm["w1"])), prm["w2"])

    def _ln(self, x, prm):
        return T.layer_norm_rows(x, prm[0], prm[1])

    def _cross_context(self, q_in, layer, text, image, lam1, lam2, batch,
                       p=0.0, rng=None, trace=None):
        prm = layer["cross"]
        nh = self.cfg.n_heads
        q = self._linear(q_in, prm["wq"])
        kt = self._linear(text.states, prm["wk_t"])
        vt = self._linear(text.states, prm["wv_t"])
        text_rec = [] if trace is not None else None
        ctx = T.attention(q, kt, vt, nh, batch, text.key_mask, text_rec)
        img_rec = None
        if lam1 or lam2:
            if image is None:
                raise ModalityError("image-gated attention requested without an image")
            ki = self._linear(image.states, prm["wk_i"])
            vi = self._linear(image.states, prm["wv_i"])
        if lam1:
            img_rec = [] if trace is not None else None
            ctx = T.add(ctx, T.attention(q, ki, vi, nh, batch, None, img_rec))
        if lam2:
            # text-as-query over image cells, then an FFN emits pseudo keys/values
            qe = self._linear(text.states, prm["wq_e"])
            m_ei = T.attention(qe, ki, vi, nh, batch, None)
            kv_ei = self._linear(T.relu(self._linear(m_ei, prm["ffn_ei1"])), prm["ffn_ei2"])
            d = self.cfg.d_model
            ctx = T.add(ctx, T.attention(
                q, T.slice_cols(kv_ei, 0, d), T.slice_cols(kv_ei, d, 2 * d),
                nh, batch, text.key_mask))
            # mirror direction: image cells query the text
            qi = self._linear(image.states, prm["wq_i"])
            m_ie = T.attention(qi, kt, vt, nh, batch, text.key_mask)
            kv_ie = self._linear(T.relu(self._linear(m_ie, prm["ffn_ie1"])), prm["ffn_ie2"])
            ctx = T.add(ctx, T.attention(
                q, T.slice_cols(kv_ie, 0, d), T.slice_cols(kv_ie, d, 2 * d),
                nh, batch, None))
        out = self._linear(ctx, prm["wo"])
        out = T.dropout(out, p, rng)
        if trace is not None:
            trace.append({
                "text": text_rec[0] if text_rec else None,
                "image": img_rec[0] if img_rec else None,
            })
        return out

    # -- encoders -------------------------------------------------------------

    def encode_text_batch(self, ids, lang, p=0.0, rng=None):
        """ids: (B, T) PAD-padded content token matrix."""
        framed, lengths = self._frame_encoder(ids)
        b, width = framed.shape
        mask = self._key_mask(lengths + 2, width)
        h = self._embed(framed, lang, p, rng)
        for layer in self.enc_layers[lang]:
            u = self._ln(h, layer["ln1"])
            h = T.add(h, T.dropout(self._mha(u, u, layer["attn"], b, mask), p, rng))
            u = self._ln(h, layer["ln2"])
            h = T.add(h, T.dropout(self._ffn(u, layer["ffn"]), p, rng))
        h = self._ln(h, self.enc_ln[lang])
        return EncodedText(h, b, width, lengths, mask)

    def encode_text(self, seq, lang=None):
        lang = lang or seq.lang
        vocab_size = self.cfg.vocab_size_x if lang == "x" else self.cfg.vocab_size_y
        if max(seq.ids) >= vocab_size:
            raise ShapeError(f"token id out of range for lang {lang}")
        return self.encode_text_batch(np.array([seq.ids]), lang)

    def encode_image_batch(self, grids):
        data = np.stack([g.data for g in grids])
        b, k, d_img = data.shape
        if d_img != self.cfg.d_img:
            raise ShapeError("image feature width mismatch", (d_img,), (self.cfg.d_img,))
        flat = T.constant(data.reshape(b * k, d_img), dtype=self.cfg.np_dtype)
        h = self._linear(flat, self.img_proj)
        h = self._ln(h, self.img_ln)
        return EncodedImage(h, b, k)

    def encode_image(self, grid):
        return self.encode_image_batch([grid])

    # -- decoder --------------------------------------------------------------

    def _decoder_states(self, dec_in, text, image, lang, lam1, lam2,
                        p=0.0, rng=None, trace=None):
        b, width = dec_in.shape
        lengths = (dec_in != PAD).sum(axis=1)
        mask = self._causal_mask(width) + self._key_mask(lengths, width)
        h = self._embed(dec_in, lang, p, rng)
        for layer in self.dec_layers[lang]:
            u = self._ln(h, layer["ln1"])
            h = T.add(h, T.dropout(self._mha(u, u, layer["self"], b, mask), p, rng))
            u = self._ln(h, layer["ln2"])
            h = T.add(h, self._cross_context(u, layer, text, image, lam1, lam2, b,
                                             p, rng, trace))
            u = self._ln(h, layer["ln3"])
            h = T.add(h, T.dropout(self._ffn(u, layer["ffn"]), p, rng))
        return self._ln(h, self.dec_ln[lang])

    def teacher_logits_batch(self, ids, text, image, lang, lam1, lam2,
                             p=0.0, rng=None, trace=None):
        """Teacher-forced logits for every position.  Returns (logits Tensor
        of shape (B*(T+1), vocab), flat target ids with PAD to ignore)."""
        dec_in, targets, _ = self._frame_decoder(ids)
        h = self._decoder_states(dec_in, text, image, lang, lam1, lam2, p, rng, trace)
        logits = self._linear(h, self.out[lang])
        return logits, targets.reshape(-1)

    def decode_step(self, prefix, text, image, lang, lam1=0, lam2=0):
        """Logits for the next token after a BOS-led prefix (single example)."""
        ids = np.asarray(prefix.ids if isinstance(prefix, TokenSeq) else prefix,
                         dtype=np.int64)[None, :]
        if ids.shape[1] < 1 or ids[0, 0] != BOS:
            raise ShapeError("decoder prefix must start with BOS")
        h = self._decoder_states(ids, text, image, lang, lam1, lam2)
        logits = self._linear(h, self.out[lang])
        return T.slice_rows(logits, ids.shape[1] - 1, ids.shape[1])

    def greedy_decode_batch(self, text, image, lang, max_len, lam1=0, lam2=0, trace=None):
        """Argmax decoding under inference mode; ties go to the lowest id.
        Returns a list of id tuples (possibly empty) without BOS/EOS."""
        if max_len < 1:
            raise ShapeError(f"max_len must be >= 1, got {max_len}")
        b = text.batch
        with T.no_grad():
            prefix = np.full((b, 1), BOS, dtype=np.int64)
            done = np.zeros(b, dtype=bool)
            outs = [[] for _ in range(b)]
            for _ in range(max_len):
                h = self._decoder_states(prefix, text, image, lang, lam1, lam2)
                logits = self._linear(h, self.out[lang])
                rows = logits.data.reshape(b, prefix.shape[1], -1)[:, -1]
                nxt = rows.argmax(axis=1)
                for i in range(b):
                    if not done[i]:
                        if nxt[i] == EOS:
                            done[i] = True
                        else:
                            outs[i].append(int(nxt[i]))
                if done.all():
                    break
                prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
                if prefix.shape[1] + 1 > self.cfg.max_len:
                    break
            if trace is not None and any(outs):
                # one clean causal pass over the finished hypotheses records
                # full per-layer weight matrices
                width = max(len(o) for o in outs)
                ids = np.full((b, width), PAD, dtype=np.int64)
                for i, o in enumerate(outs):
                    ids[i, : len(o)] = o
                self.teacher_logits_batch(ids, text, image, lang, lam1, lam2, trace=trace)
        return [tuple(o) for o in outs]

    def greedy_decode(self, text, image, lang, max_len, lam1=0, lam2=0):
        """Single-example greedy decode; None when EOS is the first argmax."""
        out = self.greedy_decode_batch(text, image, lang, max_len, lam1, lam2)[0]
        return TokenSeq(lang, out) if out else None

    def controllable_context(self, qd, text, image, lam1, lam2, lang="x", layer=0):
        """Gated multi-domain context for external query rows (batch 1)."""
        return self._cross_context(qd, self.dec_layers[lang][layer], text, image,
                                   lam1, lam2, batch=text.batch)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

_UMCK_MAGIC = b"UMCK"
_UMCK_VERSION = 1


def save_checkpoint(path, model, blob, extras=()):
    """UMCK container: JSON blob (config, vocabularies, trainer state), then
    one float32 record per parameter, then any extra (name, array) records
    such as optimizer moments."""
    records = [(name, t.data) for name, t in model.named_parameters()]
    save_checkpoint_records(path, blob, records + list(extras))


def _write_record(fh, name, arr):
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint_records(path, blob, records):
    """Lower-level writer: ``records`` is an ordered list of (name, array)."""
    payload = json.dumps(blob, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_UMCK_MAGIC)
        fh.write(struct.pack("<II", _UMCK_VERSION, len(payload)))
        fh.write(payload)
        for name, arr in records:
            _write_record(fh, name, arr)


def load_checkpoint(path):
    """Returns (blob dict, ordered dict name -> float32 array)."""
    with open(path, "rb") as fh:
        if fh.read(4) != _UMCK_MAGIC:
            raise FormatError(f"{path}: not a UMCK checkpoint")
        version, blob_len = struct.unpack("<II", fh.read(8))
        if version != _UMCK_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        blob = json.loads(fh.read(blob_len).decode("utf-8"))
        records = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            count = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(fh.read(count * 4), dtype="<f4").reshape(dims)
            records[name] = data
    return blob, records


def model_blob(model, vocab_x, vocab_y, train=None):
    blob = {
        "model": asdict(model.cfg),
        "vocab_x": list(vocab_x.tokens[4:]),
        "vocab_y": list(vocab_y.tokens[4:]),
    }
    if train is not None:
        blob["train"] = train
    return blob


def model_from_checkpoint(path):
    """Rebuild a Model (and its vocabularies) from a checkpoint file."""
    from .corpus import Vocab

    blob, records = load_checkpoint(path)
    cfg = ModelConfig(**blob["model"])
    model = Model(cfg, np.random.default_rng(0))
    load_params(model, records)
    return model, Vocab(blob["vocab_x"]), Vocab(blob["vocab_y"]), blob, records


def load_params(model, records, skip_prefixes=()):
    for name, tensor in model.named_parameters():
        if any(name.startswith(p) for p in skip_prefixes):
            continue
        if name not in records:
            raise ConfigError(f"checkpoint is missing parameter {name}")
        arr = records[name]
        if arr.shape != tensor.data.shape:
            raise ConfigError(
                f"checkpoint parameter {name} has shape {arr.shape}, expected {tensor.data.shape}")
        tensor.data[...] = arr.astype(model.cfg.np_dtype)
