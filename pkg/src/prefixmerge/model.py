"""Small encoder-decoder transformer with trainable key-value prefixes.

Every attention site (encoder self-attention, decoder self-attention,
decoder cross-attention) accepts prepended key/value blocks derived from a
trainable prefix matrix, so a frozen backbone can be steered entirely
through those blocks. Prefix positions are pure memory: they emit no
queries and carry no positional encoding; causal masking applies only
among content positions.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, asdict, field

import numpy as np

from . import autodiff as ad
from .binio import CheckpointError, read_blob, take_array, write_blob

SITES = ("enc_self", "dec_self", "dec_cross")


class LengthError(ValueError):
    """Input longer than the configured maximum; caller truncates explicitly."""


class CompatibilityError(ValueError):
    """Checkpoint dimensions do not match the model configuration."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_ff: int
    vocab_size: int
    max_src_len: int
    max_tgt_len: int

    def __post_init__(self):
        for name, v in asdict(self).items():
            if v <= 0:
                raise ValueError(f"ModelConfig.{name} must be positive, got {v}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by "
                             f"n_heads {self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def prefix_row_dim(config: ModelConfig) -> int:
    """Width of one prefix row: key+value per site per layer."""
    return config.n_layers * len(SITES) * 2 * config.d_model


@dataclass
class PrefixActivations:
    """Per-site, per-layer key/value blocks sliced from prefix rows.

    blocks[site][layer] = (key_block, value_block), each [length x d_model];
    the blocks stay connected to the prefix matrix so gradients flow back.
    """
    length: int
    blocks: dict


@dataclass
class AttentionTrace:
    """Post-softmax attention weights for one site: per layer arrays
    of shape [n_heads, query_len, prefix_len + key_len]."""
    site: str
    layers: list = field(default_factory=list)


def attend_with_prefix(q, k, v, prefix_k=None, prefix_v=None,
                       causal: bool = False, n_heads: int = 1):
    """Scaled dot-product attention over [prefix; content] keys and values.

    q, k, v: [T, D] tensors (already projected). prefix_k/prefix_v: [L, D]
    or None. Returns (output [Tq, D], weights [n_heads, Tq, L+Tk] as a
    detached float array). Causal masking hides only future *content*
    positions; prefix columns are visible to every query.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ad.ShapeError("attend: q, k, v must be 2-D")
    if k.shape != v.shape:
        raise ad.ShapeError(f"attend: key shape {k.shape} != value shape {v.shape}")
    d = q.shape[1]
    if k.shape[1] != d or d % n_heads:
        raise ad.ShapeError(f"attend: model dim {d} incompatible with keys "
                            f"{k.shape} / {n_heads} heads")
    if (prefix_k is None) != (prefix_v is None):
        raise ad.ShapeError("attend: prefix_k and prefix_v must come together")
    n_prefix = 0
    if prefix_k is not None:
        if prefix_k.shape != prefix_v.shape or prefix_k.ndim != 2 \
                or prefix_k.shape[1] != d:
            raise ad.ShapeError(f"attend: bad prefix shapes {prefix_k.shape} "
                                f"and {prefix_v.shape}")
        n_prefix = prefix_k.shape[0]
    tq, tk = q.shape[0], k.shape[0]
    if causal and tq != tk:
        raise ad.ShapeError(f"attend: causal attention needs square content "
                            f"({tq} queries vs {tk} keys)")
    dh = d // n_heads
    inv_scale = 1.0 / math.sqrt(dh)

    def heads(a, t):
        return a.reshape(t, n_heads, dh).transpose(1, 0, 2)

    qh = heads(q.data, tq)
    kh = heads(k.data, tk)
    vh = heads(v.data, tk)
    if n_prefix:
        kh = np.concatenate([heads(prefix_k.data, n_prefix), kh], axis=1)
        vh = np.concatenate([heads(prefix_v.data, n_prefix), vh], axis=1)

    scores = (qh @ kh.transpose(0, 2, 1)) * inv_scale
    if causal and tq > 1:
        hide = np.triu(np.ones((tq, tk), dtype=bool), k=1)
        scores[:, :, n_prefix:][:, hide] = -np.inf
    scores -= scores.max(axis=2, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=2, keepdims=True)
    out = (weights @ vh).transpose(1, 0, 2).reshape(tq, d)

    def grad_fn(g):
        gh = heads(g, tq)
        d_w = gh @ vh.transpose(0, 2, 1)
        d_vh = weights.transpose(0, 2, 1) @ gh
        d_s = weights * (d_w - (d_w * weights).sum(axis=2, keepdims=True))
        d_qh = (d_s @ kh) * inv_scale
        d_kh = (d_s.transpose(0, 2, 1) @ qh) * inv_scale

        def merge(a, t):
            return a.transpose(1, 0, 2).reshape(t, d)

        gq = merge(d_qh, tq) if q.requires_grad else None
        gk = merge(d_kh[:, n_prefix:], tk) if k.requires_grad else None
        gv = merge(d_vh[:, n_prefix:], tk) if v.requires_grad else None
        if n_prefix:
            gpk = merge(d_kh[:, :n_prefix], n_prefix) if prefix_k.requires_grad else None
            gpv = merge(d_vh[:, :n_prefix], n_prefix) if prefix_v.requires_grad else None
            return (gq, gk, gv, gpk, gpv)
        return (gq, gk, gv)

    parents = (q, k, v) if not n_prefix else (q, k, v, prefix_k, prefix_v)
    return ad.node(out, parents, grad_fn), weights.copy()


def sinusoidal_encoding(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(d_model, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    enc = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


class EncoderDecoder:
    """Pre-norm transformer; parameters live in a flat name -> Tensor map.

    Weights use Xavier-uniform init so a *frozen* random backbone still
    provides usable features at desk scale; embeddings are unit normal.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self._params = {}
        rng = np.random.default_rng(seed)
        d, ff, v = config.d_model, config.d_ff, config.vocab_size

        def xavier(shape):
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            return rng.uniform(-limit, limit, size=shape)

        def p(name, value):
            self._params[name] = ad.Tensor(value, requires_grad=True)

        p("tok_emb", rng.normal(size=(v, d)))
        for i in range(config.n_layers):
            pre = f"enc{i}."
            p(pre + "ln1_g", np.ones(d)); p(pre + "ln1_b", np.zeros(d))
            for w in ("wq", "wk", "wv", "wo"):
                p(pre + w, xavier((d, d)))
                p(pre + w[1] + "b", np.zeros(d))
            p(pre + "ln2_g", np.ones(d)); p(pre + "ln2_b", np.zeros(d))
            p(pre + "w1", xavier((d, ff))); p(pre + "b1", np.zeros(ff))
            p(pre + "w2", xavier((ff, d))); p(pre + "b2", np.zeros(d))
        for i in range(config.n_layers):
            pre = f"dec{i}."
            p(pre + "ln1_g", np.ones(d)); p(pre + "ln1_b", np.zeros(d))
            for w in ("sq", "sk", "sv", "so"):
                p(pre + w + "_w", xavier((d, d)))
                p(pre + w + "_b", np.zeros(d))
            p(pre + "ln2_g", np.ones(d)); p(pre + "ln2_b", np.zeros(d))
            for w in ("cq", "ck", "cv", "co"):
                p(pre + w + "_w", xavier((d, d)))
                p(pre + w + "_b", np.zeros(d))
            p(pre + "ln3_g", np.ones(d)); p(pre + "ln3_b", np.zeros(d))
            p(pre + "w1", xavier((d, ff))); p(pre + "b1", np.zeros(ff))
            p(pre + "w2", xavier((ff, d))); p(pre + "b2", np.zeros(d))
        p("enc_ln_g", np.ones(d)); p("enc_ln_b", np.zeros(d))
        p("dec_ln_g", np.ones(d)); p("dec_ln_b", np.zeros(d))
        p("out_w", xavier((d, v))); p("out_b", np.zeros(v))

        max_pos = max(config.max_src_len, config.max_tgt_len)
        self._pos = sinusoidal_encoding(max_pos, d)

    # -- parameter plumbing ------------------------------------------------

    def parameters(self) -> dict:
        return self._params

    def trainable_parameters(self) -> dict:
        return {n: t for n, t in self._params.items() if t.requires_grad}

    def set_trainable(self, flag: bool) -> None:
        for t in self._params.values():
            t.requires_grad = bool(flag)

    def param_checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self._params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self._params[name].data, dtype="<f8").tobytes())
        return h.hexdigest()

    # -- forward -----------------------------------------------------------

    def _check_tokens(self, tokens, max_len, what):
        ids = np.asarray(tokens, dtype=np.intp)
        if ids.ndim != 1 or ids.size == 0:
            raise ad.ShapeError(f"{what}: expected a nonempty 1-D token sequence")
        if ids.size > max_len:
            raise LengthError(f"{what}: length {ids.size} exceeds maximum {max_len}")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise IndexError(f"{what}: token id out of range "
                             f"(vocab {self.config.vocab_size})")
        return ids

    def _prefix_pair(self, prefix, site, layer):
        if prefix is None or prefix.length == 0:
            return None, None
        return prefix.blocks[site][layer]

    def forward(self, src_tokens, tgt_tokens, prefix: PrefixActivations = None,
                collect_traces: bool = False, bos_id: int = 0):
        """Teacher-forced pass; returns (logits [T, V], traces or None)."""
        cfg = self.config
        src = self._check_tokens(src_tokens, cfg.max_src_len, "source")
        tgt = self._check_tokens(tgt_tokens, cfg.max_tgt_len, "target")
        traces = {s: AttentionTrace(site=s) for s in SITES} if collect_traces else None

        memory = self._encode(src, prefix, traces)
        logits = self._decode(memory, tgt, prefix, traces, bos_id)
        return logits, traces

    def _embed(self, ids):
        x = ad.take_rows(self._params["tok_emb"], ids)
        pos = ad.Tensor(self._pos[:ids.size])
        return ad.add(x, pos)

    def _encode(self, src, prefix, traces):
        P = self._params
        cfg = self.config
        x = self._embed(src)
        for i in range(cfg.n_layers):
            pre = f"enc{i}."
            h = ad.layer_norm(x, P[pre + "ln1_g"], P[pre + "ln1_b"])
            q = ad.linear(h, P[pre + "wq"], P[pre + "qb"])
            k = ad.linear(h, P[pre + "wk"], P[pre + "kb"])
            v = ad.linear(h, P[pre + "wv"], P[pre + "vb"])
            pk, pv = self._prefix_pair(prefix, "enc_self", i)
            att, w = attend_with_prefix(q, k, v, pk, pv, causal=False,
                                        n_heads=cfg.n_heads)
            if traces is not None:
                traces["enc_self"].layers.append(w)
            x = ad.add(x, ad.linear(att, P[pre + "wo"], P[pre + "ob"]))
            h = ad.layer_norm(x, P[pre + "ln2_g"], P[pre + "ln2_b"])
            ff = ad.linear(ad.gelu(ad.linear(h, P[pre + "w1"], P[pre + "b1"])),
                           P[pre + "w2"], P[pre + "b2"])
            x = ad.add(x, ff)
        return ad.layer_norm(x, P["enc_ln_g"], P["enc_ln_b"])

    def _decode(self, memory, tgt, prefix, traces, bos_id):
        P = self._params
        cfg = self.config
        dec_in = np.concatenate([[bos_id], tgt[:-1]]).astype(np.intp)
        x = self._embed(dec_in)
        for i in range(cfg.n_layers):
            pre = f"dec{i}."
            h = ad.layer_norm(x, P[pre + "ln1_g"], P[pre + "ln1_b"])
            q = ad.linear(h, P[pre + "sq_w"], P[pre + "sq_b"])
            k = ad.linear(h, P[pre + "sk_w"], P[pre + "sk_b"])
            v = ad.linear(h, P[pre + "sv_w"], P[pre + "sv_b"])
            pk, pv = self._prefix_pair(prefix, "dec_self", i)
            att, w = attend_with_prefix(q, k, v, pk, pv, causal=True,
                                        n_heads=cfg.n_heads)
            if traces is not None:
                traces["dec_self"].layers.append(w)
            x = ad.add(x, ad.linear(att, P[pre + "so_w"], P[pre + "so_b"]))

            h = ad.layer_norm(x, P[pre + "ln2_g"], P[pre + "ln2_b"])
            q = ad.linear(h, P[pre + "cq_w"], P[pre + "cq_b"])
            k = ad.linear(memory, P[pre + "ck_w"], P[pre + "ck_b"])
            v = ad.linear(memory, P[pre + "cv_w"], P[pre + "cv_b"])
            pk, pv = self._prefix_pair(prefix, "dec_cross", i)
            att, w = attend_with_prefix(q, k, v, pk, pv, causal=False,
                                        n_heads=cfg.n_heads)
            if traces is not None:
                traces["dec_cross"].layers.append(w)
            x = ad.add(x, ad.linear(att, P[pre + "co_w"], P[pre + "co_b"]))

            h = ad.layer_norm(x, P[pre + "ln3_g"], P[pre + "ln3_b"])
            ff = ad.linear(ad.gelu(ad.linear(h, P[pre + "w1"], P[pre + "b1"])),
                           P[pre + "w2"], P[pre + "b2"])
            x = ad.add(x, ff)
        x = ad.layer_norm(x, P["dec_ln_g"], P["dec_ln_b"])
        return ad.linear(x, P["out_w"], P["out_b"])

    # -- decoding ----------------------------------------------------------

    def greedy_decode(self, src_tokens, prefix: PrefixActivations = None,
                      max_len: int = 16, min_len: int = 1, eos_id: int = 1,
                      bos_id: int = 0):
        """Argmax decoding; eos suppressed until min_len tokens are out."""
        if not (1 <= min_len <= max_len):
            raise ValueError(f"greedy_decode: need max_len >= min_len >= 1, "
                             f"got {max_len} < {min_len}")
        cfg = self.config
        if max_len > cfg.max_tgt_len:
            raise LengthError(f"greedy_decode: max_len {max_len} exceeds "
                              f"configured maximum {cfg.max_tgt_len}")
        src = self._check_tokens(src_tokens, cfg.max_src_len, "source")
        memory = self._encode(src, prefix, None)
        out = []
        while len(out) < max_len:
            dec_in = np.asarray(out + [eos_id], dtype=np.intp)  # len placeholder
            # _decode shifts right internally, so feed current output plus a
            # dummy final slot; logits for the next token sit at row len(out).
            logits = self._decode(memory, dec_in, prefix, None, bos_id)
            row = logits.data[len(out)].copy()
            if len(out) + 1 < min_len:
                row[eos_id] = -np.inf
            nxt = int(row.argmax())
            out.append(nxt)
            if nxt == eos_id:
                break
        return out

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        index = []
        arrays = []
        offset = 0
        for name in sorted(self._params):
            arr = self._params[name].data
            index.append({"name": name, "shape": list(arr.shape),
                          "offset": offset})
            arrays.append(arr)
            offset += arr.size * 8
        header = {"kind": "model", "config": asdict(self.config),
                  "params": index}
        write_blob(path, header, arrays)

    @classmethod
    def load(cls, path) -> "EncoderDecoder":
        header, payload = read_blob(path)
        if header.get("kind") != "model":
            raise CheckpointError(f"{path}: not a model checkpoint")
        config = ModelConfig(**header["config"])
        model = cls(config, seed=0)
        names = set(model._params)
        for entry in header["params"]:
            name = entry["name"]
            if name not in names:
                raise CheckpointError(f"{path}: unknown parameter {name!r}")
            arr = take_array(payload, entry["offset"], tuple(entry["shape"]))
            if arr.shape != model._params[name].data.shape:
                raise CompatibilityError(
                    f"{path}: parameter {name!r} shape {arr.shape} does not "
                    f"match config {model._params[name].data.shape}")
            model._params[name].data = arr
        return model
