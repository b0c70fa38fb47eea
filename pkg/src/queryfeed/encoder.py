"""Transformer encoder emitting three role embeddings per item.

One forward pass over ``[Q_V] [Q_B] [TGT] <metadata tokens>`` yields the
view-query, buy-query and target vectors from the first three final-layer
states (multi-output mode). Single-output mode prepends just one role
token and reads position 0; it exists as the three-pass baseline.

Blocks are pre-norm with a tanh-approximated GELU feedforward, learned
absolute positions, and a shared linear projection before L2
normalization.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .instrumentation import counters
from .tokenizer import QV_ID, QB_ID, TGT_ID, PAD_ID

ROLE_TOKEN = {"view": QV_ID, "buy": QB_ID, "target": TGT_ID}

CHECKPOINT_MAGIC = b"PFW1"

_GELU_C = float(np.sqrt(2.0 / np.pi))


class EncoderError(ValueError):
    pass


@dataclass
class EncoderConfig:
    vocab_size: int
    hidden_dim: int = 128
    layers: int = 4
    heads: int = 8
    ffn_dim: int = 0
    max_seq: int = 67
    dropout: float = 0.0

    def __post_init__(self):
        if self.ffn_dim == 0:
            self.ffn_dim = 4 * self.hidden_dim
        if self.hidden_dim % self.heads != 0:
            raise EncoderError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise EncoderError("dropout must be in [0, 1)")


@dataclass
class ItemEmbeddings:
    item_id: str
    q_view: np.ndarray
    q_buy: np.ndarray
    target: np.ndarray

    def by_relation(self, relation: str) -> np.ndarray:
        if relation == "view":
            return self.q_view
        if relation == "buy":
            return self.q_buy
        raise EncoderError(f"unknown relation {relation!r}")


# ----------------------------------------------------------------------
# parameters


def init_params(config: EncoderConfig, seed: int) -> dict[str, Tensor]:
    """Deterministic init: N(0, 0.02) embeddings, Xavier-uniform linears."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def emb(name, *shape):
        params[name] = Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True, name=name)

    def linear(name, fan_in, fan_out):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[name + ".w"] = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True, name=name + ".w")
        params[name + ".b"] = Tensor(np.zeros(fan_out), requires_grad=True, name=name + ".b")

    def layer_norm(name, dim):
        params[name + ".g"] = Tensor(np.ones(dim), requires_grad=True, name=name + ".g")
        params[name + ".b"] = Tensor(np.zeros(dim), requires_grad=True, name=name + ".b")

    d, f = config.hidden_dim, config.ffn_dim
    emb("tok_emb", config.vocab_size, d)
    emb("pos_emb", config.max_seq, d)
    for i in range(config.layers):
        p = f"layer{i}."
        layer_norm(p + "ln1", d)
        linear(p + "wq", d, d)
        linear(p + "wk", d, d)
        linear(p + "wv", d, d)
        linear(p + "wo", d, d)
        layer_norm(p + "ln2", d)
        linear(p + "ffn1", d, f)
        linear(p + "ffn2", f, d)
    layer_norm("lnf", d)
    linear("proj", d, d)
    return params


def parameter_count(config: EncoderConfig) -> int:
    d, f = config.hidden_dim, config.ffn_dim
    per_layer = 2 * 2 * d + 4 * (d * d + d) + (d * f + f) + (f * d + d)
    return (
        config.vocab_size * d
        + config.max_seq * d
        + config.layers * per_layer
        + 2 * d
        + d * d
        + d
    )


# ----------------------------------------------------------------------
# forward


def _bcast_vec(v: Tensor, lead_shape: tuple[int, ...]) -> Tensor:
    """Explicitly expand a (D,) vector to lead_shape + (D,)."""
    out = ad.reshape(v, (1,) * len(lead_shape) + v.shape)
    for axis, n in enumerate(lead_shape):
        out = ad.expand(out, axis, n)
    return out


def _layer_norm(x: Tensor, g: Tensor, b: Tensor, eps: float = 1e-5) -> Tensor:
    lead = x.shape[:-1]
    d = x.shape[-1]
    mu = ad.expand(ad.mean(x, axis=-1, keepdims=True), -1, d)
    xc = ad.sub(x, mu)
    var = ad.mean(ad.mul(xc, xc), axis=-1, keepdims=True)
    std = ad.expand(ad.sqrt(ad.add(var, eps)), -1, d)
    return ad.add(ad.mul(ad.div(xc, std), _bcast_vec(g, lead)), _bcast_vec(b, lead))


def _gelu(x: Tensor) -> Tensor:
    x3 = ad.mul(ad.mul(x, x), x)
    inner = ad.scale(ad.add(x, ad.scale(x3, 0.044715)), _GELU_C)
    return ad.mul(ad.scale(x, 0.5), ad.add(ad.tanh(inner), 1.0))


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b for x of shape (..., fan_in); flattens to 2-d for the matmul."""
    lead = x.shape[:-1]
    flat = ad.reshape(x, (-1, x.shape[-1]))
    out = ad.add(ad.matmul(flat, w), _bcast_vec(b, (flat.shape[0],)))
    return ad.reshape(out, lead + (w.shape[1],))


def _attention(x: Tensor, params, prefix: str, config: EncoderConfig, mask: np.ndarray | None) -> Tensor:
    bsz, seq, d = x.shape
    h = config.heads
    dh = d // h

    def heads_of(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (bsz, seq, h, dh)), (0, 2, 1, 3))

    q = heads_of(_affine(x, params[prefix + "wq.w"], params[prefix + "wq.b"]))
    k = heads_of(_affine(x, params[prefix + "wk.w"], params[prefix + "wk.b"]))
    v = heads_of(_affine(x, params[prefix + "wv.w"], params[prefix + "wv.b"]))

    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    if mask is not None:
        scores = ad.add(scores, Tensor(np.broadcast_to(mask[:, None, None, :], scores.shape).copy()))
    attn = ad.softmax(scores, axis=-1)
    ctx = ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3))
    ctx = ad.reshape(ctx, (bsz, seq, d))
    return _affine(ctx, params[prefix + "wo.w"], params[prefix + "wo.b"])


def _l2_normalize_rows(x: Tensor) -> Tensor:
    n2 = ad.sum_(ad.mul(x, x), axis=-1, keepdims=True)
    norm = ad.expand(ad.sqrt(ad.add(n2, 1e-12)), -1, x.shape[-1])
    return ad.div(x, norm)


def _pad_batch(sequences: list[list[int]]) -> tuple[np.ndarray, np.ndarray | None]:
    seq_len = max(len(s) for s in sequences)
    ids = np.full((len(sequences), seq_len), PAD_ID, dtype=np.int64)
    any_pad = False
    for i, s in enumerate(sequences):
        ids[i, : len(s)] = s
        if len(s) < seq_len:
            any_pad = True
    mask = None
    if any_pad:
        mask = np.where(ids == PAD_ID, -1e9, 0.0)
    return ids, mask


def _run_transformer(sequences: list[list[int]], params, config: EncoderConfig) -> Tensor:
    """Shared trunk: returns final-layer states of shape (B, S, D)."""
    counters.encoder_calls += len(sequences)
    ids, mask = _pad_batch(sequences)
    bsz, seq = ids.shape
    if seq > config.max_seq:
        raise EncoderError(f"sequence length {seq} exceeds max_seq {config.max_seq}")

    tok = params["tok_emb"]
    if int(ids.max(initial=0)) >= tok.shape[0]:
        raise EncoderError(f"token id {int(ids.max())} >= vocab_size {tok.shape[0]}")

    x = ad.take_rows(tok, ids)
    pos = ad.expand(ad.reshape(params["pos_emb"][:seq], (1, seq, config.hidden_dim)), 0, bsz)
    x = ad.add(x, pos)

    for i in range(config.layers):
        p = f"layer{i}."
        h = _layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        x = ad.add(x, _attention(h, params, p, config, mask))
        h = _layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        h = _affine(h, params[p + "ffn1.w"], params[p + "ffn1.b"])
        h = _gelu(h)
        h = _affine(h, params[p + "ffn2.w"], params[p + "ffn2.b"])
        x = ad.add(x, h)
    return _layer_norm(x, params["lnf.g"], params["lnf.b"])


def _project_normalize(states: Tensor, params) -> Tensor:
    return _l2_normalize_rows(_affine(states, params["proj.w"], params["proj.b"]))


def encode_batch_simo(sequences: list[list[int]], params, config: EncoderConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Encode token sequences; returns (Qv, Qb, T) matrices of shape (B, D).

    Metadata beyond max_seq - 3 tokens is truncated, not rejected.
    """
    budget = config.max_seq - 3
    full = [[QV_ID, QB_ID, TGT_ID] + list(s[:budget]) for s in sequences]
    states = _run_transformer(full, params, config)
    q_view = _project_normalize(states[:, 0, :], params)
    q_buy = _project_normalize(states[:, 1, :], params)
    target = _project_normalize(states[:, 2, :], params)
    return q_view, q_buy, target


def encode_batch_siso(sequences: list[list[int]], role: str, params, config: EncoderConfig) -> Tensor:
    """One role-prompted pass per sequence; returns the (B, D) embedding matrix."""
    if role not in ROLE_TOKEN:
        raise EncoderError(f"unknown role {role!r}")
    budget = config.max_seq - 1
    full = [[ROLE_TOKEN[role]] + list(s[:budget]) for s in sequences]
    states = _run_transformer(full, params, config)
    return _project_normalize(states[:, 0, :], params)


def _inference_params(params) -> dict[str, Tensor]:
    return {k: Tensor(v.data) for k, v in params.items()}


def forward_simo(token_ids, params, config: EncoderConfig, item_id: str = "") -> ItemEmbeddings:
    """Single-item multi-output forward without graph construction."""
    qv, qb, t = encode_batch_simo([list(token_ids)], _inference_params(params), config)
    return ItemEmbeddings(item_id=item_id, q_view=qv.data[0], q_buy=qb.data[0], target=t.data[0])


def forward_siso(token_ids, role: str, params, config: EncoderConfig) -> np.ndarray:
    """Single-item single-output forward without graph construction."""
    out = encode_batch_siso([list(token_ids)], role, _inference_params(params), config)
    return out.data[0]


def attention_flops(config: EncoderConfig, metadata_len: int, mode: str) -> int:
    """Attention-only FLOP count for one item's embeddings under each mode."""
    def per_pass(seq: int) -> int:
        # QK^T and AV: two S x S x head_dim products per head per layer
        return config.layers * config.heads * 4 * seq * seq * (config.hidden_dim // config.heads)

    if mode == "simo":
        return per_pass(metadata_len + 3)
    if mode == "siso":
        return 3 * per_pass(metadata_len + 1)
    raise EncoderError(f"unknown mode {mode!r}")


# ----------------------------------------------------------------------
# checkpoint io


def save_checkpoint(path, params, config: EncoderConfig, extra: dict | None = None) -> None:
    """Binary checkpoint: magic, JSON config block, named float32 blobs."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    header = {"config": asdict(config)}
    if extra:
        header.update(extra)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    names = sorted(params)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = params[name].data.astype("<f4")
        enc = name.encode("utf-8")
        buf.write(struct.pack("<H", len(enc)))
        buf.write(enc)
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, Tensor], EncoderConfig, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise EncoderError(f"bad checkpoint magic {raw[:4]!r}")
    off = 4
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    header = json.loads(raw[off:off + hlen].decode("utf-8"))
    off += hlen
    config = EncoderConfig(**header.pop("config"))
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        params[name] = Tensor(arr.astype(np.float64), requires_grad=True, name=name)
    return params, config, header
