"""Contrastive training of the dual (weight-tied) item encoder.

Both towers are the same parameter set; a batch runs the encoder over
query items, target items and uniformly sampled negatives, then scores
every query against every candidate target (and vice versa) under a
trainable temperature. The two softmax losses are symmetric: one samples
negative targets per query, the other negative queries per target.
"""

from __future__ import annotations

import numpy as np
from dataclasses import dataclass, field

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import EncoderConfig, ItemEmbeddings, encode_batch_simo, encode_batch_siso, init_params

SAMPLING_STRATEGIES = ("in_batch", "uniform", "mixed", "mixed_plus_self")

NEG_INF = -1e30


class ContractError(ValueError):
    """Inputs violate a documented precondition."""


@dataclass
class TrainConfig:
    batch_size: int = 64
    uniform_negatives: int = 64
    sampling: str = "mixed"
    epochs: int = 3
    learning_rate: float = 1e-3
    clip_norm: float = 0.5
    seed: int = 0
    beta_init: float = 10.0
    optimizer: str = "adam"
    encoder_mode: str = "simo"

    def __post_init__(self):
        if self.sampling not in SAMPLING_STRATEGIES:
            raise ContractError(f"unknown sampling strategy {self.sampling!r}")
        if self.clip_norm <= 0:
            raise ContractError("clip_norm must be positive")
        if self.batch_size < 2 and self.sampling in ("in_batch", "mixed", "mixed_plus_self"):
            raise ContractError("in-batch negatives need batch_size >= 2")
        if self.encoder_mode not in ("simo", "siso"):
            raise ContractError(f"unknown encoder_mode {self.encoder_mode!r}")


@dataclass
class Batch:
    """Token-level positive pairs plus this step's uniform negatives."""

    pairs: list[tuple[list[int], str, list[int]]]
    negatives: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.pairs:
            raise ContractError("batch must contain at least one pair")
        for _, r, _ in self.pairs:
            if r not in ("view", "buy"):
                raise ContractError(f"unknown relation {r!r}")


def select_query_embedding(emb: ItemEmbeddings, relation: str) -> np.ndarray:
    """The query-role vector the relation indicator picks."""
    return emb.by_relation(relation)


# ----------------------------------------------------------------------
# losses


def _check_unit_rows(m: Tensor, what: str, tol: float = 1e-5):
    if m.data.ndim != 2:
        raise ContractError(f"{what} must be a 2-d matrix")
    if m.data.shape[0] == 0:
        return
    norms = np.linalg.norm(m.data, axis=1)
    worst = float(np.max(np.abs(norms - 1.0)))
    if worst > tol:
        raise ContractError(f"{what} rows must be unit-norm (worst deviation {worst:.2e})")


def _as_beta(beta) -> Tensor:
    return beta if isinstance(beta, Tensor) else Tensor(float(beta))


def _empty_like(m: Tensor) -> Tensor:
    return Tensor(np.zeros((0, m.data.shape[1])))


def loss_query_to_target(Q: Tensor, T: Tensor, Tneg: Tensor | None, beta, extra_logits: Tensor | None = None) -> Tensor:
    """Mean over the batch of -log softmax(beta * Q_i . candidates)[i].

    Candidates for row i are every in-batch target plus the shared
    uniform negatives; the positive is the i-th in-batch column. An
    optional pre-scaled extra-logit block is appended to the denominator.
    """
    Tneg = Tneg if Tneg is not None else _empty_like(T)
    _check_unit_rows(Q, "Q")
    _check_unit_rows(T, "T")
    _check_unit_rows(Tneg, "negative targets")
    if Q.data.shape[0] != T.data.shape[0]:
        raise ContractError("Q and T must pair up row for row")
    beta = _as_beta(beta)
    candidates = ad.concat([T, Tneg], axis=0) if Tneg.data.shape[0] else T
    logits = ad.mul(ad.matmul(Q, ad.transpose(candidates)), beta)
    if extra_logits is not None:
        logits = ad.concat([logits, extra_logits], axis=1)
    rows = ad.softmax_cross_entropy_rows(logits, np.arange(Q.data.shape[0]))
    return ad.mean(rows)


def loss_target_to_query(Q: Tensor, T: Tensor, Qneg: Tensor | None, beta, extra_logits: Tensor | None = None) -> Tensor:
    """Mirror loss: each target scored against every query plus negatives."""
    Qneg = Qneg if Qneg is not None else _empty_like(Q)
    _check_unit_rows(Q, "Q")
    _check_unit_rows(T, "T")
    _check_unit_rows(Qneg, "negative queries")
    if Q.data.shape[0] != T.data.shape[0]:
        raise ContractError("Q and T must pair up row for row")
    beta = _as_beta(beta)
    candidates = ad.concat([Q, Qneg], axis=0) if Qneg.data.shape[0] else Q
    logits = ad.mul(ad.matmul(T, ad.transpose(candidates)), beta)
    if extra_logits is not None:
        logits = ad.concat([logits, extra_logits], axis=1)
    rows = ad.softmax_cross_entropy_rows(logits, np.arange(T.data.shape[0]))
    return ad.mean(rows)


def _row_dots(A: Tensor, B: Tensor) -> Tensor:
    return ad.sum_(ad.mul(A, B), axis=1, keepdims=True)


def _masked_column(col: Tensor, keep: np.ndarray) -> Tensor:
    """Keep col where keep==1, else a -inf stand-in that zeroes the softmax term."""
    keep = keep.reshape(-1, 1).astype(np.float64)
    return ad.add(ad.mul(col, Tensor(keep)), Tensor((1.0 - keep) * NEG_INF))


def _relation_select(view_rows: Tensor, buy_rows: Tensor, relations: list[str]) -> Tensor:
    """Per-row pick between two stacked matrices, by relation."""
    b = view_rows.data.shape[0]
    stacked = ad.concat([view_rows, buy_rows], axis=0)
    idx = np.arange(b) + b * np.array([r == "buy" for r in relations], dtype=np.int64)
    return ad.take_rows(stacked, idx)


def _encode_towers(batch: Batch, params, enc_config: EncoderConfig, mode: str, need_self: bool):
    """Run the shared encoder over queries, targets and negatives."""
    q_seqs = [p[0] for p in batch.pairs]
    t_seqs = [p[2] for p in batch.pairs]
    relations = [p[1] for p in batch.pairs]
    q_tgt = t_qbuy = None
    if mode == "simo":
        q_view, q_buy, q_tgt = encode_batch_simo(q_seqs, params, enc_config)
        _, t_qbuy, t_tgt = encode_batch_simo(t_seqs, params, enc_config)
        neg = {}
        if batch.negatives:
            n_view, n_buy, n_tgt = encode_batch_simo(batch.negatives, params, enc_config)
            neg = {"view": n_view, "buy": n_buy, "target": n_tgt}
    else:
        # separate role-prompted passes per item set
        q_view = encode_batch_siso(q_seqs, "view", params, enc_config)
        q_buy = encode_batch_siso(q_seqs, "buy", params, enc_config)
        t_tgt = encode_batch_siso(t_seqs, "target", params, enc_config)
        if need_self:
            q_tgt = encode_batch_siso(q_seqs, "target", params, enc_config)
            t_qbuy = encode_batch_siso(t_seqs, "buy", params, enc_config)
        neg = {}
        if batch.negatives:
            neg = {
                "view": encode_batch_siso(batch.negatives, "view", params, enc_config),
                "buy": encode_batch_siso(batch.negatives, "buy", params, enc_config),
                "target": encode_batch_siso(batch.negatives, "target", params, enc_config),
            }
    Q = _relation_select(q_view, q_buy, relations)
    return Q, t_tgt, q_tgt, t_qbuy, neg, relations


def total_loss(batch: Batch, params, enc_config: EncoderConfig, config: TrainConfig, beta) -> tuple[Tensor, Tensor, Tensor, dict]:
    """L = L1 + L2 under the configured negative-sampling strategy.

    Returns (L, L1, L2, info); info reports per-direction negative counts.
    """
    strategy = config.sampling
    if strategy in ("in_batch", "mixed", "mixed_plus_self") and len(batch.pairs) < 2:
        raise ContractError(f"{strategy} sampling needs at least 2 pairs per batch")
    if strategy in ("uniform", "mixed", "mixed_plus_self") and not batch.negatives:
        raise ContractError(f"{strategy} sampling needs uniform negatives")

    Q, T, q_tgt, t_qbuy, neg, relations = _encode_towers(
        batch, params, enc_config, config.encoder_mode, need_self=strategy == "mixed_plus_self"
    )
    beta = _as_beta(beta)
    b = len(batch.pairs)
    n = len(batch.negatives)
    buy_mask = np.array([r == "buy" for r in relations], dtype=np.float64)

    if strategy == "uniform":
        # positive column followed by uniform negatives only: no cross terms
        pos = ad.mul(_row_dots(Q, T), beta)
        l1_logits = ad.concat([pos, ad.mul(ad.matmul(Q, ad.transpose(neg["target"])), beta)], axis=1)
        l1 = ad.mean(ad.softmax_cross_entropy_rows(l1_logits, np.zeros(b, dtype=np.int64)))
        neg_q = _relation_select(
            ad.mul(ad.matmul(T, ad.transpose(neg["view"])), beta),
            ad.mul(ad.matmul(T, ad.transpose(neg["buy"])), beta),
            relations,
        )
        l2_logits = ad.concat([ad.mul(_row_dots(Q, T), beta), neg_q], axis=1)
        l2 = ad.mean(ad.softmax_cross_entropy_rows(l2_logits, np.zeros(b, dtype=np.int64)))
        info = {"l1_negatives": n, "l2_negatives": n}
        return ad.add(l1, l2), l1, l2, info

    t_neg = neg.get("target")
    q_neg_view = neg.get("view")
    q_neg_buy = neg.get("buy")
    extra_l1 = None
    extra_l2 = None
    if strategy == "mixed_plus_self":
        # buy pairs contribute their own opposite-role embeddings as negatives
        extra_l1 = _masked_column(ad.mul(_row_dots(Q, q_tgt), beta), buy_mask)
        extra_l2 = _masked_column(ad.mul(_row_dots(T, t_qbuy), beta), buy_mask)

    l1 = loss_query_to_target(Q, T, t_neg if strategy != "in_batch" else None, beta, extra_logits=extra_l1)
    if strategy == "in_batch":
        qneg_sel = None
    else:
        qneg_sel = _relation_rows(q_neg_view, q_neg_buy, relations, T, beta)
    l2 = _loss_t2q_with_selected_negs(Q, T, qneg_sel, beta, extra_l2)

    base = b - 1 + (n if strategy != "in_batch" else 0)
    info = {
        "l1_negatives": base,
        "l2_negatives": base,
        "self_negative_rows": int(buy_mask.sum()) if strategy == "mixed_plus_self" else 0,
    }
    return ad.add(l1, l2), l1, l2, info


def _relation_rows(neg_view: Tensor, neg_buy: Tensor, relations, T: Tensor, beta: Tensor) -> Tensor:
    """Per-row negative-query logits, picking each row's relation role."""
    lv = ad.mul(ad.matmul(T, ad.transpose(neg_view)), beta)
    lb = ad.mul(ad.matmul(T, ad.transpose(neg_buy)), beta)
    return _relation_select(lv, lb, relations)


def _loss_t2q_with_selected_negs(Q: Tensor, T: Tensor, neg_logits: Tensor | None, beta: Tensor, extra: Tensor | None) -> Tensor:
    logits = ad.mul(ad.matmul(T, ad.transpose(Q)), beta)
    if neg_logits is not None:
        logits = ad.concat([logits, neg_logits], axis=1)
    if extra is not None:
        logits = ad.concat([logits, extra], axis=1)
    rows = ad.softmax_cross_entropy_rows(logits, np.arange(T.data.shape[0]))
    return ad.mean(rows)


# ----------------------------------------------------------------------
# optimizer and training loop


class Adam:
    """Standard Adam with bias correction; state keyed by parameter name."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor]):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in params.items():
            if p.grad is None:
                continue
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * (p.grad * p.grad)
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p.assign_(p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))


def global_grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global norm is at most max_norm.

    Returns the pre-clip norm.
    """
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


@dataclass
class TraceRow:
    step: int
    loss: float
    loss_q2t: float
    loss_t2q: float
    beta: float
    grad_norm: float


def train(pairs, negative_pool, enc_config: EncoderConfig, config: TrainConfig, params=None):
    """Run the training loop over pre-tokenized pairs.

    `pairs` is a list of (query_tokens, relation, target_tokens); the
    negative pool is a list of token sequences sampled uniformly per step.
    Returns (params, trace) where params includes the trained log-beta.
    """
    if not pairs:
        raise ContractError("no training pairs")
    needs_negatives = config.sampling in ("uniform", "mixed", "mixed_plus_self")
    if needs_negatives and not negative_pool:
        raise ContractError(f"{config.sampling} sampling needs a negative pool")

    if params is None:
        params = init_params(enc_config, config.seed)
    params = dict(params)
    params["log_beta"] = Tensor(np.log(config.beta_init), requires_grad=True, name="log_beta")

    opt = Adam(lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    trace: list[TraceRow] = []
    min_batch = 2 if config.sampling != "uniform" else 1
    step = 0

    for _ in range(config.epochs):
        order = rng.permutation(len(pairs))
        for lo in range(0, len(order), config.batch_size):
            chosen = order[lo:lo + config.batch_size]
            if len(chosen) < min_batch:
                continue
            negatives = []
            if needs_negatives:
                k = config.uniform_negatives
                idx = rng.choice(len(negative_pool), size=k, replace=k > len(negative_pool))
                negatives = [negative_pool[i] for i in idx]
            batch = Batch(pairs=[pairs[i] for i in chosen], negatives=negatives)

            beta = ad.exp(params["log_beta"])
            loss, l1, l2, _ = total_loss(batch, params, enc_config, config, beta)
            if not np.isfinite(loss.item()):
                raise RuntimeError(
                    f"non-finite loss at step {step}: L={loss.item()} "
                    f"(L1={l1.item()}, L2={l2.item()}, beta={beta.item()})"
                )
            for p in params.values():
                p.zero_grad()
            ad.backward(loss)
            grad_norm = clip_global_norm(params, config.clip_norm)
            beta_used = beta.item()
            opt.step(params)
            step += 1
            trace.append(TraceRow(step, loss.item(), l1.item(), l2.item(), beta_used, grad_norm))

    return params, trace


def write_trace(path, trace: list[TraceRow], meta: dict | None = None) -> None:
    lines = []
    for key, val in (meta or {}).items():
        lines.append(f"# {key}={val}")
    lines.append("step,loss,loss_q2t,loss_t2q,beta,grad_norm")
    for row in trace:
        lines.append(f"{row.step},{row.loss:.10g},{row.loss_q2t:.10g},{row.loss_t2q:.10g},{row.beta:.10g},{row.grad_norm:.10g}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_trace(path) -> list[TraceRow]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("step,"):
                continue
            s, l, l1, l2, b, g = line.split(",")
            rows.append(TraceRow(int(s), float(l), float(l1), float(l2), float(b), float(g)))
    return rows
