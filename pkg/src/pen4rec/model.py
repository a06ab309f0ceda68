"""The preference evolution network and its ablation variants.

All functions work on padded mini-batches. Sequences are right-aligned: the
last click of every example sits at position ``L - 1`` and the left padding
re-uses node 0, which is always the session's first item. Padding positions
carry ``mask == 0`` and are neutralised where they could leak: recurrent
updates hold state through them and position softmaxes give them exactly zero
weight. The first-stage window is the last ``k`` positions, so a session
shorter than ``k`` sees its first item repeated on the left.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import TrainingExample
from .graph import SessionGraph, build_graph
from .numerics import ModelParams, Tensor
from .numerics import tensor as ops

VARIANTS = ("full", "gnn_last", "agnn_last", "non", "att", "gru", "att_gru")
FIRST_STAGE_RANGES = ("last_k", "full_session")
PROB_CLAMP = 1e-12


class ContractViolation(ValueError):
    pass


@dataclass(frozen=True)
class VariantConfig:
    variant: str = "full"
    k: int = 3
    d: int = 100
    ggnn_layers: int = 1
    dropout: float = 0.5
    first_stage_range: str = "last_k"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.d < 1:
            raise ValueError(f"d must be >= 1, got {self.d}")
        if self.ggnn_layers < 0:
            raise ValueError("ggnn_layers must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.first_stage_range not in FIRST_STAGE_RANGES:
            raise ValueError(f"first_stage_range must be one of {FIRST_STAGE_RANGES}")

    @property
    def two_stage(self) -> bool:
        return self.variant not in ("gnn_last", "agnn_last")

    @property
    def hop_attention(self) -> bool:
        return self.variant != "gnn_last"

    @property
    def hop_count(self) -> int:
        return max(1, self.k - 1) if self.hop_attention else 1


def param_shapes(n_items: int, config: VariantConfig) -> dict[str, tuple[int, ...]]:
    d, k = config.d, config.k
    shapes: dict[str, tuple[int, ...]] = {"E": (n_items, d)}
    shapes |= {
        "ggnn.W_a_out": (d, d),
        "ggnn.b_a_out": (d,),
        "ggnn.W_a_in": (d, d),
        "ggnn.b_a_in": (d,),
        "ggnn.W_alpha": (d, d),
        "ggnn.W_z": (d, 2 * d),
        "ggnn.W_r": (d, 2 * d),
        "ggnn.W_o": (d, 2 * d),
        "ggnn.U_z": (d, d),
        "ggnn.U_r": (d, d),
        "ggnn.U_o": (d, d),
        "first.W_1": (d, k * d),
        "first.W_2": (d, d),
        "first.b": (d,),
        "first.W_q": (d, (k + 1) * d),
        "first.b_q": (d,),
    }
    for gru in ("reader_fwd", "reader_bwd", "fusion"):
        shapes |= {f"{gru}.W": (3 * d, d), f"{gru}.U": (3 * d, d), f"{gru}.b": (3 * d,)}
    shapes |= {
        "reader.W_m": (d, 2 * d),
        "reader.b_m": (d,),
        "refine.W_s": (d, 2 * d),
        "refine.b_s": (d,),
    }
    return shapes


def init_params(n_items: int, config: VariantConfig, seed: int | np.random.Generator = 0, std: float = 0.1) -> ModelParams:
    """Every entry ~ Normal(0, std), drawn in the fixed name order of ``param_shapes``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return ModelParams({name: rng.normal(0.0, std, size=shape) for name, shape in param_shapes(n_items, config).items()})


def is_weight_matrix(name: str) -> bool:
    return name != "E" and not name.split(".")[-1].startswith("b")


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    node_items: np.ndarray  # (B, N) item index per graph node, 0 on padding nodes
    alias: np.ndarray  # (B, L) node of each right-aligned position
    mask: np.ndarray  # (B, L) 1.0 on real positions
    hops_out: np.ndarray  # (B, C, N, N)
    hops_in: np.ndarray
    lengths: np.ndarray
    targets: np.ndarray | None = None
    touched: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def size(self) -> int:
        return self.alias.shape[0]


def collate(
    sequences: Sequence[Sequence[int]],
    config: VariantConfig,
    targets: Sequence[int] | None = None,
    n_items: int | None = None,
    graphs: Sequence[SessionGraph] | None = None,
) -> Batch:
    if not sequences:
        raise ContractViolation("empty batch")
    C = config.hop_count
    if graphs is None:
        graphs = [build_graph(s, C) for s in sequences]
    for s in sequences:
        if len(s) == 0:
            raise ContractViolation("empty session input")
        if n_items is not None and (min(s) < 0 or max(s) >= n_items):
            bad = [v for v in s if not 0 <= v < n_items]
            raise ContractViolation(f"item index {bad[0]} outside vocabulary of size {n_items}")
    B = len(sequences)
    N = max(g.n_nodes for g in graphs)
    L = max(max(len(s) for s in sequences), config.k)
    node_items = np.zeros((B, N), dtype=np.int64)
    alias = np.zeros((B, L), dtype=np.int64)
    mask = np.zeros((B, L))
    hops_out = np.zeros((B, C, N, N))
    hops_in = np.zeros((B, C, N, N))
    for b, (s, g) in enumerate(zip(sequences, graphs)):
        n, nn = len(s), g.n_nodes
        node_items[b, :nn] = g.nodes
        alias[b, L - n :] = g.alias
        mask[b, L - n :] = 1.0
        for c in range(C):
            hops_out[b, c, :nn, :nn] = g.hop_powers_out[c]
            hops_in[b, c, :nn, :nn] = g.hop_powers_in[c]
    touched = {v for s in sequences for v in s}
    t_arr = None
    if targets is not None:
        t_arr = np.asarray(targets, dtype=np.int64)
        if n_items is not None and ((t_arr < 0) | (t_arr >= n_items)).any():
            raise ContractViolation("target outside vocabulary")
        touched |= set(t_arr.tolist())
    return Batch(
        node_items,
        alias,
        mask,
        hops_out,
        hops_in,
        np.array([len(s) for s in sequences]),
        t_arr,
        np.array(sorted(touched), dtype=np.int64),
    )


def collate_examples(examples: Sequence[TrainingExample], config: VariantConfig, n_items=None, graphs=None) -> Batch:
    return collate([e.input for e in examples], config, [e.target for e in examples], n_items, graphs)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def embed_layer(batch: Batch, node_vecs: Tensor, params: ModelParams, attention: bool = True):
    """One gated graph update with attention over hop distances.

    For each hop ``c`` and direction, neighbours are averaged through the
    c-th adjacency power and passed through a per-direction affine map. Hop
    scores are ``<W_alpha (a_out + a_in), v_prev>``, softmaxed over hops per
    node. The blended 2d message drives a GRU-style update of every node.
    Returns ``(new_node_vecs, alpha)``; ``alpha`` is None without attention.
    """
    P = params
    C = batch.hops_out.shape[1] if attention else 1
    outs, ins = [], []
    for c in range(C):
        outs.append(ops.linear(ops.matmul(batch.hops_out[:, c], node_vecs), P["ggnn.W_a_out"], P["ggnn.b_a_out"]))
        ins.append(ops.linear(ops.matmul(batch.hops_in[:, c], node_vecs), P["ggnn.W_a_in"], P["ggnn.b_a_in"]))
    alpha = None
    if attention:
        scores = [
            ops.sum(ops.mul(ops.linear(ops.add(o, i), P["ggnn.W_alpha"]), node_vecs), axis=-1)
            for o, i in zip(outs, ins)
        ]
        alpha = ops.softmax(ops.stack(scores, axis=1), axis=1)  # (B, C, N)
        w = ops.reshape(alpha, alpha.shape + (1,))
        a_out = ops.sum(ops.mul(w, ops.stack(outs, axis=1)), axis=1)
        a_in = ops.sum(ops.mul(w, ops.stack(ins, axis=1)), axis=1)
    else:
        a_out, a_in = outs[0], ins[0]
    a = ops.concat([a_out, a_in], axis=-1)
    z = ops.sigmoid(ops.add(ops.linear(a, P["ggnn.W_z"]), ops.linear(node_vecs, P["ggnn.U_z"])))
    r = ops.sigmoid(ops.add(ops.linear(a, P["ggnn.W_r"]), ops.linear(node_vecs, P["ggnn.U_r"])))
    cand = ops.tanh(ops.add(ops.linear(a, P["ggnn.W_o"]), ops.linear(ops.mul(r, node_vecs), P["ggnn.U_o"])))
    new = ops.add(ops.mul(ops.sub(1.0, z), node_vecs), ops.mul(z, cand))
    return new, alpha


def first_stage(seq: Tensor, mask: np.ndarray, k: int, params: ModelParams, attention_range: str = "last_k"):
    """Local query from the last ``k`` positions and its attention summary.

    Returns ``(p0, q0, q1, beta)``. Each position's gate is the sigmoid of
    ``W_1 q0 + W_2 v_i + b`` averaged over its d entries.
    """
    P = params
    B, L, d = seq.shape
    window = ops.getitem(seq, (slice(None), slice(L - k, L)))
    q0 = ops.reshape(window, (B, k * d))
    if attention_range == "last_k":
        vs, vmask = window, None
    else:
        vs, vmask = seq, mask
    qpart = ops.reshape(ops.linear(q0, P["first.W_1"]), (B, 1, d))
    gate = ops.sigmoid(ops.add(ops.add(qpart, ops.linear(vs, P["first.W_2"])), P["first.b"]))
    beta = ops.mean(gate, axis=-1)
    if vmask is not None:
        beta = ops.mul(beta, vmask)
    p0 = ops.sum(ops.mul(ops.reshape(beta, beta.shape + (1,)), vs), axis=1)
    q1 = ops.linear(ops.concat([p0, q0], axis=-1), P["first.W_q"], P["first.b_q"])
    return p0, q0, q1, beta


def _gru(x: Tensor, gate, params: ModelParams, prefix: str, reverse: bool = False) -> Tensor:
    xproj = ops.linear(x, params[f"{prefix}.W"], params[f"{prefix}.b"])
    return ops.gru_sequence(xproj, params[f"{prefix}.U"], gate, reverse=reverse)


def session_reader(seq: Tensor, mask: np.ndarray, params: ModelParams) -> Tensor:
    """Bidirectional GRU context with a residual: ``tanh(W_m [fwd; bwd] + b_m) + v``."""
    fwd = _gru(seq, mask, params, "reader_fwd")
    bwd = _gru(seq, mask, params, "reader_bwd", reverse=True)
    mixed = ops.linear(ops.concat([fwd, bwd], axis=-1), params["reader.W_m"], params["reader.b_m"])
    return ops.add(ops.tanh(mixed), seq)


def position_attention(keys: Tensor, query: Tensor, mask: np.ndarray) -> Tensor:
    B, L, d = keys.shape
    scores = ops.sum(ops.mul(keys, ops.reshape(query, (B, 1, d))), axis=-1)
    return ops.softmax(scores, axis=-1, mask=mask)


def preference_fusion(m: Tensor, q1: Tensor, mask: np.ndarray, params: ModelParams, gamma=None):
    """Attention-gated GRU over the reader outputs.

    ``h_i = gamma_i * GRU(m_i, h_{i-1}) + (1 - gamma_i) * h_{i-1}`` with
    ``gamma`` the masked softmax of ``<q1, m_i>``. Pass ``gamma`` to override
    the attention weights. Returns ``(p1, gamma, states)``.
    """
    if gamma is None:
        gamma = position_attention(m, q1, mask)
    H = _gru(m, gamma, params, "fusion")
    p1 = ops.getitem(H, (slice(None), -1))
    return p1, gamma, H


def refine_query(p1: Tensor, q1: Tensor, params: ModelParams) -> Tensor:
    return ops.linear(ops.concat([p1, q1], axis=-1), params["refine.W_s"], params["refine.b_s"])


def score_items(s: Tensor, E: Tensor) -> tuple[Tensor, Tensor]:
    """``(logits, probabilities)`` with logits ``<s, E_i>`` over the whole vocabulary."""
    logits = ops.linear(s, E)
    return logits, ops.softmax(logits, axis=-1)


def hybrid_loss(probs: Tensor, targets: np.ndarray, reduce: bool = True) -> Tensor:
    """Per-class binary cross-entropy summed over the vocabulary, mean over the batch."""
    probs = ops.as_tensor(probs)
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    y = np.zeros(probs.shape)
    y.reshape(-1, probs.shape[-1])[np.arange(targets.size), targets] = 1.0
    p = ops.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    terms = ops.add(ops.mul(y, ops.log(p)), ops.mul(1.0 - y, ops.log(ops.sub(1.0, p))))
    per_example = ops.mul(ops.sum(terms, axis=-1), -1.0)
    return ops.mean(per_example) if reduce else per_example


def l2_penalty(params: ModelParams, touched_items: np.ndarray | None) -> Tensor:
    """Sum of squares over weight matrices plus the embedding rows in ``touched_items``."""
    total = None
    for p in params:
        if p.name == "E":
            if touched_items is None or touched_items.size == 0:
                continue
            t = ops.take_rows(p, touched_items)
        elif is_weight_matrix(p.name):
            t = p
        else:
            continue
        sq = ops.sum(ops.mul(t, t))
        total = sq if total is None else ops.add(total, sq)
    return total if total is not None else Tensor(0.0)


# ---------------------------------------------------------------------------
# full forward pass
# ---------------------------------------------------------------------------


@dataclass
class ForwardTrace:
    node_layers: list[Tensor] = field(default_factory=list)
    alpha: list[Tensor | None] = field(default_factory=list)
    seq: Tensor | None = None
    q0: Tensor | None = None
    beta: Tensor | None = None
    p0: Tensor | None = None
    q1: Tensor | None = None
    m: Tensor | None = None
    gamma: Tensor | None = None
    h: Tensor | None = None
    p1: Tensor | None = None
    s: Tensor | None = None
    logits: Tensor | None = None
    probs: Tensor | None = None


def forward_batch(
    batch: Batch,
    params: ModelParams,
    config: VariantConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, ForwardTrace]:
    """Probabilities over the vocabulary for every example in ``batch``.

    Dropout is active only when ``train`` is set and an ``rng`` is given.
    """
    P = params
    tr = ForwardTrace()
    drop_rng = rng if train else None
    nodes = ops.take_rows(P["E"], batch.node_items)
    tr.node_layers.append(nodes)
    for _ in range(config.ggnn_layers):
        nodes, alpha = embed_layer(batch, nodes, P, attention=config.hop_attention)
        tr.node_layers.append(nodes)
        tr.alpha.append(alpha)
    seq = ops.gather_batch(nodes, batch.alias)
    tr.seq = seq
    seq = ops.dropout(seq, config.dropout, drop_rng)
    mask = batch.mask
    v = config.variant

    if not config.two_stage:
        s = ops.getitem(seq, (slice(None), -1))
    else:
        tr.p0, tr.q0, tr.q1, tr.beta = first_stage(seq, mask, config.k, P, config.first_stage_range)
        q1 = tr.q1
        if v == "non":
            s = q1
        elif v == "full":
            tr.m = session_reader(seq, mask, P)
            tr.p1, tr.gamma, tr.h = preference_fusion(tr.m, q1, mask, P)
            s = refine_query(tr.p1, q1, P)
        elif v == "att":
            tr.gamma = position_attention(seq, q1, mask)
            g = ops.reshape(tr.gamma, tr.gamma.shape + (1,))
            tr.p1 = ops.sum(ops.mul(g, seq), axis=1)
            s = refine_query(tr.p1, q1, P)
        else:
            inputs = seq
            if v == "att_gru":
                tr.gamma = position_attention(seq, q1, mask)
                inputs = ops.mul(ops.reshape(tr.gamma, tr.gamma.shape + (1,)), seq)
            tr.h = _gru(inputs, mask, P, "fusion")
            tr.p1 = ops.getitem(tr.h, (slice(None), -1))
            s = refine_query(tr.p1, q1, P)
    tr.s = s
    s = ops.dropout(s, config.dropout, drop_rng)
    tr.logits, tr.probs = score_items(s, P["E"])
    return tr.probs, tr


def forward(
    example: TrainingExample | Sequence[int],
    params: ModelParams,
    config: VariantConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, ForwardTrace]:
    """Single-example forward; returns a probability vector of length |V|."""
    seqs = example.input if isinstance(example, TrainingExample) else tuple(example)
    batch = collate([seqs], config, n_items=params["E"].shape[0])
    probs, trace = forward_batch(batch, params, config, train=(mode == "train"), rng=rng)
    return ops.getitem(probs, 0), trace


def batch_loss(
    batch: Batch,
    params: ModelParams,
    config: VariantConfig,
    l2: float = 0.0,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Mean hybrid loss of the batch plus ``l2`` times the weight penalty. Returns ``(loss, probs)``."""
    probs, _ = forward_batch(batch, params, config, train=train, rng=rng)
    loss = hybrid_loss(probs, batch.targets)
    if l2 > 0.0:
        loss = ops.add(loss, ops.mul(l2_penalty(params, batch.touched), l2))
    return loss, probs


def predict_proba(
    sequences: Sequence[Sequence[int]], params: ModelParams, config: VariantConfig, batch_size: int = 256
) -> np.ndarray:
    """Eval-mode probabilities, one row per input sequence."""
    rows = []
    with ops.no_grad():
        for i in range(0, len(sequences), batch_size):
            chunk = sequences[i : i + batch_size]
            batch = collate(chunk, config, n_items=params["E"].shape[0])
            probs, _ = forward_batch(batch, params, config)
            rows.append(probs.data)
    return np.concatenate(rows, axis=0) if rows else np.zeros((0, params["E"].shape[0]))
