"""Virtual mixture-of-experts over slices of one shared feed-forward block.

Experts are views into the shared hidden dimension, not separate weights:
expert k reads columns [floor(k*S), floor(k*S) + d_expert) of the gate/up
projections and the matching rows of the down projection, where the stride
S spreads the views uniformly across the hidden dimension. When
d_expert <= S the views are pairwise disjoint, so experts cannot interfere
through shared coordinates. Routing is top-K over a learned gate with the
selected probabilities renormalized to sum to one per token.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from dualffn.tensor import (
    ContractError,
    Tensor,
    add,
    div,
    gather_last,
    index_add_rows,
    matmul,
    mul,
    reshape,
    rms_norm,
    silu,
    slice_axis,
    softmax,
    take_rows,
    tsum,
)
from dualffn.nn import NORM_EPS, FfnWeights


class ConfigError(ValueError):
    """A structural hyperparameter combination is invalid."""


@dataclass(frozen=True)
class ExpertView:
    """Contiguous index range of the shared hidden dimension owned by one expert."""

    expert_index: int
    start: int
    length: int

    @property
    def stop(self) -> int:
        return self.start + self.length

    @property
    def index_set(self) -> range:
        return range(self.start, self.stop)


@dataclass
class RouterWeights:
    w_g: Tensor  # (d, N)

    @property
    def n_experts(self) -> int:
        return self.w_g.shape[1]


@dataclass
class RoutingOutcome:
    """Routing decision plus the statistics the balancing loss needs.

    `mean_probs` stays on the tape (the balancing loss differentiates
    through it); counts and fractions are plain arrays.
    """

    probs: Tensor  # (B, T, N) full softmax over experts
    indices: np.ndarray  # (B, T, K) selected experts, ascending gate rank
    weights: Tensor  # (B, T, K) renormalized, sums to 1 per token
    assign_fractions: np.ndarray  # (N,) share of assignments per expert
    mean_probs: Tensor  # (N,) mean gate probability per expert
    n_tokens: int


def compute_stride(d_hidden: int, d_expert: int, n_experts: int) -> int:
    """Offset between consecutive expert views."""
    if not 1 <= d_expert < d_hidden:
        raise ConfigError(
            f"d_expert must satisfy 1 <= d_expert < d_hidden, got "
            f"d_expert={d_expert}, d_hidden={d_hidden}"
        )
    if n_experts < 1:
        raise ConfigError(f"n_experts must be >= 1, got {n_experts}")
    if n_experts == 1:
        return 0
    return (d_hidden - d_expert) // (n_experts - 1)


def build_expert_views(d_hidden: int, d_expert: int, n_experts: int) -> list[ExpertView]:
    stride = compute_stride(d_hidden, d_expert, n_experts)
    views = []
    for k in range(n_experts):
        start = int(np.floor(k * stride))
        if start + d_expert > d_hidden:
            raise AssertionError(
                f"expert view {k} out of bounds: [{start}, {start + d_expert}) "
                f"exceeds d_hidden={d_hidden}"
            )
        views.append(ExpertView(k, start, d_expert))
    return views


def views_disjoint(views: list[ExpertView]) -> bool:
    seen: set[int] = set()
    for v in views:
        span = set(v.index_set)
        if seen & span:
            return False
        seen |= span
    return True


def expert_forward(h: Tensor, w: FfnWeights, view: ExpertView) -> Tensor:
    """The shared FFN restricted to one expert's slice, residual included.

    Computes on strided views of the shared matrices; the result is
    bit-identical to running the full FFN on materialized weight copies.
    """
    if view.stop > w.d_hidden:
        raise ContractError(
            f"view [{view.start}, {view.stop}) exceeds d_hidden={w.d_hidden}"
        )
    n = rms_norm(h, w.norm_gain, NORM_EPS)
    gate = matmul(n, slice_axis(w.w_gate, 1, view.start, view.stop))
    up = matmul(n, slice_axis(w.w_up, 1, view.start, view.stop))
    z = mul(silu(gate), up)
    return add(h, matmul(z, slice_axis(w.w_down, 0, view.start, view.stop)))


def expert_branch(h: Tensor, w: FfnWeights, view: ExpertView) -> Tensor:
    """Expert transform without the residual (for an always-on shared expert)."""
    n = rms_norm(h, w.norm_gain, NORM_EPS)
    gate = matmul(n, slice_axis(w.w_gate, 1, view.start, view.stop))
    up = matmul(n, slice_axis(w.w_up, 1, view.start, view.stop))
    return matmul(mul(silu(gate), up), slice_axis(w.w_down, 0, view.start, view.stop))


def route_topk(
    h: Tensor,
    router: RouterWeights,
    top_k: int,
    active: Optional[np.ndarray] = None,
) -> RoutingOutcome:
    """Softmax over all experts, keep the top K, renormalize their weights.

    Ties pick the lower expert index. `active` restricts the assignment
    statistics (and later dispatch) to a boolean token subset.
    """
    n_experts = router.n_experts
    if not 1 <= top_k <= n_experts:
        raise ContractError(f"top_k={top_k} outside [1, {n_experts}]")
    logits = matmul(h, router.w_g)
    probs = softmax(logits, axis=-1)

    # Stable sort on negated values keeps the lowest index among ties first.
    order = np.argsort(-probs.data, axis=-1, kind="stable")
    indices = np.sort(order[..., :top_k], axis=-1)

    selected = gather_last(probs, indices)
    denom = tsum(selected, axis=-1, keepdims=True)
    weights = div(selected, denom)

    if active is None:
        active = np.ones(h.shape[:-1], dtype=bool)
    n_tokens = int(active.sum())
    counts = np.zeros(n_experts, dtype=np.int64)
    if n_tokens > 0:
        np.add.at(counts, indices[active].reshape(-1), 1)
    frac = counts / max(1, n_tokens * top_k)

    # Differentiable per-expert mean probability over the active tokens.
    flat = reshape(probs, (-1, n_experts))
    act_idx = np.nonzero(active.reshape(-1))[0]
    if act_idx.size:
        mean_probs = tsum(take_rows(flat, act_idx), axis=0) * (1.0 / act_idx.size)
    else:
        mean_probs = Tensor(np.zeros(n_experts))

    return RoutingOutcome(probs, indices, weights, frac, mean_probs, n_tokens)


def width_forward(
    h: Tensor,
    w: FfnWeights,
    views: list[ExpertView],
    router: RouterWeights,
    top_k: int,
    active: Optional[np.ndarray] = None,
    shared_expert: bool = False,
    eval_counts: Optional[np.ndarray] = None,
) -> tuple[Tensor, RoutingOutcome]:
    """Probability-weighted sum of the selected experts' outputs.

    Since the per-token weights sum to one and every expert output carries
    the residual, the sum equals h plus the weighted expert branches; this
    arrangement is used so the residual survives bit-exactly. Tokens are
    dispatched per expert in ascending expert order, so each token
    accumulates its K contributions in a fixed order. Inactive tokens
    (when `active` is given) pass through unchanged. `eval_counts`, when
    passed, is incremented with per-expert evaluation counts.
    """
    outcome = route_topk(h, router, top_k, active=active)
    lead = h.shape[:-1]
    d = h.shape[-1]
    n_lead = int(np.prod(lead, dtype=np.int64))

    h2 = reshape(h, (n_lead, d))
    w2 = reshape(outcome.weights, (n_lead, top_k))
    idx2 = outcome.indices.reshape(n_lead, top_k)
    active_flat = (
        np.ones(n_lead, dtype=bool) if active is None else active.reshape(n_lead)
    )

    acc = Tensor(np.zeros((n_lead, d), dtype=h.dtype))
    for k, view in enumerate(views):
        hit = (idx2 == k) & active_flat[:, None]
        tok = np.nonzero(hit.any(axis=-1))[0]
        if tok.size == 0:
            continue
        slot = np.argmax(hit[tok], axis=-1)
        rows = take_rows(h2, tok)
        gate = gather_last(take_rows(w2, tok), slot[:, None])
        out_rows = mul(gate, expert_branch(rows, w, view))
        acc = index_add_rows(acc, tok, out_rows)
        if eval_counts is not None:
            eval_counts[k] += tok.size

    if shared_expert:
        full = ExpertView(-1, 0, w.d_hidden)
        if active is None or bool(active_flat.all()):
            acc = add(acc, expert_branch(h2, w, full))
        else:
            tok = np.nonzero(active_flat)[0]
            acc = index_add_rows(acc, tok, expert_branch(take_rows(h2, tok), w, full))

    return add(h, reshape(acc, lead + (d,))), outcome


def load_balance_loss(outcome: RoutingOutcome, n_experts: int, top_k: int) -> Tensor:
    """Switch-style balancing penalty: N * sum_i f_i * P_i.

    f_i is the (non-differentiable) share of assignments, P_i the mean
    gate probability; gradients flow through P_i only. Equals 1.0 under
    perfectly uniform routing and grows toward N under collapse.
    """
    f = Tensor(np.asarray(outcome.assign_fractions, dtype=outcome.mean_probs.dtype))
    return tsum(mul(f, outcome.mean_probs)) * float(n_experts)
