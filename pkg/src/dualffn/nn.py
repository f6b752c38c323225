"""Standard transformer pieces: causal attention, gated FFN, LM loss.

Both blocks are pre-norm with the residual added outside the transform,
so zeroing the non-residual branch yields the identity map exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dualffn.tensor import (
    ContractError,
    Tensor,
    add,
    bmm,
    gather_last,
    log_softmax,
    matmul,
    mul,
    reshape,
    rms_norm,
    silu,
    slice_axis,
    softmax,
    tmean,
    transpose,
)

NORM_EPS = 1e-5

# Large-negative additive mask; exp(masked - max) underflows to exactly 0.
MASK_VALUE = -1e30


class EmptySequenceError(ValueError):
    """Attention over a zero-length sequence is undefined."""


@dataclass
class FfnWeights:
    """One gated feed-forward parameter set, shared by every pathway."""

    w_gate: Tensor  # (d, d_hidden)
    w_up: Tensor  # (d, d_hidden)
    w_down: Tensor  # (d_hidden, d)
    norm_gain: Tensor  # (d,)

    def __post_init__(self):
        dh = self.w_gate.shape[1]
        if self.w_up.shape[1] != dh or self.w_down.shape[0] != dh:
            raise ContractError(
                f"hidden extents disagree: gate {self.w_gate.shape}, "
                f"up {self.w_up.shape}, down {self.w_down.shape}"
            )

    @property
    def d_hidden(self) -> int:
        return self.w_gate.shape[1]


@dataclass
class AttentionWeights:
    w_q: Tensor  # (d, d)
    w_k: Tensor  # (d, d)
    w_v: Tensor  # (d, d)
    w_o: Tensor  # (d, d)
    norm_gain: Tensor  # (d,)
    n_heads: int

    def __post_init__(self):
        d = self.w_q.shape[0]
        if d % self.n_heads != 0:
            raise ContractError(f"n_heads={self.n_heads} does not divide d={d}")


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    hd = d // n_heads
    x = reshape(x, (b, t, n_heads, hd))
    x = transpose(x, (0, 2, 1, 3))
    return reshape(x, (b * n_heads, t, hd))


def _merge_heads(x: Tensor, batch: int, n_heads: int) -> Tensor:
    bh, t, hd = x.shape
    x = reshape(x, (batch, n_heads, t, hd))
    x = transpose(x, (0, 2, 1, 3))
    return reshape(x, (batch, t, n_heads * hd))


def causal_mask(t: int, dtype=np.float64) -> np.ndarray:
    mask = np.zeros((t, t), dtype=dtype)
    mask[np.triu_indices(t, k=1)] = MASK_VALUE
    return mask


def attention_block(x: Tensor, w: AttentionWeights) -> Tensor:
    """x + causal multi-head self-attention of the normalized input."""
    b, t, d = x.shape
    if t == 0:
        raise EmptySequenceError("attention requires at least one token")
    hd = d // w.n_heads

    n = rms_norm(x, w.norm_gain, NORM_EPS)
    q = _split_heads(matmul(n, w.w_q), w.n_heads)
    k = _split_heads(matmul(n, w.w_k), w.n_heads)
    v = _split_heads(matmul(n, w.w_v), w.n_heads)

    scores = mul(bmm(q, transpose(k, (0, 2, 1))), Tensor(np.asarray(1.0 / np.sqrt(hd), dtype=x.dtype)))
    scores = add(scores, Tensor(causal_mask(t, dtype=x.dtype)))
    probs = softmax(scores, axis=-1)
    ctx = _merge_heads(bmm(probs, v), b, w.n_heads)
    return add(x, matmul(ctx, w.w_o))


def ffn_forward(h: Tensor, w: FfnWeights) -> Tensor:
    """h + down-projected gated transform of the normalized input."""
    n = rms_norm(h, w.norm_gain, NORM_EPS)
    z = mul(silu(matmul(n, w.w_gate)), matmul(n, w.w_up))
    return add(h, matmul(z, w.w_down))


def lm_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean next-token cross entropy; the final position has no target."""
    targets = np.asarray(targets)
    b, t, v = logits.shape
    if targets.shape != (b, t):
        raise ContractError(f"targets shape {targets.shape} != logits batch {(b, t)}")
    if t < 2:
        raise ContractError("need at least two positions for next-token loss")
    if targets.min() < 0 or targets.max() >= v:
        raise ContractError(
            f"target ids must lie in [0, {v}); got range "
            f"[{targets.min()}, {targets.max()}]"
        )
    lp = log_softmax(logits, axis=-1)
    lp = slice_axis(lp, 1, 0, t - 1)
    picked = gather_last(lp, targets[:, 1:, None])
    return -tmean(picked)
