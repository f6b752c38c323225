"""Recursive depth pathway: learned per-token loop counts over the full FFN.

A linear head predicts a distribution over 1..L_max loop counts. Training
samples it with Gumbel noise at temperature tau and aggregates the
recursion states straight-through: the forward value is the hard argmax
selection, the backward gradient is that of the soft probability-weighted
mixture. Inference drops the noise, reads the argmax, and stops the
recursion at exactly that step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from dualffn.tensor import (
    ContractError,
    Tensor,
    add,
    matmul,
    mul,
    slice_axis,
    softmax,
    ste_select,
    tsum,
)
from dualffn.nn import FfnWeights, ffn_forward
from dualffn.rng import gumbel_noise


@dataclass
class LoopPredictorWeights:
    w_loop: Tensor  # (d, L_max)

    @property
    def max_loops(self) -> int:
        return self.w_loop.shape[1]


@dataclass
class LoopDecision:
    """Per-token loop distribution and the derived quantities.

    probs lives on the tape; hard counts are 1-indexed integers.
    """

    probs: Tensor  # (B, T, L_max) on the simplex
    hard: np.ndarray  # (B, T) argmax(probs) + 1, ties -> fewer loops
    expected: Tensor  # (B, T) sum_l l * p_l, in [1, L_max]
    tau: float
    mode: str  # "train" | "infer"


@dataclass(frozen=True)
class TemperatureSchedule:
    tau_init: float = 5.0
    tau_min: float = 0.1
    horizon_frac: float = 0.8  # fraction of total steps to reach tau_min


def temperature_at(schedule: TemperatureSchedule, step: int, total_steps: int) -> float:
    """Exponential anneal from tau_init, held at tau_min after the horizon."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    horizon = schedule.horizon_frac * total_steps
    if horizon <= 0 or step >= horizon:
        return schedule.tau_min
    ratio = schedule.tau_min / schedule.tau_init
    return max(schedule.tau_min, schedule.tau_init * ratio ** (step / horizon))


def predict_loops(
    h: Tensor,
    w: LoopPredictorWeights,
    tau: float,
    gen: Optional[np.random.Generator],
    mode: str,
) -> LoopDecision:
    """Loop-count distribution for every token.

    Train mode perturbs the logits with fresh Gumbel noise (pass gen=None
    to disable, e.g. for gradient checks); infer mode is noise-free and
    should be called with tau = tau_min.
    """
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    if mode not in ("train", "infer"):
        raise ContractError(f"unknown mode {mode!r}")
    l_max = w.max_loops
    logits = matmul(h, w.w_loop)
    if mode == "train" and gen is not None:
        noise = Tensor(gumbel_noise(gen, logits.shape, dtype=logits.dtype))
        logits = add(logits, noise)
    probs = softmax(mul(logits, Tensor(np.asarray(1.0 / tau, dtype=h.dtype))), axis=-1)

    hard = np.argmax(probs.data, axis=-1) + 1  # first max wins: fewest loops
    ell = Tensor(np.arange(1, l_max + 1, dtype=h.dtype))
    expected = tsum(mul(probs, ell), axis=-1)
    return LoopDecision(probs, hard, expected, tau, mode)


def recurse(h0: Tensor, w: FfnWeights, max_loops: int) -> list[Tensor]:
    """States after 1..max_loops applications of the full shared FFN."""
    if max_loops < 1:
        raise ContractError(f"max_loops must be >= 1, got {max_loops}")
    states = []
    h = h0
    for _ in range(max_loops):
        h = ffn_forward(h, w)
        states.append(h)
    return states


def depth_forward_train(
    h0: Tensor,
    w: FfnWeights,
    decision: LoopDecision,
    soft: bool = False,
) -> Tensor:
    """Aggregate the recursion states straight-through.

    The forward value is the hard argmax selection bit for bit; the
    gradient is that of the soft mixture sum_l p_l * H_l, for p and the
    states alike. With soft=True the output is the soft mixture itself
    (fully differentiable, used by gradient checks). All max_loops
    iterations are computed either way.
    """
    l_max = decision.probs.shape[-1]
    states = recurse(h0, w, l_max)
    p = decision.probs
    if not soft:
        return ste_select(p, states, decision.hard - 1)

    out = None
    for l, state in enumerate(states):
        coeff = slice_axis(p, p.ndim - 1, l, l + 1)
        term = mul(coeff, state)
        out = term if out is None else add(out, term)
    return out


def depth_forward_infer(
    h0: Tensor,
    w: FfnWeights,
    decision: LoopDecision,
) -> tuple[Tensor, np.ndarray]:
    """Run each token for exactly its predicted loop count.

    Tokens that have exited are carried forward untouched; later
    iterations compute only on the still-active rows. Returns the final
    states and the per-token application counts (equal to the predicted
    counts by construction, returned for instrumentation).
    """
    if decision.mode != "infer":
        raise ContractError("depth_forward_infer requires an infer-mode decision")
    lead = h0.shape[:-1]
    d = h0.shape[-1]
    hard_flat = decision.hard.reshape(-1)
    values = h0.data.reshape(-1, d).copy()
    counts = np.zeros(hard_flat.shape, dtype=np.int64)

    for step in range(1, int(hard_flat.max(initial=0)) + 1):
        tok = np.nonzero(hard_flat >= step)[0]
        if tok.size == 0:
            break
        rows = Tensor(values[tok])
        values[tok] = ffn_forward(rows, w).data
        counts[tok] += 1
    return Tensor(values.reshape(lead + (d,))), counts.reshape(lead)
