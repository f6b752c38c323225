"""Optimization loop pieces: AdamW, warmup-cosine schedule, train step.

The learning rate ramps linearly to its peak over the warmup fraction,
then follows a cosine from the peak down to the floor fraction of the
peak. Gradients are clipped by global norm before the update; weight
decay is decoupled and skipped for normalization gains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from dualffn.checkpoint import load_checkpoint, save_checkpoint
from dualffn.depth import TemperatureSchedule, temperature_at
from dualffn.fusion import DualPathModel, model_forward
from dualffn.nn import lm_loss
from dualffn.rng import restore_stream, stream_state
from dualffn.tensor import ContractError, Tape, Tensor, add, backward, mul


class NumericsError(RuntimeError):
    """Training hit a non-finite value; carries a diagnostic snapshot."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class LrSchedule:
    peak: float
    total_steps: int
    warmup_frac: float = 0.05
    floor_frac: float = 0.10

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_frac * self.total_steps))


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear ramp to peak, then cosine decay to floor_frac * peak."""
    if not 0 <= step <= schedule.total_steps:
        raise ContractError(f"step {step} outside [0, {schedule.total_steps}]")
    ws = schedule.warmup_steps
    if ws > 0 and step < ws:
        return schedule.peak * step / ws
    floor = schedule.floor_frac * schedule.peak
    span = schedule.total_steps - ws
    if span <= 0:
        return schedule.peak
    u = (step - ws) / span
    return floor + (schedule.peak - floor) * 0.5 * (1.0 + math.cos(math.pi * u))


def _decays(name: str) -> bool:
    return not name.endswith(("norm_gain", "final_gain"))


@dataclass
class OptimState:
    """AdamW with decoupled weight decay and global-norm clipping."""

    params: list  # [(name, Tensor)]
    lr_schedule: LrSchedule
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, t in self.params:
            self.m.setdefault(name, np.zeros_like(t.data))
            self.v.setdefault(name, np.zeros_like(t.data))

    def clip(self, grads: dict) -> tuple[dict, float]:
        """Scale all gradients so the global L2 norm is at most clip_norm."""
        sq = 0.0
        for name, t in self.params:
            g = grads[name]
            sq += float((g.astype(np.float64) ** 2).sum())
        norm = math.sqrt(sq)
        if self.clip_norm > 0 and norm > self.clip_norm:
            scale = self.clip_norm / norm
            grads = {k: g * scale for k, g in grads.items()}
        return grads, norm

    def apply(self, grads: dict, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params:
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay > 0 and _decays(name):
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update


@dataclass
class StepMetrics:
    step: int
    loss: float
    aux_loss: float
    lr: float
    tau: float
    grad_norm: float
    mean_loops: list  # per layer, mean E[L]
    lambda_mean: list  # per layer
    lambda_min: float
    lambda_max: float
    expert_load: list  # per layer, assignment fractions
    tokens: int

    def record(self) -> dict:
        """Deterministic fields, serialized one record per line by the CLI.

        Wall-clock throughput is reported separately; it would break the
        byte-identical-metrics determinism contract.
        """
        return {
            "step": self.step,
            "loss": self.loss,
            "aux_loss": self.aux_loss,
            "lr": self.lr,
            "tau": self.tau,
            "grad_norm": self.grad_norm,
            "mean_loops": self.mean_loops,
            "lambda_mean": self.lambda_mean,
            "lambda_min": self.lambda_min,
            "lambda_max": self.lambda_max,
            "expert_load": self.expert_load,
            "tokens": self.tokens,
        }


def train_step(
    model: DualPathModel,
    batch: np.ndarray,
    optim: OptimState,
    tau_schedule: TemperatureSchedule,
    gen: Optional[np.random.Generator],
) -> StepMetrics:
    """One optimization step; deterministic given model, batch, and stream."""
    cfg = model.cfg
    step = optim.step_count
    tau = temperature_at(tau_schedule, min(step, cfg.total_steps), cfg.total_steps)
    lr = lr_at(optim.lr_schedule, min(step, optim.lr_schedule.total_steps))

    with Tape():
        logits, traces, aux = model_forward(batch, model, "train", tau=tau, gen=gen)
        loss = lm_loss(logits, batch)
        aux_val = 0.0
        if aux is not None and cfg.aux_coef > 0:
            aux_val = aux.item()
            loss = add(loss, mul(aux, Tensor(np.asarray(cfg.aux_coef, dtype=logits.dtype))))
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            raise NumericsError(
                f"non-finite loss at step {step}",
                {
                    "step": step,
                    "loss": loss_val,
                    "aux_loss": aux_val,
                    "tau": tau,
                    "lr": lr,
                    "logit_max": float(np.abs(logits.data).max()),
                },
            )
        gmap = backward(loss)

    lam_vals = np.concatenate([tr.lam.reshape(-1) for tr in traces])
    if lam_vals.min() < 0.0 or lam_vals.max() >= 1.0:
        raise NumericsError(
            f"gating coefficient left [0, 1) at step {step}",
            {"step": step, "lambda_min": float(lam_vals.min()),
             "lambda_max": float(lam_vals.max())},
        )

    grads = {}
    for name, p in optim.params:
        g = gmap.get(p)
        grads[name] = np.zeros_like(p.data) if g is None else g
    grads, norm = optim.clip(grads)
    optim.apply(grads, lr)

    return StepMetrics(
        step=step,
        loss=loss_val,
        aux_loss=aux_val,
        lr=lr,
        tau=tau,
        grad_norm=norm,
        mean_loops=[tr.expected_mean for tr in traces],
        lambda_mean=[float(tr.lam.mean()) for tr in traces],
        lambda_min=float(lam_vals.min()),
        lambda_max=float(lam_vals.max()),
        expert_load=[tr.assign_fractions.tolist() for tr in traces],
        tokens=int(batch.size),
    )


def checkpoint_save(
    path: str,
    model: DualPathModel,
    optim: OptimState,
    gen: Optional[np.random.Generator],
) -> None:
    tensors = {}
    for name, p in model.named_parameters():
        tensors[name] = p.data
    for name, _ in optim.params:
        tensors["optim.m." + name] = optim.m[name]
        tensors["optim.v." + name] = optim.v[name]
    rng_state = stream_state(gen) if gen is not None else {}
    save_checkpoint(
        path, model.cfg.digest(), tensors, optim.step_count, rng_state, extra={}
    )


def checkpoint_load(
    path: str, model: DualPathModel, optim: Optional[OptimState] = None
):
    """Restore parameters (and optimizer state) in place.

    Returns (step, gumbel generator or None). The checkpoint must carry
    the digest of the model's own config.
    """
    tensors, step, rng_state, _ = load_checkpoint(path, model.cfg.digest())
    for name, p in model.named_parameters():
        if name not in tensors:
            raise ContractError(f"checkpoint is missing tensor {name}")
        if tensors[name].shape != p.data.shape:
            raise ContractError(f"checkpoint tensor {name} has wrong shape")
        p.data = tensors[name]
    if optim is not None:
        for name, _ in optim.params:
            optim.m[name] = tensors["optim.m." + name]
            optim.v[name] = tensors["optim.v." + name]
        optim.step_count = step
    gen = restore_stream(rng_state) if rng_state else None
    return step, gen
