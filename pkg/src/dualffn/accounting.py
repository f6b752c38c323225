"""Analytical parameter and FLOPs budgets, plus runtime FLOPs estimation.

Convention: 2 FLOPs per multiply-accumulate, forward pass, single token,
FFN weight matrices only (norms, activations, and router excluded). A
gated FFN holds three d x d_hidden matrices, so the dense cost is
6 * d * d_hidden per layer per token.

Variants:
  base      - the dense model.
  moe       - dense plus N physical experts of width d_expert (top-K active).
  k-loop    - dense applied k times per layer; same parameters as base.
  dualffn   - this package's architecture: a router (d x N) and a loop
              head (d x L_max) per layer, no new expert weights. Its
              runtime cost depends on measured inference statistics:
              base * n_mean + (moe - base) * p_frac, where n_mean is the
              average executed loop count and p_frac the fraction of
              (token, layer) decisions below the maximum loop count.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Optional

from dualffn.config import RunConfig
from dualffn.fusion import LayerTrace
from dualffn.tensor import ContractError


@dataclass(frozen=True)
class ArchSpec:
    name: str
    layers: int
    d: int
    d_hidden: int
    vocab: int
    base_params_millions: float  # externally supplied for reference scales
    n_experts: int = 8
    top_k: int = 2
    d_expert: int = 0  # 0 -> d_hidden // n_experts
    max_loops: int = 4

    def __post_init__(self):
        if min(self.layers, self.d, self.d_hidden, self.vocab) <= 0:
            raise ContractError("all architecture extents must be positive")
        if self.d_expert == 0:
            object.__setattr__(self, "d_expert", self.d_hidden // self.n_experts)
        if self.d_expert > self.d_hidden:
            raise ContractError("d_expert cannot exceed d_hidden")


# Reference scales: OLMo2-style geometry at 15 layers.
SPEC_354M = ArchSpec("354M", layers=15, d=1024, d_hidden=4096, vocab=50280,
                     base_params_millions=354.71)
SPEC_720M = ArchSpec("720M", layers=15, d=1536, d_hidden=6144, vocab=50280,
                     base_params_millions=720.81)


@dataclass(frozen=True)
class BudgetReport:
    variant: str
    params_millions: float
    ffn_flops_millions: Optional[float]  # None when it needs measured stats

    def __post_init__(self):
        if self.ffn_flops_millions is not None and self.ffn_flops_millions <= 0:
            raise ContractError("ffn_flops must be positive")


def ffn_flops_dense(spec: ArchSpec) -> float:
    """Per-token forward FLOPs of the dense gated FFN, in millions."""
    return 6.0 * spec.d * spec.d_hidden * spec.layers / 1e6


def ffn_flops_kloop(spec: ArchSpec, k: int) -> float:
    if k < 1:
        raise ContractError(f"loop count must be >= 1, got {k}")
    return k * ffn_flops_dense(spec)


def ffn_flops_moe(spec: ArchSpec) -> float:
    """Dense always-on path plus top_k physical experts of width d_expert."""
    extra = 6.0 * spec.d * spec.d_expert * spec.top_k * spec.layers / 1e6
    return ffn_flops_dense(spec) + extra


def moe_extra_params(spec: ArchSpec) -> float:
    """Total parameter count (millions) of the physical-expert baseline."""
    experts = 3.0 * spec.d * spec.d_expert * spec.n_experts * spec.layers
    router = float(spec.d * spec.n_experts * spec.layers)
    return spec.base_params_millions + (experts + router) / 1e6


def dualpath_extra_params(spec: ArchSpec) -> float:
    """Total parameters (millions): base plus router and loop head only."""
    extra = float(spec.d * spec.n_experts + spec.d * spec.max_loops) * spec.layers
    return spec.base_params_millions + extra / 1e6


def dualpath_runtime_flops(
    base_flops: float, moe_flops: float, n_mean: float, p_frac: float
) -> float:
    """Runtime estimate: base * n_mean + (moe - base) * p_frac, millions."""
    if n_mean < 1.0:
        raise ContractError(f"n_mean must be >= 1, got {n_mean}")
    if not 0.0 <= p_frac <= 1.0:
        raise ContractError(f"p_frac must lie in [0, 1], got {p_frac}")
    return base_flops * n_mean + (moe_flops - base_flops) * p_frac


def collect_runtime_stats(traces: list[LayerTrace]) -> tuple[float, float]:
    """(n_mean, p_frac) over every (token, layer) decision in the traces."""
    if not traces:
        raise ContractError("collect_runtime_stats needs at least one trace")
    total = 0
    loops = 0
    below_max = 0
    for tr in traces:
        total += tr.hard.size
        loops += int(tr.hard.sum())
        below_max += int((tr.hard != tr.max_loops).sum())
    if total == 0:
        raise ContractError("traces contain no tokens")
    return loops / total, below_max / total


def instrumented_flops_millions(traces: list[LayerTrace], cfg: RunConfig) -> float:
    """Per-token FLOPs actually executed by the FFN pathways, from counters.

    Requires inference traces (they carry executed loop counts and expert
    evaluation counts). Counts full-FFN applications in the depth pathway
    and d_expert-wide expert evaluations in the width pathway, at 2 FLOPs
    per multiply-accumulate, matching the budget-table convention.
    """
    if not traces:
        raise ContractError("no traces to account")
    total_flops = 0.0
    token_layer_obs = 0
    for tr in traces:
        if tr.loop_counts is None:
            raise ContractError("instrumented FLOPs need inference traces")
        token_layer_obs += tr.hard.size
        total_flops += 6.0 * cfg.d_model * cfg.d_hidden * float(tr.loop_counts.sum())
        if tr.expert_eval_counts.size:
            total_flops += (
                6.0 * cfg.d_model * cfg.d_expert * float(tr.expert_eval_counts.sum())
            )
        if cfg.shared_expert and tr.width_active is not None:
            total_flops += (
                6.0 * cfg.d_model * cfg.d_hidden * float(tr.width_active.sum())
            )
    tokens = token_layer_obs / cfg.n_layers
    return total_flops / tokens / 1e6


def model_param_count(cfg: RunConfig) -> int:
    """Exact trainable-scalar count of a model built from this config."""
    d, dh = cfg.d_model, cfg.d_hidden
    total = cfg.vocab_size * d + cfg.max_seq_len * d  # embeddings
    per_layer = 4 * d * d + d  # attention + gain
    per_layer += 3 * d * dh + d  # ffn + gain
    if cfg.width_enabled:
        per_layer += d * cfg.n_experts
    if cfg.fixed_loops is None:
        per_layer += d * cfg.max_loops
    total += cfg.n_layers * per_layer
    total += d  # final gain
    if not cfg.tie_embeddings:
        total += d * cfg.vocab_size
    return total


def budget_reports(
    spec: ArchSpec,
    loop_counts: tuple[int, ...] = (2, 4, 6),
    runtime_stats: Optional[tuple[float, float]] = None,
) -> list[BudgetReport]:
    base = spec.base_params_millions
    dense = ffn_flops_dense(spec)
    reports = [
        BudgetReport("base", base, dense),
        BudgetReport("moe", moe_extra_params(spec), ffn_flops_moe(spec)),
    ]
    for k in loop_counts:
        reports.append(BudgetReport(f"{k}-loop", base, ffn_flops_kloop(spec, k)))
    runtime = None
    if runtime_stats is not None:
        runtime = dualpath_runtime_flops(dense, ffn_flops_moe(spec), *runtime_stats)
    reports.append(BudgetReport("dualffn", dualpath_extra_params(spec), runtime))
    return reports


def render_table(spec: ArchSpec, reports: list[BudgetReport]) -> str:
    out = io.StringIO()
    out.write(f"budget for {spec.name} (base {spec.base_params_millions:.2f}M, "
              f"{spec.layers} layers, d={spec.d}, d_hidden={spec.d_hidden})\n")
    out.write(f"{'variant':<10} {'params (M)':>12} {'ffn flops (M)':>15}\n")
    for r in reports:
        flops = f"{r.ffn_flops_millions:.2f}" if r.ffn_flops_millions is not None else "n/a"
        out.write(f"{r.variant:<10} {r.params_millions:>12.2f} {flops:>15}\n")
    return out.getvalue()


def render_csv(reports: list[BudgetReport]) -> str:
    lines = ["variant,params_millions,ffn_flops_millions"]
    for r in reports:
        flops = "" if r.ffn_flops_millions is None else f"{r.ffn_flops_millions:.6f}"
        lines.append(f"{r.variant},{r.params_millions:.6f},{flops}")
    return "\n".join(lines) + "\n"
