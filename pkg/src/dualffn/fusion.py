"""One dual-pathway transformer layer and the stacked model.

Per layer: causal attention, then the width pathway (virtual experts) and
the depth pathway (recursion with a learned loop count) both read the same
post-attention state and the same shared FFN weights. A per-token gating
coefficient lam = (L_max - E[L]) / L_max fuses them: tokens expected to
need few loops lean on the width output, tokens predicted to need the full
depth lean on the recursion. At inference the recursion early-exits at the
predicted loop count and the width branch is pruned for tokens predicted
to need maximal depth (their gating coefficient is negligible), which is
also exactly the population the runtime FLOPs estimate counts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from dualffn.config import RunConfig
from dualffn.depth import (
    LoopPredictorWeights,
    depth_forward_infer,
    depth_forward_train,
    predict_loops,
    recurse,
)
from dualffn.nn import AttentionWeights, FfnWeights, attention_block
from dualffn.rng import Rng
from dualffn.tensor import (
    ContractError,
    Tensor,
    add,
    gather_rows,
    matmul,
    mul,
    relu,
    reshape,
    rms_norm,
    sub,
    transpose,
)
from dualffn.width import (
    ExpertView,
    RouterWeights,
    build_expert_views,
    load_balance_loss,
    width_forward,
)


@dataclass
class DualPathLayer:
    """Weights of one layer; both pathways hold the identical FfnWeights object."""

    attention: AttentionWeights
    ffn: FfnWeights
    router: Optional[RouterWeights]
    loop_head: Optional[LoopPredictorWeights]
    views: list[ExpertView]


@dataclass
class LayerTrace:
    """Per-layer statistics of one forward pass."""

    lam: np.ndarray  # (B, T) gating coefficient per token
    hard: np.ndarray  # (B, T) predicted loop count per token
    expert_eval_counts: np.ndarray  # (N,) expert evaluations performed
    assign_fractions: np.ndarray  # (N,) routing shares
    expected_mean: float  # mean E[L] over tokens
    max_loops: int
    loop_counts: Optional[np.ndarray] = None  # (B, T) executed iterations (infer)
    width_active: Optional[np.ndarray] = None  # (B, T) width branch executed (infer)


def gating_lambda(e_l: Union[Tensor, np.ndarray, float], l_max: int):
    """Fusion weight (L_max - E[L]) / L_max, clamped at zero against fp dust.

    Accepts a tape Tensor (training; gradients flow through E[L]) or plain
    values (inference / statistics). Always lands in [0, 1).
    """
    vals = e_l.data if isinstance(e_l, Tensor) else np.asarray(e_l, dtype=np.float64)
    if (vals < 1.0 - 1e-9).any() or (vals > l_max + 1e-9).any():
        raise ContractError(
            f"expected loop count outside [1, {l_max}]: "
            f"range [{vals.min()}, {vals.max()}]"
        )
    if isinstance(e_l, Tensor):
        lam = relu(mul(sub(Tensor(np.asarray(float(l_max), dtype=e_l.dtype)), e_l),
                       Tensor(np.asarray(1.0 / l_max, dtype=e_l.dtype))))
        return lam
    # same arithmetic as the tensor path so train and infer agree bitwise
    return np.maximum((l_max - vals) * (1.0 / l_max), 0.0)


def _fixed_loop_forward(x: Tensor, layer: DualPathLayer, k: int):
    """Degenerate variant: plain FFN recursion k times, no routing, no gating."""
    h = attention_block(x, layer.attention)
    y = recurse(h, layer.ffn, k)[-1]
    b, t = x.shape[0], x.shape[1]
    hard = np.full((b, t), k, dtype=np.int64)
    trace = LayerTrace(
        lam=np.zeros((b, t)),
        hard=hard,
        expert_eval_counts=np.zeros(0, dtype=np.int64),
        assign_fractions=np.zeros(0),
        expected_mean=float(k),
        max_loops=k,
        loop_counts=hard.copy(),
        width_active=np.zeros((b, t), dtype=bool),
    )
    return y, trace


def layer_forward_train(
    x: Tensor,
    layer: DualPathLayer,
    cfg: RunConfig,
    tau: float,
    gen: Optional[np.random.Generator],
) -> tuple[Tensor, LayerTrace, Optional[Tensor]]:
    """Training pass: attention, both pathways, difficulty-aware fusion.

    Returns the fused output, the layer trace, and the balancing loss
    (None for degenerate variants without routing).
    """
    if cfg.fixed_loops is not None:
        y, trace = _fixed_loop_forward(x, layer, cfg.fixed_loops)
        return y, trace, None

    h = attention_block(x, layer.attention)
    decision = predict_loops(h, layer.loop_head, tau, gen, "train")
    y_depth = depth_forward_train(h, layer.ffn, decision, soft=cfg.soft_mode)

    if not cfg.width_enabled:
        trace = LayerTrace(
            lam=np.zeros(decision.hard.shape),
            hard=decision.hard,
            expert_eval_counts=np.zeros(0, dtype=np.int64),
            assign_fractions=np.zeros(0),
            expected_mean=float(decision.expected.data.mean()),
            max_loops=cfg.max_loops,
        )
        return y_depth, trace, None

    eval_counts = np.zeros(cfg.n_experts, dtype=np.int64)
    y_width, outcome = width_forward(
        h,
        layer.ffn,
        layer.views,
        layer.router,
        cfg.top_k,
        shared_expert=cfg.shared_expert,
        eval_counts=eval_counts,
    )

    lam = gating_lambda(decision.expected, cfg.max_loops)
    lam3 = reshape(lam, lam.shape + (1,))
    one = Tensor(np.asarray(1.0, dtype=x.dtype))
    y = add(mul(lam3, y_width), mul(sub(one, lam3), y_depth))

    aux = load_balance_loss(outcome, cfg.n_experts, cfg.top_k)
    trace = LayerTrace(
        lam=lam.data,
        hard=decision.hard,
        expert_eval_counts=eval_counts,
        assign_fractions=outcome.assign_fractions,
        expected_mean=float(decision.expected.data.mean()),
        max_loops=cfg.max_loops,
    )
    return y, trace, aux


def layer_forward_infer(
    x: Tensor,
    layer: DualPathLayer,
    cfg: RunConfig,
    lam_threshold: Optional[float] = None,
) -> tuple[Tensor, LayerTrace]:
    """Inference pass with early exit and conditional width pruning.

    The recursion stops per token at its predicted loop count. The width
    branch runs only for tokens whose predicted count is below the maximum
    and whose gating coefficient exceeds the threshold; a negative
    threshold disables pruning entirely (reference path).
    """
    if lam_threshold is None:
        lam_threshold = cfg.lambda_threshold
    if cfg.fixed_loops is not None:
        return _fixed_loop_forward(x, layer, cfg.fixed_loops)

    h = attention_block(x, layer.attention)
    decision = predict_loops(h, layer.loop_head, cfg.tau_min, None, "infer")
    y_depth, loop_counts = depth_forward_infer(h, layer.ffn, decision)
    lam = gating_lambda(decision.expected.data, cfg.max_loops)

    if not cfg.width_enabled:
        trace = LayerTrace(
            lam=np.zeros(decision.hard.shape),
            hard=decision.hard,
            expert_eval_counts=np.zeros(0, dtype=np.int64),
            assign_fractions=np.zeros(0),
            expected_mean=float(decision.expected.data.mean()),
            max_loops=cfg.max_loops,
            loop_counts=loop_counts,
            width_active=np.zeros(decision.hard.shape, dtype=bool),
        )
        return y_depth, trace

    if lam_threshold < 0:
        active = np.ones(decision.hard.shape, dtype=bool)
    else:
        # Pruning tracks the runtime cost model: the width branch is dropped
        # where the predicted depth is maximal (gating weight negligible) or
        # the gating weight sits at/below the threshold.
        active = (decision.hard != cfg.max_loops) & (lam > lam_threshold)

    eval_counts = np.zeros(cfg.n_experts, dtype=np.int64)
    y_width, outcome = width_forward(
        h,
        layer.ffn,
        layer.views,
        layer.router,
        cfg.top_k,
        active=active,
        shared_expert=cfg.shared_expert,
        eval_counts=eval_counts,
    )

    lam3 = lam[..., None]
    fused = lam3 * y_width.data + (1.0 - lam3) * y_depth.data
    y = Tensor(np.where(active[..., None], fused, y_depth.data))

    trace = LayerTrace(
        lam=lam,
        hard=decision.hard,
        expert_eval_counts=eval_counts,
        assign_fractions=outcome.assign_fractions,
        expected_mean=float(decision.expected.data.mean()),
        max_loops=cfg.max_loops,
        loop_counts=loop_counts,
        width_active=active,
    )
    return y, trace


@dataclass
class DualPathModel:
    cfg: RunConfig
    tok_emb: Tensor  # (V, d)
    pos_emb: Tensor  # (max_seq_len, d)
    layers: list[DualPathLayer]
    final_gain: Tensor  # (d,)
    unembed: Optional[Tensor]  # (d, V); None when tied to tok_emb

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb)]
        for i, layer in enumerate(self.layers):
            p = f"layers.{i}."
            a = layer.attention
            out += [
                (p + "attn.w_q", a.w_q),
                (p + "attn.w_k", a.w_k),
                (p + "attn.w_v", a.w_v),
                (p + "attn.w_o", a.w_o),
                (p + "attn.norm_gain", a.norm_gain),
                (p + "ffn.w_gate", layer.ffn.w_gate),
                (p + "ffn.w_up", layer.ffn.w_up),
                (p + "ffn.w_down", layer.ffn.w_down),
                (p + "ffn.norm_gain", layer.ffn.norm_gain),
            ]
            if layer.router is not None:
                out.append((p + "router.w_g", layer.router.w_g))
            if layer.loop_head is not None:
                out.append((p + "loop.w_loop", layer.loop_head.w_loop))
        out.append(("final_gain", self.final_gain))
        if self.unembed is not None:
            out.append(("unembed", self.unembed))
        return out

    def param_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())


def build_model(cfg: RunConfig, rng: Rng) -> DualPathModel:
    """Deterministic initialization: one named Philox stream per tensor."""
    dt = cfg.np_dtype
    d, dh = cfg.d_model, cfg.d_hidden

    def mat(name, shape, std):
        vals = rng.stream("init/" + name).standard_normal(shape) * std
        return Tensor(vals.astype(dt), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape, dtype=dt), requires_grad=True)

    proj_std = 1.0 / np.sqrt(d)
    hidden_std = 1.0 / np.sqrt(dh)

    tok = mat("tok_emb", (cfg.vocab_size, d), 0.02)
    pos = mat("pos_emb", (cfg.max_seq_len, d), 0.02)
    layers = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        attn = AttentionWeights(
            mat(p + "w_q", (d, d), proj_std),
            mat(p + "w_k", (d, d), proj_std),
            mat(p + "w_v", (d, d), proj_std),
            mat(p + "w_o", (d, d), proj_std / np.sqrt(2 * cfg.n_layers)),
            ones(d),
            cfg.n_heads,
        )
        ffn = FfnWeights(
            mat(p + "w_gate", (d, dh), proj_std),
            mat(p + "w_up", (d, dh), proj_std),
            mat(p + "w_down", (dh, d), hidden_std / np.sqrt(2 * cfg.n_layers)),
            ones(d),
        )
        router = None
        views: list[ExpertView] = []
        if cfg.width_enabled:
            router = RouterWeights(mat(p + "w_g", (d, cfg.n_experts), 0.01))
            views = build_expert_views(dh, cfg.d_expert, cfg.n_experts)
        loop_head = None
        if cfg.fixed_loops is None:
            loop_head = LoopPredictorWeights(
                mat(p + "w_loop", (d, cfg.max_loops), 0.01)
            )
        layers.append(DualPathLayer(attn, ffn, router, loop_head, views))

    final_gain = ones(d)
    # small head init keeps initial logits near uniform (loss ~ log vocab)
    unembed = None if cfg.tie_embeddings else mat("unembed", (d, cfg.vocab_size), 0.02)
    return DualPathModel(cfg, tok, pos, layers, final_gain, unembed)


def model_forward(
    tokens: np.ndarray,
    model: DualPathModel,
    mode: str,
    tau: float = None,
    gen: Optional[np.random.Generator] = None,
    lam_threshold: Optional[float] = None,
) -> tuple[Tensor, list[LayerTrace], Optional[Tensor]]:
    """Embeddings -> stacked layers -> final norm -> logits.

    Returns logits [B, T, V], per-layer traces, and the summed balancing
    loss (None at inference or for variants without routing).
    """
    tokens = np.asarray(tokens)
    cfg = model.cfg
    if tokens.min(initial=0) < 0 or tokens.max(initial=0) >= cfg.vocab_size:
        raise ContractError(
            f"token ids must lie in [0, {cfg.vocab_size}); got range "
            f"[{tokens.min()}, {tokens.max()}]"
        )
    b, t = tokens.shape
    if t > cfg.max_seq_len:
        raise ContractError(f"sequence length {t} exceeds max_seq_len={cfg.max_seq_len}")
    if mode not in ("train", "infer"):
        raise ContractError(f"unknown mode {mode!r}")
    if mode == "train" and tau is None:
        raise ContractError("train mode requires a temperature")

    h = add(gather_rows(model.tok_emb, tokens), gather_rows(model.pos_emb, np.arange(t)))

    traces = []
    total_aux = None
    for layer in model.layers:
        if mode == "train":
            h, trace, aux = layer_forward_train(h, layer, cfg, tau, gen)
            if aux is not None:
                total_aux = aux if total_aux is None else add(total_aux, aux)
        else:
            h, trace = layer_forward_infer(h, layer, cfg, lam_threshold)
        traces.append(trace)

    h = rms_norm(h, model.final_gain)
    if model.unembed is not None:
        logits = matmul(h, model.unembed)
    else:
        logits = matmul(h, transpose(model.tok_emb, (1, 0)))
    return logits, traces, total_aux
