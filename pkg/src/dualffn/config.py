"""Run configuration: a flat key=value text format with strict validation.

Unknown keys are errors, not warnings. Derived defaults (d_hidden = 4*d,
d_expert = d_hidden / n_experts) are resolved at parse time so a parsed
config is always fully explicit. The digest identifies everything that
must match for a checkpoint to be resumable (paths excluded).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from typing import Optional

from dualffn.width import ConfigError

_PATH_FIELDS = {"corpus_path", "labels_path", "out_dir"}


@dataclass
class RunConfig:
    # architecture
    vocab_size: int = 258  # 256 bytes + pad + bos
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_hidden: int = 0  # 0 -> 4 * d_model
    max_seq_len: int = 0  # 0 -> seq_len
    tie_embeddings: bool = False
    # width pathway
    width_enabled: bool = True
    n_experts: int = 8
    top_k: int = 2
    d_expert: int = 0  # 0 -> d_hidden // n_experts
    shared_expert: bool = False
    # depth pathway
    max_loops: int = 4
    fixed_loops: Optional[int] = None  # set -> plain k-loop variant
    tau_init: float = 5.0
    tau_min: float = 0.1
    tau_horizon_frac: float = 0.8
    # fusion
    lambda_threshold: float = 0.0
    soft_mode: bool = False
    # optimization
    seed: int = 0
    batch_size: int = 8
    seq_len: int = 64
    total_steps: int = 2000
    peak_lr: float = 1e-3
    warmup_frac: float = 0.05
    lr_floor_frac: float = 0.1
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    aux_coef: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    dtype: str = "float64"
    # harness
    log_every: int = 10
    checkpoint_every: int = 500
    eval_frac: float = 0.1
    corpus_path: str = ""
    labels_path: str = ""
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.d_hidden == 0:
            self.d_hidden = 4 * self.d_model
        if self.max_seq_len == 0:
            self.max_seq_len = self.seq_len
        if self.d_expert == 0 and self.n_experts > 0:
            self.d_expert = max(1, self.d_hidden // self.n_experts)
        self.validate()

    def validate(self):
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(f"config field '{name}': {msg}")

        need(self.vocab_size >= 2, "vocab_size", "must be >= 2")
        need(self.d_model >= 1, "d_model", "must be positive")
        need(self.n_layers >= 1, "n_layers", "must be positive")
        need(
            self.d_model % self.n_heads == 0,
            "n_heads",
            f"{self.n_heads} does not divide d_model={self.d_model}",
        )
        need(self.d_hidden >= 2, "d_hidden", "must be >= 2")
        if self.width_enabled:
            need(self.n_experts >= 1, "n_experts", "must be >= 1")
            need(
                1 <= self.top_k <= self.n_experts,
                "top_k",
                f"must lie in [1, n_experts={self.n_experts}], got {self.top_k}",
            )
            need(
                1 <= self.d_expert < self.d_hidden,
                "d_expert",
                f"must lie in [1, d_hidden={self.d_hidden}), got {self.d_expert}",
            )
        need(self.max_loops >= 1, "max_loops", "must be >= 1")
        if self.fixed_loops is not None:
            need(self.fixed_loops >= 1, "fixed_loops", "must be >= 1")
            need(
                not self.width_enabled,
                "fixed_loops",
                "the fixed-loop variant requires width_enabled = false",
            )
        need(self.tau_init > 0, "tau_init", "must be positive")
        need(0 < self.tau_min <= self.tau_init, "tau_min", "must be in (0, tau_init]")
        need(0 < self.tau_horizon_frac <= 1, "tau_horizon_frac", "must be in (0, 1]")
        need(self.seq_len >= 2, "seq_len", "must be >= 2")
        need(self.max_seq_len >= self.seq_len, "max_seq_len", "must cover seq_len")
        need(self.batch_size >= 1, "batch_size", "must be positive")
        need(self.total_steps >= 1, "total_steps", "must be positive")
        need(0 <= self.warmup_frac < 1, "warmup_frac", "must be in [0, 1)")
        need(0 <= self.lr_floor_frac <= 1, "lr_floor_frac", "must be in [0, 1]")
        need(0 < self.eval_frac < 1, "eval_frac", "must be in (0, 1)")
        need(self.dtype in ("float64", "float32"), "dtype", "float64 or float32")

    @property
    def np_dtype(self):
        import numpy as np

        return np.float64 if self.dtype == "float64" else np.float32

    def digest(self) -> str:
        """Hex digest over every non-path field; gates checkpoint resume."""
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            if f.name in _PATH_FIELDS:
                continue
            lines.append(f"{f.name}={getattr(self, f.name)!r}")
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _coerce(name: str, kind, raw: str):
    raw = raw.strip()
    if kind == Optional[int]:
        if raw.lower() in ("none", "null", ""):
            return None
        kind = int
    try:
        if kind is bool:
            if raw.lower() not in _BOOL:
                raise ValueError(f"expected a boolean, got {raw!r}")
            return _BOOL[raw.lower()]
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
    except ValueError as e:
        raise ConfigError(f"config field '{name}': {e}") from None
    raise ConfigError(f"config field '{name}': unsupported type {kind}")


def parse_config(text: str) -> RunConfig:
    """Parse `key = value` lines; '#' starts a comment; unknown keys reject."""
    known = {f.name: f.type for f in fields(RunConfig)}
    # dataclass stores annotations as strings under future-import semantics
    annot = RunConfig.__annotations__
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown config key '{key}'")
        ann = annot[key]
        if ann in ("int", int):
            kind = int
        elif ann in ("float", float):
            kind = float
        elif ann in ("bool", bool):
            kind = bool
        elif ann in ("str", str):
            kind = str
        else:  # Optional[int]
            kind = Optional[int]
        values[key] = _coerce(key, kind, raw)
    return RunConfig(**values)


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def render_config(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(cfg)]
    return "\n".join(lines) + "\n"
