"""Command-line surface: train, eval, account, gen-data, chart.

Every failure path exits with its own status and prints one JSON line to
stderr: 2 config, 3 data, 4 numeric abort, 5 checkpoint, 6 contract
violation, 1 anything else. The training metrics stream is append-only
JSONL, one record per step, with no wall-clock fields, so identical seeds
produce byte-identical files.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from dualffn.accounting import (
    SPEC_354M,
    SPEC_720M,
    ArchSpec,
    budget_reports,
    collect_runtime_stats,
    dualpath_runtime_flops,
    ffn_flops_dense,
    ffn_flops_moe,
    instrumented_flops_millions,
    model_param_count,
    render_csv,
    render_table,
)
from dualffn.checkpoint import CheckpointError
from dualffn.config import RunConfig, load_config
from dualffn.data import (
    CorpusSpec,
    DataError,
    eval_batches,
    load_corpus,
    train_batch,
    write_corpus,
)
from dualffn.depth import TemperatureSchedule
from dualffn.fusion import build_model, model_forward
from dualffn.nn import lm_loss
from dualffn.rng import Rng
from dualffn.tensor import ContractError
from dualffn.trainer import (
    LrSchedule,
    NumericsError,
    OptimState,
    checkpoint_load,
    checkpoint_save,
    train_step,
)
from dualffn.width import ConfigError


def _emit_error(kind: str, exc: Exception) -> None:
    line = json.dumps({"error": kind, "detail": str(exc)}, sort_keys=True)
    print(line, file=sys.stderr)


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def _prepare_corpus(cfg: RunConfig):
    corpus_path = cfg.corpus_path
    labels_path = cfg.labels_path or (corpus_path + ".labels" if corpus_path else "")
    if not corpus_path:
        corpus_path = os.path.join(cfg.out_dir, "corpus.bin")
        labels_path = corpus_path + ".labels"
        if not os.path.exists(corpus_path):
            os.makedirs(cfg.out_dir, exist_ok=True)
            write_corpus(corpus_path, labels_path, CorpusSpec(seed=cfg.seed))
    if not os.path.exists(labels_path):
        labels_path = None
    return load_corpus(corpus_path, labels_path)


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    os.makedirs(cfg.out_dir, exist_ok=True)
    corpus, _ = _prepare_corpus(cfg)

    model = build_model(cfg, Rng(cfg.seed))
    optim = OptimState(
        params=model.named_parameters(),
        lr_schedule=LrSchedule(cfg.peak_lr, cfg.total_steps, cfg.warmup_frac, cfg.lr_floor_frac),
        beta1=cfg.adam_beta1,
        beta2=cfg.adam_beta2,
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
        clip_norm=cfg.clip_norm,
    )
    tau_sched = TemperatureSchedule(cfg.tau_init, cfg.tau_min, cfg.tau_horizon_frac)
    gumbel_gen = Rng(cfg.seed).stream("gumbel")

    start_step = 0
    if args.checkpoint:
        start_step, restored = checkpoint_load(args.checkpoint, model, optim)
        if restored is not None:
            gumbel_gen = restored

    metrics_path = os.path.join(cfg.out_dir, "metrics.jsonl")
    mode = "a" if start_step > 0 else "w"
    t0 = time.perf_counter()
    tokens_seen = 0
    last = None
    try:
        with open(metrics_path, mode, encoding="utf-8") as fh:
            for step in range(start_step, cfg.total_steps):
                batch = train_batch(corpus, cfg, step)
                last = train_step(model, batch, optim, tau_sched, gumbel_gen)
                tokens_seen += last.tokens
                fh.write(json.dumps(last.record(), sort_keys=True) + "\n")
                if step % cfg.log_every == 0 or step == cfg.total_steps - 1:
                    print(
                        f"step {step} loss {last.loss:.4f} lr {last.lr:.2e} "
                        f"tau {last.tau:.3f}",
                        file=sys.stderr,
                    )
                if cfg.checkpoint_every > 0 and (step + 1) % cfg.checkpoint_every == 0:
                    checkpoint_save(
                        os.path.join(cfg.out_dir, f"ckpt_{step + 1}.bin"),
                        model, optim, gumbel_gen,
                    )
    except NumericsError as e:
        snap_path = os.path.join(cfg.out_dir, "abort_snapshot.json")
        with open(snap_path, "w", encoding="utf-8") as fh:
            json.dump(e.snapshot, fh, sort_keys=True, indent=2)
        raise

    checkpoint_save(os.path.join(cfg.out_dir, "ckpt_final.bin"), model, optim, gumbel_gen)
    elapsed = time.perf_counter() - t0
    summary = {
        "final_step": cfg.total_steps - 1,
        "final_loss": last.loss if last else None,
        "mean_loops_per_layer": last.mean_loops if last else None,
        "metrics": metrics_path,
        "checkpoint": os.path.join(cfg.out_dir, "ckpt_final.bin"),
        "tokens_per_sec": round(tokens_seen / max(elapsed, 1e-9), 1),
    }
    print(json.dumps(summary, sort_keys=True))
    return 0


def evaluate(cfg: RunConfig, model, corpus, labels, max_batches=None) -> dict:
    """Inference pass over the eval split; deterministic report."""
    total_loss = 0.0
    total_positions = 0
    traces_all = []
    loops_by_label = {0: [0, 0], 1: [0, 0]}  # label -> [sum_loops, count]
    for batch, lab in eval_batches(corpus, cfg, labels, max_batches=max_batches):
        logits, traces, _ = model_forward(batch, model, "infer")
        n_pos = batch.shape[0] * (batch.shape[1] - 1)
        total_loss += lm_loss(logits, batch).item() * n_pos
        total_positions += n_pos
        traces_all.extend(traces)
        if labels is not None:
            mean_loops = np.mean([tr.hard for tr in traces], axis=0)
            for label in (0, 1):
                sel = lab == label
                if sel.any():
                    loops_by_label[label][0] += float(mean_loops[sel].sum())
                    loops_by_label[label][1] += int(sel.sum())

    n_mean, p_frac = collect_runtime_stats(traces_all)
    inst = instrumented_flops_millions(traces_all, cfg)
    base_m = model_param_count(cfg) / 1e6
    spec = ArchSpec(
        "config", layers=cfg.n_layers, d=cfg.d_model, d_hidden=cfg.d_hidden,
        vocab=cfg.vocab_size, base_params_millions=base_m,
        n_experts=max(cfg.n_experts, 1), top_k=cfg.top_k,
        d_expert=cfg.d_expert or 1, max_loops=cfg.max_loops,
    )
    estimate = dualpath_runtime_flops(
        ffn_flops_dense(spec), ffn_flops_moe(spec), n_mean, p_frac
    )
    n_layers = cfg.n_layers
    per_layer_loops = [
        float(np.mean([tr.hard.mean() for tr in traces_all[i::n_layers]]))
        for i in range(n_layers)
    ]
    lam = np.concatenate([tr.lam.reshape(-1) for tr in traces_all])
    hist, _ = np.histogram(lam, bins=10, range=(0.0, 1.0))
    report = {
        "loss": total_loss / total_positions,
        "positions": total_positions,
        "mean_loops_per_layer": per_layer_loops,
        "lambda_mean": float(lam.mean()),
        "lambda_hist": hist.tolist(),
        "n_mean": n_mean,
        "p_frac": p_frac,
        "flops_estimate_millions": estimate,
        "flops_instrumented_millions": inst,
        "flops_rel_error": abs(inst - estimate) / max(estimate, 1e-12),
        "width_pruned_frac": float(
            np.concatenate(
                [np.logical_not(tr.width_active).reshape(-1) for tr in traces_all]
            ).mean()
        ),
    }
    if labels is not None and loops_by_label[1][1] > 0 and loops_by_label[0][1] > 0:
        report["mean_loops_easy"] = loops_by_label[0][0] / loops_by_label[0][1]
        report["mean_loops_hard"] = loops_by_label[1][0] / loops_by_label[1][1]
    return report


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    corpus, labels = _prepare_corpus(cfg)
    model = build_model(cfg, Rng(cfg.seed))
    if args.checkpoint:
        checkpoint_load(args.checkpoint, model)
    report = evaluate(cfg, model, corpus, labels)
    out = json.dumps(report, sort_keys=True)
    print(out)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(out + "\n")
    return 0


def cmd_account(args) -> int:
    outputs = []
    if args.scale:
        spec = {"354m": SPEC_354M, "720m": SPEC_720M}[args.scale.lower()]
        reports = budget_reports(spec)
        outputs.append((spec, reports))
    else:
        cfg = _load_cfg(args)
        base_cfg = dataclasses.replace(cfg, width_enabled=False, fixed_loops=1)
        base_m = model_param_count(base_cfg) / 1e6
        spec = ArchSpec(
            "config", layers=cfg.n_layers, d=cfg.d_model, d_hidden=cfg.d_hidden,
            vocab=cfg.vocab_size, base_params_millions=base_m,
            n_experts=max(cfg.n_experts, 1), top_k=cfg.top_k,
            d_expert=cfg.d_expert or 1, max_loops=cfg.max_loops,
        )
        reports = budget_reports(spec)
        # integer census cross-check: analytic additions equal a real build
        census = model_param_count(cfg)
        analytic = (
            model_param_count(base_cfg)
            + cfg.n_layers * cfg.d_model * (cfg.n_experts + cfg.max_loops)
        )
        print(
            json.dumps(
                {"census_params": census, "analytic_params": analytic,
                 "census_match": census == analytic},
                sort_keys=True,
            )
        )
        outputs.append((spec, reports))

    for spec, reports in outputs:
        print(render_table(spec, reports), end="")
        if args.out:
            with open(args.out, "w", encoding="utf-8") as fh:
                fh.write(render_csv(reports))
    return 0


def cmd_gen_data(args) -> int:
    labels_path = args.labels or args.out + ".labels"
    spec = CorpusSpec(size=args.size, seed=args.seed if args.seed is not None else 0)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    write_corpus(args.out, labels_path, spec)
    print(json.dumps({"corpus": args.out, "labels": labels_path, "bytes": spec.size},
                     sort_keys=True))
    return 0


def cmd_chart(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps, losses, mean_loops = [], [], None
    try:
        with open(args.metrics, "r", encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                steps.append(rec["step"])
                losses.append(rec["loss"])
                mean_loops = rec["mean_loops"]
    except OSError as e:
        raise DataError(f"cannot read metrics {args.metrics}: {e}") from None
    if not steps:
        raise DataError(f"metrics file {args.metrics} is empty")

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(steps, losses)
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax1.set_title("training loss")
    ax2.bar(range(len(mean_loops)), mean_loops)
    ax2.set_xlabel("layer")
    ax2.set_ylabel("mean predicted loops")
    ax2.set_title("loops per layer (final step)")
    fig.tight_layout()
    fig.savefig(args.out, format="svg")
    print(json.dumps({"chart": args.out}, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualffn")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the training loop")
    t.add_argument("--config", required=True)
    t.add_argument("--checkpoint", help="resume from this checkpoint")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="override out_dir")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="inference-mode evaluation report")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--seed", type=int)
    e.add_argument("--out", help="write the report here as well")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("account", help="parameter and FLOPs budget table")
    a.add_argument("--config")
    a.add_argument("--scale", choices=["354m", "720m"])
    a.add_argument("--seed", type=int)
    a.add_argument("--out", help="write CSV here")
    a.set_defaults(func=cmd_account)

    g = sub.add_parser("gen-data", help="generate the synthetic difficulty corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--labels")
    g.add_argument("--seed", type=int)
    g.add_argument("--size", type=int, default=262144)
    g.set_defaults(func=cmd_gen_data)

    c = sub.add_parser("chart", help="render loss and loops charts to SVG")
    c.add_argument("--metrics", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_chart)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "account" and not (args.scale or args.config):
        _emit_error("config", ValueError("account needs --config or --scale"))
        return 2
    try:
        return args.func(args)
    except ConfigError as e:
        _emit_error("config", e)
        return 2
    except DataError as e:
        _emit_error("data", e)
        return 3
    except NumericsError as e:
        _emit_error("numeric", e)
        return 4
    except CheckpointError as e:
        _emit_error("checkpoint", e)
        return 5
    except ContractError as e:
        _emit_error("contract", e)
        return 6


if __name__ == "__main__":
    sys.exit(main())
