"""Acceptance suite: one test per criterion, one printed verdict line each.

The desk-scale training run (criterion 7) is expensive and shared by
criteria 5-7 through a session fixture; everything else is self-contained.
Run with `pytest tests/test_acceptance.py -v`.
"""

import json
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy import stats as scipy_stats

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
)
from dualffn.config import RunConfig, load_config
from dualffn.data import eval_batches, load_corpus
from dualffn.depth import (
    LoopPredictorWeights,
    TemperatureSchedule,
    depth_forward_train,
    predict_loops,
    recurse,
    temperature_at,
)
from dualffn.fusion import build_model, layer_forward_infer, layer_forward_train, model_forward
from dualffn.nn import AttentionWeights, FfnWeights, attention_block, ffn_forward, lm_loss
from dualffn.rng import Rng
from dualffn.tensor import (
    Tape,
    Tensor,
    backward,
    bmm,
    gather_last,
    gather_rows,
    log_softmax,
    matmul,
    rms_norm,
    silu,
    slice_axis,
    softmax,
    tmean,
    tsum,
)
from dualffn.width import build_expert_views, compute_stride, expert_forward, views_disjoint

from helpers import check_grads

DESK_STEPS = 2000

DESK_CFG = """
d_model = 64
n_heads = 4
n_layers = 2
d_hidden = 256
n_experts = 4
top_k = 2
d_expert = 64
max_loops = 4
seq_len = 64
batch_size = 8
total_steps = {steps}
peak_lr = 1e-3
aux_coef = 1e-5
checkpoint_every = {ckpt_every}
seed = 42
corpus_path = {corpus}
labels_path = {labels}
out_dir = {out}
"""


def announce(capsys, n, desc, ok):
    with capsys.disabled():
        print(f"\n[acceptance {n}] {desc}: {'PASS' if ok else 'FAIL'}")
    assert ok, f"acceptance criterion {n} failed: {desc}"


def run_cli(*argv):
    return subprocess.run(
        [sys.executable, "-m", "dualffn.cli", *argv], capture_output=True, text=True
    )


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Train the desk-scale model once; criteria 5, 6, and 7 read from it."""
    root = tmp_path_factory.mktemp("desk")
    corpus = root / "corpus.bin"
    labels = root / "corpus.bin.labels"
    r = run_cli("gen-data", "--out", str(corpus), "--seed", "42", "--size", "262144")
    assert r.returncode == 0, r.stderr
    cfg_path = root / "desk.cfg"
    out = root / "out"
    cfg_path.write_text(
        DESK_CFG.format(steps=DESK_STEPS, ckpt_every=1000, corpus=corpus,
                        labels=labels, out=out)
    )
    r = run_cli("train", "--config", str(cfg_path))
    assert r.returncode == 0, r.stderr
    return {
        "cfg_path": cfg_path,
        "cfg": load_config(str(cfg_path)),
        "out": out,
        "metrics": out / "metrics.jsonl",
        "checkpoint": out / "ckpt_final.bin",
        "corpus": corpus,
        "labels": labels,
    }


@pytest.fixture(scope="session")
def desk_eval(desk_run):
    """One infer-mode pass over the eval split of the trained desk model."""
    cfg = desk_run["cfg"]
    corpus, labels = load_corpus(str(desk_run["corpus"]), str(desk_run["labels"]))
    model = build_model(cfg, Rng(cfg.seed))
    from dualffn.trainer import checkpoint_load

    checkpoint_load(str(desk_run["checkpoint"]), model)
    traces_all = []
    pairs_label = []
    pairs_loops = []
    for batch, lab in eval_batches(corpus, cfg, labels):
        _, traces, _ = model_forward(batch, model, "infer")
        traces_all.extend(traces)
        mean_loops = np.mean([tr.hard for tr in traces], axis=0)
        mask = lab >= 0
        pairs_label.append(lab[mask])
        pairs_loops.append(mean_loops[mask])
    return {
        "traces": traces_all,
        "labels": np.concatenate(pairs_label),
        "loops": np.concatenate(pairs_loops),
        "cfg": cfg,
    }


class TestCriterion1:
    def test_table2_reproduction(self, capsys):
        t0 = time.perf_counter()
        published = {
            "354M": {
                "base": (354.71, 377.49),
                "moe": (543.59, 471.86),
                "2-loop": (354.71, 754.98),
                "4-loop": (354.71, 1509.96),
                "6-loop": (354.71, 2264.96),
                "dualffn": (354.90, None),
            },
            "720M": {
                "base": (720.81, 849.35),
                "moe": (1145.69, 1061.69),
                "2-loop": (720.81, 1698.70),
                "4-loop": (720.81, 3397.40),
                "6-loop": (720.81, 5096.10),
                "dualffn": (721.09, None),
            },
        }
        ok = True
        detail = []
        for spec in (SPEC_354M, SPEC_720M):
            for rep in budget_reports(spec):
                want_params, want_flops = published[spec.name][rep.variant]
                if abs(rep.params_millions - want_params) >= 0.05:
                    ok = False
                    detail.append(f"{spec.name}/{rep.variant} params {rep.params_millions}")
                if want_flops is not None and abs(rep.ffn_flops_millions - want_flops) >= 0.05:
                    ok = False
                    detail.append(f"{spec.name}/{rep.variant} flops {rep.ffn_flops_millions}")
        elapsed = time.perf_counter() - t0
        ok = ok and elapsed < 1.0
        announce(capsys, 1, f"table-2 cells within 0.05M in {elapsed:.3f}s {detail}", ok)


class TestCriterion2:
    def test_slicing_equivalence_200_configs(self, capsys):
        t0 = time.perf_counter()
        gen = np.random.default_rng(2024)
        ok = True
        for trial in range(200):
            d = int(gen.integers(2, 17))
            dh = int(gen.integers(4, 33))
            n = int(gen.integers(1, 9))
            de = int(gen.integers(1, dh))
            views = build_expert_views(dh, de, n)
            stride = compute_stride(dh, de, n)
            if n > 1 and de <= stride and not views_disjoint(views):
                ok = False
                break
            w = FfnWeights(
                Tensor(gen.standard_normal((d, dh))),
                Tensor(gen.standard_normal((d, dh))),
                Tensor(gen.standard_normal((dh, d))),
                Tensor(gen.standard_normal(d)),
            )
            h = Tensor(gen.standard_normal((2, 3, d)))
            view = views[int(gen.integers(0, n))]
            via_views = expert_forward(h, w, view).data
            sliced = FfnWeights(
                Tensor(np.ascontiguousarray(w.w_gate.data[:, view.start:view.stop])),
                Tensor(np.ascontiguousarray(w.w_up.data[:, view.start:view.stop])),
                Tensor(np.ascontiguousarray(w.w_down.data[view.start:view.stop, :])),
                w.norm_gain,
            )
            materialized = ffn_forward(h, sliced).data
            if not np.array_equal(via_views, materialized):
                ok = False
                break
        elapsed = time.perf_counter() - t0
        ok = ok and elapsed < 10.0
        announce(capsys, 2, f"view/materialized bit-identical x200 in {elapsed:.2f}s", ok)


class TestCriterion3:
    def test_gradient_fidelity(self, capsys):
        t0 = time.perf_counter()
        gen = np.random.default_rng(7)
        worst = 0.0

        def track(err):
            nonlocal worst
            worst = max(worst, err)

        # primitives
        a, b = Tensor(gen.standard_normal((3, 4))), Tensor(gen.standard_normal((4, 2)))
        track(check_grads(lambda: tsum(matmul(a, b)), [a, b], tol=1e-4))
        x = Tensor(gen.standard_normal((2, 3, 5)))
        wv = Tensor(gen.standard_normal(5))
        track(check_grads(lambda: tsum(softmax(x, -1) * wv), [x, wv], tol=1e-4))
        track(check_grads(lambda: tsum(log_softmax(x, -1) * wv), [x, wv], tol=1e-4))
        gn = Tensor(gen.standard_normal(5))
        track(check_grads(lambda: tsum(rms_norm(x, gn) * wv), [x, gn], tol=1e-4))
        track(check_grads(lambda: tsum(silu(x)), [x], tol=1e-4))
        p, q = Tensor(gen.standard_normal((2, 3, 4))), Tensor(gen.standard_normal((2, 4, 3)))
        track(check_grads(lambda: tsum(bmm(p, q)), [p, q], tol=1e-4))
        t5 = Tensor(gen.standard_normal((4, 6)))
        idx = np.array([[1, 3], [0, 5], [2, 2], [4, 0]])
        track(check_grads(lambda: tsum(gather_last(t5, idx)), [t5], tol=1e-4))
        tab = Tensor(gen.standard_normal((6, 3)))
        ids = np.array([[0, 2], [5, 5]])
        track(check_grads(lambda: tsum(gather_rows(tab, ids)), [tab], tol=1e-4))
        track(check_grads(lambda: tsum(slice_axis(x, 2, 1, 4)), [x], tol=1e-4))
        track(check_grads(lambda: tmean(x * x), [x], tol=1e-4))

        # attention + ffn + loss blocks
        d = 4
        xa = Tensor(gen.standard_normal((1, 3, d)))
        attn = AttentionWeights(
            *(Tensor(gen.standard_normal((d, d)) * 0.4) for _ in range(4)),
            Tensor(np.ones(d)), 2,
        )
        track(check_grads(lambda: tsum(attention_block(xa, attn)),
                          [xa, attn.w_q, attn.w_k, attn.w_v, attn.w_o], tol=1e-4))
        logits = Tensor(gen.standard_normal((2, 4, 5)))
        targets = gen.integers(0, 5, size=(2, 4))
        track(check_grads(lambda: lm_loss(logits, targets), [logits], tol=1e-4))

        # full soft-mode layer at the stated geometry
        cfg = RunConfig(
            vocab_size=8, d_model=4, n_heads=2, n_layers=1, d_hidden=8,
            n_experts=2, top_k=1, d_expert=4, max_loops=2, soft_mode=True,
            seq_len=4, batch_size=1, total_steps=4,
        )
        model = build_model(cfg, Rng(3))
        layer = model.layers[0]
        xs = Tensor(gen.standard_normal((1, 3, 4)))
        params = [xs, layer.ffn.w_gate, layer.ffn.w_up, layer.ffn.w_down,
                  layer.ffn.norm_gain, layer.router.w_g, layer.loop_head.w_loop,
                  layer.attention.w_q, layer.attention.w_k, layer.attention.w_v,
                  layer.attention.w_o, layer.attention.norm_gain]

        def build():
            y, _, _ = layer_forward_train(xs, layer, cfg, tau=1.0, gen=Rng(5).stream("g"))
            return tsum(y)

        track(check_grads(build, params, tol=1e-4))
        elapsed = time.perf_counter() - t0
        ok = worst < 1e-4 and elapsed < 60.0
        announce(capsys, 3,
                 f"finite differences: worst {worst:.2e} in {elapsed:.1f}s", ok)


class TestCriterion4:
    def test_ste_contract_100_instances(self, capsys):
        gen = np.random.default_rng(99)
        fwd_ok = True
        grad_worst = 0.0
        for trial in range(100):
            d, dh = 4, 8
            l_max = int(gen.integers(2, 5))
            w = FfnWeights(
                Tensor(gen.standard_normal((d, dh)) * 0.4, requires_grad=True),
                Tensor(gen.standard_normal((d, dh)) * 0.4, requires_grad=True),
                Tensor(gen.standard_normal((dh, d)) * 0.4, requires_grad=True),
                Tensor(np.ones(d), requires_grad=True),
            )
            h0 = Tensor(gen.standard_normal((2, 3, d)), requires_grad=True)
            wl = LoopPredictorWeights(
                Tensor(gen.standard_normal((d, l_max)), requires_grad=True)
            )
            seed = int(gen.integers(0, 2**31))
            params = [h0, wl.w_loop, w.w_gate, w.w_up, w.w_down, w.norm_gain]

            def run(soft):
                for t in params:
                    t.grad = None
                with Tape():
                    dec = predict_loops(h0, wl, 0.7, Rng(seed).stream("g"), "train")
                    out = depth_forward_train(h0, w, dec, soft=soft)
                    gmap = backward(tsum(out))
                return dec, out.data.copy(), [gmap[t] for t in params]

            dec, hard_fwd, hard_grads = run(soft=False)
            _, _, soft_grads = run(soft=True)

            states = recurse(h0, w, l_max)
            stacked = np.stack([s.data for s in states], axis=-1)
            picked = np.take_along_axis(
                stacked, (dec.hard - 1)[..., None, None], axis=-1
            )[..., 0]
            if not np.array_equal(hard_fwd, picked):
                fwd_ok = False
                break
            for gh, gs in zip(hard_grads, soft_grads):
                grad_worst = max(grad_worst, float(np.abs(gh - gs).max()))
        ok = fwd_ok and grad_worst < 1e-12
        announce(capsys, 4,
                 f"STE forward bit-exact, grad gap {grad_worst:.2e}", ok)


class TestCriterion5:
    def test_lambda_in_unit_interval_all_steps(self, capsys, desk_run):
        lam_min, lam_max = np.inf, -np.inf
        n = 0
        with open(desk_run["metrics"], "r", encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                lam_min = min(lam_min, rec["lambda_min"])
                lam_max = max(lam_max, rec["lambda_max"])
                n += 1
        ok = n == DESK_STEPS and lam_min >= 0.0 and lam_max < 1.0
        announce(capsys, 5,
                 f"lambda within [0,1) over {n} steps: [{lam_min:.3g}, {lam_max:.3g}]; "
                 "degenerate cases below", ok)

    def test_forced_max_loops_and_pruning_bits(self, capsys):
        cfg = RunConfig(
            vocab_size=16, d_model=8, n_heads=2, n_layers=1, d_hidden=16,
            n_experts=4, top_k=2, d_expert=4, max_loops=4, seq_len=8,
            batch_size=2, total_steps=4,
        )
        model = build_model(cfg, Rng(17))
        layer = model.layers[0]
        for wt in (layer.attention.w_q, layer.attention.w_k,
                   layer.attention.w_v, layer.attention.w_o):
            wt.data[:] = 0.0
        layer.loop_head.w_loop.data[:] = 0.0
        layer.loop_head.w_loop.data[:, cfg.max_loops - 1] = 1e4
        gen = np.random.default_rng(21)
        x = Tensor(np.abs(gen.standard_normal((2, 5, 8))) + 0.1)

        # training: forced E[L] = L_max collapses the fusion to the depth path
        y, trace, _ = layer_forward_train(x, layer, cfg, tau=cfg.tau_min, gen=None)
        from dualffn.depth import depth_forward_train as dft

        h = attention_block(x, layer.attention)
        dec = predict_loops(h, layer.loop_head, cfg.tau_min, None, "train")
        y_depth = dft(h, layer.ffn, dec)
        train_ok = (trace.lam == 0.0).all() and np.array_equal(y.data, y_depth.data)

        # inference: pruning at lambda = 0 changes nothing, evaluates nothing
        y_pruned, tr_p = layer_forward_infer(x, layer, cfg, lam_threshold=0.0)
        y_ref, _ = layer_forward_infer(x, layer, cfg, lam_threshold=-1.0)
        infer_ok = (
            (tr_p.lam == 0.0).all()
            and tr_p.expert_eval_counts.sum() == 0
            and np.array_equal(y_pruned.data, y_ref.data)
        )
        announce(capsys, 5, "forced-max fusion and zero-lambda pruning bit-exact",
                 train_ok and infer_ok)


class TestCriterion6:
    def test_early_exit_economy_and_flops_match(self, capsys, desk_eval):
        traces = desk_eval["traces"]
        cfg = desk_eval["cfg"]
        counts_ok = all(
            tr.loop_counts is not None and np.array_equal(tr.loop_counts, tr.hard)
            for tr in traces
        )
        n_mean, p_frac = collect_runtime_stats(traces)
        spec = ArchSpec(
            "desk", layers=cfg.n_layers, d=cfg.d_model, d_hidden=cfg.d_hidden,
            vocab=cfg.vocab_size, base_params_millions=1.0,
            n_experts=cfg.n_experts, top_k=cfg.top_k, d_expert=cfg.d_expert,
            max_loops=cfg.max_loops,
        )
        estimate = dualpath_runtime_flops(
            ffn_flops_dense(spec), ffn_flops_moe(spec), n_mean, p_frac
        )
        inst = instrumented_flops_millions(traces, cfg)
        rel = abs(inst - estimate) / estimate
        ok = counts_ok and rel < 1e-3
        announce(capsys, 6,
                 f"per-token applications == predicted loops; formula vs counter "
                 f"rel err {rel:.2e} (n_mean {n_mean:.3f}, p {p_frac:.3f})", ok)


class TestCriterion7:
    def test_desk_training_progress(self, capsys, desk_run, desk_eval):
        records = [json.loads(l) for l in open(desk_run["metrics"], encoding="utf-8")]
        by_step = {r["step"]: r for r in records}
        step10 = by_step[10]["loss"]
        final = records[-1]["loss"]
        improve = (step10 - final) / step10
        a_ok = improve >= 0.20

        rho, pval = scipy_stats.spearmanr(desk_eval["labels"], desk_eval["loops"])
        b_ok = rho > 0

        load = np.concatenate([tr.assign_fractions for tr in desk_eval["traces"]])
        per_expert = np.zeros(desk_run["cfg"].n_experts)
        n_tr = 0
        for tr in desk_eval["traces"]:
            per_expert += tr.assign_fractions
            n_tr += 1
        per_expert /= n_tr
        floor = 1.0 / (4 * desk_run["cfg"].n_experts)
        c_ok = per_expert.min() >= floor

        announce(
            capsys, 7,
            f"(a) loss {step10:.3f}->{final:.3f} ({improve:.0%}); "
            f"(b) spearman {rho:.3f} (p={pval:.2g}); "
            f"(c) min load {per_expert.min():.3f} vs floor {floor:.3f}",
            a_ok and b_ok and c_ok,
        )


class TestCriterion8:
    def test_determinism_and_resume(self, capsys, tmp_path):
        corpus = tmp_path / "c.bin"
        r = run_cli("gen-data", "--out", str(corpus), "--seed", "9", "--size", "65536")
        assert r.returncode == 0, r.stderr
        cfg_text = DESK_CFG.format(
            steps=120, ckpt_every=60, corpus=corpus,
            labels=str(corpus) + ".labels", out=tmp_path / "a",
        )
        cfg_a = tmp_path / "a.cfg"
        cfg_a.write_text(cfg_text)
        assert run_cli("train", "--config", str(cfg_a)).returncode == 0

        assert run_cli("train", "--config", str(cfg_a), "--out",
                       str(tmp_path / "b")).returncode == 0
        same = (tmp_path / "a" / "metrics.jsonl").read_bytes() == (
            tmp_path / "b" / "metrics.jsonl"
        ).read_bytes()

        assert run_cli(
            "train", "--config", str(cfg_a), "--out", str(tmp_path / "c"),
            "--checkpoint", str(tmp_path / "a" / "ckpt_60.bin"),
        ).returncode == 0
        full_lines = (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()
        cont_lines = (tmp_path / "c" / "metrics.jsonl").read_text().splitlines()
        resume_ok = cont_lines == full_lines[60:]
        announce(capsys, 8,
                 f"byte-identical metrics ({same}); resume tail matches ({resume_ok})",
                 same and resume_ok)


class TestCriterion9:
    def test_temperature_schedule_endpoints(self, capsys):
        sched = TemperatureSchedule(tau_init=5.0, tau_min=0.1, horizon_frac=0.8)
        total = 1000
        start_ok = temperature_at(sched, 0, total) == 5.0
        end_ok = temperature_at(sched, 800, total) == 0.1
        taus = [temperature_at(sched, s, total) for s in range(total + 1)]
        mono_ok = all(a >= b for a, b in zip(taus, taus[1:]))
        floor_ok = all(t >= 0.1 for t in taus)
        announce(capsys, 9,
                 f"tau(0)={taus[0]}, tau(0.8T)={taus[800]}, monotone={mono_ok}",
                 start_ok and end_ok and mono_ok and floor_ok)
