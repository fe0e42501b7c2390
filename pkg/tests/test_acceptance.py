"""Acceptance suite: nine end-to-end properties, each reported as one PASS/FAIL line.

Run just this file with ``pytest tests/test_acceptance.py -v``; the lines are
repeated in the terminal summary.  ``python -m tests.test_acceptance`` runs
the same checks without pytest.
"""

import statistics
import time

import numpy as np
import pytest

from lora2.adapters import Lora2Adapter, Lora2Config, adapted_forward, delta_matrix, init_lora2, merge_into_base
from lora2.allocation import (
    SensitivityState,
    budget_at,
    ema_update,
    global_mask_update,
    importance_full,
    importance_simplified,
    skipped_fraction,
    stable_argsort,
    transformer_site_configs,
)
from lora2.autodiff import Tape, check_gradients, matmul
from lora2.checkpoint import MetricsWriter, load_checkpoint, save_checkpoint
from lora2.config import parse_config
from lora2.models import build_model, gen_planted_model_task, gen_planted_task
from lora2.orthogonality import OrthConfig, orth_loss, penalty_terms
from lora2.report import export_heatmap, heatmap_total, read_heatmap
from lora2.training import (
    AdapterConfig,
    AllocatorConfig,
    OptimizerConfig,
    OptimizerState,
    TrainConfig,
    loss_closure,
    optimizer_step,
    train,
)


def line(n, title, ok, seconds, limit, detail):
    status = "PASS" if ok else "FAIL"
    return f"{status} criterion {n} ({title}): {detail}; {seconds:.2f}s (limit {limit}s)"


# 1 ------------------------------------------------------------------------------


def criterion_1():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    nonzero = 0
    for _ in range(100):
        cfg = Lora2Config(
            int(rng.integers(1, 65)), int(rng.integers(1, 65)), int(rng.integers(1, 9)), int(rng.integers(1, 17)),
            float(rng.uniform(1e-3, 2.0)), int(rng.integers(0, 2**32)),
        )
        if np.any(delta_matrix(init_lora2(cfg)) != 0.0):
            nonzero += 1
    dt = time.perf_counter() - t0
    ok = nonzero == 0 and dt < 1.0
    return ok, line(1, "zero at init", ok, dt, 1, f"{nonzero}/100 fresh adapters with a nonzero increment")


# 2 ------------------------------------------------------------------------------


def criterion_2():
    t0 = time.perf_counter()
    worst, failed, checked = 0.0, 0, 0
    for seed in range(20):
        task = gen_planted_task(8, 8, 2, noise_std=0.1, seed=seed, n_train=16)
        rng = np.random.default_rng(seed)
        ad = init_lora2(Lora2Config(8, 8, 2, 3, init_std=0.5, seed=seed))
        ad.lam = rng.normal(size=3)
        fn, params = loss_closure(task.spec, {"L0.Wq": ad}, task.train, "mse", OrthConfig("all", 0.1))
        for rep in check_gradients(fn, params, step=1e-6, tolerance=1e-5):
            worst = max(worst, rep.max_rel_error)
            failed += len(rep.failures)
            checked += rep.n_checked
    dt = time.perf_counter() - t0
    ok = failed == 0 and dt < 30
    detail = f"{checked} entries over 20 seeds, {failed} outside 1e-5, worst relative error {worst:.2e}"
    return ok, line(2, "gradient correctness", ok, dt, 30, detail)


# 3 ------------------------------------------------------------------------------


def _random_sensitivity_instance(rng):
    n = int(rng.integers(2, 6))
    adapters = {}
    for i in range(n):
        din, dout = int(rng.integers(2, 13)), int(rng.integers(2, 13))
        k, r = int(rng.integers(1, 5)), int(rng.integers(1, 7))
        adapters[f"L{i}.Wq"] = init_lora2(Lora2Config(din, dout, k, r, seed=int(rng.integers(0, 2**32))))
    state = SensitivityState.for_adapters(adapters, full=True)
    # each adapter gets its own gradient scale so outer sums differ between adapters
    scale = {s: float(rng.lognormal(0.0, 1.0)) for s in adapters}
    for _ in range(int(rng.integers(1, 6))):
        raw = {key: scale[key.rpartition(".")[0]] * rng.exponential(size=v.shape) for key, v in state.ema_sens.items()}
        state = ema_update(state, raw)
    return adapters, state


def criterion_3():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    argsort_bad = local_mask_bad = global_mask_bad = 0
    for _ in range(1000):
        adapters, state = _random_sensitivity_instance(rng)
        sites = list(adapters)
        simple = [importance_simplified(adapters[s], state, s) for s in sites]
        full = [importance_full(adapters[s], state, s) for s in sites]
        for a, b in zip(simple, full):
            oa, ob = stable_argsort(a), stable_argsort(b)
            if not np.array_equal(oa, ob):
                argsort_bad += 1
            # masks induced by the per-adapter ranking, for every retained count
            for m in range(1, len(a) + 1):
                if not np.array_equal(np.isin(np.arange(len(a)), oa[:m]), np.isin(np.arange(len(b)), ob[:m])):
                    local_mask_bad += 1
                    break
        budget = int(rng.integers(1, sum(len(s) for s in simple) + 1))
        by_simple = [adapters[s].copy() for s in sites]
        by_full = [adapters[s].copy() for s in sites]
        global_mask_update(by_simple, simple, budget)
        global_mask_update(by_full, full, budget)
        if any(not np.array_equal(x.mask, y.mask) for x, y in zip(by_simple, by_full)):
            global_mask_bad += 1
    dt = time.perf_counter() - t0
    ok = argsort_bad == 0 and local_mask_bad == 0 and global_mask_bad == 0 and dt < 30
    detail = (
        f"per-adapter argsort mismatches {argsort_bad}, per-adapter induced-mask mismatches {local_mask_bad}, "
        f"cross-adapter global-mask mismatches {global_mask_bad}/1000"
    )
    return ok, line(3, "argsort invariance", ok, dt, 30, detail)


# 4 ------------------------------------------------------------------------------


def criterion_4():
    t0 = time.perf_counter()
    mix = skipped_fraction(transformer_site_configs(n_layers=12, d_model=768, d_ffn=3072, k=8, r=8))
    single = skipped_fraction([Lora2Config(768, 768, 8, 8)])
    dt = time.perf_counter() - t0
    ok = 0.985 <= mix <= 0.995 and abs(single - 12288 / 12424) <= 1e-12 and dt < 1
    detail = f"layer mix {mix:.6f} in [0.985, 0.995]; single 768x768 {single:.12f} vs 12288/12424"
    return ok, line(4, "sensitivity-computation reduction", ok, dt, 1, detail)


# 5 ------------------------------------------------------------------------------


def criterion_5():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(50):
        din, dout = int(rng.integers(1, 33)), int(rng.integers(1, 33))
        k, r = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        ad = Lora2Adapter(
            rng.normal(size=(din, k)), rng.normal(size=(k, r)), rng.normal(size=r),
            rng.normal(size=(r, k)), rng.normal(size=(k, dout)), rng.random(r) < 0.7,
        )
        ad.lam[~ad.mask] = 0.0
        w0 = rng.normal(size=(din, dout))
        x = rng.normal(size=(100, din))
        diff = np.abs(adapted_forward(ad, w0, x) - matmul(x, merge_into_base(ad, w0)))
        worst = max(worst, float(diff.max()))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-10 and dt < 10
    return ok, line(5, "merge equivalence", ok, dt, 10, f"max |adapted - merged| = {worst:.2e} over 50x100 probes")


# 6 ------------------------------------------------------------------------------


def criterion_6():
    t0 = time.perf_counter()
    hits = []
    for seed in range(10):
        ad = init_lora2(Lora2Config(16, 16, 4, 4, seed=seed))
        params = ad.params()
        opt = OptimizerState(OptimizerConfig(learning_rate=0.1))
        hit = None
        for step in range(1, 2001):
            tape = Tape()
            leaves = tape.bind(params)
            grads = tape.backward(orth_loss(ad, "all", 1.0, leaves))
            params = optimizer_step(opt, params, grads)
            if max(penalty_terms(ad.with_params(params), "all").values()) < 1e-3:
                hit = step
                break
        hits.append(hit)
    dt = time.perf_counter() - t0
    reached = [h for h in hits if h is not None]
    ok = len(reached) == 10 and dt < 60
    detail = f"{len(reached)}/10 seeds with all six terms < 1e-3; steps needed {hits}"
    return ok, line(6, "orthogonality efficacy", ok, dt, 60, detail)


# 7 ------------------------------------------------------------------------------

PLANTED_STEPS = 3000


def _planted_run(seed, kind, k, r):
    task = gen_planted_task(32, 32, 2, noise_std=0.0, seed=seed)
    T = PLANTED_STEPS
    cfg = TrainConfig(
        total_steps=T,
        batch_size=32,
        seed=seed,
        log_every=T,
        eval_every=T,
        adapter=AdapterConfig(kind, k, r),
        allocator=AllocatorConfig(b_target=2 if kind == "lora2" else None, t_warmup=T // 10, t_final=int(0.6 * T)),
        optimizer=OptimizerConfig(learning_rate=1e-2),
    )
    res = train(cfg, task.spec, task)
    d_star = task.delta_star["L0.Wq"]
    rel = np.linalg.norm(delta_matrix(res.adapters["L0.Wq"]) - d_star) / np.linalg.norm(d_star)
    return float(rel), res.metrics[-1].eval_metric, res.final_ranks["L0.Wq"]


def criterion_7():
    t0 = time.perf_counter()
    rels, ranks, lora2_eval, lora_eval = [], [], [], []
    for seed in range(10):
        rel, _, rank = _planted_run(seed, "lora2", 4, 4)
        rels.append(rel)
        ranks.append(rank)
        # matched size: k = 2 for LoRA-squared against rank 2 for LoRA
        lora2_eval.append(_planted_run(seed, "lora2", 2, 4)[1])
        lora_eval.append(_planted_run(seed, "lora", 2, 2)[1])
    dt = time.perf_counter() - t0
    recovered = sum(r < 1e-2 for r in rels)
    med2, med1 = statistics.median(lora2_eval), statistics.median(lora_eval)
    ok = recovered >= 8 and med2 <= med1 and dt < 300
    detail = (
        f"{recovered}/10 seeds with relative error < 1e-2 (max {max(rels):.4f}, final ranks {sorted(set(ranks))}); "
        f"median eval mse matched LoRA-squared {med2:.2e} vs LoRA r=2 {med1:.2e}"
    )
    return ok, line(7, "planted recovery", ok, dt, 300, detail)


# 8 ------------------------------------------------------------------------------


def criterion_8():
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    violations, events, runs = [], 0, 0
    for i in range(20):
        kinds = list(rng.choice(["Wq", "Wk", "Wv", "f1", "f2"], size=int(rng.integers(2, 6)), replace=False))
        spec = build_model(int(rng.integers(1, 3)), int(rng.integers(3, 7)), int(rng.integers(3, 9)), kinds, seed=i)
        task = gen_planted_model_task(spec, {spec.names[0]: 1}, seed=i, n_train=48, n_eval=16)
        r = int(rng.integers(1, 5))
        b_init = r * len(spec.attachment)
        t_warmup = int(rng.integers(0, 20))
        t_final = t_warmup + int(rng.integers(1, 60))
        cfg = TrainConfig(
            total_steps=t_final + int(rng.integers(0, 20)),
            batch_size=16,
            seed=i,
            log_every=1,
            adapter=AdapterConfig("lora2", int(rng.integers(1, 4)), r),
            allocator=AllocatorConfig(
                b_target=int(rng.integers(1, b_init + 1)), t_warmup=t_warmup, t_final=t_final,
                prune_every=int(rng.integers(1, 11)),
            ),
            optimizer=OptimizerConfig(learning_rate=0.01),
        )
        res = train(cfg, spec, task)
        sched = res.schedule
        runs += 1
        budgets = [budget_at(sched, t) for t in range(cfg.total_steps + 5)]
        if any(b2 > b1 for b1, b2 in zip(budgets, budgets[1:])):
            violations.append(f"run {i}: schedule increases")
        for m in res.metrics:
            if m.pruned:
                events += 1
                if not m.total_rank == m.budget == budget_at(sched, m.step):
                    violations.append(f"run {i} step {m.step}: ranks {m.total_rank} vs budget {budget_at(sched, m.step)}")
            if any(v > r for v in m.ranks.values()):
                violations.append(f"run {i} step {m.step}: a site exceeds r_init")
        if sum(res.final_ranks.values()) != sched.b_target:
            violations.append(f"run {i}: final ranks {sum(res.final_ranks.values())} vs target {sched.b_target}")
    dt = time.perf_counter() - t0
    ok = not violations and dt < 120
    detail = f"{runs} runs, {events} prune events, {len(violations)} violations" + (
        f" (first: {violations[0]})" if violations else ""
    )
    return ok, line(8, "budget conformance", ok, dt, 120, detail)


# 9 ------------------------------------------------------------------------------

RUN_CONFIG = """
[model]
n_layers = 2
dim = 8
ffn_dim = 12
kinds = ["Wq", "Wk", "Wv", "f1", "f2"]
[task]
planted_sites = ["L1.Wv"]
rho = 2
n_train = 128
n_eval = 32
[adapter]
k = 2
r_init = 3
[allocator]
b_target = 7
t_warmup = 20
t_final = 120
[train]
total_steps = 150
batch_size = 16
learning_rate = 0.01
seed = 11
"""


def criterion_9(tmp_path):
    t0 = time.perf_counter()
    cfg = parse_config(RUN_CONFIG)
    spec = cfg.build_spec()
    task = cfg.build_task(spec)
    results = []
    for name in ("a", "b"):
        run = tmp_path / name
        with MetricsWriter(run / "metrics.jsonl") as sink:
            results.append(train(cfg.train_config(), spec, task, on_record=sink))
    same_stream = (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    res = results[0]
    ck = tmp_path / "a" / "checkpoint.lora2"
    save_checkpoint(ck, res.adapters, res.metrics[-1].step, cfg)
    back, _, _ = load_checkpoint(ck, cfg)
    lossless = all(
        back[s].params()[f].tobytes() == v.tobytes() and np.array_equal(back[s].mask, ad.mask)
        for s, ad in res.adapters.items()
        for f, v in ad.params().items()
    )
    cells = heatmap_total(read_heatmap(export_heatmap(tmp_path / "a")))
    dt = time.perf_counter() - t0
    ok = same_stream and lossless and cells == cfg.allocator.b_target and dt < 60
    detail = (
        f"metrics streams identical: {same_stream}; checkpoint bitwise lossless: {lossless}; "
        f"heatmap sum {cells} vs final budget {cfg.allocator.b_target}"
    )
    return ok, line(9, "determinism and persistence", ok, dt, 60, detail)


# -- pytest entry points -------------------------------------------------------------


def _check(result, report):
    ok, text = result
    report(text)
    assert ok, text


def test_criterion_1_zero_at_init(report):
    _check(criterion_1(), report)


def test_criterion_2_gradient_correctness(report):
    _check(criterion_2(), report)


def test_criterion_3_argsort_invariance(report):
    _check(criterion_3(), report)


def test_criterion_4_sensitivity_reduction(report):
    _check(criterion_4(), report)


def test_criterion_5_merge_equivalence(report):
    _check(criterion_5(), report)


def test_criterion_6_orthogonality_efficacy(report):
    _check(criterion_6(), report)


@pytest.mark.slow
def test_criterion_7_planted_recovery(report):
    _check(criterion_7(), report)


def test_criterion_8_budget_conformance(report):
    _check(criterion_8(), report)


def test_criterion_9_determinism_and_persistence(report, tmp_path):
    _check(criterion_9(tmp_path), report)


if __name__ == "__main__":
    import tempfile
    from pathlib import Path

    checks = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7, criterion_8]
    for fn in checks:
        print(fn()[1], flush=True)
    with tempfile.TemporaryDirectory() as d:
        print(criterion_9(Path(d))[1])
