"""One test per acceptance criterion, each printing a single PASS/FAIL line."""
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import ACCEPTANCE
from inflora import checks
from inflora.checkpoint import load_checkpoint, save_checkpoint
from inflora.cli import main
from inflora.continual import Learner, train_task
from inflora.data import gen_task_sequence
from inflora.experiment import ExperimentConfig, pretrained_backbone, run_experiment
from inflora.gpmem import MemoryMode
from inflora.linalg import orthonormality_error
from inflora.metrics import AccuracyMatrix, acc_metrics, param_count

SEEDS = (1, 2, 3)


def record(n, passed, detail):
    line = f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)
    return passed


def default_run(epsilon=None, seed=1):
    cfg = ExperimentConfig()
    train = cfg.train if epsilon is None else replace(cfg.train, epsilon=epsilon)
    seq = gen_task_sequence(replace(cfg.data, seed=seed))
    net = pretrained_backbone(cfg, seq, seed)
    learner = Learner(net=net, cfg=replace(train, seed=seed), n_tasks=len(seq))
    for t, task in enumerate(seq.tasks, start=1):
        train_task(learner, task, t)
    return learner


@pytest.fixture(scope="module")
def benchmark():
    cfg = ExperimentConfig(seeds=SEEDS)
    cfg = replace(cfg, alignment=replace(cfg.alignment, enabled=True))
    start = time.perf_counter()
    report = run_experiment(cfg)
    return report, time.perf_counter() - start


def test_criterion_01_branch_full_weight_equivalence():
    start = time.perf_counter()
    res = checks.check_branch_equivalence(trials=100)
    secs = time.perf_counter() - start
    ok = res.passed and secs < 10.0
    assert record(1, ok, f"max relative deviation {res.observed:.2e} <= 1e-10 over 100 trials, {secs:.1f}s < 10s")


def test_criterion_02_gradient_span():
    res = checks.check_gradient_span(trials=50)
    assert record(2, res.passed, f"max row residual {res.observed:.2e} <= 1e-8 over 50 trials")


def test_criterion_03_interference_orthogonality():
    exact = default_run(epsilon=1.0)
    worst = checks.old_task_orthogonality(exact)
    live = sum(
        1 for rep in exact.reports[1:] for d in rep.increments.values() if np.linalg.norm(d) > 0.0
    )
    # Exact memory exhausts the input space after task 1 on this benchmark, so
    # the same property is also measured at the default epsilon where later
    # tasks do train their branches.
    tuned = default_run()
    worst_tuned = checks.old_task_orthogonality(tuned)
    live_tuned = sum(1 for rep in tuned.reports[1:] for d in rep.increments.values() if np.linalg.norm(d) > 0.0)
    ok = worst <= 1e-6 and worst_tuned <= 1e-6 and live_tuned > 0
    assert record(
        3,
        ok,
        f"eps=1.0: worst ratio {worst:.2e} <= 1e-6 ({live} trained layer-tasks after t=1); "
        f"default eps: {worst_tuned:.2e} ({live_tuned} trained layer-tasks)",
    )


def test_criterion_04_dualgpm_structure():
    synthetic = checks.check_memory_structure()
    learner = default_run()
    ortho, violations = 0.0, 0
    prev = {i: m for i, m in learner.reports[0].memories_before.items()}
    for rep in learner.reports[1:] + [None]:
        current = learner.memories if rep is None else rep.memories_before
        for i, mem in current.items():
            old = prev[i]
            ortho = max(ortho, orthonormality_error(mem.basis))
            if mem.dim_grad < old.dim_grad or mem.dim_complement > old.dim_complement:
                violations += 1
            if mem.mode is MemoryMode.GRAD and mem.dim_grad > mem.dim_complement:
                violations += 1
            if old.mode is MemoryMode.GRAD and mem.mode is MemoryMode.COMPLEMENT:
                if mem.dim_grad <= mem.dim_complement or mem.size != min(mem.dim_grad, mem.dim_complement):
                    violations += 1
        prev = dict(current)
    ok = synthetic.passed and ortho <= 1e-8 and violations == 0
    assert record(
        4,
        ok,
        f"orthonormality {max(ortho, synthetic.observed):.2e} <= 1e-8; "
        f"monotone dims / switch rule / stored size violations: {violations}",
    )


def test_criterion_05_svd_oracle():
    eig, _, rec = checks.check_svd_oracle(trials=200)
    ok = eig.passed and rec.passed
    assert record(5, ok, f"max |s - sqrt(eig)| {eig.observed:.2e} <= 1e-8; reconstruction {rec.observed:.2e} <= 1e-10")


def test_criterion_06_zero_init_and_merge():
    init, merge, count = checks.check_zero_init_merge()
    learner = default_run()
    net = learner.net
    dims = [(l.d_in, l.d_out) for l in net.layers]
    r = learner.cfg.rank
    first = learner.reports[0]
    count_ok = count.passed and first.adapter_params == param_count(dims, r, net.adapted_indices())
    ok = init.passed and merge.passed and count_ok
    assert record(
        6,
        ok,
        f"zero-init {init.observed:.1e} <= 1e-12; merge {merge.observed:.1e} <= 1e-10; "
        f"params {first.adapter_params} == (d_I+d_O)r sum {param_count(dims, r, net.adapted_indices())}",
    )


def test_criterion_07_ablation_ordering(benchmark):
    report, secs = benchmark
    mean = {v: float(np.mean(report.averaged(v))) for v in ("inflora", "mperp_only", "random_b", "nt_only", "seq_lora")}
    gaps = np.array(report.averaged("inflora")) - np.array(report.averaged("seq_lora"))
    order = mean["inflora"] >= mean["mperp_only"] >= max(mean["random_b"], mean["nt_only"])
    ok = order and bool(np.all(gaps >= 0.05)) and secs < 300.0
    summary = " ".join(f"{k}={v:.3f}" for k, v in mean.items())
    assert record(7, ok, f"{summary}; InfLoRA-SeqLoRA per seed {np.round(gaps, 3).tolist()} >= 0.05; {secs:.0f}s < 300s")


def test_criterion_08_alignment(benchmark):
    report, _ = benchmark
    plain = np.array(report.averaged("inflora"))
    aligned = np.array(report.averaged("inflora+ca"))
    ok = bool(np.all(aligned >= plain))
    assert record(8, ok, f"aligned {np.round(aligned, 4).tolist()} >= plain {np.round(plain, 4).tolist()} per seed")


def test_criterion_09_metrics_arithmetic():
    acc, avg = acc_metrics(AccuracyMatrix.from_rows([[0.9], [0.8, 0.7]]))
    acc = [float(a) for a in acc]
    ok = acc[0] == 0.9 and acc[1] == 0.75 and avg == 0.825
    assert record(9, ok, f"ACC_1={acc[0]!r} ACC_2={acc[1]!r} averaged={avg!r} (expect 0.9 / 0.75 / 0.825)")


def test_criterion_10_determinism(tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("train:\n  epochs: 5\nvariants: [inflora, seq_lora]\n")
    for out in ("a", "b"):
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / out), "--seeds", "2"]) == 0
    names = ("results.csv", "summary.csv", "losses.csv", "report.json")
    same = all((tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names)
    ckpt = checks.check_checkpoint()
    p1, p2 = tmp_path / "m1.ckpt", tmp_path / "m2.ckpt"
    assert main(["ckpt", "save", str(p1), "--config", str(cfg), "--seed", "2"]) == 0
    save_checkpoint(p2, *load_checkpoint(p1))
    ckpt_same = ckpt.passed and p1.read_bytes() == p2.read_bytes()
    ok = same and ckpt_same
    assert record(10, ok, f"results files byte-identical: {same}; checkpoint save/load/save byte-identical: {ckpt_same}")
