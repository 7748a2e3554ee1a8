"""Acceptance criteria 1-8, each reported as one PASS/FAIL line.

Criteria 1-5 re-run the focused oracle tests from the unit suites in a child
pytest process (so their tolerances live in one place) and time them.
Criteria 6-8 run the benchmark itself.  6 and 7 take several minutes.
"""
import shutil
import subprocess
import sys
import time
from pathlib import Path

import pytest

import conftest
from clab import contrastive
from clab.bench import ExperimentConfig, run_benchmark

HERE = Path(__file__).parent


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    conftest.VERDICTS.append(line)
    assert ok, line


def run_nodes(nodes: list[str]) -> tuple[bool, float, str]:
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *nodes],
                          cwd=HERE.parent, capture_output=True, text=True)
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    return proc.returncode == 0, time.perf_counter() - t0, summary


def test_criterion_1_gradients():
    ok, secs, summary = run_nodes(["tests/test_gradients.py",
                                   "tests/test_contrastive.py::test_info_nce_gradient"])
    verdict(1, ok and secs < 60, f"finite-difference suite, rel err < 1e-4, 20 instances per op; "
                                 f"{summary}; {secs:.1f}s (limit 60s)")


def test_criterion_2_info_nce():
    ok, secs, summary = run_nodes([
        "tests/test_contrastive.py::test_masking_equals_deleting",
        "tests/test_contrastive.py::test_info_nce_equal_similarities",
        "tests/test_contrastive.py::test_info_nce_all_masked_is_zero",
        "tests/test_contrastive.py::test_info_nce_tau_02_example",
        "tests/test_contrastive.py::test_batch_loss_is_mean_of_single_losses",
    ])
    verdict(2, ok, f"masked == deleted exactly, ln(N+1) and 0 to 1e-12, tau=0.2 to 1e-9; {summary}")


def test_criterion_3_queue_ema():
    ok, secs, summary = run_nodes([
        "tests/test_contrastive.py::test_queue_replay_oracle",
        "tests/test_contrastive.py::test_ema_extremes_exact",
        "tests/test_contrastive.py::test_ema_midpoint",
        "tests/test_contrastive.py::test_key_encoder_constant_with_m1_and_never_gets_grads",
    ])
    verdict(3, ok, f"FIFO replay over 1000 enqueues, EMA m in {{0, 0.5, 1}} exact, "
                   f"no key grads over 100 steps; {summary}")


def test_criterion_4_knn():
    ok, secs, summary = run_nodes([
        "tests/test_eval.py::test_knn_matches_brute_force",
        "tests/test_eval.py::test_knn_tie_prefers_lower_index_and_class",
    ])
    verdict(4, ok, f"100 random banks (N <= 200, d <= 32) match brute force incl. ties; {summary}")


def test_criterion_5_protocol():
    ok, secs, summary = run_nodes([
        "tests/test_bench.py::test_subsample_stratification_bound",
        "tests/test_bench.py::test_aggregate_constant",
        "tests/test_bench.py::test_aggregate_hand_values",
        "tests/test_bench.py::test_aggregate_single_value_omits_sd",
        "tests/test_bench.py::test_report_is_bit_reproducible",
    ])
    verdict(5, ok, f"stratification bound, aggregate hand values, bit-identical reports; {summary}")


# ---------------------------------------------------------------- orderings

ORDER_SEEDS = (0, 1, 2)


def _means(report: dict) -> dict:
    return {(g["variant"], g["protocol"], g["fraction"]): 100 * g["macro_f1"]["mean"]
            for g in report["groups"] if g.get("macro_f1")}


def ordering_checks(m: dict) -> dict:
    """The three orderings on one seed's group means (macro-F1, percent)."""
    a = all(m[("mocotp", "linear", f)] >= m[("moco", "linear", f)] >= m[("none", "linear", f)]
            for f in (0.01, 0.1))
    b = m[("none", "finetune", 0.01)] < m[("mocotp", "linear", 0.01)]
    c = all(m[(v, "knn", 0.1)] >= m[("none", "finetune", 0.1)] for v in ("moco", "mocotp"))
    return {"a": a, "b": b, "c": c}


def test_ordering_checks_on_hand_table():
    # the shape of the reference table: SSL well above random, temporal positives best
    m = {("none", "linear", 0.01): 20.0, ("moco", "linear", 0.01): 30.0,
         ("mocotp", "linear", 0.01): 60.0, ("none", "linear", 0.1): 40.0,
         ("moco", "linear", 0.1): 45.0, ("mocotp", "linear", 0.1): 65.0,
         ("none", "finetune", 0.01): 19.3, ("none", "finetune", 0.1): 40.0,
         ("moco", "knn", 0.1): 41.0, ("mocotp", "knn", 0.1): 55.0}
    assert ordering_checks(m) == {"a": True, "b": True, "c": True}
    m[("moco", "linear", 0.1)] = 39.0
    m[("moco", "knn", 0.1)] = 39.9
    assert ordering_checks(m) == {"a": False, "b": True, "c": False}


def _config(seed: int, fractions: list) -> ExperimentConfig:
    # the default synthetic benchmark, restricted to the variants and fractions compared
    cfg = ExperimentConfig.from_dict({
        "version": 1, "seed": seed, "train_data": {"synthetic": {"seed": seed}},
        "variants": ["none", "moco", "mocotp"], "fractions": fractions, "repeats": 3})
    spec = cfg.train_data["synthetic"]
    assert (spec["num_classes"], spec["locations_per_class"], spec["views"],
            spec["image_size"]) == (10, 100, 4, 16)
    assert cfg.pretrain.epochs <= 30
    return cfg


@pytest.fixture(scope="module")
def ordering_runs(tmp_path_factory):
    """Reports for seeds 0-2 at 1% and 10%, plus the runtime of that grid."""
    root = tmp_path_factory.mktemp("orderings")
    t0 = time.perf_counter()
    reports = {s: run_benchmark(_config(s, [0.01, 0.1]), root / f"s{s}") for s in ORDER_SEEDS}
    return reports, time.perf_counter() - t0, root


@pytest.mark.slow
def test_criterion_6_orderings(ordering_runs):
    reports, secs, _ = ordering_runs
    passed, notes = 0, []
    for seed, rep in reports.items():
        checks = ordering_checks(_means(rep))
        passed += all(checks.values())
        notes.append(f"seed {seed} " + "".join(k if v else "-" for k, v in checks.items()))
    verdict(6, passed >= 2 and secs < 1800,
            f"(a)(b)(c) hold in {passed}/3 seeds [{', '.join(notes)}]; {secs / 60:.1f} min (limit 30)")


def _val_accuracy(rep: dict, variant: str, protocol: str, fraction: float) -> float:
    vals = [r["val_metrics"]["accuracy"] for r in rep["records"]
            if (r["variant"], r["protocol"], r["fraction"]) == (variant, protocol, fraction)]
    assert len(vals) == 3
    return sum(vals) / len(vals)


@pytest.mark.slow
def test_finetune_validation_at_least_linear(ordering_runs):
    # same MoCoTP checkpoint and subsets; 10% so the validation split has ~80 images
    reports, _, _ = ordering_runs
    wins = sum(_val_accuracy(rep, "mocotp", "finetune", 0.1) >=
               _val_accuracy(rep, "mocotp", "linear", 0.1) for rep in reports.values())
    assert wins >= 2


@pytest.mark.slow
def test_monotone_information(ordering_runs):
    # full-label cells for seed 0; the pretraining checkpoints are reused from the 1%/10% run
    _, _, root = ordering_runs
    out = root / "full"
    shutil.copytree(root / "s0" / "checkpoints", out / "checkpoints")
    m = _means(run_benchmark(_config(0, [0.01, 1.0]), out))
    low = {k: v for k, v in m.items() if k[2] == 0.01}
    for (variant, protocol, _), value in low.items():
        assert m[(variant, protocol, 1.0)] >= value, (variant, protocol)


# ---------------------------------------------------------------- masking ablation

ABLATION_SEEDS = (0, 1, 2)


@pytest.mark.slow
def test_criterion_7_masking_ablation(tmp_path, monkeypatch):
    # two locations per class with 32 views each: 20 locations share every 64-sample
    # batch, so nearly every query meets its own location among the 64 queued keys.
    # tau=0.1 concentrates the softmax on the hardest negatives, which are exactly
    # those same-location views
    rates: list[float] = []
    step = contrastive.moco_step

    def recording_step(*args, **kwargs):
        res = step(*args, **kwargs)
        rates.append(res.collision_rate)
        return res

    monkeypatch.setattr(contrastive, "moco_step", recording_step)
    wins, notes, trained = 0, [], []
    for seed in ABLATION_SEEDS:
        f1 = {}
        for masking in (True, False):
            cfg = ExperimentConfig.from_dict({
                "version": 1, "seed": seed,
                "train_data": {"synthetic": {"seed": seed, "locations_per_class": 2, "views": 32}},
                "test_data": {"synthetic": {"seed": seed, "split": 1, "locations_per_class": 10}},
                "variants": ["mocotp"], "fractions": [0.01], "repeats": 3, "protocols": ["linear"],
                "pretrain": {"epochs": 40, "contrastive": {"queue_size": 64, "temperature": 0.1,
                                                           "masking": masking}}})
            start = len(rates)
            rep = run_benchmark(cfg, tmp_path / f"s{seed}_{masking}")
            # the first step scores against the random initial queue (location -1)
            trained.extend(rates[start + 1:])
            f1[masking] = 100 * rep["groups"][0]["macro_f1"]["mean"]
        wins += f1[True] >= f1[False]
        notes.append(f"seed {seed}: {f1[True]:.2f} vs {f1[False]:.2f}")
    enough = min(trained) >= 0.3
    verdict(7, wins >= 2 and enough,
            f"masked >= unmasked 1% linear F1 in {wins}/3 seeds [{'; '.join(notes)}]; "
            f"min per-batch collision share {min(trained):.2f} (need >= 0.30)")


# ---------------------------------------------------------------- smoke

def test_criterion_8_smoke(tmp_path):
    from test_cli import GOLDEN, run_pipeline

    t0 = time.perf_counter()
    rep = run_pipeline(tmp_path)
    secs = time.perf_counter() - t0
    same = ((rep / "tables" / "knn.csv").read_text() == (GOLDEN / "micro_knn.csv").read_text()
            and (rep / "tables" / "linear.csv").read_text() == (GOLDEN / "micro_linear.csv").read_text()
            and (rep / "figures" / "knn.svg").read_bytes() == (GOLDEN / "micro_knn.svg").read_bytes())
    verdict(8, same and secs < 120, f"gen-data -> benchmark -> report exit 0, golden CSV/SVG "
                                    f"{'match' if same else 'DIFFER'}; {secs:.1f}s (limit 120s)")
