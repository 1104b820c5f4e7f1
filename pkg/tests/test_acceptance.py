"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in
the terminal summary.  The statistical criteria (6 to 12) train many small
networks and take several minutes each on one CPU.
"""

import json
import math
import time

import numpy as np
import pytest

from lpntk import experiments
from lpntk.analysis import fpc
from lpntk.cli import run_command
from lpntk.kernel import (GapFamily, actual_delta, convergence_gap, entk_block, lpntk_feature, lpntk_from_block,
                          lpntk_pair, predict_delta)
from lpntk.model import NetworkSpec, init_params, logit_jacobian, loss_gradient
from lpntk.numerics import make_rng
from oracles import fd_jacobian, fd_loss_gradient, random_net, random_symmetric, reference_fpc

pytestmark = pytest.mark.slow


def random_mlp(rng, max_params=5000):
    while True:
        p = int(rng.integers(2, 21))
        hidden = [int(w) for w in rng.integers(2, 41, size=int(rng.integers(1, 4)))]
        K = int(rng.integers(2, 11))
        spec = NetworkSpec((p, *hidden, K), ("relu", "tanh")[int(rng.integers(2))], bool(rng.integers(2)))
        if spec.n_params <= max_params:
            return spec, init_params(spec, rng)


class Clock:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start

    def __str__(self):
        return f"{self.seconds:.1f}s"


def test_01_dual_form(criterion):
    rng = make_rng(1)
    worst = 0.0
    with Clock() as clock:
        for _ in range(1000):
            spec, params, x = random_net(rng)
            x2 = rng.random(spec.p)
            y, y2 = int(rng.integers(spec.K)), int(rng.integers(spec.K))
            J, J2 = logit_jacobian(params, spec, x), logit_jacobian(params, spec, x2)
            phi, phi2 = lpntk_feature(J, y), lpntk_feature(J2, y2)
            a = lpntk_pair(phi, phi2)
            b = lpntk_from_block(entk_block(J, J2), y, y2)
            # normwise relative error: exact cancellations make |b| itself zero
            scale = max(abs(b), np.linalg.norm(phi) * np.linalg.norm(phi2))
            worst = max(worst, abs(a - b) / scale if scale > 0 else abs(a - b))
    criterion(1, "dual-form equivalence", worst <= 1e-10 and clock.seconds < 60,
              f"max normwise rel err {worst:.2e} over 1000 cases, {clock}")


def test_02_first_order_fidelity(criterion):
    rng = make_rng(2)
    rel, ratios, sizes = [], [], []
    with Clock() as clock:
        for _ in range(20):
            spec, params = random_mlp(rng)
            sizes.append(spec.n_params)
            x_u, x_o, y = rng.random(spec.p), rng.random(spec.p), int(rng.integers(spec.K))
            err = []
            for eta in (1e-4, 5e-5):
                act = actual_delta(params, spec, x_u, y, x_o, eta)
                err.append(np.linalg.norm(predict_delta(params, spec, x_u, y, x_o, eta) - act))
                if eta == 1e-4:
                    rel.append(err[0] / np.linalg.norm(act))
            ratios.append(err[0] / err[1])
    halving = sum(r >= 3.5 for r in ratios)
    ok = max(rel) <= 0.05 and halving >= 18 and clock.seconds < 120
    criterion(2, "first-order fidelity", ok,
              f"max rel err {max(rel):.2e}, halving ratio >= 3.5 in {halving}/20 "
              f"(median {np.median(ratios):.2f}), d <= {max(sizes)}, {clock}")


def test_03_finite_differences(criterion):
    rng = make_rng(3)
    worst_j = worst_g = 0.0
    with Clock() as clock:
        for _ in range(50):
            spec, params, x = random_net(rng)
            y = int(rng.integers(spec.K))
            worst_j = max(worst_j, np.abs(logit_jacobian(params, spec, x) - fd_jacobian(params, spec, x)).max())
            worst_g = max(worst_g, np.abs(loss_gradient(params, spec, x, y)
                                          - fd_loss_gradient(params, spec, x, y)).max())
    ok = worst_j < 1e-5 and worst_g < 1e-5 and clock.seconds < 120
    criterion(3, "jacobian and gradient", ok,
              f"max abs err jacobian {worst_j:.1e}, gradient {worst_g:.1e} over 50 nets, {clock}")


def test_04_gap_bound(criterion):
    with Clock() as clock:
        rep = convergence_gap(GapFamily(), [64, 256, 1024], 200, 0.05, make_rng(4))
        frozen = convergence_gap(GapFamily(), [64, 256, 1024], 200, 0.05, make_rng(5), frozen_lower=True)
    rates = {w.width: w.satisfaction_rate for w in rep.widths}
    zero = all(not w.gaps.any() for w in frozen.widths)
    ok = min(rates.values()) >= 0.95 and zero and clock.seconds < 300
    criterion(4, "gap bound", ok,
              "satisfaction " + ", ".join(f"w={w}: {r:.3f}" for w, r in rates.items())
              + f"; frozen gaps all zero: {zero}, {clock}")


def test_05_fpc_oracle(criterion):
    rng = make_rng(6)
    matches = 0
    with Clock() as clock:
        hand = np.array([[4.0, 3.0, 0.0], [3.0, 4.0, 0.0], [0.0, 0.0, 9.0]])
        r = fpc(hand, 2)
        hand_ok = (r.centroids, r.members) == ([2, 0], [[], [1]]) == reference_fpc(hand.tolist(), 2)
        for i in range(100):
            n = int(rng.integers(1, 17))
            K = random_symmetric(rng, n, integer=i % 2 == 0)
            M = int(rng.integers(1, n + 1))
            r = fpc(K, M)
            matches += (r.centroids, r.members) == reference_fpc(K.tolist(), M)
    ok = hand_ok and matches == 100 and clock.seconds < 30
    criterion(5, "FPC oracle", ok, f"hand trace {hand_ok}, {matches}/100 random matrices match, {clock}")


def test_06_long_tail(criterion):
    with Clock() as clock:
        results = [experiments.long_tail(seed) for seed in range(10)]
    fracs = [min(r.class_head_fraction) for r in results]
    hits = sum(f >= 0.5 for f in fracs)
    ok = hits >= 9 and clock.seconds < 300
    criterion(6, "long-tail emergence", ok,
              f"head cluster >= 50% of its class in {hits}/10 seeds (smallest class fraction per seed "
              f"{np.round(fracs, 2).tolist()}); whole-set clustering mean "
              f"{np.mean([r.global_head_fraction for r in results]):.2f}, {clock}")


@pytest.fixture(scope="module")
def prune_trials():
    start = time.perf_counter()
    trials = [experiments.prune_trial(seed) for seed in range(10)]
    return trials, time.perf_counter() - start


def test_07_deredundancy(criterion, prune_trials):
    trials, seconds = prune_trials
    full = np.mean([t.acc_full for t in trials])
    dered = np.mean([t.acc_deredundant for t in trials])
    rand = np.mean([t.acc_random_removal for t in trials])
    frac = np.mean([t.n_redundant / t.n_train for t in trials])
    ok = abs(dered - full) <= 0.01 and seconds < 600
    criterion(7, "de-redundancy neutrality", ok,
              f"full {full:.4f}, redundant removed {dered:.4f} (diff {100 * (dered - full):+.2f} pp), "
              f"random removal {rand:.4f}, mean redundant fraction {frac:.2f}, {seconds:.0f}s")


def test_08_pruning(criterion, prune_trials):
    trials, seconds = prune_trials
    full = np.mean([t.acc_full for t in trials])
    pruned = np.mean([t.acc_pruned for t in trials])
    removed = np.mean([t.n_pruned_total / t.n_train for t in trials])
    ok = pruned >= full - 0.005 and seconds < 600
    criterion(8, "pruning non-degradation", ok,
              f"full {full:.4f}, pruned {pruned:.4f} (diff {100 * (pruned - full):+.2f} pp), "
              f"mean removed fraction {removed:.2f}, {seconds:.0f}s")


def test_09_difficulty_control(criterion):
    with Clock() as clock:
        trials = [experiments.control_trial(seed) for seed in range(20)]
    hits = sum(t.ordered for t in trials)
    ok = hits >= 14 and clock.seconds < 600
    criterion(9, "difficulty-control ordering", ok,
              f"ordered in {hits}/20 seeds; mean losses interchangeable "
              f"{np.mean([t.interchangeable for t in trials]):.3f}, medium {np.mean([t.medium for t in trials]):.3f},"
              f" non-interchangeable {np.mean([t.non_interchangeable for t in trials]):.3f}, {clock}")


def test_10_correlation_decay(criterion):
    with Clock() as clock:
        rhos = np.array([experiments.correlation_trial(seed) for seed in range(5)])
    mean = rhos.mean(axis=0)
    ok = bool(mean[0] > mean[1] > mean[2]) and clock.seconds < 600
    criterion(10, "difficulty-correlation decay", ok,
              f"mean rho for N/4, N/16, N/64 = {np.round(mean, 3).tolist()}, {clock}")


def test_11_forgetting(criterion):
    with Clock() as clock:
        trials = [experiments.forgetting_trial(seed) for seed in range(10)]
    events = sum(t.events for t in trials)
    f1 = np.mean([t.report.f1 for t in trials])
    base = np.mean([t.baseline.f1 for t in trials])
    ratio = f1 / base if base > 0 else math.inf
    beats = sum(t.report.f1 > t.baseline.f1 for t in trials)
    cal = np.mean([t.calibrated.f1 for t in trials])
    cal_base = np.mean([t.calibrated_baseline.f1 for t in trials])
    ok = events >= 200 and f1 > 0 and ratio >= 2 and clock.seconds < 900
    criterion(11, "forgetting prediction beats chance", ok,
              f"{events} events; mean F1 {f1:.4f} vs baseline {base:.4f} (ratio {ratio:.1f}), "
              f"above baseline in {beats}/10 seeds; uniform-calibrated scale F1 {cal:.3f} vs {cal_base:.3f}, "
              f"{clock}")


def test_12_rl_direction(criterion):
    with Clock() as clock:
        cmp_ = experiments.rl_comparison(range(10))
    eps, lp = np.mean(cmp_.eps_greedy), np.mean(cmp_.lpntk_max)
    ok = lp >= eps - 0.05 and eps > cmp_.random_policy and lp > cmp_.random_policy and clock.seconds < 900
    criterion(12, "RL direction", ok,
              f"final return eps-greedy {eps:.3f}, lpNTK-max {lp:.3f}, random policy {cmp_.random_policy:.3f}, "
              f"{clock}")


def cli_pipeline(base, cfg):
    cfg_path = base / "config.json"
    base.mkdir()
    cfg_path.write_text(json.dumps(cfg))
    c = ["--config", str(cfg_path)]
    codes = [
        run_command(["train", *c, "--out", str(base / "train")]),
        run_command(["kernel", *c, "--ckpt", str(base / "train/model.lpw"), "--data", str(base / "train/train.npz"),
                     "--out", str(base / "kernel/k.lpk"), "--csv", "--threads", "2"]),
        run_command(["cluster", *c, "--kernel", str(base / "kernel/k.lpk"), "--out", str(base / "cluster")]),
        run_command(["redundant", *c, "--kernel", str(base / "kernel/k.lpk"), "--out", str(base / "redundant")]),
        run_command(["prune", *c, "--kernel", str(base / "kernel/k.lpk"), "--out", str(base / "prune")]),
        run_command(["difficulty", *c, "--out", str(base / "difficulty")]),
        run_command(["forget", *c, "--out", str(base / "forget")]),
        run_command(["gap", *c, "--out", str(base / "gap")]),
        run_command(["rl", *c, "--out", str(base / "rl")]),
        run_command(["report", *c, "--out", str(base / "report")]),
    ]
    return codes


def test_13_determinism(criterion, tmp_path):
    cfg = {
        "seed": 11,
        "dataset": {"synthetic": {"K": 2, "n_per_class": 64, "dim": 8, "cluster_std": 0.3, "flip_rate": 0.05}},
        "model": {"hidden": [16], "activation": "tanh", "epochs": 3, "batch_size": 16},
        "analysis": {"M": 8, "frac": 0.1, "divisors": [4, 16], "forget_iterations": 50, "forget_batch": 16},
        "gap": {"widths": [16, 64], "trials": 10},
        "rl": {"total_steps": 1000, "width": 3, "height": 3, "strategy": "lpntk_max"},
        "report": {"experiments": ["long_tail"], "seeds": 1},
    }
    with Clock() as clock:
        codes = [cli_pipeline(tmp_path / run, cfg) for run in ("a", "b")]
    a_files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    different = []
    for rel in a_files:
        a, b = (tmp_path / "a" / rel), (tmp_path / "b" / rel)
        if rel.name.endswith("manifest.json"):
            ma, mb = json.loads(a.read_text()), json.loads(b.read_text())
            same = ma["outputs"] == mb["outputs"] and ma["config_hash"] == mb["config_hash"]
        else:
            same = a.read_bytes() == b.read_bytes()
        if not same:
            different.append(str(rel))
    ok = codes[0] == codes[1] == [0] * 10 and not different
    criterion(13, "CLI determinism", ok,
              f"{len(a_files)} artifacts from 10 commands, exit codes {codes[0]}, "
              f"differing files {different or 'none'}, {clock}")
