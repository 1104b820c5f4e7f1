"""Desk-scale experiment drivers on synthetic blobs.

Each function runs one seeded trial end to end and returns plain numbers, so
the acceptance suite and the command-line ``report`` share the same code.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import rl
from .analysis import (DifficultyRecord, batch_forgetting, cluster_size_histogram,
                       difficulty_control_sets, difficulty_correlation, eligible_slots, find_redundant,
                       fpc, learning_difficulty, permutation_baseline, predict_forgetting_from_log,
                       prune_pipeline, score_predictions)
from .data import LabeledDataset, SyntheticSpec, balanced_partition, split, synth_generate
from .kernel import kernel_matrix
from .model import NetworkSpec, TrainConfig, accuracy, init_params, select_best, train
from .numerics import make_rng, spawn


def uniform_forgetting_scale(eta: float, batch_size: int, K: int) -> float:
    """Scale under which the accumulated variant kernel matches the first-order
    change of ``q`` along ``s_variant(y)`` when predictions are near uniform and
    the trainer averages the loss over the batch."""
    return eta / (batch_size * K * K * (K - 1))


def fit(ds: LabeledDataset, spec: NetworkSpec, cfg: TrainConfig, val: LabeledDataset,
        params0=None) -> np.ndarray:
    _, tlog = train(ds, spec, cfg, params0=params0, valset=val)
    return select_best(tlog, val, spec)


# --- long tail of cluster sizes ------------------------------------------------------


@dataclass(frozen=True)
class LongTailConfig:
    data: SyntheticSpec = SyntheticSpec(K=2, n_per_class=256, dim=16, duplicate_rate=0.6)
    hidden: int = 32
    activation: str = "relu"
    train: TrainConfig = TrainConfig(learning_rate=0.1, batch_size=32, epochs=10)
    centroid_frac: float = 0.1


@dataclass
class LongTailResult:
    class_head_fraction: list  # largest cluster / class size, clustering within each class
    class_histograms: list
    global_head_fraction: float  # same, clustering the whole set at once


def long_tail(seed: int, cfg: LongTailConfig = LongTailConfig()) -> LongTailResult:
    ds = synth_generate(replace(cfg.data, seed=seed))
    spec = NetworkSpec((ds.p, cfg.hidden, ds.K), cfg.activation)
    w, _ = train(ds, spec, replace(cfg.train, seed=seed))
    K = kernel_matrix(ds, w, spec).dense()
    fracs, hists = [], []
    for k in range(ds.K):
        idx = ds.class_indices(k)
        r = fpc(K[np.ix_(idx, idx)], max(1, int(cfg.centroid_frac * idx.size)))
        hist = cluster_size_histogram(r)
        fracs.append(hist[0] / idx.size)
        hists.append(hist)
    whole = cluster_size_histogram(fpc(K, max(1, int(cfg.centroid_frac * ds.n))))
    return LongTailResult(fracs, hists, whole[0] / ds.n)


# --- redundancy removal and pruning --------------------------------------------------


@dataclass(frozen=True)
class PruneConfig:
    data: SyntheticSpec = SyntheticSpec(K=2, n_per_class=512, dim=16, cluster_std=0.3,
                                        duplicate_rate=0.3, flip_rate=0.05)
    n_train: int = 512
    test_frac: float = 0.4
    hidden: int = 64
    activation: str = "tanh"
    train: TrainConfig = TrainConfig(learning_rate=0.1, batch_size=32, epochs=60)
    centroid_frac: float = 0.1
    prune_frac: float = 0.1


@dataclass
class PruneTrial:
    n_train: int
    n_redundant: int
    n_pruned_total: int
    acc_full: float
    acc_deredundant: float
    acc_random_removal: float
    acc_pruned: float


def benchmark_splits(seed: int, cfg: PruneConfig):
    ds = synth_generate(replace(cfg.data, seed=seed))
    rng = make_rng(seed)
    trval, test = split(ds, 1.0 - cfg.test_frac, rng)
    train_ds, val = split(trval, cfg.n_train / trval.n, rng)
    return train_ds, val, test


def prune_trial(seed: int, cfg: PruneConfig = PruneConfig()) -> PruneTrial:
    """Full-data, redundancy-removed, random-removed and pruned test accuracies.

    Every retraining starts from the same initial parameters and uses the same
    epoch budget and validation-based checkpoint selection.
    """
    train_ds, val, test = benchmark_splits(seed, cfg)
    spec = NetworkSpec((train_ds.p, cfg.hidden, train_ds.K), cfg.activation)
    init_rng, remove_rng, prune_rng = spawn(make_rng(seed), 3)
    p0 = init_params(spec, init_rng)
    tcfg = replace(cfg.train, seed=seed)
    w = fit(train_ds, spec, tcfg, val, p0)
    km = kernel_matrix(train_ds, w, spec)
    n = train_ds.n
    redundant = find_redundant(km)
    keep = np.setdiff1d(np.arange(n), redundant)
    random_keep = np.sort(remove_rng.choice(n, size=n - redundant.size, replace=False))
    pr = prune_pipeline(n, km, max(1, int(cfg.centroid_frac * n)), cfg.prune_frac, prune_rng)

    def test_acc(index):
        return accuracy(fit(train_ds.subset(index), spec, tcfg, val, p0), spec, test)

    return PruneTrial(n, int(redundant.size), int(n - pr.retained.size), accuracy(w, spec, test),
                      test_acc(keep), test_acc(random_keep), test_acc(pr.retained))


# --- controlling learning difficulty --------------------------------------------------


@dataclass(frozen=True)
class ControlConfig:
    data: SyntheticSpec = SyntheticSpec(K=2, n_per_class=256, dim=16, cluster_std=0.3,
                                        duplicate_rate=0.3, flip_rate=0.05)
    hidden: int = 64
    activation: str = "tanh"
    kernel_train: TrainConfig = TrainConfig(learning_rate=0.1, batch_size=32, epochs=20)
    target_class: int = 0
    m: int = 16
    background: int = 32
    probe_train: TrainConfig = TrainConfig(learning_rate=0.1, batch_size=16, epochs=10)
    centroid_frac: float = 0.1


@dataclass
class ControlTrial:
    target_id: int
    interchangeable: float
    medium: float
    non_interchangeable: float

    @property
    def ordered(self) -> bool:
        return self.interchangeable < self.medium < self.non_interchangeable


def control_trial(seed: int, cfg: ControlConfig = ControlConfig()) -> ControlTrial:
    """Cumulative loss of a head-cluster centroid when its training set is
    augmented with interchangeable, medium or non-interchangeable samples.

    Clustering runs within the target's class.  Each augmented set also holds
    the same random background drawn from the other classes, and every run
    starts from the same initial parameters.
    """
    ds = synth_generate(replace(cfg.data, seed=seed))
    spec = NetworkSpec((ds.p, cfg.hidden, ds.K), cfg.activation)
    init_rng, bg_rng, probe_rng = spawn(make_rng(seed), 3)
    w, _ = train(ds, spec, replace(cfg.kernel_train, seed=seed), rng=init_rng)
    K = kernel_matrix(ds, w, spec).dense()
    idx = ds.class_indices(cfg.target_class)
    Kc = K[np.ix_(idx, idx)]
    r = fpc(Kc, max(1, int(cfg.centroid_frac * idx.size)))
    local_target = r.centroids[r.largest()]
    easy, hard, medium = difficulty_control_sets(Kc, r, local_target, cfg.m)
    others = np.flatnonzero(ds.labels != cfg.target_class)
    background = bg_rng.choice(others, size=cfg.background, replace=False)
    p0 = init_params(spec, probe_rng)
    losses = []
    for pool in (easy, medium, hard):
        # the target sits at position 0 of each augmented set
        sub = ds.subset(np.concatenate([[idx[local_target]], idx[pool], background]))
        _, tlog = train(sub, spec, replace(cfg.probe_train, seed=seed), params0=p0)
        losses.append(float(tlog.losses[:, 0].sum()))
    return ControlTrial(int(ds.ids[idx[local_target]]), *losses)


# --- difficulty correlation against subset size --------------------------------------


@dataclass(frozen=True)
class CorrelationConfig:
    data: SyntheticSpec = SyntheticSpec(K=2, n_per_class=256, dim=16, cluster_std=0.3, flip_rate=0.05)
    hidden: int = 32
    activation: str = "tanh"
    learning_rate: float = 0.01
    epochs: int = 5
    divisors: tuple = (4, 16, 64)


def correlation_trial(seed: int, cfg: CorrelationConfig = CorrelationConfig()) -> list:
    """Pearson correlation of per-sample difficulty on the full set against
    difficulty on disjoint class-balanced subsets of size ``N / divisor``.

    Training is per-sample SGD from one shared initialisation.  Samples left
    over by the subset tiling (possible after label flips) are dropped from both
    sides of the correlation.
    """
    return correlation_on(synth_generate(replace(cfg.data, seed=seed)), seed, cfg)


def correlation_on(ds: LabeledDataset, seed: int, cfg: CorrelationConfig = CorrelationConfig()) -> list:
    spec = NetworkSpec((ds.p, cfg.hidden, ds.K), cfg.activation)
    init_rng, part_rng = spawn(make_rng(seed), 2)
    p0 = init_params(spec, init_rng)

    def run(sub: LabeledDataset, run_seed: int):
        tcfg = TrainConfig(cfg.learning_rate, batch_size=1, epochs=cfg.epochs, seed=run_seed)
        return learning_difficulty(train(sub, spec, tcfg, params0=p0)[1])

    full = run(ds, seed)
    out = []
    for div in cfg.divisors:
        size = ds.n // div
        sub_diff = {}
        for j, block in enumerate(balanced_partition(ds, size, part_rng)):
            sub_diff.update({r.sample_id: r.difficulty for r in run(ds.subset(block), seed * 1000 + j + 1)})
        out.append(difficulty_correlation([r for r in full if r.sample_id in sub_diff],
                                          [DifficultyRecord(i, sub_diff[i]) for i in sorted(sub_diff)]))
    return out


# --- forgetting-event prediction -----------------------------------------------------


@dataclass(frozen=True)
class ForgettingConfig:
    data: SyntheticSpec = SyntheticSpec(K=2, n_per_class=256, dim=16, cluster_std=0.6, flip_rate=0.1)
    hidden: int = 32
    activation: str = "tanh"
    eta: float = 1e-3
    batch_size: int = 64
    iterations: int = 3000


@dataclass
class ForgettingTrial:
    events: int
    slots: int
    predicted: int
    report: object
    baseline: object
    calibrated: object
    calibrated_baseline: object


def forgetting_trial(seed: int, cfg: ForgettingConfig = ForgettingConfig()) -> ForgettingTrial:
    """Predict next-step forgetting of each batch with the variant kernel and
    score it against the training trace.

    The default scale is the learning rate; the calibrated run uses
    :func:`uniform_forgetting_scale`.  Each is paired with a baseline placing the
    same number of predictions uniformly over the eligible slots.
    """
    return forgetting_on(synth_generate(replace(cfg.data, seed=seed)), seed, cfg)


def forgetting_on(ds: LabeledDataset, seed: int, cfg: ForgettingConfig = ForgettingConfig()) -> ForgettingTrial:
    spec = NetworkSpec((ds.p, cfg.hidden, ds.K), cfg.activation)
    steps = cfg.iterations + 2
    epochs = -(-steps * cfg.batch_size // ds.n)
    tcfg = TrainConfig(cfg.eta, cfg.batch_size, epochs, seed=seed, track_iterations=steps)
    _, tlog = train(ds, spec, tcfg)
    actual, slots, pred, pred_cal = set(), [], set(), set()
    cal = uniform_forgetting_scale(cfg.eta, cfg.batch_size, ds.K)
    for t in range(cfg.iterations):
        actual |= batch_forgetting(tlog, t)
        slots += eligible_slots(tlog, t)
        pred |= predict_forgetting_from_log(tlog, ds.features, spec, cfg.eta, t)
        pred_cal |= predict_forgetting_from_log(tlog, ds.features, spec, cfg.eta, t, scale=cal)
    b1, b2 = spawn(make_rng(seed), 2)
    return ForgettingTrial(len(actual), len(slots), len(pred), score_predictions(pred, actual),
                           permutation_baseline(len(pred), slots, actual, b1),
                           score_predictions(pred_cal, actual),
                           permutation_baseline(len(pred_cal), slots, actual, b2))


# --- exploration in the gridworld ----------------------------------------------------


DEFAULT_RL = rl.RlConfig(gamma=0.9, eps=0.3, eta=0.1, batch_size=4, total_steps=20000)


@dataclass
class RlComparison:
    eps_greedy: list
    lpntk_max: list
    random_policy: float


def rl_comparison(seeds, cfg: rl.RlConfig = DEFAULT_RL, env: rl.GridWorld | None = None,
                  random_episodes: int = 1000) -> RlComparison:
    env = rl.GridWorld() if env is None else env
    finals = {}
    for strategy in ("eps_greedy", "lpntk_max"):
        finals[strategy] = [rl.run_training(replace(cfg, seed=s, strategy=strategy), env).final_return
                            for s in seeds]
    rand, _ = rl.random_policy_return(env, random_episodes, make_rng(0))
    return RlComparison(finals["eps_greedy"], finals["lpntk_max"], rand)
