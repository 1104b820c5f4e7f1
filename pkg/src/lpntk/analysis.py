"""Analyses on top of a kernel matrix: relationships, clustering, redundancy,
pruning, learning difficulty and forgetting events."""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kernel import KernelMatrix, as_dense, features
from .model import NetworkSpec, TrainLog, predict_proba
from .numerics import dot, pearson, round_half_up


class AnalysisError(ValueError):
    pass


# --- pair relationships -----------------------------------------------------------


class Relationship(enum.Enum):
    INTERCHANGEABLE = "interchangeable"
    UNRELATED = "unrelated"
    CONTRADICTORY = "contradictory"
    MIXED = "mixed"


@dataclass(frozen=True)
class RelationshipConfig:
    t_pos: float = 0.6
    t_neg: float = -0.6
    zero_band: float = 0.05

    def __post_init__(self):
        if not 0.5 < self.t_pos <= 1.0:
            raise AnalysisError("t_pos must lie in (1/2, 1]")
        if not -1.0 <= self.t_neg < -0.5:
            raise AnalysisError("t_neg must lie in [-1, -1/2)")
        if self.zero_band < 0:
            raise AnalysisError("zero_band must be non-negative")


def classify_relationship(phi_o, phi_u, cfg: RelationshipConfig = RelationshipConfig()) -> Relationship:
    """Classify a pair by the mutual projections of their lpNTK features."""
    n_o, n_u = dot(phi_o, phi_o), dot(phi_u, phi_u)
    if n_o == 0.0 or n_u == 0.0:
        return Relationship.UNRELATED
    c = dot(phi_o, phi_u)
    r1, r2 = c / n_u, c / n_o
    if min(r1, r2) >= cfg.t_pos:
        return Relationship.INTERCHANGEABLE
    if max(r1, r2) <= cfg.t_neg:
        return Relationship.CONTRADICTORY
    if abs(r1) <= cfg.zero_band and abs(r2) <= cfg.zero_band:
        return Relationship.UNRELATED
    return Relationship.MIXED


# --- farthest point clustering ----------------------------------------------------


@dataclass
class FpcResult:
    centroids: list
    members: list  # members[j] excludes centroids[j]

    @property
    def sizes(self) -> list:
        return [1 + len(m) for m in self.members]

    def labels(self, n: int) -> np.ndarray:
        """Cluster index of every sample."""
        out = np.full(n, -1, dtype=np.int64)
        for j, (c, mem) in enumerate(zip(self.centroids, self.members)):
            out[c] = j
            out[list(mem)] = j
        return out

    def largest(self) -> int:
        # ties go to the earlier cluster
        return int(np.argmax(self.sizes))

    def cluster(self, j: int) -> list:
        return sorted([self.centroids[j], *self.members[j]])


def fpc(k, M: int) -> FpcResult:
    """Greedy farthest point clustering with a similarity kernel.

    The first centroid has the largest self-similarity.  Each new centroid is
    the member least similar to its own centroid (earlier cluster and then
    lower index win ties); samples move to it when they are strictly more
    similar to it than to their current centroid.
    """
    K = as_dense(k)
    n = K.shape[0]
    if not 1 <= M <= n:
        raise AnalysisError(f"M must lie in [1, {n}], got {M}")
    first = int(np.argmax(np.diag(K)))
    centroids = [first]
    members = [[i for i in range(n) if i != first]]
    while len(centroids) < M:
        best, c_new, owner = np.inf, -1, -1
        for j, c in enumerate(centroids):
            if not members[j]:
                continue
            mem = np.asarray(members[j])
            sims = K[c, mem]
            pos = int(np.argmin(sims))
            if sims[pos] < best:
                best, c_new, owner = sims[pos], int(mem[pos]), j
        members[owner].remove(c_new)
        moved = []
        for j, c in enumerate(centroids):
            keep = []
            for i in members[j]:
                (moved if K[i, c] < K[i, c_new] else keep).append(i)
            members[j] = keep
        centroids.append(c_new)
        members.append(sorted(moved))
    return FpcResult(centroids, members)


def cluster_size_histogram(r: FpcResult) -> list:
    return sorted(r.sizes, reverse=True)


def save_clusters(path, r: FpcResult, fingerprint: str) -> None:
    doc = {"centroids": [int(c) for c in r.centroids],
           "clusters": [[int(i) for i in m] for m in r.members],
           "kernel_fingerprint": fingerprint}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_clusters(path) -> tuple[FpcResult, str]:
    doc = json.loads(Path(path).read_text())
    return FpcResult(list(doc["centroids"]), [list(m) for m in doc["clusters"]]), doc["kernel_fingerprint"]


# --- redundancy and pruning -------------------------------------------------------


def find_redundant(k) -> np.ndarray:
    """Samples whose most similar *other* sample beats their self-similarity."""
    K = as_dense(k)
    n = K.shape[0]
    if n < 2:
        return np.zeros(0, dtype=np.int64)
    off = K.copy()
    np.fill_diagonal(off, -np.inf)
    return np.flatnonzero(off.max(axis=1) > np.diag(K))


def prune_count(frac: float, size: int) -> int:
    if not 0.0 <= frac <= 1.0:
        raise AnalysisError(f"frac must lie in [0, 1], got {frac}")
    if frac == 0.0 or size == 0:
        return 0
    return min(size, max(1, round_half_up(frac * size)))


@dataclass
class PruneResult:
    retained: np.ndarray
    redundant: np.ndarray
    largest_cluster: np.ndarray
    removed_from_cluster: np.ndarray


def prune_pipeline(n: int, k, M: int, frac: float, rng: np.random.Generator) -> PruneResult:
    """Drop redundant samples, cluster the rest and thin the largest cluster.

    ``M`` is capped at the number of samples left after redundancy removal.
    Indices in the result refer to the original ``n`` samples.
    """
    K = as_dense(k)
    if K.shape[0] != n:
        raise AnalysisError(f"kernel has {K.shape[0]} rows, expected {n}")
    redundant = find_redundant(K)
    keep = np.setdiff1d(np.arange(n), redundant)
    empty = np.zeros(0, dtype=np.int64)
    if keep.size == 0:
        return PruneResult(keep, redundant, empty, empty)
    r = fpc(K[np.ix_(keep, keep)], min(M, keep.size))
    head = keep[np.asarray(r.cluster(r.largest()))]
    drop = np.sort(rng.choice(head, size=prune_count(frac, head.size), replace=False))
    return PruneResult(np.setdiff1d(keep, drop), redundant, head, drop.astype(np.int64))


def select_from_largest_cluster(k, M: int, budget: int, rng: np.random.Generator) -> np.ndarray:
    """``budget`` samples from the largest cluster, overflowing to the next ones by size."""
    K = as_dense(k)
    if not 0 <= budget <= K.shape[0]:
        raise AnalysisError("budget must lie in [0, n]")
    r = fpc(K, M)
    order = sorted(range(len(r.centroids)), key=lambda j: (-r.sizes[j], j))
    chosen = []
    for j in order:
        need = budget - len(chosen)
        if need <= 0:
            break
        pool = np.asarray(r.cluster(j))
        if pool.size <= need:
            chosen.extend(pool.tolist())
        else:
            chosen.extend(rng.choice(pool, size=need, replace=False).tolist())
    return np.sort(np.asarray(chosen, dtype=np.int64))


# --- learning difficulty ----------------------------------------------------------


@dataclass(frozen=True)
class DifficultyRecord:
    sample_id: int
    difficulty: float


def learning_difficulty(tlog: TrainLog, epochs: int | None = None) -> list:
    """Per-sample training loss summed over the first ``epochs`` epochs (all by default)."""
    L = np.asarray(tlog.losses)
    if L.ndim != 2 or L.shape[1] != len(tlog.sample_ids):
        raise AnalysisError("training log does not cover every sample")
    if not np.all(np.isfinite(L)) or (L < 0).any():
        raise AnalysisError("training log has missing or negative losses")
    L = L if epochs is None else L[:epochs]
    totals = L.sum(axis=0)
    return [DifficultyRecord(int(i), float(v)) for i, v in zip(tlog.sample_ids, totals)]


def difficulty_correlation(full: list, sub: list) -> float:
    a = {r.sample_id: r.difficulty for r in full}
    b = {r.sample_id: r.difficulty for r in sub}
    if a.keys() != b.keys():
        raise AnalysisError("difficulty records cover different sample ids")
    ids = sorted(a)
    return pearson([a[i] for i in ids], [b[i] for i in ids])


def write_difficulty_csv(path, records: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "difficulty"])
        for r in records:
            w.writerow([r.sample_id, repr(r.difficulty)])


def difficulty_control_sets(k, r: FpcResult, target: int, m: int):
    """(interchangeable, non-interchangeable, medium) pools around ``target``.

    Interchangeable and medium are the highest- and lowest-similarity members
    of the head cluster; non-interchangeable are the lowest-similarity samples
    from every other cluster.  Ties are broken by index.
    """
    K = as_dense(k)
    head = r.largest()
    if target != r.centroids[head]:
        raise AnalysisError("target must be the centroid of the head cluster")
    if m == 0:
        e = np.zeros(0, dtype=np.int64)
        return e, e.copy(), e.copy()
    head_pool = np.asarray(sorted(r.members[head]), dtype=np.int64)
    tail_pool = np.asarray(sorted(i for j in range(len(r.centroids)) if j != head
                                  for i in r.cluster(j)), dtype=np.int64)
    if head_pool.size < 2 * m or tail_pool.size < m:
        raise AnalysisError(f"need {2 * m} head members and {m} tail samples; "
                            f"have {head_pool.size} and {tail_pool.size}")
    sims = K[target]
    head_order = head_pool[np.lexsort((head_pool, -sims[head_pool]))]
    easy = np.sort(head_order[:m])
    medium = np.sort(head_order[::-1][:m])
    hard = np.sort(tail_pool[np.lexsort((tail_pool, sims[tail_pool]))][:m])
    return easy, hard, medium


# --- forgetting events ------------------------------------------------------------


@dataclass(frozen=True)
class ForgettingEvent:
    sample_id: int
    iteration: int  # the step at which the wrong prediction is observed
    previous: int
    new: int


def detect_forgetting(tlog: TrainLog, ids=None) -> list:
    """Every correct-to-incorrect transition in the per-iteration predictions."""
    preds = np.asarray(tlog.iter_predictions)
    if preds.ndim != 2:
        return []
    y = tlog.labels
    cols = np.arange(preds.shape[1]) if ids is None else np.asarray(ids)
    events = []
    for u in range(1, preds.shape[0]):
        prev, cur = preds[u - 1, cols], preds[u, cols]
        hit = (prev == y[cols]) & (cur != y[cols])
        for c in cols[hit]:
            events.append(ForgettingEvent(int(tlog.sample_ids[c]), u, int(preds[u - 1, c]), int(preds[u, c])))
    return events


def batch_forgetting(tlog: TrainLog, t: int) -> set:
    """Forgetting of the step-``t`` batch between ``w^{t+1}`` and ``w^{t+2}``, keyed (id, t)."""
    preds = tlog.iter_predictions
    batch = tlog.iter_batches[t]
    y = tlog.labels[batch]
    hit = (preds[t + 1][batch] == y) & (preds[t + 2][batch] != y)
    return {(int(tlog.sample_ids[b]), t) for b in batch[hit]}


def eligible_slots(tlog: TrainLog, t: int) -> list:
    """Step-``t`` batch samples that are correct under ``w^{t+1}``: the only slots where a
    forgetting event can be observed or predicted."""
    batch = tlog.iter_batches[t]
    ok = tlog.iter_predictions[t + 1][batch] == tlog.labels[batch]
    return [(int(tlog.sample_ids[b]), t) for b in batch[ok]]


def forgetting_deltas(X_t, y_t, X_t1, y_t1, params_t1, spec: NetworkSpec, scale: float) -> np.ndarray:
    """``Delta q_i = scale * sum_j kappa_variant(x_i^t, x_j^{t+1}) * s_variant(y_i)``."""
    F_t = features(params_t1, spec, X_t, y_t, "lpntk_variant")
    F_t1 = features(params_t1, spec, X_t1, y_t1, "lpntk_variant")
    total = F_t1.sum(axis=0)
    acc = np.array([dot(f, total) for f in F_t])
    S = -np.ones((len(y_t), spec.K))
    S[np.arange(len(y_t)), y_t] = spec.K - 1.0
    return scale * acc[:, None] * S


def predict_forgetting(X_t, y_t, X_t1, y_t1, params_t1, spec: NetworkSpec, eta: float,
                       scale: float | None = None) -> np.ndarray:
    """Boolean mask over the step-``t`` batch of predicted forgetting events.

    ``scale`` multiplies the accumulated variant kernel and defaults to ``eta``.
    """
    y_t = np.asarray(y_t)
    q = predict_proba(params_t1, spec, X_t)
    dq = forgetting_deltas(X_t, y_t, X_t1, y_t1, params_t1, spec, eta if scale is None else scale)
    return forgetting_flips(q, y_t, dq)


def forgetting_flips(q, y, dq) -> np.ndarray:
    """Rows that are correct under ``q`` but not under ``q + dq``."""
    q, dq, y = np.atleast_2d(q), np.atleast_2d(dq), np.atleast_1d(y)
    return (np.argmax(q, axis=1) == y) & (np.argmax(q + dq, axis=1) != y)


def predict_forgetting_from_log(tlog: TrainLog, X, spec: NetworkSpec, eta: float, t: int,
                                scale: float | None = None) -> set:
    b0, b1 = tlog.iter_batches[t], tlog.iter_batches[t + 1]
    hit = predict_forgetting(X[b0], tlog.labels[b0], X[b1], tlog.labels[b1],
                             tlog.iter_params[t + 1], spec, eta, scale)
    return {(int(tlog.sample_ids[b]), t) for b in b0[hit]}


@dataclass(frozen=True)
class PredictionReport:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    undefined_precision: bool = False
    undefined_recall: bool = False


def score_predictions(predicted, actual) -> PredictionReport:
    predicted, actual = set(predicted), set(actual)
    tp = len(predicted & actual)
    fp = len(predicted - actual)
    fn = len(actual - predicted)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return PredictionReport(tp, fp, fn, precision, recall, f1, tp + fp == 0, tp + fn == 0)


def permutation_baseline(count: int, slots: list, actual, rng: np.random.Generator) -> PredictionReport:
    """Score ``count`` predictions placed uniformly at random over ``slots``."""
    count = min(count, len(slots))
    pick = rng.choice(len(slots), size=count, replace=False) if count else []
    return score_predictions({slots[i] for i in pick}, actual)


def write_report_csv(path, report: PredictionReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tp", "fp", "fn", "precision", "recall", "f1"])
        w.writerow([report.tp, report.fp, report.fn, repr(report.precision),
                    repr(report.recall), repr(report.f1)])


def kernel_fingerprint(k) -> str:
    return k.fingerprint_hex if isinstance(k, KernelMatrix) else ""
