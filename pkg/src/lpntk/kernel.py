"""eNTK blocks, pNTK, lpNTK and its forgetting variant, kernel matrices.

A labelled sample ``(x, y)`` is mapped to the feature
``phi = s(y)^T J(x) / sqrt(K)`` where ``J`` is the K x d logit Jacobian and
``s(y)`` is +1 at the label and -1 elsewhere.  lpNTK is the inner product of two
such features.  pNTK uses the all-ones vector in place of ``s(y)``; the variant
used for forgetting prediction uses ``K - 1`` at the label instead of +1.
"""

from __future__ import annotations

import csv
import hashlib
import math
import os
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LabeledDataset
from .model import (NetworkSpec, forward, init_params, logit_jacobian, logit_jacobians,
                    loss_gradient, lower_entk, penultimate_backprop, softmax_jacobian, unflatten)
from .numerics import dot, row_dots

KINDS = ("pntk", "lpntk", "lpntk_variant")
DEFAULT_CACHE_BYTES = 1 << 30
ZERO_FINGERPRINT = bytes(32)


class KernelError(ValueError):
    pass


def sign_vector(y: int, K: int, variant: bool = False) -> np.ndarray:
    if not 0 <= y < K:
        raise KernelError(f"label {y} out of range for K={K}")
    s = -np.ones(K)
    s[y] = K - 1.0 if variant else 1.0
    return s


def _mask_vectors(labels: np.ndarray, K: int, kind: str) -> np.ndarray:
    if kind == "pntk":
        return np.ones((len(labels), K))
    variant = kind == "lpntk_variant"
    return np.stack([sign_vector(int(y), K, variant) for y in labels]) if len(labels) else np.zeros((0, K))


def _combine(S: np.ndarray, J: np.ndarray) -> np.ndarray:
    """``S[n] @ J[n] / sqrt(K)`` accumulated in a fixed class order.

    Works on a single (K,), (K, d) pair or stacked (N, K), (N, K, d) arrays and
    gives identical bits either way.
    """
    K = S.shape[-1]
    out = S[..., 0, None] * J[..., 0, :]
    for k in range(1, K):
        out = out + S[..., k, None] * J[..., k, :]
    return out * (1.0 / math.sqrt(K))


def entk_block(J_o: np.ndarray, J_u: np.ndarray) -> np.ndarray:
    """K x K block ``J_o J_u^T``."""
    if J_o.shape[1] != J_u.shape[1]:
        raise KernelError(f"Jacobian width mismatch: {J_o.shape} vs {J_u.shape}")
    return J_o @ J_u.T


def pntk(block: np.ndarray) -> float:
    return float(np.sum(block)) / block.shape[0]


def lpntk_feature(J: np.ndarray, y: int, variant: bool = False) -> np.ndarray:
    return _combine(sign_vector(y, J.shape[0], variant), J)


def pntk_feature(J: np.ndarray) -> np.ndarray:
    return _combine(np.ones(J.shape[0]), J)


def lpntk_pair(phi_o: np.ndarray, phi_u: np.ndarray) -> float:
    if phi_o.shape != phi_u.shape:
        raise KernelError(f"feature length mismatch: {phi_o.shape} vs {phi_u.shape}")
    return dot(phi_o, phi_u)


def lpntk_from_block(block: np.ndarray, y_o: int, y_u: int, variant: bool = False) -> float:
    """Sign-masked block sum ``(1/K) sum[(s(y_o) s(y_u)^T) * K(x_o, x_u)]``."""
    K = block.shape[0]
    mask = np.outer(sign_vector(y_o, K, variant), sign_vector(y_u, K, variant))
    return float(np.sum(mask * block)) / K


def features(params: np.ndarray, spec: NetworkSpec, X: np.ndarray, labels: np.ndarray,
             kind: str = "lpntk", cache_bytes: int = DEFAULT_CACHE_BYTES) -> np.ndarray:
    """(N, d) kernel features; Jacobians are streamed in blocks under ``cache_bytes``."""
    if kind not in KINDS:
        raise KernelError(f"unknown kernel kind {kind!r}")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    N = X.shape[0]
    d = spec.n_params
    block = max(1, int(cache_bytes // (8 * spec.K * d)))
    S = _mask_vectors(np.asarray(labels), spec.K, kind)
    F = np.empty((N, d))
    for start in range(0, N, block):
        stop = min(N, start + block)
        J = logit_jacobians(params, spec, X[start:stop])
        bad = ~np.all(np.isfinite(J.reshape(stop - start, -1)), axis=1)
        if bad.any():
            raise KernelError(f"non-finite Jacobian for sample {start + int(np.argmax(bad))}")
        F[start:stop] = _combine(S[start:stop], J)
    return F


def _tri_offset(i: int, n: int) -> int:
    return i * n - i * (i - 1) // 2


@dataclass
class KernelMatrix:
    """Symmetric N x N kernel kept as its packed upper triangle (row-major)."""

    n: int
    kind: str
    K: int
    values: np.ndarray
    fingerprint: bytes = ZERO_FINGERPRINT
    ids: np.ndarray | None = None
    _dense: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise KernelError(f"unknown kernel kind {self.kind!r}")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.n * (self.n + 1) // 2,):
            raise KernelError("packed value count does not match n")
        if len(self.fingerprint) != 32:
            raise KernelError("fingerprint must be 32 bytes")
        if self.ids is None:
            self.ids = np.arange(self.n)

    @classmethod
    def from_dense(cls, M, kind: str = "lpntk", K: int = 2,
                   fingerprint: bytes = ZERO_FINGERPRINT, ids=None) -> "KernelMatrix":
        M = np.asarray(M, dtype=np.float64)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise KernelError("kernel must be square")
        if not np.array_equal(M, M.T):
            raise KernelError("kernel must be symmetric")
        n = M.shape[0]
        values = np.concatenate([M[i, i:] for i in range(n)]) if n else np.zeros(0)
        return cls(n, kind, K, values, fingerprint, ids)

    def entry(self, i: int, j: int) -> float:
        if i > j:
            i, j = j, i
        return float(self.values[_tri_offset(i, self.n) + j - i])

    def dense(self) -> np.ndarray:
        if self._dense is None:
            M = np.empty((self.n, self.n))
            for i in range(self.n):
                row = self.values[_tri_offset(i, self.n):_tri_offset(i + 1, self.n)]
                M[i, i:] = row
                M[i:, i] = row
            M.flags.writeable = False
            self._dense = M
        return self._dense

    def submatrix(self, index) -> "KernelMatrix":
        index = np.asarray(index, dtype=np.int64)
        return KernelMatrix.from_dense(self.dense()[np.ix_(index, index)], self.kind, self.K,
                                       self.fingerprint, self.ids[index])

    @property
    def fingerprint_hex(self) -> str:
        return self.fingerprint.hex()


def as_dense(k) -> np.ndarray:
    return k.dense() if isinstance(k, KernelMatrix) else np.asarray(k, dtype=np.float64)


def gram_packed(F: np.ndarray, threads: int = 1) -> np.ndarray:
    """Packed upper triangle of ``F F^T``; bit-identical for any thread count."""
    n = F.shape[0]
    out = np.empty(n * (n + 1) // 2)

    def fill(rows):
        for i in rows:
            out[_tri_offset(i, n):_tri_offset(i + 1, n)] = row_dots(F[i:], F[i])

    if threads <= 1 or n < 2:
        fill(range(n))
    else:
        # contiguous row blocks holding roughly equal shares of the triangle
        work = np.cumsum(np.arange(n, 0, -1))
        cuts = np.searchsorted(work, work[-1] * np.arange(1, threads) / threads, side="right")
        bounds = [0, *sorted(set(int(c) for c in cuts)), n]
        chunks = [range(a, b) for a, b in zip(bounds, bounds[1:]) if b > a]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill, chunks))
    return out


def checkpoint_fingerprint(raw: bytes) -> bytes:
    return hashlib.sha256(raw).digest()


def kernel_matrix(dataset: LabeledDataset, params: np.ndarray, spec: NetworkSpec, kind: str = "lpntk",
                  cache_bytes: int | None = None, threads: int = 1,
                  fingerprint: bytes | None = None) -> KernelMatrix:
    """Kernel over every pair of ``dataset`` at the fixed parameters ``params``.

    The caller supplies the selected checkpoint; its fingerprint defaults to the
    SHA-256 of the serialised checkpoint.
    """
    from .model import checkpoint_bytes

    if cache_bytes is None:
        cache_bytes = int(os.environ.get("LPNTK_CACHE_BYTES", DEFAULT_CACHE_BYTES))
    F = features(params, spec, dataset.features, dataset.labels, kind, cache_bytes)
    if fingerprint is None:
        fingerprint = checkpoint_fingerprint(checkpoint_bytes(params, spec))
    return KernelMatrix(dataset.n, kind, spec.K, gram_packed(F, threads), fingerprint, dataset.ids.copy())


def require_same_checkpoint(*kernels: KernelMatrix) -> None:
    prints = {k.fingerprint for k in kernels}
    if len(prints) > 1:
        raise KernelError("kernel matrices come from different checkpoints")


# --- kernel file ------------------------------------------------------------------

KERNEL_MAGIC = b"LPK1"


def kernel_bytes(k: KernelMatrix) -> bytes:
    body = KERNEL_MAGIC + struct.pack("<BII", KINDS.index(k.kind), k.n, k.K) + k.fingerprint
    body += k.values.astype("<f8").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def save_kernel(path, k: KernelMatrix) -> None:
    Path(path).write_bytes(kernel_bytes(k))


def parse_kernel(raw: bytes) -> KernelMatrix:
    if raw[:4] != KERNEL_MAGIC:
        raise KernelError("not a kernel file (bad magic)")
    if len(raw) < 4 + 9 + 32 + 4:
        raise KernelError("truncated kernel file")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != crc:
        raise KernelError("kernel file CRC mismatch")
    kind, n, K = struct.unpack("<BII", raw[4:13])
    if kind >= len(KINDS):
        raise KernelError(f"unknown kernel kind code {kind}")
    fingerprint = raw[13:45]
    values = np.frombuffer(raw[45:-4], dtype="<f8").astype(np.float64)
    if values.size != n * (n + 1) // 2:
        raise KernelError("kernel file value count does not match n")
    return KernelMatrix(n, KINDS[kind], K, values, fingerprint)


def load_kernel(path) -> KernelMatrix:
    return parse_kernel(Path(path).read_bytes())


def write_kernel_csv(path, k: KernelMatrix) -> None:
    M = k.dense()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + [str(int(i)) for i in k.ids])
        for i, row in zip(k.ids, M):
            w.writerow([str(int(i))] + [repr(float(v)) for v in row])


# --- first-order prediction change ------------------------------------------------


def predict_delta(params, spec: NetworkSpec, x_u, y_u: int, x_o, eta: float) -> np.ndarray:
    """First-order change of ``q(x_o)`` after one SGD step on ``(x_u, y_u)``:
    ``eta * A(x_o) K(x_o, x_u) (p_tar(x_u) - q(x_u))``.
    """
    if eta < 0:
        raise KernelError("learning rate must be non-negative")
    q_u = forward(params, spec, x_u).probs
    q_o = forward(params, spec, x_o).probs
    err = -q_u
    err[y_u] += 1.0
    block = entk_block(logit_jacobian(params, spec, x_o), logit_jacobian(params, spec, x_u))
    return eta * (softmax_jacobian(q_o) @ (block @ err))


def actual_delta(params, spec: NetworkSpec, x_u, y_u: int, x_o, eta: float) -> np.ndarray:
    """Exact change of ``q(x_o)`` after the SGD step that :func:`predict_delta` models."""
    stepped = params - eta * loss_gradient(params, spec, x_u, y_u)
    return forward(stepped, spec, x_o).probs - forward(params, spec, x_o).probs


# --- lpNTK versus eNTK gap at initialisation ---------------------------------------


@dataclass(frozen=True)
class GapFamily:
    """Networks ``input -> lower_widths -> w_L -> K`` without biases, so the
    readout is the plain dense map ``z = W g``."""

    input_dim: int = 8
    lower_widths: tuple = (16,)
    K: int = 2
    activation: str = "relu"

    def spec(self, width: int) -> NetworkSpec:
        return NetworkSpec((self.input_dim, *self.lower_widths, width, self.K), self.activation, bias=False)


def gap_bound(alpha: float, width: int, K: int, delta: float) -> float:
    """High-probability bound on the width-scaled Frobenius gap."""
    t = math.log(8.0 * K * K / delta)
    return 8.0 * K * alpha / math.sqrt(width) * max(2.0 * math.sqrt(2.0 * t), math.sqrt(2.0) * t)


@dataclass
class GapTrial:
    gap: float
    raw_gap: float
    alpha: float
    kappa: float
    entk: np.ndarray


def gap_trial(params, spec: NetworkSpec, x, x2, y: int, y2: int, frozen_lower: bool = False) -> GapTrial:
    """eNTK block and lpNTK for one pair, split into readout and lower-layer terms.

    With ``frozen_lower`` only the readout weights are trainable, so the lower
    eNTK ``K^g`` is zero.
    """
    K = spec.K
    g, parts = penultimate_backprop(params, spec, x)
    g2, parts2 = penultimate_backprop(params, spec, x2)
    W = unflatten(params, spec)[-1][0]
    readout = float(g @ g2) + (1.0 if spec.bias else 0.0)
    if frozen_lower:
        Kg = np.zeros((g.size, g.size))
    else:
        Kg = lower_entk(parts, parts2)
    lower = W @ Kg @ W.T
    entk = readout * np.eye(K) + lower
    s, s2 = sign_vector(y, K), sign_vector(y2, K)
    kappa = (float(s @ s2) / K) * readout + float(s @ lower @ s2) / K
    raw = float(np.linalg.norm(kappa * np.eye(K) - entk))
    alpha = float(np.max(np.abs(Kg))) if Kg.size else 0.0
    width = spec.layer_widths[-2]
    return GapTrial(raw / math.sqrt(width), raw, alpha, kappa, entk)


@dataclass
class WidthGap:
    width: int
    gaps: np.ndarray
    raw_gaps: np.ndarray
    alphas: np.ndarray
    bounds: np.ndarray

    @property
    def satisfied(self) -> np.ndarray:
        return self.gaps <= self.bounds

    @property
    def satisfaction_rate(self) -> float:
        return float(np.mean(self.satisfied))

    @property
    def mean_gap(self) -> float:
        return float(np.mean(self.gaps))


@dataclass
class GapReport:
    delta: float
    K: int
    frozen_lower: bool
    widths: list

    def by_width(self, width: int) -> WidthGap:
        for w in self.widths:
            if w.width == width:
                return w
        raise KeyError(width)


def convergence_gap(family: GapFamily, widths, trials: int, delta: float, rng: np.random.Generator,
                    x=None, x2=None, y: int = 0, y2: int | None = None,
                    frozen_lower: bool = False) -> GapReport:
    """Monte-Carlo check of the gap bound over fresh LeCun initialisations.

    The input pair is drawn once (uniform in [0, 1]) unless given; labels
    default to a same-label pair, the setting in which the readout term of
    lpNTK and eNTK coincide.
    """
    if trials < 1:
        raise KernelError("need at least one trial")
    if not 0.0 < delta < 1.0:
        raise KernelError("delta must lie in (0, 1)")
    y2 = y if y2 is None else y2
    x = rng.random(family.input_dim) if x is None else np.asarray(x, dtype=np.float64)
    x2 = rng.random(family.input_dim) if x2 is None else np.asarray(x2, dtype=np.float64)
    rows = []
    for width in widths:
        if width < family.K:
            raise KernelError(f"width {width} is smaller than K={family.K}")
        spec = family.spec(width)
        res = [gap_trial(init_params(spec, rng), spec, x, x2, y, y2, frozen_lower) for _ in range(trials)]
        alphas = np.array([r.alpha for r in res])
        rows.append(WidthGap(width, np.array([r.gap for r in res]), np.array([r.raw_gap for r in res]),
                             alphas, np.array([gap_bound(a, width, family.K, delta) for a in alphas])))
    return GapReport(delta, family.K, frozen_lower, rows)
