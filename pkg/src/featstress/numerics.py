"""Shared numeric kernels.

Row normalization, the seeded random stream contract, and a symmetric
eigensolver (cyclic Jacobi with a parallel round-robin ordering) used to
fit principal-component bases.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "EigenBasis",
    "EigenConvergenceError",
    "RngStream",
    "derive_seed",
    "fit_eigenbasis",
    "jacobi_eigh",
    "l2_normalize",
    "project",
    "reconstruct",
]

ZERO_NORM = 1e-12
JACOBI_MAX_DIM = 256

_U64 = (1 << 64) - 1


class EigenConvergenceError(RuntimeError):
    """Raised when the Jacobi sweep cap is hit before the off-diagonal mass vanishes."""


def l2_normalize(v):
    """Scale a vector, or every row of a matrix, to unit Euclidean norm.

    Rows whose norm is below ``1e-12`` are returned unchanged so that
    constant (fully quantized) rows never turn into NaN.
    """
    arr = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("l2_normalize: non-finite input")
    if arr.ndim == 1:
        norm = np.sqrt(np.dot(arr, arr))
        return arr.copy() if norm < ZERO_NORM else arr / norm
    if arr.ndim != 2:
        raise ValueError(f"l2_normalize: expected 1-D or 2-D input, got {arr.ndim}-D")
    norms = np.sqrt(np.einsum("ij,ij->i", arr, arr))
    norms[norms < ZERO_NORM] = 1.0
    return arr / norms[:, None]


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


def _digest_words(text: str, n_words: int = 4) -> list[int]:
    raw = hashlib.blake2b(text.encode("utf-8"), digest_size=4 * n_words).digest()
    return list(struct.unpack(f"<{n_words}I", raw))


def derive_seed(master_seed: int, *parts) -> int:
    """Derive a 64-bit child seed from a master seed and a tuple of cell identifiers.

    The mapping is a BLAKE2b hash of the textual parts, so changing one
    cell's identifiers never perturbs the seed of another cell.
    """
    text = "|".join([str(int(master_seed) & _U64), *(str(p) for p in parts)])
    raw = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return struct.unpack("<Q", raw)[0]


@dataclass(frozen=True)
class RngStream:
    """Named, reproducible random stream.

    The (seed, label) pair is hashed into a ``SeedSequence`` that drives a
    PCG64 bit generator; identical pairs give identical streams on every
    platform.
    """

    seed: int
    label: str = ""

    def seed_words(self) -> list[int]:
        s = int(self.seed) & _U64
        return [s & 0xFFFFFFFF, s >> 32, *_digest_words(self.label)]

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed_words())))

    def child(self, label: str) -> "RngStream":
        return RngStream(self.seed, f"{self.label}/{label}" if self.label else label)


# ---------------------------------------------------------------------------
# Symmetric eigendecomposition
# ---------------------------------------------------------------------------


@lru_cache(maxsize=32)
def _round_robin(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    # Circle-method tournament: every (p, q) pair appears exactly once per
    # sweep and the pairs inside a round are disjoint, so a round's
    # rotations commute and can be applied together.
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a >= n or b >= n:
                continue
            ps.append(min(a, b))
            qs.append(max(a, b))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0], players[-1], *players[1:-1]]
    return tuple(rounds)


def jacobi_eigh(a, tol: float = 1e-14, max_sweeps: int = 60):
    """Eigen-decompose a real symmetric matrix with cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues in descending
    order and eigenvectors as columns. Raises ``EigenConvergenceError`` if
    the relative off-diagonal norm is still above ``tol`` after
    ``max_sweeps`` sweeps.
    """
    A = np.array(a, dtype=np.float64, copy=True)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("jacobi_eigh: matrix must be square")
    n = A.shape[0]
    A = 0.5 * (A + A.T)
    V = np.eye(n)
    if n == 1:
        return A.diagonal().copy(), V

    scale = np.linalg.norm(A)
    if scale == 0.0:
        return np.zeros(n), V
    rounds = _round_robin(n)

    offdiag = ~np.eye(n, dtype=bool)

    def off_norm() -> float:
        return float(np.linalg.norm(A[offdiag]))

    for _ in range(max_sweeps):
        if off_norm() <= tol * scale:
            break
        for p, q in rounds:
            apq = A[p, q]
            active = np.abs(apq) > 0.0
            if not active.any():
                continue
            p, q, apq = p[active], q[active], apq[active]
            app, aqq = A[p, p], A[q, q]
            diff = aqq - app
            # |theta| > 1e150 would overflow theta**2; t ~ 1/(2 theta) there.
            big = np.abs(diff) > 1e150 * np.abs(2.0 * apq)
            theta = np.where(big, 1.0, diff) / np.where(big, 1.0, 2.0 * apq)
            t = np.where(
                big,
                apq / np.where(big, diff, 1.0),
                np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.sqrt(theta * theta + 1.0)),
            )
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c

            rp, rq = A[p, :], A[q, :]
            A[p, :] = c[:, None] * rp - s[:, None] * rq
            A[q, :] = s[:, None] * rp + c[:, None] * rq
            cp, cq = A[:, p], A[:, q]
            A[:, p] = cp * c - cq * s
            A[:, q] = cp * s + cq * c
            A[p, q] = 0.0
            A[q, p] = 0.0
            vp, vq = V[:, p], V[:, q]
            V[:, p] = vp * c - vq * s
            V[:, q] = vp * s + vq * c
    else:
        if off_norm() > tol * scale:
            raise EigenConvergenceError(
                f"jacobi_eigh: off-diagonal norm {off_norm():.3e} above "
                f"{tol:.1e} relative after {max_sweeps} sweeps"
            )

    w = A.diagonal().copy()
    order = np.argsort(-w, kind="stable")
    return w[order], V[:, order]


def _symmetric_eigh(a, solver: str):
    if solver == "auto":
        solver = "jacobi" if a.shape[0] <= JACOBI_MAX_DIM else "lapack"
    if solver == "jacobi":
        return jacobi_eigh(a)
    if solver == "lapack":
        w, v = np.linalg.eigh(a)
        order = np.argsort(-w, kind="stable")
        return w[order], v[:, order]
    raise ValueError(f"unknown eigensolver {solver!r}")


def _canonical_signs(components: np.ndarray) -> np.ndarray:
    # Largest-magnitude entry of each component is made positive.
    idx = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(components.shape[0]), idx])
    signs[signs == 0] = 1.0
    return components * signs[:, None]


@dataclass(frozen=True, eq=False)
class EigenBasis:
    """Principal axes of a training matrix.

    ``components`` holds one unit vector per row, sorted by decreasing
    ``eigenvalues`` (the sample variance, ddof=1, along each axis).
    """

    mean: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray

    @property
    def dims(self) -> int:
        return int(self.mean.shape[0])

    @property
    def n_components(self) -> int:
        return int(self.components.shape[0])

    def to_dict(self) -> dict:
        from .featstore import encode_array

        return {
            "dims": self.dims,
            "n_components": self.n_components,
            "eigenvalues": [float(x) for x in self.eigenvalues],
            "mean": encode_array(self.mean[None, :]),
            "components": encode_array(self.components),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EigenBasis":
        from .featstore import decode_array

        mean = decode_array(d["mean"])[0]
        components = decode_array(d["components"])
        eigenvalues = np.asarray(d["eigenvalues"], dtype=np.float64)
        if mean.shape[0] != d["dims"] or components.shape != (d["n_components"], d["dims"]):
            raise ValueError("EigenBasis: manifest shape does not match payload")
        return cls(mean=mean, components=components, eigenvalues=eigenvalues)


def _orthonormal_complement(basis: np.ndarray, dims: int, count: int, solver: str) -> np.ndarray:
    residual = np.eye(dims) - basis.T @ basis
    _, vecs = _symmetric_eigh(residual, solver)
    return vecs[:, :count].T


def fit_eigenbasis(train, solver: str = "auto") -> EigenBasis:
    """Fit the principal-component basis of a training matrix.

    Returns ``min(rows - 1, dims)`` components. When there are fewer rows
    than dimensions the decomposition goes through the rows-by-rows Gram
    matrix instead of the covariance.
    """
    X = np.asarray(getattr(train, "values", train), dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("fit_eigenbasis: expected a 2-D matrix")
    rows, dims = X.shape
    if rows < 2:
        raise ValueError("fit_eigenbasis: need at least 2 training rows")
    if not np.all(np.isfinite(X)):
        raise ValueError("fit_eigenbasis: non-finite training values")

    mean = X.mean(axis=0)
    Xc = X - mean
    k = min(rows - 1, dims)
    denom = rows - 1

    if rows < dims:
        gram = Xc @ Xc.T / denom
        w, U = _symmetric_eigh(gram, solver)
        w, U = w[:k], U[:, :k]
        floor = max(float(w[0]), 0.0) * 1e-12 if k else 0.0
        valid = w > floor
        comps = np.zeros((k, dims))
        if valid.any():
            raw = Xc.T @ U[:, valid]
            comps[valid] = (raw / np.linalg.norm(raw, axis=0)).T
        if (~valid).any():
            comps[~valid] = _orthonormal_complement(comps[valid], dims, int((~valid).sum()), solver)
        w = np.where(valid, w, 0.0)
    else:
        cov = Xc.T @ Xc / denom
        w, V = _symmetric_eigh(cov, solver)
        w, comps = w[:k], V[:, :k].T

    comps = _canonical_signs(np.ascontiguousarray(comps))
    eigenvalues = np.maximum(w, 0.0)
    return EigenBasis(mean=mean, components=comps, eigenvalues=eigenvalues)


def project(basis: EigenBasis, m, p: int) -> np.ndarray:
    """Coordinates of the rows of ``m`` along the first ``p`` principal axes."""
    X = np.asarray(getattr(m, "values", m), dtype=np.float64)
    if not 1 <= p <= basis.n_components:
        raise ValueError(f"project: p={p} outside [1, {basis.n_components}]")
    if X.ndim != 2 or X.shape[1] != basis.dims:
        raise ValueError(f"project: expected {basis.dims} columns, got shape {X.shape}")
    return (X - basis.mean) @ basis.components[:p].T


def reconstruct(basis: EigenBasis, z) -> np.ndarray:
    """Map projected coordinates back into the original space."""
    Z = np.asarray(z, dtype=np.float64)
    return Z @ basis.components[: Z.shape[1]] + basis.mean
