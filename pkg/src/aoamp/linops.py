"""Orthogonal operators, random source sampling, and block-partition utilities.

Everything here is deterministic given a seed: identical (kind, n, seed)
arguments reproduce bitwise-identical operators and samples.  Operators are
immutable after construction and safe to share across trial workers.
"""

import zlib
from dataclasses import dataclass

import numpy as np


# ---------------------------------------------------------------------------
# Seeding
# ---------------------------------------------------------------------------

def rng_from(seed, *path):
    """Derive an independent Generator from a master seed and a key path.

    Path elements may be ints or strings; strings are hashed (crc32) so that
    e.g. rng_from(7, "trial", 3) is stable across runs and platforms.
    """
    key = tuple(zlib.crc32(p.encode()) if isinstance(p, str) else int(p)
                for p in path)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


# ---------------------------------------------------------------------------
# Block partitioning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlockIndex:
    """Column partition of a J-column matrix into K blocks of M columns."""
    total_cols: int
    block_size: int

    def __post_init__(self):
        if self.total_cols <= 0 or self.block_size <= 0:
            raise ValueError("block partition dimensions must be positive")
        if self.total_cols % self.block_size != 0:
            raise ValueError(
                f"block size {self.block_size} does not divide {self.total_cols}")

    @property
    def n_blocks(self):
        return self.total_cols // self.block_size


def block_view(m, idx, k):
    """Return the k-th column block (1-based) of m as a view."""
    if not 1 <= k <= idx.n_blocks:
        raise IndexError(f"block {k} out of range 1..{idx.n_blocks}")
    if m.shape[1] != idx.total_cols:
        raise ValueError("matrix column count does not match partition")
    lo = (k - 1) * idx.block_size
    return m[:, lo:lo + idx.block_size]


# ---------------------------------------------------------------------------
# Orthogonal operators
# ---------------------------------------------------------------------------

class OrthogonalOperator:
    """Base class: a square orthogonal (unitary) map with fast apply rules."""

    kind = "abstract"

    def __init__(self, n, cplx, seed=None):
        if n < 1:
            raise ValueError(f"operator dimension must be >= 1, got {n}")
        self.n = int(n)
        self.cplx = bool(cplx)
        self.seed = seed

    def apply(self, x):
        raise NotImplementedError

    def apply_adjoint(self, x):
        raise NotImplementedError

    def as_matrix(self):
        """Materialize the dense matrix (intended for small n / audits)."""
        eye = np.eye(self.n, dtype=np.complex128 if self.cplx else np.float64)
        return self.apply(eye)

    def _check(self, x):
        if x.shape[0] != self.n:
            raise ValueError(f"operand has {x.shape[0]} rows, operator is {self.n}-dim")


class IdentityOperator(OrthogonalOperator):
    kind = "identity"

    def __init__(self, n, cplx=False):
        super().__init__(n, cplx)

    def apply(self, x):
        self._check(x)
        return x.copy()

    def apply_adjoint(self, x):
        self._check(x)
        return x.copy()


class DenseOperator(OrthogonalOperator):
    """Explicit dense orthogonal matrix (e.g. a Haar sample)."""

    kind = "explicit-dense"

    def __init__(self, mat, seed=None):
        mat = np.asarray(mat)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise ValueError("dense operator requires a square matrix")
        super().__init__(mat.shape[0], np.iscomplexobj(mat), seed)
        self.mat = mat

    def apply(self, x):
        self._check(x)
        return self.mat @ x

    def apply_adjoint(self, x):
        self._check(x)
        return self.mat.conj().T @ x

    def as_matrix(self):
        return self.mat.copy()


class PermutedDftOperator(OrthogonalOperator):
    """Row-permuted unitary DFT with a random unit-modulus diagonal.

    V = P F D applied as: diagonal, orthonormal FFT, row permutation.
    Forward/adjoint cost O(n log n) for any n.  Complex by construction.

    The diagonal exists to decouple the transform from the deterministic
    DFT structure for real-valued inputs.  diagonal='phase' (default) draws
    uniform phases, which actually breaks the conjugate-row symmetry a real
    input would otherwise keep; 'sign' (+-1 entries) and None are available
    but leave that symmetry intact.
    """

    kind = "permuted-dft"

    def __init__(self, n, seed, diagonal="phase"):
        super().__init__(n, cplx=True, seed=seed)
        rng = rng_from(seed, "permuted-dft", n)
        self.perm = rng.permutation(n)
        self.inv_perm = np.argsort(self.perm)
        if diagonal == "phase":
            self.diag = np.exp(2j * np.pi * rng.random(n))
        elif diagonal == "sign":
            self.diag = (rng.integers(0, 2, size=n) * 2 - 1).astype(np.complex128)
        elif diagonal is None:
            self.diag = None
        else:
            raise ValueError(f"unknown diagonal kind {diagonal!r}")

    def apply(self, x):
        self._check(x)
        y = x if self.diag is None else self.diag[:, None] * x
        y = np.fft.fft(y, axis=0, norm="ortho")
        return y[self.perm]

    def apply_adjoint(self, x):
        self._check(x)
        y = x[self.inv_perm]
        y = np.fft.ifft(y, axis=0, norm="ortho")
        if self.diag is not None:
            y = np.conj(self.diag)[:, None] * y
        return y


def sample_haar(n, seed, cplx=False):
    """Draw an explicit Haar-distributed orthogonal (unitary) operator.

    QR of an IID Gaussian matrix with the R-diagonal phase correction, which
    yields exactly Haar measure on the orthogonal / unitary group.
    """
    if n < 1:
        raise ValueError(f"operator dimension must be >= 1, got {n}")
    rng = rng_from(seed, "haar", n)
    if cplx:
        a = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n)))
        a /= np.sqrt(2.0)
    else:
        a = rng.standard_normal((n, n))
    q, r = np.linalg.qr(a)
    d = np.diagonal(r)
    ph = d / np.abs(d)
    return DenseOperator(q * ph[None, :], seed=seed)


def permuted_dft(n, seed, diagonal="phase"):
    """Fast pseudo-Haar unitary: row-permuted DFT (any n >= 1)."""
    return PermutedDftOperator(n, seed, diagonal=diagonal)


# ---------------------------------------------------------------------------
# Source sampling
# ---------------------------------------------------------------------------

SOURCE_KINDS = ("bpsk", "correlated-bpsk", "gaussian")


@dataclass(frozen=True)
class SourceSpec:
    """Prior on the rows of a latent matrix.

    kind 'bpsk': IID +-1 entries.  kind 'correlated-bpsk': two columns per
    row with P(x2 = -x1) = alpha.  kind 'gaussian': IID N(0, var).
    """
    kind: str = "bpsk"
    alpha: float | None = None
    var: float = 1.0

    def __post_init__(self):
        if self.kind not in SOURCE_KINDS:
            raise ValueError(f"unknown source kind {self.kind!r}")
        if self.kind == "correlated-bpsk":
            if self.alpha is None or not 0.0 <= self.alpha <= 1.0:
                raise ValueError("correlated-bpsk requires 0 <= alpha <= 1")
        if self.var <= 0:
            raise ValueError("source variance must be positive")

    def sample(self, n, m, rng):
        if self.kind == "bpsk":
            return (rng.integers(0, 2, size=(n, m)) * 2 - 1).astype(np.float64)
        if self.kind == "correlated-bpsk":
            if m != 2:
                raise ValueError("correlated-bpsk requires m = 2")
            x1 = (rng.integers(0, 2, size=n) * 2 - 1).astype(np.float64)
            flip = rng.random(n) < self.alpha
            x2 = np.where(flip, -x1, x1)
            return np.stack([x1, x2], axis=1)
        return np.sqrt(self.var) * rng.standard_normal((n, m))

    def row_cov(self, m):
        """M x M second moment of one row under the prior."""
        if self.kind == "correlated-bpsk":
            if m != 2:
                raise ValueError("correlated-bpsk requires m = 2")
            rho = 1.0 - 2.0 * self.alpha
            return np.array([[1.0, rho], [rho, 1.0]])
        if self.kind == "bpsk":
            return np.eye(m)
        return self.var * np.eye(m)

    @property
    def power(self):
        """Per-entry power E|x|^2."""
        return 1.0 if self.kind in ("bpsk", "correlated-bpsk") else self.var


def sample_sources(kind, n, m, seed, alpha=None, var=1.0):
    """Sample an n x m source matrix; see SourceSpec for the kinds."""
    spec = SourceSpec(kind, alpha=alpha, var=var)
    rng = seed if isinstance(seed, np.random.Generator) else rng_from(seed, "sources")
    return spec.sample(n, m, rng)
