"""Block-diagonal Hermitian covariance matrices.

Noise is correlated inside each subarray and independent across subarrays,
so the M x M covariance splits into L square blocks. Everything here
(factorization, solves, sampling, determinants) works per block; the dense
M x M matrix is only ever assembled on explicit request.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NotPositiveDefiniteError

# Relative eigenvalue floor applied when factoring estimated covariances;
# keeps near-singular sample blocks invertible (supported regime N >= max M_i).
EIG_FLOOR_REL = 1e-12


def _as_blocks(sizes) -> tuple[int, ...]:
    sizes = tuple(int(s) for s in sizes)
    if not sizes or any(s < 1 for s in sizes):
        raise ValueError(f"subarray sizes must be positive, got {sizes}")
    return sizes


@dataclass(frozen=True)
class BlockMask:
    """Support mask of a block-diagonal matrix: all-ones blocks of the given sizes."""

    subarray_sizes: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "subarray_sizes", _as_blocks(self.subarray_sizes))

    @property
    def dim(self) -> int:
        return sum(self.subarray_sizes)

    @property
    def n_blocks(self) -> int:
        return len(self.subarray_sizes)

    def slices(self) -> list[slice]:
        """Row/column slice of each block in the assembled matrix."""
        out, start = [], 0
        for m in self.subarray_sizes:
            out.append(slice(start, start + m))
            start += m
        return out

    def dense(self) -> np.ndarray:
        """0/1 support matrix (ones on the diagonal blocks)."""
        e = np.zeros((self.dim, self.dim))
        for s in self.slices():
            e[s, s] = 1.0
        return e

    def diagonal(self) -> "BlockMask":
        """All-diagonal mask of the same dimension (every block 1x1)."""
        return BlockMask((1,) * self.dim)


@dataclass(frozen=True)
class BlockCovariance:
    """Hermitian PSD block-diagonal covariance, stored as its diagonal blocks."""

    blocks: tuple[np.ndarray, ...]

    def __post_init__(self):
        blocks = []
        for i, b in enumerate(self.blocks):
            b = np.array(b, dtype=complex)
            if b.ndim != 2 or b.shape[0] != b.shape[1]:
                raise ValueError(f"block {i} is not square: shape {b.shape}")
            scale = max(1.0, float(np.linalg.norm(b)))
            if np.linalg.norm(b - b.conj().T) > 1e-12 * scale:
                raise ValueError(f"block {i} is not Hermitian")
            trace = float(np.trace(b).real)
            if np.linalg.eigvalsh(b).min() < -1e-10 * max(trace, 1e-30):
                raise ValueError(f"block {i} is not positive semidefinite")
            b.setflags(write=False)
            blocks.append(b)
        object.__setattr__(self, "blocks", tuple(blocks))

    @property
    def subarray_sizes(self) -> tuple[int, ...]:
        return tuple(b.shape[0] for b in self.blocks)

    @property
    def dim(self) -> int:
        return sum(self.subarray_sizes)

    @property
    def mask(self) -> BlockMask:
        return BlockMask(self.subarray_sizes)

    def dense(self) -> np.ndarray:
        """Assembled M x M matrix (test/reporting convenience only)."""
        out = np.zeros((self.dim, self.dim), dtype=complex)
        for s, b in zip(self.mask.slices(), self.blocks):
            out[s, s] = b
        return out

    def diagonal(self) -> np.ndarray:
        """Real diagonal of the assembled matrix."""
        return np.concatenate([np.diag(b).real for b in self.blocks])

    def scaled(self, c: float) -> "BlockCovariance":
        return BlockCovariance(tuple(c * b for b in self.blocks))


def identity_cov(sizes) -> BlockCovariance:
    """Identity covariance with the given block structure."""
    return BlockCovariance(tuple(np.eye(m, dtype=complex) for m in _as_blocks(sizes)))


def mask_project(matrix: np.ndarray, mask: BlockMask) -> BlockCovariance:
    """Schur-Hadamard product ``matrix * E``: keep the diagonal blocks, drop the rest.

    The kept blocks are Hermitized, so projecting any ``(1/N) V V^H`` yields a
    valid (PSD) block covariance.
    """
    matrix = np.asarray(matrix)
    if matrix.shape != (mask.dim, mask.dim):
        raise ValueError(
            f"matrix shape {matrix.shape} does not match mask dimension {mask.dim}"
        )
    blocks = []
    for s in mask.slices():
        b = matrix[s, s]
        blocks.append(0.5 * (b + b.conj().T))
    return BlockCovariance(tuple(blocks))


@dataclass(frozen=True)
class BlockFactor:
    """Eigendecomposition-derived factors of a block covariance.

    ``inverse``, ``sqrt`` and ``inv_sqrt`` hold the Hermitian per-block factors;
    ``log_det`` is the sum of the block log-determinants (after any clamping).
    """

    inverse: tuple[np.ndarray, ...]
    sqrt: tuple[np.ndarray, ...]
    inv_sqrt: tuple[np.ndarray, ...]
    log_det: float
    sizes: tuple[int, ...]
    _slices: list[slice] = field(repr=False, default_factory=list)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Apply the inverse covariance to an M x n right-hand side."""
        return self._apply(self.inverse, rhs)

    def apply_sqrt(self, rhs: np.ndarray) -> np.ndarray:
        return self._apply(self.sqrt, rhs)

    def apply_inv_sqrt(self, rhs: np.ndarray) -> np.ndarray:
        return self._apply(self.inv_sqrt, rhs)

    def _apply(self, factors, rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs)
        out = np.empty(rhs.shape, dtype=complex)
        for s, f in zip(self._slices, factors):
            out[s] = f @ rhs[s]
        return out

    def dense_inverse(self) -> np.ndarray:
        return self._dense(self.inverse)

    def dense_inv_sqrt(self) -> np.ndarray:
        return self._dense(self.inv_sqrt)

    def _dense(self, factors) -> np.ndarray:
        dim = sum(self.sizes)
        out = np.zeros((dim, dim), dtype=complex)
        for s, f in zip(self._slices, factors):
            out[s, s] = f
        return out

    def quad_trace(self, v: np.ndarray) -> float:
        """tr{ V^H Om^-1 V } for an M x n matrix V (real by Hermitian symmetry)."""
        total = 0.0
        for s, f in zip(self._slices, self.inverse):
            vi = v[s]
            total += float(np.sum((vi.conj() * (f @ vi)).real))
        return total


def factor(cov: BlockCovariance, clamp: bool = True) -> BlockFactor:
    """Factor a block covariance into inverse, square root and inverse square root.

    Per-block Hermitian eigendecomposition. With ``clamp=True`` eigenvalues are
    floored at ``EIG_FLOOR_REL * trace / m`` per block (PD repair for estimated
    covariances); with ``clamp=False`` an eigenvalue below that floor raises
    :class:`NotPositiveDefiniteError` naming the block.
    """
    inverse, sqrt, inv_sqrt = [], [], []
    log_det = 0.0
    for i, b in enumerate(cov.blocks):
        m = b.shape[0]
        vals, vecs = np.linalg.eigh(b)
        trace = float(vals.sum())
        floor = EIG_FLOOR_REL * (trace / m) if trace > 0 else EIG_FLOOR_REL
        if not clamp and vals.min() < floor:
            raise NotPositiveDefiniteError(
                f"covariance block {i} is not positive definite "
                f"(min eigenvalue {vals.min():.3e})",
                block_index=i,
            )
        vals = np.maximum(vals, floor)
        inv_vals = 1.0 / vals
        sq_vals = np.sqrt(vals)

        def recompose(d):
            return (vecs * d) @ vecs.conj().T

        inverse.append(recompose(inv_vals))
        sqrt.append(recompose(sq_vals))
        inv_sqrt.append(recompose(1.0 / sq_vals))
        log_det += float(np.log(vals).sum())
    return BlockFactor(
        inverse=tuple(inverse),
        sqrt=tuple(sqrt),
        inv_sqrt=tuple(inv_sqrt),
        log_det=log_det,
        sizes=cov.subarray_sizes,
        _slices=cov.mask.slices(),
    )


def sample_noise(cov: BlockCovariance, n_snapshots: int, seed) -> np.ndarray:
    """Draw ``n_snapshots`` i.i.d. columns of zero-mean circular complex Gaussian noise.

    Per block: square-root factor applied to standard circular normals (real and
    imaginary parts of variance 1/2 each).
    """
    if n_snapshots < 1:
        raise ValueError("n_snapshots must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    fac = factor(cov, clamp=False)
    out = np.empty((cov.dim, n_snapshots), dtype=complex)
    for s, sq in zip(cov.mask.slices(), fac.sqrt):
        m = sq.shape[0]
        z = rng.standard_normal((m, n_snapshots)) + 1j * rng.standard_normal(
            (m, n_snapshots)
        )
        out[s] = sq @ (z / np.sqrt(2.0))
    return out


def build_default_cov(sizes, powers, rho: complex) -> BlockCovariance:
    """AR(1)-style Hermitian blocks: entry (h, l) = power_i * rho^(l-h) for l >= h.

    Always positive definite for |rho| < 1; ``powers`` is the per-subarray
    sensor noise power (constant along each block diagonal).
    """
    sizes = _as_blocks(sizes)
    powers = np.asarray(powers, dtype=float)
    if powers.shape != (len(sizes),):
        raise ValueError(
            f"need one power per subarray ({len(sizes)}), got shape {powers.shape}"
        )
    if np.any(powers <= 0):
        raise ValueError("subarray powers must be positive")
    rho = complex(rho)
    if abs(rho) >= 1:
        raise ValueError(f"|rho| must be < 1, got {abs(rho):.4f}")
    blocks = []
    for m, p in zip(sizes, powers):
        lags = np.arange(m)[None, :] - np.arange(m)[:, None]
        b = np.where(lags >= 0, rho ** np.abs(lags), np.conj(rho) ** np.abs(lags))
        blocks.append(p * b)
    return BlockCovariance(tuple(blocks))
