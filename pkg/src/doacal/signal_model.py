"""Array geometry, steering vectors and synthetic snapshot generation.

Sensor positions are stored in wavelength units with the first sensor at the
origin, so the narrowband phase of sensor k for a source at angle theta is
``-2*pi*d_k*sin(theta)``. Angles are radians throughout; degrees appear only at
the CLI/CSV boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .block_cov import BlockCovariance, BlockMask, sample_noise

HALF_PI = np.pi / 2


@dataclass(frozen=True)
class ArrayGeometry:
    """Sparse linear array: sensor offsets (wavelengths) plus subarray partition."""

    positions: tuple[float, ...]
    subarray_sizes: tuple[int, ...]

    def __post_init__(self):
        positions = tuple(float(p) for p in self.positions)
        sizes = tuple(int(s) for s in self.subarray_sizes)
        if not sizes or any(s < 1 for s in sizes):
            raise ValueError(f"subarray sizes must be positive, got {sizes}")
        if len(positions) != sum(sizes):
            raise ValueError(
                f"{len(positions)} positions but subarrays sum to {sum(sizes)}"
            )
        if positions[0] != 0.0:
            raise ValueError("first sensor must sit at the origin (d_1 = 0)")
        if any(b <= a for a, b in zip(positions, positions[1:])):
            raise ValueError("positions must be strictly increasing")
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "subarray_sizes", sizes)

    @property
    def n_sensors(self) -> int:
        return len(self.positions)

    @property
    def n_subarrays(self) -> int:
        return len(self.subarray_sizes)

    @property
    def mask(self) -> BlockMask:
        return BlockMask(self.subarray_sizes)

    @classmethod
    def from_subarrays(cls, sizes, intra_spacing: float, gaps) -> "ArrayGeometry":
        """Uniform subarrays separated by gaps.

        Each gap is measured between the last sensor of one subarray and the
        first sensor of the next; all distances in wavelengths.
        """
        sizes = tuple(int(s) for s in sizes)
        gaps = tuple(float(g) for g in gaps)
        if len(gaps) != len(sizes) - 1:
            raise ValueError(
                f"{len(sizes)} subarrays need {len(sizes) - 1} gaps, got {len(gaps)}"
            )
        positions, start = [], 0.0
        for i, m in enumerate(sizes):
            positions.extend(start + intra_spacing * k for k in range(m))
            if i < len(gaps):
                start = positions[-1] + gaps[i]
        return cls(tuple(positions), sizes)


def steering_vector(geometry: ArrayGeometry, theta: float) -> np.ndarray:
    """Unit-modulus array response for a source at ``theta`` radians."""
    d = np.asarray(geometry.positions)
    return np.exp(-2j * np.pi * d * np.sin(theta))


def steering_matrix(geometry: ArrayGeometry, thetas) -> np.ndarray:
    """M x len(thetas) matrix whose columns are steering vectors."""
    thetas = np.atleast_1d(np.asarray(thetas, dtype=float))
    if thetas.size == 0:
        raise ValueError("thetas must be nonempty")
    d = np.asarray(geometry.positions)
    return np.exp(-2j * np.pi * np.outer(d, np.sin(thetas)))


def steering_derivative(geometry: ArrayGeometry, theta: float) -> np.ndarray:
    """Entrywise d/dtheta of the steering vector; entry 1 is always 0."""
    d = np.asarray(geometry.positions)
    phase = -2j * np.pi * d
    return phase * np.cos(theta) * np.exp(phase * np.sin(theta))


@dataclass(frozen=True)
class Scenario:
    """Ground truth for synthesis: DOAs, source signals, gains and noise covariance.

    The first P sources are calibration sources with known DOAs and known
    signals; the remaining D - P are unknown on both counts.
    """

    geometry: ArrayGeometry
    theta_known: tuple[float, ...]
    theta_unknown: tuple[float, ...]
    signals_known: np.ndarray
    signals_unknown: np.ndarray
    gains: np.ndarray
    covariance: BlockCovariance

    def __post_init__(self):
        theta_k = tuple(float(t) for t in self.theta_known)
        theta_u = tuple(float(t) for t in self.theta_unknown)
        for t in theta_k + theta_u:
            if not (-HALF_PI < t < HALF_PI):
                raise ValueError(f"DOA {t} rad outside (-pi/2, pi/2)")
        s_k = np.array(self.signals_known, dtype=complex)
        s_u = np.array(self.signals_unknown, dtype=complex)
        gains = np.array(self.gains, dtype=complex)
        if s_k.ndim != 2 or s_u.ndim != 2:
            raise ValueError("signal matrices must be 2-D (sources x snapshots)")
        if s_k.shape[0] != len(theta_k) or s_u.shape[0] != len(theta_u):
            raise ValueError("signal row counts must match the DOA counts")
        counts = [s.shape[1] for s in (s_k, s_u) if s.shape[0] > 0]
        if not counts:
            raise ValueError("scenario needs at least one source")
        n = counts[0]
        if n < 1 or any(c != n for c in counts):
            raise ValueError("signal matrices disagree on snapshot count")
        if s_k.shape[0] == 0:
            s_k = s_k.reshape(0, n)
        if s_u.shape[0] == 0:
            s_u = s_u.reshape(0, n)
        if gains.shape != (self.geometry.n_sensors,):
            raise ValueError(
                f"gains shape {gains.shape} does not match M={self.geometry.n_sensors}"
            )
        if self.covariance.subarray_sizes != self.geometry.subarray_sizes:
            raise ValueError("covariance block structure does not match the geometry")
        for arr in (s_k, s_u, gains):
            arr.setflags(write=False)
        object.__setattr__(self, "theta_known", theta_k)
        object.__setattr__(self, "theta_unknown", theta_u)
        object.__setattr__(self, "signals_known", s_k)
        object.__setattr__(self, "signals_unknown", s_u)
        object.__setattr__(self, "gains", gains)

    @property
    def n_snapshots(self) -> int:
        if self.signals_known.shape[0] > 0:
            return self.signals_known.shape[1]
        return self.signals_unknown.shape[1]

    @property
    def n_known(self) -> int:
        return len(self.theta_known)

    @property
    def n_unknown(self) -> int:
        return len(self.theta_unknown)

    def mean_matrix(self) -> np.ndarray:
        """Noise-free observation G A(theta) S, shape M x N."""
        m, n = self.geometry.n_sensors, self.n_snapshots
        mean = np.zeros((m, n), dtype=complex)
        if self.n_known:
            mean += steering_matrix(self.geometry, self.theta_known) @ self.signals_known
        if self.n_unknown:
            mean += (
                steering_matrix(self.geometry, self.theta_unknown)
                @ self.signals_unknown
            )
        return self.gains[:, None] * mean


def synthesize(scenario: Scenario, noise_seed) -> np.ndarray:
    """Draw one snapshot matrix Y = G A(theta_K) S_K + G A(theta_U) S_U + noise.

    Noise columns are i.i.d. circular complex Gaussian with the scenario
    covariance; reproducible for a fixed seed.
    """
    noise = sample_noise(scenario.covariance, scenario.n_snapshots, noise_seed)
    return scenario.mean_matrix() + noise
