"""Cramér-Rao bound on the unknown DOAs for the deterministic-signal model.

The bound treats the unknown DOAs, the unknown source signals and (optionally)
the complex sensor gains as deterministic mean parameters of the Gaussian
snapshot model, with the noise covariance known. Covariance parameters do not
enter: the Gaussian Fisher matrix is block-diagonal between mean and
covariance parameters, so they cannot tighten or loosen the DOA bound.

Parameter ordering in the Fisher matrix: unknown DOAs first, then per
snapshot the (Re, Im) pairs of each unknown signal, then (Re, Im) of each
gain when gains are treated as unknown.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .block_cov import factor
from .errors import SingularFisherError
from .signal_model import Scenario, steering_derivative, steering_matrix

_SINGULAR_RTOL = 1e-12


@dataclass(frozen=True)
class FisherBlock:
    """Real symmetric Fisher information over the mean parameters."""

    fim: np.ndarray
    n_unknown: int
    n_snapshots: int
    gains_known: bool

    @property
    def dim(self) -> int:
        return self.fim.shape[0]


def mean_derivatives(scenario: Scenario, t: int, gains_known: bool = False) -> np.ndarray:
    """Columns: d mu_t / d eta for the parameters active at snapshot t.

    Ordering: the unknown DOAs, then (Re, Im) of each unknown signal at t,
    then (Re, Im) of each gain unless ``gains_known``.
    """
    geom = scenario.geometry
    gains = scenario.gains
    a_u = steering_matrix(geom, scenario.theta_unknown)
    da_u = np.column_stack(
        [steering_derivative(geom, th) for th in scenario.theta_unknown]
    )
    ga_u = gains[:, None] * a_u
    gda_u = gains[:, None] * da_u
    cols = [gda_u * scenario.signals_unknown[:, t][None, :]]  # d/d theta_l
    cols.append(ga_u)  # d/d Re s_l(t)
    cols.append(1j * ga_u)  # d/d Im s_l(t)
    if not gains_known:
        # d mu_t / d g_m = e_m [A(theta) s(t)]_m
        mean_nogain_t = np.zeros(geom.n_sensors, dtype=complex)
        if scenario.n_known:
            mean_nogain_t += (
                steering_matrix(geom, scenario.theta_known)
                @ scenario.signals_known[:, t]
            )
        mean_nogain_t += a_u @ scenario.signals_unknown[:, t]
        cols.append(np.diag(mean_nogain_t))  # d/d Re g_m
        cols.append(1j * np.diag(mean_nogain_t))  # d/d Im g_m
    return np.concatenate(cols, axis=1)


def fisher_mean_block(scenario: Scenario, gains_known: bool = False) -> FisherBlock:
    """Assemble the Fisher information of the mean parameters.

    FIM(i, j) = 2 sum_t Re{ (d mu_t / d eta_i)^H Om^-1 (d mu_t / d eta_j) } with
    mu_t = G A(theta) s(t). Snapshot-local parameters (the unknown signals at
    snapshot t) only couple within their own snapshot, which keeps the
    assembly a sum of small dense blocks.
    """
    q = scenario.n_unknown
    if q == 0:
        raise ValueError("scenario has no unknown DOAs to bound")
    n = scenario.n_snapshots
    m = scenario.geometry.n_sensors
    fac = factor(scenario.covariance, clamp=False)
    n_gain = 0 if gains_known else 2 * m
    dim = q + 2 * n * q + n_gain
    fim = np.zeros((dim, dim))
    gain_idx = np.arange(q + 2 * n * q, dim)
    for t in range(n):
        d = mean_derivatives(scenario, t, gains_known)
        g = 2.0 * (d.conj().T @ fac.solve(d)).real
        sig_idx = q + 2 * q * t + np.arange(2 * q)
        idx = np.concatenate([np.arange(q), sig_idx, gain_idx]).astype(int)
        fim[np.ix_(idx, idx)] += g
    fim = 0.5 * (fim + fim.T)
    return FisherBlock(fim=fim, n_unknown=q, n_snapshots=n, gains_known=gains_known)


def _checked_solve(a: np.ndarray, b: np.ndarray, what: str) -> np.ndarray:
    vals = np.linalg.eigvalsh(a)
    if vals[-1] <= 0 or vals[0] <= _SINGULAR_RTOL * vals[-1]:
        raise SingularFisherError(
            f"Fisher information is singular while eliminating {what} "
            f"(eigenvalue range [{vals[0]:.3e}, {vals[-1]:.3e}])"
        )
    return np.linalg.solve(a, b)


def crb_theta(fisher: FisherBlock) -> np.ndarray:
    """Variance bounds (radians^2) for each unknown DOA.

    Computes the DOA diagonal of the inverse Fisher matrix by Schur-complement
    elimination: one small solve per snapshot (the signal parameters of
    different snapshots are mutually uncoupled), then the gain block.
    """
    f = fisher.fim
    q, n = fisher.n_unknown, fisher.n_snapshots
    n_gain = 0 if fisher.gains_known else (fisher.dim - q - 2 * n * q)
    keep_idx = np.concatenate(
        [np.arange(q), np.arange(q + 2 * n * q, fisher.dim)]
    ).astype(int)
    f_eff = f[np.ix_(keep_idx, keep_idx)].copy()
    for t in range(n):
        sig_idx = q + 2 * q * t + np.arange(2 * q)
        a_t = f[np.ix_(sig_idx, sig_idx)]
        b_t = f[np.ix_(sig_idx, keep_idx)]
        f_eff -= b_t.T @ _checked_solve(a_t, b_t, f"signals at snapshot {t}")
    if n_gain:
        a_g = f_eff[q:, q:]
        b_g = f_eff[q:, :q]
        f_theta = f_eff[:q, :q] - b_g.T @ _checked_solve(a_g, b_g, "gains")
    else:
        f_theta = f_eff
    vals = np.linalg.eigvalsh(0.5 * (f_theta + f_theta.T))
    if vals[-1] <= 0 or vals[0] <= _SINGULAR_RTOL * vals[-1]:
        raise SingularFisherError(
            "DOA block of the Fisher information is singular after elimination"
        )
    return np.diag(np.linalg.inv(f_theta)).copy()
