"""Iterative ML estimators for joint sensor calibration and DOA estimation.

Two block-coordinate schemes share the same closed-form updates:

* the full joint loop (IML) cycles unknown DOAs, unknown signals, noise
  covariance and gains every iteration;
* the modified loop (MIML) first alternates gains and covariance using only
  the calibration sources, then estimates DOAs and signals once.

The unknown-DOA step minimizes a concentrated cost (log-determinant of the
mask-projected whitened residual covariance) with a safeguarded Newton search
seeded from a coarse grid scan.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .block_cov import (
    BlockCovariance,
    BlockFactor,
    BlockMask,
    factor,
    identity_cov,
    mask_project,
)
from .errors import EstimationError, RankDeficientError
from .signal_model import ArrayGeometry, steering_derivative, steering_matrix

PINV_RTOL = 1e-10  # singular values below this fraction of the largest count as zero
HESSIAN_FD_STEP = 1e-5  # radians, central differences of the analytic gradient
MAX_HALVINGS = 30
MAX_GRADIENT_STEP = np.radians(2.0)  # cap on the first backtracking step length
# Joint mean/covariance ML can run into the classic degenerate likelihood
# spike: the whitened signal refit annihilates one residual direction per
# round, so the smallest covariance eigenvalue collapses geometrically while
# the informative parameters have long converged. Detected relative to the
# block's mean eigenvalue; the loop then rolls back to the last healthy state.
DEGENERACY_RTOL = 1e-9


class Variant(Enum):
    IML = "iml"
    MIML = "miml"
    UNCALIBRATED = "uncal"
    DIAG_MISSPEC = "diag"


@dataclass(frozen=True)
class EstimatorConfig:
    """Knobs for the outer loops and the Newton DOA search (angles in radians)."""

    n_unknown: int = 1
    max_iterations: int = 10
    param_tol: float = 1e-6
    newton_max_steps: int = 40
    newton_grad_tol: float = 1e-8
    theta_bounds: tuple[float, float] = (np.radians(-89.0), np.radians(89.0))
    grid_step: float = np.radians(0.5)
    known_exclusion: float = np.radians(1.0)
    variant: Variant = Variant.IML

    def __post_init__(self):
        if self.n_unknown < 1:
            raise ValueError("n_unknown must be >= 1")
        if self.max_iterations < 1 or self.newton_max_steps < 1:
            raise ValueError("iteration limits must be >= 1")
        if self.param_tol <= 0 or self.newton_grad_tol <= 0:
            raise ValueError("tolerances must be positive")
        lo, hi = self.theta_bounds
        if not lo < hi:
            raise ValueError("theta_bounds must be a nonempty interval")


@dataclass
class EstimatorState:
    """Final iterates plus the per-iteration log-likelihood trace."""

    theta_u: np.ndarray
    s_u: np.ndarray
    omega: BlockCovariance
    gains: np.ndarray
    loglik_trace: list[float]
    iterations_used: int
    flags: list[str] = field(default_factory=list)


def _residual(Y, geometry, gains, theta_all, s_all) -> np.ndarray:
    """V = Y - G A(theta) S."""
    theta_all = np.atleast_1d(np.asarray(theta_all, dtype=float))
    if theta_all.size == 0:
        return np.array(Y, dtype=complex)
    a = steering_matrix(geometry, theta_all)
    return Y - np.asarray(gains)[:, None] * (a @ np.asarray(s_all))


def log_likelihood(Y, geometry, gains, theta_all, s_all, omega, repair: bool = False):
    """Gaussian log-likelihood (constant dropped): -N log det(Om) - tr{V^H Om^-1 V}.

    ``repair=True`` applies the eigenvalue-floor PD repair instead of raising
    on singular blocks (used on estimated covariances inside the loops).
    """
    n = Y.shape[1]
    fac = factor(omega, clamp=repair)
    v = _residual(Y, geometry, gains, theta_all, s_all)
    return -n * fac.log_det - fac.quad_trace(v)


def update_omega(Y, geometry, gains, theta_all, s_all, mask: BlockMask) -> BlockCovariance:
    """Conditional ML covariance: (1/N) V V^H projected onto the block support."""
    n = Y.shape[1]
    v = _residual(Y, geometry, gains, theta_all, s_all)
    return mask_project((v @ v.conj().T) / n, mask)


def update_omega_miml(Y, geometry, gains, theta_known, s_known, mask) -> BlockCovariance:
    """Covariance update from the calibration-source residual only."""
    return update_omega(Y, geometry, gains, theta_known, s_known, mask)


def _solve_gain_system(signal_part, Y, fac: BlockFactor, diagnostics):
    """Solve the diagonal gain stationarity system.

    ``signal_part`` is C = A(theta) S for whichever source set the variant
    uses. The stationary point of the likelihood in the gains is the weighted
    least-squares minimizer of ||Om^-1/2 (Y - diag(g) C)||_F, solved here in
    square-root form: forming the normal-equation matrix explicitly squares
    the conditioning and breaks down when the estimated covariance is nearly
    singular. Rank-deficient designs fall back to the minimum-norm solution
    and are flagged in ``diagnostics``.
    """
    m, n = Y.shape
    w = fac.dense_inv_sqrt()
    # design row block for snapshot t: Om^-1/2 diag(c_t); stacked over t
    design = (signal_part.T[:, None, :] * w[None, :, :]).reshape(n * m, m)
    rhs = fac.apply_inv_sqrt(Y).T.reshape(-1)
    gains, _, rank, _ = np.linalg.lstsq(design, rhs, rcond=PINV_RTOL)
    if diagnostics is not None:
        diagnostics["gain_rank_deficient"] = int(rank) < m
    return gains


def update_gains_iml(Y, geometry, theta_all, s_all, omega, diagnostics=None):
    """Closed-form gain update using all sources (known and current estimates)."""
    a = steering_matrix(geometry, theta_all)
    return _solve_gain_system(a @ np.asarray(s_all), Y, factor(omega), diagnostics)


def update_gains_miml(Y, geometry, theta_known, s_known, omega, diagnostics=None):
    """Gain update from the calibration sources alone (weak unknown sources)."""
    a = steering_matrix(geometry, theta_known)
    return _solve_gain_system(a @ np.asarray(s_known), Y, factor(omega), diagnostics)


def _collinear_pair(a: np.ndarray) -> tuple[int, ...]:
    q = a.shape[1]
    if q < 2:
        return (0,)
    norms = np.linalg.norm(a, axis=0)
    norms = np.where(norms > 0, norms, 1.0)
    gram = np.abs(a.conj().T @ a) / np.outer(norms, norms)
    np.fill_diagonal(gram, 0.0)
    i, j = np.unravel_index(np.argmax(gram), gram.shape)
    return (int(min(i, j)), int(max(i, j)))


def update_signals(Y, geometry, gains, theta_known, theta_unknown, s_known, omega):
    """Least-squares unknown-signal estimate in the whitened model.

    Raises :class:`RankDeficientError` when the whitened steering matrix of the
    unknown sources loses column rank (e.g. coincident DOAs).
    """
    theta_unknown = np.atleast_1d(np.asarray(theta_unknown, dtype=float))
    fac = factor(omega)
    gains = np.asarray(gains)
    abar_u = fac.apply_inv_sqrt(gains[:, None] * steering_matrix(geometry, theta_unknown))
    sv = np.linalg.svd(abar_u, compute_uv=False)
    if sv[0] == 0 or sv[-1] <= PINV_RTOL * sv[0]:
        cols = _collinear_pair(abar_u)
        raise RankDeficientError(
            "whitened steering matrix is rank deficient for unknown DOAs "
            f"{np.degrees(theta_unknown).round(4).tolist()} deg (columns {cols})",
            columns=cols,
        )
    ybar = fac.apply_inv_sqrt(Y)
    theta_known = np.atleast_1d(np.asarray(theta_known, dtype=float))
    if theta_known.size:
        abar_k = fac.apply_inv_sqrt(gains[:, None] * steering_matrix(geometry, theta_known))
        ybar = ybar - abar_k @ np.asarray(s_known)
    s_u, *_ = np.linalg.lstsq(abar_u, ybar, rcond=None)
    return s_u


class _ConcentratedProblem:
    """Concentrated DOA cost F(theta_U) = log det Z and its analytic gradient.

    Everything independent of theta_U (whitened data, residual covariance,
    covariance factors) is precomputed once so grid scans and Newton
    iterations share the work.
    """

    def __init__(self, Y, geometry, gains, theta_known, s_known, omega, mask):
        self.geometry = geometry
        self.gains = np.asarray(gains)
        self.mask = mask
        self.slices = mask.slices()
        self.fac = factor(omega)
        n = Y.shape[1]
        ybar = self.fac.apply_inv_sqrt(Y)
        theta_known = np.atleast_1d(np.asarray(theta_known, dtype=float))
        if theta_known.size:
            abar_k = self.fac.apply_inv_sqrt(
                self.gains[:, None] * steering_matrix(geometry, theta_known)
            )
            ybar = ybar - abar_k @ np.asarray(s_known)
        self.rhat = (ybar @ ybar.conj().T) / n
        self.eye = np.eye(Y.shape[0], dtype=complex)

    def _whitened_steering(self, theta_u: np.ndarray) -> np.ndarray:
        a = steering_matrix(self.geometry, theta_u)
        return self.fac.apply_inv_sqrt(self.gains[:, None] * a)

    def _perp_and_pinv(self, abar: np.ndarray):
        """Orthogonal projector onto span(abar)^perp plus the pseudo-inverse."""
        if abar.shape[1] == 1:
            w = abar[:, 0]
            nw2 = float(np.vdot(w, w).real)
            if nw2 <= 0:
                return self.eye.copy(), np.zeros((1, len(w)), dtype=complex)
            perp = self.eye - np.outer(w, w.conj()) / nw2
            return perp, w.conj()[None, :] / nw2
        u, s, vh = np.linalg.svd(abar, full_matrices=False)
        keep = s > PINV_RTOL * s[0] if s[0] > 0 else s > 0
        ur = u[:, keep]
        perp = self.eye - ur @ ur.conj().T
        inv_s = np.zeros_like(s)
        inv_s[keep] = 1.0 / s[keep]
        pinv = (vh.conj().T * inv_s) @ u.conj().T
        return perp, pinv

    def _masked_blocks(self, t: np.ndarray) -> list[np.ndarray]:
        """Diagonal blocks of (Om^1/2 T Om^1/2) under the mask, Hermitized."""
        st = self.fac.apply_sqrt(t)
        sts = self.fac.apply_sqrt(st.conj().T).conj().T
        out = []
        for s in self.slices:
            b = sts[s, s]
            out.append(0.5 * (b + b.conj().T))
        return out

    def cost(self, theta_u) -> float:
        """log det Z; +inf when a block of Z is singular or not PD."""
        theta_u = np.atleast_1d(np.asarray(theta_u, dtype=float))
        perp, _ = self._perp_and_pinv(self._whitened_steering(theta_u))
        t = perp @ self.rhat @ perp
        total = 0.0
        for b in self._masked_blocks(t):
            try:
                chol = np.linalg.cholesky(b)
            except np.linalg.LinAlgError:
                return float("inf")
            diag = np.diag(chol).real
            if np.any(diag <= 0):
                return float("inf")
            total += 2.0 * float(np.log(diag).sum())
        return total

    @staticmethod
    def _floored_inv(b: np.ndarray) -> np.ndarray:
        # near the cost's deep minima the blocks become extremely
        # ill-conditioned; an eigenvalue floor keeps descent directions usable
        vals, vecs = np.linalg.eigh(b)
        if vals[-1] <= 0:
            raise np.linalg.LinAlgError("block of Z is not positive definite")
        vals = np.maximum(vals, 1e-15 * vals[-1])
        return (vecs / vals) @ vecs.conj().T

    def gradient(self, theta_u) -> np.ndarray:
        """d cost / d theta_l via the orthogonal-projector derivative identity."""
        theta_u = np.atleast_1d(np.asarray(theta_u, dtype=float))
        abar = self._whitened_steering(theta_u)
        perp, pinv = self._perp_and_pinv(abar)
        t = perp @ self.rhat @ perp
        z_inv = [self._floored_inv(b) for b in self._masked_blocks(t)]
        w1 = self.rhat @ perp
        grad = np.empty(len(theta_u))
        for l in range(len(theta_u)):
            da = steering_derivative(self.geometry, theta_u[l])
            da_w = self.fac.apply_inv_sqrt(self.gains * da)
            u = perp @ da_w
            v = pinv[l, :].conj()
            # dPperp = -(u v^H + v u^H); dT = B + B^H with B = dPperp R Pperp
            b = -(np.outer(u, v.conj()) + np.outer(v, u.conj())) @ w1
            dt = b + b.conj().T
            dz_blocks = self._masked_blocks(dt)
            grad[l] = sum(
                float(np.trace(zi @ dz).real) for zi, dz in zip(z_inv, dz_blocks)
            )
        return grad


def concentrated_cost(theta_u, Y, geometry, gains, theta_known, s_known, omega, mask):
    """F(theta_U): log-determinant of the mask-projected residual covariance."""
    prob = _ConcentratedProblem(Y, geometry, gains, theta_known, s_known, omega, mask)
    return prob.cost(theta_u)


def cost_gradient(theta_u, Y, geometry, gains, theta_known, s_known, omega, mask):
    """Analytic gradient of :func:`concentrated_cost` w.r.t. theta_U."""
    prob = _ConcentratedProblem(Y, geometry, gains, theta_known, s_known, omega, mask)
    return prob.gradient(theta_u)


def _fd_hessian(grad_fn, theta: np.ndarray, h: float = HESSIAN_FD_STEP) -> np.ndarray:
    q = len(theta)
    hess = np.empty((q, q))
    for l in range(q):
        step = np.zeros(q)
        step[l] = h
        hess[:, l] = (grad_fn(theta + step) - grad_fn(theta - step)) / (2.0 * h)
    return 0.5 * (hess + hess.T)


def _project_feasible(theta: np.ndarray, config: EstimatorConfig, theta_known):
    """Clip into bounds and push out of the known-source exclusion zones.

    An "unknown" DOA inside the exclusion radius of a calibration source is
    unidentifiable for these estimators (the residual of the much stronger
    calibration source swallows it), so the whole search is constrained to
    stay outside, not just the seeding grid.
    """
    lo, hi = config.theta_bounds
    theta = np.clip(theta, lo, hi)
    r = config.known_exclusion
    for tk in np.atleast_1d(np.asarray(theta_known, dtype=float)):
        inside = np.abs(theta - tk) < r
        if np.any(inside):
            shift = np.where(theta >= tk, tk + r, tk - r)
            theta = np.where(inside, np.clip(shift, lo, hi), theta)
    return theta


def _feasible_interval(seed: float, config: EstimatorConfig, theta_known):
    """Largest interval around ``seed`` inside bounds and outside exclusions."""
    lo, hi = config.theta_bounds
    r = config.known_exclusion
    for tk in np.atleast_1d(np.asarray(theta_known, dtype=float)):
        if seed >= tk + r:
            lo = max(lo, tk + r)
        elif seed <= tk - r:
            hi = min(hi, tk - r)
    return lo, hi


def _golden_refine(prob: _ConcentratedProblem, seed: float, halfwidth: float,
                   config: EstimatorConfig, theta_known,
                   tol: float = 1e-10, max_iter: int = 80) -> float:
    """Golden-section refinement of a single DOA within its grid cell.

    The concentrated cost is a log-shaped valley: its tails are concave, so a
    Newton step from a coarse seed stalls there. A bracketing search walks
    into the valley floor regardless; Newton then polishes. Never returns a
    point worse than the seed.
    """
    lo, hi = _feasible_interval(seed, config, theta_known)
    a, b = max(lo, seed - halfwidth), min(hi, seed + halfwidth)
    if not a < b:
        return seed
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = prob.cost([c]), prob.cost([d])
    best_x, best_f = (c, fc) if fc <= fd else (d, fd)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = prob.cost([c])
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = prob.cost([d])
        for x, f in ((c, fc), (d, fd)):
            if f < best_f:
                best_x, best_f = x, f
    seed_f = prob.cost([seed])
    return best_x if best_f <= seed_f else seed


def _newton_minimize(prob: _ConcentratedProblem, theta_init, config: EstimatorConfig,
                     theta_known=()):
    """Safeguarded Newton descent on the concentrated cost.

    Full Newton steps are taken only while the finite-difference Hessian is PD
    and the step does not increase the cost; otherwise the search backtracks
    along the negative gradient. All candidates are projected into the
    feasible set; the returned point never has a higher cost than the start.
    """
    project = lambda t: _project_feasible(t, config, theta_known)
    theta = project(np.atleast_1d(np.asarray(theta_init, dtype=float)))
    f = prob.cost(theta)
    if not np.isfinite(f):
        return theta
    for _ in range(config.newton_max_steps):
        try:
            grad = prob.gradient(theta)
            gnorm = float(np.linalg.norm(grad))
            if gnorm <= config.newton_grad_tol:
                break
            hess = _fd_hessian(prob.gradient, theta)
        except np.linalg.LinAlgError:
            break  # cost spike next to a singular block: keep the best point
        moved = False
        try:
            pd = bool(np.linalg.eigvalsh(hess).min() > 0)
        except np.linalg.LinAlgError:
            pd = False
        if pd:
            cand = project(theta - np.linalg.solve(hess, grad))
            fc = prob.cost(cand)
            if fc <= f:
                theta, f, moved = cand, fc, True
        if not moved:
            alpha = min(1.0, MAX_GRADIENT_STEP / gnorm)
            for _ in range(MAX_HALVINGS):
                cand = project(theta - alpha * grad)
                fc = prob.cost(cand)
                if fc < f:
                    theta, f, moved = cand, fc, True
                    break
                alpha *= 0.5
        if not moved:
            break  # no decrease possible: treat as converged
    return theta


def _grid_candidates(config: EstimatorConfig, theta_known) -> np.ndarray:
    # Half-step phase offset so that round-number DOAs never sit exactly on a
    # grid point (a sticky seed at the truth would flatter the MSE curves).
    lo, hi = config.theta_bounds
    pts = np.arange(lo + 0.5 * config.grid_step, hi, config.grid_step)
    for tk in np.atleast_1d(np.asarray(theta_known, dtype=float)):
        pts = pts[np.abs(pts - tk) >= config.known_exclusion]
    return pts


def _grid_scan(scan_prob: _ConcentratedProblem, config: EstimatorConfig, theta_known,
               n_seeds: int = 1) -> list[np.ndarray]:
    """Coarse exhaustive scan of the concentrated cost to seed the Newton search.

    Returns up to ``n_seeds`` well-separated low-cost candidates: this sparse
    array has near-unity grating lobes, so the single best coarse point can
    sit on the wrong lobe; refining a few and comparing final costs is cheap
    insurance.
    """
    pts = _grid_candidates(config, theta_known)
    q = config.n_unknown
    if q == 1:
        costs = np.array([scan_prob.cost(np.array([p])) for p in pts])
        order = np.argsort(costs)
        seeds, min_sep = [], 2.0 * config.grid_step
        for idx in order:
            if not np.isfinite(costs[idx]) and seeds:
                break
            if all(abs(pts[idx] - s[0]) >= min_sep for s in seeds):
                seeds.append(np.array([pts[idx]]))
            if len(seeds) == n_seeds:
                break
        return seeds or [np.array([pts[int(order[0])]])]
    best, best_cost = None, float("inf")
    for combo in itertools.combinations(pts, q):
        c = scan_prob.cost(np.array(combo))
        if c < best_cost:
            best, best_cost = np.array(combo), c
    if best is None:
        raise EstimationError("grid scan found no feasible DOA candidate")
    return [best]


def optimize_theta(
    theta_init, Y, geometry, gains, theta_known, s_known, omega, mask,
    config: EstimatorConfig,
):
    """Newton search for the unknown DOAs from an explicit starting point."""
    prob = _ConcentratedProblem(Y, geometry, gains, theta_known, s_known, omega, mask)
    return _newton_minimize(prob, theta_init, config, theta_known)


def _theta_step(Y, geometry, gains, theta_known, s_known, omega, mask, config, theta_prev):
    """One DOA update: grid seeds (identity covariance) refined by Newton.

    Every seed (and the previous iterate, when given) is refined under the
    true concentrated cost; the lowest final cost wins. Including the previous
    iterate keeps the outer loop monotone.
    """
    prob = _ConcentratedProblem(Y, geometry, gains, theta_known, s_known, omega, mask)
    scan_prob = _ConcentratedProblem(
        Y, geometry, gains, theta_known, s_known,
        identity_cov(mask.subarray_sizes), mask,
    )
    seeds = _grid_scan(scan_prob, config, theta_known, n_seeds=3)
    if config.n_unknown == 1:
        # refine inside each grid cell on the scan cost (identity covariance):
        # the true cost can carry an estimated covariance that already absorbed
        # the unknown source, whose self-nulling flattens the landscape away
        # from the exact optimum
        seeds = [
            np.array([_golden_refine(scan_prob, float(s[0]), config.grid_step,
                                     config, theta_known)])
            for s in seeds
        ]
    if theta_prev is not None:
        seeds.append(np.asarray(theta_prev, dtype=float))
    best, best_cost = seeds[0], float("inf")
    for seed in seeds:
        if len(seed) == 1:
            refined = _golden_refine(prob, float(seed[0]), config.grid_step,
                                     config, theta_known)
            seed = np.array([refined])
        cand = _newton_minimize(prob, seed, config, theta_known)
        cost = prob.cost(cand)
        if cost < best_cost:
            best, best_cost = cand, cost
    return np.sort(best)


def _is_degenerate(omega: BlockCovariance) -> bool:
    """True when a block has collapsed far below its own eigenvalue scale."""
    for b in omega.blocks:
        vals = np.linalg.eigvalsh(b)
        mean = float(vals.sum()) / b.shape[0]
        if mean <= 0 or vals[0] < DEGENERACY_RTOL * mean:
            return True
    return False


def _stack_params(theta_u, s_u, gains, omega: BlockCovariance) -> np.ndarray:
    parts = [np.asarray(theta_u, dtype=float).ravel()]
    for arr in (np.asarray(s_u), np.asarray(gains)):
        parts.append(arr.ravel().view(float))
    for b in omega.blocks:
        parts.append(np.asarray(b).ravel().view(float))
    return np.concatenate(parts)


def _converged(prev: np.ndarray | None, cur: np.ndarray, tol: float) -> bool:
    if prev is None:
        return False
    denom = max(float(np.linalg.norm(prev)), 1e-30)
    return float(np.linalg.norm(cur - prev)) / denom < tol


def run_iml(Y, s_known, theta_known, geometry: ArrayGeometry, mask: BlockMask,
            config: EstimatorConfig) -> EstimatorState:
    """Joint iterative loop: DOAs, signals, covariance, gains per iteration.

    With ``variant=UNCALIBRATED`` the gain update is skipped and the gains stay
    at all-ones (the observations still contain the true gains).
    """
    Y = np.asarray(Y, dtype=complex)
    theta_known = np.atleast_1d(np.asarray(theta_known, dtype=float))
    s_known = np.asarray(s_known, dtype=complex)
    m, n = Y.shape
    omega = identity_cov(mask.subarray_sizes)
    gains = np.ones(m, dtype=complex)
    flags: list[str] = []
    if config.variant is not Variant.UNCALIBRATED:
        # Bootstrap the gains from the calibration sources before the first
        # DOA step. Starting the joint loop from all-ones gains with randomly
        # phased true gains is a known trap: the unknown-signal fit absorbs
        # the miscalibrated calibration residual and the loop locks into a
        # self-consistent wrong equilibrium.
        diag0: dict = {}
        gains = update_gains_miml(Y, geometry, theta_known, s_known, omega, diag0)
        if diag0.get("gain_rank_deficient"):
            flags.append("gain_rank_deficient@bootstrap")
    theta_u = None
    trace: list[float] = []
    prev_stack = None
    iterations = 0
    last_good = None
    for it in range(1, config.max_iterations + 1):
        try:
            theta_u = _theta_step(
                Y, geometry, gains, theta_known, s_known, omega, mask, config, theta_u
            )
            s_u = update_signals(
                Y, geometry, gains, theta_known, theta_u, s_known, omega
            )
            theta_all = np.concatenate([theta_known, theta_u])
            s_all = np.vstack([s_known, s_u])
            omega_new = update_omega(Y, geometry, gains, theta_all, s_all, mask)
            if _is_degenerate(omega_new):
                flags.append(f"omega_degenerate@it{it}")
                if last_good is not None:
                    theta_u, s_u, omega, gains = last_good
                else:
                    omega = omega_new
                    iterations = it
                break
            omega = omega_new
            if config.variant is not Variant.UNCALIBRATED:
                diag: dict = {}
                gains = update_gains_iml(Y, geometry, theta_all, s_all, omega, diag)
                if diag.get("gain_rank_deficient"):
                    flags.append(f"gain_rank_deficient@it{it}")
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise EstimationError(f"IML update failed at iteration {it}: {exc}",
                                  iteration=it) from exc
        trace.append(
            log_likelihood(Y, geometry, gains, theta_all, s_all, omega, repair=True)
        )
        iterations = it
        last_good = (theta_u, s_u, omega, gains)
        stack = _stack_params(theta_u, s_u, gains, omega)
        if _converged(prev_stack, stack, config.param_tol):
            break
        prev_stack = stack
    return EstimatorState(theta_u, s_u, omega, gains, trace, iterations, flags)


def run_miml(Y, s_known, theta_known, geometry: ArrayGeometry, mask: BlockMask,
             config: EstimatorConfig) -> EstimatorState:
    """Two-phase loop: calibrate (gains, covariance) first, then estimate DOAs.

    The calibration phase treats the unknown sources as negligible; its
    log-likelihood trace refers to that approximate model.
    """
    Y = np.asarray(Y, dtype=complex)
    theta_known = np.atleast_1d(np.asarray(theta_known, dtype=float))
    s_known = np.asarray(s_known, dtype=complex)
    m, n = Y.shape
    omega = identity_cov(mask.subarray_sizes)
    gains = np.ones(m, dtype=complex)
    flags: list[str] = []
    trace: list[float] = []
    prev_stack = None
    iterations = 0
    for it in range(1, config.max_iterations + 1):
        try:
            diag: dict = {}
            gains = update_gains_miml(Y, geometry, theta_known, s_known, omega, diag)
            if diag.get("gain_rank_deficient"):
                flags.append(f"gain_rank_deficient@it{it}")
            omega = update_omega_miml(Y, geometry, gains, theta_known, s_known, mask)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise EstimationError(f"MIML update failed at iteration {it}: {exc}",
                                  iteration=it) from exc
        trace.append(
            log_likelihood(Y, geometry, gains, theta_known, s_known, omega, repair=True)
        )
        iterations = it
        stack = _stack_params(np.empty(0), np.empty((0, n)), gains, omega)
        if _converged(prev_stack, stack, config.param_tol):
            break
        prev_stack = stack
    try:
        theta_u = _theta_step(
            Y, geometry, gains, theta_known, s_known, omega, mask, config, None
        )
        s_u = update_signals(Y, geometry, gains, theta_known, theta_u, s_known, omega)
        # The calibration-phase covariance still contains the unknown sources,
        # which deliberately mis-whitens the DOA search at high SNR (its
        # variance then cannot approach the CRB). One covariance refinement
        # from the full residual restores a source-free whitener; gains stay
        # calibration-only. Skipped if the refined covariance is degenerate.
        theta_all = np.concatenate([theta_known, theta_u])
        omega_ref = update_omega(
            Y, geometry, gains, theta_all, np.vstack([s_known, s_u]), mask
        )
        if _is_degenerate(omega_ref):
            flags.append("omega_refine_degenerate")
        else:
            omega = omega_ref
            theta_u = _theta_step(
                Y, geometry, gains, theta_known, s_known, omega, mask, config, theta_u
            )
            s_u = update_signals(
                Y, geometry, gains, theta_known, theta_u, s_known, omega
            )
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise EstimationError(
            f"MIML DOA step failed after {iterations} calibration iterations: {exc}",
            iteration=iterations,
        ) from exc
    return EstimatorState(theta_u, s_u, omega, gains, trace, iterations, flags)
