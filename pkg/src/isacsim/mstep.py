"""EM-style refinement of the sensing parameters.

Given the posterior means of the latest E-step, the surrogate objective is the
(negated, noise-weighted) residual energy of the predicted pilot and data
symbols plus the Gaussian prior on the user positions; the variance terms are
dropped. Grid angles are refined in the transformed (g1, g2) coordinates where
the array phases are linear; ranges, user x-y positions, and time offsets are
refined directly. Offsets get an analytic phase-derivative gradient; everything
else uses central finite differences with steps relative to a per-parameter
scale. A projected Armijo ascent step keeps every parameter in its feasible
box and never decreases the surrogate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import ArrayGeometry, OfdmParams, SphericalPoint, angles_from_transformed, transformed_angles
from .grid import SensingParams, build_user_factors


@dataclass
class SensingPrior:
    """Gaussian prior on user x-y positions, flat boxes for the rest."""

    user_prior_xy: tuple  # ((x, y), ...) prior means, one per user
    sigma_p2: float  # total prior variance over (x, y); each coord gets half
    offset_bound: float  # |tau_o| <= offset_bound
    r_bounds: tuple  # (r_min, r_max) for grid ranges

    def log_prior(self, params: SensingParams) -> float:
        val = 0.0
        for k, user in enumerate(params.user_positions):
            x, y, _ = user.to_cartesian()
            mx, my = self.user_prior_xy[k]
            val -= ((x - mx) ** 2 + (y - my) ** 2) / self.sigma_p2
        return val


@dataclass
class RefinableParams:
    """Which components of the sensing parameters the ascent may move."""

    grid_indices: np.ndarray  # grid points with supported coefficients
    refine_users: bool = True
    refine_offsets: bool = True

    def __post_init__(self):
        self.grid_indices = np.asarray(self.grid_indices, dtype=int)


def refinable_from_support(support_indices, n_users: int, cols: int,
                           refine_users=True, refine_offsets=True) -> RefinableParams:
    """Grid points referenced by any user's supported non-LoS coefficients."""
    grid_pts = set()
    for idx in np.asarray(support_indices, dtype=int):
        col = idx % cols
        if col >= 1:
            grid_pts.add(col - 1)
    return RefinableParams(
        grid_indices=np.array(sorted(grid_pts)),
        refine_users=refine_users,
        refine_offsets=refine_offsets,
    )


@dataclass
class ParamScales:
    """Characteristic magnitudes used for normalization and FD steps."""

    angle: float  # transformed-coordinate cell size
    range_: float  # range cell size (meters)
    position: float  # user position scale (meters)
    offset: float  # time offset scale (seconds)


class SurrogateProblem:
    """Evaluates the M-step surrogate and its gradients for fixed posteriors."""

    def __init__(
        self,
        y: np.ndarray,  # (S, N, M) included symbols: pilots then data
        pilots: np.ndarray,  # (T_p, N, K)
        x_means: np.ndarray,  # (T_d_used, N, K) posterior data means
        mu_alpha: np.ndarray,  # (K, Q+1)
        gamma_mean: float,
        geom: ArrayGeometry,
        ofdm: OfdmParams,
        prior: SensingPrior,
    ):
        self.y = y
        self.coef = np.concatenate([pilots, x_means], axis=0) if len(x_means) else pilots
        if self.coef.shape[0] != y.shape[0]:
            raise ValueError("symbol count mismatch between y and coefficients")
        self.mu_alpha = mu_alpha
        self.gamma = gamma_mean
        self.geom = geom
        self.ofdm = ofdm
        self.prior = prior
        self.omega = 2.0 * np.pi * ofdm.subcarrier_spacing * np.arange(
            1, ofdm.n_subcarriers + 1
        )  # (N,) phase rates per subcarrier

    def predicted(self, params: SensingParams) -> np.ndarray:
        """Model means per symbol, (S, N, M)."""
        factors = build_user_factors(params, self.geom, self.ofdm)
        chans = np.stack([f.apply(a) for f, a in zip(factors, self.mu_alpha)])
        return np.einsum("snk,knm->snm", self.coef, chans)

    def residual(self, params: SensingParams) -> np.ndarray:
        return self.y - self.predicted(params)

    def objective(self, params: SensingParams) -> float:
        r = self.residual(params)
        fit = -self.gamma * float(np.vdot(r, r).real)
        return fit + self.prior.log_prior(params)

    def tau_gradient(self, params: SensingParams) -> np.ndarray:
        """Analytic d(objective)/d tau_o per user.

        Every column of user k's sensing block carries the common factor
        exp(-j omega_n tau_o_k), so d(predicted)/d tau = -j omega * coef * h.
        """
        factors = build_user_factors(params, self.geom, self.ofdm)
        chans = np.stack([f.apply(a) for f, a in zip(factors, self.mu_alpha)])
        r = self.y - np.einsum("snk,knm->snm", self.coef, chans)
        grad = np.zeros(params.n_users)
        for k in range(params.n_users):
            # sum_{s,n} 2 gamma Re{ conj(coef) * (-j omega) h^H r } flipped sign
            inner = np.einsum("nm,snm->sn", np.conj(chans[k]), r)  # h^H r
            val = np.sum(self.omega[None, :] * np.real(1j * np.conj(self.coef[:, :, k]) * inner))
            grad[k] = 2.0 * self.gamma * val
        return grad


def _pack(params: SensingParams, refinable: RefinableParams, scales: ParamScales):
    g1, g2 = transformed_angles(params.grid.theta, params.grid.phi)
    z = []
    for q in refinable.grid_indices:
        z.extend([g1[q] / scales.angle, g2[q] / scales.angle, params.grid.r[q] / scales.range_])
    if refinable.refine_users:
        for u in params.user_positions:
            x, y, _ = u.to_cartesian()
            z.extend([x / scales.position, y / scales.position])
    if refinable.refine_offsets:
        z.extend((params.time_offsets / scales.offset).tolist())
    return np.array(z)


def _unpack(z, params: SensingParams, refinable: RefinableParams,
            scales: ParamScales, prior: SensingPrior) -> SensingParams:
    out = params.copy()
    g1, g2 = transformed_angles(out.grid.theta, out.grid.phi)
    g1 = np.asarray(g1).copy()
    g2 = np.asarray(g2).copy()
    pos = 0
    for q in refinable.grid_indices:
        a, b, r = z[pos] * scales.angle, z[pos + 1] * scales.angle, z[pos + 2] * scales.range_
        pos += 3
        # project into the unit disk (physical directions) and the range box
        norm = np.hypot(a, b)
        if norm > 1.0 - 1e-9:
            a, b = a / norm * (1.0 - 1e-9), b / norm * (1.0 - 1e-9)
        g1[q], g2[q] = a, b
        out.grid.r[q] = float(np.clip(r, prior.r_bounds[0], prior.r_bounds[1]))
    theta, phi = angles_from_transformed(g1, g2)
    out.grid.theta = np.asarray(theta)
    out.grid.phi = np.asarray(phi)
    if refinable.refine_users:
        users = []
        for k, u in enumerate(out.user_positions):
            x, y = z[pos] * scales.position, z[pos + 1] * scales.position
            pos += 2
            z_height = u.to_cartesian()[2]
            users.append(SphericalPoint.from_cartesian([x, y, z_height]))
        out.user_positions = users
    if refinable.refine_offsets:
        tau = z[pos : pos + out.n_users] * scales.offset
        out.time_offsets = np.clip(tau, -prior.offset_bound, prior.offset_bound)
    return out


def surrogate_gradient(
    problem: SurrogateProblem,
    params: SensingParams,
    refinable: RefinableParams,
    scales: ParamScales,
    fd_rel_step: float = 1e-6,
) -> np.ndarray:
    """Gradient in the normalized coordinates of _pack.

    Offsets use the analytic phase derivative; grid coordinates and user
    positions use central differences with step fd_rel_step of their scale.
    """
    z0 = _pack(params, refinable, scales)
    n_grid = 3 * len(refinable.grid_indices)
    n_user = 2 * params.n_users if refinable.refine_users else 0
    grad = np.zeros_like(z0)
    for i in range(n_grid + n_user):
        h = fd_rel_step * max(abs(z0[i]), 1.0)
        zp = z0.copy()
        zp[i] += h
        zm = z0.copy()
        zm[i] -= h
        fp = problem.objective(_unpack(zp, params, refinable, scales, problem.prior))
        fm = problem.objective(_unpack(zm, params, refinable, scales, problem.prior))
        grad[i] = (fp - fm) / (2.0 * h)
    if refinable.refine_offsets:
        grad[n_grid + n_user :] = problem.tau_gradient(params) * scales.offset
    return grad


def mstep_update(
    params: SensingParams,
    problem: SurrogateProblem,
    refinable: RefinableParams,
    scales: ParamScales,
    ascent_steps: int = 1,
    c1: float = 1e-4,
    backtrack: float = 0.5,
    max_backtracks: int = 40,
    initial_step: float = 1.0,
):
    """Projected Armijo gradient-ascent step(s); surrogate never decreases.

    The search direction is the normalized gradient, so the step size is a
    length in the scaled parameter space (the raw gradient norm varies over
    orders of magnitude along the phase-level ridges of the surrogate).
    Returns (new_params, info) carrying the last accepted step for warm
    starts.
    """
    current = params
    f0 = problem.objective(current)
    accepted_step = 0.0
    eps0 = initial_step
    for _ in range(max(ascent_steps, 1)):
        g = surrogate_gradient(problem, current, refinable, scales)
        gnorm = float(np.linalg.norm(g))
        if gnorm == 0.0:
            break
        d = g / gnorm
        z0 = _pack(current, refinable, scales)
        eps = eps0
        moved = False
        for _ in range(max_backtracks):
            trial = _unpack(z0 + eps * d, current, refinable, scales, problem.prior)
            f_trial = problem.objective(trial)
            projected = not np.allclose(_pack(trial, refinable, scales), z0 + eps * d)
            ok = f_trial >= f0 + c1 * eps * gnorm or (projected and f_trial > f0)
            if ok:
                current, f0, accepted_step, moved = trial, f_trial, eps, True
                eps0 = eps
                break
            eps *= backtrack
        if not moved:
            break
    return current, {"objective": f0, "step": accepted_step}
