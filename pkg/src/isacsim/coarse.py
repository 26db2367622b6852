"""Coarse angle estimation: subspace spectrum search plus pilot-only filtering.

Per user: a spatial sample covariance over pilot (and optionally shared-data)
snapshots, Hermitian eigendecomposition, MDL order selection, and a 2D
pseudo-spectrum peak search on an oversampled transform ed-angle lattice. Since
shared data subcarriers mix every user's paths into the covariance, a
pilot-only common-support variational refinement then keeps the angles that
actually appear in the user's own pilot signal. Retained angles are clustered
on an oversampled uniform lattice and consolidated into a compact position
grid that replaces the full uniform grid downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln

from .errors import ConfigError
from .frame import FrameObservation
from .geometry import ArrayGeometry, steering_from_transformed
from .grid import PositionGrid, uniform_angle_grid, uniform_range_grid
from .vbi import LOG_ODDS_CLAMP, BggHyperParams, _clamped_logit, _sigmoid


@dataclass
class CovarianceEstimate:
    """Spatial sample covariance and the snapshot count behind it."""

    r: np.ndarray  # (M, M) Hermitian PSD
    n_samples: int


@dataclass
class AngleEstimateSet:
    """Candidate angles for one user with their spectrum values."""

    g1: np.ndarray
    g2: np.ndarray
    values: np.ndarray

    @property
    def count(self) -> int:
        return len(self.g1)


@dataclass
class CompactGrid:
    """Clustered representative angles times a uniform range grid."""

    rep_g1: np.ndarray  # (J,)
    rep_g2: np.ndarray  # (J,)
    user_clusters: list  # [K] -> sorted tuple of cluster ids
    ranges: np.ndarray  # (Q_r,)

    @property
    def n_clusters(self) -> int:
        return len(self.rep_g1)

    @property
    def n_points(self) -> int:
        return self.n_clusters * len(self.ranges)

    def position_grid(self) -> PositionGrid:
        from .geometry import angles_from_transformed

        theta, phi = angles_from_transformed(self.rep_g1, self.rep_g2)
        q_r = len(self.ranges)
        return PositionGrid(
            theta=np.repeat(theta, q_r),
            phi=np.repeat(phi, q_r),
            r=np.tile(self.ranges, self.n_clusters),
            provenance="compact",
        )

    def support_hint(self, cols: int) -> np.ndarray:
        """Flat (user-major) indices covering each user's clusters, plus LoS."""
        q_r = len(self.ranges)
        hints = []
        for k, clusters in enumerate(self.user_clusters):
            hints.append(k * cols)  # LoS
            for j in clusters:
                for ri in range(q_r):
                    hints.append(k * cols + 1 + j * q_r + ri)
        return np.array(sorted(hints))


def sample_covariance(
    obs: FrameObservation, k: int, n_data_subcarriers: int = 0
) -> CovarianceEstimate:
    """Outer-product covariance over user k's pilot snapshots plus the first
    n_data_subcarriers shared data snapshots (in symbol, subcarrier order)."""
    alloc = obs.alloc
    snaps = []
    for t_p in range(alloc.t_p_count):
        for n in alloc.pilot_sets[t_p][k]:
            snaps.append(obs.y[t_p, n - 1])
    used = 0
    for t_d in range(alloc.t_d_count):
        for n in alloc.data_subcarriers:
            if used >= n_data_subcarriers:
                break
            snaps.append(obs.y[alloc.t_p_count + t_d, n - 1])
            used += 1
    z = np.stack(snaps)  # (N_s, M)
    r = (z.T @ np.conj(z)) / len(z)  # sum of y y^H outer products
    return CovarianceEstimate(r=0.5 * (r + np.conj(r.T)), n_samples=len(z))


def mdl_order(eigenvalues: np.ndarray, n_samples: int) -> int:
    """Source count by the minimum-description-length rule (Wax-Kailath form).

    eigenvalues must be sorted descending. An all-equal spectrum returns 0.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    m = len(lam)
    floor = max(lam.max(), 0.0) * 1e-14 + 1e-300
    lam = np.maximum(lam, floor)
    scores = np.empty(m)
    for k in range(m):
        tail = lam[k:]
        am = float(np.mean(tail))
        gm = float(np.exp(np.mean(np.log(tail))))
        scores[k] = -n_samples * (m - k) * np.log(gm / am) + 0.5 * k * (
            2 * m - k
        ) * np.log(n_samples)
    return int(np.argmin(scores))


@dataclass
class SearchLattice:
    """Oversampled transformed-angle lattice with its steering dictionary."""

    g1: np.ndarray  # (Q1, Q2) full lattice
    g2: np.ndarray
    feasible: np.ndarray  # (Q1, Q2) bool
    steering: np.ndarray  # (M, n_feasible)
    flat_index: np.ndarray  # (Q1, Q2) -> column in steering (or -1)


def make_search_lattice(geom: ArrayGeometry, oversample: int = 4) -> SearchLattice:
    q1 = oversample * geom.m_x
    q2 = oversample * geom.m_z
    i = np.arange(1, q1 + 1)
    j = np.arange(1, q2 + 1)
    g1v = -(q1 - 1) / q1 + 2.0 * (i - 1) / q1
    g2v = -(q2 - 1) / q2 + 2.0 * (j - 1) / q2
    g1m, g2m = np.meshgrid(g1v, g2v, indexing="ij")
    feasible = g1m**2 + g2m**2 <= 1.0
    steering = steering_from_transformed(g1m[feasible], g2m[feasible], geom)
    flat = np.full(g1m.shape, -1, dtype=int)
    flat[feasible] = np.arange(int(feasible.sum()))
    return SearchLattice(g1=g1m, g2=g2m, feasible=feasible, steering=steering, flat_index=flat)


def music_spectrum(
    cov: CovarianceEstimate,
    n_sources: int,
    lattice: SearchLattice,
    refine_peaks: bool = True,
):
    """Pseudo-spectrum on the lattice and its top-n_sources local maxima.

    Requires 1 <= n_sources < M so that the noise subspace is nonempty. Peaks
    are 8-neighborhood local maxima; each gets an optional 1D parabolic
    refinement (on the log spectrum) along both lattice axes.
    """
    m = cov.r.shape[0]
    if not 1 <= n_sources < m:
        raise ConfigError("need 1 <= n_sources < M for a nonempty noise subspace")
    eigval, eigvec = np.linalg.eigh(cov.r)
    v_noise = eigvec[:, : m - n_sources]  # ascending order: smallest first
    proj = np.conj(lattice.steering.T) @ v_noise  # (n_feasible, m - n_sources)
    denom = np.maximum(np.sum(np.abs(proj) ** 2, axis=1), 1e-300)
    spec_flat = 1.0 / denom
    spectrum = np.full(lattice.g1.shape, -np.inf)
    spectrum[lattice.feasible] = spec_flat

    q1, q2 = spectrum.shape
    peaks = []
    for a in range(q1):
        for b in range(q2):
            v = spectrum[a, b]
            if not np.isfinite(v) and v == -np.inf:
                continue
            is_max = True
            for da in (-1, 0, 1):
                for db in (-1, 0, 1):
                    if da == 0 and db == 0:
                        continue
                    aa, bb = a + da, b + db
                    if 0 <= aa < q1 and 0 <= bb < q2 and spectrum[aa, bb] > v:
                        is_max = False
                        break
                if not is_max:
                    break
            if is_max:
                peaks.append((v, a, b))
    peaks.sort(key=lambda t: -t[0])
    peaks = peaks[:n_sources]

    g1_out, g2_out, vals = [], [], []
    d1 = 2.0 / q1
    d2 = 2.0 / q2
    for v, a, b in peaks:
        g1p, g2p = lattice.g1[a, b], lattice.g2[a, b]
        if refine_peaks:
            g1p += d1 * _parabolic_offset(spectrum, a, b, axis=0)
            g2p += d2 * _parabolic_offset(spectrum, a, b, axis=1)
            norm = np.hypot(g1p, g2p)
            if norm > 1.0 - 1e-9:
                g1p, g2p = g1p / norm * (1 - 1e-9), g2p / norm * (1 - 1e-9)
        g1_out.append(g1p)
        g2_out.append(g2p)
        vals.append(v)
    return spectrum, AngleEstimateSet(
        g1=np.array(g1_out), g2=np.array(g2_out), values=np.array(vals)
    )


def _parabolic_offset(spectrum, a, b, axis) -> float:
    q1, q2 = spectrum.shape
    if axis == 0:
        if not (1 <= a < q1 - 1):
            return 0.0
        f_m, f_0, f_p = spectrum[a - 1, b], spectrum[a, b], spectrum[a + 1, b]
    else:
        if not (1 <= b < q2 - 1):
            return 0.0
        f_m, f_0, f_p = spectrum[a, b - 1], spectrum[a, b], spectrum[a, b + 1]
    if not (np.isfinite(f_m) and np.isfinite(f_0) and np.isfinite(f_p)):
        return 0.0
    lm, l0, lp = np.log(f_m), np.log(f_0), np.log(f_p)
    denom = lm - 2.0 * l0 + lp
    if denom >= 0 or not np.isfinite(denom):
        return 0.0
    return float(np.clip(0.5 * (lm - lp) / denom, -0.5, 0.5))


@dataclass
class ScvbiResult:
    retained: np.ndarray  # indices into the candidate list
    lambda_check: np.ndarray  # (L,) support beliefs
    mean_energy: np.ndarray  # (L,) average |gain|^2 over snapshots
    gamma_mean: float


def noise_floor_gamma(obs: FrameObservation) -> float | None:
    """Noise precision from pilot-symbol subcarriers owned by nobody."""
    entries = []
    for t_p in range(obs.alloc.t_p_count):
        owned = np.any(np.abs(obs.pilots[t_p]) > 0, axis=1)
        if np.any(~owned):
            entries.append(obs.y[t_p][~owned].reshape(-1))
    if not entries:
        return None
    z = np.concatenate(entries)
    p = float(np.mean(np.abs(z) ** 2))
    return 1.0 / p if p > 0 else None


def scvbi_refine(
    snapshots: np.ndarray,
    basis: np.ndarray,
    hyper: BggHyperParams,
    lambda_support: float,
    n_iters: int = 50,
    tol: float = 1e-8,
    support_multiplier: float = 2.5,
    threshold_gamma: float | None = None,
) -> ScvbiResult:
    """Common-support variational refinement on pilot-only snapshots.

    snapshots: (N_s, M) normalized observations y_n = basis @ gains_n + noise;
    all snapshots share one support vector over the candidate columns while
    each snapshot has its own gains and precisions. The updates are the
    pilot-only specialization of the bilinear module with exact per-factor
    minimization (dimensions here are at most the antenna count).
    """
    n_s, m = snapshots.shape
    n_cand = basis.shape[1]
    if n_cand == 0:
        raise ConfigError("empty candidate basis")
    aha = np.conj(basis.T) @ basis
    ahy = np.conj(basis.T) @ snapshots.T  # (L, N_s)
    y_sq = float(np.vdot(snapshots, snapshots).real)

    # small initial belief: the first precision update then sees b_check near
    # |gain|^2, which separates the active/inactive basins of the three-layer
    # prior; the stated prior lambda_support still drives every belief update
    lam = np.full(n_cand, min(lambda_support, 0.01))
    a_check = np.full((n_s, n_cand), hyper.a)
    b_check = np.full((n_s, n_cand), hyper.b)
    p_noise = float(np.mean(np.abs(snapshots) ** 2))
    gamma = 1.0 / max(p_noise, 1e-30)
    mu = np.zeros((n_s, n_cand), dtype=complex)
    sig2 = np.ones((n_s, n_cand))
    lam_prev = lam.copy()

    for _ in range(n_iters):
        rho = a_check / b_check
        w = gamma * aha[None, :, :] + np.apply_along_axis(np.diag, 1, rho)
        mu = np.linalg.solve(w, (gamma * ahy.T)[..., None])[..., 0]
        sig2 = 1.0 / np.real(np.einsum("nii->ni", w))
        alpha2 = np.abs(mu) ** 2 + sig2
        a_check = lam[None, :] * hyper.a + (1 - lam[None, :]) * hyper.a_bar + 1.0
        b_check = np.maximum(
            lam[None, :] * hyper.b + (1 - lam[None, :]) * hyper.b_bar + alpha2, 1e-300
        )
        rho = a_check / b_check
        ln_rho = digamma(a_check) - np.log(b_check)
        ev_active = hyper.a * np.log(hyper.b) - gammaln(hyper.a) + (hyper.a - 1) * ln_rho - hyper.b * rho
        ev_inactive = (
            hyper.a_bar * np.log(hyper.b_bar)
            - gammaln(hyper.a_bar)
            + (hyper.a_bar - 1) * ln_rho
            - hyper.b_bar * rho
        )
        logit = _clamped_logit(np.full(n_cand, lambda_support)) + np.sum(
            ev_active - ev_inactive, axis=0
        )
        lam = _sigmoid(np.clip(logit, -LOG_ODDS_CLAMP, LOG_ODDS_CLAMP))
        resid = (
            y_sq
            - 2.0 * float(np.sum(np.real(np.conj(mu.T) * ahy)))
            + float(np.sum(np.real(np.conj(mu) * (mu @ aha.T))))
            + float(np.real(np.diag(aha)) @ np.sum(sig2, axis=0))
        )
        gamma = (hyper.c + n_s * m) / max(hyper.d + resid, 1e-300)
        if np.max(np.abs(lam - lam_prev)) < tol:
            break
        lam_prev = lam.copy()

    energy = np.mean(np.abs(mu) ** 2, axis=0)
    # the energy threshold prefers an external noise-floor estimate: the
    # internal gamma also absorbs basis mismatch, which would inflate it
    gamma_thr = threshold_gamma if threshold_gamma else gamma
    retained = np.flatnonzero((lam >= 0.5) & (energy > support_multiplier / gamma_thr))
    return ScvbiResult(
        retained=retained, lambda_check=lam, mean_energy=energy, gamma_mean=gamma
    )


def cluster_angles(
    user_angles: list,
    user_weights: list,
    geom: ArrayGeometry,
    ranges: np.ndarray,
    oversample: int = 2,
) -> CompactGrid:
    """Bucket retained angles on the oversampled lattice and consolidate.

    user_angles[k] is an (L_k, 2) array of (g1, g2); user_weights[k] the
    matching |gain|^2 weights. Angles in the same lattice cell merge into one
    representative at their weight-averaged transformed coordinates.
    """
    if oversample < 1:
        raise ConfigError("oversample must be >= 1")
    q1 = oversample * geom.m_x
    q2 = oversample * geom.m_z

    def cell_of(g1, g2):
        i = int(np.clip(np.rint((g1 + (q1 - 1) / q1) * q1 / 2.0), 0, q1 - 1))
        j = int(np.clip(np.rint((g2 + (q2 - 1) / q2) * q2 / 2.0), 0, q2 - 1))
        return (i, j)

    buckets: dict = {}
    membership = [set() for _ in user_angles]
    for k, (angles, weights) in enumerate(zip(user_angles, user_weights)):
        for (g1, g2), w in zip(np.atleast_2d(angles), np.atleast_1d(weights)):
            key = cell_of(g1, g2)
            buckets.setdefault(key, []).append((g1, g2, max(float(w), 1e-300)))
            membership[k].add(key)

    keys = sorted(buckets.keys())
    key_to_id = {key: j for j, key in enumerate(keys)}
    rep_g1 = np.empty(len(keys))
    rep_g2 = np.empty(len(keys))
    for key, j in key_to_id.items():
        pts = buckets[key]
        wsum = sum(w for _, _, w in pts)
        rep_g1[j] = sum(g1 * w for g1, _, w in pts) / wsum
        rep_g2[j] = sum(g2 * w for _, g2, w in pts) / wsum
    user_clusters = [
        tuple(sorted(key_to_id[key] for key in mem)) for mem in membership
    ]
    return CompactGrid(
        rep_g1=rep_g1, rep_g2=rep_g2, user_clusters=user_clusters, ranges=ranges
    )


@dataclass
class CoarseConfig:
    n_data_subcarriers: int = 16
    search_oversample: int = 4
    cluster_oversample: int = 2
    scvbi_iters: int = 50
    support_multiplier: float = 2.5
    extra_peaks: int = 0  # peaks kept beyond the MDL order


@dataclass
class CoarseResult:
    compact: CompactGrid | None
    grid: PositionGrid | None
    support_hint: np.ndarray | None
    per_user_orders: list
    per_user_retained: list

    @property
    def succeeded(self) -> bool:
        return self.compact is not None


def coarse_pipeline(
    obs: FrameObservation,
    geom: ArrayGeometry,
    hyper: BggHyperParams,
    ranges: np.ndarray,
    cfg: CoarseConfig | None = None,
) -> CoarseResult:
    """Full coarse stage; falls back (compact=None) when nothing is detected."""
    cfg = cfg or CoarseConfig()
    alloc = obs.alloc
    k_users = alloc.n_users
    lattice = make_search_lattice(geom, cfg.search_oversample)
    m = geom.n_elements
    gamma_floor = noise_floor_gamma(obs)

    user_angles, user_weights, orders, retained_counts = [], [], [], []
    for k in range(k_users):
        cov = sample_covariance(obs, k, cfg.n_data_subcarriers)
        eigval = np.linalg.eigvalsh(cov.r)[::-1]
        order = mdl_order(eigval, cov.n_samples)
        orders.append(order)
        n_peaks = min(order + cfg.extra_peaks, m - 1)
        if n_peaks < 1:
            user_angles.append(np.zeros((0, 2)))
            user_weights.append(np.zeros(0))
            retained_counts.append(0)
            continue
        _, cand = music_spectrum(cov, n_peaks, lattice)
        if cand.count == 0:
            user_angles.append(np.zeros((0, 2)))
            user_weights.append(np.zeros(0))
            retained_counts.append(0)
            continue
        basis = steering_from_transformed(cand.g1, cand.g2, geom)
        snaps = []
        for t_p in range(alloc.t_p_count):
            for n in alloc.pilot_sets[t_p][k]:
                u = obs.pilots[t_p, n - 1, k]
                snaps.append(np.conj(u) * obs.y[t_p, n - 1])
        result = scvbi_refine(
            np.stack(snaps),
            basis,
            hyper,
            lambda_support=1.0 / max(k_users, 1),
            n_iters=cfg.scvbi_iters,
            support_multiplier=cfg.support_multiplier,
            threshold_gamma=gamma_floor,
        )
        idx = result.retained
        user_angles.append(np.column_stack([cand.g1[idx], cand.g2[idx]]))
        user_weights.append(result.mean_energy[idx])
        retained_counts.append(len(idx))

    if all(len(a) == 0 for a in user_angles):
        return CoarseResult(None, None, None, orders, retained_counts)
    compact = cluster_angles(
        user_angles, user_weights, geom, ranges, cfg.cluster_oversample
    )
    grid = compact.position_grid()
    hint = compact.support_hint(grid.n_points + 1)
    return CoarseResult(compact, grid, hint, orders, retained_counts)
