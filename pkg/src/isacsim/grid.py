"""Dynamic 3D position grids and the sensing matrices built on them.

The per-user, per-subcarrier sensing block factorizes as

    Phi_{k,n} = Abar_k @ Diag(P_k[n])

where Abar_k = [a(user_k), A(grid)] collects steering columns (M x (Q+1)) and
P_k[n] holds the unit-modulus delay phases of subcarrier n (column 0 is the
LoS phase). Everything downstream (VBI moments, surrogate objective, lazy
operator) works off these two factors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .geometry import (
    ArrayGeometry,
    OfdmParams,
    SphericalPoint,
    angles_from_transformed,
    los_delay,
    nlos_delay_arrays,
    steering_from_transformed,
    transformed_angles,
)


@dataclass
class PositionGrid:
    """Q grid positions in spherical coordinates; mutable only by refinement."""

    theta: np.ndarray
    phi: np.ndarray
    r: np.ndarray
    provenance: str = "uniform"  # "uniform" | "compact"

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.phi = np.asarray(self.phi, dtype=float)
        self.r = np.asarray(self.r, dtype=float)
        if not (len(self.theta) == len(self.phi) == len(self.r)):
            raise ValueError("grid coordinate arrays must share a length")
        if len(self.theta) < 1:
            raise ValueError("grid must contain at least one point")

    @property
    def n_points(self) -> int:
        return len(self.theta)

    @property
    def points(self) -> list:
        return [
            SphericalPoint(float(t), float(p), float(rr))
            for t, p, rr in zip(self.theta, self.phi, self.r)
        ]

    def copy(self) -> "PositionGrid":
        return PositionGrid(
            self.theta.copy(), self.phi.copy(), self.r.copy(), self.provenance
        )

    def cartesian(self) -> np.ndarray:
        s = np.sin(self.phi)
        return np.column_stack(
            [
                self.r * s * np.cos(self.theta),
                self.r * s * np.sin(self.theta),
                self.r * np.cos(self.phi),
            ]
        )

    def to_json(self) -> str:
        return json.dumps(
            {
                "theta": self.theta.tolist(),
                "phi": self.phi.tolist(),
                "r": self.r.tolist(),
                "provenance": self.provenance,
            }
        )

    @staticmethod
    def from_json(s: str) -> "PositionGrid":
        d = json.loads(s)
        return PositionGrid(
            np.array(d["theta"]), np.array(d["phi"]), np.array(d["r"]), d["provenance"]
        )


@dataclass
class SensingParams:
    """The refinable parameter collection: grid, user positions, time offsets."""

    grid: PositionGrid
    user_positions: list  # list[SphericalPoint]
    time_offsets: np.ndarray  # (K,) seconds

    def __post_init__(self):
        self.time_offsets = np.asarray(self.time_offsets, dtype=float)
        if len(self.user_positions) != len(self.time_offsets):
            raise ValueError("user position / offset count mismatch")

    @property
    def n_users(self) -> int:
        return len(self.user_positions)

    def copy(self) -> "SensingParams":
        return SensingParams(
            self.grid.copy(), list(self.user_positions), self.time_offsets.copy()
        )


def uniform_angle_grid(q1: int, q2: int):
    """Angle grid uniform in the transformed domain.

    Returns (theta, phi, g1, g2, lattice_index, skipped) where the first four
    are arrays over the feasible cells, lattice_index is the (i, j) cell of each
    feasible point, and skipped lists the infeasible (i, j) cells (those with
    g1^2 + g2^2 > 1, which match no physical direction).
    """
    if q1 < 1 or q2 < 1:
        raise ConfigError("grid sizes must be >= 1")
    i = np.arange(1, q1 + 1)
    j = np.arange(1, q2 + 1)
    g1v = -(q1 - 1) / q1 + 2.0 * (i - 1) / q1
    g2v = -(q2 - 1) / q2 + 2.0 * (j - 1) / q2
    g1m, g2m = np.meshgrid(g1v, g2v, indexing="ij")
    feasible = g1m**2 + g2m**2 <= 1.0
    ii, jj = np.meshgrid(i, j, indexing="ij")
    g1 = g1m[feasible]
    g2 = g2m[feasible]
    theta, phi = angles_from_transformed(g1, g2)
    lattice_index = np.column_stack([ii[feasible], jj[feasible]])
    skipped = np.column_stack([ii[~feasible], jj[~feasible]])
    return theta, phi, g1, g2, lattice_index, skipped


def uniform_range_grid(q_r: int, r_min: float, r_max: float) -> np.ndarray:
    """q_r equally spaced ranges covering [r_min, r_max] inclusive."""
    if q_r < 1:
        raise ConfigError("q_r must be >= 1")
    if not 0 < r_min < r_max:
        raise ConfigError("need 0 < r_min < r_max")
    if q_r == 1:
        return np.array([0.5 * (r_min + r_max)])
    return np.linspace(r_min, r_max, q_r)


def uniform_position_grid(q1: int, q2: int, q_r: int, r_min: float, r_max: float) -> PositionGrid:
    """All combinations of the feasible angle cells with the range grid."""
    theta, phi, _, _, _, _ = uniform_angle_grid(q1, q2)
    ranges = uniform_range_grid(q_r, r_min, r_max)
    qa = len(theta)
    return PositionGrid(
        theta=np.repeat(theta, q_r),
        phi=np.repeat(phi, q_r),
        r=np.tile(ranges, qa),
        provenance="uniform",
    )


def sparse_basis(grid: PositionGrid, geom: ArrayGeometry) -> np.ndarray:
    """Steering dictionary over the grid angles, shape (M, Q). Angles only."""
    g1, g2 = transformed_angles(grid.theta, grid.phi)
    return steering_from_transformed(g1, g2, geom)


def delay_diagonal(
    grid: PositionGrid, k: int, n: int, params: SensingParams, ofdm: OfdmParams
) -> np.ndarray:
    """Unit-modulus delay phases of subcarrier n for user k over the grid."""
    user = params.user_positions[k]
    tau = nlos_delay_arrays(grid.theta, grid.phi, grid.r, user)
    return np.exp(
        -2j * np.pi * n * ofdm.subcarrier_spacing * (params.time_offsets[k] + tau)
    )


@dataclass
class UserFactors:
    """Per-user factorization of the sensing blocks.

    abar: (M, Q+1) steering columns, column 0 is the user (LoS) direction.
    phases: (N, Q+1) unit-modulus delay phases; phases[n-1, 0] is the LoS phase.
    Phi_{k,n} = abar * phases[n-1][None, :].
    """

    abar: np.ndarray
    phases: np.ndarray

    def block(self, n: int) -> np.ndarray:
        """Dense Phi_{k,n}, shape (M, Q+1). n is 1-based."""
        return self.abar * self.phases[n - 1][None, :]

    def apply(self, coeffs: np.ndarray) -> np.ndarray:
        """Channel means on every subcarrier: (N, M) = Phi_{k,n} @ coeffs."""
        return (self.phases * coeffs[None, :]) @ self.abar.T

    def adjoint(self, z: np.ndarray) -> np.ndarray:
        """Sum_n Phi_{k,n}^H z[n] for z of shape (N, M); returns (Q+1,)."""
        return np.einsum("ni,ni->i", np.conj(self.phases), z @ np.conj(self.abar))


def build_user_factors(
    params: SensingParams, geom: ArrayGeometry, ofdm: OfdmParams
) -> list:
    """UserFactors for every user under the current sensing parameters."""
    a_grid = sparse_basis(params.grid, geom)
    f = ofdm.subcarrier_spacing
    n_idx = np.arange(1, ofdm.n_subcarriers + 1)
    out = []
    for k, user in enumerate(params.user_positions):
        g1u, g2u = transformed_angles(user.theta, user.phi)
        a_user = steering_from_transformed(float(g1u), float(g2u), geom)
        abar = np.column_stack([a_user, a_grid])
        taus = np.concatenate(
            [
                [los_delay(user)],
                nlos_delay_arrays(
                    params.grid.theta, params.grid.phi, params.grid.r, user
                ),
            ]
        )
        phases = np.exp(-2j * np.pi * f * np.outer(n_idx, params.time_offsets[k] + taus))
        out.append(UserFactors(abar=abar, phases=phases))
    return out


def sensing_matrix_user(
    k: int, n: int, params: SensingParams, geom: ArrayGeometry, ofdm: OfdmParams
) -> np.ndarray:
    """Dense Phi_{k,n}(xi): LoS column followed by the grid columns, (M, Q+1)."""
    user = params.user_positions[k]
    g1u, g2u = transformed_angles(user.theta, user.phi)
    a_user = steering_from_transformed(float(g1u), float(g2u), geom)
    e_los = np.exp(
        -2j
        * np.pi
        * n
        * ofdm.subcarrier_spacing
        * (params.time_offsets[k] + los_delay(user))
    )
    a_grid = sparse_basis(params.grid, geom)
    d = delay_diagonal(params.grid, k, n, params, ofdm)
    return np.column_stack([e_los * a_user, a_grid * d[None, :]])


class StackedSensingOperator:
    """Block-diagonal sensing operator over users, each block stacked over n.

    Acts on coefficient vectors of shape (K, Q+1) (or flat K*(Q+1)) and returns
    per-user channel stacks of shape (K, N, M). Supports apply, adjoint, and
    single-column extraction without materializing the dense matrix; a dense
    path exists for small-instance verification.
    """

    def __init__(self, params: SensingParams, geom: ArrayGeometry, ofdm: OfdmParams):
        self.params = params
        self.geom = geom
        self.ofdm = ofdm
        self.factors = build_user_factors(params, geom, ofdm)
        self.n_users = params.n_users
        self.n_cols_per_user = params.grid.n_points + 1

    @property
    def shape(self):
        m = self.geom.n_elements
        n = self.ofdm.n_subcarriers
        return (
            self.n_users * n * m,
            self.n_users * self.n_cols_per_user,
        )

    def _coeffs(self, alpha) -> np.ndarray:
        alpha = np.asarray(alpha)
        if alpha.ndim == 1:
            alpha = alpha.reshape(self.n_users, self.n_cols_per_user)
        return alpha

    def apply(self, alpha) -> np.ndarray:
        """alpha (K, Q+1) -> channels (K, N, M)."""
        alpha = self._coeffs(alpha)
        return np.stack([f.apply(a) for f, a in zip(self.factors, alpha)])

    def adjoint(self, channels) -> np.ndarray:
        """channels (K, N, M) -> (K, Q+1)."""
        return np.stack([f.adjoint(z) for f, z in zip(self.factors, channels)])

    def column(self, k: int, i: int) -> np.ndarray:
        """Column i of user k's block as an (N, M) channel stack."""
        f = self.factors[k]
        return np.outer(f.phases[:, i], f.abar[:, i])

    def dense(self) -> np.ndarray:
        """Materialized block-diagonal matrix; only for small instances."""
        m = self.geom.n_elements
        n = self.ofdm.n_subcarriers
        cols = self.n_cols_per_user
        out = np.zeros((self.n_users * n * m, self.n_users * cols), dtype=complex)
        for k, f in enumerate(self.factors):
            for sub in range(n):
                rows = slice(k * n * m + sub * m, k * n * m + (sub + 1) * m)
                out[rows, k * cols : (k + 1) * cols] = f.block(sub + 1)
        return out
