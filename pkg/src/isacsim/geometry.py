"""Scene representation, UPA steering vectors, path delays, and channel synthesis.

Spherical convention: a point is (theta, phi, r) with azimuth theta in (-pi, pi],
elevation (polar) angle phi in (0, pi) measured from the vertical array axis, and
range r > 0. Cartesian mapping: x = r sin(phi) cos(theta), y = r sin(phi) sin(theta),
z = r cos(phi). The array lies in the x-z plane, so directions are ambiguous across
y = 0; scenes and grids are restricted to the forward half-space theta in [0, pi].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InfeasibleDelay

SPEED_OF_LIGHT = 299792458.0  # m/s, exact


@dataclass(frozen=True)
class SphericalPoint:
    """A point in spherical coordinates (radians, meters)."""

    theta: float
    phi: float
    r: float

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError(f"range must be positive, got {self.r}")
        if not 0 < self.phi < np.pi:
            raise ValueError(f"elevation must lie in (0, pi), got {self.phi}")
        if not -np.pi < self.theta <= np.pi:
            raise ValueError(f"azimuth must lie in (-pi, pi], got {self.theta}")

    def to_cartesian(self) -> np.ndarray:
        s = np.sin(self.phi)
        return self.r * np.array(
            [s * np.cos(self.theta), s * np.sin(self.theta), np.cos(self.phi)]
        )

    @staticmethod
    def from_cartesian(xyz) -> "SphericalPoint":
        x, y, z = float(xyz[0]), float(xyz[1]), float(xyz[2])
        r = float(np.sqrt(x * x + y * y + z * z))
        return SphericalPoint(
            theta=float(np.arctan2(y, x)), phi=float(np.arccos(z / r)), r=r
        )


@dataclass(frozen=True)
class ArrayGeometry:
    """Uniform planar array: m_x horizontal by m_z vertical elements."""

    m_x: int
    m_z: int
    spacing: float = 0.5  # element spacing in wavelengths

    def __post_init__(self):
        if self.m_x < 1 or self.m_z < 1:
            raise ValueError("array dimensions must be >= 1")

    @property
    def n_elements(self) -> int:
        return self.m_x * self.m_z


@dataclass(frozen=True)
class OfdmParams:
    """OFDM numerology: n_subcarriers at subcarrier_spacing Hz."""

    n_subcarriers: int
    subcarrier_spacing: float
    carrier_freq: float = 3.5e9

    def __post_init__(self):
        if self.n_subcarriers < 1 or self.subcarrier_spacing <= 0:
            raise ValueError("invalid OFDM numerology")

    @property
    def bandwidth(self) -> float:
        return self.n_subcarriers * self.subcarrier_spacing


def transformed_angles(theta, phi):
    """Map (theta, phi) to the transformed angular coordinates.

    g1 = cos(theta) sin(phi), g2 = cos(phi); both lie in [-1, 1] and the array
    phase profile is linear in (g1, g2).
    """
    return np.cos(theta) * np.sin(phi), np.cos(phi)


def angles_from_transformed(g1, g2):
    """Invert (g1, g2) to (theta, phi) in the forward half-space theta in [0, pi].

    Requires g1**2 + g2**2 <= 1; callers mask infeasible cells beforehand.
    """
    phi = np.arccos(np.clip(g2, -1.0, 1.0))
    sin_phi = np.sin(phi)
    ratio = np.clip(np.divide(g1, sin_phi, where=sin_phi > 0, out=np.zeros_like(np.asarray(g1, dtype=float))), -1.0, 1.0)
    theta = np.arccos(ratio)
    return theta, phi


def steering_vector(theta, phi, geom: ArrayGeometry) -> np.ndarray:
    """UPA array response for direction (theta, phi), length m_x*m_z.

    Element (i, j) (horizontal i, vertical j) sits at index j*m_x + i and has
    phase 2*pi*spacing*(i*g1 + j*g2). Every entry has unit modulus.
    """
    g1, g2 = transformed_angles(theta, phi)
    return steering_from_transformed(g1, g2, geom)


def steering_from_transformed(g1, g2, geom: ArrayGeometry) -> np.ndarray:
    """Steering vector(s) directly from transformed coordinates.

    Scalar inputs give shape (M,); length-Q arrays give shape (M, Q).
    """
    g1 = np.asarray(g1, dtype=float)
    g2 = np.asarray(g2, dtype=float)
    ix = np.arange(geom.m_x)
    jz = np.arange(geom.m_z)
    # phase[j*m_x + i] = spacing * (i*g1 + j*g2), horizontal-major
    ph_x = ix[:, None] * g1[None, ...]
    ph_z = jz[:, None] * g2[None, ...]
    phase = (ph_x[None, :, ...] + ph_z[:, None, ...]).reshape((geom.n_elements,) + g1.shape)
    return np.exp(2j * np.pi * geom.spacing * phase)


def los_delay(p_user: SphericalPoint) -> float:
    """Line-of-sight propagation delay r_u / c."""
    return p_user.r / SPEED_OF_LIGHT


def direction_cosine(theta_a, phi_a, theta_b, phi_b):
    """Cosine of the angle between two directions (spherical law of cosines)."""
    return np.sin(phi_a) * np.sin(phi_b) * np.cos(theta_a - theta_b) + np.cos(
        phi_a
    ) * np.cos(phi_b)


def nlos_delay(p_scatterer: SphericalPoint, p_user: SphericalPoint) -> float:
    """Single-bounce delay user -> scatterer -> array origin."""
    return float(
        nlos_delay_arrays(
            np.array([p_scatterer.theta]),
            np.array([p_scatterer.phi]),
            np.array([p_scatterer.r]),
            p_user,
        )[0]
    )


def nlos_delay_arrays(theta, phi, r, p_user: SphericalPoint) -> np.ndarray:
    """Vectorized single-bounce delays for scatterer arrays against one user."""
    g = direction_cosine(theta, phi, p_user.theta, p_user.phi)
    r_u = p_user.r
    leg = np.sqrt(np.maximum(r_u**2 + r**2 - 2.0 * r_u * r * g, 0.0))
    return (leg + r) / SPEED_OF_LIGHT


def virtual_scatterer_range(
    theta: float, phi: float, tau: float, p_user: SphericalPoint
) -> float:
    """Range of the virtual scatterer realizing delay tau along (theta, phi).

    Solves sqrt(r_u^2 + r^2 - 2 r_u r g) + r = c*tau in closed form. Raises
    InfeasibleDelay when no positive solution exists.
    """
    g = float(direction_cosine(theta, phi, p_user.theta, p_user.phi))
    ct = tau * SPEED_OF_LIGHT
    denom = 2.0 * (ct - p_user.r * g)
    if denom <= 0:
        raise InfeasibleDelay(f"delay {tau} infeasible for user range {p_user.r}")
    r = (ct * ct - p_user.r**2) / denom
    if r <= 0:
        raise InfeasibleDelay(f"delay {tau} gives nonpositive range {r}")
    residual = np.sqrt(p_user.r**2 + r * r - 2 * p_user.r * r * g) + r - ct
    if abs(residual) > 1e-9 * ct:
        raise InfeasibleDelay(f"closed form residual {residual} too large")
    return float(r)


@dataclass
class Scene:
    """Ground truth: scatterers, per-user path sets, users, gains, time offsets."""

    scatterers: list  # list[SphericalPoint], length L
    per_user_sets: list  # list[tuple[int, ...]], indices into scatterers
    users: list  # list[SphericalPoint], length K
    los_gains: np.ndarray  # (K,) complex
    nlos_gains: list  # list of complex arrays aligned with per_user_sets
    time_offsets: np.ndarray  # (K,) seconds

    def __post_init__(self):
        for k, s in enumerate(self.per_user_sets):
            if len(s) == 0:
                raise ValueError(f"user {k} has an empty scatterer set")
        if not np.all(np.isfinite(self.los_gains)):
            raise ValueError("non-finite LoS gain")
        for g in self.nlos_gains:
            if not np.all(np.isfinite(g)):
                raise ValueError("non-finite NLoS gain")

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_scatterers(self) -> int:
        return len(self.scatterers)

    def to_dict(self) -> dict:
        def pt(p):
            return [p.theta, p.phi, p.r]

        return {
            "scatterers": [pt(p) for p in self.scatterers],
            "per_user_sets": [list(s) for s in self.per_user_sets],
            "users": [pt(p) for p in self.users],
            "los_gains_re": self.los_gains.real.tolist(),
            "los_gains_im": self.los_gains.imag.tolist(),
            "nlos_gains_re": [g.real.tolist() for g in self.nlos_gains],
            "nlos_gains_im": [g.imag.tolist() for g in self.nlos_gains],
            "time_offsets": self.time_offsets.tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> "Scene":
        return Scene(
            scatterers=[SphericalPoint(*p) for p in d["scatterers"]],
            per_user_sets=[tuple(s) for s in d["per_user_sets"]],
            users=[SphericalPoint(*p) for p in d["users"]],
            los_gains=np.array(d["los_gains_re"]) + 1j * np.array(d["los_gains_im"]),
            nlos_gains=[
                np.array(re) + 1j * np.array(im)
                for re, im in zip(d["nlos_gains_re"], d["nlos_gains_im"])
            ],
            time_offsets=np.array(d["time_offsets"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @staticmethod
    def from_json(s: str) -> "Scene":
        return Scene.from_dict(json.loads(s))


@dataclass
class SceneConfig:
    """Random-scene generation knobs.

    The region is a Cartesian box (meters); keep y_min > 0 so every direction
    stays inside the forward half-space.
    """

    n_users: int = 2
    n_scatterers: int = 3
    paths_per_user: int = 2
    overlap_prob: float = 0.7
    x_range: tuple = (20.0, 100.0)
    y_range: tuple = (10.0, 90.0)
    z_range: tuple = (0.0, 10.0)
    user_prior_xy: tuple = ((60.0, 80.0), (75.0, 70.0), (55.0, 95.0), (80.0, 85.0))
    sigma_p: float = 1.0  # user position prior std^2 total over x,y
    user_height: float = 1.5
    los_power: float = 1.0
    nlos_power: float = 1.0
    power_decay: float = 0.8  # multiplicative per extra path
    offset_bound: float = 0.0  # seconds; 0 disables time offsets

    def validate(self):
        for lo, hi in (self.x_range, self.y_range, self.z_range):
            if hi < lo:
                raise ConfigError("empty scene region")
        if not 0.0 <= self.overlap_prob <= 1.0:
            raise ConfigError("overlap probability outside [0, 1]")
        if self.n_users < 1 or self.n_scatterers < 1:
            raise ConfigError("need at least one user and one scatterer")
        if self.paths_per_user < 1 or self.paths_per_user > self.n_scatterers:
            raise ConfigError("paths_per_user must lie in [1, n_scatterers]")
        if self.n_users > len(self.user_prior_xy):
            raise ConfigError("not enough user prior positions configured")


def generate_scene(cfg: SceneConfig, rng_seed) -> Scene:
    """Draw a deterministic random scene from cfg.

    Scatterers are uniform in the configured box; user k's path set replicates
    user 0's with probability overlap_prob per slot; gains are complex Gaussian
    with an exponential power profile; time offsets are uniform in
    [-offset_bound, offset_bound].
    """
    cfg.validate()
    rng = np.random.default_rng(rng_seed)
    L, K = cfg.n_scatterers, cfg.n_users

    xyz = np.column_stack(
        [
            rng.uniform(*cfg.x_range, size=L),
            rng.uniform(*cfg.y_range, size=L),
            rng.uniform(*cfg.z_range, size=L),
        ]
    )
    # z = 0 would give phi = pi/2 exactly; nudge off the boundary
    xyz[:, 2] = np.maximum(xyz[:, 2], 1e-3)
    scatterers = [SphericalPoint.from_cartesian(p) for p in xyz]

    base = tuple(rng.choice(L, size=cfg.paths_per_user, replace=False).tolist())
    sets = [base]
    for _ in range(1, K):
        members = []
        for l in base:
            if rng.random() < cfg.overlap_prob:
                members.append(l)
            else:
                members.append(int(rng.integers(L)))
        # dedupe preserving order; refill to keep |set| = paths_per_user
        seen = list(dict.fromkeys(members))
        pool = [l for l in range(L) if l not in seen]
        rng.shuffle(pool)
        while len(seen) < cfg.paths_per_user and pool:
            seen.append(pool.pop())
        sets.append(tuple(seen))

    users = []
    for k in range(K):
        cx, cy = cfg.user_prior_xy[k]
        x = cx + rng.normal(0.0, np.sqrt(cfg.sigma_p**2 / 2.0))
        y = cy + rng.normal(0.0, np.sqrt(cfg.sigma_p**2 / 2.0))
        users.append(SphericalPoint.from_cartesian([x, y, cfg.user_height]))

    def cgauss(power, size=None):
        return np.sqrt(power / 2.0) * (
            rng.standard_normal(size) + 1j * rng.standard_normal(size)
        )

    los_gains = np.array([cgauss(cfg.los_power) for _ in range(K)])
    nlos_gains = []
    for k in range(K):
        powers = cfg.nlos_power * cfg.power_decay ** np.arange(len(sets[k]))
        nlos_gains.append(np.array([cgauss(p) for p in powers]))

    offsets = rng.uniform(-cfg.offset_bound, cfg.offset_bound, size=K)
    return Scene(
        scatterers=scatterers,
        per_user_sets=sets,
        users=users,
        los_gains=los_gains,
        nlos_gains=nlos_gains,
        time_offsets=offsets,
    )


def synthesize_channel(
    scene: Scene, geom: ArrayGeometry, ofdm: OfdmParams, k: int, n: int
) -> np.ndarray:
    """Exact channel vector of user k on subcarrier n (LoS plus single bounces)."""
    user = scene.users[k]
    f = ofdm.subcarrier_spacing
    tau0 = los_delay(user)
    h = scene.los_gains[k] * np.exp(
        -2j * np.pi * n * f * (scene.time_offsets[k] + tau0)
    ) * steering_vector(user.theta, user.phi, geom)
    for gain, l in zip(scene.nlos_gains[k], scene.per_user_sets[k]):
        p = scene.scatterers[l]
        tau = nlos_delay(p, user)
        h = h + gain * np.exp(
            -2j * np.pi * n * f * (scene.time_offsets[k] + tau)
        ) * steering_vector(p.theta, p.phi, geom)
    return h


def synthesize_channel_matrix(
    scene: Scene, geom: ArrayGeometry, ofdm: OfdmParams, k: int
) -> np.ndarray:
    """Channels of user k on every subcarrier, shape (N, M)."""
    user = scene.users[k]
    f = ofdm.subcarrier_spacing
    n_idx = np.arange(1, ofdm.n_subcarriers + 1)
    delays = [los_delay(user)] + [
        nlos_delay(scene.scatterers[l], user) for l in scene.per_user_sets[k]
    ]
    gains = np.concatenate([[scene.los_gains[k]], scene.nlos_gains[k]])
    steer = np.column_stack(
        [steering_vector(user.theta, user.phi, geom)]
        + [
            steering_vector(scene.scatterers[l].theta, scene.scatterers[l].phi, geom)
            for l in scene.per_user_sets[k]
        ]
    )  # (M, 1+L_k)
    phase = np.exp(
        -2j
        * np.pi
        * f
        * np.outer(n_idx, scene.time_offsets[k] + np.asarray(delays))
    )  # (N, 1+L_k)
    return (phase * gains[None, :]) @ steer.T
