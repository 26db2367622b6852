"""Experiment orchestration: configs, the outer EM loop, variants, metrics, sweeps.

Every run is fully determined by (config, seed): scene, pilots, data, and noise
draw from independent child streams of one master seed. The outer loop
alternates the turbo E-step with the surrogate M-step until the reconstructed
channel stops moving or the iteration budget runs out, then scores channel and
data recovery plus scatterer localization against the held-out ground truth.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import coarse as coarse_mod
from .errors import ConfigError, EmptyEstimate, NumericalFailure
from .frame import (
    Allocation,
    DataPrior,
    FrameObservation,
    generate_data,
    generate_pilots,
    make_allocation,
    noise_precision_for_snr,
    simulate_uplink,
    true_channels,
)
from .geometry import (
    ArrayGeometry,
    OfdmParams,
    Scene,
    SceneConfig,
    SphericalPoint,
    angles_from_transformed,
    generate_scene,
    transformed_angles,
)
from .grid import (
    PositionGrid,
    SensingParams,
    StackedSensingOperator,
    uniform_position_grid,
    uniform_range_grid,
)
from .mstep import (
    ParamScales,
    SensingPrior,
    SurrogateProblem,
    mstep_update,
    refinable_from_support,
)
from .turbo import TurboBeliefs, turbo_e_step
from .vbi import (
    BggHyperParams,
    BilinearModel,
    SupportEstimate,
    VariationalState,
    alpha_quadratic,
    assembled_objective,
    init_state,
    omp_initial_support,
)

VARIANTS = ("bisvbi", "bivbi_full_inverse", "iid_prior", "two_stage", "genie_aided")


@dataclass
class GridConfig:
    q1: int = 8
    q2: int = 8
    q_r: int = 5
    r_min: float = 20.0
    r_max: float = 130.0


@dataclass
class AlgorithmConfig:
    t_outer: int = 30
    inner_iters: int = 3
    turbo_iters: int = 2
    b_steps: int = 5
    support_multiplier: float = 2.5
    support_rule: str = "posterior"
    conv_tol: float = 1e-4
    min_outer: int = 8
    use_coarse: bool = False
    omp_max_atoms: int = 6
    mstep_enabled: bool = True
    mstep_ascent_steps: int = 1
    fd_rel_step: float = 1e-6
    los_collinearity: float = 0.999


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce a run or a sweep."""

    m_x: int = 4
    m_z: int = 4
    spacing: float = 0.5
    n_subcarriers: int = 64
    subcarrier_spacing: float = 480e3
    carrier_freq: float = 3.5e9
    n_pilot: int = 4
    n_data: int = 16
    t_p: int = 1
    t_d: int = 2
    snr_db: float = 20.0
    variant: str = "bisvbi"
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    planted: str | None = None  # None | "on_grid" | "off_grid_single"
    grid: GridConfig = field(default_factory=GridConfig)
    hyper: BggHyperParams = field(default_factory=BggHyperParams)
    algo: AlgorithmConfig = field(default_factory=AlgorithmConfig)
    coarse: coarse_mod.CoarseConfig = field(default_factory=coarse_mod.CoarseConfig)
    rmse_penalty: float | None = None  # default: half the region diagonal
    # sweep axes
    snr_db_list: list = field(default_factory=list)
    n_pilot_list: list = field(default_factory=list)
    variants: list = field(default_factory=lambda: ["bisvbi"])
    seeds: list = field(default_factory=lambda: [0])
    workers: int = 1
    trace_objective: bool = False

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; pick from {VARIANTS}")
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown sweep variant {v!r}")
        if self.n_pilot * self.scene.n_users > self.n_subcarriers:
            raise ConfigError("pilot allocation impossible: K * N^p > N")
        if self.t_p < 1 or self.t_d < 0:
            raise ConfigError("need t_p >= 1 and t_d >= 0")
        self.scene.validate()
        self.hyper.validate()

    @property
    def bandwidth(self) -> float:
        return self.n_subcarriers * self.subcarrier_spacing

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        d = dict(d)
        for key, cls in (
            ("scene", SceneConfig),
            ("grid", GridConfig),
            ("hyper", BggHyperParams),
            ("algo", AlgorithmConfig),
            ("coarse", coarse_mod.CoarseConfig),
        ):
            if key in d and isinstance(d[key], dict):
                d[key] = cls(**{
                    k: tuple(v) if isinstance(v, list) and k.endswith(("_range", "_xy")) else v
                    for k, v in d[key].items()
                })
        known = {f.name for f in dataclasses.fields(ExperimentConfig)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return ExperimentConfig(**d)


def desk_profile(**overrides) -> ExperimentConfig:
    """Small instance with the paper-profile bandwidth (fast acceptance runs)."""
    cfg = ExperimentConfig()
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


def paper_profile(**overrides) -> ExperimentConfig:
    """Full-scale configuration matching the reference experiment setup."""
    cfg = ExperimentConfig(
        m_x=8,
        m_z=8,
        n_subcarriers=1024,
        subcarrier_spacing=30e3,
        n_pilot=8,
        n_data=256,
        scene=SceneConfig(
            n_users=4,
            n_scatterers=6,
            paths_per_user=3,
            x_range=(20.0, 120.0),
            y_range=(5.0, 105.0),
            z_range=(0.0, 10.0),
            user_prior_xy=((70.0, 60.0), (75.0, 65.0), (65.0, 70.0), (80.0, 55.0)),
        ),
        grid=GridConfig(q1=16, q2=16, q_r=10, r_min=20.0, r_max=170.0),
        algo=AlgorithmConfig(use_coarse=True),
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


PROFILES = {"desk": desk_profile, "paper": paper_profile}


@dataclass
class Experiment:
    """A fully materialized simulation instance."""

    cfg: ExperimentConfig
    scene: Scene
    geom: ArrayGeometry
    ofdm: OfdmParams
    alloc: Allocation
    pilots: np.ndarray
    data_prior: DataPrior
    data: np.ndarray
    gamma_true: float
    obs: FrameObservation
    channels_true: np.ndarray  # (K, N, M)
    grid0: PositionGrid
    prior: SensingPrior


def _planted_scene(cfg: ExperimentConfig, grid: PositionGrid, rng) -> Scene:
    """Scenes aligned with the initial grid for controlled recovery checks."""
    k_users = cfg.scene.n_users
    users = []
    for k in range(k_users):
        cx, cy = cfg.scene.user_prior_xy[k]
        x = cx + rng.normal(0.0, np.sqrt(cfg.scene.sigma_p**2 / 2.0))
        y = cy + rng.normal(0.0, np.sqrt(cfg.scene.sigma_p**2 / 2.0))
        users.append(SphericalPoint.from_cartesian([x, y, cfg.scene.user_height]))

    g1, g2 = transformed_angles(grid.theta, grid.phi)
    n_grid = grid.n_points

    def far_enough(cand, chosen, min_d):
        return all(np.hypot(g1[cand] - g1[c], g2[cand] - g2[c]) >= min_d for c in chosen)

    min_sep = 2.0 * 2.0 / max(cfg.grid.q1, cfg.grid.q2)
    if cfg.planted == "off_grid_single":
        base = int(rng.integers(n_grid))
        cell_g = 2.0 / cfg.grid.q1
        dr = (cfg.grid.r_max - cfg.grid.r_min) / max(cfg.grid.q_r - 1, 1)
        g1p = g1[base] + 0.5 * cell_g * (1 if g1[base] < 0 else -1)
        g2p = g2[base] + 0.5 * cell_g * (1 if g2[base] < 0 else -1)
        norm = np.hypot(g1p, g2p)
        if norm > 0.95:
            g1p, g2p = g1p / norm * 0.95, g2p / norm * 0.95
        theta, phi = angles_from_transformed(np.array([g1p]), np.array([g2p]))
        r = float(np.clip(grid.r[base] + 0.5 * dr, cfg.grid.r_min, cfg.grid.r_max))
        scatterers = [SphericalPoint(float(theta[0]), float(phi[0]), r)]
        sets = [(0,) for _ in range(k_users)]
    else:  # on_grid: three scatterers, middle one shared
        chosen: list[int] = []
        order = rng.permutation(n_grid)
        for cand in order:
            if far_enough(cand, chosen, min_sep):
                chosen.append(int(cand))
            if len(chosen) == 3:
                break
        if len(chosen) < 3:
            chosen = list(order[:3])
        scatterers = [grid.points[q] for q in chosen]
        sets = []
        for k in range(k_users):
            sets.append((0, 1) if k % 2 == 0 else (1, 2))

    def cgauss(power):
        return np.sqrt(power / 2.0) * (rng.standard_normal() + 1j * rng.standard_normal())

    los_gains = np.array([cgauss(cfg.scene.los_power) for _ in range(k_users)])
    nlos_gains = [
        np.array([cgauss(cfg.scene.nlos_power) for _ in s]) for s in sets
    ]
    offsets = rng.uniform(-cfg.scene.offset_bound, cfg.scene.offset_bound, size=k_users)
    return Scene(
        scatterers=scatterers,
        per_user_sets=sets,
        users=users,
        los_gains=los_gains,
        nlos_gains=nlos_gains,
        time_offsets=offsets,
    )


def build_experiment(cfg: ExperimentConfig, seed: int | None = None) -> Experiment:
    """Deterministically materialize scene, frame, and observation."""
    cfg.validate()
    seed = cfg.seed if seed is None else seed
    ss = np.random.SeedSequence([int(seed), 0xD05E])
    scene_rng, pilot_rng, data_rng, noise_rng = [
        np.random.default_rng(s) for s in ss.spawn(4)
    ]
    geom = ArrayGeometry(cfg.m_x, cfg.m_z, cfg.spacing)
    ofdm = OfdmParams(cfg.n_subcarriers, cfg.subcarrier_spacing, cfg.carrier_freq)
    cfg.scene.offset_bound = 2.0 / cfg.bandwidth
    grid0 = uniform_position_grid(
        cfg.grid.q1, cfg.grid.q2, cfg.grid.q_r, cfg.grid.r_min, cfg.grid.r_max
    )
    if cfg.planted:
        scene = _planted_scene(cfg, grid0, scene_rng)
    else:
        scene = generate_scene(cfg.scene, scene_rng)
    alloc = make_allocation(
        cfg.n_subcarriers, cfg.scene.n_users, cfg.n_pilot, cfg.n_data, cfg.t_p, cfg.t_d
    )
    pilots = generate_pilots(alloc, pilot_rng)
    data_prior = DataPrior.unit(alloc)
    data = generate_data(alloc, data_prior, data_rng)
    channels = true_channels(scene, geom, ofdm)
    gamma_true = noise_precision_for_snr(cfg.snr_db, channels, alloc, data_prior)
    obs = simulate_uplink(
        scene, geom, ofdm, alloc, pilots, data, gamma_true, noise_rng
    )
    prior = SensingPrior(
        user_prior_xy=tuple(cfg.scene.user_prior_xy[: cfg.scene.n_users]),
        sigma_p2=cfg.scene.sigma_p**2,
        offset_bound=cfg.scene.offset_bound,
        r_bounds=(cfg.grid.r_min, cfg.grid.r_max),
    )
    return Experiment(
        cfg=cfg,
        scene=scene,
        geom=geom,
        ofdm=ofdm,
        alloc=alloc,
        pilots=pilots,
        data_prior=data_prior,
        data=data,
        gamma_true=gamma_true,
        obs=obs,
        channels_true=channels,
        grid0=grid0,
        prior=prior,
    )


def estimate_initial_offsets(
    obs: FrameObservation,
    users_prior: list,
    geom: ArrayGeometry,
    ofdm: OfdmParams,
    bound: float,
    n_search: int = 256,
) -> np.ndarray:
    """Per-user timing-offset initialization from beamformed pilot phases.

    A common offset shifts every path delay equally, which the dynamic range
    grid can absorb, so the ascent needs to start inside the main correlation
    lobe. The LoS delay is pinned by the user-position prior: beamform the
    pilot snapshots toward the prior direction, strip the expected propagation
    phase, and pick the offset whose phase ramp best matches across the pilot
    subcarriers.
    """
    from .geometry import los_delay, steering_vector

    k_users = len(users_prior)
    offsets = np.zeros(k_users)
    f0 = ofdm.subcarrier_spacing
    taus = np.linspace(-bound, bound, n_search)
    for k in range(k_users):
        user = users_prior[k]
        beam = steering_vector(user.theta, user.phi, geom) / geom.n_elements
        ns, z = [], []
        for t_p in range(obs.alloc.t_p_count):
            for n in obs.alloc.pilot_sets[t_p][k]:
                u = obs.pilots[t_p, n - 1, k]
                s = np.vdot(beam, obs.y[t_p, n - 1]) * np.conj(u)
                z.append(s * np.exp(2j * np.pi * n * f0 * los_delay(user)))
                ns.append(n)
        if not z:
            continue
        z = np.array(z)
        ns = np.array(ns)
        score = np.abs(
            np.exp(2j * np.pi * f0 * np.outer(taus, ns)) @ z
        )
        offsets[k] = taus[int(np.argmax(score))]
    return offsets


def nmse(estimate: np.ndarray, truth: np.ndarray) -> float:
    """||est - true||^2 / ||true||^2 over the stacked arrays."""
    num = float(np.vdot(estimate - truth, estimate - truth).real)
    den = float(np.vdot(truth, truth).real)
    return num / den if den > 0 else np.inf


def scatterer_rmse(
    detected_xyz: np.ndarray, true_xyz: np.ndarray, penalty: float
) -> float:
    """RMSE after optimal one-to-one matching; unmatched entities cost penalty.

    Raises EmptyEstimate when nothing was detected.
    """
    if len(detected_xyz) == 0:
        raise EmptyEstimate("no detected scatterers")
    n_d, n_t = len(detected_xyz), len(true_xyz)
    cost = np.linalg.norm(detected_xyz[:, None, :] - true_xyz[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)
    matched_sq = float(np.sum(cost[rows, cols] ** 2))
    n_unmatched = (n_d - len(rows)) + (n_t - len(cols))
    total = matched_sq + penalty**2 * n_unmatched
    return float(np.sqrt(total / max(n_d, n_t)))


@dataclass
class RunResult:
    variant: str
    seed: int
    channel_nmse: float
    data_nmse: float | None
    scatterer_rmse: float | None
    n_em_iters: int
    wall_time: float
    n_detected: int
    gamma_mean: float
    traces: list = field(default_factory=list)
    error: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


def _detect_scatterers(
    state: VariationalState,
    params: SensingParams,
    operator: StackedSensingOperator,
    collinearity: float,
) -> np.ndarray:
    """Grid indices judged to carry a physical scatterer.

    A supported grid column that is numerically collinear with its user's LoS
    column (a virtual point on the BS-user segment) is LoS energy, not a
    detection.
    """
    cols = params.grid.n_points + 1
    m = operator.geom.n_elements
    detected = set()
    for idx in state.support.indices:
        k, col = divmod(int(idx), cols)
        if col == 0:
            continue
        if state.lambda_check[k, col] <= 0.5:
            continue
        fac = operator.factors[k]
        # full-column cosine factorizes into steering and delay-phase parts
        inner = np.vdot(fac.abar[:, 0], fac.abar[:, col]) / m
        phase_match = np.vdot(fac.phases[:, 0], fac.phases[:, col]) / fac.phases.shape[0]
        if abs(inner) * abs(phase_match) > collinearity:
            continue
        detected.add(col - 1)
    return np.array(sorted(detected), dtype=int)


def run_algorithm1(cfg: ExperimentConfig, exp: Experiment | None = None) -> RunResult:
    """One full run: optional coarse stage, EM loop, estimates, metrics."""
    t_start = time.perf_counter()
    if exp is None:
        exp = build_experiment(cfg)
    variant = cfg.variant
    include_data = variant != "two_stage"
    use_module_b = variant not in ("iid_prior", "two_stage")
    mode = "full_inverse" if variant == "bivbi_full_inverse" else "subspace"
    genie = variant == "genie_aided"

    # initial sensing parameters
    if genie:
        user_init = list(exp.scene.users)
        offsets_init = exp.scene.time_offsets.copy()
    else:
        user_init = [
            SphericalPoint.from_cartesian([x, y, exp.cfg.scene.user_height])
            for (x, y) in exp.prior.user_prior_xy
        ]
        offsets_init = estimate_initial_offsets(
            exp.obs, user_init, exp.geom, exp.ofdm, exp.prior.offset_bound
        )

    grid = exp.grid0.copy()
    support_hint = None
    if cfg.algo.use_coarse:
        ranges = uniform_range_grid(cfg.grid.q_r, cfg.grid.r_min, cfg.grid.r_max)
        coarse_res = coarse_mod.coarse_pipeline(
            exp.obs, exp.geom, cfg.hyper, ranges, cfg.coarse
        )
        if coarse_res.succeeded:
            grid = coarse_res.grid
            support_hint = coarse_res.support_hint

    params = SensingParams(grid, user_init, offsets_init)
    operator = StackedSensingOperator(params, exp.geom, exp.ofdm)
    model = BilinearModel(operator, exp.obs, exp.data_prior, include_data=include_data)
    beliefs = TurboBeliefs.neutral(exp.scene.n_users, grid.n_points, cfg.hyper)
    h_a0 = beliefs.prior_probs(cfg.hyper)
    gamma0 = model.initial_gamma()
    if support_hint is not None:
        support0 = SupportEstimate(support_hint, cfg.algo.support_multiplier / gamma0)
    else:
        support0 = omp_initial_support(model, gamma0, cfg.algo.omp_max_atoms)
    state = init_state(model, cfg.hyper, h_a0, support0=support0, gamma_init=gamma0)

    scales = ParamScales(
        angle=2.0 / max(cfg.grid.q1, cfg.grid.q2),
        range_=(cfg.grid.r_max - cfg.grid.r_min) / max(cfg.grid.q_r - 1, 1),
        position=np.sqrt(exp.prior.sigma_p2 / 2.0),
        offset=exp.prior.offset_bound / 2.0,
    )
    traces = []
    prev_channels = None
    n_iters = cfg.algo.t_outer
    mstep_step0 = 1.0
    for t in range(1, cfg.algo.t_outer + 1):
        state, beliefs = turbo_e_step(
            state,
            model,
            cfg.hyper,
            beliefs,
            outer_turbo_iters=cfg.algo.turbo_iters,
            inner_iters=cfg.algo.inner_iters,
            mode=mode,
            b_steps=cfg.algo.b_steps,
            support_multiplier=cfg.algo.support_multiplier,
            support_rule=cfg.algo.support_rule,
            use_module_b=use_module_b,
        )
        chans = model.predicted_channels(state.mu_alpha)
        row = {
            "iteration": t,
            "gamma_mean": state.gamma_mean,
            "support_size": int(state.support.size),
            "channel_nmse": nmse(chans, exp.channels_true),
        }
        if cfg.trace_objective:
            h_a_probs = beliefs.prior_probs(cfg.hyper)
            quad = alpha_quadratic(model, state)
            row["phi_alpha"] = quad.phi(state.mu_alpha.reshape(-1))
            row["objective"] = assembled_objective(state, model, cfg.hyper, h_a_probs)

        moved = np.inf
        if prev_channels is not None:
            moved = nmse(chans, prev_channels)
        prev_channels = chans
        will_stop = moved < cfg.algo.conv_tol and t >= cfg.algo.min_outer

        if cfg.algo.mstep_enabled and t < cfg.algo.t_outer and not will_stop:
            problem = SurrogateProblem(
                y=model.y,
                pilots=exp.pilots,
                x_means=state.mu_x[: model.t_d],
                mu_alpha=state.mu_alpha,
                gamma_mean=state.gamma_mean,
                geom=exp.geom,
                ofdm=exp.ofdm,
                prior=exp.prior,
            )
            refinable = refinable_from_support(
                state.support.indices,
                exp.scene.n_users,
                grid.n_points + 1,
                refine_users=not genie,
                refine_offsets=not genie,
            )
            params, info = mstep_update(
                params,
                problem,
                refinable,
                scales,
                ascent_steps=cfg.algo.mstep_ascent_steps,
                initial_step=mstep_step0,
            )
            if info["step"] > 0:
                mstep_step0 = min(4.0 * info["step"], 4.0)
            row["mstep_objective"] = info["objective"]
            row["mstep_step"] = info["step"]
            # parameters moved: rebuild the sensing operator and moments
            operator = StackedSensingOperator(params, exp.geom, exp.ofdm)
            model = BilinearModel(
                operator, exp.obs, exp.data_prior, include_data=include_data
            )
        traces.append(row)
        if will_stop:
            n_iters = t
            break

    # final estimates
    est_channels = model.predicted_channels(state.mu_alpha)
    channel_nmse = nmse(est_channels, exp.channels_true)

    data_nmse_val = None
    if cfg.t_d > 0:
        if variant == "two_stage":
            x_hat = _lmmse_detect(state, exp, est_channels)
        else:
            x_hat = state.mu_x
        mask = exp.data_prior.powers[None, :, :] > 0
        num = float(np.sum(np.abs(x_hat - exp.data) ** 2, where=mask))
        den = float(np.sum(np.abs(exp.data) ** 2, where=mask))
        data_nmse_val = num / den if den > 0 else np.inf

    detected = _detect_scatterers(state, params, operator, cfg.algo.los_collinearity)
    rmse_val = None
    if cfg.rmse_penalty is None:
        span = np.array(
            [
                cfg.scene.x_range[1] - cfg.scene.x_range[0],
                cfg.scene.y_range[1] - cfg.scene.y_range[0],
                cfg.scene.z_range[1] - cfg.scene.z_range[0],
            ]
        )
        penalty = 0.5 * float(np.linalg.norm(span))
    else:
        penalty = cfg.rmse_penalty
    true_xyz = np.array([p.to_cartesian() for p in exp.scene.scatterers])
    det_xyz = params.grid.cartesian()[detected] if len(detected) else np.zeros((0, 3))
    try:
        rmse_val = scatterer_rmse(det_xyz, true_xyz, penalty)
    except EmptyEstimate:
        rmse_val = None

    return RunResult(
        variant=variant,
        seed=cfg.seed,
        channel_nmse=channel_nmse,
        data_nmse=data_nmse_val,
        scatterer_rmse=rmse_val,
        n_em_iters=n_iters,
        wall_time=time.perf_counter() - t_start,
        n_detected=int(len(detected)),
        gamma_mean=state.gamma_mean,
        traces=traces,
    )


def _lmmse_detect(state: VariationalState, exp: Experiment, est_channels) -> np.ndarray:
    """Stage-2 per-subcarrier LMMSE with the plug-in channel estimate."""
    alloc = exp.alloc
    gamma = state.gamma_mean
    x_hat = np.zeros_like(exp.data)
    for t_d in range(alloc.t_d_count):
        y_sym = exp.obs.y[alloc.t_p_count + t_d]
        for n in alloc.data_subcarriers:
            users = alloc.users_on_data(t_d, n)
            if not users:
                continue
            h = est_channels[list(users), n - 1, :].T  # (M, |users|)
            w = gamma * (np.conj(h.T) @ h)
            w[np.diag_indices_from(w)] += 1.0 / exp.data_prior.powers[n - 1, list(users)]
            b = gamma * (np.conj(h.T) @ y_sym[n - 1])
            x_hat[t_d, n - 1, list(users)] = np.linalg.solve(w, b)
    return x_hat


def two_stage_baseline(cfg: ExperimentConfig, exp: Experiment | None = None) -> RunResult:
    """Pilot-only estimation followed by one-shot LMMSE data detection."""
    cfg2 = dataclasses.replace(cfg, variant="two_stage")
    return run_algorithm1(cfg2, exp)


def _run_cell(args):
    cfg_dict, snr, n_pilot, variant, seed = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    cfg.snr_db = snr
    cfg.n_pilot = n_pilot
    cfg.variant = variant
    cfg.seed = seed
    try:
        res = run_algorithm1(cfg)
    except Exception as exc:  # recorded, sweep continues
        res = RunResult(
            variant=variant,
            seed=seed,
            channel_nmse=np.nan,
            data_nmse=None,
            scatterer_rmse=None,
            n_em_iters=0,
            wall_time=0.0,
            n_detected=0,
            gamma_mean=np.nan,
            error=f"{type(exc).__name__}: {exc}",
        )
    return (snr, n_pilot, variant, seed), res


def sweep(cfg: ExperimentConfig):
    """Cartesian product over (snr, n_pilot, variant, seed); deterministic order.

    Returns (rows, summary): rows is one dict per run in cell order; summary
    aggregates mean and standard error per (snr, n_pilot, variant) cell.
    """
    cfg.validate()
    snrs = cfg.snr_db_list or [cfg.snr_db]
    pilots = cfg.n_pilot_list or [cfg.n_pilot]
    cells = [
        (cfg.to_dict(), snr, n_p, variant, seed)
        for snr in snrs
        for n_p in pilots
        for variant in cfg.variants
        for seed in cfg.seeds
    ]
    results = []
    if cfg.workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]

    rows = []
    for (snr, n_p, variant, seed), res in results:
        d = res.to_dict()
        d.pop("traces")
        d.update({"snr_db": snr, "n_pilot": n_p})
        rows.append(d)

    summary: dict = {}
    for snr in snrs:
        for n_p in pilots:
            for variant in cfg.variants:
                vals = [
                    r["channel_nmse"]
                    for r in rows
                    if r["snr_db"] == snr
                    and r["n_pilot"] == n_p
                    and r["variant"] == variant
                    and r["error"] is None
                ]
                key = f"snr={snr}|np={n_p}|variant={variant}"
                if vals:
                    arr = np.array(vals)
                    summary[key] = {
                        "mean_channel_nmse": float(arr.mean()),
                        "stderr_channel_nmse": float(arr.std(ddof=1) / np.sqrt(len(arr)))
                        if len(arr) > 1
                        else 0.0,
                        "n": len(arr),
                    }
                else:
                    summary[key] = {"mean_channel_nmse": None, "n": 0}
    return rows, summary


def write_sweep_outputs(rows, summary, out_dir):
    import csv
    import os

    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "sweep.csv")
    if rows:
        keys = list(rows[0].keys())
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys)
            writer.writeheader()
            writer.writerows(rows)
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return csv_path
