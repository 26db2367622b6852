"""Pilot/data allocation, transmit signals, and the simulated uplink frame.

Stacking convention for the received vector: pilot symbols first, then data
symbols; within a symbol, subcarriers in order; within a subcarrier, antenna
elements. The 3D array view (symbol, subcarrier, antenna) and the flat stacked
vector are related by a plain reshape, so stack/unstack is a bijection.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .geometry import ArrayGeometry, OfdmParams, Scene, synthesize_channel_matrix
from .grid import StackedSensingOperator


@dataclass
class Allocation:
    """Subcarrier allocation for one frame.

    pilot_sets[t_p][k] is the tuple of 1-based subcarriers of user k in pilot
    symbol t_p (disjoint across users within a symbol); data_subcarriers are
    shared by every user in every data symbol.
    """

    n_subcarriers: int
    pilot_sets: list  # [T_p][K] -> tuple of n
    data_subcarriers: tuple  # shared, 1-based
    t_p_count: int
    t_d_count: int

    @property
    def n_users(self) -> int:
        return len(self.pilot_sets[0])

    def users_on_data(self, t_d: int, n: int) -> tuple:
        """Users transmitting on data subcarrier n of symbol t_d (1-based n)."""
        if n in self.data_subcarriers:
            return tuple(range(self.n_users))
        return ()

    def pilot_owner(self, t_p: int, n: int):
        """User index owning pilot subcarrier n in symbol t_p, or None."""
        for k, s in enumerate(self.pilot_sets[t_p]):
            if n in s:
                return k
        return None

    def validate(self):
        for t_p in range(self.t_p_count):
            seen = set()
            for s in self.pilot_sets[t_p]:
                if seen & set(s):
                    raise ConfigError("pilot subcarriers overlap across users")
                seen |= set(s)
                if any(not 1 <= n <= self.n_subcarriers for n in s):
                    raise ConfigError("pilot subcarrier out of range")


def make_allocation(
    n_subcarriers: int,
    n_users: int,
    n_pilot: int,
    n_data: int,
    t_p_count: int = 1,
    t_d_count: int = 2,
) -> Allocation:
    """Uniformly spaced, round-robin interleaved allocation.

    User k's pilots sit at {k+1, k+1+stride, ...} with stride N // n_pilot, so
    disjointness needs N >= K * n_pilot. Data subcarriers are shared and
    uniformly spaced with stride N // n_data.
    """
    if n_pilot < 1 or n_data < 1:
        raise ConfigError("need at least one pilot and one data subcarrier")
    if n_users * n_pilot > n_subcarriers:
        raise ConfigError("disjoint pilots impossible: K * N^p > N")
    stride_p = n_subcarriers // n_pilot
    if n_users > stride_p:
        raise ConfigError("pilot interleave collision: K > N / N^p")
    pilots_one_symbol = [
        tuple(1 + k + m * stride_p for m in range(n_pilot)) for k in range(n_users)
    ]
    stride_d = n_subcarriers // n_data
    data = tuple(1 + m * stride_d for m in range(n_data))
    alloc = Allocation(
        n_subcarriers=n_subcarriers,
        pilot_sets=[list(pilots_one_symbol) for _ in range(t_p_count)],
        data_subcarriers=data,
        t_p_count=t_p_count,
        t_d_count=t_d_count,
    )
    alloc.validate()
    return alloc


@dataclass
class DataPrior:
    """Per-(subcarrier, user) transmit power; zero off allocation."""

    powers: np.ndarray  # (N, K)

    @staticmethod
    def unit(alloc: Allocation) -> "DataPrior":
        powers = np.zeros((alloc.n_subcarriers, alloc.n_users))
        for n in alloc.data_subcarriers:
            powers[n - 1, :] = 1.0
        return DataPrior(powers=powers)


def generate_pilots(alloc: Allocation, rng) -> np.ndarray:
    """Unit-modulus random-phase pilots, zero off allocation; (T_p, N, K)."""
    u = np.zeros((alloc.t_p_count, alloc.n_subcarriers, alloc.n_users), dtype=complex)
    for t_p in range(alloc.t_p_count):
        for k, s in enumerate(alloc.pilot_sets[t_p]):
            ph = rng.uniform(0.0, 2.0 * np.pi, size=len(s))
            for n, p in zip(s, ph):
                u[t_p, n - 1, k] = np.exp(1j * p)
    return u


def generate_data(alloc: Allocation, prior: DataPrior, rng) -> np.ndarray:
    """Zero-mean complex Gaussian data symbols with the prior powers; (T_d, N, K)."""
    x = np.zeros((alloc.t_d_count, alloc.n_subcarriers, alloc.n_users), dtype=complex)
    std = np.sqrt(prior.powers / 2.0)
    for t_d in range(alloc.t_d_count):
        x[t_d] = std * (
            rng.standard_normal(std.shape) + 1j * rng.standard_normal(std.shape)
        )
    return x


@dataclass
class FrameObservation:
    """One simulated uplink frame.

    y has shape (T_p + T_d, N, M): pilot symbols first. pilots/true_data carry
    the transmitted symbols (true_data is held out for scoring only).
    """

    y: np.ndarray
    pilots: np.ndarray  # (T_p, N, K)
    true_data: np.ndarray  # (T_d, N, K)
    noise_precision_true: float
    alloc: Allocation

    @property
    def stacked(self) -> np.ndarray:
        return self.y.reshape(-1)

    @staticmethod
    def unstack(flat: np.ndarray, alloc: Allocation, n_antennas: int) -> np.ndarray:
        s = alloc.t_p_count + alloc.t_d_count
        return flat.reshape(s, alloc.n_subcarriers, n_antennas)

    def to_json(self) -> str:
        return json.dumps(
            {
                "y_re": self.y.real.tolist(),
                "y_im": self.y.imag.tolist(),
                "pilots_re": self.pilots.real.tolist(),
                "pilots_im": self.pilots.imag.tolist(),
                "true_data_re": self.true_data.real.tolist(),
                "true_data_im": self.true_data.imag.tolist(),
                "noise_precision_true": self.noise_precision_true,
                "alloc": {
                    "n_subcarriers": self.alloc.n_subcarriers,
                    "pilot_sets": [
                        [list(s) for s in sym] for sym in self.alloc.pilot_sets
                    ],
                    "data_subcarriers": list(self.alloc.data_subcarriers),
                    "t_p_count": self.alloc.t_p_count,
                    "t_d_count": self.alloc.t_d_count,
                },
            }
        )

    @staticmethod
    def from_json(s: str) -> "FrameObservation":
        d = json.loads(s)
        alloc = Allocation(
            n_subcarriers=d["alloc"]["n_subcarriers"],
            pilot_sets=[
                [tuple(s) for s in sym] for sym in d["alloc"]["pilot_sets"]
            ],
            data_subcarriers=tuple(d["alloc"]["data_subcarriers"]),
            t_p_count=d["alloc"]["t_p_count"],
            t_d_count=d["alloc"]["t_d_count"],
        )
        return FrameObservation(
            y=np.array(d["y_re"]) + 1j * np.array(d["y_im"]),
            pilots=np.array(d["pilots_re"]) + 1j * np.array(d["pilots_im"]),
            true_data=np.array(d["true_data_re"]) + 1j * np.array(d["true_data_im"]),
            noise_precision_true=d["noise_precision_true"],
            alloc=alloc,
        )

    def y_to_csv(self, path):
        """Flat stacked vector as interleaved re/im CSV rows (index, re, im)."""
        flat = self.stacked
        with open(path, "w") as fh:
            fh.write("index,re,im\n")
            for i, v in enumerate(flat):
                fh.write(f"{i},{v.real!r},{v.imag!r}\n")


def true_channels(scene: Scene, geom: ArrayGeometry, ofdm: OfdmParams) -> np.ndarray:
    """Ground-truth channels for every user, shape (K, N, M)."""
    return np.stack(
        [synthesize_channel_matrix(scene, geom, ofdm, k) for k in range(scene.n_users)]
    )


def mean_data_signal_power(
    channels: np.ndarray, alloc: Allocation, prior: DataPrior
) -> float:
    """Average received signal power per complex entry on allocated data rows."""
    m = channels.shape[2]
    total = 0.0
    cells = 0
    for n in alloc.data_subcarriers:
        p = 0.0
        for k in range(alloc.n_users):
            p += prior.powers[n - 1, k] * float(
                np.vdot(channels[k, n - 1], channels[k, n - 1]).real
            )
        total += p / m
        cells += 1
    return total / max(cells, 1)


def noise_precision_for_snr(
    snr_db: float, channels: np.ndarray, alloc: Allocation, prior: DataPrior
) -> float:
    """Noise precision gamma so that mean data-row SNR equals snr_db."""
    power = mean_data_signal_power(channels, alloc, prior)
    noise_var = power / (10.0 ** (snr_db / 10.0))
    return 1.0 / noise_var


def simulate_uplink(
    scene: Scene,
    geom: ArrayGeometry,
    ofdm: OfdmParams,
    alloc: Allocation,
    pilots: np.ndarray,
    data: np.ndarray,
    gamma: float,
    rng,
) -> FrameObservation:
    """Simulate the received frame; noise is circular CN with variance 1/gamma.

    gamma = inf switches the noise off exactly.
    """
    channels = true_channels(scene, geom, ofdm)  # (K, N, M)
    s_total = alloc.t_p_count + alloc.t_d_count
    n, m = ofdm.n_subcarriers, geom.n_elements
    y = np.zeros((s_total, n, m), dtype=complex)
    for t_p in range(alloc.t_p_count):
        # pilots are orthogonal: one owner per subcarrier
        y[t_p] = np.einsum("nk,knm->nm", pilots[t_p], channels)
    for t_d in range(alloc.t_d_count):
        y[alloc.t_p_count + t_d] = np.einsum("nk,knm->nm", data[t_d], channels)
    if np.isfinite(gamma):
        std = np.sqrt(1.0 / (2.0 * gamma))
        y = y + std * (
            rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape)
        )
    return FrameObservation(
        y=y,
        pilots=pilots,
        true_data=data,
        noise_precision_true=float(gamma),
        alloc=alloc,
    )


def effective_data_operator(
    n: int,
    t_d: int,
    alpha: np.ndarray,
    operator: StackedSensingOperator,
    alloc: Allocation,
) -> np.ndarray:
    """Per-subcarrier data-mode mixing matrix, one column per active user.

    Column k is the user-k sensing block on subcarrier n applied to the
    supplied coefficient vector (posterior mean or a sample).
    """
    users = alloc.users_on_data(t_d, n)
    if not users:
        return np.zeros((operator.geom.n_elements, 0), dtype=complex)
    return np.column_stack(
        [operator.factors[k].block(n) @ alpha[k] for k in users]
    )
