"""Joint scattering-environment sensing, channel estimation, and data recovery.

A numerical library and CLI simulator for the uplink of a massive MIMO-OFDM
integrated sensing and communication system: location-domain sparse channel
modeling over a refinable 3D position grid, bilinear subspace variational
inference with joint-support message passing, EM-style grid refinement, a
MUSIC-based coarse stage, baselines, and a reproducible experiment harness.
"""

from .geometry import (
    ArrayGeometry,
    OfdmParams,
    Scene,
    SceneConfig,
    SphericalPoint,
    generate_scene,
    synthesize_channel,
)
from .grid import PositionGrid, SensingParams, StackedSensingOperator
from .frame import Allocation, DataPrior, FrameObservation, make_allocation, simulate_uplink
from .vbi import BggHyperParams, SupportEstimate, VariationalState

__all__ = [
    "ArrayGeometry",
    "OfdmParams",
    "Scene",
    "SceneConfig",
    "SphericalPoint",
    "generate_scene",
    "synthesize_channel",
    "PositionGrid",
    "SensingParams",
    "StackedSensingOperator",
    "Allocation",
    "DataPrior",
    "FrameObservation",
    "make_allocation",
    "simulate_uplink",
    "BggHyperParams",
    "SupportEstimate",
    "VariationalState",
]
