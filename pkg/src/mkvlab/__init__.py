"""Particle laboratory for mean-field control with common noise."""

from .errors import (
    ConfigurationError,
    MkvLabError,
    ModelError,
    PreconditionError,
    SimulationBlowUp,
    UnsupportedStructure,
)
from .noise_paths import BrownianPath, NoiseBundle, TimeGrid, WorldNoise, concat_paths, sample_brownian, sample_worlds
from .measures import EmpiricalMeasure, pair, pair2, wasserstein2
from .model import ControlSet, ModelSpec, Mollifier, bang_bang, common_noise_anchored, trivial_model, zoo

from .dynamics import NPlayerSystem, run_particles, simulate_mkv, simulate_nplayer
from .control_value import (
    Budget,
    ConstantPolicy,
    TablePolicy,
    ValueEstimate,
    aggregate_value,
    estimate_J,
    estimate_nplayer_value,
    estimate_value,
)

__version__ = "0.1.0"
