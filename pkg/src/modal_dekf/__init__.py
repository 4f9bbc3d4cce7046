"""Oscillation mode estimation from multi-channel ringdown measurements.

Centralized and fully distributed (diffusion) extended Kalman filters
estimate the shared frequencies and damping factors of electromechanical
oscillation modes, with Prony and consensus-Prony baselines, an FFT-based
initialization stage and a Monte Carlo benchmark harness.
"""

__version__ = "0.1.0"

from .backend import available_backends, default_backend
from .baselines import admm_prony, prony_fit, residue_fit
from .bench import BenchConfig, BenchReport, error_metrics, monte_carlo, report_table
from .cekf import EstimateTrace, FilterConfig, cekf_run, cekf_step, extract_modes
from .distributed import (
    DiffusionWeights,
    ReducedDiffusionWeights,
    RoundMailbox,
    Topology,
    complete_topology,
    consensus_spread,
    dekf_run,
    dekfr_run,
    default_node_configs,
    parse_topology,
    ring_topology,
    topology_from_edge_list,
    uniform_reduced_weights,
    uniform_weights,
)
from .errors import (
    DegenerateSignalError,
    FilterDivergenceError,
    ModalDekfError,
    ModeMatchError,
    NonConvergenceError,
    ValidationError,
)
from .init_detect import SpectralPeak, build_initial_state, fft_mode_scan, preprocess
from .signal_model import (
    MeasurementWindow,
    Mode,
    ModeSet,
    ReducedState,
    SystemState,
    damping_ratio,
    fitted_curve,
    jacobian,
    observation_matrix,
    observe,
    polar_from_state,
    propagate,
    reduce_state,
    reduced_observation_matrix,
    state_from_polar,
    synthesize_window,
)
