"""Rate bounds, coder synthesis and simulation for LTI plants controlled
through a rate-limited noiseless digital channel."""

from .lti import ClosedLoopMaps, IllPosedLoopError, PartitionedPlant, RationalTF, StateSpace, closed_loop, h2_norm_sq
from .synthesis import (CoderDesign, ConvergenceError, DegenerateProblemError, FrontierPoint, SnrFrontier,
                        SolverOptions, compute_Dinf, compute_Gamma_inf, design_for_D, directed_info_rate,
                        gamma_of_D, J_of_Gamma, min_distortion_at_snr, rate_bounds, solve_weighted, trace_frontier)
from .ecdq import CodeBook, CorruptStreamError, EcdqConfig, ecdq_decode_step, ecdq_encode_step, train_codebooks
from .simulator import DivergenceError, SimRun, make_run, monte_carlo, run_closed_loop, train_for_run

__version__ = "0.1.0"

__all__ = [
    "ClosedLoopMaps",
    "IllPosedLoopError",
    "PartitionedPlant",
    "RationalTF",
    "StateSpace",
    "closed_loop",
    "h2_norm_sq",
    "CoderDesign",
    "ConvergenceError",
    "DegenerateProblemError",
    "FrontierPoint",
    "SnrFrontier",
    "SolverOptions",
    "compute_Dinf",
    "compute_Gamma_inf",
    "design_for_D",
    "directed_info_rate",
    "gamma_of_D",
    "J_of_Gamma",
    "min_distortion_at_snr",
    "rate_bounds",
    "solve_weighted",
    "trace_frontier",
    "CodeBook",
    "CorruptStreamError",
    "EcdqConfig",
    "ecdq_decode_step",
    "ecdq_encode_step",
    "train_codebooks",
    "DivergenceError",
    "SimRun",
    "make_run",
    "monte_carlo",
    "run_closed_loop",
    "train_for_run",
]
