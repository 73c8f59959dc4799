"""Predictive safety filter for learning-based control of uncertain nonlinear systems."""
from .benchmark import ConfigError, EpisodeLog, RunConfig, run_benchmark
from .filter import FilterDecision, FilterState, InfeasibleStartError, PredictiveSafetyFilter
from .geometry import (Box, ErrorBall, ErrorBudget, Polytope, TerminalSet, TighteningSchedule, error_budget,
                       hausdorff, inflate, tightened_contains)
from .model import (ConfidenceBox, DynamicsBelief, FeatureMap, confidence_map, gaussian_beta, load_checkpoint,
                    predict_mean, predict_std, save_checkpoint, update)
from .ocp import BackupPlan, OcpSpec, solve, transcribe
from .plant import BangBangPolicy, CallbackPlant, Pendulum, PendulumParams, episode_objective
from .stabilizability import StabilityCertificate, dare_solve, estimate_certificate, linearize
from .tuning import estimate_lipschitz, tune_error_radius

__version__ = "0.1.0"
