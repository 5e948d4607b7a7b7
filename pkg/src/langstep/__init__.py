"""Decreasing-step Euler (unadjusted Langevin) sampling for ergodic SDEs,
with oracles and estimators for measuring its convergence orders."""

from .steps import StepSchedule, decay_sum, decay_sums, explicit, polynomial, schedule_from_spec
from .model import (
    DiffusionModel,
    ModelError,
    gibbs_drift,
    gradient_langevin,
    heavy_tail,
    model_from_spec,
    ou,
)
from .noise import NoiseSource
from .scheme import (
    BlowUpError,
    ChainState,
    ExactOU,
    FineEuler,
    WeightedEmpiricalMeasure,
    bel_gradient,
    euler_step,
    run_chain,
    simulate,
)
from .metrics import DistanceReport, tv_gaussian_1d, tv_histogram, w1_exact_1d, w1_sliced
from .ou_oracle import OuOracle
from .errorlab import long_run_rate_experiment, one_step_strong_error, one_step_weak_error, rate_fit

__version__ = "0.1.0"
