"""Repeated quantum non-demolition measurement chains and their diffusive limit.

Simulate Bayesian pointer-state filtering under repeated probe
measurements, analyse collapse statistics and convergence rates, and
integrate the weak-coupling continuous-time filtering equations.
"""

from .core import (
    DegenerateStateError,
    DensityDiagnostics,
    DiffusiveConditionError,
    MultiplicityError,
    NumericalUnderflowError,
    PhaseUndefinedError,
    ProtocolError,
    SectorAmbiguityError,
    StepSizeError,
    ValidationError,
    as_distribution,
    hermitize_and_renormalize,
    stationary_distribution,
    validate_density,
)
from .measurement import (
    MeasurementMethod,
    PointerModel,
    SectorPartition,
    compute_sectors,
    kraus_from_unitary,
    phase_norm_decomposition,
)
from .protocol import (
    CallbackPolicy,
    DeterministicFeedbackPolicy,
    MarkovFeedbackPolicy,
    RandomPolicy,
    first_method,
    invariant_measure,
    next_method,
    reduced_kernel,
)
from .discrete_sim import (
    ChainTree,
    CollapseReport,
    DiscreteScenario,
    RunConfig,
    TrajectoryState,
    bayes_update,
    compensated_matrix,
    compensator_update,
    density_update,
    enumerate_chain,
    run_ensemble,
    run_trajectory,
    sample_outcome,
    trial_update,
)
from .analysis import (
    RateTable,
    collapse_statistics,
    confidence_steps,
    ensemble_decay_rate,
    fit_decay_rate,
    mean_relative_entropy,
    rate_table,
    relative_entropy,
)
from .continuous import (
    ContinuousMethod,
    ContinuousModel,
    characteristic_time,
    closed_form_a,
    closed_form_compensated,
    closed_form_q,
    compensated_rho_step,
    compensating_phases,
    gamma_from_hamiltonian,
    integrate_paths,
    noise_covariance,
    sample_noise,
    scaling_limit_check,
    sde_step_q,
    sde_step_rho,
)
from . import scenarios

__version__ = "0.1.0"
