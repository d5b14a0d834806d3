"""Binomial-thinning discrete diffusion for non-negative ordinal data."""

from binflow.targets import (
    TargetPmf,
    make_target,
    custom_target,
    log_pmf,
    moments,
    sample_target,
)
from binflow.poisson import (
    FlowTables,
    poisson_pmf,
    semigroup_apply,
    relative_density,
    h_eval,
    intensity,
    oracle_denoiser,
    flow_marginal,
    binomial_thin,
    bridge_pmf,
    OracleDenoiser,
)
from binflow.losses import (
    PrecondCoeffs,
    NoiseSchedule,
    bregman_quadratic,
    bregman_entropic,
    weight_synthetic,
    sigma_of_t,
    t_of_sigma,
    sample_noise_level,
    precond_coeffs,
    baseline_affine,
)
from binflow.network import MlpDenoiser, save_model, load_model, ema_update
from binflow.training import TrainConfig, TrainResult, train
from binflow.sampler import (
    SamplerConfig,
    ChainState,
    rate_from_denoiser,
    euler_step,
    tau_leap_step,
    sample_chain,
)
from binflow.likelihood import (
    NllEstimate,
    nll_integrand,
    nll_quadrature,
    nll_monte_carlo,
    mean_nll,
    OracleRate,
    DenoiserRate,
)
from binflow.diagnostics import (
    DiagnosticsReport,
    check_tweedie,
    check_kolmogorov_forward,
    check_kl_identity,
    check_time_reversal,
    w1_empirical,
    run_suite,
)
from binflow.estimator import BinomialFlowModel

__version__ = "0.1.0"

__all__ = [
    "TargetPmf",
    "make_target",
    "custom_target",
    "log_pmf",
    "moments",
    "sample_target",
    "FlowTables",
    "poisson_pmf",
    "semigroup_apply",
    "relative_density",
    "h_eval",
    "intensity",
    "oracle_denoiser",
    "flow_marginal",
    "binomial_thin",
    "bridge_pmf",
    "OracleDenoiser",
    "PrecondCoeffs",
    "NoiseSchedule",
    "bregman_quadratic",
    "bregman_entropic",
    "weight_synthetic",
    "sigma_of_t",
    "t_of_sigma",
    "sample_noise_level",
    "precond_coeffs",
    "baseline_affine",
    "MlpDenoiser",
    "save_model",
    "load_model",
    "ema_update",
    "TrainConfig",
    "TrainResult",
    "train",
    "SamplerConfig",
    "ChainState",
    "rate_from_denoiser",
    "euler_step",
    "tau_leap_step",
    "sample_chain",
    "NllEstimate",
    "nll_integrand",
    "nll_quadrature",
    "nll_monte_carlo",
    "mean_nll",
    "OracleRate",
    "DenoiserRate",
    "DiagnosticsReport",
    "check_tweedie",
    "check_kolmogorov_forward",
    "check_kl_identity",
    "check_time_reversal",
    "w1_empirical",
    "run_suite",
    "BinomialFlowModel",
    "__version__",
]
