"""Bayesian hurdle models with self- and cross-excitation for sparse daily sales.

The package models intermittent (slow-moving) demand as a two-part hurdle
process: a Bernoulli zero process for whether any sale happens on a day, and a
shifted negative-binomial count process for how many units sell on sale days.
Both parts can carry covariate-driven background intensities and discrete-time
shot-noise excitation from a product's own sales history and from same-brand
peers. Inference is Hamiltonian Monte Carlo over flat or hierarchical priors,
and predictive quality is scored with one-step-ahead log posterior predictive
densities.
"""

from sparsedemand.distributions import (
    inverse_logit,
    kernel_weights,
    shifted_nb_logpmf,
    shifted_nb_sample,
)
from sparsedemand.covariates import SeasonalConfig, build_design, seasonalize
from sparsedemand.panel import SalesPanel, ingest_csv, summarize
from sparsedemand.excitation import (
    DEFAULT_TRUNCATION,
    HistoryState,
    ShotParams,
    event_indicators,
    shot_sequence,
    shot_sum,
)
from sparsedemand.model import (
    HierarchyParams,
    ModelData,
    PriorSpec,
    ProductParams,
    build_posterior,
    count_log_mean,
    default_prior_spec,
    loglik_count,
    loglik_zero,
    logprior,
    zero_logit,
)
from sparsedemand.inference import (
    PosteriorDraws,
    SamplerConfig,
    diagnostics,
    from_unconstrained,
    run_mcmc,
    to_unconstrained,
)
from sparsedemand.simulation import ScenarioSpec, simulate_hierarchical, simulate_panel
from sparsedemand.evaluation import (
    combined_forecast,
    lppd_count,
    lppd_zero,
    sequential_predict,
)

__version__ = "0.1.0"
