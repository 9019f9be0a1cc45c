"""Covariate-shifted mean estimation.

Estimate ``E_{x ~ p_te} f(x)`` from labeled draws of ``p_tr`` and unlabeled
draws of ``p_te`` with Gaussian plug-in ratios, truncated density ratios,
logistic and kernel-logistic ratio learners, and KMM / naive baselines.
"""

__version__ = "0.1.0"

from covshift.density_ratio import (
    ConstantRatio,
    DensityRatioModel,
    ExactRatio,
    GaussianRatio,
    KernelLogisticModel,
    KernelLogisticRatio,
    LogisticModel,
    LogisticRatio,
    TruncatedRatio,
    evaluate_log_ratio,
    nll_loss_grad,
    ratio_from_classifier_prob,
    train_kernel_logistic,
    train_logistic,
    truncate_ratio,
)
from covshift.distributions import (
    ExponentialFamilySpec,
    GaussianModel,
    RkhsReweightedModel,
    fit_gaussian,
    gaussian_mean_family,
    kl_gaussian,
    log_density,
    log_density_ratio_gaussian,
    q_divergence_mc,
    renyi_r2_mc,
    sample,
    tv_distance_mc,
    tv_upper_pinsker,
)
from covshift.estimators import (
    EstimateResult,
    EstimatorConfig,
    KmmConfig,
    estimate_gaussian_plugin,
    estimate_kmm,
    estimate_naive_plugin,
    estimate_truncated_ratio,
    estimate_via_kernel_logistic,
    estimate_via_logistic,
    kmm_weights,
    median_of_means,
    naive_plugin_regress,
    weighted_batch_mean,
)
from covshift.harness import (
    ExperimentPlan,
    ScenarioSpec,
    TrialRecord,
    fit_loglog_slope,
    ground_truth,
    make_expfam_scenario,
    make_gaussian_scenario,
    make_lower_bound_instance,
    make_rkhs_scenario,
    run_plan,
    summarize,
)
from covshift.kernels import KernelSpec, gram_matrix, pivoted_cholesky
