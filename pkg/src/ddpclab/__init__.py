"""Data-driven predictive control on block-Hankel data, with closed-loop
bias diagnostics and a desk-scale double-integrator experiment harness.

The package fits subspace and transient multistep predictors from recorded
input/output data, quantifies the prediction bias introduced by feedback in
the training data, and solves quadratic tracking problems with SPC, TPC,
DeePC and 2norm-DDPC planners.
"""

from ddpclab.lti_sim import (
    DoubleIntegratorConfig,
    FeedbackLaw,
    LtiSystem,
    TrajectoryData,
    apply_input_sequence,
    check_persistency,
    make_double_integrator,
    simulate,
)
from ddpclab.hankel import HankelSet, build_hankel_set, hankel_matrix
from ddpclab.estimators import (
    BiasPredictor,
    InnovationEstimate,
    LqFactors,
    SingularDataError,
    SubspacePredictor,
    TransientBank,
    estimate_bias_predictor,
    estimate_innovations,
    fit_subspace,
    fit_transient_bank,
    lq_decompose,
)
from ddpclab.bias_analysis import (
    BiasReport,
    build_bias_report,
    correlation_heatmap,
    ddpc_bias_summary,
    deepc_bias,
    empirical_bias,
    gamma_ddpc_bias,
    subspace_bias,
    subspace_bias_summary,
)
from ddpclab.controllers import (
    ControlQuery,
    ControlResult,
    TrackingCost,
    run_receding_horizon,
    solve_2norm_ddpc,
    solve_deepc,
    solve_spc,
    solve_tpc,
)

__version__ = "0.1.0"
