"""Gravity-model trade-flow estimation and counterfactual scenario toolkit."""

__version__ = "0.1.0"

from .datamodel import (          # noqa: F401
    ALL_SECTORS,
    BilateralTradeRecord,
    CountryYearAttributes,
    FitResult,
    GravityObservation,
    IndicatorFlags,
    SECTOR_LABELS,
    SectorMap,
    TariffLine,
    TradeFlowRecord,
    sector_of,
)
from .design import DesignMatrix, ModelSpec, build_design      # noqa: F401
from .glm import (                # noqa: F401
    EstimatorOptions,
    cluster_robust_cov,
    cv_of,
    fit_nbpml,
    fit_ols,
    fit_ppml,
    mean_variance_diagnostic,
    percent_effect,
    pseudo_r2,
)
from .remoteness import (          # noqa: F401
    RemotenessIndex,
    expenditures,
    exporter_remoteness_series,
    remoteness_of,
)
from .scenario import (            # noqa: F401
    ScenarioInputs,
    ScenarioKind,
    ScenarioOutcome,
    apply_soft,
    apply_substitution,
    apply_tariffs,
    build_impact_report,
    continuous_relative_impact,
    eu28_impact,
    gni_adjustment,
    indicator_relative_impact,
    run_scenario,
    run_scenario_suite,
    worst_case_two_se,
)
