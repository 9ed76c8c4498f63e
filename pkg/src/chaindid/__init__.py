"""chaindid: chained difference-in-differences estimation for unbalanced panels."""

from chaindid.panel import (
    PanelDataset,
    PanelError,
    ValidationIssue,
    ValidationReport,
    load_panel,
)
from chaindid.propensity import (
    LinkModel,
    PropensityFit,
    SamplingFit,
    fit_group_propensity,
    fit_link,
    fit_sampling_model,
    propensity_influence,
)
from chaindid.blocks import (
    AttEstimate,
    ControlSpec,
    DeltaAtt,
    block_weights,
    cross_section_att,
    delta_att,
    long_did,
    placebo_delta,
)
from chaindid.chain import GmmSystem, build_w, chained_att, estimate_omega, fit_chained, gmm_solve
from chaindid.inference import BootstrapBands, multiplier_bootstrap, pretrend_test
from chaindid.summaries import (
    SummaryEstimate,
    theta_calendar,
    theta_dynamic,
    theta_selective,
)

__version__ = "0.1.0"

__all__ = [
    "PanelDataset",
    "PanelError",
    "ValidationIssue",
    "ValidationReport",
    "load_panel",
    "LinkModel",
    "PropensityFit",
    "SamplingFit",
    "fit_link",
    "fit_group_propensity",
    "propensity_influence",
    "fit_sampling_model",
    "ControlSpec",
    "DeltaAtt",
    "AttEstimate",
    "block_weights",
    "delta_att",
    "long_did",
    "cross_section_att",
    "placebo_delta",
    "GmmSystem",
    "build_w",
    "chained_att",
    "estimate_omega",
    "gmm_solve",
    "fit_chained",
    "BootstrapBands",
    "multiplier_bootstrap",
    "pretrend_test",
    "SummaryEstimate",
    "theta_selective",
    "theta_dynamic",
    "theta_calendar",
]
