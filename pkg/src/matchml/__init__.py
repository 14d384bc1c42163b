"""Matched machine learning: learned-metric matching with asymptotic inference."""

from matchml.data import Dataset, load_csv, write_csv, split, kfold, fit_standardizer
from matchml.representation import (
    Representation,
    PropensityModel,
    fit_prognostic,
    fit_propensity,
    make_identity,
    make_diagonal,
    PRESETS,
)
from matchml.matching import (
    MatchIndex,
    MatchedGroup,
    lq_distance,
    build_index,
    caliper_query,
    knn_query,
    weighted_objective,
)
from matchml.estimators import (
    CrfEstimate,
    CateEstimate,
    EmptyMatchedGroup,
    MatchedML,
    crf_estimate,
    cate_estimate,
    ball_volume,
    normal_quantile,
)
from matchml.dml import DmlConfig, DmlResult, mdml_run, dr_score_arf, dr_score_att, dml_variance, dml_ci

__version__ = "0.1.0"

__all__ = [
    "Dataset", "load_csv", "write_csv", "split", "kfold", "fit_standardizer",
    "Representation", "PropensityModel", "fit_prognostic", "fit_propensity",
    "make_identity", "make_diagonal", "PRESETS",
    "MatchIndex", "MatchedGroup", "lq_distance", "build_index", "caliper_query",
    "knn_query", "weighted_objective",
    "CrfEstimate", "CateEstimate", "EmptyMatchedGroup", "MatchedML", "crf_estimate",
    "cate_estimate", "ball_volume", "normal_quantile",
    "DmlConfig", "DmlResult", "mdml_run", "dr_score_arf", "dr_score_att",
    "dml_variance", "dml_ci",
]
