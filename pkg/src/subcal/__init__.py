"""Online calibration for endogenous subgroups: cluster-then-predict versus
covering plus multicalibration."""
from __future__ import annotations

from ._backend import BACKEND
from .buckets_metrics import BucketGrid, ErrorReport, Transcript, bucket_of, dce, lce, mce
from .clustering_estimators import EstimatorError, learn_discriminant_2iso, learn_mixture_em
from .covering import (CandidateFamily, Cover, Distinguisher, build_distinguisher_class, empirical_shatter_dim,
                       exact_cover, greedy_cover, verify_cover)
from .mixture_model import ExpFamilyComponent, LabelRule, MixtureModel, two_isotropic
from .online_calibration import (HedgeState, MulticalibrationEngine, RandomizedPrediction, hedge_regret, hedge_update,
                                 minimax_predict, run_multicalibration)
from .pipelines import PipelineConfig, RunResult, run_pipeline

__version__ = "0.1.0"
