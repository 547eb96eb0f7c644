"""Blind microphone utility estimation from compressed signal features."""
from .features import DEFAULT_ACTIVE, FeatureId, block_features, extract_features
from .harness import RunConfig, batch_summary, run_batch, run_trial
from .tracker import FeatureTracker, KfConfig
from .estimator import UtilityEstimator

__all__ = [
    "DEFAULT_ACTIVE", "FeatureId", "block_features", "extract_features",
    "RunConfig", "batch_summary", "run_batch", "run_trial",
    "FeatureTracker", "KfConfig", "UtilityEstimator",
]
