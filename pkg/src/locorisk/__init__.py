"""Health-risk scoring from intraday step-count tracks.

Raw acceleration is turned into steps per minute, filtered and cut into
binned week slices, scored by a domain-adversarial 1-D ResNet, and the
scores are related to Gompertz hazards and cohort statistics.
"""
__version__ = "0.1.0"

from .cohort import mann_whitney_u, morbidity_label  # noqa: E402
from .model import ArchitectureConfig, ModelParams, init_params, risk_score  # noqa: E402
from .steps import StepCounter, detect_steps  # noqa: E402
from .survival import CoxGompertzRegressor, fit_cox_gompertz  # noqa: E402
from .tracks import WeekSliceTransformer, extract_week_slices  # noqa: E402
from .trainer import DANNRiskClassifier, TrainConfig  # noqa: E402

__all__ = [
    "ArchitectureConfig", "CoxGompertzRegressor", "DANNRiskClassifier", "ModelParams", "StepCounter",
    "TrainConfig", "WeekSliceTransformer", "detect_steps", "extract_week_slices", "fit_cox_gompertz",
    "init_params", "mann_whitney_u", "morbidity_label", "risk_score",
]
