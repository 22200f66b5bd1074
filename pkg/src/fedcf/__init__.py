"""Federated conformal fairness: calibrate, bound and tune group coverage gaps across clients."""

from .client_stats import Estimator
from .domain import Example, ClientDataset, FairnessMetric, FairnessSpec, Federation
from .federation import CalibrationSettings, ProtocolChoice, audit, run_fairopt
from .optimizer import OptimizerConfig, fair_opt_descent
from .privacy import DpConfig, Mechanism, Protocol
from .scores import ScoreConfig, ScoreKind

__version__ = "0.1.0"

__all__ = [
    "CalibrationSettings",
    "ClientDataset",
    "DpConfig",
    "Estimator",
    "Example",
    "FairnessMetric",
    "FairnessSpec",
    "Federation",
    "Mechanism",
    "OptimizerConfig",
    "Protocol",
    "ProtocolChoice",
    "ScoreConfig",
    "ScoreKind",
    "audit",
    "fair_opt_descent",
    "run_fairopt",
]
