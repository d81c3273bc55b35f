"""Joint interaction modeling of multi-level preferences."""

from .joint_model import (
    JointModel,
    ModelConfig,
    cold_start_predict,
    evaluate,
    interaction_features,
    multi_task_loss,
    predict,
    train,
)
from .obs_store import DataSource, FiberSpec, Schema, SplitPlan, build_schema, minibatches, split

__version__ = "0.1.0"

__all__ = [
    "DataSource",
    "FiberSpec",
    "JointModel",
    "ModelConfig",
    "Schema",
    "SplitPlan",
    "build_schema",
    "cold_start_predict",
    "evaluate",
    "interaction_features",
    "minibatches",
    "multi_task_loss",
    "predict",
    "split",
    "train",
]
