"""Co-attentive sharing for two-task attribute recognition, on a small numpy autodiff engine."""

from casnet.backbone import NetConfig, StageSpec, build, forward, forward_hard, load_checkpoint, save_checkpoint
from casnet.data import AttributeSpec, Dataset, generate_synthetic, group_attributes, load_dataset, save_dataset
from casnet.metrics import MetricReport, evaluate
from casnet.sharing import AblationConfig, CasParams, cas_forward
from casnet.train import DataConfig, RunRecord, TrainConfig, desk_config, make_datasets, train

__version__ = "0.1.0"

__all__ = [
    "AblationConfig", "AttributeSpec", "CasParams", "DataConfig", "Dataset", "MetricReport", "NetConfig",
    "RunRecord", "StageSpec", "TrainConfig", "build", "cas_forward", "desk_config", "evaluate", "forward",
    "forward_hard", "generate_synthetic", "group_attributes", "load_checkpoint", "load_dataset", "make_datasets",
    "save_checkpoint",
    "save_dataset", "train",
]
