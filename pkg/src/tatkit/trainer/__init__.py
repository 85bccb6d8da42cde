"""Dataset collection, training, checkpoints and evaluation."""

from .checkpoint import load_checkpoint, read_header, save_checkpoint
from .dataset import (CollectConfig, Dataset, Sample, collect, config_hash, observe, read_shard,
                      rollout, write_shard)
from .evaluate import (OracleAgent, PolicyAgent, error_slope, evaluate_closedloop,
                       evaluate_openloop, waypoint_errors, write_traces)
from .loop import NonFiniteLoss, TrainConfig, TrainResult, evaluate_loss, train, write_loss_log
from .models import VARIANTS, GruBaselineConfig, GruHead, Policy, PolicyConfig, decoder_config_for

__all__ = [
    "CollectConfig", "Dataset", "GruBaselineConfig", "GruHead", "NonFiniteLoss", "OracleAgent",
    "Policy", "PolicyAgent", "PolicyConfig", "Sample", "TrainConfig", "TrainResult", "VARIANTS",
    "collect", "config_hash", "decoder_config_for", "error_slope", "evaluate_closedloop",
    "evaluate_loss", "evaluate_openloop", "load_checkpoint", "observe", "read_header",
    "read_shard", "rollout", "save_checkpoint", "train", "waypoint_errors", "write_loss_log",
    "write_shard", "write_traces",
]
