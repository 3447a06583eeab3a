"""Shared value types, configuration, random streams and checkpoints."""

from .checkpoint import (CheckpointError, GeneratorCheckpoint, load_checkpoint,
                         save_checkpoint)
from .config import (ACTIVATIONS, AUGMENT_OPS, FAMILIES, NORMALIZATIONS, POOLINGS, ArchSpec, AugmentPolicy, ConfigError,
                     DistillConfig, EvalProtocol, ModelPoolSpec, NasSettings,
                     PretrainSettings, ToySpec, default_depth, load_config,
                     load_config_file)
from .records import RecordWriter, read_records, write_records
from .rng import derive_seed, fork_rng, torch_generator
from .types import FeatureStack, ImageBatch, LatentBatch

__all__ = [
    "ACTIVATIONS", "AUGMENT_OPS", "FAMILIES", "NORMALIZATIONS", "POOLINGS", "ArchSpec", "AugmentPolicy", "CheckpointError", "ConfigError",
    "DistillConfig", "EvalProtocol", "FeatureStack", "GeneratorCheckpoint",
    "ImageBatch", "LatentBatch", "ModelPoolSpec", "NasSettings", "PretrainSettings", "RecordWriter",
    "ToySpec", "default_depth", "derive_seed", "fork_rng", "load_checkpoint",
    "load_config", "load_config_file", "read_records", "save_checkpoint",
    "torch_generator", "write_records",
]
