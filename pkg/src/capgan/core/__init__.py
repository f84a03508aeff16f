from capgan.core.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from capgan.core.config import ConfigError, ExperimentConfig, load_config, save_config
from capgan.core.data import DatasetError, ImageDataset, Subset, load_dataset, write_split
from capgan.core.seeding import fork_seed, numpy_rng, set_global_seed, torch_generator
from capgan.core.types import ImageBatch, Knowledge, Norm, PerturbationBudget, ThreatModel

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DatasetError",
    "ExperimentConfig",
    "ImageBatch",
    "ImageDataset",
    "Knowledge",
    "Norm",
    "PerturbationBudget",
    "Subset",
    "ThreatModel",
    "fork_seed",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "numpy_rng",
    "save_checkpoint",
    "save_config",
    "set_global_seed",
    "torch_generator",
    "write_split",
]
