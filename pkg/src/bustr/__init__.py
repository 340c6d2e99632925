"""BUS report generation: descriptor-aware vision encoding, frozen-LM decoding, NLG/CE evaluation."""

__version__ = "0.1.0"

from .schema import (
    DatasetConfig,
    DescriptorKind,
    DescriptorSet,
    Vocabulary,
    active_tasks,
    load_config,
    validate_descriptors,
)

__all__ = [
    "DatasetConfig",
    "DescriptorKind",
    "DescriptorSet",
    "Vocabulary",
    "active_tasks",
    "load_config",
    "validate_descriptors",
    "__version__",
]
