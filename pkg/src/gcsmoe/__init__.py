"""Multi-expert classification with graph-based class selection and S-hot gating."""

from .dataset import GeneratorSpec, LabeledDataset, generate
from .dependency import DependencySets, compute_dependencies
from .gating import mask_direct, mask_stepnet, masks_direct, masks_stepnet
from .gcs import Partition, brute_force_partition, census, gcs_partition, objective, random_partition
from .metrics import average_precision, map_report
from .pipeline import PipelineConfig, build_ensemble, run_all

__all__ = [
    "DependencySets",
    "GeneratorSpec",
    "LabeledDataset",
    "Partition",
    "PipelineConfig",
    "average_precision",
    "brute_force_partition",
    "build_ensemble",
    "census",
    "compute_dependencies",
    "gcs_partition",
    "generate",
    "map_report",
    "mask_direct",
    "mask_stepnet",
    "masks_direct",
    "masks_stepnet",
    "objective",
    "random_partition",
    "run_all",
]
