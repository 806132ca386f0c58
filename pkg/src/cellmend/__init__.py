"""cellmend: equivariant message-passing networks that deform crystal lattices.

The package denoises perturbed unit cells and rebuilds cells from
fractional positions, with exact equivariance under rotations and
reflections, lattice re-basings, translations and atom relabelings.
"""

from .backend import NUMBA_ENABLED, backend_name
from .core import (
    Composite,
    DomainError,
    LatticeParams,
    Material,
    Orthogonal,
    Permutation,
    SLZ,
    Translation,
    act,
    expand_cloud,
    expm,
    lattice_params,
    metric_tensor,
    params_to_lattice,
    random_deformation,
    wrap_frac,
)
from .fields import FIELD_NAMES, FieldSpec
from .graph import Cutoff, KNN, PeriodicGraph, build_graph, edge_geometry, triplet_geometry
from .io import read_materials, write_materials
from .net import (
    ModelCheckpoint,
    ModelConfig,
    ff_baseline_forward,
    forward,
    init_parameters,
    load_checkpoint,
    save_checkpoint,
)
from .train import (
    DeformationReport,
    Normalizer,
    TrainConfig,
    evaluate,
    make_noisy_pair,
    synth_dataset,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "NUMBA_ENABLED",
    "backend_name",
    "Composite",
    "DomainError",
    "LatticeParams",
    "Material",
    "Orthogonal",
    "Permutation",
    "SLZ",
    "Translation",
    "act",
    "expand_cloud",
    "expm",
    "lattice_params",
    "metric_tensor",
    "params_to_lattice",
    "random_deformation",
    "wrap_frac",
    "FIELD_NAMES",
    "FieldSpec",
    "Cutoff",
    "KNN",
    "PeriodicGraph",
    "build_graph",
    "edge_geometry",
    "triplet_geometry",
    "read_materials",
    "write_materials",
    "ModelCheckpoint",
    "ModelConfig",
    "ff_baseline_forward",
    "forward",
    "init_parameters",
    "load_checkpoint",
    "save_checkpoint",
    "DeformationReport",
    "Normalizer",
    "TrainConfig",
    "evaluate",
    "make_noisy_pair",
    "synth_dataset",
    "train",
]
