"""Deep-prior shape completion on sparse voxel grids, with tangent-kernel diagnostics."""

from .estimator import DeepPriorCompleter
from .grid import DomainSet, MaskedTsdf, SparseGrid, read_sptsdf, write_sptsdf
from .net import DeepPriorNet, NetworkConfig
from .surface import TriMesh, fscore, marching_cubes
from .trainer import TrainConfig, train

__all__ = [
    "DeepPriorCompleter", "DeepPriorNet", "DomainSet", "MaskedTsdf", "NetworkConfig", "SparseGrid",
    "TrainConfig", "TriMesh", "fscore", "marching_cubes", "read_sptsdf", "train", "write_sptsdf",
]
