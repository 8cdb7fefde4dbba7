"""Multi-scale gradual-integration 3D CNN for pulmonary nodule false-positive reduction.

Modules
-------
volume_io   MetaImage volumes, candidate lists, world/voxel geometry
patching    multi-scale patch extraction and augmentation
model       network variants, fusion, checkpoints
training    folds, sample streams, momentum SGD
evaluation  FROC, CPM with bootstrap CI, FP triage
synthetic   deterministic synthetic CT stand-ins
experiment  end-to-end cross-validation
cli         the ``mgicnn`` command
"""
from .evaluation import FrocCurve, GroundTruthNodule, cpm, froc
from .model import ModelConfig, build, default_config, desk_config, forward
from .patching import PatchTriple, extract_multiscale
from .synthetic import SyntheticSpec, generate
from .training import TrainConfig, make_folds, train
from .volume_io import Candidate, Volume, load_volume

__version__ = "0.1.0"

__all__ = [
    "Candidate",
    "FrocCurve",
    "GroundTruthNodule",
    "ModelConfig",
    "PatchTriple",
    "SyntheticSpec",
    "TrainConfig",
    "Volume",
    "build",
    "cpm",
    "default_config",
    "desk_config",
    "extract_multiscale",
    "forward",
    "froc",
    "generate",
    "load_volume",
    "make_folds",
    "train",
]
