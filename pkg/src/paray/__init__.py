"""Photoacoustic simulation, universal back-projection and zero-shot artifact removal."""

from .errors import ConfigError, PreconditionError, TrainingDivergedError, UndefinedMetricError
from .forward import PhantomSpec, RawPAData, SourceVolume, rasterize_phantom, simulate_signals, vessel_tree
from .geometry import DetectorArray, VolumeGrid, fibonacci_sphere_array, hemisphere, make_grid, subsample_uniform
from .metrics import MetricsReport, cnr, default_masks, psnr
from .perturb import CVMap, MapTarget, Plane, SubsetIndices, cv_analysis, random_subset
from .ubp import Image2D, Volume, map_projection, reconstruct, reconstruct_slice
from .zsa2a import NetworkParams, TrainConfig, remove_artifacts, run_zsa2a, train

__version__ = "0.1.0"
