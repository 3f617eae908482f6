"""Deformable image registration with sparse Gaussian control points."""

__version__ = "0.1.0"

from .control_points import (DOF_CONFIGS, DofConfig, GaussianSet, init_grid, load_checkpoint,
                             save_checkpoint)
from .deformation import displacement_field, lbs_backward, lbs_forward
from .errors import (GcregError, NumericalError, ParseError, StructuralError, UsageError,
                     ValidationError)
from .metrics import dsc, export_dense_dvf, tre, warp_landmarks, warp_mask, warp_volume
from .objective import ncc_loss
from .spatial_index import SpatialIndex, brute_force_knn
from .trainer import PRESETS, TrainConfig, preset, train
from .volume import (Geometry, LandmarkSet, MaskVolume, Volume3, load_landmarks, load_mask,
                     load_volume, save_volume)
