"""Signed distance fields learned from noisy point clouds without clean supervision."""

from .field import FieldParams, HashGridConfig, MlpConfig, init_field, load_checkpoint, save_checkpoint, sdf
from .objective import LossWeights, pull
from .pipelines import denoise, reconstruct, upsample, verify_theorem1
from .sampling import ObservationSet, synthesize_noisy
from .surfacing import Mesh, extract_mesh, project_to_zero_set
from .training import TrainConfig, direct_point_optimization, train

__version__ = "0.1.0"
