"""Locate arbitrarily oriented 2D slices inside 3D volumes.

The pipeline: build a canonical atlas from a cohort of volumes, learn typical
slice appearance in atlas space, then for a new query slice predict its atlas
pose, transfer it to the target volume by rigid registration, and refine it
with a local feature-similarity search.
"""
from .atlas import AtlasBuild, align_to_atlas, build_atlas, save_atlas_build
from .errors import (
    DataError,
    DegenerateLabelError,
    NumericError,
    SlicelocError,
    StageError,
    UsageError,
)
from .geom import Pose, SliceGeometry, ThreePoint
from .pairs import LabeledPair, PairSpec, generate_pairs, load_pairs_manifest
from .phantom import PhantomParams, make_cohort, make_phantom
from .positioning import (
    AtlasPrompt,
    FineConfig,
    PositionResult,
    coarse_position,
    fine_position,
    make_prompt,
    position,
)
from .predictor import (
    KnnPredictor,
    PosePredictor,
    SliceBank,
    bank_from_volume,
    build_bank,
    evaluate_predictor,
    knn_predict,
    load_bank,
    save_bank,
)
from .registration import RegistrationConfig, RegistrationResult, register_rigid
from .similarity import mse_image, ssim
from .volume import Slice, Volume, extract_slice, resample_volume

__version__ = "0.1.0"

__all__ = [
    "AtlasBuild",
    "AtlasPrompt",
    "DataError",
    "DegenerateLabelError",
    "FineConfig",
    "KnnPredictor",
    "LabeledPair",
    "NumericError",
    "PairSpec",
    "PhantomParams",
    "Pose",
    "PosePredictor",
    "PositionResult",
    "RegistrationConfig",
    "RegistrationResult",
    "Slice",
    "SliceBank",
    "SliceGeometry",
    "SlicelocError",
    "StageError",
    "ThreePoint",
    "UsageError",
    "Volume",
    "align_to_atlas",
    "bank_from_volume",
    "build_atlas",
    "build_bank",
    "coarse_position",
    "evaluate_predictor",
    "extract_slice",
    "fine_position",
    "generate_pairs",
    "knn_predict",
    "load_bank",
    "load_pairs_manifest",
    "make_cohort",
    "make_phantom",
    "make_prompt",
    "mse_image",
    "position",
    "register_rigid",
    "resample_volume",
    "save_atlas_build",
    "save_bank",
    "ssim",
    "__version__",
]
