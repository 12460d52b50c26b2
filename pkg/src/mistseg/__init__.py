"""Rule-driven preprocessing, inference assembly, postprocessing and evaluation
for 3D medical image segmentation datasets stored as NIfTI."""

__version__ = "0.1.0"

from .volume import Volume, reorient, orientation_of  # noqa: E402
from .nifti import read_nifti, write_nifti  # noqa: E402
from .analyzer import PipelineConfig, analyze  # noqa: E402

__all__ = [
    "__version__",
    "Volume",
    "reorient",
    "orientation_of",
    "read_nifti",
    "write_nifti",
    "PipelineConfig",
    "analyze",
]
