"""Multi-scale pyramid network (MSPN) for attention-based multiple instance learning."""
from .data import FeatureBag, GeneratorConfig, generate_synthetic, read_bag, write_bag
from .engine import RunConfig, run_cv
from .models import MilModel, ModelConfig
from .pyramid import MspnSpec, mspn_forward
from .remap import SlideGeometry, build_grid_index
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "FeatureBag", "GeneratorConfig", "MilModel", "ModelConfig", "MspnSpec", "RunConfig",
    "SlideGeometry", "Tensor", "build_grid_index", "generate_synthetic", "mspn_forward",
    "no_grad", "read_bag", "run_cv", "write_bag",
]
