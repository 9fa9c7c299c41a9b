"""Cross-modal place descriptors: token fusion, query-residual aggregation,
geo-supervised training, and exact retrieval evaluation."""

__version__ = "0.1.0"

from .config import RunConfig, load_config
from .model import ModelConfig, PlaceModel
from .tokens import SynthConfig, TokenDataset, generate_synthetic_dataset

__all__ = [
    "ModelConfig",
    "PlaceModel",
    "RunConfig",
    "SynthConfig",
    "TokenDataset",
    "__version__",
    "generate_synthetic_dataset",
    "load_config",
]
