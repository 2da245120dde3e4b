"""Dense video captioning with parallel decoding of event queries."""
from .config import RunConfig, load_config
from .model import DenseCaptioner

__version__ = "0.1.0"
__all__ = ["DenseCaptioner", "RunConfig", "load_config", "__version__"]
