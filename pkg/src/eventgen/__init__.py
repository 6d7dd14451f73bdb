"""Training-free event customization on a toy latent diffusion backbone."""

__version__ = "0.1.0"

from . import backbone, config, errors, evalbench, images, pipeline, schedule, switching, toydata, transfer

__all__ = [
    "backbone",
    "config",
    "errors",
    "evalbench",
    "images",
    "pipeline",
    "schedule",
    "switching",
    "toydata",
    "transfer",
    "__version__",
]
