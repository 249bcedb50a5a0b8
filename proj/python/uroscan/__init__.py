"""Transfer-learning pipeline for endoscopic lesion classification."""

from ._core import (
    Network,
    UroscanError,
    auc,
    avg_pool2d,
    batch_norm,
    conv2d,
    cross_entropy,
    dense,
    generate_synthetic,
    global_avg_pool,
    gradcam,
    load_image,
    max_pool2d,
    overlay,
    relu,
    save_image,
    softmax,
    version,
)

__version__ = version()

__all__ = [
    "Network",
    "UroscanError",
    "auc",
    "avg_pool2d",
    "batch_norm",
    "conv2d",
    "cross_entropy",
    "dense",
    "generate_synthetic",
    "global_avg_pool",
    "gradcam",
    "load_image",
    "max_pool2d",
    "overlay",
    "relu",
    "save_image",
    "softmax",
    "version",
]
