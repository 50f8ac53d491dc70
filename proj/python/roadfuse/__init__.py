"""Road segmentation from Sentinel-2 imagery fused with GPS trajectory rasters."""

from ._core import (
    ConfigError,
    DataError,
    Error,
    NumericError,
    ShapeError,
    bce,
    boundary_band,
    boundary_iou,
    buffer_width_for_class,
    content_hash,
    default_boundary_distance,
    focal,
    glcm_homogeneity,
    iou,
    mse,
    normalize_gps,
    normalize_minmax,
    param_count,
    predict,
    rasterize_gps,
    rasterize_labels,
    run_pipeline,
    shannon_entropy,
    synth_dataset,
    train,
    upscale_cubic,
)

__version__ = "0.1.0"
