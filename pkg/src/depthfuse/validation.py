"""Input validation helpers used by the estimator-facing API."""

import numpy as np

from .errors import DataError, ShapeError


def as_float_image(image):
    """Coerce an RGB image to float64 (h, w, 3) with values in [0, 1].

    Accepts uint8 arrays (scaled by 1/255) or float arrays already in [0, 1].
    """
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"expected (h, w, 3) RGB image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    else:
        arr = arr.astype(np.float64, copy=False)
        if arr.size and (arr.min() < -1e-9 or arr.max() > 1.0 + 1e-9):
            raise DataError("float RGB image must lie in [0, 1]")
    return arr


def check_finite(name, arr):
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite entries")
    return arr


def check_box_xyxy(box):
    """Validate an (x1, y1, x2, y2) box with positive extent."""
    box = np.asarray(box, dtype=np.float64)
    if box.shape != (4,):
        raise ShapeError(f"box must be a 4-vector, got shape {box.shape}")
    if not (box[2] > box[0] and box[3] > box[1]):
        raise DataError(f"degenerate box {box.tolist()}: need x2>x1 and y2>y1")
    return box


def check_same_shape(name_a, a, name_b, b):
    if np.shape(a) != np.shape(b):
        raise ShapeError(
            f"{name_a} shape {np.shape(a)} does not match {name_b} shape {np.shape(b)}"
        )
