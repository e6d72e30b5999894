import numpy as np


def check_image(img, name="image", min_size=1):
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if arr.shape[0] < min_size or arr.shape[1] < min_size:
        raise ValueError(f"{name} is {arr.shape[0]}x{arr.shape[1]}, smaller than {min_size}x{min_size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinite values")
    return arr


def check_flow(flow, name="flow", shape=None):
    arr = np.asarray(flow, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise ValueError(f"{name} must have shape (H, W, 2), got {arr.shape}")
    if shape is not None and arr.shape[:2] != tuple(shape):
        raise ValueError(f"{name} has spatial shape {arr.shape[:2]}, expected {tuple(shape)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_mask(mask, shape, name="mask", allow_empty=False):
    arr = np.asarray(mask)
    if arr.dtype != bool:
        arr = arr.astype(bool)
    if arr.shape != tuple(shape):
        raise ValueError(f"{name} has shape {arr.shape}, expected {tuple(shape)}")
    if not allow_empty and not arr.any():
        raise ValueError(f"{name} is empty")
    return arr


def check_same_shape(a, b, names=("a", "b")):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{names[0]} shape {np.shape(a)} does not match {names[1]} shape {np.shape(b)}")
