"""Flow, label and image file formats plus flow visualisations.

Formats
-------
``.flo`` (Middlebury)
    float32 magic 202021.25, int32 width, int32 height, then row-major
    interleaved float32 (u, v); all little-endian.
KITTI flow PNG
    16-bit, 3 channels (R, G, B) = (u*64 + 2**15, v*64 + 2**15, valid).
Label PNG
    8-bit single channel holding the ids of :mod:`flowattack.labels`.
Images
    RGB PNGs, 8 or 16 bit, mapped to floats in [0, 1].
TTC maps
    float32 TIFF with two channels (TTC in frames, validity); invalid TTC is 0.
"""
from __future__ import annotations

import os

import cv2
import numpy as np

from ._validation import check_flow, check_same_shape
from .labels import ID_TO_NAME
from .ttc import TTCMap

__all__ = [
    "FLO_MAGIC",
    "FormatError",
    "flow_to_color",
    "make_color_wheel",
    "perturbation_heatmap",
    "read_flo",
    "read_image_png",
    "read_kitti_png",
    "read_label_png",
    "read_ttc_map",
    "write_flo",
    "write_image_png",
    "write_kitti_png",
    "write_label_png",
    "write_ttc_map",
]

FLO_MAGIC = 202021.25
_FLO_HEADER = np.dtype([("magic", "<f4"), ("width", "<i4"), ("height", "<i4")])
_MAX_DIM = 1 << 16


class FormatError(ValueError):
    """A file does not conform to its format."""


def write_flo(path, flow):
    flow = check_flow(flow)
    h, w = flow.shape[:2]
    header = np.array([(FLO_MAGIC, w, h)], dtype=_FLO_HEADER)
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(flow.astype("<f4").tobytes(order="C"))


def read_flo(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _FLO_HEADER.itemsize:
        raise FormatError(f"{path}: truncated header ({len(data)} bytes, need {_FLO_HEADER.itemsize})")
    header = np.frombuffer(data, dtype=_FLO_HEADER, count=1)[0]
    if header["magic"] != np.float32(FLO_MAGIC):
        raise FormatError(f"{path}: bad magic {header['magic']!r} at offset 0")
    w, h = int(header["width"]), int(header["height"])
    if not (0 < w <= _MAX_DIM and 0 < h <= _MAX_DIM):
        raise FormatError(f"{path}: invalid dimensions {w}x{h} at offset 4")
    expected = _FLO_HEADER.itemsize + 8 * w * h
    if len(data) != expected:
        raise FormatError(
            f"{path}: payload ends at offset {len(data)}, expected {expected} for a {w}x{h} flow"
        )
    flow = np.frombuffer(data, dtype="<f4", offset=_FLO_HEADER.itemsize).reshape(h, w, 2)
    return flow.astype(np.float32)


def write_kitti_png(path, flow, valid=None):
    flow = check_flow(flow)
    valid = np.ones(flow.shape[:2], dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    check_same_shape(valid, flow[..., 0], ("valid", "flow"))
    raw = np.clip(np.round(flow * 64.0 + 2**15), 0, 65535).astype(np.uint16)
    # OpenCV stores channels as BGR.
    bgr = np.stack([valid.astype(np.uint16), raw[..., 1], raw[..., 0]], axis=-1)
    _imwrite(path, bgr)


def read_kitti_png(path):
    """Return ``(flow, valid)``; flow is float64 (H, W, 2), valid a bool mask."""
    raw = _imread(path)
    if raw.dtype != np.uint16:
        raise FormatError(f"{path}: expected 16-bit PNG, got {raw.dtype}")
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise FormatError(f"{path}: expected 3 channels, got shape {raw.shape}")
    b, g, r = raw[..., 0], raw[..., 1], raw[..., 2]
    flow = np.stack([(r.astype(np.float64) - 2**15) / 64.0, (g.astype(np.float64) - 2**15) / 64.0], axis=-1)
    return flow, b > 0


def write_label_png(path, labels):
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise FormatError(f"labels must be 2D, got shape {labels.shape}")
    unknown = set(np.unique(labels).tolist()) - set(ID_TO_NAME)
    if unknown:
        raise FormatError(f"labels contain unknown ids {sorted(unknown)}")
    _imwrite(path, labels.astype(np.uint8))


def read_label_png(path) -> np.ndarray:
    raw = _imread(path)
    if raw.dtype != np.uint8 or raw.ndim != 2:
        raise FormatError(f"{path}: expected 8-bit single-channel label PNG, got {raw.dtype} {raw.shape}")
    unknown = set(np.unique(raw).tolist()) - set(ID_TO_NAME)
    if unknown:
        raise FormatError(f"{path}: unknown label ids {sorted(unknown)}")
    return raw


def write_image_png(path, img, bits: int = 8):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"image must have shape (H, W, 3), got {img.shape}")
    if bits not in (8, 16):
        raise ValueError(f"bits must be 8 or 16, got {bits}")
    top = 255 if bits == 8 else 65535
    dtype = np.uint8 if bits == 8 else np.uint16
    q = np.round(np.clip(img, 0.0, 1.0) * top).astype(dtype)
    _imwrite(path, q[..., ::-1])


def read_image_png(path) -> np.ndarray:
    raw = _imread(path)
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise FormatError(f"{path}: expected an RGB image, got shape {raw.shape}")
    top = {np.dtype(np.uint8): 255.0, np.dtype(np.uint16): 65535.0}.get(raw.dtype)
    if top is None:
        raise FormatError(f"{path}: unsupported bit depth {raw.dtype}")
    return raw[..., ::-1].astype(np.float64) / top


def write_ttc_map(path, T: TTCMap):
    data = np.stack([np.where(T.valid, T.ttc, 0.0), T.valid.astype(np.float64)], axis=-1).astype(np.float32)
    # A third zero channel keeps the TIFF readable by common viewers.
    data = np.concatenate([data, np.zeros_like(data[..., :1])], axis=-1)
    _imwrite(path, data)


def read_ttc_map(path) -> TTCMap:
    raw = _imread(path)
    if raw.dtype != np.float32 or raw.ndim != 3 or raw.shape[2] < 2:
        raise FormatError(f"{path}: expected a float32 TTC image with a validity channel")
    valid = raw[..., 1] > 0.5
    ttc = np.where(valid, raw[..., 0].astype(np.float64), np.nan)
    return TTCMap(ttc, valid)


def _imwrite(path, arr):
    ext = os.path.splitext(str(path))[1] or ".png"
    ok, buf = cv2.imencode(ext, arr)
    if not ok:
        raise FormatError(f"could not encode {path}")
    with open(path, "wb") as fh:
        fh.write(buf.tobytes())


def _imread(path):
    with open(path, "rb") as fh:
        data = np.frombuffer(fh.read(), dtype=np.uint8)
    img = cv2.imdecode(data, cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FormatError(f"{path}: not a readable image")
    return img


# ---------------------------------------------------------------------------
# visualisation
# ---------------------------------------------------------------------------


def make_color_wheel() -> np.ndarray:
    """The 55-entry Middlebury colour wheel, RGB in [0, 255]."""
    RY, YG, GC, CB, BM, MR = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((RY + YG + GC + CB + BM + MR, 3))
    col = 0
    wheel[col : col + RY, 0] = 255
    wheel[col : col + RY, 1] = np.floor(255 * np.arange(RY) / RY)
    col += RY
    wheel[col : col + YG, 0] = 255 - np.floor(255 * np.arange(YG) / YG)
    wheel[col : col + YG, 1] = 255
    col += YG
    wheel[col : col + GC, 1] = 255
    wheel[col : col + GC, 2] = np.floor(255 * np.arange(GC) / GC)
    col += GC
    wheel[col : col + CB, 1] = 255 - np.floor(255 * np.arange(CB) / CB)
    wheel[col : col + CB, 2] = 255
    col += CB
    wheel[col : col + BM, 2] = 255
    wheel[col : col + BM, 0] = np.floor(255 * np.arange(BM) / BM)
    col += BM
    wheel[col : col + MR, 2] = 255 - np.floor(255 * np.arange(MR) / MR)
    wheel[col : col + MR, 0] = 255
    return wheel


def flow_to_color(flow, max_magnitude: float | None = None) -> np.ndarray:
    """Middlebury colour coding of ``flow`` as an RGB image in [0, 1].

    Hue encodes direction, saturation the magnitude relative to
    ``max_magnitude`` (default: 99th percentile of the magnitudes).  Zero
    flow is white; magnitudes beyond the maximum are darkened.
    """
    flow = check_flow(flow)
    u, v = flow[..., 0], flow[..., 1]
    mag = np.sqrt(u * u + v * v)
    if max_magnitude is None:
        max_magnitude = float(np.percentile(mag, 99))
    if max_magnitude <= 0:
        max_magnitude = 1.0
    rad = mag / max_magnitude
    wheel = make_color_wheel() / 255.0
    ncols = wheel.shape[0]
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1.0) / 2.0 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = (fk - k0)[..., None]
    col = (1 - f) * wheel[k0] + f * wheel[k1]
    r = rad[..., None]
    col = np.where(r <= 1, 1 - r * (1 - col), col * 0.75)
    return col


def perturbation_heatmap(I1_perturbed, I1) -> np.ndarray:
    """Grayscale RGB map of the per-pixel mean absolute perturbation, max-normalised."""
    a = np.asarray(I1_perturbed, dtype=np.float64)
    b = np.asarray(I1, dtype=np.float64)
    check_same_shape(a, b, ("I1_perturbed", "I1"))
    d = np.abs(a - b).mean(axis=-1)
    peak = d.max()
    if peak > 0:
        d = d / peak
    return np.repeat(d[..., None], 3, axis=-1)
