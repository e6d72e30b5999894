"""Time-to-collision from the local expansion rate of a flow field.

Per pixel, an affine model ``u = a0 + a1*x + a2*y, v = b0 + b1*x + b2*y`` is
fitted by least squares over a square window.  The scale rate is half the
divergence, ``s = (a1 + b2) / 2``, and the time to collision is ``1 / s``
frames.  Pixels with ``s <= S_MIN`` (receding, translating or degenerate) are
flagged invalid.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage as ndi

from ._validation import check_flow

__all__ = ["S_MIN", "TTCMap", "ttc_colormap", "ttc_error", "ttc_from_flow"]

S_MIN = 1e-4
NEUTRAL_GRAY = (0.5, 0.5, 0.5)


@dataclass
class TTCMap:
    ttc: np.ndarray  # frames; NaN where invalid
    valid: np.ndarray

    def __post_init__(self):
        self.ttc = np.asarray(self.ttc, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.ttc.shape != self.valid.shape:
            raise ValueError(f"ttc shape {self.ttc.shape} != validity shape {self.valid.shape}")

    def scaled(self, c: float) -> "TTCMap":
        return TTCMap(self.ttc * c, self.valid.copy())


def ttc_from_flow(V, window: int = 5) -> TTCMap:
    V = check_flow(V, "V")
    h, w = V.shape[:2]
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be an odd integer >= 3, got {window}")
    if window > h or window > w:
        raise ValueError(f"window {window} is larger than the {h}x{w} flow field")

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    # Window sums of every moment; windows are truncated at the border.
    def box(a):
        return ndi.uniform_filter(a, size=window, mode="constant", cval=0.0) * window * window

    ones = np.ones((h, w))
    n = box(ones)
    # Centre coordinates on the pixel to keep the normal equations well conditioned.
    sx, sy = box(xx) - xx * n, box(yy) - yy * n
    sxx = box(xx * xx) - 2 * xx * box(xx) + xx * xx * n
    syy = box(yy * yy) - 2 * yy * box(yy) + yy * yy * n
    sxy = box(xx * yy) - xx * box(yy) - yy * box(xx) + xx * yy * n

    ata = np.empty((h, w, 3, 3))
    ata[..., 0, 0] = n
    ata[..., 0, 1] = ata[..., 1, 0] = sx
    ata[..., 0, 2] = ata[..., 2, 0] = sy
    ata[..., 1, 1] = sxx
    ata[..., 1, 2] = ata[..., 2, 1] = sxy
    ata[..., 2, 2] = syy

    def rhs(f):
        sf = box(f)
        return np.stack([sf, box(xx * f) - xx * sf, box(yy * f) - yy * sf], axis=-1)

    sol_u = np.linalg.solve(ata, rhs(V[..., 0])[..., None])[..., 0]
    sol_v = np.linalg.solve(ata, rhs(V[..., 1])[..., None])[..., 0]
    s = 0.5 * (sol_u[..., 1] + sol_v[..., 2])
    valid = np.isfinite(s) & (s > S_MIN)
    ttc = np.full((h, w), np.nan)
    ttc[valid] = 1.0 / s[valid]
    return TTCMap(ttc, valid)


def ttc_error(T_attacked: TTCMap, T_orig: TTCMap, mask=None, return_churn: bool = False):
    """Mean relative TTC change ``|T_A - T_O| / T_O`` over jointly valid pixels.

    With ``return_churn`` the fraction of (masked) pixels whose validity
    differs between the two maps is returned as a second value.
    """
    if T_attacked.ttc.shape != T_orig.ttc.shape:
        raise ValueError(f"TTC map shapes differ: {T_attacked.ttc.shape} vs {T_orig.ttc.shape}")
    region = np.ones(T_orig.ttc.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    joint = T_attacked.valid & T_orig.valid & region
    if not joint.any():
        raise ValueError("no pixel has a valid TTC in both maps")
    rel = np.abs(T_attacked.ttc[joint] - T_orig.ttc[joint]) / T_orig.ttc[joint]
    err = float(rel.mean())
    if return_churn:
        churn = float((T_attacked.valid != T_orig.valid)[region].mean())
        return err, churn
    return err


def _hot(t):
    """Black-red-yellow-white ramp; ``t = 0`` is the hottest end."""
    return np.stack([np.clip(3 * t, 0, 1), np.clip(3 * t - 1, 0, 1), np.clip(3 * t - 2, 0, 1)], axis=-1)


def ttc_colormap(T: TTCMap, vmin: float | None = None, vmax: float | None = None) -> np.ndarray:
    """Render log TTC on a hot-to-cold ramp; short TTC is dark red, long TTC white.

    ``vmin``/``vmax`` fix the TTC range; by default the valid range of ``T``
    is used.  Invalid pixels are neutral gray.
    """
    out = np.empty(T.ttc.shape + (3,))
    out[...] = NEUTRAL_GRAY
    if not T.valid.any():
        return out
    logt = np.log(T.ttc[T.valid])
    lo = np.log(vmin) if vmin is not None else logt.min()
    hi = np.log(vmax) if vmax is not None else logt.max()
    if hi > lo:
        t = np.clip((logt - lo) / (hi - lo), 0.0, 1.0)
    else:
        t = np.full_like(logt, 0.5)
    # The ramp ends at white; stop short of it so long TTCs stay distinguishable from the background.
    out[T.valid] = _hot(0.1 + 0.8 * t)
    return out
