"""Differentiable coarse-to-fine Horn-Schunck optical flow.

Every arithmetic step runs through :mod:`flowattack.diffcore`, so when a tape
is supplied the estimate can be differentiated with respect to the first
image.  The second image is always treated as a constant.
"""
from __future__ import annotations

import itertools
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator, clone

from ._validation import check_image
from .diffcore import Node, Tape, record

__all__ = ["HornSchunckFlow", "TapedFlow", "estimate_flow", "model_family"]

MIN_IMAGE_SIZE = 8
MIN_COARSE_SIZE = 4

_DX = np.array([[-0.5, 0.0, 0.5]])
_DY = _DX.T
_AVG4 = np.array([[0.0, 0.25, 0.0], [0.25, 0.0, 0.25], [0.0, 0.25, 0.0]])
_BINOMIAL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


class TapedFlow(NamedTuple):
    """Flow components as tape nodes plus the image leaves they depend on."""

    u: Node
    v: Node
    leaves: tuple

    @property
    def flow(self) -> np.ndarray:
        return np.stack([self.u.value, self.v.value], axis=-1)


class HornSchunckFlow(BaseEstimator):
    """Multi-scale Horn-Schunck with a fixed number of unrolled Jacobi sweeps.

    Parameters
    ----------
    smoothness_weight : float
        Weight of the flow smoothness term; enters the Jacobi denominator as
        ``smoothness_weight + Ix**2 + Iy**2`` for intensities in [0, 1].
    pyramid_levels : int
        Number of pyramid levels, including full resolution.
    jacobi_iters_per_level : int
        Unrolled Jacobi updates per warp at each level.
    warps_per_level : int
        Number of re-warp/re-linearise passes at each level.
    pyramid_scale : float
        Downscaling factor between consecutive levels, in (0, 1).
    """

    def __init__(
        self,
        smoothness_weight=0.1,
        pyramid_levels=3,
        jacobi_iters_per_level=20,
        warps_per_level=1,
        pyramid_scale=0.5,
    ):
        self.smoothness_weight = smoothness_weight
        self.pyramid_levels = pyramid_levels
        self.jacobi_iters_per_level = jacobi_iters_per_level
        self.warps_per_level = warps_per_level
        self.pyramid_scale = pyramid_scale

    def _check_params(self):
        if not self.smoothness_weight > 0:
            raise ValueError(f"smoothness_weight must be positive, got {self.smoothness_weight}")
        for name in ("pyramid_levels", "jacobi_iters_per_level", "warps_per_level"):
            val = getattr(self, name)
            if int(val) != val or val < 1:
                raise ValueError(f"{name} must be an integer >= 1, got {val}")
        if not 0.0 < self.pyramid_scale < 1.0:
            raise ValueError(f"pyramid_scale must lie in (0, 1), got {self.pyramid_scale}")

    def level_shapes(self, shape) -> list[tuple[int, int]]:
        """Spatial shape of every pyramid level, finest first."""
        self._check_params()
        shapes = [tuple(int(s) for s in shape)]
        for _ in range(int(self.pyramid_levels) - 1):
            h, w = shapes[-1]
            shapes.append((max(1, round(h * self.pyramid_scale)), max(1, round(w * self.pyramid_scale))))
        h, w = shapes[-1]
        if h < MIN_COARSE_SIZE or w < MIN_COARSE_SIZE:
            raise ValueError(
                f"coarsest pyramid level is {h}x{w} for a {shape[0]}x{shape[1]} image; "
                f"need at least {MIN_COARSE_SIZE}x{MIN_COARSE_SIZE}"
            )
        return shapes

    def predict(self, I1, I2) -> np.ndarray:
        """Return the (H, W, 2) flow mapping ``I1`` to ``I2``."""
        return estimate_flow(I1, I2, self)

    def forward(self, tape: Tape, channels, I2) -> tuple[Node, Node]:
        """Record the estimator on ``tape`` given the three channel nodes of I1."""
        I2 = check_image(I2, "I2", MIN_IMAGE_SIZE)
        shapes = self.level_shapes(I2.shape[:2])
        lam = float(self.smoothness_weight)

        gray1 = (channels[0] + channels[1] + channels[2]) * (1.0 / 3.0)
        pyr1 = [gray1]
        pyr2 = [tape.constant(I2.mean(axis=2))]
        for shp in shapes[1:]:
            pyr1.append(_downsample(pyr1[-1], shp))
            pyr2.append(_downsample(pyr2[-1], shp))

        u = v = None
        for level in range(len(shapes) - 1, -1, -1):
            a, b = pyr1[level], pyr2[level]
            h, w = shapes[level]
            if u is None:
                u = tape.constant(np.zeros((h, w)))
                v = tape.constant(np.zeros((h, w)))
            else:
                ch, cw = u.shape
                u = record("upsample2", [u], shape=(h, w)) * (w / cw)
                v = record("upsample2", [v], shape=(h, w)) * (h / ch)
            for _ in range(int(self.warps_per_level)):
                u, v = _jacobi_level(a, b, u, v, lam, int(self.jacobi_iters_per_level))
        return u, v


def _downsample(x: Node, shape) -> Node:
    x = record("conv_fixed_kernel", [x], kernel=_BINOMIAL[:, None])
    x = record("conv_fixed_kernel", [x], kernel=_BINOMIAL[None, :])
    return record("downsample2", [x], shape=shape)


def _jacobi_level(a: Node, b: Node, u0: Node, v0: Node, lam: float, iters: int):
    b_warp = record("bilinear_warp", [b, u0, v0])
    mid = (a + b_warp) * 0.5
    ix = record("conv_fixed_kernel", [mid], kernel=_DX)
    iy = record("conv_fixed_kernel", [mid], kernel=_DY)
    # Linearised residual is ix*u + iy*v + it_lin, with the current flow folded in.
    it_lin = (b_warp - a) - ix * u0 - iy * v0
    inv_den = record("reciprocal", [record("square", [ix]) + record("square", [iy]) + lam])
    u, v = u0, v0
    for _ in range(iters):
        ub = record("conv_fixed_kernel", [u], kernel=_AVG4)
        vb = record("conv_fixed_kernel", [v], kernel=_AVG4)
        r = (ix * ub + iy * vb + it_lin) * inv_den
        u = ub - ix * r
        v = vb - iy * r
    return u, v


def estimate_flow(I1, I2, params: HornSchunckFlow | None = None, tape: Tape | None = None):
    """Estimate flow from ``I1`` to ``I2``.

    Without a tape, returns the (H, W, 2) flow array.  With a tape, the three
    channels of ``I1`` are registered as leaves (or used directly if ``I1`` is
    already a sequence of nodes) and a :class:`TapedFlow` is returned.
    """
    params = HornSchunckFlow() if params is None else params
    I2 = check_image(I2, "I2", MIN_IMAGE_SIZE)
    if tape is not None and isinstance(I1, (list, tuple)) and all(isinstance(c, Node) for c in I1):
        leaves = tuple(I1)
        if leaves[0].shape != I2.shape[:2]:
            raise ValueError(f"I1 shape {leaves[0].shape} does not match I2 shape {I2.shape[:2]}")
    else:
        I1 = check_image(I1, "I1", MIN_IMAGE_SIZE)
        if I1.shape != I2.shape:
            raise ValueError(f"I1 shape {I1.shape} does not match I2 shape {I2.shape}")
        own = tape if tape is not None else Tape()
        make = own.leaf if tape is not None else own.constant
        leaves = tuple(make(I1[:, :, c]) for c in range(3))
        if tape is None:
            u, v = params.forward(own, leaves, I2)
            return np.stack([u.value, v.value], axis=-1)
    u, v = params.forward(tape, leaves, I2)
    return TapedFlow(u, v, leaves)


def model_family(seed_params: HornSchunckFlow, count: int) -> list[HornSchunckFlow]:
    """Deterministic list of estimator variants, starting with ``seed_params``.

    Variants scale the smoothness weight by {0.5, 2}, shift the pyramid depth
    by one level, and scale the Jacobi count by {0.5, 2}; single-field changes
    come first, then combinations.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    base = seed_params.get_params()
    lam_f = (1.0, 0.5, 2.0)
    lvl_d = (0, -1, 1)
    it_f = (1.0, 0.5, 2.0)
    combos = sorted(
        itertools.product(lam_f, lvl_d, it_f),
        key=lambda c: (sum([c[0] != 1.0, c[1] != 0, c[2] != 1.0]),),
    )
    out, seen = [], set()
    for lf, ld, itf in combos:
        levels = base["pyramid_levels"] + ld
        iters = int(base["jacobi_iters_per_level"] * itf)
        if levels < 1 or iters < 1:
            continue
        key = (base["smoothness_weight"] * lf, levels, iters)
        if key in seen:
            continue
        seen.add(key)
        out.append(
            clone(seed_params).set_params(
                smoothness_weight=key[0], pyramid_levels=levels, jacobi_iters_per_level=iters
            )
        )
        if len(out) == count:
            return out
    raise ValueError(f"cannot build {count} distinct variants; only {len(out)} available")
