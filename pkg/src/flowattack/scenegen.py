"""Deterministic synthetic scenes with analytic ground-truth flow and labels.

A scene is a textured background (split into a nature band above a horizon
and a flat band below it) plus sprites drawn in painter's order.  The
background and every sprite move by a similarity transform about a centre::

    x -> c + s * (x - c) + t

so the ground-truth flow at a pixel ``x`` owned by a surface is
``(s - 1) * (x - c) + t``.  Frame 2 is rendered by inverse-mapping every
pixel into the surface's texture, so ``I2(x + flow(x)) == I1(x)`` wherever
the surface stays visible.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage as ndi

from .labels import CATEGORIES, category_id

__all__ = ["Motion", "SceneInstance", "SceneSpec", "Sprite", "render", "scene_suite"]

_TEX_MARGIN = 24


@dataclass
class Motion:
    dx: float = 0.0
    dy: float = 0.0
    scale: float = 1.0
    # Centre of scaling; None means the sprite centre (or image centre for the background).
    center: tuple[float, float] | None = None

    def flow(self, xx, yy, cx, cy):
        return (self.scale - 1.0) * (xx - cx) + self.dx, (self.scale - 1.0) * (yy - cy) + self.dy


@dataclass
class Sprite:
    category: str
    shape: str  # "rect" or "ellipse"
    cx: float
    cy: float
    half_width: float
    half_height: float
    texture_seed: int
    motion: Motion = field(default_factory=Motion)

    def contains(self, dx, dy):
        if self.shape == "rect":
            return (np.abs(dx) <= self.half_width) & (np.abs(dy) <= self.half_height)
        return (dx / self.half_width) ** 2 + (dy / self.half_height) ** 2 <= 1.0

    def center(self):
        if self.motion.center is None:
            return self.cx, self.cy
        return self.motion.center


@dataclass
class SceneSpec:
    width: int = 64
    height: int = 64
    background_seed: int = 0
    horizon: float = 0.45
    background_motion: Motion = field(default_factory=Motion)
    sprites: list[Sprite] = field(default_factory=list)
    rng_seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["background_motion"] = _motion(d.get("background_motion", {}))
        d["sprites"] = [
            Sprite(**{**s, "motion": _motion(s.get("motion", {}))}) for s in d.get("sprites", [])
        ]
        return cls(**d)


def _motion(d) -> Motion:
    if isinstance(d, Motion):
        return d
    d = dict(d)
    if d.get("center") is not None:
        d["center"] = tuple(d["center"])
    return Motion(**d)


@dataclass
class SceneInstance:
    I1: np.ndarray
    I2: np.ndarray
    gt_flow: np.ndarray
    labels: np.ndarray
    # Pixels of I1 whose surface is hidden in I2 (or sampled across a depth edge).
    occluded: np.ndarray


def _texture(seed: int, shape, sigma: float) -> np.ndarray:
    """Contrast-stretched band-limited noise with a per-texture colour tint, in [0.1, 0.9]."""
    rng = np.random.default_rng(seed)
    t = ndi.gaussian_filter(rng.normal(size=shape), sigma, mode="wrap")
    lo, hi = np.percentile(t, [2, 98])
    t = np.clip((t - lo) / (hi - lo), 0.0, 1.0)
    tint = rng.uniform(0.75, 1.0, size=3)
    return 0.1 + 0.8 * t[..., None] * tint


def _sample(tex: np.ndarray, xs, ys) -> np.ndarray:
    """Cubic-spline texture lookup in texture-pixel coordinates."""
    coords = [ys.ravel(), xs.ravel()]
    chans = [ndi.map_coordinates(tex[..., c], coords, order=3, mode="nearest") for c in range(3)]
    return np.stack(chans, axis=-1).reshape(xs.shape + (3,))


def _validate(spec: SceneSpec):
    if spec.width < 8 or spec.height < 8:
        raise ValueError(f"scene must be at least 8x8, got {spec.width}x{spec.height}")
    if spec.background_motion.scale <= 0:
        raise ValueError("background scale must be positive")
    for k, sp in enumerate(spec.sprites):
        if sp.category not in CATEGORIES or sp.category == "void":
            raise ValueError(f"sprite {k}: invalid category {sp.category!r}")
        if sp.shape not in ("rect", "ellipse"):
            raise ValueError(f"sprite {k}: unknown shape {sp.shape!r}")
        if sp.half_width <= 0 or sp.half_height <= 0 or sp.motion.scale <= 0:
            raise ValueError(f"sprite {k}: sizes and scale must be positive")
        cx, cy = sp.center()
        corners = [(sp.cx + sx * sp.half_width, sp.cy + sy * sp.half_height) for sx in (-1, 1) for sy in (-1, 1)]
        for x, y in corners:
            if not (0 <= x <= spec.width - 1 and 0 <= y <= spec.height - 1):
                raise ValueError(f"sprite {k} ({sp.category}) lies outside the frame in I1")
            fx, fy = sp.motion.flow(x, y, cx, cy)
            if not (0 <= x + fx <= spec.width - 1 and 0 <= y + fy <= spec.height - 1):
                raise ValueError(f"sprite {k} ({sp.category}) leaves the frame in I2")


def render(spec: SceneSpec) -> SceneInstance:
    """Render both frames, the exact flow and the per-pixel labels of ``spec``."""
    _validate(spec)
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    m = _TEX_MARGIN

    bg_tex = _texture(spec.background_seed, (h + 2 * m, w + 2 * m), 1.5)
    bm = spec.background_motion
    bcx, bcy = bm.center if bm.center is not None else ((w - 1) / 2.0, (h - 1) / 2.0)
    horizon = spec.horizon * h

    # Frame 1: background in world coordinates.
    I1 = _sample(bg_tex, xx + m, yy + m)
    labels = np.where(yy < horizon, category_id("nature"), category_id("flat")).astype(np.uint8)
    owner1 = np.full((h, w), -1)
    u, v = bm.flow(xx, yy, bcx, bcy)
    flow = np.stack([u, v], axis=-1)

    # Frame 2: inverse similarity back into the background texture.
    bx = bcx + (xx - bcx - bm.dx) / bm.scale
    by = bcy + (yy - bcy - bm.dy) / bm.scale
    I2 = _sample(bg_tex, bx + m, by + m)
    owner2 = np.full((h, w), -1)

    textures = []
    for k, sp in enumerate(spec.sprites):
        pad = int(np.ceil(max(sp.half_width, sp.half_height))) + 4
        tex = _texture(sp.texture_seed, (2 * pad + 1, 2 * pad + 1), 1.5)
        textures.append((tex, pad))
        dx1, dy1 = xx - sp.cx, yy - sp.cy
        inside1 = sp.contains(dx1, dy1)
        I1[inside1] = _sample(tex, dx1 + pad, dy1 + pad)[inside1]
        labels[inside1] = category_id(sp.category)
        owner1[inside1] = k
        cx, cy = sp.center()
        su, sv = sp.motion.flow(xx, yy, cx, cy)
        flow[inside1] = np.stack([su, sv], axis=-1)[inside1]

        s = sp.motion.scale
        px = cx + (xx - cx - sp.motion.dx) / s
        py = cy + (yy - cy - sp.motion.dy) / s
        dx2, dy2 = px - sp.cx, py - sp.cy
        inside2 = sp.contains(dx2, dy2)
        I2[inside2] = _sample(tex, dx2 + pad, dy2 + pad)[inside2]
        owner2[inside2] = k

    # A pixel is unoccluded when every I2 neighbour used by bilinear sampling belongs to its surface.
    tx = np.clip(xx + flow[..., 0], 0, w - 1)
    ty = np.clip(yy + flow[..., 1], 0, h - 1)
    x0 = np.floor(tx).astype(int)
    y0 = np.floor(ty).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    same = np.ones((h, w), dtype=bool)
    for yi, xi in ((y0, x0), (y0, x1), (y1, x0), (y1, x1)):
        same &= owner2[yi, xi] == owner1
    out_of_frame = (xx + flow[..., 0] < 0) | (xx + flow[..., 0] > w - 1) | (yy + flow[..., 1] < 0) | (yy + flow[..., 1] > h - 1)

    return SceneInstance(
        I1=np.clip(I1, 0.0, 1.0),
        I2=np.clip(I2, 0.0, 1.0),
        gt_flow=flow,
        labels=labels,
        occluded=~same | out_of_frame,
    )


def scene_suite(count: int, base_seed: int = 0, size: int = 64) -> list[SceneSpec]:
    """A reproducible suite of driving-like scenes.

    Every scene has an expanding, slightly translating background, one or two
    vehicles and usually a pedestrian, each with its own motion.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    specs = []
    for i in range(count):
        rng = np.random.default_rng([base_seed, i])
        w = h = size
        bg = Motion(
            dx=float(rng.uniform(-0.6, 0.6)),
            dy=float(rng.uniform(-0.3, 0.3)),
            scale=float(rng.uniform(1.01, 1.03)),
            center=(float(rng.uniform(0.4, 0.6) * (w - 1)), float(rng.uniform(0.4, 0.55) * (h - 1))),
        )
        sprites = []
        n_vehicles = int(rng.integers(1, 3))
        for _ in range(n_vehicles):
            sprites.append(_random_sprite(rng, w, h, "vehicle", "rect", (0.11, 0.17), (0.08, 0.12)))
        if rng.uniform() < 0.8:
            sprites.append(_random_sprite(rng, w, h, "human", "ellipse", (0.04, 0.06), (0.09, 0.13)))
        specs.append(
            SceneSpec(
                width=w,
                height=h,
                background_seed=int(rng.integers(0, 2**31 - 1)),
                horizon=float(rng.uniform(0.35, 0.55)),
                background_motion=bg,
                sprites=sprites,
                rng_seed=int(rng.integers(0, 2**31 - 1)),
            )
        )
    return specs


def _random_sprite(rng, w, h, category, shape, hw_frac, hh_frac) -> Sprite:
    hw = float(rng.uniform(*hw_frac) * w)
    hh = float(rng.uniform(*hh_frac) * h)
    motion = Motion(
        dx=float(rng.uniform(-1.5, 1.5)),
        dy=float(rng.uniform(-0.7, 0.7)),
        scale=float(rng.uniform(1.02, 1.08)),
    )
    # Keep the moved sprite inside the frame with a small margin.
    margin = 2.0 + max(hw, hh) * (motion.scale - 1.0) + 1.5
    cx = float(rng.uniform(hw + margin, w - 1 - hw - margin))
    cy = float(rng.uniform(max(hh + margin, 0.3 * h), h - 1 - hh - margin))
    return Sprite(category, shape, cx, cy, hw, hh, int(rng.integers(0, 2**31 - 1)), motion)
