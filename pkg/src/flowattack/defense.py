"""Attack-detection scores and detection-versus-impact curves.

Three scores are provided: the photometric warping error of a flow, and the
flow discrepancy induced by 3x3 Gaussian or median smoothing of the
(possibly attacked) first image.  All scores are per-element means so they
are comparable across image sizes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage as ndi
from sklearn.base import clone

from ._validation import check_flow, check_image
from .attack import ConsistentFlowAttack, run_attack
from .diffcore import bilinear_sample, conv_replicate
from .flowmodel import HornSchunckFlow, estimate_flow
from .metrics import epe_masked
from .ttc import ttc_error, ttc_from_flow

__all__ = [
    "DEFAULT_MAGNITUDES",
    "DETECTION_METHODS",
    "CurvePoint",
    "DetectionScore",
    "detection_impact_curve",
    "detection_score",
    "gaussian3x3",
    "median3x3",
    "smoothing_defense",
    "warp_image",
    "warping_error",
]

DETECTION_METHODS = ("warping", "gaussian", "median")
DEFAULT_MAGNITUDES = tuple(m * 1e-3 for m in (0.2, 0.4, 1.2, 2, 3.2, 4, 6, 8))
GAUSSIAN_3X3 = np.outer([1.0, 2.0, 1.0], [1.0, 2.0, 1.0]) / 16.0


@dataclass(frozen=True)
class DetectionScore:
    method: str
    value: float

    def __post_init__(self):
        if self.method not in DETECTION_METHODS:
            raise ValueError(f"unknown detection method {self.method!r}")
        if not (np.isfinite(self.value) and self.value >= 0):
            raise ValueError(f"detection score must be finite and >= 0, got {self.value}")


def warp_image(I2, V) -> np.ndarray:
    """Backward-warp every channel of ``I2`` by ``V`` (border-clamped bilinear)."""
    I2 = check_image(I2, "I2")
    V = check_flow(V, "V", I2.shape[:2])
    return np.stack([bilinear_sample(I2[..., c], V[..., 0], V[..., 1]) for c in range(I2.shape[2])], axis=-1)


def warping_error(I1, I2, V, margin: int = 0) -> DetectionScore:
    """Mean absolute photometric residual ``|W_V(I2) - I1|``.

    ``margin`` crops that many pixels from every border before averaging.
    """
    I1 = check_image(I1, "I1")
    resid = np.abs(warp_image(I2, V) - I1)
    if margin:
        resid = resid[margin:-margin, margin:-margin]
        if resid.size == 0:
            raise ValueError(f"margin {margin} leaves no pixels")
    return DetectionScore("warping", float(resid.mean()))


def gaussian3x3(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return np.stack([conv_replicate(img[..., c], GAUSSIAN_3X3) for c in range(img.shape[2])], axis=-1)


def median3x3(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return ndi.median_filter(img, size=(3, 3, 1), mode="nearest")


_KERNELS = {"gaussian": gaussian3x3, "gaussian3x3": gaussian3x3, "median": median3x3, "median3x3": median3x3}


def smoothing_defense(I1_attacked, I2, model=None, kernel="gaussian", V_attacked=None) -> DetectionScore:
    """Mean per-pixel L1 change of the flow when ``I1_attacked`` is smoothed first.

    ``V_attacked`` may be passed to reuse an already computed flow of the
    unsmoothed input.
    """
    model = HornSchunckFlow() if model is None else model
    if kernel not in _KERNELS:
        raise ValueError(f"unknown kernel {kernel!r}; expected gaussian3x3 or median3x3")
    I1_attacked = check_image(I1_attacked, "I1_attacked")
    if I1_attacked.min() < 0 or I1_attacked.max() > 1:
        raise ValueError("I1_attacked must lie in [0, 1]")
    V = estimate_flow(I1_attacked, I2, model) if V_attacked is None else check_flow(V_attacked)
    V_k = estimate_flow(_KERNELS[kernel](I1_attacked), I2, model)
    score = float(np.abs(V - V_k).sum(axis=-1).mean())
    method = "gaussian" if kernel.startswith("gaussian") else "median"
    return DetectionScore(method, score)


def detection_score(method, I1_attacked, I2, V_attacked, model=None) -> DetectionScore:
    """Dispatch to the named detection score for an attacked input and its flow."""
    if method == "warping":
        return warping_error(I1_attacked, I2, V_attacked)
    if method in ("gaussian", "median"):
        return smoothing_defense(I1_attacked, I2, model, method, V_attacked=V_attacked)
    raise ValueError(f"unknown detection method {method!r}")


@dataclass(frozen=True)
class CurvePoint:
    method: str
    alpha: float
    magnitude: float
    detection_score: float
    impact: float


def downstream_impact(kind, attacked_flow, original_flow, target_mask, window=5) -> float:
    """Damage measure used on the vertical axis of detection-impact curves."""
    if kind == "target_epe":
        return epe_masked(attacked_flow, original_flow, target_mask)
    if kind == "ttc_error":
        T_o = ttc_from_flow(original_flow, window)
        T_a = ttc_from_flow(attacked_flow, window)
        return ttc_error(T_a, T_o, mask=target_mask)
    raise ValueError(f"unknown downstream measure {kind!r}")


def detection_impact_curve(
    scenes,
    config: ConsistentFlowAttack,
    magnitudes=DEFAULT_MAGNITUDES,
    method="warping",
    downstream="ttc_error",
    model=None,
    attack_fn=None,
) -> list[CurvePoint]:
    """Scene-averaged (detection score, impact) for each attack magnitude.

    ``scenes`` is a sequence of objects with ``I1``, ``I2`` and ``labels``.
    ``attack_fn(scene_index, config)`` may supply cached attack results; by
    default every attack is run here.
    """
    model = HornSchunckFlow() if model is None else model
    magnitudes = [float(m) for m in magnitudes]
    if not magnitudes:
        raise ValueError("magnitude list is empty")
    if any(m <= 0 for m in magnitudes) or any(b <= a for a, b in zip(magnitudes, magnitudes[1:])):
        raise ValueError("magnitudes must be positive and strictly ascending")
    if method not in DETECTION_METHODS:
        raise ValueError(f"unknown detection method {method!r}")
    points = []
    for mag in magnitudes:
        cfg = clone(config).set_params(budget=mag)
        scores, impacts = [], []
        for k, scene in enumerate(scenes):
            res = attack_fn(k, cfg) if attack_fn is not None else run_attack(scene.I1, scene.I2, scene.labels, cfg, model)
            scores.append(detection_score(method, res.perturbed_image, scene.I2, res.attacked_flow, model).value)
            impacts.append(downstream_impact(downstream, res.attacked_flow, res.original_flow, res.target_mask))
        points.append(CurvePoint(method, float(config.alpha), mag, float(np.mean(scores)), float(np.mean(impacts))))
    return points
