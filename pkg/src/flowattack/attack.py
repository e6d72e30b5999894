"""Targeted, consistency-regularised IFGSM attacks on optical flow.

The attack perturbs only the first image, inside a perturbation mask, and
pushes the estimated flow away from the clean estimate on a target mask while
a consistency term penalises flow change everywhere else::

    l_total = l_attack + alpha * l_consistency

Each step adds ``eps * sign(grad l_total)`` to the masked pixels (gradient
ascent), with ``eps = budget / step_estimate``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_flow, check_image, check_mask
from .diffcore import Node, Tape, backward, record
from .flowmodel import HornSchunckFlow, estimate_flow
from .labels import category_id, category_name

__all__ = [
    "AttackError",
    "AttackResult",
    "ConsistentFlowAttack",
    "SETTINGS",
    "build_masks",
    "epsilon_schedule",
    "ifgsm_step",
    "loss_attack",
    "loss_consistency",
    "loss_gradient",
    "loss_total",
    "mean_abs_perturbation",
    "run_attack",
]

log = logging.getLogger(__name__)

SETTINGS = ("local", "global", "cross_category")
BUDGET_TOLERANCE = 0.05


class AttackError(RuntimeError):
    """The attack could not continue (e.g. a non-finite gradient)."""


class ConsistentFlowAttack(BaseEstimator):
    """Attack configuration with estimator-style parameter handling.

    Parameters
    ----------
    alpha : float
        Consistency coefficient; 0 gives the plain targeted attack.
    budget : float
        Target mean absolute perturbation per perturbed pixel-channel.
    step_estimate : int
        Expected number of steps; sets the step size ``budget / step_estimate``.
    setting : {"local", "global", "cross_category"}
        Which pixels may be perturbed relative to the target.
    target_category, perturb_category : str or int
        Category whose flow is attacked, and (cross_category only) the
        category whose pixels carry the perturbation.
    noise_sigma : float
        Std of the Gaussian noise added to the reference flow on the first
        iteration.
    rng_seed : int
    max_iters : int or None
        Iteration cap; ``None`` means ``10 * step_estimate``.
    clamp_to_unit_interval : bool
        Project the perturbed image back into [0, 1] after every step.
    """

    def __init__(
        self,
        alpha=0.0,
        budget=4e-3,
        step_estimate=2,
        setting="global",
        target_category="vehicle",
        perturb_category=None,
        noise_sigma=1e-3,
        rng_seed=0,
        max_iters=None,
        clamp_to_unit_interval=True,
    ):
        self.alpha = alpha
        self.budget = budget
        self.step_estimate = step_estimate
        self.setting = setting
        self.target_category = target_category
        self.perturb_category = perturb_category
        self.noise_sigma = noise_sigma
        self.rng_seed = rng_seed
        self.max_iters = max_iters
        self.clamp_to_unit_interval = clamp_to_unit_interval

    @property
    def max_iters_(self) -> int:
        return 10 * int(self.step_estimate) if self.max_iters is None else int(self.max_iters)

    def validate(self):
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not self.budget > 0:
            raise ValueError(f"budget must be > 0, got {self.budget}")
        if int(self.step_estimate) != self.step_estimate or self.step_estimate < 1:
            raise ValueError(f"step_estimate must be a positive integer, got {self.step_estimate}")
        if self.setting not in SETTINGS:
            raise ValueError(f"setting must be one of {SETTINGS}, got {self.setting!r}")
        if self.setting == "cross_category" and self.perturb_category is None:
            raise ValueError("cross_category setting needs perturb_category")
        if not self.noise_sigma >= 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.max_iters_ < self.step_estimate:
            raise ValueError(f"max_iters ({self.max_iters_}) must be >= step_estimate ({self.step_estimate})")
        return self

    def attack(self, I1, I2, labels, model=None) -> "AttackResult":
        return run_attack(I1, I2, labels, self, model)


@dataclass
class AttackResult:
    perturbed_image: np.ndarray
    attacked_flow: np.ndarray
    original_flow: np.ndarray
    target_mask: np.ndarray
    perturb_mask: np.ndarray
    iterations: list[dict] = field(default_factory=list)
    final_mean_abs_perturbation: float = 0.0
    converged: bool = False


def build_masks(labels, config: ConsistentFlowAttack):
    """Return ``(target_mask, perturb_mask)`` for the configured setting."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"labels must be 2D, got shape {labels.shape}")
    target = labels == category_id(config.target_category)
    if not target.any():
        raise ValueError(f"target category {category_name(config.target_category)!r} is absent from the labels")
    if config.setting == "local":
        perturb = target.copy()
    elif config.setting == "global":
        perturb = np.ones_like(target)
    elif config.setting == "cross_category":
        if config.perturb_category is None:
            raise ValueError("cross_category setting needs perturb_category")
        perturb = labels == category_id(config.perturb_category)
        if not perturb.any():
            raise ValueError(
                f"perturb category {category_name(config.perturb_category)!r} is absent from the labels"
            )
    else:
        raise ValueError(f"unknown setting {config.setting!r}")
    return target, perturb


# ---------------------------------------------------------------------------
# losses; the taped forms are the only implementation, array inputs are
# wrapped as constants on a scratch tape
# ---------------------------------------------------------------------------


def _l1_masked_sum(u: Node, v: Node, ref: np.ndarray, mask: np.ndarray) -> Node:
    tape = u.tape
    du = abs(u - tape.constant(ref[..., 0]))
    dv = abs(v - tape.constant(ref[..., 1]))
    return record("masked_sum_reduce", [du], mask=mask) + record("masked_sum_reduce", [dv], mask=mask)


def _taped_attack(u, v, ref, target) -> Node:
    n = int(target.sum())
    if n < 1:
        raise ValueError("target mask is empty")
    return _l1_masked_sum(u, v, ref, target) * (1.0 / n)


def _taped_consistency(u, v, ref, target) -> Node:
    off = ~target
    m = int(off.sum())
    if m < 1:
        raise ValueError("target mask covers every pixel; consistency term undefined")
    return _l1_masked_sum(u, v, ref, off) * (-1.0 / m)


def _as_flow_nodes(V_attacked):
    tape = Tape()
    V = check_flow(V_attacked, "V_attacked")
    return tape.constant(V[..., 0]), tape.constant(V[..., 1])


def _prep(V_attacked, V_orig, M_target):
    V_orig = check_flow(V_orig, "V_orig")
    check_flow(V_attacked, "V_attacked", V_orig.shape[:2])
    target = check_mask(M_target, V_orig.shape[:2], "M_target")
    return V_orig, target


def loss_attack(V_attacked, V_orig, M_target) -> float:
    """Mean per-pixel L1 flow change over the target mask."""
    V_orig, target = _prep(V_attacked, V_orig, M_target)
    u, v = _as_flow_nodes(V_attacked)
    return float(_taped_attack(u, v, V_orig, target).value)


def loss_consistency(V_attacked, V_orig, M_target) -> float:
    """Negative mean per-pixel L1 flow change over the complement of the target."""
    V_orig, target = _prep(V_attacked, V_orig, M_target)
    u, v = _as_flow_nodes(V_attacked)
    return float(_taped_consistency(u, v, V_orig, target).value)


def loss_total(V_attacked, V_orig, M_target, alpha) -> float:
    if not alpha >= 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    return loss_attack(V_attacked, V_orig, M_target) + alpha * loss_consistency(V_attacked, V_orig, M_target)


def epsilon_schedule(budget: float, n: int) -> float:
    """Per-step size so that ``n`` consistent steps reach a mean perturbation of ``budget``."""
    if not budget > 0:
        raise ValueError(f"budget must be > 0, got {budget}")
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n}")
    return budget / n


def mean_abs_perturbation(I1_perturbed, I1, M_perturb) -> float:
    delta = np.abs(np.asarray(I1_perturbed, dtype=np.float64) - np.asarray(I1, dtype=np.float64))
    return float(delta[np.asarray(M_perturb, dtype=bool)].mean())


# ---------------------------------------------------------------------------
# iteration
# ---------------------------------------------------------------------------


def loss_gradient(I1, I2, V_ref, M_target, alpha, model=None):
    """Gradient of ``l_total`` with respect to every element of ``I1``.

    Returns the (H, W, 3) gradient and a dict with the three loss values.
    """
    model = HornSchunckFlow() if model is None else model
    tape = Tape()
    tf = estimate_flow(I1, I2, model, tape)
    l_att = _taped_attack(tf.u, tf.v, V_ref, M_target)
    l_con = _taped_consistency(tf.u, tf.v, V_ref, M_target)
    l_tot = l_att + l_con * float(alpha)
    g = np.stack(backward(l_tot, tape, tf.leaves), axis=-1)
    losses = {
        "l_attack": float(l_att.value),
        "l_consistency": float(l_con.value),
        "l_total": float(l_tot.value),
    }
    return g, losses


def _gradient_sign(I1_current, I2, V_ref, target, perturb, alpha, model):
    g, losses = loss_gradient(I1_current, I2, V_ref, target, alpha, model)
    if not np.all(np.isfinite(g)):
        raise AttackError("non-finite gradient of the attack loss")
    return np.sign(g) * perturb[..., None], losses


def _apply(I1_current, sign, step, clamp):
    out = I1_current + step * sign
    if clamp:
        # Only moved elements are projected, so untouched pixels stay bit-identical.
        out = np.where(sign != 0, np.clip(out, 0.0, 1.0), I1_current)
    return out


def ifgsm_step(I1_current, I2, V_ref, M_target, M_perturb, alpha, epsilon, model=None, clamp=True):
    """One masked sign-gradient ascent step.

    Returns the next image and a dict with the losses evaluated at
    ``I1_current`` against the reference flow ``V_ref``.
    """
    model = HornSchunckFlow() if model is None else model
    I1_current = check_image(I1_current, "I1_current")
    shape = I1_current.shape[:2]
    V_ref = check_flow(V_ref, "V_ref", shape)
    target = check_mask(M_target, shape, "M_target")
    perturb = check_mask(M_perturb, shape, "M_perturb")
    sign, losses = _gradient_sign(I1_current, I2, V_ref, target, perturb, alpha, model)
    return _apply(I1_current, sign, epsilon, clamp), losses


def _backtrack(I1_orig, I1_current, sign, perturb, epsilon, budget, clamp, iters=60):
    """Largest step in (0, epsilon] whose mean perturbation does not exceed ``budget``.

    The mean perturbation is continuous and piecewise linear in the step, so
    bisection converges onto the budget exactly.
    """
    lo, hi = 0.0, epsilon
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if mean_abs_perturbation(_apply(I1_current, sign, mid, clamp), I1_orig, perturb) > budget:
            hi = mid
        else:
            lo = mid
    return lo


def run_attack(I1, I2, labels, config: ConsistentFlowAttack, model=None) -> AttackResult:
    """Run the masked IFGSM attack until the mean perturbation reaches the budget."""
    model = HornSchunckFlow() if model is None else model
    config.validate()
    I1 = check_image(I1, "I1", 8)
    I2 = check_image(I2, "I2", 8)
    if I1.shape != I2.shape:
        raise ValueError(f"I1 shape {I1.shape} does not match I2 shape {I2.shape}")
    target, perturb = build_masks(labels, config)
    if target.shape != I1.shape[:2]:
        raise ValueError(f"labels shape {target.shape} does not match image shape {I1.shape[:2]}")

    budget = float(config.budget)
    eps = epsilon_schedule(budget, int(config.step_estimate))
    clamp = bool(config.clamp_to_unit_interval)
    V = estimate_flow(I1, I2, model)
    rng = np.random.default_rng(config.rng_seed)
    V_noisy = V + rng.normal(0.0, float(config.noise_sigma), size=V.shape)

    current = I1.copy()
    trace = []
    converged = False
    lo_ok, hi_ok = (1 - BUDGET_TOLERANCE) * budget, (1 + BUDGET_TOLERANCE) * budget
    for i in range(1, config.max_iters_ + 1):
        V_ref = V_noisy if i == 1 else V
        sign, losses = _gradient_sign(current, I2, V_ref, target, perturb, config.alpha, model)
        step = eps
        nxt = _apply(current, sign, step, clamp)
        m = mean_abs_perturbation(nxt, I1, perturb)
        if m > hi_ok:
            step = _backtrack(I1, current, sign, perturb, eps, budget, clamp)
            nxt = _apply(current, sign, step, clamp)
            m = mean_abs_perturbation(nxt, I1, perturb)
        current = nxt
        trace.append({"iter": i, **losses, "step_size": step, "mean_abs_perturbation": m})
        log.debug("iter %d: l_total=%.6g mean|d|=%.6g", i, losses["l_total"], m)
        if lo_ok <= m <= hi_ok:
            converged = True
            break

    attacked = estimate_flow(current, I2, model)
    return AttackResult(
        perturbed_image=current,
        attacked_flow=attacked,
        original_flow=V,
        target_mask=target,
        perturb_mask=perturb,
        iterations=trace,
        final_mean_abs_perturbation=mean_abs_perturbation(current, I1, perturb),
        converged=converged,
    )
