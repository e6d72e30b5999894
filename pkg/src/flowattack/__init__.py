"""Consistency-regularized targeted adversarial attacks on optical flow.

The package bundles a small reverse-mode autodiff engine, a differentiable
coarse-to-fine Horn-Schunck estimator, the masked IFGSM attack with an
off-target consistency term, and the evaluation stack around it (EPE
reports, detection scores, time-to-collision, synthetic scenes, file
formats and a command-line experiment runner).
"""
from .attack import AttackError, AttackResult, ConsistentFlowAttack, run_attack
from .flowmodel import HornSchunckFlow, estimate_flow, model_family
from .metrics import CategoryReport, epe_masked, per_category_report
from .scenegen import SceneSpec, render, scene_suite

__all__ = [
    "AttackError",
    "AttackResult",
    "CategoryReport",
    "ConsistentFlowAttack",
    "HornSchunckFlow",
    "SceneSpec",
    "epe_masked",
    "estimate_flow",
    "model_family",
    "per_category_report",
    "render",
    "run_attack",
    "scene_suite",
]

__version__ = "0.1.0"
