"""End-point error and per-category flow-change reports."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_flow, check_mask, check_same_shape
from .labels import CATEGORIES, VOID, category_id, category_name

__all__ = ["CategoryReport", "epe_map", "epe_masked", "per_category_report", "perturbation_norms"]


def epe_map(V_a, V_b) -> np.ndarray:
    """Per-pixel Euclidean distance between two flow fields."""
    V_a = check_flow(V_a, "V_a")
    V_b = check_flow(V_b, "V_b", V_a.shape[:2])
    return np.sqrt(((V_a - V_b) ** 2).sum(axis=-1))


def epe_masked(V_a, V_b, mask) -> float:
    """Mean end-point error over the pixels selected by ``mask``."""
    err = epe_map(V_a, V_b)
    mask = check_mask(mask, err.shape, "mask")
    return float(err[mask].mean())


@dataclass
class CategoryReport:
    target_category: str
    # category -> {"count": int, "epe": float | None}
    categories: dict = field(default_factory=dict)
    on_target_epe: float | None = None
    off_target_epe: float | None = None
    # Unweighted mean of the per-category EPEs of the non-target categories.
    off_target_category_mean: float | None = None

    def rows(self) -> list[dict]:
        return [
            {"category": name, "count": c["count"], "epe": "" if c["epe"] is None else c["epe"]}
            for name, c in self.categories.items()
        ]

    def to_dict(self) -> dict:
        return {
            "target_category": self.target_category,
            "categories": self.categories,
            "on_target_epe": self.on_target_epe,
            "off_target_epe": self.off_target_epe,
            "off_target_category_mean": self.off_target_category_mean,
        }

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["category", "count", "epe"], lineterminator="\n")
            writer.writeheader()
            writer.writerows(self.rows())

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def per_category_report(V_attacked, V_orig, labels, target_category="vehicle") -> CategoryReport:
    """EPE between attacked and original flow for each labelled category.

    Void pixels are ignored everywhere.  The off-target aggregate is
    pixel-weighted over all non-target, non-void pixels.
    """
    err = epe_map(V_attacked, V_orig)
    labels = np.asarray(labels)
    check_same_shape(labels, err, ("labels", "flow"))
    tid = category_id(target_category)
    report = CategoryReport(target_category=category_name(tid))
    per_cat = []
    for name in CATEGORIES:
        if name == "void":
            continue
        mask = labels == category_id(name)
        count = int(mask.sum())
        epe = float(err[mask].mean()) if count else None
        report.categories[name] = {"count": count, "epe": epe}
        if count and category_id(name) != tid:
            per_cat.append(epe)
    target = labels == tid
    off = (labels != tid) & (labels != VOID)
    report.on_target_epe = float(err[target].mean()) if target.any() else None
    report.off_target_epe = float(err[off].mean()) if off.any() else None
    report.off_target_category_mean = float(np.mean(per_cat)) if per_cat else None
    return report


def perturbation_norms(I1_perturbed, I1, M_perturb) -> dict:
    """Mean in-mask, overall max, and out-of-mask max absolute perturbation."""
    a = np.asarray(I1_perturbed, dtype=np.float64)
    b = np.asarray(I1, dtype=np.float64)
    check_same_shape(a, b, ("I1_perturbed", "I1"))
    mask = check_mask(M_perturb, a.shape[:2], "M_perturb", allow_empty=True)
    delta = np.abs(a - b)
    inside = delta[mask]
    outside = delta[~mask]
    return {
        "mean_abs_in_mask": float(inside.mean()) if inside.size else 0.0,
        "max_abs": float(delta.max()),
        "out_of_mask_max": float(outside.max()) if outside.size else 0.0,
    }
