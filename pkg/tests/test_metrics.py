import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowattack.labels import CATEGORIES, CATEGORY_IDS, VOID, category_id, category_name
from flowattack.metrics import epe_map, epe_masked, per_category_report, perturbation_norms


def brute_epe(Va, Vb, mask):
    total, n = 0.0, 0
    for y in range(mask.shape[0]):
        for x in range(mask.shape[1]):
            if mask[y, x]:
                total += ((Va[y, x, 0] - Vb[y, x, 0]) ** 2 + (Va[y, x, 1] - Vb[y, x, 1]) ** 2) ** 0.5
                n += 1
    return total / n


def test_epe_examples(rng):
    V = rng.standard_normal((5, 5, 2))
    mask = np.ones((5, 5), dtype=bool)
    assert epe_masked(V, V, mask) == 0.0
    W = V.copy()
    W[2, 3] += (3.0, 4.0)
    one = np.zeros((5, 5), dtype=bool)
    one[2, 3] = True
    assert epe_masked(W, V, one) == pytest.approx(5.0, abs=1e-12)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_epe_matches_loop_and_is_a_metric(seed):
    r = np.random.default_rng(seed)
    A, B, C = r.standard_normal((3, 6, 6, 2))
    mask = r.random((6, 6)) < 0.5
    mask[0, 0] = True
    e_ab = epe_masked(A, B, mask)
    assert abs(e_ab - brute_epe(A, B, mask)) < 1e-12
    assert e_ab == epe_masked(B, A, mask)
    assert e_ab <= epe_masked(A, C, mask) + epe_masked(C, B, mask) + 1e-12


def test_epe_rejects_empty_mask_and_shape_mismatch(rng):
    V = rng.standard_normal((4, 4, 2))
    with pytest.raises(ValueError):
        epe_masked(V, V, np.zeros((4, 4), dtype=bool))
    with pytest.raises(ValueError):
        epe_map(V, rng.standard_normal((4, 5, 2)))


def _labels(rng, h=12, w=12):
    ids = [CATEGORY_IDS[c] for c in ("flat", "nature", "vehicle", "human")] + [VOID]
    return rng.choice(ids, size=(h, w)).astype(np.uint8)


def test_report_is_zero_for_identical_flows(rng):
    V = rng.standard_normal((12, 12, 2))
    rep = per_category_report(V, V, _labels(rng), "vehicle")
    for c in rep.categories.values():
        assert c["epe"] in (None, 0.0)
    assert rep.on_target_epe == 0.0 and rep.off_target_epe == 0.0


def test_report_counts_partition_labelled_pixels(rng):
    labels = _labels(rng)
    V = rng.standard_normal((12, 12, 2))
    rep = per_category_report(V + 1, V, labels, "vehicle")
    assert sum(c["count"] for c in rep.categories.values()) == int((labels != VOID).sum())
    assert "void" not in rep.categories
    assert rep.categories["sky"] == {"count": 0, "epe": None}


def test_change_inside_vehicle_only(rng):
    labels = _labels(rng)
    V = rng.standard_normal((12, 12, 2))
    W = V.copy()
    W[labels == category_id("vehicle")] += 0.5
    rep = per_category_report(W, V, labels, "vehicle")
    for name, c in rep.categories.items():
        if name != "vehicle" and c["count"]:
            assert c["epe"] == 0.0
    assert rep.on_target_epe == pytest.approx(0.5 * np.sqrt(2))
    assert rep.off_target_epe == 0.0


def test_report_matches_loop_oracle(scene32):
    s = scene32
    r = np.random.default_rng(3)
    Va = s.gt_flow + r.normal(0, 0.3, s.gt_flow.shape)
    rep = per_category_report(Va, s.gt_flow, s.labels, "vehicle")
    for name, c in rep.categories.items():
        mask = s.labels == category_id(name)
        if mask.any():
            assert c["epe"] == pytest.approx(brute_epe(Va, s.gt_flow, mask), abs=1e-12)
    off = (s.labels != category_id("vehicle")) & (s.labels != VOID)
    assert rep.off_target_epe == pytest.approx(brute_epe(Va, s.gt_flow, off), abs=1e-12)
    present = [c["epe"] for n, c in rep.categories.items() if c["count"] and n != "vehicle"]
    assert rep.off_target_category_mean == pytest.approx(np.mean(present))


def test_report_serialisation(tmp_path, rng):
    labels = _labels(rng)
    V = rng.standard_normal((12, 12, 2))
    rep = per_category_report(V * 1.1, V, labels, "human")
    rep.write_csv(tmp_path / "r.csv")
    rep.write_json(tmp_path / "r.json")
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert [r["category"] for r in rows] == [c for c in CATEGORIES if c != "void"]
    data = json.load(open(tmp_path / "r.json"))
    assert data["target_category"] == "human"
    assert data["on_target_epe"] == pytest.approx(rep.on_target_epe)


def test_unknown_category_rejected(rng):
    V = rng.standard_normal((4, 4, 2))
    with pytest.raises(ValueError):
        per_category_report(V, V, np.zeros((4, 4), dtype=np.uint8), "spaceship")


def test_label_table_round_trip():
    for name in CATEGORIES:
        assert category_name(category_id(name)) == name
    assert VOID == 255


def test_perturbation_norms(rng):
    I = rng.random((5, 5, 3))
    mask = np.zeros((5, 5), dtype=bool)
    mask[1:3, 1:4] = True
    assert perturbation_norms(I, I, mask) == {"mean_abs_in_mask": 0.0, "max_abs": 0.0, "out_of_mask_max": 0.0}
    eps = 2e-3
    J = I.copy()
    J[2, 2, 1] += eps
    n = perturbation_norms(J, I, mask)
    L = int(mask.sum())
    assert n["mean_abs_in_mask"] == pytest.approx(eps / (3 * L))
    assert n["max_abs"] == pytest.approx(eps)
    assert n["out_of_mask_max"] == 0.0
