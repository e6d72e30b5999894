"""Acceptance criteria, one test per criterion.

Every test prints a single ``[PASS]``/``[FAIL]`` line with the measured
numbers, and the lines are repeated in the pytest terminal summary.  Run
this file directly (``python3 tests/test_acceptance.py``) to get just the
lines.
"""
from __future__ import annotations

import hashlib
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from flowattack.attack import (
    ConsistentFlowAttack,
    build_masks,
    loss_attack,
    loss_consistency,
    loss_gradient,
    loss_total,
)
from flowattack.defense import DETECTION_METHODS, detection_score, downstream_impact
from flowattack.experiments import blackbox_matrix, run_suite, suite_epes
from flowattack.flowio import FormatError, flow_to_color, read_flo, read_kitti_png, write_flo, write_kitti_png
from flowattack.flowmodel import HornSchunckFlow, estimate_flow, model_family
from flowattack.metrics import epe_masked
from flowattack.scenegen import Motion, SceneSpec, Sprite, render
from flowattack.ttc import TTCMap, ttc_error, ttc_from_flow

ROOT = Path(__file__).resolve().parents[1]
BUDGET = 4e-3
RESULTS: list[str] = []


def report(number: int, ok: bool, detail: str):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {detail}"
    RESULTS.append(line)
    print(line)
    return ok


def global_attack(alpha, **kw):
    return ConsistentFlowAttack(alpha=alpha, setting="global", budget=BUDGET, step_estimate=2, **kw)


def local_attack(alpha):
    return ConsistentFlowAttack(alpha=alpha, setting="local", budget=BUDGET, step_estimate=2)


# ---------------------------------------------------------------------------
# 1. gradient correctness
# ---------------------------------------------------------------------------


def _scene16(seed):
    r = np.random.default_rng(seed)
    car = Sprite(
        "vehicle",
        "rect",
        float(r.uniform(7, 8)),
        float(r.uniform(8, 9)),
        3.0,
        2.5,
        int(r.integers(1 << 30)),
        Motion(dx=float(r.uniform(-1, 1)), dy=float(r.uniform(-0.5, 0.5)), scale=1.05),
    )
    spec = SceneSpec(
        width=16,
        height=16,
        background_seed=int(r.integers(1 << 30)),
        background_motion=Motion(dx=float(r.uniform(-0.5, 0.5)), scale=1.02),
        sprites=[car],
    )
    return render(spec)


def test_criterion_01_gradient_correctness():
    start = time.perf_counter()
    model = HornSchunckFlow(pyramid_levels=2, jacobi_iters_per_level=5)
    errors = []
    for seed in range(3):
        s = _scene16(seed)
        target, _ = build_masks(s.labels, global_attack(10.0))
        V = estimate_flow(s.I1, s.I2, model)
        # Reference flow offset from V so the L1 terms sit away from their kinks.
        V_ref = V + np.random.default_rng(100 + seed).normal(0.0, 1e-2, V.shape)
        g, _ = loss_gradient(s.I1, s.I2, V_ref, target, 10.0, model)

        def total(img):
            return loss_total(estimate_flow(img, s.I2, model), V_ref, target, 10.0)

        fd = np.zeros_like(s.I1)
        h = 1e-6
        for idx in np.ndindex(s.I1.shape):
            p, m = s.I1.copy(), s.I1.copy()
            p[idx] += h
            m[idx] -= h
            fd[idx] = (total(p) - total(m)) / (2 * h)
        errors.append(np.linalg.norm(g - fd) / np.linalg.norm(fd))
    elapsed = time.perf_counter() - start
    ok = max(errors) < 1e-3 and elapsed < 60
    report(1, ok, f"max relative error {max(errors):.2e} (< 1e-3) over 3 scenes in {elapsed:.1f}s (< 60s)")
    assert ok


# ---------------------------------------------------------------------------
# 2. loss oracles
# ---------------------------------------------------------------------------


def _loop_l1(Va, Vb, mask):
    total, n = 0.0, 0
    for y in range(mask.shape[0]):
        for x in range(mask.shape[1]):
            if mask[y, x]:
                total += abs(Va[y, x, 0] - Vb[y, x, 0]) + abs(Va[y, x, 1] - Vb[y, x, 1])
                n += 1
    return total / n


def _loop_epe(Va, Vb, mask):
    total, n = 0.0, 0
    for y in range(mask.shape[0]):
        for x in range(mask.shape[1]):
            if mask[y, x]:
                total += np.sqrt((Va[y, x, 0] - Vb[y, x, 0]) ** 2 + (Va[y, x, 1] - Vb[y, x, 1]) ** 2)
                n += 1
    return total / n


def test_criterion_02_loss_oracles():
    start = time.perf_counter()
    r = np.random.default_rng(2)
    worst = 0.0
    for _ in range(50):
        Va, Vb = r.standard_normal((2, 8, 8, 2)) * r.uniform(0.1, 10)
        mask = r.random((8, 8)) < r.uniform(0.05, 0.95)
        mask[r.integers(8), r.integers(8)] = True
        if mask.all():
            mask[0, 0] = False
        worst = max(
            worst,
            abs(loss_attack(Va, Vb, mask) - _loop_l1(Va, Vb, mask)),
            abs(loss_consistency(Va, Vb, mask) + _loop_l1(Va, Vb, ~mask)),
            abs(epe_masked(Va, Vb, mask) - _loop_epe(Va, Vb, mask)),
        )
    elapsed = time.perf_counter() - start
    ok = worst < 1e-12 and elapsed < 5
    report(2, ok, f"max deviation {worst:.1e} (< 1e-12) on 50 instances in {elapsed:.2f}s (< 5s)")
    assert ok


# ---------------------------------------------------------------------------
# 3-5. suite attacks
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def model():
    return HornSchunckFlow()


@pytest.fixture(scope="module")
def global_runs(suite20, suite_cache, model):
    return {a: run_suite(suite20, global_attack(a), model, suite_cache) for a in (0.0, 10.0)}


def test_criterion_03_budget_and_confinement(suite20, global_runs):
    lines, ok = [], True
    for alpha, res in global_runs.items():
        conv = [r for r in res if r.converged]
        in_window = all(0.95 * BUDGET <= r.final_mean_abs_perturbation <= 1.05 * BUDGET for r in conv)
        confined = all(
            (r.perturbed_image[~r.perturb_mask] == s.I1[~r.perturb_mask]).all() for s, r in zip(suite20, res)
        )
        iters = [len(r.iterations) for r in res]
        ok &= in_window and confined and len(conv) >= 18
        lines.append(f"alpha={alpha:g}: {len(conv)}/20 converged (max {max(iters)} iters), budget window {in_window}, confined {confined}")
    report(3, ok, "; ".join(lines))
    assert ok


def test_criterion_04_off_target_benefit(suite20, global_runs):
    _, off0 = suite_epes(suite20, global_runs[0.0])
    _, off10 = suite_epes(suite20, global_runs[10.0])
    wins = int((off10 < off0).sum())
    p = stats.binomtest(wins, len(off0), 0.5, alternative="greater").pvalue
    ok = off10.mean() < off0.mean() and p < 0.05
    report(4, ok, f"off-target EPE alpha=10 {off10.mean():.4f} vs alpha=0 {off0.mean():.4f}; sign test {wins}/20, p={p:.2e}")
    assert ok


def test_criterion_05_on_target_effect(suite20, suite_cache, model, global_runs):
    on0, _ = suite_epes(suite20, global_runs[0.0])
    on10, _ = suite_epes(suite20, global_runs[10.0])
    ratios = on10 / on0
    global_ok = bool((ratios >= 0.9).all()) and on10.mean() > on0.mean()
    l0, _ = suite_epes(suite20, run_suite(suite20, local_attack(0.0), model, suite_cache))
    l10, _ = suite_epes(suite20, run_suite(suite20, local_attack(10.0), model, suite_cache))
    local_ratio = l10.mean() / l0.mean()
    local_ok = 0.75 <= local_ratio <= 1.25
    ok = global_ok and local_ok
    report(
        5,
        ok,
        f"global: min per-scene ratio {ratios.min():.2f} (>= 0.9), mean {on10.mean():.4f} vs {on0.mean():.4f}; "
        f"local: mean ratio {local_ratio:.3f} (within 0.75-1.25)",
    )
    assert ok


# ---------------------------------------------------------------------------
# 6. alpha sweep
# ---------------------------------------------------------------------------


def test_criterion_06_alpha_sweep(suite20, suite_cache, model):
    alphas = [0.01, 0.1, 1.0, 10.0, 100.0]
    off = []
    for a in alphas:
        _, o = suite_epes(suite20, run_suite(suite20, global_attack(a), model, suite_cache))
        off.append(o.mean())
    rho, p = stats.spearmanr(alphas, off)
    monotone = bool(np.all(np.diff(off) <= 0))
    ok = monotone and rho < 0 and p < 0.05
    vals = ", ".join(f"{a:g}:{o:.4f}" for a, o in zip(alphas, off))
    report(6, ok, f"off-target EPE by alpha [{vals}]; non-increasing {monotone}; Spearman rho={rho:.2f}, p={p:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 7. black-box transfer
# ---------------------------------------------------------------------------


def test_criterion_07_blackbox_transfer(suite20, suite_cache, model):
    family = model_family(model, 4)
    off_diag = ~np.eye(4, dtype=bool)
    per_scene = {}
    for a in (0.0, 10.0):
        full = blackbox_matrix(suite20, global_attack(a), family, suite_cache, per_scene=True)
        per_scene[a] = full[off_diag].mean(axis=0)  # one transfer mean per scene
    t0, t10 = per_scene[0.0], per_scene[10.0]
    p = stats.wilcoxon(t10, t0, alternative="greater").pvalue
    ok = t10.mean() > t0.mean() and p < 0.05
    report(7, ok, f"off-diagonal on-target EPE alpha=10 {t10.mean():.4f} vs alpha=0 {t0.mean():.4f}; Wilcoxon p={p:.2e}")
    assert ok


# ---------------------------------------------------------------------------
# 8. detection-impact dominance
# ---------------------------------------------------------------------------


def test_criterion_08_detection_dominance(suite20, suite_cache, model):
    mags = [0.4e-3, 2e-3, 4e-3, 8e-3]
    det = {m: {} for m in DETECTION_METHODS}
    ttc = {}
    for a in (0.0, 10.0):
        for mag in mags:
            res = run_suite(suite20, global_attack(a).set_params(budget=mag), model, suite_cache)
            for method in DETECTION_METHODS:
                det[method][a, mag] = np.mean(
                    [detection_score(method, r.perturbed_image, s.I2, r.attacked_flow, model).value for s, r in zip(suite20, res)]
                )
            ttc[a, mag] = np.mean([downstream_impact("ttc_error", r.attacked_flow, r.original_flow, r.target_mask) for r in res])
    parts, ok = [], True
    for method in DETECTION_METHODS:
        violations = [m for m in mags if not (det[method][10.0, m] <= det[method][0.0, m] and ttc[10.0, m] >= ttc[0.0, m])]
        ok &= len(violations) <= 1
        parts.append(f"{method} {len(violations)} violations")
    ratio = ", ".join(
        f"{m * 1e3:g}e-3: warp {det['warping'][10.0, m] / det['warping'][0.0, m]:.3f}, ttc {ttc[10.0, m] / ttc[0.0, m]:.2f}"
        for m in mags
    )
    report(8, ok, f"{'; '.join(parts)} (<= 1 allowed); alpha10/alpha0 ratios [{ratio}]")
    assert ok


# ---------------------------------------------------------------------------
# 9-11. analytics, formats, determinism
# ---------------------------------------------------------------------------


def test_criterion_09_ttc_analytics():
    h = w = 32
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    V = np.stack([0.1 * (xx - 15.5), 0.1 * (yy - 15.5)], axis=-1)
    T = ttc_from_flow(V, 5)
    interior = T.ttc[2:-2, 2:-2]
    worst = float(np.nanmax(np.abs(interior - 10.0) / 10.0))
    all_valid = bool(T.valid[2:-2, 2:-2].all())
    same = ttc_error(T, T)
    doubled = ttc_error(TTCMap(2 * T.ttc, T.valid), T)
    ok = all_valid and worst < 0.01 and same == 0.0 and doubled == 1.0
    report(9, ok, f"max interior TTC error {worst:.1e} (< 1%), ttc_error(T,T)={same}, ttc_error(2T,T)={doubled}")
    assert ok


def test_criterion_10_formats(tmp_path):
    r = np.random.default_rng(10)
    flo_ok = kitti_ok = True
    for k in range(100):
        h, w = (int(x) for x in r.integers(1, 40, 2))
        V = r.standard_normal((h, w, 2)) * r.uniform(0.1, 100)
        write_flo(tmp_path / "f.flo", V)
        flo_ok &= read_flo(tmp_path / "f.flo").tobytes() == V.astype(np.float32).tobytes()
        Vq = np.round(np.clip(V, -500, 500) * 64) / 64
        valid = r.random((h, w)) < 0.8
        write_kitti_png(tmp_path / "k.png", Vq, valid)
        back, vback = read_kitti_png(tmp_path / "k.png")
        kitti_ok &= bool(np.array_equal(back, Vq) and np.array_equal(vback, valid))
    rejected = 0
    good = (tmp_path / "f.flo").read_bytes()
    for bad in (b"XXXX" + good[4:], good[:4] + (2**31 - 1).to_bytes(4, "little") + good[8:], good[:-1], good[:6]):
        (tmp_path / "bad.flo").write_bytes(bad)
        try:
            read_flo(tmp_path / "bad.flo")
        except FormatError:
            rejected += 1
    white = bool((flow_to_color(np.zeros((8, 8, 2))) == 1.0).all())
    ok = flo_ok and kitti_ok and rejected == 4 and white
    report(10, ok, f".flo exact {flo_ok}, KITTI exact {kitti_ok} (100 flows each), malformed rejected {rejected}/4, zero flow white {white}")
    assert ok


def test_criterion_11_cli_determinism(tmp_path):
    from flowattack.cli import main

    config = ROOT / "configs" / "paper_defaults.yaml"
    digests = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["attack", "--config", str(config), "--out", str(out), "--scene", "000", "--seed", "7", "--no-cache"]) == 0
        root = out / "attack" / "000"
        files = sorted(p for p in root.rglob("*") if p.suffix in (".csv", ".flo"))
        digests.append({str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest() for p in files})
    ok = digests[0] == digests[1] and len(digests[0]) > 0
    report(11, ok, f"{len(digests[0])} CSV/.flo files byte-identical across two runs: {digests[0] == digests[1]}")
    assert ok


if __name__ == "__main__":  # pragma: no cover
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
