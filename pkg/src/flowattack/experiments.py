"""Experiment recipes: suite attacks, alpha sweeps, transfer matrices, detection curves.

Everything here is deterministic given the config.  Attack results are
cached by a hash of (scene content, model parameters, attack parameters),
in memory and optionally on disk, so recipes that share attacks reuse them
and produce identical numbers either way.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from sklearn.base import clone

from .attack import AttackResult, ConsistentFlowAttack, run_attack
from .defense import DEFAULT_MAGNITUDES, DETECTION_METHODS, CurvePoint, detection_score, downstream_impact
from .flowio import read_flo, read_image_png, read_label_png
from .flowmodel import HornSchunckFlow, estimate_flow, model_family
from .metrics import epe_masked, per_category_report
from .scenegen import SceneSpec, render, scene_suite

__all__ = [
    "AttackCache",
    "ExperimentConfig",
    "Scene",
    "blackbox_matrix",
    "detect_curves",
    "load_scenes",
    "run_suite",
    "sweep_alpha",
]

log = logging.getLogger(__name__)

DEFAULT_ALPHAS = (0.01, 0.1, 1.0, 10.0, 100.0)
DOWNSTREAMS = ("ttc_error", "target_epe")


@dataclass
class Scene:
    id: str
    I1: np.ndarray
    I2: np.ndarray
    labels: np.ndarray
    gt_flow: np.ndarray | None = None

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.I1, self.I2, self.labels):
            a = np.ascontiguousarray(arr)
            h.update(str((a.dtype.str, a.shape)).encode())
            h.update(a.tobytes())
        return h.hexdigest()[:16]


def synthetic_scenes(count=20, base_seed=0, size=64) -> list[Scene]:
    out = []
    for k, spec in enumerate(scene_suite(count, base_seed, size)):
        inst = render(spec)
        out.append(Scene(f"{k:03d}", inst.I1, inst.I2, inst.labels, inst.gt_flow))
    return out


def directory_scenes(path) -> list[Scene]:
    """Scenes stored KITTI-style: ``NNN_10.png``, ``NNN_11.png``, ``NNN_sem.png``, optional ``NNN_flow.flo``."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"scene directory {root} does not exist")
    ids = sorted(p.name[: -len("_10.png")] for p in root.glob("*_10.png"))
    if not ids:
        raise FileNotFoundError(f"no *_10.png frames found in {root}")
    scenes = []
    for sid in ids:
        f2 = root / f"{sid}_11.png"
        sem = root / f"{sid}_sem.png"
        for p in (f2, sem):
            if not p.exists():
                raise FileNotFoundError(f"scene {sid}: missing file {p}")
        flo = root / f"{sid}_flow.flo"
        gt = read_flo(flo).astype(np.float64) if flo.exists() else None
        scenes.append(Scene(sid, read_image_png(root / f"{sid}_10.png"), read_image_png(f2), read_label_png(sem), gt))
    return scenes


def load_scenes(scene_cfg: dict) -> list[Scene]:
    source = scene_cfg.get("source", "synthetic")
    if source == "synthetic":
        return synthetic_scenes(
            int(scene_cfg.get("count", 20)), int(scene_cfg.get("base_seed", 0)), int(scene_cfg.get("size", 64))
        )
    if source == "specs":
        return [
            Scene(f"spec{k:03d}", inst.I1, inst.I2, inst.labels, inst.gt_flow)
            for k, inst in enumerate(render(SceneSpec.from_dict(d)) for d in scene_cfg["specs"])
        ]
    if source == "directory":
        return directory_scenes(scene_cfg["path"])
    raise ValueError(f"unknown scene source {source!r}")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    scenes: dict = field(default_factory=lambda: {"source": "synthetic", "count": 20, "base_seed": 0, "size": 64})
    model: dict = field(default_factory=dict)
    family_count: int = 4
    attacks: dict = field(default_factory=dict)  # name -> attack params
    sweep: dict = field(default_factory=dict)
    blackbox: dict = field(default_factory=dict)
    detect: dict = field(default_factory=dict)
    ttc_window: int = 5
    output_dir: str = "results"
    formats: tuple = ("csv", "json")
    workers: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        attacks = d.get("attacks") or []
        if isinstance(attacks, list):
            named = {}
            for k, a in enumerate(attacks):
                a = dict(a)
                name = a.pop("name", f"attack{k}")
                if name in named:
                    raise ValueError(f"duplicate attack name {name!r}")
                named[name] = a
            attacks = named
        if not attacks:
            raise ValueError("config needs at least one attack")
        cfg = cls(
            scenes=dict(d.get("scenes") or cls().scenes),
            model=dict(d.get("model") or {}),
            family_count=int((d.get("family") or {}).get("count", 4)),
            attacks={k: dict(v) for k, v in attacks.items()},
            sweep=dict(d.get("sweep") or {}),
            blackbox=dict(d.get("blackbox") or {}),
            detect=dict(d.get("detect") or {}),
            ttc_window=int((d.get("ttc") or {}).get("window", 5)),
            output_dir=str((d.get("output") or {}).get("dir", "results")),
            formats=tuple((d.get("output") or {}).get("formats", ("csv", "json"))),
            workers=int(d.get("workers", 1)),
        )
        # Fail early on bad parameters.
        cfg.flow_model()
        for name in cfg.attacks:
            cfg.attack(name)
        return cfg

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file {path} does not exist")
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def to_dict(self) -> dict:
        return {
            "scenes": self.scenes,
            "model": self.flow_model().get_params(),
            "family": {"count": self.family_count},
            "attacks": [{"name": k, **self.attack(k).get_params()} for k in self.attacks],
            "sweep": self.sweep,
            "blackbox": self.blackbox,
            "detect": self.detect,
            "ttc": {"window": self.ttc_window},
            "output": {"dir": self.output_dir, "formats": list(self.formats)},
            "workers": self.workers,
        }

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()

    def flow_model(self) -> HornSchunckFlow:
        m = HornSchunckFlow(**self.model)
        m._check_params()
        return m

    def attack(self, name) -> ConsistentFlowAttack:
        if name not in self.attacks:
            raise ValueError(f"unknown attack {name!r}; configured: {sorted(self.attacks)}")
        return ConsistentFlowAttack(**self.attacks[name]).validate()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        out = ExperimentConfig.from_dict(self.to_dict())
        for params in out.attacks.values():
            params["rng_seed"] = int(seed)
        return out


# ---------------------------------------------------------------------------
# cached attack execution
# ---------------------------------------------------------------------------


def result_key(scene: Scene, model: HornSchunckFlow, attack: ConsistentFlowAttack) -> str:
    blob = json.dumps(
        {"scene": scene.digest(), "model": model.get_params(), "attack": attack.get_params()},
        sort_keys=True,
        default=str,
    ).encode()
    return hashlib.sha256(blob).hexdigest()[:24]


class AttackCache:
    """Memoises attack results in memory and, when ``directory`` is set, as ``.npz`` files."""

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory is not None else None
        self._mem: dict[str, AttackResult] = {}
        self.hits = 0

    def get(self, key):
        if key in self._mem:
            self.hits += 1
            return self._mem[key]
        if self.directory is not None:
            path = self.directory / f"{key}.npz"
            if path.exists():
                self.hits += 1
                res = _load_result(path)
                self._mem[key] = res
                return res
        return None

    def put(self, key, result: AttackResult):
        self._mem[key] = result
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
            _save_result(self.directory / f"{key}.npz", result)


def _save_result(path, r: AttackResult):
    tmp = Path(str(path) + ".tmp.npz")
    np.savez(
        tmp,
        perturbed_image=r.perturbed_image,
        attacked_flow=r.attacked_flow,
        original_flow=r.original_flow,
        target_mask=r.target_mask,
        perturb_mask=r.perturb_mask,
        meta=np.array(
            json.dumps(
                {
                    "iterations": r.iterations,
                    "final_mean_abs_perturbation": r.final_mean_abs_perturbation,
                    "converged": r.converged,
                }
            )
        ),
    )
    os.replace(tmp, path)


def _load_result(path) -> AttackResult:
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        return AttackResult(
            perturbed_image=z["perturbed_image"],
            attacked_flow=z["attacked_flow"],
            original_flow=z["original_flow"],
            target_mask=z["target_mask"],
            perturb_mask=z["perturb_mask"],
            iterations=meta["iterations"],
            final_mean_abs_perturbation=meta["final_mean_abs_perturbation"],
            converged=meta["converged"],
        )


def _attack_job(args):
    scene, attack, model = args
    try:
        return run_attack(scene.I1, scene.I2, scene.labels, attack, model)
    except Exception as exc:
        raise type(exc)(f"scene {scene.id}: {exc}") from exc


def run_suite(scenes, attack, model=None, cache: AttackCache | None = None, workers: int = 1) -> list[AttackResult]:
    """Attack every scene with one configuration; results follow scene order."""
    model = HornSchunckFlow() if model is None else model
    cache = AttackCache() if cache is None else cache
    keys = [result_key(s, model, attack) for s in scenes]
    results: list[AttackResult | None] = [cache.get(k) for k in keys]
    todo = [i for i, r in enumerate(results) if r is None]
    jobs = [(scenes[i], attack, model) for i in todo]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            fresh = list(pool.map(_attack_job, jobs))
    else:
        fresh = [_attack_job(j) for j in jobs]
    for i, res in zip(todo, fresh):
        cache.put(keys[i], res)
        results[i] = res
    return results


def _off_target_mask(scene: Scene, result: AttackResult):
    from .labels import VOID

    return (scene.labels != VOID) & ~result.target_mask


def suite_epes(scenes, results) -> tuple[np.ndarray, np.ndarray]:
    """Per-scene on-target and pixel-weighted off-target EPE."""
    on, off = [], []
    for s, r in zip(scenes, results):
        rep = per_category_report(r.attacked_flow, r.original_flow, s.labels, _target_name(r, s))
        on.append(rep.on_target_epe)
        off.append(rep.off_target_epe)
    return np.array(on, dtype=float), np.array(off, dtype=float)


def _target_name(result, scene):
    from .labels import category_name

    ids = np.unique(scene.labels[result.target_mask])
    return category_name(int(ids[0]))


# ---------------------------------------------------------------------------
# recipes
# ---------------------------------------------------------------------------


def sweep_alpha(scenes, template: ConsistentFlowAttack, alphas=DEFAULT_ALPHAS, model=None, cache=None, workers=1):
    """Suite-mean on/off-target EPE per alpha; the first row is the alpha=0 baseline."""
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise ValueError("alpha list is empty")
    if any(a <= 0 for a in alphas) or any(b <= a for a, b in zip(alphas, alphas[1:])):
        raise ValueError("alphas must be positive and strictly ascending")
    rows = []
    for a in [0.0] + alphas:
        res = run_suite(scenes, clone(template).set_params(alpha=a), model, cache, workers)
        on, off = suite_epes(scenes, res)
        rows.append(
            {
                "alpha": a,
                "on_target_epe": float(on.mean()),
                "off_target_epe": float(off.mean()),
                "converged": int(sum(r.converged for r in res)),
                "n_scenes": len(scenes),
            }
        )
    return rows


def blackbox_matrix(scenes, template: ConsistentFlowAttack, family, cache=None, workers=1, per_scene=False):
    """``M[s, t]``: suite-mean on-target EPE of attacks crafted on ``family[s]`` and evaluated on ``family[t]``.

    With ``per_scene`` the unaveraged ``(n, n, len(scenes))`` array is returned.
    """
    if len(family) < 2:
        raise ValueError("a transfer matrix needs at least two models")
    n = len(family)
    full = np.zeros((n, n, len(scenes)))
    clean = [[estimate_flow(s.I1, s.I2, m) for s in scenes] for m in family]
    for si, src in enumerate(family):
        res = run_suite(scenes, template, src, cache, workers)
        for ti, tgt in enumerate(family):
            for k, (scene, r) in enumerate(zip(scenes, res)):
                attacked = r.attacked_flow if ti == si else estimate_flow(r.perturbed_image, scene.I2, tgt)
                full[si, ti, k] = epe_masked(attacked, clean[ti][k], r.target_mask)
    return full if per_scene else full.mean(axis=2)


def detect_curves(
    scenes,
    templates,
    magnitudes=DEFAULT_MAGNITUDES,
    methods=DETECTION_METHODS,
    downstreams=DOWNSTREAMS,
    model=None,
    cache=None,
    workers=1,
    ttc_window=5,
) -> list[CurvePoint]:
    """One curve per (method, template alpha, downstream), sharing the attacks between them."""
    model = HornSchunckFlow() if model is None else model
    magnitudes = [float(m) for m in magnitudes]
    if not magnitudes:
        raise ValueError("magnitude list is empty")
    if any(m <= 0 for m in magnitudes) or any(b <= a for a, b in zip(magnitudes, magnitudes[1:])):
        raise ValueError("magnitudes must be positive and strictly ascending")
    for m in methods:
        if m not in DETECTION_METHODS:
            raise ValueError(f"unknown detection method {m!r}")
    for d in downstreams:
        if d not in DOWNSTREAMS:
            raise ValueError(f"unknown downstream measure {d!r}")
    points = []
    for template in templates:
        for mag in magnitudes:
            cfg = clone(template).set_params(budget=mag)
            res = run_suite(scenes, cfg, model, cache, workers)
            scores = {m: [] for m in methods}
            impacts = {d: [] for d in downstreams}
            for scene, r in zip(scenes, res):
                for m in methods:
                    scores[m].append(detection_score(m, r.perturbed_image, scene.I2, r.attacked_flow, model).value)
                for d in downstreams:
                    impacts[d].append(
                        downstream_impact(d, r.attacked_flow, r.original_flow, r.target_mask, ttc_window)
                    )
            for m in methods:
                for d in downstreams:
                    points.append(
                        TaggedCurvePoint(
                            m, float(template.alpha), mag, float(np.mean(scores[m])), float(np.mean(impacts[d])), d
                        )
                    )
    return points


@dataclass(frozen=True)
class TaggedCurvePoint(CurvePoint):
    """A curve point that also records which downstream measure ``impact`` is."""

    downstream: str = "ttc_error"
