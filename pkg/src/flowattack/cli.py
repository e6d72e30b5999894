"""Command-line experiment runner.

Every command that reads a config writes a ``manifest.json`` next to its
outputs recording the config hash, so results can be traced back to the
exact settings that produced them.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml
from sklearn.base import clone

from . import __version__
from .attack import AttackError, run_attack
from .experiments import (
    AttackCache,
    ExperimentConfig,
    blackbox_matrix,
    detect_curves,
    load_scenes,
    result_key,
    run_suite,
    sweep_alpha,
)
from .flowio import (
    flow_to_color,
    perturbation_heatmap,
    read_flo,
    read_image_png,
    read_kitti_png,
    write_flo,
    write_image_png,
    write_label_png,
    write_ttc_map,
)
from .flowmodel import model_family
from .metrics import per_category_report, perturbation_norms
from .scenegen import render, scene_suite
from .ttc import ttc_colormap, ttc_error, ttc_from_flow

log = logging.getLogger("flowattack")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_yaml(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "workers", None) is not None:
        cfg.workers = int(args.workers)
    return cfg


def _out_dir(args, cfg: ExperimentConfig | None) -> Path:
    out = Path(args.out) if args.out else Path(cfg.output_dir if cfg else "results")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cache(args, out: Path) -> AttackCache:
    return AttackCache(None if getattr(args, "no_cache", False) else out / "cache")


def _write_manifest(out: Path, cfg: ExperimentConfig, command: str, **extra):
    manifest = {
        "command": command,
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "version": __version__,
        **extra,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _write_csv(path, rows, fieldnames):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: _fmt(r[k]) for k in fieldnames})


def _fmt(x):
    # repr keeps full float precision, so reruns compare byte for byte.
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def _pick_scene(scenes, ident):
    if ident is None:
        return scenes[0]
    for s in scenes:
        if s.id == str(ident):
            return s
    if str(ident).isdigit() and int(ident) < len(scenes):
        return scenes[int(ident)]
    raise ValueError(f"scene {ident!r} not found; available: {', '.join(s.id for s in scenes[:10])}...")


def _attack_names(cfg, requested):
    names = requested or list(cfg.attacks)
    for n in names:
        cfg.attack(n)
    return names


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_attack(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    scene = _pick_scene(load_scenes(cfg.scenes), args.scene)
    model = cfg.flow_model()
    cache = _cache(args, out)
    root = out / "attack" / scene.id
    root.mkdir(parents=True, exist_ok=True)
    for name in _attack_names(cfg, args.attack):
        attack = cfg.attack(name)
        try:
            # The trace only exists for a fresh run, so the cache is written but not read here.
            res = run_attack(scene.I1, scene.I2, scene.labels, attack, model)
        except (ValueError, AttackError) as exc:
            raise type(exc)(f"scene {scene.id}, attack {name}: {exc}") from exc
        cache.put(result_key(scene, model, attack), res)
        d = root / name
        d.mkdir(exist_ok=True)
        write_image_png(d / "perturbed.png", res.perturbed_image, bits=16)
        write_flo(d / "attacked.flo", res.attacked_flow)
        write_flo(d / "original.flo", res.original_flow)
        vmax = float(np.percentile(np.linalg.norm(res.original_flow, axis=-1), 99)) or 1.0
        write_image_png(d / "flow_original.png", flow_to_color(res.original_flow, vmax))
        write_image_png(d / "flow_attacked.png", flow_to_color(res.attacked_flow, vmax))
        write_image_png(d / "perturbation.png", perturbation_heatmap(res.perturbed_image, scene.I1))
        _write_csv(
            d / "trace.csv",
            res.iterations,
            ["iter", "l_attack", "l_consistency", "l_total", "step_size", "mean_abs_perturbation"],
        )
        report = per_category_report(res.attacked_flow, res.original_flow, scene.labels, attack.target_category)
        report.write_csv(d / "report.csv")
        report.write_json(d / "report.json")
        _write_json(
            d / "summary.json",
            {
                "scene": scene.id,
                "attack": name,
                "params": attack.get_params(),
                "converged": res.converged,
                "iterations": len(res.iterations),
                "final_mean_abs_perturbation": res.final_mean_abs_perturbation,
                **perturbation_norms(res.perturbed_image, scene.I1, res.perturb_mask),
            },
        )
        print(
            f"{scene.id}/{name}: on-target EPE {report.on_target_epe:.4f}, "
            f"off-target EPE {report.off_target_epe:.4f}, "
            f"{len(res.iterations)} iters{'' if res.converged else ' (not converged)'}"
        )
    _write_manifest(root, cfg, "attack", scene=scene.id)
    return 0


def cmd_sweep_alpha(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    scenes = load_scenes(cfg.scenes)
    template = cfg.attack(cfg.sweep.get("attack", next(iter(cfg.attacks))))
    alphas = args.alphas or cfg.sweep.get("alphas", [0.01, 0.1, 1, 10, 100])
    rows = sweep_alpha(scenes, template, alphas, cfg.flow_model(), _cache(args, out), cfg.workers)
    _write_csv(out / "sweep_alpha.csv", rows, ["alpha", "on_target_epe", "off_target_epe", "converged", "n_scenes"])
    _write_manifest(out, cfg, "sweep-alpha")
    for r in rows:
        print(f"alpha={r['alpha']:g}: on {r['on_target_epe']:.4f}  off {r['off_target_epe']:.4f}")
    return 0


def cmd_blackbox(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    scenes = load_scenes(cfg.scenes)
    family = model_family(cfg.flow_model(), cfg.family_count)
    cache = _cache(args, out)
    names = args.attack or cfg.blackbox.get("attacks", list(cfg.attacks))
    labels = [f"m{i}" for i in range(len(family))]
    with open(out / "blackbox_family.json", "w") as fh:
        json.dump({l: m.get_params() for l, m in zip(labels, family)}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for name in names:
        mat = blackbox_matrix(scenes, cfg.attack(name), family, cache, cfg.workers)
        rows = [{"source": l, **{t: mat[i, j] for j, t in enumerate(labels)}} for i, l in enumerate(labels)]
        _write_csv(out / f"blackbox_{name}.csv", rows, ["source", *labels])
        off = mat[~np.eye(len(family), dtype=bool)].mean()
        print(f"{name}: white-box mean {np.diag(mat).mean():.4f}, transfer mean {off:.4f}")
    _write_manifest(out, cfg, "blackbox")
    return 0


def cmd_detect(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    scenes = load_scenes(cfg.scenes)
    d = cfg.detect
    names = args.attack or d.get("attacks", list(cfg.attacks))
    templates = [cfg.attack(n) for n in names]
    points = detect_curves(
        scenes,
        templates,
        d.get("magnitudes", [m * 1e-3 for m in (0.2, 0.4, 1.2, 2, 3.2, 4, 6, 8)]),
        d.get("methods", ["warping", "gaussian", "median"]),
        d.get("downstream", ["ttc_error", "target_epe"]),
        cfg.flow_model(),
        _cache(args, out),
        cfg.workers,
        cfg.ttc_window,
    )
    curves_dir = out / "detect"
    curves_dir.mkdir(exist_ok=True)
    fields = ["method", "alpha", "downstream", "magnitude", "detection_score", "impact"]
    rows = [{k: getattr(p, k) for k in fields} for p in points]
    _write_csv(out / "detect_curves.csv", rows, fields)
    groups = {}
    for r in rows:
        groups.setdefault((r["method"], r["alpha"], r["downstream"]), []).append(r)
    for (method, alpha, downstream), grp in groups.items():
        _write_csv(curves_dir / f"{method}_alpha{alpha:g}_{downstream}.csv", grp, fields[3:])
    _write_manifest(out, cfg, "detect", curves=len(groups))
    print(f"wrote {len(groups)} curves to {curves_dir}")
    return 0


def cmd_ttc(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    scene = _pick_scene(load_scenes(cfg.scenes), args.scene)
    model = cfg.flow_model()
    cache = _cache(args, out)
    root = out / "ttc" / scene.id
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    T_o = None
    for name in _attack_names(cfg, args.attack):
        res = run_suite([scene], cfg.attack(name), model, cache)[0]
        if T_o is None:
            T_o = ttc_from_flow(res.original_flow, cfg.ttc_window)
            valid = T_o.ttc[T_o.valid]
            vmin, vmax = (float(valid.min()), float(valid.max())) if valid.size else (None, None)
            write_ttc_map(root / "ttc_original.tiff", T_o)
            write_image_png(root / "ttc_original.png", ttc_colormap(T_o, vmin, vmax))
        T_a = ttc_from_flow(res.attacked_flow, cfg.ttc_window)
        write_ttc_map(root / f"ttc_{name}.tiff", T_a)
        write_image_png(root / f"ttc_{name}.png", ttc_colormap(T_a, vmin, vmax))
        err_t, churn_t = ttc_error(T_a, T_o, res.target_mask, return_churn=True)
        err_all, churn_all = ttc_error(T_a, T_o, return_churn=True)
        rows.append(
            {"attack": name, "target_error": err_t, "target_churn": churn_t, "image_error": err_all, "image_churn": churn_all}
        )
        print(f"{scene.id}/{name}: target TTC error {err_t:.4f}, whole-image {err_all:.4f}")
    _write_csv(root / "ttc_error.csv", rows, ["attack", "target_error", "target_churn", "image_error", "image_churn"])
    _write_manifest(root, cfg, "ttc", scene=scene.id)
    return 0


def cmd_viz(args) -> int:
    out = Path(args.out or "viz.png")
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.flo or args.kitti:
        flow = read_flo(args.flo).astype(np.float64) if args.flo else read_kitti_png(args.kitti)[0]
        write_image_png(out, flow_to_color(flow, args.max_magnitude))
    elif args.image and args.reference:
        write_image_png(out, perturbation_heatmap(read_image_png(args.image), read_image_png(args.reference)))
    else:
        raise ValueError("viz needs --flo, --kitti, or both --image and --reference")
    print(f"wrote {out}")
    return 0


def cmd_gen_scenes(args) -> int:
    cfg = _load_config(args) if args.config else None
    out = _out_dir(args, None) if args.out else Path("scenes")
    out.mkdir(parents=True, exist_ok=True)
    scfg = dict(cfg.scenes) if cfg else {"source": "synthetic", "count": 20, "base_seed": 0, "size": 64}
    if scfg.get("source", "synthetic") != "synthetic":
        raise ValueError("gen-scenes needs a synthetic scene source")
    count = int(args.count if args.count is not None else scfg.get("count", 20))
    base_seed = int(args.seed if args.seed is not None else scfg.get("base_seed", 0))
    specs = scene_suite(count, base_seed, int(scfg.get("size", 64)))
    for k, spec in enumerate(specs):
        inst = render(spec)
        sid = f"{k:03d}"
        write_image_png(out / f"{sid}_10.png", inst.I1, bits=16)
        write_image_png(out / f"{sid}_11.png", inst.I2, bits=16)
        write_label_png(out / f"{sid}_sem.png", inst.labels)
        write_flo(out / f"{sid}_flow.flo", inst.gt_flow)
    with open(out / "scenes.yaml", "w") as fh:
        yaml.safe_dump({"count": count, "base_seed": base_seed, "specs": [s.to_dict() for s in specs]}, fh, sort_keys=True)
    print(f"wrote {count} scenes to {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowattack", description="Targeted consistent attacks on optical flow.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True, scene=False, attack=False):
        sp.add_argument("--config", required=config_required, help="experiment YAML file")
        sp.add_argument("--out", help="output directory (overrides the config)")
        sp.add_argument("--seed", type=int, help="attack noise seed (overrides every attack's rng_seed)")
        sp.add_argument("--workers", type=int, help="parallel scene workers")
        sp.add_argument("--no-cache", action="store_true", help="do not read or write the attack cache")
        if scene:
            sp.add_argument("--scene", help="scene id or index (default: first scene)")
        if attack:
            sp.add_argument("--attack", action="append", help="attack name from the config (repeatable)")
        return sp

    common(sub.add_parser("attack", help="attack one scene, write images, flows and reports"), scene=True, attack=True).set_defaults(
        func=cmd_attack
    )
    sp = common(sub.add_parser("sweep-alpha", help="suite EPE as a function of alpha"))
    sp.add_argument("--alphas", type=float, nargs="+", help="positive ascending alpha grid")
    sp.set_defaults(func=cmd_sweep_alpha)
    common(sub.add_parser("blackbox", help="transfer matrix over a model family"), attack=True).set_defaults(
        func=cmd_blackbox
    )
    common(sub.add_parser("detect", help="detection score versus impact curves"), attack=True).set_defaults(
        func=cmd_detect
    )
    common(sub.add_parser("ttc", help="time-to-collision maps and errors for one scene"), scene=True, attack=True).set_defaults(
        func=cmd_ttc
    )

    sp = sub.add_parser("viz", help="render a flow file or a perturbation heatmap")
    sp.add_argument("--out", help="output PNG")
    sp.add_argument("--flo", help=".flo file to colour-code")
    sp.add_argument("--kitti", help="KITTI flow PNG to colour-code")
    sp.add_argument("--max-magnitude", type=float, help="saturation magnitude (default: 99th percentile)")
    sp.add_argument("--image", help="perturbed image PNG")
    sp.add_argument("--reference", help="clean image PNG")
    sp.set_defaults(func=cmd_viz)

    sp = common(sub.add_parser("gen-scenes", help="export the synthetic suite as PNG + .flo + label files"), config_required=False)
    sp.add_argument("--count", type=int, help="number of scenes (overrides the config)")
    sp.set_defaults(func=cmd_gen_scenes)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, AttackError, yaml.YAMLError) as exc:
        # FormatError and FileNotFoundError land here too.
        print(f"flowattack {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
