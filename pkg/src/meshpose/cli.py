"""Batch-experiment command line: dataset generation, source training,
adaptation, evaluation and theorem checks.

Every command is a pure function of (config, input artifacts, seed): reruns
write byte-identical outputs for any --threads value.  Exit codes: 0 success,
2 config error, 3 data error, 4 starvation / support violation.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import config as cfgmod
from . import synth
from .adaptation import AdaptationConfig, MatchStarvationError, adapt, calibrate_thresholds
from .inference import InferenceOpts, build_pose_bank
from .meshmodel import ClutterModel, NeuralMesh, load_model, save_model
from .partition import (
    LabeledSampleSet,
    SupportError,
    VertexPartition,
    build_sample_set,
    check_support,
    discover_partition,
    elicit_domain,
    global_pseudo_label_subset,
    k_delta_subset,
)
from .synth import DataError, DomainSpec, generate_source, generate_target, shift_model
from .training import FeatureExtractor, Model, evaluate, robust_vertex_ratio, train_source

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_ASSUMPTION = 4

# Sub-seeds for dataset-level draws, disjoint from per-scene indices.
_MODEL_TAG = 1
_SHIFT_TAG = 2


def _model_rng(seed, tag):
    return np.random.default_rng(np.random.SeedSequence((int(seed), 2**31 + tag)))


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=None, separators=(",", ":"))


def _write_csv(path, rows):
    with open(path, "w") as fh:
        for row in rows:
            fh.write(",".join(str(x) for x in row) + "\n")


def _true_model(cfg):
    geometry = cfgmod.mesh_of(cfg)
    return synth.random_true_model(
        geometry,
        int(cfg["d"]),
        int(cfg["model"]["n_clutter"]),
        float(cfg["model"]["kappa"]),
        float(cfg["model"]["kappa_prime"]),
        _model_rng(cfg["seed"], _MODEL_TAG),
    )


def _domain_spec(cfg) -> DomainSpec:
    t = cfg["target"]
    return DomainSpec(
        robust_fraction=float(t["robust_fraction"]),
        robust_subset=None
        if t["robust_subset"] is None
        else tuple(t["robust_subset"]),
        perturb_deg=tuple(t["perturb_deg"]),
        data_kappa=t["data_kappa"],
        occlusion_level=t["occlusion"],
        clutter_swap=bool(t["clutter_swap"]),
        extractor_drift=bool(t["extractor_drift"]),
        drift_scale=float(t["drift_scale"]),
    )


def cmd_gen(args) -> int:
    cfg = cfgmod.load_config(args.config)
    cam = cfgmod.camera_of(cfg)
    ranges = cfgmod.ranges_of(cfg)
    mesh_true, clutter_true = _true_model(cfg)
    out = args.out or os.path.join(cfg["output_dir"], args.kind)
    meta = {"kind": args.kind, "seed": cfg["seed"], "d": cfg["d"]}
    if args.kind == "source":
        scenes = generate_source(
            mesh_true,
            clutter_true,
            cam,
            int(cfg["source"]["n_scenes"]),
            cfg["source"]["data_kappa"],
            seed=cfg["seed"],
            ranges=ranges,
        )
        synth.write_dataset(out, scenes, meta, sealed=False)
    else:
        spec = _domain_spec(cfg)
        mesh_t, clutter_t, robust = shift_model(
            mesh_true, clutter_true, spec, _model_rng(cfg["seed"], _SHIFT_TAG)
        )
        meta["robust_subset"] = robust.tolist()
        scenes, sealed = generate_target(
            mesh_t,
            clutter_t,
            spec,
            cam,
            int(cfg["target"]["n_scenes"]),
            seed=cfg["seed"] + 1,
            ranges=ranges,
        )
        synth.write_dataset(out, sealed.labeled(), meta, sealed=True)
    print(f"gen: wrote {args.kind} dataset to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = cfgmod.load_config(args.config)
    cam = cfgmod.camera_of(cfg)
    geometry = cfgmod.mesh_of(cfg)
    scenes, _ = synth.read_dataset(args.dataset, with_labels=True)
    if not scenes or not isinstance(scenes[0], synth.Scene):
        raise DataError("training needs a labeled dataset")
    t = cfg["training"]
    tcfg_kwargs = dict(
        lam=float(t["lam"]),
        mu=float(t["mu"]),
        epochs=int(t["epochs"]),
        batch_size=int(t["batch_size"]),
        lr=float(t["lr"]),
        fixed_kappa=bool(t["fixed_kappa"]),
        kappa=float(cfg["model"]["kappa"]),
        kappa_prime=float(cfg["model"]["kappa_prime"]),
        n_clutter=int(cfg["model"]["n_clutter"]),
        clutter_restarts=int(t["clutter_restarts"]),
        bg_subsample=int(t["bg_subsample"]),
        w_steps_per_epoch=int(t["w_steps_per_epoch"]),
        seed=int(cfg["seed"]),
    )
    from .training import TrainingConfig

    model, history = train_source(scenes, geometry, cam, int(cfg["d"]), TrainingConfig(**tcfg_kwargs))
    thresholds = calibrate_thresholds(
        model,
        scenes,
        cam,
        quantile=float(cfg["adaptation"]["quantile"]),
        default=float(cfg["adaptation"]["default_delta"]),
    )
    save_model(
        args.out, model.mesh, model.clutter, model.extractor.w, thresholds
    )
    if args.curve:
        rows = [["epoch", "l_total", "l_neural", "l_clutter", "l_contrastive"]]
        rows += [
            [r["epoch"], f"{r['l_total']:.9g}", f"{r['l_neural']:.9g}",
             f"{r['l_clutter']:.9g}", f"{r['l_contrastive']:.9g}"]
            for r in history["curve"]
        ]
        _write_csv(args.curve, rows)
    print(f"train: wrote model to {args.out}")
    return EXIT_OK


def _load_model_bundle(path) -> Model:
    mesh, clutter, w, thresholds = load_model(path)
    extractor = (
        FeatureExtractor(w) if w is not None else FeatureExtractor.identity(mesh.dim)
    )
    return Model(mesh=mesh, clutter=clutter, extractor=extractor, thresholds=thresholds)


def cmd_adapt(args) -> int:
    cfg = cfgmod.load_config(args.config)
    cam = cfgmod.camera_of(cfg)
    model = _load_model_bundle(args.model)
    scenes, _ = synth.read_dataset(args.dataset, with_labels=False)
    target = synth.strip_labels(scenes) if scenes and isinstance(scenes[0], synth.Scene) else scenes
    a = cfg["adaptation"]
    acfg = AdaptationConfig(
        alpha=float(a["alpha"]),
        psi=float(a["psi"]),
        batch_size=int(a["batch_size"]),
        epochs=int(a["epochs"]),
        drop_threshold=float(a["drop_threshold"]),
        recompute_kappa=bool(a["recompute_kappa"]),
        adaptive_batch=bool(a["adaptive_batch"]),
        target_coverage=float(a["target_coverage"]),
        lr=float(a["lr"]),
        fixed_kappa=a["fixed_kappa"],
        match_mode=a["match_mode"],
        warm_start=bool(a["warm_start"]),
        drift_tol_deg=float(a["drift_tol_deg"]),
        drift_window=int(a["drift_window"]),
        seed=int(cfg["seed"]),
        infer=cfgmod.inference_opts_of(cfg, max_iters=a["max_iters"]),
    )
    bank = build_pose_bank(model.mesh, cam, cfgmod.grid_of(cfg))
    adapted, history = adapt(
        model, target, acfg, cam, bank=bank, threads=args.threads
    )
    save_model(
        args.out,
        adapted.mesh,
        adapted.clutter,
        adapted.extractor.w,
        adapted.thresholds,
    )
    if args.history:
        _write_csv(args.history, history.to_csv_rows())
    print(f"adapt: wrote adapted model to {args.out} ({len(history.rows)} epochs)")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = cfgmod.load_config(args.config)
    cam = cfgmod.camera_of(cfg)
    model = _load_model_bundle(args.model)
    scenes, _ = synth.read_dataset(args.dataset, with_labels=True)
    if not scenes or not isinstance(scenes[0], synth.Scene):
        raise DataError("evaluation needs ground-truth poses (labeled or sealed)")
    opts = cfgmod.inference_opts_of(cfg)
    bank = build_pose_bank(model.mesh, cam, cfgmod.grid_of(cfg))
    metrics, records, estimates = evaluate(
        model, scenes, opts, bank=bank, threads=args.threads
    )
    _write_json(
        args.metrics,
        {
            "acc_pi6": metrics.acc_pi6,
            "acc_pi18": metrics.acc_pi18,
            "median_error_deg": math.degrees(metrics.median_error),
            "n": metrics.n,
        },
    )
    if args.per_scene:
        rows = [["scene_id", "error_deg", "loss"]]
        rows += [
            [r["scene_id"], f"{math.degrees(r['error']):.6f}", f"{r['loss']:.9g}"]
            for r in records
        ]
        _write_csv(args.per_scene, rows)
    if args.histogram:
        hist = robust_vertex_ratio(
            model,
            scenes,
            float(cfg["eval"]["delta"]),
            int(cfg["eval"]["bins"]),
            opts,
            bank=bank,
            estimates=estimates,
        )
        rows = [["bin_center_deg", "ratio", "count"]]
        rows += [
            [f"{math.degrees(c):.3f}", f"{ratio:.6f}", n] for c, ratio, n in hist
        ]
        _write_csv(args.histogram, rows)
    print(
        f"eval: acc_pi6={metrics.acc_pi6:.4f} acc_pi18={metrics.acc_pi18:.4f} "
        f"median={math.degrees(metrics.median_error):.2f}deg n={metrics.n}"
    )
    return EXIT_OK


def _partition_from_arg(arg, sample_set, delta, seed) -> VertexPartition:
    if arg.startswith("auto:"):
        k = int(arg.split(":", 1)[1])
        return discover_partition(
            sample_set, delta, k, np.random.default_rng((seed, 777))
        )
    with open(arg) as fh:
        spec = json.load(fh)
    return VertexPartition(
        blocks=tuple(tuple(b) for b in spec["blocks"]),
        n_vertices=sample_set.n_vertices,
    )


def cmd_theorem_check(args) -> int:
    cfg = cfgmod.load_config(args.config)
    cam = cfgmod.camera_of(cfg)
    model = _load_model_bundle(args.model)
    scenes, _ = synth.read_dataset(args.dataset, with_labels=True)
    if not scenes or not isinstance(scenes[0], synth.Scene):
        raise DataError("theorem check needs ground-truth poses for correspondences")
    delta = (
        model.thresholds
        if model.thresholds is not None
        else float(cfg["adaptation"]["default_delta"])
    )
    sample_set = build_sample_set(model, scenes, cam)
    partition = _partition_from_arg(args.partition, sample_set, delta, cfg["seed"])
    ok, counts = check_support(sample_set, partition, delta)
    global_subset = global_pseudo_label_subset(sample_set, delta, omega=1.0)
    verdict = {
        "K": partition.k,
        "per_k_counts": counts,
        "global_count": len(global_subset),
        "elicited_count": 0,
        "all_elicited_pass": False,
        "support_ok": ok,
    }
    if not ok:
        _write_json(args.out, verdict)
        print(f"theorem-check: support violated, per-block counts {counts}")
        return EXIT_ASSUMPTION
    samples = elicit_domain(
        sample_set,
        partition,
        delta,
        m=int(args.samples),
        rng=np.random.default_rng((cfg["seed"], 778)),
    )
    delta_arr = (
        delta if not np.isscalar(delta) else np.full(sample_set.n_vertices, delta)
    )
    all_pass = all(
        all(
            float(np.dot(f, model.mesh.features[v])) > delta_arr[v]
            for v, f in s.features.items()
        )
        for s in samples
    )
    verdict["elicited_count"] = len(samples)
    verdict["all_elicited_pass"] = bool(all_pass)
    _write_json(args.out, verdict)
    print(
        f"theorem-check: K={partition.k} counts={counts} global={len(global_subset)} "
        f"elicited={len(samples)} all_pass={all_pass}"
    )
    return EXIT_OK


def cmd_defaults(args) -> int:
    print(f"{'key':36s} {'default':>14s}  provenance  note")
    for path, default, provenance, note in cfgmod.defaults_table():
        print(f"{path:36s} {str(default):>14s}  {provenance:10s}  {note}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meshpose",
        description="Neural-mesh render-and-compare pose estimation with "
        "selective vertex adaptation",
    )
    parser.add_argument(
        "--threads", type=int, default=os.cpu_count() or 1,
        help="worker threads for per-scene parallelism (results identical for any value)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    kind = p.add_mutually_exclusive_group(required=True)
    kind.add_argument("--source", dest="kind", action="store_const", const="source")
    kind.add_argument("--target", dest="kind", action="store_const", const="target")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the source model")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--curve", default=None, help="training-curve CSV path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="source-free adaptation on an unlabeled target")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history", default=None, help="per-epoch history CSV path")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="pose-accuracy metrics on a labeled dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--metrics", required=True, help="metrics JSON path")
    p.add_argument("--per-scene", default=None, help="per-scene CSV path")
    p.add_argument("--histogram", default=None, help="robust-ratio histogram CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("theorem-check", help="partition/support/elicitation check")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--partition", required=True, help="partition JSON or 'auto:K'")
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_theorem_check)

    p = sub.add_parser("defaults", help="print config defaults with provenance")
    p.set_defaults(func=cmd_defaults)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except cfgmod.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (MatchStarvationError, SupportError) as e:
        print(f"assumption violated: {e}", file=sys.stderr)
        return EXIT_ASSUMPTION


if __name__ == "__main__":
    sys.exit(main())
