"""Command-line entry point: stats, resample, graph-loss, synth, selftrain.

Every command is deterministic given its flags and inputs; --seed fully
determines all randomness. Exit codes: 0 success, 2 I/O error, 3 numerical or
clustering error, 4 schema violation.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io_formats
from .beam_model import fit_beam_model
from .errors import (
    DegenerateDenominator,
    DegeneratePoint,
    DimensionMismatch,
    EmptyCloud,
    MalformedFile,
    RebeamError,
    SchemaViolation,
    SingleBeam,
    TooFewDistinctZeniths,
    ZeroNormFeature,
)
from .object_graph import (
    ConsistencyConfig,
    GraphConfig,
    MatchConfig,
    build_graph,
    consistency_loss,
    features_of,
    greedy_iou_match,
    matched_graph,
    rotated_bev_iou,
)
from .rbrs import DownsampleConfig, RbrsConfig, UpsampleConfig, apply_rbrs
from .scene_synth import render_scene
from .self_train import (
    DtsConfig,
    EmaConfig,
    PseudoLabelConfig,
    ToyDetector,
    dts_train,
    evaluate_mse,
    pretrain,
)

EXIT_IO = 2
EXIT_NUMERICAL = 3
EXIT_SCHEMA = 4

CONFIG_VERSION = 1


def default_config() -> dict:
    """Shipped defaults; the selftrain hyperparameters mirror the usual setup."""
    return {
        "version": CONFIG_VERSION,
        "beams": {"source": 64, "target": 32},
        "pseudo": {"c_th": 0.5},
        "ema": {"alpha": 0.999},
        "graph": {
            "eps1": 5.0,
            "eps2": 20.0,
            "tau": 13.0,
            "node_conf_threshold": 0.5,
            "wrap_yaw": True,
        },
        "match": {"iou_th": 0.1},
        "consistency": {"beta1": 0.05, "beta2": 0.3, "gamma": 0.5},
        "pretrain": {
            "epochs": 10,
            "learning_rate": 0.01,
            "rbrs_mode": "downsample",
            "gamma1": 75.0,
            "gamma2": 25.0,
        },
        "selftrain": {
            "learning_rate": 0.01,
            "rbrs_mode": "downsample",
            "gamma1": 25.0,
            "gamma2": 25.0,
        },
        "detector": {
            "class_anchors": None,
            "cluster_distance": 1.0,
            "min_points": 3,
            "anchor_points": 5.0,
            "feature_range": 50.0,
            "max_extent": 8.0,
        },
    }


def _merge(base: dict, override: dict, path: str = "$") -> dict:
    out = dict(base)
    for key, value in override.items():
        if key not in base:
            raise SchemaViolation(f"unknown key '{key}'", path)
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise SchemaViolation(f"'{key}' must be an object", path)
            out[key] = _merge(base[key], value, f"{path}.{key}")
        else:
            out[key] = value
    return out


def load_config(path: str | None) -> dict:
    """Defaults merged with an optional user config file (strict keys)."""
    cfg = default_config()
    if path is None:
        return cfg
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaViolation("config must be a JSON object")
    version = doc.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise SchemaViolation(f"unsupported config version {version}")
    return _merge(cfg, doc)


def _rbrs_config(section: dict, mode: str | None = None, seed: int = 0) -> RbrsConfig:
    return RbrsConfig(
        mode=mode if mode is not None else section["rbrs_mode"],
        down=DownsampleConfig(gamma1=section["gamma1"]),
        up=UpsampleConfig(gamma2=section["gamma2"]),
        seed=seed,
    )


def _graph_config(cfg: dict) -> GraphConfig:
    g = cfg["graph"]
    return GraphConfig(
        eps1=g["eps1"],
        eps2=g["eps2"],
        tau=g["tau"],
        node_conf_threshold=g["node_conf_threshold"],
        wrap_yaw=g["wrap_yaw"],
    )


def _detector(cfg: dict) -> ToyDetector:
    d = cfg["detector"]
    return ToyDetector(
        class_anchors=d["class_anchors"],
        cluster_distance=d["cluster_distance"],
        min_points=d["min_points"],
        anchor_points=d["anchor_points"],
        feature_range=d["feature_range"],
        max_extent=d["max_extent"],
    )


def cmd_stats(args, cfg: dict) -> int:
    cloud = io_formats.read_bin(args.input)
    if cloud.shape[0] == 0:
        raise EmptyCloud(f"{args.input}: empty cloud")
    model = fit_beam_model(cloud, args.beams)
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    io_formats.emit_density_csv(model, out_dir / "density.csv")
    summary = {
        "beams": model.beam_count,
        "converged": model.converged,
        "density_min": float(model.densities.min()),
        "density_max": float(model.densities.max()),
        "density_mean": float(model.densities.mean()),
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return 0


def cmd_resample(args, cfg: dict) -> int:
    cloud = io_formats.read_bin(args.input)
    if args.mode == "up" and args.gamma == 0.0:
        # A zero interpolation factor inserts nothing; skip the clustering.
        rbrs = RbrsConfig(mode="passthrough", seed=args.seed)
    elif args.mode == "down":
        rbrs = RbrsConfig(
            mode="downsample", down=DownsampleConfig(gamma1=args.gamma), seed=args.seed
        )
    else:
        rbrs = RbrsConfig(
            mode="upsample", up=UpsampleConfig(gamma2=args.gamma), seed=args.seed
        )
    out = apply_rbrs(cloud, args.beams, rbrs)
    io_formats.write_bin(out, args.output)
    print(f"{len(cloud)} -> {len(out)} points")
    return 0


def _load_features(path, n_teacher: int, n_student: int) -> tuple[np.ndarray, np.ndarray]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict) or set(doc) != {"teacher", "student"}:
        raise SchemaViolation("features file must have exactly 'teacher' and 'student' arrays")
    out = []
    for key, expected in (("teacher", n_teacher), ("student", n_student)):
        arr = np.asarray(doc[key], dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != expected:
            raise SchemaViolation(
                f"'{key}' must be a {expected} x C array, got shape {arr.shape}", f"$.{key}"
            )
        if not np.all(np.isfinite(arr)):
            raise SchemaViolation(f"'{key}' contains non-finite values", f"$.{key}")
        out.append(arr)
    if out[0].shape[1] != out[1].shape[1]:
        raise SchemaViolation("teacher and student feature widths differ")
    return out[0], out[1]


def cmd_graph_loss(args, cfg: dict) -> int:
    teacher_boxes = io_formats.read_labels(args.teacher)
    student_boxes = io_formats.read_labels(args.student)
    f_teacher, f_student = _load_features(args.features, len(teacher_boxes), len(student_boxes))
    graph_cfg = _graph_config(cfg)
    cons_cfg = ConsistencyConfig(
        beta1=cfg["consistency"]["beta1"],
        beta2=cfg["consistency"]["beta2"],
        gamma=cfg["consistency"]["gamma"],
    )
    match_cfg = MatchConfig(iou_th=cfg["match"]["iou_th"])

    for box, feat in zip(teacher_boxes, f_teacher):
        box.feature = feat
    for box, feat in zip(student_boxes, f_student):
        box.feature = feat
    graph_t = build_graph(teacher_boxes, graph_cfg)
    graph_s = build_graph(student_boxes, graph_cfg)
    pairs = greedy_iou_match(graph_t.nodes, graph_s.nodes, match_cfg.iou_th)
    matched_t = [graph_t.nodes[t] for t, _ in pairs]
    matched_s = [graph_s.nodes[s] for _, s in pairs]
    width = f_teacher.shape[1] if len(teacher_boxes) else 0
    ft = features_of(matched_t) if matched_t else np.zeros((0, width))
    fs = features_of(matched_s) if matched_s else np.zeros((0, width))
    result = consistency_loss(
        matched_graph(matched_s, graph_cfg),
        matched_graph(matched_t, graph_cfg),
        fs,
        ft,
        cons_cfg,
        graph_cfg,
    )
    report = {
        "matches": [
            {
                "teacher": t,
                "student": s,
                "iou": rotated_bev_iou(graph_t.nodes[t].bev(), graph_s.nodes[s].bev()),
            }
            for t, s in pairs
        ],
        "L_node": result.node_loss,
        "L_edge": result.edge_loss,
        "L_cons": result.loss,
    }
    print(json.dumps(report, indent=2))
    return 0


def cmd_synth(args, cfg: dict) -> int:
    scanner = io_formats.read_scanner_spec(args.scanner)
    scene = io_formats.read_scene_spec(args.scene)
    result = render_scene(scanner, scene)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    io_formats.write_bin(result.cloud, out.with_suffix(".bin"))
    io_formats.write_labels(result.labels, out.with_suffix(".json"))
    print(f"{len(result.cloud)} points, {len(result.labels)} labels")
    return 0


def _load_dataset(directory, require_labels: bool):
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory} is not a directory")
    frames = []
    for bin_path in sorted(directory.glob("*.bin")):
        label_path = bin_path.with_suffix(".json")
        labels = None
        if label_path.exists():
            labels = io_formats.read_labels(label_path)
        elif require_labels:
            raise FileNotFoundError(f"missing labels for {bin_path}")
        frames.append((io_formats.read_bin(bin_path), labels))
    if not frames:
        raise FileNotFoundError(f"no .bin frames in {directory}")
    return frames


def cmd_selftrain(args, cfg: dict) -> int:
    source = _load_dataset(args.source, require_labels=True)
    target = _load_dataset(args.target, require_labels=False)
    detector = _detector(cfg)

    theta = pretrain(
        source,
        detector,
        _rbrs_config(cfg["pretrain"]),
        beams=cfg["beams"]["source"],
        epochs=cfg["pretrain"]["epochs"],
        learning_rate=cfg["pretrain"]["learning_rate"],
        seed=args.seed,
    )

    dts_cfg = DtsConfig(
        beams=cfg["beams"]["target"],
        rbrs=_rbrs_config(cfg["selftrain"]),
        pseudo=PseudoLabelConfig(c_th=cfg["pseudo"]["c_th"]),
        ema=EmaConfig(alpha=cfg["ema"]["alpha"]),
        graph=_graph_config(cfg),
        match=MatchConfig(iou_th=cfg["match"]["iou_th"]),
        cons=ConsistencyConfig(
            beta1=cfg["consistency"]["beta1"],
            beta2=cfg["consistency"]["beta2"],
            gamma=cfg["consistency"]["gamma"],
        ),
        learning_rate=cfg["selftrain"]["learning_rate"],
    )
    clouds = [cloud for cloud, _ in target]
    eval_labels = [labels for _, labels in target]
    have_labels = all(lab is not None for lab in eval_labels)
    theta_final, report = dts_train(
        clouds,
        theta,
        detector,
        dts_cfg,
        epochs=args.epochs,
        seed=args.seed,
        eval_labels=eval_labels if have_labels else None,
    )

    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write_json(out_dir / "report.json")
    report.write_csv(out_dir / "curves.csv")
    summary = {
        "pretrain_epochs": cfg["pretrain"]["epochs"],
        "selftrain_epochs": args.epochs,
        "theta_final": [float(v) for v in theta_final],
    }
    if have_labels:
        summary["pretrain_target_mse"] = evaluate_mse(clouds, eval_labels, detector, theta)
        summary["final_target_mse"] = evaluate_mse(clouds, eval_labels, detector, theta_final)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps({k: v for k, v in summary.items() if k != "theta_final"}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rebeam",
        description="LiDAR beam-density re-sampling and desk-scale density adaptation",
    )
    parser.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    parser.add_argument("--config", default=None, help="JSON config merged over defaults")
    parser.add_argument("--output-dir", default=".", help="directory for generated files")
    parser.add_argument(
        "--jobs", type=int, default=1,
        help="worker budget; outputs are byte-identical for any value (runs "
             "sequentially today)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="beam densities of a cloud")
    p.add_argument("--input", required=True)
    p.add_argument("--beams", type=int, required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("resample", help="beam re-sample a cloud")
    p.add_argument("--input", required=True)
    p.add_argument("--mode", choices=("down", "up"), required=True)
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--beams", type=int, required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_resample)

    p = sub.add_parser("graph-loss", help="consistency losses between two prediction sets")
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--features", required=True)
    p.set_defaults(func=cmd_graph_loss)

    p = sub.add_parser("synth", help="render a synthetic scene")
    p.add_argument("--scanner", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--output", required=True, help="output path prefix (.bin/.json)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("selftrain", help="pretrain on source, self-train on target")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--epochs", type=int, required=True)
    p.set_defaults(func=cmd_selftrain)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_IO
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except SchemaViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (MalformedFile, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (
        TooFewDistinctZeniths,
        SingleBeam,
        EmptyCloud,
        DegeneratePoint,
        DimensionMismatch,
        ZeroNormFeature,
        DegenerateDenominator,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, RebeamError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
