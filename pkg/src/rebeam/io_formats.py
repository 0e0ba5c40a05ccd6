"""Bit-exact point-cloud I/O, strict JSON label/spec parsing, and CSV reports.

Binary clouds use the automotive convention: little-endian float32 quadruples
[x, y, z, intensity], no header. Labels and scanner/scene specs are strict
JSON; readers reject malformed input instead of repairing it.
"""

import json
import math
from pathlib import Path

import numpy as np

from .beam_model import BeamModel
from .errors import MalformedFile, SchemaViolation
from .object_graph import BoxPrediction
from .scene_synth import SceneSpec, ScannerSpec, graded_beams, uniform_beams

POINT_RECORD_BYTES = 16  # 4 x float32


def read_bin(path) -> np.ndarray:
    """Read an (N, 4) float32 cloud from a headerless binary file.

    Raises:
        MalformedFile: file length not a multiple of 16 bytes, or any
            non-finite value in the payload.
    """
    data = Path(path).read_bytes()
    if len(data) % POINT_RECORD_BYTES != 0:
        raise MalformedFile(f"{path}: length {len(data)} is not a multiple of 16")
    cloud = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    if not np.all(np.isfinite(cloud)):
        raise MalformedFile(f"{path}: non-finite values in point records")
    return cloud.copy()


def write_bin(cloud: np.ndarray, path) -> None:
    """Write a cloud as little-endian float32 records; inverse of read_bin."""
    arr = np.ascontiguousarray(np.asarray(cloud), dtype="<f4").reshape(-1, 4)
    Path(path).write_bytes(arr.tobytes())


_LABEL_REQUIRED = ("cx", "cy", "cz", "l", "w", "h", "yaw", "class_id")
_LABEL_OPTIONAL = ("confidence",)


def _require_number(obj, key, path):
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaViolation(f"'{key}' must be a number", path)
    if not math.isfinite(value):
        raise SchemaViolation(f"'{key}' must be finite", path)
    return float(value)


def _parse_box(obj, path) -> BoxPrediction:
    if not isinstance(obj, dict):
        raise SchemaViolation("expected an object", path)
    for key in obj:
        if key not in _LABEL_REQUIRED and key not in _LABEL_OPTIONAL:
            raise SchemaViolation(f"unknown key '{key}'", path)
    for key in _LABEL_REQUIRED:
        if key not in obj:
            raise SchemaViolation(f"missing key '{key}'", path)
    class_id = obj["class_id"]
    if isinstance(class_id, bool) or not isinstance(class_id, int):
        raise SchemaViolation("'class_id' must be an integer", path)
    size = [_require_number(obj, k, path) for k in ("l", "w", "h")]
    if any(v <= 0 for v in size):
        raise SchemaViolation("box sizes must be positive", path)
    confidence = 1.0
    if "confidence" in obj:
        confidence = _require_number(obj, "confidence", path)
        if not 0.0 <= confidence <= 1.0:
            raise SchemaViolation("'confidence' must be in [0, 1]", path)
    return BoxPrediction(
        center=np.array([_require_number(obj, k, path) for k in ("cx", "cy", "cz")]),
        size=np.array(size),
        yaw=_require_number(obj, "yaw", path),
        class_id=class_id,
        confidence=confidence,
    )


def read_labels(path) -> list[BoxPrediction]:
    """Read a JSON array of 7-DOF boxes; unknown keys are rejected by name."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, list):
        raise SchemaViolation("expected a JSON array")
    return [_parse_box(obj, path=f"$[{i}]") for i, obj in enumerate(doc)]


def write_labels(labels, path) -> None:
    """Write boxes as a JSON array with full round-trip float precision."""
    doc = []
    for box in labels:
        entry = {
            "cx": float(box.center[0]),
            "cy": float(box.center[1]),
            "cz": float(box.center[2]),
            "l": float(box.size[0]),
            "w": float(box.size[1]),
            "h": float(box.size[2]),
            "yaw": float(box.yaw),
            "class_id": int(box.class_id),
            "confidence": float(box.confidence),
        }
        doc.append(entry)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def emit_density_csv(model: BeamModel, path) -> None:
    """Write one `beam_index,zenith_rad,density_per_rad` row per beam.

    Floats use shortest round-trip formatting, so re-parsing reproduces the
    model's values exactly.
    """
    if model.densities is None:
        raise ValueError("BeamModel has no densities; use fit_beam_model")
    lines = ["beam_index,zenith_rad,density_per_rad"]
    for j in range(model.beam_count):
        lines.append(f"{j},{float(model.centers[j])!r},{float(model.densities[j])!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_scanner_spec(path) -> ScannerSpec:
    """Parse a scanner JSON spec.

    The beam layout is either an explicit `beam_zeniths_rad` array or one of
    the generators `uniform` / `graded` with count and field bounds.
    """
    doc = _load_object(path)
    layouts = [k for k in ("beam_zeniths_rad", "uniform", "graded") if k in doc]
    if len(layouts) != 1:
        raise SchemaViolation(
            "exactly one of 'beam_zeniths_rad', 'uniform', 'graded' is required"
        )
    allowed = {"beam_zeniths_rad", "uniform", "graded", "azimuth_step_rad",
               "max_range", "noise_sigma"}
    _reject_unknown(doc, allowed, "$")
    for key in ("azimuth_step_rad", "max_range"):
        if key not in doc:
            raise SchemaViolation(f"missing key '{key}'")

    kind = layouts[0]
    if kind == "beam_zeniths_rad":
        raw = doc[kind]
        if not isinstance(raw, list) or not raw:
            raise SchemaViolation("'beam_zeniths_rad' must be a non-empty array")
        zeniths = np.array([_require_number({"z": v}, "z", f"$.beam_zeniths_rad[{i}]")
                            for i, v in enumerate(raw)])
    else:
        gen = doc[kind]
        if not isinstance(gen, dict):
            raise SchemaViolation(f"'{kind}' must be an object", f"$.{kind}")
        keys = {"count", "zenith_min_rad", "zenith_max_rad"}
        if kind == "graded":
            keys.add("grade")
        _reject_unknown(gen, keys, f"$.{kind}")
        count = gen.get("count")
        if isinstance(count, bool) or not isinstance(count, int):
            raise SchemaViolation("'count' must be an integer", f"$.{kind}")
        lo = _require_number(gen, "zenith_min_rad", f"$.{kind}")
        hi = _require_number(gen, "zenith_max_rad", f"$.{kind}")
        if kind == "uniform":
            zeniths = uniform_beams(count, lo, hi)
        else:
            zeniths = graded_beams(count, lo, hi, _require_number(gen, "grade", f"$.{kind}"))

    try:
        return ScannerSpec(
            beam_zeniths=zeniths,
            azimuth_step=_require_number(doc, "azimuth_step_rad", "$"),
            max_range=_require_number(doc, "max_range", "$"),
            noise_sigma=_require_number(doc, "noise_sigma", "$") if "noise_sigma" in doc else 0.0,
        )
    except ValueError as exc:
        raise SchemaViolation(str(exc)) from exc


def read_scene_spec(path) -> SceneSpec:
    """Parse a scene JSON spec: ground height, seed, and an array of boxes."""
    doc = _load_object(path)
    _reject_unknown(doc, {"ground_z", "seed", "objects"}, "$")
    if "ground_z" not in doc or "objects" not in doc:
        raise SchemaViolation("missing key 'ground_z' or 'objects'")
    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise SchemaViolation("'seed' must be a non-negative integer")
    if not isinstance(doc["objects"], list):
        raise SchemaViolation("'objects' must be an array")
    boxes = [_parse_box(obj, path=f"$.objects[{i}]") for i, obj in enumerate(doc["objects"])]
    try:
        return SceneSpec(ground_z=_require_number(doc, "ground_z", "$"),
                         objects=tuple(boxes), seed=seed)
    except ValueError as exc:
        raise SchemaViolation(str(exc)) from exc


def _load_object(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaViolation("expected a JSON object")
    return doc


def _reject_unknown(obj: dict, allowed: set, path: str) -> None:
    for key in obj:
        if key not in allowed:
            raise SchemaViolation(f"unknown key '{key}'", path)
