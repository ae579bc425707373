"""Run configuration: a single JSON file with per-command sections.

All angles in config files are degrees; conversion to radians happens here,
at the boundary.  Unknown keys are rejected; every default carries a
provenance tag ("paper" for values the literature fixes, "artifact" for
desk-scale choices of this implementation).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Any, Callable

from .geometry import Camera, CuboidMesh, PoseRanges, make_cuboid_mesh
from .inference import InferenceOpts, PoseGrid


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass(frozen=True)
class Field:
    default: Any
    provenance: str  # "paper" | "artifact"
    check: Callable[[Any], bool] | None = None
    note: str = ""


def _num(lo=None, hi=None):
    def ok(v):
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            return False
        if lo is not None and v < lo:
            return False
        if hi is not None and v > hi:
            return False
        return True

    return ok


def _int(lo=None, hi=None):
    base = _num(lo, hi)
    return lambda v: isinstance(v, int) and not isinstance(v, bool) and base(v)


def _bool(v):
    return isinstance(v, bool)


def _pair(lo=None, hi=None):
    each = _num(lo, hi)
    return lambda v: (
        isinstance(v, (list, tuple)) and len(v) == 2 and all(each(x) for x in v)
    )


SCHEMA: dict[str, dict[str, Field]] = {
    "": {
        "seed": Field(0, "artifact", _int(0)),
        "d": Field(32, "artifact", _int(2), note="feature dimension"),
        "output_dir": Field("runs/out", "artifact", lambda v: isinstance(v, str)),
    },
    "mesh": {
        "dims": Field(
            [1.0, 0.8, 1.4],
            "artifact",
            lambda v: isinstance(v, (list, tuple))
            and len(v) == 3
            and all(isinstance(x, (int, float)) and x > 0 for x in v),
        ),
        "verts_per_edge": Field(5, "artifact", _int(2)),
    },
    "camera": {
        "focal": Field(110.0, "artifact", _num(1e-6)),
        "cx": Field(31.5, "artifact", _num(0)),
        "cy": Field(31.5, "artifact", _num(0)),
        "height": Field(64, "artifact", _int(1)),
        "width": Field(64, "artifact", _int(1)),
    },
    "poses": {
        "elevation_deg": Field([-60.0, 60.0], "artifact", _pair(-90, 90)),
        "theta_deg": Field([-45.0, 45.0], "artifact", _pair(-180, 180)),
        "distance": Field(5.0, "artifact", _num(1e-6)),
    },
    "bank": {
        "n_azimuth": Field(12, "artifact", _int(1)),
        "n_elevation": Field(3, "artifact", _int(1)),
        "n_theta": Field(3, "artifact", _int(1)),
    },
    "model": {
        "kappa": Field(20.0, "paper", _num(1e-6), note="fixed concentration"),
        "kappa_prime": Field(15.0, "artifact", _num(1e-6)),
        "n_clutter": Field(5, "paper", _int(1), note="clutter components"),
    },
    "source": {
        "n_scenes": Field(96, "artifact", _int(1)),
        "data_kappa": Field(20.0, "artifact", lambda v: v is None or _num(1e-6)(v)),
    },
    "target": {
        "n_scenes": Field(64, "artifact", _int(1)),
        "data_kappa": Field(20.0, "artifact", lambda v: v is None or _num(1e-6)(v)),
        "robust_fraction": Field(0.3, "artifact", _num(0, 1)),
        "robust_subset": Field(
            None,
            "artifact",
            lambda v: v is None
            or (isinstance(v, list) and all(isinstance(x, int) for x in v)),
        ),
        "perturb_deg": Field([60.0, 90.0], "artifact", _pair(0, 180)),
        "occlusion": Field(
            None, "paper", lambda v: v in (None, "L1", "L2"), note="L1 20-40%, L2 40-60%"
        ),
        "clutter_swap": Field(False, "artifact", _bool),
        "extractor_drift": Field(False, "artifact", _bool),
        "drift_scale": Field(0.3, "artifact", _num(0)),
    },
    "training": {
        "lam": Field(0.1, "artifact", _num(0), note="vertex-vertex contrastive weight"),
        "mu": Field(0.1, "artifact", _num(0), note="vertex-clutter contrastive weight"),
        "epochs": Field(8, "artifact", _int(1)),
        "batch_size": Field(32, "paper", _int(1)),
        "lr": Field(0.05, "artifact", _num(0)),
        "fixed_kappa": Field(True, "paper", _bool),
        "w_steps_per_epoch": Field(1, "artifact", _int(0)),
        "clutter_restarts": Field(10, "artifact", _int(1)),
        "bg_subsample": Field(128, "artifact", _int(1)),
    },
    "adaptation": {
        "alpha": Field(0.9, "artifact", _num(0, 1), note="EMA weight"),
        "psi": Field(0.075, "paper", _num(0, 1), note="5-10% of visible vertices"),
        "batch_size": Field(32, "paper", _int(1), note="minimum adaptation batch"),
        "epochs": Field(100, "paper", _int(1)),
        "drop_threshold": Field(0.5, "artifact", _num(-1, 1)),
        "recompute_kappa": Field(False, "paper", _bool),
        "adaptive_batch": Field(False, "paper", _bool),
        "target_coverage": Field(0.8, "paper", _num(0, 1), note="~80% of vertices"),
        "lr": Field(0.02, "artifact", _num(0)),
        "fixed_kappa": Field(20.0, "paper", lambda v: v is None or _num(1e-6)(v)),
        "match_mode": Field("all", "artifact", lambda v: v in ("all", "best")),
        "warm_start": Field(True, "artifact", _bool),
        "drift_tol_deg": Field(0.1, "artifact", _num(0)),
        "drift_window": Field(5, "artifact", _int(1)),
        "quantile": Field(0.95, "paper", _num(0, 1), note="90-95% of source features"),
        "default_delta": Field(0.8, "paper", _num(-1, 1), note="similarity threshold .8"),
        "max_iters": Field(15, "artifact", _int(1), note="pose refinement during adaptation"),
        "probe_every": Field(0, "artifact", _int(0)),
    },
    "inference": {
        "k_init": Field(3, "paper", _int(1), note="top-3 initial poses"),
        "min_sep_deg": Field(20.0, "artifact", _num(0)),
        "fd_step_deg": Field(0.5, "artifact", _num(1e-9)),
        "max_iters": Field(200, "artifact", _int(1)),
        "tol": Field(1e-6, "artifact", _num(0)),
    },
    "eval": {
        "bins": Field(12, "artifact", _int(1)),
        "delta": Field(0.8, "paper", _num(-1, 1)),
    },
}


def defaults() -> dict:
    out: dict[str, Any] = {}
    for section, fields in SCHEMA.items():
        table = {k: f.default for k, f in fields.items()}
        if section == "":
            out.update(table)
        else:
            out[section] = table
    return out


def defaults_table() -> list[tuple[str, Any, str, str]]:
    """(dotted path, default, provenance, note) rows for display."""
    rows = []
    for section, fields in SCHEMA.items():
        for key, f in fields.items():
            path = key if section == "" else f"{section}.{key}"
            rows.append((path, f.default, f.provenance, f.note))
    return rows


def validate(raw: dict) -> dict:
    """Merge a raw config dict over the defaults; unknown keys fail."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    merged = defaults()
    for key, value in raw.items():
        if key in SCHEMA[""]:
            field = SCHEMA[""][key]
            if field.check and not field.check(value):
                raise ConfigError(f"invalid value for '{key}': {value!r}")
            merged[key] = value
        elif key in SCHEMA:
            if not isinstance(value, dict):
                raise ConfigError(f"section '{key}' must be an object")
            for sub, sval in value.items():
                if sub not in SCHEMA[key]:
                    raise ConfigError(f"unknown key '{key}.{sub}'")
                field = SCHEMA[key][sub]
                if field.check and not field.check(sval):
                    raise ConfigError(f"invalid value for '{key}.{sub}': {sval!r}")
                merged[key][sub] = sval
        else:
            raise ConfigError(f"unknown key '{key}'")
    return merged


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    return validate(raw)


# Constructors for the domain objects a validated config describes.


def mesh_of(cfg) -> CuboidMesh:
    return make_cuboid_mesh(cfg["mesh"]["dims"], cfg["mesh"]["verts_per_edge"])


def camera_of(cfg) -> Camera:
    c = cfg["camera"]
    return Camera(
        focal=float(c["focal"]),
        cx=float(c["cx"]),
        cy=float(c["cy"]),
        height=int(c["height"]),
        width=int(c["width"]),
    )


def ranges_of(cfg) -> PoseRanges:
    p = cfg["poses"]
    return PoseRanges(
        elevation=tuple(math.radians(x) for x in p["elevation_deg"]),
        theta=tuple(math.radians(x) for x in p["theta_deg"]),
        distance=float(p["distance"]),
    )


def grid_of(cfg) -> PoseGrid:
    b = cfg["bank"]
    return PoseGrid(
        n_azimuth=int(b["n_azimuth"]),
        n_elevation=int(b["n_elevation"]),
        n_theta=int(b["n_theta"]),
        ranges=ranges_of(cfg),
    )


def inference_opts_of(cfg, max_iters=None) -> InferenceOpts:
    i = cfg["inference"]
    return InferenceOpts(
        k_init=int(i["k_init"]),
        min_sep=math.radians(i["min_sep_deg"]),
        fd_step=math.radians(i["fd_step_deg"]),
        max_iters=int(max_iters if max_iters is not None else i["max_iters"]),
        tol=float(i["tol"]),
    )
