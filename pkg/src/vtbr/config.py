"""Run configuration: one JSON file, with ``VTBR_*`` environment overrides.

``VTBR_SEED`` and ``VTBR_OUT`` override the top-level seed and output
directory. ``VTBR_<SECTION>__<FIELD>=<json>`` overrides any section field,
e.g. ``VTBR_PRETRAIN__TOTAL_STEPS=20``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from importlib import resources
from pathlib import Path
from typing import Mapping

from vtbr.errors import ConfigError

SECTIONS = ("world", "rs", "render", "model", "pretrain", "finetune", "eval")

DEFAULTS: dict = {
    "seed": 0,
    "out": "runs/toy",
    "schema": None,
    "templates": None,
    "world": {
        "identities": 64,
        "cameras": 4,
        "images_per_record": 4,
        "train_ratio": 0.5,
        "domains": None,
        "source_domain": "A",
        "target_domain": "B",
    },
    "rs": {"alpha": 0.8, "dedup": True, "scene_unit": "observation", "min_freq": 1},
    "render": {},
    "model": {},
    "pretrain": {},
    "finetune": {},
    "eval": {"ranks": [1, 5, 10], "saliency_images": 10},
}


def _merge(base: dict, override: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def bundled_config(name: str = "toy.json") -> Path:
    return Path(str(resources.files("vtbr") / "configs" / name))


def resolve_config_path(path: str | Path) -> Path:
    p = Path(path)
    if p.exists():
        return p
    bundled = bundled_config(p.name)
    if bundled.exists():
        return bundled
    raise ConfigError("config", f"file {str(path)!r} not found")


def env_overrides(cfg: dict, environ: Mapping[str, str] | None = None) -> dict:
    environ = os.environ if environ is None else environ
    cfg = copy.deepcopy(cfg)
    if "VTBR_SEED" in environ:
        try:
            cfg["seed"] = int(environ["VTBR_SEED"])
        except ValueError:
            raise ConfigError("seed", f"VTBR_SEED={environ['VTBR_SEED']!r} is not an integer") from None
    if "VTBR_OUT" in environ:
        cfg["out"] = environ["VTBR_OUT"]
    for key, raw in sorted(environ.items()):
        if not key.startswith("VTBR_") or "__" not in key:
            continue
        section, _, fld = key[5:].lower().partition("__")
        if section not in SECTIONS:
            raise ConfigError(section, f"unknown config section in {key}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        cfg.setdefault(section, {})[fld] = value
    return cfg


def validate(cfg: dict, base_dir: Path | None = None) -> dict:
    for key in cfg:
        if key not in DEFAULTS:
            raise ConfigError(key, "unknown top-level field")
    alpha = cfg["rs"].get("alpha")
    if not isinstance(alpha, (int, float)) or not 0.0 <= alpha <= 1.0:
        raise ConfigError("rs.alpha", f"must be a number in [0, 1], got {alpha!r}")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed", f"must be a non-negative integer, got {cfg['seed']!r}")
    if isinstance(cfg.get("schema"), str):
        p = Path(cfg["schema"])
        if not p.is_absolute() and base_dir is not None:
            p = base_dir / p
        if not p.exists():
            raise ConfigError("schema", f"file {str(p)!r} does not exist")
        cfg["schema"] = str(p)
    w = cfg["world"]
    if not 0.0 < float(w["train_ratio"]) < 1.0:
        raise ConfigError("world.train_ratio", "must lie strictly between 0 and 1")
    for fld in ("identities", "cameras", "images_per_record"):
        if int(w[fld]) < 1:
            raise ConfigError(f"world.{fld}", "must be positive")
    return cfg


def load_config(path: str | Path | None = None, overrides: Mapping | None = None,
                environ: Mapping[str, str] | None = None) -> dict:
    data: dict = {}
    base_dir = None
    if path is not None:
        p = resolve_config_path(path)
        base_dir = p.parent
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON in {p}: {exc.msg}") from exc
    cfg = _merge(DEFAULTS, data)
    cfg = env_overrides(cfg, environ)
    if overrides:
        cfg = _merge(cfg, overrides)
    return validate(cfg, base_dir)


def config_hash(cfg: Mapping) -> str:
    """Hash of everything except the output directory."""
    body = {k: v for k, v in cfg.items() if k != "out"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


def lineage(cfg: Mapping, stage: str) -> dict:
    return {"config_hash": config_hash(cfg), "seed": cfg["seed"], "stage": stage}
