"""Run configuration: a YAML file with five sections, overridable from the command line.

Every key can be overridden as ``--section.key value``; a bare ``--key value``
works whenever the key name is unique across sections.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from lumafield.errors import ConfigError


@dataclass
class PathsSection:
    mesh: str | None = None  # OBJ file, or builtin:sphere / builtin:sphere_on_plane
    albedo: str | None = None
    normal: str | None = None
    hdri: str | None = None
    checkpoint: str | None = None
    dataset: str | None = None  # manifest.yaml
    out: str = "out"


@dataclass
class DensitySection:
    alpha_sigma: float = 10.0
    delta: float = 0.5


@dataclass
class SamplingSection:
    n_lights: int = 800
    clip_pct: float = 99.5
    imp_thresh: float = 0.05
    uniform_mode: bool = False


@dataclass
class RenderSection:
    width: int = 256
    height: int = 256
    samples_per_ray: int = 64
    specular_exponent: float = 32.0
    shadows: bool = True
    seed: int = 0
    jitter: bool = False
    fov: float = 30.0  # vertical, degrees
    position: tuple = (0.0, 0.0, 4.0)
    look_at: tuple = (0.0, 0.0, 0.0)
    exposure: float = 1.0
    albedo_srgb: bool = True
    tile: int = 32
    threads: int = 0  # 0 = LUMAFIELD_THREADS or all cores


@dataclass
class TrainSection:
    batch_rays: int = 1024
    iterations: int = 5000
    lr: float = 5e-4
    lr_decay: float = 0.1
    seed: int = 7
    checkpoint_every: int = 1000
    depth: int = 8
    hidden: int = 256
    inject_at: int = 4


@dataclass
class RunConfig:
    paths: PathsSection = field(default_factory=PathsSection)
    density: DensitySection = field(default_factory=DensitySection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    render: RenderSection = field(default_factory=RenderSection)
    train: TrainSection = field(default_factory=TrainSection)

    def sections(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def set(self, dotted: str, raw) -> None:
        """Assign ``section.key`` (or a unique bare key), coercing to the field type."""
        section, key = self.resolve(dotted)
        obj = getattr(self, section)
        setattr(obj, key, _coerce(raw, getattr(obj, key), _field_type(type(obj), key), dotted))

    def resolve(self, name: str) -> tuple[str, str]:
        name = name.replace("-", "_")
        secs = self.sections()
        if "." in name:
            section, key = name.split(".", 1)
            if section not in secs or not hasattr(secs[section], key):
                raise ConfigError(f"unknown config key {name!r}")
            return section, key
        owners = [s for s, obj in secs.items() if key_in(obj, name)]
        if not owners:
            raise ConfigError(f"unknown config key {name!r}")
        if len(owners) > 1:
            raise ConfigError(f"ambiguous config key {name!r}; use one of " +
                              ", ".join(f"{s}.{name}" for s in owners))
        return owners[0], name

    def validate(self) -> "RunConfig":
        d, s, r, t = self.density, self.sampling, self.render, self.train
        checks = [
            (d.alpha_sigma >= 0 and d.delta > 0, "density needs alpha_sigma >= 0 and delta > 0"),
            (s.n_lights >= 1, "sampling.n_lights must be >= 1"),
            (0 < s.clip_pct <= 100, "sampling.clip_pct must lie in (0, 100]"),
            (s.imp_thresh >= 0, "sampling.imp_thresh must be >= 0"),
            (r.width > 0 and r.height > 0, "render dimensions must be positive"),
            (r.samples_per_ray >= 1, "render.samples_per_ray must be >= 1"),
            (r.specular_exponent > 0, "render.specular_exponent must be > 0"),
            (0 < r.fov < 180, "render.fov must lie in (0, 180) degrees"),
            (r.exposure > 0, "render.exposure must be > 0"),
            (r.tile > 0 and r.threads >= 0, "render.tile must be > 0 and threads >= 0"),
            (t.batch_rays > 0 and t.iterations > 0 and t.checkpoint_every > 0, "train counts must be positive"),
            (t.lr > 0 and 0 < t.lr_decay <= 1, "train.lr must be > 0 and lr_decay in (0, 1]"),
            (t.depth >= 1 and t.hidden >= 1 and 0 <= t.inject_at <= t.depth, "invalid network shape"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self


def key_in(section, key: str) -> bool:
    return key in {f.name for f in fields(section)}


def _field_type(cls, key: str):
    return {f.name: f.type for f in fields(cls)}[key]


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(raw, current, annotation, name: str):
    try:
        if isinstance(current, bool):
            if isinstance(raw, bool):
                return raw
            text = str(raw).strip().lower()
            if text in _TRUE:
                return True
            if text in _FALSE:
                return False
            raise ValueError(raw)
        if isinstance(current, tuple):
            parts = raw if isinstance(raw, (list, tuple)) else str(raw).split(",")
            vals = tuple(float(p) for p in parts)
            if len(vals) != len(current):
                raise ValueError(raw)
            return vals
        if isinstance(current, int):
            val = float(raw)
            if val != int(val):
                raise ValueError(raw)
            return int(val)
        if isinstance(current, float):
            val = float(raw)
            if not np.isfinite(val):
                raise ValueError(raw)
            return val
        # optional path strings
        return None if raw is None or str(raw).lower() in ("", "none", "null") else str(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def load_config(path=None, overrides=None) -> RunConfig:
    """Defaults, then the YAML file (paths relative to it), then ``overrides`` (name -> raw)."""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping of sections")
        for section, body in doc.items():
            if section not in cfg.sections():
                raise ConfigError(f"{path}: unknown section {section!r}")
            if not isinstance(body, dict):
                raise ConfigError(f"{path}: section {section!r} must be a mapping")
            for key, value in body.items():
                cfg.set(f"{section}.{key}", value)
        # relative asset paths resolve against the config file's directory
        for key in ("mesh", "albedo", "normal", "hdri", "checkpoint", "dataset", "out"):
            val = getattr(cfg.paths, key)
            if val and not val.startswith("builtin:") and not Path(val).is_absolute():
                setattr(cfg.paths, key, str(path.parent / val))
    for name, value in (overrides or {}).items():
        cfg.set(name, value)
    return cfg.validate()


def save_config(cfg: RunConfig, path) -> None:
    doc = cfg.to_dict()
    for sec in doc.values():
        for k, v in sec.items():
            if isinstance(v, tuple):
                sec[k] = list(v)
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))


def split_overrides(argv: list[str]) -> dict:
    """Parse leftover ``--key value`` / ``--key=value`` tokens into a dict."""
    out = {}
    i = 0
    while i < len(argv):
        tok = argv[i]
        if not tok.startswith("--") or tok == "--":
            raise ConfigError(f"unexpected argument {tok!r}")
        if "=" in tok:
            key, value = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(argv):
                raise ConfigError(f"missing value for {tok}")
            key, value = tok[2:], argv[i + 1]
            i += 2
        out[key] = value
    return out
