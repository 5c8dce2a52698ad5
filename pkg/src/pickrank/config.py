"""Run configuration: a plain-text key/value file with command-line overrides.

The file uses ``[section]`` headers and ``key = value`` lines::

    [scene]
    min_packages = 8
    rigid_box_height = 0.05, 0.25

    [oracle]
    base_logit = auto          # calibrate to calibration_target
    weight.occlusion_level = -0.7

Overrides use ``section.key=value``. Every section maps onto one settings
dataclass; keys default to the dataclass defaults. ``format_config`` writes
the fully resolved config back out in a canonical order, and its digest is
the config hash recorded in run manifests.
"""

import configparser
import hashlib
from dataclasses import dataclass, field, fields, replace

from .eoat import EoATModel, WorkcellLimits
from .errors import ConfigError
from .features import FEATURE_NAMES
from .gbdt import TrainConfig
from .oracle import OracleParams, StreamConfig, calibrate_base_rate
from .perception import PerceptionConfig
from .ranking import EpisodeConfig
from .scene import MATERIALS, SceneConfig

AUTO = "auto"


@dataclass(frozen=True)
class OracleSettings:
    base_logit: object = AUTO  # float, or "auto" to calibrate
    calibration_target: float = 0.944
    calibration_probe: int = 20000
    hard_floor_cups: int = 2
    cap_value: float = 0.5
    station_noise_std: float = 0.0
    drift_tag: str = "current"
    weights: tuple = OracleParams().weights
    material_modifiers: tuple = OracleParams().material_modifiers


@dataclass(frozen=True)
class StreamSettings:
    picks_per_segment: int = StreamConfig.picks_per_segment
    random_radius: float = StreamConfig.random_radius
    n_stations: int = StreamConfig.n_stations


@dataclass(frozen=True)
class EpisodeSettings:
    picks_per_segment: int = EpisodeConfig.picks_per_segment
    random_radius: float = EpisodeConfig.random_radius
    cap_factor: int = EpisodeConfig.cap_factor


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    perception: PerceptionConfig = field(default_factory=PerceptionConfig)
    eoat: EoATModel = field(default_factory=EoATModel)
    limits: WorkcellLimits = field(default_factory=WorkcellLimits)
    oracle: OracleSettings = field(default_factory=OracleSettings)
    stream: StreamSettings = field(default_factory=StreamSettings)
    episode: EpisodeSettings = field(default_factory=EpisodeSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunSettings = field(default_factory=RunSettings)

    def stream_config(self):
        return StreamConfig(self.scene, self.perception, self.eoat, self.limits,
                            self.stream.picks_per_segment, self.stream.random_radius,
                            self.stream.n_stations)

    def episode_config(self):
        return EpisodeConfig(self.perception, self.eoat, self.episode.picks_per_segment,
                             self.episode.random_radius, self.episode.cap_factor)

    def oracle_params(self, base_logit=0.0):
        o = self.oracle
        return OracleParams(base_logit, o.weights, o.material_modifiers, o.hard_floor_cups,
                            o.cap_value, o.drift_tag, o.station_noise_std)

    def resolve_oracle(self):
        """Oracle parameters, calibrating the base logit when it is ``auto``."""
        if self.oracle.base_logit != AUTO:
            return self.oracle_params(float(self.oracle.base_logit))
        return calibrate_base_rate(self.oracle_params(), "center", self.oracle.calibration_target,
                                   self.oracle.calibration_probe, self.run.seed,
                                   self.stream_config())


SECTIONS = ("scene", "perception", "eoat", "limits", "oracle", "stream", "episode", "train", "run")
_SKIP = {("scene", "fixed_packages")}  # not expressible as key/value text


# -- value codecs ------------------------------------------------------------------

def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_like(default, text, where):
    try:
        if isinstance(default, bool):
            return _parse_bool(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, str):
            return text.strip()
        if isinstance(default, tuple):
            return tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    raise ConfigError(f"{where}: unsupported setting type")


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    return str(v)


def _parse_offsets(text, where):
    try:
        pairs = [tuple(float(v) for v in item.split()) for item in text.split(";") if item.strip()]
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    if any(len(p) != 2 for p in pairs):
        raise ConfigError(f"{where}: expected 'x y; x y; ...'")
    return tuple(pairs)


# -- section <-> dataclass -------------------------------------------------------------

def _section_items(section, obj):
    """(key, text) pairs of one settings object in canonical order."""
    if section == "oracle":
        items = []
        for f in fields(obj):
            if f.name == "weights":
                items += [(f"weight.{n}", _format_value(w)) for n, w in zip(FEATURE_NAMES, obj.weights)]
            elif f.name == "material_modifiers":
                items += [(f"modifier.{m}", _format_value(v)) for m, v in obj.material_modifiers]
            elif f.name == "base_logit" and obj.base_logit == AUTO:
                items.append(("base_logit", AUTO))
            else:
                items.append((f.name, _format_value(getattr(obj, f.name))))
        return items
    if section == "eoat":
        items = []
        for f in fields(obj):
            v = getattr(obj, f.name)
            if f.name == "cup_offsets":
                items.append((f.name, "; ".join(f"{x!r} {y!r}" for x, y in v)))
            else:
                items.append((f.name, _format_value(v)))
        return items
    return [(f.name, _format_value(getattr(obj, f.name))) for f in fields(obj)
            if (section, f.name) not in _SKIP]


def _apply(section, obj, key, text):
    where = f"{section}.{key}"
    if section == "oracle":
        if key.startswith("weight."):
            name = key[len("weight."):]
            if name not in FEATURE_NAMES:
                raise ConfigError(f"{where}: unknown feature {name!r}")
            w = list(obj.weights)
            w[FEATURE_NAMES.index(name)] = _parse_like(0.0, text, where)
            return replace(obj, weights=tuple(w))
        if key.startswith("modifier."):
            name = key[len("modifier."):]
            if name not in {m.value for m in MATERIALS}:
                raise ConfigError(f"{where}: unknown material {name!r}")
            mods = dict(obj.material_modifiers)
            mods[name] = _parse_like(0.0, text, where)
            return replace(obj, material_modifiers=tuple(sorted(mods.items())))
        if key == "base_logit":
            value = AUTO if text.strip().lower() == AUTO else _parse_like(0.0, text, where)
            return replace(obj, base_logit=value)
    if section == "eoat" and key == "cup_offsets":
        return _rebuild(obj, cup_offsets=_parse_offsets(text, where))
    names = {f.name for f in fields(obj)} - {k for s, k in _SKIP if s == section}
    if key not in names:
        raise ConfigError(f"unknown setting {where}")
    return _rebuild(obj, **{key: _parse_like(getattr(obj, key), text, where)})


def _rebuild(obj, **changes):
    try:
        return replace(obj, **changes)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _validate(run):
    run.scene.validate()
    run.train.validate()
    if run.perception.resolution <= 0:
        raise ConfigError("perception.resolution must be positive")
    if run.stream.picks_per_segment < 1 or run.episode.picks_per_segment < 1:
        raise ConfigError("picks_per_segment must be at least 1")
    if run.episode.cap_factor < 1:
        raise ConfigError("episode.cap_factor must be at least 1")
    if not 0.0 < run.oracle.calibration_target < 1.0:
        raise ConfigError("oracle.calibration_target must lie in (0, 1)")
    run.oracle_params()  # range checks live in OracleParams
    return run


# -- public API -----------------------------------------------------------------------

def parse_overrides(pairs):
    """``["section.key=value", ...]`` -> list of (section, key, value)."""
    out = []
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not section.key=value")
        lhs, value = item.split("=", 1)
        section, _, key = lhs.strip().partition(".")
        if section not in SECTIONS or not key:
            raise ConfigError(f"override {item!r}: section must be one of {', '.join(SECTIONS)}")
        out.append((section, key.strip(), value.strip()))
    return out


def load_config(path=None, overrides=(), text=None):
    """RunConfig from an optional file (or ``text``) plus ``section.key=value`` overrides."""
    entries = []
    if path is not None or text is not None:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            if text is None:
                with open(path, encoding="utf-8") as fh:
                    text = fh.read()
            parser.read_string(text, source=str(path or "<config>"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            entries += [(section, k, v) for k, v in parser.items(section)]
    entries += parse_overrides(overrides)
    run = RunConfig()
    for section, key, value in entries:
        run = replace(run, **{section: _apply(section, getattr(run, section), key, value)})
    return _validate(run)


def format_config(run):
    """Canonical text form of a resolved RunConfig; load_config(text=...) reads it back."""
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        lines += [f"{k} = {v}" for k, v in _section_items(section, getattr(run, section))]
        lines.append("")
    return "\n".join(lines)


def config_hash(run):
    return hashlib.sha256(format_config(run).encode("utf-8")).hexdigest()


__all__ = [
    "AUTO", "RunConfig", "OracleSettings", "StreamSettings", "EpisodeSettings", "RunSettings",
    "SECTIONS", "load_config", "format_config", "config_hash", "parse_overrides",
]
