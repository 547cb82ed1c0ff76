"""Run configuration: an INI-style file with one section per stage.

Example::

    [data]
    num_classes = 8
    feature_dim = 8
    head_count = 80
    imbalance_ratio = 4
    confusable_plan = 0:1:0.8, 2:3:0.8
    seed = 0

    [pipeline]
    M = 2
    S = 1

    [head]
    epochs = 20
    learning_rate = 0.005

``[pipeline]`` must set ``M`` and ``S``. Either ``[data]`` (generate) or
``[paths]`` (``train`` / ``test`` files) supplies the data. Unknown
sections and keys are errors.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .dataset import GeneratorSpec
from .gcs import BALANCE_MODES
from .nn import TrainConfig
from .pipeline import PipelineConfig


class ConfigError(ValueError):
    pass


_TRAIN_SECTIONS = {
    "baseline": "baseline",
    "expert": "expert",
    "fam": "fam",
    "head": "head",
    "fine_tune": "fine_tune_train",
    "pair": "pair",
}
_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}
_DATA_KEYS = (
    "num_classes", "feature_dim", "head_count", "imbalance_ratio",
    "confusable_plan", "seed", "separation", "test_per_class",
)
_PIPELINE_KEYS = (
    "M", "S", "feature_dim", "expert_hidden", "baseline_hidden", "fam_hidden",
    "head_hidden", "fine_tune", "division", "cgc", "balance", "tau",
    "pair_errors", "pair_hidden", "seed",
)
_REQUIRED_PIPELINE = ("M", "S")


@dataclass
class RunConfig:
    pipeline: PipelineConfig
    data: GeneratorSpec | None = None
    train_path: str | None = None
    test_path: str | None = None
    overrides: dict[str, str] = field(default_factory=dict)

    def lines(self) -> list[str]:
        """Canonical ``section.key=value`` lines describing this config."""
        out = []
        if self.data is not None:
            d = self.data
            plan = ",".join(f"{j}:{k}:{s!r}" for j, k, s in d.confusable_plan)
            for key in _DATA_KEYS:
                value = plan if key == "confusable_plan" else getattr(d, key)
                out.append(f"data.{key}={value}")
        if self.train_path:
            out.append(f"paths.train={self.train_path}")
            out.append(f"paths.test={self.test_path}")
        p = self.pipeline
        for key in _PIPELINE_KEYS:
            value = getattr(p, key)
            if isinstance(value, bool):
                value = "on" if value else "off"
            elif isinstance(value, tuple):
                value = ",".join(map(str, value))
            out.append(f"pipeline.{key}={value}")
        for section, attr in _TRAIN_SECTIONS.items():
            cfg = getattr(p, attr)
            for key in _TRAIN_KEYS:
                out.append(f"{section}.{key}={getattr(cfg, key)}")
        return out


def _int(section, key, raw):
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected an integer, got {raw!r}") from None


def _float(section, key, raw):
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected a number, got {raw!r}") from None


def _bool(section, key, raw):
    v = raw.strip().lower()
    if v in ("on", "true", "yes", "1"):
        return True
    if v in ("off", "false", "no", "0"):
        return False
    raise ConfigError(f"[{section}] {key}: expected on/off, got {raw!r}")


def _sizes(section, key, raw):
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(_int(section, key, t) for t in raw.split(","))


def _plan(raw):
    entries = []
    for item in raw.split(","):
        item = item.strip()
        if not item:
            continue
        parts = item.split(":")
        if len(parts) != 3:
            raise ConfigError(f"[data] confusable_plan: entry {item!r} must be j:k:strength")
        entries.append((_int("data", "confusable_plan", parts[0]),
                        _int("data", "confusable_plan", parts[1]),
                        _float("data", "confusable_plan", parts[2])))
    return tuple(entries)


def _check_keys(parser, section, allowed):
    for key in parser[section]:
        if key not in allowed:
            raise ConfigError(f"[{section}] unknown key {key!r}")


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep case: M and S are upper-case keys
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    known = {"data", "paths", "pipeline", *_TRAIN_SECTIONS}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"unknown section [{section}]")

    if "pipeline" not in parser:
        raise ConfigError("missing section [pipeline] (it must set M and S)")
    sec = parser["pipeline"]
    _check_keys(parser, "pipeline", _PIPELINE_KEYS)
    for key in _REQUIRED_PIPELINE:
        if key not in sec:
            raise ConfigError(f"[pipeline] missing required key {key!r}")
    kw = {}
    for key, raw in sec.items():
        if key in ("M", "S", "feature_dim", "seed"):
            kw[key] = _int("pipeline", key, raw)
        elif key == "tau":
            kw[key] = _float("pipeline", key, raw)
        elif key in ("fine_tune", "cgc", "pair_errors"):
            kw[key] = _bool("pipeline", key, raw)
        elif key.endswith("_hidden"):
            kw[key] = _sizes("pipeline", key, raw)
        elif key == "division":
            kw[key] = raw.strip()
        elif key == "balance":
            if raw.strip() not in BALANCE_MODES:
                raise ConfigError(f"[pipeline] balance: expected one of {BALANCE_MODES}, got {raw!r}")
            kw[key] = raw.strip()
    defaults = PipelineConfig()
    for section, attr in _TRAIN_SECTIONS.items():
        base = getattr(defaults, attr)
        if section in parser:
            _check_keys(parser, section, _TRAIN_KEYS)
            values = {}
            for key, raw in parser[section].items():
                conv = _int if key in ("epochs", "batch_size", "seed") else _float
                values[key] = conv(section, key, raw)
            base = replace(base, **values)
        kw[attr] = base
    pipeline = PipelineConfig(**kw)

    data = None
    if "data" in parser:
        _check_keys(parser, "data", _DATA_KEYS)
        d = parser["data"]
        for key in ("num_classes", "feature_dim", "head_count"):
            if key not in d:
                raise ConfigError(f"[data] missing required key {key!r}")
        dkw = {}
        for key, raw in d.items():
            if key in ("num_classes", "feature_dim", "head_count", "seed", "test_per_class"):
                dkw[key] = _int("data", key, raw)
            elif key in ("imbalance_ratio", "separation"):
                dkw[key] = _float("data", key, raw)
            elif key == "confusable_plan":
                dkw[key] = _plan(raw)
        data = GeneratorSpec(**dkw)

    train_path = test_path = None
    if "paths" in parser:
        _check_keys(parser, "paths", ("train", "test"))
        train_path = parser["paths"].get("train")
        test_path = parser["paths"].get("test")
        if not train_path or not test_path:
            raise ConfigError("[paths] needs both 'train' and 'test'")
    cfg = RunConfig(pipeline, data, train_path, test_path)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    try:
        cfg.pipeline.validate()
        if cfg.data is not None:
            cfg.data.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(), str(path))


def apply_overrides(
    cfg: RunConfig,
    seed: int | None = None,
    division: str | None = None,
    M: int | None = None,
    S: int | None = None,
    cgc: str | None = None,
) -> RunConfig:
    """Command-line flags win over the file; ``seed`` also reseeds the data."""
    p = cfg.pipeline
    changes, record = {}, {}
    if seed is not None:
        changes["seed"] = seed
        record["seed"] = str(seed)
    if division is not None:
        changes["division"] = division
        record["division"] = division
    if M is not None:
        changes["M"] = M
        record["M"] = str(M)
    if S is not None:
        changes["S"] = S
        record["S"] = str(S)
    if cgc is not None:
        changes["cgc"] = _bool("flags", "--cgc", cgc)
        record["cgc"] = cgc
    data = cfg.data
    if seed is not None and data is not None:
        data = replace(data, seed=seed)
    out = RunConfig(replace(p, **changes), data, cfg.train_path, cfg.test_path, {**cfg.overrides, **record})
    validate(out)
    return out


def dumps_config(cfg: RunConfig) -> str:
    """INI text that :func:`parse_config` reads back to an equal config."""
    sections: dict[str, list[str]] = {}
    for line in cfg.lines():
        key, value = line.split("=", 1)
        section, name = key.split(".", 1)
        sections.setdefault(section, []).append(f"{name} = {value}")
    return "\n".join(f"[{s}]\n" + "\n".join(rows) + "\n" for s, rows in sections.items())
