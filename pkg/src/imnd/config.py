"""Run configuration: one INI-style key/value file plus command-line overrides.

Sections::

    [run]     seed, mode, out, threads
    [train]   TrainConfig fields, support_seconds
    [loss]    LossConfig fields (j_set as a comma list)
    [arch]    Architecture fields (embed_hidden as a comma list)
    [data]    data_dir, train, test (comma lists of sequence names)
    [domain NAME]  one simulated domain: profile, duration, rate, seed and
                   calibration ranges written as "low, high"

Relative paths resolve against the config file's directory.  Unknown sections
or keys are errors.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

from .dataset import DEFAULT_TEST, DEFAULT_TRAIN, ConfigError
from .denoiser import MODES, Architecture, LossConfig
from .imu_model import DEFAULT_RANGES, DomainSpec
from .meta_trainer import TrainConfig

RUN_KEYS = {"seed", "mode", "out", "threads"}
DATA_KEYS = {"data_dir", "train", "test"}
DOMAIN_KEYS = {"profile", "duration", "rate", "seed"} | set(DEFAULT_RANGES)


def toy_pack_path():
    return Path(str(resources.files("imnd") / "data" / "toy_pack.ini"))


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    arch: Architecture = field(default_factory=Architecture)
    data_dir: Path | None = None
    train_names: list = field(default_factory=lambda: list(DEFAULT_TRAIN))
    test_names: list = field(default_factory=lambda: list(DEFAULT_TEST))
    domains: list = field(default_factory=list)
    support_seconds: float = 60.0
    out: Path = Path("runs")
    threads: int = 1
    source: Path | None = None

    @property
    def seed(self):
        return self.train.seed

    def resolved_data_dir(self):
        if self.data_dir is not None:
            return self.data_dir
        env = os.environ.get("IMND_DATA_DIR")
        if env:
            return Path(env)
        raise ConfigError("no data directory: set [data] data_dir or IMND_DATA_DIR")

    def to_text(self):
        """Canonical INI rendering of every resolved setting."""
        cp = configparser.ConfigParser(interpolation=None)
        cp["run"] = {"seed": str(self.train.seed), "mode": self.train.mode, "out": str(self.out),
                     "threads": str(self.threads)}
        tr = {k: _fmt(v) for k, v in asdict(self.train).items() if k not in ("seed", "mode")}
        tr["support_seconds"] = _fmt(self.support_seconds)
        cp["train"] = tr
        cp["loss"] = {k: _fmt(v) for k, v in asdict(self.loss).items()}
        cp["arch"] = {k: _fmt(v) for k, v in asdict(self.arch).items()}
        cp["data"] = {"data_dir": "" if self.data_dir is None else str(self.data_dir),
                      "train": ", ".join(self.train_names), "test": ", ".join(self.test_names)}
        for d in self.domains:
            sec = {"profile": d.profile, "duration": _fmt(d.duration), "rate": _fmt(d.rate), "seed": str(d.seed)}
            sec.update({k: _fmt(d.range(k)) for k in DEFAULT_RANGES if k in d.ranges})
            cp[f"domain {d.name}"] = sec
        lines = []
        for name in cp.sections():
            lines.append(f"[{name}]")
            lines += [f"{k} = {v}" for k, v in cp[name].items()]
            lines.append("")
        return "\n".join(lines)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(kind, raw, where):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "ints":
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if kind == "floats":
            return tuple(float(x) for x in raw.split(",") if x.strip())
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None


def _names(raw):
    return [x.strip() for x in raw.split(",") if x.strip()]


_TRAIN_TYPES = {f.name: f.type for f in fields(TrainConfig)}
_KINDS = {"int": int, "float": float, "bool": bool, "str": str}


def _kind_of(annotation):
    return _KINDS.get(str(annotation), str)


def load_config(path=None, overrides=None):
    """Read and validate a config file; ``overrides`` maps 'section.key' to strings."""
    cp = configparser.ConfigParser(interpolation=None)
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        base = path.parent
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, key, str(value))

    train_kw, loss_kw, arch_kw = {}, {}, {}
    cfg = RunConfig(source=path)
    for section in cp.sections():
        items = dict(cp[section])
        where = f"[{section}]"
        if section == "run":
            _reject(items, RUN_KEYS, where)
            if "seed" in items:
                train_kw["seed"] = _parse_value(int, items["seed"], f"{where} seed")
            if "mode" in items:
                mode = items["mode"].strip()
                if mode not in MODES:
                    raise ConfigError(f"{where} mode: unknown mode {mode!r} (choose from {', '.join(MODES)})")
                train_kw["mode"] = mode
            if "out" in items:
                cfg.out = base / items["out"].strip()
            if "threads" in items:
                cfg.threads = _parse_value(int, items["threads"], f"{where} threads")
        elif section == "train":
            _reject(items, set(_TRAIN_TYPES) - {"seed", "mode"} | {"support_seconds"}, where)
            for k, raw in items.items():
                if k == "support_seconds":
                    cfg.support_seconds = _parse_value(float, raw, f"{where} {k}")
                else:
                    train_kw[k] = _parse_value(_kind_of(_TRAIN_TYPES[k]), raw, f"{where} {k}")
        elif section == "loss":
            _reject(items, {f.name for f in fields(LossConfig)}, where)
            for k, raw in items.items():
                loss_kw[k] = _parse_value("ints" if k == "j_set" else float, raw, f"{where} {k}")
        elif section == "arch":
            _reject(items, {f.name for f in fields(Architecture)}, where)
            for k, raw in items.items():
                kind = {"embed_hidden": "ints", "bias_scale": float}.get(k, int)
                arch_kw[k] = _parse_value(kind, raw, f"{where} {k}")
        elif section == "data":
            _reject(items, DATA_KEYS, where)
            if items.get("data_dir", "").strip():
                cfg.data_dir = base / items["data_dir"].strip()
            if "train" in items:
                cfg.train_names = _names(items["train"])
            if "test" in items:
                cfg.test_names = _names(items["test"])
        elif section.startswith("domain "):
            cfg.domains.append(_domain(section[len("domain "):].strip(), items, where))
        else:
            raise ConfigError(f"unknown section [{section}]")
    try:
        cfg.train = TrainConfig(**train_kw)
        cfg.loss = LossConfig(**loss_kw)
        cfg.arch = Architecture(**arch_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.threads < 1:
        raise ConfigError("[run] threads must be >= 1")
    overlap = set(cfg.train_names) & set(cfg.test_names)
    if overlap:
        raise ConfigError(f"sequences in both train and test splits: {', '.join(sorted(overlap))}")
    names = [d.name for d in cfg.domains]
    if len(set(names)) != len(names):
        raise ConfigError("duplicate domain names")
    return cfg


def _reject(items, allowed, where):
    unknown = sorted(set(items) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {', '.join(unknown)}")


def _domain(name, items, where):
    _reject(items, DOMAIN_KEYS, where)
    kw = {"name": name}
    if "profile" in items:
        kw["profile"] = items["profile"].strip()
    for k, kind in (("duration", float), ("rate", float), ("seed", int)):
        if k in items:
            kw[k] = _parse_value(kind, items[k], f"{where} {k}")
    ranges = {}
    for k in set(items) & set(DEFAULT_RANGES):
        pair = _parse_value("floats", items[k], f"{where} {k}")
        if len(pair) != 2:
            raise ConfigError(f"{where} {k}: expected 'low, high'")
        ranges[k] = pair
    kw["ranges"] = dict(sorted(ranges.items()))
    return DomainSpec(**kw)
