"""Run configuration read from an INI file.

Sections and keys (all optional; defaults in brackets)::

    [synth]    n_cycles [5], samples_per_cycle [320], theta_max [100], gain [0.02],
               noise_std [0.005], saturation [3]
    [suite]    offset_range [-0.3, 0.3], drift_slope_range [-5e-5, 5e-5],
               hysteresis_range [0.001, 0.003]
    [data]     train, test: nine CSV paths each (comma or newline separated);
               when present they replace the synthetic suite
    [trainer]  any TrainerConfig field except seed
    [run]      seeds [0, 1, 2, 3, 4], out [runs], jobs [1], trace_seeds [1]

Relative CSV paths resolve against the config file's directory.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import ConfigError, SuiteConfig, SynthConfig
from .trainer import TrainerConfig

ENV_VAR = "DRIFTCL_CONFIG"
N_EXPERIMENTS = 9
DEFAULT_SEEDS = (0, 1, 2, 3, 4)

_SYNTH_KEYS = ("n_cycles", "samples_per_cycle", "theta_max", "gain", "noise_std", "saturation")
_RANGE_KEYS = ("offset_range", "drift_slope_range", "hysteresis_range")


@dataclass
class RunConfig:
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    out: Path = Path("runs")
    jobs: int = 1
    trace_seeds: int = 1
    train_csv: tuple[Path, ...] = ()
    test_csv: tuple[Path, ...] = ()

    @property
    def csv_mode(self) -> bool:
        return bool(self.train_csv or self.test_csv)

    def validate(self) -> None:
        if self.csv_mode and (len(self.train_csv) != N_EXPERIMENTS or len(self.test_csv) != N_EXPERIMENTS):
            raise ConfigError(f"CSV mode needs exactly {N_EXPERIMENTS} train and {N_EXPERIMENTS} test files, "
                              f"got {len(self.train_csv)} and {len(self.test_csv)}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.suite.n_experiments != N_EXPERIMENTS:
            raise ConfigError(f"the suite must have {N_EXPERIMENTS} experiments")
        self.suite.validate()
        try:
            self.trainer.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def as_dict(self) -> dict:
        s = self.suite
        return {
            "synth": {k: getattr(s.template, k) for k in _SYNTH_KEYS},
            "suite": {k: list(getattr(s, k)) for k in _RANGE_KEYS},
            "data": {"train": [str(p) for p in self.train_csv], "test": [str(p) for p in self.test_csv]},
            "trainer": {f.name: getattr(self.trainer, f.name) for f in fields(TrainerConfig) if f.name != "seed"},
            "run": {"seeds": list(self.seeds), "jobs": self.jobs, "trace_seeds": self.trace_seeds},
        }


def parse_list(text: str, conv=float) -> list:
    items = [x.strip() for x in text.replace("\n", ",").split(",")]
    try:
        return [conv(x) for x in items if x]
    except ValueError as exc:
        raise ConfigError(f"cannot parse list {text!r}: {exc}") from exc


def _convert(name: str, raw: str, kind):
    try:
        if kind is bool:
            return {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}[raw.strip().lower()]
        if raw.strip().lower() == "none":
            return None
        return kind(raw)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def _field_kind(cls, name: str):
    default = getattr(cls(), name)
    if isinstance(default, bool):
        return bool
    if isinstance(default, int):
        return int
    if name == "rr_epochs":
        return int
    return float


def load_config(path: str | Path | None = None) -> RunConfig:
    """Parse ``path`` (or the file named by $DRIFTCL_CONFIG; defaults if neither)."""
    if path is None:
        path = os.environ.get(ENV_VAR) or None
    cfg = RunConfig()
    if path is None:
        return cfg
    path = Path(path)
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    known = {"synth", "suite", "data", "trainer", "run"}
    unknown = set(parser.sections()) - known
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {sorted(unknown)}")

    template = cfg.suite.template
    if parser.has_section("synth"):
        updates = {}
        for key, raw in parser.items("synth"):
            if key not in _SYNTH_KEYS:
                raise ConfigError(f"{path}: unknown key synth.{key}")
            updates[key] = _convert(key, raw, _field_kind(SynthConfig, key))
        template = replace(template, **updates)
    suite = replace(cfg.suite, template=template)
    if parser.has_section("suite"):
        updates = {}
        for key, raw in parser.items("suite"):
            if key not in _RANGE_KEYS:
                raise ConfigError(f"{path}: unknown key suite.{key}")
            lo_hi = parse_list(raw)
            if len(lo_hi) != 2:
                raise ConfigError(f"{path}: suite.{key} needs two numbers")
            updates[key] = tuple(lo_hi)
        suite = replace(suite, **updates)
    cfg.suite = suite

    if parser.has_section("trainer"):
        names = {f.name for f in fields(TrainerConfig)} - {"seed"}
        updates = {}
        for key, raw in parser.items("trainer"):
            if key not in names:
                raise ConfigError(f"{path}: unknown key trainer.{key}")
            updates[key] = _convert(key, raw, _field_kind(TrainerConfig, key))
        cfg.trainer = replace(cfg.trainer, **updates)

    if parser.has_section("data"):
        base = path.parent
        for key, raw in parser.items("data"):
            if key not in ("train", "test"):
                raise ConfigError(f"{path}: unknown key data.{key}")
            paths = tuple(base / p for p in parse_list(raw, str))
            setattr(cfg, f"{key}_csv", paths)

    if parser.has_section("run"):
        for key, raw in parser.items("run"):
            if key == "seeds":
                cfg.seeds = tuple(parse_list(raw, int))
            elif key == "out":
                cfg.out = path.parent / raw.strip()
            elif key in ("jobs", "trace_seeds"):
                setattr(cfg, key, _convert(key, raw, int))
            else:
                raise ConfigError(f"{path}: unknown key run.{key}")
    cfg.validate()
    return cfg
