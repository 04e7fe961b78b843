"""Run configuration: dataclass defaults, then a TOML/JSON file, then command-line flags."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .synthenv import EnvConfig, OracleConfig
from .trainer import TrainConfig

__all__ = ["AnalysisConfig", "RunConfig", "load_config_file", "SECTIONS"]


@dataclass
class AnalysisConfig:
    n_select: int = 8
    n_runs: int = 64
    frame_counts: list = field(default_factory=lambda: [64, 128, 192, 256, 384, 512])
    positions: list = field(default_factory=lambda: [0.1, 0.26, 0.42, 0.58, 0.74, 0.9])
    ks: list = field(default_factory=lambda: [20, 40, 60, 80])
    n_subsets: int = 32
    tau: float = 0.21
    k: int = 32
    smoothing: float = 1e-6


# TOML section -> dataclass; OracleConfig.decoy_map is not configurable from files
SECTIONS = {"env": EnvConfig, "oracle": OracleConfig, "train": TrainConfig, "analysis": AnalysisConfig}
_ORACLE_FIELDS = ("gain_a", "bias_b", "noise_std", "noise_seed")


def section_fields(name: str) -> list:
    cls = SECTIONS[name]
    out = [f for f in fields(cls) if f.name != "decoy_map"]
    return out


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    workers: int = 1
    out_dir: str = "."
    env: EnvConfig = field(default_factory=EnvConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    io: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def dump(obj, names):
            return {n: getattr(obj, n) for n in names}

        return {
            "command": self.command,
            "seed": self.seed,
            "workers": self.workers,
            "out_dir": self.out_dir,
            "env": dump(self.env, [f.name for f in section_fields("env")]),
            "oracle": dump(self.oracle, _ORACLE_FIELDS),
            "train": dump(self.train, [f.name for f in section_fields("train")]),
            "analysis": dump(self.analysis, [f.name for f in section_fields("analysis")]),
            "io": dict(sorted(self.io.items())),
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


def load_config_file(path) -> dict:
    path = Path(path)
    text = path.read_bytes()
    if path.suffix == ".json":
        return json.loads(text)
    return tomllib.loads(text.decode())


def _coerce(cls, values: dict, where: str) -> dict:
    known = {f.name: f for f in fields(cls)}
    out = {}
    for k, v in values.items():
        if k not in known or k == "decoy_map":
            raise ValueError(f"unknown key {k!r} in [{where}]")
        out[k] = tuple(v) if isinstance(v, list) and k == "betas" else v
    return out


def build(command: str, file_values: dict, overrides: dict) -> RunConfig:
    """Merge file values and flag overrides (flags win) into a RunConfig.

    ``overrides`` maps section name -> {field: value}, plus top-level keys.
    """
    merged: dict = {}
    for src in (file_values, overrides):
        for k, v in src.items():
            if isinstance(v, dict):
                merged.setdefault(k, {}).update(v)
            elif v is not None:
                merged[k] = v
    merged.pop("command", None)
    cfg = RunConfig(command=command)
    for top in ("seed", "workers", "out_dir"):
        if top in merged:
            setattr(cfg, top, type(getattr(cfg, top))(merged.pop(top)))
    cfg.io = dict(merged.pop("io", {}))
    for name, cls in SECTIONS.items():
        vals = _coerce(cls, merged.pop(name, {}), name)
        setattr(cfg, name, replace(getattr(cfg, name), **vals))
    if merged:
        raise ValueError(f"unknown config sections: {sorted(merged)}")
    # one seed / worker count drives every stage unless a section pins its own
    cfg.train = replace(cfg.train, seed=cfg.seed, workers=cfg.workers)
    return cfg
