"""Resolved run configuration: defaults < config file < command-line flags."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from fne.datagen import SyntheticSpec
from fne.model import TrainConfig
from fne.sampler import FneConfig

OUTPUT_ROOT_ENV = "FNE_OUTPUT_ROOT"


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


@dataclass
class RunConfig:
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    fne: FneConfig = field(default_factory=FneConfig)
    paths: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "data": asdict(self.data),
            "train": asdict(self.train),
            "fne": asdict(self.fne),
            "paths": dict(self.paths),
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def write(self, path) -> None:
        Path(path).write_text(self.dump(), encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict | None) -> RunConfig:
        d = dict(d or {})
        unknown = set(d) - {"data", "train", "fne", "paths"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        return cls(
            SyntheticSpec.from_dict(d.get("data") or {}),
            TrainConfig.from_dict(d.get("train") or {}),
            _fne_from_dict(d.get("fne") or {}),
            {str(k): str(v) for k, v in (d.get("paths") or {}).items()},
        )

    @classmethod
    def load(cls, path) -> RunConfig:
        with open(path, encoding="utf-8") as fh:
            try:
                raw = yaml.safe_load(fh)
            except yaml.YAMLError as exc:
                raise ValueError(f"{path}: not valid YAML ({exc})") from exc
        if raw is not None and not isinstance(raw, dict):
            raise ValueError(f"{path}: expected a mapping of config sections")
        return cls.from_dict(raw)

    def with_overrides(self, data=None, train=None, fne=None, paths=None) -> RunConfig:
        """Copy with the given per-section field overrides applied."""
        return RunConfig(
            replace(self.data, **(data or {})),
            TrainConfig.from_dict({**asdict(self.train), **(train or {})}),
            replace(self.fne, **(fne or {})),
            {**self.paths, **(paths or {})},
        )


def _fne_from_dict(d: dict) -> FneConfig:
    unknown = set(d) - {f.name for f in fields(FneConfig)}
    if unknown:
        raise ValueError(f"unknown fne keys: {sorted(unknown)}")
    return FneConfig(**d)
