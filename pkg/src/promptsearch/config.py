"""Run configuration: dataclass mirror of the JSON config files."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .data import DatasetSizes, DomainSpec, default_domain_specs

BASELINE_MODES = ("pops", "ft_seq", "oracle_selection")


class ConfigError(ValueError):
    """Raised for malformed run configurations."""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    num_domains: int = 3
    separation: float = 1.0
    identity_count: int = 20
    train_scenes: int = 200
    test_scenes: int = 100
    queries: int = 30
    gallery_size: int = 50
    corpus_size: int = 500
    warmup_steps: int = 150
    pretrain_epochs: int = 5
    continual_epochs: int = 10
    pretrain_lr: float = 1e-4
    continual_lr: float = 3e-4
    lambda_attr: float = 0.1
    lambda_div: float = 0.1
    prompt_len: int = 16
    num_attributes: int = 4
    batch_size: int = 4
    baseline: str = "pops"
    domains: tuple = ()  # explicit DomainSpec overrides; default: generated

    def __post_init__(self):
        if self.baseline not in BASELINE_MODES:
            raise ConfigError(f"baseline must be one of {BASELINE_MODES}, got {self.baseline!r}")
        if self.pretrain_lr <= 0 or self.continual_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.num_domains < 1 and not self.domains:
            raise ConfigError("domain order must be non-empty")

    def domain_specs(self):
        if self.domains:
            return list(self.domains)
        return default_domain_specs(self.num_domains, self.separation, self.identity_count)

    def dataset_sizes(self):
        return DatasetSizes(self.train_scenes, self.test_scenes,
                            self.queries, self.gallery_size)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["domains"] = [dataclasses.asdict(s) for s in self.domains]
        return d


def config_from_dict(raw):
    """Build a RunConfig from a plain dict; unknown keys are rejected."""
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    raw = dict(raw)
    if "domains" in raw:
        spec_fields = {f.name for f in dataclasses.fields(DomainSpec)}
        specs = []
        for entry in raw["domains"]:
            bad = set(entry) - spec_fields
            if bad:
                raise ConfigError(f"unknown domain spec keys: {sorted(bad)}")
            entry = dict(entry)
            if "background_palette" in entry:
                entry["background_palette"] = tuple(tuple(c) for c in entry["background_palette"])
            if "person_scale_range" in entry:
                entry["person_scale_range"] = tuple(entry["person_scale_range"])
            specs.append(DomainSpec(**entry))
        raw["domains"] = tuple(specs)
    return RunConfig(**raw)


def load_config(path):
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def save_config(config, path):
    with open(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
