"""Run configuration: JSON file plus command-line overrides (flags win).

The resolved config is serialized into every run's output directory so a run
can be reproduced from its artifacts alone. Unknown keys in a config file are
rejected outright.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

from .model import FfnConfig
from .optim import LrPolicy

OUT_ROOT_ENV = "FLOODFILL_OUT_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # network
    num_modules: int = 12
    features: int = 32
    fov_size: int = 33
    delta: int = 8
    dtype: str = "float32"
    # learning rate policy
    lr: float = 1.2e-3
    lr_policy: str = "fixed"
    batch_scale_k: int = 0  # 0 = derive from workers * batch_per_worker
    warmup_steps: int = 0
    # training
    workers: int = 1
    batch_per_worker: int = 1
    steps: int = 100
    transport: str = "inproc"
    checkpoint_every: int = 0
    seed: int = 0
    # thresholds and seeding
    move_threshold: float = 0.9
    mask_threshold: float = 0.5
    min_spacing: float = 0.0  # 0 = use delta
    # paths
    out_dir: str = "run"

    def ffn_config(self) -> FfnConfig:
        return FfnConfig(
            num_modules=self.num_modules,
            features=self.features,
            fov_size=self.fov_size,
            delta=self.delta,
            dtype=self.dtype,
        )

    def lr_policy_obj(self) -> LrPolicy:
        k = self.batch_scale_k or self.workers * self.batch_per_worker
        return LrPolicy(
            base_lr=self.lr,
            mode=self.lr_policy,
            batch_scale_k=k,
            warmup_steps=self.warmup_steps,
        )

    def effective_min_spacing(self) -> float:
        return self.min_spacing if self.min_spacing > 0 else float(self.delta)

    def validate(self):
        try:
            self.ffn_config()
            self.lr_policy_obj()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.transport not in ("inproc", "tcp"):
            raise ConfigError("transport must be 'inproc' or 'tcp'")
        if not 0.0 < self.move_threshold <= 1.0:
            raise ConfigError("move_threshold must be in (0, 1]")
        if not 0.0 < self.mask_threshold < 1.0:
            raise ConfigError("mask_threshold must be in (0, 1)")
        if self.workers < 1 or self.batch_per_worker < 1 or self.steps < 0:
            raise ConfigError("workers/batch_per_worker/steps out of range")
        return self


_FIELD_NAMES = {f.name for f in dataclasses.fields(RunConfig)}


def load_config(json_path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults <- JSON file <- explicit overrides, validated at the end."""
    values = {}
    if json_path:
        try:
            with open(json_path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {json_path}: {exc}") from exc
        unknown = sorted(set(data) - _FIELD_NAMES)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values.update(data)
    for key, val in (overrides or {}).items():
        if key not in _FIELD_NAMES:
            raise ConfigError(f"unknown config key: {key}")
        if val is not None:
            values[key] = val
    try:
        cfg = RunConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def save_config(cfg: RunConfig, out_dir: str) -> str:
    path = os.path.join(out_dir, "config.json")
    with open(path, "w") as fh:
        json.dump(dataclasses.asdict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def resolve_out(path: str) -> str:
    """Relative output paths land under $FLOODFILL_OUT_ROOT (default cwd)."""
    if os.path.isabs(path):
        return path
    return os.path.join(os.environ.get(OUT_ROOT_ENV, "."), path)
