"""Experiment configuration and the plain key = value config-file format.

Config files are flat: one ``key = value`` pair per line, ``#`` comments,
booleans as true/false, strings optionally quoted, and comma-separated lists.

    seeds = 0, 1, 2
    n_train = 6000
    bias = 0.9
    modes = plain, attreg
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import DataConfig

_DATA_KEYS = {f.name for f in fields(DataConfig)}


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    data_seed: int = 7
    data_dir: str | None = None
    seeds: tuple[int, ...] = (0, 1, 2)
    d_w: int = 16
    d_q: int = 32
    d_h: int = 32
    pretrain_epochs: int = 12
    pretrain_lr: float = 1e-3
    finetune_epochs: int = 8
    finetune_lr: float = 1e-4
    batch_size: int = 64
    sigma: float = 0.6
    top_m: int = 3
    ignored_pct: float = 40.0
    lambdas: tuple[float, ...] = (1.0,)
    sigmas: tuple[float, ...] | None = None
    start_epoch: int = 0
    modes: tuple[str, ...] = ("plain", "attreg")
    faithfulness: bool = True

    def validate(self) -> None:
        from .harness import EXPERIMENT_MODES

        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        if not self.lambdas:
            raise ValueError("lambdas must be nonempty")
        if self.data_dir is not None and not Path(self.data_dir).is_dir():
            raise ValueError(f"data_dir {self.data_dir!r} does not exist")
        unknown = set(self.modes) - set(EXPERIMENT_MODES)
        if unknown:
            raise ValueError(f"unknown modes {sorted(unknown)}; expected from {EXPERIMENT_MODES}")


def config_digest(cfg: ExperimentConfig) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _parse_scalar(text: str):
    text = text.strip()
    if (text.startswith('"') and text.endswith('"')) or \
       (text.startswith("'") and text.endswith("'")):
        return text[1:-1]
    lowered = text.lower()
    if lowered == "true":
        return True
    if lowered == "false":
        return False
    if lowered in ("none", "null"):
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def parse_value(text: str):
    if "," in text:
        return tuple(_parse_scalar(p) for p in text.split(",") if p.strip())
    return _parse_scalar(text)


def load_key_values(path: str | Path) -> dict:
    values: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = parse_value(value)
    return values


def _as_tuple(value) -> tuple:
    return value if isinstance(value, tuple) else (value,)


def data_config_from_mapping(values: dict) -> DataConfig:
    kwargs = {k: v for k, v in values.items() if k in _DATA_KEYS}
    unknown = set(values) - _DATA_KEYS
    if unknown:
        raise ValueError(f"unknown data config keys: {sorted(unknown)}")
    return DataConfig(**kwargs)


def load_data_config(path: str | Path) -> DataConfig:
    return data_config_from_mapping(load_key_values(path))


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    values = load_key_values(path)
    data_kwargs = {k: values.pop(k) for k in list(values) if k in _DATA_KEYS}
    exp_fields = {f.name for f in fields(ExperimentConfig)} - {"data"}
    unknown = set(values) - exp_fields
    if unknown:
        raise ValueError(f"{path}: unknown config keys: {sorted(unknown)}")
    for key in ("seeds", "lambdas", "modes", "sigmas"):
        if key in values and values[key] is not None:
            values[key] = _as_tuple(values[key])
    cfg = ExperimentConfig(data=DataConfig(**data_kwargs), **values)
    cfg.validate()
    return cfg
