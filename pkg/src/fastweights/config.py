"""Run configuration: a flat ``section.key = value`` text format.

Example::

    seed = 3
    model.binding = hebb
    model.mlp_hidden = 64,32
    data.source = synth_cluster
    train.n_episodes = 5000

Keys are typed by the dataclass fields below and unknown keys are rejected.
:func:`dump_config` writes every effective value, so its output replays a run.
"""
from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .episodes import (ArrayDataset, ClassSplit, RandomStream, load_dataset,
                       synth_cluster_tasks, synth_orthogonal_tasks)
from .errors import ConfigError, IngestionError
from .model import ModelSpec

DATA_ROOT_ENV = "FASTWEIGHTS_DATA"
SOURCES = ("synth_cluster", "synth_orthogonal", "omniglot", "file")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synth_cluster"
    # omniglot directory or FWDS1 file; empty falls back to $FASTWEIGHTS_DATA
    root: str = ""
    seed: int = 0
    n_classes: int = 100
    dim: int = 16
    per_class: int = 20
    separation: float = 0.5
    sigma: float = 0.25
    scale: float = 1.0
    # split sizes; None resolves to the source default
    n_train: int | None = None
    n_val: int | None = None
    n_test: int | None = None
    resize: int = 28
    augment_rotations: bool = True


@dataclass(frozen=True)
class TrainConfig:
    n_episodes: int = 1000
    eval_every: int = 400
    eval_episodes: int = 400
    test_episodes: int = 1000
    n_query: int = 5
    meta_batch: int = 1
    alpha: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    record_timings: bool = False
    checkpoint_every: int = 0


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: ModelSpec = field(default_factory=ModelSpec)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def with_model(self, **changes) -> RunConfig:
        return dataclasses.replace(self, model=self.model.replace(**changes))

    def with_train(self, **changes) -> RunConfig:
        return dataclasses.replace(self, train=dataclasses.replace(self.train, **changes))

    def with_data(self, **changes) -> RunConfig:
        return dataclasses.replace(self, data=dataclasses.replace(self.data, **changes))


_SECTIONS = {"model": ModelSpec, "data": DataConfig, "train": TrainConfig}


def _coerce(raw: str, tp, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if raw.lower() in ("none", ""):
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _coerce(raw, inner, key)
    if tp is bool:
        if raw.lower() in ("true", "yes", "1"):
            return True
        if raw.lower() in ("false", "no", "0"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}", key)
    if tp is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"expected an integer, got {raw!r}", key) from None
    if tp is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"expected a number, got {raw!r}", key) from None
    if tp is str:
        return raw
    if origin is tuple:
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        return tuple(_coerce(p, args[0], key) for p in parts)
    raise ConfigError(f"unsupported field type {tp}", key)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


def parse_config(text: str, overrides: dict[str, str] | None = None) -> RunConfig:
    """Parse config text; ``overrides`` take precedence over the file's keys."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key", key)
        values[key] = raw
    values.update(overrides or {})

    top = {f.name for f in dataclasses.fields(RunConfig)} - set(_SECTIONS)
    parsed: dict[str, dict] = {s: {} for s in _SECTIONS}
    kwargs = {}
    for key, raw in values.items():
        section, _, name = key.rpartition(".")
        if not section and name in top:
            kwargs[name] = _coerce(raw, int, key)
            continue
        cls = _SECTIONS.get(section)
        hints = typing.get_type_hints(cls) if cls else {}
        if name not in hints:
            raise ConfigError("unknown key", key)
        parsed[section][name] = _coerce(raw, hints[name], key)
    try:
        return RunConfig(**kwargs, **{s: _SECTIONS[s](**v) for s, v in parsed.items()})
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, overrides: dict[str, str] | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", str(path)) from None
    return parse_config(text, overrides)


def dump_config(cfg: RunConfig) -> str:
    lines = [f"seed = {cfg.seed}"]
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def _default_split(data: DataConfig, n_classes: int) -> tuple[int, int, int]:
    if data.source == "omniglot":
        return 1200, 0, 423
    n_val = n_test = n_classes // 5
    return n_classes - n_val - n_test, n_val, n_test


def resolve(cfg: RunConfig, input_shape: tuple[int, ...] | None = None) -> RunConfig:
    """Fill every defaulted value (split sizes, data root, input shape, seed)."""
    data = cfg.data
    if data.source not in SOURCES:
        raise ConfigError(f"must be one of {SOURCES}, got {data.source!r}", "data.source")
    root = data.root or (os.environ.get(DATA_ROOT_ENV, "")
                         if data.source in ("omniglot", "file") else "")
    d_train, d_val, d_test = _default_split(data, data.n_classes)
    data = dataclasses.replace(
        data, root=root,
        n_train=d_train if data.n_train is None else data.n_train,
        n_val=d_val if data.n_val is None else data.n_val,
        n_test=d_test if data.n_test is None else data.n_test)
    model = cfg.model.replace(seed=cfg.seed)
    if input_shape is not None and not model.input_shape:
        model = model.replace(input_shape=tuple(input_shape))
    return dataclasses.replace(cfg, data=data, model=model)


def resolve_for(cfg: RunConfig, pool) -> RunConfig:
    """:func:`resolve` against a loaded pool; a dataset file fixes ``data.n_classes``."""
    if cfg.data.source == "file":
        cfg = cfg.with_data(n_classes=pool.n_classes)
    return resolve(cfg, pool.input_shape)


def build_dataset(cfg: RunConfig):
    """Construct ``(pool, ClassSplit)`` for a resolved config."""
    data = resolve(cfg).data
    rng = RandomStream(data.seed, "data")
    if data.source == "synth_cluster":
        pool = synth_cluster_tasks(data.n_classes, data.dim, data.separation, rng,
                                   per_class=data.per_class, sigma=data.sigma)
    elif data.source == "synth_orthogonal":
        pool = synth_orthogonal_tasks(data.n_classes, data.dim, rng, per_class=data.per_class,
                                      sigma=data.sigma, scale=data.scale)
    elif data.source == "file":
        if not data.root or not Path(data.root).is_file():
            raise IngestionError(f"dataset file not found: {data.root!r}")
        pool = load_dataset(data.root)
        # default split sizes follow the file, not data.n_classes
        data = resolve_for(cfg, pool).data
    else:
        from .omniglot import load_omniglot
        if not data.root:
            raise IngestionError(f"no Omniglot root: set data.root or ${DATA_ROOT_ENV}")
        return load_omniglot(data.root, data.resize, data.augment_rotations, seed=data.seed,
                             n_train=data.n_train, n_test=data.n_test, n_val=data.n_val)
    assert isinstance(pool, ArrayDataset)
    split = ClassSplit.random(pool.n_classes, data.n_train, data.n_val, data.n_test,
                              RandomStream(data.seed, "split"))
    return pool, split
