"""Plain-text ``key = value`` configuration.

Lists are comma separated, booleans are ``true``/``false``, ``#`` starts a
comment. Unknown keys are rejected. See ``default.cfg`` for every key.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path
from typing import Any, get_args, get_origin, get_type_hints


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    # images and views
    num_views_train: int = 3
    num_views_eval: int = 5
    # coarse cost volume
    planes_train: int = 48
    planes_eval: int = 96
    feature_widths: tuple[int, ...] = (8, 16, 32)
    regularizer_widths: tuple[int, ...] = (8, 16, 32)
    # point flow
    m: int = 2
    k: int = 16
    edge_widths: tuple[int, ...] = (64, 64, 64)
    head_widths: tuple[int, ...] = (128, 64)
    aggregation: str = "max"
    ablate_edgeconv: bool = False
    single_level_features: bool = False
    knn_mode: str = "windowed"
    knn_window: int = 9
    train_steps: tuple[float, ...] = (8.0, 4.0)
    train_upsample: tuple[int, ...] = (1, 2)
    eval_steps: tuple[float, ...] = (8.0, 4.0, 2.0)
    eval_upsample: tuple[int, ...] = (1, 2, 2)
    # training
    seed: int = 0
    learning_rate: float = 5e-4
    lr_decay: float = 0.9
    lr_decay_every: int = 2
    phase1_epochs: int = 4
    phase2_epochs: int = 12
    batch_size: int = 1
    loss_lambdas: tuple[float, ...] = (1.0, 1.0, 1.0)
    # fusion
    photometric_threshold_coarse: float = 0.5
    photometric_threshold_flow: float = 0.2
    geometric_max_discrepancy: float = 0.12
    min_consistent_views: int = 3
    merge_duplicates: bool = True
    merge_radius: float = 0.2
    # evaluation
    outlier_cap: float = 20.0
    fscore_threshold: float = 0.5
    # synthetic data
    num_scenes: int = 10
    scene_views: int = 5
    image_width: int = 160
    image_height: int = 128

    def __post_init__(self) -> None:
        if self.aggregation not in ("max", "avg"):
            raise ConfigError(f"aggregation must be 'max' or 'avg', got {self.aggregation!r}")
        if self.knn_mode not in ("exhaustive", "windowed"):
            raise ConfigError(f"knn_mode must be 'exhaustive' or 'windowed', got {self.knn_mode!r}")
        if self.m < 1 or self.k < 1:
            raise ConfigError("m and k must be positive")
        for name in ("feature_widths", "regularizer_widths"):
            if len(getattr(self, name)) != 3:
                raise ConfigError(f"{name} needs exactly 3 entries")
        if len(self.edge_widths) != 3:
            raise ConfigError("edge_widths needs exactly 3 entries")
        if len(self.train_steps) != len(self.train_upsample) or len(self.eval_steps) != len(self.eval_upsample):
            raise ConfigError("step and upsample lists must have equal lengths")
        for a in ("photometric_threshold_coarse", "photometric_threshold_flow"):
            if not 0.0 <= getattr(self, a) <= 1.0:
                raise ConfigError(f"{a} must lie in [0, 1]")
        if self.geometric_max_discrepancy <= 0:
            raise ConfigError("geometric_max_discrepancy must be positive")
        if any(x < 0 for x in self.loss_lambdas):
            raise ConfigError("loss_lambdas must be non-negative")

    def replace(self, **changes: Any) -> "Config":
        return dataclasses.replace(self, **changes)

    @property
    def point_feature_levels(self) -> tuple[int, ...]:
        return (3,) if self.single_level_features else (1, 2, 3)

    def lambdas(self, iterations: int) -> tuple[float, ...]:
        lam = self.loss_lambdas
        if len(lam) == 1:
            return lam * (iterations + 1)
        if len(lam) < iterations + 1:
            raise ConfigError(f"loss_lambdas needs {iterations + 1} entries")
        return lam[: iterations + 1]

    def model_dict(self) -> dict:
        """Keys that determine the network's parameter layout and refinement behaviour."""
        keys = ("feature_widths", "regularizer_widths", "m", "k", "edge_widths", "head_widths",
                "aggregation", "ablate_edgeconv", "single_level_features", "train_steps",
                "train_upsample")
        return {k: _jsonable(getattr(self, k)) for k in keys}

    def model_hash(self) -> str:
        blob = json.dumps(self.model_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {f.name: _jsonable(getattr(self, f.name)) for f in fields(self)}

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(_fmt(x) for x in v)
            else:
                v = _fmt(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _fmt(x: Any) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    return repr(x) if isinstance(x, float) else str(x)


def _jsonable(v: Any) -> Any:
    return list(v) if isinstance(v, tuple) else v


def _parse_scalar(raw: str, typ: type, key: str) -> Any:
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from exc


def parse_config(text: str, base: Config | None = None) -> Config:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string("[config]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    hints = get_type_hints(Config)
    known = {f.name for f in fields(Config)}
    values: dict[str, Any] = {}
    for key, raw in parser["config"].items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        typ = hints[key]
        if get_origin(typ) is tuple:
            inner = get_args(typ)[0]
            values[key] = tuple(_parse_scalar(x, inner, key) for x in raw.split(",") if x.strip())
        else:
            values[key] = _parse_scalar(raw, typ, key)
    return (base or Config()).replace(**values)


def default_config_text() -> str:
    return resources.files("flowmvs").joinpath("default.cfg").read_text()


def load_config(path: str | Path | None = None) -> Config:
    """Defaults from the packaged ``default.cfg``, overridden by ``path`` if given."""
    cfg = parse_config(default_config_text())
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = parse_config(text, cfg)
    return cfg
