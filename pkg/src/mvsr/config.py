"""Pipeline configuration: typed defaults plus a plain ``key = value`` file format.

Lines are ``key = value``; ``#`` starts a comment.  Lists are comma
separated.  Unknown keys and unparsable values are rejected.  Example::

    seed = 3
    refine.steps_m = 0.05, 0.05, 0.025
    fusion.rel_tol = 0.01
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError


@dataclass
class PipelineConfig:
    seed: int = 0
    # plane sweep
    sweep_start: float = 0.5
    sweep_step: float = 0.05
    sweep_count: int = 96
    # features and views
    extractor: str = "handcrafted32"
    extractor_seed: int = 0
    source_views: int = 4
    # nested refinement
    refine_outer: int = 2
    refine_steps_m: tuple = (0.05, 0.05, 0.025)
    refine_h: int = 3
    refine_direction: str = "ray"
    # fusion and evaluation
    fusion_rel_tol: float = 0.03
    fusion_min_consistent: int = 2
    fusion_average: bool = False
    eval_tau: float = 0.05
    eval_min_gt: float = 0.5
    eval_gt_density: float = 2000.0
    # synthetic data
    data_boxes: int = 4
    data_frames: int = 24
    data_orbit_step_deg: float = 10.0
    data_train_seeds: tuple = (100, 101, 102, 103, 104, 105, 106, 107)
    data_val_seeds: tuple = (200, 201)
    data_test_seeds: tuple = (300, 301)
    # training
    train_iterations: int = 120
    train_slice: int = 7
    train_lr: float = 1e-3
    train_plateau_patience: int = 3
    train_val_every: int = 40
    train_dtype: str = "float32"
    train_mode: str = "full"
    train_scale_range: tuple = (0.9, 1.1)
    train_max_seconds: float = 0.0
    train_grad_pixels: float = 0.25
    train_upsample_frames: int = 2

    @staticmethod
    def keys() -> list[str]:
        return [_to_key(f.name) for f in dataclasses.fields(PipelineConfig)]

    def to_text(self) -> str:
        """Fully resolved configuration in the file format."""
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{_to_key(f.name)} = {_format(v)}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)


_GROUPS = ("sweep", "refine", "fusion", "eval", "data", "train")


def _to_key(name: str) -> str:
    head, _, rest = name.partition("_")
    return f"{head}.{rest}" if head in _GROUPS and rest else name


def _to_field(key: str) -> str:
    return key.replace(".", "_")


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    return str(v)


def _parse(text: str, like):
    text = text.strip()
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            items = [x for x in (s.strip() for s in text.split(",")) if x]
            kind = type(like[0]) if like else float
            return tuple(kind(x) for x in items)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {text!r}") from exc
    return text


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    cfg = base or PipelineConfig()
    valid = {_to_field(k) for k in PipelineConfig.keys()}
    changes = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        name = _to_field(key)
        if name not in valid or _to_key(name) != key:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            changes[name] = _parse(value, getattr(cfg, name))
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {key}: {exc}") from None
    cfg = cfg.replace(**changes)
    validate(cfg)
    return cfg


def load_config(path) -> PipelineConfig:
    return parse_config(Path(path).read_text())


def validate(cfg: PipelineConfig) -> None:
    checks = [
        (cfg.sweep_step > 0 and cfg.sweep_start > 0 and cfg.sweep_count >= 1, "sweep grid"),
        (cfg.refine_outer >= 0 and cfg.refine_h >= 0 and all(s > 0 for s in cfg.refine_steps_m), "refine schedule"),
        (cfg.refine_direction in ("ray", "principal"), "refine.direction must be ray or principal"),
        (cfg.fusion_rel_tol > 0 and cfg.fusion_min_consistent >= 1, "fusion thresholds"),
        (cfg.extractor in ("handcrafted32", "learned"), "extractor must be handcrafted32 or learned"),
        (cfg.train_mode in ("full", "no3d", "single_scale", "avg_feats"), "train.mode"),
        (cfg.train_dtype in ("float32", "float64"), "train.dtype"),
        (cfg.train_slice >= 2 and cfg.data_frames >= cfg.train_slice, "train.slice"),
        (len(cfg.train_scale_range) == 2 and 0 < cfg.train_scale_range[0] <= cfg.train_scale_range[1],
         "train.scale_range"),
        (0 < cfg.train_grad_pixels <= 1 and cfg.train_upsample_frames >= 1, "train sampling"),
        (cfg.eval_tau > 0 and cfg.eval_gt_density > 0, "positive sizes"),
    ]
    for ok, what in checks:
        if not ok:
            raise ConfigError(f"invalid configuration: {what}")


__all__ = ["PipelineConfig", "load_config", "parse_config", "validate"]
