"""Pipeline configuration: one flat ``key = value`` file, overridable by flags."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

# Per-stage seeds are the global seed plus a fixed offset.
SEED_OFFSETS = {"register": 101, "split": 202, "train": 303}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    threads: int = 1
    # pyramid
    levels: int = 8
    factor: int = 2
    # registration
    register_level: int = 7
    fast_threshold: int = 20
    max_keypoints: int = 500
    match_ratio: float = 0.8
    inlier_px: float = 3.0
    max_iters: int = 2000
    # ink ROI
    detect_level: int = 7
    crop_level: int = 1
    min_ink_score: int = 30
    min_diff: int = 20
    min_skeleton_px: int = 30
    margin_px: int = 4
    # cell graph
    qs_kernel_size: float = 3.0
    qs_max_dist: float = 8.0
    qs_ratio: float = 0.5
    cut_threshold: float = 59.0
    grow_threshold: float = 59.0
    # patches
    patch_size: int = 128
    stride: int = 64
    white_cutoff: int = 200
    max_background: float = 0.75
    split_counts: str = "published"
    # training / evaluation
    learning_rate: float = 0.005
    momentum: float = 0.9
    batch_size: int = 32
    max_epochs: int = 500
    score_threshold: float = 0.5

    def __post_init__(self):
        checks = [
            (self.threads >= 1, "threads must be >= 1"),
            (self.levels >= 1, "levels must be >= 1"),
            (self.factor >= 2, "factor must be >= 2"),
            (self.fast_threshold >= 1, "fast_threshold must be >= 1"),
            (self.max_keypoints >= 4, "max_keypoints must be >= 4"),
            (0 < self.match_ratio <= 1, "match_ratio must be in (0, 1]"),
            (self.inlier_px > 0, "inlier_px must be > 0"),
            (self.max_iters >= 1, "max_iters must be >= 1"),
            (self.min_skeleton_px >= 1, "min_skeleton_px must be >= 1"),
            (self.margin_px >= 0, "margin_px must be >= 0"),
            (self.qs_kernel_size > 0, "qs_kernel_size must be > 0"),
            (self.qs_max_dist >= self.qs_kernel_size, "qs_max_dist must be >= qs_kernel_size"),
            (0 < self.qs_ratio <= 1, "qs_ratio must be in (0, 1]"),
            (self.cut_threshold >= 0, "cut_threshold must be >= 0"),
            (self.grow_threshold >= 0, "grow_threshold must be >= 0"),
            (self.patch_size >= 1 and self.stride >= 1, "patch_size and stride must be >= 1"),
            (0 <= self.white_cutoff <= 255, "white_cutoff must be in 0..255"),
            (0 <= self.max_background <= 1, "max_background must be in [0, 1]"),
            (self.split_counts in ("published", "proportional"), "split_counts must be published|proportional"),
            (self.learning_rate > 0, "learning_rate must be > 0"),
            (0 <= self.momentum < 1, "momentum must be in [0, 1)"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.max_epochs >= 1, "max_epochs must be >= 1"),
            (0 <= self.score_threshold <= 1, "score_threshold must be in [0, 1]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def stage_seed(self, stage: str) -> int:
        return self.seed + SEED_OFFSETS[stage]

    def snapshot(self) -> dict:
        return asdict(self)

    def with_overrides(self, values: dict) -> "PipelineConfig":
        return replace(self, **coerce(values))


_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def coerce(values: dict) -> dict:
    out = {}
    for key, raw in values.items():
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        typ = _TYPES[key]
        try:
            out[key] = {"int": int, "float": float, "str": str}[typ](raw)
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {raw!r} as {typ}") from None
    return out


def parse_config(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key] = val
    return values


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    values = {}
    if path is not None:
        values.update(parse_config(Path(path).read_text(encoding="utf-8"), str(path)))
    values.update(overrides or {})
    return PipelineConfig().with_overrides(values)
