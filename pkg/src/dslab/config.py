"""Pipeline configuration: one JSON document carrying every stage's settings."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .align import LMConfig
from .benchmark import TASKS, scaled_quotas
from .encoder import EncoderConfig
from .errors import ConfigurationError
from .io import read_json
from .scene import SceneGenConfig

RATIO_GRID = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3)


@dataclass
class PipelineConfig:
    seed: int = 42
    # scene k of each set uses generator seed scene_seed_base + offset + k
    scene_seed_base: int = 0
    train_scenes: int = 256
    eval_scenes: int = 64
    eval_seed_offset: int = 100_000
    instruction_scenes: int = 8192
    instruct_seed_offset: int = 300_000
    bench_total: int = 500
    quotas: tuple[int, int, int, int] | None = None
    scorer_epochs: int = 15
    instructions_per_kind: int = 1
    ratio_grid: tuple[float, ...] = RATIO_GRID
    probe_items: int = 200
    max_new_tokens: int = 24
    scenes: SceneGenConfig = field(default_factory=SceneGenConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    lm: LMConfig = field(default_factory=LMConfig)

    def resolved_quotas(self) -> tuple[int, ...]:
        if self.quotas is not None:
            return tuple(self.quotas)
        scaled = scaled_quotas(self.bench_total)
        return tuple(scaled[t] for t in TASKS)

    def validate(self) -> None:
        if min(self.train_scenes, self.eval_scenes, self.instruction_scenes) < 1:
            raise ConfigurationError("scene counts must be >= 1")
        if self.eval_seed_offset < self.train_scenes:
            raise ConfigurationError("eval seeds overlap the training seeds")
        if self.instruct_seed_offset < self.eval_seed_offset + self.eval_scenes:
            raise ConfigurationError("instruction seeds overlap the eval seeds")
        if self.scene_seed_base < 0 or self.scene_seed_base + self.instruct_seed_offset + self.instruction_scenes > 2**63:
            raise ConfigurationError("scene seeds must be non-negative 63-bit integers")
        if self.quotas is not None and (len(self.quotas) != 4 or min(self.quotas) < 0):
            raise ConfigurationError("quotas must be four non-negative integers")
        if not self.ratio_grid or any(not 0 <= r <= 1 for r in self.ratio_grid):
            raise ConfigurationError("ratio_grid values must lie in [0, 1]")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")
        self.scenes.validate()
        self.encoder.validate()
        self.lm.validate()
        if self.encoder.image_size != self.scenes.width or self.scenes.width != self.scenes.height:
            raise ConfigurationError("encoder image_size must match the square scene size")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scenes"] = self.scenes.to_dict()
        d["ratio_grid"] = list(self.ratio_grid)
        d["quotas"] = list(self.quotas) if self.quotas is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        kw = {k: v for k, v in d.items() if k not in ("scenes", "encoder", "lm")}
        if kw.get("quotas") is not None:
            kw["quotas"] = tuple(int(q) for q in kw["quotas"])
        if "ratio_grid" in kw:
            kw["ratio_grid"] = tuple(float(r) for r in kw["ratio_grid"])
        try:
            cfg = cls(
                **kw,
                scenes=SceneGenConfig.from_dict(d.get("scenes", {})),
                encoder=EncoderConfig.from_dict(d.get("encoder", {})),
                lm=LMConfig.from_dict(d.get("lm", {})),
            )
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "PipelineConfig":
        return cls() if path is None else cls.from_dict(read_json(path))
