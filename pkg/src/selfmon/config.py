"""Model, training and run configuration with the desk and paper-shape presets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

from .numcore import ConfigError
from .worldgen import BenchmarkParams, FeatureParams, WorldParams


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 30
    d_emb: int = 16
    d_x: int = 32
    d_h: int = 32
    d_v: int = 32
    d_g: int = 48
    d_a: int = 64
    l_max: int = 40
    k_max: int = 5
    dropout: float = 0.5
    use_bn: bool = True

    def __post_init__(self):
        if self.d_x % 2:
            raise ConfigError(f"positional encoding needs an even feature size, got d_x={self.d_x}")
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type == "int" and v <= 0:
                raise ConfigError(f"{f.name} must be positive, got {v}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch: int = 8
    epochs: int = 60
    lam: float = 0.5
    seed: int = 0
    max_steps: int = 10
    clip_norm: float = 5.0
    mode: str = "sample"
    eval_every: int = 1
    deterministic: bool = True

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.batch < 1 or self.epochs < 0 or self.max_steps < 1:
            raise ConfigError("batch, max_steps must be >= 1 and epochs >= 0")
        if self.mode not in ("sample", "teacher"):
            raise ConfigError(f"unknown rollout mode {self.mode!r}")


@dataclass(frozen=True)
class InferenceConfig:
    beam_size: int = 5
    max_steps: int = 10
    pm_score: bool = True


DESK_BENCHMARK = BenchmarkParams()
DESK_MODEL = ModelConfig()
DESK_TRAIN = TrainConfig()

# Shape parity with the published architecture; far too slow to train here.
PAPER_BENCHMARK = replace(
    BenchmarkParams(), features=FeatureParams(d_app=2048, tile=32), l_max=80,
    world=WorldParams())
PAPER_MODEL = ModelConfig(d_emb=256, d_x=512, d_h=512, d_v=2176, d_g=1024, d_a=64,
                          l_max=80, k_max=5)
PAPER_TRAIN = TrainConfig(lr=1e-4, batch=64)
PAPER_INFERENCE = InferenceConfig(beam_size=15)

PRESETS = {
    "desk": (DESK_BENCHMARK, DESK_MODEL, DESK_TRAIN, InferenceConfig()),
    "paper-shapes": (PAPER_BENCHMARK, PAPER_MODEL, PAPER_TRAIN, PAPER_INFERENCE),
}


def model_for_benchmark(bench_params: BenchmarkParams, vocab_size: int,
                        base: ModelConfig = DESK_MODEL) -> ModelConfig:
    return replace(base, vocab_size=vocab_size, d_v=bench_params.features.d_v,
                   l_max=bench_params.l_max, k_max=bench_params.world.k_max)


@dataclass
class RunConfig:
    """Everything a CLI run needs; flags map onto the ablation columns."""

    benchmark: str = "bench.json"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    progress_monitor: bool = True
    beam: bool = False
    progress_inference: bool = False
    threads: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        try:
            return cls(
                benchmark=d.get("benchmark", "bench.json"),
                model=ModelConfig(**d.get("model", {})),
                train=TrainConfig(**d.get("train", {})),
                inference=InferenceConfig(**d.get("inference", {})),
                progress_monitor=d.get("progress_monitor", True),
                beam=d.get("beam", False),
                progress_inference=d.get("progress_inference", False),
                threads=d.get("threads", 1),
            )
        except TypeError as exc:
            raise ConfigError(f"bad run config: {exc}") from None
