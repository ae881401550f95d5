"""Run configuration: model dimensions, ensemble gates, and training knobs."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

from .errors import DataError

# Layer counts the parallel-layer search covers.
ALLOWED_LAYER_COUNTS = (1, 2, 3, 4)

SEED_ENV_VAR = "MOCA_SEED"


@dataclass
class TrainSettings:
    steps: int = 500
    batch_size: int = 8
    lr: float = 0.1
    objective: str = "mlm"

    def __post_init__(self):
        if self.steps < 1:
            raise DataError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise DataError(f"batch_size must be >= 1, got {self.batch_size}")
        # lr = 0 is allowed as an explicit no-op run.
        if self.lr < 0:
            raise DataError(f"lr must be >= 0, got {self.lr}")
        if self.objective not in ("mlm", "mc"):
            raise DataError(f"objective must be mlm or mc, got {self.objective!r}")


@dataclass
class RunConfig:
    n: int = 180              # fixed input sequence length
    d: int = 64               # hidden width (1024 mirrors the full-scale setup)
    heads: int = 8            # attention heads per guided-attention layer
    layers: int = 2           # parallel layers per block, searched in {1,2,3,4}
    encoder_blocks: int = 2   # self-attention blocks in the toy text encoder
    grid: int = 14            # diagrams are cut into grid x grid patches
    patch_dim: int = 4        # flattened pixels per patch
    retrieval_budget: int = 130
    mu: float = 0.6
    lambda1: float = 1.0 / 3.0
    lambda2: float = 1.0 / 3.0
    seed: int = 0
    split_heads: bool = False  # conventional d/H head width instead of full-width heads
    train: TrainSettings = field(default_factory=TrainSettings)

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainSettings(**self.train)
        if self.n < 8:
            raise DataError(f"n must be >= 8, got {self.n}")
        if self.d < 1 or self.heads < 1 or self.encoder_blocks < 0:
            raise DataError("d and heads must be positive; encoder_blocks non-negative")
        if self.layers not in ALLOWED_LAYER_COUNTS:
            raise DataError(
                f"layers must be one of {ALLOWED_LAYER_COUNTS}, got {self.layers}"
            )
        if self.split_heads and self.d % self.heads != 0:
            raise DataError("split_heads requires d divisible by heads")
        if self.grid < 1 or self.patch_dim < 1:
            raise DataError("grid and patch_dim must be positive")
        if self.retrieval_budget < 1:
            raise DataError("retrieval_budget must be >= 1")
        if not 0.0 <= self.mu <= 1.0:
            raise DataError(f"mu must lie in [0, 1], got {self.mu}")
        if not (0.0 <= self.lambda1 <= 1.0 and 0.0 <= self.lambda2 <= 1.0):
            raise DataError("lambda weights must lie in [0, 1]")
        if self.lambda1 + self.lambda2 > 1.0 + 1e-12:
            raise DataError("lambda1 + lambda2 must not exceed 1")

    @property
    def patches(self) -> int:
        return self.grid * self.grid

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise DataError(f"unknown config fields: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}: invalid config JSON ({e})") from e
        return cls.from_dict(obj)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]


def resolve_seed(config_seed: int, flag_seed: int | None = None) -> int:
    """Seed precedence: MOCA_SEED env var, then the CLI flag, then config."""
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError as e:
            raise DataError(f"{SEED_ENV_VAR} must be an integer, got {env!r}") from e
    if flag_seed is not None:
        return flag_seed
    return config_seed
