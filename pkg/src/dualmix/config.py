"""Run configuration shared by the training loop and the CLI."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from dualmix.errors import ConfigError, DualmixError
from dualmix.mixup import INSTANCE, PROTOTYPE, MixupConfig


@dataclass(frozen=True)
class RunConfig:
    n_way: int = 5
    k_shot: int = 5
    m_query: int = 10
    l_hops: int = 2
    hidden_dim: int = 16
    eta: float = 0.5
    gamma: float = 0.5
    within_ratio: float = 1.0
    t_org: int = 5
    t_aug: int | None = None
    include_original: bool = True
    across_mode: str = PROTOTYPE
    regenerate_mixup: bool = True
    lr: float = 1e-2
    weight_decay: float = 0.0
    max_epochs: int = 2000
    eval_every: int = 10
    val_tasks: int = 20
    patience: int = 5
    seed: int = 0
    eval_tasks: int = 50
    no_within: bool = False
    no_across: bool = False
    no_degree: bool = False
    epsilon: float = 0.05
    rademacher_trials: int = 2000
    embedding_scale: float | None = None  # None: number of graph nodes

    def __post_init__(self):
        for name in ("n_way", "k_shot", "m_query", "hidden_dim", "eval_every", "val_tasks", "patience", "eval_tasks"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("l_hops", "t_org", "max_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.t_aug is not None and self.t_aug < 0:
            raise ConfigError(f"t_aug must be non-negative, got {self.t_aug}")
        if self.across_mode not in (PROTOTYPE, INSTANCE):
            raise ConfigError(f"across_mode must be '{PROTOTYPE}' or '{INSTANCE}'")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0 < self.epsilon < 1:
            raise ConfigError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.embedding_scale is not None and not self.embedding_scale > 0:
            raise ConfigError(f"embedding_scale must be positive, got {self.embedding_scale}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if not self.include_original and self.effective_t_aug == 0:
            raise ConfigError("include_original=false with no interpolated tasks leaves nothing to train on")
        try:
            self.mixup()
        except DualmixError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def effective_t_aug(self) -> int:
        """Interpolated tasks per epoch; ``no_across`` forces zero."""
        if self.no_across:
            return 0
        return self.t_org if self.t_aug is None else self.t_aug

    @property
    def uses_mixup(self) -> bool:
        return self.effective_within_ratio > 0 or self.effective_t_aug > 0

    @property
    def effective_within_ratio(self) -> float:
        return 0.0 if self.no_within else self.within_ratio

    def resolved_embedding_scale(self, n_nodes: int) -> float:
        return float(n_nodes) if self.embedding_scale is None else float(self.embedding_scale)

    def mixup(self) -> MixupConfig:
        return MixupConfig(
            eta=self.eta,
            gamma=self.gamma,
            within_ratio=self.effective_within_ratio,
            t_aug=self.effective_t_aug,
            include_original=self.include_original,
            across_mode=self.across_mode,
        )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return RunConfig.from_json(raw)
