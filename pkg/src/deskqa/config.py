"""Run configuration shared by training, inference, and the CLI."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, asdict


class ConfigError(Exception):
    pass


@dataclass
class TrainConfig:
    # Pipeline shape
    retrieved_paragraphs: int = 6  # K
    retrieved_segments: int = 2  # N
    proposed_answers: int = 10  # M
    nms_threshold: int = 5  # M*
    early_exit_depth: int = 2  # J
    max_len: int = 64  # assembled sequence length
    window: int | None = None  # window length; None -> max_len - |q| - 3
    stride: int = 28
    merge_threshold: int = 200
    max_answer_len: int = 8
    # Optimization
    epochs: int = 20
    learning_rate: float = 1e-3
    warmup_fraction: float = 0.1
    batch_size: int = 8  # over the retained-segment set
    dropout: float = 0.1
    grad_clip: float = 1.0
    seed: int = 0
    # Model
    hidden: int = 32
    blocks: int = 4
    attention_heads: int = 4
    # Inference
    weight_retrieve: float = 1.4
    weight_read: float = 1.0
    weight_rerank: float = 1.4
    rerank_soft_norm: str = "softmax"  # or "raw" for the unnormalized sum

    def __post_init__(self):
        if self.early_exit_depth >= self.blocks:
            raise ConfigError("early_exit_depth must be smaller than block count")
        if self.window is not None and not 1 <= self.stride <= self.window:
            raise ConfigError("stride must satisfy 1 <= stride <= window")
        if self.rerank_soft_norm not in ("softmax", "raw"):
            raise ConfigError(f"unknown rerank_soft_norm {self.rerank_soft_norm!r}")
        positive = (
            "retrieved_paragraphs", "retrieved_segments", "proposed_answers",
            "nms_threshold", "early_exit_depth", "max_len", "stride",
            "merge_threshold", "max_answer_len", "learning_rate", "batch_size",
            "grad_clip", "hidden", "blocks", "attention_heads",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("epochs", "seed", "dropout", "warmup_fraction",
                     "weight_retrieve", "weight_read", "weight_rerank"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)
