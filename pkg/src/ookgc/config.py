from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

MODES = ("no_rules", "hard_rules", "soft_rules", "full")


@dataclass
class TrainConfig:
    lr: float = 0.02
    dropout: float = 0.2
    reg: float = 0.01
    C: float = 1.0
    dim: int = 200
    epochs: int = 200
    negatives: int = 1
    batch_size: int = 512
    refresh: str = "epoch"  # "epoch" or "step"
    mode: str = "full"
    seed: int = 0
    decoder: str = "distmult"
    margin: float = 1.0
    structure_layers: int = 2
    strict_query: bool = False
    alpha_hc: float = 0.01
    alpha_sc: float = 0.01
    alpha_pcra: float = 0.01
    grounding_cap: int | None = 1000
    top_k: int | None = 2000
    patience: int = 10
    eval_every: int = 1
    label_sweeps: int = 2

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.refresh not in ("epoch", "step"):
            raise ValueError("refresh must be 'epoch' or 'step'")
        if self.negatives < 1:
            raise ValueError("need at least one negative per positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
