"""Visual-token saliency, bottom-R selection and the locked kept set."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .sequence import IMAGE, INSTRUCTION, RESPONSE, AttentionRecord, SequenceLayout

STRATEGIES = ("attention", "random")

# Which query rows feed the saliency average.
QUERY_SETS = {
    "text": frozenset({INSTRUCTION, RESPONSE}),
    "response": frozenset({RESPONSE}),
    "all": None,
}


def n_removed(n_image: int, ratio: float) -> int:
    """floor(ratio * n_image), tolerant of ratios like 20/36 that land a hair under an integer."""
    return math.floor(ratio * n_image + 1e-9)


def n_kept(n_image: int, ratio: float) -> int:
    return n_image - n_removed(n_image, ratio)


@dataclass(frozen=True)
class PruneSchedule:
    """When and how hard to prune.

    ``K`` is the 1-based layer whose attention is scored; layers after it run
    on the reduced sequence. ``M`` is carried for analysis only.
    """

    K: int
    R: float
    step: int = 1
    persistent: bool = True
    M: int | None = None
    strategy: str = "attention"
    queries: str = "text"

    def __post_init__(self):
        if not 0.0 <= self.R < 1.0:
            raise ValueError(f"prune ratio must lie in [0, 1), got {self.R}")
        if self.K < 1:
            raise ValueError(f"pruning layer must be >= 1, got {self.K}")
        if self.step < 1:
            raise ValueError(f"prune step must be >= 1, got {self.step}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.queries not in QUERY_SETS:
            raise ValueError(f"unknown saliency query set {self.queries!r}")
        if self.M is not None and not 1 <= self.M <= self.K:
            raise ValueError("M must satisfy 1 <= M <= K")

    def check_layers(self, n_layers: int) -> None:
        if self.K >= n_layers:
            raise ValueError(f"pruning layer K={self.K} must be below the layer count {n_layers}")


@dataclass
class KeptSet:
    """Sorted original positions of the image tokens that survive pruning."""

    kept_image_indices: tuple[int, ...]
    created_at_step: int = 1
    n_image: int | None = None
    frozen: bool = False

    def __post_init__(self):
        idx = tuple(sorted(int(i) for i in self.kept_image_indices))
        if len(set(idx)) != len(idx):
            raise ValueError("duplicate kept indices")
        object.__setattr__(self, "kept_image_indices", idx)

    def __setattr__(self, name, value):
        if getattr(self, "frozen", False):
            raise AttributeError("KeptSet is frozen")
        object.__setattr__(self, name, value)

    def __len__(self) -> int:
        return len(self.kept_image_indices)

    def freeze(self) -> "KeptSet":
        if not self.frozen:
            object.__setattr__(self, "frozen", True)
        return self

    def to_dict(self) -> dict:
        return {
            "kept_image_indices": list(self.kept_image_indices),
            "created_at_step": self.created_at_step,
            "frozen": self.frozen,
            "n_image": self.n_image,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "KeptSet":
        ks = cls(tuple(d["kept_image_indices"]), d["created_at_step"], d.get("n_image"))
        return ks.freeze() if d["frozen"] else ks

    @classmethod
    def from_json(cls, s: str) -> "KeptSet":
        return cls.from_dict(json.loads(s))


def saliency_scores(
    record: AttentionRecord, layout: SequenceLayout, queries: str = "text"
) -> dict[int, float]:
    """Mean attention each live image key receives from the selected query rows.

    Returns ``{original position: score}`` in ascending position order.
    """
    roles = record.roles(layout)
    allowed = QUERY_SETS[queries]
    rows = [i for i, r in enumerate(roles) if allowed is None or r in allowed]
    if not rows:
        raise ValueError(f"no live {queries!r} queries; saliency is undefined")
    cols = [j for j, r in enumerate(roles) if r == IMAGE]
    mean = record.weights[np.ix_(rows, cols)].mean(axis=0)
    return {record.live_index_map[j]: float(s) for j, s in zip(cols, mean)}


def select_kept(scores: Mapping[int, float], ratio: float, step: int = 1) -> KeptSet:
    """Keep the n - floor(R n) highest scores; ties go to the lower position."""
    if not scores:
        raise ValueError("cannot select from an empty score list")
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"prune ratio must lie in [0, 1), got {ratio}")
    k = n_kept(len(scores), ratio)
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return KeptSet(tuple(p for p, _ in ranked[:k]), step, n_image=len(scores))


def random_kept(
    positions: list[int], ratio: float, rng: np.random.Generator, step: int = 1
) -> KeptSet:
    """Uniformly random kept set of the same size attention pruning would keep."""
    if not positions:
        raise ValueError("cannot select from an empty position list")
    k = n_kept(len(positions), ratio)
    pick = rng.choice(len(positions), size=k, replace=False)
    return KeptSet(tuple(positions[i] for i in pick), step, n_image=len(positions))


def apply_persistence(kept: KeptSet, step: int, layout: SequenceLayout) -> list[bool]:
    """Keep mask for a later denoising step: every non-image position plus the kept images."""
    if not kept.frozen:
        raise ValueError("kept set must be frozen before it is reused")
    if step <= kept.created_at_step:
        raise ValueError(
            f"persistence applies after step {kept.created_at_step}, got step {step}"
        )
    image = set(layout.image_positions)
    stray = set(kept.kept_image_indices) - image
    if stray:
        raise ValueError(f"kept indices {sorted(stray)} are not image positions")
    keep = set(kept.kept_image_indices)
    return [p not in image or p in keep for p in range(len(layout))]
