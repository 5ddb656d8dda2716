"""Role-tagged sequence layouts and captured attention records."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SYSTEM = "system"
IMAGE = "image"
INSTRUCTION = "instruction"
RESPONSE = "response"
ROLES = (SYSTEM, IMAGE, INSTRUCTION, RESPONSE)
TEXT_ROLES = frozenset({INSTRUCTION, RESPONSE})


def _contiguous(idx: list[int]) -> bool:
    return not idx or idx == list(range(idx[0], idx[-1] + 1))


@dataclass(frozen=True)
class SequenceLayout:
    """One role per absolute position.

    Image positions form a single block and response positions a single block
    at the very end; pruning bookkeeping relies on both.
    """

    roles: tuple[str, ...]

    def __post_init__(self):
        roles = tuple(self.roles)
        object.__setattr__(self, "roles", roles)
        bad = set(roles) - set(ROLES)
        if bad:
            raise ValueError(f"unknown roles {sorted(bad)}")
        if not _contiguous(self.image_positions):
            raise ValueError("image positions must be contiguous")
        resp = self.response_positions
        if not _contiguous(resp) or (resp and resp[-1] != len(roles) - 1):
            raise ValueError("response positions must be one block at the end")

    @classmethod
    def from_counts(cls, n_system: int, n_image: int, n_instruction: int, n_response: int):
        return cls(
            (SYSTEM,) * n_system
            + (IMAGE,) * n_image
            + (INSTRUCTION,) * n_instruction
            + (RESPONSE,) * n_response
        )

    def __len__(self) -> int:
        return len(self.roles)

    @property
    def positions(self) -> list[int]:
        return list(range(len(self.roles)))

    def positions_of(self, *roles: str) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r in roles]

    @property
    def image_positions(self) -> list[int]:
        return self.positions_of(IMAGE)

    @property
    def response_positions(self) -> list[int]:
        return self.positions_of(RESPONSE)

    def count(self, role: str) -> int:
        return sum(r == role for r in self.roles)


@dataclass
class AttentionRecord:
    """Head-averaged attention at one layer over the live positions.

    Row ``i`` / column ``j`` refer to original positions
    ``live_index_map[i]`` / ``live_index_map[j]``.
    """

    layer: int
    weights: np.ndarray
    live_index_map: tuple[int, ...]
    per_head: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.live_index_map = tuple(int(i) for i in self.live_index_map)
        n = len(self.live_index_map)
        if self.weights.shape != (n, n):
            raise ValueError(f"weights {self.weights.shape} do not match {n} live positions")
        if any(b <= a for a, b in zip(self.live_index_map, self.live_index_map[1:])):
            raise ValueError("live_index_map must be strictly increasing")

    def roles(self, layout: SequenceLayout) -> list[str]:
        return [layout.roles[p] for p in self.live_index_map]
