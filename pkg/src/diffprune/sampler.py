"""Low-confidence remasking sampler with persistent first-step pruning."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import ModelConfig, Params, forward, forward_with_midlayer_prune
from .numerics import OpCounter
from .pruning import KeptSet, PruneSchedule, apply_persistence
from .seeding import substream
from .sequence import IMAGE, SequenceLayout


def remask_counts(gen_len: int, steps: int) -> list[int]:
    """Per-step commit counts: as equal as possible, remainder on the earliest steps."""
    if not 1 <= steps <= gen_len:
        raise ValueError(f"need 1 <= steps <= gen_len, got steps={steps}, gen_len={gen_len}")
    base, rem = divmod(gen_len, steps)
    return [base + (1 if t < rem else 0) for t in range(steps)]


@dataclass(frozen=True)
class GenerationConfig:
    gen_len: int
    steps: int
    schedule_kind: str = "linear"
    seed: int = 0
    prune: PruneSchedule | None = None

    def __post_init__(self):
        if not 1 <= self.steps <= self.gen_len:
            raise ValueError(f"need 1 <= steps <= gen_len, got {self.steps} and {self.gen_len}")
        if self.schedule_kind != "linear":
            raise ValueError(f"unsupported schedule_kind {self.schedule_kind!r}")
        if self.prune is not None and self.prune.step > self.steps:
            raise ValueError(f"prune step {self.prune.step} is beyond the {self.steps} steps")


@dataclass
class StepTrace:
    step: int
    unmasked: list[int]
    committed_tokens: list[int]
    live_per_layer: list[int]
    image_live_per_layer: list[int]
    kept_image_indices: list[int]


@dataclass
class SamplerTrace:
    steps: list[StepTrace] = field(default_factory=list)
    final_tokens: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def generate(
    cfg: ModelConfig,
    params: Params,
    tokens,
    layout: SequenceLayout,
    gcfg: GenerationConfig,
    counter: OpCounter | None = None,
    mask_id: int | None = None,
    rng: np.random.Generator | None = None,
):
    """Fill the response block of ``tokens`` in ``gcfg.steps`` denoising steps.

    Each step commits the ``remask_counts`` most confident still-masked
    positions (greedy argmax, ties to the lower position); committed tokens
    are never remasked. With a prune schedule, the firing step runs the
    mid-layer prune and freezes the kept set; persistent schedules then feed
    the locked keep mask to every later step.

    Random pruning draws from ``rng`` (default: the ``random-prune`` stream
    of ``gcfg.seed``). Returns ``(response_tokens, trace)``.
    """
    x = np.array(tokens, dtype=np.int64)
    resp = layout.response_positions
    if len(resp) != gcfg.gen_len:
        raise ValueError(f"layout has {len(resp)} response positions, config says {gcfg.gen_len}")
    if mask_id is not None and not np.all(x[resp] == mask_id):
        raise ValueError("response block must start fully masked")
    prune = gcfg.prune
    if prune is not None:
        prune.check_layers(cfg.layers)
    if rng is None:
        rng = substream(gcfg.seed, "random-prune")
    counts = remask_counts(gcfg.gen_len, gcfg.steps)
    masked = list(resp)
    trace = SamplerTrace()
    kept: KeptSet | None = None

    for t, n_commit in enumerate(counts, start=1):
        log: list = []
        if prune is not None and (t == prune.step or (t > prune.step and not prune.persistent)):
            logits, _, ks = forward_with_midlayer_prune(
                cfg, params, x, layout, prune, counter=counter, live_log=log, rng=rng, step=t
            )
            if t == prune.step:
                kept = ks.freeze()
            step_kept = list(ks.kept_image_indices)
        elif kept is not None and prune.persistent:
            keep = apply_persistence(kept, t, layout)
            logits, _ = forward(cfg, params, x, layout, keep=keep, counter=counter, live_log=log)
            step_kept = list(kept.kept_image_indices)
        else:
            logits, _ = forward(cfg, params, x, layout, counter=counter, live_log=log)
            step_kept = list(layout.image_positions)

        # response positions are always live and always last
        resp_logits = logits[-len(resp):]
        z = resp_logits - resp_logits.max(axis=1, keepdims=True)
        probs = np.exp(z)
        probs /= probs.sum(axis=1, keepdims=True)
        conf = probs.max(axis=1)
        pred = resp_logits.argmax(axis=1)
        offset = resp[0]
        order = sorted(masked, key=lambda p: (-conf[p - offset], p))
        chosen = sorted(order[:n_commit])
        for p in chosen:
            x[p] = pred[p - offset]
        masked = [p for p in masked if p not in set(chosen)]
        trace.steps.append(
            StepTrace(
                step=t,
                unmasked=chosen,
                committed_tokens=[int(x[p]) for p in chosen],
                live_per_layer=[n for _, n, _ in log],
                image_live_per_layer=[k for _, _, k in log],
                kept_image_indices=step_kept,
            )
        )
    trace.final_tokens = [int(v) for v in x[resp]]
    return x[resp].copy(), trace
