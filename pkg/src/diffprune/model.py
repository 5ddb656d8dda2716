"""Toy masked-diffusion multimodal transformer.

Pre-norm blocks (RMS norm, no biases), learned absolute position embeddings
indexed by *original* position, and a tied embedding/unembedding matrix.
Attention is bidirectional by default; ``attention_mode="causal"`` gives
the autoregressive contrast. There is no KV cache: every forward attends
over all live tokens at every layer.

Pruned tokens are physically removed (smaller arrays), never masked in
place, so the op counter sees the reduced cost directly.
"""
from __future__ import annotations

import base64
import json
import math
from contextlib import nullcontext
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .numerics import OpCounter, contract, rms_norm, softmax
from .pruning import KeptSet, PruneSchedule, random_kept, saliency_scores, select_kept
from .sequence import IMAGE, AttentionRecord, SequenceLayout

CHECKPOINT_FORMAT = "diffprune-checkpoint"
CHECKPOINT_VERSION = 1
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    width: int
    heads: int
    ffn_width: int
    vocab: int
    max_seq: int
    attention_mode: str = "bidirectional"

    def __post_init__(self):
        for name in ("layers", "width", "heads", "ffn_width", "vocab", "max_seq"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.layers < 2:
            raise ValueError("need at least 2 layers")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.attention_mode not in ("bidirectional", "causal"):
            raise ValueError(f"unknown attention_mode {self.attention_mode!r}")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    def with_mode(self, mode: str) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), "attention_mode": mode})


Params = dict[str, np.ndarray]


def layer_param_names(l: int) -> list[str]:
    return [f"l{l}.{n}" for n in ("norm1", "wq", "wk", "wv", "wo", "norm2", "w1", "w2")]


def param_names(cfg: ModelConfig) -> list[str]:
    names = ["tok_emb", "pos_emb"]
    for l in range(1, cfg.layers + 1):
        names += layer_param_names(l)
    return names + ["final_norm"]


def init_params(cfg: ModelConfig, seed: int = 0) -> Params:
    rng = np.random.default_rng(seed)
    d, m = cfg.width, cfg.ffn_width
    p: Params = {
        "tok_emb": rng.normal(0.0, 1.0 / math.sqrt(d), (cfg.vocab, d)),
        "pos_emb": rng.normal(0.0, 1.0 / math.sqrt(d), (cfg.max_seq, d)),
    }
    out_scale = 1.0 / math.sqrt(2 * cfg.layers)
    for l in range(1, cfg.layers + 1):
        p[f"l{l}.norm1"] = np.ones(d)
        for w in ("wq", "wk", "wv"):
            p[f"l{l}.{w}"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, d))
        p[f"l{l}.wo"] = rng.normal(0.0, out_scale / math.sqrt(d), (d, d))
        p[f"l{l}.norm2"] = np.ones(d)
        p[f"l{l}.w1"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, m))
        p[f"l{l}.w2"] = rng.normal(0.0, out_scale / math.sqrt(m), (m, d))
    p["final_norm"] = np.ones(d)
    return p


def gelu(u: np.ndarray) -> np.ndarray:
    return 0.5 * u * (1.0 + np.tanh(_GELU_C * (u + 0.044715 * u * u * u)))


def attention_bias(cfg: ModelConfig, positions: np.ndarray) -> np.ndarray | None:
    """Additive score mask over live positions (None when bidirectional)."""
    if cfg.attention_mode == "bidirectional":
        return None
    positions = np.asarray(positions)
    return np.where(positions[None, :] > positions[:, None], -np.inf, 0.0)


def split_heads(x: np.ndarray, h: int) -> np.ndarray:
    b, n, d = x.shape
    return x.reshape(b, n, h, d // h).transpose(0, 2, 1, 3)


def merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def block_forward(
    params: Params,
    cfg: ModelConfig,
    l: int,
    x: np.ndarray,
    bias: np.ndarray | None,
    counter: OpCounter | None = None,
    cache: dict | None = None,
):
    """One pre-norm block on ``x`` of shape (batch, n, d).

    Returns the new residual stream and the per-head attention probabilities
    (batch, heads, n, n). Intermediates land in ``cache`` when given, for the
    backward pass in :mod:`diffprune.training`.
    """
    g = lambda name: params[f"l{l}.{name}"]
    h = cfg.heads
    a = rms_norm(x, g("norm1"))
    q = split_heads(contract(a, g("wq"), counter), h)
    k = split_heads(contract(a, g("wk"), counter), h)
    v = split_heads(contract(a, g("wv"), counter), h)
    scores = contract(q, k.transpose(0, 1, 3, 2), counter) / math.sqrt(cfg.head_dim)
    if bias is not None:
        scores = scores + bias
    probs = softmax(scores, counter)
    ctx = merge_heads(contract(probs, v, counter))
    x1 = x + contract(ctx, g("wo"), counter)
    b = rms_norm(x1, g("norm2"))
    u = contract(b, g("w1"), counter)
    z = gelu(u)
    out = x1 + contract(z, g("w2"), counter)
    if cache is not None:
        cache.update(x=x, a=a, q=q, k=k, v=v, probs=probs, ctx=ctx, x1=x1, b=b, u=u, z=z)
    return out, probs


def embed(params: Params, tokens: np.ndarray, positions: np.ndarray) -> np.ndarray:
    return params["tok_emb"][tokens] + params["pos_emb"][positions]


def unembed(params: Params, x: np.ndarray, counter: OpCounter | None = None):
    f = rms_norm(x, params["final_norm"])
    return contract(f, params["tok_emb"].T, counter), f


def _check_inputs(cfg: ModelConfig, tokens, layout: SequenceLayout, keep):
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or len(tokens) != len(layout):
        raise ValueError(f"{tokens.shape} tokens do not match a layout of {len(layout)}")
    if len(layout) > cfg.max_seq:
        raise ValueError(f"sequence of {len(layout)} exceeds max_seq {cfg.max_seq}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise ValueError(f"token ids must lie in [0, {cfg.vocab})")
    if keep is None:
        keep = [True] * len(layout)
    if len(keep) != len(layout):
        raise ValueError("keep mask needs one flag per position")
    for p, (flag, role) in enumerate(zip(keep, layout.roles)):
        if not flag and role != IMAGE:
            raise ValueError(f"position {p} has role {role!r}; only image tokens can be dropped")
    return tokens, [p for p, flag in enumerate(keep) if flag]


def _record(layer: int, probs: np.ndarray, live: list[int], per_head: bool) -> AttentionRecord:
    return AttentionRecord(
        layer, probs[0].mean(axis=0), tuple(live), probs[0].copy() if per_head else None
    )


def _run(
    cfg, params, tokens, layout, live, capture_layers, counter, per_head, live_log,
    prune_after=None, choose=None,
):
    n_img = lambda: sum(layout.roles[p] == IMAGE for p in live)
    x = embed(params, tokens[live][None, :], np.asarray(live))
    records = []
    kept = None
    for l in range(1, cfg.layers + 1):
        if live_log is not None:
            live_log.append((l, len(live), n_img()))
        ctx = counter.op_class(f"layer{l}") if counter is not None else nullcontext()
        with ctx:
            x, probs = block_forward(params, cfg, l, x, attention_bias(cfg, np.asarray(live)), counter)
        if l in capture_layers or l == prune_after:
            rec = _record(l, probs, live, per_head)
            if l in capture_layers:
                records.append(rec)
        if l == prune_after:
            kept = choose(rec, live)
            survivors = set(kept.kept_image_indices)
            rows = [i for i, p in enumerate(live) if layout.roles[p] != IMAGE or p in survivors]
            if len(rows) < len(live):
                x = x[:, rows]
                live = [live[i] for i in rows]
    ctx = counter.op_class("head") if counter is not None else nullcontext()
    with ctx:
        logits, _ = unembed(params, x, counter)
    return logits[0], records, kept


def forward(
    cfg: ModelConfig,
    params: Params,
    tokens,
    layout: SequenceLayout,
    keep=None,
    capture_layers=(),
    counter: OpCounter | None = None,
    per_head: bool = False,
    live_log: list | None = None,
):
    """Full forward over the live positions.

    Returns ``(logits, records)``: logits has one row per live position in
    ascending original order; records holds an :class:`AttentionRecord` per
    layer in ``capture_layers`` (1-based). ``live_log`` collects
    ``(layer, n_live, n_image_live)`` tuples.
    """
    tokens, live = _check_inputs(cfg, tokens, layout, keep)
    logits, records, _ = _run(
        cfg, params, tokens, layout, live, set(capture_layers), counter, per_head, live_log
    )
    return logits, records


def forward_with_midlayer_prune(
    cfg: ModelConfig,
    params: Params,
    tokens,
    layout: SequenceLayout,
    schedule: PruneSchedule,
    keep=None,
    capture_layers=(),
    counter: OpCounter | None = None,
    per_head: bool = False,
    live_log: list | None = None,
    rng: np.random.Generator | None = None,
    step: int = 1,
):
    """Forward that scores image tokens at layer K and drops the bottom R
    before layer K+1.

    Returns ``(logits, records, kept)`` where ``kept`` is an unfrozen
    :class:`KeptSet`. With ``schedule.strategy == "random"`` the kept set is
    drawn from ``rng`` instead of the layer-K attention.
    """
    schedule.check_layers(cfg.layers)
    tokens, live = _check_inputs(cfg, tokens, layout, keep)
    if schedule.strategy == "random" and rng is None:
        raise ValueError("random pruning needs an rng")

    def choose(rec: AttentionRecord, live_now: list[int]) -> KeptSet:
        if schedule.strategy == "random":
            imgs = [p for p in live_now if layout.roles[p] == IMAGE]
            return random_kept(imgs, schedule.R, rng, step)
        return select_kept(saliency_scores(rec, layout, schedule.queries), schedule.R, step)

    return _run(
        cfg, params, tokens, layout, live, set(capture_layers), counter, per_head, live_log,
        prune_after=schedule.K, choose=choose,
    )


# -- checkpoints -------------------------------------------------------------


def _encode(name: str, arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {
        "name": name,
        "shape": list(arr.shape),
        "dtype": "<f8",
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def _decode(rec: dict) -> np.ndarray:
    raw = base64.b64decode(rec["data"])
    return np.frombuffer(raw, dtype=rec["dtype"]).reshape(rec["shape"]).astype(np.float64)


def save_checkpoint(
    path, cfg: ModelConfig, params: Params, extra: dict | None = None,
    optimizer_state: dict[str, np.ndarray] | None = None,
) -> None:
    """JSON-lines checkpoint: a header line, then one line per tensor.

    Tensors are stored as little-endian float64 bytes, so a save/load cycle
    is bit-exact. ``optimizer_state`` tensors go in lines tagged
    ``"group": "optimizer"``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(cfg),
        "extra": extra or {},
    }
    lines = [json.dumps(header, sort_keys=True)]
    for name in param_names(cfg):
        lines.append(json.dumps({"group": "params", **_encode(name, params[name])}, sort_keys=True))
    for name in sorted(optimizer_state or {}):
        lines.append(
            json.dumps({"group": "optimizer", **_encode(name, optimizer_state[name])}, sort_keys=True)
        )
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(path)


def load_checkpoint(path, with_optimizer: bool = False):
    """Returns ``(cfg, params, extra)`` (plus optimizer state when asked)."""
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        cfg = ModelConfig(**header["config"])
        params: Params = {}
        opt: dict[str, np.ndarray] = {}
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            (params if rec["group"] == "params" else opt)[rec["name"]] = _decode(rec)
    missing = set(param_names(cfg)) - set(params)
    if missing:
        raise ValueError(f"checkpoint is missing tensors {sorted(missing)}")
    if with_optimizer:
        return cfg, params, header["extra"], opt
    return cfg, params, header["extra"]
