"""Grid-recall task, masked-diffusion loss with hand-written backprop, AdamW."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .model import (
    ModelConfig,
    Params,
    attention_bias,
    block_forward,
    embed,
    init_params,
    merge_heads,
    split_heads,
)
from .numerics import RMS_EPS, rms_norm
from .sampler import GenerationConfig, generate
from .seeding import substream
from .sequence import SequenceLayout

PAD, BOS, MASK = 0, 1, 2


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class GridTask:
    """Recall the symbols at two queried cells of a G x G symbol grid.

    Sequence: ``[BOS] grid(G*G) r1 c1 r2 c2 | ans1 ans2``. Only interior
    cells are ever queried, so the border ring (4G-4 cells) is known to be
    irrelevant to every answer.
    """

    side: int = 6
    n_symbols: int = 16

    def __post_init__(self):
        if self.side < 3:
            raise ValueError("grid side must be at least 3 to have an interior")
        if self.n_symbols < 2:
            raise ValueError("need at least 2 symbols")

    @property
    def row_base(self) -> int:
        return 3

    @property
    def col_base(self) -> int:
        return 3 + self.side

    @property
    def sym_base(self) -> int:
        return 3 + 2 * self.side

    @property
    def vocab_size(self) -> int:
        return self.sym_base + self.n_symbols

    @property
    def layout(self) -> SequenceLayout:
        return SequenceLayout.from_counts(1, self.side**2, 4, 2)

    @property
    def seq_len(self) -> int:
        return 1 + self.side**2 + 4 + 2

    @property
    def gen_len(self) -> int:
        return 2

    def cell_position(self, r: int, c: int) -> int:
        return 1 + r * self.side + c

    @property
    def ring_positions(self) -> list[int]:
        G = self.side
        return [
            self.cell_position(r, c)
            for r in range(G)
            for c in range(G)
            if r in (0, G - 1) or c in (0, G - 1)
        ]

    @property
    def ring_fraction(self) -> float:
        return (4 * self.side - 4) / self.side**2

    def sample_batch(self, rng: np.random.Generator, n: int):
        """Returns ``(tokens, cells)``: full sequences with answers filled in,
        and the (n, 2, 2) queried (row, col) pairs."""
        G = self.side
        grid = rng.integers(0, self.n_symbols, size=(n, G * G))
        inner = G - 2
        flat = np.stack([rng.choice(inner * inner, size=2, replace=False) for _ in range(n)])
        rows, cols = flat // inner + 1, flat % inner + 1
        tokens = np.empty((n, self.seq_len), dtype=np.int64)
        tokens[:, 0] = BOS
        tokens[:, 1 : 1 + G * G] = grid + self.sym_base
        o = 1 + G * G
        tokens[:, o] = rows[:, 0] + self.row_base
        tokens[:, o + 1] = cols[:, 0] + self.col_base
        tokens[:, o + 2] = rows[:, 1] + self.row_base
        tokens[:, o + 3] = cols[:, 1] + self.col_base
        for j in range(2):
            tokens[:, o + 4 + j] = grid[np.arange(n), rows[:, j] * G + cols[:, j]] + self.sym_base
        return tokens, np.stack([rows, cols], axis=-1)

    def answer(self, tokens: np.ndarray) -> np.ndarray:
        """Recompute the answer from the grid and query tokens alone."""
        G, o = self.side, 1 + self.side**2
        out = []
        for j in range(2):
            r = tokens[..., o + 2 * j] - self.row_base
            c = tokens[..., o + 2 * j + 1] - self.col_base
            out.append(np.take_along_axis(tokens[..., 1 : o], (r * G + c)[..., None], -1)[..., 0])
        return np.stack(out, axis=-1)

    def split(self, seed: int, n: int, stream: str = "eval"):
        """Deterministic list of (prompt, answer) pairs; prompts have MASK responses."""
        tokens, _ = self.sample_batch(substream(seed, stream), n)
        answers = tokens[:, -2:].copy()
        prompts = tokens.copy()
        prompts[:, -2:] = MASK
        return list(zip(prompts, answers))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 32
    updates: int = 20000
    warmup: int = 500
    grad_clip: float = 1.0
    seed: int = 0
    mask_ratio: str = "uniform"
    log_every: int = 100

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("step size must be positive")
        if self.batch_size <= 0 or self.updates < 0 or self.log_every <= 0:
            raise ValueError("counts must be positive")
        if self.mask_ratio != "uniform":
            raise ValueError("only mask_ratio='uniform' is supported")


def mask_batch(tokens: np.ndarray, resp: list[int], rng: np.random.Generator):
    """Mask each response slot with prob r ~ U(0, 1] per sample; redraw until
    at least one slot is masked."""
    n = tokens.shape[0]
    masked = np.zeros((n, len(resp)), dtype=bool)
    for i in range(n):
        while not masked[i].any():
            r = 1.0 - rng.random()
            masked[i] = rng.random(len(resp)) < r
    inputs = tokens.copy()
    sub = inputs[:, resp]
    sub[masked] = MASK
    inputs[:, resp] = sub
    loss_mask = np.zeros(tokens.shape, dtype=bool)
    loss_mask[:, resp] = masked
    return inputs, loss_mask


# -- loss and gradients ------------------------------------------------------


def _rms_backward(x, gain, dy, eps=RMS_EPS):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    gy = dy * gain
    d = x.shape[-1]
    dx = r * gy - x * r**3 * np.sum(gy * x, axis=-1, keepdims=True) / d
    dgain = np.sum(dy * x * r, axis=tuple(range(x.ndim - 1)))
    return dx, dgain


def _gelu_grad(u):
    c = math.sqrt(2.0 / math.pi)
    t = np.tanh(c * (u + 0.044715 * u * u * u))
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * c * (1.0 + 3 * 0.044715 * u * u)


def _wgrad(inp, dout):
    return inp.reshape(-1, inp.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])


def _block_backward(params, cfg, l, cache, dout, grads):
    g = lambda name: params[f"l{l}.{name}"]
    h, scale = cfg.heads, 1.0 / math.sqrt(cfg.head_dim)
    dx1 = dout
    grads[f"l{l}.w2"] += _wgrad(cache["z"], dout)
    du = (dout @ g("w2").T) * _gelu_grad(cache["u"])
    grads[f"l{l}.w1"] += _wgrad(cache["b"], du)
    dxb, dg2 = _rms_backward(cache["x1"], g("norm2"), du @ g("w1").T)
    grads[f"l{l}.norm2"] += dg2
    dx1 = dx1 + dxb
    grads[f"l{l}.wo"] += _wgrad(cache["ctx"], dx1)
    dctx = split_heads(dx1 @ g("wo").T, h)
    P, q, k, v = cache["probs"], cache["q"], cache["k"], cache["v"]
    dP = dctx @ v.transpose(0, 1, 3, 2)
    dv = P.transpose(0, 1, 3, 2) @ dctx
    dS = P * (dP - np.sum(dP * P, axis=-1, keepdims=True)) * scale
    dq = merge_heads(dS @ k)
    dk = merge_heads(dS.transpose(0, 1, 3, 2) @ q)
    dv = merge_heads(dv)
    a = cache["a"]
    grads[f"l{l}.wq"] += _wgrad(a, dq)
    grads[f"l{l}.wk"] += _wgrad(a, dk)
    grads[f"l{l}.wv"] += _wgrad(a, dv)
    da = dq @ g("wq").T + dk @ g("wk").T + dv @ g("wv").T
    dxa, dg1 = _rms_backward(cache["x"], g("norm1"), da)
    grads[f"l{l}.norm1"] += dg1
    return dx1 + dxa


def forward_logits(params: Params, cfg: ModelConfig, inputs: np.ndarray, caches=None):
    """Batched training forward over full sequences; fills ``caches`` per layer."""
    n = inputs.shape[1]
    positions = np.arange(n)
    bias = attention_bias(cfg, positions)
    x = embed(params, inputs, positions)
    for l in range(1, cfg.layers + 1):
        cache = {} if caches is not None else None
        x, _ = block_forward(params, cfg, l, x, bias, None, cache)
        if caches is not None:
            caches.append(cache)
    f = rms_norm(x, params["final_norm"])
    return f @ params["tok_emb"].T, x, f


def loss_and_grad(params: Params, cfg: ModelConfig, inputs, targets, loss_mask, need_grad=True):
    """Mean cross-entropy over ``loss_mask`` positions and its exact gradient.

    Returns ``(loss, grads, stats)``; ``stats`` carries the masked-token
    accuracy of the batch.
    """
    count = int(loss_mask.sum())
    if count == 0:
        raise ValueError("batch has no masked positions")
    caches: list = [] if need_grad else None
    logits, xL, f = forward_logits(params, cfg, inputs, caches)
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    tgt_logp = np.take_along_axis(logp, targets[..., None], -1)[..., 0]
    loss = float(-(tgt_logp * loss_mask).sum() / count)
    correct = (logits.argmax(-1) == targets) & loss_mask
    stats = {"token_accuracy": float(correct.sum() / count)}
    if not need_grad:
        return loss, None, stats

    grads = {k: np.zeros_like(v) for k, v in params.items()}
    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, targets[..., None], np.take_along_axis(dlogits, targets[..., None], -1) - 1.0, -1)
    dlogits *= loss_mask[..., None] / count
    E = params["tok_emb"]
    grads["tok_emb"] += _wgrad(f, dlogits).T
    dx, dgf = _rms_backward(xL, params["final_norm"], dlogits @ E)
    grads["final_norm"] += dgf
    for l in range(cfg.layers, 0, -1):
        dx = _block_backward(params, cfg, l, caches[l - 1], dx, grads)
    np.add.at(grads["tok_emb"], inputs.reshape(-1), dx.reshape(-1, dx.shape[-1]))
    grads["pos_emb"][: inputs.shape[1]] += dx.sum(axis=0)
    return loss, grads, stats


# -- optimizer ---------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay (matrices only; gains are not decayed)."""

    def __init__(self, params: Params, tcfg: TrainConfig):
        self.cfg = tcfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def lr_at(self, t: int) -> float:
        c = self.cfg
        if t <= c.warmup:
            return c.lr * t / max(c.warmup, 1)
        frac = (t - c.warmup) / max(c.updates - c.warmup, 1)
        return c.lr * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0))))

    def step(self, params: Params, grads: Params) -> None:
        c = self.cfg
        self.t += 1
        if c.grad_clip:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > c.grad_clip:
                grads = {k: g * (c.grad_clip / norm) for k, g in grads.items()}
        lr = self.lr_at(self.t)
        b1c = 1.0 - c.beta1**self.t
        b2c = 1.0 - c.beta2**self.t
        for k in sorted(params):
            g = grads[k]
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            if params[k].ndim > 1 and c.weight_decay:
                params[k] -= lr * c.weight_decay * params[k]
            params[k] -= lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + c.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out


# -- training and evaluation -------------------------------------------------


def train(tcfg: TrainConfig, task: GridTask, mcfg: ModelConfig, log_path=None, progress=None):
    """Train from scratch; returns ``(params, metrics, optimizer)``.

    Metrics (update, loss, accuracy) are averaged over each ``log_every``
    window and appended to ``log_path`` as JSON lines. Accuracy here is the
    masked-token accuracy on training batches.
    """
    if mcfg.vocab < task.vocab_size or mcfg.max_seq < task.seq_len:
        raise ValueError("model config too small for the task vocabulary or sequence length")
    params = init_params(mcfg, int(substream(tcfg.seed, "init").integers(2**31)))
    opt = AdamW(params, tcfg)
    data_rng = substream(tcfg.seed, "training")
    mask_rng = substream(tcfg.seed, "masking")
    resp = task.layout.response_positions
    metrics: list[dict] = []
    window_loss, window_acc = [], []
    fh = open(log_path, "w") if log_path else None
    try:
        for u in range(1, tcfg.updates + 1):
            tokens, _ = task.sample_batch(data_rng, tcfg.batch_size)
            inputs, lmask = mask_batch(tokens, resp, mask_rng)
            loss, grads, stats = loss_and_grad(params, mcfg, inputs, tokens, lmask)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at update {u}")
            opt.step(params, grads)
            window_loss.append(loss)
            window_acc.append(stats["token_accuracy"])
            if u % tcfg.log_every == 0 or u == tcfg.updates:
                row = {
                    "update": u,
                    "loss": float(np.mean(window_loss)),
                    "accuracy": float(np.mean(window_acc)),
                }
                metrics.append(row)
                if fh:
                    fh.write(json.dumps(row, sort_keys=True) + "\n")
                    fh.flush()
                if progress:
                    progress(row)
                window_loss, window_acc = [], []
    finally:
        if fh:
            fh.close()
    return params, metrics, opt


def eval_accuracy(
    mcfg: ModelConfig, params: Params, task: GridTask, split, gcfg: GenerationConfig,
    counter=None,
) -> float:
    """Exact-match fraction of generated responses over ``split``.

    Sample ``i`` draws any random pruning from the ``random-prune`` stream of
    ``(gcfg.seed, i)``.
    """
    if len(split) == 0:
        raise ValueError("empty evaluation split")
    layout = task.layout
    hits = 0
    for i, (prompt, answer) in enumerate(split):
        out, _ = generate(
            mcfg, params, prompt, layout, gcfg, counter=counter, mask_id=MASK,
            rng=substream(gcfg.seed, "random-prune", i),
        )
        hits += int(np.array_equal(out, answer))
    return hits / len(split)


def train_config_from_dict(d: dict) -> TrainConfig:
    return TrainConfig(**d)


def train_config_dict(tcfg: TrainConfig) -> dict:
    return asdict(tcfg)
