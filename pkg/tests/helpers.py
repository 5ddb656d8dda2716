"""Hand-built weights shared by several test modules."""
import numpy as np

from diffprune.model import ModelConfig, init_params
from diffprune.sequence import SequenceLayout

ZERO_TOKEN = 63


def zero_key_setup(seed=0, layers=3):
    """Model in which image token ZERO_TOKEN gets exactly zero attention from every query.

    Residual dims 0 and 1 are reserved: dim 1 is a constant 1 on every token,
    dim 0 is large only on ZERO_TOKEN. No block writes into those dims, so
    the structure holds at every layer. Queries read dim 1 and keys read a
    large negative multiple of dim 0, pushing that token's score ~1e4 below
    everyone else's, so exp() underflows to exactly 0.
    """
    cfg = ModelConfig(layers=layers, width=16, heads=2, ffn_width=32, vocab=64, max_seq=32)
    p = init_params(cfg, seed)
    p["tok_emb"][:, :2] = 0.0
    p["tok_emb"][:, 1] = 1.0
    p["tok_emb"][ZERO_TOKEN, 0] = 50.0
    p["pos_emb"][:, :2] = 0.0
    dh = cfg.head_dim
    for l in range(1, layers + 1):
        for h in range(cfg.heads):
            col = h * dh
            p[f"l{l}.wq"][:, col] = 0.0
            p[f"l{l}.wq"][1, col] = 10.0
            p[f"l{l}.wk"][:, col] = 0.0
            p[f"l{l}.wk"][0, col] = -1000.0
        p[f"l{l}.wo"][:, :2] = 0.0
        p[f"l{l}.w2"][:, :2] = 0.0
    layout = SequenceLayout.from_counts(1, 8, 3, 4)
    rng = np.random.default_rng(seed + 1)
    tokens = rng.integers(3, 60, size=len(layout))
    j = layout.image_positions[3]
    tokens[j] = ZERO_TOKEN
    return cfg, p, tokens, layout, j


def lookup_oracle(task, prompt, answer):
    """Weights that answer one specific prompt: blocks are inert and each
    response position's embedding points straight at its answer symbol."""
    cfg = ModelConfig(layers=2, width=64, heads=2, ffn_width=8, vocab=task.vocab_size,
                      max_seq=task.seq_len)
    p = init_params(cfg, 0)
    d = cfg.width
    p["tok_emb"] = np.zeros((cfg.vocab, d))
    for v in range(cfg.vocab):
        p["tok_emb"][v, v % d] = 1.0
    p["pos_emb"] = np.zeros((cfg.max_seq, d))
    for pos, sym in zip(task.layout.response_positions, answer):
        p["pos_emb"][pos, sym % d] = 100.0
    for l in range(1, cfg.layers + 1):
        p[f"l{l}.wo"][:] = 0.0
        p[f"l{l}.w2"][:] = 0.0
    return cfg, p
