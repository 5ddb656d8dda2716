import json
import math

import numpy as np
import pytest

from diffprune.model import ModelConfig, init_params
from diffprune.sampler import GenerationConfig
from diffprune.training import (
    MASK,
    AdamW,
    GridTask,
    TrainConfig,
    eval_accuracy,
    loss_and_grad,
    mask_batch,
    train,
)

from helpers import lookup_oracle

TASK = GridTask()
SMALL = ModelConfig(layers=2, width=16, heads=2, ffn_width=32, vocab=TASK.vocab_size, max_seq=TASK.seq_len)


def test_task_shape_and_answers():
    tokens, cells = TASK.sample_batch(np.random.default_rng(0), 50)
    assert tokens.shape == (50, 43)
    assert np.array_equal(TASK.answer(tokens), tokens[:, -2:])
    assert cells.min() >= 1 and cells.max() <= TASK.side - 2
    assert TASK.ring_fraction == pytest.approx(20 / 36)
    assert len(TASK.layout.image_positions) == 36


def test_split_is_deterministic_and_masked():
    a, b = TASK.split(3, 5), TASK.split(3, 5)
    for (p1, a1), (p2, a2) in zip(a, b):
        assert np.array_equal(p1, p2) and np.array_equal(a1, a2)
        assert (p1[-2:] == MASK).all()
    assert not np.array_equal(TASK.split(4, 5)[0][0], a[0][0])


def test_mask_batch_masks_only_responses():
    tokens, _ = TASK.sample_batch(np.random.default_rng(1), 64)
    resp = TASK.layout.response_positions
    inputs, lmask = mask_batch(tokens, resp, np.random.default_rng(2))
    assert lmask.sum(axis=1).min() >= 1
    assert (inputs[lmask] == MASK).all()
    assert np.array_equal(inputs[~lmask], tokens[~lmask])
    assert not lmask[:, : resp[0]].any()


def test_uniform_logits_loss_is_log_vocab():
    p = init_params(SMALL, 0)
    p["tok_emb"][:] = 0.0
    tokens, _ = TASK.sample_batch(np.random.default_rng(0), 4)
    inputs, lmask = mask_batch(tokens, TASK.layout.response_positions, np.random.default_rng(0))
    loss, _, _ = loss_and_grad(p, SMALL, inputs, tokens, lmask, need_grad=False)
    assert loss == pytest.approx(math.log(SMALL.vocab), abs=1e-12)


def test_confident_correct_loss_vanishes():
    prompt, answer = TASK.split(0, 1)[0]
    cfg, p = lookup_oracle(TASK, prompt, answer)
    full = prompt.copy()
    full[-2:] = answer
    lmask = np.zeros((1, len(full)), dtype=bool)
    lmask[0, -2:] = True
    losses = []
    for scale in (1.0, 4.0, 16.0):
        q = dict(p, tok_emb=p["tok_emb"] * scale)
        loss, _, stats = loss_and_grad(q, cfg, prompt[None], full[None], lmask, need_grad=False)
        assert stats["token_accuracy"] == 1.0
        losses.append(loss)
    assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-6


@pytest.mark.parametrize("mode", ["bidirectional", "causal"])
def test_gradient_matches_finite_differences(mode):
    cfg = SMALL.with_mode(mode)
    p = init_params(cfg, 5)
    tokens, _ = TASK.sample_batch(np.random.default_rng(5), 2)
    inputs, lmask = mask_batch(tokens, TASK.layout.response_positions, np.random.default_rng(6))
    _, grads, _ = loss_and_grad(p, cfg, inputs, tokens, lmask)
    rng = np.random.default_rng(7)
    h = 1e-5
    for name in ["tok_emb", "pos_emb", "l1.wq", "l1.wk", "l2.wv", "l2.w1", "l1.norm2", "final_norm"]:
        for _ in range(3):
            if name == "pos_emb":
                idx = (int(rng.integers(TASK.seq_len)), int(rng.integers(cfg.width)))
            elif name == "tok_emb":
                idx = (int(rng.choice(np.unique(tokens))), int(rng.integers(cfg.width)))
            else:
                idx = tuple(int(rng.integers(s)) for s in p[name].shape)
            old = p[name][idx]
            p[name][idx] = old + h
            up = loss_and_grad(p, cfg, inputs, tokens, lmask, need_grad=False)[0]
            p[name][idx] = old - h
            dn = loss_and_grad(p, cfg, inputs, tokens, lmask, need_grad=False)[0]
            p[name][idx] = old
            num = (up - dn) / (2 * h)
            assert abs(num - grads[name][idx]) <= 1e-6 + 1e-4 * abs(num), name


def test_lr_schedule():
    opt = AdamW(init_params(SMALL, 0), TrainConfig(lr=1e-3, updates=1000, warmup=100))
    assert opt.lr_at(50) == pytest.approx(5e-4)
    assert opt.lr_at(100) == pytest.approx(1e-3)
    assert opt.lr_at(1000) == pytest.approx(1e-4)
    assert opt.lr_at(550) == pytest.approx(1e-3 * (0.1 + 0.45))


def test_one_update_lowers_loss():
    drops = []
    for seed in range(5):
        tcfg = TrainConfig(updates=1, warmup=0, batch_size=16, seed=seed, lr=3e-3)
        p0 = init_params(SMALL, seed)
        tokens, _ = TASK.sample_batch(np.random.default_rng(seed), 16)
        inputs, lmask = mask_batch(tokens, TASK.layout.response_positions, np.random.default_rng(seed))
        before, grads, _ = loss_and_grad(p0, SMALL, inputs, tokens, lmask)
        AdamW(p0, tcfg).step(p0, grads)
        after, _, _ = loss_and_grad(p0, SMALL, inputs, tokens, lmask, need_grad=False)
        drops.append(before - after)
    assert np.median(drops) > 0


def test_zero_updates_is_near_chance():
    params, metrics, _ = train(TrainConfig(updates=0), TASK, SMALL)
    assert metrics == []
    acc = eval_accuracy(SMALL, params, TASK, TASK.split(0, 100), GenerationConfig(2, 2))
    assert acc <= 0.05


def test_training_is_deterministic(tmp_path):
    tcfg = TrainConfig(updates=6, warmup=2, batch_size=8, log_every=3)
    p1, m1, _ = train(tcfg, TASK, SMALL, log_path=tmp_path / "a.jsonl")
    p2, m2, _ = train(tcfg, TASK, SMALL, log_path=tmp_path / "b.jsonl")
    assert m1 == m2 and len(m1) == 2
    assert all(np.array_equal(p1[k], p2[k]) for k in p1)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    rows = [json.loads(x) for x in (tmp_path / "a.jsonl").read_text().splitlines()]
    assert [r["update"] for r in rows] == [3, 6]
    assert set(rows[0]) == {"update", "loss", "accuracy"}


def test_train_rejects_small_model():
    with pytest.raises(ValueError):
        train(TrainConfig(updates=1), TASK, ModelConfig(1, 8, 2, 8, 10, 43))


def test_lookup_oracle_scores_perfectly():
    split = TASK.split(11, 1)
    cfg, p = lookup_oracle(TASK, *split[0])
    assert eval_accuracy(cfg, p, TASK, split, GenerationConfig(2, 2)) == 1.0
    assert eval_accuracy(cfg, p, TASK, split, GenerationConfig(2, 1)) == 1.0


def test_empty_split_rejected():
    with pytest.raises(ValueError):
        eval_accuracy(SMALL, init_params(SMALL, 0), TASK, [], GenerationConfig(2, 2))


def test_eval_is_deterministic():
    p = init_params(SMALL, 1)
    split = TASK.split(2, 20)
    g = GenerationConfig(2, 2)
    assert eval_accuracy(SMALL, p, TASK, split, g) == eval_accuracy(SMALL, p, TASK, split, g)
