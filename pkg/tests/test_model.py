import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diffprune.flops import layer_flops
from diffprune.model import (
    ModelConfig,
    forward,
    forward_with_midlayer_prune,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from diffprune.numerics import OpCounter
from diffprune.pruning import PruneSchedule
from diffprune.sequence import IMAGE, AttentionRecord, SequenceLayout
from helpers import zero_key_setup


def small(mode="bidirectional", layers=8, vocab=64):
    cfg = ModelConfig(layers=layers, width=32, heads=4, ffn_width=48, vocab=vocab, max_seq=40,
                      attention_mode=mode)
    return cfg, init_params(cfg, 3)


def sample_input(layout, vocab=64, seed=0):
    return np.random.default_rng(seed).integers(0, vocab, size=len(layout))


LAYOUT = SequenceLayout.from_counts(1, 16, 3, 4)


def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(layers=2, width=10, heads=3, ffn_width=4, vocab=8, max_seq=8)
    with pytest.raises(ValueError):
        ModelConfig(layers=1, width=8, heads=2, ffn_width=4, vocab=8, max_seq=8)
    with pytest.raises(ValueError):
        ModelConfig(layers=0, width=8, heads=2, ffn_width=4, vocab=8, max_seq=8)
    with pytest.raises(ValueError):
        ModelConfig(layers=2, width=8, heads=2, ffn_width=4, vocab=8, max_seq=8, attention_mode="x")


def test_layout_invariants():
    with pytest.raises(ValueError):
        SequenceLayout(("image", "system", "image", "response"))
    with pytest.raises(ValueError):
        SequenceLayout(("system", "response", "image"))
    assert LAYOUT.image_positions == list(range(1, 17))


def test_logits_shape():
    cfg, p = small()
    layout = SequenceLayout.from_counts(1, 4, 1, 4)
    logits, _ = forward(cfg, p, sample_input(layout), layout)
    assert logits.shape == (10, 64)


def test_all_true_keep_is_identity():
    cfg, p = small()
    t = sample_input(LAYOUT)
    a, _ = forward(cfg, p, t, LAYOUT)
    b, _ = forward(cfg, p, t, LAYOUT, keep=[True] * len(LAYOUT))
    assert np.array_equal(a, b)


def test_rejects_bad_inputs():
    cfg, p = small()
    t = sample_input(LAYOUT)
    keep = [True] * len(LAYOUT)
    keep[0] = False  # system token
    with pytest.raises(ValueError):
        forward(cfg, p, t, LAYOUT, keep=keep)
    t2 = t.copy()
    t2[5] = 64
    with pytest.raises(ValueError):
        forward(cfg, p, t2, LAYOUT)


def test_zero_attention_token_removal():
    cfg, p, tokens, layout, j = zero_key_setup()
    full, recs = forward(cfg, p, tokens, layout, capture_layers=range(1, cfg.layers + 1))
    for rec in recs:
        assert np.all(rec.weights[:, list(rec.live_index_map).index(j)] == 0.0)
    keep = [pos != j for pos in range(len(layout))]
    reduced, _ = forward(cfg, p, tokens, layout, keep=keep)
    survivors = [pos for pos in range(len(layout)) if pos != j]
    assert np.max(np.abs(full[survivors] - reduced)) <= 1e-10


def test_attention_structure_by_mode():
    for mode in ("bidirectional", "causal"):
        cfg, p = small(mode)
        _, recs = forward(cfg, p, sample_input(LAYOUT), LAYOUT, capture_layers=(1, 4, 8))
        for rec in recs:
            w = rec.weights
            np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-9)
            upper = w[np.triu_indices_from(w, k=1)]
            if mode == "causal":
                assert np.all(upper == 0.0)
            else:
                assert np.all(w > 0.0)


def test_causal_mask_uses_original_positions():
    cfg, p = small("causal")
    keep = [not (r == IMAGE and i % 2) for i, r in enumerate(LAYOUT.roles)]
    _, recs = forward(cfg, p, sample_input(LAYOUT), LAYOUT, keep=keep, capture_layers=(2,))
    w = recs[0].weights
    assert np.all(w[np.triu_indices_from(w, k=1)] == 0.0)
    assert recs[0].live_index_map == tuple(i for i, k in enumerate(keep) if k)


def test_forward_deterministic():
    cfg, p = small()
    t = sample_input(LAYOUT)
    a, _ = forward(cfg, p, t, LAYOUT)
    b, _ = forward(cfg, p, t, LAYOUT)
    assert np.array_equal(a, b)


def test_per_head_capture():
    cfg, p = small()
    _, recs = forward(cfg, p, sample_input(LAYOUT), LAYOUT, capture_layers=(3,), per_head=True)
    assert recs[0].per_head.shape == (4, 24, 24)
    np.testing.assert_allclose(recs[0].per_head.mean(axis=0), recs[0].weights)


def test_record_rejects_unsorted_map():
    with pytest.raises(ValueError):
        AttentionRecord(1, np.eye(2), (3, 1))


@given(
    n_img=st.integers(1, 12),
    n_txt=st.integers(1, 5),
    heads=st.sampled_from([1, 2, 4]),
    head_dim=st.integers(1, 4),
    m=st.integers(1, 20),
    layers=st.integers(2, 4),
)
def test_op_count_matches_layer_formula(n_img, n_txt, heads, head_dim, m, layers):
    d = heads * head_dim
    cfg = ModelConfig(layers=layers, width=d, heads=heads, ffn_width=m, vocab=16, max_seq=32)
    p = init_params(cfg, 0)
    layout = SequenceLayout.from_counts(0, n_img, n_txt, 1)
    c = OpCounter()
    forward(cfg, p, sample_input(layout, 16), layout, counter=c)
    n = len(layout)
    assert 2 * c.block_mul_adds() == layers * layer_flops(n, d, m)
    assert c.by_class["head"] == n * d * 16


def test_midlayer_prune_zero_ratio_identity():
    cfg, p = small()
    t = sample_input(LAYOUT)
    plain, _ = forward(cfg, p, t, LAYOUT)
    pruned, _, kept = forward_with_midlayer_prune(cfg, p, t, LAYOUT, PruneSchedule(K=4, R=0.0))
    assert list(kept.kept_image_indices) == LAYOUT.image_positions
    assert np.array_equal(plain, pruned)


def test_midlayer_prune_live_counts():
    cfg, p = small()
    log = []
    _, _, kept = forward_with_midlayer_prune(
        cfg, p, sample_input(LAYOUT), LAYOUT, PruneSchedule(K=4, R=0.5), live_log=log
    )
    assert [k for _, _, k in log] == [16] * 4 + [8] * 4
    assert len(kept) == 8


def test_midlayer_prune_last_layer_boundary():
    cfg, p = small()
    log = []
    forward_with_midlayer_prune(cfg, p, sample_input(LAYOUT), LAYOUT, PruneSchedule(K=7, R=0.5),
                                live_log=log)
    assert [k for _, _, k in log] == [16] * 7 + [8]


def test_midlayer_prune_rejects_bad_schedules():
    cfg, p = small()
    with pytest.raises(ValueError):
        forward_with_midlayer_prune(cfg, p, sample_input(LAYOUT), LAYOUT, PruneSchedule(K=8, R=0.5))
    with pytest.raises(ValueError):
        PruneSchedule(K=4, R=1.0)


def test_midlayer_prune_op_count():
    cfg, p = small()
    c = OpCounter()
    forward_with_midlayer_prune(cfg, p, sample_input(LAYOUT), LAYOUT, PruneSchedule(K=3, R=0.5),
                                counter=c)
    d, m = cfg.width, cfg.ffn_width
    assert 2 * c.block_mul_adds() == 3 * layer_flops(24, d, m) + 5 * layer_flops(16, d, m)


def test_checkpoint_round_trip(tmp_path):
    cfg, p = small()
    path = tmp_path / "ckpt.jsonl"
    save_checkpoint(path, cfg, p, {"note": "x"}, optimizer_state={"m.tok_emb": p["tok_emb"] * 2})
    cfg2, p2, extra, opt = load_checkpoint(path, with_optimizer=True)
    assert cfg2 == cfg and extra == {"note": "x"}
    for k in p:
        assert p2[k].tobytes() == p[k].tobytes()
    assert opt["m.tok_emb"].tobytes() == (p["tok_emb"] * 2).tobytes()
    first = path.read_bytes()
    save_checkpoint(path, cfg2, p2, {"note": "x"}, optimizer_state=opt)
    assert path.read_bytes() == first


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"format": "other", "version": 1}\n')
    with pytest.raises(ValueError):
        load_checkpoint(path)
