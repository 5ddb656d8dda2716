import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diffprune.model import ModelConfig, init_params
from diffprune.numerics import OpCounter
from diffprune.pruning import PruneSchedule
from diffprune.sampler import GenerationConfig, generate, remask_counts
from diffprune.sequence import SequenceLayout

MASK = 2


def setup(gen_len=4, n_img=16, layers=8, seed=0):
    cfg = ModelConfig(layers=layers, width=32, heads=4, ffn_width=48, vocab=40, max_seq=64)
    p = init_params(cfg, seed)
    layout = SequenceLayout.from_counts(1, n_img, 3, gen_len)
    tokens = np.random.default_rng(seed).integers(3, 40, size=len(layout))
    tokens[layout.response_positions] = MASK
    return cfg, p, tokens, layout


def test_remask_examples():
    assert remask_counts(8, 1) == [8]
    assert remask_counts(8, 4) == [2, 2, 2, 2]
    assert remask_counts(7, 3) == [3, 2, 2]
    with pytest.raises(ValueError):
        remask_counts(3, 4)


@given(st.integers(1, 200).flatmap(lambda g: st.tuples(st.just(g), st.integers(1, g))))
def test_remask_properties(gt):
    g, T = gt
    c = remask_counts(g, T)
    assert len(c) == T and sum(c) == g and min(c) >= 1 and max(c) - min(c) <= 1
    assert c == sorted(c, reverse=True)


def test_generation_config_checks():
    with pytest.raises(ValueError):
        GenerationConfig(gen_len=4, steps=5)
    with pytest.raises(ValueError):
        GenerationConfig(gen_len=4, steps=2, prune=PruneSchedule(K=2, R=0.5, step=3))


def test_single_step_commits_everything():
    cfg, p, tokens, layout = setup()
    out, trace = generate(cfg, p, tokens, layout, GenerationConfig(4, 1), mask_id=MASK)
    assert len(trace.steps) == 1
    assert trace.steps[0].unmasked == layout.response_positions
    assert trace.final_tokens == out.tolist()


def test_zero_ratio_matches_no_prune():
    cfg, p, tokens, layout = setup()
    a, ta = generate(cfg, p, tokens, layout, GenerationConfig(4, 4))
    b, tb = generate(cfg, p, tokens, layout, GenerationConfig(4, 4, prune=PruneSchedule(K=4, R=0.0)))
    assert np.array_equal(a, b) and ta.to_json() == tb.to_json()


def test_persistent_live_counts():
    cfg, p, tokens, layout = setup()
    gcfg = GenerationConfig(4, 4, prune=PruneSchedule(K=4, R=0.5))
    _, trace = generate(cfg, p, tokens, layout, gcfg)
    assert trace.steps[0].image_live_per_layer == [16] * 4 + [8] * 4
    for s in trace.steps[1:]:
        assert s.image_live_per_layer == [8] * 8
        assert s.kept_image_indices == trace.steps[0].kept_image_indices


def test_non_persistent_reprunes_each_step():
    cfg, p, tokens, layout = setup()
    gcfg = GenerationConfig(4, 3, prune=PruneSchedule(K=4, R=0.5, persistent=False))
    _, trace = generate(cfg, p, tokens, layout, gcfg)
    for s in trace.steps:
        assert s.image_live_per_layer == [16] * 4 + [8] * 4


def test_late_prune_step():
    cfg, p, tokens, layout = setup()
    gcfg = GenerationConfig(4, 4, prune=PruneSchedule(K=2, R=0.5, step=2))
    _, trace = generate(cfg, p, tokens, layout, gcfg)
    assert trace.steps[0].image_live_per_layer == [16] * 8
    assert trace.steps[1].image_live_per_layer == [16] * 2 + [8] * 6
    assert trace.steps[3].image_live_per_layer == [8] * 8


@given(st.integers(1, 12).flatmap(lambda g: st.tuples(st.just(g), st.integers(1, g))),
       st.integers(0, 3))
def test_commit_schedule_and_permanence(gt, seed):
    g, T = gt
    cfg, p, tokens, layout = setup(gen_len=g, layers=2, n_img=4, seed=seed)
    prune = PruneSchedule(K=1, R=0.5) if seed % 2 else None
    out, trace = generate(cfg, p, tokens, layout, GenerationConfig(g, T, prune=prune), mask_id=MASK)
    counts = remask_counts(g, T)
    committed = {}
    for s, n in zip(trace.steps, counts):
        assert len(s.unmasked) == n
        for pos, tok in zip(s.unmasked, s.committed_tokens):
            assert pos not in committed
            committed[pos] = tok
    assert sorted(committed) == layout.response_positions
    assert [committed[p] for p in layout.response_positions] == out.tolist()


def test_generate_deterministic_with_random_strategy():
    cfg, p, tokens, layout = setup()
    gcfg = GenerationConfig(4, 2, seed=11, prune=PruneSchedule(K=3, R=0.5, strategy="random"))
    a, ta = generate(cfg, p, tokens, layout, gcfg)
    b, tb = generate(cfg, p, tokens, layout, gcfg)
    assert np.array_equal(a, b) and ta.to_json() == tb.to_json()


def test_rejects_unmasked_response():
    cfg, p, tokens, layout = setup()
    t = tokens.copy()
    t[-1] = 5
    with pytest.raises(ValueError):
        generate(cfg, p, t, layout, GenerationConfig(4, 2), mask_id=MASK)


def test_pruned_run_counts_fewer_mul_adds():
    cfg, p, tokens, layout = setup()
    full, pruned = OpCounter(), OpCounter()
    generate(cfg, p, tokens, layout, GenerationConfig(4, 4), full)
    generate(cfg, p, tokens, layout, GenerationConfig(4, 4, prune=PruneSchedule(K=4, R=0.5)), pruned)
    assert pruned.block_mul_adds() < full.block_mul_adds()
