import numpy as np
import pytest

from ladderflow import bench
from ladderflow.mllm import (ConfigError, MllmConfig, ToyMllm, make_prompt,
                             null_prompt, toy_pretrain)
from ladderflow.autodiff import Param
from ladderflow.rng import stream

TINY = MllmConfig(m=4, d_mllm=32, heads=2, max_text=8, patch=4, img_side=8,
                  max_seq=32)


def _queries(cfg, seed=0, n=4):
    rng = stream(seed, "test-queries")
    return Param(rng.normal(0, 0.02, (n, cfg.d_mllm)), "q")


def test_make_prompt_pads_to_max_text():
    p = make_prompt(TINY, [3, 4, 5])
    assert len(p.text_ids) == TINY.max_text
    assert p.text_ids[:3] == [3, 4, 5]
    assert all(t == bench.PAD_ID for t in p.text_ids[3:])
    assert p.layout == ["text"] * TINY.max_text


def test_make_prompt_rejects_overflow_and_bad_ids():
    with pytest.raises(ConfigError):
        make_prompt(TINY, list(range(1, TINY.max_text + 2)))
    with pytest.raises(ConfigError):
        make_prompt(TINY, [TINY.vocab])


def test_make_prompt_image_layout():
    img = np.zeros((8, 8, 3), dtype=np.float32)
    p = make_prompt(TINY, [1], img)
    assert p.layout == ["text"] * 8 + ["image-patch"] * TINY.n_patches
    with pytest.raises(ConfigError):
        make_prompt(TINY, [1], np.zeros((16, 16, 3)))


def test_null_prompt_preserves_layout():
    img = np.ones((8, 8, 3), dtype=np.float32)
    p = make_prompt(TINY, [1, 2], img)
    null = null_prompt(TINY, p)
    assert null.layout == p.layout
    assert all(t == bench.PAD_ID for t in null.text_ids)
    assert np.array_equal(null.image, np.zeros_like(img))
    text_only = make_prompt(TINY, [1, 2])
    assert null_prompt(TINY, text_only).image is None


def test_partial_drop_prompts():
    from ladderflow.mllm import drop_image_prompt, drop_text_prompt
    img = np.ones((8, 8, 3), dtype=np.float32) * 0.5
    p = make_prompt(TINY, [1, 2], img)
    td = drop_text_prompt(TINY, p)
    assert td.layout == p.layout
    assert all(t == bench.PAD_ID for t in td.text_ids)
    assert np.array_equal(td.image, img)
    idp = drop_image_prompt(TINY, p)
    assert idp.layout == p.layout
    assert idp.text_ids == p.text_ids
    assert np.array_equal(idp.image, np.zeros_like(img))


def test_embed_prompt_rejects_mixed_layouts():
    model = ToyMllm(TINY, seed=1)
    q = _queries(TINY)
    with_img = make_prompt(TINY, [1], np.zeros((8, 8, 3)))
    without = make_prompt(TINY, [1])
    with pytest.raises(ConfigError):
        model.embed_prompt([with_img, without], q)


def test_forward_collect_validates_taps():
    model = ToyMllm(TINY, seed=1)
    q = _queries(TINY)
    emb = model.embed_prompt([make_prompt(TINY, [1, 2])], q)
    with pytest.raises(ConfigError):
        model.forward_collect(emb, [0, 1], q.shape[0])
    with pytest.raises(ConfigError):
        model.forward_collect(emb, [1, 5], q.shape[0])
    with pytest.raises(ConfigError):
        model.forward_collect(emb, [3, 2], q.shape[0])


def test_forward_collect_shapes_and_order():
    model = ToyMllm(TINY, seed=1)
    q = _queries(TINY, n=4)
    prompts = [make_prompt(TINY, [1, 2]), make_prompt(TINY, [3])]
    emb = model.embed_prompt(prompts, q)
    states = model.forward_collect(emb, [1, 3, 4], 4)
    assert sorted(states) == [1, 3, 4]
    for s in states.values():
        assert s.shape == (2, 4, TINY.d_mllm)


def test_query_states_sensitive_to_text_and_image():
    model = ToyMllm(TINY, seed=2)
    q = _queries(TINY)

    def tap(prompt):
        emb = model.embed_prompt([prompt], q)
        return model.forward_collect(emb, [TINY.m], q.shape[0])[TINY.m].data

    a = tap(make_prompt(TINY, [1, 2]))
    b = tap(make_prompt(TINY, [2, 1]))
    assert not np.array_equal(a, b)
    img0 = np.zeros((8, 8, 3), dtype=np.float32)
    img1 = np.ones((8, 8, 3), dtype=np.float32)
    c = tap(make_prompt(TINY, [1, 2], img0))
    d = tap(make_prompt(TINY, [1, 2], img1))
    assert not np.array_equal(c, d)


def test_tap_captures_state_before_later_blocks():
    # perturbing a block after the tap must not move the tapped state
    model = ToyMllm(TINY, seed=3)
    q = _queries(TINY)
    prompt = make_prompt(TINY, [4, 5])

    def taps():
        emb = model.embed_prompt([prompt], q)
        out = model.forward_collect(emb, [2, TINY.m], q.shape[0])
        return out[2].data.copy(), out[TINY.m].data.copy()

    early1, late1 = taps()
    model.blocks[-1].mlp.fc1.w.data += 0.5
    early2, late2 = taps()
    assert np.array_equal(early1, early2)
    assert not np.array_equal(late1, late2)


def test_toy_pretrain_reduces_heldout_loss_and_freezes():
    model = ToyMllm(TINY, seed=4)
    report = toy_pretrain(model, steps=60, seed=4, batch=16, lr=1e-3)
    assert report["heldout_loss_final"] < report["heldout_loss_init"]
    assert all(not p.trainable for p in model.params())


def test_toy_pretrain_zero_steps_is_random_frozen_baseline():
    model = ToyMllm(TINY, seed=5)
    before = model.checksum()
    report = toy_pretrain(model, steps=0, seed=5)
    assert model.checksum() == before
    assert report["heldout_loss_init"] == report["heldout_loss_final"]
    assert all(not p.trainable for p in model.params())


def test_config_rejects_bad_divisibility():
    with pytest.raises(ConfigError):
        MllmConfig(d_mllm=30, heads=4)
    with pytest.raises(ConfigError):
        MllmConfig(img_side=10, patch=4)
