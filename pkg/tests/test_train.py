from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from localvit import tensor as T
from localvit.model import ModelConfig, build_model, preset
from localvit.train import (
    AdamW,
    Dataset,
    NonFiniteError,
    OptimizerConfig,
    ToySpec,
    block_summary,
    cosine_lr,
    evaluate,
    generate_toy_dataset,
    grad_check,
    template_match_classify,
    train,
)

SMALL = ToySpec(image_size=16, motif_size=3, train_per_class=8, eval_per_class=4)
TINY_CFG = ModelConfig(image_size=16, patch_size=4, embed_dim=8, depth=1, heads=2, gamma=2, num_classes=4,
                       locality_layers={1})


def test_dataset_deterministic():
    a, b = generate_toy_dataset(SMALL), generate_toy_dataset(SMALL)
    for x, y in zip(a, b):
        assert x.images.tobytes() == y.images.tobytes()
        assert np.array_equal(x.labels, y.labels)
    c, _ = generate_toy_dataset(replace(SMALL, seed=1))
    assert c.images.tobytes() != a[0].images.tobytes()


def test_dataset_balanced_and_disjoint():
    tr, ev = generate_toy_dataset(SMALL)
    assert np.bincount(tr.labels).tolist() == [8] * 4
    assert np.bincount(ev.labels).tolist() == [4] * 4
    flat_tr = {img.tobytes() for img in tr.images}
    assert not any(img.tobytes() in flat_tr for img in ev.images)


def test_noise_free_same_class_same_position_identical():
    spec = replace(SMALL, noise_std=0.0, image_size=4, motif_size=4)
    tr, _ = generate_toy_dataset(spec)
    same = tr.images[tr.labels == 2]
    assert all(np.array_equal(same[0], s) for s in same)


def test_motif_positions_cover_the_image():
    tr, _ = generate_toy_dataset(replace(SMALL, train_per_class=200))
    assert tr.positions.min() == 0 and tr.positions.max() == SMALL.image_size - SMALL.motif_size


def test_motif_larger_than_image():
    with pytest.raises(ValueError, match="larger"):
        generate_toy_dataset(replace(SMALL, motif_size=17))


@pytest.mark.parametrize("spec", [SMALL, ToySpec()])
def test_template_oracle_solves_task(spec):
    tr, ev = generate_toy_dataset(spec)
    assert (template_match_classify(spec, tr.images) == tr.labels).mean() == 1.0


def test_optimizer_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(lr=1e-3, min_lr=1e-2)
    with pytest.raises(ValueError):
        OptimizerConfig(lr=-1.0)


def test_cosine_endpoints():
    cfg = OptimizerConfig(lr=1e-3, min_lr=1e-5, epochs=17)
    assert abs(cosine_lr(0, cfg) - 1e-3) < 1e-12
    assert abs(cosine_lr(16, cfg) - 1e-5) < 1e-12
    lrs = [cosine_lr(e, cfg) for e in range(17)]
    assert lrs == sorted(lrs, reverse=True)


def test_decoupled_decay_with_zero_gradient():
    m = build_model(TINY_CFG)
    cfg = OptimizerConfig(lr=1e-2, weight_decay=0.05)
    opt = AdamW(m.named_parameters(), cfg)
    before = {n: p.data.copy() for n, p in m.named_parameters()}
    for _, p in m.named_parameters():
        p.grad = np.zeros_like(p.data)
    opt.step(1e-2)
    factor = 1 - 1e-2 * 0.05
    for n, p in m.named_parameters():
        expected = before[n] * factor if p.ndim >= 2 and n not in ("cls_token", "pos_embed") else before[n]
        np.testing.assert_array_equal(p.data, expected)


def test_zero_lr_leaves_parameters():
    m = build_model(TINY_CFG)
    tr, _ = generate_toy_dataset(SMALL)
    before = {n: p.data.copy() for n, p in m.named_parameters()}
    rep = train(m, tr, OptimizerConfig(lr=0.0, min_lr=0.0, epochs=2))
    assert all(np.array_equal(before[n], p.data) for n, p in m.named_parameters())
    assert rep.train_loss[0] == pytest.approx(rep.train_loss[1], rel=0.05)
    assert rep.lr == [0.0, 0.0]
    assert any(st.running_mean.any() for _, st in m.named_buffers())


def test_single_sample_overfit():
    m = build_model(TINY_CFG)
    tr, _ = generate_toy_dataset(SMALL)
    one = tr.subset([0])
    rep = train(m, one, OptimizerConfig(lr=1e-2, min_lr=1e-4, epochs=200, batch_size=1, label_smoothing=0.0,
                                        weight_decay=0.0))
    assert min(rep.train_loss) < 0.05
    assert np.argmin(rep.train_loss) < 200


def test_train_is_deterministic():
    tr, ev = generate_toy_dataset(SMALL)
    opt = OptimizerConfig(epochs=2, batch_size=8)
    a = train(build_model(TINY_CFG), tr, opt, ev, seed=3)
    b = train(build_model(TINY_CFG), tr, opt, ev, seed=3)
    assert a.train_loss == b.train_loss and a.eval_acc == b.eval_acc and a.checksum == b.checksum
    assert len(a.rows()) == 2 and set(a.rows()[0]) == {"epoch", "train_loss", "train_acc", "eval_acc"}


def test_memorized_train_set_scores_one():
    m = build_model(TINY_CFG)
    tr, _ = generate_toy_dataset(replace(SMALL, train_per_class=2))
    train(m, tr, OptimizerConfig(lr=1e-2, min_lr=1e-4, epochs=150, batch_size=8, label_smoothing=0.0,
                                 weight_decay=0.0))
    assert evaluate(m, tr) == 1.0


def test_zero_head_accuracy_is_class0_frequency():
    m = build_model(TINY_CFG)
    m.head.weight.data[...] = 0
    m.head.bias.data[...] = 0
    tr, _ = generate_toy_dataset(SMALL)
    data = tr.subset(np.r_[np.flatnonzero(tr.labels == 0)[:3], np.flatnonzero(tr.labels != 0)])
    assert evaluate(m, data) == pytest.approx(3 / len(data), abs=0)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_evaluate_reorder_invariant(seed):
    m = build_model(TINY_CFG)
    tr, _ = generate_toy_dataset(SMALL)
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(len(tr))
    assert evaluate(m, tr) == evaluate(m, tr.subset(perm))


def test_evaluate_empty():
    m = build_model(TINY_CFG)
    empty = Dataset(np.zeros((0, 3, 16, 16)), np.zeros(0, dtype=np.int64), np.zeros((0, 2)))
    with pytest.raises(ValueError, match="empty"):
        evaluate(m, empty)


def test_non_finite_names_tensor():
    m = build_model(TINY_CFG)
    m.layers[0].ffn.conv1.weight.data[0, 0, 0, 0] = np.nan
    tr, _ = generate_toy_dataset(SMALL)
    with pytest.raises(NonFiniteError) as exc:
        train(m, tr, OptimizerConfig(epochs=1))
    assert exc.value.tensor_name.startswith("layers.0.ffn.conv1.weight")


def _gc_inputs(cfg, n=2):
    rng = np.random.Generator(np.random.PCG64(5))
    return rng.standard_normal((n, 3, cfg.image_size, cfg.image_size)), rng.integers(0, cfg.num_classes, n)


@pytest.mark.parametrize("name", ["micro-localvit", "micro-plain", "micro-localvit-se"])
def test_grad_check_micro_twins(name):
    cfg = replace(preset(name), image_size=8)
    m = build_model(cfg)
    buffers = {n: s.running_mean.copy() for n, s in m.named_buffers()}
    rep = grad_check(m, *_gc_inputs(cfg), tolerance=1e-4)
    assert rep.passed, [(e.name, e.rel_err) for e in rep.failures]
    assert all(np.array_equal(buffers[n], s.running_mean) for n, s in m.named_buffers())
    assert set(block_summary(rep)) >= {"patch_embed", "layers.0.attn", "layers.1.ffn", "head"}


GC_TINY = ModelConfig(image_size=8, patch_size=4, embed_dim=4, depth=2, heads=2, gamma=2, num_classes=3,
                      locality_layers={1})


@pytest.mark.parametrize("op", ["matmul", "softmax", "conv2d_depthwise", "hswish", "batch_norm2d", "layer_norm"])
def test_grad_check_flags_corrupted_adjoint(op):
    cfg = GC_TINY
    m = build_model(cfg)
    with T.corrupt_adjoint(op):
        rep = grad_check(m, *_gc_inputs(cfg), tolerance=1e-4)
    assert not rep.passed
    assert rep.max_rel_err > 1e-2


def test_grad_check_impossible_tolerance():
    cfg = GC_TINY
    assert not grad_check(build_model(cfg), *_gc_inputs(cfg), tolerance=1e-12).passed
