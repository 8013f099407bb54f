import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dslab import tensor as T
from dslab.encoder import (
    DualEncoder, EncoderConfig, contrastive_loss, curve_csv, train_encoder, zero_shot_accuracy,
    zero_shot_classify,
)
from dslab.errors import ConfigurationError, ContractError
from dslab.pairs import apply_sampling, build_pairs
from dslab.scene import DEFAULT_OBJECT_LABELS, DEFAULT_SCENE_LABELS, DepthImage, SceneGenConfig, generate_scene
from dslab.text import grammar_vocab

SMALL = EncoderConfig(image_size=16, patch_size=4, dim=8, vision_layers=1, text_layers=1, heads=2,
                      max_text_len=8, epochs=2, batch_size=4, lr=0.01)


@pytest.fixture(scope="module")
def vocab():
    return grammar_vocab(DEFAULT_SCENE_LABELS, DEFAULT_OBJECT_LABELS)


@pytest.fixture(scope="module")
def small_scenes():
    cfg = SceneGenConfig(width=16, height=16, min_objects=1, max_objects=2)
    return [generate_scene(s, cfg) for s in range(12)]


def depth(rng, n=16):
    return DepthImage(n, n, rng.uniform(0.5, 9.5, (n, n)), 10.0)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        EncoderConfig(image_size=30, patch_size=8).validate()
    with pytest.raises(ConfigurationError):
        EncoderConfig(dim=10, heads=3).validate()


# -- fusion ---------------------------------------------------------------------------

def test_zero_bbox_conv_removes_mask_dependence(vocab):
    model = DualEncoder(SMALL, vocab, seed=1)
    for t in model.group("vision.bbox_conv").tensors:
        t.data[...] = 0.0
    rng = np.random.default_rng(0)
    img = depth(rng)
    ref = model.encode_vision(img, np.zeros((16, 16)))
    for _ in range(5):
        mask = (rng.random((16, 16)) < 0.5).astype(float)
        assert np.array_equal(model.encode_vision(img, mask), ref)


def test_all_ones_mask_fusion_is_additive(vocab):
    model = DualEncoder(SMALL, vocab, seed=2)
    rng = np.random.default_rng(1)
    a, b = depth(rng), depth(rng)
    ones = np.ones((1, 16, 16))

    def fused(img):
        x = img.normalized()[None, None]
        h_d = T.patch_project(T.tensor(x), model.depth_w, model.depth_b).data
        h_m = T.patch_project(T.tensor(ones[:, None]), model.bbox_w, model.bbox_b).data
        return h_d, h_d + h_m

    (hd_a, hv_a), (hd_b, hv_b) = fused(a), fused(b)
    np.testing.assert_allclose(hv_a - hv_b, hd_a - hd_b, atol=1e-12)


def test_mask_shape_mismatch(vocab):
    model = DualEncoder(SMALL, vocab)
    with pytest.raises(ContractError):
        model.encode_vision(depth(np.random.default_rng(0)), np.ones((4, 4)))


# -- text tower -----------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.lists(st.sampled_from(DEFAULT_OBJECT_LABELS + DEFAULT_SCENE_LABELS + ("a", "near")), min_size=1, max_size=12))
def test_text_embedding_unit_norm(words):
    model = _shared_model()
    v = model.encode_text(" ".join(words))
    assert abs(np.linalg.norm(v) - 1.0) <= 1e-12
    assert np.array_equal(v, model.encode_text(" ".join(words)))


_MODEL = {}


def _shared_model():
    if "m" not in _MODEL:
        _MODEL["m"] = DualEncoder(SMALL, grammar_vocab(DEFAULT_SCENE_LABELS, DEFAULT_OBJECT_LABELS), seed=3)
    return _MODEL["m"]


def test_empty_text_rejected(vocab):
    with pytest.raises(ContractError):
        DualEncoder(SMALL, vocab).encode_text("  ")


# -- loss -----------------------------------------------------------------------------

def naive_symmetric_infonce(v, t, tau):
    n = len(v)
    logits = [[sum(v[i][k] * t[j][k] for k in range(len(v[i]))) / tau for j in range(n)] for i in range(n)]

    def ce(rows):
        total = 0.0
        for i, row in enumerate(rows):
            m = max(row)
            total += m + math.log(sum(math.exp(x - m) for x in row)) - row[i]
        return total / n

    cols = [[logits[i][j] for i in range(n)] for j in range(n)]
    return 0.5 * (ce(logits) + ce(cols))


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_single_pair_loss_is_zero():
    v = unit_rows(np.random.default_rng(0), 1, 8)
    assert contrastive_loss(T.tensor(v), T.tensor(v), T.tensor(np.log(0.07))).item() == 0.0


def test_uniform_logits_give_ln4():
    v = np.zeros((4, 8))
    v[:, 0] = 1.0
    loss = contrastive_loss(T.tensor(v), T.tensor(v), T.tensor(0.0)).item()
    assert loss == pytest.approx(math.log(4), abs=1e-12)


def test_empty_batch_rejected():
    with pytest.raises(ContractError):
        contrastive_loss(T.tensor(np.zeros((0, 4))), T.tensor(np.zeros((0, 4))), T.tensor(0.0))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10**6), st.floats(0.02, 2.0))
def test_loss_matches_naive_loop_and_is_symmetric(n, seed, tau):
    rng = np.random.default_rng(seed)
    v, t = unit_rows(rng, n, 6), unit_rows(rng, n, 6)
    log_tau = T.tensor(math.log(tau))
    got = contrastive_loss(T.tensor(v), T.tensor(t), log_tau).item()
    assert abs(got - naive_symmetric_infonce(v.tolist(), t.tolist(), tau)) <= 1e-12 * max(1.0, abs(got))
    swapped = contrastive_loss(T.tensor(t), T.tensor(v), log_tau).item()
    assert abs(got - swapped) <= 1e-12
    assert got >= 0.0


def test_end_to_end_gradient_check(vocab, small_scenes):
    model = DualEncoder(SMALL, vocab, seed=4)
    batch = build_pairs(small_scenes[:3], None)[:3]
    d = np.stack([p.depth.normalized() for p in batch])
    m = np.stack([p.mask for p in batch])
    caps = [p.caption for p in batch]

    def loss_value():
        with T.no_grad():
            return model.batch_loss(d, m, caps).item()

    model.batch_loss(d, m, caps).backward()
    rng = np.random.default_rng(0)
    for param in (model.depth_w, model.bbox_w, model.vpos, model.tok, model.vproj.weight, model.log_tau):
        analytic = param.grad.copy()
        flat = param.data.reshape(-1)
        idx = rng.choice(flat.size, size=min(6, flat.size), replace=False)
        numeric = T.numerical_grad(loss_value, param.data, indices=idx)
        a = analytic.reshape(-1)[idx]
        n = numeric.reshape(-1)[idx] if numeric.size == flat.size else numeric
        assert T.max_relative_error(a, n) < 1e-4


# -- training -------------------------------------------------------------------------

def _pairs(scenes, r=0.1):
    return apply_sampling(build_pairs(scenes, None), r, 0)


def test_freeze_text_keeps_text_bytes(vocab, small_scenes):
    cfg = EncoderConfig(**{**SMALL.__dict__, "freeze_text": True})
    start = DualEncoder(cfg, vocab, seed=5)
    before = {g.name: g.tobytes() for g in start.groups()}
    model, _ = train_encoder(_pairs(small_scenes), cfg, 0, vocab, model=start)
    for g in model.text_groups():
        assert g.tobytes() == before[g.name]
    assert any(g.tobytes() != before[g.name] for g in model.vision_groups())


def test_zero_lr_changes_nothing(vocab, small_scenes):
    cfg = EncoderConfig(**{**SMALL.__dict__, "lr": 0.0})
    start = DualEncoder(cfg, vocab, seed=6)
    before = [g.tobytes() for g in start.groups()]
    model, _ = train_encoder(_pairs(small_scenes), cfg, 0, vocab, model=start)
    assert [g.tobytes() for g in model.groups()] == before


@pytest.mark.parametrize("schedule", ["constant", "cosine"])
def test_lr_schedule_per_step(vocab, small_scenes, monkeypatch, schedule):
    seen = []
    real = T.sgd_step
    monkeypatch.setattr(T, "sgd_step", lambda groups, lr: (seen.append(lr), real(groups, lr)))
    cfg = EncoderConfig(**{**SMALL.__dict__, "lr_schedule": schedule})
    pairs = _pairs(small_scenes)
    train_encoder(pairs, cfg, 0, vocab)
    steps = cfg.epochs * math.ceil(len(pairs) / cfg.batch_size)
    if schedule == "constant":
        expected = [cfg.lr] * steps
    else:
        expected = [cfg.lr * 0.5 * (1 + math.cos(math.pi * k / steps)) for k in range(steps)]
    assert seen == pytest.approx(expected, abs=1e-15)
    assert seen[0] == cfg.lr


def test_training_is_deterministic(vocab, small_scenes, tmp_path):
    a, ca = train_encoder(_pairs(small_scenes), SMALL, 3, vocab)
    b, cb = train_encoder(_pairs(small_scenes), SMALL, 3, vocab)
    assert [c.mean_loss for c in ca] == [c.mean_loss for c in cb]
    a.save(tmp_path / "a")
    b.save(tmp_path / "b")
    assert (tmp_path / "a" / "encoder.ckpt").read_bytes() == (tmp_path / "b" / "encoder.ckpt").read_bytes()
    header = curve_csv(ca).splitlines()[0]
    assert header == "epoch,mean_loss,wall_time_s"


def test_checkpoint_round_trip(vocab, tmp_path):
    model = DualEncoder(SMALL, vocab, seed=8)
    model.save(tmp_path)
    again = DualEncoder.load(tmp_path)
    assert [g.tobytes() for g in again.groups()] == [g.tobytes() for g in model.groups()]
    img = depth(np.random.default_rng(2))
    assert np.array_equal(again.encode_vision(img), model.encode_vision(img))


# -- zero-shot ------------------------------------------------------------------------

def test_singleton_label(vocab):
    label, scores = zero_shot_classify(DualEncoder(SMALL, vocab), depth(np.random.default_rng(0)), ["kitchen"])
    assert label == "kitchen" and scores.shape == (1,)


def test_argmax_invariant_to_positive_rescale(vocab):
    model = DualEncoder(SMALL, vocab, seed=9)
    rng = np.random.default_rng(4)
    for _ in range(5):
        label, scores = zero_shot_classify(model, depth(rng), list(DEFAULT_SCENE_LABELS))
        for c in (0.01, 3.0, 1e6):
            assert DEFAULT_SCENE_LABELS[int(np.argmax(scores * c))] == label


def test_untrained_encoder_is_near_chance(vocab):
    scenes = [generate_scene(100_000 + k) for k in range(200)]
    acc, preds = zero_shot_accuracy(DualEncoder(EncoderConfig(), vocab, seed=0), scenes, DEFAULT_SCENE_LABELS)
    assert len(preds) == 200
    assert abs(acc - 0.125) <= 0.07
