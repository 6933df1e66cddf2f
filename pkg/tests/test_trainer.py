import math

import numpy as np
import pytest

from blendcore import synthdata as SD
from blendcore import trainer as TR
from blendcore.blender import BlendConfig
from blendcore.roi import roi_align_bilinear

import oracles

SCENES = SD.generate(SD.DatasetSpec(seed=7, n_train=8, n_val=2))[0]
SMALL = BlendConfig(R=14, K=4, M=7)


def test_zero_init_gives_channel_mean():
    params = TR.init_params(BlendConfig(), seed=0)
    scene = SCENES[0]
    fwd = TR.forward(params, [scene])
    crops = roi_align_bilinear(fwd.bases.value, scene.boxes, 56, TR.STRIDE)
    np.testing.assert_allclose(fwd.blended.value, crops.mean(axis=1, keepdims=True), rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(fwd.scores, 0.25)


def test_single_basis_sigmoid_zero_init_is_quarter():
    cfg = BlendConfig(R=56, K=1, M=14, merge_mode="single_basis_sigmoid")
    params = TR.init_params(cfg, seed=0)
    params.tensors["basis.w"][...] = 0  # the basis head too, so r = 0 everywhere
    out = TR.forward_instance(params, SCENES[1], cfg)
    np.testing.assert_array_equal(out, np.float32(0.25))


def test_param_count_depends_only_on_k_and_m():
    a = TR.init_params(BlendConfig(R=28, K=4, M=7), seed=0).count
    b = TR.init_params(BlendConfig(R=56, K=4, M=7), seed=3).count
    c = TR.init_params(BlendConfig(R=56, K=4, M=14), seed=0).count
    assert a == b < c
    assert c - a == (4 * 14 * 14 - 4 * 7 * 7) * (16 * 9 + 1)


def test_forward_instance_rejects_mismatched_cfg():
    params = TR.init_params(SMALL)
    with pytest.raises(ValueError):
        TR.forward_instance(params, SCENES[0], BlendConfig())


class TestLoss:
    def test_zero_logits_ln2(self):
        target = np.zeros((2, 1, 4, 4))
        target[:, :, :2] = 1
        assert TR.loss_bce(np.zeros_like(target), target) == pytest.approx(math.log(2), abs=1e-15)

    def test_large_margin_near_zero(self):
        target = (np.random.default_rng(0).random((1, 1, 6, 6)) > 0.5).astype(float)
        assert TR.loss_bce(60 * (2 * target - 1), target) < 1e-20

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(0, 4, size=(3, 1, 5, 5))
        target = (rng.random(logits.shape) > 0.5).astype(float)
        assert TR.loss_bce(logits, target) == pytest.approx(oracles.bce(logits, target), rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            TR.loss_bce(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)))


def test_lr_schedule():
    t = TR.TrainConfig(iterations=90, lr=1.0)
    assert t.lr_at(0) == 1.0 and t.lr_at(59) == 1.0
    assert t.lr_at(60) == pytest.approx(0.1)
    assert t.lr_at(80) == pytest.approx(0.01)


@pytest.mark.parametrize("kw", [dict(iterations=0), dict(lr=-1.0), dict(momentum=1.0), dict(batch_size=0)])
def test_bad_train_config(kw):
    with pytest.raises(ValueError):
        TR.TrainConfig(**kw)


def test_zero_lr_leaves_params_unchanged():
    tcfg = TR.TrainConfig(iterations=6, lr=0.0, blend=SMALL)
    params, curve = TR.train(SCENES[:1], tcfg)
    fresh = TR.init_params(SMALL, tcfg.seed)
    for k in fresh.tensors:
        np.testing.assert_array_equal(params.tensors[k], fresh.tensors[k])
    losses = [c[1] for c in curve]
    assert losses == [losses[0]] * 6


def test_single_scene_overfit():
    params, curve = TR.train(SCENES[:1], TR.TrainConfig(iterations=500, blend=SMALL))
    assert curve[-1][1] < 0.5 * curve[0][1]


def test_gradient_reaches_both_pathways():
    params = TR.init_params(BlendConfig(), seed=0)
    _, grads = TR.loss_and_grads(params, SCENES[:4], TR.TargetCache(56))
    for name in ("conv1.w", "conv3.w", "basis.w", "top.w", "top.b"):
        assert np.abs(grads[name]).max() > 0, name


def test_training_is_deterministic():
    tcfg = TR.TrainConfig(iterations=12, blend=SMALL, seed=2)
    a, ca = TR.train(SCENES, tcfg)
    b, cb = TR.train(SCENES, tcfg)
    assert ca == cb
    for k in a.tensors:
        assert a.tensors[k].tobytes() == b.tensors[k].tobytes()


def test_early_windows_decrease():
    train_set = SD.generate(SD.DatasetSpec(seed=0, n_train=40, n_val=1))[0]
    _, curve = TR.train(train_set, TR.TrainConfig(iterations=300))
    losses = np.array([c[1] for c in curve])
    for start in (0, 100, 200):
        window = losses[start : start + 100]
        assert window[-25:].mean() < window[:25].mean(), start


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises():
    with pytest.raises(TR.DivergenceError):
        TR.train(SCENES, TR.TrainConfig(iterations=40, lr=1e6, blend=SMALL))


def test_checkpoint_roundtrip_replays_bit_exactly(tmp_path):
    params, _ = TR.train(SCENES, TR.TrainConfig(iterations=5, blend=SMALL))
    TR.save_checkpoint(params, tmp_path / "ckpt")
    loaded = TR.load_checkpoint(tmp_path / "ckpt")
    assert loaded.cfg == params.cfg
    for k in params.tensors:
        assert loaded.tensors[k].shape == params.tensors[k].shape
        assert loaded.tensors[k].tobytes() == params.tensors[k].tobytes()
    a = TR.instance_logits(params, SCENES[3])
    b = TR.instance_logits(loaded, SCENES[3])
    assert a.tobytes() == b.tobytes()


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        TR.load_checkpoint(tmp_path / "nothing")


def test_curve_csv(tmp_path):
    TR.write_curve(tmp_path / "c.csv", [(0, 0.5, 0.05), (1, 0.25, 0.05)])
    assert (tmp_path / "c.csv").read_text().splitlines() == ["iter,loss,lr", "0,0.5,0.05", "1,0.25,0.05"]
