import math

import numpy as np
import pytest

from freqlens import models as M
from freqlens import tensor as T
from freqlens.harness import synth_dataset
from freqlens.models import LabeledBatch, ModelParams
from freqlens.tensor import GradTape, Tensor

SHAPE = (3, 16, 16)


@pytest.mark.parametrize("arch", M.ARCHS)
def test_init_is_deterministic(arch):
    a = M.init_model(arch, SHAPE, 4, seed=3)
    b = M.init_model(arch, SHAPE, 4, seed=3)
    assert a.weights.keys() == b.weights.keys()
    for k in a.weights:
        assert a.weights[k].tobytes() == b.weights[k].tobytes()


def test_attn_32x32_has_64_tokens():
    p = M.init_model("tiny_attn", (3, 32, 32), 10, seed=0)
    assert p.weights["pos"].shape == (64, M.WIDTH)
    tokens = M.patchify(Tensor(np.zeros((1, 3, 32, 32))))
    assert tokens.shape == (1, 64, 3 * 16)


@pytest.mark.parametrize(
    "arch,shape,classes",
    [("tiny_convnet", (3, 7, 16), 4), ("tiny_convnet", SHAPE, 1), ("tiny_attn", (3, 18, 18), 4), ("mlp", SHAPE, 4)],
)
def test_init_rejects_invalid_shapes(arch, shape, classes):
    with pytest.raises(M.InvalidShapeError):
        M.init_model(arch, shape, classes, seed=0)


@pytest.mark.parametrize("arch", M.ARCHS)
def test_weight_shapes_follow_arch(arch):
    p = M.init_model(arch, SHAPE, 5, seed=1)
    assert {k: v.shape for k, v in p.weights.items()} == M.weight_shapes(arch, SHAPE, 5)


def test_convnet_logit_shape():
    p = M.init_model("tiny_convnet", SHAPE, 4, seed=0)
    x = np.random.default_rng(0).uniform(size=(5, *SHAPE))
    assert M.forward_logits(p, LabeledBatch(x)).shape == (5, 4)


@pytest.mark.parametrize("arch", M.ARCHS)
def test_no_cross_sample_coupling(arch):
    p = M.init_model(arch, SHAPE, 4, seed=0)
    x = np.random.default_rng(1).uniform(size=(8, *SHAPE))
    batch = M.forward_logits(p, x).data
    single = M.forward_logits(p, x[3:4]).data
    np.testing.assert_allclose(single[0], batch[3], atol=1e-9, rtol=0)


@pytest.mark.parametrize("arch", M.ARCHS)
def test_batch_permutation_permutes_logits(arch):
    p = M.init_model(arch, SHAPE, 4, seed=0)
    x = np.random.default_rng(2).uniform(size=(6, *SHAPE))
    perm = np.array([4, 0, 5, 1, 3, 2])
    np.testing.assert_allclose(
        M.forward_logits(p, x[perm]).data, M.forward_logits(p, x).data[perm], atol=1e-12
    )


def test_zero_image_gives_equal_logits_with_zero_biases():
    # zero input -> conv outputs are exactly the (zero) biases, relu/pool keep
    # zeros, so the head sees a zero vector and returns its zero bias
    p = M.init_model("tiny_convnet", SHAPE, 4, seed=9)
    assert all(not v.any() for k, v in p.weights.items() if k.endswith(".b"))
    z = M.forward_logits(p, np.zeros((1, *SHAPE))).data[0]
    assert np.ptp(z) <= 1e-9


def test_shape_mismatch_rejected():
    p = M.init_model("tiny_convnet", SHAPE, 4, seed=0)
    with pytest.raises(M.InvalidShapeError):
        M.forward_logits(p, np.zeros((1, 3, 32, 32)))


def test_logits_differentiable_wrt_images():
    p = M.init_model("tiny_attn", SHAPE, 4, seed=0)
    x = Tensor(np.random.default_rng(0).uniform(size=(2, *SHAPE)))
    with GradTape() as tape:
        loss = M.loss_ce(M.forward_logits(p, x), [1, 2])
    (g,) = tape.gradient(loss, [x])
    assert g.shape == x.shape and np.all(np.isfinite(g)) and np.abs(g).sum() > 0


def test_loss_uniform_logits_is_log_c():
    for c in (2, 4, 10):
        loss = M.loss_ce(Tensor(np.zeros((3, c))), [0, 1, 1])
        assert abs(float(loss.data) - math.log(c)) <= 1e-12


def test_loss_confident_correct_below_log_c():
    z = np.zeros((2, 4))
    z[0, 1] = z[1, 3] = 3.0
    assert float(M.loss_ce(Tensor(z), [1, 3]).data) < math.log(4)


def test_loss_matches_high_precision_oracle():
    from mpmath import mp, mpf, exp, log

    mp.dps = 40
    rng = np.random.default_rng(8)
    z = rng.normal(size=(6, 5)) * 4
    y = rng.integers(0, 5, size=6)
    ref = sum(log(sum(exp(mpf(v)) for v in row)) - mpf(row[t]) for row, t in zip(z, y)) / len(y)
    assert abs(float(M.loss_ce(Tensor(z), y).data) - float(ref)) <= 1e-9


def test_loss_rejects_bad_labels():
    with pytest.raises(ValueError):
        M.loss_ce(Tensor(np.zeros((1, 3))), [3])


def test_evaluate_label_equals_argmax_is_one():
    p = M.init_model("tiny_convnet", SHAPE, 4, seed=0)
    x = np.random.default_rng(4).uniform(size=(10, *SHAPE))
    ds = LabeledBatch(x, M.predict(p, x))
    assert M.evaluate(p, ds) == 1.0
    assert M.evaluate(p, ds) == M.evaluate(p, ds)


def test_evaluate_single_misclassified_is_zero():
    p = M.init_model("tiny_convnet", SHAPE, 4, seed=0)
    x = np.random.default_rng(5).uniform(size=(1, *SHAPE))
    wrong = (M.predict(p, x) + 1) % 4
    assert M.evaluate(p, LabeledBatch(x, wrong)) == 0.0


def test_evaluate_empty_raises():
    p = M.init_model("tiny_convnet", SHAPE, 4, seed=0)
    with pytest.raises(ValueError):
        M.evaluate(p, LabeledBatch(np.zeros((0, *SHAPE)), np.zeros(0, dtype=int)))


def test_argmax_ties_go_to_lowest_index():
    # zero head weights and biases -> all logits tie at 0
    p = M.init_model("tiny_convnet", SHAPE, 4, seed=0)
    p.weights["head.w"][:] = 0
    assert (M.predict(p, np.random.default_rng(0).uniform(size=(3, *SHAPE))) == 0).all()


def test_untrained_accuracy_near_chance():
    ds = synth_dataset(123, 200, 4, SHAPE, split="test")
    accs = [M.evaluate(M.init_model("tiny_convnet", SHAPE, 4, seed=s), ds) for s in range(10)]
    assert 0.15 <= float(np.mean(accs)) <= 0.35


def test_position_embedding_toggle_gives_patch_permutation_invariance():
    p = M.init_model("tiny_attn", SHAPE, 4, seed=0, use_pos_emb=False)
    x = np.random.default_rng(6).uniform(size=(1, *SHAPE))
    # swap two 4x4 patches spatially
    y = x.copy()
    y[..., 0:4, 0:4], y[..., 8:12, 4:8] = x[..., 8:12, 4:8], x[..., 0:4, 0:4]
    np.testing.assert_allclose(M.forward_logits(p, y).data, M.forward_logits(p, x).data, atol=1e-12)
    p.use_pos_emb = True
    p.weights["pos"] = np.random.default_rng(1).normal(size=p.weights["pos"].shape)
    assert not np.allclose(M.forward_logits(p, y).data, M.forward_logits(p, x).data)


@pytest.mark.parametrize("arch", M.ARCHS)
def test_checkpoint_roundtrip_bit_identical(arch, tmp_path):
    p = M.init_model(arch, SHAPE, 4, seed=2)
    path = M.save_checkpoint(p, tmp_path / "m.ckpt")
    q = M.load_checkpoint(path)
    assert (q.arch, q.num_classes, q.input_shape, q.use_pos_emb) == (p.arch, 4, SHAPE, True)
    for k in p.weights:
        assert q.weights[k].tobytes() == p.weights[k].tobytes()
    assert M.dumps_checkpoint(q) == path.read_bytes()


def test_checkpoint_header_layout():
    blob = M.dumps_checkpoint(M.init_model("tiny_convnet", SHAPE, 4, seed=0))
    assert blob[:8] == b"FQLNCKPT"
    assert int.from_bytes(blob[8:12], "little") == M.CKPT_VERSION
    alen = int.from_bytes(blob[12:14], "little")
    assert blob[14 : 14 + alen] == b"tiny_convnet"


def test_checkpoint_rejects_corruption():
    blob = M.dumps_checkpoint(M.init_model("tiny_convnet", SHAPE, 4, seed=0))
    with pytest.raises(M.CheckpointError):
        M.loads_checkpoint(b"XXXXXXXX" + blob[8:])
    with pytest.raises(M.CheckpointError):
        M.loads_checkpoint(blob[:-8])


def test_params_copy_is_independent():
    p = M.init_model("tiny_convnet", SHAPE, 4, seed=0)
    q = p.copy()
    q.weights["head.b"][0] = 1.0
    assert p.weights["head.b"][0] == 0.0
    assert isinstance(q, ModelParams)


def test_convnet_forward_matches_manual_composition():
    p = M.init_model("tiny_convnet", SHAPE, 3, seed=4)
    x = np.random.default_rng(0).uniform(size=(2, *SHAPE))
    h = Tensor(x)
    for i in range(3):
        h = T.conv2d(h, p.weights[f"conv{i}.w"], pad=1) + T.reshape(Tensor(p.weights[f"conv{i}.b"]), (1, -1, 1, 1))
        h = T.maxpool2d(T.relu(h))
    ref = T.reshape(h, (2, -1)).data @ p.weights["head.w"] + p.weights["head.b"]
    np.testing.assert_allclose(M.forward_logits(p, x).data, ref, atol=1e-12)
