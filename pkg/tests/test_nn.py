import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metaloop import nn
from metaloop import tensor as T
from metaloop.nn import HEAD, BackboneConfig

SMALL = BackboneConfig(depth=2, base_channels=4, input_shape=(3, 8, 8), num_classes=3)


def images(rng, n, cfg=SMALL):
    return rng.random((n,) + cfg.input_shape).astype(np.float32)


def test_build_is_deterministic():
    a, b = nn.build(SMALL, seed=3), nn.build(SMALL, seed=3)
    assert a.equal(b)
    assert not a.equal(nn.build(SMALL, seed=4))


def test_head_shape_for_84px_convnet():
    cfg = BackboneConfig(depth=4, base_channels=64, input_shape=(3, 84, 84), num_classes=5)
    assert cfg.spatial_sizes() == [(42, 42), (21, 21), (10, 10), (5, 5)]
    assert nn.build(cfg)[HEAD]["weight"].shape == (5, 1600)


def test_disconnected_miniresnet_drops_only_last_skip():
    cfg = BackboneConfig(family="miniresnet", depth=3, base_channels=4, input_shape=(3, 16, 16),
                         disconnect_last_skip=True)
    specs = nn.layer_specs(cfg)
    assert [s.skip_enabled for s in specs[:-1]] == [True, True, False]
    assert specs[-1].kind == "linear_head"
    params = nn.build(cfg)
    assert "skip_weight" in params["block2"] and "skip_weight" not in params["block3"]


def test_input_too_small_for_depth():
    with pytest.raises(ValueError, match="too small"):
        nn.build(BackboneConfig(depth=4, input_shape=(3, 8, 8)))


def test_initialization_statistics():
    cfg = BackboneConfig(depth=2, base_channels=64, input_shape=(3, 16, 16))
    p = nn.build(cfg, seed=0)
    w = p["conv2"]["weight"].data
    assert w.std() == pytest.approx(np.sqrt(2 / (64 * 9)), rel=0.05)
    head = p[HEAD]["weight"].data
    assert np.abs(head).max() <= 1 / np.sqrt(cfg.feature_dim)
    assert not p["conv1"]["bias"].data.any() and not p[HEAD]["bias"].data.any()
    assert np.all(p["conv1"]["gamma"].data == 1) and not p["conv1"]["beta"].data.any()


def test_parameter_groups_partition_everything():
    p = nn.build(SMALL)
    assert p.group_names == ["conv1", "conv2", HEAD]
    names = [k for k, _ in p.items()]
    assert len(names) == len(set(names))
    assert sum(t.data.size for t in p.tensors()) == p.num_parameters()


def test_zero_head_gives_uniform_softmax(rng):
    p = nn.build(SMALL)
    p = p.replace(HEAD, weight=T.Tensor(np.zeros((3, SMALL.feature_dim), np.float32)))
    logits, _ = nn.forward(p, images(rng, 4))
    np.testing.assert_array_equal(logits.data, 0.0)
    np.testing.assert_allclose(T.softmax(logits).data, 1 / 3, rtol=1e-6)


def test_capture_dimension_matches_feature_dim(rng):
    p = nn.build(SMALL)
    logits, caught = nn.forward(p, images(rng, 4), capture={"conv2", "conv1"})
    assert list(caught) == ["conv1", "conv2"]
    assert caught["conv2"].shape == (4, SMALL.feature_dim)
    assert caught["conv1"].shape == (4, 4 * 4 * 4)


def test_unknown_capture_lists_valid_names(rng):
    with pytest.raises(KeyError, match="conv1"):
        nn.forward(nn.build(SMALL), images(rng, 2), capture={"conv9"})


def test_capture_does_not_perturb_logits(rng):
    p, x = nn.build(SMALL), images(rng, 5)
    plain, _ = nn.forward(p, x)
    captured, _ = nn.forward(p, x, capture={"conv1", "conv2", HEAD})
    assert plain.data.tobytes() == captured.data.tobytes()


def _np_conv_same(x, w, b):
    # x (N,C,H,W), w stored (kh,kw,C,O)
    n, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, w.shape[3], h, wd))
    for i in range(h):
        for j in range(wd):
            patch = xp[:, :, i : i + 3, j : j + 3]  # N,C,3,3
            out[:, :, i, j] = np.einsum("nchw,hwco->no", patch, w)
    return out + b[None, :, None, None]


def _np_module(x, p, eps):
    y = _np_conv_same(x, p["weight"], p["bias"])
    mu = y.mean(axis=(0, 2, 3), keepdims=True)
    var = y.var(axis=(0, 2, 3), keepdims=True)
    y = (y - mu) / np.sqrt(var + eps) * p["gamma"][None, :, None, None] + p["beta"][None, :, None, None]
    y = np.maximum(y, 0)
    n, c, h, w = y.shape
    return y[:, :, : h // 2 * 2, : w // 2 * 2].reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))


def test_forward_matches_composed_numpy_oracle(rng):
    cfg = BackboneConfig(depth=2, base_channels=3, input_shape=(1, 8, 8), num_classes=4)
    p = nn.build(cfg, seed=1, precision="f64")
    p = p.map(lambda g, n, t: T.Tensor(t.data + rng.normal(scale=0.1, size=t.shape)))
    x = rng.random((5, 1, 8, 8))
    logits, _ = nn.forward(p, x)
    h = x
    for name in ("conv1", "conv2"):
        h = _np_module(h, {k: t.data for k, t in p[name].items()}, cfg.bn_eps)
    feats = h.transpose(0, 2, 3, 1).reshape(5, -1)  # channels-last flatten order
    ref = feats @ p[HEAD]["weight"].data.T + p[HEAD]["bias"].data
    np.testing.assert_allclose(logits.data, ref, rtol=1e-10, atol=1e-10)


def test_miniresnet_without_skips_equals_plain_stack(rng):
    cfg = BackboneConfig(family="miniresnet", depth=1, base_channels=4, input_shape=(3, 8, 8),
                         disconnect_last_skip=True)
    p = nn.build(cfg, seed=2)
    x = images(rng, 4, cfg)
    logits, _ = nn.forward(p, x)
    g = p["block1"]
    h = nn._as_input(x, p)
    for j in (1, 2, 3):
        h = T.batch_norm(T.bias_add(T.conv2d(h, g[f"weight{j}"], padding=1), g[f"bias{j}"]), g[f"gamma{j}"], g[f"beta{j}"])
        h = T.leaky_relu(h, cfg.leaky_slope)
    h = T.flatten(T.max_pool2d(h, 2))
    plain = T.linear(h, p[HEAD]["weight"], p[HEAD]["bias"])
    assert logits.data.tobytes() == plain.data.tobytes()


def test_residual_block_adds_projected_skip(rng):
    cfg = BackboneConfig(family="miniresnet", depth=2, base_channels=2, input_shape=(3, 8, 8))
    p = nn.build(cfg)
    assert p["block1"]["skip_weight"].shape == (1, 1, 3, 2)
    assert p["block2"]["skip_weight"].shape == (1, 1, 2, 4)
    logits, caught = nn.forward(p, images(rng, 3, cfg), capture={"block2"})
    assert caught["block2"].shape == (3, cfg.feature_dim) == (3, 4 * 2 * 2)


# ---------------------------------------------------------------------------
# head variants


def test_orthonormalize_keeps_standard_basis():
    p = nn.build(BackboneConfig(depth=1, base_channels=4, input_shape=(1, 4, 4), num_classes=3))
    basis = np.eye(3, 16, dtype=np.float32)
    p = p.replace(HEAD, weight=T.Tensor(basis))
    q = nn.orthonormalize_head(p)[HEAD]["weight"].data
    np.testing.assert_allclose(np.abs(q), basis, atol=1e-7)


def test_orthonormalize_random_head_gram_is_identity():
    cfg = BackboneConfig(depth=1, base_channels=4, input_shape=(1, 8, 8), num_classes=5)  # d = 64
    p = nn.orthonormalize_head(nn.build(cfg, seed=5))
    w = p[HEAD]["weight"].data.astype(np.float64)
    np.testing.assert_allclose(w @ w.T, np.eye(5), atol=1e-6)
    assert not p[HEAD]["bias"].data.any()


def test_orthonormalize_square_head_spans_same_space(rng):
    rows = rng.normal(size=(3, 3))
    q = nn.gram_schmidt(rows)
    proj = lambda a: a.T @ np.linalg.pinv(a @ a.T) @ a  # noqa: E731 - projector onto row space
    np.testing.assert_allclose(proj(q), proj(rows), atol=1e-10)
    np.testing.assert_allclose(q @ q.T, np.eye(3), atol=1e-12)


def test_orthonormalize_rejects_wide_head():
    cfg = BackboneConfig(depth=1, base_channels=1, input_shape=(1, 2, 2), num_classes=3)  # d = 1
    with pytest.raises(ValueError, match="3 rows in 1 dimensions"):
        nn.orthonormalize_head(nn.build(cfg))


def test_orthonormalize_redraws_rank_deficient_head():
    cfg = BackboneConfig(depth=1, base_channels=4, input_shape=(1, 4, 4), num_classes=3)
    p = nn.build(cfg)
    p = p.replace(HEAD, weight=T.Tensor(np.ones((3, 16), np.float32)))
    w = nn.orthonormalize_head(p)[HEAD]["weight"].data.astype(np.float64)
    np.testing.assert_allclose(w @ w.T, np.eye(3), atol=1e-6)


def test_center_head_examples():
    cfg = BackboneConfig(depth=1, base_channels=2, input_shape=(1, 2, 2), num_classes=2)  # d = 2
    p = nn.build(cfg).replace(HEAD, weight=T.Tensor(np.array([[1.0, 1.0], [3.0, 3.0]], np.float32)))
    np.testing.assert_array_equal(nn.center_head(p)[HEAD]["weight"].data, [[-1, -1], [1, 1]])
    zero_mean = np.array([[1.0, -2.0], [-1.0, 2.0]], np.float32)
    p = p.replace(HEAD, weight=T.Tensor(zero_mean))
    np.testing.assert_array_equal(nn.center_head(p)[HEAD]["weight"].data, zero_mean)


def test_center_head_mean_row_is_zero():
    p = nn.center_head(nn.build(SMALL, seed=9))
    assert np.abs(p[HEAD]["weight"].data.mean(axis=0)).max() < 1e-7


@pytest.mark.parametrize("precision,tol", [("f32", 1e-6), ("f64", 1e-12)])
@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), shift=st.floats(-10, 10))
def test_softmax_invariant_to_head_row_shift(precision, tol, seed, shift):
    rng = np.random.default_rng(seed)
    p = nn.build(SMALL, seed=seed % 1000, precision=precision)
    x = images(rng, 4)
    c = rng.normal(size=SMALL.feature_dim) * shift
    w = p[HEAD]["weight"].data
    shifted = p.replace(HEAD, weight=T.Tensor((w + c).astype(w.dtype)))
    a = T.softmax(nn.forward(p, x)[0]).data
    b = T.softmax(nn.forward(shifted, x)[0]).data
    scale = max(1.0, float(np.abs(c).sum()))
    np.testing.assert_allclose(a, b, atol=tol * scale)


def test_centering_keeps_softmax(rng):
    p = nn.build(SMALL, seed=1)
    x = images(rng, 6)
    a = T.softmax(nn.forward(p, x)[0]).data
    b = T.softmax(nn.forward(nn.center_head(p), x)[0]).data
    np.testing.assert_allclose(a, b, atol=1e-6)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    p = nn.build(SMALL, seed=11)
    path = tmp_path / "p.ckpt"
    nn.save_checkpoint(p, path)
    q = nn.load_checkpoint(path, SMALL)
    assert p.equal(q) and q.group_names == p.group_names


def test_checkpoint_layout(tmp_path):
    p = nn.build(SMALL)
    path = tmp_path / "p.ckpt"
    nn.save_checkpoint(p, path)
    raw = path.read_bytes()
    assert raw[:4] == b"MLP1"
    assert int.from_bytes(raw[4:8], "little") == len(list(p.items()))
    name_len = int.from_bytes(raw[8:12], "little")
    assert raw[12 : 12 + name_len] == b"conv1.weight"
    assert raw[12 + name_len : 16 + name_len] == b"MLT1"


def test_checkpoint_backbone_mismatch(tmp_path):
    path = tmp_path / "p.ckpt"
    nn.save_checkpoint(nn.build(SMALL), path)
    other = BackboneConfig(depth=2, base_channels=8, input_shape=(3, 8, 8), num_classes=3)
    with pytest.raises(ValueError, match="shape mismatch"):
        nn.load_checkpoint(path, other)
