import numpy as np
import pytest

from cmr import diffcore as dc
from cmr.gradcheck import MODEL_TOLERANCE, model_checks, run_checks
from cmr.meshgraph import DimensionError, adjacency_from_edges
from cmr.regressor import (
    EncoderConfig, FCBaseline, ImageEncoder, MeshRegressor, RegressorConfig, as_leaves,
    attach_features, count_params, encode_image, fc_head_size, graph_conv, graph_head_size,
    init_residual_block, matched_fc_hidden, residual_block,
)

SMALL_ENC = EncoderConfig(resolution=16, in_channels=8, widths=(8, 8), feature_dim=16, groups=4)


def _random_graph(rng, n=6):
    edges = {(i, (i + 1) % n) for i in range(n)}
    for _ in range(n):
        a, b = rng.choice(n, 2, replace=False)
        edges.add((min(a, b), max(a, b)))
    return sorted(edges)


def _permuted(edges, perm):
    inv = np.argsort(perm)
    return [(inv[a], inv[b]) for a, b in edges]


# -------------------------------------------------------------- graph_conv

def test_graph_conv_identity():
    adj = adjacency_from_edges(4, np.zeros((0, 2)))
    x = np.arange(12.0).reshape(4, 3)
    np.testing.assert_array_equal(graph_conv(adj, x, np.eye(3), np.zeros(3)).data, x)


def test_graph_conv_keeps_identical_rows(rng):
    adj = adjacency_from_edges(6, _random_graph(rng))
    x = np.tile(rng.normal(size=4), (6, 1))
    y = graph_conv(adj, x, rng.normal(size=(4, 5)), rng.normal(size=5)).data
    np.testing.assert_allclose(y, np.tile(y[0], (6, 1)), atol=1e-14)


def test_graph_conv_permutation_equivariant(rng):
    edges = _random_graph(rng)
    perm = rng.permutation(6)
    a, ap = adjacency_from_edges(6, edges), adjacency_from_edges(6, _permuted(edges, perm))
    x, w, b = rng.normal(size=(6, 4)), rng.normal(size=(4, 3)), rng.normal(size=3)
    np.testing.assert_allclose(graph_conv(ap, x[perm], w, b).data, graph_conv(a, x, w, b).data[perm], atol=1e-12)


# ---------------------------------------------------------- residual block

def _block(rng, c=16, up_gain=1.0):
    p = {}
    init_residual_block(p, rng, "b", c, np.float64, up_gain=up_gain)
    return p


def test_residual_block_zero_weights_is_identity(rng):
    adj = adjacency_from_edges(6, _random_graph(rng))
    p = {k: np.zeros_like(v) for k, v in _block(rng).items()}
    x = rng.normal(size=(2, 6, 16))
    assert residual_block(adj, x, p, "b", 2).data.tobytes() == x.tobytes()
    # only the last linear needs to vanish
    p = _block(rng)
    p["b.up.w"][:] = 0.0
    np.testing.assert_array_equal(residual_block(adj, x, p, "b", 2).data, x)


def test_residual_block_shape_and_equivariance(rng):
    edges = _random_graph(rng)
    perm = rng.permutation(6)
    a, ap = adjacency_from_edges(6, edges), adjacency_from_edges(6, _permuted(edges, perm))
    p = _block(rng)
    x = rng.normal(size=(6, 16))
    y = residual_block(a, x, p, "b", 2).data
    assert y.shape == x.shape
    np.testing.assert_allclose(residual_block(ap, x[perm], p, "b", 2).data, y[perm], atol=1e-12)


def test_residual_block_grad(rng):
    adj = adjacency_from_edges(6, _random_graph(rng))
    p = _block(rng)
    names = list(p)
    w = dc.Tensor(rng.normal(size=(6, 16)))

    def f(x, *arrs):
        return dc.sum_all(dc.mul(residual_block(adj, x, dict(zip(names, arrs)), "b", 2), w))

    # two channels per group, so every bias reaches the output
    assert dc.grad_check(f, [rng.normal(size=(6, 16))] + [p[k] for k in names]) < 1e-4


# ------------------------------------------------------------ encoder etc.

def test_attach_features_shapes(rng):
    t = rng.normal(size=(5, 3))
    assert attach_features(rng.normal(size=7), t).shape == (5, 10)
    out = attach_features(rng.normal(size=(2, 7)), t)
    assert out.shape == (2, 5, 10)
    np.testing.assert_array_equal(out.data[1, :, :3], t)
    np.testing.assert_array_equal(attach_features(np.zeros((2, 0)), t).data, np.broadcast_to(t, (2, 5, 3)))


def test_encoder_shapes_and_errors(rng):
    enc = ImageEncoder(SMALL_ENC)
    p = enc.init_params(rng)
    assert enc.forward(p, rng.uniform(size=(3, 16, 16, 8))).shape == (3, 16)
    assert encode_image(enc, p, rng.uniform(size=(16, 16, 8))).shape == (16,)
    with pytest.raises(DimensionError):
        enc.forward(p, np.zeros((1, 16, 16, 3)))


@pytest.mark.parametrize("kw", [dict(channels=62), dict(channels=64, groups=3), dict(channels=32, groups=16)])
def test_regressor_config_validation(kw):
    with pytest.raises(ValueError):
        RegressorConfig(**kw)


def test_encoder_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(resolution=20, widths=(8, 8, 8))
    with pytest.raises(ValueError):
        EncoderConfig(widths=(6,), groups=4)


# ------------------------------------------------------------- full models

@pytest.fixture(scope="module")
def graph_net(pair):
    return MeshRegressor(SMALL_ENC, RegressorConfig(channels=32, blocks=2, groups=4), pair)


def test_mesh_regressor_contract(graph_net, body, rng):
    p = graph_net.init_params(np.random.default_rng(0))
    v, coarse, cam = graph_net.forward(p, rng.uniform(size=(2, 16, 16, 8)))
    assert v.shape == (2, body.n_vertices, 3)
    assert coarse.shape == (2, graph_net.n_coarse, 3)
    assert cam.shape == (2, 3) and np.all(cam.data[:, 0] > 0)
    np.testing.assert_allclose(v.data, np.einsum("nc,bck->bnk", graph_net.pair.up.to_dense(), coarse.data),
                               atol=1e-13)


def test_camera_scale_positive_for_extreme_weights(graph_net, rng):
    p = graph_net.init_params(np.random.default_rng(0))
    p["gcn.cam.b"][0] = -1e3
    _, _, cam = graph_net.forward(p, rng.uniform(size=(1, 16, 16, 8)))
    assert cam.data[0, 0] >= 1e-4


def test_forward_deterministic(graph_net, rng):
    img = rng.uniform(size=(2, 16, 16, 8))
    a = graph_net.forward(graph_net.init_params(np.random.default_rng(3)), img)[0].data
    b = graph_net.forward(graph_net.init_params(np.random.default_rng(3)), img)[0].data
    assert a.tobytes() == b.tobytes()


def test_head_params_match_formula(graph_net):
    p = graph_net.init_params(np.random.default_rng(0))
    assert count_params(p, graph_net.head_param_names(p)) == graph_head_size(SMALL_ENC, graph_net.cfg)


def test_default_fc_baseline_matched_within_ten_percent(pair, rng):
    enc, cfg = EncoderConfig(), RegressorConfig()
    nc = pair.coarse_mesh.n_vertices
    h = matched_fc_hidden(enc, cfg, nc)
    g = MeshRegressor(enc, cfg, pair)
    f = FCBaseline(enc, pair, h)
    pg, pf = g.init_params(np.random.default_rng(0)), f.init_params(np.random.default_rng(0))
    ng, nf = count_params(pg, g.head_param_names(pg)), count_params(pf, f.head_param_names(pf))
    assert nf == fc_head_size(enc.feature_dim, h, nc)
    assert abs(nf - ng) <= 0.1 * ng
    # encoders are identical, so whole-model counts match too
    assert abs(count_params(pf) - count_params(pg)) <= 0.1 * count_params(pg)


def test_fc_baseline_contract(pair, body, rng):
    f = FCBaseline(SMALL_ENC, pair, 10)
    p = f.init_params(np.random.default_rng(0))
    v, coarse, cam = f.forward(p, rng.uniform(size=(2, 16, 16, 8)))
    assert v.shape == (2, body.n_vertices, 3) and np.all(cam.data[:, 0] > 0)


def test_as_leaves():
    leaves = as_leaves({"a": np.ones(2)})
    assert leaves["a"].requires_grad and leaves["a"].name == "a"


def test_toy_pipeline_gradients():
    for r in run_checks(model_checks(), MODEL_TOLERANCE):
        assert r.passed, r.line()
