"""Finite-difference checks for every differentiable op and the full models.

Each check returns a :class:`CheckResult`; ``run_suite`` drives the
``grad-check`` command. Inputs are seeded so results are reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cmr import diffcore as dc
from cmr.bodymodel import MiniBodyModel, ParamRegressorMLP, lbs
from cmr.meshgraph import SparseMatrix, TemplateMesh, build_adjacency, coarsen
from cmr.metrics import project, regress_joints, smpl_stage_loss, total_loss
from cmr.regressor import (
    EncoderConfig, FCBaseline, MeshRegressor, RegressorConfig, attach_features, graph_conv,
    init_residual_block, residual_block,
)

OP_TOLERANCE = 1e-5
MODEL_TOLERANCE = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self):
        return self.error < self.tolerance

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max relative error {self.error:.3e} (tol {self.tolerance:.0e})"


def icosahedron():
    """Unit icosahedron: 12 vertices, 20 outward faces."""
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
                  [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
                  [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=np.float64)
    v /= np.linalg.norm(v[0])
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                  [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                  [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                  [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]], dtype=np.int64)
    return TemplateMesh(v, f)


def toy_body(n_joints=3, n_betas=2, seed=0):
    """A tiny skinned model on the icosahedron, for gradient checks."""
    rng = np.random.default_rng(seed)
    mesh = icosahedron()
    n = mesh.n_vertices
    parents = np.array([-1] + [max(0, j - 2) for j in range(1, n_joints)], dtype=np.int64)
    w = rng.uniform(0.1, 1.0, size=(n, n_joints))
    w /= w.sum(1, keepdims=True)
    reg = rng.uniform(0.1, 1.0, size=(n_joints, n))
    reg /= reg.sum(1, keepdims=True)
    dirs = rng.normal(scale=0.05, size=(n, 3, n_betas))
    return MiniBodyModel(mesh, dirs, SparseMatrix.from_dense(reg), parents, w)


def _inert(name):
    """Block biases feeding a group norm whose groups hold one channel at the
    toy sizes used here; their gradient is exactly zero, so a relative error
    against finite-difference noise is meaningless."""
    return name.endswith((".down.b", ".conv.b"))


def _mask(names, offset=0):
    return [None] * offset + [np.zeros(1, bool) if _inert(k) else None for k in names]


def _probe(rng, shape):
    return dc.Tensor(rng.normal(size=shape))


def _linear_probe(op, out_shape, seed):
    """Scalar sum(op(...) * W) for a fixed random W."""
    w = _probe(np.random.default_rng(seed), out_shape)
    return lambda *xs: dc.sum_all(dc.mul(op(*xs), w))


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin * 2, x)


def op_checks():
    """(name, f, inputs) triples covering each backward rule."""
    rng = np.random.default_rng(1234)
    checks = []
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    checks.append(("matmul", _linear_probe(dc.matmul, (4, 3), 1), [a, b]))
    xb = rng.normal(size=(2, 4, 5))
    checks.append(("matmul batched", _linear_probe(dc.matmul, (2, 4, 3), 2), [xb, b]))
    dense = rng.normal(size=(8, 8)) * (rng.uniform(size=(8, 8)) < 0.4)
    s = SparseMatrix.from_dense(dense)
    checks.append(("sparse_matmul", _linear_probe(lambda x: dc.sparse_matmul(s, x), (8, 3), 3),
                   [rng.normal(size=(8, 3))]))
    checks.append(("bias_add", _linear_probe(dc.bias_add, (2, 4, 5), 4), [xb, rng.normal(size=5)]))
    checks.append(("group_norm rows", _linear_probe(
        lambda x, g, bb: dc.group_norm(x, 2, g, bb), (6, 8), 5),
        [rng.normal(size=(6, 8)), rng.normal(size=8), rng.normal(size=8)]))
    checks.append(("group_norm per-sample", _linear_probe(
        lambda x, g, bb: dc.group_norm(x, 2, g, bb, per_sample=True), (2, 5, 8), 6),
        [rng.normal(size=(2, 5, 8)), rng.normal(size=8), rng.normal(size=8)]))
    checks.append(("relu", _linear_probe(dc.relu, (5, 4), 7), [_away_from_zero(rng, (5, 4))]))
    checks.append(("softplus", _linear_probe(dc.softplus, (5, 4), 8), [rng.normal(size=(5, 4))]))
    checks.append(("conv2d", _linear_probe(lambda x, w: dc.conv2d(x, w, stride=2, pad=1), (2, 3, 3, 4), 9),
                   [rng.normal(size=(2, 6, 6, 3)), rng.normal(size=(3, 3, 3, 4))]))
    tgt = rng.normal(size=(6, 3))
    p = tgt + _away_from_zero(rng, (6, 3))
    mask = (rng.uniform(size=(6, 1)) < 0.7).astype(float)
    checks.append(("l1_loss", lambda x: dc.l1_loss(x, tgt, mask), [p]))
    checks.append(("l2_loss", lambda x: dc.l2_loss(x, tgt), [rng.normal(size=(6, 3))]))
    checks.append(("concat/mean/tile", lambda u, v: dc.sum_all(dc.mul(
        dc.tile_rows(dc.mean_over_rows(dc.concat([u, v], axis=-1)), 3), _probe(np.random.default_rng(10), (3, 5)))),
        [rng.normal(size=(4, 2)), rng.normal(size=(4, 3))]))
    checks.append(("so3_project", _linear_probe(dc.so3_project, (4, 3, 3), 11), [rng.normal(size=(4, 3, 3))]))
    body = toy_body()
    rot = dc.so3_project_array(rng.normal(size=(2, 3, 3, 3)))[0]
    checks.append(("lbs", _linear_probe(lambda r, bt: lbs(body, r, bt), (2, 12, 3), 12),
                   [rot, rng.normal(size=(2, 2))]))
    checks.append(("project", _linear_probe(project, (2, 5, 2), 13),
                   [rng.normal(size=(2, 5, 3)), np.abs(rng.normal(size=(2, 3))) + 0.5]))
    checks.append(("attach_features", _linear_probe(
        lambda f: attach_features(f, icosahedron().vertices), (2, 12, 7), 14), [rng.normal(size=(2, 4))]))
    adj = build_adjacency(icosahedron())
    checks.append(("graph_conv", _linear_probe(lambda x, w, bb: graph_conv(adj, x, w, bb), (12, 3), 15),
                   [rng.normal(size=(12, 4)), rng.normal(size=(4, 3)), rng.normal(size=3)]))
    return checks


def _residual_block_check():
    rng = np.random.default_rng(77)
    adj = build_adjacency(icosahedron())
    p = {}
    init_residual_block(p, rng, "blk", 8, np.float64, up_gain=1.0)
    for k in p:
        if k.endswith(".b"):
            p[k] = rng.normal(scale=0.1, size=p[k].shape)
    names = list(p)
    w = _probe(rng, (2, 12, 8))

    def f(x, *arrs):
        return dc.sum_all(dc.mul(residual_block(adj, x, dict(zip(names, arrs)), "blk", 2), w))

    return f, [rng.normal(size=(2, 12, 8))] + [p[k] for k in names], _mask(names, 1)


def _toy_pipeline(kind, seed=5):
    body = toy_body(seed=seed)
    pair = coarsen(body.template, 2)
    enc = EncoderConfig(resolution=8, in_channels=2, widths=(4, 4), feature_dim=6, groups=2)
    if kind == "graph":
        net = MeshRegressor(enc, RegressorConfig(channels=8, blocks=2, groups=2), pair)
    else:
        net = FCBaseline(enc, pair, hidden=5)
    rng = np.random.default_rng(seed)
    params = net.init_params(rng)
    for k in params:  # move off the symmetric init so no gradient is exactly tiny
        params[k] = params[k] + rng.normal(scale=0.05, size=params[k].shape)
    images = rng.uniform(size=(2, 8, 8, 2))
    gt = body.template.vertices[None] + rng.normal(scale=0.3, size=(2, 12, 3))
    kp = rng.normal(scale=0.5, size=(2, 3, 2))
    names = list(params)

    def f(*arrs):
        v, _, cam = net.forward(dict(zip(names, arrs)), images)
        return total_loss(v, cam, gt, kp, body.joint_regressor)[0]

    return f, [params[k] for k in names], _mask(names)


def _toy_stage2(seed=6):
    body = toy_body(seed=seed)
    mlp = ParamRegressorMLP(6, body.n_joints, body.n_betas, hidden=(7,))
    rng = np.random.default_rng(seed)
    params = mlp.init_params(rng)
    for k in params:
        params[k] = params[k] + rng.normal(scale=0.1, size=params[k].shape)
    coarse = rng.normal(size=(2, 6, 3))
    rot_gt = dc.so3_project_array(rng.normal(size=(2, 3, 3, 3)))[0]
    beta_gt = rng.normal(size=(2, 2))
    gt = body.template.vertices[None] + rng.normal(scale=0.3, size=(2, 12, 3))
    kp = rng.normal(scale=0.5, size=(2, 3, 2))
    cam = np.array([[0.9, 0.1, -0.1], [1.1, 0.0, 0.2]])
    names = list(params)

    def f(*arrs):
        rot, beta = mlp.forward(dict(zip(names, arrs)), coarse)
        mesh = lbs(body, rot, beta)
        return smpl_stage_loss(rot, beta, rot_gt, beta_gt, mesh, gt, cam, kp, body.joint_regressor)

    return f, [params[k] for k in names]


def model_checks():
    out = [("residual_block",) + _residual_block_check()]
    out.append(("graph regressor + total loss",) + _toy_pipeline("graph"))
    out.append(("fc baseline + total loss",) + _toy_pipeline("fc"))
    out.append(("parameter MLP + lbs + stage-2 loss",) + _toy_stage2() + (None,))
    body = toy_body()
    out.append(("joint regression + projection", lambda v, c: dc.l1_loss(
        project(regress_joints(body.joint_regressor, v), c), np.zeros((2, 3, 2))),
        [np.random.default_rng(3).normal(size=(2, 12, 3)), np.array([[0.8, 0.3, 0.1], [1.2, -0.2, 0.4]])], None))
    return out


def run_checks(checks, tol):
    out = []
    for name, f, inputs, *mask in checks:
        out.append(CheckResult(name, dc.grad_check(f, inputs, mask=mask[0] if mask else None), tol))
    return out


def run_suite(scope="all"):
    if scope not in ("ops", "model", "all"):
        raise ValueError(f"unknown scope {scope!r}")
    results = []
    if scope in ("ops", "all"):
        results += run_checks(op_checks(), OP_TOLERANCE)
    if scope in ("model", "all"):
        results += run_checks(model_checks(), MODEL_TOLERANCE)
    return results
