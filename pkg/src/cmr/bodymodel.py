"""Simplified skinned body model, rotation utilities and the parameter MLP.

The body is a procedurally built low-poly figure with a kinematic tree,
shape blendshapes and smooth skinning weights. It plays the role of a
parametric model: it synthesizes ground truth, and the second network stage
regresses its pose and shape parameters from a regressed mesh.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls
from scipy.spatial.transform import Rotation

from cmr import diffcore as dc
from cmr.meshgraph import (SparseMatrix, TemplateMesh, decimate, sparse_dense_multiply,
                           DimensionError)


# ------------------------------------------------------------------ rotations

def skew(v):
    v = np.asarray(v, dtype=np.float64)
    z = np.zeros(v.shape[:-1])
    return np.stack([
        np.stack([z, -v[..., 2], v[..., 1]], -1),
        np.stack([v[..., 2], z, -v[..., 0]], -1),
        np.stack([-v[..., 1], v[..., 0], z], -1),
    ], -2)


def rodrigues(aa):
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3).

    Angles below 1e-8 use the second-order series I + K + K^2 / 2 with the
    unnormalized skew matrix K.
    """
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1)
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    k = skew(aa / safe[..., None])
    k2 = k @ k
    s = np.sin(theta)[..., None, None]
    c = (1.0 - np.cos(theta))[..., None, None]
    r = np.eye(3) + s * k + c * k2
    if np.any(small):
        ks = skew(aa)
        series = np.eye(3) + ks + 0.5 * (ks @ ks)
        r = np.where(small[..., None, None], series, r)
    return r


def matrix_to_axis_angle(r):
    r = np.asarray(r, dtype=np.float64)
    flat = Rotation.from_matrix(r.reshape(-1, 3, 3)).as_rotvec()
    return flat.reshape(r.shape[:-2] + (3,))


def so3_project(m, return_degenerate=False):
    """Nearest rotation matrix in Frobenius norm, via SVD with det correction."""
    r, _, _, _, degenerate = dc.so3_project_array(m)
    if return_degenerate:
        return r, degenerate
    return r


def canonical_axis_angle(aa):
    """Equivalent axis-angle vectors with angle in [0, pi]."""
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    axis = aa / np.where(theta == 0, 1.0, theta)
    t = np.mod(theta, 2 * np.pi)
    flip = t > np.pi
    t = np.where(flip, 2 * np.pi - t, t)
    return np.where(flip, -axis, axis) * t


# ------------------------------------------------------------------ the model

@dataclass(frozen=True)
class BodyParams:
    """Pose as per-joint rotations plus shape coefficients.

    ``theta`` is either J x 3 axis-angle or J x 3 x 3 rotation matrices.
    """
    theta: np.ndarray
    beta: np.ndarray

    @property
    def is_matrix(self):
        return np.asarray(self.theta).ndim == 3

    def rotmats(self):
        return np.asarray(self.theta) if self.is_matrix else rodrigues(self.theta)

    def axis_angle(self):
        return matrix_to_axis_angle(self.theta) if self.is_matrix else np.asarray(self.theta)

    def as_matrix(self):
        return BodyParams(self.rotmats(), np.asarray(self.beta))


JOINT_NAMES = ("pelvis", "spine", "chest", "head", "l_shoulder", "r_shoulder",
               "l_hip", "r_hip", "l_elbow", "r_elbow", "l_knee", "r_knee")
_PARENTS = (-1, 0, 1, 2, 2, 2, 0, 0, 4, 5, 6, 7)
_JOINT_POS = np.array([
    [0.0, 0.95, 0.0], [0.0, 1.12, 0.0], [0.0, 1.32, 0.0], [0.0, 1.50, 0.0],
    [0.19, 1.40, 0.0], [-0.19, 1.40, 0.0], [0.10, 0.88, 0.0], [-0.10, 0.88, 0.0],
    [0.44, 1.22, 0.0], [-0.44, 1.22, 0.0], [0.12, 0.50, 0.0], [-0.12, 0.50, 0.0],
])
# bone segments owned by each canonical joint: (start, end)
_BONES = {
    0: [((0.0, 0.88, 0.0), (0.0, 1.12, 0.0)), ((0.10, 0.88, 0.0), (-0.10, 0.88, 0.0))],
    1: [((0.0, 1.12, 0.0), (0.0, 1.32, 0.0))],
    2: [((0.0, 1.32, 0.0), (0.0, 1.50, 0.0)), ((0.19, 1.40, 0.0), (-0.19, 1.40, 0.0))],
    3: [((0.0, 1.50, 0.0), (0.0, 1.74, 0.0))],
    4: [((0.19, 1.40, 0.0), (0.44, 1.22, 0.0))],
    5: [((-0.19, 1.40, 0.0), (-0.44, 1.22, 0.0))],
    6: [((0.10, 0.88, 0.0), (0.12, 0.50, 0.0))],
    7: [((-0.10, 0.88, 0.0), (-0.12, 0.50, 0.0))],
    8: [((0.44, 1.22, 0.0), (0.68, 1.05, 0.0))],
    9: [((-0.44, 1.22, 0.0), (-0.68, 1.05, 0.0))],
    10: [((0.12, 0.50, 0.0), (0.12, 0.08, 0.0))],
    11: [((-0.12, 0.50, 0.0), (-0.12, 0.08, 0.0))],
}
# (start, end, radius) capsules making up the implicit body surface
_CAPSULES = [
    ((0.0, 0.90, 0.0), (0.0, 1.34, 0.0), 0.15),
    ((0.0, 1.34, 0.0), (0.0, 1.52, 0.0), 0.055),
    ((0.0, 1.62, 0.0), (0.0, 1.64, 0.0), 0.11),
    ((0.12, 1.40, 0.0), (-0.12, 1.40, 0.0), 0.08),
    ((0.17, 1.41, 0.0), (0.44, 1.22, 0.0), 0.06),
    ((-0.17, 1.41, 0.0), (-0.44, 1.22, 0.0), 0.06),
    ((0.44, 1.22, 0.0), (0.68, 1.05, 0.0), 0.05),
    ((-0.44, 1.22, 0.0), (-0.68, 1.05, 0.0), 0.05),
    ((0.10, 0.88, 0.0), (0.12, 0.50, 0.0), 0.08),
    ((-0.10, 0.88, 0.0), (-0.12, 0.50, 0.0), 0.08),
    ((0.12, 0.50, 0.0), (0.12, 0.08, 0.0), 0.06),
    ((-0.12, 0.50, 0.0), (-0.12, 0.08, 0.0), 0.06),
]
MAX_JOINTS = len(JOINT_NAMES)


@dataclass(frozen=True, eq=False)
class MiniBodyModel:
    template: TemplateMesh
    shape_dirs: np.ndarray      # N x 3 x B
    joint_regressor: SparseMatrix  # J x N
    parents: np.ndarray         # J, parents[0] == -1, parents[j] < j
    skin_weights: np.ndarray    # N x J

    def __post_init__(self):
        n = self.template.n_vertices
        for name in ("shape_dirs", "skin_weights"):
            a = np.array(getattr(self, name), dtype=np.float64)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        p = np.array(self.parents, dtype=np.int64)
        p.setflags(write=False)
        object.__setattr__(self, "parents", p)
        j = p.size
        if self.shape_dirs.shape[:2] != (n, 3):
            raise DimensionError(f"shape_dirs must be {n} x 3 x B")
        if self.skin_weights.shape != (n, j) or self.joint_regressor.shape != (j, n):
            raise DimensionError("skin weights / joint regressor do not match template and tree")
        if p[0] != -1 or np.any(p[1:] < 0) or np.any(p[1:] >= np.arange(1, j)):
            raise ValueError("parents must form a tree rooted at 0 with parent[j] < j")
        if np.any(self.skin_weights < 0) or np.abs(self.skin_weights.sum(1) - 1).max() > 1e-12:
            raise ValueError("skin weight rows must be non-negative and sum to 1")
        if np.abs(self.joint_regressor.row_sums() - 1).max() > 1e-12:
            raise ValueError("joint regressor rows must sum to 1")

    @property
    def n_joints(self):
        return int(self.parents.size)

    @property
    def n_betas(self):
        return int(self.shape_dirs.shape[2])

    @property
    def n_vertices(self):
        return self.template.n_vertices

    def part_labels(self):
        """Per-vertex dominant joint, used for part-label renderings."""
        return np.argmax(self.skin_weights, axis=1)

    def zero_params(self):
        return BodyParams(np.zeros((self.n_joints, 3)), np.zeros(self.n_betas))


def _lbs_forward(model, rot, beta):
    """Batched skinning. rot (B, J, 3, 3), beta (B, nb) -> vertices and cache."""
    tmpl = model.template.vertices
    vs = tmpl[None] + np.einsum("nkb,zb->znk", model.shape_dirs, beta)
    jr = sparse_dense_multiply(model.joint_regressor, vs)
    parents = model.parents
    nb_, nj = rot.shape[0], rot.shape[1]
    rw = np.empty((nb_, nj, 3, 3))
    # joint displacements tw - jr; exactly zero when every rotation is I
    dt = np.zeros((nb_, nj, 3))
    rw[:, 0] = rot[:, 0]
    eye = np.eye(3)
    for j in range(1, nj):
        p = parents[j]
        rw[:, j] = rw[:, p] @ rot[:, j]
        dt[:, j] = np.einsum("zkl,zl->zk", rw[:, p] - eye, jr[:, j] - jr[:, p]) + dt[:, p]
    rel = rw - eye
    w = model.skin_weights
    m_rel = np.einsum("nj,zjkl->znkl", w, rel)
    c = np.einsum("nj,zjk->znk", w, dt - np.einsum("zjkl,zjl->zjk", rel, jr))
    verts = vs + np.einsum("znkl,znl->znk", m_rel, vs) + c
    m = m_rel + eye
    return verts, (vs, jr, rw, m)


def lbs(model: MiniBodyModel, rotmats, betas):
    """Differentiable skinning of (B, J, 3, 3) rotations and (B, nb) shapes."""
    rotmats, betas = dc.as_tensor(rotmats), dc.as_tensor(betas)
    rot = rotmats.data.astype(np.float64)
    beta = betas.data.astype(np.float64)
    verts, (vs, jr, rw, m) = _lbs_forward(model, rot, beta)
    parents, w = model.parents, model.skin_weights

    def backward(g):
        g = g.astype(np.float64)
        dm = np.einsum("znk,znl->znkl", g, vs)
        drw = np.einsum("nj,znkl->zjkl", w, dm)
        da = np.einsum("nj,znk->zjk", w, g)
        dvs = np.einsum("znlk,znl->znk", m, g)
        dtw = da.copy()
        drw -= np.einsum("zjk,zjl->zjkl", da, jr)
        djr = -np.einsum("zjlk,zjl->zjk", rw, da)
        drot = np.zeros_like(rot)
        for j in range(rot.shape[1] - 1, 0, -1):
            p = parents[j]
            drot[:, j] = np.swapaxes(rw[:, p], -1, -2) @ drw[:, j]
            drw[:, p] += drw[:, j] @ np.swapaxes(rot[:, j], -1, -2)
            drw[:, p] += np.einsum("zk,zl->zkl", dtw[:, j], jr[:, j] - jr[:, p])
            back = np.einsum("zlk,zl->zk", rw[:, p], dtw[:, j])
            djr[:, j] += back
            djr[:, p] -= back
            dtw[:, p] += dtw[:, j]
        drot[:, 0] = drw[:, 0]
        djr[:, 0] += dtw[:, 0]
        dvs += sparse_dense_multiply(model.joint_regressor.T, djr)
        dbeta = np.einsum("nkb,znk->zb", model.shape_dirs, dvs)
        return drot.astype(rotmats.dtype), dbeta.astype(betas.dtype)

    return dc.custom_op(verts.astype(rotmats.dtype), (rotmats, betas), backward)


def lbs_forward(model: MiniBodyModel, params: BodyParams):
    """Posed and shaped vertices (N x 3) for one parameter set."""
    rot = params.rotmats()
    beta = np.asarray(params.beta, dtype=np.float64)
    if rot.shape != (model.n_joints, 3, 3) or beta.shape != (model.n_betas,):
        raise DimensionError(
            f"params do not match model: theta {rot.shape}, beta {beta.shape}")
    verts, _ = _lbs_forward(model, rot[None], beta[None])
    return verts[0]


def joint_positions(model: MiniBodyModel, vertices):
    return sparse_dense_multiply(model.joint_regressor, vertices)


# ------------------------------------------------------------ procedural body

def _segment_distance(p, a, b):
    a, b = np.asarray(a), np.asarray(b)
    ab = b - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[..., None] * ab), axis=-1)


def _body_sdf(p):
    k = 0.04
    d = None
    for a, b, r in _CAPSULES:
        di = _segment_distance(p, a, b) - r
        if d is None:
            d = di
        else:
            # polynomial smooth minimum
            h = np.clip(0.5 + 0.5 * (di - d) / k, 0.0, 1.0)
            d = di * (1 - h) + d * h - k * h * (1 - h)
    return d


def _implicit_body_mesh(spacing):
    from skimage.measure import marching_cubes

    lo = np.array([-0.82, -0.02, -0.24])
    hi = np.array([0.82, 1.82, 0.24])
    shape = np.ceil((hi - lo) / spacing).astype(int) + 1
    axes = [lo[i] + spacing * np.arange(shape[i]) for i in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    # flatten the torso and limbs a little in depth
    squash = grid * np.array([1.0, 1.0, 1.35])
    sdf = _body_sdf(squash.reshape(-1, 3)).reshape(shape)
    sdf[sdf == 0.0] = 1e-12
    verts, faces, _, _ = marching_cubes(sdf, level=0.0, spacing=(spacing,) * 3)
    verts = verts + lo
    faces = faces.astype(np.int64)
    # orient outward: positive signed volume
    vol = np.einsum("ij,ij->i", verts[faces[:, 0]],
                    np.cross(verts[faces[:, 1]], verts[faces[:, 2]])).sum()
    if vol < 0:
        faces = faces[:, [0, 2, 1]]
    return verts, faces


def _joint_regressor(vertices, joints, k=24):
    rows, cols, vals = [], [], []
    for j, p in enumerate(joints):
        d = np.linalg.norm(vertices - p, axis=1)
        near = np.argsort(d, kind="stable")[:k]
        a = np.vstack([vertices[near].T, 100.0 * np.ones(k)])
        b = np.concatenate([p, [100.0]])
        w, _ = nnls(a, b)
        if w.sum() <= 0:
            w = np.ones(k)
        w = w / w.sum()
        keep = w > 1e-6
        w = w[keep] / w[keep].sum()
        order = np.argsort(near[keep])
        rows += [j] * int(keep.sum())
        cols += list(near[keep][order])
        vals += list(w[order])
    reg = SparseMatrix.from_coo(rows, cols, vals, (len(joints), vertices.shape[0]))
    # exact unit row sums after float accumulation
    sums = reg.row_sums()
    return SparseMatrix(reg.shape, reg.indptr, reg.indices, reg.data / sums[reg.row_ids()])


def make_mini_model(seed=0, n_vertices=600, n_joints=8, n_betas=4, spacing=0.034):
    """Build the procedural articulated body.

    The surface is a smooth union of capsules, meshed by marching cubes and
    decimated to ``n_vertices``; it is then centered and scaled so that its
    bounding-box diagonal is 2. Only the shape blendshapes depend on ``seed``.
    """
    if not 4 <= n_joints <= MAX_JOINTS:
        raise ValueError(f"n_joints must be in [4, {MAX_JOINTS}], got {n_joints}")
    if n_betas < 1:
        raise ValueError("need at least one shape coefficient")
    if n_vertices < 100:
        raise ValueError(f"n_vertices={n_vertices} too small for an articulated body")
    verts, faces = _implicit_body_mesh(spacing)
    if n_vertices > verts.shape[0]:
        raise ValueError(f"n_vertices={n_vertices} exceeds the {verts.shape[0]}-vertex "
                         "marching-cubes surface; lower `spacing`")
    kept, faces = decimate(verts, faces, n_vertices)
    remap = np.full(verts.shape[0], -1, dtype=np.int64)
    remap[kept] = np.arange(kept.size)
    verts, faces = verts[kept], remap[faces]

    lo, hi = verts.min(0), verts.max(0)
    center = 0.5 * (lo + hi)
    scale = 2.0 / np.linalg.norm(hi - lo)
    verts = (verts - center) * scale
    template = TemplateMesh(verts, faces)

    joints_all = (_JOINT_POS - center) * scale
    parents = np.array(_PARENTS[:n_joints])
    # each canonical joint's geometry goes to its nearest kept ancestor
    owner = list(range(MAX_JOINTS))
    for j in range(MAX_JOINTS):
        while owner[j] >= n_joints:
            owner[j] = _PARENTS[owner[j]]
    dist = np.full((verts.shape[0], n_joints), np.inf)
    for j, segs in _BONES.items():
        for a, b in segs:
            a = (np.array(a) - center) * scale
            b = (np.array(b) - center) * scale
            d = _segment_distance(verts, a, b)
            dist[:, owner[j]] = np.minimum(dist[:, owner[j]], d)
    tau = 0.03
    logits = -(dist - dist.min(1, keepdims=True)) / tau
    w = np.exp(logits)
    w /= w.sum(1, keepdims=True)
    w[w < 1e-8] = 0.0
    w /= w.sum(1, keepdims=True)

    reg = _joint_regressor(verts, joints_all[:n_joints])

    rng = np.random.default_rng(seed)
    n = verts.shape[0]
    dirs = np.zeros((n, 3, n_betas))
    dirs[:, 1, 0] = 0.05 * verts[:, 1]  # stature
    if n_betas > 1:
        # girth: push away from the closest bone
        nearest = np.argmin(dist, axis=1)
        radial = np.zeros_like(verts)
        for j in range(n_joints):
            sel = nearest == j
            radial[sel] = verts[sel] - reg.to_dense()[j] @ verts
        radial[:, 1] *= 0.25
        norm = np.linalg.norm(radial, axis=1, keepdims=True)
        dirs[:, :, 1] = 0.025 * radial / np.maximum(norm, 1e-9)
    for b in range(2, n_betas):
        field = np.zeros_like(verts)
        for _ in range(3):
            freq = rng.normal(0.0, 1.5, size=3)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.normal(0.0, 1.0, size=3)
            field += np.sin(verts @ freq + phase)[:, None] * amp
        dirs[:, :, b] = 0.02 * field / np.abs(field).max()

    return MiniBodyModel(template, dirs, reg, parents, w)


# ------------------------------------------------------------- parameter MLP

def dense_init(rng, fan_in, fan_out, dtype=np.float64):
    return (rng.normal(0.0, 1.0, size=(fan_in, fan_out)) * np.sqrt(2.0 / fan_in)).astype(dtype)


class ParamRegressorMLP:
    """MLP from flattened coarse vertices to rotation matrices and shape.

    The first ``9 * J`` outputs are raw 3x3 blocks projected onto SO(3);
    the last ``n_betas`` are shape coefficients.
    """

    def __init__(self, n_coarse, n_joints, n_betas, hidden=(256, 256)):
        self.n_coarse = n_coarse
        self.n_joints = n_joints
        self.n_betas = n_betas
        self.hidden = tuple(hidden)

    @property
    def widths(self):
        return (3 * self.n_coarse,) + self.hidden + (9 * self.n_joints + self.n_betas,)

    def init_params(self, rng, dtype=np.float64):
        params = {}
        w = self.widths
        for i in range(len(w) - 1):
            params[f"mlp.{i}.w"] = dense_init(rng, w[i], w[i + 1], dtype)
            params[f"mlp.{i}.b"] = np.zeros(w[i + 1], dtype=dtype)
        last = len(w) - 2
        params[f"mlp.{last}.w"] *= 0.1
        params[f"mlp.{last}.b"][: 9 * self.n_joints] = np.tile(np.eye(3).ravel(), self.n_joints)
        return params

    def forward(self, p, coarse_vertices):
        """(B, N_c, 3) -> rotations (B, J, 3, 3) and betas (B, n_betas)."""
        x = dc.as_tensor(coarse_vertices)
        b = x.shape[0]
        h = dc.reshape(x, (b, 3 * self.n_coarse))
        n_layers = len(self.widths) - 1
        for i in range(n_layers):
            h = dc.bias_add(dc.matmul(h, p[f"mlp.{i}.w"]), p[f"mlp.{i}.b"])
            if i < n_layers - 1:
                h = dc.relu(h)
        raw = dc.reshape(h[:, : 9 * self.n_joints], (b, self.n_joints, 3, 3))
        rot = dc.so3_project(raw)
        beta = h[:, 9 * self.n_joints:]
        return rot, beta
