"""Joint regression, weak-perspective projection, training losses and metrics."""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from cmr import diffcore as dc
from cmr.meshgraph import DimensionError, SparseMatrix, sparse_dense_multiply


class MissingLabelError(ValueError):
    pass


class DegenerateConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class CameraParams:
    s: float
    t: tuple

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError(f"camera scale must be positive, got {self.s}")
        object.__setattr__(self, "t", tuple(float(x) for x in self.t))

    def as_array(self):
        return np.array([self.s, self.t[0], self.t[1]])

    @classmethod
    def from_array(cls, a):
        return cls(float(a[0]), (float(a[1]), float(a[2])))


def regress_joints(reg: SparseMatrix, vertices):
    """J = reg @ vertices, differentiable in the vertices."""
    return dc.sparse_matmul(reg, vertices)


def project(joints, cam):
    """Weak perspective: drop z, scale by s, shift by t.

    ``joints`` is (..., J, 3) and ``cam`` is (..., 3) holding (s, tx, ty).
    """
    joints, cam = dc.as_tensor(joints), dc.as_tensor(cam)
    if joints.shape[-1] != 3 or cam.shape[-1] != 3 or joints.shape[:-2] != cam.shape[:-1]:
        raise DimensionError(f"project: joints {joints.shape} vs camera {cam.shape}")
    s = cam.data[..., 0, None, None]
    t = cam.data[..., None, 1:]
    xy = joints.data[..., :2]
    out = s * xy + t

    def backward(g):
        gj = np.zeros_like(joints.data)
        gj[..., :2] = s * g
        gs = (g * xy).sum(axis=(-1, -2))
        gt = g.sum(axis=-2)
        return gj, np.concatenate([gs[..., None], gt], axis=-1)

    return dc.custom_op(out, (joints, cam), backward)


def project_array(joints, cam):
    cam = np.asarray(cam, dtype=np.float64)
    return cam[..., 0, None, None] * np.asarray(joints)[..., :2] + cam[..., None, 1:]


def loss_shape(pred, gt, weight=None):
    """Sum over vertices of the per-vertex L1 distance."""
    return dc.l1_loss(pred, gt, weight)


def loss_joints(pred2d, gt2d, visibility=None):
    """Sum over visible keypoints of the L1 reprojection distance."""
    w = None if visibility is None else np.asarray(visibility, dtype=np.float64)[..., None]
    return dc.l1_loss(pred2d, gt2d, w)


def total_loss(pred_mesh, cam, gt_mesh, gt_keypoints, reg, weak_only=False,
               visibility=None, shape_mask=None):
    """Mesh L1 plus keypoint reprojection L1, summed over the batch.

    With ``weak_only`` the mesh term is dropped. ``shape_mask`` (one flag per
    sample) drops it for individual weak samples of a mixed batch.
    Returns ``(loss, l_shape, l_joints)``.
    """
    kp = regress_joints(reg, pred_mesh)
    l_j = loss_joints(project(kp, cam), gt_keypoints, visibility)
    if weak_only:
        return l_j, dc.Tensor(0.0), l_j
    if gt_mesh is None:
        raise MissingLabelError("ground-truth mesh required unless weak_only is set")
    w = None
    if shape_mask is not None:
        w = np.asarray(shape_mask, dtype=np.float64).reshape((-1,) + (1,) * (pred_mesh.ndim - 1))
    l_s = loss_shape(pred_mesh, gt_mesh, w)
    return dc.add(l_s, l_j), l_s, l_j


@dataclass(frozen=True)
class LossWeights:
    lambda_beta: float = 0.1

    def __post_init__(self):
        if not (np.isfinite(self.lambda_beta) and self.lambda_beta >= 0):
            raise ValueError(f"lambda_beta must be finite and >= 0, got {self.lambda_beta}")


def smpl_stage_loss(rot_pred, beta_pred, rot_gt, beta_gt, mesh_pred, mesh_gt, cam,
                    gt_keypoints, reg, weights=LossWeights(), visibility=None):
    """Mesh L1 + keypoint L1 + L2 on rotation matrices + lambda * L2 on shape.

    ``rot_*`` must be rotation matrices (..., J, 3, 3).
    """
    for r in (rot_pred, rot_gt):
        if dc.as_tensor(r).shape[-2:] != (3, 3):
            raise DimensionError("pose must be given as rotation matrices")
    l_sj, _, _ = total_loss(mesh_pred, cam, mesh_gt, gt_keypoints, reg, visibility=visibility)
    l_theta = dc.l2_loss(rot_pred, rot_gt)
    l_beta = dc.scale(dc.l2_loss(beta_pred, beta_gt), weights.lambda_beta)
    return dc.add(dc.add(l_sj, l_theta), l_beta)


# -------------------------------------------------------------------- metrics

def mean_joint_error(pred, gt):
    return float(np.linalg.norm(np.asarray(pred) - np.asarray(gt), axis=-1).mean())


def mpjpe(pred, gt):
    """Mean per-joint distance after moving both root joints to the origin."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"mpjpe: {pred.shape} vs {gt.shape}")
    return mean_joint_error(pred - pred[0], gt - gt[0])


def procrustes_align(pred, gt):
    """Similarity (s, R, t) minimizing ||s R pred + t - gt||_F; no reflections.

    Returns ``(s, R, t, error)`` where ``error`` is the mean per-point
    distance after alignment.
    """
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3 or pred.shape[0] < 3:
        raise DimensionError(f"procrustes_align needs matching P x 3 arrays, P >= 3; got {pred.shape}")
    mu_p, mu_g = pred.mean(0), gt.mean(0)
    xp, xg = pred - mu_p, gt - mu_g
    cov = xg.T @ xp
    u, sig, vt = np.linalg.svd(cov)
    if sig[1] <= 1e-12 * max(sig[0], 1e-300):
        raise DegenerateConfigurationError("point sets are (nearly) collinear; rotation undefined")
    if np.array_equal(pred, gt):
        return 1.0, np.eye(3), np.zeros(3), 0.0
    d = np.ones(3)
    if np.linalg.det(u @ vt) < 0:
        d[2] = -1.0
    r = u @ np.diag(d) @ vt
    s = float((sig * d).sum() / (xp * xp).sum())
    t = mu_g - s * r @ mu_p
    aligned = s * pred @ r.T + t
    return s, r, t, mean_joint_error(aligned, gt)


def reconstruction_error(pred, gt):
    return procrustes_align(pred, gt)[3]


@dataclass(frozen=True)
class MetricsReport:
    mpjpe: float
    reconstruction_error: float
    per_vertex_error: float
    n_samples: int = 0

    def __post_init__(self):
        for k in ("mpjpe", "reconstruction_error", "per_vertex_error"):
            if not getattr(self, k) >= 0:
                raise ValueError(f"{k} must be non-negative")

    def to_text(self):
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_text(cls, text):
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        return cls(float(kv["mpjpe"]), float(kv["reconstruction_error"]),
                   float(kv["per_vertex_error"]), int(kv.get("n_samples", 0)))


def per_vertex_error(pred, gt):
    """Mean over vertices of the L1 distance between predicted and true positions."""
    return float(np.abs(np.asarray(pred) - np.asarray(gt)).sum(-1).mean())


def evaluate_meshes(pred_meshes, gt_meshes, reg):
    """Average the three metrics over paired (N x 3) meshes."""
    pj = sparse_stack(reg, pred_meshes)
    gj = sparse_stack(reg, gt_meshes)
    mp = [mpjpe(a, b) for a, b in zip(pj, gj)]
    rec = [reconstruction_error(a, b) for a, b in zip(pj, gj)]
    pv = [per_vertex_error(a, b) for a, b in zip(pred_meshes, gt_meshes)]
    return MetricsReport(float(np.mean(mp)), float(np.mean(rec)), float(np.mean(pv)), len(mp))


def sparse_stack(reg, meshes):
    return sparse_dense_multiply(reg, np.asarray(meshes, dtype=np.float64))
