"""Adam, the two-stage training schedule, evaluation and checkpoints.

Stage 1 trains the image encoder and mesh regressor on mesh + keypoint L1.
Stage 2 freezes that network and fits the parameter MLP on its coarse
output. Both stages are bit-deterministic for a given config, seed and
dataset in single-threaded mode.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cmr import container
from cmr import diffcore as dc
from cmr.assets import assets_from_tensors, assets_to_tensors, load_assets
from cmr.bodymodel import MiniBodyModel, ParamRegressorMLP, lbs, rodrigues
from cmr.config import ConfigError, TrainConfig
from cmr.meshgraph import CoarseningPair
from cmr.metrics import (
    LossWeights, MetricsReport, evaluate_meshes, project_array, smpl_stage_loss,
    sparse_stack, total_loss,
)
from cmr.regressor import FCBaseline, MeshRegressor, as_leaves, matched_fc_hidden
from cmr.synth import DatasetArrays, DatasetManifest, image_channels, load_split

CHECKPOINT_FORMAT = "cmr-checkpoint-1"


class NonFiniteGradientError(FloatingPointError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


class IncompatibleDataError(ValueError):
    pass


# ---------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params, **hyper):
        return cls({k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()}, 0, **hyper)


def adam_step(params, grads, state: AdamState):
    """Bias-corrected Adam with a fixed learning rate; updates in place.

    All gradients are checked before anything is modified, so a non-finite
    gradient leaves both the parameters and the state untouched.
    """
    for k, g in grads.items():
        if k not in params:
            raise KeyError(f"gradient for unknown parameter {k!r}")
        if g.shape != params[k].shape:
            raise dc.DimensionError(f"{k}: gradient {g.shape} vs parameter {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {k!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for k, g in grads.items():
        m = state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        v = state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * (g * g)
        params[k] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def clip_by_global_norm(grads, max_norm):
    if max_norm <= 0:
        return grads
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


# ---------------------------------------------------------------- checkpoint

@dataclass
class Checkpoint:
    config: TrainConfig
    body: MiniBodyModel
    pair: CoarseningPair
    params: dict
    stage: int = 1
    step: int = 0
    mlp_params: dict = field(default_factory=dict)
    adam: AdamState | None = None

    def to_tensors(self):
        out = {
            "__format__": container.encode_text(CHECKPOINT_FORMAT),
            "__config__": container.encode_text(self.config.to_text()),
            "stage": np.array(self.stage, dtype=np.int64),
            "step": np.array(self.step, dtype=np.int64),
        }
        out.update({f"model/{k}": v for k, v in self.params.items()})
        out.update({f"mlp/{k}": v for k, v in self.mlp_params.items()})
        if self.adam is not None:
            out["adam/step"] = np.array(self.adam.step, dtype=np.int64)
            out.update({f"adam/m/{k}": v for k, v in self.adam.m.items()})
            out.update({f"adam/v/{k}": v for k, v in self.adam.v.items()})
        out.update(assets_to_tensors(self.body, self.pair))
        return out

    @classmethod
    def from_tensors(cls, d):
        if "__format__" not in d or container.decode_text(d["__format__"]) != CHECKPOINT_FORMAT:
            raise container.ContainerFormatError("container does not hold a training checkpoint")
        cfg = TrainConfig.from_text(container.decode_text(d["__config__"]))
        body, pair = assets_from_tensors(d)

        def group(prefix):
            return {k[len(prefix):]: v for k, v in d.items() if k.startswith(prefix)}

        adam = None
        if "adam/step" in d:
            t = cfg.train
            adam = AdamState(group("adam/m/"), group("adam/v/"), int(d["adam/step"]),
                             t.lr, t.beta1, t.beta2, t.eps)
        return cls(cfg, body, pair, group("model/"), int(d["stage"]), int(d["step"]),
                   group("mlp/"), adam)

    def params_digest(self, which="model"):
        src = self.params if which == "model" else self.mlp_params
        h = hashlib.sha256()
        for k in sorted(src):
            h.update(k.encode())
            h.update(np.ascontiguousarray(src[k]).tobytes())
        return h.hexdigest()


def save_checkpoint(path, ckpt: Checkpoint):
    """Write atomically; returns the sha256 of the file contents."""
    return container.save(path, ckpt.to_tensors())


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_tensors(container.load(path))


# -------------------------------------------------------------------- set-up

def open_dataset(cfg: TrainConfig, manifest_path=None):
    path = Path(manifest_path or cfg.train.data)
    if not path.is_file():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    manifest = DatasetManifest.read(path)
    model_file = manifest.model_path()
    if container.file_digest(model_file) != manifest.model_digest:
        raise IncompatibleDataError(f"{model_file}: body model digest does not match the manifest")
    body, pair = load_assets(model_file)
    return manifest, body, pair


def check_encoder(cfg: TrainConfig, manifest: DatasetManifest, body: MiniBodyModel):
    ch = image_channels(manifest.image_mode, body.n_joints)
    enc = cfg.encoder
    if enc.in_channels != ch or enc.resolution != manifest.resolution:
        raise ConfigError(
            f"encoder expects {enc.resolution}px x {enc.in_channels} channels but the dataset "
            f"has {manifest.resolution}px x {ch} channels; set encoder.resolution / encoder.in_channels")


def build_network(cfg: TrainConfig, pair: CoarseningPair):
    if cfg.train.model == "graph":
        return MeshRegressor(cfg.encoder, cfg.regressor, pair)
    hidden = cfg.fc.hidden or matched_fc_hidden(cfg.encoder, cfg.regressor, pair.coarse_mesh.n_vertices)
    return FCBaseline(cfg.encoder, pair, hidden)


def build_mlp(cfg: TrainConfig, body: MiniBodyModel, pair: CoarseningPair):
    return ParamRegressorMLP(pair.coarse_mesh.n_vertices, body.n_joints, body.n_betas, cfg.mlp.hidden)


def _training_arrays(cfg, manifest, body):
    data = load_split(manifest, "train", body.n_vertices, body.n_joints, body.n_betas)
    if not cfg.train.use_weak:
        data = data.subset(np.flatnonzero(data.strong))
    if cfg.train.subset:
        data = data.subset(np.arange(min(cfg.train.subset, len(data))))
    if len(data) == 0:
        raise ValueError("no training samples selected")
    return data


class BatchSampler:
    """Shuffled passes over ``n`` items in batches of at most ``size``."""

    def __init__(self, n, size, seed):
        self.n, self.size = n, min(size, n)
        self.rng = np.random.default_rng([seed, 7])
        self.order, self.pos = self.rng.permutation(n), 0

    def next(self):
        if self.pos + self.size > self.n:
            self.order, self.pos = self.rng.permutation(self.n), 0
        idx = self.order[self.pos:self.pos + self.size]
        self.pos += self.size
        return np.sort(idx)


def _images(data: DatasetArrays, idx):
    return data.images[idx].astype(np.float64)


def stage1_objective(net, leaves, body, data: DatasetArrays, idx):
    """Batch-mean mesh + keypoint loss; weak samples contribute keypoints only."""
    verts, _, cam = net.forward(leaves, _images(data, idx))
    loss, l_s, l_j = total_loss(verts, cam, data.vertices[idx], data.keypoints[idx],
                                body.joint_regressor, visibility=data.visibility[idx],
                                shape_mask=data.strong[idx])
    inv_b = 1.0 / len(idx)
    return dc.scale(loss, inv_b), float(l_s.data) * inv_b, float(l_j.data) * inv_b


def _log(log, step, loss, l_s, l_j):
    if log is not None:
        log(f"{step} {loss!r} {l_s!r} {l_j!r}")


def _grads(tape, loss, leaves, names):
    g = tape.gradient(loss, [leaves[k] for k in names])
    return dict(zip(names, g))


# ------------------------------------------------------------------ stage 1

def train_stage1(cfg: TrainConfig, log=None, checkpoint_dir=None, manifest_path=None) -> Checkpoint:
    """Train encoder + mesh regressor. ``log`` receives one line per step."""
    manifest, body, pair = open_dataset(cfg, manifest_path)
    check_encoder(cfg, manifest, body)
    data = _training_arrays(cfg, manifest, body)
    net = build_network(cfg, pair)
    t = cfg.train
    params = net.init_params(np.random.default_rng(t.seed))
    adam = AdamState.zeros(params, lr=t.lr, beta1=t.beta1, beta2=t.beta2, eps=t.eps)
    ckpt = Checkpoint(cfg, body, pair, params, 1, 0, {}, adam)
    sampler = BatchSampler(len(data), t.batch_size, t.seed)
    names = list(params)
    for step in range(1, t.stage1_steps + 1):
        idx = sampler.next()
        leaves = as_leaves(params)
        with dc.GradientTape() as tape:
            loss, l_s, l_j = stage1_objective(net, leaves, body, data, idx)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NonFiniteLossError(f"stage 1: non-finite loss at step {step}; "
                                     f"last good checkpoint is step {ckpt.step}")
        grads = clip_by_global_norm(_grads(tape, loss, leaves, names), t.grad_clip)
        adam_step(params, grads, adam)
        ckpt.step = step
        _log(log, step, value, l_s, l_j)
        if checkpoint_dir and t.checkpoint_every and step % t.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"stage1_step{step:06d}.cmrk", ckpt)
    return ckpt


# ------------------------------------------------------------------ stage 2

def predict_stage1(ckpt: Checkpoint, images, batch=64):
    """Frozen stage-1 forward: (vertices, coarse vertices, cameras) as arrays."""
    net = build_network(ckpt.config, ckpt.pair)
    leaves = as_leaves(ckpt.params, requires_grad=False)
    outs = [[], [], []]
    for s in range(0, len(images), batch):
        v, c, cam = net.forward(leaves, np.asarray(images[s:s + batch], dtype=np.float64))
        for o, x in zip(outs, (v, c, cam)):
            o.append(x.data)
    return tuple(np.concatenate(o) if o else np.zeros((0,)) for o in outs)


def train_stage2(cfg: TrainConfig, stage1: Checkpoint, log=None, checkpoint_dir=None,
                 manifest_path=None) -> Checkpoint:
    """Fit the parameter MLP on strong samples with the stage-1 network frozen.

    Stage-1 outputs carry no gradient: they are computed once, outside any
    tape, and fed to the MLP as constants.
    """
    if stage1.stage != 1 or not stage1.params:
        raise ValueError("train_stage2 needs a stage-1 checkpoint")
    manifest, body, pair = open_dataset(cfg, manifest_path)
    if body.n_vertices != stage1.body.n_vertices:
        raise IncompatibleDataError(
            f"stage-1 template has N={stage1.body.n_vertices}, dataset has N={body.n_vertices}")
    data = load_split(manifest, "train", body.n_vertices, body.n_joints, body.n_betas)
    data = data.subset(np.flatnonzero(data.strong))
    if cfg.train.subset:
        data = data.subset(np.arange(min(cfg.train.subset, len(data))))
    if len(data) == 0:
        raise ValueError("stage 2 needs at least one strong (fully labelled) sample")
    frozen = {k: v.copy() for k, v in stage1.params.items()}
    _, coarse, cams = predict_stage1(stage1, data.images)
    rot_gt = rodrigues(data.thetas)

    t = cfg.train
    mlp = build_mlp(cfg, body, pair)
    params = mlp.init_params(np.random.default_rng([t.seed, 2]))
    adam = AdamState.zeros(params, lr=t.lr, beta1=t.beta1, beta2=t.beta2, eps=t.eps)
    weights = LossWeights(cfg.mlp.lambda_beta)
    ckpt = Checkpoint(cfg, stage1.body, stage1.pair, frozen, 2, 0, params, adam)
    sampler = BatchSampler(len(data), t.batch_size, t.seed + 1)
    names = list(params)
    for step in range(1, t.stage2_steps + 1):
        idx = sampler.next()
        leaves = as_leaves(params)
        with dc.GradientTape() as tape:
            rot, beta = mlp.forward(leaves, coarse[idx])
            mesh = lbs(body, rot, beta)
            loss = smpl_stage_loss(rot, beta, rot_gt[idx], data.betas[idx], mesh,
                                   data.vertices[idx], cams[idx], data.keypoints[idx],
                                   body.joint_regressor, weights, data.visibility[idx])
            loss = dc.scale(loss, 1.0 / len(idx))
        value = float(loss.data)
        if not np.isfinite(value):
            raise NonFiniteLossError(f"stage 2: non-finite loss at step {step}; "
                                     f"last good checkpoint is step {ckpt.step}")
        grads = clip_by_global_norm(_grads(tape, loss, leaves, names), t.grad_clip)
        adam_step(params, grads, adam)
        ckpt.step = step
        if log is not None:
            log(f"{step} {value!r}")
        if checkpoint_dir and t.checkpoint_every and step % t.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"stage2_step{step:06d}.cmrk", ckpt)
    return ckpt


def predict_parametric(ckpt: Checkpoint, coarse):
    """Stage-2 path: coarse vertices -> (rotations, betas, skinned vertices)."""
    if not ckpt.mlp_params:
        raise ValueError("checkpoint has no stage-2 parameters")
    mlp = build_mlp(ckpt.config, ckpt.body, ckpt.pair)
    rot, beta = mlp.forward(as_leaves(ckpt.mlp_params, requires_grad=False), coarse)
    verts = lbs(ckpt.body, rot, beta)
    return rot.data, beta.data, verts.data


# ---------------------------------------------------------------- evaluation

def load_eval_split(ckpt: Checkpoint, manifest: DatasetManifest, split):
    body = ckpt.body
    try:
        data = load_split(manifest, split, body.n_vertices, body.n_joints, body.n_betas)
    except ValueError as e:
        if "vertices" in str(e):
            raise IncompatibleDataError(f"template mismatch: {e}") from None
        raise
    if data.images.ndim == 4:
        enc = ckpt.config.encoder
        if data.images.shape[1:] != (enc.resolution, enc.resolution, enc.in_channels):
            raise IncompatibleDataError(
                f"checkpoint expects images {enc.resolution}x{enc.resolution}x{enc.in_channels}, "
                f"dataset has {data.images.shape[1:]}")
    return data


def evaluate(ckpt: Checkpoint, manifest: DatasetManifest, split="val", parametric=False) -> MetricsReport:
    """MPJPE, reconstruction error and per-vertex error over strong samples."""
    data = load_eval_split(ckpt, manifest, split)
    data = data.subset(np.flatnonzero(data.strong))
    if len(data) == 0:
        raise ValueError(f"split {split!r} has no fully labelled samples")
    verts, coarse, _ = predict_stage1(ckpt, data.images)
    if parametric:
        verts = predict_parametric(ckpt, coarse)[2]
    return evaluate_meshes(verts, data.vertices, ckpt.body.joint_regressor)


def reprojection_error(ckpt: Checkpoint, manifest: DatasetManifest, split="val"):
    """Mean L1 distance between projected and true 2D keypoints over visible ones."""
    data = load_eval_split(ckpt, manifest, split)
    verts, _, cams = predict_stage1(ckpt, data.images)
    kp = project_array(sparse_stack(ckpt.body.joint_regressor, verts), cams)
    err = np.abs(kp - data.keypoints).sum(-1)
    vis = data.visibility
    return float((err * vis).sum() / max(vis.sum(), 1.0))
