"""Image encoder, Graph-CNN mesh regressor and the fully-connected baseline.

Parameters live in plain ``dict[str, ndarray]`` so that they map one-to-one
onto checkpoint tensors; forward functions receive the same names wrapped as
:class:`~cmr.diffcore.Tensor` leaves.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cmr import diffcore as dc
from cmr.bodymodel import dense_init
from cmr.meshgraph import CoarseningPair, DimensionError, GraphAdjacency, build_adjacency

CAMERA_SCALE_FLOOR = 1e-4


@dataclass(frozen=True)
class EncoderConfig:
    resolution: int = 64
    in_channels: int = 8
    widths: tuple = (16, 32, 64, 64, 64)
    feature_dim: int = 128
    groups: int = 4

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.feature_dim < 0:
            raise ValueError("feature_dim must be >= 0")
        stride = 2 ** len(self.widths)
        if self.resolution % stride:
            raise ValueError(f"resolution {self.resolution} not divisible by total stride {stride}")
        for w in self.widths:
            if w % self.groups:
                raise ValueError(f"encoder width {w} not divisible by {self.groups} groups")


@dataclass(frozen=True)
class RegressorConfig:
    channels: int = 64
    blocks: int = 5
    groups: int = 8

    def __post_init__(self):
        if self.channels % 4 or self.channels % self.groups or (self.channels // 4) % self.groups:
            raise ValueError(
                f"channels={self.channels} must be divisible by 4 and, with its quarter, "
                f"by groups={self.groups}")


def _linear(p, name, x):
    return dc.bias_add(dc.matmul(x, p[f"{name}.w"]), p[f"{name}.b"])


def _init_linear(params, rng, name, fan_in, fan_out, dtype, gain=1.0):
    params[f"{name}.w"] = dense_init(rng, fan_in, fan_out, dtype) * gain
    params[f"{name}.b"] = np.zeros(fan_out, dtype=dtype)


def _init_norm(params, name, c, dtype):
    params[f"{name}.g"] = np.ones(c, dtype=dtype)
    params[f"{name}.b"] = np.zeros(c, dtype=dtype)


class ImageEncoder:
    """Strided conv stages with group norm, global average pool, linear."""

    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg

    def init_params(self, rng, dtype=np.float64):
        p, cin = {}, self.cfg.in_channels
        for i, w in enumerate(self.cfg.widths):
            p[f"enc.conv{i}.w"] = (rng.normal(size=(3, 3, cin, w)) * np.sqrt(2.0 / (9 * cin))).astype(dtype)
            p[f"enc.conv{i}.b"] = np.zeros(w, dtype=dtype)
            _init_norm(p, f"enc.gn{i}", w, dtype)
            cin = w
        _init_linear(p, rng, "enc.fc", cin, self.cfg.feature_dim, dtype)
        return p

    def forward(self, p, images):
        x = dc.as_tensor(images)
        if x.ndim != 4 or x.shape[1:] != (self.cfg.resolution, self.cfg.resolution, self.cfg.in_channels):
            raise DimensionError(
                f"encoder expects (B, {self.cfg.resolution}, {self.cfg.resolution}, "
                f"{self.cfg.in_channels}) images, got {x.shape}")
        for i in range(len(self.cfg.widths)):
            x = dc.bias_add(dc.conv2d(x, p[f"enc.conv{i}.w"], stride=2, pad=1), p[f"enc.conv{i}.b"])
            x = dc.relu(dc.group_norm(x, self.cfg.groups, p[f"enc.gn{i}.g"], p[f"enc.gn{i}.b"],
                                      per_sample=True))
        b, h, w, c = x.shape
        pooled = dc.mean_over_rows(dc.reshape(x, (b, h * w, c)))
        return _linear(p, "enc.fc", pooled)


def encode_image(encoder: ImageEncoder, params, img):
    """Feature vector for a single H x W x C image."""
    img = np.asarray(img)
    out = encoder.forward(params, img[None])
    return out.data[0]


def attach_features(features, template_coords):
    """Concatenate each template vertex's xyz with the image feature vector.

    ``features`` is (k,) or (B, k); the result is (N, 3 + k) or (B, N, 3 + k).
    """
    features = dc.as_tensor(features)
    coords = np.asarray(template_coords)
    n = coords.shape[0]
    if features.ndim == 2:
        coords = np.broadcast_to(coords, (features.shape[0],) + coords.shape)
    coords = dc.Tensor(coords.astype(features.dtype))
    if features.shape[-1] == 0:
        return coords
    return dc.concat([coords, dc.tile_rows(features, n)], axis=-1)


def graph_conv(adj: GraphAdjacency, x, w, b):
    """A (X W) + b, with the feature transform applied before averaging."""
    return dc.bias_add(dc.sparse_matmul(adj.matrix, dc.matmul(x, w)), b)


def vertex_norm(h, groups, gamma, beta):
    """Group norm pooled over all vertices of each sample; (N, C) or (B, N, C)."""
    if h.ndim == 2:
        out = dc.group_norm(dc.reshape(h, (1,) + h.shape), groups, gamma, beta, per_sample=True)
        return dc.reshape(out, h.shape)
    return dc.group_norm(h, groups, gamma, beta, per_sample=True)


def residual_block(adj: GraphAdjacency, x, p, name, groups):
    """x + up(relu(gn(gconv(relu(gn(down(relu(gn(x))))))))), bottleneck width C/4.

    Pre-activation ordering: every linear map is preceded by norm and relu.
    """
    h = dc.relu(vertex_norm(x, groups, p[f"{name}.gn0.g"], p[f"{name}.gn0.b"]))
    h = _linear(p, f"{name}.down", h)
    h = dc.relu(vertex_norm(h, groups, p[f"{name}.gn1.g"], p[f"{name}.gn1.b"]))
    h = graph_conv(adj, h, p[f"{name}.conv.w"], p[f"{name}.conv.b"])
    h = dc.relu(vertex_norm(h, groups, p[f"{name}.gn2.g"], p[f"{name}.gn2.b"]))
    h = _linear(p, f"{name}.up", h)
    return dc.add(x, h)


def init_residual_block(p, rng, name, c, dtype, up_gain=0.1):
    q = c // 4
    _init_norm(p, f"{name}.gn0", c, dtype)
    _init_linear(p, rng, f"{name}.down", c, q, dtype)
    _init_norm(p, f"{name}.gn1", q, dtype)
    _init_linear(p, rng, f"{name}.conv", q, q, dtype)
    _init_norm(p, f"{name}.gn2", q, dtype)
    _init_linear(p, rng, f"{name}.up", q, c, dtype, gain=up_gain)


def _camera(raw):
    """(B, 3) raw head output -> (s, tx, ty) with s = softplus(raw_s) + floor."""
    s = dc.softplus(raw[:, 0:1])
    s = dc.add(s, dc.Tensor(np.full(s.shape, CAMERA_SCALE_FLOOR, dtype=s.dtype)))
    return dc.concat([s, raw[:, 1:3]], axis=-1)


def _cam_bias(dtype):
    # softplus(raw) + floor == 0.9 at init, the middle of the sampled scale range
    return np.array([np.log(np.expm1(0.9 - CAMERA_SCALE_FLOOR)), 0.0, 0.0], dtype=dtype)


class MeshRegressor:
    """Encoder -> per-vertex features on the coarse mesh -> residual graph
    blocks -> coarse xyz, upsampled to the full template; plus a camera head
    on the pooled graph embedding."""

    kind = "graph"

    def __init__(self, enc_cfg: EncoderConfig, cfg: RegressorConfig, pair: CoarseningPair):
        self.enc_cfg = enc_cfg
        self.cfg = cfg
        self.encoder = ImageEncoder(enc_cfg)
        self.pair = pair
        self.adj = build_adjacency(pair.coarse_mesh)
        self.template_coarse = pair.coarse_mesh.vertices

    @property
    def n_coarse(self):
        return self.pair.coarse_mesh.n_vertices

    def init_params(self, rng, dtype=np.float64):
        p = self.encoder.init_params(rng, dtype)
        c = self.cfg.channels
        _init_linear(p, rng, "gcn.in", 3 + self.enc_cfg.feature_dim, c, dtype)
        for k in range(self.cfg.blocks):
            init_residual_block(p, rng, f"gcn.block{k}", c, dtype)
        _init_norm(p, "gcn.norm", c, dtype)
        _init_linear(p, rng, "gcn.out", c, 3, dtype, gain=0.1)
        _init_linear(p, rng, "gcn.cam", c, 3, dtype, gain=0.01)
        p["gcn.cam.b"] = _cam_bias(dtype)
        return p

    def head_param_names(self, params):
        return [k for k in params if k.startswith("gcn.")]

    def forward(self, p, images):
        """Returns (vertices (B, N, 3), coarse vertices (B, N_c, 3), camera (B, 3))."""
        f = self.encoder.forward(p, images)
        x = attach_features(f, self.template_coarse)
        x = _linear(p, "gcn.in", x)
        for k in range(self.cfg.blocks):
            x = residual_block(self.adj, x, p, f"gcn.block{k}", self.cfg.groups)
        # the residual stream is never normalized inside the blocks
        x = dc.relu(vertex_norm(x, self.cfg.groups, p["gcn.norm.g"], p["gcn.norm.b"]))
        coarse = _linear(p, "gcn.out", x)
        verts = dc.sparse_matmul(self.pair.up, coarse)
        cam = _camera(_linear(p, "gcn.cam", dc.mean_over_rows(x)))
        return verts, coarse, cam


def graph_head_size(enc_cfg: EncoderConfig, cfg: RegressorConfig):
    c, q, k = cfg.channels, cfg.channels // 4, enc_cfg.feature_dim
    block = 2 * c + (c * q + q) + 2 * q + (q * q + q) + 2 * q + (q * c + c)
    return (3 + k) * c + c + cfg.blocks * block + 2 * c + 2 * (3 * c + 3)


def fc_head_size(feature_dim, hidden, n_coarse):
    out = 3 * n_coarse + 3
    return (feature_dim * hidden + hidden) + (hidden * hidden + hidden) + (hidden * out + out)


def matched_fc_hidden(enc_cfg, cfg, n_coarse):
    """Hidden width whose FC head parameter count is closest to the graph head's."""
    target = graph_head_size(enc_cfg, cfg)
    best = min(range(1, 4096), key=lambda h: abs(fc_head_size(enc_cfg.feature_dim, h, n_coarse) - target))
    return best


class FCBaseline:
    """Encoder -> two hidden fully-connected layers -> coarse xyz and camera."""

    kind = "fc"

    def __init__(self, enc_cfg: EncoderConfig, pair: CoarseningPair, hidden: int):
        self.enc_cfg = enc_cfg
        self.encoder = ImageEncoder(enc_cfg)
        self.pair = pair
        self.hidden = int(hidden)

    @property
    def n_coarse(self):
        return self.pair.coarse_mesh.n_vertices

    def init_params(self, rng, dtype=np.float64):
        p = self.encoder.init_params(rng, dtype)
        k, h, nc = self.enc_cfg.feature_dim, self.hidden, self.n_coarse
        _init_linear(p, rng, "fc.0", k, h, dtype)
        _init_linear(p, rng, "fc.1", h, h, dtype)
        _init_linear(p, rng, "fc.2", h, 3 * nc + 3, dtype, gain=0.1)
        # start from the coarse template, like the graph model's input
        p["fc.2.b"][: 3 * nc] = self.pair.coarse_mesh.vertices.ravel()
        p["fc.2.b"][3 * nc:] = _cam_bias(dtype)
        return p

    def head_param_names(self, params):
        return [k for k in params if k.startswith("fc.")]

    def forward(self, p, images):
        f = self.encoder.forward(p, images)
        h = dc.relu(_linear(p, "fc.0", f))
        h = dc.relu(_linear(p, "fc.1", h))
        out = _linear(p, "fc.2", h)
        b, nc = out.shape[0], self.n_coarse
        coarse = dc.reshape(out[:, : 3 * nc], (b, nc, 3))
        verts = dc.sparse_matmul(self.pair.up, coarse)
        cam = _camera(out[:, 3 * nc:])
        return verts, coarse, cam


def count_params(params, names=None):
    names = params.keys() if names is None else names
    return int(sum(params[k].size for k in names))


def as_leaves(params, requires_grad=True):
    return {k: dc.Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}
