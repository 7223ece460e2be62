"""Synthetic training data: sampled bodies rendered as silhouettes or part maps."""
from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cmr import container, kernels
from cmr.bodymodel import BodyParams, MiniBodyModel, canonical_axis_angle, lbs_forward
from cmr.metrics import CameraParams, project_array
from cmr.meshgraph import sparse_dense_multiply

MANIFEST_FORMAT = "cmr-manifest-1"


@dataclass
class TrainingSample:
    image: np.ndarray
    gt_keypoints: np.ndarray
    visibility: np.ndarray
    gt_camera: CameraParams
    gt_vertices: np.ndarray | None = None
    gt_params: BodyParams | None = None

    @property
    def weak(self):
        return self.gt_vertices is None

    def to_tensors(self):
        out = {
            "image": self.image.astype(np.float32),
            "keypoints": self.gt_keypoints,
            "visibility": self.visibility,
            "camera": self.gt_camera.as_array(),
        }
        if not self.weak:
            out["vertices"] = self.gt_vertices
            out["theta"] = self.gt_params.axis_angle()
            out["beta"] = np.asarray(self.gt_params.beta)
        return out

    @classmethod
    def from_tensors(cls, d):
        params = None
        if "vertices" in d:
            params = BodyParams(d["theta"], d["beta"])
        return cls(d["image"], d["keypoints"], d["visibility"],
                   CameraParams.from_array(d["camera"]), d.get("vertices"), params)


def _uniform_ball(rng, n, radius):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = radius * rng.uniform(size=(n, 1)) ** (1.0 / 3.0)
    return d * r


def sample_params(rng, n_joints, n_betas, pose_range=0.6, shape_range=2.0,
                  root_range=math.pi) -> BodyParams:
    """Axis-angle pose uniform in a ball per joint; shape uniform in a box."""
    if pose_range < 0 or shape_range < 0 or root_range < 0:
        raise ValueError("sampling ranges must be non-negative")
    theta = np.zeros((n_joints, 3))
    theta[0] = _uniform_ball(rng, 1, root_range)[0]
    theta[1:] = _uniform_ball(rng, n_joints - 1, pose_range)
    theta = canonical_axis_angle(theta)
    beta = rng.uniform(-shape_range, shape_range, size=n_betas)
    return BodyParams(theta, beta)


def sample_camera(rng, s_range=(0.6, 1.2), t_range=0.2) -> CameraParams:
    s = rng.uniform(*s_range)
    t = rng.uniform(-t_range, t_range, size=2)
    return CameraParams(float(s), (float(t[0]), float(t[1])))


def _face_labels(faces, labels):
    a, b, c = labels[faces[:, 0]], labels[faces[:, 1]], labels[faces[:, 2]]
    return np.where((a == b) | (a == c), a,
                    np.where(b == c, b, np.minimum(np.minimum(a, b), c)))


def to_pixels(xy, resolution):
    """Normalized image coordinates ([-1, 1], y up) to pixel (column, row)."""
    h, w = resolution
    return np.stack([(xy[..., 0] + 1.0) * 0.5 * w, (1.0 - xy[..., 1]) * 0.5 * h], axis=-1)


def rasterize(vertices, faces, cam: CameraParams, resolution=(64, 64), labels=None, n_parts=None):
    """Render a silhouette (C=1) or one-hot part planes (C=n_parts).

    Vertices are projected with the weak-perspective camera; visibility is
    resolved with a z-buffer on the original z (larger z is nearer).
    """
    h, w = resolution
    channels = 1 if labels is None else int(n_parts)
    img = np.zeros((h, w, channels))
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if vertices.shape[0] == 0 or faces.shape[0] == 0:
        return img
    xy = cam.s * vertices[:, :2] + np.asarray(cam.t)
    face_id, _ = kernels.rasterize_faces(to_pixels(xy, resolution), vertices[:, 2], faces, h, w)
    covered = face_id >= 0
    if labels is None:
        img[covered, 0] = 1.0
    else:
        flab = _face_labels(faces, np.asarray(labels))
        rr, cc = np.nonzero(covered)
        img[rr, cc, flab[face_id[rr, cc]]] = 1.0
    return img


def render_sample(model: MiniBodyModel, params: BodyParams, cam: CameraParams,
                  resolution=(64, 64), mode="parts", weak=False) -> TrainingSample:
    verts = lbs_forward(model, params)
    labels = model.part_labels() if mode == "parts" else None
    img = rasterize(verts, model.template.faces, cam, resolution, labels, model.n_joints)
    joints = sparse_dense_multiply(model.joint_regressor, verts)
    kp = project_array(joints, cam.as_array())
    vis = (np.abs(kp) <= 1.0).all(axis=1).astype(np.float64)
    if weak:
        return TrainingSample(img, kp, vis, cam)
    return TrainingSample(img, kp, vis, cam, verts, params)


def image_channels(mode, n_joints):
    if mode == "parts":
        return n_joints
    if mode == "silhouette":
        return 1
    raise ValueError(f"unknown image mode {mode!r}")


@dataclass
class ManifestEntry:
    index: int
    split: str
    weak: bool
    path: str
    digest: str

    def line(self):
        return f"{self.index} {self.split} {int(self.weak)} {self.path} {self.digest}"


@dataclass
class DatasetManifest:
    seed: int
    n: int
    weak_fraction: float
    val_fraction: float
    model: str
    model_digest: str
    image_mode: str
    resolution: int
    pose_range: float
    shape_range: float
    root_range: float
    entries: list = field(default_factory=list)
    path: Path | None = None

    _KEYS = ("seed", "n", "weak_fraction", "val_fraction", "model", "model_digest",
             "image_mode", "resolution", "pose_range", "shape_range", "root_range")

    def body_lines(self):
        lines = [f"format={MANIFEST_FORMAT}"]
        lines += [f"{k}={getattr(self, k)!r}" if isinstance(getattr(self, k), float)
                  else f"{k}={getattr(self, k)}" for k in self._KEYS]
        return lines, [e.line() for e in self.entries]

    @property
    def digest(self):
        head, rows = self.body_lines()
        return hashlib.sha256("\n".join(head + rows).encode("utf-8")).hexdigest()

    def to_text(self):
        head, rows = self.body_lines()
        return "\n".join(head + [f"digest={self.digest}"] + rows) + "\n"

    def write(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")
        self.path = Path(path)

    @classmethod
    def read(cls, path):
        path = Path(path)
        kv, entries = {}, []
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            if "=" in line and not line[0].isdigit():
                k, v = line.split("=", 1)
                kv[k.strip()] = v.strip()
            else:
                idx, split, weak, p, dig = line.split()
                entries.append(ManifestEntry(int(idx), split, weak == "1", p, dig))
        if kv.get("format") != MANIFEST_FORMAT:
            raise ValueError(f"{path}: not a {MANIFEST_FORMAT} manifest")
        m = cls(int(kv["seed"]), int(kv["n"]), float(kv["weak_fraction"]),
                float(kv["val_fraction"]), kv["model"], kv["model_digest"], kv["image_mode"],
                int(kv["resolution"]), float(kv["pose_range"]), float(kv["shape_range"]),
                float(kv["root_range"]), entries, path)
        if "digest" in kv and kv["digest"] != m.digest:
            raise ValueError(f"{path}: manifest digest mismatch")
        splits = {}
        for e in entries:
            if e.index in splits:
                raise ValueError(f"{path}: sample {e.index} listed twice")
            splits[e.index] = e.split
        return m

    def model_path(self):
        p = Path(self.model)
        return p if p.is_absolute() or self.path is None else self.path.parent / p

    def entries_for(self, split):
        if split == "all":
            return list(self.entries)
        return [e for e in self.entries if e.split == split]


def generate_dataset(model: MiniBodyModel, n, seed, weak_fraction, out_dir, model_file,
                     val_fraction=0.2, resolution=64, mode="parts", pose_range=0.6,
                     shape_range=2.0, root_range=math.pi) -> DatasetManifest:
    """Render ``n`` samples into ``out_dir`` and write ``manifest.txt``.

    The last ``floor(val_fraction * n)`` indices form the validation split.
    ``ceil(weak_fraction * n)`` samples are weak (keypoints only); they are
    taken from a seeded shuffle of the training indices, so validation
    samples always keep their meshes. Sample ``i`` draws from its own
    stream seeded by ``(seed, i)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= weak_fraction <= 1.0:
        raise ValueError("weak_fraction must lie in [0, 1]")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"cannot write to {out_dir}")
    n_val = int(math.floor(val_fraction * n))
    n_train = n - n_val
    order = np.random.default_rng(seed).permutation(n_train)
    n_weak = int(math.ceil(weak_fraction * n - 1e-9))  # 0.3 * 10 must give 3, not 4
    if n_weak > n_train:
        raise ValueError(f"weak_fraction={weak_fraction} needs {n_weak} weak samples but only "
                         f"{n_train} training samples exist")
    weak_set = set(order[:n_weak].tolist())

    model_file = Path(model_file)
    try:
        model_ref = os.path.relpath(model_file.resolve(), out_dir.resolve())
    except ValueError:
        model_ref = str(model_file.resolve())
    manifest = DatasetManifest(int(seed), int(n), float(weak_fraction), float(val_fraction),
                               model_ref, container.file_digest(model_file), mode,
                               int(resolution), float(pose_range), float(shape_range),
                               float(root_range))
    for i in range(n):
        rng = np.random.default_rng([int(seed), i])
        params = sample_params(rng, model.n_joints, model.n_betas, pose_range, shape_range, root_range)
        cam = sample_camera(rng)
        weak = i in weak_set
        sample = render_sample(model, params, cam, (resolution, resolution), mode, weak)
        rel = f"sample_{i:05d}.cmrk"
        digest = container.save(out_dir / rel, sample.to_tensors())
        manifest.entries.append(ManifestEntry(i, "val" if i >= n_train else "train", weak, rel, digest))
    manifest.write(out_dir / "manifest.txt")
    return manifest


@dataclass
class DatasetArrays:
    """A split loaded into stacked arrays (weak samples have zero labels)."""
    images: np.ndarray
    keypoints: np.ndarray
    visibility: np.ndarray
    cameras: np.ndarray
    vertices: np.ndarray
    thetas: np.ndarray
    betas: np.ndarray
    strong: np.ndarray
    indices: np.ndarray

    def __len__(self):
        return int(self.images.shape[0])

    def subset(self, idx):
        idx = np.asarray(idx)
        return DatasetArrays(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


def load_split(manifest: DatasetManifest, split, n_vertices, n_joints, n_betas,
               verify=True) -> DatasetArrays:
    root = manifest.path.parent if manifest.path is not None else Path(".")
    entries = manifest.entries_for(split)
    cols = {k: [] for k in DatasetArrays.__dataclass_fields__}
    for e in entries:
        path = root / e.path
        raw = path.read_bytes()
        if verify and hashlib.sha256(raw).hexdigest() != e.digest:
            raise ValueError(f"{path}: content digest does not match manifest")
        d = container.loads(raw)
        strong = "vertices" in d
        if strong and d["vertices"].shape[0] != n_vertices:
            raise ValueError(f"{path}: sample has {d['vertices'].shape[0]} vertices, "
                             f"model expects {n_vertices}")
        cols["images"].append(d["image"])
        cols["keypoints"].append(d["keypoints"])
        cols["visibility"].append(d["visibility"])
        cols["cameras"].append(d["camera"])
        cols["vertices"].append(d["vertices"] if strong else np.zeros((n_vertices, 3)))
        cols["thetas"].append(d["theta"] if strong else np.zeros((n_joints, 3)))
        cols["betas"].append(d["beta"] if strong else np.zeros(n_betas))
        cols["strong"].append(strong)
        cols["indices"].append(e.index)
    return DatasetArrays(**{k: np.asarray(v) for k, v in cols.items()})
