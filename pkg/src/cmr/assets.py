"""Serialization of the body model and its coarsening into named tensors."""
import numpy as np

from cmr import container
from cmr.bodymodel import MiniBodyModel
from cmr.meshgraph import CoarseningPair, SparseMatrix, TemplateMesh


def sparse_to_tensors(prefix, s: SparseMatrix):
    return {
        f"{prefix}.shape": np.array(s.shape, dtype=np.int64),
        f"{prefix}.indptr": s.indptr,
        f"{prefix}.indices": s.indices,
        f"{prefix}.data": s.data,
    }


def sparse_from_tensors(prefix, d):
    return SparseMatrix(tuple(d[f"{prefix}.shape"]), d[f"{prefix}.indptr"],
                        d[f"{prefix}.indices"], d[f"{prefix}.data"])


def assets_to_tensors(model: MiniBodyModel, pair: CoarseningPair, prefix="body/"):
    out = {
        f"{prefix}template.vertices": model.template.vertices,
        f"{prefix}template.faces": model.template.faces,
        f"{prefix}shape_dirs": model.shape_dirs,
        f"{prefix}parents": model.parents,
        f"{prefix}skin_weights": model.skin_weights,
        f"{prefix}coarse.faces": pair.coarse_mesh.faces,
        f"{prefix}coarse.kept": pair.kept,
    }
    out.update(sparse_to_tensors(f"{prefix}joint_regressor", model.joint_regressor))
    out.update(sparse_to_tensors(f"{prefix}down", pair.down))
    out.update(sparse_to_tensors(f"{prefix}up", pair.up))
    return out


def assets_from_tensors(d, prefix="body/"):
    template = TemplateMesh(d[f"{prefix}template.vertices"], d[f"{prefix}template.faces"])
    model = MiniBodyModel(template, d[f"{prefix}shape_dirs"],
                          sparse_from_tensors(f"{prefix}joint_regressor", d),
                          d[f"{prefix}parents"], d[f"{prefix}skin_weights"])
    kept = d[f"{prefix}coarse.kept"]
    coarse = TemplateMesh(template.vertices[kept], d[f"{prefix}coarse.faces"])
    pair = CoarseningPair(sparse_from_tensors(f"{prefix}down", d),
                          sparse_from_tensors(f"{prefix}up", d), coarse, kept)
    return model, pair


def save_assets(path, model, pair):
    return container.save(path, assets_to_tensors(model, pair))


def load_assets(path):
    return assets_from_tensors(container.load(path))
