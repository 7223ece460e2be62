"""Mesh topology, graph adjacency and mesh coarsening.

A :class:`TemplateMesh` is the fixed-topology mesh whose deformation is
regressed. Its edge graph gives the row-normalized adjacency used by graph
convolutions, and quadric-error edge collapse gives the downsample/upsample
pair used to run the network on a coarser copy of the mesh.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cmr import kernels


class MeshError(ValueError):
    pass


class MalformedFileError(MeshError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


class UnsupportedFaceError(MeshError):
    pass


class InvalidMeshError(MeshError):
    pass


class DecimationError(MeshError):
    pass


class DimensionError(ValueError):
    pass


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def mesh_edges(faces):
    """Unique undirected edges (i < j) of a triangle list, sorted."""
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def _n_components(n, edges):
    parent = np.arange(n)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    return len({find(i) for i in range(n)})


@dataclass(frozen=True, eq=False)
class TemplateMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = _frozen(self.vertices, np.float64)
        f = _frozen(self.faces, np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise InvalidMeshError(f"vertices must be N x 3, got {v.shape}")
        f = f.reshape(-1, 3)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        self._validate()

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_faces(self):
        return self.faces.shape[0]

    def _validate(self):
        v, f = self.vertices, self.faces
        n = v.shape[0]
        if n == 0:
            raise InvalidMeshError("mesh has no vertices")
        if not np.all(np.isfinite(v)):
            raise InvalidMeshError("non-finite vertex coordinates")
        if f.size and (f.min() < 0 or f.max() >= n):
            bad = int(np.nonzero((f < 0) | (f >= n))[0][0])
            raise InvalidMeshError(f"face {bad} indexes outside [0, {n})")
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise InvalidMeshError("face with repeated vertices")
        if f.size:
            e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
            e = np.sort(e, axis=1)
            _, counts = np.unique(e, axis=0, return_counts=True)
            if counts.max() > 2:
                raise InvalidMeshError("edge shared by more than two faces")
            area2 = np.linalg.norm(
                np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1)
            if np.any(area2 == 0.0):
                raise InvalidMeshError(
                    f"zero-area face {int(np.nonzero(area2 == 0.0)[0][0])}")
        if n > 1 and _n_components(n, mesh_edges(f)) != 1:
            raise InvalidMeshError("edge graph is not connected")


def load_obj(path) -> TemplateMesh:
    """Read the ``v``/``f`` subset of Wavefront OBJ (triangles only)."""
    path = Path(path)
    verts, faces = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            toks = line.split()
            if toks[0] == "v":
                if len(toks) < 4:
                    raise MalformedFileError(path, lineno, "vertex needs 3 coordinates")
                try:
                    verts.append([float(t) for t in toks[1:4]])
                except ValueError:
                    raise MalformedFileError(path, lineno, "bad vertex coordinate") from None
            elif toks[0] == "f":
                if len(toks) != 4:
                    raise UnsupportedFaceError(
                        f"{path}:{lineno}: only triangle faces are supported "
                        f"(got {len(toks) - 1} vertices)")
                try:
                    idx = [int(t.split("/")[0]) for t in toks[1:]]
                except ValueError:
                    raise MalformedFileError(path, lineno, "bad face index") from None
                if any(i <= 0 for i in idx):
                    raise InvalidMeshError(f"{path}:{lineno}: face indices are 1-based")
                faces.append([i - 1 for i in idx])
            # other record types (vn, vt, o, g, s, ...) are ignored
    if not verts:
        raise MalformedFileError(path, 0, "no vertex records")
    return TemplateMesh(np.array(verts), np.array(faces, dtype=np.int64).reshape(-1, 3))


def save_obj(path, vertices, faces):
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in vertices.tolist():  # python floats: repr round-trips exactly
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for a, b, c in faces:
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """Compressed sparse row matrix with sorted, unique column indices."""
    shape: tuple
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    _transpose: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "shape", (int(self.shape[0]), int(self.shape[1])))
        object.__setattr__(self, "indptr", _frozen(self.indptr, np.int64))
        object.__setattr__(self, "indices", _frozen(self.indices, np.int64))
        object.__setattr__(self, "data", _frozen(self.data, np.float64))
        if self.indptr.shape != (self.shape[0] + 1,) or self.indptr[0] != 0:
            raise DimensionError("bad row offsets")
        if np.any(np.diff(self.indptr) < 0) or self.indptr[-1] != self.indices.size:
            raise DimensionError("row offsets not monotone")
        if self.indices.size != self.data.size:
            raise DimensionError("indices/data length mismatch")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.shape[1]):
            raise DimensionError("column index out of range")
        if np.any(self.data == 0.0):
            raise DimensionError("explicit zero stored")
        d = np.diff(self.indices)
        row_start = np.zeros(self.indices.size, dtype=bool)
        row_start[self.indptr[1:-1][self.indptr[1:-1] < self.indices.size]] = True
        if np.any((d <= 0) & ~row_start[1:]):
            raise DimensionError("column indices must strictly increase within a row")

    @classmethod
    def from_coo(cls, rows, cols, vals, shape):
        """Build from triplets; duplicates are summed and zeros dropped."""
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        vals = np.asarray(vals, dtype=np.float64).ravel()
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if rows.size:
            key_change = np.ones(rows.size, dtype=bool)
            key_change[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
            starts = np.nonzero(key_change)[0]
            vals = np.add.reduceat(vals, starts)
            rows, cols = rows[starts], cols[starts]
            keep = vals != 0.0
            rows, cols, vals = rows[keep], cols[keep], vals[keep]
        indptr = np.zeros(shape[0] + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        return cls(shape, np.cumsum(indptr), cols, vals)

    @classmethod
    def from_dense(cls, a):
        a = np.asarray(a, dtype=np.float64)
        r, c = np.nonzero(a)
        return cls.from_coo(r, c, a[r, c], a.shape)

    @classmethod
    def identity(cls, n):
        return cls((n, n), np.arange(n + 1), np.arange(n), np.ones(n))

    @property
    def nnz(self):
        return int(self.data.size)

    def row_ids(self):
        return np.repeat(np.arange(self.shape[0]), np.diff(self.indptr))

    def to_dense(self):
        out = np.zeros(self.shape)
        out[self.row_ids(), self.indices] = self.data
        return out

    def row_sums(self):
        return np.array([self.data[a:b].sum() for a, b in zip(self.indptr[:-1], self.indptr[1:])])

    @property
    def T(self):
        if not self._transpose:
            self._transpose.append(SparseMatrix.from_coo(
                self.indices, self.row_ids(), self.data, (self.shape[1], self.shape[0])))
        return self._transpose[0]

    def permuted(self, perm):
        """Return P S P^T where P maps old index perm[k] to new index k."""
        inv = np.empty_like(np.asarray(perm))
        inv[np.asarray(perm)] = np.arange(len(perm))
        return SparseMatrix.from_coo(inv[self.row_ids()], inv[self.indices], self.data, self.shape)

    def __matmul__(self, x):
        if isinstance(x, SparseMatrix):
            return SparseMatrix.from_dense(sparse_dense_multiply(self, x.to_dense()))
        return sparse_dense_multiply(self, x)


def sparse_dense_multiply(s: SparseMatrix, x):
    """Exact S @ X, summing each row in ascending column order.

    ``x`` may be 1-D, 2-D, or batched ``(B, n, C)``; the product acts on the
    second-to-last axis in the batched case.
    """
    x = np.asarray(x)
    if x.ndim == 1:
        return sparse_dense_multiply(s, x[:, None])[:, 0]
    if x.ndim == 3:
        b, n, c = x.shape
        if n != s.shape[1]:
            raise DimensionError(f"sparse {s.shape} cannot multiply batch of {n} x {c}")
        flat = np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(n, b * c)
        out = sparse_dense_multiply(s, flat)
        return out.reshape(s.shape[0], b, c).transpose(1, 0, 2)
    if x.ndim != 2 or x.shape[0] != s.shape[1]:
        raise DimensionError(f"sparse {s.shape} cannot multiply dense {x.shape}")
    return kernels.csr_matmul(s.indptr, s.indices, s.data, x)


@dataclass(frozen=True, eq=False)
class GraphAdjacency:
    matrix: SparseMatrix

    @property
    def n(self):
        return self.matrix.shape[0]


def adjacency_from_edges(n, edges) -> GraphAdjacency:
    """Row-normalize (A + I) for an undirected edge list."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    rows = np.concatenate([edges[:, 0], edges[:, 1], np.arange(n)])
    cols = np.concatenate([edges[:, 1], edges[:, 0], np.arange(n)])
    binary = SparseMatrix.from_coo(rows, cols, np.ones(rows.size), (n, n))
    # duplicates were summed; back to 0/1
    deg = np.diff(binary.indptr).astype(np.float64)
    vals = 1.0 / deg[binary.row_ids()]
    return GraphAdjacency(SparseMatrix((n, n), binary.indptr, binary.indices, vals))


def build_adjacency(mesh: TemplateMesh) -> GraphAdjacency:
    return adjacency_from_edges(mesh.n_vertices, mesh_edges(mesh.faces))


@dataclass(frozen=True, eq=False)
class CoarseningPair:
    down: SparseMatrix
    up: SparseMatrix
    coarse_mesh: TemplateMesh
    kept: np.ndarray  # original indices of the surviving vertices, ascending


# ---------------------------------------------------------------- decimation

def _face_planes(v, f):
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    d = -np.einsum("ij,ij->i", n, v[f[:, 0]])
    return np.concatenate([n, d[:, None]], axis=1)


def decimate(vertices, faces, target):
    """Quadric-error half-edge collapse down to ``target`` vertices.

    Each collapse moves one endpoint onto the other, so survivors keep
    their original positions. Returns ``(kept, new_faces)`` with
    ``new_faces`` indexing the original vertex array.
    """
    v = np.asarray(vertices, dtype=np.float64)
    faces = [list(map(int, fc)) for fc in np.asarray(faces, dtype=np.int64)]
    n = v.shape[0]
    if target >= n:
        return np.arange(n), np.asarray(faces, dtype=np.int64).reshape(-1, 3)

    planes = _face_planes(v, np.asarray(faces, dtype=np.int64))
    quad = np.zeros((n, 4, 4))
    for fi, fc in enumerate(faces):
        k = np.outer(planes[fi], planes[fi])
        for i in fc:
            quad[i] += k

    alive_face = [True] * len(faces)
    vfaces = [set() for _ in range(n)]
    for fi, fc in enumerate(faces):
        for i in fc:
            vfaces[i].add(fi)
    alive = np.ones(n, dtype=bool)
    n_alive = n
    version = np.zeros(n, dtype=np.int64)

    def neighbors(i):
        out = set()
        for fi in vfaces[i]:
            out.update(faces[fi])
        out.discard(i)
        return out

    def collapse_cost(a, b):
        # remove a, keep b
        h = np.append(v[b], 1.0)
        return float(h @ (quad[a] + quad[b]) @ h)

    heap = []

    def push_edge(a, b):
        i, j = min(a, b), max(a, b)
        c_ij = collapse_cost(i, j)  # remove i keep j
        c_ji = collapse_cost(j, i)  # remove j keep i
        # equal costs: keep the lower index
        if c_ji <= c_ij:
            cost, rem, keep = c_ji, j, i
        else:
            cost, rem, keep = c_ij, i, j
        heapq.heappush(heap, (max(cost, 0.0), i, j, rem, keep, version[i], version[j]))

    for a, b in mesh_edges(np.asarray(faces, dtype=np.int64)):
        push_edge(int(a), int(b))

    def try_collapse(u, w):
        """Collapse u onto w if topology and orientation survive."""
        shared = vfaces[u] & vfaces[w]
        if not shared:
            return False
        nu, nw = neighbors(u), neighbors(w)
        common = nu & nw
        if len(common) != len(shared):
            return False
        if n_alive - 1 < 4:
            return False
        new_faces = {}
        for fi in vfaces[u] - shared:
            fc = [w if i == u else i for i in faces[fi]]
            p0, p1, p2 = v[fc[0]], v[fc[1]], v[fc[2]]
            nn = np.cross(p1 - p0, p2 - p0)
            old = planes[fi][:3]
            area_new = np.linalg.norm(nn)
            if area_new <= 1e-12 or nn @ old <= 0.2 * area_new:
                return False
            new_faces[fi] = fc
        # no duplicate faces, no edge with > 2 faces
        existing = {frozenset(faces[fi]) for fi in vfaces[w] - shared}
        edge_count = {}
        for fi in vfaces[w] - shared:
            for e in _face_edge_keys(faces[fi]):
                edge_count[e] = edge_count.get(e, 0) + 1
        for fc in new_faces.values():
            key = frozenset(fc)
            if key in existing:
                return False
            existing.add(key)
            for e in _face_edge_keys(fc):
                if w in e:
                    edge_count[e] = edge_count.get(e, 0) + 1
        if any(c > 2 for c in edge_count.values()):
            return False
        for x in common:
            if not (vfaces[x] - shared):
                return False
        # commit
        for fi in shared:
            alive_face[fi] = False
            for i in faces[fi]:
                vfaces[i].discard(fi)
        for fi, fc in new_faces.items():
            faces[fi] = fc
            vfaces[w].add(fi)
            p = _face_planes(v, np.array([fc]))[0]
            planes[fi] = p
        vfaces[u] = set()
        quad[w] += quad[u]
        alive[u] = False
        return True

    while n_alive > target:
        if not heap:
            raise DecimationError(
                f"no valid collapse left at {n_alive} vertices (target {target})")
        cost, i, j, rem, keep, vi, vj = heapq.heappop(heap)
        if not (alive[i] and alive[j]) or version[i] != vi or version[j] != vj:
            continue
        if try_collapse(rem, keep):
            n_alive -= 1
            version[keep] += 1
            touched = {keep} | neighbors(keep)
            for x in touched:
                version[x] += 1
            seen = set()
            for x in touched:
                for y in neighbors(x):
                    e = (min(x, y), max(x, y))
                    if e not in seen:
                        seen.add(e)
                        push_edge(*e)

    kept = np.nonzero(alive)[0]
    new_faces = np.array([faces[fi] for fi in range(len(faces)) if alive_face[fi]],
                         dtype=np.int64).reshape(-1, 3)
    return kept, new_faces


def _face_edge_keys(fc):
    a, b, c = fc
    return (frozenset((a, b)), frozenset((b, c)), frozenset((c, a)))


def closest_point_barycentric(p, tri):
    """Barycentric coordinates of the closest point to ``p`` on each triangle.

    ``tri`` is (F, 3, 3). Returns (weights (F, 3), squared distances (F,)).
    """
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab, ac, ap = b - a, c - a, p - a
    d00 = np.einsum("ij,ij->i", ab, ab)
    d01 = np.einsum("ij,ij->i", ab, ac)
    d11 = np.einsum("ij,ij->i", ac, ac)
    d20 = np.einsum("ij,ij->i", ap, ab)
    d21 = np.einsum("ij,ij->i", ap, ac)
    den = d00 * d11 - d01 * d01
    bv = (d11 * d20 - d01 * d21) / den
    bw = (d00 * d21 - d01 * d20) / den
    bu = 1.0 - bv - bw
    w = np.stack([bu, bv, bw], axis=1)
    inside = (w >= 0).all(axis=1)

    best_w = np.where(inside[:, None], w, 0.0)
    q = np.einsum("fk,fkd->fd", best_w, tri)
    best_d = np.where(inside, np.einsum("ij,ij->i", p - q, p - q), np.inf)

    for i0, i1 in ((0, 1), (1, 2), (2, 0)):
        s0, s1 = tri[:, i0], tri[:, i1]
        seg = s1 - s0
        t = np.clip(np.einsum("ij,ij->i", p - s0, seg) / np.einsum("ij,ij->i", seg, seg), 0.0, 1.0)
        q = s0 + t[:, None] * seg
        d = np.einsum("ij,ij->i", p - q, p - q)
        better = ~inside & (d < best_d)
        ew = np.zeros_like(w)
        ew[:, i0] = 1.0 - t
        ew[:, i1] = t
        best_w = np.where(better[:, None], ew, best_w)
        best_d = np.where(better, d, best_d)
    return best_w, best_d


def coarsen(mesh: TemplateMesh, factor: float) -> CoarseningPair:
    """Decimate by ``factor`` and build the selection/interpolation pair."""
    if not factor >= 1:
        raise ValueError(f"coarsening factor must be >= 1, got {factor}")
    n = mesh.n_vertices
    if factor == 1:
        eye = SparseMatrix.identity(n)
        return CoarseningPair(eye, eye, mesh, _frozen(np.arange(n), np.int64))
    n_c = int(round(n / factor))
    if n_c < 4:
        raise DecimationError(f"coarse mesh would have {n_c} < 4 vertices")
    kept, faces = decimate(mesh.vertices, mesh.faces, n_c)
    remap = np.full(n, -1, dtype=np.int64)
    remap[kept] = np.arange(kept.size)
    coarse = TemplateMesh(mesh.vertices[kept], remap[faces])

    down = SparseMatrix.from_coo(np.arange(kept.size), kept, np.ones(kept.size), (kept.size, n))
    tri = coarse.vertices[coarse.faces]
    rows, cols, vals = [], [], []
    for i in range(n):
        if remap[i] >= 0:
            rows.append(i); cols.append(remap[i]); vals.append(1.0)
            continue
        w, d = closest_point_barycentric(mesh.vertices[i], tri)
        f = int(np.argmin(d))
        wf = np.clip(w[f], 0.0, None)
        wf /= wf.sum()
        for k in range(3):
            if wf[k] > 0.0:
                rows.append(i); cols.append(coarse.faces[f, k]); vals.append(wf[k])
    up = SparseMatrix.from_coo(rows, cols, vals, (n, kept.size))
    return CoarseningPair(down, up, coarse, _frozen(kept, np.int64))
