"""Time the compiled kernels against the NumPy fallback on model-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 20]

Each workload is run on both backends; outputs are compared for bit
equality before timing.
"""
import argparse
import timeit

import numpy as np

from cmr import kernels
from cmr.bodymodel import lbs_forward, make_mini_model
from cmr.meshgraph import build_adjacency, coarsen
from cmr.synth import sample_params, sample_camera, to_pixels


def workloads():
    body = make_mini_model()
    pair = coarsen(body.template, 4)
    rng = np.random.default_rng(0)
    adj = build_adjacency(pair.coarse_mesh).matrix
    up = pair.up
    verts = lbs_forward(body, sample_params(rng, body.n_joints, body.n_betas))
    cam = sample_camera(rng)
    px = to_pixels(cam.s * verts[:, :2] + np.asarray(cam.t), (64, 64))
    faces = body.template.faces
    feats = rng.normal(size=(adj.shape[1], 16 * 16))
    coarse = rng.normal(size=(up.shape[1], 16 * 3))
    return [
        (f"adjacency {adj.shape[0]}x{adj.shape[1]} @ (.., 256)", "csr_matmul",
         (adj.indptr, adj.indices, adj.data, feats)),
        (f"upsample {up.shape[0]}x{up.shape[1]} @ (.., 48)", "csr_matmul",
         (up.indptr, up.indices, up.data, coarse)),
        (f"rasterize {faces.shape[0]} faces at 64x64", "rasterize_faces",
         (px, verts[:, 2].copy(), faces, 64, 64)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20, help="timed calls per workload (default 20)")
    args = ap.parse_args()
    if kernels._compiled is None:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation` first")

    print(f"{'workload':<40} {'python ms':>10} {'cython ms':>10} {'speedup':>8}")
    for name, fn, a in workloads():
        py = getattr(kernels, f"{fn}_python")
        cy = getattr(kernels._compiled, fn)
        if fn == "csr_matmul":
            a = (*kernels._prep_csr(*a[:3]), np.ascontiguousarray(a[3]))
        r_py, r_cy = py(*a), cy(*a)
        for u, v in zip(r_py if isinstance(r_py, tuple) else (r_py,),
                        r_cy if isinstance(r_cy, tuple) else (r_cy,)):
            assert np.asarray(u).tobytes() == np.asarray(v).tobytes(), f"{name}: backends disagree"
        t_py = min(timeit.repeat(lambda: py(*a), number=1, repeat=args.repeat)) * 1e3
        t_cy = min(timeit.repeat(lambda: cy(*a), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<40} {t_py:>10.3f} {t_cy:>10.3f} {t_py / t_cy:>7.1f}x")


if __name__ == "__main__":
    main()
