"""End-to-end acceptance criteria A1-A9.

Each test records a one-line PASS/FAIL verdict (shown in the terminal
summary and printed inline) before asserting. A2-A4 and A9 train real
models and are marked ``slow``; they still run by default.
"""
import math
import time

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import ACCEPTANCE
from cmr import synth, trainer
from cmr.bodymodel import so3_project
from cmr.cli import main as cli_main
from cmr.config import TrainConfig
from cmr.gradcheck import run_suite
from cmr.metrics import mpjpe, procrustes_align, reconstruction_error, sparse_stack, total_loss
from cmr.regressor import count_params

A3_TRAIN, A3_VAL = 512, 128
A3_STEPS = 2000
A3_SEEDS = (0, 1, 2)
A9_N, A9_STEPS = 200, 800


def verdict(key, ok, detail):
    line = f"{key} {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[key] = line
    print(line)
    return ok


def _cfg(manifest, **over):
    pairs = [("train.data", str(manifest))] + [(k.replace("__", "."), str(v)) for k, v in over.items()]
    return TrainConfig().with_overrides(pairs)


# ------------------------------------------------------------ shared data

@pytest.fixture(scope="module")
def overfit_data(body, model_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("a2")
    synth.generate_dataset(body, 20, 0, 0.0, out, model_file, val_fraction=0.2)
    return out / "manifest.txt"


@pytest.fixture(scope="module")
def ablation_data(body, model_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("a3")
    n = A3_TRAIN + A3_VAL
    synth.generate_dataset(body, n, 0, 0.0, out, model_file, val_fraction=A3_VAL / n)
    return out / "manifest.txt"


@pytest.fixture(scope="module")
def ablation_runs(ablation_data):
    """(seed, kind) -> (checkpoint, val report, head parameter count)."""
    man = synth.DatasetManifest.read(ablation_data)
    runs = {}
    t0 = time.perf_counter()
    for seed in A3_SEEDS:
        for kind in ("graph", "fc"):
            cfg = _cfg(ablation_data, train__seed=seed, train__model=kind, train__stage1_steps=A3_STEPS)
            ck = trainer.train_stage1(cfg)
            net = trainer.build_network(cfg, ck.pair)
            runs[seed, kind] = (ck, trainer.evaluate(ck, man, "val"),
                                count_params(ck.params, net.head_param_names(ck.params)))
    return runs, time.perf_counter() - t0


# ----------------------------------------------------------------- criteria

def test_a1_gradient_suite():
    t0 = time.perf_counter()
    results = run_suite("all")
    elapsed = time.perf_counter() - t0
    failed = [r.name for r in results if not r.passed]
    worst = max(results, key=lambda r: r.error / r.tolerance)
    ok = not failed and elapsed < 120
    verdict("A1", ok, f"{len(results) - len(failed)}/{len(results)} gradient checks pass, "
                      f"worst {worst.name} {worst.error:.2e} (tol {worst.tolerance:.0e}), {elapsed:.1f}s < 120s")
    assert ok, failed


@pytest.mark.slow
def test_a2_overfit(overfit_data):
    man = synth.DatasetManifest.read(overfit_data)
    cfg = _cfg(overfit_data, train__stage1_steps=2000)
    t0 = time.perf_counter()
    ck = trainer.train_stage1(cfg)
    elapsed = time.perf_counter() - t0
    train = trainer.evaluate(ck, man, "train")
    ok = train.n_samples == 16 and train.per_vertex_error < 0.05 and elapsed < 600
    verdict("A2", ok, f"16 samples, 2000 steps: per-vertex L1 {train.per_vertex_error:.4f} < 0.05, "
                      f"{elapsed:.0f}s < 600s")
    assert ok


@pytest.mark.slow
def test_a3_graph_beats_fc(ablation_runs):
    runs, elapsed = ablation_runs
    rows, wins = [], 0
    for seed in A3_SEEDS:
        g, f = runs[seed, "graph"][1].per_vertex_error, runs[seed, "fc"][1].per_vertex_error
        wins += g < f
        rows.append(f"seed {seed}: graph {g:.4f} vs fc {f:.4f}")
    pg, pf = runs[A3_SEEDS[0], "graph"][2], runs[A3_SEEDS[0], "fc"][2]
    matched = abs(pf - pg) <= 0.1 * pg
    ok = wins == len(A3_SEEDS) and matched and elapsed < 3600
    verdict("A3", ok, f"graph < fc on {wins}/{len(A3_SEEDS)} seeds ({'; '.join(rows)}), "
                      f"head params {pg} vs {pf}, {elapsed:.0f}s < 3600s")
    assert ok


@pytest.mark.slow
def test_a4_parametric_close_to_nonparametric(ablation_runs, ablation_data):
    runs, _ = ablation_runs
    ck1, report, _ = runs[A3_SEEDS[0], "graph"]
    cfg = ck1.config
    ck2 = trainer.train_stage2(cfg, ck1)
    man = synth.DatasetManifest.read(ablation_data)
    par = trainer.evaluate(ck2, man, "val", parametric=True)
    ratio = par.mpjpe / report.mpjpe
    ok = 0.75 <= ratio <= 1.25
    verdict("A4", ok, f"val MPJPE parametric {par.mpjpe:.4f} / non-parametric {report.mpjpe:.4f} "
                      f"= {ratio:.3f} in [0.75, 1.25]")
    assert ok


def test_a5_rotation_manifold():
    rng = np.random.default_rng(2024)
    m = rng.normal(size=(10000, 3, 3))
    r = so3_project(m)
    orth = np.abs(np.einsum("nji,njk->nik", r, r) - np.eye(3)).max()
    det = np.abs(np.linalg.det(r) - 1).max()
    idem = np.abs(so3_project(r) - r).max()
    scales = rng.uniform(1e-3, 1e3, size=(10000, 1, 1))
    scale = np.abs(so3_project(m * scales) - r).max()
    ok = orth < 1e-9 and det < 1e-9 and idem < 1e-10 and scale < 1e-10
    verdict("A5", ok, f"10000 matrices: |R^T R - I| {orth:.1e}, |det - 1| {det:.1e}, "
                      f"idempotence {idem:.1e}, scale invariance {scale:.1e}")
    assert ok


@pytest.mark.slow
def test_a6_metric_oracle(ablation_runs, ablation_data):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(1000):
        x = rng.normal(size=(12, 3))
        r0 = Rotation.random(random_state=rng.integers(2**31)).as_matrix()
        s0, t0 = rng.uniform(0.2, 5.0), rng.normal(size=3) * 3
        worst = max(worst, procrustes_align(x, s0 * x @ r0.T + t0)[3])
    # every evaluated validation sample of the trained graph model
    runs, _ = ablation_runs
    ck = runs[A3_SEEDS[0], "graph"][0]
    man = synth.DatasetManifest.read(ablation_data)
    data = trainer.load_eval_split(ck, man, "val")
    verts = trainer.predict_stage1(ck, data.images)[0]
    pj = sparse_stack(ck.body.joint_regressor, verts)
    gj = sparse_stack(ck.body.joint_regressor, data.vertices)
    bad = sum(reconstruction_error(a, b) > mpjpe(a, b) for a, b in zip(pj, gj))
    ok = worst < 1e-10 and bad == 0
    verdict("A6", ok, f"1000 similarity transforms recovered, worst error {worst:.1e}; "
                      f"reconstruction <= mpjpe on {len(pj) - bad}/{len(pj)} evaluated samples")
    assert ok


def test_a7_coarsening_algebra(pair, body):
    d, u = pair.down.to_dense(), pair.up.to_dense()
    du = np.abs(d @ u - np.eye(d.shape[0])).max()
    rows = np.abs(u.sum(1) - 1).max()
    v = body.template.vertices
    recon = np.abs((u @ (d @ v))[pair.kept] - v[pair.kept]).max()
    ok = du < 1e-12 and rows < 1e-12 and recon == 0.0
    verdict("A7", ok, f"N={body.n_vertices} -> {d.shape[0]}: |D U - I| {du:.1e}, "
                      f"|U 1 - 1| {rows:.1e}, survivor reconstruction error {recon:.1e}")
    assert ok


def test_a8_determinism(tmp_path, body, model_file):
    digests = [synth.generate_dataset(body, 8, 5, 0.25, tmp_path / f"d{i}", model_file).digest
               for i in range(2)]
    manifest = tmp_path / "d0" / "manifest.txt"
    sets = ["--set", "train.stage1_steps=20", "--set", "train.stage2_steps=10", "--set", "train.batch_size=4"]
    for run in ("r1", "r2"):
        assert cli_main(["train", "--data", str(manifest), "--out", str(tmp_path / run)] + sets) == 0
    same = all((tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes()
               for f in ("stage1.cmrk", "stage2.cmrk"))
    ok = same and digests[0] == digests[1]
    verdict("A8", ok, f"two train runs bit-identical: {same}; dataset digest stable: {digests[0] == digests[1]}")
    assert ok


@pytest.mark.slow
def test_a9_weak_supervision(body, pair, model_file, tmp_path):
    # 40 validation samples: with fewer the check measures memorization, not learning
    synth.generate_dataset(body, A9_N, 9, 0.5, tmp_path / "d", model_file, val_fraction=0.2)
    manifest = tmp_path / "d" / "manifest.txt"
    man = synth.DatasetManifest.read(manifest)
    cfg = _cfg(manifest, train__stage1_steps=A9_STEPS)
    # the untrained network, initialized exactly as training starts
    net = trainer.build_network(cfg, pair)
    init = trainer.Checkpoint(cfg, body, pair, net.init_params(np.random.default_rng(cfg.train.seed)))
    before = trainer.reprojection_error(init, man, "val")
    ck = trainer.train_stage1(cfg)
    after = trainer.reprojection_error(ck, man, "val")
    data = synth.load_split(man, "train", body.n_vertices, body.n_joints, body.n_betas)
    n_weak = int((data.strong == 0).sum())
    s = data.strong.astype(bool)
    gt_loss = abs(float(total_loss(data.vertices[s], data.cameras[s], data.vertices[s], data.keypoints[s],
                                   body.joint_regressor, visibility=data.visibility[s])[0].data))
    ok = n_weak == math.ceil(0.5 * A9_N) and after < before and gt_loss < 1e-9
    verdict("A9", ok, f"{n_weak} weak of {len(data)} train samples; val reprojection {before:.4f} -> {after:.4f}; "
                      f"ground-truth loss {gt_loss:.1e}")
    assert ok

