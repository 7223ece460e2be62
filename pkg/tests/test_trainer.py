import numpy as np
import pytest

from cmr import container, diffcore as dc, trainer
from cmr.config import ConfigError, TrainConfig
from cmr.synth import DatasetManifest

TINY = [
    ("encoder.widths", "8,8"), ("encoder.feature_dim", "8"),
    ("regressor.channels", "16"), ("regressor.blocks", "1"), ("regressor.groups", "2"),
    ("train.batch_size", "4"), ("train.stage1_steps", "4"), ("train.stage2_steps", "3"),
    ("mlp.hidden", "16"),
]


def tiny_config(manifest, *extra):
    return TrainConfig().with_overrides(TINY + [("train.data", str(manifest))] + list(extra))


# ---------------------------------------------------------------------- Adam

def test_adam_first_step_formula():
    p = {"x": np.array([1.5, -2.0])}
    g = {"x": np.array([0.3, -4.0])}
    st = trainer.AdamState.zeros(p, lr=0.01)
    trainer.adam_step(p, g, st)
    m = 0.1 * g["x"]
    v = 0.001 * g["x"] ** 2
    expect = np.array([1.5, -2.0]) - 0.01 * (m / 0.1) / (np.sqrt(v / 0.001) + 1e-8)
    np.testing.assert_allclose(p["x"], expect, rtol=0, atol=1e-12)
    # bias correction makes the first step about lr in magnitude
    np.testing.assert_allclose(np.abs(p["x"] - [1.5, -2.0]), 0.01, rtol=1e-6)


def test_adam_three_steps_by_hand():
    x, m, v = 0.7, 0.0, 0.0
    p = {"x": np.array(x)}
    st = trainer.AdamState.zeros(p, lr=0.05, beta1=0.8, beta2=0.95, eps=1e-6)
    for t, g in enumerate([1.0, -0.5, 2.0], start=1):
        trainer.adam_step(p, {"x": np.array(g)}, st)
        m = 0.8 * m + 0.2 * g
        v = 0.95 * v + 0.05 * g * g
        x -= 0.05 * (m / (1 - 0.8 ** t)) / (np.sqrt(v / (1 - 0.95 ** t)) + 1e-6)
        assert abs(float(p["x"]) - x) < 1e-12
    assert st.step == 3


def test_adam_zero_gradient_keeps_params():
    p = {"w": np.arange(4.0)}
    st = trainer.AdamState.zeros(p)
    trainer.adam_step(p, {"w": np.zeros(4)}, st)
    np.testing.assert_array_equal(p["w"], np.arange(4.0))


def test_adam_quadratic_convergence(rng):
    c = rng.normal(size=5)
    p = {"x": rng.normal(size=5) * 3}
    st = trainer.AdamState.zeros(p, lr=0.01)
    for _ in range(5000):
        trainer.adam_step(p, {"x": 2 * (p["x"] - c)}, st)
    assert np.linalg.norm(p["x"] - c) < 1e-3


def test_adam_rejects_bad_gradients():
    p = {"a": np.ones(2), "b": np.ones(3)}
    st = trainer.AdamState.zeros(p)
    with pytest.raises(trainer.NonFiniteGradientError, match="'b'"):
        trainer.adam_step(p, {"a": np.ones(2), "b": np.array([1.0, np.nan, 0.0])}, st)
    # nothing was touched
    np.testing.assert_array_equal(p["a"], 1.0)
    assert st.step == 0
    with pytest.raises(dc.DimensionError):
        trainer.adam_step(p, {"a": np.ones(3)}, st)


def test_clip_by_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    out = trainer.clip_by_global_norm(g, 1.0)
    assert out["a"][0] == pytest.approx(0.6) and out["b"][0] == pytest.approx(0.8)
    assert trainer.clip_by_global_norm(g, 0) is g
    assert trainer.clip_by_global_norm(g, 10.0) is g


def test_batch_sampler_covers_epoch():
    s = trainer.BatchSampler(10, 4, 0)
    seen = np.concatenate([s.next() for _ in range(5)])
    assert len(seen) == 20 and set(seen[:10].tolist()) | set(seen[10:].tolist()) == set(range(10))


# ------------------------------------------------------------------ training

@pytest.fixture(scope="module")
def stage1(small_dataset):
    return trainer.train_stage1(tiny_config(small_dataset))


def test_stage1_reduces_training_loss(small_dataset):
    cfg = tiny_config(small_dataset, ("train.stage1_steps", "40"), ("train.lr", "1e-3"))
    lines = []
    trainer.train_stage1(cfg, log=lines.append)
    loss = [float(line.split()[1]) for line in lines]
    assert len(loss) == 40 and np.mean(loss[-5:]) < loss[0]


def test_stage1_deterministic(small_dataset, stage1, tmp_path):
    again = trainer.train_stage1(tiny_config(small_dataset))
    a = trainer.save_checkpoint(tmp_path / "a.cmrk", stage1)
    b = trainer.save_checkpoint(tmp_path / "b.cmrk", again)
    assert a == b


def test_checkpoint_round_trip(stage1, tmp_path):
    trainer.save_checkpoint(tmp_path / "c.cmrk", stage1)
    back = trainer.load_checkpoint(tmp_path / "c.cmrk")
    assert back.config == stage1.config and back.step == stage1.step == 4
    assert back.params_digest() == stage1.params_digest()
    for k in stage1.adam.m:
        assert back.adam.m[k].tobytes() == stage1.adam.m[k].tobytes()
        assert back.adam.v[k].tobytes() == stage1.adam.v[k].tobytes()
    assert back.adam.step == stage1.adam.step
    assert container.dumps(back.to_tensors()) == container.dumps(stage1.to_tensors())


def test_checkpoint_truncated_and_wrong_magic(stage1, tmp_path):
    path = tmp_path / "c.cmrk"
    trainer.save_checkpoint(path, stage1)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(container.ContainerTruncatedError):
        trainer.load_checkpoint(path)
    path.write_bytes(b"ZZZZ" + raw[4:])
    with pytest.raises(container.ContainerFormatError):
        trainer.load_checkpoint(path)
    container.save(path, {"x": np.ones(1)})
    with pytest.raises(container.ContainerFormatError):
        trainer.load_checkpoint(path)


def test_periodic_checkpoints(small_dataset, tmp_path):
    cfg = tiny_config(small_dataset, ("train.checkpoint_every", "2"))
    trainer.train_stage1(cfg, checkpoint_dir=tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["stage1_step000002.cmrk", "stage1_step000004.cmrk"]


def test_nonfinite_loss_aborts_and_keeps_last_good(small_dataset, tmp_path, monkeypatch):
    real = trainer.stage1_objective
    calls = []

    def poisoned(*a):
        calls.append(1)
        loss, ls, lj = real(*a)
        return (dc.scale(loss, np.nan) if len(calls) == 3 else loss), ls, lj

    monkeypatch.setattr(trainer, "stage1_objective", poisoned)
    cfg = tiny_config(small_dataset, ("train.checkpoint_every", "2"))
    with pytest.raises(trainer.NonFiniteLossError, match="step 3"):
        trainer.train_stage1(cfg, checkpoint_dir=tmp_path)
    assert trainer.load_checkpoint(tmp_path / "stage1_step000002.cmrk").step == 2


def test_encoder_must_match_dataset(small_dataset):
    with pytest.raises(ConfigError):
        trainer.train_stage1(tiny_config(small_dataset, ("encoder.resolution", "32")))


def test_fc_model_trains(small_dataset):
    ck = trainer.train_stage1(tiny_config(small_dataset, ("train.model", "fc")))
    assert any(k.startswith("fc.") for k in ck.params)


def test_stage2_freezes_stage1(small_dataset, stage1):
    before = stage1.params_digest()
    lines = []
    ck2 = trainer.train_stage2(tiny_config(small_dataset, ("train.stage2_steps", "30"),
                                           ("train.lr", "1e-3")), stage1, log=lines.append)
    assert stage1.params_digest() == before == ck2.params_digest()
    assert ck2.stage == 2 and ck2.mlp_params
    loss = [float(x.split()[1]) for x in lines]
    assert np.mean(loss[-5:]) < loss[0]


def test_stage2_deterministic(small_dataset, stage1):
    cfg = tiny_config(small_dataset)
    a = trainer.train_stage2(cfg, stage1)
    b = trainer.train_stage2(cfg, stage1)
    assert a.params_digest("mlp") == b.params_digest("mlp")


def test_stage2_needs_stage1(small_dataset, stage1):
    ck2 = trainer.train_stage2(tiny_config(small_dataset), stage1)
    with pytest.raises(ValueError):
        trainer.train_stage2(tiny_config(small_dataset), ck2)


# ---------------------------------------------------------------- evaluation

def test_evaluate_deterministic_and_counts(small_dataset, stage1):
    man = DatasetManifest.read(small_dataset)
    a = trainer.evaluate(stage1, man, "val")
    b = trainer.evaluate(stage1, man, "val")
    assert a == b and a.n_samples == 4
    assert a.reconstruction_error >= 0


def test_evaluate_parametric_requires_stage2(small_dataset, stage1):
    with pytest.raises(ValueError):
        trainer.evaluate(stage1, DatasetManifest.read(small_dataset), "val", parametric=True)


def test_evaluate_rejects_other_template(small_dataset, stage1, tmp_path):
    from cmr.assets import save_assets
    from cmr.bodymodel import make_mini_model
    from cmr.meshgraph import coarsen
    from cmr.synth import generate_dataset

    other = make_mini_model(n_vertices=400)
    save_assets(tmp_path / "m.cmrk", other, coarsen(other.template, 4))
    man = generate_dataset(other, 2, 0, 0.0, tmp_path / "d", tmp_path / "m.cmrk", val_fraction=0.5)
    with pytest.raises(trainer.IncompatibleDataError, match="600"):
        trainer.evaluate(stage1, man, "val")


def test_reprojection_error_finite(small_dataset, stage1):
    err = trainer.reprojection_error(stage1, DatasetManifest.read(small_dataset), "train")
    assert np.isfinite(err) and err > 0
