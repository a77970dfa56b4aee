import numpy as np
import pytest

from decoupled_appearance.appearance import AppearanceModel, build_transform_field, transform_image
from decoupled_appearance.encoding import HashGridConfig, SparseRows
from decoupled_appearance.geometry import Camera, DepthMap
from decoupled_appearance.losses import LossConfig, psnr
from decoupled_appearance.training import (
    LOG_COLUMNS,
    Adam,
    AdamState,
    CheckpointError,
    FrameBundle,
    TrainConfig,
    TrainingDiverged,
    load_checkpoint,
    read_loss_log,
    save_checkpoint,
    train,
    write_loss_log,
)


def toy_model(num_views=2, seed=0):
    cfg = HashGridConfig(levels=3, features_per_level=2, table_size=2**8, base_resolution=2, growth_factor=2.0,
                         domain_min=(-2.0, -2.0, 0.0), domain_max=(2.0, 2.0, 4.0))
    return AppearanceModel.create(num_views, cfg, embedding_dim=4, seed=seed, hidden=(16, 8), depth_range=(0.5, 4.0))


def toy_frames(gains=(1.2, 0.8), w=16, h=12):
    cam = Camera(fx=12.0, fy=12.0, cx=w / 2, cy=h / 2, width=w, height=h)
    yy, xx = np.mgrid[:h, :w]
    dm = DepthMap(2.0 + 0.04 * xx + 0.02 * yy, np.ones((h, w), dtype=bool))
    rng = np.random.default_rng(7)
    frames = []
    for v, g in enumerate(gains):
        rendered = rng.uniform(0.2, 0.7, size=(h, w, 3))
        frames.append(FrameBundle(v, rendered, dm, cam, rendered * g))
    return frames


# ---------------------------------------------------------------- Adam


def test_adam_first_step_moves_by_lr():
    opt = Adam(lr=0.1)
    p = np.array([1.0, -2.0, 0.5])
    st = opt.init_dense(p.shape)
    opt.dense_step(p, np.array([3.0, -0.01, 0.0]), st)
    np.testing.assert_allclose(p, [0.9, -1.9, 0.5], atol=1e-12)


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(5, 4))
    opt = Adam(lr=0.01, beta1=0.8, beta2=0.95, eps=1e-8)
    p = np.zeros(4)
    st = opt.init_dense(4)
    m = v = np.zeros(4)
    q = np.zeros(4)
    for t, g in enumerate(grads, start=1):
        opt.dense_step(p, g, st)
        m = 0.8 * m + 0.2 * g
        v = 0.95 * v + 0.05 * g * g
        q = q - 0.01 * (m / (1 - 0.8**t)) / (np.sqrt(v / (1 - 0.95**t)) + 1e-8)
    np.testing.assert_allclose(p, q, rtol=1e-13)


def test_adam_minimizes_quadratic():
    opt = Adam(lr=0.05)
    x = np.array([0.0])
    st = opt.init_dense(1)
    for _ in range(500):
        opt.dense_step(x, 2 * (x - 3.0), st)
    assert abs(x[0] - 3.0) < 1e-3


def test_adam_nan_gradient_raises():
    opt = Adam()
    with pytest.raises(FloatingPointError):
        opt.dense_step(np.zeros(2), np.array([0.0, np.nan]), opt.init_dense(2))
    with pytest.raises(FloatingPointError):
        opt.sparse_step(np.zeros((3, 2)), SparseRows(np.array([1]), np.array([[np.inf, 0.0]])), opt.init_dense((3, 2)))


def test_sparse_step_only_touches_rows_with_gradient():
    opt = Adam(lr=0.1)
    table = np.ones((5, 2))
    st = opt.init_dense(table.shape)
    grad = SparseRows(np.array([1, 3]), np.array([[0.5, -0.5], [0.0, 0.0]]))
    opt.sparse_step(table, grad, st)
    np.testing.assert_array_equal(table[[0, 2, 3, 4]], 1.0)
    np.testing.assert_allclose(table[1], [0.9, 1.1], atol=1e-12)
    assert np.all(st.m[3] == 0) and np.all(st.v[3] == 0)


def test_sparse_step_equals_dense_step_on_full_rows():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 3))
    b = a.copy()
    opt = Adam(lr=0.01)
    sa, sb = opt.init_dense(a.shape), opt.init_dense(b.shape)
    for _ in range(3):
        g = rng.normal(size=a.shape)
        opt.dense_step(a, g, sa)
        opt.sparse_step(b, SparseRows(np.arange(4), g), sb)
    np.testing.assert_allclose(a, b, rtol=1e-14)


# ---------------------------------------------------------------- config


def test_train_config_scales_schedule_and_round_trips():
    cfg = TrainConfig(total_iters=600, seed=3)
    assert cfg.loss.lambda2_schedule.total_iters == 600
    assert cfg.loss.lambda2_schedule.warmup_iters == 100
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.lr_scale(0) == 1.0 and cfg.lr_scale(599) == pytest.approx(0.1)


@pytest.mark.parametrize("kw", [dict(total_iters=0), dict(lr_mlp=0.0), dict(cell_size=0), dict(lr_final_ratio=0.0)])
def test_train_config_rejects_bad_values(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_frame_bundle_shape_checks():
    f = toy_frames()[0]
    with pytest.raises(ValueError):
        FrameBundle(0, f.rendered[:-1], f.depth, f.camera, None)
    with pytest.raises(ValueError):
        FrameBundle(0, f.rendered, f.depth, f.camera, f.rendered[:, :-1])


# ---------------------------------------------------------------- training loop


def test_training_learns_per_view_gains():
    model = toy_model()
    frames = toy_frames()
    before = [psnr(f.rendered, f.ground_truth) for f in frames]
    res = train(model, frames, TrainConfig(total_iters=300, lr_embeddings=1e-2, cell_size=4))
    after = []
    for f in frames:
        out, _ = transform_image(f.rendered, build_transform_field(model, f.depth, f.camera, f.view_id, 4, f.rendered))
        after.append(psnr(out, f.ground_truth))
    assert all(a > b + 10 for a, b in zip(after, before))
    assert len(res.log) == 300 and res.log[-1][-1] < res.log[0][-1]


def test_training_is_deterministic(tmp_path):
    frames = toy_frames()
    paths = []
    for k in range(2):
        model = toy_model()
        train(model, frames, TrainConfig(total_iters=40, cell_size=4, seed=5))
        paths.append(tmp_path / f"m{k}.ckpt")
        save_checkpoint(model, paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_resume_matches_uninterrupted_run(tmp_path):
    frames = toy_frames()
    cfg = TrainConfig(total_iters=30, cell_size=4, seed=2)
    full = toy_model()
    train(full, frames, cfg)

    part = toy_model()
    res = train(part, frames, cfg, stop_at=12)
    save_checkpoint(part, tmp_path / "half.ckpt", state=res.state, extra={"note": "x"})
    resumed, state, extra = load_checkpoint(tmp_path / "half.ckpt", with_state=True)
    assert state.iteration == 12 and extra == {"note": "x"}
    train(resumed, frames, cfg, state=state)
    save_checkpoint(full, tmp_path / "a.ckpt")
    save_checkpoint(resumed, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_divergence_is_detected():
    frames = toy_frames()
    model = toy_model()
    with pytest.raises(TrainingDiverged):
        train(model, frames, TrainConfig(total_iters=400, lr_mlp=50.0, lr_grids=50.0, lr_embeddings=50.0,
                                         lr_final_ratio=1.0, cell_size=4))


def test_training_rejects_bad_frames():
    model = toy_model(num_views=1)
    frames = toy_frames()
    with pytest.raises(KeyError):
        train(model, frames, TrainConfig(total_iters=2))
    with pytest.raises(ValueError):
        train(model, [], TrainConfig(total_iters=2))


def test_loss_log_round_trip(tmp_path):
    model = toy_model()
    res = train(model, toy_frames(), TrainConfig(total_iters=5, cell_size=4), log_path=tmp_path / "log.csv")
    rows = read_loss_log(tmp_path / "log.csv")
    assert [r["iter"] for r in rows] == list(range(5))
    assert tuple(rows[0]) == LOG_COLUMNS
    assert rows[3]["total"] == pytest.approx(res.log[3][-1], rel=1e-9)
    write_loss_log(tmp_path / "log.csv", [(5, 1, 2, 3, 4, 5)], append=True)
    assert len(read_loss_log(tmp_path / "log.csv")) == 6


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_is_exact(tmp_path):
    model = toy_model(num_views=3, seed=4)
    rng = np.random.default_rng(0)
    model.mlp.weights[-1][:] = rng.normal(size=model.mlp.weights[-1].shape)
    model.embeddings[:] = rng.normal(size=model.embeddings.shape)
    save_checkpoint(model, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.grids.config == model.grids.config and back.depth_range == model.depth_range
    for a, b in zip(model.grids.tables + model.mlp.weights + model.mlp.biases + [model.embeddings],
                    back.grids.tables + back.mlp.weights + back.mlp.biases + [back.embeddings]):
        assert a.tobytes() == b.tobytes()
    save_checkpoint(back, tmp_path / "m2.ckpt")
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()


def test_checkpoint_without_state(tmp_path):
    save_checkpoint(toy_model(), tmp_path / "m.ckpt")
    _, state, extra = load_checkpoint(tmp_path / "m.ckpt", with_state=True)
    assert state is None and extra == {}


@pytest.mark.parametrize("damage", ["magic", "version", "truncate", "trailing", "header"])
def test_checkpoint_corruption_is_reported(tmp_path, damage):
    save_checkpoint(toy_model(), tmp_path / "m.ckpt")
    data = bytearray((tmp_path / "m.ckpt").read_bytes())
    if damage == "magic":
        data[:4] = b"XXXX"
    elif damage == "version":
        data[8] = 99
    elif damage == "truncate":
        data = data[:-16]
    elif damage == "trailing":
        data += b"\0" * 8
    else:
        data[20:24] = b"\xff\xfe\xfd\xfc"
    (tmp_path / "bad.ckpt").write_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_adam_state_defaults():
    st = AdamState(np.zeros(2), np.zeros(2))
    assert st.step == 0
