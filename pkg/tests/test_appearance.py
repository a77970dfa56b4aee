import numpy as np
import pytest

from decoupled_appearance.appearance import (
    AppearanceModel,
    TransformField,
    apply_affine,
    assemble_features,
    build_transform_field,
    cell_statistics,
    decode_matrix,
    fit_test_embedding,
    frame_loss,
    interpolation_matrix,
    pixel_matrices,
    query_matrices,
    transform_image,
)
from decoupled_appearance.encoding import AblationEncoding, HashGridConfig
from decoupled_appearance.geometry import Camera, DepthMap, pixel_centers
from decoupled_appearance.losses import M_ID, LossConfig, identity_regularizer
from decoupled_appearance.network import mlp_forward


def small_model(num_views=2, seed=0, kind="xyz", embedding_dim=4, perturb=0.0):
    cfg = HashGridConfig(levels=3, features_per_level=2, table_size=2**8, base_resolution=2, growth_factor=2.0,
                         domain_min=(-2.0, -2.0, 0.0), domain_max=(2.0, 2.0, 4.0))
    model = AppearanceModel.create(num_views, cfg, embedding_dim=embedding_dim, seed=seed,
                                   encoding=AblationEncoding(kind), hidden=(8, 6), depth_range=(0.5, 4.0))
    if perturb:
        rng = np.random.default_rng(seed + 100)
        for t in model.grids.tables:
            t += rng.normal(scale=perturb, size=t.shape)
        for w in model.mlp.weights:
            w += rng.normal(scale=perturb, size=w.shape)
        for b in model.mlp.biases:
            b += rng.normal(scale=perturb * 0.1, size=b.shape)
        model.embeddings[:] = rng.normal(scale=perturb, size=model.embeddings.shape)
    return model


def slanted_frame(w=12, h=10, seed=0, invalid=None):
    cam = Camera(fx=10.0, fy=10.0, cx=w / 2, cy=h / 2, width=w, height=h)
    yy, xx = np.mgrid[:h, :w]
    depth = 2.0 + 0.05 * xx + 0.03 * yy
    valid = np.ones((h, w), dtype=bool)
    if invalid is not None:
        valid[invalid] = False
    dm = DepthMap(np.where(valid, depth, 0.0), valid)
    rng = np.random.default_rng(seed)
    rendered = rng.uniform(0.1, 0.9, size=(h, w, 3))
    target = np.clip(rendered * 1.1 - 0.03 + rng.normal(scale=0.01, size=rendered.shape), 0, 1)
    return cam, dm, rendered, target


# ---------------------------------------------------------------- decode / apply


def test_assemble_features_is_concatenation():
    model = small_model(perturb=0.5)
    x = np.array([[0.3, -0.2, 1.7], [1.0, 1.0, 3.0]])
    feats = assemble_features(model, x, 1)
    grid_feats, _ = model.grids.query(x)
    assert feats.shape == (2, model.feature_dim + model.embedding_dim)
    np.testing.assert_array_equal(feats[:, : model.feature_dim], grid_feats)
    np.testing.assert_array_equal(feats[:, model.feature_dim:], np.tile(model.embeddings[1], (2, 1)))
    assert assemble_features(model, x[0], 1).shape == (model.feature_dim + model.embedding_dim,)


def test_unknown_view_raises():
    with pytest.raises(KeyError):
        assemble_features(small_model(), np.zeros(3), 5)


def test_decode_matrix_row_major_plus_identity():
    model = small_model(perturb=0.5)
    f = np.random.default_rng(1).normal(size=model.mlp.input_dim)
    v, _ = mlp_forward(model.mlp, f)
    m = decode_matrix(model, f)
    for i in range(3):
        for j in range(4):
            assert m[i, j] == v[4 * i + j] + (1.0 if i == j else 0.0)


def test_fresh_model_decodes_identity():
    model = small_model()
    f = np.random.default_rng(2).normal(size=(5, model.mlp.input_dim))
    np.testing.assert_array_equal(decode_matrix(model, f), np.broadcast_to(M_ID, (5, 3, 4)))


def test_apply_affine_hand_example():
    m = np.array([[2.0, 0, 0, 0.1], [0, 1, 0, 0], [0.5, 0, 1, -0.2]])
    out = apply_affine([0.2, 0.4, 0.6], m)
    np.testing.assert_allclose(out, [0.5, 0.4, 0.5], atol=1e-15)
    np.testing.assert_array_equal(apply_affine([0.2, 0.4, 0.6], M_ID), [0.2, 0.4, 0.6])


def test_apply_affine_does_not_clamp():
    out = apply_affine([0.9, 0.9, 0.9], np.hstack([np.eye(3) * 2, np.zeros((3, 1))]))
    assert np.all(out > 1.0)


# ---------------------------------------------------------------- cells


def test_cell_statistics_64x64_cell8():
    h = w = 64
    yy, xx = np.mgrid[:h, :w]
    values = 1.0 + xx + 100.0 * yy
    valid = np.ones((h, w), dtype=bool)
    valid[:8, :8] = False
    valid[8:16, 0:4] = False
    dm = DepthMap(np.where(valid, values, 0.0), valid)
    mean_depth, _, centers, cell_valid = cell_statistics(dm, 8)
    assert mean_depth.shape == (8, 8)
    assert not cell_valid[0, 0] and cell_valid.sum() == 63
    np.testing.assert_array_equal(centers[0, 0], [4.0, 4.0])
    np.testing.assert_array_equal(centers[2, 5], [44.0, 20.0])
    # cell (1, 0): only columns 4..7 of rows 8..15 are valid
    assert mean_depth[1, 0] == pytest.approx(1.0 + 5.5 + 100.0 * 11.5)
    assert mean_depth[3, 6] == pytest.approx(1.0 + 51.5 + 100.0 * 27.5)


def test_cell_statistics_partial_border_cells():
    dm = DepthMap(np.ones((10, 13)), np.ones((10, 13), dtype=bool))
    mean_depth, _, centers, cell_valid = cell_statistics(dm, 4)
    assert mean_depth.shape == (3, 4) and cell_valid.all()
    np.testing.assert_array_equal(centers[2, 3], [12.5, 9.0])


def test_interpolation_matrix_weights():
    centers = np.array([4.0, 12.0, 20.0])
    r = interpolation_matrix(24, centers)
    np.testing.assert_allclose(r.sum(axis=1), 1.0, atol=1e-15)
    p = np.arange(24) + 0.5
    interior = (p >= 4) & (p <= 20)
    np.testing.assert_allclose(r[interior] @ centers, p[interior], atol=1e-12)
    np.testing.assert_array_equal(r[0], [1, 0, 0])
    np.testing.assert_array_equal(r[-1], [0, 0, 1])


def test_pixel_matrices_bilinear_oracle():
    rng = np.random.default_rng(3)
    cells = rng.normal(size=(2, 3, 3, 4))
    field = TransformField(cells, np.ones((2, 3), dtype=bool), 4, 8, 12)
    mats = pixel_matrices(field)
    # pixel (row 5, col 6) has center (6.5, 5.5); cell centers are x in {2, 6, 10}, y in {2, 6}
    ty, tx = (5.5 - 2) / 4, (6.5 - 6) / 4
    expected = ((1 - ty) * ((1 - tx) * cells[0, 1] + tx * cells[0, 2])
                + ty * ((1 - tx) * cells[1, 1] + tx * cells[1, 2]))
    np.testing.assert_allclose(mats[5, 6], expected, atol=1e-14)
    np.testing.assert_allclose(mats[0, 0], cells[0, 0], atol=1e-15)


def test_cell_size_one_equals_per_pixel_query():
    model = small_model(perturb=0.5)
    cam, dm, rendered, _ = slanted_frame()
    field = build_transform_field(model, dm, cam, 0, cell_size=1, rendered=rendered)
    pix = pixel_centers(cam.width, cam.height).reshape(-1, 2)
    direct, _ = query_matrices(model, cam, pix, dm.values.ravel(), rendered.reshape(-1, 3), model.embedding(0))
    assert np.array_equal(pixel_matrices(field).reshape(-1, 3, 4), direct)


def test_invalid_cells_are_identity_and_unregularized():
    model = small_model(perturb=0.5)
    invalid = (slice(0, 4), slice(0, 4))
    cam, dm, rendered, target = slanted_frame(invalid=invalid)
    field = build_transform_field(model, dm, cam, 0, cell_size=4, rendered=rendered)
    assert not field.valid[0, 0] and field.valid.sum() == field.valid.size - 1
    np.testing.assert_array_equal(field.cells[0, 0], M_ID)
    fl = frame_loss(model, rendered, dm, cam, target, 6000, LossConfig(), view_id=0, cell_size=4)
    assert fl.terms.lid == pytest.approx(identity_regularizer(field.cells[field.valid]), rel=1e-14)


def test_lid_single_entry_example():
    m = np.broadcast_to(M_ID, (4, 3, 4)).copy()
    m[2, 0, 3] = 0.48
    assert identity_regularizer(m) == pytest.approx(0.01, abs=1e-15)


def test_identity_start_is_bitwise_passthrough():
    model = small_model()
    cam, dm, rendered, target = slanted_frame(w=16, h=16)
    for c in (1, 4, 8):
        out, _ = transform_image(rendered, build_transform_field(model, dm, cam, 1, c, rendered))
        assert np.array_equal(out, rendered)


def test_transform_image_shape_mismatch():
    model = small_model()
    cam, dm, rendered, _ = slanted_frame()
    field = build_transform_field(model, dm, cam, 0, 4, rendered)
    with pytest.raises(ValueError):
        transform_image(rendered[:-1], field)


# ---------------------------------------------------------------- gradients


def _fd_check(model, frames, kind_tol=1e-5, columns=None):
    cfg = LossConfig()

    def loss():
        return sum(
            frame_loss(model, r, d, c, t, 7000, cfg, view_id=v, cell_size=3, columns=columns, need_grads=False).terms.total
            for v, (c, d, r, t) in frames
        )

    grads = [frame_loss(model, r, d, c, t, 7000, cfg, view_id=v, cell_size=3, columns=columns).grads
             for v, (c, d, r, t) in frames]
    groups = []
    if grads[0].grid is not None:
        for level, table in enumerate(model.grids.tables):
            g = sum(gr.grid[level].dense(table.shape[0]) for gr in grads)
            groups.append((table, g))
    for i, w in enumerate(model.mlp.weights):
        groups.append((w, sum(gr.weights[i] for gr in grads)))
        groups.append((model.mlp.biases[i], sum(gr.biases[i] for gr in grads)))
    emb_grad = np.zeros_like(model.embeddings)
    for (v, _), gr in zip(frames, grads):
        emb_grad[v] += gr.embedding
    groups.append((model.embeddings, emb_grad))
    h = 1e-6
    for arr, analytic in groups:
        touched = np.argwhere(np.abs(analytic) > 0)
        rng = np.random.default_rng(0)
        picks = touched[rng.choice(len(touched), size=min(40, len(touched)), replace=False)] if len(touched) else []
        for idx in map(tuple, picks):
            old = arr[idx]
            arr[idx] = old + h
            fp = loss()
            arr[idx] = old - h
            fm = loss()
            arr[idx] = old
            num = (fp - fm) / (2 * h)
            assert abs(num - analytic[idx]) <= kind_tol * max(abs(num), 1e-3), (idx, num, analytic[idx])


@pytest.mark.parametrize("kind", ["xyz", "uv_depth", "color"])
def test_frame_loss_gradients_match_finite_differences(kind):
    model = small_model(kind=kind, perturb=0.3)
    frames = [(0, slanted_frame(w=7, h=6, seed=1)), (1, slanted_frame(w=7, h=6, seed=2))]
    _fd_check(model, frames)


def test_left_band_gradients_match_finite_differences():
    model = small_model(perturb=0.3)
    _fd_check(model, [(0, slanted_frame(w=8, h=6, seed=3))], columns=slice(0, 4))


# ---------------------------------------------------------------- held-out fitting


def test_fit_test_embedding_leaves_model_untouched_and_reduces_loss():
    model = small_model(perturb=0.3)
    before = model.copy()
    cam, dm, rendered, target = slanted_frame(w=16, h=12, seed=4)
    left = slice(0, 8)

    def left_loss(emb):
        return frame_loss(model, rendered, dm, cam, target, 0, LossConfig(), embedding=emb, cell_size=4,
                          lambda2=0.2, columns=left, need_grads=False).terms.total

    emb = fit_test_embedding(model, rendered, dm, cam, target, cell_size=4, iters=60, lr=5e-2)
    assert left_loss(emb) < left_loss(np.zeros(model.embedding_dim))
    for a, b in zip(model.grids.tables + model.mlp.weights + model.mlp.biases + [model.embeddings],
                    before.grids.tables + before.mlp.weights + before.mlp.biases + [before.embeddings]):
        assert np.array_equal(a, b)


def test_fit_test_embedding_ignores_right_half():
    model = small_model(perturb=0.3)
    cam, dm, rendered, target = slanted_frame(w=16, h=12, seed=5)
    other = target.copy()
    other[:, 8:] = 0.0
    a = fit_test_embedding(model, rendered, dm, cam, target, cell_size=4, iters=20)
    b = fit_test_embedding(model, rendered, dm, cam, other, cell_size=4, iters=20)
    assert np.array_equal(a, b)


def test_fit_test_embedding_needs_ground_truth():
    model = small_model()
    cam, dm, rendered, _ = slanted_frame()
    with pytest.raises(ValueError):
        fit_test_embedding(model, rendered, dm, cam, None)
