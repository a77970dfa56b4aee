"""Per-pixel affine color transforms decoded from 3D features and view embeddings.

Pipeline for one frame:

1. split the depth map into ``c x c`` pixel cells, average the valid depth of
   each cell and back-project the cell center to a world point;
2. encode the point with the hash grid (or a degenerate ablation encoding),
   append the view's appearance embedding and decode a 12-vector with the MLP;
3. reshape to a 3x4 matrix and add ``[I | 0]`` so a zero network output is the
   identity transform;
4. bilinearly interpolate the cell matrices to every pixel and apply them to
   the homogeneous rendered color ``[r, g, b, 1]``.

Every step has a matching backward so the whole chain can be trained without
an autodiff framework.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoding import AblationEncoding, GridCache, HashGridConfig, HashGridStack, SparseRows, ablation_encode
from .geometry import Camera, DepthMap, back_project
from .losses import M_ID, LossConfig, identity_regularizer, total_loss
from .network import HIDDEN_WIDTHS, MlpCache, MlpParams, mlp_backward, mlp_forward

DEFAULT_EMBEDDING_DIM = 32


@dataclass
class AppearanceModel:
    grids: HashGridStack
    mlp: MlpParams
    embeddings: np.ndarray  # (num_views, A)
    encoding: AblationEncoding = field(default_factory=AblationEncoding)
    depth_range: tuple = (0.0, 10.0)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2:
            raise ValueError("embeddings must be a (num_views, A) array")
        expected = self.grids.config.output_dim + self.embedding_dim
        if self.mlp.input_dim != expected:
            raise ValueError(f"MLP input width {self.mlp.input_dim} != L*F + A = {expected}")
        self.depth_range = tuple(float(v) for v in self.depth_range)

    @property
    def embedding_dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def num_views(self) -> int:
        return self.embeddings.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.grids.config.output_dim

    @classmethod
    def create(
        cls,
        num_views: int,
        grid_config: HashGridConfig | None = None,
        embedding_dim: int = DEFAULT_EMBEDDING_DIM,
        encoding: AblationEncoding | None = None,
        seed: int = 0,
        hidden=HIDDEN_WIDTHS,
        activation: str = "relu",
        depth_range=(0.0, 10.0),
    ) -> "AppearanceModel":
        """Identity-initialized model: zero embeddings and a zero output layer."""
        grid_config = grid_config or HashGridConfig()
        rng = np.random.default_rng(seed)
        grids = HashGridStack.create(grid_config, rng)
        mlp = MlpParams.create(grid_config.output_dim + embedding_dim, rng, hidden=hidden, activation=activation)
        return cls(grids, mlp, np.zeros((num_views, embedding_dim)), encoding or AblationEncoding(), depth_range)

    def embedding(self, view_id: int) -> np.ndarray:
        if not 0 <= view_id < self.num_views:
            raise KeyError(f"no appearance embedding for view {view_id}")
        return self.embeddings[view_id]

    def copy(self) -> "AppearanceModel":
        return AppearanceModel(self.grids.copy(), self.mlp.copy(), self.embeddings.copy(), self.encoding, self.depth_range)


@dataclass
class QueryCache:
    grid_cache: GridCache | None
    mlp_cache: MlpCache
    count: int


def encode_positions(model: AppearanceModel, points, pixels, depths, colors, image_size):
    """Positional features ``(N, L*F)`` for the model's encoding kind."""
    kind = model.encoding.kind
    if kind == "xyz":
        return model.grids.query(points)
    feats = ablation_encode(
        kind, pixels, depths, colors, image_size, model.feature_dim, model.encoding.pe_frequencies, model.depth_range
    )
    return feats, None


def assemble_features(model: AppearanceModel, x, view_id: int) -> np.ndarray:
    """``f_0 + ... + f_{L-1} + l`` (concatenation) for a world point with the xyz encoding."""
    emb = model.embedding(view_id)
    x = np.asarray(x, dtype=np.float64)
    feats, _ = model.grids.query(x.reshape(-1, 3))
    out = np.hstack([feats, np.broadcast_to(emb, (feats.shape[0], emb.size))])
    return out[0] if x.ndim == 1 else out


def decode_matrix(model: AppearanceModel, features) -> np.ndarray:
    """MLP output reshaped row-major to 3x4 plus ``[I | 0]``."""
    v, _ = mlp_forward(model.mlp, features)
    return v.reshape(v.shape[:-1] + (3, 4)) + M_ID


def apply_affine(color, matrix) -> np.ndarray:
    """``M @ [r, g, b, 1]`` for one color or broadcast over leading axes; never clamps."""
    color = np.asarray(color, dtype=np.float64)
    matrix = np.asarray(matrix, dtype=np.float64)
    return np.einsum("...ij,...j->...i", matrix[..., :3], color) + matrix[..., 3]


def query_matrices(model: AppearanceModel, camera: Camera, pixels, depths, colors, embedding):
    """Decode one matrix per (pixel, depth) sample.

    Args:
        pixels: ``(N, 2)`` continuous pixel coordinates.
        depths: ``(N,)`` strictly positive z-depths.
        colors: ``(N, 3)`` rendered colors (only read by the color encoding).
        embedding: ``(A,)`` appearance embedding.

    Returns:
        ``(matrices (N, 3, 4), QueryCache)``.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    n = pixels.shape[0]
    depths = np.asarray(depths, dtype=np.float64).reshape(n)
    points = back_project(camera, pixels, depths) if n else np.zeros((0, 3))
    feats, gcache = encode_positions(model, points, pixels, depths, colors, (camera.width, camera.height))
    inputs = np.hstack([feats, np.broadcast_to(embedding, (n, embedding.size))])
    v, mcache = mlp_forward(model.mlp, inputs)
    return v.reshape(n, 3, 4) + M_ID, QueryCache(gcache, mcache, n)


def _cell_centers(n: int, cell: int) -> np.ndarray:
    starts = np.arange(0, n, cell)
    ends = np.minimum(starts + cell, n)
    return (starts + ends) / 2.0


def interpolation_matrix(n: int, centers: np.ndarray) -> np.ndarray:
    """``(n, K)`` linear interpolation weights from cell centers to pixel centers.

    Pixels beyond the first/last center are clamped to that cell.
    """
    p = np.arange(n, dtype=np.float64) + 0.5
    k = centers.size
    r = np.zeros((n, k))
    if k == 1:
        r[:, 0] = 1.0
        return r
    hi = np.clip(np.searchsorted(centers, p, side="right"), 1, k - 1)
    lo = hi - 1
    t = np.clip((p - centers[lo]) / (centers[hi] - centers[lo]), 0.0, 1.0)
    rows = np.arange(n)
    r[rows, lo] += 1.0 - t
    r[rows, hi] += t
    return r


@dataclass
class TransformField:
    """Coarse grid of affine matrices for one frame."""

    cells: np.ndarray  # (nh, nw, 3, 4)
    valid: np.ndarray  # (nh, nw) bool; invalid cells hold M_ID
    cell_size: int
    height: int
    width: int
    cache: QueryCache | None = None
    embedding: np.ndarray | None = None

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.cells.shape[:2]

    def row_weights(self) -> np.ndarray:
        return interpolation_matrix(self.height, _cell_centers(self.height, self.cell_size))

    def col_weights(self) -> np.ndarray:
        return interpolation_matrix(self.width, _cell_centers(self.width, self.cell_size))

    def valid_matrices(self) -> np.ndarray:
        return self.cells[self.valid]


def cell_statistics(depth: DepthMap, cell_size: int, rendered=None):
    """Per-cell mean valid depth, mean valid color, center pixel and validity."""
    h, w = depth.shape
    c = cell_size
    nh, nw = -(-h // c), -(-w // c)
    ph, pw = nh * c - h, nw * c - w
    valid = np.pad(depth.valid, ((0, ph), (0, pw)))
    vals = np.pad(depth.values, ((0, ph), (0, pw)))
    count = valid.reshape(nh, c, nw, c).sum(axis=(1, 3))
    dsum = np.where(valid, vals, 0.0).reshape(nh, c, nw, c).sum(axis=(1, 3))
    cell_valid = count > 0
    safe = np.maximum(count, 1)
    mean_depth = np.where(cell_valid, dsum / safe, 0.0)
    if rendered is not None:
        img = np.pad(np.asarray(rendered, dtype=np.float64), ((0, ph), (0, pw), (0, 0)))
        csum = np.where(valid[..., None], img, 0.0).reshape(nh, c, nw, c, 3).sum(axis=(1, 3))
        mean_color = csum / safe[..., None]
    else:
        mean_color = np.zeros((nh, nw, 3))
    uu, vv = np.meshgrid(_cell_centers(w, c), _cell_centers(h, c))
    centers = np.stack([uu, vv], axis=-1)
    return mean_depth, mean_color, centers, cell_valid


def build_transform_field(
    model: AppearanceModel,
    depth: DepthMap,
    camera: Camera,
    view_id: int | None = None,
    cell_size: int = 8,
    rendered=None,
    embedding=None,
) -> TransformField:
    """Decode one matrix per ``cell_size x cell_size`` pixel cell.

    Either ``view_id`` (training views) or an explicit ``embedding`` (held-out
    views being fitted) selects the appearance code.  Cells without a valid
    depth sample get ``[I | 0]`` and take no part in the regularizer.
    """
    if cell_size < 1:
        raise ValueError("cell_size must be >= 1")
    if depth.shape != (camera.height, camera.width):
        raise ValueError("depth map does not match the camera resolution")
    emb = model.embedding(view_id) if embedding is None else np.asarray(embedding, dtype=np.float64)
    mean_depth, mean_color, centers, cell_valid = cell_statistics(depth, cell_size, rendered)
    cells = np.broadcast_to(M_ID, cell_valid.shape + (3, 4)).copy()
    mats, cache = query_matrices(model, camera, centers[cell_valid], mean_depth[cell_valid], mean_color[cell_valid], emb)
    cells[cell_valid] = mats
    return TransformField(cells, cell_valid, cell_size, camera.height, camera.width, cache, emb)


def pixel_matrices(field: TransformField) -> np.ndarray:
    """Bilinearly interpolated ``(H, W, 3, 4)`` matrices."""
    nh, nw = field.grid_shape
    flat = field.cells.reshape(nh, nw, 12)
    m = np.einsum("hi,ijk,wj->hwk", field.row_weights(), flat, field.col_weights(), optimize=True)
    return m.reshape(field.height, field.width, 3, 4)


def transform_image(rendered, field: TransformField) -> tuple[np.ndarray, np.ndarray]:
    """Apply the interpolated per-pixel transforms; returns ``(image, matrices)``."""
    rendered = np.asarray(rendered, dtype=np.float64)
    if rendered.shape[:2] != (field.height, field.width):
        raise ValueError(f"image {rendered.shape[:2]} does not match field {(field.height, field.width)}")
    mats = pixel_matrices(field)
    return apply_affine(rendered, mats), mats


def transform_image_backward(rendered, field: TransformField, grad_image) -> np.ndarray:
    """Gradient w.r.t. the cell matrices ``(nh, nw, 3, 4)`` given dL/d(transformed)."""
    rendered = np.asarray(rendered, dtype=np.float64)
    homog = np.concatenate([rendered, np.ones(rendered.shape[:2] + (1,))], axis=-1)
    g_pix = (grad_image[..., :, None] * homog[..., None, :]).reshape(field.height, field.width, 12)
    g_cells = np.einsum("hi,hwk,wj->ijk", field.row_weights(), g_pix, field.col_weights(), optimize=True)
    nh, nw = field.grid_shape
    return g_cells.reshape(nh, nw, 3, 4)


@dataclass
class ModelGrads:
    grid: list | None  # SparseRows per level, None when the grid is unused
    weights: list
    biases: list
    embedding: np.ndarray


def field_backward(model: AppearanceModel, field: TransformField, grad_cells) -> ModelGrads:
    """Push dL/d(cell matrices) through the decoder into every parameter group."""
    g = np.asarray(grad_cells).reshape(field.grid_shape + (12,))[field.valid]
    cache = field.cache
    w_grads, b_grads, in_grad = mlp_backward(model.mlp, cache.mlp_cache, g)
    lf = model.feature_dim
    grid_grads = None
    if cache.grid_cache is not None:
        grid_grads, _ = model.grids.backward(cache.grid_cache, in_grad[:, :lf])
    return ModelGrads(grid_grads, w_grads, b_grads, in_grad[:, lf:].sum(axis=0))


@dataclass
class FrameLoss:
    terms: object
    transformed: np.ndarray
    field: TransformField
    grads: ModelGrads | None


def frame_loss(
    model: AppearanceModel,
    rendered,
    depth: DepthMap,
    camera: Camera,
    target,
    iteration: int,
    loss_config: LossConfig,
    view_id: int | None = None,
    embedding=None,
    cell_size: int = 8,
    lambda2: float | None = None,
    columns: slice | None = None,
    need_grads: bool = True,
) -> FrameLoss:
    """Total loss of one frame and (optionally) its gradients.

    ``columns`` restricts the photometric terms to a horizontal band of image
    columns (the left-half protocol for held-out views); the regularizer then
    only covers cells whose center falls inside that band.
    """
    field = build_transform_field(model, depth, camera, view_id, cell_size, rendered, embedding)
    transformed, _ = transform_image(rendered, field)
    target = np.asarray(target, dtype=np.float64)
    reg_mask = field.valid
    if columns is not None:
        centers = _cell_centers(camera.width, cell_size)
        lo, hi, _ = columns.indices(camera.width)
        in_band = (centers > lo) & (centers < hi)
        reg_mask = field.valid & in_band[None, :]
        pred, tgt = transformed[:, columns], target[:, columns]
    else:
        pred, tgt = transformed, target
    terms = total_loss(pred, tgt, field.cells[reg_mask], iteration, loss_config, lambda2=lambda2, return_grad=need_grads)
    grads = None
    if need_grads:
        g_img = np.zeros_like(transformed)
        if columns is not None:
            g_img[:, columns] = terms.grad_image
        else:
            g_img = terms.grad_image
        g_cells = transform_image_backward(rendered, field, g_img)
        g_cells[reg_mask] += terms.grad_matrices
        grads = field_backward(model, field, g_cells)
    return FrameLoss(terms, transformed, field, grads)


def fit_test_embedding(
    model: AppearanceModel,
    rendered,
    depth: DepthMap,
    camera: Camera,
    target,
    loss_config: LossConfig | None = None,
    cell_size: int = 8,
    iters: int = 300,
    lr: float = 1e-2,
    lambda2: float | None = None,
    init=None,
    lr_final_ratio: float = 0.1,
) -> np.ndarray:
    """Optimize a fresh embedding on the left half of a held-out view.

    Grids and MLP are read but never written.  Returns the fitted embedding,
    which is then used to transform the full image (metrics use the right half).
    """
    from .training import Adam  # local import: training depends on this module

    if target is None:
        raise ValueError("a held-out view needs a ground-truth image to fit its embedding")
    loss_config = loss_config or LossConfig()
    if lambda2 is None:
        lambda2 = loss_config.lambda2_schedule.final
    emb = np.zeros(model.embedding_dim) if init is None else np.array(init, dtype=np.float64)
    left = slice(0, camera.width // 2)
    opt = Adam(lr=lr)
    state = opt.init_dense(emb.shape)
    for it in range(iters):
        opt.lr = lr * lr_final_ratio ** (it / max(iters - 1, 1))
        fl = frame_loss(
            model, rendered, depth, camera, target, 0, loss_config,
            embedding=emb, cell_size=cell_size, lambda2=lambda2, columns=left,
        )
        emb = opt.dense_step(emb, fl.grads.embedding, state)
    return emb


def identity_field(height: int, width: int, cell_size: int = 8) -> TransformField:
    nh, nw = -(-height // cell_size), -(-width // cell_size)
    cells = np.broadcast_to(M_ID, (nh, nw, 3, 4)).copy()
    return TransformField(cells, np.zeros((nh, nw), dtype=bool), cell_size, height, width)


__all__ = [
    "AppearanceModel",
    "TransformField",
    "ModelGrads",
    "apply_affine",
    "assemble_features",
    "build_transform_field",
    "decode_matrix",
    "field_backward",
    "fit_test_embedding",
    "frame_loss",
    "identity_regularizer",
    "pixel_matrices",
    "query_matrices",
    "transform_image",
    "transform_image_backward",
    "SparseRows",
]
