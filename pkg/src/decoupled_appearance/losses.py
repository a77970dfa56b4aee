"""Photometric losses, the regularized training objective, and evaluation metrics.

Images are ``(H, W, 3)`` float64 arrays.  Losses work on unclamped values so
gradients survive saturation; metrics clamp to [0, 1] first.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
PSNR_CAP = 99.0


@dataclass(frozen=True)
class Lambda2Schedule:
    warmup_iters: int = 5000
    peak: float = 0.3
    final: float = 0.2
    total_iters: int = 30000

    def __post_init__(self):
        if not (self.peak >= self.final >= 0):
            raise ValueError("lambda2 schedule needs peak >= final >= 0")
        if not (0 <= self.warmup_iters <= self.total_iters):
            raise ValueError("warmup_iters must lie in [0, total_iters]")

    def scaled_to(self, total_iters: int) -> "Lambda2Schedule":
        """Same shape with the warmup kept at the same fraction of training."""
        warmup = int(round(self.warmup_iters * total_iters / self.total_iters))
        return Lambda2Schedule(warmup, self.peak, self.final, total_iters)

    def to_dict(self) -> dict:
        return {"warmup_iters": self.warmup_iters, "peak": self.peak, "final": self.final, "total_iters": self.total_iters}


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 0.2
    lambda2_schedule: Lambda2Schedule = field(default_factory=Lambda2Schedule)
    ssim_window: int = 11
    ssim_sigma: float = 1.5

    def __post_init__(self):
        if not 0 <= self.lambda1 <= 1:
            raise ValueError("lambda1 must lie in [0, 1]")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ValueError("ssim_window must be a positive odd number")

    def to_dict(self) -> dict:
        return {
            "lambda1": self.lambda1,
            "lambda2_schedule": self.lambda2_schedule.to_dict(),
            "ssim_window": self.ssim_window,
            "ssim_sigma": self.ssim_sigma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        d = dict(d)
        if "lambda2_schedule" in d:
            d["lambda2_schedule"] = Lambda2Schedule(**d["lambda2_schedule"])
        return cls(**d)


def lambda2_at(iteration: int, schedule: Lambda2Schedule) -> float:
    """Linear warmup from 0 to ``peak``, then cosine decay to ``final`` at ``total_iters``."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    s = schedule
    if iteration < s.warmup_iters:
        return s.peak * iteration / s.warmup_iters
    span = s.total_iters - s.warmup_iters
    t = 1.0 if span == 0 else min((iteration - s.warmup_iters) / span, 1.0)
    return s.final + (s.peak - s.final) * (1.0 + math.cos(math.pi * t)) / 2.0


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")


def l1_loss(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    return float(np.mean(np.abs(a - b)))


def l1_grad(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Gradient of :func:`l1_loss` with respect to ``a`` (sign(0) = 0)."""
    return np.sign(a - b) / a.size


def _reflect(index: np.ndarray, n: int) -> np.ndarray:
    # half-sample symmetric: d c b a | a b c d | d c b a
    period = 2 * n
    j = np.mod(index, period)
    return np.where(j >= n, period - 1 - j, j)


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


@lru_cache(maxsize=64)
def _filter_matrix(n: int, size: int, sigma: float) -> np.ndarray:
    """Dense ``(n, n)`` matrix of a 1D Gaussian correlation with reflect padding."""
    g = gaussian_window(size, sigma)
    half = size // 2
    k = np.zeros((n, n))
    rows = np.arange(n)
    for off, weight in zip(range(-half, half + 1), g):
        np.add.at(k, (rows, _reflect(rows + off, n)), weight)
    k.setflags(write=False)
    return k


def _blur(x: np.ndarray, kh: np.ndarray, kw: np.ndarray) -> np.ndarray:
    return np.einsum("ij,jkc,lk->ilc", kh, x, kw, optimize=True)


def _blur_adjoint(x: np.ndarray, kh: np.ndarray, kw: np.ndarray) -> np.ndarray:
    return np.einsum("ji,jkc,kl->ilc", kh, x, kw, optimize=True)


def _as_hwc(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[:, :, None] if x.ndim == 2 else x


def ssim(a, b, window: int = 11, sigma: float = 1.5, return_grad: bool = False):
    """Mean SSIM over pixels and channels; optionally the gradient w.r.t. ``a``."""
    a = _as_hwc(a)
    b = _as_hwc(b)
    _check_pair(a, b)
    h, w, _ = a.shape
    kh = _filter_matrix(h, window, sigma)
    kw = _filter_matrix(w, window, sigma)
    mu_a = _blur(a, kh, kw)
    mu_b = _blur(b, kh, kw)
    e_aa = _blur(a * a, kh, kw)
    e_bb = _blur(b * b, kh, kw)
    e_ab = _blur(a * b, kh, kw)
    n1 = 2.0 * mu_a * mu_b + SSIM_C1
    n2 = 2.0 * (e_ab - mu_a * mu_b) + SSIM_C2
    d1 = mu_a**2 + mu_b**2 + SSIM_C1
    d2 = (e_aa - mu_a**2) + (e_bb - mu_b**2) + SSIM_C2
    smap = (n1 * n2) / (d1 * d2)
    value = float(smap.mean())
    if not return_grad:
        return value
    scale = 1.0 / smap.size
    dd = d1 * d2
    g_mu = (2.0 * mu_b * n2 - 2.0 * mu_b * n1) / dd - smap * (2.0 * mu_a / d1 - 2.0 * mu_a / d2)
    g_eab = 2.0 * n1 / dd
    g_eaa = -smap / d2
    grad = (
        _blur_adjoint(g_mu * scale, kh, kw)
        + 2.0 * a * _blur_adjoint(g_eaa * scale, kh, kw)
        + b * _blur_adjoint(g_eab * scale, kh, kw)
    )
    return value, grad


def d_ssim(a, b, window: int = 11, sigma: float = 1.5) -> float:
    return (1.0 - ssim(a, b, window, sigma)) / 2.0


M_ID = np.hstack([np.eye(3), np.zeros((3, 1))])


def identity_regularizer(matrices, return_grad: bool = False):
    """Mean absolute deviation of ``(K, 3, 4)`` matrices from ``[I | 0]``."""
    m = np.asarray(matrices, dtype=np.float64).reshape(-1, 3, 4)
    if m.shape[0] == 0:
        raise ValueError("identity_regularizer needs at least one matrix")
    diff = m - M_ID
    value = float(np.mean(np.abs(diff)))
    if return_grad:
        return value, np.sign(diff) / diff.size
    return value


@dataclass
class LossTerms:
    total: float
    l1: float
    dssim: float
    lid: float
    lambda2: float
    grad_image: np.ndarray | None = None
    grad_matrices: np.ndarray | None = None


def total_loss(
    transformed,
    target,
    matrices,
    iteration: int,
    config: LossConfig,
    lambda2: float | None = None,
    return_grad: bool = True,
) -> LossTerms:
    """``(1 - l1w) * L1 + l1w * D-SSIM + lambda2 * L_ID``.

    ``matrices`` may be empty (``(0, 3, 4)``), in which case the regularizer is
    zero; passing ``lambda2=0`` and the raw render as ``transformed`` gives the
    plain photometric loss used without an appearance model.
    """
    a = np.asarray(transformed, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    _check_pair(a, b)
    lam1 = config.lambda1
    lam2 = lambda2_at(iteration, config.lambda2_schedule) if lambda2 is None else float(lambda2)
    l1 = l1_loss(a, b)
    s_val, s_grad = ssim(a, b, config.ssim_window, config.ssim_sigma, return_grad=True)
    dssim = (1.0 - s_val) / 2.0
    m = np.asarray(matrices, dtype=np.float64).reshape(-1, 3, 4)
    if m.shape[0]:
        lid, lid_grad = identity_regularizer(m, return_grad=True)
    else:
        lid, lid_grad = 0.0, np.zeros_like(m)
    total = (1.0 - lam1) * l1 + lam1 * dssim + lam2 * lid
    terms = LossTerms(total, l1, dssim, lid, lam2)
    if return_grad:
        terms.grad_image = (1.0 - lam1) * l1_grad(a, b) - lam1 * 0.5 * s_grad
        terms.grad_matrices = lam2 * lid_grad
    return terms


def psnr(a, b) -> float:
    """PSNR in dB of clamped images, capped at 99 dB."""
    a = np.clip(np.asarray(a, dtype=np.float64), 0.0, 1.0)
    b = np.clip(np.asarray(b, dtype=np.float64), 0.0, 1.0)
    _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim_metric(a, b, window: int = 11, sigma: float = 1.5) -> float:
    return ssim(np.clip(a, 0.0, 1.0), np.clip(b, 0.0, 1.0), window, sigma)


def color_correct(rendered, reference) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares affine color map from ``rendered`` to ``reference``.

    Solves the normal equations for a 3x4 matrix acting on ``[r, g, b, 1]``
    over all pixels of the clamped render.  A rank-deficient system (e.g. a
    flat image) falls back to a per-channel bias.

    Returns:
        ``(corrected_image_clamped, matrix)``.
    """
    x = np.clip(np.asarray(rendered, dtype=np.float64), 0.0, 1.0)
    y = np.asarray(reference, dtype=np.float64)
    _check_pair(x, y)
    xs = x.reshape(-1, 3)
    ys = y.reshape(-1, 3)
    xh = np.hstack([xs, np.ones((xs.shape[0], 1))])
    gram = xh.T @ xh
    if np.linalg.matrix_rank(gram) < 4:
        matrix = M_ID.copy()
        matrix[:, 3] = (ys - xs).mean(axis=0)
    else:
        matrix = np.linalg.solve(gram, xh.T @ ys).T
    corrected = np.clip(xh @ matrix.T, 0.0, 1.0).reshape(x.shape)
    return corrected, matrix


def evaluate_pair(prediction, target) -> dict:
    """Raw and color-corrected PSNR/SSIM of ``prediction`` against ``target``."""
    corrected, _ = color_correct(prediction, target)
    return {
        "psnr": psnr(prediction, target),
        "ssim": ssim_metric(prediction, target),
        "psnr_cc": psnr(corrected, target),
        "ssim_cc": ssim_metric(corrected, target),
    }


METRIC_COLUMNS = ("view_id", "psnr", "ssim", "psnr_cc", "ssim_cc")


def write_metrics_csv(path, rows) -> None:
    """Write metric rows (dicts keyed by :data:`METRIC_COLUMNS`) with 4 decimals."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow([row["view_id"]] + [f"{row[k]:.4f}" for k in METRIC_COLUMNS[1:]])
