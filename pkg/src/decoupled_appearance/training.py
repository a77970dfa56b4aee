"""Optimizer, training loop and binary checkpoints for :class:`AppearanceModel`."""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .appearance import AppearanceModel, frame_loss
from .encoding import AblationEncoding, HashGridConfig, HashGridStack, SparseRows
from .geometry import Camera, DepthMap
from .losses import LossConfig
from .network import MlpParams

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DAPPCKPT"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class Adam:
    """Bias-corrected Adam with a lazy (row-sparse) variant for lookup tables.

    The sparse step only advances the moments of rows that received a nonzero
    gradient; bias correction uses the per-parameter step counter, as in the
    usual sparse Adam.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15

    def init_dense(self, shape) -> AdamState:
        return AdamState(np.zeros(shape), np.zeros(shape))

    def _check(self, grad: np.ndarray, name: str) -> None:
        if not np.all(np.isfinite(grad)):
            bad = int(np.count_nonzero(~np.isfinite(grad)))
            raise FloatingPointError(f"non-finite gradient in {name}: {bad} of {grad.size} entries")

    def dense_step(self, param: np.ndarray, grad: np.ndarray, state: AdamState, name: str = "param") -> np.ndarray:
        self._check(grad, name)
        state.step += 1
        state.m *= self.beta1
        state.m += (1.0 - self.beta1) * grad
        state.v *= self.beta2
        state.v += (1.0 - self.beta2) * grad * grad
        m_hat = state.m / (1.0 - self.beta1**state.step)
        v_hat = state.v / (1.0 - self.beta2**state.step)
        param -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return param

    def sparse_step(self, table: np.ndarray, grad: SparseRows, state: AdamState, name: str = "table") -> np.ndarray:
        self._check(grad.values, name)
        state.step += 1
        nonzero = np.any(grad.values != 0.0, axis=1)
        rows = grad.rows[nonzero]
        g = grad.values[nonzero]
        if rows.size == 0:
            return table
        m = self.beta1 * state.m[rows] + (1.0 - self.beta1) * g
        v = self.beta2 * state.v[rows] + (1.0 - self.beta2) * g * g
        state.m[rows] = m
        state.v[rows] = v
        m_hat = m / (1.0 - self.beta1**state.step)
        v_hat = v / (1.0 - self.beta2**state.step)
        table[rows] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return table


@dataclass(frozen=True)
class TrainConfig:
    total_iters: int = 2000
    lr_grids: float = 1e-2
    lr_mlp: float = 1e-3
    lr_embeddings: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    seed: int = 0
    cell_size: int = 8
    loss: LossConfig = field(default_factory=LossConfig)
    lambda2_override: float | None = None
    lr_final_ratio: float = 0.1

    def __post_init__(self):
        if self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")
        if min(self.lr_grids, self.lr_mlp, self.lr_embeddings) <= 0:
            raise ValueError("learning rates must be positive")
        if self.cell_size < 1:
            raise ValueError("cell_size must be >= 1")
        if not 0 < self.lr_final_ratio <= 1:
            raise ValueError("lr_final_ratio must lie in (0, 1]")
        sched = self.loss.lambda2_schedule
        if sched.total_iters != self.total_iters:
            # keep the warmup at the same fraction of a shorter (or longer) run
            object.__setattr__(self, "loss", replace(self.loss, lambda2_schedule=sched.scaled_to(self.total_iters)))

    def to_dict(self) -> dict:
        return {
            "total_iters": self.total_iters,
            "lr_grids": self.lr_grids,
            "lr_mlp": self.lr_mlp,
            "lr_embeddings": self.lr_embeddings,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "seed": self.seed,
            "cell_size": self.cell_size,
            "loss": self.loss.to_dict(),
            "lambda2_override": self.lambda2_override,
            "lr_final_ratio": self.lr_final_ratio,
        }

    def lr_scale(self, iteration: int) -> float:
        """Exponential decay from 1 to ``lr_final_ratio`` over the run."""
        return self.lr_final_ratio ** (iteration / max(self.total_iters - 1, 1))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss" in d:
            d["loss"] = LossConfig.from_dict(d["loss"])
        return cls(**d)


@dataclass
class FrameBundle:
    view_id: int
    rendered: np.ndarray  # (H, W, 3)
    depth: DepthMap
    camera: Camera
    ground_truth: np.ndarray | None  # (H, W, 3)
    split: str = "train"

    def __post_init__(self):
        shape = (self.camera.height, self.camera.width)
        if self.rendered.shape[:2] != shape or self.depth.shape != shape:
            raise ValueError(f"frame {self.view_id}: raster sizes disagree with the camera {shape}")
        if self.ground_truth is not None and self.ground_truth.shape != self.rendered.shape:
            raise ValueError(f"frame {self.view_id}: ground truth shape differs from the render")


@dataclass
class TrainState:
    """Optimizer moments and the next iteration index, enough to resume exactly."""

    iteration: int
    grids: list
    weights: list
    biases: list
    embeddings: AdamState

    @classmethod
    def fresh(cls, model: AppearanceModel) -> "TrainState":
        zeros = lambda a: AdamState(np.zeros_like(a), np.zeros_like(a))  # noqa: E731
        return cls(
            0,
            [zeros(t) for t in model.grids.tables],
            [zeros(w) for w in model.mlp.weights],
            [zeros(b) for b in model.mlp.biases],
            zeros(model.embeddings),
        )


LOG_COLUMNS = ("iter", "l1", "dssim", "lid", "lambda2", "total")


@dataclass
class TrainResult:
    model: AppearanceModel
    log: list
    state: TrainState


def frame_order(num_frames: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).permutation(num_frames)


def train(
    model: AppearanceModel,
    frames: list,
    config: TrainConfig,
    state: TrainState | None = None,
    log_path=None,
    stop_at: int | None = None,
) -> TrainResult:
    """Optimize ``model`` in place on ``frames`` (one frame per iteration).

    Frames are visited round-robin in a seed-shuffled order.  Passing the
    ``state`` of an earlier run resumes from its iteration counter with the
    same frame order and lambda2 schedule.  ``stop_at`` ends the run early
    (exclusive iteration index) without changing the schedule.
    """
    if not frames:
        raise ValueError("no training frames")
    for fr in frames:
        model.embedding(fr.view_id)
        if fr.ground_truth is None:
            raise ValueError(f"training frame {fr.view_id} has no ground truth")
    state = state or TrainState.fresh(model)
    order = frame_order(len(frames), config.seed)
    opt_grid = Adam(config.lr_grids, config.beta1, config.beta2, config.eps)
    opt_mlp = Adam(config.lr_mlp, config.beta1, config.beta2, config.eps)
    opt_emb = Adam(config.lr_embeddings, config.beta1, config.beta2, config.eps)
    log = []
    initial = None
    above = 0
    end = config.total_iters if stop_at is None else min(stop_at, config.total_iters)
    for it in range(state.iteration, end):
        fr = frames[order[it % len(frames)]]
        scale = config.lr_scale(it)
        opt_grid.lr = config.lr_grids * scale
        opt_mlp.lr = config.lr_mlp * scale
        opt_emb.lr = config.lr_embeddings * scale
        fl = frame_loss(
            model, fr.rendered, fr.depth, fr.camera, fr.ground_truth, it, config.loss,
            view_id=fr.view_id, cell_size=config.cell_size, lambda2=config.lambda2_override,
        )
        t = fl.terms
        log.append((it, t.l1, t.dssim, t.lid, t.lambda2, t.total))
        if initial is None:
            initial = t.total
        above = above + 1 if t.total > 10.0 * initial else 0
        if above >= 100 or not np.isfinite(t.total):
            raise TrainingDiverged(f"loss {t.total:.4g} exceeded 10x the initial {initial:.4g} at iteration {it}")
        g = fl.grads
        if g.grid is not None:
            for level, grad in enumerate(g.grid):
                opt_grid.sparse_step(model.grids.tables[level], grad, state.grids[level], f"grid level {level}")
        for i in range(len(model.mlp.weights)):
            opt_mlp.dense_step(model.mlp.weights[i], g.weights[i], state.weights[i], f"mlp weight {i}")
            opt_mlp.dense_step(model.mlp.biases[i], g.biases[i], state.biases[i], f"mlp bias {i}")
        emb_grad = SparseRows(np.array([fr.view_id]), g.embedding[None, :])
        opt_emb.sparse_step(model.embeddings, emb_grad, state.embeddings, "embeddings")
        state.iteration = it + 1
        if it % 500 == 0:
            logger.info("iter %d total %.5f l1 %.5f lid %.5f", it, t.total, t.l1, t.lid)
    if log_path is not None:
        write_loss_log(log_path, log, append=state.iteration > len(log))
    return TrainResult(model, log, state)


def write_loss_log(path, rows, append: bool = False) -> None:
    path = Path(path)
    mode = "a" if append and path.exists() else "w"
    with open(path, mode, newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if mode == "w":
            writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow([row[0]] + [f"{v:.10g}" for v in row[1:]])


def read_loss_log(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [{k: (int(v) if k == "iter" else float(v)) for k, v in row.items()} for row in reader]


# ---------------------------------------------------------------- checkpoints


def _model_blocks(model: AppearanceModel) -> list:
    blocks = [(f"grid/{i}", t) for i, t in enumerate(model.grids.tables)]
    blocks += [(f"mlp/w{i}", w) for i, w in enumerate(model.mlp.weights)]
    blocks += [(f"mlp/b{i}", b) for i, b in enumerate(model.mlp.biases)]
    blocks.append(("embeddings", model.embeddings))
    return blocks


def _state_blocks(state: TrainState) -> list:
    blocks = []
    groups = [("grid", state.grids), ("w", state.weights), ("b", state.biases), ("emb", [state.embeddings])]
    for name, items in groups:
        for i, s in enumerate(items):
            blocks.append((f"adam/{name}{i}/m", s.m))
            blocks.append((f"adam/{name}{i}/v", s.v))
    return blocks


def _state_steps(state: TrainState) -> dict:
    return {
        "grid": [s.step for s in state.grids],
        "w": [s.step for s in state.weights],
        "b": [s.step for s in state.biases],
        "emb": [state.embeddings.step],
    }


def save_checkpoint(model: AppearanceModel, path, state: TrainState | None = None, extra: dict | None = None) -> None:
    """Write a JSON header followed by little-endian float64 parameter blocks.

    Layout: 8-byte magic, uint32 version, uint64 header length, UTF-8 JSON
    header, then the raw blocks in header order.
    """
    blocks = _model_blocks(model)
    header = {
        "version": CHECKPOINT_VERSION,
        "grid_config": model.grids.config.to_dict(),
        "encoding": {"kind": model.encoding.kind, "pe_frequencies": model.encoding.pe_frequencies},
        "activation": model.mlp.activation,
        "depth_range": list(model.depth_range),
        "extra": extra or {},
    }
    if state is not None:
        blocks += _state_blocks(state)
        header["train_state"] = {"iteration": state.iteration, "steps": _state_steps(state)}
    header["blocks"] = [{"name": n, "shape": list(a.shape)} for n, a in blocks]
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        for _, arr in blocks:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path, with_state: bool = False):
    """Inverse of :func:`save_checkpoint`.

    Returns the model, or ``(model, state_or_None, extra)`` with ``with_state``.
    """
    data = Path(path).read_bytes()
    fixed = len(CHECKPOINT_MAGIC) + struct.calcsize("<IQ")
    if len(data) < fixed or data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, head_len = struct.unpack("<IQ", data[len(CHECKPOINT_MAGIC) : fixed])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if len(data) < fixed + head_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[fixed : fixed + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    offset = fixed + head_len
    arrays = {}
    for spec in header["blocks"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        end = offset + 8 * count
        if end > len(data):
            raise CheckpointError(f"{path}: truncated at block {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(spec["shape"]).astype(np.float64)
        offset = end
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")

    cfg = HashGridConfig.from_dict(header["grid_config"])
    tables = [arrays[f"grid/{i}"] for i in range(cfg.levels)]
    n_layers = sum(1 for k in arrays if k.startswith("mlp/w"))
    mlp = MlpParams(
        [arrays[f"mlp/w{i}"] for i in range(n_layers)],
        [arrays[f"mlp/b{i}"] for i in range(n_layers)],
        header["activation"],
    )
    model = AppearanceModel(
        HashGridStack(cfg, tables),
        mlp,
        arrays["embeddings"],
        AblationEncoding(**header["encoding"]),
        tuple(header["depth_range"]),
    )
    if not with_state:
        return model
    state = None
    if "train_state" in header:
        steps = header["train_state"]["steps"]

        def group(name, n):
            return [
                AdamState(arrays[f"adam/{name}{i}/m"], arrays[f"adam/{name}{i}/v"], steps[name][i]) for i in range(n)
            ]

        state = TrainState(
            header["train_state"]["iteration"],
            group("grid", cfg.levels),
            group("w", n_layers),
            group("b", n_layers),
            group("emb", 1)[0],
        )
    return model, state, header.get("extra", {})
