"""Command-line front end: ``generate``, ``train``, ``eval`` and ``ablate``.

Every command takes an optional ``--config`` file (TOML or JSON) whose
sections mirror :data:`DEFAULTS`; flags override the file, unknown keys are
rejected, and the fully resolved config is written next to the outputs as
``config.json``.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .appearance import AppearanceModel, build_transform_field, fit_test_embedding, frame_loss, transform_image
from .encoding import ENCODING_KINDS, AblationEncoding, ConfigError, HashGridConfig
from .imageio import write_pfm, write_png
from .losses import Lambda2Schedule, LossConfig, evaluate_pair, write_metrics_csv
from .synthdata import (
    Dataset,
    LocalLight,
    VariationSpec,
    default_scene,
    generate_dataset,
    load_dataset,
    orbit_cameras,
    save_dataset,
)
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

logger = logging.getLogger("decoupled_appearance")

DEFAULTS = {
    "scene": {"seed": 0, "spheres": 3},
    "cameras": {
        "views": 8,
        "width": 128,
        "height": 128,
        "radius": 3.2,
        "height_offset": 0.4,
        "arc_degrees": 60.0,
        "focal_scale": 1.1,
    },
    # kind "global" draws a random per-view affine, "none" keeps the identity;
    # lights are applied on top in either case
    "variation": {
        "kind": "global",
        "seed": 1,
        "gain": 0.3,
        "bias": 0.1,
        "mix": 0.0,
        "per_channel_bias": False,
        "lights": [],
    },
    "split": {"test_views": []},  # empty: every fourth view starting at 1
    "grid": {
        "levels": 16,
        "features_per_level": 2,
        "table_size": 2**19,
        "base_resolution": 16,
        "finest_resolution": 512,
    },
    "model": {"embedding_dim": 32, "encoding": "xyz", "pe_frequencies": 5, "seed": 0, "appearance": True},
    "train": {
        "iters": 2000,
        "lr_grids": 1e-2,
        "lr_mlp": 1e-3,
        "lr_embeddings": 1e-3,
        "lr_final_ratio": 0.1,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-15,
        "seed": 0,
        "cell_size": 8,
    },
    "loss": {
        "lambda1": 0.2,
        "identity_regularizer": True,
        "warmup_iters": 5000,
        "peak": 0.3,
        "final": 0.2,
        "schedule_iters": 30000,
    },
    "eval": {"fit_iters": 600, "fit_lr": 0.1, "fit_lr_final_ratio": 0.1},
    "ablate": {
        "mode": "one_factor",  # or "full" for the whole product
        "encodings": list(ENCODING_KINDS),
        "identity_regularizer": [True, False],
        "cell_sizes": [1, 2, 4, 8, 16, 32],
    },
    "runtime": {"threads": 1},
}

SECTIONS_BY_COMMAND = {
    "generate": ("scene", "cameras", "variation", "split", "runtime"),
    "train": ("grid", "model", "train", "loss", "runtime"),
    "eval": ("grid", "model", "train", "loss", "eval", "runtime"),
    "ablate": ("grid", "model", "train", "loss", "eval", "ablate", "runtime"),
}

ABLATION_COLUMNS = ("name", "encoding", "identity_regularizer", "cell_size", "psnr", "ssim", "psnr_cc", "ssim_cc")


class CliError(Exception):
    """User-facing failure; reported as one line on stderr with exit code 1."""


# ---------------------------------------------------------------- config


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        name = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {name!r}")
        default = base[key]
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {name!r} must be a table")
            out[key] = _merge(default, value, name + ".")
            continue
        if isinstance(default, bool) != isinstance(value, bool):
            raise ConfigError(f"config key {name!r} must be a boolean")
        if isinstance(default, float) and isinstance(value, int):
            value = float(value)
        if not isinstance(value, type(default)):
            raise ConfigError(f"config key {name!r} expects {type(default).__name__}, got {type(value).__name__}")
        out[key] = value
    return out


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"config file not found: {path}")
    raw = path.read_bytes()
    try:
        if path.suffix.lower() == ".toml":
            return tomllib.loads(raw.decode("utf-8"))
        return json.loads(raw)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CliError(f"cannot parse {path}: {exc}") from exc


def resolve_config(command: str, file_config: dict | None = None, base: dict | None = None, flags=None) -> dict:
    """Defaults, then ``base`` (e.g. a checkpoint's config), then the file, then flags."""
    sections = SECTIONS_BY_COMMAND[command]
    cfg = {k: copy.deepcopy(DEFAULTS[k]) for k in sections}
    for layer in (base or {}, file_config or {}):
        layer = {k: v for k, v in layer.items() if k in sections or k not in DEFAULTS}
        cfg = _merge(cfg, layer)
    if flags is not None:
        cfg = _merge(cfg, _flag_overrides(command, flags))
    validate_config(cfg)
    return cfg


def _flag_overrides(command: str, flags) -> dict:
    out: dict = {}

    def put(section, key, value):
        if section in SECTIONS_BY_COMMAND[command]:
            out.setdefault(section, {})[key] = value

    if flags.seed is not None:
        for section in ("scene", "variation", "model", "train"):
            put(section, "seed", flags.seed)
    if flags.threads is not None:
        put("runtime", "threads", flags.threads)
    if getattr(flags, "cell_size", None) is not None:
        put("train", "cell_size", flags.cell_size)
    if getattr(flags, "encoding", None) is not None:
        put("model", "encoding", flags.encoding)
    if getattr(flags, "iters", None) is not None:
        put("train", "iters", flags.iters)
    if getattr(flags, "no_appearance", False):
        put("model", "appearance", False)
    return out


def validate_config(cfg: dict) -> None:
    if cfg.get("runtime", {}).get("threads", 1) < 1:
        raise ConfigError("runtime.threads must be >= 1")
    if "model" in cfg and cfg["model"]["encoding"] not in ENCODING_KINDS:
        raise ConfigError(f"model.encoding must be one of {ENCODING_KINDS}")
    if "variation" in cfg:
        if cfg["variation"]["kind"] not in ("global", "none"):
            raise ConfigError("variation.kind must be 'global' or 'none'")
        for light in cfg["variation"]["lights"]:
            if not isinstance(light, dict) or set(light) != {"center", "radius", "gain"}:
                raise ConfigError("each variation light needs exactly center, radius and gain")
    if "ablate" in cfg:
        if cfg["ablate"]["mode"] not in ("one_factor", "full"):
            raise ConfigError("ablate.mode must be 'one_factor' or 'full'")
        bad = set(cfg["ablate"]["encodings"]) - set(ENCODING_KINDS)
        if bad:
            raise ConfigError(f"unknown ablation encodings {sorted(bad)}")
    if "cameras" in cfg and cfg["cameras"]["views"] < 2:
        raise ConfigError("cameras.views must be >= 2")


def write_resolved_config(cfg: dict, out_dir: Path) -> None:
    (out_dir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- builders


def build_dataset(cfg: dict) -> Dataset:
    cams_cfg = cfg["cameras"]
    n = cams_cfg["views"]
    cameras = orbit_cameras(
        n, cams_cfg["width"], cams_cfg["height"], cams_cfg["radius"], cams_cfg["height_offset"],
        cams_cfg["arc_degrees"], focal_scale=cams_cfg["focal_scale"],
    )
    scene = default_scene(cfg["scene"]["seed"], cfg["scene"]["spheres"])
    v = cfg["variation"]
    if v["kind"] == "global":
        variation = VariationSpec.random_global(n, v["seed"], v["gain"], v["bias"], v["mix"], v["per_channel_bias"])
    else:
        variation = VariationSpec.none(n)
        variation.seed = v["seed"]
    variation.local_lights = [LocalLight(l["center"], float(l["radius"]), l["gain"]) for l in v["lights"]]
    test_views = cfg["split"]["test_views"] or None
    return generate_dataset(scene, cameras, variation, test_views)


def grid_config(cfg: dict, dataset: Dataset) -> HashGridConfig:
    g = cfg["grid"]
    return HashGridConfig.with_finest(
        g["finest_resolution"], levels=g["levels"], base_resolution=g["base_resolution"],
        features_per_level=g["features_per_level"], table_size=g["table_size"],
        domain_min=tuple(dataset.domain_min), domain_max=tuple(dataset.domain_max),
    )


def build_model(cfg: dict, dataset: Dataset) -> AppearanceModel:
    m = cfg["model"]
    return AppearanceModel.create(
        dataset.num_views, grid_config(cfg, dataset), embedding_dim=m["embedding_dim"],
        encoding=AblationEncoding(m["encoding"], m["pe_frequencies"]), seed=m["seed"],
        depth_range=dataset.depth_range,
    )


def build_train_config(cfg: dict) -> TrainConfig:
    t, lo = cfg["train"], cfg["loss"]
    schedule = Lambda2Schedule(lo["warmup_iters"], lo["peak"], lo["final"], lo["schedule_iters"])
    return TrainConfig(
        total_iters=t["iters"], lr_grids=t["lr_grids"], lr_mlp=t["lr_mlp"], lr_embeddings=t["lr_embeddings"],
        beta1=t["beta1"], beta2=t["beta2"], eps=t["eps"], seed=t["seed"], cell_size=t["cell_size"],
        loss=LossConfig(lambda1=lo["lambda1"], lambda2_schedule=schedule),
        lambda2_override=None if lo["identity_regularizer"] else 0.0,
        lr_final_ratio=t["lr_final_ratio"],
    )


# ---------------------------------------------------------------- shared pipeline


def evaluate_dataset(model: AppearanceModel | None, dataset: Dataset, cfg: dict) -> list:
    """Left-half embedding fit and right-half metrics for every test view.

    Returns ``(metrics_row, transformed_image, fit_loss)`` per view; without a
    model the raw render is passed through untouched.
    """
    frames = [f for f in dataset.test_frames if f.ground_truth is not None]
    if not frames:
        raise CliError("dataset has no test views with ground truth")
    tc = build_train_config(cfg)
    e = cfg["eval"]
    lambda2 = tc.lambda2_override if tc.lambda2_override is not None else tc.loss.lambda2_schedule.final
    results = []
    for f in frames:
        fit_loss = float("nan")
        if model is None:
            out = f.rendered.copy()
        else:
            emb = fit_test_embedding(
                model, f.rendered, f.depth, f.camera, f.ground_truth, tc.loss, tc.cell_size,
                iters=e["fit_iters"], lr=e["fit_lr"], lambda2=lambda2, lr_final_ratio=e["fit_lr_final_ratio"],
            )
            left = slice(0, f.camera.width // 2)
            fl = frame_loss(model, f.rendered, f.depth, f.camera, f.ground_truth, 0, tc.loss, embedding=emb,
                            cell_size=tc.cell_size, lambda2=lambda2, columns=left, need_grads=False)
            fit_loss = fl.terms.total
            field = build_transform_field(model, f.depth, f.camera, cell_size=tc.cell_size, rendered=f.rendered,
                                          embedding=emb)
            out, _ = transform_image(f.rendered, field)
        half = f.camera.width // 2
        row = {"view_id": f.view_id, **evaluate_pair(out[:, half:], f.ground_truth[:, half:])}
        results.append((row, out, fit_loss))
    return results


def run_experiment(dataset: Dataset, cfg: dict):
    """Train a fresh model under ``cfg`` and evaluate it; returns ``(model, results)``."""
    model = build_model(cfg, dataset)
    train(model, dataset.train_frames, build_train_config(cfg))
    return model, evaluate_dataset(model, dataset, cfg)


def mean_metrics(results: list) -> dict:
    keys = ("psnr", "ssim", "psnr_cc", "ssim_cc")
    return {k: float(np.mean([r[0][k] for r in results])) for k in keys}


def ablation_grid(cfg: dict) -> list:
    """``(name, encoding, identity_regularizer, cell_size)`` rows to run."""
    a = cfg["ablate"]
    ref_enc = cfg["model"]["encoding"]
    ref_lid = cfg["loss"]["identity_regularizer"]
    ref_c = cfg["train"]["cell_size"]
    if a["mode"] == "full":
        return [
            (f"{enc}/lid={'on' if lid else 'off'}/c={c}", enc, lid, c)
            for enc in a["encodings"] for lid in a["identity_regularizer"] for c in a["cell_sizes"]
        ]
    rows = [("reference", ref_enc, ref_lid, ref_c)]
    rows += [(f"encoding={enc}", enc, ref_lid, ref_c) for enc in a["encodings"] if enc != ref_enc]
    rows += [(f"lid={'on' if lid else 'off'}", ref_enc, lid, ref_c) for lid in a["identity_regularizer"] if lid != ref_lid]
    rows += [(f"cell_size={c}", ref_enc, ref_lid, c) for c in a["cell_sizes"] if c != ref_c]
    return rows


def _write_csv(path: Path, columns, rows) -> None:
    lines = [",".join(columns)]
    for row in rows:
        cells = []
        for col in columns:
            v = row[col]
            cells.append(f"{v:.4f}" if isinstance(v, float) else str(v).lower() if isinstance(v, bool) else str(v))
        lines.append(",".join(cells))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------- commands


def _prepare_out_dir(out_dir, inputs=()) -> Path:
    out = Path(out_dir)
    for src in inputs:
        if src is not None and out.resolve() == Path(src).resolve():
            raise CliError(f"output directory {out} is an input directory; refusing to modify inputs")
    if out.exists() and not out.is_dir():
        raise CliError(f"output path {out} exists and is not a directory")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc.strerror}") from exc
    return out


def _load_dataset(path) -> Dataset:
    try:
        return load_dataset(path)
    except FileNotFoundError as exc:
        raise CliError(f"dataset not found: {exc}") from exc


def cmd_generate(cfg: dict, out_dir) -> Path:
    dataset = build_dataset(cfg)
    out = _prepare_out_dir(out_dir)
    write_resolved_config(cfg, out)
    manifest = save_dataset(dataset, out)
    logger.info("wrote %d views to %s (hash %s)", dataset.num_views, out, dataset.content_hash()[:12])
    return manifest


def cmd_train(cfg: dict, dataset_dir, out_dir, resume=None, stop_at=None) -> Path:
    if not cfg["model"]["appearance"]:
        raise CliError("--no-appearance has nothing to train; use it with eval")
    dataset = _load_dataset(dataset_dir)
    tc = build_train_config(cfg)
    state = None
    if resume is not None:
        model, state, _ = load_checkpoint(resume, with_state=True)
        if state is None:
            raise CliError(f"{resume} holds no optimizer state to resume from")
        if model.num_views != dataset.num_views:
            raise CliError("checkpoint and dataset disagree on the number of views")
    else:
        model = build_model(cfg, dataset)
    out = _prepare_out_dir(out_dir, [dataset_dir])
    write_resolved_config(cfg, out)
    log_path = out / "loss.csv"
    if resume is None and log_path.exists():
        log_path.unlink()
    res = train(model, dataset.train_frames, tc, state=state, log_path=log_path, stop_at=stop_at)
    ckpt = out / "checkpoint.bin"
    save_checkpoint(model, ckpt, state=res.state, extra={"config": cfg, "dataset_hash": dataset.content_hash()})
    return ckpt


def cmd_eval(cfg: dict, checkpoint, dataset_dir, out_dir) -> Path:
    dataset = _load_dataset(dataset_dir)
    model = None
    if cfg["model"]["appearance"]:
        if checkpoint is None:
            raise CliError("eval needs --checkpoint unless --no-appearance is given")
        model = load_checkpoint(checkpoint)
        if model.num_views != dataset.num_views:
            raise CliError("checkpoint and dataset disagree on the number of views")
    out = _prepare_out_dir(out_dir, [dataset_dir])
    write_resolved_config(cfg, out)
    results = evaluate_dataset(model, dataset, cfg)
    images = out / "images"
    images.mkdir(exist_ok=True)
    for (row, img, _), f in zip(results, [f for f in dataset.test_frames if f.ground_truth is not None]):
        stem = f"view_{row['view_id']:03d}"
        write_pfm(images / f"{stem}_transformed.pfm", img)
        write_png(images / f"{stem}_transformed.png", img)
        write_pfm(images / f"{stem}_rendered.pfm", f.rendered)
        write_png(images / f"{stem}_rendered.png", f.rendered)
    fit_rows = [{"view_id": r[0]["view_id"], "left_half_loss": r[2]} for r in results]
    _write_csv(out / "fit_loss.csv", ("view_id", "left_half_loss"), fit_rows)
    path = out / "metrics.csv"
    write_metrics_csv(path, [r[0] for r in results])
    return path


def cmd_ablate(cfg: dict, dataset_dir, out_dir) -> Path:
    dataset = _load_dataset(dataset_dir)
    if not cfg["model"]["appearance"]:
        raise CliError("--no-appearance cannot be combined with ablate")
    out = _prepare_out_dir(out_dir, [dataset_dir])
    write_resolved_config(cfg, out)
    rows = []
    for name, enc, lid, c in ablation_grid(cfg):
        run_cfg = copy.deepcopy(cfg)
        run_cfg["model"]["encoding"] = enc
        run_cfg["loss"]["identity_regularizer"] = lid
        run_cfg["train"]["cell_size"] = c
        _, results = run_experiment(dataset, run_cfg)
        row = {"name": name, "encoding": enc, "identity_regularizer": lid, "cell_size": c, **mean_metrics(results)}
        logger.info("%s: psnr %.4f psnr_cc %.4f", name, row["psnr"], row["psnr_cc"])
        rows.append(row)
    path = out / "ablation.csv"
    _write_csv(path, ABLATION_COLUMNS, rows)
    return path


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML or JSON config file")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--threads", type=int, help="BLAS threads (default 1, needed for bitwise reproducibility)")
    common.add_argument("-v", "--verbose", action="store_true")

    model_flags = argparse.ArgumentParser(add_help=False)
    model_flags.add_argument("--cell-size", type=int)
    model_flags.add_argument("--encoding", choices=ENCODING_KINDS)
    model_flags.add_argument("--iters", type=int)

    parser = argparse.ArgumentParser(prog="davigs", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="render a synthetic dataset")
    p.add_argument("out_dir", type=Path)

    p = sub.add_parser("train", parents=[common, model_flags], help="train an appearance model")
    p.add_argument("dataset_dir", type=Path)
    p.add_argument("out_dir", type=Path)
    p.add_argument("--resume", type=Path, help="checkpoint with optimizer state to continue from")
    p.add_argument("--stop-at", type=int, help="end early at this iteration; the schedule still spans --iters")

    p = sub.add_parser("eval", parents=[common, model_flags], help="fit held-out embeddings and report metrics")
    p.add_argument("dataset_dir", type=Path)
    p.add_argument("out_dir", type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--no-appearance", action="store_true", help="discard the appearance module (raw renders)")

    p = sub.add_parser("ablate", parents=[common, model_flags], help="encoding / L_ID / cell-size sweep")
    p.add_argument("dataset_dir", type=Path)
    p.add_argument("out_dir", type=Path)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        file_cfg = read_config_file(args.config) if args.config else None
        base = None
        if args.command == "eval" and args.checkpoint is not None and not args.no_appearance:
            # training-time settings (cell size, loss) carry over from the checkpoint
            _, _, extra = load_checkpoint(args.checkpoint, with_state=True)
            base = extra.get("config")
        cfg = resolve_config(args.command, file_cfg, base, args)
        with threadpool_limits(limits=cfg["runtime"]["threads"]):
            if args.command == "generate":
                path = cmd_generate(cfg, args.out_dir)
            elif args.command == "train":
                path = cmd_train(cfg, args.dataset_dir, args.out_dir, args.resume, args.stop_at)
            elif args.command == "eval":
                path = cmd_eval(cfg, args.checkpoint, args.dataset_dir, args.out_dir)
            else:
                path = cmd_ablate(cfg, args.dataset_dir, args.out_dir)
    except (CliError, ConfigError, ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(path)
    return 0
