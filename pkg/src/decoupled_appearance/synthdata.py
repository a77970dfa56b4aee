"""Procedural multi-view scenes with known appearance variation.

An analytic ray caster renders textured planes and spheres, giving the clean
("average appearance") image and exact z-depth for each camera.  Per-view
variation is then injected as a global affine color map followed by local
multiplicative lights anchored in world space.  Datasets round-trip through
PFM/PNG files plus a JSON manifest, which is also the ingestion format for
renders produced elsewhere.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Camera, DepthMap, back_project, camera_rays, project
from .imageio import read_image, read_pfm, write_pfm, write_png
from .losses import M_ID
from .training import FrameBundle

MANIFEST_VERSION = 1


def _as_f32(x) -> np.ndarray:
    # canonical storage is float32; keep in-memory data identical to what PFM holds
    return np.asarray(x, dtype=np.float32).astype(np.float64)


@dataclass
class SolidTexture:
    """Albedo as a smooth random function of the world position."""

    base: np.ndarray  # (3,)
    freqs: np.ndarray  # (K, 3) wave vectors
    phases: np.ndarray  # (K, 3) per-channel phases, so channels vary independently
    amps: np.ndarray  # (K, 3)
    lo: float = 0.05
    hi: float = 0.7

    @classmethod
    def random(
        cls,
        rng: np.random.Generator,
        waves: int = 6,
        scale: float = 6.0,
        detail_waves: int = 6,
        detail_scale: float = 40.0,
    ) -> "SolidTexture":
        """Broad color waves plus fine detail.

        Saturated, channel-decorrelated albedo keeps a 3x4 color transform well
        conditioned; the detail waves (a few pixels long at desk resolution) make
        every 8x8 cell span a range of colors rather than a single one.  The low
        ceiling leaves headroom for gains above 1.
        """
        base = rng.uniform(0.2, 0.55, size=3)
        freqs = rng.normal(0.0, scale, size=(waves, 3))
        phases = rng.uniform(0, 2 * np.pi, size=(waves, 3))
        amps = rng.uniform(0.02, 0.06, size=(waves, 3))
        if detail_waves:
            freqs = np.vstack([freqs, rng.normal(0.0, detail_scale, size=(detail_waves, 3))])
            phases = np.vstack([phases, rng.uniform(0, 2 * np.pi, size=(detail_waves, 3))])
            amps = np.vstack([amps, rng.uniform(0.02, 0.05, size=(detail_waves, 3))])
        return cls(base, freqs, phases, amps)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        s = np.sin((points @ self.freqs.T)[..., None] + self.phases)
        return np.clip(self.base + np.einsum("...kc,kc->...c", s, self.amps), self.lo, self.hi)

    def to_dict(self) -> dict:
        d = {k: np.asarray(getattr(self, k)).tolist() for k in ("base", "freqs", "phases", "amps")}
        return {**d, "lo": self.lo, "hi": self.hi}

    @classmethod
    def from_dict(cls, d: dict) -> "SolidTexture":
        arrays = {k: np.asarray(d[k], dtype=np.float64) for k in ("base", "freqs", "phases", "amps")}
        return cls(**arrays, lo=float(d.get("lo", 0.05)), hi=float(d.get("hi", 0.7)))


@dataclass
class Plane:
    """Rectangle ``center + a*u_axis + b*v_axis`` with ``|a| <= half_u``, ``|b| <= half_v``."""

    center: np.ndarray
    u_axis: np.ndarray
    v_axis: np.ndarray
    half_u: float
    half_v: float
    texture: SolidTexture

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.u_axis, self.v_axis)
        return n / np.linalg.norm(n)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        n = self.normal
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            s = ((self.center - origins) @ n) / denom
        hit = origins + s[..., None] * dirs
        rel = hit - self.center
        a = rel @ self.u_axis
        b = rel @ self.v_axis
        ok = (np.abs(denom) > 1e-12) & (s > 1e-9) & (np.abs(a) <= self.half_u) & (np.abs(b) <= self.half_v)
        return np.where(ok, s, np.inf)

    def corners(self) -> np.ndarray:
        return np.array(
            [self.center + su * self.half_u * self.u_axis + sv * self.half_v * self.v_axis for su in (-1, 1) for sv in (-1, 1)]
        )

    def to_dict(self) -> dict:
        return {
            "type": "plane",
            "center": self.center.tolist(),
            "u_axis": self.u_axis.tolist(),
            "v_axis": self.v_axis.tolist(),
            "half_u": self.half_u,
            "half_v": self.half_v,
            "texture": self.texture.to_dict(),
        }


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    texture: SolidTexture

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        oc = origins - self.center
        a = np.einsum("...i,...i->...", dirs, dirs)
        b = 2.0 * np.einsum("...i,...i->...", oc, dirs)
        c = np.einsum("...i,...i->...", oc, oc) - self.radius**2
        disc = b * b - 4 * a * c
        root = np.sqrt(np.maximum(disc, 0.0))
        s0 = (-b - root) / (2 * a)
        s1 = (-b + root) / (2 * a)
        s = np.where(s0 > 1e-9, s0, s1)
        return np.where((disc >= 0) & (s > 1e-9), s, np.inf)

    def corners(self) -> np.ndarray:
        return np.array([self.center - self.radius, self.center + self.radius])

    def to_dict(self) -> dict:
        return {"type": "sphere", "center": self.center.tolist(), "radius": self.radius, "texture": self.texture.to_dict()}


def _primitive_from_dict(d: dict):
    tex = SolidTexture.from_dict(d["texture"])
    if d["type"] == "plane":
        return Plane(
            np.asarray(d["center"], float), np.asarray(d["u_axis"], float), np.asarray(d["v_axis"], float),
            float(d["half_u"]), float(d["half_v"]), tex,
        )
    if d["type"] == "sphere":
        return Sphere(np.asarray(d["center"], float), float(d["radius"]), tex)
    raise ValueError(f"unknown primitive type {d['type']!r}")


@dataclass
class SceneSpec:
    primitives: list
    seed: int = 0

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.primitives:
            raise ValueError("scene has no primitives")
        pts = np.vstack([p.corners() for p in self.primitives])
        return pts.min(axis=0), pts.max(axis=0)

    def domain(self, padding: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
        """Scene bounds grown by ``padding`` of the extent on each side."""
        lo, hi = self.bounds()
        pad = padding * np.maximum(hi - lo, 1e-6)
        return lo - pad, hi + pad

    def to_dict(self) -> dict:
        return {"seed": self.seed, "primitives": [p.to_dict() for p in self.primitives]}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls([_primitive_from_dict(p) for p in d["primitives"]], int(d.get("seed", 0)))


def default_scene(seed: int = 0, spheres: int = 3) -> SceneSpec:
    """Back wall, floor and a few spheres around the origin (world up is +y)."""
    rng = np.random.default_rng(seed)
    ex, ey, ez = np.eye(3)
    prims = [
        Plane(np.array([0.0, 0.6, -1.2]), ex, ey, 4.5, 1.8, SolidTexture.random(rng)),
        Plane(np.array([0.0, -0.8, 0.8]), ex, -ez, 4.5, 2.0, SolidTexture.random(rng)),
    ]
    spots = [(-0.55, -0.4), (0.5, 0.0), (0.05, -0.75)]
    for k in range(spheres):
        x, z = spots[k % len(spots)]
        r = rng.uniform(0.28, 0.38)
        prims.append(Sphere(np.array([x, -0.8 + r, z]), r, SolidTexture.random(rng, scale=8.0)))
    return SceneSpec(prims, seed)


def orbit_cameras(
    n: int,
    width: int = 128,
    height: int = 128,
    radius: float = 3.2,
    height_offset: float = 0.4,
    arc_degrees: float = 60.0,
    target=(0.0, -0.2, 0.0),
    focal_scale: float = 1.1,
) -> list:
    """``n`` cameras spread over a horizontal arc, all looking at ``target``."""
    angles = np.radians(np.linspace(-arc_degrees / 2, arc_degrees / 2, n))
    cams = []
    for a in angles:
        eye = np.array([radius * np.sin(a), height_offset, radius * np.cos(a)])
        f = focal_scale * width
        cams.append(Camera.look_at(eye, target, (0.0, 1.0, 0.0), f, f, width, height))
    return cams


def render_oracle(scene: SceneSpec, camera: Camera) -> tuple[np.ndarray, DepthMap]:
    """Nearest-hit albedo image and exact z-depth; misses are black and invalid."""
    origins, dirs = camera_rays(camera)
    h, w = camera.height, camera.width
    best = np.full((h, w), np.inf)
    which = np.full((h, w), -1)
    for k, prim in enumerate(scene.primitives):
        s = prim.intersect(origins, dirs)
        closer = s < best
        best = np.where(closer, s, best)
        which = np.where(closer, k, which)
    image = np.zeros((h, w, 3))
    valid = np.isfinite(best)
    points = origins + np.where(valid, best, 0.0)[..., None] * dirs
    for k, prim in enumerate(scene.primitives):
        mask = which == k
        if mask.any():
            image[mask] = prim.texture(points[mask])
    # dirs have unit camera-z, so the ray parameter is the z-depth
    depth = DepthMap(np.where(valid, best, 0.0), valid)
    return image, depth


@dataclass
class LocalLight:
    center: np.ndarray
    radius: float
    gain: np.ndarray  # per-channel multiplier at the center

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.gain = np.asarray(self.gain, dtype=np.float64).reshape(3)
        if not self.radius > 0:
            raise ValueError("light radius must be positive")
        if np.any(self.gain <= 0):
            raise ValueError("light gains must be positive")

    def falloff(self, distance) -> np.ndarray:
        """1 at the center, 0 at and beyond the radius (raised cosine)."""
        d = np.asarray(distance, dtype=np.float64)
        return np.where(d < self.radius, 0.5 * (1.0 + np.cos(np.pi * d / self.radius)), 0.0)

    def multiplier(self, points: np.ndarray) -> np.ndarray:
        w = self.falloff(np.linalg.norm(points - self.center, axis=-1))
        return 1.0 + (self.gain - 1.0) * w[..., None]

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "radius": self.radius, "gain": self.gain.tolist()}


@dataclass
class VariationSpec:
    global_affines: np.ndarray  # (N, 3, 4)
    local_lights: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        self.global_affines = np.asarray(self.global_affines, dtype=np.float64).reshape(-1, 3, 4)

    @classmethod
    def none(cls, n_views: int) -> "VariationSpec":
        return cls(np.broadcast_to(M_ID, (n_views, 3, 4)).copy())

    @classmethod
    def random_global(
        cls,
        n_views: int,
        seed: int = 0,
        gain: float = 0.3,
        bias: float = 0.1,
        mix: float = 0.0,
        per_channel_bias: bool = False,
    ) -> "VariationSpec":
        """Per-view ISP proxies: per-channel gains (exposure x white balance)
        plus a black-level/flare bias, optionally with cross-channel mixing."""
        rng = np.random.default_rng(seed)
        mats = np.empty((n_views, 3, 4))
        for i in range(n_views):
            lin = np.diag(rng.uniform(1.0 - gain, 1.0 + gain, size=3))
            if mix:
                lin = lin + rng.uniform(-mix, mix, size=(3, 3))
            mats[i, :, :3] = lin
            mats[i, :, 3] = rng.uniform(-bias, bias, size=3 if per_channel_bias else 1)
        return cls(mats, [], seed)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "global_affines": self.global_affines.tolist(),
            "local_lights": [l.to_dict() for l in self.local_lights],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VariationSpec":
        lights = [LocalLight(l["center"], float(l["radius"]), l["gain"]) for l in d.get("local_lights", [])]
        return cls(np.asarray(d["global_affines"]), lights, int(d.get("seed", 0)))


def inject_variation(clean, depth: DepthMap, camera: Camera, view_id: int, spec: VariationSpec) -> np.ndarray:
    """Global affine of the view, then every local light on valid pixels; clamped to [0, 1]."""
    clean = np.asarray(clean, dtype=np.float64)
    if clean.shape[:2] != depth.shape or depth.shape != (camera.height, camera.width):
        raise ValueError("image, depth and camera sizes disagree")
    m = spec.global_affines[view_id]
    out = clean @ m[:, :3].T + m[:, 3]
    if spec.local_lights and depth.valid.any():
        v, u = np.nonzero(depth.valid)
        pts = back_project(camera, np.stack([u + 0.5, v + 0.5], axis=-1), depth.values[v, u])
        mult = np.ones((pts.shape[0], 3))
        for light in spec.local_lights:
            mult *= light.multiplier(pts)
        out[v, u] *= mult
    return np.clip(out, 0.0, 1.0)


@dataclass
class Dataset:
    frames: list  # FrameBundle, indexed by view_id
    scene: SceneSpec | None
    variation: VariationSpec | None
    domain_min: np.ndarray
    domain_max: np.ndarray
    depth_range: tuple

    @property
    def train_frames(self) -> list:
        return [f for f in self.frames if f.split == "train"]

    @property
    def test_frames(self) -> list:
        return [f for f in self.frames if f.split == "test"]

    @property
    def num_views(self) -> int:
        return len(self.frames)

    def content_hash(self) -> str:
        """SHA-256 over every raster, camera and the variation record."""
        h = hashlib.sha256()
        for f in self.frames:
            for arr in (f.rendered, f.ground_truth, f.depth.values, f.depth.valid):
                h.update(np.ascontiguousarray(arr).tobytes())
            h.update(json.dumps(f.camera.to_dict(), sort_keys=True).encode())
            h.update(f.split.encode())
        if self.variation is not None:
            h.update(json.dumps(self.variation.to_dict(), sort_keys=True).encode())
        return h.hexdigest()


def default_test_views(n: int) -> list:
    """Every fourth view starting at index 1 (never the first or last)."""
    views = list(range(1, n - 1, 4))
    return views or [n - 1]


def generate_dataset(scene: SceneSpec, cameras: list, variation: VariationSpec, test_views=None) -> Dataset:
    """Render every camera, inject its variation and split into train/test.

    ``rendered`` is the clean oracle image and ``ground_truth`` the varied one.
    """
    n = len(cameras)
    if n < 2:
        raise ValueError("need at least two cameras")
    if len(variation.global_affines) != n:
        raise ValueError(f"variation has {len(variation.global_affines)} affines for {n} cameras")
    test = set(default_test_views(n) if test_views is None else test_views)
    frames = []
    dmin, dmax = np.inf, 0.0
    for i, cam in enumerate(cameras):
        clean, depth = render_oracle(scene, cam)
        clean = _as_f32(clean)
        depth = DepthMap(_as_f32(depth.values), depth.valid)
        varied = _as_f32(inject_variation(clean, depth, cam, i, variation))
        if depth.valid.any():
            dmin = min(dmin, float(depth.values[depth.valid].min()))
            dmax = max(dmax, float(depth.values[depth.valid].max()))
        frames.append(FrameBundle(i, clean, depth, cam, varied, "test" if i in test else "train"))
    lo, hi = scene.domain()
    depth_range = (dmin, dmax) if np.isfinite(dmin) else (0.0, 1.0)
    return Dataset(frames, scene, variation, lo, hi, depth_range)


def check_scene_visibility(cameras: list, point=(0.0, 0.0, 0.0)) -> bool:
    """True when ``point`` projects inside every camera's image."""
    for cam in cameras:
        (u, v), _ = project(cam, np.asarray(point, dtype=np.float64))
        if not (0 <= u < cam.width and 0 <= v < cam.height):
            return False
    return True


# ------------------------------------------------------------------ disk format


def _frame_files(view_id: int) -> dict:
    stem = f"view_{view_id:03d}"
    return {
        "rendered": f"{stem}_rendered.pfm",
        "rendered_png": f"{stem}_rendered.png",
        "ground_truth": f"{stem}_gt.pfm",
        "ground_truth_png": f"{stem}_gt.png",
        "depth": f"{stem}_depth.pfm",
        "camera": f"{stem}_camera.json",
    }


def save_dataset(dataset: Dataset, out_dir) -> Path:
    """Write rasters, cameras and ``manifest.json`` (written last)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    views = []
    for f in dataset.frames:
        files = _frame_files(f.view_id)
        write_pfm(out / files["rendered"], f.rendered)
        write_png(out / files["rendered_png"], f.rendered)
        if f.ground_truth is not None:
            write_pfm(out / files["ground_truth"], f.ground_truth)
            write_png(out / files["ground_truth_png"], f.ground_truth)
        else:
            files.pop("ground_truth")
            files.pop("ground_truth_png")
        write_pfm(out / files["depth"], np.where(f.depth.valid, f.depth.values, 0.0))
        f.camera.save_json(out / files["camera"])
        views.append({"view_id": f.view_id, "split": f.split, **files})
    manifest = {
        "version": MANIFEST_VERSION,
        "views": views,
        "domain_min": np.asarray(dataset.domain_min).tolist(),
        "domain_max": np.asarray(dataset.domain_max).tolist(),
        "depth_range": list(dataset.depth_range),
        "scene": dataset.scene.to_dict() if dataset.scene is not None else None,
        "variation": dataset.variation.to_dict() if dataset.variation is not None else None,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_dataset(directory) -> Dataset:
    """Read a dataset directory written by :func:`save_dataset` or by an external renderer.

    External data only needs ``manifest.json`` with ``views`` entries naming
    ``rendered``, ``depth`` and ``camera`` files (``ground_truth`` optional
    for test views), plus ``domain_min``/``domain_max``.  Missing
    ``depth_range`` is computed from the depth maps.
    """
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"no manifest.json in {d}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("version", MANIFEST_VERSION) != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {manifest.get('version')}")
    frames = []
    for entry in sorted(manifest["views"], key=lambda e: e["view_id"]):
        cam = Camera.load_json(d / entry["camera"])
        rendered = read_image(d / entry["rendered"])
        depth = DepthMap.from_array(read_pfm(d / entry["depth"]).astype(np.float64))
        gt = read_image(d / entry["ground_truth"]) if entry.get("ground_truth") else None
        frames.append(FrameBundle(int(entry["view_id"]), rendered, depth, cam, gt, entry.get("split", "train")))
    if [f.view_id for f in frames] != list(range(len(frames))):
        raise ValueError("view ids must be 0..N-1")
    if "depth_range" in manifest:
        depth_range = tuple(manifest["depth_range"])
    else:
        vals = np.concatenate([f.depth.values[f.depth.valid] for f in frames])
        depth_range = (float(vals.min()), float(vals.max()))
    scene = SceneSpec.from_dict(manifest["scene"]) if manifest.get("scene") else None
    variation = VariationSpec.from_dict(manifest["variation"]) if manifest.get("variation") else None
    return Dataset(
        frames, scene, variation,
        np.asarray(manifest["domain_min"], float), np.asarray(manifest["domain_max"], float), depth_range,
    )
