"""Scenes: training views, manifests on disk, and synthetic scenes with ground truth."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .camera import Camera
from .errors import AquasplatError, SceneError
from .gaussian import DEFAULT_SH_DEGREE, GaussianCloud, rgb_to_sh_dc
from .losses import FRAME_KINDS, KEYFRAME
from .medium import MediumParams, apply_medium
from .raster import project_cloud, rasterize
from .semantics import EmbeddingProjector, SemanticRegion, ingest_regions, write_region_file

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "aquasplat-scene"
MANIFEST_VERSION = 1
_MANIFEST_KEYS = {"format", "version", "width", "height", "projector_seed", "holdout", "frames", "regions", "ground_truth"}
_MANIFEST_REQUIRED = {"format", "version", "width", "height", "frames"}
_FRAME_KEYS = {"id", "image", "kind", "camera", "depth", "depth_mask"}
_FRAME_REQUIRED = {"image", "camera"}
DEFAULT_PROJECTOR_SEED = 0


@dataclass
class View:
    camera: Camera
    image: np.ndarray  # (H, W, 3) observed, [0, 1]
    kind: str = KEYFRAME
    prior_depth: np.ndarray | None = None
    depth_mask: np.ndarray | None = None
    regions: list[SemanticRegion] = field(default_factory=list)
    image_id: str = ""


@dataclass
class GroundTruth:
    cloud: GaussianCloud
    medium: MediumParams
    clean_images: list[np.ndarray]
    cluster_ids: np.ndarray  # (N,) object cluster per Gaussian, -1 for backdrop
    cluster_embeddings: np.ndarray  # (K, raw_dim)


@dataclass
class Scene:
    views: list[View]
    holdout: list[int] = field(default_factory=list)
    projector_seed: int = DEFAULT_PROJECTOR_SEED
    ground_truth: GroundTruth | None = None
    warnings: list[str] = field(default_factory=list)

    @property
    def cameras(self) -> list[Camera]:
        return [v.camera for v in self.views]

    @property
    def images(self) -> list[np.ndarray]:
        return [v.image for v in self.views]

    @property
    def frame_kinds(self) -> list[str]:
        return [v.kind for v in self.views]

    @property
    def regions(self) -> list[SemanticRegion]:
        return [r for v in self.views for r in v.regions]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.views[0].camera.width, self.views[0].camera.height

    def train_indices(self) -> list[int]:
        held = set(self.holdout)
        return [i for i in range(len(self.views)) if i not in held]

    def test_indices(self) -> list[int]:
        return sorted(self.holdout)

    def validate(self) -> None:
        if not self.views:
            raise SceneError("scene has no views")
        w, h = self.resolution
        for i, v in enumerate(self.views):
            if (v.camera.width, v.camera.height) != (w, h) or v.image.shape != (h, w, 3):
                raise SceneError(f"frame {i} ({v.image_id}): resolution mismatch, expected {w}x{h}")
            if v.kind not in FRAME_KINDS:
                raise SceneError(f"frame {i} ({v.image_id}): unknown frame kind {v.kind!r}")
        for i in self.holdout:
            if not 0 <= i < len(self.views):
                raise SceneError(f"holdout index {i} out of range")


def default_holdout(n_views: int) -> list[int]:
    """Every 8th view, starting with the first."""
    return list(range(0, n_views, 8))


def scene_extent(cameras: list[Camera]) -> float:
    centers = np.stack([c.center for c in cameras])
    return float(1.1 * np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1)) + 1e-9)


# ---------------------------------------------------------------------------
# images


def read_png(path) -> np.ndarray:
    """Decode an 8- or 16-bit PNG to linear [0, 1] RGB floats."""
    data = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if data is None:
        raise SceneError(f"cannot decode image {path}")
    if data.ndim == 2:
        data = np.repeat(data[..., None], 3, axis=2)
    elif data.shape[2] == 4:
        data = data[..., :3]
    data = data[..., ::-1]  # BGR -> RGB
    if data.dtype == np.uint8:
        return data.astype(np.float64) / 255.0
    if data.dtype == np.uint16:
        return data.astype(np.float64) / 65535.0
    raise SceneError(f"unsupported PNG sample type {data.dtype} in {path}")


def write_png(path, image: np.ndarray, bits: int = 16) -> None:
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if bits == 16:
        data = np.round(image * 65535.0).astype(np.uint16)
    elif bits == 8:
        data = np.round(image * 255.0).astype(np.uint8)
    else:
        raise ValueError("bits must be 8 or 16")
    if data.ndim == 3:
        data = np.ascontiguousarray(data[..., ::-1])
    if not cv2.imwrite(str(path), data):
        raise SceneError(f"cannot write image {path}")


def quantize16(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 65535.0) / 65535.0


# ---------------------------------------------------------------------------
# manifest I/O


def _load_array(path: Path, what: str) -> np.ndarray:
    try:
        return np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise SceneError(f"{what}: cannot load {path}: {exc}") from None


def load_scene(directory) -> Scene:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise SceneError(f"missing manifest {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneError(f"manifest {manifest_path} is not valid JSON: {exc}") from None
    if not isinstance(manifest, dict):
        raise SceneError("manifest must be a JSON object")
    unknown = set(manifest) - _MANIFEST_KEYS
    if unknown:
        raise SceneError(f"manifest: unknown keys {sorted(unknown)}")
    missing = _MANIFEST_REQUIRED - set(manifest)
    if missing:
        raise SceneError(f"manifest: missing keys {sorted(missing)}")
    if manifest["format"] != MANIFEST_FORMAT or manifest["version"] != MANIFEST_VERSION:
        raise SceneError(f"manifest: unsupported format {manifest['format']!r} version {manifest['version']!r}")
    width, height = manifest["width"], manifest["height"]
    if not (isinstance(width, int) and isinstance(height, int) and width > 0 and height > 0):
        raise SceneError("manifest: width and height must be positive integers")
    frames = manifest["frames"]
    if not isinstance(frames, list) or not frames:
        raise SceneError("manifest: 'frames' must be a non-empty list")
    seed = manifest.get("projector_seed", DEFAULT_PROJECTOR_SEED)

    views = []
    for i, frame in enumerate(frames):
        if not isinstance(frame, dict):
            raise SceneError(f"frame {i}: expected an object")
        unknown = set(frame) - _FRAME_KEYS
        if unknown:
            raise SceneError(f"frame {i}: unknown keys {sorted(unknown)}")
        missing = _FRAME_REQUIRED - set(frame)
        if missing:
            raise SceneError(f"frame {i}: missing keys {sorted(missing)}")
        image_path = directory / frame["image"]
        if not image_path.is_file():
            raise SceneError(f"frame {i}: missing image file {image_path}")
        image = read_png(image_path)
        if image.shape[:2] != (height, width):
            raise SceneError(f"frame {i}: image {image_path.name} is {image.shape[1]}x{image.shape[0]}, expected {width}x{height}")
        try:
            camera = Camera.from_dict(frame["camera"])
        except (AquasplatError, TypeError, ValueError) as exc:
            raise SceneError(f"frame {i}: malformed camera: {exc}") from None
        if (camera.width, camera.height) != (width, height):
            raise SceneError(f"frame {i}: camera resolution {camera.width}x{camera.height} != {width}x{height}")
        kind = frame.get("kind", KEYFRAME)
        if kind not in FRAME_KINDS:
            raise SceneError(f"frame {i}: unknown frame kind {kind!r}")
        prior = mask = None
        if "depth" in frame:
            prior = _load_array(directory / frame["depth"], f"frame {i} depth")
            if prior.shape != (height, width):
                raise SceneError(f"frame {i}: depth prior shape {prior.shape} != {(height, width)}")
            mask = np.isfinite(prior) & (prior > 0)
            if "depth_mask" in frame:
                mask &= _load_array(directory / frame["depth_mask"], f"frame {i} depth mask").astype(bool)
            prior = np.where(mask, prior, 0.0)
        image_id = str(frame.get("id", Path(frame["image"]).stem))
        views.append(View(camera, image, kind, prior, mask, [], image_id))

    warnings: list[str] = []
    if manifest.get("regions"):
        region_path = directory / manifest["regions"]
        if not region_path.is_file():
            raise SceneError(f"missing region file {region_path}")
        handler = _CollectWarnings()
        logging.getLogger("aquasplat.semantics").addHandler(handler)
        try:
            regions = ingest_regions(region_path, EmbeddingProjector(seed), (width, height))
        finally:
            logging.getLogger("aquasplat.semantics").removeHandler(handler)
        warnings.extend(handler.messages)
        by_id = {v.image_id: v for v in views}
        for r in regions:
            if r.image_id not in by_id:
                raise SceneError(f"region refers to unknown image id {r.image_id!r}")
            by_id[r.image_id].regions.append(r)

    gt = None
    if manifest.get("ground_truth"):
        gt = _load_ground_truth(directory / manifest["ground_truth"])
    holdout = manifest.get("holdout", default_holdout(len(views)))
    scene = Scene(views, [int(i) for i in holdout], int(seed), gt, warnings)
    scene.validate()
    return scene


class _CollectWarnings(logging.Handler):
    def __init__(self):
        super().__init__(logging.WARNING)
        self.messages: list[str] = []

    def emit(self, record):
        self.messages.append(record.getMessage())


def save_scene(scene: Scene, directory) -> None:
    """Write a scene as manifest + 16-bit PNGs (+ depth .npy, regions, ground truth)."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    w, h = scene.resolution
    frames = []
    for i, v in enumerate(scene.views):
        name = v.image_id or f"{i:04d}"
        frame = {"id": name, "image": f"images/{name}.png", "kind": v.kind, "camera": v.camera.to_dict()}
        write_png(directory / frame["image"], v.image)
        if v.prior_depth is not None:
            (directory / "depth").mkdir(exist_ok=True)
            frame["depth"] = f"depth/{name}.npy"
            np.save(directory / frame["depth"], np.where(v.depth_mask, v.prior_depth, 0.0) if v.depth_mask is not None else v.prior_depth)
        frames.append(frame)
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "width": w,
        "height": h,
        "projector_seed": scene.projector_seed,
        "holdout": list(scene.holdout),
        "frames": frames,
    }
    if scene.regions:
        write_region_file(directory / "regions.json", scene.regions)
        manifest["regions"] = "regions.json"
    if scene.ground_truth is not None:
        _save_ground_truth(scene.ground_truth, directory / "ground_truth.npz")
        manifest["ground_truth"] = "ground_truth.npz"
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))


def _save_ground_truth(gt: GroundTruth, path: Path) -> None:
    c = gt.cloud
    np.savez(
        path,
        positions=c.positions,
        log_scales=c.log_scales,
        rotations=c.rotations,
        sh_coeffs=c.sh_coeffs,
        opacity_logits=c.opacity_logits,
        semantic_features=c.semantic_features,
        medium=gt.medium.to_vector(),
        clean_images=np.stack(gt.clean_images),
        cluster_ids=gt.cluster_ids,
        cluster_embeddings=gt.cluster_embeddings,
    )


def _load_ground_truth(path: Path) -> GroundTruth:
    try:
        with np.load(path, allow_pickle=False) as data:
            cloud = GaussianCloud(
                data["positions"], data["log_scales"], data["rotations"], data["sh_coeffs"],
                data["opacity_logits"], data["semantic_features"],
            )
            return GroundTruth(cloud, MediumParams.from_vector(data["medium"]), list(data["clean_images"]),
                               data["cluster_ids"], data["cluster_embeddings"])
    except (OSError, KeyError, ValueError) as exc:
        raise SceneError(f"ground truth {path}: {exc}") from None


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SynthOptions:
    width: int = 32
    height: int = 32
    n_clusters: int = 3
    backdrop_fraction: float = 0.3
    sh_degree: int = DEFAULT_SH_DEGREE
    fov_degrees: float = 60.0
    projector_seed: int = DEFAULT_PROJECTOR_SEED
    backdrop_z: float = 8.0  # far wall where backscatter nears saturation
    backdrop_half_size: float = 9.0
    camera_radius: tuple = (2.2, 6.0)  # wide spread of viewing distances makes the medium identifiable
    cluster_spread: float = 1.6  # clusters sit on x in [-spread, spread]; wide enough that boxes rarely overlap
    cluster_sigma: float = 0.18


def _synth_cloud(rng: np.random.Generator, n: int, opts: SynthOptions):
    n_back = int(round(n * opts.backdrop_fraction)) if n >= 4 else 0
    n_obj = n - n_back
    k = max(1, min(opts.n_clusters, n_obj))
    centers = np.stack([np.linspace(-opts.cluster_spread, opts.cluster_spread, k) if k > 1 else np.zeros(1), rng.uniform(-0.3, 0.3, k), rng.uniform(-0.3, 0.3, k)], axis=1)
    base_colors = rng.uniform(0.2, 0.9, (k, 3))
    cluster_ids = np.arange(n_obj) % k
    pos_obj = centers[cluster_ids] + rng.normal(0.0, opts.cluster_sigma, (n_obj, 3))
    scale_obj = np.exp(rng.uniform(np.log(0.05), np.log(0.14), (n_obj, 3)))
    color_obj = np.clip(base_colors[cluster_ids] + rng.normal(0.0, 0.08, (n_obj, 3)), 0.05, 0.95)
    opac_obj = rng.uniform(0.6, 0.95, n_obj)

    # backdrop: a wall of flat Gaussians behind the objects
    side = int(np.ceil(np.sqrt(max(n_back, 1))))
    half = opts.backdrop_half_size
    gx, gy = np.meshgrid(np.linspace(-half, half, side), np.linspace(-half, half, side))
    wall = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, opts.backdrop_z)], axis=1)[:n_back]
    wall = wall + rng.normal(0.0, 0.05, wall.shape)
    spacing = 2.0 * half / max(side - 1, 1)
    scale_back = np.column_stack([np.full(n_back, 0.6 * spacing), np.full(n_back, 0.6 * spacing), np.full(n_back, 0.05)])
    color_back = np.clip(np.array([0.55, 0.5, 0.4]) + rng.normal(0.0, 0.06, (n_back, 3)), 0.05, 0.95)
    opac_back = np.full(n_back, 0.95)

    positions = np.concatenate([pos_obj, wall])
    scales = np.concatenate([scale_obj, scale_back])
    colors = np.concatenate([color_obj, color_back])
    opac = np.concatenate([opac_obj, opac_back])
    rot = rng.normal(size=(n, 4))
    rot[n_obj:] = [1.0, 0.0, 0.0, 0.0]
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)
    cloud = GaussianCloud.create(positions, scales, colors, opac, rotations=rot, sh_degree=opts.sh_degree)
    if opts.sh_degree > 0:
        # mild view dependence on object Gaussians
        cloud.sh_coeffs[:n_obj, 1:4, :] = rng.normal(0.0, 0.05, (n_obj, 3, 3))
    ids = np.concatenate([cluster_ids, np.full(n_back, -1)])
    return cloud, ids, k


def _synth_cameras(rng: np.random.Generator, n_views: int, opts: SynthOptions) -> list[Camera]:
    focal = 0.5 * opts.width / np.tan(np.radians(opts.fov_degrees) / 2.0)
    azimuths = np.linspace(-0.5, 0.5, n_views)
    order = np.roll(np.arange(n_views), -(n_views // 2))  # view 0 is the central one
    cams = []
    for i in order:
        radius = rng.uniform(*opts.camera_radius)
        elev = rng.uniform(-0.15, 0.15)
        eye = radius * np.array([np.sin(azimuths[i]) * np.cos(elev), np.sin(elev), -np.cos(azimuths[i]) * np.cos(elev)])
        target = rng.normal(0.0, 0.05, 3)
        cams.append(Camera.look_at(eye, target, focal=focal, width=opts.width, height=opts.height))
    return cams


def _densest_cluster_region(cloud, camera, cluster_ids, k, embeddings, projector, image_id) -> SemanticRegion | None:
    proj = project_cloud(cloud, camera)
    u, v = proj.means2d[:, 0], proj.means2d[:, 1]
    on_image = proj.visible & (u > 0) & (u < camera.width) & (v > 0) & (v < camera.height)
    counts = [np.count_nonzero(on_image & (cluster_ids == c)) for c in range(k)]
    best = int(np.argmax(counts))
    if counts[best] == 0:
        return None
    sel = on_image & (cluster_ids == best)
    box = (u[sel].min() - 1.0, v[sel].min() - 1.0, u[sel].max() + 1.0, v[sel].max() + 1.0)
    region = SemanticRegion(image_id, box, projector.project(embeddings[best]), embeddings.shape[1], embeddings[best])
    return region.clamped(camera.width, camera.height)


def synth_scene(seed: int, n_gaussians: int, n_views: int, medium: MediumParams, options: SynthOptions | None = None) -> Scene:
    """Random Gaussian scene rendered through ``medium``, with full ground truth.

    Object Gaussians are grouped into clusters, each carrying a pseudo-embedding;
    every view gets one region boxing its most populated visible cluster.
    """
    if n_gaussians < 1 or n_gaussians > 5000:
        raise SceneError("n_gaussians must be in [1, 5000]")
    if n_views < 2:
        raise SceneError("n_views must be >= 2")
    opts = options or SynthOptions()
    rng = np.random.default_rng(seed)
    cloud, cluster_ids, k = _synth_cloud(rng, n_gaussians, opts)
    cameras = _synth_cameras(rng, n_views, opts)
    embeddings = rng.standard_normal((k, 512))
    projector = EmbeddingProjector(opts.projector_seed)

    views, cleans = [], []
    for i, cam in enumerate(cameras):
        out = rasterize(cloud, cam)
        observed = apply_medium(out.color, out.depth, medium)
        mask = out.alpha_accum > 0.5
        image_id = f"view{i:03d}"
        region = _densest_cluster_region(cloud, cam, cluster_ids, k, embeddings, projector, image_id)
        views.append(View(cam, observed, KEYFRAME, np.where(mask, out.depth, 0.0), mask, [region] if region else [], image_id))
        cleans.append(out.color)
    gt = GroundTruth(cloud, medium.copy(), cleans, cluster_ids, embeddings)
    return Scene(views, default_holdout(n_views), opts.projector_seed, gt)


def init_cloud_from_points(points: np.ndarray, colors: np.ndarray, sh_degree: int = DEFAULT_SH_DEGREE, opacity: float = 0.1) -> GaussianCloud:
    """Standard initialization: isotropic scale from nearest-neighbour spacing."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n > 1:
        d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=-1)
        np.fill_diagonal(d2, np.inf)
        kk = min(3, n - 1)
        nn = np.sort(d2, axis=1)[:, :kk].mean(axis=1)
        scale = np.sqrt(np.maximum(nn, 1e-7))
    else:
        scale = np.full(n, 0.1)
    cloud = GaussianCloud.create(points, np.repeat(scale[:, None], 3, axis=1), np.clip(colors, 0.0, 1.0), opacity, sh_degree=sh_degree)
    cloud.sh_coeffs[:, 0, :] = rgb_to_sh_dc(np.clip(colors, 0.0, 1.0))
    return cloud
