"""Training loop: render, medium, losses, backward, schedule, Adam step, densify."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .camera import Camera
from .checkpoint import Checkpoint, save_checkpoint
from .config import TrainConfig
from .errors import AquasplatError, ConfigError, SceneError, TrainingError
from .gaussian import GaussianCloud
from .gradients import ParamGrads, backward_full
from .losses import INTERPOLATED, KEYFRAME
from .medium import MediumParams, apply_medium
from .metrics import mean_feature_error, psnr, ssim
from .optim import (
    GradStats,
    OptimizerState,
    adam_step,
    cloud_params,
    densify_and_prune,
    group_lrs,
    remap_optimizer,
    stage_schedule,
)
from .raster import project_cloud, rasterize
from .scene import Scene, init_cloud_from_points, load_scene, scene_extent, synth_scene, write_png
from .semantics import membership_from_projection

log = logging.getLogger(__name__)

LOG_KEYS = (
    "event", "iter", "stage", "frame_kind", "view",
    "l_rec", "l_depth", "l_g", "l_smooth", "l_s", "l_2", "l_final", "l_frame",
    "psnr", "ssim", "n_gaussians",
)  # fmt: skip
_LOSS_KEYS = ("l_rec", "l_depth", "l_g", "l_smooth", "l_s", "l_2", "l_final", "l_frame")

# stream identifiers for stateless per-iteration RNGs
_VIEW_STREAM = 1
_SPLIT_STREAM = 2
_INIT_STREAM = 3


def build_scene(cfg: TrainConfig) -> Scene:
    if cfg.scene.synthetic is not None:
        s = cfg.scene.synthetic
        from .scene import SynthOptions

        opts = SynthOptions(width=s.width, height=s.height, n_clusters=s.n_clusters)
        return synth_scene(s.seed, s.n_gaussians, s.n_views, s.medium(), opts)
    path = Path(cfg.scene.path)
    if not path.is_dir():
        raise SceneError(f"scene directory {path} does not exist")
    return load_scene(path)


def _point_colors(points: np.ndarray, camera: Camera, image: np.ndarray) -> np.ndarray:
    cam = camera.world_to_camera(points)
    z = np.maximum(cam[:, 2], 1e-9)
    u = np.floor(camera.fx * cam[:, 0] / z + camera.cx).astype(np.int64)
    v = np.floor(camera.fy * cam[:, 1] / z + camera.cy).astype(np.int64)
    ok = (cam[:, 2] > 0) & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    colors = np.full((points.shape[0], 3), 0.5)
    colors[ok] = image[v[ok], u[ok]]
    return colors


def initial_cloud(cfg: TrainConfig, scene: Scene) -> GaussianCloud:
    """Starting cloud: a noisy point sample of the scene, or a uniform random box.

    Point colours are read from the first training image, like a sparse
    structure-from-motion reconstruction.
    """
    init = cfg.init
    rng = np.random.default_rng([cfg.seed, _INIT_STREAM])
    first = scene.views[scene.train_indices()[0]]
    sh_degree = scene.ground_truth.cloud.sh_degree if scene.ground_truth is not None else 2
    if init.mode == "points":
        if init.points_file is not None:
            data = np.load(init.points_file, allow_pickle=False)
            if data.ndim != 2 or data.shape[1] != 6:
                raise ConfigError(f"init.points_file must hold an (N, 6) array, got {data.shape}")
            return init_cloud_from_points(data[:, :3], data[:, 3:], sh_degree, init.opacity)
        if scene.ground_truth is None:
            raise ConfigError("init.mode 'points' needs init.points_file for scenes without ground truth")
        src = scene.ground_truth.cloud.positions
        n = init.n_points or src.shape[0]
        pick = np.arange(n) % src.shape[0] if n <= src.shape[0] else rng.integers(0, src.shape[0], n)
        points = src[pick] + rng.normal(0.0, init.position_noise, (n, 3))
    else:
        n = init.n_points or 1000
        centre = np.mean([c.center for c in scene.cameras], axis=0)
        look = np.mean([c.rotation[2] for c in scene.cameras], axis=0)
        centre = centre + look * np.linalg.norm(centre - scene.cameras[0].center + 1e-9)
        points = centre + rng.uniform(-init.box_half_size, init.box_half_size, (n, 3))
    return init_cloud_from_points(points, _point_colors(points, first.camera, first.image), sh_degree, init.opacity)


def view_for_iteration(iteration: int, train_indices: list[int], seed: int) -> int:
    """Shuffled passes over the training views, computed statelessly for exact resume."""
    n = len(train_indices)
    epoch, pos = divmod(iteration, n)
    perm = np.random.default_rng([seed, _VIEW_STREAM, epoch]).permutation(n)
    return train_indices[int(perm[pos])]


def estimate_b_inf(scene: Scene, fraction: float = 0.05) -> np.ndarray | None:
    """Mean observed colour of the farthest valid prior-depth pixels, or None without priors.

    Far pixels are dominated by backscatter, so their colour approaches B_inf.
    """
    depths, colors = [], []
    for i in scene.train_indices():
        v = scene.views[i]
        if v.prior_depth is None:
            continue
        mask = v.depth_mask if v.depth_mask is not None else np.ones(v.prior_depth.shape, dtype=bool)
        depths.append(v.prior_depth[mask])
        colors.append(v.image[mask])
    if not depths or sum(d.size for d in depths) == 0:
        return None
    d = np.concatenate(depths)
    c = np.concatenate(colors)
    k = max(1, int(round(fraction * d.size)))
    far = np.argsort(d, kind="stable")[-k:]
    return np.clip(c[far].mean(axis=0), 0.01, 0.99)


def fresh_state(cfg: TrainConfig, scene: Scene) -> Checkpoint:
    cloud = initial_cloud(cfg, scene)
    mi = cfg.medium_init
    medium = mi.medium()
    b_inf = None
    if mi.b_inf_init == "far_pixels":
        b_inf = estimate_b_inf(scene, mi.far_fraction)
    if mi.b_inf_init == "image_mean" or (mi.b_inf_init == "far_pixels" and b_inf is None):
        b_inf = np.clip(np.mean([scene.views[i].image.mean(axis=(0, 1)) for i in scene.train_indices()], axis=0), 0.01, 0.99)
    if b_inf is not None:
        medium = MediumParams.from_physical(medium.beta_d, medium.beta_b, b_inf)
    params = _params(cloud, medium.to_vector(), np.zeros(1))
    return Checkpoint(
        cloud=cloud,
        medium=medium,
        optimizer=OptimizerState.for_params(params),
        grad_stats=GradStats.zeros(cloud.n),
        iteration=0,
        log_gamma=0.0,
        projector_seed=scene.projector_seed,
        config=cfg.to_dict(),
    )


def _params(cloud: GaussianCloud, medium_vec: np.ndarray, gamma: np.ndarray) -> dict[str, np.ndarray]:
    params = cloud_params(cloud)
    params["medium"] = medium_vec
    params["gamma"] = gamma
    return params


def _grads(g: ParamGrads) -> dict[str, np.ndarray]:
    out = {name: g.group(name) for name in ("position", "scale", "rotation", "sh", "opacity", "semantic", "medium")}
    out["gamma"] = np.array([g.d_log_gamma])
    return out


# ---------------------------------------------------------------------------
# evaluation


def render_views(cloud: GaussianCloud, medium: MediumParams, scene: Scene, index: int, threads: int | None = None):
    """(clean, observed, depth) renders for one scene view."""
    out = rasterize(cloud, scene.views[index].camera, threads=threads)
    return out.color, apply_medium(out.color, out.depth, medium), out.depth


def evaluate(cloud: GaussianCloud, medium: MediumParams, scene: Scene, indices: list[int] | None = None, threads: int | None = None) -> dict:
    """Mean PSNR/SSIM on held-out views (training views when nothing is held out)."""
    split = "test"
    if indices is None:
        indices = scene.test_indices()
        if not indices:
            indices, split = scene.train_indices(), "train"
    rows = []
    for i in indices:
        clean, observed, _ = render_views(cloud, medium, scene, i, threads)
        row = {"psnr": psnr(observed, scene.views[i].image)}
        w, h = scene.resolution
        row["ssim"] = ssim(observed, scene.views[i].image) if min(w, h) >= 11 else float("nan")
        if scene.ground_truth is not None:
            row["psnr_clean"] = psnr(clean, scene.ground_truth.clean_images[i])
        rows.append(row)
    result = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
    result["split"] = split
    result["views"] = list(indices)
    return result


def semantic_error(cloud: GaussianCloud, scene: Scene) -> float:
    """Mean ||f_s - f_ref|| over the members of every training-view region."""
    memberships = []
    for i in scene.train_indices():
        view = scene.views[i]
        if not view.regions:
            continue
        proj = project_cloud(cloud, view.camera)
        memberships += [(membership_from_projection(proj, r), r.f_ref) for r in view.regions]
    return mean_feature_error(cloud.semantic_features, memberships)


def medium_relative_error(estimate: MediumParams, truth: MediumParams) -> dict:
    rel = lambda a, b: (np.abs(a - b) / np.abs(b)).tolist()  # noqa: E731
    return {
        "beta_d": rel(estimate.beta_d, truth.beta_d),
        "beta_b": rel(estimate.beta_b, truth.beta_b),
        "b_inf": rel(estimate.b_inf, truth.b_inf),
    }


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    state: Checkpoint
    records: list[dict] = field(default_factory=list)
    final_eval: dict | None = None
    scene: Scene | None = None


def _record(event: str, **values) -> dict:
    rec = {k: None for k in LOG_KEYS}
    rec["event"] = event
    rec.update(values)
    return rec


def train(
    cfg: TrainConfig,
    *,
    scene: Scene | None = None,
    resume: Checkpoint | None = None,
    output_dir=None,
    on_iteration: Callable[[int, Checkpoint], None] | None = None,
    echo: Callable[[str], None] | None = None,
    write_outputs: bool = True,
) -> TrainResult:
    """Run (or resume) optimization.

    ``on_iteration(done, state)`` is called after every completed iteration with
    the number of completed iterations.  With ``write_outputs`` the JSON log,
    previews and checkpoints go to ``output_dir`` (default ``cfg.output_dir``);
    the directory is only created once the scene has loaded.
    """
    if scene is None:
        scene = build_scene(cfg)
    scene.validate()
    state = resume if resume is not None else fresh_state(cfg, scene)
    out = Path(output_dir if output_dir is not None else cfg.output_dir)
    log_file = None
    if write_outputs:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "log.jsonl", "a" if resume is not None else "w")

    stage_cfg = cfg.stage_config()
    weights = cfg.weights
    train_idx = scene.train_indices()
    if not train_idx:
        raise SceneError("scene has no training views")
    extent = scene_extent([scene.views[i].camera for i in train_idx])
    densify_until = cfg.densify_until()
    medium_vec = state.medium.to_vector()
    gamma = np.array([state.log_gamma])
    cloud = state.cloud
    records: list[dict] = []
    w, h = scene.resolution

    def emit(rec: dict) -> None:
        records.append(rec)
        line = json.dumps(rec)
        if log_file is not None:
            log_file.write(line + "\n")
        if echo is not None:
            echo(line)

    try:
        for it in range(state.iteration, cfg.iterations):
            info = stage_schedule(it, stage_cfg)
            vi = view_for_iteration(it, train_idx, cfg.seed)
            view = scene.views[vi]
            freeze = set(info.freeze)
            if not cfg.medium_init.learn:
                freeze.add("medium")
            if not (weights.interp_mode == "learned" and view.kind == INTERPOLATED):
                freeze.add("gamma")
            try:
                medium = MediumParams.from_vector(medium_vec)
                bd, g = backward_full(
                    cloud, view, medium, weights,
                    l1_weight=info.l1_weight, l2_weight=info.l2_weight, stage=info.stage,
                    freeze=info.freeze, termination=cfg.termination, log_gamma=float(gamma[0]), threads=cfg.threads,
                )  # fmt: skip
                densifying = cfg.densify.enabled and info.densify and it < densify_until
                if densifying:
                    state.grad_stats.add(g.viewspace, g.visible, w, h)
                lrs = group_lrs(it, cfg.lr, cfg.iterations, extent)
                adam_step(_params(cloud, medium_vec, gamma), _grads(g), state.optimizer, lrs, frozenset(freeze))
                if densifying and it >= cfg.densify.start_iter and (it + 1) % cfg.densify.interval == 0:
                    rng = np.random.default_rng([cfg.seed, _SPLIT_STREAM, it])
                    res = densify_and_prune(cloud, state.grad_stats, cfg.densify, extent, rng)
                    remap_optimizer(state.optimizer, res)
                    cloud = res.cloud
                    state.grad_stats = GradStats.zeros(cloud.n)
                    log.debug("iter %d: cloned %d, split %d, pruned %d -> %d", it, res.n_cloned, res.n_split, res.n_pruned, cloud.n)
            except TrainingError:
                raise
            except AquasplatError as exc:
                raise TrainingError(f"iteration {it}, view {vi} ({view.image_id}): {exc}") from exc

            state.cloud = cloud
            state.medium = MediumParams.from_vector(medium_vec)
            state.log_gamma = float(gamma[0])
            state.iteration = it + 1

            if cfg.log_every and (it % cfg.log_every == 0 or it == cfg.iterations - 1):
                obs = apply_medium(*_color_depth(cloud, view.camera, cfg.threads), medium)
                emit(_record(
                    "train", iter=it, stage=info.stage, frame_kind=view.kind, view=vi,
                    **{k: float(getattr(bd, k)) for k in _LOSS_KEYS},
                    psnr=psnr(obs, view.image), ssim=ssim(obs, view.image) if min(w, h) >= 11 else None,
                    n_gaussians=cloud.n,
                ))  # fmt: skip
            done = it + 1
            if cfg.eval_every and done % cfg.eval_every == 0 and done < cfg.iterations:
                ev = evaluate(cloud, state.medium, scene, threads=cfg.threads)
                emit(_record("eval", iter=it, stage=info.stage, frame_kind=KEYFRAME, psnr=ev["psnr"], ssim=ev["ssim"], n_gaussians=cloud.n))
            if write_outputs and cfg.preview_every and done % cfg.preview_every == 0:
                write_previews(cloud, state.medium, scene, out / "previews", done, cfg.threads)
            if write_outputs and cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < cfg.iterations:
                save_checkpoint(out / f"iter_{done:06d}.ckpt", state)
            if on_iteration is not None:
                on_iteration(done, state)

        final = evaluate(cloud, state.medium, scene, threads=cfg.threads)
        last_stage = stage_schedule(cfg.iterations - 1, stage_cfg).stage
        emit(_record("eval", iter=cfg.iterations - 1, stage=last_stage, frame_kind=KEYFRAME, psnr=final["psnr"], ssim=final["ssim"], n_gaussians=cloud.n))
        if write_outputs:
            save_checkpoint(out / "final.ckpt", state)
            write_previews(cloud, state.medium, scene, out / "previews", state.iteration, cfg.threads)
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(state, records, final, scene)


def _color_depth(cloud: GaussianCloud, camera: Camera, threads):
    r = rasterize(cloud, camera, threads=threads)
    return r.color, r.depth


def write_previews(cloud: GaussianCloud, medium: MediumParams, scene: Scene, directory: Path, iteration: int, threads=None) -> None:
    """Clean and observed renders of the first held-out (or training) view."""
    directory.mkdir(parents=True, exist_ok=True)
    idx = (scene.test_indices() or scene.train_indices())[0]
    clean, observed, _ = render_views(cloud, medium, scene, idx, threads)
    write_png(directory / f"iter_{iteration:06d}_view{idx:03d}_clean.png", clean)
    write_png(directory / f"iter_{iteration:06d}_view{idx:03d}_observed.png", observed)
