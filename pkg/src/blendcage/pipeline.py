"""High-level operations wiring the modules together.

These are the units behind the CLI subcommands; the acceptance suite calls
them directly so command-line behavior and tested behavior cannot drift.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .blendfield import BlendState, build_blend_state, build_descriptor_table
from .bvh import TetBVH
from .config import (cameras_from_config, effective_workers, grid_bbox_from_config,
                     scene_from_config, train_config_from_config)
from .errors import DataError
from .images import read_ppm
from .metrics import MetricReport, psnr, ssim
from .radiance import RadianceModel, init_model
from .renderer import render_image
from .scenes import Dataset, load_dataset, render_dataset
from .tetmesh import assemble_laplacian
from .training import Adam, build_runtime, checkpoint_load, model_params, train

# Distinct expression colors for weight visualizations (up to K=8).
WEIGHT_PALETTE = np.array(
    [
        [0.894, 0.102, 0.110],
        [0.216, 0.494, 0.722],
        [0.302, 0.686, 0.290],
        [0.596, 0.306, 0.639],
        [1.000, 0.498, 0.000],
        [0.900, 0.900, 0.200],
        [0.651, 0.337, 0.157],
        [0.969, 0.506, 0.749],
    ]
)


def gen_data(config: dict, out_dir: str | Path) -> Dataset:
    """Render the ground-truth dataset described by the config."""
    scene = scene_from_config(config)
    cameras = cameras_from_config(config, scene)
    r = config["renderer"]
    gt_steps = r["gt_supersampling"] * (r["n_coarse"] + r["n_importance"])
    return render_dataset(
        scene, cameras, out_dir,
        gt_steps=gt_steps, t_near=r["t_near"], t_far=r["t_far"],
        background=r["background"],
        eval_camera_stride=config["cameras"]["eval_camera_stride"],
        seed=config["seed"],
    )


def train_model(config: dict, dataset: Dataset, run_dir: str | Path) -> tuple[RadianceModel, Adam]:
    """Train a model variant on the dataset; writes checkpoints and the log."""
    scene = scene_from_config(config)
    lo, hi = grid_bbox_from_config(config, scene)
    res = config["grid"]["resolution"]
    cfg = train_config_from_config(config)
    model = init_model((res, res, res), lo, hi, K=dataset.K, seed=config["seed"])
    runtime = build_runtime(dataset, split="train")
    variant = config["training"]["variant"]
    opt = train(model, runtime, cfg, run_dir, variant=variant)
    return model, opt


def blend_matrix_for_e(
    dataset: Dataset, config: dict, e: float, smoothing_iters: int | None = None
) -> BlendState:
    """BlendState for an arbitrary expression code of the dataset's scene."""
    bf = config["blendfield"]
    deformed = dataset.scene.deform(dataset.cage, float(e))
    table = build_descriptor_table(dataset.cage, dataset.training_deformed(), bf["neighborhood"])
    iters = bf["smoothing_iters"] if smoothing_iters is None else smoothing_iters
    lap = assemble_laplacian(dataset.cage)
    return build_blend_state(
        dataset.cage, table, deformed, bf["tau"], bf["lambda_diff"], iters, laplacian=lap
    )


def render_expression(
    model: RadianceModel,
    meta: dict,
    dataset: Dataset,
    config: dict,
    e: float,
    camera,
    *,
    mode: str = "inference",
    palette: np.ndarray | None = None,
    blend_override: np.ndarray | None = None,
) -> np.ndarray:
    """Render one camera at expression e with the proper blend weights."""
    r = config["renderer"]
    deformed = dataset.scene.deform(dataset.cage, float(e))
    bvh = TetBVH(dataset.cage, deformed)
    use_residuals = meta.get("use_residuals", True)
    blend = None
    alpha_const = None
    if blend_override is not None:
        blend = blend_override
    elif use_residuals:
        blend = blend_matrix_for_e(dataset, config, e).weights
    else:
        alpha_const = np.zeros(model.K)
    return render_image(
        model, dataset.cage, bvh, camera,
        mode=mode, n_coarse=r["n_coarse"], n_importance=r["n_importance"],
        background=r["background"], t_near=r["t_near"], t_far=r["t_far"],
        seed=config["seed"], blend_matrix=blend, alpha_const=alpha_const,
        palette=palette, workers=effective_workers(config),
    )


def evaluate(
    model: RadianceModel, meta: dict, dataset: Dataset, config: dict, split: str = "eval"
) -> MetricReport:
    """Render every frame of the split and score it against ground truth."""
    frames = dataset.frames_in_split(split)
    if not frames:
        raise DataError(f"split {split!r} is empty")
    report = MetricReport()
    blend_cache: dict[int, np.ndarray | None] = {}
    use_residuals = meta.get("use_residuals", True)
    r = config["renderer"]
    for fi, ref in enumerate(frames):
        x = dataset.expressions[ref.expression_id]
        if ref.expression_id not in blend_cache:
            blend_cache[ref.expression_id] = (
                blend_matrix_for_e(dataset, config, x.e).weights if use_residuals else None
            )
        blend = blend_cache[ref.expression_id]
        bvh = TetBVH(dataset.cage, x.deformed)
        img = render_image(
            model, dataset.cage, bvh, dataset.cameras[ref.camera_id],
            mode="inference", n_coarse=r["n_coarse"], n_importance=r["n_importance"],
            background=r["background"], t_near=r["t_near"], t_far=r["t_far"],
            seed=config["seed"], blend_matrix=blend,
            alpha_const=None if blend is not None else np.zeros(model.K),
            workers=effective_workers(config),
        )
        gt = read_ppm(dataset.root / ref.image_path)
        report.add(fi, ref.camera_id, x.e, psnr(img, gt), ssim(img, gt))
    return report


def inspect_weights(
    model: RadianceModel, dataset: Dataset, config: dict, e: float, camera
) -> tuple[np.ndarray, np.ndarray]:
    """Weight visualizations before and after smoothing (Fig.-style side by side).

    Sample colors are replaced by a fixed per-expression palette blended by
    alpha; density still comes from the model so the object silhouette holds.
    """
    if model.K > len(WEIGHT_PALETTE):
        raise DataError(f"palette supports K <= {len(WEIGHT_PALETTE)}, got {model.K}")
    state = blend_matrix_for_e(dataset, config, e)
    meta = {"use_residuals": True}
    palette = WEIGHT_PALETTE[: model.K]
    raw = render_expression(
        model, meta, dataset, config, e, camera,
        palette=palette, blend_override=state.unsmoothed,
    )
    smoothed = render_expression(
        model, meta, dataset, config, e, camera,
        palette=palette, blend_override=state.weights,
    )
    return raw, smoothed


def load_checkpoint_model(path: str | Path) -> tuple[RadianceModel, Adam, int, dict]:
    return checkpoint_load(path)


def _train_variant_job(args: tuple) -> tuple[str, str]:
    config, dataset_root, run_dir, variant = args
    import copy

    cfg = copy.deepcopy(config)
    cfg["training"]["variant"] = variant
    dataset = load_dataset(dataset_root)
    train_model(cfg, dataset, run_dir)
    return variant, str(Path(run_dir) / "model.bc")


def _loss_curve_job(args: tuple) -> list[float]:
    config, dataset_root, seed, steps = args
    import dataclasses

    from .training import Adam, build_runtime, model_params, select_frames, train_step

    dataset = load_dataset(dataset_root)
    scene = scene_from_config(config)
    lo, hi = grid_bbox_from_config(config, scene)
    res = config["grid"]["resolution"]
    model = init_model((res, res, res), lo, hi, K=dataset.K, seed=seed)
    cfg = dataclasses.replace(train_config_from_config(config), seed=seed)
    runtime = build_runtime(dataset, split="train")
    opt = Adam(model_params(model), cfg.beta1, cfg.beta2, cfg.eps)
    ids = select_frames(runtime, config["training"]["variant"])
    return [train_step(model, runtime, ids, opt, cfg, s)["loss_rgb"] for s in range(steps)]


def training_loss_curves(
    config: dict, dataset_root: str | Path, seeds: list[int], steps: int, parallel: bool = True
) -> list[list[float]]:
    """Per-step training losses for several seeds (independent runs)."""
    jobs = [(config, str(dataset_root), seed, steps) for seed in seeds]
    if parallel and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor
        import os

        workers = min(len(jobs), max(1, os.cpu_count() or 1))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_loss_curve_job, jobs))
    return [_loss_curve_job(j) for j in jobs]


def train_variants(
    config: dict,
    dataset_root: str | Path,
    run_root: str | Path,
    variants: tuple[str, ...] = ("full", "template_avg", "template_single"),
    parallel: bool = True,
) -> dict[str, str]:
    """Train several model variants on one dataset, one worker process each.

    Every variant is an independent single-threaded deterministic run, so
    parallel execution changes wall time only, never results.
    """
    jobs = [
        (config, str(dataset_root), str(Path(run_root) / variant), variant)
        for variant in variants
    ]
    out: dict[str, str] = {}
    if parallel and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=len(jobs)) as pool:
            for variant, ckpt in pool.map(_train_variant_job, jobs):
                out[variant] = ckpt
    else:
        for job in jobs:
            variant, ckpt = _train_variant_job(job)
            out[variant] = ckpt
    return out
