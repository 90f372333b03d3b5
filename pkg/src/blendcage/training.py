"""Indicator-gated reconstruction training of the grid radiance model.

Each step renders a seeded batch of rays from one frame (round-robin),
computes the mean-squared pixel loss with the frame's indicator blend vector,
backpropagates analytically through compositing, activations and trilinear
sampling, and applies Adam. Everything is deterministic given (seed, step),
so checkpoint resume reproduces an uninterrupted run bit for bit.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bvh import TetBVH, canonicalize_points
from .errors import CorruptFile, NonFiniteLoss, VersionMismatch
from .images import read_ppm
from .kernels import adam_update, field_backward, field_forward
from .radiance import RadianceModel, VoxelGrid
from .renderer import (SampleSet, backprop_composite, composite, deltas_from_t,
                       generate_rays, image_pixels, importance_t, sample_coarse)
from .rng import PURPOSE_TRAIN, stream
from .scenes import Dataset

CHECKPOINT_MAGIC = b"BCCKPT01"


@dataclass
class TrainConfig:
    batch_rays: int = 1024
    n_coarse: int = 128
    n_importance: int = 64
    lr: float = 5e-4
    lr_decay_factor: float = 0.1
    lr_decay_steps: int = 20000
    total_steps: int = 20000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    sparsity_weight: float = 0.0
    seed: int = 0
    use_residuals: bool = True
    residual_lr_scale: float = 1.0
    log_every: int = 100
    checkpoint_every: int = 5000

    def __post_init__(self):
        if min(self.batch_rays, self.n_coarse, self.n_importance, self.total_steps) < 1:
            raise ValueError("counts must be positive")
        if self.lr < 0 or self.lr_decay_steps < 1:
            raise ValueError("bad learning rate schedule")


def lr_at(cfg: TrainConfig, step: int) -> float:
    return cfg.lr * cfg.lr_decay_factor ** (step // cfg.lr_decay_steps)


def training_alpha(K: int, k: int | None) -> np.ndarray:
    """Indicator vector for frame expression k (1-based); NEUTRAL (None) -> zeros."""
    a = np.zeros(K)
    if k is not None:
        if not 1 <= k <= K:
            raise ValueError(f"expression index {k} outside 1..{K}")
        a[k - 1] = 1.0
    return a


def rgb_loss(predicted: np.ndarray, target: np.ndarray) -> float:
    """Mean over the batch of the squared L2 error over RGB."""
    predicted = np.atleast_2d(predicted)
    target = np.atleast_2d(target)
    if predicted.shape != target.shape:
        raise ValueError(f"shape mismatch {predicted.shape} vs {target.shape}")
    return float(((predicted - target) ** 2).sum(axis=1).mean())


_EMPTY_FLAT = np.empty(0, dtype=np.float64)
_EMPTY_RGB = np.empty((0, 3), dtype=np.float64)


class Adam:
    """Adam with bias correction over named parameter arrays (fused in-place update)."""

    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float, lr_scales: dict[str, float] | None = None):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = grads.get(name)
            scale = 1.0 if lr_scales is None else lr_scales.get(name, 1.0)
            adam_update(
                p.reshape(-1), self.m[name].reshape(-1), self.v[name].reshape(-1),
                g.reshape(-1) if g is not None else _EMPTY_FLAT, g is not None,
                lr * scale, self.beta1, self.beta2, self.eps, bc1, bc2,
            )


def model_params(model: RadianceModel) -> dict[str, np.ndarray]:
    params = {"density": model.density.values, "template": model.template_color.values}
    for k, g in enumerate(model.residuals):
        params[f"residual_{k}"] = g.values
    return params


@dataclass
class Frame:
    """One posed training/eval image with its camera and deformation."""

    image: np.ndarray  # (H, W, 3) in [0, 1]
    camera_id: int
    expression_id: int
    k: int | None  # 1-based training expression index, None = NEUTRAL/eval
    e: float
    split: str


@dataclass
class SceneRuntime:
    """Dataset unpacked for training: images in memory, one BVH per expression."""

    dataset: Dataset
    frames: list[Frame]
    bvhs: dict[int, TetBVH]  # expression_id -> BVH
    ray_dirs: dict[int, np.ndarray]  # camera_id -> (H*W, 3)
    ray_origins: dict[int, np.ndarray]
    targets: list[np.ndarray]  # per frame, (H*W, 3)


def build_runtime(dataset: Dataset, split: str = "train") -> SceneRuntime:
    frames = []
    targets = []
    bvhs: dict[int, TetBVH] = {}
    ray_dirs: dict[int, np.ndarray] = {}
    ray_origins: dict[int, np.ndarray] = {}
    for ref in dataset.frames_in_split(split):
        x = dataset.expressions[ref.expression_id]
        img = read_ppm(dataset.root / ref.image_path)
        frames.append(Frame(img, ref.camera_id, ref.expression_id, x.k, x.e, ref.split))
        targets.append(img.reshape(-1, 3))
        if ref.expression_id not in bvhs:
            bvhs[ref.expression_id] = TetBVH(dataset.cage, x.deformed)
        if ref.camera_id not in ray_dirs:
            cam = dataset.cameras[ref.camera_id]
            o, d = generate_rays(cam, image_pixels(cam))
            ray_origins[ref.camera_id], ray_dirs[ref.camera_id] = o, d
    return SceneRuntime(dataset, frames, bvhs, ray_dirs, ray_origins, targets)


def select_frames(runtime: SceneRuntime, variant: str) -> list[int]:
    """Frame subset per model variant.

    'full' and 'template_avg' train on all frames; 'template_single' trains
    only on the frames of the most extreme training expression (largest e).
    """
    if variant in ("full", "template_avg"):
        return list(range(len(runtime.frames)))
    if variant == "template_single":
        e_max = max(f.e for f in runtime.frames)
        return [i for i, f in enumerate(runtime.frames) if f.e == e_max]
    raise ValueError(f"unknown variant {variant!r}")


def _grid_geometry(model: RadianceModel):
    g = model.density
    lo = g.bbox_min
    inv_extent = 1.0 / (g.bbox_max - g.bbox_min)
    nx, ny, nz = g.resolution
    return lo, inv_extent, nx, ny, nz


@dataclass
class FieldEval:
    """Fused field evaluation at flat sample points plus its backward caches."""

    sigma: np.ndarray
    color: np.ndarray
    rawd: np.ndarray
    base: np.ndarray
    cpre: np.ndarray
    idx: np.ndarray
    w: np.ndarray
    hit: np.ndarray


def evaluate_field(
    model: RadianceModel, points: np.ndarray, hit: np.ndarray, k_active: int | None,
    want_color: bool = True,
) -> FieldEval:
    """Sample density/template/active-residual grids at hit points (fused kernel)."""
    n = len(points)
    sigma = np.zeros(n)
    color = np.zeros((n, 3))
    rawd = np.zeros(n)
    base = np.zeros((n, 3))
    cpre = np.zeros((n, 3))
    idx = np.zeros((n, 8), dtype=np.int64)
    w = np.zeros((n, 8))
    lo, inv_extent, nx, ny, nz = _grid_geometry(model)
    k = -1 if k_active is None else k_active
    residual = model.residuals[k].flat_values() if k >= 0 else _EMPTY_RGB
    field_forward(
        points, hit, lo, inv_extent, nx, ny, nz,
        model.density.values.reshape(-1), model.template_color.flat_values(),
        residual, k, want_color,
        sigma, color, rawd, base, cpre, idx, w,
    )
    return FieldEval(sigma, color, rawd, base, cpre, idx, w, hit)


@dataclass
class FrozenBatch:
    """Fixed sample geometry for one ray batch (positions independent of params)."""

    samples: SampleSet  # merged samples of span-hit rays
    canonical: np.ndarray  # (R_hit * N, 3)
    sample_hit: np.ndarray  # (R_hit * N,)
    targets_hit: np.ndarray  # (R_hit, 3)
    miss_loss_sum: float  # sum of squared errors of span-miss rays (constant)
    batch_rays: int


def loss_and_grads(
    model: RadianceModel, batch: FrozenBatch, k_active: int | None,
    background: np.ndarray, sparsity_weight: float = 0.0,
) -> tuple[float, float, np.ndarray, dict[str, np.ndarray]]:
    """Loss and analytic grid gradients for a frozen sample geometry.

    This is the function the finite-difference oracle checks: sample positions
    are inputs, so the derivative chain is exactly compositing -> activations
    -> trilinear weights.
    """
    samples, n_flat = batch.samples, len(batch.canonical)
    fe = evaluate_field(model, batch.canonical, batch.sample_hit, k_active)
    samples.sigma = fe.sigma.reshape(samples.t.shape)
    samples.color = fe.color.reshape(*samples.t.shape, 3)
    pixels, _, tape = composite(samples, background)

    err = pixels - batch.targets_hit
    loss_rgb_val = (float((err**2).sum()) + batch.miss_loss_sum) / batch.batch_rays
    loss_sparse = sparsity_weight * float(fe.sigma.mean()) if sparsity_weight > 0.0 else 0.0

    pixel_grad = 2.0 * err / batch.batch_rays
    d_sigma, d_color = backprop_composite(tape, pixel_grad)
    d_sigma = np.ascontiguousarray(d_sigma.reshape(-1))
    d_color = np.ascontiguousarray(d_color.reshape(-1, 3))
    if sparsity_weight > 0.0:
        d_sigma += sparsity_weight / n_flat

    g_density = np.zeros(model.density.num_nodes)
    g_template = np.zeros((model.density.num_nodes, 3))
    g_residual = np.zeros((model.density.num_nodes, 3)) if k_active is not None else _EMPTY_RGB
    field_backward(
        fe.idx, fe.w, fe.hit, fe.rawd, fe.base, fe.cpre, d_sigma, d_color,
        -1 if k_active is None else k_active,
        g_density, g_template, g_residual,
    )
    grads = {
        "density": g_density.reshape(model.density.values.shape),
        "template": g_template.reshape(model.template_color.values.shape),
    }
    if k_active is not None:
        grads[f"residual_{k_active}"] = g_residual.reshape(model.residuals[k_active].values.shape)
    return loss_rgb_val, loss_sparse, pixels, grads


def make_frozen_batch(
    model: RadianceModel,
    runtime: SceneRuntime,
    frame: Frame,
    target: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
    k_active: int | None,
) -> FrozenBatch:
    """Draw the step's rays and freeze their two-stage sample geometry."""
    bvh = runtime.bvhs[frame.expression_id]
    cage = runtime.dataset.cage
    ray_ids = rng.integers(0, len(target), size=cfg.batch_rays)
    origins = runtime.ray_origins[frame.camera_id][ray_ids]
    dirs = runtime.ray_dirs[frame.camera_id][ray_ids]
    tgt = target[ray_ids]
    t_near = runtime.dataset.render_params["t_near"]
    t_far = runtime.dataset.render_params["t_far"]
    background = np.asarray(runtime.dataset.render_params["background"], dtype=np.float64)

    t0, t1, hit = bvh.ray_spans(origins, dirs, t_near, t_far)
    miss_loss_sum = float(((background - tgt[~hit]) ** 2).sum())
    if not hit.any():
        empty = SampleSet(t=np.zeros((0, 1)), delta=np.zeros((0, 1)), span_end=np.zeros(0))
        return FrozenBatch(empty, np.zeros((0, 3)), np.zeros(0, bool), tgt[hit], miss_loss_sum, cfg.batch_rays)
    ho, hd = origins[hit], dirs[hit]
    ht0, ht1 = t0[hit], t1[hit]

    coarse = sample_coarse(ht0, ht1, cfg.n_coarse, rng=rng)
    cpts = (ho[:, None, :] + coarse.t[:, :, None] * hd[:, None, :]).reshape(-1, 3)
    ccan, ctet, _ = canonicalize_points(cage, bvh, cpts)
    cfe = evaluate_field(model, ccan, ctet >= 0, None, want_color=False)
    coarse.sigma = cfe.sigma.reshape(coarse.t.shape)
    coarse.color = np.zeros((*coarse.t.shape, 3))
    _, cweights, _ = composite(coarse, np.zeros(3))

    t_imp = importance_t(cweights, ht0, ht1, cfg.n_importance, rng=rng)
    ipts = (ho[:, None, :] + t_imp[:, :, None] * hd[:, None, :]).reshape(-1, 3)
    ican, itet, _ = canonicalize_points(cage, bvh, ipts)

    # Merge by sorted t, reusing the coarse canonicalization.
    r = len(ho)
    t_cat = np.concatenate([coarse.t, t_imp], axis=1)
    can_cat = np.concatenate(
        [ccan.reshape(r, cfg.n_coarse, 3), ican.reshape(r, cfg.n_importance, 3)], axis=1
    )
    hit_cat = np.concatenate(
        [(ctet >= 0).reshape(r, cfg.n_coarse), (itet >= 0).reshape(r, cfg.n_importance)], axis=1
    )
    perm = np.argsort(t_cat, axis=1, kind="stable")
    t_merged = np.take_along_axis(t_cat, perm, axis=1)
    can_merged = np.take_along_axis(can_cat, perm[:, :, None], axis=1)
    hit_merged = np.take_along_axis(hit_cat, perm, axis=1)
    merged = SampleSet(t=t_merged, delta=deltas_from_t(t_merged, ht1), span_end=ht1)
    # NaN canonical coordinates on miss samples stay inert behind the hit mask.
    canonical = np.ascontiguousarray(np.nan_to_num(can_merged.reshape(-1, 3), nan=0.0))
    return FrozenBatch(merged, canonical, hit_merged.reshape(-1), tgt[hit], miss_loss_sum, cfg.batch_rays)


def train_step(
    model: RadianceModel,
    runtime: SceneRuntime,
    frame_ids: list[int],
    opt: Adam,
    cfg: TrainConfig,
    step: int,
) -> dict:
    """One optimization step; returns scalar metrics."""
    fid = frame_ids[step % len(frame_ids)]
    frame = runtime.frames[fid]
    target = runtime.targets[fid]
    rng = stream(cfg.seed, PURPOSE_TRAIN, step)
    background = np.asarray(runtime.dataset.render_params["background"], dtype=np.float64)

    k_active = None
    if cfg.use_residuals and frame.k is not None:
        k_active = frame.k - 1

    batch = make_frozen_batch(model, runtime, frame, target, cfg, rng, k_active)
    loss, loss_sparse, _, grads = loss_and_grads(
        model, batch, k_active, background, cfg.sparsity_weight
    )
    if not np.isfinite(loss + loss_sparse):
        raise NonFiniteLoss(
            f"non-finite loss at step {step}: rgb={loss}, sparse={loss_sparse}, "
            f"frame e={frame.e}, lr={lr_at(cfg, step)}"
        )
    if not cfg.use_residuals or cfg.residual_lr_scale == 0.0:
        for k in range(model.K):
            grads.pop(f"residual_{k}", None)
    lr_scales = {f"residual_{k}": cfg.residual_lr_scale for k in range(model.K)}
    opt.step(grads, lr_at(cfg, step), lr_scales)
    mse = loss / 3.0
    return {
        "step": step,
        "lr": lr_at(cfg, step),
        "loss_rgb": loss,
        "loss_sparsity": loss_sparse,
        "psnr_train": 10.0 * np.log10(1.0 / mse) if mse > 0 else 99.0,
    }


def train(
    model: RadianceModel,
    runtime: SceneRuntime,
    cfg: TrainConfig,
    run_dir: str | Path,
    *,
    variant: str = "full",
    start_step: int = 0,
    opt: Adam | None = None,
    log_name: str = "train_log.txt",
) -> Adam:
    """Run the training loop, appending log lines and writing checkpoints."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    frame_ids = select_frames(runtime, variant)
    if opt is None:
        opt = Adam(model_params(model), cfg.beta1, cfg.beta2, cfg.eps)
    log_path = run_dir / log_name
    with open(log_path, "a") as log:
        for step in range(start_step, cfg.total_steps):
            metrics = train_step(model, runtime, frame_ids, opt, cfg, step)
            if step % cfg.log_every == 0 or step == cfg.total_steps - 1:
                log.write(
                    "%d, %.8g, %.8g, %.8g, %.4f\n"
                    % (step, metrics["lr"], metrics["loss_rgb"],
                       metrics["loss_sparsity"], metrics["psnr_train"])
                )
                log.flush()
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                checkpoint_save(run_dir / f"ckpt_{step + 1:07d}.bc", model, opt, step + 1, cfg)
    checkpoint_save(run_dir / "model.bc", model, opt, cfg.total_steps, cfg)
    return opt


# ---------------------------------------------------------------------------
# Checkpoints: versioned binary container with checksum.
# ---------------------------------------------------------------------------


def checkpoint_save(path: str | Path, model: RadianceModel, opt: Adam, step: int, cfg: TrainConfig):
    params = model_params(model)
    names = list(params.keys())
    header = {
        "version": 1,
        "step": step,
        "adam_t": opt.t,
        "beta1": opt.beta1,
        "beta2": opt.beta2,
        "eps": opt.eps,
        "K": model.K,
        "resolution": list(model.density.resolution),
        "bbox_min": model.density.bbox_min.tolist(),
        "bbox_max": model.density.bbox_max.tolist(),
        "use_residuals": cfg.use_residuals,
        "arrays": [[n, list(params[n].shape)] for n in names],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += len(hbytes).to_bytes(8, "little")
    blob += hbytes
    for n in names:
        blob += np.ascontiguousarray(params[n], dtype=np.float64).tobytes()
    for n in names:
        blob += np.ascontiguousarray(opt.m[n], dtype=np.float64).tobytes()
        blob += np.ascontiguousarray(opt.v[n], dtype=np.float64).tobytes()
    digest = hashlib.sha256(bytes(blob)).digest()
    Path(path).write_bytes(bytes(blob) + digest)


def checkpoint_load(path: str | Path) -> tuple[RadianceModel, Adam, int, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 8 + 32:
        raise CorruptFile(f"checkpoint too short: {path}")
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise VersionMismatch(f"bad checkpoint magic in {path}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptFile(f"checksum mismatch in {path}")
    off = len(CHECKPOINT_MAGIC)
    hlen = int.from_bytes(body[off : off + 8], "little")
    off += 8
    header = json.loads(body[off : off + hlen].decode("utf-8"))
    if header.get("version") != 1:
        raise VersionMismatch(f"unsupported checkpoint version {header.get('version')}")
    off += hlen

    def take(shape):
        nonlocal off
        n = int(np.prod(shape))
        arr = np.frombuffer(body, dtype=np.float64, count=n, offset=off).reshape(shape).copy()
        off += n * 8
        return arr

    arrays = {}
    for name, shape in header["arrays"]:
        arrays[name] = take(shape)
    res = tuple(header["resolution"])
    bmin, bmax = np.array(header["bbox_min"]), np.array(header["bbox_max"])
    density = VoxelGrid(res, bmin, bmax, arrays["density"])
    template = VoxelGrid(res, bmin, bmax, arrays["template"])
    residuals = [VoxelGrid(res, bmin, bmax, arrays[f"residual_{k}"]) for k in range(header["K"])]
    model = RadianceModel(density, template, residuals)
    opt = Adam(model_params(model), header["beta1"], header["beta2"], header["eps"])
    opt.t = header["adam_t"]
    for name, shape in header["arrays"]:
        opt.m[name] = take(shape)
        opt.v[name] = take(shape)
    if off != len(body):
        raise CorruptFile(f"trailing bytes in checkpoint {path}")
    return model, opt, header["step"], header
