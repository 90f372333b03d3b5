"""Pinhole rays, stratified/importance sampling and emission-absorption compositing.

The compositor implements the standard discrete quadrature of the volume
rendering integral, returns per-sample weights for importance sampling, and
carries enough state to backpropagate pixel gradients to per-sample density
and color exactly (closed form, no autodiff).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bvh import TetBVH, canonicalize_points
from .radiance import RadianceModel, gather, sigmoid, softplus, trilinear_handle
from .rng import PURPOSE_RENDER, stream
from .tetmesh import TetCage

# Accumulation stops once transmittance drops below this; truncated samples
# are absent from both the forward sum and the gradients.
EARLY_STOP_T = 1e-4

# Importance weights are floored before CDF normalization.
WEIGHT_FLOOR = 1e-5


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # camera-to-world, columns are camera axes in world
    center: np.ndarray  # camera position in world

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-9:
            raise ValueError(f"rotation not orthonormal (err {err:.2e})")

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation": self.rotation.reshape(-1).tolist(),
            "center": self.center.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
            width=d["width"], height=d["height"],
            rotation=np.array(d["rotation"], dtype=np.float64).reshape(3, 3),
            center=np.array(d["center"], dtype=np.float64),
        )


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-12:
            raise ValueError("ray direction must be unit length")
        if not self.t_near < self.t_far:
            raise ValueError("t_near must be < t_far")


def generate_rays(camera: Camera, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rays through sub-pixel coordinates (px, py); returns (origins, unit dirs)."""
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    d = np.stack(
        [
            (pixels[:, 0] - camera.cx) / camera.fx,
            (pixels[:, 1] - camera.cy) / camera.fy,
            np.ones(len(pixels)),
        ],
        axis=1,
    )
    d_world = d @ camera.rotation.T
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.center, d_world.shape).copy()
    return origins, d_world


def generate_ray(camera: Camera, px: float, py: float, t_near: float, t_far: float) -> Ray:
    origins, dirs = generate_rays(camera, np.array([[px, py]]))
    return Ray(origins[0], dirs[0], t_near, t_far)


def project(camera: Camera, points: np.ndarray) -> np.ndarray:
    """World points to pixel coordinates (reprojection helper for tests/tools)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    q = (points - camera.center) @ camera.rotation
    return np.stack(
        [camera.fx * q[:, 0] / q[:, 2] + camera.cx, camera.fy * q[:, 1] / q[:, 2] + camera.cy],
        axis=1,
    )


def image_pixels(camera: Camera) -> np.ndarray:
    """All pixel centers in row-major order, shape (H*W, 2)."""
    xs = np.arange(camera.width) + 0.5
    ys = np.arange(camera.height) + 0.5
    px, py = np.meshgrid(xs, ys)
    return np.stack([px.ravel(), py.ravel()], axis=1)


@dataclass
class SampleSet:
    """Quadrature samples for a batch of rays (R rays x N samples)."""

    t: np.ndarray  # (R, N), strictly increasing per ray
    delta: np.ndarray  # (R, N); delta_i = t_{i+1} - t_i, last closes at span end
    span_end: np.ndarray  # (R,)
    origins: np.ndarray | None = None  # (R, 3)
    dirs: np.ndarray | None = None  # (R, 3), unit
    canonical: np.ndarray | None = None  # (R, N, 3), NaN at Miss
    tet_ids: np.ndarray | None = None  # (R, N), -1 at Miss
    bary: np.ndarray | None = None  # (R, N, 4)
    sigma: np.ndarray | None = None  # (R, N)
    color: np.ndarray | None = None  # (R, N, 3)
    alpha: np.ndarray | None = None  # (R, N, K)
    weights: np.ndarray | None = None  # (R, N) after compositing


def deltas_from_t(t: np.ndarray, span_end: np.ndarray) -> np.ndarray:
    delta = np.empty_like(t)
    delta[:, :-1] = t[:, 1:] - t[:, :-1]
    delta[:, -1] = span_end - t[:, -1]
    return delta


def sample_coarse(
    t0: np.ndarray, t1: np.ndarray, n: int, rng: np.random.Generator | None = None,
    u: np.ndarray | None = None,
) -> SampleSet:
    """Stratified samples: the span split into n equal bins, one uniform draw per bin.

    `u` can inject the per-bin unit draws directly (tests freeze it at 0.5 to
    get the midpoint ladder); otherwise they come from `rng`.
    """
    t0 = np.atleast_1d(np.asarray(t0, dtype=np.float64))
    t1 = np.atleast_1d(np.asarray(t1, dtype=np.float64))
    r = len(t0)
    if u is None:
        u = rng.random((r, n))
    width = (t1 - t0)[:, None] / n
    t = t0[:, None] + (np.arange(n) + u) * width
    return SampleSet(t=t, delta=deltas_from_t(t, t1), span_end=t1)


def importance_t(
    coarse_weights: np.ndarray, t0: np.ndarray, span_end: np.ndarray, n_importance: int,
    rng: np.random.Generator | None = None, u: np.ndarray | None = None,
) -> np.ndarray:
    """Inverse-CDF draws (R, n_importance) from the piecewise-constant coarse
    weight distribution over the stratification bins.

    Weights are floored at WEIGHT_FLOOR and normalized; unit draws are
    stratified so that equal weights reduce to stratified uniform sampling.
    """
    t0 = np.atleast_1d(np.asarray(t0, dtype=np.float64))
    r, nc = coarse_weights.shape
    w = np.maximum(coarse_weights, WEIGHT_FLOOR)
    cdf = np.cumsum(w, axis=1)
    cdf /= cdf[:, -1:]
    if u is None:
        u = (np.arange(n_importance) + rng.random((r, n_importance))) / n_importance
    # Row-wise searchsorted on a flattened, offset CDF.
    offsets = 2.0 * np.arange(r)[:, None]
    flat_cdf = (cdf + offsets).ravel()
    flat_u = (np.clip(u, 0.0, 1.0 - 1e-12) + offsets).ravel()
    bins = (np.searchsorted(flat_cdf, flat_u, side="right") - np.repeat(np.arange(r), n_importance) * nc)
    bins = np.clip(bins.reshape(r, n_importance), 0, nc - 1)

    cdf_lo = np.where(bins > 0, np.take_along_axis(cdf, np.maximum(bins - 1, 0), axis=1), 0.0)
    cdf_hi = np.take_along_axis(cdf, bins, axis=1)
    frac = (u - cdf_lo) / np.maximum(cdf_hi - cdf_lo, 1e-300)
    bin_width = (span_end - t0)[:, None] / nc
    return t0[:, None] + (bins + frac) * bin_width


def sample_importance(
    coarse: SampleSet, coarse_weights: np.ndarray, t0: np.ndarray, n_importance: int,
    rng: np.random.Generator | None = None, u: np.ndarray | None = None,
) -> SampleSet:
    """Importance draws merged and sorted with the coarse samples."""
    t_new = importance_t(coarse_weights, t0, coarse.span_end, n_importance, rng=rng, u=u)
    t_all = np.sort(np.concatenate([coarse.t, t_new], axis=1), axis=1)
    return SampleSet(t=t_all, delta=deltas_from_t(t_all, coarse.span_end), span_end=coarse.span_end)


@dataclass
class CompositeTape:
    """Forward state needed to backpropagate the composite exactly."""

    sigma: np.ndarray
    color: np.ndarray
    delta: np.ndarray
    keep: np.ndarray
    trans: np.ndarray  # T_i before each sample (with truncation applied)
    att: np.ndarray  # exp(-sigma_i * delta_i) for kept samples, 1 otherwise
    weights: np.ndarray
    t_final: np.ndarray
    background: np.ndarray


def composite(
    samples: SampleSet, background: np.ndarray
) -> tuple[np.ndarray, np.ndarray, CompositeTape]:
    """Discrete emission-absorption quadrature.

    C = sum_i T_i (1 - exp(-sigma_i delta_i)) c_i + T_final * background with
    T_i = exp(-sum_{j<i} sigma_j delta_j). Accumulation stops once T drops
    below EARLY_STOP_T; truncated samples are absent (zero weight/gradient).
    Returns (pixel colors, per-sample weights, tape).
    """
    sigma, color, delta = samples.sigma, samples.color, samples.delta
    background = np.asarray(background, dtype=np.float64)
    s = sigma * delta
    acc = np.cumsum(s, axis=1)
    trans_pre = np.exp(-(acc - s))  # T before each sample
    keep = trans_pre >= EARLY_STOP_T
    s_eff = s * keep
    acc_eff = np.cumsum(s_eff, axis=1)
    trans = np.exp(-(acc_eff - s_eff))
    att = np.exp(-s_eff)
    weights = trans * (1.0 - att)
    t_final = np.exp(-acc_eff[:, -1])
    pixel = np.einsum("rn,rnc->rc", weights, color) + t_final[:, None] * background
    tape = CompositeTape(sigma, color, delta, keep, trans, att, weights, t_final, background)
    return pixel, weights, tape


def backprop_composite(tape: CompositeTape, pixel_grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact reverse-mode gradients of the composite w.r.t. per-sample sigma and color.

    dC/dc_i = w_i; dC/dsigma_i = delta_i (T_i exp(-s_i) c_i - sum_{j>i} w_j c_j
    - T_final * background). Truncated samples get zero gradient.
    """
    wc = tape.weights[:, :, None] * tape.color  # (R, N, 3)
    suffix = np.cumsum(wc[:, ::-1], axis=1)[:, ::-1] - wc  # sum_{j>i} w_j c_j
    inner = (
        tape.trans[:, :, None] * tape.att[:, :, None] * tape.color
        - suffix
        - tape.t_final[:, None, None] * tape.background
    )
    d_sigma = tape.delta * np.einsum("rnc,rc->rn", inner, pixel_grad) * tape.keep
    d_color = tape.weights[:, :, None] * pixel_grad[:, None, :]
    return d_sigma, d_color


def blend_alpha_at_samples(
    blend_matrix: np.ndarray, cage: TetCage, tet_ids: np.ndarray, bary: np.ndarray
) -> np.ndarray:
    """Barycentric interpolation of per-vertex blend rows, renormalized to sum 1.

    Works on flat located samples; Miss entries (tet -1) get zero rows.
    """
    n, k = len(tet_ids), blend_matrix.shape[1]
    alpha = np.zeros((n, k), dtype=np.float64)
    hit = tet_ids >= 0
    if hit.any():
        rows = blend_matrix[cage.tets[tet_ids[hit]]]  # (n, 4, K)
        a = np.einsum("nc,nck->nk", bary[hit], rows)
        a = np.clip(a, 0.0, None)
        a /= np.maximum(a.sum(axis=1, keepdims=True), 1e-300)
        alpha[hit] = a
    return alpha


def fill_radiance(
    samples: SampleSet,
    model: RadianceModel,
    cage: TetCage,
    bvh: TetBVH,
    alpha_const: np.ndarray | None = None,
    blend_matrix: np.ndarray | None = None,
    palette: np.ndarray | None = None,
    need_color: bool = True,
):
    """Canonicalize sample points and fill sigma/color/alpha in place.

    Blend weights come either from a constant K-vector (training indicator) or
    from a per-vertex blend matrix evaluated at each sample. With `palette`,
    sample colors are the palette blended by alpha instead of the model color
    (weight-visualization mode); density still comes from the model.
    """
    r, n = samples.t.shape
    pts = samples.origins[:, None, :] + samples.t[:, :, None] * samples.dirs[:, None, :]
    flat = pts.reshape(-1, 3)
    canonical, tet_ids, bary = canonicalize_points(cage, bvh, flat)
    samples.canonical = canonical.reshape(r, n, 3)
    samples.tet_ids = tet_ids.reshape(r, n)
    samples.bary = bary.reshape(r, n, 4)

    hit = tet_ids >= 0
    sigma = np.zeros(r * n)
    color = np.zeros((r * n, 3)) if need_color else None
    k = model.K
    alpha_flat = np.zeros((r * n, k))
    if hit.any():
        chit = canonical[hit]
        idx, w = trilinear_handle(model.density, chit)
        sigma[hit] = softplus(gather(model.density.flat_values(), idx, w)[:, 0])
        if alpha_const is not None:
            alpha_flat[hit] = alpha_const
        elif blend_matrix is not None:
            alpha_flat[hit] = blend_alpha_at_samples(blend_matrix, cage, tet_ids[hit], bary[hit])
        if need_color:
            if palette is not None:
                color[hit] = alpha_flat[hit] @ palette
            else:
                c = sigmoid(gather(model.template_color.flat_values(), idx, w))
                for kk, res in enumerate(model.residuals):
                    c += alpha_flat[hit][:, kk : kk + 1] * gather(res.flat_values(), idx, w)
                color[hit] = np.clip(c, 0.0, 1.0)
    samples.sigma = sigma.reshape(r, n)
    if need_color:
        samples.color = color.reshape(r, n, 3)
    samples.alpha = alpha_flat.reshape(r, n, k)


def render_rays(
    model: RadianceModel,
    cage: TetCage,
    bvh: TetBVH,
    origins: np.ndarray,
    dirs: np.ndarray,
    *,
    t_near: float,
    t_far: float,
    mode: str,
    n_coarse: int,
    n_importance: int,
    background: np.ndarray,
    rng: np.random.Generator,
    alpha_const: np.ndarray | None = None,
    blend_matrix: np.ndarray | None = None,
    palette: np.ndarray | None = None,
) -> np.ndarray:
    """Forward rendering of a ray batch; returns pixel colors (R, 3).

    mode='train': two-stage coarse+importance sampling; mode='inference':
    single-stage stratified sampling with n_coarse+n_importance samples.
    Sampling is restricted to the conservative cage span; rays that miss the
    cage entirely return the background.
    """
    background = np.asarray(background, dtype=np.float64)
    r = len(origins)
    pixel = np.tile(background, (r, 1))
    t0, t1, hit = bvh.ray_spans(origins, dirs, t_near, t_far)
    if not hit.any():
        return pixel
    ho, hd = origins[hit], dirs[hit]
    ht0, ht1 = t0[hit], t1[hit]

    if mode == "inference":
        samples = sample_coarse(ht0, ht1, n_coarse + n_importance, rng=rng)
        samples.origins, samples.dirs = ho, hd
        fill_radiance(samples, model, cage, bvh, alpha_const, blend_matrix, palette)
        out, _, _ = composite(samples, background)
    elif mode == "train":
        coarse = sample_coarse(ht0, ht1, n_coarse, rng=rng)
        coarse.origins, coarse.dirs = ho, hd
        fill_radiance(coarse, model, cage, bvh, alpha_const, blend_matrix, palette, need_color=False)
        coarse.color = np.zeros((*coarse.sigma.shape, 3))
        _, cw, _ = composite(coarse, np.zeros(3))
        merged = sample_importance(coarse, cw, ht0, n_importance, rng=rng)
        merged.origins, merged.dirs = ho, hd
        fill_radiance(merged, model, cage, bvh, alpha_const, blend_matrix, palette)
        out, _, _ = composite(merged, background)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    pixel[hit] = out
    return pixel


def render_image(
    model: RadianceModel,
    cage: TetCage,
    bvh: TetBVH,
    camera: Camera,
    *,
    mode: str = "inference",
    n_coarse: int = 128,
    n_importance: int = 64,
    background=(1.0, 1.0, 1.0),
    t_near: float = 0.05,
    t_far: float = 20.0,
    seed: int = 0,
    alpha_const: np.ndarray | None = None,
    blend_matrix: np.ndarray | None = None,
    palette: np.ndarray | None = None,
    chunk: int = 4096,
    workers: int = 1,
) -> np.ndarray:
    """Render a full image (H, W, 3) in row-major pixel order, deterministically.

    The rng stream is keyed by (seed, chunk index) and chunks are merged in
    fixed order, so the result is identical across runs and worker counts.
    """
    pixels = image_pixels(camera)
    origins, dirs = generate_rays(camera, pixels)
    out = np.empty((len(pixels), 3))
    chunks = [(ci, lo, min(lo + chunk, len(pixels))) for ci, lo in enumerate(range(0, len(pixels), chunk))]

    def run_chunk(spec):
        ci, lo, hi = spec
        rng = stream(seed, PURPOSE_RENDER, ci)
        return lo, hi, render_rays(
            model, cage, bvh, origins[lo:hi], dirs[lo:hi],
            t_near=t_near, t_far=t_far, mode=mode, n_coarse=n_coarse,
            n_importance=n_importance, background=np.asarray(background, dtype=np.float64),
            rng=rng, alpha_const=alpha_const, blend_matrix=blend_matrix, palette=palette,
        )

    if workers <= 1 or len(chunks) == 1:
        results = map(run_chunk, chunks)
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_chunk, chunks))
    for lo, hi, vals in results:
        out[lo:hi] = vals
    return out.reshape(camera.height, camera.width, 3)
