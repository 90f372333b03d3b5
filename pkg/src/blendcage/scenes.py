"""Procedural twist/bend cylinder benchmark with analytic ground truth.

The cage is a structured cylindrical lattice (wedge core + hex shells, each
hex split into 6 tets consistently, so all interior faces match). Ground
truth images come from a closed-form radiance: a high constant density inside
the deformed cylinder, a smooth albedo, and a high-frequency wrinkle term
whose amplitude is gated by the analytic strain of the deformation map, so
wrinkles appear exactly where the material shears or compresses and vanish at
rest. Ground truth never consults the cage; the cage only sees images.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .images import write_ppm
from .renderer import Camera, SampleSet, composite, generate_rays, image_pixels
from .tetmesh import DeformedVerts, TetCage, signed_volumes

MANIFEST_NAME = "manifest.json"
CAGE_NAME = "cage.txt"
DATASET_FORMAT = "blendcage-dataset"
DATASET_VERSION = 1


@dataclass
class CylinderSpec:
    radius: float = 0.5
    height: float = 2.0
    radial_segments: int = 16
    axial_segments: int = 8
    ring_layers: int = 2
    twist_max: float = 1.8  # radians of total twist at e=1
    bend_max: float = 1.2  # radians of total arc at e=1

    def __post_init__(self):
        if self.radial_segments < 3:
            raise ValueError("need >= 3 radial segments")
        if self.axial_segments < 2:
            raise ValueError("need >= 2 axial segments")
        if self.ring_layers < 1:
            raise ValueError("need >= 1 ring layer")
        if self.radius <= 0 or self.height <= 0:
            raise ValueError("radius and height must be positive")


def _hex_tets(c):
    """Kuhn 6-tet split of a hex cell around its main diagonal c000-c111.

    c[da][db][dc] are global vertex ids; the same local axis order on every
    cell makes all shared quad faces split along the same diagonal.
    """
    return [
        (c[0][0][0], c[1][0][0], c[1][1][0], c[1][1][1]),
        (c[0][0][0], c[1][1][0], c[0][1][0], c[1][1][1]),
        (c[0][0][0], c[0][1][0], c[0][1][1], c[1][1][1]),
        (c[0][0][0], c[0][1][1], c[0][0][1], c[1][1][1]),
        (c[0][0][0], c[0][0][1], c[1][0][1], c[1][1][1]),
        (c[0][0][0], c[1][0][1], c[1][0][0], c[1][1][1]),
    ]


def _wedge_tets(a0, a1, b0, c0, b1, c1):
    """Prism split into 3 tets with quad diagonals a0-b1, b0-c1, a0-c1."""
    return [(a0, b0, c0, c1), (a0, b0, c1, b1), (a0, b1, c1, a1)]


def make_cylinder_cage(spec: CylinderSpec) -> TetCage:
    """Structured cylinder cage: wedge core plus hex shells, all tets positive."""
    ns, na, nr = spec.radial_segments, spec.axial_segments, spec.ring_layers
    verts = []
    axis_id = {}
    ring_id = {}
    for l in range(na + 1):
        axis_id[l] = len(verts)
        verts.append((0.0, 0.0, spec.height * l / na))
    for j in range(1, nr + 1):
        r = spec.radius * j / nr
        for i in range(ns):
            th = 2.0 * np.pi * i / ns
            for l in range(na + 1):
                ring_id[(j, i, l)] = len(verts)
                verts.append((r * np.cos(th), r * np.sin(th), spec.height * l / na))
    verts = np.array(verts, dtype=np.float64)

    tets = []
    for l in range(na):
        for i in range(ns):
            i1 = (i + 1) % ns
            tets += _wedge_tets(
                axis_id[l], axis_id[l + 1],
                ring_id[(1, i, l)], ring_id[(1, i1, l)],
                ring_id[(1, i, l + 1)], ring_id[(1, i1, l + 1)],
            )
            for j in range(1, nr):
                c = [
                    [
                        [ring_id[(j + db, ia, l + dc)] for dc in (0, 1)]
                        for db in (0, 1)
                    ]
                    for ia in (i, i1)
                ]
                tets += _hex_tets(c)
    tets = np.array(tets, dtype=np.int64)
    vols = signed_volumes(verts, tets)
    flip = vols <= 0
    tets[flip] = tets[flip][:, [0, 1, 3, 2]]
    return TetCage(verts, tets)


# ---------------------------------------------------------------------------
# Deformation families: closed-form forward/inverse maps and strain.
# ---------------------------------------------------------------------------


def deform_twist(spec: CylinderSpec, cage: TetCage, e: float) -> DeformedVerts:
    """Rotate each vertex about the axis by e * twist_max * (z / height)."""
    p = cage.rest_vertices
    if e == 0.0:
        return DeformedVerts(e, p.copy())
    return DeformedVerts(e, twist_map(spec, p, e))


def twist_map(spec: CylinderSpec, points: np.ndarray, e: float) -> np.ndarray:
    phi = e * spec.twist_max * points[:, 2] / spec.height
    c, s = np.cos(phi), np.sin(phi)
    out = points.copy()
    out[:, 0] = c * points[:, 0] - s * points[:, 1]
    out[:, 1] = s * points[:, 0] + c * points[:, 1]
    return out


def twist_unmap(spec: CylinderSpec, points: np.ndarray, e: float) -> np.ndarray:
    return twist_map(spec, points, -e)


def twist_strain(spec: CylinderSpec, rest_points: np.ndarray, e: float) -> np.ndarray:
    """Frobenius norm of F^T F - I for the twist map (pure shear, det F = 1)."""
    r = np.hypot(rest_points[:, 0], rest_points[:, 1])
    gamma = e * spec.twist_max * r / spec.height
    return np.sqrt(2.0 * gamma**2 + gamma**4)


def deform_bend(spec: CylinderSpec, cage: TetCage, e: float) -> DeformedVerts:
    """Transport cross-sections rigidly along a circular arc of angle e * bend_max."""
    p = cage.rest_vertices
    if e == 0.0:
        return DeformedVerts(e, p.copy())
    return DeformedVerts(e, bend_map(spec, p, e))


def bend_map(spec: CylinderSpec, points: np.ndarray, e: float) -> np.ndarray:
    theta = e * spec.bend_max
    if theta == 0.0:
        return points.copy()
    rb = spec.height / theta
    phi = points[:, 2] * theta / spec.height
    rho = rb - points[:, 0]
    out = points.copy()
    out[:, 0] = rb - rho * np.cos(phi)
    out[:, 2] = rho * np.sin(phi)
    return out


def bend_unmap(spec: CylinderSpec, points: np.ndarray, e: float) -> np.ndarray:
    theta = e * spec.bend_max
    if theta == 0.0:
        return points.copy()
    rb = spec.height / theta
    phi = np.arctan2(points[:, 2], rb - points[:, 0])
    rho = np.hypot(rb - points[:, 0], points[:, 2])
    out = points.copy()
    out[:, 0] = rb - rho
    out[:, 2] = phi * spec.height / theta
    return out


def bend_strain(spec: CylinderSpec, rest_points: np.ndarray, e: float) -> np.ndarray:
    """|lambda^2 - 1| with lambda = 1 - x * theta / height (arc stretch factor)."""
    theta = e * spec.bend_max
    lam = 1.0 - rest_points[:, 0] * theta / spec.height
    return np.abs(lam * lam - 1.0)


_FAMILIES = {
    "twist": (twist_map, twist_unmap, twist_strain),
    "bend": (bend_map, bend_unmap, bend_strain),
}


@dataclass
class GTScene:
    """Analytic scene: deformation family plus the ground-truth radiance closure."""

    spec: CylinderSpec
    family: str = "twist"
    train_expressions: tuple = (0.0, 0.5, 1.0)
    sequence_frames: int = 25
    eval_every: int = 4
    sigma_inside: float = 50.0
    wrinkle_amplitude: float = 0.4
    wrinkle_freq_angular: int = 12
    wrinkle_freq_axial: int = 6
    strain_ref: float = 0.35  # strain at which wrinkles saturate

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ValueError(f"unknown deformation family {self.family!r}")

    def deform(self, cage: TetCage, e: float) -> DeformedVerts:
        if self.family == "twist":
            return deform_twist(self.spec, cage, e)
        return deform_bend(self.spec, cage, e)

    def unmap(self, points: np.ndarray, e: float) -> np.ndarray:
        return _FAMILIES[self.family][1](self.spec, points, e)

    def strain(self, rest_points: np.ndarray, e: float) -> np.ndarray:
        return _FAMILIES[self.family][2](self.spec, rest_points, e)

    def wrinkle_amplitude_at(self, rest_points: np.ndarray, e: float) -> np.ndarray:
        gate = np.clip(self.strain(rest_points, e) / self.strain_ref, 0.0, 1.0)
        return self.wrinkle_amplitude * gate

    def expression_sequence(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.sequence_frames)

    def eval_expressions(self) -> list[float]:
        seq = self.expression_sequence()[:: self.eval_every]
        train = np.asarray(self.train_expressions)
        return [float(e) for e in seq if np.abs(train - e).min() > 1e-9]

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "spec": {
                "radius": self.spec.radius, "height": self.spec.height,
                "radial_segments": self.spec.radial_segments,
                "axial_segments": self.spec.axial_segments,
                "ring_layers": self.spec.ring_layers,
                "twist_max": self.spec.twist_max, "bend_max": self.spec.bend_max,
            },
            "train_expressions": list(self.train_expressions),
            "sequence_frames": self.sequence_frames,
            "eval_every": self.eval_every,
            "sigma_inside": self.sigma_inside,
            "wrinkle_amplitude": self.wrinkle_amplitude,
            "wrinkle_freq_angular": self.wrinkle_freq_angular,
            "wrinkle_freq_axial": self.wrinkle_freq_axial,
            "strain_ref": self.strain_ref,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GTScene":
        return cls(
            spec=CylinderSpec(**d["spec"]),
            family=d["family"],
            train_expressions=tuple(d["train_expressions"]),
            sequence_frames=d["sequence_frames"],
            eval_every=d["eval_every"],
            sigma_inside=d["sigma_inside"],
            wrinkle_amplitude=d["wrinkle_amplitude"],
            wrinkle_freq_angular=d["wrinkle_freq_angular"],
            wrinkle_freq_axial=d["wrinkle_freq_axial"],
            strain_ref=d["strain_ref"],
        )


def gt_radiance(scene: GTScene, deformed_points: np.ndarray, e: float) -> tuple[np.ndarray, np.ndarray]:
    """Analytic (sigma, color) at deformed-space points for expression e.

    Undeform the points with the closed-form inverse map, test against the
    rest cylinder, and evaluate a smooth albedo plus the strain-gated wrinkle
    sinusoid in the rest parameterization.
    """
    pts = np.atleast_2d(np.asarray(deformed_points, dtype=np.float64))
    rest = scene.unmap(pts, e)
    spec = scene.spec
    r = np.hypot(rest[:, 0], rest[:, 1])
    z = rest[:, 2]
    inside = (r <= spec.radius) & (z >= 0.0) & (z <= spec.height)
    sigma = np.where(inside, scene.sigma_inside, 0.0)

    theta = np.arctan2(rest[:, 1], rest[:, 0])
    zn = 2.0 * np.pi * z / spec.height
    color = np.stack(
        [
            0.55 + 0.25 * np.sin(zn),
            0.50 + 0.20 * np.sin(theta + 1.0),
            0.45 + 0.15 * np.cos(zn - theta),
        ],
        axis=1,
    )
    amp = scene.wrinkle_amplitude_at(rest, e)
    pattern = np.sin(scene.wrinkle_freq_angular * theta + scene.wrinkle_freq_axial * zn)
    color += (amp * pattern)[:, None]
    color = np.clip(color, 0.0, 1.0)
    color[~inside] = 0.0
    return sigma, color


def scene_aabb(scene: GTScene, e: float, pad: float = 0.02) -> tuple[np.ndarray, np.ndarray]:
    """Conservative AABB of the deformed cylinder from densely sampled surface points."""
    spec = scene.spec
    th = np.linspace(0.0, 2.0 * np.pi, 65)
    zz = np.linspace(0.0, spec.height, 33)
    rr = np.linspace(0.0, spec.radius, 5)
    side = np.stack(
        [
            (spec.radius * np.cos(th)[:, None] * np.ones_like(zz)).ravel(),
            (spec.radius * np.sin(th)[:, None] * np.ones_like(zz)).ravel(),
            (np.ones_like(th)[:, None] * zz).ravel(),
        ],
        axis=1,
    )
    caps = []
    for zcap in (0.0, spec.height):
        caps.append(
            np.stack(
                [
                    (rr[:, None] * np.cos(th)).ravel(),
                    (rr[:, None] * np.sin(th)).ravel(),
                    np.full(len(rr) * len(th), zcap),
                ],
                axis=1,
            )
        )
    pts = np.concatenate([side, *caps])
    mapped = _FAMILIES[scene.family][0](spec, pts, e)
    lo, hi = mapped.min(axis=0), mapped.max(axis=0)
    margin = pad * np.linalg.norm(hi - lo)
    return lo - margin, hi + margin


def render_gt_image(
    scene: GTScene, camera: Camera, e: float, *,
    n_steps: int, t_near: float, t_far: float, background,
) -> np.ndarray:
    """Reference render: dense fixed-step midpoint quadrature of the analytic radiance."""
    background = np.asarray(background, dtype=np.float64)
    lo, hi = scene_aabb(scene, e)
    pixels = image_pixels(camera)
    origins, dirs = generate_rays(camera, pixels)
    t0, t1 = _aabb_spans(origins, dirs, lo, hi, t_near, t_far)
    hit = t1 > t0
    out = np.tile(background, (len(pixels), 1))
    if hit.any():
        ho, hd, a, b = origins[hit], dirs[hit], t0[hit], t1[hit]
        step = (b - a) / n_steps
        t = a[:, None] + (np.arange(n_steps) + 0.5) * step[:, None]
        pts = ho[:, None, :] + t[:, :, None] * hd[:, None, :]
        sigma, color = gt_radiance(scene, pts.reshape(-1, 3), e)
        ss = SampleSet(
            t=t,
            delta=np.broadcast_to(step[:, None], t.shape).copy(),
            span_end=b,
            sigma=sigma.reshape(t.shape),
            color=color.reshape(*t.shape, 3),
        )
        px, _, _ = composite(ss, background)
        out[hit] = px
    return out.reshape(camera.height, camera.width, 3)


def _aabb_spans(origins, dirs, lo, hi, t_near, t_far):
    """Vectorized slab test of many rays against one box."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - origins) * inv
        tb = (hi - origins) * inv
    tmin = np.where(np.isfinite(ta) | np.isfinite(tb), np.minimum(ta, tb), -np.inf)
    tmax = np.where(np.isfinite(ta) | np.isfinite(tb), np.maximum(ta, tb), np.inf)
    # Axis-parallel rays: inside the slab -> unbounded, outside -> empty.
    par = np.abs(dirs) < 1e-300
    out_slab = par & ((origins < lo) | (origins > hi))
    tmin = np.where(par, -np.inf, tmin)
    tmax = np.where(par, np.inf, tmax)
    t0 = np.maximum(tmin.max(axis=1), t_near)
    t1 = np.minimum(tmax.min(axis=1), t_far)
    t1 = np.where(out_slab.any(axis=1), t0 - 1.0, t1)
    return t0, t1


# ---------------------------------------------------------------------------
# Camera rig, dataset rendering and the manifest.
# ---------------------------------------------------------------------------


def look_at_camera(eye, target, image_size: int, focal: float) -> Camera:
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.array([0.0, 0.0, 1.0])
    z = target - eye
    z = z / np.linalg.norm(z)
    x = np.cross(z, up)
    nx = np.linalg.norm(x)
    if nx < 1e-9:  # looking straight up/down
        x = np.array([1.0, 0.0, 0.0])
    else:
        x = x / nx
    y = np.cross(z, x)
    rot = np.stack([x, y, z], axis=1)
    return Camera(
        fx=focal, fy=focal, cx=image_size / 2.0, cy=image_size / 2.0,
        width=image_size, height=image_size, rotation=rot, center=eye,
    )


def make_camera_rig(
    scene: GTScene, ring_count: int = 16, elevated_count: int = 4,
    image_size: int = 96, focal: float = 100.0,
    ring_radius: float = 3.2, elevated_height: float = 1.8, elevated_radius: float = 2.3,
) -> list[Camera]:
    center = np.array([0.0, 0.0, scene.spec.height / 2.0])
    cams = []
    for i in range(ring_count):
        th = 2.0 * np.pi * i / ring_count
        eye = center + np.array([ring_radius * np.cos(th), ring_radius * np.sin(th), 0.0])
        cams.append(look_at_camera(eye, center, image_size, focal))
    for i in range(elevated_count):
        th = 2.0 * np.pi * (i + 0.5) / max(elevated_count, 1)
        eye = center + np.array(
            [elevated_radius * np.cos(th), elevated_radius * np.sin(th), elevated_height]
        )
        cams.append(look_at_camera(eye, center, image_size, focal))
    return cams


@dataclass
class Expression:
    e: float
    k: int | None  # 1-based training index; None for eval-only expressions
    deformed: DeformedVerts


@dataclass
class FrameRef:
    camera_id: int
    expression_id: int
    image_path: str
    split: str  # train | eval


@dataclass
class Dataset:
    root: Path
    scene: GTScene
    cage: TetCage
    cameras: list[Camera]
    expressions: list[Expression]
    frames: list[FrameRef]
    render_params: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def K(self) -> int:
        return sum(1 for x in self.expressions if x.k is not None)

    def training_deformed(self) -> list[DeformedVerts]:
        tr = [x for x in self.expressions if x.k is not None]
        tr.sort(key=lambda x: x.k)
        return [x.deformed for x in tr]

    def frames_in_split(self, split: str) -> list[FrameRef]:
        return [f for f in self.frames if f.split == split]


def manifest_dict(ds: Dataset) -> dict:
    return {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "seed": ds.seed,
        "scene": ds.scene.to_dict(),
        "cage_file": CAGE_NAME,
        "render": ds.render_params,
        "cameras": [c.to_dict() for c in ds.cameras],
        "expressions": [
            {"e": x.e, "k": x.k, "vertices": x.deformed.positions.tolist()}
            for x in ds.expressions
        ],
        "frames": [
            {"camera": f.camera_id, "expression": f.expression_id, "image": f.image_path, "split": f.split}
            for f in ds.frames
        ],
    }


def dump_manifest(manifest: dict) -> str:
    return json.dumps(manifest, sort_keys=True, indent=1) + "\n"


def save_manifest(ds: Dataset):
    (ds.root / MANIFEST_NAME).write_text(dump_manifest(manifest_dict(ds)))


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    mpath = root / MANIFEST_NAME
    if not mpath.exists():
        raise DataError(f"no {MANIFEST_NAME} in {root}")
    m = json.loads(mpath.read_text())
    if m.get("format") != DATASET_FORMAT or m.get("version") != DATASET_VERSION:
        raise DataError(f"unsupported dataset format in {mpath}")
    scene = GTScene.from_dict(m["scene"])
    cage = TetCage.load(root / m["cage_file"])
    cameras = [Camera.from_dict(c) for c in m["cameras"]]
    expressions = [
        Expression(
            e=x["e"], k=x["k"],
            deformed=DeformedVerts(x["e"], np.array(x["vertices"], dtype=np.float64)),
        )
        for x in m["expressions"]
    ]
    frames = [
        FrameRef(f["camera"], f["expression"], f["image"], f["split"]) for f in m["frames"]
    ]
    return Dataset(root, scene, cage, cameras, expressions, frames, m["render"], m["seed"])


def render_dataset(
    scene: GTScene,
    cameras: list[Camera],
    out_dir: str | Path,
    *,
    gt_steps: int,
    t_near: float,
    t_far: float,
    background,
    eval_camera_stride: int = 4,
    seed: int = 0,
) -> Dataset:
    """Render reference images for all training and eval frames and write the dataset.

    Training frames pair every camera with every training expression; eval
    frames pair every `eval_camera_stride`-th camera with the held-out
    expressions (every eval_every-th frame of the sequence, training values
    excluded).
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    cage = make_cylinder_cage(scene.spec)
    cage.save(out / CAGE_NAME)

    expressions: list[Expression] = []
    for k, e in enumerate(scene.train_expressions, start=1):
        expressions.append(Expression(float(e), k, scene.deform(cage, float(e))))
    for e in scene.eval_expressions():
        expressions.append(Expression(float(e), None, scene.deform(cage, float(e))))

    frames: list[FrameRef] = []
    eval_cams = list(range(0, len(cameras), eval_camera_stride))
    fid = 0
    for xi, x in enumerate(expressions):
        cam_ids = range(len(cameras)) if x.k is not None else eval_cams
        split = "train" if x.k is not None else "eval"
        for ci in cam_ids:
            img = render_gt_image(
                scene, cameras[ci], x.e,
                n_steps=gt_steps, t_near=t_near, t_far=t_far, background=background,
            )
            rel = f"images/frame_{fid:04d}.ppm"
            write_ppm(out / rel, img)
            frames.append(FrameRef(ci, xi, rel, split))
            fid += 1

    ds = Dataset(
        root=out, scene=scene, cage=cage, cameras=cameras,
        expressions=expressions, frames=frames,
        render_params={
            "gt_steps": gt_steps, "t_near": t_near, "t_far": t_far,
            "background": list(np.asarray(background, dtype=np.float64)),
        },
        seed=seed,
    )
    save_manifest(ds)
    return ds


# ---------------------------------------------------------------------------
# Analysis helpers used by evaluation and the acceptance suite.
# ---------------------------------------------------------------------------


def wrinkle_band_energy(image: np.ndarray, f_lo: float, f_hi: float) -> float:
    """Mean spectral energy of the grayscale image in a radial frequency band.

    Frequencies are in cycles per image; the band is chosen to cover the
    wrinkle stripes and exclude the smooth albedo and the DC term.
    """
    g = np.asarray(image, dtype=np.float64).mean(axis=2)
    g = g - g.mean()
    spec = np.abs(np.fft.fft2(g)) ** 2
    h, w = g.shape
    fy = np.fft.fftfreq(h) * h
    fx = np.fft.fftfreq(w) * w
    rad = np.hypot(fy[:, None], fx[None, :])
    mask = (rad >= f_lo) & (rad <= f_hi)
    return float(spec[mask].sum() / (h * w) ** 2)


def wrinkle_band(scene: GTScene, camera: Camera) -> tuple[float, float]:
    """Frequency band (cycles/image) bracketing the projected wrinkle stripes."""
    # The angular frequency dominates; stripes project to roughly
    # freq_angular cycles across the visible half circumference.
    span = camera.width
    f_mid = scene.wrinkle_freq_angular * span / 96.0
    return 0.55 * f_mid, 2.2 * f_mid


def deforming_vertices(
    cage: TetCage, deformed_list: list[DeformedVerts], rel_threshold: float = 0.05
) -> np.ndarray:
    """Vertices that actually move between expressions.

    A vertex is deforming when its maximum pairwise displacement across the
    given states exceeds rel_threshold times the mesh-wide maximum.
    """
    n = len(deformed_list)
    disp = np.zeros(cage.num_vertices)
    for i in range(n):
        for j in range(i + 1, n):
            d = np.linalg.norm(deformed_list[i].positions - deformed_list[j].positions, axis=1)
            disp = np.maximum(disp, d)
    peak = disp.max()
    if peak == 0.0:
        return np.zeros(cage.num_vertices, dtype=bool)
    return disp > rel_threshold * peak
