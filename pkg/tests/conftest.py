import numpy as np
import pytest

from blendcage.scenes import CylinderSpec, GTScene, make_cylinder_cage
from blendcage.tetmesh import TetCage, signed_volumes


def kuhn_tets(c):
    return [
        (c[0][0][0], c[1][0][0], c[1][1][0], c[1][1][1]),
        (c[0][0][0], c[1][1][0], c[0][1][0], c[1][1][1]),
        (c[0][0][0], c[0][1][0], c[0][1][1], c[1][1][1]),
        (c[0][0][0], c[0][1][1], c[0][0][1], c[1][1][1]),
        (c[0][0][0], c[0][0][1], c[1][0][1], c[1][1][1]),
        (c[0][0][0], c[1][0][1], c[1][0][0], c[1][1][1]),
    ]


def lattice_cage(n: int = 2) -> TetCage:
    """n x n x n unit-cube lattice split into 6 tets per cube."""
    ids = {}
    verts = []
    for i in range(n + 1):
        for j in range(n + 1):
            for k in range(n + 1):
                ids[(i, j, k)] = len(verts)
                verts.append((float(i), float(j), float(k)))
    verts = np.array(verts)
    tets = []
    for i in range(n):
        for j in range(n):
            for k in range(n):
                c = [[[ids[(i + a, j + b, k + d)] for d in range(2)] for b in range(2)] for a in range(2)]
                tets.extend(kuhn_tets(c))
    tets = np.array(tets, dtype=np.int64)
    vols = signed_volumes(verts, tets)
    flip = vols <= 0
    tets[flip] = tets[flip][:, [0, 1, 3, 2]]
    return TetCage(verts, tets)


@pytest.fixture(scope="session")
def cube_cage():
    return lattice_cage(2)


@pytest.fixture(scope="session")
def small_spec():
    return CylinderSpec(radial_segments=8, axial_segments=4, ring_layers=2)


@pytest.fixture(scope="session")
def small_scene(small_spec):
    return GTScene(small_spec)


@pytest.fixture(scope="session")
def small_cylinder(small_spec):
    return make_cylinder_cage(small_spec)


@pytest.fixture(scope="session")
def default_cylinder():
    spec = CylinderSpec()
    return make_cylinder_cage(spec)


def desk_config():
    """Full-scale benchmark config with the grid-model training schedule."""
    from blendcage.config import load_config

    cfg = load_config()
    cfg["training"].update(lr=0.05, lr_decay_steps=10000, total_steps=20000,
                           checkpoint_every=0)
    return cfg


@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    """Full-scale twist-cylinder dataset (16+4 cameras, 96px)."""
    import time

    from blendcage import pipeline

    cfg = desk_config()
    out = tmp_path_factory.mktemp("desk_ds")
    t0 = time.time()
    pipeline.gen_data(cfg, out)
    from blendcage.scenes import load_dataset

    return cfg, load_dataset(out), time.time() - t0


@pytest.fixture(scope="session")
def desk_models(desk_dataset, tmp_path_factory):
    """Three trained variants (full / template_avg / template_single)."""
    import time

    from blendcage import pipeline

    cfg, ds, _ = desk_dataset
    run_root = tmp_path_factory.mktemp("desk_runs")
    t0 = time.time()
    ckpts = pipeline.train_variants(cfg, ds.root, run_root)
    return cfg, ds, ckpts, time.time() - t0


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small but complete dataset: 3 cameras, 48px, eval split {0.25, 0.75}."""
    from blendcage import pipeline
    from blendcage.config import load_config

    cfg = load_config()
    cfg["cameras"].update(ring_count=2, elevated_count=1, image_size=48, focal=50.0)
    cfg["renderer"].update(n_coarse=32, n_importance=16, gt_supersampling=4)
    cfg["scene"].update(radial_segments=8, axial_segments=4, ring_layers=1,
                        sequence_frames=9, eval_every=2)
    cfg["grid"]["resolution"] = 16
    cfg["training"].update(batch_rays=128, total_steps=60, lr=0.05,
                           lr_decay_steps=60, log_every=20, checkpoint_every=0)
    out = tmp_path_factory.mktemp("tiny_ds")
    ds = pipeline.gen_data(cfg, out)
    return cfg, ds
