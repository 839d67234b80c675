import json

import numpy as np
import pytest
from scipy.stats import kstest

from avatar_recon import metrics, synth
from avatar_recon.geometry import Pose, camera_pair
from avatar_recon.meshing import Capsule, Sphere, icosphere, marching_cubes


def test_single_capsule_body():
    layout = synth.single_capsule_layout(0.8, 0.15)
    tpl, sdf, mesh = synth.make_capsule_body(layout, resolution=64)
    cell = 2.0 / 63
    cap = Capsule(layout.joints[0], layout.joints[1], 0.15)
    assert np.abs(cap(mesh.vertices)).max() < 2 * cell
    assert np.all(tpl.weights >= 0) and np.allclose(tpl.weights.sum(1), 1)


def test_default_body_weights_valid():
    tpl, _, _ = synth.make_capsule_body(seed=5, resolution=48)
    assert np.all(tpl.weights >= 0) and np.allclose(tpl.weights.sum(1), 1)
    assert tpl.skeleton.n_joints == len(synth.JOINT_NAMES)


def test_axis_point_is_one_hot():
    layout = synth.BodyLayout()
    # midpoint of the left upper-leg bone, owned by joint 10
    p = 0.5 * (layout.joints[10] + layout.joints[11])
    w = synth.skin_weights(p[None], layout)[0]
    assert abs(w[10] - 1) < 1e-3


def test_layout_check_rejects_overlap():
    layout = synth.BodyLayout()
    fat = synth.BodyLayout(layout.joints, layout.parents, [(a, b, 0.5 if i == 2 else r)
                                                          for i, (a, b, r) in enumerate(layout.bones)])
    with pytest.raises(ValueError):
        synth.check_layout(fat)


def test_clothe_properties():
    base = icosphere(4, 0.5)
    same = synth.clothe(base, amplitude=0.0)
    assert np.array_equal(same.vertices, base.vertices)
    amp = 0.03
    c = synth.clothe(base, amplitude=amp, seed=2)
    assert np.abs(np.linalg.norm(c.vertices - base.vertices, axis=1)).max() <= amp + 1e-12
    assert metrics.chamfer(c, base, 5000) <= amp


def test_pose_sampler():
    rng = np.random.default_rng(0)
    assert np.array_equal(synth.pose_sampler(rng, np.zeros((16, 3))).theta, np.zeros((16, 3)))
    a = synth.pose_sampler(np.random.default_rng(9)).theta
    b = synth.pose_sampler(np.random.default_rng(9)).theta
    assert np.array_equal(a, b)
    draws = np.array([synth.pose_sampler(rng).theta[11, 0] for _ in range(10_000)])
    lim = synth.JOINT_LIMITS[11, 0]
    assert kstest(draws, "uniform", args=(-lim, 2 * lim)).pvalue > 0.01


@pytest.fixture(scope="module")
def sphere_maps():
    mesh = marching_cubes(Sphere(0.5), [[-1] * 3, [1] * 3], 96)
    cams = camera_pair(129)
    return mesh, cams, synth.render_normal_maps(mesh, cams)


def test_sphere_center_normal(sphere_maps):
    _, (front, _), (f, b) = sphere_maps
    c = front.project(np.array([0.0, 0, 0.5]))
    i, j = int(round(c[1])), int(round(c[0]))
    assert np.abs(f.normals[i, j] - [0, 0, 1]).max() < 1e-2
    assert np.abs(b.normals[i, j] - [0, 0, 1]).max() < 1e-2


def test_sphere_silhouette_area(sphere_maps):
    _, (front, _), (f, _) = sphere_maps
    expected = np.pi * (0.5 * front.scale) ** 2
    assert abs(f.mask.sum() - expected) / expected < 0.02


def test_back_is_mirrored_front(sphere_maps):
    _, _, (f, b) = sphere_maps
    mirror = f.mask[:, ::-1]
    assert np.mean(mirror != b.mask) < 0.01
    both = mirror & b.mask
    # mirrored u flips the image-space x component
    fn = f.normals[:, ::-1] * np.array([-1, 1, 1])
    assert np.abs(fn[both] - b.normals[both]).mean() < 0.02


def test_posed_mesh_rest_is_identity():
    tpl, _, m = synth.make_capsule_body(seed=1, resolution=40)
    out = synth.pose_mesh(m, tpl, Pose.rest(tpl.skeleton.n_joints))
    assert np.abs(out.vertices - m.vertices).max() < 1e-12


def test_generate_dataset_deterministic(tmp_path):
    kw = dict(n_subjects=2, n_poses=2, seed=7, resolution=32, image_size=48)
    m1 = synth.generate_dataset(tmp_path / "a", **kw)
    m2 = synth.generate_dataset(tmp_path / "b", **kw)
    assert m1 == m2
    for rel in ("subject_001/clothed.obj", "subject_001/poses/pose_001.json", "subject_000/renders/pose_001_back.png"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["seed"] == 7
