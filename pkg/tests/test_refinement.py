import numpy as np
import pytest
import torch

from avatar_recon import hypernet, metrics, refinement, sdf_net, synth
from avatar_recon.config import OptimConfig, RefineConfig, SamplingConfig
from avatar_recon.encoder import NormalImage
from avatar_recon.geometry import camera_pair
from avatar_recon.meshing import icosphere, marching_cubes
from avatar_recon.refinement import NormalTargets
from avatar_recon.training import sdf_field


@pytest.fixture(scope="module")
def sphere_targets():
    cams = camera_pair(96)
    return cams, NormalTargets(synth.render_normal_maps(icosphere(4, 0.5), cams), cams)


def test_targets_validate_inputs():
    cams = camera_pair(32)
    img = NormalImage(np.zeros((32, 32, 3)), np.zeros((32, 32), bool))
    with pytest.raises(ValueError):
        NormalTargets((img, img), (cams[1], cams[0]))
    small = NormalImage(np.zeros((16, 16, 3)), np.zeros((16, 16), bool))
    with pytest.raises(ValueError):
        NormalTargets((img, small), cams)


def test_lookup_front_back_and_background(sphere_targets):
    _, T = sphere_targets
    x = np.array([[0, 0, 0.5], [0, 0, -0.5], [0.95, 0.95, 0.0]])
    n = np.array([[0, 0, 1.0], [0, 0, -1.0], [0, 0, 1.0]])
    tgt, w = T.lookup(x, n)
    assert np.abs(tgt[0] - [0, 0, 1]).max() < 0.02
    assert np.abs(tgt[1] - [0, 0, -1]).max() < 0.02
    assert w[0] == pytest.approx(1) and w[1] == pytest.approx(1)
    assert w[2] == 0


def test_newton_projection_onto_sphere(rng):
    spec = hypernet.g_spec_for([64, 64])
    p = sdf_net.geometric_init(spec, 0.5, 0).values
    x = rng.normal(size=(200, 3))
    x *= rng.uniform(0.4, 0.6, size=(200, 1)) / np.linalg.norm(x, axis=1, keepdims=True)
    y = refinement.newton_project(p, spec, x, steps=3)
    before = np.abs(sdf_net.forward(p, spec, x).numpy()).mean()
    after = np.abs(sdf_net.forward(p, spec, y).numpy()).mean()
    assert after < 0.05 * before


def test_iterations_to_threshold():
    t = np.r_[np.linspace(1, 0.1, 100), np.full(50, 0.1)]
    assert refinement.iterations_to_threshold(t, 2.0, smooth=1) == 0
    assert refinement.iterations_to_threshold(t, 0.0, smooth=1) is None
    k = refinement.iterations_to_threshold(t, 0.5, smooth=1)
    assert t[k] <= 0.5 < t[k - 1]
    # smoothing delays the crossing
    assert refinement.iterations_to_threshold(t, 0.5, smooth=20) > k
    assert refinement.iterations_to_threshold([], 1.0) is None


def test_initial_params_modes():
    cfg = RefineConfig()
    spec = hypernet.g_spec_for([16, 16])
    assert refinement.initial_params("geometric", spec, cfg).spec == spec
    with pytest.raises(ValueError):
        refinement.initial_params("hypernet", spec, cfg)
    with pytest.raises(ValueError):
        refinement.initial_params("bogus", spec, cfg)


def test_fixed_point_refinement():
    # targets rendered from the initial zero-set itself: the surface must stay put
    spec = hypernet.g_spec_for([64] * 3)
    cfg = RefineConfig(max_iters=150, refresh_every=50, window=50, mc_resolution=48, out_resolution=64,
                       sampling=SamplingConfig(512, 512, 128), optim=OptimConfig(lr=1e-4, steps_per_epoch=10 ** 6))
    init = sdf_net.geometric_init(spec, 0.5, 0)
    bbox = np.array([[-1.0] * 3, [1.0] * 3])
    m0 = marching_cubes(sdf_field(init), bbox, 64)
    cams = camera_pair(128)
    T = NormalTargets(synth.render_normal_maps(m0, cams), cams)
    res = refinement.refine(init, T, cfg, seed=0, anchor=m0)
    voxel = 2.0 / 63
    assert metrics.chamfer(res.mesh, m0, 3000) < voxel
    assert np.all(np.diff(res.best_history) <= 0)
    assert np.all(np.isfinite(res.log.totals()))


def test_background_samples_carry_no_normal_weight(sphere_targets):
    _, T = sphere_targets
    x = np.array([[0.9, -0.9, 0.0], [-0.9, 0.9, 0.1]])
    _, w = T.lookup(x, np.array([[0, 0, 1.0], [0, 0, -1.0]]))
    assert np.all(w == 0)
