import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from avatar_recon.geometry import (Camera, DegenerateWarpError, Pose, Skeleton, SkinnedTemplate, bone_transforms,
                                   camera_pair, canonical_normal, canonical_normals, lbs_forward, lbs_inverse,
                                   make_transform, query_skin_weights, rodrigues, select_side, warp_linear)
from conftest import random_rotation_transforms


def test_rodrigues_zero_is_identity():
    assert np.array_equal(rodrigues([0.0, 0.0, 0.0]), np.eye(3))


def test_rodrigues_quarter_turn_z():
    R = rodrigues([0, 0, np.pi / 2])
    assert np.allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-9)


def test_rodrigues_orthonormal(rng):
    v = rng.normal(size=(100, 3)) * 2
    R = rodrigues(v)
    I = np.einsum("nab,ncb->nac", R, R)
    assert np.abs(I - np.eye(3)).max() < 1e-9
    assert np.allclose(np.linalg.det(R), 1.0)


def test_rodrigues_small_angle_matches_series():
    v = np.array([1e-8, -2e-8, 3e-8])
    K = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    assert np.allclose(rodrigues(v), np.eye(3) + K, atol=1e-15)


def chain():
    return Skeleton(np.array([[0.0, 0, 0], [0, 1, 0], [0, 2, 0]]), np.array([-1, 0, 1]))


def test_rest_pose_gives_identities():
    B = bone_transforms(chain(), Pose.rest(3))
    assert np.array_equal(B, np.broadcast_to(np.eye(4), B.shape))


def test_single_joint_rotation_about_origin():
    sk = Skeleton(np.zeros((1, 3)), np.array([-1]))
    B = bone_transforms(sk, Pose(np.array([[0, 0, np.pi / 2]])))
    assert np.allclose(B[0, :3, :3], rodrigues([0, 0, np.pi / 2]), atol=1e-15)
    assert np.allclose(B[0, :3, 3], 0, atol=1e-15)


def test_chain_matches_explicit_composition(rng):
    sk = chain()
    theta = rng.normal(size=(3, 3)) * 0.7
    B = bone_transforms(sk, Pose(theta))
    J = sk.joints

    def about(R, c):
        # rotate about point c
        return make_transform(np.eye(3), c) @ make_transform(R) @ make_transform(np.eye(3), -c)

    R = rodrigues(theta)
    oracle = [about(R[0], J[0])]
    oracle.append(oracle[0] @ about(R[1], J[1]))
    oracle.append(oracle[1] @ about(R[2], J[2]))
    assert np.abs(B - np.stack(oracle)).max() < 1e-12


def test_lbs_identity_and_one_hot(rng):
    x = rng.normal(size=(20, 3))
    I = np.broadcast_to(np.eye(4), (3, 4, 4))
    w = rng.dirichlet(np.ones(3), size=20)
    assert np.allclose(lbs_forward(x, w, I), x, atol=1e-15)
    T = random_rotation_transforms(rng, 3)
    oh = np.zeros((20, 3))
    oh[:, 1] = 1
    assert np.allclose(lbs_forward(x, oh, T), x @ T[1, :3, :3].T + T[1, :3, 3], atol=1e-14)
    assert np.allclose(lbs_inverse(lbs_forward(x, oh, T), oh, T), x, atol=1e-12)


def test_lbs_blend_of_opposite_quarter_turns():
    T = np.stack([make_transform(rodrigues([0, 0, np.pi / 2])), make_transform(rodrigues([0, 0, -np.pi / 2]))])
    out = lbs_forward(np.array([1.0, 0, 0]), np.array([0.5, 0.5]), T)
    # matrix blend: 0.5 * (0, 1, 0) + 0.5 * (0, -1, 0)
    assert np.allclose(out, [0.0, 0.0, 0.0], atol=1e-15)


def test_lbs_inverse_rejects_degenerate():
    T = np.stack([make_transform(rodrigues([0, 0, np.pi / 2])), make_transform(rodrigues([0, 0, -np.pi / 2]))])
    with pytest.raises(DegenerateWarpError):
        lbs_inverse(np.zeros(3), np.array([0.5, 0.5]), T)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_lbs_roundtrip_property(seed):
    rng = np.random.default_rng(seed)
    T = random_rotation_transforms(rng, 4, max_angle=0.8)
    w = rng.dirichlet(np.ones(4), size=50)
    x = rng.normal(size=(50, 3))
    ok = np.abs(np.linalg.det(warp_linear(w, T))) > 1e-3
    assert np.abs(lbs_inverse(lbs_forward(x[ok], w[ok], T), w[ok], T) - x[ok]).max() < 1e-6


def test_warp_linear_matches_finite_differences(rng):
    T = random_rotation_transforms(rng, 3)
    w = rng.dirichlet(np.ones(3))
    x = rng.normal(size=3)
    h = 1e-4
    J = np.stack([(lbs_forward(x + h * e, w, T) - lbs_forward(x - h * e, w, T)) / (2 * h) for e in np.eye(3)], 1)
    assert np.abs(J - warp_linear(w, T)).max() < 1e-5
    assert np.allclose(warp_linear(w, np.broadcast_to(np.eye(4), (3, 4, 4))), np.eye(3))


def small_template():
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0], [1, 0, 1], [0, 1, 1], [2, 0, 0]])
    rng = np.random.default_rng(0)
    w = rng.dirichlet(np.ones(2), size=len(v))
    return SkinnedTemplate(v, np.array([[0, 1, 2]]), w, Skeleton(np.zeros((2, 3)), np.array([-1, 0])))


def test_query_weights_vertex_and_tie():
    t = small_template()
    assert np.array_equal(query_skin_weights(t.vertices[5], t), t.weights[5])
    # equidistant to vertex 3 (0,0,1) and vertex 6 (0,1,1): lowest index wins
    p = np.array([0.0, 0.5, 1.0])
    assert np.array_equal(query_skin_weights(p, t), t.weights[3])


def test_query_weights_brute_force(rng):
    t = small_template()
    pts = rng.uniform(-1, 3, size=(200, 3))
    d = np.linalg.norm(pts[:, None] - t.vertices[None], axis=2)
    assert np.array_equal(query_skin_weights(pts, t), t.weights[d.argmin(1)])
    out = query_skin_weights(pts, t)
    assert np.all(out >= 0) and np.allclose(out.sum(1), 1)


def test_canonical_normal_identity_and_rotation(rng):
    cam, _ = camera_pair(64)
    I = np.broadcast_to(np.eye(4), (2, 4, 4))
    n = np.array([0.3, -0.2, 0.9])
    out = canonical_normal(n, np.array([1.0, 0.0]), I, cam)
    n_world = cam.image_to_world_normal(n)
    assert np.allclose(out, n_world / np.linalg.norm(n_world))
    T = random_rotation_transforms(rng, 2)
    R = T[0, :3, :3]
    out = canonical_normal(n, np.array([1.0, 0.0]), T, cam)
    assert np.allclose(out, R.T @ n_world / np.linalg.norm(n_world), atol=1e-12)


def test_canonical_normal_on_warped_sphere(rng):
    # near-rigid blend: A_lin^T rule vs the exact inverse-transpose normal of
    # the warped sphere
    cam, _ = camera_pair(64)
    T = random_rotation_transforms(rng, 2, max_angle=0.02, spread=0.1)
    w = np.array([0.4, 0.6])
    L = warp_linear(w, T)
    for _ in range(20):
        n_c_true = rng.normal(size=3)
        n_c_true /= np.linalg.norm(n_c_true)
        n_world = np.linalg.inv(L).T @ n_c_true
        n_world /= np.linalg.norm(n_world)
        n_img = cam.world_to_image_normal(n_world)
        assert np.linalg.norm(canonical_normal(n_img, w, T, cam) - n_c_true) < 1e-4


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (5, 3), elements=st.floats(-1, 1, allow_subnormal=False)), st.integers(0, 1000))
def test_canonical_normals_unit_or_flagged(n, seed):
    rng = np.random.default_rng(seed)
    T = random_rotation_transforms(rng, 3)
    w = rng.dirichlet(np.ones(3), size=5)
    cam, _ = camera_pair(32)
    out, valid = canonical_normals(n, w, T, cam)
    assert np.allclose(np.linalg.norm(out[valid], axis=1), 1.0)
    assert np.all(out[~valid] == 0)


def test_camera_projection():
    cam = Camera(10.0, (0.0, 0.0), (65, 65))
    assert np.allclose(cam.project(np.zeros(3)), [32, 32])
    assert np.allclose(cam.project(np.array([1.0, 0, 0])) - cam.project(np.zeros(3)), [10, 0])


def test_back_camera_mirrors_front(rng):
    front, back = camera_pair(128)
    x = rng.normal(size=(50, 3))
    mirrored = x * np.array([-1, 1, -1])
    assert np.allclose(back.project(x), front.project(mirrored))
    assert np.allclose(back.depth(x), front.depth(mirrored))


def test_select_side():
    assert select_side(np.array([0, 0, 1.0])) == "front"
    assert select_side(np.array([0, 0, -1.0])) == "back"
    assert select_side(np.array([1.0, 0, 0])) == "front"
    assert list(select_side(np.array([[0, 0, 1.0], [0, 0, -1.0]]))) == ["front", "back"]


def test_template_roundtrip(tmp_path):
    t = small_template()
    t.save(tmp_path / "t.obj")
    u = SkinnedTemplate.load(tmp_path / "t.obj")
    assert np.array_equal(u.vertices, t.vertices) and np.array_equal(u.weights, t.weights)
    with pytest.raises(ValueError):
        SkinnedTemplate(t.vertices, t.faces, t.weights * 2, t.skeleton)


def test_pose_rejects_nan():
    with pytest.raises(ValueError):
        Pose(np.array([[np.nan, 0, 0]]))
