import numpy as np
import pytest

from avatar_recon import metrics
from avatar_recon.meshing import (Capsule, CapsuleUnion, EmptySurfaceError, Sphere, TriMesh, icosphere, marching_cubes,
                                  sample_surface)
from avatar_recon.metrics import closest_point_on_triangles

BOX = np.array([[-1.5] * 3, [1.5] * 3])


def test_sphere_extraction():
    m = marching_cubes(Sphere(1.0), BOX, 64)
    cell = 3.0 / 63
    assert np.abs(np.linalg.norm(m.vertices, axis=1) - 1).max() < 2 * cell
    assert abs(m.area() - 4 * np.pi) / (4 * np.pi) < 0.05
    # outward orientation
    c = m.triangles.mean(1)
    assert np.mean(np.einsum("ij,ij->i", m.face_normals(), c) > 0) > 0.99


def test_constant_field_is_empty():
    with pytest.raises(EmptySurfaceError):
        marching_cubes(lambda x: np.ones(len(x)), BOX, 16)


def test_extraction_error_shrinks_with_resolution():
    errs = [np.abs(np.linalg.norm(marching_cubes(Sphere(1.0), BOX, r).vertices, axis=1) - 1).max()
            for r in (32, 64, 128)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[0] / errs[2] > 2.5


def test_obj_roundtrip(tmp_path):
    m = icosphere(2, 0.7)
    m.save_obj(tmp_path / "m.obj")
    back = TriMesh.load_obj(tmp_path / "m.obj")
    assert np.array_equal(back.vertices, m.vertices) and np.array_equal(back.faces, m.faces)


def brute_distances(points, mesh):
    tris = mesh.triangles
    best = np.full(len(points), np.inf)
    bestf = np.zeros(len(points), dtype=int)
    for f in range(len(tris)):
        a, b, c = (np.broadcast_to(tris[f, k], points.shape) for k in range(3))
        d = np.linalg.norm(closest_point_on_triangles(points, a, b, c) - points, axis=1)
        better = d < best
        best[better], bestf[better] = d[better], f
    return best, bestf


def test_closest_point_vs_dense_sampling(rng):
    a, b, c = rng.normal(size=(3, 3))
    p = rng.normal(size=(200, 3)) * 2
    cp = closest_point_on_triangles(p, *(np.broadcast_to(v, p.shape) for v in (a, b, c)))
    s, t = np.meshgrid(np.linspace(0, 1, 300), np.linspace(0, 1, 300))
    ok = s + t <= 1
    dense = a + s[ok, None] * (b - a) + t[ok, None] * (c - a)
    dd = np.linalg.norm(p[:, None] - dense[None], axis=2).min(1)
    d = np.linalg.norm(cp - p, axis=1)
    assert np.all(d <= dd + 1e-12) and np.all(dd - d < 0.02)


def random_mesh(rng, n=10):
    return TriMesh(rng.normal(size=(3 * n, 3)), np.arange(3 * n).reshape(n, 3))


def test_metrics_match_brute_force(rng):
    for _ in range(10):
        A, B = random_mesh(rng), random_mesh(rng)
        pa, _ = metrics.mesh_samples(A, 300, 0)
        pb, _ = metrics.mesh_samples(B, 300, 0)
        ref = 0.5 * (brute_distances(pa, B)[0].mean() + brute_distances(pb, A)[0].mean())
        assert abs(metrics.chamfer(A, B, 300) - ref) < 1e-9
        assert abs(metrics.p2s(pa, B) - brute_distances(pa, B)[0].mean()) < 1e-9


def test_normal_consistency_brute_force(rng):
    A, B = random_mesh(rng), random_mesh(rng)

    def term(src, dst):
        pts, fid = metrics.mesh_samples(src, 200, 0)
        na = src.face_normals()[fid]
        nb = dst.face_normals()[brute_distances(pts, dst)[1]]
        s = np.sign(np.einsum("ij,ij->i", na, nb))
        s[s == 0] = 1
        return np.linalg.norm(na - s[:, None] * nb, axis=1).mean()

    ref = 0.5 * (term(A, B) + term(B, A))
    assert abs(metrics.normal_consistency(A, B, 200) - ref) < 1e-9


def test_metric_identities():
    m = icosphere(3)
    assert metrics.chamfer(m, m, 2000) < 1e-9
    assert metrics.normal_consistency(m, m, 2000) < 1e-9
    flipped = TriMesh(m.vertices, m.faces[:, ::-1])
    assert metrics.normal_consistency(m, flipped, 2000) < 1e-9
    other = icosphere(3, 1.1)
    assert metrics.chamfer(m, other, 500) == metrics.chamfer(other, m, 500)


def test_parallel_squares():
    sq = TriMesh(np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0.0]]), np.array([[0, 1, 2], [0, 2, 3]]))
    d = 0.25
    up = sq.with_vertices(sq.vertices + [0, 0, d])
    assert abs(metrics.chamfer(sq, up, 5000) - d) < 0.01 * d
    pts, _ = metrics.mesh_samples(sq, 1000)
    assert abs(metrics.p2s(pts, up) - d) < 1e-12
    r = metrics.report(sq, up, 1000)
    assert set(r) == {"chamfer", "p2s", "normal", "n_samples", "seed"} and r["normal"] < 1e-12


def test_area_weighted_sampling_chi2():
    from scipy.stats import chisquare

    m = TriMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [3, 0, 0], [0, 3, 0.0], [2, 2, 0]]),
                np.array([[0, 1, 2], [0, 3, 4], [3, 5, 4]]))
    _, fid = sample_surface(m, 100_000, np.random.default_rng(0))
    counts = np.bincount(fid, minlength=3)
    a = m.face_areas()
    assert chisquare(counts, 100_000 * a / a.sum()).pvalue > 0.01


def test_capsule_union_unique_region_is_sdf(rng):
    u = CapsuleUnion([Capsule([0, 0, 0], [0, 1, 0], 0.2), Capsule([0.5, 0, 0], [1.5, 0, 0], 0.1)])
    x = rng.uniform(-1, 2, size=(500, 3))
    ok = u.unique_argmin(x)
    g = u.gradient(x[ok])
    assert np.abs(np.linalg.norm(g, axis=1) - 1).max() < 1e-12
