import numpy as np
import pytest

from jigsaw import align, geom
from jigsaw.align import PoseGraph, RansacConfig, weighted_kabsch
from jigsaw.geom import RigidTransform


def _rand_T(rng, scale=1.0):
    return RigidTransform(geom.random_rotation(rng), rng.normal(size=3) * scale)


def _rot_err_deg(A, B):
    return np.degrees(geom.rotation_angle(A.T @ B))


# -- Kabsch -------------------------------------------------------------------
def test_kabsch_identity():
    src = np.random.default_rng(0).normal(size=(20, 3))
    T = weighted_kabsch(src, src)
    np.testing.assert_allclose(T.as_matrix(), np.eye(4), atol=1e-12)


def test_kabsch_exact_recovery():
    src = np.random.default_rng(1).normal(size=(30, 3))
    true = RigidTransform(geom.rot_z(90), [1, 2, 3])
    T = weighted_kabsch(src, true.apply(src), np.random.default_rng(2).uniform(0.1, 1, 30))
    np.testing.assert_allclose(T.as_matrix(), true.as_matrix(), atol=1e-12)
    assert np.abs(T.apply(src) - true.apply(src)).max() < 1e-12


def _objective(R, t, src, dst, w):
    return float(np.sum(w * np.sum((src @ R.T + t - dst) ** 2, axis=1)))


def _gd_minimizer(src, dst, w, R0, t0, iters=4000, lr=0.1):
    """Riemannian gradient descent on SO(3) x R^3, independent of the SVD solution."""
    R, t = R0.copy(), t0.copy()
    wn = w / w.sum()
    for _ in range(iters):
        res = src @ R.T + t - dst
        gR = 2 * (res * wn[:, None]).T @ src
        gt = 2 * wn @ res
        # project the Euclidean gradient onto the tangent space at R
        omega = R.T @ gR
        skew = 0.5 * (omega - omega.T)
        w_vec = np.array([skew[2, 1], skew[0, 2], skew[1, 0]])
        R = R @ geom.so3_exp(-lr * w_vec)
        t = t - lr * gt
    return R, t


def test_kabsch_matches_gradient_descent_on_noisy_pairs():
    rng = np.random.default_rng(3)
    for _ in range(5):
        src = rng.normal(size=(40, 3))
        true = _rand_T(rng)
        dst = true.apply(src) + rng.normal(scale=0.05, size=src.shape)
        w = rng.uniform(0.2, 1.0, size=40)
        T = weighted_kabsch(src, dst, w)
        R0 = true.rotation @ geom.so3_exp(rng.normal(scale=0.2, size=3))
        R, t = _gd_minimizer(src, dst, w, R0, true.translation + 0.1)
        f_svd = _objective(T.rotation, T.translation, src, dst, w)
        f_gd = _objective(R, t, src, dst, w)
        assert abs(f_svd - f_gd) < 1e-6
        assert f_svd <= f_gd + 1e-12
        np.testing.assert_allclose(T.rotation, R, atol=1e-6)


def test_kabsch_det_positive_including_planar():
    rng = np.random.default_rng(4)
    for k in range(2000):
        src = rng.normal(size=(6, 3))
        if k % 2:
            src[:, 2] *= 1e-6  # near-planar
        dst = rng.normal(size=(6, 3))
        if k % 3 == 0:
            dst = dst * np.array([1, 1, -1])
        R = weighted_kabsch(src, dst).rotation
        assert np.linalg.det(R) > 0
        assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9


def test_kabsch_collinear_rejected():
    src = np.outer(np.arange(5.0), [1, 2, 3])
    with pytest.raises(align.DegenerateError, match="collinear"):
        weighted_kabsch(src, src + 1)
    with pytest.raises(align.DegenerateError):
        weighted_kabsch(src[:2], src[:2])


# -- RANSAC -----------------------------------------------------------------
def test_ransac_exact():
    rng = np.random.default_rng(5)
    src = rng.uniform(-0.4, 0.4, size=(60, 3))
    true = _rand_T(rng, 0.3)
    T, mask = align.ransac_pairwise(src, true.apply(src))
    assert mask.all()
    np.testing.assert_allclose(T.as_matrix(), true.as_matrix(), atol=1e-10)


def test_ransac_two_correspondences_none():
    assert align.ransac_pairwise(np.zeros((2, 3)), np.zeros((2, 3))) is None


def test_ransac_half_outliers():
    ok = 0
    for trial in range(100):
        rng = np.random.default_rng(1000 + trial)
        src = rng.uniform(-0.4, 0.4, size=(100, 3))
        true = _rand_T(rng, 0.3)
        dst = true.apply(src)
        bad = rng.permutation(100)[:50]
        dst[bad] = rng.uniform(-0.5, 0.5, size=(50, 3))
        fit = align.ransac_pairwise(src, dst, RansacConfig(seed=trial))
        if fit is not None and _rot_err_deg(fit[0].rotation, true.rotation) < 1.0:
            ok += 1
    assert ok >= 99


def test_ransac_deterministic():
    rng = np.random.default_rng(6)
    src, dst = rng.normal(size=(30, 3)), rng.normal(size=(30, 3))
    a = align.ransac_pairwise(src, dst, RansacConfig(tau=1.0, seed=3))
    b = align.ransac_pairwise(src, dst, RansacConfig(tau=1.0, seed=3))
    assert a[0].as_matrix().tobytes() == b[0].as_matrix().tobytes()


# -- global alignment -----------------------------------------------------------
def _planted_graph(rng, n, extra, sizes=None, noise_edge=None, noise_deg=0.0, weights=None):
    truth = [_rand_T(rng, 0.3) for _ in range(n)]
    sizes = sizes or [100 - v for v in range(n)]
    truth = [truth[0].inverse().compose(T) for T in truth]  # anchor 0 at identity
    g = PoseGraph(sizes)
    pairs = [(v - 1, v) for v in range(1, n)] + extra
    for k, (i, j) in enumerate(pairs):
        rel = truth[j].inverse().compose(truth[i])
        if k == noise_edge:
            rel = RigidTransform(rel.rotation @ geom.so3_exp(np.radians(noise_deg) * np.array([1.0, 0, 0])), rel.translation)
        g.add_edge(i, j, rel, weights[k] if weights else 10)
    return g, truth


def _max_residual(poses, truth):
    return max(np.abs(P.as_matrix() - T.as_matrix()).max() for P, T in zip(poses, truth))


def test_single_edge_tree():
    rng = np.random.default_rng(7)
    T12 = _rand_T(rng)
    g = PoseGraph([50, 40])
    g.add_edge(1, 0, T12, 5)
    poses, flags = align.global_align(g)
    assert np.abs(poses[0].as_matrix() - np.eye(4)).max() == 0
    np.testing.assert_allclose(poses[1].as_matrix(), T12.as_matrix(), atol=1e-12)
    assert flags == [None, None]


def test_consistent_triangle_exact():
    rng = np.random.default_rng(8)
    g, truth = _planted_graph(rng, 3, [(0, 2)])
    poses, _ = align.global_align(g)
    assert _max_residual(poses, truth) < 1e-9


@pytest.mark.parametrize("n", [2, 5, 10, 20])
def test_consistent_graph_with_cycles_exact(n):
    rng = np.random.default_rng(n)
    extra = [(i, j) for i in range(n) for j in range(i + 2, n) if rng.uniform() < 0.3]
    g, truth = _planted_graph(rng, n, extra)
    poses, _ = align.global_align(g)
    assert _max_residual(poses, truth) < 1e-9


def test_noisy_edge_down_weighted():
    rng = np.random.default_rng(9)
    # printed weighting is 1/m: the perturbed edge gets many matches, hence a small weight
    g, truth = _planted_graph(rng, 3, [(0, 2)], noise_edge=2, noise_deg=5.0, weights=[5, 5, 500])
    poses, _ = align.global_align(g)
    err = max(_rot_err_deg(P.rotation, T.rotation) for P, T in zip(poses, truth))
    assert err < 1.5


def test_information_matrix_and_invert_flag():
    g = PoseGraph([1, 1])
    g.add_edge(0, 1, RigidTransform.identity(), 4)
    g.add_edge(0, 1, RigidTransform.identity(), 4, invert_edge_weight=True)
    np.testing.assert_array_equal(g.edges[0].information, 0.25 * np.eye(6))
    np.testing.assert_array_equal(g.edges[1].information, 4 * np.eye(6))


def test_disconnected_components_and_isolated_vertex():
    rng = np.random.default_rng(10)
    g = PoseGraph([10, 20, 30, 40, 5])
    A, B = _rand_T(rng), _rand_T(rng)
    g.add_edge(0, 1, A, 3)
    g.add_edge(2, 3, B, 3)
    poses, flags = align.global_align(g)
    # each component anchored at its largest piece
    assert np.abs(poses[1].as_matrix() - np.eye(4)).max() == 0
    assert np.abs(poses[3].as_matrix() - np.eye(4)).max() == 0
    np.testing.assert_allclose(poses[0].as_matrix(), A.as_matrix(), atol=1e-12)
    np.testing.assert_allclose(poses[2].as_matrix(), B.as_matrix(), atol=1e-12)
    assert flags == [None, None, None, None, "unaligned"]


def test_empty_graph():
    with pytest.raises(ValueError):
        align.global_align(PoseGraph([]))


def test_pairwise_correspondences_grouping():
    pid = np.array([0, 0, 1, 1, 2])
    pairs = np.array([[0, 2], [3, 1], [0, 1], [4, 0]])
    groups = align.pairwise_correspondences(pid, pairs)
    assert list(groups) == [(0, 1), (0, 2)]
    np.testing.assert_array_equal(groups[(0, 1)], [[0, 2], [1, 3]])
    np.testing.assert_array_equal(groups[(0, 2)], [[0, 4]])


def _anchored_errors(obj, poses):
    from jigsaw import metrics
    s = metrics.evaluate_object(obj, poses)
    return s.mae_r, s.mae_t


def test_assemble_with_ground_truth_correspondences():
    from jigsaw import synth
    obj = synth.make_object(synth.SynthConfig(pieces_min=2, pieces_max=2), 4)
    out = align.assemble_from_pairs(obj.scattered, obj.piece_id, obj.gt_match)
    rot, trans = _anchored_errors(obj, out.poses)
    assert rot < 0.1 and trans < 1e-3
    assert out.flags == [None, None]
    # assembled cloud is the scattered cloud moved by the recovered poses
    anchor = obj.largest_piece()
    back = obj.gt_poses[anchor].compose(out.poses[anchor].inverse())
    assert np.abs(back.apply(out.points) - obj.points).max() < 1e-3


def test_assemble_single_piece_is_identity():
    from jigsaw import net
    pts = np.random.default_rng(0).normal(size=(50, 3))
    params = net.NetParams.init(net.NetConfig())
    out = align.assemble(pts, np.zeros(50, dtype=int), params)
    assert out.poses[0].as_matrix().tolist() == np.eye(4).tolist()


def test_assemble_without_fracture_points_warns(caplog):
    from jigsaw import net, synth
    obj = synth.make_object(synth.SynthConfig(pieces_min=3, pieces_max=3), 5)
    params = net.NetParams.init(net.NetConfig())
    params["seg.b2"].data[...] = -50.0  # every confidence ~0
    with caplog.at_level("WARNING"):
        out = align.assemble(obj.scattered, obj.piece_id, params)
    assert "no predicted fracture points" in caplog.text
    assert all(np.array_equal(T.as_matrix(), np.eye(4)) for T in out.poses)
    assert out.flags == ["unaligned"] * 3


def test_assemble_runs_network_path():
    from jigsaw import net, synth
    obj = synth.make_object(synth.SynthConfig(pieces_min=3, pieces_max=3), 6)
    params = net.NetParams.init(net.NetConfig())
    out = align.assemble(obj.scattered, obj.piece_id, params)
    assert len(out.poses) == 3 and out.points.shape == obj.scattered.shape
    assert out.match is not None and out.confidence.shape == (obj.n_points,)
    for T in out.poses:
        assert abs(np.linalg.det(T.rotation) - 1) < 1e-9
