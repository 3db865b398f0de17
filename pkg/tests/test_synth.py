import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jigsaw import geom, synth
from jigsaw.synth import SynthConfig


def _brute_labels(points, piece_id, eta):
    out = np.zeros(len(points), dtype=bool)
    for a in range(len(points)):
        best = np.inf
        for b in range(len(points)):
            if piece_id[b] != piece_id[a]:
                best = min(best, float(np.sqrt(((points[a] - points[b]) ** 2).sum())))
        out[a] = best <= eta
    return out


def _brute_match(points, piece_id, labels):
    pairs = []
    for a in np.flatnonzero(labels):
        cand = [b for b in range(len(points)) if piece_id[b] != piece_id[a]]
        d = [np.sqrt(((points[a] - points[b]) ** 2).sum()) for b in cand]
        pairs.append((a, cand[int(np.argmin(d))]))
    return np.array(pairs)


@pytest.fixture(scope="module")
def objects():
    out = []
    for i, shape in enumerate(synth.SHAPES):
        cfg = SynthConfig(shape=shape, pieces_min=2, pieces_max=5)
        out.append(synth.make_object(cfg, 100 + i))
    return out


def test_single_piece_has_no_labels_or_matches():
    obj = synth.generate_object(SynthConfig(pieces_min=1, pieces_max=1), 3)
    assert obj.n_pieces == 1
    assert not obj.labels.any()
    assert obj.gt_match.shape == (0, 2)


def test_planar_box_cut_labels_match_brute_force():
    cfg = SynthConfig(shape="box", pieces_min=2, pieces_max=2, perturb=0.0, points=400)
    obj = synth.generate_object(cfg, 11)
    np.testing.assert_array_equal(obj.labels, _brute_labels(obj.points, obj.piece_id, cfg.eta))
    # every sample drawn on the cut has its twin across the plane
    assert obj.labels[obj.on_cut].all()


@pytest.mark.parametrize("idx", range(4))
def test_labels_and_matching_match_brute_force(objects, idx):
    obj = objects[idx]
    np.testing.assert_array_equal(obj.labels, synth.compute_labels(obj.points, obj.piece_id, obj.eta))
    sub = np.random.default_rng(idx).choice(obj.n_points, 150, replace=False)
    full = _brute_labels(obj.points, obj.piece_id, obj.eta)
    np.testing.assert_array_equal(obj.labels[sub], full[sub])
    np.testing.assert_array_equal(obj.gt_match, _brute_match(obj.points, obj.piece_id, obj.labels))


def test_object_invariants(objects):
    for obj in objects:
        assert obj.n_points == 1000
        assert obj.counts.min() >= synth.MIN_POINTS_PER_PIECE
        assert obj.counts.sum() == obj.n_points
        assert geom.diameter(obj.points) == pytest.approx(0.8, abs=1e-6)
        # one pair per fracture point, always across pieces and between fracture points
        np.testing.assert_array_equal(obj.gt_match[:, 0], obj.fracture_index)
        a, b = obj.gt_match.T
        assert np.all(obj.piece_id[a] != obj.piece_id[b])
        assert obj.labels[b].all()
        for i in range(obj.n_pieces):
            assert obj.labels[obj.piece_id == i].any()


def test_label_adjacency_is_symmetric(objects):
    for obj in objects:
        adj = np.zeros((obj.n_pieces, obj.n_pieces), dtype=bool)
        for a, b in obj.gt_match:
            adj[obj.piece_id[a], obj.piece_id[b]] = True
        np.testing.assert_array_equal(adj, adj.T)


def test_scatter_reassembles_exactly(objects):
    for obj in objects:
        s = obj.scattered
        back = np.empty_like(s)
        for i, T in enumerate(obj.gt_poses):
            sel = obj.piece_id == i
            back[sel] = T.apply(s[sel])
            # centroid of the scattered piece sits at the origin
            assert np.abs(s[sel].mean(axis=0)).max() < 1e-9
        assert np.abs(back - obj.points).max() < 1e-9


def test_uniform_rotation_mean_angle():
    # mean geodesic angle of a uniform rotation is pi/2 + 2/pi
    rng = np.random.default_rng(0)
    ang = [geom.rotation_angle(geom.random_rotation(rng)) for _ in range(10000)]
    assert np.degrees(np.mean(ang)) == pytest.approx(126.9, abs=2.0)
    assert np.degrees(np.mean(ang)) == pytest.approx(np.degrees(np.pi / 2 + 2 / np.pi), abs=1.0)


def test_mirrored_surfaces_match_identity_pairing():
    pts = np.array([[0.0, 0, 0], [0.1, 0, 0], [0.0, 0, 0], [0.1, 0, 0]])
    pid = np.array([0, 0, 1, 1])
    lab = synth.compute_labels(pts, pid, 0.025)
    assert lab.all()
    np.testing.assert_array_equal(synth.build_gt_matching(pts, pid, lab), [[0, 2], [1, 3], [2, 0], [3, 1]])


def test_independent_sampling_option():
    cfg = SynthConfig(shape="sphere", pieces_min=3, pieces_max=3, fracture_sampling="independent")
    obj = synth.generate_object(cfg, 5)
    assert obj.counts.sum() == 1000 and obj.counts.min() >= 30
    # without shared locations some cut samples miss the eta ball
    assert obj.labels[obj.on_cut].mean() < 1.0


def test_generation_is_deterministic():
    cfg = SynthConfig(pieces_min=2, pieces_max=6)
    a, b = synth.make_object(cfg, 42), synth.make_object(cfg, 42)
    assert a.points.tobytes() == b.points.tobytes()
    assert a.gt_quat.tobytes() == b.gt_quat.tobytes()


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(points=100, pieces_max=5).validate()
    with pytest.raises(ValueError):
        SynthConfig(shape="torus").validate()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 8))
def test_piece_floor_and_total(seed, pieces):
    cfg = SynthConfig(pieces_min=pieces, pieces_max=pieces, points=max(300, 30 * pieces))
    obj = synth.generate_object(cfg, seed)
    assert obj.n_pieces == pieces
    assert obj.counts.sum() == cfg.points
    assert obj.counts.min() >= 30
