import json
import struct

import numpy as np
import pytest

from jigsaw import dataio, synth
from jigsaw.geom import RigidTransform
from jigsaw.synth import SynthConfig


@pytest.fixture(scope="module")
def obj():
    return synth.make_object(SynthConfig(pieces_min=3, pieces_max=3), 9)


def test_object_roundtrip_bit_exact(obj, tmp_path):
    p = tmp_path / "o.jgso"
    dataio.write_object(p, obj)
    back = dataio.read_object(p)
    assert dataio.objects_equal(obj, back)
    assert back.scattered.tobytes() == obj.scattered.tobytes()


def test_header_layout(obj, tmp_path):
    p = tmp_path / "o.jgso"
    dataio.write_object(p, obj)
    raw = p.read_bytes()
    assert raw[:4] == b"JGSO"
    assert struct.unpack("<IIId", raw[4:24]) == (1, obj.n_pieces, obj.n_points, obj.eta)
    expected = 24 + obj.n_points * 15 + obj.n_pieces * 56 + 4 + 8 * len(obj.gt_match)
    assert len(raw) == expected


def test_bad_magic(obj, tmp_path):
    p = tmp_path / "o.jgso"
    dataio.write_object(p, obj)
    p.write_bytes(b"NOPE" + p.read_bytes()[4:])
    with pytest.raises(dataio.BadMagicError, match="bad magic"):
        dataio.read_object(p)


def test_truncated_mid_points(obj, tmp_path):
    p = tmp_path / "o.jgso"
    dataio.write_object(p, obj)
    p.write_bytes(p.read_bytes()[: 24 + 15 * 10 + 3])
    with pytest.raises(dataio.TruncatedFileError, match="unexpected EOF at points section"):
        dataio.read_object(p)


def test_invariant_violation(obj, tmp_path):
    p = tmp_path / "o.jgso"
    dataio.write_object(p, obj)
    raw = bytearray(p.read_bytes())
    off = 24 + obj.n_points * 15
    raw[off : off + 8] = struct.pack("<d", 2.0)  # quaternion w
    p.write_bytes(bytes(raw))
    with pytest.raises(dataio.InvariantError, match="quaternion"):
        dataio.read_object(p)


def test_dataset_and_manifest(tmp_path):
    cfg = SynthConfig(pieces_min=2, pieces_max=3, points=300)
    objs, seeds = synth.make_dataset(cfg, 3, seed=7)
    dataio.write_dataset(tmp_path, objs, cfg, seeds)
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["count"] == 3 and m["seeds"] == seeds and m["config"]["points"] == 300
    back = dataio.read_dataset(tmp_path)
    assert all(dataio.objects_equal(a, b) for a, b in zip(objs, back))


def test_matching_sidecar_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    idx = np.array([3, 5, 8])
    logm, soft = rng.normal(size=(3, 3)) * 300, rng.uniform(size=(3, 3))
    dataio.write_matching(tmp_path / "m.jgsm", idx, logm, soft, [2, 0, 1])
    back = dataio.read_matching(tmp_path / "m.jgsm")
    np.testing.assert_array_equal(back["fracture_index"], idx)
    assert back["log_affinity"].tobytes() == logm.tobytes()
    assert back["soft"].tobytes() == soft.tobytes()
    np.testing.assert_array_equal(back["perm"], [2, 0, 1])


def test_pose_file_roundtrip(obj, tmp_path):
    dataio.write_poses(tmp_path / "p.txt", obj.gt_poses, flags=[None, "unaligned", None])
    text = (tmp_path / "p.txt").read_text().splitlines()
    assert len(text) == obj.n_pieces and text[1].endswith("# unaligned")
    back = dataio.read_poses(tmp_path / "p.txt")
    for a, b in zip(obj.gt_poses, back):
        np.testing.assert_allclose(a.as_matrix(), b.as_matrix(), atol=1e-15)


def _ply_vertices(path):
    lines = path.read_text().splitlines()
    n = int(next(l for l in lines if l.startswith("element vertex")).split()[-1])
    body = lines[lines.index("end_header") + 1 :]
    arr = np.array([[float(v) for v in l.split()] for l in body])
    return n, arr


def test_export_ply_identity_on_canonical(obj, tmp_path):
    ident = [RigidTransform.identity()] * obj.n_pieces
    dataio.export_ply(obj, ident, tmp_path / "a.ply", source="canonical")
    n, arr = _ply_vertices(tmp_path / "a.ply")
    assert n == obj.n_points == len(arr)
    np.testing.assert_array_equal(arr[:, :3], obj.points)


def test_export_ply_gt_poses_reassemble(obj, tmp_path):
    dataio.export_ply(obj, obj.gt_poses, tmp_path / "a.ply")
    _, arr = _ply_vertices(tmp_path / "a.ply")
    assert np.abs(arr[:, :3] - obj.points).max() < 1e-9


def test_export_ply_two_pieces_two_colors(tmp_path):
    o = synth.make_object(SynthConfig(pieces_min=2, pieces_max=2, points=200), 1)
    dataio.export_ply(o, o.gt_poses, tmp_path / "b.ply")
    _, arr = _ply_vertices(tmp_path / "b.ply")
    assert len({tuple(c) for c in arr[:, 3:].astype(int)}) == 2
