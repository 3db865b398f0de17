"""Fast invariant checks runnable without pytest (``jigsaw selftest``).

Each check compares a library routine against an independent computation:
brute force, central differences, or planted ground truth.
"""
from __future__ import annotations

import itertools
from typing import Callable

import numpy as np

from . import align, geom, match, metrics, synth
from . import tensor as T


def _sinkhorn_sums() -> str:
    rng = np.random.default_rng(0)
    worst = 0.0
    for n in (1, 2, 7, 32, 100):
        X = match.sinkhorn(np.exp(rng.uniform(-3.0, 3.0, size=(n, n)))).data
        worst = max(worst, np.abs(X.sum(0) - 1).max(), np.abs(X.sum(1) - 1).max())
    assert worst < 1e-6, f"row/column sums off by {worst:.2e}"
    return f"max |sum - 1| = {worst:.1e}"


def _hungarian_brute_force() -> str:
    rng = np.random.default_rng(1)
    for trial in range(200):
        n = int(rng.integers(1, 7))
        S = rng.normal(size=(n, n))
        best = max(sum(S[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))
        col = match.hungarian(S)
        got = S[np.arange(n), col].sum()
        assert abs(got - best) < 1e-9, f"trial {trial}: {got} vs optimum {best}"
    return "200 instances, n <= 6"


def _kabsch_proper_rotation() -> str:
    rng = np.random.default_rng(2)
    for _ in range(500):
        src = rng.normal(size=(10, 3)) * [1.0, 1.0, rng.uniform(1e-6, 1.0)]
        dst = src @ geom.random_rotation(rng).T + rng.normal(size=(10, 3)) * 0.1
        R = align.weighted_kabsch(src, dst).rotation
        assert abs(np.linalg.det(R) - 1) < 1e-9 and np.abs(R.T @ R - np.eye(3)).max() < 1e-9
    return "500 trials, det = +1"


def _pose_graph_exact() -> str:
    rng = np.random.default_rng(3)
    n = 8
    truth = [geom.RigidTransform(geom.random_rotation(rng), rng.normal(size=3)) for _ in range(n)]
    g = align.PoseGraph([100 - i for i in range(n)])
    edges = [(i, (i + 1) % n) for i in range(n)] + [(0, 4), (2, 6)]
    for i, j in edges:
        g.add_edge(i, j, truth[j].inverse().compose(truth[i]), 10)
    poses, _ = align.global_align(g)
    gauge = truth[0].inverse()
    worst = max(np.abs(p.as_matrix() - gauge.compose(t).as_matrix()).max() for p, t in zip(poses, truth))
    assert worst < 1e-9, f"residual {worst:.2e}"
    return f"8-vertex cyclic graph, residual {worst:.1e}"


def _metric_arithmetic() -> str:
    mae, rmse = metrics.euler_errors([10, 20, 30], [0, 0, 0])
    assert mae == 20.0 and abs(rmse - np.sqrt(1400 / 3)) < 1e-12
    mae, rmse = metrics.translation_errors([0.03, 0, 0], [0, 0, 0])
    assert abs(mae - 0.01) < 1e-15 and abs(rmse - 0.03 / np.sqrt(3)) < 1e-15
    return "hand-computed values reproduced"


def _autodiff_central_differences() -> str:
    rng = np.random.default_rng(4)
    a0, b0 = rng.normal(size=(4, 3)), rng.normal(size=(3, 5))

    def f(a, b):
        return T.tsum(T.softmax(T.matmul(a, b), axis=1) * T.sigmoid(T.matmul(a, b)))

    a, b = T.Tensor(a0, requires_grad=True), T.Tensor(b0, requires_grad=True)
    T.backward(f(a, b))
    h = 1e-6
    worst = 0.0
    for arr, grad, other, first in ((a0, a.grad, b0, True), (b0, b.grad, a0, False)):
        for idx in np.ndindex(arr.shape):
            up, dn = arr.copy(), arr.copy()
            up[idx] += h
            dn[idx] -= h
            fu = f(up, other).item() if first else f(other, up).item()
            fd = f(dn, other).item() if first else f(other, dn).item()
            num = (fu - fd) / (2 * h)
            worst = max(worst, abs(num - grad[idx]) / max(abs(num), abs(grad[idx]), 1e-8))
    assert worst < 1e-4, f"relative error {worst:.2e}"
    return f"max relative error {worst:.1e}"


def _oracle_assembly() -> str:
    obj = synth.make_object(synth.SynthConfig(pieces_min=3, pieces_max=3), 11)
    out = align.assemble_from_pairs(obj.scattered, obj.piece_id, obj.gt_match)
    s = metrics.evaluate_object(obj, out.poses)
    assert s.mae_r < 0.5 and s.mae_t < 1e-3, f"MAE(R)={s.mae_r:.3f} MAE(T)={s.mae_t:.2e}"
    return f"MAE(R)={s.mae_r:.3f} deg, MAE(T)={s.mae_t:.1e}"


CHECKS: list[tuple[str, Callable[[], str]]] = [
    ("sinkhorn row/column sums", _sinkhorn_sums),
    ("hungarian vs brute force", _hungarian_brute_force),
    ("kabsch proper rotation", _kabsch_proper_rotation),
    ("pose graph exactness", _pose_graph_exact),
    ("metric arithmetic", _metric_arithmetic),
    ("autodiff vs central differences", _autodiff_central_differences),
    ("assembly from true correspondences", _oracle_assembly),
]


def run(echo=print) -> bool:
    ok = True
    for name, check in CHECKS:
        try:
            detail = check()
            echo(f"PASS  {name}: {detail}")
        except Exception as exc:  # report every failure, keep going
            ok = False
            echo(f"FAIL  {name}: {exc}")
    return ok
