"""Gated cost construction, optimal assignment, and back-projection."""

import itertools
import math

import numpy as np
import pytest

from tltrack.association import (
    Assignment,
    DegenerateBoxError,
    back_project,
    build_cost_matrix,
    solve_assignment,
)
from tltrack.detection import DEFAULT_TYPE_HEIGHTS_M, TlClass, TlType
from tltrack.geometry import PixelBox, RigidTransform, project_box

from helpers import FORWARD_CAM_QUAT, make_detection, make_intrinsics


def enumerate_assignment(costs):
    """Exhaustive oracle: try every subset pairing of rows to columns.

    Maximizes match count, then minimizes total cost. Only viable for
    small matrices; cross-checks the DP oracle below.
    """
    M, N = costs.shape
    best = (0, 0.0, ())
    for k in range(min(M, N), -1, -1):
        found = None
        for rows in itertools.combinations(range(M), k):
            for cols in itertools.permutations(range(N), k):
                total = 0.0
                ok = True
                for i, j in zip(rows, cols):
                    if not np.isfinite(costs[i, j]):
                        ok = False
                        break
                    total += costs[i, j]
                if ok and (found is None or total < found[0]):
                    found = (total, tuple(sorted(zip(rows, cols))))
        if found is not None:
            return (k, found[0], found[1])
    return best


def dp_assignment(costs):
    """Bitmask DP oracle over column subsets: (max matches, min cost)."""
    M, N = costs.shape
    best = {0: 0.0}  # used-column mask -> min cost with rows 0..i-1
    counts = {0: 0}
    for i in range(M):
        nxt_cost = dict(best)
        nxt_count = dict(counts)
        for mask, cost in best.items():
            cnt = counts[mask]
            # Option: leave row i unassigned is already carried over.
            for j in range(N):
                if mask & (1 << j) or not np.isfinite(costs[i, j]):
                    continue
                m2 = mask | (1 << j)
                c2 = cost + costs[i, j]
                k2 = cnt + 1
                if (
                    m2 not in nxt_count
                    or k2 > nxt_count[m2]
                    or (k2 == nxt_count[m2] and c2 < nxt_cost[m2])
                ):
                    nxt_count[m2] = k2
                    nxt_cost[m2] = c2
        best, counts = nxt_cost, nxt_count
    top = max(counts.values())
    return top, min(best[m] for m in best if counts[m] == top)


class TestBuildCostMatrix:
    def projected(self, box=(100.0, 100.0, 40.0, 20.0), tl_type=TlType.THREE_BULB):
        return [(PixelBox(*box), tl_type)]

    def test_identical_boxes_zero_cost(self):
        det = make_detection(box=(100.0, 100.0, 40.0, 20.0), cls=TlClass.THREE_RED)
        costs = build_cost_matrix(self.projected(), [det], gate=100.0)
        assert costs[0, 0] == 0.0

    def test_hand_l2_distance(self):
        # Difference vector (3, 4, 0, 0) has norm 5.
        det = make_detection(box=(103.0, 104.0, 40.0, 20.0), cls=TlClass.THREE_RED)
        costs = build_cost_matrix(self.projected(), [det], gate=100.0)
        assert costs[0, 0] == pytest.approx(5.0)

    def test_type_mismatch_is_infinite(self):
        det = make_detection(box=(100.0, 100.0, 40.0, 20.0), cls=TlClass.FOUR_GLEFT)
        costs = build_cost_matrix(self.projected(), [det], gate=100.0)
        assert np.isinf(costs[0, 0])

    def test_beyond_gate_is_infinite(self):
        det = make_detection(box=(300.0, 100.0, 40.0, 20.0), cls=TlClass.THREE_RED)
        costs = build_cost_matrix(self.projected(), [det], gate=100.0)
        assert np.isinf(costs[0, 0])

    def test_class_level_compatibility(self):
        # Any state of the map light's type is compatible, not only the
        # currently displayed one.
        det = make_detection(box=(100.0, 100.0, 40.0, 20.0), cls=TlClass.THREE_GREEN)
        costs = build_cost_matrix(self.projected(), [det], gate=100.0)
        assert np.isfinite(costs[0, 0])


class TestSolveAssignment:
    def test_two_by_two(self):
        # Brute force over both permutations: diag = 2 beats anti-diag = 5.
        out = solve_assignment(np.array([[1.0, 2.0], [3.0, 1.0]]))
        assert out.pairs == ((0, 0), (1, 1))
        assert out.total_cost == pytest.approx(2.0)

    def test_all_infinite_empty(self):
        out = solve_assignment(np.full((3, 4), np.inf))
        assert out.pairs == ()
        assert out.total_cost == 0.0

    def test_rectangular_single_row(self):
        out = solve_assignment(np.array([[3.0, 1.0]]))
        assert out.pairs == ((0, 1),)
        assert out.total_cost == pytest.approx(1.0)

    def test_empty_matrix(self):
        assert solve_assignment(np.zeros((0, 0))).pairs == ()
        assert solve_assignment(np.full((0, 3), np.inf)).pairs == ()

    def test_prefers_cardinality_over_cheapness(self):
        # Taking the cheap pair (0,0) alone would strand row 1; two matches
        # beat one even though their sum is larger.
        costs = np.array([[1.0, 10.0], [np.inf, 10.0]])
        out = solve_assignment(costs)
        assert out.pairs == ((0, 0), (1, 1))
        assert out.total_cost == pytest.approx(11.0)

    def test_matches_bruteforce_and_dp_small(self):
        rng = np.random.default_rng(99)
        for _ in range(300):
            M, N = rng.integers(1, 5, size=2)
            costs = rng.uniform(0, 10, size=(M, N))
            costs[rng.random(size=(M, N)) < 0.2] = np.inf
            got = solve_assignment(costs)
            k_bf, cost_bf, _ = enumerate_assignment(costs)
            k_dp, cost_dp = dp_assignment(costs)
            assert k_bf == k_dp == len(got.pairs)
            assert got.total_cost == pytest.approx(cost_bf, abs=1e-9)
            assert cost_dp == pytest.approx(cost_bf, abs=1e-9)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(17)
        for _ in range(100):
            M, N = rng.integers(2, 6, size=2)
            costs = rng.uniform(0, 10, size=(M, N))
            costs[rng.random(size=(M, N)) < 0.2] = np.inf
            perm = rng.permutation(N)
            permuted = costs[:, perm]
            a = solve_assignment(costs)
            b = solve_assignment(permuted)
            assert a.total_cost == pytest.approx(b.total_cost, abs=1e-9)
            remapped = tuple(sorted((i, int(perm[j])) for i, j in b.pairs))
            assert remapped == a.pairs

    def test_rejects_duplicate_rows_in_pairs(self):
        with pytest.raises(ValueError):
            Assignment(pairs=((0, 0), (0, 1)), total_cost=0.0)


class TestBackProject:
    T_CAM = RigidTransform("utm", "cam", FORWARD_CAM_QUAT, np.zeros(3))

    def test_similar_triangles_depth(self):
        # z = fy * H / h = 1000 * 1.0 / 100 = 10 m.
        K = make_intrinsics()
        det = make_detection(box=(K.cx, K.cy, 100.0, 50.0))
        p = back_project(det, K, self.T_CAM, type_height_m=1.0)
        # Camera on-axis ray maps to UTM +x for the forward mount.
        np.testing.assert_allclose(p, [10.0, 0.0, 0.0], atol=1e-9)

    def test_on_axis_camera_frame(self):
        K = make_intrinsics()
        det = make_detection(box=(K.cx, K.cy, 80.0, 40.0))
        identity = RigidTransform.identity("utm", "cam")
        p = back_project(det, K, identity, type_height_m=0.8)
        np.testing.assert_allclose(p, [0.0, 0.0, 10.0], atol=1e-9)

    def test_degenerate_box_rejected(self):
        K = make_intrinsics()
        det = make_detection(box=(K.cx, K.cy, 0.0, 40.0))
        with pytest.raises(DegenerateBoxError):
            back_project(det, K, self.T_CAM, type_height_m=1.0)

    @pytest.mark.parametrize("tl_type", list(TlType))
    @pytest.mark.parametrize("depth", [5.0, 10.0, 20.0, 40.0, 64.0])
    def test_roundtrip_with_projection(self, tl_type, depth):
        # Geometric consistency: projecting a light and back-projecting the
        # resulting box recovers the on-axis depth within 1%.
        from tltrack.hdmap import MapTrafficLight

        K = make_intrinsics()
        height = DEFAULT_TYPE_HEIGHTS_M[tl_type]
        light = MapTrafficLight(
            light_id="L",
            position=np.array([depth, 0.0, 0.0]),
            heading_deg=180.0,
            dims=np.array([0.3, height, 0.05]),
            tl_type=tl_type,
        )
        box = project_box(light, self.T_CAM, K)
        assert box is not None
        det = make_detection(box=(box.c_x, box.c_y, box.h, box.w))
        p = back_project(det, K, self.T_CAM, type_height_m=height)
        assert np.linalg.norm(p - light.position) < 0.01 * depth
