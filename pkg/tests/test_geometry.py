import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from straighten.errors import DegenerateSample, SelfIntersection
from straighten.geometry import (AmbientSplit, EmbeddedManifold, TubularNeighbourhood,
                                 discrete_reach, embed_at_height, estimate_tangent_frame,
                                 local_reach, project_to_Q, segment_distance, write_samples_csv)
from straighten.scenes import circle, figure_eight, line


def test_split_validation():
    s = AmbientSplit(2, 2, 1)
    assert s.dim == 4 and s.vertical_index == 3
    assert s.u.tolist() == [0, 0, 0, 1]
    with pytest.raises(ValueError):
        AmbientSplit(0, 1)
    with pytest.raises(ValueError):
        AmbientSplit(2, 1, 1)


def test_coincident_samples_rejected():
    with pytest.raises(DegenerateSample):
        EmbeddedManifold([[0, 0], [0, 0], [1, 0]], AmbientSplit(1, 1))


def test_tangent_horizontal_segment_exact():
    x = np.arange(11) * 0.1
    m = EmbeddedManifold(np.column_stack([x, np.zeros(11)]), AmbientSplit(1, 1))
    T = estimate_tangent_frame(m)
    assert np.array_equal(T.vectors[:, 0], np.tile([1.0, 0.0], (11, 1)))


def test_tangent_circle_analytic():
    m = circle(256)
    th = m.params[:, 0]
    T = estimate_tangent_frame(m).vectors[:, 0]
    ref = np.column_stack([-np.sin(th), np.cos(th), np.zeros_like(th)])
    assert np.abs(T - ref).max() < 1e-3


def test_tangent_two_samples_chord():
    m = EmbeddedManifold([[0, 0, 0], [1, 1, 0]], AmbientSplit(2, 1))
    T = estimate_tangent_frame(m).vectors[:, 0]
    ref = np.array([1, 1, 0]) / math.sqrt(2)
    assert np.allclose(T, ref, atol=1e-15)


def test_tangent_frame_orthonormal_grid():
    from straighten.scenes import whitney
    T = estimate_tangent_frame(whitney(11)).vectors
    G = np.einsum("nid,njd->nij", T, T)
    assert np.abs(G - np.eye(2)).max() < 1e-12


def test_tangent_orientation_consistent():
    T = estimate_tangent_frame(circle(200)).vectors[:, 0]
    dots = np.einsum("nd,nd->n", T, np.roll(T, -1, axis=0))
    assert dots.min() > 0


def _helix_error(n):
    t = np.linspace(0, 2 * np.pi, n)
    pos = np.column_stack([np.cos(t), np.sin(t), 0.5 * t])
    m = EmbeddedManifold(pos, AmbientSplit(2, 1), params=t[:, None])
    T = estimate_tangent_frame(m).vectors[:, 0]
    d = np.column_stack([-np.sin(t), np.cos(t), 0.5 * np.ones_like(t)])
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.abs(T - d).max()


def test_tangent_second_order():
    e1, e2 = _helix_error(201), _helix_error(401)
    assert e1 / e2 >= 3.5


def test_reach_parallel_lines():
    x = np.linspace(-1, 1, 41)
    pos = np.concatenate([np.column_stack([x, np.zeros(41)]), np.column_stack([x, np.ones(41)])])
    m = EmbeddedManifold(pos, AmbientSplit(1, 1), components=[0] * 41 + [1] * 41)
    assert abs(discrete_reach(m) - 0.5) < 1e-12


def test_reach_circle_brute_force():
    m = circle(256)
    lam = 2 * np.pi / 4
    r = discrete_reach(m, locality=lam)
    assert abs(r - 1.0) < 0.02
    # brute force over all far pairs with the analytic normal
    th = m.params[:, 0]
    P = m.positions
    best = np.inf
    for i in range(0, 256, 8):
        n = -P[i]
        d = P - P[i]
        far = np.minimum(np.abs(th - th[i]), 2 * np.pi - np.abs(th - th[i])) > lam
        dn = np.abs(d @ n)
        val = (d * d).sum(1)[far] / (2 * dn[far])
        best = min(best, val.min())
    assert abs(best - r) < 0.02


def test_reach_figure_eight_self_intersection():
    with pytest.raises(SelfIntersection):
        discrete_reach(figure_eight(200))


def test_local_reach_sees_curvature_only():
    m = figure_eight(400)
    r = local_reach(m)
    assert 0.0 < r < 1.0


def test_tube_checked_rejects_large_radius():
    m = circle(128)
    with pytest.raises(ValueError):
        TubularNeighbourhood.checked(m, 2.0)
    assert TubularNeighbourhood.checked(m, 0.5).radius == 0.5
    assert TubularNeighbourhood.checked(figure_eight(200), 0.1).immersed


def test_project_to_Q_examples():
    m = EmbeddedManifold([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], AmbientSplit(2, 1))
    p = project_to_Q(m)
    assert p.positions.tolist() == [[1, 2], [4, 5]]
    assert p.split.n == 0
    flat = EmbeddedManifold(np.column_stack([np.linspace(0, 1, 10), np.linspace(0, 2, 10),
                                             np.zeros(10)]), AmbientSplit(2, 1))
    assert project_to_Q(flat).arc_length[-1] == pytest.approx(flat.arc_length[-1], abs=1e-15)


def test_project_to_Q_of_compressed_twist(twist_global):
    from straighten.verify import count_double_points
    assert count_double_points(project_to_Q(twist_global.final)) == 1


def test_project_embed_project_bitwise():
    m = line(50, slope=0.3, q=3)
    p = project_to_Q(m)
    again = project_to_Q(embed_at_height(p, 0.0))
    assert np.array_equal(p.positions, again.positions)


@settings(max_examples=30, deadline=None)
@given(st.integers(16, 80), st.floats(0.3, 3.0), st.floats(0.1, 0.9))
def test_fibres_of_reach_radius_are_disjoint(n, radius, frac):
    """Normal discs of radius below the reach around far-apart samples never meet."""
    m = circle(n, radius)
    lam = m.default_locality()
    r = frac * discrete_reach(m, lam)
    T = estimate_tangent_frame(m).vectors[:, 0]
    normal = np.column_stack([-m.positions[:, 0], -m.positions[:, 1], np.zeros(n)]) / radius
    a0 = m.positions - r * normal
    a1 = m.positions + r * normal
    d = m.intrinsic_distance()
    ii, jj = np.nonzero(np.triu(d > lam, 1))
    if len(ii):
        gap = segment_distance(a0[ii], a1[ii], a0[jj], a1[jj])
        assert gap.min() > 0
    assert np.allclose(np.einsum("nd,nd->n", T, normal), 0, atol=1e-12)


def test_samples_csv(tmp_path):
    m = line(5)
    write_samples_csv(m, tmp_path / "s.csv")
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert rows[0] == "p0,x0,x1,x2" and len(rows) == 6
