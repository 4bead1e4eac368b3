import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from straighten import fields as F
from straighten.compress import CompressionConfig, global_flow_trace
from straighten.errors import NonTransverse, WrongMode
from straighten.flow import FlowConfig, IsotopyTrace, integrate
from straighten.geometry import AmbientSplit, EmbeddedManifold, TubularNeighbourhood, project_to_Q
from straighten.scenes import builtin, circle, constant_up, figure_eight, line
from straighten.verify import (SPEED_LIMIT, check_displacement, check_immersion,
                               check_normality, check_rise_rate, check_speed, check_vertical,
                               count_double_points, double_point_census, verify_run, verify_trace)

S3 = AmbientSplit(2, 1)
U = S3.u


class ConstantField:
    tube = None
    u = U

    def __init__(self, v):
        self.v = np.asarray(v, float) / np.linalg.norm(v)

    def __call__(self, x, anchors=None):
        return np.broadcast_to(self.v, np.shape(x)).copy()


def _still(m, frame):
    tr = IsotopyTrace(m, "modified")
    tr.record(0.0, m.positions, frame)
    tr.record(1.0, m.positions, frame)
    return tr


def _compressible_global():
    m = line(30, slope=0.4)
    gamma = F.globalize(m, constant_up(m), TubularNeighbourhood(m, 0.05))
    return integrate(m, None, gamma, FlowConfig(0.05, 0.5, "global", verticality_tol=-1.0),
                     raise_on_stall=False)


# -- rise rate ------------------------------------------------------------------

def test_rise_rate_compressible_is_one():
    e = check_rise_rate(_compressible_global(), 0.6, 0.15)
    assert e.measured == pytest.approx(1.0, abs=1e-12) and e.passed


def test_rise_rate_twist_mu_02():
    s = builtin("twist")
    tr = global_flow_trace(s.manifold, s.frame, CompressionConfig(mu=0.2, record_every=5))
    eps = tr.meta["epsilon_angle"]
    assert eps == pytest.approx(0.6, abs=5e-3)
    e = check_rise_rate(tr, eps, 0.2)
    assert e.passed and e.measured >= math.sin(0.4) - 1e-3


def test_rise_rate_wrong_mode():
    m = line(10)
    with pytest.raises(WrongMode):
        check_rise_rate(_still(m, np.tile(U, (10, 1))), 0.6, 0.1)


# -- speed ----------------------------------------------------------------------

def test_speed_compressible_zero():
    m = line(10)
    assert check_speed(_still(m, np.tile(U, (10, 1)))).measured == 0.0


def test_speed_twist_in_range(twist_local):
    e = twist_local.report["speed"]
    assert 0.0 < e.measured <= SPEED_LIMIT and e.passed


@pytest.mark.parametrize("c", [0.95, 0.6, 0.2, 0.0])
def test_speed_tight_on_single_sample(c):
    m = EmbeddedManifold([[0.0, 0.0, 0.0]], S3)
    v = [math.sqrt(1 - c * c), 0.0, c]
    tr = integrate(m, None, ConstantField(v), FlowConfig(0.01, 0.2, "modified", verticality_tol=-1),
                   raise_on_stall=False)
    assert check_speed(tr).measured == pytest.approx(math.sqrt(2 - 2 * c), abs=1e-6)


def test_speed_violation_reported_not_raised():
    m = EmbeddedManifold([[0.0, 0.0, 0.0]], S3)
    # horizontal field: exactly the sqrt 2 boundary
    flat = integrate(m, None, ConstantField([1, 0, 0]), FlowConfig(0.01, 0.1, "modified",
                     verticality_tol=-1), raise_on_stall=False)
    assert check_speed(flat).measured == pytest.approx(math.sqrt(2), abs=1e-12)
    # a field pointing below horizontal is invalid and must fail
    down = integrate(m, None, ConstantField([1, 0, -0.2]), FlowConfig(0.01, 0.1, "modified",
                     verticality_tol=-1), raise_on_stall=False)
    e = check_speed(down)
    assert not e.passed and e.measured > SPEED_LIMIT


# -- displacement -------------------------------------------------------------------

def test_displacement_examples(twist_local, twist_global):
    m = line(10)
    assert check_displacement(_still(m, np.tile(U, (10, 1))), 0.1).measured == 0.0
    assert twist_local.report["displacement"].passed
    e = check_displacement(twist_global.trace, 1e-3)
    assert not e.passed and e.measured > 1e-3


# -- normality -----------------------------------------------------------------------

def test_normality_flat_compressible():
    x = np.linspace(0, 1, 20)
    m = EmbeddedManifold(np.column_stack([x, np.zeros(20), np.zeros(20)]), S3)
    e = check_normality(_still(m, np.tile(U, (20, 1))), 0.2, 0.1)
    assert e.measured == pytest.approx(math.pi / 2, abs=1e-12) and e.passed


def test_normality_twist(twist_global):
    tr = twist_global.trace
    e = twist_global.report["normality"]
    assert e.passed
    assert e.detail["initial"] >= tr.meta["mu"] - tr.meta["smoothing"]


def test_normality_tangent_fixture_fails():
    m = line(20, slope=0.3)
    from straighten.geometry import estimate_tangent_frame
    T = estimate_tangent_frame(m).vectors[:, 0]
    e = check_normality(_still(m, T), 0.2, 0.1)
    assert not e.passed and e.detail["initial"] < 1e-6


# -- immersion ------------------------------------------------------------------------

def test_immersion_tilted_line_ratio():
    s = 0.7
    e = check_immersion(line(20, slope=s))
    assert e.measured == pytest.approx(math.cos(s), abs=1e-12)


def test_immersion_compressed_twist(twist_global):
    assert twist_global.report["immersion"].measured > 0.1


def test_immersion_vertical_segment_fails():
    z = np.linspace(0, 1, 10)
    m = EmbeddedManifold(np.column_stack([np.zeros(10), np.zeros(10), z]), S3)
    e = check_immersion(m)
    assert e.measured == pytest.approx(0.0, abs=1e-12) and not e.passed


def test_vertical_check():
    m = line(10)
    f = np.tile(U, (10, 1))
    assert check_vertical(_still(m, f), 1e-3).measured == 0.0
    f[3] = [math.sin(0.01), 0, math.cos(0.01)]
    e = check_vertical(_still(m, f), 1e-3)
    assert not e.passed and e.measured == pytest.approx(0.01, abs=1e-12)


# -- double points ------------------------------------------------------------------------

def test_double_points_circle_and_figure_eight():
    assert count_double_points(project_to_Q(circle(128))) == 0
    # the crossing of the generator falls on two samples, the worst case
    for n in (200, 201):
        f8 = figure_eight(n)
        flat = EmbeddedManifold(f8.positions, AmbientSplit(2, 0), closed=True)
        assert count_double_points(flat) == 1


def test_double_points_compressed_twist(twist_global):
    assert count_double_points(project_to_Q(twist_global.final)) == 1


def test_double_points_through_vertices():
    # a plus sign crossing at a sample of one stroke, then of both
    pts = np.array([[-1.0, 0.0], [0.0, 0.0], [1.0, 0.0], [1.0, 2.0], [0.0, 1.0], [0.0, -1.0]])
    m = EmbeddedManifold(pts, AmbientSplit(2, 0))
    assert count_double_points(m) == 1
    pts = np.array([[-1.0, 0.0], [0.0, 0.0], [1.0, 0.0], [1.0, 2.0], [0.0, 1.0], [0.0, 0.0],
                    [0.0, -1.0]])
    m = EmbeddedManifold(pts, AmbientSplit(2, 0))
    assert count_double_points(m) == 1


def test_double_points_in_space():
    t = np.linspace(-1, 1, 21)
    a = np.column_stack([t, np.zeros(21), np.zeros(21)])
    b = np.column_stack([np.zeros(21) + 0.0125, t + 0.0125, np.zeros(21)])
    c = np.column_stack([np.full(21, 2.0), np.full(21, 1.0), t])
    m = EmbeddedManifold(np.vstack([a, b, c]), AmbientSplit(3, 0), components=[0] * 21 + [1] * 21 + [2] * 21)
    assert double_point_census(m).count == 1


def test_non_transverse_reported():
    pts = np.array([[0.0, 0.0], [2.0, 0.0], [2.0, 1.0], [1.0, 1.0], [0.5, 1e-3], [1.5, -1e-3]])
    m = EmbeddedManifold(pts, AmbientSplit(2, 0))
    with pytest.raises(NonTransverse) as info:
        count_double_points(m, transverse_tol=1e-2)
    assert info.value.count == 1


def _orient(a, b, c):
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _brute_crossings(P, closed):
    n = len(P)
    segs = [(i, (i + 1) % n) for i in range(n if closed else n - 1)]
    count = 0
    for x in range(len(segs)):
        for y in range(x + 1, len(segs)):
            (i, j), (k, l) = segs[x], segs[y]
            if {i, j} & {k, l}:
                continue
            d1 = _orient(P[k], P[l], P[i])
            d2 = _orient(P[k], P[l], P[j])
            d3 = _orient(P[i], P[j], P[k])
            d4 = _orient(P[i], P[j], P[l])
            if d1 * d2 < 0 and d3 * d4 < 0:
                count += 1
    return count


@settings(max_examples=100, deadline=None)
@given(st.integers(4, 40), st.booleans(), st.integers(0, 2**32 - 1))
def test_double_points_match_brute_force(n, closed, seed):
    P = np.random.default_rng(seed).uniform(-1, 1, size=(n, 2))
    m = EmbeddedManifold(P, AmbientSplit(2, 0), closed=closed and n > 3)
    assert double_point_census(m).count == _brute_crossings(P, closed and n > 3)


# -- reports ----------------------------------------------------------------------------

def test_report_is_pure(twist_local):
    tr = twist_local.trace
    a = verify_trace(tr).to_dict()
    b = verify_trace(tr).to_dict()
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
    assert json.dumps(a, sort_keys=True) == json.dumps(twist_local.report.to_dict(), sort_keys=True)


def test_report_roundtrip_through_file(tmp_path, twist_global):
    p = tmp_path / "t.jsonl"
    twist_global.trace.write_jsonl(p)
    again = verify_run(IsotopyTrace.read_jsonl(p))
    assert again.to_json() == twist_global.report.to_json()


def test_report_table_and_lookup(twist_global):
    rep = twist_global.report
    assert rep.names()[0] == "vertical"
    assert "overall: pass" in rep.table()
    with pytest.raises(KeyError):
        rep["nope"]
