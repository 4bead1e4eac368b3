import json
import math

import numpy as np
import pytest

from straighten import fields as F
from straighten.compress import (CompressionConfig, compress_global, compress_local,
                                 compress_multi, compute_omega)
from straighten.errors import (BudgetExceeded, NotGrounded, PreconditionFailed,
                               SelfIntersection)
from straighten.geometry import AmbientSplit, EmbeddedManifold, project_to_Q
from straighten.scenes import builtin, constant_up, line, slope_normal
from straighten.verify import double_point_census, tangent_projection_ratio

S2 = AmbientSplit(1, 1)


def test_compressible_input_global_and_local():
    m = line(40, slope=0.5)
    a = constant_up(m)
    for res in (compress_global(m, a), compress_local(m, a, CompressionConfig(epsilon_budget=0.01))):
        assert res.status == "compressed" and res.passed
        assert res.trace.displacement().max() <= 1e-12


def test_global_twist(twist_global):
    res = twist_global
    assert res.status == "compressed" and res.passed
    assert res.report["vertical"].measured <= 1e-3
    assert res.double_points() == 1
    u = res.trace.split.u
    assert np.all(res.final_frame @ u >= math.cos(1e-3))


def test_global_and_local_agree_on_double_points(twist_global, twist_local):
    assert twist_global.double_points() == twist_local.double_points() == 1


def test_local_twist_budget_and_concentration(twist, twist_local):
    res = twist_local
    budget = twist.overrides["epsilon_budget"]
    assert res.passed
    disp = res.trace.displacement()
    assert disp.max() < budget
    W = res.marking["V"] | res.marking["U"]
    assert disp[W].sum() >= 0.95 * disp.sum()


def test_local_twist_half_support_budget(twist):
    budget = 0.5 * twist.meta["support_width"]
    res = compress_local(twist.manifold, twist.frame, CompressionConfig(epsilon_budget=budget))
    assert res.passed and res.trace.displacement().max() < budget


def test_local_uses_phased_then_residual(twist_local):
    tr = twist_local.trace
    assert tr.mode == "phased"
    p = twist_local.params
    assert p["omega"] > 0 and p["perturb_rounds"] == 0
    if p["residual_displacement"] is not None:
        assert tr.meta["stages"][0]["mode"] == "modified"


def test_relative_region_fixed(twist, twist_relative):
    res = twist_relative
    assert res.passed
    fixed = ~np.asarray(twist.meta["support"], bool)
    assert res.trace.displacement()[fixed].max() < 1e-6
    assert res.report["relative_fixed"].passed


def test_compute_omega_single_sheet_is_inert(twist):
    m = twist.manifold
    mk = F.SubsetMarking(m.n_samples, {"D": np.arange(m.n_samples) == 200})
    span = m.positions[:, 2].max() - m.positions[:, 2].min()
    assert compute_omega(m, mk, 0.05) == pytest.approx(span)


def test_compute_omega_other_sheet():
    # two horizontal sheets 0.6 apart over the same Q points
    x = np.linspace(-1, 1, 41)
    a = np.column_stack([x, np.zeros(41), np.zeros(41)])
    b = np.column_stack([x, np.zeros(41), np.full(41, 0.6)])
    m = EmbeddedManifold(np.vstack([a, b]), AmbientSplit(2, 1), components=[0] * 41 + [1] * 41)
    mk = F.SubsetMarking(82, {"D": np.arange(82) == 20})
    assert compute_omega(m, mk, 0.1) == pytest.approx(0.2)


def test_figure_eight_refused():
    s = builtin("figure_eight")
    for fn in (compress_global, lambda m, a: compress_local(m, a, CompressionConfig(epsilon_budget=0.1))):
        res = fn(s.manifold, s.frame)
        assert res.status == "precondition_failed"
        assert isinstance(res.error, PreconditionFailed)
        assert res.error.condition == "immersion"
        assert isinstance(res.error.__cause__, SelfIntersection)
        with pytest.raises(PreconditionFailed):
            res.raise_for_status()


def test_codim_zero_needs_perpendicular_grounded_field():
    x = np.linspace(-1, 1, 30)
    m = EmbeddedManifold(np.column_stack([x, 0.3 * x]), S2)
    tilted = F.NormalFrame.from_vectors(np.tile([0.3, 1.0], (30, 1)))
    res = compress_global(m, tilted)
    assert res.status == "precondition_failed" and res.error.condition == "codim"
    # perpendicular and grounded: accepted in codimension zero
    res = compress_global(m, slope_normal(m))
    assert res.status == "compressed" and res.passed


def test_codim_zero_not_grounded_enough():
    # nearly flat line with a downward normal: grounded only by 1e-4 radians
    x = np.linspace(-1, 1, 30)
    m = EmbeddedManifold(np.column_stack([x, 1e-4 * x]), S2)
    down = F.NormalFrame.from_vectors(-slope_normal(m).field(0))
    res = compress_global(m, down)
    assert res.status == "precondition_failed" and isinstance(res.error, NotGrounded)


def test_relative_boundary_arc_in_plane():
    t = np.linspace(0.2, math.pi - 0.2, 60)
    pos = np.column_stack([np.cos(t), np.sin(t)])
    flags = np.zeros(60, bool)
    flags[[0, -1]] = True
    m = EmbeddedManifold(pos, S2, boundary_flags=flags)
    down = F.NormalFrame.from_vectors(-pos)      # inward normal, points down at the top
    res = compress_global(m, down)
    assert res.status == "compressed" and res.params["route"] == "relative_boundary"
    assert res.report["vertical"].passed and res.report["immersion"].passed
    assert res.report["normality"].passed


def test_local_budget_exceeded():
    s = builtin("twist")
    with pytest.raises(BudgetExceeded) as info:
        compress_local(s.manifold, s.frame, CompressionConfig(epsilon_budget=1e-3, max_refinements=0))
    assert info.value.displacement >= 1e-3


def test_local_requires_budget(twist):
    with pytest.raises(ValueError):
        compress_local(twist.manifold, twist.frame, CompressionConfig())


def test_determinism(twist):
    cfg = CompressionConfig(epsilon_budget=0.3)
    a = compress_local(twist.manifold, twist.frame, cfg)
    b = compress_local(twist.manifold, twist.frame, cfg)
    assert json.dumps(a.manifest(cfg), sort_keys=True) == json.dumps(b.manifest(cfg), sort_keys=True)
    for x, y in zip(a.trace.positions, b.trace.positions):
        assert np.array_equal(x, y)


def test_refinement_never_grows_displacement(twist):
    m, a = twist.manifold, twist.frame
    base = dict(nu=0.075, delta=0.15, u_prime_radius=2 * m.max_edge, u_radius=4 * m.max_edge)
    disp = []
    for k in range(4):
        f = 0.5 ** k
        cfg = CompressionConfig(epsilon_budget=0.3, max_refinements=0,
                                **{key: v * f for key, v in base.items()})
        res = compress_local(m, a, cfg)
        assert res.status == "compressed"
        disp.append(float(res.trace.displacement().max()))
    for prev, cur in zip(disp, disp[1:]):
        assert cur <= 1.05 * prev


# -- multi -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def multi_result(multi_circle):
    cfg = CompressionConfig(epsilon_budget=1.0, mu=0.3)
    return compress_multi(multi_circle.manifold, multi_circle.frame, cfg)


def test_multi_circle(multi_result):
    res = multi_result
    assert res.status == "compressed" and res.passed
    angles = res.params["axis_angles"]
    assert max(angles) <= 1e-2
    q = res.final.split.q
    for i in range(2):
        assert np.all(res.final_frame[:, i, q + i] >= math.cos(1e-2))
    # projection to the horizontal plane is an immersed closed curve
    assert res.final.split.q == 2 and res.final.closed
    assert tangent_projection_ratio(res.final).min() >= 0.1
    census = double_point_census(project_to_Q(res.final))
    assert all(a >= 1e-3 for a in census.angles)


def test_multi_report_per_pass(multi_result):
    names = multi_result.report.names()
    assert "axis0_vertical" in names and "axis1_immersion" in names
    assert len(multi_result.trace.meta["passes"]) == 2


def test_multi_noop_when_parallel(multi_circle):
    m = multi_circle.manifold
    v = np.zeros((m.n_samples, 2, 4))
    v[:, 0, 2] = 1.0
    v[:, 1, 3] = 1.0
    res = compress_multi(m, F.NormalFrame(v), CompressionConfig(epsilon_budget=0.1))
    assert res.status == "compressed" and res.trace.displacement().max() == 0.0


def test_multi_single_field_equals_local(twist):
    cfg = CompressionConfig(epsilon_budget=0.3)
    a = compress_local(twist.manifold, twist.frame, cfg)
    b = compress_multi(twist.manifold, twist.frame, cfg)
    assert len(a.trace) == len(b.trace)
    for x, y in zip(a.trace.positions, b.trace.positions):
        assert np.array_equal(x, y)
    assert np.array_equal(a.final_frame, b.final_frame[:, 0])


def test_multi_codim_check():
    t = 2 * np.pi * np.arange(32) / 32
    m = EmbeddedManifold(np.column_stack([np.cos(t), np.sin(t), np.zeros(32)]),
                         AmbientSplit(1, 2), closed=True)
    v = np.zeros((32, 2, 3))
    v[:, 0] = np.column_stack([np.cos(t), np.sin(t), np.zeros(32)])
    v[:, 1, 2] = 1.0
    res = compress_multi(m, F.NormalFrame(v), CompressionConfig(epsilon_budget=0.1))
    assert res.status == "precondition_failed" and res.error.condition == "codim"


def test_manifest_fields(twist_local):
    man = twist_local.manifest(CompressionConfig(epsilon_budget=0.3), {"scene": "twist"})
    assert man["format"] == "straighten-manifest/1"
    assert man["status"] == "compressed" and man["double_points"] == 1
    assert man["scene"] == "twist" and man["error"] is None
    assert man["displacement"]["max"] < 0.3
    json.dumps(man)
