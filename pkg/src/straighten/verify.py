"""Measured checks of every quantitative bound along a straightening run.

Each check returns an :class:`InvariantEntry` carrying the measured value,
the bound it is compared against and a short statement of the bound.  All
checks are pure functions of a trace, so re-verifying a stored trace gives
identical entries.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import NonTransverse, WrongMode
from .geometry import AmbientSplit, EmbeddedManifold, estimate_tangent_frame, segment_distance

BOUND_TOL = 1e-3
SPEED_LIMIT = math.sqrt(2.0)
IMMERSION_TOL = 0.1
RELATIVE_TOL = 1e-6


@dataclass(frozen=True)
class InvariantEntry:
    name: str
    measured: float
    bound: float
    passed: bool
    statement: str
    detail: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["measured"] = _num(self.measured)
        d["bound"] = _num(self.bound)
        d["passed"] = bool(self.passed)
        return d


def _num(x):
    x = float(x)
    return x if math.isfinite(x) else repr(x)


@dataclass
class InvariantReport:
    entries: list = field(default_factory=list)

    def add(self, entry):
        if entry is not None:
            self.entries.append(entry)
        return entry

    @property
    def overall(self):
        return all(e.passed for e in self.entries)

    def __getitem__(self, name):
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def names(self):
        return [e.name for e in self.entries]

    def to_dict(self):
        return {"overall": self.overall, "entries": [e.to_dict() for e in self.entries]}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self):
        rows = [("check", "measured", "bound", "status")]
        for e in self.entries:
            rows.append((e.name, f"{e.measured:.6g}", f"{e.bound:.6g}", "pass" if e.passed else "FAIL"))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        lines.append(f"overall: {'pass' if self.overall else 'FAIL'}")
        return "\n".join(lines)


def _rates(trace):
    """Per-interval positions difference and time step over the snapshots."""
    x = np.stack(trace.positions)
    t = np.asarray(trace.times)
    return np.diff(x, axis=0), np.diff(t)


def check_rise_rate(trace, epsilon_angle, mu) -> InvariantEntry:
    """Minimum height gain per unit time in the unmodified global flow."""
    if trace.mode != "global":
        raise WrongMode(f"rise rate applies to global-flow traces, not {trace.mode!r}")
    bound = math.sin(epsilon_angle - mu) - BOUND_TOL
    dx, dt = _rates(trace)
    if len(dt) == 0:
        measured = math.inf
    else:
        k = trace.split.vertical_index
        measured = float((dx[:, :, k] / dt[:, None]).min())
    return InvariantEntry("rise_rate", measured, bound, measured >= bound,
                          "height rises at rate at least sin(eps - mu)")


def check_speed(trace) -> InvariantEntry:
    """Maximum sample speed over recorded intervals; must stay below sqrt 2."""
    dx, dt = _rates(trace)
    measured = float((np.linalg.norm(dx, axis=2) / dt[:, None]).max()) if len(dt) else 0.0
    bound = SPEED_LIMIT + BOUND_TOL
    return InvariantEntry("speed", measured, bound, measured <= bound,
                          "modified flow moves points slower than sqrt(2)")


def check_displacement(trace, epsilon_budget) -> InvariantEntry:
    """Largest distance between a sample's first and last positions."""
    measured = float(trace.displacement().max())
    return InvariantEntry("displacement", measured, float(epsilon_budget),
                          measured < epsilon_budget, "each point moves less than the budget")


def normality_profile(trace):
    """Minimum angle between carried vector and tangent space, per snapshot."""
    out = []
    for i in range(len(trace)):
        m = trace.manifold(i)
        T = estimate_tangent_frame(m)
        out.append(float(T.angle_to(trace.frames[i]).min()))
    return np.array(out)


def check_normality(trace, mu, smoothing) -> InvariantEntry:
    """Carried field stays transverse; at t = 0 it is at least mu - smoothing off M."""
    prof = normality_profile(trace)
    initial_bound = mu - smoothing - 1e-6
    ok = bool(np.all(prof > 0.0) and prof[0] >= initial_bound)
    return InvariantEntry("normality", float(prof.min()), 0.0, ok,
                          "carried field stays normal; initially at least mu - smoothing from M",
                          {"initial": float(prof[0]), "initial_bound": float(initial_bound)})


def tangent_projection_ratio(m: EmbeddedManifold):
    """Per sample, the smallest stretch factor of vertical projection on T_p M."""
    T = estimate_tangent_frame(m)
    keep = [i for i in range(m.split.dim) if i != m.split.vertical_index]
    proj = T.vectors[:, :, keep]
    return np.linalg.svd(proj, compute_uv=False)[:, -1]


def check_immersion(m: EmbeddedManifold, tol=IMMERSION_TOL) -> InvariantEntry:
    """The vertical projection of the final embedding is an immersion."""
    measured = float(tangent_projection_ratio(m).min())
    return InvariantEntry("immersion", measured, float(tol), measured >= tol,
                          "projection to Q is an immersion (tangent ratio)")


def check_vertical(trace, tol) -> InvariantEntry:
    """Final carried field within ``tol`` radians of vertical."""
    f = trace.frames[-1]
    u = trace.split.u
    c = np.clip(f @ u, -1.0, 1.0)
    ang = np.arctan2(np.linalg.norm(f - c[:, None] * u, axis=1), c)
    measured = float(ang.max())
    return InvariantEntry("vertical", measured, float(tol), measured <= tol,
                          "final field is vertically up")


def check_fixed(trace, fixed, tol=RELATIVE_TOL) -> InvariantEntry:
    """Samples of the relative region stay put."""
    fixed = np.asarray(fixed, bool)
    d = trace.displacement()[fixed]
    measured = float(d.max()) if d.size else 0.0
    return InvariantEntry("relative_fixed", measured, tol, measured < tol,
                          "isotopy is fixed on the relative region")


# -- double points --------------------------------------------------------

@dataclass
class DoublePoints:
    count: int
    pairs: list
    points: list
    angles: list


def _segments(m: EmbeddedManifold):
    e = m.edges
    return m.positions[e[:, 0]], m.positions[e[:, 1]], e


def _adjacent(e, i, j):
    return len({int(e[i, 0]), int(e[i, 1])} & {int(e[j, 0]), int(e[j, 1])}) > 0


def _cross2(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _intersect(p0, p1, q0, q1, eps=1e-14, slack=1e-9):
    """Crossing test of 2-d segments, closed up to ``slack`` in both parameters.

    Returns (hit, s, angle) with s the parameter along p.  Crossings through
    a shared vertex are found on every incident segment pair and merged by
    the caller.
    """
    r = p1 - p0
    d = q1 - q0
    den = _cross2(r, d)
    if abs(den) <= eps * np.linalg.norm(r) * np.linalg.norm(d):
        return False, 0.0, 0.0
    w = q0 - p0
    s = _cross2(w, d) / den
    t = _cross2(w, r) / den
    if -slack <= s <= 1.0 + slack and -slack <= t <= 1.0 + slack:
        sin = abs(den) / (np.linalg.norm(r) * np.linalg.norm(d))
        return True, float(s), float(np.arcsin(min(1.0, sin)))
    return False, 0.0, 0.0


def double_point_census(m: EmbeddedManifold, threshold=None) -> DoublePoints:
    """Crossings of a projected curve.

    In a 2-dimensional target, non-adjacent segments are tested after a
    sweep over x-extents; hits at the same point on segments sharing a
    vertex are merged, so a crossing through a vertex is counted once.  In higher targets, segment pairs closer than
    ``threshold`` (default a tenth of the shortest edge) are clustered and
    each cluster counts as one double point.
    """
    if m.dim != 1:
        raise ValueError("double points are counted for curves only")
    a, b, e = _segments(m)
    if m.positions.shape[1] == 2:
        return _census_plane(a, b, e)
    thr = 0.1 * m.min_edge if threshold is None else threshold
    return _census_space(m, a, b, e, thr)


def _census_plane(a, b, e):
    scale = max(1.0, float(np.abs(np.concatenate([a, b])).max()))
    pad = 1e-9 * scale
    lo = np.minimum(a[:, 0], b[:, 0]) - pad
    hi = np.maximum(a[:, 0], b[:, 0]) + pad
    ylo = np.minimum(a[:, 1], b[:, 1]) - pad
    yhi = np.maximum(a[:, 1], b[:, 1]) + pad
    order = np.argsort(lo, kind="stable")
    hits = []
    for pos, i in enumerate(order):
        for j in order[pos + 1:]:
            if lo[j] > hi[i]:
                break
            if ylo[j] > yhi[i] or ylo[i] > yhi[j] or _adjacent(e, i, j):
                continue
            hit, s, ang = _intersect(a[i], b[i], a[j], b[j])
            if hit:
                i0, j0 = int(min(i, j)), int(max(i, j))
                hits.append(((i0, j0), a[i] + s * (b[i] - a[i]), ang))
    hits.sort(key=lambda h: h[0])
    kept = []
    for pair, pt, ang in hits:
        dup = any(np.linalg.norm(pt - q) <= 1e-8 * scale and _same_crossing(e, pair, p)
                  for p, q, _ in kept)
        if not dup:
            kept.append((pair, pt, ang))
    return DoublePoints(len(kept), [k[0] for k in kept], [k[1].tolist() for k in kept],
                        [k[2] for k in kept])


def _same_crossing(e, p, q):
    def near(i, j):
        return i == j or _adjacent(e, i, j)
    return (near(p[0], q[0]) and near(p[1], q[1])) or (near(p[0], q[1]) and near(p[1], q[0]))


def _census_space(m, a, b, e, thr):
    n = len(e)
    close = []
    for i in range(n):
        j = np.arange(i + 2, n)
        if not len(j):
            continue
        d = segment_distance(np.broadcast_to(a[i], (len(j), a.shape[1])),
                             np.broadcast_to(b[i], (len(j), a.shape[1])), a[j], b[j])
        for k in j[d < thr]:
            if not _adjacent(e, i, k):
                close.append((i, int(k)))
    # cluster pairs that are neighbours in both indices
    clusters = []
    for p in close:
        for c in clusters:
            if any(abs(p[0] - q[0]) <= 1 and abs(p[1] - q[1]) <= 1 for q in c):
                c.append(p)
                break
        else:
            clusters.append([p])
    pairs = [c[0] for c in clusters]
    points = [(0.5 * (a[i] + b[i])).tolist() for i, _ in pairs]
    angles = []
    for i, j in pairs:
        r = (b[i] - a[i]) / np.linalg.norm(b[i] - a[i])
        d = (b[j] - a[j]) / np.linalg.norm(b[j] - a[j])
        angles.append(float(np.arccos(min(1.0, abs(r @ d)))))
    return DoublePoints(len(pairs), pairs, points, angles)


def count_double_points(m: EmbeddedManifold, transverse_tol=1e-3, threshold=None) -> int:
    """Number of double points of a projected curve.

    Raises
    ------
    NonTransverse
        If some crossing angle is below ``transverse_tol``; the count is on
        the exception's ``count`` attribute.
    """
    census = double_point_census(m, threshold)
    bad = [a for a in census.angles if a < transverse_tol]
    if bad:
        exc = NonTransverse(f"{len(bad)} crossing(s) below {transverse_tol} rad")
        exc.count = census.count
        raise exc
    return census.count


# -- full reports -------------------------------------------------------

def verify_trace(trace, *, epsilon_angle=None, mu=None, smoothing=None, epsilon_budget=None,
                 verticality_tol=None, fixed=None, immersion_tol=None) -> InvariantReport:
    """Run every applicable check; missing arguments are read from ``trace.meta``."""
    meta = trace.meta
    eps = meta.get("epsilon_angle") if epsilon_angle is None else epsilon_angle
    mu = meta.get("mu") if mu is None else mu
    smoothing = meta.get("smoothing") if smoothing is None else smoothing
    budget = meta.get("epsilon_budget") if epsilon_budget is None else epsilon_budget
    vtol = (verticality_tol if verticality_tol is not None
            else meta.get("verticality_tol", trace.config.get("verticality_tol", 1e-3)))
    fixed = meta.get("fixed") if fixed is None else fixed
    if immersion_tol is None:
        immersion_tol = meta.get("immersion_tol", IMMERSION_TOL)
    rep = InvariantReport()
    rep.add(check_vertical(trace, vtol))
    if trace.mode == "global":
        if eps is not None and mu is not None:
            rep.add(check_rise_rate(trace, eps, mu))
    elif trace.mode in ("modified", "phased"):
        rep.add(check_speed(trace))
    if budget is not None:
        rep.add(check_displacement(trace, budget))
    if trace.template.n_samples >= 2 and mu is not None:
        rep.add(check_normality(trace, mu, smoothing if smoothing is not None else 0.0))
    if fixed is not None and np.any(fixed):
        rep.add(check_fixed(trace, fixed))
    if trace.template.n_samples >= 2:
        rep.add(check_immersion(trace.final, immersion_tol))
    return rep


def pass_traces(trace):
    """Split a multi-compression trace into its per-axis passes.

    Each pass is returned on the coordinates it acted on, with the vertical
    factor it straightened, so it can be verified like a single run.
    """
    split = trace.split
    out = []
    for p in trace.meta["passes"]:
        sub = AmbientSplit(split.q, split.n - p["axis"], 0)
        tr = trace.restrict(p["start"], p["stop"], p["keep"], sub, p["mode"], p["meta"])
        # the pass starts from the previous pass's positions but its own field
        tr.frames[0] = np.array(p["initial_frame"], dtype=float)
        out.append((p["axis"], tr))
    return out


def verify_run(trace) -> InvariantReport:
    """Verification of a stored run: per pass for multi-compression traces."""
    if "passes" not in trace.meta:
        return verify_trace(trace)
    rep = InvariantReport()
    for axis, sub in pass_traces(trace):
        for e in verify_trace(sub).entries:
            rep.add(replace(e, name=f"axis{axis}_{e.name}"))
    return rep
