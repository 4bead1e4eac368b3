"""Straightening pipelines: global, local (displacement-bounded) and multi-field.

Every pipeline returns a :class:`CompressionResult` holding the isotopy
trace, the verification report and the final embedding and field.  Failed
preconditions and non-convergence are reported through ``status``;
:meth:`CompressionResult.raise_for_status` re-raises them.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import fields as F
from . import ramps
from .errors import (BudgetExceeded, NotConverged, NotGrounded, PreconditionError,
                     PreconditionFailed, SelfIntersection)
from .flow import FlowConfig, IsotopyTrace, integrate
from .geometry import (AmbientSplit, EmbeddedManifold, TubularNeighbourhood, discrete_reach,
                       estimate_tangent_frame, local_reach, project_to_Q)
from .verify import IMMERSION_TOL, InvariantReport, double_point_census, verify_run, verify_trace

MANIFEST_FORMAT = "straighten-manifest/1"


@dataclass(frozen=True, eq=False)
class CompressionConfig:
    """Numerical parameters of the straightening pipelines.

    Lengths left as ``None`` are derived from the input: ``nu`` from the
    reach (and the budget in local mode), ``delta`` from the budget,
    ``u_prime_radius`` / ``u_radius`` as 2 / 4 edge lengths, ``collar`` as
    the V radius, ``h`` as ``0.2 min(nu, edge)``.  ``mu`` defaults to a
    quarter of the measured grounding angle and ``smoothing`` to ``mu / 2``.
    ``relative`` is a boolean sample mask held fixed.
    """

    mu: float = None
    nu: float = None
    epsilon_budget: float = None
    delta: float = None
    u_prime_radius: float = None
    u_radius: float = None
    v_fraction: float = 0.4
    collar: float = None
    smoothing: float = None
    rng_seed: int = 0
    relative: np.ndarray = None
    locality: float = None
    h: float = None
    t_max: float = None
    omega: float = None
    verticality_tol: float = 1e-3
    record_every: int = 1
    max_refinements: int = 4
    horizontal_tol: float = 0.05
    downset_tol: float = math.pi / 16
    perturb_angle: float = 0.2
    max_perturb_rounds: int = 8
    min_grounding: float = 0.05
    perpendicular_tol: float = 1e-3
    immersion_tol: float = IMMERSION_TOL
    relative_steps: int = 40

    def with_(self, **kw):
        return replace(self, **kw)

    def to_dict(self):
        d = asdict(self)
        if self.relative is not None:
            d["relative"] = np.flatnonzero(np.asarray(self.relative, bool)).tolist()
        return d


@dataclass(eq=False)
class CompressionResult:
    """Outcome of a pipeline run.

    ``status`` is ``"compressed"``, ``"not_converged"`` or
    ``"precondition_failed"``; ``params`` records the parameter values that
    were actually used.
    """

    status: str
    trace: IsotopyTrace = None
    report: InvariantReport = None
    final: EmbeddedManifold = None
    final_frame: np.ndarray = None
    marking: F.SubsetMarking = None
    params: dict = field(default_factory=dict)
    error: Exception = None
    passes: list = field(default_factory=list)

    @property
    def passed(self):
        return self.status == "compressed" and self.report is not None and self.report.overall

    def raise_for_status(self):
        if self.error is not None:
            raise self.error
        return self

    def double_points(self):
        """Double points of the final projection (curves in a plane or space)."""
        if self.final is None or self.final.dim != 1:
            return None
        p = project_to_Q(self.final)
        while p.split.n > 0:
            p = project_to_Q(p)
        return double_point_census(p).count

    @classmethod
    def from_error(cls, exc, params=None) -> "CompressionResult":
        """Failed run: ``not_converged`` for convergence and budget errors,
        ``precondition_failed`` otherwise."""
        converge = isinstance(exc, (NotConverged, BudgetExceeded))
        status = "not_converged" if converge else "precondition_failed"
        return cls(status, trace=getattr(exc, "trace", None), params=params or {}, error=exc)

    def manifest(self, config: CompressionConfig = None, extra=None):
        disp = self.trace.displacement() if self.trace is not None else np.zeros(0)
        out = {
            "format": MANIFEST_FORMAT,
            "status": self.status,
            "error": None if self.error is None else {
                "type": type(self.error).__name__, "message": str(self.error),
                "condition": getattr(self.error, "condition", None)},
            "params": _jsonable(self.params),
            "config": _jsonable(config.to_dict()) if config is not None else None,
            "displacement": {
                "max": float(disp.max()) if disp.size else 0.0,
                "mean": float(disp.mean()) if disp.size else 0.0,
                "total": float(disp.sum()) if disp.size else 0.0,
            },
            "snapshots": len(self.trace) if self.trace is not None else 0,
            "final_time": self.trace.times[-1] if self.trace is not None else 0.0,
            "double_points": self.double_points() if self.status == "compressed" else None,
            "report": self.report.to_dict() if self.report is not None else None,
        }
        if extra:
            out.update(extra)
        return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# -- shared preparation ------------------------------------------------

@dataclass
class _Prepared:
    m: EmbeddedManifold
    T: object
    alpha: F.NormalFrame
    epsilon: float
    mu: float
    smoothing: float
    route: str
    reach: float
    immersed: bool
    grounding_rounds: int


def _is_perpendicular(frame, T, tol):
    return bool(np.all(np.abs(T.angle_to(frame.field(0)) - math.pi / 2) <= tol))


def _has_relative_boundary(m):
    if not m.boundary_flags.any():
        return False
    return all(m.boundary_flags[m.components == c].any() for c in np.unique(m.components))


def _prepare(m, alpha, cfg, allow_immersed=False):
    """Check hypotheses, make the field perpendicular and grounded, pick mu."""
    T = estimate_tangent_frame(m)
    if m.codim_q >= 1:
        route = "codim"
    elif _has_relative_boundary(m):
        route = "relative_boundary"
    elif (_is_perpendicular(alpha, T, cfg.perpendicular_tol)
          and F.measure_grounding(alpha, m.split).epsilon > 0.0):
        route = "grounded_perpendicular"
    else:
        raise PreconditionFailed(
            f"horizontal codimension q - m = {m.codim_q} needs either relative boundary "
            "on every component or a perpendicular grounded field", condition="codim")
    locality = cfg.locality if cfg.locality is not None else m.default_locality()
    try:
        reach = discrete_reach(m, locality)
        immersed = False
    except SelfIntersection as exc:
        if m.codim_q < 1:
            raise PreconditionFailed(
                f"input is immersed, not embedded ({exc}); a closed curve with a normal "
                "field in codimension zero cannot be compressed, since its projection "
                "would be an immersion of a closed manifold into a space of equal "
                "dimension", condition="immersion") from exc
        if not allow_immersed:
            raise PreconditionFailed(f"input is immersed, not embedded ({exc})",
                                     condition="embedding") from exc
        reach = local_reach(m, locality)
        immersed = True
    a = F.perpendicularize(m, alpha, T)
    eps = F.measure_grounding(a, m.split).epsilon
    rounds = 0
    if route == "relative_boundary" and m.codim_q < 1:
        # shrink-and-turn needs no grounding; mu is informational only
        mu = cfg.mu if cfg.mu is not None else eps / 4.0
        return _Prepared(m, T, a, eps, mu, mu / 2.0, route, reach, immersed, rounds)
    if eps < cfg.min_grounding and (cfg.mu is None or eps <= cfg.mu):
        if m.codim_q < 1:
            raise NotGrounded(f"field is only {eps:.3g}-grounded and cannot be perturbed "
                              "in codimension zero")
        a, rounds = F.ground_by_perturbation(
            m, a, T=T, split=m.split, min_epsilon=cfg.min_grounding, rng_seed=cfg.rng_seed,
            perturb_angle=cfg.perturb_angle, max_rounds=cfg.max_perturb_rounds)
        eps = F.measure_grounding(a, m.split).epsilon
    mu = cfg.mu if cfg.mu is not None else eps / 4.0
    if not 0.0 < mu < eps:
        raise NotGrounded(f"mu = {mu:.4g} must lie strictly between 0 and the grounding "
                          f"angle {eps:.4g}")
    smoothing = cfg.smoothing if cfg.smoothing is not None else mu / 2.0
    return _Prepared(m, T, a, eps, mu, smoothing, route, reach, immersed, rounds)


def _height_span(m):
    z = m.positions[:, m.split.vertical_index]
    return float(z.max() - z.min())


def _default_t_max(m, eps, mu, nu):
    return 10.0 * max(_height_span(m), nu, m.max_edge) / math.sin(eps - mu)


def _step(cfg, nu, m):
    return cfg.h if cfg.h is not None else 0.2 * min(nu, m.max_edge)


def _fixed(cfg, m):
    if cfg.relative is None:
        return None
    mask = np.asarray(cfg.relative, bool)
    if mask.shape != (m.n_samples,):
        raise ValueError("relative mask must have one entry per sample")
    return mask


def _result(trace, prep, cfg, params, marking=None, budget=None):
    trace.meta.update({
        "epsilon_angle": prep.epsilon, "mu": prep.mu, "smoothing": prep.smoothing,
        "verticality_tol": cfg.verticality_tol, "immersion_tol": cfg.immersion_tol,
    })
    if budget is not None:
        trace.meta["epsilon_budget"] = budget
    fixed = _fixed(cfg, prep.m)
    if fixed is not None:
        trace.meta["fixed"] = fixed.tolist()
    report = verify_trace(trace)
    return CompressionResult("compressed", trace, report, trace.final, trace.frames[-1],
                             marking, params)


def _failure(exc, params=None):
    return CompressionResult.from_error(exc, params)


def _trivial(m, alpha, cfg, prep=None):
    """Input already compressible: a single-snapshot trace."""
    tr = IsotopyTrace(m, "modified", config={"verticality_tol": cfg.verticality_tol})
    tr.record(0.0, m.positions, alpha.field(0))
    tr.converged = True
    tr.meta.update({"verticality_tol": cfg.verticality_tol, "immersion_tol": cfg.immersion_tol})
    if prep is not None:
        tr.meta.update({"epsilon_angle": prep.epsilon, "mu": prep.mu, "smoothing": prep.smoothing})
    if cfg.epsilon_budget is not None:
        tr.meta["epsilon_budget"] = cfg.epsilon_budget
    report = verify_trace(tr)
    return CompressionResult("compressed", tr, report, m, alpha.field(0), None, {"trivial": True})


def _already_vertical(alpha, split, tol):
    v = alpha.field(0)
    c = np.clip(v @ split.u, -1.0, 1.0)
    return bool(np.all(np.arctan2(np.linalg.norm(v - c[:, None] * split.u, axis=1), c) <= tol))


# -- global -------------------------------------------------------------

def compress_global(m: EmbeddedManifold, alpha: F.NormalFrame,
                    cfg: CompressionConfig = CompressionConfig()) -> CompressionResult:
    """Straighten the field by the modified global flow.

    Pipeline: perpendicularize, ground, upwards-rotate, extend over a tube,
    integrate the modified flow, verify.
    """
    try:
        if _already_vertical(alpha, m.split, cfg.verticality_tol):
            return _trivial(m, alpha, cfg)
        prep = _prepare(m, alpha, cfg)
        if prep.route == "relative_boundary" and m.codim_q < 1:
            return _compress_relative_arc(prep, cfg)
        nu = cfg.nu if cfg.nu is not None else min(0.5 * prep.reach, 0.1 * m.diameter)
        if nu > prep.reach * (1 + 1e-12):
            raise PreconditionFailed(f"tube radius {nu:.4g} exceeds the reach {prep.reach:.4g}",
                                     condition="reach")
        beta = F.upwards_rotate(prep.alpha, prep.mu, prep.smoothing, split=m.split)
        tube = TubularNeighbourhood(m, nu, cfg.locality)
        gamma = F.globalize(m, beta, tube)
        h = _step(cfg, nu, m)
        t_max = cfg.t_max if cfg.t_max is not None else _default_t_max(m, prep.epsilon, prep.mu, nu)
        fcfg = FlowConfig(h, t_max, "modified", verticality_tol=cfg.verticality_tol,
                          record_every=cfg.record_every)
        params = {"route": prep.route, "epsilon_angle": prep.epsilon, "mu": prep.mu,
                  "smoothing": prep.smoothing, "nu": nu, "h": h, "t_max": t_max,
                  "reach": prep.reach, "grounding_rounds": prep.grounding_rounds}
        trace = integrate(m, beta.field(0), gamma, fcfg, fixed=_fixed(cfg, m))
    except (PreconditionError, NotConverged) as exc:
        return _failure(exc)
    return _result(trace, prep, cfg, params, budget=cfg.epsilon_budget)


def global_flow_trace(m: EmbeddedManifold, alpha: F.NormalFrame,
                      cfg: CompressionConfig = CompressionConfig()) -> IsotopyTrace:
    """Unmodified global flow of the same pipeline, for rise-rate checks."""
    prep = _prepare(m, alpha, cfg)
    nu = cfg.nu if cfg.nu is not None else min(0.5 * prep.reach, 0.1 * m.diameter)
    beta = F.upwards_rotate(prep.alpha, prep.mu, prep.smoothing, split=m.split)
    gamma = F.globalize(m, beta, TubularNeighbourhood(m, nu, cfg.locality))
    h = _step(cfg, nu, m)
    t_max = cfg.t_max if cfg.t_max is not None else _default_t_max(m, prep.epsilon, prep.mu, nu)
    trace = integrate(m, beta.field(0), gamma,
                      FlowConfig(h, t_max, "global", verticality_tol=cfg.verticality_tol,
                                 record_every=cfg.record_every))
    trace.meta.update({"epsilon_angle": prep.epsilon, "mu": prep.mu, "smoothing": prep.smoothing,
                       "verticality_tol": cfg.verticality_tol})
    return trace


# -- relative boundary, codimension zero ---------------------------------

def _compress_relative_arc(prep: _Prepared, cfg: CompressionConfig) -> CompressionResult:
    """Arc in the plane with relative boundary: shrink toward a spine point,
    then turn rigidly until the field points up.

    Shrinking rescales ever smaller sub-arcs around the midpoint of the
    middle edge, which converge to that edge's line, so every stage is an
    embedding; the field is the (signed) unit normal throughout.
    """
    m = prep.m
    if m.dim != 1 or m.split.dim != 2 or len(np.unique(m.components)) != 1 or m.closed:
        raise NotImplementedError("relative-boundary compression in codimension zero is "
                                  "implemented for single open arcs in the plane only")
    pos = m.positions
    s = m.arc_length
    k = m.n_samples // 2 - 1 if m.n_samples > 2 else 0
    sc = 0.5 * (s[k] + s[k + 1])
    pc = 0.5 * (pos[k] + pos[k + 1])
    ec = (pos[k + 1] - pos[k]) / np.linalg.norm(pos[k + 1] - pos[k])
    J = np.array([[0.0, -1.0], [1.0, 0.0]])
    sigma = 1.0 if (J @ ec) @ prep.alpha.field(0)[k] >= 0 else -1.0

    def shrunk(lam):
        if lam >= 1.0:
            return pc + (s - sc)[:, None] * ec
        r = sc + (1.0 - lam) * (s - sc)
        sub = np.column_stack([np.interp(r, s, pos[:, i]) for i in range(2)])
        return pc + (sub - pc) / (1.0 - lam)

    def normals(x):
        T = estimate_tangent_frame(m.with_positions(x))
        return sigma * (T.vectors[:, 0, :] @ J.T)

    u = m.split.u
    n_end = sigma * (J @ ec)
    phi = math.atan2(n_end[0] * u[1] - n_end[1] * u[0], n_end @ u)
    trace = IsotopyTrace(m, "relative_arc", config={"steps": cfg.relative_steps})
    K = cfg.relative_steps
    for i in range(K + 1):
        x = shrunk(ramps.smooth_step(i / K))
        trace.record(i / K, x, normals(x))
    base = trace.positions[-1]
    for i in range(1, K + 1):
        a = phi * ramps.smooth_step(i / K)
        R = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        x = pc + (base - pc) @ R.T
        f = normals(x)
        if i == K:
            f = np.broadcast_to(u, f.shape).copy()
        trace.record(1.0 + i / K, x, f)
    trace.converged = True
    params = {"route": prep.route, "epsilon_angle": prep.epsilon, "mu": prep.mu,
              "smoothing": prep.smoothing, "spine_edge": int(k)}
    return _result(trace, prep, cfg, params, budget=cfg.epsilon_budget)


# -- local ----------------------------------------------------------------

def compute_omega(m: EmbeddedManifold, marking: F.SubsetMarking, nu, locality=None):
    """Phase-out time from the vertical separation of D - U' to other sheets.

    Another sheet lies over (nearly) the same Q point when its horizontal
    distance to a D sample is below ``nu`` while being intrinsically more
    than ``max(locality, 4 nu)`` away (so the sloping continuation of the
    same sheet is not mistaken for another one); omega is a third of the
    smallest vertical gap.
    Without other sheets, omega is the height span of M (inert phase-out).
    """
    lam = m.default_locality() if locality is None else locality
    span = max(_height_span(m), nu, m.max_edge)
    core = np.flatnonzero(marking["D"] & ~marking["U_prime"])
    if not len(core):
        return span
    k = m.split.vertical_index
    horiz = np.delete(m.positions, k, axis=1)
    z = m.positions[:, k]
    dist = m.intrinsic_distance(core, limit=max(lam, 4.0 * nu))
    gaps = []
    for row, i in enumerate(core):
        far = ~np.isfinite(dist[row])
        near_q = np.linalg.norm(horiz - horiz[i], axis=1) < nu
        sel = far & near_q
        if sel.any():
            gaps.append(float(np.abs(z[sel] - z[i]).min()))
    if not gaps or min(gaps) <= 0.0:
        return span
    return min(gaps) / 3.0


def _local_attempt(prep, cfg, nu, delta, up_r, u_r, budget, companions=None):
    m = prep.m
    T = prep.T
    split = m.split
    v_radius = cfg.v_fraction * delta
    marking = F.horizontal_set(m, T, cfg.horizontal_tol, split)
    marking = F.mark_neighbourhoods(m, marking, u_prime_radius=up_r, u_radius=u_r,
                                    v_radius=v_radius)
    gp = F.perturb_general_position(
        m, prep.alpha, marking, delta, cfg.rng_seed, T=T, split=split,
        perturb_angle=cfg.perturb_angle, max_rounds=cfg.max_perturb_rounds, v_radius=v_radius,
        u_prime_radius=up_r, u_radius=u_r, downset_tol=cfg.downset_tol)
    marking = gp.marking
    psi = F.upmost_field(m, T, split)
    collar = cfg.collar if cfg.collar is not None else v_radius
    loc = F.localise(m, gp.frame, marking, psi, collar)
    beta = F.upwards_rotate(loc, prep.mu, prep.smoothing, split=split)
    tube = TubularNeighbourhood(m, nu, cfg.locality, immersed=prep.immersed)
    gamma = F.globalize(m, beta, tube)
    omega = cfg.omega if cfg.omega is not None else compute_omega(m, marking, nu, tube.locality)
    h = _step(cfg, nu, m)
    t_max = cfg.t_max if cfg.t_max is not None else _default_t_max(m, prep.epsilon, prep.mu, nu)
    fixed = _fixed(cfg, m)
    phased = FlowConfig(h, max(2.0 * omega, h), "phased", omega=omega,
                        verticality_tol=cfg.verticality_tol, record_every=cfg.record_every)
    trace = integrate(m, beta.field(0), gamma, phased, fixed=fixed, companions=companions,
                      raise_on_stall=False)
    residual = None
    if not trace.converged:
        clock = ramps.phase_out_clock(trace.times[-1], omega)
        rest = FlowConfig(h, t_max, "modified", verticality_tol=cfg.verticality_tol,
                          record_every=cfg.record_every)
        second = integrate(trace.final, trace.frames[-1], gamma, rest, fixed=fixed, t0=clock,
                           companions=trace.companions)
        residual = float(np.linalg.norm(second.positions[-1] - second.positions[0], axis=1).max())
        trace = trace.concat(second)
    params = {"route": prep.route, "epsilon_angle": prep.epsilon, "mu": prep.mu,
              "smoothing": prep.smoothing, "nu": nu, "delta": delta, "u_prime_radius": up_r,
              "u_radius": u_r, "v_radius": v_radius, "collar": collar, "omega": omega, "h": h,
              "t_max": t_max, "reach": prep.reach, "perturb_rounds": gp.rounds,
              "grounding_rounds": prep.grounding_rounds, "residual_displacement": residual,
              "immersed": prep.immersed}
    return trace, marking, params


def local_defaults(m: EmbeddedManifold, budget, reach, cfg: CompressionConfig):
    """Starting (nu, delta, U', U) for the local pipeline."""
    delta = cfg.delta if cfg.delta is not None else max(5.0 * m.max_edge, 0.5 * budget)
    nu = cfg.nu if cfg.nu is not None else min(0.5 * reach, 0.25 * budget, 0.1 * m.diameter)
    up_r = cfg.u_prime_radius if cfg.u_prime_radius is not None else 2.0 * m.max_edge
    u_r = cfg.u_radius if cfg.u_radius is not None else 4.0 * m.max_edge
    return nu, delta, up_r, u_r


def compress_local(m: EmbeddedManifold, alpha: F.NormalFrame,
                   cfg: CompressionConfig = CompressionConfig(), *, _companions=None,
                   _allow_immersed=False) -> CompressionResult:
    """Straighten the field while moving every point less than the budget.

    The field is localised near the downset, rotated up, extended over a
    thin tube, and flowed by the phased modified flow followed by a
    residual modified flow.  When the measured displacement exceeds
    ``cfg.epsilon_budget`` the tube radius, delta and the U neighbourhoods
    are halved, up to ``cfg.max_refinements`` times.

    Raises
    ------
    BudgetExceeded
        If the budget is still exceeded after the last refinement.
    """
    budget = cfg.epsilon_budget
    if budget is None or not budget > 0:
        raise ValueError("local compression needs a positive epsilon_budget")
    try:
        if _already_vertical(alpha, m.split, cfg.verticality_tol) and _companions is None:
            return _trivial(m, alpha, cfg)
        prep = _prepare(m, alpha, cfg, allow_immersed=_allow_immersed)
        if prep.route == "relative_boundary" and m.codim_q < 1:
            return _compress_relative_arc(prep, cfg)
        nu, delta, up_r, u_r = local_defaults(m, budget, prep.reach, cfg)
        if nu > prep.reach * (1 + 1e-12):
            raise PreconditionFailed(f"tube radius {nu:.4g} exceeds the reach {prep.reach:.4g}",
                                     condition="reach")
        history = []
        for level in range(cfg.max_refinements + 1):
            trace, marking, params = _local_attempt(prep, cfg, nu, delta, up_r, u_r, budget,
                                                    _companions)
            disp = float(trace.displacement().max())
            history.append({"nu": nu, "delta": delta, "displacement": disp})
            if disp < budget:
                params["refinements"] = level
                params["history"] = history
                res = _result(trace, prep, cfg, params, marking, budget)
                return res
            if level < cfg.max_refinements:
                nu, delta, up_r, u_r = nu / 2, delta / 2, up_r / 2, u_r / 2
    except (PreconditionError, NotConverged) as exc:
        return _failure(exc)
    limiting = "sample density" if nu < 2.0 * m.max_edge else "refinement cap"
    raise BudgetExceeded(f"displacement {disp:.4g} >= budget {budget:.4g} after "
                         f"{cfg.max_refinements} refinements (limited by {limiting})",
                         displacement=disp, limiting=limiting)


# -- multi ----------------------------------------------------------------

def _axis_angles(fields_, q):
    n = fields_.shape[1]
    out = np.empty(n)
    for i in range(n):
        c = np.clip(fields_[:, i, q + i], -1.0, 1.0)
        out[i] = float(np.arccos(c).max())
    return out


def compress_multi(m: EmbeddedManifold, frame: F.NormalFrame,
                   cfg: CompressionConfig = CompressionConfig()) -> CompressionResult:
    """Straighten ``n`` fields onto the ``n`` vertical axes one at a time.

    Pass ``i`` straightens field ``i`` to axis ``i`` by local compression of
    the object obtained by forgetting the axes already straightened (an
    immersion in general, handled with locality-restricted tubes).  The
    result is lifted back by keeping the forgotten coordinates, which turns
    the regular homotopy below into an isotopy above.  The remaining fields
    are pushed through each flow as offset points and then orthonormalized
    against the straightened axes.
    """
    split = m.split
    n, q = split.n, split.q
    if frame.k != n:
        raise ValueError(f"need {n} fields, got {frame.k}")
    Fv = np.array(frame.vectors)
    if np.all(_axis_angles(Fv, q) <= cfg.verticality_tol):
        res = _trivial(m.with_split(split.with_axis(0)), F.NormalFrame(Fv[:, 0]), cfg)
        res.params["axis_angles"] = _axis_angles(Fv, q).tolist()
        res.final_frame = Fv
        return res
    if m.codim_q - (n - 1) < 1:
        return _failure(PreconditionFailed(
            f"multi-compression needs q - m >= 1 (q = {q}, m = {m.dim})", condition="codim"))
    X = np.array(m.positions)
    lifted = None
    passes = []
    segments = []
    for i in range(n):
        keep = list(range(q)) + [q + j for j in range(i, n)]
        sub = EmbeddedManifold(X[:, keep], AmbientSplit(q, n - i, 0), shape=m.shape,
                               params=m.params, closed=m.closed, components=m.components,
                               boundary_flags=m.boundary_flags)
        if i == 0:
            # full ambient space: hand over the field untouched
            field_i = F.NormalFrame(Fv[:, :1])
        else:
            fi = Fv[:, i][:, keep]
            field_i = F.NormalFrame.from_vectors(fi / np.linalg.norm(fi, axis=1, keepdims=True))
        others = None
        if i + 1 < n:
            eta = 1e-3 * sub.min_edge
            others = sub.positions[:, None, :] + eta * Fv[:, i + 1:][:, :, keep]
        res = compress_local(sub, field_i, cfg,
                             _companions=others, _allow_immersed=i > 0)
        res.params["axis"] = i
        passes.append(res)
        if res.status != "compressed":
            res.passes = passes
            return res
        tr = res.trace
        lift_tr = _lift_trace(tr, X, keep, split.with_axis(i), m)
        start = 0 if lifted is None else len(lifted) - 1
        lifted = lift_tr if lifted is None else lifted.concat(lift_tr)
        segments.append({"axis": i, "start": start, "stop": len(lifted) - 1, "keep": keep,
                         "mode": tr.mode, "meta": dict(tr.meta),
                         "initial_frame": tr.frames[0].tolist()})
        X = lift_tr.positions[-1]
        Fv[:, i] = 0.0
        Fv[:, i][:, keep] = tr.frames[-1]
        if i + 1 < n and tr.companions is not None:
            y = tr.positions[-1]
            for j in range(i + 1, n):
                d = tr.companions[:, j - i - 1] - y
                full = np.zeros_like(Fv[:, j])
                full[:, keep] = d
                full[:, q + i] = 0.0
                Fv[:, j] = full / np.linalg.norm(full, axis=1, keepdims=True)
    angles = _axis_angles(Fv, q)
    final = m.with_positions(X)
    params = {"passes": [p.params for p in passes], "axis_angles": angles.tolist()}
    lifted.meta["axis_angles"] = angles.tolist()
    lifted.meta["passes"] = segments
    report = verify_run(lifted)
    out = CompressionResult("compressed", lifted, report, final, Fv, None, params, passes=passes)
    return out


def _lift_trace(tr, X, keep, split, m):
    out = IsotopyTrace(m.with_split(split), tr.mode, config=dict(tr.config), meta=dict(tr.meta),
                       converged=tr.converged)
    for t, x, f in zip(tr.times, tr.positions, tr.frames):
        full = np.array(X)
        full[:, keep] = x
        ff = np.zeros_like(full)
        ff[:, keep] = f
        out.record(t, full, ff)
    return out


__all__ = ["CompressionConfig", "CompressionResult", "compress_global", "compress_local",
           "compress_multi", "compute_omega", "global_flow_trace", "local_defaults"]
