"""Flow integration: global, modified and phased-out flows of an ambient field.

All three flows are integrated with fixed-step RK4 on every sample at once.

* ``global``: ``x' = gamma(x)``; the carried field is ``gamma(x)``.
* ``modified``: ``x' = gamma(x + t u) - u``; the carried field is
  ``gamma(x + t u)``, so points sit still wherever the translated field is
  vertical.
* ``phased``: the modified flow slowed by the time bump ``rho``.  It is
  integrated as ``x' = rho(t) (gamma(x + T(t) u) - u)`` with the clock
  ``T(t) = int_0^t rho``, which is exactly the modified flow run on the
  reparametrized clock and therefore keeps the carried field normal.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ramps
from .errors import NotConverged, SchemaError
from .geometry import AmbientSplit, EmbeddedManifold

TRACE_FORMAT = "straighten-trace/1"
MODES = ("global", "modified", "phased")


@dataclass(frozen=True)
class FlowConfig:
    """Integration settings.

    Parameters
    ----------
    h : float
        RK4 step.
    t_max : float
        Time horizon.
    mode : {"global", "modified", "phased"}
    omega : float, optional
        Phase-out time; the flow is fully stopped from ``2 omega`` on.
    verticality_tol : float
        Stop once every carried vector is within this angle of ``u``.
    record_every : int
        Keep one snapshot every this many steps (plus the last).
    """

    h: float
    t_max: float
    mode: str = "modified"
    omega: float = None
    verticality_tol: float = 1e-3
    record_every: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown flow mode {self.mode!r}")
        if not self.h > 0:
            raise ValueError("step h must be positive")
        if self.t_max < self.h:
            raise ValueError("t_max must be at least one step")
        if self.mode == "phased" and not (self.omega and self.omega > 0):
            raise ValueError("phased mode needs omega > 0")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass(eq=False)
class IsotopyTrace:
    """Recorded isotopy: snapshot times, positions and carried field.

    ``template`` fixes the topology (ordering, grid shape, closedness) shared
    by every snapshot.  ``meta`` holds run constants needed by verification
    (measured grounding angle, mu, smoothing, ...).
    """

    template: EmbeddedManifold
    mode: str
    times: list = field(default_factory=list)
    positions: list = field(default_factory=list)
    frames: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    converged: bool = False
    companions: np.ndarray = None

    def record(self, t, x, f):
        self.times.append(float(t))
        self.positions.append(np.array(x, dtype=float))
        self.frames.append(np.array(f, dtype=float))

    def __len__(self):
        return len(self.times)

    @property
    def split(self) -> AmbientSplit:
        return self.template.split

    def manifold(self, i=-1) -> EmbeddedManifold:
        return self.template.with_positions(self.positions[i])

    @property
    def final(self) -> EmbeddedManifold:
        return self.manifold(-1)

    def displacement(self):
        """Per-sample distance between final and initial positions."""
        return np.linalg.norm(self.positions[-1] - self.positions[0], axis=1)

    def concat(self, other: "IsotopyTrace") -> "IsotopyTrace":
        """Append ``other`` (which must start where this trace ends)."""
        out = IsotopyTrace(self.template, self.mode, list(self.times), list(self.positions),
                           list(self.frames), dict(self.config), dict(self.meta),
                           other.converged, other.companions)
        t_end = self.times[-1]
        for t, x, f in zip(other.times[1:], other.positions[1:], other.frames[1:]):
            out.record(t_end + t - other.times[0], x, f)
        out.meta.setdefault("stages", []).append(
            {"mode": other.mode, "start_time": t_end, "config": other.config})
        return out

    def restrict(self, start, stop, keep, split, mode=None, meta=None) -> "IsotopyTrace":
        """Snapshots ``start..stop`` (inclusive) on the coordinates ``keep``."""
        t = self.template
        template = EmbeddedManifold(t.positions[:, keep], split, shape=t.shape, params=t.params,
                                    closed=t.closed, components=t.components,
                                    boundary_flags=t.boundary_flags)
        out = IsotopyTrace(template, mode or self.mode, config=dict(self.config),
                           meta=dict(meta if meta is not None else self.meta),
                           converged=self.converged)
        for i in range(start, stop + 1):
            out.record(self.times[i], self.positions[i][:, keep], self.frames[i][:, keep])
        return out

    # -- serialization --------------------------------------------------

    def header(self):
        t = self.template
        return {
            "format": TRACE_FORMAT,
            "mode": self.mode,
            "split": t.split.to_dict(),
            "dim": t.dim,
            "shape": list(t.shape) if t.shape else None,
            "closed": bool(t.closed),
            "components": t.components.tolist(),
            "boundary": t.boundary_flags.tolist(),
            "params": t.params.tolist(),
            "config": self.config,
            "meta": self.meta,
            "converged": bool(self.converged),
        }

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            fh.write(json.dumps(self.header(), sort_keys=True) + "\n")
            for t, x, f in zip(self.times, self.positions, self.frames):
                fh.write(json.dumps({"t": t, "positions": x.tolist(), "frame": f.tolist()}) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "IsotopyTrace":
        """Load a trace; any structural problem raises :class:`SchemaError`."""
        try:
            with open(path) as fh:
                lines = fh.read().splitlines()
        except OSError as exc:
            raise SchemaError(f"cannot read trace {path}: {exc}") from exc
        if not lines:
            raise SchemaError(f"{path}: empty trace file")
        try:
            head = json.loads(lines[0])
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}:1: header is not JSON ({exc.msg})") from exc
        if not isinstance(head, dict) or head.get("format") != TRACE_FORMAT:
            raise SchemaError(f"{path}:1: expected format {TRACE_FORMAT!r}")
        try:
            s = head["split"]
            split = AmbientSplit(s["q"], s["n"], s["vertical_axis"])
            params = np.array(head["params"], dtype=float)
            trace = None
            for lineno, line in enumerate(lines[1:], start=2):
                try:
                    rec = json.loads(line)
                    x = np.array(rec["positions"], dtype=float)
                    f = np.array(rec["frame"], dtype=float)
                    t = float(rec["t"])
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise SchemaError(f"{path}:{lineno}: malformed snapshot ({exc})") from exc
                if trace is None:
                    template = EmbeddedManifold(
                        positions=x, split=split,
                        shape=tuple(head["shape"]) if head["shape"] else None,
                        params=params, closed=head["closed"],
                        components=np.array(head["components"]),
                        boundary_flags=np.array(head["boundary"], dtype=bool))
                    trace = cls(template, head["mode"], config=head["config"],
                                meta=head["meta"], converged=head["converged"])
                if x.shape != trace.template.positions.shape or f.shape != x.shape:
                    raise SchemaError(f"{path}:{lineno}: snapshot shape {x.shape} does not match")
                if trace.times and t <= trace.times[-1]:
                    raise SchemaError(f"{path}:{lineno}: times must increase")
                trace.record(t, x, f)
        except SchemaError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{path}: invalid trace ({exc})") from exc
        if trace is None:
            raise SchemaError(f"{path}: trace has no snapshots")
        return trace


# -- single steps -------------------------------------------------------

def _rk4(f, x, t, h):
    k1 = f(x, t)
    k2 = f(x + 0.5 * h * k1, t + 0.5 * h)
    k3 = f(x + 0.5 * h * k2, t + 0.5 * h)
    k4 = f(x + h * k3, t + h)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step_global(x, field, h, anchors=None):
    """One RK4 step of the autonomous flow ``x' = gamma(x)``."""
    return _rk4(lambda y, _t: field(y, anchors), np.asarray(x, dtype=float), 0.0, h)


def modified_velocity(field, x, t, omega=None, anchors=None, t0=0.0):
    """Velocity of the (optionally phased) modified flow at time ``t``."""
    u = field.u
    if omega is None:
        return field(x + (t0 + t) * u, anchors) - u
    rho = ramps.phase_out(t, omega)
    if rho == 0.0:
        return np.zeros_like(x)
    clock = t0 + ramps.phase_out_clock(t, omega)
    return rho * (field(x + clock * u, anchors) - u)


def step_modified(x, t, field, h, rho_omega=None, anchors=None, t0=0.0):
    """One RK4 step of ``rho(t) (gamma(x + T u) - u)``.

    Without ``rho_omega`` this is the plain modified flow (``rho = 1``,
    ``T = t``).  Once ``t >= 2 omega`` the input is returned unchanged.
    """
    x = np.asarray(x, dtype=float)
    if rho_omega is not None and t >= 2.0 * rho_omega:
        return x
    return _rk4(lambda y, s: modified_velocity(field, y, s, rho_omega, anchors, t0), x, t, h)


# -- whole-manifold integration -----------------------------------------

def _vertical_error(frame, u):
    c = np.clip(frame @ u, -1.0, 1.0)
    return np.arctan2(np.linalg.norm(frame - c[:, None] * u, axis=1), c)


def integrate(m: EmbeddedManifold, frame, field, cfg: FlowConfig, *, fixed=None, t0=0.0,
              companions=None, raise_on_stall=True, meta=None) -> IsotopyTrace:
    """Flow every sample of ``m`` and record an :class:`IsotopyTrace`.

    Parameters
    ----------
    m : EmbeddedManifold
    frame : array (N, D) or None
        Carried field at t = 0 (recorded as given); later snapshots use the
        field re-evaluated from ``field``.
    field : AmbientField
    cfg : FlowConfig
    fixed : bool array, optional
        Samples held still (relative region).
    t0 : float
        Clock offset for modified/phased modes, continuing an earlier run.
    companions : array (N, k, D), optional
        Extra points pushed along by the same flow (each follows the velocity
        of its own position, anchored to its sample); their final positions
        are stored on ``trace.companions``.

    Raises
    ------
    NotConverged
        If ``t_max`` (or, in phased mode, the end of the bump) is reached
        with some carried vector farther than ``verticality_tol`` from ``u``.
    """
    u = field.u
    n = m.n_samples
    x = np.array(m.positions, dtype=float)
    anchors = np.arange(n) if getattr(field.tube, "immersed", False) else None
    comp = None if companions is None else np.array(companions, dtype=float)
    k = 0 if comp is None else comp.shape[1]
    free = np.ones(n, bool) if fixed is None else ~np.asarray(fixed, bool)
    mode = cfg.mode
    omega = cfg.omega if mode == "phased" else None
    all_anchors = None if anchors is None else np.concatenate([anchors] + [anchors] * k)

    def stack(y):
        return y if comp is None else np.concatenate([y, comp.transpose(1, 0, 2).reshape(-1, y.shape[1])])

    def unstack(z):
        if comp is None:
            return z, None
        return z[:n], z[n:].reshape(k, n, -1).transpose(1, 0, 2)

    mask = np.tile(free, k + 1)[:, None]

    def velocity(z, t):
        if mode == "global":
            v = field(z, all_anchors)
        else:
            v = modified_velocity(field, z, t, omega, all_anchors, t0)
        return np.where(mask, v, 0.0)

    def carried(y, t):
        if mode == "global":
            return field(y, anchors)
        clock = t0 + (ramps.phase_out_clock(t, omega) if omega else t)
        return field(y + clock * u, anchors)

    trace = IsotopyTrace(m, mode, config=cfg.to_dict(), meta=dict(meta or {}))
    trace.meta.setdefault("t0", t0)
    f0 = carried(x, 0.0) if frame is None else np.asarray(frame, dtype=float)
    trace.record(0.0, x, f0)
    t = 0.0
    step = 0
    cur = f0
    z = stack(x)
    while True:
        if np.all(_vertical_error(cur, u) <= cfg.verticality_tol):
            trace.converged = True
            break
        if t >= cfg.t_max - 1e-12 or (omega is not None and t >= 2.0 * omega):
            break
        z = _rk4(velocity, z, t, cfg.h)
        t = (step + 1) * cfg.h
        step += 1
        x, _ = unstack(z)
        cur = carried(x, t)
        if step % cfg.record_every == 0:
            trace.record(t, x, cur)
    if trace.times[-1] != t:
        trace.record(t, x, cur)
    trace.companions = unstack(z)[1]
    if not trace.converged and raise_on_stall:
        worst = float(np.max(_vertical_error(cur, u)))
        raise NotConverged(f"{mode} flow stopped at t={t:.4g} with carried field "
                           f"{worst:.3g} rad from vertical", trace=trace)
    return trace
