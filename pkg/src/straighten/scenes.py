"""Builtin scenes and the scene-file loader.

A scene bundles an :class:`EmbeddedManifold`, a :class:`NormalFrame` and
optional run overrides.  Scene files are YAML mappings (see the README for
the schema); every structural problem raises :class:`SchemaError` naming the
offending line or field.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import ramps
from .compress import CompressionConfig
from .errors import SchemaError
from .fields import NormalFrame
from .geometry import AmbientSplit, EmbeddedManifold, estimate_tangent_frame

SCENE_FORMAT = "straighten-scene/1"


@dataclass(eq=False)
class Scene:
    name: str
    manifold: EmbeddedManifold
    frame: NormalFrame
    overrides: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    relative: np.ndarray = None


# -- manifold generators ----------------------------------------------------

def line(n=100, length=2.0, slope=0.5, q=2, center=0.0):
    """Straight segment through the origin rising at ``slope`` radians in the
    plane of the first Q axis and the vertical."""
    split = AmbientSplit(q, 1)
    tau = np.linspace(-length / 2, length / 2, n) + center
    d = np.zeros(split.dim)
    d[0] = math.cos(slope)
    d[split.vertical_index] = math.sin(slope)
    return EmbeddedManifold(tau[:, None] * d, split, params=tau[:, None])


def circle(n=256, radius=1.0, q=2, vertical=1):
    """Round circle in the first two Q coordinates, closed."""
    split = AmbientSplit(q, vertical)
    th = 2 * np.pi * np.arange(n) / n
    pos = np.zeros((n, split.dim))
    pos[:, 0] = radius * np.cos(th)
    pos[:, 1] = radius * np.sin(th)
    return EmbeddedManifold(pos, split, params=th[:, None], closed=True)


def twist_line(n=400, length=4.0, slope=0.6):
    """The twist scene's line: a segment in R^3 (q = 2) at the given slope."""
    return line(n, length, slope, q=2)


def helix(n=400, radius=1.0, pitch=0.5, turns=2.0):
    """Helix around the vertical axis in R^3."""
    split = AmbientSplit(2, 1)
    th = np.linspace(0.0, 2 * np.pi * turns, n)
    pos = np.column_stack([radius * np.cos(th), radius * np.sin(th), pitch * th / (2 * np.pi)])
    return EmbeddedManifold(pos, split, params=th[:, None])


def grid_plane(nu=21, nv=21, size=2.0, slope=0.3, q=3):
    """Flat square tilted by ``slope`` toward the vertical, in ``R^(q+1)``."""
    split = AmbientSplit(q, 1)
    a = np.linspace(-size / 2, size / 2, nu)
    b = np.linspace(-size / 2, size / 2, nv)
    A, B = np.meshgrid(a, b, indexing="ij")
    pos = np.zeros((nu * nv, split.dim))
    pos[:, 0] = (A * math.cos(slope)).ravel()
    pos[:, 1] = B.ravel()
    pos[:, split.vertical_index] = (A * math.sin(slope)).ravel()
    return EmbeddedManifold(pos, split, shape=(nu, nv), params=np.column_stack([A.ravel(), B.ravel()]))


def figure_eight(n=200, scale=1.0):
    """Immersed figure-eight in the plane (q = 1): ``(sin 2t / 2, sin t)``."""
    split = AmbientSplit(1, 1)
    t = 2 * np.pi * np.arange(n) / n
    pos = scale * np.column_stack([0.5 * np.sin(2 * t), np.sin(t)])
    return EmbeddedManifold(pos, split, params=t[:, None], closed=True)


def whitney(n=21, size=1.0):
    """Plane in R^4 over a Whitney umbrella: ``(a, ab, b^2, b)``.

    Its vertical projection ``(a, ab, b^2)`` is singular only at the origin,
    so the horizontal set is the single grid point ``a = b = 0`` (``n`` odd).
    """
    split = AmbientSplit(3, 1)
    a = np.linspace(-size, size, n)
    A, B = np.meshgrid(a, a, indexing="ij")
    A, B = A.ravel(), B.ravel()
    pos = np.column_stack([A, A * B, B * B, B])
    return EmbeddedManifold(pos, split, shape=(n, n), params=np.column_stack([A, B]))


def two_in_four(nu=41, nv=9, length=4.0, width=1.0, slope=0.6):
    """The twist line times an interval: a plane in R^4 (q = 3)."""
    split = AmbientSplit(3, 1)
    tau = np.linspace(-length / 2, length / 2, nu)
    w = np.linspace(-width / 2, width / 2, nv)
    T, W = np.meshgrid(tau, w, indexing="ij")
    pos = np.zeros((nu * nv, 4))
    pos[:, 0] = (T * math.cos(slope)).ravel()
    pos[:, 1] = W.ravel()
    pos[:, 3] = (T * math.sin(slope)).ravel()
    return EmbeddedManifold(pos, split, shape=(nu, nv), params=np.column_stack([T.ravel(), W.ravel()]))


def multi_circle(n=256, radius=1.0, lean=1.0):
    """Circle in R^2 x R^2 (q = 2, n = 2), leaning into both vertical axes.

    Samples ``(r cos t, r sin t, lean r sin t, lean r cos t)``.
    """
    t = 2 * np.pi * np.arange(n) / n
    pos = radius * np.column_stack([np.cos(t), np.sin(t), lean * np.sin(t), lean * np.cos(t)])
    return EmbeddedManifold(pos, AmbientSplit(2, 2), params=t[:, None], closed=True)


# -- field generators -------------------------------------------------------

def upmost(m: EmbeddedManifold):
    """Unit normal with the largest vertical component (psi)."""
    T = estimate_tangent_frame(m)
    u = np.broadcast_to(m.split.u, m.positions.shape)
    v = u - T.project(u)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def constant_up(m: EmbeddedManifold):
    return NormalFrame(np.broadcast_to(m.split.u, m.positions.shape).copy())


def slope_normal(m: EmbeddedManifold):
    return NormalFrame(upmost(m))


def _side_normal(m, psi, reference=None):
    T = estimate_tangent_frame(m)
    r = np.zeros(m.split.dim)
    r[m.split.q - 1 if reference is None else reference] = 1.0
    r = np.broadcast_to(r, m.positions.shape)
    w = r - T.project(r)
    w = w - np.einsum("nd,nd->n", w, psi)[:, None] * psi
    return w / np.linalg.norm(w, axis=1, keepdims=True)


def twist_angle(tau, turns=1.0, center=0.0, width=1.0):
    """Twist angle profile: rises smoothly by ``2 pi turns`` across the support."""
    return 2 * np.pi * turns * ramps.smooth_step((np.asarray(tau) - center) / width + 0.5)


def twist(m: EmbeddedManifold, turns=1.0, center=0.0, width=1.0, reference=None):
    """Perpendicular field turning ``turns`` times around the tangent.

    It equals the upmost normal outside ``[center - width/2, center + width/2]``
    (measured in the first parameter) and points downmost where the angle
    passes ``pi``.
    """
    psi = upmost(m)
    side = _side_normal(m, psi, reference)
    th = twist_angle(m.params[:, 0], turns, center, width)
    return NormalFrame(np.cos(th)[:, None] * psi + np.sin(th)[:, None] * side)


def twist_support(m: EmbeddedManifold, center=0.0, width=1.0):
    """Mask of samples inside the twist support."""
    tau = m.params[:, 0]
    return np.abs(tau - center) < width / 2


def figure_eight_field(m: EmbeddedManifold):
    """Grounded perpendicular field: the tangent turned clockwise."""
    T = estimate_tangent_frame(m).vectors[:, 0, :]
    return NormalFrame(np.column_stack([T[:, 1], -T[:, 0]]))


def _unit(v):
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _reject(v, b):
    return v - np.einsum("nd,nd->n", v, b)[:, None] * b


def multi_twist_fields(m: EmbeddedManifold):
    """Two normal fields on ``multi_circle`` that each twist once around it.

    The second field lives in the space without the first vertical axis: it
    turns once around the curve there, horizontal only near ``t = pi / 2``.
    The first turns once in the normal plane orthogonal to the second,
    horizontal only near ``t = pi``.  Both are grounded.
    """
    t = m.params[:, 0]
    n = m.n_samples
    T = estimate_tangent_frame(m).vectors[:, 0, :]
    keep = [0, 1, 3]
    t1 = _unit(T[:, keep])
    psi1 = _unit(_reject(np.tile(np.eye(3)[2], (n, 1)), t1))
    w1 = np.cross(t1, psi1)
    phi = t + np.pi / 2 - (np.pi / 2) * np.cos(t)
    g = np.zeros((n, 4))
    g[:, keep] = np.cos(phi)[:, None] * psi1 + np.sin(phi)[:, None] * w1
    psi = _unit(_reject(np.tile(np.eye(4)[2], (n, 1)), T))
    # the normal direction completing (T, psi, g) to an oriented basis
    stack = np.stack([T, psi, g], axis=1)
    b = _unit(np.stack([(-1) ** k * np.linalg.det(np.delete(stack, k, axis=2))
                        for k in range(4)], axis=1))
    f = np.cos(t)[:, None] * psi + np.sin(t)[:, None] * b
    return NormalFrame(np.stack([f, g], axis=1))


# -- builtin scenes ---------------------------------------------------------

def twist_scene(n=400, length=4.0, slope=0.6, support=1.0, turns=1.0):
    m = twist_line(n, length, slope)
    frame = twist(m, turns, 0.0, support)
    inside = twist_support(m, 0.0, support)
    return Scene("twist", m, frame, {"epsilon_budget": 0.3 * support},
                 {"support_width": support, "support": inside.tolist()}, relative=None)


def builtin(name, **params) -> Scene:
    """Named builtin scene with default parameters."""
    if name == "twist":
        return twist_scene(**params)
    if name == "line":
        m = line(**params)
        return Scene("line", m, slope_normal(m))
    if name == "circle":
        m = circle(**params)
        return Scene("circle", m, slope_normal(m))
    if name == "helix":
        m = helix(**params)
        return Scene("helix", m, slope_normal(m))
    if name == "grid_plane":
        m = grid_plane(**params)
        return Scene("grid_plane", m, slope_normal(m))
    if name == "figure_eight":
        m = figure_eight(**params)
        return Scene("figure_eight", m, figure_eight_field(m))
    if name == "whitney":
        m = whitney(**params)
        return Scene("whitney", m, NormalFrame(_whitney_field(m)))
    if name == "two_in_four":
        m = two_in_four(**params)
        return Scene("two_in_four", m, twist(m, 1.0, 0.0, 1.0), {"epsilon_budget": 0.3})
    if name == "multi_circle":
        m = multi_circle(**params)
        return Scene("multi_circle", m, multi_twist_fields(m),
                     {"mode": "multi", "epsilon_budget": 1.0, "mu": 0.3})
    raise SchemaError(f"unknown builtin scene {name!r}")


def _whitney_field(m):
    T = estimate_tangent_frame(m)
    r = np.zeros((m.n_samples, 4))
    r[:, 2] = 1.0
    v = r - T.project(r)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


GENERATORS = {
    "line": line, "circle": circle, "twist_line": twist_line, "helix": helix,
    "grid_plane": grid_plane, "figure_eight": figure_eight, "whitney": whitney,
    "two_in_four": two_in_four, "multi_circle": multi_circle,
}

FIELDS = {
    "constant_up": lambda m, **kw: constant_up(m),
    "slope_normal": lambda m, **kw: slope_normal(m),
    "twist": lambda m, **kw: twist(m, **kw),
    "grounded_tangent_turn": lambda m, **kw: figure_eight_field(m),
    "multi_twist": multi_twist_fields,
}


# -- scene files ----------------------------------------------------------

CONFIG_KEYS = {f.name for f in dataclasses.fields(CompressionConfig)} - {"relative"} | {"mode"}

_TOP_KEYS = {"format", "name", "builtin", "generator", "params", "samples", "split", "closed",
             "shape", "boundary", "field", "fields", "relative", "config"}


class _LineLoader(yaml.SafeLoader):
    """YAML loader that remembers the line of every mapping key."""


def _construct_mapping(loader, node, deep=False):
    mapping = yaml.SafeLoader.construct_mapping(loader, node, deep=True)
    lines = {}
    for key_node, _ in node.value:
        lines[key_node.value] = key_node.start_mark.line + 1
    mapping["__lines__"] = lines
    return mapping


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def _strip(obj):
    if isinstance(obj, dict):
        return {k: _strip(v) for k, v in obj.items() if k != "__lines__"}
    if isinstance(obj, list):
        return [_strip(v) for v in obj]
    return obj


class _Where:
    def __init__(self, path, doc):
        self.path = path
        self.lines = doc.get("__lines__", {}) if isinstance(doc, dict) else {}

    def err(self, key, msg):
        line = self.lines.get(key)
        loc = f"{self.path}:{line}" if line else str(self.path)
        return SchemaError(f"{loc}: field '{key}': {msg}")


def load_scene(path) -> Scene:
    """Read a scene file.

    Raises
    ------
    SchemaError
        On unreadable files, YAML syntax errors (with line numbers) or
        schema violations (naming the field).
    """
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise SchemaError(f"cannot read scene {path}: {exc}") from exc
    return parse_scene(text, str(path))


def parse_scene(text, path="<scene>") -> Scene:
    try:
        doc = yaml.load(text, Loader=_LineLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark is not None else path
        raise SchemaError(f"{where}: YAML syntax error: {getattr(exc, 'problem', exc)}") from exc
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: a scene must be a mapping")
    w = _Where(path, doc)
    unknown = sorted(set(doc) - _TOP_KEYS - {"__lines__"})
    if unknown:
        raise w.err(unknown[0], "unknown field")
    fmt = doc.get("format", SCENE_FORMAT)
    if fmt != SCENE_FORMAT:
        raise w.err("format", f"expected {SCENE_FORMAT!r}, got {fmt!r}")
    raw_config = doc.get("config") or {}
    overrides = _strip(raw_config)
    if not isinstance(overrides, dict):
        raise w.err("config", "must be a mapping")
    cw = _Where(path, raw_config)
    for key, value in overrides.items():
        if key not in CONFIG_KEYS:
            raise cw.err(key, f"unknown config field; choose from {sorted(CONFIG_KEYS)}")
        if key == "mode":
            if value not in ("global", "local", "multi"):
                raise cw.err(key, f"unknown mode {value!r}")
        elif isinstance(value, bool) or not isinstance(value, (int, float)):
            raise cw.err(key, f"must be a number, got {value!r}")
    params = _strip(doc.get("params") or {})
    if not isinstance(params, dict):
        raise w.err("params", "must be a mapping")
    try:
        if "builtin" in doc:
            scene = builtin(doc["builtin"], **params)
        elif "generator" in doc:
            gen = GENERATORS.get(doc["generator"])
            if gen is None:
                raise w.err("generator", f"unknown generator {doc['generator']!r}; "
                            f"choose from {sorted(GENERATORS)}")
            m = gen(**params)
            scene = Scene(doc.get("name", doc["generator"]), m, None)
        elif "samples" in doc:
            scene = Scene(doc.get("name", "samples"), _explicit_manifold(doc, w), None)
        else:
            raise SchemaError(f"{path}: one of 'builtin', 'generator' or 'samples' is required")
    except TypeError as exc:
        raise w.err("params", str(exc)) from exc
    except ValueError as exc:
        key = "samples" if "samples" in doc else "params"
        raise w.err(key, str(exc)) from exc
    if "name" in doc:
        scene.name = str(doc["name"])
    if "field" in doc or "fields" in doc:
        scene.frame = _parse_field(doc, scene.manifold, w)
    if scene.frame is None:
        raise SchemaError(f"{path}: a 'field' or 'fields' entry is required for this scene")
    if "relative" in doc:
        scene.relative = _parse_relative(doc["relative"], scene, w)
    scene.overrides = {**scene.overrides, **overrides}
    return scene


def _explicit_manifold(doc, w):
    split = _strip(doc.get("split"))
    if not isinstance(split, dict) or "q" not in split:
        raise w.err("split", "explicit samples need a split mapping with at least 'q'")
    try:
        sp = AmbientSplit(int(split["q"]), int(split.get("n", 1)), int(split.get("vertical_axis", 0)))
    except (TypeError, ValueError) as exc:
        raise w.err("split", str(exc)) from exc
    try:
        pos = np.array(doc["samples"], dtype=float)
    except (TypeError, ValueError) as exc:
        raise w.err("samples", f"not a numeric array ({exc})") from exc
    shape = doc.get("shape")
    boundary = doc.get("boundary")
    flags = None
    if boundary is not None:
        flags = np.zeros(len(pos), bool)
        try:
            flags[np.asarray(boundary, dtype=int)] = True
        except (IndexError, TypeError, ValueError) as exc:
            raise w.err("boundary", f"must list sample indices ({exc})") from exc
    return EmbeddedManifold(pos, sp, shape=tuple(shape) if shape else None,
                            closed=bool(doc.get("closed", False)), boundary_flags=flags)


def _parse_field(doc, m, w):
    key = "field" if "field" in doc else "fields"
    spec = doc[key]
    if isinstance(spec, dict):
        spec = _strip(spec)
        gen = spec.pop("generator", None)
        if gen not in FIELDS:
            raise w.err(key, f"unknown field generator {gen!r}; choose from {sorted(FIELDS)}")
        try:
            return FIELDS[gen](m, **spec)
        except TypeError as exc:
            raise w.err(key, str(exc)) from exc
    try:
        v = np.array(spec, dtype=float)
        if v.ndim == 2:
            v = v[:, None, :]
        if v.ndim != 3 or v.shape[0] != m.n_samples or v.shape[2] != m.split.dim:
            raise ValueError(f"expected {m.n_samples} vectors of length {m.split.dim}, "
                             f"got shape {v.shape}")
        return NormalFrame.from_vectors(v)
    except (TypeError, ValueError) as exc:
        raise w.err(key, str(exc)) from exc


def _parse_relative(spec, scene, w):
    n = scene.manifold.n_samples
    if spec == "outside_support":
        sup = scene.meta.get("support")
        if sup is None:
            raise w.err("relative", "'outside_support' needs a scene with a twist support")
        return ~np.asarray(sup, bool)
    mask = np.zeros(n, bool)
    try:
        mask[np.asarray(_strip(spec), dtype=int)] = True
    except (IndexError, TypeError, ValueError) as exc:
        raise w.err("relative", f"must be 'outside_support' or a list of sample indices ({exc})") from exc
    return mask
