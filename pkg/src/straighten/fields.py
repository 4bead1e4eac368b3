"""Normal fields on sampled manifolds and their ambient extensions.

Covers the field-side constructions of the straightening proof: making a
field perpendicular, measuring how far it stays from the downward vertical,
mu-upwards rotation, extension over a tube, the height gradient, horizontal
set and downset detection, localisation, and perturbation to general
position.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import ramps
from .errors import (AmbiguousFoot, AntipodalCollar, DependentField,
                     GeneralPositionFailed, InducedNeighbourhoodClash, NotGrounded)
from .geometry import AmbientSplit, EmbeddedManifold, TangentFrame, TubularNeighbourhood


@dataclass(frozen=True, eq=False)
class NormalFrame:
    """``k`` unit vectors per sample, ``vectors`` of shape (N, k, D)."""

    vectors: np.ndarray
    perpendicular: bool = False

    def __post_init__(self):
        v = np.array(self.vectors, dtype=float)
        if v.ndim == 2:
            v = v[:, None, :]
        if v.ndim != 3:
            raise ValueError(f"frame vectors must be (N, k, D), got {v.shape}")
        norms = np.linalg.norm(v, axis=2)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("frame vectors must be unit length")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    @classmethod
    def from_vectors(cls, vectors, perpendicular=False):
        """Normalize arbitrary nonzero vectors into a frame."""
        v = np.array(vectors, dtype=float)
        if v.ndim == 2:
            v = v[:, None, :]
        return cls(v / np.linalg.norm(v, axis=2, keepdims=True), perpendicular)

    @property
    def k(self):
        return self.vectors.shape[1]

    def field(self, i=0):
        return self.vectors[:, i, :]

    def replace_field(self, i, values, perpendicular=None):
        v = self.vectors.copy()
        v[:, i, :] = values
        return NormalFrame(v, self.perpendicular if perpendicular is None else perpendicular)

    def independence_margin(self, T: TangentFrame):
        """Smallest singular value of [tangent basis, field vectors] per sample."""
        stacked = np.concatenate([T.vectors, self.vectors], axis=1)
        return np.linalg.svd(stacked, compute_uv=False)[:, -1]


@dataclass(frozen=True)
class GroundingReport:
    """``epsilon``: min angle between the field and the downward vertical."""

    epsilon: float
    argmin: int

    @property
    def grounded(self):
        return self.epsilon > 0.0

    def is_grounded(self, eps):
        return self.epsilon >= eps


def _angle_between(a, b):
    """Accurate angle between unit vectors (rows), including near 0 and pi."""
    return 2.0 * np.arctan2(np.linalg.norm(a - b, axis=-1), np.linalg.norm(a + b, axis=-1))


def _vertical_parts(v, u, tiny=1e-15):
    """Split unit vectors ``v`` into angle from ``u`` and a horizontal unit
    direction (zero where v is vertical)."""
    c = v @ u
    h = v - c[..., None] * u
    hn = np.linalg.norm(h, axis=-1)
    theta = np.arctan2(hn, c)
    e = np.where(hn[..., None] > tiny, h / np.where(hn > tiny, hn, 1.0)[..., None], 0.0)
    return theta, e


def _recompose(theta, e, u):
    return np.cos(theta)[..., None] * u + np.sin(theta)[..., None] * e


def slerp(a, b, t):
    """Great-circle interpolation between unit row vectors; exact at t = 0, 1."""
    t = np.asarray(t, dtype=float)
    omega = _angle_between(a, b)
    so = np.sin(omega)
    small = so < 1e-9
    safe = np.where(small, 1.0, so)
    wa = np.where(small, 1.0 - t, np.sin((1.0 - t) * omega) / safe)
    wb = np.where(small, t, np.sin(t * omega) / safe)
    out = wa[..., None] * a + wb[..., None] * b
    out = out / np.linalg.norm(out, axis=-1, keepdims=True)
    out = np.where((t == 0.0)[..., None], a, out)
    out = np.where((t == 1.0)[..., None], b, out)
    return out


# -- perpendicular, grounded, rotated ------------------------------------

def perpendicularize(m: EmbeddedManifold, frame: NormalFrame, T: TangentFrame,
                     tol=1e-9) -> NormalFrame:
    """Project each field vector off the tangent space and renormalize.

    With several fields they are also Gram-Schmidt orthonormalized in order.

    Raises
    ------
    DependentField
        If some vector (after removing tangent and earlier fields) is shorter
        than ``tol``.
    """
    out = np.empty_like(frame.vectors)
    for i in range(frame.k):
        v = frame.field(i) - T.project(frame.field(i))
        for j in range(i):
            v = v - np.einsum("nd,nd->n", v, out[:, j])[:, None] * out[:, j]
        norm = np.linalg.norm(v, axis=1)
        bad = np.flatnonzero(norm < tol)
        if len(bad):
            raise DependentField(f"field {i} is tangent at sample {bad[0]}")
        out[:, i] = v / norm[:, None]
    return NormalFrame(out, perpendicular=True)


def measure_grounding(frame: NormalFrame, split: AmbientSplit, field_index=0) -> GroundingReport:
    """Minimum over samples of the angle between the field and ``-u``."""
    v = frame.field(field_index)
    ang = _angle_between(v, np.broadcast_to(-split.u, v.shape))
    i = int(np.argmin(ang))
    return GroundingReport(float(ang[i]), i)


def upwards_rotate(frame: NormalFrame, mu, smoothing=None, *, split: AmbientSplit,
                   field_index=0) -> NormalFrame:
    """mu-upwards rotation of one field.

    Each vector is turned toward ``u`` inside the plane it spans with ``u`` by
    ``pi/2 - mu``, clamped at vertical; the clamp is smoothed over an angular
    window of width ``smoothing`` (default ``mu / 2``) so the result is a
    smooth function of the input.  The angle from vertical after rotation is
    ``smooth_hinge(theta, pi/2 - mu, smoothing)``, never more than the sharp
    clamp gives, so the vertical component is at least ``sin(eps - mu)``;
    the rotation overshoots ``pi/2 - mu`` by less than ``smoothing``.

    Raises
    ------
    NotGrounded
        If some vector is (numerically) ``-u``.
    """
    if not 0.0 < mu < np.pi / 2:
        raise ValueError(f"mu must lie in (0, pi/2), got {mu}")
    w = mu / 2.0 if smoothing is None else float(smoothing)
    u = split.u
    v = frame.field(field_index)
    theta, e = _vertical_parts(v, u)
    down = (np.pi - theta) < 1e-12
    if down.any():
        raise NotGrounded(f"field points vertically down at sample {int(np.flatnonzero(down)[0])}")
    g = ramps.smooth_hinge(theta, np.pi / 2 - mu, w)
    beta = _recompose(g, e, u)
    return frame.replace_field(field_index, beta, perpendicular=False)


# -- ambient extension ---------------------------------------------------

class AmbientField:
    """Unit vector field on ``Q x R^n`` extending a field given on ``M``.

    Inside the tube the value at ``x`` is the field at the nearest foot on M
    (interpolated along the polyline segment for curves), turned toward ``u``
    by the fraction ``smooth_step(|x - foot| / radius)`` of its angle from
    ``u``; outside the tube it is exactly ``u``.

    Evaluation is read-only and safe to share between threads.
    """

    def __init__(self, tube: TubularNeighbourhood, beta: np.ndarray, split: AmbientSplit = None,
                 ambiguity_tol=1e-9):
        m = tube.owner
        self.manifold = m
        self.tube = tube
        self.radius = float(tube.radius)
        self.locality = float(tube.locality)
        self.split = split or m.split
        self.u = self.split.u
        self.beta = np.array(beta, dtype=float)
        self.beta.setflags(write=False)
        self.ambiguity_tol = ambiguity_tol
        self._tree = cKDTree(m.positions)
        self._theta, self._e = _vertical_parts(self.beta, self.u)
        if m.dim == 1:
            inc = [[] for _ in range(m.n_samples)]
            for k, (a, b) in enumerate(m.edges):
                inc[a].append(k)
                inc[b].append(k)
            width = max(len(x) for x in inc)
            self._incident = np.array([x + [-1] * (width - len(x)) for x in inc], dtype=int)
            self._s = m.arc_length
            self._clen = {c: m.component_length(c) for c in np.unique(m.components)}

    # intrinsic distance between sample index arrays of equal shape
    def _intrinsic(self, i, j):
        m = self.manifold
        if m.dim != 1:
            d = np.linalg.norm(m.params[i] - m.params[j], axis=-1) * m.max_edge
            return d
        d = np.abs(self._s[i] - self._s[j])
        if m.closed:
            total = np.vectorize(self._clen.get)(m.components[i]) if np.size(i) else d
            d = np.minimum(d, total - d)
        return np.where(m.components[i] == m.components[j], d, np.inf)

    def foot(self, x, anchors=None):
        """Nearest-foot data ``(distance, field at foot, nearest sample)``.

        ``anchors`` (sample index per query point) restricts feet to samples
        within the locality radius of the anchor, giving induced-neighbourhood
        semantics on immersed owners.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        m = self.manifold
        k = min(m.n_samples, 16 if anchors is not None else (6 if m.dim == 1 else 4))
        dist, idx = self._tree.query(x, k=k)
        dist = dist.reshape(len(x), k)
        idx = idx.reshape(len(x), k)
        if anchors is not None:
            anchors = np.broadcast_to(np.asarray(anchors, dtype=int), (len(x),))
            far = self._intrinsic(np.repeat(anchors[:, None], k, 1), idx) > self.locality
            dist = np.where(far, np.inf, dist)
        if m.dim != 1:
            j = np.argmin(dist, axis=1)
            rows = np.arange(len(x))
            best = idx[rows, j]
            return dist[rows, j], self.beta[best], best
        return self._curve_foot(x, dist, idx, anchors)

    def _curve_foot(self, x, dist, idx, anchors):
        m = self.manifold
        n_q, k = idx.shape
        edges = self._incident[idx].reshape(n_q, -1)           # (K, k*w)
        valid = (edges >= 0) & np.repeat(np.isfinite(dist), self._incident.shape[1], axis=1)
        e = np.where(valid, edges, 0)
        a = m.edges[e, 0]
        b = m.edges[e, 1]
        pa = m.positions[a]
        pb = m.positions[b]
        d = pb - pa
        t = np.einsum("qcd,qcd->qc", x[:, None, :] - pa, d) / np.einsum("qcd,qcd->qc", d, d)
        t = np.clip(t, 0.0, 1.0)
        foot = pa + t[..., None] * d
        r = np.linalg.norm(x[:, None, :] - foot, axis=2)
        if anchors is not None:
            anc = np.repeat(anchors[:, None], r.shape[1], 1)
            valid &= (self._intrinsic(anc, a) <= self.locality) | (self._intrinsic(anc, b) <= self.locality)
        r = np.where(valid, r, np.inf)
        j = np.argmin(r, axis=1)
        rows = np.arange(n_q)
        rbest = r[rows, j]
        tb = t[rows, j]
        ia, ib = a[rows, j], b[rows, j]
        if anchors is None:
            self._check_ambiguity(r, a, b, t, rows, j, rbest, ia)
        elif np.any(np.isfinite(dist).any(axis=1) & ~np.isfinite(rbest)):
            raise InducedNeighbourhoodClash("no foot within locality radius of the anchor sample")
        beta = slerp(self.beta[ia], self.beta[ib], tb)
        near = np.where(tb <= 0.5, ia, ib)
        return rbest, beta, near

    def _check_ambiguity(self, r, a, b, t, rows, j, rbest, ia):
        inside = rbest < self.radius
        if not inside.any():
            return
        foot_sample = np.where(t >= 0.5, b, a)
        best_sample = foot_sample[rows, j]
        sep = self._intrinsic(np.repeat(best_sample[:, None], r.shape[1], 1), foot_sample)
        rival = np.where(sep > self.locality, r, np.inf).min(axis=1)
        tie = inside & (rival - rbest <= self.ambiguity_tol * max(self.radius, 1.0))
        if tie.any():
            q = int(np.flatnonzero(tie)[0])
            raise AmbiguousFoot(f"query {q} is equidistant from two distant sheets "
                                f"(distance {rbest[q]:.3g}); tube radius exceeds the reach")

    def __call__(self, x, anchors=None):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, x.shape[-1])
        out = np.broadcast_to(self.u, flat.shape).copy()
        dist, beta, _ = self.foot(flat, anchors)
        inside = dist < self.radius
        if inside.any():
            s = ramps.smooth_step(dist[inside] / self.radius)
            b = beta[inside]
            theta, e = _vertical_parts(b, self.u)
            turned = _recompose(theta * (1.0 - s), e, self.u)
            out[inside] = np.where((s == 0.0)[:, None], b, turned)
        return out.reshape(x.shape)


def globalize(m: EmbeddedManifold, beta: NormalFrame, tube: TubularNeighbourhood,
              field_index=0) -> AmbientField:
    """Extend the rotated field over the tube, vertical outside it."""
    if tube.owner is not m:
        raise ValueError("tube belongs to a different manifold")
    return AmbientField(tube, beta.field(field_index), m.split)


# -- height gradient, horizontal set, downset -----------------------------

def gradient_field(m: EmbeddedManifold, T: TangentFrame, split: AmbientSplit = None):
    """Tangential projection of ``u`` (gradient of the height function)."""
    split = split or m.split
    return T.project(np.broadcast_to(split.u, m.positions.shape))


def upmost_field(m: EmbeddedManifold, T: TangentFrame, split: AmbientSplit = None, tol=1e-9):
    """psi: the unit normal with largest vertical component; NaN on H."""
    split = split or m.split
    u = np.broadcast_to(split.u, m.positions.shape)
    n = u - T.project(u)
    norm = np.linalg.norm(n, axis=1)
    psi = n / np.where(norm > tol, norm, 1.0)[:, None]
    psi[norm <= tol] = np.nan
    return psi


def vertical_tangent_angle(m: EmbeddedManifold, T: TangentFrame, split: AmbientSplit = None):
    """Angle between ``u`` and the tangent space at each sample."""
    split = split or m.split
    u = np.broadcast_to(split.u, m.positions.shape)
    tan = T.project(u)
    return np.arctan2(np.linalg.norm(u - tan, axis=1), np.linalg.norm(tan, axis=1))


LABELS = ("H", "D", "U_prime", "U", "V")


@dataclass(frozen=True, eq=False)
class SubsetMarking:
    """Boolean masks over samples for the sets H, D, U', U and V."""

    n: int
    masks: dict = field(default_factory=dict)

    def __post_init__(self):
        full = {}
        for lab in LABELS:
            mask = self.masks.get(lab)
            mask = np.zeros(self.n, bool) if mask is None else np.asarray(mask, bool).copy()
            mask.setflags(write=False)
            full[lab] = mask
        object.__setattr__(self, "masks", full)

    def __getitem__(self, label):
        return self.masks[label]

    def with_masks(self, **masks):
        new = dict(self.masks)
        new.update(masks)
        return SubsetMarking(self.n, new)

    @property
    def W(self):
        return self.masks["U"] | self.masks["V"]

    @property
    def plain(self):
        return ~np.any(np.stack(list(self.masks.values())), axis=0)

    def check(self):
        """List of violated inclusion invariants (empty when consistent)."""
        m = self.masks
        bad = []
        if np.any(m["U_prime"] & ~m["U"]):
            bad.append("U' not contained in U")
        if np.any(m["H"] & ~m["U_prime"]) and m["U_prime"].any():
            bad.append("H not contained in U'")
        if np.any(m["D"] & ~m["U"] & ~m["V"]):
            bad.append("D outside U is not contained in V")
        return bad

    def labels(self, i):
        names = [lab for lab in LABELS if self.masks[lab][i]]
        return "|".join(names) if names else "plain"

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "label"])
            for i in range(self.n):
                w.writerow([i, self.labels(i)])


def _neighbour_pairs(m: EmbeddedManifold):
    """Opposite-neighbour index pairs per direction, -1 where missing."""
    n = m.n_samples
    if m.dim == 1:
        prev = np.full(n, -1)
        nxt = np.full(n, -1)
        for a, b in m.edges:
            nxt[a] = b
            prev[b] = a
        return [(prev, nxt)]
    nu, nv = m.shape
    grid = np.pad(np.arange(n).reshape(nu, nv), 1, constant_values=-1)
    out = []
    for du, dv in ((1, 0), (0, 1), (1, 1), (1, -1)):
        fwd = grid[1 + du:1 + du + nu, 1 + dv:1 + dv + nv].ravel()
        bwd = grid[1 - du:1 - du + nu, 1 - dv:1 - dv + nv].ravel()
        out.append((bwd, fwd))
    return out


def discrete_zero_set(m: EmbeddedManifold, values, tol, floor=1e-7):
    """Samples where a nonnegative quantity vanishes, discretely.

    A sample qualifies if its value is below ``floor``, or below ``tol`` and a
    (non-strict) minimum along at least one grid direction.  NaN never
    qualifies.
    """
    values = np.asarray(values, dtype=float)
    ok = np.isfinite(values)
    v = np.where(ok, values, np.inf)
    minimum = np.zeros(m.n_samples, bool)
    for a, b in _neighbour_pairs(m):
        va = np.where(a >= 0, v[np.maximum(a, 0)], np.inf)
        vb = np.where(b >= 0, v[np.maximum(b, 0)], np.inf)
        minimum |= (v <= va) & (v <= vb)
    return ok & ((v <= floor) | ((v <= tol) & minimum))


def horizontal_set(m: EmbeddedManifold, T: TangentFrame, tol=0.05,
                   split: AmbientSplit = None) -> SubsetMarking:
    """Mark samples whose tangent space contains the vertical (within ``tol`` rad)."""
    ang = vertical_tangent_angle(m, T, split)
    return SubsetMarking(m.n_samples, {"H": discrete_zero_set(m, ang, tol)})


def downmost_angle(alpha, psi):
    """Angle between ``alpha`` and ``-psi`` per sample (NaN where psi is)."""
    return _angle_between(alpha, -psi)


def downset(m: EmbeddedManifold, alpha: NormalFrame, marking: SubsetMarking, tol=np.pi / 16,
            *, T: TangentFrame, split: AmbientSplit = None, field_index=0) -> SubsetMarking:
    """Mark D: samples where the field points downmost in its normal fibre.

    H samples (where the upmost normal is undefined) are skipped; H samples
    adjacent to D are recorded on ``marking.closure`` via the U' bookkeeping
    done by :func:`mark_neighbourhoods`.
    """
    psi = upmost_field(m, T, split)
    ang = downmost_angle(alpha.field(field_index), psi)
    ang = np.where(marking["H"], np.nan, ang)
    return marking.with_masks(D=discrete_zero_set(m, ang, tol))


def downset_closure(m: EmbeddedManifold, marking: SubsetMarking):
    """D together with the H samples adjacent to it."""
    d = marking["D"].copy()
    if not d.any():
        return d
    touch = np.zeros(m.n_samples, bool)
    for i, nb in enumerate(m.neighbours()):
        if marking["H"][i] and d[nb].any():
            touch[i] = True
    return d | touch


def mark_neighbourhoods(m: EmbeddedManifold, marking: SubsetMarking, *, u_prime_radius,
                        u_radius, v_radius) -> SubsetMarking:
    """Add U' and U around H and V around the closure of D minus U'."""
    H = marking["H"]
    dh = m.distance_to_set(H)
    u_prime = H | (dh <= u_prime_radius)
    u = u_prime | (dh <= u_radius)
    core = downset_closure(m, marking) & ~u_prime
    v = core | (m.distance_to_set(core) <= v_radius) if core.any() else np.zeros(m.n_samples, bool)
    return marking.with_masks(U_prime=u_prime, U=u, V=v)


# -- gradient-flow components inside V ------------------------------------

@dataclass(frozen=True)
class FlowlineComponent:
    length: float
    samples: tuple


def flowline_components(m: EmbeddedManifold, T: TangentFrame, mask, split=None,
                        crit_tol=1e-9):
    """Components of (integral curves of the height gradient) inside ``mask``.

    Curves: maximal runs of consecutive masked samples, split at critical
    samples, measured by chord length.  Grids: for every masked sample the
    gradient line through it is traced forward and backward in parameter
    space until it leaves the mask.
    """
    mask = np.asarray(mask, bool)
    if not mask.any():
        return []
    phi = gradient_field(m, T, split)
    crit = np.linalg.norm(phi, axis=1) <= crit_tol
    if m.dim == 1:
        return _curve_runs(m, mask & ~crit)
    return _grid_traces(m, phi, mask, crit)


def _curve_runs(m, mask):
    prev, nxt = _neighbour_pairs(m)[0]
    seen = np.zeros(m.n_samples, bool)
    out = []
    for i in np.flatnonzero(mask):
        if seen[i]:
            continue
        # walk back to the start of the run
        start = i
        while prev[start] >= 0 and mask[prev[start]] and prev[start] != i:
            start = prev[start]
        run = [start]
        seen[start] = True
        j = start
        while nxt[j] >= 0 and mask[nxt[j]] and not seen[nxt[j]]:
            j = nxt[j]
            run.append(j)
            seen[j] = True
        pts = m.positions[run]
        length = float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())
        if m.closed and len(run) == int((m.components == m.components[start]).sum()):
            length += float(np.linalg.norm(pts[0] - pts[-1]))
        out.append(FlowlineComponent(length, tuple(int(r) for r in run)))
    return out


def _grid_traces(m, phi, mask, crit, step=0.2, max_steps=4000):
    nu, nv = m.shape
    D = m.positions.shape[1]
    grid = m.positions.reshape(nu, nv, D)
    pu = np.gradient(grid, axis=0).reshape(-1, D)
    pv = np.gradient(grid, axis=1).reshape(-1, D)
    J = np.stack([pu, pv], axis=2)                         # (N, D, 2)
    w = np.einsum("nij,nj->ni", np.linalg.pinv(J), phi)     # parameter-space velocity
    wn = np.linalg.norm(w, axis=1, keepdims=True)
    wdir = np.where(wn > 0, w / np.where(wn > 0, wn, 1.0), 0.0).reshape(nu, nv, 2)
    mgrid = mask.reshape(nu, nv)
    cgrid = crit.reshape(nu, nv)
    seeds = np.flatnonzero(mask & ~crit)
    out = []
    for s in seeds:
        i0, j0 = divmod(int(s), nv)
        total = 0.0
        members = {int(s)}
        for sign in (1.0, -1.0):
            p = np.array([i0, j0], float)
            x_prev = grid[i0, j0]
            for _ in range(max_steps):
                a, b = int(round(p[0])), int(round(p[1]))
                d = wdir[a, b] * sign
                if not d.any():
                    break
                p = p + step * d
                a, b = int(round(p[0])), int(round(p[1]))
                if not (0 <= a < nu and 0 <= b < nv) or not mgrid[a, b] or cgrid[a, b]:
                    break
                x = _bilinear(grid, p)
                total += float(np.linalg.norm(x - x_prev))
                x_prev = x
                members.add(a * nv + b)
        out.append(FlowlineComponent(total, tuple(sorted(members))))
    return out


def _bilinear(grid, p):
    nu, nv = grid.shape[:2]
    i = min(max(int(np.floor(p[0])), 0), nu - 2)
    j = min(max(int(np.floor(p[1])), 0), nv - 2)
    a, b = p[0] - i, p[1] - j
    return ((1 - a) * (1 - b) * grid[i, j] + a * (1 - b) * grid[i + 1, j]
            + (1 - a) * b * grid[i, j + 1] + a * b * grid[i + 1, j + 1])


# -- localisation and general position -----------------------------------

def localise(m: EmbeddedManifold, alpha: NormalFrame, marking: SubsetMarking, psi: np.ndarray,
             collar_width, field_index=0) -> NormalFrame:
    """Isotope the field to ``psi`` outside ``W = U | V`` along great circles.

    Inside W the fraction of the original field kept is
    ``smooth_step(dist(p, M - W) / collar_width)``, so the field is unchanged
    deeper than ``collar_width`` inside W and equals ``psi`` outside it.

    Raises
    ------
    AntipodalCollar
        If a collar sample has the field exactly opposite to ``psi``.
    """
    a = alpha.field(field_index)
    W = marking.W
    if not W.any():
        keep = np.zeros(m.n_samples)
    elif W.all():
        keep = np.ones(m.n_samples)
    else:
        dist = m.distance_to_set(~W)
        keep = np.where(W, ramps.smooth_step(dist / collar_width), 0.0)
    collar = (keep > 0.0) & (keep < 1.0)
    needs_psi = keep < 1.0
    if np.any(needs_psi & np.isnan(psi).any(axis=1)):
        raise AntipodalCollar("horizontal set reaches the collar; widen U")
    if collar.any():
        opp = _angle_between(a[collar], psi[collar]) > np.pi - 1e-9
        if opp.any():
            i = int(np.flatnonzero(collar)[np.flatnonzero(opp)[0]])
            raise AntipodalCollar(f"field is downmost at collar sample {i}; widen V")
    safe_psi = np.where(np.isnan(psi), a, psi)
    out = slerp(safe_psi, a, keep)
    return alpha.replace_field(field_index, out, perpendicular=alpha.perpendicular)


@dataclass(frozen=True, eq=False)
class GeneralPosition:
    frame: NormalFrame
    marking: SubsetMarking
    rounds: int
    components: list


def perturb_general_position(m: EmbeddedManifold, alpha: NormalFrame, marking: SubsetMarking,
                             delta, rng_seed=0, *, T: TangentFrame, split: AmbientSplit = None,
                             perturb_angle=0.2, max_rounds=8, v_radius=None,
                             u_prime_radius=0.0, u_radius=0.0, downset_tol=np.pi / 16,
                             field_index=0) -> GeneralPosition:
    """Perturb the field near D until gradient lines cross V in pieces shorter than delta.

    Each round rotates the field inside its normal space by a smooth random
    angle of magnitude at most ``perturb_angle``, supported within ``2 delta``
    of the closure of ``D - U'``; D and V are then re-derived.  With no
    downset the input frame is returned untouched.

    Raises
    ------
    GeneralPositionFailed
        After ``max_rounds`` unsuccessful rounds.
    """
    split = split or m.split
    v_radius = 0.4 * delta if v_radius is None else v_radius
    rng = np.random.default_rng(rng_seed)
    frame = alpha
    for rounds in range(max_rounds + 1):
        marked = downset(m, frame, marking, downset_tol, T=T, split=split, field_index=field_index)
        marked = mark_neighbourhoods(m, marked, u_prime_radius=u_prime_radius,
                                     u_radius=u_radius, v_radius=v_radius)
        comps = flowline_components(m, T, marked["V"] & ~marked["U_prime"], split)
        worst = max(comps, key=lambda c: c.length, default=None)
        if worst is None or worst.length < delta:
            return GeneralPosition(frame, marked, rounds, comps)
        if rounds == max_rounds:
            raise GeneralPositionFailed(
                f"flowline component of length {worst.length:.4g} >= delta {delta:.4g} "
                f"after {max_rounds} rounds", component=worst)
        core = downset_closure(m, marked) & ~marked["U_prime"]
        frame = _random_rotation(m, frame, core, 2.0 * delta, perturb_angle, rng, T, field_index)
    raise AssertionError("unreachable")


def _random_rotation(m, frame, core, radius, max_angle, rng, T, field_index):
    a = frame.field(field_index)
    dist = m.distance_to_set(core)
    bump = 1.0 - ramps.smooth_step(dist / radius)
    centre = m.params[core].mean(axis=0)
    scale = max(float(np.ptp(m.params[core], axis=0).max()), radius)
    direction = rng.normal(size=m.dim)
    direction /= np.linalg.norm(direction)
    c0, c1 = rng.uniform(-1.0, 1.0, size=2)
    xi = (m.params - centre) @ direction / scale
    ang = max_angle * bump * np.clip(c0 + c1 * xi, -1.0, 1.0)
    r = rng.normal(size=a.shape[1])
    w = np.broadcast_to(r, a.shape) - T.project(np.broadcast_to(r, a.shape))
    w = w - np.einsum("nd,nd->n", w, a)[:, None] * a
    for j in range(frame.k):
        if j != field_index:
            other = frame.field(j)
            w = w - np.einsum("nd,nd->n", w, other)[:, None] * other
    wn = np.linalg.norm(w, axis=1)
    ok = wn > 1e-9
    w = np.where(ok[:, None], w / np.where(ok, wn, 1.0)[:, None], 0.0)
    ang = np.where(ok, ang, 0.0)
    out = np.cos(ang)[:, None] * a + np.sin(ang)[:, None] * w
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    return frame.replace_field(field_index, out)


def ground_by_perturbation(m: EmbeddedManifold, alpha: NormalFrame, *, T: TangentFrame,
                           split: AmbientSplit, min_epsilon, rng_seed=0, perturb_angle=0.2,
                           max_rounds=8, field_index=0):
    """Rotate the field away from ``-u`` near its worst samples until it is
    ``min_epsilon``-grounded; returns ``(frame, rounds)``.

    Raises
    ------
    NotGrounded
        If the bound is still unmet after ``max_rounds``.
    """
    rng = np.random.default_rng(rng_seed)
    frame = alpha
    u = split.u
    reach = max(10.0 * m.max_edge, 0.05 * m.diameter)
    for rounds in range(max_rounds + 1):
        rep = measure_grounding(frame, split, field_index)
        if rep.epsilon >= min_epsilon:
            return frame, rounds
        if rounds == max_rounds:
            break
        ang = _angle_between(frame.field(field_index), np.broadcast_to(-u, m.positions.shape))
        core = ang < max(2.0 * min_epsilon, perturb_angle)
        frame = _random_rotation(m, frame, core, reach, perturb_angle, rng, T, field_index)
    raise NotGrounded(f"field is only {rep.epsilon:.3g}-grounded after {max_rounds} "
                      f"perturbation rounds (need {min_epsilon:.3g})")
