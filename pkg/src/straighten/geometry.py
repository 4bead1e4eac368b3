"""Discretized manifolds in the product ``Q x R^n`` and their local geometry.

Curves (m = 1) are polylines, possibly closed and possibly with several
components; surfaces (m = 2) are rectangular parameter grids.  Positions live
in ``R^(q+n)`` with the horizontal factor ``Q = R^q`` first and the vertical
factors after it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .errors import DegenerateSample, SelfIntersection


@dataclass(frozen=True)
class AmbientSplit:
    """Coordinate layout of the ambient space ``Q^q x R^n``.

    ``vertical_axis`` picks which of the ``n`` vertical factors is currently
    being straightened; every other coordinate counts as horizontal.  ``n = 0``
    is allowed only for objects that already live in ``Q`` (projections).
    """

    q: int
    n: int = 1
    vertical_axis: int = 0

    def __post_init__(self):
        if self.q < 1:
            raise ValueError(f"q must be >= 1, got {self.q}")
        if self.n < 0:
            raise ValueError(f"n must be >= 0, got {self.n}")
        if self.n and not 0 <= self.vertical_axis < self.n:
            raise ValueError(f"vertical_axis {self.vertical_axis} outside [0, {self.n})")

    @property
    def dim(self):
        return self.q + self.n

    @property
    def vertical_index(self):
        """Index of the vertical coordinate in the ambient vector."""
        if self.n == 0:
            raise ValueError("split has no vertical factor")
        return self.q + self.vertical_axis

    @property
    def u(self):
        """Unit vertical vector."""
        e = np.zeros(self.dim)
        e[self.vertical_index] = 1.0
        return e

    def with_axis(self, axis):
        return replace(self, vertical_axis=axis)

    def to_dict(self):
        return {"q": self.q, "n": self.n, "vertical_axis": self.vertical_axis}


@dataclass(frozen=True, eq=False)
class EmbeddedManifold:
    """A sampled m-manifold with positions in ``R^(q+n)``.

    Parameters
    ----------
    positions : ndarray, shape (N, q + n)
        Sample positions, flattened in C order for grids.
    split : AmbientSplit
    shape : tuple
        ``(N,)`` for curves, ``(nu, nv)`` for grids.
    params : ndarray, shape (N, m), optional
        Parameter coordinates; defaults to chord length (curves) or the grid
        indices (surfaces).
    closed : bool
        Curves only: every component is a closed loop.
    components : ndarray of int, shape (N,), optional
        Curves only: component label per sample; samples of one component
        must be contiguous.
    boundary_flags : ndarray of bool, shape (N,), optional
        Marks relative-boundary samples.
    """

    positions: np.ndarray
    split: AmbientSplit
    shape: tuple = None
    params: np.ndarray = None
    closed: bool = False
    components: np.ndarray = None
    boundary_flags: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float)
        if pos.ndim != 2 or pos.shape[1] != self.split.dim:
            raise ValueError(f"positions must be (N, {self.split.dim}), got {pos.shape}")
        n = len(pos)
        shape = tuple(self.shape) if self.shape is not None else (n,)
        if int(np.prod(shape)) != n or len(shape) not in (1, 2):
            raise ValueError(f"shape {shape} does not match {n} samples")
        if len(shape) == 2 and self.closed:
            raise ValueError("closed grids are not supported")
        comps = (np.zeros(n, dtype=int) if self.components is None
                 else np.asarray(self.components, dtype=int).copy())
        if len(shape) == 2 and np.any(comps != 0):
            raise ValueError("grids have a single component")
        if n > 1 and np.any(np.diff(comps) < 0):
            raise ValueError("component labels must be contiguous and ascending")
        flags = (np.zeros(n, dtype=bool) if self.boundary_flags is None
                 else np.asarray(self.boundary_flags, dtype=bool).copy())
        for arr in (pos, comps, flags):
            arr.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "boundary_flags", flags)
        if self.dim > self.split.q:
            raise ValueError(f"manifold dimension {self.dim} exceeds q = {self.split.q}")
        edges = self.edges
        if len(edges):
            lengths = np.linalg.norm(pos[edges[:, 1]] - pos[edges[:, 0]], axis=1)
            bad = np.flatnonzero(lengths <= 1e-14 * max(1.0, self.diameter))
            if len(bad):
                i, j = edges[bad[0]]
                raise DegenerateSample(f"adjacent samples {i} and {j} coincide")
        if self.params is None:
            object.__setattr__(self, "params", self._default_params())
        else:
            p = np.array(self.params, dtype=float).reshape(n, self.dim)
            p.setflags(write=False)
            object.__setattr__(self, "params", p)

    # -- basic structure -------------------------------------------------

    @property
    def dim(self):
        """Manifold dimension m."""
        return len(self.shape)

    @property
    def n_samples(self):
        return len(self.positions)

    @property
    def codim_q(self):
        """Horizontal codimension: non-vertical coordinates minus ``m``.

        Equals ``q - m`` with one vertical factor; with several, the factors
        not currently straightened count as horizontal.
        """
        return self.split.dim - 1 - self.dim

    @cached_property
    def diameter(self):
        lo = self.positions.min(axis=0)
        hi = self.positions.max(axis=0)
        return float(np.linalg.norm(hi - lo))

    @cached_property
    def edges(self):
        """Index pairs of adjacent samples, shape (E, 2)."""
        n = self.n_samples
        if self.dim == 1:
            pairs = []
            for c in np.unique(self.components):
                idx = np.flatnonzero(self.components == c)
                pairs.append(np.column_stack([idx[:-1], idx[1:]]))
                if self.closed and len(idx) > 2:
                    pairs.append(np.array([[idx[-1], idx[0]]]))
            out = np.concatenate(pairs) if pairs else np.zeros((0, 2), int)
        else:
            nu, nv = self.shape
            grid = np.arange(n).reshape(nu, nv)
            out = np.concatenate([
                np.column_stack([grid[:-1, :].ravel(), grid[1:, :].ravel()]),
                np.column_stack([grid[:, :-1].ravel(), grid[:, 1:].ravel()]),
            ])
        out = out.astype(int)
        out.setflags(write=False)
        return out

    @cached_property
    def edge_lengths(self):
        e = self.edges
        return np.linalg.norm(self.positions[e[:, 1]] - self.positions[e[:, 0]], axis=1)

    @property
    def max_edge(self):
        return float(self.edge_lengths.max()) if len(self.edges) else 0.0

    @property
    def min_edge(self):
        return float(self.edge_lengths.min()) if len(self.edges) else 0.0

    @cached_property
    def arc_length(self):
        """Curves: cumulative chord length per sample, restarting per component."""
        if self.dim != 1:
            raise ValueError("arc_length is defined for curves only")
        s = np.zeros(self.n_samples)
        for c in np.unique(self.components):
            idx = np.flatnonzero(self.components == c)
            seg = np.linalg.norm(np.diff(self.positions[idx], axis=0), axis=1)
            s[idx] = np.concatenate([[0.0], np.cumsum(seg)])
        return s

    def component_length(self, c):
        idx = np.flatnonzero(self.components == c)
        total = self.arc_length[idx[-1]]
        if self.closed and len(idx) > 2:
            total += np.linalg.norm(self.positions[idx[0]] - self.positions[idx[-1]])
        return float(total)

    def _default_params(self):
        if self.dim == 1:
            return self.arc_length.reshape(-1, 1).copy()
        nu, nv = self.shape
        iu, iv = np.meshgrid(np.arange(nu, dtype=float), np.arange(nv, dtype=float),
                             indexing="ij")
        return np.column_stack([iu.ravel(), iv.ravel()])

    @property
    def component_boundary_ok(self):
        """True when every component carries at least one boundary flag."""
        return all(self.boundary_flags[self.components == c].any()
                   for c in np.unique(self.components))

    def with_positions(self, positions, split=None):
        """Same connectivity and parameters, new positions."""
        return EmbeddedManifold(
            positions=positions, split=split or self.split, shape=self.shape,
            params=self.params, closed=self.closed, components=self.components,
            boundary_flags=self.boundary_flags, meta=dict(self.meta))

    def with_split(self, split):
        return self.with_positions(self.positions, split=split)

    # -- intrinsic distances --------------------------------------------

    @cached_property
    def _graph(self):
        n = self.n_samples
        e = self.edges
        w = self.edge_lengths
        rows, cols, vals = [e[:, 0], e[:, 1]], [e[:, 1], e[:, 0]], [w, w]
        if self.dim == 2:
            nu, nv = self.shape
            grid = np.arange(n).reshape(nu, nv)
            for a, b in ((grid[:-1, :-1], grid[1:, 1:]), (grid[:-1, 1:], grid[1:, :-1])):
                a, b = a.ravel(), b.ravel()
                d = np.linalg.norm(self.positions[b] - self.positions[a], axis=1)
                rows += [a, b]
                cols += [b, a]
                vals += [d, d]
        return coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n, n)).tocsr()

    def intrinsic_distance(self, sources=None, limit=np.inf):
        """Along-manifold distances, shape (len(sources), N); ``inf`` across
        components or beyond ``limit``."""
        n = self.n_samples
        src = np.arange(n) if sources is None else np.atleast_1d(np.asarray(sources, int))
        if self.dim == 1:
            s = self.arc_length
            d = np.abs(s[src, None] - s[None, :])
            same = self.components[src, None] == self.components[None, :]
            if self.closed:
                per = {c: self.component_length(c) for c in np.unique(self.components)}
                lengths = np.array([per[c] for c in self.components])
                d = np.minimum(d, lengths[None, :] - d)
            d = np.where(same, d, np.inf)
            if np.isfinite(limit):
                d = np.where(d <= limit, d, np.inf)
            return d
        return dijkstra(self._graph, indices=src, limit=limit)

    def distance_to_set(self, mask, limit=np.inf):
        """Intrinsic distance from every sample to the nearest sample in ``mask``."""
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            return np.full(self.n_samples, np.inf)
        if self.dim == 1:
            return self.intrinsic_distance(np.flatnonzero(mask), limit).min(axis=0)
        return dijkstra(self._graph, indices=np.flatnonzero(mask), limit=limit, min_only=True)

    def neighbours(self):
        """List of neighbour index arrays (edge adjacency plus grid diagonals)."""
        g = self._graph
        return [g.indices[g.indptr[i]:g.indptr[i + 1]] for i in range(self.n_samples)]

    # -- embedding check -------------------------------------------------

    def default_locality(self):
        """lambda: along-manifold radius treated as 'the same sheet'."""
        return 3.0 * self.max_edge

    def embedding_gap(self, locality=None):
        """Smallest distance between parts of M that are intrinsically farther
        apart than ``locality``; returns ``(distance, (i, j))``."""
        lam = self.default_locality() if locality is None else locality
        if self.dim == 1:
            return _segment_gap(self, lam)
        d = self.intrinsic_distance(limit=lam)
        far = ~np.isfinite(d)
        np.fill_diagonal(far, False)
        eu = np.linalg.norm(self.positions[:, None, :] - self.positions[None, :, :], axis=2)
        eu = np.where(far, eu, np.inf)
        k = int(np.argmin(eu))
        i, j = divmod(k, self.n_samples)
        return float(eu[i, j]), (int(i), int(j))

    def is_embedded(self, locality=None, tol=None):
        gap, _ = self.embedding_gap(locality)
        return gap > self._intersection_tol(tol)

    def _intersection_tol(self, tol):
        return 1e-9 * max(1.0, self.diameter) if tol is None else tol


def _segment_gap(m, lam):
    """Min distance between non-neighbouring polyline segments (curves)."""
    e = m.edges
    if len(e) < 2:
        return np.inf, None
    a0 = m.positions[e[:, 0]]
    a1 = m.positions[e[:, 1]]
    # intrinsic gap between segments: distance between nearest endpoints
    d_end = np.full((len(e), len(e)), np.inf)
    for p in (0, 1):
        for q in (0, 1):
            d_end = np.minimum(d_end, m.intrinsic_distance(e[:, p])[:, e[:, q]])
    far = d_end > lam
    np.fill_diagonal(far, False)
    best, pair = np.inf, None
    ii, jj = np.nonzero(np.triu(far, 1))
    chunk = 200000
    for k in range(0, len(ii), chunk):
        i, j = ii[k:k + chunk], jj[k:k + chunk]
        d = segment_distance(a0[i], a1[i], a0[j], a1[j])
        if len(d):
            t = int(np.argmin(d))
            if d[t] < best:
                best, pair = float(d[t]), (int(e[i[t], 0]), int(e[j[t], 0]))
    return best, pair


def segment_distance(p0, p1, q0, q1):
    """Vectorized minimum distance between segments ``[p0, p1]`` and ``[q0, q1]``."""
    d1 = p1 - p0
    d2 = q1 - q0
    r = p0 - q0
    a = np.einsum("ij,ij->i", d1, d1)
    e = np.einsum("ij,ij->i", d2, d2)
    f = np.einsum("ij,ij->i", d2, r)
    c = np.einsum("ij,ij->i", d1, r)
    b = np.einsum("ij,ij->i", d1, d2)
    denom = a * e - b * b
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(denom > 1e-300, np.clip((b * f - c * e) / denom, 0.0, 1.0), 0.0)
        t = (b * s + f) / e
    s = np.where(t < 0.0, np.clip(-c / a, 0.0, 1.0), s)
    s = np.where(t > 1.0, np.clip((b - c) / a, 0.0, 1.0), s)
    t = np.clip(t, 0.0, 1.0)
    diff = (p0 + s[:, None] * d1) - (q0 + t[:, None] * d2)
    return np.linalg.norm(diff, axis=1)


@dataclass(frozen=True, eq=False)
class TangentFrame:
    """Per-sample orthonormal tangent basis, ``vectors`` of shape (N, m, D)."""

    vectors: np.ndarray

    @property
    def dim(self):
        return self.vectors.shape[1]

    def project(self, v):
        """Tangential component of per-sample vectors ``v`` (N, D)."""
        coeff = np.einsum("nkd,nd->nk", self.vectors, v)
        return np.einsum("nk,nkd->nd", coeff, self.vectors)

    def angle_to(self, v):
        """Angle between each (unit) vector ``v[i]`` and the tangent space at i."""
        v = v / np.linalg.norm(v, axis=-1, keepdims=True)
        t = np.linalg.norm(self.project(v), axis=-1)
        return np.arccos(np.clip(t, 0.0, 1.0))


def _curve_derivative(pos, s, closed):
    n = len(pos)
    if n == 2:
        chord = pos[1] - pos[0]
        return np.vstack([chord, chord])
    if closed:
        total = s[-1] + np.linalg.norm(pos[0] - pos[-1])
        pp = np.vstack([pos[-2:], pos, pos[:2]])
        ss = np.concatenate([s[-2:] - total, s, s[:2] + total])
        return np.gradient(pp, ss, axis=0, edge_order=2)[2:-2]
    return np.gradient(pos, s, axis=0, edge_order=2)


def estimate_tangent_frame(m: EmbeddedManifold) -> TangentFrame:
    """Second-order finite-difference tangents, orthonormalized.

    Interior samples use central differences in the chord-length (curves) or
    grid (surfaces) parameter; boundary samples use second-order one-sided
    differences.  A two-sample curve gets its chord direction at both ends.
    """
    pos = m.positions
    if m.dim == 1:
        out = np.empty((m.n_samples, 1, pos.shape[1]))
        s = m.arc_length
        for c in np.unique(m.components):
            idx = np.flatnonzero(m.components == c)
            if len(idx) < 2:
                raise DegenerateSample(f"component {c} has a single sample")
            d = _curve_derivative(pos[idx], s[idx], m.closed)
            out[idx, 0] = d / np.linalg.norm(d, axis=1, keepdims=True)
        return TangentFrame(out)
    nu, nv = m.shape
    grid = pos.reshape(nu, nv, -1)
    pu = m.params[:, 0].reshape(nu, nv)[:, 0]
    pv = m.params[:, 1].reshape(nu, nv)[0, :]
    order_u = 2 if nu > 2 else 1
    order_v = 2 if nv > 2 else 1
    du = np.gradient(grid, pu, axis=0, edge_order=order_u).reshape(-1, pos.shape[1])
    dv = np.gradient(grid, pv, axis=1, edge_order=order_v).reshape(-1, pos.shape[1])
    t1 = du / np.linalg.norm(du, axis=1, keepdims=True)
    dv = dv - np.einsum("nd,nd->n", dv, t1)[:, None] * t1
    norm = np.linalg.norm(dv, axis=1, keepdims=True)
    if np.any(norm < 1e-12):
        raise DegenerateSample("grid parameter directions are dependent")
    t2 = dv / norm
    return TangentFrame(np.stack([t1, t2], axis=1))


def discrete_reach(m: EmbeddedManifold, locality=None, tol=None) -> float:
    """Reach estimate: the largest admissible tube radius.

    Uses Federer's characterisation ``|y - x|^2 / (2 dist(y - x, T_x M))``
    minimized over sample pairs that are more than ``locality`` apart along M;
    a straight line therefore has infinite reach, two parallel lines at
    distance d have reach d/2 and a round circle has reach equal to its radius.

    Raises
    ------
    SelfIntersection
        If two intrinsically distant parts of M come within ``tol``.
    """
    lam = m.default_locality() if locality is None else locality
    gap, pair = m.embedding_gap(lam)
    if gap <= m._intersection_tol(tol):
        raise SelfIntersection(f"samples {pair} are {gap:.3g} apart: immersed, not embedded",
                               distance=gap, pair=pair)
    return _federer_min(m, lam, np.inf)


def local_reach(m: EmbeddedManifold, locality=None, window=None) -> float:
    """Reach estimate that only looks at pairs between ``locality`` and
    ``window`` apart along M (default ten times the locality).

    For immersed objects this measures curvature without seeing the
    self-crossings, which is what induced tubes need.
    """
    lam = m.default_locality() if locality is None else locality
    return _federer_min(m, lam, 10.0 * lam if window is None else window)


def _federer_min(m, lam, window):
    T = estimate_tangent_frame(m)
    n = m.n_samples
    best = np.inf
    chunk = max(1, 2_000_000 // max(n, 1))
    for start in range(0, n, chunk):
        src = np.arange(start, min(n, start + chunk))
        d = m.intrinsic_distance(src, limit=window)
        near = m.intrinsic_distance(src, limit=lam)
        far = ~np.isfinite(near) & (d <= window) if np.isfinite(window) else ~np.isfinite(near)
        diff = m.positions[None, :, :] - m.positions[src, None, :]
        coeff = np.einsum("skd,sjd->sjk", T.vectors[src], diff)
        normal = diff - np.einsum("sjk,skd->sjd", coeff, T.vectors[src])
        dn = np.linalg.norm(normal, axis=2)
        d2 = np.einsum("sjd,sjd->sj", diff, diff)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(far & (dn > 0), d2 / (2.0 * dn), np.inf)
        best = min(best, float(r.min()) if r.size else np.inf)
    return best


@dataclass(frozen=True, eq=False)
class TubularNeighbourhood:
    """Tube of radius ``radius`` (nu) around ``owner``.

    ``locality`` (lambda) is the along-manifold radius within which feet are
    searched on immersed owners; for embedded owners the radius must not
    exceed the discrete reach.
    """

    owner: EmbeddedManifold
    radius: float
    locality: float = None
    immersed: bool = False

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"tube radius must be positive, got {self.radius}")
        if self.locality is None:
            object.__setattr__(self, "locality", self.owner.default_locality())

    @classmethod
    def checked(cls, owner, radius, locality=None):
        """Build a tube, verifying ``radius <= discrete_reach(owner)``.

        Immersed owners are accepted with locality semantics instead.
        """
        try:
            reach = discrete_reach(owner, locality)
        except SelfIntersection:
            return cls(owner, radius, locality, immersed=True)
        if radius > reach * (1 + 1e-12):
            raise ValueError(f"tube radius {radius:.4g} exceeds discrete reach {reach:.4g}")
        return cls(owner, radius, locality)


def project_to_Q(m: EmbeddedManifold) -> EmbeddedManifold:
    """Drop the vertical coordinate currently being straightened.

    With one vertical factor the result lives in ``Q`` (split ``n = 0``);
    with several, the next factor becomes vertical.
    """
    split = m.split
    keep = [i for i in range(split.dim) if i != split.vertical_index]
    n = split.n - 1
    new = AmbientSplit(split.q, n, 0) if n > 0 else AmbientSplit(split.q, 0, 0)
    return EmbeddedManifold(
        positions=m.positions[:, keep], split=new, shape=m.shape, params=m.params,
        closed=m.closed, components=m.components, boundary_flags=m.boundary_flags,
        meta=dict(m.meta))


def embed_at_height(m: EmbeddedManifold, height=0.0, axis=None) -> EmbeddedManifold:
    """Inverse of :func:`project_to_Q`: insert a vertical coordinate."""
    split = m.split
    n = split.n + 1
    axis = 0 if axis is None else axis
    new = AmbientSplit(split.q, n, axis)
    idx = new.vertical_index
    h = np.broadcast_to(np.asarray(height, dtype=float), (m.n_samples,))
    pos = np.insert(m.positions, idx, h, axis=1)
    return EmbeddedManifold(
        positions=pos, split=new, shape=m.shape, params=m.params, closed=m.closed,
        components=m.components, boundary_flags=m.boundary_flags, meta=dict(m.meta))


def write_samples_csv(m: EmbeddedManifold, path):
    """One row per sample: parameter coordinates then position coordinates."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"p{k}" for k in range(m.dim)] + [f"x{k}" for k in range(m.split.dim)])
        for p, x in zip(m.params, m.positions):
            w.writerow([repr(float(v)) for v in p] + [repr(float(v)) for v in x])
