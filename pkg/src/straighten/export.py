"""Frame exports: SVG orthographic views of curves, OBJ meshes of surfaces,
CSV sample dumps.

Views are orthographic.  A camera maps ambient points to the plane (SVG) or
to three dimensions (OBJ) through the first two ``Q`` axes and the vertical
axis currently being straightened; further coordinates are ignored.
"""

from __future__ import annotations

import csv
import math
import os
import xml.etree.ElementTree as ET

import numpy as np

from .geometry import EmbeddedManifold

SVG_NS = "http://www.w3.org/2000/svg"

# (azimuth, elevation) in degrees
CAMERAS = {
    "top": (0.0, 90.0),
    "side": (0.0, 0.0),
    "oblique": (-35.0, 30.0),
}


def scene_axes(m: EmbeddedManifold):
    """Ambient indices shown as (x, y, z): two Q axes and the vertical."""
    q = m.split.q
    y = 1 if q >= 2 else None
    z = m.split.vertical_index if m.split.n else (2 if q >= 3 else None)
    return 0, y, z


def to_3d(m: EmbeddedManifold, positions=None):
    """Positions in the (Q0, Q1, vertical) frame; missing axes are zero."""
    x = m.positions if positions is None else np.asarray(positions)
    out = np.zeros((len(x), 3))
    for k, idx in enumerate(scene_axes(m)):
        if idx is not None:
            out[:, k] = x[:, idx]
    return out


def camera_matrix(view="top"):
    """2 x 3 orthographic projection for a named preset or (azimuth, elevation)."""
    az, el = CAMERAS[view] if isinstance(view, str) else view
    a, e = math.radians(az), math.radians(el)
    right = np.array([math.cos(a), math.sin(a), 0.0])
    up = np.array([-math.sin(e) * math.sin(a), math.sin(e) * math.cos(a), math.cos(e)])
    return np.stack([right, up])


def _fmt(v):
    return f"{v:.6g}"


def write_svg(m: EmbeddedManifold, path, positions=None, view="top", size=480, margin=16,
              bounds=None, title=None):
    """SVG 1.1 drawing of a curve (one polyline per component).

    ``bounds`` ``(xmin, ymin, xmax, ymax)`` fixes the viewport in projected
    coordinates so a sequence of snapshots shares one frame.
    """
    if m.dim != 1:
        raise ValueError("SVG export draws curves only")
    P = to_3d(m, positions) @ camera_matrix(view).T
    if bounds is None:
        bounds = (*P.min(axis=0), *P.max(axis=0))
    x0, y0, x1, y1 = bounds
    scale = (size - 2 * margin) / max(x1 - x0, y1 - y0, 1e-12)
    px = margin + (P[:, 0] - x0) * scale
    py = size - margin - (P[:, 1] - y0) * scale
    root = ET.Element("svg", {
        "xmlns": SVG_NS, "version": "1.1", "width": str(size), "height": str(size),
        "viewBox": f"0 0 {size} {size}"})
    if title:
        ET.SubElement(root, "title").text = title
    g = ET.SubElement(root, "g", {"fill": "none", "stroke": "black", "stroke-width": "1.5"})
    for c in np.unique(m.components):
        idx = np.flatnonzero(m.components == c)
        pts = " ".join(f"{_fmt(px[i])},{_fmt(py[i])}" for i in idx)
        ET.SubElement(g, "polygon" if m.closed else "polyline", {"points": pts})
    ET.ElementTree(root).write(path, encoding="utf-8", xml_declaration=True)


def write_obj(m: EmbeddedManifold, path, positions=None):
    """Wavefront OBJ triangle mesh of a grid surface."""
    if m.dim != 2 or m.shape is None:
        raise ValueError("OBJ export needs a grid surface")
    X = to_3d(m, positions)
    nu, nv = m.shape
    with open(path, "w") as fh:
        for p in X:
            fh.write("v " + " ".join(repr(float(c)) for c in p) + "\n")
        for i in range(nu - 1):
            for j in range(nv - 1):
                a = i * nv + j + 1
                b, c, d = a + 1, a + nv, a + nv + 1
                fh.write(f"f {a} {c} {d}\nf {a} {d} {b}\n")


def write_frame_csv(m: EmbeddedManifold, path, positions, frame):
    """One row per sample: parameters, position and carried vector."""
    D = m.split.dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"p{k}" for k in range(m.dim)] + [f"x{k}" for k in range(D)]
                   + [f"f{k}" for k in range(D)])
        for p, x, f in zip(m.params, positions, frame):
            w.writerow([repr(float(v)) for v in (*p, *x, *f)])


def export_frames(trace, out_dir, view="top"):
    """Write one SVG (curves) or OBJ (surfaces) per recorded snapshot.

    Returns the list of written paths.
    """
    m = trace.template
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    if m.dim == 1:
        P = np.concatenate([to_3d(m, x) for x in trace.positions]) @ camera_matrix(view).T
        bounds = (*P.min(axis=0), *P.max(axis=0))
        for i, (t, x) in enumerate(zip(trace.times, trace.positions)):
            p = os.path.join(out_dir, f"frame_{i:05d}.svg")
            write_svg(m, p, x, view, bounds=bounds, title=f"t = {t:.6g}")
            paths.append(p)
    elif m.shape is not None:
        for i, x in enumerate(trace.positions):
            p = os.path.join(out_dir, f"frame_{i:05d}.obj")
            write_obj(m, p, x)
            paths.append(p)
    return paths


__all__ = ["CAMERAS", "camera_matrix", "export_frames", "scene_axes", "to_3d", "write_frame_csv",
           "write_obj", "write_svg"]
