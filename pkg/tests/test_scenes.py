import math
from pathlib import Path

import numpy as np
import pytest

from straighten.errors import SchemaError
from straighten.geometry import estimate_tangent_frame
from straighten.scenes import (CONFIG_KEYS, GENERATORS, builtin, load_scene, multi_twist_fields,
                               parse_scene, twist_angle, upmost)

SCENES = Path(__file__).resolve().parents[1] / "scenes"
BUILTINS = ["twist", "line", "circle", "helix", "grid_plane", "figure_eight", "whitney",
            "two_in_four", "multi_circle"]


@pytest.mark.parametrize("name", BUILTINS)
def test_builtin_fields_are_unit_normals(name):
    s = builtin(name)
    m, f = s.manifold, s.frame
    assert f.vectors.shape[0] == m.n_samples and f.vectors.shape[-1] == m.split.dim
    T = estimate_tangent_frame(m)
    for k in range(f.k):
        v = f.field(k)
        assert np.allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-12)
        assert np.abs(T.project(v)).max() < 1e-9


def test_unknown_builtin():
    with pytest.raises(SchemaError):
        builtin("moebius")


def test_twist_scene_shape():
    s = builtin("twist")
    m = s.manifold
    assert m.n_samples == 400 and m.split.q == 2
    d = m.positions[-1] - m.positions[0]
    assert math.atan2(d[2], np.linalg.norm(d[:2])) == pytest.approx(0.6, abs=1e-12)
    support = np.asarray(s.meta["support"])
    # outside the support the field is the upmost normal
    assert np.allclose(s.frame.field(0)[~support], upmost(m)[~support], atol=1e-12)
    assert s.overrides["epsilon_budget"] == pytest.approx(0.3 * s.meta["support_width"])


def test_twist_angle_one_turn():
    assert twist_angle(-0.5) == 0.0 and twist_angle(0.5) == pytest.approx(2 * np.pi)
    assert twist_angle(0.0) == pytest.approx(np.pi)


def test_multi_twist_fields_orthonormal():
    m = builtin("multi_circle").manifold
    f = multi_twist_fields(m).vectors
    G = np.einsum("nid,njd->nij", f, f)
    assert np.allclose(G, np.eye(2), atol=1e-12)


@pytest.mark.parametrize("path", sorted(SCENES.glob("*.yaml")), ids=lambda p: p.stem)
def test_shipped_scene_files_load(path):
    s = load_scene(path)
    assert s.frame.vectors.shape[0] == s.manifold.n_samples
    assert set(s.overrides) <= CONFIG_KEYS


def test_explicit_samples_and_field():
    text = """
format: straighten-scene/1
name: seg
samples: [[0, 0], [1, 0.5], [2, 1.0]]
split: {q: 1}
field: [[-0.4472135955, 0.894427191], [-0.4472135955, 0.894427191], [-0.4472135955, 0.894427191]]
boundary: [0, 2]
config: {mu: 0.1}
"""
    s = parse_scene(text)
    assert s.name == "seg" and s.manifold.n_samples == 3
    assert s.manifold.boundary_flags.tolist() == [True, False, True]
    assert s.overrides == {"mu": 0.1}


def test_generator_with_field_generator():
    s = parse_scene("generator: line\nparams: {n: 11, slope: 0.2}\nfield: {generator: slope_normal}\n")
    assert s.manifold.n_samples == 11


def test_relative_outside_support():
    s = parse_scene("builtin: twist\nrelative: outside_support\n")
    assert np.array_equal(s.relative, ~np.asarray(s.meta["support"]))
    s = parse_scene("builtin: line\nrelative: [0, 1]\n")
    assert s.relative.sum() == 2


def _line_of(exc):
    return str(exc.value).split(":")[1]


@pytest.mark.parametrize("text,line,field", [
    ("builtin: twist\nbogus: 1\n", "2", "bogus"),
    ("builtin: twist\nconfig:\n  mu: 0.1\n  colour: red\n", "4", "colour"),
    ("builtin: twist\nconfig:\n  mu: fast\n", "3", "mu"),
    ("builtin: twist\nconfig:\n  mode: sideways\n", "3", "mode"),
    ("format: straighten-scene/9\nbuiltin: twist\n", "1", "format"),
    ("generator: spiral\n", "1", "generator"),
    ("generator: line\nparams: {n: 5, wiggle: 2}\nfield: {generator: slope_normal}\n", "2", "params"),
    ("samples: [[0, 0], [1, 1]]\nfield: [[0, 1], [0, 1]]\n", None, "split"),
    ("samples: [[0, 0], [1, 1]]\nsplit: {q: 1}\nfield: [[0, 1]]\n", "3", "field"),
    ("builtin: line\nrelative: outside_support\n", "2", "relative"),
])
def test_schema_errors_name_line_and_field(text, line, field):
    with pytest.raises(SchemaError) as exc:
        parse_scene(text, "s.yaml")
    msg = str(exc.value)
    assert f"'{field}'" in msg
    if line is not None:
        assert msg.startswith(f"s.yaml:{line}:")


def test_yaml_syntax_error_has_line():
    with pytest.raises(SchemaError, match=r"s.yaml:3: YAML syntax error"):
        parse_scene("builtin: twist\nconfig:\n  mu: a: b\n", "s.yaml")


def test_missing_field_and_source():
    with pytest.raises(SchemaError, match="required"):
        parse_scene("name: nothing\n")
    with pytest.raises(SchemaError, match="field"):
        parse_scene("generator: line\n")
    with pytest.raises(SchemaError, match="cannot read"):
        load_scene("/nonexistent/scene.yaml")


def test_generators_registry_matches_builtins():
    assert set(GENERATORS) >= set(BUILTINS) - {"twist"}
