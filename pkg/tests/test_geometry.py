import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from filmhom.geometry import (
    AffinePlane,
    AmbiguousProjection,
    NotOnManifold,
    Sphere,
    Torus,
    manifold_from_dict,
    matrix_tangent_projection,
    nearest_point,
    tangent_frame,
)

E1, E2, E3 = np.eye(3)

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)
mat3 = st.lists(finite, min_size=9, max_size=9).map(lambda v: np.array(v).reshape(3, 3))

MANIFOLDS = [Sphere(1.0), Sphere(2.5), Torus(2.0, 1.0), AffinePlane((0, 0, 0), (0, 0, 1)),
             AffinePlane((1, -1, 2), (1, 2, 2))]


def point_on(M, v):
    """Some point of M determined by a free vector (avoids the ambiguity sets)."""
    if isinstance(M, Sphere):
        v = v if np.linalg.norm(v) > 1e-3 else E3
        return nearest_point(M, v)
    if isinstance(M, Torus):
        phi, theta = v[0], v[1]
        R, r = M.major_radius, M.minor_radius
        return np.array([(R + r * np.cos(theta)) * np.cos(phi), (R + r * np.cos(theta)) * np.sin(phi),
                         r * np.sin(theta)])
    return nearest_point(M, v)


def test_nearest_point_examples():
    assert np.allclose(nearest_point(Sphere(1), [0, 0, 2]), [0, 0, 1], atol=1e-12)
    assert np.allclose(nearest_point(AffinePlane((0, 0, 0), (0, 0, 1)), [1, 2, 5]), [1, 2, 0], atol=1e-12)
    assert np.allclose(nearest_point(Torus(2, 1), [4, 0, 0]), [3, 0, 0], atol=1e-12)


def test_ambiguous_points_raise():
    with pytest.raises(AmbiguousProjection):
        nearest_point(Sphere(1), [0, 0, 0])
    with pytest.raises(AmbiguousProjection):
        nearest_point(Torus(2, 1), [0, 0, 0.5])  # on the symmetry axis
    with pytest.raises(AmbiguousProjection):
        nearest_point(Torus(2, 1), [2, 0, 0])  # on the core circle


def test_invalid_descriptors():
    with pytest.raises(ValueError):
        Sphere(0.0)
    with pytest.raises(ValueError):
        Torus(1.0, 1.0)
    with pytest.raises(ValueError):
        AffinePlane((0, 0, 0), (0, 0, 0))


def test_tangent_frame_examples():
    assert np.allclose(tangent_frame(Sphere(1), [0, 0, 1]).proj, np.diag([1, 1, 0]), atol=1e-14)
    assert np.allclose(tangent_frame(AffinePlane((0, 0, 0), (0, 0, 1)), [3, -2, 0]).proj, np.diag([1, 1, 0]))
    assert np.allclose(tangent_frame(Torus(2, 1), [3, 0, 0]).proj, np.diag([0, 1, 1]), atol=1e-14)


def test_tangent_frame_off_manifold():
    with pytest.raises(NotOnManifold):
        tangent_frame(Sphere(1), [0, 0, 1.001])


def test_matrix_projection_examples():
    fr = tangent_frame(Sphere(1), [0, 0, 1])
    assert np.allclose(matrix_tangent_projection(fr, np.eye(3)), np.diag([1, 1, 0]))
    assert np.allclose(matrix_tangent_projection(fr, np.outer(E3, [1, 1, 1])), 0)
    xi = np.outer(E3, E1) + np.outer(E1, E2)
    assert np.allclose(matrix_tangent_projection(fr, xi), np.outer(E1, E2))


def test_manifold_dict_round_trip():
    for M in MANIFOLDS:
        assert manifold_from_dict(M.to_dict()) == M


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(MANIFOLDS), vec3, mat3)
def test_frame_invariants_and_projection_algebra(M, v, xi):
    s = point_on(M, v)
    fr = tangent_frame(M, s)
    P = fr.proj
    assert np.allclose(P, P.T, atol=1e-14)
    assert np.allclose(P @ P, P, atol=1e-12)
    assert abs(np.trace(P) - 2) < 1e-12
    assert np.allclose(fr.basis.T @ fr.basis, np.eye(2), atol=1e-12)
    assert np.abs(fr.basis.T @ M.normal(s)).max() < 1e-12
    once = matrix_tangent_projection(fr, xi)
    assert np.allclose(matrix_tangent_projection(fr, once), once, atol=1e-12)
    rest = xi - once
    assert abs(np.sum(xi ** 2) - np.sum(once ** 2) - np.sum(rest ** 2)) <= 1e-10 * max(1.0, np.sum(xi ** 2))


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(MANIFOLDS), vec3)
def test_nearest_point_fixes_manifold_points(M, v):
    s = point_on(M, v)
    assert np.allclose(nearest_point(M, s), s, atol=1e-12)
    assert abs(M.residual(s)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.sampled_from([Sphere(1.0), Sphere(2.5), MANIFOLDS[3], MANIFOLDS[4]]), vec3)
def test_projection_differential_is_tangent_projector(M, v):
    s = point_on(M, v)
    P = tangent_frame(M, s).proj
    h = 1e-6
    jac = np.stack([(nearest_point(M, s + h * e) - nearest_point(M, s - h * e)) / (2 * h) for e in np.eye(3)],
                   axis=1)
    assert np.abs(jac - P).max() < 1e-5
    assert np.allclose(M.projection_jacobian(s), P, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(vec3, st.floats(0.2, 0.9))
def test_sphere_projection_is_nearest_among_samples(v, scale):
    M = Sphere(1.0)
    x = (v if np.linalg.norm(v) > 1e-2 else E1) * scale
    s = nearest_point(M, x)
    rng = np.random.default_rng(0)
    samples = M.project(rng.standard_normal((200, 3)))
    assert np.linalg.norm(x - s) <= np.linalg.norm(x - samples, axis=1).min() + 1e-12


def test_torus_projection_is_nearest_among_samples():
    M = Torus(2.0, 1.0)
    rng = np.random.default_rng(1)
    ang = rng.uniform(0, 2 * np.pi, (4000, 2))
    samples = np.stack([(2 + np.cos(ang[:, 1])) * np.cos(ang[:, 0]), (2 + np.cos(ang[:, 1])) * np.sin(ang[:, 0]),
                        np.sin(ang[:, 1])], axis=1)
    for x in ([3.5, 0.3, 0.2], [1.2, -1.0, 0.4], [0.5, 2.2, -0.7]):
        s = nearest_point(M, x)
        assert abs(M.residual(s)) < 1e-12
        assert np.linalg.norm(np.subtract(x, s)) <= np.linalg.norm(x - samples, axis=1).min() + 1e-12
