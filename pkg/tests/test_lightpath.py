import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from refrax.geometry import Medium, MediumMap, make_box, make_nested_spheres, make_sphere
from refrax.lightpath import (MAX_BENDS, PASS, REFRACTION, TIR, InterfaceEvent, OpticsError,
                              PiecewisePath, Scene, fresnel, fresnel_reflectance, path_point,
                              refract_directions, refract_or_tir, straight_paths, trace_paths,
                              trace_refraction_path, trace_reflection_path)

UP = np.array([0.0, 0.0, 1.0])


def incoming(theta):
    """Direction hitting the plane z = 0 from above at incidence ``theta``."""
    return np.array([math.sin(theta), 0.0, -math.cos(theta)])


def snell_by_angles(d, n, n1, n2):
    """Transmitted direction built from sines and cosines in the plane of incidence."""
    cos_i = -float(d @ n)
    tangent = d + cos_i * n
    norm = np.linalg.norm(tangent)
    if norm < 1e-15:
        return d.copy()
    sin_t = n1 / n2 * math.sqrt(max(0.0, 1 - cos_i * cos_i))
    return sin_t * tangent / norm - math.sqrt(1 - sin_t * sin_t) * n


def sphere_exit(b, radius, ior):
    """Closed-form exit direction of a ray along +z with impact parameter ``b`` (in x)."""
    ti = math.asin(b / radius)
    tt = math.asin(b / radius / ior)
    dev = 2.0 * (ti - tt)
    return np.array([-math.sin(dev), 0.0, math.cos(dev)])


def angle_deg(a, b):
    return math.degrees(math.acos(min(1.0, max(-1.0, float(a @ b)))))


# -- single interface events --------------------------------------------------

def test_normal_incidence_unchanged():
    ev = InterfaceEvent([0, 0, 0], -UP, UP, 1.0, 1.7)
    d, kind = refract_or_tir(ev)
    assert kind == REFRACTION
    assert np.allclose(d, -UP, atol=1e-15)


def test_snell_45_to_30():
    ev = InterfaceEvent([0, 0, 0], incoming(math.pi / 4), UP, 1.0, math.sqrt(2))
    d, kind = refract_or_tir(ev)
    assert kind == REFRACTION
    assert abs(d[0] - 0.5) < 1e-9  # sin of the transmitted angle
    assert abs(math.degrees(math.asin(d[0])) - 30.0) < 1e-9
    assert abs(np.linalg.norm(d) - 1) < 1e-9


def test_tir_at_45_from_glass():
    d_in = incoming(math.pi / 4)
    d, kind = refract_or_tir(InterfaceEvent([0, 0, 0], d_in, UP, 1.5, 1.0))
    assert kind == TIR
    assert np.allclose(d, [d_in[0], 0, -d_in[2]], atol=1e-15)


def test_tir_onset_at_critical_angle():
    crit = math.asin(1 / 1.5)
    below = refract_or_tir(InterfaceEvent([0, 0, 0], incoming(crit - 1e-9), UP, 1.5, 1.0))[1]
    above = refract_or_tir(InterfaceEvent([0, 0, 0], incoming(crit + 1e-9), UP, 1.5, 1.0))[1]
    assert (below, above) == (REFRACTION, TIR)


def test_event_validation():
    with pytest.raises(OpticsError):
        InterfaceEvent([0, 0, 0], [0, 0, -2.0], UP, 1.0, 1.5)
    with pytest.raises(OpticsError):
        InterfaceEvent([0, 0, 0], UP, UP, 1.0, 1.5)  # normal not facing the ray
    with pytest.raises(OpticsError):
        InterfaceEvent([0, 0, 0], -UP, UP, 0.0, 1.5)


def test_fresnel_normal_incidence():
    f = fresnel(InterfaceEvent([0, 0, 0], -UP, UP, 1.0, 1.5))
    assert abs(f.r_p - 0.04) < 1e-12
    assert abs(f.r_s - 0.04) < 1e-12
    assert abs(f.r - 0.04) < 1e-12


def test_fresnel_index_matched_is_zero():
    for theta in np.linspace(0, 1.5, 20):
        assert fresnel(InterfaceEvent([0, 0, 0], incoming(theta), UP, 1.3, 1.3)).r < 1e-24


def test_fresnel_rejects_tir():
    with pytest.raises(OpticsError):
        fresnel(InterfaceEvent([0, 0, 0], incoming(math.pi / 4), UP, 1.5, 1.0))


def test_fresnel_tends_to_one_at_critical_angle():
    crit = math.asin(1 / 1.5)
    thetas = crit - np.geomspace(0.3, 1e-15, 200)
    r = [fresnel(InterfaceEvent([0, 0, 0], incoming(t), UP, 1.5, 1.0)).r for t in thetas]
    assert np.all(np.diff(r) > -1e-15)
    assert abs(r[-1] - 1.0) < 1e-6


def random_events(rng, n):
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    flip = np.sum(d * nrm, axis=1) > 0
    d[flip] *= -1
    n1 = rng.uniform(1.0, 2.5, n)
    n2 = rng.uniform(1.0, 2.5, n)
    return d, nrm, n1, n2


def test_refraction_properties_on_random_events(rng):
    d, nrm, n1, n2 = random_events(rng, 100_000)
    out, tir = refract_directions(d, nrm, n1 / n2)
    assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)
    ok = ~tir & (np.abs(np.sum(d * nrm, axis=1)) > 1e-3)

    def tangential(v):
        return v - np.sum(v * nrm, axis=1, keepdims=True) * nrm

    lhs = n1[ok, None] * tangential(d)[ok]
    rhs = n2[ok, None] * tangential(out)[ok]
    assert np.max(np.abs(lhs - rhs)) < 1e-9

    # reversibility: going back through the interface retraces the ray
    back, back_tir = refract_directions(-out[ok], -nrm[ok], n2[ok] / n1[ok])
    assert not back_tir.any()
    assert np.max(np.abs(back + d[ok])) < 1e-6

    # TIR keeps the tangential part and flips the normal part exactly
    if tir.any():
        assert np.allclose(tangential(out)[tir], tangential(d)[tir], atol=1e-12)
        dn_in = np.sum(d[tir] * nrm[tir], axis=1)
        dn_out = np.sum(out[tir] * nrm[tir], axis=1)
        assert np.allclose(dn_out, -dn_in, atol=1e-12)

    beta = -np.sum(d * nrm, axis=1)
    a = n1 / n2
    g2 = 1 - a ** 2 * (1 - beta ** 2)
    sel = g2 >= 0
    rp, rs = fresnel_reflectance(beta[sel], np.sqrt(g2[sel]), n1[sel], n2[sel])
    r = 0.5 * (rp + rs)
    assert np.all((r >= 0) & (r <= 1))


def test_vector_snell_matches_angle_form(rng):
    d, nrm, n1, n2 = random_events(rng, 500)
    out, tir = refract_directions(d, nrm, n1 / n2)
    for k in np.nonzero(~tir)[0]:
        assert np.allclose(out[k], snell_by_angles(d[k], nrm[k], n1[k], n2[k]), atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.55), st.floats(1.0, 2.5), st.floats(1.0, 2.5))
def test_refraction_stays_in_plane_of_incidence(theta, n1, n2):
    d = incoming(theta)
    out, _ = refract_directions(d, UP, np.float64(n1 / n2))
    assert abs(out[1]) < 1e-12
    assert abs(np.linalg.norm(out) - 1) < 1e-9


# -- whole paths ------------------------------------------------------------

@pytest.fixture(scope="module")
def unit_glass_ball():
    return Scene(make_sphere(1.0, 5), MediumMap({1: Medium(1.5)}))


def test_missing_ray_gives_straight_path(sphere_scene):
    p = trace_refraction_path(sphere_scene, [0, 0, -3.0], [0, 1.0, 0])
    assert p.bends == 0
    assert p.reflectance == 0.0
    assert np.array_equal(p.tau, [0.0, np.inf])
    r = trace_reflection_path(sphere_scene, [0, 0, -3.0], [0, 1.0, 0])
    assert r.bends == 0
    assert np.array_equal(r.vertices, p.vertices)


def test_central_ray_passes_straight(unit_glass_ball):
    p = trace_refraction_path(unit_glass_ball, [0, 0, -3.0], [0, 0, 1.0])
    assert p.bends == 2
    assert p.kinds == [REFRACTION, REFRACTION]
    assert np.allclose(p.directions[-1], [0, 0, 1], atol=1e-9)
    assert np.allclose(p.vertices[:, :2], 0, atol=1e-9)
    assert p.reflectance == pytest.approx(0.04, abs=1e-6)
    assert list(p.media) == [0, 1, 0]


def test_path_invariants(unit_glass_ball, rng):
    o = np.tile([0.0, 0.0, -3.0], (200, 1))
    d = np.c_[rng.uniform(-0.3, 0.3, (200, 2)), np.ones(200)]
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    batch = trace_paths(unit_glass_ball, o, d).refraction
    for i in range(len(batch)):
        p = batch.path(i)
        assert p.bends <= MAX_BENDS
        assert np.array_equal(p.vertices[0], o[i]) and np.array_equal(p.directions[0], d[i])
        assert np.allclose(np.linalg.norm(p.directions, axis=1), 1, atol=1e-9)
        seg = np.linalg.norm(np.diff(p.vertices, axis=0), axis=1)
        assert np.all(seg > 1e-4)
        assert np.allclose(p.tau[1:-1], np.cumsum(seg), rtol=0, atol=1e-6)
        assert np.all(np.diff(p.tau[:-1]) > 0) and p.tau[-1] == np.inf
        assert 0 <= p.reflectance <= 1


def test_sphere_lens_convergence():
    b = 0.3
    expect = sphere_exit(b, 1.0, 1.5)
    errors = []
    for level in range(2, 6):
        scene = Scene(make_sphere(1.0, level), MediumMap({1: Medium(1.5)}))
        p = trace_refraction_path(scene, [b, 0, -3.0], [0, 0, 1.0])
        assert p.bends == 2
        errors.append(angle_deg(p.directions[-1], expect))
    assert all(later < earlier for earlier, later in zip(errors, errors[1:]))
    assert errors[-1] < 0.5


def test_reflection_path_mirror():
    scene = Scene(make_box((2, 2, 2), center=(0, 0, -1)), MediumMap({1: Medium(1.5)}))
    d = np.array([math.sqrt(0.5), 0, -math.sqrt(0.5)])
    r = trace_reflection_path(scene, [-1.0, 0, 1.0], d)
    assert r.bends == 1
    assert np.allclose(r.vertices[1], [0, 0, 0], atol=1e-12)
    assert np.allclose(r.directions[1], [math.sqrt(0.5), 0, math.sqrt(0.5)], atol=1e-12)
    normal = trace_reflection_path(scene, [0.2, 0.1, 1.0], [0, 0, -1.0])
    assert np.allclose(normal.directions[1], [0, 0, 1], atol=1e-12)


def test_tir_inside_box(box_scene):
    # enter the top face steeply; the refracted ray meets a side wall beyond the critical angle
    d = np.array([0.8, 0.0, -0.6])
    p = trace_refraction_path(box_scene, [-0.5, 0, 0.7], d)
    assert TIR in p.kinds
    off = trace_refraction_path(Scene(box_scene.mesh, box_scene.media), [-0.5, 0, 0.7], d,
                                tir=False)
    assert TIR not in off.kinds and PASS in off.kinds


def test_bend_cap():
    scene = Scene(make_sphere(1.0, 3), MediumMap({1: Medium(1.5)}))
    p = trace_refraction_path(scene, [0.99, 0, -3.0], [0, 0, 1.0], max_bends=1)
    assert p.bends == 1
    assert p.tau[-1] == np.inf


def test_nested_media_stack():
    scene = Scene(make_nested_spheres(0.5, 0.3, 4), MediumMap({1: Medium(1.5), 2: Medium(1.33)}))
    p = trace_refraction_path(scene, [0, 0, -3.0], [0, 0, 1.0])
    assert list(p.media) == [0, 1, 2, 1, 0]


def test_path_point_conventions():
    path = PiecewisePath(np.array([[0.0, 0, 0], [0, 0, 2]]), np.array([[0.0, 0, 1], [1.0, 0, 0]]),
                         np.array([0.0, 2.0, np.inf]), np.array([0, 1]), [REFRACTION])
    x, d = path_point(path, 0.0)
    assert np.array_equal(x, [0, 0, 0]) and np.array_equal(d, [0, 0, 1])
    x, d = path_point(path, 2.0)
    assert np.array_equal(x, [0, 0, 2]) and np.array_equal(d, [1, 0, 0])
    with pytest.raises(OpticsError):
        path_point(path, -1.0)
    s = straight_paths(np.array([[1.0, 2, 3]]), np.array([[0.0, 1, 0]])).path(0)
    assert np.array_equal(s.point(5.0)[0], [1, 7, 3])
