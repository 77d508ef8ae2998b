import numpy as np
import pytest

from endonav.colon import (BEND_RADIUS_MM, ComplexitySpec, GenerationError,
                           closest_station, complexity_of, generate,
                           generate_preset, load_model, load_preset,
                           model_from_centerline, save_model)

from oracles import brute_force_nearest, turning_angle_runs


def arc_points(radius, angle_deg, n=80):
    """Analytic planar elbow: straight, arc, straight (in the xy plane)."""
    pre = np.stack([np.linspace(-200, 0, 40), np.zeros(40), np.zeros(40)], axis=1)
    theta = np.radians(np.linspace(0, angle_deg, n))
    arc = np.stack([radius * np.sin(theta), radius * (1 - np.cos(theta)),
                    np.zeros(n)], axis=1)
    d = np.array([np.cos(np.radians(angle_deg)), np.sin(np.radians(angle_deg)), 0.0])
    post = arc[-1] + d * np.linspace(0, 200, 40)[:, None]
    return np.vstack([pre[:-1], arc, post[1:]])


def test_straight_tube_complexity():
    pts = np.stack([np.linspace(0, 1000, 101), np.zeros(101), np.zeros(101)], axis=1)
    model = model_from_centerline(pts)
    c = complexity_of(model)
    assert c["centerline_length_mm"] == pytest.approx(1000.0)
    assert c["acute_bend_count"] == 0


def test_single_120_degree_elbow_counts_once():
    model = model_from_centerline(arc_points(BEND_RADIUS_MM, 120))
    c = complexity_of(model)
    expected_len = 400.0 + BEND_RADIUS_MM * np.radians(120)
    assert c["centerline_length_mm"] == pytest.approx(expected_len, rel=0.01)
    assert c["acute_bend_count"] == 1


def test_u_shaped_double_back_counts_two():
    # two 120-degree elbows separated by a straight leg
    a = arc_points(BEND_RADIUS_MM, 120)
    d = a[-1] - a[-2]
    d /= np.linalg.norm(d)
    theta = np.radians(np.linspace(0, 120, 80))
    # second elbow turning further the same way, offset to continue the path
    up = np.array([0.0, 0.0, 1.0])
    side = np.cross(up, d)
    arc2 = a[-1] + BEND_RADIUS_MM * (np.sin(theta)[:, None] * d
                                     + (1 - np.cos(theta))[:, None] * side)
    d2 = np.cos(theta[-1]) * d + np.sin(theta[-1]) * side
    post = arc2[-1] + d2 * np.linspace(0, 200, 40)[:, None]
    model = model_from_centerline(np.vstack([a, arc2[1:], post[1:]]))
    assert complexity_of(model)["acute_bend_count"] == 2


def test_gentle_bend_does_not_count():
    # 110-degree turn at 150 mm radius: turning in any 50 mm window ~19 deg
    model = model_from_centerline(arc_points(150.0, 110, n=200))
    assert complexity_of(model)["acute_bend_count"] == 0


def test_complexity_matches_turning_oracle_on_presets():
    for name in ("c0", "c1", "c2", "c3"):
        model = generate_preset(name)
        oracle = turning_angle_runs(model.centerline.points,
                                    model.centerline.cumulative_arclength)
        assert model.complexity["acute_bend_count"] == oracle


def test_preset_complexity_monotone():
    counts = {}
    lengths = {}
    for name in ("c0", "c1", "c2", "c3"):
        m = generate_preset(name)
        counts[name] = m.complexity["acute_bend_count"]
        lengths[name] = m.complexity["centerline_length_mm"]
    assert counts["c0"] == 0
    assert counts["c0"] <= counts["c1"] <= counts["c2"]
    assert (counts["c3"], lengths["c3"]) != (counts["c2"], lengths["c2"])


def test_generation_deterministic():
    spec = load_preset("c2")
    a = generate(spec)
    b = generate(spec)
    assert np.array_equal(a.centerline.points, b.centerline.points)
    assert np.array_equal(a.radius_profile, b.radius_profile)
    assert np.array_equal(a.normals, b.normals)


def test_length_within_tolerance():
    for name in ("c0", "c1", "c2", "c3"):
        spec = load_preset(name)
        model = generate(spec)
        assert abs(model.centerline.length_mm - spec.length_mm) \
            <= 0.05 * spec.length_mm


def test_requested_bends_are_generated():
    spec = ComplexitySpec("custom", 4, (110, 110), 1500, seed=99)
    model = generate(spec)
    assert model.complexity["acute_bend_count"] == 4


def test_rejects_overcrowded_spec():
    with pytest.raises(GenerationError):
        generate(ComplexitySpec("bad", 6, (110, 120), 400, seed=1))


def test_radii_exceed_endoscope_radius():
    for name in ("c0", "c3"):
        model = generate_preset(name)
        assert (model.radius_profile > 7.0).all()
        assert (np.abs(model.radius_profile - 25.0) <= 25.0 * 0.2 + 1e-9).all()


def test_ring_vertices_rest_radius():
    model = generate_preset("c1")
    for i in (0, model.n_stations // 2, model.n_stations - 1):
        ring = model.ring_vertices(i)
        r = np.linalg.norm(ring - model.centerline.points[i], axis=1)
        assert r == pytest.approx(model.radius_profile[i], abs=1e-9)
        assert ring.shape == (model.ring_count, 3)


def test_closest_station_on_centerline():
    model = generate_preset("c0")
    p = model.centerline.points[37]
    hit = closest_station(model, p)
    assert hit.index == 37
    assert hit.radial_offset_mm == pytest.approx(0.0, abs=1e-12)


def test_closest_station_at_wall():
    model = model_from_centerline(
        np.stack([np.linspace(0, 1000, 101), np.zeros(101), np.zeros(101)], axis=1),
        radius=25.0)
    p = model.centerline.points[50] + np.array([0.0, 25.0, 0.0])
    hit = closest_station(model, p)
    assert hit.radial_offset_mm == pytest.approx(25.0)


def test_closest_station_matches_brute_force():
    model = generate_preset("c2")
    rng = np.random.default_rng(4)
    for _ in range(50):
        p = rng.uniform(-300, 1500, size=3)
        hit = closest_station(model, p)
        i, d = brute_force_nearest(model.centerline.points, p)
        assert hit.index == i
        assert hit.radial_offset_mm == pytest.approx(d)


def test_closest_station_rejects_nonfinite():
    model = generate_preset("c0")
    with pytest.raises(ValueError):
        closest_station(model, np.array([np.nan, 0, 0]))


def test_save_load_roundtrip(tmp_path):
    model = generate_preset("c1")
    path = tmp_path / "c1.colon"
    save_model(model, path)
    back = load_model(path)
    assert np.array_equal(back.centerline.points, model.centerline.points)
    assert np.array_equal(back.radius_profile, model.radius_profile)
    assert np.array_equal(back.normals, model.normals)
    assert back.complexity == model.complexity
    assert back.name == model.name


def test_load_rejects_garbage(tmp_path):
    path = tmp_path / "junk.colon"
    path.write_bytes(b"not a model")
    with pytest.raises(ValueError):
        load_model(path)


def test_arclength_strictly_increasing():
    for name in ("c0", "c2"):
        model = generate_preset(name)
        s = model.centerline.cumulative_arclength
        assert s[0] == 0.0
        assert (np.diff(s) > 0).all()
