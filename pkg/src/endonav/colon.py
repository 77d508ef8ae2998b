"""Procedural colon models: splined tube centerlines of graded complexity.

A model is a centerline sampled at ~10 mm stations, a per-station radius
profile (25 mm mean with sinusoidal haustral narrowing) and a ring of wall
vertices per station. "Acute bends" are tight elbows whose tangent turns
more than 90 degrees across a 50 mm arclength window; gentle large-radius
curvature never counts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Tuple

import numpy as np

STATION_SPACING_MM = 10.0
RING_VERTEX_COUNT = 32
MEAN_RADIUS_MM = 25.0
RADIUS_VARIATION = 0.2
HAUSTRA_WAVELENGTH_MM = 60.0
BEND_RADIUS_MM = 26.0          # tight elbow; >90 deg turn fits inside 50 mm
ENDOSCOPE_RADIUS_MM = 7.0
ACUTE_WINDOW_MM = 50.0
ACUTE_THRESHOLD_DEG = 90.0
MIN_STRAIGHT_MM = 150.0        # keeps elbows apart and the window rule clean
CLEARANCE_ARCLEN_MM = 180.0    # pairs further apart than this must not overlap
CLEARANCE_MARGIN_MM = 4.0

_FILE_MAGIC = b"ENDONAV-COLON v1\n"


class GenerationError(ValueError):
    """Raised when a spec cannot produce a self-intersection-free tube."""


@dataclass(frozen=True)
class ComplexitySpec:
    name: str
    n_bends: int
    bend_angle_range: Tuple[float, float]   # degrees, each > 90 to count as acute
    length_mm: float
    seed: int

    def __post_init__(self):
        if self.n_bends < 0 or self.length_mm <= 0:
            raise ValueError("invalid spec")
        lo, hi = self.bend_angle_range
        if self.n_bends > 0 and not (0 < lo <= hi):
            raise ValueError("bend_angle_range must be positive and ordered")


@dataclass
class Centerline:
    points: np.ndarray                  # (n, 3) mm
    cumulative_arclength: np.ndarray    # (n,) starting at 0, strictly increasing

    def __post_init__(self):
        if len(self.points) < 2:
            raise ValueError("centerline needs >= 2 points")

    @property
    def length_mm(self) -> float:
        return float(self.cumulative_arclength[-1])

    def tangents(self) -> np.ndarray:
        t = np.gradient(self.points, self.cumulative_arclength, axis=0)
        return t / np.linalg.norm(t, axis=1, keepdims=True)

    def point_at(self, s: float) -> np.ndarray:
        s = float(np.clip(s, 0.0, self.length_mm))
        i = int(np.searchsorted(self.cumulative_arclength, s, side="right")) - 1
        i = max(0, min(i, len(self.points) - 2))
        seg = self.cumulative_arclength[i + 1] - self.cumulative_arclength[i]
        t = (s - self.cumulative_arclength[i]) / seg
        return self.points[i] * (1 - t) + self.points[i + 1] * t

    def tangent_at(self, s: float, eps: float = 2.0) -> np.ndarray:
        a = self.point_at(max(0.0, s - eps))
        b = self.point_at(min(self.length_mm, s + eps))
        v = b - a
        return v / np.linalg.norm(v)


@dataclass
class ColonModel:
    centerline: Centerline
    radius_profile: np.ndarray          # (n,) mm, rest radius per station
    normals: np.ndarray                 # (n, 3) parallel-transport frame
    binormals: np.ndarray               # (n, 3)
    complexity: dict                    # {"centerline_length_mm", "acute_bend_count"}
    name: str = "unnamed"
    seed: int = 0
    ring_count: int = RING_VERTEX_COUNT
    spec: dict = field(default_factory=dict)

    @property
    def n_stations(self) -> int:
        return len(self.radius_profile)

    def ring_vertices(self, i: int) -> np.ndarray:
        """Rest positions of the K wall vertices of station i, (K, 3)."""
        theta = np.linspace(0, 2 * np.pi, self.ring_count, endpoint=False)
        ring = (np.cos(theta)[:, None] * self.normals[i]
                + np.sin(theta)[:, None] * self.binormals[i])
        return self.centerline.points[i] + self.radius_profile[i] * ring


@dataclass(frozen=True)
class ClosestStation:
    index: int
    arclength_mm: float
    radial_offset_mm: float


# ---------------------------------------------------------------------------
# generation

def generate(spec: ComplexitySpec, max_attempts: int = 50) -> ColonModel:
    """Deterministically grow a tube for the spec; first clearance-passing
    layout from the seeded stream wins."""
    arc_total = spec.n_bends * BEND_RADIUS_MM * np.radians(spec.bend_angle_range[1])
    if spec.length_mm - arc_total < MIN_STRAIGHT_MM * (spec.n_bends + 1):
        raise GenerationError(
            f"{spec.name}: {spec.n_bends} bends do not fit in {spec.length_mm} mm")

    rng = np.random.default_rng(spec.seed)
    for _ in range(max_attempts):
        skeleton = _sample_skeleton(spec, rng)
        points, arclen = _spline_and_resample(skeleton)
        radii = _radius_profile(arclen, rng)
        if _clearance_ok(points, arclen, radii):
            centerline = Centerline(points, arclen)
            normals, binormals = _transport_frames(centerline)
            model = ColonModel(
                centerline=centerline, radius_profile=radii,
                normals=normals, binormals=binormals, complexity={},
                name=spec.name, seed=spec.seed,
                spec={"name": spec.name, "n_bends": spec.n_bends,
                      "bend_angle_range": list(spec.bend_angle_range),
                      "length_mm": spec.length_mm, "seed": spec.seed})
            model.complexity = complexity_of(model)
            _check_invariants(model, spec)
            return model
    raise GenerationError(f"{spec.name}: no layout passed the tube clearance "
                          f"check in {max_attempts} attempts")


def _sample_skeleton(spec: ComplexitySpec, rng) -> np.ndarray:
    """Straights joined by tight circular elbows, sampled every ~2 mm."""
    angles = rng.uniform(*spec.bend_angle_range, size=max(spec.n_bends, 1))
    arc_lens = BEND_RADIUS_MM * np.radians(angles)
    straight_total = spec.length_mm - (arc_lens.sum() if spec.n_bends else 0.0)
    weights = 1.0 + 0.3 * rng.random(spec.n_bends + 1)
    straights = straight_total * weights / weights.sum()

    azimuth = rng.uniform(0, 2 * np.pi)
    pos = np.zeros(3)
    d = np.array([1.0, 0.0, 0.0])
    up = np.array([0.0, 0.0, 1.0])
    pts = [pos.copy()]

    def emit_straight(length):
        nonlocal pos
        n = max(2, int(length / 2.0))
        for t in np.linspace(0, 1, n + 1)[1:]:
            pts.append(pos + d * length * t)
        pos = pts[-1].copy()

    emit_straight(straights[0])
    for k in range(spec.n_bends):
        azimuth += rng.uniform(np.pi / 2, 3 * np.pi / 2)
        side = _perp(d, up, azimuth)
        theta = np.radians(angles[k])
        n = max(4, int(arc_lens[k] / 2.0))
        base = pos.copy()
        d0 = d.copy()
        for phi in np.linspace(0, theta, n + 1)[1:]:
            pts.append(base + BEND_RADIUS_MM * (np.sin(phi) * d0
                                                + (1 - np.cos(phi)) * side))
        d = np.cos(theta) * d0 + np.sin(theta) * side
        pos = pts[-1].copy()
        emit_straight(straights[k + 1])
    return np.asarray(pts)


def _perp(d, up, azimuth):
    a = np.cross(d, up)
    if np.linalg.norm(a) < 1e-9:
        a = np.cross(d, np.array([0.0, 1.0, 0.0]))
    a /= np.linalg.norm(a)
    b = np.cross(d, a)
    return np.cos(azimuth) * a + np.sin(azimuth) * b


def _spline_and_resample(skeleton: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Catmull-Rom through control points every ~15 mm, then uniform
    arclength stations at ~STATION_SPACING."""
    chord = np.linalg.norm(np.diff(skeleton, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(chord)])
    ctrl_s = np.arange(0.0, s[-1], 15.0)
    ctrl_s = np.append(ctrl_s, s[-1])
    ctrl = np.stack([np.interp(ctrl_s, s, skeleton[:, k]) for k in range(3)], axis=1)

    dense = _catmull_rom(ctrl, samples_per_span=8)
    chord = np.linalg.norm(np.diff(dense, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(chord)])
    n_stations = int(round(s[-1] / STATION_SPACING_MM)) + 1
    targets = np.linspace(0.0, s[-1], n_stations)
    points = np.stack([np.interp(targets, s, dense[:, k]) for k in range(3)], axis=1)
    chord = np.linalg.norm(np.diff(points, axis=0), axis=1)
    arclen = np.concatenate([[0.0], np.cumsum(chord)])
    return points, arclen


def _catmull_rom(ctrl: np.ndarray, samples_per_span: int) -> np.ndarray:
    n = len(ctrl)
    tang = np.empty_like(ctrl)
    tang[1:-1] = (ctrl[2:] - ctrl[:-2]) / 2.0
    tang[0] = ctrl[1] - ctrl[0]
    tang[-1] = ctrl[-1] - ctrl[-2]
    out = [ctrl[0]]
    ts = np.linspace(0, 1, samples_per_span + 1)[1:]
    for i in range(n - 1):
        p0, p1, m0, m1 = ctrl[i], ctrl[i + 1], tang[i], tang[i + 1]
        for t in ts:
            h00 = 2 * t**3 - 3 * t**2 + 1
            h10 = t**3 - 2 * t**2 + t
            h01 = -2 * t**3 + 3 * t**2
            h11 = t**3 - t**2
            out.append(h00 * p0 + h10 * m0 + h01 * p1 + h11 * m1)
    return np.asarray(out)


def _radius_profile(arclen: np.ndarray, rng) -> np.ndarray:
    phase = rng.uniform(0, 2 * np.pi)
    return MEAN_RADIUS_MM * (1.0 + RADIUS_VARIATION
                             * np.sin(2 * np.pi * arclen / HAUSTRA_WAVELENGTH_MM + phase))


def _clearance_ok(points, arclen, radii) -> bool:
    """Stations far apart along the tube must not overlap in space."""
    n = len(points)
    d2 = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=2)
    ds = np.abs(arclen[:, None] - arclen[None, :])
    need = radii[:, None] + radii[None, :] + CLEARANCE_MARGIN_MM
    bad = (ds >= CLEARANCE_ARCLEN_MM) & (d2 < need)
    return not bad.any() and n >= 2


def _transport_frames(cl: Centerline):
    t = cl.tangents()
    n = len(t)
    normals = np.empty((n, 3))
    ref = np.array([0.0, 0.0, 1.0])
    if abs(np.dot(ref, t[0])) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    normals[0] = ref - np.dot(ref, t[0]) * t[0]
    normals[0] /= np.linalg.norm(normals[0])
    for i in range(1, n):
        v = normals[i - 1] - np.dot(normals[i - 1], t[i]) * t[i]
        norm = np.linalg.norm(v)
        if norm < 1e-12:     # pathological kink; restart from reference
            v = ref - np.dot(ref, t[i]) * t[i]
            norm = np.linalg.norm(v)
        normals[i] = v / norm
    binormals = np.cross(t, normals)
    binormals /= np.linalg.norm(binormals, axis=1, keepdims=True)
    return normals, binormals


def _check_invariants(model: ColonModel, spec: ComplexitySpec):
    if (model.radius_profile <= ENDOSCOPE_RADIUS_MM).any():
        raise GenerationError("radius profile dips below endoscope radius")
    length = model.centerline.length_mm
    if abs(length - spec.length_mm) > 0.05 * spec.length_mm:
        raise GenerationError(f"generated length {length:.0f} outside +-5% "
                              f"of target {spec.length_mm:.0f}")
    got = model.complexity["acute_bend_count"]
    if got != spec.n_bends:
        raise GenerationError(f"acute bend count {got} != requested {spec.n_bends}")


# ---------------------------------------------------------------------------
# analysis

def complexity_of(model: ColonModel) -> dict:
    cl = model.centerline
    flags = []
    half = ACUTE_WINDOW_MM / 2.0
    for s in cl.cumulative_arclength:
        if s - half < 0 or s + half > cl.length_mm:
            flags.append(False)
            continue
        t0 = cl.tangent_at(s - half)
        t1 = cl.tangent_at(s + half)
        ang = np.degrees(np.arccos(np.clip(np.dot(t0, t1), -1.0, 1.0)))
        flags.append(ang > ACUTE_THRESHOLD_DEG)
    count = sum(1 for i, f in enumerate(flags) if f and (i == 0 or not flags[i - 1]))
    return {"centerline_length_mm": cl.length_mm, "acute_bend_count": count}


def closest_station(model: ColonModel, p) -> ClosestStation:
    """Global nearest centerline station to p; radial_offset is the distance."""
    p = np.asarray(p, dtype=np.float64)
    if not np.isfinite(p).all():
        raise ValueError("position must be finite")
    d = np.linalg.norm(model.centerline.points - p[None, :], axis=1)
    i = int(np.argmin(d))
    return ClosestStation(i, float(model.centerline.cumulative_arclength[i]),
                          float(d[i]))


def model_from_centerline(points: np.ndarray, radius=MEAN_RADIUS_MM,
                          name="custom") -> ColonModel:
    """Wrap an explicit centerline polyline as a model (constant or per-point
    radius). Used for analytic fixtures and tests."""
    points = np.asarray(points, dtype=np.float64)
    chord = np.linalg.norm(np.diff(points, axis=0), axis=1)
    if (chord == 0).any():
        raise ValueError("consecutive centerline points must be distinct")
    arclen = np.concatenate([[0.0], np.cumsum(chord)])
    cl = Centerline(points, arclen)
    radii = np.full(len(points), radius, dtype=np.float64) \
        if np.isscalar(radius) else np.asarray(radius, dtype=np.float64)
    normals, binormals = _transport_frames(cl)
    model = ColonModel(cl, radii, normals, binormals, {}, name=name)
    model.complexity = complexity_of(model)
    return model


# ---------------------------------------------------------------------------
# persistence & presets

def save_model(model: ColonModel, path):
    arrays = [("points", model.centerline.points),
              ("arclength", model.centerline.cumulative_arclength),
              ("radii", model.radius_profile),
              ("normals", model.normals),
              ("binormals", model.binormals)]
    header = {
        "name": model.name, "seed": model.seed, "ring_count": model.ring_count,
        "complexity": model.complexity, "spec": model.spec,
        "arrays": [[n, "<f8", list(a.shape)] for n, a in arrays],
    }
    with open(path, "wb") as f:
        f.write(_FILE_MAGIC)
        f.write(json.dumps(header).encode() + b"\n")
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_model(path) -> ColonModel:
    with open(path, "rb") as f:
        magic = f.read(len(_FILE_MAGIC))
        if magic != _FILE_MAGIC:
            raise ValueError(f"not a colon model file: {path}")
        header = json.loads(f.readline().decode())
        blocks = {}
        for name, dtype, shape in header["arrays"]:
            n = int(np.prod(shape))
            buf = f.read(n * np.dtype(dtype).itemsize)
            blocks[name] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    cl = Centerline(blocks["points"], blocks["arclength"])
    return ColonModel(cl, blocks["radii"], blocks["normals"], blocks["binormals"],
                      header["complexity"], name=header["name"],
                      seed=header["seed"], ring_count=header["ring_count"],
                      spec=header.get("spec", {}))


PRESET_NAMES = ("c0", "c1", "c2", "c3")


def load_preset(name: str) -> ComplexitySpec:
    name = name.lower()
    if name not in PRESET_NAMES:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESET_NAMES}")
    raw = resources.files("endonav.presets").joinpath(f"{name}.json").read_text()
    cfg = json.loads(raw)
    return ComplexitySpec(cfg["name"], cfg["n_bends"],
                          tuple(cfg["bend_angle_range"]), cfg["length_mm"],
                          cfg["seed"])


def generate_preset(name: str) -> ColonModel:
    return generate(load_preset(name))
