"""CPU ray-cast renderer for the tube interior.

Each pixel marches a ray against the deformed wall surface; shading is
albedo * headlight falloff * Lambert, with peripheral vignetting. The
distal lumen comes out as the darkest region because the headlight decays
with distance and incidence grows grazing toward the axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .colon import ColonModel

BACKGROUND = (3, 2, 2)           # escaped rays: near-black
ALBEDO_BASE = (0.87, 0.52, 0.45)  # procedural pink tissue
LAMBERT_FLOOR = 0.3              # scatter floor; pure cosine would sink the
                                 # crop-edge annulus below the lumen threshold
MAX_RANGE_MM = 360.0             # headlight is <3% out here; clip to background


class CameraOutsideSurface(RuntimeError):
    """Bug guard: the camera origin is not inside the (deformed) tube."""


@dataclass(frozen=True)
class CameraSpec:
    fov_deg: float = 90.0
    near_mm: float = 1.0
    headlight_falloff_mm: float = 60.0   # d0 in intensity ~ 1/(1+(d/d0)^2)
    vignette_strength: float = 0.5

    def __post_init__(self):
        if not 30.0 < self.fov_deg < 150.0:
            raise ValueError("fov_deg must be in (30, 150)")


@dataclass
class Frame:
    width: int
    height: int
    pixels: np.ndarray   # (H, W, 3) uint8, row-major RGB

    def __post_init__(self):
        if self.width != self.height:
            raise ValueError("frames are square")


@njit(cache=True, fastmath=True)
def _walk_station(k, px, py, pz, points):
    n = points.shape[0]
    while True:
        d0 = ((px - points[k, 0]) ** 2 + (py - points[k, 1]) ** 2
              + (pz - points[k, 2]) ** 2)
        moved = False
        if k + 1 < n:
            d1 = ((px - points[k + 1, 0]) ** 2 + (py - points[k + 1, 1]) ** 2
                  + (pz - points[k + 1, 2]) ** 2)
            if d1 < d0:
                k += 1
                moved = True
        if not moved and k > 0:
            d2 = ((px - points[k - 1, 0]) ** 2 + (py - points[k - 1, 1]) ** 2
                  + (pz - points[k - 1, 2]) ** 2)
            if d2 < d0:
                k -= 1
                moved = True
        if not moved:
            return k


@njit(cache=True)
def _nearest_station_walk(k, p, points):
    return _walk_station(k, p[0], p[1], p[2], points)


@njit(cache=True, fastmath=True)
def _clearance_at(px, py, pz, k, points, tangents, normals, binormals,
                  radii, deform):
    """surface_radius - radial_distance at a point, using station k's frame.

    Positive inside the lumen. Second value is the axial overshoot flag:
    -1 before the first station, +1 past the last, 0 inside.
    """
    n = points.shape[0]
    vx = px - points[k, 0]
    vy = py - points[k, 1]
    vz = pz - points[k, 2]
    ax = vx * tangents[k, 0] + vy * tangents[k, 1] + vz * tangents[k, 2]
    if k == 0 and ax < 0.0:
        return 0.0, -1, 0.0
    if k == n - 1 and ax > 0.0:
        return 0.0, 1, 0.0
    rx = vx - ax * tangents[k, 0]
    ry = vy - ax * tangents[k, 1]
    rz = vz - ax * tangents[k, 2]
    rho = np.sqrt(rx * rx + ry * ry + rz * rz)
    cn = rx * normals[k, 0] + ry * normals[k, 1] + rz * normals[k, 2]
    cb = rx * binormals[k, 0] + ry * binormals[k, 1] + rz * binormals[k, 2]
    theta = np.arctan2(cb, cn)
    kverts = deform.shape[1]
    ft = (theta % (2 * np.pi)) / (2 * np.pi) * kverts
    j0 = int(ft) % kverts
    j1 = (j0 + 1) % kverts
    w = ft - int(ft)
    bulge = deform[k, j0] * (1.0 - w) + deform[k, j1] * w
    return radii[k] + bulge - rho, 0, ax


@njit(cache=True)
def _wall_clearance(p, k, points, tangents, normals, binormals, radii, deform):
    return _clearance_at(p[0], p[1], p[2], k, points, tangents, normals,
                         binormals, radii, deform)


@njit(cache=True, parallel=True, fastmath=True)
def _render_kernel(out, origin, rot, tanf, points, tangents, normals, binormals,
                   radii, deform, has_deform, arclen, k_start, d0, vignette,
                   near, phase):
    h, w = out.shape[0], out.shape[1]
    half_w = w / 2.0
    n = points.shape[0]
    kverts = deform.shape[1]
    ox, oy, oz = origin[0], origin[1], origin[2]
    for iy in prange(h):
        for ix in range(w):
            u = (2.0 * (ix + 0.5) / w - 1.0) * tanf
            v = (2.0 * (iy + 0.5) / h - 1.0) * tanf
            dx = rot[0, 0] * u + rot[0, 1] * v + rot[0, 2]
            dy = rot[1, 0] * u + rot[1, 1] * v + rot[1, 2]
            dz = rot[2, 0] * u + rot[2, 1] * v + rot[2, 2]
            inv = 1.0 / np.sqrt(dx * dx + dy * dy + dz * dz)
            dx *= inv
            dy *= inv
            dz *= inv

            k = k_start
            t = near
            t_prev = near
            f_prev = 1.0
            f = 1.0
            hit = False
            a = 0.0
            rx = ry = rz = 0.0
            rho = 1.0
            # march: step by a fraction of the wall clearance until crossing
            for _ in range(400):
                px = ox + t * dx
                py = oy + t * dy
                pz = oz + t * dz
                # incremental nearest-station walk
                while True:
                    dd0 = ((px - points[k, 0]) ** 2 + (py - points[k, 1]) ** 2
                           + (pz - points[k, 2]) ** 2)
                    moved = False
                    if k + 1 < n:
                        dd1 = ((px - points[k + 1, 0]) ** 2
                               + (py - points[k + 1, 1]) ** 2
                               + (pz - points[k + 1, 2]) ** 2)
                        if dd1 < dd0:
                            k += 1
                            moved = True
                    if not moved and k > 0:
                        dd2 = ((px - points[k - 1, 0]) ** 2
                               + (py - points[k - 1, 1]) ** 2
                               + (pz - points[k - 1, 2]) ** 2)
                        if dd2 < dd0:
                            k -= 1
                            moved = True
                    if not moved:
                        break
                vx = px - points[k, 0]
                vy = py - points[k, 1]
                vz = pz - points[k, 2]
                a = (vx * tangents[k, 0] + vy * tangents[k, 1]
                     + vz * tangents[k, 2])
                if (k == 0 and a < 0.0) or (k == n - 1 and a > 0.0):
                    break   # escaped through an open end
                rx = vx - a * tangents[k, 0]
                ry = vy - a * tangents[k, 1]
                rz = vz - a * tangents[k, 2]
                rho = np.sqrt(rx * rx + ry * ry + rz * rz)
                surf = radii[k]
                if has_deform[k]:
                    cn = (rx * normals[k, 0] + ry * normals[k, 1]
                          + rz * normals[k, 2])
                    cb = (rx * binormals[k, 0] + ry * binormals[k, 1]
                          + rz * binormals[k, 2])
                    ft = (np.arctan2(cb, cn) % (2 * np.pi)) \
                        / (2 * np.pi) * kverts
                    j0 = int(ft) % kverts
                    j1 = (j0 + 1) % kverts
                    wgt = ft - int(ft)
                    surf += deform[k, j0] * (1.0 - wgt) + deform[k, j1] * wgt
                f = surf - rho
                if f <= 0.0:
                    hit = True
                    break
                t_prev = t
                f_prev = f
                step = 0.9 * f
                if step < 1.0:
                    step = 1.0
                elif step > 8.0:
                    step = 8.0
                t += step
                if t > MAX_RANGE_MM:
                    break

            # vignette radius measured against the half-diagonal: corners
            # darkest, the circular-crop boundary only mildly dimmed
            vr2 = (((ix + 0.5) - half_w) ** 2 + ((iy + 0.5) - half_w) ** 2) \
                / (2.0 * half_w * half_w)
            vig = 1.0 - vignette * min(1.0, vr2)

            if not hit:
                out[iy, ix, 0] = np.uint8(3)
                out[iy, ix, 1] = np.uint8(2)
                out[iy, ix, 2] = np.uint8(2)
                continue

            # secant refinement of the crossing (f is near-linear at the wall)
            denom = f_prev - f
            t_hit = t if denom <= 1e-12 \
                else t_prev + f_prev * (t - t_prev) / denom

            fall = 1.0 / (1.0 + (t_hit / d0) * (t_hit / d0))
            if rho < 1e-9:
                rho = 1e-9
            lam = -(dx * rx + dy * ry + dz * rz) / rho
            if lam < 0.0:
                lam = -lam
            if lam > 1.0:
                lam = 1.0
            lam = LAMBERT_FLOOR + (1.0 - LAMBERT_FLOOR) * lam

            s_hit = arclen[k] + a
            cn = rx * normals[k, 0] + ry * normals[k, 1] + rz * normals[k, 2]
            cb = rx * binormals[k, 0] + ry * binormals[k, 1] + rz * binormals[k, 2]
            theta = np.arctan2(cb, cn)
            tex = 1.0 + 0.06 * np.sin(0.11 * s_hit + 3.0 * theta + phase) \
                + 0.04 * np.sin(0.31 * s_hit - 2.0 * theta + 1.7 * phase)

            shade = fall * lam * vig * tex
            r = 255.0 * 0.87 * shade
            g = 255.0 * 0.52 * shade
            b = 255.0 * 0.45 * shade
            out[iy, ix, 0] = np.uint8(min(255.0, max(0.0, r)))
            out[iy, ix, 1] = np.uint8(min(255.0, max(0.0, g)))
            out[iy, ix, 2] = np.uint8(min(255.0, max(0.0, b)))


class Renderer:
    """Pre-packed per-model renderer; safe to share read-only across envs."""

    SUPPORTED_SIZES = (128, 1024)

    def __init__(self, model: ColonModel, camera: CameraSpec = CameraSpec()):
        self.model = model
        self.camera = camera
        cl = model.centerline
        self.points = np.ascontiguousarray(cl.points)
        self.tangents = np.ascontiguousarray(cl.tangents())
        self.normals = np.ascontiguousarray(model.normals)
        self.binormals = np.ascontiguousarray(model.binormals)
        self.radii = np.ascontiguousarray(model.radius_profile)
        self.arclen = np.ascontiguousarray(cl.cumulative_arclength)
        self.zero_deform = np.zeros((model.n_stations, model.ring_count))
        self._no_deform_flags = np.zeros(model.n_stations, dtype=bool)
        self.phase = float((model.seed % 977) * 0.137)

    def render(self, position, rotation, size: int = 128, deform=None,
               station_hint: int = 0) -> Frame:
        if size not in self.SUPPORTED_SIZES:
            raise ValueError(f"supported sizes: {self.SUPPORTED_SIZES}")
        origin = np.ascontiguousarray(np.asarray(position, dtype=np.float64))
        rot = np.ascontiguousarray(np.asarray(rotation, dtype=np.float64))
        if deform is None:
            deform = self.zero_deform
            has_deform = self._no_deform_flags
        else:
            has_deform = (deform != 0.0).any(axis=1)
        k0 = _nearest_station_walk(int(station_hint), origin, self.points)
        f, over, _ = _wall_clearance(origin, k0, self.points, self.tangents,
                                     self.normals, self.binormals, self.radii,
                                     deform)
        if over != 0 or f < -0.5:
            raise CameraOutsideSurface(
                f"camera at clearance {f:.2f} mm (station {k0})")
        out = np.empty((size, size, 3), dtype=np.uint8)
        _render_kernel(out, origin, rot, np.tan(np.radians(self.camera.fov_deg) / 2),
                       self.points, self.tangents, self.normals, self.binormals,
                       self.radii, deform, has_deform, self.arclen, k0,
                       self.camera.headlight_falloff_mm,
                       self.camera.vignette_strength, self.camera.near_mm,
                       self.phase)
        return Frame(size, size, out)


def render(model: ColonModel, state, size: int = 128,
           camera: CameraSpec = CameraSpec(), deform=None) -> Frame:
    """One-shot convenience around Renderer; state needs .position and
    .rotation (world-from-camera matrix)."""
    r = Renderer(model, camera)
    return r.render(state.position, state.rotation, size=size, deform=deform)


def downscale(frame: Frame, target: int = 128) -> Frame:
    """Box-filter average over square blocks; source must divide evenly."""
    if frame.width % target != 0:
        raise ValueError(f"{frame.width} not divisible by {target}")
    factor = frame.width // target
    if factor == 1:
        return Frame(target, target, frame.pixels.copy())
    p = frame.pixels.reshape(target, factor, target, factor, 3).astype(np.float64)
    out = p.mean(axis=(1, 3))
    return Frame(target, target, np.round(out).astype(np.uint8))


def save_pgm(frame: Frame, path):
    """Grayscale PGM export for quick inspection without image deps."""
    gray = np.round(frame.pixels.astype(np.float64) @ [0.299, 0.587, 0.114])
    with open(path, "wb") as f:
        f.write(f"P5\n{frame.width} {frame.height}\n255\n".encode())
        f.write(gray.astype(np.uint8).tobytes())


def save_ppm(frame: Frame, path):
    """Binary PPM export (RGB)."""
    with open(path, "wb") as f:
        f.write(f"P6\n{frame.width} {frame.height}\n255\n".encode())
        f.write(frame.pixels.tobytes())
