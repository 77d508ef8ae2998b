"""Capsule endoscope dynamics inside a colon model.

4-DOF kinematics: discrete +-1 steering quanta feed a damped angular
velocity, translation runs at constant speed along the tip axis and only
while the lumen gate is open. Wall contact is a ring-spring proxy: rings
bulge outward to accommodate the capsule and relax back at a fixed rate;
only the peak radial displacement matters (perforation threshold 30 mm).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .colon import ColonModel

PERFORATION_THRESHOLD_MM = 30.0
WALL_RELAX_MM_S = 50.0


class InvalidStateError(RuntimeError):
    """Internal bug guard: a state stopped being physically consistent."""


@dataclass(frozen=True)
class CapsuleSpec:
    mass_g: float = 20.0
    length_mm: float = 36.0
    diameter_mm: float = 14.0
    angular_drag: float = 4.0      # frictional damping of angular velocity
    v_end_mm_s: float = 10.0       # translation speed while the gate is open

    def __post_init__(self):
        if min(self.mass_g, self.length_mm, self.diameter_mm,
               self.angular_drag, self.v_end_mm_s) <= 0:
            raise ValueError("capsule parameters must be positive")

    @property
    def radius_mm(self) -> float:
        return self.diameter_mm / 2.0


@dataclass(frozen=True)
class ActionTriple:
    alpha_x: int = 0    # steer the view toward image +x
    alpha_y: int = 0    # steer the view toward image +y
    alpha_z: int = 0    # roll

    def __post_init__(self):
        for a in (self.alpha_x, self.alpha_y, self.alpha_z):
            if a not in (-1, 0, 1):
                raise ValueError("action components must be in {-1, 0, +1}")

    def as_tuple(self):
        return (self.alpha_x, self.alpha_y, self.alpha_z)


@dataclass(frozen=True)
class EpisodeConfig:
    max_steps: int = 10000
    control_rate_hz: float = 30.0
    rotation_quantum_deg: float = 1.0
    caecum_epsilon_mm: float = 30.0
    destabilize_factor: float = 2.0
    reset_jitter_deg: float = 5.0
    return_epsilon_mm: float = 30.0
    return_hysteresis_mm: float = 100.0

    def __post_init__(self):
        if min(self.max_steps, self.control_rate_hz, self.rotation_quantum_deg,
               self.caecum_epsilon_mm, self.destabilize_factor) <= 0:
            raise ValueError("episode parameters must be positive")

    @property
    def dt(self) -> float:
        return 1.0 / self.control_rate_hz


@dataclass(frozen=True)
class EndoscopeState:
    position: np.ndarray          # (3,) mm
    orientation: np.ndarray       # unit quaternion (w, x, y, z)
    angular_velocity: np.ndarray  # (3,) rad/s about local axes
    translating: bool = False
    station: int = 0              # tracked nearest centerline station
    progressed_mm: float = 0.0    # farthest arclength reached this episode

    @property
    def rotation(self) -> np.ndarray:
        """World-from-local rotation matrix; local z is the view/insertion axis."""
        return quat_to_matrix(self.orientation)


@dataclass
class StepResult:
    next_state: EndoscopeState
    terminal: str                 # reward.TERMINAL_* kind ("none" if running)
    max_deformation_mm: float
    perforation_event: bool
    reward: Optional[float] = None   # filled by the env layer, not here


# --- quaternion helpers (w, x, y, z) ---------------------------------------

def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_from_rotvec(v):
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = v / angle
    half = angle / 2.0
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(m):
    w = np.sqrt(max(0.0, 1.0 + m[0, 0] + m[1, 1] + m[2, 2])) / 2.0
    if w > 1e-9:
        return np.array([w, (m[2, 1] - m[1, 2]) / (4 * w),
                         (m[0, 2] - m[2, 0]) / (4 * w),
                         (m[1, 0] - m[0, 1]) / (4 * w)])
    # fall back through the largest diagonal element
    i = int(np.argmax([m[0, 0], m[1, 1], m[2, 2]]))
    j, k = (i + 1) % 3, (i + 2) % 3
    s = np.sqrt(max(1e-12, 1.0 + m[i, i] - m[j, j] - m[k, k])) * 2.0
    q = np.empty(4)
    q[0] = (m[k, j] - m[j, k]) / s
    q[1 + i] = s / 4.0
    q[1 + j] = (m[j, i] + m[i, j]) / s
    q[1 + k] = (m[k, i] + m[i, k]) / s
    return q


class ColonSim:
    """One endoscope episode inside one colon model.

    Holds the mutable wall state (ring deformation) and the step counter;
    the endoscope state itself is a value passed in and out of step().
    """

    def __init__(self, model: ColonModel, capsule: CapsuleSpec = CapsuleSpec(),
                 config: EpisodeConfig = EpisodeConfig()):
        self.model = model
        self.capsule = capsule
        self.config = config
        cl = model.centerline
        self._points = np.ascontiguousarray(cl.points)
        self._tangents = np.ascontiguousarray(cl.tangents())
        self._normals = np.ascontiguousarray(model.normals)
        self._binormals = np.ascontiguousarray(model.binormals)
        self._radii = np.ascontiguousarray(model.radius_profile)
        self._arclen = np.ascontiguousarray(cl.cumulative_arclength)
        self.deform = np.zeros((model.n_stations, model.ring_count))
        self.step_count = 0
        self._destabilized = False

    # ------------------------------------------------------------------

    def reset(self, seed: int = 0) -> EndoscopeState:
        """Tip at the rectum end, view along the initial tangent with a
        seeded tilt of at most reset_jitter_deg."""
        rng = np.random.default_rng(seed)
        self.deform[:] = 0.0
        self.step_count = 0
        self._destabilized = False

        t = self._tangents[0]
        n = self._normals[0]
        b = self._binormals[0]
        rot = np.stack([n, b, t], axis=1)          # local x, y, z in world
        tilt = np.radians(rng.uniform(0.0, self.config.reset_jitter_deg))
        azim = rng.uniform(0.0, 2 * np.pi)
        axis_local = np.array([np.cos(azim), np.sin(azim), 0.0])
        q = quat_mul(quat_from_matrix(rot), quat_from_rotvec(tilt * axis_local))
        q /= np.linalg.norm(q)
        return EndoscopeState(position=self._points[0].copy(), orientation=q,
                              angular_velocity=np.zeros(3), translating=False,
                              station=0, progressed_mm=0.0)

    # ------------------------------------------------------------------

    def step(self, state: EndoscopeState, action: ActionTriple,
             lumen_detected: bool) -> StepResult:
        cfg = self.config
        dt = cfg.dt
        if abs(np.linalg.norm(state.orientation) - 1.0) > 1e-6:
            raise InvalidStateError("orientation denormalized")

        # steering: damped velocity update toward a sustained slew of
        # quantum*rate/(1+drag*dt) (~26.5 deg/s at the defaults); the
        # increment is sized so that fixed point falls out of the recurrence
        k = self.capsule.angular_drag * dt
        slew = np.radians(cfg.rotation_quantum_deg) * cfg.control_rate_hz
        gain = k * slew / (1.0 + k)
        u = gain * np.array([-action.alpha_y, action.alpha_x, action.alpha_z])
        omega = (state.angular_velocity + u) / (1.0 + k)

        q = quat_mul(state.orientation, quat_from_rotvec(omega * dt))
        q /= np.linalg.norm(q)

        pos = state.position.copy()
        if lumen_detected:
            pos = pos + quat_to_matrix(q)[:, 2] * (self.capsule.v_end_mm_s * dt)

        # wall relaxation happens once per control step, before contact
        if self.deform.any():
            np.maximum(self.deform - WALL_RELAX_MM_S * dt, 0.0, out=self.deform)

        moved = EndoscopeState(position=pos, orientation=q,
                               angular_velocity=omega,
                               translating=bool(lumen_detected),
                               station=state.station,
                               progressed_mm=state.progressed_mm)
        corrected, max_def, perforation = self.resolve_contact(moved)

        self.step_count += 1
        terminal = self.check_terminal(corrected, self.step_count)
        return StepResult(corrected, terminal, max_def, perforation)

    # ------------------------------------------------------------------

    def _sphere_centers(self, state: EndoscopeState) -> np.ndarray:
        half = self.capsule.length_mm / 2.0 - self.capsule.radius_mm
        axis = state.rotation[:, 2]
        return np.stack([state.position - half * axis, state.position,
                         state.position + half * axis])

    def _walk(self, k: int, p: np.ndarray) -> int:
        pts = self._points
        n = len(pts)
        while True:
            d0 = np.dot(pts[k] - p, pts[k] - p)
            if k + 1 < n and np.dot(pts[k + 1] - p, pts[k + 1] - p) < d0:
                k += 1
            elif k > 0 and np.dot(pts[k - 1] - p, pts[k - 1] - p) < d0:
                k -= 1
            else:
                return k

    def resolve_contact(self, state: EndoscopeState):
        """Deform intersected ring vertices outward by the penetration depth.

        The wall always ends up containing the capsule, so the state itself
        needs no positional correction. Idempotent: vertices only ever move
        out to the currently demanded bulge.
        """
        r_cap = self.capsule.radius_mm
        kverts = self.model.ring_count
        centers = self._sphere_centers(state)
        for p in centers:
            k = self._walk(state.station, p)
            for ki in range(max(0, k - 1), min(len(self._points), k + 2)):
                v = p - self._points[ki]
                axial = float(np.dot(v, self._tangents[ki]))
                if abs(axial) >= r_cap:
                    continue
                r_slice = np.sqrt(r_cap * r_cap - axial * axial)
                radial = v - axial * self._tangents[ki]
                rho = float(np.linalg.norm(radial))
                pen = rho + r_slice - self._radii[ki]
                if pen <= 0.0 or rho < 1e-9:
                    continue
                theta = np.arctan2(np.dot(radial, self._binormals[ki]),
                                   np.dot(radial, self._normals[ki]))
                half_angle = np.arcsin(min(1.0, r_slice / rho))
                j_center = theta / (2 * np.pi) * kverts
                width = int(np.ceil(half_angle / (2 * np.pi) * kverts))
                for dj in range(-width, width + 1):
                    j = int(np.floor(j_center + dj)) % kverts
                    if self.deform[ki, j] < pen:
                        self.deform[ki, j] = pen

        max_def = float(self.deform.max()) if self.deform.any() else 0.0
        perforation = max_def > PERFORATION_THRESHOLD_MM
        if max_def > self.config.destabilize_factor * PERFORATION_THRESHOLD_MM:
            self._destabilized = True

        new_station = self._walk(state.station, centers[1])
        axial = float(np.dot(centers[1] - self._points[new_station],
                             self._tangents[new_station]))
        s_now = self._arclen[new_station] + axial
        corrected = replace(state, station=new_station,
                            progressed_mm=max(state.progressed_mm, s_now))
        return corrected, max_def, perforation

    # ------------------------------------------------------------------

    def arclength_of(self, state: EndoscopeState) -> float:
        k = self._walk(state.station, state.position)
        axial = float(np.dot(state.position - self._points[k], self._tangents[k]))
        return float(self._arclen[k]) + axial

    def check_terminal(self, state: EndoscopeState, step_count: int) -> str:
        cfg = self.config
        if self._destabilized:
            return "destabilized"
        if np.linalg.norm(state.position - self._points[-1]) <= cfg.caecum_epsilon_mm:
            return "reached_caecum"
        if (state.progressed_mm >= cfg.return_hysteresis_mm
                and self.arclength_of(state) <= cfg.return_epsilon_mm):
            return "returned_to_start"
        if step_count >= cfg.max_steps:
            return "step_limit"
        return "none"
