#!/usr/bin/env python3
"""
flight_planner.py
----------------
Locates the UAV in the tunnel cross-section from range readings and computes
how far it may advance per image without leaving gaps in the coverage.

Cross-section points are (x, z) pairs. A wall point at angle phi (measured
from +z towards +x) is r * (sin(phi), cos(phi)). The two horizontal sensors
hit the wall at p1 (angle alpha, +x sensor) and p2 (angle alpha + theta,
-x sensor); the vertical sensor hits p3 (angle alpha + beta). The UAV sits at
p = gamma * p1 + (1 - gamma) * p2 on the chord between the horizontal hits.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from utils.geometry import CameraIntrinsics, TunnelReconError

logger = logging.getLogger(__name__)

# Sensor azimuths from +z towards +x: d1 looks along +x, d2 along -x, d3 up.
SENSOR_AZIMUTHS = (math.pi / 2.0, -math.pi / 2.0, 0.0)
SENSOR_NAMES = ("d1", "d2", "d3")
RESIDUAL_ROWS = {
    # Residual rows that depend on each sensor; dropping the sensor drops them.
    "d1": (0, 3),
    "d2": (1, 3),
    "d3": (2, 5),
}
MAX_ITERATIONS = 100
TOLERANCE = 1e-10
# Readings whose least-squares fit leaves more than this fraction of r unexplained.
DEGENERATE_RESIDUAL_FRACTION = 0.05
# Two candidate offsets closer than this (meters) are the same solution.
CANDIDATE_MERGE_DISTANCE = 1e-9


class OffsetOutsideTunnelError(TunnelReconError):
    pass


class SolverConvergenceError(TunnelReconError):
    pass


class DegenerateReadingsError(TunnelReconError):
    pass


class ZeroCoverageError(TunnelReconError):
    pass


@dataclass(frozen=True)
class RangeReadings:
    """Wall distances from the two horizontal and the upward range sensor; None marks a failed sensor."""
    d1: Optional[float]
    d2: Optional[float]
    d3: Optional[float]

    def as_list(self) -> List[Optional[float]]:
        return [self.d1, self.d2, self.d3]

    @property
    def available(self) -> List[int]:
        return [i for i, d in enumerate(self.as_list()) if d is not None]

    def drop(self, name: str) -> "RangeReadings":
        """Return a copy with sensor `name` ('d1', 'd2' or 'd3') marked as failed."""
        values = dict(zip(SENSOR_NAMES, self.as_list()))
        values[name] = None
        return RangeReadings(**values)

    def validate(self, r: float) -> None:
        if len(self.available) < 2:
            raise DegenerateReadingsError(f"at least two range readings are required, got {len(self.available)}")
        for name, d in zip(SENSOR_NAMES, self.as_list()):
            if d is None:
                continue
            if not 0 < d < 2 * r:
                raise DegenerateReadingsError(f"{name}={d} is outside (0, {2 * r}) for a tunnel of radius {r}")


@dataclass(frozen=True)
class CrossSectionState:
    tx: float
    tz: float
    theta: float
    alpha: float
    beta: float
    gamma: float
    residual_norm: float
    iterations: int = 0
    ambiguous: bool = False
    dropped: Tuple[str, ...] = ()
    # Axial coordinate of the sensor plane, fixed to zero for a levelled UAV.
    h: float = 0.0

    @property
    def r1(self) -> float:
        return math.hypot(self.tx, self.tz)


@dataclass(frozen=True)
class SpeedPlan:
    theta_view: float
    d_max_rotation: float
    d_max_image: float
    n: int
    r1: float = 0.0
    d_max_pixel_form: float = field(default=float("nan"))


def _wall_point(r: float, phi: float) -> np.ndarray:
    return r * np.array([math.sin(phi), math.cos(phi)])


def _wall_tangent(r: float, phi: float) -> np.ndarray:
    return r * np.array([math.cos(phi), -math.sin(phi)])


def _sensor_direction(azimuth: float) -> np.ndarray:
    return np.array([math.sin(azimuth), math.cos(azimuth)])


def _ray_to_wall(origin: np.ndarray, direction: np.ndarray, r: float) -> float:
    b = origin @ direction
    c = origin @ origin - r * r
    return float(-b + math.sqrt(b * b - c))


def simulate_range_readings(offset: Sequence[float], r: float,
                            sensor_azimuths: Sequence[float] = SENSOR_AZIMUTHS) -> RangeReadings:
    """
    Exact wall distances seen by the range sensors of a UAV at `offset` = (tx, tz).

    Args:
        offset: UAV offset from the tunnel centre in meters.
        r: tunnel radius in meters.
        sensor_azimuths: directions of (d1, d2, d3) in radians from +z towards +x.

    Returns:
        RangeReadings with every sensor present.
    """
    origin = np.asarray(offset, dtype=float)
    if not origin @ origin < r * r:
        raise OffsetOutsideTunnelError(f"offset {tuple(origin)} is not inside a tunnel of radius {r}")
    d = [_ray_to_wall(origin, _sensor_direction(a), r) for a in sensor_azimuths]
    return RangeReadings(*d)


def add_reading_noise(readings: RangeReadings, amplitude: float, rng: np.random.Generator) -> RangeReadings:
    """Perturb every present reading by uniform noise in [-amplitude, amplitude]."""
    noisy = [None if d is None else d + rng.uniform(-amplitude, amplitude) for d in readings.as_list()]
    return RangeReadings(*noisy)


def _cross_section_points(x: np.ndarray, r: float):
    theta, alpha, beta, gamma = x
    p1 = _wall_point(r, alpha)
    p2 = _wall_point(r, alpha + theta)
    p3 = _wall_point(r, alpha + beta)
    p = gamma * p1 + (1.0 - gamma) * p2
    return p, p1, p2, p3


def cross_section_residuals(x: np.ndarray, readings: RangeReadings, r: float) -> np.ndarray:
    """The six constraints on (theta, alpha, beta, gamma); rows of missing sensors are zero."""
    theta, alpha, beta, gamma = x
    p, p1, p2, p3 = _cross_section_points(x, r)
    d1, d2, d3 = (0.0 if d is None else d for d in readings.as_list())
    a = p - p3
    b = p1 + p2
    res = np.array([
        np.linalg.norm(p - p1) - d1,
        np.linalg.norm(p - p2) - d2,
        np.linalg.norm(p - p3) - d3,
        math.cos(theta) - (2.0 * r * r - (d1 + d2) ** 2) / (2.0 * r * r),
        theta / 2.0 + alpha - math.pi,
        # y-component of (p - p3) x (p1 + p2); the other components vanish in the section plane.
        a[1] * b[0] - a[0] * b[1],
    ])
    return res * _row_mask(readings)


def _unit_or_zero(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 1e-15 else np.zeros_like(v)


def cross_section_jacobian(x: np.ndarray, readings: RangeReadings, r: float) -> np.ndarray:
    """Analytic 6x4 Jacobian of `cross_section_residuals`."""
    theta, alpha, beta, gamma = x
    p, p1, p2, p3 = _cross_section_points(x, r)
    t1 = _wall_tangent(r, alpha)
    t2 = _wall_tangent(r, alpha + theta)
    t3 = _wall_tangent(r, alpha + beta)
    zero = np.zeros(2)

    # Columns: d/dtheta, d/dalpha, d/dbeta, d/dgamma.
    dp = [(1.0 - gamma) * t2, gamma * t1 + (1.0 - gamma) * t2, zero, p1 - p2]
    dp1 = [zero, t1, zero, zero]
    dp2 = [t2, t2, zero, zero]
    dp3 = [zero, t3, t3, zero]

    J = np.zeros((6, 4))
    u1 = _unit_or_zero(p - p1)
    u2 = _unit_or_zero(p - p2)
    u3 = _unit_or_zero(p - p3)
    a = p - p3
    b = p1 + p2
    for k in range(4):
        J[0, k] = u1 @ (dp[k] - dp1[k])
        J[1, k] = u2 @ (dp[k] - dp2[k])
        da = dp[k] - dp3[k]
        J[2, k] = u3 @ da
        db = dp1[k] + dp2[k]
        J[5, k] = da[1] * b[0] + a[1] * db[0] - da[0] * b[1] - a[0] * db[1]
    J[3] = [-math.sin(theta), 0.0, 0.0, 0.0]
    J[4] = [0.5, 1.0, 0.0, 0.0]
    return J * _row_mask(readings)[:, None]


def _row_mask(readings: RangeReadings) -> np.ndarray:
    mask = np.ones(6)
    for name, d in zip(SENSOR_NAMES, readings.as_list()):
        if d is None:
            mask[list(RESIDUAL_ROWS[name])] = 0.0
    return mask


def _params_from_offset(offset: np.ndarray, r: float) -> np.ndarray:
    """Parameters (theta, alpha, beta, gamma) that place the UAV exactly at `offset`."""
    tx, tz = offset
    w = math.sqrt(max(r * r - tz * tz, 1e-24))
    alpha = math.atan2(w, tz)
    theta = (math.atan2(-w, tz) - alpha) % (2.0 * math.pi)
    gamma = min(max((tx / w + 1.0) / 2.0, 0.0), 1.0)
    top = math.atan2(tx, math.sqrt(max(r * r - tx * tx, 0.0)))
    beta = (top - alpha) % (2.0 * math.pi)
    return np.array([theta, alpha, beta, gamma])


def _candidate_offsets(readings: RangeReadings, r: float) -> List[np.ndarray]:
    """
    Closed-form UAV positions from every pair of present readings.

    Reading d_k along direction u_k puts the UAV on the circle of radius r
    centred at -d_k * u_k; two such circles meet in at most two points.
    """
    values = readings.as_list()
    candidates: List[np.ndarray] = []
    present = readings.available
    for i_pos, i in enumerate(present):
        for j in present[i_pos + 1:]:
            c1 = -values[i] * _sensor_direction(SENSOR_AZIMUTHS[i])
            c2 = -values[j] * _sensor_direction(SENSOR_AZIMUTHS[j])
            mid = (c1 + c2) / 2.0
            half = np.linalg.norm(c2 - c1) / 2.0
            if half == 0:
                continue
            h = math.sqrt(max(r * r - half * half, 0.0))
            perp = np.array([-(c2 - c1)[1], (c2 - c1)[0]]) / (2.0 * half)
            for sign in (1.0, -1.0):
                point = mid + sign * h * perp
                if point @ point < r * r and not any(
                        np.linalg.norm(point - c) < CANDIDATE_MERGE_DISTANCE for c in candidates):
                    candidates.append(point)
    return candidates


def _reading_mismatch(offset: np.ndarray, readings: RangeReadings, r: float) -> float:
    predicted = simulate_range_readings(offset, r).as_list()
    return max(abs(predicted[i] - readings.as_list()[i]) for i in readings.available)


def _levenberg_marquardt(x0: np.ndarray, readings: RangeReadings, r: float,
                         max_iterations: int, tolerance: float) -> Tuple[np.ndarray, float, int]:
    """Damped Gauss-Newton on the cross-section residuals; gamma is kept in [0, 1]."""
    x = x0.copy()
    e = cross_section_residuals(x, readings, r)
    cost = float(e @ e)
    lam = 1e-3
    for iteration in range(max_iterations):
        if math.sqrt(cost) <= tolerance:
            return x, math.sqrt(cost), iteration
        J = cross_section_jacobian(x, readings, r)
        g = J.T @ e
        if np.max(np.abs(g)) < 1e-15:
            return x, math.sqrt(cost), iteration
        A = J.T @ J
        while True:
            delta = np.linalg.solve(A + lam * np.eye(4), -g)
            trial = x + delta
            trial[3] = min(max(trial[3], 0.0), 1.0)
            e_trial = cross_section_residuals(trial, readings, r)
            cost_trial = float(e_trial @ e_trial)
            if cost_trial < cost:
                x, e, cost = trial, e_trial, cost_trial
                lam = max(lam / 10.0, 1e-12)
                break
            lam *= 10.0
            if lam > 1e12:
                # Stationary: no step lowers the cost any further.
                return x, math.sqrt(cost), iteration + 1
        logger.debug(f"planner iteration {iteration}: residual {math.sqrt(cost):.3e}, lambda {lam:.1e}")
        if np.linalg.norm(delta) <= 1e-15 * (1.0 + np.linalg.norm(x)):
            return x, math.sqrt(cost), iteration + 1
    if math.sqrt(cost) <= tolerance:
        return x, math.sqrt(cost), max_iterations
    raise SolverConvergenceError(
        f"cross-section solver did not converge in {max_iterations} iterations "
        f"(residual {math.sqrt(cost):.3e})")


def solve_uav_offset(readings: RangeReadings, r: float,
                     max_iterations: int = MAX_ITERATIONS,
                     tolerance: float = TOLERANCE) -> CrossSectionState:
    """
    Estimate the UAV offset from the tunnel centre by least squares on the
    six cross-section constraints.

    Missing readings (None) remove their residual rows, so this also serves
    the degraded case; see `solve_uav_offset_degraded`.

    Args:
        readings: range distances in meters.
        r: tunnel radius in meters.

    Returns:
        CrossSectionState with the solved parameters and final residual norm.
    """
    readings.validate(r)
    dropped = tuple(name for name, d in zip(SENSOR_NAMES, readings.as_list()) if d is None)
    candidates = _candidate_offsets(readings, r)
    if not candidates:
        raise DegenerateReadingsError(f"readings {readings.as_list()} fit no point inside a tunnel of radius {r}")

    mismatches = [_reading_mismatch(c, readings, r) for c in candidates]
    order = np.argsort(mismatches, kind="stable")
    best = candidates[order[0]]
    ambiguous = False
    if readings.d3 is None and len(candidates) > 1:
        # Two horizontal readings cannot tell a position above the centre from its mirror below it.
        consistent = [candidates[i] for i in order if mismatches[i] <= mismatches[order[0]] + 1e-9]
        if len(consistent) > 1:
            ambiguous = True
            best = min(consistent, key=lambda c: c[1])
            logger.warning(f"vertical sensor missing: offset is ambiguous, taking the solution below the centre "
                           f"(tz={best[1]:.4f})")

    x, residual_norm, iterations = _levenberg_marquardt(
        _params_from_offset(best, r), readings, r, max_iterations, tolerance)
    if residual_norm > DEGENERATE_RESIDUAL_FRACTION * r:
        raise DegenerateReadingsError(
            f"readings {readings.as_list()} are inconsistent with a tunnel of radius {r} "
            f"(residual {residual_norm:.4f})")

    p, _, _, _ = _cross_section_points(x, r)
    state = CrossSectionState(tx=float(p[0]), tz=float(p[1]), theta=float(x[0]), alpha=float(x[1]),
                              beta=float(x[2]), gamma=float(x[3]), residual_norm=residual_norm,
                              iterations=iterations, ambiguous=ambiguous, dropped=dropped)
    logger.info(f"UAV offset ({state.tx:.4f}, {state.tz:.4f}) m, residual {residual_norm:.2e}, "
                f"{iterations} iteration(s)")
    return state


def solve_uav_offset_degraded(readings: RangeReadings, r: float, **kwargs) -> CrossSectionState:
    """Solve with one sensor marked as failed; the remaining rows still pin the offset."""
    if len(readings.available) == 3:
        logger.warning("degraded solve requested but all three readings are present")
    elif readings.available:
        missing = [n for n, d in zip(SENSOR_NAMES, readings.as_list()) if d is None]
        logger.warning(f"solving with failed sensor(s): {', '.join(missing)}")
    return solve_uav_offset(readings, r, **kwargs)


def view_angle_theta(omega_h: float, r1: float, r: float) -> float:
    """
    Angle at the tunnel centre between the camera's optical axis hit and its
    extreme horizontal ray hit.

    Args:
        omega_h: horizontal field of view in radians.
        r1: UAV distance from the tunnel centre in meters.
        r: tunnel radius in meters.
    """
    if not 0 < omega_h < math.pi:
        raise ValueError(f"omega_h must lie in (0, pi), got {omega_h}")
    if r1 < 0:
        raise ValueError(f"r1 must be non-negative, got {r1}")
    if r1 >= r:
        raise OffsetOutsideTunnelError(f"r1={r1} is not inside a tunnel of radius {r}")
    half = omega_h / 2.0
    return half - math.asin((r1 / r) * math.sin(half))


def max_move_per_rotation(omega_v: float, r: float, r1: float, theta: float) -> float:
    """Largest forward motion per full rotation that still leaves overlap between rotations."""
    reach = r * math.cos(theta) - r1
    if reach < 0:
        raise ZeroCoverageError(f"camera at r1={r1} cannot see the far wall (r*cos(theta)={r * math.cos(theta):.4f})")
    return 2.0 * math.tan(omega_v / 2.0) * reach


def max_move_per_image(omega_h: float, omega_v: float, r: float, r1: float, n: int) -> float:
    if n < 1:
        raise ValueError(f"images per rotation must be at least 1, got {n}")
    theta = view_angle_theta(omega_h, r1, r)
    return max_move_per_rotation(omega_v, r, r1, theta) / n


def d_max_pixel_form(rows: int, f: float, r: float, r1: float, theta: float) -> float:
    """Pixel-count form of the per-rotation bound: (rows - 1) * (r cos(theta) - r1) / f."""
    return (rows - 1) * (r * math.cos(theta) - r1) / f


def plan_speed(K: CameraIntrinsics, r: float, r1: float, n: int) -> SpeedPlan:
    """Assemble the full speed plan for camera `K` at distance `r1` from the centre."""
    theta = view_angle_theta(K.omega_h, r1, r)
    per_rotation = max_move_per_rotation(K.omega_v, r, r1, theta)
    if n < 1:
        raise ValueError(f"images per rotation must be at least 1, got {n}")
    plan = SpeedPlan(theta_view=theta, d_max_rotation=per_rotation, d_max_image=per_rotation / n, n=n, r1=r1,
                     d_max_pixel_form=d_max_pixel_form(K.height, K.f, r, r1, theta))
    logger.info(f"speed plan: theta={math.degrees(theta):.4f} deg, {plan.d_max_rotation:.4f} m/rotation, "
                f"{plan.d_max_image:.4f} m/image")
    return plan


def speed_sweep(omega_h: float, omega_v: float, r: float, n: int, steps: int = 50) -> pd.DataFrame:
    """Tabulate theta and the speed bounds over UAV offsets r1 in [0, r)."""
    rows = []
    for r1 in np.linspace(0.0, r, steps, endpoint=False):
        theta = view_angle_theta(omega_h, float(r1), r)
        per_rotation = max_move_per_rotation(omega_v, r, float(r1), theta)
        rows.append({
            "r1": float(r1),
            "theta_deg": math.degrees(theta),
            "d_max_rotation": per_rotation,
            "d_max_image": per_rotation / n,
        })
    return pd.DataFrame(rows, columns=["r1", "theta_deg", "d_max_rotation", "d_max_image"])
