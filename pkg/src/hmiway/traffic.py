"""Kinematic highway traffic: IDM car-following, a three-lane merge road and
lidar-style perception with obstacle inflation.

Coordinates: ``x`` runs along the road, ``y = lane * lane_width`` grows towards
the right-hand lanes, so lane 0 is the leftmost lane.  Lidar sector ``k`` casts
a ray at angle ``2*pi*k/K`` measured from straight ahead towards the right.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from enum import IntEnum

import numpy as np
from numba import njit

log = logging.getLogger(__name__)

NO_LEADER_GAP = math.inf


class CollisionOverlap(ValueError):
    """Raised when a follower is asked to react to a leader it already overlaps."""


class LaneCommand(IntEnum):
    KEEP = 0
    LEFT = 1
    RIGHT = 2


@dataclass(frozen=True)
class IDMParams:
    desired_speed: float = 30.0
    min_gap: float = 10.0
    time_headway: float = 1.5
    max_accel: float = 3.0
    comfort_decel: float = 5.0
    delta: float = 4.0
    emergency_decel: float = 9.0

    def __post_init__(self):
        for name in ("desired_speed", "min_gap", "time_headway", "max_accel",
                     "comfort_decel", "delta", "emergency_decel"):
            if not getattr(self, name) > 0:
                raise ValueError(f"IDM parameter {name} must be positive")


@dataclass(frozen=True)
class RoadGeometry:
    lane_count: int = 3
    lane_length: float = 2000.0
    merge_lane: int | None = 2
    merge_point: float = 300.0
    speed_limits: tuple[float, float] = (20.0, 30.0)
    lane_width: float = 4.0

    def __post_init__(self):
        if self.lane_count < 1:
            raise ValueError("lane_count must be >= 1")
        if self.merge_lane is not None:
            if not 0 <= self.merge_lane < self.lane_count:
                raise ValueError("merge lane outside the road")
            if not 0 < self.merge_point < self.lane_length:
                raise ValueError("merge point must lie within the lane length")
        lo, hi = self.speed_limits
        if not 0 <= lo <= hi:
            raise ValueError("speed limits must satisfy 0 <= lo <= hi")

    @property
    def merging_flags(self) -> tuple[bool, ...]:
        return tuple(lane == self.merge_lane for lane in range(self.lane_count))

    @property
    def rightmost_through_lane(self) -> int:
        lanes = [k for k in range(self.lane_count) if k != self.merge_lane]
        return max(lanes)

    def lane_exists(self, lane: int, x: float) -> bool:
        if not 0 <= lane < self.lane_count:
            return False
        if lane == self.merge_lane:
            return x < self.merge_point
        return True


@dataclass(frozen=True, slots=True)
class VehicleState:
    x: float
    lane: int
    speed: float
    target_lane: int
    length: float = 5.0
    is_ego: bool = False
    desired_speed: float = 30.0
    change_ticks: int = 0
    width: float = 2.0

    @property
    def lanes(self) -> tuple[int, ...]:
        if self.target_lane == self.lane:
            return (self.lane,)
        return (self.lane, self.target_lane)

    def lateral(self, lane_width: float) -> float:
        return 0.5 * (self.lane + self.target_lane) * lane_width


def idm_acceleration(ego_speed: float, gap: float, lead_speed: float,
                     params: IDMParams) -> float:
    """IDM acceleration, clamped to ``[-emergency_decel, max_accel]``.

    Pass ``gap=NO_LEADER_GAP`` (or ``math.inf``) when there is no leader.
    """
    if gap <= 0:
        raise CollisionOverlap(f"non-positive gap {gap!r} to leader")
    p = params
    free = (ego_speed / p.desired_speed) ** p.delta
    if math.isinf(gap):
        interaction = 0.0
    else:
        dv = ego_speed - lead_speed
        s_star = (p.min_gap + ego_speed * p.time_headway
                  + ego_speed * dv / (2.0 * math.sqrt(p.max_accel * p.comfort_decel)))
        interaction = (s_star / gap) ** 2
    a = p.max_accel * (1.0 - free - interaction)
    return min(max(a, -p.emergency_decel), p.max_accel)


def step_vehicle(v: VehicleState, accel: float, lane_command: LaneCommand | int,
                 dt: float, geometry: RoadGeometry | None = None,
                 v_max: float = 40.0, lane_change_ticks: int = 3,
                 ) -> tuple[VehicleState, bool]:
    """Advance one vehicle by one tick; returns ``(new_state, command_ignored)``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    geometry = geometry or RoadGeometry()
    ignored = False
    lane, target, ticks = v.lane, v.target_lane, v.change_ticks
    cmd = LaneCommand(lane_command)
    if cmd != LaneCommand.KEEP:
        if ticks > 0:
            ignored = True
        else:
            new_lane = lane - 1 if cmd == LaneCommand.LEFT else lane + 1
            if geometry.lane_exists(new_lane, v.x):
                target, ticks = new_lane, lane_change_ticks
            else:
                ignored = True
    if ticks > 0:
        ticks -= 1
        if ticks == 0:
            lane = target

    speed = v.speed
    new_speed = speed + accel * dt
    if new_speed < 0.0:
        # stops inside the tick
        dx = speed * speed / (-2.0 * accel) if accel < 0 else 0.0
        new_speed = 0.0
    else:
        dx = speed * dt + 0.5 * accel * dt * dt
        new_speed = min(new_speed, v_max)
    return replace(v, x=v.x + dx, speed=new_speed, lane=lane, target_lane=target,
                   change_ticks=ticks), ignored


def overlaps(a: VehicleState, b: VehicleState) -> bool:
    """Undilated footprint overlap; symmetric in ``(a, b)``."""
    if abs(a.x - b.x) >= 0.5 * (a.length + b.length):
        return False
    return bool(set(a.lanes) & set(b.lanes))


def spawn_traffic(geometry: RoadGeometry, max_vehicles: int, rng: np.random.Generator,
                  occupied: tuple[VehicleState, ...] | list[VehicleState] = (),
                  spawn_range: tuple[float, float] = (0.0, 600.0),
                  min_gap: float = 15.0, length: float = 5.0,
                  max_attempts_per_vehicle: int = 50) -> list[VehicleState]:
    """Place up to ``max_vehicles`` non-overlapping ambient vehicles.

    Bumper-to-bumper gaps between vehicles sharing a lane (including the
    ``occupied`` ones) are at least ``min_gap``.  When the road cannot hold the
    requested count, fewer are placed and a warning is logged.
    """
    if max_vehicles < 0:
        raise ValueError("max_vehicles must be >= 0")
    lo_x, hi_x = spawn_range
    lo_v, hi_v = geometry.speed_limits
    placed: list[VehicleState] = []
    taken = list(occupied)
    attempts = 0
    budget = max_attempts_per_vehicle * max_vehicles
    while len(placed) < max_vehicles and attempts < budget:
        attempts += 1
        lane = int(rng.integers(geometry.lane_count))
        hi = hi_x
        if lane == geometry.merge_lane:
            hi = min(hi_x, geometry.merge_point - 60.0)
        if hi <= lo_x:
            continue
        x = float(rng.uniform(lo_x, hi))
        speed = float(rng.uniform(lo_v, hi_v))
        ok = True
        for other in taken:
            if lane in other.lanes and abs(other.x - x) - 0.5 * (other.length + length) < min_gap:
                ok = False
                break
        if not ok:
            continue
        veh = VehicleState(x=x, lane=lane, speed=speed, target_lane=lane, length=length,
                           desired_speed=max(speed, 1.0))
        placed.append(veh)
        taken.append(veh)
    if len(placed) < max_vehicles:
        log.warning("placed %d of %d requested vehicles", len(placed), max_vehicles)
    return placed


def lidar_observe(ego: VehicleState, others, inflation: float = 1.0, K: int = 16,
                  sensing_range: float = 60.0, lane_width: float = 4.0,
                  max_speed: float = 40.0, geometry: RoadGeometry | None = None,
                  ) -> np.ndarray:
    """Lidar observation of length ``2K + 3``.

    Layout: ``K`` normalized nearest-hit distances (1.0 = no hit within range),
    ``K`` relative longitudinal speeds along each ray (normalized by
    ``max_speed``), then ego speed / max_speed, normalized lane index and the
    merging-lane flag.  Other footprints are scaled by ``inflation`` about their
    centers before ray casting.
    """
    geometry = geometry or RoadGeometry(lane_width=lane_width)
    others = list(others)
    lw = geometry.lane_width
    return _lidar(ego.x, ego.lateral(lw), ego.speed, ego.lane,
                  np.array([o.x for o in others], dtype=float),
                  np.array([o.lateral(lw) for o in others], dtype=float),
                  np.array([o.length for o in others], dtype=float),
                  np.array([o.width for o in others], dtype=float),
                  np.array([o.speed for o in others], dtype=float),
                  inflation, K, sensing_range, max_speed, geometry)


class _TrigCache(dict):
    def __init__(self, fn):
        super().__init__()
        self.fn = fn

    def __missing__(self, K):
        val = self.fn(2.0 * np.pi * np.arange(K) / K)
        self[K] = val
        return val


_COS = _TrigCache(np.cos)
_SIN = _TrigCache(np.sin)


def _lidar(ex, ey, espeed, elane, ox, oy, lengths, widths, speeds, inflation, K,
           sensing_range, max_speed, geometry) -> np.ndarray:
    if K < 4:
        raise ValueError("need at least 4 lidar sectors")
    if inflation <= 0:
        raise ValueError("inflation must be positive")
    out = np.empty(2 * K + 3)
    _lidar_kernel(float(ex), float(ey), float(espeed), np.asarray(ox, dtype=np.float64),
                  np.asarray(oy, dtype=np.float64), np.asarray(lengths, dtype=np.float64),
                  np.asarray(widths, dtype=np.float64), np.asarray(speeds, dtype=np.float64),
                  float(inflation), float(sensing_range), float(max_speed), _COS[K], _SIN[K], out)
    out[2 * K] = min(espeed / max_speed, 1.0)
    out[2 * K + 1] = elane / max(geometry.lane_count - 1, 1)
    out[2 * K + 2] = 1.0 if elane == geometry.merge_lane else 0.0
    return out


@njit(cache=True)
def _ray_rect(dx, dy, xmin, xmax, ymin, ymax):
    # slab test for a ray from the origin; returns inf on a miss
    if abs(dx) < 1e-12:
        if xmin > 0.0 or xmax < 0.0:
            return np.inf
        tx_lo, tx_hi = -np.inf, np.inf
    else:
        t1, t2 = xmin / dx, xmax / dx
        tx_lo, tx_hi = min(t1, t2), max(t1, t2)
    if abs(dy) < 1e-12:
        if ymin > 0.0 or ymax < 0.0:
            return np.inf
        ty_lo, ty_hi = -np.inf, np.inf
    else:
        t1, t2 = ymin / dy, ymax / dy
        ty_lo, ty_hi = min(t1, t2), max(t1, t2)
    t_near = max(tx_lo, ty_lo)
    t_far = min(tx_hi, ty_hi)
    if t_far >= max(t_near, 0.0) and t_far < np.inf:
        return max(t_near, 0.0)
    return np.inf


@njit(cache=True)
def _lidar_kernel(ex, ey, espeed, ox, oy, lengths, widths, speeds, inflation,
                  sensing_range, max_speed, cos_k, sin_k, out):
    K = cos_k.shape[0]
    n = ox.shape[0]
    for k in range(K):
        best = np.inf
        best_j = -1
        for j in range(n):
            hl = 0.5 * inflation * lengths[j]
            hw = 0.5 * inflation * widths[j]
            cx = ox[j] - ex
            cy = oy[j] - ey
            if abs(cx) - hl >= sensing_range or abs(cy) - hw >= sensing_range:
                continue
            t = _ray_rect(cos_k[k], sin_k[k], cx - hl, cx + hl, cy - hw, cy + hw)
            if t < best:
                best = t
                best_j = j
        if best_j >= 0 and best <= sensing_range:
            out[k] = best / sensing_range
            r = (speeds[best_j] - espeed) * cos_k[k] / max_speed
            out[K + k] = min(max(r, -1.0), 1.0)
        else:
            out[k] = 1.0
            out[K + k] = 0.0


def ray_rect_distances(K: int, cx, cy, hl, hw) -> np.ndarray:
    """Entry distance of ``K`` evenly spaced rays from the origin into each
    axis-aligned rectangle; ``inf`` where a ray misses.  Shape ``(K, n)``.

    An origin inside a rectangle gives distance 0.
    """
    dx = _COS[K][:, None]
    dy = _SIN[K][:, None]
    xmin, xmax = (cx - hl)[None, :], (cx + hl)[None, :]
    ymin, ymax = (cy - hw)[None, :], (cy + hw)[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        tx1, tx2 = xmin / dx, xmax / dx
        ty1, ty2 = ymin / dy, ymax / dy
    small_x = np.abs(dx) < 1e-12
    small_y = np.abs(dy) < 1e-12
    inside_x = (xmin <= 0) & (xmax >= 0)
    inside_y = (ymin <= 0) & (ymax >= 0)
    tx_lo = np.where(small_x, np.where(inside_x, -np.inf, np.inf), np.minimum(tx1, tx2))
    tx_hi = np.where(small_x, np.where(inside_x, np.inf, -np.inf), np.maximum(tx1, tx2))
    ty_lo = np.where(small_y, np.where(inside_y, -np.inf, np.inf), np.minimum(ty1, ty2))
    ty_hi = np.where(small_y, np.where(inside_y, np.inf, -np.inf), np.maximum(ty1, ty2))
    t_near = np.maximum(tx_lo, ty_lo)
    t_far = np.minimum(tx_hi, ty_hi)
    hit = (t_far >= np.maximum(t_near, 0.0)) & np.isfinite(t_far)
    return np.where(hit, np.maximum(t_near, 0.0), np.inf)


@njit(cache=True)
def _idm(v, v0, gap, lead, s0, T, amax, b, delta, bmax):
    if gap <= 0.0:
        return -bmax
    free = (v / max(v0, 1.0)) ** delta
    inter = 0.0
    if gap < np.inf:
        s_star = s0 + v * T + v * (v - lead) / (2.0 * np.sqrt(amax * b))
        inter = (s_star / gap) ** 2
    a = amax * (1.0 - free - inter)
    return min(max(a, -bmax), amax)


@njit(cache=True)
def _shares(l1, t1, l2, t2):
    return l1 == l2 or l1 == t2 or t1 == l2 or t1 == t2


@njit(cache=True)
def _leader(i, x, lane, target, speed, length, merge_lane, merge_point):
    n = x.shape[0]
    g = np.inf
    lead = speed[i]
    for j in range(n):
        if j == i:
            continue
        if not (x[j] > x[i] or (x[j] == x[i] and j > i)):
            continue
        if not _shares(lane[i], target[i], lane[j], target[j]):
            continue
        gap = x[j] - x[i] - 0.5 * (length[i] + length[j])
        if gap < g:
            g = gap
            lead = speed[j]
    if merge_lane >= 0 and (lane[i] == merge_lane or target[i] == merge_lane) and x[i] < merge_point:
        end_gap = merge_point - x[i] - 0.5 * length[i]
        if end_gap < g:
            g = end_gap
            lead = 0.0
    return g, lead


@njit(cache=True)
def _merge_ok(k, tgt, x, lane, target, speed, desired, length, idm, accept_decel):
    s0, T, amax, b, delta, bmax = idm[0], idm[1], idm[2], idm[3], idm[4], idm[5]
    for j in range(x.shape[0]):
        if j == k or not (lane[j] == tgt or target[j] == tgt):
            continue
        gap = abs(x[j] - x[k]) - 0.5 * (length[j] + length[k])
        if x[j] > x[k]:
            if gap < s0:
                return False
        else:
            if gap < 0.5 * s0:
                return False
            if _idm(speed[j], desired[j], gap, speed[k], s0, T, amax, b, delta, bmax) < -accept_decel:
                return False
    return True


@njit(cache=True)
def _tick_kernel(x, lane, target, speed, desired, ticks, length, ego_cmd, idm, merge_lane,
                 merge_point, lane_count, lane_change_ticks, dt, v_max, accept_decel):
    s0, T, amax, b, delta, bmax = idm[0], idm[1], idm[2], idm[3], idm[4], idm[5]
    n = x.shape[0]
    acc = np.empty(n)
    cmd = np.zeros(n, dtype=np.int64)
    cmd[0] = ego_cmd
    for i in range(n):
        g, lead = _leader(i, x, lane, target, speed, length, merge_lane, merge_point)
        acc[i] = _idm(speed[i], desired[i], g, lead, s0, T, amax, b, delta, bmax)
        if (i > 0 and merge_lane > 0 and lane[i] == merge_lane and ticks[i] == 0
                and _merge_ok(i, merge_lane - 1, x, lane, target, speed, desired, length,
                              idm, accept_decel)):
            cmd[i] = -1
    ignored = False
    for i in range(n):
        if cmd[i] != 0:
            nl = lane[i] + cmd[i]
            exists = 0 <= nl < lane_count
            if nl == merge_lane and x[i] >= merge_point:
                exists = False
            if ticks[i] == 0 and exists:
                target[i] = nl
                ticks[i] = lane_change_ticks
            elif i == 0:
                ignored = True
        if ticks[i] > 0:
            ticks[i] -= 1
            if ticks[i] == 0:
                lane[i] = target[i]
        v = speed[i]
        a = acc[i]
        nv = v + a * dt
        if nv < 0.0:
            x[i] += v * v / (-2.0 * a) if a < 0.0 else 0.0
            speed[i] = 0.0
        else:
            x[i] += v * dt + 0.5 * a * dt * dt
            speed[i] = min(nv, v_max)
    crash = False
    for j in range(1, n):
        if (abs(x[j] - x[0]) < 0.5 * (length[j] + length[0])
                and _shares(lane[0], target[0], lane[j], target[j])):
            crash = True
    return crash, ignored


class TrafficSim:
    """Ambient IDM traffic around one ego vehicle on a merge road.

    Vehicles live in parallel arrays; index 0 is the ego.  The per-tick kernel
    applies the same rules as ``idm_acceleration`` and ``step_vehicle``.
    """

    _FIELDS = ("x", "lane", "target", "speed", "desired", "ticks", "length", "width")

    def __init__(self, geometry: RoadGeometry, ego: VehicleState,
                 vehicles: list[VehicleState], idm: IDMParams | None = None,
                 dt: float = 1.0 / 15.0, v_max: float = 40.0, lane_change_ticks: int = 3,
                 merge_accept_decel: float = 4.0):
        self.geometry = geometry
        self.idm = idm or IDMParams()
        self.dt = dt
        self.v_max = v_max
        self.lane_change_ticks = lane_change_ticks
        self.merge_accept_decel = merge_accept_decel
        p = self.idm
        self._idm_vec = np.array([p.min_gap, p.time_headway, p.max_accel, p.comfort_decel,
                                  p.delta, p.emergency_decel])
        allv = [ego] + list(vehicles)
        self.x = np.array([v.x for v in allv], dtype=np.float64)
        self.lane = np.array([v.lane for v in allv], dtype=np.int64)
        self.target = np.array([v.target_lane for v in allv], dtype=np.int64)
        self.speed = np.array([v.speed for v in allv], dtype=np.float64)
        self.desired = np.array([v.desired_speed for v in allv], dtype=np.float64)
        self.ticks = np.array([v.change_ticks for v in allv], dtype=np.int64)
        self.length = np.array([v.length for v in allv], dtype=np.float64)
        self.width = np.array([v.width for v in allv], dtype=np.float64)

    def _vehicle(self, k: int) -> VehicleState:
        return VehicleState(x=float(self.x[k]), lane=int(self.lane[k]), speed=float(self.speed[k]),
                            target_lane=int(self.target[k]), length=float(self.length[k]),
                            is_ego=(k == 0), desired_speed=float(self.desired[k]),
                            change_ticks=int(self.ticks[k]), width=float(self.width[k]))

    @property
    def ego(self) -> VehicleState:
        return self._vehicle(0)

    @property
    def vehicles(self) -> list[VehicleState]:
        return [self._vehicle(k) for k in range(1, len(self.x))]

    def set_ego_desired_speed(self, speed: float) -> None:
        self.desired[0] = speed

    def tick(self, ego_command: LaneCommand | int = LaneCommand.KEEP) -> dict:
        """Advance all vehicles one tick; returns ``{'crash', 'ignored'}``."""
        geo = self.geometry
        cmd = {LaneCommand.KEEP: 0, LaneCommand.LEFT: -1, LaneCommand.RIGHT: 1}[LaneCommand(ego_command)]
        merge_lane = -1 if geo.merge_lane is None else geo.merge_lane
        crash, ignored = _tick_kernel(self.x, self.lane, self.target, self.speed, self.desired,
                                      self.ticks, self.length, cmd, self._idm_vec, merge_lane,
                                      float(geo.merge_point), geo.lane_count,
                                      self.lane_change_ticks, self.dt, self.v_max,
                                      self.merge_accept_decel)
        keep = self.x < geo.lane_length
        keep[0] = True
        if not keep.all():
            for name in self._FIELDS:
                setattr(self, name, getattr(self, name)[keep])
        return {"crash": bool(crash), "ignored": bool(ignored)}

    def observe(self, inflation: float, K: int, sensing_range: float, max_speed: float) -> np.ndarray:
        lw = self.geometry.lane_width
        y = 0.5 * (self.lane + self.target) * lw
        return _lidar(self.x[0], y[0], self.speed[0], int(self.lane[0]),
                      self.x[1:], y[1:], self.length[1:], self.width[1:], self.speed[1:],
                      inflation, K, sensing_range, max_speed, self.geometry)
