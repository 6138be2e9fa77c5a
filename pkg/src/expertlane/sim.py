"""Deterministic, seedable highway world.

Straight multi-lane road, one policy-controlled ego vehicle and IDM/MOBIL
traffic. Discrete ego actions, axis-aligned rectangle collision geometry,
and a fixed-width normalized observation vector. All randomness flows
through a single numpy Generator so identical seeds give bit-identical
trajectories.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

logger = logging.getLogger(__name__)

POSITION_NORM = 100.0  # meters mapped to 1.0 in observations
SPEED_DELTA = 2.5  # m/s change per FASTER/SLOWER action
MIN_SPAWN_GAP = 15.0  # same-lane center spacing at reset


class SimError(RuntimeError):
    """Misuse of the simulator (e.g. stepping a finished episode)."""


class SpawnError(SimError):
    """Could not place the requested number of vehicles."""


class Action(enum.IntEnum):
    LANE_LEFT = 0
    IDLE = 1
    LANE_RIGHT = 2
    FASTER = 3
    SLOWER = 4


@dataclass
class SimConfig:
    lane_count: int = 4
    lane_width: float = 4.0
    vehicle_count: int = 10  # including the ego
    v_min: float = 20.0
    v_max: float = 30.0
    policy_dt: float = 1.0
    physics_substeps: int = 15
    episode_time_limit: float = 40.0
    vehicle_length: float = 5.0
    vehicle_width: float = 2.0
    reward_a: float = 0.4
    reward_b: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lane_count < 2:
            raise ValueError("lane_count must be >= 2")
        if not (0.0 < self.v_min < self.v_max):
            raise ValueError("need 0 < v_min < v_max")
        if self.policy_dt <= 0 or self.episode_time_limit <= 0:
            raise ValueError("policy_dt and episode_time_limit must be positive")
        if self.reward_a < 0 or self.reward_b < 0:
            raise ValueError("reward coefficients must be non-negative")
        if self.physics_substeps < 1:
            raise ValueError("physics_substeps must be >= 1")

    @property
    def observation_dim(self) -> int:
        return 4 * (self.vehicle_count + 1)

    @classmethod
    def from_file(cls, path: str | Path) -> "SimConfig":
        """Load a flat key/value config file (YAML syntax, fixed key set)."""
        raw = yaml.safe_load(Path(path).read_text())
        if not isinstance(raw, dict):
            raise ValueError(f"config file {path} is not a key/value mapping")
        known = set(_CONFIG_KEYS)
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {_CONFIG_KEYS[k]: v for k, v in raw.items()}
        return cls(**kwargs)

    def to_file(self, path: str | Path) -> None:
        fields = {k: getattr(self, v) for k, v in _CONFIG_KEYS.items()}
        Path(path).write_text(yaml.safe_dump(fields, sort_keys=False))


_CONFIG_KEYS = {
    "lanes": "lane_count",
    "lane_width": "lane_width",
    "vehicles": "vehicle_count",
    "v_min": "v_min",
    "v_max": "v_max",
    "policy_dt": "policy_dt",
    "substeps": "physics_substeps",
    "time_limit": "episode_time_limit",
    "reward_a": "reward_a",
    "reward_b": "reward_b",
    "seed": "seed",
}


@dataclass
class VehicleState:
    x: float
    y: float
    vx: float
    vy: float
    lane: int
    is_ego: bool = False
    # Controller state: desired cruise speed (IDM v0 for traffic, action target
    # for the ego) and the lane a lateral maneuver is heading to.
    target_speed: float = 0.0
    target_lane: int = 0

    def mid_maneuver(self, config: SimConfig) -> bool:
        return abs(self.y - lane_center(self.target_lane, config)) > 1e-9


@dataclass
class WorldState:
    time: float
    vehicles: list[VehicleState]  # ego first
    done: bool = False
    collided: bool = False
    step_count: int = 0

    @property
    def ego(self) -> VehicleState:
        return self.vehicles[0]


@dataclass
class EgoObservation:
    """Fixed-width vector: ego block then one block per other-vehicle slot.

    Layout is (x, y, vx, vy) for the ego followed by ego-relative
    (dx, dy, dvx, dvy) per slot, positions scaled by 1/100 m, speeds by
    1/v_max, everything clipped to [-1, 1]. Slots are ordered by ascending
    longitudinal distance (ties by lane index) and zero-padded when fewer
    vehicles exist.
    """

    values: np.ndarray


@dataclass
class StepOutcome:
    observation: EgoObservation
    r_origin: float
    done: bool
    collided: bool
    elapsed: float


@dataclass(frozen=True)
class IdmParams:
    v0: float = 30.0  # desired speed
    headway: float = 1.5  # T, seconds
    min_gap: float = 10.0  # s0, meters
    a_max: float = 3.0
    b_dec: float = 5.0  # comfortable deceleration in s*
    b_max: float = 9.0  # hard braking bound
    delta: float = 4.0


@dataclass(frozen=True)
class MobilParams:
    b_safe: float = 4.0  # max braking imposed on the new follower
    a_threshold: float = 0.2  # required own acceleration gain


def lane_center(lane: int, config: SimConfig) -> float:
    return (lane + 0.5) * config.lane_width


def lane_of(y: float, config: SimConfig) -> int:
    return int(np.clip(math.floor(y / config.lane_width), 0, config.lane_count - 1))


def reward_origin(v: float, collided: bool, config: SimConfig) -> float:
    """Speed-proportional reward minus the collision penalty."""
    if v < config.v_min or v > config.v_max:
        logger.warning("reward_origin: speed %.3f outside [%g, %g], clamping", v, config.v_min, config.v_max)
        v = min(max(v, config.v_min), config.v_max)
    frac = (v - config.v_min) / (config.v_max - config.v_min)
    return config.reward_a * frac - config.reward_b * (1.0 if collided else 0.0)


def rectangles_overlap(a: VehicleState, b: VehicleState, config: SimConfig) -> bool:
    """Positive-area overlap of two axis-aligned vehicle footprints."""
    return (
        abs(a.x - b.x) < config.vehicle_length
        and abs(a.y - b.y) < config.vehicle_width
    )


def collision_check(world: WorldState, config: SimConfig) -> bool:
    ego = world.ego
    return any(rectangles_overlap(ego, other, config) for other in world.vehicles[1:])


def idm_acceleration(ego_gap: float, v: float, v_lead: float, params: IdmParams = IdmParams()) -> float:
    """Intelligent Driver Model acceleration for a bumper-to-bumper gap."""
    if ego_gap <= 0.0:
        return -params.b_max
    s_star = params.min_gap + v * params.headway + v * (v - v_lead) / (
        2.0 * math.sqrt(params.a_max * params.b_dec)
    )
    a = params.a_max * (1.0 - (v / params.v0) ** params.delta - (s_star / ego_gap) ** 2)
    return min(max(a, -params.b_max), params.a_max)


def _leader(vehicle: VehicleState, world: WorldState, lane: int) -> VehicleState | None:
    best = None
    for other in world.vehicles:
        if other is vehicle or other.lane != lane or other.x <= vehicle.x:
            continue
        if best is None or other.x < best.x:
            best = other
    return best


def _follower(vehicle: VehicleState, world: WorldState, lane: int) -> VehicleState | None:
    best = None
    for other in world.vehicles:
        if other is vehicle or other.lane != lane or other.x > vehicle.x:
            continue
        if best is None or other.x > best.x:
            best = other
    return best


def _own_idm(vehicle: VehicleState, world: WorldState, lane: int, config: SimConfig) -> float:
    lead = _leader(vehicle, world, lane)
    gap = math.inf if lead is None else lead.x - vehicle.x - config.vehicle_length
    v_lead = vehicle.vx if lead is None else lead.vx
    return idm_acceleration(gap, vehicle.vx, v_lead, IdmParams(v0=vehicle.target_speed))


def mobil_decision(
    vehicle: VehicleState,
    world: WorldState,
    config: SimConfig,
    params: MobilParams = MobilParams(),
) -> str:
    """Politeness-zero MOBIL: 'left', 'right' or 'stay'.

    A change requires the new follower's induced braking to stay within
    b_safe and the vehicle's own IDM acceleration to improve by at least
    a_threshold; left wins ties.
    """
    if vehicle.mid_maneuver(config):
        return "stay"
    a_now = _own_idm(vehicle, world, vehicle.lane, config)
    gains: dict[str, float] = {}
    for name, lane in (("left", vehicle.lane - 1), ("right", vehicle.lane + 1)):
        if lane < 0 or lane >= config.lane_count:
            continue
        # Anyone already alongside in the target lane vetoes the change.
        blocked = any(
            other is not vehicle
            and other.lane == lane
            and abs(other.x - vehicle.x) < config.vehicle_length
            for other in world.vehicles
        )
        if blocked:
            continue
        follower = _follower(vehicle, world, lane)
        if follower is not None:
            gap = vehicle.x - follower.x - config.vehicle_length
            braking = idm_acceleration(
                gap, follower.vx, vehicle.vx, IdmParams(v0=follower.target_speed)
            )
            if braking < -params.b_safe:
                continue
        gain = _own_idm(vehicle, world, lane, config) - a_now
        if gain >= params.a_threshold:
            gains[name] = gain
    if not gains:
        return "stay"
    if len(gains) == 2 and gains["right"] > gains["left"]:
        return "right"
    return "left" if "left" in gains else "right"


def observe(world: WorldState, config: SimConfig) -> EgoObservation:
    ego = world.ego
    values = np.zeros(config.observation_dim)
    values[0] = ego.x / POSITION_NORM
    values[1] = ego.y / POSITION_NORM
    values[2] = ego.vx / config.v_max
    values[3] = ego.vy / config.v_max
    others = sorted(world.vehicles[1:], key=lambda v: (abs(v.x - ego.x), v.lane))
    for slot, other in enumerate(others):
        base = 4 * (slot + 1)
        values[base + 0] = (other.x - ego.x) / POSITION_NORM
        values[base + 1] = (other.y - ego.y) / POSITION_NORM
        values[base + 2] = (other.vx - ego.vx) / config.v_max
        values[base + 3] = (other.vy - ego.vy) / config.v_max
    np.clip(values, -1.0, 1.0, out=values)
    return EgoObservation(values=values)


def decode_observation(
    obs: EgoObservation, config: SimConfig
) -> tuple[tuple[float, float, float, float], list[tuple[float, float, float, float]]]:
    """Invert the observation scaling: absolute ego tuple plus relative
    (dx, dy, dvx, dvy) tuples for every non-padded slot."""
    v = obs.values
    ego = (
        v[0] * POSITION_NORM,
        v[1] * POSITION_NORM,
        v[2] * config.v_max,
        v[3] * config.v_max,
    )
    others = []
    for base in range(4, len(v), 4):
        block = v[base : base + 4]
        if not np.any(block):
            continue
        others.append(
            (
                block[0] * POSITION_NORM,
                block[1] * POSITION_NORM,
                block[2] * config.v_max,
                block[3] * config.v_max,
            )
        )
    return ego, others


def reset(config: SimConfig, seed: int | None = None) -> tuple[WorldState, EgoObservation]:
    """Spawn a fresh world: random lanes, same-lane spacing >= 15 m, uniform speeds."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    ego_lane = int(rng.integers(config.lane_count))
    ego_speed = float(rng.uniform(config.v_min, config.v_max))
    ego = VehicleState(
        x=0.0,
        y=lane_center(ego_lane, config),
        vx=ego_speed,
        vy=0.0,
        lane=ego_lane,
        is_ego=True,
        target_speed=ego_speed,
        target_lane=ego_lane,
    )
    vehicles = [ego]
    span_lo, span_hi = -40.0, 260.0  # fixed spawn zone around the ego
    for _ in range(config.vehicle_count - 1):
        placed = False
        for _ in range(200):
            lane = int(rng.integers(config.lane_count))
            x = float(rng.uniform(span_lo, span_hi))
            if any(v.lane == lane and abs(v.x - x) < MIN_SPAWN_GAP for v in vehicles):
                continue
            speed = float(rng.uniform(config.v_min, config.v_max))
            desired = float(rng.uniform(config.v_min, config.v_max))
            vehicles.append(
                VehicleState(
                    x=x,
                    y=lane_center(lane, config),
                    vx=speed,
                    vy=0.0,
                    lane=lane,
                    target_speed=desired,
                    target_lane=lane,
                )
            )
            placed = True
            break
        if not placed:
            raise SpawnError(
                f"could not place {config.vehicle_count} vehicles with "
                f"{MIN_SPAWN_GAP} m same-lane spacing"
            )
    world = WorldState(time=0.0, vehicles=vehicles)
    return world, observe(world, config)


def _apply_ego_action(ego: VehicleState, action: Action, config: SimConfig) -> None:
    if action == Action.FASTER:
        ego.target_speed = min(ego.target_speed + SPEED_DELTA, config.v_max)
    elif action == Action.SLOWER:
        ego.target_speed = max(ego.target_speed - SPEED_DELTA, config.v_min)
    elif action in (Action.LANE_LEFT, Action.LANE_RIGHT) and not ego.mid_maneuver(config):
        # Off-road lane requests degrade to IDLE.
        delta = -1 if action == Action.LANE_LEFT else 1
        target = ego.target_lane + delta
        if 0 <= target < config.lane_count:
            ego.target_lane = target
    ego.vx = min(max(ego.target_speed, config.v_min), config.v_max)


def step(world: WorldState, ego_action: Action, config: SimConfig) -> StepOutcome:
    """Advance one decision period: ego action, MOBIL decisions, substepped physics."""
    if world.done:
        raise SimError("step() called on a terminated world")
    t_start = world.step_count * config.policy_dt
    ego = world.ego
    _apply_ego_action(ego, Action(ego_action), config)

    for vehicle in world.vehicles[1:]:
        choice = mobil_decision(vehicle, world, config)
        if choice == "left":
            vehicle.target_lane = vehicle.lane - 1
        elif choice == "right":
            vehicle.target_lane = vehicle.lane + 1

    dt = config.policy_dt / config.physics_substeps
    lateral_rate = config.lane_width / config.policy_dt
    substeps_done = 0
    for _ in range(config.physics_substeps):
        for vehicle in world.vehicles[1:]:
            lead = _leader(vehicle, world, vehicle.lane)
            gap = math.inf if lead is None else lead.x - vehicle.x - config.vehicle_length
            v_lead = vehicle.vx if lead is None else lead.vx
            a = idm_acceleration(gap, vehicle.vx, v_lead, IdmParams(v0=vehicle.target_speed))
            vehicle.vx = min(max(vehicle.vx + a * dt, 0.0), config.v_max)
        for vehicle in world.vehicles:
            target_y = lane_center(vehicle.target_lane, config)
            offset = target_y - vehicle.y
            if abs(offset) > 1e-12:
                dy = math.copysign(min(abs(offset), lateral_rate * dt), offset)
                vehicle.y += dy
                vehicle.vy = dy / dt
            else:
                vehicle.vy = 0.0
            vehicle.x += vehicle.vx * dt
            vehicle.lane = lane_of(vehicle.y, config)
        substeps_done += 1
        if collision_check(world, config):
            world.collided = True
            break

    if substeps_done == config.physics_substeps:
        world.time = (world.step_count + 1) * config.policy_dt
    else:
        world.time = t_start + substeps_done * dt
    world.step_count += 1
    world.done = world.collided or world.time >= config.episode_time_limit

    r = reward_origin(world.ego.vx, world.collided, config)
    return StepOutcome(
        observation=observe(world, config),
        r_origin=r,
        done=world.done,
        collided=world.collided,
        elapsed=world.time - t_start,
    )


@dataclass
class StepRecord:
    """One line of a trajectory dump: the pre-step state, the action taken in
    it, and the step's reward/collision outcome."""

    time: float
    vehicles: list[tuple[float, float, float, float, int]]
    action: int
    reward: float
    collided: bool


class TrajectoryWriter:
    """Line-delimited JSON trajectory dumps consumed by the risk-dataset builder."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._fh = self.path.open("w")

    def append(self, world_before: WorldState, action: Action, outcome: StepOutcome) -> None:
        record = {
            "time": world_before.time,
            "vehicles": [
                [v.x, v.y, v.vx, v.vy, v.lane] for v in world_before.vehicles
            ],
            "action": int(action),
            "reward": outcome.r_origin,
            "collided": outcome.collided,
        }
        self._fh.write(json.dumps(record) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "TrajectoryWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_trajectory(path: str | Path) -> list[StepRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            raw = json.loads(line)
            records.append(
                StepRecord(
                    time=raw["time"],
                    vehicles=[tuple(v) for v in raw["vehicles"]],
                    action=raw["action"],
                    reward=raw["reward"],
                    collided=raw["collided"],
                )
            )
    return records


def world_from_record(record: StepRecord, config: SimConfig) -> WorldState:
    """Rebuild a WorldState (ego first) from a dump line, for feature extraction."""
    vehicles = []
    for i, (x, y, vx, vy, lane) in enumerate(record.vehicles):
        vehicles.append(
            VehicleState(
                x=x, y=y, vx=vx, vy=vy, lane=int(lane), is_ego=(i == 0),
                target_speed=vx, target_lane=int(lane),
            )
        )
    return WorldState(time=record.time, vehicles=vehicles)
