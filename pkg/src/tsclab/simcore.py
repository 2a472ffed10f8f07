"""Deterministic one-second traffic simulator with signal actuation.

Vehicles follow a gap-constrained constant-speed model: each tick a vehicle
advances by its free-flow speed unless blocked by the stop line or by the
5 m slot of its leader. A vehicle at the stop line crosses when its lane is
green, the lane's 2 s discharge headway has elapsed, and its next lane has
room at the entry. Right-turn lanes skip both the signal and the headway.

A tick runs: discharge, spawn, move, wait accrual, signal timers.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Protocol

from .errors import ConfigError, ControllerError, InvalidPhase, NotSwitchTime, ParseError
from .netmodel import PHASE_IDS, VEHICLE_LENGTH, FlowSpec, Movement, RoadNetwork, VehicleSpawn
from .observe import IntersectionObservation, observe

EPS = 1e-6
BOUNDARY_KEY = "<boundary>"


@dataclass(frozen=True)
class SimConfig:
    tick: int = 1
    green_duration: int = 30
    yellow_duration: int = 3
    all_red_duration: int = 2
    v_stop: float = 0.1
    free_flow_speed: float = 40 / 3.6
    discharge_headway: float = 2.0
    episode_length: int = 3600
    seed: int = 0

    def __post_init__(self):
        if self.tick != 1:
            raise ConfigError("only a 1 s tick is supported")
        for name in ("green_duration", "yellow_duration", "all_red_duration", "episode_length"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.discharge_headway <= 0 or self.v_stop <= 0:
            raise ConfigError("discharge_headway and v_stop must be positive")
        if not self.v_stop < self.free_flow_speed:
            raise ConfigError("v_stop must be below free_flow_speed")

    @property
    def transition(self) -> int:
        return self.yellow_duration + self.all_red_duration


class Stage(str, Enum):
    GREEN = "Green"
    YELLOW = "Yellow"
    ALL_RED = "AllRed"


@dataclass
class SignalState:
    """Signal of one intersection.

    ``stage_elapsed`` equals ``green_duration`` only at a switching step,
    where the controller must call :func:`apply_action`. Before the first
    decision no phase is active.
    """

    active_phase: str | None
    stage: Stage
    stage_elapsed: int
    pending_phase: str | None = None

    def at_switch(self, config: SimConfig) -> bool:
        return self.stage is Stage.GREEN and self.stage_elapsed >= config.green_duration

    def green_phase(self) -> str | None:
        return self.active_phase if self.stage is Stage.GREEN else None


@dataclass(slots=True, eq=False)
class VehicleState:
    id: str
    route: tuple[str, ...]
    route_index: int
    lane: str
    position: float
    speed: float
    spawn_time: int
    max_speed: float
    finish_time: int | None = None
    accumulated_wait: int = 0
    wait_by_intersection: dict[str, int] = field(default_factory=dict)

    @property
    def on_last_road(self) -> bool:
        return self.route_index == len(self.route) - 1


@dataclass
class SimState:
    network: RoadNetwork
    config: SimConfig
    t: int
    lanes: dict[str, list[VehicleState]]  # head (nearest stop line) first
    signals: dict[str, SignalState]
    schedule: list[VehicleSpawn]
    next_spawn: int = 0
    deferred: dict[str, deque] = field(default_factory=dict)
    finished: list[VehicleState] = field(default_factory=list)
    last_discharge: dict[str, float] = field(default_factory=dict)
    spawned: int = 0
    crossings: list[tuple[str, str]] = field(default_factory=list)  # (lane, vehicle) in the last tick
    deferral_log: list[tuple[int, str]] = field(default_factory=list)
    phase_of: dict[str, str] = field(default_factory=dict)

    def in_network(self) -> int:
        return sum(len(v) for v in self.lanes.values())

    def deferred_count(self) -> int:
        return sum(len(q) for q in self.deferred.values())

    def queued_total(self) -> int:
        v_stop = self.config.v_stop
        return sum(1 for vs in self.lanes.values() for v in vs if v.speed < v_stop)

    def vehicles(self) -> Iterable[VehicleState]:
        for vs in self.lanes.values():
            yield from vs


def init_state(network: RoadNetwork, flow: FlowSpec, config: SimConfig | None = None) -> SimState:
    config = config or SimConfig()
    signals = {
        i.id: SignalState(None, Stage.GREEN, config.green_duration) for i in network.intersections
    }
    return SimState(
        network=network,
        config=config,
        t=0,
        lanes={lid: [] for lid in network.lanes},
        signals=signals,
        schedule=flow.expand(),
        last_discharge={lid: -math.inf for lid in network.lanes},
        phase_of=lane_phase_map(network),
    )


def lane_phase_map(network: RoadNetwork) -> dict[str, str]:
    """Controlled lane id -> the phase that serves it."""
    table = {}
    for inter in network.intersections:
        for pid in PHASE_IDS:
            for lane in inter.phase_lanes(pid):
                table[lane] = pid
    return table


def apply_action(state: SimState, intersection: str, phase: str) -> SimState:
    """Start the next phase at a switching step.

    Re-selecting the active phase starts a new green at once; any other phase
    goes through yellow and all-red first.
    """
    if phase not in PHASE_IDS:
        raise InvalidPhase(f"unknown phase {phase!r}")
    sig = state.signals[intersection]
    if not sig.at_switch(state.config):
        raise NotSwitchTime(
            f"{intersection} is in {sig.stage.value} ({sig.stage_elapsed}s) at t={state.t}"
        )
    if phase == sig.active_phase:
        sig.stage_elapsed = 0
    else:
        sig.stage, sig.stage_elapsed, sig.pending_phase = Stage.YELLOW, 0, phase
    return state


def step(state: SimState, config: SimConfig | None = None) -> SimState:
    """Advance ``state`` by one tick in place and return it."""
    cfg = config or state.config
    net = state.network
    t = state.t
    lanes = state.lanes
    lane_info = net.lanes
    phase_of = state.phase_of
    state.crossings = []

    # discharge
    for inter in net.intersections:
        green = state.signals[inter.id].green_phase()
        for lane_id in inter.movement_lanes.values():
            queue = lanes[lane_id]
            if not queue:
                continue
            head = queue[0]
            lane = lane_info[lane_id]
            if head.on_last_road or head.position < lane.length - EPS:
                continue
            if lane.movement is not Movement.RIGHT:
                if phase_of[lane_id] != green:
                    continue
                if t - state.last_discharge[lane_id] < cfg.discharge_headway - EPS:
                    continue
            nxt = head.route_index + 1
            after = head.route[nxt + 1] if nxt + 1 < len(head.route) else None
            target = net.lane_for(head.route[nxt], after)
            tq = lanes[target]
            if tq and tq[-1].position < VEHICLE_LENGTH - EPS:
                continue  # spillback
            queue.pop(0)
            head.route_index = nxt
            head.lane = target
            head.position = 0.0
            tq.append(head)
            if lane.movement is not Movement.RIGHT:
                state.last_discharge[lane_id] = t
            state.crossings.append((lane_id, head.id))

    # spawn
    sched = state.schedule
    while state.next_spawn < len(sched) and sched[state.next_spawn].time <= t + EPS:
        spec = sched[state.next_spawn]
        state.next_spawn += 1
        entry = net.lane_for(spec.route[0], spec.route[1] if len(spec.route) > 1 else None)
        veh = VehicleState(spec.id, spec.route, 0, entry, 0.0, 0.0, t, spec.max_speed)
        state.deferred.setdefault(entry, deque()).append(veh)
        state.spawned += 1
    for entry, waiting in state.deferred.items():
        if not waiting:
            continue
        tq = lanes[entry]
        if not tq or tq[-1].position >= VEHICLE_LENGTH - EPS:
            tq.append(waiting.popleft())
        for veh in waiting:
            if veh.spawn_time == t:
                state.deferral_log.append((t, veh.id))

    # move
    vmax_cfg = cfg.free_flow_speed
    for lane_id, queue in lanes.items():
        if not queue:
            continue
        length = lane_info[lane_id].length
        leader_pos = None
        keep = []
        for veh in queue:
            pos = veh.position
            if leader_pos is None:
                limit = math.inf if veh.on_last_road else length
            else:
                limit = leader_pos - VEHICLE_LENGTH
            v = vmax_cfg if veh.max_speed > vmax_cfg else veh.max_speed
            new = pos + v
            if new >= limit - EPS:
                new = limit
            if new < pos:
                new = pos
            if leader_pos is None and veh.on_last_road and new >= length - EPS:
                veh.position = length
                veh.speed = v
                veh.finish_time = t + 1
                state.finished.append(veh)
                continue
            veh.speed = new - pos
            veh.position = new
            leader_pos = new
            keep.append(veh)
        if len(keep) != len(queue):
            lanes[lane_id] = keep

    # waiting
    v_stop = cfg.v_stop
    for lane_id, queue in lanes.items():
        if not queue:
            continue
        key = lane_info[lane_id].intersection or BOUNDARY_KEY
        for veh in queue:
            if veh.speed < v_stop:
                veh.accumulated_wait += 1
                veh.wait_by_intersection[key] = veh.wait_by_intersection.get(key, 0) + 1

    # signal timers
    for sig in state.signals.values():
        sig.stage_elapsed += 1
        if sig.stage is Stage.YELLOW and sig.stage_elapsed >= cfg.yellow_duration:
            sig.stage, sig.stage_elapsed = Stage.ALL_RED, 0
        elif sig.stage is Stage.ALL_RED and sig.stage_elapsed >= cfg.all_red_duration:
            sig.stage, sig.stage_elapsed = Stage.GREEN, 0
            sig.active_phase, sig.pending_phase = sig.pending_phase, None
        elif sig.stage is Stage.GREEN and sig.stage_elapsed > cfg.green_duration:
            sig.stage_elapsed = cfg.green_duration

    state.t = t + 1
    return state


# --------------------------------------------------------------------------
# episodes
# --------------------------------------------------------------------------


class DecisionMaker(Protocol):
    name: str

    def decide(self, obs: IntersectionObservation, t: int) -> str: ...


@dataclass(frozen=True)
class VehicleRecord:
    id: str
    spawn_time: int
    finish_time: int | None
    wait: int
    wait_by_intersection: dict[str, int]


@dataclass(frozen=True)
class SwitchRecord:
    t: int
    intersection: str
    obs: IntersectionObservation
    action: str


@dataclass
class EpisodeLog:
    episode_length: int
    queue_totals: list[int] = field(default_factory=list)
    vehicles: list[VehicleRecord] = field(default_factory=list)
    switches: list[SwitchRecord] = field(default_factory=list)
    deferrals: list[tuple[int, str]] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def spawned(self) -> int:
        return len(self.vehicles)

    def write_jsonl(self, fh) -> None:
        dump = lambda rec: fh.write(json.dumps(rec, sort_keys=True) + "\n")  # noqa: E731
        dump({"type": "meta", "episode_length": self.episode_length, **self.meta})
        for t, q in enumerate(self.queue_totals):
            dump({"type": "tick", "t": t, "queued": q})
        for s in self.switches:
            dump({"type": "switch", "t": s.t, "intersection": s.intersection, "action": s.action,
                  "obs": s.obs.to_dict()})
        for v in self.vehicles:
            dump({"type": "vehicle", **asdict(v)})
        for t, vid in self.deferrals:
            dump({"type": "deferral", "t": t, "vehicle": vid})

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            self.write_jsonl(fh)

    def to_jsonl(self) -> str:
        buf = io.StringIO()
        self.write_jsonl(buf)
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode()).hexdigest()

    @classmethod
    def read_jsonl(cls, lines: Iterable[str]) -> "EpisodeLog":
        log = None
        ticks: list[tuple[int, int]] = []
        for n, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                log = cls._read_record(log, ticks, json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(f"line {n}: {exc}") from exc
        if log is None:
            raise ParseError("empty episode log")
        log.queue_totals = [q for _, q in sorted(ticks)]
        return log

    @classmethod
    def _read_record(cls, log, ticks, rec):
        kind = rec.pop("type")
        if kind == "meta":
            return cls(rec.pop("episode_length"), meta=rec)
        if log is None:
            raise ValueError("episode log must start with a meta record")
        if kind == "tick":
            ticks.append((rec["t"], rec["queued"]))
        elif kind == "switch":
            obs = IntersectionObservation.from_dict(rec["obs"])
            log.switches.append(SwitchRecord(rec["t"], rec["intersection"], obs, rec["action"]))
        elif kind == "vehicle":
            log.vehicles.append(VehicleRecord(**rec))
        elif kind == "deferral":
            log.deferrals.append((rec["t"], rec["vehicle"]))
        else:
            raise ValueError(f"unknown record type {kind!r}")
        return log

    @classmethod
    def load(cls, path: str | Path) -> "EpisodeLog":
        with open(path, encoding="utf-8") as fh:
            try:
                return cls.read_jsonl(fh)
            except ParseError as exc:
                raise ParseError(f"{path}: {exc}") from exc


def _vehicle_records(state: SimState) -> list[VehicleRecord]:
    everyone = list(state.finished) + list(state.vehicles())
    everyone += [v for q in state.deferred.values() for v in q]
    everyone.sort(key=lambda v: (v.spawn_time, v.id))
    return [
        VehicleRecord(v.id, v.spawn_time, v.finish_time, v.accumulated_wait,
                      dict(sorted(v.wait_by_intersection.items())))
        for v in everyone
    ]


def run_episode(
    network: RoadNetwork,
    flow: FlowSpec,
    controller: DecisionMaker,
    config: SimConfig | None = None,
    workers: int = 1,
    on_tick: Callable[[SimState], None] | None = None,
) -> EpisodeLog:
    """Simulate ``config.episode_length`` seconds under ``controller``.

    The controller is queried for every intersection at its switching steps;
    with ``workers`` > 1 those queries run concurrently, and actions are
    applied in intersection-id order either way.
    """
    config = config or SimConfig()
    state = init_state(network, flow, config)
    log = EpisodeLog(
        config.episode_length,
        meta={"controller": getattr(controller, "name", type(controller).__name__),
              "config": asdict(config)},
    )
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for t in range(config.episode_length):
            due = [i for i in network.intersections if state.signals[i.id].at_switch(config)]
            if due:
                observations = [observe(state, i) for i in due]

                def ask(obs, t=t):
                    try:
                        return controller.decide(obs, t)
                    except Exception as exc:
                        raise ControllerError(
                            f"controller {getattr(controller, 'name', controller)!r} failed at "
                            f"t={t}, intersection {obs.intersection}: {exc}"
                        ) from exc

                actions = list(pool.map(ask, observations)) if pool else [ask(o) for o in observations]
                for obs, action in zip(observations, actions):
                    apply_action(state, obs.intersection, action)
                    log.switches.append(SwitchRecord(t, obs.intersection, obs, action))
            step(state, config)
            log.queue_totals.append(state.queued_total())
            if on_tick is not None:
                on_tick(state)
    finally:
        if pool:
            pool.shutdown()
    log.vehicles = _vehicle_records(state)
    log.deferrals = list(state.deferral_log)
    return log
