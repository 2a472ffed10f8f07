"""Road-network and traffic-flow model.

Networks are read from (and written to) the CityFlow ``roadnet.json`` /
``flow.json`` layout; only geometry, turn annotations and flow entries are
used. Every road is collapsed to three movement lanes (left, through,
right), whatever its lane count in the source file.

Coordinates follow CityFlow: ``x`` grows eastward and ``y`` northward.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import ParseError, RouteError, TopologyError

VEHICLE_LENGTH = 5.0
DEFAULT_SEGMENTS = 3
DEFAULT_MAX_SPEED = 40 / 3.6  # 40 km/h


class Movement(str, Enum):
    LEFT = "Left"
    THROUGH = "Through"
    RIGHT = "Right"


class Approach(str, Enum):
    """Side of an intersection a lane arrives from."""

    N = "N"
    S = "S"
    E = "E"
    W = "W"


# CityFlow lane index inside a road, and roadLink "type" strings.
LANE_INDEX = {Movement.LEFT: 0, Movement.THROUGH: 1, Movement.RIGHT: 2}
CITYFLOW_TURN = {"turn_left": Movement.LEFT, "go_straight": Movement.THROUGH, "turn_right": Movement.RIGHT}
TURN_NAME = {v: k for k, v in CITYFLOW_TURN.items()}

PHASE_IDS = ("ETWT", "ELWL", "NTST", "NLSL")
PHASE_MOVEMENTS: dict[str, tuple[tuple[Approach, Movement], tuple[Approach, Movement]]] = {
    "ETWT": ((Approach.E, Movement.THROUGH), (Approach.W, Movement.THROUGH)),
    "ELWL": ((Approach.E, Movement.LEFT), (Approach.W, Movement.LEFT)),
    "NTST": ((Approach.N, Movement.THROUGH), (Approach.S, Movement.THROUGH)),
    "NLSL": ((Approach.N, Movement.LEFT), (Approach.S, Movement.LEFT)),
}

_OPPOSITE = {Approach.N: Approach.S, Approach.S: Approach.N, Approach.E: Approach.W, Approach.W: Approach.E}
_LEFT_OF = {Approach.W: Approach.S, Approach.S: Approach.E, Approach.E: Approach.N, Approach.N: Approach.W}
_RIGHT_OF = {v: k for k, v in _LEFT_OF.items()}


def exit_side(approach: Approach, movement: Movement) -> Approach:
    """Side of the intersection a vehicle leaves through."""
    heading = _OPPOSITE[approach]
    if movement is Movement.THROUGH:
        return heading
    if movement is Movement.LEFT:
        return _LEFT_OF[heading]
    return _RIGHT_OF[heading]


@dataclass(frozen=True)
class Node:
    id: str
    x: float
    y: float
    virtual: bool


@dataclass(frozen=True)
class Road:
    id: str
    start: str
    end: str
    points: tuple[tuple[float, float], ...]
    max_speed: float = DEFAULT_MAX_SPEED
    lane_width: float = 3.0

    @property
    def length(self) -> float:
        return polyline_length(self.points)


@dataclass(frozen=True)
class Lane:
    id: str
    road: str
    movement: Movement
    length: float
    approach: Approach
    segment_count: int = DEFAULT_SEGMENTS
    downstream_lanes: tuple[str, ...] = ()
    intersection: str | None = None

    def __post_init__(self):
        if self.length <= 0:
            raise TopologyError(f"lane {self.id} has non-positive length {self.length}")
        if self.segment_count < 1:
            raise TopologyError(f"lane {self.id} needs at least one segment")

    @property
    def controlled(self) -> bool:
        return self.intersection is not None and self.movement is not Movement.RIGHT


@dataclass(frozen=True)
class Phase:
    id: str
    allowed_lanes: frozenset[str]


@dataclass(frozen=True)
class Intersection:
    id: str
    x: float
    y: float
    incoming: Mapping[Approach, str]
    outgoing: Mapping[Approach, str]
    movement_lanes: Mapping[tuple[Approach, Movement], str]

    @property
    def controlled_lanes(self) -> tuple[str, ...]:
        return tuple(lane for phase in PHASE_IDS for lane in self.phase_lanes(phase))

    def phase_lanes(self, phase_id: str) -> tuple[str, str]:
        a, b = PHASE_MOVEMENTS[phase_id]
        return self.movement_lanes[a], self.movement_lanes[b]


@dataclass(frozen=True)
class RoadNetwork:
    nodes: Mapping[str, Node]
    roads: Mapping[str, Road]
    intersections: tuple[Intersection, ...]
    lanes: Mapping[str, Lane]
    turns: Mapping[tuple[str, str], Movement] = field(repr=False)

    @property
    def boundary_nodes(self) -> frozenset[str]:
        return frozenset(n.id for n in self.nodes.values() if n.virtual)

    def intersection(self, inter_id: str) -> Intersection:
        for inter in self.intersections:
            if inter.id == inter_id:
                return inter
        raise KeyError(inter_id)

    def road_lanes(self, road_id: str) -> tuple[str, str, str]:
        return tuple(f"{road_id}_{i}" for i in range(3))  # type: ignore[return-value]

    def lane_for(self, road_id: str, next_road: str | None) -> str:
        """Lane of ``road_id`` a vehicle uses to continue onto ``next_road``."""
        if next_road is None:
            return f"{road_id}_{LANE_INDEX[Movement.THROUGH]}"
        movement = self.turns.get((road_id, next_road))
        if movement is None:
            raise RouteError(f"no turn from {road_id} to {next_road}")
        return f"{road_id}_{LANE_INDEX[movement]}"

    def check_route(self, route: Sequence[str]) -> None:
        if not route:
            raise RouteError("empty route")
        for r in route:
            if r not in self.roads:
                raise RouteError(f"route references unknown road {r!r}")
        for a, b in zip(route, route[1:]):
            if (a, b) not in self.turns:
                raise RouteError(f"route has no connection {a} -> {b}")


def phase_table(intersection: Intersection) -> list[Phase]:
    """The four phases in fixed order ETWT, ELWL, NTST, NLSL."""
    return [Phase(pid, frozenset(intersection.phase_lanes(pid))) for pid in PHASE_IDS]


def polyline_length(points: Sequence[tuple[float, float]]) -> float:
    return sum(math.dist(p, q) for p, q in zip(points, points[1:]))


def _side_of(center: tuple[float, float], other: tuple[float, float]) -> Approach:
    dx, dy = other[0] - center[0], other[1] - center[1]
    if abs(dx) >= abs(dy):
        return Approach.E if dx > 0 else Approach.W
    return Approach.N if dy > 0 else Approach.S


# --------------------------------------------------------------------------
# construction
# --------------------------------------------------------------------------


def build_network(
    nodes: Iterable[Node],
    roads: Iterable[Road],
    turns: Mapping[tuple[str, str], Movement],
    segment_count: int = DEFAULT_SEGMENTS,
) -> RoadNetwork:
    """Assemble and validate a network from nodes, roads and turn links."""
    node_map = {n.id: n for n in nodes}
    road_map = {r.id: r for r in roads}
    for r in road_map.values():
        for end in (r.start, r.end):
            if end not in node_map:
                raise TopologyError(f"road {r.id} references unknown node {end!r}")
        if len(r.points) < 2 or r.length <= 0:
            raise TopologyError(f"road {r.id} has degenerate geometry")
    for a, b in turns:
        if a not in road_map or b not in road_map:
            raise TopologyError(f"turn {a} -> {b} references an unknown road")
        if road_map[a].end != road_map[b].start:
            raise TopologyError(f"turn {a} -> {b} does not share a node")

    incoming: dict[str, dict[Approach, str]] = {}
    outgoing: dict[str, dict[Approach, str]] = {}
    for r in road_map.values():
        end, start = node_map[r.end], node_map[r.start]
        if not end.virtual:
            side = _side_of((end.x, end.y), r.points[-2])
            if side in incoming.setdefault(end.id, {}):
                raise TopologyError(f"two roads arrive at {end.id} from {side.value}")
            incoming[end.id][side] = r.id
        if not start.virtual:
            side = _side_of((start.x, start.y), r.points[1])
            if side in outgoing.setdefault(start.id, {}):
                raise TopologyError(f"two roads leave {start.id} toward {side.value}")
            outgoing[start.id][side] = r.id

    lanes: dict[str, Lane] = {}
    for r in road_map.values():
        end = node_map[r.end]
        inter_id = None if end.virtual else end.id
        if end.virtual:
            approach = _side_of((end.x, end.y), r.points[-2])
        else:
            approach = next(a for a, rid in incoming[end.id].items() if rid == r.id)
        for movement, idx in LANE_INDEX.items():
            downstream: tuple[str, ...] = ()
            if inter_id is not None:
                targets = [b for (a, b), m in turns.items() if a == r.id and m is movement]
                downstream = tuple(f"{b}_{i}" for b in sorted(targets) for i in range(3))
            lanes[f"{r.id}_{idx}"] = Lane(
                id=f"{r.id}_{idx}",
                road=r.id,
                movement=movement,
                length=r.length,
                approach=approach,
                segment_count=segment_count,
                downstream_lanes=downstream,
                intersection=inter_id,
            )

    intersections = []
    for n in sorted((n for n in node_map.values() if not n.virtual), key=lambda n: n.id):
        inc = incoming.get(n.id, {})
        movement_lanes = {}
        for approach, road_id in inc.items():
            for movement, idx in LANE_INDEX.items():
                movement_lanes[(approach, movement)] = f"{road_id}_{idx}"
        inter = Intersection(n.id, n.x, n.y, dict(inc), dict(outgoing.get(n.id, {})), movement_lanes)
        missing = [
            f"{a.value}-{m.value}"
            for a in Approach
            for m in (Movement.THROUGH, Movement.LEFT)
            if (a, m) not in movement_lanes
            or not lanes[movement_lanes[(a, m)]].downstream_lanes
        ]
        if missing:
            raise TopologyError(
                f"intersection {n.id} lacks controlled lanes {missing}; need 8 (through+left per side)"
            )
        intersections.append(inter)

    return RoadNetwork(node_map, road_map, tuple(intersections), lanes, dict(turns))


def synth_grid(rows: int, cols: int, lane_length: float = 300.0, max_speed: float = DEFAULT_MAX_SPEED) -> RoadNetwork:
    """Regular grid of ``rows`` x ``cols`` four-way intersections.

    Naming follows CityFlow's generator: nodes ``intersection_{x}_{y}`` with
    virtual boundary nodes on the perimeter, roads ``road_{x}_{y}_{d}`` with
    ``d`` = 0 east, 1 north, 2 west, 3 south from node ``(x, y)``.
    """
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    if lane_length <= 0:
        raise ValueError("lane_length must be positive")

    def real(x: int, y: int) -> bool:
        return 1 <= x <= cols and 1 <= y <= rows

    nodes = []
    for x in range(cols + 2):
        for y in range(rows + 2):
            is_real = real(x, y)
            on_edge = (x in (0, cols + 1)) != (y in (0, rows + 1))
            if is_real or on_edge:
                nodes.append(Node(f"intersection_{x}_{y}", x * lane_length, y * lane_length, not is_real))
    present = {n.id for n in nodes}

    steps = {0: (1, 0), 1: (0, 1), 2: (-1, 0), 3: (0, -1)}
    roads = []
    for x in range(cols + 2):
        for y in range(rows + 2):
            src = f"intersection_{x}_{y}"
            if src not in present:
                continue
            for d, (dx, dy) in steps.items():
                dst = f"intersection_{x + dx}_{y + dy}"
                if dst not in present or not (real(x, y) or real(x + dx, y + dy)):
                    continue
                pts = ((x * lane_length, y * lane_length), ((x + dx) * lane_length, (y + dy) * lane_length))
                roads.append(Road(f"road_{x}_{y}_{d}", src, dst, pts, max_speed))

    node_map = {n.id: n for n in nodes}
    turns = _geometric_turns(node_map, roads)
    return build_network(nodes, roads, turns)


def _geometric_turns(node_map: Mapping[str, Node], roads: Sequence[Road]) -> dict[tuple[str, str], Movement]:
    by_end: dict[str, list[Road]] = {}
    by_start: dict[str, list[Road]] = {}
    for r in roads:
        by_end.setdefault(r.end, []).append(r)
        by_start.setdefault(r.start, []).append(r)
    turns = {}
    for node_id, node in node_map.items():
        if node.virtual:
            continue
        outs = {_side_of((node.x, node.y), r.points[1]): r for r in by_start.get(node_id, [])}
        for r_in in by_end.get(node_id, []):
            approach = _side_of((node.x, node.y), r_in.points[-2])
            for movement in Movement:
                r_out = outs.get(exit_side(approach, movement))
                if r_out is not None:
                    turns[(r_in.id, r_out.id)] = movement
    return turns


# --------------------------------------------------------------------------
# CityFlow roadnet I/O
# --------------------------------------------------------------------------


def _read_json(path: str | Path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: malformed JSON ({exc})") from exc


def parse_roadnet(data, segment_count: int = DEFAULT_SEGMENTS) -> RoadNetwork:
    if not isinstance(data, dict) or "intersections" not in data or "roads" not in data:
        raise ParseError("roadnet must be an object with 'intersections' and 'roads'")
    try:
        raw_inters = data["intersections"]
        nodes = []
        turns: dict[tuple[str, str], Movement] = {}
        for it in raw_inters:
            links = it.get("roadLinks", [])
            virtual = bool(it.get("virtual", False)) or not links
            nodes.append(Node(str(it["id"]), float(it["point"]["x"]), float(it["point"]["y"]), virtual))
            for link in links:
                kind = link["type"]
                if kind not in CITYFLOW_TURN:
                    raise ParseError(f"unknown roadLink type {kind!r} at {it['id']}")
                turns[(str(link["startRoad"]), str(link["endRoad"]))] = CITYFLOW_TURN[kind]
        roads = []
        for r in data["roads"]:
            pts = tuple((float(p["x"]), float(p["y"])) for p in r["points"])
            lanes = r.get("lanes") or [{}]
            roads.append(
                Road(
                    str(r["id"]),
                    str(r["startIntersection"]),
                    str(r["endIntersection"]),
                    pts,
                    float(lanes[0].get("maxSpeed", DEFAULT_MAX_SPEED)),
                    float(lanes[0].get("width", 3.0)),
                )
            )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"roadnet schema violation: {exc!r}") from exc
    return build_network(nodes, roads, turns, segment_count)


def load_roadnet(path: str | Path, segment_count: int = DEFAULT_SEGMENTS) -> RoadNetwork:
    return parse_roadnet(_read_json(path), segment_count)


def dump_roadnet(network: RoadNetwork, yellow: int = 5, green: int = 30) -> dict:
    """CityFlow-schema dict for ``network``.

    Light phases are written as [yellow(all rights), ETWT, ELWL, NTST, NLSL],
    matching the four-phase files the benchmark datasets ship with.
    """
    by_end: dict[str, list[tuple[str, str, Movement]]] = {}
    for (a, b), m in network.turns.items():
        by_end.setdefault(network.roads[a].end, []).append((a, b, m))

    inters = []
    for node in network.nodes.values():
        roads = [r.id for r in network.roads.values() if node.id in (r.start, r.end)]
        links = []
        if not node.virtual:
            for a, b, m in by_end.get(node.id, []):
                links.append(
                    {
                        "type": TURN_NAME[m],
                        "startRoad": a,
                        "endRoad": b,
                        "direction": 0,
                        "laneLinks": [
                            {"startLaneIndex": LANE_INDEX[m], "endLaneIndex": i, "points": []} for i in range(3)
                        ],
                    }
                )
        light: dict = {"roadLinkIndices": list(range(len(links))), "lightphases": []}
        if links and not node.virtual:
            inter = network.intersection(node.id)
            index = {(lk["startRoad"], CITYFLOW_TURN[lk["type"]]): i for i, lk in enumerate(links)}
            rights = [i for i, lk in enumerate(links) if lk["type"] == "turn_right"]
            light["lightphases"].append({"time": yellow, "availableRoadLinks": rights})
            for pid in PHASE_IDS:
                allowed = []
                for lane_id in inter.phase_lanes(pid):
                    lane = network.lanes[lane_id]
                    allowed += [i for (rd, mv), i in index.items() if rd == lane.road and mv is lane.movement]
                light["lightphases"].append({"time": green, "availableRoadLinks": sorted(allowed) + rights})
        inters.append(
            {
                "id": node.id,
                "point": {"x": node.x, "y": node.y},
                "width": 0 if node.virtual else 10,
                "roads": roads,
                "roadLinks": links,
                "trafficLight": light,
                "virtual": node.virtual,
            }
        )
    roads_out = [
        {
            "id": r.id,
            "points": [{"x": x, "y": y} for x, y in r.points],
            "lanes": [{"width": r.lane_width, "maxSpeed": r.max_speed} for _ in range(3)],
            "startIntersection": r.start,
            "endIntersection": r.end,
        }
        for r in network.roads.values()
    ]
    return {"intersections": inters, "roads": roads_out}


def save_roadnet(network: RoadNetwork, path: str | Path) -> None:
    Path(path).write_text(json.dumps(dump_roadnet(network), indent=1), encoding="utf-8")


# --------------------------------------------------------------------------
# flows
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FlowEntry:
    route: tuple[str, ...]
    start_time: float
    end_time: float
    interval: float = 1.0
    max_speed: float = DEFAULT_MAX_SPEED

    def __post_init__(self):
        if self.interval <= 0:
            raise ParseError(f"flow interval must be positive, got {self.interval}")
        if self.start_time > self.end_time:
            raise ParseError(f"flow start {self.start_time} after end {self.end_time}")
        if not self.route:
            raise ParseError("flow entry with empty route")

    @property
    def count(self) -> int:
        return math.floor((self.end_time - self.start_time) / self.interval) + 1

    def times(self) -> list[float]:
        return [self.start_time + k * self.interval for k in range(self.count)]


@dataclass(frozen=True)
class VehicleSpawn:
    id: str
    route: tuple[str, ...]
    time: float
    max_speed: float


@dataclass(frozen=True)
class FlowSpec:
    entries: tuple[FlowEntry, ...]

    def __len__(self) -> int:
        return sum(e.count for e in self.entries)

    def expand(self) -> list[VehicleSpawn]:
        out = [
            VehicleSpawn(f"flow_{i}_{k}", e.route, t, e.max_speed)
            for i, e in enumerate(self.entries)
            for k, t in enumerate(e.times())
        ]
        out.sort(key=lambda v: v.time)  # stable: ties keep entry order
        return out

    def validate(self, network: RoadNetwork) -> None:
        for e in self.entries:
            network.check_route(e.route)


def parse_flow(data, network: RoadNetwork | None = None) -> FlowSpec:
    if not isinstance(data, list):
        raise ParseError("flow file must be a JSON list of flow entries")
    entries = []
    try:
        for item in data:
            vehicle = item.get("vehicle") or {}
            entries.append(
                FlowEntry(
                    tuple(str(r) for r in item["route"]),
                    float(item["startTime"]),
                    float(item["endTime"]),
                    float(item.get("interval", 1.0)),
                    float(vehicle.get("maxSpeed", DEFAULT_MAX_SPEED)),
                )
            )
    except (KeyError, TypeError, AttributeError) as exc:
        raise ParseError(f"flow schema violation: {exc!r}") from exc
    except ValueError as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"flow schema violation: {exc!r}") from exc
    spec = FlowSpec(tuple(entries))
    if network is not None:
        spec.validate(network)
    return spec


def load_flow(path: str | Path, network: RoadNetwork | None = None) -> FlowSpec:
    return parse_flow(_read_json(path), network)


_VEHICLE_TEMPLATE = {
    "length": VEHICLE_LENGTH,
    "width": 2.0,
    "maxPosAcc": 2.0,
    "maxNegAcc": 4.5,
    "usualPosAcc": 2.0,
    "usualNegAcc": 4.5,
    "minGap": 2.5,
    "headwayTime": 2.0,
}


def dump_flow(spec: FlowSpec) -> list[dict]:
    return [
        {
            "vehicle": {**_VEHICLE_TEMPLATE, "maxSpeed": e.max_speed},
            "route": list(e.route),
            "interval": e.interval,
            "startTime": e.start_time,
            "endTime": e.end_time,
        }
        for e in spec.entries
    ]


def save_flow(spec: FlowSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(dump_flow(spec), indent=1), encoding="utf-8")


def random_route(
    network: RoadNetwork,
    entry_road: str,
    rng: random.Random,
    turn_probs: Sequence[float] = (0.2, 0.6, 0.2),
    max_roads: int | None = None,
) -> tuple[str, ...]:
    """Random walk from ``entry_road`` until the network is left.

    ``turn_probs`` are (left, through, right) weights. Once ``max_roads`` is
    reached only through movements are taken, which always exit a grid.
    """
    if max_roads is None:
        max_roads = 2 * len(network.intersections) + 2
    outs: dict[str, dict[Movement, str]] = {}
    for (a, b), m in network.turns.items():
        outs.setdefault(a, {})[m] = b
    route = [entry_road]
    while network.roads[route[-1]].end not in network.boundary_nodes:
        options = outs[route[-1]]
        if len(route) >= max_roads and Movement.THROUGH in options:
            route.append(options[Movement.THROUGH])
            continue
        moves = [m for m in (Movement.LEFT, Movement.THROUGH, Movement.RIGHT) if m in options]
        weights = [turn_probs[LANE_INDEX[m]] for m in moves]
        route.append(options[rng.choices(moves, weights)[0]])
    return tuple(route)


def synth_flow(
    network: RoadNetwork,
    rate: float,
    duration: float,
    seed: int = 0,
    turn_probs: Sequence[float] | Mapping[Approach, Sequence[float]] = (0.2, 0.6, 0.2),
    approach_rates: Mapping[Approach, float] | None = None,
    max_speed: float = DEFAULT_MAX_SPEED,
) -> FlowSpec:
    """Poisson arrivals on every boundary entry road.

    ``rate`` is vehicles per hour per entry road; ``approach_rates`` scales it
    per arrival side, and ``turn_probs`` may likewise be given per side.
    Spawn times are rounded up to whole seconds.
    """
    rng = random.Random(seed)
    entries = []
    boundary = network.boundary_nodes
    for road in network.roads.values():
        if road.start not in boundary:
            continue
        approach = network.lanes[f"{road.id}_1"].approach
        lam = rate * (approach_rates.get(approach, 1.0) if approach_rates else 1.0) / 3600.0
        probs = turn_probs[approach] if isinstance(turn_probs, Mapping) else turn_probs
        if lam <= 0:
            continue
        t = rng.expovariate(lam)
        while t < duration:
            when = float(math.ceil(t))
            entries.append(FlowEntry(random_route(network, road.id, rng, probs), when, when, 1.0, max_speed))
            t += rng.expovariate(lam)
    entries.sort(key=lambda e: e.start_time)
    return FlowSpec(tuple(entries))
