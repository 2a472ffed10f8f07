"""Per-intersection observation: queued and approaching vehicle counts."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Mapping, Sequence

from .netmodel import PHASE_IDS, PHASE_MOVEMENTS, Approach, Intersection, Movement

if TYPE_CHECKING:
    from .simcore import SimState


@dataclass(frozen=True)
class LaneObservation:
    lane: str
    approach: Approach
    movement: Movement
    n_q: int
    n_s: tuple[int, ...]  # index 0 = segment 1, nearest the stop line
    downstream_queued: int = 0

    def to_dict(self) -> dict:
        return {
            "lane": self.lane,
            "approach": self.approach.value,
            "movement": self.movement.value,
            "n_q": self.n_q,
            "n_s": list(self.n_s),
            "downstream_queued": self.downstream_queued,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "LaneObservation":
        return cls(
            d["lane"],
            Approach(d["approach"]),
            Movement(d["movement"]),
            int(d["n_q"]),
            tuple(int(x) for x in d["n_s"]),
            int(d.get("downstream_queued", 0)),
        )


@dataclass(frozen=True)
class IntersectionObservation:
    intersection: str
    t: int
    lanes: Mapping[tuple[Approach, Movement], LaneObservation]

    @property
    def segment_count(self) -> int:
        return len(next(iter(self.lanes.values())).n_s)

    def phase_lanes(self, phase_id: str) -> tuple[LaneObservation, LaneObservation]:
        a, b = PHASE_MOVEMENTS[phase_id]
        return self.lanes[a], self.lanes[b]

    def phase_queued(self, phase_id: str) -> tuple[int, int, int]:
        a, b = self.phase_lanes(phase_id)
        return a.n_q, b.n_q, a.n_q + b.n_q

    def phase_segment(self, phase_id: str, segment: int) -> tuple[int, int, int]:
        """Approaching counts in 1-based ``segment`` for both lanes, and total."""
        a, b = self.phase_lanes(phase_id)
        x, y = a.n_s[segment - 1], b.n_s[segment - 1]
        return x, y, x + y

    def phase_downstream(self, phase_id: str) -> int:
        a, b = self.phase_lanes(phase_id)
        return a.downstream_queued + b.downstream_queued

    def queued_totals(self) -> dict[str, int]:
        return {pid: self.phase_queued(pid)[2] for pid in PHASE_IDS}

    def total_queued(self) -> int:
        return sum(lo.n_q for lo in self.lanes.values())

    def to_dict(self) -> dict:
        return {
            "intersection": self.intersection,
            "t": self.t,
            "lanes": [self.lanes[k].to_dict() for k in _lane_order()],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "IntersectionObservation":
        lanes = [LaneObservation.from_dict(x) for x in d["lanes"]]
        return cls(d["intersection"], int(d["t"]), {(lo.approach, lo.movement): lo for lo in lanes})

    @classmethod
    def from_counts(
        cls,
        queued: Mapping[str, Sequence[int]],
        segments: Mapping[str, Sequence[Sequence[int]]] | None = None,
        downstream: Mapping[str, Sequence[int]] | None = None,
        intersection: str = "intersection",
        t: int = 0,
        segment_count: int = 3,
    ) -> "IntersectionObservation":
        """Build an observation from per-phase counts.

        ``queued[pid]`` is ``(first, second)`` in the phase's approach order
        (East/West or North/South); ``segments[pid][k]`` likewise for
        segment ``k + 1``. Missing phases are zero.
        """
        lanes = {}
        for pid in PHASE_IDS:
            q = queued.get(pid, (0, 0))
            segs = (segments or {}).get(pid, [(0, 0)] * segment_count)
            ds = (downstream or {}).get(pid, (0, 0))
            for side, key in enumerate(PHASE_MOVEMENTS[pid]):
                approach, movement = key
                lanes[key] = LaneObservation(
                    f"{approach.value}-{movement.value}",
                    approach,
                    movement,
                    int(q[side]),
                    tuple(int(s[side]) for s in segs),
                    int(ds[side]),
                )
        return cls(intersection, t, lanes)


def _lane_order() -> list[tuple[Approach, Movement]]:
    return [key for pid in PHASE_IDS for key in PHASE_MOVEMENTS[pid]]


def segment_of(distance_to_stop: float, length: float, segment_count: int) -> int:
    """1-based segment index; a vehicle on a boundary goes to the nearer segment."""
    seg_len = length / segment_count
    k = math.ceil(distance_to_stop / seg_len - 1e-9)
    return min(max(k, 1), segment_count)


def lane_counts(vehicles, length: float, segment_count: int, v_stop: float) -> tuple[int, list[int]]:
    n_q = 0
    n_s = [0] * segment_count
    for veh in vehicles:
        if veh.speed < v_stop:
            n_q += 1
        else:
            n_s[segment_of(length - veh.position, length, segment_count) - 1] += 1
    return n_q, n_s


def observe(state: "SimState", intersection: Intersection | str) -> IntersectionObservation:
    """Observation of ``intersection``'s eight controlled incoming lanes.

    Queued vehicles are those slower than ``v_stop``; the rest are binned by
    distance to the stop line. Right-turn lanes are not observed. Each lane
    also carries the queued count summed over the lanes its movement feeds
    (0 at a network boundary).
    """
    network = state.network
    inter = network.intersection(intersection) if isinstance(intersection, str) else intersection
    v_stop = state.config.v_stop
    lanes = {}
    for pid in PHASE_IDS:
        for key in PHASE_MOVEMENTS[pid]:
            lane = network.lanes[inter.movement_lanes[key]]
            n_q, n_s = lane_counts(state.lanes[lane.id], lane.length, lane.segment_count, v_stop)
            downstream = sum(
                1 for d in lane.downstream_lanes for veh in state.lanes[d] if veh.speed < v_stop
            )
            lanes[key] = LaneObservation(lane.id, key[0], key[1], n_q, tuple(n_s), downstream)
    return IntersectionObservation(inter.id, state.t, lanes)
