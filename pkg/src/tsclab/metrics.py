"""Episode metrics: average travel time, queue length and waiting time."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

from .errors import NoVehicles
from .simcore import BOUNDARY_KEY, EpisodeLog


def _require_vehicles(log: EpisodeLog) -> None:
    if not log.vehicles:
        raise NoVehicles("episode log has no vehicles")


def compute_att(log: EpisodeLog) -> float:
    """Mean travel time; vehicles still travelling at the end count up to the episode end."""
    _require_vehicles(log)
    end = log.episode_length
    total = sum((v.finish_time if v.finish_time is not None else end) - v.spawn_time for v in log.vehicles)
    return total / len(log.vehicles)


def compute_aql(log: EpisodeLog) -> float:
    if not log.queue_totals:
        return 0.0
    return sum(log.queue_totals) / len(log.queue_totals)


def compute_awt(log: EpisodeLog) -> float:
    """Mean over vehicles of their total waiting time."""
    _require_vehicles(log)
    return sum(v.wait for v in log.vehicles) / len(log.vehicles)


def compute_awt_per_intersection(log: EpisodeLog) -> float:
    """Mean over intersections of the mean wait of the vehicles that queued there."""
    _require_vehicles(log)
    sums: dict[str, int] = {}
    counts: dict[str, int] = {}
    for v in log.vehicles:
        for inter, w in v.wait_by_intersection.items():
            if inter == BOUNDARY_KEY or w <= 0:
                continue
            sums[inter] = sums.get(inter, 0) + w
            counts[inter] = counts.get(inter, 0) + 1
    if not sums:
        return 0.0
    return sum(sums[i] / counts[i] for i in sums) / len(sums)


@dataclass(frozen=True)
class MetricsReport:
    att: float
    aql: float
    awt: float
    finished: int
    unfinished: int
    episode_length: int
    awt_per_intersection: float | None = None
    label: str = ""

    @classmethod
    def from_log(cls, log: EpisodeLog, label: str | None = None) -> "MetricsReport":
        finished = sum(1 for v in log.vehicles if v.finish_time is not None)
        return cls(
            compute_att(log), compute_aql(log), compute_awt(log), finished,
            len(log.vehicles) - finished, log.episode_length, compute_awt_per_intersection(log),
            label if label is not None else str(log.meta.get("controller", "")),
        )

    @property
    def spawned(self) -> int:
        return self.finished + self.unfinished

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))

    def to_text(self) -> str:
        rows = [
            ("ATT (s)", f"{self.att:.2f}"),
            ("AQL (veh)", f"{self.aql:.2f}"),
            ("AWT (s)", f"{self.awt:.2f}"),
        ]
        if self.awt_per_intersection is not None:
            rows.append(("AWT per intersection (s)", f"{self.awt_per_intersection:.2f}"))
        rows += [
            ("finished", str(self.finished)),
            ("unfinished", str(self.unfinished)),
            ("episode length (s)", str(self.episode_length)),
        ]
        width = max(len(k) for k, _ in rows)
        vwidth = max(len(v) for _, v in rows)
        head = [f"{self.label}"] if self.label else []
        return "\n".join(head + [f"{k:<{width}}  {v:>{vwidth}}" for k, v in rows])


COMPARISON_COLUMNS = ("ATT", "AQL", "AWT")


def comparison_table(reports: Mapping[str, MetricsReport]) -> list[list[str]]:
    rows = [["model", *COMPARISON_COLUMNS]]
    for name, r in reports.items():
        rows.append([name, f"{r.att:.2f}", f"{r.aql:.2f}", f"{r.awt:.2f}"])
    return rows


def write_comparison_csv(reports: Mapping[str, MetricsReport], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerows(comparison_table(reports))


def format_comparison(reports: Mapping[str, MetricsReport]) -> str:
    rows = comparison_table(reports)
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for r in rows:
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells))
    return "\n".join(lines)
