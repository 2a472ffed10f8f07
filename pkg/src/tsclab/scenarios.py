"""Named synthetic scenarios shared by the CLI, scripts and tests."""

from __future__ import annotations

import re

from .errors import ConfigError
from .netmodel import Approach, FlowSpec, RoadNetwork, synth_flow, synth_grid

# East-west arterial: through traffic on E/W dominates the cross street.
ARTERIAL_RATES = {Approach.E: 1.6, Approach.W: 1.6, Approach.N: 0.4, Approach.S: 0.4}


def ordering_grid(seed: int, duration: int = 3600) -> tuple[RoadNetwork, FlowSpec]:
    """3x4 grid, 300 m links, arterial demand of about 300 veh/h per entry."""
    network = synth_grid(3, 4, 300.0)
    return network, synth_flow(network, 300.0, duration, seed, approach_rates=ARTERIAL_RATES)


def toy_intersection(seed: int, duration: int = 3600) -> tuple[RoadNetwork, FlowSpec]:
    """Single intersection where ETWT carries most of the demand."""
    network = synth_grid(1, 1, 300.0)
    turns = {
        Approach.E: (0.1, 0.8, 0.1), Approach.W: (0.1, 0.8, 0.1),
        Approach.N: (0.2, 0.6, 0.2), Approach.S: (0.2, 0.6, 0.2),
    }
    rates = {Approach.E: 1.0, Approach.W: 1.0, Approach.N: 0.35, Approach.S: 0.35}
    return network, synth_flow(network, 500.0, duration, seed, turn_probs=turns, approach_rates=rates)


def grid_scenario(spec: str, seed: int, rate: float = 300.0, duration: int = 3600) -> tuple[RoadNetwork, FlowSpec]:
    """``"RxC"`` grid with uniform Poisson demand."""
    m = re.fullmatch(r"\s*(\d+)\s*[xX]\s*(\d+)\s*", spec)
    if not m:
        raise ConfigError(f"synthetic grid must look like '3x4', got {spec!r}")
    rows, cols = int(m.group(1)), int(m.group(2))
    if rows < 1 or cols < 1:
        raise ConfigError("grid dimensions must be positive")
    network = synth_grid(rows, cols, 300.0)
    return network, synth_flow(network, rate, duration, seed)
