"""Signal controllers.

Every controller maps an :class:`IntersectionObservation` at a switching step
to one of the four phase ids. Controllers are queried concurrently for
different intersections, so any per-intersection state lives in dicts keyed by
intersection id and is only touched from that intersection's query.
"""

from __future__ import annotations

import logging
import random
import threading
from abc import ABC, abstractmethod
from typing import Mapping, Sequence

from .critic import CriticParams, featurize, forward
from .errors import BackendError, InvalidOrder
from .finetune import ReasoningRecord
from .netmodel import PHASE_IDS
from .observe import IntersectionObservation
from .prompting import ParseStatus, PromptSections, parse_decision, render_prompt

log = logging.getLogger(__name__)


def argmax_phase(scores: Mapping[str, float]) -> str:
    """Highest-scoring phase; ties go to the earliest of ETWT, ELWL, NTST, NLSL."""
    best = None
    for pid in PHASE_IDS:
        if pid in scores and (best is None or scores[pid] > scores[best]):
            best = pid
    if best is None:
        raise ValueError("no phase scores given")
    return best


def pressure_table(obs: IntersectionObservation) -> dict[str, int]:
    return {pid: obs.phase_queued(pid)[2] - obs.phase_downstream(pid) for pid in PHASE_IDS}


def greedy_choice(queued_totals: Mapping[str, int]) -> str:
    return argmax_phase(queued_totals)


def greedy_reasoning(queued_totals: Mapping[str, int], phase: str) -> str:
    counts = ", ".join(f"{pid} has {queued_totals.get(pid, 0)}" for pid in PHASE_IDS)
    return (
        f"Early queued vehicles per signal: {counts}. "
        f"The allowed lanes of signal {phase} hold the longest queue, so giving them "
        f"green releases the most waiting vehicles.\n<signal>{phase}</signal>"
    )


class Controller(ABC):
    name: str = "controller"
    is_deterministic: bool = True

    @abstractmethod
    def decide(self, obs: IntersectionObservation, t: int) -> str: ...

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.name}>"


class RandomController(Controller):
    name = "random"

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._rngs: dict[str, random.Random] = {}
        self._lock = threading.Lock()

    def _rng(self, intersection: str) -> random.Random:
        with self._lock:
            rng = self._rngs.get(intersection)
            if rng is None:
                rng = self._rngs[intersection] = random.Random(f"{self.seed}:{intersection}")
            return rng

    def decide(self, obs, t):
        return self._rng(obs.intersection).choice(PHASE_IDS)


class FixedTimeController(Controller):
    name = "fixedtime"

    def __init__(self, order: Sequence[str] = PHASE_IDS):
        order = tuple(order)
        if sorted(order) != sorted(PHASE_IDS):
            raise InvalidOrder(f"order must be a permutation of {PHASE_IDS}, got {order}")
        self.order = order
        self._count: dict[str, int] = {}
        self._lock = threading.Lock()

    def decide(self, obs, t):
        with self._lock:
            k = self._count.get(obs.intersection, 0)
            self._count[obs.intersection] = k + 1
        return self.order[k % len(self.order)]


class MaxPressureController(Controller):
    name = "maxpressure"

    def decide(self, obs, t):
        return argmax_phase(pressure_table(obs))


class GreedyStubController(Controller):
    """Longest early-queue phase, with a canned reasoning text."""

    name = "greedy_stub"

    def respond(self, obs: IntersectionObservation) -> str:
        totals = obs.queued_totals()
        return greedy_reasoning(totals, greedy_choice(totals))

    def decide(self, obs, t):
        return greedy_choice(obs.queued_totals())


class CriticController(Controller):
    """Argmax of a trained action-value network."""

    name = "critic"

    def __init__(self, params: CriticParams):
        self.params = params

    def decide(self, obs, t):
        q = forward(self.params, featurize(obs))
        return argmax_phase(dict(zip(PHASE_IDS, q.tolist())))


class LLMController(Controller):
    """Prompt, query, parse; falls back to another controller on failure.

    With ``k`` > 1 each switching step samples ``k`` trajectories; all parseable
    ones are recorded as one group and the first parseable one is executed.
    With ``strict`` set, backend failures propagate instead of falling back.
    """

    name = "llm"

    def __init__(self, client, sections: PromptSections | None = None,
                 fallback: Controller | None = None, k: int = 1, strict: bool = False):
        self.client = client
        self.sections = sections or PromptSections.default()
        self.fallback = fallback or GreedyStubController()
        self.k = k
        self.strict = strict
        self.is_deterministic = getattr(getattr(client, "config", None), "temperature", 0.0) == 0.0
        self._records: list[ReasoningRecord] = []
        self._fallbacks: list[dict] = []
        self._decisions: dict[tuple[int, str], str] = {}
        self._replay: dict[tuple[int, str], str] = {}
        self._lock = threading.Lock()

    def replay_decisions(self, decisions: Mapping[tuple[int, str], str]) -> None:
        """Answer these ``(t, intersection)`` steps from the given phases, without a query."""
        self._replay = dict(decisions)

    @property
    def decisions(self) -> list[tuple[int, str, str]]:
        """Executed ``(t, intersection, phase)`` triples, in time order."""
        with self._lock:
            return [(t, i, p) for (t, i), p in sorted(self._decisions.items())]

    @property
    def records(self) -> list[ReasoningRecord]:
        with self._lock:
            return sorted(self._records, key=lambda r: (r.t, r.intersection, r.sample))

    @property
    def fallbacks(self) -> list[dict]:
        with self._lock:
            return sorted(self._fallbacks, key=lambda r: (r["t"], r["intersection"]))

    def decide(self, obs, t):
        key = (t, obs.intersection)
        phase = self._replay.get(key) or self._query(obs, t)
        with self._lock:
            self._decisions[key] = phase
        return phase

    def _query(self, obs, t):
        prompt = render_prompt(obs, self.sections)
        try:
            if self.k > 1:
                exchanges = self.client.sample_exchanges(prompt.text, self.k)
            else:
                exchanges = [self.client.exchange(prompt.text)]
        except BackendError as exc:
            if self.strict:
                raise
            return self._fall_back(obs, t, None, f"backend failure: {exc}")

        features = tuple(float(x) for x in featurize(obs))
        chosen, recs = None, []
        for i, ex in enumerate(exchanges):
            parsed = parse_decision(ex.response)
            if parsed.parse_status is not ParseStatus.OK:
                self._log_fallback(obs, t, ex.response, "no valid <signal> tag")
                continue
            recs.append(ReasoningRecord(
                t=t, X=prompt.text, Y=parsed.reasoning, a=parsed.phase, o_t=features,
                source=self.client.name, intersection=obs.intersection, sample=i,
                logprobs=ex.logprobs,
            ))
            chosen = chosen or parsed.phase
        with self._lock:
            self._records.extend(recs)
        if chosen is None:
            return self._fall_back(obs, t, exchanges[-1].response, None)
        return chosen

    def _log_fallback(self, obs, t, raw, reason):
        log.info("fallback at t=%s %s: %s", t, obs.intersection, reason)
        with self._lock:
            self._fallbacks.append({"t": t, "intersection": obs.intersection, "raw": raw, "reason": reason})

    def _fall_back(self, obs, t, raw, reason):
        if reason is not None:
            self._log_fallback(obs, t, raw, reason)
        return self.fallback.decide(obs, t)


def random_controller(seed: int = 0) -> RandomController:
    return RandomController(seed)


def fixed_time_controller(order: Sequence[str] = PHASE_IDS) -> FixedTimeController:
    return FixedTimeController(order)


def maxpressure_controller(network=None) -> MaxPressureController:
    # Downstream queues arrive inside the observation, so the network is not needed.
    return MaxPressureController()


def greedy_stub_controller() -> GreedyStubController:
    return GreedyStubController()


def llm_controller(client, sections: PromptSections | None = None,
                   fallback: Controller | None = None, k: int = 1, strict: bool = False) -> LLMController:
    return LLMController(client, sections, fallback, k, strict)


def critic_controller(params: CriticParams) -> CriticController:
    return CriticController(params)
