"""Action-value critic Q(o, a): a 16-20-20-4 ReLU network in plain numpy.

Backprop and the Adam optimizer are written out by hand; the network is small
enough that a framework would add nothing but a dependency.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DivergenceError, ShapeError
from .netmodel import PHASE_IDS
from .observe import IntersectionObservation

if TYPE_CHECKING:
    from .finetune import ReasoningRecord
    from .simcore import EpisodeLog

N_FEATURES = 16
N_ACTIONS = 4
PHASE_INDEX = {pid: i for i, pid in enumerate(PHASE_IDS)}


def featurize(obs: IntersectionObservation) -> np.ndarray:
    """``[queued, seg1, seg2, seg3]`` totals per phase, phases in ETWT, ELWL, NTST, NLSL order."""
    if obs.segment_count != 3:
        raise ShapeError(f"critic features need 3 segments, observation has {obs.segment_count}")
    out = np.empty(N_FEATURES)
    for i, pid in enumerate(PHASE_IDS):
        out[4 * i] = obs.phase_queued(pid)[2]
        for k in range(1, 4):
            out[4 * i + k] = obs.phase_segment(pid, k)[2]
    return out


# --------------------------------------------------------------------------
# parameters and forward pass
# --------------------------------------------------------------------------


@dataclass
class CriticParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")

    def __post_init__(self):
        for name in self.NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        w1, b1, w2, b2, w3, b3 = self.arrays()
        ok = (
            w1.ndim == 2 and w2.ndim == 2 and w3.ndim == 2
            and b1.shape == (w1.shape[1],) and w2.shape[0] == w1.shape[1]
            and b2.shape == (w2.shape[1],) and w3.shape[0] == w2.shape[1]
            and b3.shape == (w3.shape[1],)
        )
        if not ok:
            raise ShapeError("inconsistent critic parameter shapes: "
                             + ", ".join(f"{n}{getattr(self, n).shape}" for n in self.NAMES))

    @classmethod
    def init(cls, seed: int = 0, n_in: int = N_FEATURES, hidden: int = 20,
             n_out: int = N_ACTIONS) -> "CriticParams":
        rng = np.random.default_rng(seed)
        he = lambda fan_in, fan_out: rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out))  # noqa: E731
        return cls(he(n_in, hidden), np.zeros(hidden), he(hidden, hidden), np.zeros(hidden),
                   he(hidden, n_out), np.zeros(n_out))

    @classmethod
    def zeros(cls, n_in: int = N_FEATURES, hidden: int = 20, n_out: int = N_ACTIONS) -> "CriticParams":
        return cls(np.zeros((n_in, hidden)), np.zeros(hidden), np.zeros((hidden, hidden)),
                   np.zeros(hidden), np.zeros((hidden, n_out)), np.zeros(n_out))

    def arrays(self) -> tuple[np.ndarray, ...]:
        return tuple(getattr(self, n) for n in self.NAMES)

    def copy(self) -> "CriticParams":
        return CriticParams(*(a.copy() for a in self.arrays()))

    @property
    def n_in(self) -> int:
        return self.w1.shape[0]

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in self.arrays():
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {
            "format": "tsclab-critic/1",
            "shapes": {n: list(getattr(self, n).shape) for n in self.NAMES},
            "params": {n: getattr(self, n).tolist() for n in self.NAMES},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CriticParams":
        try:
            arrays = {n: np.asarray(d["params"][n], dtype=float) for n in cls.NAMES}
        except KeyError as exc:
            raise ShapeError(f"critic weight file lacks {exc}") from exc
        for n, shape in d.get("shapes", {}).items():
            if n in arrays and list(arrays[n].shape) != list(shape):
                raise ShapeError(f"{n}: declared shape {shape}, got {list(arrays[n].shape)}")
        return cls(**arrays)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "CriticParams":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _check_input(params: CriticParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim not in (1, 2) or x.shape[-1] != params.n_in:
        raise ShapeError(f"expected features of width {params.n_in}, got shape {x.shape}")
    return x


def forward(params: CriticParams, features) -> np.ndarray:
    """Q values for one feature vector (shape ``(4,)``) or a batch (``(n, 4)``)."""
    x = _check_input(params, features)
    h1 = np.maximum(x @ params.w1 + params.b1, 0.0)
    h2 = np.maximum(h1 @ params.w2 + params.b2, 0.0)
    return h2 @ params.w3 + params.b3


def score(params: CriticParams, features, action: int | str) -> float:
    a = PHASE_INDEX[action] if isinstance(action, str) else int(action)
    if not 0 <= a < params.w3.shape[1]:
        raise IndexError(f"action index {a} out of range")
    return float(forward(params, features)[a])


# --------------------------------------------------------------------------
# TD loss
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Transition:
    o: tuple[float, ...]
    a: int
    r: float
    o_next: tuple[float, ...]
    terminal: bool = False

    def __post_init__(self):
        if not 0 <= self.a < N_ACTIONS:
            raise ValueError(f"action index {self.a} out of range")


@dataclass(frozen=True)
class Batch:
    o: np.ndarray
    a: np.ndarray
    r: np.ndarray
    o_next: np.ndarray
    terminal: np.ndarray

    def __len__(self) -> int:
        return len(self.a)

    @classmethod
    def of(cls, transitions: Sequence[Transition]) -> "Batch":
        return cls(
            np.array([t.o for t in transitions], dtype=float),
            np.array([t.a for t in transitions], dtype=int),
            np.array([t.r for t in transitions], dtype=float),
            np.array([t.o_next for t in transitions], dtype=float),
            np.array([t.terminal for t in transitions], dtype=bool),
        )


def td_loss(params: CriticParams, target_params: CriticParams, batch: Batch | Sequence[Transition],
            gamma: float) -> tuple[float, CriticParams]:
    """Mean squared TD error and its gradient with respect to ``params``.

    Targets ``r + gamma * max_a' Q_target(o', a')`` are held constant, with no
    bootstrap on terminal transitions.
    """
    if not isinstance(batch, Batch):
        batch = Batch.of(batch)
    n = len(batch)
    if n == 0:
        raise ValueError("td_loss needs a non-empty batch")
    x = _check_input(params, batch.o)
    boot = forward(target_params, batch.o_next).max(axis=1)
    y = batch.r + gamma * np.where(batch.terminal, 0.0, boot)

    z1 = x @ params.w1 + params.b1
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ params.w2 + params.b2
    h2 = np.maximum(z2, 0.0)
    q = h2 @ params.w3 + params.b3
    rows = np.arange(n)
    err = q[rows, batch.a] - y
    loss = float(np.mean(err**2))

    dq = np.zeros_like(q)
    dq[rows, batch.a] = 2.0 * err / n
    gw3 = h2.T @ dq
    gb3 = dq.sum(axis=0)
    dz2 = (dq @ params.w3.T) * (z2 > 0)
    gw2 = h1.T @ dz2
    gb2 = dz2.sum(axis=0)
    dz1 = (dz2 @ params.w2.T) * (z1 > 0)
    gw1 = x.T @ dz1
    gb1 = dz1.sum(axis=0)
    return loss, CriticParams(gw1, gb1, gw2, gb2, gw3, gb3)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


class ReplayBuffer:
    def __init__(self, capacity: int = 12000):
        if capacity < 1:
            raise ConfigError("replay capacity must be >= 1")
        self.capacity = capacity
        self._items: list[Transition] = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._items)

    def push(self, tr: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(tr)
        else:
            self._items[self._next] = tr
        self._next = (self._next + 1) % self.capacity

    def extend(self, transitions: Iterable[Transition]) -> None:
        for tr in transitions:
            self.push(tr)

    def sample(self, n: int, rng: np.random.Generator) -> list[Transition]:
        idx = rng.choice(len(self._items), size=min(n, len(self._items)), replace=False)
        return [self._items[i] for i in idx]


@dataclass(frozen=True)
class TrainCfg:
    lr: float = 1e-3
    gamma: float = 0.8
    target_sync: int = 200
    steps: int = 2000
    batch_size: int = 3000
    capacity: int = 12000
    seed: int = 0
    hidden: int = 20
    divergence_threshold: float = 1e12

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.lr <= 0 or self.steps < 0 or self.batch_size < 1 or self.target_sync < 1:
            raise ConfigError("lr > 0, steps >= 0, batch_size >= 1 and target_sync >= 1 are required")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainCfg":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


class Adam:
    def __init__(self, params: CriticParams, lr: float = 1e-3, b1: float = 0.9, b2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(a) for a in params.arrays()]
        self.v = [np.zeros_like(a) for a in params.arrays()]
        self.t = 0

    def step(self, params: CriticParams, grads: CriticParams) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(params.arrays(), grads.arrays(), self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    params: CriticParams
    losses: list[float] = field(default_factory=list)

    def save_loss_curve(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            w.writerows((i, f"{x:.10g}") for i, x in enumerate(self.losses))


def train(transitions: Iterable[Transition], cfg: TrainCfg = TrainCfg(),
          params: CriticParams | None = None) -> TrainResult:
    """Fit Q on ``transitions`` by TD regression; deterministic for a given ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = CriticParams.init(int(rng.integers(2**31)), hidden=cfg.hidden)
    else:
        params = params.copy()
    buffer = ReplayBuffer(cfg.capacity)
    buffer.extend(transitions)
    if len(buffer) == 0:
        return TrainResult(params)
    target = params.copy()
    opt = Adam(params, cfg.lr)
    losses = []
    for step in range(1, cfg.steps + 1):
        loss, grads = td_loss(params, target, Batch.of(buffer.sample(cfg.batch_size, rng)), cfg.gamma)
        if not np.isfinite(loss) or loss > cfg.divergence_threshold:
            raise DivergenceError(f"TD loss {loss:.4g} at step {step} exceeds {cfg.divergence_threshold:g}")
        opt.step(params, grads)
        losses.append(loss)
        if step % cfg.target_sync == 0:
            target = params.copy()
    if not params.is_finite():
        raise DivergenceError("critic parameters became non-finite")
    return TrainResult(params, losses)


def transitions_from_log(log: "EpisodeLog") -> list[Transition]:
    """Consecutive switching steps of each intersection as transitions.

    The reward is minus the intersection's total queue at the next switching
    step; the final switch of each intersection has no successor and is dropped.
    """
    by_inter: dict[str, list] = {}
    for s in log.switches:
        by_inter.setdefault(s.intersection, []).append(s)
    out = []
    for inter in sorted(by_inter):
        seq = sorted(by_inter[inter], key=lambda s: s.t)
        for cur, nxt in zip(seq, seq[1:]):
            out.append(Transition(
                tuple(featurize(cur.obs)), PHASE_INDEX[cur.action],
                -float(nxt.obs.total_queued()), tuple(featurize(nxt.obs)),
            ))
    return out


# --------------------------------------------------------------------------
# filtering
# --------------------------------------------------------------------------


def keeps(params: CriticParams, features, action: int | str) -> bool:
    q = forward(params, features)
    a = PHASE_INDEX[action] if isinstance(action, str) else int(action)
    return bool(q[a] >= q.max())


def filter_trajectories(records: Sequence["ReasoningRecord"], params: CriticParams) -> list["ReasoningRecord"]:
    """Records whose action attains the critic's maximum Q (ties are kept)."""
    if not records:
        return []
    q = forward(params, np.array([r.o_t for r in records], dtype=float))
    out = []
    for rec, row in zip(records, q):
        if row[PHASE_INDEX[rec.a]] >= row.max():
            out.append(rec)
    return out


# --------------------------------------------------------------------------
# toy queue environment
# --------------------------------------------------------------------------


@dataclass
class ToyQueueEnv:
    """Four phase queues where one phase is always the longest.

    Each state draws the other queues uniformly from ``[0, spread]`` and the
    dominant one strictly above their maximum. Serving a phase clears its
    queue, so the reward ``-(remaining queue)`` is best for the dominant phase.
    States are independent of actions.
    """

    dominant: int = 0
    spread: int = 10
    seed: int = 0

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)

    def state(self) -> np.ndarray:
        q = self.rng.integers(0, self.spread + 1, N_ACTIONS).astype(float)
        q[self.dominant] = q.max() + self.rng.integers(1, 6)
        x = np.zeros(N_FEATURES)
        x[0::4] = q
        x[1::4] = self.rng.integers(0, 4, N_ACTIONS)
        return x

    def transitions(self, n: int) -> list[Transition]:
        out = []
        o = self.state()
        for _ in range(n):
            a = int(self.rng.integers(N_ACTIONS))
            queues = o[0::4]
            r = -float(queues.sum() - queues[a])
            o_next = self.state()
            out.append(Transition(tuple(o), a, r, tuple(o_next)))
            o = o_next
        return out

