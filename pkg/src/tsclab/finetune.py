"""Fine-tuning data and losses.

The losses here consume token log-probabilities as data (from a backend that
reports them, or synthetic ones in tests); nothing in this module tokenizes
text or updates model weights.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .critic import PHASE_INDEX, CriticParams, forward
from .errors import EmptySequence, MissingLogProbs, ParseError
from .prompting import ParseStatus, parse_decision


@dataclass(frozen=True)
class ReasoningRecord:
    """One sampled decision: prompt ``X``, reasoning ``Y`` and the phase ``a`` it ends with."""

    t: int
    X: str
    Y: str
    a: str
    o_t: tuple[float, ...]
    source: str
    intersection: str = ""
    sample: int = 0
    logprobs: tuple[float, ...] | None = None

    def __post_init__(self):
        parsed = parse_decision(self.Y)
        if parsed.parse_status is not ParseStatus.OK or parsed.phase != self.a:
            raise ParseError(f"reasoning text does not end in a <signal>{self.a}</signal> decision")

    @property
    def group(self) -> tuple[int, str]:
        return (self.t, self.intersection)

    def to_dict(self) -> dict:
        return {
            "t": self.t, "intersection": self.intersection, "sample": self.sample,
            "X": self.X, "Y": self.Y, "a": self.a, "o_t": list(self.o_t), "source": self.source,
            "logprobs": list(self.logprobs) if self.logprobs is not None else None,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ReasoningRecord":
        lp = d.get("logprobs")
        return cls(
            int(d["t"]), d["X"], d["Y"], d["a"], tuple(float(x) for x in d["o_t"]), d["source"],
            d.get("intersection", ""), int(d.get("sample", 0)),
            tuple(float(x) for x in lp) if lp is not None else None,
        )


def _read_jsonl(path: str | Path, parse: Callable[[dict], object]) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(parse(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(f"{path}:{n}: {exc}") from exc
    return out


def _write_jsonl(path: str | Path, rows: Iterable[dict]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
            n += 1
    return n


def write_records(records: Iterable[ReasoningRecord], path: str | Path) -> int:
    return _write_jsonl(path, (r.to_dict() for r in records))


def read_records(path: str | Path) -> list[ReasoningRecord]:
    return _read_jsonl(path, ReasoningRecord.from_dict)


# --------------------------------------------------------------------------
# likelihood losses
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TokenLogProbs:
    values: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if not self.values:
            raise EmptySequence("token log-probabilities are empty")
        if any(v > 0 or np.isnan(v) for v in self.values):
            raise ValueError("log-probabilities must be <= 0")

    def __len__(self) -> int:
        return len(self.values)


def _values(tokens: TokenLogProbs | Sequence[float]) -> np.ndarray:
    if not isinstance(tokens, TokenLogProbs):
        tokens = TokenLogProbs(tuple(tokens))
    return np.asarray(tokens.values)


def ift_nll(tokens: TokenLogProbs | Sequence[float]) -> float:
    """Negative log-likelihood of a response: minus the sum of its token log-probs."""
    return float(-_values(tokens).sum())


def token_avg_loglik(tokens: TokenLogProbs | Sequence[float]) -> float:
    return float(_values(tokens).mean())


# --------------------------------------------------------------------------
# ranking loss
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RankingBatch:
    ids: tuple[str, ...]
    p: tuple[float, ...]
    q: tuple[float, ...]
    beta: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "p", tuple(float(x) for x in self.p))
        object.__setattr__(self, "q", tuple(float(x) for x in self.q))
        if not self.ids:
            object.__setattr__(self, "ids", tuple(str(i) for i in range(len(self.p))))
        if len(self.p) < 1:
            raise EmptySequence("ranking batch needs at least one trajectory")
        if not len(self.ids) == len(self.p) == len(self.q):
            raise ValueError("ids, p and q must have the same length")
        if any(x > 0 for x in self.p):
            raise ValueError("token-averaged log-likelihoods must be <= 0")

    @property
    def k(self) -> int:
        return len(self.p)

    def to_dict(self) -> dict:
        return {"ids": list(self.ids), "p": list(self.p), "q": list(self.q), "beta": self.beta}

    @classmethod
    def from_dict(cls, d: Mapping) -> "RankingBatch":
        return cls(tuple(d.get("ids") or ()), tuple(d["p"]), tuple(d["q"]), float(d.get("beta", 1.0)))


def rbc_loss(batch: RankingBatch, beta: float | None = None) -> tuple[float, np.ndarray]:
    """Ranking loss with the boundary term, and its gradient with respect to ``p``.

    Sums over ordered pairs ``(i, j)`` with ``q_i > q_j``; for each, ``j*`` is
    the lowest-``p`` trajectory among those scored strictly above ``j``.
    """
    beta = batch.beta if beta is None else beta
    p = np.asarray(batch.p)
    q = np.asarray(batch.q)
    k = len(p)
    exps, grads = [], []  # exponent and its d/dp as (index, coefficient) pairs
    for j in range(k):
        above = [i for i in range(k) if q[i] > q[j]]
        if not above:
            continue
        star = min(above, key=lambda i: p[i])
        for i in above:
            exps.append(p[j] - p[i])
            grads.append(((j, 1.0), (i, -1.0)))
            exps.append(2 * p[star] - 2 * beta - p[i] - p[j])
            grads.append(((star, 2.0), (i, -1.0), (j, -1.0)))
    g = np.zeros(k)
    if not exps:
        return 0.0, g
    e = np.asarray(exps)
    m = max(0.0, e.max())
    total = np.exp(-m) + np.exp(e - m).sum()
    loss = m + np.log(total)
    w = np.exp(e - loss)
    for wm, terms in zip(w, grads):
        for idx, coef in terms:
            g[idx] += coef * wm
    return float(loss), g


def build_ranking_batches(
    groups: Mapping[object, Sequence[ReasoningRecord]] | Iterable[ReasoningRecord],
    params: CriticParams,
    logprobs: Callable[[ReasoningRecord], Sequence[float] | None] | None = None,
    beta: float = 1.0,
) -> list[RankingBatch]:
    """One batch per prompt group, ``q`` from the critic and ``p`` from token log-probs.

    ``groups`` may be a mapping of group key to records, or a flat record
    iterable grouped here by ``(t, intersection)``.
    """
    if not isinstance(groups, Mapping):
        grouped: dict = defaultdict(list)
        for rec in groups:
            grouped[rec.group].append(rec)
        groups = dict(sorted(grouped.items()))
    source = logprobs or (lambda r: r.logprobs)
    out = []
    for key, recs in groups.items():
        if not recs:
            continue
        if len({r.X for r in recs}) != 1:
            raise ValueError(f"group {key!r} mixes different prompts")
        q_all = forward(params, np.array([r.o_t for r in recs], dtype=float))
        p, q, ids = [], [], []
        for rec, row in zip(recs, q_all):
            lp = source(rec)
            if lp is None or len(lp) == 0:
                raise MissingLogProbs(f"trajectory t={rec.t} {rec.intersection} #{rec.sample} has no token log-probs")
            p.append(token_avg_loglik(lp))
            q.append(float(row[PHASE_INDEX[rec.a]]))
            ids.append(f"{rec.intersection}@{rec.t}#{rec.sample}")
        out.append(RankingBatch(tuple(ids), tuple(p), tuple(q), beta))
    return out


def write_ranking_batches(batches: Iterable[RankingBatch], path: str | Path) -> int:
    return _write_jsonl(path, (b.to_dict() for b in batches))


def read_ranking_batches(path: str | Path) -> list[RankingBatch]:
    return _read_jsonl(path, RankingBatch.from_dict)


# --------------------------------------------------------------------------
# imitation dataset
# --------------------------------------------------------------------------


def _ift_row(rec: ReasoningRecord) -> dict:
    if not rec.Y.rstrip().endswith("</signal>"):
        raise ParseError(f"record t={rec.t} {rec.intersection}: response does not end with a <signal> tag")
    meta = {"t": rec.t, "source": rec.source, "o_t": list(rec.o_t), "intersection": rec.intersection,
            "sample": rec.sample}
    if rec.logprobs is not None:
        meta["logprobs"] = list(rec.logprobs)
    return {"instruction": rec.X, "response": rec.Y, "meta": meta}


def export_ift_dataset(records: Sequence[ReasoningRecord], path: str | Path) -> int:
    """Write ``{instruction, response, meta}`` lines; returns the record count."""
    rows = [_ift_row(r) for r in records]  # validate everything before touching the file
    return _write_jsonl(path, rows)


def _from_ift_row(d: dict) -> ReasoningRecord:
    meta = d["meta"]
    parsed = parse_decision(d["response"])
    if parsed.parse_status is not ParseStatus.OK:
        raise ValueError("response has no valid <signal> tag")
    lp = meta.get("logprobs")
    return ReasoningRecord(
        int(meta["t"]), d["instruction"], d["response"], parsed.phase,
        tuple(float(x) for x in meta["o_t"]), meta["source"], meta.get("intersection", ""),
        int(meta.get("sample", 0)), tuple(float(x) for x in lp) if lp is not None else None,
    )


def import_ift_dataset(path: str | Path) -> list[ReasoningRecord]:
    return _read_jsonl(path, _from_ift_row)
