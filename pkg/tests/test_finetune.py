import json
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from tsclab.critic import CriticParams
from tsclab.errors import EmptySequence, MissingLogProbs, ParseError
from tsclab.finetune import (
    RankingBatch,
    ReasoningRecord,
    TokenLogProbs,
    build_ranking_batches,
    export_ift_dataset,
    ift_nll,
    import_ift_dataset,
    rbc_loss,
    read_ranking_batches,
    read_records,
    token_avg_loglik,
    write_ranking_batches,
    write_records,
)
from tsclab.netmodel import PHASE_IDS

logprob = st.floats(-6.0, 0.0, allow_nan=False)


def direct_rbc(p, q, beta):
    """Plain transcription of the ranking loss, with no numerical tricks."""
    total = 1.0
    for j in range(len(p)):
        above = [i for i in range(len(p)) if q[i] > q[j]]
        if not above:
            continue
        pstar = min(p[i] for i in above)
        for i in above:
            total += math.exp(p[j] - p[i]) + math.exp(2 * pstar - 2 * beta - p[i] - p[j])
    return math.log(total)


def fd_grad(batch, eps=1e-6):
    p = list(batch.p)
    g = []
    for i in range(len(p)):
        up, down = list(p), list(p)
        up[i] += eps
        down[i] -= eps
        g.append((direct_rbc(up, batch.q, batch.beta) - direct_rbc(down, batch.q, batch.beta)) / (2 * eps))
    return np.array(g)


def random_batch(rng, k):
    p = -rng.uniform(0.05, 3.0, k)
    q = rng.integers(-3, 4, k).astype(float) + rng.normal(0, 1e-3, k) * (rng.random(k) < 0.5)
    return RankingBatch((), tuple(p), tuple(q), float(rng.uniform(0, 2)))


# --- likelihood losses -------------------------------------------------------


def test_ift_nll_examples():
    assert ift_nll([-1.0, -2.0, -3.0]) == 6.0
    assert ift_nll([0.0, 0.0]) == 0.0
    assert ift_nll(TokenLogProbs((-0.25,) * 8)) == pytest.approx(2.0)


def test_token_avg_examples():
    assert token_avg_loglik([-2.0, -4.0]) == -3.0
    assert token_avg_loglik([-0.5]) == -0.5


def test_empty_and_positive_logprobs_rejected():
    with pytest.raises(EmptySequence):
        ift_nll([])
    with pytest.raises(EmptySequence):
        token_avg_loglik(TokenLogProbs(()))
    with pytest.raises(ValueError):
        TokenLogProbs((0.1,))


@given(st.lists(logprob, min_size=1, max_size=40))
def test_nll_is_length_times_negative_mean(values):
    assert ift_nll(values) == pytest.approx(-len(values) * token_avg_loglik(values), abs=1e-9)


# --- ranking loss ------------------------------------------------------------


def test_rbc_single_trajectory_is_zero():
    loss, grad = rbc_loss(RankingBatch(("a",), (-1.3,), (2.0,)))
    assert loss == 0.0 and grad.tolist() == [0.0]


def test_rbc_log3_fixture():
    loss, grad = rbc_loss(RankingBatch(("hi", "lo"), (-0.7, -0.7), (1.0, 0.0), beta=0.0))
    assert abs(loss - math.log(3)) <= 1e-6
    assert abs(loss - 1.0986) < 1e-4
    assert np.allclose(grad, 0.0)


def test_rbc_ties_contribute_no_pairs():
    loss, _ = rbc_loss(RankingBatch((), (-1.0, -2.0, -0.5), (3.0, 3.0, 3.0)))
    assert loss == 0.0


def test_rbc_top_gradient_sign_at_beta_one():
    batch = RankingBatch(("hi", "lo"), (-1.0, -1.0), (2.0, 1.0), beta=1.0)
    _, grad = rbc_loss(batch)
    assert grad[0] < 0
    assert np.sign(fd_grad(batch)[0]) == -1


def test_rbc_beta_override():
    batch = RankingBatch((), (-0.7, -0.7), (1.0, 0.0), beta=5.0)
    assert rbc_loss(batch, beta=0.0)[0] == pytest.approx(math.log(3))


@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
@settings(max_examples=100, deadline=None)
def test_rbc_matches_direct_formula(seed, k):
    batch = random_batch(np.random.default_rng(seed), k)
    assert rbc_loss(batch)[0] == pytest.approx(direct_rbc(batch.p, batch.q, batch.beta), rel=1e-12, abs=1e-12)


@given(st.integers(0, 2**32 - 1), st.integers(2, 4))
@settings(max_examples=100, deadline=None)
def test_rbc_gradient_matches_finite_differences(seed, k):
    batch = random_batch(np.random.default_rng(seed), k)
    _, g = rbc_loss(batch)
    n = fd_grad(batch)
    err = np.linalg.norm(g - n) / max(np.linalg.norm(g) + np.linalg.norm(n), 1e-12)
    assert err <= 1e-5


@given(st.lists(st.tuples(logprob, st.integers(-3, 3)), min_size=1, max_size=5), st.floats(0, 3))
def test_rbc_nonnegative_and_zero_iff_no_pairs(items, beta):
    p, q = zip(*items)
    loss, _ = rbc_loss(RankingBatch((), p, q, beta))
    assert loss >= 0
    has_pairs = len(set(q)) > 1
    assert (loss == 0) == (not has_pairs)


@given(st.lists(st.tuples(logprob, st.integers(-3, 3)), min_size=1, max_size=5),
       st.integers(-1000, 1000))
def test_rbc_invariant_to_shifting_q(items, shift):
    p, q = zip(*items)
    base = RankingBatch((), p, q, 1.0)
    moved = RankingBatch((), p, tuple(x + shift for x in q), 1.0)
    assert rbc_loss(base)[0] == rbc_loss(moved)[0]
    assert np.array_equal(rbc_loss(base)[1], rbc_loss(moved)[1])


@given(st.floats(-3, 0), st.floats(0, 3), st.floats(0, 3), st.floats(1e-3, 0.5))
def test_monotone_separation_two_trajectories(p_lo, gap, beta, step):
    # Raising the top trajectory's p is non-increasing while its lead over the other stays within beta.
    assume(gap + step <= beta)
    p_top = p_lo + gap
    assume(p_top + step <= 0)
    q = (1.0, 0.0)
    before, grad = rbc_loss(RankingBatch((), (p_top, p_lo), q, beta))
    after, _ = rbc_loss(RankingBatch((), (p_top + step, p_lo), q, beta))
    assert grad[0] <= 1e-12
    assert after <= before + 1e-12


@given(st.integers(0, 2**32 - 1), st.integers(2, 4), st.floats(1e-3, 0.3))
@settings(max_examples=100, deadline=None)
def test_monotone_separation_when_top_is_least_likely(seed, k, step):
    # With the top-scored trajectory the least likely one and beta >= ln(2k)/2 every pair
    # term involving it shrinks as its p rises.
    rng = np.random.default_rng(seed)
    q = rng.permutation(k).astype(float)
    top = int(q.argmax())
    p = -rng.uniform(0.0, 2.0, k)
    p[top] = p.min() - step - rng.uniform(0, 1)
    beta = math.log(2 * k) / 2 + rng.uniform(0, 1)
    before, grad = rbc_loss(RankingBatch((), tuple(p), tuple(q), beta))
    raised = p.copy()
    raised[top] += step
    after, _ = rbc_loss(RankingBatch((), tuple(raised), tuple(q), beta))
    assert grad[top] <= 0
    assert after <= before + 1e-12


def test_monotone_separation_fails_outside_margin():
    # Once the top trajectory leads by more than beta the boundary term dominates and
    # raising its p increases the loss, so the property only holds in a regime.
    q = (1.0, 0.0)
    before, grad = rbc_loss(RankingBatch((), (-0.1, -3.0), q, 0.0))
    after, _ = rbc_loss(RankingBatch((), (-0.05, -3.0), q, 0.0))
    assert grad[0] > 0
    assert after > before


# --- batch construction and files ---------------------------------------------


def record(t, a, sample=0, o=None, logprobs=(-0.5, -1.5), X="prompt", inter="i0"):
    o = o if o is not None else tuple(float(x) for x in range(16))
    return ReasoningRecord(t, X, f"think\n<signal>{a}</signal>", a, o, "stub", inter, sample, logprobs)


def scoring_critic():
    p = CriticParams.zeros()
    p.b3[:] = [3.0, 1.0, 2.0, 0.0]  # ETWT > NTST > ELWL > NLSL
    return p


def test_build_batches_group_of_four():
    recs = [record(0, a, s, logprobs=(-(s + 1.0),)) for s, a in enumerate(PHASE_IDS)]
    (batch,) = build_ranking_batches(recs, scoring_critic())
    assert batch.k == 4
    assert batch.q == (3.0, 1.0, 2.0, 0.0)
    assert batch.p == (-1.0, -2.0, -3.0, -4.0)
    assert batch.ids[0] == "i0@0#0"


def test_build_batches_groups_by_step_and_intersection():
    recs = [record(0, "ETWT"), record(35, "ETWT"), record(0, "NLSL", inter="i1"), record(0, "ELWL", 1)]
    batches = build_ranking_batches(recs, scoring_critic())
    assert sorted(b.k for b in batches) == [1, 1, 2]


def test_build_batches_single_and_tied():
    (single,) = build_ranking_batches({"g": [record(0, "NTST")]}, scoring_critic())
    assert rbc_loss(single)[0] == 0.0
    (tied,) = build_ranking_batches({"g": [record(0, "ELWL", 0), record(0, "ELWL", 1)]}, scoring_critic())
    assert rbc_loss(tied)[0] == 0.0


def test_build_batches_missing_logprobs():
    with pytest.raises(MissingLogProbs):
        build_ranking_batches([record(0, "ETWT"), record(0, "NLSL", 1, logprobs=None)], scoring_critic())
    (b,) = build_ranking_batches([record(0, "ETWT", logprobs=None)], scoring_critic(), logprobs=lambda r: [-2.0])
    assert b.p == (-2.0,)


def test_build_batches_rejects_mixed_prompts():
    with pytest.raises(ValueError):
        build_ranking_batches({"g": [record(0, "ETWT"), record(0, "NLSL", 1, X="other")]}, scoring_critic())


def test_ranking_batch_validation_and_round_trip(tmp_path):
    with pytest.raises(ValueError):
        RankingBatch((), (0.5,), (1.0,))
    with pytest.raises(EmptySequence):
        RankingBatch((), (), ())
    batches = [RankingBatch(("a", "b"), (-1.0, -2.0), (0.5, 0.1), 0.3), RankingBatch((), (-1.0,), (0.0,))]
    write_ranking_batches(batches, tmp_path / "b.jsonl")
    assert read_ranking_batches(tmp_path / "b.jsonl") == batches


def test_record_requires_matching_signal():
    with pytest.raises(ParseError):
        ReasoningRecord(0, "X", "no tag here", "ETWT", (0.0,) * 16, "stub")
    with pytest.raises(ParseError):
        ReasoningRecord(0, "X", "<signal>NLSL</signal>", "ETWT", (0.0,) * 16, "stub")


def test_records_round_trip_and_line_numbers(tmp_path):
    recs = [record(0, "ETWT"), record(35, "NLSL", logprobs=None)]
    assert write_records(recs, tmp_path / "r.jsonl") == 2
    assert read_records(tmp_path / "r.jsonl") == recs
    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps(recs[0].to_dict()) + "\n{\"t\": 1}\n")
    with pytest.raises(ParseError, match=r"bad\.jsonl:2"):
        read_records(bad)


def test_ift_export_empty(tmp_path):
    assert export_ift_dataset([], tmp_path / "ift.jsonl") == 0
    assert (tmp_path / "ift.jsonl").read_text() == ""


def test_ift_export_round_trip_and_schema(tmp_path):
    recs = [record(0, "ETWT"), record(35, "NLSL", 2, logprobs=None, inter="i1")]
    assert export_ift_dataset(recs, tmp_path / "ift.jsonl") == 2
    lines = (tmp_path / "ift.jsonl").read_text().splitlines()
    row = json.loads(lines[0])
    assert list(row) == ["instruction", "response", "meta"]
    assert list(row["meta"])[:3] == ["t", "source", "o_t"]
    assert row["response"].endswith("<signal>ETWT</signal>")
    assert import_ift_dataset(tmp_path / "ift.jsonl") == recs


def test_ift_export_validates_trailing_tag(tmp_path):
    trailing = ReasoningRecord(0, "X", "<signal>ETWT</signal> and then more words", "ETWT", (0.0,) * 16, "stub")
    with pytest.raises(ParseError):
        export_ift_dataset([record(0, "NTST"), trailing], tmp_path / "ift.jsonl")
    assert not (tmp_path / "ift.jsonl").exists()
