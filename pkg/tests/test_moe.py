import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from assemblypolicy import tensor as T
from assemblypolicy.moe import MoEFeedForward, RoutingRecord, UnknownSkillError, aux_loss, top_k
from assemblypolicy.tensor import Tensor

SKILLS = ("a", "b")


def make_moe(seed=0, experts=4, k=1, shared=1, d=6):
    with T.default_dtype(np.float64):
        return MoEFeedForward(np.random.default_rng(seed), d, 8, experts, k, shared, SKILLS)


def record(soft, hard):
    return RoutingRecord(Tensor(np.asarray(soft, dtype=np.float64)), np.asarray(hard, dtype=np.float64), "a")


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_top_k_matches_sort_oracle(seed, k):
    rng = np.random.default_rng(seed)
    # coarse values so ties show up often
    probs = rng.integers(0, 4, size=(7, 4)).astype(float)
    got = top_k(probs, k)
    for row, sel in zip(probs, got):
        oracle = sorted(range(4), key=lambda e: (-row[e], e))[:k]
        assert list(sel) == oracle


def test_full_tie_routes_to_expert_zero():
    assert top_k(np.full((3, 4), 0.25), 1).ravel().tolist() == [0, 0, 0]


def test_aux_zero_when_balanced():
    e = 4
    soft = np.full((8, e), 1 / e)
    hard = np.eye(e)[np.arange(8) % e]
    assert abs(float(aux_loss(record(soft, hard), 1 / e).data)) <= 1e-9


def test_aux_quarter_when_collapsed():
    soft = np.tile([1.0, 0, 0, 0], (5, 1))
    hard = soft.copy()
    assert float(aux_loss(record(soft, hard), 0.25).data) == pytest.approx(0.25, abs=1e-12)


def test_aux_positive_when_dense_top_k():
    soft = np.full((4, 4), 0.25)
    hard = np.ones((4, 4))
    assert float(aux_loss(record(soft, hard), 0.25).data) > 0


def test_aux_rejects_degenerate_inputs():
    with pytest.raises(ValueError):
        aux_loss(record(np.zeros((0, 4)), np.zeros((0, 4))), 0.25)
    with pytest.raises(ValueError):
        aux_loss(record(np.ones((2, 1)), np.ones((2, 1))), 1.0)


def test_top1_runs_one_expert_per_token():
    moe = make_moe()
    x = Tensor(np.random.default_rng(1).standard_normal((13, 6)))
    moe(x, ["a"] * 13)
    assert moe.expert_calls == 13


def test_top2_runs_two_experts_per_token():
    moe = make_moe(k=2)
    moe(Tensor(np.random.default_rng(1).standard_normal((5, 6))), ["b"] * 5)
    assert moe.expert_calls == 10


def test_unknown_skill_raises():
    moe = make_moe()
    with pytest.raises(UnknownSkillError):
        moe(Tensor(np.zeros((2, 6))), ["c", "c"])


def test_skill_count_must_match_tokens():
    with pytest.raises(T.ShapeError):
        make_moe()(Tensor(np.zeros((3, 6))), ["a"])


def test_router_isolation():
    moe = make_moe(seed=3)
    x = Tensor(np.random.default_rng(2).standard_normal((9, 6)))
    out, recs = moe(x, ["a"] * 9)
    loss = T.tsum(out * out) + aux_loss(recs[0], 0.25)
    loss.backward()
    rb = moe.routers["b"]
    for p in (rb.weight, rb.bias, moe.mix_logits["b"]):
        assert p.grad is None or np.all(p.grad == 0)
    assert np.any(moe.routers["a"].weight.grad != 0)
    assert moe.mix_logits["a"].grad[0] != 0
    shared_grads = [p.grad for p in moe.shared[0].parameters()]
    assert all(g is not None and np.any(g != 0) for g in shared_grads)


def test_mixed_batch_matches_separate_calls():
    moe = make_moe(seed=4)
    x = np.random.default_rng(5).standard_normal((6, 6))
    skills = ["a", "b", "a", "b", "b", "a"]
    out, recs = moe(Tensor(x), skills)
    assert [r.skill for r in recs] == ["a", "b"]
    for s in SKILLS:
        rows = [i for i, k in enumerate(skills) if k == s]
        alone, _ = moe(Tensor(x[rows]), [s] * len(rows))
        np.testing.assert_allclose(out.data[rows], alone.data, atol=1e-12)


@pytest.mark.parametrize("logit,which", [(40.0, "routed"), (-40.0, "shared")])
def test_alpha_endpoints(logit, which):
    moe = make_moe(seed=6)
    moe.mix_logits["a"].data[:] = logit
    x = Tensor(np.random.default_rng(7).standard_normal((4, 6)))
    out, _ = moe(x, ["a"] * 4)
    if which == "shared":
        np.testing.assert_allclose(out.data, moe.shared[0](x).data, atol=1e-12)
    else:
        probs, sel, _ = moe.route(x, "a")
        ref = np.stack([moe.experts[e](x[i:i + 1]).data[0] * probs.data[i, e] for i, e in enumerate(sel[:, 0])])
        np.testing.assert_allclose(out.data, ref, atol=1e-12)


def test_initial_alpha_is_half():
    assert make_moe().alpha("a") == 0.5


def test_top_k_bounds_validated():
    with pytest.raises(ValueError):
        make_moe(k=5)
