import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from aimlab import autodiff as ad
from aimlab.aim import (
    AimConfig,
    AimParams,
    activation_mask,
    aim_forward,
    aim_layer,
    attend,
    init_aim_params,
    select,
    select_hard,
    select_soft,
    select_stochastic,
)
from aimlab.autodiff import ContractError, DimensionError, Tensor


def small_params(rng, M=6, D=5, d=3, dh=4, do=2):
    return init_aim_params(AimConfig(M=M, K=min(2, M), l=0, d=d, d_hidden=dh, d_out=do), D, rng)


def unit_params(logit: float) -> AimParams:
    """M=1, D=d=1 with q=1 and W^K=sqrt(d)*logit so the input-slot logit equals ``logit`` at z=1."""
    return AimParams(
        h=ad.parameter([[1.0]]),
        Wq=ad.parameter([[[1.0]]]),
        Wk=ad.parameter([[logit]]),
        Wm=ad.parameter([[[1.0]]]),
    )


# --- config --------------------------------------------------------------------


def test_config_rejects_slack_beyond_m():
    with pytest.raises(ContractError):
        AimConfig(M=4, K=3, l=2)
    with pytest.raises(ContractError):
        AimConfig(M=4, K=0)
    AimConfig(M=4, K=10, l=7, selection_mode="soft")  # soft mode ignores K and l


# --- attend ----------------------------------------------------------------------


def test_attend_hand_value():
    scores, pairs = attend(Tensor([1.0]), unit_params(1.0))
    assert scores.data[0] == pytest.approx(math.e / (math.e + 1), abs=1e-15)
    assert scores.data[0] == pytest.approx(0.7311, abs=1e-4)
    assert pairs.data.sum() == pytest.approx(1.0, abs=1e-15)


def test_attend_zero_input_is_half(rng):
    p = small_params(rng)
    scores, _ = attend(Tensor(np.zeros(p.D)), p)
    assert (scores.data == 0.5).all()


def test_attend_dimension_error(rng):
    with pytest.raises(DimensionError):
        attend(Tensor(np.zeros(7)), small_params(rng))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pairs_normalized(seed):
    rng = np.random.default_rng(seed)
    p = small_params(rng)
    _, pairs = attend(Tensor(rng.normal(size=(4, p.D)) * 5), p)
    assert np.abs(pairs.data.sum(axis=-1) - 1.0).max() <= 1e-12


# --- selection -------------------------------------------------------------------


def test_hard_direct_sort():
    m = select_hard([0.9, 0.1, 0.8, 0.5], 2)
    assert m.indices().tolist() == [0, 2]
    assert m.weights.tolist() == [0.9, 0.0, 0.8, 0.0]


def test_hard_full_selection():
    s = np.array([0.3, 0.2, 0.9])
    m = select_hard(s, 3)
    assert m.active.all() and (m.weights == s).all()


def test_hard_ties_lower_index():
    assert select_hard([0.5, 0.5, 0.5, 0.5], 2).indices().tolist() == [0, 1]


def test_hard_k_out_of_range():
    with pytest.raises(ContractError):
        select_hard([0.1, 0.2], 3)


def test_stochastic_out_of_range(rng):
    with pytest.raises(ContractError):
        select_stochastic([0.1, 0.2, 0.3], 2, 2, rng)


def test_stochastic_subset_of_top(rng):
    s = rng.uniform(size=(500, 10))
    m = select_stochastic(s, 3, 2, rng)
    top = np.argsort(-s, axis=1, kind="stable")[:, :5]
    for row, t in zip(m.active, top):
        assert set(np.flatnonzero(row)) <= set(t)


def test_stochastic_uniform_over_subsets(rng):
    s = np.tile([0.2, 0.9, 0.7, 0.4], (10_000, 1))  # top-3 = {1, 2, 3}
    active = select_stochastic(s, 2, 1, rng).active
    subsets = [frozenset(c) for c in itertools.combinations([1, 2, 3], 2)]
    counts = np.array([sum(frozenset(np.flatnonzero(r)) == sub for r in active) for sub in subsets])
    assert counts.sum() == 10_000
    assert np.abs(counts / 10_000 - 1 / 3).max() <= 0.02
    assert stats.chisquare(counts).pvalue > 0.01


def test_soft_direct_comparison():
    pairs = np.array([[0.9, 0.1], [0.4, 0.6], [0.51, 0.49]])
    assert select_soft(pairs, 0.5).indices().tolist() == [0, 2]


def test_soft_zero_input_activates_nothing(rng):
    p = small_params(rng)
    cfg = AimConfig(M=p.M, K=2, l=0, d=3, d_hidden=4, d_out=2, selection_mode="soft")
    out, mask = aim_layer(Tensor(np.zeros((1, p.D))), p, cfg)
    assert mask.count.tolist() == [0]
    assert (out.data == 0).all()


def test_soft_threshold_zero_all_active(rng):
    p = small_params(rng)
    _, pairs = attend(Tensor(rng.normal(size=p.D)), p)
    assert select_soft(pairs, 0.0).active.all()


def test_select_stochastic_needs_rng(rng):
    p = small_params(rng)
    scores, pairs = attend(Tensor(rng.normal(size=p.D)), p)
    with pytest.raises(ContractError):
        select(scores, pairs, AimConfig(M=6, K=2, l=1), "stochastic", None)


# --- forward ----------------------------------------------------------------------


def test_forward_zero_input(rng):
    p = small_params(rng)
    z = Tensor(np.zeros(p.D))
    scores, _ = attend(z, p)
    assert (aim_forward(z, select_hard(scores, 2), p).data == 0).all()


def test_forward_single_mechanism_identity():
    p = unit_params(1.0)
    z = Tensor([1.0])
    scores, _ = attend(z, p)
    out = aim_forward(z, select_hard(scores, 1), p)
    assert out.data[0] == pytest.approx(math.e / (math.e + 1), abs=1e-15)


def test_forward_dimension_error(rng):
    p = small_params(rng)
    with pytest.raises(DimensionError):
        aim_forward(Tensor(np.zeros(p.D + 1)), select_hard(np.ones(p.M), 2), p)


def test_activation_mask_matches_hard(rng):
    p = small_params(rng)
    cfg = AimConfig(M=6, K=3, l=2, d=3, d_hidden=4, d_out=2)
    z = rng.normal(size=(20, p.D))
    scores, _ = attend(Tensor(z), p)
    np.testing.assert_array_equal(activation_mask(z, p, cfg), select_hard(scores, 3).active)
    full = AimConfig(M=6, K=6, l=0, d=3, d_hidden=4, d_out=2)
    assert activation_mask(z, p, full).all()


def test_activation_mask_off_tape(rng):
    p = small_params(rng)
    cfg = AimConfig(M=6, K=3, l=0, d=3, d_hidden=4, d_out=2)
    with ad.Tape() as tape:
        activation_mask(rng.normal(size=(2, p.D)), p, cfg)
    assert tape.nodes == []


# --- invariants over random draws ------------------------------------------------------

configs = st.tuples(st.integers(1, 8), st.integers(0, 4)).flatmap(
    lambda mk: st.tuples(st.just(mk[0] + mk[1]), st.integers(1, mk[0]), st.integers(0, mk[1]))
)


@settings(max_examples=200, deadline=None)
@given(configs, st.integers(0, 2**32 - 1), st.sampled_from(["hard", "stochastic"]))
def test_exact_k_active(cfg, seed, mode):
    M, K, l = cfg
    l = min(l, M - K)
    rng = np.random.default_rng(seed)
    aim_cfg = AimConfig(M=M, K=K, l=l, d=3, d_hidden=3, d_out=2)
    p = init_aim_params(aim_cfg, 4, rng)
    _, mask = aim_layer(Tensor(rng.normal(size=(5, 4))), p, aim_cfg, mode, rng)
    assert (mask.count == K).all()
    assert ((mask.weights != 0) == mask.active).all()
    assert ((mask.weights[mask.active] > 0) & (mask.weights[mask.active] < 1)).all()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_inhibited_mechanisms_get_exact_zero_gradient(seed):
    rng = np.random.default_rng(seed)
    cfg = AimConfig(M=7, K=3, l=2, d=3, d_hidden=4, d_out=2)
    p = init_aim_params(cfg, 5, rng)
    with ad.Tape() as tape:
        out, mask = aim_layer(Tensor(rng.normal(size=(1, 5))), p, cfg, "stochastic", rng)
        loss = ad.sum_(ad.mul(out, out))
    (gm,) = tape.gradients(loss, [p.Wm])
    off = ~mask.active[0]
    assert not gm[off].any()
    assert not np.signbit(gm[off]).any()  # +0.0, not -0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1))
def test_zero_slack_is_hard(seed, draw_seed):
    rng = np.random.default_rng(seed)
    s = rng.uniform(size=(8, 9))
    a = select_stochastic(s, 4, 0, np.random.default_rng(draw_seed))
    b = select_hard(s, 4)
    assert a.active.tobytes() == b.active.tobytes() and a.weights.tobytes() == b.weights.tobytes()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    cfg = AimConfig(M=6, K=3, l=0, d=3, d_hidden=4, d_out=2)
    p = init_aim_params(cfg, 5, rng)
    z = Tensor(rng.normal(size=(3, 5)))
    perm = rng.permutation(6)
    out, _ = aim_layer(z, p, cfg, "hard")
    out_p, _ = aim_layer(z, p.permuted(perm), cfg, "hard")
    assert np.abs(out.data - out_p.data).max() <= 1e-12


def test_aim_gradient_fixed_mask(rng):
    cfg = AimConfig(M=5, K=2, l=1, d=3, d_hidden=4, d_out=3)
    p = init_aim_params(cfg, 4, rng)
    z = ad.parameter(rng.normal(size=(2, 4)))
    _, mask = aim_layer(z, p, cfg, "stochastic", rng)
    f = lambda: ad.sum_(ad.mul(aim_layer(z, p, cfg, mask=mask)[0], aim_layer(z, p, cfg, mask=mask)[0]))
    assert ad.finite_diff_check(f, [z, p.h, p.Wq, p.Wk, p.Wm]) < 1e-5
