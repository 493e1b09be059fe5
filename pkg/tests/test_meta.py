import numpy as np
import pytest

from aimlab import autodiff as ad
from aimlab.aim import AimConfig
from aimlab.autodiff import ContractError
from aimlab.config import TrainConfig
from aimlab.data import EpisodeSpec, PackedDataset, SyntheticSpec, gen_synthetic, sample_episode
from aimlab.meta import (
    confidence_interval,
    fewshot_episode,
    inner_adapt,
    meta_test_continual,
    meta_test_fewshot,
    meta_train_continual,
    meta_train_fewshot,
    outer_step,
)
from aimlab.models import ConvBackboneSpec, OmlModel, SibModel

IMG = (1, 8, 8)
AIM0 = AimConfig(M=6, K=2, l=0, d=4, d_hidden=5, d_out=6)
AIM = AimConfig(M=6, K=2, l=1, d=4, d_hidden=5, d_out=6)


def _data(classes=12, split=(8, 0, 4), noise=0.1, seed=0):
    ds, _ = gen_synthetic(SyntheticSpec(classes=classes, samples_per_class=10, image_size=8, block=2,
                                        noise_std=noise, split_sizes=split), np.random.default_rng(seed))
    return ds


def _oml(seed=0, aim=AIM, n_classes=12):
    spec = ConvBackboneSpec.uniform(IMG, (3, 3), (2, 2))
    return OmlModel(spec, aim, n_classes, np.random.default_rng(seed), reduce_dim=5)


def _sib(seed=0, aim=AIM, ways=3):
    spec = ConvBackboneSpec.uniform(IMG, (3,), (2,))
    return SibModel(spec, aim, ways, np.random.default_rng(seed))


def _same(a: dict, b: dict) -> bool:
    return set(a) == set(b) and all(a[k].tobytes() == b[k].tobytes() for k in a)


CFG = TrainConfig(T=1, nu_in=0.05, nu_out=0.01, total_steps=3, classes_per_traj=3, shots=4, test_per_class=2,
                  remember=4, eval_classes=4, val_every=0)


# --- inner / outer -------------------------------------------------------------------


def test_inner_zero_step_size_is_noop(rng):
    model = _oml()
    before = model.state_dict()
    inner_adapt(model, rng.uniform(size=(3,) + IMG), [0, 1, 2], 2, 0.0, rng)
    assert _same(before, model.state_dict())


def test_inner_rejects_empty_support(rng):
    with pytest.raises(ContractError):
        inner_adapt(_oml(), np.zeros((0,) + IMG), [], 1, 0.1, rng)


def test_inner_single_step_matches_manual_gradient(rng):
    # l = 0 makes the stochastic selection deterministic, so the mask is reproducible
    model = _oml(aim=AIM0)
    x = rng.uniform(size=(1,) + IMG)
    fast = model.tensors("fast")
    with ad.Tape() as tape:
        loss = ad.cross_entropy(model.logits(x, "hard")[0], np.array([2]))
    grads = tape.gradients(loss, fast)
    expected = [t.data - 0.3 * g for t, g in zip(fast, grads)]
    inner_adapt(model, x, [2], 1, 0.3, np.random.default_rng(0))
    for t, e in zip(fast, expected):
        assert np.array_equal(t.data, e)


def test_inner_leaves_slow_weights_bit_identical(rng):
    model = _oml()
    slow = model.snapshot("slow")
    inner_adapt(model, rng.uniform(size=(4,) + IMG), [0, 1, 2, 3], 2, 0.1, rng)
    assert _same(slow, model.snapshot("slow"))
    assert not _same(model.snapshot("fast"), _oml().snapshot("fast"))


def test_outer_zero_step_size_is_noop(rng):
    model = _oml()
    slow = model.snapshot("slow")
    outer_step(model, rng.uniform(size=(3,) + IMG), np.array([0, 1, 2]), 0.0, rng)
    assert _same(slow, model.snapshot("slow"))


def test_outer_never_touches_fast_weights(rng):
    model = _oml()
    inner_adapt(model, rng.uniform(size=(2,) + IMG), [0, 1], 1, 0.1, rng)
    fast = model.snapshot("fast")
    before_slow = model.snapshot("slow")
    outer_step(model, rng.uniform(size=(3,) + IMG), np.array([0, 1, 2]), 0.1, rng)
    assert _same(fast, model.snapshot("fast"))
    assert not _same(before_slow, model.snapshot("slow"))


def test_outer_without_inner_steps_is_plain_sgd(rng):
    model = _oml(aim=AIM0)
    x, y = rng.uniform(size=(4,) + IMG), np.array([0, 1, 2, 3])
    slow = model.tensors("slow")
    with ad.Tape() as tape:
        loss = ad.cross_entropy(model.logits(x, "hard")[0], y)
    expected = [t.data - 0.2 * g for t, g in zip(slow, tape.gradients(loss, slow))]
    inner_adapt(model, x, y, 0, 0.5, rng)
    outer_step(model, x, y, 0.2, np.random.default_rng(0))
    for t, e in zip(slow, expected):
        assert np.array_equal(t.data, e)


# --- few-shot ------------------------------------------------------------------------


def test_fewshot_zero_steps_leaves_model_unchanged():
    ds = _data(split=(6, 3, 3))
    model = _sib()
    before = model.state_dict()
    feats = model.encode_slow(ds.pixels())
    cfg = TrainConfig(total_steps=0)
    meta_train_fewshot(model, ds, feats, EpisodeSpec(3, 1, 2), cfg, np.random.default_rng(0))
    assert _same(before, model.state_dict())


def test_fewshot_train_episode_partition_discipline():
    ds = _data(split=(6, 3, 3))
    model = _sib()
    feats = model.encode_slow(ds.pixels())
    frozen = model.snapshot("frozen")
    slow = model.snapshot("slow")
    ep = sample_episode(ds, EpisodeSpec(3, 2, 3), "meta_train", np.random.default_rng(0))
    fewshot_episode(model, feats, ep, TrainConfig(nu_out=0.05), np.random.default_rng(1), train=True)
    assert _same(frozen, model.snapshot("frozen"))
    assert not _same(slow, model.snapshot("slow"))


def test_fewshot_eval_restores_fast_weights():
    ds = _data(split=(6, 3, 3))
    model = _sib()
    feats = model.encode_slow(ds.pixels())
    before = model.state_dict()
    meta_test_fewshot(model, ds, feats, EpisodeSpec(3, 1, 2), TrainConfig(), np.random.default_rng(0), 5)
    assert _same(before, model.state_dict())


def test_fewshot_untrained_on_uninformative_data_is_chance():
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(10), 20)
    ds = PackedDataset(rng.uniform(size=(200,) + IMG), labels, {"meta_test": list(range(10))})
    model = _sib(ways=5)
    feats = model.encode_slow(ds.pixels())
    ev = meta_test_fewshot(model, ds, feats, EpisodeSpec(5, 1, 5), TrainConfig(), np.random.default_rng(1), 300)
    sigma = np.sqrt(0.2 * 0.8 / (300 * 25))
    assert abs(ev.mean - 0.2) < 3 * sigma + 0.01


def test_confidence_interval_scales_with_sqrt_n():
    accs = list(np.random.default_rng(0).uniform(size=50))
    m1, c1 = confidence_interval(accs)
    m4, c4 = confidence_interval(accs * 4)
    assert m1 == pytest.approx(m4, abs=1e-12)
    assert c4 == pytest.approx(c1 / 2, rel=1e-12)


def test_fewshot_determinism():
    ds = _data(split=(6, 3, 3))
    cfg = TrainConfig(total_steps=6, val_every=3, val_episodes=4)
    runs = []
    for _ in range(2):
        model = _sib()
        feats = model.encode_slow(ds.pixels())
        log = meta_train_fewshot(model, ds, feats, EpisodeSpec(3, 1, 2), cfg, np.random.default_rng(5))
        runs.append((log.curves, log.losses, model.state_dict()))
    assert runs[0][0] == runs[1][0] and runs[0][1] == runs[1][1]
    assert _same(runs[0][2], runs[1][2])


# --- continual -----------------------------------------------------------------------


def test_continual_training_audit_uses_meta_train_only():
    ds = _data()
    audit: list = []
    meta_train_continual(_oml(), ds, CFG, np.random.default_rng(0), audit=audit)
    train_ids = set(np.flatnonzero(np.isin(ds.labels, ds.classes("meta_train"))).tolist())
    assert audit and set(audit) <= train_ids


def test_continual_meta_test_no_rehearsal():
    ds = _data()
    model = _oml()
    ev = meta_test_continual(model, ds, CFG, np.random.default_rng(3))
    seen = 0
    # gradients touch each class's support samples in one contiguous block, never earlier classes
    for cls in ev.classes:
        block = ev.audit[seen : seen + CFG.shots]
        assert (ds.labels[block] == cls).all()
        seen += CFG.shots
    assert seen == len(ev.audit)


def test_continual_meta_test_restores_state_and_shapes():
    ds = _data()
    model = _oml()
    before = model.state_dict()
    ev = meta_test_continual(model, ds, CFG, np.random.default_rng(0))
    assert _same(before, model.state_dict())
    assert len(ev.train_curve) == len(ev.test_curve) == CFG.eval_classes


def test_continual_first_class_is_trivially_correct():
    ds = _data()
    ev = meta_test_continual(_oml(), ds, CFG, np.random.default_rng(0), n_classes=1)
    assert ev.train_curve == [1.0] and ev.test_curve == [1.0]


def test_continual_head_too_small():
    with pytest.raises(ContractError):
        meta_test_continual(_oml(n_classes=3), _data(), CFG, np.random.default_rng(0), n_classes=4)


def test_continual_meta_train_partition_and_determinism():
    ds = _data()
    a, b = _oml(), _oml()
    la = meta_train_continual(a, ds, CFG, np.random.default_rng(7))
    lb = meta_train_continual(b, ds, CFG, np.random.default_rng(7))
    assert la.losses == lb.losses
    assert _same(a.state_dict(), b.state_dict())
    assert not _same(a.snapshot("slow"), _oml().snapshot("slow"))


def test_continual_random_model_on_uninformative_data_is_near_chance():
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(8), 20)
    ds = PackedDataset(rng.uniform(size=(160,) + IMG), labels, {"meta_test": list(range(8))})
    cfg = TrainConfig(shots=10, test_per_class=10, eval_classes=8)
    accs = [meta_test_continual(_oml(n_classes=8), ds, cfg, np.random.default_rng(s)).final_test for s in range(10)]
    assert abs(np.mean(accs) - 1 / 8) < 0.08
