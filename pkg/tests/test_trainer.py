import dataclasses
import logging
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dualmode.core import Mode
from dualmode.policy import (DEFAULT_VOCAB, PolicyParams, exact_kl, forward, log_prob_and_grad, pinned,
                             sample_group)
from dualmode.rewards import RewardBreakdown
from dualmode.trainer import (DivergenceError, GrpoConfig, NonFiniteGradient, RolloutGroup, SftRecord,
                              TrainingLog, clip_active, clipped_term, compute_advantages, evaluate, fit,
                              grpo_step, prepare, rollout_group, sft_loss_and_grad, surrogate_objective,
                              warmup_sft, _sft_arrays)
from dualmode.world import F_BASE, F_FULL, generate_dataset

K = DEFAULT_VOCAB.size


@pytest.fixture(scope="module")
def tiny_packs():
    return prepare(generate_dataset(100, 21)), prepare(generate_dataset(40, 22))


@pytest.fixture(scope="module")
def warm(tiny_packs):
    return warmup_sft(PolicyParams.zeros(), tiny_packs[0], 2.0, 300)


def _manual_group(pack, params, modes_and_indices, advantages):
    """Group of chosen actions; old log-probs under ``params``."""
    outs = sample_group(params, pack.scene, range(len(modes_and_indices)), anchors=pack.anchors)
    outs = [dataclasses.replace(o, mode=m, traj_index=k) for o, (m, k) in zip(outs, modes_and_indices)]
    old = np.array([log_prob_and_grad(params, pack.feats, m, k)[0] for m, k in modes_and_indices])
    rewards = [RewardBreakdown(0.0, 0, 0.0, 0, 0.0)] * len(outs)
    return RolloutGroup(pack, outs, rewards, np.asarray(advantages, dtype=float), old)


# ---------------------------------------------------------------- advantages

def test_advantage_examples():
    np.testing.assert_array_equal(compute_advantages([1.0, 0.0]), [1.0, -1.0])
    np.testing.assert_array_equal(compute_advantages([0.7] * 8), np.zeros(8))
    with pytest.raises(ValueError):
        compute_advantages([1.0])


def test_advantage_normalization_random_groups():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        r = rng.uniform(0, 4, int(rng.integers(2, 17)))
        a = compute_advantages(r)
        assert abs(a.mean()) < 1e-9
        assert abs(a.std() - 1) < 1e-6


@given(st.lists(st.floats(0, 4), min_size=2, max_size=16))
def test_advantage_guard_or_unit_std(r):
    a = compute_advantages(r)
    if np.std(r) < 1e-8:
        assert not a.any()
    else:
        assert abs(a.mean()) < 1e-9 and abs(a.std() - 1) < 1e-6


# ------------------------------------------------------------------ clipping

def test_clipped_term_examples():
    assert math.isclose(clipped_term(1.5, 2.0, 0.2), 1.2 * 2.0)
    assert math.isclose(clipped_term(0.5, -1.0, 0.2), 0.8 * -1.0)
    assert clipped_term(1.0, 3.0, 0.2) == 3.0
    assert clip_active(1.5, 1.0, 0.2) and not clip_active(1.5, -1.0, 0.2)
    assert clip_active(0.5, -1.0, 0.2) and not clip_active(0.5, 1.0, 0.2)


@given(st.floats(0.01, 5), st.floats(-3, 3), st.floats(0.05, 0.95))
def test_clipped_term_matches_definition(c, a, eps):
    assert clipped_term(c, a, eps) == min(c * a, min(max(c, 1 - eps), 1 + eps) * a)


# ------------------------------------------------------------------ grpo step

def test_positive_advantage_rollout_gains_probability(tiny_packs):
    pack = tiny_packs[0][0]
    params = PolicyParams.zeros()
    group = _manual_group(pack, params, [(Mode.THINKING, 4), (Mode.NON_THINKING, 9)], [1.0, -1.0])
    cfg = GrpoConfig(kl_beta=0.0, lr=0.05)
    new, _ = grpo_step(params, params, params, [group], cfg)
    before = log_prob_and_grad(params, pack.feats, Mode.THINKING, 4)[0]
    after = log_prob_and_grad(new, pack.feats, Mode.THINKING, 4)[0]
    assert after > before


def test_clip_inert_at_ratio_one(tiny_packs, warm):
    cfg = GrpoConfig(kl_beta=0.0, lr=0.1)
    seeds = range(cfg.group_size)
    batch = [rollout_group(warm, p, seeds, cfg) for p in tiny_packs[0][:4]]
    new, stats = grpo_step(warm, warm, warm, batch, cfg)
    assert stats.clip_fraction == 0.0
    g_mode = np.zeros_like(warm.w_mode)
    g_traj = np.zeros_like(warm.w_traj)
    for group in batch:
        for out, a in zip(group.outputs, group.advantages):
            _, gm, gt = log_prob_and_grad(warm, group.pack.feats, out.mode, out.traj_index)
            g_mode += a * gm / len(group.outputs) / len(batch)
            g_traj += a * gt / len(group.outputs) / len(batch)
    np.testing.assert_allclose((new.w_mode - warm.w_mode) / cfg.lr, g_mode, atol=1e-10, rtol=0)
    np.testing.assert_allclose((new.w_traj - warm.w_traj) / cfg.lr, g_traj, atol=1e-10, rtol=0)


def test_zero_beta_ignores_reference_bit_exactly(tiny_packs, warm):
    cfg = GrpoConfig(kl_beta=0.0, lr=0.3)
    batch = [rollout_group(warm, p, range(8), cfg) for p in tiny_packs[0][:3]]
    other_ref = PolicyParams.zeros()
    a, _ = grpo_step(warm, warm, warm, batch, cfg)
    b, _ = grpo_step(warm, warm, other_ref, batch, cfg)
    assert a.same_as(b)


def test_large_beta_restores_toward_reference(tiny_packs, warm):
    rng = np.random.default_rng(1)
    ref = warm
    params = ref.updated(rng.normal(0, 0.05, ref.w_mode.shape), rng.normal(0, 0.05, ref.w_traj.shape))
    cfg = GrpoConfig(kl_beta=50.0, lr=0.01)
    packs = tiny_packs[0][:4]
    batch = [rollout_group(params, p, range(8), cfg) for p in packs]
    new, _ = grpo_step(params, params, ref, batch, cfg)
    before = np.mean([exact_kl(params, ref, p.feats) for p in packs])
    after = np.mean([exact_kl(new, ref, p.feats) for p in packs])
    assert after <= before


def test_surrogate_increases_on_frozen_batch(tiny_packs, warm):
    cfg = GrpoConfig(lr=0.05)
    batch = [rollout_group(warm, p, range(8), cfg) for p in tiny_packs[0][:8]]
    params = warm
    values = [surrogate_objective(params, warm, batch, cfg)]
    for _ in range(10):
        params, _ = grpo_step(params, warm, warm, batch, cfg)
        values.append(surrogate_objective(params, warm, batch, cfg))
    assert all(b > a for a, b in zip(values, values[1:]))


def test_pinned_policy_keeps_mode_head(tiny_packs, warm):
    cfg = GrpoConfig(mode_policy="never-think", lr=0.5)
    start = pinned(warm, Mode.NON_THINKING)
    batch = [rollout_group(start, p, range(8), cfg) for p in tiny_packs[0][:4]]
    new, stats = grpo_step(start, start, start, batch, cfg)
    np.testing.assert_array_equal(new.w_mode, start.w_mode)
    assert stats.think_rate == 0.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_gradient_reports_scene(tiny_packs):
    pack = tiny_packs[0][0]
    params = PolicyParams.zeros()
    group = _manual_group(pack, params, [(Mode.THINKING, 0), (Mode.NON_THINKING, 1)], [np.inf, -np.inf])
    with pytest.raises(NonFiniteGradient, match=str(pack.seed)):
        grpo_step(params, params, params, [group], GrpoConfig())


def test_config_validation():
    for bad in ({"group_size": 1}, {"clip_eps": 0.0}, {"clip_eps": 1.0}, {"kl_beta": -1.0}, {"threshold": 0.0},
                {"threshold": 1.5}, {"mode_policy": "sometimes"}):
        with pytest.raises(ValueError):
            GrpoConfig(**bad)
    with pytest.raises(ValueError):
        GrpoConfig.from_mapping({"nope": 1})
    assert GrpoConfig().pinned_mode is None
    assert GrpoConfig(mode_policy="always-think").pinned_mode is Mode.THINKING


# -------------------------------------------------------------------- warmup

def test_sft_record_anchor_is_argmin(tiny_packs):
    for pack in tiny_packs[0][:20]:
        rec = SftRecord.from_scene(pack.scene)
        anchors = DEFAULT_VOCAB.anchors(pack.scene.ego)
        d = [np.linalg.norm(a - pack.expert.waypoints, axis=1).sum() for a in anchors]
        assert rec.expert_anchor_index == int(np.argmin(d)) == pack.expert_index


def test_sft_gradient_matches_finite_differences(tiny_packs):
    arrays = _sft_arrays(tiny_packs[0][:10])
    rng = np.random.default_rng(2)
    p = PolicyParams(rng.normal(0, 0.3, (2, F_BASE)), rng.normal(0, 0.3, (K, F_FULL)))
    _, g_mode, g_traj = sft_loss_and_grad(p, arrays)
    h = 1e-5
    for _ in range(40):
        j = int(rng.integers(2))
        shape = (2, F_BASE) if j == 0 else (K, F_FULL)
        idx = tuple(int(rng.integers(n)) for n in shape)
        plus = [p.w_mode.copy(), p.w_traj.copy()]
        minus = [p.w_mode.copy(), p.w_traj.copy()]
        plus[j][idx] += h
        minus[j][idx] -= h
        num = (sft_loss_and_grad(PolicyParams(*plus), arrays)[0]
               - sft_loss_and_grad(PolicyParams(*minus), arrays)[0]) / (2 * h)
        ana = (g_mode if j == 0 else g_traj)[idx]
        assert abs(num - ana) < 1e-7


def test_single_record_overfit(tiny_packs):
    pack = tiny_packs[0][3]
    rec = SftRecord.from_scene(pack.scene)
    params = warmup_sft(PolicyParams.zeros(), [rec], 2.0, 500)
    pm, pt, pn = forward(params, pack.scene)
    assert pt[rec.expert_anchor_index] > 0.9 and pn[rec.expert_anchor_index] > 0.9


def test_warmup_loss_monotone_and_no_mode_collapse():
    scenes = generate_dataset(500, 23)
    records = [SftRecord.from_scene(s) for s in scenes]
    arrays = _sft_arrays(records)
    losses = []
    params = PolicyParams.zeros()
    for _ in range(5):
        params = warmup_sft(params, records, 2.0, 100)
        losses.append(sft_loss_and_grad(params, arrays)[0])
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    pm = np.mean([forward(params, s)[0] for s in scenes], axis=0)
    assert pm.min() >= 0.2


def test_zero_lr_is_noop(tiny_packs):
    rng = np.random.default_rng(3)
    p = PolicyParams(rng.normal(size=(2, F_BASE)), rng.normal(size=(K, F_FULL)))
    assert warmup_sft(p, tiny_packs[0][:5], lr=0.0).same_as(p)
    assert warmup_sft(p, tiny_packs[0][:5], steps=0).same_as(p)


def test_warmup_halts_with_warning_when_stuck(tiny_packs, caplog):
    start = PolicyParams.zeros()
    arrays = _sft_arrays(tiny_packs[0][:5])
    with caplog.at_level(logging.WARNING):
        params = warmup_sft(start, tiny_packs[0][:5], lr=1e300, steps=3)
    assert "stopped decreasing" in caplog.text
    assert sft_loss_and_grad(params, arrays)[0] <= sft_loss_and_grad(start, arrays)[0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_warmup_divergence(tiny_packs):
    huge = PolicyParams(np.full((2, F_BASE), 1e308), np.full((K, F_FULL), 1e308))
    with pytest.raises(DivergenceError):
        warmup_sft(huge, tiny_packs[0][:5])


def test_empty_warmup_rejected():
    with pytest.raises(ValueError):
        warmup_sft(PolicyParams.zeros(), [])


# ---------------------------------------------------------------- train loop

def _tiny_cfg(**kw):
    return GrpoConfig(**{"seed": 3, "epochs": 2, "batch_size": 25, "sft_steps": 200, **kw})


def test_tiny_run_is_bit_identical(tiny_packs):
    a_params, a_log = fit(_tiny_cfg(), *tiny_packs)
    b_params, b_log = fit(_tiny_cfg(), *tiny_packs)
    assert a_log.to_jsonl() == b_log.to_jsonl()
    assert a_params.same_as(b_params)


def test_log_consistency(tiny_packs, tmp_path):
    cfg = _tiny_cfg()
    _, tlog = fit(cfg, *tiny_packs)
    header = tlog.of_type("header")
    assert len(header) == 1 and header[0]["seed"] == 3
    rollouts = tlog.of_type("rollout")
    assert len(rollouts) == cfg.epochs * len(tiny_packs[0]) * cfg.group_size
    for r in rollouts:
        assert r["total"] == r["r_traj"] + r["r_fmt"] + r["r_endpoint"] + r["r_adaptive"]
    steps = tlog.of_type("step")
    assert len(steps) == cfg.epochs * math.ceil(len(tiny_packs[0]) / cfg.batch_size) * cfg.inner_steps
    assert all(sum(s["mode_counts"]) == cfg.batch_size * cfg.group_size for s in steps)
    assert [v["epoch"] for v in tlog.of_type("val")] == [0, 1, 2]
    tlog.write(tmp_path / "log.jsonl")
    assert TrainingLog.read(tmp_path / "log.jsonl").to_jsonl() == tlog.to_jsonl()


def test_pinned_training_never_samples_other_mode(tiny_packs):
    _, tlog = fit(_tiny_cfg(mode_policy="always-think"), *tiny_packs)
    assert all(r["mode"] == "Thinking" for r in tlog.of_type("rollout"))
    assert all(v["think_rate_by_level"][l] == 1.0 for v in tlog.of_type("val") for l in v["think_rate_by_level"])


def test_disabled_reward_terms_recorded_as_zero(tiny_packs):
    _, tlog = fit(_tiny_cfg(reward_adaptive=False, reward_endpoint=False, epochs=1), *tiny_packs)
    for r in tlog.of_type("rollout"):
        assert r["r_adaptive"] == 0 and r["r_endpoint"] == 0.0


# ------------------------------------------------------------------ evaluate

def test_evaluate_override_and_determinism(tiny_packs, warm):
    val = tiny_packs[1]
    think = evaluate(warm, val, Mode.THINKING)
    assert think.summary["think_rate"] == 1.0
    assert evaluate(warm, val, Mode.NON_THINKING).summary["think_rate"] == 0.0
    a, b = evaluate(warm, val, best_of=4, seed=1), evaluate(warm, val, best_of=4, seed=1)
    assert a.to_json() == b.to_json()
    assert "best_of_n_pdms" in a.summary


def test_adaptive_token_cost_between_baselines(tiny_packs):
    val = tiny_packs[1]
    w_mode = np.zeros((2, F_BASE))
    w_mode[0, 10] = 5.0  # think only when the static boundary bucket is tight
    params = PolicyParams(w_mode, np.zeros((K, F_FULL)))
    adaptive = evaluate(params, val).summary
    assert 0 < adaptive["think_rate"] < 1
    lo = evaluate(params, val, Mode.NON_THINKING).summary["token_cost"]
    hi = evaluate(params, val, Mode.THINKING).summary["token_cost"]
    assert lo < adaptive["token_cost"] < hi


def test_evaluate_summary_levels(tiny_packs, warm):
    rep = evaluate(warm, tiny_packs[1])
    rows = rep.rows
    for lvl, value in rep.summary["pdms_by_level"].items():
        assert math.isclose(value, np.mean([r["pdms"] for r in rows if str(r["level"]) == lvl]), abs_tol=1e-12)
    assert "PDMS" in rep.table()
    with pytest.raises(ValueError):
        evaluate(warm, [])
