import itertools
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import straight_scene
from dualmode.core import Mode, Trajectory
from dualmode.rewards import (BASE_TOKEN_COST, AdaptiveRewardInputs, adaptive_think_reward, endpoint_reward,
                              format_payload, format_reward, parse_response, render_response, score_group,
                              think_length)

T8 = np.arange(1, 9) * 0.5
PAIRS = "; ".join(f"({10 * t},0.0)" for t in T8)


def traj_ending_at(x, y=0.0):
    wp = np.zeros((8, 2))
    wp[-1] = (x, y)
    return Trajectory(wp)


# ------------------------------------------------------------------- parsing

def test_canonical_nothink():
    r = parse_response(f"<answer>{PAIRS}</answer>")
    assert r.mode is Mode.NON_THINKING and r.trajectory is not None
    assert r.token_cost == BASE_TOKEN_COST
    assert format_reward(r) == 1


def test_canonical_think():
    r = parse_response(f"<think>lead vehicle braking</think><answer>{PAIRS}</answer>")
    assert r.mode is Mode.THINKING and r.trajectory is not None
    assert r.think_content == "lead vehicle braking"
    assert r.token_cost == BASE_TOKEN_COST + 3
    assert format_reward(r) == 1


def test_wrong_arity():
    r = parse_response("<answer>1,2,3</answer>")
    assert r.trajectory is None and format_reward(r) == 0


def test_missing_closing_answer_tag():
    r = parse_response(f"<think>x</think><answer>{PAIRS}")
    assert r.trajectory is None and format_reward(r) == 0


def test_two_answer_blocks():
    text = f"<answer>{PAIRS}</answer><answer>{PAIRS}</answer>"
    r = parse_response(text)
    # the parser oracle: one answer block is allowed, so a second is a violation
    assert text.count("<answer>") == 2
    assert format_reward(r) == 0


@pytest.mark.parametrize("text", [
    f"<answer>{PAIRS}</answer><think>late</think>",
    f"<think>a</think><think>b</think><answer>{PAIRS}</answer>",
    f"<think>unclosed<answer>{PAIRS}</answer>",
    f"prefix <answer>{PAIRS}</answer>",
    f"<answer>{PAIRS.replace('(5.0,', '(nan,')}</answer>",
    f"<answer>{PAIRS.replace('(5.0,', '(500.0,')}</answer>",
    "",
    "<answer></answer>",
])
def test_malformed_never_raises_and_scores_zero(text):
    assert format_reward(parse_response(text)) == 0


def test_comma_separated_pairs_accepted():
    r = parse_response("<answer>" + ", ".join(f"({t},0)" for t in T8) + "</answer>")
    assert r.trajectory is not None


@given(st.text(max_size=200))
def test_parser_total(text):
    r = parse_response(text)
    assert r.token_cost >= BASE_TOKEN_COST
    assert format_reward(r) in (0, 1)


finite = st.floats(-199, 199, allow_nan=False)


@given(st.lists(st.tuples(finite, finite), min_size=8, max_size=8), st.sampled_from(list(Mode)),
       st.text(alphabet="abc xyz.,", max_size=40))
def test_round_trip_fixed_point(pts, mode, think):
    traj = Trajectory(np.array(pts))
    text = render_response(traj, mode, think)
    r = parse_response(text)
    assert r.mode is mode
    np.testing.assert_array_equal(r.trajectory.waypoints, traj.waypoints)
    assert render_response(r.trajectory, r.mode, r.think_content or "") == text
    assert format_reward(r) == 1
    expected_cost = BASE_TOKEN_COST + (think_length(think) if mode is Mode.THINKING else 0)
    assert r.token_cost == expected_cost


def test_payload_uses_repr_floats():
    assert format_payload(np.array([[0.1, 1 / 3]])) == f"(0.1,{1 / 3!r})"


# ------------------------------------------------------------------ endpoint

PROBES = [(1.9, 1.0), (2.0, 0.8), (3.9, 0.8), (4.0, 0.6), (5.0, 0.6), (5.9, 0.6), (6.0, 0.4), (9.9, 0.4),
          (10.0, 0.2), (12.0, 0.2), (14.9, 0.2), (15.0, 0.0), (20.0, 0.0)]


@pytest.mark.parametrize("d,expected", PROBES)
def test_endpoint_steps(d, expected):
    assert endpoint_reward(traj_ending_at(d), traj_ending_at(0.0)) == expected


def test_endpoint_uses_l1_distance():
    assert endpoint_reward(traj_ending_at(1.0, 1.5), traj_ending_at(0.0)) == 0.8
    assert endpoint_reward(None, traj_ending_at(0.0)) == 0.0


@given(st.floats(0, 30), st.floats(0, 30))
def test_endpoint_non_increasing(a, b):
    lo, hi = sorted((a, b))
    e = traj_ending_at(0.0)
    assert endpoint_reward(traj_ending_at(lo), e) >= endpoint_reward(traj_ending_at(hi), e)


# --------------------------------------------------------------- algorithm 1

def algorithm_one(d, s_t, s_n, c_t, c_n, t):
    """Literal branch transcription."""
    if d == 0:
        if s_t > s_n and s_t > t and c_t > c_n:
            label = 1
        else:
            label = 0
    else:
        if s_n > s_t and s_n > t and c_n > c_t:
            label = 0
        else:
            label = 1
    return (1, 0) if label == 1 else (0, 1)


def test_algorithm_one_examples():
    assert adaptive_think_reward(AdaptiveRewardInputs(0.95, 0.80, 5, 3, 0.9, 0)) == (1, 0)
    assert adaptive_think_reward(AdaptiveRewardInputs(0.85, 0.80, 5, 3, 0.9, 0)) == (0, 1)
    assert adaptive_think_reward(AdaptiveRewardInputs(0.60, 0.95, 2, 6, 0.9, 1)) == (0, 1)


def test_algorithm_one_exhaustive():
    levels = (0.2, 0.5, 0.8)  # three values cover every strict/tie ordering of (s_think, s_nothink, t)
    cases = 0
    for d, s_t, s_n, t in itertools.product((0, 1), levels, levels, levels):
        for c_t, c_n in ((3, 1), (2, 2), (1, 3), (0, 4), (4, 0)):
            # an empty mode has mean 0
            s_t_eff = 0.0 if c_t == 0 else s_t
            s_n_eff = 0.0 if c_n == 0 else s_n
            inp = AdaptiveRewardInputs(s_t_eff, s_n_eff, c_t, c_n, t, d)
            got = adaptive_think_reward(inp)
            assert got == algorithm_one(d, s_t_eff, s_n_eff, c_t, c_n, t)
            assert sum(got) == 1
            cases += 1
    assert cases == 2 * 27 * 5


def test_inputs_validated():
    with pytest.raises(ValueError):
        AdaptiveRewardInputs(0.5, 0.5, -1, 2)
    with pytest.raises(ValueError):
        AdaptiveRewardInputs(0.5, 0.5, 1, 2, d=2)


# ---------------------------------------------------------------- score_group

def _responses(scene, modes, speeds):
    out = []
    for m, v in zip(modes, speeds):
        traj = Trajectory(np.stack([v * T8, np.zeros(8)], axis=1))
        out.append(parse_response(render_response(traj, m, "lead clear")))
    return out


def test_two_nothink_on_simple_scene_get_adaptive_reward():
    scene = straight_scene(speed=10.0)
    assert scene.tag == 0
    group = _responses(scene, [Mode.NON_THINKING] * 2, [10.0, 9.0])
    out = score_group(group, scene, scene.expert)
    assert [b.r_adaptive for b in out] == [1, 1]


def test_unparseable_group_scores_zero():
    scene = straight_scene(speed=10.0)
    group = [parse_response("<answer>1,2,3</answer>"), parse_response("<think>x</think><answer>bad</answer>")]
    for b in score_group(group, scene, scene.expert):
        assert b.r_traj == 0.0 and b.r_endpoint == 0.0 and b.r_fmt == 0


def test_mixed_group_means_match_hand_oracle():
    from dualmode.metrics import pdm_score

    scene = straight_scene(speed=10.0)
    modes = [Mode.THINKING, Mode.NON_THINKING, Mode.THINKING, Mode.NON_THINKING, Mode.NON_THINKING]
    speeds = [10.0, 6.0, 8.0, 12.0, 3.0]
    group = _responses(scene, modes, speeds)
    pdms = [pdm_score(r.trajectory, scene).pdms for r in group]
    s_t = (pdms[0] + pdms[2]) / 2
    s_n = (pdms[1] + pdms[3] + pdms[4]) / 3
    inp = AdaptiveRewardInputs.from_group(modes, pdms, 0.9, scene.tag)
    assert (inp.c_think, inp.c_nothink) == (2, 3)
    assert abs(inp.s_think - s_t) < 1e-15 and abs(inp.s_nothink - s_n) < 1e-15
    out = score_group(group, scene, scene.expert)
    want = algorithm_one(0, s_t, s_n, 2, 3, 0.9)
    for b, m, p in zip(out, modes, pdms):
        assert b.r_traj == p
        assert b.r_adaptive == (want[0] if m is Mode.THINKING else want[1])
        assert b.total == b.r_traj + b.r_fmt + b.r_endpoint + b.r_adaptive
        assert 0.0 <= b.total <= 4.0


def test_group_totals_order_invariant(level_scenes):
    scene = level_scenes[2][0]
    rng = np.random.default_rng(0)
    modes = [Mode(int(m)) for m in rng.integers(0, 2, 8)]
    speeds = rng.uniform(0, 14, 8)
    group = _responses(scene, modes, speeds)
    base = [b.total for b in score_group(group, scene, scene.expert)]
    order = list(range(8))
    for _ in range(5):
        random.Random(_).shuffle(order)
        shuffled = score_group([group[i] for i in order], scene, scene.expert)
        assert [b.total for b in shuffled] == [base[i] for i in order]


def test_empty_group_rejected():
    scene = straight_scene()
    with pytest.raises(ValueError):
        score_group([], scene, scene.expert)
