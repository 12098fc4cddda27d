"""Tagged responses and the four-part GRPO reward.

A response is ``<think>...</think><answer>...</answer>`` in thinking mode and
answer-only otherwise. The answer payload is eight ``(x,y)`` pairs separated
by ``;``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Optional, Sequence

import numpy as np

from .core import N_WAYPOINTS, InvalidTrajectory, Mode, Trajectory
from .metrics import PdmScore, score_batch

if TYPE_CHECKING:
    from .world import Scene

BASE_TOKEN_COST = 20
DEFAULT_THRESHOLD = 0.9

_THINK = re.compile(r"<think>(.*?)</think>", re.S)
_ANSWER = re.compile(r"<answer>(.*?)</answer>", re.S)
_WELL_FORMED = re.compile(r"\s*(?:<think>(?P<think>.*?)</think>\s*)?<answer>(?P<answer>.*?)</answer>\s*", re.S)
_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_PAIR = rf"\(\s*({_NUM})\s*,\s*({_NUM})\s*\)"
_PAYLOAD = re.compile(rf"\s*{_PAIR}(?:\s*[;,]\s*{_PAIR}){{{N_WAYPOINTS - 1}}}\s*")
_TAGS = ("<think>", "</think>", "<answer>", "</answer>")

# endpoint L1 deviation thresholds (m) and the reward for falling strictly below each
ENDPOINT_STEPS = ((2.0, 1.0), (4.0, 0.8), (6.0, 0.6), (10.0, 0.4), (15.0, 0.2))


@dataclass(frozen=True)
class Response:
    raw_text: str
    mode: Mode
    think_content: Optional[str]
    trajectory: Optional[Trajectory]
    token_cost: int
    well_formed: bool


def think_length(content: Optional[str]) -> int:
    return len(content.split()) if content else 0


def format_payload(waypoints: np.ndarray) -> str:
    # repr() round-trips floats exactly
    return "; ".join(f"({float(x)!r},{float(y)!r})" for x, y in np.asarray(waypoints))


def render_response(trajectory: Trajectory, mode: Mode, think: str = "") -> str:
    answer = f"<answer>{format_payload(trajectory.waypoints)}</answer>"
    if mode is Mode.THINKING:
        return f"<think>{think}</think>{answer}"
    return answer


def _parse_payload(payload: str) -> Optional[Trajectory]:
    if _PAYLOAD.fullmatch(payload) is None:
        return None
    vals = [float(v) for pair in re.findall(_PAIR, payload) for v in pair]
    try:
        return Trajectory(np.array(vals).reshape(N_WAYPOINTS, 2))
    except InvalidTrajectory:
        return None


def parse_response(raw_text: str) -> Response:
    """Best-effort parse; malformed input is reflected in the result, never raised."""
    text = raw_text if isinstance(raw_text, str) else str(raw_text)
    think_m = _THINK.search(text)
    answer_m = _ANSWER.search(text)
    thinking = think_m is not None and (answer_m is None or think_m.end() <= answer_m.start())
    think_content = think_m.group(1) if thinking else None
    trajectory = _parse_payload(answer_m.group(1)) if answer_m else None

    full = _WELL_FORMED.fullmatch(text)
    counts = [text.count(tag) for tag in _TAGS]
    well_formed = (full is not None and counts[2] == counts[3] == 1 and counts[0] == counts[1] <= 1
                   and (full.group("think") is None) == (counts[0] == 0))
    mode = Mode.THINKING if thinking else Mode.NON_THINKING
    cost = BASE_TOKEN_COST + (think_length(think_content) if thinking else 0)
    return Response(text, mode, think_content, trajectory, cost, well_formed)


def format_reward(resp: Response) -> int:
    return int(resp.well_formed and resp.trajectory is not None)


def endpoint_reward(traj: Optional[Trajectory], expert: Trajectory) -> float:
    if traj is None:
        return 0.0
    d = float(np.abs(traj.endpoint - expert.endpoint).sum())
    for bound, reward in ENDPOINT_STEPS:
        if d < bound:
            return reward
    return 0.0


@dataclass(frozen=True)
class AdaptiveRewardInputs:
    s_think: float
    s_nothink: float
    c_think: int
    c_nothink: int
    t: float = DEFAULT_THRESHOLD
    d: int = 0

    def __post_init__(self):
        if min(self.c_think, self.c_nothink) < 0:
            raise ValueError("rollout counts must be non-negative")
        if self.d not in (0, 1):
            raise ValueError("scene tag must be 0 (simple) or 1 (challenging)")

    @classmethod
    def from_group(cls, modes: Sequence[Mode], pdms: Sequence[float], t: float, d: int):
        think = [p for m, p in zip(modes, pdms) if m is Mode.THINKING]
        nothink = [p for m, p in zip(modes, pdms) if m is not Mode.THINKING]
        # fsum keeps the means independent of rollout order
        s_think = math.fsum(think) / len(think) if think else 0.0
        s_nothink = math.fsum(nothink) / len(nothink) if nothink else 0.0
        return cls(s_think, s_nothink, len(think), len(nothink), t, int(d))


def adaptive_think_reward(inp: AdaptiveRewardInputs) -> tuple[int, int]:
    """(reward for thinking rollouts, reward for non-thinking rollouts).

    A simple scene is re-labelled challenging only when thinking is both better
    and above threshold and already the majority; symmetrically for the
    reverse correction. Otherwise the dataset tag decides.
    """
    if inp.d == 0:
        if inp.s_think > inp.s_nothink and inp.s_think > inp.t and inp.c_think > inp.c_nothink:
            return 1, 0
        return 0, 1
    if inp.s_nothink > inp.s_think and inp.s_nothink > inp.t and inp.c_nothink > inp.c_think:
        return 0, 1
    return 1, 0


@dataclass(frozen=True)
class RewardWeights:
    """Which reward terms are active; disabled terms are recorded as 0."""

    traj: bool = True
    fmt: bool = True
    endpoint: bool = True
    adaptive: bool = True


FULL_REWARD = RewardWeights()


@dataclass(frozen=True)
class RewardBreakdown:
    r_traj: float
    r_fmt: int
    r_endpoint: float
    r_adaptive: int
    total: float
    pdm: Optional[PdmScore] = None

    def as_dict(self) -> dict:
        return {"r_traj": self.r_traj, "r_fmt": self.r_fmt, "r_endpoint": self.r_endpoint,
                "r_adaptive": self.r_adaptive, "total": self.total}


Scorer = Callable[[Sequence[Trajectory]], Sequence[PdmScore]]


def score_group(group: Sequence[Response], scene: "Scene", expert: Trajectory,
                t: float = DEFAULT_THRESHOLD, scorer: Optional[Scorer] = None,
                weights: RewardWeights = FULL_REWARD) -> list[RewardBreakdown]:
    if len(group) == 0:
        raise ValueError("empty rollout group")
    if scorer is None:
        def scorer(trajs):
            return score_batch(trajs, scene)
    parsed = [r.trajectory for r in group]
    present = [tr for tr in parsed if tr is not None]
    scores = iter(scorer(present) if present else [])
    pdm = [next(scores) if tr is not None else None for tr in parsed]
    r_traj = [p.pdms if p is not None else 0.0 for p in pdm]

    inputs = AdaptiveRewardInputs.from_group([r.mode for r in group], r_traj, t, scene.tag)
    reward_think, reward_nothink = adaptive_think_reward(inputs)

    out = []
    for resp, tr, score, rt in zip(group, parsed, pdm, r_traj):
        parts = (
            rt if weights.traj else 0.0,
            format_reward(resp) if weights.fmt else 0,
            endpoint_reward(tr, expert) if weights.endpoint else 0.0,
            (reward_think if resp.mode is Mode.THINKING else reward_nothink) if weights.adaptive else 0,
        )
        out.append(RewardBreakdown(*parts, total=float(sum(parts)), pdm=score))
    return out
