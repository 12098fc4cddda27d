"""Warmup supervised fitting and GRPO training of the dual-mode policy."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .config import config_hash
from .core import Mode, Trajectory
from .metrics import PdmScore, score_batch, select_best_of_n
from .policy import (DEFAULT_VOCAB, PolicyOutput, PolicyParams, TrajectoryVocabulary, exact_kl_and_grad,
                     greedy, log_prob_and_grad, pinned, render, sample_group, scene_features)
from .rewards import RewardBreakdown, RewardWeights, score_group
from .world import DEFAULT_WORLD, SCHEMA_VERSION, Scene, WorldConfig, generate_dataset

log = logging.getLogger(__name__)

MODE_POLICIES = ("adaptive", "always-think", "never-think")
ADVANTAGE_EPS = 1e-8
MAX_HALVINGS = 30


class DivergenceError(FloatingPointError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    kl_beta: float = 0.04
    lr: float = 0.5
    epochs: int = 4
    batch_size: int = 16
    inner_steps: int = 2
    threshold: float = 0.9
    seed: int = 0
    mode_policy: str = "adaptive"
    sft_lr: float = 2.0
    sft_steps: int = 2000
    train_scenes: int = 2000
    val_scenes: int = 500
    # which reward terms are summed into the total
    reward_traj: bool = True
    reward_fmt: bool = True
    reward_endpoint: bool = True
    reward_adaptive: bool = True
    log_rollouts: bool = True

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.kl_beta < 0:
            raise ValueError("kl_beta must be >= 0")
        if not 0 < self.threshold <= 1:
            raise ValueError("threshold must lie in (0, 1]")
        if self.mode_policy not in MODE_POLICIES:
            raise ValueError(f"mode_policy must be one of {MODE_POLICIES}")
        for name in ("epochs", "batch_size", "inner_steps", "sft_steps", "train_scenes", "val_scenes"):
            if getattr(self, name) < (0 if name in ("epochs", "sft_steps") else 1):
                raise ValueError(f"{name} out of range")
        if self.lr < 0 or self.sft_lr < 0:
            raise ValueError("learning rates must be >= 0")

    @classmethod
    def from_mapping(cls, data: dict) -> "GrpoConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**data)

    @property
    def weights(self) -> RewardWeights:
        return RewardWeights(self.reward_traj, self.reward_fmt, self.reward_endpoint, self.reward_adaptive)

    @property
    def pinned_mode(self) -> Optional[Mode]:
        return {"always-think": Mode.THINKING, "never-think": Mode.NON_THINKING}.get(self.mode_policy)


# ---------------------------------------------------------------- scene cache

class ScenePack:
    """A scene plus everything training touches repeatedly: features, anchors and their scores."""

    def __init__(self, scene: Scene, vocab: TrajectoryVocabulary = DEFAULT_VOCAB):
        self.scene = scene
        self.feats = scene_features(scene)
        self.anchors = vocab.anchors(scene.ego)
        self.scores = score_batch(self.anchors, scene)
        self._by_bytes = {a.tobytes(): s for a, s in zip(self.anchors, self.scores)}
        self.expert = scene.expert
        self.expert_index = int(np.argmin(
            np.linalg.norm(self.anchors - self.expert.waypoints[None], axis=-1).sum(axis=1)))
        self.level = scene.complexity

    @property
    def seed(self) -> int:
        return self.scene.seed

    @property
    def tag(self) -> int:
        return self.scene.tag

    def scorer(self, trajs: Sequence[Trajectory]) -> list[PdmScore]:
        out, missing = [], []
        for i, tr in enumerate(trajs):
            hit = self._by_bytes.get(tr.waypoints.tobytes())
            out.append(hit)
            if hit is None:
                missing.append(i)
        if missing:
            fresh = score_batch([trajs[i] for i in missing], self.scene)
            for i, s in zip(missing, fresh):
                out[i] = s
        return out


def prepare(scenes: Iterable[Scene], vocab: TrajectoryVocabulary = DEFAULT_VOCAB) -> list[ScenePack]:
    return [s if isinstance(s, ScenePack) else ScenePack(s, vocab) for s in scenes]


# ------------------------------------------------------------------ warmup

@dataclass(frozen=True)
class SftRecord:
    scene: Scene
    expert_anchor_index: int

    @classmethod
    def from_scene(cls, scene: Scene, vocab: TrajectoryVocabulary = DEFAULT_VOCAB) -> "SftRecord":
        return cls(scene, vocab.nearest(scene.ego, scene.expert))


def _sft_arrays(dataset):
    base, think, nothink, target = [], [], [], []
    for rec in dataset:
        if isinstance(rec, ScenePack):
            feats, k = rec.feats, rec.expert_index
        else:
            feats, k = scene_features(rec.scene), rec.expert_anchor_index
        base.append(feats[0])
        think.append(feats[1])
        nothink.append(feats[2])
        target.append(k)
    return np.array(base), np.array(think), np.array(nothink), np.array(target)


def _log_softmax_rows(z):
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def sft_loss_and_grad(params: PolicyParams, arrays):
    """Mean over records of NLL(expert | think) + NLL(expert | non-think) + CE(uniform, mode)."""
    base, think, nothink, target = arrays
    n = len(target)
    rows = np.arange(n)
    lm = _log_softmax_rows(base @ params.w_mode.T)
    lt = _log_softmax_rows(think @ params.w_traj.T)
    ln = _log_softmax_rows(nothink @ params.w_traj.T)
    loss = -(lt[rows, target] + ln[rows, target] + 0.5 * lm.sum(axis=1)).mean()
    onehot = np.zeros_like(lt)
    onehot[rows, target] = 1.0
    g_traj = ((np.exp(lt) - onehot).T @ think + (np.exp(ln) - onehot).T @ nothink) / n
    g_mode = (np.exp(lm) - 0.5).T @ base / n
    return float(loss), g_mode, g_traj


def warmup_sft(params: PolicyParams, dataset: Sequence, lr: float = 2.0, steps: int = 2000) -> PolicyParams:
    """Full-batch gradient descent on the dual-style imitation loss.

    A step that would raise the loss is retried at half the learning rate;
    when halving no longer helps, fitting stops with a warning. Raises
    ``DivergenceError`` if the loss becomes non-finite.
    """
    if len(dataset) == 0:
        raise ValueError("empty warmup dataset")
    if lr == 0 or steps == 0:
        return params
    arrays = _sft_arrays(dataset)
    loss, g_mode, g_traj = sft_loss_and_grad(params, arrays)
    if not math.isfinite(loss):
        raise DivergenceError("warmup loss is non-finite at the initial parameters")
    for step in range(steps):
        for _ in range(MAX_HALVINGS):
            cand = params.updated(-lr * g_mode, -lr * g_traj)
            new_loss, new_gm, new_gt = sft_loss_and_grad(cand, arrays)
            if not math.isfinite(new_loss):
                raise DivergenceError(f"warmup loss became non-finite at step {step}")
            if new_loss <= loss:
                break
            lr /= 2
        else:
            log.warning("warmup loss stopped decreasing at step %d (loss %.6f); stopping", step, loss)
            break
        params, loss, g_mode, g_traj = cand, new_loss, new_gm, new_gt
    return params


# ------------------------------------------------------------------- GRPO

def compute_advantages(rewards: Sequence[float]) -> np.ndarray:
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise ValueError("need at least two rewards per group")
    std = r.std()
    if std < ADVANTAGE_EPS:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def clipped_term(ratio: float, advantage: float, eps: float) -> float:
    """min(c A, clip(c, 1-eps, 1+eps) A)."""
    return min(ratio * advantage, min(max(ratio, 1 - eps), 1 + eps) * advantage)


def clip_active(ratio: float, advantage: float, eps: float) -> bool:
    """True where the clipped branch is selected and carries no gradient."""
    return (advantage > 0 and ratio > 1 + eps) or (advantage < 0 and ratio < 1 - eps)


@dataclass
class RolloutGroup:
    pack: ScenePack
    outputs: list[PolicyOutput]
    rewards: list[RewardBreakdown]
    advantages: np.ndarray
    old_log_probs: np.ndarray

    def __post_init__(self):
        if len(self.outputs) < 2:
            raise ValueError("a rollout group needs at least two rollouts")


@dataclass(frozen=True)
class StepStats:
    mean_reward: float
    mean_kl: float
    clip_fraction: float
    think_rate: float
    objective: float

    def as_dict(self) -> dict:
        return asdict(self)


def rollout_group(params_old: PolicyParams, pack: ScenePack, seeds, config: GrpoConfig) -> RolloutGroup:
    outputs = sample_group(params_old, pack.scene, seeds, anchors=pack.anchors)
    rewards = score_group([o.response for o in outputs], pack.scene, pack.expert, config.threshold,
                          scorer=pack.scorer, weights=config.weights)
    adv = compute_advantages([r.total for r in rewards])
    old = np.array([o.log_prob for o in outputs])
    return RolloutGroup(pack, outputs, rewards, adv, old)


def _group_terms(params, params_ref, group, config, need_grad=True):
    feats = group.pack.feats
    n = len(group.outputs)
    g_mode = np.zeros_like(params.w_mode)
    g_traj = np.zeros_like(params.w_traj)
    surrogate, clipped = 0.0, 0
    for out, a, old in zip(group.outputs, group.advantages, group.old_log_probs):
        lp, gm, gt = log_prob_and_grad(params, feats, out.mode, out.traj_index)
        ratio = math.exp(lp - old)
        surrogate += clipped_term(ratio, a, config.clip_eps)
        if clip_active(ratio, a, config.clip_eps):
            clipped += 1
        elif need_grad and a != 0:
            g_mode += (a * ratio) * gm
            g_traj += (a * ratio) * gt
    g_mode /= n
    g_traj /= n
    surrogate /= n
    kl, gk_mode, gk_traj = exact_kl_and_grad(params, params_ref, feats)
    if config.kl_beta != 0:
        g_mode = g_mode - config.kl_beta * gk_mode
        g_traj = g_traj - config.kl_beta * gk_traj
    return surrogate - config.kl_beta * kl, kl, clipped, g_mode, g_traj


def surrogate_objective(params: PolicyParams, params_ref: PolicyParams, batch: Sequence[RolloutGroup],
                        config: GrpoConfig) -> float:
    """Batch mean of (1/G) sum_i J_i - beta KL(pi || pi_ref)."""
    return float(np.mean([_group_terms(params, params_ref, g, config, need_grad=False)[0] for g in batch]))


def grpo_step(params: PolicyParams, params_old: PolicyParams, params_ref: PolicyParams,
              batch: Sequence[RolloutGroup], config: GrpoConfig) -> tuple[PolicyParams, StepStats]:
    """One gradient-ascent step on the clipped, KL-regularized group objective.

    ``params_old`` is the sampling snapshot; the importance ratios use the
    old log-probabilities stored on each group, which were computed under it.
    """
    if not batch:
        raise ValueError("empty batch")
    g_mode = np.zeros_like(params.w_mode)
    g_traj = np.zeros_like(params.w_traj)
    objective, kls, clipped, total = 0.0, [], 0, 0
    for group in batch:
        obj, kl, n_clip, gm, gt = _group_terms(params, params_ref, group, config)
        if not (np.all(np.isfinite(gm)) and np.all(np.isfinite(gt))):
            raise NonFiniteGradient(f"non-finite gradient in group for scene seed {group.pack.seed}")
        g_mode += gm
        g_traj += gt
        objective += obj
        kls.append(kl)
        clipped += n_clip
        total += len(group.outputs)
    g_mode /= len(batch)
    g_traj /= len(batch)
    if config.pinned_mode is not None:
        g_mode = np.zeros_like(g_mode)
    new = params.updated(config.lr * g_mode, config.lr * g_traj)
    rewards = [r.total for g in batch for r in g.rewards]
    thinks = [o.mode is Mode.THINKING for g in batch for o in g.outputs]
    stats = StepStats(float(np.mean(rewards)), float(np.mean(kls)), clipped / total,
                      float(np.mean(thinks)), objective / len(batch))
    return new, stats


# ------------------------------------------------------------------ logging

@dataclass
class TrainingLog:
    records: list = field(default_factory=list)

    def add(self, kind: str, **payload) -> None:
        self.records.append({"type": kind, **payload})

    def of_type(self, kind: str) -> list[dict]:
        return [r for r in self.records if r["type"] == kind]

    def think_trace(self) -> list[float]:
        return [r["think_rate"] for r in self.of_type("step")]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def read(cls, path) -> "TrainingLog":
        with open(path) as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


# ----------------------------------------------------------------- evaluate

@dataclass
class EvalReport:
    rows: list[dict]
    summary: dict
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {**self.meta, "summary": self.summary, "rows": self.rows}

    def table(self) -> str:
        s = self.summary
        cols = ["overall", "level1", "level2", "level3"]
        lines = [f"{'metric':<22}" + "".join(f"{c:>10}" for c in cols)]

        def row(name, values):
            cells = "".join(f"{v:>10.4f}" if v is not None else f"{'-':>10}" for v in values)
            lines.append(f"{name:<22}" + cells)

        row("PDMS", [s["pdms"]] + [s["pdms_by_level"].get(str(l)) for l in (1, 2, 3)])
        row("think rate", [s["think_rate"]] + [s["think_rate_by_level"].get(str(l)) for l in (1, 2, 3)])
        row("token cost", [s["token_cost"]] + [s["token_cost_by_level"].get(str(l)) for l in (1, 2, 3)])
        if "best_of_n_pdms" in s:
            row(f"best-of-{s['best_of_n']} PDMS", [s["best_of_n_pdms"]] + [None] * 3)
        for m in ("Thinking", "NonThinking"):
            v = s["pdms_by_mode"].get(m)
            if v is not None:
                row(f"PDMS | {m}", [v] + [None] * 3)
        return "\n".join(lines)


def _mean(values):
    values = list(values)
    return math.fsum(values) / len(values) if values else None


def summarize(rows: Sequence[dict]) -> dict:
    levels = sorted({r["level"] for r in rows})
    by_level = {lvl: [r for r in rows if r["level"] == lvl] for lvl in levels}
    modes = {m.label: [r for r in rows if r["mode"] == m.label] for m in Mode}
    out = {
        "n": len(rows),
        "pdms": _mean(r["pdms"] for r in rows),
        "think_rate": _mean(r["mode"] == Mode.THINKING.label for r in rows),
        "token_cost": _mean(r["token_cost"] for r in rows),
        "pdms_by_level": {str(l): _mean(r["pdms"] for r in rs) for l, rs in by_level.items()},
        "think_rate_by_level": {str(l): _mean(r["mode"] == Mode.THINKING.label for r in rs)
                                for l, rs in by_level.items()},
        "token_cost_by_level": {str(l): _mean(r["token_cost"] for r in rs) for l, rs in by_level.items()},
        "pdms_by_mode": {m: _mean(r["pdms"] for r in rs) for m, rs in modes.items() if rs},
        "pdms_by_level_and_mode": {f"{l}/{m}": _mean(r["pdms"] for r in by_level[l] if r["mode"] == m)
                                   for l in levels for m in modes
                                   if any(r["mode"] == m for r in by_level[l])},
    }
    for key in ("nc", "dac", "ttc", "comfort", "ep"):
        out[key] = _mean(r[key] for r in rows)
    if rows and "best_of_n_pdms" in rows[0]:
        out["best_of_n"] = rows[0]["best_of_n"]
        out["best_of_n_pdms"] = _mean(r["best_of_n_pdms"] for r in rows)
    return out


def evaluate(params: PolicyParams, scenes: Sequence, mode_override: Optional[Mode] = None,
             best_of: int = 0, seed: int = 0, vocab: TrajectoryVocabulary = DEFAULT_VOCAB) -> EvalReport:
    """Greedy decoding over ``scenes`` (Scenes or ScenePacks), plus an optional best-of-N column."""
    if len(scenes) == 0:
        raise ValueError("no scenes to evaluate")
    packs = prepare(scenes, vocab)
    rows = []
    sample_params = pinned(params, mode_override) if mode_override is not None else params
    for i, pack in enumerate(packs):
        mode, k = greedy(params, pack.feats, mode_override)
        resp = render(pack.scene, mode, Trajectory(pack.anchors[k]))
        score = pack.scorer([resp.trajectory])[0]
        row = {"seed": pack.seed, "level": int(pack.level), "mode": mode.label, "traj_index": k,
               "token_cost": resp.token_cost, **score.as_dict()}
        if best_of > 0:
            seeds = np.random.SeedSequence([seed, i]).generate_state(best_of, dtype=np.uint64)
            cands = sample_group(sample_params, pack.scene, seeds, vocab, anchors=pack.anchors)
            _, best = select_best_of_n([c.response.trajectory for c in cands], pack.scene)
            row["best_of_n"] = best_of
            row["best_of_n_pdms"] = best.pdms
        rows.append(row)
    return EvalReport(rows, summarize(rows))


# ------------------------------------------------------------------ training

def dataset_seed(seed: int, split: int) -> int:
    return int(np.random.SeedSequence([int(seed), split]).generate_state(1, dtype=np.uint64)[0])


def _val_record(params, packs, epoch, pinned_mode):
    rep = evaluate(params, packs, pinned_mode)
    s = rep.summary
    return {"epoch": epoch, "pdms": s["pdms"], "pdms_by_level": s["pdms_by_level"],
            "pdms_by_mode": s["pdms_by_mode"], "think_rate_by_level": s["think_rate_by_level"],
            "token_cost": s["token_cost"]}


def fit(config: GrpoConfig, train_packs: Sequence[ScenePack], val_packs: Sequence[ScenePack] = (),
        warm: Optional[PolicyParams] = None, world_config: WorldConfig = DEFAULT_WORLD,
        vocab: TrajectoryVocabulary = DEFAULT_VOCAB,
        on_epoch: Optional[Callable[[int, PolicyParams], None]] = None) -> tuple[PolicyParams, TrainingLog]:
    """Warmup (unless ``warm`` is given) followed by GRPO epochs over prepared scenes.

    ``on_epoch(epoch, params)`` is called after every epoch, e.g. to write
    periodic checkpoints.
    """
    tlog = TrainingLog()
    tlog.add("header", schema_version=SCHEMA_VERSION, seed=config.seed,
             config_hash=config_hash(config, world_config), mode_policy=config.mode_policy)
    if warm is None:
        warm = warmup_sft(PolicyParams.zeros(vocab.size), train_packs, config.sft_lr, config.sft_steps)
    params = warm
    if config.pinned_mode is not None:
        params = pinned(params, config.pinned_mode)
    params_ref = params
    if val_packs:
        tlog.add("val", **_val_record(params, val_packs, 0, config.pinned_mode))

    step = 0
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_packs))
        for start in range(0, len(order), config.batch_size):
            params_old = params
            batch = []
            for idx in order[start:start + config.batch_size]:
                pack = train_packs[int(idx)]
                seeds = np.random.SeedSequence([config.seed, epoch, int(idx)]).generate_state(
                    config.group_size, dtype=np.uint64)
                batch.append(rollout_group(params_old, pack, seeds, config))
            if config.log_rollouts:
                for group in batch:
                    for out, rew in zip(group.outputs, group.rewards):
                        tlog.add("rollout", step=step, scene_seed=group.pack.seed, mode=out.mode.label,
                                 traj_index=out.traj_index, **rew.as_dict())
            for _ in range(config.inner_steps):
                params, stats = grpo_step(params, params_old, params_ref, batch, config)
                counts = [sum(o.mode is m for g in batch for o in g.outputs) for m in Mode]
                tlog.add("step", step=step, epoch=epoch, mode_counts=counts, **stats.as_dict())
                step += 1
        if val_packs:
            tlog.add("val", **_val_record(params, val_packs, epoch, config.pinned_mode))
        if on_epoch is not None:
            on_epoch(epoch, params)
    return params, tlog


def build_datasets(config: GrpoConfig, world_config: WorldConfig = DEFAULT_WORLD,
                   vocab: TrajectoryVocabulary = DEFAULT_VOCAB):
    train_scenes = generate_dataset(config.train_scenes, dataset_seed(config.seed, 0), world_config)
    val_scenes = generate_dataset(config.val_scenes, dataset_seed(config.seed, 1), world_config)
    return prepare(train_scenes, vocab), prepare(val_scenes, vocab)


def train(config: GrpoConfig, world_config: WorldConfig = DEFAULT_WORLD,
          vocab: TrajectoryVocabulary = DEFAULT_VOCAB) -> tuple[PolicyParams, TrainingLog]:
    train_packs, val_packs = build_datasets(config, world_config, vocab)
    return fit(config, train_packs, val_packs, world_config=world_config, vocab=vocab)


def with_policy(config: GrpoConfig, mode_policy: str) -> GrpoConfig:
    return replace(config, mode_policy=mode_policy)
