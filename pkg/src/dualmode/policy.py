"""Two-head linear-softmax policy over (reasoning mode, trajectory anchor).

P(m, k | scene) = softmax(W_mode phi_base)[m] * softmax(W_traj phi_m)[k], where
phi_m is the mode-specific observation (non-thinking features zero-padded to
the thinking length so one trajectory head serves both modes).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import N_WAYPOINTS, WAYPOINT_DT, Mode, Trajectory
from .rewards import Response, parse_response, render_response
from .world import F_BASE, F_FULL, SCHEMA_VERSION, EgoState, Scene, feature_vectors

CHECKPOINT_FORMAT = 1


class NonFiniteLogits(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class VocabularyConfig:
    # road-curvature grid expressed as lateral acceleration at the current speed
    lat_accels: tuple = (-2.4, -1.6, -0.8, 0.0, 0.8, 1.6, 2.4)
    speed_ratios: tuple = (0.0, 0.35, 0.6, 0.8, 1.0)
    ramp_time: float = 2.5
    max_decel: float = 3.0
    max_accel: float = 1.5


class TrajectoryVocabulary:
    """Curvature x speed-profile anchor grid, instantiated per ego speed.

    Anchor ``k`` pairs curvature ``k // n_speed`` with speed profile
    ``k % n_speed``. Each profile ramps towards ``ratio * v0`` at constant
    acceleration (clipped) and then holds; the path is a constant-curvature arc
    with curvature lat_accel / v0**2.
    """

    def __init__(self, config: VocabularyConfig = VocabularyConfig()):
        self.config = config
        self.n_curv = len(config.lat_accels)
        self.n_speed = len(config.speed_ratios)

    @property
    def size(self) -> int:
        return self.n_curv * self.n_speed

    def speed_profiles(self, v0: float) -> np.ndarray:
        """Arc length at each waypoint time, shape (n_speed, 8)."""
        cfg = self.config
        t = np.arange(1, N_WAYPOINTS + 1) * WAYPOINT_DT
        out = np.empty((self.n_speed, N_WAYPOINTS))
        for j, ratio in enumerate(cfg.speed_ratios):
            target = ratio * v0
            a = float(np.clip((target - v0) / cfg.ramp_time, -cfg.max_decel, cfg.max_accel))
            t_ramp = (target - v0) / a if a != 0 else 0.0
            tr = np.minimum(t, t_ramp)
            out[j] = v0 * tr + 0.5 * a * tr**2 + target * (t - tr)
        return out

    def anchors(self, ego: EgoState) -> np.ndarray:
        """All K anchors in the ego frame, shape (K, 8, 2)."""
        v0 = ego.speed
        s = self.speed_profiles(v0)
        v_ref = max(v0, 1.0)
        out = np.empty((self.n_curv, self.n_speed, N_WAYPOINTS, 2))
        for i, lat in enumerate(self.config.lat_accels):
            k = lat / v_ref**2
            if k == 0.0:
                out[i, ..., 0], out[i, ..., 1] = s, 0.0
            else:
                out[i, ..., 0] = np.sin(k * s) / k
                out[i, ..., 1] = (1.0 - np.cos(k * s)) / k
        return out.reshape(self.size, N_WAYPOINTS, 2)

    def trajectory(self, ego: EgoState, index: int) -> Trajectory:
        return Trajectory(self.anchors(ego)[index])

    def nearest(self, ego: EgoState, traj: Trajectory) -> int:
        """Anchor minimizing summed waypoint L2 distance to ``traj``."""
        d = np.linalg.norm(self.anchors(ego) - traj.waypoints[None], axis=-1).sum(axis=1)
        return int(np.argmin(d))


DEFAULT_VOCAB = TrajectoryVocabulary()


@dataclass(frozen=True, eq=False)
class PolicyParams:
    w_mode: np.ndarray
    w_traj: np.ndarray
    version: int = 0

    def __post_init__(self):
        for name in ("w_mode", "w_traj"):
            arr = np.array(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.w_mode.shape[0] != 2:
            raise ValueError("mode head must have two rows")

    @classmethod
    def zeros(cls, k: int = DEFAULT_VOCAB.size, f_base: int = F_BASE, f_full: int = F_FULL):
        return cls(np.zeros((2, f_base)), np.zeros((k, f_full)), 0)

    @property
    def k(self) -> int:
        return self.w_traj.shape[0]

    def updated(self, d_mode: np.ndarray, d_traj: np.ndarray) -> "PolicyParams":
        return PolicyParams(self.w_mode + d_mode, self.w_traj + d_traj, self.version + 1)

    def same_as(self, other: "PolicyParams") -> bool:
        return (self.w_mode.tobytes() == other.w_mode.tobytes()
                and self.w_traj.tobytes() == other.w_traj.tobytes())


def pinned(params: PolicyParams, mode: Mode, margin: float = 50.0) -> PolicyParams:
    """Mode head replaced by a bias that selects ``mode`` with probability 1 - O(e^-margin)."""
    w_mode = np.zeros_like(params.w_mode)
    w_mode[int(mode), 0] = margin / 2
    w_mode[1 - int(mode), 0] = -margin / 2
    return PolicyParams(w_mode, params.w_traj, params.version)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise NonFiniteLogits("non-finite logits")
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _features(scene_or_feats):
    if isinstance(scene_or_feats, Scene):
        return scene_features(scene_or_feats)
    return scene_or_feats


def scene_features(scene: Scene):
    cached = scene.__dict__.get("_policy_features")
    if cached is None:
        cached = feature_vectors(scene)
        scene.__dict__["_policy_features"] = cached
    return cached


def log_dists(params: PolicyParams, feats) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    base, think, nothink = feats
    return (log_softmax(params.w_mode @ base), log_softmax(params.w_traj @ think),
            log_softmax(params.w_traj @ nothink))


def forward(params: PolicyParams, scene) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(mode_dist, traj_dist_think, traj_dist_nothink)."""
    lm, lt, ln = log_dists(params, _features(scene))
    return np.exp(lm), np.exp(lt), np.exp(ln)


@dataclass(frozen=True)
class PolicyOutput:
    mode: Mode
    traj_index: int
    log_prob: float
    mode_dist: np.ndarray = field(repr=False)
    traj_dist: np.ndarray = field(repr=False)
    response: Response = field(repr=False)


def reasoning_text(scene: Scene) -> str:
    """Templated reasoning trace naming the critical objects and boundary state."""
    crit = scene.critical
    parts = [f"Command {scene.command.value}; ego speed {scene.ego.speed:.1f} m/s."]
    if crit.cipo1 is not None:
        a = scene.agent(crit.cipo1)
        gap = math.dist(a.position, scene.ego.position)
        parts.append(f"CIPO-1: agent {a.id} ahead in ego lane at {gap:.1f} m.")
    else:
        parts.append("CIPO-1: none.")
    if crit.cipo2:
        parts.append("CIPO-2: agents " + ", ".join(str(i) for i in crit.cipo2) + " merging into ego lane.")
    else:
        parts.append("CIPO-2: none.")
    if crit.motion_interaction:
        parts.append("Motion interaction: agents " + ", ".join(str(i) for i in crit.motion_interaction)
                     + " cross the ego path.")
    else:
        parts.append("Motion interaction: none.")
    state = "near" if crit.boundary_proximity else "clear"
    parts.append(f"Road boundary {state}, clearance {crit.boundary_distance:.2f} m.")
    return " ".join(parts)


def render(scene: Scene, mode: Mode, traj: Trajectory) -> Response:
    think = ""
    if mode is Mode.THINKING:
        think = scene.__dict__.get("_reasoning_text")
        if think is None:
            think = scene.__dict__["_reasoning_text"] = reasoning_text(scene)
    return parse_response(render_response(traj, mode, think))


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)


def sample(params: PolicyParams, scene: Scene, rng_seed: int,
           vocab: TrajectoryVocabulary = DEFAULT_VOCAB) -> PolicyOutput:
    """Draw a mode, then an anchor under that mode, and serialize the response."""
    return sample_group(params, scene, [rng_seed], vocab)[0]


def sample_group(params: PolicyParams, scene: Scene, seeds, vocab: TrajectoryVocabulary = DEFAULT_VOCAB,
                 anchors: Optional[np.ndarray] = None) -> list[PolicyOutput]:
    lm, lt, ln = log_dists(params, scene_features(scene))
    pm, pt, pn = np.exp(lm), np.exp(lt), np.exp(ln)
    if anchors is None:
        anchors = vocab.anchors(scene.ego)
    outs = []
    for seed in seeds:
        rng = _rng(seed)
        mode = Mode(int(rng.choice(2, p=pm / pm.sum())))
        lp_traj, p_traj = (lt, pt) if mode is Mode.THINKING else (ln, pn)
        k = int(rng.choice(len(p_traj), p=p_traj / p_traj.sum()))
        resp = render(scene, mode, Trajectory(anchors[k]))
        outs.append(PolicyOutput(mode, k, float(lm[mode] + lp_traj[k]), pm, p_traj, resp))
    return outs


def log_prob_and_grad(params: PolicyParams, scene, mode: Mode, traj_index: int):
    """Joint log-probability and its gradient with respect to both heads."""
    base, think, nothink = feats = _features(scene)
    if not 0 <= traj_index < params.k:
        raise IndexError("trajectory index out of range")
    lm, lt, ln = log_dists(params, feats)
    mode = Mode(mode)
    lp_traj, phi = (lt, think) if mode is Mode.THINKING else (ln, nothink)
    g_mode = np.outer(np.eye(2)[mode] - np.exp(lm), base)
    g_traj = np.outer(np.eye(params.k)[traj_index] - np.exp(lp_traj), phi)
    return float(lm[mode] + lp_traj[traj_index]), g_mode, g_traj


def select_mode(params: PolicyParams, scene) -> Mode:
    """Greedy mode; an exact tie goes to the cheaper non-thinking mode."""
    pm = forward(params, scene)[0]
    return Mode.THINKING if pm[Mode.THINKING] > pm[Mode.NON_THINKING] else Mode.NON_THINKING


def greedy(params: PolicyParams, scene, mode: Optional[Mode] = None) -> tuple[Mode, int]:
    pm, pt, pn = forward(params, scene)
    if mode is None:
        mode = Mode.THINKING if pm[Mode.THINKING] > pm[Mode.NON_THINKING] else Mode.NON_THINKING
    dist = pt if mode is Mode.THINKING else pn
    return mode, int(np.argmax(dist))


def joint_log_dist(params: PolicyParams, scene) -> np.ndarray:
    """log P(m, k) as a (2, K) array."""
    lm, lt, ln = log_dists(params, _features(scene))
    return np.stack([lm[0] + lt, lm[1] + ln])


def exact_kl(params_p: PolicyParams, params_q: PolicyParams, scene) -> float:
    """KL(p || q) over the joint mode x anchor distribution."""
    lp = joint_log_dist(params_p, scene)
    lq = joint_log_dist(params_q, scene)
    return max(float(np.sum(np.exp(lp) * (lp - lq))), 0.0)


def exact_kl_and_grad(params_p: PolicyParams, params_q: PolicyParams, feats):
    """KL(p || q) and its gradient with respect to p's parameters."""
    base, think, nothink = feats
    lm_p, lt_p, ln_p = log_dists(params_p, feats)
    lm_q, lt_q, ln_q = log_dists(params_q, feats)
    pm = np.exp(lm_p)
    per_mode = []
    g_traj = np.zeros_like(params_p.w_traj)
    for m, (lp, lq, phi) in enumerate(((lt_p, lt_q, think), (ln_p, ln_q, nothink))):
        p = np.exp(lp)
        f = lp - lq
        kl_m = float(np.sum(p * f))
        per_mode.append(kl_m)
        g_traj += pm[m] * np.outer(p * (f - kl_m), phi)
    f_mode = lm_p - lm_q + np.array(per_mode)
    kl = float(np.sum(pm * f_mode))
    g_mode = np.outer(pm * (f_mode - kl), base)
    return max(kl, 0.0), g_mode, g_traj


# ------------------------------------------------------------- checkpoints

def save_checkpoint(path: Path, params: PolicyParams, **meta) -> None:
    """Text dump: one header line, then row-major weights as exact float reprs."""
    header = {"format": CHECKPOINT_FORMAT, "F_base": params.w_mode.shape[1],
              "F_full": params.w_traj.shape[1], "K": params.k, "version": params.version}
    header.update(meta)
    lines = ["# dualmode-policy " + " ".join(f"{k}={v}" for k, v in header.items())]
    lines.append("[w_mode]")
    lines += [" ".join(repr(float(x)) for x in row) for row in params.w_mode]
    lines.append("[w_traj]")
    lines += [" ".join(repr(float(x)) for x in row) for row in params.w_traj]
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path: Path, f_base: int = F_BASE, f_full: int = F_FULL,
                    k: Optional[int] = None) -> tuple[PolicyParams, dict]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# dualmode-policy "):
        raise CheckpointError(f"{path}: not a policy checkpoint")
    meta = dict(item.split("=", 1) for item in lines[0][len("# dualmode-policy "):].split())
    if int(meta.get("format", -1)) != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: checkpoint format {meta.get('format')} != {CHECKPOINT_FORMAT}")
    if "schema_version" in meta and meta["schema_version"] != str(SCHEMA_VERSION):
        raise CheckpointError(f"{path}: schema version {meta['schema_version']} != {SCHEMA_VERSION}")
    shape = (int(meta["F_base"]), int(meta["F_full"]), int(meta["K"]))
    expected = (f_base, f_full, k if k is not None else shape[2])
    if shape != expected:
        raise CheckpointError(f"{path}: shape (F_base, F_full, K)={shape} does not match {expected}")
    i_mode, i_traj = lines.index("[w_mode]"), lines.index("[w_traj]")
    w_mode = np.array([[float(x) for x in ln.split()] for ln in lines[i_mode + 1:i_traj]])
    w_traj = np.array([[float(x) for x in ln.split()] for ln in lines[i_traj + 1:] if ln.strip()])
    if w_mode.shape != (2, shape[0]) or w_traj.shape != (shape[2], shape[1]):
        raise CheckpointError(f"{path}: weight block sizes disagree with header")
    return PolicyParams(w_mode, w_traj, int(meta["version"])), meta
