"""LSTM predictive policy with optional modality attention and the hidden-state
loop constraint.

Per step: A = attention(h_prev, x_in); x_lstm = A * x_in (block-wise);
(h, c) = LSTM(x_lstm, h_prev, c_prev); y_hat = sigmoid(h W_r + b_r), the
prediction of the input features two steps ahead.

Training loss for one episode:
    sum_t sum_ch w_ch (y_hat_ch(t) - y_ch(t))^2 + gamma * sum_(s,e) ||h(e) - h(s)||^2
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attention import AttentionParams, ModalityLayout, apply_attention, attention_forward, tape_attention
from .autoencoder import Autoencoder, TrainCurve
from .core import (Checkpoint, NumericError, OptimizerState, Param, Tape, init_linear, optimizer_step,
                   restore, sigmoid, snapshot)
from .env import CapEnv, EnvConfig, EnvError, JudgeConfig, EvalOutcome, Phase, PhaseTracker, Result, Scenario, judge
from .preprocess import (NormalizationStats, ProcessedEpisode, add_noise, modality_slices, scale_values,
                         unscale)

log = logging.getLogger(__name__)

HUB_PHASES = (Phase.GRASP, Phase.RETRACT_THUMB, Phase.SLIDE_LEFT, Phase.SLIDE_RIGHT)


@dataclass
class PolicyConfig:
    n_joints: int = 8
    latent_dim: int = 10
    hidden_size: int = 64
    attention: bool = True
    attention_hidden: int = 32

    @property
    def layout(self) -> ModalityLayout:
        return ModalityLayout.build(self.latent_dim, self.n_joints, thumb=self.attention)


@dataclass
class HiddenState:
    h: np.ndarray
    c: np.ndarray


@dataclass
class LossConfig:
    gamma: float = 0.1
    weights: np.ndarray | None = None
    horizon: int = 2
    constraint_mode: str = "switch"

    def __post_init__(self):
        if self.gamma < 0 or not np.isfinite(self.gamma):
            raise ValueError("gamma must be finite and non-negative")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
                raise ValueError("loss weights must be finite and non-negative")
        if self.constraint_mode not in ("switch", "episode", "segments"):
            raise ValueError(f"unknown constraint mode {self.constraint_mode!r}")


def default_loss_weights(layout: ModalityLayout, n_joints: int, strong: float = 2.0) -> np.ndarray:
    """1 everywhere; `strong` on finger base joints and both thumb joints."""
    w = np.ones(layout.width)
    js = layout.slice("joints")
    base = list(range(0, n_joints - 2, 2)) + [n_joints - 2, n_joints - 1]
    w[js.start + np.array(base)] = strong
    return w


@dataclass
class SwitchSpec:
    pairs: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        for s, e in self.pairs:
            if not s < e:
                raise ValueError(f"switch pair ({s}, {e}) must satisfy start < end")


def switch_spec(labels: np.ndarray, marks: Sequence[int], length: int, mode: str = "switch") -> SwitchSpec:
    """Constraint pairs for one episode.

    "switch": consecutive switch timings of the same kind are paired. Hub
    timings end a grasp, a thumb retraction or a slide (all on the grip
    posture); attempt timings end a cap-opening try (twisted posture).
    "episode": the single pair (0, T-1).
    "segments": (first, last) frame of every sub-task segment.
    """
    if mode == "episode":
        return SwitchSpec([(0, length - 1)] if length > 1 else [])
    marks = [m for m in marks if 0 < m < length]
    if mode == "segments":
        bounds = [0, *marks, length]
        return SwitchSpec([(a, b - 1) for a, b in zip(bounds, bounds[1:]) if b - 1 > a])
    hub, attempt = [], []
    for m in marks:
        prev = Phase(int(labels[m - 1]))
        if prev == Phase.TRY_OPEN:
            attempt.append(m)
        elif prev in HUB_PHASES:
            hub.append(m)
    pairs = list(zip(hub, hub[1:])) + list(zip(attempt, attempt[1:]))
    return SwitchSpec(sorted(pairs))


class Policy:
    def __init__(self, config: PolicyConfig, seed: int | np.random.Generator = 0):
        self.config = config
        rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
        self.layout = config.layout
        D, H = self.layout.width, config.hidden_size
        self.W, self.b = init_linear(rng, "lstm.gates", D + H, 4 * H)
        self.Wr, self.br = init_linear(rng, "lstm.readout", H, D)
        self.att = AttentionParams(H, self.layout, config.attention_hidden, rng) if config.attention else None

    @property
    def params(self) -> list[Param]:
        ps = [self.W, self.b, self.Wr, self.br]
        if self.att is not None:
            ps += self.att.params
        return ps

    @property
    def input_width(self) -> int:
        return self.layout.width

    def zero_state(self, batch: int = 1) -> HiddenState:
        H = self.config.hidden_size
        return HiddenState(np.zeros((batch, H)), np.zeros((batch, H)))

    def cell_step(self, x_lstm: np.ndarray, state: HiddenState) -> tuple[HiddenState, np.ndarray]:
        H = self.config.hidden_size
        z = np.concatenate([x_lstm, state.h], axis=1) @ self.W.value + self.b.value
        s = sigmoid(z[:, :3 * H])
        i, f, o = s[:, :H], s[:, H:2 * H], s[:, 2 * H:]
        g = np.tanh(z[:, 3 * H:])
        c = f * state.c + i * g
        h = o * np.tanh(c)
        y = sigmoid(h @ self.Wr.value + self.br.value)
        return HiddenState(h, c), y

    def step(self, x_in: np.ndarray, state: HiddenState) -> tuple[HiddenState, np.ndarray, np.ndarray | None]:
        """One closed-loop step; returns (new state, prediction, attention)."""
        x_in = np.atleast_2d(x_in)
        A = None
        if self.att is not None:
            A = attention_forward(state.h, x_in, self.att)
            x_in = apply_attention(x_in, A, self.layout)
        new, y = self.cell_step(x_in, state)
        return new, y, A

    def run(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
        """Teacher-forced pass over X of shape (T, B, D)."""
        T, B, _ = X.shape
        st = self.zero_state(B)
        Y = np.empty((T, B, self.layout.width))
        Hs = np.empty((T, B, self.config.hidden_size))
        As = np.empty((T, B, 4)) if self.att is not None else None
        for t in range(T):
            st, y, A = self.step(X[t], st)
            Y[t], Hs[t] = y, st.h
            if As is not None:
                As[t] = A
        return Y, Hs, As

    def tape_run(self, tape: Tape, X: np.ndarray):
        """Returns (stacked prediction node of shape (T*B, D), list of h nodes)."""
        T, B, _ = X.shape
        H = self.config.hidden_size
        W, b = tape.param(self.W), tape.param(self.b)
        h = tape.const(np.zeros((B, H)))
        c = tape.const(np.zeros((B, H)))
        hs = []
        for t in range(T):
            x = tape.const(X[t])
            if self.att is not None:
                _, x = tape_attention(tape, h, x, self.att)
            z = tape.affine(tape.concat([x, h]), W, b)
            h, c = tape.lstm_cell(z, c)
            hs.append(h)
        y = tape.sigmoid(tape.affine(tape.stack_rows(hs), tape.param(self.Wr), tape.param(self.br)))
        return y, hs

    def checkpoint(self, config_hash: str = "", opt: OptimizerState | None = None, extra: dict | None = None) -> Checkpoint:
        c = self.config
        meta = {"kind": "policy", "n_joints": c.n_joints, "latent_dim": c.latent_dim, "hidden_size": c.hidden_size,
                "attention": c.attention, "attention_hidden": c.attention_hidden, **(extra or {})}
        return Checkpoint.from_params(self.params, config_hash, meta, opt)

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint) -> "Policy":
        m = ck.meta
        pol = cls(PolicyConfig(m["n_joints"], m["latent_dim"], m["hidden_size"], m["attention"],
                               m["attention_hidden"]))
        ck.load_into(pol.params)
        return pol


# ---------------------------------------------------------------------------
# features


class Featurizer:
    """Maps scaled full-width frames to the policy's modality layout."""

    def __init__(self, stats: NormalizationStats, ae_whole: Autoencoder, ae_thumb: Autoencoder | None,
                 layout: ModalityLayout):
        self.stats = stats
        self.ae_whole = ae_whole
        self.ae_thumb = ae_thumb
        self.layout = layout
        J = stats.n_joints
        self.slices = modality_slices(J, stats.whole_layout.dim, stats.thumb_layout.dim)
        if "thumb" in layout.names and ae_thumb is None:
            raise ValueError("layout has a thumb block but no thumb autoencoder was given")

    def features(self, frames: np.ndarray) -> np.ndarray:
        sl = self.slices
        parts = {"whole": self.ae_whole.encode(frames[:, sl["whole"]]),
                 "joints": frames[:, sl["joints"]], "torques": frames[:, sl["torques"]]}
        if "thumb" in self.layout.names:
            parts["thumb"] = self.ae_thumb.encode(frames[:, sl["thumb"]])
        return np.concatenate([parts[n] for n in self.layout.names], axis=1)

    def scale_observation(self, joints, torques, whole, thumb) -> np.ndarray:
        b = self.stats.clip_bound
        raw = np.concatenate([joints, torques, np.clip(whole, -b, b), np.clip(thumb, -b, b)])[None, :]
        return scale_values(raw, self.stats)

    def joints_from_prediction(self, y: np.ndarray) -> np.ndarray:
        js = self.layout.slice("joints")
        return unscale(y[..., js], self.stats, self.slices["joints"])


# ---------------------------------------------------------------------------
# loss


@dataclass
class Sequence_:
    """One training sequence in feature space."""
    X: np.ndarray
    Y: np.ndarray
    pairs: list[tuple[int, int]]
    labels: np.ndarray


def sequence_loss(policy: Policy, X: np.ndarray, Y: np.ndarray, loss_cfg: LossConfig,
                  switches: SwitchSpec) -> tuple[float, float, float]:
    """(total, prediction term, constraint term) for one teacher-forced episode."""
    if loss_cfg.gamma > 0 and not switches.pairs:
        warnings.warn("gamma > 0 but the episode has no switch pairs; constraint term is 0")
    Yh, Hs, _ = policy.run(X[:, None, :])
    w = loss_cfg.weights if loss_cfg.weights is not None else np.ones(X.shape[1])
    pred = float(np.sum(w * (Yh[:, 0] - Y) ** 2))
    cons = float(sum(np.sum((Hs[e, 0] - Hs[s, 0]) ** 2) for s, e in switches.pairs))
    return pred + loss_cfg.gamma * cons, pred, cons


def pad_batch(seqs: Sequence[Sequence_]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    T = max(len(s.X) for s in seqs)
    B, D = len(seqs), seqs[0].X.shape[1]
    X = np.zeros((T, B, D))
    Y = np.zeros((T, B, D))
    M = np.zeros((T, B))
    for b, s in enumerate(seqs):
        n = len(s.X)
        X[:n, b], Y[:n, b], M[:n, b] = s.X, s.Y, 1.0
    return X, Y, M


def tape_batch_loss(tape: Tape, policy: Policy, seqs: Sequence[Sequence_], loss_cfg: LossConfig):
    """Summed loss over a padded batch; returns (loss node, prediction node, constraint node or None)."""
    X, Y, M = pad_batch(seqs)
    T, B, D = X.shape
    yhat, hs = policy.tape_run(tape, X)
    w = loss_cfg.weights if loss_cfg.weights is not None else np.ones(D)
    pred = tape.weighted_sse(yhat, Y.reshape(T * B, D), w, M.reshape(-1))
    if loss_cfg.gamma == 0:
        return pred, pred, None
    groups: dict[tuple[int, int], np.ndarray] = {}
    for b, s in enumerate(seqs):
        for pair in s.pairs:
            groups.setdefault(pair, np.zeros(B))[b] = 1.0
    if not groups:
        return pred, pred, None
    terms = [tape.sq_dist(hs[e], hs[s], mask) for (s, e), mask in sorted(groups.items())]
    cons = tape.total(terms)
    return tape.total([pred, tape.scale(cons, loss_cfg.gamma)]), pred, cons


def batch_loss(policy: Policy, seqs: Sequence[Sequence_], loss_cfg: LossConfig) -> float:
    """Numpy twin of tape_batch_loss (no gradient bookkeeping)."""
    X, Y, M = pad_batch(seqs)
    Yh, Hs, _ = policy.run(X)
    w = loss_cfg.weights if loss_cfg.weights is not None else np.ones(X.shape[2])
    total = float(np.sum(M[:, :, None] * w * (Yh - Y) ** 2))
    if loss_cfg.gamma > 0:
        for b, s in enumerate(seqs):
            total += loss_cfg.gamma * sum(float(np.sum((Hs[e, b] - Hs[s_, b]) ** 2)) for s_, e in s.pairs)
    return total


# ---------------------------------------------------------------------------
# training


@dataclass
class PolicyData:
    """Scaled episodes plus their clean target features and constraint pairs."""
    episodes: list[ProcessedEpisode]
    targets: list[np.ndarray]
    pairs: list[list[tuple[int, int]]]

    @classmethod
    def build(cls, episodes: Sequence[ProcessedEpisode], feat: Featurizer, mode: str = "switch") -> "PolicyData":
        targets = [feat.features(e.targets) for e in episodes]
        pairs = [switch_spec(e.subtask_labels, e.switch_marks, e.length, mode).pairs for e in episodes]
        return cls(list(episodes), targets, pairs)

    def sequences(self, feat: Featurizer, noise: Sequence[float] | None = None,
                  rng: np.random.Generator | None = None) -> list[Sequence_]:
        eps = self.episodes
        if noise is not None and any(s > 0 for s in noise):
            eps = [add_noise(e, noise, feat.slices, rng) for e in eps]
        lengths = [e.length for e in eps]
        flat = feat.features(np.concatenate([e.inputs for e in eps], axis=0))
        out, o = [], 0
        for e, n, y, p in zip(self.episodes, lengths, self.targets, self.pairs):
            out.append(Sequence_(flat[o:o + n], y, p, e.subtask_labels))
            o += n
        return out


@dataclass
class TrainSettings:
    epochs: int = 3000
    lr: float = 1e-3
    batch_size: int = 8
    noise: tuple[float, float, float, float] = (0.01, 0.01, 0.02, 0.02)
    noise_mode: str = "epoch"
    val_every: int = 10
    optimizer: str = "adam"


def _batches(lengths: Sequence[int], batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Length-bucketed minibatches in random order (ties broken randomly)."""
    order = np.lexsort((rng.random(len(lengths)), np.asarray(lengths)))
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    return [chunks[i] for i in rng.permutation(len(chunks))]


def train_policy(policy: Policy, train: PolicyData, val: PolicyData, feat: Featurizer, loss_cfg: LossConfig,
                 settings: TrainSettings = TrainSettings(), seed: int = 0,
                 progress=None) -> TrainCurve:
    """Teacher-forced training; restores the best-validation parameters."""
    if settings.noise_mode not in ("epoch", "once"):
        raise ValueError(f"unknown noise mode {settings.noise_mode!r}")
    rng = np.random.default_rng(seed)
    params = policy.params
    opt = OptimizerState(settings.lr, settings.optimizer)
    curve = TrainCurve()
    best = snapshot(params)
    val_seqs = val.sequences(feat)
    fixed = train.sequences(feat, settings.noise, rng) if settings.noise_mode == "once" else None
    lengths = [e.length for e in train.episodes]
    n_total = len(train.episodes)
    for epoch in range(settings.epochs):
        seqs = fixed if fixed is not None else train.sequences(feat, settings.noise, rng)
        total = 0.0
        for idx in _batches(lengths, settings.batch_size, rng):
            tape = Tape()
            loss, _, _ = tape_batch_loss(tape, policy, [seqs[i] for i in idx], loss_cfg)
            tape.backward(loss, 1.0 / len(idx))
            optimizer_step(params, opt)
            total += loss.value[0, 0]
        curve.train.append(total / n_total)
        if epoch % settings.val_every == 0 or epoch == settings.epochs - 1:
            v = batch_loss(policy, val_seqs, loss_cfg) / len(val_seqs)
            if not np.isfinite(v):
                raise NumericError(f"validation loss became {v} at epoch {epoch}")
            curve.val.append(v)
            curve.val_epochs.append(epoch)
            if v < curve.best_val:
                curve.best_val, curve.best_epoch = v, epoch
                best = snapshot(params)
            if progress is not None:
                progress(epoch, curve.train[-1], v)
    restore(params, best)
    return curve


# ---------------------------------------------------------------------------
# closed loop


@dataclass
class TrialTrace:
    scenario: Scenario
    commands: np.ndarray
    hidden: np.ndarray
    attention: np.ndarray | None
    labels: np.ndarray
    object_pos: np.ndarray
    open_step: int | None
    reason: str = ""


def rollout(scenarios: Sequence[Scenario], env_config: EnvConfig, policy: Policy, feat: Featurizer,
            max_steps: int = 900, judge_cfg: JudgeConfig | None = None,
            early_stop: bool = True) -> list[tuple[EvalOutcome, TrialTrace]]:
    """Run trials in lockstep; the network is evaluated on all live trials at once.

    Each step: observe, normalize, encode, attend, step the cell, unscale the
    predicted joints and command them for one control period.
    """
    judge_cfg = judge_cfg or JudgeConfig(max_steps=max_steps)
    envs = [CapEnv(env_config, s) for s in scenarios]
    n = len(envs)
    state = policy.zero_state(n)
    trackers = [PhaseTracker(e.jm) for e in envs]
    recs = [{"cmd": [], "h": [], "a": [], "lab": [], "pos": []} for _ in envs]
    open_step: list[int | None] = [None] * n
    reason = [""] * n
    live = np.ones(n, dtype=bool)
    prev_q = [e.state.joints.copy() for e in envs]
    for t in range(max_steps):
        idx = np.flatnonzero(live)
        if len(idx) == 0:
            break
        frames = np.concatenate([feat.scale_observation(envs[i].observation.joints, envs[i].observation.torques,
                                                        envs[i].observation.tactile_whole,
                                                        envs[i].observation.tactile_thumb) for i in idx])
        x = feat.features(frames)
        sub = HiddenState(state.h[idx], state.c[idx])
        sub, y, A = policy.step(x, sub)
        state.h[idx], state.c[idx] = sub.h, sub.c
        cmds = feat.joints_from_prediction(y)
        for k, i in enumerate(idx):
            env, r = envs[i], recs[i]
            r["cmd"].append(cmds[k])
            r["h"].append(sub.h[k].copy())
            if A is not None:
                r["a"].append(A[k].copy())
            r["pos"].append(env.state.object_pos)
            try:
                env.step(cmds[k])
            except EnvError as err:
                reason[i] = f"invalid command: {err}"
                live[i] = False
                r["lab"].append(int(trackers[i].phase))
                continue
            q = env.state.joints
            r["lab"].append(int(trackers[i].update(prev_q[i], q, env.state.cap_open)))
            prev_q[i] = q.copy()
            if env.state.cap_open and open_step[i] is None:
                open_step[i] = t
            if env.state.dropped:
                reason[i] = "object dropped"
                live[i] = False
            elif early_stop and open_step[i] is not None and t >= open_step[i] + judge_cfg.grace + judge_cfg.hold:
                live[i] = False
    out = []
    for i, s in enumerate(scenarios):
        r = recs[i]
        cmds = np.array(r["cmd"])
        if reason[i]:
            res = EvalOutcome(Result.FAILURE, len(cmds), open_step[i], None, reason[i])
        else:
            res = judge(cmds, open_step[i], judge_cfg)
        trace = TrialTrace(s, cmds, np.array(r["h"]), np.array(r["a"]) if r["a"] else None,
                           np.array(r["lab"]), np.array(r["pos"]), open_step[i], reason[i])
        out.append((res, trace))
    return out
