"""Kinematic cap-opening world with tactile, torque and joint observations.

The hand has (J-2)/2 fingers with a lateral base joint and a flexion joint
each, plus a thumb with a flexion joint and a twist joint. A bottle sits in
the grasp at lateral position ``object_pos``; its cap can be opened only when
the object is inside the object's openable window and the thumb performs a
twist while pressing on the cap. Twisting at the rim tilts the object; a
slide re-seats it. Sliding moves the object with the base joints while the
fingers grip.

Everything is deterministic given the scenario and the config seed.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Sequence

import numpy as np

from .preprocess import RawEpisode, TactileLayout


class Phase(IntEnum):
    GRASP = 0
    TRY_OPEN = 1
    RETRACT_THUMB = 2
    SLIDE_LEFT = 3
    SLIDE_RIGHT = 4
    STOP = 5


PHASE_NAMES = {p: p.name.lower() for p in Phase}


class EnvError(RuntimeError):
    pass


@dataclass(frozen=True)
class ObjectSpec:
    object_id: str
    length: float        # lateral extent seen by the finger pads
    gain: float          # tactile sensitivity of this surface
    window: float        # openable half-width around the thumb
    contact_flex: float  # finger flexion at which contact starts


TRAINED_OBJECTS = (
    ObjectSpec("bottle_a", 2.4, 1.00, 0.60, 0.85),
    ObjectSpec("bottle_b", 2.0, 1.15, 0.60, 0.80),
    ObjectSpec("bottle_c", 2.8, 0.90, 0.65, 0.90),
    ObjectSpec("bottle_d", 2.2, 1.05, 0.55, 0.82),
)

UNTRAINED_OBJECTS = (
    ObjectSpec("jar_e", 1.8, 1.25, 0.70, 0.80),
    ObjectSpec("jar_f", 3.0, 0.80, 0.60, 0.90),
    ObjectSpec("can_g", 2.6, 1.30, 0.55, 0.86),
    ObjectSpec("can_h", 2.1, 0.85, 0.75, 0.78),
    ObjectSpec("tube_i", 2.5, 1.10, 0.65, 0.92),
    ObjectSpec("tube_j", 1.9, 0.95, 0.60, 0.84),
)

ALL_OBJECTS = {o.object_id: o for o in TRAINED_OBJECTS + UNTRAINED_OBJECTS}


@dataclass
class EnvConfig:
    n_joints: int = 8
    patches: int = 2
    rows: int = 4
    cols: int = 4
    thumb_rows: int = 2
    sample_rate: int = 100
    control_rate: int = 10
    slide_step: float = 1.0
    max_pos: float = 3.0
    open_twist: float = 0.5
    sensor_noise_sigma: float = 8.0
    joint_noise_sigma: float = 0.002
    torque_noise_sigma: float = 0.01
    joint_tau: float = 0.144
    max_joint_rate: float = 3.0
    train_positions: tuple = (-2.0, -1.0, 0.0, 1.0, 2.0)
    test_positions: tuple = (-1.5, -0.5, 0.5, 1.5)
    untrained_positions: tuple = (-1.5, 0.0, 1.5)
    trials: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.n_joints < 4 or (self.n_joints - 2) % 2:
            raise ValueError("n_joints must be 2 + 2*fingers")
        if self.sample_rate % self.control_rate:
            raise ValueError("control rate must divide sample rate")
        if not 0 < self.thumb_rows <= self.rows:
            raise ValueError("thumb rows must lie inside the second patch")
        if self.patches < 2:
            raise ValueError("need a finger patch and a palm/thumb patch")

    @property
    def whole_layout(self) -> TactileLayout:
        return TactileLayout(self.patches, self.rows, self.cols)

    @property
    def thumb_layout(self) -> TactileLayout:
        return TactileLayout(1, self.thumb_rows, self.cols)

    @property
    def whole_dim(self) -> int:
        return self.whole_layout.dim

    @property
    def thumb_dim(self) -> int:
        return self.thumb_layout.dim

    def thumb_columns(self) -> np.ndarray:
        """Columns of the whole-hand stream that form the thumb stream."""
        per_patch = self.rows * self.cols * 3
        n = self.thumb_rows * self.cols * 3
        return per_patch + np.arange(n)


@dataclass(frozen=True)
class Scenario:
    object_id: str
    initial_pos: float
    trained: bool
    trial: int = 0

    @property
    def obj(self) -> ObjectSpec:
        return ALL_OBJECTS[self.object_id]


@dataclass
class EnvState:
    object_pos: float
    cap_open: bool
    joints: np.ndarray
    phase: Phase = Phase.GRASP
    step_count: int = 0
    tick: int = 0
    tilt: float = 0.0
    twist_accum: float = 0.0
    velocity: float = 0.0
    open_tick: int | None = None
    dropped: bool = False
    seated: bool = False


@dataclass
class Observation:
    joints: np.ndarray
    torques: np.ndarray
    tactile_whole: np.ndarray
    tactile_thumb: np.ndarray


class JointMap:
    def __init__(self, n_joints: int):
        J = n_joints
        self.base = np.arange(0, J - 2, 2)
        self.flex = np.arange(1, J - 2, 2)
        self.thumb_flex = J - 2
        self.twist = J - 1
        self.J = J

    def posture(self, base: float, flex: float, thumb_flex: float, twist: float) -> np.ndarray:
        q = np.empty(self.J)
        q[self.base] = base
        q[self.flex] = flex
        q[self.thumb_flex] = thumb_flex
        q[self.twist] = twist
        return q


# posture constants (radians)
FLEX_OPEN, FLEX_GRIP, FLEX_RELEASE = 0.1, 1.1, 0.5
THUMB_IDLE, THUMB_PRESS = 0.4, 1.0
TWIST_MAX = 0.8
SLIDE_BASE = 0.3
THUMB_CONTACT = 0.7


class CapEnv:
    """Single-trial world. `tick` advances one sample period; `step` one control period."""

    def __init__(self, config: EnvConfig, scenario: Scenario):
        self.config = config
        self.scenario = scenario
        self.obj = scenario.obj
        self.jm = JointMap(config.n_joints)
        c = config
        self.dt = 1.0 / c.sample_rate
        self.beta = 1.0 - np.exp(-self.dt / c.joint_tau)
        self.rate = c.max_joint_rate * self.dt
        self.k_slide = c.slide_step / SLIDE_BASE
        pitch = 1.0
        self.u = (np.arange(c.cols) - (c.cols - 1) / 2.0) * pitch
        self.rows_f = np.arange(c.rows) - (c.rows - 1) / 2.0
        self._thumb_cols = c.thumb_columns()
        self.reset()

    def reset(self) -> Observation:
        c = self.config
        idx = [sorted(ALL_OBJECTS).index(self.scenario.object_id),
               int(round(self.scenario.initial_pos * 1000)) % (2 ** 31), self.scenario.trial,
               int(self.scenario.trained)]
        self.rng = np.random.default_rng(np.random.SeedSequence([c.seed, *idx]))
        self.state = EnvState(float(self.scenario.initial_pos), False,
                              self.jm.posture(0.0, FLEX_OPEN, 0.2, 0.0))
        self.last_command = self.state.joints.copy()
        self._obs = self._observe(self.last_command)
        return self._obs

    # -- physics ------------------------------------------------------------

    def grip(self, q: np.ndarray) -> float:
        return float(np.clip((q[self.jm.flex].mean() - self.obj.contact_flex) / 0.15, 0.0, 1.0))

    def thumb_engagement(self, q: np.ndarray) -> float:
        return float(np.clip((q[self.jm.thumb_flex] - THUMB_CONTACT) / 0.2, 0.0, 1.0))

    def in_window(self, pos: float | None = None) -> bool:
        pos = self.state.object_pos if pos is None else pos
        return abs(pos) <= self.obj.window

    def tick(self, command: np.ndarray, observe: bool = True) -> Observation | None:
        command = np.asarray(command, dtype=np.float64)
        if command.shape != (self.config.n_joints,) or not np.all(np.isfinite(command)):
            raise EnvError(f"invalid joint command {command!r}")
        s, jm, c = self.state, self.jm, self.config
        prev = s.joints
        q = prev + np.clip(self.beta * (command - prev), -self.rate, self.rate)
        g = self.grip(q)
        s.seated = s.seated or g >= 0.5
        db = q[jm.base].mean() - prev[jm.base].mean()
        dp = self.k_slide * db * g
        s.object_pos += dp
        s.velocity = dp / self.dt
        if dp != 0.0 and s.tilt != 0.0:
            s.tilt = float(np.sign(s.tilt) * max(0.0, abs(s.tilt) - abs(dp) / (0.5 * c.slide_step)))
        te = self.thumb_engagement(q)
        dtw = q[jm.twist] - prev[jm.twist]
        if te >= 0.5 and g >= 0.5:
            if dtw > 0:
                s.twist_accum += dtw
        elif te < 0.5:
            s.twist_accum = 0.0
        if not s.cap_open and s.twist_accum > 0:
            if s.twist_accum >= c.open_twist and self.in_window():
                s.cap_open = True
                s.open_tick = s.tick
            elif not self.in_window():
                t_new = np.sign(s.object_pos) * min(1.0, s.twist_accum / c.open_twist)
                if abs(t_new) > abs(s.tilt):
                    s.tilt = float(t_new)
        if abs(s.object_pos) > c.max_pos:
            s.dropped = True
        s.joints = q
        s.tick += 1
        self.last_command = command
        if observe:
            self._obs = self._observe(command)
        return self._obs if observe else None

    def step(self, command: np.ndarray) -> Observation:
        """Hold `command` for one control period."""
        n = self.config.sample_rate // self.config.control_rate
        for k in range(n):
            obs = self.tick(command, observe=k == n - 1)
        self.state.step_count += 1
        return obs

    @property
    def observation(self) -> Observation:
        return self._obs

    # -- sensors ------------------------------------------------------------

    def _observe(self, command: np.ndarray) -> Observation:
        s, jm, c, o = self.state, self.jm, self.config, self.obj
        q = s.joints
        g = self.grip(q)
        te = self.thumb_engagement(q)
        slip = np.tanh(s.velocity / 1.0)
        strain = 0.0 if s.cap_open else min(1.0, s.twist_accum / c.open_twist)

        tau = 0.3 * (command - q)
        squeeze = max(q[jm.flex].mean() - o.contact_flex, 0.0)
        tau[jm.flex] += g * (0.4 + 1.5 * squeeze)
        tau[jm.base] += g * (0.8 * slip + 0.3 * s.tilt)
        tau[jm.thumb_flex] += 1.2 * te
        tau[jm.twist] += te * g * (0.6 * strain if not s.cap_open else 0.05)

        w = o.length / 2.0
        bump = np.exp(-(self.u - s.object_pos) ** 2 / (2 * w * w))
        bump_palm = np.exp(-(self.u - s.object_pos) ** 2 / (2 * (1.5 * w) ** 2))
        bump_t = np.exp(-(self.u - s.object_pos) ** 2 / (2 * 0.7 ** 2))
        rim = np.clip((abs(s.object_pos) - o.window) / 0.5, 0.0, 1.0) * np.sign(s.object_pos)

        tac = np.zeros((c.patches, c.rows, c.cols, 3))
        rowfac = 1.0 + 0.25 * s.tilt * self.rows_f / max(self.rows_f.max(), 1.0)
        tac[0, :, :, 2] = 900.0 * g * (0.7 + 0.3 * min(squeeze / 0.25, 1.0)) * np.outer(rowfac, bump)
        tac[0, :, :, 0] = 800.0 * g * slip * bump
        tac[0, :, :, 1] = 600.0 * g * s.tilt * bump
        tr = c.thumb_rows
        thumb_row = (1.0 - 0.2 * np.arange(tr))[:, None]
        tac[1, :tr, :, 2] = 1300.0 * te * (1.0 if not s.cap_open else 0.3) * thumb_row * bump_t
        tac[1, :tr, :, 0] = 1100.0 * te * strain * thumb_row * bump_t
        tac[1, :tr, :, 1] = 800.0 * te * rim * thumb_row * bump_t
        palm = max(g, 0.5) if s.seated else g
        tac[1, tr:, :, 2] = 700.0 * palm * bump_palm
        tac[1, tr:, :, 0] = 500.0 * g * slip * bump_palm
        tac[1, tr:, :, 1] = 200.0 * g * s.tilt * bump_palm
        for p in range(2, c.patches):
            tac[p, :, :, 2] = 300.0 * g * bump_palm
        whole = o.gain * tac.reshape(-1)
        whole = whole + self.rng.normal(0.0, c.sensor_noise_sigma, whole.shape)
        joints = q + self.rng.normal(0.0, c.joint_noise_sigma, q.shape)
        tau = tau + self.rng.normal(0.0, c.torque_noise_sigma, tau.shape)
        return Observation(joints, tau, whole, whole[self._thumb_cols].copy())


# ---------------------------------------------------------------------------
# expert


def phase_keyframes(phase: Phase, jm: JointMap) -> list[tuple[np.ndarray, float]]:
    """(target posture, seconds) segments; every phase except GRASP starts and
    ends on the grip posture or the twisted posture, so switch postures align."""
    P = jm.posture
    grip = P(0.0, FLEX_GRIP, THUMB_IDLE, 0.0)
    if phase == Phase.GRASP:
        return [(grip, 0.6), (grip, 0.2)]
    if phase == Phase.TRY_OPEN:
        pressed = P(0.0, FLEX_GRIP, THUMB_PRESS, 0.0)
        twisted = P(0.0, FLEX_GRIP, THUMB_PRESS, TWIST_MAX)
        return [(pressed, 0.3), (twisted, 0.6), (twisted, 0.2)]
    if phase == Phase.STOP:
        return [(None, 2.0)]
    if phase == Phase.RETRACT_THUMB:
        lifted = P(0.0, FLEX_GRIP, THUMB_IDLE, TWIST_MAX)
        return [(lifted, 0.3), (grip, 0.3), (grip, 0.2)]
    if phase in (Phase.SLIDE_LEFT, Phase.SLIDE_RIGHT):
        b = -SLIDE_BASE if phase == Phase.SLIDE_LEFT else SLIDE_BASE
        pushed = P(b, FLEX_GRIP, THUMB_IDLE, 0.0)
        released = P(b, FLEX_RELEASE, THUMB_IDLE, 0.0)
        back = P(0.0, FLEX_RELEASE, THUMB_IDLE, 0.0)
        return [(pushed, 0.5), (released, 0.2), (back, 0.2), (grip, 0.2), (grip, 0.2)]
    raise ValueError(phase)


class Expert:
    """Scripted demonstrator following the motion flow

    grasp -> try open -> (opened: stop | else: retract thumb -> slide toward
    the window) -> try open -> ...

    It reads the privileged world state only at phase boundaries. Commands
    invert the first-order joint lag so the joints land on the plan every
    sample.
    """

    def __init__(self, env: CapEnv, max_cycles: int = 8):
        self.env = env
        self.jm = env.jm
        self.max_cycles = max_cycles
        self.cycles = 0
        self.done = False
        self._start(Phase.GRASP, env.state.joints.copy())

    def _start(self, phase: Phase, from_posture: np.ndarray) -> None:
        rate = self.env.config.sample_rate
        plan = []
        cur = from_posture
        for target, secs in phase_keyframes(phase, self.jm):
            n = int(round(secs * rate))
            if target is None:
                target = cur
            for k in range(1, n + 1):
                plan.append(cur + (target - cur) * k / n)
            cur = target
        self.phase = phase
        self.plan = np.array(plan)
        self.k = 0
        self.env.state.phase = phase

    def _next_phase(self) -> Phase | None:
        s = self.env.state
        if self.phase == Phase.GRASP:
            return Phase.TRY_OPEN
        if self.phase == Phase.TRY_OPEN:
            self.cycles += 1
            if s.cap_open:
                return Phase.STOP
            return Phase.RETRACT_THUMB if self.cycles < self.max_cycles else None
        if self.phase == Phase.RETRACT_THUMB:
            return Phase.SLIDE_LEFT if s.object_pos > 0 else Phase.SLIDE_RIGHT
        if self.phase in (Phase.SLIDE_LEFT, Phase.SLIDE_RIGHT):
            return Phase.TRY_OPEN
        return None

    def action(self) -> tuple[np.ndarray, Phase]:
        """Command for the next tick and the sub-task it belongs to."""
        if self.k >= len(self.plan):
            nxt = self._next_phase()
            if nxt is None:
                self.done = True
                return self.plan[-1].copy(), self.phase
            self._start(nxt, self.plan[-1])
        q = self.env.state.joints
        cmd = q + (self.plan[self.k] - q) / self.env.beta
        label = self.phase
        self.k += 1
        return cmd.copy(), label


def expert_action(expert: Expert) -> tuple[np.ndarray, Phase]:
    return expert.action()


def run_expert(config: EnvConfig, scenario: Scenario, max_seconds: float = 90.0) -> tuple[RawEpisode, CapEnv]:
    """Record one demonstration at the sample rate."""
    env = CapEnv(config, scenario)
    ex = Expert(env)
    J, rec = config.n_joints, {"j": [], "tau": [], "w": [], "t": [], "lab": []}
    obs = env.observation
    limit = int(max_seconds * config.sample_rate)
    while len(rec["lab"]) < limit:
        cmd, label = ex.action()
        if ex.done:
            break
        rec["j"].append(obs.joints)
        rec["tau"].append(obs.torques)
        rec["w"].append(obs.tactile_whole)
        rec["t"].append(obs.tactile_thumb)
        rec["lab"].append(int(label))
        obs = env.tick(cmd)
    labels = np.array(rec["lab"])
    marks = [int(i) for i in np.flatnonzero(np.diff(labels)) + 1]
    meta = {"object_id": scenario.object_id, "initial_pos": scenario.initial_pos,
            "trained": scenario.trained, "trial": scenario.trial, "opened": env.state.cap_open,
            "open_tick": env.state.open_tick}
    ep = RawEpisode(config.sample_rate, np.array(rec["j"]).reshape(-1, J), np.array(rec["tau"]).reshape(-1, J),
                    np.array(rec["w"]), np.array(rec["t"]), labels, marks, meta)
    return ep, env


def training_scenarios(config: EnvConfig) -> list[Scenario]:
    return [Scenario(o.object_id, p, True, k) for o in TRAINED_OBJECTS
            for p in config.train_positions for k in range(config.trials)]


def evaluation_scenarios(config: EnvConfig) -> list[Scenario]:
    trained = [Scenario(o.object_id, p, True, k) for o in TRAINED_OBJECTS
               for p in config.test_positions for k in range(config.trials)]
    untrained = [Scenario(o.object_id, p, False, k) for o in UNTRAINED_OBJECTS
                 for p in config.untrained_positions for k in range(config.trials)]
    return trained + untrained


def generate_dataset(scenarios: Sequence[Scenario], config: EnvConfig) -> list[RawEpisode]:
    return [run_expert(config, s)[0] for s in scenarios]


def save_scenarios(scenarios: Sequence[Scenario], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["object_id", "initial_pos", "trained", "trial"])
        for s in scenarios:
            w.writerow([s.object_id, repr(float(s.initial_pos)), int(s.trained), s.trial])


def load_scenarios(path: str | Path) -> list[Scenario]:
    with open(path, newline="") as f:
        return [Scenario(r["object_id"], float(r["initial_pos"]), bool(int(r["trained"])), int(r["trial"]))
                for r in csv.DictReader(f)]


# ---------------------------------------------------------------------------
# closed-loop phase labelling and judging


class PhaseTracker:
    """Labels closed-loop motion with sub-tasks from joint kinematics alone."""

    def __init__(self, jm: JointMap, move_tol: float = 0.01):
        self.jm = jm
        self.tol = move_tol
        self.phase = Phase.GRASP
        self.twist_peak = 0.0

    def update(self, prev: np.ndarray, q: np.ndarray, cap_open: bool) -> Phase:
        jm, tol = self.jm, self.tol
        dthumb = q[jm.thumb_flex] - prev[jm.thumb_flex]
        dtwist = q[jm.twist] - prev[jm.twist]
        base = q[jm.base].mean()
        still = np.max(np.abs(q - prev)) < tol
        engaged = q[jm.thumb_flex] > THUMB_CONTACT
        ph = self.phase
        if ph == Phase.TRY_OPEN:
            self.twist_peak = max(self.twist_peak, q[jm.twist])
            if cap_open and still:
                ph = Phase.STOP
            elif dthumb < -tol or (q[jm.twist] < self.twist_peak - 0.05):
                ph = Phase.RETRACT_THUMB
        elif ph == Phase.STOP:
            if not still:
                ph = Phase.RETRACT_THUMB if (dthumb < -tol or dtwist < -tol) else Phase.STOP
                if abs(base) > 0.05:
                    ph = Phase.SLIDE_LEFT if base < 0 else Phase.SLIDE_RIGHT
        elif engaged and (dthumb > tol or dtwist > tol):
            ph = Phase.TRY_OPEN
            self.twist_peak = q[jm.twist]
        elif ph in (Phase.GRASP, Phase.RETRACT_THUMB) and abs(base) > 0.05:
            ph = Phase.SLIDE_LEFT if base < 0 else Phase.SLIDE_RIGHT
        elif ph in (Phase.SLIDE_LEFT, Phase.SLIDE_RIGHT) and abs(base) > 0.05:
            want = Phase.SLIDE_LEFT if base < 0 else Phase.SLIDE_RIGHT
            if want != ph and abs(q[jm.base].mean() - prev[jm.base].mean()) > tol:
                ph = want
        self.phase = ph
        return ph


class Result(IntEnum):
    FAILURE = 0
    PARTIAL = 1
    COMPLETE = 2


@dataclass
class EvalOutcome:
    result: Result
    steps_used: int
    open_step: int | None = None
    stop_step: int | None = None
    reason: str = ""


@dataclass
class JudgeConfig:
    max_steps: int = 900
    grace: int = 20
    hold: int = 10
    still_tol: float = 0.02


def judge(commands: np.ndarray, open_step: int | None, cfg: JudgeConfig = JudgeConfig(),
          reason: str = "") -> EvalOutcome:
    """Classify one trial from its commanded joints (one row per control step).

    Motion counts as stopped at step s when every commanded change over the
    next `hold` steps stays below `still_tol` (the trace may end earlier only
    at max_steps). Complete success needs such an s within `grace` steps of
    the opening.
    """
    commands = np.asarray(commands, dtype=np.float64)
    n = len(commands)
    if open_step is None or open_step >= cfg.max_steps:
        return EvalOutcome(Result.FAILURE, n, None, None, reason or "cap not opened")
    moves = np.zeros(n)
    if n > 1:
        moves[1:] = np.max(np.abs(np.diff(commands, axis=0)), axis=1)
    for s in range(open_step, min(open_step + cfg.grace, n - 1) + 1):
        window = moves[s + 1:s + 1 + cfg.hold]
        if len(window) == 0 or (len(window) < cfg.hold and n < cfg.max_steps):
            continue
        if np.all(window < cfg.still_tol):
            return EvalOutcome(Result.COMPLETE, n, open_step, s, reason)
    return EvalOutcome(Result.PARTIAL, n, open_step, None, reason or "motion continued after opening")


def judge_expert(ep: RawEpisode, config: EnvConfig, cfg: JudgeConfig = JudgeConfig()) -> EvalOutcome:
    """Judge a recorded demonstration from its joint trajectory at the control rate."""
    k = ep.sample_rate // config.control_rate
    tick = ep.meta.get("open_tick")
    open_step = None if not ep.meta.get("opened") or tick is None else -(-int(tick) // k)
    return judge(ep.joints[::k], open_step, cfg)
