"""Episode containers, the episode file format, and the normalization pipeline.

Pipeline order for training data: resample -> clip_tactile -> fit_scaler
(training split only) -> apply_scaler -> make_targets -> add_noise.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

LOW, HIGH = 0.1, 0.9


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TactileLayout:
    """Column layout of a tactile stream: patches x rows x cols taxels, 3 axes.

    Column index of (patch, row, col, axis) is ((patch*rows + row)*cols + col)*3 + axis.
    Axis 0 and 1 are shear (x, y), axis 2 is normal force.
    """

    patches: int
    rows: int
    cols: int
    axes: int = 3

    @property
    def dim(self) -> int:
        return self.patches * self.rows * self.cols * self.axes

    def group_of_columns(self) -> np.ndarray:
        """Group id (patch*axes + axis) for every column."""
        idx = np.arange(self.dim)
        axis = idx % self.axes
        patch = idx // (self.rows * self.cols * self.axes)
        return patch * self.axes + axis

    @property
    def n_groups(self) -> int:
        return self.patches * self.axes


@dataclass
class RawEpisode:
    sample_rate: int
    joints: np.ndarray
    torques: np.ndarray
    tactile_whole: np.ndarray
    tactile_thumb: np.ndarray
    subtask_labels: np.ndarray
    switch_marks: list[int]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        T = len(self.joints)
        for name in ("torques", "tactile_whole", "tactile_thumb", "subtask_labels"):
            if len(getattr(self, name)) != T:
                raise ConfigError(f"stream {name} has length {len(getattr(self, name))}, joints have {T}")
        marks = list(self.switch_marks)
        if any(b <= a for a, b in zip(marks, marks[1:])) or any(m < 0 or m >= T for m in marks):
            raise ConfigError(f"switch_marks must be strictly increasing and inside [0, {T}): {marks}")

    @property
    def length(self) -> int:
        return len(self.joints)

    @property
    def n_joints(self) -> int:
        return self.joints.shape[1]


def resample(ep: RawEpisode, target_rate: int) -> RawEpisode:
    """Decimate to `target_rate`, keeping frames 0, k, 2k, ...

    Switch marks move to the first kept frame at or after the raw mark.
    """
    if target_rate <= 0 or ep.sample_rate % target_rate:
        raise ConfigError(f"target rate {target_rate} Hz does not divide {ep.sample_rate} Hz")
    k = ep.sample_rate // target_rate
    if k == 1:
        return ep
    n = -(-ep.length // k)
    marks: list[int] = []
    for m in ep.switch_marks:
        r = min(-(-m // k), n - 1)
        if not marks or r > marks[-1]:
            marks.append(r)
    return RawEpisode(target_rate, ep.joints[::k], ep.torques[::k], ep.tactile_whole[::k],
                      ep.tactile_thumb[::k], ep.subtask_labels[::k], marks, dict(ep.meta))


def clip_tactile(ep: RawEpisode, bound: float = 1000.0) -> RawEpisode:
    if bound <= 0:
        raise ConfigError("clip bound must be positive")
    return replace(ep, tactile_whole=np.clip(ep.tactile_whole, -bound, bound),
                   tactile_thumb=np.clip(ep.tactile_thumb, -bound, bound))


@dataclass
class NormalizationStats:
    """Per-group min/max. Every column maps to one group of its stream."""

    n_joints: int
    whole_layout: TactileLayout
    thumb_layout: TactileLayout
    group_min: np.ndarray
    group_max: np.ndarray
    clip_bound: float = 1000.0

    @property
    def column_groups(self) -> np.ndarray:
        J = self.n_joints
        w = self.whole_layout.group_of_columns() + 2 * J
        t = self.thumb_layout.group_of_columns() + 2 * J + self.whole_layout.n_groups
        return np.concatenate([np.arange(2 * J), w, t])

    @property
    def degenerate(self) -> np.ndarray:
        return ~(self.group_max > self.group_min)

    def column_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        g = self.column_groups
        return self.group_min[g], self.group_max[g]

    def to_dict(self) -> dict:
        return {"n_joints": self.n_joints,
                "whole_layout": [self.whole_layout.patches, self.whole_layout.rows, self.whole_layout.cols,
                                 self.whole_layout.axes],
                "thumb_layout": [self.thumb_layout.patches, self.thumb_layout.rows, self.thumb_layout.cols,
                                 self.thumb_layout.axes],
                "group_min": [float.hex(float(v)) for v in self.group_min],
                "group_max": [float.hex(float(v)) for v in self.group_max],
                "clip_bound": self.clip_bound}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(d["n_joints"], TactileLayout(*d["whole_layout"]), TactileLayout(*d["thumb_layout"]),
                   np.array([float.fromhex(v) for v in d["group_min"]]),
                   np.array([float.fromhex(v) for v in d["group_max"]]), d["clip_bound"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "NormalizationStats":
        return cls.from_dict(json.loads(Path(path).read_text()))


def stack_channels(ep: RawEpisode) -> np.ndarray:
    return np.concatenate([ep.joints, ep.torques, ep.tactile_whole, ep.tactile_thumb], axis=1)


def fit_scaler(episodes: Sequence[RawEpisode], whole_layout: TactileLayout, thumb_layout: TactileLayout,
               clip_bound: float = 1000.0) -> NormalizationStats:
    if not episodes:
        raise ConfigError("fit_scaler needs at least one episode")
    J = episodes[0].n_joints
    if episodes[0].tactile_whole.shape[1] != whole_layout.dim or episodes[0].tactile_thumb.shape[1] != thumb_layout.dim:
        raise ConfigError("tactile widths do not match the declared layouts")
    data = np.concatenate([stack_channels(e) for e in episodes], axis=0)
    stats = NormalizationStats(J, whole_layout, thumb_layout, np.zeros(0), np.zeros(0), clip_bound)
    groups = stats.column_groups
    n = int(groups.max()) + 1
    col_min, col_max = data.min(axis=0), data.max(axis=0)
    gmin = np.full(n, np.inf)
    gmax = np.full(n, -np.inf)
    np.minimum.at(gmin, groups, col_min)
    np.maximum.at(gmax, groups, col_max)
    stats.group_min, stats.group_max = gmin, gmax
    if stats.degenerate.any():
        warnings.warn(f"constant channel groups {np.flatnonzero(stats.degenerate).tolist()} map to 0.5")
    return stats


def scale_values(values: np.ndarray, stats: NormalizationStats, columns: slice | np.ndarray = slice(None)) -> np.ndarray:
    lo, hi = stats.column_bounds()
    lo, hi = lo[columns], hi[columns]
    span = hi - lo
    ok = span > 0
    safe = np.where(ok, span, 1.0)
    out = LOW + (HIGH - LOW) * (values - lo) / safe
    return np.where(ok, out, 0.5)


def unscale(values: np.ndarray, stats: NormalizationStats, columns: slice | np.ndarray = slice(None)) -> np.ndarray:
    """Inverse of the min->0.1, max->0.9 map (degenerate columns return their constant)."""
    lo, hi = stats.column_bounds()
    lo, hi = lo[columns], hi[columns]
    return lo + (values - LOW) * (hi - lo) / (HIGH - LOW)


@dataclass
class ProcessedEpisode:
    inputs: np.ndarray
    targets: np.ndarray | None
    subtask_labels: np.ndarray
    switch_marks: list[int]
    meta: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return len(self.inputs)


def apply_scaler(ep: RawEpisode, stats: NormalizationStats) -> ProcessedEpisode:
    x = scale_values(stack_channels(ep), stats)
    return ProcessedEpisode(x, None, ep.subtask_labels.copy(), list(ep.switch_marks), dict(ep.meta))


def make_targets(ep: ProcessedEpisode, horizon: int = 2) -> ProcessedEpisode:
    if ep.length <= horizon:
        raise ConfigError(f"episode of length {ep.length} is too short for horizon {horizon}")
    T = ep.length - horizon
    marks = [m for m in ep.switch_marks if m < T]
    return ProcessedEpisode(ep.inputs[:T].copy(), ep.inputs[horizon:].copy(), ep.subtask_labels[:T].copy(),
                            marks, dict(ep.meta))


def modality_slices(n_joints: int, whole_dim: int, thumb_dim: int) -> dict[str, slice]:
    J = n_joints
    return {"joints": slice(0, J), "torques": slice(J, 2 * J),
            "whole": slice(2 * J, 2 * J + whole_dim),
            "thumb": slice(2 * J + whole_dim, 2 * J + whole_dim + thumb_dim)}


def add_noise(ep: ProcessedEpisode, sigmas: Sequence[float], slices: dict[str, slice],
              rng: np.random.Generator | int) -> ProcessedEpisode:
    """Gaussian noise on inputs only; sigmas ordered (joints, torques, whole, thumb)."""
    if len(sigmas) != 4:
        raise ConfigError("need one noise sigma per modality (4)")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    x = ep.inputs.copy()
    for name, s in zip(("joints", "torques", "whole", "thumb"), sigmas):
        if s > 0:
            sl = slices[name]
            x[:, sl] += rng.normal(0.0, s, size=x[:, sl].shape)
    return replace(ep, inputs=x)


# ---------------------------------------------------------------------------
# episode file: one JSON header line, then one CSV record per timestep
#   t, subtask_label, joints..., torques..., tactile_whole..., tactile_thumb...
# floats are written with repr() so a round trip is exact.

EPISODE_FORMAT = "aelstm-episode"


def save_episode(ep: RawEpisode, path: str | Path) -> None:
    header = {"format": EPISODE_FORMAT, "version": 1, "sample_rate": ep.sample_rate, "T": ep.length,
              "J": ep.n_joints, "D_w": ep.tactile_whole.shape[1], "D_t": ep.tactile_thumb.shape[1],
              "switch_marks": list(map(int, ep.switch_marks)), "meta": ep.meta}
    data = stack_channels(ep)
    lines = [json.dumps(header, sort_keys=True)]
    for t in range(ep.length):
        lines.append(",".join([str(t), str(int(ep.subtask_labels[t]))] + [repr(float(v)) for v in data[t]]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_episode(path: str | Path) -> RawEpisode:
    text = Path(path).read_text().splitlines()
    header = json.loads(text[0])
    if header.get("format") != EPISODE_FORMAT:
        raise ConfigError(f"{path}: not an episode file")
    rows = np.array([[float(v) for v in line.split(",")] for line in text[1:] if line])
    J, Dw, Dt = header["J"], header["D_w"], header["D_t"]
    if rows.shape != (header["T"], 2 + 2 * J + Dw + Dt):
        raise ConfigError(f"{path}: record shape {rows.shape} disagrees with header")
    d = rows[:, 2:]
    return RawEpisode(header["sample_rate"], d[:, :J], d[:, J:2 * J], d[:, 2 * J:2 * J + Dw],
                      d[:, 2 * J + Dw:], rows[:, 1].astype(int), header["switch_marks"], header["meta"])


def prepare_episodes(raw: Sequence[RawEpisode], control_rate: int, clip_bound: float = 1000.0,
                     stats: NormalizationStats | None = None, horizon: int = 2,
                     whole_layout: TactileLayout | None = None, thumb_layout: TactileLayout | None = None
                     ) -> tuple[list[ProcessedEpisode], NormalizationStats]:
    """Resample, clip, scale and build targets. Fits the scaler when `stats` is None."""
    eps = [clip_tactile(resample(e, control_rate), clip_bound) for e in raw]
    if stats is None:
        if whole_layout is None or thumb_layout is None:
            raise ConfigError("fitting a scaler needs both tactile layouts")
        stats = fit_scaler(eps, whole_layout, thumb_layout, clip_bound)
    return [make_targets(apply_scaler(e, stats), horizon) for e in eps], stats
