"""Post-hoc analyses: PCA of hidden traces, loop gap, attention summaries and
ablation success tables."""
from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .env import Phase, Result


@dataclass
class PCAModel:
    mean: np.ndarray
    axes: np.ndarray
    explained_variance: np.ndarray

    @property
    def n_components(self) -> int:
        return len(self.axes)


def _fix_signs(axes: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Flip each axis so its first non-negligible coefficient is positive."""
    out = axes.copy()
    for k, row in enumerate(out):
        nz = np.flatnonzero(np.abs(row) > tol)
        if len(nz) and row[nz[0]] < 0:
            out[k] = -row
    return out


def pca_fit(traces: Sequence[np.ndarray] | np.ndarray, n_components: int | None = None) -> PCAModel:
    """Eigendecomposition of the covariance of all stacked hidden states."""
    X = np.concatenate([np.atleast_2d(t) for t in traces], axis=0) if not isinstance(traces, np.ndarray) \
        else np.atleast_2d(traces)
    if len(X) < 2:
        raise ValueError("PCA needs at least two samples")
    mean = X.mean(axis=0)
    C = np.cov(X - mean, rowvar=False, bias=False).reshape(X.shape[1], X.shape[1])
    vals, vecs = np.linalg.eigh(C)
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order], 0.0, None)
    axes = _fix_signs(vecs[:, order].T)
    k = n_components or X.shape[1]
    return PCAModel(mean, axes[:k], vals[:k])


def pca_project(model: PCAModel, trace: np.ndarray, k: int = 2) -> np.ndarray:
    return (np.atleast_2d(trace) - model.mean) @ model.axes[:k].T


def pca_reconstruct(model: PCAModel, proj: np.ndarray) -> np.ndarray:
    k = proj.shape[1]
    return proj @ model.axes[:k] + model.mean


def knn_accuracy(points: np.ndarray, labels: np.ndarray, k: int = 5, chunk: int = 1024) -> float:
    """Leave-one-out k-NN accuracy; votes tied on count go to the nearer class."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(points)
    if n <= k:
        raise ValueError(f"need more than k={k} points, got {n}")
    sq = np.sum(points ** 2, axis=1)
    correct = 0
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        d = sq[lo:hi, None] + sq[None, :] - 2.0 * points[lo:hi] @ points.T
        d[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
        nn = np.argsort(d, axis=1, kind="stable")[:, :k]
        for r, row in enumerate(nn):
            votes = Counter(labels[row].tolist())
            top = max(votes.values())
            # first neighbour (nearest) whose class has the top count
            pred = next(labels[j] for j in row if votes[labels[j]] == top)
            correct += int(pred == labels[lo + r])
    return correct / n


def loop_gap(hidden_traces: Sequence[np.ndarray], switches: Sequence[Sequence[tuple[int, int]]]) -> float:
    """Mean ||h(e) - h(s)||^2 over every (s, e) pair of every trace."""
    gaps = [float(np.sum((H[e] - H[s]) ** 2)) for H, pairs in zip(hidden_traces, switches) for s, e in pairs]
    if not gaps:
        raise ValueError("no switch pairs to measure")
    return float(np.mean(gaps))


# ---------------------------------------------------------------------------
# attention


def attention_summary(attn: Sequence[np.ndarray], labels: Sequence[np.ndarray]) -> dict[int, np.ndarray]:
    """Mean attention 4-vector per sub-task label, pooled over traces."""
    A = np.concatenate(attn, axis=0)
    L = np.concatenate(labels)
    return {int(k): A[L == k].mean(axis=0) for k in np.unique(L)}


def post_attempt_mask(labels: np.ndarray, window: int) -> np.ndarray:
    """True on the `window` steps that follow the end of every try-open run."""
    labels = np.asarray(labels)
    mask = np.zeros(len(labels), dtype=bool)
    for t in range(1, len(labels)):
        if labels[t - 1] == Phase.TRY_OPEN and labels[t] != Phase.TRY_OPEN:
            mask[t:t + window] = True
    return mask


def attention_claims(attn: Sequence[np.ndarray], labels: Sequence[np.ndarray], columns: Mapping[str, int],
                     window: int = 20) -> dict[str, float]:
    """Window means used by the qualitative attention checks.

    Returns overall and conditional means of thumb-tactile attention (after
    opening attempts) and joint attention (during slides)."""
    A = np.concatenate(attn, axis=0)
    L = np.concatenate(labels)
    post = np.concatenate([post_attempt_mask(l, window) for l in labels])
    slide = np.isin(L, [Phase.SLIDE_LEFT, Phase.SLIDE_RIGHT])
    th, jo = columns["thumb"], columns["joints"]
    nan = float("nan")
    return {"thumb_mean": float(A[:, th].mean()),
            "thumb_post_attempt": float(A[post, th].mean()) if post.any() else nan,
            "joints_mean": float(A[:, jo].mean()),
            "joints_sliding": float(A[slide, jo].mean()) if slide.any() else nan}


# ---------------------------------------------------------------------------
# ablation table


@dataclass
class TableCell:
    trials: int
    complete: int
    partial: int

    @property
    def complete_rate(self) -> Fraction:
        return Fraction(self.complete, self.trials) if self.trials else Fraction(0)

    @property
    def partial_rate(self) -> Fraction:
        return Fraction(self.partial, self.trials) if self.trials else Fraction(0)


@dataclass
class AblationTable:
    """cells[(model, object_set)]; partial counts include complete successes."""
    cells: dict[tuple[str, str], TableCell]

    def rows(self) -> list[list]:
        out = []
        for (model, objs), c in sorted(self.cells.items(), key=lambda kv: (MODEL_ORDER.get(kv[0][0], 99), kv[0])):
            out.append([model, objs, c.trials, c.complete, c.partial, f"{float(c.complete_rate) * 100:.1f}",
                        f"{float(c.partial_rate) * 100:.1f}"])
        return out

    def write_csv(self, path: str | Path, header_comment: str | None = None) -> None:
        with open(path, "w", newline="") as f:
            if header_comment:
                f.write(f"# {header_comment}\n")
            w = csv.writer(f)
            w.writerow(["model", "objects", "trials", "complete", "partial", "complete_pct", "partial_pct"])
            w.writerows(self.rows())


MODEL_ORDER = {"I": 0, "II": 1, "III": 2, "IV": 3}


def build_table(results: Mapping[str, Iterable[tuple[bool, Result]]]) -> AblationTable:
    """results[model] = iterable of (trained_object, outcome)."""
    cells: dict[tuple[str, str], TableCell] = {}
    for model, rows in results.items():
        for trained, res in rows:
            key = (model, "trained" if trained else "untrained")
            c = cells.setdefault(key, TableCell(0, 0, 0))
            c.trials += 1
            c.complete += int(res == Result.COMPLETE)
            c.partial += int(res >= Result.PARTIAL)
    return AblationTable(cells)


# ---------------------------------------------------------------------------
# plots (optional dependency)


def plot_attention(A: np.ndarray, labels: np.ndarray, names: Sequence[str], path: str | Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 3))
    for k, n in enumerate(names):
        ax.plot(A[:, k], label=n)
    for t in np.flatnonzero(np.diff(labels)) + 1:
        ax.axvline(t, color="gray", lw=0.5)
    ax.set_xlabel("step")
    ax.set_ylabel("attention")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_pca(points: np.ndarray, labels: np.ndarray, path: str | Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 4))
    for k in np.unique(labels):
        m = labels == k
        ax.scatter(points[m, 0], points[m, 1], s=4, label=Phase(int(k)).name.lower())
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    ax.legend(fontsize=7, markerscale=3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
