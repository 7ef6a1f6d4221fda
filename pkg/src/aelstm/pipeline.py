"""Pipeline stages. In-memory functions do the work; the `stage_*` wrappers
read and write the run directory and are what the command line calls."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .analysis import (attention_claims, attention_summary, build_table, knn_accuracy, loop_gap, pca_fit,
                       pca_project)
from .attention import EXPORT_ORDER, trace_rows
from .autoencoder import AEConfig, Autoencoder, TrainCurve, train_ae
from .config import MODELS, RunConfig, model_id
from .core import Checkpoint
from .env import (EvalOutcome, JudgeConfig, Phase, Result, Scenario, evaluation_scenarios, generate_dataset,
                  load_scenarios, save_scenarios, training_scenarios)
from .policy import (Featurizer, LossConfig, Policy, PolicyConfig, PolicyData, TrainSettings, TrialTrace,
                     default_loss_weights, rollout, train_policy)
from .preprocess import (NormalizationStats, ProcessedEpisode, RawEpisode, load_episode, modality_slices,
                         prepare_episodes, save_episode)

log = logging.getLogger(__name__)

OUTPUT_ENV = "AELSTM_OUTPUT"


class DependencyError(FileNotFoundError):
    """An upstream artifact required by a stage is missing."""


# ---------------------------------------------------------------------------
# in-memory stages


@dataclass
class Data:
    train: list[ProcessedEpisode]
    val: list[ProcessedEpisode]
    stats: NormalizationStats


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    n_val = max(1, int(round(n * val_fraction)))
    perm = np.random.default_rng(seed).permutation(n)
    val = sorted(perm[:n_val].tolist())
    return [i for i in range(n) if i not in set(val)], val


def prepare_data(cfg: RunConfig, raw: Sequence[RawEpisode]) -> Data:
    p = cfg.preprocess
    tr_idx, va_idx = split_indices(len(raw), p.val_fraction, cfg.env.seed)
    train, stats = prepare_episodes([raw[i] for i in tr_idx], p.control_rate, p.clip_bound, None, p.horizon,
                                    cfg.env.whole_layout, cfg.env.thumb_layout)
    val, _ = prepare_episodes([raw[i] for i in va_idx], p.control_rate, p.clip_bound, stats, p.horizon)
    return Data(train, val, stats)


def train_autoencoders(cfg: RunConfig, data: Data, which: Sequence[str] = ("whole", "thumb"),
                       seed: int | None = None) -> dict[str, tuple[Autoencoder, TrainCurve]]:
    a = cfg.autoencoder
    seed = cfg.seed if seed is None else seed
    sl = modality_slices(cfg.env.n_joints, cfg.env.whole_dim, cfg.env.thumb_dim)
    Xtr = np.concatenate([e.inputs for e in data.train])
    Xva = np.concatenate([e.inputs for e in data.val])
    out = {}
    for k, name in enumerate(which):
        hidden = a.whole_hidden if name == "whole" else a.thumb_hidden
        c = AEConfig(sl[name].stop - sl[name].start, tuple(hidden), a.latent_dim)
        out[name] = train_ae(Xtr[:, sl[name]], Xva[:, sl[name]], c, a.epochs, seed * 1000 + k, a.lr,
                             a.batch_size, f"ae_{name}", val_every=a.val_every)
    return out


def make_policy(cfg: RunConfig, attention: bool, seed: int | None = None) -> Policy:
    p = cfg.policy
    pc = PolicyConfig(cfg.env.n_joints, cfg.autoencoder.latent_dim, p.hidden_size, attention, p.attention_hidden)
    return Policy(pc, cfg.seed if seed is None else seed)


def loss_config(cfg: RunConfig, policy: Policy, constraint: bool, gamma: float | None = None) -> LossConfig:
    g = (cfg.policy.gamma if gamma is None else gamma) if constraint else 0.0
    w = default_loss_weights(policy.layout, cfg.env.n_joints, cfg.policy.strong_weight)
    return LossConfig(g, w, cfg.preprocess.horizon, cfg.policy.constraint_mode)


def train_model(cfg: RunConfig, data: Data, aes: dict[str, Autoencoder], attention: bool, constraint: bool,
                gamma: float | None = None, seed: int | None = None, epochs: int | None = None,
                progress=None) -> tuple[Policy, Featurizer, TrainCurve, LossConfig]:
    seed = cfg.seed if seed is None else seed
    pol = make_policy(cfg, attention, seed)
    feat = Featurizer(data.stats, aes["whole"], aes.get("thumb") if attention else None, pol.layout)
    lc = loss_config(cfg, pol, constraint, gamma)
    p = cfg.policy
    st = TrainSettings(epochs if epochs is not None else p.epochs, p.lr, p.batch_size, tuple(cfg.preprocess.noise),
                       cfg.preprocess.noise_mode, p.val_every, p.optimizer)
    curve = train_policy(pol, PolicyData.build(data.train, feat, lc.constraint_mode),
                         PolicyData.build(data.val, feat, lc.constraint_mode), feat, lc, st, seed, progress)
    return pol, feat, curve, lc


def judge_config(cfg: RunConfig) -> JudgeConfig:
    e = cfg.evaluate
    return JudgeConfig(e.max_steps, e.grace, e.hold, e.still_tol)


def _rollout_chunk(args):
    return rollout(*args)


def evaluate_model(cfg: RunConfig, policy: Policy, feat: Featurizer, scenarios: Sequence[Scenario] | None = None,
                   jobs: int | None = None) -> list[tuple[EvalOutcome, TrialTrace]]:
    """Closed-loop trials; with jobs > 1 the trial list is split into contiguous chunks."""
    scenarios = list(scenarios if scenarios is not None else evaluation_scenarios(cfg.env))
    jobs = max(1, cfg.evaluate.jobs if jobs is None else jobs)
    jc = judge_config(cfg)
    if jobs == 1:
        return rollout(scenarios, cfg.env, policy, feat, jc.max_steps, jc)
    chunks = [c.tolist() for c in np.array_split(np.arange(len(scenarios)), jobs) if len(c)]
    args = [([scenarios[i] for i in c], cfg.env, policy, feat, jc.max_steps, jc) for c in chunks]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        parts = list(ex.map(_rollout_chunk, args))
    return [r for part in parts for r in part]


def validation_loop_gap(policy: Policy, feat: Featurizer, data: Data, mode: str = "switch") -> float:
    vd = PolicyData.build(data.val, feat, mode)
    hs, pairs = [], []
    for s in vd.sequences(feat):
        _, H, _ = policy.run(s.X[:, None, :])
        hs.append(H[:, 0])
        pairs.append(s.pairs)
    return loop_gap(hs, pairs)


# ---------------------------------------------------------------------------
# run directory


def git_blob_hash(path: str | Path) -> str:
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


class RunDir:
    def __init__(self, root: str | Path, cfg: RunConfig):
        self.root = Path(root)
        self.cfg = cfg
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, *parts: str) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def need(self, *parts: str) -> Path:
        p = self.root.joinpath(*parts)
        if not p.exists():
            raise DependencyError(f"missing upstream artifact {p}")
        return p

    def record(self, path: Path, stage: str) -> None:
        entry = {"path": str(path.relative_to(self.root)), "stage": stage, "config_hash": self.cfg.hash,
                 "version": __version__, "blob": git_blob_hash(path), "time": time.time()}
        with open(self.root / "manifest.jsonl", "a") as f:
            f.write(json.dumps(entry, sort_keys=True) + "\n")

    @property
    def header(self) -> str:
        return f"config_hash={self.cfg.hash} version=aelstm-{__version__}"


def _write_csv(path: Path, header: str, columns: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"# {header}\n")
        w = csv.writer(f)
        w.writerow(columns)
        w.writerows(rows)


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(line for line in f if not line.startswith("#")))


def stage_generate(run: RunDir) -> None:
    cfg = run.cfg
    run.cfg.save(run.path("config.yaml"))
    run.record(run.root / "config.yaml", "generate")
    sc = training_scenarios(cfg.env)
    save_scenarios(sc, run.path("data", "train_scenarios.csv"))
    save_scenarios(evaluation_scenarios(cfg.env), run.path("data", "eval_scenarios.csv"))
    for p in ("train_scenarios.csv", "eval_scenarios.csv"):
        run.record(run.root / "data" / p, "generate")
    for k, ep in enumerate(generate_dataset(sc, cfg.env)):
        ep.meta["config_hash"] = cfg.hash
        p = run.path("data", "episodes", f"ep_{k:03d}.csv")
        save_episode(ep, p)
        run.record(p, "generate")


def load_raw(run: RunDir) -> list[RawEpisode]:
    n = len(load_scenarios(run.need("data", "train_scenarios.csv")))
    return [load_episode(run.need("data", "episodes", f"ep_{k:03d}.csv")) for k in range(n)]


def load_data(run: RunDir) -> Data:
    data = prepare_data(run.cfg, load_raw(run))
    stats_path = run.root / "models" / "scaler.json"
    if stats_path.exists():
        data.stats = NormalizationStats.load(stats_path)
    return data


def stage_train_ae(run: RunDir, which: Sequence[str] = ("whole", "thumb")) -> dict[str, float]:
    data = prepare_data(run.cfg, load_raw(run))
    data.stats.save(run.path("models", "scaler.json"))
    run.record(run.root / "models" / "scaler.json", "train-ae")
    out = {}
    for name, (ae, curve) in train_autoencoders(run.cfg, data, which).items():
        p = run.path("models", f"ae_{name}.ckpt")
        ae.checkpoint(run.cfg.hash).save(p)
        run.record(p, "train-ae")
        out[name] = curve.best_val
    return out


def load_aes(run: RunDir, thumb: bool = True) -> dict[str, Autoencoder]:
    out = {"whole": Autoencoder.from_checkpoint(Checkpoint.load(run.need("models", "ae_whole.ckpt")))}
    if thumb:
        out["thumb"] = Autoencoder.from_checkpoint(Checkpoint.load(run.need("models", "ae_thumb.ckpt")))
    return out


def stage_train_policy(run: RunDir, attention: bool, constraint: bool, gamma: float | None = None) -> str:
    run.need("models", "scaler.json")
    aes = load_aes(run, thumb=attention)
    data = load_data(run)
    mid = model_id(attention, constraint)
    pol, feat, curve, lc = train_model(run.cfg, data, aes, attention, constraint, gamma)
    p = run.path("models", f"policy_{mid}.ckpt")
    pol.checkpoint(run.cfg.hash, extra={"model": mid, "gamma": lc.gamma, "best_epoch": curve.best_epoch}).save(p)
    run.record(p, "train-policy")
    c = run.path("models", f"policy_{mid}_curve.csv")
    val = dict(zip(curve.val_epochs, curve.val))
    _write_csv(c, run.header, ["epoch", "train_loss", "val_loss"],
               [[e, repr(t), repr(val[e]) if e in val else ""] for e, t in enumerate(curve.train)])
    run.record(c, "train-policy")
    return mid


def load_policy(run: RunDir, mid: str) -> tuple[Policy, Featurizer]:
    pol = Policy.from_checkpoint(Checkpoint.load(run.need("models", f"policy_{mid}.ckpt")))
    stats = NormalizationStats.load(run.need("models", "scaler.json"))
    aes = load_aes(run, thumb=pol.config.attention)
    return pol, Featurizer(stats, aes["whole"], aes.get("thumb"), pol.layout)


def stage_evaluate(run: RunDir, mid: str, jobs: int | None = None) -> list[EvalOutcome]:
    pol, feat = load_policy(run, mid)
    sc_path = run.root / "data" / "eval_scenarios.csv"
    scenarios = load_scenarios(sc_path) if sc_path.exists() else None
    results = evaluate_model(run.cfg, pol, feat, scenarios, jobs)
    rows = []
    for k, (res, tr) in enumerate(results):
        s = tr.scenario
        rows.append([mid, f"{s.object_id}@{s.initial_pos:+.2f}#{s.trial}", int(s.trained), res.result.name,
                     res.steps_used, "" if res.open_step is None else res.open_step, res.reason])
        base = f"trial_{k:03d}"
        hp = run.path("traces", mid, f"{base}_hidden.csv")
        _write_csv(hp, run.header, ["t", "subtask_label", *[f"h_{i}" for i in range(tr.hidden.shape[1])]],
                   [[t, int(tr.labels[t]), *map(repr, tr.hidden[t].tolist())] for t in range(len(tr.hidden))])
        run.record(hp, "evaluate")
        if tr.attention is not None:
            ap = run.path("traces", mid, f"{base}_attention.csv")
            _write_csv(ap, run.header, ["t", "A_joint", "A_torque", "A_whole_tactile", "A_thumb_tactile",
                                        "subtask_label"], trace_rows(tr.attention, tr.labels, pol.layout))
            run.record(ap, "evaluate")
    rp = run.path("results", f"{mid}_results.csv")
    _write_csv(rp, run.header, ["model_id", "scenario", "trained", "result", "steps", "open_step", "reason"], rows)
    run.record(rp, "evaluate")
    return [r for r, _ in results]


# ---------------------------------------------------------------------------
# analysis over exported files


def read_hidden_traces(trace_dir: Path) -> tuple[list[np.ndarray], list[np.ndarray]]:
    files = sorted(trace_dir.glob("*_hidden.csv"))
    if not files:
        raise DependencyError(f"no hidden-state traces under {trace_dir}")
    H, L = [], []
    for f in files:
        rows = _read_csv(f)
        L.append(np.array([int(r["subtask_label"]) for r in rows]))
        H.append(np.array([[float(v) for k, v in r.items() if k.startswith("h_")] for r in rows]))
    return H, L


def read_attention_traces(trace_dir: Path) -> tuple[list[np.ndarray], list[np.ndarray]]:
    files = sorted(trace_dir.glob("*_attention.csv"))
    if not files:
        raise DependencyError(f"no attention traces under {trace_dir}")
    cols = ["A_joint", "A_torque", "A_whole_tactile", "A_thumb_tactile"]
    A, L = [], []
    for f in files:
        rows = _read_csv(f)
        A.append(np.array([[float(r[c]) for c in cols] for r in rows]))
        L.append(np.array([int(r["subtask_label"]) for r in rows]))
    return A, L


def analyze_pca(trace_dir: Path, out: Path, per_trial: bool = False, header: str = "") -> float:
    """Writes (trial, t, subtask_label, pc1, pc2); returns 5-NN accuracy in the projection."""
    H, L = read_hidden_traces(trace_dir)
    rows, pts = [], []
    model = None if per_trial else pca_fit(H)
    for k, (h, l) in enumerate(zip(H, L)):
        m = pca_fit(h) if per_trial else model
        P = pca_project(m, h)
        pts.append(P)
        rows += [[k, t, int(l[t]), repr(float(P[t, 0])), repr(float(P[t, 1]))] for t in range(len(h))]
    _write_csv(out, header, ["trial", "t", "subtask_label", "pc1", "pc2"], rows)
    return knn_accuracy(np.concatenate(pts), np.concatenate(L))


def analyze_attention(trace_dir: Path, out: Path, header: str = "") -> dict[str, float]:
    """Per-sub-task mean attention (export column order) plus the window claims."""
    A, L = read_attention_traces(trace_dir)
    summ = attention_summary(A, L)
    rows = [[Phase(k).name.lower(), *[repr(float(v)) for v in summ[k]]] for k in sorted(summ)]
    claims = attention_claims(A, L, {n: i for i, n in enumerate(EXPORT_ORDER)})
    rows += [[k, repr(v), "", "", ""] for k, v in claims.items()]
    _write_csv(out, header, ["subtask", "A_joint", "A_torque", "A_whole_tactile", "A_thumb_tactile"], rows)
    return claims


def analyze_table(results_dir: Path, out: Path, header: str = ""):
    files = sorted(results_dir.glob("*_results.csv"))
    if not files:
        raise DependencyError(f"no result files under {results_dir}")
    res: dict[str, list] = {}
    for f in files:
        for r in _read_csv(f):
            res.setdefault(r["model_id"], []).append((bool(int(r["trained"])), Result[r["result"]]))
    table = build_table(res)
    table.write_csv(out, header)
    return table


def stage_reproduce_all(run: RunDir, jobs: int | None = None) -> None:
    stage_generate(run)
    stage_train_ae(run)
    for mid, (att, con) in MODELS.items():
        stage_train_policy(run, att, con)
        stage_evaluate(run, mid, jobs)
    out = run.path("analysis", "table.csv")
    analyze_table(run.root / "results", out, run.header)
    run.record(out, "analyze")
    out = run.path("analysis", "pca_I.csv")
    analyze_pca(run.root / "traces" / "I", out, header=run.header)
    run.record(out, "analyze")
    out = run.path("analysis", "attention_I.csv")
    analyze_attention(run.root / "traces" / "I", out, header=run.header)
    run.record(out, "analyze")


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))
