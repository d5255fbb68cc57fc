"""CER, severity/task breakdowns, relative reduction, and prompt-space diagnostics."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import SEVERITIES, TASKS, UtteranceRecord
from .corpus import severity_of as severity_bucket  # noqa: F401  (half-open buckets at 70/90/135)

TASK_LABELS = {"T1_char": "T.1", "T2_word": "T.2", "T3_sentence": "T.3"}
SEVERITY_LABELS = {s: f"F.{s[1]}" for s in SEVERITIES}


class EmptyReferenceError(ValueError):
    pass


class MissingHypothesisError(KeyError):
    pass


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit costs (two-row DP)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, cb in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb))
        prev = cur
    return prev[-1]


def cer(ref: str, hyp: str) -> tuple[int, float]:
    if not ref:
        raise EmptyReferenceError("reference transcript is empty")
    d = edit_distance(ref, hyp)
    return d, d / len(ref)


def relative_reduction(baseline_cer: float, adapted_cer: float) -> float:
    """Percent reduction of ``adapted_cer`` relative to ``baseline_cer``."""
    if baseline_cer <= 0:
        raise ZeroDivisionError("baseline CER must be > 0")
    return 100.0 * (baseline_cer - adapted_cer) / baseline_cer


@dataclass
class UttResult:
    utt_id: str
    ref: str
    hyp: str
    edits: int
    severity: str
    task: str


@dataclass
class EvalReport:
    overall: float
    by_severity: dict[str, float | None]
    by_task: dict[str, float | None]
    edits: int
    chars: int
    utterances: list[UttResult] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        d = dict(d)
        d["utterances"] = [UttResult(**u) for u in d.get("utterances", [])]
        return cls(**d)

    def row(self) -> list[float | None]:
        return [self.by_severity[s] for s in SEVERITIES] + [self.by_task[t] for t in TASKS] + [self.overall]


def _micro(results: Sequence[UttResult]) -> float | None:
    chars = sum(len(r.ref) for r in results)
    return None if chars == 0 else 100.0 * sum(r.edits for r in results) / chars


def build_report(records: Sequence[UtteranceRecord], hypotheses: Mapping[str, str]) -> EvalReport:
    """Micro-averaged CER (percent) overall and per severity / task bucket."""
    missing = [r.utt_id for r in records if r.utt_id not in hypotheses]
    if missing:
        raise MissingHypothesisError(f"{len(missing)} test utterances lack hypotheses: {missing[:10]}")
    results = []
    for r in records:
        edits, _ = cer(r.transcript, hypotheses[r.utt_id])
        results.append(UttResult(r.utt_id, r.transcript, hypotheses[r.utt_id], edits, r.severity, r.task))
    return EvalReport(
        overall=_micro(results) or 0.0,
        by_severity={s: _micro([u for u in results if u.severity == s]) for s in SEVERITIES},
        by_task={t: _micro([u for u in results if u.task == t]) for t in TASKS},
        edits=sum(u.edits for u in results),
        chars=sum(len(u.ref) for u in results),
        utterances=results,
    )


def render_table(rows: Mapping[str, EvalReport]) -> str:
    """Text table with columns F.1-F.4, T.1-T.3, CER; one decimal, '-' for empty buckets."""
    head = ["System"] + [SEVERITY_LABELS[s] for s in SEVERITIES] + [TASK_LABELS[t] for t in TASKS] + ["CER"]
    width = max([len(head[0])] + [len(k) for k in rows])
    lines = [f"{head[0]:<{width}} | " + " ".join(f"{h:>5}" for h in head[1:5]) + " | "
             + " ".join(f"{h:>5}" for h in head[5:8]) + f" | {head[8]:>5}"]
    lines.append("-" * len(lines[0]))
    for name, rep in rows.items():
        cells = ["    -" if v is None else f"{v:5.1f}" for v in rep.row()]
        lines.append(f"{name:<{width}} | " + " ".join(cells[:4]) + " | " + " ".join(cells[4:7]) + f" | {cells[7]}")
    return "\n".join(lines)


def write_report(path_dir, name: str, report: EvalReport) -> None:
    d = Path(path_dir)
    d.mkdir(parents=True, exist_ok=True)
    (d / f"{name}.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))


# -- prompt space -------------------------------------------------------------------
PROMPT_EXPORT_HEADER = ("key", "speaker_id", "severity", "n_values")


def write_prompt_export(path, keys: Sequence[str], speakers: Sequence[str], severities: Sequence[str],
                        prompts: np.ndarray) -> None:
    """Tab-separated: key, speaker, severity, then the flattened prompt values."""
    flat = np.asarray(prompts).reshape(len(keys), -1)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(list(PROMPT_EXPORT_HEADER[:3]) + [f"v{i}" for i in range(flat.shape[1])])
        for k, s, sev, row in zip(keys, speakers, severities, flat):
            w.writerow([k, s, sev] + [repr(float(v)) for v in row])


def read_prompt_export(path) -> tuple[list[str], list[str], list[str], np.ndarray]:
    keys, speakers, sev, rows = [], [], [], []
    with open(path, newline="") as f:
        r = csv.reader(f, delimiter="\t")
        next(r)
        for line in r:
            keys.append(line[0])
            speakers.append(line[1])
            sev.append(line[2])
            rows.append([float(v) for v in line[3:]])
    return keys, speakers, sev, np.array(rows)


@dataclass
class Projection:
    coords: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    total_variance: float


def pca_2d(x: np.ndarray, n_components: int = 2, n_iter: int = 500, tol: float = 1e-12, seed: int = 0) -> Projection:
    """Mean-centred PCA by power iteration with deflation on the covariance.

    Signs are fixed so the largest-magnitude loading of each component is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 3:
        raise ValueError("need at least 3 rows for a projection")
    xc = x - x.mean(axis=0)
    total = float((xc**2).sum() / (x.shape[0] - 1))
    # work in the smaller Gram space
    gram_side = x.shape[0] <= x.shape[1]
    c = (xc @ xc.T if gram_side else xc.T @ xc) / (x.shape[0] - 1)
    rng = np.random.default_rng(seed)
    vecs, vals = [], []
    for _ in range(n_components):
        v = rng.standard_normal(c.shape[0])
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(n_iter):
            w = c @ v
            for u in vecs:
                w -= (u @ w) * u
            nrm = np.linalg.norm(w)
            if nrm < 1e-300:
                lam = 0.0
                break
            w /= nrm
            done = np.abs(w - v).max() < tol
            v = w
            lam = float(v @ c @ v)
            if done:
                break
        vecs.append(v)
        vals.append(max(lam, 0.0))
    V = np.array(vecs)
    if gram_side:
        comps = []
        for u, lam in zip(V, vals):
            d = xc.T @ u
            n = np.linalg.norm(d)
            comps.append(d / n if n > 1e-12 and lam > 0 else np.zeros(x.shape[1]))
        comps = np.array(comps)
    else:
        comps = np.array([u if lam > 0 else np.zeros_like(u) for u, lam in zip(V, vals)])
    for i in range(len(comps)):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return Projection(xc @ comps.T, comps, np.array(vals), total)


def prompt_projection(path) -> tuple[list[tuple[float, float, str, str]], Projection]:
    keys, speakers, sev, x = read_prompt_export(path)
    proj = pca_2d(x)
    rows = [(float(a), float(b), s, v) for (a, b), s, v in zip(proj.coords, speakers, sev)]
    return rows, proj


def write_projection(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(["x", "y", "speaker_id", "severity"])
        for r in rows:
            w.writerow([f"{r[0]:.6g}", f"{r[1]:.6g}", r[2], r[3]])


def _softmax_regression(x: np.ndarray, y: np.ndarray, k: int, steps: int, lr: float, l2: float) -> np.ndarray:
    n, d = x.shape
    W = np.zeros((d + 1, k))
    xb = np.hstack([x, np.ones((n, 1))])
    onehot = np.eye(k)[y]
    m = np.zeros_like(W)
    v = np.zeros_like(W)
    for t in range(1, steps + 1):
        z = xb @ W
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = xb.T @ (p - onehot) / n + l2 * np.vstack([W[:-1], np.zeros((1, k))])
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        W -= lr * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    return W


def linear_probe(features: np.ndarray, labels: Sequence, n_folds: int = 5, steps: int = 300, lr: float = 0.05,
                 l2: float = 1e-3, seed: int = 0) -> float:
    """Stratified k-fold accuracy of a multinomial logistic regression trained by Adam for a fixed budget."""
    x = np.asarray(features, dtype=np.float64).reshape(len(labels), -1)
    classes, y = np.unique(np.asarray(labels), return_inverse=True)
    if len(classes) < 2:
        raise ValueError("linear probe needs at least 2 classes")
    counts = np.bincount(y)
    if counts.min() < 2:
        raise ValueError(f"class {classes[np.argmin(counts)]!r} has fewer than 2 samples")
    rng = np.random.default_rng(seed)
    fold = np.empty(len(y), dtype=int)
    for c in range(len(classes)):
        idx = rng.permutation(np.flatnonzero(y == c))
        fold[idx] = np.arange(idx.size) % n_folds
    correct = 0
    for f in range(n_folds):
        test = fold == f
        train = ~test
        if not test.any():
            continue
        mu = x[train].mean(axis=0)
        sd = x[train].std(axis=0) + 1e-6
        W = _softmax_regression((x[train] - mu) / sd, y[train], len(classes), steps, lr, l2)
        xt = np.hstack([(x[test] - mu) / sd, np.ones((test.sum(), 1))])
        correct += int(((xt @ W).argmax(axis=1) == y[test]).sum())
    return correct / len(y)


def shuffled_probe(features: np.ndarray, labels: Sequence, n_shuffles: int = 5, seed: int = 0, **kw) -> tuple[float, float]:
    """Mean and std of probe accuracy over label permutations (the null control)."""
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    accs = [linear_probe(features, rng.permutation(labels), seed=seed + i, **kw) for i in range(n_shuffles)]
    return float(np.mean(accs)), float(np.std(accs))


def binomial_sigma(p: float, n: int) -> float:
    return float(np.sqrt(p * (1 - p) / n))
