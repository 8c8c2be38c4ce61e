"""Downstream evaluation: node classification and link prediction.

Metric implementations are rank/threshold-exact so they can be checked against
brute-force oracles: ROC-AUC is the tied-rank statistic (ties count 0.5),
PR-AUC is the step integral of the precision-recall curve over every distinct
threshold, F1 comes straight from the confusion matrix.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .graph import GraphError, HtrnGraph
from .util import derived_rng, sha256_text, stable_seed

log = logging.getLogger(__name__)


# --- metrics ---


def roc_auc(pos_scores: Sequence[float], neg_scores: Sequence[float]) -> float:
    """Probability a positive outranks a negative, ties counted half."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise GraphError("ROC-AUC undefined: need both positive and negative scores")
    ranks = rankdata(np.concatenate([pos, neg]))
    pos_rank_sum = ranks[: pos.size].sum()
    return float((pos_rank_sum - pos.size * (pos.size + 1) / 2.0) / (pos.size * neg.size))


def pr_auc(pos_scores: Sequence[float], neg_scores: Sequence[float]) -> float:
    """Step integral of precision over recall at every distinct threshold."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise GraphError("PR-AUC undefined: need both positive and negative scores")
    scores = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(pos.size), np.zeros(neg.size)])
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    tp = np.cumsum(labels)
    fp = np.cumsum(1.0 - labels)
    # keep only the last entry of each tied-score block: predictions are
    # thresholded at distinct score values
    last = np.flatnonzero(np.diff(scores, append=-np.inf))
    precision = tp[last] / (tp[last] + fp[last])
    recall = tp[last] / pos.size
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev_recall) * precision).sum())


def f1_binary(preds: Sequence[int], labels: Sequence[int]) -> float:
    """F1 of the positive class; 0 when no positive predictions or labels."""
    p = np.asarray(preds, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    tp = int(((p == 1) & (y == 1)).sum())
    fp = int(((p == 1) & (y == 0)).sum())
    fn = int(((p == 0) & (y == 1)).sum())
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def f1_multiclass(
    y_true: Sequence[int], y_pred: Sequence[int], labels: Sequence[int] | None = None
) -> tuple[float, float]:
    """(micro, macro) F1 from the confusion matrix."""
    t = np.asarray(y_true, dtype=np.int64)
    p = np.asarray(y_pred, dtype=np.int64)
    if labels is None:
        labels = sorted(set(t.tolist()) | set(p.tolist()))
    tp_all = fp_all = fn_all = 0
    per_class = []
    for c in labels:
        tp = int(((p == c) & (t == c)).sum())
        fp = int(((p == c) & (t != c)).sum())
        fn = int(((p != c) & (t == c)).sum())
        tp_all, fp_all, fn_all = tp_all + tp, fp_all + fp, fn_all + fn
        denom = 2 * tp + fp + fn
        per_class.append(2.0 * tp / denom if denom else 0.0)
    micro_denom = 2 * tp_all + fp_all + fn_all
    micro = 2.0 * tp_all / micro_denom if micro_denom else 0.0
    macro = float(np.mean(per_class)) if per_class else 0.0
    return micro, macro


# --- linear classifier (hinge loss, one-vs-rest) ---


class LinearClassifier:
    """Linear SVM stand-in: one-vs-rest hinge loss with L2, full-batch GD.

    Deterministic (zero init, fixed schedule); stops at 200 epochs or when the
    gradient norm falls below 1e-6.
    """

    def __init__(self, reg: float = 1e-3, lr: float = 0.5, epochs: int = 200):
        self.reg = reg
        self.lr = lr
        self.epochs = epochs
        self.classes_: list[int] = []

    def fit(self, X: np.ndarray, y: np.ndarray) -> "LinearClassifier":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        self._mu = X.mean(axis=0)
        self._sd = X.std(axis=0)
        self._sd[self._sd < 1e-12] = 1.0
        Xs = (X - self._mu) / self._sd
        Xs = np.hstack([Xs, np.ones((Xs.shape[0], 1))])
        self.classes_ = sorted(set(y.tolist()))
        self.W = np.zeros((len(self.classes_), Xs.shape[1]))
        n = Xs.shape[0]
        for ci, c in enumerate(self.classes_):
            s = np.where(y == c, 1.0, -1.0)
            w = self.W[ci]
            for _ in range(self.epochs):
                margins = s * (Xs @ w)
                active = margins < 1.0
                grad = -(Xs[active] * s[active, None]).sum(axis=0) / n + 2 * self.reg * w
                if np.linalg.norm(grad) < 1e-6:
                    break
                w -= self.lr * grad
        return self

    def decision(self, X: np.ndarray) -> np.ndarray:
        Xs = (np.asarray(X, dtype=np.float64) - self._mu) / self._sd
        Xs = np.hstack([Xs, np.ones((Xs.shape[0], 1))])
        return Xs @ self.W.T

    def predict(self, X: np.ndarray) -> np.ndarray:
        idx = self.decision(X).argmax(axis=1)
        return np.array([self.classes_[i] for i in idx], dtype=np.int64)


class LogisticProbe:
    """L2 logistic regression by full-batch gradient descent (probe scorer)."""

    def __init__(self, reg: float = 1e-3, lr: float = 0.5, epochs: int = 300):
        self.reg = reg
        self.lr = lr
        self.epochs = epochs

    def fit(self, X: np.ndarray, y: np.ndarray) -> "LogisticProbe":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        self._mu = X.mean(axis=0)
        self._sd = X.std(axis=0)
        self._sd[self._sd < 1e-12] = 1.0
        Xs = np.hstack([(X - self._mu) / self._sd, np.ones((X.shape[0], 1))])
        self.w = np.zeros(Xs.shape[1])
        n = Xs.shape[0]
        for _ in range(self.epochs):
            p = 1.0 / (1.0 + np.exp(-(Xs @ self.w)))
            grad = Xs.T @ (p - y) / n + 2 * self.reg * self.w
            if np.linalg.norm(grad) < 1e-8:
                break
            self.w -= self.lr * grad
        return self

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        Xs = (np.asarray(X, dtype=np.float64) - self._mu) / self._sd
        Xs = np.hstack([Xs, np.ones((Xs.shape[0], 1))])
        return 1.0 / (1.0 + np.exp(-(Xs @ self.w)))


# --- reports ---


@dataclass
class MetricReport:
    task: str
    runs: list[dict[str, float]] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def mean(self, key: str) -> float:
        return float(np.mean([r[key] for r in self.runs]))

    def std(self, key: str) -> float:
        return float(np.std([r[key] for r in self.runs]))

    def summary(self) -> dict[str, float]:
        keys = self.runs[0].keys() if self.runs else ()
        out: dict[str, float] = {}
        for k in keys:
            out[f"{k}_mean"] = self.mean(k)
            out[f"{k}_std"] = self.std(k)
        return out


# --- node classification ---


@dataclass
class NodeClsSplit:
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 0
    repeats: int = 10


def _split_indices(n: int, ratios, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    return order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]


def node_classification(
    embeddings: Mapping[int, np.ndarray],
    labels: Mapping[int, int],
    split: NodeClsSplit | None = None,
    reg_grid: Sequence[float] = (1e-4, 1e-3, 1e-2, 1e-1),
) -> MetricReport:
    """Linear one-vs-rest classifier on node embeddings, reshuffled per repeat.

    The regularization strength is selected on the validation split; splits
    with a class missing from train are resampled. Reports test micro/macro F1
    mean and std over repeats.
    """
    split = split or NodeClsSplit()
    nodes = sorted(labels)
    if any(n not in embeddings for n in nodes):
        raise GraphError("embeddings must cover all labeled nodes")
    X = np.stack([embeddings[n] for n in nodes])
    y = np.array([labels[n] for n in nodes], dtype=np.int64)
    classes = set(y.tolist())

    report = MetricReport(task="node-cls")
    for rep in range(split.repeats):
        tr = va = te = None
        for attempt in range(20):
            rng = derived_rng(split.seed, "node-cls", rep, attempt)
            tr, va, te = _split_indices(len(nodes), split.ratios, rng)
            if set(y[tr].tolist()) == classes:
                break
        else:
            raise GraphError("could not draw a split with every class in train")
        best = None
        for reg in reg_grid:
            clf = LinearClassifier(reg=reg).fit(X[tr], y[tr])
            micro_val, _ = f1_multiclass(y[va], clf.predict(X[va]))
            if best is None or micro_val > best[0]:
                best = (micro_val, clf)
        micro, macro = f1_multiclass(y[te], best[1].predict(X[te]))
        report.runs.append({"micro_f1": micro, "macro_f1": macro})
    return report


# --- link prediction ---


@dataclass
class LinkSplit:
    train_frac: float = 0.1
    test_frac: float = 0.4
    seed: int = 0
    neg_ratio: int = 1
    min_test_edges: int = 5


@dataclass
class LinkData:
    train_pos: list[tuple[int, int, int]]
    test_pos: list[tuple[int, int, int]]
    train_neg: list[tuple[int, int, int]]
    test_neg: list[tuple[int, int, int]]
    split_hash: str


def _corrupt_tails(graph: HtrnGraph, triples, neg_ratio: int, rng) -> list[tuple[int, int, int]]:
    out = []
    for u, r, v in triples:
        tail_type = graph.schema.relations[r].dst_type
        pool = graph.nodes_of_type(tail_type)
        banned = np.append(graph.neighbors(u, r), u)
        candidates = np.setdiff1d(pool, banned)
        take = min(neg_ratio, candidates.size)
        for w in rng.choice(candidates, size=take, replace=False) if take else ():
            out.append((u, r, int(w)))
    return out


def make_link_split(graph: HtrnGraph, split: LinkSplit) -> LinkData:
    """Stratified per relation: train/test fractions of edges, tail-corrupted
    negatives at `neg_ratio` per positive, guaranteed non-edges."""
    rng = derived_rng(split.seed, "link-split")
    train_pos: list[tuple[int, int, int]] = []
    test_pos: list[tuple[int, int, int]] = []
    for rid in range(len(graph.schema.relations)):
        idx = np.flatnonzero(graph.edges[:, 2] == rid)
        order = rng.permutation(idx.size)
        n_train = int(round(split.train_frac * idx.size))
        n_test = int(round(split.test_frac * idx.size))
        for j in order[:n_train]:
            s, d, r = graph.edges[idx[j]]
            train_pos.append((int(s), int(r), int(d)))
        for j in order[n_train : n_train + n_test]:
            s, d, r = graph.edges[idx[j]]
            test_pos.append((int(s), int(r), int(d)))
    nrng = derived_rng(split.seed, "link-neg")
    train_neg = _corrupt_tails(graph, train_pos, split.neg_ratio, nrng)
    test_neg = _corrupt_tails(graph, test_pos, split.neg_ratio, nrng)
    split_hash = sha256_text(repr((sorted(train_pos), sorted(test_pos), sorted(train_neg), sorted(test_neg))))
    return LinkData(train_pos, test_pos, train_neg, test_neg, split_hash)


Scorer = Callable[[int, int, int], float]


def link_prediction(
    scorer: Scorer,
    graph: HtrnGraph,
    data: LinkData,
    min_test_edges: int = 5,
) -> MetricReport:
    """Score held-out edges against corrupted tails; overall and per relation."""
    pos_scores = np.array([scorer(u, r, v) for u, r, v in data.test_pos])
    neg_scores = np.array([scorer(u, r, v) for u, r, v in data.test_neg])
    preds = np.concatenate([pos_scores, neg_scores]) >= 0.5
    labels = np.concatenate([np.ones(pos_scores.size), np.zeros(neg_scores.size)])
    overall = {
        "roc_auc": roc_auc(pos_scores, neg_scores),
        "pr_auc": pr_auc(pos_scores, neg_scores),
        "f1": f1_binary(preds.astype(int), labels.astype(int)),
    }
    report = MetricReport(task="link-pred", runs=[overall])
    report.extra["split_hash"] = data.split_hash

    per_relation: dict[str, dict[str, float]] = {}
    for rid, rel in enumerate(graph.schema.relations):
        p = np.array([s for s, (u, r, v) in zip(pos_scores, data.test_pos) if r == rid])
        q = np.array([s for s, (u, r, v) in zip(neg_scores, data.test_neg) if r == rid])
        if p.size < min_test_edges:
            log.warning("relation %s skipped: only %d test edges", rel.name, p.size)
            continue
        pr = (np.concatenate([p, q]) >= 0.5).astype(int)
        lb = np.concatenate([np.ones(p.size), np.zeros(q.size)]).astype(int)
        per_relation[rel.name] = {
            "roc_auc": roc_auc(p, q),
            "pr_auc": pr_auc(p, q),
            "f1": f1_binary(pr, lb),
        }
    report.extra["per_relation"] = per_relation
    return report


def probe_scorer(
    embed_edge: Callable[[int, int, int], np.ndarray], data: LinkData
) -> Scorer:
    """Train a logistic probe on train-split edge embeddings (training-free mode)."""
    X, y = [], []
    for u, r, v in data.train_pos:
        X.append(embed_edge(u, r, v))
        y.append(1.0)
    for u, r, v in data.train_neg:
        X.append(embed_edge(u, r, v))
        y.append(0.0)
    probe = LogisticProbe().fit(np.stack(X), np.array(y))

    def score(u: int, r: int, v: int) -> float:
        return float(probe.predict_proba(embed_edge(u, r, v)[None, :])[0])

    return score
