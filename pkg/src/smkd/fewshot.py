"""Episodic N-way K-shot evaluation with prototype and linear-classifier heads."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import LabeledDataset, normalize
from .vit import Backbone, cls_attention_weights, encode

log = logging.getLogger(__name__)

COMPONENTS = ("cls", "avg", "weighted")
FEATURE_MODES = ("cls", "avg", "weighted", "cls+avg", "cls+weighted", "avg+weighted", "cls+avg+weighted")
METHODS = ("prototype", "classifier")
REPORT_COLUMNS = ("method", "mode", "N", "K", "mean_acc", "ci95", "n_episodes")


class InsufficientDataError(ValueError):
    """The dataset cannot supply the requested episode."""


@dataclass(frozen=True)
class FeatureMode:
    parts: tuple[str, ...]

    @classmethod
    def parse(cls, text: str) -> "FeatureMode":
        aliases = {"avg_pool": "avg", "weighted_avg_pool": "weighted", "wavg": "weighted"}
        parts = [aliases.get(p.strip(), p.strip()) for p in text.split("+")]
        if not parts or any(p not in COMPONENTS for p in parts) or len(set(parts)) != len(parts):
            raise ValueError(f"unknown feature mode {text!r}; choose from {', '.join(FEATURE_MODES)}")
        return cls(tuple(sorted(parts, key=COMPONENTS.index)))

    @property
    def name(self) -> str:
        return "+".join(self.parts)


@dataclass
class Episode:
    support_idx: np.ndarray  # [N*K] dataset rows
    support_labels: np.ndarray  # [N*K] in 0..N-1
    query_idx: np.ndarray  # [N*Q]
    query_labels: np.ndarray
    classes: np.ndarray  # [N] dataset class ids, episode label i <-> classes[i]


def sample_episode(labels, n_way: int, k_shot: int, n_query: int, rng: np.random.Generator) -> Episode:
    """Uniformly pick ``n_way`` classes, then ``k_shot + n_query`` distinct images of each."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < n_way:
        raise InsufficientDataError(f"{n_way}-way episodes need {n_way} classes, dataset has {len(classes)}")
    chosen = np.sort(rng.choice(classes, size=n_way, replace=False))
    s_idx, q_idx = [], []
    for c in chosen:
        members = np.flatnonzero(labels == c)
        if len(members) < k_shot + n_query:
            raise InsufficientDataError(f"class {c} has {len(members)} images, need {k_shot + n_query}")
        pick = rng.choice(members, size=k_shot + n_query, replace=False)
        s_idx.append(pick[:k_shot])
        q_idx.append(pick[k_shot:])
    return Episode(
        support_idx=np.concatenate(s_idx),
        support_labels=np.repeat(np.arange(n_way), k_shot),
        query_idx=np.concatenate(q_idx),
        query_labels=np.repeat(np.arange(n_way), n_query),
        classes=chosen,
    )


def _unit(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), eps)


def pooled_features(cls_tok: np.ndarray, patches: np.ndarray, attn: np.ndarray | None, mode: FeatureMode) -> np.ndarray:
    """Combine token outputs into features; every component is unit-normalized before concatenation."""
    pieces = []
    for part in mode.parts:
        if part == "cls":
            f = cls_tok
        elif part == "avg":
            f = patches.mean(axis=-2)
        else:
            w = np.full(patches.shape[:-1], 1.0 / patches.shape[-2]) if attn is None else attn
            f = (w[..., None] * patches).sum(axis=-2)
        pieces.append(_unit(np.asarray(f, dtype=np.float64)))
    return np.concatenate(pieces, axis=-1)


def extract_features(backbone: Backbone, images: np.ndarray, mode: FeatureMode, batch_size: int = 256) -> np.ndarray:
    """Features for uint8 or float images ``[n, 3, H, W]`` (or a single image)."""
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    out = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start : start + batch_size]
            x = normalize(chunk) if chunk.dtype == np.uint8 else chunk.astype(np.float32)
            ts = encode(backbone.params, backbone.cfg, x)
            out.append(pooled_features(ts.cls.data, ts.patches.data, cls_attention_weights(ts), mode))
    feats = np.concatenate(out, axis=0)
    return feats[0] if single else feats


def prototype_classify(support_feats, support_labels, query_feats, eps: float = 1e-12) -> np.ndarray:
    """Nearest class mean by cosine similarity; ties go to the lowest class index."""
    support_feats = np.asarray(support_feats, dtype=np.float64)
    support_labels = np.asarray(support_labels)
    n_cls = int(support_labels.max()) + 1
    protos = np.stack([support_feats[support_labels == c].mean(axis=0) for c in range(n_cls)])
    sims = _unit(np.asarray(query_feats, dtype=np.float64), eps) @ _unit(protos, eps).T
    return sims.argmax(axis=1)


def linear_classifier_eval(
    support_feats,
    support_labels,
    query_feats,
    iterations: int = 100,
    lr: float = 0.01,
    l2: float = 1e-3,
) -> np.ndarray:
    """Multinomial logistic regression fitted by full-batch gradient descent from zero weights."""
    x = np.asarray(support_feats, dtype=np.float64)
    y = np.asarray(support_labels)
    n_cls = int(y.max()) + 1
    w = np.zeros((x.shape[1], n_cls))
    b = np.zeros(n_cls)
    onehot = np.eye(n_cls)[y]
    first = None
    for _ in range(iterations):
        z = x @ w + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        loss = -np.log(np.maximum((p * onehot).sum(axis=1), 1e-300)).mean() + 0.5 * l2 * (w * w).sum()
        first = loss if first is None else first
        if not np.isfinite(loss):
            break
        g = (p - onehot) / len(y)
        w -= lr * (x.T @ g + l2 * w)
        b -= lr * g.sum(axis=0)
    if not np.isfinite(loss) or loss > first + 1e-12:
        warnings.warn(f"linear classifier did not converge (loss {first:.4g} -> {loss:.4g})", RuntimeWarning, stacklevel=2)
    return (np.asarray(query_feats, dtype=np.float64) @ w + b).argmax(axis=1)


@dataclass
class EvalResult:
    method: str
    mode: str
    n_way: int
    k_shot: int
    mean_acc: float
    ci95: float
    accuracies: np.ndarray

    @property
    def n_episodes(self) -> int:
        return len(self.accuracies)

    def row(self) -> dict:
        return {
            "method": self.method,
            "mode": self.mode,
            "N": self.n_way,
            "K": self.k_shot,
            "mean_acc": f"{self.mean_acc:.6f}",
            "ci95": f"{self.ci95:.6f}",
            "n_episodes": self.n_episodes,
        }


def confidence_interval(accuracies) -> tuple[float, float]:
    """Mean and 95% half-width ``1.96 * std / sqrt(n)`` (population std)."""
    acc = np.asarray(accuracies, dtype=np.float64)
    return float(acc.mean()), float(1.96 * acc.std() / np.sqrt(len(acc)))


def evaluate_features(
    feats: np.ndarray,
    labels,
    n_episodes: int = 600,
    n_way: int = 5,
    k_shot: int = 1,
    n_query: int = 15,
    method: str = "prototype",
    seed: int = 0,
    mode_name: str = "",
) -> EvalResult:
    """Run episodes over precomputed features; episode ``i`` draws from ``default_rng([seed, i])``."""
    if n_episodes < 2:
        raise ValueError("need at least 2 episodes for a confidence interval")
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    classify = prototype_classify if method == "prototype" else linear_classifier_eval
    accs = np.empty(n_episodes)
    for i in range(n_episodes):
        ep = sample_episode(labels, n_way, k_shot, n_query, np.random.default_rng([seed, i]))
        pred = classify(feats[ep.support_idx], ep.support_labels, feats[ep.query_idx])
        accs[i] = (pred == ep.query_labels).mean()
    mean, ci = confidence_interval(accs)
    return EvalResult(method, mode_name, n_way, k_shot, mean, ci, accs)


def evaluate(
    backbone: Backbone,
    dataset: LabeledDataset,
    n_episodes: int = 600,
    mode: str | FeatureMode = "cls",
    method: str = "prototype",
    n_way: int = 5,
    k_shot: int = 1,
    n_query: int = 15,
    seed: int = 0,
) -> EvalResult:
    """Mean episode accuracy and its 95% half-width for a frozen backbone."""
    fm = mode if isinstance(mode, FeatureMode) else FeatureMode.parse(mode)
    feats = extract_features(backbone, dataset.images, fm)
    return evaluate_features(feats, dataset.labels, n_episodes, n_way, k_shot, n_query, method, seed, fm.name)


def write_report(results, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for r in results:
            writer.writerow(r.row())
