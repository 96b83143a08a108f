"""Distillation objectives: class-token, masked-patch and matched-patch losses.

Two layers live here. The per-pair functions (``loss_cls``, ``loss_mim``,
``match_patches``, ``loss_patch``) follow the objectives term by term and are
what tests recompose against. The batched stage losses used for training fold
every pair's teacher distribution into one aggregated target per student row,
which is exact because cross-entropy is linear in the teacher side:

    mean_p H(t_p, s_p) = -sum_rows log(s_row) . (1/P) sum_{p: s_p = row} t_p
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .masking import MaskSpec
from .tensor import Tensor

LOG_EPS = 1e-8


@dataclass
class ProbTable:
    """Categorical outputs for one view (``cls [K]``, ``patches [N, K]``) or a batch of views."""

    cls: Tensor
    patches: Tensor | None
    side: str

    def __post_init__(self):
        if self.side not in ("teacher", "student"):
            raise ValueError(f"side must be 'teacher' or 'student', got {self.side!r}")

    def view(self, i: int) -> "ProbTable":
        patches = None if self.patches is None else self.patches[i]
        return ProbTable(cls=self.cls[i], patches=patches, side=self.side)


@dataclass
class ViewPair:
    """Teacher sees the clean view of image y; student sees the masked view of x (same class)."""

    teacher_view: np.ndarray
    student_view: np.ndarray
    mask: MaskSpec
    label: int
    same_image: bool


@dataclass
class MatchMap:
    k_plus: np.ndarray
    sims: np.ndarray


def _check_sides(teacher: ProbTable, student: ProbTable) -> None:
    if teacher.side != "teacher" or student.side != "student":
        raise ValueError(f"expected (teacher, student) tables, got ({teacher.side}, {student.side})")


def _const(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def entropy(p) -> float:
    p = np.asarray(_const(p), dtype=np.float64)
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum())


def cross_entropy_h(p, q: Tensor, eps: float = LOG_EPS) -> Tensor:
    """``-sum p * log q`` over the last axis; ``p`` is treated as a constant.

    ``q`` is clamped below at ``eps`` before the log.

    Raises:
        ValueError: on negative entries in either argument.
    """
    q = q if isinstance(q, Tensor) else Tensor(q)
    p_arr = _const(p).astype(q.dtype, copy=False)
    if (p_arr < 0).any() or (q.data < 0).any():
        raise ValueError("cross_entropy_h needs nonnegative distributions")
    return -(T.log(T.clamp_min(q, eps)) * p_arr).sum(axis=-1)


def loss_cls(pair: ViewPair | None, teacher: ProbTable, student: ProbTable) -> Tensor:
    """Class-token distillation between an intra-class view pair."""
    _check_sides(teacher, student)
    return cross_entropy_h(teacher.cls, student.cls)


def loss_cls_self(teacher: ProbTable, student: ProbTable) -> Tensor:
    """Cross-view self-distillation of one image's class token (x = y)."""
    _check_sides(teacher, student)
    return cross_entropy_h(teacher.cls, student.cls)


def loss_mim(teacher: ProbTable, student: ProbTable, mask, normalize: bool = True) -> Tensor:
    """Masked patch reconstruction: sum of per-patch H over masked positions.

    With ``normalize`` the sum is divided by ``max(1, #masked)``.
    """
    _check_sides(teacher, student)
    grid = mask.grid if isinstance(mask, MaskSpec) else np.asarray(mask, dtype=bool)
    h = cross_entropy_h(teacher.patches, student.patches)
    total = (h * grid.astype(h.dtype)).sum()
    if normalize:
        total = total * (1.0 / max(1, int(grid.sum())))
    return total


def _unit_rows(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    return x / np.maximum(norm, eps)


def match_patches(teacher_feats, student_feats) -> MatchMap:
    """For each teacher patch, the student patch of highest cosine similarity.

    Works on ``[N, d]`` pairs or batches ``[P, N, d]``; ties go to the lowest index.
    """
    tf = _unit_rows(np.asarray(_const(teacher_feats), dtype=np.float64))
    sf = _unit_rows(np.asarray(_const(student_feats), dtype=np.float64))
    sims = tf @ np.swapaxes(sf, -1, -2)
    k_plus = sims.argmax(axis=-1)
    best = np.take_along_axis(sims, k_plus[..., None], axis=-1)[..., 0]
    return MatchMap(k_plus=k_plus, sims=np.clip(best, -1.0, 1.0))


def loss_patch(teacher: ProbTable, student: ProbTable, matches: MatchMap, weights=None) -> Tensor:
    """Weighted sum over teacher patches k of ``H(P_t[k], P_s[k+])``.

    ``weights`` defaults to ``1/N`` per patch; a custom vector must sum to 1.
    """
    _check_sides(teacher, student)
    n = teacher.patches.shape[0]
    w = _patch_weights(weights, n)
    gathered = student.patches[np.asarray(matches.k_plus, dtype=np.intp)]
    h = cross_entropy_h(teacher.patches, gathered)
    return (h * w.astype(h.dtype)).sum()


def _patch_weights(weights, n: int) -> np.ndarray:
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape[-1] != n:
        raise ValueError(f"weight vector has length {w.shape[-1]}, expected {n}")
    if not np.allclose(w.sum(axis=-1), 1.0, atol=1e-5):
        raise ValueError("patch weights must sum to 1")
    return w


# ---------------------------------------------------------------------------
# batched stage objectives


def _aggregate_rows(targets: np.ndarray, rows: np.ndarray, cols: np.ndarray, vals: np.ndarray, n_rows: int) -> np.ndarray:
    """``out[r] = sum_j vals_j * targets[cols_j]`` over entries with ``rows_j == r``."""
    scatter = sp.csr_matrix((vals, (rows, cols)), shape=(n_rows, targets.shape[0]))
    return np.asarray(scatter @ targets)


def pairwise_cls_loss(teacher_cls, student_cls: Tensor, t_idx, s_idx) -> Tensor:
    """Mean over pairs ``(t, s)`` of ``H(teacher_cls[t], student_cls[s])``."""
    t_idx = np.asarray(t_idx, dtype=np.intp)
    s_idx = np.asarray(s_idx, dtype=np.intp)
    if t_idx.size == 0:
        raise ValueError("no pairs to average over")
    tc = _const(teacher_cls).astype(np.float64)
    vals = np.full(t_idx.size, 1.0 / t_idx.size)
    target = _aggregate_rows(tc, s_idx, t_idx, vals, student_cls.shape[0]).astype(student_cls.dtype)
    return -(T.log(T.clamp_min(student_cls, LOG_EPS)) * target).sum()


def masked_patch_loss(teacher_patches, student_patches: Tensor, masks: np.ndarray, normalize: bool = True) -> Tensor:
    """Mean over views of :func:`loss_mim` (teacher and student rows share view index)."""
    masks = np.asarray(masks, dtype=bool)
    v = masks.shape[0]
    weight = masks.astype(np.float64)
    if normalize:
        weight = weight / np.maximum(1, masks.sum(axis=1, keepdims=True))
    target = _const(teacher_patches).astype(np.float64) * (weight / v)[..., None]
    return -(T.log(T.clamp_min(student_patches, LOG_EPS)) * target.astype(student_patches.dtype)).sum()


def batch_match(teacher_feats, student_feats, t_idx, s_idx) -> MatchMap:
    """:func:`match_patches` for every pair ``(teacher view t, student view s)``."""
    tf = _unit_rows(np.asarray(_const(teacher_feats), dtype=np.float64))
    sf = _unit_rows(np.asarray(_const(student_feats), dtype=np.float64))
    sims = tf[t_idx] @ np.swapaxes(sf[s_idx], -1, -2)
    k_plus = sims.argmax(axis=-1)
    best = np.take_along_axis(sims, k_plus[..., None], axis=-1)[..., 0]
    return MatchMap(k_plus=k_plus, sims=np.clip(best, -1.0, 1.0))


def pairwise_patch_loss(teacher_patches, student_patches: Tensor, t_idx, s_idx, k_plus: np.ndarray, weights=None) -> Tensor:
    """Mean over pairs of :func:`loss_patch` with precomputed matches ``k_plus [P, N]``.

    ``weights`` is ``None`` (uniform) or ``[P, N]`` rows summing to 1.
    """
    t_idx = np.asarray(t_idx, dtype=np.intp)
    s_idx = np.asarray(s_idx, dtype=np.intp)
    p = t_idx.size
    if p == 0:
        raise ValueError("no pairs to average over")
    vs, n, k = student_patches.shape
    w = np.full((p, n), 1.0 / n) if weights is None else _patch_weights(weights, n)
    tp = _const(teacher_patches).astype(np.float64).reshape(-1, k)
    rows = (s_idx[:, None] * n + k_plus).ravel()
    cols = (t_idx[:, None] * n + np.arange(n)[None, :]).ravel()
    target = _aggregate_rows(tp, rows, cols, (w / p).ravel(), vs * n).reshape(vs, n, k)
    return -(T.log(T.clamp_min(student_patches, LOG_EPS)) * target.astype(student_patches.dtype)).sum()


def stage1_loss(teacher: ProbTable, student: ProbTable, masks: np.ndarray, n_views: int = 2, normalize: bool = True) -> dict[str, Tensor]:
    """Self-supervised objective: cross-view class loss plus masked patch loss, unscaled.

    Views are ordered image-major (view ``v`` of image ``i`` is row ``i * n_views + v``).
    """
    _check_sides(teacher, student)
    b = teacher.cls.shape[0] // n_views
    t_idx, s_idx = self_pairs(b, n_views)
    cls = pairwise_cls_loss(teacher.cls, student.cls, t_idx, s_idx)
    mim = masked_patch_loss(teacher.patches, student.patches, masks, normalize=normalize)
    return {"total": cls + mim, "cls": cls, "mim": mim}


def stage2_loss(
    teacher: ProbTable,
    student: ProbTable,
    teacher_feats,
    student_feats,
    t_idx,
    s_idx,
    lam: float,
    patch_weights=None,
) -> dict[str, Tensor]:
    """Supervised objective ``L_cls + lam * L_patch`` averaged over mined view pairs.

    ``patch_weights`` is ``None`` for a simple average or per-teacher-view
    weights ``[V, N]`` (e.g. class-token attention), gathered per pair.
    """
    _check_sides(teacher, student)
    t_idx = np.asarray(t_idx, dtype=np.intp)
    s_idx = np.asarray(s_idx, dtype=np.intp)
    cls = pairwise_cls_loss(teacher.cls, student.cls, t_idx, s_idx)
    matches = batch_match(teacher_feats, student_feats, t_idx, s_idx)
    w = None if patch_weights is None else np.asarray(patch_weights)[t_idx]
    patch = pairwise_patch_loss(teacher.patches, student.patches, t_idx, s_idx, matches.k_plus, w)
    return {"total": cls + patch * float(lam), "cls": cls, "patch": patch}


def self_pairs(n_images: int, n_views: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Cross-view pairs within each image: teacher view a, student view b, a != b."""
    t, s = [], []
    for i in range(n_images):
        for a in range(n_views):
            for b in range(n_views):
                if a != b:
                    t.append(i * n_views + a)
                    s.append(i * n_views + b)
    return np.asarray(t, dtype=np.intp), np.asarray(s, dtype=np.intp)
