"""Two-stage teacher/student training: self-supervised pretraining, then supervised distillation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import head as H
from . import losses as L
from . import tensor as T
from .data import AugmentParams, LabeledDataset, augment, normalize
from .masking import sample_mask
from .tensor import NumericError, Tensor
from .vit import Params, VitConfig, cls_attention_weights, encode, init_vit_params, trunc_normal

log = logging.getLogger(__name__)

STAGES = ("ssl_pretrain", "supervised")
LOSS_MODES = ("ce", "cls", "patch", "ce+patch", "cls+patch")
COMPONENT_ORDER = ("cls", "patch", "mim", "ce")


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "ssl_pretrain"
    epochs: int = 30
    batch_size: int = 64
    base_lr: float = 5e-4
    final_lr: float = 1e-5
    warmup_epochs: int = 3
    wd_start: float = 0.04
    wd_end: float = 0.4
    ema_momentum_start: float = 0.996
    ema_momentum_end: float = 1.0
    lam: float = 0.45
    seed: int = 0
    loss: str = "cls+patch"
    patch_weighting: str = "avg"
    n_views: int = 2
    mask_mode: str = "block"
    mask_prob: float = 0.5
    mask_ratio_min: float = 0.1
    mask_ratio_max: float = 0.5
    teacher_temp: float = 0.07
    warmup_teacher_temp: float = 0.04
    warmup_teacher_temp_epochs: int = 3
    clip_grad: float = 3.0
    n_local_crops: int = 0
    local_size: int = 16
    cold_start: bool = False
    keep_optimizer: bool = False
    vit: VitConfig = field(default_factory=VitConfig)
    head: H.HeadConfig = field(default_factory=H.HeadConfig)
    augment: AugmentParams = field(default_factory=AugmentParams)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.loss not in LOSS_MODES:
            raise ValueError(f"loss must be one of {LOSS_MODES}, got {self.loss!r}")
        if self.patch_weighting not in ("avg", "attn"):
            raise ValueError(f"patch_weighting must be 'avg' or 'attn', got {self.patch_weighting!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})")
        for name in ("ema_momentum_start", "ema_momentum_end"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.n_views < 2:
            raise ValueError("need at least two views per image")
        if self.head.in_dim != self.vit.embed_dim:
            raise ValueError(f"head in_dim {self.head.in_dim} != embed_dim {self.vit.embed_dim}")

    @property
    def stage_index(self) -> int:
        return STAGES.index(self.stage) + 1

    @property
    def components(self) -> tuple[str, ...]:
        """Loss components logged by this configuration, in canonical order."""
        if self.stage == "ssl_pretrain":
            return ("cls", "mim")
        parts = set(self.loss.split("+"))
        return tuple(c for c in COMPONENT_ORDER if c in parts)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


@dataclass
class ModelPair:
    """Student and EMA teacher weights plus everything else a run must carry forward."""

    vit: VitConfig
    head: H.HeadConfig
    student: Params
    teacher: Params
    center_cls: H.CenterState
    center_patch: H.CenterState
    step: int = 0
    epoch: int = 0
    stage: str = "fresh"
    ce_head: Params = field(default_factory=dict)
    opt: AdamState = field(default_factory=AdamState)

    def __post_init__(self):
        for name, p in self.student.items():
            t = self.teacher.get(name)
            if t is None or t.shape != p.shape:
                raise ValueError(f"teacher is missing or misshapes parameter {name!r}")

    def trainable(self) -> Params:
        return {**self.student, **self.ce_head}


def init_model_pair(vit_cfg: VitConfig, head_cfg: H.HeadConfig, seed: int, dtype=np.float32) -> ModelPair:
    rng = np.random.default_rng([seed, 0])
    student = {**init_vit_params(vit_cfg, rng, dtype), **H.init_head_params(head_cfg, rng, dtype)}
    teacher = {k: Tensor(v.data.copy(), name=k) for k, v in student.items()}
    k = head_cfg.out_dim
    return ModelPair(
        vit=vit_cfg,
        head=head_cfg,
        student=student,
        teacher=teacher,
        center_cls=H.CenterState.zeros(k),
        center_patch=H.CenterState.zeros(k),
    )


# ---------------------------------------------------------------------------
# pair mining, averaging and schedules


def mine_intra_class_pairs(labels) -> list[tuple[int, int]]:
    """All ordered ``(i, j)`` with ``labels[i] == labels[j]``, self-pairs included."""
    labels = np.asarray(labels)
    pairs = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        pairs.extend((int(i), int(j)) for i in members for j in members)
    pairs.sort()
    return pairs


def expand_view_pairs(pairs, n_views: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Turn image pairs ``(student i, teacher j)`` into view-row index arrays.

    Every teacher view of ``j`` is paired with every student view of ``i``,
    except a view with itself.
    """
    t_idx, s_idx = [], []
    for i, j in pairs:
        for a in range(n_views):
            for b in range(n_views):
                if i == j and a == b:
                    continue
                t_idx.append(j * n_views + a)
                s_idx.append(i * n_views + b)
    return np.asarray(t_idx, dtype=np.intp), np.asarray(s_idx, dtype=np.intp)


def ema_update(teacher: Params, student: Params, m: float) -> None:
    """In place: ``teacher <- m * teacher + (1 - m) * student``, accumulated in f64."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"EMA momentum must be in [0, 1], got {m}")
    for name, s in student.items():
        t = teacher[name]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {name!r}: teacher {t.shape}, student {s.shape}")
        mixed = m * t.data.astype(np.float64) + (1.0 - m) * s.data.astype(np.float64)
        t.data = mixed.astype(t.dtype)


def cosine_schedule(step: int, total: int, warmup_steps: int, base: float, final: float) -> float:
    """Linear warmup from 0 to ``base``, then cosine decay to ``final`` at ``total``."""
    if step < warmup_steps:
        return base * step / warmup_steps
    if step >= total:
        return final
    span = total - warmup_steps
    c = 0.5 * (1.0 + math.cos(math.pi * (step - warmup_steps) / span))
    if c == 0.5:
        return (base + final) / 2
    return base * c + final * (1.0 - c)


def teacher_temperature(epoch: int, cfg: TrainConfig) -> float:
    n = cfg.warmup_teacher_temp_epochs
    if epoch >= n:
        return cfg.teacher_temp
    return cfg.warmup_teacher_temp + (cfg.teacher_temp - cfg.warmup_teacher_temp) * epoch / n


# ---------------------------------------------------------------------------
# optimizer


def adamw_step(
    params: Params,
    grads: T.GradMap,
    state: AdamState,
    lr: float,
    wd: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    clip: float = 0.0,
) -> None:
    """Decoupled-weight-decay Adam; 1-d parameters (biases, norms, tokens) skip decay."""
    b1, b2 = betas
    state.t += 1
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in params.items():
        if p not in grads:
            continue
        g = grads.array(p)
        if clip > 0:
            norm = float(np.sqrt((g.astype(np.float64) ** 2).sum()))
            if norm > clip:
                g = g * (clip / (norm + 1e-6))
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        data = p.data
        if p.ndim > 1 and wd:
            data = data * (1.0 - lr * wd)
        p.data = (data - lr * update).astype(p.dtype)


# ---------------------------------------------------------------------------
# one step


@dataclass
class Batch:
    views: np.ndarray  # [B*V, 3, S, S], image-major
    masks: np.ndarray  # [B*V, N]
    labels: np.ndarray  # [B]
    local_views: np.ndarray | None = None  # [B*L, 3, s, s]


def make_batch(images: np.ndarray, labels: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    grid = cfg.vit.grid
    size = cfg.vit.image_size
    global_aug = replace(cfg.augment, output_size=size)
    views, masks = [], []
    for img in images:
        for _ in range(cfg.n_views):
            views.append(augment(img, global_aug, rng))
            masks.append(sample_mask(cfg.mask_mode, grid, grid, rng, cfg.mask_prob, (cfg.mask_ratio_min, cfg.mask_ratio_max)).grid)
    local = None
    if cfg.n_local_crops:
        local_aug = replace(cfg.augment, output_size=cfg.local_size, scale=(0.05, 0.4))
        local = normalize(np.stack([augment(img, local_aug, rng) for img in images for _ in range(cfg.n_local_crops)]))
    return Batch(views=normalize(np.stack(views)), masks=np.stack(masks), labels=np.asarray(labels), local_views=local)


def _probs(logits: Tensor, cs: H.CenterState, side: str, temp: float) -> Tensor:
    if side == "teacher":
        return H.teacher_distribution(logits, cs, temp)
    return H.student_distribution(logits, temp)


def _ce_loss(features: Tensor, labels: np.ndarray, ce_head: Params) -> Tensor:
    logits = T.matmul(features, ce_head["ce.weight"]) + ce_head["ce.bias"]
    logp = T.log_softmax(logits, axis=-1)
    picked = logp[np.arange(len(labels)), labels]
    return -picked.mean()


def compute_losses(model: ModelPair, batch: Batch, cfg: TrainConfig, teacher_temp: float, class_index=None):
    """Forward both networks on a batch and return ``(loss dict, teacher logits)``."""
    v = cfg.n_views
    with T.no_grad():
        t_ts = encode(model.teacher, model.vit, batch.views)
        t_cls_logits = H.project(t_ts.cls, model.teacher)
        t_patch_logits = H.project(t_ts.patches, model.teacher)
    teacher = L.ProbTable(
        cls=_probs(t_cls_logits, model.center_cls, "teacher", teacher_temp),
        patches=_probs(t_patch_logits, model.center_patch, "teacher", teacher_temp),
        side="teacher",
    )
    s_ts = encode(model.student, model.vit, batch.views, masks=batch.masks)
    s_temp = model.head.student_temp
    student = L.ProbTable(
        cls=H.student_distribution(H.project(s_ts.cls, model.student), s_temp),
        patches=H.student_distribution(H.project(s_ts.patches, model.student), s_temp),
        side="student",
    )

    b = batch.views.shape[0] // v
    if cfg.stage == "ssl_pretrain":
        t_idx, s_idx = L.self_pairs(b, v)
    else:
        t_idx, s_idx = expand_view_pairs(mine_intra_class_pairs(batch.labels), v)

    student_cls = student.cls
    if batch.local_views is not None:
        # local crops only distil the class token of their own image
        loc = encode(model.student, model.vit, batch.local_views)
        loc_probs = H.student_distribution(H.project(loc.cls, model.student), s_temp)
        student_cls = T.concat([student.cls, loc_probs], axis=0)
        nl = cfg.n_local_crops
        extra_s = np.arange(b * nl) + b * v
        img = np.arange(b * nl) // nl
        extra_t = np.concatenate([img * v + a for a in range(v)])
        t_idx = np.concatenate([t_idx, extra_t])
        s_idx = np.concatenate([s_idx, np.tile(extra_s, v)])

    out: dict[str, Tensor] = {}
    if cfg.stage == "ssl_pretrain":
        out["cls"] = L.pairwise_cls_loss(teacher.cls, student_cls, t_idx, s_idx)
        out["mim"] = L.masked_patch_loss(teacher.patches, student.patches, batch.masks)
        out["total"] = out["cls"] + out["mim"]
        return out, (t_cls_logits, t_patch_logits)

    comps = cfg.components
    n_global = b * v
    g_mask = s_idx < n_global
    if "cls" in comps:
        out["cls"] = L.pairwise_cls_loss(teacher.cls, student_cls, t_idx, s_idx)
    if "patch" in comps:
        weights = cls_attention_weights(t_ts) if cfg.patch_weighting == "attn" else None
        gt, gs = t_idx[g_mask], s_idx[g_mask]
        matches = L.batch_match(t_ts.patches, s_ts.patches, gt, gs)
        w = None if weights is None else weights[gt]
        out["patch"] = L.pairwise_patch_loss(teacher.patches, student.patches, gt, gs, matches.k_plus, w)
    if "ce" in comps:
        ids = batch.labels if class_index is None else class_index[batch.labels]
        out["ce"] = _ce_loss(s_ts.cls, np.repeat(ids, v), model.ce_head)

    lam = float(cfg.lam)
    if cfg.loss == "cls":
        total = out["cls"]
    elif cfg.loss == "patch":
        total = out["patch"]
    elif cfg.loss == "cls+patch":
        total = out["cls"] + out["patch"] * lam
    elif cfg.loss == "ce":
        total = out["ce"]
    else:
        total = out["ce"] + out["patch"] * lam
    out["total"] = total
    return out, (t_cls_logits, t_patch_logits)


# ---------------------------------------------------------------------------
# stage loop


def _prepare(data: LabeledDataset, cfg: TrainConfig, init: ModelPair | None) -> ModelPair:
    if init is None:
        if cfg.stage == "supervised" and not cfg.cold_start:
            raise ValueError("supervised training needs a pretrained init checkpoint (pass cold_start to override)")
        model = init_model_pair(cfg.vit, cfg.head, cfg.seed)
    else:
        model = init
        if model.vit != cfg.vit or model.head != cfg.head:
            raise ValueError("init checkpoint architecture does not match the configuration")
    if model.stage != cfg.stage:
        # new stage: fresh counters and, unless asked otherwise, fresh moments
        model.stage = cfg.stage
        model.step = 0
        model.epoch = 0
        if not cfg.keep_optimizer:
            model.opt = AdamState()
    if "ce" in cfg.components and not model.ce_head:
        n_cls = len(np.unique(data.labels))
        rng = np.random.default_rng([cfg.seed, 99])
        model.ce_head = {
            "ce.weight": Tensor(trunc_normal(rng, (cfg.vit.embed_dim, n_cls)), requires_grad=True, name="ce.weight"),
            "ce.bias": Tensor(np.zeros(n_cls, np.float32), requires_grad=True, name="ce.bias"),
        }
    return model


def train_stage(data: LabeledDataset, cfg: TrainConfig, init: ModelPair | None = None, on_epoch=None) -> tuple[ModelPair, list[dict]]:
    """Run (or resume) one training stage and return the model and per-epoch metric rows.

    ``init`` from an earlier stage is a warm start; ``init`` from the same
    stage resumes at its epoch and step counters. ``on_epoch(model, row)`` is
    called after every epoch.

    Raises:
        NumericError: if a loss becomes non-finite; the message names the step.
    """
    model = _prepare(data, cfg, init)
    n = len(data)
    steps_per_epoch = n // cfg.batch_size
    if steps_per_epoch == 0:
        raise ValueError(f"batch_size {cfg.batch_size} exceeds dataset size {n}")
    total = steps_per_epoch * cfg.epochs
    warmup = steps_per_epoch * cfg.warmup_epochs
    classes = np.unique(data.labels)
    class_index = np.zeros(classes.max() + 1, dtype=np.intp)
    class_index[classes] = np.arange(len(classes))
    rows: list[dict] = []

    for epoch in range(model.epoch, cfg.epochs):
        rng = np.random.default_rng([cfg.seed, cfg.stage_index, epoch])
        order = rng.permutation(n)
        sums: dict[str, float] = {}
        temp = teacher_temperature(epoch, cfg)
        lr = ema_m = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            batch = make_batch(data.images[idx], data.labels[idx], cfg, rng)
            step = model.step
            lr = cosine_schedule(step, total, warmup, cfg.base_lr, cfg.final_lr)
            wd = cosine_schedule(step, total, 0, cfg.wd_start, cfg.wd_end)
            ema_m = cosine_schedule(step, total, 0, cfg.ema_momentum_start, cfg.ema_momentum_end)

            try:
                parts, (t_cls, t_patch) = compute_losses(model, batch, cfg, temp, class_index)
            except NumericError as exc:
                raise NumericError(f"{exc} (stage {cfg.stage} epoch {epoch} step {step})", layer=exc.layer) from exc
            loss_val = parts["total"].item()
            if not np.isfinite(loss_val):
                raise NumericError(f"non-finite loss {loss_val} at stage {cfg.stage} epoch {epoch} step {step}")
            grads = T.backward(parts["total"])
            params = model.trainable()
            adamw_step(params, grads, model.opt, lr, wd, clip=cfg.clip_grad)
            ema_update(model.teacher, model.student, ema_m)
            mom = model.head.center_momentum
            model.center_cls = H.update_center(model.center_cls, t_cls, mom)
            model.center_patch = H.update_center(model.center_patch, t_patch, mom)
            model.step += 1
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v.item()

        model.epoch = epoch + 1
        row = {"epoch": epoch, "step": model.step, "loss_total": sums["total"] / steps_per_epoch}
        for c in cfg.components:
            row[f"loss_{c}"] = sums[c] / steps_per_epoch
        row["lr"] = lr
        row["ema_m"] = ema_m
        rows.append(row)
        log.info("%s epoch %d: %s", cfg.stage, epoch, ", ".join(f"{k}={v:.4f}" for k, v in row.items() if k.startswith("loss")))
        if on_epoch is not None:
            on_epoch(model, row)
    return model, rows


def metric_columns(cfg: TrainConfig) -> list[str]:
    return ["epoch", "step", "loss_total", *[f"loss_{c}" for c in cfg.components], "lr", "ema_m"]


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
