"""Shared projection head and the teacher/student output distributions."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import ParameterError, Tensor
from .vit import Params, trunc_normal


@dataclass(frozen=True)
class HeadConfig:
    in_dim: int = 64
    hidden_dim: int = 256
    bottleneck_dim: int = 64
    out_dim: int = 256
    student_temp: float = 0.1
    teacher_temp: float = 0.07
    center_momentum: float = 0.9

    def __post_init__(self):
        if min(self.in_dim, self.hidden_dim, self.bottleneck_dim, self.out_dim) <= 0:
            raise ValueError("HeadConfig dimensions must be positive")
        if self.student_temp <= 0 or self.teacher_temp <= 0:
            raise ValueError("temperatures must be positive")
        if not 0.0 <= self.center_momentum < 1.0:
            raise ValueError(f"center_momentum must be in [0, 1), got {self.center_momentum}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CenterState:
    """Running mean of teacher logits, subtracted before the teacher softmax."""

    center: np.ndarray

    @classmethod
    def zeros(cls, k: int, dtype=np.float32) -> "CenterState":
        return cls(np.zeros(k, dtype=dtype))


def init_head_params(cfg: HeadConfig, rng: np.random.Generator, dtype=np.float32) -> Params:
    dims = [cfg.in_dim, cfg.hidden_dim, cfg.hidden_dim, cfg.bottleneck_dim]
    params: Params = {}
    for i in range(3):
        w = f"head.fc{i + 1}.weight"
        b = f"head.fc{i + 1}.bias"
        params[w] = Tensor(trunc_normal(rng, (dims[i], dims[i + 1]), dtype=dtype), requires_grad=True, name=w)
        params[b] = Tensor(np.zeros(dims[i + 1], dtype=dtype), requires_grad=True, name=b)
    name = "head.last.weight"
    params[name] = Tensor(trunc_normal(rng, (cfg.bottleneck_dim, cfg.out_dim), dtype=dtype), requires_grad=True, name=name)
    return params


def bottleneck(tokens: Tensor, params: Params) -> Tensor:
    """3-layer GELU MLP followed by l2 normalization, on the last axis."""
    h = T.gelu(T.matmul(tokens, params["head.fc1.weight"]) + params["head.fc1.bias"])
    h = T.gelu(T.matmul(h, params["head.fc2.weight"]) + params["head.fc2.bias"])
    h = T.matmul(h, params["head.fc3.weight"]) + params["head.fc3.bias"]
    return T.l2_normalize(h, axis=-1)


def project(tokens: Tensor, params: Params) -> Tensor:
    """Map tokens ``[..., d]`` to ``[..., K]`` logits.

    The last layer is weight-normalized: each output direction has unit norm,
    so with a unit bottleneck every logit lies in ``[-1, 1]``.
    """
    z = bottleneck(tokens, params)
    directions = T.l2_normalize(params["head.last.weight"], axis=0)
    return T.matmul(z, directions)


def teacher_distribution(logits, cs: CenterState, temp: float) -> Tensor:
    """``softmax((logits - center) / temp)``, detached from any graph."""
    if not temp > 0:
        raise ParameterError(f"teacher temperature must be positive, got {temp}")
    raw = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    with T.no_grad():
        out = T.softmax(Tensor(raw - cs.center.astype(raw.dtype)), axis=-1, temperature=temp)
    return out


def student_distribution(logits: Tensor, temp: float) -> Tensor:
    """``softmax(logits / temp)``, differentiable."""
    if not temp > 0:
        raise ParameterError(f"student temperature must be positive, got {temp}")
    return T.softmax(logits, axis=-1, temperature=temp)


def update_center(cs: CenterState, batch_teacher_logits, momentum: float) -> CenterState:
    """``center <- m * center + (1 - m) * mean(batch)`` over all leading axes."""
    raw = batch_teacher_logits.data if isinstance(batch_teacher_logits, Tensor) else np.asarray(batch_teacher_logits)
    if raw.size == 0:
        raise ValueError("update_center needs at least one row")
    batch_mean = raw.reshape(-1, raw.shape[-1]).astype(np.float64).mean(axis=0)
    new = momentum * cs.center.astype(np.float64) + (1.0 - momentum) * batch_mean
    return CenterState(new.astype(cs.center.dtype))
