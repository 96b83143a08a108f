"""Small Vision Transformer backbone with mask-token substitution.

Parameters live in a flat ``dict[str, Tensor]`` keyed ``vit.*`` so the same
dict can also hold projection-head weights and be averaged, checkpointed and
optimized name by name.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .masking import MaskSpec
from .tensor import NumericError, ShapeError, Tensor

Params = dict[str, Tensor]


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    in_chans: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if min(self.image_size, self.patch_size, self.embed_dim, self.depth, self.num_heads) <= 0:
            raise ValueError("VitConfig dimensions must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TokenSet:
    """Backbone output for a batch (leading axis B) or a single image.

    ``attn`` is a detached array of shape ``[B, depth, heads, N+1, N+1]``
    (without the leading B for a single image).
    """

    cls: Tensor
    patches: Tensor
    attn: np.ndarray
    tokens: Tensor


@dataclass
class Backbone:
    """A frozen view of backbone weights used for evaluation and visualization."""

    cfg: VitConfig
    params: Params


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def init_vit_params(cfg: VitConfig, rng: np.random.Generator, dtype=np.float32) -> Params:
    d, hidden = cfg.embed_dim, cfg.mlp_hidden
    patch_dim = cfg.in_chans * cfg.patch_size**2

    def param(name, arr):
        return name, Tensor(np.asarray(arr, dtype=dtype), requires_grad=True, name=name)

    entries = [
        param("vit.patch_embed.weight", trunc_normal(rng, (patch_dim, d), dtype=dtype)),
        param("vit.patch_embed.bias", np.zeros(d)),
        param("vit.cls_token", trunc_normal(rng, (d,), dtype=dtype)),
        param("vit.pos_embed", trunc_normal(rng, (cfg.num_patches + 1, d), dtype=dtype)),
        param("vit.mask_token", np.zeros(d)),
    ]
    for i in range(cfg.depth):
        p = f"vit.blocks.{i}."
        entries += [
            param(p + "norm1.gain", np.ones(d)),
            param(p + "norm1.bias", np.zeros(d)),
            param(p + "attn.qkv.weight", trunc_normal(rng, (d, 3 * d), dtype=dtype)),
            param(p + "attn.qkv.bias", np.zeros(3 * d)),
            param(p + "attn.proj.weight", trunc_normal(rng, (d, d), dtype=dtype)),
            param(p + "attn.proj.bias", np.zeros(d)),
            param(p + "norm2.gain", np.ones(d)),
            param(p + "norm2.bias", np.zeros(d)),
            param(p + "mlp.fc1.weight", trunc_normal(rng, (d, hidden), dtype=dtype)),
            param(p + "mlp.fc1.bias", np.zeros(hidden)),
            param(p + "mlp.fc2.weight", trunc_normal(rng, (hidden, d), dtype=dtype)),
            param(p + "mlp.fc2.bias", np.zeros(d)),
        ]
    entries += [param("vit.norm.gain", np.ones(d)), param("vit.norm.bias", np.zeros(d))]
    return dict(entries)


def extract_patches(images: np.ndarray, patch_size: int) -> np.ndarray:
    """``[B, C, H, W]`` -> ``[B, N, C*p*p]`` with patches in row-major grid order."""
    b, c, h, w = images.shape
    p = patch_size
    x = images.reshape(b, c, h // p, p, w // p, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, (h // p) * (w // p), c * p * p)


def patchify(images, params: Params, cfg: VitConfig, image_size: int | None = None) -> Tensor:
    """Linear patch embedding of ``[3, H, W]`` or ``[B, 3, H, W]`` images.

    ``image_size`` overrides the expected side length (used for small local crops).
    """
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    size = cfg.image_size if image_size is None else image_size
    if images.shape[1:] != (cfg.in_chans, size, size):
        raise ShapeError(f"expected images of shape [{cfg.in_chans}, {size}, {size}], got {images.shape[1:]}")
    weight = params["vit.patch_embed.weight"]
    pixels = extract_patches(images.astype(weight.dtype, copy=False), cfg.patch_size)
    out = T.matmul(pixels, weight) + params["vit.patch_embed.bias"]
    return out[0] if single else out


def apply_mask_tokens(patch_embeds: Tensor, mask, e_mask: Tensor) -> Tensor:
    """Replace masked rows by the mask embedding: ``(1 - m_i) x_i + m_i e``.

    ``mask`` is a :class:`MaskSpec`, a bool array ``[N]``, or ``[B, N]``.
    """
    if isinstance(mask, MaskSpec):
        mask = mask.grid
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != patch_embeds.shape[:-1]:
        raise ShapeError(f"mask shape {mask.shape} does not match tokens {patch_embeds.shape[:-1]}")
    if not mask.any():
        return patch_embeds
    return T.where(mask[..., None], e_mask, patch_embeds)


def _interp_matrix(src: int, dst: int) -> np.ndarray:
    """1-d linear interpolation weights mapping ``src`` samples to ``dst`` (align corners off)."""
    pos = (np.arange(dst) + 0.5) * src / dst - 0.5
    pos = np.clip(pos, 0, src - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    m = np.zeros((dst, src))
    m[np.arange(dst), lo] += 1 - frac
    m[np.arange(dst), hi] += frac
    return m


def _positional(params: Params, cfg: VitConfig, grid: int) -> Tensor:
    pos = params["vit.pos_embed"]
    if grid == cfg.grid:
        return pos
    one_d = _interp_matrix(cfg.grid, grid)
    weights = np.kron(one_d, one_d).astype(pos.dtype)
    patch_pos = T.matmul(weights, pos[1:])
    return T.concat([pos[0:1], patch_pos], axis=0)


def _attention(x: Tensor, params: Params, prefix: str, cfg: VitConfig) -> tuple[Tensor, np.ndarray]:
    b, n, d = x.shape
    heads = cfg.num_heads
    dh = d // heads
    qkv = T.matmul(x, params[prefix + "qkv.weight"]) + params[prefix + "qkv.bias"]
    qkv = qkv.reshape(b, n, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.matmul(q, k.swapaxes(-1, -2)) * (dh**-0.5)
    attn = T.softmax(scores, axis=-1)
    out = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, n, d)
    out = T.matmul(out, params[prefix + "proj.weight"]) + params[prefix + "proj.bias"]
    return out, attn.data


def forward(tokens: Tensor, cfg: VitConfig, params: Params) -> TokenSet:
    """Run the transformer on patch embeddings ``[N, d]`` or ``[B, N, d]``.

    Prepends the class token, adds positional embeddings, applies ``depth``
    pre-norm attention/MLP blocks and a final layer norm.

    Raises:
        NumericError: when activations become non-finite; ``.layer`` holds
            the block index.
    """
    single = tokens.ndim == 2
    if single:
        tokens = tokens.reshape(1, *tokens.shape)
    b, n, d = tokens.shape
    grid = int(round(np.sqrt(n)))
    if grid * grid != n or d != cfg.embed_dim:
        raise ShapeError(f"tokens of shape {tokens.shape[1:]} do not fit a square grid with d={cfg.embed_dim}")
    cls = T.broadcast_to(params["vit.cls_token"].reshape(1, 1, d), (b, 1, d))
    x = T.concat([cls, tokens], axis=1) + _positional(params, cfg, grid)
    maps = []
    for i in range(cfg.depth):
        p = f"vit.blocks.{i}."
        h = T.layer_norm(x, params[p + "norm1.gain"], params[p + "norm1.bias"])
        attn_out, attn = _attention(h, params, p + "attn.", cfg)
        x = x + attn_out
        h = T.layer_norm(x, params[p + "norm2.gain"], params[p + "norm2.bias"])
        h = T.gelu(T.matmul(h, params[p + "mlp.fc1.weight"]) + params[p + "mlp.fc1.bias"])
        x = x + (T.matmul(h, params[p + "mlp.fc2.weight"]) + params[p + "mlp.fc2.bias"])
        if not np.isfinite(x.data).all():
            raise NumericError(f"non-finite activations after block {i}", layer=i)
        maps.append(attn)
    x = T.layer_norm(x, params["vit.norm.gain"], params["vit.norm.bias"])
    attn_maps = np.stack(maps, axis=1)
    if single:
        x = x.reshape(n + 1, d)
        return TokenSet(cls=x[0], patches=x[1:], attn=attn_maps[0], tokens=x)
    return TokenSet(cls=x[:, 0], patches=x[:, 1:], attn=attn_maps, tokens=x)


def encode(params: Params, cfg: VitConfig, images, masks=None) -> TokenSet:
    """Patchify, optionally substitute mask tokens, and run :func:`forward`."""
    images = np.asarray(images)
    size = images.shape[-1]
    tokens = patchify(images, params, cfg, image_size=size)
    if masks is not None:
        tokens = apply_mask_tokens(tokens, masks, params["vit.mask_token"])
    return forward(tokens, cfg, params)


def cls_attention_weights(ts: TokenSet) -> np.ndarray:
    """Head-averaged last-layer attention of the class token over patches, summing to 1."""
    attn = ts.attn
    w = attn[..., -1, :, 0, 1:].mean(axis=-2)
    return w / w.sum(axis=-1, keepdims=True)
