from __future__ import annotations

import numpy as np
import pytest

from smkd import tensor as T
from smkd.masking import MaskSpec
from smkd.tensor import NumericError, ShapeError, Tensor
from smkd.vit import (
    VitConfig,
    apply_mask_tokens,
    cls_attention_weights,
    encode,
    forward,
    init_vit_params,
    patchify,
)

CFG = VitConfig()
MICRO = VitConfig(image_size=8, patch_size=4, embed_dim=8, depth=2, num_heads=2, mlp_ratio=2.0)


@pytest.fixture(scope="module")
def params():
    return init_vit_params(CFG, np.random.default_rng(0))


def image(seed=0, size=32):
    return np.random.default_rng(seed).standard_normal((3, size, size)).astype(np.float32)


class TestConfig:
    def test_patch_count(self):
        assert CFG.num_patches == 16 and CFG.grid == 4

    @pytest.mark.parametrize("kw", [{"image_size": 30}, {"embed_dim": 66}, {"depth": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            VitConfig(**kw)


class TestPatchify:
    def test_token_count(self, params):
        assert patchify(image(), params, CFG).shape == (16, 64)

    def test_zero_image_zero_tokens(self):
        p = init_vit_params(CFG, np.random.default_rng(1))
        out = patchify(np.zeros((3, 32, 32)), p, CFG)
        assert np.array_equal(out.data, np.zeros((16, 64), dtype=np.float32))

    def test_locality(self, params):
        a = image(3)
        b = a.copy()
        b[:, :8, :8] += 1.0
        diff = np.abs(patchify(a, params, CFG).data - patchify(b, params, CFG).data).max(axis=1)
        assert diff[0] > 0 and np.all(diff[1:] == 0)

    def test_size_mismatch(self, params):
        with pytest.raises(ShapeError):
            patchify(np.zeros((3, 24, 24)), params, CFG)

    def test_row_major_order(self, params):
        # patch (row 1, col 2) is token 1 * 4 + 2
        a = np.zeros((3, 32, 32), np.float32)
        a[:, 8:16, 16:24] = 1.0
        out = patchify(a, params, CFG).data
        bias = params["vit.patch_embed.bias"].data
        changed = np.flatnonzero(np.abs(out - bias).max(axis=1) > 0)
        assert changed.tolist() == [6]


class TestMaskTokens:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.x = Tensor(rng.standard_normal((16, 8)))
        self.e = Tensor(rng.standard_normal(8))

    def test_all_false_is_identity(self):
        out = apply_mask_tokens(self.x, MaskSpec(np.zeros(16, bool), 0.0), self.e)
        assert np.array_equal(out.data, self.x.data)

    def test_all_true_is_mask_token(self):
        out = apply_mask_tokens(self.x, np.ones(16, bool), self.e)
        assert np.array_equal(out.data, np.broadcast_to(self.e.data, (16, 8)))

    @pytest.mark.parametrize("seed", range(5))
    def test_mixed_rowwise(self, seed):
        m = np.random.default_rng(seed).random(16) < 0.4
        out = apply_mask_tokens(self.x, m, self.e).data
        for i in range(16):
            assert np.array_equal(out[i], self.e.data if m[i] else self.x.data[i])

    def test_idempotent(self):
        m = np.arange(16) % 3 == 0
        once = apply_mask_tokens(self.x, m, self.e)
        assert np.array_equal(apply_mask_tokens(once, m, self.e).data, once.data)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            apply_mask_tokens(self.x, np.ones(15, bool), self.e)


class TestForward:
    def test_shapes(self, params):
        ts = forward(patchify(image(), params, CFG), CFG, params)
        assert ts.cls.shape == (64,)
        assert ts.patches.shape == (16, 64)
        assert ts.attn.shape == (4, 4, 17, 17)

    def test_batched_shapes(self, params):
        ts = encode(params, CFG, np.stack([image(1), image(2)]))
        assert ts.cls.shape == (2, 64) and ts.patches.shape == (2, 16, 64) and ts.attn.shape == (2, 4, 4, 17, 17)

    def test_attention_rows_sum_to_one(self, params):
        ts = encode(params, CFG, image())
        assert np.allclose(ts.attn.sum(axis=-1), 1.0, atol=1e-5)

    def test_deterministic(self, params):
        a = encode(params, CFG, image(4))
        b = encode(params, CFG, image(4))
        assert np.array_equal(a.tokens.data, b.tokens.data)

    def test_batch_matches_single(self, params):
        imgs = np.stack([image(5), image(6)])
        batched = encode(params, CFG, imgs)
        single = encode(params, CFG, imgs[1])
        assert np.allclose(batched.tokens.data[1], single.tokens.data, atol=1e-5)

    def test_permutation_equivariance(self):
        p = init_vit_params(CFG, np.random.default_rng(2))
        tokens = patchify(image(7), p, CFG)
        base = forward(tokens, CFG, p)
        i, j = 3, 11
        perm = np.arange(16)
        perm[[i, j]] = perm[[j, i]]
        swapped_tokens = Tensor(tokens.data[perm])
        pos = p["vit.pos_embed"].data.copy()
        pos[1:] = pos[1:][perm]
        q = dict(p)
        q["vit.pos_embed"] = Tensor(pos)
        out = forward(swapped_tokens, CFG, q)
        assert np.allclose(out.patches.data, base.patches.data[perm], atol=1e-5)
        assert np.allclose(out.cls.data, base.cls.data, atol=1e-5)

    def test_nan_reports_layer(self):
        p = init_vit_params(CFG, np.random.default_rng(3))
        bad = dict(p)
        w = p["vit.blocks.2.mlp.fc2.bias"].data.copy()
        w[0] = np.nan
        bad["vit.blocks.2.mlp.fc2.bias"] = Tensor(w)
        with pytest.raises(NumericError) as info:
            encode(bad, CFG, image())
        assert info.value.layer == 2

    def test_local_crop_size_interpolates_positions(self, params):
        ts = encode(params, CFG, image(8, size=16))
        assert ts.patches.shape == (4, 64)
        assert np.isfinite(ts.tokens.data).all()

    def test_mask_substituted_before_position(self):
        # with every patch masked, patch outputs still differ through position
        p = init_vit_params(CFG, np.random.default_rng(4))
        ts = encode(p, CFG, image(), masks=np.ones(16, bool))
        assert np.abs(ts.patches.data[0] - ts.patches.data[5]).max() > 1e-4


class TestClsAttention:
    def test_uniform_attention(self, params):
        ts = encode(params, CFG, image())
        ts.attn = np.full_like(ts.attn, 1.0 / 17)
        assert np.allclose(cls_attention_weights(ts), 1 / 16)

    def test_recomputed_from_maps(self, params):
        ts = encode(params, CFG, image(9))
        w = cls_attention_weights(ts)
        raw = ts.attn[-1, :, 0, 1:].mean(axis=0)
        assert np.allclose(w, raw / raw.sum(), atol=1e-12)
        assert abs(w.sum() - 1) < 1e-6 and np.all(w >= 0)


@pytest.mark.parametrize("seed", range(10))
def test_micro_vit_gradient_f64(seed):
    rng = np.random.default_rng(seed)
    p = init_vit_params(MICRO, rng, dtype=np.float64)
    for t in p.values():  # larger weights than the 0.02 init make the check informative
        t.data = t.data * 20 if t.ndim > 1 else t.data + rng.standard_normal(t.shape) * 0.1
    img = rng.standard_normal((2, 3, 8, 8))
    mask = np.array([[True, False, False, True], [False, False, False, False]])
    w = rng.standard_normal((2, 5, 8))

    def loss():
        return (encode(p, MICRO, img, masks=mask).tokens * w).sum()

    err = T.finite_diff_check_params(loss, list(p.values()))
    assert err < 1e-5, err


def test_composite_block_f32_against_f64_differences():
    # analytic f32 gradients compared with central differences on an f64 copy
    rng = np.random.default_rng(0)
    p64 = init_vit_params(MICRO, rng, dtype=np.float64)
    for t in p64.values():
        t.data = t.data * 20 if t.ndim > 1 else t.data + rng.standard_normal(t.shape) * 0.1
    p32 = {k: Tensor(v.data.astype(np.float32), requires_grad=True) for k, v in p64.items()}
    img = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((2, 5, 8))
    g32 = T.backward((encode(p32, MICRO, img.astype(np.float32)).tokens * w.astype(np.float32)).sum())
    analytic, numeric = [], []
    for k in p64:
        analytic.append(g32.array(p32[k]).ravel() if p32[k] in g32 else np.zeros(p32[k].size))
        numeric.append(T.numeric_gradient(lambda: (encode(p64, MICRO, img).tokens * w).sum(), p64[k]))
    assert T.max_relative_error(np.concatenate(analytic), np.concatenate(numeric)) < 1e-3
