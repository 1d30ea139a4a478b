"""Divided space-time encoder: shapes, identities, gradients."""

import numpy as np
import pytest

from clipsim import tensor as T
from clipsim.encoder import (ModelConfig, as_clip, encode_block, encode_clip,
                             encode_clips, encode_tokens, frames_to_patches,
                             init_encoder_params, patch_embed,
                             patches_to_frames, trunc_normal)
from clipsim.errors import ConfigError
from clipsim.gradcheck import finite_difference, max_relative_error
from clipsim.rng import Rng
from clipsim.tensor import Tensor

TOY = ModelConfig()


def random_clip(rng, cfg=TOY):
    return rng.uniform(0.0, 1.0,
                       size=(cfg.frames, cfg.image_size, cfg.image_size, 3)
                       ).astype(np.float32)


class TestConfig:
    def test_toy_defaults(self):
        assert TOY.spatial_patches == 4
        assert TOY.grid_side == 2
        assert TOY.head_dim == 8

    def test_divisibility_checks(self):
        with pytest.raises(ConfigError):
            ModelConfig(image_size=15)
        with pytest.raises(ConfigError):
            ModelConfig(d_model=30)

    def test_variant_dims(self):
        assert ModelConfig(variant="small", embed_dim=384).embed_dim == 384
        assert ModelConfig(variant="base", embed_dim=768).embed_dim == 768
        with pytest.raises(ConfigError):
            ModelConfig(variant="small", embed_dim=16)
        with pytest.raises(ConfigError):
            ModelConfig(variant="weird")

    def test_as_clip_clamps(self):
        raw = np.full((8, 16, 16, 3), 1.7, np.float32)
        raw[0, 0, 0, 0] = -2.0
        clip = as_clip(raw, TOY)
        assert clip.max() == 1.0 and clip.min() == 0.0
        with pytest.raises(ConfigError):
            as_clip(np.zeros((4, 16, 16, 3)), TOY)


class TestPatches:
    def test_roundtrip(self):
        rng = Rng(0)
        clip = random_clip(rng)
        p = frames_to_patches(clip, TOY.patch_size)
        assert p.shape == (8 * 4, 8 * 8 * 3)
        back = patches_to_frames(p, 8, 16, 8)
        np.testing.assert_array_equal(back, clip)

    def test_patch_order_is_row_major(self):
        clip = np.zeros((8, 16, 16, 3), np.float32)
        clip[:, 0:8, 8:16] = 1.0  # top-right patch = spatial index 1
        p = frames_to_patches(clip, 8).reshape(8, 4, -1)
        assert p[:, 1].min() == 1.0
        assert p[:, [0, 2, 3]].max() == 0.0


class TestPatchEmbed:
    def test_token_count(self):
        rng = Rng(1)
        params = init_encoder_params(TOY, rng.split("init"))
        tokens = patch_embed(random_clip(rng), params, TOY)
        assert tokens.shape == (8 * 4 + 1, 32)

    def test_zero_clip_zero_proj_leaves_positions(self):
        rng = Rng(2)
        params = init_encoder_params(TOY, rng.split("init"))
        params["patch.proj.w"] = Tensor(np.zeros((TOY.patch_values, 32),
                                                 np.float32))
        clip = np.zeros((8, 16, 16, 3), np.float32)
        tokens = patch_embed(clip, params, TOY).data
        sp = params["pos.spatial"].data
        tp = params["pos.temporal"].data
        for t in range(8):
            for s in range(4):
                np.testing.assert_allclose(tokens[1 + t * 4 + s],
                                           sp[s] + tp[t], atol=1e-7)

    def test_single_patch_locality(self):
        rng = Rng(3)
        params = init_encoder_params(TOY, rng.split("init"))
        a = random_clip(rng)
        b = a.copy()
        b[3, 8:16, 0:8] = 1.0 - b[3, 8:16, 0:8]  # frame 3, spatial index 2
        ta = patch_embed(a, params, TOY).data
        tb = patch_embed(b, params, TOY).data
        diff = np.abs(ta - tb).sum(axis=1)
        changed = np.nonzero(diff > 1e-9)[0]
        assert changed.tolist() == [1 + 3 * 4 + 2]

    def test_visible_subset(self):
        rng = Rng(4)
        params = init_encoder_params(TOY, rng.split("init"))
        clip = random_clip(rng)
        full = patch_embed(clip, params, TOY).data
        part = patch_embed(clip, params, TOY, visible=[1, 3]).data
        assert part.shape == (8 * 2 + 1, 32)
        for t in range(8):
            np.testing.assert_array_equal(part[1 + t * 2 + 0],
                                          full[1 + t * 4 + 1])
            np.testing.assert_array_equal(part[1 + t * 2 + 1],
                                          full[1 + t * 4 + 3])

    def test_empty_visible_is_cls_only(self):
        rng = Rng(5)
        params = init_encoder_params(TOY, rng.split("init"))
        tokens = patch_embed(random_clip(rng), params, TOY, visible=[])
        assert tokens.shape == (1, 32)


class TestEncodeBlock:
    def test_shape_preserved(self):
        rng = Rng(6)
        params = init_encoder_params(TOY, rng.split("init"))
        tokens = patch_embed(random_clip(rng), params, TOY)
        out = encode_block(tokens, params, TOY, 0)
        assert out.shape == tokens.shape

    def test_zeroed_branches_are_identity(self):
        rng = Rng(7)
        params = init_encoder_params(TOY, rng.split("init"))
        d = TOY.d_model
        for i in range(TOY.depth):
            for branch in ("time", "space"):
                params[f"blk{i}.{branch}.o.w"] = Tensor(np.zeros((d, d),
                                                                 np.float32))
            params[f"blk{i}.mlp.fc2.w"] = Tensor(np.zeros((4 * d, d),
                                                          np.float32))
        tokens = patch_embed(random_clip(rng), params, TOY)
        out = encode_tokens(tokens, params, TOY)
        np.testing.assert_allclose(out.data, tokens.data, atol=1e-7)

    def test_cls_only_grid(self):
        rng = Rng(8)
        params = init_encoder_params(TOY, rng.split("init"))
        tokens = patch_embed(random_clip(rng), params, TOY, visible=[])
        out = encode_tokens(tokens, params, TOY, n_space=0)
        assert out.shape == (1, 32)
        assert np.all(np.isfinite(out.data))


class TestEncodeClip:
    def test_unit_norm(self):
        rng = Rng(9)
        params = init_encoder_params(TOY, rng.split("init"))
        for _ in range(5):
            emb = encode_clip(random_clip(rng), params, TOY)
            assert emb.shape == (16,)
            assert np.linalg.norm(emb.data) == pytest.approx(1.0, abs=1e-5)

    def test_deterministic(self):
        rng = Rng(10)
        params = init_encoder_params(TOY, rng.split("init"))
        clip = random_clip(rng)
        a = encode_clip(clip, params, TOY).data
        b = encode_clip(clip, params, TOY).data
        np.testing.assert_array_equal(a, b)

    def test_same_seed_same_params(self):
        a = init_encoder_params(TOY, Rng(11).split("init"))
        b = init_encoder_params(TOY, Rng(11).split("init"))
        assert list(a) == list(b)
        for k in a:
            np.testing.assert_array_equal(a[k].data, b[k].data)

    def test_batch_order_permutes_outputs(self):
        rng = Rng(12)
        params = init_encoder_params(TOY, rng.split("init"))
        clips = [random_clip(rng) for _ in range(4)]
        batch = encode_clips(clips, params, TOY).data
        perm = [2, 0, 3, 1]
        permuted = encode_clips([clips[i] for i in perm], params, TOY).data
        np.testing.assert_array_equal(permuted, batch[perm])

    def test_hflip_changes_embedding(self):
        rng = Rng(13)
        params = init_encoder_params(TOY, rng.split("init"))
        clip = np.zeros((8, 16, 16, 3), np.float32)
        clip[:, :, :4] = 0.9  # bright left band: chirally asymmetric
        flipped = clip[:, :, ::-1].copy()
        a = encode_clip(clip, params, TOY).data
        b = encode_clip(flipped, params, TOY).data
        assert float(a @ b) < 1.0 - 1e-3

    def test_trunc_normal_bounds(self):
        t = trunc_normal(Rng(14), (4000,), std=0.02)
        assert np.abs(t.data).max() <= 0.04 + 1e-7
        assert np.abs(t.data).max() > 0.02


class TestEncoderGradients:
    def test_end_to_end_gradcheck(self):
        # Scalar loss over the full toy encoder, checked at 20 random
        # parameter coordinates in float64.
        rng = Rng(42)
        params32 = init_encoder_params(TOY, rng.split("init"))
        params = {k: Tensor(v.data.astype(np.float64))
                  for k, v in params32.items()}
        clip = random_clip(rng.split("clip"))
        w = rng.split("w").normal(size=(16,))
        wt = Tensor(w)

        def loss_value(ps):
            emb = encode_clip(clip, ps, TOY)
            return T.tensor_sum(T.mul(emb, wt))

        with T.Tape() as tape:
            loss = loss_value(params)
        grads = tape.backward(loss)

        names = sorted(params)
        pick = rng.split("pick")
        for _ in range(20):
            name = names[int(pick.integers(0, len(names)))]
            flat_idx = int(pick.integers(0, params[name].size))
            base = params[name].data.copy()
            h = 1e-5

            def at(value):
                arr = base.copy()
                arr.reshape(-1)[flat_idx] = value
                ps = dict(params)
                ps[name] = Tensor(arr)
                return loss_value(ps).item()

            x0 = base.reshape(-1)[flat_idx]
            numeric = (at(x0 + h) - at(x0 - h)) / (2 * h)
            g = grads[tape.node_id(params[name])]
            analytic = float(g.data.reshape(-1)[flat_idx])
            err = max_relative_error(np.array([analytic]),
                                     np.array([numeric]))
            assert err <= 1e-3, f"{name}[{flat_idx}]: {err:.2e}"

    def test_block_gradcheck_random_weight(self):
        rng = Rng(15)
        params32 = init_encoder_params(TOY, rng.split("init"))
        params = {k: Tensor(v.data.astype(np.float64))
                  for k, v in params32.items()}
        tokens0 = rng.normal(size=(33, 32)) * 0.5
        name = "blk0.space.v.w"

        def run(ps):
            return T.tensor_sum(encode_block(Tensor(tokens0), ps, TOY, 0))

        with T.Tape() as tape:
            out = run(params)
        analytic = tape.backward(out)[tape.node_id(params[name])].data

        def scalar(arr):
            ps = dict(params)
            ps[name] = Tensor(arr)
            return run(ps).item()

        numeric = finite_difference(scalar, params[name].data)
        assert max_relative_error(analytic, numeric) <= 1e-5
