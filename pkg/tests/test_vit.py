import numpy as np
import pytest

from peft_forge import archive, tensor as T, vit
from peft_forge.vit import TINY, VIT_B_16, VIT_S_16, ForwardHooks, Tensor, ViTConfig, ViTModel


def rand_images(b, cfg, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, size=(b, 3, cfg.image_size, cfg.image_size)).astype(np.float32)


class TestConfig:
    def test_tiny_token_count(self):
        assert TINY.n == 5

    def test_vits16_tokens_at_128(self):
        assert VIT_S_16.n == 65

    def test_invalid_head_split_rejected(self):
        with pytest.raises(vit.ConfigError):
            ViTConfig(image_size=4, patch_size=2, d=9, L=1, n_h=2)

    def test_invalid_patch_grid_rejected(self):
        with pytest.raises(vit.ConfigError):
            ViTConfig(image_size=5, patch_size=2, d=8, L=1, n_h=2)


class TestForward:
    def test_zero_weights_uniform_attention(self):
        model = ViTModel.random_init(TINY, seed=0)
        for name, t in model.params.items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "gamma":
                t.data[...] = 1.0
            else:
                t.data[...] = 0.0
        out = vit.forward(model, rand_images(2, TINY), trace=True)
        assert np.isfinite(out.cls_embeddings.data).all()
        for a in out.attention:
            np.testing.assert_allclose(a, 1.0 / TINY.n, atol=1e-6)

    def test_neutral_hooks_identity(self):
        model = ViTModel.random_init(TINY, seed=1)
        imgs = rand_images(3, TINY, seed=2)
        plain = vit.forward(model, imgs).cls_embeddings.data
        hooks = ForwardHooks(
            attn_scale={i: Tensor(np.ones((TINY.n_h, TINY.n, TINY.n))) for i in range(TINY.L)},
            dra={i: (Tensor(np.zeros(TINY.d)), Tensor(np.zeros(TINY.d))) for i in range(TINY.L)},
        )
        hooked = vit.forward(model, imgs, hooks=hooks).cls_embeddings.data
        assert np.abs(hooked - plain).max() < 1e-6

    def test_attention_rows_normalized_with_hooks(self):
        model = ViTModel.random_init(TINY, seed=3)
        rng = np.random.default_rng(4)
        hooks = ForwardHooks(
            attn_scale={0: Tensor(rng.uniform(0.5, 2, (TINY.n_h, TINY.n, TINY.n)))},
            kv_prefix={1: (Tensor(rng.normal(size=(3, TINY.d))),
                           Tensor(rng.normal(size=(3, TINY.d))))},
        )
        out = vit.forward(model, rand_images(2, TINY), hooks=hooks, trace=True)
        for a in out.attention:
            np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-5)

    def test_forward_deterministic(self):
        model = ViTModel.random_init(TINY, seed=5)
        imgs = rand_images(2, TINY, seed=6)
        r1 = vit.forward(model, imgs).cls_embeddings.data
        r2 = vit.forward(model, imgs).cls_embeddings.data
        assert np.array_equal(r1, r2)

    def test_residual_structure(self):
        # zeroing a block's output projection must still pass the input through
        model = ViTModel.random_init(TINY, seed=7)
        imgs = rand_images(1, TINY, seed=8)
        base = vit.forward(model, imgs).cls_embeddings.data
        crippled = model.copy()
        for i in range(TINY.L):
            crippled.params[f"blocks.{i}.attn.w_o"].data[...] = 0.0
            crippled.params[f"blocks.{i}.mlp.fc2.weight"].data[...] = 0.0
        passthrough = vit.forward(crippled, imgs).cls_embeddings.data
        assert np.isfinite(passthrough).all()
        assert not np.allclose(passthrough, base)

    def test_hook_layer_out_of_range(self):
        model = ViTModel.random_init(TINY, seed=9)
        hooks = ForwardHooks(dra={TINY.L: (Tensor(np.zeros(TINY.d)), Tensor(np.zeros(TINY.d)))})
        with pytest.raises(vit.ConfigError):
            vit.forward(model, rand_images(1, TINY), hooks=hooks)

    def test_image_shape_mismatch(self):
        model = ViTModel.random_init(TINY, seed=10)
        with pytest.raises(T.DimensionError):
            vit.forward(model, np.zeros((1, 3, 8, 8), dtype=np.float32))

    def test_prompt_tokens_change_sequence_but_cls_is_first(self):
        model = ViTModel.random_init(TINY, seed=11)
        rng = np.random.default_rng(12)
        hooks = ForwardHooks(prompt_shallow=Tensor(rng.normal(size=(4, TINY.d))))
        out = vit.forward(model, rand_images(1, TINY), hooks=hooks, trace=True)
        assert out.attention[0].shape[-1] == TINY.n + 4
        assert out.cls_embeddings.shape == (1, TINY.d)


class TestParameterCounts:
    def test_tiny_layernorm_params(self):
        model = ViTModel.random_init(TINY)
        count = vit.count_parameters(model, lambda n: "norm" in n)
        assert count == 2 * 2 * 2 * 8 + 2 * 8 == 80

    def test_vits16_total_params(self):
        total = sum(np.prod(s) for s in vit.parameter_shapes(VIT_S_16).values())
        assert 21_000_000 <= total <= 23_000_000

    def test_vits16_layernorm_band(self):
        shapes = vit.parameter_shapes(VIT_S_16)
        ln = sum(np.prod(s) for n, s in shapes.items() if "norm" in n)
        assert 18_000 <= ln <= 20_000

    def test_vitb16_layernorm_band(self):
        shapes = vit.parameter_shapes(VIT_B_16)
        ln = sum(np.prod(s) for n, s in shapes.items() if "norm" in n)
        assert 36_000 <= ln <= 39_000


class TestArchive:
    def test_round_trip_byte_identical(self, tmp_path):
        model = ViTModel.random_init(TINY, seed=13)
        p1, p2 = tmp_path / "a.pfwa", tmp_path / "b.pfwa"
        archive.save_archive(p1, model.state_dict())
        loaded = archive.load_archive(p1)
        archive.save_archive(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()

    def test_load_weights_round_trip_values(self, tmp_path):
        model = ViTModel.random_init(TINY, seed=14)
        path = tmp_path / "m.pfwa"
        archive.save_archive(path, model.state_dict())
        loaded = vit.load_weights(archive.load_archive(path), TINY)
        for name, t in model.params.items():
            assert np.array_equal(t.data, loaded.params[name].data)

    def test_missing_tensor_named(self, tmp_path):
        model = ViTModel.random_init(TINY, seed=15)
        sd = model.state_dict()
        del sd["blocks.0.norm1.gamma"]
        with pytest.raises(vit.MissingTensorError, match="blocks.0.norm1.gamma"):
            vit.load_weights(sd, TINY)

    def test_shape_mismatch_named(self):
        model = ViTModel.random_init(TINY, seed=16)
        sd = model.state_dict()
        sd["blocks.1.attn.w_q"] = np.zeros((3, 3), dtype=np.float32)
        with pytest.raises(vit.ConfigError, match="blocks.1.attn.w_q"):
            vit.load_weights(sd, TINY)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.pfwa"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(archive.ArchiveError):
            archive.load_archive(path)

    def test_pos_embed_interpolated_from_other_resolution(self):
        big = ViTConfig(image_size=8, patch_size=2, d=8, L=2, n_h=2)  # 17 tokens
        model = ViTModel.random_init(big, seed=17)
        sd = model.state_dict()
        loaded = vit.load_weights(sd, TINY)  # 5 tokens
        assert loaded.params["pos_embed"].shape == (TINY.n, TINY.d)
        # CLS row passes through untouched
        assert np.array_equal(loaded.params["pos_embed"].data[0], sd["pos_embed"][0])
