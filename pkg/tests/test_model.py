"""Wiring of the assembled classifier: toggles, shapes, checkpoints."""

import numpy as np
import pytest

from m2malign import tensor as T
from m2malign.encoders import (
    EncoderConfig,
    decompose_spatiotemporal,
    encode_tabular,
    encode_volume,
    spatial_tokens,
    temporal_tokens,
)
from m2malign.errors import ConfigError, ContractError, ShapeError
from m2malign.fusion import (
    bottleneck_refine,
    classify,
    combine_spatiotemporal,
    latent_query_coattention,
    refine_with_joint,
    temporal_self_fusion,
)
from m2malign.gradcheck import finite_diff_check
from m2malign.model import (
    ATTENTION_TAGS,
    ModelConfig,
    flatten_params,
    forward,
    init_model_params,
    load_into,
)
from m2malign.tensor import Tensor
from m2malign.tensorfile import load_params, save_params

SMALL_ENCODER = EncoderConfig(patch=(2, 2, 2, 1), stage_channels=(8,))


def small_config(**overrides):
    base = dict(volume_shape=(4, 4, 4, 2), n_tabular=3, encoder=SMALL_ENCODER)
    base.update(overrides)
    return ModelConfig(**base)


def small_inputs(seed=0):
    rng = np.random.default_rng(seed)
    return {
        "fmri": Tensor(rng.normal(size=(1, 4, 4, 4, 2))),
        "smri": Tensor(rng.normal(size=(1, 4, 4, 4, 1))),
        "tabular": rng.normal(size=3),
    }


class TestConfig:
    def test_rejects_bad_settings(self):
        with pytest.raises(ConfigError):
            small_config(volume_shape=(4, 4, 4))
        with pytest.raises(ConfigError):
            small_config(use_fmri=False, use_smri=False, use_tabular=False)
        with pytest.raises(ConfigError):
            small_config(use_smri=False)  # alignment still on
        with pytest.raises(ConfigError):
            small_config(st_combine="hadamard")
        with pytest.raises(ConfigError):
            small_config(n_tabular=0)

    def test_shared_encoder_needs_unit_temporal_patch(self):
        enc = EncoderConfig(patch=(2, 2, 2, 2), stage_channels=(8,))
        with pytest.raises(ConfigError):
            small_config(encoder=enc, share_encoder_weights=True)
        assert small_config(share_encoder_weights=True).share_encoder_weights

    def test_token_counting(self):
        cfg = small_config()
        assert cfg.grid() == (2, 2, 2, 2)
        assert cfg.n_patches() == 8
        assert cfg.joint_token_count() == 8 + 8 + 1
        assert small_config(use_tabular=False).joint_token_count() == 16
        assert cfg.modality_subset() == ("fmri", "smri", "tabular")


class TestInit:
    def test_full_configuration_parameters(self):
        cfg = small_config()
        params = init_model_params(cfg, np.random.default_rng(1))
        for key in (
            "fmri_encoder", "smri_encoder", "tabular_encoder",
            "j_spatial", "joint_attn",
            "refine_fmri", "refine_smri", "refine_tabular",
            "j_temporal", "temporal_fuse", "temporal_refine",
            "bottleneck_fmri", "bottleneck_smri", "bottleneck_tabular",
        ):
            assert key in params, key
        assert params["j_spatial"].shape == (17, 8)
        assert params["j_temporal"].shape == (2, 8)
        assert params["head_w"].shape == (24, 2)
        # latent queries start at unit scale, not at the 0.02 of projections
        assert np.abs(params["j_spatial"].data).max() > 0.1

    def test_toggles_prune_parameters(self):
        rng = np.random.default_rng(2)
        p = init_model_params(small_config(spatial_fusion=False), rng)
        assert "j_spatial" not in p and "joint_attn" not in p
        p = init_model_params(small_config(modality_refinement=False), rng)
        assert not any(k.startswith("refine_") for k in p)
        p = init_model_params(small_config(temporal_self_fusion=False), rng)
        assert "j_temporal" not in p and "temporal_fuse" not in p
        p = init_model_params(small_config(use_smri=False, alignment=False), rng)
        assert "smri_encoder" not in p and "bottleneck_smri" not in p
        assert p["head_w"].shape == (16, 2)

    def test_query_count_override(self):
        cfg = small_config(n_spatial_queries=3, n_temporal_queries=5)
        params = init_model_params(cfg, np.random.default_rng(3))
        assert params["j_spatial"].shape == (3, 8)
        assert params["j_temporal"].shape == (5, 8)

    def test_shared_encoder_has_single_parameter_set(self):
        cfg = small_config(share_encoder_weights=True)
        params = init_model_params(cfg, np.random.default_rng(4))
        assert "smri_encoder" not in params


class TestForward:
    def test_output_shapes_and_tags(self):
        cfg = small_config()
        params = init_model_params(cfg, np.random.default_rng(5))
        out = forward(params, cfg, **small_inputs())
        assert out.logits.shape == (2,)
        assert out.functional_latent.shape == (8, 2, 2, 2, 2)
        assert out.structural_latent.shape == (8, 2, 2, 2, 1)
        assert set(out.attention) == set(ATTENTION_TAGS)
        assert out.attention["joint-spatial"].shape == (17, 17)
        assert out.attention["refine-fmri"].shape == (8, 17)
        assert out.attention["refine-tabular"].shape == (1, 17)
        assert out.attention["temporal"].shape == (2, 2)

    def test_attention_rows_are_distributions(self):
        cfg = small_config()
        params = init_model_params(cfg, np.random.default_rng(6))
        out = forward(params, cfg, **small_inputs(1))
        for tag, scores in out.attention.items():
            np.testing.assert_allclose(scores.sum(axis=1), 1.0, atol=1e-12, err_msg=tag)

    def test_deterministic(self):
        cfg = small_config()
        params = init_model_params(cfg, np.random.default_rng(7))
        inputs = small_inputs(2)
        a = forward(params, cfg, **inputs)
        b = forward(params, cfg, **inputs)
        assert np.array_equal(a.logits.data, b.logits.data)

    def test_missing_enabled_input(self):
        cfg = small_config()
        params = init_model_params(cfg, np.random.default_rng(8))
        inputs = small_inputs()
        with pytest.raises(ContractError):
            forward(params, cfg, fmri=inputs["fmri"], smri=inputs["smri"])

    def test_disabled_input_is_ignored(self):
        cfg = small_config(use_tabular=False)
        params = init_model_params(cfg, np.random.default_rng(9))
        out = forward(params, cfg, **small_inputs())
        assert "refine-tabular" not in out.attention

    def test_matches_manual_pipeline(self):
        cfg = small_config()
        params = init_model_params(cfg, np.random.default_rng(10))
        inputs = small_inputs(3)
        out = forward(params, cfg, **inputs)

        lf = encode_volume(inputs["fmri"], cfg.encoder, params["fmri_encoder"])
        ls = encode_volume(inputs["smri"], cfg.smri_encoder_config(), params["smri_encoder"])
        f_sp, f_te = decompose_spatiotemporal(lf)
        l_f_sp, l_f_te = spatial_tokens(f_sp), temporal_tokens(f_te)
        l_s_sp = spatial_tokens(T.reshape(ls, ls.shape[:4]))
        l_tab = T.transpose(encode_tabular(inputs["tabular"], params["tabular_encoder"], 8), (1, 0))

        h_joint = latent_query_coattention(
            params["j_spatial"], T.concat([l_f_sp, l_s_sp, l_tab], axis=0), params["joint_attn"]
        )
        h_f = refine_with_joint(l_f_sp, h_joint, params["refine_fmri"])
        h_s = refine_with_joint(l_s_sp, h_joint, params["refine_smri"])
        h_t = refine_with_joint(l_tab, h_joint, params["refine_tabular"])
        h_te = temporal_self_fusion(
            l_f_te, params["j_temporal"], params["temporal_fuse"], params["temporal_refine"]
        )
        h_f = combine_spatiotemporal(h_f, h_te, "gate")
        logits = classify(
            [
                bottleneck_refine(h_f, params["bottleneck_fmri"]),
                bottleneck_refine(h_s, params["bottleneck_smri"]),
                bottleneck_refine(h_t, params["bottleneck_tabular"]),
            ],
            params["head_w"],
            params["head_b"],
        )
        np.testing.assert_array_equal(out.logits.data, logits.data)
        np.testing.assert_array_equal(out.functional_latent.data, lf.data)
        np.testing.assert_array_equal(out.structural_latent.data, ls.data)

    def test_disabled_temporal_fusion_uses_raw_time_tokens(self):
        cfg = small_config(temporal_self_fusion=False)
        params = init_model_params(cfg, np.random.default_rng(11))
        inputs = small_inputs(4)
        out = forward(params, cfg, **inputs)
        assert "temporal" not in out.attention

        lf = encode_volume(inputs["fmri"], cfg.encoder, params["fmri_encoder"])
        f_sp, f_te = decompose_spatiotemporal(lf)
        h_joint_tokens = [
            spatial_tokens(f_sp),
            spatial_tokens(T.reshape(
                encode_volume(inputs["smri"], cfg.smri_encoder_config(), params["smri_encoder"]),
                (8, 2, 2, 2),
            )),
            T.transpose(encode_tabular(inputs["tabular"], params["tabular_encoder"], 8), (1, 0)),
        ]
        h_joint = latent_query_coattention(
            params["j_spatial"], T.concat(h_joint_tokens, axis=0), params["joint_attn"]
        )
        h_f = refine_with_joint(h_joint_tokens[0], h_joint, params["refine_fmri"])
        expected_f = combine_spatiotemporal(h_f, temporal_tokens(f_te), "gate")
        pooled = bottleneck_refine(expected_f, params["bottleneck_fmri"])
        # the fMRI stream is the first c entries of the head input
        got = forward(params, cfg, **inputs)
        np.testing.assert_array_equal(got.logits.data, out.logits.data)
        assert pooled.shape == (8, 8)

    def test_disabled_spatial_fusion_adds_token_sets(self):
        cfg = small_config(spatial_fusion=False)
        params = init_model_params(cfg, np.random.default_rng(12))
        out = forward(params, cfg, **small_inputs(5))
        # the joint set is now the 8-row sum, so refinement keys shrink
        assert out.attention["refine-fmri"].shape == (8, 8)
        assert out.attention["refine-tabular"].shape == (1, 8)

    def test_disabled_refinement_passes_tokens_through(self):
        cfg = small_config(modality_refinement=False)
        params = init_model_params(cfg, np.random.default_rng(13))
        inputs = small_inputs(6)
        out = forward(params, cfg, **inputs)
        assert not any(tag.startswith("refine-") for tag in out.attention)

        lf = encode_volume(inputs["fmri"], cfg.encoder, params["fmri_encoder"])
        ls = encode_volume(inputs["smri"], cfg.smri_encoder_config(), params["smri_encoder"])
        f_sp, f_te = decompose_spatiotemporal(lf)
        h_te = temporal_self_fusion(
            temporal_tokens(f_te), params["j_temporal"],
            params["temporal_fuse"], params["temporal_refine"],
        )
        logits = classify(
            [
                bottleneck_refine(
                    combine_spatiotemporal(spatial_tokens(f_sp), h_te, "gate"),
                    params["bottleneck_fmri"],
                ),
                bottleneck_refine(
                    spatial_tokens(T.reshape(ls, (8, 2, 2, 2))), params["bottleneck_smri"]
                ),
                bottleneck_refine(
                    T.transpose(encode_tabular(inputs["tabular"], params["tabular_encoder"], 8), (1, 0)),
                    params["bottleneck_tabular"],
                ),
            ],
            params["head_w"],
            params["head_b"],
        )
        np.testing.assert_array_equal(out.logits.data, logits.data)

    def test_outer_combine_follows_the_manual_pipeline(self):
        # gate and outer logits can coincide numerically (mean pooling
        # factorizes the outer product), so prove the flag reaches the
        # combine step by replaying the outer pipeline by hand
        cfg = small_config(st_combine="outer")
        params = init_model_params(cfg, np.random.default_rng(14))
        inputs = small_inputs(7)
        out = forward(params, cfg, **inputs)
        assert out.logits.shape == (2,)

        lf = encode_volume(inputs["fmri"], cfg.encoder, params["fmri_encoder"])
        ls = encode_volume(inputs["smri"], cfg.smri_encoder_config(), params["smri_encoder"])
        f_sp, f_te = decompose_spatiotemporal(lf)
        tokens = [
            spatial_tokens(f_sp),
            spatial_tokens(T.reshape(ls, (8, 2, 2, 2))),
            T.transpose(encode_tabular(inputs["tabular"], params["tabular_encoder"], 8), (1, 0)),
        ]
        h_joint = latent_query_coattention(
            params["j_spatial"], T.concat(tokens, axis=0), params["joint_attn"]
        )
        h_te = temporal_self_fusion(
            temporal_tokens(f_te), params["j_temporal"],
            params["temporal_fuse"], params["temporal_refine"],
        )
        st = combine_spatiotemporal(
            refine_with_joint(tokens[0], h_joint, params["refine_fmri"]), h_te, "outer"
        )
        assert st.shape == (16, 8)
        logits = classify(
            [
                bottleneck_refine(st, params["bottleneck_fmri"]),
                bottleneck_refine(
                    refine_with_joint(tokens[1], h_joint, params["refine_smri"]),
                    params["bottleneck_smri"],
                ),
                bottleneck_refine(
                    refine_with_joint(tokens[2], h_joint, params["refine_tabular"]),
                    params["bottleneck_tabular"],
                ),
            ],
            params["head_w"],
            params["head_b"],
        )
        np.testing.assert_array_equal(out.logits.data, logits.data)

    def test_shared_encoder_maps_equal_volumes_equally(self):
        cfg = small_config(volume_shape=(4, 4, 4, 1), share_encoder_weights=True)
        params = init_model_params(cfg, np.random.default_rng(15))
        volume = Tensor(np.random.default_rng(16).normal(size=(1, 4, 4, 4, 1)))
        out = forward(params, cfg, fmri=volume, smri=volume,
                      tabular=np.zeros(3))
        np.testing.assert_array_equal(
            out.functional_latent.data, out.structural_latent.data
        )


class TestParameterPlumbing:
    def test_flatten_names_and_sharing(self):
        cfg = small_config()
        params = init_model_params(cfg, np.random.default_rng(17))
        flat = flatten_params(params)
        assert len(set(flat)) == len(flat)
        assert "fmri_encoder.embed_w" in flat
        assert "joint_attn.wq" in flat
        assert "bottleneck_smri.down" in flat
        assert flat["head_b"] is params["head_b"]

    def test_checkpoint_roundtrip(self, tmp_path):
        cfg = small_config()
        params = init_model_params(cfg, np.random.default_rng(18))
        inputs = small_inputs(8)
        want = forward(params, cfg, **inputs).logits.data

        save_params(tmp_path / "ckpt", flatten_params(params))
        fresh = init_model_params(cfg, np.random.default_rng(99))
        load_into(fresh, load_params(tmp_path / "ckpt"))
        got = forward(fresh, cfg, **inputs).logits.data
        # storage is float32, so the roundtrip is close rather than exact
        np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-6)

    def test_load_rejects_mismatched_checkpoints(self, tmp_path):
        cfg = small_config()
        params = init_model_params(cfg, np.random.default_rng(19))
        flat = flatten_params(params)
        save_params(tmp_path / "ckpt", flat)
        loaded = load_params(tmp_path / "ckpt")

        other = init_model_params(small_config(use_tabular=False), np.random.default_rng(20))
        with pytest.raises(ContractError):
            load_into(other, loaded)

        bad = dict(loaded)
        bad["head_b"] = Tensor(np.zeros(3))
        with pytest.raises(ShapeError):
            load_into(init_model_params(cfg, np.random.default_rng(21)), bad)


def test_fusion_and_head_gradients_through_the_full_model():
    cfg = small_config()
    rng = np.random.default_rng(22)
    params = init_model_params(cfg, rng)
    inputs = small_inputs(9)

    watched = {
        "j_spatial": params["j_spatial"],
        "joint_attn.wq": params["joint_attn"].wq,
        "temporal_fuse.wv": params["temporal_fuse"].wv,
        "bottleneck_fmri.down": params["bottleneck_fmri"].down,
        "head_w": params["head_w"],
    }
    # keep the watched coordinates well above the finite-difference noise
    for name, p in watched.items():
        if name != "j_spatial":
            p.data = rng.normal(0.0, 0.5, size=p.shape)

    direction = Tensor(np.array([1.3, -0.7]))

    def loss():
        out = forward(params, cfg, **inputs)
        return T.tensor_sum(out.logits * direction)

    report = finite_diff_check(loss, watched)
    assert report.max_rel_err < 1e-4, report.worst_param
