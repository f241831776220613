import numpy as np
import pytest

from speechkd import diffcore as dc
from speechkd.encoder import (
    AdapterConfig,
    EncoderConfig,
    FeatureExtractorConfig,
    MaskConfig,
    SpeechEncoder,
    draw_mask_spans,
)
from speechkd.errors import ConfigError, ContractError, DataError


def make_encoder(seed=0, fcfg=None, ecfg=None, **kw):
    fcfg = fcfg or FeatureExtractorConfig(**kw.pop("f", {}))
    ecfg = ecfg or EncoderConfig(**kw.pop("e", {}))
    return SpeechEncoder(fcfg, ecfg, np.random.default_rng(seed))


def test_feature_length_is_floor_s_over_r():
    enc = make_encoder()
    wave = np.random.default_rng(0).normal(size=64).astype(np.float64)
    f = enc.extract_features(wave)
    assert f.shape == (1, 16, 32)


@pytest.mark.parametrize("seed", range(6))
def test_feature_length_random_configs(seed):
    rng = np.random.default_rng(seed)
    n_layers = int(rng.integers(1, 4))
    strides = tuple(int(rng.integers(1, 4)) for _ in range(n_layers))
    kernels = tuple(int(rng.integers(s, s + 3)) for s in strides)
    fcfg = FeatureExtractorConfig(n_layers, kernels, strides, channels=4, out_dim=8)
    ecfg = EncoderConfig(num_layers=1, model_dim=8, ffn_dim=8, num_heads=2)
    enc = SpeechEncoder(fcfg, ecfg, rng)
    S = int(rng.integers(fcfg.down_factor, 200))
    f = enc.extract_features(rng.normal(size=S))
    assert f.shape[1] == S // fcfg.down_factor


def test_full_scale_presets_match_reference_sizes():
    fcfg = FeatureExtractorConfig.full_scale()
    assert fcfg.down_factor == 320
    assert fcfg.out_dim == 1024
    assert fcfg.num_layers == 7
    assert fcfg.channels == 512
    ecfg = EncoderConfig.full_scale()
    assert (ecfg.num_layers, ecfg.model_dim, ecfg.ffn_dim, ecfg.num_heads) == (24, 1024, 3072, 16)


def test_input_shorter_than_down_factor_rejected():
    enc = make_encoder()
    with pytest.raises(DataError):
        enc.extract_features(np.ones(3))


def test_feature_locality_against_receptive_field_extents():
    # oracle: with per-layer kernels k_i and strides s_i, output frame t
    # sees input samples [t*r, t*r + R) where R = 1 + sum((k_i-1)*prod(s_j<i))
    fcfg = FeatureExtractorConfig(2, (3, 2), (2, 2), channels=4, out_dim=8)
    ecfg = EncoderConfig(num_layers=1, model_dim=8, ffn_dim=8, num_heads=2)
    enc = SpeechEncoder(fcfg, ecfg, np.random.default_rng(1))
    R = 1 + (3 - 1) * 1 + (2 - 1) * 2
    r = fcfg.down_factor
    S = 41
    rng = np.random.default_rng(2)
    wave = rng.normal(size=S)
    f0 = enc.extract_features(wave).data.copy()
    wave2 = wave.copy()
    wave2[S - 1] += 5.0
    f1 = enc.extract_features(wave2).data
    for t in range(f0.shape[1]):
        if t * r + R <= S - 1:
            assert np.array_equal(f0[0, t], f1[0, t]), f"frame {t} should not see sample {S-1}"
    assert not np.array_equal(f0[0, -1], f1[0, -1])


def test_positional_encode_preserves_shape_and_zero_case():
    enc = make_encoder()
    for T in (1, 5, 30):
        f = dc.as_ndarray(np.random.default_rng(T).normal(size=(1, T, 32)))
        assert enc.positional_encode(f).shape == (1, T, 32)
    z = dc.as_ndarray(np.zeros((1, 9, 32)))
    assert np.array_equal(enc.positional_encode(z).data, np.zeros((1, 9, 32)))


def test_positional_encode_interior_shift_equivariance():
    enc = make_encoder(seed=3)
    rng = np.random.default_rng(4)
    T, d = 20, 32
    f = rng.normal(size=(T, d))
    shifted = np.vstack([rng.normal(size=(1, d)), f[:-1]])
    out = enc.positional_encode(dc.as_ndarray(f[None])).data[0]
    out_s = enc.positional_encode(dc.as_ndarray(shifted[None])).data[0]
    k = enc.ecfg.pos_kernel
    lo, hi = k // 2, T - 1 - k // 2
    for t in range(lo, hi):
        assert np.allclose(out[t], out_s[t + 1], atol=1e-12)


def test_encode_context_shape_and_config_mismatch():
    enc = make_encoder()
    f = dc.as_ndarray(np.random.default_rng(0).normal(size=(2, 7, 32)))
    assert enc.encode_context(f).shape == (2, 7, 32)
    with pytest.raises(ConfigError):
        enc.encode_context(dc.as_ndarray(np.zeros((2, 7, 16))))


def test_batch_order_equivariance():
    enc = make_encoder(seed=5)
    rng = np.random.default_rng(6)
    waves = rng.normal(size=(3, 48))
    out = enc(dc.as_ndarray(waves)).data
    perm = [2, 0, 1]
    out_p = enc(dc.as_ndarray(waves[perm])).data
    assert np.array_equal(out[perm], out_p)


def test_zero_init_adapters_are_bit_exact_identity():
    enc = make_encoder(seed=7)
    wave = dc.as_ndarray(np.random.default_rng(8).normal(size=(2, 40)))
    before = enc(wave).data.copy()
    enc.insert_adapters(AdapterConfig(), np.random.default_rng(9))
    after = enc(wave, adapters_active=True).data
    assert np.array_equal(before, after)
    off = enc(wave, adapters_active=False).data
    assert np.array_equal(before, off)


def test_adapter_param_count_d16():
    fcfg = FeatureExtractorConfig(2, (2, 2), (2, 2), channels=4, out_dim=16)
    ecfg = EncoderConfig(num_layers=2, model_dim=16, ffn_dim=16, num_heads=2)
    enc = SpeechEncoder(fcfg, ecfg, np.random.default_rng(0))
    added = enc.insert_adapters(AdapterConfig(hidden_ratio=0.25), np.random.default_rng(1))
    # per adapter: 16*4+4 down + 4*16+16 up = 148; two per layer, two layers
    assert added == 148 * 2 * 2
    per_adapter = enc.transformer.layers[0].adapter_attn.param_count()
    assert per_adapter == 148


def test_adapter_hidden_dim_full_scale():
    assert AdapterConfig(hidden_ratio=0.25).hidden_dim(1024) == 256


def test_adapter_insertion_freezes_base_and_double_insert_fails():
    enc = make_encoder(seed=10)
    enc.insert_adapters(AdapterConfig(), np.random.default_rng(11))
    adapter_ids = {id(p) for _, p in enc.adapter_params()}
    for name, p in enc.named_params():
        assert p.trainable == (id(p) in adapter_ids), name
    with pytest.raises(ContractError):
        enc.insert_adapters(AdapterConfig(), np.random.default_rng(12))


def test_masking_disabled_returns_input_unchanged():
    enc = make_encoder()
    f = dc.as_ndarray(np.random.default_rng(1).normal(size=(10, 32)))
    out, record = enc.mask_features(f, MaskConfig(time_prob=0.0, feat_prob=0.0), np.random.default_rng(2))
    assert np.array_equal(out.data, f.data)
    assert record.time_starts == [] and record.feat_starts == []


def test_masking_full_probability_masks_every_frame():
    mask, starts = draw_mask_spans(10, 1.0, 3, np.random.default_rng(0))
    assert mask.all()
    assert starts == list(range(10))


def test_mask_record_spans_and_unmasked_frames():
    enc = make_encoder(seed=13)
    rng = np.random.default_rng(14)
    f = np.random.default_rng(15).normal(size=(50, 32))
    out, record = enc.mask_features(dc.as_ndarray(f), MaskConfig(0.2, 6, 0.0, 1), rng)
    rebuilt = np.zeros(50, dtype=bool)
    for s in record.time_starts:
        span = slice(s, min(s + 6, 50))
        assert span.stop - span.start <= 6
        rebuilt[span] = True
    assert np.array_equal(rebuilt, record.time_mask)
    for t in range(50):
        if not record.time_mask[t]:
            assert np.array_equal(out.data[t], f[t])
        else:
            assert np.array_equal(out.data[t], enc.mask_emb.value)


def _oracle_mask_fraction(T, prob, span, n_draws, seed):
    """Monte-Carlo estimate written directly from the two-step procedure:
    walk each index, flip a coin, paint the span; count painted cells."""
    import random

    rnd = random.Random(seed)
    total = 0
    for _ in range(n_draws):
        painted = [False] * T
        for idx in range(T):
            if rnd.random() < prob:
                for j in range(idx, min(idx + span, T)):
                    painted[j] = True
        total += sum(painted)
    return total / (n_draws * T)


def test_mask_fraction_matches_monte_carlo_oracle():
    T, prob, span = 100, 0.3, 6
    n_draws = 2000
    rng = np.random.default_rng(100)
    lib = np.mean([draw_mask_spans(T, prob, span, rng)[0].mean() for _ in range(n_draws)])
    oracle = _oracle_mask_fraction(T, prob, span, n_draws, seed=200)
    assert abs(lib - oracle) <= 0.02


def test_feature_mask_span_clipped_to_model_dim():
    enc = make_encoder()
    f = dc.as_ndarray(np.random.default_rng(3).normal(size=(8, 32)))
    out, record = enc.mask_features(f, MaskConfig(0.0, 1, 1.0, 64), np.random.default_rng(4))
    assert record.feat_mask.all()
    assert np.array_equal(out.data, np.zeros((8, 32)))


def test_inference_is_deterministic():
    enc = make_encoder(seed=21)
    wave = dc.as_ndarray(np.random.default_rng(22).normal(size=(1, 52)))
    a = enc(wave).data
    b = enc(wave).data
    assert np.array_equal(a, b)


def test_encoder_gradients_reach_adapters_only_when_base_frozen():
    enc = make_encoder(seed=23)
    enc.insert_adapters(AdapterConfig(), np.random.default_rng(24))
    wave = dc.as_ndarray(np.random.default_rng(25).normal(size=(1, 40)))
    enc.zero_grads()
    with dc.Tape() as tape:
        out = enc(wave)
        loss = dc.reduce_sum(dc.mul(out, out))
    tape.backward(loss)
    adapter_ids = {id(p) for _, p in enc.adapter_params()}
    saw_nonzero = False
    for name, p in enc.named_params():
        if id(p) in adapter_ids:
            saw_nonzero = saw_nonzero or np.any(p.grad != 0)
        else:
            assert not np.any(p.grad != 0), name
    assert saw_nonzero
