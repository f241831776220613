"""Speech encoder: strided temporal-conv feature extractor, convolutional
positional encoding, pre-norm transformer stack, bottleneck adapters, and
time/feature masking of the feature sequence.

Desk-scale defaults (two conv layers of stride 2, model dim 32, 4 layers)
keep toy runs fast; ``full_scale`` presets carry the reference sizes of
the production-scale system (downsampling 320, dim 1024, 24 layers).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Linear, LayerNorm, Module, NDArray, Parameter
from .errors import ConfigError, ContractError, DataError


@dataclass
class FeatureExtractorConfig:
    num_layers: int = 2
    kernel_widths: tuple = (2, 2)
    strides: tuple = (2, 2)
    channels: int = 16
    out_dim: int = 32

    def __post_init__(self):
        self.kernel_widths = tuple(self.kernel_widths)
        self.strides = tuple(self.strides)
        if len(self.kernel_widths) != self.num_layers or len(self.strides) != self.num_layers:
            raise ConfigError("kernel_widths and strides must list one entry per conv layer")
        if any(s < 1 for s in self.strides) or any(k < 1 for k in self.kernel_widths):
            raise ConfigError("kernel widths and strides must be >= 1")
        if self.down_factor < 1:
            raise ConfigError("down factor must be >= 1")

    @property
    def down_factor(self) -> int:
        """Total temporal downsampling: the product of the conv strides."""
        return math.prod(self.strides)

    @classmethod
    def full_scale(cls) -> "FeatureExtractorConfig":
        """Production-size preset: seven conv layers, downsampling 320,
        512-channel feature maps, 1024-dim output."""
        return cls(
            num_layers=7,
            kernel_widths=(10, 3, 3, 3, 3, 2, 2),
            strides=(5, 2, 2, 2, 2, 2, 2),
            channels=512,
            out_dim=1024,
        )


@dataclass
class AdapterConfig:
    hidden_ratio: float = 0.25

    def __post_init__(self):
        if self.hidden_ratio <= 0:
            raise ConfigError("adapter hidden_ratio must be positive")

    def hidden_dim(self, model_dim: int) -> int:
        return max(1, round(model_dim * self.hidden_ratio))


@dataclass
class EncoderConfig:
    num_layers: int = 4
    model_dim: int = 32
    ffn_dim: int = 64
    num_heads: int = 4
    pos_kernel: int = 7
    adapter: AdapterConfig | None = None

    def __post_init__(self):
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.pos_kernel < 1:
            raise ConfigError("pos_kernel must be >= 1")

    @classmethod
    def full_scale(cls) -> "EncoderConfig":
        return cls(num_layers=24, model_dim=1024, ffn_dim=3072, num_heads=16, pos_kernel=128)


@dataclass
class MaskConfig:
    time_prob: float = 0.3
    time_span: int = 6
    feat_prob: float = 0.5
    feat_span: int = 64

    def __post_init__(self):
        for p in (self.time_prob, self.feat_prob):
            if not 0.0 <= p <= 1.0:
                raise ConfigError("mask probabilities must lie in [0, 1]")
        if self.time_span < 1 or self.feat_span < 1:
            raise ConfigError("mask spans must be >= 1")


@dataclass
class MaskRecord:
    """Which indices were chosen as span starts, and the resulting masks."""

    time_starts: list = field(default_factory=list)
    time_mask: np.ndarray | None = None
    feat_starts: list = field(default_factory=list)
    feat_mask: np.ndarray | None = None

    @property
    def masked_time_fraction(self) -> float:
        return float(self.time_mask.mean()) if self.time_mask is not None else 0.0


def draw_mask_span_batch(
    rows: int, length: int, prob: float, span: int, rng: np.random.Generator
) -> np.ndarray:
    """Vectorized span masking for a batch: one independent draw per row,
    same two-step procedure as draw_mask_spans."""
    if prob <= 0.0 or length == 0:
        return np.zeros((rows, length), dtype=bool)
    starts = rng.random((rows, length)) < prob
    mask = np.zeros((rows, length), dtype=bool)
    for off in range(min(span, length)):
        mask[:, off:] |= starts[:, : length - off]
    return mask


def draw_mask_spans(length: int, prob: float, span: int, rng: np.random.Generator):
    """Two-step span masking: every index becomes a span start with
    probability ``prob``; a start masks ``span`` consecutive indices,
    clipped at the boundary. Overlapping spans are allowed.

    Returns (bool mask of shape (length,), list of start indices).
    """
    mask = np.zeros(length, dtype=bool)
    starts = []
    if prob <= 0.0 or length == 0:
        return mask, starts
    draws = rng.random(length) < prob
    for start in np.flatnonzero(draws):
        starts.append(int(start))
        mask[start : start + span] = True
    return mask, starts


class MultiHeadAttention(Module):
    """Scaled dot-product attention over batched sequences.

    Queries come from ``q_in`` (B, L, d); keys/values from ``kv_in``
    (B, T, d). ``mask`` is an additive numpy array broadcastable to
    (B, H, L, T); use large negatives to exclude positions.
    """

    def __init__(self, dim, num_heads, rng, dtype=np.float64):
        self.wq = Linear(dim, dim, rng, dtype)
        self.wk = Linear(dim, dim, rng, dtype)
        self.wv = Linear(dim, dim, rng, dtype)
        self.wo = Linear(dim, dim, rng, dtype)
        self.num_heads = num_heads
        self.head_dim = dim // num_heads

    def _split(self, x: NDArray, B: int, L: int) -> NDArray:
        x = dc.reshape(x, (B, L, self.num_heads, self.head_dim))
        return dc.transpose(x, (0, 2, 1, 3))

    def __call__(self, q_in: NDArray, kv_in: NDArray, mask: np.ndarray | None = None) -> NDArray:
        B, L, d = q_in.shape
        T = kv_in.shape[1]
        q = self._split(self.wq(q_in), B, L)
        k = self._split(self.wk(kv_in), B, T)
        v = self._split(self.wv(kv_in), B, T)
        scores = dc.mul(dc.matmul(q, dc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.head_dim))
        if mask is not None:
            scores = dc.add(scores, dc.as_ndarray(mask.astype(scores.dtype)))
        attn = dc.softmax_rows(scores)
        ctx = dc.matmul(attn, v)
        ctx = dc.reshape(dc.transpose(ctx, (0, 2, 1, 3)), (B, L, d))
        return self.wo(ctx)


class Adapter(Module):
    """Bottleneck feed-forward block: down-project, ReLU, up-project, add.

    The up-projection starts at zero, so a freshly inserted adapter is an
    exact identity and the surrounding network's function is preserved.
    """

    def __init__(self, dim, hidden, rng, dtype=np.float64):
        self.down = Linear(dim, hidden, rng, dtype)
        self.up = Linear(hidden, dim, rng, dtype, zero_init=True)

    def __call__(self, x: NDArray) -> NDArray:
        return dc.add(x, self.up(dc.relu(self.down(x))))


class EncoderLayer(Module):
    """Pre-norm transformer layer: LN -> self-attention -> residual,
    LN -> FC -> ReLU -> FC -> residual. Adapters, when inserted, run at
    the end of each residual branch, before the add."""

    def __init__(self, cfg: EncoderConfig, rng, dtype=np.float64):
        d = cfg.model_dim
        self.ln_attn = LayerNorm(d, dtype)
        self.attn = MultiHeadAttention(d, cfg.num_heads, rng, dtype)
        self.ln_ffn = LayerNorm(d, dtype)
        self.fc1 = Linear(d, cfg.ffn_dim, rng, dtype)
        self.fc2 = Linear(cfg.ffn_dim, d, rng, dtype)
        self.adapter_attn: Adapter | None = None
        self.adapter_ffn: Adapter | None = None

    def __call__(self, x: NDArray, adapters_active: bool) -> NDArray:
        normed = self.ln_attn(x)
        h = self.attn(normed, normed)
        if adapters_active and self.adapter_attn is not None:
            h = self.adapter_attn(h)
        x = dc.add(x, h)
        h = self.fc2(dc.relu(self.fc1(self.ln_ffn(x))))
        if adapters_active and self.adapter_ffn is not None:
            h = self.adapter_ffn(h)
        return dc.add(x, h)


class FeatureExtractor(Module):
    """Maps raw waveforms (B, S) to feature sequences (B, T, d) with
    T = floor(S / r). Each conv layer right-pads so that its output length
    is exactly floor(input / stride); every feature vector's receptive
    field is a contiguous input window. GeLU after every conv layer, then
    a fully-connected up-projection to the model dimension."""

    def __init__(self, cfg: FeatureExtractorConfig, rng, dtype=np.float64):
        self.cfg = cfg
        self.conv_w = []
        self.conv_b = []
        c_in = 1
        for k in range(cfg.num_layers):
            kw = cfg.kernel_widths[k]
            w = rng.normal(0.0, 1.0 / np.sqrt(c_in * kw), size=(cfg.channels, c_in, kw))
            self.conv_w.append(Parameter(w.astype(dtype)))
            self.conv_b.append(Parameter(np.zeros(cfg.channels, dtype=dtype)))
            c_in = cfg.channels
        self.proj = Linear(cfg.channels, cfg.out_dim, rng, dtype)

    def __call__(self, waveform: NDArray) -> NDArray:
        if waveform.ndim != 2:
            raise ContractError(f"expected batched waveform (B, S), got shape {waveform.shape}")
        S = waveform.shape[1]
        if S < self.cfg.down_factor:
            raise DataError(
                f"waveform of {S} samples is shorter than the downsampling factor "
                f"{self.cfg.down_factor}"
            )
        x = dc.reshape(waveform, (waveform.shape[0], 1, S))
        for k in range(self.cfg.num_layers):
            x = dc.conv1d(x, self.conv_w[k], self.conv_b[k], stride=self.cfg.strides[k])
            x = dc.gelu(x)
        x = dc.transpose(x, (0, 2, 1))
        return self.proj(x)


class PositionalConv(Module):
    """Residual convolutional positional encoding: f + conv(f), with
    same-padding so the sequence length is preserved."""

    def __init__(self, dim, kernel, rng, dtype=np.float64):
        w = rng.normal(0.0, 1.0 / np.sqrt(dim * kernel), size=(dim, dim, kernel))
        self.w = Parameter(w.astype(dtype))
        self.b = Parameter(np.zeros(dim, dtype=dtype))

    def __call__(self, f: NDArray) -> NDArray:
        x = dc.transpose(f, (0, 2, 1))
        x = dc.conv1d(x, self.w, self.b, stride=1, padding="same")
        return dc.add(f, dc.transpose(x, (0, 2, 1)))


class TransformerEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng, dtype=np.float64):
        self.cfg = cfg
        self.layers = [EncoderLayer(cfg, rng, dtype) for _ in range(cfg.num_layers)]
        self.final_ln = LayerNorm(cfg.model_dim, dtype)

    def __call__(self, f: NDArray, adapters_active: bool = True) -> NDArray:
        x = f
        for layer in self.layers:
            x = layer(x, adapters_active)
        return self.final_ln(x)


class SpeechEncoder(Module):
    """Feature extractor + positional conv + transformer stack, plus the
    learned time-mask embedding used by feature masking."""

    def __init__(
        self,
        fcfg: FeatureExtractorConfig,
        ecfg: EncoderConfig,
        rng: np.random.Generator,
        dtype=np.float64,
    ):
        if fcfg.out_dim != ecfg.model_dim:
            raise ConfigError(
                f"feature extractor out_dim {fcfg.out_dim} must equal encoder model_dim "
                f"{ecfg.model_dim}"
            )
        self.fcfg = fcfg
        self.ecfg = ecfg
        self.extractor = FeatureExtractor(fcfg, rng, dtype)
        self.pos_conv = PositionalConv(ecfg.model_dim, ecfg.pos_kernel, rng, dtype)
        self.transformer = TransformerEncoder(ecfg, rng, dtype)
        self.mask_emb = Parameter(rng.normal(0.0, 0.1, size=ecfg.model_dim).astype(dtype))
        self.has_adapters = False

    @property
    def down_factor(self) -> int:
        return self.fcfg.down_factor

    def extract_features(self, waveform) -> NDArray:
        """Waveforms (B, S) or (S,) to features (B, T, d), T = S // r."""
        wave = dc.as_ndarray(waveform)
        if wave.ndim == 1:
            wave = dc.reshape(wave, (1, wave.shape[0]))
        return self.extractor(wave)

    def positional_encode(self, f: NDArray) -> NDArray:
        return self.pos_conv(f)

    def encode_context(self, f: NDArray, adapters_active: bool = True) -> NDArray:
        if f.shape[-1] != self.ecfg.model_dim:
            raise ConfigError(
                f"feature dim {f.shape[-1]} does not match encoder model_dim {self.ecfg.model_dim}"
            )
        return self.transformer(self.positional_encode(f), adapters_active)

    def __call__(self, waveform, adapters_active: bool = True) -> NDArray:
        return self.encode_context(self.extract_features(waveform), adapters_active)

    # -- adapters -----------------------------------------------------------

    def insert_adapters(self, acfg: AdapterConfig, rng: np.random.Generator) -> int:
        """Insert two zero-initialized adapters per layer (after the
        attention block and after the FC block, inside the residual) and
        freeze all pre-existing encoder parameters. Returns the number of
        added adapter parameters."""
        if self.has_adapters:
            raise ContractError("adapters already inserted")
        self.set_trainable(False)
        d = self.ecfg.model_dim
        h = acfg.hidden_dim(d)
        dtype = self.mask_emb.value.dtype
        added = 0
        for layer in self.transformer.layers:
            layer.adapter_attn = Adapter(d, h, rng, dtype)
            layer.adapter_ffn = Adapter(d, h, rng, dtype)
            added += layer.adapter_attn.param_count() + layer.adapter_ffn.param_count()
        self.has_adapters = True
        return added

    def adapter_params(self) -> list[tuple[str, Parameter]]:
        out = []
        for i, layer in enumerate(self.transformer.layers):
            for tag, ad in (("adapter_attn", layer.adapter_attn), ("adapter_ffn", layer.adapter_ffn)):
                if ad is not None:
                    out.extend(
                        (f"transformer.layers.{i}.{tag}.{n}", p) for n, p in ad.named_params()
                    )
        return out

    # -- masking ------------------------------------------------------------

    def mask_features(self, f: NDArray, mcfg: MaskConfig, rng: np.random.Generator):
        """Apply time-span masking (frames replaced by the learned mask
        embedding) and feature-band masking (channels zeroed) to one
        feature sequence (T, d) or a batch (B, T, d) sharing one draw.

        Returns (masked features, MaskRecord). With both probabilities at
        zero the input is returned unchanged.
        """
        squeeze = f.ndim == 2
        if squeeze:
            f = dc.reshape(f, (1,) + tuple(f.shape))
        T, d = f.shape[1], f.shape[2]
        time_mask, time_starts = draw_mask_spans(T, mcfg.time_prob, mcfg.time_span, rng)
        feat_span = min(mcfg.feat_span, d)
        feat_mask, feat_starts = draw_mask_spans(d, mcfg.feat_prob, feat_span, rng)
        record = MaskRecord(time_starts, time_mask, feat_starts, feat_mask)
        out = f
        if time_mask.any():
            mt = time_mask.astype(f.dtype)[None, :, None]
            out = dc.add(dc.mul(out, 1.0 - mt), dc.mul(self.mask_emb.node, dc.as_ndarray(mt)))
        if feat_mask.any():
            keep = (~feat_mask).astype(f.dtype)[None, None, :]
            out = dc.mul(out, keep)
        if squeeze:
            out = dc.reshape(out, (T, d))
        return out, record

    def mask_features_batch(self, f: NDArray, mcfg: MaskConfig, rng: np.random.Generator):
        """Per-utterance independent masking over a batch (B, T, d).

        Returns (masked features, time mask (B, T) bool, feature mask
        (B, d) bool)."""
        B, T, d = f.shape
        time_mask = draw_mask_span_batch(B, T, mcfg.time_prob, mcfg.time_span, rng)
        feat_mask = draw_mask_span_batch(B, d, mcfg.feat_prob, min(mcfg.feat_span, d), rng)
        out = f
        if time_mask.any():
            mt = time_mask.astype(f.dtype)[:, :, None]
            out = dc.add(dc.mul(out, 1.0 - mt), dc.mul(self.mask_emb.node, dc.as_ndarray(mt)))
        if feat_mask.any():
            keep = (~feat_mask).astype(f.dtype)[:, None, :]
            out = dc.mul(out, keep)
        return out, time_mask, feat_mask
