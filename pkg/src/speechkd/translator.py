"""Encoder-decoder translation model and its fine-tuning recipe.

The decoder is a pre-norm transformer with causal self-attention,
encoder-decoder cross-attention, and a two-layer feed-forward block per
layer. Fine-tuning freezes almost everything: in ``adapters`` mode only
the encoder adapters, the decoder layer norms, and the decoder
cross-attention train; ``full`` mode unfreezes the whole encoder instead.

Training maximizes target log-likelihood with scheduled token replacement
(decoder inputs are swapped for the model's own argmax predictions with a
fixed probability), feature-sequence masking, the three-phase learning
rate schedule, and Adam.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .ctc import ctc_loss, min_frames_for  # noqa: F401  (re-exported surface)
from .datagen import BOS, EOS, PAD, BalancedSampler
from .diffcore import LayerNorm, Linear, Module, NDArray, Parameter
from .encoder import MaskConfig, MultiHeadAttention, SpeechEncoder
from .errors import ConfigError, ContractError, DataError
from .optim import Adam, lr_at


@dataclass
class DecoderConfig:
    vocab_size: int
    num_layers: int = 2
    model_dim: int = 32
    ffn_dim: int = 64
    num_heads: int = 4
    max_target_len: int = 16

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ConfigError("vocab must hold pad, bos, eos, and at least one token")
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )


class DecoderLayer(Module):
    def __init__(self, cfg: DecoderConfig, rng, dtype):
        d = cfg.model_dim
        self.ln_sa = LayerNorm(d, dtype)
        self.sa = MultiHeadAttention(d, cfg.num_heads, rng, dtype)
        self.ln_ca = LayerNorm(d, dtype)
        self.ca = MultiHeadAttention(d, cfg.num_heads, rng, dtype)
        self.ln_ffn = LayerNorm(d, dtype)
        self.fc1 = Linear(d, cfg.ffn_dim, rng, dtype)
        self.fc2 = Linear(cfg.ffn_dim, d, rng, dtype)

    def __call__(self, x: NDArray, enc: NDArray, causal_mask: np.ndarray) -> NDArray:
        x = dc.add(x, self.sa(self.ln_sa(x), self.ln_sa(x), mask=causal_mask))
        x = dc.add(x, self.ca(self.ln_ca(x), enc))
        return dc.add(x, self.fc2(dc.relu(self.fc1(self.ln_ffn(x)))))


class Decoder(Module):
    def __init__(self, cfg: DecoderConfig, rng, dtype=np.float64):
        d = cfg.model_dim
        self.cfg = cfg
        self.tok_emb = Parameter(
            rng.normal(0.0, 1.0 / np.sqrt(d), size=(cfg.vocab_size, d)).astype(dtype)
        )
        self.pos_emb = Parameter(
            rng.normal(0.0, 1.0 / np.sqrt(d), size=(cfg.max_target_len, d)).astype(dtype)
        )
        self.layers = [DecoderLayer(cfg, rng, dtype) for _ in range(cfg.num_layers)]
        self.final_ln = LayerNorm(d, dtype)
        self.out_proj = Linear(d, cfg.vocab_size, rng, dtype)

    def __call__(self, enc: NDArray, input_ids: np.ndarray) -> NDArray:
        """Log-probabilities (B, L, V) for decoder inputs (B, L); position
        l attends only to positions <= l of the prefix."""
        B, L = input_ids.shape
        if L > self.cfg.max_target_len:
            raise ValueError(f"prefix length {L} exceeds max target length {self.cfg.max_target_len}")
        x = dc.add(
            dc.gather_rows(self.tok_emb.node, input_ids),
            dc.gather_rows(self.pos_emb.node, np.arange(L)),
        )
        causal = np.triu(np.full((L, L), -1e9), k=1)
        for layer in self.layers:
            x = layer(x, enc, causal)
        return dc.log_softmax(self.out_proj(self.final_ln(x)))


class TranslationModel(Module):
    """Speech encoder plus text decoder. The freeze mask set by
    apply_finetune_policy never changes the forward computation."""

    def __init__(self, encoder: SpeechEncoder, dcfg: DecoderConfig, rng, dtype=np.float64):
        self.encoder = encoder
        self.decoder = Decoder(dcfg, rng, dtype)
        self.dtype = dtype

    def encode(self, waves, adapters_active: bool = True) -> NDArray:
        return self.encoder(waves, adapters_active=adapters_active)

    def forward_translation_logits(self, waveform, prefix) -> np.ndarray:
        """Log-probabilities (L, V) over next tokens for one waveform and
        one BOS-led prefix of length L."""
        prefix = np.asarray(prefix, dtype=np.int64)
        if prefix.ndim != 1 or prefix.size == 0 or prefix[0] != BOS:
            raise ContractError("prefix must be a 1-d token sequence starting with BOS")
        enc = self.encode(dc.as_ndarray(np.asarray(waveform, dtype=self.dtype)[None, :]))
        out = self.decoder(enc, prefix[None, :])
        return out.data[0].astype(np.float64)


# ---------------------------------------------------------------------------
# Fine-tuning policy
# ---------------------------------------------------------------------------


@dataclass
class TrainPolicy:
    mode: str = "adapters"
    replacement_prob: float = 0.3
    label_smooth_eps: float = 0.0
    peak_lr: float = 5e-4
    total_iters: int = 2000
    warmup_frac: float = 0.10
    const_frac: float = 0.40
    batch_frames: int = 4096
    mask: MaskConfig = field(default_factory=MaskConfig)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    balance_alpha: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("adapters", "full"):
            raise ConfigError(f"unknown fine-tune mode {self.mode!r}")
        if not 0.0 <= self.replacement_prob <= 1.0:
            raise ConfigError("replacement_prob must lie in [0, 1]")
        if self.warmup_frac < 0 or self.const_frac < 0 or self.warmup_frac + self.const_frac > 1:
            raise ConfigError("schedule fractions must be nonnegative and sum to at most 1")


def decoder_ln_params(model: TranslationModel) -> list:
    out = []
    for i, layer in enumerate(model.decoder.layers):
        for tag in ("ln_sa", "ln_ca", "ln_ffn"):
            ln = getattr(layer, tag)
            out.extend((f"decoder.layers.{i}.{tag}.{n}", p) for n, p in ln.named_params())
    out.extend((f"decoder.final_ln.{n}", p) for n, p in model.decoder.final_ln.named_params())
    return out


def decoder_ca_params(model: TranslationModel) -> list:
    out = []
    for i, layer in enumerate(model.decoder.layers):
        out.extend((f"decoder.layers.{i}.ca.{n}", p) for n, p in layer.ca.named_params())
    return out


def apply_finetune_policy(model: TranslationModel, policy: TrainPolicy):
    """Set every parameter's trainable flag per the policy.

    adapters: encoder adapters + decoder layer norms + decoder
    cross-attention train; everything else is frozen.
    full: the whole encoder trains; the decoder policy is unchanged.

    Returns (freeze mask: name -> trainable flag, trainable scalar count).
    """
    model.set_trainable(False)
    trainable: list = decoder_ln_params(model) + decoder_ca_params(model)
    if policy.mode == "adapters":
        if not model.encoder.has_adapters:
            raise ConfigError("adapters mode requires insert_adapters() first")
        trainable += model.encoder.adapter_params()
    else:
        trainable += list(model.encoder.named_params())
    for _, p in trainable:
        p.trainable = True
    mask = {name: p.trainable for name, p in model.named_params()}
    count = sum(p.size for _, p in model.named_params() if p.trainable)
    return mask, count


def sample_decoder_inputs(targets, predictions, p: float, rng: np.random.Generator) -> np.ndarray:
    """Each position is independently replaced by the model's prediction
    with probability p; p=0 returns the targets, p=1 the predictions."""
    targets = np.asarray(targets)
    predictions = np.asarray(predictions)
    if targets.shape != predictions.shape:
        raise ContractError(
            f"targets and predictions must share a shape, got {targets.shape} vs {predictions.shape}"
        )
    if not 0.0 <= p <= 1.0:
        raise ConfigError("replacement probability must lie in [0, 1]")
    return np.where(rng.random(targets.shape) < p, predictions, targets)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainLog:
    lines: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    batch_langs: list = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    def text(self) -> str:
        return "\n".join(self.lines) + "\n"


def _group_indices(items, key_fn):
    groups: dict = {}
    for i, it in enumerate(items):
        groups.setdefault(key_fn(it), []).append(i)
    return [groups[k] for k in sorted(groups)]


def run_translation_training(
    model: TranslationModel,
    corpus,
    policy: TrainPolicy,
    sampler: BalancedSampler | None = None,
) -> TrainLog:
    """Iterate: draw a language-balanced batch under the frame budget,
    mask the feature sequences, replace decoder-input tokens with model
    predictions at the configured probability, take an Adam step at the
    scheduled rate. Deterministic given the policy seed; frozen parameters
    are bitwise unchanged at the end.

    The fine-tune policy must already be applied to the model.
    """
    pairs = list(corpus.pairs if hasattr(corpus, "pairs") else corpus)
    if not pairs:
        raise DataError("translation corpus is empty")
    if sampler is None:
        sampler = BalancedSampler(pairs, lambda p: p.utt.lang, policy.balance_alpha)

    opt = Adam(model.trainable_params(), policy.adam_beta1, policy.adam_beta2, policy.adam_eps)
    rng = np.random.default_rng(np.random.SeedSequence([policy.seed, 0x7134]))
    extractor_frozen = not any(p.trainable for p in model.encoder.extractor.params())
    cache: dict = {}
    eps = policy.label_smooth_eps
    V = model.decoder.cfg.vocab_size
    log = TrainLog()

    for it in range(1, policy.total_iters + 1):
        batch = sampler.draw_frame_budget(rng, policy.batch_frames, lambda p: p.utt.frames)
        log.batch_langs.append(sorted({p.utt.lang for p in batch}))
        model.zero_grads()
        total_tokens = 0
        masked = [0, 0]
        replaced = [0, 0]
        with dc.Tape() as tape:
            loss_sum = None
            for idxs in _group_indices(batch, lambda p: (len(p.utt.wave), len(p.target_ids))):
                group = [batch[i] for i in idxs]
                if extractor_frozen:
                    feats = []
                    for p in group:
                        f = cache.get(p.utt.uid)
                        if f is None:
                            f = model.encoder.extract_features(
                                p.utt.wave.astype(model.dtype)
                            ).data[0]
                            cache[p.utt.uid] = f
                        feats.append(f)
                    f = dc.as_ndarray(np.stack(feats))
                else:
                    waves = np.stack([p.utt.wave for p in group]).astype(model.dtype)
                    f = model.encoder.extract_features(dc.as_ndarray(waves))
                f, time_mask, _ = model.encoder.mask_features_batch(f, policy.mask, rng)
                masked[0] += int(time_mask.sum())
                masked[1] += time_mask.size
                enc = model.encoder.encode_context(f, adapters_active=model.encoder.has_adapters)

                targets = np.stack([p.target_ids for p in group])  # (B, L), EOS-terminated
                gt_inputs = np.concatenate(
                    [np.full((len(group), 1), BOS, dtype=np.int64), targets[:, :-1]], axis=1
                )
                preds = model.decoder(enc, gt_inputs).data.argmax(axis=-1)
                mixed = sample_decoder_inputs(targets, preds, policy.replacement_prob, rng)
                replaced[0] += int((mixed != targets).sum())
                replaced[1] += mixed.size
                inputs = np.concatenate(
                    [np.full((len(group), 1), BOS, dtype=np.int64), mixed[:, :-1]], axis=1
                )
                logp = model.decoder(enc, inputs)
                q = np.zeros(logp.shape, dtype=model.dtype)
                np.put_along_axis(q, targets[:, :, None], 1.0, axis=-1)
                if eps > 0:
                    q = (1.0 - eps) * q + eps / V
                part = dc.neg(dc.reduce_sum(dc.mul(logp, dc.as_ndarray(q))))
                loss_sum = part if loss_sum is None else dc.add(loss_sum, part)
                total_tokens += targets.size
            loss = dc.mul(loss_sum, 1.0 / total_tokens)
        tape.backward(loss)
        lr = lr_at(it, policy)
        opt.step(lr)
        value = loss.item()
        log.losses.append(value)
        log.lines.append(
            f"iter={it} lr={lr:.6g} loss={value:.6f} "
            f"masked_frac={masked[0] / max(1, masked[1]):.3f} "
            f"replaced_frac={replaced[0] / max(1, replaced[1]):.3f} "
            f"langs={','.join(log.batch_langs[-1])}"
        )
    return log


def teacher_forced_accuracy(model: TranslationModel, pairs) -> float:
    """Fraction of target tokens (EOS included) recovered by argmax under
    teacher forcing; a cheap training-quality probe."""
    correct = 0
    total = 0
    for idxs in _group_indices(pairs, lambda p: (len(p.utt.wave), len(p.target_ids))):
        group = [pairs[i] for i in idxs]
        waves = np.stack([p.utt.wave for p in group]).astype(model.dtype)
        enc = model.encode(dc.as_ndarray(waves))
        targets = np.stack([p.target_ids for p in group])
        inputs = np.concatenate(
            [np.full((len(group), 1), BOS, dtype=np.int64), targets[:, :-1]], axis=1
        )
        preds = model.decoder(enc, inputs).data.argmax(axis=-1)
        correct += int((preds == targets).sum())
        total += targets.size
    return correct / total
