"""Semantic knowledge distillation of a frozen teacher's sentence
embeddings into the speech encoder.

The speech branch pools the encoder's contextual frames into one utterance
embedding through attention-based temporal pooling followed by a tanh
projection. The frozen teacher maps a concept sequence to a unit-norm
embedding (the normalized mean of its concept vectors), so translations
share one target by construction. The loss is the beta-scaled cosine
distance between the two embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .datagen import BalancedSampler
from .diffcore import Linear, Module, NDArray
from .encoder import SpeechEncoder
from .errors import ConfigError, DataError, NumericError, VocabularyError
from .optim import Adam


@dataclass
class DistillConfig:
    beta: float = 32.0
    lr: float = 1e-3
    steps: int = 500
    batch_size: int = 16
    seed: int = 0
    balance_alpha: float = 0.5

    def __post_init__(self):
        if self.beta <= 0:
            raise ConfigError("beta must be positive")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1")


class PoolingHead(Module):
    """Attention-based temporal pooling plus a tanh projection.

    A linear scorer maps each frame to one logit; softmax over frames
    gives convex weights, the weighted sum is projected to the embedding
    size and squashed through tanh.
    """

    def __init__(self, model_dim: int, embed_dim: int, rng, dtype=np.float64):
        self.scorer = Linear(model_dim, 1, rng, dtype)
        self.proj = Linear(model_dim, embed_dim, rng, dtype)
        self.embed_dim = embed_dim

    def __call__(self, c: NDArray) -> NDArray:
        """Batched pooling: (B, T, d) -> (B, embed_dim)."""
        B, T, d = c.shape
        scores = dc.reshape(self.scorer(c), (B, T))
        weights = dc.reshape(dc.softmax_rows(scores), (B, 1, T))
        pooled = dc.reshape(dc.matmul(weights, c), (B, d))
        return dc.tanh(self.proj(pooled))

    def attentive_pool(self, c: NDArray) -> NDArray:
        """Single utterance: (T, d) -> (embed_dim,)."""
        out = self(dc.reshape(c, (1,) + tuple(c.shape)))
        return dc.reshape(out, (self.embed_dim,))


class TeacherOracle:
    """Frozen concept-vocabulary embedding table.

    embed() returns the unit-normalized mean of the concept vectors, so it
    is deterministic and identical for the same concepts in any surface
    language. Never trained; holds plain arrays, not Parameters.
    """

    def __init__(self, vocab_size: int, embed_dim: int, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7EAC]))
        self.table = rng.normal(0.0, 1.0, size=(vocab_size, embed_dim))
        self.table.setflags(write=False)

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.table.shape[1]

    def embed(self, concepts) -> np.ndarray:
        if len(concepts) == 0:
            raise DataError("cannot embed an empty concept sequence")
        for c in concepts:
            if not 0 <= c < self.vocab_size:
                raise VocabularyError(f"concept id {c} outside vocabulary of {self.vocab_size}")
        mean = self.table[list(concepts)].mean(axis=0)
        return mean / np.linalg.norm(mean)

    def embed_batch(self, sequences) -> np.ndarray:
        return np.stack([self.embed(s) for s in sequences])


def kd_loss(e, z, beta: float) -> NDArray:
    """beta * (1 - cos(e, z)), differentiable w.r.t. e. The target z is
    treated as a constant. Raises on a zero-norm embedding."""
    e = dc.as_ndarray(e)
    z = np.asarray(z.data if isinstance(z, NDArray) else z, dtype=np.float64)
    norm_e = dc.sqrt(dc.reduce_sum(dc.mul(e, e)))
    if norm_e.item() == 0.0:
        raise NumericError("zero-norm speech embedding in cosine loss")
    norm_z = float(np.linalg.norm(z))
    if norm_z == 0.0:
        raise NumericError("zero-norm target embedding in cosine loss")
    cos = dc.div(dc.reduce_sum(dc.mul(e, dc.as_ndarray(z))), dc.mul(norm_e, norm_z))
    return dc.mul(dc.sub(1.0, cos), beta)


def batch_kd_loss_sum(e: NDArray, z: np.ndarray, beta: float) -> NDArray:
    """Sum over a batch of beta-scaled cosine distances; e is (B, d_e)."""
    norms = dc.sqrt(dc.reduce_sum(dc.mul(e, e), axis=-1))
    if np.any(norms.data == 0.0):
        raise NumericError("zero-norm speech embedding in cosine loss")
    z = np.asarray(z)
    z_norms = np.linalg.norm(z, axis=-1)
    dots = dc.reduce_sum(dc.mul(e, dc.as_ndarray(z.astype(e.dtype))), axis=-1)
    cos = dc.div(dots, dc.mul(norms, dc.as_ndarray(z_norms.astype(e.dtype))))
    return dc.mul(dc.reduce_sum(dc.sub(1.0, cos)), beta)


@dataclass
class DistillLog:
    losses: list = field(default_factory=list)
    lines: list = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    def text(self) -> str:
        return "\n".join(self.lines) + "\n"


class _FeatureCache:
    """Extracted feature sequences keyed by utterance id; valid only while
    the feature extractor is frozen."""

    def __init__(self, encoder: SpeechEncoder):
        self.encoder = encoder
        self.store: dict = {}

    def get(self, utt) -> np.ndarray:
        f = self.store.get(utt.uid)
        if f is None:
            dtype = self.encoder.mask_emb.value.dtype
            f = self.encoder.extract_features(utt.wave.astype(dtype)).data[0]
            self.store[utt.uid] = f
        return f


def _group_by_frames(items, key_fn):
    groups: dict = {}
    for it in items:
        groups.setdefault(key_fn(it), []).append(it)
    return [groups[k] for k in sorted(groups)]


def run_distillation(
    encoder: SpeechEncoder,
    head: PoolingHead,
    teacher: TeacherOracle,
    corpus,
    cfg: DistillConfig,
) -> DistillLog:
    """Adam steps on the cosine-distance loss over a language-balanced
    stream of (waveform, concepts) utterances.

    The feature extractor, positional conv, mask embedding, and teacher
    stay frozen; gradients flow into the transformer layers and the
    pooling head only.
    """
    utterances = list(corpus.utterances if hasattr(corpus, "utterances") else corpus)
    if not utterances:
        raise DataError("distillation corpus is empty")

    encoder.extractor.set_trainable(False)
    encoder.pos_conv.set_trainable(False)
    encoder.mask_emb.trainable = False
    encoder.transformer.set_trainable(True)
    head.set_trainable(True)

    trainable = encoder.transformer.params() + head.params()
    opt = Adam(trainable)
    sampler = BalancedSampler(utterances, lambda u: u.lang, cfg.balance_alpha)
    cache = _FeatureCache(encoder)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xD157]))
    log = DistillLog()

    for step in range(1, cfg.steps + 1):
        batch = [sampler.draw(rng) for _ in range(cfg.batch_size)]
        encoder.zero_grads()
        head.zero_grads()
        with dc.Tape() as tape:
            total = None
            for group in _group_by_frames(batch, lambda u: len(u.wave)):
                f = dc.as_ndarray(np.stack([cache.get(u) for u in group]))
                c = encoder.encode_context(f, adapters_active=False)
                e = head(c)
                z = teacher.embed_batch([u.concepts for u in group])
                part = batch_kd_loss_sum(e, z, cfg.beta)
                total = part if total is None else dc.add(total, part)
            loss = dc.mul(total, 1.0 / len(batch))
        tape.backward(loss)
        opt.step(cfg.lr)
        value = loss.item()
        log.losses.append(value)
        log.lines.append(f"step={step} loss={value:.6f} lr={cfg.lr:g} seed={cfg.seed}")
    return log


def cross_lingual_retrieval(
    encoder: SpeechEncoder, head: PoolingHead, teacher: TeacherOracle, pairs
) -> dict:
    """Nearest-neighbor retrieval over held-out translation pairs.

    speech_to_teacher: each first-language embedding queries the teacher
    embeddings of all pairs. speech_to_speech: it queries the
    second-language speech embeddings. recall@1 is the fraction of pairs
    whose own entry ranks first; chance is 1/len(pairs).
    """
    if not pairs:
        raise DataError("no retrieval pairs given")
    dtype = encoder.mask_emb.value.dtype

    def embed(utts):
        groups: dict = {}
        for i, u in enumerate(utts):
            groups.setdefault(len(u.wave), []).append(i)
        out = np.zeros((len(utts), head.embed_dim))
        for idxs in groups.values():
            wave = np.stack([utts[i].wave for i in idxs]).astype(dtype)
            c = encoder(dc.as_ndarray(wave), adapters_active=False)
            out[idxs] = head(c).data.astype(np.float64)
        return out / np.linalg.norm(out, axis=1, keepdims=True)

    e_a = embed([a for a, _ in pairs])
    e_b = embed([b for _, b in pairs])
    z = teacher.embed_batch([a.concepts for a, _ in pairs])
    z = z / np.linalg.norm(z, axis=1, keepdims=True)
    n = len(pairs)
    own = np.arange(n)
    r_teacher = float(np.mean((e_a @ z.T).argmax(axis=1) == own))
    r_speech = float(np.mean((e_a @ e_b.T).argmax(axis=1) == own))
    return {
        "recall_at_1_speech_to_teacher": r_teacher,
        "recall_at_1_speech_to_speech": r_speech,
        "chance": 1.0 / n,
    }
