"""Synthetic multilingual corpus generation.

A shared concept vocabulary stands in for meaning. Each synthetic language
renders a concept sequence through its own bijective concept-to-token map,
and synthesizes a waveform by concatenating per-concept motifs (shared
across languages) plus a language-specific carrier offset and a small
per-utterance noise term. Translation pairs therefore share concept
sequences, and the frozen teacher embeds them identically regardless of
surface language.

Resource math uses "synthetic hours": one hour is ``frames_per_hour``
feature frames (default 1000), with frames = samples // frame_divisor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

PAD, BOS, EOS = 0, 1, 2
SPECIAL_TOKENS = 3


@dataclass
class CorpusSpec:
    """Everything the generator needs; pure function of (spec, seed)."""

    languages: tuple = ("aa", "bb", "cc", "dd", "ee", "ff")
    tiers: tuple = ("high", "high", "mid", "mid", "low", "low")
    target_lang: str = "tt"
    concept_vocab: int = 40
    sent_len: tuple = (4, 8)
    motif_len: int = 56
    carrier_scale: float = 0.5
    noise_scale: float = 0.05
    pairs_by_tier: dict = field(
        default_factory=lambda: {"high": 2000, "mid": 400, "low": 80}
    )
    eval_pairs_per_task: int = 30
    bkg_per_language: int = 200
    heldout_pairs: int = 100
    frames_per_hour: int = 1000
    frame_divisor: int = 4
    speed_factors: tuple = (0.9, 1.0, 1.1)
    balance_alpha: float = 0.5

    def __post_init__(self):
        self.languages = tuple(self.languages)
        self.tiers = tuple(self.tiers)
        self.sent_len = tuple(self.sent_len)
        self.speed_factors = tuple(self.speed_factors)
        if len(self.languages) < 2:
            raise ConfigError("need at least two source languages")
        if len(self.tiers) != len(self.languages):
            raise ConfigError("tiers must list one entry per language")
        if self.target_lang in self.languages:
            raise ConfigError("target_lang must not be one of the source languages")
        if self.sent_len[0] < 1 or self.sent_len[1] < self.sent_len[0]:
            raise ConfigError("sent_len must be (lo, hi) with 1 <= lo <= hi")
        if self.sent_len[1] > self.concept_vocab:
            raise ConfigError("sentence length cannot exceed the concept vocabulary")

    @property
    def vocab_size(self) -> int:
        """Decoder vocabulary: concepts plus pad/bos/eos."""
        return self.concept_vocab + SPECIAL_TOKENS


@dataclass
class SyntheticLanguage:
    lang_id: str
    perm: np.ndarray  # bijective concept id -> surface token id
    carrier: np.ndarray  # per-language offset added to every motif

    def render_tokens(self, concepts) -> list[str]:
        return [f"{self.lang_id}:{int(self.perm[c])}" for c in concepts]

    def render_ids(self, concepts) -> np.ndarray:
        return np.asarray([SPECIAL_TOKENS + int(self.perm[c]) for c in concepts], dtype=np.int64)

    def target_ids(self, concepts) -> np.ndarray:
        """Decoder training/eval targets: rendered tokens plus EOS."""
        return np.concatenate([self.render_ids(concepts), [EOS]]).astype(np.int64)


@dataclass
class Utterance:
    uid: str
    lang: str
    concepts: tuple
    wave: np.ndarray  # float32 samples
    frames: int


@dataclass
class TranslationPair:
    utt: Utterance
    target_ids: np.ndarray
    target_text: str


@dataclass
class TaskSpec:
    src_lang: str
    tgt_lang: str
    tier: str
    train_hours: float


@dataclass
class Corpus:
    utterances: list

    def by_language(self) -> dict:
        groups: dict = {}
        for u in self.utterances:
            groups.setdefault(u.lang, []).append(u)
        return groups

    def language_counts(self) -> dict:
        return {lang: len(us) for lang, us in sorted(self.by_language().items())}

    def __len__(self):
        return len(self.utterances)


@dataclass
class TranslationCorpus:
    pairs: list
    tasks: list
    target_lang: str
    vocab_size: int

    def pairs_for_task(self, src_lang: str) -> list:
        return [p for p in self.pairs if p.utt.lang == src_lang]

    def __len__(self):
        return len(self.pairs)


class LanguagePool:
    """Deterministic tables (motifs, carriers, token permutations) for one
    seeded family of synthetic languages, including the text-side target."""

    def __init__(self, spec: CorpusSpec, seed: int):
        self.spec = spec
        self.seed = seed
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD47A]))
        self.motifs = rng.normal(0.0, 1.0, size=(spec.concept_vocab, spec.motif_len)).astype(
            np.float32
        )
        self.languages: dict[str, SyntheticLanguage] = {}
        for lang in spec.languages + (spec.target_lang,):
            perm = rng.permutation(spec.concept_vocab)
            carrier = rng.normal(0.0, spec.carrier_scale, size=spec.motif_len).astype(np.float32)
            self.languages[lang] = SyntheticLanguage(lang, perm, carrier)

    def target(self) -> SyntheticLanguage:
        return self.languages[self.spec.target_lang]

    def synthesize(self, lang: str, concepts, rng: np.random.Generator) -> np.ndarray:
        lg = self.languages[lang]
        segments = [self.motifs[c] + lg.carrier for c in concepts]
        wave = np.concatenate(segments)
        wave = wave + rng.normal(0.0, self.spec.noise_scale, size=wave.shape).astype(np.float32)
        return wave.astype(np.float32)

    def draw_concepts(self, rng: np.random.Generator) -> tuple:
        lo, hi = self.spec.sent_len
        n = int(rng.integers(lo, hi + 1))
        return tuple(int(c) for c in rng.choice(self.spec.concept_vocab, size=n, replace=False))

    def make_utterance(self, lang: str, uid: str, rng: np.random.Generator) -> Utterance:
        concepts = self.draw_concepts(rng)
        wave = self.synthesize(lang, concepts, rng)
        return Utterance(uid, lang, concepts, wave, len(wave) // self.spec.frame_divisor)


def _derived_rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *tags]))


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def build_pool(spec: CorpusSpec, seed: int) -> LanguagePool:
    return LanguagePool(spec, seed)


def classify_tier(amount: float) -> str:
    """Resource tier from a training amount in (synthetic) hours: more than
    100 is high, 10 to 100 inclusive is mid, below 10 is low."""
    if amount < 0:
        raise ValueError(f"training amount must be nonnegative, got {amount}")
    if amount > 100:
        return "high"
    if amount >= 10:
        return "mid"
    return "low"


def generate_translation_corpus(pool: LanguagePool, seed: int, split: str = "train"):
    """Translation pairs for every source language at its tier's size.

    The eval split draws fresh concept sequences from a disjoint stream.
    Task tiers are classified from the train split's actual synthetic
    hours, which for the default sizing agree with the declared layout.
    """
    spec = pool.spec
    if split not in ("train", "eval"):
        raise ConfigError(f"unknown split {split!r}")
    target = pool.target()
    pairs = []
    tasks = []
    for li, (lang, declared_tier) in enumerate(zip(spec.languages, spec.tiers)):
        n = spec.pairs_by_tier[declared_tier] if split == "train" else spec.eval_pairs_per_task
        rng = _derived_rng(seed, 1 if split == "train" else 2, li)
        frames = 0
        for i in range(n):
            utt = pool.make_utterance(lang, f"{lang}-{split}-{i:05d}", rng)
            frames += utt.frames
            pairs.append(
                TranslationPair(
                    utt,
                    target.target_ids(utt.concepts),
                    " ".join(target.render_tokens(utt.concepts)),
                )
            )
        hours = frames / spec.frames_per_hour
        tasks.append(TaskSpec(lang, spec.target_lang, classify_tier(hours), hours))
    return TranslationCorpus(pairs, tasks, spec.target_lang, spec.vocab_size)


def generate_bkg_corpus(pool: LanguagePool, seed: int, augment: bool = True) -> Corpus:
    """Transcribed-speech pool for distillation, offline speed-perturbed
    when ``augment`` (one copy per configured factor; 1.0 is the identity)."""
    spec = pool.spec
    factors = spec.speed_factors if augment else (1.0,)
    utterances = []
    for li, lang in enumerate(spec.languages):
        rng = _derived_rng(seed, 3, li)
        for i in range(spec.bkg_per_language):
            base = pool.make_utterance(lang, f"{lang}-bkg-{i:05d}", rng)
            for f in factors:
                wave = speed_perturb(base.wave, f)
                utterances.append(
                    Utterance(
                        f"{base.uid}@{f:.1f}",
                        lang,
                        base.concepts,
                        wave,
                        len(wave) // spec.frame_divisor,
                    )
                )
    return Corpus(utterances)


def generate_heldout_pairs(pool: LanguagePool, seed: int) -> list:
    """Cross-lingual utterance pairs sharing one concept sequence, for
    retrieval evaluation; language pairs rotate through all combinations."""
    spec = pool.spec
    rng = _derived_rng(seed, 4)
    langs = spec.languages
    out = []
    for i in range(spec.heldout_pairs):
        a = langs[i % len(langs)]
        b = langs[(i + 1 + (i // len(langs)) % (len(langs) - 1)) % len(langs)]
        concepts = pool.draw_concepts(rng)
        wa = pool.synthesize(a, concepts, rng)
        wb = pool.synthesize(b, concepts, rng)
        d = spec.frame_divisor
        out.append(
            (
                Utterance(f"ho-{i:04d}-a", a, concepts, wa, len(wa) // d),
                Utterance(f"ho-{i:04d}-b", b, concepts, wb, len(wb) // d),
            )
        )
    return out


# ---------------------------------------------------------------------------
# Balancing and augmentation
# ---------------------------------------------------------------------------


def balanced_sampling_distribution(counts, alpha: float) -> np.ndarray:
    """Temperature up-sampling: p_l proportional to n_l ** alpha. alpha=1
    recovers the empirical distribution, alpha=0 is uniform."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts <= 0):
        raise DataError("every group must have a positive count")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    w = counts**alpha
    return w / w.sum()


class BalancedSampler:
    """Samples items with replacement, language-balanced: first a language
    by the temperature distribution, then an utterance uniformly inside it
    (repeating low-resource utterances up-samples them)."""

    def __init__(self, items, key_fn, alpha: float):
        groups: dict = {}
        for it in items:
            groups.setdefault(key_fn(it), []).append(it)
        if not groups:
            raise DataError("cannot sample from an empty corpus")
        self.keys = sorted(groups)
        self.groups = [groups[k] for k in self.keys]
        self.probs = balanced_sampling_distribution([len(g) for g in self.groups], alpha)
        self._cum = np.cumsum(self.probs)

    def draw(self, rng: np.random.Generator):
        gi = int(np.searchsorted(self._cum, rng.random(), side="right"))
        gi = min(gi, len(self.groups) - 1)
        group = self.groups[gi]
        return group[int(rng.integers(len(group)))]

    def draw_many(self, rng: np.random.Generator, n: int) -> list:
        """Vectorized equivalent of n draw() calls (same distribution,
        different stream consumption)."""
        gis = np.minimum(
            np.searchsorted(self._cum, rng.random(n), side="right"), len(self.groups) - 1
        )
        sizes = np.array([len(g) for g in self.groups])
        within = (rng.random(n) * sizes[gis]).astype(np.int64)
        return [self.groups[g][w] for g, w in zip(gis, within)]

    def draw_frame_budget(self, rng: np.random.Generator, budget: int, frames_fn) -> list:
        batch = [self.draw(rng)]
        total = frames_fn(batch[0])
        while total < budget:
            item = self.draw(rng)
            batch.append(item)
            total += frames_fn(item)
        return batch


def speed_perturb(wave: np.ndarray, factor: float) -> np.ndarray:
    """Linear-interpolation resampling to length round(S / factor).
    factor 1.0 is the identity; values beyond the edges clamp."""
    if factor <= 0:
        raise ValueError(f"speed factor must be positive, got {factor}")
    wave = np.asarray(wave)
    S = len(wave)
    if factor == 1.0:
        return wave.astype(np.float32)
    new_len = int(round(S / factor))
    xs = np.minimum(np.arange(new_len) * factor, S - 1)
    return np.interp(xs, np.arange(S), wave.astype(np.float64)).astype(np.float32)


def make_scenario_splits(tasks, scenario: str):
    """multilingual trains on every task; zero-shot trains on the
    high-tier tasks only. Evaluation always covers all tasks."""
    if scenario == "multilingual":
        return list(tasks), list(tasks)
    if scenario == "zero-shot":
        train = [t for t in tasks if t.tier == "high"]
        if not train:
            raise ConfigError("zero-shot scenario requires at least one high-tier task")
        return train, list(tasks)
    raise ConfigError(f"unknown scenario {scenario!r}")


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def save_corpus(path, utterances, meta: dict | None = None):
    """One manifest line per utterance (id, language, concept ids, frame
    count, waveform file) plus raw little-endian float32 waveform files."""
    root = Path(path)
    (root / "waves").mkdir(parents=True, exist_ok=True)
    lines = []
    for u in utterances:
        rel = f"waves/{u.uid}.f32"
        u.wave.astype("<f4").tofile(root / rel)
        concepts = ",".join(str(c) for c in u.concepts)
        lines.append(f"{u.uid}\t{u.lang}\t{concepts}\t{u.frames}\t{rel}")
    (root / "manifest.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if meta is not None:
        (root / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True), encoding="utf-8")


def load_corpus(path):
    root = Path(path)
    manifest = root / "manifest.tsv"
    if not manifest.exists():
        raise DataError(f"no manifest.tsv under {root}")
    utterances = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        uid, lang, concepts, frames, rel = line.split("\t")
        wave = np.fromfile(root / rel, dtype="<f4")
        utterances.append(
            Utterance(uid, lang, tuple(int(c) for c in concepts.split(",")), wave, int(frames))
        )
    meta_path = root / "meta.json"
    meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else None
    return utterances, meta


def save_translation_corpus(path, corpus: TranslationCorpus, spec: CorpusSpec, pool_seed: int):
    meta = {
        "kind": "translation",
        "spec": asdict(spec),
        "pool_seed": pool_seed,
        "tasks": [asdict(t) for t in corpus.tasks],
    }
    save_corpus(path, [p.utt for p in corpus.pairs], meta)


def load_translation_corpus(path) -> TranslationCorpus:
    """Targets are re-derived from concepts through the pool tables, which
    are themselves a pure function of (spec, pool_seed) stored in meta."""
    utterances, meta = load_corpus(path)
    if not meta or meta.get("kind") != "translation":
        raise DataError(f"{path} does not hold a translation corpus")
    spec = CorpusSpec(**meta["spec"])
    pool = build_pool(spec, meta["pool_seed"])
    target = pool.target()
    pairs = [
        TranslationPair(u, target.target_ids(u.concepts), " ".join(target.render_tokens(u.concepts)))
        for u in utterances
    ]
    tasks = [TaskSpec(**t) for t in meta["tasks"]]
    return TranslationCorpus(pairs, tasks, spec.target_lang, spec.vocab_size)
