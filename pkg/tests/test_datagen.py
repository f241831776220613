import numpy as np
import pytest

from speechkd import datagen as dg
from speechkd.errors import ConfigError, DataError


SMALL = dict(
    languages=("aa", "bb", "cc", "dd"),
    tiers=("high", "high", "mid", "low"),
    pairs_by_tier={"high": 30, "mid": 12, "low": 5},
    eval_pairs_per_task=4,
    bkg_per_language=10,
    heldout_pairs=12,
    motif_len=16,
    sent_len=(3, 6),
)


def test_corpus_generation_is_deterministic():
    spec = dg.CorpusSpec(**SMALL)
    a = dg.generate_translation_corpus(dg.build_pool(spec, 7), 7)
    b = dg.generate_translation_corpus(dg.build_pool(spec, 7), 7)
    assert len(a) == len(b)
    for pa, pb in zip(a.pairs, b.pairs):
        assert pa.utt.uid == pb.utt.uid
        assert np.array_equal(pa.utt.wave, pb.utt.wave)
        assert np.array_equal(pa.target_ids, pb.target_ids)


def test_default_tier_counts_and_classification():
    spec = dg.CorpusSpec()
    corpus = dg.generate_translation_corpus(dg.build_pool(spec, 1), 1)
    counts = {}
    for p in corpus.pairs:
        counts[p.utt.lang] = counts.get(p.utt.lang, 0) + 1
    assert counts == {"aa": 2000, "bb": 2000, "cc": 400, "dd": 400, "ee": 80, "ff": 80}
    for task, declared in zip(corpus.tasks, spec.tiers):
        assert task.tier == declared, (task.src_lang, task.train_hours)


def test_translation_pairs_share_concepts_and_teacher_embedding():
    from speechkd.distill import TeacherOracle

    spec = dg.CorpusSpec(**SMALL)
    pool = dg.build_pool(spec, 3)
    pairs = dg.generate_heldout_pairs(pool, 3)
    teacher = TeacherOracle(spec.concept_vocab, 16, seed=5)
    for ua, ub in pairs:
        assert ua.lang != ub.lang
        assert ua.concepts == ub.concepts
        assert not np.array_equal(ua.wave, ub.wave)
        assert np.array_equal(teacher.embed(ua.concepts), teacher.embed(ub.concepts))


def test_classify_tier_thresholds():
    assert dg.classify_tier(150) == "high"
    assert dg.classify_tier(50) == "mid"
    assert dg.classify_tier(5) == "low"
    assert dg.classify_tier(100) == "mid"
    assert dg.classify_tier(10) == "mid"
    with pytest.raises(ValueError):
        dg.classify_tier(-1)


def test_balanced_distribution_endpoints():
    p = dg.balanced_sampling_distribution([900, 90, 10], 0.0)
    assert np.allclose(p, [1 / 3, 1 / 3, 1 / 3])
    p = dg.balanced_sampling_distribution([900, 90, 10], 1.0)
    assert np.allclose(p, [0.9, 0.09, 0.01])


def test_balanced_distribution_sqrt_case():
    p = dg.balanced_sampling_distribution([900, 90, 10], 0.5)
    w = np.sqrt([900.0, 90.0, 10.0])
    assert np.allclose(p, w / w.sum(), atol=1e-12)
    assert np.allclose(p, [0.703, 0.223, 0.074], atol=1e-3)


def test_balanced_distribution_rejects_bad_input():
    with pytest.raises(DataError):
        dg.balanced_sampling_distribution([10, 0], 0.5)
    with pytest.raises(ConfigError):
        dg.balanced_sampling_distribution([10, 10], 1.5)


class _Item:
    def __init__(self, lang):
        self.lang = lang


def test_sampler_language_frequencies_within_3_sigma():
    rng = np.random.default_rng(0)
    for trial in range(4):
        counts = rng.integers(5, 400, size=int(rng.integers(2, 6)))
        alpha = float(rng.random())
        items = [_Item(f"l{i}") for i, n in enumerate(counts) for _ in range(n)]
        sampler = dg.BalancedSampler(items, lambda u: u.lang, alpha)
        n_draws = 20000
        draw_rng = np.random.default_rng(100 + trial)
        freq = np.zeros(len(counts))
        for _ in range(n_draws):
            freq[int(sampler.draw(draw_rng).lang[1:])] += 1
        p = sampler.probs
        sigma = np.sqrt(n_draws * p * (1 - p))
        assert np.all(np.abs(freq - n_draws * p) <= 3 * sigma + 1e-9), (counts, alpha)


def test_sampler_draw_many_matches_probs():
    items = [_Item(l) for l in ["a"] * 500 + ["b"] * 20 + ["c"] * 5]
    sampler = dg.BalancedSampler(items, lambda u: u.lang, 0.5)
    drawn = sampler.draw_many(np.random.default_rng(1), 100000)
    freq = np.array([sum(1 for d in drawn if d.lang == k) for k in sampler.keys], dtype=float)
    p = sampler.probs
    sigma = np.sqrt(100000 * p * (1 - p))
    assert np.all(np.abs(freq - 100000 * p) <= 3 * sigma)


def test_speed_perturb_identity_and_lengths():
    wave = np.random.default_rng(2).normal(size=8).astype(np.float32)
    assert np.array_equal(dg.speed_perturb(wave, 1.0), wave)
    assert len(dg.speed_perturb(wave, 2.0)) == 4
    assert len(dg.speed_perturb(wave, 0.5)) == 16
    with pytest.raises(ValueError):
        dg.speed_perturb(wave, 0.0)


def test_speed_perturb_constant_and_envelope():
    const = np.full(20, 3.5, dtype=np.float32)
    for f in (0.9, 1.1, 1.7):
        out = dg.speed_perturb(const, f)
        assert np.allclose(out, 3.5)
    wave = np.random.default_rng(3).normal(size=50).astype(np.float32)
    for f in (0.9, 1.1):
        out = dg.speed_perturb(wave, f)
        assert out.min() >= wave.min() - 1e-6
        assert out.max() <= wave.max() + 1e-6


def test_scenario_splits():
    tasks = [
        dg.TaskSpec("a", "t", "high", 200),
        dg.TaskSpec("b", "t", "high", 150),
        dg.TaskSpec("c", "t", "mid", 50),
        dg.TaskSpec("d", "t", "mid", 30),
        dg.TaskSpec("e", "t", "low", 5),
        dg.TaskSpec("f", "t", "low", 3),
    ]
    train, ev = dg.make_scenario_splits(tasks, "zero-shot")
    assert [t.src_lang for t in train] == ["a", "b"]
    assert len(ev) == 6
    train, ev = dg.make_scenario_splits(tasks, "multilingual")
    assert train == tasks and ev == tasks
    assert set(t.src_lang for t in train) <= set(t.src_lang for t in ev)
    with pytest.raises(ConfigError):
        dg.make_scenario_splits(tasks[2:], "zero-shot")
    with pytest.raises(ConfigError):
        dg.make_scenario_splits(tasks, "few-shot")


def test_bkg_corpus_augmentation_counts():
    spec = dg.CorpusSpec(**SMALL)
    corpus = dg.generate_bkg_corpus(dg.build_pool(spec, 5), 5, augment=True)
    assert len(corpus) == 4 * 10 * 3
    plain = dg.generate_bkg_corpus(dg.build_pool(spec, 5), 5, augment=False)
    assert len(plain) == 4 * 10
    assert corpus.language_counts() == {"aa": 30, "bb": 30, "cc": 30, "dd": 30}


def test_corpus_roundtrip_is_bit_exact(tmp_path):
    spec = dg.CorpusSpec(**SMALL)
    pool = dg.build_pool(spec, 9)
    corpus = dg.generate_bkg_corpus(pool, 9, augment=False)
    dg.save_corpus(tmp_path / "c", corpus.utterances, meta={"kind": "bkg"})
    loaded, meta = dg.load_corpus(tmp_path / "c")
    assert meta == {"kind": "bkg"}
    assert len(loaded) == len(corpus.utterances)
    for a, b in zip(corpus.utterances, loaded):
        assert a.uid == b.uid and a.lang == b.lang and a.concepts == b.concepts
        assert a.frames == b.frames
        assert np.array_equal(a.wave, b.wave)


def test_translation_corpus_roundtrip(tmp_path):
    spec = dg.CorpusSpec(**SMALL)
    pool = dg.build_pool(spec, 11)
    corpus = dg.generate_translation_corpus(pool, 11)
    dg.save_translation_corpus(tmp_path / "t", corpus, spec, 11)
    loaded = dg.load_translation_corpus(tmp_path / "t")
    assert loaded.vocab_size == corpus.vocab_size
    assert [t.src_lang for t in loaded.tasks] == [t.src_lang for t in corpus.tasks]
    for a, b in zip(corpus.pairs, loaded.pairs):
        assert np.array_equal(a.target_ids, b.target_ids)
        assert a.target_text == b.target_text
        assert np.array_equal(a.utt.wave, b.utt.wave)


def test_missing_manifest_raises(tmp_path):
    with pytest.raises(DataError):
        dg.load_corpus(tmp_path / "nothing")
