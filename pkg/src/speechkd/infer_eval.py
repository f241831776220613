"""Beam-search decoding, translation metrics, and tier aggregation.

Metrics operate on whitespace-tokenized strings (the synthetic token
alphabet makes this lossless) and are self-consistent rather than
comparable to any external toolkit:

* BLEU-4 uses add-one smoothing on an order-n precision (n >= 2) only
  when its match count is zero; unigram precision is never smoothed.
* Google-BLEU is min(precision, recall) of 1..4-gram multiset matches
  aggregated over the corpus.
* NIST uses information weights from the reference side of the corpus,
  orders 1..5, and the NIST brevity penalty.
* meteor_lite is the 9:1 recall-weighted unigram harmonic mean with a
  fragmentation penalty of 0.5 * (chunks / matches)^3; a single-chunk
  alignment counts as unfragmented (penalty 0). No stemming or synonymy.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .datagen import BOS, EOS
from .errors import DataError

REPORT_FORMAT_VERSION = 1
REPORT_HEADER = (
    f"# translation-report v{REPORT_FORMAT_VERSION} "
    "bleu=corpus-bleu4,add-one-smoothing-n2plus tokenizer=whitespace"
)


# ---------------------------------------------------------------------------
# Beam search
# ---------------------------------------------------------------------------


@dataclass
class BeamHypothesis:
    tokens: list
    log_prob: float
    finished: bool

    def key(self):
        return (-self.log_prob, tuple(self.tokens))


def beam_search(step_log_probs, bos: int, eos: int, beam: int, max_len: int,
                length_normalize: bool = False) -> BeamHypothesis:
    """Breadth-limited best-first search over token sequences.

    ``step_log_probs`` maps a list of prefixes (each starting with bos) to
    an (n, V) array of next-token log-probabilities. Each round expands
    every live hypothesis over the full vocabulary, keeps the top ``beam``
    of the candidate pool (finished hypotheses stay in the pool), and
    stops when the whole beam is finished or ``max_len`` tokens were
    generated (hypotheses at max length count as finished). Returns the
    highest-scoring finished hypothesis by cumulative log-probability
    (mean per-token log-probability when ``length_normalize``).
    """
    if beam < 1 or max_len < 1:
        raise DataError("beam and max_len must be >= 1")

    def score(h: BeamHypothesis) -> float:
        n = max(1, len(h.tokens) - 1)
        return h.log_prob / n if length_normalize else h.log_prob

    beams = [BeamHypothesis([bos], 0.0, False)]
    for _ in range(max_len):
        live = [h for h in beams if not h.finished]
        if not live:
            break
        pool = [h for h in beams if h.finished]
        lp = step_log_probs([h.tokens for h in live])
        for i, h in enumerate(live):
            for v in range(lp.shape[1]):
                tokens = h.tokens + [int(v)]
                finished = v == eos or (len(tokens) - 1) >= max_len
                pool.append(BeamHypothesis(tokens, h.log_prob + float(lp[i, v]), finished))
        pool.sort(key=lambda h: (-score(h), tuple(h.tokens)))
        beams = pool[:beam]
    done = [h for h in beams if h.finished]
    return max(done, key=lambda h: (score(h), tuple(h.tokens)))


def beam_search_translate(model, waveform, beam: int = 5, max_len: int = 16,
                          length_normalize: bool = False) -> BeamHypothesis:
    """Offline autoregressive decoding of one waveform. The encoder runs
    once; each step batches the live prefixes through the decoder. No
    external language model is involved."""
    wave = np.asarray(waveform, dtype=model.dtype)
    enc = model.encode(dc.as_ndarray(wave[None, :]))

    def step(prefixes):
        n = len(prefixes)
        ids = np.asarray(prefixes, dtype=np.int64)
        enc_rep = dc.as_ndarray(np.repeat(enc.data, n, axis=0))
        out = model.decoder(enc_rep, ids)
        return out.data[:, -1, :].astype(np.float64)

    return beam_search(step, BOS, EOS, beam, max_len, length_normalize)


def decode_to_text(model, waveform, id_to_token, beam: int = 5, max_len: int = 16) -> str:
    hyp = beam_search_translate(model, waveform, beam, max_len)
    body = [t for t in hyp.tokens[1:] if t != EOS]
    return " ".join(id_to_token(t) for t in body)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _toks(s: str) -> list:
    return s.split()

def _ngrams(tokens, n) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _check_corpus(hypotheses, references):
    if len(hypotheses) != len(references):
        raise DataError(
            f"{len(hypotheses)} hypotheses vs {len(references)} references"
        )
    if not hypotheses:
        raise DataError("empty corpus")


def score_bleu4(hypotheses, references) -> float:
    """Corpus BLEU-4 in [0, 100]: geometric mean of modified 1..4-gram
    precisions with the brevity penalty; add-one smoothing kicks in for an
    order n >= 2 whose clipped match count is zero."""
    _check_corpus(hypotheses, references)
    matches = [0] * 5
    totals = [0] * 5
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h, r = _toks(hyp), _toks(ref)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, 5):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n] += max(0, len(h) - n + 1)
    if hyp_len == 0 or matches[1] == 0:
        return 0.0
    log_p = 0.0
    for n in range(1, 5):
        m, t = matches[n], totals[n]
        if n >= 2 and m == 0:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_p += math.log(m / t)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p / 4.0)


def _lcs_len(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[-1]))
        prev = cur
    return prev[-1]


def score_rouge_l(hypotheses, references) -> float:
    """Mean LCS F1 over sentence pairs, in [0, 1]."""
    _check_corpus(hypotheses, references)
    scores = []
    for hyp, ref in zip(hypotheses, references):
        h, r = _toks(hyp), _toks(ref)
        lcs = _lcs_len(h, r)
        if lcs == 0 or not h or not r:
            scores.append(0.0)
            continue
        p, rec = lcs / len(h), lcs / len(r)
        scores.append(2 * p * rec / (p + rec))
    return float(np.mean(scores))


def _google_bleu(hypotheses, references) -> float:
    match = 0
    hyp_total = 0
    ref_total = 0
    for hyp, ref in zip(hypotheses, references):
        h, r = _toks(hyp), _toks(ref)
        for n in range(1, 5):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            match += sum(min(c, rc[g]) for g, c in hc.items())
            hyp_total += max(0, len(h) - n + 1)
            ref_total += max(0, len(r) - n + 1)
    if hyp_total == 0 or ref_total == 0:
        return 0.0
    return min(match / hyp_total, match / ref_total)


def _nist(hypotheses, references, max_n: int = 5) -> float:
    ref_counts = [Counter() for _ in range(max_n + 1)]
    total_ref_unigrams = 0
    for ref in references:
        r = _toks(ref)
        total_ref_unigrams += len(r)
        for n in range(1, max_n + 1):
            ref_counts[n].update(_ngrams(r, n))

    def info(gram) -> float:
        n = len(gram)
        denom = ref_counts[n][gram]
        if denom == 0:
            return 0.0
        numer = total_ref_unigrams if n == 1 else ref_counts[n - 1][gram[:-1]]
        return math.log2(numer / denom) if numer > 0 else 0.0

    score = 0.0
    hyp_len = 0
    ref_len = 0
    for n in range(1, max_n + 1):
        gained = 0.0
        total = 0
        for hyp, ref in zip(hypotheses, references):
            h, r = _toks(hyp), _toks(ref)
            if n == 1:
                hyp_len += len(h)
                ref_len += len(r)
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            for g, c in hc.items():
                gained += min(c, rc[g]) * info(g)
            total += max(0, len(h) - n + 1)
        if total > 0:
            score += gained / total
    if hyp_len == 0 or ref_len == 0:
        return 0.0
    beta = math.log(0.5) / (math.log(2.0 / 3.0) ** 2)
    ratio = min(hyp_len / ref_len, 1.0)
    bp = math.exp(beta * math.log(ratio) ** 2) if ratio > 0 else 0.0
    return score * bp


def _meteor_alignment(h, r):
    """Exact-match alignment: each hypothesis token takes the earliest
    unused reference occurrence; chunks are maximal runs of consecutive
    hypothesis positions mapped to consecutive reference positions."""
    used = [False] * len(r)
    mapping = {}
    for i, tok in enumerate(h):
        for j, ref_tok in enumerate(r):
            if not used[j] and ref_tok == tok:
                used[j] = True
                mapping[i] = j
                break
    matches = len(mapping)
    chunks = 0
    prev = None
    for i in sorted(mapping):
        if prev is None or i - 1 not in mapping or mapping[i - 1] != mapping[i] - 1:
            chunks += 1
        prev = i
    return matches, chunks


def _meteor_lite(hypotheses, references) -> float:
    scores = []
    for hyp, ref in zip(hypotheses, references):
        h, r = _toks(hyp), _toks(ref)
        matches, chunks = _meteor_alignment(h, r)
        if matches == 0 or not h or not r:
            scores.append(0.0)
            continue
        p, rec = matches / len(h), matches / len(r)
        fmean = 10.0 * p * rec / (rec + 9.0 * p)
        penalty = 0.0 if chunks <= 1 else 0.5 * (chunks / matches) ** 3
        scores.append(fmean * (1.0 - penalty))
    return float(np.mean(scores))


def score_auxiliary(hypotheses, references) -> dict:
    """google_bleu, nist, and meteor_lite on one corpus."""
    _check_corpus(hypotheses, references)
    return {
        "google_bleu": _google_bleu(hypotheses, references),
        "nist": _nist(hypotheses, references),
        "meteor_lite": _meteor_lite(hypotheses, references),
    }


def score_all(hypotheses, references) -> dict:
    out = {"bleu4": score_bleu4(hypotheses, references),
           "rouge_l": score_rouge_l(hypotheses, references)}
    out.update(score_auxiliary(hypotheses, references))
    return out


# ---------------------------------------------------------------------------
# Tier aggregation
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    """Per-task scores, tier means, and the high-minus-low transfer gap."""

    per_task: dict  # task -> {metric: value}
    tiers: dict  # task -> tier
    tier_means: dict = field(default_factory=dict)  # metric -> {tier: mean}
    gaps: dict = field(default_factory=dict)  # metric -> high mean - low mean

    def to_records(self) -> list:
        lines = [REPORT_HEADER]
        for task in sorted(self.per_task):
            for metric in sorted(self.per_task[task]):
                lines.append(
                    f"{task}\t{metric}\t{self.per_task[task][metric]:.6f}\t{self.tiers[task]}"
                )
        for metric in sorted(self.gaps):
            for tier in ("high", "mid", "low"):
                lines.append(f"[{tier}-mean]\t{metric}\t{self.tier_means[metric][tier]:.6f}\t{tier}")
            lines.append(f"[transfer-gap]\t{metric}\t{self.gaps[metric]:.6f}\t-")
        return lines

    def to_table(self) -> str:
        metrics = sorted(next(iter(self.per_task.values())))
        w = max(12, max(len(t) for t in self.per_task) + 2)
        rows = [REPORT_HEADER, "task".ljust(w) + "tier".ljust(6) + "".join(m.rjust(13) for m in metrics)]
        for task in sorted(self.per_task):
            row = task.ljust(w) + self.tiers[task].ljust(6)
            row += "".join(f"{self.per_task[task][m]:13.4f}" for m in metrics)
            rows.append(row)
        for tier in ("high", "mid", "low"):
            row = f"[{tier} mean]".ljust(w) + "".ljust(6)
            row += "".join(f"{self.tier_means[m][tier]:13.4f}" for m in metrics)
            rows.append(row)
        row = "[TRFGap]".ljust(w) + "".ljust(6)
        row += "".join(f"{self.gaps[m]:13.4f}" for m in metrics)
        rows.append(row)
        return "\n".join(rows)


def compute_transfer_gap(per_task_scores: dict, tier_map: dict) -> MetricReport:
    """Tier means are arithmetic means over member tasks; the transfer gap
    is high mean minus low mean, per metric. Every tier must be
    populated."""
    for task in per_task_scores:
        if task not in tier_map:
            raise DataError(f"task {task!r} has no tier assignment")
    metrics = sorted({m for scores in per_task_scores.values() for m in scores})
    report = MetricReport(per_task=dict(per_task_scores), tiers=dict(tier_map))
    for metric in metrics:
        means = {}
        for tier in ("high", "mid", "low"):
            member = [
                s[metric] for task, s in per_task_scores.items() if tier_map[task] == tier
            ]
            if not member:
                raise DataError(f"tier {tier!r} has no tasks; cannot aggregate")
            means[tier] = float(np.mean(member))
        report.tier_means[metric] = means
        report.gaps[metric] = means["high"] - means["low"]
    return report
