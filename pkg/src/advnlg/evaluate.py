"""Corpus BLEU-4, slot coverage, and paired bootstrap significance."""
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .corpus import DelexPolicy, PLACEHOLDER_RE, tokenize

MAX_N = 4


@dataclass
class EvalReport:
    bleu: float
    precisions: list
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    matches: list
    totals: list
    slot_coverage: float = None
    per_instance: list = field(default_factory=list)

    def check(self):
        if all(p > 0 for p in self.precisions):
            expect = self.brevity_penalty * math.exp(sum(math.log(p) for p in self.precisions) / MAX_N)
        else:
            expect = 0.0
        return abs(expect - self.bleu) <= 1e-12

    def table(self):
        rows = [("BLEU-4", f"{self.bleu:.4f}")]
        rows += [(f"p{n + 1}", f"{p:.4f}") for n, p in enumerate(self.precisions)]
        rows += [("brevity penalty", f"{self.brevity_penalty:.4f}"),
                 ("hyp length", str(self.hyp_len)), ("ref length", str(self.ref_len))]
        if self.slot_coverage is not None:
            rows.append(("slot coverage", f"{self.slot_coverage:.4f}"))
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)

    def records(self):
        head = {"kind": "corpus", "bleu": self.bleu, "p1": self.precisions[0],
                "p2": self.precisions[1], "p3": self.precisions[2], "p4": self.precisions[3],
                "bp": self.brevity_penalty, "hyp_len": self.hyp_len, "ref_len": self.ref_len,
                "slot_coverage": self.slot_coverage}
        return [head] + [dict(kind="instance", **r) for r in self.per_instance]


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def sentence_stats(hyp, refs):
    """Clipped matches and totals for n=1..4, hypothesis length, closest reference length."""
    stats = np.zeros(2 * MAX_N + 2)
    for n in range(1, MAX_N + 1):
        h = _ngrams(hyp, n)
        best = Counter()
        for r in refs:
            for g, c in _ngrams(r, n).items():
                if c > best[g]:
                    best[g] = c
        stats[n - 1] = sum(min(c, best[g]) for g, c in h.items())
        stats[MAX_N + n - 1] = max(len(hyp) - n + 1, 0)
    c = len(hyp)
    stats[2 * MAX_N] = c
    stats[2 * MAX_N + 1] = min((len(r) for r in refs), key=lambda L: (abs(L - c), L))
    return stats


def bleu_from_stats(total):
    matches, totals = total[:MAX_N], total[MAX_N:2 * MAX_N]
    c, r = total[2 * MAX_N], total[2 * MAX_N + 1]
    precisions = [float(m / t) if t > 0 else 0.0 for m, t in zip(matches, totals)]
    if c == 0:
        bp = 0.0
    elif c > r:
        bp = 1.0
    else:
        bp = math.exp(1.0 - r / c)
    if min(precisions) <= 0:
        return 0.0, precisions, bp
    return bp * math.exp(sum(math.log(p) for p in precisions) / MAX_N), precisions, bp


def bleu4(hypotheses, references):
    """Corpus-level multi-reference BLEU-4 over token sequences, no smoothing."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses but {len(references)} reference sets")
    if any(len(r) == 0 for r in references):
        raise ValueError("every reference set must be nonempty")
    per = [sentence_stats(h, refs) for h, refs in zip(hypotheses, references)]
    total = np.sum(per, axis=0) if per else np.zeros(2 * MAX_N + 2)
    bleu, precisions, bp = bleu_from_stats(total)
    instances = [{"index": i, "hyp_len": int(s[2 * MAX_N]), "ref_len": int(s[2 * MAX_N + 1]),
                  "matches": [int(x) for x in s[:MAX_N]]} for i, s in enumerate(per)]
    return EvalReport(bleu, precisions, bp, int(total[2 * MAX_N]), int(total[2 * MAX_N + 1]),
                      [int(x) for x in total[:MAX_N]], [int(x) for x in total[MAX_N:2 * MAX_N]],
                      per_instance=instances)


def corpus_bleu_text(hypotheses, references):
    """BLEU over raw strings, tokenized with the corpus tokenizer."""
    return bleu4([tokenize(h) for h in hypotheses],
                 [[tokenize(r) for r in refs] for refs in references])


def _contains(tokens, phrase):
    n = len(phrase)
    return n > 0 and any(tokens[i:i + n] == phrase for i in range(len(tokens) - n + 1))


def slot_coverage(hypothesis, mr, policy=None):
    """Return ``(covered, missing, hallucinated_placeholders)`` for one output."""
    policy = policy or DelexPolicy()
    toks = tokenize(hypothesis)
    covered = missing = 0
    for slot, value in mr.slots:
        if not value:
            continue
        phrases = [tokenize(p) for p in policy.realizations_for(slot, value)]
        if any(_contains(toks, p) for p in phrases):
            covered += 1
        else:
            missing += 1
    return covered, missing, len(PLACEHOLDER_RE.findall(hypothesis))


def significance(hyps_a, hyps_b, refs, resamples=1000, seed=0, bleu_fn=None):
    """One-sided paired bootstrap p-value that system A beats system B.

    The p-value is the fraction of resampled corpora on which the BLEU
    difference does not keep the sign of the full-corpus difference.
    """
    if not (len(hyps_a) == len(hyps_b) == len(refs)):
        raise ValueError("systems and references must be aligned")
    if resamples < 100:
        raise ValueError("use at least 100 bootstrap resamples")
    n = len(refs)
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, n, size=(resamples, n))
    if bleu_fn is None:
        sa = np.array([sentence_stats(h, r) for h, r in zip(hyps_a, refs)])
        sb = np.array([sentence_stats(h, r) for h, r in zip(hyps_b, refs)])
        full = bleu_from_stats(sa.sum(0))[0] - bleu_from_stats(sb.sum(0))[0]
        deltas = np.array([bleu_from_stats(sa[d].sum(0))[0] - bleu_from_stats(sb[d].sum(0))[0]
                           for d in draws])
    else:
        full = bleu_fn(hyps_a, refs) - bleu_fn(hyps_b, refs)
        deltas = np.array([bleu_fn([hyps_a[i] for i in d], [refs[i] for i in d])
                           - bleu_fn([hyps_b[i] for i in d], [refs[i] for i in d]) for d in draws])
    if full == 0:
        return 1.0
    return float(np.mean(deltas * np.sign(full) <= 0))
