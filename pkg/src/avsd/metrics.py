"""Corpus BLEU-1..4, ROUGE_L and CIDEr-D following the COCO caption toolkit."""

from __future__ import annotations

import json
import math
import warnings
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .data import tokenize

ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0
CIDER_SCALE = 10.0


@dataclass
class EvalPair:
    id: str
    hypothesis: list[str]
    references: list[list[str]]

    def __post_init__(self):
        if not self.references:
            raise ValueError(f"pair {self.id!r} has no reference")

    @classmethod
    def from_text(cls, id: str, hypothesis: str, references: Sequence[str] | str) -> "EvalPair":
        if isinstance(references, str):
            references = [references]
        return cls(id, tokenize(hypothesis), [tokenize(r) for r in references])


@dataclass
class MetricReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    cider: float

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU


def bleu(corpus: Sequence[EvalPair], max_n: int = 4) -> list[float]:
    """Corpus BLEU-1..max_n with per-reference clipping and closest-length brevity penalty."""
    if not corpus:
        raise ValueError("empty corpus")
    matched = [0] * max_n
    total = [0] * max_n
    hyp_len = ref_len = 0
    for pair in corpus:
        hyp = pair.hypothesis
        hyp_len += len(hyp)
        # closest reference length, shorter one on ties
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in pair.references)[1]
        for n in range(1, max_n + 1):
            counts = ngrams(hyp, n)
            max_ref: Counter = Counter()
            for r in pair.references:
                max_ref |= ngrams(r, n)
            matched[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            total[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0:
        return [0.0] * max_n
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    scores = []
    log_sum = 0.0
    for n in range(1, max_n + 1):
        if matched[n - 1] == 0 or log_sum == -math.inf:
            log_sum = -math.inf
            scores.append(0.0)
            continue
        log_sum += math.log(matched[n - 1] / total[n - 1])
        scores.append(bp * math.exp(log_sum / n))
    return scores


# ---------------------------------------------------------------------------
# ROUGE_L


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(hyp: Sequence[str], refs: Sequence[Sequence[str]], beta: float = ROUGE_BETA) -> float:
    # COCO toolkit: best precision and best recall over references, then F_beta
    if not hyp:
        return 0.0
    precs, recs = [], []
    for r in refs:
        lcs = lcs_length(hyp, r)
        precs.append(lcs / len(hyp))
        recs.append(lcs / len(r) if r else 0.0)
    p, r = max(precs), max(recs)
    if p == 0 or r == 0:
        return 0.0
    return (1 + beta**2) * p * r / (r + beta**2 * p)


def rouge_l(corpus: Sequence[EvalPair]) -> float:
    if not corpus:
        raise ValueError("empty corpus")
    return sum(rouge_l_pair(p.hypothesis, p.references) for p in corpus) / len(corpus)


# ---------------------------------------------------------------------------
# CIDEr-D


def _tfidf(tokens: Sequence[str], df: dict, log_n: float, max_n: int):
    vecs = [dict() for _ in range(max_n)]
    norms = [0.0] * max_n
    for n in range(1, max_n + 1):
        for g, tf in ngrams(tokens, n).items():
            w = tf * (log_n - math.log(max(1.0, df.get(g, 0.0))))
            vecs[n - 1][g] = w
            norms[n - 1] += w * w
    return vecs, [math.sqrt(x) for x in norms], len(tokens)


def _cider_sim(hyp, ref, max_n: int, sigma: float) -> list[float]:
    (hv, hn, hl), (rv, rn, rl) = hyp, ref
    delta = hl - rl
    out = []
    for n in range(max_n):
        val = 0.0
        for g, w in hv[n].items():
            if g in rv[n]:
                val += min(w, rv[n][g]) * rv[n][g]
        if hn[n] != 0 and rn[n] != 0:
            val /= hn[n] * rn[n]
        out.append(val * math.exp(-(delta**2) / (2 * sigma**2)))
    return out


def cider_scores(corpus: Sequence[EvalPair], max_n: int = 4, sigma: float = CIDER_SIGMA) -> list[float]:
    """Per-pair CIDEr-D; document frequencies come from the references of the corpus."""
    if not corpus:
        raise ValueError("empty corpus")
    if len(corpus) < 2:
        warnings.warn("CIDEr-D over a single document: every IDF weight is zero", RuntimeWarning, stacklevel=2)
    df: dict = defaultdict(float)
    for pair in corpus:
        seen = set()
        for r in pair.references:
            for n in range(1, max_n + 1):
                seen.update(ngrams(r, n))
        for g in seen:
            df[g] += 1.0
    log_n = math.log(float(len(corpus)))
    out = []
    for pair in corpus:
        h = _tfidf(pair.hypothesis, df, log_n, max_n)
        total = [0.0] * max_n
        for r in pair.references:
            sims = _cider_sim(h, _tfidf(r, df, log_n, max_n), max_n, sigma)
            total = [a + b for a, b in zip(total, sims)]
        out.append(CIDER_SCALE * (sum(total) / max_n) / len(pair.references))
    return out


def cider(corpus: Sequence[EvalPair], max_n: int = 4, sigma: float = CIDER_SIGMA) -> float:
    scores = cider_scores(corpus, max_n, sigma)
    return sum(scores) / len(scores)


def evaluate(corpus: Sequence[EvalPair]) -> MetricReport:
    b = bleu(corpus, 4)
    return MetricReport(b[0], b[1], b[2], b[3], rouge_l(corpus), cider(corpus))


# ---------------------------------------------------------------------------
# results files


def load_results(path) -> list[EvalPair]:
    """JSON-lines records with ``id``, ``hypothesis`` and ``reference`` or ``references``.

    An optional ``round`` field is folded into the pair id.
    """
    pairs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        refs = rec.get("references", rec.get("reference"))
        if refs is None:
            raise ValueError(f"{path}:{lineno}: record has no reference")
        pid = str(rec["id"]) if "round" not in rec else f"{rec['id']}#{rec['round']}"
        pairs.append(EvalPair.from_text(pid, rec["hypothesis"], refs))
    return pairs


def write_report(path, report: MetricReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")


def pairs_from_text(items: Iterable[tuple[str, str, Sequence[str] | str]]) -> list[EvalPair]:
    return [EvalPair.from_text(i, h, r) for i, h, r in items]
