"""Corpus-level caption metrics: BLEU-1..4, ROUGE-L, and CIDEr against
multi-reference caption sets.

BLEU uses modified (clipped) n-gram precision pooled over the corpus, a
geometric mean of orders 1..n, and the closest-reference-length brevity
penalty. ROUGE-L is the LCS F-measure, maxed over references and averaged
over instances. CIDEr builds tf-idf n-gram vectors per order (idf over the
evaluation references, images as documents), averages candidate/reference
cosines over references and orders, and scales by 10. METEOR needs external
synonym resources and is reported as "n/a" to keep the table shape.
"""

import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass

from convcap.errors import DataError, FormatError
from convcap.text import CaptionDataset

METRIC_COLUMNS = ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "METEOR", "CIDEr", "ROUGE-L")


@dataclass
class EvalInstance:
    image_id: str
    candidate: list[str]
    references: list[list[str]]

    def __post_init__(self):
        if not self.references:
            raise DataError(f"{self.image_id}: instance has no references")


@dataclass
class MetricReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    cider: float
    instances: int

    def as_dict(self):
        return {"bleu1": self.bleu1, "bleu2": self.bleu2, "bleu3": self.bleu3,
                "bleu4": self.bleu4, "meteor": None, "cider": self.cider,
                "rouge_l": self.rouge_l, "instances": self.instances}

    def row(self):
        """Values in the table column order; METEOR is always 'n/a'."""
        return (self.bleu1, self.bleu2, self.bleu3, self.bleu4, None,
                self.cider, self.rouge_l)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(instances, n_max: int = 4):
    """Corpus BLEU-1..n_max as a tuple."""
    matches = [0] * n_max
    totals = [0] * n_max
    cand_len = 0
    ref_len = 0
    for inst in instances:
        cand = inst.candidate
        cand_len += len(cand)
        # closest reference length, ties toward the shorter one
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in inst.references)[1]
        for n in range(1, n_max + 1):
            grams = _ngrams(cand, n)
            if not grams:
                continue
            best = Counter()
            for ref in inst.references:
                ref_grams = _ngrams(ref, n)
                for g in grams:
                    best[g] = max(best[g], ref_grams.get(g, 0))
            matches[n - 1] += sum(min(c, best[g]) for g, c in grams.items())
            totals[n - 1] += sum(grams.values())

    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len) if cand_len else 0.0
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    scores = []
    for n in range(1, n_max + 1):
        if any(p == 0.0 for p in precisions[:n]):
            scores.append(0.0)
        else:
            scores.append(bp * math.exp(sum(math.log(p) for p in precisions[:n]) / n))
    return tuple(scores)


def _lcs_length(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(instances, beta: float = 1.2) -> float:
    """Mean over instances of the best LCS F-measure across references."""
    total = 0.0
    count = 0
    for inst in instances:
        best = 0.0
        for ref in inst.references:
            if not inst.candidate or not ref:
                continue
            lcs = _lcs_length(inst.candidate, ref)
            if lcs == 0:
                continue
            p = lcs / len(inst.candidate)
            r = lcs / len(ref)
            f = (1 + beta * beta) * p * r / (r + beta * beta * p)
            best = max(best, f)
        total += best
        count += 1
    return total / count if count else 0.0


def cider(instances, n_max: int = 4) -> float:
    """Basic tf-idf n-gram cosine CIDEr, scaled by 10.

    idf is computed over the evaluation references with images as documents.
    A single-image corpus has degenerate idf (log 1 = 0) and scores 0.
    """
    instances = list(instances)
    n_images = len(instances)
    if n_images < 2:
        warnings.warn("cider: idf degenerates on a corpus of fewer than 2 images; "
                      "scoring 0 by convention")
        return 0.0

    doc_freq = [Counter() for _ in range(n_max)]
    for inst in instances:
        for n in range(1, n_max + 1):
            present = set()
            for ref in inst.references:
                present.update(_ngrams(ref, n).keys())
            for g in present:
                doc_freq[n - 1][g] += 1

    def tfidf(tokens, n):
        # df is clamped to 1 so candidate n-grams absent from every
        # reference still weigh down the cosine through the norm
        vec = {}
        for g, c in _ngrams(tokens, n).items():
            idf = math.log(n_images / max(doc_freq[n - 1].get(g, 0), 1))
            if idf:
                vec[g] = c * idf
        return vec

    def cosine(u, v):
        nu = math.sqrt(sum(x * x for x in u.values()))
        nv = math.sqrt(sum(x * x for x in v.values()))
        if nu == 0.0 or nv == 0.0:
            return 0.0
        dot = sum(x * v[g] for g, x in u.items() if g in v)
        return dot / (nu * nv)

    total = 0.0
    for inst in instances:
        per_order = []
        for n in range(1, n_max + 1):
            cand_vec = tfidf(inst.candidate, n)
            sims = [cosine(cand_vec, tfidf(ref, n)) for ref in inst.references]
            per_order.append(sum(sims) / len(sims))
        total += 10.0 * sum(per_order) / n_max
    return total / n_images


def score_all(instances) -> MetricReport:
    instances = list(instances)
    if not instances:
        raise DataError("no instances to evaluate")
    b1, b2, b3, b4 = bleu(instances)
    return MetricReport(bleu1=b1, bleu2=b2, bleu3=b3, bleu4=b4,
                        rouge_l=rouge_l(instances), cider=cider(instances),
                        instances=len(instances))


# ---------------------------------------------------------------------------
# Corpus-level entry point

def load_candidates_jsonl(path) -> dict[str, list[str]]:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                image_id = str(obj["id"])
                tokens = [str(t) for t in obj["tokens"]]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise FormatError(f"{path}:{lineno}: bad candidate record: {e}") from e
            if obj.get("rank", 0) != 0:
                continue  # n-best files: score the top hypothesis only
            if image_id in out:
                raise DataError(f"duplicate candidate id {image_id!r}")
            out[image_id] = tokens
    return out


def build_instances(candidates: dict, dataset: CaptionDataset, split: str):
    split_records = {r.image_id: r for r in dataset.split(split)}
    unknown = sorted(set(candidates) - set(split_records))
    if unknown:
        raise DataError(f"candidate ids not in split {split!r}: {unknown[:5]}")
    missing = sorted(set(split_records) - set(candidates))
    if missing:
        raise DataError(f"split {split!r} images without candidates: {missing[:5]}")
    return [EvalInstance(i, candidates[i], split_records[i].captions)
            for i in sorted(candidates)]


def evaluate_corpus(candidates_path, dataset: CaptionDataset, split: str) -> MetricReport:
    candidates = load_candidates_jsonl(candidates_path)
    if not candidates:
        raise DataError(f"{candidates_path}: empty candidate set")
    return score_all(build_instances(candidates, dataset, split))


def format_table(rows: list[tuple[str, MetricReport]], label: str = "Method") -> str:
    """Aligned text table in the reporting column order."""
    header = [label, *METRIC_COLUMNS]
    body = []
    for name, report in rows:
        cells = [name]
        for value in report.row():
            cells.append("n/a" if value is None else f"{value:.4f}")
        body.append(cells)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines.append("-" * len(lines[0]))
    for cells in body:
        lines.append("  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip())
    return "\n".join(lines) + "\n"


def format_csv(rows: list[tuple[str, MetricReport]], label: str = "method") -> str:
    lines = [",".join([label.lower(), *(c.lower().replace("-", "") for c in METRIC_COLUMNS)])]
    for name, report in rows:
        cells = [name]
        for value in report.row():
            cells.append("n/a" if value is None else f"{value:.6f}")
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
