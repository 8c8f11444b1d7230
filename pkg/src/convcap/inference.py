"""Caption generation from a trained model: greedy decoding, beam search,
and an exhaustive-enumeration reference decoder for small search spaces.

Scoring convention shared by all three: a hypothesis accrues the log
softmax probability of every drawn token. Drawing END finishes the
hypothesis (END's log-probability is counted but END is not stored in the
token list); hypotheses that reach max_len tokens finish without an END
draw. Ties are broken toward lower token indices, so decoding is fully
deterministic.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from convcap.models import Model
from convcap.tensor import log_softmax_rows
from convcap.text import END, START, UNK

BRUTE_FORCE_LIMIT = 10 ** 6


@dataclass
class Hypothesis:
    tokens: list[int] = field(default_factory=list)
    logprob: float = 0.0
    finished: bool = False


def _next_logprobs(model: Model, features, tokens: list[int]) -> np.ndarray:
    """Log-probabilities for the next position given the decoded prefix."""
    prefix = np.array([START] + tokens, dtype=np.int64)
    logits = model.forward(features, prefix)
    return log_softmax_rows(logits.data.astype(np.float64))[-1]


def greedy_decode(model: Model, features, max_len: int | None = None) -> Hypothesis:
    """Highest-probability token at every step; ties take the lowest index."""
    if max_len is None:
        max_len = model.cfg.max_len
    hyp = Hypothesis()
    for _ in range(max_len):
        logp = _next_logprobs(model, features, hyp.tokens)
        tok = int(np.argmax(logp))
        hyp.logprob += float(logp[tok])
        if tok == END:
            hyp.finished = True
            return hyp
        hyp.tokens.append(tok)
    return hyp


def beam_search(model: Model, features, beam_width: int = 3,
                max_len: int | None = None,
                length_normalize: bool = False,
                suppress_unk: bool = False):
    """Breadth-limited search over cumulative log-probability.

    Returns (best, n_best): the highest-scoring completed hypothesis and the
    completed pool sorted best-first (at most beam_width entries). With
    length_normalize the final ranking divides scores by token count + 1;
    raw cumulative log-probabilities are the default. suppress_unk forbids
    the UNK token during expansion.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    if max_len is None:
        max_len = model.cfg.max_len

    live = [Hypothesis()]
    completed: list[Hypothesis] = []
    for _ in range(max_len):
        if not live:
            break
        candidates = []
        for hyp in live:
            logp = _next_logprobs(model, features, hyp.tokens)
            for tok in range(logp.size):
                if suppress_unk and tok == UNK:
                    continue
                candidates.append((hyp.logprob + float(logp[tok]), hyp.tokens, tok))
        # lower token sequences win ties; trailing token index breaks the rest
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        live = []
        for score, prefix, tok in candidates[:beam_width]:
            if tok == END:
                completed.append(Hypothesis(list(prefix), score, finished=True))
            else:
                live.append(Hypothesis(list(prefix) + [tok], score))
    completed.extend(live)  # cutoff hypotheses compete un-finished

    def rank_key(h: Hypothesis):
        score = h.logprob / (len(h.tokens) + 1) if length_normalize else h.logprob
        return (-score, h.tokens)

    completed.sort(key=rank_key)
    n_best = completed[:beam_width]
    return n_best[0], n_best


def brute_force_decode(model: Model, features, max_len: int | None = None) -> Hypothesis:
    """Exact argmax sequence by exhaustive enumeration (test oracle).

    Guards against search spaces beyond |vocab|^max_len = 10^6.
    """
    if max_len is None:
        max_len = model.cfg.max_len
    vocab = model.cfg.vocab_size
    if vocab ** max_len > BRUTE_FORCE_LIMIT:
        raise ValueError(f"search space {vocab}^{max_len} exceeds {BRUTE_FORCE_LIMIT}")

    best = None

    def better(cand: Hypothesis) -> bool:
        # ties resolve toward lexicographically smaller token sequences,
        # matching the beam's ordering
        if best is None or cand.logprob > best.logprob:
            return True
        return cand.logprob == best.logprob and cand.tokens < best.tokens

    stack = [([], 0.0)]
    while stack:
        tokens, score = stack.pop()
        logp = _next_logprobs(model, features, tokens)
        # finishing with END is always a candidate
        fin = Hypothesis(list(tokens), score + float(logp[END]), finished=True)
        if better(fin):
            best = fin
        if len(tokens) + 1 == max_len:
            for tok in range(vocab):
                if tok == END:
                    continue
                cut = Hypothesis(tokens + [tok], score + float(logp[tok]))
                if better(cut):
                    best = cut
        else:
            for tok in range(vocab):
                if tok != END:
                    stack.append((tokens + [tok], score + float(logp[tok])))
    return best


def decode_corpus(model: Model, features, image_ids, beam_width: int = 3,
                  max_len: int | None = None, n_best: int = 1, **kw):
    """Beam-search every image; yields n-best records ready for JSONL."""
    for image_id in image_ids:
        feats = (features.regions[image_id], features.pooled[image_id])
        _, pool = beam_search(model, feats, beam_width=beam_width, max_len=max_len, **kw)
        for rank, hyp in enumerate(pool[:n_best]):
            yield {"id": image_id, "rank": rank, "tokens": hyp.tokens,
                   "logprob": hyp.logprob}


def write_candidates_jsonl(path, records, vocab=None):
    """Write decode records; token indices become words when vocab given."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            rec = dict(rec)
            if vocab is not None:
                rec["tokens"] = vocab.decode(rec["tokens"])
            fh.write(json.dumps(rec) + "\n")
