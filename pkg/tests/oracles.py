"""Brute-force reference implementations of the caption metrics.

Written independently of convcap.metrics: no Counter, no shared helpers.
Vectors are dense numpy arrays over an explicit n-gram inventory, the LCS
uses a full 2-d table, and BLEU counts by scanning lists. Slow on purpose.
"""

import math

import numpy as np


def ngram_list(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def oracle_bleu(instances, n_max=4):
    match_total = [0] * (n_max + 1)
    cand_total = [0] * (n_max + 1)
    c_len = 0
    r_len = 0
    for inst in instances:
        cand = inst.candidate
        c_len += len(cand)
        best_len = None
        for ref in inst.references:
            if best_len is None:
                best_len = len(ref)
            elif abs(len(ref) - len(cand)) < abs(best_len - len(cand)):
                best_len = len(ref)
            elif abs(len(ref) - len(cand)) == abs(best_len - len(cand)) and len(ref) < best_len:
                best_len = len(ref)
        r_len += best_len
        for n in range(1, n_max + 1):
            grams = ngram_list(cand, n)
            cand_total[n] += len(grams)
            for g in set(grams):
                seen = grams.count(g)
                cap = 0
                for ref in inst.references:
                    cap = max(cap, ngram_list(ref, n).count(g))
                match_total[n] += min(seen, cap)

    if c_len == 0:
        return tuple(0.0 for _ in range(n_max))
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    out = []
    for k in range(1, n_max + 1):
        log_sum = 0.0
        zero = False
        for n in range(1, k + 1):
            if cand_total[n] == 0 or match_total[n] == 0:
                zero = True
                break
            log_sum += math.log(match_total[n] / cand_total[n])
        out.append(0.0 if zero else bp * math.exp(log_sum / k))
    return tuple(out)


def oracle_lcs(a, b):
    table = np.zeros((len(a) + 1, len(b) + 1), dtype=int)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i, j] = table[i - 1, j - 1] + 1
            else:
                table[i, j] = max(table[i - 1, j], table[i, j - 1])
    return int(table[len(a), len(b)])


def oracle_rouge_l(instances, beta=1.2):
    scores = []
    for inst in instances:
        best = 0.0
        for ref in inst.references:
            if len(inst.candidate) == 0 or len(ref) == 0:
                continue
            lcs = oracle_lcs(inst.candidate, ref)
            if lcs == 0:
                continue
            prec = lcs / len(inst.candidate)
            rec = lcs / len(ref)
            f = (1 + beta ** 2) * prec * rec / (rec + beta ** 2 * prec)
            if f > best:
                best = f
        scores.append(best)
    return float(np.mean(scores)) if scores else 0.0


def oracle_cider(instances, n_max=4):
    n_images = len(instances)
    if n_images < 2:
        return 0.0

    total = 0.0
    for n in range(1, n_max + 1):
        # explicit inventory of every n-gram in sight
        inventory = set()
        for inst in instances:
            inventory.update(ngram_list(inst.candidate, n))
            for ref in inst.references:
                inventory.update(ngram_list(ref, n))
        inventory = sorted(inventory)
        col = {g: i for i, g in enumerate(inventory)}

        df = np.zeros(len(inventory))
        for inst in instances:
            present = set()
            for ref in inst.references:
                present.update(ngram_list(ref, n))
            for g in present:
                df[col[g]] += 1
        idf = np.log(n_images / np.maximum(df, 1.0))

        def vec(tokens):
            v = np.zeros(len(inventory))
            for g in ngram_list(tokens, n):
                v[col[g]] += 1.0
            return v * idf

        for inst in instances:
            cv = vec(inst.candidate)
            cn = np.linalg.norm(cv)
            sims = []
            for ref in inst.references:
                rv = vec(ref)
                rn = np.linalg.norm(rv)
                sims.append(float(cv @ rv) / (cn * rn) if cn > 0 and rn > 0 else 0.0)
            total += float(np.mean(sims))
    return 10.0 * total / (n_max * n_images)
