#!/usr/bin/env python3
"""Brute-force caption-metric oracle.

Computes corpus BLEU-1..4, per-item ROUGE-L, and per-item CIDEr-D for a
set of hand-written cases, then emits them as JSONL test vectors. The
implementations here are deliberately naive (dict counting, quadratic
LCS) and written without reference to the C++ code; the C++ metrics must
agree with the frozen output to 1e-6.

Conventions pinned by this oracle:
  - corpus BLEU: pooled clipped counts, pooled brevity penalty
    exp(1 - r/c) with r summed from the per-candidate closest reference
    length (ties -> shorter); no smoothing.
  - ROUGE-L: F with beta = 1.2, max over references.
  - CIDEr-D: sigma = 6, orders 1..4, idf = log(N/df) over the idf image
    set; an n-gram with df 0 gets df floored to 1 when it occurs in the
    scored item's own references and weight 0 otherwise; per-reference
    min-clipped tf-idf cosine times the Gaussian length penalty, times
    10, averaged over references then over orders.

Usage: python3 metric_oracle.py > ../fixtures/metric_cases.jsonl
"""

import json
import math
from collections import Counter


def ngrams(toks, n):
    return [tuple(toks[i : i + n]) for i in range(len(toks) - n + 1)]


def bleu_corpus(items, n_max=4):
    pooled = []
    for n in range(1, n_max + 1):
        num = 0
        den = 0
        for it in items:
            cand = it["cand"]
            cnt = Counter(ngrams(cand, n))
            den += max(0, len(cand) - n + 1)
            maxref = Counter()
            for ref in it["refs"]:
                for g, k in Counter(ngrams(ref, n)).items():
                    maxref[g] = max(maxref[g], k)
            num += sum(min(k, maxref[g]) for g, k in cnt.items())
        pooled.append((num, den))

    c_total = sum(len(it["cand"]) for it in items)
    r_total = 0
    for it in items:
        best = None
        for ref in it["refs"]:
            d = abs(len(ref) - len(it["cand"]))
            if best is None or d < best[0] or (d == best[0] and len(ref) < best[1]):
                best = (d, len(ref))
        r_total += best[1]

    if c_total == 0:
        return [0.0] * n_max
    bp = 1.0 if c_total > r_total else math.exp(1.0 - r_total / c_total)

    out = []
    for n in range(1, n_max + 1):
        log_sum = 0.0
        ok = True
        for k in range(n):
            num, den = pooled[k]
            if num == 0 or den == 0:
                ok = False
                break
            log_sum += math.log(num / den)
        out.append(bp * math.exp(log_sum / n) if ok else 0.0)
    return out


def lcs_len(a, b):
    dp = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                dp[i][j] = dp[i - 1][j - 1] + 1
            else:
                dp[i][j] = max(dp[i - 1][j], dp[i][j - 1])
    return dp[len(a)][len(b)]


def rouge_l(cand, refs, beta=1.2):
    best = 0.0
    for ref in refs:
        if not cand or not ref:
            continue
        l = lcs_len(cand, ref)
        if l == 0:
            continue
        p = l / len(cand)
        r = l / len(ref)
        f = (1 + beta * beta) * p * r / (r + beta * beta * p)
        best = max(best, f)
    return best


def cider_d(cand, refs, idf_images, sigma=6.0, n_max=4):
    n_images = len(idf_images)
    df = [Counter() for _ in range(n_max)]
    for image_refs in idf_images:
        seen = [set() for _ in range(n_max)]
        for ref in image_refs:
            for n in range(n_max):
                seen[n].update(ngrams(ref, n + 1))
        for n in range(n_max):
            for g in seen[n]:
                df[n][g] += 1

    own = [set() for _ in range(n_max)]
    for ref in refs:
        for n in range(n_max):
            own[n].update(ngrams(ref, n + 1))

    def weight(g, n):
        d = df[n][g]
        if d == 0:
            if g in own[n]:
                d = 1
            else:
                return 0.0
        return math.log(n_images) - math.log(d)

    order_scores = []
    for n in range(n_max):
        cc = Counter(ngrams(cand, n + 1))
        norm_c = math.sqrt(sum((k * weight(g, n)) ** 2 for g, k in cc.items()))
        acc = 0.0
        for ref in refs:
            rc = Counter(ngrams(ref, n + 1))
            norm_r = math.sqrt(sum((k * weight(g, n)) ** 2 for g, k in rc.items()))
            dot_cr = sum(
                min(k, rc[g]) * weight(g, n) * rc[g] * weight(g, n)
                for g, k in cc.items()
                if g in rc
            )
            sim = dot_cr / (norm_c * norm_r) if norm_c > 0 and norm_r > 0 else 0.0
            delta = len(cand) - len(ref)
            penalty = math.exp(-(delta * delta) / (2.0 * sigma * sigma))
            acc += 10.0 * penalty * sim
        order_scores.append(acc / len(refs) if refs else 0.0)
    return sum(order_scores) / n_max


def toks(s):
    return s.split()


def rename(tokens, mapping):
    return [mapping[t] for t in tokens]


def build_cases():
    cases = []

    def add(name, idf_images, items):
        cases.append({"name": name, "idf_images": idf_images, "items": items})

    add(
        "single_image_identity",
        [[toks("a brown dog runs fast")]],
        [{"cand": toks("a brown dog runs fast"), "refs": [toks("a brown dog runs fast")]}],
    )

    add(
        "identity_in_three_image_corpus",
        [
            [toks("the happy dog chases birds")],
            [toks("a sullen cat ignores everyone")],
            [toks("bright sun warms the beach")],
        ],
        [{"cand": toks("the happy dog chases birds"), "refs": [toks("the happy dog chases birds")]}],
    )

    add(
        "clipped_unigram_precision",
        [[toks("the cat")]],
        [{"cand": toks("the the the"), "refs": [toks("the cat")]}],
    )

    add(
        "swapped_pair",
        [[toks("b a")]],
        [{"cand": toks("a b"), "refs": [toks("b a")]}],
    )

    add(
        "disjoint_vocabulary",
        [[toks("p q r")]],
        [{"cand": toks("x y z"), "refs": [toks("p q r")]}],
    )

    add(
        "empty_candidate",
        [[toks("p q r s t")], [toks("a b c d e")]],
        [
            {"cand": [], "refs": [toks("p q r s t")]},
            {"cand": toks("a b c d e"), "refs": [toks("a b c d e")]},
        ],
    )

    add(
        "multi_reference_clipping",
        [
            [toks("two dogs play"), toks("dogs play together happily")],
            [toks("cats sleep all day")],
        ],
        [
            {
                "cand": toks("dogs dogs play play"),
                "refs": [toks("two dogs play"), toks("dogs play together happily")],
            },
            {"cand": toks("cats sleep all day"), "refs": [toks("cats sleep all day")]},
        ],
    )

    add(
        "df_floor_for_out_of_corpus_references",
        [[toks("green trees line the road")], [toks("old cars rust slowly here")]],
        [{"cand": toks("quiet lake shines at dawn"), "refs": [toks("quiet lake shines at dawn")]}],
    )

    add(
        "candidate_only_token_gets_zero_weight",
        [[toks("small boats drift by shore")], [toks("tall grass waves in wind")]],
        [
            {
                "cand": toks("small boats drift by shore zzz"),
                "refs": [toks("small boats drift by shore")],
            }
        ],
    )

    add(
        "length_penalty_prefix_candidate",
        [
            [toks("one two three four five six seven eight")],
            [toks("red roses bloom late in autumn gardens now")],
            [toks("children laugh loudly during long summer evenings here")],
        ],
        [
            {
                "cand": toks("one two three four"),
                "refs": [toks("one two three four five six seven eight")],
            }
        ],
    )

    mixed_idf = [
        [toks("a man rides a red bike"), toks("a cyclist on a red bike")],
        [toks("two birds sit on a wire"), toks("birds resting on a power line")],
        [toks("a bowl of fresh green salad"), toks("fresh salad in a white bowl")],
        [toks("a man walks his small dog"), toks("a small dog walks with a man")],
    ]
    mixed_items = [
        {"cand": toks("a man rides a bike"), "refs": mixed_idf[0]},
        {"cand": toks("two birds on a wire"), "refs": mixed_idf[1]},
        {"cand": toks("a bowl of salad salad"), "refs": mixed_idf[2]},
        {"cand": toks("a small dog walks with a man"), "refs": mixed_idf[3]},
    ]
    add("mixed_corpus", mixed_idf, mixed_items)

    vocab = set()
    for image in mixed_idf:
        for ref in image:
            vocab.update(ref)
    for it in mixed_items:
        vocab.update(it["cand"])
    mapping = {t: "w%02d" % i for i, t in enumerate(sorted(vocab))}
    renamed_idf = [[rename(r, mapping) for r in image] for image in mixed_idf]
    renamed_items = [
        {"cand": rename(it["cand"], mapping), "refs": [rename(r, mapping) for r in it["refs"]]}
        for it in mixed_items
    ]
    add("mixed_corpus_renamed_vocabulary", renamed_idf, renamed_items)

    return cases


def main():
    for case in build_cases():
        items = case["items"]
        expected = {
            "bleu": bleu_corpus(items),
            "rouge_l": [rouge_l(it["cand"], it["refs"]) for it in items],
            "cider_d": [cider_d(it["cand"], it["refs"], case["idf_images"]) for it in items],
        }
        case["expected"] = expected
        print(json.dumps(case))


if __name__ == "__main__":
    main()
