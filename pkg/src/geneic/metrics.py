"""Caption evaluation: BLEU, ROUGE-L, CIDEr, diversity statistics and CLIP-S.

Candidates are ``{image_id: caption}`` and references are
``{image_id: [caption, ...]}``.  Every metric tokenizes with ``tokenize``.
"""
from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass

import numpy as np

from .backend import joint_embed_image, joint_embed_text
from .errors import ContractError
from .text import tokenize

ROUGE_BETA = 1.2
CIDER_N = 4


def _aligned(cands, refs):
    if not cands:
        raise ContractError("no candidate captions")
    missing = [k for k in cands if k not in refs]
    if missing:
        raise ContractError(f"no references for image ids {missing[:5]}")
    empty = [k for k in cands if not refs[k]]
    if empty:
        raise ContractError(f"image ids with an empty reference list: {empty[:5]}")
    keys = list(cands)
    return [tokenize(cands[k]) for k in keys], [[tokenize(r) for r in refs[k]] for k in keys]


def ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# --- BLEU -------------------------------------------------------------------

def modified_precisions(cands, refs, max_n=4):
    """Corpus totals ``[(clipped matches, candidate n-grams)]`` for n = 1..max_n."""
    hyps, refsets = _aligned(cands, refs)
    totals = []
    for n in range(1, max_n + 1):
        match = count = 0
        for hyp, rs in zip(hyps, refsets):
            h = ngrams(hyp, n)
            best = Counter()
            for r in rs:
                best |= ngrams(r, n)
            match += sum(min(c, best[g]) for g, c in h.items())
            count += sum(h.values())
        totals.append((match, count))
    return totals


def _closest_ref_len(c, rs):
    return min((abs(len(r) - c), len(r)) for r in rs)[1]


def bleu(cands, refs, max_n=4):
    """Corpus BLEU-1..max_n (clipped precision, geometric mean, brevity penalty)."""
    if max_n < 1:
        raise ContractError("max_n must be >= 1")
    hyps, refsets = _aligned(cands, refs)
    c = sum(len(h) for h in hyps)
    r = sum(_closest_ref_len(len(h), rs) for h, rs in zip(hyps, refsets))
    if c == 0:
        return [0.0] * max_n
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    scores, logsum = [], 0.0
    for n, (match, count) in enumerate(modified_precisions(cands, refs, max_n), 1):
        if match == 0 or logsum == -math.inf:
            logsum = -math.inf
            scores.append(0.0)
            continue
        logsum += math.log(match / count)
        scores.append(bp * math.exp(logsum / n))
    return scores


# --- ROUGE-L ----------------------------------------------------------------

def lcs_length(a, b):
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l_pair(cand, ref, beta=ROUGE_BETA):
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def rouge_l(cands, refs, beta=ROUGE_BETA):
    hyps, refsets = _aligned(cands, refs)
    return float(np.mean([max(rouge_l_pair(h, r, beta) for r in rs) for h, rs in zip(hyps, refsets)]))


# --- CIDEr ------------------------------------------------------------------

def _tfidf(tokens, df, log_docs, n_max):
    vec = [dict() for _ in range(n_max)]
    norm = [0.0] * n_max
    for n in range(1, n_max + 1):
        for g, tf in ngrams(tokens, n).items():
            w = tf * (log_docs - math.log(max(1.0, df[g])))
            vec[n - 1][g] = w
            norm[n - 1] += w * w
    return vec, [math.sqrt(x) for x in norm]


def cider(cands, refs, n=CIDER_N):
    """Base CIDEr (no length penalty), x10, averaged over images.

    Document frequency counts the images whose reference set contains an
    n-gram; IDF is ``log(#images) - log(df)``.
    """
    hyps, refsets = _aligned(cands, refs)
    if len(hyps) < 2:
        raise ContractError("CIDEr needs at least 2 images to estimate document frequencies")
    df = defaultdict(float)
    for rs in refsets:
        seen = set()
        for r in rs:
            for k in range(1, n + 1):
                seen.update(ngrams(r, k))
        for g in seen:
            df[g] += 1.0
    log_docs = math.log(float(len(refsets)))
    scores = []
    for hyp, rs in zip(hyps, refsets):
        vh, nh = _tfidf(hyp, df, log_docs, n)
        per_ref = []
        for r in rs:
            vr, nr = _tfidf(r, df, log_docs, n)
            sims = []
            for k in range(n):
                val = sum(w * vr[k].get(g, 0.0) for g, w in vh[k].items())
                if nh[k] != 0 and nr[k] != 0:
                    val /= nh[k] * nr[k]
                sims.append(val)
            per_ref.append(float(np.mean(sims)))
        scores.append(10.0 * float(np.mean(per_ref)))
    return float(np.mean(scores))


# --- diversity --------------------------------------------------------------

def diversity(cands, train_refs=()):
    """``(vocab, pct_novel, mean_length, pct_unique)`` over a list of captions."""
    cands = list(cands)
    if not cands:
        raise ContractError("no candidate captions")
    toks = [tokenize(c) for c in cands]
    sents = [" ".join(t) for t in toks]
    seen = {" ".join(tokenize(r)) for r in train_refs}
    vocab = len({w for t in toks for w in t})
    pct_novel = 100.0 * sum(s not in seen for s in sents) / len(sents)
    mean_length = sum(len(t) for t in toks) / len(toks)
    pct_unique = 100.0 * len(set(sents)) / len(sents)
    return vocab, pct_novel, mean_length, pct_unique


# --- CLIP-S -----------------------------------------------------------------

def clip_s(images, captions, bundle, w=1.0):
    """Mean of ``100 * w * max(0, cos(image, caption))`` in the joint space."""
    if len(images) != len(captions) or not images:
        raise ContractError("clip_s needs equally many images and captions")
    vals = []
    for im, cap in zip(images, captions):
        a = joint_embed_image(im, bundle).vec
        b = joint_embed_text(cap, bundle).vec
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            raise ContractError("zero-norm joint embedding in clip_s")
        vals.append(100.0 * w * max(0.0, float(a @ b) / (na * nb)))
    return float(np.mean(vals))


@dataclass
class MetricReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    cider: float | None
    clip_s: float | None
    vocab: int
    pct_novel: float
    mean_length: float
    pct_unique: float
    n_images: int
    n_references: int

    def to_dict(self):
        return asdict(self)


def evaluate(cands, refs, train_refs=None, images=None, bundle=None, clip_weight=1.0):
    """Full metric battery.  ``train_refs`` defaults to every reference caption."""
    b = bleu(cands, refs, 4)
    if train_refs is None:
        train_refs = [r for k in refs for r in refs[k]]
    vocab, novel, length, unique = diversity(list(cands.values()), train_refs)
    cs = None
    if images is not None and bundle is not None:
        by_id = {im.id: im for im in images}
        keys = [k for k in cands if k in by_id]
        if keys:
            cs = clip_s([by_id[k] for k in keys], [cands[k] for k in keys], bundle, clip_weight)
    return MetricReport(
        bleu1=b[0], bleu2=b[1], bleu3=b[2], bleu4=b[3],
        rouge_l=rouge_l(cands, refs),
        cider=cider(cands, refs) if len(cands) >= 2 else None,
        clip_s=cs,
        vocab=vocab, pct_novel=novel, mean_length=length, pct_unique=unique,
        n_images=len(cands), n_references=sum(len(refs[k]) for k in cands),
    )
