"""Explaining prompt vectors: nearest vocabulary word and direct generation."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class VocabEmbeddings:
    matrix: np.ndarray  # V x d_dec
    tokens: tuple[str, ...]

    @classmethod
    def from_bundle(cls, bundle):
        return cls(np.asarray(bundle.decoder.token_embeddings()), tuple(bundle.vocab))


def render_token(token, token_id):
    """Printable words pass through; special or non-printable tokens become ``N/A[id]``."""
    if token.startswith("<") and token.endswith(">") or not token.isprintable() or not token.strip():
        return f"N/A[{token_id}]"
    return token


def nearest_index(vec, vocab):
    """``(id, distance)`` of the closest vocabulary row; lowest id wins ties."""
    if len(vocab.tokens) == 0:
        raise ContractError("vocabulary is empty")
    vec = np.asarray(vec, dtype=np.float64).ravel()
    if vec.shape[0] != vocab.matrix.shape[1]:
        raise ContractError(f"vector width {vec.shape[0]} != embedding width {vocab.matrix.shape[1]}")
    dist = np.sqrt(((vocab.matrix - vec) ** 2).sum(axis=1))
    k = int(np.argmin(dist))
    return k, float(dist[k])


def nearest_word(vec, vocab):
    k, dist = nearest_index(vec, vocab)
    return vocab.tokens[k], dist


def first_token_distribution(vec, bundle):
    """Softmax over the first generated token when ``vec`` is the only decoder slot."""
    vec = np.asarray(vec, dtype=np.float64).ravel()
    if vec.shape[0] != bundle.dims.d_dec:
        raise ContractError(f"vector width {vec.shape[0]} != d_dec {bundle.dims.d_dec}")
    logits = bundle.decoder.step_logits(vec[None, :], [])
    p = np.exp(logits - np.max(logits))
    return p / p.sum()


def generate_from_prompt(vec, bundle):
    """Most probable first token (and its probability) for ``vec`` fed alone."""
    p = first_token_distribution(vec, bundle)
    k = int(np.argmax(p))
    return bundle.vocab[k], float(p[k])


def interpret_prompt(state, bundle):
    """One row per prompt vector with its retrieved and generated words."""
    if state.M < 1:
        raise ContractError("prompt has no vectors to interpret")
    vocab = VocabEmbeddings.from_bundle(bundle)
    rows = []
    for m, vec in enumerate(state.vectors.astype(np.float64)):
        wid, dist = nearest_index(vec, vocab)
        p = first_token_distribution(vec, bundle)
        gid = int(np.argmax(p))
        rows.append({
            "index": m,
            "retrieved": render_token(vocab.tokens[wid], wid),
            "retrieved_id": wid,
            "distance": dist,
            "generated": render_token(bundle.vocab[gid], gid),
            "generated_id": gid,
            "probability": float(p[gid]),
        })
    return rows


def format_table(rows):
    header = ("#", "retrieval (distance)", "generation (prob)")
    body = [
        (str(r["index"] + 1), f"{r['retrieved']} ({r['distance']:.4f})", f"{r['generated']} ({r['probability']:.4f})")
        for r in rows
    ]
    widths = [max(len(x[i]) for x in [header, *body]) for i in range(3)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in [header, *body]]
    return "\n".join(lines) + "\n"


def table_json(rows):
    return json.dumps(rows, indent=1, sort_keys=True) + "\n"
