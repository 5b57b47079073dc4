"""Joint-space corpus index, k-means clustering and partner selection."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backend import joint_embed_image, make_rng
from .errors import ContractError, FormatError, NoPartnerError
from .io import atomic_write


@dataclass(frozen=True)
class CorpusIndex:
    ids: tuple[str, ...]
    embeddings: np.ndarray  # N x d_j, unit rows

    def __post_init__(self):
        ids = tuple(self.ids)
        if len(set(ids)) != len(ids):
            raise ContractError("corpus ids must be unique")
        emb = np.array(self.embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] != len(ids):
            raise ContractError(f"embedding matrix {emb.shape} does not match {len(ids)} ids")
        emb.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "embeddings", emb)

    def __len__(self):
        return len(self.ids)


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray
    centroids: np.ndarray
    k: int
    # within-cluster sum of squares after every Lloyd iteration
    objective_history: tuple[float, ...] = field(default=())

    def members(self, c):
        return np.flatnonzero(self.labels == c)

    def sizes(self):
        return np.bincount(self.labels, minlength=self.k)


@dataclass(frozen=True)
class PairBatch:
    pairs: tuple[tuple[int, int], ...]
    batch_size: int

    def __len__(self):
        return len(self.pairs)


def embed_corpus(images, bundle):
    if not images:
        raise ContractError("corpus is empty")
    rows = [joint_embed_image(im, bundle).normalize().vec for im in images]
    return CorpusIndex(tuple(im.id for im in images), np.vstack(rows))


def default_k(n):
    return min(n, max(2, n // 50))


def _wcss(x, labels, centroids):
    return float(np.sum((x - centroids[labels]) ** 2))


def _assign(x, centroids):
    d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)  # argmin keeps the lowest cluster id on ties


def _kmeanspp(x, k, rng):
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            nxt = min(nxt, n - 1)
        else:
            remaining = [i for i in range(n) if i not in chosen]
            nxt = remaining[int(rng.integers(len(remaining)))]
        chosen.append(nxt)
        d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(axis=1))
    return x[chosen].copy()


def _repair_empty(x, labels, centroids, k):
    """Give each empty cluster the point farthest from the largest cluster's centroid."""
    for c in range(k):
        if np.any(labels == c):
            continue
        sizes = np.bincount(labels, minlength=k)
        big = int(np.argmax(sizes))
        members = np.flatnonzero(labels == big)
        dist = ((x[members] - centroids[big]) ** 2).sum(axis=1)
        far = int(members[np.argmax(dist)])
        labels[far] = c
        centroids[c] = x[far]
        centroids[big] = x[labels == big].mean(axis=0)
    return labels, centroids


def cluster_corpus(index, k=None, seed=0, max_iter=100):
    """k-means (k-means++ seeding, Lloyd iterations) over the unit-norm rows."""
    x = index.embeddings
    n = x.shape[0]
    k = default_k(n) if k is None else int(k)
    if not 1 <= k <= n:
        raise ContractError(f"k must be in [1, {n}], got {k}")
    rng = make_rng(seed)
    centroids = _kmeanspp(x, k, rng)
    labels = None
    history = []
    for _ in range(max(1, max_iter)):
        new = _assign(x, centroids)
        new, centroids = _repair_empty(x, new, centroids, k)
        for c in range(k):
            centroids[c] = x[new == c].mean(axis=0)
        history.append(_wcss(x, new, centroids))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
    labels = new
    labels.setflags(write=False)
    centroids.setflags(write=False)
    return ClusterAssignment(labels, centroids, k, tuple(history))


def select_partner(i, assignment, index):
    """Most cosine-similar other member of ``i``'s cluster (lowest index on ties)."""
    members = [j for j in assignment.members(assignment.labels[i]) if j != i]
    if not members:
        raise NoPartnerError(f"image {index.ids[i]!r} is alone in cluster {assignment.labels[i]}")
    sims = index.embeddings[members] @ index.embeddings[i]
    return int(members[int(np.argmax(sims))])


def nearest_neighbor(i, index):
    sims = index.embeddings @ index.embeddings[i]
    sims[i] = -np.inf
    return int(np.argmax(sims))


def find_partner(i, assignment, index):
    """``select_partner`` with the global nearest neighbour as singleton fallback."""
    try:
        return select_partner(i, assignment, index)
    except NoPartnerError:
        if len(index) < 2:
            raise
        return nearest_neighbor(i, index)


def build_pair_batches(assignment, index, batch_size, seed=0):
    """One epoch of (original, partner) pairs, shuffled by ``seed``."""
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    n = len(index)
    partners = [find_partner(i, assignment, index) for i in range(n)]
    order = make_rng(seed).permutation(n)
    pairs = [(int(i), partners[i]) for i in order]
    return [
        PairBatch(tuple(pairs[s:s + batch_size]), batch_size)
        for s in range(0, n, batch_size)
    ]


# persistence: JSON manifest + raw little-endian float32 rows

def save_index(index, manifest_path, assignment=None, extra=None):
    manifest_path = Path(manifest_path)
    emb_path = manifest_path.with_suffix(".f32")
    atomic_write(emb_path, np.ascontiguousarray(index.embeddings, dtype="<f4").tobytes())
    doc = {
        "ids": list(index.ids),
        "embedding_file": emb_path.name,
        "shape": list(index.embeddings.shape),
        "dtype": "float32-le",
    }
    doc.update(extra or {})
    if assignment is not None:
        doc["clusters"] = {
            "k": assignment.k,
            "labels": [int(v) for v in assignment.labels],
            "centroids": assignment.centroids.tolist(),
        }
    atomic_write(manifest_path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_index(manifest_path):
    manifest_path = Path(manifest_path)
    doc = json.loads(manifest_path.read_text())
    n, d = doc["shape"]
    raw = (manifest_path.parent / doc["embedding_file"]).read_bytes()
    if len(raw) != 4 * n * d:
        raise FormatError(f"embedding file holds {len(raw)} bytes, expected {4 * n * d}", len(raw))
    emb = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(n, d)
    index = CorpusIndex(tuple(doc["ids"]), emb)
    assignment = None
    if "clusters" in doc:
        c = doc["clusters"]
        assignment = ClusterAssignment(np.asarray(c["labels"]), np.asarray(c["centroids"]), c["k"])
    return index, assignment
