"""Embedding index, exhaustive cosine search, k-reciprocal re-ranking.

The index is a frozen matrix of L2-normalized retrieval features with
patent labels and image refs aligned row by row.  Search is exact
(brute-force inner products); at desk scale nothing faster is needed.
Re-ranking follows the standard k-reciprocal encoding pipeline: mutual
k1-neighbor sets with half-k1 expansion, exp-weighted membership
vectors, local query expansion over k2 neighbors, Jaccard distance,
and a lambda blend with the original distance.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from patret.augment import AugmentPolicy, apply_policy
from patret.dataset import DatasetManifest, load_image
from patret.model import model_forward
from patret.tensor import Tensor

__all__ = [
    "EmbeddingStore",
    "RetrievalResult",
    "Hit",
    "EmbeddingFormatError",
    "embed_dataset",
    "embed_images",
    "search",
    "k_reciprocal_rerank",
    "save_embeddings",
    "load_embeddings",
]

PEMB_MAGIC = b"PEMB"
PEMB_VERSION = 1


class EmbeddingFormatError(ValueError):
    """Embedding file is malformed or from an incompatible version."""


@dataclass
class EmbeddingStore:
    """Immutable (R, d) matrix of unit rows plus aligned labels and refs."""

    vectors: np.ndarray
    labels: list
    refs: list
    fingerprint: Optional[str] = None

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise ValueError("vectors must be a 2-D (R, d) matrix")
        if not (len(self.labels) == len(self.refs) == self.vectors.shape[0]):
            raise ValueError("vectors, labels and refs must align row by row")
        norms = np.linalg.norm(self.vectors, axis=1)
        if self.vectors.shape[0] and np.abs(norms - 1.0).max() > 1e-5:
            raise ValueError("every row must be L2-normalized to 1 +- 1e-5")

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class Hit:
    row: int
    patent_id: str
    score: float


@dataclass
class RetrievalResult:
    query_ref: str
    hits: list


def embed_images(params, drawings, policy: AugmentPolicy, batch_size: int = 64) -> np.ndarray:
    """Eval-mode features for a list of drawings, L2-normalized rows."""
    rows = []
    for start in range(0, len(drawings), batch_size):
        chunk = drawings[start : start + batch_size]
        batch = np.stack(
            [apply_policy(d, policy, train=False).data for d in chunk]
        )
        feat, _ = model_forward(params, Tensor(batch), "eval")
        rows.append(feat.data)
    feats = np.concatenate(rows, axis=0)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    bad = np.where(norms[:, 0] == 0)[0]
    if bad.size:
        raise ValueError(f"zero-norm feature for input row(s) {bad.tolist()}")
    return (feats / norms).astype(np.float32)


def embed_dataset(
    checkpoint,
    manifest: DatasetManifest,
    split: str,
    batch_size: int = 64,
) -> EmbeddingStore:
    """Embed every manifest entry of one split, in manifest order.

    ``checkpoint`` is a path to a saved model or an already loaded
    bundle from ``train.load_checkpoint``.
    """
    from patret.train import CheckpointBundle, load_checkpoint

    if not isinstance(checkpoint, CheckpointBundle):
        checkpoint = load_checkpoint(checkpoint)
    entries = manifest.split_entries(split)
    if not entries:
        raise ValueError(f"split {split!r} has no entries")
    policy = AugmentPolicy(
        crop_size=checkpoint.eval_size,
        translate_max=0,
        hflip_prob=0.0,
        pad_value=checkpoint.pad_value,
        eval_size=checkpoint.eval_size,
    )
    drawings = [load_image(manifest, e) for e in entries]
    vectors = embed_images(checkpoint.params, drawings, policy, batch_size)
    return EmbeddingStore(
        vectors=vectors,
        labels=[e.patent_id for e in entries],
        refs=[e.image_path for e in entries],
        fingerprint=checkpoint.fingerprint,
    )


def search(store: EmbeddingStore, query_vector, k: int, query_ref: str = "") -> RetrievalResult:
    """Top-k rows by cosine; ties go to the lower row index."""
    if store.size == 0:
        raise ValueError("empty store")
    if not 1 <= k <= store.size:
        raise ValueError(f"k must be in [1, {store.size}], got {k}")
    q = np.asarray(query_vector, dtype=np.float32).reshape(-1)
    if q.shape[0] != store.dim:
        raise ValueError(f"query dim {q.shape[0]} != store dim {store.dim}")
    norm = float(np.linalg.norm(q))
    if norm == 0.0:
        raise ValueError("zero query vector")
    q = q / norm
    scores = store.vectors @ q
    order = np.argsort(-scores, kind="stable")[:k]
    hits = [Hit(int(i), store.labels[i], float(scores[i])) for i in order]
    return RetrievalResult(query_ref=query_ref, hits=hits)


# ---------------------------------------------------------------------------
# k-reciprocal re-ranking


def _rerank_matrix(feat: np.ndarray, k1: int, k2: int, lam: float) -> np.ndarray:
    """Re-ranked distances over one point set (every point is both a
    query and a gallery item)."""
    m = feat.shape[0]
    feat = feat.astype(np.float64)
    original_dist = np.maximum(2.0 - 2.0 * (feat @ feat.T), 0.0)
    # a point's distance to itself is identically zero; computing it in
    # float would leave ~1e-8 noise that can unseat self from rank one
    np.fill_diagonal(original_dist, 0.0)
    col_max = np.maximum(original_dist.max(axis=0), 1e-12)
    original_dist = (original_dist / col_max).T
    v = np.zeros((m, m), dtype=np.float64)
    initial_rank = np.argsort(original_dist, axis=1, kind="stable")

    half = int(round(k1 / 2.0))
    for i in range(m):
        forward = initial_rank[i, : k1 + 1]
        backward = initial_rank[forward, : k1 + 1]
        reciprocal = forward[np.where(backward == i)[0]]
        expansion = reciprocal
        for j in reciprocal:
            cand_forward = initial_rank[j, : half + 1]
            cand_backward = initial_rank[cand_forward, : half + 1]
            cand_reciprocal = cand_forward[np.where(cand_backward == j)[0]]
            if len(np.intersect1d(cand_reciprocal, reciprocal)) > (
                2.0 / 3.0
            ) * len(cand_reciprocal):
                expansion = np.append(expansion, cand_reciprocal)
        expansion = np.unique(expansion)
        weight = np.exp(-original_dist[i, expansion])
        v[i, expansion] = weight / weight.sum()

    if k2 != 1:
        v = np.stack([v[initial_rank[i, :k2]].mean(axis=0) for i in range(m)])

    inverted = [np.where(v[:, j] != 0)[0] for j in range(m)]
    jaccard = np.zeros((m, m), dtype=np.float64)
    for i in range(m):
        temp_min = np.zeros(m, dtype=np.float64)
        nonzero = np.where(v[i] != 0)[0]
        for j in nonzero:
            rows = inverted[j]
            temp_min[rows] += np.minimum(v[i, j], v[rows, j])
        jaccard[i] = 1.0 - temp_min / (2.0 - temp_min)
    return jaccard * (1.0 - lam) + original_dist * lam


def k_reciprocal_rerank(
    store: EmbeddingStore,
    query_vectors: np.ndarray,
    k1: int = 20,
    k2: int = 6,
    lam: float = 0.3,
) -> np.ndarray:
    """Distance matrix (num_queries, R) for the re-ranked ordering
    (ascending).  When ``query_vectors`` is exactly the store's own
    matrix the computation runs over that single set, so the diagonal
    blends a zero Jaccard self-distance; otherwise queries are appended
    to the gallery for the neighborhood analysis and the query-gallery
    block is returned.
    """
    if not k1 > k2 >= 1:
        raise ValueError("need k1 > k2 >= 1")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must be in [0, 1]")
    queries = np.asarray(query_vectors, dtype=np.float32)
    if queries.ndim == 1:
        queries = queries[None, :]
    if queries.shape[1] != store.dim:
        raise ValueError(f"query dim {queries.shape[1]} != store dim {store.dim}")
    if np.array_equal(queries, store.vectors):
        if k1 >= store.size:
            raise ValueError(f"k1 ({k1}) must be smaller than gallery size ({store.size})")
        return _rerank_matrix(store.vectors, k1, k2, lam)
    norms = np.linalg.norm(queries, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("zero query vector")
    union = np.concatenate([queries / norms, store.vectors], axis=0)
    if k1 >= union.shape[0]:
        raise ValueError(
            f"k1 ({k1}) must be smaller than query+gallery size ({union.shape[0]})"
        )
    full = _rerank_matrix(union, k1, k2, lam)
    return full[: queries.shape[0], queries.shape[0] :]


# ---------------------------------------------------------------------------
# "PEMB" interchange format


def save_embeddings(store: EmbeddingStore, path) -> Path:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(PEMB_MAGIC)
        f.write(struct.pack("<III", PEMB_VERSION, store.size, store.dim))
        f.write(np.ascontiguousarray(store.vectors, dtype="<f4").tobytes())
        for pid, ref in zip(store.labels, store.refs):
            f.write(
                json.dumps({"patent_id": pid, "image_path": ref}).encode() + b"\n"
            )
    return path


def load_embeddings(path) -> EmbeddingStore:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != PEMB_MAGIC:
        raise EmbeddingFormatError(f"{path}: not a PEMB embedding file")
    if len(blob) < 16:
        raise EmbeddingFormatError(f"{path}: truncated header")
    version, rows, dim = struct.unpack("<III", blob[4:16])
    if version != PEMB_VERSION:
        raise EmbeddingFormatError(f"{path}: unsupported version {version}")
    payload_end = 16 + rows * dim * 4
    if len(blob) < payload_end:
        raise EmbeddingFormatError(f"{path}: truncated payload")
    vectors = np.frombuffer(blob[16:payload_end], dtype="<f4").reshape(rows, dim)
    labels, refs = [], []
    trailer = blob[payload_end:].decode()
    for lineno, line in enumerate(trailer.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            labels.append(str(obj["patent_id"]))
            refs.append(str(obj["image_path"]))
        except (json.JSONDecodeError, KeyError) as e:
            raise EmbeddingFormatError(f"{path}: bad trailer line {lineno}") from e
    if len(labels) != rows:
        raise EmbeddingFormatError(
            f"{path}: trailer has {len(labels)} rows, header says {rows}"
        )
    return EmbeddingStore(vectors=vectors.copy(), labels=labels, refs=refs)


def checkpoint_fingerprint(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
