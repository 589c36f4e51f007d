"""Training-free patch tokenizers.

A vocabulary is a stack of unit vectors in pixel-patch space.  A patch is
mapped to the index of the row with the largest dot product, which for unit
rows is the row of highest cosine similarity.  Ties go to the smallest index,
so an all-zero patch maps to token 0.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LabeledDataset, patchify_batch
from .errors import CapacityError, DimensionError

__all__ = [
    "Vocabulary",
    "build_random_projection",
    "build_random_patches",
    "build_kmeans",
    "build_vocabulary",
    "kmeans",
    "kmeans_plus_plus",
    "sample_patch_positions",
    "tokenize",
    "tokenize_patches",
    "tokenize_image",
    "save_vocabulary",
    "load_vocabulary",
]

KINDS = ("random_projection", "random_patches", "kmeans")


@dataclass
class Vocabulary:
    vectors: np.ndarray  # (V, d) float32, unit rows
    kind: str
    seed: int
    center: bool = False  # subtract each patch's mean before matching
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.kind not in KINDS:
            raise ValueError(f"unknown vocabulary kind {self.kind!r}")

    @property
    def V(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _prepare(x: np.ndarray, center: bool) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x - x.mean(axis=-1, keepdims=True) if center else x


def build_random_projection(V: int, d: int, seed: int = 0) -> Vocabulary:
    """Rows drawn uniformly from ``[-1, 1]^d`` and scaled to unit length."""
    if V < 2:
        raise ValueError("vocabulary needs at least two entries")
    rng = np.random.default_rng(seed)
    vecs = _normalize_rows(rng.uniform(-1.0, 1.0, size=(V, d)))
    return Vocabulary(vecs, "random_projection", seed)


def sample_patch_positions(num_images: int, patches_per_image: int, count: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``count`` distinct (image, grid position) pairs uniformly."""
    total = num_images * patches_per_image
    flat = rng.choice(total, size=count, replace=False)
    return np.divmod(flat, patches_per_image)


def _dataset_patches(dataset: LabeledDataset, image_idx, positions, patch_size: int, size: int | None) -> np.ndarray:
    order = np.argsort(image_idx, kind="stable")
    out = np.empty((len(image_idx), 3 * patch_size * patch_size), dtype=np.float64)
    start = 0
    sorted_img = np.asarray(image_idx)[order]
    while start < len(order):
        stop = start
        while stop < len(order) and sorted_img[stop] == sorted_img[start]:
            stop += 1
        img = dataset.images([int(sorted_img[start])], size=size)
        patches = patchify_batch(img, patch_size)[0]
        sel = order[start:stop]
        out[sel] = patches[np.asarray(positions)[sel]]
        start = stop
    return out


def _grid_size(dataset: LabeledDataset, patch_size: int, size: int | None) -> int:
    img = dataset.images([0], size=size)[0]
    return (img.shape[1] // patch_size) * (img.shape[2] // patch_size)


def build_random_patches(dataset: LabeledDataset, V: int, patch_size: int, seed: int = 0,
                         center: bool = False, size: int | None = None) -> Vocabulary:
    """Sample ``V`` distinct, non-degenerate training patches as the vocabulary."""
    if V < 2:
        raise ValueError("vocabulary needs at least two entries")
    if len(dataset) == 0:
        raise CapacityError("empty dataset")
    n = _grid_size(dataset, patch_size, size)
    total = len(dataset) * n
    if total < V:
        raise CapacityError(f"dataset has {total} patches, vocabulary needs {V}")
    rng = np.random.default_rng(seed)
    flat = rng.permutation(total)
    rows: list[np.ndarray] = []
    seen: set[bytes] = set()
    pos = 0
    while len(rows) < V and pos < total:
        chunk = flat[pos : pos + max(2 * (V - len(rows)), 64)]
        pos += len(chunk)
        img_idx, grid_pos = np.divmod(chunk, n)
        cand = _prepare(_dataset_patches(dataset, img_idx, grid_pos, patch_size, size), center)
        norms = np.linalg.norm(cand, axis=1)
        for vec, nrm in zip(cand, norms):
            if nrm <= 1e-12:
                continue
            unit = (vec / nrm).astype(np.float32)
            key = unit.tobytes()
            if key in seen:
                continue
            seen.add(key)
            rows.append(unit)
            if len(rows) == V:
                break
    if len(rows) < V:
        raise CapacityError(f"only {len(rows)} distinct patches available, vocabulary needs {V}")
    return Vocabulary(np.stack(rows), "random_patches", seed, center)


# ------------------------------------------------------------------ k-means


def _sq_dists(x: np.ndarray, c: np.ndarray, chunk: int = 8192) -> np.ndarray:
    cc = (c * c).sum(axis=1)
    out = np.empty((x.shape[0], c.shape[0]))
    for s in range(0, x.shape[0], chunk):
        xs = x[s : s + chunk]
        d = (xs * xs).sum(axis=1)[:, None] - 2.0 * xs @ c.T + cc[None, :]
        out[s : s + chunk] = np.maximum(d, 0.0)
    return out


def kmeans_plus_plus(x: np.ndarray, k: int, rng) -> np.ndarray:
    """k-means++ seeding: each new centre drawn with probability proportional to D^2."""
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centers[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = min(int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right")), n - 1)
        centers[j] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centers[j : j + 1])[:, 0])
    return centers


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    objective: float
    history: list[float]


def kmeans(x: np.ndarray, k: int, iters: int = 25, tol: float = 1e-4, rng=None, init: np.ndarray | None = None) -> KMeansResult:
    """Lloyd iterations from k-means++ (or ``init``) seeding.

    ``history[t]`` is the within-cluster sum of squares after the t-th
    assignment; it never increases.  Clusters that lose all points are
    re-seeded at the point currently farthest from its centroid.  Stops after
    ``iters`` updates or once the relative improvement drops below ``tol``.
    """
    x = np.asarray(x, dtype=np.float64)
    rng = rng if rng is not None else np.random.default_rng(0)
    if x.shape[0] < k:
        raise CapacityError(f"{x.shape[0]} points cannot form {k} clusters")
    c = kmeans_plus_plus(x, k, rng) if init is None else np.array(init, dtype=np.float64)
    labels = _sq_dists(x, c).argmin(axis=1)
    history = [float(((x - c[labels]) ** 2).sum())]
    for _ in range(iters):
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(c)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        c[nonempty] = sums[nonempty] / counts[nonempty, None]
        cost = ((x - c[labels]) ** 2).sum(axis=1)
        for j in np.flatnonzero(~nonempty):
            far = int(cost.argmax())
            c[j] = x[far]
            cost[far] = 0.0
        labels = _sq_dists(x, c).argmin(axis=1)
        obj = float(((x - c[labels]) ** 2).sum())
        prev = history[-1]
        history.append(obj)
        if prev > 0 and (prev - obj) / prev < tol:
            break
    return KMeansResult(c, labels, history[-1], history)


def build_kmeans(dataset: LabeledDataset, V: int, patch_size: int, sample_budget: int = 200_000,
                 iters: int = 25, seed: int = 0, center: bool = False, size: int | None = None,
                 tol: float = 1e-4) -> Vocabulary:
    """Cluster up to ``sample_budget`` sampled training patches; unit-norm centroids form the vocabulary."""
    if sample_budget < V:
        raise CapacityError(f"sample budget {sample_budget} < vocabulary size {V}")
    if len(dataset) == 0:
        raise CapacityError("empty dataset")
    rng = np.random.default_rng(seed)
    n = _grid_size(dataset, patch_size, size)
    count = min(sample_budget, len(dataset) * n)
    if count < V:
        raise CapacityError(f"dataset has {count} patches, vocabulary needs {V}")
    img_idx, pos = sample_patch_positions(len(dataset), n, count, rng)
    x = _prepare(_dataset_patches(dataset, img_idx, pos, patch_size, size), center)
    res = kmeans(x, V, iters=iters, tol=tol, rng=rng)
    norms = np.linalg.norm(res.centroids, axis=1, keepdims=True)
    if (norms <= 1e-12).any():
        raise CapacityError("a k-means centroid collapsed to the origin")
    vecs = (res.centroids / norms).astype(np.float32)
    if len(np.unique(vecs, axis=0)) < V:
        raise CapacityError("k-means produced duplicate centroids; data has too few distinct patches")
    return Vocabulary(vecs, "kmeans", seed, center, {"objective": res.objective, "iterations": len(res.history) - 1})


def build_vocabulary(kind: str, dataset: LabeledDataset | None, V: int, patch_size: int, seed: int = 0, **kw) -> Vocabulary:
    if kind == "random_projection":
        return build_random_projection(V, 3 * patch_size * patch_size, seed)
    if kind == "random_patches":
        return build_random_patches(dataset, V, patch_size, seed, **kw)
    if kind == "kmeans":
        return build_kmeans(dataset, V, patch_size, seed=seed, **kw)
    raise ValueError(f"unknown tokenizer kind {kind!r}")


# ---------------------------------------------------------------- tokenize


def tokenize_patches(patches: np.ndarray, vocab: Vocabulary) -> np.ndarray:
    """Token per patch for an array ``(..., d)``; smallest index wins ties."""
    patches = np.asarray(patches)
    if patches.shape[-1] != vocab.d:
        raise DimensionError(f"patch dimension {patches.shape[-1]} != vocabulary dimension {vocab.d}")
    flat = _prepare(patches.reshape(-1, vocab.d), vocab.center)
    scores = flat @ vocab.vectors.T.astype(np.float64)
    return scores.argmax(axis=1).reshape(patches.shape[:-1])


def tokenize(patch, vocab: Vocabulary) -> int:
    patch = np.asarray(patch)
    if patch.ndim != 1:
        raise DimensionError(f"tokenize expects a single patch vector, got shape {patch.shape}")
    return int(tokenize_patches(patch[None], vocab)[0])


def tokenize_image(image: np.ndarray, vocab: Vocabulary, patch_size: int) -> np.ndarray:
    return tokenize_patches(patchify_batch(image[None], patch_size)[0], vocab)


# -------------------------------------------------------------------- file IO

_MAGIC = b"PVOC"
_VERSION = 1
# magic, version, kind code, flags (bit 0: center), V, d, seed
_HEADER = struct.Struct("<4sHBBIIq")


def save_vocabulary(vocab: Vocabulary, path) -> Path:
    """Header followed by the row-major little-endian float32 ``V x d`` matrix."""
    path = Path(path)
    header = _HEADER.pack(_MAGIC, _VERSION, KINDS.index(vocab.kind), int(vocab.center), vocab.V, vocab.d, vocab.seed)
    path.write_bytes(header + vocab.vectors.astype("<f4").tobytes())
    return path


def load_vocabulary(path) -> Vocabulary:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated vocabulary header")
    magic, version, kind, flags, V, d, seed = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a vocabulary file")
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported vocabulary version {version}")
    body = raw[_HEADER.size :]
    if len(body) != 4 * V * d:
        raise ValueError(f"{path}: payload holds {len(body)} bytes, expected {4 * V * d}")
    vecs = np.frombuffer(body, dtype="<f4").reshape(V, d).astype(np.float32)
    return Vocabulary(vecs, KINDS[kind], seed, bool(flags & 1))
