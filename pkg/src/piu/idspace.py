"""Synthetic identity-embedding space.

Identities live on the unit sphere in ``R^d``. Each identity owns a handful of
noisy samples; centroids are plain means of those samples and are never
renormalized. Anchor selection and forget-condition mixing both work on these
raw vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.cluster import DBSCAN

from .errors import InvalidArgument, NoAnchorFound

SPLITS = ("forget-train", "forget-val", "retain-train", "retain-val")

FORGET_VAL_FRAC = 0.35
RETAIN_VAL_FRAC = 0.10


def centroid(samples) -> np.ndarray:
    """Component-wise mean of ``samples`` (not renormalized)."""
    if len(samples) == 0:
        raise InvalidArgument("centroid of an empty set")
    try:
        arr = np.asarray(samples, dtype=np.float64)
    except ValueError as exc:
        raise InvalidArgument(f"samples have mismatched dimensions: {exc}") from None
    if arr.ndim != 2:
        raise InvalidArgument("samples have mismatched dimensions")
    return arr.mean(axis=0)


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise InvalidArgument(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise InvalidArgument("cosine similarity of a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise InvalidArgument("cannot normalize a zero vector")
    return x / norms


def _assign_splits(labels, forget_identity, forget_val_frac, retain_val_frac):
    """The last ``n_val`` samples of each identity (in dataset order) go to validation."""
    splits = np.empty(len(labels), dtype=object)
    for ident in np.unique(labels):
        idx = np.flatnonzero(labels == ident)
        is_forget = forget_identity is not None and ident == forget_identity
        frac = forget_val_frac if is_forget else retain_val_frac
        n = len(idx)
        n_val = max(1, int(round(frac * n))) if n >= 2 else 0
        n_val = min(n_val, n - 1) if n >= 2 else 0
        role = "forget" if is_forget else "retain"
        splits[idx[: n - n_val]] = f"{role}-train"
        splits[idx[n - n_val :]] = f"{role}-val"
    return splits


@dataclass
class IdentityDataset:
    """Embeddings with identity labels, split roles and per-identity centroids.

    ``splits`` holds one of :data:`SPLITS` per sample. The identity whose samples
    carry ``forget-*`` roles is exposed as ``forget_identity``.
    """

    embeddings: np.ndarray
    labels: np.ndarray
    splits: np.ndarray
    forget_val_frac: float = FORGET_VAL_FRAC
    retain_val_frac: float = RETAIN_VAL_FRAC
    centroids: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = np.asarray(self.splits, dtype=object)
        if self.embeddings.ndim != 2 or len(self.embeddings) != len(self.labels):
            raise InvalidArgument("embeddings must be (n, d) with one label per row")
        if len(self.splits) != len(self.labels):
            raise InvalidArgument("one split per sample required")
        bad = set(self.splits.tolist()) - set(SPLITS)
        if bad:
            raise InvalidArgument(f"unknown split names {sorted(bad)}")
        self.centroids = {
            int(i): self.embeddings[self.labels == i].mean(axis=0) for i in np.unique(self.labels)
        }

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def identities(self) -> list[int]:
        return sorted(self.centroids)

    @property
    def forget_identity(self) -> int | None:
        mask = np.isin(self.splits, ("forget-train", "forget-val"))
        found = np.unique(self.labels[mask])
        return int(found[0]) if len(found) == 1 else None

    def with_forget(self, forget_identity: int) -> "IdentityDataset":
        """Re-split so that ``forget_identity`` uses the forget ratio."""
        if forget_identity not in self.centroids:
            raise InvalidArgument(f"unknown identity {forget_identity}")
        splits = _assign_splits(
            self.labels, forget_identity, self.forget_val_frac, self.retain_val_frac
        )
        return IdentityDataset(
            self.embeddings, self.labels, splits, self.forget_val_frac, self.retain_val_frac
        )

    def select(self, split: str, identity: int | None = None) -> np.ndarray:
        if split not in SPLITS:
            raise InvalidArgument(f"unknown split {split!r}")
        mask = self.splits == split
        if identity is not None:
            mask &= self.labels == identity
        return self.embeddings[mask]

    def labels_of(self, split: str) -> np.ndarray:
        return self.labels[self.splits == split]

    def of_identity(self, identity: int) -> np.ndarray:
        return self.embeddings[self.labels == identity]

    def centroid_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        ids = np.array(self.identities, dtype=np.int64)
        return ids, np.stack([self.centroids[i] for i in ids])


def generate_identities(
    num_identities: int,
    samples_per_identity: int,
    spread: float,
    dim: int,
    seed: int,
    forget_identity: int = 0,
    forget_val_frac: float = FORGET_VAL_FRAC,
    retain_val_frac: float = RETAIN_VAL_FRAC,
) -> IdentityDataset:
    if num_identities < 2:
        raise InvalidArgument("num_identities must be >= 2")
    if samples_per_identity < 1:
        raise InvalidArgument("samples_per_identity must be >= 1")
    if spread < 0:
        raise InvalidArgument("spread must be >= 0")
    if dim < 2:
        raise InvalidArgument("dim must be >= 2")
    rng = np.random.default_rng(seed)
    centers = normalize_rows(rng.standard_normal((num_identities, dim)))
    noise = rng.standard_normal((num_identities, samples_per_identity, dim))
    if spread == 0:
        samples = np.repeat(centers[:, None, :], samples_per_identity, axis=1)
    else:
        samples = normalize_rows(centers[:, None, :] + spread * noise)
    embeddings = samples.reshape(-1, dim)
    labels = np.repeat(np.arange(num_identities), samples_per_identity)
    splits = _assign_splits(labels, forget_identity, forget_val_frac, retain_val_frac)
    return IdentityDataset(embeddings, labels, splits, forget_val_frac, retain_val_frac)


def cluster_identities(embeddings, eps: float = 0.35, min_cluster_size: int = 2) -> np.ndarray:
    """DBSCAN under cosine distance ``1 - cos``; noise is labelled -1."""
    if len(embeddings) == 0:
        raise InvalidArgument("cannot cluster an empty set")
    if not 0 < eps < 2:
        raise InvalidArgument("eps must lie in (0, 2)")
    if min_cluster_size < 1:
        raise InvalidArgument("min_cluster_size must be >= 1")
    x = normalize_rows(np.asarray(embeddings, dtype=np.float64))
    dist = np.clip(1.0 - x @ x.T, 0.0, 2.0)
    model = DBSCAN(eps=eps, min_samples=min_cluster_size, metric="precomputed")
    return model.fit_predict(dist).astype(np.int64)


def relabel_by_clustering(dataset: IdentityDataset, eps=0.35, min_cluster_size=2):
    """Replace generator labels by DBSCAN clusters; noise samples are dropped."""
    labels = cluster_identities(dataset.embeddings, eps, min_cluster_size)
    keep = labels >= 0
    if len(np.unique(labels[keep])) < 2:
        raise InvalidArgument("clustering produced fewer than two identities")
    splits = _assign_splits(labels[keep], None, dataset.forget_val_frac, dataset.retain_val_frac)
    return IdentityDataset(
        dataset.embeddings[keep], labels[keep], splits,
        dataset.forget_val_frac, dataset.retain_val_frac,
    )


@dataclass(frozen=True)
class AnchorQuery:
    forget_identity: int
    tau: float = 0.2
    tolerance: float = 1e-2
    rng_seed: int = 0

    def __post_init__(self):
        if not self.tolerance > 0:
            raise InvalidArgument("tolerance must be > 0")
        if not -1 < self.tau < 1:
            raise InvalidArgument("tau must lie in (-1, 1)")


def anchor_similarities(dataset: IdentityDataset, forget_identity: int) -> dict[int, float]:
    """Cosine similarity of every other centroid to the forget centroid."""
    if forget_identity not in dataset.centroids:
        raise InvalidArgument(f"unknown identity {forget_identity}")
    mu_f = dataset.centroids[forget_identity]
    return {
        j: cosine_sim(mu_f, mu) for j, mu in sorted(dataset.centroids.items()) if j != forget_identity
    }


def anchor_candidates(dataset: IdentityDataset, query: AnchorQuery) -> list[int]:
    sims = anchor_similarities(dataset, query.forget_identity)
    return [j for j, s in sims.items() if abs(s - query.tau) < query.tolerance]


def select_anchor(dataset: IdentityDataset, query: AnchorQuery) -> int:
    sims = anchor_similarities(dataset, query.forget_identity)
    if not sims:
        raise InvalidArgument("need at least one identity besides the forget identity")
    candidates = [j for j, s in sims.items() if abs(s - query.tau) < query.tolerance]
    if not candidates:
        nearest = min(sims, key=lambda j: abs(sims[j] - query.tau))
        raise NoAnchorFound(query.tau, query.tolerance, abs(sims[nearest] - query.tau), nearest)
    rng = np.random.default_rng(query.rng_seed)
    return candidates[int(rng.integers(len(candidates)))]


@dataclass(frozen=True)
class MixSpec:
    K: int = 3
    alpha: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise InvalidArgument("K must be >= 1")
        if not self.alpha > 0:
            raise InvalidArgument("alpha must be > 0")


def draw_mixture(sources, K: int, alpha: float, rng: np.random.Generator):
    """Pick ``K`` sources without replacement and Dirichlet weights for them.

    Returns ``(indices, weights, mixed)``.
    """
    sources = np.asarray(sources, dtype=np.float64)
    if K > len(sources):
        raise InvalidArgument(f"K={K} exceeds the {len(sources)} available sources")
    idx = rng.choice(len(sources), size=K, replace=False)
    w = rng.dirichlet(np.full(K, alpha)) if K > 1 else np.ones(1)
    return idx, w, w @ sources[idx]


def mix_forget_conditions(sources, spec: MixSpec, rng: np.random.Generator | None = None):
    """Convex combination of ``spec.K`` forget embeddings; the result is not renormalized."""
    if rng is None:
        rng = np.random.default_rng(spec.rng_seed)
    return draw_mixture(sources, spec.K, spec.alpha, rng)[2]


HEADER = "piu-idset v1 dim={dim}"


def save_dataset(dataset: IdentityDataset, path) -> None:
    lines = [HEADER.format(dim=dataset.dim)]
    for emb, label, split in zip(dataset.embeddings, dataset.labels, dataset.splits):
        lines.append(f"{int(label)} {split} " + " ".join(f"{v:.17g}" for v in emb))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> IdentityDataset:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("piu-idset v1 dim="):
        raise InvalidArgument(f"{path}: missing piu-idset v1 header")
    dim = int(text[0].split("dim=", 1)[1])
    embs, labels, splits = [], [], []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != dim + 2:
            raise InvalidArgument(f"{path}:{lineno}: expected {dim + 2} fields, got {len(parts)}")
        labels.append(int(parts[0]))
        splits.append(parts[1])
        embs.append([float(v) for v in parts[2:]])
    return IdentityDataset(np.array(embs).reshape(-1, dim), np.array(labels), np.array(splits, dtype=object))
