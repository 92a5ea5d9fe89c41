"""Identity-removal and distribution metrics, plus the layerwise separation probe."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from . import diffusion as df
from .errors import InvalidArgument
from .idspace import IdentityDataset, cosine_sim, normalize_rows

SRK_EPSILON = 1e-2


def ism(generated_embeddings, centroid) -> float:
    """Mean cosine similarity of generated embeddings to an identity centroid."""
    if len(generated_embeddings) == 0:
        raise InvalidArgument("ism of an empty sample set")
    return float(np.mean([cosine_sim(e, centroid) for e in generated_embeddings]))


def classify_nearest_centroid(embeddings, centroid_labels, centroids) -> np.ndarray:
    """Label of the centroid with the highest cosine similarity; ties go to the first."""
    e = normalize_rows(np.atleast_2d(embeddings))
    c = normalize_rows(np.asarray(centroids, dtype=np.float64))
    return np.asarray(centroid_labels)[np.argmax(e @ c.T, axis=1)]


def srk_score(acc_u: float, acc_r: float, epsilon: float = SRK_EPSILON) -> float:
    return acc_r / (acc_u + epsilon)


def srk(predictions, epsilon: float = SRK_EPSILON) -> tuple[float, float, float]:
    """``predictions``: iterable of ``(predicted, true, group)`` with group "forget"/"retain"."""
    hits = {"forget": [], "retain": []}
    for pred, true, group in predictions:
        if group not in hits:
            raise InvalidArgument(f"unknown group {group!r}")
        hits[group].append(pred == true)
    if not hits["forget"] or not hits["retain"]:
        raise InvalidArgument("both forget and retain groups need predictions")
    acc_u = float(np.mean(hits["forget"]))
    acc_r = float(np.mean(hits["retain"]))
    return acc_u, acc_r, srk_score(acc_u, acc_r, epsilon)


def poly3_kernel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a @ b.T / a.shape[1] + 1.0) ** 3


def mmd2_unbiased(X, Y) -> float:
    """Unbiased squared MMD with the cubic polynomial kernel; may dip below zero."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    m, n = len(X), len(Y)
    if m < 2 or n < 2:
        raise InvalidArgument("mmd2_unbiased needs at least two samples per set")
    if X.shape[1] != Y.shape[1]:
        raise InvalidArgument("sample sets differ in dimension")
    kxx = poly3_kernel(X, X)
    kyy = poly3_kernel(Y, Y)
    kxy = poly3_kernel(X, Y)
    xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(xx + yy - 2.0 * kxy.mean())


# --------------------------------------------------------------------------- layer separation


@dataclass
class SeparationProbe:
    """Condition embeddings grouped by identity plus the shared query-probe latents."""

    identities: dict[int, np.ndarray]
    timesteps: tuple[int, ...]
    latents: np.ndarray

    def __post_init__(self):
        if len(self.identities) < 2:
            raise InvalidArgument("separation needs at least two identities")
        for ident, emb in self.identities.items():
            if len(emb) < 2:
                raise InvalidArgument(f"identity {ident} has fewer than two embeddings")


def default_probe(
    dataset: IdentityDataset,
    schedule: df.NoiseSchedule,
    latent_dim: int,
    n_identities: int = 8,
    per_identity: int = 4,
    n_latents: int = 8,
    seed: int = 0,
    exclude=(),
) -> SeparationProbe:
    """Probe built from the first identities with at least two training embeddings."""
    chosen = {}
    for ident in dataset.identities:
        if ident in exclude:
            continue
        emb = dataset.embeddings[
            (dataset.labels == ident) & np.isin(dataset.splits, ("retain-train", "forget-train"))
        ]
        if len(emb) >= 2:
            chosen[ident] = emb[:per_identity]
        if len(chosen) == n_identities:
            break
    T = schedule.T
    timesteps = tuple(sorted({max(1, int(round(0.75 * T))), T}))
    latents = np.random.default_rng(seed).standard_normal((n_latents, latent_dim))
    return SeparationProbe(chosen, timesteps, latents)


def _cos_matrix(x: np.ndarray) -> np.ndarray:
    x = x.reshape(len(x), -1)
    n = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(n == 0):
        raise InvalidArgument("zero activation vector; cosine undefined")
    x = x / n
    return x @ x.T


def _intra_inter(cos: np.ndarray, groups: np.ndarray) -> tuple[float, float]:
    same = groups[:, None] == groups[None, :]
    off = ~np.eye(len(groups), dtype=bool)
    return float(cos[same & off].mean()), float(cos[~same].mean())


@dataclass(frozen=True)
class LayerScore:
    s_kv: float
    s_q: float

    @property
    def combined(self) -> float:
        return self.s_kv + self.s_q


def layer_separation(params: df.DenoiserParams, probe: SeparationProbe) -> dict[str, LayerScore]:
    """Per-block K/V separation (intra minus inter) and Q separation (1 - mean inter).

    K and V separations are computed separately from the block's two-entry key
    and value sequences and averaged. K/V activations depend on the condition
    only, so they are taken from the first probe latent and timestep.
    """
    cfg = params.config
    idents = sorted(probe.identities)
    conds = np.concatenate([probe.identities[i] for i in idents])
    groups = np.concatenate([[i] * len(probe.identities[i]) for i in idents])
    n = len(conds)

    kv_acts: dict = {}
    with torch.no_grad():
        df.forward(params.tensors, cfg, np.repeat(probe.latents[:1], n, 0), probe.timesteps[0],
                   conds, kv_acts)
    s_kv = {}
    for tag in cfg.tags:
        parts = []
        for key in ("k", "v"):
            intra, inter = _intra_inter(_cos_matrix(kv_acts[tag][key].numpy()), groups)
            parts.append(intra - inter)
        s_kv[tag] = float(np.mean(parts))

    inter_q = {tag: [] for tag in cfg.tags}
    for t in probe.timesteps:
        per_latent = {tag: [] for tag in cfg.tags}
        for lat in probe.latents:
            acts: dict = {}
            with torch.no_grad():
                df.forward(params.tensors, cfg, np.repeat(lat[None], n, 0), t, conds, acts)
            for tag in cfg.tags:
                cos = _cos_matrix(acts[tag]["q"].numpy())
                per_latent[tag].append(_intra_inter(cos, groups)[1])
        for tag in cfg.tags:
            inter_q[tag].append(float(np.mean(per_latent[tag])))
    return {tag: LayerScore(s_kv[tag], 1.0 - float(np.mean(inter_q[tag]))) for tag in cfg.tags}


# --------------------------------------------------------------------------- evaluation


@dataclass
class MetricsReport:
    ism_forget: float
    ism_retain: float
    acc_u: float
    acc_r: float
    srk: float
    mmd2_forget: float
    mmd2_retain: float
    layers: dict[str, LayerScore] = field(default_factory=dict)
    srk_epsilon: float = SRK_EPSILON

    def to_dict(self) -> dict:
        return {
            "ism_forget": self.ism_forget,
            "ism_retain": self.ism_retain,
            "acc_u": self.acc_u,
            "acc_r": self.acc_r,
            "srk": self.srk,
            "mmd2_forget": self.mmd2_forget,
            "mmd2_retain": self.mmd2_retain,
            "layers": [
                {"tag": tag, "s_kv": s.s_kv, "s_q": s.s_q} for tag, s in self.layers.items()
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        layers = {x["tag"]: LayerScore(x["s_kv"], x["s_q"]) for x in d.get("layers", [])}
        return cls(
            d["ism_forget"], d["ism_retain"], d["acc_u"], d["acc_r"], d["srk"],
            d["mmd2_forget"], d["mmd2_retain"], layers,
        )


def _cycle(rows: np.ndarray, n: int) -> np.ndarray:
    return rows[np.arange(n) % len(rows)]


def generate_embeddings(params, world, schedule, conds, guidance_scale, seed) -> np.ndarray:
    z = df.sample(params, conds, schedule, guidance_scale, seed)
    return df.recognize(world, df.decode(world, z))


def evaluate(
    params: df.DenoiserParams,
    dataset: IdentityDataset,
    world: df.SynthWorld,
    schedule: df.NoiseSchedule,
    forget_identity: int,
    n_samples: int = 25,
    seed: int = 0,
    guidance_scale: float = 1.0,
    max_retain_identities: int | None = None,
    probe: SeparationProbe | None = None,
) -> MetricsReport:
    """Generate from validation conditions and score forgetting and preservation.

    Forget samples are conditioned on the forget identity's validation embeddings,
    retain samples on each retain identity's validation embeddings (``n_samples``
    per identity, cycling through the available embeddings).
    """
    if n_samples < 1:
        raise InvalidArgument("n_samples must be >= 1")
    if dataset.forget_identity != forget_identity:
        dataset = dataset.with_forget(forget_identity)
    forget_val = dataset.select("forget-val")
    if len(forget_val) == 0:
        raise InvalidArgument("forget identity has no validation samples")
    retain_ids = [i for i in dataset.identities if len(dataset.select("retain-val", i)) > 0]
    if max_retain_identities is not None:
        retain_ids = retain_ids[:max_retain_identities]
    if not retain_ids:
        raise InvalidArgument("no retain identity has validation samples")

    conds = [_cycle(forget_val, n_samples)]
    owners = [forget_identity] * n_samples
    for ident in retain_ids:
        conds.append(_cycle(dataset.select("retain-val", ident), n_samples))
        owners += [ident] * n_samples
    owners = np.array(owners)
    gen = generate_embeddings(params, world, schedule, np.concatenate(conds), guidance_scale, seed)

    labels, cents = dataset.centroid_matrix()
    cents_n = normalize_rows(cents)
    sims = gen @ cents_n.T
    pos = {int(l): i for i, l in enumerate(labels)}
    own_sim = sims[np.arange(len(gen)), [pos[int(o)] for o in owners]]
    pred = labels[np.argmax(sims, axis=1)]

    is_f = owners == forget_identity
    ism_f = float(own_sim[is_f].mean())
    ism_r = float(np.mean([own_sim[owners == i].mean() for i in retain_ids]))
    groups = np.where(is_f, "forget", "retain")
    acc_u, acc_r, score = srk(zip(pred, owners, groups))

    reference = dataset.select("retain-val")
    layers = layer_separation(params, probe) if probe is not None else {}
    return MetricsReport(
        ism_forget=ism_f,
        ism_retain=ism_r,
        acc_u=acc_u,
        acc_r=acc_r,
        srk=score,
        mmd2_forget=mmd2_unbiased(gen[is_f], reference),
        mmd2_retain=mmd2_unbiased(gen[~is_f], reference),
        layers=layers,
    )
