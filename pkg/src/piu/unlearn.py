"""Anchor-guided identity unlearning.

A trainable copy of the frozen denoiser is pulled, under the forget condition,
toward a target built from the frozen model's anchor and forget predictions,
while retain conditions are held to the frozen model's outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from . import diffusion as df
from . import metrics
from .errors import InvalidArgument, TrainingDiverged
from .idspace import AnchorQuery, IdentityDataset, draw_mixture, select_anchor

LATENT_SOURCES = ("gaussian", "real")


@dataclass(frozen=True)
class UnlearnConfig:
    lambda_preserve: float = 10.0
    eta: float = 1.5
    tau: float = 0.2
    anchor_tolerance: float = 1e-2
    steps: int = 300
    lr: float = 1e-4
    batch_forget: int = 32
    batch_retain: int = 32
    dirichlet_alpha: float = 1.0
    mix_K: int = 3
    surgical: bool = True
    surgical_top_k: int = 3
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    latent_source: str = "gaussian"

    def __post_init__(self):
        if self.steps < 0:
            raise InvalidArgument("steps must be >= 0")
        for name in ("batch_forget", "batch_retain", "mix_K", "surgical_top_k"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be >= 1")
        if self.lambda_preserve < 0 or self.eta < 0:
            raise InvalidArgument("lambda_preserve and eta must be >= 0")
        if self.dirichlet_alpha <= 0 or self.lr <= 0:
            raise InvalidArgument("dirichlet_alpha and lr must be > 0")
        if self.latent_source not in LATENT_SOURCES:
            raise InvalidArgument(f"latent_source must be one of {LATENT_SOURCES}")


# --------------------------------------------------------------------------- masks


@dataclass(frozen=True)
class SurgicalMask:
    """Trainable ``(prefix, name)`` pairs, e.g. ``("L2", "W_k")`` or ``("out", "W")``."""

    entries: frozenset

    @property
    def names(self) -> list[str]:
        return sorted(f"{a}.{b}" for a, b in self.entries)

    def contains(self, name: str) -> bool:
        return tuple(name.split(".", 1)) in self.entries

    def trainable_count(self, params: df.DenoiserParams) -> int:
        return sum(v.numel() for k, v in params.tensors.items() if self.contains(k))

    def trainable_fraction(self, params: df.DenoiserParams) -> float:
        return self.trainable_count(params) / params.num_params()


SURGICAL_KEYS = ("W_q", "W_k", "W_v", "W_o", "ff1", "ff1_b", "ff2", "ff2_b")


def full_mask(params: df.DenoiserParams) -> SurgicalMask:
    return SurgicalMask(frozenset(tuple(k.split(".", 1)) for k in params.tensors))


def block_mask(tags) -> SurgicalMask:
    return SurgicalMask(frozenset((tag, key) for tag in tags for key in SURGICAL_KEYS))


def rank_blocks(scores: dict) -> list[str]:
    """Blocks by descending ``s_kv + s_q``; ties keep block order."""
    order = list(scores)
    return sorted(order, key=lambda tag: (-scores[tag].combined, order.index(tag)))


def surgical_mask_from_scores(params: df.DenoiserParams, scores: dict, top_k: int) -> SurgicalMask:
    """Attention and feed-forward weights of the ``top_k`` best-separating blocks."""
    if set(scores) != set(params.tags):
        raise InvalidArgument("scores must cover every block")
    if not 1 <= top_k <= len(params.tags):
        raise InvalidArgument("top_k must lie in [1, block count]")
    ordered = [t for t in params.tags if t in scores]
    chosen = rank_blocks({t: scores[t] for t in ordered})[:top_k]
    return block_mask(chosen)


# --------------------------------------------------------------------------- losses


@dataclass
class UnlearnBatch:
    """One batch of noisy latents with their conditions.

    ``anchor`` is set for forget items only. ``z0`` is kept so that identity
    losses on clean observations can be computed.
    """

    zt: np.ndarray
    t: np.ndarray
    cond: np.ndarray
    z0: np.ndarray
    eps: np.ndarray
    anchor: np.ndarray | None = None

    def __len__(self):
        return len(self.zt)


def guided_target(e_a, e_f, eta: float):
    """Anchor prediction pushed away from the forget prediction by ``eta``."""
    return e_a - eta * (e_f - e_a)


def forget_target(frozen: df.DenoiserParams, zt, t, c_f, c_a, eta: float) -> torch.Tensor:
    """:func:`guided_target` on frozen-model predictions, without gradient.

    With ``eta == 0`` the anchor prediction is returned as is (no second pass).
    """
    with torch.no_grad():
        e_a = df.denoise_predict(frozen, zt, t, c_a)
        if eta == 0:
            return e_a
        e_f = df.denoise_predict(frozen, zt, t, c_f)
        return guided_target(e_a, e_f, eta)


def piu_objective(sq_forget, sq_preserve, lambda_preserve: float):
    """Reduce per-item squared errors to ``(forget, preserve, forget + lambda * preserve)``."""
    lf = sq_forget.mean()
    lp = sq_preserve.mean()
    return lf, lp, lf + lambda_preserve * lp


def _sq(pred, target):
    return ((pred - target) ** 2).sum(dim=1)


def piu_losses(
    trainable: df.DenoiserParams,
    frozen: df.DenoiserParams,
    forget_batch: UnlearnBatch,
    retain_batch: UnlearnBatch,
    cfg: UnlearnConfig,
):
    """Differentiable ``(loss_forget, loss_preserve, loss_total)`` w.r.t. ``trainable``."""
    if len(forget_batch) == 0 or len(retain_batch) == 0:
        raise InvalidArgument("forget and retain batches must be non-empty")
    if forget_batch.anchor is None:
        raise InvalidArgument("forget batch needs anchor conditions")
    target_f = forget_target(
        frozen, forget_batch.zt, forget_batch.t, forget_batch.cond, forget_batch.anchor, cfg.eta
    )
    with torch.no_grad():
        target_r = df.denoise_predict(frozen, retain_batch.zt, retain_batch.t, retain_batch.cond)
    pred_f = df.denoise_predict(trainable, forget_batch.zt, forget_batch.t, forget_batch.cond)
    pred_r = df.denoise_predict(trainable, retain_batch.zt, retain_batch.t, retain_batch.cond)
    return piu_objective(_sq(pred_f, target_f), _sq(pred_r, target_r), cfg.lambda_preserve)


# --------------------------------------------------------------------------- batches


@dataclass
class BatchSampler:
    """Draws forget batches (Dirichlet-mixed conditions) and retain batches.

    Forget and retain draws use independent streams spawned from ``seed`` so a
    method that ignores retain data still sees the same forget batches.
    """

    forget_sources: np.ndarray
    retain_sources: np.ndarray
    anchor_condition: np.ndarray
    schedule: df.NoiseSchedule
    latent_dim: int
    mix_K: int
    alpha: float
    seed: int
    latent_source: str = "gaussian"
    world: df.SynthWorld | None = None
    _rngs: tuple = field(init=False, repr=False)

    def __post_init__(self):
        if self.latent_source == "real" and self.world is None:
            raise InvalidArgument("real latents need a SynthWorld")
        if len(self.forget_sources) < self.mix_K:
            raise InvalidArgument(
                f"mix_K={self.mix_K} exceeds {len(self.forget_sources)} forget-train samples"
            )
        f, r = np.random.SeedSequence(self.seed).spawn(2)
        self._rngs = (np.random.default_rng(f), np.random.default_rng(r))

    def _latents(self, cond, rng):
        n = len(cond)
        if self.latent_source == "real":
            z0 = df.real_latents(self.world, cond, rng)
        else:
            z0 = rng.standard_normal((n, self.latent_dim))
        t = rng.integers(1, self.schedule.T + 1, size=n)
        eps = rng.standard_normal((n, self.latent_dim))
        return z0, t, eps

    def forget(self, n: int) -> UnlearnBatch:
        rng = self._rngs[0]
        cond = np.stack(
            [draw_mixture(self.forget_sources, self.mix_K, self.alpha, rng)[2] for _ in range(n)]
        )
        z0, t, eps = self._latents(cond, rng)
        anchor = np.repeat(self.anchor_condition[None], n, axis=0)
        return UnlearnBatch(df.forward_diffuse(z0, t, eps, self.schedule), t, cond, z0, eps, anchor)

    def retain(self, n: int) -> UnlearnBatch:
        rng = self._rngs[1]
        cond = self.retain_sources[rng.integers(len(self.retain_sources), size=n)]
        z0, t, eps = self._latents(cond, rng)
        return UnlearnBatch(df.forward_diffuse(z0, t, eps, self.schedule), t, cond, z0, eps)


def make_sampler(
    frozen, dataset, forget_identity, anchor, schedule, *, mix_K, alpha, seed,
    latent_source="gaussian", world=None,
) -> BatchSampler:
    if dataset.forget_identity != forget_identity:
        dataset = dataset.with_forget(forget_identity)
    return BatchSampler(
        forget_sources=dataset.select("forget-train"),
        retain_sources=dataset.select("retain-train"),
        anchor_condition=dataset.centroids[anchor],
        schedule=schedule,
        latent_dim=frozen.config.latent_dim,
        mix_K=mix_K,
        alpha=alpha,
        seed=seed,
        latent_source=latent_source,
        world=world,
    )


# --------------------------------------------------------------------------- training loop


@dataclass
class StepRecord:
    step: int
    values: dict

    def format(self) -> str:
        return f"step={self.step} " + " ".join(f"{k}={v:.17g}" for k, v in self.values.items())


def format_log(log: list[StepRecord]) -> str:
    return "".join(rec.format() + "\n" for rec in log)


def finetune(
    frozen: df.DenoiserParams,
    mask: SurgicalMask,
    steps: int,
    loss_fn: Callable[[df.DenoiserParams], dict],
    *,
    lr: float,
    betas=(0.9, 0.999),
    adam_eps: float = 1e-8,
    weight_decay: float = 0.0,
    grad_fn: Callable | None = None,
    on_step: Callable[[int, df.DenoiserParams], None] | None = None,
) -> tuple[df.DenoiserParams, list[StepRecord]]:
    """Shared AdamW loop over the masked parameters of a clone of ``frozen``.

    ``loss_fn`` returns an ordered dict of scalars whose last entry is minimized.
    ``grad_fn(trainable, leaves)``, when given, replaces the backward pass: it
    must fill ``.grad`` on ``leaves`` and return the same kind of dict.
    """
    trainable = frozen.clone()
    log: list[StepRecord] = []
    if steps == 0:
        return trainable, log
    leaves = [v for k, v in trainable.tensors.items() if mask.contains(k)]
    if not leaves:
        raise InvalidArgument("mask selects no parameters")
    for p in leaves:
        p.requires_grad_(True)
    opt = df.make_optimizer(leaves, lr, betas, adam_eps, weight_decay)
    try:
        for step in range(1, steps + 1):
            opt.zero_grad(set_to_none=True)
            if grad_fn is None:
                terms = loss_fn(trainable)
                total = list(terms.values())[-1]
                if not torch.isfinite(total):
                    raise TrainingDiverged(step)
                total.backward()
            else:
                terms = grad_fn(trainable, leaves)
            values = {k: float(v.detach()) for k, v in terms.items()}
            if not all(np.isfinite(list(values.values()))):
                raise TrainingDiverged(step)
            opt.step()
            log.append(StepRecord(step, values))
            if on_step is not None:
                on_step(step, trainable)
    finally:
        for p in leaves:
            p.requires_grad_(False)
    return trainable, log


def default_anchor(dataset, forget_identity, tau, tolerance, seed) -> int:
    return select_anchor(dataset, AnchorQuery(forget_identity, tau, tolerance, seed))


def run_unlearning(
    frozen: df.DenoiserParams,
    dataset: IdentityDataset,
    forget_identity: int,
    cfg: UnlearnConfig,
    schedule: df.NoiseSchedule,
    *,
    anchor: int | None = None,
    mask: SurgicalMask | None = None,
    world: df.SynthWorld | None = None,
    probe: metrics.SeparationProbe | None = None,
    on_step=None,
) -> tuple[df.DenoiserParams, list[StepRecord]]:
    """Anchor-guided unlearning of ``forget_identity`` starting from ``frozen``.

    Without an explicit ``mask``, ``cfg.surgical`` picks the ``surgical_top_k``
    best-separating blocks (probe defaults to :func:`metrics.default_probe`);
    otherwise every parameter is trained.
    """
    if dataset.forget_identity != forget_identity:
        dataset = dataset.with_forget(forget_identity)
    if anchor is None:
        anchor = default_anchor(dataset, forget_identity, cfg.tau, cfg.anchor_tolerance, cfg.seed)
    if mask is None:
        if cfg.surgical:
            probe = probe or metrics.default_probe(
                dataset, schedule, frozen.config.latent_dim, exclude=(forget_identity,)
            )
            scores = metrics.layer_separation(frozen, probe)
            mask = surgical_mask_from_scores(frozen, scores, cfg.surgical_top_k)
        else:
            mask = full_mask(frozen)
    sampler = make_sampler(
        frozen, dataset, forget_identity, anchor, schedule,
        mix_K=cfg.mix_K, alpha=cfg.dirichlet_alpha, seed=cfg.seed,
        latent_source=cfg.latent_source, world=world,
    )

    def loss_fn(trainable):
        fb = sampler.forget(cfg.batch_forget)
        rb = sampler.retain(cfg.batch_retain)
        lf, lp, lt = piu_losses(trainable, frozen, fb, rb, cfg)
        return {"loss_forget": lf, "loss_preserve": lp, "loss_total": lt}

    return finetune(
        frozen, mask, cfg.steps, loss_fn, lr=cfg.lr, betas=cfg.betas,
        adam_eps=cfg.adam_eps, weight_decay=cfg.weight_decay, on_step=on_step,
    )
