"""Reference unlearning methods: norm-controlled SISS, closed-form UCE editing and WID."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import diffusion as df
from .errors import DegenerateGradient, InvalidArgument, SingularSystem
from .idspace import IdentityDataset, cosine_sim, draw_mixture, normalize_rows
from .unlearn import (
    StepRecord,
    UnlearnBatch,
    _sq,
    default_anchor,
    finetune,
    forget_target,
    full_mask,
    make_sampler,
)

# --------------------------------------------------------------------------- SISS


@dataclass(frozen=True)
class SissConfig:
    beta: float = 0.1
    lr: float = 5e-6
    steps: int = 60
    batch_size: int = 16
    mix_K: int = 3
    dirichlet_alpha: float = 1.0
    weight_decay: float = 0.0
    seed: int = 0
    real_latents: bool = True

    def __post_init__(self):
        if not self.beta > 0:
            raise InvalidArgument("beta must be > 0")
        if self.steps < 0 or self.batch_size < 1:
            raise InvalidArgument("steps must be >= 0 and batch_size >= 1")


def siss_losses(trainable: df.DenoiserParams, retain_batch: UnlearnBatch, forget_batch: UnlearnBatch,
                schedule=None):
    """Noise-prediction MSE on retain and on forget data: ``(L_retain, L_forget)``.

    ``schedule`` is accepted for interface symmetry; the batches already carry ``z_t``.
    """
    if len(retain_batch) == 0 or len(forget_batch) == 0:
        raise InvalidArgument("batches must be non-empty")
    out = []
    for b in (retain_batch, forget_batch):
        pred = df.denoise_predict(trainable, b.zt, b.t, b.cond)
        out.append(_sq(pred, torch.as_tensor(b.eps, dtype=df.DTYPE)).mean())
    return tuple(out)


def siss_update_direction(g_retain, g_forget, beta: float):
    """``g_x - beta * |g_x| / |g_a| * g_a``: the forget part has norm ``beta |g_x|``."""
    lib = torch if isinstance(g_retain, torch.Tensor) else np
    norm = torch.linalg.norm if lib is torch else np.linalg.norm
    na = norm(g_forget)
    if float(na) == 0.0:
        raise DegenerateGradient("forget gradient is zero")
    lam_eff = beta * norm(g_retain) / na
    return g_retain - lam_eff * g_forget


def _flat_grad(loss, leaves):
    grads = torch.autograd.grad(loss, leaves, allow_unused=True)
    return torch.cat([
        (g if g is not None else torch.zeros_like(p)).reshape(-1) for g, p in zip(grads, leaves)
    ])


def run_siss(
    frozen: df.DenoiserParams,
    dataset: IdentityDataset,
    forget_identity: int,
    cfg: SissConfig,
    schedule: df.NoiseSchedule,
    world: df.SynthWorld,
    on_step=None,
):
    """Full-network fine-tuning along the norm-controlled SISS direction.

    Latents are encoded from rendered samples: Dirichlet mixtures of forget-train
    embeddings on the forget side and retain-train embeddings on the retain side.
    """
    if dataset.forget_identity != forget_identity:
        dataset = dataset.with_forget(forget_identity)
    sampler = make_sampler(
        frozen, dataset, forget_identity, forget_identity, schedule,
        mix_K=cfg.mix_K, alpha=cfg.dirichlet_alpha, seed=cfg.seed,
        latent_source="real" if cfg.real_latents else "gaussian", world=world,
    )

    def grad_fn(trainable, leaves):
        rb = sampler.retain(cfg.batch_size)
        fb = sampler.forget(cfg.batch_size)
        l_r, l_f = siss_losses(trainable, rb, fb, schedule)
        g_x = _flat_grad(l_r, leaves)
        g_a = _flat_grad(l_f, leaves)
        direction = siss_update_direction(g_x, g_a, cfg.beta)
        offset = 0
        for p in leaves:
            n = p.numel()
            p.grad = direction[offset : offset + n].reshape(p.shape).clone()
            offset += n
        return {"loss_retain": l_r, "loss_forget": l_f}

    return finetune(
        frozen, full_mask(frozen), cfg.steps, None, lr=cfg.lr,
        weight_decay=cfg.weight_decay, grad_fn=grad_fn, on_step=on_step,
    )


# --------------------------------------------------------------------------- UCE


@dataclass
class UceEditRequest:
    """Weighted least-squares edit of ``W_old`` (out x in, acting as ``W c``).

    ``edit_pairs`` holds ``(c_i, v_i_star)`` with ``v_i_star = W_old c_i_star``.
    """

    W_old: np.ndarray
    edit_pairs: list
    preserve_set: list
    alpha_e: float = 20.0
    alpha_p: float = 1.0
    lambda_reg: float = 0.7


def uce_objective(W, req: UceEditRequest) -> float:
    W_old = np.asarray(req.W_old, dtype=np.float64)
    val = req.lambda_reg * np.sum((W - W_old) ** 2)
    for c, v in req.edit_pairs:
        val += req.alpha_e * np.sum((W @ c - v) ** 2)
    for c in req.preserve_set:
        val += req.alpha_p * np.sum((W @ c - W_old @ c) ** 2)
    return float(val)


def uce_gradient(W, req: UceEditRequest) -> np.ndarray:
    W_old = np.asarray(req.W_old, dtype=np.float64)
    g = 2.0 * req.lambda_reg * (W - W_old)
    for c, v in req.edit_pairs:
        g += 2.0 * req.alpha_e * np.outer(W @ c - v, c)
    for c in req.preserve_set:
        g += 2.0 * req.alpha_p * np.outer((W - W_old) @ c, c)
    return g


def uce_edit(req: UceEditRequest) -> np.ndarray:
    """Closed-form minimizer of the edit + preserve + ridge objective."""
    W_old = np.asarray(req.W_old, dtype=np.float64)
    d_in = W_old.shape[1]
    if req.alpha_e <= 0 or req.alpha_p <= 0 or req.lambda_reg < 0:
        raise InvalidArgument("need alpha_e > 0, alpha_p > 0 and lambda_reg >= 0")
    lhs = req.lambda_reg * W_old.copy()
    normal = req.lambda_reg * np.eye(d_in)
    for c, v in req.edit_pairs:
        c = np.asarray(c, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        if c.shape != (d_in,) or v.shape != (W_old.shape[0],):
            raise InvalidArgument("edit pair dimensions do not match W_old")
        lhs += req.alpha_e * np.outer(v, c)
        normal += req.alpha_e * np.outer(c, c)
    for c in req.preserve_set:
        c = np.asarray(c, dtype=np.float64)
        if c.shape != (d_in,):
            raise InvalidArgument("preserve vector dimension does not match W_old")
        lhs += req.alpha_p * np.outer(W_old @ c, c)
        normal += req.alpha_p * np.outer(c, c)
    if np.linalg.matrix_rank(normal) < d_in:
        raise SingularSystem("normal matrix is singular; use lambda_reg > 0")
    # W normal = lhs, normal symmetric
    return np.linalg.solve(normal, lhs.T).T


@dataclass(frozen=True)
class UceConfig:
    alpha_e: float = 20.0
    alpha_p: float = 1.0
    lambda_reg: float = 0.7
    n_mixtures: int = 16
    mix_K: int = 3
    dirichlet_alpha: float = 1.0
    blocks: str = "all"
    seed: int = 0

    def __post_init__(self):
        if self.blocks not in ("all", "surgical"):
            raise InvalidArgument("blocks must be 'all' or 'surgical'")


def uce_edit_sets(dataset: IdentityDataset, forget_identity: int, cfg: UceConfig):
    """Edit inputs (forget-train embeddings plus mixtures) and normalized retain centroids."""
    forget = dataset.select("forget-train")
    rng = np.random.default_rng(cfg.seed)
    mixes = [
        draw_mixture(forget, min(cfg.mix_K, len(forget)), cfg.dirichlet_alpha, rng)[2]
        for _ in range(cfg.n_mixtures)
    ]
    edit = np.concatenate([forget, np.array(mixes).reshape(-1, dataset.dim)])
    retain_ids = [i for i in dataset.identities if i != forget_identity]
    preserve = normalize_rows(np.stack([dataset.centroids[i] for i in retain_ids]))
    return edit, preserve


def run_uce(
    frozen: df.DenoiserParams,
    dataset: IdentityDataset,
    forget_identity: int,
    cfg: UceConfig,
    *,
    anchor: int | None = None,
    tags=None,
    tau: float = 0.2,
    tolerance: float = 1e-2,
):
    """Edit every block's key and value projections (or only ``tags``) in closed form."""
    if dataset.forget_identity != forget_identity:
        dataset = dataset.with_forget(forget_identity)
    if anchor is None:
        anchor = default_anchor(dataset, forget_identity, tau, tolerance, cfg.seed)
    edit, preserve = uce_edit_sets(dataset, forget_identity, cfg)
    c_star = dataset.centroids[anchor]
    params = frozen.clone()
    log = []
    for tag in tags or params.tags:
        for key in ("W_k", "W_v"):
            name = f"{tag}.{key}"
            W_old = params[name].numpy().T.copy()
            target = W_old @ c_star
            req = UceEditRequest(
                W_old, [(c, target) for c in edit], list(preserve),
                cfg.alpha_e, cfg.alpha_p, cfg.lambda_reg,
            )
            W = uce_edit(req)
            params.tensors[name] = torch.tensor(W.T.copy(), dtype=df.DTYPE)
            log.append(StepRecord(len(log) + 1, {"delta_fro": float(np.linalg.norm(W - W_old))}))
    return params, log


# --------------------------------------------------------------------------- WID


@dataclass(frozen=True)
class WidConfig:
    lambda_id: float = 0.1
    lr: float = 5e-6
    steps: int = 100
    batch_size: int = 32
    mix_K: int = 3
    dirichlet_alpha: float = 1.0
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.lambda_id < 0:
            raise InvalidArgument("lambda_id must be >= 0")


def wid_identity_loss(s_id, s_hat) -> float:
    """``1 - cos(s_id, s_hat)``; equals half the squared distance for unit inputs."""
    return 1.0 - cosine_sim(s_id, s_hat)


def wid_losses(trainable, frozen, forget_batch: UnlearnBatch, world: df.SynthWorld, schedule, lambda_id):
    """``(loss_forget, loss_id, loss_total)``; the id term reaches ``trainable`` through x0."""
    if forget_batch.anchor is None:
        raise InvalidArgument("forget batch needs anchor conditions")
    target = forget_target(frozen, forget_batch.zt, forget_batch.t, forget_batch.cond,
                           forget_batch.anchor, 0.0)
    pred = df.denoise_predict(trainable, forget_batch.zt, forget_batch.t, forget_batch.cond)
    lf = _sq(pred, target).mean()
    zt = torch.as_tensor(forget_batch.zt, dtype=df.DTYPE)
    x0_hat = df.predict_x0(zt, forget_batch.t, pred, schedule)
    s_hat = df.recognize(world, df.decode(world, x0_hat))
    s_id = torch.as_tensor(
        df.recognize(world, df.decode(world, forget_batch.z0)), dtype=df.DTYPE
    )
    l_id = ((s_id - s_hat) ** 2).sum(dim=1).mean()
    return lf, l_id, lf + lambda_id * l_id


def run_wid(
    frozen: df.DenoiserParams,
    dataset: IdentityDataset,
    forget_identity: int,
    cfg: WidConfig,
    schedule: df.NoiseSchedule,
    world: df.SynthWorld,
    *,
    anchor: int | None = None,
    tau: float = 0.2,
    tolerance: float = 1e-2,
    on_step=None,
):
    """Anchor matching (no negative guidance) plus an identity term on reconstructed x0.

    Uses rendered real latents and trains every parameter, drawing the forget
    batches from the same stream as :func:`piu.unlearn.run_unlearning`.
    """
    if dataset.forget_identity != forget_identity:
        dataset = dataset.with_forget(forget_identity)
    if anchor is None:
        anchor = default_anchor(dataset, forget_identity, tau, tolerance, cfg.seed)
    sampler = make_sampler(
        frozen, dataset, forget_identity, anchor, schedule,
        mix_K=cfg.mix_K, alpha=cfg.dirichlet_alpha, seed=cfg.seed,
        latent_source="real", world=world,
    )

    def loss_fn(trainable):
        fb = sampler.forget(cfg.batch_size)
        lf, l_id, lt = wid_losses(trainable, frozen, fb, world, schedule, cfg.lambda_id)
        return {"loss_forget": lf, "loss_id": l_id, "loss_total": lt}

    return finetune(
        frozen, full_mask(frozen), cfg.steps, loss_fn, lr=cfg.lr, betas=cfg.betas,
        adam_eps=cfg.adam_eps, weight_decay=cfg.weight_decay, on_step=on_step,
    )
