"""Desk-scale identity-conditioned latent diffusion.

The denoiser is a stack of tagged attention blocks. Latent vectors are cut into
tokens, every token attends over a two-entry key/value sequence made of the
projected identity condition and a learned null token, and the final hidden
state is flattened and projected back to the latent size. Everything runs in
float64 on the CPU; randomness comes from numpy generators so that runs are
reproducible bit for bit.
"""

from __future__ import annotations

import hashlib
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch

from .errors import DegenerateSchedule, InvalidArgument, TrainingDiverged, Unrecognizable
from .idspace import IdentityDataset

DTYPE = torch.float64


# --------------------------------------------------------------------------- schedule


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule. ``alpha_bar[t - 1]`` belongs to timestep ``t``; t=0 is clean."""

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def ab(self, t):
        """alpha_bar at (integer or array) timestep ``t`` with the virtual alpha_bar_0 = 1."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise InvalidArgument(f"timestep out of range [0, {self.T}]")
        padded = np.concatenate(([1.0], self.alpha_bar))
        return padded[t]

    @property
    def gamma(self) -> np.ndarray:
        return np.sqrt(self.alpha_bar)

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bar)


def make_schedule(T: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    if T < 1:
        raise InvalidArgument("T must be >= 1")
    if not 0 < beta_min <= beta_max < 1:
        raise InvalidArgument("need 0 < beta_min <= beta_max < 1")
    beta = np.linspace(beta_min, beta_max, T)
    return NoiseSchedule(T, beta, np.cumprod(1.0 - beta))


def _coef(values, like):
    values = np.asarray(values, dtype=np.float64)
    if isinstance(like, torch.Tensor):
        values = torch.as_tensor(values, dtype=like.dtype)
    if values.ndim == 1:
        values = values[:, None]
    return values


def forward_diffuse(z0, t, eps, schedule: NoiseSchedule):
    """``sqrt(ab_t) z0 + sqrt(1 - ab_t) eps``; ``z0``/``eps`` may be batched (rows)."""
    if np.shape(z0) != np.shape(eps):
        raise InvalidArgument("eps must match the latent shape")
    ab = schedule.ab(t)
    return _coef(np.sqrt(ab), z0) * z0 + _coef(np.sqrt(1.0 - ab), eps) * eps


def predict_x0(zt, t, eps_hat, schedule: NoiseSchedule):
    """Invert the forward relation for a predicted noise ``eps_hat``."""
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.T):
        raise InvalidArgument(f"timestep out of range [1, {schedule.T}]")
    ab = schedule.ab(t)
    if np.any(ab <= 0):
        raise DegenerateSchedule("alpha_bar is zero; clean latent is unrecoverable")
    return (zt - _coef(np.sqrt(1.0 - ab), eps_hat) * eps_hat) / _coef(np.sqrt(ab), zt)


# --------------------------------------------------------------------------- denoiser


@dataclass(frozen=True)
class DenoiserConfig:
    cond_dim: int = 32
    n_tokens: int = 16
    token_width: int = 8
    width: int = 32
    attn_width: int = 32
    ff_width: int = 64
    n_blocks: int = 4

    @property
    def latent_dim(self) -> int:
        return self.n_tokens * self.token_width

    @property
    def tags(self) -> list[str]:
        return [f"L{i + 1}" for i in range(self.n_blocks)]


BLOCK_KEYS = ("W_q", "W_k", "W_v", "W_o", "null_k", "null_v", "ff1", "ff1_b", "ff2", "ff2_b")


def param_shapes(cfg: DenoiserConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Parameter names and shapes in their fixed storage/flattening order."""
    w, a, f = cfg.width, cfg.attn_width, cfg.ff_width
    shapes = OrderedDict()
    shapes["in.W"] = (cfg.token_width, w)
    shapes["in.b"] = (w,)
    shapes["in.pos"] = (cfg.n_tokens, w)
    shapes["time.W"] = (w, w)
    shapes["time.b"] = (w,)
    shapes["cond.null"] = (cfg.cond_dim,)
    for tag in cfg.tags:
        shapes[f"{tag}.W_q"] = (w, a)
        shapes[f"{tag}.W_k"] = (cfg.cond_dim, a)
        shapes[f"{tag}.W_v"] = (cfg.cond_dim, a)
        shapes[f"{tag}.W_o"] = (a, w)
        shapes[f"{tag}.null_k"] = (a,)
        shapes[f"{tag}.null_v"] = (a,)
        shapes[f"{tag}.ff1"] = (w, f)
        shapes[f"{tag}.ff1_b"] = (f,)
        shapes[f"{tag}.ff2"] = (f, w)
        shapes[f"{tag}.ff2_b"] = (w,)
    shapes["out.W"] = (cfg.n_tokens * w, cfg.latent_dim)
    return shapes


@dataclass
class DenoiserParams:
    """Named float64 tensors plus the architecture they belong to."""

    config: DenoiserConfig
    tensors: "OrderedDict[str, torch.Tensor]" = field(repr=False)

    @property
    def tags(self) -> list[str]:
        return self.config.tags

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def block(self, tag: str) -> dict[str, torch.Tensor]:
        return {k: self.tensors[f"{tag}.{k}"] for k in BLOCK_KEYS}

    def clone(self) -> "DenoiserParams":
        return DenoiserParams(
            self.config, OrderedDict((k, v.detach().clone()) for k, v in self.tensors.items())
        )

    def num_params(self) -> int:
        return sum(v.numel() for v in self.tensors.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([v.detach().numpy().ravel() for v in self.tensors.values()])

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, v in self.tensors.items():
            h.update(name.encode())
            h.update(v.detach().numpy().astype("<f8").tobytes())
        return h.hexdigest()

    def equal(self, other: "DenoiserParams") -> bool:
        return list(self.tensors) == list(other.tensors) and all(
            torch.equal(self.tensors[k], other.tensors[k]) for k in self.tensors
        )


def init_params(cfg: DenoiserConfig, seed: int) -> DenoiserParams:
    rng = np.random.default_rng(seed)
    tensors = OrderedDict()
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1 and not name.startswith("cond.") and "null" not in name:
            value = np.zeros(shape)
        elif len(shape) == 1:
            value = rng.standard_normal(shape) / math.sqrt(shape[0])
        elif name == "in.pos":
            value = rng.standard_normal(shape)
        else:
            value = rng.standard_normal(shape) / math.sqrt(shape[0])
        tensors[name] = torch.tensor(value, dtype=DTYPE)
    return DenoiserParams(cfg, tensors)


def timestep_embedding(t, width: int) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(t, dtype=np.float64).reshape(-1), dtype=DTYPE)
    half = width // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=DTYPE) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if width % 2:
        emb = torch.cat([emb, torch.zeros(len(t), 1, dtype=DTYPE)], dim=1)
    return emb


def _as_batch(x, width, what):
    x = torch.as_tensor(x, dtype=DTYPE) if not isinstance(x, torch.Tensor) else x
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise InvalidArgument(f"{what} must have {width} columns, got shape {tuple(x.shape)}")
    return x


def forward(
    tensors: Mapping[str, torch.Tensor],
    cfg: DenoiserConfig,
    zt,
    t,
    c,
    activations: dict | None = None,
) -> torch.Tensor:
    """Noise prediction for a batch. ``zt``: (n, latent), ``t``: int or (n,), ``c``: (n, d).

    When ``activations`` is a dict it is filled with per-block ``q`` (n, tokens, a),
    ``k`` and ``v`` (n, 2, a) tensors.
    """
    zt = _as_batch(zt, cfg.latent_dim, "latent")
    c = _as_batch(c, cfg.cond_dim, "condition")
    n = zt.shape[0]
    if c.shape[0] == 1 and n > 1:
        c = c.expand(n, -1)
    if c.shape[0] != n:
        raise InvalidArgument("latent and condition batch sizes differ")
    t_arr = np.broadcast_to(np.asarray(t), (n,))
    a = cfg.attn_width

    tok = zt.reshape(n, cfg.n_tokens, cfg.token_width)
    h = tok @ tensors["in.W"] + tensors["in.b"] + tensors["in.pos"]
    temb = timestep_embedding(t_arr, cfg.width) @ tensors["time.W"] + tensors["time.b"]
    h = h + temb[:, None, :]
    for tag in cfg.tags:
        q = h @ tensors[f"{tag}.W_q"]
        k = torch.stack(
            [c @ tensors[f"{tag}.W_k"], tensors[f"{tag}.null_k"].expand(n, a)], dim=1
        )
        v = torch.stack(
            [c @ tensors[f"{tag}.W_v"], tensors[f"{tag}.null_v"].expand(n, a)], dim=1
        )
        att = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(a), dim=-1)
        h = h + (att @ v) @ tensors[f"{tag}.W_o"]
        ff = torch.nn.functional.silu(h @ tensors[f"{tag}.ff1"] + tensors[f"{tag}.ff1_b"])
        h = h + ff @ tensors[f"{tag}.ff2"] + tensors[f"{tag}.ff2_b"]
        if activations is not None:
            activations[tag] = {"q": q, "k": k, "v": v}
    return h.reshape(n, cfg.n_tokens * cfg.width) @ tensors["out.W"]


def denoise_predict(params: DenoiserParams, zt, t, c, activations: dict | None = None):
    if np.any(np.asarray(t) < 1):
        raise InvalidArgument("timestep must be >= 1")
    return forward(params.tensors, params.config, zt, t, c, activations)


# --------------------------------------------------------------------------- sampling


def ancestral_sample(
    eps_fn: Callable[[torch.Tensor, int], torch.Tensor],
    n: int,
    latent_dim: int,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> np.ndarray:
    """DDPM ancestral chain from ``z_T ~ N(0, I)`` with posterior variance noise."""
    z = torch.as_tensor(rng.standard_normal((n, latent_dim)), dtype=DTYPE)
    ab_prev = np.concatenate(([1.0], schedule.alpha_bar[:-1]))
    with torch.no_grad():
        for t in range(schedule.T, 0, -1):
            beta = schedule.beta[t - 1]
            ab = schedule.alpha_bar[t - 1]
            eps = eps_fn(z, t)
            z = (z - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(1.0 - beta)
            if t > 1:
                var = beta * (1.0 - ab_prev[t - 1]) / (1.0 - ab)
                z = z + math.sqrt(var) * torch.as_tensor(
                    rng.standard_normal((n, latent_dim)), dtype=DTYPE
                )
    return z.numpy()


def sample(
    params: DenoiserParams,
    c,
    schedule: NoiseSchedule,
    guidance_scale: float = 1.0,
    seed: int = 0,
) -> np.ndarray:
    """Generate one latent per row of ``c``.

    For ``guidance_scale != 1`` the conditional prediction is blended with the
    prediction under the learned null condition.
    """
    if guidance_scale < 0:
        raise InvalidArgument("guidance_scale must be >= 0")
    cfg = params.config
    c = _as_batch(c, cfg.cond_dim, "condition")
    n = c.shape[0]
    null = params["cond.null"].expand(n, -1)

    def eps_fn(z, t):
        eps_c = forward(params.tensors, cfg, z, t, c)
        if guidance_scale == 1.0:
            return eps_c
        eps_u = forward(params.tensors, cfg, z, t, null)
        return eps_u + guidance_scale * (eps_c - eps_u)

    return ancestral_sample(eps_fn, n, cfg.latent_dim, schedule, np.random.default_rng(seed))


# --------------------------------------------------------------------------- synthetic world


@dataclass(frozen=True)
class SynthWorld:
    """Linear stand-in for the image decoder and the face recognizer.

    ``A`` (D x d) carries identity, ``B`` (D x d_s) carries style and is
    orthogonal to ``A``. ``E`` (latent x D, orthonormal columns) and
    ``latent_scale`` define the encoder used to build training latents.
    """

    A: np.ndarray
    B: np.ndarray
    E: np.ndarray
    latent_scale: float = 8.0
    style_scale: float = 0.25

    @property
    def obs_dim(self) -> int:
        return self.A.shape[0]

    @property
    def id_dim(self) -> int:
        return self.A.shape[1]

    @property
    def style_dim(self) -> int:
        return self.B.shape[1]


def make_world(
    id_dim: int = 32,
    obs_dim: int = 64,
    style_dim: int = 16,
    latent_dim: int = 128,
    seed: int = 0,
    latent_scale: float = 8.0,
    style_scale: float = 0.25,
) -> SynthWorld:
    if id_dim + style_dim > obs_dim:
        raise InvalidArgument("id_dim + style_dim must not exceed obs_dim")
    if latent_dim < obs_dim:
        raise InvalidArgument("latent_dim must be >= obs_dim for an exact decoder")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((obs_dim, id_dim + style_dim)))
    e, _ = np.linalg.qr(rng.standard_normal((latent_dim, obs_dim)))
    return SynthWorld(q[:, :id_dim], q[:, id_dim:], e, latent_scale, style_scale)


def synth_observe(world: SynthWorld, c, style):
    """``x = A c + B style`` for a single vector or a batch of rows."""
    c = np.asarray(c, dtype=np.float64)
    style = np.asarray(style, dtype=np.float64)
    if c.shape[-1] != world.id_dim or style.shape[-1] != world.style_dim:
        raise InvalidArgument("condition/style dimensions do not match the world")
    return c @ world.A.T + style @ world.B.T


def _mat(m, like):
    return torch.as_tensor(m, dtype=like.dtype) if isinstance(like, torch.Tensor) else m


def recognize(world: SynthWorld, x):
    """``normalize(A^T x)``. Accepts numpy or torch input (torch stays differentiable)."""
    if x.shape[-1] != world.obs_dim:
        raise InvalidArgument("observation dimension does not match the world")
    proj = x @ _mat(world.A, x)
    norms = torch.linalg.norm(proj, dim=-1, keepdim=True) if isinstance(
        proj, torch.Tensor
    ) else np.linalg.norm(proj, axis=-1, keepdims=True)
    # A has orthonormal columns, so |A^T x| <= |x|; a ratio at rounding level means A^T x = 0
    xnorm = torch.linalg.norm(x, dim=-1, keepdim=True) if isinstance(
        x, torch.Tensor
    ) else np.linalg.norm(x, axis=-1, keepdims=True)
    if bool((norms <= 1e-12 * xnorm).any()) or bool((norms == 0).any()):
        raise Unrecognizable("observation has no identity component")
    return proj / norms


def encode(world: SynthWorld, x):
    return world.latent_scale * (x @ _mat(world.E.T, x))


def decode(world: SynthWorld, z):
    return (z @ _mat(world.E, z)) / world.latent_scale


def real_latents(world: SynthWorld, c, rng: np.random.Generator) -> np.ndarray:
    """Encode observations of ``c`` rendered with fresh random style."""
    c = np.atleast_2d(c)
    style = world.style_scale * rng.standard_normal((len(c), world.style_dim))
    return encode(world, synth_observe(world, c, style))


# --------------------------------------------------------------------------- base training


@dataclass(frozen=True)
class BaseTrainConfig:
    steps: int = 4000
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 64
    p_uncond: float = 0.1
    seed: int = 0


def make_optimizer(params: list[torch.Tensor], lr, betas, eps, weight_decay):
    return torch.optim.AdamW(
        params, lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay, foreach=False
    )


def eps_mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of per-item squared L2 errors."""
    return ((pred - target) ** 2).sum(dim=1).mean()


@dataclass
class BaseBatch:
    zt: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    cond: np.ndarray
    drop: np.ndarray


def sample_base_batch(dataset, world, schedule, batch_size, p_uncond, rng) -> BaseBatch:
    idx = rng.integers(len(dataset.embeddings), size=batch_size)
    c = dataset.embeddings[idx]
    z0 = real_latents(world, c, rng)
    t = rng.integers(1, schedule.T + 1, size=batch_size)
    eps = rng.standard_normal(z0.shape)
    drop = rng.random(batch_size) < p_uncond
    return BaseBatch(forward_diffuse(z0, t, eps, schedule), t, eps, c, drop)


def base_loss(tensors, cfg: DenoiserConfig, batch: BaseBatch) -> torch.Tensor:
    c = torch.as_tensor(batch.cond, dtype=DTYPE)
    drop = torch.as_tensor(batch.drop)[:, None]
    c = torch.where(drop, tensors["cond.null"].expand_as(c), c)
    pred = forward(tensors, cfg, batch.zt, batch.t, c)
    return eps_mse(pred, torch.as_tensor(batch.eps, dtype=DTYPE))


def train_base(
    dataset: IdentityDataset,
    world: SynthWorld,
    schedule: NoiseSchedule,
    train_cfg: BaseTrainConfig,
    model_cfg: DenoiserConfig | None = None,
    log: list | None = None,
) -> DenoiserParams:
    """Fit the denoiser with the standard noise-prediction objective."""
    if len(dataset.embeddings) == 0:
        raise InvalidArgument("empty dataset")
    model_cfg = model_cfg or DenoiserConfig(cond_dim=dataset.dim)
    if model_cfg.cond_dim != dataset.dim or world.id_dim != dataset.dim:
        raise InvalidArgument("dataset, world and model disagree on the identity dimension")
    if world.E.shape[0] != model_cfg.latent_dim:
        raise InvalidArgument("world latent size does not match the model")
    params = init_params(model_cfg, train_cfg.seed)
    if train_cfg.steps == 0:
        return params
    rng = np.random.default_rng(train_cfg.seed)
    leaves = list(params.tensors.values())
    for p in leaves:
        p.requires_grad_(True)
    opt = make_optimizer(
        leaves, train_cfg.lr, train_cfg.betas, train_cfg.adam_eps, train_cfg.weight_decay
    )
    for step in range(1, train_cfg.steps + 1):
        batch = sample_base_batch(
            dataset, world, schedule, train_cfg.batch_size, train_cfg.p_uncond, rng
        )
        loss = base_loss(params.tensors, model_cfg, batch)
        if not torch.isfinite(loss):
            raise TrainingDiverged(step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if log is not None:
            log.append(float(loss.detach()))
    for p in leaves:
        p.requires_grad_(False)
    return params


# --------------------------------------------------------------------------- checkpoints

MAGIC = b"PIUCKPT1"


def save_checkpoint(params: DenoiserParams, path) -> None:
    """Little-endian: magic, block count, matrix manifest, then row-major float64 data."""
    out = bytearray(MAGIC)
    out += struct.pack("<II", params.config.n_blocks, len(params.tensors))
    for name, v in params.tensors.items():
        rows, cols = (1, v.shape[0]) if v.ndim == 1 else tuple(v.shape)
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw + struct.pack("<II", rows, cols)
    for v in params.tensors.values():
        out += v.detach().numpy().astype("<f8").tobytes(order="C")
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> DenoiserParams:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise InvalidArgument(f"{path}: not a PIUCKPT1 checkpoint")
    pos = 8
    n_blocks, n_mats = struct.unpack_from("<II", data, pos)
    pos += 8
    manifest = []
    for _ in range(n_mats):
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + ln].decode()
        pos += ln
        rows, cols = struct.unpack_from("<II", data, pos)
        pos += 8
        manifest.append((name, rows, cols))
    raw = {}
    for name, rows, cols in manifest:
        count = rows * cols
        raw[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(rows, cols)
        pos += 8 * count
    if pos != len(data):
        raise InvalidArgument(f"{path}: trailing or missing data")
    cfg = DenoiserConfig(
        cond_dim=raw["L1.W_k"].shape[0],
        n_tokens=raw["in.pos"].shape[0],
        token_width=raw["in.W"].shape[0],
        width=raw["in.W"].shape[1],
        attn_width=raw["L1.W_q"].shape[1],
        ff_width=raw["L1.ff1"].shape[1],
        n_blocks=n_blocks,
    )
    shapes = param_shapes(cfg)
    if list(shapes) != [m[0] for m in manifest]:
        raise InvalidArgument(f"{path}: manifest does not match the denoiser layout")
    tensors = OrderedDict(
        (k, torch.tensor(raw[k].reshape(shapes[k]).astype(np.float64), dtype=DTYPE))
        for k in shapes
    )
    return DenoiserParams(cfg, tensors)


def config_dict(obj) -> dict:
    return asdict(obj)
