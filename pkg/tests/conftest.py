import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from piu import diffusion as df  # noqa: E402
from piu import harness as hz  # noqa: E402
from piu import idspace as ids  # noqa: E402

torch.set_num_threads(1)

TINY_MODEL = df.DenoiserConfig(
    cond_dim=4, n_tokens=3, token_width=2, width=4, attn_width=4, ff_width=4, n_blocks=2
)


@pytest.fixture
def tiny_model():
    return TINY_MODEL


@pytest.fixture
def tiny_params():
    return df.init_params(TINY_MODEL, seed=3)


@pytest.fixture
def tiny_world():
    return df.make_world(id_dim=4, obs_dim=5, style_dim=1, latent_dim=6, seed=2)


@pytest.fixture
def tiny_schedule():
    return df.make_schedule(20, 1e-3, 0.2)


@pytest.fixture
def tiny_dataset():
    # 10 identities in 4 dimensions; spread keeps clusters well apart
    return ids.generate_identities(10, 6, 0.1, 4, seed=5)


def tiny_config(tmp_path, **over) -> hz.ExperimentConfig:
    """Pipeline config small enough to run in a couple of seconds."""
    data = {
        "world": {"num_identities": 12, "samples_per_identity": 6, "spread": 0.1, "id_dim": 6,
                  "obs_dim": 8, "style_dim": 2, "dataset_seed": 0, "world_seed": 1},
        "model": {"n_tokens": 4, "token_width": 2, "width": 8, "attn_width": 8, "ff_width": 8,
                  "n_blocks": 3},
        "schedule": {"T": 20, "beta_min": 1e-3, "beta_max": 0.2},
        "base_training": {"steps": 60, "lr": 3e-3, "batch_size": 16},
        "anchor": {"tau": 0.2, "tolerance": 0.3},
        "piu": {"steps": 5, "batch_forget": 4, "batch_retain": 4},
        "siss": {"steps": 3, "batch_size": 4},
        "wid": {"steps": 3, "batch_size": 4},
        "analysis": {"n_identities": 4, "per_identity": 2, "n_latents": 2},
        "evaluation": {"n_samples": 4, "max_retain_identities": 4},
        "output_dir": str(tmp_path / "run"),
    }
    for key, value in over.items():
        if isinstance(value, dict):
            data.setdefault(key, {}).update(value)
        else:
            data[key] = value
    return hz.config_from_dict(data)


@pytest.fixture(autouse=True)
def _isolated_cache(tmp_path_factory, monkeypatch, request):
    # unit tests get a private cache; the reference fixtures below use a persistent one
    if "reference" not in request.fixturenames:
        monkeypatch.setenv(hz.CACHE_ENV, str(tmp_path_factory.mktemp("cache")))


@dataclass
class Reference:
    config: hz.ExperimentConfig
    setting: hz.Setting
    frozen: df.DenoiserParams


def reference_cache_dir(pytestconfig) -> str:
    return os.environ.get(hz.CACHE_ENV) or str(pytestconfig.cache.mkdir("piu-base"))


@pytest.fixture(scope="session")
def reference(pytestconfig):
    """Base model of the reference toy world (64 identities), trained once and cached."""
    cache = reference_cache_dir(pytestconfig)
    old = os.environ.get(hz.CACHE_ENV)
    os.environ[hz.CACHE_ENV] = cache
    try:
        cfg = hz.config_from_dict({})
        setting = hz.build_setting(cfg)
        frozen, _, _ = hz.base_model(cfg, setting)
    finally:
        if old is None:
            os.environ.pop(hz.CACHE_ENV, None)
        else:
            os.environ[hz.CACHE_ENV] = old
    return Reference(cfg, setting, frozen)


def flat_to_tensors(template: df.DenoiserParams, flat) -> dict:
    """Rebuild a parameter dict (same order and shapes) from a flat float64 vector."""
    out, pos = {}, 0
    for name, v in template.tensors.items():
        n = v.numel()
        out[name] = torch.as_tensor(np.asarray(flat[pos : pos + n])).reshape(v.shape).to(df.DTYPE)
        pos += n
    return out


def leaf_grads(leaves: dict) -> np.ndarray:
    """Concatenated ``.grad`` of every leaf; unused leaves count as zero."""
    return np.concatenate([
        (v.grad.numpy() if v.grad is not None else np.zeros(tuple(v.shape))).ravel()
        for v in leaves.values()
    ])


def randomized_params(cfg: df.DenoiserConfig, seed: int) -> df.DenoiserParams:
    """Parameters with every entry (biases included) drawn at random."""
    rng = np.random.default_rng(seed)
    p = df.init_params(cfg, seed)
    for k, v in p.tensors.items():
        p.tensors[k] = torch.tensor(0.5 * rng.standard_normal(tuple(v.shape)), dtype=df.DTYPE)
    return p


def directional_errors(template: df.DenoiserParams, loss_of, n_probes: int, seed: int = 0) -> list:
    """Relative error of autograd vs central differences along random directions.

    ``loss_of(tensors)`` maps a parameter dict to a scalar tensor.
    """
    from oracles import central_difference

    flat = template.flat()
    leaves = flat_to_tensors(template, flat)
    for v in leaves.values():
        v.requires_grad_(True)
    loss_of(leaves).backward()
    grad = leaf_grads(leaves)

    def f(x):
        with torch.no_grad():
            return float(loss_of(flat_to_tensors(template, x)))

    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(n_probes):
        d = rng.standard_normal(flat.shape)
        fd = central_difference(f, flat, d)
        errors.append(abs(fd - grad @ d) / max(abs(fd), 1e-12))
    return errors
