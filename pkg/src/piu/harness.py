"""Config-driven experiment pipeline: base model, layer analysis, anchor, unlearning, evaluation."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines as bl
from . import diffusion as df
from . import idspace as ids
from . import metrics as mt
from . import unlearn as ul
from .errors import ConfigError, NoAnchorFound, PiuError

log = logging.getLogger(__name__)

METHODS = ("piu", "naive", "siss", "uce", "wid")
SWEEP_PARAMS = {
    "lambda_preserve": ("piu", "lambda_preserve"),
    "eta": ("piu", "eta"),
    "tau": ("anchor", "tau"),
    "surgical_top_k": ("piu", "surgical_top_k"),
    "method": ("method",),
}
CACHE_ENV = "PIU_CACHE_DIR"

# ``None`` marks optional integers (resolved at run time when left unset).
DEFAULTS: dict = {
    "seed": 0,
    "world": {
        "num_identities": 64,
        "samples_per_identity": 12,
        "spread": 0.12,
        "id_dim": 32,
        "obs_dim": 64,
        "style_dim": 16,
        "latent_scale": 8.0,
        "style_scale": 0.25,
        "dataset_seed": 0,
        "world_seed": 1,
    },
    "model": {
        "n_tokens": 16,
        "token_width": 8,
        "width": 32,
        "attn_width": 32,
        "ff_width": 64,
        "n_blocks": 4,
    },
    "schedule": {"T": 100, "beta_min": 1e-3, "beta_max": 0.2},
    "base_training": {
        "steps": 3000,
        "lr": 2e-3,
        "batch_size": 64,
        "p_uncond": 0.1,
        "weight_decay": 0.01,
        "seed": 0,
    },
    "forget_identity": None,
    "anchor": {"tau": 0.2, "tolerance": 1e-2},
    "method": "piu",
    "piu": {
        "lambda_preserve": 10.0,
        "eta": 1.5,
        "steps": 300,
        "lr": 1e-4,
        "batch_forget": 32,
        "batch_retain": 32,
        "dirichlet_alpha": 1.0,
        "mix_K": 3,
        "surgical": True,
        "surgical_top_k": 3,
        "weight_decay": 0.01,
        "latent_source": "gaussian",
    },
    "siss": {"beta": 0.1, "lr": 5e-6, "steps": 60, "batch_size": 16, "weight_decay": 0.0},
    "uce": {"alpha_e": 20.0, "alpha_p": 1.0, "lambda_reg": 0.7, "n_mixtures": 16, "blocks": "all"},
    "wid": {"lambda_id": 0.1, "lr": 5e-6, "steps": 100, "batch_size": 32, "weight_decay": 0.0},
    "analysis": {"n_identities": 8, "per_identity": 4, "n_latents": 8},
    "evaluation": {
        "n_samples": 25,
        "seed": None,
        "guidance_scale": 1.0,
        "max_retain_identities": None,
    },
    "output_dir": "runs/piu",
}


# --------------------------------------------------------------------------- config


def _check_type(path: str, value, default):
    if default is None:
        if value is not None and (isinstance(value, bool) or not isinstance(value, int)):
            raise ConfigError(f"{path}: expected integer or null, got {type(value).__name__}")
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {type(value).__name__}")
    return value


def _merge(defaults: dict, given: dict, prefix: str = "") -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object")
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        path = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown key: {path}")
        if isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], value, path + ".")
        else:
            out[key] = _check_type(path, value, defaults[key])
    return out


@dataclass
class ExperimentConfig:
    """Fully resolved experiment settings; ``data`` mirrors :data:`DEFAULTS`."""

    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __getitem__(self, key):
        return self.data[key]

    @property
    def method(self) -> str:
        return self.data["method"]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def output_dir(self) -> Path:
        return Path(self.data["output_dir"])

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"

    def replace(self, path: tuple, value) -> "ExperimentConfig":
        data = copy.deepcopy(self.data)
        node = data
        for key in path[:-1]:
            node = node[key]
        node[path[-1]] = value
        return config_from_dict(data)


def _validate(d: dict) -> None:
    if d["method"] not in METHODS:
        raise ConfigError(f"method: must be one of {', '.join(METHODS)}, got {d['method']!r}")
    if d["piu"]["latent_source"] not in ul.LATENT_SOURCES:
        raise ConfigError("piu.latent_source: must be 'gaussian' or 'real'")
    if d["uce"]["blocks"] not in ("all", "surgical"):
        raise ConfigError("uce.blocks: must be 'all' or 'surgical'")
    if d["seed"] < 0:
        raise ConfigError("seed: must be non-negative")
    w = d["world"]
    if w["num_identities"] < 2 or w["samples_per_identity"] < 2:
        raise ConfigError("world: need at least two identities with two samples each")
    if not 1 <= d["piu"]["surgical_top_k"] <= d["model"]["n_blocks"]:
        raise ConfigError("piu.surgical_top_k: must lie in [1, model.n_blocks]")
    if d["evaluation"]["n_samples"] < 2:
        raise ConfigError("evaluation.n_samples: must be >= 2")


def config_from_dict(given: dict) -> ExperimentConfig:
    data = _merge(DEFAULTS, given)
    _validate(data)
    return ExperimentConfig(data)


def parse_config(path) -> ExperimentConfig:
    """Read a JSON config; missing keys take defaults, unknown keys are rejected."""
    text = Path(path).read_text()  # OSError propagates as an io error
    try:
        given = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(given)


# --------------------------------------------------------------------------- building blocks


class StageFailed(PiuError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class Setting:
    """World, dataset, schedule and model shape derived from a config."""

    dataset: ids.IdentityDataset
    world: df.SynthWorld
    schedule: df.NoiseSchedule
    model_cfg: df.DenoiserConfig


def build_setting(cfg: ExperimentConfig) -> Setting:
    w, m, s = cfg["world"], cfg["model"], cfg["schedule"]
    model_cfg = df.DenoiserConfig(cond_dim=w["id_dim"], **m)
    dataset = ids.generate_identities(
        w["num_identities"], w["samples_per_identity"], w["spread"], w["id_dim"], w["dataset_seed"]
    )
    world = df.make_world(
        w["id_dim"], w["obs_dim"], w["style_dim"], model_cfg.latent_dim, w["world_seed"],
        w["latent_scale"], w["style_scale"],
    )
    schedule = df.make_schedule(s["T"], s["beta_min"], s["beta_max"])
    return Setting(dataset, world, schedule, model_cfg)


def base_cache_key(cfg: ExperimentConfig) -> str:
    payload = {k: cfg[k] for k in ("world", "model", "schedule", "base_training")}
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:24]


def cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV) or Path.home() / ".cache" / "piu")


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def base_model(cfg: ExperimentConfig, setting: Setting, use_cache: bool = True):
    """Train the base denoiser, or load it from the content-addressed cache.

    Returns ``(params, loss_trace_or_None, cache_key)``; the trace is None on a cache hit.
    """
    key = base_cache_key(cfg)
    path = cache_dir() / f"base-{key}.ckpt"
    if use_cache and path.exists():
        log.info("base model cache hit %s", path)
        return df.load_checkpoint(path), None, key
    b = cfg["base_training"]
    train_cfg = df.BaseTrainConfig(
        steps=b["steps"], lr=b["lr"], batch_size=b["batch_size"], p_uncond=b["p_uncond"],
        weight_decay=b["weight_decay"], seed=b["seed"],
    )
    trace: list = []
    params = df.train_base(
        setting.dataset, setting.world, setting.schedule, train_cfg, setting.model_cfg, trace
    )
    if use_cache:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + f".tmp{os.getpid()}")
        df.save_checkpoint(params, tmp)
        os.replace(tmp, path)
    return params, trace, key


def eligible_forget_identities(dataset, taus, tolerance) -> list[int]:
    """Identities with a non-empty anchor set for every ``tau`` in ``taus``."""
    out = []
    for f in dataset.identities:
        if all(ids.anchor_candidates(dataset, ids.AnchorQuery(f, t, tolerance)) for t in taus):
            out.append(int(f))
    return out


def choose_forget_identity(cfg: ExperimentConfig, dataset, taus=None) -> int:
    if cfg["forget_identity"] is not None:
        f = cfg["forget_identity"]
        if f not in dataset.identities:
            raise ConfigError(f"forget_identity: {f} is not an identity of the world")
        return f
    taus = taus or [cfg["anchor"]["tau"]]
    pool = eligible_forget_identities(dataset, taus, cfg["anchor"]["tolerance"])
    if not pool:
        raise NoAnchorFound(taus[0], cfg["anchor"]["tolerance"], float("nan"), -1)
    return pool[int(np.random.default_rng(cfg.seed).integers(len(pool)))]


def make_probe(cfg: ExperimentConfig, setting: Setting, forget_identity: int):
    a = cfg["analysis"]
    return mt.default_probe(
        setting.dataset, setting.schedule, setting.model_cfg.latent_dim, a["n_identities"],
        a["per_identity"], a["n_latents"], seed=cfg.seed, exclude=(forget_identity,),
    )


def unlearn_config(cfg: ExperimentConfig, method: str | None = None) -> ul.UnlearnConfig:
    p = dict(cfg["piu"])
    if (method or cfg.method) == "naive":
        p["lambda_preserve"] = 0.0
        p["eta"] = 0.0
    return ul.UnlearnConfig(
        tau=cfg["anchor"]["tau"], anchor_tolerance=cfg["anchor"]["tolerance"], seed=cfg.seed, **p
    )


@dataclass
class MethodResult:
    params: df.DenoiserParams
    log: list
    trainable: set  # parameter names the method may change


def run_method(cfg: ExperimentConfig, setting: Setting, frozen, forget_identity, anchor,
               scores: dict) -> MethodResult:
    method = cfg.method
    ds = setting.dataset
    if method in ("piu", "naive"):
        ucfg = unlearn_config(cfg)
        if ucfg.surgical:
            mask = ul.surgical_mask_from_scores(frozen, scores, ucfg.surgical_top_k)
        else:
            mask = ul.full_mask(frozen)
        params, steps = ul.run_unlearning(
            frozen, ds, forget_identity, ucfg, setting.schedule, anchor=anchor, mask=mask,
            world=setting.world,
        )
        return MethodResult(params, steps, set(mask.names))
    if method == "siss":
        s = cfg["siss"]
        scfg = bl.SissConfig(beta=s["beta"], lr=s["lr"], steps=s["steps"],
                             batch_size=s["batch_size"], weight_decay=s["weight_decay"],
                             seed=cfg.seed)
        params, steps = bl.run_siss(frozen, ds, forget_identity, scfg, setting.schedule,
                                    setting.world)
        return MethodResult(params, steps, set(frozen.tensors))
    if method == "uce":
        u = cfg["uce"]
        ucfg = bl.UceConfig(alpha_e=u["alpha_e"], alpha_p=u["alpha_p"],
                            lambda_reg=u["lambda_reg"], n_mixtures=u["n_mixtures"],
                            blocks=u["blocks"], seed=cfg.seed)
        tags = None
        if u["blocks"] == "surgical":
            tags = ul.rank_blocks(scores)[: cfg["piu"]["surgical_top_k"]]
        params, steps = bl.run_uce(frozen, ds, forget_identity, ucfg, anchor=anchor, tags=tags)
        edited = {f"{t}.{k}" for t in (tags or frozen.config.tags) for k in ("W_k", "W_v")}
        return MethodResult(params, steps, edited)
    if method == "wid":
        w = cfg["wid"]
        wcfg = bl.WidConfig(lambda_id=w["lambda_id"], lr=w["lr"], steps=w["steps"],
                            batch_size=w["batch_size"], weight_decay=w["weight_decay"],
                            seed=cfg.seed)
        params, steps = bl.run_wid(frozen, ds, forget_identity, wcfg, setting.schedule,
                                   setting.world, anchor=anchor)
        return MethodResult(params, steps, set(frozen.tensors))
    raise ConfigError(f"method: unknown {method!r}")


def evaluate_params(cfg: ExperimentConfig, setting: Setting, params, forget_identity, probe):
    e = cfg["evaluation"]
    seed = cfg.seed if e["seed"] is None else e["seed"]
    return mt.evaluate(
        params, setting.dataset, setting.world, setting.schedule, forget_identity,
        n_samples=e["n_samples"], seed=seed, guidance_scale=e["guidance_scale"],
        max_retain_identities=e["max_retain_identities"], probe=probe,
    )


def dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def layers_table(scores: dict) -> list[dict]:
    order = ul.rank_blocks(scores)
    return [
        {"tag": t, "s_kv": s.s_kv, "s_q": s.s_q, "combined": s.combined, "rank": order.index(t) + 1}
        for t, s in scores.items()
    ]


# --------------------------------------------------------------------------- pipeline


def _stage(name):
    def wrap(fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, OSError, StageFailed):
            raise
        except Exception as exc:  # noqa: BLE001 - re-raised with the stage tag
            raise StageFailed(name, exc) from exc
    return wrap


def prepare_output(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    if not os.access(path, os.W_OK):
        raise PermissionError(f"output directory {path} is not writable")
    return path


@dataclass
class Prepared:
    """Everything a method needs before it runs: base model, forget/anchor pair, layer scores."""

    config: ExperimentConfig  # with forget_identity resolved
    setting: Setting
    frozen: df.DenoiserParams
    cache_key: str
    base_trace: list | None
    forget_identity: int
    anchor: int
    probe: mt.SeparationProbe
    scores: dict


def prepare(cfg: ExperimentConfig, use_cache: bool = True) -> Prepared:
    setting = _stage("world")(build_setting, cfg)
    frozen, trace, key = _stage("train-base")(base_model, cfg, setting, use_cache)
    forget_identity = _stage("select-anchor")(choose_forget_identity, cfg, setting.dataset)
    resolved = cfg.replace(("forget_identity",), forget_identity)
    setting.dataset = setting.dataset.with_forget(forget_identity)
    anchor = _stage("select-anchor")(
        ids.select_anchor, setting.dataset,
        ids.AnchorQuery(forget_identity, cfg["anchor"]["tau"], cfg["anchor"]["tolerance"], cfg.seed),
    )
    probe = _stage("analyze-layers")(make_probe, cfg, setting, forget_identity)
    scores = _stage("analyze-layers")(mt.layer_separation, frozen, probe)
    return Prepared(resolved, setting, frozen, key, trace, forget_identity, anchor, probe, scores)


def run_pipeline(cfg: ExperimentConfig, use_cache: bool = True) -> Path:
    """Base model, layer analysis, anchor, unlearning and evaluation; returns the run directory."""
    out = prepare_output(cfg.output_dir)
    prep = prepare(cfg, use_cache)
    resolved, setting, frozen = prep.config, prep.setting, prep.frozen
    forget_identity, anchor, probe, key = prep.forget_identity, prep.anchor, prep.probe, prep.cache_key
    frozen_sum = frozen.checksum()

    result = _stage("unlearn")(
        run_method, resolved, setting, frozen, forget_identity, anchor, prep.scores
    )
    if frozen.checksum() != frozen_sum:
        raise StageFailed("unlearn", RuntimeError("frozen base parameters were modified"))

    before = _stage("evaluate")(evaluate_params, cfg, setting, frozen, forget_identity, probe)
    after = _stage("evaluate")(evaluate_params, cfg, setting, result.params, forget_identity, probe)

    n_total = frozen.num_params()
    n_train = sum(frozen[k].numel() for k in result.trainable)
    summary = {
        "method": cfg.method,
        "forget_identity": forget_identity,
        "anchor": anchor,
        "anchor_similarity": ids.anchor_similarities(setting.dataset, forget_identity)[anchor],
        "layers": layers_table(prep.scores),
        "trainable_params": n_train,
        "total_params": n_total,
        "trainable_fraction": n_train / n_total,
        "delta_kd_forget": after.mmd2_forget - before.mmd2_forget,
        "delta_kd_retain": after.mmd2_retain - before.mmd2_retain,
        "base_cache_key": key,
        "base_checksum": frozen_sum,
        "model_checksum": result.params.checksum(),
    }
    _atomic_write(out / "resolved_config.json", resolved.to_json().encode())
    df.save_checkpoint(result.params, out / "model.ckpt")
    _atomic_write(out / "train_log.txt", ul.format_log(result.log).encode())
    _atomic_write(out / "metrics.json", after.to_json().encode())
    _atomic_write(out / "baseline_metrics.json", before.to_json().encode())
    _atomic_write(out / "run.json", dump_json(summary))
    log.info("run written to %s", out)
    return out


# --------------------------------------------------------------------------- sweeps


@dataclass
class SweepSpec:
    parameter: str
    values: list
    base: ExperimentConfig
    jobs: int = 1

    def __post_init__(self):
        if self.parameter not in SWEEP_PARAMS:
            raise ConfigError(
                f"sweep.parameter: must be one of {', '.join(SWEEP_PARAMS)}, got {self.parameter!r}"
            )
        if not self.values:
            raise ConfigError("sweep.values: empty value list")
        if self.jobs < 1:
            raise ConfigError("sweep.jobs: must be >= 1")


def parse_sweep(path) -> SweepSpec:
    """Sweep file: ``{"parameter": ..., "values": [...], "base": {config}, "jobs": 1}``."""
    try:
        given = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(given, dict):
        raise ConfigError("sweep: expected an object")
    for key in given:
        if key not in ("parameter", "values", "base", "jobs"):
            raise ConfigError(f"unknown key: {key}")
    if "parameter" not in given or "values" not in given:
        raise ConfigError("sweep: 'parameter' and 'values' are required")
    if not isinstance(given["values"], list):
        raise ConfigError("sweep.values: expected a list")
    return SweepSpec(given["parameter"], given["values"], config_from_dict(given.get("base", {})),
                     given.get("jobs", 1))


def _value_label(v) -> str:
    return str(v).replace("/", "_")


def _sweep_worker(args):
    data, use_cache = args
    cfg = ExperimentConfig(data)
    try:
        out = run_pipeline(cfg, use_cache)
        return {"status": "ok", "dir": str(out)}
    except (PiuError, OSError, ValueError) as exc:
        return {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}


SUMMARY_FIELDS = ("ism_forget", "ism_retain", "srk", "mmd2_forget", "mmd2_retain")


def run_sweep(spec: SweepSpec, use_cache: bool = True) -> tuple[Path, bool]:
    """Run the pipeline once per value; returns ``(summary path, all runs succeeded)``."""
    path = SWEEP_PARAMS[spec.parameter]
    base = spec.base
    out = prepare_output(base.output_dir)
    if base["forget_identity"] is None:
        # pin one forget identity valid for every swept setting
        setting = build_setting(base)
        taus = spec.values if spec.parameter == "tau" else None
        f = choose_forget_identity(base, setting.dataset, taus)
        base = base.replace(("forget_identity",), f)
    if spec.parameter == "method":
        bad = [v for v in spec.values if v not in METHODS]
        if bad:
            raise ConfigError(f"sweep.values: unknown method {bad[0]!r}")
    configs = []
    for v in spec.values:
        cfg = base.replace(path, v).replace(
            ("output_dir",), str(out / f"{spec.parameter}={_value_label(v)}")
        )
        configs.append(cfg)

    jobs = [(c.data, use_cache) for c in configs]
    if spec.jobs > 1:
        # warm the cache once so workers do not race to train the same base model
        base_model(base, build_setting(base), use_cache)
        with ProcessPoolExecutor(spec.jobs) as pool:
            outcomes = list(pool.map(_sweep_worker, jobs))
    else:
        outcomes = [_sweep_worker(j) for j in jobs]

    rows, failures = [], []
    for v, res in zip(spec.values, outcomes):
        if res["status"] != "ok":
            failures.append({"value": v, "status": res["status"], "error": res["error"]})
            continue
        m = json.loads((Path(res["dir"]) / "metrics.json").read_text())
        rows.append({"value": v, **{k: m[k] for k in SUMMARY_FIELDS}})
    rows.sort(key=lambda r: (isinstance(r["value"], str), r["value"]))

    summary = {"parameter": spec.parameter, "rows": rows, "failed": failures}
    _atomic_write(out / "sweep_summary.json", dump_json(summary))
    header = f"{spec.parameter:>16s} " + " ".join(f"{k:>12s}" for k in SUMMARY_FIELDS)
    lines = [header]
    for r in rows:
        lines.append(f"{str(r['value']):>16s} " + " ".join(f"{r[k]:12.6f}" for k in SUMMARY_FIELDS))
    for fl in failures:
        lines.append(f"# failed {spec.parameter}={fl['value']}: {fl['error']}")
    _atomic_write(out / "sweep_table.txt", ("\n".join(lines) + "\n").encode())
    dat = [f"# index value {' '.join(SUMMARY_FIELDS)}"]
    for i, r in enumerate(rows):
        x = r["value"] if isinstance(r["value"], (int, float)) else i
        dat.append(f"{i} {x} " + " ".join(repr(r[k]) for k in SUMMARY_FIELDS))
    _atomic_write(out / "sweep.dat", ("\n".join(dat) + "\n").encode())
    return out / "sweep_summary.json", not failures
