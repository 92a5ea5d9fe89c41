"""Measured directions of effect on the reference toy world (64 identities).

These train real unlearning runs on the cached reference base model, so they are
marked slow; each compares two configurations at matched seeds.
"""

import json

import numpy as np
import pytest

from conftest import reference_cache_dir
from piu import baselines as bl
from piu import harness as hz
from piu import metrics as mt
from piu import unlearn as ul

pytestmark = pytest.mark.slow

SEED = 0
EVAL_RETAIN_IDENTITIES = 16


@pytest.fixture(scope="module")
def world(reference):
    cfg = reference.config.replace(("seed",), SEED)
    f = hz.choose_forget_identity(cfg, reference.setting.dataset)
    data = reference.setting.dataset.with_forget(f)
    anchor = ul.default_anchor(data, f, 0.2, 1e-2, SEED)
    return reference, f, data, anchor


def _evaluate(world, params, seed=SEED):
    ref, f, data, _ = world
    return mt.evaluate(params, data, ref.setting.world, ref.setting.schedule, f, 25, seed=seed,
                       max_retain_identities=EVAL_RETAIN_IDENTITIES)


@pytest.fixture(scope="module")
def baseline(world):
    return _evaluate(world, world[0].frozen)


@pytest.fixture(scope="module")
def piu_run(world):
    ref, f, data, anchor = world
    params, log = ul.run_unlearning(ref.frozen, data, f, ul.UnlearnConfig(seed=SEED),
                                    ref.setting.schedule, anchor=anchor)
    return params, log, _evaluate(world, params)


def test_frozen_model_recognizes_everyone(baseline):
    # pre-unlearning regime: both accuracies high, SRK close to 1 / 1.01
    assert baseline.acc_u >= 0.9 and baseline.acc_r >= 0.9
    assert baseline.srk == pytest.approx(baseline.acc_r / (baseline.acc_u + 0.01))
    assert 0.89 <= baseline.srk <= 1.0 / 0.91


def test_frozen_forget_and_retain_ism_agree(reference):
    # on the untouched model the forget identity is just another identity
    diffs = []
    for s in range(5):
        cfg = reference.config.replace(("seed",), s)
        f = hz.choose_forget_identity(cfg, reference.setting.dataset)
        r = mt.evaluate(reference.frozen, reference.setting.dataset.with_forget(f),
                        reference.setting.world, reference.setting.schedule, f, 25, seed=s,
                        max_retain_identities=EVAL_RETAIN_IDENTITIES)
        diffs.append(r.ism_forget - r.ism_retain)
    se = np.std(diffs, ddof=1) / np.sqrt(len(diffs))
    assert abs(np.mean(diffs)) <= 3 * se + 1e-3


def test_piu_loss_decreases(piu_run):
    _, log, _ = piu_run
    assert len(log) == 300
    assert log[-1].values["loss_total"] < log[0].values["loss_total"]


def test_piu_forgets_and_preserves(piu_run, baseline):
    _, _, r = piu_run
    assert r.ism_forget < 0.6 * baseline.ism_forget
    assert r.ism_retain > 0.9 * baseline.ism_retain
    assert r.srk > 10 * baseline.srk


def test_naive_loses_more_retain_than_piu(world, piu_run):
    ref, f, data, anchor = world
    naive = ul.UnlearnConfig(lambda_preserve=0.0, eta=0.0, seed=SEED)
    params, _ = ul.run_unlearning(ref.frozen, data, f, naive, ref.setting.schedule, anchor=anchor)
    assert _evaluate(world, params).ism_retain < piu_run[2].ism_retain


def test_siss_is_weak(world, baseline, piu_run):
    ref, f, data, _ = world
    params, _ = bl.run_siss(ref.frozen, data, f, bl.SissConfig(seed=SEED), ref.setting.schedule,
                            ref.setting.world)
    r = _evaluate(world, params)
    # at its configured step budget SISS stays at the baseline within sampling noise
    assert not params.equal(ref.frozen)
    assert abs(r.ism_forget - baseline.ism_forget) < 0.05
    assert r.ism_forget > piu_run[2].ism_forget + 0.5


def test_wid_costs_more_retain_than_piu(world, baseline):
    # matched optimizer settings and step count (100 steps at lr 1e-4, full network)
    ref, f, data, anchor = world
    wid, _ = bl.run_wid(ref.frozen, data, f, bl.WidConfig(lr=1e-4, seed=SEED), ref.setting.schedule,
                        ref.setting.world, anchor=anchor)
    piu, _ = ul.run_unlearning(ref.frozen, data, f, ul.UnlearnConfig(steps=100, seed=SEED),
                               ref.setting.schedule, anchor=anchor)
    r_wid, r_piu = _evaluate(world, wid), _evaluate(world, piu)
    assert r_wid.ism_forget < baseline.ism_forget
    assert baseline.ism_retain - r_wid.ism_retain > baseline.ism_retain - r_piu.ism_retain


def test_uce_edits_remove_identity(world, baseline):
    ref, f, data, anchor = world
    params, _ = bl.run_uce(ref.frozen, data, f, bl.UceConfig(seed=SEED), anchor=anchor)
    r = _evaluate(world, params)
    assert r.ism_forget < baseline.ism_forget
    assert r.ism_retain > 0.9 * baseline.ism_retain


@pytest.fixture
def reference_cache(reference, pytestconfig, monkeypatch):
    """The reference world with the persistent base cache visible to the harness."""
    monkeypatch.setenv(hz.CACHE_ENV, reference_cache_dir(pytestconfig))
    return reference


def _sweep(reference, tmp_path, parameter, values):
    base = reference.config.replace(("output_dir",), str(tmp_path / parameter)).replace(
        ("evaluation", "max_retain_identities"), EVAL_RETAIN_IDENTITIES)
    path, ok = hz.run_sweep(hz.SweepSpec(parameter, values, base))
    assert ok
    rows = json.loads(path.read_text())["rows"]
    assert [r["value"] for r in rows] == sorted(values)
    return {r["value"]: r for r in rows}


def test_lambda_sweep_direction(reference_cache, tmp_path):
    rows = _sweep(reference_cache, tmp_path, "lambda_preserve", [10.0, 0.0])
    assert rows[0.0]["ism_retain"] < rows[10.0]["ism_retain"]


def test_eta_sweep_direction(reference_cache, tmp_path):
    rows = _sweep(reference_cache, tmp_path, "eta", [1.5, 0.0])
    assert rows[0.0]["ism_forget"] > rows[1.5]["ism_forget"]
    assert rows[0.0]["srk"] < rows[1.5]["srk"]
