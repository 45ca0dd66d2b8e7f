import json

import numpy as np
import pytest

from latentmark.attacks import AttackSpec
from latentmark.ecc import default_ecc
from latentmark.errors import ContractError
from latentmark.evaluation import (EvalRun, guidance_sweep, inversion_steps_ablation, run_gauntlet,
                                   stabilization_step, strength_sweep)

N = 32


def _run(artifacts, **kw):
    base = dict(backend=artifacts.backend, codec=artifacts.finetuned, ecc=default_ecc(48), n_images=N, seed=11)
    base.update(kw)
    return EvalRun(**base)


def test_stabilization_step():
    assert stabilization_step([1, 2, 3, 4, 5], [0.2, 0.8, 0.99, 1.0, 1.0]) == 3
    assert stabilization_step([1, 2, 3], [1.0, 1.0, 1.0]) == 1
    # a late dip moves the stabilization point past it
    assert stabilization_step([1, 2, 3, 4], [1.0, 0.9, 1.0, 1.0]) == 3
    assert stabilization_step([7], [0.5]) == 7


def test_eval_run_validation(artifacts):
    with pytest.raises(ContractError):
        _run(artifacts, n_images=0)
    with pytest.raises(ContractError):
        strength_sweep("gaussian_noise", [0.1, 0.0], _run(artifacts))
    with pytest.raises(ContractError):
        inversion_steps_ablation([], _run(artifacts))


def test_gauntlet_is_reproducible(artifacts):
    run = _run(artifacts, attacks=(None, AttackSpec("gaussian_noise", 0.05, 3)))
    a = run_gauntlet(run)
    b = run_gauntlet(run)
    assert a.to_json() == b.to_json()
    assert a.threshold == 33 and a.k == 48
    assert [r.attack for r in a.rows] == ["none", "gaussian_noise:0.05"]
    for r in a.rows:
        assert r.n == N
        assert r.payload_recovery_rate >= r.exact_match_rate


def test_identity_strength_equals_clean_row(artifacts):
    run = _run(artifacts)
    clean = run_gauntlet(run).row("none")
    curve = strength_sweep("gaussian_noise", [0.0, 0.02, 0.05, 0.1], run)
    first = curve.rows[0]
    assert (first.bit_accuracy, first.detection_rate) == (clean.bit_accuracy, clean.detection_rate)
    acc = curve.column("bit_accuracy")
    # more noise never helps beyond sampling error
    se = curve.column("bit_accuracy_std") / np.sqrt(N)
    for i in range(len(acc) - 1):
        assert acc[i + 1] <= acc[i] + 2 * np.hypot(se[i], se[i + 1])
    assert acc[-1] < acc[0]


def test_single_entry_sweeps(artifacts):
    run = _run(artifacts, n_images=8)
    g = guidance_sweep([5.0], run)
    assert len(g.rows) == 1 and g.values == [5.0]
    curve, stab = inversion_steps_ablation([4], run)
    assert stab == 4 and len(curve.rows) == 1


def test_inversion_steps_matter(artifacts):
    curve, _ = inversion_steps_ablation([1, 20], _run(artifacts))
    one, twenty = curve.column("bit_accuracy")
    assert twenty > one


def test_controls_are_calibrated(artifacts):
    res = run_gauntlet(_run(artifacts, n_images=4, n_controls=200))
    # alpha = 0.01; 200 controls leave room for a few chance hits
    assert res.n_controls == 200
    assert res.control_detection_rate <= 0.05
    assert "control" in res.to_table()


def test_missing_external_adapter_is_skipped(artifacts):
    res = run_gauntlet(_run(artifacts, n_images=4, attacks=(None, AttackSpec.parse("external:ghost"))))
    row = res.row("external:ghost")
    assert row.skipped and np.isnan(row.bit_accuracy)
    assert "skipped" in res.to_table()
    assert res.row("none").skipped is None


def test_outputs(artifacts, tmp_path):
    run = _run(artifacts, n_images=8)
    res = run_gauntlet(run)
    data = json.loads(res.to_json())
    assert data["rows"][0]["attack"] == "none"
    curve = strength_sweep("brightness", [1.0, 2.0], run)
    assert json.loads(json.dumps(curve.to_dict()))["values"] == [1.0, 2.0]
    assert len(curve.to_table().splitlines()) == 3
    pytest.importorskip("matplotlib")
    path = tmp_path / "curve.svg"
    curve.render_svg(path)
    assert path.read_text().lstrip().startswith("<?xml")
