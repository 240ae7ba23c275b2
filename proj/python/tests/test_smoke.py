import json

import numpy as np
import pytest

import lbyl


@pytest.fixture(scope="module")
def vgg():
    return lbyl.generate("vgg-tiny", seed=0)


@pytest.fixture(scope="module")
def probes():
    return lbyl.probe_data(count=16, seed=1, shape=(3, 8, 8))


def test_generate_and_round_trip(vgg, tmp_path):
    assert vgg.layer_kinds == ["conv", "conv", "conv", "conv", "flatten", "fc"]
    assert vgg.input_shape == (3, 8, 8)
    assert lbyl.Model.from_bytes(vgg.to_bytes()) == vgg
    vgg.save(str(tmp_path / "m.lbnz"))
    assert lbyl.Model.load(str(tmp_path / "m.lbnz")).to_bytes() == vgg.to_bytes()
    assert vgg.id.startswith("lbnz-crc32:")


def test_forward_and_accuracy(vgg, probes):
    inputs, labels = probes
    assert inputs.shape == (16, 3, 8, 8)
    logits = np.array([vgg.forward(x).reshape(-1) for x in inputs])
    assert lbyl.accuracy(vgg, inputs, list(np.argmax(logits, axis=1))) == 1.0


def test_plan_restore_evaluate(vgg, probes):
    plan = lbyl.plan(vgg, "l2", 0.25)
    assert set(plan) == {"criterion", "ratio", "layers"}
    restored = lbyl.restore(vgg, plan)
    assert restored.layer_kinds == vgg.layer_kinds
    again, report = lbyl.evaluate(vgg, plan, inputs=probes[0], labels=probes[1])
    assert again == restored
    _, prune = lbyl.evaluate(vgg, plan, method="none", inputs=probes[0])
    final = str(len(vgg.layer_kinds) - 1)
    assert report["ware"][final] < prune["ware"][final]


def test_compare_global_sweep(vgg, probes):
    plan = lbyl.plan(vgg, "l2", 0.3)
    cmp = lbyl.compare(vgg, plan, probes[0])
    assert cmp["loss_ordering"]["violations"] == 0
    assert cmp["methods"] == ["lbyl", "nm", "none"]
    _, gplan, greport = lbyl.global_prune(vgg, probes[0], threshold=0.3)
    assert all(w <= 0.3 for w in greport["ware"].values())
    assert set(gplan["layers"]) <= {"0", "1", "2", "3"}
    result = lbyl.sweep(vgg, plan, [(1e-5, 1e-3), (0.0, 1e9)], probes[0])
    assert result["best"]["index"] == 0
    assert len(result["rows"]) == 2


def test_solve_coefficients_duplicate():
    rng = np.random.default_rng(0)
    bank = rng.normal(size=(3, 9))
    bank[2] = 2.0 * bank[0]
    s = lbyl.solve_coefficients(bank, 2, [0, 1], lambda1=0.0, lambda2=0.0)
    assert s == pytest.approx([2.0, 0.0], abs=1e-9)


def test_errors_carry_codes(vgg):
    with pytest.raises(lbyl.LbylError) as err:
        lbyl.plan(vgg, "l7", 0.3)
    assert err.value.category == "config"
    with pytest.raises(lbyl.LbylError) as err:
        lbyl.Model.from_bytes(b"nope")
    assert err.value.category == "io"
    bank = np.ones((3, 1))
    with pytest.raises(lbyl.LbylError) as err:
        lbyl.solve_coefficients(bank, 2, [0, 1], lambda1=0.0, lambda2=0.0)
    assert err.value.code == "NotPositiveDefinite"
