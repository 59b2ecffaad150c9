"""Smoke test for the dpcal extension module.

Build and run from the repository root:

    cargo build --release -p dpcal-python
    cp target/release/libdpcal.so python/dpcal.so
    python3 python/smoke_test.py
"""

import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import dpcal  # noqa: E402


def main():
    # Accountant: the full-batch Gaussian RDP curve is alpha / (2 sigma^2).
    eps, delta = dpcal.epsilon(1.0, 5.0, 1)
    assert delta == 1e-5 and 0.5 < eps < 1.5, eps
    sigma = dpcal.calibrate_noise(8.0, 0.4, 150)
    eps, _ = dpcal.epsilon(0.4, sigma, 150)
    assert abs(eps - 8.0) / 8.0 < 1e-3, eps
    assert dpcal.partition_compose((8.0, 1e-5), (8.0, 1e-5)) == (8.0, 1e-5)

    clipped = dpcal.clip_per_example([3.0, 4.0], 1.0)
    assert abs(math.hypot(*clipped) - 1.0) < 1e-12

    assert dpcal.ece([0.9, 0.9], [True, False], 15) == 0.4

    train = dpcal.make_gaussian_mixture(2000, 0)
    test = dpcal.make_gaussian_mixture(1000, 1)
    assert len(train) == 2000 and train.dim == 2 and train.num_classes == 2

    model, trace, budget = dpcal.train(
        train,
        {"mode": "non_private", "expected_batch": 200, "learning_rate": 0.5, "epochs": 5},
        eval_data=test,
    )
    assert len(trace) == 5
    assert budget["status"] == "not_private", budget
    report = dpcal.evaluate(model, test)
    assert report["accuracy"] > 0.8, report

    model, _, budget = dpcal.train(
        train, {"mode": "dp", "clip_norm": 0.1, "noise_multiplier": 1.0, "expected_batch": 200, "epochs": 3}
    )
    assert budget["status"] == "private" and budget["epsilon"] > 0, budget

    fit, fit_budget = dpcal.fit_recalibrator("temperature", model, test)
    assert fit.kind == "temperature" and fit.value > 0
    assert fit_budget["status"] == "not_private"
    again = dpcal.Recalibrator.from_json(fit.to_json())
    assert again.value == fit.value
    assert dpcal.LinearModel.from_json(model.to_json()).weights == model.weights

    with tempfile.TemporaryDirectory() as out:
        config = {"data": {"synthetic": {"n": 1000, "n_test": 500}}, "seeds": [0, 1], "train": {"epochs": 3}}
        rep = dpcal.run_experiment("fig1", config, out=out)
        assert [a["name"] for a in rep["arms"]] == ["non_private", "dp"]
        with open(os.path.join(out, "report.json")) as f:
            assert json.load(f)["experiment"] == "fig1"

    print("dpcal smoke test passed")


if __name__ == "__main__":
    main()
