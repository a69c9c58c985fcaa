"""Smoke test of the Python bindings.

Build and install first, e.g. `maturin develop -m crates/python/Cargo.toml`,
then run `python crates/python/python/smoke_test.py`.
"""

import json

import switchode_py as sw


def main():
    times, y, truth = sw.simulate("dgp2", 120, seed=1)
    assert len(times) == 121 and len(y) == 121 and len(y[0]) == 20
    assert json.loads(truth)["theta"]["shape"] == [2, 20, 20, 1]

    x_hat, sigmas = sw.denoise(y, sigma=0.01)
    assert len(x_hat) == len(y) and sigmas == [0.01] * 20

    h = times[1] - times[0]
    params, objective, bic, posterior = sw.fit(y, x_hat, h, k=2, m=1, lam=0.01)
    assert len(posterior) == 120
    assert all(abs(sum(row) - 1.0) < 1e-9 for row in posterior)
    assert objective == objective and bic == bic

    auc, _ = sw.evaluate(truth, truth)
    assert auc == [1.0, 1.0]
    auc, distance = sw.evaluate(params, truth)
    assert len(auc) == 2 and distance >= 0.0

    try:
        sw.simulate("dgp9", 10, seed=1)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown benchmark accepted")
    print("smoke test passed: auc", [round(a, 3) for a in auc])


if __name__ == "__main__":
    main()
