"""Smoke test for the Python bindings: build with `maturin develop` in crates/python, then run this."""

import math

import impact_sde_py as m


def close(a, b, tol):
    return abs(a - b) <= tol * max(1.0, abs(b))


def main():
    agents = m.Agents.exponential([2.0, 2.0])
    assert len(agents) == 2
    p = agents.sup_convolution([1.0, 2.0], 0.5)
    exact = m.exponential_sup_convolution([2.0, 2.0], [1.0, 2.0], 0.5)
    assert close(p["r"], exact["r"], 1e-10), (p, exact)
    assert abs(sum(p["allocation"]) - 0.5) < 1e-10

    assert [m.theorem_index(*mj) for mj in [(1, 1), (2, 1), (2, 2), (3, 3)]] == [2, 2, 3, 4]

    engine = m.Engine(agents, 0.3, [1.0], nodes=32)
    f = engine.eval_f(0.5, 0.2, [1.0, 1.0], 0.0, [0.2])
    h, _ = engine.eval_h(0.5, 0.2, [1.0, 1.0], 0.0, [0.2])
    assert close(h, -0.5 * f["F"], 1e-8)
    v, x = engine.solve_conjugate(0.5, 0.2, f["F_v"], f["F_x"], [0.2])
    assert close(v[0], 1.0, 1e-8) and abs(x) < 1e-8

    summary = engine.simulate([1.0, 1.0], 1.0, [0.2], paths=200, dt=1 / 64, seed=3)
    assert summary["completed"] == 200
    for mean, u0, se in zip(summary["mean"], summary["u0"], summary["stderr"]):
        assert abs(mean - u0) <= 4 * se
    assert summary["oracle_error"] < 1e-8

    tanh = m.Agents.tanh([2.0, 1.5])
    assert tanh.c > 1.0
    assert math.isfinite(tanh.sup_convolution([1.0, 1.0], 0.0)["r_x"])

    exp_cfg = """
[[agents]]
family = "exponential"
a = 2.0

[model]
endowment = { kind = "linear", slope = 0.3 }
dividends = [{ kind = "linear", slope = 1.0 }]

[sim]
paths = 20
dt = 0.015625
"""
    ex = m.Experiment(exp_cfg)
    assert len(ex.sha256) == 64
    assert "quadrature = 64" in ex.echo()
    verdict, report = ex.check(2)
    assert verdict == "PASS", report
    mean, se, stopped = ex.simulate()
    assert stopped == 0.0 and len(mean) == 1

    try:
        m.Experiment(exp_cfg.replace("[model]", "[modell]"))
    except ValueError as e:
        assert "model" in str(e)
    else:
        raise AssertionError("unknown section accepted")

    print("python smoke test: ok")


if __name__ == "__main__":
    main()
