"""Smoke test for the gmfc Python bindings.

Build and install first:
    pip install maturin
    cd crates/python && maturin develop --release
then run `python python/smoke_test.py` from the repository root.
"""

import math
import os
import tempfile

import gmfc


def main():
    # cut norm of a +-1 checkerboard with uniform weights is 1/4
    value, method = gmfc.cut_norm([[1.0, -1.0], [-1.0, 1.0]])
    assert method == "exact" and abs(value - 0.25) < 1e-12, (value, method)
    assert gmfc.cut_norm_lower_bound([[1.0, -1.0], [-1.0, 1.0]]) <= value + 1e-12

    k4 = gmfc.StepKernel.from_graphon("product", 4)
    k8 = gmfc.StepKernel.from_graphon("product", 8)
    d, m = k4.cut_distance(k8)
    assert m == "exact" and 0.0 < d <= 0.5, (d, m)
    assert len(k4.to_list()) == 4

    assert gmfc.w1_sorted([0.0, 1.0], [1.0, 2.0]) == 1.0
    assert abs(gmfc.w1([[0.0, 0.0]], [[3.0, 4.0]]) - 5.0) < 1e-12

    assert abs(gmfc.jensen_gap(0.0, 1.0) - 1.0 / 12.0) < 1e-6

    model = gmfc.Model.example1("tanh")
    kernel = gmfc.StepKernel.from_graphon("constant:1", 32)
    res = gmfc.simulate(model, kernel, gamma="bang_bang_phi", gamma_params=[],
                        init="gaussian", init_params=[0.0, 1.0], dt=0.05, reps=4, seed=1)
    again = gmfc.simulate(model, kernel, gamma="bang_bang_phi", gamma_params=[],
                          init="gaussian", init_params=[0.0, 1.0], dt=0.05, reps=4, seed=1)
    assert res.total_cost == again.total_cost
    assert len(res.final_states) == 4 and len(res.final_states[0]) == 32
    assert math.isfinite(res.j_mean) and res.j_stderr >= 0.0

    relaxed = gmfc.simulate(gmfc.Model.example2(), kernel, gamma="echo_v", gamma_params=[],
                            relaxed=True, dt=0.05, reps=2)
    assert len(relaxed.total_cost) == 2

    with tempfile.TemporaryDirectory() as tmp:
        cfg = os.path.join(tmp, "k.toml")
        with open(cfg, "w") as f:
            f.write('[kernelconv]\ngraphon_id = "product"\nns = [4, 8, 16]\n')
        code, out, err = gmfc.run_cli(["--config", cfg, "--out", tmp, "experiment", "kernelconv"])
        assert code == 0, err
        assert "verdict=pass" in out
        assert os.path.exists(os.path.join(tmp, "kernelconv", "report.csv"))
        code, _, err = gmfc.run_cli(["experiment", "nope"])
        assert code == 2 and "nope" in err

    print("smoke test ok:", res)


if __name__ == "__main__":
    main()
