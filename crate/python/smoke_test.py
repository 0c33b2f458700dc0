"""Smoke test for the `vrof` extension module.

Build and install first:  cd crates/python && maturin build --release && pip install <wheel>
Run:  python python/smoke_test.py   (or pytest python/smoke_test.py)
"""

import json
import math
import os
import tempfile

import vrof


def step(cells=256):
    vals = [[0.0] if (i + 0.5) / cells < 0.5 else [1.0] for i in range(cells)]
    return vrof.GridSignal(vals, atoms=[(cells // 2 - 1, [1.0])])


def test_anisotropy():
    phi = vrof.Anisotropy.euclidean(2)
    assert phi([3.0, 4.0]) == 5.0
    assert phi.dual([3.0, 4.0]) == 5.0
    l1 = vrof.Anisotropy({"kind": "l1"}, dim=2)
    assert l1([1.0, -2.0]) == 3.0
    assert l1.equivalence_constants() == (1.0, math.sqrt(2.0))
    q = l1.project_dual_ball([3.0, -0.5])
    assert abs(q[0] - 1.0) < 1e-15 and abs(q[1] + 0.5) < 1e-15
    w = vrof.Anisotropy.weighted_l2([4.0, 1.0])
    assert w.reshetnyak_probe(trials=2000)["strict"]
    assert not l1.reshetnyak_probe(trials=2000)["strict"]
    try:
        vrof.Anisotropy({"kind": "l7"})
    except vrof.VrofError as e:
        assert "anisotropy" in str(e)
    else:
        raise AssertionError("bad kind accepted")


def test_regularizer():
    phi = vrof.Anisotropy.euclidean(2)
    tv = vrof.Regularizer(phi)
    assert tv.homogeneous and tv([3.0, 4.0]) == 5.0
    f = vrof.Regularizer(phi, "sqrt1p")
    assert abs(f([3.0, 0.0]) - (math.sqrt(10.0) - 1.0)) < 1e-14
    assert f.grad([0.0, 0.0]) == [0.0, 0.0]
    assert f.recession([0.0, 2.0]) == 2.0
    assert f.regular_case() is None


def test_kkt_step():
    # plateaus lam / (1/2) away from the data on each half
    h = step()
    u = vrof.taut_string(h, 0.05)
    vals = [v[0] for v in u.values()]
    assert max(abs(x - 0.1) for x in vals[:128]) < 1e-12
    assert max(abs(x - 0.9) for x in vals[128:]) < 1e-12
    reg = vrof.Regularizer(vrof.Anisotropy.euclidean(1))
    assert abs(vrof.energy(u, h, reg, 0.05) - 0.045) < 1e-12
    pd, info = vrof.solve_pd(h, reg, 0.05, tol_gap=1e-11)
    assert info["converged"] and pd.l2_distance(u) < 1e-6
    cont, diag = vrof.continuation_solve(h, reg, 0.05)
    assert diag["converged"] and cont.l2_distance(u) < 1e-3
    assert abs(u.variation() - 0.8) < 1e-12


def test_vector_solve_and_flow():
    datum = {
        "kind": "mixed",
        "piecewise": {"kind": "random_piecewise_constant", "breaks": 4, "amplitude": 1.0},
        "smooth": {"kind": "smooth_fourier", "modes": 3, "amplitude": 0.3},
    }
    h = vrof.GridSignal.generate(datum, 128, channels=2, seed=3)
    # breaks landing on the same edge merge into one atom
    assert h.channels == 2 and len(h) == 128 and 1 <= len(h.atoms()) <= 4
    reg = vrof.Regularizer(vrof.Anisotropy.l1(2))
    u, info = vrof.solve_pd(h, reg, 0.05)
    assert info["converged"]
    assert u.variation() <= h.variation()
    out = vrof.flow(h, reg, 1.0 / 8, 8)
    assert out["aborted"] is None and out["dissipation_holds"]
    e = out["energies"]
    assert all(b <= a + 1e-12 for a, b in zip(e, e[1:]))
    assert out["report"]["pass"]


def test_battery_and_cli():
    spec = {
        "name": "smoke",
        "theorem": "homogeneous",
        "interval": {"a": 0.0, "b": 1.0},
        "channels": 2,
        "lambda": 0.05,
        "regularizer": {"profile": {"kind": "identity"}, "anisotropy": {"kind": "euclidean", "dim": 2}},
        "datum": {"kind": "random_piecewise_constant", "breaks": 4, "amplitude": 1.0},
        "instances": 2,
        "seed": 1,
        "grids": [64, 128],
        "windows": {"kind": "dyadic", "depth": 3},
        "pd": {"max_iter": 200000, "tol_gap": 1e-11, "check_every": 20},
        "thetas": [0.5],
        "certificate": True,
        "c_cert": 4.0,
    }
    res = vrof.run_battery(spec)
    assert res["reports_pass"] and res["certificates_pass"]
    with tempfile.TemporaryDirectory() as d:
        cfg = {
            "interval": {"a": 0.0, "b": 1.0},
            "grid_cells": 64,
            "channels": 1,
            "lambda": 0.1,
            "anisotropy": {"kind": "euclidean"},
            "profile": {"kind": "identity"},
            "datum": {"kind": "piecewise_constant", "base": [2.0], "pieces": []},
        }
        path = os.path.join(d, "c.json")
        with open(path, "w") as fh:
            json.dump(cfg, fh)
        assert vrof.load_config(path)["solver"]["method"] == "pd"
        out = os.path.join(d, "out")
        assert vrof.cli(["solve", "--config", path, "--out", out]) == 0
        assert os.path.exists(os.path.join(out, "solution.csv"))
        cfg["anisotropy"] = {"kind": "l7"}
        with open(path, "w") as fh:
            json.dump(cfg, fh)
        assert vrof.cli(["solve", "--config", path, "--out", out]) == 1


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_"):
            fn()
            print(f"{name}: ok")
