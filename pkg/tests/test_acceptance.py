"""Acceptance criteria, each at its stated tolerance.

Criteria 8 (Kuramoto-Sivashinsky) and 9 (Kolmogorov flow) take hours and are
marked ``extended``; run them with ``NUDGEFORGE_EXTENDED=1``.
"""

import hashlib
import json
import os

import numpy as np
import pytest
from scipy.signal import place_poles

from nudgeforge import checks, dynamics, evaluation
from nudgeforge.assimilation import verify_linear_observer_decay
from nudgeforge.evaluation import ExperimentConfig
from nudgeforge.training import load_checkpoint

L96_F8_NNN = {100.0: 0.301, 50.0: 0.778, 25.0: 2.93}


@pytest.fixture(scope="session")
def experiments(tmp_path_factory):
    """Memoized full-pipeline runs shared by the reproduction criteria."""
    root = tmp_path_factory.mktemp("acceptance")
    cache = {}

    def run(**kw):
        key = json.dumps(kw, sort_keys=True)
        if key not in cache:
            cfg = ExperimentConfig(**kw)
            tag = hashlib.sha1(key.encode()).hexdigest()[:12]
            grid = (kw.get("scale") or {}).get("grid")
            cfg.paths = {"truth": str(root / f"truth_{kw['system']}_{kw.get('F')}_{grid}_{kw.get('seed', 0)}.nnns"),
                         "loss_curve": str(root / f"{tag}_loss.csv")}
            row = evaluation.run_experiment(cfg)
            cache[key] = (row, np.loadtxt(cfg.paths["loss_curve"], delimiter=",", skiprows=1))
        return cache[key]

    return run


def l96(F, sparsity, method, K=5):
    return dict(system="lorenz96", F=float(F), sigma=evaluation.L96_REGIMES[float(F)],
                sparsity=float(sparsity), method=method, K=K, seed=0)


def test_criterion_01_gradient_integrity(criterion):
    results = checks.gradcheck_suite(tolerance=1e-5)
    worst = max(results, key=lambda r: r[1])
    failed = [r[0] for r in results if not r[2]]
    criterion(1, "gradient integrity", not failed,
              f"{len(results)} checks, worst {worst[0]} rel err {worst[1]:.2e}, failed {failed}")


def test_criterion_02_integrators(criterion):
    order = checks.rk4_order()
    disp = checks.ks_dispersion_error(mode=8, amplitude=1e-8)
    drift = checks.ks_mean_drift(1000)
    div, mean = checks.kolmogorov_properties(n=32, steps=200)
    ok = 3.7 <= order <= 4.3 and disp < 1e-9 and drift < 1e-12 and div < 1e-10 and mean < 1e-12
    criterion(2, "integrator correctness", ok,
              f"RK4 slope {order:.3f}, KS dispersion {disp:.1e}, KS mean drift {drift:.1e}, "
              f"divergence {div:.1e}, mean vorticity {mean:.1e}")


def test_criterion_03_luenberger_decay(criterion):
    rng = np.random.default_rng(0)
    A = rng.standard_normal((5, 5))
    H_L = rng.standard_normal((2, 5))
    G_L = place_poles(A.T, H_L.T, [-1.0, -2.0, -3.0, -4.0, -5.0]).gain_matrix.T
    res = verify_linear_observer_decay(A, H_L, G_L, rng.standard_normal(5), horizon=20.0)
    rel = abs(res.rate - res.max_real_eigenvalue) / abs(res.max_real_eigenvalue)
    criterion(3, "Luenberger decay", rel < 0.02,
              f"fitted rate {res.rate:.4f} vs eigenvalue {res.max_real_eigenvalue:.4f} (rel {rel:.2%})")


def test_criterion_04_chaos_sensitivity(criterion):
    model = dynamics.lorenz96(40, 8.0)
    attractor = dynamics.generate_trajectory(model, model.default_initial_condition(), 2000, burn_in=200)
    idx = np.arange(0, 2000, 50)
    diameter = np.mean([np.linalg.norm(attractor[i] - attractor[j]) for i in idx for j in idx if i < j])
    u0 = attractor[0]
    u1 = u0.copy()
    u1[0] += 1e-3
    a = dynamics.generate_trajectory(model, u0, 100)
    b = dynamics.generate_trajectory(model, u1, 100)
    dist = np.linalg.norm(a - b, axis=1)
    t = model.obs_interval * np.arange(1, 101)
    growth = dist[np.searchsorted(t, 5.0 + 1e-9) - 1] / 1e-3
    reach = dist[t <= 15.0 + 1e-9].max() / diameter
    criterion(4, "chaos sensitivity", growth >= 10 and reach >= 0.5,
              f"growth by t=5 {growth:.0f}x, max distance by t=15 {reach:.2f} x mean attractor distance")


def test_criterion_05_l96_headline(criterion, experiments):
    nnn, loss = experiments(**l96(8, 100, "nnn"))
    lin, _ = experiments(**l96(8, 100, "linear"))
    ok = nnn.armse <= 1.0 and lin.armse >= 3.0 and nnn.armse < lin.armse
    criterion(5, "L96 headline", ok,
              f"NNN aRMSE {nnn.armse:.3f} (ref 0.301, gate 1.0), linear {lin.armse:.3f} (ref 4.23, gate 3.0), "
              f"final/first epoch loss {loss[-1, 1] / loss[0, 1]:.3f}")


def test_l96_training_and_bounded_test_error(experiments):
    nnn, loss = experiments(**l96(8, 100, "nnn"))
    assert loss[-1, 1] < 0.1 * loss[0, 1]
    assert not nnn.diverged and nnn.series.max() < 4.0


def test_criterion_06_sparsity_ordering(criterion, experiments):
    values = {sp: experiments(**l96(8, sp, "nnn"))[0].armse for sp in (100.0, 50.0, 25.0)}
    monotone = values[100.0] <= values[50.0] <= values[25.0]
    within = all(ref / 3 <= values[sp] <= 3 * ref for sp, ref in L96_F8_NNN.items())
    criterion(6, "sparsity ordering", monotone and within,
              ", ".join(f"{sp:g}%: {values[sp]:.3f} (ref {L96_F8_NNN[sp]})" for sp in values))


def test_criterion_07_unroll_study(criterion, experiments):
    k5 = experiments(**l96(4, 100, "nnn", K=5))[0].armse
    k1 = experiments(**l96(4, 100, "nnn", K=1))[0].armse
    criterion(7, "unroll study", k5 <= k1, f"K=5 {k5:.3f} (ref 0.346) vs K=1 {k1:.3f} (ref 0.618)")


@pytest.mark.extended
def test_criterion_08_kuramoto_sivashinsky(criterion, experiments):
    base = dict(system="kuramoto_sivashinsky", sigma=0.25, seed=0)
    full = experiments(**base, sparsity=100.0, method="nnn")[0].armse
    sparse_nnn = experiments(**base, sparsity=25.0, method="nnn")[0].armse
    sparse_lin = experiments(**base, sparsity=25.0, method="linear")[0].armse
    criterion(8, "KS reproduction", full <= 0.5 and sparse_nnn < sparse_lin,
              f"100% NNN {full:.3f} (ref 0.0736), 25% NNN {sparse_nnn:.3f} (ref 0.159) "
              f"vs linear {sparse_lin:.3f} (ref 1.19)")


@pytest.mark.extended
def test_criterion_09_kolmogorov(criterion, experiments):
    base = dict(system="kolmogorov", sigma=0.5, sparsity=100.0, seed=0,
                scale={"grid": evaluation.DESK_GRID})
    nnn = experiments(**base, method="nnn")[0]
    lin = experiments(**base, method="linear")[0]
    criterion(9, "Kolmogorov flow 32x32", nnn.armse < 0.5 * lin.armse and not nnn.diverged,
              f"NNN {nnn.armse:.3f} vs linear {lin.armse:.3f}, NNN diverged={nnn.diverged}")


def test_criterion_10_determinism(criterion, tmp_path):
    rows, blobs = [], []
    for run in ("a", "b"):
        cfg = ExperimentConfig(system="lorenz96", F=8.0, sigma=0.364, sparsity=50.0, K=2, epochs=3,
                               seed=11, scale={"burn_in": 20, "train_steps": 41, "test_steps": 40},
                               paths={"checkpoint": str(tmp_path / f"{run}.nnnc")})
        rows.append(evaluation.run_experiment(cfg))
        blobs.append((tmp_path / f"{run}.nnnc").read_bytes())
    same_bits = np.float64(rows[0].armse).tobytes() == np.float64(rows[1].armse).tobytes()
    criterion(10, "determinism", same_bits and blobs[0] == blobs[1],
              f"aRMSE {rows[0].armse!r} vs {rows[1].armse!r}, checkpoints identical={blobs[0] == blobs[1]}")
    load_checkpoint(tmp_path / "a.nnnc", expected_state_dim=40)
