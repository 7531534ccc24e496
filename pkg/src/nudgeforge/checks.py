"""Built-in verification suites used by the ``gradcheck`` and ``selftest`` commands."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import dynamics
from .assimilation import NudgeOperator
from .networks import DnoSpec, dno_forward, init_params
from .observation import ObservationOperator
from .training import unrolled_loss


def _probe(shape, rng):
    return rng.standard_normal(shape)


def _linear_functional(out, weights):
    # weighted sum keeps the check well conditioned for every primitive
    return ad.sum(ad.mul(out, weights))


def gradcheck_cases(seed=0):
    """Named (fn, params) pairs covering every primitive, the DNO and an unrolled loss."""
    rng = np.random.default_rng(seed)
    cases = {}

    def unary(name, op, shape=(3, 5)):
        x = _probe(shape, rng)
        out_shape = np.shape(op(x))
        w = _probe(out_shape, rng)
        cases[name] = (lambda p: _linear_functional(op(p["x"]), w), {"x": x})

    def binary(name, op, sa=(3, 5), sb=(3, 5)):
        a, b = _probe(sa, rng), _probe(sb, rng)
        w = _probe(np.shape(op(a, b)), rng)
        cases[name] = (lambda p: _linear_functional(op(p["a"], p["b"]), w), {"a": a, "b": b})

    binary("add", ad.add)
    binary("sub", ad.sub)
    binary("mul", ad.mul)
    unary("scale", lambda x: ad.scale(x, -1.7))
    unary("neg", ad.neg)
    unary("tanh", ad.tanh)
    x = _probe((4, 3), rng)
    cases["sum"] = (lambda p: ad.tanh(ad.sum(p["x"])), {"x": x})
    cases["mean"] = (lambda p: ad.tanh(ad.mean(p["x"])), {"x": x.copy()})
    binary("concat", lambda a, b: ad.concat([a, b], axis=-1), (2, 3), (2, 4))
    unary("reshape", lambda x: ad.reshape(x, (5, 3)))
    unary("roll", lambda x: ad.roll(x, 2, axis=-1))
    unary("take", lambda x: ad.take(x, np.array([4, 0, 2])))
    W, xv, b = _probe((4, 6), rng), _probe((3, 6), rng), _probe(4, rng)
    wv = _probe((3, 4), rng)
    cases["matvec"] = (lambda p: _linear_functional(ad.matvec(p["W"], p["x"], p["b"]), wv),
                       {"W": W, "x": xv, "b": b})
    binary("channel_combine", ad.channel_combine, (2, 3), (2, 3, 8))

    sym1 = np.fft.rfft(_probe(16, rng))
    sym1b = 1j * np.arange(9)
    unary("spectral_combine_1d", lambda x: ad.spectral_combine([x, ad.mul(x, x)], [sym1, sym1b]),
          (2, 16))
    sym2 = np.fft.rfft2(_probe((8, 8), rng))
    unary("spectral_combine_2d", lambda x: ad.spectral_combine([x], [sym2]), (2, 8, 8))

    for nd, conv, convt in ((1, ad.conv1d_circular, ad.conv_transpose1d_circular),
                            (2, ad.conv2d_circular, ad.conv_transpose2d_circular)):
        n = 8 if nd == 1 else 6
        sp = (n,) * nd
        X, Wc = _probe((2, 3) + sp, rng), _probe((4, 3) + (3,) * nd, rng)
        for stride in (1, 2):
            bc = _probe((4,) + tuple(s // stride for s in sp), rng)
            out = conv(X, Wc, bc, stride)
            wo = _probe(np.shape(ad._raw(out)), rng)
            cases[f"conv{nd}d_stride{stride}"] = (
                lambda p, conv=conv, stride=stride, wo=wo:
                _linear_functional(conv(p["X"], p["W"], p["b"], stride), wo),
                {"X": X, "W": Wc, "b": bc})
        Y, Wt = _probe((2, 4) + tuple(s // 2 for s in sp), rng), _probe((4, 3) + (3,) * nd, rng)
        bt = _probe((3,) + sp, rng)
        out = convt(Y, Wt, bt, 2)
        wo = _probe(np.shape(ad._raw(out)), rng)
        cases[f"conv_transpose{nd}d_stride2"] = (
            lambda p, convt=convt, wo=wo: _linear_functional(convt(p["Y"], p["W"], p["b"], 2), wo),
            {"Y": Y, "W": Wt, "b": bt})

    u = _probe((2, 8), rng)
    cases["l96_rhs"] = (lambda p: ad.mean(ad.mul(dynamics.l96_rhs(p["u"], 1.0),
                                                 dynamics.l96_rhs(p["u"], 1.0))), {"u": u})

    kws = dynamics.KolmogorovWorkspace(n=8)
    w = np.stack([kws.random_initial_condition(seed, kmax=3), kws.random_initial_condition(seed + 1, kmax=3)])
    wo = _probe(w.shape, rng)
    cases["kolmogorov_advection"] = (
        lambda p, wo=wo: _linear_functional(dynamics.kolmogorov_advection(kws, p["w"]), wo), {"w": w})
    ksw = dynamics.KSWorkspace(n=16, length=2 * np.pi * 16 / 6)
    x = np.cos(ksw.x * 6 / 16)[None] + 0.1 * _probe((2, 16), rng)
    wo = _probe(x.shape, rng)
    cases["ks_step_physical"] = (
        lambda p, wo=wo: _linear_functional(dynamics.ks_step_physical(ksw, p["u"]), wo), {"u": x})

    for name, extents, factor in (("dno_1d", (8,), 2), ("dno_2d", (4, 4), 2)):
        spec = DnoSpec(extents, factor, channels=3, kernel=3)
        params = {k: v.astype(np.float64) + 0.1 * _probe(v.shape, rng)
                  for k, v in init_params(spec, seed, dtype=np.float64).items()}
        state = _probe((2, spec.state_dim), rng)
        innov = _probe((2, spec.obs_dim), rng)
        wo = _probe((2, spec.state_dim), rng)
        cases[name] = (lambda p, spec=spec, state=state, innov=innov, wo=wo:
                       _linear_functional(dno_forward(p, spec, state, innov), wo), params)

    cases["unrolled_window_k2"] = unrolled_case(seed)
    return cases


def unrolled_case(seed=0, K=2):
    """K-step predict/correct loss on an 8-dimensional Lorenz 96 toy system."""
    rng = np.random.default_rng(seed + 1)
    model = dynamics.lorenz96(8, 8.0)
    H = ObservationOperator((8,), 2)
    spec = DnoSpec((8,), 2, channels=3, kernel=3)
    params = init_params(spec, seed, dtype=np.float64)
    truth = dynamics.generate_trajectory(model, model.default_initial_condition(), K + 1,
                                         burn_in=50)
    u0 = (truth[0] + 0.1 * rng.standard_normal(8))[None]
    targets = truth[None, 1:]
    ys = (truth[1:, ::2] + 0.1 * rng.standard_normal((K, 4)))[None]
    proto = NudgeOperator.neural(spec, params, H)

    def fn(p):
        loss, _ = unrolled_loss(proto.with_params(p), model, u0, targets, ys)
        return loss

    return fn, params


def gradcheck_suite(seed=0, tolerance=1e-5, max_entries=40):
    """Run every gradient check; returns ``[(name, max_rel_error, passed)]``."""
    results = []
    for name, (fn, params) in gradcheck_cases(seed).items():
        report = ad.gradient_check(fn, params, tolerance=tolerance, max_entries=max_entries,
                                   seed=seed)
        err = max(v[0] for k, v in report.items() if k != "all_passed")
        results.append((name, err, report["all_passed"]))
    return results


# ---------------------------------------------------------------- integrator properties


def rk4_order(F=8.0, T=1.0, dts=(0.02, 0.01, 0.005)):
    """Observed convergence order of RK4 on Lorenz 96 against a fine reference."""
    model = dynamics.lorenz96(40, F)
    u0 = dynamics.generate_trajectory(model, model.default_initial_condition(), 1, burn_in=20)[0]
    rhs = lambda x: dynamics.l96_rhs(x, F)

    def integrate(dt):
        u = u0.copy()
        for _ in range(int(round(T / dt))):
            u = dynamics.rk4_step(rhs, u, dt)
        return u

    ref = integrate(dts[-1] / 16)
    errs = [np.linalg.norm(integrate(dt) - ref) for dt in dts]
    slopes = [np.log2(errs[i] / errs[i + 1]) / np.log2(dts[i] / dts[i + 1])
              for i in range(len(dts) - 1)]
    return float(np.mean(slopes))


def ks_dispersion_error(mode=8, amplitude=1e-8):
    """Relative one-step error of a tiny single Fourier mode against exp(h * L_k)."""
    ws = dynamics.KSWorkspace()
    u_hat = np.zeros(ws.n // 2 + 1, dtype=complex)
    u_hat[mode] = amplitude * ws.n
    out = dynamics.ks_step(ws, u_hat)
    exact = ws.E[mode] * u_hat[mode]
    return float(abs(out[mode] - exact) / abs(exact))


def ks_mean_drift(steps=1000):
    ws = dynamics.KSWorkspace()
    u = dynamics.ks_initial_condition(ws) + 0.3
    v = np.fft.rfft(u)
    m0 = u.mean()
    for _ in range(steps):
        v = dynamics.ks_step(ws, v)
    return float(abs(np.fft.irfft(v, n=ws.n).mean() - m0))


def kolmogorov_properties(n=32, steps=50, seed=0):
    """Max velocity divergence and |mean vorticity| along a short trajectory."""
    ws = dynamics.KolmogorovWorkspace(n=n)
    w = np.fft.rfft2(ws.random_initial_condition(seed))
    div = mean = 0.0
    for _ in range(steps):
        w = dynamics.kolmogorov_step(ws, w)
        uh, vh = ws.velocity_hat(w)
        d = np.fft.irfft2(1j * ws.kx * uh + 1j * ws.ky * vh, s=(n, n))
        div = max(div, float(np.abs(d).max()))
        mean = max(mean, float(abs(np.fft.irfft2(w, s=(n, n)).mean())))
    return div, mean


def transpose_adjoint_error(seed=0):
    """|<conv(x), y> - <x, conv_transpose(y)>| for the stride-2 pair."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((1, 3, 16))
    Y = rng.standard_normal((1, 4, 8))
    W = rng.standard_normal((4, 3, 5))
    lhs = np.sum(ad._raw(ad.conv1d_circular(X, W, stride=2)) * Y)
    # the transposed layout (Cin, Cout, k) of Y -> X is the same array
    rhs = np.sum(X * ad._raw(ad.conv_transpose1d_circular(Y, W, stride=2)))
    return float(abs(lhs - rhs) / max(abs(lhs), 1e-300))


def selftest():
    """Fast property gates; returns ``[(name, value, threshold_text, passed)]``."""
    order = rk4_order()
    disp = ks_dispersion_error()
    drift = ks_mean_drift()
    div, mean = kolmogorov_properties()
    adj = transpose_adjoint_error()
    return [
        ("rk4_order", order, "in [3.7, 4.3]", 3.7 <= order <= 4.3),
        ("ks_single_mode_dispersion", disp, "< 1e-9", disp < 1e-9),
        ("ks_mean_conservation_1000_steps", drift, "< 1e-12", drift < 1e-12),
        ("kolmogorov_divergence", div, "< 1e-10", div < 1e-10),
        ("kolmogorov_zero_mean", mean, "< 1e-12", mean < 1e-12),
        ("conv_transpose_adjoint", adj, "< 1e-12", adj < 1e-12),
    ]
