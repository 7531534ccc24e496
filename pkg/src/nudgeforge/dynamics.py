"""Benchmark dynamical systems and their time integrators.

Three systems are provided: Lorenz 96 (classical RK4), Kuramoto-Sivashinsky
on [0, 32*pi) (ETDRK4 with contour-integral coefficients) and 2D Kolmogorov
flow in vorticity form (Crank-Nicolson / low-storage RK4 IMEX).

Each spectral solver has two routes. A fast route steps the spectral state
with plain numpy and is used for ground-truth generation. A physical-space
route is built from :mod:`nudgeforge.autodiff` primitives so that gradients
can flow through unrolled assimilation windows. Both compute the same map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .observation import Rng, gaussian_array


class BlowUpError(FloatingPointError):
    def __init__(self, message, step=None):
        self.step = step
        super().__init__(message)


BLOWUP_NORM = 1e8


# ---------------------------------------------------------------- Fourier utilities


def _check_fft_size(shape):
    if len(shape) not in (1, 2) or any(n < 2 or n & (n - 1) for n in shape):
        raise ValueError(f"unsupported transform size {shape}; need 1D or 2D powers of two")


def dft(x):
    """Unitary forward DFT of a vector or a 2D field."""
    x = np.asarray(x)
    _check_fft_size(x.shape)
    return np.fft.fftn(x, norm="ortho")


def idft(X):
    X = np.asarray(X)
    _check_fft_size(X.shape)
    return np.fft.ifftn(X, norm="ortho")


# ---------------------------------------------------------------- Lorenz 96


_L96_INDEX = {}


def _l96_index(n):
    if n not in _L96_INDEX:
        j = np.arange(n)
        _L96_INDEX[n] = ((j + 1) % n, (j - 2) % n, (j - 1) % n)
    return _L96_INDEX[n]


def l96_rhs(u, F):
    """Lorenz 96 tendency ``(u[n+1] - u[n-2]) * u[n-1] - u[n] + F`` (periodic).

    Recorded as a single primitive with a hand-written adjoint.
    """
    x = ad._raw(u)
    n = np.shape(x)[-1]
    if n < 4:
        raise ValueError(f"Lorenz 96 needs at least 4 variables, got {n}")
    ip1, im2, im1 = _l96_index(n)
    up1, um2, um1 = x[..., ip1], x[..., im2], x[..., im1]
    diff = up1 - um2
    out = diff * um1 - x + F

    def vjp(g):
        gu = -g
        a = um1 * g
        gu[..., ip1] += a
        gu[..., im2] -= a
        gu[..., im1] += diff * g
        return (gu,)

    return ad.custom_primitive("l96_rhs", out, (u,), vjp)


def _all_finite(x):
    return bool(np.all(np.isfinite(ad._raw(x))))


def rk4_step(rhs, u, dt, check=True):
    """Classical fourth-order Runge-Kutta step."""
    k1 = rhs(u)
    if check and not _all_finite(k1):
        raise BlowUpError("non-finite RK4 stage 1")
    k2 = rhs(u + k1 * (0.5 * dt))
    if check and not _all_finite(k2):
        raise BlowUpError("non-finite RK4 stage 2")
    k3 = rhs(u + k2 * (0.5 * dt))
    if check and not _all_finite(k3):
        raise BlowUpError("non-finite RK4 stage 3")
    k4 = rhs(u + k3 * dt)
    if check and not _all_finite(k4):
        raise BlowUpError("non-finite RK4 stage 4")
    incr = k1 + (k2 + k3) * 2.0 + k4
    return u + incr * (dt / 6.0)


# ---------------------------------------------------------------- Kuramoto-Sivashinsky


def etdrk4_coefficients(lin, h, n_contour=32):
    """Kassam-Trefethen ETDRK4 coefficients for a real diagonal linear symbol.

    The phi-functions are averaged over ``n_contour`` points on the upper half
    of a unit circle around each ``h * lin`` value, which avoids the
    cancellation of the closed forms near zero.
    """
    lin = np.asarray(lin, dtype=np.float64)
    roots = np.exp(1j * np.pi * (np.arange(1, n_contour + 1) - 0.5) / n_contour)
    LR = h * lin[..., None] + roots
    eLR = np.exp(LR)
    Q = h * np.real(np.mean((np.exp(LR / 2) - 1) / LR, axis=-1))
    f1 = h * np.real(np.mean((-4 - LR + eLR * (4 - 3 * LR + LR**2)) / LR**3, axis=-1))
    f2 = h * np.real(np.mean((2 + LR + eLR * (LR - 2)) / LR**3, axis=-1))
    f3 = h * np.real(np.mean((-4 - 3 * LR - LR**2 + eLR * (4 - LR)) / LR**3, axis=-1))
    return np.exp(h * lin), np.exp(h * lin / 2), Q, f1, f2, f3


def dealias_mask_1d(n):
    idx = np.arange(n // 2 + 1)
    return (idx < n / 3).astype(np.float64)


@dataclass
class KSWorkspace:
    """Precomputed wavenumbers and ETDRK4 tables for KS on [0, length)."""

    n: int = 128
    length: float = 32 * np.pi
    dt: float = 0.025
    n_contour: int = 32

    def __post_init__(self):
        self.k = 2 * np.pi / self.length * np.arange(self.n // 2 + 1)
        self.lin = self.k**2 - self.k**4
        self.mask = dealias_mask_1d(self.n)
        # -0.5 d/dx (u^2); odd symbol with the Nyquist entry masked out
        self.nl = -0.5j * self.k * self.mask
        self.E, self.E2, self.Q, self.f1, self.f2, self.f3 = etdrk4_coefficients(
            self.lin, self.dt, self.n_contour
        )
        self.x = self.length * np.arange(self.n) / self.n
        self._sym = {
            "E2": self.E2.astype(complex),
            "Qn": self.Q * self.nl,
            "E": self.E.astype(complex),
            "f1n": self.f1 * self.nl,
            "f2n": 2 * self.f2 * self.nl,
            "f3n": self.f3 * self.nl,
        }

    def nonlinear_hat(self, v_hat):
        u = np.fft.irfft(v_hat, n=self.n)
        return self.nl * np.fft.rfft(u * u)


def ks_step(ws, u_hat, dt=None):
    """One ETDRK4 step of ``u_t = -u u_x - u_xx - u_xxxx`` on the rfft state."""
    if dt is not None and dt != ws.dt:
        raise ValueError(f"workspace was built for dt={ws.dt}, got {dt}")
    if not np.all(np.isfinite(u_hat)):
        raise BlowUpError("NaN in Kuramoto-Sivashinsky spectral state")
    Nv = ws.nonlinear_hat(u_hat)
    a = ws.E2 * u_hat + ws.Q * Nv
    Na = ws.nonlinear_hat(a)
    b = ws.E2 * u_hat + ws.Q * Na
    Nb = ws.nonlinear_hat(b)
    c = ws.E2 * a + ws.Q * (2 * Nb - Nv)
    Nc = ws.nonlinear_hat(c)
    return ws.E * u_hat + ws.f1 * Nv + 2 * ws.f2 * (Na + Nb) + ws.f3 * Nc


def ks_step_physical(ws, u):
    """The same ETDRK4 step written with differentiable primitives on physical u."""
    s = ws._sym
    sc = ad.spectral_combine
    u2 = ad.mul(u, u)
    a = sc([u, u2], [s["E2"], s["Qn"]])
    a2 = ad.mul(a, a)
    b = sc([u, a2], [s["E2"], s["Qn"]])
    b2 = ad.mul(b, b)
    c = sc([a, b2, u2], [s["E2"], 2 * s["Qn"], -s["Qn"]])
    c2 = ad.mul(c, c)
    return sc([u, u2, a2, b2, c2], [s["E"], s["f1n"], s["f2n"], s["f2n"], s["f3n"]])


def ks_initial_condition(ws):
    x = ws.x
    return np.cos(x / 16) * (1 + np.sin(x / 16))


# ---------------------------------------------------------------- Kolmogorov flow

# Low-storage Crank-Nicolson / RK4 IMEX tableau (Carpenter-Kennedy explicit part).
CNRK4_ALPHAS = (0.0, 0.1496590219993, 0.3704009573644, 0.6222557631345, 0.9582821306748, 1.0)
CNRK4_BETAS = (0.0, -0.4178904745, -1.192151694643, -1.697784692471, -1.514183444257)
CNRK4_GAMMAS = (0.1496590219993, 0.3792103129999, 0.8229550293869, 0.6994504559488, 0.1530572479681)


@dataclass
class KolmogorovWorkspace:
    """Spectral operators for vorticity-form Kolmogorov flow on [0, 2*pi)^2.

    Fields are stored as ``w[iy, ix]``; axis -1 is x.
    """

    n: int = 64
    nu: float = 1e-2
    drag: float = 0.1
    forcing_wavenumber: int = 4
    dt: float = 7.01e-3

    def __post_init__(self):
        n = self.n
        self.kx = np.fft.rfftfreq(n, 1.0 / n)[None, :]
        self.ky = np.fft.fftfreq(n, 1.0 / n)[:, None]
        k2 = self.kx**2 + self.ky**2
        self.k2 = k2
        self.inv_k2 = np.where(k2 > 0, 1.0 / np.where(k2 > 0, k2, 1.0), 0.0)
        self.mask = ((np.abs(self.kx) < n / 3) & (np.abs(self.ky) < n / 3)).astype(np.float64)
        self.lin = -self.nu * k2 - self.drag
        grid = 2 * np.pi * np.arange(n) / n
        self.x = grid[None, :]
        self.y = grid[:, None]
        kf = self.forcing_wavenumber
        # curl of (sin(kf y), 0) is -kf cos(kf y)
        self.forcing = np.broadcast_to(-kf * np.cos(kf * self.y), (n, n)).copy()
        self.forcing_hat = np.fft.rfft2(self.forcing)
        dx = 1j * self.kx * self.mask
        dy = 1j * self.ky * self.mask
        self.sym_u = dy * self.inv_k2  # u = d(psi)/dy, psi = w / |k|^2
        self.sym_v = -dx * self.inv_k2
        self.sym_wx = dx
        self.sym_wy = dy
        self.zero_mean = np.ones_like(k2)
        self.zero_mean[0, 0] = 0.0
        self.stages = []
        for a0, a1, g in zip(CNRK4_ALPHAS[:-1], CNRK4_ALPHAS[1:], CNRK4_GAMMAS):
            mu = 0.5 * self.dt * (a1 - a0)
            denom = 1.0 - mu * self.lin
            self.stages.append(((1.0 + mu * self.lin) / denom, g * self.dt / denom))

    def _advection_symbols(self, cdtype):
        key = np.dtype(cdtype).name
        cache = self.__dict__.setdefault("_adv_cache", {})
        if key not in cache:
            cache[key] = np.stack([self.sym_u, self.sym_v, self.sym_wx, self.sym_wy]).astype(cdtype)
        return cache[key]

    def velocity_hat(self, w_hat):
        return self.sym_u * w_hat, self.sym_v * w_hat

    def explicit_hat(self, w_hat):
        n = self.n
        u = np.fft.irfft2(self.sym_u * w_hat, s=(n, n))
        v = np.fft.irfft2(self.sym_v * w_hat, s=(n, n))
        wx = np.fft.irfft2(self.sym_wx * w_hat, s=(n, n))
        wy = np.fft.irfft2(self.sym_wy * w_hat, s=(n, n))
        return -self.mask * np.fft.rfft2(u * wx + v * wy) + self.forcing_hat

    def random_initial_condition(self, seed, kmax=16):
        """Band-limited random divergence-free flow scaled to unit max speed."""
        rng = Rng(seed).substream("kolmogorov-initial")
        n = self.n
        noise = gaussian_array(rng, (n, n))
        psi_hat = np.fft.rfft2(noise)
        band = (self.k2 <= kmax**2) & (self.k2 > 0)
        psi_hat = np.where(band, psi_hat, 0.0)
        u = np.fft.irfft2(1j * self.ky * psi_hat, s=(n, n))
        v = np.fft.irfft2(-1j * self.kx * psi_hat, s=(n, n))
        speed = np.sqrt(u**2 + v**2).max()
        w_hat = self.k2 * psi_hat / speed
        return np.fft.irfft2(w_hat, s=(n, n))


def _check_zero_mean(w_hat, n):
    # rfft2 DC coefficient equals n^2 times the mean
    mean = abs(w_hat[..., 0, 0]) / (n * n)
    scale = 1.0 + np.max(np.abs(w_hat)) / (n * n)
    if np.any(mean > 1e-9 * scale):
        raise ValueError("vorticity must have zero spatial mean (streamfunction undefined)")


def kolmogorov_step(ws, w_hat, dt=None):
    """One IMEX step on the rfft2 vorticity state."""
    if dt is not None and dt != ws.dt:
        raise ValueError(f"workspace was built for dt={ws.dt}, got {dt}")
    if not np.all(np.isfinite(w_hat)):
        raise BlowUpError("NaN in Kolmogorov vorticity state")
    _check_zero_mean(w_hat, ws.n)
    h = 0.0
    for (implicit, explicit), beta in zip(ws.stages, CNRK4_BETAS):
        h = ws.explicit_hat(w_hat) + beta * h
        w_hat = implicit * w_hat + explicit * h
    return w_hat


def kolmogorov_advection(ws, w):
    """``u * w_x + v * w_y`` of a physical vorticity field (dealiased derivatives).

    Recorded as a single primitive: one forward transform feeds all four
    derived fields, and the adjoint sums their conjugate-symbol pullbacks.
    """
    x = ad._raw(w)
    n = ws.n
    cdtype = np.complex64 if x.dtype == np.float32 else np.complex128
    syms = ws._advection_symbols(cdtype)
    fields = np.fft.irfft2(np.fft.rfft2(x)[..., None, :, :] * syms, s=(n, n)).astype(x.dtype, copy=False)
    u, v, wx, wy = (fields[..., i, :, :] for i in range(4))
    out = u * wx + v * wy

    def vjp(g):
        pulls = np.stack([g * wx, g * wy, g * u, g * v], axis=-3)
        gh = np.sum(np.fft.rfft2(pulls) * np.conj(syms), axis=-3)
        return (np.fft.irfft2(gh, s=(n, n)).astype(x.dtype, copy=False),)

    return ad.custom_primitive("kolmogorov_advection", out, (w,), vjp)


def kolmogorov_step_physical(ws, w):
    """The same IMEX step written with differentiable primitives on a physical field."""
    sc = ad.spectral_combine
    h = None
    for (implicit, explicit), beta in zip(ws.stages, CNRK4_BETAS):
        tend = ad.add(ad.neg(kolmogorov_advection(ws, w)), ws.forcing)
        h = tend if h is None else ad.add(tend, ad.scale(h, beta))
        # explicit increment is dealiased except for the forcing, which is band-limited
        w = sc([w, h], [implicit, explicit * ws.mask])
    return w


# ---------------------------------------------------------------- system models


@dataclass
class SystemModel:
    """A benchmark system with its inner step and observation interval.

    ``extents`` gives the spatial layout of the flat state (``(40,)``,
    ``(128,)`` or ``(n, n)``).
    """

    name: str
    extents: tuple
    dt: float
    inner_steps: int
    constants: dict = field(default_factory=dict)
    workspace: object = None

    def __post_init__(self):
        obs = self.dt * self.inner_steps
        if abs(obs - self.obs_interval) > math.ulp(self.obs_interval):
            raise ValueError("dt * inner_steps does not match the observation interval")

    @property
    def dim(self):
        return int(np.prod(self.extents))

    @property
    def obs_interval(self):
        return self.constants.get("obs_interval", self.dt * self.inner_steps)

    def step(self, u):
        """One inner solver step on a flat (possibly batched) state."""
        if self.name == "lorenz96":
            F = self.constants["F"]
            return rk4_step(lambda x: l96_rhs(x, F), u, self.dt, check=False)
        if self.name == "kuramoto_sivashinsky":
            return ks_step_physical(self.workspace, u)
        if self.name == "kolmogorov":
            n = self.workspace.n
            lead = np.shape(ad._raw(u))[:-1]
            w = ad.reshape(u, lead + (n, n))
            w = kolmogorov_step_physical(self.workspace, w)
            return ad.reshape(w, lead + (n * n,))
        raise ValueError(f"unknown system {self.name}")

    def project(self, u):
        """Map an arbitrary state onto the admissible set (zero-mean vorticity)."""
        if self.name != "kolmogorov":
            return u
        n = self.workspace.n
        lead = np.shape(ad._raw(u))[:-1]
        w = ad.spectral_combine([ad.reshape(u, lead + (n, n))], [self.workspace.zero_mean])
        return ad.reshape(w, lead + (n * n,))

    def advance(self, u):
        """Integrate over one observation interval."""
        if not isinstance(u, ad.Tensor):
            return self.advance_fast(u)
        u = self.project(u)
        for _ in range(self.inner_steps):
            u = self.step(u)
        return u

    def advance_fast(self, u):
        """Non-differentiable route on plain arrays (spectral state internally)."""
        u = np.asarray(u)
        if self.name == "lorenz96":
            F = self.constants["F"]
            for _ in range(self.inner_steps):
                u = rk4_step(lambda x: l96_rhs(x, F), u, self.dt)
            return u
        dtype = u.dtype
        ws = self.workspace
        if self.name == "kuramoto_sivashinsky":
            v = np.fft.rfft(u, axis=-1)
            for _ in range(self.inner_steps):
                v = ks_step(ws, v)
            return np.fft.irfft(v, n=ws.n, axis=-1).astype(dtype, copy=False)
        if self.name == "kolmogorov":
            n = ws.n
            w = np.fft.rfft2(u.reshape(u.shape[:-1] + (n, n)))
            w[..., 0, 0] = 0.0
            for _ in range(self.inner_steps):
                w = kolmogorov_step(ws, w)
            return np.fft.irfft2(w, s=(n, n)).reshape(u.shape).astype(dtype, copy=False)
        raise ValueError(f"unknown system {self.name}")

    def default_initial_condition(self, seed=0):
        if self.name == "lorenz96":
            u = np.full(self.dim, float(self.constants["F"]))
            u[0] += 0.01
            return u
        if self.name == "kuramoto_sivashinsky":
            return ks_initial_condition(self.workspace)
        return self.workspace.random_initial_condition(seed).ravel()


def lorenz96(n=40, F=8.0):
    return SystemModel("lorenz96", (n,), dt=0.01, inner_steps=15,
                       constants={"F": float(F), "obs_interval": 0.15})


def kuramoto_sivashinsky(n=128):
    ws = KSWorkspace(n=n, dt=0.025)
    return SystemModel("kuramoto_sivashinsky", (n,), dt=0.025, inner_steps=10,
                       constants={"length": ws.length, "obs_interval": 0.25}, workspace=ws)


def kolmogorov(n=64, nu=1e-2):
    ws = KolmogorovWorkspace(n=n, nu=nu, dt=7.01e-3)
    return SystemModel("kolmogorov", (n, n), dt=7.01e-3, inner_steps=10,
                       constants={"nu": nu, "drag": ws.drag, "forcing_wavenumber": 4,
                                  "obs_interval": 7.01e-2},
                       workspace=ws)


def generate_trajectory(model, u0, n_obs_steps, burn_in=0):
    """Observation-interval snapshots after discarding ``burn_in`` intervals.

    Returns an array of shape (n_obs_steps, dim) holding the states at
    ``t_k = k * dt_obs`` for ``k = burn_in + 1, ..., burn_in + n_obs_steps``.
    """
    u = np.array(u0, dtype=np.float64)
    if u.shape != (model.dim,):
        raise ValueError(f"initial state has shape {u.shape}, model needs ({model.dim},)")
    out = np.empty((n_obs_steps, model.dim))
    for k in range(burn_in + n_obs_steps):
        try:
            u = model.advance_fast(u)
        except BlowUpError as exc:
            raise BlowUpError(f"{exc} at observation step {k + 1}", step=k + 1) from None
        norm = np.linalg.norm(u)
        if not np.isfinite(norm) or norm > BLOWUP_NORM:
            raise BlowUpError(f"trajectory blew up at observation step {k + 1} (norm {norm:.3g})",
                              step=k + 1)
        if k >= burn_in:
            out[k - burn_in] = u
    return out
