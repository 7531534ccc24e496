"""Predict/correct nudging loop, nudge operators, and a linear-observer check."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .dynamics import BLOWUP_NORM, BlowUpError, rk4_step
from .networks import DnoSpec, dno_forward
from .observation import subsample


@dataclass
class NudgeOperator:
    """Feedback term driven by the innovation ``y - H(state)``.

    ``kind == "linear"`` applies a gain matrix of shape (d, p);
    ``kind == "neural"`` evaluates the branch/trunk operator described by
    ``spec``.
    """

    kind: str
    params: dict
    H: object
    spec: DnoSpec = None

    def __post_init__(self):
        if self.kind == "linear":
            shape = np.shape(ad._raw(self.params["gain"]))
            if shape != (self.H.state_dim, self.H.obs_dim):
                raise ValueError(f"gain has shape {shape}, expected "
                                 f"{(self.H.state_dim, self.H.obs_dim)}")
        elif self.kind == "neural":
            if self.spec is None:
                raise ValueError("neural nudging needs a DnoSpec")
            if self.spec.state_dim != self.H.state_dim or self.spec.obs_dim != self.H.obs_dim:
                raise ValueError("DnoSpec does not match the observation operator")
        else:
            raise ValueError(f"unknown nudge kind {self.kind!r}")

    @classmethod
    def linear(cls, H, gain=None, dtype=np.float32):
        if gain is None:
            gain = np.zeros((H.state_dim, H.obs_dim), dtype=dtype)
        return cls("linear", {"gain": gain}, H)

    @classmethod
    def neural(cls, spec, params, H):
        return cls("neural", params, H, spec)

    def with_params(self, params):
        return NudgeOperator(self.kind, params, self.H, self.spec)

    def __call__(self, state, y):
        innovation = ad.sub(y, subsample(state, self.H))
        if self.kind == "linear":
            return ad.matvec(self.params["gain"], innovation)
        return dno_forward(self.params, self.spec, state, innovation)


def predict(model, u):
    """Free model evolution over one observation interval."""
    return model.advance(u)


def correct(nudge, u_check, y, dt):
    """``u_check + dt * G(u_check)(y)``."""
    if dt == 0:
        return u_check
    return ad.add(u_check, ad.scale(nudge(u_check, y), dt))


@dataclass
class AssimilationRun:
    """States ``[u~(t_0), u~(t_1), ...]``; ``analysis`` drops the initial state."""

    states: np.ndarray
    n_observations: int
    diverged: bool = False
    diverged_at: int = None

    @property
    def analysis(self):
        return self.states[1:]


def run_assimilation(model, H, nudge, u0, observations, dtype=None):
    """Alternate predict and correct over ``observations`` (shape (T, p)).

    A run that leaves the finite range (or exceeds the blow-up norm) is
    flagged and truncated at the last good state.
    """
    u = np.array(u0, dtype=dtype or np.asarray(u0).dtype)
    observations = np.asarray(observations, dtype=u.dtype)
    if observations.ndim != 2 or (len(observations) and observations.shape[1] != H.obs_dim):
        raise ValueError(f"observations must be (T, {H.obs_dim}), got {observations.shape}")
    dt = model.obs_interval
    states = [u]
    diverged_at = None
    with np.errstate(over="ignore", invalid="ignore"):
        for k, y in enumerate(observations):
            try:
                u_check = predict(model, u)
                u = np.asarray(correct(nudge, u_check, y, dt), dtype=states[0].dtype)
            except BlowUpError:
                diverged_at = k + 1
                break
            norm = np.linalg.norm(u)
            if not np.isfinite(norm) or norm > BLOWUP_NORM:
                diverged_at = k + 1
                break
            states.append(u)
    return AssimilationRun(np.array(states), len(observations),
                           diverged=diverged_at is not None, diverged_at=diverged_at)


def free_run(model, u0, n_steps):
    u = np.asarray(u0)
    out = [u]
    for _ in range(n_steps):
        u = model.advance(u)
        out.append(u)
    return np.array(out)


@dataclass
class ObserverDecay:
    rate: float
    max_real_eigenvalue: float
    times: np.ndarray
    errors: np.ndarray


def verify_linear_observer_decay(A, H_L, G_L, E0, horizon, dt=1e-2, fit_from=0.5):
    """Simulate ``dE/dt = (A - G_L H_L) E`` and fit its exponential decay rate.

    The rate is the least-squares slope of ``log ||E(t)||`` over the tail
    ``t >= fit_from * horizon`` of the window, where the slowest mode
    dominates.
    """
    A, H_L, G_L = (np.atleast_2d(np.asarray(m, dtype=np.float64)) for m in (A, H_L, G_L))
    closed = A - G_L @ H_L
    lam = float(np.max(np.linalg.eigvals(closed).real))
    if lam >= 0:
        raise ValueError(f"closed loop is not Hurwitz (max real eigenvalue {lam:.4g})")
    n = int(round(horizon / dt))
    E = np.asarray(E0, dtype=np.float64).reshape(-1)
    times = dt * np.arange(n + 1)
    errors = np.empty(n + 1)
    errors[0] = np.linalg.norm(E)
    for i in range(n):
        E = rk4_step(lambda e: closed @ e, E, dt)
        errors[i + 1] = np.linalg.norm(E)
    sel = (times >= fit_from * horizon) & (errors > 1e-280)
    if not np.any(errors > 0):
        return ObserverDecay(-np.inf, lam, times, errors)
    if sel.sum() < 2:
        raise ValueError("error vanished before the fitting window; shorten the horizon")
    slope = np.polyfit(times[sel], np.log(errors[sel]), 1)[0]
    return ObserverDecay(float(slope), lam, times, errors)
