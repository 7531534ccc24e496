"""Training of nudging operators by backpropagation through unrolled windows.

Each window starts from a noise-perturbed true state, alternates ``K``
predict/correct steps, and is scored by the mean squared deviation from the
true states. Windows are evaluated as one batch (optionally in memory-bounded
chunks whose gradients are summed), and the parameters take one Adam step per
epoch on the mean gradient.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import fileformats
from .assimilation import NudgeOperator, correct, predict
from .dynamics import BLOWUP_NORM
from .networks import DnoSpec, init_params
from .observation import Rng, gaussian_array, observe

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    K: int = 5
    epochs: int = 300
    lr: float = 1e-3
    sigma: float = 0.0
    seed: int = 0
    method: str = "nnn"
    channels: int = 20
    system: str = ""
    sparsity: float = 100.0
    chunk_size: int = None
    minibatch: bool = False
    dtype: str = "float32"
    max_skip_fraction: float = 0.01

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("unroll length K must be >= 1")
        if self.method not in ("nnn", "linear"):
            raise ValueError(f"unknown method {self.method!r}")

    def digest(self):
        text = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class Window:
    anchor: int
    states: np.ndarray        # (K + 1, d): u(t_{i,0}) ... u(t_{i,K})
    observations: np.ndarray  # (K, p):     y(t_{i,1}) ... y(t_{i,K})


def make_windows(snapshots, observations, K):
    """Non-overlapping windows; window ``i`` starts at state index ``i*K``."""
    if K < 1:
        raise ValueError("unroll length K must be >= 1")
    M = len(snapshots)
    if len(observations) != M:
        raise ValueError("need one observation per snapshot")
    if M < K + 1:
        raise ValueError(f"{M} snapshots cannot fill a window of length {K}")
    n_windows = (M - 1) // K
    return [Window(i * K, np.asarray(snapshots[i * K: i * K + K + 1]),
                   np.asarray(observations[i * K + 1: i * K + K + 1]))
            for i in range(n_windows)]


def _stack(windows, dtype):
    states = np.stack([w.states for w in windows]).astype(dtype)
    obs = np.stack([w.observations for w in windows]).astype(dtype)
    return states, obs


def unrolled_loss(nudge, model, u0, targets, ys):
    """Mean squared error of a batch of unrolled predict/correct windows.

    ``u0`` is (B, d), ``targets`` (B, K, d) and ``ys`` (B, K, p). Returns the
    loss and a per-window finiteness mask.
    """
    K = targets.shape[1]
    dt = model.obs_interval
    # a constant tensor keeps every step on the unchecked differentiable path,
    # so blow-ups surface in the mask instead of raising
    u = u0 if isinstance(u0, ad.Tensor) else ad.Tensor(np.asarray(u0))
    total = None
    ok = np.ones(len(u0), dtype=bool)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(K):
            u = correct(nudge, predict(model, u), ys[:, k], dt)
            raw = ad._raw(u)
            ok &= np.all(np.isfinite(raw), axis=-1) & (np.linalg.norm(raw, axis=-1) < BLOWUP_NORM)
            diff = ad.sub(u, targets[:, k])
            term = ad.mean(ad.mul(diff, diff))
            total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / K), ok


def window_loss(nudge, window, model, sigma, rng):
    """Loss of one window from a freshly perturbed initial state."""
    u0 = window.states[0] + sigma * gaussian_array(rng, window.states[0].shape)
    dtype = window.states.dtype
    loss, _ = unrolled_loss(nudge, model, u0[None].astype(dtype),
                            window.states[None, 1:], window.observations[None])
    return loss


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns new params and a new state."""
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=p.dtype)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        m = beta1 * state.m[k] + (1 - beta1) * g
        v = beta2 * state.v[k] + (1 - beta2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        new_p[k] = (p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        new_m[k] = m.astype(p.dtype)
        new_v[k] = v.astype(p.dtype)
    return new_p, AdamState(new_m, new_v, t)


@dataclass
class Checkpoint:
    kind: str
    params: dict
    spec: DnoSpec
    seed: int
    config_digest: str
    state_dim: int
    obs_factor: int
    extents: tuple
    loss_curve: list = field(default_factory=list)

    def header(self):
        dtype = next(iter(self.params.values())).dtype.name if self.params else "float32"
        return {
            "kind": self.kind,
            "spec": self.spec.to_dict() if self.spec is not None else None,
            "seed": self.seed,
            "config_digest": self.config_digest,
            "dtype": dtype,
            "state_dim": self.state_dim,
            "obs_factor": self.obs_factor,
            "extents": list(self.extents),
        }

    def nudge(self, H):
        if self.kind == "linear":
            return NudgeOperator.linear(H, self.params["gain"])
        return NudgeOperator.neural(self.spec, self.params, H)


def save_checkpoint(ckpt, path):
    with open(path, "wb") as f:
        f.write(fileformats.checkpoint_bytes(ckpt.header(), ckpt.params))


def load_checkpoint(path, expected_state_dim=None):
    with open(path, "rb") as f:
        header, tensors = fileformats.parse_checkpoint(f.read())
    if expected_state_dim is not None and header["state_dim"] != expected_state_dim:
        raise fileformats.FormatError(
            f"checkpoint is for state dimension {header['state_dim']}, "
            f"requested {expected_state_dim}")
    spec = DnoSpec.from_dict(header["spec"]) if header["spec"] else None
    if spec is not None and spec.state_dim != header["state_dim"]:
        raise fileformats.FormatError("checkpoint spec disagrees with its state dimension")
    return Checkpoint(header["kind"], tensors, spec, header["seed"], header["config_digest"],
                      header["state_dim"], header["obs_factor"], tuple(header["extents"]))


def write_loss_curve(path, curve):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "mean_loss", "skipped_windows"])
        for epoch, loss, skipped in curve:
            w.writerow([epoch, repr(float(loss)), skipped])


def initial_params(config, H):
    dtype = np.dtype(config.dtype)
    if config.method == "linear":
        return {"gain": np.zeros((H.state_dim, H.obs_dim), dtype=dtype)}, None
    spec = DnoSpec(H.extents, H.factor, channels=config.channels)
    return init_params(spec, config.seed, dtype=dtype), spec


def _chunk_grad(proto, params, model, u0, targets, ys):
    leaves = {k: ad.Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    tape = ad.Tape()
    with tape:
        loss, ok = unrolled_loss(proto.with_params(leaves), model, u0, targets, ys)
    if not ok.all():
        tape.clear()
        return None, None, ok
    grads = ad.backward(tape, loss, leaves)
    tape.clear()
    return float(loss.data), grads, ok


def train(config, model, H, snapshots, callback=None):
    """Train a nudging operator on ``snapshots`` (burn-in already removed)."""
    dtype = np.dtype(config.dtype)
    root = Rng(config.seed)
    obs_rng = root.substream("train-observations")
    pert_rng = root.substream("train-perturbations")
    snapshots = np.asarray(snapshots)
    ys_all = observe(snapshots, H, config.sigma, obs_rng)
    windows = make_windows(snapshots, ys_all, config.K)
    states, obs = _stack(windows, dtype)
    n_win = len(windows)

    params, spec = initial_params(config, H)
    proto = (NudgeOperator.linear(H, params["gain"]) if config.method == "linear"
             else NudgeOperator.neural(spec, params, H))
    adam = AdamState.zeros_like(params)
    chunk = config.chunk_size or n_win
    bounds = [(s, min(s + chunk, n_win)) for s in range(0, n_win, chunk)]
    curve = []

    for epoch in range(1, config.epochs + 1):
        eps = gaussian_array(pert_rng, (n_win, H.state_dim))
        u0_all = (states[:, 0] + config.sigma * eps).astype(dtype)
        total_grads = None
        loss_sum = 0.0
        used = 0
        skipped = 0
        for lo, hi in bounds:
            rows = np.arange(lo, hi)
            loss, grads, ok = _chunk_grad(proto, params, model, u0_all[rows],
                                          states[rows, 1:], obs[rows])
            if grads is None:
                skipped += int((~ok).sum())
                rows = rows[ok]
                if rows.size == 0:
                    continue
                loss, grads, ok = _chunk_grad(proto, params, model, u0_all[rows],
                                              states[rows, 1:], obs[rows])
                if grads is None:
                    raise TrainingError(f"epoch {epoch}: unstable windows persisted after skipping")
            if not np.isfinite(loss):
                raise TrainingError(f"epoch {epoch}: non-finite loss in windows {lo}..{hi - 1}")
            n = rows.size
            if config.minibatch:
                params, adam = adam_step(params, grads, adam, config.lr)
            else:
                scaled = {k: g * n for k, g in grads.items()}
                total_grads = scaled if total_grads is None else {
                    k: total_grads[k] + scaled[k] for k in scaled}
            loss_sum += loss * n
            used += n
        if skipped > config.max_skip_fraction * n_win:
            raise TrainingError(f"epoch {epoch}: {skipped} of {n_win} windows blew up")
        if used == 0:
            raise TrainingError(f"epoch {epoch}: no usable windows")
        if not config.minibatch:
            mean_grads = {k: (g / used).astype(dtype) for k, g in total_grads.items()}
            params, adam = adam_step(params, mean_grads, adam, config.lr)
        mean_loss = loss_sum / used
        curve.append((epoch, mean_loss, skipped))
        if skipped:
            log.warning("epoch %d: skipped %d unstable windows", epoch, skipped)
        log.debug("epoch %d loss %.6g", epoch, mean_loss)
        if callback is not None:
            callback(epoch, mean_loss, params)

    return Checkpoint(config.method if config.method == "linear" else "neural", params, spec,
                      config.seed, config.digest(), H.state_dim, H.factor, H.extents, curve)
