"""Small convolutional policy with hand-rolled forward/backward passes.

Architecture (configurable): stacked 3x3 same-padding convolutions with
ReLU, an optional 2x2 max-pool, flatten, goal-vector concatenation, dense
layers, and a 5-way linear head. Loss is MSE between the softmax output
and the one-hot expert action; training is plain mini-batch gradient
descent with a step learning-rate schedule.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

N_ACTIONS = 5
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class PolicyConfig:
    conv: tuple = ((32, 3), (32, 3), (64, 3))  # (out_channels, kernel) per layer
    pool_after: tuple = ()  # conv layer indices followed by a 2x2 max-pool
    dense: tuple = (128,)
    in_shape: tuple = (4, 9, 9)
    goal_dim: int = 3

    def to_dict(self) -> dict:
        return {
            "conv": [list(c) for c in self.conv],
            "pool_after": list(self.pool_after),
            "dense": list(self.dense),
            "in_shape": list(self.in_shape),
            "goal_dim": self.goal_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        return cls(
            conv=tuple(tuple(c) for c in d["conv"]),
            pool_after=tuple(d["pool_after"]),
            dense=tuple(d["dense"]),
            in_shape=tuple(d["in_shape"]),
            goal_dim=int(d["goal_dim"]),
        )


@dataclass
class Weights:
    config: PolicyConfig
    params: dict  # name -> np.ndarray
    version: int = WEIGHTS_VERSION


@dataclass
class TrainConfig:
    lr: float = 5e-5
    decay: float = 0.2
    decay_every: int = 8  # epochs
    epochs: int = 35
    batch_size: int = 1
    seed: int = 0
    beta1: float = 0.9  # Adam moment decays
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay ** (epoch // self.decay_every)


class WeightsFormatError(ValueError):
    """Raised on version mismatch or corrupted weight files."""


def _conv_out_hw(config: PolicyConfig) -> tuple[int, int]:
    h, w = config.in_shape[1], config.in_shape[2]
    for i, _ in enumerate(config.conv):
        if i in config.pool_after:
            h, w = h // 2, w // 2
    return h, w


def _layer_shapes(config: PolicyConfig) -> list[tuple[str, tuple]]:
    if not config.conv or not config.dense:
        raise ValueError("config needs at least one conv and one dense layer")
    shapes = []
    cin = config.in_shape[0]
    for i, (cout, k) in enumerate(config.conv):
        shapes.append((f"conv{i}_w", (cin * k * k, cout)))
        shapes.append((f"conv{i}_b", (cout,)))
        cin = cout
    h, w = _conv_out_hw(config)
    fan_in = cin * h * w + config.goal_dim
    for i, width in enumerate(config.dense):
        shapes.append((f"dense{i}_w", (fan_in, width)))
        shapes.append((f"dense{i}_b", (width,)))
        fan_in = width
    shapes.append(("head_w", (fan_in, N_ACTIONS)))
    shapes.append(("head_b", (N_ACTIONS,)))
    return shapes


def init_policy(config: PolicyConfig, seed: int, dtype=np.float32) -> Weights:
    """Fan-in-scaled Gaussian init (gain 2 on ReLU layers, 1 on the head)."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _layer_shapes(config):
        if name.endswith("_b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            gain = 1.0 if name == "head_w" else 2.0
            std = np.sqrt(gain / shape[0])
            params[name] = rng.normal(0.0, std, size=shape).astype(dtype)
    return Weights(config=config, params=params)


# ---------------------------------------------------------------------------
# Forward / backward primitives (im2col convolutions, stride 1, same pad)
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Channels-last (B,H,W,C) -> contiguous (B*H*W, k*k*C) patch matrix."""
    b, h, w, c = x.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    view = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    # view: (B,H,W,C,k,k) -> rows ordered (kr, kc, cin)
    return np.ascontiguousarray(view.transpose(0, 1, 2, 4, 5, 3)).reshape(
        b * h * w, k * k * c
    )


def _col2im(dcols: np.ndarray, x_shape: tuple, k: int) -> np.ndarray:
    """Adjoint of _im2col via k*k shifted slice accumulations."""
    b, h, w, c = x_shape
    pad = k // 2
    dxp = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=dcols.dtype)
    d6 = dcols.reshape(b, h, w, k, k, c)
    for kr in range(k):
        for kc in range(k):
            dxp[:, kr : kr + h, kc : kc + w, :] += d6[:, :, :, kr, kc, :]
    return dxp[:, pad : pad + h, pad : pad + w, :]


def _maxpool2(x: np.ndarray):
    """2x2/2 max-pool (channels-last), flooring odd spatial dims."""
    b, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    xc = x[:, : h2 * 2, : w2 * 2, :].reshape(b, h2, 2, w2, 2, c)
    windows = xc.transpose(0, 1, 3, 5, 2, 4).reshape(b, h2, w2, c, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _maxpool2_backward(dout: np.ndarray, idx: np.ndarray, x_shape: tuple) -> np.ndarray:
    b, h, w, c = x_shape
    h2, w2 = h // 2, w // 2
    dwindows = np.zeros((b, h2, w2, c, 4), dtype=dout.dtype)
    np.put_along_axis(dwindows, idx[..., None], dout[..., None], axis=-1)
    dxc = dwindows.reshape(b, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[:, : h2 * 2, : w2 * 2, :] = dxc.reshape(b, h2 * 2, w2 * 2, c)
    return dx


def _forward_impl(weights: Weights, obs: np.ndarray, goal: np.ndarray, keep_cache: bool):
    cfg = weights.config
    p = weights.params
    x = np.ascontiguousarray(obs.transpose(0, 2, 3, 1))  # channels-last internally
    cache = {"conv": [], "dense": []}
    for i, (cout, k) in enumerate(cfg.conv):
        bsz, hh, ww, _ = x.shape
        cols = _im2col(x, k)  # (B*H*W, k*k*C)
        z = cols @ p[f"conv{i}_w"] + p[f"conv{i}_b"]
        a = np.maximum(z, 0).reshape(bsz, hh, ww, cout)
        entry = {"x_shape": x.shape, "cols": cols if keep_cache else None,
                 "mask": (z > 0) if keep_cache else None, "pool": None}
        x = a
        if i in cfg.pool_after:
            x, idx = _maxpool2(a)
            entry["pool"] = (idx, a.shape) if keep_cache else True
        cache["conv"].append(entry)
    flat = x.reshape(x.shape[0], -1)
    h = np.concatenate([flat, goal.astype(flat.dtype)], axis=1)
    cache["flat_shape"] = x.shape
    for i in range(len(cfg.dense)):
        z = h @ p[f"dense{i}_w"] + p[f"dense{i}_b"]
        cache["dense"].append({"inp": h if keep_cache else None, "mask": (z > 0) if keep_cache else None})
        h = np.maximum(z, 0)
    logits = h @ p["head_w"] + p["head_b"]
    cache["head_inp"] = h if keep_cache else None
    return logits, cache


def forward_batch(weights: Weights, obs: np.ndarray, goal: np.ndarray) -> np.ndarray:
    """Batched logits: obs (B,4,9,9), goal (B,3) -> (B,5)."""
    if obs.ndim != 4 or obs.shape[1:] != tuple(weights.config.in_shape):
        raise ValueError(f"observation batch shape {obs.shape} does not match config")
    logits, _ = _forward_impl(weights, obs, goal, keep_cache=False)
    return logits


def forward(weights: Weights, observation) -> np.ndarray:
    """Logits for a single Observation (shape (5,))."""
    obs = observation.channels[None].astype(weights.params["head_w"].dtype)
    goal = observation.goal_vector[None]
    return forward_batch(weights, obs, goal)[0]


def softmax_with_temperature(logits: np.ndarray, tau: float) -> np.ndarray:
    """Temperature softmax over the last axis, max-stabilized."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    logits = np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    z = logits / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def mse_loss(dist: np.ndarray, target: int) -> float:
    """Mean squared error between an action distribution and a one-hot target."""
    onehot = np.zeros(N_ACTIONS, dtype=dist.dtype)
    onehot[target] = 1.0
    return float(np.mean((dist - onehot) ** 2))


def backward(
    weights: Weights, obs: np.ndarray, goal: np.ndarray, actions: np.ndarray
) -> tuple[float, dict]:
    """Mean MSE loss over the batch and its exact analytic gradients (tau=1)."""
    if len(actions) == 0:
        raise ValueError("empty batch")
    cfg = weights.config
    p = weights.params
    b = obs.shape[0]
    logits, cache = _forward_impl(weights, obs, goal, keep_cache=True)
    probs = softmax_with_temperature(logits, 1.0)
    onehot = np.zeros_like(probs)
    onehot[np.arange(b), actions] = 1.0
    diff = probs - onehot
    loss = float(np.mean(diff**2))
    # d(meanMSE)/dlogits through the softmax Jacobian, averaged over the batch
    dp = (2.0 / N_ACTIONS) * diff / b
    dlogits = probs * (dp - (probs * dp).sum(axis=1, keepdims=True))

    grads = {}
    hin = cache["head_inp"]
    grads["head_w"] = hin.T @ dlogits
    grads["head_b"] = dlogits.sum(axis=0)
    dh = dlogits @ p["head_w"].T
    for i in reversed(range(len(cfg.dense))):
        entry = cache["dense"][i]
        dz = dh * entry["mask"]
        grads[f"dense{i}_w"] = entry["inp"].T @ dz
        grads[f"dense{i}_b"] = dz.sum(axis=0)
        dh = dz @ p[f"dense{i}_w"].T
    flat_shape = cache["flat_shape"]
    flat_len = int(np.prod(flat_shape[1:]))
    dx = dh[:, :flat_len].reshape(flat_shape)
    for i in reversed(range(len(cfg.conv))):
        entry = cache["conv"][i]
        if entry["pool"] is not None:
            idx, a_shape = entry["pool"]
            dx = _maxpool2_backward(dx, idx, a_shape)
        cout = dx.shape[-1]
        dz = dx.reshape(-1, cout) * entry["mask"]
        cols = entry["cols"]
        grads[f"conv{i}_w"] = cols.T @ dz
        grads[f"conv{i}_b"] = dz.sum(axis=0)
        if i > 0:
            k = cfg.conv[i][1]
            dcols = dz @ p[f"conv{i}_w"].T
            dx = _col2im(dcols, entry["x_shape"], k)
    return loss, grads


def samples_to_arrays(samples, dtype=np.float32):
    """Stack Sample records into (obs, goal, action) training arrays."""
    obs = np.stack([s.observation.channels for s in samples]).astype(dtype)
    goal = np.stack([s.observation.goal_vector for s in samples]).astype(dtype)
    actions = np.array([int(s.expert_action) for s in samples], dtype=np.int64)
    return obs, goal, actions


def train(
    samples,
    policy_config: PolicyConfig,
    train_config: TrainConfig,
    weights: Optional[Weights] = None,
) -> tuple[Weights, list[float]]:
    """Mini-batch gradient descent (Adam-adapted steps, seeded shuffling).

    Returns final weights and the per-epoch mean loss curve. The step
    size follows lr * decay^(epoch // decay_every).
    """
    if isinstance(samples, tuple):
        obs, goal, actions = samples
    else:
        obs, goal, actions = samples_to_arrays(samples)
    if len(actions) == 0:
        raise ValueError("empty dataset")
    if weights is None:
        weights = init_policy(policy_config, seed=train_config.seed)
    rng = np.random.default_rng(train_config.seed + 1)
    n = len(actions)
    bs = max(1, train_config.batch_size)
    b1, b2, eps = train_config.beta1, train_config.beta2, train_config.adam_eps
    m = {k: np.zeros_like(v) for k, v in weights.params.items()}
    v = {k: np.zeros_like(x) for k, x in weights.params.items()}
    t = 0
    losses = []
    for epoch in range(train_config.epochs):
        lr = train_config.lr_at(epoch)
        order = rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, bs):
            idx = order[lo : lo + bs]
            loss, grads = backward(weights, obs[idx], goal[idx], actions[idx])
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"training diverged at epoch {epoch}, batch {lo // bs}: loss={loss}"
                )
            epoch_loss += loss * len(idx)
            t += 1
            for name, g in grads.items():
                m[name] = b1 * m[name] + (1 - b1) * g
                v[name] = b2 * v[name] + (1 - b2) * g * g
                mhat = m[name] / (1 - b1**t)
                vhat = v[name] / (1 - b2**t)
                weights.params[name] -= (
                    lr * mhat / (np.sqrt(vhat) + eps)
                ).astype(weights.params[name].dtype)
        losses.append(epoch_loss / n)
    return weights, losses


def greedy_accuracy(weights: Weights, obs: np.ndarray, goal: np.ndarray, actions: np.ndarray) -> float:
    logits = forward_batch(weights, obs, goal)
    return float(np.mean(logits.argmax(axis=1) == actions))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def save_weights(weights: Weights, path) -> None:
    """Versioned JSON container; parameters as base64 little-endian float32."""
    payload = {
        "version": weights.version,
        "config": weights.config.to_dict(),
        "params": {
            name: {
                "shape": list(arr.shape),
                "data": base64.b64encode(
                    np.ascontiguousarray(arr, dtype="<f4").tobytes()
                ).decode("ascii"),
            }
            for name, arr in weights.params.items()
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_weights(path) -> Weights:
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise WeightsFormatError(f"unparseable weight file: {exc}") from exc
    if payload.get("version") != WEIGHTS_VERSION:
        raise WeightsFormatError(
            f"weight file version {payload.get('version')} != supported {WEIGHTS_VERSION}"
        )
    try:
        config = PolicyConfig.from_dict(payload["config"])
        param_recs = payload["params"].items()
    except (KeyError, TypeError) as exc:
        raise WeightsFormatError(f"weight file missing field: {exc}") from exc
    params = {}
    for name, rec in param_recs:
        shape = tuple(rec["shape"])
        raw = base64.b64decode(rec["data"])
        expected = int(np.prod(shape)) * 4
        if len(raw) != expected:
            raise WeightsFormatError(
                f"parameter {name}: {len(raw)} bytes, expected {expected}"
            )
        params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    expected_names = {n for n, _ in _layer_shapes(config)}
    if set(params) != expected_names:
        raise WeightsFormatError("parameter set does not match the config")
    return Weights(config=config, params=params)
