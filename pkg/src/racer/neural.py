"""Actor-critic MLP with hand-written backward pass, Adam, and checkpoint I/O.

All parameters live in one flat float64 vector; the weight matrices are views
into it so optimizers and checkpoints only ever deal with a single array.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParamError, ParseError, ShapeError

LOG_2PI = math.log(2 * math.pi)
CHECKPOINT_FORMAT = "racer-mlp-v1"


@dataclass
class ActivationTrace:
    layer1: np.ndarray  # (steps, hidden) post-tanh, actor trunk
    layer2: np.ndarray


def _layout(obs_dim: int, hidden: tuple, act_dim: int) -> list[tuple[str, tuple]]:
    h1, h2 = hidden
    return [
        ("W1", (h1, obs_dim)), ("b1", (h1,)),
        ("W2", (h2, h1)), ("b2", (h2,)),
        ("Wm", (act_dim, h2)), ("bm", (act_dim,)),
        ("log_std", (act_dim,)),
        ("V1", (h1, obs_dim)), ("c1", (h1,)),
        ("V2", (h2, h1)), ("c2", (h2,)),
        ("Wv", (1, h2)), ("bv", (1,)),
    ]


def _orthogonal(shape, gain, rng) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class MlpPolicy:
    """Separate actor and critic trunks, each obs -> 64 -> 64 with tanh."""

    def __init__(self, obs_dim: int = 170, hidden=(64, 64), act_dim: int = 2, seed: int | None = 0,
                 init_log_std: float = math.log(0.5), obs_scale: float = 0.1):
        self.obs_dim = int(obs_dim)
        # fixed input scaling (depths in metres -> roughly unit range)
        self.obs_scale = float(obs_scale)
        self.hidden = tuple(int(h) for h in hidden)
        self.act_dim = int(act_dim)
        self.layout = _layout(self.obs_dim, self.hidden, self.act_dim)
        self.size = sum(int(np.prod(s)) for _, s in self.layout)
        self.params = np.zeros(self.size)
        self._bind()
        if seed is not None:
            self.initialize(seed, init_log_std)

    def _bind(self):
        self.views = {}
        off = 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            self.views[name] = self.params[off:off + n].reshape(shape)
            off += n
        for name, view in self.views.items():
            setattr(self, name, view)

    def initialize(self, seed: int, init_log_std: float = math.log(0.5)):
        rng = np.random.default_rng(seed)
        self.params[:] = 0.0
        root2 = math.sqrt(2.0)
        self.W1[:] = _orthogonal(self.W1.shape, root2, rng)
        self.W2[:] = _orthogonal(self.W2.shape, root2, rng)
        self.Wm[:] = _orthogonal(self.Wm.shape, 0.01, rng)
        self.V1[:] = _orthogonal(self.V1.shape, root2, rng)
        self.V2[:] = _orthogonal(self.V2.shape, root2, rng)
        self.Wv[:] = _orthogonal(self.Wv.shape, 1.0, rng)
        self.log_std[:] = init_log_std

    def set_params(self, flat):
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.size,):
            raise ShapeError(f"expected {self.size} parameters, got shape {flat.shape}")
        self.params[:] = flat

    def copy(self) -> "MlpPolicy":
        other = MlpPolicy(self.obs_dim, self.hidden, self.act_dim, seed=None, obs_scale=self.obs_scale)
        other.params[:] = self.params
        return other

    # -- forward ---------------------------------------------------------

    def _check_obs(self, obs) -> np.ndarray:
        obs = np.asarray(obs, dtype=float)
        if obs.ndim not in (1, 2) or obs.shape[-1] != self.obs_dim:
            raise ShapeError(f"observation must have trailing length {self.obs_dim}, got shape {obs.shape}")
        return obs

    def forward(self, obs, capture: bool = False):
        """Returns (mean, std, value, trace). ``obs`` may be one vector or a batch."""
        obs = self._check_obs(obs)
        single = obs.ndim == 1
        x = obs[None, :] if single else obs
        mean, value, cache = self._forward_batch(x)
        std = np.exp(self.log_std).copy()
        trace = ActivationTrace(cache["h1"].copy(), cache["h2"].copy()) if capture else None
        if single:
            return mean[0], std, float(value[0]), trace
        return mean, std, value, trace

    def _forward_batch(self, x):
        x = x * self.obs_scale
        h1 = np.tanh(x @ self.W1.T + self.b1)
        h2 = np.tanh(h1 @ self.W2.T + self.b2)
        mean = h2 @ self.Wm.T + self.bm
        g1 = np.tanh(x @ self.V1.T + self.c1)
        g2 = np.tanh(g1 @ self.V2.T + self.c2)
        value = (g2 @ self.Wv.T)[:, 0] + self.bv[0]
        cache = {"x": x, "h1": h1, "h2": h2, "g1": g1, "g2": g2}
        return mean, value, cache

    def mean_action(self, obs) -> np.ndarray:
        obs = self._check_obs(obs)
        x = (obs[None, :] if obs.ndim == 1 else obs) * self.obs_scale
        h1 = np.tanh(x @ self.W1.T + self.b1)
        h2 = np.tanh(h1 @ self.W2.T + self.b2)
        mean = h2 @ self.Wm.T + self.bm
        return mean[0] if obs.ndim == 1 else mean

    def value(self, obs):
        obs = self._check_obs(obs)
        x = (obs[None, :] if obs.ndim == 1 else obs) * self.obs_scale
        g1 = np.tanh(x @ self.V1.T + self.c1)
        g2 = np.tanh(g1 @ self.V2.T + self.c2)
        v = (g2 @ self.Wv.T)[:, 0] + self.bv[0]
        return float(v[0]) if obs.ndim == 1 else v

    # -- backward --------------------------------------------------------

    def backward(self, cache, d_mean, d_log_std, d_value) -> np.ndarray:
        """Gradient of a scalar loss w.r.t. the flat parameters.

        ``d_mean`` (B, act), ``d_log_std`` (act,), ``d_value`` (B,) are the loss
        partials w.r.t. the network outputs.
        """
        grad = np.zeros(self.size)
        g = {}
        x, h1, h2 = cache["x"], cache["h1"], cache["h2"]
        g["Wm"] = d_mean.T @ h2
        g["bm"] = d_mean.sum(axis=0)
        dz2 = (d_mean @ self.Wm) * (1.0 - h2 * h2)
        g["W2"] = dz2.T @ h1
        g["b2"] = dz2.sum(axis=0)
        dz1 = (dz2 @ self.W2) * (1.0 - h1 * h1)
        g["W1"] = dz1.T @ x
        g["b1"] = dz1.sum(axis=0)
        g["log_std"] = d_log_std

        g1, g2 = cache["g1"], cache["g2"]
        dv = d_value[:, None]
        g["Wv"] = dv.T @ g2
        g["bv"] = np.array([d_value.sum()])
        du2 = (dv @ self.Wv) * (1.0 - g2 * g2)
        g["V2"] = du2.T @ g1
        g["c2"] = du2.sum(axis=0)
        du1 = (du2 @ self.V2) * (1.0 - g1 * g1)
        g["V1"] = du1.T @ x
        g["c1"] = du1.sum(axis=0)

        off = 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            grad[off:off + n] = np.reshape(g[name], -1)
            off += n
        return grad


# ---------------------------------------------------------------------------
# Gaussian policy head


def _check_std(std):
    std = np.asarray(std, dtype=float)
    if np.any(~(std > 0)):
        raise ParamError(f"standard deviation must be positive, got {std}")
    return std


def logprob_of(mean, std, action):
    """Diagonal Gaussian log density summed over the last axis."""
    std = _check_std(std)
    z = (np.asarray(action, dtype=float) - mean) / std
    lp = -0.5 * z * z - np.log(std) - 0.5 * LOG_2PI
    return lp.sum(axis=-1)


def sample_and_logprob(mean, std, rng: np.random.Generator):
    std = _check_std(std)
    mean = np.asarray(mean, dtype=float)
    action = mean + std * rng.standard_normal(mean.shape)
    return action, logprob_of(mean, std, action)


def gaussian_entropy(log_std) -> float:
    return float(np.sum(0.5 + 0.5 * LOG_2PI + np.asarray(log_std)))


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float = 3e-4) -> np.ndarray:
    """In-place bias-corrected Adam update; returns ``params``."""
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ShapeError(f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    state.t += 1
    state.m *= state.beta1
    state.m += (1 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1 - state.beta2) * grads * grads
    m_hat = state.m / (1 - state.beta1**state.t)
    v_hat = state.v / (1 - state.beta2**state.t)
    params -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


# ---------------------------------------------------------------------------
# MAC accounting


def count_macs(layer_sizes) -> int:
    """Weight multiply-accumulates of a dense chain (biases excluded)."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise ShapeError("need at least two layer sizes")
    return sum(a * b for a, b in zip(sizes[:-1], sizes[1:]))


def instrumented_actor_macs(policy: MlpPolicy, obs) -> tuple[np.ndarray, int]:
    """Scalar-loop actor forward that counts every multiply-add it performs."""
    x = list(np.asarray(obs, dtype=float) * policy.obs_scale)
    count = 0
    for W, b, act in ((policy.W1, policy.b1, True), (policy.W2, policy.b2, True), (policy.Wm, policy.bm, False)):
        out = []
        for i in range(W.shape[0]):
            acc = float(b[i])
            for j in range(W.shape[1]):
                acc += W[i, j] * x[j]
                count += 1
            out.append(math.tanh(acc) if act else acc)
        x = out
    return np.array(x), count


# ---------------------------------------------------------------------------
# checkpoints


def _encode(obj):
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.tolist(), "dtype": str(obj.dtype), "shape": list(obj.shape)}
    if isinstance(obj, dict):
        return {str(k): _encode(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _decode(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["__ndarray__"], dtype=obj["dtype"]).reshape(obj["shape"])
        return {k: _decode(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v) for v in obj]
    return obj


@dataclass
class Checkpoint:
    policy: MlpPolicy
    adam: AdamState | None = None
    step: int = 0
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, policy: MlpPolicy, adam: AdamState | None = None, step: int = 0,
                    rng_state: dict | None = None, extra: dict | None = None) -> Path:
    """Write an ``.npz`` container: JSON header plus little-endian float64 arrays."""
    path = Path(path)
    header = {
        "format": CHECKPOINT_FORMAT,
        "obs_dim": policy.obs_dim,
        "hidden": list(policy.hidden),
        "act_dim": policy.act_dim,
        "obs_scale": policy.obs_scale,
        "layout": [[name, list(shape)] for name, shape in policy.layout],
        "step": int(step),
        "rng_state": _encode(rng_state),
        "adam_t": adam.t if adam else None,
        "extra": _encode(extra or {}),
    }
    arrays = {
        "header": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8),
        "params": policy.params.astype("<f8"),
    }
    if adam is not None:
        arrays["adam_m"] = adam.m.astype("<f8")
        arrays["adam_v"] = adam.v.astype("<f8")
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        with np.load(path) as data:
            header = json.loads(bytes(data["header"]).decode())
            params = data["params"].astype(np.float64)
            m = data["adam_m"].astype(np.float64) if "adam_m" in data else None
            v = data["adam_v"].astype(np.float64) if "adam_v" in data else None
    except (OSError, ValueError, KeyError) as exc:
        raise ParseError(f"{path}: not a readable checkpoint ({exc})") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"{path}: unknown checkpoint format {header.get('format')!r}", field="format")
    policy = MlpPolicy(header["obs_dim"], tuple(header["hidden"]), header["act_dim"], seed=None,
                       obs_scale=header["obs_scale"])
    policy.set_params(params)
    adam = None
    if m is not None:
        adam = AdamState(m, v, t=int(header["adam_t"]))
    return Checkpoint(policy, adam, int(header["step"]), _decode(header["rng_state"]), _decode(header["extra"]))
