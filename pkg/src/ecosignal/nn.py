"""Minimal feed-forward machinery with exact reverse-mode gradients.

Float64 MLPs, Adam, soft target updates, and a squashed-Gaussian policy
head (tanh squashing with change-of-variables log-density).  Everything
is deterministic given the caller's RNG, and every backward pass is
finite-difference verified in the test suite.  Checkpoints use a
self-describing byte-stable container so identical runs produce
identical files.
"""

from __future__ import annotations

import json

import numpy as np

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
LOG_2PI = float(np.log(2.0 * np.pi))

# action layout: cycle-change ratio in [-0.7, 0.7], four green logits in [0, 1]
ACTION_DIM = 5
ACTION_SCALE = np.array([0.7, 0.5, 0.5, 0.5, 0.5])
ACTION_SHIFT = np.array([0.0, 0.5, 0.5, 0.5, 0.5])

_ACTIVATIONS = ("relu", "tanh", "linear")


class MLP:
    """Fully connected network; layer l maps sizes[l] -> sizes[l+1]."""

    def __init__(self, sizes, activations, rng=None, params=None):
        self.sizes = tuple(int(s) for s in sizes)
        self.activations = tuple(activations)
        if len(self.activations) != len(self.sizes) - 1:
            raise ValueError("need one activation per layer")
        for act in self.activations:
            if act not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        if params is not None:
            self.params = params
            self._check_shapes()
        else:
            if rng is None:
                raise ValueError("need an rng to initialize parameters")
            self.params = []
            for fan_in, fan_out, act in zip(self.sizes, self.sizes[1:],
                                            self.activations):
                scale = np.sqrt(2.0 / fan_in) if act == "relu" \
                    else np.sqrt(1.0 / fan_in)
                w = rng.normal(0.0, scale, (fan_in, fan_out))
                b = np.zeros(fan_out)
                self.params.append([w, b])

    def _check_shapes(self):
        for (w, b), fan_in, fan_out in zip(self.params, self.sizes, self.sizes[1:]):
            if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise ValueError("parameter shapes inconsistent with sizes")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError("non-finite parameters")

    def forward(self, x: np.ndarray):
        """Returns (output, cache); x is (batch, sizes[0])."""
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.sizes[0]:
            raise ValueError(f"input width {x.shape[1]} != {self.sizes[0]}")
        cache = []
        h = x
        for (w, b), act in zip(self.params, self.activations):
            pre = h @ w + b
            if act == "relu":
                post = np.maximum(pre, 0.0)
            elif act == "tanh":
                post = np.tanh(pre)
            else:
                post = pre
            cache.append((h, pre, post))
            h = post
        if squeeze:
            return h[0], cache
        return h, cache

    def backward(self, cache, dout: np.ndarray):
        """Exact gradients for upstream dout; returns (grads, dx)."""
        dout = np.asarray(dout, dtype=float)
        if dout.ndim == 1:
            dout = dout[None, :]
        grads = [None] * len(self.params)
        dh = dout
        for l in range(len(self.params) - 1, -1, -1):
            h_in, pre, post = cache[l]
            act = self.activations[l]
            if act == "relu":
                dpre = dh * (pre > 0.0)
            elif act == "tanh":
                dpre = dh * (1.0 - post * post)
            else:
                dpre = dh
            grads[l] = [h_in.T @ dpre, dpre.sum(axis=0)]
            dh = dpre @ self.params[l][0].T
        return grads, dh

    def __call__(self, x):
        return self.forward(x)[0]

    def copy(self) -> "MLP":
        return MLP(self.sizes, self.activations,
                   params=[[w.copy(), b.copy()] for w, b in self.params])

    def flat_arrays(self, prefix: str) -> dict:
        out = {}
        for l, (w, b) in enumerate(self.params):
            out[f"{prefix}.w{l}"] = w
            out[f"{prefix}.b{l}"] = b
        return out

    def load_flat(self, arrays: dict, prefix: str) -> None:
        params = []
        for l in range(len(self.sizes) - 1):
            params.append([np.array(arrays[f"{prefix}.w{l}"], dtype=float),
                           np.array(arrays[f"{prefix}.b{l}"], dtype=float)])
        self.params = params
        self._check_shapes()

    def spec(self) -> dict:
        return {"sizes": list(self.sizes), "activations": list(self.activations)}


def zeros_like_params(params):
    return [[np.zeros_like(w), np.zeros_like(b)] for w, b in params]


def add_scaled(dst, src, scale=1.0):
    for (dw, db), (sw, sb) in zip(dst, src):
        dw += scale * sw
        db += scale * sb
    return dst


class Adam:
    """Adam with bias correction; operates on MLP-style param lists."""

    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = zeros_like_params(params)
        self.v = zeros_like_params(params)

    def update(self, params, grads):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for (w_b), (m_pair), (v_pair), (g_pair) in zip(params, self.m, self.v, grads):
            for j in range(2):
                g = g_pair[j]
                m_pair[j] *= b1
                m_pair[j] += (1.0 - b1) * g
                v_pair[j] *= b2
                v_pair[j] += (1.0 - b2) * g * g
                m_hat = m_pair[j] / c1
                v_hat = v_pair[j] / c2
                w_b[j] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return params

    def flat_arrays(self, prefix: str) -> dict:
        out = {f"{prefix}.step": np.array([self.step_count], dtype=np.int64)}
        for l, ((mw, mb), (vw, vb)) in enumerate(zip(self.m, self.v)):
            out[f"{prefix}.mw{l}"] = mw
            out[f"{prefix}.mb{l}"] = mb
            out[f"{prefix}.vw{l}"] = vw
            out[f"{prefix}.vb{l}"] = vb
        return out

    def load_flat(self, arrays: dict, prefix: str) -> None:
        self.step_count = int(arrays[f"{prefix}.step"][0])
        for l in range(len(self.m)):
            self.m[l] = [np.array(arrays[f"{prefix}.mw{l}"]),
                         np.array(arrays[f"{prefix}.mb{l}"])]
            self.v[l] = [np.array(arrays[f"{prefix}.vw{l}"]),
                         np.array(arrays[f"{prefix}.vb{l}"])]


def soft_update(target: MLP, online: MLP, rho: float) -> None:
    """target <- rho*online + (1-rho)*target, elementwise."""
    for (tw, tb), (ow, ob) in zip(target.params, online.params):
        tw *= 1.0 - rho
        tw += rho * ow
        tb *= 1.0 - rho
        tb += rho * ob


# ---------------------------------------------------------------------------
# Squashed-Gaussian policy head
# ---------------------------------------------------------------------------

def _log1m_tanh2(x):
    # log(1 - tanh(x)^2) = 2*(log 2 - x - softplus(-2x)), stable for large |x|
    return 2.0 * (np.log(2.0) - x - np.logaddexp(0.0, -2.0 * x))


def split_policy_output(out):
    """Policy network output -> (mean, raw log_std), each (..., ACTION_DIM)."""
    return out[..., :ACTION_DIM], out[..., ACTION_DIM:]


def squash_sample(mean, log_std_raw, xi):
    """Reparameterized squashed sample with per-dimension log density.

    pre = mean + std*xi, action = scale*tanh(pre) + shift.  The log density
    subtracts the tanh/scale Jacobian per dimension; summing the last axis
    gives the joint log-probability.  Returns (action, log_p, cache).
    """
    log_std = np.clip(log_std_raw, LOG_STD_MIN, LOG_STD_MAX)
    std = np.exp(log_std)
    pre = mean + std * xi
    tanh_pre = np.tanh(pre)
    action = ACTION_SCALE * tanh_pre + ACTION_SHIFT
    log_p = (-log_std - 0.5 * xi * xi - 0.5 * LOG_2PI
             - np.log(ACTION_SCALE) - _log1m_tanh2(pre))
    cache = {"xi": xi, "std": std, "tanh_pre": tanh_pre,
             "clip_mask": (log_std_raw > LOG_STD_MIN) & (log_std_raw < LOG_STD_MAX)}
    return action, log_p, cache


def squash_backward(cache, d_action, d_log_p):
    """Gradients of (action, log_p) w.r.t. (mean, raw log_std).

    d_action/d_log_p are upstream gradients of the same shapes; xi is
    treated as fixed noise (reparameterization trick).
    """
    tanh_pre = cache["tanh_pre"]
    sech2 = 1.0 - tanh_pre * tanh_pre
    # through pre: action path and the tanh Jacobian term of log_p
    d_pre = d_action * ACTION_SCALE * sech2 + d_log_p * 2.0 * tanh_pre
    d_mean = d_pre
    d_log_std = d_pre * cache["std"] * cache["xi"] - d_log_p
    d_log_std = d_log_std * cache["clip_mask"]
    return d_mean, d_log_std


def deterministic_action(mean):
    """Mean action squashed into bounds (evaluation mode)."""
    return ACTION_SCALE * np.tanh(mean) + ACTION_SHIFT


def sample_action(policy_out, rng):
    """Draw one action from a single policy output vector.

    Returns (action array of 5, joint log-probability).  The first entry
    is the cycle-change ratio, the rest are green logits.
    """
    mean, log_std_raw = split_policy_output(np.asarray(policy_out, dtype=float))
    xi = rng.standard_normal(ACTION_DIM)
    action, log_p, _ = squash_sample(mean, log_std_raw, xi)
    return action, float(log_p.sum())


# ---------------------------------------------------------------------------
# Deterministic checkpoint container
# ---------------------------------------------------------------------------

_MAGIC = b"ECOSIGNAL-CKPT-1\n"


def save_checkpoint(path, arrays: dict, meta: dict) -> None:
    """Write arrays + JSON metadata to a byte-stable self-describing file."""
    names = sorted(arrays)
    index = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name])
        blob = arr.tobytes()
        index.append({"name": name, "dtype": str(arr.dtype),
                      "shape": list(arr.shape), "offset": offset,
                      "nbytes": len(blob)})
        offset += len(blob)
        blobs.append(blob)
    header = json.dumps({"version": 1, "meta": meta, "arrays": index},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Read a checkpoint written by save_checkpoint -> (arrays, meta)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path} is not a recognized checkpoint file")
        hlen = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(hlen).decode())
        payload = fh.read()
    arrays = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(
            raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return arrays, header["meta"]
