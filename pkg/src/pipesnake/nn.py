"""Minimal verified neural stack.

Dense, strided 5x5 convolution and LSTM layers with tanh activations and
analytic backprop, three fixed policy/value architectures, Adam, and a
binary checkpoint format.  Every layer keeps a stack of forward caches
(a tape), so one backward pass can walk any number of forward calls in
reverse; that is what lets truncated BPTT and plain minibatch training
share one code path.  Gradients are verified against central finite
differences in the test suite.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit as _sigmoid

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0

KINEMATIC = "kinematic"
VISUAL = "visual"
VISUAL_RECURRENT = "visual_recurrent"
VARIANTS = (KINEMATIC, VISUAL, VISUAL_RECURRENT)


@dataclass(frozen=True)
class ArchSpec:
    variant: str = KINEMATIC
    kin_dim: int = 48
    image_hw: tuple = (16, 16)
    action_dim: int = 12
    discrete: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.kin_dim <= 0 or self.action_dim <= 0:
            raise ValueError("dims must be positive")

    @property
    def obs_dim(self) -> int:
        if self.variant == KINEMATIC:
            return self.kin_dim
        h, w = self.image_hw
        return self.kin_dim + h * w


def _orthogonal(rng, n_in, n_out, scale):
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return np.ascontiguousarray(scale * q[:n_in, :n_out])


class Dense:
    """Affine layer with optional tanh, caching one entry per forward."""

    def __init__(self, name, n_in, n_out, rng, scale=1.0, act="tanh"):
        self.name = name
        self.act = act
        self.W = _orthogonal(rng, n_in, n_out, scale)
        self.b = np.zeros(n_out)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)
        self._cache = []

    def reset(self):
        self._cache.clear()
        self.gW[:] = 0.0
        self.gb[:] = 0.0

    def forward(self, x):
        y = x @ self.W + self.b
        if self.act == "tanh":
            y = np.tanh(y)
        self._cache.append((x, y))
        return y

    def backward(self, g):
        x, y = self._cache.pop()
        if self.act == "tanh":
            g = g * (1.0 - y * y)
        self.gW += x.T @ g
        self.gb += g.sum(axis=0)
        return g @ self.W.T

    def params(self):
        return {f"{self.name}/W": self.W, f"{self.name}/b": self.b}

    def grads(self):
        return {f"{self.name}/W": self.gW, f"{self.name}/b": self.gb}


def _im2col(x, k, s):
    b, c, h, w = x.shape
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1
    cols = np.empty((b, c, k, k, oh, ow))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = x[:, :, i:i + s * oh:s, j:j + s * ow:s]
    return cols.reshape(b, c * k * k, oh * ow), oh, ow


def _col2im(gcols, shape, k, s, oh, ow):
    b, c, h, w = shape
    g = np.zeros(shape)
    gc = gcols.reshape(b, c, k, k, oh, ow)
    for i in range(k):
        for j in range(k):
            g[:, :, i:i + s * oh:s, j:j + s * ow:s] += gc[:, :, i, j]
    return g


class Conv:
    """5x5 stride-2 valid convolution with tanh."""

    K = 5
    S = 2

    def __init__(self, name, c_in, c_out, rng):
        self.name = name
        self.c_in = c_in
        self.c_out = c_out
        self.W = _orthogonal(rng, c_in * self.K * self.K, c_out, 1.0)
        self.b = np.zeros(c_out)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)
        self._cache = []

    def reset(self):
        self._cache.clear()
        self.gW[:] = 0.0
        self.gb[:] = 0.0

    def forward(self, x):
        cols, oh, ow = _im2col(x, self.K, self.S)
        z = np.einsum("bcp,co->bop", cols, self.W) + self.b[None, :, None]
        y = np.tanh(z)
        self._cache.append((x.shape, cols, y, oh, ow))
        return y.reshape(x.shape[0], self.c_out, oh, ow)

    def backward(self, g):
        shape, cols, y, oh, ow = self._cache.pop()
        g = g.reshape(y.shape) * (1.0 - y * y)
        self.gW += np.einsum("bcp,bop->co", cols, g)
        self.gb += g.sum(axis=(0, 2))
        gcols = np.einsum("co,bop->bcp", self.W, g)
        return _col2im(gcols, shape, self.K, self.S, oh, ow)

    def params(self):
        return {f"{self.name}/W": self.W, f"{self.name}/b": self.b}

    def grads(self):
        return {f"{self.name}/W": self.gW, f"{self.name}/b": self.gb}


class LSTM:
    """Single LSTM cell; forward is one timestep, tape enables BPTT."""

    def __init__(self, name, n_in, n_hidden, rng):
        self.name = name
        self.n_in = n_in
        self.n_hidden = n_hidden
        self.W = _orthogonal(rng, n_in + n_hidden, 4 * n_hidden, 1.0)
        self.b = np.zeros(4 * n_hidden)
        self.b[n_hidden:2 * n_hidden] = 1.0    # forget-gate bias
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)
        self._cache = []

    def reset(self):
        self._cache.clear()
        self.gW[:] = 0.0
        self.gb[:] = 0.0

    def zero_state(self, batch):
        return (np.zeros((batch, self.n_hidden)), np.zeros((batch, self.n_hidden)))

    def forward(self, x, state):
        h_prev, c_prev = state
        xs = np.concatenate([x, h_prev], axis=1)
        z = xs @ self.W + self.b
        nh = self.n_hidden
        i = _sigmoid(z[:, :nh])
        f = _sigmoid(z[:, nh:2 * nh])
        g = np.tanh(z[:, 2 * nh:3 * nh])
        o = _sigmoid(z[:, 3 * nh:])
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        self._cache.append((xs, c_prev, i, f, g, o, tc))
        return h, (h, c)

    def backward(self, gh, gc):
        """Backprop one step; returns (gx, gh_prev, gc_prev)."""
        xs, c_prev, i, f, g, o, tc = self._cache.pop()
        nh = self.n_hidden
        go = gh * tc
        gc = gc + gh * o * (1.0 - tc * tc)
        gi = gc * g
        gg = gc * i
        gf = gc * c_prev
        gc_prev = gc * f
        gz = np.concatenate([
            gi * i * (1.0 - i),
            gf * f * (1.0 - f),
            gg * (1.0 - g * g),
            go * o * (1.0 - o),
        ], axis=1)
        self.gW += xs.T @ gz
        self.gb += gz.sum(axis=0)
        gxs = gz @ self.W.T
        return gxs[:, :self.n_in], gxs[:, self.n_in:], gc_prev

    def params(self):
        return {f"{self.name}/W": self.W, f"{self.name}/b": self.b}

    def grads(self):
        return {f"{self.name}/W": self.gW, f"{self.name}/b": self.gb}


CONV_FC_WIDTH = 64
LSTM_WIDTH = 64
TRUNK_WIDTH = 128
BRANCH_WIDTH = 64


class Network:
    """Policy/value network for one ArchSpec.

    forward() handles a whole batch for one timestep; recurrent nets carry
    (h, c) between calls.  backward() walks all forwards since the last
    begin() in reverse, accumulating parameter gradients.
    """

    def __init__(self, arch: ArchSpec, seed: int):
        self.arch = arch
        self.seed = seed
        rng = np.random.default_rng(seed)
        self._layers = []

        feat = arch.kin_dim
        if arch.variant != KINEMATIC:
            self.conv1 = Conv("conv1", 1, 5, rng)
            self.conv2 = Conv("conv2", 5, 10, rng)
            h, w = arch.image_hw
            oh = (h - Conv.K) // Conv.S + 1
            ow = (w - Conv.K) // Conv.S + 1
            oh2 = (oh - Conv.K) // Conv.S + 1
            ow2 = (ow - Conv.K) // Conv.S + 1
            if oh2 < 1 or ow2 < 1:
                raise ValueError(f"image {arch.image_hw} too small for the conv stack")
            self.conv_fc = Dense("conv_fc", 10 * oh2 * ow2, CONV_FC_WIDTH, rng)
            self._layers += [self.conv1, self.conv2, self.conv_fc]
            feat = arch.kin_dim + CONV_FC_WIDTH

        self.lstm = None
        trunk_in = feat
        if arch.variant == VISUAL_RECURRENT:
            self.lstm = LSTM("lstm", feat, LSTM_WIDTH, rng)
            self._layers.append(self.lstm)
            trunk_in = LSTM_WIDTH

        self.shared = Dense("shared", trunk_in, TRUNK_WIDTH, rng)
        self.p1 = Dense("p1", TRUNK_WIDTH, TRUNK_WIDTH, rng)
        self.p2 = Dense("p2", TRUNK_WIDTH, BRANCH_WIDTH, rng)
        self.p_head = Dense("p_head", BRANCH_WIDTH, arch.action_dim, rng,
                            scale=0.01, act=None)
        self.v1 = Dense("v1", TRUNK_WIDTH, TRUNK_WIDTH, rng)
        self.v2 = Dense("v2", TRUNK_WIDTH, BRANCH_WIDTH, rng)
        self.v_head = Dense("v_head", BRANCH_WIDTH, 1, rng, scale=1.0, act=None)
        self._layers += [self.shared, self.p1, self.p2, self.p_head,
                         self.v1, self.v2, self.v_head]

        if arch.discrete:
            self.log_std = None
        else:
            self.log_std = np.full(arch.action_dim, -0.5)
        self.g_log_std = np.zeros(arch.action_dim)
        self._tape = 0

    # -- tape management ------------------------------------------------

    def begin(self):
        """Clear caches and zero accumulated gradients."""
        for layer in self._layers:
            layer.reset()
        self.g_log_std[:] = 0.0
        self._tape = 0

    def drop_tape(self):
        """Discard cached forwards (inference mode) without touching grads."""
        for layer in self._layers:
            layer._cache.clear()
        self._tape = 0

    def zero_state(self, batch: int):
        return self.lstm.zero_state(batch) if self.lstm is not None else None

    # -- forward/backward -----------------------------------------------

    def forward(self, obs, state=None):
        """Returns (policy out, value, new state).

        Policy out is the Gaussian mean, or logits for discrete heads.
        """
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        if obs.shape[1] != self.arch.obs_dim:
            raise ValueError(f"expected obs dim {self.arch.obs_dim}, got {obs.shape[1]}")
        if not np.isfinite(obs).all():
            raise ValueError("non-finite observation")
        if self.arch.variant == KINEMATIC:
            feat = obs
        else:
            h, w = self.arch.image_hw
            kin = obs[:, :self.arch.kin_dim]
            img = obs[:, self.arch.kin_dim:].reshape(-1, 1, h, w)
            c = self.conv2.forward(self.conv1.forward(img))
            c = self.conv_fc.forward(c.reshape(c.shape[0], -1))
            feat = np.concatenate([kin, c], axis=1)

        new_state = None
        if self.lstm is not None:
            if state is None:
                state = self.zero_state(obs.shape[0])
            feat, new_state = self.lstm.forward(feat, state)

        trunk = self.shared.forward(feat)
        pol = self.p_head.forward(self.p2.forward(self.p1.forward(trunk)))
        val = self.v_head.forward(self.v2.forward(self.v1.forward(trunk)))
        self._tape += 1
        return pol, val[:, 0], new_state

    def clipped_log_std(self):
        return np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX)

    def backward(self, upstream):
        """Walk the tape in reverse.

        ``upstream`` is a list of (g_policy_out, g_value) per forward call
        in call order; recurrent state gradients are chained through the
        walk (state carried forward in time receives its gradient from the
        later call, so the list must cover one contiguous sequence).
        """
        if self._tape == 0:
            raise RuntimeError("backward called without a cached forward")
        if len(upstream) != self._tape:
            raise ValueError(f"tape has {self._tape} calls, got {len(upstream)} grads")
        gh_carry = None
        gc_carry = None
        for g_pol, g_val in reversed(upstream):
            g_pol = np.atleast_2d(np.asarray(g_pol, dtype=float))
            g_val = np.asarray(g_val, dtype=float).reshape(-1, 1)
            g_trunk = self.p1.backward(self.p2.backward(self.p_head.backward(g_pol)))
            g_trunk = g_trunk + self.v1.backward(self.v2.backward(self.v_head.backward(g_val)))
            g_feat = self.shared.backward(g_trunk)
            if self.lstm is not None:
                if gh_carry is not None:
                    g_feat = g_feat + gh_carry
                    gc = gc_carry
                else:
                    gc = np.zeros((g_feat.shape[0], self.lstm.n_hidden))
                g_feat, gh_carry, gc_carry = self.lstm.backward(g_feat, gc)
            if self.arch.variant != KINEMATIC:
                g_conv = g_feat[:, self.arch.kin_dim:]
                g_flat = self.conv_fc.backward(g_conv)
                b = g_flat.shape[0]
                self.conv1.backward(self.conv2.backward(g_flat.reshape(b, 10, 1, -1)))
        self._tape = 0

    # -- parameter access -------------------------------------------------

    def params(self) -> dict:
        out = {}
        for layer in self._layers:
            out.update(layer.params())
        if self.log_std is not None:
            out["log_std"] = self.log_std
        return out

    def grads(self) -> dict:
        out = {}
        for layer in self._layers:
            out.update(layer.grads())
        if self.log_std is not None:
            out["log_std"] = self.g_log_std
        return out

    def param_count(self) -> int:
        return sum(v.size for v in self.params().values())

    def copy(self) -> "Network":
        other = Network(self.arch, self.seed)
        src = self.params()
        for name, dst in other.params().items():
            dst[:] = src[name]
        return other


def build(arch: ArchSpec, seed: int) -> Network:
    return Network(arch, seed)


# -- Adam ---------------------------------------------------------------


def adam_step(param, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update; returns nothing, mutates param/m/v."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    def __init__(self, net: Network, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.net = net
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p) for k, p in net.params().items()}
        self.v = {k: np.zeros_like(p) for k, p in net.params().items()}

    def step(self, max_grad_norm=None):
        grads = self.net.grads()
        if max_grad_norm is not None:
            total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if total > max_grad_norm:
                scale = max_grad_norm / (total + 1e-12)
                grads = {k: g * scale for k, g in grads.items()}
        self.t += 1
        params = self.net.params()
        for k, p in params.items():
            adam_step(p, grads[k], self.m[k], self.v[k], self.t,
                      self.lr, self.beta1, self.beta2, self.eps)
        if self.net.log_std is not None:
            np.clip(self.net.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.net.log_std)


# -- checkpoints ----------------------------------------------------------

_MAGIC = b"PSNN1\n"


def save_checkpoint(net: Network, path):
    params = net.params()
    names = sorted(params)
    header = {
        "arch": {**asdict(net.arch), "image_hw": list(net.arch.image_hw)},
        "seed": net.seed,
        "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(len(blob).to_bytes(8, "little"))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> Network:
    with open(path, "rb") as f:
        if f.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        n = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(n).decode())
        arch = header["arch"]
        arch["image_hw"] = tuple(arch["image_hw"])
        net = Network(ArchSpec(**arch), header["seed"])
        params = net.params()
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * 8)
            arr = np.frombuffer(raw, dtype="<f8").reshape(shape)
            target = params[spec["name"]]
            if target.shape != arr.shape:
                raise ValueError(f"shape mismatch for {spec['name']}")
            target[:] = arr
    return net


# -- finite-difference verification ---------------------------------------


def gradient_check(arch: ArchSpec, seed=0, n_params=200, eps=1e-5, t_steps=3,
                   batch=4, rng=None):
    """Max relative error between analytic and central-FD gradients.

    Builds a fixed random projection loss over a short forward sequence
    (exercising BPTT when the arch is recurrent) and compares d loss / d p
    for ``n_params`` randomly chosen parameters.
    """
    rng = rng or np.random.default_rng(seed + 1)
    net = Network(arch, seed)
    obs_seq = [rng.uniform(-1.0, 1.0, (batch, arch.obs_dim)) for _ in range(t_steps)]
    u_pol = [rng.standard_normal((batch, arch.action_dim)) for _ in range(t_steps)]
    u_val = [rng.standard_normal(batch) for _ in range(t_steps)]
    u_std = rng.standard_normal(arch.action_dim) if not arch.discrete else None

    def loss():
        total = 0.0
        state = net.zero_state(batch)
        for t in range(t_steps):
            pol, val, state = net.forward(obs_seq[t], state)
            total += float((u_pol[t] * pol).sum() + (u_val[t] * val).sum())
        if u_std is not None:
            total += float((u_std * net.log_std).sum())
        return total

    net.begin()
    state = net.zero_state(batch)
    for t in range(t_steps):
        _, _, state = net.forward(obs_seq[t], state)
    net.backward([(u_pol[t], u_val[t]) for t in range(t_steps)])
    if u_std is not None:
        net.g_log_std += u_std
    analytic = net.grads()

    params = net.params()
    flat = [(name, idx) for name in sorted(params)
            for idx in range(params[name].size)]
    picks = rng.choice(len(flat), size=min(n_params, len(flat)), replace=False)
    worst = 0.0
    for pick in picks:
        name, idx = flat[pick]
        p = params[name]
        multi = np.unravel_index(idx, p.shape)
        old = p[multi]
        p[multi] = old + eps
        f_plus = loss()
        p[multi] = old - eps
        f_minus = loss()
        p[multi] = old
        fd = (f_plus - f_minus) / (2.0 * eps)
        an = analytic[name][multi]
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
        worst = max(worst, rel)
    return worst
