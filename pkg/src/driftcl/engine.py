"""Small reverse-mode network engine in float64 numpy.

Layers keep no activation state: ``forward`` returns ``(output, cache)`` and
``backward`` consumes that cache, accumulates parameter gradients and returns
the gradient with respect to the layer input. Every layer works on a leading
batch axis so a set of independent windows is evaluated in one call; the
arithmetic per window is the same as evaluating them one by one.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

DTYPE = np.float64


class DimensionError(ValueError):
    """Raised when array shapes do not conform."""


class NumericError(FloatingPointError):
    """Raised when a non-finite value reaches the optimizer."""


class EmptySequenceError(ValueError):
    pass


@dataclass(eq=False)
class Parameter:
    value: np.ndarray
    name: str = ""
    frozen: bool = False
    grad: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.value = np.asarray(self.value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


# ---------------------------------------------------------------------------
# functional primitives


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``bias + weights @ x`` for ``x`` of shape (n_in,) or (batch, n_in)."""
    x = np.asarray(x, dtype=DTYPE)
    weights = np.asarray(weights, dtype=DTYPE)
    bias = np.asarray(bias, dtype=DTYPE)
    if weights.ndim != 2 or bias.shape != (weights.shape[0],) or x.shape[-1:] != weights.shape[1:]:
        raise DimensionError(
            f"dense: input {x.shape}, weights {weights.shape}, bias {bias.shape} do not conform"
        )
    return x @ weights.T + bias


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def _check_pair(pred: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if pred.size == 0:
        raise DimensionError("loss over zero elements")
    return pred, target


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    pred, target = _check_pair(pred, target)
    return float(np.mean((pred - target) ** 2))


def mse_loss_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    pred, target = _check_pair(pred, target)
    return 2.0 * (pred - target) / pred.size


def l1_loss(pred: np.ndarray, target: np.ndarray) -> float:
    pred, target = _check_pair(pred, target)
    return float(np.mean(np.abs(pred - target)))


def l1_loss_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Subgradient; zero where prediction equals target."""
    pred, target = _check_pair(pred, target)
    return np.sign(pred - target) / pred.size


# ---------------------------------------------------------------------------
# layers


class Layer:
    def parameters(self) -> list[Parameter]:
        return []

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, object]:
        raise NotImplementedError

    def backward(self, cache: object, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]


def uniform_init(rng: np.random.Generator, shape: Sequence[int], bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=tuple(shape)).astype(DTYPE)


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None, name: str = "dense"):
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(n_in)
        self.n_in, self.n_out = n_in, n_out
        self.weight = Parameter(uniform_init(rng, (n_out, n_in), bound), f"{name}.weight")
        self.bias = Parameter(uniform_init(rng, (n_out,), bound), f"{name}.bias")

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def forward(self, x):
        return dense_forward(x, self.weight.value, self.bias.value), x

    def backward(self, cache, grad_out):
        x = cache
        if x.ndim == 1:
            self.weight.grad += np.outer(grad_out, x)
            self.bias.grad += grad_out
        else:
            self.weight.grad += grad_out.T @ x
            self.bias.grad += grad_out.sum(axis=0)
        return grad_out @ self.weight.value


class ReLU(Layer):
    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, cache, grad_out):
        return grad_out * cache


class Flatten(Layer):
    """Collapses everything after the batch axis, (B, L, H) -> (B, L*H)."""

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, grad_out):
        return grad_out.reshape(cache)


GATES = ("input", "forget", "cell", "output")
_ORDER = ("output", "input", "forget", "cell")


class LSTM(Layer):
    """Single-layer LSTM returning the hidden state at every timestep.

    Input is (B, L, n_in) and output (B, L, H). Gate pre-activations are
    ``W_k @ [x_t, h_{t-1}] + b_k`` with sigmoid on input/forget/output gates
    and tanh on the cell candidate; ``h_t = o * tanh(c_t)``.
    """

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator | None = None,
                 forget_bias: float = 1.0, name: str = "lstm"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_size, self.hidden_size = input_size, hidden_size
        k = 1.0 / np.sqrt(hidden_size)
        shape = (hidden_size, input_size + hidden_size)
        self.weights = {g: Parameter(uniform_init(rng, shape, k), f"{name}.W_{g}") for g in GATES}
        self.biases = {g: Parameter(uniform_init(rng, (hidden_size,), k), f"{name}.b_{g}") for g in GATES}
        self.biases["forget"].value[:] = forget_bias

    def parameters(self) -> list[Parameter]:
        return [self.weights[g] for g in GATES] + [self.biases[g] for g in GATES]

    def _stacked(self) -> tuple[np.ndarray, np.ndarray]:
        W = np.concatenate([self.weights[g].value for g in _ORDER], axis=0)
        b = np.concatenate([self.biases[g].value for g in _ORDER])
        return W, b

    # Internally the gates are stacked as (output, input, forget, cell) and the
    # batch is time-major, so one sigmoid covers three gates and each step
    # reads contiguous memory.
    def forward(self, x, h0=None, c0=None):
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim == 2:  # unbatched (L, n_in)
            out, cache = self.forward(x[None], h0 if h0 is None else h0[None], c0 if c0 is None else c0[None])
            return out[0], ("unbatched", cache)
        if x.ndim != 3 or x.shape[2] != self.input_size:
            raise DimensionError(f"lstm expects (batch, L, {self.input_size}), got {x.shape}")
        B, L, _ = x.shape
        if L == 0:
            raise EmptySequenceError("lstm input sequence has length 0")
        H = self.hidden_size
        W, b = self._stacked()
        Wx, Wh = W[:, : self.input_size], W[:, self.input_size:]
        WhT = np.ascontiguousarray(Wh.T)
        xt = np.ascontiguousarray(x.transpose(1, 0, 2))
        xz = xt @ Wx.T + b  # (L, B, 4H), input contribution for all steps at once
        h = np.zeros((B, H)) if h0 is None else np.asarray(h0, dtype=DTYPE)
        c = np.zeros((B, H)) if c0 is None else np.asarray(c0, dtype=DTYPE)
        hs = np.empty((L + 1, B, H))
        cs = np.empty((L + 1, B, H))
        hs[0], cs[0] = h, c
        acts = np.empty((L, B, 4 * H))
        tanh_c = np.empty((L, B, H))
        for t in range(L):
            z = xz[t]
            z += hs[t] @ WhT
            a = acts[t]
            expit(z[:, : 3 * H], out=a[:, : 3 * H])
            np.tanh(z[:, 3 * H:], out=a[:, 3 * H:])
            c = cs[t + 1]
            np.multiply(a[:, 2 * H: 3 * H], cs[t], out=c)
            c += a[:, H: 2 * H] * a[:, 3 * H:]
            tc = np.tanh(c, out=tanh_c[t])
            np.multiply(a[:, :H], tc, out=hs[t + 1])
        return hs[1:].transpose(1, 0, 2), (xt, Wx, Wh, hs, cs, acts, tanh_c)

    def backward(self, cache, grad_out):
        if isinstance(cache[0], str):
            return self.backward(cache[1], grad_out[None])[0]
        xt, Wx, Wh, hs, cs, acts, tanh_c = cache
        L, B, _ = xt.shape
        H = self.hidden_size
        grad = np.ascontiguousarray(np.asarray(grad_out, dtype=DTYPE).transpose(1, 0, 2))
        o, i, f, g = (acts[:, :, k * H: (k + 1) * H] for k in range(4))
        # local derivatives of every gate, for all steps at once
        d_tanh = o * (1.0 - tanh_c * tanh_c)
        f_out = tanh_c * o * (1.0 - o)
        f_cell = np.empty((L, B, 3, H))
        f_cell[:, :, 0] = g * i * (1.0 - i)
        f_cell[:, :, 1] = cs[:-1] * f * (1.0 - f)
        f_cell[:, :, 2] = i * (1.0 - g * g)
        dz = np.empty((L, B, 4, H))
        dh = np.zeros((B, H))
        dc = np.zeros((B, H))
        for t in range(L - 1, -1, -1):
            dh += grad[t]
            dc += dh * d_tanh[t]
            d = dz[t]
            np.multiply(dh, f_out[t], out=d[:, 0])
            np.multiply(dc[:, None, :], f_cell[t], out=d[:, 1:])
            dc *= f[t]
            dh = d.reshape(B, 4 * H) @ Wh
        dz2 = dz.reshape(L * B, 4 * H)
        dWx = dz2.T @ xt.reshape(L * B, -1)
        dWh = dz2.T @ hs[:-1].reshape(L * B, H)
        db = dz2.sum(axis=0)
        for k, gname in enumerate(_ORDER):
            rows = slice(k * H, (k + 1) * H)
            self.weights[gname].grad[:, : self.input_size] += dWx[rows]
            self.weights[gname].grad[:, self.input_size:] += dWh[rows]
            self.biases[gname].grad += db[rows]
        return (dz.reshape(L, B, 4 * H) @ Wx).transpose(1, 0, 2)


def lstm_forward(sequence: np.ndarray, lstm: LSTM, h0: np.ndarray | None = None,
                 c0: np.ndarray | None = None) -> np.ndarray:
    """Hidden states (L, H) for one sequence of shape (L, n_in)."""
    sequence = np.asarray(sequence, dtype=DTYPE)
    if sequence.ndim == 1:
        sequence = sequence[:, None]
    if sequence.shape[0] == 0:
        raise EmptySequenceError("lstm input sequence has length 0")
    return lstm.forward(sequence, h0, c0)[0]


class Sequential(Layer):
    def __init__(self, *layers: Layer):
        self.layers = list(layers)

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def backward(self, cache, grad_out):
        for layer, c in zip(reversed(self.layers), reversed(cache)):
            grad_out = layer.backward(c, grad_out)
        return grad_out


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0


class Adam:
    """Adam with decoupled weight decay.

    Decay is applied to the value before the moment update
    (``value -= lr * weight_decay * value``). Frozen parameters are skipped
    and their state is left untouched.
    """

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        if lr <= 0 or not (0 < beta1 < 1) or not (0 < beta2 < 1) or eps <= 0 or weight_decay < 0:
            raise ValueError("invalid Adam hyperparameters")
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.state = [AdamState(np.zeros_like(p.value), np.zeros_like(p.value)) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p, s in zip(self.params, self.state):
            if p.frozen:
                continue
            adam_step(p, s, self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)


def adam_step(param: Parameter, state: AdamState, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    if param.frozen:
        return
    g = param.grad
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite gradient in parameter {param.name or '<unnamed>'}")
    if weight_decay:
        param.value -= lr * weight_decay * param.value
    state.step_count += 1
    state.m *= beta1
    state.m += (1.0 - beta1) * g
    state.v *= beta2
    state.v += (1.0 - beta2) * g * g
    m_hat = state.m / (1.0 - beta1 ** state.step_count)
    v_hat = state.v / (1.0 - beta2 ** state.step_count)
    param.value -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# verification


def grad_check(loss_and_grad: Callable[[], float], params: Sequence[Parameter], n_probes: int = 20,
               h: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_and_grad`` must zero the gradients, evaluate the loss and run the
    backward pass. Probed entries are drawn uniformly over all parameters.
    """
    rng = np.random.default_rng(seed)
    loss_and_grad()
    analytic = [p.grad.copy() for p in params]
    sizes = np.array([p.value.size for p in params])
    worst = 0.0
    for _ in range(n_probes):
        k = int(rng.choice(len(params), p=sizes / sizes.sum()))
        idx = int(rng.integers(sizes[k]))
        flat = params[k].value.reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + h
        up = loss_and_grad()
        flat[idx] = orig - h
        down = loss_and_grad()
        flat[idx] = orig
        numeric = (up - down) / (2.0 * h)
        a = analytic[k].reshape(-1)[idx]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    loss_and_grad()
    return worst
