"""Dense float64 tensors, hand-differentiated layers, and optimizers.

The layer set is closed on purpose: every layer codes its own forward and
backward pass, so the finite-difference checker can vouch for the whole
kernel. There is no autodiff graph. All arrays are 64-bit floats, C-order.

Layers accept either a single sample shaped like ``input_dims`` or a batch
shaped ``(n, *input_dims)``; backward passes sum parameter gradients over
the batch (callers scale the upstream gradient for means).
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError

Tensor = np.ndarray


def as_tensor(values, dims=None) -> Tensor:
    """Coerce to a float64 C-order array, optionally reshaped to ``dims``."""
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if dims is not None:
        arr = arr.reshape(tuple(dims))
    return arr


def require_finite(arr: Tensor, context: str) -> Tensor:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {context}")
    return arr


def _is_batched(x: Tensor, input_dims: tuple) -> bool:
    if x.shape == tuple(input_dims):
        return False
    if x.ndim == len(input_dims) + 1 and x.shape[1:] == tuple(input_dims):
        return True
    raise ShapeError(f"expected shape {tuple(input_dims)} or (n, ...), got {x.shape}")


class Affine:
    """y = weights @ flatten(x) + bias. Flattens any input shape."""

    kind = "affine"

    def __init__(self, weights: Tensor, bias: Tensor, input_dims):
        self.weights = as_tensor(weights)
        self.bias = as_tensor(bias)
        self.input_dims = tuple(input_dims)
        fan_in = int(np.prod(self.input_dims))
        if self.weights.shape != (self.bias.shape[0], fan_in):
            raise ShapeError(
                f"affine weights {self.weights.shape} inconsistent with "
                f"input {self.input_dims} and bias {self.bias.shape}"
            )
        self.output_dims = (self.weights.shape[0],)

    @classmethod
    def init(cls, input_dims, out_features: int, rng: np.random.Generator):
        fan_in = int(np.prod(tuple(input_dims)))
        scale = 1.0 / np.sqrt(fan_in)
        w = rng.normal(0.0, scale, size=(out_features, fan_in))
        b = np.zeros(out_features)
        return cls(w, b, input_dims)

    def params(self):
        return [self.weights, self.bias]

    def set_params(self, params):
        self.weights, self.bias = params

    def forward(self, x: Tensor) -> Tensor:
        if _is_batched(x, self.input_dims):
            flat = x.reshape(x.shape[0], -1)
            return flat @ self.weights.T + self.bias
        return self.weights @ x.ravel() + self.bias

    def backward(self, x: Tensor, dy: Tensor):
        if _is_batched(x, self.input_dims):
            flat = x.reshape(x.shape[0], -1)
            dw = dy.T @ flat
            db = dy.sum(axis=0)
            dx = (dy @ self.weights).reshape(x.shape)
        else:
            flat = x.ravel()
            dw = np.outer(dy, flat)
            db = dy.copy()
            dx = (self.weights.T @ dy).reshape(x.shape)
        return [dw, db], dx


class Relu:
    kind = "relu"

    def __init__(self, input_dims):
        self.input_dims = tuple(input_dims)
        self.output_dims = self.input_dims

    def params(self):
        return []

    def set_params(self, params):
        pass

    def forward(self, x: Tensor) -> Tensor:
        _is_batched(x, self.input_dims)
        return np.maximum(x, 0.0)

    def backward(self, x: Tensor, dy: Tensor):
        # subgradient 0 at exactly 0
        return [], dy * (x > 0.0)


class TanhActivation:
    kind = "tanh-activation"

    def __init__(self, input_dims):
        self.input_dims = tuple(input_dims)
        self.output_dims = self.input_dims

    def params(self):
        return []

    def set_params(self, params):
        pass

    def forward(self, x: Tensor) -> Tensor:
        _is_batched(x, self.input_dims)
        return np.tanh(x)

    def backward(self, x: Tensor, dy: Tensor):
        t = np.tanh(x)
        return [], dy * (1.0 - t * t)


class Softmax:
    """Probability output over a 1-D logit vector. Final layer only."""

    kind = "softmax"

    def __init__(self, input_dims):
        dims = tuple(input_dims)
        if len(dims) != 1:
            raise ShapeError(f"softmax needs a 1-D logit vector, got dims {dims}")
        self.input_dims = dims
        self.output_dims = dims

    def params(self):
        return []

    def set_params(self, params):
        pass

    def forward(self, x: Tensor) -> Tensor:
        if _is_batched(x, self.input_dims):
            z = x - x.max(axis=1, keepdims=True)
            e = np.exp(z)
            return e / e.sum(axis=1, keepdims=True)
        z = x - x.max()
        e = np.exp(z)
        return e / e.sum()

    def backward(self, x: Tensor, dy: Tensor):
        p = self.forward(x)
        if _is_batched(x, self.input_dims):
            inner = (dy * p).sum(axis=1, keepdims=True)
            return [], p * (dy - inner)
        return [], p * (dy - float(dy @ p))


class AveragePool:
    """Non-overlapping window mean over the two leading spatial dims."""

    kind = "average-pool"

    def __init__(self, input_dims, window: int):
        dims = tuple(input_dims)
        if len(dims) != 3:
            raise ShapeError(f"average-pool expects (h, w, c) input, got {dims}")
        h, w, c = dims
        if window < 1 or h % window or w % window:
            raise ShapeError(f"window {window} does not tile input {dims}")
        self.input_dims = dims
        self.window = window
        self.output_dims = (h // window, w // window, c)

    def params(self):
        return []

    def set_params(self, params):
        pass

    def _pooled(self, x):
        p = self.window
        oh, ow, c = self.output_dims
        lead = x.shape[:-3]
        view = x.reshape(lead + (oh, p, ow, p, c))
        return view.mean(axis=(-4, -2))

    def forward(self, x: Tensor) -> Tensor:
        _is_batched(x, self.input_dims)
        return self._pooled(x)

    def backward(self, x: Tensor, dy: Tensor):
        p = self.window
        spread = np.repeat(np.repeat(dy, p, axis=-3), p, axis=-2) / (p * p)
        return [], spread.reshape(x.shape)


class FeedforwardNet:
    """Ordered layer stack with chained dimensions.

    The net is treated as immutable apart from parameter updates, which go
    through :meth:`set_params` and need exclusive access.
    """

    def __init__(self, layers, input_dims):
        self.input_dims = tuple(input_dims)
        self.layers = list(layers)
        dims = self.input_dims
        for i, layer in enumerate(self.layers):
            if tuple(layer.input_dims) != dims:
                raise ShapeError(
                    f"layer {i} ({layer.kind}) expects input {layer.input_dims}, "
                    f"previous layer produces {dims}"
                )
            if layer.kind == "softmax" and i != len(self.layers) - 1:
                raise ShapeError("softmax is only allowed as the final layer")
            dims = tuple(layer.output_dims)
        self.output_dims = dims

    @property
    def is_classifier(self) -> bool:
        return bool(self.layers) and self.layers[-1].kind == "softmax"

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def set_params(self, params):
        it = iter(params)
        for layer in self.layers:
            n = len(layer.params())
            layer.set_params([next(it) for _ in range(n)])

    def forward(self, x: Tensor) -> Tensor:
        _is_batched(x, self.input_dims)
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def trace(self, x: Tensor):
        """Per-layer inputs for the backward pass, plus the final output."""
        inputs = []
        for layer in self.layers:
            inputs.append(x)
            x = layer.forward(x)
        return inputs, x


def net_forward(net: FeedforwardNet, x: Tensor) -> Tensor:
    """Run the net; output of a classifier net is a probability vector."""
    x = as_tensor(x)
    out = net.forward(x)
    return require_finite(out, "net_forward output")


def net_grad(net: FeedforwardNet, x: Tensor, loss_grad: Tensor):
    """Reverse-mode gradients of a scalar loss given d(loss)/d(output).

    Returns ``(param_grads, input_grad)`` with ``param_grads`` ordered like
    ``net.params()``. For batched ``x``, parameter gradients are summed over
    the batch and ``input_grad`` holds one row per sample.
    """
    x = as_tensor(x)
    batched = _is_batched(x, net.input_dims)
    loss_grad = as_tensor(loss_grad)
    want = (x.shape[0],) + net.output_dims if batched else net.output_dims
    if loss_grad.shape != want:
        raise ShapeError(f"loss_grad shape {loss_grad.shape}, expected {want}")

    inputs, _ = net.trace(x)
    param_grads = [None] * len(net.params())
    pos = len(param_grads)
    dy = loss_grad
    for layer, layer_in in zip(reversed(net.layers), reversed(inputs)):
        grads, dy = layer.backward(layer_in, dy)
        pos -= len(grads)
        param_grads[pos : pos + len(grads)] = grads
    return param_grads, dy


def _probe_weights(output_dims) -> Tensor:
    # fixed non-degenerate linear functional; sum alone is blind to softmax
    n = int(np.prod(tuple(output_dims)))
    return np.sin(np.arange(1, n + 1)).reshape(tuple(output_dims))


def finite_diff_check(net: FeedforwardNet, x: Tensor, step: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    Probes the scalar loss sum(sin(i+1) * y_i) and compares the analytic
    input and parameter gradients coordinate by coordinate, reporting
    ``max |analytic - numeric| / max(1, |numeric|)``. Parameter tensors
    larger than 256 entries are probed on a deterministic stride.
    """
    x = as_tensor(x).copy()
    if any(layer.kind == "relu" for layer in net.layers):
        inputs, _ = net.trace(x)
        for layer, layer_in in zip(net.layers, inputs):
            if layer.kind == "relu" and np.any(layer_in == 0.0):
                x = x + 1e-7
                break

    w = _probe_weights(net.output_dims)

    def loss_at(xv):
        return float(np.sum(net.forward(xv) * w))

    analytic_params, analytic_input = net_grad(net, x, w)
    worst = 0.0

    flat_x = x.ravel()
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + step
        hi = loss_at(x)
        flat_x[i] = orig - step
        lo = loss_at(x)
        flat_x[i] = orig
        numeric = (hi - lo) / (2.0 * step)
        err = abs(analytic_input.ravel()[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)

    params = net.params()
    for p, g in zip(params, analytic_params):
        flat_p = p.ravel()
        idx = range(flat_p.size) if flat_p.size <= 256 else range(0, flat_p.size, flat_p.size // 128)
        for i in idx:
            orig = flat_p[i]
            flat_p[i] = orig + step
            hi = loss_at(x)
            flat_p[i] = orig - step
            lo = loss_at(x)
            flat_p[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            err = abs(g.ravel()[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


def sgd_step(params, grads, step_size: float):
    """params' = params - step_size * grads, elementwise over the list."""
    if len(params) != len(grads):
        raise ShapeError("params/grads length mismatch")
    return [p - step_size * g for p, g in zip(params, grads)]


class RmspropState:
    """Decay-averaged squared-gradient accumulators, one per parameter."""

    def __init__(self, step_size: float, decay: float = 0.9, epsilon: float = 1e-8):
        self.step_size = step_size
        self.decay = decay
        self.epsilon = epsilon
        self.accumulators = None

    def _ensure(self, params):
        if self.accumulators is None:
            self.accumulators = [np.zeros_like(p) for p in params]
        if len(self.accumulators) != len(params):
            raise ShapeError("accumulator count does not match params")


def rmsprop_step(state: RmspropState, params, grads):
    """v' = decay*v + (1-decay)*g^2; params' = params - lr*g/sqrt(v'+eps)."""
    if len(params) != len(grads):
        raise ShapeError("params/grads length mismatch")
    state._ensure(params)
    new_params = []
    for i, (p, g) in enumerate(zip(params, grads)):
        v = state.decay * state.accumulators[i] + (1.0 - state.decay) * g * g
        state.accumulators[i] = v
        new_params.append(p - state.step_size * g / np.sqrt(v + state.epsilon))
    return state, new_params


# --- net <-> named-tensor encoding (for the binary weights container) ---

_LAYER_CODES = {"affine": 1.0, "relu": 2.0, "tanh-activation": 3.0, "softmax": 4.0, "average-pool": 5.0}
_CODE_LAYERS = {v: k for k, v in _LAYER_CODES.items()}


def net_to_tensors(net: FeedforwardNet, prefix: str = ""):
    """Encode architecture and parameters as an ordered (name, array) list."""
    arch = [float(len(net.input_dims))]
    arch.extend(float(d) for d in net.input_dims)
    arch.append(float(len(net.layers)))
    for layer in net.layers:
        arch.append(_LAYER_CODES[layer.kind])
        if layer.kind == "affine":
            arch.append(float(layer.output_dims[0]))
        elif layer.kind == "average-pool":
            arch.append(float(layer.window))
        else:
            arch.append(0.0)
    items = [(prefix + "arch", np.array(arch))]
    for i, layer in enumerate(net.layers):
        if layer.kind == "affine":
            items.append((f"{prefix}layer{i}.weights", layer.weights))
            items.append((f"{prefix}layer{i}.bias", layer.bias))
    return items


def net_from_tensors(tensors: dict, prefix: str = "") -> FeedforwardNet:
    """Rebuild a net written by :func:`net_to_tensors`."""
    from .errors import FormatError

    try:
        arch = tensors[prefix + "arch"]
    except KeyError:
        raise FormatError(f"missing tensor {prefix + 'arch'!r}")
    arch = list(arch.ravel())
    ndims = int(arch.pop(0))
    input_dims = tuple(int(arch.pop(0)) for _ in range(ndims))
    nlayers = int(arch.pop(0))
    layers = []
    dims = input_dims
    for i in range(nlayers):
        code, arg = arch.pop(0), arch.pop(0)
        kind = _CODE_LAYERS.get(code)
        if kind == "affine":
            layer = Affine(tensors[f"{prefix}layer{i}.weights"], tensors[f"{prefix}layer{i}.bias"], dims)
        elif kind == "relu":
            layer = Relu(dims)
        elif kind == "tanh-activation":
            layer = TanhActivation(dims)
        elif kind == "softmax":
            layer = Softmax(dims)
        elif kind == "average-pool":
            layer = AveragePool(dims, int(arg))
        else:
            raise FormatError(f"unknown layer code {code}")
        layers.append(layer)
        dims = layer.output_dims
    return FeedforwardNet(layers, input_dims)
