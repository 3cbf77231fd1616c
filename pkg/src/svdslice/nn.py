"""Small MLP classifiers over dense layers, with hand-written backprop.

A layer computes z = h @ W + bias; the configured activation is applied
between layers and never after the last one. A layer's weight is either a
plain dense matrix or an AdapterState (frozen residual + trainable
factors). Gradients are derived by hand for exactly these pieces: dense
matmul, bias, relu/tanh, softmax cross-entropy and mean squared error.
"""

import copy
from dataclasses import dataclass, field

import numpy as np

from .adapter import AdapterState, merge
from .errors import ShapeMismatch
from .rng import stream

ACTIVATIONS = ("relu", "tanh", "identity")
LOSSES = ("cross_entropy", "mse")


@dataclass(frozen=True)
class ModelSpec:
    """Layer widths d0..dL, activation between layers, which layers get
    adapters at fine-tune time, and whether layers carry biases."""

    layer_dims: tuple
    activation: str = "relu"
    adapted_layers: tuple = ()
    bias: bool = True

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "adapted_layers", tuple(sorted(set(int(i) for i in self.adapted_layers))))
        if len(dims) < 2:
            raise ShapeMismatch("layer_dims needs at least input and output sizes")
        if any(d < 1 for d in dims):
            raise ShapeMismatch(f"layer_dims must be positive, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        n_layers = len(dims) - 1
        bad = [i for i in self.adapted_layers if not 0 <= i < n_layers]
        if bad:
            raise ShapeMismatch(f"adapted_layers {bad} outside 0..{n_layers - 1}")

    @property
    def n_layers(self):
        return len(self.layer_dims) - 1


@dataclass
class DenseLayer:
    w: np.ndarray
    bias: np.ndarray = None
    train_w: bool = True
    train_bias: bool = True

    def apply(self, h):
        z = h @ self.w
        if self.bias is not None:
            z = z + self.bias
        return z

    def weight(self):
        return self.w


@dataclass
class AdapterLayer:
    state: AdapterState
    bias: np.ndarray = None
    train_bias: bool = True
    _w_p_t: np.ndarray = field(init=False, default=None, repr=False)

    def apply(self, h):
        st = self.state
        z = h @ st.w_p + st.scale * ((h @ st.a) @ st.b)
        if self.bias is not None:
            z = z + self.bias
        return z

    def weight(self):
        return merge(self.state)


def _activate(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _activate_grad(name, z, act, gact):
    # act is the cached activation output for z; gact is dL/d(act).
    if name == "relu":
        return gact * (z > 0.0)
    if name == "tanh":
        return gact * (1.0 - act * act)
    return gact


class Model:
    """An MLP; owns its layers, which are mutated in place by training."""

    def __init__(self, spec, layers):
        if len(layers) != spec.n_layers:
            raise ShapeMismatch(
                f"spec declares {spec.n_layers} layers, got {len(layers)}"
            )
        self.spec = spec
        self.layers = layers

    def forward(self, x):
        h = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            z = layer.apply(h)
            h = z if i == last else _activate(self.spec.activation, z)
        return h

    def forward_cached(self, x):
        """Forward pass retaining per-layer inputs and pre-activations."""
        inputs, preacts, acts = [], [], []
        h = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            inputs.append(h)
            z = layer.apply(h)
            preacts.append(z)
            h = z if i == last else _activate(self.spec.activation, z)
            acts.append(h)
        return h, (inputs, preacts, acts)

    def backward(self, cache, glogits):
        """Gradients of the loss w.r.t. every parameter, trainable or not.

        Returns a dict keyed like trainable_params()."""
        inputs, preacts, acts = cache
        grads = {}
        g = glogits
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            layer = self.layers[i]
            if i != last:
                g = _activate_grad(self.spec.activation, preacts[i], acts[i], g)
            h = inputs[i]
            if isinstance(layer, AdapterLayer):
                st = layer.state
                gb_mat = g @ st.b.T  # (N, r)
                grads[(i, "a")] = st.scale * (h.T @ gb_mat)
                grads[(i, "b")] = st.scale * ((h @ st.a).T @ g)
                if layer.bias is not None:
                    grads[(i, "bias")] = g.sum(axis=0)
                g = g @ st.w_p.T + st.scale * (gb_mat @ st.a.T)
            else:
                grads[(i, "w")] = h.T @ g
                if layer.bias is not None:
                    grads[(i, "bias")] = g.sum(axis=0)
                g = g @ layer.w.T
        return grads

    def trainable_params(self):
        """Ordered (key, array) pairs that the optimizer may update."""
        params = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, AdapterLayer):
                params.append(((i, "a"), layer.state.a))
                params.append(((i, "b"), layer.state.b))
                if layer.bias is not None and layer.train_bias:
                    params.append(((i, "bias"), layer.bias))
            else:
                if layer.train_w:
                    params.append(((i, "w"), layer.w))
                if layer.bias is not None and layer.train_bias:
                    params.append(((i, "bias"), layer.bias))
        return params

    def layer_weight(self, i):
        return self.layers[i].weight()

    def layer_input(self, x, i):
        """Activations entering layer i."""
        h = x
        for l in range(i):
            z = self.layers[l].apply(h)
            h = _activate(self.spec.activation, z)
        return h

    def finish_forward(self, i, z):
        """Continue from layer i's pre-activation z (bias already included)."""
        last = len(self.layers) - 1
        h = z if i == last else _activate(self.spec.activation, z)
        for l in range(i + 1, len(self.layers)):
            z = self.layers[l].apply(h)
            h = z if l == last else _activate(self.spec.activation, z)
        return h

    def clone(self):
        return copy.deepcopy(self)


def init_model(spec, seed):
    """Fresh dense model; He init for relu, Xavier otherwise, zero biases."""
    layers = []
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.layer_dims[i], spec.layer_dims[i + 1]
        gain = 2.0 if spec.activation == "relu" else 1.0
        std = np.sqrt(gain / fan_in)
        w = stream(seed, "init", i).normal(0.0, std, size=(fan_in, fan_out))
        bias = np.zeros(fan_out) if spec.bias else None
        layers.append(DenseLayer(w=w, bias=bias))
    return Model(spec, layers)


def log_softmax(z):
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(z):
    return np.exp(log_softmax(z))


def loss_and_grad(name, logits, labels):
    """Mean loss over the batch and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    onehot = np.zeros_like(logits)
    onehot[np.arange(n), labels] = 1.0
    if name == "cross_entropy":
        logp = log_softmax(logits)
        loss = -logp[np.arange(n), labels].mean()
        grad = (np.exp(logp) - onehot) / n
    elif name == "mse":
        diff = logits - onehot
        loss = 0.5 * (diff * diff).sum() / n
        grad = diff / n
    else:
        raise ValueError(f"unknown loss {name!r}")
    return float(loss), grad
