"""Feed-forward networks with hand-written reverse mode."""
import numpy as np

from ..errors import ConfigError, TrainingAbort
from . import kernels

HIDDEN_ACTIVATIONS = ("tanh", "relu")


class Mlp:
    """Dense network: ``activation`` on hidden layers, identity on the last.

    Weights are stored as (fan_in, fan_out) so a forward pass is ``x @ W + b``.
    """

    def __init__(self, layer_sizes, weights, biases, activation="tanh"):
        layer_sizes = [int(s) for s in layer_sizes]
        if len(layer_sizes) < 2 or min(layer_sizes) < 1:
            raise ConfigError(f"bad layer sizes {layer_sizes}")
        if activation not in HIDDEN_ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        if len(weights) != len(layer_sizes) - 1 or len(biases) != len(weights):
            raise ConfigError("weights/biases do not match layer_sizes")
        self.layer_sizes = layer_sizes
        self.activation = activation
        self.weights = [np.ascontiguousarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.ascontiguousarray(b, dtype=np.float64) for b in biases]
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (layer_sizes[l], layer_sizes[l + 1]) or b.shape != (layer_sizes[l + 1],):
                raise ConfigError(f"layer {l}: weight {w.shape} / bias {b.shape} disagree with {layer_sizes}")

    @classmethod
    def init(cls, layer_sizes, rng, activation="tanh"):
        """Glorot-uniform weights, zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(layer_sizes, weights, biases, activation)

    @property
    def n_in(self):
        return self.layer_sizes[0]

    @property
    def n_out(self):
        return self.layer_sizes[-1]

    @property
    def n_params(self):
        return sum(a * b + b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    def _act(self, z):
        if self.activation == "tanh":
            return np.tanh(z)
        return np.maximum(z, 0.0)

    def _act_grad(self, h, g):
        if self.activation == "tanh":
            return g * (1.0 - h * h)
        return g * (h > 0.0)

    def forward_trace(self, x):
        """Forward pass keeping every layer input for ``backward``."""
        x = np.ascontiguousarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ConfigError(f"input shape {x.shape} does not match first layer size {self.n_in}")
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = kernels.affine(h, w, b)
            h = z if l == last else self._act(z)
            acts.append(h)
        if not np.isfinite(h).all():
            raise TrainingAbort("non-finite network output")
        return h, acts

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            return self.forward_trace(x[None, :])[0][0]
        return self.forward_trace(x)[0]

    def backward(self, acts, grad_out):
        """Gradients of ``sum(grad_out * output)``.

        Returns ``(grads, grad_in)`` where ``grads`` maps parameter names
        (``W0``, ``b0``, ...) to arrays shaped like the parameters.
        """
        delta = np.ascontiguousarray(grad_out, dtype=np.float64)
        if delta.shape != acts[-1].shape:
            raise ConfigError(f"upstream gradient {delta.shape} vs output {acts[-1].shape}")
        grads = {}
        for l in range(len(self.weights) - 1, -1, -1):
            grads[f"W{l}"] = kernels.grad_weight(acts[l], delta)
            grads[f"b{l}"] = delta.sum(axis=0)
            g_in = kernels.grad_input(delta, np.ascontiguousarray(self.weights[l].T))
            if l > 0:
                delta = self._act_grad(acts[l], g_in)
        return {k: grads[k] for k in self.param_names()}, g_in

    def param_names(self):
        names = []
        for l in range(len(self.weights)):
            names += [f"W{l}", f"b{l}"]
        return names

    def params(self):
        """Name -> array mapping. The arrays are the live parameters."""
        out = {}
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{l}"] = w
            out[f"b{l}"] = b
        return out

    def copy(self):
        return Mlp(self.layer_sizes, [w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation)

    def freeze(self):
        for a in self.weights + self.biases:
            a.setflags(write=False)
        return self

    def to_dict(self):
        return {
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation,
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d):
        sizes = d["layer_sizes"]
        weights = [np.array(w, dtype=np.float64).reshape(a, b) for w, a, b in zip(d["weights"], sizes[:-1], sizes[1:])]
        biases = [np.array(b, dtype=np.float64) for b in d["biases"]]
        return cls(sizes, weights, biases, d.get("activation", "tanh"))
