"""Q/Psi approximators: a tabular map and a feedforward net with dropout
before every weight layer.

Both expose the same duck-typed surface used by the algorithms:

* ``params``: flat float64 parameter vector (canonical storage)
* ``values(x, masks=None)``: (B, A) action values
* ``sample_masks(batch, rng)``: fresh dropout masks, or ``None``
* ``grad(x, actions, dvalues, masks)``: flat gradient of the chosen outputs
* ``inputs(ids, features)``: picks ids (tabular) or features (network)
* ``with_params(p)``: a copy holding other parameters
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .core import TrainingError, UsageError

CHECKPOINT_VERSION = 1
_ACT_NAMES = {v: k for k, v in _kernels.ACTIVATIONS.items()}


@dataclass(frozen=True, eq=False)
class DropoutMask:
    """Inverted-dropout mask over the inputs of every weight layer.

    ``values`` is (total_inputs,) for a single pass or (B, total_inputs) for
    a batch of per-sample masks.
    """

    values: np.ndarray
    rate: float
    seed: int | None = None

    @classmethod
    def sample(cls, net: "FeedforwardQ", seed_or_rng, batch: int | None = None) -> "DropoutMask":
        if isinstance(seed_or_rng, np.random.Generator):
            rng, seed = seed_or_rng, None
        else:
            rng, seed = np.random.default_rng(seed_or_rng), int(seed_or_rng)
        shape = (net.mask_width,) if batch is None else (batch, net.mask_width)
        return cls(_draw_mask(rng, shape, net.dropout_rate), net.dropout_rate, seed)


def _draw_mask(rng, shape, rate):
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


class FeedforwardQ:
    """Multi-layer perceptron producing one value per action.

    Parameters are uniform in +-1/sqrt(fan_in) unless copied from elsewhere.
    """

    kind = "feedforward"

    def __init__(self, layout, params, dropout_rate=0.0, seed=None):
        layout = np.asarray(layout, dtype=np.int64).reshape(-1, 3)
        if layout.shape[0] == 0:
            raise UsageError("network needs at least one layer")
        for l in range(1, layout.shape[0]):
            if layout[l, 0] != layout[l - 1, 1]:
                raise UsageError(f"layer {l} fan_in {layout[l, 0]} != previous fan_out {layout[l - 1, 1]}")
        if not 0.0 <= dropout_rate < 1.0:
            raise UsageError("dropout_rate must be in [0, 1)")
        n = int(sum(i * o + o for i, o, _ in layout))
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (n,):
            raise UsageError(f"expected {n} parameters, got {params.shape}")
        self.layout = layout
        self.params = params
        self.dropout_rate = float(dropout_rate)
        self.seed = seed

    @classmethod
    def create(cls, sizes, activation="relu", output_activation="identity", dropout_rate=0.0, seed=0):
        """``sizes`` = [input, hidden..., actions]."""
        sizes = list(sizes)
        if len(sizes) < 2:
            raise UsageError("sizes needs an input and an output width")
        acts = [activation] * (len(sizes) - 2) + [output_activation]
        layout = [(sizes[i], sizes[i + 1], _kernels.ACTIVATIONS[acts[i]]) for i in range(len(sizes) - 1)]
        rng = np.random.default_rng(seed)
        chunks = []
        for fan_in, fan_out, _ in layout:
            bound = 1.0 / math.sqrt(fan_in)
            chunks.append(rng.uniform(-bound, bound, fan_in * fan_out))
            chunks.append(rng.uniform(-bound, bound, fan_out))
        return cls(layout, np.concatenate(chunks), dropout_rate, seed)

    @property
    def input_dim(self) -> int:
        return int(self.layout[0, 0])

    @property
    def action_count(self) -> int:
        return int(self.layout[-1, 1])

    @property
    def parameter_count(self) -> int:
        return self.params.size

    @property
    def mask_width(self) -> int:
        return int(self.layout[:, 0].sum())

    @property
    def layers(self):
        """(W, b, activation name) views into ``params``."""
        out, off = [], 0
        for fan_in, fan_out, act in self.layout:
            W = self.params[off:off + fan_in * fan_out].reshape(fan_in, fan_out)
            off += fan_in * fan_out
            out.append((W, self.params[off:off + fan_out], _ACT_NAMES[int(act)]))
            off += fan_out
        return out

    def with_params(self, params) -> "FeedforwardQ":
        return FeedforwardQ(self.layout, np.array(params, dtype=np.float64), self.dropout_rate, self.seed)

    def copy(self) -> "FeedforwardQ":
        return self.with_params(self.params)

    def same_shape(self, other) -> bool:
        return isinstance(other, FeedforwardQ) and np.array_equal(self.layout, other.layout)

    def inputs(self, ids, features):
        if features is None:
            raise UsageError("feedforward approximator needs state features")
        return features

    def _check(self, X, masks):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise UsageError(f"feature width {X.shape[-1]} != network input {self.input_dim}")
        if masks is not None:
            if isinstance(masks, DropoutMask):
                if masks.rate != self.dropout_rate:
                    raise UsageError("mask was drawn for a different dropout rate")
                masks = masks.values
            masks = np.broadcast_to(masks, (X.shape[0], masks.shape[-1]))
            if masks.shape[1] != self.mask_width:
                raise UsageError(f"mask width {masks.shape[1]} != {self.mask_width}")
        return X, masks

    def values(self, X, masks=None) -> np.ndarray:
        X, masks = self._check(X, masks)
        return _kernels.mlp_forward(self.params, self.layout, X, masks)

    def sample_masks(self, batch: int, rng) -> np.ndarray | None:
        if self.dropout_rate == 0.0:
            return None
        return _draw_mask(rng, (batch, self.mask_width), self.dropout_rate)

    def grad(self, X, actions, dvalues, masks=None) -> np.ndarray:
        X, masks = self._check(X, masks)
        dout = np.zeros((X.shape[0], self.action_count))
        dout[np.arange(X.shape[0]), actions] = dvalues
        return _kernels.mlp_backward(self.params, self.layout, X, masks, dout)

    def grad_outputs(self, X, dout, masks=None) -> np.ndarray:
        """Gradient for an arbitrary (B, A) upstream signal (used by MLE fits)."""
        X, masks = self._check(X, masks)
        return _kernels.mlp_backward(self.params, self.layout, X, masks, np.asarray(dout, dtype=np.float64))

    def to_dict(self) -> dict:
        return {
            "format": "offbrl-approximator", "version": CHECKPOINT_VERSION, "kind": self.kind,
            "layers": [[int(i), int(o), _ACT_NAMES[int(a)]] for i, o, a in self.layout],
            "dropout_rate": self.dropout_rate, "seed": self.seed,
            "params": [float(x) for x in self.params],
        }


class TabularQ:
    """Dense state x action table with the network surface.

    Dropout passes degenerate to the deterministic row lookup.
    """

    kind = "tabular"
    dropout_rate = 0.0

    def __init__(self, table):
        table = np.array(table, dtype=np.float64)
        if table.ndim != 2:
            raise UsageError("table must be 2-D")
        if not np.isfinite(table).all():
            raise UsageError("table entries must be finite")
        self.shape = table.shape
        self.params = table.ravel()

    @classmethod
    def zeros(cls, state_count, action_count):
        return cls(np.zeros((state_count, action_count)))

    @property
    def table(self) -> np.ndarray:
        return self.params.reshape(self.shape)

    @property
    def action_count(self) -> int:
        return self.shape[1]

    @property
    def parameter_count(self) -> int:
        return self.params.size

    def with_params(self, params) -> "TabularQ":
        return TabularQ(np.asarray(params, dtype=np.float64).reshape(self.shape))

    def copy(self) -> "TabularQ":
        return self.with_params(self.params)

    def same_shape(self, other) -> bool:
        return isinstance(other, TabularQ) and other.shape == self.shape

    def inputs(self, ids, features):
        return ids

    def values(self, ids, masks=None) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.min(initial=0) < 0 or ids.max(initial=0) >= self.shape[0]:
            raise UsageError("state id outside the table")
        return self.table[ids]

    def sample_masks(self, batch, rng):
        return None

    def grad(self, ids, actions, dvalues, masks=None) -> np.ndarray:
        g = np.zeros(self.shape)
        np.add.at(g, (np.asarray(ids), np.asarray(actions)), dvalues)
        return g.ravel()

    def to_dict(self) -> dict:
        return {"format": "offbrl-approximator", "version": CHECKPOINT_VERSION, "kind": self.kind,
                "shape": list(self.shape), "params": [float(x) for x in self.params]}


@dataclass(frozen=True, eq=False)
class TargetCopy:
    net: FeedforwardQ | TabularQ
    polyak_rate: float = 0.005

    def __post_init__(self):
        if not 0.0 < self.polyak_rate <= 1.0:
            raise UsageError("polyak_rate must be in (0, 1]")

    @classmethod
    def of(cls, source, polyak_rate=0.005) -> "TargetCopy":
        return cls(source.copy(), polyak_rate)

    @property
    def params(self):
        return self.net.params


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def forward(net, state, mask=None) -> np.ndarray:
    """Action values at one state (feature vector or tabular id)."""
    if isinstance(net, TabularQ):
        return net.values(np.atleast_1d(state))[0].copy()
    X, single = _as_batch(state)
    if mask is not None and net.dropout_rate == 0.0 and isinstance(mask, DropoutMask):
        mask = None
    out = net.values(X, mask)
    return out[0] if single else out


def stochastic_passes(net, X, num_passes: int, rng) -> np.ndarray:
    """(M, B, A) values from M dropout passes; one mask per (pass, sample)."""
    if num_passes < 1:
        raise UsageError("need at least one Monte Carlo pass")
    B = len(X)
    out = []
    for _ in range(num_passes):
        out.append(net.values(X, net.sample_masks(B, rng)))
    return np.stack(out)


def mc_lower_bound(net, state, num_passes: int = 5, rng=None) -> np.ndarray:
    """Per-action minimum over ``num_passes`` stochastic dropout passes."""
    if num_passes < 1:
        raise UsageError("need at least one Monte Carlo pass")
    rng = rng if rng is not None else np.random.default_rng()
    if isinstance(net, TabularQ):
        ids = np.atleast_1d(state)
        out = net.values(ids)
        return out[0].copy() if np.ndim(state) == 0 else out
    X, single = _as_batch(state)
    out = stochastic_passes(net, X, num_passes, rng).min(axis=0)
    return out[0] if single else out


def smooth_l1(prediction, target, delta: float = 1.0):
    """Huber-style loss with threshold ``delta``; returns (loss, dloss/dprediction)."""
    d = np.asarray(prediction, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    ad = np.abs(d)
    quad = ad <= delta
    loss = np.where(quad, 0.5 * d * d / delta, ad - 0.5 * delta)
    grad = np.where(quad, d / delta, np.sign(d))
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


def backward(net, state, mask, action: int, dloss_dvalue: float) -> np.ndarray:
    """Gradient of ``dloss_dvalue * value[action]`` w.r.t. all parameters."""
    if isinstance(net, TabularQ):
        return net.grad(np.atleast_1d(state), [action], [dloss_dvalue])
    X, _ = _as_batch(state)
    if mask is not None and not isinstance(mask, DropoutMask):
        raise UsageError("mask must be a DropoutMask")
    if not 0 <= action < net.action_count:
        raise UsageError(f"action {action} out of range")
    return net.grad(X, np.array([action]), np.array([dloss_dvalue], dtype=np.float64), mask)


def clip_gradient(gradient, clip_norm: float = 1.0, mode: str = "global") -> np.ndarray:
    g = np.asarray(gradient, dtype=np.float64)
    if not np.isfinite(g).all():
        raise TrainingError("non-finite gradient entries; step aborted")
    if mode == "global":
        norm = float(np.sqrt(np.dot(g, g)))
        if norm > clip_norm:
            g = g * (clip_norm / norm)
    elif mode == "elementwise":
        g = np.clip(g, -clip_norm, clip_norm)
    else:
        raise UsageError(f"unknown clip mode {mode!r}")
    return g


def clip_and_step(net, gradient, learning_rate: float = 1e-4, clip_norm: float = 1.0, mode: str = "global"):
    gradient = np.asarray(gradient, dtype=np.float64)
    if gradient.shape != net.params.shape:
        raise UsageError(f"gradient shape {gradient.shape} != parameters {net.params.shape}")
    g = clip_gradient(gradient, clip_norm, mode)
    return net.with_params(net.params - learning_rate * g)


def polyak_update(target: TargetCopy, source_params, alpha: float | None = None) -> TargetCopy:
    alpha = target.polyak_rate if alpha is None else alpha
    if not 0.0 < alpha <= 1.0:
        raise UsageError("alpha must be in (0, 1]")
    src = np.asarray(getattr(source_params, "params", source_params), dtype=np.float64)
    if src.shape != target.params.shape:
        raise UsageError(f"shape mismatch {src.shape} vs {target.params.shape}")
    if alpha == 1.0:
        new = src.copy()
    else:
        new = (1.0 - alpha) * target.params + alpha * src
    return TargetCopy(target.net.with_params(new), target.polyak_rate)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def approximator_from_dict(d: dict):
    if d.get("format") != "offbrl-approximator":
        raise UsageError("not an approximator checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise UsageError(f"unsupported checkpoint version {d.get('version')}")
    if d["kind"] == "tabular":
        return TabularQ(np.array(d["params"], dtype=np.float64).reshape(d["shape"]))
    layout = [(i, o, _kernels.ACTIVATIONS[a]) for i, o, a in d["layers"]]
    return FeedforwardQ(layout, np.array(d["params"], dtype=np.float64), d["dropout_rate"], d.get("seed"))


def save_checkpoint(net, path, **header) -> None:
    d = net.to_dict()
    d.update(header)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(d, fh)


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        return approximator_from_dict(json.load(fh))
