"""Minimal reverse-mode substrate for the actor and critic networks.

All arrays are 64-bit and batched along the first axis: a "vector" input is a
``(n, d)`` array with ``n = 1``.  Every primitive appends a backward closure to a
:class:`GradTape`; :func:`backward` replays the closures in exact reverse order.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

from .errors import ConfigError, InvariantError, UsageError

STD_FLOOR = 1e-5


class Activation(str, enum.Enum):
    RELU = "relu"
    IDENTITY = "identity"
    TANH = "tanh"


@dataclass
class DenseLayer:
    """Weights ``(out, in)``, bias ``(out,)`` and an activation.

    ``name`` is the checkpoint namespace; gradients come back keyed as
    ``f"{name}/weights"`` and ``f"{name}/bias"``.
    """

    weights: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.RELU
    name: str = "dense"

    def __post_init__(self) -> None:
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ConfigError(
                f"{self.name}: bias length {self.bias.shape} does not match "
                f"weights rows {self.weights.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{self.name}/weights", self.weights), (f"{self.name}/bias", self.bias)]


def init_dense(
    in_dim: int,
    out_dim: int,
    rng: np.random.Generator,
    activation: Activation = Activation.RELU,
    name: str = "dense",
) -> DenseLayer:
    """Glorot-uniform weights, zero bias."""
    limit = math.sqrt(6.0 / (in_dim + out_dim))
    w = rng.uniform(-limit, limit, size=(out_dim, in_dim))
    return DenseLayer(w, np.zeros(out_dim), Activation(activation), name)


def init_mlp(
    sizes: Sequence[int],
    rng: np.random.Generator,
    name: str,
    final_activation: Activation = Activation.RELU,
) -> list[DenseLayer]:
    """Stack of dense layers ``sizes[0] -> sizes[1] -> ...``; ReLU between."""
    layers = []
    n = len(sizes) - 1
    for i in range(n):
        act = final_activation if i == n - 1 else Activation.RELU
        layers.append(init_dense(sizes[i], sizes[i + 1], rng, act, f"{name}/layer{i}"))
    return layers


class Var:
    """A value recorded on a tape."""

    __slots__ = ("value", "id")

    def __init__(self, value: np.ndarray, id: int):
        self.value = value
        self.id = id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


class GradTape:
    """Ordered record of primitive ops with the forward values they cached."""

    def __init__(self, enabled: bool = True) -> None:
        self._ops: list[tuple[int, Callable[[np.ndarray, "_Accum"], None]]] = []
        self._next_id = 0
        self._consumed = False
        # inference-only tapes skip storing backward closures
        self.enabled = enabled

    def __len__(self) -> int:
        return len(self._ops)

    def _new_id(self) -> int:
        self._next_id += 1
        return self._next_id - 1

    def leaf(self, value: np.ndarray) -> Var:
        """Register an input whose gradient should be reported."""
        value = np.asarray(value, dtype=np.float64)
        if value.ndim == 1:
            value = value[None, :]
        return Var(value, self._new_id())

    def record(self, value: np.ndarray, backward_fn) -> Var:
        if self._consumed:
            raise UsageError("tape already consumed by backward()")
        out = Var(value, self._new_id())
        if self.enabled:
            self._ops.append((out.id, backward_fn))
        return out

    @property
    def last_id(self) -> int:
        if not self._ops:
            raise UsageError("empty tape")
        return self._ops[-1][0]


class _Accum:
    def __init__(self) -> None:
        self.vars: dict[int, np.ndarray] = {}
        self.params: dict[str, np.ndarray] = {}

    def add_var(self, var: Var, g: np.ndarray) -> None:
        cur = self.vars.get(var.id)
        self.vars[var.id] = g if cur is None else cur + g

    def add_param(self, key: str, g: np.ndarray) -> None:
        cur = self.params.get(key)
        self.params[key] = g if cur is None else cur + g


@dataclass
class Gradients:
    params: dict[str, np.ndarray] = field(default_factory=dict)
    inputs: dict[int, np.ndarray] = field(default_factory=dict)

    def wrt(self, var: Var) -> np.ndarray:
        """Gradient w.r.t. a leaf; zeros if the leaf did not influence the output."""
        return self.inputs.get(var.id, np.zeros_like(var.value))


def _as_var(x, tape: GradTape) -> Var:
    return x if isinstance(x, Var) else tape.leaf(x)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise InvariantError(f"non-finite values in {what}")


# ---------------------------------------------------------------- primitives


def dense_forward(layer: DenseLayer, x, tape: GradTape) -> Var:
    """``activation(x @ W.T + b)`` for every row of ``x``."""
    x = _as_var(x, tape)
    if x.value.shape[-1] != layer.in_dim:
        raise ConfigError(
            f"{layer.name}: input width {x.value.shape[-1]} != layer input {layer.in_dim}"
        )
    w, b = layer.weights, layer.bias
    z = x.value @ w.T + b
    act = layer.activation
    if act is Activation.RELU:
        y = np.maximum(z, 0.0)
    elif act is Activation.TANH:
        y = np.tanh(z)
    else:
        y = z
    _check_finite(y, layer.name)
    xin = x.value
    wkey, bkey = f"{layer.name}/weights", f"{layer.name}/bias"

    def back(g: np.ndarray, acc: _Accum) -> None:
        if act is Activation.RELU:
            # subgradient 0 at the kink
            g = g * (z > 0.0)
        elif act is Activation.TANH:
            g = g * (1.0 - y * y)
        acc.add_param(wkey, g.T @ xin)
        acc.add_param(bkey, g.sum(axis=0))
        acc.add_var(x, g @ w)

    return tape.record(y, back)


def concat(parts: Sequence, tape: GradTape) -> Var:
    """Concatenate along the feature axis."""
    vs = [_as_var(p, tape) for p in parts]
    widths = [v.value.shape[1] for v in vs]
    y = np.concatenate([v.value for v in vs], axis=1)
    bounds = np.cumsum([0] + widths)

    def back(g: np.ndarray, acc: _Accum) -> None:
        for v, lo, hi in zip(vs, bounds[:-1], bounds[1:]):
            acc.add_var(v, g[:, lo:hi])

    return tape.record(y, back)


def scatter_matrix(index: np.ndarray, n: int) -> sparse.csr_matrix:
    """``(n, len(index))`` 0/1 matrix summing columns into rows ``index``.

    Columns within a row stay in ascending order, so sums are reproducible.
    """
    m = len(index)
    return sparse.csr_matrix(
        (np.ones(m), (np.asarray(index, dtype=np.int64), np.arange(m))), shape=(n, m)
    )


def gather_rows(x, index: np.ndarray, tape: GradTape) -> Var:
    """``x[index]``; the backward pass scatter-adds into the source rows."""
    x = _as_var(x, tape)
    index = np.asarray(index, dtype=np.int64)
    n = x.value.shape[0]
    y = x.value[index]

    def back(g: np.ndarray, acc: _Accum) -> None:
        acc.add_var(x, scatter_matrix(index, n) @ g)

    return tape.record(y, back)


def segment_sum(x, segment: np.ndarray, num_segments: int, tape: GradTape) -> Var:
    """Sum rows of ``x`` into ``num_segments`` buckets; empty buckets are zero.

    Rows are added in index order, so results are reproducible bit for bit.
    """
    x = _as_var(x, tape)
    segment = np.asarray(segment, dtype=np.int64)
    y = np.asarray(scatter_matrix(segment, num_segments) @ x.value)

    def back(g: np.ndarray, acc: _Accum) -> None:
        acc.add_var(x, g[segment])

    return tape.record(y, back)


def pair_dense(layer: DenseLayer, h, e, src: np.ndarray, dst: np.ndarray,
               tape: GradTape) -> Var:
    """``dense_forward(layer, [h[src], e, h[dst]])`` without materialising the concat.

    The weight matrix is split column-wise into from-node, edge and to-node
    blocks; node blocks are applied once per node and then gathered.
    """
    h, e = _as_var(h, tape), _as_var(e, tape)
    n, dh = h.value.shape
    de = e.value.shape[1]
    if layer.in_dim != 2 * dh + de:
        raise ConfigError(f"{layer.name}: input width {2 * dh + de} != layer input {layer.in_dim}")
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    w = layer.weights
    w_from, w_edge, w_to = w[:, :dh], w[:, dh:dh + de], w[:, dh + de:]
    z = (h.value @ w_from.T)[src] + e.value @ w_edge.T + (h.value @ w_to.T)[dst] + layer.bias
    act = layer.activation
    if act is Activation.RELU:
        y = np.maximum(z, 0.0)
    elif act is Activation.TANH:
        y = np.tanh(z)
    else:
        y = z
    _check_finite(y, layer.name)
    hv, ev = h.value, e.value
    wkey, bkey = f"{layer.name}/weights", f"{layer.name}/bias"

    def back(g: np.ndarray, acc: _Accum) -> None:
        if act is Activation.RELU:
            g = g * (z > 0.0)
        elif act is Activation.TANH:
            g = g * (1.0 - y * y)
        g_from = scatter_matrix(src, n) @ g
        g_to = scatter_matrix(dst, n) @ g
        acc.add_param(wkey, np.concatenate([g_from.T @ hv, g.T @ ev, g_to.T @ hv], axis=1))
        acc.add_param(bkey, g.sum(axis=0))
        acc.add_var(h, g_from @ w_from + g_to @ w_to)
        acc.add_var(e, g @ w_edge)

    return tape.record(y, back)


def mlp_forward(layers: Sequence[DenseLayer], x, tape: GradTape) -> Var:
    for layer in layers:
        x = dense_forward(layer, x, tape)
    return x


def backward(tape: GradTape, output_grad: np.ndarray) -> Gradients:
    """Reverse sweep from the last recorded op.

    ``output_grad`` is the gradient of a scalar loss with respect to the last
    op's output.  The tape cannot be replayed afterwards.
    """
    if tape._consumed:
        raise UsageError("backward() called twice on the same tape")
    out_id = tape.last_id
    tape._consumed = True
    acc = _Accum()
    acc.vars[out_id] = np.asarray(output_grad, dtype=np.float64)
    for op_id, fn in reversed(tape._ops):
        g = acc.vars.pop(op_id, None)
        if g is None:
            continue
        fn(g, acc)
    tape._ops.clear()
    return Gradients(acc.params, acc.vars)


# ---------------------------------------------------------------- distributions


@dataclass
class DiagonalNormal:
    """Independent Gaussians per action dimension (rows are batch entries).

    ``bounds`` has shape ``(k, 2)``.  The squash only shapes the mean; the
    log-density is that of the unclamped Gaussian, without a tanh Jacobian.
    """

    mean: np.ndarray
    std: np.ndarray
    bounds: np.ndarray
    mean_raw: np.ndarray | None = None
    std_raw: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def log_prob(self, action: np.ndarray) -> np.ndarray:
        return normal_log_prob(self, action)

    def entropy(self) -> np.ndarray:
        return np.sum(0.5 * math.log(2.0 * math.pi * math.e) + np.log(self.std), axis=-1)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return sample(self, rng)

    def clamp(self, action: np.ndarray) -> np.ndarray:
        return np.clip(action, self.bounds[:, 0], self.bounds[:, 1])

    def raw_grad(self, g_mean: np.ndarray, g_std: np.ndarray) -> np.ndarray:
        """Chain gradients w.r.t. (mean, std) back to the raw head output.

        Returns an array shaped like ``concat([mean_raw, std_raw])``.
        """
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        t = np.tanh(self.mean_raw)
        g_mraw = g_mean * 0.5 * (hi - lo) * (1.0 - t * t)
        g_sraw = g_std * _sigmoid(self.std_raw)
        return np.concatenate([g_mraw, g_sraw], axis=-1)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def normal_head(mean_raw, stddev_raw, bounds) -> DiagonalNormal:
    """Squash raw network outputs into a bounded-mean Gaussian.

    mean = lo + (hi - lo) * (tanh(mean_raw) + 1) / 2, std = softplus(stddev_raw) + 1e-5.
    """
    mean_raw = np.asarray(mean_raw, dtype=np.float64)
    stddev_raw = np.asarray(stddev_raw, dtype=np.float64)
    bounds = np.asarray(bounds, dtype=np.float64).reshape(-1, 2)
    if mean_raw.shape != stddev_raw.shape or mean_raw.shape[-1] != bounds.shape[0]:
        raise ConfigError(
            f"head shapes differ: mean {mean_raw.shape}, std {stddev_raw.shape}, "
            f"bounds {bounds.shape}"
        )
    lo, hi = bounds[:, 0], bounds[:, 1]
    if np.any(lo >= hi):
        raise ConfigError(f"empty action bounds {bounds.tolist()}")
    mean = lo + (hi - lo) * (np.tanh(mean_raw) + 1.0) * 0.5
    std = _softplus(stddev_raw) + STD_FLOOR
    return DiagonalNormal(mean, std, bounds, mean_raw, stddev_raw)


_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def normal_log_prob(dist: DiagonalNormal, action: np.ndarray) -> np.ndarray:
    """Sum over dimensions of the Gaussian log-density."""
    action = np.asarray(action, dtype=np.float64)
    if action.shape[-1] != dist.dim:
        raise ConfigError(f"action width {action.shape[-1]} != distribution dim {dist.dim}")
    if np.any(dist.std <= 0.0):
        raise InvariantError("non-positive standard deviation")
    z = (action - dist.mean) / dist.std
    return np.sum(-0.5 * z * z - np.log(dist.std) - _HALF_LOG_2PI, axis=-1)


def log_prob_grads(dist: DiagonalNormal, action: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """d log_prob / d mean and d log_prob / d std, elementwise."""
    diff = action - dist.mean
    inv = 1.0 / dist.std
    g_mean = diff * inv * inv
    g_std = diff * diff * inv * inv * inv - inv
    return g_mean, g_std


def sample(dist: DiagonalNormal, rng: np.random.Generator) -> np.ndarray:
    z = rng.standard_normal(dist.mean.shape)
    return dist.mean + dist.std * z


# ---------------------------------------------------------------- parameters


class ParameterStore:
    """Flat, ordered name -> array map shared by layers (arrays are not copied)."""

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}

    def add_layers(self, layers: Sequence[DenseLayer]) -> None:
        for layer in layers:
            for key, arr in layer.param_items():
                if key in self.params:
                    raise ConfigError(f"duplicate parameter {key}")
                self.params[key] = arr

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self) -> int:
        return len(self.params)

    def num_scalars(self) -> int:
        return sum(a.size for a in self.params.values())

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def load_from(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        """Copy checkpoint arrays in place so layers keep seeing the same buffers."""
        for key, arr in self.params.items():
            full = prefix + key
            if full not in arrays:
                raise ConfigError(f"checkpoint lacks parameter {full}")
            src = arrays[full]
            if src.shape != arr.shape:
                raise ConfigError(f"checkpoint shape {src.shape} != {arr.shape} for {full}")
            arr[...] = src


class Adam:
    """Adam over a :class:`ParameterStore`, updating arrays in place."""

    def __init__(
        self,
        store: ParameterStore,
        lr: float = 3e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.store = store
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = store.zeros_like()
        self.v = store.zeros_like()
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for key, p in self.store:
            g = grads.get(key)
            if g is None:
                continue
            m, v = self.m[key], self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------- checkpoints

# Layout: a NumPy ``.npz`` archive (zip of ``.npy`` members, each carrying dtype
# and shape in its header).  Member names are the namespaced parameter keys,
# e.g. ``actor/gnn/layer0/edge_net/weights``.  A ``__meta__`` member holds a
# UTF-8 JSON string of run metadata.


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: str = "{}") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
    payload["__meta__"] = np.frombuffer(meta.encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], str]:
    with np.load(Path(path), allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
        meta = bytes(data["__meta__"]).decode("utf-8") if "__meta__" in data.files else "{}"
    return arrays, meta
