"""Unidirectional LSTM-RNN acoustic/duration networks with streaming inference.

Layers are stacked as: optional ReLU feed-forward layers, LSTM layers with an
optional recurrent projection (LSTMP), and a linear output layer that is either
plain feed-forward or recurrent (its previous activation feeds back).

All step functions accept a single vector ``(dim,)`` or a batch ``(B, dim)``
and keep the dtype of the weights, so float32 models run in float32 while
gradient oracles can run the very same code in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

RELU = "relu"
LSTMP = "lstmp"
LSTM = "lstm"
LINEAR_RECURRENT = "linear_recurrent"
LINEAR = "linear"

LAYER_KINDS = (RELU, LSTMP, LSTM, LINEAR_RECURRENT, LINEAR)
RECURRENT_KINDS = (LSTMP, LSTM)
OUTPUT_KINDS = (LINEAR_RECURRENT, LINEAR)


class ShapeError(ValueError):
    """Raised when tensor or vector dimensions do not line up."""


class NumericError(ArithmeticError):
    """Raised when a non-finite value shows up in a forward or backward pass."""

    def __init__(self, message: str, layer: int | None = None, step: int | None = None):
        super().__init__(message)
        self.layer = layer
        self.step = step


def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Dense matrix-vector product with an explicit shape check."""
    m = np.asarray(m)
    v = np.asarray(v)
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeError(f"cannot multiply {m.shape} matrix by {v.shape} vector")
    return product(v, m)


def product(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``x @ w.T`` over the last axis of ``x``, with any number of leading rows.

    BLAS picks different kernels (and summation orders) for one row and for
    many, so a step-by-step run and a whole-sequence run would differ in the
    last bits. einsum reduces every output element the same way whatever the
    leading shape, which keeps streaming and batched evaluation bitwise equal.
    """
    return np.einsum("...f,nf->...n", x, w)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows and keeps float32 inputs in float32
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int
    projection: int = 0

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.units < 1:
            raise ValueError("layer needs at least one unit")
        if self.kind == LSTMP and self.projection < 1:
            raise ValueError("lstmp layer needs projection >= 1")
        if self.kind != LSTMP and self.projection:
            raise ValueError(f"{self.kind} layer cannot have a projection")

    @property
    def out_dim(self) -> int:
        return self.projection if self.kind == LSTMP else self.units

    @property
    def recurrent(self) -> bool:
        return self.kind in RECURRENT_KINDS or self.kind == LINEAR_RECURRENT


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture of a network predicting ``bundle_size`` frames per step."""

    input_dim: int
    layers: tuple[LayerSpec, ...]
    bundle_size: int = 1
    frame_dim: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.bundle_size < 1:
            raise ValueError("bundle_size must be >= 1")
        if self.input_dim < 1 or self.frame_dim < 1:
            raise ValueError("input_dim and frame_dim must be >= 1")
        if not self.layers:
            return
        for spec in self.layers[:-1]:
            if spec.kind in OUTPUT_KINDS:
                raise ValueError("output layers may only appear last")
        last = self.layers[-1]
        if last.kind not in OUTPUT_KINDS:
            raise ValueError("last layer must be a linear output layer")
        if last.units != self.output_dim:
            raise ValueError(
                f"output layer has {last.units} units, expected "
                f"bundle_size * frame_dim = {self.output_dim}"
            )

    @property
    def output_dim(self) -> int:
        return self.bundle_size * self.frame_dim

    def layer_input_dims(self) -> list[int]:
        dims = [self.input_dim]
        for spec in self.layers[:-1]:
            dims.append(spec.out_dim)
        return dims[: len(self.layers)]

    def parameter_count(self) -> int:
        return sum(w.size for layer in init_zero_weights(self) for w in layer.tensors())

    @classmethod
    def acoustic(
        cls,
        input_dim: int,
        frame_dim: int = 49,
        bundle_size: int = 1,
        relu_units: int = 128,
        cells: int = 128,
        projection: int = 64,
        lstm_layers: int = 3,
    ) -> "NetworkSpec":
        layers = [LayerSpec(RELU, relu_units)]
        layers += [LayerSpec(LSTMP, cells, projection) for _ in range(lstm_layers)]
        layers.append(LayerSpec(LINEAR_RECURRENT, bundle_size * frame_dim))
        return cls(input_dim, tuple(layers), bundle_size, frame_dim)

    @classmethod
    def duration(cls, input_dim: int, cells: int = 64) -> "NetworkSpec":
        return cls(input_dim, (LayerSpec(LSTM, cells), LayerSpec(LINEAR, 1)), 1, 1)


@dataclass
class LayerWeights:
    """Parameters of one layer.

    ``W`` maps the layer input, ``R`` the recurrent input (projected output for
    LSTMP, previous output for a recurrent output layer) and ``P`` is the
    recurrent projection. Gate rows of LSTM tensors are ordered input, forget,
    cell candidate, output.
    """

    W: np.ndarray
    b: np.ndarray
    R: np.ndarray | None = None
    P: np.ndarray | None = None

    def tensors(self) -> list[np.ndarray]:
        return [t for t in (self.W, self.R, self.P, self.b) if t is not None]

    def names(self) -> list[str]:
        return [n for n, t in zip("WRPb", (self.W, self.R, self.P, self.b)) if t is not None]

    def astype(self, dtype) -> "LayerWeights":
        def cast(t):
            return None if t is None else np.array(t, dtype=dtype)

        return LayerWeights(cast(self.W), cast(self.b), cast(self.R), cast(self.P))

    def copy(self) -> "LayerWeights":
        return self.astype(self.W.dtype)


def weight_shapes(spec: NetworkSpec) -> list[dict[str, tuple[int, ...]]]:
    """Tensor shapes per layer, keyed by W/R/P/b."""
    shapes = []
    for layer, in_dim in zip(spec.layers, spec.layer_input_dims()):
        n = layer.units
        if layer.kind in (RELU, LINEAR):
            shapes.append({"W": (n, in_dim), "b": (n,)})
        elif layer.kind == LINEAR_RECURRENT:
            shapes.append({"W": (n, in_dim), "R": (n, n), "b": (n,)})
        elif layer.kind == LSTMP:
            p = layer.projection
            shapes.append({"W": (4 * n, in_dim), "R": (4 * n, p), "P": (p, n), "b": (4 * n,)})
        else:
            shapes.append({"W": (4 * n, in_dim), "R": (4 * n, n), "b": (4 * n,)})
    return shapes


def _build(spec: NetworkSpec, make) -> list[LayerWeights]:
    layers = []
    for shapes in weight_shapes(spec):
        layers.append(LayerWeights(**{k: make(k, s) for k, s in shapes.items()}))
    return layers


def init_zero_weights(spec: NetworkSpec, dtype=np.float32) -> list[LayerWeights]:
    return _build(spec, lambda _k, s: np.zeros(s, dtype=dtype))


def init_weights(
    spec: NetworkSpec, seed: int, scale: float = 0.08, dtype=np.float32
) -> list[LayerWeights]:
    """Seeded uniform(-scale, scale) matrices; biases start at zero."""
    rng = np.random.default_rng(seed)

    def make(kind: str, shape):
        if kind == "b":
            return np.zeros(shape, dtype=dtype)
        return rng.uniform(-scale, scale, size=shape).astype(dtype)

    return _build(spec, make)


def check_weights(spec: NetworkSpec, weights: Sequence[LayerWeights]) -> None:
    expected = weight_shapes(spec)
    if len(weights) != len(expected):
        raise ShapeError(f"spec has {len(expected)} layers, got {len(weights)} weight sets")
    for idx, (layer, shapes) in enumerate(zip(weights, expected)):
        got = dict(zip(layer.names(), (t.shape for t in layer.tensors())))
        if got != shapes:
            raise ShapeError(f"layer {idx}: expected shapes {shapes}, got {got}")
        for t in layer.tensors():
            if not np.isfinite(t).all():
                raise NumericError(f"layer {idx} has non-finite weights", layer=idx)


@dataclass
class LSTMSlot:
    c: np.ndarray
    r: np.ndarray


@dataclass
class OutputSlot:
    y_prev: np.ndarray


@dataclass
class StreamState:
    """Recurrent carry for every layer; ``None`` for stateless layers."""

    slots: list = field(default_factory=list)

    @classmethod
    def zeros(cls, spec: NetworkSpec, batch: int | None = None, dtype=np.float32) -> "StreamState":
        lead = () if batch is None else (batch,)
        slots: list = []
        for layer in spec.layers:
            if layer.kind in RECURRENT_KINDS:
                slots.append(
                    LSTMSlot(np.zeros(lead + (layer.units,), dtype), np.zeros(lead + (layer.out_dim,), dtype))
                )
            elif layer.kind == LINEAR_RECURRENT:
                slots.append(OutputSlot(np.zeros(lead + (layer.units,), dtype)))
            else:
                slots.append(None)
        return cls(slots)

    def reset(self) -> None:
        for slot in self.slots:
            if isinstance(slot, LSTMSlot):
                slot.c = np.zeros_like(slot.c)
                slot.r = np.zeros_like(slot.r)
            elif isinstance(slot, OutputSlot):
                slot.y_prev = np.zeros_like(slot.y_prev)

    def copy(self) -> "StreamState":
        slots: list = []
        for slot in self.slots:
            if isinstance(slot, LSTMSlot):
                slots.append(LSTMSlot(slot.c.copy(), slot.r.copy()))
            elif isinstance(slot, OutputSlot):
                slots.append(OutputSlot(slot.y_prev.copy()))
            else:
                slots.append(None)
        return StreamState(slots)


def _check_finite(value: np.ndarray, what: str, layer: int) -> None:
    if not np.isfinite(value).all():
        raise NumericError(f"non-finite {what} in layer {layer}", layer=layer)


def relu_step(w: LayerWeights, x: np.ndarray, *, layer: int = 0, cache: dict | None = None) -> np.ndarray:
    pre = product(x, w.W) + w.b
    a = np.maximum(pre, 0)
    _check_finite(a, "relu activation", layer)
    if cache is not None:
        cache["x"] = x
        cache["pre"] = pre
    return a


def lstmp_step(
    w: LayerWeights, slot: LSTMSlot, x: np.ndarray, *, layer: int = 0, cache: dict | None = None
) -> np.ndarray:
    """One LSTM(P) step without peepholes; updates ``slot`` and returns the new r."""
    n = slot.c.shape[-1]
    z = product(x, w.W) + product(slot.r, w.R) + w.b
    i = sigmoid(z[..., :n])
    f = sigmoid(z[..., n : 2 * n])
    g = np.tanh(z[..., 2 * n : 3 * n])
    o = sigmoid(z[..., 3 * n :])
    c = f * slot.c + i * g
    tc = np.tanh(c)
    h = o * tc
    r = product(h, w.P) if w.P is not None else h
    _check_finite(r, "lstm output", layer)
    if cache is not None:
        cache.update(x=x, r_prev=slot.r, c_prev=slot.c, i=i, f=f, g=g, o=o, tc=tc, h=h)
    slot.c = c
    slot.r = r
    return r


def output_step(
    w: LayerWeights, slot: OutputSlot | None, a: np.ndarray, *, layer: int = 0, cache: dict | None = None
) -> np.ndarray:
    y = product(a, w.W) + w.b
    if slot is not None:
        if cache is not None:
            cache["y_prev"] = slot.y_prev
        y = y + product(slot.y_prev, w.R)
        slot.y_prev = y
    _check_finite(y, "output", layer)
    if cache is not None:
        cache["x"] = a
    return y


def layer_step(
    spec: LayerSpec, w: LayerWeights, slot, x: np.ndarray, *, layer: int = 0, cache: dict | None = None
) -> np.ndarray:
    if spec.kind == RELU:
        return relu_step(w, x, layer=layer, cache=cache)
    if spec.kind in RECURRENT_KINDS:
        return lstmp_step(w, slot, x, layer=layer, cache=cache)
    return output_step(w, slot, x, layer=layer, cache=cache)


def forward_step(
    spec: NetworkSpec,
    weights: Sequence[LayerWeights],
    state: StreamState,
    x: np.ndarray,
    caches: list | None = None,
) -> np.ndarray:
    """Advance the network by one step and return the ``K * d`` output vector.

    For ``bundle_size`` K > 1 the output holds K consecutive frames in
    temporal order and ``x`` is the linguistic input of the last bundled frame.
    """
    if x.shape[-1] != spec.input_dim:
        raise ShapeError(f"input has {x.shape[-1]} features, network expects {spec.input_dim}")
    a = x
    for idx, (lspec, w, slot) in enumerate(zip(spec.layers, weights, state.slots)):
        cache = None
        if caches is not None:
            cache = {}
            caches.append(cache)
        a = layer_step(lspec, w, slot, a, layer=idx, cache=cache)
    return a


def forward_sequence(
    spec: NetworkSpec,
    weights: Sequence[LayerWeights],
    xs: Iterable[np.ndarray],
    state: StreamState | None = None,
) -> np.ndarray:
    """Run ``forward_step`` over a whole sequence; rows of the result are steps."""
    if state is None:
        dtype = weights[0].W.dtype if weights else np.float32
        state = StreamState.zeros(spec, dtype=dtype)
    out = [forward_step(spec, weights, state, np.asarray(x)) for x in xs]
    if not out:
        return np.zeros((0, spec.output_dim), dtype=np.float32)
    return np.stack(out)


def forward_batched(spec: NetworkSpec, weights: Sequence[LayerWeights], xs: np.ndarray) -> np.ndarray:
    """Whole-sequence evaluation, one layer at a time.

    Input-side products are computed for all steps at once and only the
    recurrent parts loop over time. Results equal ``forward_sequence`` bitwise.
    """
    check_weights(spec, weights)
    a = np.asarray(xs)
    if a.ndim != 2 or a.shape[1] != spec.input_dim:
        raise ShapeError(f"expected a (T, {spec.input_dim}) sequence, got {a.shape}")
    t_len = len(a)
    for idx, (lspec, w) in enumerate(zip(spec.layers, weights)):
        if lspec.kind == RELU:
            a = np.maximum(product(a, w.W) + w.b, 0)
        elif lspec.kind in RECURRENT_KINDS:
            n = lspec.units
            u = product(a, w.W)
            c = np.zeros(n, a.dtype)
            r = np.zeros(lspec.out_dim, a.dtype)
            out = np.empty((t_len, lspec.out_dim), a.dtype)
            for t in range(t_len):
                z = u[t] + product(r, w.R) + w.b
                c = sigmoid(z[n : 2 * n]) * c + sigmoid(z[:n]) * np.tanh(z[2 * n : 3 * n])
                h = sigmoid(z[3 * n :]) * np.tanh(c)
                r = product(h, w.P) if w.P is not None else h
                out[t] = r
            a = out
        else:
            u = product(a, w.W) + w.b
            if lspec.kind == LINEAR_RECURRENT:
                y = np.zeros(lspec.units, a.dtype)
                for t in range(t_len):
                    y = u[t] + product(y, w.R)
                    u[t] = y
            a = u
        _check_finite(a, "activation", idx)
    return a if len(spec.layers) else np.zeros((t_len, 0), np.float32)


def step_flops(spec: NetworkSpec) -> dict[str, int]:
    """Multiply-add FLOPs (2 per MAC) of one network step, split by layer role."""
    recurrent = 0
    feedforward = 0
    output = 0
    for layer, shapes in zip(spec.layers, weight_shapes(spec)):
        macs = sum(int(np.prod(s)) for k, s in shapes.items() if k != "b")
        if layer.kind in RECURRENT_KINDS:
            # gates (3 sigmoid, 2 tanh) and the cell update counted as 1 flop per element
            recurrent += 2 * macs + 10 * layer.units
        elif layer.kind in OUTPUT_KINDS:
            output += 2 * macs + layer.units
        else:
            feedforward += 2 * macs + 2 * layer.units
    return {
        "recurrent": recurrent,
        "feedforward": feedforward,
        "output": output,
        "total": recurrent + feedforward + output,
    }
