"""Sequential CNN description, forward passes with activation capture, and
reverse-mode gradients of a class score with respect to any layer's
activations.

Layer arithmetic runs in float64 and is rounded to float32 after every
layer, so a recorded tape can reproduce any activation exactly from the one
below it. The finite-difference oracle re-runs the sub-network above a
layer without the per-layer rounding.
"""

from __future__ import annotations

import json
import struct
from contextlib import contextmanager
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    DimensionError,
    ModelValidationError,
    NonFiniteError,
    ParameterError,
    UnknownClassError,
    UnknownLayerError,
    WeightsFormatError,
)

INPUT_LAYER = "input"
LAYER_KINDS = ("conv2d", "relu", "maxpool2d", "flatten", "dense", "softmax")

WEIGHTS_MAGIC = b"RSAW"
WEIGHTS_VERSION = 1

# Subgradient used exactly at a ReLU kink. Module-level so the self-test
# battery can demonstrate what breaks under the other convention.
_relu_grad_at_zero = 0.0


@contextmanager
def relu_kink_gradient(value: float):
    """Temporarily override the ReLU subgradient at exactly zero (test hook)."""
    global _relu_grad_at_zero
    previous = _relu_grad_at_zero
    _relu_grad_at_zero = float(value)
    try:
        yield
    finally:
        _relu_grad_at_zero = previous


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a sequential network.

    Only the fields relevant to ``kind`` are set: conv2d uses in_channels,
    out_channels, kernel, stride, padding; maxpool2d uses window and stride;
    dense uses in_features and out_features.
    """

    name: str
    kind: str
    in_channels: int | None = None
    out_channels: int | None = None
    kernel: tuple[int, int] | None = None
    stride: int | None = None
    padding: str | None = None
    window: tuple[int, int] | None = None
    in_features: int | None = None
    out_features: int | None = None


def _validate_spec(spec: LayerSpec) -> None:
    if spec.kind not in LAYER_KINDS:
        raise ModelValidationError(f"layer {spec.name!r}: unknown kind {spec.kind!r}")
    if spec.kind == "conv2d":
        kh, kw = spec.kernel or (0, 0)
        if kh < 1 or kw < 1:
            raise ModelValidationError(f"layer {spec.name!r}: kernel must be positive")
        if spec.stride != 1:
            raise ModelValidationError(f"layer {spec.name!r}: conv2d supports stride 1 only")
        if spec.padding not in ("same", "valid"):
            raise ModelValidationError(f"layer {spec.name!r}: padding must be 'same' or 'valid'")
        if spec.padding == "same" and (kh % 2 == 0 or kw % 2 == 0):
            raise ModelValidationError(f"layer {spec.name!r}: same-padding requires odd kernel")
        if (spec.in_channels or 0) < 1 or (spec.out_channels or 0) < 1:
            raise ModelValidationError(f"layer {spec.name!r}: channel counts must be positive")
    elif spec.kind == "maxpool2d":
        wh, ww = spec.window or (0, 0)
        if wh < 1 or ww < 1 or (spec.stride or 0) < 1:
            raise ModelValidationError(f"layer {spec.name!r}: window and stride must be positive")
    elif spec.kind == "dense":
        if (spec.in_features or 0) < 1 or (spec.out_features or 0) < 1:
            raise ModelValidationError(f"layer {spec.name!r}: feature counts must be positive")


def _spec_output_shape(spec: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    if spec.kind == "conv2d":
        if len(shape) != 3:
            raise ModelValidationError(f"layer {spec.name!r}: expects channels x height x width input")
        c, h, w = shape
        if c != spec.in_channels:
            raise ModelValidationError(
                f"layer {spec.name!r}: expects {spec.in_channels} input channels, previous produces {c}"
            )
        kh, kw = spec.kernel
        if spec.padding == "same":
            oh, ow = h, w
        else:
            oh, ow = h - kh + 1, w - kw + 1
        if oh < 1 or ow < 1:
            raise ModelValidationError(f"layer {spec.name!r}: kernel larger than its input")
        return (spec.out_channels, oh, ow)
    if spec.kind == "maxpool2d":
        if len(shape) != 3:
            raise ModelValidationError(f"layer {spec.name!r}: expects channels x height x width input")
        c, h, w = shape
        wh, ww = spec.window
        if h < wh or w < ww:
            raise ModelValidationError(f"layer {spec.name!r}: window larger than its input")
        s = spec.stride
        return (c, (h - wh) // s + 1, (w - ww) // s + 1)
    if spec.kind == "relu":
        return shape
    if spec.kind == "flatten":
        return (int(np.prod(shape)),)
    if spec.kind == "dense":
        if len(shape) != 1 or shape[0] != spec.in_features:
            got = shape[0] if len(shape) == 1 else shape
            raise ModelValidationError(
                f"layer {spec.name!r}: expects {spec.in_features} input features, previous produces {got}"
            )
        return (spec.out_features,)
    if spec.kind == "softmax":
        if len(shape) != 1:
            raise ModelValidationError(f"layer {spec.name!r}: softmax expects a rank-1 input")
        return shape
    raise ModelValidationError(f"layer {spec.name!r}: unknown kind {spec.kind!r}")


def infer_shapes(input_shape: tuple[int, int, int], layers) -> dict[str, tuple[int, ...]]:
    """Per-layer activation shapes, starting from the model input."""
    shapes: dict[str, tuple[int, ...]] = {INPUT_LAYER: tuple(input_shape)}
    shape: tuple[int, ...] = tuple(input_shape)
    for spec in layers:
        shape = _spec_output_shape(spec, shape)
        shapes[spec.name] = shape
    return shapes


def _weight_shapes(spec: LayerSpec) -> tuple[tuple[int, ...], tuple[int, ...]] | None:
    if spec.kind == "conv2d":
        kh, kw = spec.kernel
        return (spec.out_channels, spec.in_channels, kh, kw), (spec.out_channels,)
    if spec.kind == "dense":
        return (spec.out_features, spec.in_features), (spec.out_features,)
    return None


@dataclass(frozen=True)
class Model:
    """An immutable sequential network plus its weights."""

    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    weights: dict[str, tuple[np.ndarray, np.ndarray]]
    class_count: int
    softmax_stripped: bool = False
    preprocessing: str = "unit_scale"

    def layer_names(self) -> tuple[str, ...]:
        return tuple(spec.name for spec in self.layers)

    def layer_index(self, name: str) -> int:
        for i, spec in enumerate(self.layers):
            if spec.name == name:
                return i
        raise UnknownLayerError(f"unknown layer {name!r}; valid layers: {', '.join(self.layer_names())}")

    def activation_shape(self, name: str) -> tuple[int, ...]:
        shapes = infer_shapes(self.input_shape, self.layers)
        if name not in shapes:
            raise UnknownLayerError(f"unknown layer {name!r}; valid layers: {', '.join(self.layer_names())}")
        return shapes[name]

    def has_softmax(self) -> bool:
        return bool(self.layers) and self.layers[-1].kind == "softmax"

    def strip_softmax(self) -> "Model":
        """Model with the final softmax removed; a no-op if there is none."""
        if not self.has_softmax():
            return self
        return replace(self, layers=self.layers[:-1], softmax_stripped=True)


def build_model(
    input_shape,
    layers,
    weights,
    class_count: int | None = None,
    preprocessing: str = "unit_scale",
) -> Model:
    """Validate a layer stack plus weights and assemble a Model.

    The shape chain is checked layer by layer, softmax may only appear as
    the final layer, and every weight tensor must match its spec exactly.
    """
    input_shape = tuple(int(d) for d in input_shape)
    if len(input_shape) != 3 or min(input_shape) < 1:
        raise ModelValidationError(f"input shape must be channels x height x width, got {input_shape}")
    layers = tuple(layers)
    if not layers:
        raise ModelValidationError("model must have at least one layer")
    names = [spec.name for spec in layers]
    if len(set(names)) != len(names):
        raise ModelValidationError("layer names must be unique")
    if INPUT_LAYER in names:
        raise ModelValidationError(f"layer name {INPUT_LAYER!r} is reserved")
    for spec in layers:
        _validate_spec(spec)
    for i, spec in enumerate(layers):
        if spec.kind == "softmax" and i != len(layers) - 1:
            raise ModelValidationError(f"layer {spec.name!r}: softmax may only be the final layer")
    shapes = infer_shapes(input_shape, layers)
    final_shape = shapes[layers[-1].name]
    if len(final_shape) != 1:
        raise ModelValidationError("the final layer must produce a rank-1 class-score vector")
    if class_count is None:
        class_count = final_shape[0]
    elif class_count != final_shape[0]:
        raise ModelValidationError(
            f"class count {class_count} does not match the final layer size {final_shape[0]}"
        )
    checked: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for spec in layers:
        expected = _weight_shapes(spec)
        if expected is None:
            if spec.name in weights:
                raise ModelValidationError(f"layer {spec.name!r}: kind {spec.kind!r} takes no weights")
            continue
        if spec.name not in weights:
            raise ModelValidationError(f"layer {spec.name!r}: weights missing")
        w, b = weights[spec.name]
        w = np.ascontiguousarray(w, dtype=np.float32)
        b = np.ascontiguousarray(b, dtype=np.float32)
        if w.shape != expected[0] or b.shape != expected[1]:
            raise ModelValidationError(
                f"layer {spec.name!r}: weight shapes {w.shape}/{b.shape} do not match {expected}"
            )
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ModelValidationError(f"layer {spec.name!r}: weights contain non-finite values")
        w.setflags(write=False)
        b.setflags(write=False)
        checked[spec.name] = (w, b)
    extra = set(weights) - set(checked)
    if extra:
        raise ModelValidationError(f"weights given for unknown layers: {sorted(extra)}")
    return Model(
        input_shape=input_shape,
        layers=layers,
        weights=checked,
        class_count=int(class_count),
        preprocessing=preprocessing,
    )


# ---------------------------------------------------------------------------
# Layer arithmetic (float64 in, float64 out)


def _conv2d_forward(x, spec, w, b):
    kh, kw = spec.kernel
    if spec.padding == "same":
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))
    n, c, oh, ow = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    wf = w.reshape(w.shape[0], -1).astype(np.float64)
    out = cols @ wf.T + b.astype(np.float64)
    return out.reshape(n, oh, ow, w.shape[0]).transpose(0, 3, 1, 2)


def _conv2d_backward(g, spec, w, in_shape):
    kh, kw = spec.kernel
    n, o, oh, ow = g.shape
    c, h, wd = in_shape
    gf = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
    wf = w.reshape(o, -1).astype(np.float64)
    cols = (gf @ wf).reshape(n, oh, ow, c, kh, kw)
    ph, pw = ((kh - 1) // 2, (kw - 1) // 2) if spec.padding == "same" else (0, 0)
    gx = np.zeros((n, c, h + 2 * ph, wd + 2 * pw))
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + oh, j : j + ow] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if ph or pw:
        gx = gx[:, :, ph : ph + h, pw : pw + wd]
    return gx


def _maxpool_windows(x, spec):
    wh, ww = spec.window
    s = spec.stride
    win = sliding_window_view(x, (wh, ww), axis=(2, 3))[:, :, ::s, ::s]
    return win.reshape(win.shape[:4] + (wh * ww,))


def _maxpool2d_forward(x, spec):
    flat = _maxpool_windows(x, spec)
    return flat.max(axis=-1)


def _maxpool2d_backward(g, spec, layer_input):
    # Ties route the gradient to the first maximal element in row-major
    # window order (argmax picks the first occurrence).
    flat = _maxpool_windows(layer_input, spec)
    idx = flat.argmax(axis=-1)
    wh, ww = spec.window
    s = spec.stride
    n, c, oh, ow = idx.shape
    di, dj = np.divmod(idx, ww)
    rows = np.arange(oh)[None, None, :, None] * s + di
    cols = np.arange(ow)[None, None, None, :] * s + dj
    nn = np.arange(n)[:, None, None, None]
    cc = np.arange(c)[None, :, None, None]
    gx = np.zeros((n, c) + layer_input.shape[2:])
    np.add.at(gx, (nn, cc, rows, cols), g)
    return gx


def _softmax_forward(z):
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _layer_forward(spec, x, wb):
    if spec.kind == "conv2d":
        return _conv2d_forward(x, spec, *wb)
    if spec.kind == "relu":
        return np.maximum(x, 0.0)
    if spec.kind == "maxpool2d":
        return _maxpool2d_forward(x, spec)
    if spec.kind == "flatten":
        return x.reshape(x.shape[0], -1)
    if spec.kind == "dense":
        w, b = wb
        return x @ w.astype(np.float64).T + b.astype(np.float64)
    if spec.kind == "softmax":
        return _softmax_forward(x)
    raise ModelValidationError(f"unknown layer kind {spec.kind!r}")


def _layer_backward(spec, g, layer_input, layer_output, wb):
    if spec.kind == "conv2d":
        return _conv2d_backward(g, spec, wb[0], layer_input.shape[1:])
    if spec.kind == "relu":
        gx = np.where(layer_input > 0, g, 0.0)
        if _relu_grad_at_zero != 0.0:
            gx = gx + np.where(layer_input == 0, _relu_grad_at_zero * g, 0.0)
        return gx
    if spec.kind == "maxpool2d":
        return _maxpool2d_backward(g, spec, layer_input)
    if spec.kind == "flatten":
        return g.reshape(layer_input.shape)
    if spec.kind == "dense":
        return g @ wb[0].astype(np.float64)
    if spec.kind == "softmax":
        p = layer_output
        return p * (g - (g * p).sum(axis=1, keepdims=True))
    raise ModelValidationError(f"unknown layer kind {spec.kind!r}")


# ---------------------------------------------------------------------------
# Forward passes and gradients


@dataclass(frozen=True)
class ForwardTape:
    """Recorded activations for one batch, keyed by layer name.

    ``start_layer`` is the input pseudo-layer for a full forward pass.
    Partial tapes produced by ``forward_from_layer`` start at the injected
    layer and record only the layers above it.
    """

    activations: dict[str, np.ndarray]
    outputs: np.ndarray
    start_layer: str = INPUT_LAYER


def _record(acts: dict, name: str, value: np.ndarray) -> np.ndarray:
    a32 = np.ascontiguousarray(value, dtype=np.float32)
    if not np.isfinite(a32).all():
        raise NonFiniteError = None  # pragma: no cover
    a32.setflags(write=False)
    acts[name] = a32
    return a32


def forward_with_tape(model: Model, batch) -> ForwardTape:
    """Run the whole network on a batch, recording every activation.

    The batch must be shaped N x input_shape. Activations are recorded as
    float32 after each layer and the next layer continues from the recorded
    value, so the tape is self-consistent.
    """
    x = np.ascontiguousarray(batch, dtype=np.float32)
    if x.ndim != 4 or x.shape[1:] != model.input_shape:
        raise DimensionError(
            f"batch shape {x.shape} does not match N x {model.input_shape}"
        )
    acts: dict[str, np.ndarray] = {}
    current = _record(acts, INPUT_LAYER, x).astype(np.float64)
    for spec in model.layers:
        out = _layer_forward(spec, current, model.weights.get(spec.name))
        current = _record(acts, spec.name, out).astype(np.float64)
    return ForwardTape(activations=acts, outputs=acts[model.layers[-1].name])


def forward_from_layer(
    model: Model,
    layer: str,
    activations,
    *,
    high_precision: bool = False,
    with_tape: bool = False,
):
    """Run the layers strictly above ``layer`` on the given activations.

    ``activations`` may omit or include the batch axis. With
    ``high_precision`` the arithmetic skips the per-layer float32 rounding,
    which the finite-difference oracle relies on.
    """
    start = 0 if layer == INPUT_LAYER else model.layer_index(layer) + 1
    expected = model.activation_shape(layer)
    a = np.asarray(activations, dtype=np.float64 if high_precision else np.float32)
    squeeze = a.shape == expected
    if squeeze:
        a = a[None]
    if a.shape[1:] != expected:
        raise DimensionError(f"activations shape {a.shape} does not match N x {expected}")
    acts: dict[str, np.ndarray] = {}
    if with_tape:
        current = _record(acts, layer, a).astype(np.float64)
    else:
        current = a.astype(np.float64)
    for spec in model.layers[start:]:
        out = _layer_forward(spec, current, model.weights.get(spec.name))
        if high_precision:
            current = out
        elif with_tape:
            current = _record(acts, spec.name, out).astype(np.float64)
        else:
            current = out.astype(np.float32).astype(np.float64)
    outputs = current if high_precision else current.astype(np.float32)
    if squeeze:
        outputs = outputs[0]
    if with_tape:
        return outputs, ForwardTape(activations=acts, outputs=acts[model.layers[-1].name], start_layer=layer)
    return outputs


def _check_class(model: Model, class_index: int) -> int:
    class_index = int(class_index)
    if not 0 <= class_index < model.class_count:
        raise UnknownClassError(f"class index {class_index} outside [0, {model.class_count})")
    return class_index


def gradients_at_layer(model: Model, tape: ForwardTape, layer: str, class_index: int) -> np.ndarray:
    """Gradient of the class score with respect to the named layer's
    activations, one tensor per batch element, shaped like the recorded
    activation."""
    if layer != INPUT_LAYER:
        model.layer_index(layer)  # raises UnknownLayerError
    if layer not in tape.activations:
        raise ParameterError(f"tape starting at {tape.start_layer!r} does not record layer {layer!r}")
    class_index = _check_class(model, class_index)
    start = 0 if layer == INPUT_LAYER else model.layer_index(layer) + 1
    above = model.layers[start:]
    n = tape.outputs.shape[0]
    g = np.zeros((n, model.class_count), dtype=np.float64)
    g[:, class_index] = 1.0
    below_name = layer
    input_names = [below_name] + [spec.name for spec in above[:-1]]
    for spec, in_name in zip(reversed(above), reversed(input_names)):
        layer_input = tape.activations[in_name].astype(np.float64)
        layer_output = tape.activations[spec.name].astype(np.float64)
        g = _layer_backward(spec, g, layer_input, layer_output, model.weights.get(spec.name))
    return g.astype(np.float32)


def finite_diff_gradient(
    model: Model,
    batch,
    layer: str,
    class_index: int,
    step: float,
    units=None,
):
    """Central-difference estimate of ``gradients_at_layer``.

    Perturbs the recorded activations of ``layer`` one unit at a time and
    re-runs the sub-network above it in float64. With ``units`` given (a
    sequence of full activation indices, batch axis included) only those
    entries are probed and a flat array of estimates is returned; otherwise
    every unit is probed and the full tensor comes back.
    """
    if step <= 0:
        raise ParameterError(f"step must be positive, got {step}")
    tape = forward_with_tape(model, batch)
    class_index = _check_class(model, class_index)
    if layer != INPUT_LAYER:
        model.layer_index(layer)
    acts = tape.activations[layer]
    if units is None:
        targets = list(np.ndindex(acts.shape))
    else:
        targets = [tuple(int(i) for i in u) for u in units]
    values = np.zeros(len(targets), dtype=np.float64)
    for t, idx in enumerate(targets):
        row = idx[0]
        base = acts[row].astype(np.float64)
        plus = base.copy()
        plus[idx[1:]] += step
        minus = base.copy()
        minus[idx[1:]] -= step
        y_plus = forward_from_layer(model, layer, plus, high_precision=True)[class_index]
        y_minus = forward_from_layer(model, layer, minus, high_precision=True)[class_index]
        values[t] = (y_plus - y_minus) / (2.0 * step)
    if units is None:
        return values.reshape(acts.shape).astype(np.float32)
    return values.astype(np.float32)


def _kink_state(model: Model, layer: str, acts_row: np.ndarray):
    """Signs of every downstream ReLU input and argmax of every pool window."""
    start = 0 if layer == INPUT_LAYER else model.layer_index(layer) + 1
    current = np.asarray(acts_row, dtype=np.float64)[None]
    state = []
    for spec in model.layers[start:]:
        if spec.kind == "relu":
            state.append(current > 0)
        elif spec.kind == "maxpool2d":
            state.append(_maxpool_windows(current, spec).argmax(axis=-1))
        current = _layer_forward(spec, current, model.weights.get(spec.name))
    return state


def probe_crosses_kink(model: Model, layer: str, base_row: np.ndarray, unit, step: float) -> bool:
    """True when perturbing one unit by +-step flips any downstream ReLU
    sign or max-pool argmax, which invalidates a central difference there."""
    plus = np.asarray(base_row, dtype=np.float64).copy()
    plus[tuple(unit)] += step
    minus = np.asarray(base_row, dtype=np.float64).copy()
    minus[tuple(unit)] -= step
    for a, b in zip(_kink_state(model, layer, plus), _kink_state(model, layer, minus)):
        if not np.array_equal(a, b):
            return True
    return False


def kink_margin_mask(model: Model, tape: ForwardTape, layer: str, margin: float = 1e-3) -> np.ndarray:
    """Boolean mask over the layer's activations marking units whose own
    value sits within ``margin`` of the kink of the layer directly above
    (ReLU at zero, or a max-pool tie inside the unit's window)."""
    acts = tape.activations[layer]
    mask = np.zeros(acts.shape, dtype=bool)
    start = 0 if layer == INPUT_LAYER else model.layer_index(layer) + 1
    if start >= len(model.layers):
        return mask
    above = model.layers[start]
    if above.kind == "relu":
        return np.abs(acts) <= margin
    if above.kind == "maxpool2d":
        wh, ww = above.window
        s = above.stride
        n, c, h, w = acts.shape
        oh = (h - wh) // s + 1
        ow = (w - ww) // s + 1
        for oy in range(oh):
            for ox in range(ow):
                win = acts[:, :, oy * s : oy * s + wh, ox * s : ox * s + ww]
                flat = win.reshape(n, c, wh * ww)
                order = np.sort(flat, axis=-1)
                top, second = order[..., -1], order[..., -2] if wh * ww > 1 else (order[..., -1], None)
                gap = top - second if second is not None else np.full_like(top, np.inf)
                near = np.abs(top[..., None] - flat) <= margin
                near[..., :] &= True
                # a unit is near a tie when it is within margin of the window max
                # and the window's top-two gap is itself within margin, or the
                # unit is a non-max value within margin of the max
                is_max = flat == top[..., None]
                risky = np.where(is_max, (gap <= margin)[..., None], near)
                mask[:, :, oy * s : oy * s + wh, ox * s : ox * s + ww] |= risky.reshape(n, c, wh, ww)
        return mask
    return mask


# ---------------------------------------------------------------------------
# Descriptor and weights files


def _spec_to_dict(spec: LayerSpec) -> dict:
    d = {"name": spec.name, "kind": spec.kind}
    if spec.kind == "conv2d":
        d.update(
            in_channels=spec.in_channels,
            out_channels=spec.out_channels,
            kernel=list(spec.kernel),
            stride=spec.stride,
            padding=spec.padding,
        )
    elif spec.kind == "maxpool2d":
        d.update(window=list(spec.window), stride=spec.stride)
    elif spec.kind == "dense":
        d.update(in_features=spec.in_features, out_features=spec.out_features)
    return d


def _spec_from_dict(d: dict) -> LayerSpec:
    try:
        name = str(d["name"])
        kind = str(d["kind"])
    except (KeyError, TypeError) as exc:
        raise ModelValidationError(f"layer entry missing name/kind: {d!r}") from exc
    kwargs = {}
    try:
        if kind == "conv2d":
            kwargs = dict(
                in_channels=int(d["in_channels"]),
                out_channels=int(d["out_channels"]),
                kernel=(int(d["kernel"][0]), int(d["kernel"][1])),
                stride=int(d.get("stride", 1)),
                padding=str(d.get("padding", "same")),
            )
        elif kind == "maxpool2d":
            kwargs = dict(
                window=(int(d["window"][0]), int(d["window"][1])),
                stride=int(d["stride"]),
            )
        elif kind == "dense":
            kwargs = dict(in_features=int(d["in_features"]), out_features=int(d["out_features"]))
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise ModelValidationError(f"layer {name!r}: malformed hyperparameters") from exc
    return LayerSpec(name=name, kind=kind, **kwargs)


def descriptor_dict(model: Model) -> dict:
    return {
        "input_shape": list(model.input_shape),
        "class_count": model.class_count,
        "preprocessing": model.preprocessing,
        "layers": [_spec_to_dict(spec) for spec in model.layers],
    }


def save_model(model: Model, descriptor_path, weights_path) -> None:
    """Write the JSON descriptor and the binary weights file."""
    Path(descriptor_path).write_text(json.dumps(descriptor_dict(model), indent=2) + "\n")
    blob = bytearray()
    blob += WEIGHTS_MAGIC
    blob += struct.pack("<I", WEIGHTS_VERSION)
    for spec in model.layers:
        if spec.name in model.weights:
            w, b = model.weights[spec.name]
            blob += w.astype("<f4").tobytes()
            blob += b.astype("<f4").tobytes()
    Path(weights_path).write_bytes(bytes(blob))


def load_model(descriptor_path, weights_path) -> Model:
    """Load a model from its JSON descriptor and binary weights file.

    The weights file starts with the magic bytes ``RSAW`` and a little-endian
    u32 version, followed by raw little-endian float32 blobs per layer in
    descriptor order (kernel/matrix first, then bias). Any size mismatch is
    a format error and no partial model is returned.
    """
    try:
        raw = json.loads(Path(descriptor_path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelValidationError(f"descriptor {descriptor_path} is not valid JSON: {exc}") from exc
    try:
        input_shape = tuple(int(d) for d in raw["input_shape"])
        class_count = int(raw["class_count"])
        layer_dicts = list(raw["layers"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelValidationError(f"descriptor {descriptor_path} is missing required fields") from exc
    preprocessing = str(raw.get("preprocessing", "unit_scale"))
    layers = tuple(_spec_from_dict(d) for d in layer_dicts)
    for spec in layers:
        _validate_spec(spec)

    blob = Path(weights_path).read_bytes()
    if blob[:4] != WEIGHTS_MAGIC:
        raise WeightsFormatError(f"{weights_path}: bad magic bytes {blob[:4]!r}")
    if len(blob) < 8:
        raise WeightsFormatError(f"{weights_path}: truncated header")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != WEIGHTS_VERSION:
        raise WeightsFormatError(f"{weights_path}: unsupported version {version}")
    offset = 8
    weights: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for spec in layers:
        shapes = _weight_shapes(spec)
        if shapes is None:
            continue
        arrays = []
        for shape in shapes:
            count = int(np.prod(shape))
            end = offset + 4 * count
            if end > len(blob):
                raise WeightsFormatError(
                    f"{weights_path}: truncated while reading layer {spec.name!r}"
                )
            arrays.append(np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape).copy())
            offset = end
        weights[spec.name] = (arrays[0], arrays[1])
    if offset != len(blob):
        raise WeightsFormatError(f"{weights_path}: {len(blob) - offset} trailing bytes")
    return build_model(input_shape, layers, weights, class_count=class_count, preprocessing=preprocessing)


# ---------------------------------------------------------------------------
# Built-in reference networks


def build_toy_relu_net() -> Model:
    """One-input, one-output net computing 1 - max(0, 1 - x).

    Built as dense(-1, bias 1) -> relu -> dense(-1, bias 1). The function is
    the identity below 1 and exactly flat above it, so the plain gradient at
    any input beyond 1 is zero even though the output changed.
    """
    layers = (
        LayerSpec(name="flat", kind="flatten"),
        LayerSpec(name="affine_in", kind="dense", in_features=1, out_features=1),
        LayerSpec(name="clip", kind="relu"),
        LayerSpec(name="affine_out", kind="dense", in_features=1, out_features=1),
    )
    weights = {
        "affine_in": (np.array([[-1.0]], dtype=np.float32), np.array([1.0], dtype=np.float32)),
        "affine_out": (np.array([[-1.0]], dtype=np.float32), np.array([1.0], dtype=np.float32)),
    }
    return build_model((1, 1, 1), layers, weights)


def build_linear_probe_net(height: int = 2, width: int = 2) -> Model:
    """Single-channel net whose output is the plain sum of its input grid."""
    n = height * width
    layers = (
        LayerSpec(name="flat", kind="flatten"),
        LayerSpec(name="score", kind="dense", in_features=n, out_features=1),
    )
    weights = {"score": (np.ones((1, n), dtype=np.float32), np.zeros(1, dtype=np.float32))}
    return build_model((1, height, width), layers, weights)


def default_attribution_layer(model: Model) -> str:
    """The customary attribution target: the model's last pooling layer,
    falling back to the last conv layer when there is no pooling."""
    for spec in reversed(model.layers):
        if spec.kind == "maxpool2d":
            return spec.name
    for spec in reversed(model.layers):
        if spec.kind == "conv2d":
            return spec.name
    raise ParameterError("model has no pooling or conv layer; pass an explicit layer")
