"""The two recognition architectures, weight serialization, and prediction.

A model is an ordered list of layer specs plus a name -> array parameter
dict. Shapes are validated when a model is built and whenever weights are
loaded, so an inconsistent hand-edited model or file is rejected up front.

The 29-way label map is the fixed bijection A..Z -> 0..25, space -> 26,
delete -> 27, nothing -> 28.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autograd, tensor
from .errors import (ConfigError, ContractError, FileTruncatedError,
                     FormatError, NumericError, ShapeError)
from .rng import Rng, fill_uniform

LABELS: tuple[str, ...] = tuple(chr(ord("A") + i) for i in range(26)) + (
    "space", "delete", "nothing")
LABEL_TO_INDEX: dict[str, int] = {label: i for i, label in enumerate(LABELS)}

INPUT_SHAPE = (64, 64, 3)

WEIGHT_MAGIC = b"SLWT"
WEIGHT_VERSION = 1


@dataclass(frozen=True)
class Conv2d:
    kind = "conv2d"
    name: str
    out_channels: int
    kernel: int = 3
    padding: str = "valid"
    init: str = "he"


@dataclass(frozen=True)
class MaxPool:
    kind = "maxpool"


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"


@dataclass(frozen=True)
class Dense:
    kind = "dense"
    name: str
    units: int
    init: str = "he"


@dataclass(frozen=True)
class Activation:
    kind = "activation"
    fn: str


class Model:
    """An ordered layer stack with named parameters and a fixed input shape."""

    def __init__(self, model_kind: str, layers: list, params: dict,
                 input_shape=INPUT_SHAPE, backbone=frozenset(), frozen=frozenset()):
        self.kind = model_kind
        self.layers = list(layers)
        self.params = dict(params)
        self.input_shape = tuple(input_shape)
        self.backbone = frozenset(backbone)
        self.frozen = frozenset(frozen)
        self.shapes = self.validate()
        self.num_classes = self.shapes[-1][-1]

    def validate(self) -> list[tuple]:
        """Checks the layer chain and parameter shapes; returns per-layer output shapes."""
        shapes = []
        shape = self.input_shape
        seen = set()
        for layer in self.layers:
            if layer.kind == "conv2d":
                h, w, cin = shape
                k = layer.kernel
                if layer.padding == "valid" and (k > h or k > w):
                    raise ShapeError(f"{layer.name}: kernel {k} larger than input {h}x{w}")
                self._check_param(layer.name + ".w", (k, k, cin, layer.out_channels), seen)
                self._check_param(layer.name + ".b", (layer.out_channels,), seen)
                oh, ow = tensor.conv_output_hw(h, w, k, k, layer.padding)
                shape = (oh, ow, layer.out_channels)
            elif layer.kind == "maxpool":
                h, w, c = shape
                if h < 2 or w < 2:
                    raise ShapeError(f"maxpool input {h}x{w} is smaller than the 2x2 window")
                shape = (h // 2, w // 2, c)
            elif layer.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif layer.kind == "dense":
                if len(shape) != 1:
                    raise ShapeError(f"{layer.name}: dense input must be flat, got {shape}")
                self._check_param(layer.name + ".w", (shape[0], layer.units), seen)
                self._check_param(layer.name + ".b", (layer.units,), seen)
                shape = (layer.units,)
            elif layer.kind == "activation":
                if layer.fn not in tensor.ACTIVATION_KINDS:
                    raise ShapeError(f"unknown activation {layer.fn!r}")
            else:
                raise ShapeError(f"unknown layer kind {layer.kind!r}")
            shapes.append(shape)
        extra = set(self.params) - seen
        if extra:
            raise ShapeError(f"parameters not referenced by any layer: {sorted(extra)}")
        return shapes

    def _check_param(self, name, expected, seen):
        if name in seen:
            raise ShapeError(f"duplicate parameter name {name}")
        seen.add(name)
        if name not in self.params:
            raise ShapeError(f"missing parameter {name}")
        got = self.params[name].shape
        if tuple(got) != expected:
            raise ShapeError(f"parameter {name} has shape {tuple(got)}, expected {expected}")

    def forward(self, x: np.ndarray, want_caches: bool = False,
                scratch: tensor.Scratch | None = None):
        """Runs the stack on a batch; returns class probabilities.

        With ``want_caches`` it also returns the per-layer caches the
        backward pass consumes. ``scratch`` recycles the large intermediate
        buffers between calls; callers sharing the model across threads must
        not pass one.
        """
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"input shape {x.shape} does not match "
                             f"(n, {', '.join(map(str, self.input_shape))})")
        n = x.shape[0]
        take = scratch.take if scratch is not None else (
            lambda key, shape, dtype: np.empty(shape, dtype))
        caches = []
        fresh = False  # x is a buffer of ours, not the caller's array
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv2d":
                w = self.params[layer.name + ".w"].astype(x.dtype, copy=False)
                b = self.params[layer.name + ".b"].astype(x.dtype, copy=False)
                h, win, cin = x.shape[1:]
                k = layer.kernel
                ph, pw = (h + k - 1, win + k - 1) if layer.padding == "same" \
                    else (h, win)
                oh, ow = ph - k + 1, pw - k + 1
                cols_buf = take((i, "cols"), (n * oh * ow, k * k * cin), x.dtype)
                out_buf = take((i, "y"), (n, oh, ow, layer.out_channels), x.dtype)
                y, cols = tensor.conv2d_forward(x, w, b, padding=layer.padding,
                                                cols_buf=cols_buf, out_buf=out_buf,
                                                return_cols=True)
                if want_caches:
                    caches.append((x, cols))
                x = y
                fresh = True
            elif layer.kind == "maxpool":
                h, win, c = x.shape[1:]
                out_buf = take((i, "pool"), (n, h // 2, win // 2, c), x.dtype)
                idx_buf = take((i, "idx"), (n, h // 2, win // 2, c), np.int64) \
                    if want_caches else None
                x, argmax = tensor.maxpool2d_forward(x, want_argmax=want_caches,
                                                     out_buf=out_buf, idx_buf=idx_buf)
                caches.append(argmax)
                fresh = True
            elif layer.kind == "flatten":
                caches.append(x.shape)
                x = x.reshape(n, -1)
            elif layer.kind == "dense":
                w = self.params[layer.name + ".w"].astype(x.dtype, copy=False)
                b = self.params[layer.name + ".b"].astype(x.dtype, copy=False)
                caches.append(x)
                x = x @ w
                x += b
                fresh = True
            elif layer.fn == "relu" and fresh:
                # x is a freshly written buffer of ours, so relu may run in
                # place; the output doubles as the backward mask.
                np.maximum(x, 0, out=x)
                caches.append(x)
            else:
                x = tensor.activation_forward(layer.fn, x, check=False)
                caches.append(x)  # sigmoid/softmax backward uses the output
        if not np.isfinite(x).all():
            raise NumericError("model produced non-finite probabilities")
        return (x, caches) if want_caches else x

    def backward(self, d_out: np.ndarray, caches: list,
                 through_softmax: bool = False,
                 scratch: tensor.Scratch | None = None) -> dict[str, np.ndarray]:
        """Chains the per-layer backward passes; returns parameter gradients.

        By default the final softmax layer is skipped because the training
        loss hands back the fused gradient w.r.t. the logits; pass
        ``through_softmax=True`` when d_out really is d(probs).
        """
        layers = list(enumerate(self.layers))
        if (not through_softmax and layers and layers[-1][1].kind == "activation"
                and layers[-1][1].fn == "softmax"):
            layers = layers[:-1]
        take = scratch.take if scratch is not None else (
            lambda key, shape, dtype: np.empty(shape, dtype))
        grads: dict[str, np.ndarray] = {}
        internal = False  # whether d_out is our own buffer, safe to mutate
        for i, layer in reversed(layers):
            if layer.kind == "conv2d":
                x, cols = caches[i]
                w = self.params[layer.name + ".w"].astype(d_out.dtype, copy=False)
                ph, pw = (x.shape[1], x.shape[2]) if layer.padding == "valid" else \
                    (x.shape[1] + layer.kernel - 1, x.shape[2] + layer.kernel - 1)
                lg = autograd.conv2d_backward(
                    x, w, d_out, padding=layer.padding, cols=cols,
                    need_input_grad=(i > 0),
                    d_cols_buf=take((i, "d_cols"), cols.shape, d_out.dtype),
                    dx_buf=take((i, "dx"), (x.shape[0], ph, pw, x.shape[3]),
                                d_out.dtype))
                grads[layer.name + ".w"] = lg.d_params["w"]
                grads[layer.name + ".b"] = lg.d_params["b"]
                d_out = lg.d_input
                internal = True
            elif layer.kind == "maxpool":
                argmax = caches[i]
                d_out = autograd.maxpool2d_backward(
                    caches[i], d_out,
                    dx_buf=take((i, "dpool"), argmax.input_shape, d_out.dtype))
                internal = True
            elif layer.kind == "flatten":
                d_out = d_out.reshape(caches[i])
            elif layer.kind == "dense":
                x = caches[i]
                w = self.params[layer.name + ".w"].astype(d_out.dtype, copy=False)
                lg = autograd.dense_backward(x, w, d_out)
                grads[layer.name + ".w"] = lg.d_params["w"]
                grads[layer.name + ".b"] = lg.d_params["b"]
                d_out = lg.d_input
                internal = True
            elif layer.fn == "relu" and internal:
                np.multiply(d_out, caches[i] > 0, out=d_out)
            else:
                d_out = autograd.activation_backward(layer.fn, caches[i], d_out)
        return grads

    def astype(self, dtype) -> "Model":
        """A copy of this model with parameters cast to ``dtype`` (for check mode)."""
        params = {k: v.astype(dtype) for k, v in self.params.items()}
        return Model(self.kind, self.layers, params, self.input_shape,
                     self.backbone, self.frozen)


def _init_params(layers, input_shape, seed) -> dict[str, np.ndarray]:
    """He/Glorot-uniform weights from the seeded stream, zero biases.

    Each weight tensor draws a derived seed from the master stream in layer
    declaration order; biases consume nothing.
    """
    master = Rng(seed)
    params: dict[str, np.ndarray] = {}
    shape = tuple(input_shape)
    for layer in layers:
        if layer.kind == "conv2d":
            h, w, cin = shape
            k = layer.kernel
            fan_in = k * k * cin
            fan_out = k * k * layer.out_channels
            wshape = (k, k, cin, layer.out_channels)
            params[layer.name + ".w"] = _draw(master, wshape, layer.init, fan_in, fan_out)
            params[layer.name + ".b"] = np.zeros(layer.out_channels, dtype=np.float32)
            oh, ow = tensor.conv_output_hw(h, w, k, k, layer.padding)
            shape = (oh, ow, layer.out_channels)
        elif layer.kind == "maxpool":
            shape = (shape[0] // 2, shape[1] // 2, shape[2])
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif layer.kind == "dense":
            fan_in, fan_out = shape[0], layer.units
            params[layer.name + ".w"] = _draw(master, (fan_in, layer.units),
                                              layer.init, fan_in, fan_out)
            params[layer.name + ".b"] = np.zeros(layer.units, dtype=np.float32)
            shape = (layer.units,)
    return params


def _draw(master: Rng, shape, init: str, fan_in: int, fan_out: int) -> np.ndarray:
    if init == "he":
        limit = float(np.sqrt(6.0 / fan_in))
    elif init == "glorot":
        limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
    else:
        raise ValueError(f"unknown init {init!r}")
    flat = fill_uniform(master.derive_seed(), int(np.prod(shape)), -limit, limit)
    return flat.reshape(shape)


def build_asl_cnn(num_classes: int = 29, seed: int = 0) -> Model:
    """Three valid-padding conv/pool stages, then dense 128 and a softmax head.

    At the 64x64x3 input contract the spatial trace is
    64 -> 62 -> 31 -> 29 -> 14 -> 12 -> 6 and the flatten width is 2304.
    """
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    layers = [
        Conv2d("conv1", 32), Activation("relu"), MaxPool(),
        Conv2d("conv2", 64), Activation("relu"), MaxPool(),
        Conv2d("conv3", 64), Activation("relu"), MaxPool(),
        Flatten(),
        Dense("dense1", 128), Activation("relu"),
        Dense("dense2", num_classes, init="glorot"), Activation("softmax"),
    ]
    params = _init_params(layers, INPUT_SHAPE, seed)
    return Model("asl_cnn", layers, params)


VGG16_BLOCKS = ((64, 64), (128, 128), (256, 256, 256),
                (512, 512, 512), (512, 512, 512))


def _vgg16_backbone_layers() -> list:
    layers = []
    for bi, widths in enumerate(VGG16_BLOCKS, start=1):
        for ci, width in enumerate(widths, start=1):
            layers.append(Conv2d(f"block{bi}_conv{ci}", width, padding="same"))
            layers.append(Activation("relu"))
        layers.append(MaxPool())
    return layers


def build_vgg16_transfer(num_classes: int = 29, freeze_backbone: bool = False,
                         backbone_path=None, random_init: bool = False,
                         seed: int = 0) -> Model:
    """VGG16 convolutional body topped with dense 512 (sigmoid) and a softmax head.

    The body keeps spatial size with same padding and halves it at each of
    the five pools, so a 64x64 input flattens to 2*2*512 = 2048. Backbone
    weights come from a weight file; pass ``random_init=True`` to start from
    the seeded random fallback instead.
    """
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    if backbone_path is None and not random_init:
        raise ConfigError("no backbone weight file given; pass random_init=True "
                          "to build an untrained backbone explicitly")
    backbone_layers = _vgg16_backbone_layers()
    layers = backbone_layers + [
        Flatten(),
        Dense("head_dense1", 512, init="glorot"), Activation("sigmoid"),
        Dense("head_dense2", num_classes, init="glorot"), Activation("softmax"),
    ]
    params = _init_params(layers, INPUT_SHAPE, seed)
    backbone_names = frozenset(
        layer.name + suffix
        for layer in backbone_layers if layer.kind == "conv2d"
        for suffix in (".w", ".b"))
    model = Model("vgg16_transfer", layers, params,
                  backbone=backbone_names,
                  frozen=backbone_names if freeze_backbone else frozenset())
    if backbone_path is not None:
        stored = read_weight_file(backbone_path)
        missing = sorted(backbone_names - set(stored))
        if missing:
            raise FormatError(f"backbone file lacks tensors: {missing[:4]}...")
        for name in sorted(backbone_names):
            _install_tensor(model, name, stored[name])
    return model


def param_count(model: Model, trainable_only: bool = False) -> int:
    total = 0
    for name, value in model.params.items():
        if trainable_only and name in model.frozen:
            continue
        total += value.size
    return int(total)


def predict(model: Model, image: np.ndarray):
    """(label, index, probs) for one preprocessed [1,64,64,3] image in [0,1]."""
    image = np.asarray(image)
    if image.shape != (1,) + model.input_shape:
        raise ShapeError(f"predict expects shape {(1,) + model.input_shape}, "
                         f"got {tuple(image.shape)}")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ContractError("pixel values must lie in [0, 1]")
    probs = model.forward(image.astype(np.float32, copy=False))[0]
    index = int(np.argmax(probs))  # ties break to the lowest index
    return LABELS[index], index, probs


def save_weights(model: Model, path) -> None:
    """Writes every parameter tensor in declaration order, bit-exactly."""
    write_weight_file(path, model.params)


def write_weight_file(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<II", WEIGHT_VERSION, len(tensors)))
        for name, value in tensors.items():
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise FormatError(f"tensor name too long: {name[:32]}...")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", value.ndim))
            fh.write(struct.pack(f"<{value.ndim}I", *value.shape))
            fh.write(np.ascontiguousarray(value, dtype="<f4").tobytes())


def read_weight_file(path) -> dict[str, np.ndarray]:
    """Parses a weight file into an ordered name -> float32 array dict."""
    with open(path, "rb") as fh:
        data = fh.read()
    offset = 0

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise FileTruncatedError(f"weight file ends inside {what} "
                                     f"(needed {n} bytes at offset {offset})")
        chunk = data[offset:offset + n]
        offset += n
        return chunk

    if take(4, "magic") != WEIGHT_MAGIC:
        raise FormatError("not a weight file: bad magic bytes")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != WEIGHT_VERSION:
        raise FormatError(f"unsupported weight file version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, f"rank of {name}"))
        if not 1 <= rank <= 4:
            raise FormatError(f"tensor {name} has invalid rank {rank}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"extents of {name}"))
        size = int(np.prod(shape))
        raw = take(4 * size, f"data of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(
            np.float32, copy=True)
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes after the last tensor")
    return tensors


def _install_tensor(model: Model, name: str, value: np.ndarray) -> None:
    current = model.params.get(name)
    if current is None:
        raise FormatError(f"tensor {name} is not a parameter of model {model.kind}")
    if current.shape != value.shape:
        raise FormatError(f"tensor {name} has shape {tuple(value.shape)} in the file "
                          f"but the model expects {tuple(current.shape)}")
    model.params[name] = value


def load_weights(model: Model, path) -> Model:
    """Installs a weight file into ``model``, validating every name and shape."""
    stored = read_weight_file(path)
    missing = sorted(set(model.params) - set(stored))
    if missing:
        raise FormatError(f"weight file lacks tensors: {missing[:4]}"
                          f"{'...' if len(missing) > 4 else ''}")
    extra = sorted(set(stored) - set(model.params))
    if extra:
        raise FormatError(f"weight file has unknown tensors: {extra[:4]}"
                          f"{'...' if len(extra) > 4 else ''}")
    for name, value in stored.items():
        _install_tensor(model, name, value)
    return model
