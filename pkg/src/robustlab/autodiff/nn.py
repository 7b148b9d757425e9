"""Layers, the ``Classifier`` container and the architecture catalog."""

from __future__ import annotations

import contextlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .tensor import Tensor, get_default_dtype


def glorot_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(get_default_dtype())


class Layer:
    """Base layer: named parameters, named buffers and a shape rule."""

    kind = "layer"

    def __init__(self):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def output_shape(self, input_shape: tuple) -> tuple:
        return input_shape

    def forward(self, x: Tensor, training: bool) -> Tensor:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind}


class Linear(Layer):
    kind = "linear"

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.params["weight"] = Tensor(glorot_uniform(rng, (n_out, n_in), n_in, n_out), requires_grad=True)
        self.params["bias"] = Tensor(np.zeros(n_out, dtype=get_default_dtype()), requires_grad=True)

    def output_shape(self, input_shape):
        if input_shape != (self.n_in,):
            raise ValueError(f"linear layer expects ({self.n_in},), got {input_shape}")
        return (self.n_out,)

    def forward(self, x, training):
        return F.linear(x, self.params["weight"], self.params["bias"])

    def describe(self):
        return {"kind": self.kind, "in": self.n_in, "out": self.n_out}


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, padding: int, rng: np.random.Generator):
        super().__init__()
        self.c_in, self.c_out, self.kernel, self.stride, self.padding = c_in, c_out, kernel, stride, padding
        shape = (c_out, c_in, kernel, kernel)
        self.params["weight"] = Tensor(
            glorot_uniform(rng, shape, c_in * kernel * kernel, c_out * kernel * kernel), requires_grad=True
        )
        self.params["bias"] = Tensor(np.zeros(c_out, dtype=get_default_dtype()), requires_grad=True)

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[0] != self.c_in:
            raise ValueError(f"conv layer expects ({self.c_in}, H, W), got {input_shape}")
        _, h, w = input_shape
        ho = F.conv_output_size(h, self.kernel, self.stride, self.padding)
        wo = F.conv_output_size(w, self.kernel, self.stride, self.padding)
        if ho < 1 or wo < 1:
            raise ValueError(f"input {h}x{w} too small for conv kernel {self.kernel}")
        return (self.c_out, ho, wo)

    def forward(self, x, training):
        return F.conv2d(x, self.params["weight"], self.params["bias"], self.stride, self.padding)

    def describe(self):
        return {
            "kind": self.kind,
            "in": self.c_in,
            "out": self.c_out,
            "kernel": self.kernel,
            "stride": self.stride,
            "padding": self.padding,
        }


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        dtype = get_default_dtype()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.params["gamma"] = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.params["beta"] = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def output_shape(self, input_shape):
        if input_shape[0] != self.channels:
            raise ValueError(f"batch norm expects {self.channels} channels, got {input_shape}")
        return input_shape

    def forward(self, x, training):
        return F.batch_norm(
            x,
            self.params["gamma"],
            self.params["beta"],
            self.buffers["running_mean"],
            self.buffers["running_var"],
            training,
            self.momentum,
            self.eps,
        )

    def describe(self):
        return {"kind": self.kind, "channels": self.channels, "momentum": self.momentum, "eps": self.eps}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training):
        return x.relu()


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x, training):
        return x.flatten(1)


def layer_from_descriptor(desc: dict, rng: np.random.Generator) -> Layer:
    kind = desc["kind"]
    if kind == "linear":
        return Linear(desc["in"], desc["out"], rng)
    if kind == "conv2d":
        return Conv2d(desc["in"], desc["out"], desc["kernel"], desc["stride"], desc.get("padding", 0), rng)
    if kind == "batchnorm":
        return BatchNorm(desc["channels"], desc.get("momentum", 0.1), desc.get("eps", 1e-5))
    if kind == "relu":
        return ReLU()
    if kind == "flatten":
        return Flatten()
    raise ValueError(f"unknown layer kind {kind!r}")


@dataclass
class Classifier:
    """Sequential differentiable map from images to class logits."""

    layers: list
    input_shape: tuple
    num_classes: int
    kind: str = "custom"
    mode: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        shape = tuple(self.input_shape)
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except ValueError as exc:
                raise ValueError(f"layer {i} ({layer.kind}): {exc}") from None
        if shape != (self.num_classes,):
            raise ValueError(f"architecture ends with shape {shape}, expected ({self.num_classes},)")
        self.input_shape = tuple(self.input_shape)

    # registry -----------------------------------------------------------
    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                out[f"{i}.{layer.kind}.{name}"] = p
        return out

    @property
    def params(self) -> "OrderedDict[str, Tensor]":
        return self.named_parameters()

    def named_buffers(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for i, layer in enumerate(self.layers):
            for name, b in layer.buffers.items():
                out[f"{i}.{layer.kind}.{name}"] = b
        return out

    def parameter_count(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def descriptor(self) -> dict:
        return {
            "kind": self.kind,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [layer.describe() for layer in self.layers],
            "meta": self.meta,
        }

    # modes ----------------------------------------------------------------
    def train(self) -> "Classifier":
        self.mode = "train"
        return self

    def eval(self) -> "Classifier":
        self.mode = "eval"
        return self

    @contextlib.contextmanager
    def evaluating(self):
        """Temporarily switch to eval mode and stop parameter gradients."""
        previous = self.mode
        flags = {name: p.requires_grad for name, p in self.named_parameters().items()}
        self.mode = "eval"
        for p in self.named_parameters().values():
            p.requires_grad = False
        try:
            yield self
        finally:
            self.mode = previous
            for name, p in self.named_parameters().items():
                p.requires_grad = flags[name]

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    # compute --------------------------------------------------------------
    def __call__(self, batch) -> Tensor:
        return self.forward(batch)

    def forward(self, batch) -> Tensor:
        if not isinstance(batch, Tensor):
            batch = Tensor(batch)
        if batch.shape[1:] != self.input_shape:
            raise ValueError(
                f"batch of shape {batch.shape} does not match model input {self.input_shape} "
                "(expected (B,) + input_shape)"
            )
        training = self.mode == "train"
        out = batch
        for layer in self.layers:
            out = layer.forward(out, training)
        return out

    def predict(self, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
        """Arg-max labels in eval mode; ties resolve to the lowest class index."""
        from .tensor import no_grad

        preds = []
        with self.evaluating(), no_grad():
            for start in range(0, len(images), batch_size):
                logits = self.forward(Tensor(images[start : start + batch_size])).data
                preds.append(np.argmax(logits, axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.intp)

    def copy(self) -> "Classifier":
        from .serialize import classifier_from_blocks

        return classifier_from_blocks(self.descriptor(), self.state())

    def state(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict((k, p.data.copy()) for k, p in self.named_parameters().items())
        out.update((k, b.copy()) for k, b in self.named_buffers().items())
        return out

    def load_state(self, state: dict) -> None:
        for k, p in self.named_parameters().items():
            if state[k].shape != p.shape:
                raise ValueError(f"parameter {k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)
        for k, b in self.named_buffers().items():
            b[...] = state[k]


ARCHITECTURES = ("conv_small", "mlp", "custom")


def build_architecture(
    kind: str,
    input_shape=(1, 28, 28),
    num_classes: int = 10,
    seed: int = 0,
    layers: list | None = None,
    hidden: int = 128,
    padding: int = 0,
) -> Classifier:
    """Build a freshly initialised classifier (Glorot-uniform weights, zero biases).

    ``conv_small``: three 4x4 stride-2 convolutions (16, 32, 64 channels,
    no padding by default), each followed by ReLU and batch norm, then a ``hidden``-unit
    ReLU layer and the output layer. ``mlp``: four 128-unit hidden layers with
    ReLU and batch norm. ``custom``: ``layers`` is a list of layer descriptors.
    """
    rng = np.random.default_rng(seed)
    input_shape = tuple(int(s) for s in input_shape)
    if not input_shape or min(input_shape) < 1:
        raise ValueError(f"input shape must be positive, got {input_shape}")
    built: list[Layer] = []
    if kind == "conv_small":
        if len(input_shape) != 3:
            raise ValueError("conv_small needs a (C, H, W) input shape")
        shape = input_shape
        for channels in (16, 32, 64):
            conv = Conv2d(shape[0], channels, 4, 2, padding, rng)
            shape = conv.output_shape(shape)
            built += [conv, ReLU(), BatchNorm(channels)]
        built.append(Flatten())
        flat = int(np.prod(shape))
        built += [Linear(flat, hidden, rng), ReLU(), Linear(hidden, num_classes, rng)]
    elif kind == "mlp":
        n_in = int(np.prod(input_shape))
        if len(input_shape) > 1:
            built.append(Flatten())
        for _ in range(4):
            built += [Linear(n_in, 128, rng), ReLU(), BatchNorm(128)]
            n_in = 128
        built.append(Linear(n_in, num_classes, rng))
    elif kind == "custom":
        if not layers:
            raise ValueError("custom architecture needs a list of layer descriptors")
        built = [layer_from_descriptor(d, rng) for d in layers]
    else:
        raise ValueError(f"unknown architecture kind {kind!r}; choose one of {ARCHITECTURES}")
    return Classifier(built, input_shape, num_classes, kind=kind, meta={"seed": seed, "hidden": hidden, "padding": padding})
