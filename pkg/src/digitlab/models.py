"""The six-block recognizer, the SGAN generator and discriminator, and a
static shape tracer."""

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .layers import (
    Activation,
    BatchNorm2d,
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    MaxPool2d,
    Reshape,
    Upsample2x,
)

_OUTPUT_ACTIVATIONS = ("softmax", "sigmoid")


class ModelGraph:
    """An ordered trunk of named layers, optionally followed by parallel heads.

    Parameter names are ``"<layer>.<role>"``; layer names are unique across
    the trunk and all heads. ``forward`` returns one tensor, or a tuple with
    one entry per head.
    """

    def __init__(self, layers, heads=None, kind="model"):
        self.layers = OrderedDict(layers)
        self.heads = OrderedDict((k, OrderedDict(v)) for k, v in (heads or {}).items())
        self.kind = kind
        self.training = True
        names = list(self.layers) + [n for h in self.heads.values() for n in h]
        if len(names) != len(set(names)):
            raise ValueError("layer names must be unique")

    def _all_layers(self):
        yield from self.layers.items()
        for head in self.heads.values():
            yield from head.items()

    def parameters(self):
        return OrderedDict(
            (f"{lname}.{role}", t) for lname, layer in self._all_layers() for role, t in layer.params.items()
        )

    def buffers(self):
        return OrderedDict(
            (f"{lname}.{role}", b) for lname, layer in self._all_layers() for role, b in layer.buffers.items()
        )

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = np.zeros_like(p.data)

    @staticmethod
    def _run(seq, x, training, rng, update_stats, logits):
        items = list(seq.items())
        for i, (_, layer) in enumerate(items):
            if (logits and i == len(items) - 1 and isinstance(layer, Activation)
                    and layer.kind in _OUTPUT_ACTIVATIONS):
                break
            x = layer.forward(x, training=training, rng=rng, update_stats=update_stats)
        return x

    def forward(self, x, rng=None, update_stats=True, logits=False):
        """Run the graph. ``logits=True`` stops before the final softmax/sigmoid."""
        h = self._run(self.layers, x, self.training, rng, update_stats, logits)
        if not self.heads:
            return h
        return tuple(self._run(head, h, self.training, rng, update_stats, logits) for head in self.heads.values())

    __call__ = forward

    def state_dict(self):
        state = OrderedDict((n, p.data) for n, p in self.parameters().items())
        state.update(self.buffers())
        return state

    def load_state_dict(self, state):
        for n, p in self.parameters().items():
            p.data = np.array(state[n], dtype=p.dtype).reshape(p.shape)
        for n, b in self.buffers().items():
            b[...] = np.asarray(state[n], dtype=b.dtype).reshape(b.shape)

    def summary(self, input_shape):
        rows = trace_shapes(self, input_shape)
        layers = dict(self._all_layers())
        return "\n".join(f"{name:<18} {layers[name].describe():<40} {shape}" for name, shape in rows)


def trace_shapes(graph, input_shape):
    """Propagate ``input_shape`` through ``graph`` without touching data.

    Returns ``[(layer name, output shape), ...]`` in execution order (trunk,
    then each head). The batch extent may be ``None``.
    """
    trace = []

    def run(seq, shape):
        for name, layer in seq.items():
            try:
                shape = tuple(layer.output_shape(tuple(shape)))
            except DimensionError as err:
                raise DimensionError(f"layer {name!r} ({layer.describe()}) rejects input {tuple(shape)}: {err}") from None
            trace.append((name, shape))
        return shape

    h = run(graph.layers, input_shape)
    for head in graph.heads.values():
        run(head, h)
    return trace


# ---------------------------------------------------------------------------
# recognizer
# ---------------------------------------------------------------------------

@dataclass
class RecognizerSpec:
    # (conv count, filters, kernel) per block
    blocks: tuple = ((2, 32, 2), (3, 64, 3), (2, 128, 5), (2, 256, 5), (2, 384, 5), (2, 512, 5))
    hidden: tuple = (1024, 5120)
    dropout: float = 0.5
    classes: int = 10
    in_channels: int = 1
    side: int = 32


def build_recognizer(rng, spec=None):
    spec = spec or RecognizerSpec()
    layers = []
    ch = spec.in_channels
    side = spec.side
    for b, (convs, filters, k) in enumerate(spec.blocks, start=1):
        for i in range(1, convs + 1):
            layers.append((f"block{b}.conv{i}", Conv2d(ch, filters, k, rng, stride=1, padding="same", init="he")))
            layers.append((f"block{b}.relu{i}", Activation("relu")))
            ch = filters
        layers.append((f"block{b}.pool", MaxPool2d(2, 2, ceil_mode=True)))
        layers.append((f"block{b}.norm", BatchNorm2d(ch)))
        side = -(-side // 2)
    layers.append(("flatten", Flatten()))
    width = ch * side * side
    for i, units in enumerate(spec.hidden, start=1):
        layers.append((f"fc{i}", Dense(width, units, rng, init="he")))
        layers.append((f"fc{i}.relu", Activation("relu")))
        layers.append((f"fc{i}.dropout", Dropout(spec.dropout)))
        width = units
    layers.append(("classifier", Dense(width, spec.classes, rng, init="xavier")))
    layers.append(("softmax", Activation("softmax")))
    return ModelGraph(layers, kind="recognizer")


# ---------------------------------------------------------------------------
# SGAN
# ---------------------------------------------------------------------------

@dataclass
class GeneratorSpec:
    latent_dim: int = 100
    base: tuple = (128, 8, 8)
    filters: tuple = (128, 64)
    out_channels: int = 1


def build_generator(rng, spec=None):
    spec = spec or GeneratorSpec()
    if spec.latent_dim < 1:
        raise ValueError("latent_dim must be >= 1")
    c0, h0, w0 = spec.base
    layers = [
        ("project", Dense(spec.latent_dim, c0 * h0 * w0, rng, init="xavier")),
        ("reshape", Reshape(spec.base)),
        ("norm0", BatchNorm2d(c0)),
    ]
    ch = c0
    for i, filters in enumerate(spec.filters, start=1):
        layers += [
            (f"up{i}", Upsample2x()),
            (f"conv{i}", Conv2d(ch, filters, 3, rng, padding="same", init="he")),
            (f"relu{i}", Activation("relu")),
            (f"norm{i}", BatchNorm2d(filters)),
        ]
        ch = filters
    layers += [
        ("conv_out", Conv2d(ch, spec.out_channels, 3, rng, padding="same", init="xavier")),
        ("tanh", Activation("tanh")),
    ]
    return ModelGraph(layers, kind="generator")


@dataclass
class DiscriminatorSpec:
    filters: tuple = (32, 64, 128, 256)
    # 1-based conv indices followed by batch normalization
    normalized: tuple = (2, 3)
    classes: int = 10
    alpha: float = 0.2
    dropout: float = 0.25
    # the untrained validity head outputs exactly 0.5 (the indifference point)
    validity_init: str = "zeros"
    in_channels: int = 1
    side: int = 32


def build_discriminator(rng, spec=None):
    spec = spec or DiscriminatorSpec()
    if spec.classes < 1:
        raise ValueError("classes must be >= 1")
    layers = []
    ch, side = spec.in_channels, spec.side
    for i, filters in enumerate(spec.filters, start=1):
        layers += [
            (f"conv{i}", Conv2d(ch, filters, 3, rng, stride=2, padding="same", init="he")),
            (f"lrelu{i}", Activation("leaky_relu", spec.alpha)),
            (f"dropout{i}", Dropout(spec.dropout)),
        ]
        if i in spec.normalized:
            layers.append((f"norm{i}", BatchNorm2d(filters)))
        ch, side = filters, -(-side // 2)
    layers.append(("flatten", Flatten()))
    width = ch * side * side
    heads = {
        "validity": [("validity", Dense(width, 1, rng, init=spec.validity_init)), ("sigmoid", Activation("sigmoid"))],
        "class": [("class", Dense(width, spec.classes + 1, rng, init="xavier")), ("softmax", Activation("softmax"))],
    }
    return ModelGraph(layers, heads=heads, kind="discriminator")
