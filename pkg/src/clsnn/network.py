"""Architecture strings, model assembly, time-unrolled forward, checkpoints.

An architecture like ``"32c3-BN-MP2-DP-FC640-AP10"`` reads left to right:
32 conv filters of size 3, batch norm, 2x2 max pool, dropout, a 640-unit
dense layer, and a 10-class vote readout.  A spiking neuron layer is
inserted automatically after every conv or dense layer (after its batch
norm, when one follows), so every linear computation feeds spikes forward.

The forward pass runs layer-major over a timestep-stacked batch: the input
is repeated T times (or frame sequences are unstacked), stateless layers
process all T * batch rows at once, and neuron layers scan their membrane
state across the T slices.  The vote readout averages each class's group of
output neurons and then averages over time; softmax turns that into class
probabilities.
"""

import re
import struct
from dataclasses import dataclass

import numpy as np

from . import spiking
from .rng import DropoutStream, derive
from .tensor import (Tensor, add, batchnorm, concat_rows, conv2d, dropout,
                     matmul, maxpool2d, mean, reshape, slice_rows, softmax,
                     tile_rows)

# ---------------------------------------------------------------------------
# architecture grammar


@dataclass(frozen=True)
class Conv:
    channels: int
    kernel: int


@dataclass(frozen=True)
class BatchNorm:
    pass


@dataclass(frozen=True)
class MaxPool:
    kernel: int


@dataclass(frozen=True)
class Drop:
    pass


@dataclass(frozen=True)
class Dense:
    features: int


@dataclass(frozen=True)
class Vote:
    classes: int


@dataclass(frozen=True)
class Architecture:
    tokens: tuple


_CONV_RE = re.compile(r"^(\d+)c(\d+)$")
_MP_RE = re.compile(r"^MP(\d+)$")
_FC_RE = re.compile(r"^FC(\d+)$")
_AP_RE = re.compile(r"^AP(\d+)$")


def parse_architecture(text):
    """Parse an architecture string; grammar errors raise ValueError."""
    parts = text.split("-")
    if not text or any(not p for p in parts):
        raise ValueError(f"architecture: empty token in {text!r}")
    tokens = []
    for part in parts:
        if m := _CONV_RE.match(part):
            tokens.append(Conv(int(m.group(1)), int(m.group(2))))
        elif part == "BN":
            tokens.append(BatchNorm())
        elif m := _MP_RE.match(part):
            tokens.append(MaxPool(int(m.group(1))))
        elif part == "DP":
            tokens.append(Drop())
        elif m := _FC_RE.match(part):
            tokens.append(Dense(int(m.group(1))))
        elif m := _AP_RE.match(part):
            tokens.append(Vote(int(m.group(1))))
        else:
            raise ValueError(f"architecture: unknown token {part!r}")
    _validate(tokens, text)
    return Architecture(tuple(tokens))


def _validate(tokens, text):
    if not isinstance(tokens[-1], Vote):
        raise ValueError(f"architecture: must end with an AP token: {text!r}")
    in_dense = False
    for i, tok in enumerate(tokens):
        if isinstance(tok, Vote):
            if i != len(tokens) - 1:
                raise ValueError("architecture: AP must be the final token")
            if tok.classes < 2:
                raise ValueError("architecture: AP needs at least 2 classes")
            prev = tokens[i - 1] if i else None
            if not isinstance(prev, Dense):
                raise ValueError("architecture: AP must follow an FC token")
            if prev.features % tok.classes:
                raise ValueError(
                    f"architecture: FC{prev.features} not divisible by AP{tok.classes}"
                )
        elif isinstance(tok, Conv):
            if in_dense:
                raise ValueError("architecture: conv after FC is not allowed")
            if tok.channels < 1 or tok.kernel < 1:
                raise ValueError("architecture: conv needs positive channels and kernel")
        elif isinstance(tok, Dense):
            if tok.features < 1:
                raise ValueError("architecture: FC needs positive width")
            in_dense = True
        elif isinstance(tok, MaxPool):
            if in_dense:
                raise ValueError("architecture: MP after FC is not allowed")
            if tok.kernel < 1:
                raise ValueError("architecture: MP needs a positive window")
        elif isinstance(tok, BatchNorm):
            if i == 0 or not isinstance(tokens[i - 1], (Conv, Dense)):
                raise ValueError("architecture: BN must directly follow a conv or FC")


def render_architecture(arch):
    """Inverse of :func:`parse_architecture`; round-trips exactly."""
    out = []
    for tok in arch.tokens:
        if isinstance(tok, Conv):
            out.append(f"{tok.channels}c{tok.kernel}")
        elif isinstance(tok, BatchNorm):
            out.append("BN")
        elif isinstance(tok, MaxPool):
            out.append(f"MP{tok.kernel}")
        elif isinstance(tok, Drop):
            out.append("DP")
        elif isinstance(tok, Dense):
            out.append(f"FC{tok.features}")
        else:
            out.append(f"AP{tok.classes}")
    return "-".join(out)


# ---------------------------------------------------------------------------
# runtime layers


@dataclass
class _Ctx:
    timesteps: int
    batch: int
    training: bool
    soft: bool
    dropout_seed: int
    sample_ids: tuple


class _ConvLayer:
    def __init__(self, name, w, b):
        self.name = name
        self.w = w
        self.b = b  # None when batch norm follows
        self.pad = w.shape[2] // 2

    def forward(self, h, ctx):
        out = conv2d(h, self.w, stride=1, pad=self.pad)
        if self.b is not None:
            out = add(out, reshape(self.b, (1, -1, 1, 1)))
        return out

    def params(self):
        named = [(f"{self.name}.weight", self.w)]
        if self.b is not None:
            named.append((f"{self.name}.bias", self.b))
        return named

    def buffers(self):
        return []


class _BnLayer:
    def __init__(self, name, width):
        self.name = name
        self.gamma = Tensor(np.ones(width), requires_grad=True)
        self.beta = Tensor(np.zeros(width), requires_grad=True)
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)

    def forward(self, h, ctx):
        return batchnorm(h, self.gamma, self.beta, self.running_mean,
                         self.running_var, training=ctx.training)

    def params(self):
        return [(f"{self.name}.gamma", self.gamma), (f"{self.name}.beta", self.beta)]

    def buffers(self):
        return [(f"{self.name}.running_mean", self.running_mean),
                (f"{self.name}.running_var", self.running_var)]


class _PoolLayer:
    def __init__(self, name, kernel):
        self.name = name
        self.kernel = kernel

    def forward(self, h, ctx):
        return maxpool2d(h, self.kernel)

    def params(self):
        return []

    def buffers(self):
        return []


class _DropLayer:
    def __init__(self, name, index, p):
        self.name = name
        self.index = index
        self.p = p

    def forward(self, h, ctx):
        stream = DropoutStream(seed=ctx.dropout_seed, layer=self.index,
                               timesteps=ctx.timesteps, sample_ids=ctx.sample_ids)
        return dropout(h, self.p, training=ctx.training, stream=stream)

    def params(self):
        return []

    def buffers(self):
        return []


class _DenseLayer:
    def __init__(self, name, w, b):
        self.name = name
        self.w = w
        self.b = b

    def forward(self, h, ctx):
        if h.ndim > 2:
            h = reshape(h, (h.shape[0], -1))
        out = matmul(h, self.w)
        if self.b is not None:
            out = add(out, self.b)
        return out

    def params(self):
        named = [(f"{self.name}.weight", self.w)]
        if self.b is not None:
            named.append((f"{self.name}.bias", self.b))
        return named

    def buffers(self):
        return []


class _NeuronLayer:
    def __init__(self, name, cfg):
        self.name = name
        self.cfg = cfg
        self.leak = (Tensor(np.array(spiking.leak_of(2.0)), requires_grad=True)
                     if cfg.kind == "plif" else None)

    def forward(self, h, ctx):
        t_steps, batch = ctx.timesteps, ctx.batch
        state = spiking.init_state(self.cfg, (batch,) + h.shape[1:])
        outs = []
        for t in range(t_steps):
            xt = slice_rows(h, t * batch, (t + 1) * batch)
            spikes, state = spiking.step(state, xt, self.cfg, a=self.leak,
                                         soft=ctx.soft)
            outs.append(spikes)
        return concat_rows(outs)

    def tau_m(self):
        if self.leak is None:
            return self.cfg.tau_m
        return spiking.tau_of(self.leak.item())

    def params(self):
        return [(f"{self.name}.leak", self.leak)] if self.leak is not None else []

    def buffers(self):
        return []


class _VoteLayer:
    def __init__(self, name, classes):
        self.name = name
        self.classes = classes

    def forward(self, h, ctx):
        return vote_readout(h, ctx.timesteps, self.classes)

    def params(self):
        return []

    def buffers(self):
        return []


def vote_readout(h, timesteps, classes):
    """Average spike activity per class group, then over time.

    ``h`` is the timestep-stacked (T * batch, features) output of the final
    spiking layer; features split into ``classes`` contiguous groups.
    """
    rows, feats = h.shape
    if rows % timesteps:
        raise ValueError("vote_readout: rows not a multiple of timesteps")
    if feats % classes:
        raise ValueError("vote_readout: features not divisible by classes")
    batch = rows // timesteps
    grouped = reshape(h, (timesteps, batch, classes, feats // classes))
    return mean(grouped, axis=(0, 3))


# ---------------------------------------------------------------------------
# model


def _uniform_init(rng, shape, fan_in):
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape)


class SpikingModel:
    """A parsed architecture instantiated as runtime layers."""

    def __init__(self, arch, input_shape, timesteps, neuron_cfg, dropout_p, layers):
        self.arch = arch
        self.input_shape = tuple(int(n) for n in input_shape)
        self.timesteps = timesteps
        self.neuron_cfg = neuron_cfg
        self.dropout_p = dropout_p
        self.layers = layers

    @classmethod
    def build(cls, arch, input_shape, timesteps, neuron_cfg=None, seed=0,
              dropout_p=0.5):
        """Instantiate and initialize a model.

        ``input_shape`` is one sample's shape, (C, H, W).  Weights draw from
        U(-1/sqrt(fan_in), 1/sqrt(fan_in)) with a per-layer derived seed;
        linear layers followed by batch norm carry no bias.
        """
        if isinstance(arch, str):
            arch = parse_architecture(arch)
        if timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        if neuron_cfg is None:
            neuron_cfg = spiking.NeuronConfig()
        if len(input_shape) != 3:
            raise ValueError("input_shape must be (C, H, W)")

        layers = []
        shape = tuple(int(n) for n in input_shape)
        tokens = list(arch.tokens)
        i = 0
        while i < len(tokens):
            tok = tokens[i]
            index = len(layers)
            rng = np.random.Generator(np.random.Philox(key=derive(seed, "init", index)))
            if isinstance(tok, Conv):
                if len(shape) != 3:
                    raise ValueError("architecture: conv needs spatial input")
                c, h, w = shape
                fan_in = c * tok.kernel * tok.kernel
                wgt = Tensor(_uniform_init(rng, (tok.channels, c, tok.kernel, tok.kernel), fan_in),
                             requires_grad=True)
                followed_by_bn = i + 1 < len(tokens) and isinstance(tokens[i + 1], BatchNorm)
                bias = None if followed_by_bn else Tensor(np.zeros(tok.channels),
                                                          requires_grad=True)
                layers.append(_ConvLayer(f"conv{index}", wgt, bias))
                pad = tok.kernel // 2
                shape = (tok.channels, h + 2 * pad - tok.kernel + 1, w + 2 * pad - tok.kernel + 1)
                if followed_by_bn:
                    layers.append(_BnLayer(f"bn{len(layers)}", tok.channels))
                    i += 1
                layers.append(_NeuronLayer(f"neuron{len(layers)}", neuron_cfg))
            elif isinstance(tok, Dense):
                fan_in = int(np.prod(shape))
                wgt = Tensor(_uniform_init(rng, (fan_in, tok.features), fan_in),
                             requires_grad=True)
                followed_by_bn = i + 1 < len(tokens) and isinstance(tokens[i + 1], BatchNorm)
                bias = None if followed_by_bn else Tensor(np.zeros(tok.features),
                                                          requires_grad=True)
                layers.append(_DenseLayer(f"fc{index}", wgt, bias))
                shape = (tok.features,)
                if followed_by_bn:
                    layers.append(_BnLayer(f"bn{len(layers)}", tok.features))
                    i += 1
                layers.append(_NeuronLayer(f"neuron{len(layers)}", neuron_cfg))
            elif isinstance(tok, MaxPool):
                if len(shape) != 3:
                    raise ValueError("architecture: MP needs spatial input")
                c, h, w = shape
                if h % tok.kernel or w % tok.kernel:
                    raise ValueError(
                        f"architecture: MP{tok.kernel} does not tile {h}x{w}")
                layers.append(_PoolLayer(f"pool{len(layers)}", tok.kernel))
                shape = (c, h // tok.kernel, w // tok.kernel)
            elif isinstance(tok, Drop):
                layers.append(_DropLayer(f"drop{len(layers)}", len(layers), dropout_p))
            elif isinstance(tok, Vote):
                layers.append(_VoteLayer(f"vote{len(layers)}", tok.classes))
            elif isinstance(tok, BatchNorm):
                # consumed together with the preceding conv/dense
                raise ValueError("architecture: BN must directly follow a conv or FC")
            i += 1
        return cls(arch, input_shape, timesteps, neuron_cfg, dropout_p, layers)

    @property
    def num_classes(self):
        return self.arch.tokens[-1].classes

    def named_parameters(self):
        named = []
        for layer in self.layers:
            named.extend(layer.params())
        return named

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        named = []
        for layer in self.layers:
            named.extend(layer.buffers())
        return named

    def neuron_layers(self):
        return [l for l in self.layers if isinstance(l, _NeuronLayer)]

    def forward(self, x, *, training=False, sample_ids=None, dropout_seed=0,
                soft=False):
        """Run T simulation steps; returns (class probabilities, spike train).

        ``x`` is (batch, C, H, W) for static inputs, repeated at every step
        (direct encoding), or (batch, T, C, H, W) for frame sequences.  The
        spike train is the final spiking layer's output, (T, batch, features).
        """
        x = np.asarray(x, dtype=np.float64)
        t_steps = self.timesteps
        if x.ndim == 4:
            batch = x.shape[0]
            stack = tile_rows(Tensor(x), t_steps)
        elif x.ndim == 5:
            if x.shape[1] != t_steps:
                raise ValueError(
                    f"forward: expected {t_steps} frames, got {x.shape[1]}")
            batch = x.shape[0]
            stack = Tensor(np.ascontiguousarray(x.transpose(1, 0, 2, 3, 4))
                           .reshape((t_steps * batch,) + x.shape[2:]))
        else:
            raise ValueError("forward: input must be 4-d or 5-d")
        if sample_ids is None:
            sample_ids = range(batch)
        ctx = _Ctx(t_steps, batch, training, soft, dropout_seed,
                   tuple(int(s) for s in sample_ids))

        h = stack
        last_spikes = None
        for layer in self.layers:
            h = layer.forward(h, ctx)
            if isinstance(layer, _NeuronLayer):
                last_spikes = h
        p = softmax(h)
        train = spiking.SpikeTrain(
            last_spikes.values.reshape(t_steps, batch, -1).copy())
        return p, train


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"CLSNN1"


def save_model(model, path):
    """Serialize architecture, neuron config, and all float64 blocks."""
    cfg = model.neuron_cfg
    arch_text = render_architecture(model.arch).encode()
    blocks = [(name, p.values) for name, p in model.named_parameters()]
    blocks += model.named_buffers()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(arch_text)))
        fh.write(arch_text)
        fh.write(struct.pack("<I", model.timesteps))
        fh.write(struct.pack("<B", 1 if cfg.kind == "plif" else 0))
        fh.write(struct.pack("<4d", cfg.v_threshold, cfg.v_rest, cfg.alpha, cfg.tau_m))
        fh.write(struct.pack("<d", model.dropout_p))
        fh.write(struct.pack("<B", len(model.input_shape)))
        fh.write(struct.pack("<" + "I" * len(model.input_shape), *model.input_shape))
        fh.write(struct.pack("<I", len(blocks)))
        for name, values in blocks:
            encoded = name.encode()
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", values.ndim))
            fh.write(struct.pack("<" + "I" * values.ndim, *values.shape))
            fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def load_model(path):
    """Rebuild a model whose forward reproduces the saved one bit-for-bit."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"checkpoint: bad magic in {path}")
    off = len(_MAGIC)

    def unpack(fmt):
        nonlocal off
        vals = struct.unpack_from(fmt, data, off)
        off += struct.calcsize(fmt)
        return vals

    (arch_len,) = unpack("<I")
    arch_text = data[off : off + arch_len].decode()
    off += arch_len
    (timesteps,) = unpack("<I")
    (plif_flag,) = unpack("<B")
    v_th, v_rest, alpha, tau_m = unpack("<4d")
    (dropout_p,) = unpack("<d")
    (rank,) = unpack("<B")
    input_shape = unpack("<" + "I" * rank)
    (n_blocks,) = unpack("<I")
    blocks = {}
    for _ in range(n_blocks):
        (name_len,) = unpack("<I")
        name = data[off : off + name_len].decode()
        off += name_len
        (ndim,) = unpack("<B")
        shape = unpack("<" + "I" * ndim) if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        if not np.isfinite(values).all():
            raise ValueError(f"checkpoint: non-finite values in block {name}")
        blocks[name] = values.astype(np.float64)
    if off != len(data):
        raise ValueError("checkpoint: trailing bytes")

    cfg = spiking.NeuronConfig(kind="plif" if plif_flag else "lif",
                               v_threshold=v_th, v_rest=v_rest, alpha=alpha,
                               tau_m=tau_m)
    model = SpikingModel.build(arch_text, input_shape, timesteps, cfg,
                               seed=0, dropout_p=dropout_p)
    for name, tensor in model.named_parameters():
        if name not in blocks:
            raise ValueError(f"checkpoint: missing block {name}")
        if blocks[name].shape != tensor.values.shape:
            raise ValueError(f"checkpoint: shape mismatch for {name}")
        tensor.values[...] = blocks[name]
    for name, buf in model.named_buffers():
        if name not in blocks:
            raise ValueError(f"checkpoint: missing block {name}")
        buf[...] = blocks[name]
    return model
