"""ResNet generators and 3D PatchGAN discriminators.

Depth is never strided: every down/up-sampling layer uses stride (1, 2, 2),
so a 9-slice input keeps its 9 slices end to end.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as fn
from .tensor import Tensor

INIT_STD = 0.02
STEM_KERNEL = 7
PLANE_STRIDE = (1, 2, 2)


@dataclass(frozen=True)
class GeneratorSpec:
    in_channels: int = 1
    out_channels: int = 3
    base_filters: int = 64
    n_down: int = 3
    n_blocks: int = 9

    def __post_init__(self):
        if self.n_down not in (2, 3):
            raise ValueError(f"n_down must be 2 or 3, got {self.n_down}")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.base_filters < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")

    @property
    def widths(self):
        """Channel width after the stem and after each downsampling layer."""
        return [self.base_filters * 2 ** i for i in range(self.n_down + 1)]


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_channels: int = 3
    base_filters: int = 64

    # (c_out multiplier of base, plane stride, instance norm); last layer emits 1 channel
    LAYERS = ((1, 2, False), (2, 2, True), (4, 2, True), (8, 1, True))
    KERNEL = (3, 4, 4)
    PADDING = (1, 1, 1)

    def __post_init__(self):
        if self.base_filters < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be >= 1")

    def layer_table(self):
        """(c_in, c_out, stride, norm) for every conv layer, output layer included."""
        rows, c_in = [], self.in_channels
        for mult, s, norm in self.LAYERS:
            c_out = self.base_filters * mult
            rows.append((c_in, c_out, (1, s, s), norm))
            c_in = c_out
        rows.append((c_in, 1, (1, 1, 1), False))
        return rows


def receptive_field(kernels, strides):
    """Receptive field of a stack of convolutions along one axis."""
    rf, jump = 1, 1
    for k, s in zip(kernels, strides):
        rf += (k - 1) * jump
        jump *= s
    return rf


def discriminator_receptive_field(spec=None):
    """(depth, height, width) extent of the input patch behind one output logit."""
    spec = spec or DiscriminatorSpec()
    strides = [row[2] for row in spec.layer_table()]
    return tuple(receptive_field([spec.KERNEL[a]] * len(strides), [s[a] for s in strides])
                 for a in range(3))


# ------------------------------------------------------------- parameters

def _param(data, name):
    return Tensor(data, requires_grad=True, name=name)


def _conv_params(params, name, c_out, c_in, kernel, dtype):
    params[f"{name}.weight"] = _param(np.zeros((c_out, c_in) + kernel, dtype=dtype), f"{name}.weight")
    params[f"{name}.bias"] = _param(np.zeros(c_out, dtype=dtype), f"{name}.bias")


def _norm_params(params, name, c, dtype):
    params[f"{name}.gamma"] = _param(np.ones(c, dtype=dtype), f"{name}.gamma")
    params[f"{name}.beta"] = _param(np.zeros(c, dtype=dtype), f"{name}.beta")


def init_weights(params, rng):
    """Conv weights ~ N(0, 0.02); biases and norm shifts 0; norm scales 1.

    Draws happen in the dict's insertion order so a seed fixes every value.
    """
    for name, p in params.items():
        if name.endswith(".weight"):
            p.data = rng.normal(INIT_STD, p.shape, dtype=p.dtype)
        elif name.endswith(".gamma"):
            p.data = np.ones(p.shape, dtype=p.dtype)
        else:
            p.data = np.zeros(p.shape, dtype=p.dtype)
    return params


def _instance_relu(x, params, name):
    return fn.relu(fn.instance_norm3d(x, params[f"{name}.gamma"], params[f"{name}.beta"]))


class Generator:
    """Reflect-pad stem, strided downsampling, residual trunk, transposed upsampling, tanh head."""

    def __init__(self, spec, rng=None, dtype=np.float32):
        self.spec = spec
        self.params = {}
        s, p, k7 = spec, self.params, (STEM_KERNEL,) * 3
        w = s.widths
        _conv_params(p, "stem.conv", w[0], s.in_channels, k7, dtype)
        _norm_params(p, "stem.norm", w[0], dtype)
        for i in range(s.n_down):
            _conv_params(p, f"down{i}.conv", w[i + 1], w[i], (3, 3, 3), dtype)
            _norm_params(p, f"down{i}.norm", w[i + 1], dtype)
        for j in range(s.n_blocks):
            for half in (1, 2):
                _conv_params(p, f"res{j}.conv{half}", w[-1], w[-1], (3, 3, 3), dtype)
                _norm_params(p, f"res{j}.norm{half}", w[-1], dtype)
        for i in range(s.n_down):
            c_in, c_out = w[s.n_down - i], w[s.n_down - i - 1]
            # transposed weights are laid out (c_in, c_out, k...)
            p[f"up{i}.conv.weight"] = _param(np.zeros((c_in, c_out, 3, 3, 3), dtype=dtype), f"up{i}.conv.weight")
            p[f"up{i}.conv.bias"] = _param(np.zeros(c_out, dtype=dtype), f"up{i}.conv.bias")
            _norm_params(p, f"up{i}.norm", c_out, dtype)
        _conv_params(p, "head.conv", s.out_channels, w[0], k7, dtype)
        if rng is not None:
            init_weights(p, rng)

    def check_input(self, shape):
        if len(shape) != 5 or shape[1] != self.spec.in_channels:
            raise fn.ShapeError(
                f"generator expects (n, {self.spec.in_channels}, d, h, w), got {tuple(shape)}")
        d, h, w = shape[2:]
        if d < STEM_KERNEL // 2 + 1:
            raise fn.ShapeError(f"depth {d} too small: minimum depth is {STEM_KERNEL // 2 + 1}")
        step = 2 ** self.spec.n_down
        min_plane = max(step, STEM_KERNEL // 2 + 1)
        for axis, n in (("height", h), ("width", w)):
            if n < min_plane or n % step:
                raise fn.ShapeError(
                    f"{axis} {n} invalid: must be a multiple of {step} and at least {min_plane}")

    def __call__(self, x):
        self.check_input(x.shape)
        p, s = self.params, self.spec
        pad = STEM_KERNEL // 2
        h = fn.conv3d(fn.reflection_pad3d(x, pad), p["stem.conv.weight"], p["stem.conv.bias"])
        h = _instance_relu(h, p, "stem.norm")
        for i in range(s.n_down):
            h = fn.conv3d(h, p[f"down{i}.conv.weight"], p[f"down{i}.conv.bias"],
                          stride=PLANE_STRIDE, padding=1)
            h = _instance_relu(h, p, f"down{i}.norm")
        for j in range(s.n_blocks):
            r = fn.conv3d(h, p[f"res{j}.conv1.weight"], p[f"res{j}.conv1.bias"], padding=1)
            r = _instance_relu(r, p, f"res{j}.norm1")
            r = fn.conv3d(r, p[f"res{j}.conv2.weight"], p[f"res{j}.conv2.bias"], padding=1)
            r = fn.instance_norm3d(r, p[f"res{j}.norm2.gamma"], p[f"res{j}.norm2.beta"])
            h = h + r
        for i in range(s.n_down):
            h = fn.conv_transpose3d(h, p[f"up{i}.conv.weight"], p[f"up{i}.conv.bias"],
                                    stride=PLANE_STRIDE, padding=1, output_padding=(0, 1, 1))
            h = _instance_relu(h, p, f"up{i}.norm")
        h = fn.conv3d(fn.reflection_pad3d(h, pad), p["head.conv.weight"], p["head.conv.bias"])
        return fn.tanh(h)


class Discriminator:
    """3D PatchGAN emitting a map of raw logits (no sigmoid)."""

    def __init__(self, spec, rng=None, dtype=np.float32):
        self.spec = spec
        self.params = {}
        for i, (c_in, c_out, _, norm) in enumerate(spec.layer_table()):
            _conv_params(self.params, f"layer{i}.conv", c_out, c_in, spec.KERNEL, dtype)
            if norm:
                _norm_params(self.params, f"layer{i}.norm", c_out, dtype)
        if rng is not None:
            init_weights(self.params, rng)

    def output_shape(self, shape):
        """Logit-map shape for an input shape; raises if any layer collapses an axis."""
        if len(shape) != 5 or shape[1] != self.spec.in_channels:
            raise fn.ShapeError(
                f"discriminator expects (n, {self.spec.in_channels}, d, h, w), got {tuple(shape)}")
        for axis, n, lo in zip(fn.AXES, shape[2:], min_discriminator_extent(self.spec)):
            if n < lo:
                raise fn.ShapeError(f"{axis} {n} too small for the discriminator: minimum is {lo}")
        size = tuple(shape[2:])
        for _, _, stride, _ in self.spec.layer_table():
            size = fn.conv_output_shape(size, self.spec.KERNEL, stride, self.spec.PADDING)
        return (shape[0], 1) + size

    def __call__(self, x):
        self.output_shape(x.shape)
        p, h = self.params, x
        table = self.spec.layer_table()
        for i, (_, _, stride, norm) in enumerate(table):
            h = fn.conv3d(h, p[f"layer{i}.conv.weight"], p[f"layer{i}.conv.bias"],
                          stride=stride, padding=self.spec.PADDING)
            if i == len(table) - 1:
                break
            if norm:
                h = fn.instance_norm3d(h, p[f"layer{i}.norm.gamma"], p[f"layer{i}.norm.beta"])
            h = fn.leaky_relu(h, 0.2)
        return h


def min_discriminator_extent(spec=None):
    """Smallest (d, h, w) input that leaves at least one logit per axis."""
    spec = spec or DiscriminatorSpec()
    strides = [row[2] for row in spec.layer_table()]
    out = []
    for axis in range(3):
        n = 1
        while True:
            size = n
            for s in strides:
                size = (size + 2 * spec.PADDING[axis] - spec.KERNEL[axis]) // s[axis] + 1
            if size >= 1:
                break
            n += 1
        out.append(n)
    return tuple(out)


def build_generator(spec, rng=None, dtype=np.float32):
    return Generator(spec, rng, dtype)


def build_discriminator(spec, rng=None, dtype=np.float32):
    return Discriminator(spec, rng, dtype)


# -------------------------------------------------------- closed-form counts

def _conv_count(c_in, c_out, k):
    return c_in * c_out * k + c_out


def count_params(spec):
    """Trainable parameter count from the layer formulas, without building anything."""
    if isinstance(spec, GeneratorSpec):
        w = spec.widths
        total = _conv_count(spec.in_channels, w[0], STEM_KERNEL ** 3) + 2 * w[0]
        for i in range(spec.n_down):
            total += _conv_count(w[i], w[i + 1], 27) + 2 * w[i + 1]
        total += spec.n_blocks * 2 * (_conv_count(w[-1], w[-1], 27) + 2 * w[-1])
        for i in range(spec.n_down):
            total += _conv_count(w[i + 1], w[i], 27) + 2 * w[i]
        total += _conv_count(w[0], spec.out_channels, STEM_KERNEL ** 3)
        return total
    if isinstance(spec, DiscriminatorSpec):
        k = int(np.prod(spec.KERNEL))
        return sum(_conv_count(ci, co, k) + (2 * co if norm else 0)
                   for ci, co, _, norm in spec.layer_table())
    raise TypeError(f"unsupported spec {type(spec).__name__}")


def flat_length(params):
    return int(sum(p.size for p in params.values()))


def cyclegan_specs(n_down=3, base_filters=64, n_blocks=9, disc_base=64):
    """The four networks of one model: G (1->3), F (3->1), D_X on OCT, D_Y on confocal."""
    return {
        "G": GeneratorSpec(1, 3, base_filters, n_down, n_blocks),
        "F": GeneratorSpec(3, 1, base_filters, n_down, n_blocks),
        "D_X": DiscriminatorSpec(1, disc_base),
        "D_Y": DiscriminatorSpec(3, disc_base),
    }
