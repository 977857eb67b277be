"""Central finite-difference verification of the backward rules."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)
    tolerance: float = 1e-6

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self):
        return self.max_error < self.tolerance


def relative_error(analytic, numeric, floor=0.0):
    """Max-norm error of ``analytic`` relative to the larger of the two gradients.

    ``floor`` bounds the denominator from below, for tensors whose exact
    gradient is zero (a bias feeding an instance norm).
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    diff = np.max(np.abs(analytic - numeric), initial=0.0)
    if scale < 1e-12:
        return diff
    return diff / scale


def numerical_gradient(fn, tensor, step=1e-4, coords=None):
    """Central differences of scalar ``fn()`` w.r.t. ``tensor.data`` (in place, restored)."""
    flat = tensor.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    out = np.zeros(len(idx))
    with no_grad():
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(fn().data)
            flat[i] = orig - step
            fm = float(fn().data)
            flat[i] = orig
            out[j] = (fp - fm) / (2 * step)
    return out


def grad_check(fn, inputs, step=1e-4, tolerance=1e-6, max_coords=None, seed=0, rel_floor=0.0):
    """Compare reverse-mode gradients of scalar ``fn()`` with central differences.

    ``inputs`` maps names to leaf tensors that ``fn`` closes over.  With
    ``max_coords`` set, only a seeded random subset of each input's entries is
    perturbed (the analytic side is still computed in full).  ``rel_floor``
    measures each input's error against at least that fraction of the largest
    gradient entry over all inputs.
    """
    for t in inputs.values():
        t.requires_grad = True
        t.grad = None
    loss = fn()
    loss.backward()
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    pairs = {}
    for name, t in inputs.items():
        analytic = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1)
        coords = None
        if max_coords is not None and t.size > max_coords:
            coords = np.sort(rng.choice(t.size, size=max_coords, replace=False))
        numeric = numerical_gradient(fn, t, step, coords)
        pairs[name] = (analytic if coords is None else analytic[coords], numeric)
    peak = max((np.max(np.abs(a), initial=0.0) for a, _ in pairs.values()), default=0.0)
    for name, (a, n) in pairs.items():
        report.errors[name] = relative_error(a, n, rel_floor * peak)
    return report


def scale_gradient(x, factor):
    """Identity in the forward pass, gradient times ``factor`` in backward.

    Used to plant a wrong backward rule when exercising the checker itself.
    """
    return Tensor.from_op(x.data.copy(), (x,), lambda g: (g * factor,))


# ------------------------------------------------------------------ suite

OP_TOLERANCE = 1e-6
COMPOSITE_TOLERANCE = 1e-4
SINGLE_TOLERANCES = (1e-2, 5e-2)
COMPOSITE_FLOOR = 1e-3


@dataclass
class SuiteResult:
    name: str
    kind: str  # "op" or "composite"
    error: float
    tolerance: float

    @property
    def passed(self):
        return self.error < self.tolerance


def _away_from_zero(rng, shape, dtype):
    # keeps kinks (relu, abs, l1) out of the finite-difference stencil
    mag = rng.uniform(0.1, 1.0, shape)
    return (mag * rng.choice([-1.0, 1.0], shape)).astype(dtype)


def _op_cases(rng, dtype):
    from . import functional as fn

    def t(shape, away=False):
        data = _away_from_zero(rng, shape, dtype) if away else rng.standard_normal(shape).astype(dtype)
        return Tensor(data)

    v = (1, 2, 3, 4, 5)
    x1 = (1, 1, 3, 4, 5)
    targets = rng.uniform(0, 1, v).astype(dtype)
    return [
        ("add", lambda a, b: fn.add(a, b), {"a": t(v), "b": t(v)}),
        ("sub", lambda a, b: fn.sub(a, b), {"a": t(v), "b": t(v)}),
        ("mul", lambda a, b: fn.mul(a, b), {"a": t(v), "b": t(v)}),
        ("neg", lambda a: fn.neg(a), {"a": t(v)}),
        ("relu", lambda a: fn.relu(a), {"a": t(v, away=True)}),
        ("leaky_relu", lambda a: fn.leaky_relu(a), {"a": t(v, away=True)}),
        ("tanh", lambda a: fn.tanh(a), {"a": t(v)}),
        ("abs", lambda a: fn.abs(a), {"a": t(v, away=True)}),
        ("sum", lambda a: fn.sum(a), {"a": t(v)}),
        ("mean", lambda a: fn.mean(a), {"a": t(v)}),
        ("l1_distance", lambda a, b: fn.l1_distance(a, b),
         {"a": Tensor(np.zeros(v, dtype) + _away_from_zero(rng, v, dtype)), "b": Tensor(np.zeros(v, dtype))}),
        ("repeat_channels", lambda a: fn.repeat_channels(a, 3), {"a": t(x1)}),
        ("channel_mean", lambda a: fn.channel_mean(a), {"a": t((1, 3, 3, 4, 5))}),
        ("bce_with_logits", lambda a: fn.bce_with_logits(a, Tensor(targets)), {"a": t(v)}),
        ("reflection_pad3d", lambda a: fn.reflection_pad3d(a, (1, 2, 2)), {"a": t(v)}),
        ("conv3d", lambda a, w, b: fn.conv3d(a, w, b, stride=(1, 2, 2), padding=1, method="im2col"),
         {"a": t((1, 2, 4, 6, 6)), "w": t((3, 2, 3, 3, 3)), "b": t((3,))}),
        ("conv3d_reflect", lambda a, w, b: fn.conv3d(a, w, b, padding=1, pad_mode="reflect"),
         {"a": t((1, 2, 3, 4, 4)), "w": t((2, 2, 3, 3, 3)), "b": t((2,))}),
        ("conv3d_fft", lambda a, w, b: fn.conv3d(a, w, b, padding=(1, 2, 2), method="fft"),
         {"a": t((1, 2, 4, 5, 5)), "w": t((2, 2, 3, 5, 5)), "b": t((2,))}),
        ("conv_transpose3d", lambda a, w, b: fn.conv_transpose3d(a, w, b, stride=(1, 2, 2), padding=1,
                                                                  output_padding=(0, 1, 1)),
         {"a": t((1, 3, 3, 3, 3)), "w": t((3, 2, 3, 3, 3)), "b": t((2,))}),
        ("instance_norm3d", lambda a, g, b: fn.instance_norm3d(a, g, b),
         {"a": t((1, 2, 3, 3, 4)), "g": t((2,)), "b": t((2,))}),
        ("spatial_gradient", lambda a: fn.spatial_gradient(a), {"a": t((1, 2, 3, 4, 5))}),
    ]


def _composite_cases(rng, dtype):
    from .nets import Discriminator, DiscriminatorSpec, Generator, GeneratorSpec

    gen = Generator(GeneratorSpec(in_channels=1, out_channels=3, base_filters=2, n_down=2, n_blocks=1),
                    _seeded(rng), dtype)
    disc = Discriminator(DiscriminatorSpec(in_channels=3, base_filters=2), _seeded(rng), dtype)
    # nudge norm shifts off zero so every parameter sees a generic gradient
    for p in list(gen.params.values()) + list(disc.params.values()):
        if p.name.endswith((".beta", ".bias")):
            p.data = (0.1 * rng.standard_normal(p.shape)).astype(dtype)
    gx = Tensor(rng.uniform(-1, 1, (1, 1, 4, 8, 8)).astype(dtype))
    dx = Tensor(rng.uniform(-1, 1, (1, 3, 2, 24, 24)).astype(dtype))
    return [
        ("generator", gen, gx),
        ("discriminator", disc, dx),
    ]


def _seeded(rng):
    from .rng import Rng
    return Rng(int(rng.integers(0, 2**32)))


def run_suite(precision="double", inject_fault=None, max_coords=12, seed=0):
    """Grad-check every differentiable op and both network composites.

    ``inject_fault`` names an op or composite whose backward gets scaled by 1.5,
    which the suite must then report as failing.
    """
    if precision not in ("double", "single"):
        raise ValueError("precision must be 'double' or 'single'")
    dtype = np.float64 if precision == "double" else np.float32
    op_tol, comp_tol = (OP_TOLERANCE, COMPOSITE_TOLERANCE) if precision == "double" else SINGLE_TOLERANCES
    step = 1e-5 if precision == "double" else 1e-2
    rng = np.random.default_rng(seed)
    known = [c[0] for c in _op_cases(np.random.default_rng(0), dtype)] + ["generator", "discriminator"]
    if inject_fault is not None and inject_fault not in known:
        raise ValueError(f"unknown op {inject_fault!r}; choose from {', '.join(known)}")

    def wrap(name, y):
        return scale_gradient(y, 1.5) if name == inject_fault else y

    results = []
    for name, op, inputs in _op_cases(rng, dtype):
        weights = Tensor(rng.standard_normal(op(*inputs.values()).shape).astype(dtype))

        def loss(op=op, inputs=inputs, weights=weights, name=name):
            y = wrap(name, op(*inputs.values()))
            return (y * weights).sum() if y.ndim else y
        report = grad_check(loss, inputs, step=step, tolerance=op_tol)
        results.append(SuiteResult(name, "op", report.max_error, op_tol))

    for name, net, x in _composite_cases(rng, dtype):
        weights = Tensor(rng.standard_normal(net(x).shape).astype(dtype))
        inputs = dict(net.params)
        inputs["input"] = x

        def loss(net=net, x=x, weights=weights, name=name):
            return (wrap(name, net(x)) * weights).sum()
        report = grad_check(loss, inputs, step=step, tolerance=comp_tol, max_coords=max_coords,
                            seed=seed, rel_floor=COMPOSITE_FLOOR)
        results.append(SuiteResult(name, "composite", report.max_error, comp_tol))
    return results
