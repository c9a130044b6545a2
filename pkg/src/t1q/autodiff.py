"""Minimal reverse-mode differentiation over dense float64 arrays.

A :class:`Graph` is a topologically ordered list of op nodes. Nodes read
named graph inputs, earlier nodes and named parameters. ``forward`` evaluates
the nodes and keeps every op's cached activations on a tape; ``backward``
walks the tape in reverse and returns gradients for every parameter *and*
every graph input. The tape survives ``backward``, so several cotangents can
be pulled back through one forward pass (and one set of dropout masks).

Tensors are plain ``numpy.ndarray`` objects laid out ``(N, C, D, H, W)``.
"""
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import rng as rng_mod

LEAKY_SLOPE = 0.01
NORM_EPS = 1e-5
DICE_EPS = 1e-5


class Mode(Enum):
    TRAIN = "train"
    EVAL = "eval"
    MC_DROPOUT = "mc_dropout"


class OpKind(Enum):
    CONV3D = "conv3d"
    TRANSPOSED_CONV3D = "transposed_conv3d"
    INSTANCE_NORM = "instance_norm"
    LEAKY_RELU = "leaky_relu"
    DROPOUT = "dropout"
    MAX_POOL3D = "max_pool3d"
    CONCAT = "concat"
    SOFTMAX = "softmax"
    ADD = "add"
    SCALE = "scale"
    REDUCE_SUM = "reduce_sum"
    DICE_TERMS = "dice_terms"


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------- primitives
# forward(xs, ps, attrs, ctx) -> y caches what the adjoint needs in ctx;
# backward(gy, ctx, attrs, ps) -> (input grads, param grads). Inputs listed in
# a rule's ``nondiff`` are constants and receive no gradient.


def _conv_fwd(xs, ps, attrs, ctx):
    x, (w, b) = xs[0], ps
    k = w.shape[2]
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv3d: input has {x.shape[1]} channels on axis 1, kernel expects {w.shape[1]}")
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x
    n, _, d, h, wd = x.shape
    y = np.zeros((w.shape[0], n, d, h, wd))
    for a in range(k):
        for bb in range(k):
            for c in range(k):
                y += np.tensordot(w[:, :, a, bb, c], xp[:, :, a:a + d, bb:bb + h, c:c + wd], axes=([1], [1]))
    y = np.moveaxis(y, 0, 1) + b[None, :, None, None, None]
    ctx["xp"] = xp
    return np.ascontiguousarray(y)


def _conv_bwd(gy, ctx, attrs, ps):
    w = ps[0]
    xp = ctx["xp"]
    k = w.shape[2]
    p = k // 2
    n, co, d, h, wd = gy.shape
    gw = np.empty_like(w)
    gxp = np.zeros(xp.shape[1:2] + (n,) + xp.shape[2:])
    for a in range(k):
        for bb in range(k):
            for c in range(k):
                sl = xp[:, :, a:a + d, bb:bb + h, c:c + wd]
                gw[:, :, a, bb, c] = np.tensordot(gy, sl, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
                gxp[:, :, a:a + d, bb:bb + h, c:c + wd] += np.tensordot(w[:, :, a, bb, c], gy, axes=([0], [1]))
    gx = np.moveaxis(gxp, 0, 1)
    if p:
        gx = gx[:, :, p:-p, p:-p, p:-p]
    return [np.ascontiguousarray(gx)], [gw, gy.sum(axis=(0, 2, 3, 4))]


def _tconv_fwd(xs, ps, attrs, ctx):
    x, (w, b) = xs[0], ps
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"transposed_conv3d: input has {x.shape[1]} channels on axis 1, kernel expects {w.shape[0]}")
    n, _, d, h, wd = x.shape
    co = w.shape[1]
    t = np.tensordot(x, w, axes=([1], [0]))  # (N, D, H, W, Co, 2, 2, 2)
    y = t.transpose(0, 4, 1, 5, 2, 6, 3, 7).reshape(n, co, 2 * d, 2 * h, 2 * wd)
    ctx["x"] = x
    return y + b[None, :, None, None, None]


def _tconv_bwd(gy, ctx, attrs, ps):
    w = ps[0]
    x = ctx["x"]
    n, co, d2, h2, w2 = gy.shape
    g = gy.reshape(n, co, d2 // 2, 2, h2 // 2, 2, w2 // 2, 2).transpose(0, 2, 4, 6, 1, 3, 5, 7)
    gx = np.moveaxis(np.tensordot(g, w, axes=([4, 5, 6, 7], [1, 2, 3, 4])), -1, 1)
    gw = np.tensordot(x, g, axes=([0, 2, 3, 4], [0, 1, 2, 3]))
    return [np.ascontiguousarray(gx)], [gw, gy.sum(axis=(0, 2, 3, 4))]


_SPATIAL = (2, 3, 4)


def _norm_fwd(xs, ps, attrs, ctx):
    x, (gamma, beta) = xs[0], ps
    mu = x.mean(axis=_SPATIAL, keepdims=True)
    var = x.var(axis=_SPATIAL, keepdims=True)
    inv = 1.0 / np.sqrt(var + NORM_EPS)
    xhat = (x - mu) * inv
    ctx["xhat"], ctx["inv"] = xhat, inv
    return xhat * gamma[None, :, None, None, None] + beta[None, :, None, None, None]


def _norm_bwd(gy, ctx, attrs, ps):
    gamma = ps[0]
    xhat, inv = ctx["xhat"], ctx["inv"]
    gxhat = gy * gamma[None, :, None, None, None]
    gx = inv * (gxhat - gxhat.mean(axis=_SPATIAL, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=_SPATIAL, keepdims=True))
    return [gx], [(gy * xhat).sum(axis=(0, 2, 3, 4)), gy.sum(axis=(0, 2, 3, 4))]


def _lrelu_fwd(xs, ps, attrs, ctx):
    x = xs[0]
    slope = attrs.get("slope", LEAKY_SLOPE)
    pos = x > 0
    ctx["pos"] = pos
    return np.where(pos, x, slope * x)


def _lrelu_bwd(gy, ctx, attrs, ps):
    slope = attrs.get("slope", LEAKY_SLOPE)
    return [np.where(ctx["pos"], gy, slope * gy)], []


def _dropout_fwd(xs, ps, attrs, ctx):
    x = xs[0]
    p = attrs["p"]
    mode, gen = ctx["mode"], ctx["rng"]
    if mode is Mode.EVAL or p == 0:
        ctx["mask"] = None
        return x
    if gen is None:
        raise ValueError("dropout in TRAIN/MC_DROPOUT mode needs an rng stream")
    mask = (gen.random(x.shape) >= p) / (1.0 - p)
    ctx["mask"] = mask
    return x * mask


def _dropout_bwd(gy, ctx, attrs, ps):
    mask = ctx["mask"]
    return [gy if mask is None else gy * mask], []


def _pool_fwd(xs, ps, attrs, ctx):
    x = xs[0]
    n, c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise ShapeError(f"max_pool3d needs even spatial dims, got {x.shape[2:]}")
    blocks = x.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    blocks = blocks.reshape(n, c, d // 2, h // 2, w // 2, 8)
    arg = blocks.argmax(axis=-1)
    ctx["arg"], ctx["shape"] = arg, x.shape
    return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]


def _pool_bwd(gy, ctx, attrs, ps):
    arg = ctx["arg"]
    n, c, d, h, w = ctx["shape"]
    g = np.zeros(arg.shape + (8,))
    np.put_along_axis(g, arg[..., None], gy[..., None], axis=-1)
    g = g.reshape(n, c, d // 2, h // 2, w // 2, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    return [g.reshape(n, c, d, h, w)], []


def _concat_fwd(xs, ps, attrs, ctx):
    ref = xs[0].shape
    for i, x in enumerate(xs[1:], start=1):
        if x.shape[:1] != ref[:1] or x.shape[2:] != ref[2:]:
            raise ShapeError(f"concat: input {i} shape {x.shape} incompatible with {ref} outside axis 1")
    ctx["sizes"] = [x.shape[1] for x in xs]
    return np.concatenate(xs, axis=1)


def _concat_bwd(gy, ctx, attrs, ps):
    edges = np.cumsum(ctx["sizes"])[:-1]
    return list(np.split(gy, edges, axis=1)), []


def _softmax_fwd(xs, ps, attrs, ctx):
    x = xs[0]
    e = np.exp(x - x.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)
    ctx["y"] = y
    return y


def _softmax_bwd(gy, ctx, attrs, ps):
    y = ctx["y"]
    return [y * (gy - (gy * y).sum(axis=1, keepdims=True))], []


def _add_fwd(xs, ps, attrs, ctx):
    if xs[0].shape != xs[1].shape:
        raise ShapeError(f"add: shapes {xs[0].shape} and {xs[1].shape} differ")
    return xs[0] + xs[1]


def _add_bwd(gy, ctx, attrs, ps):
    return [gy, gy], []


def _scale_fwd(xs, ps, attrs, ctx):
    return attrs["factor"] * xs[0]


def _scale_bwd(gy, ctx, attrs, ps):
    return [attrs["factor"] * gy], []


def _rsum_fwd(xs, ps, attrs, ctx):
    x = xs[0]
    if len(xs) > 1:
        ctx["w"] = np.broadcast_to(xs[1], x.shape)
        return np.asarray((x * ctx["w"]).sum())
    ctx["w"] = None
    ctx["shape"] = x.shape
    return np.asarray(x.sum())


def _rsum_bwd(gy, ctx, attrs, ps):
    w = ctx["w"]
    if w is None:
        return [np.full(ctx["shape"], float(gy))], []
    return [float(gy) * w, None], []


def _dice_fwd(xs, ps, attrs, ctx):
    p, g, w = xs
    if p.shape != g.shape:
        raise ShapeError(f"dice_terms: probabilities {p.shape} vs one-hot target {g.shape}")
    axes = (0,) + tuple(range(2, p.ndim))
    wp = w * p
    inter = (wp * g).sum(axis=axes)
    psum = wp.sum(axis=axes)
    gsum = (w * g).sum(axis=axes)
    denom = psum + gsum + DICE_EPS
    d = (2.0 * inter + DICE_EPS) / denom
    ctx.update(g=g, w=w, d=d, denom=denom)
    return d


def _dice_bwd(gy, ctx, attrs, ps):
    g, w, d, denom = ctx["g"], ctx["w"], ctx["d"], ctx["denom"]
    shape = (1, -1) + (1,) * (g.ndim - 2)
    coef = (gy / denom).reshape(shape)
    gp = w * coef * (2.0 * g - d.reshape(shape))
    return [gp, None, None], []


@dataclass(frozen=True)
class _Rule:
    forward: object
    backward: object
    n_params: int = 0
    nondiff: tuple = ()


RULES = {
    OpKind.CONV3D: _Rule(_conv_fwd, _conv_bwd, 2),
    OpKind.TRANSPOSED_CONV3D: _Rule(_tconv_fwd, _tconv_bwd, 2),
    OpKind.INSTANCE_NORM: _Rule(_norm_fwd, _norm_bwd, 2),
    OpKind.LEAKY_RELU: _Rule(_lrelu_fwd, _lrelu_bwd),
    OpKind.DROPOUT: _Rule(_dropout_fwd, _dropout_bwd),
    OpKind.MAX_POOL3D: _Rule(_pool_fwd, _pool_bwd),
    OpKind.CONCAT: _Rule(_concat_fwd, _concat_bwd),
    OpKind.SOFTMAX: _Rule(_softmax_fwd, _softmax_bwd),
    OpKind.ADD: _Rule(_add_fwd, _add_bwd),
    OpKind.SCALE: _Rule(_scale_fwd, _scale_bwd),
    OpKind.REDUCE_SUM: _Rule(_rsum_fwd, _rsum_bwd, 0, (1,)),
    OpKind.DICE_TERMS: _Rule(_dice_fwd, _dice_bwd, 0, (1, 2)),
}


# ---------------------------------------------------------------- graph


@dataclass
class Node:
    kind: OpKind
    inputs: tuple  # refs: ("in", name) or ("node", index)
    params: tuple = ()
    attrs: dict = field(default_factory=dict)
    name: str = ""


@dataclass
class Gradients:
    params: dict
    inputs: dict


class Graph:
    """Op nodes in topological order plus the named parameter arrays they use."""

    def __init__(self):
        self.nodes = []
        self.input_specs = {}
        self.outputs = {}
        self.params = {}
        self._tape = None

    # -- construction
    def input(self, name, shape=None):
        """Declare a graph input; ``shape`` entries of ``None`` match any size."""
        self.input_specs[name] = None if shape is None else tuple(shape)
        return ("in", name)

    def param(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        self.params[name] = np.asarray(value, dtype=np.float64)
        return name

    def add(self, kind, inputs, params=(), name="", **attrs):
        kind = OpKind(kind)
        for ref in inputs:
            if ref[0] == "node" and not 0 <= ref[1] < len(self.nodes):
                raise ValueError(f"node input {ref} does not precede the new node")
            if ref[0] == "in" and ref[1] not in self.input_specs:
                raise KeyError(f"unknown graph input {ref[1]!r}")
        if len(params) != RULES[kind].n_params:
            raise ValueError(f"{kind.value} takes {RULES[kind].n_params} parameters, got {len(params)}")
        for p in params:
            if p not in self.params:
                raise KeyError(f"unknown parameter {p!r}")
        self.nodes.append(Node(kind, tuple(inputs), tuple(params), dict(attrs), name or f"{kind.value}{len(self.nodes)}"))
        return ("node", len(self.nodes) - 1)

    def output(self, name, ref):
        self.outputs[name] = ref

    def n_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def clear(self):
        self._tape = None

    def _check_inputs(self, inputs):
        for name, spec in self.input_specs.items():
            if name not in inputs:
                raise ShapeError(f"missing graph input {name!r}")
            x = inputs[name]
            if spec is None:
                continue
            if x.ndim != len(spec):
                raise ShapeError(f"input {name!r}: expected {len(spec)} axes, got shape {x.shape}")
            for axis, (want, got) in enumerate(zip(spec, x.shape)):
                if want is not None and want != got:
                    raise ShapeError(f"input {name!r}: axis {axis} has size {got}, expected {want}")


def forward(graph, inputs, mode=Mode.EVAL, rng=None, checked=False):
    """Evaluate ``graph``; returns ``{output name: array}`` and records a tape.

    Dropout nodes draw their masks from ``rng`` in node order (TRAIN and
    MC_DROPOUT); in EVAL they are the identity.
    """
    mode = Mode(mode)
    inputs = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
    graph._check_inputs(inputs)
    values, ctxs = [], []
    for i, node in enumerate(graph.nodes):
        xs = [inputs[r[1]] if r[0] == "in" else values[r[1]] for r in node.inputs]
        ps = [graph.params[p] for p in node.params]
        ctx = {"mode": mode, "rng": rng}
        try:
            y = RULES[node.kind].forward(xs, ps, node.attrs, ctx)
        except ShapeError as exc:
            raise ShapeError(f"node {i} ({node.name}): {exc}") from None
        if checked and not np.all(np.isfinite(y)):
            raise FloatingPointError(f"node {i} ({node.name}) produced non-finite values")
        del ctx["rng"]
        values.append(y)
        ctxs.append(ctx)
    graph._tape = (inputs, values, ctxs)
    return {name: (inputs[r[1]] if r[0] == "in" else values[r[1]]) for name, r in graph.outputs.items()}


def backward(graph, cotangents):
    """Pull ``{output name: cotangent}`` back to all parameters and inputs."""
    if graph._tape is None:
        raise RuntimeError("backward called before forward")
    inputs, values, ctxs = graph._tape
    grads = [None] * len(values)
    in_grads = {k: np.zeros_like(v) for k, v in inputs.items()}
    p_grads = {k: np.zeros_like(v) for k, v in graph.params.items()}

    def accumulate(ref, g):
        if ref[0] == "in":
            in_grads[ref[1]] += g
        elif grads[ref[1]] is None:
            grads[ref[1]] = np.array(g, dtype=np.float64)
        else:
            grads[ref[1]] += g

    for name, ct in cotangents.items():
        ref = graph.outputs[name]
        target = inputs[ref[1]] if ref[0] == "in" else values[ref[1]]
        ct = np.broadcast_to(np.asarray(ct, dtype=np.float64), target.shape)
        accumulate(ref, ct)

    for i in range(len(graph.nodes) - 1, -1, -1):
        gy = grads[i]
        if gy is None:
            continue
        node = graph.nodes[i]
        rule = RULES[node.kind]
        ps = [graph.params[p] for p in node.params]
        gxs, gps = rule.backward(gy, ctxs[i], node.attrs, ps)
        for j, (ref, gx) in enumerate(zip(node.inputs, gxs)):
            if gx is not None and j not in rule.nondiff:
                accumulate(ref, gx)
        for pname, gp in zip(node.params, gps):
            p_grads[pname] += gp
    return Gradients(p_grads, in_grads)


# ---------------------------------------------------------------- verification


@dataclass
class GradCheckReport:
    kind: OpKind
    shapes: tuple
    errors: dict  # tensor name -> max-norm relative error
    tolerance: float

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self):
        return self.max_error <= self.tolerance


def relative_error(analytic, numeric):
    """Max-norm relative error ``|a - n|_inf / max(|a|_inf, |n|_inf)``."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)))
    if scale == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def numeric_gradient(fn, x, step=1e-5, indices=None):
    """Central differences of scalar ``fn()`` w.r.t. entries of ``x`` (mutated in place, restored)."""
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(len(idx) if indices is not None else flat.size)
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + step
        up = fn()
        flat[i] = orig - step
        down = fn()
        flat[i] = orig
        out[j] = (up - down) / (2 * step)
    return out


def _primitive_graph(kind, shapes, gen, attrs):
    """Single-node graph around ``kind`` with random inputs/parameters."""
    g = Graph()
    x_shape = tuple(shapes[0])
    feeds = {}
    refs = []
    if kind is OpKind.LEAKY_RELU:
        x = gen.uniform(0.001, 1.0, x_shape) * gen.choice([-1.0, 1.0], x_shape)
    elif kind is OpKind.MAX_POOL3D:
        # distinct values spaced well above the FD step
        x = gen.permutation(np.prod(x_shape)).reshape(x_shape) * 0.01
    elif kind is OpKind.DICE_TERMS:
        logits = gen.normal(size=x_shape)
        x = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    else:
        x = gen.normal(size=x_shape)
    feeds["x"] = x
    refs.append(g.input("x"))
    extra = list(shapes[1:])
    if kind in (OpKind.ADD, OpKind.CONCAT):
        for j, s in enumerate(extra or [x_shape]):
            feeds[f"x{j + 1}"] = gen.normal(size=s)
            refs.append(g.input(f"x{j + 1}"))
    elif kind is OpKind.REDUCE_SUM:
        feeds["mask"] = (gen.random(x_shape) > 0.3).astype(float)
        refs.append(g.input("mask"))
    elif kind is OpKind.DICE_TERMS:
        lab = gen.integers(0, x_shape[1], (x_shape[0],) + x_shape[2:])
        feeds["target"] = np.moveaxis(np.eye(x_shape[1])[lab], -1, 1)
        feeds["weight"] = (gen.random((x_shape[0], 1) + x_shape[2:]) > 0.2).astype(float)
        refs += [g.input("target"), g.input("weight")]
    params = ()
    cin = x_shape[1]
    if kind is OpKind.CONV3D:
        cout, k = attrs.pop("cout", 2), attrs.pop("k", 3)
        params = (g.param("w", gen.normal(size=(cout, cin, k, k, k))), g.param("b", gen.normal(size=cout)))
    elif kind is OpKind.TRANSPOSED_CONV3D:
        cout = attrs.pop("cout", 2)
        params = (g.param("w", gen.normal(size=(cin, cout, 2, 2, 2))), g.param("b", gen.normal(size=cout)))
    elif kind is OpKind.INSTANCE_NORM:
        params = (g.param("gamma", gen.uniform(0.5, 1.5, cin)), g.param("beta", gen.normal(size=cin)))
    if kind is OpKind.DROPOUT:
        attrs.setdefault("p", 0.3)
    if kind is OpKind.SCALE:
        attrs.setdefault("factor", -1.7)
    g.output("y", g.add(kind, refs, params, **attrs))
    return g, feeds


def grad_check(kind, shapes, tolerance=1e-6, seed=0, step=1e-5, max_entries=None, **attrs):
    """Compare analytic adjoints of one primitive with central differences.

    The scalar probed is ``sum(r * y)`` for a fixed random cotangent ``r``.
    Returns a :class:`GradCheckReport` with one error per differentiable
    input and parameter.
    """
    kind = OpKind(kind)
    gen = rng_mod.stream(seed, "gradcheck", kind.value)
    graph, feeds = _primitive_graph(kind, shapes, gen, dict(attrs))
    mode = Mode.TRAIN

    def run():
        return forward(graph, feeds, mode, rng_mod.stream(seed, "gradcheck-dropout"))["y"]

    y = run()
    r = gen.normal(size=y.shape)
    grads = backward(graph, {"y": r})
    scalar = lambda: float(np.sum(run() * r))  # noqa: E731

    nondiff = {f"in:{graph.nodes[0].inputs[j][1]}" for j in RULES[kind].nondiff}
    targets = [(f"in:{k}", feeds[k], grads.inputs[k]) for k in feeds]
    targets += [(f"param:{k}", graph.params[k], grads.params[k]) for k in graph.params]
    errors = {}
    for name, arr, analytic in targets:
        if name in nondiff:
            continue
        idx = None
        if max_entries is not None and arr.size > max_entries:
            idx = sorted(gen.choice(arr.size, max_entries, replace=False).tolist())
        numeric = numeric_gradient(scalar, arr, step, idx)
        a = analytic.reshape(-1) if idx is None else analytic.reshape(-1)[idx]
        errors[name] = relative_error(a, numeric)
    return GradCheckReport(kind, tuple(tuple(s) for s in shapes), errors, tolerance)
