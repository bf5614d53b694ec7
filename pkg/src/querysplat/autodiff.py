"""Dense-array expression graphs with reverse-mode differentiation.

The decoders are small fixed graphs evaluated millions of times, so the graph
is built once (static shapes) and then repeatedly evaluated against leaf
bindings. Evaluation is a pure function of the bindings; `eval_backward`
walks the tape in reverse and accumulates vector-Jacobian products.

Supported primitives: add, sub, mul, matmul, transpose, concat, slice,
softmax (last axis), layer_norm (last axis), relu, sigmoid, tanh, exp, log,
sum/mean reductions, broadcast, scale-by-constant, l2norm, cosine similarity.
Broadcasting is restricted to scalars and trailing-shape (leading-axis)
broadcast so the shape rules stay checkable at build time.
"""

from __future__ import annotations

import numpy as np

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Incompatible shapes at graph construction or binding time."""


class EvalError(RuntimeError):
    """Evaluation failure: unbound leaf, bad seed, or non-finite intermediate."""


def _suffix_broadcast_shape(a: tuple, b: tuple) -> tuple:
    """Result shape for elementwise ops under scalar/leading-axis broadcast."""
    if a == b:
        return a
    if len(b) < len(a) and a[len(a) - len(b):] == b:
        return a
    if len(a) < len(b) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(f"cannot broadcast {a} and {b}: only scalar or leading-axis broadcast allowed")


def _reduce_to_shape(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the leading axes introduced by broadcast."""
    if grad.shape == tuple(shape):
        return grad
    k = grad.ndim - len(shape)
    out = grad.sum(axis=tuple(range(k))) if k > 0 else grad
    if out.shape != tuple(shape):
        raise ShapeError(f"gradient shape {grad.shape} does not reduce to {shape}")
    return out


class Node:
    """One primitive application (or leaf) in the graph."""

    __slots__ = ("graph", "idx", "op", "inputs", "params", "shape", "name")

    def __init__(self, graph, idx, op, inputs, params, shape, name=None):
        self.graph = graph
        self.idx = idx
        self.op = op
        self.inputs = inputs
        self.params = params
        self.shape = tuple(shape)
        self.name = name

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"<Node {self.idx} {self.op}{tag} {self.shape}>"


class Graph:
    """Builder + evaluator for a static DAG of array primitives."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[str, Node] = {}

    # -- construction -------------------------------------------------------

    def _new(self, op, inputs, params, shape, name=None) -> Node:
        node = Node(self, len(self.nodes), op, tuple(inputs), params, shape, name)
        self.nodes.append(node)
        return node

    def leaf(self, name: str, shape) -> Node:
        """Declare a named input array of fixed shape."""
        if name in self.leaves:
            raise ValueError(f"duplicate leaf {name!r}")
        node = self._new("leaf", (), {}, tuple(shape), name)
        self.leaves[name] = node
        return node

    def add(self, a: Node, b: Node) -> Node:
        return self._new("add", (a, b), {}, _suffix_broadcast_shape(a.shape, b.shape))

    def sub(self, a: Node, b: Node) -> Node:
        return self._new("sub", (a, b), {}, _suffix_broadcast_shape(a.shape, b.shape))

    def mul(self, a: Node, b: Node) -> Node:
        return self._new("mul", (a, b), {}, _suffix_broadcast_shape(a.shape, b.shape))

    def matmul(self, a: Node, b: Node) -> Node:
        if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul needs (m,k)@(k,n), got {a.shape} @ {b.shape}")
        return self._new("matmul", (a, b), {}, (a.shape[0], b.shape[1]))

    def transpose(self, a: Node, perm=None) -> Node:
        perm = tuple(perm) if perm is not None else tuple(reversed(range(len(a.shape))))
        if sorted(perm) != list(range(len(a.shape))):
            raise ShapeError(f"bad transpose perm {perm} for shape {a.shape}")
        return self._new("transpose", (a,), {"perm": perm}, tuple(a.shape[p] for p in perm))

    def concat(self, parts, axis: int = 0) -> Node:
        parts = list(parts)
        base = list(parts[0].shape)
        axis = axis % len(base)
        for p in parts[1:]:
            s = list(p.shape)
            if len(s) != len(base) or any(s[i] != base[i] for i in range(len(base)) if i != axis):
                raise ShapeError(f"concat mismatch: {parts[0].shape} vs {p.shape} on axis {axis}")
        out = list(base)
        out[axis] = sum(p.shape[axis] for p in parts)
        return self._new("concat", tuple(parts), {"axis": axis}, tuple(out))

    def slice(self, a: Node, starts, stops) -> Node:
        starts, stops = tuple(starts), tuple(stops)
        if len(starts) != len(a.shape) or len(stops) != len(a.shape):
            raise ShapeError("slice bounds must cover every axis")
        for s, e, d in zip(starts, stops, a.shape):
            if not (0 <= s <= e <= d):
                raise ShapeError(f"slice [{s}:{e}] out of range for extent {d}")
        return self._new("slice", (a,), {"starts": starts, "stops": stops}, tuple(e - s for s, e in zip(starts, stops)))

    def softmax(self, a: Node) -> Node:
        return self._new("softmax", (a,), {}, a.shape)

    def layer_norm(self, a: Node, eps: float = LAYER_NORM_EPS) -> Node:
        if len(a.shape) == 0:
            raise ShapeError("layer_norm needs at least one axis")
        return self._new("layer_norm", (a,), {"eps": eps}, a.shape)

    def relu(self, a: Node) -> Node:
        return self._new("relu", (a,), {}, a.shape)

    def sigmoid(self, a: Node) -> Node:
        return self._new("sigmoid", (a,), {}, a.shape)

    def tanh(self, a: Node) -> Node:
        return self._new("tanh", (a,), {}, a.shape)

    def exp(self, a: Node) -> Node:
        return self._new("exp", (a,), {}, a.shape)

    def log(self, a: Node) -> Node:
        return self._new("log", (a,), {}, a.shape)

    def sum(self, a: Node, axis=None) -> Node:
        shape = () if axis is None else tuple(d for i, d in enumerate(a.shape) if i != axis % len(a.shape))
        return self._new("sum", (a,), {"axis": axis if axis is None else axis % len(a.shape)}, shape)

    def mean(self, a: Node, axis=None) -> Node:
        shape = () if axis is None else tuple(d for i, d in enumerate(a.shape) if i != axis % len(a.shape))
        return self._new("mean", (a,), {"axis": axis if axis is None else axis % len(a.shape)}, shape)

    def broadcast(self, a: Node, shape) -> Node:
        _suffix_broadcast_shape(tuple(shape), a.shape)
        return self._new("broadcast", (a,), {"shape": tuple(shape)}, tuple(shape))

    def scale(self, a: Node, c: float) -> Node:
        return self._new("scale", (a,), {"c": float(c)}, a.shape)

    def l2norm(self, a: Node, eps: float = 0.0) -> Node:
        if len(a.shape) == 0:
            raise ShapeError("l2norm needs at least one axis")
        return self._new("l2norm", (a,), {"eps": eps}, a.shape[:-1])

    def cosine(self, a: Node, b: Node, eps: float = 1e-8) -> Node:
        if a.shape != b.shape or len(a.shape) == 0:
            raise ShapeError(f"cosine needs equal shapes with a reduce axis, got {a.shape}, {b.shape}")
        return self._new("cosine", (a, b), {"eps": eps}, a.shape[:-1])


# -- forward kernels ---------------------------------------------------------


def _softmax(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def _layer_norm_fwd(x, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _l2norm_fwd(x, eps):
    return np.sqrt((x * x).sum(axis=-1) + eps * eps)


def _cosine_fwd(a, b, eps):
    na = _l2norm_fwd(a, eps)
    nb = _l2norm_fwd(b, eps)
    return (a * b).sum(axis=-1) / (na * nb)


def _forward_op(node: Node, vals):
    op, p = node.op, node.params
    if op == "add":
        return vals[0] + vals[1]
    if op == "sub":
        return vals[0] - vals[1]
    if op == "mul":
        return vals[0] * vals[1]
    if op == "matmul":
        return vals[0] @ vals[1]
    if op == "transpose":
        return np.transpose(vals[0], p["perm"])
    if op == "concat":
        return np.concatenate(vals, axis=p["axis"])
    if op == "slice":
        return vals[0][tuple(slice(s, e) for s, e in zip(p["starts"], p["stops"]))]
    if op == "softmax":
        return _softmax(vals[0])
    if op == "layer_norm":
        return _layer_norm_fwd(vals[0], p["eps"])
    if op == "relu":
        return np.maximum(vals[0], 0)
    if op == "sigmoid":
        return 1.0 / (1.0 + np.exp(-vals[0]))
    if op == "tanh":
        return np.tanh(vals[0])
    if op == "exp":
        return np.exp(vals[0])
    if op == "log":
        return np.log(vals[0])
    if op == "sum":
        return vals[0].sum(axis=p["axis"])
    if op == "mean":
        return vals[0].mean(axis=p["axis"])
    if op == "broadcast":
        return np.broadcast_to(vals[0], p["shape"]).copy()
    if op == "scale":
        return vals[0] * np.asarray(p["c"], dtype=vals[0].dtype)
    if op == "l2norm":
        return _l2norm_fwd(vals[0], p["eps"])
    if op == "cosine":
        return _cosine_fwd(vals[0], vals[1], p["eps"])
    raise EvalError(f"unknown op {op}")


def _backward_op(node: Node, grad, vals_in, val_out):
    """Vector-Jacobian product: gradient w.r.t. each input of `node`."""
    op, p = node.op, node.params
    if op == "add":
        return [_reduce_to_shape(grad, vals_in[0].shape), _reduce_to_shape(grad, vals_in[1].shape)]
    if op == "sub":
        return [_reduce_to_shape(grad, vals_in[0].shape), _reduce_to_shape(-grad, vals_in[1].shape)]
    if op == "mul":
        return [
            _reduce_to_shape(grad * vals_in[1], vals_in[0].shape),
            _reduce_to_shape(grad * vals_in[0], vals_in[1].shape),
        ]
    if op == "matmul":
        return [grad @ vals_in[1].T, vals_in[0].T @ grad]
    if op == "transpose":
        inv = np.argsort(p["perm"])
        return [np.transpose(grad, inv)]
    if op == "concat":
        out, off = [], 0
        for v in vals_in:
            sl = [slice(None)] * grad.ndim
            sl[p["axis"]] = slice(off, off + v.shape[p["axis"]])
            out.append(grad[tuple(sl)])
            off += v.shape[p["axis"]]
        return out
    if op == "slice":
        g = np.zeros_like(vals_in[0])
        g[tuple(slice(s, e) for s, e in zip(p["starts"], p["stops"]))] = grad
        return [g]
    if op == "softmax":
        s = (grad * val_out).sum(axis=-1, keepdims=True)
        return [val_out * (grad - s)]
    if op == "layer_norm":
        x = vals_in[0]
        d = x.shape[-1]
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + p["eps"])
        y = val_out
        gm = grad.mean(axis=-1, keepdims=True)
        gym = (grad * y).mean(axis=-1, keepdims=True)
        return [inv * (grad - gm - y * gym)]
    if op == "relu":
        return [grad * (vals_in[0] > 0)]
    if op == "sigmoid":
        return [grad * val_out * (1.0 - val_out)]
    if op == "tanh":
        return [grad * (1.0 - val_out * val_out)]
    if op == "exp":
        return [grad * val_out]
    if op == "log":
        return [grad / vals_in[0]]
    if op == "sum":
        if p["axis"] is None:
            return [np.broadcast_to(grad, vals_in[0].shape).copy()]
        return [np.broadcast_to(np.expand_dims(grad, p["axis"]), vals_in[0].shape).copy()]
    if op == "mean":
        n = vals_in[0].size if p["axis"] is None else vals_in[0].shape[p["axis"]]
        if p["axis"] is None:
            return [np.broadcast_to(grad / n, vals_in[0].shape).copy()]
        return [np.broadcast_to(np.expand_dims(grad / n, p["axis"]), vals_in[0].shape).copy()]
    if op == "broadcast":
        return [_reduce_to_shape(grad, vals_in[0].shape)]
    if op == "scale":
        return [grad * np.asarray(p["c"], dtype=grad.dtype)]
    if op == "l2norm":
        g = np.expand_dims(grad / val_out, -1)
        return [g * vals_in[0]]
    if op == "cosine":
        a, b = vals_in
        eps = p["eps"]
        na = _l2norm_fwd(a, eps)
        nb = _l2norm_fwd(b, eps)
        c = np.expand_dims(val_out, -1)
        ge = np.expand_dims(grad, -1)
        nae = np.expand_dims(na, -1)
        nbe = np.expand_dims(nb, -1)
        da = ge * (b / (nae * nbe) - c * a / (nae * nae))
        db = ge * (a / (nae * nbe) - c * b / (nbe * nbe))
        return [da, db]
    raise EvalError(f"unknown op {op}")


# -- evaluation --------------------------------------------------------------


def _bind(graph: Graph, bindings: dict) -> dict:
    values = {}
    for name, node in graph.leaves.items():
        if name not in bindings:
            raise EvalError(f"unbound leaf {name!r}")
        arr = np.asarray(bindings[name])
        if arr.shape != node.shape:
            raise ShapeError(f"leaf {name!r} expects shape {node.shape}, got {arr.shape}")
        values[node.idx] = arr
    return values


def eval_forward(graph: Graph, bindings: dict, outputs=None, check_finite: bool = True) -> dict:
    """Evaluate the graph; returns {node: array} for the requested output nodes.

    Pure in the bindings: identical bindings give bit-identical outputs.
    Raises EvalError on unbound leaves or non-finite intermediates.
    """
    values = _bind(graph, bindings)
    for node in graph.nodes:
        if node.op == "leaf":
            continue
        out = _forward_op(node, [values[i.idx] for i in node.inputs])
        if check_finite and not np.all(np.isfinite(out)):
            raise EvalError(f"non-finite value produced by node {node!r}")
        values[node.idx] = out
    if outputs is None:
        outputs = [graph.nodes[-1]]
    return {n: values[n.idx] for n in outputs}, values


def eval_backward(graph: Graph, bindings: dict, seeds: dict, values: dict | None = None) -> dict:
    """Reverse-mode pass: returns {leaf_name: d(sum_i seed_i . out_i)/d leaf}.

    `seeds` maps output Node -> seed array of matching shape. Leaves that do
    not reach any seeded output get exact zero arrays.
    """
    if values is None:
        _, values = eval_forward(graph, bindings)
    grads: dict[int, np.ndarray] = {}
    for node, seed in seeds.items():
        seed = np.asarray(seed)
        if seed.shape != node.shape:
            raise ShapeError(f"seed for {node!r} expects shape {node.shape}, got {seed.shape}")
        if node.idx in grads:
            grads[node.idx] = grads[node.idx] + seed
        else:
            grads[node.idx] = seed.astype(values[node.idx].dtype, copy=True)
    for node in reversed(graph.nodes):
        g = grads.get(node.idx)
        if g is None or node.op == "leaf":
            continue
        vals_in = [values[i.idx] for i in node.inputs]
        for inp, gi in zip(node.inputs, _backward_op(node, g, vals_in, values[node.idx])):
            if inp.idx in grads:
                grads[inp.idx] = grads[inp.idx] + gi
            else:
                grads[inp.idx] = gi
    out = {}
    for name, node in graph.leaves.items():
        if node.idx in grads:
            out[name] = grads[node.idx]
        else:
            out[name] = np.zeros(node.shape, dtype=values[node.idx].dtype)
    return out


def finite_diff_check(graph: Graph, bindings: dict, eps: float = 1e-5, outputs=None, seeds=None, rng=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Bindings must be float64; eps in (0, 1e-3]. The probe scalar is
    sum_i seed_i . out_i with fixed random seeds unless given explicitly.
    """
    if not (0.0 < eps <= 1e-3):
        raise ValueError("eps must be in (0, 1e-3]")
    bindings = {k: np.asarray(v, dtype=np.float64) for k, v in bindings.items()}
    if outputs is None:
        outputs = [graph.nodes[-1]]
    if seeds is None:
        rng = rng or np.random.default_rng(0)
        seeds = {n: rng.standard_normal(n.shape) for n in outputs}

    def scalar(b):
        outs, _ = eval_forward(graph, b, outputs)
        return float(sum((np.asarray(seeds[n]) * outs[n]).sum() for n in outputs))

    outs, values = eval_forward(graph, bindings, outputs)
    analytic = eval_backward(graph, bindings, {n: seeds[n] for n in outputs}, values)
    max_rel = 0.0
    for name in graph.leaves:
        base = bindings[name]
        a = analytic[name]
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = scalar(bindings)
            flat[i] = orig - eps
            fm = scalar(bindings)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * eps)
            an = a.reshape(-1)[i]
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
            max_rel = max(max_rel, rel)
    return max_rel


# -- array file format -------------------------------------------------------

_DTYPE_TOKENS = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "i32": np.dtype("<i4"),
    "i64": np.dtype("<i8"),
    "u8": np.dtype("u1"),
}
_TOKEN_FOR_KIND = {("f", 4): "f32", ("f", 8): "f64", ("i", 4): "i32", ("i", 8): "i64", ("u", 1): "u8"}


def write_array(fh, arr: np.ndarray) -> None:
    """Write one array block: `ndarray v1 <dtype> <rank> <d0> ...` + raw LE data."""
    arr = np.ascontiguousarray(arr)
    token = _TOKEN_FOR_KIND.get((arr.dtype.kind, arr.dtype.itemsize))
    if token is None:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    dims = " ".join(str(d) for d in arr.shape)
    header = f"ndarray v1 {token} {arr.ndim}" + (f" {dims}" if dims else "") + "\n"
    fh.write(header.encode("utf-8"))
    fh.write(arr.astype(_DTYPE_TOKENS[token]).tobytes())


def read_array(fh) -> np.ndarray:
    """Read one array block written by `write_array`."""
    header = b""
    while not header.endswith(b"\n"):
        c = fh.read(1)
        if not c:
            raise EvalError("truncated ndarray header")
        header += c
    parts = header.decode("utf-8").split()
    if len(parts) < 4 or parts[0] != "ndarray" or parts[1] != "v1":
        raise EvalError(f"bad ndarray header: {header!r}")
    token, rank = parts[2], int(parts[3])
    if token not in _DTYPE_TOKENS:
        raise EvalError(f"unknown dtype token {token!r}")
    shape = tuple(int(x) for x in parts[4 : 4 + rank])
    if len(shape) != rank:
        raise EvalError("ndarray header rank/dims mismatch")
    dt = _DTYPE_TOKENS[token]
    count = int(np.prod(shape)) if shape else 1
    raw = fh.read(count * dt.itemsize)
    if len(raw) != count * dt.itemsize:
        raise EvalError("truncated ndarray payload")
    return np.frombuffer(raw, dtype=dt).reshape(shape).copy()


def save_array(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_array(fh, arr)


def load_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_array(fh)
