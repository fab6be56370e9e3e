"""Symbolic expression tape with stop-grad, MagicBox and n-th order derivatives.

Expressions are immutable DAG nodes over dense float64 arrays.  Every node
carries an ordered tuple of named *plates* (independent batch axes that come
first in the data layout) followed by an ordinary event shape.  Binary
operations align plates by name and event axes by numpy broadcasting.

Differentiation is a symbolic forward-mode transformation of the tape.  For a
scalar target the tangent seed is the constant 1.  For an array target the
seed is a one-hot constant living on a fresh plate named ``d<name>#<k>``, so a
single pass yields the full Jacobian (and repeated passes yield Hessians and
higher tensors).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "ADError",
    "ShapeError",
    "EvaluationError",
    "UnboundVariableError",
    "Value",
    "Expression",
    "build",
    "const",
    "var",
    "add",
    "mul",
    "pow",
    "exp",
    "log",
    "sum",
    "broadcast",
    "stop_grad",
    "magic_box",
    "neg",
    "sub",
    "div",
    "sigmoid",
    "softplus",
    "softmax",
    "select",
    "rename_plate",
    "expand_last",
    "evaluate",
    "differentiate",
    "jacobian",
    "to_sexpr",
    "contains_op",
    "grad_plate",
]

OPS = ("const", "var", "add", "mul", "pow", "exp", "log", "sum", "broadcast", "stop_grad")


class ADError(Exception):
    """Base class for errors raised by the expression engine."""


class ShapeError(ADError, ValueError):
    pass


class EvaluationError(ADError, ArithmeticError):
    pass


class UnboundVariableError(ADError, KeyError):
    pass


_counter = itertools.count()


@dataclass(frozen=True)
class Value:
    """Result of evaluating an expression.

    ``data`` has ``len(plates)`` leading plate axes followed by the event axes.
    """

    data: np.ndarray
    plates: tuple[str, ...] = ()

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        object.__setattr__(self, "data", arr)
        if arr.ndim < len(self.plates):
            raise ShapeError(f"value with {arr.ndim} axes cannot carry plates {self.plates}")
        if len(set(self.plates)) != len(self.plates):
            raise ShapeError(f"duplicate plate names {self.plates}")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def event_shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape[len(self.plates):])

    @property
    def plate_sizes(self) -> dict[str, int]:
        return {p: int(n) for p, n in zip(self.plates, self.data.shape)}

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"value of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def aligned(self, plates: Sequence[str]) -> np.ndarray:
        """Data transposed so that its plate axes follow ``plates`` (which must be a permutation)."""
        if set(plates) != set(self.plates):
            raise ShapeError(f"cannot align plates {self.plates} to {tuple(plates)}")
        return _align(self.data, self.plates, tuple(plates), self.data.ndim - len(self.plates), self.plate_sizes)

    def __float__(self):
        return self.item()


def _align(data, src_plates, dst_plates, dst_event_ndim, sizes):
    """Transpose/expand ``data`` (laid out as src_plates + event) to dst_plates + event."""
    n_src = len(src_plates)
    src_event_ndim = data.ndim - n_src
    present = [p for p in dst_plates if p in src_plates]
    perm = [src_plates.index(p) for p in present] + list(range(n_src, data.ndim))
    if perm != list(range(data.ndim)):
        data = data.transpose(perm)
    if len(present) == len(dst_plates) and src_event_ndim == dst_event_ndim:
        return data
    shape = []
    for p in dst_plates:
        shape.append(sizes[p] if p in src_plates else 1)
    shape.extend([1] * (dst_event_ndim - src_event_ndim))
    shape.extend(data.shape[len(present):])
    return data.reshape(shape)


def _merge_plates(parents):
    plates: list[str] = []
    sizes: dict[str, int] = {}
    for p in parents:
        for name in p.plates:
            n = p.plate_sizes[name]
            if name in sizes:
                if sizes[name] != n:
                    raise ShapeError(f"plate {name!r} has sizes {sizes[name]} and {n}")
            else:
                sizes[name] = n
                plates.append(name)
    return tuple(plates), sizes


class Expression:
    """A node of the tape.  Build through the module-level constructors."""

    __slots__ = ("op", "parents", "attrs", "plates", "plate_sizes", "event_shape", "uid", "__weakref__")

    def __init__(self, op, parents, attrs, plates, plate_sizes, event_shape):
        self.op = op
        self.parents = tuple(parents)
        self.attrs = attrs
        self.plates = tuple(plates)
        self.plate_sizes = dict(plate_sizes)
        self.event_shape = tuple(int(s) for s in event_shape)
        self.uid = next(_counter)

    # shape helpers
    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.plate_sizes[p] for p in self.plates) + self.event_shape

    @property
    def name(self) -> str | None:
        return self.attrs.get("name")

    def is_const(self) -> bool:
        return self.op == "const"

    def const_value(self) -> Value:
        if self.op != "const":
            raise ADError(f"{self.op} node is not a constant")
        return self.attrs["value"]

    # variable state
    def assign(self, value) -> None:
        """Overwrite the default binding of a variable node."""
        if self.op != "var":
            raise ADError("only variables can be assigned")
        arr = np.array(value, dtype=np.float64)
        if arr.shape != self.event_shape:
            raise ShapeError(f"variable {self.name!r} has shape {self.event_shape}, got {arr.shape}")
        self.attrs["value"] = arr

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __pow__(self, other):
        return pow(self, other)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Expression({self.op}, plates={self.plates}, event_shape={self.event_shape})"


ExprLike = "Expression | float | int | np.ndarray | Value"


def _wrap(x) -> Expression:
    if isinstance(x, Expression):
        return x
    if isinstance(x, Value):
        return const(x.data, x.plates)
    return const(x)


# ---------------------------------------------------------------- constructors


def const(data, plates: Sequence[str] = ()) -> Expression:
    if isinstance(data, Value):
        if plates:
            raise ShapeError("plates are taken from the Value")
        val = data
    else:
        val = Value(np.array(data, dtype=np.float64), tuple(plates))
    return Expression("const", (), {"value": val}, val.plates, val.plate_sizes, val.event_shape)


def var(name: str, value=0.0) -> Expression:
    """A differentiable leaf.  Variables are identified by ``name``."""
    if not isinstance(name, str) or not name:
        raise ADError("variable name must be a non-empty string")
    arr = np.array(value, dtype=np.float64)
    return Expression("var", (), {"name": name, "value": arr}, (), {}, arr.shape)


def _binary(op, a, b, attrs=None):
    a, b = _wrap(a), _wrap(b)
    plates, sizes = _merge_plates((a, b))
    try:
        event = np.broadcast_shapes(a.event_shape, b.event_shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: event shapes {a.event_shape} and {b.event_shape} do not broadcast") from exc
    return Expression(op, (a, b), attrs or {}, plates, sizes, event)


def _fold(op, *xs):
    vals = [x.const_value() for x in xs]
    plates, sizes = _merge_plates(xs)
    ndim = max(v.data.ndim - len(v.plates) for v in vals)
    arrs = [_align(v.data, v.plates, plates, ndim, sizes) for v in vals]
    with np.errstate(all="ignore"):
        out = _APPLY[op](*arrs)
    if not np.all(np.isfinite(out)):
        return None
    return const(out, plates)


def _is_scalar_const(e, value):
    return e.op == "const" and not e.plates and e.const_value().data.size == 1 and float(e.const_value().data.reshape(())) == value


def add(a, b) -> Expression:
    a, b = _wrap(a), _wrap(b)
    if a.is_const() and b.is_const():
        folded = _fold("add", a, b)
        if folded is not None:
            return folded
    out = _binary("add", a, b)
    if _is_scalar_const(a, 0.0) and b.shape == out.shape and b.plates == out.plates:
        return b
    if _is_scalar_const(b, 0.0) and a.shape == out.shape and a.plates == out.plates:
        return a
    return out


def mul(a, b) -> Expression:
    a, b = _wrap(a), _wrap(b)
    if a.is_const() and b.is_const():
        folded = _fold("mul", a, b)
        if folded is not None:
            return folded
    out = _binary("mul", a, b)
    if _is_scalar_const(a, 1.0) and b.shape == out.shape and b.plates == out.plates:
        return b
    if _is_scalar_const(b, 1.0) and a.shape == out.shape and a.plates == out.plates:
        return a
    return out


def pow(a, b) -> Expression:  # noqa: A001 - mirrors the op name
    a, b = _wrap(a), _wrap(b)
    if a.is_const() and b.is_const():
        folded = _fold("pow", a, b)
        if folded is not None:
            return folded
    if _is_scalar_const(b, 1.0):
        return a
    return _binary("pow", a, b)


def _unary(op, a, attrs=None):
    a = _wrap(a)
    return Expression(op, (a,), attrs or {}, a.plates, a.plate_sizes, a.event_shape)


def exp(a) -> Expression:
    return _unary("exp", a)


def log(a) -> Expression:
    return _unary("log", a)


def stop_grad(a) -> Expression:
    a = _wrap(a)
    if a.is_const():
        return a
    return _unary("stop_grad", a)


def sum(a, plates: Iterable[str] = (), axes: Iterable[int] = (), keepdims: bool = False) -> Expression:  # noqa: A001
    """Reduce over named plates and/or event axes (negative axes allowed)."""
    a = _wrap(a)
    plates = tuple(plates)
    for p in plates:
        if p not in a.plates:
            raise ShapeError(f"cannot sum over plate {p!r}: expression carries {a.plates}")
    nd = len(a.event_shape)
    norm = []
    for ax in axes:
        if not -nd <= ax < nd:
            raise ShapeError(f"axis {ax} out of range for event shape {a.event_shape}")
        norm.append(ax % nd)
    norm = tuple(sorted(set(norm)))
    if not plates and not norm:
        return a
    keep = tuple(p for p in a.plates if p not in plates)
    sizes = {p: a.plate_sizes[p] for p in keep}
    if keepdims:
        event = tuple(1 if i in norm else s for i, s in enumerate(a.event_shape))
    else:
        event = tuple(s for i, s in enumerate(a.event_shape) if i not in norm)
    return Expression("sum", (a,), {"plates": plates, "axes": norm, "keepdims": bool(keepdims)}, keep, sizes, event)


def broadcast(a, plates: Mapping[str, int] | None = None, shape: Sequence[int] | None = None) -> Expression:
    """Add new plates (name -> size) and/or broadcast the event shape."""
    a = _wrap(a)
    plates = dict(plates or {})
    for p, n in plates.items():
        if p in a.plates:
            raise ShapeError(f"expression already carries plate {p!r}")
        if int(n) < 1:
            raise ShapeError(f"plate {p!r} must have positive size")
    event = a.event_shape if shape is None else tuple(int(s) for s in shape)
    try:
        if np.broadcast_shapes(a.event_shape, event) != event:
            raise ShapeError(f"cannot broadcast event shape {a.event_shape} to {event}")
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast event shape {a.event_shape} to {event}") from exc
    if not plates and event == a.event_shape:
        return a
    new_plates = a.plates + tuple(plates)
    sizes = dict(a.plate_sizes)
    sizes.update({p: int(n) for p, n in plates.items()})
    return Expression("broadcast", (a,), {"plates": dict(plates), "shape": event}, new_plates, sizes, event)


def build(op_kind: str, parents: Sequence = (), attributes: Mapping | None = None) -> Expression:
    """Generic constructor dispatching on the op name."""
    attributes = dict(attributes or {})
    if op_kind == "const":
        return const(attributes["value"], attributes.get("plates", ()))
    if op_kind == "var":
        return var(attributes["name"], attributes.get("value", 0.0))
    table = {"add": add, "mul": mul, "pow": pow}
    if op_kind in table:
        if len(parents) != 2:
            raise ADError(f"{op_kind} takes two parents")
        return table[op_kind](*parents)
    unary = {"exp": exp, "log": log, "stop_grad": stop_grad}
    if op_kind in unary:
        if len(parents) != 1:
            raise ADError(f"{op_kind} takes exactly one parent")
        return unary[op_kind](parents[0])
    if op_kind == "sum":
        return sum(parents[0], attributes.get("plates", ()), attributes.get("axes", ()), attributes.get("keepdims", False))
    if op_kind == "broadcast":
        return broadcast(parents[0], attributes.get("plates"), attributes.get("shape"))
    if op_kind == "magic_box":
        return magic_box(parents[0])
    raise ADError(f"unknown op kind {op_kind!r}")


# ---------------------------------------------------------------- composites


def magic_box(e) -> Expression:
    """exp(e - stop_grad(e)): evaluates to one, derivative multiplies by grad e."""
    e = _wrap(e)
    return exp(sub(e, stop_grad(e)))


def neg(a) -> Expression:
    return mul(a, -1.0)


def sub(a, b) -> Expression:
    return add(a, neg(_wrap(b)))


def div(a, b) -> Expression:
    return mul(a, pow(b, -1.0))


def sigmoid(a) -> Expression:
    return pow(add(exp(neg(a)), 1.0), -1.0)


def softmax(a) -> Expression:
    """Normalised exponential along the last event axis."""
    e = exp(a)
    return div(e, sum(e, axes=(-1,), keepdims=True))


def softplus(a) -> Expression:
    return log(add(exp(a), 1.0))


def select(a, plate: str, index: int) -> Expression:
    """Pick element ``index`` of ``plate`` (implemented as a one-hot contraction)."""
    a = _wrap(a)
    n = a.plate_sizes[plate]
    onehot = np.zeros(n)
    onehot[index] = 1.0
    return sum(mul(a, const(onehot.reshape((n,) + (1,) * len(a.event_shape)), (plate,))), plates=(plate,))


def rename_plate(a, old: str, new: str) -> Expression:
    """Move the axis of plate ``old`` onto a fresh plate ``new`` (identity contraction)."""
    a = _wrap(a)
    if old not in a.plates:
        raise ShapeError(f"expression does not carry plate {old!r}")
    if new in a.plates:
        raise ShapeError(f"expression already carries plate {new!r}")
    n = a.plate_sizes[old]
    eye = const(np.eye(n).reshape((n, n) + (1,) * len(a.event_shape)), (old, new))
    return sum(mul(a, eye), plates=(old,))


def expand_last(a) -> Expression:
    """Append a trailing event axis of size one."""
    a = _wrap(a)
    if not a.event_shape:
        return broadcast(a, shape=(1,))
    n = a.event_shape[-1]
    return sum(mul(a, np.eye(n)), axes=(-1,), keepdims=True)


# ---------------------------------------------------------------- evaluation


def _safe_log(x):
    if np.any(x <= 0):
        raise EvaluationError("log of a non-positive value")
    return np.log(x)


_APPLY = {
    "add": np.add,
    "mul": np.multiply,
    "pow": np.power,
}


def _topo(root: Expression) -> list[Expression]:
    order: list[Expression] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.uid in seen:
            continue
        seen.add(node.uid)
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.uid not in seen:
                stack.append((p, False))
    return order


def evaluate(expr, bindings: Mapping[str, object] | None = None) -> Value:
    """Forward pass.  ``bindings`` override variable defaults by name."""
    expr = _wrap(expr)
    bindings = bindings or {}
    cache: dict[int, np.ndarray] = {}
    for node in _topo(expr):
        op = node.op
        if op == "const":
            out = node.attrs["value"].data
        elif op == "var":
            name = node.attrs["name"]
            if name in bindings:
                out = np.asarray(bindings[name], dtype=np.float64)
                if out.shape != node.event_shape:
                    raise ShapeError(f"binding for {name!r} has shape {out.shape}, expected {node.event_shape}")
            else:
                out = node.attrs.get("value")
                if out is None:
                    raise UnboundVariableError(name)
        elif op in ("add", "mul", "pow"):
            a, b = node.parents
            nd = len(node.event_shape)
            xa = _align(cache[a.uid], a.plates, node.plates, nd, node.plate_sizes)
            xb = _align(cache[b.uid], b.plates, node.plates, nd, node.plate_sizes)
            with np.errstate(all="ignore"):
                out = _APPLY[op](xa, xb)
        elif op == "exp":
            with np.errstate(over="ignore"):
                out = np.exp(cache[node.parents[0].uid])
        elif op == "log":
            out = _safe_log(cache[node.parents[0].uid])
        elif op == "stop_grad":
            out = cache[node.parents[0].uid]
        elif op == "sum":
            (a,) = node.parents
            x = cache[a.uid]
            plate_axes = tuple(a.plates.index(p) for p in node.attrs["plates"])
            event_axes = tuple(len(a.plates) + ax for ax in node.attrs["axes"])
            out = np.sum(x, axis=plate_axes + event_axes)
            if node.attrs["keepdims"] and event_axes:
                out = out.reshape(node.shape)
        elif op == "broadcast":
            (a,) = node.parents
            x = _align(cache[a.uid], a.plates, node.plates, len(node.event_shape), node.plate_sizes)
            out = np.broadcast_to(x, node.shape)
        else:  # pragma: no cover - constructors guard op kinds
            raise ADError(f"unknown op {op!r}")
        if not np.all(np.isfinite(out)):
            raise EvaluationError(f"non-finite value produced by {op}")
        cache[node.uid] = out
    data = np.array(cache[expr.uid], dtype=np.float64)
    return Value(np.broadcast_to(data, expr.shape).copy(), expr.plates)


# ---------------------------------------------------------------- differentiation


def grad_plate(name: str, k: int) -> str:
    return f"d{name}#{k}"


def _tangent_sum(t, node):
    """Sum a tangent the same way ``node`` sums its parent."""
    (a,) = node.parents
    plates = tuple(p for p in node.attrs["plates"] if p in t.plates)
    missing = [p for p in node.attrs["plates"] if p not in t.plates]
    if t.event_shape != a.event_shape:
        t = broadcast(t, shape=a.event_shape)
    out = sum(t, plates=plates, axes=node.attrs["axes"], keepdims=node.attrs["keepdims"])
    scale = math.prod(a.plate_sizes[p] for p in missing)
    return mul(out, float(scale)) if scale != 1 else out


def _tangent_pass(expr: Expression, target: str, seed: Expression) -> Expression | None:
    tan: dict[int, Expression | None] = {}
    for node in _topo(expr):
        op = node.op
        if op == "const":
            t = None
        elif op == "var":
            t = seed if node.attrs["name"] == target else None
        elif op == "add":
            da, db = (tan[p.uid] for p in node.parents)
            if da is None:
                t = db
            elif db is None:
                t = da
            else:
                t = add(da, db)
            if t is not None and t.event_shape != node.event_shape:
                t = broadcast(t, shape=node.event_shape)
        elif op == "mul":
            a, b = node.parents
            da, db = tan[a.uid], tan[b.uid]
            terms = []
            if da is not None:
                terms.append(mul(da, b))
            if db is not None:
                terms.append(mul(a, db))
            t = None if not terms else terms[0] if len(terms) == 1 else add(*terms)
        elif op == "pow":
            a, b = node.parents
            da, db = tan[a.uid], tan[b.uid]
            terms = []
            if da is not None:
                terms.append(mul(mul(b, pow(a, sub(b, 1.0))), da))
            if db is not None:
                terms.append(mul(mul(node, log(a)), db))
            t = None if not terms else terms[0] if len(terms) == 1 else add(*terms)
        elif op == "exp":
            da = tan[node.parents[0].uid]
            t = None if da is None else mul(node, da)
        elif op == "log":
            da = tan[node.parents[0].uid]
            t = None if da is None else mul(da, pow(node.parents[0], -1.0))
        elif op == "stop_grad":
            t = None
        elif op == "sum":
            da = tan[node.parents[0].uid]
            t = None if da is None else _tangent_sum(da, node)
        elif op == "broadcast":
            da = tan[node.parents[0].uid]
            if da is None:
                t = None
            else:
                new = {p: n for p, n in node.attrs["plates"].items() if p not in da.plates}
                t = broadcast(da, new, node.event_shape)
        else:  # pragma: no cover
            raise ADError(f"unknown op {op!r}")
        tan[node.uid] = t
    return tan[expr.uid]


def _find_var(expr: Expression, target: str) -> Expression | None:
    for node in _topo(expr):
        if node.op == "var" and node.attrs["name"] == target:
            return node
    return None


def _target_name(target) -> str:
    if isinstance(target, Expression):
        if target.op != "var":
            raise ADError("differentiation target must be a variable")
        return target.attrs["name"]
    if isinstance(target, str):
        return target
    raise ADError(f"invalid differentiation target {target!r}")


def _zero_like(expr: Expression) -> Expression:
    return const(np.zeros(expr.shape), expr.plates)


def differentiate(expr, target, order: int = 1) -> Expression:
    """Symbolic n-th derivative of ``expr`` with respect to a variable.

    Scalar targets keep the shape of ``expr``.  Array targets add one plate
    per derivative order (see :func:`grad_plate`) whose axis enumerates the
    flattened entries of the target.
    """
    if not isinstance(order, (int, np.integer)) or isinstance(order, bool):
        raise ADError("order must be an integer")
    if order < 0:
        raise ADError("order must be non-negative")
    expr = _wrap(expr)
    name = _target_name(target)
    if isinstance(target, Expression):
        shape = target.event_shape
    else:
        node = _find_var(expr, name)
        shape = node.event_shape if node is not None else ()
    out = expr
    size = int(np.prod(shape))
    for _ in range(order):
        if shape == ():
            seed = const(1.0)
        else:
            k = 1
            while grad_plate(name, k) in out.plates:
                k += 1
            gp = grad_plate(name, k)
            seed = const(np.eye(size).reshape((size,) + shape), (gp,))
        t = _tangent_pass(out, name, seed)
        if t is None:
            if shape == ():
                out = _zero_like(out)
            else:
                out = const(np.zeros((size,) + out.shape), (gp,) + out.plates)
            continue
        if t.event_shape != out.event_shape:
            t = broadcast(t, shape=out.event_shape)
        if shape != () and gp not in t.plates:
            t = broadcast(t, {gp: size})
        out = t
    return out


def jacobian(expr, target, bindings=None) -> np.ndarray:
    """Evaluate the first derivative of ``expr`` w.r.t. ``target`` as an array.

    The result has the target's shape followed by ``expr``'s full shape;
    for a scalar-valued expression it simply has the target's shape.
    """
    name = _target_name(target)
    d = differentiate(expr, target, 1)
    val = evaluate(d, bindings)
    plate = grad_plate(name, 1)
    if plate not in val.plates:
        return val.data
    rest = tuple(p for p in val.plates if p != plate)
    data = val.aligned((plate,) + rest)
    shape = target.event_shape if isinstance(target, Expression) else (data.shape[0],)
    return data.reshape(shape + data.shape[1:])


# ---------------------------------------------------------------- inspection


def contains_op(expr, op: str) -> bool:
    return any(n.op == op for n in _topo(_wrap(expr)))


def _fmt_const(v: Value) -> str:
    d = v.data
    if d.size == 1 and not v.plates:
        return repr(float(d.reshape(())))
    tag = f" plates={list(v.plates)}" if v.plates else ""
    return f"[array shape={list(d.shape)}{tag}]"


def to_sexpr(expr) -> str:
    """Render the DAG as an S-expression; shared nodes use ``#n=`` / ``#n#`` labels."""
    expr = _wrap(expr)
    counts: dict[int, int] = {}
    for node in _topo(expr):
        for p in node.parents:
            counts[p.uid] = counts.get(p.uid, 0) + 1
    labels: dict[int, int] = {}
    out: list[str] = []

    def emit(node: Expression):
        shared = counts.get(node.uid, 0) > 1 and node.op not in ("const", "var")
        if shared and node.uid in labels:
            out.append(f"#{labels[node.uid]}#")
            return
        if shared:
            labels[node.uid] = len(labels) + 1
            out.append(f"#{labels[node.uid]}=")
        if node.op == "const":
            out.append(_fmt_const(node.attrs["value"]))
            return
        if node.op == "var":
            out.append(f"(var {node.attrs['name']})")
            return
        out.append("(" + node.op)
        if node.op == "sum":
            if node.attrs["plates"]:
                out.append(" :plates " + ",".join(node.attrs["plates"]))
            if node.attrs["axes"]:
                out.append(" :axes " + ",".join(map(str, node.attrs["axes"])))
        elif node.op == "broadcast":
            if node.attrs["plates"]:
                out.append(" :plates " + ",".join(f"{k}={v}" for k, v in node.attrs["plates"].items()))
            out.append(" :shape " + "x".join(map(str, node.event_shape)) if node.event_shape else "")
        for p in node.parents:
            out.append(" ")
            emit(p)
        out.append(")")

    import sys

    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, 10000))
    try:
        emit(expr)
    finally:
        sys.setrecursionlimit(limit)
    return "".join(out)
