"""Stochastic computation graphs.

A graph holds four node kinds.  Parameters are differentiable leaves
(adcore variables named after the node).  Stochastic nodes own a constructor
mapping parent expressions to a :class:`~sgrad.distributions.Distribution`.
Deterministic nodes own a builder mapping parent expressions to an
expression; cost nodes are deterministic nodes flagged as costs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import adcore as ad
from . import distributions as dists
from .adcore import Expression, Value

PARAMETER = "parameter"
STOCHASTIC = "stochastic"
DETERMINISTIC = "deterministic"
COST = "cost"


class GraphError(ValueError):
    pass


class UnboundNodeError(GraphError):
    pass


@dataclass
class Node:
    name: str
    kind: str
    parents: tuple[str, ...] = ()
    fn: Callable | None = None
    variable: Expression | None = None

    @property
    def is_cost(self) -> bool:
        return self.kind == COST


@dataclass(frozen=True)
class Partitioning:
    cost: str
    partitions: tuple[tuple[str, ...], ...]

    def __len__(self):
        return len(self.partitions)

    def __iter__(self):
        return iter(self.partitions)

    def index_of(self, node: str) -> int:
        for i, part in enumerate(self.partitions):
            if node in part:
                return i
        raise KeyError(node)


class Graph:
    def __init__(self):
        self.nodes: dict[str, Node] = {}
        self._order: list[str] = []
        self._children: dict[str, set[str]] = {}

    # construction -------------------------------------------------------
    def add_node(self, kind: str, parents: Sequence[str] = (), name: str | None = None, fn=None, value=0.0) -> str:
        if name is None or not isinstance(name, str):
            raise GraphError("node name must be a string")
        if name in self.nodes:
            raise GraphError(f"duplicate node name {name!r}")
        parents = tuple(parents)
        if name in parents:
            raise GraphError(f"self-loop on {name!r} would create a cycle")
        for p in parents:
            if p not in self.nodes:
                raise GraphError(f"unknown parent {p!r}")
            if self.nodes[p].is_cost:
                raise GraphError(f"cost node {p!r} cannot have children")
        if kind == PARAMETER:
            if parents:
                raise GraphError("parameters cannot have parents")
            node = Node(name, kind, (), None, ad.var(name, value))
        elif kind in (STOCHASTIC, DETERMINISTIC, COST):
            if fn is None:
                raise GraphError(f"{kind} node {name!r} needs a function")
            node = Node(name, kind, parents, fn)
        else:
            raise GraphError(f"unknown node kind {kind!r}")
        self.nodes[name] = node
        self._order.append(name)
        self._children[name] = set()
        for p in parents:
            self._children[p].add(name)
        return name

    def add_parameter(self, name, value=0.0):
        return self.add_node(PARAMETER, (), name, value=value)

    def add_stochastic(self, name, parents, constructor):
        return self.add_node(STOCHASTIC, parents, name, constructor)

    def add_deterministic(self, name, parents, fn):
        return self.add_node(DETERMINISTIC, parents, name, fn)

    def add_cost(self, name, parents, fn):
        return self.add_node(COST, parents, name, fn)

    # queries ------------------------------------------------------------
    def _check(self, name):
        if name not in self.nodes:
            raise GraphError(f"unknown node {name!r}")

    def parameter(self, name) -> Expression:
        self._check(name)
        node = self.nodes[name]
        if node.kind != PARAMETER:
            raise GraphError(f"{name!r} is not a parameter")
        return node.variable

    @property
    def parameters(self) -> list[str]:
        return [n for n in self._order if self.nodes[n].kind == PARAMETER]

    @property
    def costs(self) -> list[str]:
        return [n for n in self._order if self.nodes[n].is_cost]

    @property
    def stochastic(self) -> list[str]:
        return [n for n in self._order if self.nodes[n].kind == STOCHASTIC]

    def topological_order(self) -> list[str]:
        return list(self._order)

    def ancestors(self, name) -> set[str]:
        self._check(name)
        out: set[str] = set()
        stack = list(self.nodes[name].parents)
        while stack:
            p = stack.pop()
            if p not in out:
                out.add(p)
                stack.extend(self.nodes[p].parents)
        return out

    def influences(self, m: str, n: str) -> bool:
        """True iff a directed path of length at least one leads from m to n."""
        self._check(m)
        self._check(n)
        return m in self.ancestors(n)

    def stochastic_ancestors(self, name) -> list[str]:
        anc = self.ancestors(name)
        return [n for n in self._order if n in anc and self.nodes[n].kind == STOCHASTIC]

    # partitions ---------------------------------------------------------
    def partition_for_cost(self, cost: str, grouping: Sequence[Sequence[str]] | None = None) -> Partitioning:
        self._check(cost)
        if not self.nodes[cost].is_cost:
            raise GraphError(f"{cost!r} is not a cost node")
        anc = self.stochastic_ancestors(cost)
        if grouping is None:
            grouping = [[n] for n in anc]
        parts = []
        seen: set[str] = set()
        for group in grouping:
            group = list(group)
            if not group:
                raise GraphError("empty partition")
            for g in group:
                if g not in self.nodes:
                    raise GraphError(f"unknown node {g!r} in grouping")
                if g in seen:
                    raise GraphError(f"node {g!r} appears in two partitions")
                if g not in anc:
                    raise GraphError(f"{g!r} is not a stochastic ancestor of {cost!r}")
                seen.add(g)
            parts.append(tuple(n for n in self._order if n in group))
        missing = [a for a in anc if a not in seen]
        if missing:
            raise GraphError(f"grouping misses stochastic ancestors {missing}")
        for i, part in enumerate(parts):
            for a in part:
                for b in part:
                    if a != b and self.influences(a, b):
                        raise GraphError(f"{a!r} influences {b!r} inside one partition")
            for later in parts[i + 1:]:
                for a in later:
                    for b in part:
                        if self.influences(a, b):
                            raise GraphError(f"order violation: {a!r} influences {b!r} in an earlier partition")
        return Partitioning(cost, tuple(parts))

    # evaluation ---------------------------------------------------------
    def forward(self, assignment: Mapping[str, object], targets: Sequence[str] | None = None) -> dict[str, Expression]:
        """Expressions for ``targets`` (default: every computable node).

        Stochastic nodes take their values from ``assignment`` (Values,
        arrays or expressions).  Nodes depending on an unassigned stochastic
        node are skipped when ``targets`` is None and raise otherwise.
        """
        need = None
        if targets is not None:
            need = set(targets)
            for t in targets:
                need |= self.ancestors(t)
        env: dict[str, Expression] = {}
        blocked: set[str] = set()
        for name in self._order:
            if need is not None and name not in need:
                continue
            node = self.nodes[name]
            if any(p in blocked for p in node.parents):
                blocked.add(name)
                continue
            if node.kind == PARAMETER:
                env[name] = node.variable
            elif node.kind == STOCHASTIC:
                if name in assignment:
                    env[name] = _to_expr(assignment[name])
                else:
                    blocked.add(name)
            else:
                env[name] = ad._wrap(node.fn(*[env[p] for p in node.parents]))
        if targets is not None:
            for t in targets:
                if t in blocked:
                    raise UnboundNodeError(f"{t!r} depends on an unassigned stochastic node")
        return env

    def distribution(self, name: str, env: Mapping[str, Expression]) -> dists.Distribution:
        node = self.nodes[name]
        if node.kind != STOCHASTIC:
            raise GraphError(f"{name!r} is not stochastic")
        try:
            args = [env[p] for p in node.parents]
        except KeyError as exc:
            raise UnboundNodeError(f"parent {exc.args[0]!r} of {name!r} is not available") from None
        dist = node.fn(*args)
        if not isinstance(dist, dists.Distribution):
            raise GraphError(f"constructor of {name!r} did not return a Distribution")
        return dist

    def joint_log_prob(self, assignment: Mapping[str, object]) -> Expression:
        for s in self.stochastic:
            if s not in assignment:
                raise UnboundNodeError(f"stochastic node {s!r} is unbound")
        env = self.forward(assignment)
        total = None
        for s in self.stochastic:
            lp = self.distribution(s, env).log_prob(_raw(assignment[s]))
            total = lp if total is None else total + lp
        return total if total is not None else ad.const(0.0)


def _to_expr(v) -> Expression:
    if isinstance(v, Expression):
        return v
    if isinstance(v, Value):
        return ad.const(v)
    if isinstance(v, tuple):
        raise GraphError("tuple values belong to product partitions; assign each node separately")
    return ad.const(np.asarray(v, dtype=np.float64))


def _raw(v):
    if isinstance(v, Expression):
        return v.const_value()
    return v


# ---------------------------------------------------------------- JSON graphs
#
# Expression mini-language used by graph documents:
#   number | [numbers...]            constant
#   "name"                           value of a parent node
#   {"op": "add"|"mul"|"sub"|"div"|"pow", "args": [e, e]}
#   {"op": "exp"|"log"|"neg"|"sigmoid"|"softmax", "args": [e]}
#   {"op": "stack", "args": [e, ...]}        vector of scalars
#   {"op": "table", "index": ["node", ...], "rows": nested numbers}
#       lookup by the (sampled) integer values of the index nodes


def _stack(items):
    n = len(items)
    out = None
    for i, e in enumerate(items):
        onehot = np.zeros(n)
        onehot[i] = 1.0
        term = ad._wrap(e) * onehot
        out = term if out is None else out + term
    return out


def _table(env, index, rows):
    rows = np.asarray(rows, dtype=np.float64)
    idx_vals = []
    plates: list[str] = []
    sizes: dict[str, int] = {}
    for name in index:
        e = env[name]
        if not e.is_const():
            raise GraphError(f"table index {name!r} must be a sampled value")
        v = e.const_value()
        idx_vals.append(v)
        for p in v.plates:
            if p not in sizes:
                plates.append(p)
                sizes[p] = v.plate_sizes[p]
    arrays = [ad._align(v.data, v.plates, tuple(plates), 0, sizes).astype(int) for v in idx_vals]
    arrays = np.broadcast_arrays(*arrays) if arrays else []
    picked = rows[tuple(arrays)]
    return ad.const(picked, tuple(plates))


def build_expression(spec, env: Mapping[str, Expression]) -> Expression:
    if isinstance(spec, (int, float)):
        return ad.const(float(spec))
    if isinstance(spec, str):
        if spec not in env:
            raise GraphError(f"unknown reference {spec!r}")
        return env[spec]
    if isinstance(spec, list):
        return ad.const(np.asarray(spec, dtype=np.float64))
    if not isinstance(spec, dict) or "op" not in spec:
        raise GraphError(f"bad expression spec {spec!r}")
    op = spec["op"]
    if op == "table":
        index = spec["index"] if isinstance(spec["index"], list) else [spec["index"]]
        return _table(env, index, spec["rows"])
    args = [build_expression(a, env) for a in spec.get("args", [])]
    binary = {"add": ad.add, "mul": ad.mul, "sub": ad.sub, "div": ad.div, "pow": ad.pow}
    unary = {"exp": ad.exp, "log": ad.log, "neg": ad.neg, "sigmoid": ad.sigmoid, "softmax": ad.softmax}
    if op in binary:
        if len(args) != 2:
            raise GraphError(f"{op} takes two arguments")
        return binary[op](*args)
    if op in unary:
        if len(args) != 1:
            raise GraphError(f"{op} takes one argument")
        return unary[op](args[0])
    if op == "stack":
        return _stack(args)
    raise GraphError(f"unknown op {op!r}")


def _dist_from_spec(spec, env):
    kind = spec.get("type")
    params = {k: build_expression(v, env) for k, v in spec.items() if k != "type"}
    if kind == "bernoulli":
        return dists.Bernoulli(probs=params.get("probs"), logits=params.get("logits"))
    if kind == "categorical":
        return dists.Categorical(params["probs"])
    if kind == "logistic":
        return dists.Logistic(params["loc"], params.get("scale", ad.const(1.0)))
    raise GraphError(f"unknown distribution type {kind!r}")


def graph_from_json(doc) -> Graph:
    """Build a graph from a parsed JSON document (see schemas/graph.schema.json)."""
    if isinstance(doc, str):
        doc = json.loads(doc)
    g = Graph()
    for entry in doc["nodes"]:
        name = entry["name"]
        kind = entry["kind"]
        parents = tuple(entry.get("parents", []))
        if kind == PARAMETER:
            g.add_parameter(name, entry.get("value", 0.0))
        elif kind == STOCHASTIC:
            spec = entry["distribution"]
            g.add_stochastic(name, parents, _make_ctor(parents, spec, _dist_from_spec))
        elif kind in (DETERMINISTIC, COST):
            g.add_node(kind, parents, name, _make_ctor(parents, entry["fn"], build_expression))
        else:
            raise GraphError(f"unknown node kind {kind!r}")
    return g


def _make_ctor(parents, spec, builder):
    def ctor(*values):
        env = dict(zip(parents, values))
        return builder(spec, env)

    return ctor


@dataclass
class GraphSpec:
    """A graph together with its target parameter and per-cost partitions."""

    graph: Graph
    target: str
    groupings: dict[str, list[list[str]]] = field(default_factory=dict)

    def partitioning(self, cost: str) -> Partitioning:
        return self.graph.partition_for_cost(cost, self.groupings.get(cost))
