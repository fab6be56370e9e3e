"""Distributions with differentiable log-densities and plate-aware sampling.

Sampled values are carried as :class:`~sgrad.adcore.Value` objects whose
leading axes are named plates.  Categorical and Bernoulli values are stored
as float arrays of integers.  A :class:`ProductOfIndependents` value is a
tuple with one entry per component.

Sampling is always numeric: parameters are evaluated, never differentiated,
so a proposal never changes under the forward-mode operator.
"""
from __future__ import annotations

import itertools
import math
import zlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import adcore as ad
from .adcore import Expression, Value

DEFAULT_SUPPORT_CAP = 10**6
NORMALISATION_TOL = 1e-12
BRUTE_FORCE_MAX = 6


class DistributionError(ValueError):
    pass


class SupportCapExceeded(DistributionError):
    pass


# ---------------------------------------------------------------- rng


class RngStreams:
    """Named, independent Philox streams derived from one integer seed."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)

    @staticmethod
    def _key(k) -> int:
        if isinstance(k, (int, np.integer)) and k >= 0:
            return int(k)
        return zlib.crc32(str(k).encode("utf8"))

    def stream(self, *keys) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(self._key(k) for k in keys))
        return np.random.Generator(np.random.Philox(ss))


def make_rng(seed_or_rng=None) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return RngStreams(0 if seed_or_rng is None else seed_or_rng).stream("default")


# ---------------------------------------------------------------- helpers


def _out_layout(param_plates, param_sizes, outer):
    plates = list(param_plates)
    sizes = dict(param_sizes)
    for p, n in (outer or {}).items():
        if p in sizes:
            if sizes[p] != n:
                raise DistributionError(f"outer plate {p!r} size {n} conflicts with {sizes[p]}")
        else:
            plates.append(p)
            sizes[p] = int(n)
    return tuple(plates), sizes


def _expand(value: Value, plates, sizes, event_ndim):
    """Broadcast a parameter value to the full plate layout."""
    data = ad._align(value.data, value.plates, tuple(plates), event_ndim, sizes)
    shape = tuple(sizes[p] for p in plates) + tuple(data.shape[len(plates):])
    return np.broadcast_to(data, shape)


def _as_value(value, plates=()) -> Value:
    if isinstance(value, Value):
        return value
    return Value(np.asarray(value, dtype=np.float64), tuple(plates))


def _stack_plate(values: Sequence[np.ndarray], plate: str) -> Value:
    return Value(np.stack([np.asarray(v, dtype=np.float64) for v in values]), (plate,))


# ---------------------------------------------------------------- base class


class Distribution:
    """Common interface.  Subclasses set ``finite`` and implement the hooks."""

    finite = False

    # parameters ---------------------------------------------------------
    def parameters(self) -> list[Expression]:
        raise NotImplementedError

    @property
    def plates(self) -> tuple[str, ...]:
        return ad._merge_plates(self.parameters())[0]

    @property
    def plate_sizes(self) -> dict[str, int]:
        return ad._merge_plates(self.parameters())[1]

    @property
    def event_shape(self) -> tuple[int, ...]:
        raise NotImplementedError

    # density ------------------------------------------------------------
    def log_prob(self, value) -> Expression:
        raise NotImplementedError

    # sampling -----------------------------------------------------------
    def sample(self, rng, n: int, plate: str, outer=None):
        """``n`` i.i.d. draws per element of the parameter plates (and ``outer``)."""
        raise NotImplementedError

    # finite support -----------------------------------------------------
    @property
    def support_size(self) -> int:
        raise DistributionError(f"{type(self).__name__} has no finite support")

    def support_values(self, plate: str):
        """The full support stacked along a single plate."""
        raise DistributionError(f"{type(self).__name__} has no finite support")

    def gather(self, index: Value):
        """Map support indices (a plated Value) to native values."""
        raise DistributionError(f"{type(self).__name__} has no finite support")

    def support_list(self) -> list:
        raise DistributionError(f"{type(self).__name__} has no finite support")

    def probs_table(self) -> Value:
        """Numeric probability of every support point; last axis indexes the support."""
        plate = "_support"
        vals = self.support_values(plate)
        lp = ad.evaluate(ad.exp(self.log_prob(vals)))
        keep = tuple(p for p in lp.plates if p != plate)
        return Value(lp.aligned(keep + (plate,)), keep)


def _check_scalar_like(x):
    if isinstance(x, Expression):
        return x
    return ad.const(x)


# ---------------------------------------------------------------- Bernoulli


class Bernoulli(Distribution):
    """Independent Bernoulli variables; the event shape is that of ``probs``."""

    finite = True

    def __init__(self, probs=None, logits=None):
        if (probs is None) == (logits is None):
            raise DistributionError("give exactly one of probs or logits")
        self.logits = None if logits is None else _check_scalar_like(logits)
        self.probs = ad.sigmoid(self.logits) if probs is None else _check_scalar_like(probs)
        if probs is not None:
            p = ad.evaluate(self.probs).data
            if np.any(p < 0) or np.any(p > 1):
                raise DistributionError("Bernoulli probabilities must lie in [0, 1]")

    def parameters(self):
        return [self.probs]

    @property
    def param(self) -> Expression:
        return self.probs

    def replace_param(self, expr) -> "Bernoulli":
        return Bernoulli(probs=expr)

    @property
    def event_shape(self):
        return self.probs.event_shape

    def log_prob(self, value) -> Expression:
        x = ad._wrap(_as_value(value))
        if np.any((x.const_value().data != 0) & (x.const_value().data != 1)):
            raise DistributionError("Bernoulli value outside {0, 1}")
        mass = x * self.probs + (1.0 - x) * (1.0 - self.probs)
        lp = ad.log(mass)
        nd = len(lp.event_shape)
        return ad.sum(lp, axes=range(nd)) if nd else lp

    def sample(self, rng, n, plate, outer=None):
        rng = make_rng(rng)
        p = ad.evaluate(self.probs)
        plates, sizes = _out_layout(p.plates, p.plate_sizes, outer)
        ev = self.event_shape
        pd = _expand(p, plates, sizes, len(ev))
        shape = pd.shape[: len(plates)] + (n,) + ev
        pd = pd.reshape(pd.shape[: len(plates)] + (1,) + ev)
        u = rng.random(shape)
        return Value((u < pd).astype(np.float64), plates + (plate,))

    @property
    def support_size(self):
        return 2 ** int(np.prod(self.event_shape, dtype=int))

    def _support_array(self):
        d = int(np.prod(self.event_shape, dtype=int))
        if 2**d > DEFAULT_SUPPORT_CAP:
            raise SupportCapExceeded(f"support of size 2^{d} exceeds cap")
        rows = np.array(list(itertools.product((0.0, 1.0), repeat=d)), dtype=np.float64)
        return rows.reshape((2**d,) + self.event_shape)

    def support_values(self, plate):
        return Value(self._support_array(), (plate,))

    def gather(self, index: Value):
        arr = self._support_array()
        return Value(arr[index.data.astype(int)], index.plates)

    def probs_table(self) -> Value:
        # direct mass product, so point masses (p = 0 or 1) need no log
        plate = "_support"
        x = ad.const(self._support_array(), (plate,))
        mass = x * self.probs + (1.0 - x) * (1.0 - self.probs)
        v = ad.evaluate(mass)
        keep = tuple(p for p in v.plates if p != plate)
        data = v.aligned(keep + (plate,))
        nd = len(self.event_shape)
        data = np.prod(data.reshape(data.shape[: data.ndim - nd] + (-1,)), axis=-1) if nd else data
        return Value(data, keep)

    def support_list(self):
        arr = self._support_array()
        if self.event_shape == ():
            return [int(v) for v in arr]
        return [tuple(int(t) for t in row.reshape(-1)) for row in arr]


# ---------------------------------------------------------------- Categorical


class Categorical(Distribution):
    """Categorical over ``{0..K-1}``; extra leading event axes are independent."""

    finite = True

    def __init__(self, probs):
        self.probs = _check_scalar_like(probs)
        if len(self.probs.event_shape) < 1:
            raise DistributionError("Categorical needs a probability vector")
        p = ad.evaluate(self.probs).data
        if np.any(p < 0) or np.any(p > 1):
            raise DistributionError("Categorical probabilities must lie in [0, 1]")
        if np.any(np.abs(p.sum(axis=-1) - 1.0) > NORMALISATION_TOL):
            raise DistributionError("Categorical probabilities must sum to one")

    def parameters(self):
        return [self.probs]

    @property
    def param(self):
        return self.probs

    def replace_param(self, expr):
        return Categorical(expr)

    @property
    def num_classes(self) -> int:
        return self.probs.event_shape[-1]

    @property
    def event_shape(self):
        return self.probs.event_shape[:-1]

    def _onehot(self, v: Value) -> Expression:
        idx = v.data.astype(int)
        if np.any(idx != v.data) or np.any(idx < 0) or np.any(idx >= self.num_classes):
            raise DistributionError("Categorical value outside support")
        return ad.const(np.eye(self.num_classes)[idx], v.plates)

    def log_prob(self, value) -> Expression:
        v = _as_value(value)
        sel = ad.sum(self._onehot(v) * self.probs, axes=(-1,))
        lp = ad.log(sel)
        nd = len(lp.event_shape)
        return ad.sum(lp, axes=range(nd)) if nd else lp

    def sample(self, rng, n, plate, outer=None):
        rng = make_rng(rng)
        p = ad.evaluate(self.probs)
        plates, sizes = _out_layout(p.plates, p.plate_sizes, outer)
        ev = self.probs.event_shape
        pd = _expand(p, plates, sizes, len(ev))
        lead = pd.shape[: len(plates)]
        cdf = np.cumsum(pd, axis=-1)
        cdf = cdf.reshape(lead + (1,) + ev)
        u = rng.random(lead + (n,) + ev[:-1] + (1,))
        idx = np.minimum((u >= cdf).sum(axis=-1), self.num_classes - 1)
        return Value(idx.astype(np.float64), plates + (plate,))

    @property
    def support_size(self):
        return self.num_classes ** int(np.prod(self.event_shape, dtype=int))

    def _support_array(self):
        d = int(np.prod(self.event_shape, dtype=int))
        if self.support_size > DEFAULT_SUPPORT_CAP:
            raise SupportCapExceeded("categorical support exceeds cap")
        rows = np.array(list(itertools.product(range(self.num_classes), repeat=d)), dtype=np.float64)
        return rows.reshape((self.support_size,) + self.event_shape)

    def support_values(self, plate):
        return Value(self._support_array(), (plate,))

    def gather(self, index: Value):
        return Value(self._support_array()[index.data.astype(int)], index.plates)

    def support_list(self):
        arr = self._support_array()
        if self.event_shape == ():
            return [int(v) for v in arr]
        return [tuple(int(t) for t in row.reshape(-1)) for row in arr]


# ---------------------------------------------------------------- Logistic


class Logistic(Distribution):
    finite = False

    def __init__(self, loc, scale=1.0):
        self.loc = _check_scalar_like(loc)
        self.scale = _check_scalar_like(scale)
        if np.any(ad.evaluate(self.scale).data <= 0):
            raise DistributionError("Logistic scale must be positive")

    def parameters(self):
        return [self.loc, self.scale]

    @property
    def param(self):
        return self.loc

    def replace_param(self, expr):
        return Logistic(expr, self.scale)

    @property
    def event_shape(self):
        return np.broadcast_shapes(self.loc.event_shape, self.scale.event_shape)

    def log_prob(self, value) -> Expression:
        x = ad._wrap(value if isinstance(value, Expression) else _as_value(value))
        zs = (x - self.loc) / self.scale
        lp = ad.neg(zs) - ad.log(self.scale) - 2.0 * ad.softplus(ad.neg(zs))
        nd = len(lp.event_shape)
        return ad.sum(lp, axes=range(nd)) if nd else lp

    def sample(self, rng, n, plate, outer=None):
        rng = make_rng(rng)
        loc, scale = ad.evaluate(self.loc), ad.evaluate(self.scale)
        plates, sizes = _out_layout(*ad._merge_plates([self.loc, self.scale]), outer)
        ev = self.event_shape
        ld = _expand(loc, plates, sizes, len(ev))
        sd = _expand(scale, plates, sizes, len(ev))
        lead = tuple(sizes[p] for p in plates)
        u = rng.random(lead + (n,) + ev)
        eps = np.log(u) - np.log1p(-u)
        k = len(plates)
        ld = ld.reshape(ld.shape[:k] + (1,) + ld.shape[k:])
        sd = sd.reshape(sd.shape[:k] + (1,) + sd.shape[k:])
        return Value(ld + sd * eps, plates + (plate,))


# ---------------------------------------------------------------- product


class ProductOfIndependents(Distribution):
    """Joint distribution of independent components; values are tuples."""

    def __init__(self, components: Sequence[Distribution]):
        if not components:
            raise DistributionError("product needs at least one component")
        self.components = tuple(components)
        self.finite = all(c.finite for c in self.components)

    def parameters(self):
        out = []
        for c in self.components:
            out.extend(c.parameters())
        return out

    @property
    def event_shape(self):
        return tuple(c.event_shape for c in self.components)

    def log_prob(self, value) -> Expression:
        if len(value) != len(self.components):
            raise DistributionError("product value has the wrong arity")
        terms = [c.log_prob(v) for c, v in zip(self.components, value)]
        out = terms[0]
        for t in terms[1:]:
            out = out + t
        return out

    def sample(self, rng, n, plate, outer=None):
        rng = make_rng(rng)
        return tuple(c.sample(rng, n, plate, outer) for c in self.components)

    @property
    def support_size(self):
        return math.prod(c.support_size for c in self.components)

    def _index_grid(self):
        if self.support_size > DEFAULT_SUPPORT_CAP:
            raise SupportCapExceeded(f"product support of size {self.support_size} exceeds cap")
        sizes = [c.support_size for c in self.components]
        return np.array(list(itertools.product(*[range(s) for s in sizes])), dtype=np.float64).reshape(-1, len(sizes))

    def support_values(self, plate):
        grid = self._index_grid()
        return tuple(c.gather(Value(grid[:, j], (plate,))) for j, c in enumerate(self.components))

    def gather(self, index: Value):
        grid = self._index_grid()
        idx = index.data.astype(int)
        return tuple(c.gather(Value(grid[idx, j], index.plates)) for j, c in enumerate(self.components))

    def support_list(self):
        lists = [c.support_list() for c in self.components]
        if self.support_size > DEFAULT_SUPPORT_CAP:
            raise SupportCapExceeded(f"product support of size {self.support_size} exceeds cap")
        return list(itertools.product(*lists))


# ---------------------------------------------------------------- module-level API


def log_prob(dist: Distribution, value) -> Expression:
    return dist.log_prob(value)


def _to_python(value, i):
    if isinstance(value, tuple):
        return tuple(_to_python(v, i) for v in value)
    row = np.take(value.data, i, axis=len(value.plates) - 1)
    if row.ndim == 0:
        f = float(row)
        return int(f) if f.is_integer() else f
    return tuple(int(t) if float(t).is_integer() else float(t) for t in row.reshape(-1))


def sample_iid(dist: Distribution, rng, m: int) -> list:
    if m < 1:
        raise DistributionError("m must be at least 1")
    if dist.plates:
        raise DistributionError("sample_iid expects an unplated distribution; use dist.sample")
    v = dist.sample(make_rng(rng), m, "_draw")
    return [_to_python(v, i) for i in range(m)]


def sample_without_replacement_indices(table: Value, rng, m: int, plate: str, outer=None) -> Value:
    """Sequential renormalised draws of support indices from ``table`` (last axis)."""
    rng = make_rng(rng)
    S = table.data.shape[-1]
    if m > S:
        raise DistributionError(f"cannot draw {m} distinct values from a support of size {S}")
    plates, sizes = _out_layout(table.plates, table.plate_sizes, outer)
    p = _expand(table, plates, sizes, 1).copy()
    lead = p.shape[:-1]
    out = np.zeros(lead + (m,))
    flat_p = p.reshape(-1, S)
    flat_out = out.reshape(-1, m)
    u = rng.random((flat_p.shape[0], m))
    for j in range(m):
        total = flat_p.sum(axis=1, keepdims=True)
        cdf = np.cumsum(flat_p, axis=1) / total
        idx = (u[:, j : j + 1] >= cdf).sum(axis=1)
        idx = np.minimum(idx, S - 1)
        # never pick an exhausted (zero-mass) entry because of round-off
        bad = flat_p[np.arange(len(idx)), idx] <= 0
        if np.any(bad):
            for r in np.nonzero(bad)[0]:
                idx[r] = int(np.nonzero(flat_p[r] > 0)[0][-1])
        flat_out[:, j] = idx
        flat_p[np.arange(len(idx)), idx] = 0.0
    return Value(out, plates + (plate,))


def sample_without_replacement(dist: Distribution, rng, m: int) -> list:
    if not dist.finite:
        raise DistributionError("sampling without replacement needs a finite support")
    if m > dist.support_size:
        raise DistributionError(f"cannot draw {m} distinct values from a support of size {dist.support_size}")
    idx = sample_without_replacement_indices(dist.probs_table(), rng, m, "_draw")
    v = dist.gather(idx)
    return [_to_python(v, i) for i in range(m)]


def enumerate_support(dist: Distribution, cap: int = DEFAULT_SUPPORT_CAP) -> list:
    if not dist.finite:
        raise DistributionError(f"{type(dist).__name__} is not finite-discrete")
    if dist.support_size > cap:
        raise SupportCapExceeded(f"support of size {dist.support_size} exceeds cap {cap}")
    return dist.support_list()


# ---------------------------------------------------------------- unordered sets


def _ordered_prob(q, order):
    """Probability of drawing the members ``order`` (positions into q) in sequence."""
    out = np.ones(q.shape[:-1])
    used = np.zeros(q.shape[:-1])
    for j in order:
        out = out * q[..., j] / (1.0 - used)
        used = used + q[..., j]
    return out


def set_probabilities_bruteforce(q: np.ndarray):
    """Exact (p(U), p(U|o1=i), p(U|o1=i,o2=j)) by summing over all orderings.

    ``q`` holds the member probabilities on its last axis (any leading batch).
    The conditional tensors put zeros where an ordering is impossible.
    """
    q = np.asarray(q, dtype=np.float64)
    k = q.shape[-1]
    lead = q.shape[:-1]
    pU = np.zeros(lead)
    p1 = np.zeros(lead + (k,))
    p12 = np.zeros(lead + (k, k))
    for perm in itertools.permutations(range(k)):
        full = _ordered_prob(q, perm)
        pU += full
        first = q[..., perm[0]]
        rest1 = full / first
        p1[..., perm[0]] += rest1
        if k >= 2:
            second = q[..., perm[1]] / (1.0 - first)
            p12[..., perm[0], perm[1]] += rest1 / second
    return pU, p1, p12


def set_probabilities_recursive(q: np.ndarray):
    """Same quantities via a dynamic programme over subsets (for larger sets)."""
    q = np.asarray(q, dtype=np.float64)
    k = q.shape[-1]
    lead = q.shape[:-1]
    total = q.sum(axis=-1)
    full = (1 << k) - 1
    g = {0: np.ones(lead)}
    mass = {}
    for mask in range(1, full + 1):
        members = [i for i in range(k) if mask >> i & 1]
        m = np.zeros(lead)
        for i in members:
            m = m + q[..., i]
        mass[mask] = m
    for mask in sorted(range(1, full + 1), key=lambda s: bin(s).count("1")):
        drawn = total - mass[mask]
        acc = np.zeros(lead)
        for i in range(k):
            if mask >> i & 1:
                acc = acc + q[..., i] / (1.0 - drawn) * g[mask & ~(1 << i)]
        g[mask] = acc
    pU = g[full]
    p1 = np.zeros(lead + (k,))
    p12 = np.zeros(lead + (k, k))
    for i in range(k):
        p1[..., i] = g[full & ~(1 << i)]
        for j in range(k):
            if i != j:
                p12[..., i, j] = g[full & ~(1 << i) & ~(1 << j)]
    return pU, p1, p12


def set_probabilities(q: np.ndarray):
    k = np.shape(q)[-1]
    if k <= BRUTE_FORCE_MAX:
        return set_probabilities_bruteforce(q)
    return set_probabilities_recursive(q)


def unordered_set_probabilities(dist: Distribution, sample_set: Sequence):
    """Return ``(p(U), {x: p(U|o1=x)}, {(x, x'): p(U|o1=x, o2=x')})`` for a distinct set."""
    if not dist.finite:
        raise DistributionError("unordered sets need a finite support")
    support = dist.support_list()
    pos = {v: i for i, v in enumerate(support)}
    items = list(sample_set)
    if len(set(items)) != len(items):
        raise DistributionError("sample set contains duplicates")
    for x in items:
        if x not in pos:
            raise DistributionError(f"{x!r} is outside the support")
    table = dist.probs_table()
    if table.plates:
        raise DistributionError("unordered_set_probabilities expects an unplated distribution")
    q = table.data[[pos[x] for x in items]]
    pU, p1, p12 = set_probabilities(q)
    given_first = {x: float(p1[i]) for i, x in enumerate(items)}
    given_two = {(x, y): float(p12[i, j]) for i, x in enumerate(items) for j, y in enumerate(items) if i != j}
    return float(pU), given_first, given_two


# ---------------------------------------------------------------- weak derivatives


@dataclass(frozen=True)
class WeakDerivativeTriple:
    constant: float
    positive_part: Distribution
    negative_part: Distribution


_WEAK: dict[type, Callable] = {}


def register_weak_derivative(kind: type, fn: Callable[[Distribution], WeakDerivativeTriple]) -> None:
    _WEAK[kind] = fn


def _bernoulli_weak(dist: Bernoulli) -> WeakDerivativeTriple:
    if dist.event_shape != ():
        raise DistributionError("weak derivative registered for scalar Bernoulli only")
    return WeakDerivativeTriple(1.0, Bernoulli(probs=1.0), Bernoulli(probs=0.0))


register_weak_derivative(Bernoulli, _bernoulli_weak)


def weak_derivative(dist: Distribution, parameter=None) -> WeakDerivativeTriple:
    fn = _WEAK.get(type(dist))
    if fn is None:
        raise DistributionError(f"no weak derivative registered for {type(dist).__name__}")
    return fn(dist)
