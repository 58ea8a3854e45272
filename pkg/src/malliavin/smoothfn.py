"""Differentiable expression trees for cylindrical random variables.

A SmoothFunction is a tree over variables v_0..v_{n-1} built from the node
vocabulary {constant, variable, +, *, integer power, exp, sin, cos, logistic,
polynomial, soft_clip}.  Trees evaluate vectorized over numpy arrays, and
directional derivatives up to order two come from truncated-Taylor (jet)
forward evaluation, exact to machine precision.

Each tree carries two conservative flags: ``bounded`` (the function and all
its derivatives are bounded, the class the closable-derivative theory wants)
and ``derivatives_bounded`` (all derivatives of order >= 1 bounded, e.g.
affine maps).  Polynomials of degree >= 2 are admitted but flagged unbounded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

_UNARY = {"exp", "sin", "cos", "logistic"}


class NotPolynomialError(ValueError):
    """Raised when a tree with transcendental nodes is used as a polynomial."""


@dataclass(frozen=True)
class SmoothFunction:
    op: str
    children: tuple["SmoothFunction", ...] = ()
    value_const: float = 0.0
    index: int = 0
    exponent: int = 0
    coeffs: tuple[float, ...] = ()
    level: float = 0.0
    width: float = 1.0

    # -- structure ---------------------------------------------------------

    @cached_property
    def max_var(self) -> int:
        """Largest variable index in the tree, -1 if none."""
        if self.op == "var":
            return self.index
        return max((c.max_var for c in self.children), default=-1)

    @property
    def arity(self) -> int:
        return self.max_var + 1

    def substitute(self, subs: Mapping[int, "SmoothFunction"]) -> "SmoothFunction":
        if self.op == "var":
            return subs.get(self.index, self)
        if not self.children:
            return self
        kids = tuple(c.substitute(subs) for c in self.children)
        return dataclass_replace(self, children=kids)

    def shift_vars(self, offset: int) -> "SmoothFunction":
        if self.op == "var":
            return variable(self.index + offset)
        if not self.children:
            return self
        return dataclass_replace(
            self, children=tuple(c.shift_vars(offset) for c in self.children)
        )

    # -- evaluation --------------------------------------------------------

    def value(self, w: Sequence[np.ndarray]):
        """Evaluate at w (a sequence of arrays, one per variable)."""
        if self.op == "const":
            return self.value_const
        if self.op == "var":
            return np.asarray(w[self.index], dtype=float)
        if self.op == "add":
            return sum(c.value(w) for c in self.children)
        if self.op == "mul":
            out = self.children[0].value(w)
            for c in self.children[1:]:
                out = out * c.value(w)
            return out
        if self.op == "pow":
            return self.children[0].value(w) ** self.exponent
        u = self.children[0].value(w)
        if self.op == "exp":
            return np.exp(u)
        if self.op == "sin":
            return np.sin(u)
        if self.op == "cos":
            return np.cos(u)
        if self.op == "logistic":
            return expit(u)
        if self.op == "poly":
            out = 0.0
            for c in reversed(self.coeffs):
                out = out * u + c
            return out
        if self.op == "softclip":
            return _softclip_tables(u, self.level, self.width)[0]
        raise ValueError(f"unknown op {self.op!r}")

    def jet(self, w: Sequence[np.ndarray], direction: Sequence[float]):
        """(f, Df.v, D2f[v,v]) along the given direction vector v."""
        if self.op == "const":
            return self.value_const, 0.0, 0.0
        if self.op == "var":
            return np.asarray(w[self.index], dtype=float), float(direction[self.index]), 0.0
        if self.op == "add":
            v = d1 = d2 = 0.0
            for c in self.children:
                cv, cd1, cd2 = c.jet(w, direction)
                v, d1, d2 = v + cv, d1 + cd1, d2 + cd2
            return v, d1, d2
        if self.op == "mul":
            v, d1, d2 = self.children[0].jet(w, direction)
            for c in self.children[1:]:
                u, e1, e2 = c.jet(w, direction)
                v, d1, d2 = v * u, v * e1 + d1 * u, v * e2 + 2.0 * d1 * e1 + d2 * u
            return v, d1, d2
        u, u1, u2 = self.children[0].jet(w, direction)
        if self.op == "pow":
            k = self.exponent
            if k == 0:
                return np.ones_like(np.asarray(u, dtype=float)), 0.0, 0.0
            g = u**k
            gp = k * u ** (k - 1)
            gpp = k * (k - 1) * u ** (k - 2) if k >= 2 else 0.0
        elif self.op == "exp":
            g = np.exp(u)
            gp = gpp = g
        elif self.op == "sin":
            g, gp = np.sin(u), np.cos(u)
            gpp = -g
        elif self.op == "cos":
            g, gp = np.cos(u), -np.sin(u)
            gpp = -g
        elif self.op == "logistic":
            g = expit(u)
            gp = g * (1.0 - g)
            gpp = gp * (1.0 - 2.0 * g)
        elif self.op == "poly":
            g, gp, gpp = _poly_tables(u, self.coeffs)
        elif self.op == "softclip":
            g, gp, gpp = _softclip_tables(u, self.level, self.width)
        else:
            raise ValueError(f"unknown op {self.op!r}")
        return g, gp * u1, gpp * u1 * u1 + gp * u2

    def gradient(self, w: Sequence[np.ndarray], n_vars: int | None = None):
        """All first partials at w, one array per variable."""
        n = self.arity if n_vars is None else n_vars
        eye = np.eye(max(n, 1))
        return [self.jet(w, eye[j])[1] for j in range(n)]

    # -- analysis flags ----------------------------------------------------

    @cached_property
    def derivatives_bounded(self) -> bool:
        """All derivatives of order >= 1 bounded (the function itself may not be)."""
        if self.op in ("const", "var"):
            return True
        if self.op == "add":
            return all(c.derivatives_bounded for c in self.children)
        if self.op == "mul":
            kids = [c for c in self.children if c.op != "const"]
            if len(kids) <= 1:
                return all(c.derivatives_bounded for c in kids)
            return all(c.bounded for c in kids)
        if self.op == "pow":
            if self.exponent == 0:
                return True
            if self.exponent == 1:
                return self.children[0].derivatives_bounded
            return self.children[0].bounded
        if self.op in ("sin", "cos", "logistic", "softclip"):
            return self.children[0].derivatives_bounded
        if self.op == "exp":
            return self.bounded
        if self.op == "poly":
            deg = _poly_degree(self.coeffs)
            if deg <= 0:
                return True
            if deg == 1:
                return self.children[0].derivatives_bounded
            return self.children[0].bounded
        raise ValueError(f"unknown op {self.op!r}")

    @cached_property
    def bounded(self) -> bool:
        """The function and all its derivatives are bounded."""
        if self.op == "const":
            return True
        if self.op == "var":
            return False
        if self.op == "add":
            return all(c.bounded for c in self.children)
        if self.op == "mul":
            kids = [c for c in self.children if c.op != "const"]
            return all(c.bounded for c in kids)
        if self.op == "pow":
            if self.exponent == 0:
                return True
            return self.children[0].bounded
        if self.op in ("sin", "cos", "logistic", "softclip"):
            return self.children[0].derivatives_bounded
        if self.op == "exp":
            child = self.children[0]
            if child.bounded:
                return True
            try:
                return _dominated_by_negative_quadratic(
                    child.to_poly(), max(child.arity, 1)
                )
            except NotPolynomialError:
                return False
        if self.op == "poly":
            deg = _poly_degree(self.coeffs)
            if deg <= 0:
                return True
            return self.children[0].bounded
        raise ValueError(f"unknown op {self.op!r}")

    # -- polynomial extraction ----------------------------------------------

    def to_poly(self, n_vars: int | None = None) -> dict[tuple[int, ...], float]:
        """Multivariate polynomial coefficients {exponents: coeff}.

        Raises NotPolynomialError on transcendental nodes.
        """
        n = self.arity if n_vars is None else n_vars
        n = max(n, 1)
        zero = (0,) * n
        if self.op == "const":
            return {zero: self.value_const} if self.value_const else {}
        if self.op == "var":
            e = list(zero)
            e[self.index] = 1
            return {tuple(e): 1.0}
        if self.op == "add":
            out: dict[tuple[int, ...], float] = {}
            for c in self.children:
                for e, v in c.to_poly(n).items():
                    out[e] = out.get(e, 0.0) + v
            return {e: v for e, v in out.items() if v != 0.0}
        if self.op == "mul":
            out = {zero: 1.0}
            for c in self.children:
                out = _poly_mul(out, c.to_poly(n), n)
            return out
        if self.op == "pow":
            base = self.children[0].to_poly(n)
            out = {zero: 1.0}
            for _ in range(self.exponent):
                out = _poly_mul(out, base, n)
            return out
        if self.op == "poly":
            base = self.children[0].to_poly(n)
            out: dict[tuple[int, ...], float] = {}
            powk = {zero: 1.0}
            for k, ck in enumerate(self.coeffs):
                if k > 0:
                    powk = _poly_mul(powk, base, n)
                if ck:
                    for e, v in powk.items():
                        out[e] = out.get(e, 0.0) + ck * v
            return {e: v for e, v in out.items() if v != 0.0}
        raise NotPolynomialError(f"node {self.op!r} is not polynomial")


def dataclass_replace(f: SmoothFunction, **kw) -> SmoothFunction:
    import dataclasses

    return dataclasses.replace(f, **kw)


# ---------------------------------------------------------------------------
# node constructors
# ---------------------------------------------------------------------------


def constant(c: float) -> SmoothFunction:
    return SmoothFunction("const", value_const=float(c))


def variable(i: int) -> SmoothFunction:
    if i < 0:
        raise ValueError("variable index must be non-negative")
    return SmoothFunction("var", index=i)


def add(*fs: SmoothFunction) -> SmoothFunction:
    return SmoothFunction("add", children=tuple(fs))


def mul(*fs: SmoothFunction) -> SmoothFunction:
    return SmoothFunction("mul", children=tuple(fs))


def power(f: SmoothFunction, k: int) -> SmoothFunction:
    if k < 0:
        raise ValueError("only non-negative integer powers are smooth on R")
    return SmoothFunction("pow", children=(f,), exponent=int(k))


def exp(f: SmoothFunction) -> SmoothFunction:
    return SmoothFunction("exp", children=(f,))


def sin(f: SmoothFunction) -> SmoothFunction:
    return SmoothFunction("sin", children=(f,))


def cos(f: SmoothFunction) -> SmoothFunction:
    return SmoothFunction("cos", children=(f,))


def logistic(f: SmoothFunction) -> SmoothFunction:
    return SmoothFunction("logistic", children=(f,))


def polynomial(coeffs: Sequence[float], f: SmoothFunction) -> SmoothFunction:
    """sum_k coeffs[k] * f^k."""
    return SmoothFunction("poly", children=(f,), coeffs=tuple(float(c) for c in coeffs))


def soft_clip(f: SmoothFunction, level: float, width: float = 1.0) -> SmoothFunction:
    """C^2 symmetric clamp: identity on [-level, level], constant beyond
    level + width, cubic-blended slope in between."""
    if level < 0 or width <= 0:
        raise ValueError("need level >= 0 and width > 0")
    return SmoothFunction("softclip", children=(f,), level=float(level), width=float(width))


def affine(scale: float, f: SmoothFunction, offset: float = 0.0) -> SmoothFunction:
    return add(mul(constant(scale), f), constant(offset))


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _poly_tables(u, coeffs: tuple[float, ...]):
    p = pp = ppp = 0.0
    for c in reversed(coeffs):
        ppp = ppp * u + 2.0 * pp
        pp = pp * u + p
        p = p * u + c
    return p, pp, ppp


def _softclip_tables(y, level: float, width: float):
    y = np.asarray(y, dtype=float)
    a = np.abs(y)
    sg = np.sign(y)
    u = np.clip((a - level) / width, 0.0, 1.0)
    val = sg * (np.minimum(a, level) + width * (u - u**3 + 0.5 * u**4))
    d1 = 1.0 - 3.0 * u * u + 2.0 * u**3
    d2 = sg * (6.0 * u * u - 6.0 * u) / width
    return val, d1, d2


def _poly_degree(coeffs: tuple[float, ...]) -> int:
    deg = -1
    for k, c in enumerate(coeffs):
        if c != 0.0:
            deg = k
    return deg


def _poly_mul(p: dict, q: dict, n: int) -> dict:
    out: dict[tuple[int, ...], float] = {}
    for ea, va in p.items():
        for eb, vb in q.items():
            e = tuple(x + y for x, y in zip(ea, eb))
            out[e] = out.get(e, 0.0) + va * vb
    return {e: v for e, v in out.items() if v != 0.0}


def _dominated_by_negative_quadratic(poly: dict, n: int) -> bool:
    """True when the polynomial is quadratic with negative-definite top part."""
    if any(sum(e) > 2 for e in poly):
        return False
    q = np.zeros((n, n))
    for e, v in poly.items():
        if sum(e) != 2:
            continue
        idx = [i for i, k in enumerate(e) for _ in range(k)]
        i, j = idx[0], idx[1]
        if i == j:
            q[i, i] += v
        else:
            q[i, j] += v / 2.0
            q[j, i] += v / 2.0
    if not np.any(q):
        return False
    return bool(np.max(np.linalg.eigvalsh(q)) < 0.0)


# ---------------------------------------------------------------------------
# JSON expression format
# ---------------------------------------------------------------------------


def tree_to_json(f: SmoothFunction) -> dict:
    if f.op == "const":
        return {"const": f.value_const}
    if f.op == "var":
        return {"var": f.index}
    obj: dict = {"op": f.op, "args": [tree_to_json(c) for c in f.children]}
    if f.op == "pow":
        obj["k"] = f.exponent
    elif f.op == "poly":
        obj["coeffs"] = list(f.coeffs)
    elif f.op == "softclip":
        obj["level"] = f.level
        obj["width"] = f.width
    return obj


def tree_from_json(obj: dict) -> SmoothFunction:
    if "const" in obj:
        return constant(obj["const"])
    if "var" in obj:
        return variable(obj["var"])
    op = obj.get("op")
    args = [tree_from_json(a) for a in obj.get("args", [])]
    if op == "add":
        return add(*args)
    if op == "mul":
        return mul(*args)
    if op == "pow":
        return power(args[0], obj["k"])
    if op in _UNARY:
        return SmoothFunction(op, children=(args[0],))
    if op == "poly":
        return polynomial(obj["coeffs"], args[0])
    if op == "softclip":
        return soft_clip(args[0], obj["level"], obj.get("width", 1.0))
    raise ValueError(f"unknown expression node {obj!r}")
