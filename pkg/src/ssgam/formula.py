"""Model formula mini-language.

A formula looks like ``y ~ (x1 + x2 + f)^2 + lin(z, degree=2) - sm(x2)``.
Raw covariates are expanded into typed terms (numeric ``x`` becomes
``lin(x) + sm(x)``, a factor ``f`` becomes ``fct(f)``), ``^2`` groups expand
into main effects plus all pairwise interactions, and ``:`` builds explicit
interactions.  Interactions of terms that share a covariate are dropped and
recorded in ``ModelSpec.removed_terms``.
"""
from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field
from typing import Mapping

__all__ = [
    "FormulaError",
    "TermSpec",
    "ModelSpec",
    "parse_formula",
    "expand_terms",
    "model_spec",
    "render_formula",
    "WRAPPERS",
    "FAMILIES",
]

FAMILIES = ("gaussian", "binomial", "poisson")

# wrapper name -> (number of covariates, default options)
WRAPPERS: dict[str, tuple[int, dict]] = {
    "u": (1, {}),
    "lin": (1, {"degree": 1}),
    "sm": (1, {"K": 20, "degree": 3, "order": 2}),
    "fct": (1, {}),
    "rnd": (1, {"C": None}),
    "srf": (2, {"K": 7, "degree": 3, "order": 1}),
    "mrf": (1, {"N": None}),
}
NUMERIC_ONLY = {"lin", "sm", "srf"}


class FormulaError(ValueError):
    """Raised for malformed formulas; ``offset`` is a byte offset into the text."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)


# ---------------------------------------------------------------------------
# AST

@dataclass(frozen=True)
class Var:
    name: str
    offset: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple[str, ...]
    kwargs: tuple[tuple[str, object], ...]
    offset: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Interaction:
    factors: tuple


@dataclass(frozen=True)
class Group:
    body: "Sum"
    power: int | None = None


@dataclass(frozen=True)
class Sum:
    terms: tuple
    removed: tuple = ()


@dataclass(frozen=True)
class Formula:
    response: str
    rhs: Sum


_TOKEN = re.compile(
    r"\s*(?:(?P<NUMBER>\d+(?:\.\d*)?(?:[eE][-+]?\d+)?)"
    r"|(?P<NAME>[A-Za-z_.][A-Za-z0-9_.]*)"
    r"|(?P<OP>[~+\-:^(),=*]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            while text[pos].isspace():
                pos += 1
            raise FormulaError(f"unexpected character {text[pos]!r}", _byte(text, pos))
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), _byte(text, start)))
        pos = m.end()
    tokens.append(("EOF", "", len(text.encode("utf-8"))))
    return tokens


def _byte(text: str, i: int) -> int:
    return len(text[:i].encode("utf-8"))


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    @property
    def tok(self):
        return self.tokens[self.i]

    def advance(self):
        t = self.tokens[self.i]
        self.i += 1
        return t

    def expect(self, kind, value=None):
        t = self.tok
        if t[0] != kind or (value is not None and t[1] != value):
            want = value if value is not None else kind
            got = t[1] or "end of formula"
            raise FormulaError(f"expected {want!r}, got {got!r}", t[2])
        return self.advance()

    def is_op(self, value):
        return self.tok[0] == "OP" and self.tok[1] == value

    def formula(self) -> Formula:
        n_tilde = sum(1 for t in self.tokens if t[:2] == ("OP", "~"))
        if n_tilde == 0:
            raise FormulaError("formula needs a '~' separating response and terms", 0)
        if n_tilde > 1:
            second = [t for t in self.tokens if t[:2] == ("OP", "~")][1]
            raise FormulaError("duplicate response: more than one '~'", second[2])
        if self.tok[0] != "NAME":
            raise FormulaError("response must be a single column name", self.tok[2])
        response = self.advance()[1]
        if not self.is_op("~"):
            raise FormulaError("duplicate response: only one response column is allowed", self.tok[2])
        self.advance()
        rhs = self.sum()
        if self.tok[0] != "EOF":
            if self.is_op(")"):
                raise FormulaError("unbalanced ')'", self.tok[2])
            raise FormulaError(f"unexpected {self.tok[1]!r}", self.tok[2])
        return Formula(response, rhs)

    def sum(self) -> Sum:
        terms, removed = [], []
        sign = "+"
        if self.is_op("-") or self.is_op("+"):
            sign = self.advance()[1]
        while True:
            node = self.interaction()
            (removed if sign == "-" else terms).append(node)
            if self.is_op("+") or self.is_op("-"):
                sign = self.advance()[1]
                continue
            if self.is_op("*"):
                raise FormulaError(
                    "'*' is not supported; write main effects and interactions "
                    "explicitly (a + b + a:b) or use (a + b)^2", self.tok[2])
            break
        if not terms:
            raise FormulaError("formula has no terms", self.tok[2])
        return Sum(tuple(terms), tuple(removed))

    def interaction(self):
        factors = [self.power()]
        while self.is_op(":"):
            self.advance()
            factors.append(self.power())
        return factors[0] if len(factors) == 1 else Interaction(tuple(factors))

    def power(self):
        node = self.atom()
        if self.is_op("^"):
            off = self.advance()[2]
            if not isinstance(node, Group):
                raise FormulaError("'^' applies only to parenthesized groups", off)
            num = self.expect("NUMBER")
            if num[1] != "2":
                raise FormulaError("only '^2' interaction expansion is supported", num[2])
            node = Group(node.body, 2)
        return node

    def atom(self):
        t = self.tok
        if t[0] == "OP" and t[1] == "(":
            self.advance()
            body = self.sum()
            if not self.is_op(")"):
                raise FormulaError("unbalanced '(': expected ')'", self.tok[2])
            self.advance()
            return Group(body)
        if t[0] == "NAME":
            self.advance()
            if self.is_op("("):
                return self.call(t)
            return Var(t[1], t[2])
        what = "end of formula" if t[0] == "EOF" else repr(t[1])
        raise FormulaError(f"expected a term, got {what}", t[2])

    def call(self, name_tok) -> Call:
        name, off = name_tok[1], name_tok[2]
        if name not in WRAPPERS:
            raise FormulaError(
                f"unknown wrapper {name!r}; expected one of {', '.join(WRAPPERS)}", off)
        self.expect("OP", "(")
        args, kwargs = [], []
        while not self.is_op(")"):
            t = self.tok
            if t[0] != "NAME":
                raise FormulaError("wrapper arguments must be column names or key=value", t[2])
            self.advance()
            if self.is_op("="):
                self.advance()
                v = self.tok
                if v[0] == "NUMBER":
                    value = float(v[1]) if any(c in v[1] for c in ".eE") else int(v[1])
                elif v[0] == "NAME":
                    value = v[1]
                else:
                    raise FormulaError(f"bad value for argument {t[1]!r}", v[2])
                self.advance()
                kwargs.append((t[1], value))
            else:
                if kwargs:
                    raise FormulaError("positional argument after keyword argument", t[2])
                args.append(t[1])
            if self.is_op(","):
                self.advance()
            elif not self.is_op(")"):
                raise FormulaError("expected ',' or ')'", self.tok[2])
        self.advance()
        return Call(name, tuple(args), tuple(kwargs), off)


def parse_formula(text: str) -> Formula:
    """Parse formula text into an AST (:class:`Formula`)."""
    return _Parser(text).formula()


# ---------------------------------------------------------------------------
# Terms

@dataclass(frozen=True)
class TermSpec:
    """One model term.

    ``kind`` is a wrapper name for main effects and ``"interaction"`` for
    products of main effects, whose factors are held in ``parts``.
    """

    label: str
    kind: str
    covariates: tuple[str, ...]
    options: tuple[tuple[str, object], ...] = ()
    parts: tuple["TermSpec", ...] = ()

    @property
    def interaction_order(self) -> int:
        return max(1, len(self.parts))

    @property
    def opts(self) -> dict:
        return dict(self.options)

    @property
    def is_interaction(self) -> bool:
        return bool(self.parts)


@dataclass(frozen=True)
class ModelSpec:
    response: str
    family: str
    terms: tuple[TermSpec, ...]
    removed_terms: tuple[str, ...] = ()

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        labels = [t.label for t in self.terms]
        if len(set(labels)) != len(labels):
            raise ValueError("term labels must be unique")
        if set(labels) & set(self.removed_terms):
            raise ValueError("removed term still present in model")
        if not self.terms:
            raise ValueError("model needs at least one term")

    def __getitem__(self, label: str) -> TermSpec:
        for t in self.terms:
            if t.label == label:
                return t
        raise KeyError(label)

    @property
    def labels(self) -> list[str]:
        return [t.label for t in self.terms]

    def to_formula(self) -> str:
        return render_formula(self)


INTERCEPT = TermSpec("u", "u", ())


def _main_term(name: str, covs: tuple[str, ...], kwargs: Mapping, offset: int = 0) -> TermSpec:
    n_cov, defaults = WRAPPERS[name]
    if len(covs) != n_cov:
        raise FormulaError(f"{name}() takes {n_cov} covariate(s), got {len(covs)}", offset)
    if len(set(covs)) != len(covs):
        raise FormulaError(f"{name}() repeats a covariate", offset)
    unknown = set(kwargs) - set(defaults)
    if unknown:
        raise FormulaError(f"{name}() got unknown argument(s) {sorted(unknown)}", offset)
    opts = {**defaults, **kwargs}
    label = f"{name}({', '.join(covs)})"
    return TermSpec(label, name, tuple(covs), tuple(sorted(opts.items())))


def _combine(parts: tuple[TermSpec, ...]) -> TermSpec:
    if len(parts) == 1:
        return parts[0]
    flat: list[TermSpec] = []
    for p in parts:
        flat.extend(p.parts if p.parts else (p,))
    covs = tuple(c for p in flat for c in p.covariates)
    return TermSpec(":".join(p.label for p in flat), "interaction", covs, (), tuple(flat))


class _Expander:
    def __init__(self, schema: Mapping[str, str], response: str):
        self.schema = dict(schema)
        self.response = response
        self.removed: list[str] = []

    def _note_removed(self, label):
        if label not in self.removed:
            self.removed.append(label)

    def check_cov(self, name, offset):
        if name == self.response:
            raise FormulaError(f"response {name!r} used as a covariate", offset)
        if name not in self.schema:
            raise FormulaError(f"covariate {name!r} not found in data", offset)
        kind = self.schema[name]
        if kind not in ("numeric", "factor"):
            raise ValueError(f"schema type for {name!r} must be 'numeric' or 'factor'")
        return kind

    def products(self, node) -> list[tuple[TermSpec, ...]]:
        """Evaluate a node into an ordered list of products of main terms."""
        if isinstance(node, Var):
            kind = self.check_cov(node.name, node.offset)
            if kind == "numeric":
                return [(_main_term("lin", (node.name,), {}),),
                        (_main_term("sm", (node.name,), {}),)]
            return [(_main_term("fct", (node.name,), {}),)]
        if isinstance(node, Call):
            for c in node.args:
                kind = self.check_cov(c, node.offset)
                if node.name in NUMERIC_ONLY and kind == "factor":
                    raise FormulaError(
                        f"factor {c!r} passed to numeric-only wrapper {node.name}()", node.offset)
            return [(_main_term(node.name, node.args, dict(node.kwargs), node.offset),)]
        if isinstance(node, Interaction):
            out = [()]
            for f in node.factors:
                out = [a + b for a in out for b in self.products(f)]
            return [p for p in out if self._keep(p)]
        if isinstance(node, Group):
            items = self.sum(node.body)
            if node.power is None:
                return items
            pairs = []
            for a, b in itertools.combinations(items, 2):
                if self._keep(a + b):
                    pairs.append(a + b)
            return items + pairs
        if isinstance(node, Sum):
            return self.sum(node)
        raise TypeError(f"unknown AST node {node!r}")

    def _keep(self, parts) -> bool:
        covs = [c for p in parts for c in p.covariates]
        if len(set(covs)) != len(covs):
            self._note_removed(_combine(parts).label)
            return False
        return True

    def sum(self, node: Sum) -> list[tuple[TermSpec, ...]]:
        out = []
        for t in node.terms:
            out.extend(self.products(t))
        for r in node.removed:
            for p in self.products(r):
                self._note_removed(_combine(p).label)
        return out


def expand_terms(ast: Formula, schema: Mapping[str, str], family: str = "gaussian") -> ModelSpec:
    """Expand a parsed formula against a column schema into a :class:`ModelSpec`.

    ``schema`` maps column names to ``"numeric"`` or ``"factor"``.
    """
    ex = _Expander(schema, ast.response)
    products = ex.products(ast.rhs)
    terms: list[TermSpec] = [INTERCEPT]
    seen: dict[str, TermSpec] = {}
    for p in products:
        t = _combine(p)
        if t.label in ex.removed:
            continue
        if t.label in seen:
            if seen[t.label] != t:
                raise FormulaError(f"term {t.label!r} specified twice with different options")
            continue
        seen[t.label] = t
        terms.append(t)
    if len(terms) == 1:
        raise FormulaError("no model terms left after removals")
    # main effects first, then interactions, each in formula order
    terms.sort(key=lambda t: 0 if t.kind == "u" else t.interaction_order)
    return ModelSpec(ast.response, family, tuple(terms), tuple(ex.removed))


def model_spec(text: str, schema: Mapping[str, str], family: str = "gaussian") -> ModelSpec:
    return expand_terms(parse_formula(text), schema, family)


def _render_main(t: TermSpec) -> str:
    defaults = WRAPPERS[t.kind][1]
    extra = [f"{k}={v}" for k, v in t.options if defaults.get(k) != v]
    return f"{t.kind}({', '.join(list(t.covariates) + extra)})"


def render_term(t: TermSpec) -> str:
    if t.is_interaction:
        return ":".join(_render_main(p) for p in t.parts)
    return _render_main(t)


def render_formula(spec: ModelSpec) -> str:
    """Canonical text that re-parses to the same :class:`ModelSpec`."""
    body = " + ".join(render_term(t) for t in spec.terms if t is not INTERCEPT and t.label != "u")
    removed = "".join(f" - {r}" for r in spec.removed_terms)
    return f"{spec.response} ~ {body}{removed}"
