"""Causal graphs with latent confounders and mixed policy scopes.

A :class:`CausalGraph` is an ADMG: directed edges encode direct causes and
bidirected edges encode unobserved confounders. An :class:`Mps` says which
variables are intervened on and which context each intervention reads.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter
from pathlib import Path
from typing import Iterable, Mapping

__all__ = [
    "CausalGraph",
    "CyclicGraphError",
    "GraphError",
    "GraphParseError",
    "InvalidMpsError",
    "Mps",
    "SuboptimalityReport",
    "d_separated",
    "enumerate_mps",
    "format_graph",
    "hard_optimality_criterion",
    "hard_suboptimality_criterion",
    "is_nonredundant",
    "is_valid_mps",
    "mutilate",
    "nrmps_reduce",
    "parse_graph",
    "read_graph",
    "relatives",
    "remove_node",
]


class GraphError(ValueError):
    """Malformed graph or bad node reference."""


class CyclicGraphError(GraphError):
    pass


class InvalidMpsError(GraphError):
    pass


class GraphParseError(GraphError):
    def __init__(self, lineno: int, message: str):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}")


@dataclass(frozen=True)
class CausalGraph:
    nodes: tuple[str, ...]
    directed: frozenset[tuple[str, str]]
    bidirected: frozenset[frozenset[str]]
    target: str
    intervenable: frozenset[str]
    _parents: dict = field(init=False, repr=False, compare=False, hash=False)
    _children: dict = field(init=False, repr=False, compare=False, hash=False)
    _order: tuple = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        nodes = tuple(self.nodes)
        if len(set(nodes)) != len(nodes):
            raise GraphError("duplicate node names")
        known = set(nodes)
        directed = frozenset((str(a), str(b)) for a, b in self.directed)
        bidirected = frozenset(frozenset(pair) for pair in self.bidirected)
        for a, b in directed:
            if a not in known or b not in known:
                raise GraphError(f"edge {a}->{b} references an unknown node")
            if a == b:
                raise GraphError(f"self-loop on {a}")
        for pair in bidirected:
            if len(pair) != 2:
                raise GraphError(f"bidirected edge needs two distinct nodes: {sorted(pair)}")
            if not pair <= known:
                raise GraphError(f"bidirected edge {sorted(pair)} references an unknown node")
        if self.target not in known:
            raise GraphError(f"target {self.target!r} is not a node")
        intervenable = frozenset(self.intervenable)
        if not intervenable <= known:
            raise GraphError(f"unknown intervenable nodes: {sorted(intervenable - known)}")
        if self.target in intervenable:
            raise GraphError("the target cannot be intervenable")

        parents: dict[str, set[str]] = {v: set() for v in nodes}
        children: dict[str, set[str]] = {v: set() for v in nodes}
        for a, b in directed:
            parents[b].add(a)
            children[a].add(b)
        sorter = TopologicalSorter()
        # Insertion order (node order, then sorted parents) fixes the output.
        for v in nodes:
            sorter.add(v, *sorted(parents[v]))
        try:
            order = tuple(sorter.static_order())
        except CycleError as exc:
            raise CyclicGraphError(f"directed cycle: {' -> '.join(exc.args[1])}") from None

        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "directed", directed)
        object.__setattr__(self, "bidirected", bidirected)
        object.__setattr__(self, "intervenable", intervenable)
        object.__setattr__(self, "_parents", {v: frozenset(p) for v, p in parents.items()})
        object.__setattr__(self, "_children", {v: frozenset(c) for v, c in children.items()})
        object.__setattr__(self, "_order", order)

    def _check(self, v: str) -> None:
        if v not in self._parents:
            raise GraphError(f"unknown variable {v!r}")

    @property
    def topological_order(self) -> tuple[str, ...]:
        return self._order

    def parents(self, v: str) -> frozenset[str]:
        self._check(v)
        return self._parents[v]

    def children(self, v: str) -> frozenset[str]:
        self._check(v)
        return self._children[v]

    def ancestors(self, v: str) -> frozenset[str]:
        self._check(v)
        return frozenset(_closure(self._parents, [v]) - {v})

    def descendants(self, v: str) -> frozenset[str]:
        self._check(v)
        return frozenset(_closure(self._children, [v]) - {v})

    def spouses(self, v: str) -> frozenset[str]:
        self._check(v)
        return frozenset(w for pair in self.bidirected if v in pair for w in pair if w != v)

    def replace(self, *, directed=None, bidirected=None, nodes=None, intervenable=None) -> CausalGraph:
        return CausalGraph(
            nodes=self.nodes if nodes is None else nodes,
            directed=self.directed if directed is None else directed,
            bidirected=self.bidirected if bidirected is None else bidirected,
            target=self.target,
            intervenable=self.intervenable if intervenable is None else intervenable,
        )


def _closure(adjacency: Mapping[str, Iterable[str]], start: Iterable[str]) -> set[str]:
    seen = set(start)
    stack = list(seen)
    while stack:
        v = stack.pop()
        for w in adjacency[v]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return seen


def relatives(g: CausalGraph, v: str, kind: str) -> frozenset[str]:
    lookup = {
        "parents": g.parents,
        "ancestors": g.ancestors,
        "descendants": g.descendants,
        "spouses": g.spouses,
    }
    if kind not in lookup:
        raise ValueError(f"unknown relative kind {kind!r}")
    return lookup[kind](v)


@dataclass(frozen=True, order=True)
class Mps:
    """Mixed policy scope: sorted ``(variable, context)`` pairs.

    Contexts are sorted tuples; an empty context is a hard intervention.
    """

    pairs: tuple[tuple[str, tuple[str, ...]], ...]

    def __post_init__(self):
        pairs = tuple(sorted((str(x), tuple(sorted(set(ctx)))) for x, ctx in self.pairs))
        names = [x for x, _ in pairs]
        if len(set(names)) != len(names):
            raise InvalidMpsError(f"variable listed twice in scope: {names}")
        for x, ctx in pairs:
            if x in ctx:
                raise InvalidMpsError(f"{x} cannot be in its own context")
        object.__setattr__(self, "pairs", pairs)

    @classmethod
    def of(cls, mapping: Mapping[str, Iterable[str]]) -> Mps:
        return cls(tuple((x, tuple(ctx)) for x, ctx in mapping.items()))

    @property
    def variables(self) -> tuple[str, ...]:
        return tuple(x for x, _ in self.pairs)

    @property
    def hard_variables(self) -> tuple[str, ...]:
        return tuple(x for x, ctx in self.pairs if not ctx)

    @property
    def functional_variables(self) -> tuple[str, ...]:
        return tuple(x for x, ctx in self.pairs if ctx)

    @property
    def contexts(self) -> tuple[str, ...]:
        """Union of all contexts, sorted."""
        return tuple(sorted({c for _, ctx in self.pairs for c in ctx}))

    @property
    def is_hard(self) -> bool:
        return all(not ctx for _, ctx in self.pairs)

    def context(self, x: str) -> tuple[str, ...]:
        for var, ctx in self.pairs:
            if var == x:
                return ctx
        raise KeyError(x)

    def as_dict(self) -> dict[str, tuple[str, ...]]:
        return dict(self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def __str__(self) -> str:
        return "{" + ", ".join(f"<{x}|{','.join(ctx)}>" for x, ctx in self.pairs) + "}"

    @classmethod
    def parse(cls, text: str) -> Mps:
        """Inverse of ``str``: ``{<W|>, <Z|X>}``."""
        body = text.strip()
        if not (body.startswith("{") and body.endswith("}")):
            raise ValueError(f"not a scope: {text!r}")
        body = body[1:-1].strip()
        pairs = []
        for chunk in filter(None, (c.strip() for c in body.split(">"))):
            chunk = chunk.lstrip(",").strip()
            if not chunk.startswith("<") or "|" not in chunk:
                raise ValueError(f"bad scope pair {chunk!r}")
            var, ctx = chunk[1:].split("|", 1)
            pairs.append((var.strip(), tuple(c.strip() for c in ctx.split(",") if c.strip())))
        return cls(tuple(pairs))


def mutilate(g: CausalGraph, s: Mps) -> CausalGraph:
    """Graph after replacing each intervened variable's mechanism.

    Incoming directed and bidirected edges of every intervened ``X`` are
    dropped and edges ``C -> X`` are added for its context. Raises
    :class:`InvalidMpsError` when the result is cyclic.
    """
    known = set(g.nodes)
    for x, ctx in s.pairs:
        if x not in known or not set(ctx) <= known:
            raise GraphError(f"scope {s} references unknown nodes")
    targets = set(s.variables)
    directed = {(a, b) for a, b in g.directed if b not in targets}
    directed |= {(c, x) for x, ctx in s.pairs for c in ctx}
    bidirected = {pair for pair in g.bidirected if not pair & targets}
    try:
        return g.replace(directed=directed, bidirected=bidirected)
    except CyclicGraphError as exc:
        raise InvalidMpsError(f"scope {s} induces a cycle ({exc})") from None


def remove_node(g: CausalGraph, x: str) -> CausalGraph:
    g._check(x)
    if x == g.target:
        raise GraphError("cannot remove the target")
    return g.replace(
        nodes=tuple(v for v in g.nodes if v != x),
        directed={(a, b) for a, b in g.directed if x not in (a, b)},
        bidirected={pair for pair in g.bidirected if x not in pair},
        intervenable=g.intervenable - {x},
    )


def d_separated(g: CausalGraph, a: Iterable[str], b: Iterable[str], z: Iterable[str]) -> bool:
    """True iff ``a`` and ``b`` are d-separated given ``z``.

    Each bidirected edge becomes a latent common parent, then a reachability
    sweep (Bayes ball) looks for an active trail from ``a``.
    """
    a, b, z = set(a), set(b), set(z)
    for v in a | b | z:
        g._check(v)
    if a & b or a & z or b & z:
        raise ValueError("d-separation arguments must be disjoint")
    if not a or not b:
        return True

    parents = {v: set(ps) for v, ps in g._parents.items()}
    children = {v: set(cs) for v, cs in g._children.items()}
    for pair in g.bidirected:
        u, w = sorted(pair)
        latent = ("latent", u, w)  # tuple names never collide with str nodes
        parents[latent] = set()
        children[latent] = {u, w}
        parents[u].add(latent)
        parents[w].add(latent)

    anc_z = _closure(parents, z)
    visited = set()
    stack = [(v, "up") for v in a]
    while stack:
        v, direction = stack.pop()
        if (v, direction) in visited:
            continue
        visited.add((v, direction))
        if v in b:
            return False
        if direction == "up" and v not in z:
            stack.extend((p, "up") for p in parents[v])
            stack.extend((c, "down") for c in children[v])
        elif direction == "down":
            if v not in z:
                stack.extend((c, "down") for c in children[v])
            if v in anc_z:
                stack.extend((p, "up") for p in parents[v])
    return True


def is_valid_mps(g: CausalGraph, s: Mps) -> bool:
    known = set(g.nodes)
    for x, ctx in s.pairs:
        if x not in g.intervenable:
            return False
        if not set(ctx) <= known or x in ctx or g.target in ctx:
            return False
    try:
        mutilate(g, s)
    except InvalidMpsError:
        return False
    return True


def _allowed_contexts(g: CausalGraph, x: str, context_policy) -> list[tuple[str, ...]]:
    if context_policy is None or context_policy == "parents":
        options = [tuple(sorted(g.parents(x) - {g.target}))]
    else:
        raw = context_policy.get(x, ())
        # A single context set, or a list of alternative context sets.
        if raw and all(isinstance(c, str) for c in raw):
            raw = [raw]
        options = [tuple(sorted(set(c))) for c in raw]
    return [ctx for ctx in dict.fromkeys(options) if ctx]


def enumerate_mps(g: CausalGraph, context_policy=None) -> list[Mps]:
    """All valid scopes over nonempty subsets of the intervenable set.

    Each variable takes the empty context or one of its allowed contexts:
    its parents by default, or the entries of an explicit
    ``{variable: context | [contexts]}`` map.
    """
    choices = []
    for x in sorted(g.intervenable):
        choices.append([None, ()] + _allowed_contexts(g, x, context_policy))
    found = []
    for combo in itertools.product(*choices):
        pairs = tuple((x, ctx) for x, ctx in zip(sorted(g.intervenable), combo) if ctx is not None)
        if not pairs:
            continue
        s = Mps(pairs)
        if is_valid_mps(g, s):
            found.append(s)
    return sorted(set(found))


def is_nonredundant(g: CausalGraph, s: Mps) -> bool:
    if not is_valid_mps(g, s):
        raise InvalidMpsError(f"{s} is not a valid scope for this graph")
    gs = mutilate(g, s)
    if not set(s.variables) <= gs.ancestors(g.target):
        return False
    for x, ctx in s.pairs:
        pruned = remove_node(gs, x)
        for c in ctx:
            if d_separated(pruned, {g.target}, {c}, set(ctx) - {c}):
                return False
    return True


def nrmps_reduce(g: CausalGraph, context_policy=None) -> list[Mps]:
    return [s for s in enumerate_mps(g, context_policy) if is_nonredundant(g, s)]


@dataclass(frozen=True)
class SuboptimalityReport:
    holds: bool
    witnesses: tuple[tuple[str, str, str], ...]


def hard_suboptimality_criterion(g: CausalGraph) -> SuboptimalityReport:
    """Graphical test for when hard interventions alone can be beaten.

    Witnesses are ``(X, C, case)`` with case ``"i"`` for a non-intervenable
    parent ``C`` of the target and ``"ii"`` for a confounded spouse ``C``.
    """
    y = g.target
    candidates = [(c, "i") for c in sorted(g.parents(y) - g.intervenable)]
    candidates += [(c, "ii") for c in sorted(g.spouses(y))]
    movers = sorted(g.ancestors(y) & g.intervenable)
    witnesses = []
    for c, case in candidates:
        for x in movers:
            if x != c and is_valid_mps(g, Mps(((x, (c,)),))):
                witnesses.append((x, c, case))
    return SuboptimalityReport(bool(witnesses), tuple(witnesses))


def hard_optimality_criterion(g: CausalGraph) -> bool:
    y = g.target
    return g.parents(y) <= g.intervenable and not g.spouses(y)


def parse_graph(text: str) -> CausalGraph:
    nodes: list[str] = []
    directed: list[tuple[str, str, int]] = []
    bidirected: list[tuple[str, str, int]] = []
    target = None
    intervenable: list[tuple[str, int]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        keyword, *args = line.split()
        if keyword == "node":
            if len(args) != 1:
                raise GraphParseError(lineno, "usage: node <name>")
            if args[0] in nodes:
                raise GraphParseError(lineno, f"duplicate node {args[0]!r}")
            nodes.append(args[0])
        elif keyword in ("edge", "biedge"):
            if len(args) != 2:
                raise GraphParseError(lineno, f"usage: {keyword} <a> <b>")
            if args[0] == args[1]:
                raise GraphParseError(lineno, f"self-loop on {args[0]!r}")
            (directed if keyword == "edge" else bidirected).append((args[0], args[1], lineno))
        elif keyword == "target":
            if len(args) != 1:
                raise GraphParseError(lineno, "usage: target <name>")
            if target is not None:
                raise GraphParseError(lineno, "target declared twice")
            target = (args[0], lineno)
        elif keyword == "intervenable":
            intervenable.extend((name, lineno) for name in args)
        else:
            raise GraphParseError(lineno, f"unknown keyword {keyword!r}")

    known = set(nodes)
    for a, b, lineno in directed + bidirected:
        for name in (a, b):
            if name not in known:
                raise GraphParseError(lineno, f"unknown node {name!r}")
    for name, lineno in intervenable:
        if name not in known:
            raise GraphParseError(lineno, f"unknown node {name!r}")
    if target is None:
        raise GraphParseError(len(text.splitlines()) or 1, "missing target")
    if target[0] not in known:
        raise GraphParseError(target[1], f"unknown node {target[0]!r}")
    try:
        return CausalGraph(
            nodes=tuple(nodes),
            directed=frozenset((a, b) for a, b, _ in directed),
            bidirected=frozenset(frozenset((a, b)) for a, b, _ in bidirected),
            target=target[0],
            intervenable=frozenset(name for name, _ in intervenable),
        )
    except GraphError as exc:
        last = max([ln for *_, ln in directed + bidirected] + [target[1]] + [ln for _, ln in intervenable])
        raise GraphParseError(last, str(exc)) from None


def read_graph(path: str | Path) -> CausalGraph:
    return parse_graph(Path(path).read_text())


def format_graph(g: CausalGraph) -> str:
    lines = [f"node {v}" for v in g.nodes]
    lines += [f"edge {a} {b}" for a, b in sorted(g.directed)]
    lines += [f"biedge {' '.join(sorted(pair))}" for pair in sorted(g.bidirected, key=sorted)]
    lines.append(f"target {g.target}")
    if g.intervenable:
        lines.append("intervenable " + " ".join(sorted(g.intervenable)))
    return "\n".join(lines) + "\n"
