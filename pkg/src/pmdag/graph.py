"""DAGs over visible and latent nodes, and the structural transformations on them.

A graph here is an immutable value: node order is significant (parent lists
and weight vectors index against it) and every transformation returns a new
graph.  Auxiliary nodes introduced by transforms get deterministic names so
that transform pipelines are reproducible and serializable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

VISIBLE = "visible"
LATENT = "latent"

AUX_PREFIX = "__aux_"
MUT_PREFIX = "__mut_"


class GraphError(ValueError):
    """Base class for graph construction and transformation errors."""


class CycleDetected(GraphError):
    def __init__(self, path):
        self.path = tuple(path)
        super().__init__("cycle detected: " + " -> ".join(self.path))


class VisibleRoot(GraphError):
    def __init__(self, node):
        self.node = node
        super().__init__(f"visible node {node!r} has no parents; roots must be latent")


class NonRootLatent(GraphError):
    def __init__(self, node):
        self.node = node
        super().__init__(f"latent node {node!r} has parents; strict graphs require latent roots only")


class UnknownNode(GraphError):
    def __init__(self, node):
        self.node = node
        super().__init__(f"unknown node {node!r}")


class NotLatent(GraphError):
    def __init__(self, node):
        self.node = node
        super().__init__(f"node {node!r} is not latent")


class RootTarget(GraphError):
    def __init__(self, node):
        self.node = node
        super().__init__(f"node {node!r} is a root; deterministic exogenization needs a non-root target")


class NotLatentRoot(GraphError):
    def __init__(self, node):
        self.node = node
        super().__init__(f"node {node!r} is not a latent root")


class NotVisible(GraphError):
    def __init__(self, node):
        self.node = node
        super().__init__(f"node {node!r} is not visible")


@dataclass(frozen=True)
class Node:
    """A named node with a visibility role."""

    name: str
    role: str

    def __post_init__(self):
        if self.role not in (VISIBLE, LATENT):
            raise GraphError(f"role must be {VISIBLE!r} or {LATENT!r}, got {self.role!r}")

    @property
    def is_latent(self) -> bool:
        return self.role == LATENT

    @property
    def is_visible(self) -> bool:
        return self.role == VISIBLE


def _as_node(spec) -> Node:
    if isinstance(spec, Node):
        return spec
    if isinstance(spec, dict):
        return Node(spec["name"], spec["role"])
    name, role = spec
    return Node(name, role)


class PmDag:
    """Immutable acyclic graph whose every root node is latent.

    ``nodes`` is an ordered tuple; ``edges`` is a set of (parent, child) name
    pairs.  Construction validates acyclicity and the latent-root condition.
    The strict subclass condition (every latent is a root) is checked by
    :func:`validate` with ``strict=True`` or via :attr:`is_strict`.
    """

    __slots__ = ("nodes", "edges", "_index", "_parents", "_children")

    def __init__(self, nodes: Iterable, edges: Iterable[tuple[str, str]]):
        nodes = tuple(_as_node(n) for n in nodes)
        index: dict[str, int] = {}
        for i, node in enumerate(nodes):
            if node.name in index:
                raise GraphError(f"duplicate node name {node.name!r}")
            index[node.name] = i
        edge_set = set()
        for parent, child in edges:
            if parent not in index:
                raise UnknownNode(parent)
            if child not in index:
                raise UnknownNode(child)
            if parent == child:
                raise CycleDetected((parent, child))
            edge_set.add((parent, child))

        parents: dict[str, list[str]] = {n.name: [] for n in nodes}
        children: dict[str, list[str]] = {n.name: [] for n in nodes}
        for parent, child in edge_set:
            parents[child].append(parent)
            children[parent].append(child)
        for adj in (parents, children):  # node-list order keeps adjacency deterministic
            for lst in adj.values():
                lst.sort(key=index.get)

        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", frozenset(edge_set))
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "_parents", parents)
        object.__setattr__(self, "_children", children)

        self._check_acyclic()
        for node in nodes:
            if node.is_visible and not parents[node.name]:
                raise VisibleRoot(node.name)

    def __setattr__(self, key, value):
        raise AttributeError("PmDag is immutable")

    def _check_acyclic(self):
        indegree = {n.name: len(self._parents[n.name]) for n in self.nodes}
        queue = [name for name, d in indegree.items() if d == 0]
        seen = 0
        while queue:
            name = queue.pop()
            seen += 1
            for child in self._children[name]:
                indegree[child] -= 1
                if indegree[child] == 0:
                    queue.append(child)
        if seen < len(self.nodes):
            leftover = {name for name, d in indegree.items() if d > 0}
            raise CycleDetected(self._find_cycle(leftover))

    def _find_cycle(self, leftover):
        # Walk parents inside the leftover set until a node repeats.
        start = min(leftover, key=self._index.get)
        path = [start]
        seen = {start}
        cur = start
        while True:
            cur = next(p for p in self._parents[cur] if p in leftover)
            if cur in seen:
                tail = path[path.index(cur):] if cur in path else path
                return [cur] + list(reversed(tail))
            path.append(cur)
            seen.add(cur)

    # --- basic queries -------------------------------------------------

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __eq__(self, other) -> bool:
        if not isinstance(other, PmDag):
            return NotImplemented
        return self.nodes == other.nodes and self.edges == other.edges

    def __hash__(self):
        return hash((self.nodes, self.edges))

    def __repr__(self):
        return f"PmDag({len(self.nodes)} nodes, {len(self.edges)} edges)"

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise UnknownNode(name) from None

    def node(self, name: str) -> Node:
        return self.nodes[self.index(name)]

    def parents(self, name: str) -> tuple[str, ...]:
        """Parents of ``name`` in node-list order."""
        self.index(name)
        return tuple(self._parents[name])

    def children(self, name: str) -> tuple[str, ...]:
        self.index(name)
        return tuple(self._children[name])

    def is_root(self, name: str) -> bool:
        return not self.parents(name)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n.name for n in self.nodes)

    @property
    def visible_names(self) -> tuple[str, ...]:
        return tuple(n.name for n in self.nodes if n.is_visible)

    @property
    def latent_names(self) -> tuple[str, ...]:
        return tuple(n.name for n in self.nodes if n.is_latent)

    @property
    def roots(self) -> tuple[str, ...]:
        return tuple(n.name for n in self.nodes if not self._parents[n.name])

    @property
    def nonroots(self) -> tuple[str, ...]:
        return tuple(n.name for n in self.nodes if self._parents[n.name])

    @property
    def is_strict(self) -> bool:
        """True iff every latent node is a root."""
        return all(not self._parents[n.name] for n in self.nodes if n.is_latent)

    def topological_order(self) -> tuple[str, ...]:
        """Node names in a topological order, ties broken by node-list order."""
        indegree = {n.name: len(self._parents[n.name]) for n in self.nodes}
        ready = [n.name for n in self.nodes if indegree[n.name] == 0]
        order = []
        while ready:
            name = ready.pop(0)
            order.append(name)
            for child in self._children[name]:
                indegree[child] -= 1
                if indegree[child] == 0:
                    ready.append(child)
            ready.sort(key=self._index.get)
        return tuple(order)

    # --- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "nodes": [{"name": n.name, "role": n.role} for n in self.nodes],
            "edges": sorted([p, c] for p, c in self.edges),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PmDag":
        return cls(data["nodes"], [tuple(e) for e in data["edges"]])

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_json(cls, text: str) -> "PmDag":
        return cls.from_dict(json.loads(text))

    def to_dot(self) -> str:
        """Graphviz text; latent nodes are boxes, visible nodes ellipses."""
        lines = ["digraph g {"]
        for n in self.nodes:
            shape = "box" if n.is_latent else "ellipse"
            lines.append(f'  "{n.name}" [shape={shape}];')
        for p, c in sorted(self.edges):
            lines.append(f'  "{p}" -> "{c}";')
        lines.append("}")
        return "\n".join(lines)


def load_graph(path) -> PmDag:
    with open(path, "r", encoding="utf-8") as fh:
        return PmDag.from_dict(json.load(fh))


def save_graph(g: PmDag, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(g.to_dict(), fh, indent=2)
        fh.write("\n")


# --- structural parameters ---------------------------------------------


class StructuralParams:
    """One weight vector per non-root node, indexed by its parent list.

    Root nodes are standard normal with variance 1; the weight vector of a
    non-root follows the graph's parent ordering (node-list order).
    """

    __slots__ = ("weights",)

    def __init__(self, weights: dict[str, np.ndarray]):
        self.weights = {name: np.asarray(w, dtype=float) for name, w in weights.items()}

    @classmethod
    def from_edge_dict(cls, g: PmDag, edge_weights: dict[tuple[str, str], float]) -> "StructuralParams":
        weights = {}
        for name in g.nonroots:
            pa = g.parents(name)
            weights[name] = np.array([edge_weights.get((p, name), 0.0) for p in pa], dtype=float)
        return cls(weights)

    def to_edge_dict(self, g: PmDag) -> dict[tuple[str, str], float]:
        out = {}
        for name, vec in self.weights.items():
            for p, w in zip(g.parents(name), vec):
                out[(p, name)] = float(w)
        return out

    def edge_weight(self, g: PmDag, parent: str, child: str) -> float:
        pa = g.parents(child)
        return float(self.weights[child][pa.index(parent)])

    def with_edge_weight(self, g: PmDag, parent: str, child: str, value: float) -> "StructuralParams":
        new = {name: vec.copy() for name, vec in self.weights.items()}
        new[child][g.parents(child).index(parent)] = value
        return StructuralParams(new)

    def validate_for(self, g: PmDag) -> None:
        nonroots = set(g.nonroots)
        if set(self.weights) != nonroots:
            raise GraphError("params must cover exactly the non-root nodes of the graph")
        for name, vec in self.weights.items():
            if vec.shape != (len(g.parents(name)),):
                raise GraphError(f"weight vector of {name!r} does not match its parent count")

    def __eq__(self, other):
        if not isinstance(other, StructuralParams):
            return NotImplemented
        return set(self.weights) == set(other.weights) and all(
            np.array_equal(self.weights[k], other.weights[k]) for k in self.weights
        )

    def __repr__(self):
        return f"StructuralParams({len(self.weights)} nodes)"


# --- operations ---------------------------------------------------------


class NodeView(NamedTuple):
    parents: tuple[str, ...]
    children: tuple[str, ...]
    is_root: bool


def validate(nodes: Iterable, edges: Iterable[tuple[str, str]], strict: bool = False) -> PmDag:
    """Build a graph, raising on cycles, visible roots, and (if strict) non-root latents."""
    g = PmDag(nodes, edges)
    if strict:
        for node in g.nodes:
            if node.is_latent and g.parents(node.name):
                raise NonRootLatent(node.name)
    return g


def query(g: PmDag, name: str) -> NodeView:
    """Parents, children, and rootness of one node."""
    return NodeView(g.parents(name), g.children(name), g.is_root(name))


def aux_name(target: str) -> str:
    return AUX_PREFIX + target


def mut_name(target: str) -> str:
    return MUT_PREFIX + target


def _ordered_targets(g: PmDag, targets: Iterable[str]) -> list[str]:
    targets = set(targets)
    for t in targets:
        g.index(t)
    return sorted(targets, key=g.index)


def augment(g: PmDag, targets: Iterable[str]) -> tuple[PmDag, dict[str, str]]:
    """Add a fresh latent parent per target node.

    Returns the augmented graph and the map target -> auxiliary node name.
    Targets are processed in node-list order; aux nodes are appended to the
    node list in that order.
    """
    ordered = _ordered_targets(g, targets)
    aux_map = {}
    nodes = list(g.nodes)
    edges = set(g.edges)
    for t in ordered:
        aux = aux_name(t)
        if aux in g or aux in aux_map.values():
            raise GraphError(f"auxiliary name {aux!r} already taken")
        aux_map[t] = aux
        nodes.append(Node(aux, LATENT))
        edges.add((aux, t))
    return PmDag(nodes, edges), aux_map


def exogenize(g: PmDag, targets: Iterable[str], mode: str = "deterministic") -> PmDag:
    """Remove latent targets, rewiring each target's parents to its children.

    ``deterministic`` requires non-root latent targets and removes them
    outright.  ``indeterministic`` first gives the target an auxiliary root
    parent, so the fresh root takes the target's place pointing at its
    children; node count is preserved.
    """
    if mode not in ("deterministic", "indeterministic"):
        raise GraphError(f"unknown exogenization mode {mode!r}")
    ordered = _ordered_targets(g, targets)
    out = g
    for t in ordered:
        if not out.node(t).is_latent:
            raise NotLatent(t)
        if mode == "deterministic":
            if out.is_root(t):
                raise RootTarget(t)
        else:
            out, _ = augment(out, {t})
        out = _exogenize_one(out, t)
    return out


def _exogenize_one(g: PmDag, target: str) -> PmDag:
    pa = g.parents(target)
    ch = g.children(target)
    nodes = [n for n in g.nodes if n.name != target]
    edges = {(p, c) for p, c in g.edges if target not in (p, c)}
    edges.update((p, c) for p in pa for c in ch)
    return PmDag(nodes, edges)


def coalesce(g: PmDag, targets: Iterable[str]) -> PmDag:
    """Drop each latent-root target whose child set is covered by another root's.

    A target survives when no other current root points to a superset of its
    children.  Targets are processed one at a time in node-list order.
    """
    ordered = _ordered_targets(g, targets)
    out = g
    for t in ordered:
        node = out.node(t)
        if not node.is_latent or not out.is_root(t):
            raise NotLatentRoot(t)
        ch = set(out.children(t))
        covered = any(
            r != t and ch <= set(out.children(r))
            for r in out.roots
        )
        if covered:
            nodes = [n for n in out.nodes if n.name != t]
            edges = {(p, c) for p, c in out.edges if p != t}
            out = PmDag(nodes, edges)
    return out


def mutilate(g: PmDag, targets: Iterable[str]) -> tuple[PmDag, dict[str, str]]:
    """Cut all incoming edges of each visible target and attach a fresh latent parent.

    Re-mutilating a node replaces its previous intervention parent, so the
    operation is idempotent in shape.  Returns the graph and target -> aux map.
    """
    ordered = _ordered_targets(g, targets)
    for t in ordered:
        if not g.node(t).is_visible:
            raise NotVisible(t)
    nodes = list(g.nodes)
    edges = set(g.edges)
    aux_map = {}
    for t in ordered:
        aux = mut_name(t)
        edges = {(p, c) for p, c in edges if c != t}
        if any(n.name == aux for n in nodes):
            # stale intervention parent from an earlier mutilation
            nodes = [n for n in nodes if n.name != aux]
            edges = {(p, c) for p, c in edges if aux not in (p, c)}
        nodes.append(Node(aux, LATENT))
        edges.add((aux, t))
        aux_map[t] = aux
    return PmDag(nodes, edges), aux_map


def is_mdag(g: PmDag) -> bool:
    """True iff every latent is a root and the roots' child sets form an anti-chain."""
    if not g.is_strict:
        return False
    roots = g.roots
    child_sets = {r: set(g.children(r)) for r in roots}
    for a in roots:
        for b in roots:
            if a != b and child_sets[a] <= child_sets[b]:
                return False
    return True


def is_correlation_scenario(g: PmDag) -> bool:
    """True iff every visible node's parents are all latent roots."""
    for name in g.visible_names:
        for p in g.parents(name):
            if not (g.node(p).is_latent and g.is_root(p)):
                return False
    return True


def is_subdag(g1: PmDag, g2: PmDag) -> bool:
    """True iff g1 and g2 share the visible set, and g1's latents and edges embed in g2's."""
    if set(g1.visible_names) != set(g2.visible_names):
        return False
    if not set(g1.latent_names) <= set(g2.latent_names):
        return False
    return g1.edges <= g2.edges


def exogenize_params(g: PmDag, params: StructuralParams, latent: str) -> tuple[PmDag, StructuralParams]:
    """Deterministically exogenize one non-root latent, composing its weights into its children.

    Each child's weight on a parent P becomes w_{P,child} + w_{latent,child} *
    w_{P,latent}; the joint covariance over the remaining nodes is unchanged.
    """
    node = g.node(latent)
    if not node.is_latent:
        raise NotLatent(latent)
    if g.is_root(latent):
        raise RootTarget(latent)
    params.validate_for(g)

    new_graph = exogenize(g, {latent}, mode="deterministic")
    edge_w = params.to_edge_dict(g)
    composed = {}
    for child in g.children(latent):
        w_lc = edge_w[(latent, child)]
        for p in g.parents(latent):
            key = (p, child)
            composed[key] = edge_w.get(key, 0.0) + w_lc * edge_w[(p, latent)]
    merged = {k: v for k, v in edge_w.items() if latent not in k}
    merged.update(composed)
    return new_graph, StructuralParams.from_edge_dict(new_graph, merged)
