"""Random graph generation, the eight canonical benchmark graphs, and ground truth.

Random graphs follow the size formulas of the benchmark setup: ``v`` visible
nodes, ``l = l*/(1-l*) v + v`` latents of which the first ``v`` are auxiliary
noise parents (one guaranteed edge each), and an edge budget
``e = (l v + v(v-1)/2 + v) e*`` filled by uniform draws without replacement
from the acyclic pool.  The budget formula can exceed the pool of distinct
edges at high density; the draw is then clamped with a warning.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from pmdag.gauss import CovMatrix, sample_covariance
from pmdag.graph import (
    LATENT,
    VISIBLE,
    GraphError,
    Node,
    PmDag,
    StructuralParams,
    augment,
    exogenize,
    validate,
)
from pmdag.solver import joint_cov


class InfeasibleBudget(UserWarning):
    """The requested edge count exceeds the pool of distinct acyclic edges."""


class UnknownName(GraphError):
    def __init__(self, name):
        super().__init__(f"unknown canonical graph {name!r}; choose from {sorted(CANONICAL_BUILDERS)}")


@dataclass(frozen=True)
class GenSpec:
    """Size parameters of a random graph: visible count, latent abundance, edge density."""

    v: int
    l_star: float = 0.0
    e_star: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.v < 1:
            raise GraphError("v must be a positive integer")
        if not 0.0 <= self.l_star < 1.0:
            raise GraphError("l_star must lie in [0, 1)")
        if not 0.0 <= self.e_star <= 1.0:
            raise GraphError("e_star must lie in [0, 1]")


def latent_count(v: int, l_star: float) -> int:
    """l = l*/(1-l*) v + v, rounded to the nearest integer."""
    return int(round(l_star / (1.0 - l_star) * v + v))


def edge_budget(v: int, l_star: float, e_star: float) -> int:
    """e = (l v + v(v-1)/2 + v) e*, rounded to the nearest integer."""
    l = latent_count(v, l_star)
    return int(round((l * v + v * (v - 1) / 2 + v) * e_star))


def random_pmdag(spec: GenSpec) -> PmDag:
    """Random strict graph with guaranteed per-visible auxiliary noise parents.

    Beyond the ``v`` auxiliary edges, edges are drawn uniformly without
    replacement from all remaining latent->visible pairs plus the
    visible->visible pairs compatible with a random topological order, until
    the budget is met or the pool runs dry (clamped, with an
    ``InfeasibleBudget`` warning).
    """
    rng = np.random.default_rng(spec.seed)
    v, l = spec.v, latent_count(spec.v, spec.l_star)
    visibles = [f"V{i}" for i in range(v)]
    latents = [f"L{j}" for j in range(l)]
    nodes = [Node(name, LATENT) for name in latents] + [Node(name, VISIBLE) for name in visibles]

    edges = {(latents[i], visibles[i]) for i in range(v)}
    order = rng.permutation(v)
    pool = [
        (latents[j], visibles[i])
        for j in range(l) for i in range(v)
        if (latents[j], visibles[i]) not in edges
    ]
    pool += [
        (visibles[order[a]], visibles[order[b]])
        for a in range(v) for b in range(a + 1, v)
    ]

    budget = edge_budget(spec.v, spec.l_star, spec.e_star)
    extra = max(budget - len(edges), 0)
    if extra > len(pool):
        warnings.warn(
            f"edge budget {budget} exceeds the {len(pool) + len(edges)} distinct edges "
            f"available; clamping", InfeasibleBudget, stacklevel=2)
        extra = len(pool)
    if extra:
        chosen = rng.choice(len(pool), size=extra, replace=False)
        edges.update(pool[k] for k in chosen)
    return validate(nodes, edges, strict=True)


# --- canonical graphs ---------------------------------------------------------


def _premarginal(visibles, visible_edges, confounders):
    """Assemble a strict graph: named confounders plus one noise root per visible."""
    nodes = [Node(name, LATENT) for name in confounders]
    nodes += [Node(f"E_{v}", LATENT) for v in visibles]
    nodes += [Node(v, VISIBLE) for v in visibles]
    edges = set(visible_edges)
    for name, children in confounders.items():
        edges.update((name, c) for c in children)
    edges.update((f"E_{v}", v) for v in visibles)
    return validate(nodes, edges, strict=True)


def _backdoor():
    return _premarginal(["Z", "X", "Y"], [("Z", "X"), ("Z", "Y"), ("X", "Y")], {})


def _frontdoor():
    return _premarginal(["X", "M", "Y"], [("X", "M"), ("M", "Y")], {"U_XY": ("X", "Y")})


def _m():
    return _premarginal(["X", "Z", "Y"], [("X", "Y")],
                        {"U_XZ": ("X", "Z"), "U_ZY": ("Z", "Y")})


def _napkin():
    return _premarginal(["W", "R", "X", "Y"], [("W", "R"), ("R", "X"), ("X", "Y")],
                        {"U_WX": ("W", "X"), "U_WY": ("W", "Y")})


def _bow():
    return _premarginal(["X", "Y"], [("X", "Y")], {"U_XY": ("X", "Y")})


def _extended_bow():
    return _premarginal(["X", "Z", "Y"], [("X", "Z"), ("Z", "Y")], {"U_XZ": ("X", "Z")})


def _iv():
    return _premarginal(["Z", "X", "Y"], [("Z", "X"), ("X", "Y")], {"U_XY": ("X", "Y")})


def _bad_m():
    # the M structure plus a direct treatment-outcome confounder, which is
    # what breaks identifiability (the bow sits inside)
    return _premarginal(["X", "Z", "Y"], [("X", "Y")],
                        {"U_XZ": ("X", "Z"), "U_ZY": ("Z", "Y"), "U_XY": ("X", "Y")})


CANONICAL_BUILDERS = {
    "backdoor": _backdoor,
    "frontdoor": _frontdoor,
    "m": _m,
    "napkin": _napkin,
    "iv": _iv,
    "bow": _bow,
    "extended_bow": _extended_bow,
    "bad_m": _bad_m,
}

IDENTIFIABLE_CANONICAL = ("backdoor", "frontdoor", "m", "napkin", "iv")
NON_IDENTIFIABLE_CANONICAL = ("bow", "extended_bow", "bad_m")


def canonical_names() -> tuple[str, ...]:
    return tuple(sorted(CANONICAL_BUILDERS))


def canonical(name: str) -> PmDag:
    """One of the eight benchmark graphs, already in pre-marginalized form.

    Every visible node carries a private noise root and every confounder is a
    latent root, so the graphs are strict and directly fittable.  The
    treatment is ``X`` and the outcome ``Y`` in all of them.
    """
    key = name.strip().lower().replace("-", "_").replace(" ", "_")
    if key not in CANONICAL_BUILDERS:
        raise UnknownName(name)
    return CANONICAL_BUILDERS[key]()


def premarginalize(g: PmDag) -> PmDag:
    """Rebuild a graph in pre-marginalized form.

    Gives every node an auxiliary root parent, then folds each original
    latent into its children; the result is strict, has the same visible set,
    and induces the same visible Gaussian family.
    """
    original_latents = g.latent_names
    augmented, _ = augment(g, g.names)
    return exogenize(augmented, original_latents, mode="deterministic")


def ground_truth(g: PmDag, seed: int, samples: int | None = None) -> tuple[StructuralParams, CovMatrix]:
    """Standard-normal random edge weights and the induced visible covariance.

    The covariance is exact by default, isolating optimization error from
    sampling error; pass ``samples`` to substitute a biased sample covariance
    from that many Monte Carlo draws instead.
    """
    rng = np.random.default_rng(seed)
    weights = {}
    for name in g.nonroots:
        weights[name] = rng.standard_normal(len(g.parents(name)))
    params = StructuralParams(weights)
    vis = g.visible_names
    if samples is None:
        return params, joint_cov(g, params).restrict(vis)

    roots = g.roots
    draws = {name: rng.standard_normal(samples) for name in roots}
    values = {}
    for name in g.topological_order():
        if name in draws:
            values[name] = draws[name]
        else:
            values[name] = sum(
                w * values[p] for p, w in zip(g.parents(name), params.weights[name]))
    obs = np.column_stack([values[name] for name in vis])
    return params, sample_covariance(obs, vis)
