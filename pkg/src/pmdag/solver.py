"""Layered covariance solver: forward passes, exact backpropagation, and the fit loop.

Three equivalent computations of the induced covariance and its weight
gradients are provided: ``covariance`` (per-layer congruence products),
``accumulation`` (running weight products), and ``reduced`` (global node-pair
tables whose footprint is independent of depth).  Gradients are the true
entrywise matrix derivatives, pinned by central finite differences; any
constant factor a differing convention would introduce is absorbed by the
learning rate.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
import scipy.linalg as la

from pmdag.gauss import (
    CovMatrix,
    GaussianDist,
    LabelMismatch,
    NotPositiveDefinite,
    SingularQ,
    kl_gaussian,
    spd_factor,
)
from pmdag.graph import GraphError, PmDag, StructuralParams
from pmdag.sync import MaskSet, Synchronization, build_masks, synchronize

LOSSES = ("kl", "bha")
METHODS = ("covariance", "accumulation", "reduced")
OPTIMIZERS = ("adamax", "sgd")


class SolverError(ValueError):
    pass


class ShapeMismatch(SolverError):
    pass


class AsymmetricSeed(SolverError):
    pass


class NonFiniteGradient(SolverError):
    pass


class TargetNotSPD(SolverError):
    pass


class NegativeVariance(SolverError):
    pass


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed derived from integer parts; index-based, not order-of-execution."""
    state = np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0]
    return int(state >> np.uint64(1))


# --- weights --------------------------------------------------------------


def init_weights(sync: Synchronization, masks: MaskSet, seed: int) -> list[np.ndarray]:
    """Constant pattern plus seeded standard-normal draws on the trainable entries."""
    rng = np.random.default_rng(seed)
    weights = []
    for mask, const in zip(masks.trainable, masks.constants):
        weights.append(const + mask * rng.standard_normal(mask.shape))
    return weights


def _check_shapes(sync: Synchronization, weights) -> None:
    if len(weights) != sync.depth - 1:
        raise ShapeMismatch(f"expected {sync.depth - 1} weight matrices, got {len(weights)}")
    for l in range(1, sync.depth):
        want = (len(sync.layers[l - 1]), len(sync.layers[l]))
        if weights[l - 1].shape != want:
            raise ShapeMismatch(f"layer {l} weight shape {weights[l - 1].shape} != {want}")


def _check_seed(sync: Synchronization, dsigma) -> np.ndarray:
    dsigma = np.asarray(dsigma, dtype=float)
    n = len(sync.layers[-1])
    if dsigma.shape != (n, n):
        raise ShapeMismatch(f"seed shape {dsigma.shape} does not match last layer size {n}")
    scale = max(1.0, float(np.abs(dsigma).max()))
    if float(np.abs(dsigma - dsigma.T).max()) > 1e-9 * scale:
        raise AsymmetricSeed("the covariance-gradient seed must be symmetric")
    return (dsigma + dsigma.T) / 2.0


# --- layered forward / backward -------------------------------------------


def forward_cov(sync: Synchronization, weights, check: bool = False):
    """Propagate the layer covariance: Lambda_l = Sigma_{l-1} W_l, Sigma_l = W_l^T Lambda_l.

    Returns (final covariance, Lambda list, Sigma list incl. the identity at
    layer 0).  With ``check=True``, asserts that persisting entries alternate
    (lambda == sigma) and are preserved bitwise across layer boundaries.
    """
    _check_shapes(sync, weights)
    sigma = np.eye(len(sync.layers[0]))
    sigmas = [sigma]
    lams = []
    for l in range(1, sync.depth):
        w = weights[l - 1]
        lam = sigma @ w
        new_sigma = w.T @ lam
        if check:
            _check_preservation(sync, l, sigma, lam, new_sigma)
        lams.append(lam)
        sigmas.append(new_sigma)
        sigma = new_sigma
    return sigma, lams, sigmas


def _check_preservation(sync, l, prev_sigma, lam, new_sigma):
    prev = sync.layers[l - 1]
    cur = sync.layers[l]
    prev_pos = {idx: i for i, idx in enumerate(prev)}
    cur_pos = {idx: i for i, idx in enumerate(cur)}
    for p in prev:
        if p not in cur_pos:
            continue
        for r in cur:
            # alternation: a persisting row carries its covariance into Lambda
            assert lam[prev_pos[p], cur_pos[r]] == new_sigma[cur_pos[p], cur_pos[r]]
        for q in prev:
            if q in cur_pos:
                assert new_sigma[cur_pos[p], cur_pos[q]] == prev_sigma[prev_pos[p], prev_pos[q]]


def forward_acc(sync: Synchronization, weights):
    """Accumulate weight products; the final covariance is acc^T acc.

    Returns (final covariance, accumulated list A_0..A_{L-1} with A_0 = I).
    """
    _check_shapes(sync, weights)
    acc = np.eye(len(sync.layers[0]))
    accs = [acc]
    for w in weights:
        acc = acc @ w
        accs.append(acc)
    return acc.T @ acc, accs


def backward_cov(sync: Synchronization, masks: MaskSet, weights, lams, dsigma):
    """Per-layer masked weight gradients from the covariance-gradient seed.

    The seed is d(loss)/d(Sigma_final) treated entrywise; the exact recursion
    is dW_l = 2 M_l o (Lambda_l G_l) with G_{l-1} = W_l G_l W_l^T.
    """
    _check_shapes(sync, weights)
    g = _check_seed(sync, dsigma)
    grads = [None] * len(weights)
    for l in range(sync.depth - 1, 0, -1):
        w = weights[l - 1]
        grads[l - 1] = 2.0 * masks.trainable[l - 1] * (lams[l - 1] @ g)
        if l > 1:
            g = w @ g @ w.T
    return grads


def backward_acc(sync: Synchronization, masks: MaskSet, weights, accs, dsigma):
    """Weight gradients via the accumulated products: dW_l = 2 M_l o (A_{l-1}^T Omega_l)."""
    _check_shapes(sync, weights)
    g = _check_seed(sync, dsigma)
    omega = accs[-1] @ g
    grads = [None] * len(weights)
    for l in range(sync.depth - 1, 0, -1):
        grads[l - 1] = 2.0 * masks.trainable[l - 1] * (accs[l - 1].T @ omega)
        if l > 1:
            omega = omega @ weights[l - 1].T
    return grads


def layered_entry_count(sync: Synchronization) -> int:
    """Matrix entries the layered forward stores for its backward pass."""
    total = len(sync.layers[0]) ** 2
    for l in range(1, sync.depth):
        total += len(sync.layers[l - 1]) * len(sync.layers[l])  # Lambda_l
        total += len(sync.layers[l]) ** 2  # Sigma_l
    return total


# --- reduced method --------------------------------------------------------


class AllocationCounter:
    """Tracks live and peak auxiliary entries of the reduced method."""

    __slots__ = ("current", "peak")

    def __init__(self):
        self.current = 0
        self.peak = 0

    def add(self, n: int) -> None:
        self.current += n
        if self.current > self.peak:
            self.peak = self.current

    def release(self, n: int) -> None:
        self.current -= n


class ReducedState:
    """Global sigma and lambda tables keyed (any node, non-root node).

    Entries are layer-independent once written; writes follow a
    first-writer-wins discipline, and ``verify=True`` re-checks that a slot
    is never rewritten.
    """

    __slots__ = ("sync", "nonroot_col", "is_root", "sigma", "lam", "verify")

    def __init__(self, sync: Synchronization, counter: AllocationCounter | None = None, verify: bool = False):
        g = sync.graph
        self.sync = sync
        self.is_root = np.array([g.is_root(n.name) for n in g.nodes])
        nonroots = [i for i, r in enumerate(self.is_root) if not r]
        self.nonroot_col = {idx: c for c, idx in enumerate(nonroots)}
        n = len(g.nodes)
        m = len(nonroots)
        self.sigma = np.full((n, m), np.nan)
        self.lam = np.full((n, m), np.nan)
        self.verify = verify
        if counter is not None:
            counter.add(2 * n * m)

    def sig(self, p: int, q: int) -> float:
        if self.is_root[p] and self.is_root[q]:
            return 1.0 if p == q else 0.0
        if not self.is_root[q]:
            return self.sigma[p, self.nonroot_col[q]]
        return self.sigma[q, self.nonroot_col[p]]

    def _write(self, table, row, col, value):
        if self.verify and not np.isnan(table[row, col]):
            raise AssertionError("table slot written twice; preservation violated")
        table[row, col] = value

    def write_sigma(self, p: int, q: int, value: float) -> None:
        if not self.is_root[q]:
            self._write(self.sigma, p, self.nonroot_col[q], value)
        if not self.is_root[p] and p != q:
            self._write(self.sigma, q, self.nonroot_col[p], value)

    def visible_cov(self) -> np.ndarray:
        vis = [i for i, node in enumerate(self.sync.graph.nodes) if node.is_visible]
        out = np.empty((len(vis), len(vis)))
        for a, i in enumerate(vis):
            for b, j in enumerate(vis):
                out[a, b] = self.sig(i, j)
        return (out + out.T) / 2.0


def edge_weight_map(masks: MaskSet, weights) -> dict[tuple[int, int], float]:
    """Edge-indexed view of the trainable entries of a weight stack."""
    return {
        (p, c): float(weights[l - 1][r, col])
        for (p, c, l, r, col) in masks.edges
    }


def forward_reduced(
    sync: Synchronization,
    edge_weights: dict[tuple[int, int], float],
    counter: AllocationCounter | None = None,
    verify: bool = False,
) -> ReducedState:
    """Fill the global covariance tables once per node pair.

    ``edge_weights`` maps (parent index, child index) to the edge weight; the
    tables replace the per-layer Sigma/Lambda stacks of the layered methods.
    """
    g = sync.graph
    state = ReducedState(sync, counter=counter, verify=verify)
    if counter is not None:
        counter.add(len(edge_weights))
    parent_idx = {
        g.index(name): [g.index(p) for p in g.parents(name)] for name in g.names
    }
    for l in range(1, sync.depth):
        prev = sync.layers[l - 1]
        cur = sync.layers[l]
        new_nodes = [j for j in cur if sync.first_appearance[j] == l]
        for j in new_nodes:
            pa = parent_idx[j]
            wj = [edge_weights[(p, j)] for p in pa]
            col = state.nonroot_col[j]
            for p in prev:
                state._write(state.lam, p, col, sum(state.sig(p, u) * w for u, w in zip(pa, wj)))
        for j in new_nodes:
            colj = state.nonroot_col[j]
            for q in cur:
                if q == j:
                    value = sum(edge_weights[(p, j)] * state.lam[p, colj] for p in parent_idx[j])
                    state.write_sigma(j, j, value)
                elif sync.first_appearance[q] == l:
                    if q < j:
                        continue  # unordered pair handled once
                    value = sum(edge_weights[(p, q)] * state.lam[p, colj] for p in parent_idx[q])
                    state.write_sigma(q, j, value)
                else:
                    state.write_sigma(q, j, state.lam[q, colj])
    return state


def backward_reduced(
    sync: Synchronization,
    edge_weights: dict[tuple[int, int], float],
    state: ReducedState,
    dsigma,
    counter: AllocationCounter | None = None,
) -> dict[tuple[int, int], float]:
    """Per-edge gradients; covariance-gradient tables live one layer at a time.

    Pairs of two root nodes are skipped throughout: root rows persist as
    identity carries, so such entries feed neither any trainable-weight
    gradient nor any kept entry of an earlier layer.
    """
    g = _check_seed(sync, dsigma)
    graph = sync.graph
    parent_idx = {
        graph.index(name): [graph.index(p) for p in graph.parents(name)] for name in graph.names
    }
    is_root = state.is_root

    def pair(a, b):
        return (a, b) if a <= b else (b, a)

    last = sync.layers[-1]
    grad_sigma: dict[tuple[int, int], float] = {}
    for i, a in enumerate(last):
        for jj, b in enumerate(last[i:], start=i):
            if is_root[a] and is_root[b]:
                continue
            grad_sigma[pair(a, b)] = g[i, jj]
    if counter is not None:
        counter.add(len(grad_sigma))

    edge_grads = {key: 0.0 for key in edge_weights}
    if counter is not None:
        counter.add(len(edge_grads))

    def gval(u, v):
        return grad_sigma.get(pair(u, v), 0.0)

    for l in range(sync.depth - 1, 0, -1):
        prev = sync.layers[l - 1]
        cur = sync.layers[l]
        cur_set = set(cur)
        new_nodes = [j for j in cur if sync.first_appearance[j] == l]
        new_children: dict[int, list[int]] = {}
        for j in new_nodes:
            for p in parent_idx[j]:
                new_children.setdefault(p, []).append(j)

        for j in new_nodes:
            colj = state.nonroot_col[j]
            for p in parent_idx[j]:
                total = 0.0
                for u in cur:
                    if is_root[u] and is_root[j]:
                        continue
                    guj = gval(u, j)
                    if guj == 0.0:
                        continue
                    if sync.first_appearance[u] == l:
                        lam_pu = state.lam[p, state.nonroot_col[u]]
                    else:
                        lam_pu = state.sig(p, u)
                    total += lam_pu * guj
                edge_grads[(p, j)] += 2.0 * total

        if l == 1:
            break

        prev_grad: dict[tuple[int, int], float] = {}
        for i, a in enumerate(prev):
            a_new = new_children.get(a, ())
            a_persists = a in cur_set
            for b in prev[i:]:
                if is_root[a] and is_root[b]:
                    continue
                total = 0.0
                if a_persists and b in cur_set:
                    total += gval(a, b)
                if a_persists:
                    for q in new_children.get(b, ()):
                        total += edge_weights[(b, q)] * gval(a, q)
                if b in cur_set:
                    for p in a_new:
                        total += edge_weights[(a, p)] * gval(p, b)
                for p in a_new:
                    w_ap = edge_weights[(a, p)]
                    for q in new_children.get(b, ()):
                        total += w_ap * edge_weights[(b, q)] * gval(p, q)
                prev_grad[pair(a, b)] = total
        if counter is not None:
            counter.add(len(prev_grad))
            counter.release(len(grad_sigma))
        grad_sigma = prev_grad

    return edge_grads


# --- optimizers -------------------------------------------------------------


@dataclass(frozen=True)
class SgdState:
    lr: float


@dataclass(frozen=True)
class AdamaxState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    t: int = 0
    m: tuple = ()
    u: tuple = ()


def make_optimizer_state(config: "FitConfig"):
    if config.optimizer == "sgd":
        return SgdState(lr=config.lr)
    return AdamaxState(lr=config.lr, beta1=config.beta1, beta2=config.beta2)


def optimize_step(weights, grads, state):
    """One optimizer update on the weight stack; constants carry zero gradient.

    Returns (new weights, new state).  Raises NonFiniteGradient on nan/inf
    gradients.
    """
    for grad in grads:
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradient("gradient contains nan or inf")
    if isinstance(state, SgdState):
        return [w - state.lr * g for w, g in zip(weights, grads)], state
    if isinstance(state, AdamaxState):
        t = state.t + 1
        m_prev = state.m if state.m else tuple(np.zeros_like(g) for g in grads)
        u_prev = state.u if state.u else tuple(np.zeros_like(g) for g in grads)
        new_w, new_m, new_u = [], [], []
        bias = 1.0 - state.beta1 ** t
        for w, g, m0, u0 in zip(weights, grads, m_prev, u_prev):
            m = state.beta1 * m0 + (1.0 - state.beta1) * g
            u = np.maximum(state.beta2 * u0, np.abs(g))
            step = np.where(u > 0.0, (state.lr / bias) * m / np.where(u > 0.0, u, 1.0), 0.0)
            new_w.append(w - step)
            new_m.append(m)
            new_u.append(u)
        return new_w, replace(state, t=t, m=tuple(new_m), u=tuple(new_u))
    raise SolverError(f"unknown optimizer state {type(state).__name__}")


# --- full-system covariance oracle ------------------------------------------


def joint_cov(g: PmDag, params: StructuralParams, root_variances: dict[str, float] | None = None) -> CovMatrix:
    """Covariance over all nodes by root-to-node path accumulation.

    Each node's column collects its linear coefficients on the root vector in
    topological order; the covariance is the Gram matrix of those columns.
    Serves as the brute-force reference for every forward method.
    """
    params.validate_for(g)
    roots = g.roots
    root_pos = {name: i for i, name in enumerate(roots)}
    scale = np.ones(len(roots))
    if root_variances is not None:
        for name, var in root_variances.items():
            if var < 0:
                raise NegativeVariance(f"variance of root {name!r} is negative")
            scale[root_pos[name]] = math.sqrt(var)
    cols = {}
    for name in g.topological_order():
        if g.is_root(name):
            col = np.zeros(len(roots))
            col[root_pos[name]] = scale[root_pos[name]]
            cols[name] = col
        else:
            vec = params.weights[name]
            col = np.zeros(len(roots))
            for p, w in zip(g.parents(name), vec):
                col += w * cols[p]
            cols[name] = col
    basis = np.column_stack([cols[name] for name in g.names])
    return CovMatrix(g.names, basis.T @ basis)


def standardize(g: PmDag, params: StructuralParams, root_variances: dict[str, float]) -> StructuralParams:
    """Fold root variances into the outgoing weights so every root is standard normal."""
    params.validate_for(g)
    for name, var in root_variances.items():
        if var < 0:
            raise NegativeVariance(f"variance of root {name!r} is negative")
    roots = set(g.roots)
    edge_w = params.to_edge_dict(g)
    out = {}
    for (p, c), w in edge_w.items():
        if p in roots:
            out[(p, c)] = w * math.sqrt(root_variances.get(p, 1.0))
        else:
            out[(p, c)] = w
    return StructuralParams.from_edge_dict(g, out)


# --- the fit loop ------------------------------------------------------------


@dataclass(frozen=True)
class FitConfig:
    """Solver settings; defaults follow the reference experiment setup."""

    loss: str = "kl"
    method: str = "covariance"
    optimizer: str = "adamax"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    max_iters: int = 12000
    min_improvement: float = 1e-12
    seed: int = 0
    restarts: int = 10
    kl_tol: float = 1e-5

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise SolverError(f"loss must be one of {LOSSES}")
        if self.method not in METHODS:
            raise SolverError(f"method must be one of {METHODS}")
        if self.optimizer not in OPTIMIZERS:
            raise SolverError(f"optimizer must be one of {OPTIMIZERS}")
        if self.lr <= 0:
            raise SolverError("learning rate must be positive")
        if self.max_iters < 1:
            raise SolverError("max_iters must be at least 1")
        if self.min_improvement < 0:
            raise SolverError("min_improvement must be nonnegative")
        if self.restarts < 1:
            raise SolverError("restarts must be at least 1")


@dataclass
class FitReport:
    """Audit record of one fit: traces, final divergences, and stop diagnostics."""

    loss_trace: np.ndarray
    kl_trace: np.ndarray
    final_kl_model_target: float
    final_kl_target_model: float
    converged: bool
    stop_reason: str
    iterations: int
    seed: int
    restarts_used: int
    wall_time: float
    loss: str
    method: str


def _loss_and_seed(loss: str, sigma_vis: np.ndarray, target: np.ndarray,
                   target_inv: np.ndarray, target_logdet: float):
    """Surrogate loss, covariance-gradient seed, and true KL, from one factorization."""
    n = sigma_vis.shape[0]
    lower, logdet_s = spd_factor(sigma_vis)
    eye = np.eye(n)
    sigma_inv = la.cho_solve((lower, True), eye)
    trace = float((target_inv * sigma_vis).sum())
    kl_mt = 0.5 * (trace - n + target_logdet - logdet_s)
    if loss == "kl":
        err = trace - logdet_s
        seed = target_inv - sigma_inv
    else:
        lsum, logdet_sum = spd_factor(sigma_vis + target)
        err = n * math.log(0.5) + logdet_sum - 0.5 * logdet_s
        seed = la.cho_solve((lsum, True), eye) - 0.5 * sigma_inv
    seed = (seed + seed.T) / 2.0
    return err, seed, kl_mt


def extract_params(g: PmDag, masks: MaskSet, weights) -> StructuralParams:
    """Read each edge weight at the child's first appearance."""
    edge_w = {}
    for (p, c, l, r, col) in masks.edges:
        edge_w[(g.nodes[p].name, g.nodes[c].name)] = float(weights[l - 1][r, col])
    return StructuralParams.from_edge_dict(g, edge_w)


def weights_from_params(g: PmDag, masks: MaskSet, params: StructuralParams) -> list[np.ndarray]:
    """Materialize the weight stack holding the given edge weights (inverse of extract_params)."""
    params.validate_for(g)
    edge_w = params.to_edge_dict(g)
    weights = [const.copy() for const in masks.constants]
    for (p, c, l, r, col) in masks.edges:
        weights[l - 1][r, col] = edge_w[(g.nodes[p].name, g.nodes[c].name)]
    return weights


def _run_single(g, sync, masks, target, target_inv, target_logdet, vis_positions,
                config, seed, iter_hook):
    weights = init_weights(sync, masks, seed)
    state = make_optimizer_state(config)
    n_last = len(sync.layers[-1])
    loss_trace = []
    kl_trace = []
    prev_err = math.inf
    stop_reason = "max_iters"
    converged = False

    for i in range(1, config.max_iters + 1):
        if config.method == "covariance":
            sigma_last, lams, _ = forward_cov(sync, weights)
            ctx = lams
            sigma_vis = sigma_last[np.ix_(vis_positions, vis_positions)]
        elif config.method == "accumulation":
            sigma_last, accs = forward_acc(sync, weights)
            ctx = accs
            sigma_vis = sigma_last[np.ix_(vis_positions, vis_positions)]
        else:
            edge_w = edge_weight_map(masks, weights)
            red = forward_reduced(sync, edge_w)
            ctx = (edge_w, red)
            sigma_vis = red.visible_cov()

        try:
            err, seed_vis, kl_mt = _loss_and_seed(
                config.loss, sigma_vis, target, target_inv, target_logdet)
        except NotPositiveDefinite:
            stop_reason = "singular_model"
            break
        loss_trace.append(err)
        kl_trace.append(kl_mt)
        if iter_hook is not None:
            iter_hook(i, extract_params(g, masks, weights))
        if kl_mt <= config.kl_tol:
            converged = True
            stop_reason = "kl_threshold"
            break
        if abs(err - prev_err) <= config.min_improvement:
            stop_reason = "loss_plateau"
            break
        prev_err = err

        if config.method == "reduced":
            edge_w, red = ctx
            seed_full = np.zeros((n_last, n_last))
            seed_full[np.ix_(vis_positions, vis_positions)] = seed_vis
            edge_grads = backward_reduced(sync, edge_w, red, seed_full)
            grads = [np.zeros_like(w) for w in weights]
            for (p, c, l, r, col) in masks.edges:
                grads[l - 1][r, col] = edge_grads[(p, c)]
        else:
            seed_full = np.zeros((n_last, n_last))
            seed_full[np.ix_(vis_positions, vis_positions)] = seed_vis
            if config.method == "covariance":
                grads = backward_cov(sync, masks, weights, ctx, seed_full)
            else:
                grads = backward_acc(sync, masks, weights, ctx, seed_full)
        weights, state = optimize_step(weights, grads, state)

    params = extract_params(g, masks, weights)
    return params, loss_trace, kl_trace, converged, stop_reason


def fit(g: PmDag, target: CovMatrix, config: FitConfig | None = None,
        iter_hook: Callable | None = None, plan=None) -> tuple[StructuralParams, FitReport]:
    """Fit the structural weights so the induced visible covariance matches the target.

    Runs ``config.restarts`` independently seeded gradient descents, stopping
    early once one reaches the true-KL threshold, and returns the best run by
    final KL(model || target).  Non-convergence is reported through the
    ``converged`` flag, never raised.  ``plan`` optionally forces a custom
    layering; every plan reaches the same optima.

    Rank-deficient targets are admitted through the jitter ladder, but the
    divergence between singular Gaussians is infinite in the strict sense, so
    such a fit can report ``converged`` (against the jittered surrogate) with
    an infinite final KL; that combination flags a degenerate target.
    """
    if config is None:
        config = FitConfig()
    vis = g.visible_names
    if not vis:
        raise GraphError("the graph has no visible nodes to fit")
    if set(target.labels) != set(vis):
        raise LabelMismatch(
            f"target labels {sorted(target.labels)} do not match visible nodes {sorted(vis)}")
    target = target.restrict(vis)
    try:
        target_chol, target_logdet = spd_factor(target.data)
    except NotPositiveDefinite as exc:
        raise TargetNotSPD(str(exc)) from None
    target_inv = la.cho_solve((target_chol, True), np.eye(target.dim))

    sync = synchronize(g, plan=plan)
    masks = build_masks(sync)
    last_names = sync.layer_names(sync.depth - 1)
    vis_positions = [last_names.index(name) for name in vis]

    t0 = time.perf_counter()
    best = None
    restarts_used = 0
    for r in range(config.restarts):
        restarts_used += 1
        run_seed = derive_seed(config.seed, r)
        params, loss_trace, kl_trace, converged, stop_reason = _run_single(
            g, sync, masks, target.data, target_inv, target_logdet,
            vis_positions, config, run_seed, iter_hook)
        final_kl = kl_trace[-1] if kl_trace else math.inf
        if best is None or final_kl < best[0]:
            best = (final_kl, params, loss_trace, kl_trace, converged, stop_reason, run_seed)
        if converged:
            break
    wall = time.perf_counter() - t0

    final_kl, params, loss_trace, kl_trace, converged, stop_reason, run_seed = best
    model = joint_cov(g, params).restrict(vis)
    zero = np.zeros(len(vis))
    kl_mt = kl_gaussian(GaussianDist(zero, model), GaussianDist(zero, target))
    try:
        kl_tm = kl_gaussian(GaussianDist(zero, target), GaussianDist(zero, model))
    except SingularQ:
        kl_tm = math.inf
    report = FitReport(
        loss_trace=np.asarray(loss_trace),
        kl_trace=np.asarray(kl_trace),
        final_kl_model_target=float(kl_mt),
        final_kl_target_model=float(kl_tm),
        converged=converged,
        stop_reason=stop_reason,
        iterations=len(loss_trace),
        seed=run_seed,
        restarts_used=restarts_used,
        wall_time=wall,
        loss=config.loss,
        method=config.method,
    )
    return params, report


# --- result files -------------------------------------------------------------


def fit_result_dict(g: PmDag, params: StructuralParams, report: FitReport) -> dict:
    return {
        "weights": {f"{p}->{c}": w for (p, c), w in sorted(params.to_edge_dict(g).items())},
        "final_kl_model_target": report.final_kl_model_target,
        "final_kl_target_model": report.final_kl_target_model,
        "converged": report.converged,
        "stop_reason": report.stop_reason,
        "seed": report.seed,
        "iterations": report.iterations,
        "restarts_used": report.restarts_used,
        "loss": report.loss,
        "method": report.method,
        "wall_time": report.wall_time,
    }


def save_trace_csv(report: FitReport, path) -> None:
    """Loss trace as CSV: iteration, surrogate loss, true KL."""
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "surrogate_loss", "true_kl"])
        for i, (loss, kl) in enumerate(zip(report.loss_trace, report.kl_trace), start=1):
            writer.writerow([i, repr(float(loss)), repr(float(kl))])
