import pytest

from pmdag.graph import validate


@pytest.fixture
def bow():
    """Plain bow: latent A confounds X and Y, with the direct edge X -> Y."""
    return validate(
        [("A", "latent"), ("X", "visible"), ("Y", "visible")],
        [("A", "X"), ("A", "Y"), ("X", "Y")],
    )


@pytest.fixture
def chain3():
    """L0 -> L -> X with a latent mid-node; the smallest non-strict graph."""
    return validate(
        [("L0", "latent"), ("L", "latent"), ("X", "visible")],
        [("L0", "L"), ("L", "X")],
    )


def random_small_graph(rng, max_v=4):
    """A small random strict graph, quiet about clamped edge budgets."""
    import warnings

    from pmdag.generate import GenSpec, random_pmdag

    v = int(rng.integers(2, max_v + 1))
    spec = GenSpec(v=v, l_star=float(rng.uniform(0.0, 0.6)),
                   e_star=float(rng.uniform(0.2, 1.0)), seed=int(rng.integers(2**31)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return random_pmdag(spec)


def demote_one_visible(g, rng):
    """Relabel a random visible node with children as latent (makes a non-strict graph)."""
    from pmdag.graph import PmDag

    candidates = [n.name for n in g.nodes if n.is_visible and g.children(n.name)]
    if not candidates:
        return None
    pick = candidates[int(rng.integers(len(candidates)))]
    nodes = [(n.name, "latent" if n.name == pick else n.role) for n in g.nodes]
    return PmDag(nodes, g.edges), pick


def random_params(g, rng):
    from pmdag.graph import StructuralParams

    return StructuralParams({
        name: rng.standard_normal(len(g.parents(name))) for name in g.nonroots
    })
