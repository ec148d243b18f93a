import pytest

from ergwalk.environments import EnvSpec, EnvironmentEnsemble


def bdp_spec(mu, lam, mode="homogeneous", **kw):
    d = {"model": "bdp", "mode": mode, "sites": [{"mu": list(mu), "lam": list(lam)}]}
    d.update(kw)
    return EnvSpec.from_dict(d)


def rwre_spec(support, mode="homogeneous", **kw):
    d = {"model": "rwre", "mode": mode,
         "laws": [{"support": {str(k): v for k, v in support.items()}}]}
    d.update(kw)
    return EnvSpec.from_dict(d)


@pytest.fixture
def drift2_env():
    """Rates (mu2, mu1, lam1, lam2) = (1, 1, 1, 2): mean displacement rate 2."""
    return EnvironmentEnsemble(bdp_spec([1.0, 1.0], [1.0, 2.0]), 0)


@pytest.fixture
def balanced_env():
    """All rates one: zero mean displacement."""
    return EnvironmentEnsemble(bdp_spec([1.0, 1.0], [1.0, 1.0]), 0)


@pytest.fixture
def nn_walk_env():
    """Nearest-neighbor walk law p=0.7 right, q=0.3 left."""
    return EnvironmentEnsemble(rwre_spec({1: 0.7, -1: 0.3}), 0)


def random_right_sites(rng, n):
    """Random elliptic sites with a safely right-transient ensemble."""
    sites = []
    for _ in range(n):
        mu = rng.uniform(0.5, 1.5, size=2)
        lam1 = rng.uniform(0.5, 1.5)
        lam2 = rng.uniform(1.5, 3.0)
        sites.append({"mu": mu.tolist(), "lam": [float(lam1), float(lam2)]})
    return sites


def random_right_env(rng, n, origin):
    spec = EnvSpec.from_dict({"model": "bdp", "mode": "table",
                              "sites": random_right_sites(rng, n),
                              "origin": origin})
    return EnvironmentEnsemble(spec, 0)
