import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ptran.inference import PosteriorState
from ptran.model import ModelConfig, init_parameters

settings.register_profile("ci", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


def random_config(rng, **fixed):
    """A small random configuration covering every structural switch."""
    kw = dict(
        d=int(rng.integers(2, 4)),
        h=int(rng.integers(1, 3)),
        T_iters=int(rng.integers(1, 4)),
        gamma=int(rng.integers(0, 2)),
        distance=bool(rng.integers(2)),
        decomposition=str(rng.choice(["full", "uv", "uvw"])),
        rank=int(rng.integers(1, 3)),
        use_root=bool(rng.integers(2)),
        d_root=int(rng.integers(1, 3)),
        global_variant=str(rng.choice(["none", "all_dep", "dep_split", "single_split"])),
        m=int(rng.integers(1, 3)),
        lambda_Z=float(rng.uniform(0.5, 2.0)),
        lambda_H=float(rng.uniform(0.3, 1.5)),
        alpha_Z=float(rng.uniform(0.3, 1.0)),
        alpha_H=float(rng.uniform(0.3, 1.0)),
        beta_Z=float(rng.uniform(0.0, 0.6)),
        beta_H=float(rng.uniform(0.0, 0.6)),
        use_async=bool(rng.integers(2)),
        use_tensorized="scalar",
    )
    kw.update(fixed)
    return ModelConfig(**kw)


def random_params(config, vocab=6, seed=0, std=0.8):
    return init_parameters(config, vocab, seed=seed, std=std, dtype=np.float64).tensors


def random_state(rng, cfg, n):
    """An arbitrary interior point of the product of simplices (respecting the head domain)."""
    st = PosteriorState(qz=rng.dirichlet(np.ones(cfg.d), size=n))
    ncol = n + int(cfg.use_root) + (cfg.m if cfg.global_variant == "all_dep" else 0)
    if ncol > 1 or n > 1:
        qh = rng.dirichlet(np.ones(ncol), size=(cfg.h, n))
        qh[:, np.arange(n), np.arange(n)] = 0.0
        live = qh.sum(-1, keepdims=True)
        if np.all(live > 0):
            st.qh = qh / live
            st.hmsg = np.zeros_like(st.qh)
    if cfg.use_root:
        st.qroot = rng.dirichlet(np.ones(cfg.d_root))
        st.rmsg = np.zeros(cfg.d_root)
    if cfg.global_variant == "dep_split":
        st.qg = rng.dirichlet(np.ones(cfg.m), size=(cfg.h, n))
    elif cfg.global_variant == "single_split":
        st.qg = rng.dirichlet(np.ones(cfg.m), size=n)
    st.zmsg = np.zeros((n, cfg.d))
    return st


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Lines recorded by the acceptance suite, printed once at the end of the run.
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
