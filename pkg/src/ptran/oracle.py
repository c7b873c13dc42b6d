"""Brute-force references for tiny instances.

Everything here is written as literal scalar loops over Python floats so it
shares no vectorised code with the engine. Use only on toy sizes.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .inference import PosteriorState
from .model import ModelConfig, clip_distance


class InstanceTooLarge(ValueError):
    pass


def _arr(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def _bank(i: int, j: int, config: ModelConfig) -> int:
    return clip_distance(i, j, config.gamma) if config.distance else 0


def ternary_tables(tensors: Mapping, config: ModelConfig) -> list:
    """T[k][c][a][b] as nested lists, summed factor by factor."""
    K, h, d = config.n_banks, config.h, config.d
    out = [[[[0.0] * d for _ in range(d)] for _ in range(h)] for _ in range(K)]
    if config.decomposition == "full":
        T = _arr(tensors["T"])
        for k, c, a, b in itertools.product(range(K), range(h), range(d), range(d)):
            out[k][c][a][b] = float(T[k, c, a, b])
        return out
    U, V = _arr(tensors["U"]), _arr(tensors["V"])
    W = _arr(tensors["W"]) if config.decomposition == "uvw" else None
    for k, c, a, b in itertools.product(range(K), range(h), range(d), range(d)):
        acc = 0.0
        for l in range(config.rank):
            if W is None:
                acc += float(U[k, a, c, l]) * float(V[k, b, c, l])
            else:
                acc += float(U[k, a, l]) * float(V[k, b, l]) * float(W[c, l])
        out[k][c][a][b] = acc
    return out


def _softmax(values: Sequence[float], scale: float = 1.0) -> list[float]:
    xs = [v / scale for v in values]
    top = max(xs)
    es = [math.exp(x - top) for x in xs]
    tot = sum(es)
    return [e / tot for e in es]


@dataclass
class _Tables:
    T: list
    T_root: np.ndarray | None
    B: np.ndarray | None
    unary: list


def _tables(tensors, sentence, config) -> _Tables:
    S = _arr(tensors["S"])
    return _Tables(
        T=ternary_tables(tensors, config),
        T_root=_arr(tensors["T_root"]) if config.use_root else None,
        B=_arr(tensors["B"]) if config.global_variant != "none" else None,
        unary=[[float(v) for v in S[w]] for w in sentence],
    )


def _columns(n: int, config: ModelConfig) -> list:
    """Head candidates in column order: ("word", j) / ("root",) / ("global", k)."""
    cols = [("word", j) for j in range(n)]
    if config.use_root:
        cols.append(("root",))
    if config.global_variant == "all_dep":
        cols += [("global", k) for k in range(config.m)]
    return cols


# --------------------------------------------------------------------------- reference stepper


def reference_init(tensors: Mapping, sentence: Sequence[int], config: ModelConfig) -> PosteriorState:
    tb = _tables(tensors, sentence, config)
    n, d, h = len(sentence), config.d, config.h
    cols = _columns(n, config)
    qz = np.array([_softmax(row, config.lambda_Z) for row in tb.unary])
    state = PosteriorState(qz=qz, zmsg=np.array(tb.unary))
    opts = [[x for x, col in enumerate(cols) if col != ("word", i)] for i in range(n)]
    if all(opts):
        qh = np.zeros((h, n, len(cols)))
        for c in range(h):
            for i in range(n):
                for x in opts[i]:
                    qh[c, i, x] = 1.0 / len(opts[i])
        state.qh = qh
        state.hmsg = np.zeros_like(qh)
    if config.use_root:
        state.qroot = np.full(config.d_root, 1.0 / config.d_root)
        state.rmsg = np.zeros(config.d_root)
    if config.global_variant == "dep_split":
        state.qg = np.full((h, n, config.m), 1.0 / config.m)
    elif config.global_variant == "single_split":
        state.qg = np.full((n, config.m), 1.0 / config.m)
    return state


def _head_scores(st: PosteriorState, tb: _Tables, config: ModelConfig) -> np.ndarray:
    n, d, h = st.qz.shape[0], config.d, config.h
    cols = _columns(n, config)
    F = np.zeros((h, n, len(cols)))
    for c in range(h):
        for i in range(n):
            for x, col in enumerate(cols):
                acc = 0.0
                if col[0] == "word":
                    j = col[1]
                    if j == i:
                        continue
                    k = _bank(i, j, config)
                    for a in range(d):
                        for b in range(d):
                            acc += st.qz[i, a] * st.qz[j, b] * tb.T[k][c][a][b]
                elif col[0] == "root":
                    for a in range(d):
                        for g in range(config.d_root):
                            acc += st.qz[i, a] * st.qroot[g] * tb.T_root[a, g, c]
                else:
                    for a in range(d):
                        acc += st.qz[i, a] * tb.B[c, col[1], a]
                F[c, i, x] = acc
    return F


def _label_scores(st: PosteriorState, tb: _Tables, config: ModelConfig) -> np.ndarray:
    n, d, h = st.qz.shape[0], config.d, config.h
    cols = _columns(n, config)
    G = np.zeros((n, d))
    for i in range(n):
        for a in range(d):
            acc = 0.0
            if st.qh is not None:
                for c in range(h):
                    for j in range(n):
                        if j == i:
                            continue
                        kij, kji = _bank(i, j, config), _bank(j, i, config)
                        for b in range(d):
                            acc += st.qh[c, i, j] * st.qz[j, b] * tb.T[kij][c][a][b]
                            acc += st.qh[c, j, i] * st.qz[j, b] * tb.T[kji][c][b][a]
                    for x, col in enumerate(cols):
                        if col[0] == "root":
                            for g in range(config.d_root):
                                acc += st.qh[c, i, x] * st.qroot[g] * tb.T_root[a, g, c]
                        elif col[0] == "global":
                            acc += st.qh[c, i, x] * tb.B[c, col[1], a]
            if config.global_variant == "dep_split":
                for c in range(h):
                    for k in range(config.m):
                        acc += st.qg[c, i, k] * tb.B[c, k, a]
            elif config.global_variant == "single_split":
                for k in range(config.m):
                    acc += st.qg[i, k] * tb.B[k, a]
            G[i, a] = acc
    return G


def _root_scores(st: PosteriorState, tb: _Tables, config: ModelConfig) -> np.ndarray:
    n, d = st.qz.shape[0], config.d
    out = np.zeros(config.d_root)
    if st.qh is None:
        return out
    for g in range(config.d_root):
        acc = 0.0
        for c in range(config.h):
            for i in range(n):
                for a in range(d):
                    acc += st.qh[c, i, n] * st.qz[i, a] * tb.T_root[a, g, c]
        out[g] = acc
    return out


def _global_scores(st: PosteriorState, tb: _Tables, config: ModelConfig) -> np.ndarray:
    n, d = st.qz.shape[0], config.d
    if config.global_variant == "dep_split":
        out = np.zeros((config.h, n, config.m))
        for c, i, k in itertools.product(range(config.h), range(n), range(config.m)):
            out[c, i, k] = sum(st.qz[i, a] * tb.B[c, k, a] for a in range(d))
        return out
    out = np.zeros((n, config.m))
    for i, k in itertools.product(range(n), range(config.m)):
        out[i, k] = sum(st.qz[i, a] * tb.B[k, a] for a in range(d))
    return out


def _update_heads(st: PosteriorState, F: np.ndarray, config: ModelConfig):
    h, n, ncol = F.shape
    qh = np.zeros_like(F)
    hmsg = np.zeros_like(F)
    for c in range(h):
        for i in range(n):
            live = [x for x in range(ncol) if x != i]
            msgs = [(1 - config.beta_H) * F[c, i, x] + config.beta_H * st.hmsg[c, i, x] for x in live]
            star = _softmax(msgs, config.lam_H)
            for x, m, p in zip(live, msgs, star):
                hmsg[c, i, x] = m
                qh[c, i, x] = config.alpha_H * p + (1 - config.alpha_H) * st.qh[c, i, x]
    return qh, hmsg


def mfvi_reference_step(state: PosteriorState, tensors: Mapping, sentence: Sequence[int],
                        config: ModelConfig) -> PosteriorState:
    """One MFVI iteration written as nested loops."""
    tb = _tables(tensors, sentence, config)
    n, d = len(sentence), config.d
    new = state.copy()
    split = config.global_variant in ("dep_split", "single_split")
    if config.use_async:
        if new.qh is not None:
            new.qh, new.hmsg = _update_heads(new, _head_scores(new, tb, config), config)
        if split:
            g = _global_scores(new, tb, config)
            new.qg = np.array([_softmax(r) for r in g.reshape(-1, config.m)]).reshape(g.shape)
        src = new
    else:
        src = state
        if state.qh is not None:
            new.qh, new.hmsg = _update_heads(state, _head_scores(state, tb, config), config)
        if split:
            g = _global_scores(state, tb, config)
            new.qg = np.array([_softmax(r) for r in g.reshape(-1, config.m)]).reshape(g.shape)
    G = _label_scores(src, tb, config)
    qz = np.zeros((n, d))
    zmsg = np.zeros((n, d))
    for i in range(n):
        msgs = [(1 - config.beta_Z) * (tb.unary[i][a] + G[i, a]) + config.beta_Z * src.zmsg[i, a]
                for a in range(d)]
        star = _softmax(msgs, config.lambda_Z)
        for a in range(d):
            zmsg[i, a] = msgs[a]
            qz[i, a] = config.alpha_Z * star[a] + (1 - config.alpha_Z) * src.qz[i, a]
    if config.use_root:
        gr = _root_scores(src, tb, config)
        msgs = [(1 - config.beta_Z) * gr[g] + config.beta_Z * src.rmsg[g] for g in range(config.d_root)]
        star = _softmax(msgs, config.lambda_Z)
        new.rmsg = np.array(msgs)
        new.qroot = np.array([config.alpha_Z * s + (1 - config.alpha_Z) * q
                              for s, q in zip(star, src.qroot)])
    new.qz, new.zmsg = qz, zmsg
    return new


def mfvi_reference_run(tensors: Mapping, sentence: Sequence[int], config: ModelConfig,
                       iters: int | None = None) -> list[PosteriorState]:
    """Initial state followed by the state after each iteration."""
    states = [reference_init(tensors, sentence, config)]
    for _ in range(config.T_iters if iters is None else iters):
        states.append(mfvi_reference_step(states[-1], tensors, sentence, config))
    return states


# --------------------------------------------------------------------------- energies


@dataclass
class Assignment:
    z: tuple[int, ...]
    heads: tuple[tuple[int, ...], ...]      # heads[c][i] is a column index
    z_root: int | None = None
    g: tuple | None = None                  # dep_split: g[c][i]; single_split: g[i]


def energy(assignment: Assignment, tensors: Mapping, sentence: Sequence[int], config: ModelConfig) -> float:
    """Negative log potential of a full assignment."""
    tb = _tables(tensors, sentence, config)
    n = len(sentence)
    cols = _columns(n, config)
    e = 0.0
    for i in range(n):
        e -= tb.unary[i][assignment.z[i]]
    for c in range(config.h):
        for i in range(n):
            if n == 1 and len(cols) == 1:
                continue
            col = cols[assignment.heads[c][i]]
            if col == ("word", i):
                raise ValueError("a word cannot head itself")
            if col[0] == "word":
                j = col[1]
                e -= tb.T[_bank(i, j, config)][c][assignment.z[i]][assignment.z[j]]
            elif col[0] == "root":
                e -= tb.T_root[assignment.z[i], assignment.z_root, c]
            else:
                e -= tb.B[c, col[1], assignment.z[i]]
    if config.global_variant == "dep_split":
        for c in range(config.h):
            for i in range(n):
                e -= tb.B[c, assignment.g[c][i], assignment.z[i]]
    elif config.global_variant == "single_split":
        for i in range(n):
            e -= tb.B[assignment.g[i], assignment.z[i]]
    return e


def expected_energy(state: PosteriorState, tensors: Mapping, sentence: Sequence[int],
                    config: ModelConfig) -> float:
    """Energy averaged under the fully factorised distribution ``state``."""
    tb = _tables(tensors, sentence, config)
    n, d = len(sentence), config.d
    cols = _columns(n, config)
    qz, qh = state.qz, state.qh
    e = 0.0
    for i in range(n):
        for a in range(d):
            e -= qz[i, a] * tb.unary[i][a]
    if qh is not None:
        for c in range(config.h):
            for i in range(n):
                for x, col in enumerate(cols):
                    if col[0] == "word":
                        j = col[1]
                        if j == i:
                            continue
                        k = _bank(i, j, config)
                        for a in range(d):
                            for b in range(d):
                                e -= qh[c, i, x] * qz[i, a] * qz[j, b] * tb.T[k][c][a][b]
                    elif col[0] == "root":
                        for a in range(d):
                            for g in range(config.d_root):
                                e -= qh[c, i, x] * qz[i, a] * state.qroot[g] * tb.T_root[a, g, c]
                    else:
                        for a in range(d):
                            e -= qh[c, i, x] * qz[i, a] * tb.B[c, col[1], a]
    if config.global_variant == "dep_split":
        for c, i, k, a in itertools.product(range(config.h), range(n), range(config.m), range(d)):
            e -= state.qg[c, i, k] * qz[i, a] * tb.B[c, k, a]
    elif config.global_variant == "single_split":
        for i, k, a in itertools.product(range(n), range(config.m), range(d)):
            e -= state.qg[i, k] * qz[i, a] * tb.B[k, a]
    return e


def energy_gradient(state: PosteriorState, tensors: Mapping, sentence: Sequence[int],
                    config: ModelConfig) -> dict[str, np.ndarray]:
    """Exact partial derivatives of :func:`expected_energy`.

    The expected energy is affine in each single distribution (a variable never
    interacts with itself), so the partial derivative in coordinate ``a`` of
    one distribution equals E(that distribution := e_a) - E(that distribution := 0).
    """
    out: dict[str, np.ndarray] = {}
    for name in ("qz", "qh", "qg", "qroot"):
        q = getattr(state, name)
        if q is None:
            continue
        grad = np.zeros_like(q)
        rows = q.reshape(-1, q.shape[-1])
        for r in range(rows.shape[0]):
            base = state.copy()
            getattr(base, name).reshape(-1, q.shape[-1])[r] = 0.0
            e0 = expected_energy(base, tensors, sentence, config)
            for a in range(q.shape[-1]):
                probe = base.copy()
                getattr(probe, name).reshape(-1, q.shape[-1])[r, a] = 1.0
                grad.reshape(-1, q.shape[-1])[r, a] = expected_energy(probe, tensors, sentence, config) - e0
        out[name] = grad
    return out


# --------------------------------------------------------------------------- enumeration


def _state_count(n: int, config: ModelConfig) -> int:
    cols = len(_columns(n, config))
    heads = max(cols - 1, 1) if n > 0 else 1
    count = config.d ** n * heads ** (n * config.h)
    if config.use_root:
        count *= config.d_root
    if config.global_variant == "dep_split":
        count *= config.m ** (n * config.h)
    elif config.global_variant == "single_split":
        count *= config.m ** n
    return count


def exact_marginals(tensors: Mapping, sentence: Sequence[int], config: ModelConfig,
                    max_states: int = 10 ** 6) -> dict[str, np.ndarray]:
    """Marginals of every variable by full enumeration of the joint."""
    n, d, h = len(sentence), config.d, config.h
    total = _state_count(n, config)
    if total > max_states:
        raise InstanceTooLarge(f"{total} joint states exceed the limit of {max_states}")
    cols = _columns(n, config)
    head_opts = [[x for x in range(len(cols)) if cols[x] != ("word", i)] or [None] for i in range(n)]
    z_space = itertools.product(range(d), repeat=n)
    head_space = list(itertools.product(*[head_opts[i] for _ in range(h) for i in range(n)]))
    root_space = range(config.d_root) if config.use_root else [None]
    if config.global_variant == "dep_split":
        g_space = list(itertools.product(range(config.m), repeat=n * h))
    elif config.global_variant == "single_split":
        g_space = list(itertools.product(range(config.m), repeat=n))
    else:
        g_space = [None]

    pz = np.zeros((n, d))
    ph = np.zeros((h, n, len(cols)))
    proot = np.zeros(config.d_root) if config.use_root else None
    pg = None
    if config.global_variant == "dep_split":
        pg = np.zeros((h, n, config.m))
    elif config.global_variant == "single_split":
        pg = np.zeros((n, config.m))
    records = []
    for z in z_space:
        for hs in head_space:
            heads = tuple(tuple(hs[c * n:(c + 1) * n]) for c in range(h))
            for zr in root_space:
                for gs in g_space:
                    g = None
                    if config.global_variant == "dep_split":
                        g = tuple(tuple(gs[c * n:(c + 1) * n]) for c in range(h))
                    elif config.global_variant == "single_split":
                        g = gs
                    a = Assignment(z=z, heads=heads, z_root=zr, g=g)
                    records.append((a, -energy(a, tensors, sentence, config)))
    top = max(s for _, s in records)
    weights = [math.exp(s - top) for _, s in records]
    norm = sum(weights)
    for (a, _), w in zip(records, weights):
        p = w / norm
        for i in range(n):
            pz[i, a.z[i]] += p
            for c in range(h):
                if a.heads[c][i] is not None:
                    ph[c, i, a.heads[c][i]] += p
        if proot is not None:
            proot[a.z_root] += p
        if config.global_variant == "dep_split":
            for c in range(h):
                for i in range(n):
                    pg[c, i, a.g[c][i]] += p
        elif config.global_variant == "single_split":
            for i in range(n):
                pg[i, a.g[i]] += p
    out = {"qz": pz, "qh": ph, "total_mass": np.array(sum(w / norm for w in weights))}
    if proot is not None:
        out["qroot"] = proot
    if pg is not None:
        out["qg"] = pg
    return out


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Sum over rows of KL(p || q), skipping zero-probability entries of ``p``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    live = p > 0
    return float(np.sum(p[live] * (np.log(p[live]) - np.log(q[live]))))


# --------------------------------------------------------------------------- entropy-regularised softmax optimality


def entropic_objective(c: np.ndarray, z: np.ndarray, lam: float) -> float:
    z = np.asarray(z, dtype=np.float64)
    ent = sum(float(v) * math.log(float(v)) for v in z if v > 0)
    return float(np.dot(c, z)) + lam * ent


def entropic_softmax_optimality(c, lam: float, n_random: int = 1000, rng=None,
                                margin: float = -1e-12) -> bool:
    """Check that softmax(-c / lam) beats random simplex points and every vertex."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    c = np.asarray(c, dtype=np.float64)
    rng = np.random.default_rng(0) if rng is None else rng
    star = np.array(_softmax(list(-c), lam))
    best = entropic_objective(c, star, lam)
    candidates = list(rng.dirichlet(np.ones(c.size), size=n_random)) + list(np.eye(c.size))
    return all(entropic_objective(c, z, lam) - best >= margin for z in candidates)
