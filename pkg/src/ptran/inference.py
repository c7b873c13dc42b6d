"""Mean field inference over word labels, dependency heads, root and global variables.

Three code paths share one semantics:

* :func:`run_inference` walks one sentence pair by pair in numpy. It is the
  readable reference and is not differentiated.
* :func:`run_inference_tensorized` processes a padded batch with tape ops and
  is what training differentiates.
* :func:`run_inference_transformer_form` is the restricted attention-shaped
  rewrite (uv factors, no distance banks, no root or globals).

Head columns of a sentence of length ``n`` are laid out as
``[words 0..n-1 | root (if use_root) | globals 0..m-1 (if all_dep)]``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .model import ModelConfig, bank_masks, bank_of, factor_pair, materialize_all

NEG_INF = -np.inf


class EmptySentenceError(ValueError):
    pass


class HeadDomainEmpty(Exception):
    """Raised when no head variable has a candidate (n=1, no root, no globals)."""


class UnsupportedCombination(ValueError):
    pass


# --------------------------------------------------------------------------- containers


@dataclass
class PosteriorState:
    qz: np.ndarray
    qh: np.ndarray | None = None
    qg: np.ndarray | None = None
    qroot: np.ndarray | None = None
    zmsg: np.ndarray | None = None
    hmsg: np.ndarray | None = None
    rmsg: np.ndarray | None = None

    def copy(self) -> "PosteriorState":
        return PosteriorState(**{f.name: (None if getattr(self, f.name) is None
                                          else getattr(self, f.name).copy())
                                 for f in dataclasses.fields(self)})


@dataclass
class ContextualReps:
    reps: np.ndarray
    root_rep: np.ndarray | None
    qh: np.ndarray | None
    trace: list[PosteriorState] = field(default_factory=list)


@dataclass
class DenseScores:
    """Materialised score tables for the scalar path."""

    T: np.ndarray                    # (K, h, d, d)
    T_root: np.ndarray | None = None  # (d, d_root, h)
    B: np.ndarray | None = None


def dense_scores(tensors: Mapping, config: ModelConfig) -> DenseScores:
    def arr(x):
        return x.data if isinstance(x, ad.Tensor) else np.asarray(x)

    T = materialize_all({k: arr(v) for k, v in tensors.items()}, config).data
    return DenseScores(
        T=T,
        T_root=arr(tensors["T_root"]) if config.use_root else None,
        B=arr(tensors["B"]) if config.global_variant != "none" else None,
    )


def n_columns(n: int, config: ModelConfig) -> int:
    extra = config.m if config.global_variant == "all_dep" else 0
    return n + int(config.use_root) + extra


def head_domain(n: int, config: ModelConfig) -> np.ndarray:
    """Boolean (n, cols) matrix of admissible heads for each word."""
    dom = np.ones((n, n_columns(n, config)), dtype=bool)
    dom[np.arange(n), np.arange(n)] = False
    return dom


def _softmax(x: np.ndarray, mask: np.ndarray | None = None, scale: float = 1.0) -> np.ndarray:
    return ad.softmax_rows(x, mask=mask, scale=scale).data


# --------------------------------------------------------------------------- scalar path


def init_state(unary: np.ndarray, config: ModelConfig) -> PosteriorState:
    unary = np.asarray(unary)
    n, _ = unary.shape
    if n < 1:
        raise EmptySentenceError("cannot run inference on an empty sentence")
    dt = unary.dtype
    state = PosteriorState(qz=_softmax(unary, scale=config.lambda_Z), zmsg=unary.copy())
    dom = head_domain(n, config)
    if dom.shape[1] > 0 and dom.any(axis=1).all():
        qh = dom / dom.sum(axis=1, keepdims=True)
        state.qh = np.broadcast_to(qh, (config.h,) + qh.shape).astype(dt)
        state.hmsg = np.zeros_like(state.qh)
    if config.use_root:
        state.qroot = np.full(config.d_root, 1.0 / config.d_root, dtype=dt)
        state.rmsg = np.zeros(config.d_root, dtype=dt)
    if config.global_variant == "dep_split":
        state.qg = np.full((config.h, n, config.m), 1.0 / config.m, dtype=dt)
    elif config.global_variant == "single_split":
        state.qg = np.full((n, config.m), 1.0 / config.m, dtype=dt)
    return state


def compute_head_message(state: PosteriorState, scores: DenseScores, config: ModelConfig) -> np.ndarray:
    qz = state.qz
    n = qz.shape[0]
    F = np.zeros((config.h, n, n_columns(n, config)), dtype=qz.dtype)
    for c in range(config.h):
        for i in range(n):
            for j in range(n):
                if i == j:
                    F[c, i, j] = NEG_INF
                else:
                    F[c, i, j] = qz[i] @ scores.T[bank_of(i, j, config), c] @ qz[j]
            col = n
            if config.use_root:
                F[c, i, col] = qz[i] @ scores.T_root[:, :, c] @ state.qroot
                col += 1
            if config.global_variant == "all_dep":
                F[c, i, col:col + config.m] = scores.B[c] @ qz[i]
    return F


def compute_label_message(state: PosteriorState, scores: DenseScores, config: ModelConfig) -> np.ndarray:
    qz, qh = state.qz, state.qh
    n = qz.shape[0]
    G = np.zeros_like(qz)
    for c in range(config.h if qh is not None else 0):
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                G[i] += qh[c, i, j] * (scores.T[bank_of(i, j, config), c] @ qz[j])
                G[i] += qh[c, j, i] * (scores.T[bank_of(j, i, config), c].T @ qz[j])
            col = n
            if config.use_root:
                G[i] += qh[c, i, col] * (scores.T_root[:, :, c] @ state.qroot)
                col += 1
            if config.global_variant == "all_dep":
                G[i] += qh[c, i, col:col + config.m] @ scores.B[c]
    if config.global_variant == "dep_split":
        for c in range(config.h):
            G += state.qg[c] @ scores.B[c]
    elif config.global_variant == "single_split":
        G += state.qg @ scores.B
    return G


def compute_root_message(state: PosteriorState, scores: DenseScores, config: ModelConfig) -> np.ndarray:
    n = state.qz.shape[0]
    out = np.zeros(config.d_root, dtype=state.qz.dtype)
    if state.qh is None:
        return out
    for c in range(config.h):
        for i in range(n):
            out += state.qh[c, i, n] * (state.qz[i] @ scores.T_root[:, :, c])
    return out


def update_head_posteriors(state: PosteriorState, F: np.ndarray, config: ModelConfig):
    """Damped message, weighted softmax, then step-size blend. Returns (qh, hmsg)."""
    if state.qh is None:
        raise HeadDomainEmpty("no admissible head for any word")
    n = state.qz.shape[0]
    dom = np.broadcast_to(head_domain(n, config), F.shape)
    F = np.where(dom, F, 0.0)
    hmsg = (1.0 - config.beta_H) * F + config.beta_H * state.hmsg
    qstar = _softmax(hmsg, mask=dom, scale=config.lam_H)
    qh = config.alpha_H * qstar + (1.0 - config.alpha_H) * state.qh
    return qh, hmsg


def update_label_posteriors(state: PosteriorState, G: np.ndarray, unary: np.ndarray, config: ModelConfig):
    """Returns (qz, zmsg)."""
    zmsg = (1.0 - config.beta_Z) * (unary + G) + config.beta_Z * state.zmsg
    qstar = _softmax(zmsg, scale=config.lambda_Z)
    qz = config.alpha_Z * qstar + (1.0 - config.alpha_Z) * state.qz
    return qz, zmsg


def update_root_posterior(state: PosteriorState, groot: np.ndarray, config: ModelConfig):
    """The root label is a label variable without unary scores. Returns (qroot, rmsg)."""
    rmsg = (1.0 - config.beta_Z) * groot + config.beta_Z * state.rmsg
    qstar = _softmax(rmsg[None, :], scale=config.lambda_Z)[0]
    return config.alpha_Z * qstar + (1.0 - config.alpha_Z) * state.qroot, rmsg


def update_global_posteriors(state: PosteriorState, scores: DenseScores, config: ModelConfig) -> np.ndarray:
    if config.global_variant == "dep_split":
        msg = np.einsum("ia,cka->cik", state.qz, scores.B)
    elif config.global_variant == "single_split":
        msg = state.qz @ scores.B.T
    else:
        raise ValueError(f"global posteriors are undefined for variant {config.global_variant!r}")
    return _softmax(msg)


def mfvi_step(state: PosteriorState, scores: DenseScores, unary: np.ndarray, config: ModelConfig,
              g_keep: np.ndarray | None = None) -> PosteriorState:
    """One iteration. ``g_keep`` is an inverted-dropout multiplier for the label message."""
    new = state.copy()
    split = config.global_variant in ("dep_split", "single_split")
    if config.use_async:
        if new.qh is not None:
            F = compute_head_message(new, scores, config)
            new.qh, new.hmsg = update_head_posteriors(new, F, config)
        if split:
            new.qg = update_global_posteriors(new, scores, config)
        src = new
    else:
        src = state
        if state.qh is not None:
            F = compute_head_message(state, scores, config)
            new.qh, new.hmsg = update_head_posteriors(state, F, config)
        if split:
            new.qg = update_global_posteriors(state, scores, config)
    G = compute_label_message(src, scores, config)
    if g_keep is not None:
        G = G * g_keep
    groot = compute_root_message(src, scores, config) if config.use_root else None
    new.qz, new.zmsg = update_label_posteriors(src, G, unary, config)
    if config.use_root:
        new.qroot, new.rmsg = update_root_posterior(src, groot, config)
    return new


def run_inference(tensors: Mapping, token_ids: Sequence[int], config: ModelConfig, *,
                  training: bool = False, rng: np.random.Generator | None = None,
                  trace: bool = False) -> ContextualReps:
    """Scalar reference path for one sentence."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size == 0:
        raise EmptySentenceError("cannot run inference on an empty sentence")
    S = tensors["S"].data if isinstance(tensors["S"], ad.Tensor) else np.asarray(tensors["S"])
    unary = S[ids]
    scores = dense_scores(tensors, config)
    state = init_state(unary, config)
    states = [state]
    for _ in range(config.T_iters):
        keep = None
        if training and config.dropout > 0:
            if rng is None:
                raise ValueError("dropout during training needs an rng")
            keep = (rng.random(unary.shape) >= config.dropout) / (1.0 - config.dropout)
            keep = keep.astype(unary.dtype)
        state = mfvi_step(state, scores, unary, config, keep)
        states.append(state)
    return ContextualReps(
        reps=state.zmsg / config.lambda_Z,
        root_rep=state.qroot,
        qh=state.qh,
        trace=states if trace else [],
    )


# --------------------------------------------------------------------------- batched path


@dataclass
class BatchReps:
    reps: ad.Tensor                  # (B, N, d) pre-softmax scores
    root_rep: ad.Tensor | None       # (B, d_root)
    qh: np.ndarray | None            # (B, h, N, C)
    lengths: np.ndarray
    trace: list[dict] = field(default_factory=list)

    def sentence(self, b: int) -> ContextualReps:
        n = int(self.lengths[b])
        qh = None
        if self.qh is not None:
            N = self.qh.shape[2]
            cols = list(range(n)) + list(range(N, self.qh.shape[3]))
            qh = self.qh[b][:, :n][:, :, cols]
        root = None if self.root_rep is None else self.root_rep.data[b]
        return ContextualReps(reps=self.reps.data[b, :n], root_rep=root, qh=qh)


def _lengths_mask(ids: np.ndarray, lengths) -> np.ndarray:
    lengths = np.asarray(lengths, dtype=np.int64)
    return np.arange(ids.shape[1])[None, :] < lengths[:, None]


def _g_dropout(shape, config: ModelConfig, training: bool, rng, dtype):
    if not training or config.dropout <= 0:
        return None
    if rng is None:
        raise ValueError("dropout during training needs an rng")
    return ((rng.random(shape) >= config.dropout) / (1.0 - config.dropout)).astype(dtype)


def _blend(new: ad.Tensor, old, alpha: float) -> ad.Tensor:
    if alpha == 1.0:
        return new
    return ad.add(ad.scale(new, alpha), ad.scale(old, 1.0 - alpha))


def run_inference_tensorized(tensors: Mapping, ids, lengths, config: ModelConfig, *,
                             training: bool = False, rng: np.random.Generator | None = None,
                             trace: bool = False) -> BatchReps:
    """General batched path. ``ids`` is (B, N) with arbitrary padding beyond ``lengths``."""
    ids = np.asarray(ids, dtype=np.int64)
    Bsz, N = ids.shape
    valid = _lengths_mask(ids, lengths)
    if (valid.sum(axis=1) == 0).any():
        raise EmptySentenceError("batch contains an empty sentence")
    S = tensors["S"]
    dt = S.dtype
    d, h = config.d, config.h
    lz, lh = config.lambda_Z, config.lam_H

    unary = ad.reshape(ad.gather_rows(S, ids.reshape(-1)), (Bsz, N, d))
    rowmask = np.broadcast_to(valid[:, :, None], (Bsz, N, d)).astype(dt)
    Lf, Rf = factor_pair(tensors, config)
    Mb = bank_masks(N, config, dtype=dt)

    eye = np.eye(N, dtype=bool)
    wordmask = valid[:, :, None] & valid[:, None, :] & ~eye[None]
    extra_cols = int(config.use_root) + (config.m if config.global_variant == "all_dep" else 0)
    C = N + extra_cols
    colmask = np.concatenate(
        [wordmask, np.broadcast_to(valid[:, :, None], (Bsz, N, extra_cols))], axis=2)
    colmask = np.broadcast_to(colmask[:, None], (Bsz, h, N, C))
    has_heads = colmask.any()
    root_col = N if config.use_root else None
    glob_off = N + int(config.use_root)

    qz = ad.mul(ad.softmax_rows(unary, scale=lz), rowmask)
    zmsg = unary
    qh_prev = None
    hmsg = None
    if has_heads:
        cnt = colmask.sum(axis=-1, keepdims=True)
        qh_prev = ad.Tensor(np.where(colmask, 1.0 / np.maximum(cnt, 1), 0.0).astype(dt))
        hmsg = ad.Tensor(np.zeros((Bsz, h, N, C), dtype=dt))
    qroot = rmsg = None
    if config.use_root:
        qroot = ad.Tensor(np.full((Bsz, config.d_root), 1.0 / config.d_root, dtype=dt))
        rmsg = ad.Tensor(np.zeros((Bsz, config.d_root), dtype=dt))
    qg = None
    gmask = None
    if config.global_variant == "dep_split":
        gmask = np.broadcast_to(valid[:, None, :, None], (Bsz, h, N, config.m))
        qg = ad.Tensor((gmask / config.m).astype(dt))
    elif config.global_variant == "single_split":
        gmask = np.broadcast_to(valid[:, :, None], (Bsz, N, config.m))
        qg = ad.Tensor((gmask / config.m).astype(dt))
    Bg = tensors["B"] if config.global_variant != "none" else None
    Troot = tensors["T_root"] if config.use_root else None

    def head_update(qz, qroot, qh_prev, hmsg):
        A = ad.einsum("bnd,khdr->bkhnr", qz, Lf)
        Rq = ad.einsum("bnd,khdr->bkhnr", qz, Rf)
        parts = [ad.einsum("bkhir,bkhjr,kij->bhij", A, Rq, Mb)]
        if config.use_root:
            parts.append(ad.reshape(ad.einsum("bia,bg,agh->bhi", qz, qroot, Troot), (Bsz, h, N, 1)))
        if config.global_variant == "all_dep":
            parts.append(ad.einsum("bia,hka->bhik", qz, Bg))
        F = parts[0] if len(parts) == 1 else ad.concat(parts, axis=-1)
        msg = F if config.beta_H == 0.0 else ad.add(ad.scale(F, 1.0 - config.beta_H),
                                                     ad.scale(hmsg, config.beta_H))
        qstar = ad.softmax_rows(msg, mask=colmask, scale=lh, allow_empty=True)
        return _blend(qstar, qh_prev, config.alpha_H), msg

    def global_update(qz):
        if config.global_variant == "dep_split":
            return ad.softmax_rows(ad.einsum("bia,hka->bhik", qz, Bg), mask=gmask, allow_empty=True)
        return ad.softmax_rows(ad.einsum("bia,ka->bik", qz, Bg), mask=gmask, allow_empty=True)

    def label_message(qz, qh, qroot, qg):
        terms = []
        if qh is not None:
            Pw = ad.index(qh, (Ellipsis, slice(0, N))) if C != N else qh
            P = ad.einsum("bhij,kij->bkhij", Pw, Mb)
            A = ad.einsum("bnd,khdr->bkhnr", qz, Lf)
            Rq = ad.einsum("bnd,khdr->bkhnr", qz, Rf)
            terms.append(ad.einsum("bkhir,khar->bia", ad.einsum("bkhij,bkhjr->bkhir", P, Rq), Lf))
            terms.append(ad.einsum("bkhir,khar->bia", ad.einsum("bkhji,bkhjr->bkhir", P, A), Rf))
            if config.use_root:
                qhr = ad.index(qh, (Ellipsis, root_col))
                terms.append(ad.einsum("bhi,bg,agh->bia", qhr, qroot, Troot))
            if config.global_variant == "all_dep":
                qhg = ad.index(qh, (Ellipsis, slice(glob_off, C)))
                terms.append(ad.einsum("bhik,hka->bia", qhg, Bg))
        if config.global_variant == "dep_split":
            terms.append(ad.einsum("bhik,hka->bia", qg, Bg))
        elif config.global_variant == "single_split":
            terms.append(ad.einsum("bik,ka->bia", qg, Bg))
        if not terms:
            return None
        G = terms[0]
        for t in terms[1:]:
            G = ad.add(G, t)
        return G

    def root_message(qz, qh):
        if qh is None:
            return ad.Tensor(np.zeros((Bsz, config.d_root), dtype=dt))
        qhr = ad.index(qh, (Ellipsis, root_col))
        return ad.einsum("bhi,bia,agh->bg", qhr, qz, Troot)

    qh = qh_prev
    states = []
    for _ in range(config.T_iters):
        split = config.global_variant in ("dep_split", "single_split")
        if config.use_async:
            if has_heads:
                qh, hmsg = head_update(qz, qroot, qh, hmsg)
            if split:
                qg = global_update(qz)
            src_qh, src_qg = qh, qg
        else:
            src_qh, src_qg = qh, qg
            if has_heads:
                qh, hmsg = head_update(qz, qroot, qh, hmsg)
            if split:
                qg = global_update(qz)
        G = label_message(qz, src_qh if has_heads else None, qroot, src_qg)
        keep = _g_dropout((Bsz, N, d), config, training, rng, dt)
        if G is not None and keep is not None:
            G = ad.mul(G, keep)
        groot = root_message(qz, src_qh if has_heads else None) if config.use_root else None
        target = unary if G is None else ad.add(unary, G)
        zmsg = target if config.beta_Z == 0.0 else ad.add(ad.scale(target, 1.0 - config.beta_Z),
                                                          ad.scale(zmsg, config.beta_Z))
        qz = ad.mul(_blend(ad.softmax_rows(zmsg, scale=lz), qz, config.alpha_Z), rowmask)
        if config.use_root:
            rmsg = groot if config.beta_Z == 0.0 else ad.add(ad.scale(groot, 1.0 - config.beta_Z),
                                                            ad.scale(rmsg, config.beta_Z))
            qroot = _blend(ad.softmax_rows(rmsg, scale=lz), qroot, config.alpha_Z)
        if trace:
            states.append({
                "qz": qz.data.copy(),
                "qh": None if qh is None else qh.data.copy(),
                "qg": None if qg is None else qg.data.copy(),
                "qroot": None if qroot is None else qroot.data.copy(),
            })
    reps = zmsg if lz == 1.0 else ad.scale(zmsg, 1.0 / lz)
    return BatchReps(
        reps=reps,
        root_rep=qroot,
        qh=None if qh is None else qh.data,
        lengths=np.asarray(lengths, dtype=np.int64),
        trace=states,
    )


# --------------------------------------------------------------------------- transformer form


def _channel_outputs(qz: ad.Tensor, U: ad.Tensor, V: ad.Tensor, mask: np.ndarray, lam_H: float) -> ad.Tensor:
    """Sum over channels of softmax(Q_c K_c^T / lam_H) V_c U_c^T with ``Q_c = qz U_c``, ``K_c = V_c = qz V_c``.

    ``qz`` (B, N, d); ``U``, ``V`` (h, d, r); ``mask`` (B, h, N, N) admissible pairs.
    """
    q = ad.einsum("bnd,hdr->bhnr", qz, U)
    k = ad.einsum("bnd,hdr->bhnr", qz, V)
    att = ad.softmax_rows(ad.einsum("bhir,bhjr->bhij", q, k), mask=mask, scale=lam_H, allow_empty=True)
    ctx = ad.einsum("bhij,bhjr->bhir", att, k)
    return ad.einsum("bhir,hdr->bid", ctx, U)


def single_channel_update(qz, U_c, V_c, lambda_H: float) -> ad.Tensor:
    """One channel's contribution ``channel_c @ U_c.T`` for an (n, d) label posterior."""
    qz = ad._as_tensor(qz)
    n = qz.shape[0]
    mask = ~np.eye(n, dtype=bool)[None, None]
    out = _channel_outputs(
        ad.reshape(qz, (1, n, qz.shape[1])),
        ad.reshape(ad._as_tensor(U_c), (1,) + tuple(np.shape(U_c))),
        ad.reshape(ad._as_tensor(V_c), (1,) + tuple(np.shape(V_c))),
        mask, lambda_H)
    return ad.reshape(out, (n, qz.shape[1]))


def check_transformer_form(config: ModelConfig) -> None:
    problems = []
    if config.decomposition != "uv":
        problems.append("needs uv decomposition")
    if config.distance:
        problems.append("needs distance banks disabled")
    if config.use_root or config.global_variant != "none":
        problems.append("does not support root or global variables")
    if not config.use_async:
        problems.append("needs the asynchronous schedule")
    if config.alpha_Z != 1.0 or config.alpha_H != 1.0 or config.beta_Z != 0.0 or config.beta_H != 0.0:
        problems.append("does not support step sizes or damping")
    if problems:
        raise UnsupportedCombination("transformer_form " + ", ".join(problems))


def run_inference_transformer_form(tensors: Mapping, ids, lengths, config: ModelConfig, *,
                                   training: bool = False, rng=None, trace: bool = False) -> BatchReps:
    """Label update ``softmax(S + 2 sum_c channel_c U_c^T)``; assumes symmetric channel scores."""
    check_transformer_form(config)
    ids = np.asarray(ids, dtype=np.int64)
    Bsz, N = ids.shape
    valid = _lengths_mask(ids, lengths)
    if (valid.sum(axis=1) == 0).any():
        raise EmptySentenceError("batch contains an empty sentence")
    S = tensors["S"]
    dt = S.dtype
    d = config.d
    U = ad.einsum("dhr->hdr", ad.index(ad._as_tensor(tensors["U"]), (0,)))
    V = ad.einsum("dhr->hdr", ad.index(ad._as_tensor(tensors["V"]), (0,)))
    unary = ad.reshape(ad.gather_rows(S, ids.reshape(-1)), (Bsz, N, d))
    rowmask = np.broadcast_to(valid[:, :, None], (Bsz, N, d)).astype(dt)
    pair = valid[:, :, None] & valid[:, None, :] & ~np.eye(N, dtype=bool)[None]
    mask = np.broadcast_to(pair[:, None], (Bsz, config.h, N, N))
    qz = ad.mul(ad.softmax_rows(unary, scale=config.lambda_Z), rowmask)
    zmsg = unary
    states = []
    for _ in range(config.T_iters):
        G = ad.scale(_channel_outputs(qz, U, V, mask, config.lam_H), 2.0)
        keep = _g_dropout((Bsz, N, d), config, training, rng, dt)
        if keep is not None:
            G = ad.mul(G, keep)
        zmsg = ad.add(unary, G)
        qz = ad.mul(ad.softmax_rows(zmsg, scale=config.lambda_Z), rowmask)
        if trace:
            states.append({"qz": qz.data.copy()})
    reps = zmsg if config.lambda_Z == 1.0 else ad.scale(zmsg, 1.0 / config.lambda_Z)
    return BatchReps(reps=reps, root_rep=None, qh=None,
                     lengths=np.asarray(lengths, dtype=np.int64), trace=states)


def encode(tensors: Mapping, ids, lengths, config: ModelConfig, *, training: bool = False,
           rng=None) -> BatchReps:
    """Dispatch on ``config.use_tensorized``."""
    if config.use_tensorized == "transformer_form":
        return run_inference_transformer_form(tensors, ids, lengths, config, training=training, rng=rng)
    if config.use_tensorized == "scalar":
        if any(isinstance(v, ad.Tensor) and v.tape is not None for v in tensors.values()):
            raise UnsupportedCombination("the scalar path is not differentiable; use 'general' to train")
        return _encode_scalar(tensors, ids, lengths, config, training=training, rng=rng)
    return run_inference_tensorized(tensors, ids, lengths, config, training=training, rng=rng)


def _encode_scalar(tensors, ids, lengths, config, *, training, rng) -> BatchReps:
    ids = np.asarray(ids, dtype=np.int64)
    Bsz, N = ids.shape
    S = tensors["S"].data if isinstance(tensors["S"], ad.Tensor) else np.asarray(tensors["S"])
    reps = np.zeros((Bsz, N, config.d), dtype=S.dtype)
    roots = np.zeros((Bsz, config.d_root), dtype=S.dtype) if config.use_root else None
    C = n_columns(N, config)
    qh_all = np.zeros((Bsz, config.h, N, C), dtype=S.dtype)
    for b in range(Bsz):
        n = int(lengths[b])
        out = run_inference(tensors, ids[b, :n], config, training=training, rng=rng)
        reps[b, :n] = out.reps
        if roots is not None:
            roots[b] = out.root_rep
        if out.qh is not None:
            qh_all[b, :, :n, :n] = out.qh[:, :, :n]
            qh_all[b, :, :n, N:] = out.qh[:, :, n:]
    return BatchReps(reps=ad.Tensor(reps), root_rep=None if roots is None else ad.Tensor(roots),
                     qh=qh_all, lengths=np.asarray(lengths, dtype=np.int64))


# --------------------------------------------------------------------------- dependency extraction


def extract_dependency_heads(qh: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Most probable head per (channel, word); ties go to the smaller column index."""
    qh = np.asarray(qh)
    heads = np.argmax(qh, axis=-1)
    probs = np.take_along_axis(qh, heads[..., None], axis=-1)[..., 0]
    return heads, probs


def format_dependencies(tokens: Sequence[str], qh: np.ndarray, config: ModelConfig) -> list[str]:
    """Lines ``i:word -> j:head (p.pp)`` per channel, 1-based, ``0:<root>`` for the root column."""
    n = len(tokens)
    heads, probs = extract_dependency_heads(qh)
    lines = []
    for c in range(heads.shape[0]):
        lines.append(f"channel {c + 1}")
        for i in range(n):
            j = int(heads[c, i])
            if j < n:
                target = f"{j + 1}:{tokens[j]}"
            elif config.use_root and j == n:
                target = "0:<root>"
            else:
                target = f"g{j - n - int(config.use_root) + 1}:<global>"
            lines.append(f"{i + 1}:{tokens[i]} -> {target} ({probs[c, i]:.2f})")
    return lines
