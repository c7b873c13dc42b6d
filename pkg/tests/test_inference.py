import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_config, random_params
from ptran import autodiff as ad
from ptran.inference import (DenseScores, EmptySentenceError, PosteriorState, compute_head_message,
                             compute_label_message, dense_scores, update_global_posteriors,
                             update_label_posteriors, HeadDomainEmpty, UnsupportedCombination, encode,
                             extract_dependency_heads, format_dependencies, init_state,
                             run_inference, run_inference_tensorized, run_inference_transformer_form,
                             single_channel_update, update_head_posteriors)
from ptran.model import ModelConfig, bank_of, init_parameters, parameter_shapes


def _zero_ternary(p):
    return {k: (np.zeros_like(v) if k != "S" else v) for k, v in p.items()}


class TestInvariants:
    @given(seed=st.integers(0, 10_000))
    def test_posteriors_normalised_and_diagonal_zero(self, seed):
        rng = np.random.default_rng(seed)
        cfg = random_config(rng)
        p = random_params(cfg, seed=seed)
        n = int(rng.integers(1, 5))
        out = run_inference(p, rng.integers(0, 6, size=n), cfg, trace=True)
        for state in out.trace:
            np.testing.assert_allclose(state.qz.sum(axis=1), 1.0, atol=1e-12)
            if state.qh is not None:
                np.testing.assert_allclose(state.qh.sum(axis=2), 1.0, atol=1e-12)
                assert np.all(state.qh[:, np.arange(n), np.arange(n)] == 0.0)
            if state.qroot is not None:
                assert state.qroot.sum() == pytest.approx(1.0, abs=1e-12)
            if state.qg is not None:
                np.testing.assert_allclose(state.qg.sum(axis=-1), 1.0, atol=1e-12)

    @pytest.mark.parametrize("dec", ["full", "uv", "uvw"])
    def test_annihilation_zero_ternary_gives_unary(self, dec):
        cfg = ModelConfig(d=3, h=2, T_iters=4, gamma=1, decomposition=dec, rank=2, use_root=True, d_root=2,
                          global_variant="dep_split", m=2, use_tensorized="scalar")
        p = _zero_ternary(random_params(cfg))
        ids = [1, 4, 2, 0]
        np.testing.assert_array_equal(run_inference(p, ids, cfg).reps, p["S"][ids])
        batch = run_inference_tensorized(p, np.array([ids]), [4], cfg)
        np.testing.assert_allclose(batch.reps.data[0], p["S"][ids], atol=0)

    def test_permutation_equivariance_shared_bank(self, rng):
        cfg = ModelConfig(d=3, h=2, T_iters=3, distance=False, decomposition="uv", rank=2,
                          global_variant="all_dep", m=2, use_tensorized="scalar")
        p = random_params(cfg)
        ids = np.array([0, 3, 5, 2, 1])
        perm = rng.permutation(5)
        a = run_inference(p, ids, cfg)
        b = run_inference(p, ids[perm], cfg)
        np.testing.assert_allclose(b.reps, a.reps[perm], atol=1e-12)
        cols = np.concatenate([perm, [5, 6]])
        np.testing.assert_allclose(b.qh, a.qh[:, perm][:, :, cols], atol=1e-12)

    def test_distance_banks_break_equivariance(self):
        cfg = ModelConfig(d=3, h=1, T_iters=2, gamma=1, decomposition="full", use_tensorized="scalar")
        p = random_params(cfg, seed=5)
        ids = np.array([0, 3, 5])
        a = run_inference(p, ids, cfg).reps
        b = run_inference(p, ids[::-1], cfg).reps
        assert not np.allclose(b, a[::-1])

    def test_padding_insensitivity(self, rng):
        for _ in range(20):
            cfg = random_config(rng, use_tensorized="general")
            p = random_params(cfg)
            lens = rng.integers(1, 5, size=4)
            ids = rng.integers(0, 6, size=(4, 6))
            padded = run_inference_tensorized(p, ids, lens, cfg)
            for b, n in enumerate(lens):
                alone = run_inference_tensorized(p, ids[b:b + 1, :n], [n], cfg)
                np.testing.assert_allclose(padded.reps.data[b, :n], alone.reps.data[0], atol=1e-12)
                if cfg.use_root:
                    np.testing.assert_allclose(padded.root_rep.data[b], alone.root_rep.data[0], atol=1e-12)

    def test_padding_token_value_irrelevant(self):
        cfg = ModelConfig(d=3, h=2, gamma=1, rank=2)
        p = random_params(cfg)
        a = run_inference_tensorized(p, np.array([[1, 2, 0, 0]]), [2], cfg).reps.data[0, :2]
        b = run_inference_tensorized(p, np.array([[1, 2, 5, 3]]), [2], cfg).reps.data[0, :2]
        np.testing.assert_array_equal(a, b)

    def test_symmetric_scores_give_symmetric_head_message(self, rng):
        cfg = ModelConfig(d=3, h=2, distance=False, gamma=0, decomposition="full")
        p = random_params(cfg)
        p["T"] = p["T"] + p["T"].transpose(0, 1, 3, 2)
        state = PosteriorState(qz=rng.dirichlet(np.ones(3), size=5))
        F = compute_head_message(state, dense_scores(p, cfg), cfg)
        for c in range(2):
            np.testing.assert_allclose(F[c], F[c].T, atol=1e-15)

    def test_parameters_shared_across_iterations(self):
        shapes = {t: parameter_shapes(ModelConfig(d=3, h=2, T_iters=t, use_root=True, global_variant="all_dep"), 7)
                  for t in (1, 2, 5)}
        assert shapes[1] == shapes[2] == shapes[5]

    def test_unary_only_single_iteration_is_softmax(self):
        cfg = ModelConfig(d=4, h=1, T_iters=1, lambda_Z=0.5, use_tensorized="scalar")
        p = _zero_ternary(random_params(cfg))
        out = run_inference(p, [2, 3], cfg, trace=True)
        s = p["S"][[2, 3]] / 0.5
        expected = np.exp(s - s.max(1, keepdims=True))
        np.testing.assert_allclose(out.trace[-1].qz, expected / expected.sum(1, keepdims=True), atol=1e-15)


class TestPaths:
    def test_scalar_matches_tensorized_f64(self, rng):
        worst = 0.0
        for t in range(60):
            cfg = random_config(rng)
            p = random_params(cfg, seed=t)
            lens = rng.integers(1, 5, size=3)
            ids = rng.integers(0, 6, size=(3, int(lens.max()) + 1))
            batch = run_inference_tensorized(p, ids, lens, cfg, trace=True)
            for b, n in enumerate(lens):
                ref = run_inference(p, ids[b, :n], cfg, trace=True)
                for it, s in enumerate(ref.trace[1:]):
                    worst = max(worst, np.abs(s.qz - batch.trace[it]["qz"][b, :n]).max())
                np.testing.assert_allclose(batch.sentence(b).reps, ref.reps, atol=1e-12)
                if ref.qh is not None:
                    np.testing.assert_allclose(batch.sentence(b).qh, ref.qh, atol=1e-12)
        assert worst < 1e-12

    def test_encode_dispatch(self):
        cfg = ModelConfig(d=3, h=2, gamma=1, rank=2, use_tensorized="scalar")
        p = random_params(cfg)
        ids, lens = np.array([[1, 2, 3], [4, 5, 0]]), [3, 2]
        a = encode(p, ids, lens, cfg)
        b = run_inference_tensorized(p, ids, lens, cfg)
        np.testing.assert_allclose(a.reps.data[0], b.reps.data[0], atol=1e-12)

    def test_scalar_path_refuses_taped_parameters(self):
        cfg = ModelConfig(d=3, h=1, use_tensorized="scalar")
        tape = ad.Tape()
        p = {k: tape.watch(v) for k, v in random_params(cfg).items()}
        with pytest.raises(UnsupportedCombination):
            encode(p, np.array([[1, 2]]), [2], cfg)

    def test_empty_sentence(self):
        cfg = ModelConfig(d=3, h=1)
        p = random_params(cfg)
        with pytest.raises(EmptySentenceError):
            run_inference(p, [], cfg)
        with pytest.raises(EmptySentenceError):
            run_inference_tensorized(p, np.array([[1, 2]]), [0], cfg)

    def test_single_word_without_root_has_no_heads(self):
        cfg = ModelConfig(d=3, h=2)
        p = random_params(cfg)
        out = run_inference(p, [3], cfg)
        assert out.qh is None
        np.testing.assert_array_equal(out.reps, p["S"][[3]])
        state = init_state(p["S"][[3]], cfg)
        with pytest.raises(HeadDomainEmpty):
            update_head_posteriors(state, np.zeros((2, 1, 1)), cfg)

    def test_single_word_with_root_attaches_to_root(self):
        cfg = ModelConfig(d=3, h=2, use_root=True, d_root=2)
        out = run_inference(random_params(cfg), [3], cfg)
        np.testing.assert_allclose(out.qh[:, 0], [[0.0, 1.0]] * 2)

    def test_dropout_needs_rng_and_only_acts_in_training(self):
        cfg = ModelConfig(d=3, h=2, gamma=1, rank=2, dropout=0.5)
        p = random_params(cfg)
        ids, lens = np.array([[1, 2, 3]]), [3]
        with pytest.raises(ValueError):
            run_inference_tensorized(p, ids, lens, cfg, training=True)
        ev = run_inference_tensorized(p, ids, lens, cfg).reps.data
        tr = run_inference_tensorized(p, ids, lens, cfg, training=True, rng=np.random.default_rng(0)).reps.data
        assert not np.allclose(ev, tr)
        again = run_inference_tensorized(p, ids, lens, cfg).reps.data
        np.testing.assert_array_equal(ev, again)

    def test_lambda_h_default(self):
        cfg = ModelConfig(d=8, h=1, gamma=0, distance=False, decomposition="full")
        cfg_explicit = ModelConfig(d=8, h=1, gamma=0, distance=False, decomposition="full", lambda_H=1 / 8)
        p = random_params(cfg)
        np.testing.assert_array_equal(run_inference(p, [1, 2, 3], cfg).qh,
                                      run_inference(p, [1, 2, 3], cfg_explicit).qh)


def _attention_reference(qz, U, V, lam):
    """Masked scaled dot-product attention with queries qz@U and tied keys/values qz@V, mapped back by U."""
    q = qz @ U
    k = qz @ V
    scores = q @ k.T / lam
    n = len(qz)
    out = np.zeros_like(qz)
    for i in range(n):
        row = [scores[i, j] for j in range(n) if j != i]
        if not row:
            continue
        top = max(row)
        w = {j: np.exp(scores[i, j] - top) for j in range(n) if j != i}
        z = sum(w.values())
        ctx = sum(w[j] / z * k[j] for j in w)
        out[i] = ctx @ U.T
    return out


class TestTransformerForm:
    def test_single_channel_matches_attention(self, rng):
        for _ in range(100):
            n, d, r = int(rng.integers(2, 6)), int(rng.integers(2, 5)), int(rng.integers(1, 4))
            qz = rng.dirichlet(np.ones(d), size=n)
            U, V = rng.normal(size=(d, r)), rng.normal(size=(d, r))
            lam = float(rng.uniform(0.1, 2.0))
            np.testing.assert_allclose(single_channel_update(qz, U, V, lam).data,
                                       _attention_reference(qz, U, V, lam), atol=1e-12)

    @pytest.mark.parametrize("bad", [
        {"decomposition": "full"}, {"distance": True}, {"use_root": True},
        {"global_variant": "all_dep"}, {"use_async": False}, {"beta_Z": 0.1}, {"alpha_H": 0.5},
    ])
    def test_rejects_unsupported(self, bad):
        kw = dict(d=3, h=2, distance=False, rank=2, use_tensorized="transformer_form")
        kw.update(bad)
        cfg = ModelConfig(**kw)
        with pytest.raises(UnsupportedCombination):
            run_inference_transformer_form(random_params(cfg), np.array([[1, 2]]), [2], cfg)

    def test_label_update_formula(self, rng):
        cfg = ModelConfig(d=3, h=2, T_iters=1, distance=False, rank=2, lambda_H=0.7,
                          use_tensorized="transformer_form")
        p = random_params(cfg)
        ids = np.array([1, 4, 2])
        out = run_inference_transformer_form(p, ids[None], [3], cfg).reps.data[0]
        qz = np.exp(p["S"][ids]) / np.exp(p["S"][ids]).sum(1, keepdims=True)
        G = sum(_attention_reference(qz, p["U"][0, :, c], p["V"][0, :, c], 0.7) for c in range(2))
        np.testing.assert_allclose(out, p["S"][ids] + 2 * G, atol=1e-12)

    def test_padding_insensitive(self, rng):
        cfg = ModelConfig(d=3, h=2, T_iters=2, distance=False, rank=2, use_tensorized="transformer_form")
        p = random_params(cfg)
        ids = rng.integers(0, 6, size=(3, 5))
        lens = [5, 2, 3]
        batch = run_inference_transformer_form(p, ids, lens, cfg)
        for b, n in enumerate(lens):
            alone = run_inference_transformer_form(p, ids[b:b + 1, :n], [n], cfg)
            np.testing.assert_allclose(batch.reps.data[b, :n], alone.reps.data[0], atol=1e-12)


class TestDependencies:
    def test_zero_ternary_uniform_heads_tie_to_smallest(self):
        cfg = ModelConfig(d=3, h=2)
        p = _zero_ternary(random_params(cfg))
        tokens = "a b c d e".split()
        out = run_inference(p, [1, 2, 3, 4, 5], cfg)
        heads, probs = extract_dependency_heads(out.qh)
        np.testing.assert_array_equal(heads[0], [1, 0, 0, 0, 0])
        np.testing.assert_allclose(probs, 0.25)
        lines = format_dependencies(tokens, out.qh, cfg)
        assert lines[:3] == ["channel 1", "1:a -> 2:b (0.25)", "2:b -> 1:a (0.25)"]

    def test_block_counts(self):
        cfg = ModelConfig(d=3, h=3, gamma=1, rank=2)
        out = run_inference(random_params(cfg), list(range(6)) + [0, 1], cfg)
        lines = format_dependencies([f"w{i}" for i in range(8)], out.qh, cfg)
        assert len(lines) == 3 * (8 + 1)
        assert sum(l.startswith("channel") for l in lines) == 3

    def test_root_and_global_targets(self):
        cfg = ModelConfig(d=3, h=1, use_root=True, global_variant="all_dep", m=1)
        qh = np.array([[[0.0, 0.1, 0.8, 0.1], [0.1, 0.0, 0.1, 0.8]]])
        lines = format_dependencies(["x", "y"], qh, cfg)
        assert lines[1:] == ["1:x -> 0:<root> (0.80)", "2:y -> g1:<global> (0.80)"]


def _softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _substituted_reference(p, ids, cfg):
    """General scalar updates with the label message replaced by 2 * sum_c Qh_c Qz T_c^T."""
    unary = p["S"][ids]
    scores = dense_scores(p, cfg)
    state = init_state(unary, cfg)
    for _ in range(cfg.T_iters):
        F = compute_head_message(state, scores, cfg)
        state.qh, state.hmsg = update_head_posteriors(state, F, cfg)
        G = 2 * sum(state.qh[c] @ state.qz @ scores.T[0, c].T for c in range(cfg.h))
        reps = unary + G
        state.qz = _softmax(reps / cfg.lambda_Z)
    return reps


class TestWorkedExamples:
    def test_zero_unary_gives_uniform_labels(self):
        cfg = ModelConfig(d=4, h=1)
        np.testing.assert_allclose(init_state(np.zeros((3, 4)), cfg).qz, 0.25)

    def test_two_words_attend_to_each_other(self):
        cfg = ModelConfig(d=2, h=2)
        qh = init_state(np.zeros((2, 2)), cfg).qh
        for c in range(2):
            np.testing.assert_array_equal(qh[c], [[0.0, 1.0], [1.0, 0.0]])

    def test_label_temperature_divides_logits(self, rng):
        s = rng.normal(size=(3, 4))
        qz = init_state(s, ModelConfig(d=4, h=1, lambda_Z=2.0)).qz
        np.testing.assert_allclose(qz, _softmax(s / 2), atol=1e-15)

    def test_zero_scores_give_zero_head_message(self, rng):
        cfg = ModelConfig(d=3, h=2, decomposition="full")
        scores = DenseScores(T=np.zeros((cfg.n_banks, 2, 3, 3)))
        F = compute_head_message(init_state(rng.normal(size=(4, 3)), cfg), scores, cfg)
        off = ~np.eye(4, dtype=bool)
        np.testing.assert_array_equal(F[:, off], 0.0)

    def test_head_message_two_words_one_label(self):
        cfg = ModelConfig(d=1, h=1, decomposition="full", gamma=1)
        T = np.arange(1.0, cfg.n_banks + 1).reshape(cfg.n_banks, 1, 1, 1)
        F = compute_head_message(PosteriorState(qz=np.ones((2, 1))), DenseScores(T=T), cfg)
        assert F[0, 0, 1] == T[bank_of(0, 1, cfg), 0, 0, 0]
        assert F[0, 1, 0] == T[bank_of(1, 0, cfg), 0, 0, 0]

    def test_head_message_matches_quadruple_loop(self, rng):
        cfg = ModelConfig(d=3, h=2, gamma=1, decomposition="full")
        T = rng.normal(size=(cfg.n_banks, 2, 3, 3))
        qz = rng.dirichlet(np.ones(3), size=3)
        F = compute_head_message(PosteriorState(qz=qz), DenseScores(T=T), cfg)
        for c in range(2):
            for i in range(3):
                for j in range(3):
                    if i == j:
                        continue
                    want = sum(qz[i, a] * qz[j, b] * T[bank_of(i, j, cfg), c, a, b]
                               for a in range(3) for b in range(3))
                    assert F[c, i, j] == pytest.approx(want, abs=1e-14)

    def test_label_message_two_terms_by_hand(self, rng):
        cfg = ModelConfig(d=2, h=1, decomposition="full", distance=False)
        T = rng.normal(size=(1, 1, 2, 2))
        qz = rng.dirichlet(np.ones(2), size=2)
        qh = np.array([[[0.0, 1.0], [1.0, 0.0]]])
        G = compute_label_message(PosteriorState(qz=qz, qh=qh), DenseScores(T=T), cfg)
        np.testing.assert_allclose(G[0], T[0, 0] @ qz[1] + T[0, 0].T @ qz[1], atol=1e-15)

    def test_label_message_symmetric_case(self, rng):
        cfg = ModelConfig(d=3, h=2, decomposition="full", distance=False)
        A = rng.normal(size=(1, 2, 3, 3))
        T = A + A.transpose(0, 1, 3, 2)
        qz = rng.dirichlet(np.ones(3), size=4)
        qh = rng.random((2, 4, 4))
        qh = qh + qh.transpose(0, 2, 1)
        qh[:, np.arange(4), np.arange(4)] = 0.0
        G = compute_label_message(PosteriorState(qz=qz, qh=qh), DenseScores(T=T), cfg)
        want = 2 * sum(qh[c] @ qz @ T[0, c].T for c in range(2))
        np.testing.assert_allclose(G, want, atol=1e-12)

    def test_head_step_size_half_averages(self, rng):
        cfg = ModelConfig(d=3, h=1, alpha_H=0.5)
        state = init_state(rng.normal(size=(3, 3)), cfg)
        F = rng.normal(size=(1, 3, 3))
        qh, _ = update_head_posteriors(state, F, cfg)
        full, _ = update_head_posteriors(state, F, ModelConfig(d=3, h=1))
        np.testing.assert_allclose(qh, 0.5 * full + 0.5 * state.qh, atol=1e-15)

    def test_head_temperature_keeps_argmax(self, rng):
        state = init_state(rng.normal(size=(4, 3)), ModelConfig(d=3, h=1))
        F = rng.normal(size=(1, 4, 4))
        picks = [update_head_posteriors(state, F, ModelConfig(d=3, h=1, lambda_H=lam))[0].argmax(-1)
                 for lam in (0.1, 1.0, 7.0)]
        np.testing.assert_array_equal(picks[0], picks[1])
        np.testing.assert_array_equal(picks[0], picks[2])

    def test_damped_labels_stationary_without_message(self, rng):
        cfg = ModelConfig(d=3, h=1, beta_Z=0.5)
        s = rng.normal(size=(3, 3))
        state = init_state(s, cfg)
        qz, zmsg = update_label_posteriors(state, np.zeros_like(s), s, cfg)
        np.testing.assert_allclose(qz, _softmax(s), atol=1e-15)
        np.testing.assert_allclose(zmsg, s, atol=1e-15)

    def test_undamped_label_update_is_softmax(self, rng):
        cfg = ModelConfig(d=3, h=1, lambda_Z=0.5)
        s, G = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        qz, _ = update_label_posteriors(init_state(s, cfg), G, s, cfg)
        np.testing.assert_allclose(qz, _softmax((s + G) / 0.5), atol=1e-15)

    def test_zero_global_scores_give_uniform_posterior(self, rng):
        cfg = ModelConfig(d=3, h=2, global_variant="dep_split", m=4)
        state = init_state(rng.normal(size=(3, 3)), cfg)
        qg = update_global_posteriors(state, DenseScores(T=None, B=np.zeros((2, 4, 3))), cfg)
        np.testing.assert_allclose(qg, 0.25)

    def test_single_global_variable_is_certain(self, rng):
        cfg = ModelConfig(d=3, h=2, global_variant="dep_split", m=1)
        state = init_state(rng.normal(size=(3, 3)), cfg)
        qg = update_global_posteriors(state, DenseScores(T=None, B=rng.normal(size=(2, 1, 3))), cfg)
        np.testing.assert_array_equal(qg, 1.0)

    def test_single_word_reps_are_unary(self):
        cfg = ModelConfig(d=3, h=2, T_iters=1)
        p = random_params(cfg)
        np.testing.assert_array_equal(run_inference(p, [4], cfg).reps, p["S"][[4]])

    def test_transformer_form_equals_substituted_general_path(self, rng):
        cfg = ModelConfig(d=3, h=2, T_iters=3, distance=False, rank=2, lambda_H=0.6,
                          use_tensorized="transformer_form")
        p = random_params(cfg)
        p["V"] = p["U"].copy()
        ids = np.array([1, 4, 2, 5])
        fast = run_inference_transformer_form(p, ids[None], [4], cfg).reps.data[0]
        np.testing.assert_allclose(fast, _substituted_reference(p, ids, cfg), atol=1e-12)

    def test_two_word_attention_weights_are_one(self, rng):
        cfg = ModelConfig(d=3, h=2, distance=False, rank=2, use_tensorized="transformer_form")
        out = run_inference(random_params(cfg), [1, 2], cfg)
        np.testing.assert_allclose(out.qh[:, [0, 1], [1, 0]], 1.0)

    def test_deterministic_heads_print_certain_arcs(self):
        cfg = ModelConfig(d=3, h=1)
        qh = np.array([[[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]])
        lines = format_dependencies(["a", "b", "c"], qh, cfg)
        assert lines == ["channel 1", "1:a -> 3:c (1.00)", "2:b -> 1:a (1.00)", "3:c -> 2:b (1.00)"]
