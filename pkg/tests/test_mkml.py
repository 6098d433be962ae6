import numpy as np
import pytest

from patchtraj.errors import InvalidInputError
from patchtraj.mkml import (MkmlParams, SimilarityModel, dump_similarity_model,
                            mkml_objective, optimize_similarity,
                            rank_atlases_mkml, update_L, update_S, update_w)
from patchtraj.similarity import KernelBank, build_kernel_bank, sigma_grid

from oracles import grid_simplex_minimize, mkml_row_objective, mkml_w_objective


def random_bank(rng, n, m):
    """Kernel bank with synthetic symmetric positive matrices."""
    kernels = np.empty((m, n, n))
    for l in range(m):
        A = rng.uniform(0.05, 1.0, (n, n))
        K = (A + A.T) / 2.0
        np.fill_diagonal(K, 1.0)
        kernels[l] = K / K.max()
    return KernelBank(kernels=kernels, sigmas=np.linspace(1, 2, m), knn_k=2)


def two_cluster_patches(rng, per_cluster=5, d=8, gap=0.5):
    a = rng.uniform(0.2, 0.4, d)
    b = a + gap
    return np.vstack([np.tile(a, (per_cluster, 1)), np.tile(b, (per_cluster, 1))])


class TestObjective:
    def test_single_kernel_entropy_vanishes(self, rng):
        bank = random_bank(rng, 4, 1)
        params = MkmlParams(c=2)
        S = np.full((4, 4), 0.25)
        L = np.eye(4)[:, :2]
        w = np.array([1.0])
        obj = mkml_objective(S, L, w, bank, params)
        # removing the entropy term changes nothing when w = [1]
        M = bank.kernels[0]
        manual = -np.sum(M * S) + params.beta * np.sum(S * S) + params.gamma * (
            np.sum(L * L) - np.trace(L.T @ S @ L))
        assert obj == pytest.approx(manual, abs=1e-12)

    def test_identity_similarity_annihilates_trace(self, rng):
        bank = random_bank(rng, 5, 2)
        params = MkmlParams(c=2)
        S = np.eye(5)
        L = np.eye(5)[:, :2]
        w = np.array([0.5, 0.5])
        obj = mkml_objective(S, L, w, bank, params)
        M = 0.5 * bank.kernels[0] + 0.5 * bank.kernels[1]
        expected = (-np.sum(M * S) + params.beta * 5.0
                    + params.rho * (0.5 * np.log(0.5) * 2))
        assert obj == pytest.approx(expected, abs=1e-12)

    def test_matches_term_by_term_oracle(self, rng):
        n, m, c = 5, 3, 2
        bank = random_bank(rng, n, m)
        params = MkmlParams(c=c, beta=0.7, gamma=1.3, rho=0.2)
        S = rng.random((n, n))
        S /= S.sum(axis=1, keepdims=True)
        L, _ = np.linalg.qr(rng.normal(size=(n, c)))
        w = rng.random(m)
        w /= w.sum()
        got = mkml_objective(S, L, w, bank, params)
        fit = -sum(w[l] * bank.kernels[l][i, j] * S[i, j]
                   for l in range(m) for i in range(n) for j in range(n))
        ridge = params.beta * sum(S[i, j] ** 2 for i in range(n) for j in range(n))
        lap = np.eye(n) - S
        spectral = params.gamma * sum(
            L[:, k] @ lap @ L[:, k] for k in range(c))
        entropy = params.rho * sum(wl * np.log(wl) for wl in w if wl > 0)
        assert got == pytest.approx(fit + ridge + spectral + entropy, abs=1e-10)

    def test_shape_mismatch(self, rng):
        bank = random_bank(rng, 4, 2)
        with pytest.raises(InvalidInputError):
            mkml_objective(np.eye(3), np.eye(4)[:, :2], np.array([0.5, 0.5]),
                           bank, MkmlParams(c=2))


class TestUpdateW:
    def test_identical_kernels_split_evenly(self, rng):
        K = random_bank(rng, 4, 1).kernels[0]
        bank = KernelBank(kernels=np.stack([K, K]), sigmas=np.array([1.0, 2.0]), knn_k=2)
        S = rng.random((4, 4))
        S /= S.sum(axis=1, keepdims=True)
        w = update_w(S, bank, rho=0.5)
        assert np.allclose(w, [0.5, 0.5], atol=1e-12)

    def test_large_rho_flattens(self, rng):
        bank = random_bank(rng, 4, 3)
        S = rng.random((4, 4))
        S /= S.sum(axis=1, keepdims=True)
        w = update_w(S, bank, rho=1e6)
        assert np.abs(w - 1.0 / 3.0).max() < 1e-3

    def test_matches_grid_oracle(self, rng):
        bank = random_bank(rng, 4, 3)
        S = rng.random((4, 4))
        S /= S.sum(axis=1, keepdims=True)
        for rho in (0.1, 1.0):
            w = update_w(S, bank, rho)
            a = np.einsum("lij,ij->l", bank.kernels, S)
            best = grid_simplex_minimize(
                lambda rows: mkml_w_objective(rows, a, rho), dim=3,
                coarse_steps=100, refinements=4)
            assert np.abs(w - best).max() < 1e-3

    def test_simplex_constraint(self, rng):
        bank = random_bank(rng, 6, 4)
        S = np.eye(6)
        w = update_w(S, bank, rho=0.3)
        assert abs(w.sum() - 1.0) < 1e-10
        assert w.min() >= 0.0


class TestUpdateL:
    def test_identity_similarity_orthonormal(self):
        L = update_L(np.eye(5), 2)
        assert np.abs(L.T @ L - np.eye(2)).max() < 1e-8

    def test_block_diagonal_recovers_indicators(self):
        block = np.full((3, 3), 1.0 / 3.0)
        S = np.zeros((6, 6))
        S[:3, :3] = block
        S[3:, 3:] = block
        L = update_L(S, 2)
        for members in (range(0, 3), range(3, 6)):
            v = np.zeros(6)
            v[list(members)] = 1.0 / np.sqrt(3)
            resid = v - L @ (L.T @ v)
            assert np.linalg.norm(resid) < 1e-6

    def test_matches_dense_eigen_oracle(self, rng):
        A = rng.random((6, 6))
        S = (A + A.T) / 2
        L = update_L(S, 3)
        evals, vecs = np.linalg.eigh(np.eye(6) - (S + S.T) / 2)
        want = vecs[:, :3]
        # compare subspaces via projector difference
        P_got = L @ L.T
        P_want = want @ want.T
        assert np.abs(P_got - P_want).max() < 1e-8

    def test_c_out_of_range(self):
        with pytest.raises(InvalidInputError):
            update_L(np.eye(4), 4)


class TestUpdateS:
    def test_large_beta_flattens_rows(self, rng):
        bank = random_bank(rng, 5, 2)
        L = np.linalg.qr(rng.normal(size=(5, 2)))[0]
        S = update_S(L, bank, np.array([0.5, 0.5]), beta=1e6, gamma=1.0)
        assert np.abs(S - 0.2).max() < 1e-3

    def test_rows_on_simplex(self, rng):
        bank = random_bank(rng, 6, 3)
        L = np.linalg.qr(rng.normal(size=(6, 2)))[0]
        S = update_S(L, bank, np.array([0.3, 0.3, 0.4]), beta=0.8, gamma=1.2)
        assert np.abs(S.sum(axis=1) - 1.0).max() < 1e-8
        assert S.min() >= 0.0

    def test_matches_grid_qp_oracle(self, rng):
        n = 4
        bank = random_bank(rng, n, 2)
        L = np.linalg.qr(rng.normal(size=(n, 2)))[0]
        w = np.array([0.6, 0.4])
        beta, gamma = 1.0, 1.0
        S = update_S(L, bank, w, beta, gamma)
        M = np.einsum("l,lij->ij", w, bank.kernels)
        G = L @ L.T
        for i in range(n):
            q = M[i] + gamma * G[i]
            best = grid_simplex_minimize(
                lambda rows: mkml_row_objective(rows, q, beta), dim=n,
                coarse_steps=25, refinements=5)
            assert np.abs(S[i] - best).max() < 1e-3


class TestOptimize:
    def test_two_cluster_block_structure(self, rng):
        P = two_cluster_patches(rng)
        bank = build_kernel_bank(P, sigma_grid(3))
        model = optimize_similarity(bank, MkmlParams(c=2))
        S = model.S
        within = (S[:5, :5].mean() + S[5:, 5:].mean()) / 2
        between = (S[:5, 5:].mean() + S[5:, :5].mean()) / 2
        assert within > 10 * max(between, 1e-12)

    def test_single_iteration_is_composition(self, rng):
        bank = random_bank(rng, 4, 1)
        params = MkmlParams(c=2, max_iters=1)
        model = optimize_similarity(bank, params)
        # replay the initialization plus one block round by hand
        w0 = np.array([1.0])
        avg = bank.kernels.mean(axis=0)
        S0 = avg / avg.sum(axis=1, keepdims=True)
        L0 = update_L(S0, 2)
        S1 = update_S(L0, bank, w0, params.beta, params.gamma)
        L1 = update_L(S1, 2)
        w1 = update_w(S1, bank, params.rho)
        assert np.array_equal(model.S, S1)
        assert np.array_equal(model.L, L1)
        assert np.array_equal(model.w, w1)

    def test_trace_monotone_and_constraints(self, rng):
        for trial in range(5):
            n = int(rng.integers(6, 14))
            m = int(rng.choice([1, 3, 5]))
            bank = random_bank(rng, n, m)
            model = optimize_similarity(bank, MkmlParams(c=2))
            tr = model.objective_trace
            assert np.all(np.diff(tr) <= 1e-9)
            assert np.abs(model.S.sum(axis=1) - 1.0).max() < 1e-8
            assert abs(model.w.sum() - 1.0) < 1e-10
            assert np.abs(model.L.T @ model.L - np.eye(2)).max() < 1e-8

    def test_permutation_equivariance(self, rng):
        n = 5
        P = rng.uniform(0.1, 0.9, (n, 6))
        bank = build_kernel_bank(P, [1.0, 1.5], k=2)
        model = optimize_similarity(bank, MkmlParams(c=2))
        perm = rng.permutation(n)
        bank_p = build_kernel_bank(P[perm], [1.0, 1.5], k=2)
        model_p = optimize_similarity(bank_p, MkmlParams(c=2))
        assert np.abs(model.S[np.ix_(perm, perm)] - model_p.S).max() < 1e-8

    def test_n_too_small(self, rng):
        bank = random_bank(rng, 3, 1)
        with pytest.raises(InvalidInputError):
            optimize_similarity(bank, MkmlParams(c=3))

    def test_bad_params(self):
        with pytest.raises(InvalidInputError):
            MkmlParams(c=0)
        with pytest.raises(InvalidInputError):
            MkmlParams(c=2, beta=-1.0)


class TestRanking:
    def test_twin_ranked_first(self, rng):
        base = rng.uniform(0.2, 0.8, (7, 8))
        P = np.vstack([base, base[3]])
        bank = build_kernel_bank(P, sigma_grid(3))
        model = optimize_similarity(bank, MkmlParams(c=2))
        ranking = rank_atlases_mkml(model, 7)
        assert ranking.entries[0][0] == 3
        assert ranking.strategy == "mkml"

    def test_all_identical_rank_by_id(self, rng):
        P = np.tile(rng.uniform(0.3, 0.7, 6), (5, 1))
        bank = build_kernel_bank(P, [1.0], k=2)
        model = optimize_similarity(bank, MkmlParams(c=2))
        ranking = rank_atlases_mkml(model, 4)
        assert ranking.subject_ids == [0, 1, 2, 3]

    def test_scores_descending(self, rng):
        P = rng.uniform(0.1, 0.9, (8, 5))
        bank = build_kernel_bank(P, sigma_grid(2))
        model = optimize_similarity(bank, MkmlParams(c=2))
        ranking = rank_atlases_mkml(model, 0)
        assert np.all(np.diff(ranking.scores) <= 0)

    def test_out_of_range_index(self, rng):
        bank = random_bank(rng, 4, 1)
        model = optimize_similarity(bank, MkmlParams(c=2))
        with pytest.raises(InvalidInputError):
            rank_atlases_mkml(model, 4)


class TestDump:
    def test_dump_files(self, tmp_path, rng):
        bank = random_bank(rng, 5, 2)
        model = optimize_similarity(bank, MkmlParams(c=2))
        mat, meta = dump_similarity_model(model, tmp_path / "lm0")
        S_back = np.loadtxt(mat)
        assert np.abs(S_back - model.S).max() < 1e-12
        import json
        data = json.loads(meta.read_text())
        assert len(data["objective_trace"]) == len(model.objective_trace)
        assert abs(sum(data["w"]) - 1.0) < 1e-10
