import numpy as np
import pytest

from fedray.linalg import SvdResult, refactor_lstsq, select_rank, svd, truncate


def random_matrix(rng, rows, cols, scale=1.0):
    return scale * rng.standard_normal((rows, cols))


def assert_svd_invariants(res: SvdResult, w: np.ndarray):
    u, s, v = res.left, res.singular, res.right
    m = min(w.shape)
    assert u.shape == (w.shape[0], m)
    assert v.shape == (w.shape[1], m)
    assert np.all(np.diff(s) <= 1e-12 * max(s[0], 1.0))
    assert np.all(s >= 0)
    recon = (u * s) @ v.T
    assert np.linalg.norm(recon - w) <= 1e-9 * max(1.0, np.linalg.norm(w))
    assert np.allclose(u.T @ u, np.eye(m), atol=1e-9)
    assert np.allclose(v.T @ v, np.eye(m), atol=1e-9)
    # sign convention: dominant entry of each left singular vector is non-negative
    anchor = np.argmax(np.abs(u), axis=0)
    assert np.all(u[anchor, np.arange(m)] >= 0)


class TestSvd:
    def test_identity(self):
        res = svd(np.eye(4))
        assert np.allclose(res.singular, [1, 1, 1, 1])
        uv = res.left @ res.right.T
        assert np.allclose(uv @ uv.T, np.eye(4), atol=1e-12)

    def test_diagonal(self):
        res = svd(np.diag([3.0, 2.0]))
        assert np.allclose(res.singular, [3.0, 2.0])

    def test_against_eigendecomposition_oracle(self):
        # Independent route: singular values are the square roots of the
        # eigenvalues of W^T W from a symmetric eigensolver.
        rng = np.random.default_rng(7)
        w = random_matrix(rng, 8, 5)
        res = svd(w)
        eigvals = np.linalg.eigvalsh(w.T @ w)[::-1]
        expected = np.sqrt(np.clip(eigvals, 0.0, None))
        assert np.allclose(res.singular, expected, atol=1e-7)
        assert np.linalg.norm(res.reconstruct() - w) <= 1e-9 * max(1.0, np.linalg.norm(w))

    @pytest.mark.parametrize("shape", [(3, 9), (6, 6), (9, 3), (1, 5), (5, 1)])
    @pytest.mark.parametrize("seed", range(5))
    def test_invariants_all_shape_classes(self, shape, seed):
        rng = np.random.default_rng(1000 + seed)
        w = random_matrix(rng, *shape, scale=rng.uniform(0.1, 10.0))
        assert_svd_invariants(svd(w), w)

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        w = random_matrix(rng, 7, 4)
        a, b = svd(w), svd(w.copy())
        assert np.array_equal(a.left, b.left)
        assert np.array_equal(a.singular, b.singular)
        assert np.array_equal(a.right, b.right)

    def test_rejects_non_finite_with_location(self):
        w = np.ones((3, 3))
        w[1, 2] = np.nan
        with pytest.raises(ValueError, match=r"\(1, 2\)"):
            svd(w)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            svd(np.zeros((0, 3)))


class TestSelectRank:
    def test_uniform_spectrum(self):
        assert select_rank(np.array([1.0, 1, 1, 1]), 0.5) == 2

    def test_cumulative_scan_oracle(self):
        # 10/12 < 0.9 <= 11/12, so the smallest qualifying rank is 2.
        s = np.array([10.0, 1.0, 1.0])
        cum = np.cumsum(s) / s.sum()
        expected = int(np.argmax(cum >= 0.9)) + 1
        assert expected == 2
        assert select_rank(s, 0.9) == expected

    def test_full_retention(self):
        rng = np.random.default_rng(11)
        s = np.sort(rng.uniform(0.1, 5.0, size=9))[::-1]
        assert select_rank(s, 1.0) == 9

    def test_monotone_in_alpha(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            s = np.sort(rng.uniform(0.0, 5.0, size=rng.integers(1, 20)))[::-1]
            if s.sum() == 0:
                continue
            alphas = np.sort(rng.uniform(0.01, 1.0, size=4))
            ranks = [select_rank(s, a) for a in alphas]
            assert ranks == sorted(ranks)

    def test_rejects_all_zero(self):
        with pytest.raises(ValueError, match="degenerate"):
            select_rank(np.zeros(4), 0.9)

    def test_rejects_bad_alpha(self):
        with pytest.raises(ValueError):
            select_rank(np.array([1.0]), 0.0)
        with pytest.raises(ValueError):
            select_rank(np.array([1.0]), 1.5)

    def test_rejects_unsorted(self):
        with pytest.raises(ValueError):
            select_rank(np.array([1.0, 2.0]), 0.5)


class TestTruncate:
    def test_full_rank_reconstructs(self):
        rng = np.random.default_rng(21)
        w = random_matrix(rng, 5, 7)
        left, right = truncate(svd(w), 5)
        assert np.allclose(left @ right, w, atol=1e-9)

    def test_exact_low_rank(self):
        rng = np.random.default_rng(22)
        w = np.outer(rng.standard_normal(6), rng.standard_normal(4))
        left, right = truncate(svd(w), 1)
        assert np.allclose(left @ right, w, atol=1e-9)

    def test_eckart_young_residual(self):
        rng = np.random.default_rng(23)
        w = random_matrix(rng, 6, 6)
        res = svd(w)
        left, right = truncate(res, 3)
        residual = np.linalg.norm(w - left @ right)
        expected = np.sqrt(np.sum(res.singular[3:] ** 2))
        assert abs(residual - expected) <= 1e-7

    @pytest.mark.parametrize("seed", range(5))
    def test_eckart_young_optimality(self, seed):
        # No random rank-r matrix beats the truncated SVD in Frobenius norm.
        rng = np.random.default_rng(3000 + seed)
        w = random_matrix(rng, 8, 6)
        for r in (1, 3, 5):
            left, right = truncate(svd(w), r)
            best = np.linalg.norm(w - left @ right)
            for _ in range(20):
                competitor = random_matrix(rng, 8, r) @ random_matrix(rng, r, 6)
                assert best <= np.linalg.norm(w - competitor) + 1e-12

    def test_rank_out_of_range(self):
        res = svd(np.eye(3))
        with pytest.raises(ValueError):
            truncate(res, 0)
        with pytest.raises(ValueError):
            truncate(res, 4)


def random_orthonormal_rows(rng, r, v):
    q, _ = np.linalg.qr(rng.standard_normal((v, r)))
    return q.T[:r]


class TestRefactorLstsq:
    def test_consistent_system(self):
        rng = np.random.default_rng(31)
        left0 = random_matrix(rng, 6, 3)
        right = random_orthonormal_rows(rng, 3, 8)
        recovered = refactor_lstsq(left0 @ right, right)
        assert np.allclose(recovered, left0, atol=1e-8)

    def test_identity_factor(self):
        rng = np.random.default_rng(32)
        w = random_matrix(rng, 4, 4)
        assert np.allclose(refactor_lstsq(w, np.eye(4)), w, atol=1e-12)

    def test_pseudoinverse_oracle(self):
        rng = np.random.default_rng(33)
        w = random_matrix(rng, 7, 9)
        right = random_orthonormal_rows(rng, 4, 9)
        expected = w @ right.T @ np.linalg.inv(right @ right.T)
        assert np.allclose(refactor_lstsq(w, right), expected, atol=1e-7)

    @pytest.mark.parametrize("seed", range(5))
    def test_residual_orthogonal_to_rows(self, seed):
        rng = np.random.default_rng(4000 + seed)
        w = random_matrix(rng, 6, 8)
        right = random_matrix(rng, 3, 8)
        left = refactor_lstsq(w, right)
        assert np.allclose((w - left @ right) @ right.T, 0.0, atol=1e-7)

    def test_projection_property(self):
        rng = np.random.default_rng(35)
        right = random_orthonormal_rows(rng, 3, 10)
        left = random_matrix(rng, 5, 3)
        assert np.allclose(refactor_lstsq(left @ right, right), left, atol=1e-10)

    def test_rejects_rank_deficient(self):
        right = np.ones((2, 5))
        with pytest.raises(ValueError, match="rank-deficient"):
            refactor_lstsq(np.ones((3, 5)), right)
