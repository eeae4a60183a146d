import numpy as np
import pytest

from fedray.metrics import (
    EvalReport,
    PSNR_CAP,
    emit_csv,
    evaluate_views,
    mse,
    psnr,
    read_csv,
    ssim,
)


class TestPsnr:
    def test_closed_form_20db(self):
        a = np.zeros((4, 4, 3))
        b = np.full((4, 4, 3), 0.1)  # mse exactly 0.01
        assert mse(a, b) == pytest.approx(0.01)
        assert psnr(a, b) == pytest.approx(20.0)

    def test_mse_one_is_zero_db(self):
        a = np.zeros((2, 2, 3))
        b = np.ones((2, 2, 3))
        assert psnr(a, b) == pytest.approx(0.0)

    def test_identical_images_capped(self):
        img = np.random.default_rng(0).uniform(size=(8, 8, 3))
        assert psnr(img, img) == PSNR_CAP

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a, b = rng.uniform(size=(6, 6, 3)), rng.uniform(size=(6, 6, 3))
        assert psnr(a, b) == psnr(b, a)

    def test_strictly_decreasing_in_mse(self):
        a = np.zeros((4, 4, 3))
        values = [psnr(a, np.full((4, 4, 3), v)) for v in (0.1, 0.2, 0.4, 0.8)]
        assert all(x > y for x, y in zip(values, values[1:]))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="shapes"):
            psnr(np.zeros((2, 2, 3)), np.zeros((3, 2, 3)))


class TestSsim:
    def test_self_similarity_is_one(self):
        img = np.random.default_rng(2).uniform(size=(16, 16, 3))
        assert ssim(img, img) == pytest.approx(1.0)

    def test_constant_equal_means_is_one(self):
        a = np.full((12, 12, 3), 0.4)
        b = np.full((12, 12, 3), 0.4)
        assert ssim(a, b) == pytest.approx(1.0)

    def test_inverted_mid_contrast_pattern(self):
        # Direct-formula oracle on a 16x16 pattern: explicit per-window
        # double loop over the same 8x8 uniform windows.
        rng = np.random.default_rng(3)
        a = 0.5 + 0.4 * np.sign(rng.standard_normal((16, 16, 3)))
        b = 1.0 - a
        score = ssim(a, b)
        assert score < 0.5

        luma = np.array([0.299, 0.587, 0.114])
        ga, gb = a @ luma, b @ luma
        scores = []
        for i in range(16 - 8 + 1):
            for j in range(16 - 8 + 1):
                wa = ga[i : i + 8, j : j + 8]
                wb = gb[i : i + 8, j : j + 8]
                mu_a, mu_b = wa.mean(), wb.mean()
                va, vb = wa.var(), wb.var()
                cov = ((wa - mu_a) * (wb - mu_b)).mean()
                c1, c2 = 0.01 ** 2, 0.03 ** 2
                scores.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                              / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)))
        assert score == pytest.approx(np.mean(scores), abs=1e-12)

    def test_symmetric(self):
        rng = np.random.default_rng(4)
        a, b = rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16, 3))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_small_image_single_window(self):
        rng = np.random.default_rng(5)
        a = rng.uniform(size=(4, 4, 3))
        assert ssim(a, a) == pytest.approx(1.0)

    def test_in_valid_range(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            a, b = rng.uniform(size=(10, 10, 3)), rng.uniform(size=(10, 10, 3))
            assert -1.0 <= ssim(a, b) <= 1.0


class TestCsv:
    def test_empty_reports_header_only(self, tmp_path):
        path = tmp_path / "m.csv"
        emit_csv([], path)
        lines = path.read_text().splitlines()
        assert lines[0].startswith("#")
        assert lines[1] == "stage,view,mse,psnr,ssim"
        assert len(lines) == 2

    def test_roundtrip_and_column_means(self, tmp_path):
        rng = np.random.default_rng(7)
        truths = [rng.uniform(size=(9, 9, 3)) for _ in range(3)]
        rendered = [np.clip(t + rng.normal(0, 0.05, t.shape), 0, 1) for t in truths]
        report = evaluate_views("Init", rendered, truths)
        path = tmp_path / "m.csv"
        emit_csv([report], path)
        rows = read_csv(path)
        assert len(rows) == 3
        for row, orig in zip(rows, report.rows):
            assert float(row["mse"]) == orig.mse
            assert float(row["psnr"]) == orig.psnr
            assert float(row["ssim"]) == orig.ssim
        assert np.mean([float(r["psnr"]) for r in rows]) == pytest.approx(
            report.mean_psnr)

    def test_table_layout_stage_rows(self, tmp_path):
        img = np.zeros((8, 8, 3))
        near = np.full((8, 8, 3), 0.05)
        reports = [evaluate_views(stage, [near], [img])
                   for stage in ("Init", "Base", "Fed")]
        path = tmp_path / "m.csv"
        emit_csv(reports, path)
        stages = [r["stage"] for r in read_csv(path)]
        assert stages == ["Init", "Base", "Fed"]
