import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wavesep.bss_eval import (EvalReport, Metrics, bss_eval, decompose, evaluate_dataset, median_metrics,
                              reports_to_csv, sdr_sir_sar)
from wavesep.errors import DegenerateReferenceError, ReportError


def lstsq_decompose(est, refs, j, L):
    """Explicit delay matrices and numpy least squares."""
    n = len(est)
    pad = lambda x: np.concatenate([x, np.zeros(L - 1)])
    def delays(r):
        return np.stack([np.concatenate([np.zeros(d), r, np.zeros(L - 1 - d)]) for d in range(L)], axis=1)
    e = pad(est)
    a_t = delays(refs[j])
    a_all = np.concatenate([delays(r) for r in refs], axis=1)
    p_t = a_t @ np.linalg.lstsq(a_t, e, rcond=None)[0]
    p_all = a_all @ np.linalg.lstsq(a_all, e, rcond=None)[0]
    assert len(e) == n + L - 1
    return p_t, p_all - p_t, e - p_all


class TestDecompose:
    def test_orthonormal_example(self):
        d = decompose(np.array([1.0, 0.5]), np.array([[1.0, 0], [0, 1.0]]), 0, filter_length=1)
        np.testing.assert_allclose(d.s_target, [1, 0], atol=1e-9)
        np.testing.assert_allclose(d.e_interf, [0, 0.5], atol=1e-9)
        np.testing.assert_allclose(d.e_artif, [0, 0], atol=1e-9)
        m = sdr_sir_sar(d)
        assert m.sdr == pytest.approx(6.0206, abs=1e-4)
        assert m.sir == pytest.approx(6.0206, abs=1e-4)
        assert m.sar == 100.0

    def test_member(self):
        refs = np.random.default_rng(0).standard_normal((2, 50))
        d = decompose(refs[1], refs, 1, filter_length=1)
        np.testing.assert_allclose(d.s_target, refs[1], atol=1e-9)
        assert np.max(np.abs(d.e_interf)) < 1e-9 and np.max(np.abs(d.e_artif)) < 1e-9
        assert sdr_sir_sar(d) == Metrics(100.0, 100.0, 100.0)

    def test_orthogonal_is_pure_artifact(self):
        refs = np.array([[1.0, 0, 0], [0, 1.0, 0]])
        d = decompose(np.array([0, 0, 2.0]), refs, 0, filter_length=1)
        np.testing.assert_allclose(d.e_artif, [0, 0, 2.0], atol=1e-12)
        m = sdr_sir_sar(d)
        assert m.sdr == -100.0 and m.sir == -100.0

    @pytest.mark.parametrize("L", [1, 2, 7, 32])
    def test_matches_lstsq_oracle(self, L):
        rng = np.random.default_rng(L)
        refs = rng.standard_normal((3, 120))
        est = 0.7 * refs[0] + 0.2 * np.roll(refs[1], 2) + 0.1 * rng.standard_normal(120)
        d = decompose(est, refs, 0, filter_length=L)
        for got, want in zip((d.s_target, d.e_interf, d.e_artif), lstsq_decompose(est, refs, 0, L)):
            np.testing.assert_allclose(got, want, atol=1e-8)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), L=st.integers(1, 16), j=st.integers(0, 2))
    def test_additive_and_orthogonal(self, seed, L, j):
        rng = np.random.default_rng(seed)
        refs = rng.standard_normal((3, 80))
        est = rng.standard_normal(80)
        d = decompose(est, refs, j, filter_length=L)
        padded = np.concatenate([est, np.zeros(L - 1)])
        assert np.max(np.abs(d.estimate - padded)) < 1e-6
        assert abs(np.dot(d.s_target + d.e_interf, d.e_artif)) < 1e-6
        for r in refs:
            for k in range(L):
                shifted = np.concatenate([np.zeros(k), r, np.zeros(L - 1 - k)])
                assert abs(np.dot(shifted, d.e_artif)) < 1e-6

    def test_silent_reference(self):
        with pytest.raises(DegenerateReferenceError):
            decompose(np.ones(8), np.array([np.ones(8), np.zeros(8)]), 0, filter_length=2)


class TestMetrics:
    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000), scale=st.floats(1e-3, 1e3))
    def test_scale_invariant(self, seed, scale):
        rng = np.random.default_rng(seed)
        refs = rng.standard_normal((2, 60))
        est = refs[0] + 0.3 * rng.standard_normal(60)
        a = bss_eval(est[None], refs[:1], 4)[0]
        b = bss_eval(scale * est[None], refs[:1], 4)[0]
        assert (a.sdr, a.sir, a.sar) == pytest.approx((b.sdr, b.sir, b.sar), abs=1e-6)

    def test_idempotent_projection(self):
        # re-decomposing the target part (padded references) reproduces it as a perfect member
        rng = np.random.default_rng(1)
        refs = rng.standard_normal((2, 40))
        L = 5
        d = decompose(refs[0] + rng.standard_normal(40), refs, 0, filter_length=L)
        padded = np.pad(refs, ((0, 0), (0, L - 1)))
        d2 = decompose(d.s_target, padded, 0, filter_length=L)
        np.testing.assert_allclose(d2.s_target[:len(d.s_target)], d.s_target, atol=1e-8)
        assert np.max(np.abs(d2.s_target[len(d.s_target):])) < 1e-8
        assert np.max(np.abs(d2.e_interf)) < 1e-8 and np.max(np.abs(d2.e_artif)) < 1e-8

    def test_artifact_shrinks_with_filter_length(self):
        rng = np.random.default_rng(2)
        refs = rng.standard_normal((2, 200))
        est = np.convolve(refs[0], [1, 0.5, 0.25])[:200] + 0.1 * rng.standard_normal(200)
        sars = [bss_eval(est[None].repeat(2, 0), refs, L)[0].sar for L in (1, 2, 4, 8, 16)]
        assert all(b >= a - 1e-9 for a, b in zip(sars, sars[1:]))

    def test_clamped(self):
        rng = np.random.default_rng(3)
        refs = rng.standard_normal((2, 100))
        for m in bss_eval(rng.standard_normal((2, 100)), refs, 8):
            assert all(-100 <= v <= 100 for v in (m.sdr, m.sir, m.sar))


def dataset(n_tracks, rng, n=300):
    return {f"t{i}": {s: rng.standard_normal(n) for s in ("vocals", "accompaniment")} for i in range(n_tracks)}


class TestEvaluateDataset:
    def test_oracle(self):
        refs = dataset(3, np.random.default_rng(0))
        report = evaluate_dataset(refs, refs, 64)
        for m in report.medians.values():
            assert (m.sdr, m.sir, m.sar) == (100.0, 100.0, 100.0)

    def test_oracle_default_length(self):
        refs = dataset(1, np.random.default_rng(1), n=2000)
        report = evaluate_dataset(refs, refs)
        assert report.filter_length == 512 and report.medians["vocals"].sdr == 100.0

    def test_one_track_median(self):
        rng = np.random.default_rng(2)
        refs = dataset(1, rng)
        ests = {t: {s: w + 0.5 * rng.standard_normal(len(w)) for s, w in srcs.items()} for t, srcs in refs.items()}
        report = evaluate_dataset(ests, refs, 8)
        assert report.medians["vocals"] == report.tracks["t0"]["vocals"]

    def test_median_law(self):
        per = {f"t{i}": {"vocals": Metrics(v, v, v)} for i, v in enumerate([1.0, 5.0, 100.0])}
        assert median_metrics(per, "vocals").sdr == 5.0
        per["t3"] = {"vocals": Metrics(7.0, 7.0, 7.0)}
        assert median_metrics(per, "vocals").sdr == 6.0

    def test_missing_track(self):
        refs = dataset(2, np.random.default_rng(0))
        with pytest.raises(ReportError, match="t1"):
            evaluate_dataset({"t0": refs["t0"]}, refs, 4)

    def test_missing_source(self):
        refs = dataset(1, np.random.default_rng(0))
        with pytest.raises(ReportError):
            evaluate_dataset({"t0": {"vocals": refs["t0"]["vocals"]}}, refs, 4)

    def test_save_load_csv(self, tmp_path):
        refs = dataset(2, np.random.default_rng(0))
        report = evaluate_dataset(refs, refs, 4, name="oracle")
        report.save(tmp_path / "r.json", tmp_path / "r.csv")
        back = EvalReport.load(tmp_path / "r.json")
        assert back == report
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "model,vocals_SDR,vocals_SIR,vocals_SAR,accompaniment_SDR,accompaniment_SIR,accompaniment_SAR"
        assert lines[1] == "oracle," + ",".join(["100.0000"] * 6)

    def test_merge_reports(self):
        a = EvalReport("a", 4, {}, {"vocals": Metrics(1, 2, 3)})
        b = EvalReport("b", 4, {}, {"drums": Metrics(4, 5, 6)})
        rows = reports_to_csv([a, b]).splitlines()
        assert rows[1] == "a,1.0000,2.0000,3.0000,,,"
        assert rows[2] == "b,,,,4.0000,5.0000,6.0000"

    def test_malformed_report(self, tmp_path):
        (tmp_path / "bad.json").write_text('{"name": "x"}')
        with pytest.raises(ReportError):
            EvalReport.load(tmp_path / "bad.json")
