import numpy as np
import numpy.testing as npt
import pytest
from fractions import Fraction

from csicomp.channel import GeneratorParams, make_dataset
from csicomp.errors import DegenerateSampleError, DimensionError
from csicomp.evaluation import (DB_FLOOR, EvalResult, FeedbackModel,
                                IdentityBaseline, evaluate_model,
                                evaluate_sweep, format_gamma, nmse,
                                read_results_csv, sort_results,
                                write_results_csv)
from csicomp.model import Decoder, Denoiser, Encoder, ModelConfig

SMALL = GeneratorParams(n_c=64, n_t=16, n_cc=16,
                        delay_centers=(2.0, 7.0), angle_centers=(4.0, 11.0),
                        delay_spreads=(0.8, 1.2), angle_spreads=(1.0, 1.4),
                        cluster_powers=(1.0, 0.4))


class TestNmse:
    def test_perfect_reconstruction_floors(self, rng):
        x = rng.standard_normal((3, 2, 4, 4)).astype(np.float32)
        v = nmse(x, x)
        assert v.ratio == 0.0
        assert v.db == DB_FLOOR
        assert v.floored

    def test_zero_prediction_is_zero_db(self, rng):
        label = rng.standard_normal((5, 2, 4, 4)).astype(np.float32)
        v = nmse(np.zeros_like(label), label)
        assert v.ratio == pytest.approx(1.0)
        assert v.db == pytest.approx(0.0, abs=1e-9)
        assert not v.floored

    def test_ratio_point_one_is_minus_ten_db(self, rng):
        label = rng.standard_normal((1, 2, 8, 8))
        resid = rng.standard_normal((1, 2, 8, 8))
        resid *= np.sqrt(0.1) * np.linalg.norm(label) / np.linalg.norm(resid)
        v = nmse((label + resid).astype(np.float64), label)
        assert v.db == pytest.approx(-10.0, abs=1e-6)

    def test_scale_invariance(self, rng):
        pred = rng.standard_normal((4, 2, 4, 4))
        label = rng.standard_normal((4, 2, 4, 4))
        assert nmse(pred, label).db == pytest.approx(nmse(7.5 * pred, 7.5 * label).db, abs=1e-9)

    def test_scales_argument_cancels_per_sample(self, rng):
        pred = rng.standard_normal((4, 2, 4, 4))
        label = rng.standard_normal((4, 2, 4, 4))
        scales = rng.uniform(0.5, 8.0, 4)
        assert nmse(pred, label, scales).db == pytest.approx(nmse(pred, label).db, abs=1e-9)

    def test_zero_label_rejected(self, rng):
        pred = rng.standard_normal((2, 2, 3, 3))
        label = pred.copy()
        label[1] = 0.0
        with pytest.raises(DegenerateSampleError):
            nmse(pred, label)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            nmse(np.zeros((1, 2, 3, 3)), np.zeros((1, 2, 3, 4)))


class TestIdentityCalibration:
    @pytest.mark.parametrize("cnr", [0.0, 10.0, 25.0])
    def test_identity_nmse_tracks_minus_cnr(self, cnr):
        ds = make_dataset(SMALL, 150, cnr, 17)
        v = evaluate_model(IdentityBaseline(), ds)
        assert v.db == pytest.approx(-cnr, abs=0.5)


@pytest.fixture(scope="module")
def model():
    mcfg = ModelConfig(n_cc=16, n_t=16, gamma=Fraction(1, 4), seed=21)
    den, enc, dec = Denoiser(mcfg), Encoder(mcfg), Decoder(mcfg)
    x = make_dataset(SMALL, 8, 10.0, 3).inputs
    den.forward(x, train=True)
    enc.forward(x, train=True)
    dec.forward(np.zeros((4, mcfg.codeword_len), np.float32), train=True)
    return FeedbackModel("fb_1-4", mcfg, den.weights(), enc.weights(), dec.weights())


class TestSweep:
    def test_one_result_per_model_and_cnr(self, model):
        datasets = [make_dataset(SMALL, 10, c, 3) for c in (0.0, 10.0, 25.0)]
        results = evaluate_sweep([model, IdentityBaseline()], datasets)
        assert len(results) == 6
        assert {r.cnr_db for r in results} == {0.0, 10.0, 25.0}
        assert all(np.isfinite(r.nmse_db) for r in results)
        assert all(r.n_samples == 10 for r in results)

    def test_dimension_mismatch_rejected(self, model):
        bad = make_dataset(GeneratorParams(n_c=32, n_t=8, n_cc=8,
                                           delay_centers=(1.0,), angle_centers=(2.0,),
                                           delay_spreads=(0.8,), angle_spreads=(1.0,),
                                           cluster_powers=(1.0,)), 5, 10.0, 3)
        with pytest.raises(DimensionError):
            evaluate_sweep([model], [bad])

    def test_deterministic(self, model):
        ds = [make_dataset(SMALL, 10, 10.0, 3)]
        r1 = evaluate_sweep([model], ds)
        r2 = evaluate_sweep([model], ds)
        assert r1 == r2


class TestResultsCsv:
    def _results(self):
        out = []
        for gamma in (Fraction(1, 4), Fraction(1, 16), Fraction(1, 64)):
            for cnr in (0.0, 5.0, 10.0, 15.0, 20.0, 25.0):
                out.append(EvalResult(f"fb_{gamma.denominator}", gamma, cnr,
                                      -10.0 - 1.0 / (1.0 + cnr) - gamma.denominator / 7.0, 400))
        return out

    def test_line_count(self, tmp_path):
        path = tmp_path / "results.csv"
        write_results_csv(self._results(), path)
        lines = path.read_text().splitlines()
        assert len(lines) == 19
        assert lines[0] == "model,gamma,cnr_db,nmse_db,n_samples"

    def test_byte_identical_reemission(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        write_results_csv(self._results(), a)
        write_results_csv(list(reversed(self._results())), b)
        assert a.read_bytes() == b.read_bytes()

    def test_roundtrip_full_precision(self, tmp_path):
        path = tmp_path / "results.csv"
        results = sort_results(self._results())
        write_results_csv(results, path)
        back = read_results_csv(path)
        assert back == results

    def test_ordering(self):
        rows = sort_results(self._results() + [EvalResult("identity", None, 10.0, -10.0, 400)])
        models = [r.model for r in rows]
        assert models == sorted(models)
        fb4 = [r for r in rows if r.gamma == Fraction(1, 4)]
        assert [r.cnr_db for r in fb4] == sorted(r.cnr_db for r in fb4)

    def test_gamma_format(self):
        assert format_gamma(Fraction(1, 4)) == "1/4"
        assert format_gamma(Fraction(2, 2)) == "1"
        assert format_gamma(None) == "-"
