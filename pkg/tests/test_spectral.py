import numpy as np
import pytest

from svdslice.errors import (
    DegenerateProfileWarning,
    LengthMismatch,
    ShapeMismatch,
)
from svdslice.linalg import svd
from svdslice.nn import DenseLayer, Model, ModelSpec
from svdslice.spectral import (
    ImportanceProfile,
    component_importance,
    feature_space_delta,
    param_space_delta,
    weighted_summary,
    write_delta_csv,
    write_summary_json,
)
from svdslice.training import LabeledDataset


def brute_force_delta(w0, w_ft):
    """Oracle: explicit triple product U0^T w_ft V0 minus diag(sigma0),
    assembled entry by entry with numpy's own SVD basis replaced by ours."""
    f0 = svd(w0)
    proj = f0.u.T @ w_ft @ f0.vt.T
    sigma_mat = np.diag(f0.sigma)
    return np.abs(sigma_mat - proj)


class TestParamSpaceDelta:
    def test_zero_change(self):
        w0 = np.random.default_rng(0).normal(size=(8, 8))
        d = param_space_delta(w0, w0)
        assert d.diag.max() <= 1e-12
        assert d.offdiag_row_norms.max() <= 1e-12
        assert d.space == "parameter"

    def test_rank_one_bump_is_diagonal(self):
        w0 = np.random.default_rng(1).normal(size=(8, 8))
        f0 = svd(w0)
        i = 3
        w_ft = w0 + 0.5 * np.outer(f0.u[:, i], f0.vt[i])
        d = param_space_delta(w0, w_ft)
        assert d.diag[i] == pytest.approx(0.5, abs=1e-10)
        others = np.delete(d.diag, i)
        assert others.max() <= 1e-10
        assert d.offdiag_row_norms.max() <= 1e-10

    @pytest.mark.parametrize("shape", [(8, 8), (16, 16), (12, 9), (9, 12)])
    def test_matches_brute_force_oracle(self, shape):
        rng = np.random.default_rng(sum(shape))
        w0 = rng.normal(size=shape)
        w_ft = w0 + 0.1 * rng.normal(size=shape)
        d = param_space_delta(w0, w_ft)
        oracle = brute_force_delta(w0, w_ft)
        assert np.abs(d.full - oracle).max() <= 1e-12
        idx = np.arange(d.k)
        np.testing.assert_allclose(d.diag, oracle[idx, idx], atol=1e-12)
        off = oracle.copy()
        off[idx, idx] = 0.0
        np.testing.assert_allclose(d.offdiag_row_norms,
                                   np.linalg.norm(off, axis=1), atol=1e-12)

    def test_pure_rescaling_moves_only_diagonal(self):
        w0 = np.random.default_rng(2).normal(size=(10, 10))
        f0 = svd(w0)
        c = 0.3
        d = param_space_delta(w0, w0 + c * w0)
        np.testing.assert_allclose(d.diag, c * f0.sigma, atol=1e-10)
        assert d.offdiag_row_norms.max() <= 1e-10

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            param_space_delta(np.ones((3, 3)), np.ones((3, 4)))


class TestFeatureSpaceDelta:
    def test_zero_change(self):
        rng = np.random.default_rng(3)
        x0 = rng.normal(size=(20, 6))
        w0 = rng.normal(size=(6, 5))
        d = feature_space_delta(x0, w0, w0)
        assert d.diag.max() <= 1e-12
        assert d.offdiag_row_norms.max() <= 1e-12
        assert d.space == "feature"

    def test_identity_inputs_match_param_space(self):
        rng = np.random.default_rng(4)
        w0 = rng.normal(size=(7, 7))
        w_ft = w0 + 0.05 * rng.normal(size=(7, 7))
        d_feat = feature_space_delta(np.eye(7), w0, w_ft)
        d_par = param_space_delta(w0, w_ft)
        np.testing.assert_allclose(d_feat.diag, d_par.diag, atol=1e-10)
        np.testing.assert_allclose(d_feat.offdiag_row_norms,
                                   d_par.offdiag_row_norms, atol=1e-10)

    def test_matches_brute_force_oracle_100_rows(self):
        rng = np.random.default_rng(5)
        x0 = rng.normal(size=(100, 16))
        w0 = rng.normal(size=(16, 16))
        w_ft = w0 + 0.1 * rng.normal(size=(16, 16))
        d = feature_space_delta(x0, w0, w_ft)
        y0 = x0 @ w0
        f = svd(y0)
        oracle = np.abs(np.diag(f.sigma) - f.u.T @ (x0 @ w_ft) @ f.vt.T)
        assert d.k == 16
        assert np.abs(d.full - oracle).max() <= 1e-12

    def test_k_is_min_of_rows_and_cols(self):
        rng = np.random.default_rng(6)
        x0 = rng.normal(size=(5, 8))
        w0 = rng.normal(size=(8, 9))
        d = feature_space_delta(x0, w0, w0)
        assert d.k == 5

    def test_shape_checks(self):
        with pytest.raises(ShapeMismatch):
            feature_space_delta(np.ones((4, 3)), np.ones((5, 2)), np.ones((5, 2)))


def two_component_model():
    """Linear model whose readout only uses coordinate 0 of a diag(10, .01)
    layer: ablating component 0 must dominate the importance profile."""
    spec = ModelSpec(layer_dims=(2, 2, 2), activation="identity", bias=False)
    w1 = np.diag([10.0, 0.01])
    readout = np.array([[1.0, -1.0], [0.0, 0.0]])
    return Model(spec, [DenseLayer(w=w1, bias=None),
                        DenseLayer(w=readout, bias=None)])


class TestComponentImportance:
    def test_two_component_diagnostic(self):
        model = two_component_model()
        rng = np.random.default_rng(7)
        x = rng.normal(size=(400, 2))
        y = np.argmax(model.forward(x), axis=1)
        profile = component_importance(model, LabeledDataset(x=x, y=y), layer=0)
        assert profile.p[0] == 1.0
        assert profile.p[1] <= 0.05
        assert np.argmax(profile.p) == 0

    def test_ablation_oracle(self):
        # Direct check against rebuilding the ablated model densely.
        model = two_component_model()
        rng = np.random.default_rng(8)
        x = rng.normal(size=(200, 2))
        y = np.argmax(model.forward(x), axis=1)
        data = LabeledDataset(x=x, y=y)
        f = svd(model.layers[0].w)
        profile = component_importance(model, data, layer=0)
        from svdslice.training import evaluate

        acc_base = evaluate(model, data)
        for i in range(2):
            ablated = model.clone()
            ablated.layers[0].w = model.layers[0].w - f.sigma[i] * np.outer(
                f.u[:, i], f.vt[i])
            expected = abs(acc_base - evaluate(ablated, data))
            assert profile.raw_f[i] == pytest.approx(expected, abs=1e-12)

    def test_model_not_mutated(self):
        model = two_component_model()
        w_before = model.layers[0].w.copy()
        rng = np.random.default_rng(9)
        x = rng.normal(size=(50, 2))
        y = np.argmax(model.forward(x), axis=1)
        component_importance(model, LabeledDataset(x=x, y=y), layer=0)
        assert model.layers[0].w.tobytes() == w_before.tobytes()

    def test_degenerate_profile(self):
        # A layer so tiny that zeroing components never flips a prediction.
        spec = ModelSpec(layer_dims=(2, 2, 2), activation="identity", bias=True)
        model = Model(spec, [
            DenseLayer(w=1e-6 * np.eye(2), bias=np.zeros(2)),
            DenseLayer(w=np.zeros((2, 2)), bias=np.array([1.0, 0.0])),
        ])
        x = np.random.default_rng(10).normal(size=(30, 2))
        data = LabeledDataset(x=x, y=np.zeros(30, dtype=int))
        with pytest.warns(DegenerateProfileWarning):
            profile = component_importance(model, data, layer=0)
        assert profile.degenerate
        assert np.array_equal(profile.p, np.zeros(2))

    def test_normalization_bounds(self):
        model = two_component_model()
        rng = np.random.default_rng(11)
        x = rng.normal(size=(300, 2))
        y = np.argmax(model.forward(x), axis=1)
        profile = component_importance(model, LabeledDataset(x=x, y=y), layer=0)
        assert profile.p.max() == 1.0
        assert np.all(profile.p >= 0.0)
        assert np.all(profile.p <= 1.0)


class TestWeightedSummary:
    def _delta(self, diag, off):
        from svdslice.spectral import SpectralDelta

        return SpectralDelta(diag=np.asarray(diag, dtype=float),
                             offdiag_row_norms=np.asarray(off, dtype=float),
                             space="parameter")

    def test_simple_weights(self):
        d = self._delta([2.0, 5.0], [1.0, 1.0])
        prof = ImportanceProfile(raw_f=np.array([1.0, 0.0]),
                                 p=np.array([1.0, 0.0]))
        assert weighted_summary(d, prof) == (2.0, 1.0)

    def test_zero_weights(self):
        d = self._delta([2.0, 5.0], [3.0, 4.0])
        prof = ImportanceProfile(raw_f=np.zeros(2), p=np.zeros(2),
                                 degenerate=True)
        assert weighted_summary(d, prof) == (0.0, 0.0)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(12)
        diag = rng.random(8)
        off = rng.random(8)
        p = rng.random(8)
        d = self._delta(diag, off)
        got = weighted_summary(d, p)
        want_diag = 0.0
        want_off = 0.0
        for i in range(8):
            want_diag += p[i] * diag[i]
            want_off += p[i] * off[i]
        assert abs(got[0] - want_diag) <= 1e-14
        assert abs(got[1] - want_off) <= 1e-14

    def test_length_mismatch(self):
        d = self._delta([1.0, 2.0], [0.0, 0.0])
        with pytest.raises(LengthMismatch):
            weighted_summary(d, np.ones(3))


class TestReportFiles:
    def test_csv_schema(self, tmp_path):
        rng = np.random.default_rng(13)
        w0 = rng.normal(size=(5, 5))
        d = param_space_delta(w0, w0 + 0.1 * rng.normal(size=(5, 5)))
        path = tmp_path / "delta.csv"
        write_delta_csv(path, d, p=np.linspace(0, 1, 5))
        lines = path.read_text().splitlines()
        assert lines[0] == "component_index,diag_delta,offdiag_row_norm,p,space"
        assert len(lines) == 6
        assert lines[1].split(",")[4] == "parameter"

    def test_csv_blank_p(self, tmp_path):
        w0 = np.eye(3) * 2.0
        d = param_space_delta(w0, w0)
        path = tmp_path / "delta.csv"
        write_delta_csv(path, d)
        row = path.read_text().splitlines()[1].split(",")
        assert row[3] == ""

    def test_json_summary(self, tmp_path):
        import json

        rng = np.random.default_rng(14)
        w0 = rng.normal(size=(4, 4))
        d = param_space_delta(w0, w0 + 0.2 * rng.normal(size=(4, 4)))
        prof = ImportanceProfile(raw_f=np.ones(4), p=np.ones(4))
        path = tmp_path / "summary.json"
        write_summary_json(path, d, prof)
        with open(path) as f:
            payload = json.load(f)
        assert payload["k"] == 4
        assert payload["space"] == "parameter"
        assert payload["diag_sum"] == pytest.approx(d.diag.sum())
