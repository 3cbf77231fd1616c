import numpy as np
import pytest

from svdslice.adapter import (
    SliceSpec,
    adapter_forward,
    init_slice_adapter,
    load_adapter,
    merge,
    milora_init,
    pissa_init,
    save_adapter,
)
from svdslice.errors import ShapeMismatch, SliceOutOfRange, ZeroComponentWarning
from svdslice.linalg import svd


def random_matrix(shape, seed):
    return np.random.default_rng(seed).normal(size=shape)


class TestInit:
    def test_diagonal_top_slice(self):
        st = init_slice_adapter(np.diag([4.0, 1.0]), SliceSpec(0, 1, alpha=1.0))
        np.testing.assert_allclose(st.a, [[2.0], [0.0]], atol=1e-12)
        np.testing.assert_allclose(st.b, [[2.0, 0.0]], atol=1e-12)
        np.testing.assert_allclose(st.w_p, np.diag([0.0, 1.0]), atol=1e-12)
        assert st.scale == 1.0

    def test_diagonal_bottom_slice(self):
        st = init_slice_adapter(np.diag([4.0, 1.0]), SliceSpec(1, 1, alpha=1.0))
        np.testing.assert_allclose(st.a, [[0.0], [1.0]], atol=1e-12)
        np.testing.assert_allclose(st.b, [[0.0, 1.0]], atol=1e-12)
        np.testing.assert_allclose(st.w_p, np.diag([4.0, 0.0]), atol=1e-12)

    @pytest.mark.parametrize("shape,s,r", [((8, 8), 0, 2), ((8, 8), 3, 2),
                                           ((8, 8), 6, 2), ((10, 6), 2, 3),
                                           ((6, 10), 1, 4)])
    def test_exact_reconstruction_at_init(self, shape, s, r):
        w = random_matrix(shape, seed=s * 100 + r)
        st = init_slice_adapter(w, SliceSpec(s, r))
        rel = np.linalg.norm(merge(st) - w) / np.linalg.norm(w)
        assert rel <= 1e-10

    def test_slice_singular_values_match_source(self):
        w = random_matrix((8, 8), seed=3)
        f = svd(w)
        st = init_slice_adapter(w, SliceSpec(2, 3), factorization=f)
        slice_sv = np.linalg.svd(st.a @ st.b, compute_uv=False)[:3]
        np.testing.assert_allclose(slice_sv, f.sigma[2:5], atol=1e-9)

    def test_window_disjointness(self):
        w = random_matrix((8, 8), seed=11)
        f = svd(w)
        st = init_slice_adapter(w, SliceSpec(3, 2), factorization=f)
        projected = f.u.T @ st.w_p @ f.vt.T
        diag = np.diag(projected)
        np.testing.assert_allclose(diag[3:5], 0.0, atol=1e-9)
        np.testing.assert_allclose(np.delete(diag, [3, 4]),
                                   np.delete(f.sigma, [3, 4]), atol=1e-9)

    def test_out_of_range(self):
        w = random_matrix((6, 6), seed=0)
        with pytest.raises(SliceOutOfRange):
            init_slice_adapter(w, SliceSpec(5, 2))

    def test_bad_spec_values(self):
        with pytest.raises(SliceOutOfRange):
            SliceSpec(-1, 2)
        with pytest.raises(SliceOutOfRange):
            SliceSpec(0, 0)
        with pytest.raises(SliceOutOfRange):
            SliceSpec(0, 2, alpha=-1.0)

    def test_zero_singular_value_warns(self):
        w = np.diag([3.0, 0.0])
        with pytest.warns(ZeroComponentWarning):
            init_slice_adapter(w, SliceSpec(1, 1))

    def test_default_alpha_equals_rank(self):
        spec = SliceSpec(0, 4)
        assert spec.alpha == 4.0
        st = init_slice_adapter(random_matrix((6, 6), 1), spec)
        assert st.scale == 1.0


class TestSpecialCases:
    def test_pissa_matches_general(self):
        w = random_matrix((8, 8), seed=21)
        st_p = pissa_init(w, 2, alpha=1.0)
        st_g = init_slice_adapter(w, SliceSpec(0, 2, alpha=1.0))
        assert st_p.a.tobytes() == st_g.a.tobytes()
        assert st_p.b.tobytes() == st_g.b.tobytes()
        assert st_p.w_p.tobytes() == st_g.w_p.tobytes()

    def test_milora_matches_general(self):
        w = random_matrix((8, 8), seed=22)
        st_m = milora_init(w, 2)
        st_g = init_slice_adapter(w, SliceSpec(6, 2))
        assert st_m.a.tobytes() == st_g.a.tobytes()
        assert st_m.b.tobytes() == st_g.b.tobytes()
        assert st_m.w_p.tobytes() == st_g.w_p.tobytes()

    def test_pissa_spans_top_singular_directions(self):
        w = random_matrix((8, 8), seed=23)
        f = svd(w)
        st = pissa_init(w, 2)
        # Column-space projector of a vs the top-2 left singular vectors.
        qa, _ = np.linalg.qr(st.a)
        proj_a = qa @ qa.T
        u2 = f.u[:, :2]
        proj_u = u2 @ u2.T
        assert np.abs(proj_a - proj_u).max() <= 1e-9

    def test_milora_slice_covers_bottom_values(self):
        w = random_matrix((8, 8), seed=24)
        f = svd(w)
        st = milora_init(w, 2)
        slice_sv = np.linalg.svd(st.a @ st.b, compute_uv=False)[:2]
        np.testing.assert_allclose(slice_sv, f.sigma[6:8], atol=1e-9)

    def test_milora_diag(self):
        st = milora_init(np.diag([4.0, 1.0]), 1, alpha=1.0)
        np.testing.assert_allclose(st.w_p, np.diag([4.0, 0.0]), atol=1e-12)

    def test_full_rank_slice_residual_zero(self):
        w = random_matrix((6, 6), seed=25)
        st = pissa_init(w, 6)
        assert np.linalg.norm(st.w_p) / np.linalg.norm(w) <= 1e-10
        st_m = milora_init(w, 6)
        assert st_m.a.tobytes() == st.a.tobytes()
        assert st_m.w_p.tobytes() == st.w_p.tobytes()


class TestForwardAndMerge:
    def test_identity_probe_returns_source(self):
        w = random_matrix((7, 5), seed=31)
        st = init_slice_adapter(w, SliceSpec(1, 2))
        out = adapter_forward(np.eye(7), st)
        assert np.abs(out - w).max() <= 1e-10

    def test_zero_update_gives_residual(self):
        w = random_matrix((6, 6), seed=32)
        st = init_slice_adapter(w, SliceSpec(0, 2))
        st.a[:] = 0.0
        x = random_matrix((4, 6), seed=33)
        np.testing.assert_allclose(adapter_forward(x, st), x @ st.w_p, atol=1e-12)

    def test_forward_matches_dense_oracle(self):
        w = random_matrix((6, 9), seed=34)
        st = init_slice_adapter(w, SliceSpec(2, 3, alpha=6.0))
        st.a += 0.1  # move off the init point
        st.b -= 0.05
        x = random_matrix((11, 6), seed=35)
        dense = x @ (st.w_p + st.scale * (st.a @ st.b))
        np.testing.assert_allclose(adapter_forward(x, st), dense, atol=1e-12)

    def test_forward_shape_mismatch(self):
        st = init_slice_adapter(random_matrix((6, 6), 0), SliceSpec(0, 2))
        with pytest.raises(ShapeMismatch):
            adapter_forward(np.ones((3, 5)), st)

    def test_merge_matches_identity_probe(self):
        w = random_matrix((6, 6), seed=36)
        st = init_slice_adapter(w, SliceSpec(1, 3))
        st.a *= 1.1
        st.b *= 0.9
        np.testing.assert_allclose(merge(st), adapter_forward(np.eye(6), st),
                                   atol=1e-12)

    def test_rank_bound_after_perturbation(self):
        w = random_matrix((10, 10), seed=37)
        st = init_slice_adapter(w, SliceSpec(2, 3))
        st.a += random_matrix((10, 3), seed=38)
        st.b += random_matrix((3, 10), seed=39)
        update = merge(st) - st.w_p
        sv = np.linalg.svd(update, compute_uv=False)
        assert np.all(sv[3:] <= 1e-8 * sv[0])


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        w = random_matrix((6, 4), seed=41)
        st = init_slice_adapter(w, SliceSpec(1, 2, alpha=8.0))
        save_adapter(st, tmp_path / "ckpt")
        back = load_adapter(tmp_path / "ckpt")
        assert back.w_p.tobytes() == st.w_p.tobytes()
        assert back.a.tobytes() == st.a.tobytes()
        assert back.b.tobytes() == st.b.tobytes()
        assert back.spec == st.spec
        assert back.scale == st.scale

    def test_manifest_fields(self, tmp_path):
        import json

        st = init_slice_adapter(random_matrix((6, 4), 42), SliceSpec(0, 2))
        save_adapter(st, tmp_path / "ckpt")
        with open(tmp_path / "ckpt" / "manifest.json") as f:
            manifest = json.load(f)
        assert manifest == {"m": 6, "n": 4, "s": 0, "r": 2, "alpha": 2.0,
                            "format": "SMX1"}
