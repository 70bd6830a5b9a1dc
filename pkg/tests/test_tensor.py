import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttacc import tensor
from ttacc.errors import ShapeError


def test_check_shape_rejects_nonpositive():
    with pytest.raises(ShapeError):
        tensor.check_shape([4, 0, 2])


class TestFactorizeDim:
    def test_balanced_split(self):
        assert tensor.factorize_dim(4096, 4) == [8, 8, 8, 8]
        assert tensor.factorize_dim(64, 3) == [4, 4, 4]
        assert tensor.factorize_dim(12, 2) == [3, 4]

    def test_prime_gets_trailing_ones(self):
        assert tensor.factorize_dim(7, 3) == [1, 1, 7]

    def test_override_validated(self):
        assert tensor.factorize_dim(13696, 4, override=[4, 4, 8, 107]) == [4, 4, 8, 107]
        with pytest.raises(ShapeError):
            tensor.factorize_dim(13696, 4, override=[4, 4, 8, 106])

    def test_product_invariant(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            total = int(rng.integers(1, 2000))
            d = int(rng.integers(2, 5))
            f = tensor.factorize_dim(total, d)
            assert len(f) == d and int(np.prod(f)) == total


class TestIndexMaps:
    def test_roundtrip(self):
        dims = (3, 5, 2, 7)
        for flat in range(int(np.prod(dims))):
            idx = tensor.flat_to_multi(flat, dims)
            assert tensor.multi_to_flat(idx, dims) == flat

    def test_row_major_convention(self):
        # last axis is fastest
        assert tensor.multi_to_flat((0, 1), (4, 6)) == 1
        assert tensor.multi_to_flat((1, 0), (4, 6)) == 6

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            tensor.multi_to_flat((4, 0), (4, 6))
        with pytest.raises(IndexError):
            tensor.flat_to_multi(24, (4, 6))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(1, 6), min_size=1, max_size=5), st.data())
    def test_roundtrip_property(self, dims, data):
        dims = tuple(dims)
        flat = data.draw(st.integers(0, int(np.prod(dims)) - 1))
        assert tensor.multi_to_flat(tensor.flat_to_multi(flat, dims), dims) == flat

    def test_invert_permutation(self):
        perm = (2, 0, 3, 1)
        inv = tensor.invert_permutation(perm)
        assert tuple(perm[i] for i in inv) == (0, 1, 2, 3)

    def test_permute_axes_matches_numpy(self):
        t = np.arange(24).reshape(2, 3, 4)
        assert np.array_equal(tensor.permute_axes(t, (2, 0, 1)),
                              np.transpose(t, (2, 0, 1)))
        with pytest.raises(ValueError):
            tensor.permute_axes(t, (0, 0, 1))


class TestMatrixTensorization:
    def test_roundtrip(self):
        rng = np.random.default_rng(2)
        n, m = (4, 2, 3), (2, 3, 4)
        w = rng.standard_normal((24, 24))
        t = tensor.matrix_to_tt_tensor(w, n, m)
        assert t.shape == (8, 6, 12)
        assert np.array_equal(tensor.tt_tensor_to_matrix(t, n, m), w)

    def test_fused_axis_order_n_major(self):
        # element w[j, i] must land at fused indices (i_k * m_k + j_k)
        n, m = (2, 3), (3, 2)
        w = np.arange(36).reshape(6, 6).astype(float)
        t = tensor.matrix_to_tt_tensor(w, n, m)
        for i in range(6):
            for j in range(6):
                i1, i2 = tensor.flat_to_multi(i, n)
                j1, j2 = tensor.flat_to_multi(j, m)
                assert t[i1 * 3 + j1, i2 * 2 + j2] == w[j, i]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            tensor.matrix_to_tt_tensor(np.zeros((6, 7)), (2, 3), (3, 2))


class TestTTDC:
    @pytest.mark.parametrize("code,maker", [
        (tensor.DTYPE_F64, lambda rng: rng.standard_normal((3, 5))),
        (tensor.DTYPE_F32, lambda rng: rng.standard_normal((7,)).astype(np.float32)),
        (tensor.DTYPE_FP16_BITS, lambda rng: rng.integers(0, 1 << 16, (4, 4)).astype(np.uint16)),
        (tensor.DTYPE_INT4, lambda rng: rng.integers(-8, 8, (3, 3, 3)).astype(np.int8)),
    ])
    def test_roundtrip(self, tmp_path, code, maker):
        rng = np.random.default_rng(code)
        arr = maker(rng)
        path = tmp_path / "t.ttdc"
        tensor.write_ttdc(path, arr, code)
        back, back_code = tensor.read_ttdc(path)
        assert back_code == code
        assert back.shape == arr.shape
        assert np.array_equal(back, arr)

    def test_int4_odd_count_low_nibble_first(self, tmp_path):
        arr = np.array([-8, 7, 3], dtype=np.int8)
        path = tmp_path / "odd.ttdc"
        tensor.write_ttdc(path, arr, tensor.DTYPE_INT4)
        raw = path.read_bytes()
        # payload: (-8 & 0xF) | (7 << 4), then 3 in the low nibble
        assert raw[-2:] == bytes([0x78, 0x03])
        back, _ = tensor.read_ttdc(path)
        assert np.array_equal(back, arr)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ttdc"
        path.write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(ValueError):
            tensor.read_ttdc(path)

    def test_int4_range_enforced(self, tmp_path):
        with pytest.raises(ValueError):
            tensor.write_ttdc(tmp_path / "x.ttdc", np.array([8]), tensor.DTYPE_INT4)
