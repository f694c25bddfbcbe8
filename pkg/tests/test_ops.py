import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from checkerboard import ops
from checkerboard.errors import ContractError, DimensionError
from checkerboard.tensor import Tensor


def test_splitmix64_reference_sequence():
    # published first outputs for seed 0
    g = ops.SplitMix64(0)
    assert [g.next() for _ in range(3)] == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


@given(h=st.integers(1, 33), w=st.integers(1, 33))
def test_anchor_count_is_half_rounded_up(h, w):
    assert ops.anchor_count(h, w) == (h * w + 1) // 2


@given(h=st.integers(1, 16), w=st.integers(1, 16))
def test_every_four_neighbour_of_a_non_anchor_is_an_anchor(h, w):
    a = ops.anchor_mask(h, w)
    for r in range(h):
        for c in range(w):
            if a[r, c]:
                continue
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w:
                    assert a[rr, cc]


# masks ----------------------------------------------------------------------


@pytest.mark.parametrize("k,count", [(3, 4), (5, 12)])
def test_serial_mask_counts_raster_predecessors(k, count):
    m = ops.make_mask("serial", k)
    assert m.k_ref == count
    flat = m.bits.reshape(-1)
    assert flat[: k * k // 2].all() and not flat[k * k // 2 :].any()


@pytest.mark.parametrize("k,count", [(3, 4), (5, 12)])
def test_checkerboard_mask_odd_offsets(k, count):
    m = ops.make_mask("checkerboard", k)
    assert m.k_ref == count
    for i in range(k):
        for j in range(k):
            assert m.bits[i, j] == ((i + j - 2 * (k // 2)) % 2 == 1)


def test_checkerboard3_positions():
    ones = {tuple(p) for p in np.argwhere(ops.make_mask("checkerboard", 3).bits)}
    assert ones == {(0, 1), (1, 0), (1, 2), (2, 1)}


def test_zero_and_all_neighbour_masks():
    assert ops.make_mask("zero", 5).k_ref == 0
    assert ops.make_mask("all_neighbors3", 3).k_ref == 8


def test_single_ref_has_one_bit():
    m = ops.make_mask("single_ref", 5, offset=(-2, 1))
    assert m.k_ref == 1 and m.bits[0, 3] == 1
    with pytest.raises(ContractError):
        ops.make_mask("single_ref", 5, offset=(0, 0))
    with pytest.raises(ContractError):
        ops.make_mask("single_ref", 3, offset=(2, 0))


@given(seed=st.integers(0, 2**64 - 1), k=st.sampled_from([3, 5, 7]))
def test_random_mask_centre_is_zero_and_reproducible(seed, k):
    a = ops.make_mask("random", k, seed=seed)
    assert a.bits[k // 2, k // 2] == 0
    assert np.array_equal(a.bits, ops.make_mask("random", k, seed=seed).bits)


def test_mask_validation():
    with pytest.raises(ContractError):
        ops.make_mask("serial", 4)
    with pytest.raises(ContractError):
        ops.make_mask("bogus", 3)
    with pytest.raises(ContractError):
        ops.make_mask("random", 3)


def test_mask_padding_centres_pattern():
    m = ops.make_mask("checkerboard", 3).padded(5)
    assert m.size == 5 and m.k_ref == 4
    assert np.array_equal(m.bits[1:4, 1:4], ops.make_mask("checkerboard", 3).bits)


# masked convolution -------------------------------------------------------------


def test_zero_mask_outputs_bias(rng):
    x = Tensor(rng.standard_normal((1, 3, 6, 6)))
    w = Tensor(rng.standard_normal((2, 3, 5, 5)))
    b = Tensor(np.array([0.25, -1.5]))
    out = ops.masked_conv2d(x, w, ops.make_mask("zero", 5), b).data
    assert np.all(out[0, 0] == np.float32(0.25)) and np.all(out[0, 1] == np.float32(-1.5))


def test_single_reference_shift():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = ops.masked_conv2d(Tensor(x), w, ops.make_mask("single_ref", 3, offset=(-1, 0))).data
    expected = np.zeros_like(x)
    expected[..., 1:, :] = x[..., :-1, :]
    np.testing.assert_array_equal(out, expected)


@pytest.mark.parametrize("k", [3, 5, 7])
def test_checkerboard_context_at_anchors_is_bias(k, rng):
    for _ in range(20):
        h, w = rng.integers(2, 10, size=2)
        y = Tensor(rng.integers(-20, 20, size=(1, 4, h, w)).astype(np.float32))
        y_half = ops.mux(y, np.zeros(y.shape, np.float32))
        weight = Tensor(rng.standard_normal((3, 4, k, k)))
        bias = Tensor(rng.standard_normal(3))
        out = ops.masked_conv2d(y_half, weight, ops.make_mask("checkerboard", k), bias).data
        anchors = ops.anchor_mask(h, w)
        for c in range(3):
            assert np.all(out[0, c][anchors] == bias.data[c])


@pytest.mark.parametrize("kind", ["serial", "checkerboard"])
def test_masked_conv_causality(kind, rng):
    """Perturbing positions the decoder has not yet seen never changes the output."""
    k, h, w = 5, 6, 7
    mask = ops.make_mask(kind, k)
    weight = Tensor(rng.standard_normal((2, 2, k, k)))
    base = rng.standard_normal((1, 2, h, w)).astype(np.float32)

    def context(y):
        # the checkerboard schedule feeds the context model mux(y, 0)
        if kind == "checkerboard":
            y = ops.mux(y, np.zeros_like(y))
        return ops.masked_conv2d(Tensor(y), weight, mask).data

    ref = context(base)
    anchors = ops.anchor_mask(h, w)
    for r in range(h):
        for c in range(w):
            for rr in range(h):
                for cc in range(w):
                    if kind == "serial":
                        visible = (rr, cc) < (r, c)
                    else:
                        visible = (not anchors[r, c]) and anchors[rr, cc]
                    if visible:
                        continue
                    pert = base.copy()
                    pert[0, :, rr, cc] += 7.0
                    out = context(pert)
                    assert np.array_equal(out[0, :, r, c], ref[0, :, r, c])


def test_mask_size_must_match_kernel():
    with pytest.raises(ContractError):
        ops.masked_conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 5, 5))), ops.make_mask("zero", 3))


# mux / b_half ---------------------------------------------------------------------


def test_mux_parity_pattern():
    out = ops.mux(np.ones((1, 1, 2, 2)), np.full((1, 1, 2, 2), 2.0)).data
    np.testing.assert_array_equal(out[0, 0], [[1, 2], [2, 1]])


@given(seed=st.integers(0, 2**31), h=st.integers(1, 9), w=st.integers(1, 9))
def test_mux_identities(seed, h, w):
    x = np.random.default_rng(seed).standard_normal((1, 2, h, w)).astype(np.float32)
    assert np.array_equal(ops.mux(x, x).data, x)
    half = ops.mux(x, np.zeros_like(x)).data
    assert np.array_equal(half, np.where(ops.anchor_mask(h, w), x, 0))


def test_b_half_pattern_and_sum():
    b = np.array([3.0], dtype=np.float32)
    np.testing.assert_array_equal(ops.make_b_half(b, 2, 2)[0, 0], [[3, 0], [0, 3]])
    bias = np.array([1.0, -2.0, 0.5], dtype=np.float32)
    for h, w in [(3, 5), (4, 4), (1, 1), (7, 2)]:
        bh = ops.make_b_half(bias, h, w)
        assert np.isclose(bh.sum(), ops.anchor_count(h, w) * bias.sum())
        b_map = np.broadcast_to(bias[None, :, None, None], bh.shape)
        assert np.array_equal(bh, ops.mux(b_map, np.zeros(bh.shape, np.float32)).data)


# space_to_depth / demux / merge ------------------------------------------------------


def test_space_to_depth_layout():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    out = ops.space_to_depth(Tensor(x)).data
    assert out.shape == (1, 4, 1, 1)
    np.testing.assert_array_equal(out.reshape(-1), [1, 2, 3, 4])
    assert ops.space_to_depth(Tensor(np.zeros((1, 3, 4, 4)))).shape[1] == 12


def test_shape_errors():
    with pytest.raises(ContractError):
        ops.space_to_depth(Tensor(np.zeros((1, 1, 3, 4))))
    with pytest.raises(DimensionError):
        ops.depth_to_space(Tensor(np.zeros((1, 3, 2, 2))))
    with pytest.raises(ContractError):
        ops.demux(Tensor(np.zeros((1, 1, 3, 4))))


def test_demux_two_by_two():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    a, n = ops.demux(Tensor(x))
    np.testing.assert_array_equal(a.data.reshape(-1), [1, 4])
    np.testing.assert_array_equal(n.data.reshape(-1), [2, 3])


def test_demux_merge_exhaustive_positions():
    x = np.arange(4 * 6 * 8, dtype=np.float32).reshape(1, 4, 6, 8)
    a, n = ops.demux(Tensor(x))
    assert a.shape == n.shape == (1, 4, 3, 8)
    anchors = ops.anchor_mask(6, 8)
    for c in range(4):
        assert sorted(a.data[0, c].reshape(-1)) == sorted(x[0, c][anchors])
        assert sorted(n.data[0, c].reshape(-1)) == sorted(x[0, c][~anchors])
    assert np.array_equal(ops.merge(a, n).data, x)


def test_merge_special_cases(rng):
    y = rng.standard_normal((1, 2, 4, 6)).astype(np.float32)
    half = ops.mux(y, np.zeros_like(y)).data
    a, n = ops.demux(Tensor(half))
    assert np.array_equal(ops.merge(a, n).data, half)
    z = np.zeros((1, 2, 2, 6), np.float32)
    assert not ops.merge(z, z).data.any()
    a, _ = ops.demux(Tensor(y))
    merged = ops.merge(a, np.zeros(a.shape, np.float32)).data
    assert not merged[..., ~ops.anchor_mask(4, 6)].any()


@given(
    seed=st.integers(0, 2**31),
    c=st.integers(1, 4),
    h=st.integers(1, 6).map(lambda v: 2 * v),
    w=st.integers(1, 6).map(lambda v: 2 * v),
)
def test_structural_inverses_property(seed, c, h, w):
    x = np.random.default_rng(seed).standard_normal((1, c, h, w)).astype(np.float32)
    assert np.array_equal(ops.depth_to_space(ops.space_to_depth(Tensor(x))).data, x)
    assert np.array_equal(ops.merge(*ops.demux(Tensor(x))).data, x)
