import numpy as np
import pytest

from pseudomask.actmap import ActivationMap, GuidanceMap, im_normalize_threshold, iterative_masking, upsample
from pseudomask.raster import ImageGrid

from conftest import make_rng


def amap(values, cid=1, it=0):
    return ActivationMap(values=np.asarray(values, dtype=float), category_id=cid, iteration=it)


def test_activation_map_validation():
    with pytest.raises(ValueError):
        amap([[-0.1, 0.0]])
    with pytest.raises(ValueError):
        amap([[np.nan, 0.0]])


def test_normalize_threshold_all_zero():
    bits = im_normalize_threshold(amap(np.zeros((3, 3))), 0.5)
    assert not bits.any()


def test_normalize_threshold_max_cell_always_set():
    values = np.zeros((3, 3))
    values[1, 2] = 0.037
    bits = im_normalize_threshold(amap(values), 0.5)
    assert bits[1, 2]
    assert bits.sum() == 1


def test_normalize_threshold_hand_case():
    # after max-normalization: 0.2, 0.4, 0.8, 1.0 -> F, F, T, T at 0.5
    bits = im_normalize_threshold(amap([[0.2, 0.4], [0.8, 1.0]]), 0.5)
    assert np.array_equal(bits, np.array([[False, False], [True, True]]))


def test_upsample_constant():
    out = upsample(np.array([[3.5]]), 4, 6, "nearest")
    assert out.shape == (4, 6)
    assert (out == 3.5).all()


def test_upsample_nearest_factor2():
    grid = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = upsample(grid, 4, 4, "nearest")
    expected = np.array(
        [
            [1.0, 1.0, 2.0, 2.0],
            [1.0, 1.0, 2.0, 2.0],
            [3.0, 3.0, 4.0, 4.0],
            [3.0, 3.0, 4.0, 4.0],
        ]
    )
    assert np.array_equal(out, expected)


def oracle_bilinear(grid, th, tw):
    """Straight-line align-corners-off bilinear resampling."""
    h, w = grid.shape
    out = np.zeros((th, tw))
    for i in range(th):
        for j in range(tw):
            sy = (i + 0.5) * h / th - 0.5
            sx = (j + 0.5) * w / tw - 0.5
            y0 = min(max(int(np.floor(sy)), 0), h - 1)
            x0 = min(max(int(np.floor(sx)), 0), w - 1)
            y1 = min(y0 + 1, h - 1)
            x1 = min(x0 + 1, w - 1)
            wy = min(max(sy - y0, 0.0), 1.0)
            wx = min(max(sx - x0, 0.0), 1.0)
            out[i, j] = (
                grid[y0, x0] * (1 - wy) * (1 - wx)
                + grid[y0, x1] * (1 - wy) * wx
                + grid[y1, x0] * wy * (1 - wx)
                + grid[y1, x1] * wy * wx
            )
    return out


def test_upsample_bilinear_matches_oracle():
    grid = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert np.allclose(upsample(grid, 4, 4, "bilinear"), oracle_bilinear(grid, 4, 4), atol=1e-12)
    rng = make_rng("bilinear")
    g = rng.random((3, 5))
    assert np.allclose(upsample(g, 7, 11, "bilinear"), oracle_bilinear(g, 7, 11), atol=1e-12)


def test_upsample_rejects_bad_args():
    with pytest.raises(ValueError):
        upsample(np.ones((2, 2)), 0, 4)
    with pytest.raises(ValueError):
        upsample(np.ones((2, 2)), 4, 4, "cubic")


class TwoBlobStub:
    """Blob A until its pixels are masked, then blob B; silent afterwards.

    Operates on an 8x8 grid over a 128x128 image (16px cells). Cell A is
    (1, 1), cell B is (5, 5).
    """

    def __init__(self, base: ImageGrid):
        self.base = base
        self.calls = 0
        self.images = []

    def region_masked(self, img, cy, cx):
        block = img.data[cy * 16 : (cy + 1) * 16, cx * 16 : (cx + 1) * 16]
        ref = self.base.data[cy * 16 : (cy + 1) * 16, cx * 16 : (cx + 1) * 16]
        return (block != ref).any()

    def __call__(self, img: ImageGrid):
        self.calls += 1
        self.images.append(img)
        values = np.zeros((8, 8))
        if not self.region_masked(img, 1, 1):
            values[1, 1] = 1.0
        elif not self.region_masked(img, 5, 5):
            values[5, 5] = 1.0
        return ActivationMap(values=values, category_id=3, iteration=0)


def base_image():
    rng = make_rng("actmap/base")
    return ImageGrid(rng.random((128, 128, 3)))


def test_masking_g0_is_single_threshold_pass():
    img = base_image()
    stub = TwoBlobStub(img)
    guid = iterative_masking(stub, img, G=0, threshold=0.5)
    assert stub.calls == 1
    expected = im_normalize_threshold(stub(img), 0.5)
    assert np.array_equal(guid.union_bits, expected)
    assert guid.contributing_iterations == (0,)


def test_masking_constant_source_is_idempotent():
    img = base_image()
    rng = make_rng("actmap/const")
    values = np.abs(rng.normal(size=(8, 8)))

    def const(_img):
        return ActivationMap(values=values, category_id=1, iteration=0)

    g0 = iterative_masking(const, img, G=0, threshold=0.5)
    g3 = iterative_masking(const, img, G=3, threshold=0.5)
    assert np.array_equal(g0.union_bits, g3.union_bits)


def test_masking_two_blob_union():
    img = base_image()
    g0 = iterative_masking(TwoBlobStub(img), img, G=0, threshold=0.5)
    g1 = iterative_masking(TwoBlobStub(img), img, G=1, threshold=0.5)
    assert g0.union_bits[1, 1] and not g0.union_bits[5, 5]
    assert g1.union_bits[1, 1] and g1.union_bits[5, 5]
    assert g1.union_bits.sum() == 2


def test_masking_monotone_in_g():
    img = base_image()
    prev = None
    for g in range(6):
        bits = iterative_masking(TwoBlobStub(img), img, G=g, threshold=0.5).union_bits
        if prev is not None:
            assert np.array_equal(np.logical_and(prev, bits), prev)  # prev subset of bits
        prev = bits


def test_masking_writes_exactly_masked_pixels():
    img = base_image()
    stub = TwoBlobStub(img)
    iterative_masking(stub, img, G=2, threshold=0.5)
    # iteration 1 image: cell (1,1) replaced with the mean, everything else intact
    second = stub.images[1]
    block = second.data[16:32, 16:32]
    assert np.allclose(block, img.mean_pixel)
    outside = np.ones((128, 128), dtype=bool)
    outside[16:32, 16:32] = False
    assert np.array_equal(second.data[outside], img.data[outside])
    # the input image object is never mutated
    assert np.array_equal(stub.images[0].data, img.data)


def test_masking_deterministic():
    img = base_image()
    a = iterative_masking(TwoBlobStub(img), img, G=3, threshold=0.5)
    b = iterative_masking(TwoBlobStub(img), img, G=3, threshold=0.5)
    assert np.array_equal(a.union_bits, b.union_bits)
    assert np.array_equal(a.soft_union, b.soft_union)


def test_guidance_map_shape_checked():
    with pytest.raises(ValueError):
        GuidanceMap(
            union_bits=np.zeros((2, 2), dtype=bool),
            soft_union=np.zeros((3, 3)),
            category_id=1,
            contributing_iterations=(0,),
        )
