"""Image kernels: edge operators, blur, jpeg-like codec, resize, CCL, PNG."""

import numpy as np
import pytest

from floc.imgproc import (
    BinaryMask,
    Image,
    bilinear_resize,
    connected_components,
    gaussian_blur,
    jpeg_like_compress,
    largest_component_bbox,
    prewitt_filter,
    read_mask_png,
    read_png,
    sobel_filter,
    write_mask_png,
    write_png,
)
from floc.tensor import Tensor

from oracles import flood_fill_components


def step_edge_tensor(h=8, w=8):
    """Vertical 0 -> 255 step at column w//2."""
    arr = np.zeros((1, 1, h, w), dtype=np.float32)
    arr[:, :, :, w // 2 :] = 255.0
    return Tensor(arr)


class TestEdgeOperators:
    def test_sobel_constant_is_zero(self):
        x = Tensor(np.full((1, 2, 6, 6), 13.0, dtype=np.float32))
        out = sobel_filter(x)
        np.testing.assert_array_equal(out.data, 0.0)  # border included (replicate pad)

    def test_prewitt_constant_is_zero(self):
        x = Tensor(np.full((2, 1, 5, 7), -4.0, dtype=np.float32))
        np.testing.assert_array_equal(prewitt_filter(x).data, 0.0)

    def test_sobel_step_edge_response(self):
        out = sobel_filter(step_edge_tensor())
        # hand convolution of [[-1,0,1],[-2,0,2],[-1,0,1]] at the step: 4*255
        edge_cols = out.data[0, 0, 2:6, 3:5]
        np.testing.assert_allclose(edge_cols, 1020.0)
        np.testing.assert_array_equal(out.data[0, 0, :, :2], 0.0)

    def test_prewitt_step_edge_response(self):
        out = prewitt_filter(step_edge_tensor())
        np.testing.assert_allclose(out.data[0, 0, 2:6, 3:5], 765.0)

    def test_sobel_stronger_than_prewitt_on_step(self):
        x = step_edge_tensor()
        s = sobel_filter(x).data.max()
        p = prewitt_filter(x).data.max()
        assert s > p

    def test_small_spatial_dims_rejected(self):
        with pytest.raises(ValueError, match=">= 3"):
            sobel_filter(Tensor(np.zeros((1, 1, 2, 5), dtype=np.float32)))

    def test_no_grad_passthrough(self):
        x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 5, 5)).astype(np.float32), requires_grad=True)
        out = sobel_filter(x)
        assert out._node is None and not out.requires_grad


class TestGaussianBlur:
    def test_zero_kernel_identity(self, natural_image):
        out = gaussian_blur(natural_image, 0)
        np.testing.assert_array_equal(out.pixels, natural_image.pixels)

    def test_constant_unchanged(self):
        img = Image(np.full((16, 16, 3), 77, dtype=np.uint8))
        for k in (5, 11, 29):
            np.testing.assert_array_equal(gaussian_blur(img, k).pixels, img.pixels)

    def test_impulse_weights_sum_to_one(self):
        arr = np.zeros((31, 31, 1), dtype=np.uint8)
        arr[15, 15, 0] = 255
        out = gaussian_blur(Image(arr), 5)
        # all mass preserved (within u8 rounding of each tap)
        assert abs(int(out.pixels.sum()) - 255) <= 13  # 25 taps * 0.5 rounding

    def test_kernel_normalization_exact(self):
        from floc.imgproc import gaussian_kernel_1d

        for k in (5, 11, 17, 23, 29):
            assert abs(gaussian_kernel_1d(k).sum() - 1.0) < 1e-6

    def test_even_kernel_rejected(self):
        img = Image(np.zeros((8, 8, 1), dtype=np.uint8))
        with pytest.raises(ValueError, match="odd"):
            gaussian_blur(img, 4)

    def test_mean_preserved_on_natural_image(self, natural_image):
        base = natural_image.pixels.mean()
        for k in (5, 17, 29):
            blurred = gaussian_blur(natural_image, k).pixels.mean()
            assert abs(blurred - base) <= 0.5


class TestJpegLike:
    def test_quality_100_near_lossless(self, natural_image):
        out = jpeg_like_compress(natural_image, 100)
        diff = np.abs(out.pixels.astype(int) - natural_image.pixels.astype(int))
        assert diff.max() <= 2

    def test_error_monotone_in_quality(self, natural_image):
        maes = []
        for q in (100, 90, 80, 70, 60, 50):
            out = jpeg_like_compress(natural_image, q)
            maes.append(np.abs(out.pixels.astype(float) - natural_image.pixels.astype(float)).mean())
        assert all(b >= a - 1e-12 for a, b in zip(maes, maes[1:])), maes

    def test_q50_worse_than_q90(self, natural_image):
        e50 = np.abs(jpeg_like_compress(natural_image, 50).pixels.astype(float) - natural_image.pixels).mean()
        e90 = np.abs(jpeg_like_compress(natural_image, 90).pixels.astype(float) - natural_image.pixels).mean()
        assert e50 >= e90

    def test_quality_range_validated(self, natural_image):
        with pytest.raises(ValueError, match="quality"):
            jpeg_like_compress(natural_image, 0)
        for q in (50, 60, 70, 80, 90, 100):
            jpeg_like_compress(natural_image, q)  # all Fig-style sweep points accepted

    def test_non_multiple_of_8_dims(self):
        rng = np.random.default_rng(3)
        img = Image(rng.integers(0, 256, size=(13, 21, 3), dtype=np.uint8))
        out = jpeg_like_compress(img, 80)
        assert out.pixels.shape == img.pixels.shape


class TestBilinearResize:
    def test_same_size_identity(self, natural_image):
        out = bilinear_resize(natural_image, natural_image.width, natural_image.height)
        np.testing.assert_array_equal(out.pixels, natural_image.pixels)

    def test_constant_stays_constant(self):
        img = Image(np.full((10, 10, 3), 99, dtype=np.uint8))
        for w, h in ((3, 3), (17, 5), (40, 40)):
            assert np.all(bilinear_resize(img, w, h).pixels == 99)

    def test_known_weights_1d(self):
        row = np.array([[0.0, 10.0]])
        out = bilinear_resize(row, 4, 1)
        np.testing.assert_allclose(out, [[0.0, 2.5, 7.5, 10.0]])

    def test_zero_target_rejected(self):
        with pytest.raises(ValueError, match=">= 1"):
            bilinear_resize(np.zeros((4, 4)), 0, 4)

    def test_float_map_roundtrip_shape(self):
        m = np.random.default_rng(0).normal(size=(8, 8)).astype(np.float32)
        out = bilinear_resize(m, 32, 16)
        assert out.shape == (16, 32) and out.dtype == np.float32


class TestConnectedComponents:
    def test_empty_mask(self):
        assert connected_components(BinaryMask(np.zeros((5, 5), dtype=bool))) == []

    def test_full_mask(self):
        comps = connected_components(BinaryMask(np.ones((4, 6), dtype=bool)))
        assert len(comps) == 1
        assert comps[0].count == 24
        assert comps[0].bbox == (0, 0, 5, 3)

    def test_matches_flood_fill_oracle(self):
        rng = np.random.default_rng(7)
        for trial in range(200):
            mask = rng.random((32, 32)) < rng.uniform(0.15, 0.7)
            for conn in (4, 8):
                comps = connected_components(BinaryMask(mask), conn)
                oracle = set(flood_fill_components(mask, conn))
                # reconstruct member sets from labels: partition equality
                got = set()
                remaining = mask.copy()
                labels = _relabel(mask, comps, conn)
                for cid in range(len(comps)):
                    got.add(frozenset(map(tuple, np.argwhere(labels == cid))))
                assert got == oracle, f"trial {trial} conn {conn}"

    def test_ordering_deterministic(self):
        mask = np.zeros((8, 8), dtype=bool)
        mask[0:2, 0:2] = True  # 4 px at top
        mask[5:8, 5:8] = True  # 9 px at bottom
        comps = connected_components(BinaryMask(mask))
        assert [c.count for c in comps] == [9, 4]
        assert comps[0].rep == (5, 5)

    def test_diagonal_connectivity(self):
        mask = np.eye(4, dtype=bool)
        assert len(connected_components(BinaryMask(mask), 8)) == 1
        assert len(connected_components(BinaryMask(mask), 4)) == 4


def _relabel(mask, comps, conn):
    """Assign each True pixel its component index via bbox+flood from rep."""
    from collections import deque

    h, w = mask.shape
    labels = np.full((h, w), -1)
    if conn == 4:
        offsets = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    else:
        offsets = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]
    for cid, comp in enumerate(comps):
        sy, sx = comp.rep
        queue = deque([(sy, sx)])
        labels[sy, sx] = cid
        while queue:
            y, x = queue.popleft()
            for dy, dx in offsets:
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and labels[ny, nx] < 0:
                    labels[ny, nx] = cid
                    queue.append((ny, nx))
    return labels


class TestLargestComponentBbox:
    def test_empty_none(self):
        assert largest_component_bbox(BinaryMask(np.zeros((4, 4), dtype=bool))) is None

    def test_single_pixel(self):
        mask = np.zeros((8, 8), dtype=bool)
        mask[3, 5] = True
        assert largest_component_bbox(BinaryMask(mask)) == (5, 3, 5, 3)

    def test_tie_break_by_representative(self):
        mask = np.zeros((16, 16), dtype=bool)
        mask[10:12, 0:2] = True  # starts at row 10
        mask[0:2, 10:12] = True  # starts at row 0 -> wins the tie
        assert largest_component_bbox(BinaryMask(mask)) == (10, 0, 11, 1)

    def test_bbox_contains_all_members(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            mask = rng.random((16, 16)) < 0.4
            for comp in connected_components(BinaryMask(mask)):
                x0, y0, x1, y1 = comp.bbox
                assert 0 <= x0 <= x1 < 16 and 0 <= y0 <= y1 < 16


class TestPngIO:
    def test_image_roundtrip(self, tmp_path, natural_image):
        p = tmp_path / "img.png"
        write_png(p, natural_image)
        back = read_png(p)
        np.testing.assert_array_equal(back.pixels, natural_image.pixels)

    def test_mask_roundtrip_and_threshold(self, tmp_path):
        mask = BinaryMask(np.random.default_rng(5).random((9, 13)) < 0.5)
        p = tmp_path / "mask.png"
        write_mask_png(p, mask)
        back = read_mask_png(p)
        np.testing.assert_array_equal(back.data, mask.data)

    def test_mask_reads_values_above_128_as_true(self, tmp_path):
        from PIL import Image as PILImage

        arr = np.array([[0, 127], [128, 255]], dtype=np.uint8)
        p = tmp_path / "gray.png"
        PILImage.fromarray(arr).save(p)
        back = read_mask_png(p)
        np.testing.assert_array_equal(back.data, [[False, False], [True, True]])


class TestTypes:
    def test_image_validation(self):
        with pytest.raises(ValueError, match="uint8"):
            Image(np.zeros((4, 4, 3), dtype=np.float32))
        with pytest.raises(ValueError, match=r"\[h,w,1\] or \[h,w,3\]"):
            Image(np.zeros((4, 4, 2), dtype=np.uint8))

    def test_grayscale_promoted_to_3d(self):
        img = Image(np.zeros((4, 4), dtype=np.uint8))
        assert img.channels == 1 and img.pixels.shape == (4, 4, 1)
