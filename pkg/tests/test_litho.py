import math
from types import SimpleNamespace

import numpy as np
import pytest
from scipy.special import expit

from ilt.errors import DimensionError, ValidationError
from ilt.kernels import Corner, KernelSet, ProcessCorners, replicate, synth_gaussian_kernels
from ilt.litho import (
    LithoConfig,
    aerial_image,
    corners_vjp,
    litho_vjp,
    mask_sigmoid,
    print_corners,
    resist_hard,
    resist_soft,
    simulate_corners,
)
from ilt.raster import BinaryImage, GrayImage, GridSpec

from oracles import central_difference, naive_intensity


def gray(data, nm=1.0):
    h, w = data.shape
    return GrayImage(GridSpec(w, h, nm), data)


def random_kernels(rng, count, f):
    responses = rng.normal(size=(count, f, f)) + 1j * rng.normal(size=(count, f, f))
    return KernelSet(rng.random(count) + 0.1, responses)


def fft_intensity(mask, ks, dose):
    """Same model through full FFTs and an explicit embed of the window."""
    h, w = mask.shape
    half = ks.freq_dim // 2
    spectrum = np.fft.fft2(mask)
    rows = np.arange(-half, half + 1) % h
    cols = np.arange(-half, half + 1) % w
    out = np.zeros((h, w))
    for weight, resp in zip(ks.weights, ks.responses):
        full = np.zeros((h, w), dtype=complex)
        full[np.ix_(rows, cols)] = spectrum[np.ix_(rows, cols)] * resp
        out += weight * np.abs(np.fft.ifft2(full)) ** 2
    return dose * out


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / np.max(np.abs(b)))


class TestAerialImage:
    def test_zero_mask(self):
        ks = synth_gaussian_kernels(9, 2.0).nominal.kernels
        img, _ = aerial_image(gray(np.zeros((16, 16))), ks)
        assert np.all(img.data == 0)

    def test_identity_kernel_squares_mask(self, rng):
        m = rng.random((63, 63))
        ks = KernelSet(np.ones(1), np.ones((63, 63)))
        img, _ = aerial_image(gray(m), ks)
        assert np.allclose(img.data, m**2, rtol=0, atol=1e-12)

    def test_matches_naive_dft_oracle(self, rng):
        m = rng.random((64, 64))
        ks = synth_gaussian_kernels(15, 3.0).nominal.kernels
        img, _ = aerial_image(gray(m), ks, dose=1.0)
        assert rel_err(img.data, naive_intensity(m, ks, 1.0)) <= 1e-10
        assert rel_err(img.data, fft_intensity(m, ks, 1.0)) <= 1e-10

    def test_asymmetric_kernels_on_rectangular_grid(self, rng):
        # pins the (row, col) orientation of the response window
        m = rng.random((24, 30))
        ks = random_kernels(rng, 3, 7)
        img, _ = aerial_image(gray(m), ks, dose=0.9)
        assert rel_err(img.data, naive_intensity(m, ks, 0.9)) <= 1e-10
        assert rel_err(img.data, fft_intensity(m, ks, 0.9)) <= 1e-10

    def test_chunked_path_matches_taped_path(self, rng):
        m = rng.random((32, 32))
        ks = random_kernels(rng, 19, 9)
        taped, tape = aerial_image(gray(m), ks, with_tape=True)
        plain, none = aerial_image(gray(m), ks, with_tape=False)
        assert tape is not None and none is None
        assert np.allclose(taped.data, plain.data, rtol=1e-12, atol=0)

    def test_replicated_kernels_leave_intensity_unchanged(self, rng):
        m = rng.random((32, 32))
        ks = random_kernels(rng, 2, 9)
        base, _ = aerial_image(gray(m), ks)
        rep, _ = aerial_image(gray(m), replicate(ks, 12), with_tape=False)
        assert rel_err(rep.data, base.data) <= 1e-12

    def test_low_pass_invariance(self, rng):
        n, f = 48, 11
        m = rng.random((n, n))
        ks = random_kernels(rng, 2, f)
        i, j = np.mgrid[:n, :n]
        unseen = 0.3 * np.cos(2 * np.pi * (f // 2 + 1) * i / n) + 0.2 * (-1.0) ** (i + j)
        a, _ = aerial_image(gray(m), ks)
        b, _ = aerial_image(gray(m + unseen), ks)
        assert np.max(np.abs(a.data - b.data)) <= 1e-10 * np.max(a.data)

    def test_dose_linearity(self, rng):
        m = rng.random((32, 32))
        ks = random_kernels(rng, 2, 9)
        for dose in (0.98, 1.02, 3.5):
            a, _ = aerial_image(gray(m), ks, dose)
            b, _ = aerial_image(gray(m), ks, 1.0)
            assert np.array_equal(a.data, dose * b.data)

    def test_nonnegative(self, rng):
        for _ in range(5):
            m = rng.normal(size=(20, 20))
            img, _ = aerial_image(gray(m), random_kernels(rng, 3, 7))
            assert np.all(img.data >= 0)

    def test_grid_smaller_than_window(self):
        ks = synth_gaussian_kernels(35, 8.0).nominal.kernels
        with pytest.raises(DimensionError):
            aerial_image(gray(np.zeros((32, 64))), ks)


class TestResist:
    def test_hard_threshold_inclusive(self):
        d = 0.225
        img = gray(np.array([[d - 1e-9, d, d + 1e-9]]))
        assert resist_hard(img, d).data.tolist() == [[0, 1, 1]]
        assert resist_hard(gray(np.full((2, 2), d)), d).count() == 4
        assert resist_hard(gray(np.zeros((2, 2))), d).count() == 0

    def test_soft_examples(self):
        cfg = LithoConfig(synth_gaussian_kernels(9, 2.0))
        assert np.all(resist_soft(gray(np.full((2, 2), cfg.d_th)), cfg).data == 0.5)
        z = resist_soft(gray(np.array([[cfg.d_th + 0.02]])), cfg).data[0, 0]
        assert z == pytest.approx(1 / (1 + math.exp(-1)), rel=1e-12)
        assert z == pytest.approx(0.7311, abs=1e-4)
        steep = LithoConfig(cfg.corners, beta2=1e4)
        assert resist_soft(gray(np.array([[0.3]])), steep).data[0, 0] == pytest.approx(1.0)

    def test_soft_strictly_inside_unit_interval(self, rng):
        cfg = LithoConfig(synth_gaussian_kernels(9, 2.0))
        z = resist_soft(gray(rng.random((8, 8)) * 0.5), cfg).data
        assert np.all((z > 0) & (z < 1))

    def test_mask_sigmoid_examples(self):
        assert mask_sigmoid(gray(np.full((2, 2), 0.5)), 4.0, 0.5).data[0, 0] == 0.5
        v = mask_sigmoid(gray(np.ones((1, 1))), 4.0, 0.5).data[0, 0]
        assert v == pytest.approx(1 / (1 + math.exp(-2)), rel=1e-12)
        assert v == pytest.approx(0.8808, abs=1e-4)

    def test_config_validation(self):
        corners = synth_gaussian_kernels(9, 2.0)
        with pytest.raises(ValidationError):
            LithoConfig(corners, d_th=0.0)
        with pytest.raises(ValidationError):
            LithoConfig(corners, beta2=-1.0)


class TestCorners:
    def test_zero_mask_gives_constant_resist(self):
        cfg = LithoConfig(synth_gaussian_kernels(9, 2.0))
        zs = simulate_corners(gray(np.zeros((16, 16))), cfg)[:3]
        for z in zs:
            assert np.allclose(z.data, expit(-cfg.beta2 * cfg.d_th), rtol=1e-15)

    def test_degenerate_corners_coincide(self, rng):
        # ProcessCorners forbids equal doses, so hand the simulator a bare record
        ks = random_kernels(rng, 2, 7)
        same = Corner(ks, 1.0)
        cfg = SimpleNamespace(corners=SimpleNamespace(nominal=same, outer=same, inner=same), d_th=0.3, beta2=50.0)
        z_nom, z_max, z_min, _ = simulate_corners(gray(rng.random((16, 16))), cfg)
        assert np.array_equal(z_nom.data, z_max.data)
        assert np.array_equal(z_nom.data, z_min.data)

    def test_equal_doses_rejected(self, rng):
        ks = random_kernels(rng, 1, 5)
        with pytest.raises(ValidationError):
            ProcessCorners(Corner(ks, 1.0), Corner(ks, 1.0), Corner(ks, 1.0))

    def test_outer_dominates_inner(self, rng):
        cfg = LithoConfig(synth_gaussian_kernels(9, 2.0))
        for _ in range(5):
            _, z_max, z_min, _ = simulate_corners(gray(rng.random((24, 24))), cfg)
            assert np.all(z_max.data >= z_min.data)

    def test_print_corners_matches_hard_resist(self, rng):
        cfg = LithoConfig(synth_gaussian_kernels(9, 2.0))
        mask = BinaryImage(GridSpec(32, 32), (rng.random((32, 32)) > 0.6).astype(np.uint8))
        nom, outer, inner = print_corners(mask, cfg)
        for (ks, dose), z in zip((cfg.corners.nominal, cfg.corners.outer, cfg.corners.inner), (nom, outer, inner)):
            ref, _ = aerial_image(mask.as_gray(), ks, dose)
            assert z == resist_hard(ref, cfg.d_th)


class TestAdjoint:
    def test_zero_upstream(self, rng):
        _, tape = aerial_image(gray(rng.random((16, 16))), random_kernels(rng, 2, 7))
        assert np.all(litho_vjp(tape, np.zeros((16, 16))) == 0)

    def test_identity_kernel_gradient(self, rng):
        m = rng.random((31, 31))
        _, tape = aerial_image(gray(m), KernelSet(np.ones(1), np.ones((31, 31))))
        assert np.allclose(litho_vjp(tape, np.ones((31, 31))), 2 * m, atol=1e-12)

    def test_returns_gray_for_gray_upstream(self, rng):
        img, tape = aerial_image(gray(rng.random((16, 16))), random_kernels(rng, 1, 5))
        out = litho_vjp(tape, img.with_data(np.ones((16, 16))))
        assert isinstance(out, GrayImage)
        with pytest.raises(DimensionError):
            litho_vjp(tape, np.ones((8, 8)))

    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        m = rng.random((32, 32))
        ks = random_kernels(rng, 3, 9)
        upstream = rng.normal(size=(32, 32))
        dose = 1.02

        def objective(x):
            return float(np.sum(upstream * aerial_image(gray(x), ks, dose, with_tape=False)[0].data))

        _, tape = aerial_image(gray(m), ks, dose)
        grad = litho_vjp(tape, upstream)
        flat = rng.choice(m.size, size=20, replace=False)
        for idx in zip(*np.unravel_index(flat, m.shape)):
            fd = central_difference(objective, m, idx, 1e-4)
            assert abs(grad[idx] - fd) <= 1e-4 * max(abs(fd), 1e-8 * np.abs(grad).max())

    def test_directional_adjoint_identity(self, rng):
        m, v = rng.random((32, 32)), rng.normal(size=(32, 32))
        ks = random_kernels(rng, 2, 9)
        upstream = rng.normal(size=(32, 32))
        eps = 1e-4
        plus = aerial_image(gray(m + eps * v), ks, with_tape=False)[0].data
        minus = aerial_image(gray(m - eps * v), ks, with_tape=False)[0].data
        rhs = np.sum(upstream * (plus - minus) / (2 * eps))
        _, tape = aerial_image(gray(m), ks)
        lhs = np.sum(litho_vjp(tape, upstream) * v)
        assert lhs == pytest.approx(rhs, rel=1e-4)

    def test_corners_vjp_finite_differences(self, rng):
        corners = synth_gaussian_kernels(9, 2.0)
        cfg = LithoConfig(corners, beta2=8.0)
        m = rng.random((24, 24))
        ups = [rng.normal(size=(24, 24)) for _ in range(3)]

        def objective(x):
            zs = simulate_corners(gray(x), cfg)[:3]
            return float(sum(np.sum(u * z.data) for u, z in zip(ups, zs)))

        z_nom, z_max, z_min, tapes = simulate_corners(gray(m), cfg)
        grad = corners_vjp(tapes, (z_nom, z_max, z_min), ups, cfg)
        flat = rng.choice(m.size, size=20, replace=False)
        for idx in zip(*np.unravel_index(flat, m.shape)):
            fd = central_difference(objective, m, idx, 1e-5)
            assert grad[idx] == pytest.approx(fd, rel=1e-5, abs=1e-9)
