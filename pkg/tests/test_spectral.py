import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freqlens import spectral as S
from freqlens.spectral import AsymmetryError, Spectrum


def naive_dft2(x):
    """Direct double sum F(u,v) = sum_m sum_n x(m,n) exp(-2j pi (um/M + vn/N))."""
    m_, n_ = x.shape
    out = np.zeros((m_, n_), dtype=complex)
    for u in range(m_):
        for v in range(n_):
            acc = 0j
            for m in range(m_):
                for n in range(n_):
                    acc += x[m, n] * np.exp(-2j * np.pi * (u * m / m_ + v * n / n_))
            out[u, v] = acc
    return out


def count_inside(h, w, bandwidth):
    """Enumerate grid points strictly closer than bandwidth/2 to (h//2, w//2)."""
    cu, cv = h // 2, w // 2
    return sum(
        1 for u in range(h) for v in range(w) if (u - cu) ** 2 + (v - cv) ** 2 < (bandwidth / 2) ** 2
    )


def test_dft_constant_image():
    c = 0.37
    f = S.dft2(np.full((6, 5), c)).values
    assert abs(f[0, 0] - 30 * c) <= 1e-9
    f[0, 0] = 0
    assert np.abs(f).max() <= 1e-9


def test_dft_unit_impulse():
    x = np.zeros((4, 7))
    x[0, 0] = 1.0
    np.testing.assert_allclose(S.dft2(x).values, np.ones((4, 7)), atol=1e-12)


@pytest.mark.parametrize("shape", [(8, 8), (9, 7), (1, 5)])
def test_dft_matches_naive_sum(shape):
    x = np.random.default_rng(sum(shape)).uniform(size=shape)
    assert np.abs(S.dft2(x).values - naive_dft2(x)).max() <= 1e-9


def test_idft_roundtrip_and_trivial_cases():
    x = np.random.default_rng(0).normal(size=(3, 8, 6))
    assert np.abs(S.idft2(S.dft2(x)) - x).max() <= 1e-9
    assert not S.idft2(Spectrum(np.zeros((5, 5), dtype=complex))).any()
    f = np.zeros((4, 6), dtype=complex)
    f[0, 0] = 24 * 0.6
    np.testing.assert_allclose(S.idft2(Spectrum(f)), 0.6, atol=1e-12)


def test_idft_rejects_asymmetric_spectrum():
    f = np.zeros((4, 4), dtype=complex)
    f[0, 1] = 16.0  # no conjugate partner at (0, 3)
    with pytest.raises(AsymmetryError):
        S.idft2(Spectrum(f))


def test_idft_requires_natural_layout():
    with pytest.raises(ValueError):
        S.idft2(S.shift(S.dft2(np.zeros((4, 4)))))


def test_conjugate_symmetry_of_real_image():
    x = np.random.default_rng(1).uniform(size=(6, 9))
    f = S.dft2(x).values
    h, w = f.shape
    mirror = f[(-np.arange(h)) % h][:, (-np.arange(w)) % w]
    assert np.abs(f - np.conj(mirror)).max() <= 1e-9


def test_parseval():
    x = np.random.default_rng(2).normal(size=(10, 7))
    lhs = (x**2).sum()
    rhs = (np.abs(S.dft2(x).values) ** 2).sum() / x.size
    assert abs(lhs - rhs) <= 1e-6 * lhs


def test_shift_moves_dc_to_center():
    for h, w in [(8, 8), (3, 3), (5, 6)]:
        x = np.zeros((h, w))
        x[0, 0] = 1.0
        f = np.zeros((h, w), dtype=complex)
        f[0, 0] = 1.0
        c = S.shift(Spectrum(f)).values
        assert np.unravel_index(np.abs(c).argmax(), c.shape) == (h // 2, w // 2)


def test_shift_odd_3x3_example():
    f = np.arange(9, dtype=complex).reshape(3, 3)
    assert S.shift(Spectrum(f)).values[1, 1] == f[0, 0]


@pytest.mark.parametrize("shape", [(8, 8), (7, 9), (4, 5)])
def test_unshift_inverts_shift(shape):
    f = np.random.default_rng(3).normal(size=shape) + 0j
    spec = Spectrum(f)
    back = S.unshift(S.shift(spec))
    assert back.layout == S.NATURAL
    np.testing.assert_array_equal(back.values, f)


def test_mask_endpoints():
    assert not S.lowpass_mask(16, 16, 0.0).mask.any()
    assert S.lowpass_mask(16, 12, S.all_pass_bandwidth(16, 12)).mask.all()
    with pytest.raises(ValueError):
        S.lowpass_mask(8, 8, -1.0)


def test_mask_count_matches_enumeration_32():
    m = S.lowpass_mask(32, 32, 32.0)
    assert m.center == (16, 16)
    assert int(m.mask.sum()) == count_inside(32, 32, 32.0)


@pytest.mark.parametrize("h,w", [(16, 16), (9, 7), (32, 32)])
@pytest.mark.parametrize("b", [0.5, 3.0, 7.3, 12.0])
def test_mask_count_matches_enumeration(h, w, b):
    assert int(S.lowpass_mask(h, w, b).mask.sum()) == count_inside(h, w, b)


def test_mask_boundary_excluded():
    # radius exactly B/2 = 2 from center: (cu+2, cv) is excluded
    m = S.lowpass_mask(9, 9, 4.0).mask
    assert not m[6, 4] and m[5, 4]


def test_mask_is_radially_monotone():
    m = S.lowpass_mask(16, 16, 9.0)
    r = S.radius_grid(16, 16)
    assert r[m.mask].max() < r[~m.mask].min()


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 50), st.floats(0, 50), st.sampled_from([(8, 8), (9, 7), (16, 16)]))
def test_mask_nesting(b1, b2, shape):
    lo, hi = sorted((b1, b2))
    m1, m2 = S.lowpass_mask(*shape, lo).mask, S.lowpass_mask(*shape, hi).mask
    assert not (m1 & ~m2).any()


def test_mask_symmetrization_is_noop_on_centered_grids():
    # the conjugate partner of any bin is equidistant from the floor-center
    for h, w in [(8, 8), (9, 7), (16, 10)]:
        for b in np.linspace(0, 2 * np.hypot(h, w), 17):
            raw = S.radius_grid(h, w) < b / 2
            np.testing.assert_array_equal(S.lowpass_mask(h, w, b).mask, raw)


def test_apply_lowpass_endpoints():
    x = np.random.default_rng(4).uniform(size=(3, 16, 16))
    np.testing.assert_allclose(S.apply_lowpass(x, S.all_pass_bandwidth(16, 16)), x, atol=1e-9)
    assert not S.apply_lowpass(x, 0.0).any()


def test_apply_lowpass_constant_image_survives():
    x = np.full((2, 8, 8), 0.4)
    for b in (0.5, 3.0, 10.0):
        np.testing.assert_allclose(S.apply_lowpass(x, b), 0.4, atol=1e-12)


def test_apply_lowpass_clamps_only_on_request():
    x = np.zeros((8, 8))
    x[0, 0] = 1.0
    raw = S.apply_lowpass(x, 4.0)
    assert raw.min() < 0
    clamped = S.apply_lowpass(x, 4.0, clamp=True)
    np.testing.assert_array_equal(clamped, np.clip(raw, 0, 1))


@pytest.mark.parametrize("shape", [(16, 16), (9, 7)])
def test_lowpass_is_idempotent_and_real(shape):
    x = np.random.default_rng(5).uniform(size=(3, *shape))
    for b in (1.0, 4.5, 8.0):
        once = S.apply_lowpass(x, b)
        np.testing.assert_allclose(S.apply_lowpass(once, b), once, atol=1e-9)
        spec = S.unshift(Spectrum(S.shift(S.dft2(x)).values * S.lowpass_mask(*shape, b).mask, S.CENTERED))
        assert np.abs(np.fft.ifft2(spec.values).imag).max() <= 1e-9


def test_lowpass_projection_family():
    x = np.random.default_rng(6).uniform(size=(16, 16))
    b1, b2 = 5.0, 11.0
    np.testing.assert_allclose(S.apply_lowpass(S.apply_lowpass(x, b2), b1), S.apply_lowpass(x, b1), atol=1e-9)


def test_merge_endpoints_and_identity():
    rng = np.random.default_rng(7)
    a, b = rng.uniform(size=(3, 16, 16)), rng.uniform(size=(3, 16, 16))
    np.testing.assert_allclose(S.merge_frequencies(a, b, 0.0), b, atol=1e-9)
    np.testing.assert_allclose(S.merge_frequencies(a, b, S.all_pass_bandwidth(16, 16)), a, atol=1e-9)
    for bw in (2.0, 7.0, 13.0):
        np.testing.assert_allclose(S.merge_frequencies(a, a, bw), a, atol=1e-9)


def test_merge_is_lowpass_plus_complement():
    rng = np.random.default_rng(8)
    a, b = rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16))
    bw = 6.0
    expect = S.apply_lowpass(a, bw) + (b - S.apply_lowpass(b, bw))
    np.testing.assert_allclose(S.merge_frequencies(a, b, bw), expect, atol=1e-9)
    # the two merges partition the pair: they sum to a + b
    np.testing.assert_allclose(S.merge_frequencies(a, b, bw) + S.merge_frequencies(b, a, bw), a + b, atol=1e-9)


def test_merge_shape_mismatch():
    with pytest.raises(ValueError):
        S.merge_frequencies(np.zeros((8, 8)), np.zeros((8, 9)), 3.0)


def test_mean_log_amplitude_of_identical_images():
    x = np.random.default_rng(9).uniform(size=(1, 3, 8, 8))
    many = np.repeat(x, 4, axis=0)
    np.testing.assert_allclose(S.mean_log_amplitude(many), S.mean_log_amplitude(x), atol=1e-12)


def test_mean_log_amplitude_constant_images():
    c = 0.5
    m = S.mean_log_amplitude(np.full((3, 2, 8, 8), c))
    assert abs(m[4, 4] - np.log(64 * c + S.LOG_FLOOR)) <= 1e-12
    rest = np.delete(m.ravel(), 4 * 8 + 4)
    # exact zeros may come out of the FFT as ~1e-17; their logs sit near log(1e-12)
    assert np.all(rest <= np.log(1e-12) + 1e-3)


def test_mean_log_amplitude_empty():
    with pytest.raises(ValueError):
        S.mean_log_amplitude(np.zeros((0, 3, 8, 8)))


def test_difference_of_set_with_itself_is_zero():
    x = np.random.default_rng(10).uniform(size=(5, 3, 8, 8))
    assert not S.spectrum_difference(x, x).any()


def test_checkerboard_noise_raises_high_frequency_bins():
    rng = np.random.default_rng(11)
    nat = np.clip(0.5 + 0.2 * rng.normal(size=(20, 3, 16, 16)) * 0 + S.apply_lowpass(rng.uniform(size=(20, 3, 16, 16)), 6.0), 0, 1)
    checker = np.indices((16, 16)).sum(axis=0) % 2 * 2.0 - 1.0
    adv = nat + 0.03 * checker
    d = S.spectrum_difference(adv, nat)
    # a +-1 checkerboard puts all its energy at the Nyquist bin (0, 0) of the centered map
    assert d[0, 0] > 1.0
    center = d[6:11, 6:11]
    assert np.abs(center).max() < 1e-9
    r = S.radius_grid(16, 16)
    assert d[r >= 6].mean() > d[r < 2].mean()


def test_annulus_means_bands():
    r = S.radius_grid(16, 16)
    grid = np.digitize(r, [2, 4, 6]).astype(float)
    assert S.annulus_means(grid) == [0.0, 1.0, 2.0, 3.0]


def test_grid_csv_and_pfm_roundtrip(tmp_path):
    g = np.random.default_rng(12).normal(size=(5, 7))
    S.write_grid_csv(tmp_path / "g.csv", g)
    back, layout = S.read_grid_csv(tmp_path / "g.csv")
    assert layout == "centered"
    np.testing.assert_array_equal(back, g)
    assert (tmp_path / "g.csv").read_text().startswith("# layout=centered rows=5 cols=7\n")
    S.write_pfm(tmp_path / "g.pfm", g)
    np.testing.assert_allclose(S.read_pfm(tmp_path / "g.pfm"), g.astype(np.float32))
