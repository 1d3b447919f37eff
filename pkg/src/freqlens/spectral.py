"""2D DFT, centered spectra, radial low-pass masks and frequency swaps.

Sign and scale conventions: the forward transform carries no normalization
and the inverse divides by H*W. Spectra are "natural" (DC at (0, 0)) or
"centered" (DC at (H//2, W//2)). Low-pass masks live in the centered layout
and pass a bin iff its distance from the center is strictly below B/2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOG_FLOOR = 1e-12
ASYMMETRY_TOL = 1e-6
NATURAL = "natural"
CENTERED = "centered"


class AsymmetryError(ValueError):
    """Inverse transform produced a non-negligible imaginary part."""


@dataclass(frozen=True)
class Spectrum:
    values: np.ndarray  # complex, (..., H, W)
    layout: str = NATURAL

    @property
    def source_shape(self) -> tuple[int, int]:
        return self.values.shape[-2:]

    @property
    def amplitude(self) -> np.ndarray:
        return np.abs(self.values)

    @property
    def phase(self) -> np.ndarray:
        return np.angle(self.values)


@dataclass(frozen=True)
class FilterMask:
    mask: np.ndarray  # bool (H, W), centered layout
    bandwidth: float
    center: tuple[int, int]


def dft2(channel: np.ndarray) -> Spectrum:
    """Forward DFT over the last two axes (natural layout)."""
    x = np.asarray(channel, dtype=np.float64)
    return Spectrum(np.fft.fft2(x, axes=(-2, -1)), NATURAL)


def idft2(spectrum: Spectrum) -> np.ndarray:
    """Inverse DFT with the 1/(H*W) factor; returns the real part.

    Raises AsymmetryError when the imaginary residue exceeds 1e-6, which means
    the spectrum was not conjugate-symmetric.
    """
    if spectrum.layout != NATURAL:
        raise ValueError("idft2 expects a natural-layout spectrum; unshift first")
    z = np.fft.ifft2(spectrum.values, axes=(-2, -1))
    residue = float(np.abs(z.imag).max()) if z.size else 0.0
    if residue > ASYMMETRY_TOL:
        raise AsymmetryError(f"imaginary residue {residue:.3g} exceeds {ASYMMETRY_TOL}")
    return np.ascontiguousarray(z.real)


def shift(spectrum: Spectrum) -> Spectrum:
    """Move DC from (0, 0) to (H//2, W//2)."""
    if spectrum.layout == CENTERED:
        return spectrum
    return Spectrum(np.fft.fftshift(spectrum.values, axes=(-2, -1)), CENTERED)


def unshift(spectrum: Spectrum) -> Spectrum:
    if spectrum.layout == NATURAL:
        return spectrum
    return Spectrum(np.fft.ifftshift(spectrum.values, axes=(-2, -1)), NATURAL)


def center_of(h: int, w: int) -> tuple[int, int]:
    return h // 2, w // 2


def radius_grid(h: int, w: int) -> np.ndarray:
    """Euclidean distance of every centered-layout bin from the DC bin."""
    cu, cv = center_of(h, w)
    u = np.arange(h)[:, None] - cu
    v = np.arange(w)[None, :] - cv
    return np.sqrt(u * u + v * v)


def _mirror(mask: np.ndarray) -> np.ndarray:
    # centered index i holds frequency i - c; its conjugate partner sits at (2c - i) mod n
    h, w = mask.shape
    cu, cv = center_of(h, w)
    rows = (2 * cu - np.arange(h)) % h
    cols = (2 * cv - np.arange(w)) % w
    return mask[np.ix_(rows, cols)]


def lowpass_mask(h: int, w: int, bandwidth: float) -> FilterMask:
    """Binary centered mask passing bins with r < bandwidth / 2.

    The mask is intersected with its conjugate mirror so filtered real images
    stay real.
    """
    if bandwidth < 0:
        raise ValueError(f"bandwidth must be >= 0, got {bandwidth}")
    m = radius_grid(h, w) < bandwidth / 2.0
    m &= _mirror(m)
    return FilterMask(m, float(bandwidth), center_of(h, w))


def all_pass_bandwidth(h: int, w: int) -> float:
    return 2.0 * float(np.hypot(h, w))


def _as_mask(mask_or_b, h: int, w: int) -> np.ndarray:
    if isinstance(mask_or_b, FilterMask):
        m = mask_or_b.mask
        if m.shape != (h, w):
            raise ValueError(f"mask shape {m.shape} does not match image {(h, w)}")
        return m
    return lowpass_mask(h, w, float(mask_or_b)).mask


def apply_lowpass(image: np.ndarray, bandwidth, clamp: bool = False) -> np.ndarray:
    """Keep only frequency bins inside the radial mask, per channel.

    ``image`` is (..., H, W); any leading axes (channels, batch) are filtered
    independently. ``bandwidth`` may be a number or a prebuilt FilterMask.
    Raw values are returned unless ``clamp`` is set.
    """
    x = np.asarray(image, dtype=np.float64)
    h, w = x.shape[-2:]
    m = _as_mask(bandwidth, h, w)
    if not m.any():
        out = np.zeros_like(x)
    elif m.all():
        out = x.copy()
    else:
        spec = shift(dft2(x))
        out = idft2(unshift(Spectrum(spec.values * m, CENTERED)))
    return np.clip(out, 0.0, 1.0) if clamp else out


def merge_frequencies(inner: np.ndarray, outer: np.ndarray, bandwidth, clamp: bool = False) -> np.ndarray:
    """In-band bins from ``inner``, out-of-band bins from ``outer``."""
    a = np.asarray(inner, dtype=np.float64)
    b = np.asarray(outer, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"merge_frequencies: shape mismatch {a.shape} vs {b.shape}")
    h, w = a.shape[-2:]
    m = _as_mask(bandwidth, h, w)
    if not m.any():
        out = b.copy()
    elif m.all():
        out = a.copy()
    else:
        fa = shift(dft2(a)).values
        fb = shift(dft2(b)).values
        out = idft2(unshift(Spectrum(np.where(m, fa, fb), CENTERED)))
    return np.clip(out, 0.0, 1.0) if clamp else out


def mean_log_amplitude(images: np.ndarray) -> np.ndarray:
    """Centered mean of log(|F| + 1e-12) over images and channels.

    ``images`` is (N, C, H, W), (N, H, W) or a single (H, W) channel.
    """
    x = np.asarray(images, dtype=np.float64)
    if x.size == 0 or (x.ndim >= 3 and x.shape[0] == 0):
        raise ValueError("mean_log_amplitude: empty image set")
    amp = np.abs(shift(dft2(x)).values)
    logs = np.log(amp + LOG_FLOOR)
    return logs.reshape(-1, *logs.shape[-2:]).mean(axis=0)


def spectrum_difference(adv_set: np.ndarray, nat_set: np.ndarray) -> np.ndarray:
    """mean_log_amplitude(adv) - mean_log_amplitude(nat), i.e. log(|adv| / |nat|)."""
    adv_set = np.asarray(adv_set)
    nat_set = np.asarray(nat_set)
    if adv_set.shape[1:] != nat_set.shape[1:]:
        raise ValueError(f"spectrum_difference: shape mismatch {adv_set.shape} vs {nat_set.shape}")
    return mean_log_amplitude(adv_set) - mean_log_amplitude(nat_set)


def annulus_means(diff_map: np.ndarray, bands: int = 4) -> list[float]:
    """Mean of a centered map over equal-width radial bands.

    Band edges split [0, min(H, W)/2] evenly; the last band also absorbs the
    corner bins beyond that radius.
    """
    h, w = diff_map.shape
    r = radius_grid(h, w)
    rmax = min(h, w) / 2.0
    edges = [rmax * k / bands for k in range(bands)] + [np.inf]
    return [float(diff_map[(r >= lo) & (r < hi)].mean()) for lo, hi in zip(edges[:-1], edges[1:])]


def write_grid_csv(path, grid: np.ndarray, layout: str = CENTERED) -> None:
    """Row-major CSV dump of a 2-D map with a layout header line."""
    h, w = grid.shape
    lines = [f"# layout={layout} rows={h} cols={w}"]
    lines += [",".join(repr(float(v)) for v in row) for row in grid]
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_grid_csv(path) -> tuple[np.ndarray, str]:
    with open(path) as fh:
        header = fh.readline().strip()
        rows = [[float(v) for v in line.split(",")] for line in fh if line.strip()]
    layout = dict(kv.split("=") for kv in header.lstrip("# ").split())["layout"]
    return np.array(rows), layout


def write_pfm(path, grid: np.ndarray) -> None:
    """Portable float map (grayscale PFM, little-endian, bottom row first)."""
    h, w = grid.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode())
        fh.write(np.ascontiguousarray(grid[::-1], dtype="<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"Pf":
            raise ValueError("not a grayscale PFM file")
        w, h = (int(v) for v in fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype, count=w * h)
    return data.reshape(h, w)[::-1].astype(np.float64)
