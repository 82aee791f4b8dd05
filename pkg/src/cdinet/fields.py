"""Synthetic compact objects, their far-field diffraction amplitudes, and
dataset generation.

Conventions used throughout the package:

* grids are square, side a power of two (default 32), indexed (row, col)
* diffraction amplitude arrays are nonnegative with the DC term at
  (N/2, N/2)
* the forward transform is unnormalized, the inverse divides by N**2
* phase targets stored in datasets are mapped to [0, 1] via
  ``(phi + pi) / (2 pi)``
"""

import json
import struct
from dataclasses import dataclass, asdict
from math import pi

import numpy as np

MAGIC = b"CDIN"
FORMAT_VERSION = 1

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def mix64(seed: int, index: int) -> int:
    """Derive a 64-bit sub-seed from (seed, index), splitmix64-style."""
    z = (seed + (index + 1) * _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class ShapeField:
    """Real-valued object magnitude on the grid plus its boolean support.

    ``grid`` holds values in [0, 1]; ``support`` is ``grid > threshold``.
    Fresh from :func:`random_convex_object` the grid is binary; after
    :func:`gaussian_blur` the polygon edge becomes a smooth transition.
    """

    grid: np.ndarray
    support: np.ndarray
    threshold: float = 0.1
    points: np.ndarray | None = None    # generating scatter, when known
    vertices: np.ndarray | None = None  # hull vertices, CCW, when known

    @classmethod
    def from_grid(cls, grid: np.ndarray, threshold: float = 0.1) -> "ShapeField":
        grid = np.asarray(grid, dtype=np.float64)
        return cls(grid=grid, support=grid > threshold, threshold=threshold)


@dataclass
class PhaseField:
    """Spatially varying phase in radians, zero outside the object support."""

    grid: np.ndarray


@dataclass
class Sample:
    """One training example: amplitudes plus both real-space targets.

    ``pattern`` keeps the raw (unnormalized) diffraction amplitudes so the
    reciprocal-space error metric can be computed against unscaled truth.
    ``phase_target`` is the [0, 1]-mapped phase. All arrays are float32,
    which is also the on-disk representation; regenerating from ``seed``
    reproduces them bit-exactly.
    """

    pattern: np.ndarray
    shape_target: np.ndarray
    phase_target: np.ndarray
    seed: int


def phase_to_unit(phi: np.ndarray) -> np.ndarray:
    """Map phase in [-pi, pi] to a sigmoid-friendly target in [0, 1]."""
    return (phi + pi) / (2.0 * pi)


def unit_to_phase(t: np.ndarray) -> np.ndarray:
    """Inverse of :func:`phase_to_unit`."""
    return t * (2.0 * pi) - pi


# ---------------------------------------------------------------------------
# convex objects
# ---------------------------------------------------------------------------

def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain on integer points, CCW order, no duplicates."""
    pts = np.unique(points, axis=0)
    if len(pts) < 3:
        return pts
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=np.int64)


def rasterize_hull(vertices: np.ndarray, grid_n: int) -> np.ndarray:
    """Binary mask of pixels whose integer center lies in the hull
    (boundary inclusive). Exact: vertices are integers, so each half-plane
    test is integer arithmetic."""
    if len(vertices) < 3:
        return np.zeros((grid_n, grid_n), dtype=bool)
    rr, cc = np.meshgrid(np.arange(grid_n, dtype=np.int64),
                         np.arange(grid_n, dtype=np.int64), indexing="ij")
    inside = np.ones((grid_n, grid_n), dtype=bool)
    v = vertices
    for i in range(len(v)):
        r0, c0 = v[i]
        r1, c1 = v[(i + 1) % len(v)]
        # CCW hull: interior is on the left of each directed edge
        inside &= (r1 - r0) * (cc - c0) - (c1 - c0) * (rr - r0) >= 0
    return inside


def point_in_hull(point, vertices: np.ndarray) -> bool:
    """Half-plane containment test used as the independent check on the
    rasterizer; boundary counts as inside."""
    if len(vertices) < 3:
        return False
    r, c = int(point[0]), int(point[1])
    for i in range(len(vertices)):
        r0, c0 = vertices[i]
        r1, c1 = vertices[(i + 1) % len(vertices)]
        if (r1 - r0) * (c - c0) - (c1 - c0) * (r - r0) < 0:
            return False
    return True


def random_convex_object(seed: int, grid_n: int = 32,
                         n_points: tuple[int, int] = (5, 15),
                         min_area: int = 12,
                         max_attempts: int = 64) -> ShapeField:
    """Binary compact object: the filled convex hull of random grid points.

    Points are scattered (integer coordinates) in the centered sub-window
    that leaves a ``grid_n // 8`` pixel margin, so the object never touches
    the grid edge. Hulls whose rasterized area falls below ``min_area``
    pixels are resampled, up to ``max_attempts`` draws.

    Returns the pre-blur field: exactly 1 inside the hull, 0 outside.
    """
    if grid_n < 8:
        raise ValueError(f"grid_n must be >= 8, got {grid_n}")
    lo, hi = n_points
    if lo < 3:
        raise ValueError(f"n_points range must start at >= 3, got {n_points}")
    if hi < lo or hi > grid_n * grid_n:
        raise ValueError(f"invalid n_points range {n_points}")
    margin = grid_n // 8
    rng = _rng(seed)
    last_vertices = None
    for _ in range(max_attempts):
        k = int(rng.integers(lo, hi + 1))
        pts = rng.integers(margin, grid_n - margin, size=(k, 2))
        vertices = _convex_hull(pts)
        mask = rasterize_hull(vertices, grid_n)
        if int(mask.sum()) >= min_area:
            f = ShapeField.from_grid(mask.astype(np.float64))
            f.points = pts
            f.vertices = vertices
            return f
        last_vertices = vertices
    raise RuntimeError(
        f"no hull with area >= {min_area} px after {max_attempts} attempts "
        f"(last hull had {0 if last_vertices is None else len(last_vertices)} vertices)")


# ---------------------------------------------------------------------------
# blurring and phase
# ---------------------------------------------------------------------------

def _gauss_kernel(sigma: float) -> np.ndarray:
    r = int(np.ceil(3.0 * sigma))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _correlate1d_zeropad(a: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    r = (len(k) - 1) // 2
    a = np.moveaxis(a, axis, -1)
    n = a.shape[-1]
    pad = np.zeros(a.shape[:-1] + (n + 2 * r,), dtype=np.float64)
    pad[..., r:r + n] = a
    out = np.zeros_like(a, dtype=np.float64)
    for d in range(len(k)):
        out += k[d] * pad[..., d:d + n]
    return np.moveaxis(out, -1, axis)


def gaussian_blur(fld: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel truncated at radius ceil(3*sigma).

    Boundary handling: zero padding with per-pixel renormalization by the
    in-bounds kernel mass, so a constant field stays constant and values
    never leave [min(input), max(input)].
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    fld = np.asarray(fld, dtype=np.float64)
    k = _gauss_kernel(sigma)
    num = _correlate1d_zeropad(_correlate1d_zeropad(fld, k, 0), k, 1)
    ones = np.ones_like(fld)
    den = _correlate1d_zeropad(_correlate1d_zeropad(ones, k, 0), k, 1)
    return num / den


def random_phase_field(seed: int, support: ShapeField, phi_max: float,
                       smooth_sigma: float = 2.0) -> PhaseField:
    """Smoothed white noise rescaled to [-phi_max, +phi_max], zero outside
    the support. ``smooth_sigma = 0`` skips the smoothing."""
    if not (0.0 < phi_max <= pi):
        raise ValueError(f"phi_max must be in (0, pi], got {phi_max}")
    if smooth_sigma < 0:
        raise ValueError(f"smooth_sigma must be >= 0, got {smooth_sigma}")
    n = support.grid.shape[0]
    noise = _rng(seed).standard_normal((n, n))
    if smooth_sigma > 0:
        noise = gaussian_blur(noise, smooth_sigma)
    lo, hi = noise.min(), noise.max()
    if hi > lo:
        phi = (noise - lo) / (hi - lo) * (2.0 * phi_max) - phi_max
    else:
        phi = np.zeros_like(noise)
    phi[~support.support] = 0.0
    return PhaseField(grid=phi)


def assemble_object(shape: ShapeField, phase: PhaseField) -> np.ndarray:
    """Complex object with magnitude from the shape and argument from the
    phase: ``shape * exp(1j * phase)`` computed as separate re/im parts."""
    if shape.grid.shape != phase.grid.shape:
        raise ValueError(
            f"shape/phase grids differ: {shape.grid.shape} vs {phase.grid.shape}")
    re = shape.grid * np.cos(phase.grid)
    im = shape.grid * np.sin(phase.grid)
    return re + 1j * im


# ---------------------------------------------------------------------------
# centered 2D FFT (radix-2, owned here so every module shares one convention)
# ---------------------------------------------------------------------------

_BITREV: dict[int, np.ndarray] = {}
_TWIDDLE: dict[tuple[int, float], np.ndarray] = {}


def _bitrev_indices(n: int) -> np.ndarray:
    if n not in _BITREV:
        idx = np.arange(n)
        rev = np.zeros(n, dtype=np.intp)
        bits = n.bit_length() - 1
        for b in range(bits):
            rev |= ((idx >> b) & 1) << (bits - 1 - b)
        _BITREV[n] = rev
    return _BITREV[n]


def _twiddles(length: int, sign: float) -> np.ndarray:
    key = (length, sign)
    if key not in _TWIDDLE:
        _TWIDDLE[key] = np.exp(sign * 2j * pi * np.arange(length // 2) / length)
    return _TWIDDLE[key]


def _fft_last_axis(a: np.ndarray, sign: float) -> np.ndarray:
    """Iterative radix-2 decimation-in-time along the last axis."""
    n = a.shape[-1]
    y = a[..., _bitrev_indices(n)]
    length = 2
    while length <= n:
        half = length // 2
        tw = _twiddles(length, sign)
        yv = y.reshape(y.shape[:-1] + (n // length, length))
        even = yv[..., :half].copy()
        odd = yv[..., half:] * tw
        yv[..., :half] = even + odd
        yv[..., half:] = even - odd
        length *= 2
    return y


def fft2_centered(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """2D FFT with the DC term at (N/2, N/2) on both sides.

    Forward is unnormalized; inverse divides by N**2, so
    ``fft2_centered(fft2_centered(x), inverse=True)`` recovers ``x``.
    The grid must be square with power-of-two side.
    """
    x = np.asarray(x)
    if x.ndim < 2 or x.shape[-1] != x.shape[-2]:
        raise ValueError(f"expected a square grid, got shape {x.shape}")
    n = x.shape[-1]
    if n < 2 or n & (n - 1):
        raise ValueError(f"grid side must be a power of two, got {n}")
    sign = 1.0 if inverse else -1.0
    y = np.ascontiguousarray(np.fft.ifftshift(x, axes=(-2, -1)),
                             dtype=np.complex128)
    y = _fft_last_axis(y, sign)
    y = _fft_last_axis(np.ascontiguousarray(np.swapaxes(y, -1, -2)), sign)
    y = np.swapaxes(y, -1, -2)
    if inverse:
        y = y / (n * n)
    return np.fft.fftshift(y, axes=(-2, -1))


def diffraction_amplitudes(obj: np.ndarray) -> np.ndarray:
    """Far-field amplitudes of a complex object: |FT|, phases discarded."""
    return np.abs(fft2_centered(obj))


# ---------------------------------------------------------------------------
# dataset generation and the CDIN container
# ---------------------------------------------------------------------------

@dataclass
class GenerationConfig:
    """Everything that shapes one synthetic sample besides its seed."""

    grid_n: int = 32
    n_points: tuple[int, int] = (5, 15)
    min_area: int = 12
    blur_sigma: float = 1.0
    support_threshold: float = 0.1
    phase_sigma: float = 2.0
    phi_max_range: tuple[float, float] = (0.1, pi)
    zero_phase: bool = False  # constant-phase objects, skips the random field

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_points"] = list(d["n_points"])
        d["phi_max_range"] = list(d["phi_max_range"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationConfig":
        d = dict(d)
        d["n_points"] = tuple(d["n_points"])
        d["phi_max_range"] = tuple(d["phi_max_range"])
        return cls(**d)


def sample_seed(master_seed: int, index: int) -> int:
    """Per-sample seed; pure function of (master_seed, index)."""
    return mix64(master_seed, index)


def generate_sample(seed: int, config: GenerationConfig | None = None) -> Sample:
    """Generate one sample from its seed.

    Pipeline: random convex polygon -> 1 px Gaussian edge blur -> random
    smoothed phase (per-sample strength drawn from ``phi_max_range``) ->
    complex object -> centered FT -> keep amplitudes only.
    """
    cfg = config or GenerationConfig()
    binary = random_convex_object(mix64(seed, 0), cfg.grid_n, cfg.n_points,
                                  cfg.min_area)
    grid = gaussian_blur(binary.grid, cfg.blur_sigma)
    shape = ShapeField.from_grid(grid, cfg.support_threshold)
    if cfg.zero_phase:
        phase = PhaseField(grid=np.zeros_like(grid))
    else:
        lo, hi = cfg.phi_max_range
        phi_max = float(_rng(mix64(seed, 1)).uniform(lo, hi))
        phase = random_phase_field(mix64(seed, 2), shape, phi_max,
                                   cfg.phase_sigma)
    obj = assemble_object(shape, phase)
    pattern = diffraction_amplitudes(obj)
    return Sample(
        pattern=pattern.astype(np.float32),
        shape_target=grid.astype(np.float32),
        phase_target=phase_to_unit(phase.grid).astype(np.float32),
        seed=seed,
    )


class DatasetWriteError(OSError):
    def __init__(self, index: int, cause: BaseException):
        super().__init__(f"failed writing sample {index}: {cause}")
        self.index = index


class DatasetFormatError(OSError):
    """The file is not a readable CDIN container."""


def _record_dtype(grid_n: int) -> np.dtype:
    return np.dtype([
        ("pattern", "<f4", (grid_n, grid_n)),
        ("shape", "<f4", (grid_n, grid_n)),
        ("phase", "<f4", (grid_n, grid_n)),
        ("seed", "<u8"),
    ])


class Dataset:
    """Read-only view of a CDIN file; sample arrays are memory-mapped."""

    def __init__(self, path: str):
        self.path = path
        try:
            with open(path, "rb") as f:
                head = f.read(4)
                if head != MAGIC:
                    raise DatasetFormatError(
                        f"{path}: bad magic {head!r}, expected {MAGIC!r}")
                version, grid_n = struct.unpack("<HH", f.read(4))
                if version != FORMAT_VERSION:
                    raise DatasetFormatError(
                        f"{path}: unsupported format version {version}")
                count, master_seed = struct.unpack("<QQ", f.read(16))
                (cfg_len,) = struct.unpack("<I", f.read(4))
                cfg_json = f.read(cfg_len).decode("utf-8")
                self._offset = f.tell()
        except struct.error as e:
            raise DatasetFormatError(f"{path}: truncated header ({e})") from e
        self.grid_n = grid_n
        self.master_seed = master_seed
        self.config = GenerationConfig.from_dict(json.loads(cfg_json))
        rec = _record_dtype(grid_n)
        if count == 0:
            self._records = np.empty((0,), dtype=rec)
        else:
            try:
                self._records = np.memmap(path, dtype=rec, mode="r",
                                          offset=self._offset, shape=(count,))
            except ValueError as e:
                raise DatasetFormatError(f"{path}: body truncated ({e})") from e

    def __len__(self) -> int:
        return len(self._records)

    def __getitem__(self, i: int) -> Sample:
        r = self._records[i]
        return Sample(pattern=np.array(r["pattern"]),
                      shape_target=np.array(r["shape"]),
                      phase_target=np.array(r["phase"]),
                      seed=int(r["seed"]))

    @property
    def patterns(self) -> np.ndarray:
        return self._records["pattern"]

    @property
    def shapes(self) -> np.ndarray:
        return self._records["shape"]

    @property
    def phases(self) -> np.ndarray:
        return self._records["phase"]

    @property
    def seeds(self) -> np.ndarray:
        return self._records["seed"]


def generate_dataset(count: int, master_seed: int, out_path: str,
                     config: GenerationConfig | None = None,
                     progress=None) -> Dataset:
    """Generate ``count`` samples and stream them into a CDIN file.

    Each sample is a pure function of ``sample_seed(master_seed, k)``, so
    output bytes depend only on (count, master_seed, config). ``progress``,
    if given, is called as ``progress(done, count)`` roughly every 1000
    samples. Memory use is constant in ``count``.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    cfg = config or GenerationConfig()
    cfg_bytes = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    rec_dtype = _record_dtype(cfg.grid_n)
    try:
        f = open(out_path, "wb")
    except OSError as e:
        raise DatasetWriteError(-1, e) from e
    with f:
        f.write(MAGIC)
        f.write(struct.pack("<HH", FORMAT_VERSION, cfg.grid_n))
        f.write(struct.pack("<QQ", count, master_seed & _MASK64))
        f.write(struct.pack("<I", len(cfg_bytes)))
        f.write(cfg_bytes)
        rec = np.zeros((), dtype=rec_dtype)
        for k in range(count):
            s = generate_sample(sample_seed(master_seed, k), cfg)
            rec["pattern"] = s.pattern
            rec["shape"] = s.shape_target
            rec["phase"] = s.phase_target
            rec["seed"] = s.seed
            try:
                f.write(rec.tobytes())
            except OSError as e:
                raise DatasetWriteError(k, e) from e
            if progress is not None and ((k + 1) % 1000 == 0 or k + 1 == count):
                progress(k + 1, count)
    return Dataset(out_path)
