"""Prediction quality metrics, twin-image handling and diagnostics.

The headline error metric lives in reciprocal space, where the inverse
problem is actually posed: with intensities I = amplitude**2,

    error = sum_i (sqrt(I_pred_i) - sqrt(I_true_i))**2 / sum_i I_true_i

summed over all N pixels. Since sqrt(I) is just the stored amplitude, the
implementation compares amplitude arrays directly. The metric cannot tell
an object from its twin (centrosymmetric inversion + conjugate), so
real-space comparisons check both orientations.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import model as md
from .fields import diffraction_amplitudes


class UndefinedMetricError(ValueError):
    pass


def chi_squared_amplitudes(pred_amp: np.ndarray, true_amp: np.ndarray) -> float:
    pa = np.asarray(pred_amp, dtype=np.float64)
    ta = np.asarray(true_amp, dtype=np.float64)
    if pa.shape != ta.shape:
        raise ValueError(f"grid mismatch: {pa.shape} vs {ta.shape}")
    denom = float((ta * ta).sum())
    if denom == 0.0:
        raise UndefinedMetricError("true pattern carries no intensity")
    return float(((pa - ta) ** 2).sum()) / denom


def chi_squared(pred_obj: np.ndarray, true_amplitudes: np.ndarray) -> float:
    """Reciprocal-space error of a predicted complex object against the
    true (unnormalized) diffraction amplitudes. 0 for an exact match,
    exactly 1 for an identically zero prediction."""
    return chi_squared_amplitudes(diffraction_amplitudes(pred_obj),
                                  true_amplitudes)


def twin(obj: np.ndarray) -> np.ndarray:
    """Conjugate centrosymmetric partner: out[i,j] = conj(in[-i mod N, -j mod N]).

    Shares the object's diffraction amplitudes exactly; applying twice is
    the identity.
    """
    flipped = obj[::-1, ::-1]
    return np.conj(np.roll(flipped, (1, 1), axis=(0, 1)))


def flip_centro(a: np.ndarray) -> np.ndarray:
    """Centrosymmetric index flip without conjugation (for real targets)."""
    return np.roll(a[::-1, ::-1], (1, 1), axis=(0, 1))


def _iou(a: np.ndarray, b: np.ndarray):
    union = np.logical_or(a, b).sum()
    if union == 0:
        return None
    return float(np.logical_and(a, b).sum() / union)


def twin_resolved_shape_error(pred_shape: np.ndarray, true_shape: np.ndarray,
                              threshold: float = 0.1):
    """1 - IoU of thresholded supports, taking whichever of the truth or
    its centrosymmetric flip matches better. Returns (error, twin_used);
    ties resolve to the direct orientation."""
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"threshold must be in (0,1), got {threshold}")
    pm = np.asarray(pred_shape) > threshold
    tm = np.asarray(true_shape) > threshold
    direct = _iou(pm, tm)
    flipped = _iou(pm, flip_centro(tm))
    if direct is None and flipped is None:
        raise UndefinedMetricError("both supports empty at this threshold")
    e_direct = 1.0 - direct if direct is not None else 1.0
    e_flip = 1.0 - flipped if flipped is not None else 1.0
    if e_flip < e_direct:
        return e_flip, True
    return e_direct, False


@dataclass
class EvalRecord:
    seed: int
    chi2: float
    true_intensities: np.ndarray
    pred_intensities: np.ndarray
    overlap: float          # IoU of thresholded supports, twin-resolved
    twin_used: bool

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "seed": self.seed,
            "chi2": self.chi2,
            "overlap": self.overlap,
            "twin_used": self.twin_used,
            "true_intensities": self.true_intensities.tolist(),
            "pred_intensities": self.pred_intensities.tolist(),
        }


def evaluate_sample(snet, pnet, pattern: np.ndarray, true_shape: np.ndarray,
                    seed: int, threshold: float = 0.1) -> EvalRecord:
    pred = md.predict_object(snet, pnet, pattern, threshold)
    pred_amp = diffraction_amplitudes(pred)
    ta = np.asarray(pattern, dtype=np.float64)
    err, used = twin_resolved_shape_error(np.abs(pred), true_shape, threshold)
    return EvalRecord(
        seed=int(seed),
        chi2=chi_squared_amplitudes(pred_amp, ta),
        true_intensities=ta * ta,
        pred_intensities=pred_amp * pred_amp,
        overlap=1.0 - err,
        twin_used=used,
    )


def evaluate_dataset(snet, pnet, dataset, indices=None,
                     threshold: float = 0.1) -> list[EvalRecord]:
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    out = []
    for i in idx:
        s = dataset[int(i)]
        out.append(evaluate_sample(snet, pnet, s.pattern, s.shape_target,
                                   s.seed, threshold))
    return out


def rank_cases(records: list[EvalRecord], k: int, order: str = "best"):
    """k records with the lowest ("best") or highest ("worst") chi2;
    deterministic under ties via the sample seed."""
    if k > len(records):
        raise ValueError(f"k={k} exceeds record count {len(records)}")
    if order == "best":
        return sorted(records, key=lambda r: (r.chi2, r.seed))[:k]
    if order == "worst":
        return sorted(records, key=lambda r: (-r.chi2, r.seed))[:k]
    raise ValueError(f"order must be best or worst, got {order!r}")


def error_histogram(records: list[EvalRecord], bin_count: int):
    """Uniform bins over [0, max chi2]; returns (edges, counts)."""
    if bin_count < 1:
        raise ValueError("bin_count must be >= 1")
    if not records:
        raise ValueError("no records to histogram")
    values = np.array([r.chi2 for r in records])
    top = float(values.max())
    if top <= 0.0:
        top = 1.0
    counts, edges = np.histogram(values, bins=bin_count, range=(0.0, top))
    return edges, counts


# ---------------------------------------------------------------------------
# activation maps
# ---------------------------------------------------------------------------

def bilinear_resize(img: np.ndarray, out_n: int) -> np.ndarray:
    """Corner-aligned bilinear interpolation of a square image."""
    img = np.asarray(img, dtype=np.float64)
    n = img.shape[0]
    if n == out_n:
        return img.copy()
    pos = np.linspace(0.0, n - 1.0, out_n)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = pos - i0
    rows = (img[i0, :] * (1.0 - frac)[:, None] + img[i1, :] * frac[:, None])
    return (rows[:, i0] * (1.0 - frac)[None, :] + rows[:, i1] * frac[None, :])


def activation_map(net, pattern: np.ndarray, conv_index: int) -> np.ndarray:
    """Mean over filters of a conv layer's post-activation output,
    bilinearly interpolated to the input resolution when the layer sits
    below it."""
    act = md.forward_capture(net, pattern, conv_index)
    mean = act.mean(axis=0)
    return bilinear_resize(mean, net.spec.grid_n)


# ---------------------------------------------------------------------------
# exports: JSON lines, PGM images, panel grids, histogram CSV
# ---------------------------------------------------------------------------

def write_records_jsonl(path: str, records: list[EvalRecord]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r.to_dict()) + "\n")


def write_histogram_csv(path: str, edges: np.ndarray, counts: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("bin_lo,bin_hi,count\n")
        for i, c in enumerate(counts):
            f.write(f"{edges[i]:.9g},{edges[i + 1]:.9g},{int(c)}\n")


def to_u8(img: np.ndarray) -> np.ndarray:
    """Min-max scale one tile into 8-bit gray."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if hi > lo:
        img = (img - lo) / (hi - lo)
    else:
        img = np.zeros_like(img)
    return np.round(img * 255.0).astype(np.uint8)


def write_pgm(path: str, img: np.ndarray) -> None:
    """Binary (P5) 8-bit portable graymap."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = to_u8(img)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def panel_grid(rows: list[list[np.ndarray]], pad: int = 1) -> np.ndarray:
    """Stack per-sample tiles into one grid image (rows of tiles,
    1 px separators); each tile is min-max scaled on its own."""
    tiles = [[to_u8(t) for t in row] for row in rows]
    th, tw = tiles[0][0].shape
    nrow, ncol = len(tiles), len(tiles[0])
    grid = np.zeros((nrow * th + (nrow - 1) * pad,
                     ncol * tw + (ncol - 1) * pad), dtype=np.uint8)
    for i, row in enumerate(tiles):
        for j, t in enumerate(row):
            y, x = i * (th + pad), j * (tw + pad)
            grid[y:y + th, x:x + tw] = t
    return grid
