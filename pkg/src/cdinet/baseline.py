"""Classical iterative phase retrieval: ER, HIO and shrinkwrap support
re-estimation.

Serves two roles: an independent correctness oracle (given enough
iterations it solves the same noiseless instances the networks are asked
to invert) and the latency reference for the one-shot inverter.
"""

import platform
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as md
from .evaluate import chi_squared, chi_squared_amplitudes
from .fields import fft2_centered, diffraction_amplitudes, gaussian_blur, mix64


class EmptySupportError(RuntimeError):
    def __init__(self, iteration: int):
        super().__init__(f"shrinkwrap produced an empty support at iteration {iteration}")
        self.iteration = iteration


@dataclass
class Schedule:
    """Ordered algorithm phases plus the shrinkwrap cadence.

    ``phases`` entries are (algorithm, iterations, beta); beta is ignored
    by ER. ``shrinkwrap_every = 0`` disables support re-estimation (for
    runs with a trusted support).
    """

    phases: list[tuple[str, int, float]] = field(
        default_factory=lambda: [("hio", 560, 0.9), ("er", 60, 0.0)])
    shrinkwrap_every: int = 20
    shrink_sigma: float = 1.0
    shrink_threshold: float = 0.1

    def total_iterations(self) -> int:
        return sum(n for _, n, _ in self.phases)

    def validate(self) -> None:
        if self.total_iterations() < 1:
            raise ValueError("schedule must run at least one iteration")
        for algo, n, _ in self.phases:
            if algo not in ("er", "hio"):
                raise ValueError(f"unknown algorithm {algo!r}")
            if n < 0:
                raise ValueError("negative iteration count")

    def to_dict(self) -> dict:
        return {"phases": [list(p) for p in self.phases],
                "shrinkwrap_every": self.shrinkwrap_every,
                "shrink_sigma": self.shrink_sigma,
                "shrink_threshold": self.shrink_threshold}


@dataclass
class RetrievalState:
    estimate: np.ndarray       # complex, real space
    support: np.ndarray        # bool
    iteration: int = 0
    beta: float = 0.9
    chi2_trace: list[float] = field(default_factory=list)


def fourier_project(estimate: np.ndarray, measured: np.ndarray) -> np.ndarray:
    """Modulus constraint: keep the estimate's Fourier phases, impose the
    measured amplitudes. Zero-amplitude pixels get unit phase."""
    if estimate.shape != measured.shape:
        raise ValueError(f"grid mismatch: {estimate.shape} vs {measured.shape}")
    ft = fft2_centered(estimate)
    mag = np.abs(ft)
    safe = np.where(mag == 0.0, 1.0, mag)
    phasor = np.where(mag == 0.0, 1.0 + 0.0j, ft / safe)
    return fft2_centered(measured * phasor, inverse=True)


def _append_chi2(state: RetrievalState, measured: np.ndarray) -> None:
    state.chi2_trace.append(
        chi_squared_amplitudes(diffraction_amplitudes(state.estimate), measured))


def er_iterate(state: RetrievalState, measured: np.ndarray) -> RetrievalState:
    """Error reduction: project onto the modulus set, zero outside support."""
    proj = fourier_project(state.estimate, measured)
    state.estimate = np.where(state.support, proj, 0.0)
    state.iteration += 1
    _append_chi2(state, measured)
    return state


def hio_iterate(state: RetrievalState, measured: np.ndarray) -> RetrievalState:
    """Hybrid input-output: inside the support take the projection, outside
    feed back previous - beta * projection."""
    prev = state.estimate
    proj = fourier_project(prev, measured)
    state.estimate = np.where(state.support, proj, prev - state.beta * proj)
    state.iteration += 1
    _append_chi2(state, measured)
    return state


def shrinkwrap(state: RetrievalState, sigma: float, threshold: float) -> RetrievalState:
    """Re-estimate the support: pixels where the blurred magnitude exceeds
    threshold * its maximum."""
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"threshold must be in (0,1), got {threshold}")
    blurred = gaussian_blur(np.abs(state.estimate), sigma)
    support = blurred > threshold * blurred.max()
    if not support.any():
        raise EmptySupportError(state.iteration)
    state.support = support
    return state


@dataclass
class RetrievalResult:
    estimate: np.ndarray       # best-chi2 iterate over the whole run
    chi2_trace: list[float]
    seconds: float

    @property
    def best_chi2(self) -> float:
        return min(self.chi2_trace)


def run_phase_retrieval(pattern: np.ndarray, schedule: Schedule, seed: int,
                        initial_support: np.ndarray | None = None) -> RetrievalResult:
    """Full retrieval run, reproducible from (pattern, schedule, seed).

    Starts from the measured amplitudes with uniform random phases. The
    support starts full (or from ``initial_support``) and is re-estimated
    at the shrinkwrap cadence. Returns the best-chi2 iterate, the full
    per-iteration chi2 trace and the wall time.
    """
    schedule.validate()
    measured = np.asarray(pattern, dtype=np.float64)
    n = measured.shape[0]
    rng = np.random.Generator(np.random.PCG64(seed))
    t0 = time.perf_counter()
    start_phases = rng.uniform(0.0, 2.0 * np.pi, size=measured.shape)
    estimate = fft2_centered(measured * np.exp(1j * start_phases), inverse=True)
    support = (np.ones((n, n), dtype=bool) if initial_support is None
               else np.asarray(initial_support, dtype=bool).copy())
    state = RetrievalState(estimate=estimate, support=support)
    best_chi2 = np.inf
    best = state.estimate
    for algo, iters, beta in schedule.phases:
        state.beta = beta
        step = er_iterate if algo == "er" else hio_iterate
        for _ in range(iters):
            step(state, measured)
            if state.chi2_trace[-1] < best_chi2:
                best_chi2 = state.chi2_trace[-1]
                best = state.estimate
            if schedule.shrinkwrap_every and \
                    state.iteration % schedule.shrinkwrap_every == 0:
                shrinkwrap(state, schedule.shrink_sigma, schedule.shrink_threshold)
    return RetrievalResult(estimate=best.copy(), chi2_trace=state.chi2_trace,
                           seconds=time.perf_counter() - t0)


def hardware_descriptor() -> str:
    import os
    return f"{platform.platform()} / {platform.machine()} / {os.cpu_count()} cpus"


def benchmark(snet: md.Network, pnet: md.Network, dataset, indices=None,
              schedule: Schedule | None = None, threshold: float = 0.1,
              seed: int = 0) -> dict:
    """Per-sample latency and accuracy of the one-shot inverter vs the
    iterative schedule; returns a JSON-ready report with medians and the
    median speedup ratio."""
    sched = schedule or Schedule()
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    if len(idx) == 0:
        raise ValueError("benchmark needs a non-empty test set")
    rows = []
    for i in idx:
        s = dataset[int(i)]
        t0 = time.perf_counter()
        pred = md.predict_object(snet, pnet, s.pattern, threshold)
        nn_ms = (time.perf_counter() - t0) * 1e3
        nn_chi2 = chi_squared(pred, s.pattern)
        res = run_phase_retrieval(s.pattern, sched, mix64(seed, int(i)))
        rows.append({"seed": int(s.seed), "nn_ms": nn_ms,
                     "iter_ms": res.seconds * 1e3,
                     "nn_chi2": nn_chi2, "iter_chi2": res.best_chi2})
    nn_med = statistics.median(r["nn_ms"] for r in rows)
    it_med = statistics.median(r["iter_ms"] for r in rows)
    return {
        "schema_version": 1,
        "hardware": hardware_descriptor(),
        "schedule": sched.to_dict(),
        "rows": rows,
        "medians": {
            "nn_ms": nn_med,
            "iter_ms": it_med,
            "nn_chi2": statistics.median(r["nn_chi2"] for r in rows),
            "iter_chi2": statistics.median(r["iter_chi2"] for r in rows),
        },
        "speedup": it_med / nn_med if nn_med > 0 else float("inf"),
    }
