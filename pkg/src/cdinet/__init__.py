"""One-shot inversion of far-field diffraction amplitudes.

Synthesizes compact complex objects and their diffraction patterns, trains
a pair of convolutional encoder-decoder networks (shape head and phase
head) to invert amplitudes to real-space images in a single forward pass,
and evaluates the result against ground truth and classical iterative
phase retrieval.
"""

__version__ = "0.1.0"

from .fields import (GenerationConfig, Dataset, generate_dataset,
                     generate_sample, sample_seed, fft2_centered,
                     diffraction_amplitudes)
from .model import (build_cdinn, forward, predict_object, save_weights,
                    load_weights, NetworkSpec, Network)
from .train import TrainConfig, TrainHistory, train, validate, split_dataset
from .evaluate import (chi_squared, twin, twin_resolved_shape_error,
                       rank_cases, error_histogram, activation_map, EvalRecord)
from .baseline import (Schedule, run_phase_retrieval, benchmark,
                       fourier_project, er_iterate, hio_iterate, shrinkwrap)

__all__ = [
    "__version__",
    "GenerationConfig", "Dataset", "generate_dataset", "generate_sample",
    "sample_seed", "fft2_centered", "diffraction_amplitudes",
    "build_cdinn", "forward", "predict_object", "save_weights",
    "load_weights", "NetworkSpec", "Network",
    "TrainConfig", "TrainHistory", "train", "validate", "split_dataset",
    "chi_squared", "twin", "twin_resolved_shape_error", "rank_cases",
    "error_histogram", "activation_map", "EvalRecord",
    "Schedule", "run_phase_retrieval", "benchmark", "fourier_project",
    "er_iterate", "hio_iterate", "shrinkwrap",
]
