"""Evaluation protocols built on the generator and the factual classifier:
factual correctness, guidance-scale sweep, and synthetic-data utility."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .backbones import BackboneTrainConfig, FactualClassifier, classify, \
    train_factual_classifier
from .metrics import auc, precision


def metric_row(scores: np.ndarray, labels: np.ndarray) -> dict[str, float]:
    """AUC and precision, macro and weighted: one table row."""
    return {
        "auc_macro": auc(scores, labels, "macro")[0],
        "auc_weighted": auc(scores, labels, "weighted")[0],
        "precision_macro": precision(scores, labels, mode="macro")[0],
        "precision_weighted": precision(scores, labels, mode="weighted")[0],
    }


def permutation_null(scores: np.ndarray, labels: np.ndarray,
                     metric: str = "auc_macro", trials: int = 200,
                     seed: int = 0) -> tuple[float, float]:
    """Mean and std of a metric under row-permuted labels."""
    rng = np.random.default_rng(seed)
    values = []
    for _ in range(trials):
        perm = rng.permutation(len(labels))
        try:
            values.append(metric_row(scores, labels[perm])[metric])
        except ValueError:
            continue
    if not values:
        raise ValueError("permutation null undefined: every permutation failed")
    return float(np.mean(values)), float(np.std(values))


def factual_correctness_eval(generate_fn, test_texts: list[str],
                             test_labels: np.ndarray,
                             classifier: FactualClassifier,
                             real_volumes: torch.Tensor | None = None
                             ) -> dict[str, dict[str, float]]:
    """Generate one volume per test report, classify, and compare with the
    report's ground-truth labels. Includes the real-volume reference row when
    real volumes are supplied.

    generate_fn maps a list of report texts to an (N, H, W, D) tensor.
    """
    rows = {}
    if real_volumes is not None:
        rows["real"] = metric_row(classify(classifier, real_volumes), test_labels)
    generated = generate_fn(test_texts)
    rows["generated"] = metric_row(classify(classifier, generated), test_labels)
    return rows


def guidance_sweep(generate_fn_for_scale, scales: list[float],
                   test_texts: list[str], test_labels: np.ndarray,
                   classifier: FactualClassifier,
                   real_volumes_np: list[np.ndarray] | None = None,
                   feature_fn_3d=None) -> list[dict[str, float]]:
    """One row per guidance scale with everything else fixed; adds 3D FID
    when a real set and feature extractor are provided."""
    from .fid import fid_3d

    rows = []
    for w in scales:
        generated = generate_fn_for_scale(w, test_texts)
        scores = classify(classifier, generated)
        row = {"w": float(w),
               "precision_macro": precision(scores, test_labels, mode="macro")[0],
               "auc_macro": auc(scores, test_labels, "macro")[0]}
        if real_volumes_np is not None and feature_fn_3d is not None:
            gen_np = [v.cpu().numpy() for v in generated]
            row["fid_3d"] = fid_3d(real_volumes_np, gen_np, feature_fn_3d)
        rows.append(row)
    return rows


@dataclass
class DataUtilityResult:
    rows: dict[str, dict[str, float]]


def data_utility_experiment(real_train: torch.Tensor, real_labels: torch.Tensor,
                            synth_train: torch.Tensor, synth_labels: torch.Tensor,
                            test_volumes: torch.Tensor, test_labels: np.ndarray,
                            config: BackboneTrainConfig) -> DataUtilityResult:
    """Train three classifiers (real-only, synthetic-only, combined) with the
    same budget; evaluate all on the same real test set."""
    num_classes = real_labels.shape[1]
    regimes = {
        "real_only": (real_train, real_labels),
        "synthetic_only": (synth_train, synth_labels),
        "real_plus_synthetic": (torch.cat([real_train, synth_train]),
                                torch.cat([real_labels, synth_labels])),
    }
    rows = {}
    for name, (vols, labels) in regimes.items():
        model = train_factual_classifier(vols, labels, num_classes, config)
        scores = classify(model, test_volumes)
        rows[name] = metric_row(scores, test_labels)
    return DataUtilityResult(rows)
