"""Likelihood-ratio classification and the accuracy metric.

Class 2 is the positive class when counting TP/TN/FP/FN.  Exact
log-likelihood ties go to class 1 (for the LRT) and exact probability ties
go to class 1 (for the network); both are measure-zero events fixed only for
reproducibility.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from . import kalman
from .ssm import ModelError, ModelParams, as_observation_batch, validate_model


class ClassificationError(RuntimeError):
    pass


@dataclass
class LrtClassifier:
    params1: ModelParams
    params2: ModelParams
    provenance: Literal["true", "em-estimated"] = "true"

    def __post_init__(self):
        validate_model(self.params1)
        validate_model(self.params2)
        if self.params1.m_z != self.params2.m_z:
            raise ModelError(f"models disagree on m_z: {self.params1.m_z} vs {self.params2.m_z}")

    @property
    def m_z(self) -> int:
        return self.params1.m_z


def _loglik_or_raise(params: ModelParams, Z: np.ndarray, which: int) -> np.ndarray:
    try:
        return kalman.log_likelihood_batch(params, Z, validate=False)
    except kalman.KalmanError as exc:
        raise ClassificationError(f"model {which}: {exc}") from exc


def lrt_scores(c: LrtClassifier, observations) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Predicted labels and both log-likelihoods for a batch of sequences."""
    Z = as_observation_batch(observations)
    if Z.shape[2] != c.m_z:
        raise ValueError(f"observation dimension {Z.shape[2]} does not match model m_z={c.m_z}")
    ll1 = _loglik_or_raise(c.params1, Z, 1)
    ll2 = _loglik_or_raise(c.params2, Z, 2)
    return np.where(ll2 > ll1, 2, 1), ll1, ll2


def lrt_classify(c: LrtClassifier, obs) -> tuple[int, tuple[float, float]]:
    """Label of the model with the larger log-likelihood, plus both values."""
    labels, ll1, ll2 = lrt_scores(c, obs)
    if len(labels) != 1:
        raise ValueError("lrt_classify takes one sequence; use lrt_scores for several")
    return int(labels[0]), (float(ll1[0]), float(ll2[0]))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total


def evaluate(predictions: Sequence[int], truth: Sequence[int]) -> tuple[ConfusionCounts, float]:
    pred = np.asarray(predictions)
    true = np.asarray(truth)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape} predictions vs {true.shape} labels")
    if pred.size == 0:
        raise ValueError("nothing to evaluate")
    for arr, name in ((pred, "predictions"), (true, "truth")):
        if not np.all(np.isin(arr, (1, 2))):
            raise ValueError(f"{name} must contain only labels 1 and 2")
    counts = ConfusionCounts(
        tp=int(np.sum((pred == 2) & (true == 2))),
        tn=int(np.sum((pred == 1) & (true == 1))),
        fp=int(np.sum((pred == 2) & (true == 1))),
        fn=int(np.sum((pred == 1) & (true == 2))),
    )
    return counts, counts.accuracy
