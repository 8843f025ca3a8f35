"""Evaluation metrics over a client's local test set."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import N_CLASSES, client_forward


@dataclass
class Metrics:
    accuracy: float
    confusion: np.ndarray  # rows are true classes
    mean_loss: float

    @property
    def recall(self) -> np.ndarray:
        rows = self.confusion.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, np.diag(self.confusion) / np.maximum(rows, 1), np.nan)

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "mean_loss": self.mean_loss,
                "recall": [None if np.isnan(r) else float(r) for r in self.recall],
                "confusion": self.confusion.astype(int).tolist()}

    @classmethod
    def from_confusion(cls, confusion, mean_loss: float = float("nan")) -> "Metrics":
        c = np.asarray(confusion, dtype=np.int64)
        total = c.sum()
        acc = float(np.trace(c) / total) if total else float("nan")
        return cls(acc, c, mean_loss)


def confusion_matrix(labels, predictions, n_classes: int = N_CLASSES) -> np.ndarray:
    c = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(c, (np.asarray(labels), np.asarray(predictions)), 1)
    return c


def predict(probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(probs, axis=-1)


def evaluate(net, test_set) -> Metrics:
    f_star, f_prime, labels = test_set
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot evaluate on an empty set")
    probs, _ = client_forward(net, np.atleast_2d(f_star), np.atleast_2d(f_prime))
    probs = np.atleast_2d(probs)
    loss = float(-np.log(np.maximum(probs[np.arange(labels.size), labels], 1e-12)).mean())
    return Metrics.from_confusion(confusion_matrix(labels, predict(probs), probs.shape[1]), loss)
