"""Deterministic l2 certificates from a global Lipschitz bound on logit margins."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .exceptions import ContractError, DimensionError

CERTIFIED = "certified"
BOTTOM = "bottom"
CSV_HEADER = ["sample_id", "pred", "verdict", "slack", "limiting_class"]


@dataclass(frozen=True)
class Certificate:
    sample_id: int
    pred: int
    verdict: str
    slack: float
    limiting_class: int

    @property
    def certified(self) -> bool:
        return self.verdict == CERTIFIED


def _check(logits: np.ndarray, K: np.ndarray, eps: float) -> None:
    if eps < 0:
        raise ContractError(f"eps must be >= 0, got {eps}")
    c = logits.shape[-1]
    if K.shape != (c, c):
        raise DimensionError(f"pair constants {K.shape} do not match {c} logits")


def certify_batch(logits, K, eps: float, ids=None) -> list[Certificate]:
    """Certificates for rows of ``logits`` (``[N, C]``).

    The prediction ``y`` is the argmax.  The slack is
    ``min_{j != y} (z_y - z_j - eps * K[j, y])`` and the sample is certified
    iff the slack is strictly positive, so an exact tie is never certified.
    """
    logits = np.asarray(logits, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    if logits.ndim != 2:
        raise DimensionError(f"expected [N, C] logits, got {logits.shape}")
    _check(logits, K, eps)
    n, c = logits.shape
    if c < 2:
        raise DimensionError("certification needs at least two classes")
    ids = np.arange(n) if ids is None else np.asarray(ids)
    pred = np.argmax(logits, axis=1)
    zy = logits[np.arange(n), pred][:, None]
    slack = zy - logits - eps * K[:, pred].T  # [N, C], entry j uses K[j, y]
    slack[np.arange(n), pred] = np.inf
    limiting = np.argmin(slack, axis=1)
    smin = slack[np.arange(n), limiting]
    return [
        Certificate(int(ids[i]), int(pred[i]), CERTIFIED if smin[i] > 0 else BOTTOM, float(smin[i]), int(limiting[i]))
        for i in range(n)
    ]


def certify_sample(logits, K, eps: float, sample_id: int = 0) -> Certificate:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise DimensionError(f"expected a logit vector, got shape {z.shape}")
    return certify_batch(z[None, :], K, eps, ids=[sample_id])[0]


def evaluate(model, dataset, eps: float, report=None, paper_drop_scaling: bool = False, logits=None):
    """``(clean_accuracy, vra, certificates)`` using a single Lipschitz report."""
    from .model import lipschitz_report

    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    if report is None:
        report = lipschitz_report(model)
    if logits is None:
        logits = model.predict_logits(dataset.images)
    certs = certify_batch(logits, report.pair_constants(paper_drop_scaling), eps)
    pred = np.array([c.pred for c in certs])
    correct = pred == dataset.labels
    certified = np.array([c.certified for c in certs])
    return float(correct.mean()), float((correct & certified).mean()), certs


def vra(model, dataset, eps: float, report=None, paper_drop_scaling: bool = False) -> float:
    """Fraction of samples that are correctly classified and certified at ``eps``."""
    return evaluate(model, dataset, eps, report, paper_drop_scaling)[1]


def write_certificates(path, certs: list[Certificate]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for c in certs:
            w.writerow([c.sample_id, c.pred, c.verdict, repr(c.slack), c.limiting_class])
