"""Clustering agreement and prediction-quality metrics (numpy only).

AMI here excludes background (0) and overlap (-1) pixels before building
the contingency table, and chance-corrects with the exact expected mutual
information under the permutation model. Sums use math.fsum so scores are
bit-identical under any relabeling of either partition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln


class MetricError(ValueError):
    """Raised when a score is undefined for the given inputs."""


@dataclass
class ContingencyTable:
    counts: np.ndarray  # (U, V) int64
    row_marginals: np.ndarray
    col_marginals: np.ndarray

    @property
    def n(self) -> int:
        return int(self.counts.sum())


def contingency_table(pred: np.ndarray, gt: np.ndarray) -> ContingencyTable:
    """Joint label counts over evaluated pixels.

    Pixels with gt <= 0 (background and overlap) are excluded first;
    predicted clusters that never occur among the remaining pixels are
    simply absent from the table.
    """
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise MetricError(f"label arrays differ in size: {pred.shape} vs {gt.shape}")
    keep = gt > 0
    if not keep.any():
        raise MetricError("score undefined: no evaluated pixels (all background/overlap)")
    pred = pred[keep]
    gt = gt[keep]
    pred_ids, pred_idx = np.unique(pred, return_inverse=True)
    gt_ids, gt_idx = np.unique(gt, return_inverse=True)
    counts = np.zeros((len(pred_ids), len(gt_ids)), dtype=np.int64)
    np.add.at(counts, (pred_idx, gt_idx), 1)
    return ContingencyTable(counts, counts.sum(axis=1), counts.sum(axis=0))


def _entropy(marginals: np.ndarray, n: int) -> float:
    return -math.fsum(
        (c / n) * math.log(c / n) for c in marginals if c > 0
    )


def _mutual_information(table: ContingencyTable) -> float:
    n = table.n
    terms = []
    for i, ai in enumerate(table.row_marginals):
        for j, bj in enumerate(table.col_marginals):
            nij = table.counts[i, j]
            if nij > 0:
                # marginal logs grouped first so the sum is bit-identical
                # under transposition (symmetry of the score)
                terms.append(
                    (nij / n) * (math.log(nij / n) - (math.log(ai / n) + math.log(bj / n)))
                )
    return math.fsum(terms)


def expected_mutual_information(table: ContingencyTable) -> float:
    """E[MI] over random tables with the same marginals (hypergeometric)."""
    n = table.n
    terms = []
    for ai in table.row_marginals:
        ai = int(ai)
        for bj in table.col_marginals:
            bj = int(bj)
            lo = max(1, ai + bj - n)
            hi = min(ai, bj)
            for nij in range(lo, hi + 1):
                # grouped into (ai <-> bj)-commutative pairs so the score
                # is bit-identical under transposition
                log_weight = (
                    (gammaln(ai + 1) + gammaln(bj + 1))
                    + (gammaln(n - ai + 1) + gammaln(n - bj + 1))
                    - (gammaln(n + 1) + gammaln(nij + 1) + gammaln(n - ai - bj + nij + 1))
                    - (gammaln(ai - nij + 1) + gammaln(bj - nij + 1))
                )
                value = (nij / n) * (
                    math.log(nij / n) - (math.log(ai / n) + math.log(bj / n))
                )
                terms.append(value * math.exp(float(log_weight)))
    return math.fsum(terms)


def ami(pred: np.ndarray, gt: np.ndarray) -> float:
    """Adjusted mutual information, normalized by max(H(U), H(V)).

    Returns 0 when the adjusted normalizer is degenerate (<= 1e-12),
    e.g. a single cluster on either side.
    """
    table = contingency_table(pred, gt)
    n = table.n
    mi = _mutual_information(table)
    emi = expected_mutual_information(table)
    h_u = _entropy(table.row_marginals, n)
    h_v = _entropy(table.col_marginals, n)
    denom = max(h_u, h_v) - emi
    if denom <= 1e-12:
        return 0.0
    return (mi - emi) / denom


def labels_from_gamma(gamma: np.ndarray) -> np.ndarray:
    """Hard pixel assignment: argmax over the trailing component axis."""
    return np.argmax(gamma, axis=-1).astype(np.int64)


def _flatten_pair(psi, gamma, x):
    psi = np.asarray(psi, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if psi.ndim == 2:
        psi = psi[None]
        gamma = gamma[None]
        x = x[None]
    return psi, gamma, x


def bce_upper_bound(psi: np.ndarray, gamma: np.ndarray, x_next: np.ndarray, eps: float = 1e-6) -> float:
    """Cross entropy of the per-pixel most-confident prediction.

    Each pixel is scored with psi of the component whose prediction is
    largest there (no responsibility information leaks from the target),
    which upper-bounds the likelihood-based score. Mean over all pixels.
    """
    psi, gamma, x = _flatten_pair(psi, gamma, x_next)
    best = np.max(psi, axis=1)  # (B, D): max_k psi
    p = np.clip(best, eps, 1.0 - eps)
    return float(np.mean(-(x * np.log(p) + (1.0 - x) * np.log(1.0 - p))))


def bce_mixture(psi: np.ndarray, gamma: np.ndarray, x_next: np.ndarray, eps: float = 1e-6) -> float:
    """Cross entropy of the responsibility-weighted mixture likelihood."""
    psi, gamma, x = _flatten_pair(psi, gamma, x_next)
    gamma_kd = np.swapaxes(gamma, -1, -2)  # (B, K, D)
    cond = np.where(x[:, None, :] > 0.5, psi, 1.0 - psi)
    lik = np.sum(gamma_kd * cond, axis=1)
    return float(np.mean(-np.log(np.clip(lik, eps, None))))


def per_step_scores(traces, gt_steps: np.ndarray) -> np.ndarray:
    """AMI per sample and step from batched traces.

    gt_steps: (B, S, D) int labels, aligned with each step's target frame.
    Returns (B, S) float scores.
    """
    gt_steps = np.asarray(gt_steps)
    b, s = gt_steps.shape[:2]
    if len(traces) != s:
        raise MetricError(f"got {len(traces)} traces for {s} gt steps")
    scores = np.zeros((b, s))
    for t, trace in enumerate(traces):
        pred = labels_from_gamma(trace.gamma)  # (B, D)
        for i in range(b):
            scores[i, t] = ami(pred[i], gt_steps[i, t])
    return scores


def summarize_curve(step_scores: np.ndarray):
    """Mean and quartiles per step: list of (step, mean, q25, q75)."""
    step_scores = np.asarray(step_scores)
    out = []
    for t in range(step_scores.shape[1]):
        col = step_scores[:, t]
        out.append((t, float(col.mean()), float(np.percentile(col, 25)), float(np.percentile(col, 75))))
    return out


def per_step_curve(traces, gt_steps: np.ndarray):
    return summarize_curve(per_step_scores(traces, gt_steps))
