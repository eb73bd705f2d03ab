"""Anomaly scores from autoencoder residuals, plus the threshold decision.

Two modes:

* simple -- mean squared reconstruction error over every element of the
  clip's K x D feature stack.
* mahalanobis -- per frame, the smaller of the squared Mahalanobis norms of
  the residual under the source- and target-domain residual covariances,
  averaged with the same 1/(D*K) normalisation.  The squared form is used
  throughout, so identity covariances reproduce the simple score exactly.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg

from .autoencoder import AutoencoderModel, forward

MODES = ("simple", "mahalanobis")
MIN_SHIFT = 1e-9


class ScoringError(ValueError):
    pass


@dataclass(frozen=True)
class ResidualCovariancePair:
    source_inv: np.ndarray
    target_inv: np.ndarray
    lam: float
    n_source: int
    n_target: int


@dataclass(frozen=True)
class ScoreRecord:
    name: str
    score: float
    mode: str


@dataclass(frozen=True)
class Threshold:
    value: float
    method: str = "percentile"


def residuals(model: AutoencoderModel, stack: np.ndarray) -> np.ndarray:
    """r(psi) - psi for every row of a K x D stack, in float64."""
    stack = np.asarray(stack)
    if stack.ndim != 2 or stack.shape[0] == 0:
        raise ScoringError("feature stack must be a non-empty K x D matrix")
    return forward(model, stack).astype(np.float64) - stack.astype(np.float64)


def simple_from_residuals(res: np.ndarray) -> float:
    return float(np.sum(res * res) / res.size)


def mahalanobis_from_residuals(res: np.ndarray, covs: ResidualCovariancePair) -> float:
    d_s = np.sum((res @ covs.source_inv) * res, axis=1)
    d_t = np.sum((res @ covs.target_inv) * res, axis=1)
    return float(np.sum(np.minimum(d_s, d_t)) / res.size)


def score_simple(model: AutoencoderModel, stack: np.ndarray) -> float:
    return simple_from_residuals(residuals(model, stack))


def _inverse_covariance(res: np.ndarray, lam: float) -> np.ndarray:
    n, d = res.shape
    centered = res - res.mean(axis=0)
    cov = centered.T @ centered / n
    shift = lam * np.trace(cov) / d
    if lam > 0:
        shift = max(shift, MIN_SHIFT)
    cov[np.diag_indices(d)] += shift
    try:
        factor = linalg.cho_factor(cov, lower=True, check_finite=False)
    except linalg.LinAlgError:
        raise ScoringError(f"residual covariance ({n} rows, dim {d}) is not positive definite "
                           f"with lambda={lam}; use a larger lambda") from None
    inv = linalg.cho_solve(factor, np.eye(d), check_finite=False)
    return 0.5 * (inv + inv.T)


def covariance_from_residuals(source: Sequence[np.ndarray], target: Sequence[np.ndarray],
                              lam: float = 1e-3) -> ResidualCovariancePair:
    if lam < 0:
        raise ScoringError("lambda must be >= 0")
    out = []
    for label, blocks in (("source", source), ("target", target)):
        if not len(blocks):
            raise ScoringError(f"no {label}-domain residuals")
        res = np.concatenate(blocks, axis=0)
        if not np.all(np.isfinite(res)):
            raise ScoringError(f"non-finite {label}-domain residuals")
        out.append((_inverse_covariance(res, lam), res.shape[0]))
    (s_inv, n_s), (t_inv, n_t) = out
    return ResidualCovariancePair(s_inv, t_inv, lam, n_s, n_t)


def fit_residual_covariance(model: AutoencoderModel, source_stacks: Sequence[np.ndarray],
                            target_stacks: Sequence[np.ndarray], lam: float = 1e-3,
                            ) -> ResidualCovariancePair:
    """Regularised inverse covariances of r(psi) - psi for each domain.

    Covariance is mean-centred with divisor N; lam * trace(cov) / D is added
    to the diagonal before a Cholesky-based inversion.
    """
    return covariance_from_residuals([residuals(model, s) for s in source_stacks],
                                     [residuals(model, s) for s in target_stacks], lam)


def mahalanobis(psi: np.ndarray, r: np.ndarray, inv_cov: np.ndarray) -> np.ndarray | float:
    """Squared Mahalanobis norm of r - psi; row-wise for 2-D input."""
    psi, r = np.asarray(psi, dtype=np.float64), np.asarray(r, dtype=np.float64)
    if psi.shape != r.shape or inv_cov.shape != (psi.shape[-1], psi.shape[-1]):
        raise ScoringError(f"shape mismatch: psi {psi.shape}, r {r.shape}, inverse covariance {inv_cov.shape}")
    v = r - psi
    q = np.sum((v @ inv_cov) * v, axis=-1)
    return float(q) if q.ndim == 0 else q


def score_mahalanobis(model: AutoencoderModel, covs: ResidualCovariancePair, stack: np.ndarray) -> float:
    return mahalanobis_from_residuals(residuals(model, stack), covs)


def score_clip(model: AutoencoderModel, stack: np.ndarray, mode: str = "simple",
               covs: ResidualCovariancePair | None = None) -> float:
    if mode == "simple":
        return score_simple(model, stack)
    if mode == "mahalanobis":
        if covs is None:
            raise ScoringError("mahalanobis mode needs fitted covariances")
        return score_mahalanobis(model, covs, stack)
    raise ScoringError(f"unknown mode '{mode}'")


def fit_threshold(scores: Sequence[float], percentile: float = 0.9) -> Threshold:
    """Empirical quantile with linear interpolation between order statistics."""
    if not len(scores):
        raise ScoringError("cannot fit a threshold on zero scores")
    if not 0 <= percentile <= 1:
        raise ScoringError("percentile must lie in [0, 1]")
    value = float(np.quantile(np.asarray(scores, dtype=np.float64), percentile, method="linear"))
    return Threshold(value, f"percentile={percentile}")


def decide(score: float, threshold: Threshold | float) -> str:
    phi = threshold.value if isinstance(threshold, Threshold) else threshold
    if not (np.isfinite(score) and np.isfinite(phi)):
        raise ScoringError("score and threshold must be finite")
    return "Anomaly" if score > phi else "Normal"


# -- files -----------------------------------------------------------------
# Covariance file: "ASDC" | u32 version | u32 D | f64 lambda | u64 n_source | u64 n_target
# followed by the two D x D f64 LE inverse matrices.

_COV_MAGIC = b"ASDC"


def save_covariances(path: str | Path, covs: ResidualCovariancePair) -> None:
    d = covs.source_inv.shape[0]
    head = _COV_MAGIC + struct.pack("<IIdQQ", 1, d, covs.lam, covs.n_source, covs.n_target)
    body = [np.ascontiguousarray(m, dtype="<f8").tobytes() for m in (covs.source_inv, covs.target_inv)]
    Path(path).write_bytes(head + b"".join(body))


def load_covariances(path: str | Path) -> ResidualCovariancePair:
    data = Path(path).read_bytes()
    if data[:4] != _COV_MAGIC:
        raise ScoringError(f"{path}: not a covariance file")
    version, d, lam, n_s, n_t = struct.unpack_from("<IIdQQ", data, 4)
    off = 4 + struct.calcsize("<IIdQQ")
    mats = np.frombuffer(data, "<f8", 2 * d * d, off).reshape(2, d, d).astype(np.float64)
    return ResidualCovariancePair(mats[0], mats[1], lam, n_s, n_t)


def score_csv_name(machine: str, section: str) -> str:
    return f"anomaly_score_{machine}_section_{section}_test.csv"


def decision_csv_name(machine: str, section: str) -> str:
    return f"decision_result_{machine}_section_{section}_test.csv"


def write_score_csv(path: str | Path, records: Sequence[tuple[str, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for name, score in records:
            w.writerow([name, f"{score:.6g}"])


def write_decision_csv(path: str | Path, records: Sequence[tuple[str, float]], threshold: Threshold) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for name, score in records:
            w.writerow([name, int(decide(score, threshold) == "Anomaly")])


def read_score_csv(path: str | Path) -> list[tuple[str, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [(row[0], float(row[1])) for row in csv.reader(fh) if row]
