"""Slow, independent reference computations used as test oracles."""
from fractions import Fraction

import numpy as np

from asd.autoencoder import AutoencoderModel, mse_loss


def pair_auc(normals, anomalies) -> Fraction:
    hits = sum(1 for a in anomalies for n in normals if a - n > 0)
    return Fraction(hits, len(normals) * len(anomalies))


def pair_pauc(normals, anomalies, p) -> Fraction:
    k = int(Fraction(str(p)) * len(normals))  # floor for non-negative values
    hardest = sorted(normals, reverse=True)[:k]
    return pair_auc(hardest, anomalies)


def naive_forward(model: AutoencoderModel, x: np.ndarray) -> np.ndarray:
    rows = []
    for v in np.atleast_2d(x):
        h = [float(t) for t in v]
        for layer in model.layers:
            w, b = layer.weight, layer.bias
            out = []
            for j in range(w.shape[1]):
                acc = float(b[j])
                for i in range(w.shape[0]):
                    acc += h[i] * float(w[i, j])
                out.append(max(acc, 0.0) if layer.activation == "relu" else acc)
            h = out
        rows.append(h)
    return np.array(rows)


def numeric_gradients(model: AutoencoderModel, x: np.ndarray, h: float = 1e-4) -> list[np.ndarray]:
    """Central differences of the reconstruction MSE, computed with the naive forward."""
    grads = []
    for param in model.params():
        g = np.zeros_like(param, dtype=np.float64)
        for idx in np.ndindex(param.shape):
            orig = param[idx]
            param[idx] = orig + h
            up = mse_loss(x, naive_forward(model, x))
            param[idx] = orig - h
            down = mse_loss(x, naive_forward(model, x))
            param[idx] = orig
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def grads_agree(analytic, numeric, rtol=1e-4, atol=1e-7) -> bool:
    for a, n in zip(analytic, numeric):
        err = np.abs(a - n)
        ok = (err <= atol) | (err <= rtol * np.maximum(np.abs(a), np.abs(n)))
        if not ok.all():
            return False
    return True
