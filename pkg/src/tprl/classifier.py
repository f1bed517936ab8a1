"""L2-regularised multinomial logistic regression on flattened token sequences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LrModel:
    beta: np.ndarray  # (C, D)
    b: np.ndarray  # (C,)
    lam: float
    classes: np.ndarray

    def to_dict(self) -> dict:
        return {"beta": self.beta.tolist(), "b": self.b.tolist(), "lambda": self.lam,
                "classes": self.classes.tolist()}

    @classmethod
    def from_dict(cls, blob: dict) -> "LrModel":
        return cls(np.array(blob["beta"], dtype=np.float64), np.array(blob["b"], dtype=np.float64),
                   float(blob["lambda"]), np.array(blob["classes"]))


def flatten(z) -> np.ndarray:
    """Row-major concatenation of tokens; works on (s, k) or (N, s, k)."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim < 2:
        return z.ravel()
    return z.reshape(z.shape[:-2] + (-1,))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def objective(beta, b, X, Y, lam) -> float:
    """Negative log-likelihood (summed) plus lam * ||beta||^2."""
    return float(-(Y * _log_softmax(X @ beta.T + b)).sum() + lam * np.sum(beta * beta))


def _grad(beta, b, X, Y, lam):
    p = np.exp(_log_softmax(X @ beta.T + b))
    r = p - Y
    return r.T @ X + 2 * lam * beta, r.sum(axis=0)


def fit(features, labels, lam: float = 1e-2, max_iter: int = 5000, tol: float = 1e-6,
        init_seed: int | None = None, history: list | None = None) -> LrModel:
    """Full-batch gradient descent with Barzilai-Borwein steps and backtracking.

    Every accepted step decreases the objective; stops at gradient norm <= tol.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    labels = np.asarray(labels)
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("need at least two classes to fit")
    if len(X) < len(classes):
        raise ValueError("need at least one sample per class")
    Y = (labels[:, None] == classes[None, :]).astype(np.float64)
    C, D = len(classes), X.shape[1]
    if init_seed is None:
        beta, b = np.zeros((C, D)), np.zeros(C)
    else:
        rng = np.random.default_rng(init_seed)
        beta, b = rng.normal(size=(C, D)) * 0.1, rng.normal(size=C) * 0.1

    f = objective(beta, b, X, Y, lam)
    gb, gbias = _grad(beta, b, X, Y, lam)
    # safe first step from a Lipschitz bound on the loss curvature
    step = 1.0 / (0.5 * (np.sum(X * X) + len(X)) + 2 * lam)
    for _ in range(max_iter):
        gnorm = np.sqrt(np.sum(gb * gb) + np.sum(gbias * gbias))
        if history is not None:
            history.append(f)
        if gnorm <= tol:
            break
        while True:
            nb, nbias = beta - step * gb, b - step * gbias
            nf = objective(nb, nbias, X, Y, lam)
            if nf <= f - 1e-4 * step * gnorm**2 or step < 1e-20:
                break
            step *= 0.5
        if nf > f:
            break
        ngb, ngbias = _grad(nb, nbias, X, Y, lam)
        s_vec = np.concatenate([(nb - beta).ravel(), nbias - b])
        y_vec = np.concatenate([(ngb - gb).ravel(), ngbias - gbias])
        sy = s_vec @ y_vec
        step = (s_vec @ s_vec) / sy if sy > 0 else step * 2
        beta, b, f, gb, gbias = nb, nbias, nf, ngb, ngbias
    return LrModel(beta, b, float(lam), classes)


def predict_proba(model: LrModel, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != model.beta.shape[1]:
        raise ValueError(f"feature length {z.shape[-1]} != model input {model.beta.shape[1]}")
    return np.exp(_log_softmax(z @ model.beta.T + model.b))


def predict(model: LrModel, z):
    """(class-id, probabilities); argmax ties go to the smallest class id."""
    probs = predict_proba(model, z)
    # classes are sorted, so argmax's first-index rule is the smallest-id rule
    return model.classes[np.argmax(probs, axis=-1)], probs
