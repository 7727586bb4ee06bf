"""Exact t-SNE of generated weights / item embeddings, standardized and exported."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError


@dataclass
class EmbeddingRequest:
    matrix: np.ndarray
    perplexity: float = 30.0
    iterations: int = 1000
    seed: int = 0
    early_exaggeration: float = 12.0
    exaggeration_iterations: int = 250
    learning_rate: float | None = None  # default max(n / 12, 50)

    def validate(self) -> np.ndarray:
        x = np.asarray(self.matrix, dtype=np.float64)
        if x.ndim != 2:
            raise ContractError(f"t-SNE input must be a matrix, got shape {x.shape}")
        n, d = x.shape
        if d < 2:
            raise ContractError(f"t-SNE input needs at least 2 columns, got {d}")
        if not 3 * self.perplexity < n:
            raise ContractError(
                f"{n} points are too few for perplexity {self.perplexity}; "
                f"use a perplexity below {n / 3:.1f}"
            )
        if self.iterations < 250:
            raise ContractError("t-SNE needs at least 250 iterations")
        if not np.all(np.isfinite(x)):
            raise ContractError("t-SNE input contains non-finite values")
        return x


@dataclass
class Embedding2D:
    coordinates: np.ndarray  # (n, 2), standardized
    labels: list
    groups: list | None = None
    metadata: dict = field(default_factory=dict)


def squared_distances(x: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", x, x)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def conditional_affinities(dist: np.ndarray, perplexity: float, tol: float = 1e-10,
                           max_iter: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Row-stochastic P_{j|i} whose entropies equal log(perplexity).

    Bisection on the Gaussian precision of every row at once. Returns the
    matrix and the precisions.
    """
    n = dist.shape[0]
    target = np.log(perplexity)
    off = ~np.eye(n, dtype=bool)
    d = np.where(off, dist, np.inf)
    d = d - d.min(axis=1, keepdims=True)  # shift for stability; cancels on normalization

    beta = np.ones(n)
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    for _ in range(max_iter):
        p = np.exp(-d * beta[:, None])
        s = p.sum(axis=1, keepdims=True)
        p /= s
        with np.errstate(divide="ignore", invalid="ignore"):
            h = -np.sum(np.where(p > 0, p * np.log(p), 0.0), axis=1)
        diff = h - target
        if np.all(np.abs(diff) < tol):
            break
        too_flat = diff > 0  # entropy too high -> sharpen
        lo = np.where(too_flat, beta, lo)
        hi = np.where(too_flat, hi, beta)
        beta = np.where(np.isinf(hi), beta * 2.0, (lo + hi) / 2.0)
    return p, beta


def row_entropies(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.sum(np.where(p > 0, p * np.log(p), 0.0), axis=1)


def joint_affinities(x: np.ndarray, perplexity: float) -> np.ndarray:
    cond, _ = conditional_affinities(squared_distances(x), perplexity)
    n = x.shape[0]
    return (cond + cond.T) / (2.0 * n)


def tsne(x: np.ndarray, perplexity: float = 30.0, iterations: int = 1000, seed: int = 0,
         early_exaggeration: float = 12.0, exaggeration_iterations: int = 250,
         learning_rate: float | None = None) -> tuple[np.ndarray, float]:
    """Exact t-SNE to 2-D. Returns raw coordinates and the final KL divergence."""
    n = x.shape[0]
    P = joint_affinities(x, perplexity)
    P = np.maximum(P, 1e-12)
    lr = learning_rate if learning_rate is not None else max(n / 12.0, 50.0)

    rng = np.random.default_rng(seed)
    y = rng.normal(0.0, 1e-4, size=(n, 2))
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    for it in range(iterations):
        exaggerate = it < exaggeration_iterations
        momentum = 0.5 if exaggerate else 0.8
        Pe = P * early_exaggeration if exaggerate else P

        num = 1.0 / (1.0 + squared_distances(y))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        W = (Pe - Q) * num
        grad = 4.0 * (W.sum(axis=1)[:, None] * y - W @ y)

        same_sign = np.sign(grad) == np.sign(update)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        update = momentum * update - lr * gains * grad
        y = y + update
        y = y - y.mean(axis=0)

    num = 1.0 / (1.0 + squared_distances(y))
    np.fill_diagonal(num, 0.0)
    Q = np.maximum(num / num.sum(), 1e-12)
    kl = float(np.sum(P * np.log(P / Q)))
    return y, kl


def standardize(matrix) -> tuple[np.ndarray, np.ndarray]:
    """Column-wise (x - mean) / std (population std).

    Constant columns become zeros and are flagged in the returned mask.
    """
    x = np.asarray(matrix, dtype=np.float64)
    mu = x.mean(axis=0)
    sigma = x.std(axis=0)
    degenerate = sigma <= 1e-12 * np.maximum(1.0, np.abs(mu))
    safe = np.where(degenerate, 1.0, sigma)
    out = (x - mu) / safe
    out[:, degenerate] = 0.0
    return out, degenerate


def tsne_embed(req: EmbeddingRequest, labels=None, groups=None) -> Embedding2D:
    x = req.validate()
    raw, kl = tsne(x, req.perplexity, req.iterations, req.seed, req.early_exaggeration,
                   req.exaggeration_iterations, req.learning_rate)
    coords, _ = standardize(raw)
    n = x.shape[0]
    meta = {
        "method": "exact t-SNE",
        "perplexity": req.perplexity,
        "iterations": req.iterations,
        "seed": req.seed,
        "early_exaggeration": req.early_exaggeration,
        "exaggeration_iterations": req.exaggeration_iterations,
        "learning_rate": req.learning_rate if req.learning_rate is not None else max(n / 12.0, 50.0),
        "init": "normal(0, 1e-4)",
        "n_points": n,
        "input_dim": x.shape[1],
        "kl_divergence": kl,
        "standardized": True,
    }
    return Embedding2D(coords, list(labels) if labels is not None else list(range(n)),
                       list(groups) if groups is not None else None, meta)


def knn_label_purity(coords: np.ndarray, labels, k: int = 10) -> float:
    """Mean fraction of each point's k nearest neighbours sharing its label."""
    labels = np.asarray(labels)
    d = squared_distances(np.asarray(coords, dtype=np.float64))
    np.fill_diagonal(d, np.inf)
    nn = np.argsort(d, axis=1, kind="stable")[:, :k]
    return float(np.mean(labels[nn] == labels[:, None]))


def silhouette_score(coords: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise ContractError("silhouette needs at least two clusters")
    d = np.sqrt(squared_distances(np.asarray(coords, dtype=np.float64)))
    scores = np.zeros(len(labels))
    for i in range(len(labels)):
        own = labels == labels[i]
        own[i] = False
        if not own.any():
            continue
        a = d[i, own].mean()
        b = min(d[i, labels == other].mean() for other in uniq if other != labels[i])
        scores[i] = (b - a) / max(a, b)
    return float(scores.mean())


def export_embedding(embedding: Embedding2D, path) -> Path:
    """Write ``id,x,y,group`` rows plus a ``<path>.meta.json`` sidecar."""
    path = Path(path)
    groups = embedding.groups or [""] * len(embedding.labels)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "x", "y", "group"])
        for label, (x, y), g in zip(embedding.labels, embedding.coordinates, groups):
            w.writerow([label, repr(float(x)), repr(float(y)), g or ""])
    sidecar = path.with_name(path.name + ".meta.json")
    sidecar.write_text(json.dumps(embedding.metadata, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return sidecar


def read_embedding(path) -> Embedding2D:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    coords = np.array([[float(r["x"]), float(r["y"])] for r in rows]).reshape(-1, 2)
    meta_path = Path(path).with_name(Path(path).name + ".meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return Embedding2D(coords, [r["id"] for r in rows], [r["group"] for r in rows], meta)
