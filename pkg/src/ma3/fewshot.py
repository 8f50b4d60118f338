"""Episodic few-shot classification heads over a shared conv embedding.

Two heads on top of class prototypes (mean support embeddings):

* squared-Euclidean nearest prototype (logits = -||e - c_k||^2),
* cosine similarity scaled by a temperature (logits = tau * cos(e, c_k)).

Both produce softmax cross-entropy losses with hand-derived gradients to the
query embeddings AND the prototypes, so the trainer can push gradients back
through the support branch.  Forward passes on distinct parameter sets are
independent; a parameter set is only ever mutated by its owning trainer.
"""

from __future__ import annotations

import numpy as np

from .nn import EmbeddingNet

NORM_FLOOR = 1e-8


def embed(net: EmbeddingNet, img: np.ndarray, train: bool = False) -> np.ndarray:
    """Embed one (H, W) image or an (N, 1, H, W) batch; returns vector(s)."""
    x = np.asarray(img)
    single = x.ndim == 2
    if single:
        x = x[None, None]
    emb, _ = net.forward(x, train=train)
    return emb[0] if single else emb


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Stable softmax CE, mean over rows.  Returns (loss, probs, dlogits)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    probs = exp / total
    m = logits.shape[0]
    log_p_true = shifted[np.arange(m), labels] - np.log(total[:, 0])
    loss = float(-log_p_true.mean())
    dlogits = probs.copy()
    dlogits[np.arange(m), labels] -= 1.0
    dlogits /= m
    return loss, probs, dlogits


def compute_prototypes(embeddings: np.ndarray, labels: np.ndarray, n_way: int) -> np.ndarray:
    """Per-class mean of the support embeddings; every class must appear."""
    embeddings = np.asarray(embeddings)
    labels = np.asarray(labels)
    protos = np.empty((n_way, embeddings.shape[1]), dtype=embeddings.dtype)
    for k in range(n_way):
        mask = labels == k
        if not mask.any():
            raise ValueError(f"class {k} has no support examples")
        protos[k] = embeddings[mask].mean(axis=0)
    return protos


def prototypes_backward(dprotos: np.ndarray, labels: np.ndarray, n_way: int) -> np.ndarray:
    """Route prototype gradients back to the support embeddings (mean rule)."""
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=n_way).astype(dprotos.dtype)
    return dprotos[labels] / counts[labels][:, None]


def protonet_loss(query_emb: np.ndarray, labels: np.ndarray, prototypes: np.ndarray):
    """Squared-Euclidean prototype head.

    Returns (loss, probs, cache); feed the cache to protonet_backward for
    gradients with respect to both query embeddings and prototypes.
    """
    if prototypes.shape[0] == 0:
        raise ValueError("no prototypes")
    diffs = query_emb[:, None, :] - prototypes[None, :, :]  # (m, N, d)
    logits = -np.sum(diffs * diffs, axis=2)
    loss, probs, dlogits = softmax_cross_entropy(logits, labels)
    return loss, probs, (diffs, dlogits)


def protonet_backward(cache):
    diffs, dlogits = cache
    weighted = dlogits[:, :, None] * diffs
    dquery = -2.0 * weighted.sum(axis=1)
    dprotos = 2.0 * weighted.sum(axis=0)
    return dquery, dprotos


def cosine_loss(query_emb: np.ndarray, labels: np.ndarray, prototypes: np.ndarray, tau: float = 1.0):
    """Cosine-similarity prototype head with temperature tau.

    Norms are floored at 1e-8 so zero vectors cannot divide by zero.
    Returns (loss, probs, cache) like protonet_loss.
    """
    if prototypes.shape[0] == 0:
        raise ValueError("no prototypes")
    en = np.maximum(np.linalg.norm(query_emb, axis=1), NORM_FLOOR)
    cn = np.maximum(np.linalg.norm(prototypes, axis=1), NORM_FLOOR)
    e_hat = query_emb / en[:, None]
    c_hat = prototypes / cn[:, None]
    cos = e_hat @ c_hat.T
    loss, probs, dlogits = softmax_cross_entropy(tau * cos, labels)
    return loss, probs, (e_hat, c_hat, en, cn, cos, dlogits, tau)


def cosine_backward(cache):
    e_hat, c_hat, en, cn, cos, dlogits, tau = cache
    dcos = tau * dlogits
    row = (dcos * cos).sum(axis=1, keepdims=True)
    col = (dcos * cos).sum(axis=0)[:, None]
    dquery = (dcos @ c_hat - row * e_hat) / en[:, None]
    dprotos = (dcos.T @ e_hat - col * c_hat) / cn[:, None]
    return dquery, dprotos


def episode_accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of argmax predictions equal to labels; argmax ties resolve to
    the lowest class index."""
    pred = np.argmax(probs, axis=1)
    return float(np.mean(pred == np.asarray(labels)))
