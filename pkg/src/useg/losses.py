"""Probability transforms and distillation loss terms.

All losses reduce by mean over pixels so that the loss weights are
resolution-independent. Probabilities are clamped at ``PROB_EPS`` before
any log. Teacher/target probabilities are always detached; gradient flows
only into the student prediction.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, concat

PROB_EPS = 1e-12


class LossError(Exception):
    pass


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _xlogx(p: np.ndarray) -> np.ndarray:
    # convention 0*log(0) = 0
    out = np.zeros_like(p)
    pos = p > 0.0
    out[pos] = p[pos] * np.log(p[pos])
    return out


def _npix(shape) -> int:
    h, w = shape[-2], shape[-1]
    return h * w


def softmax_channels(logits: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis of a [C,H,W] tensor."""
    if logits.shape[0] < 2:
        raise LossError(f"softmax needs at least 2 channels, got {logits.shape[0]}")
    # constant shift: the gradient of logsumexp is shift-invariant
    shift = logits.data.max(axis=0, keepdims=True)
    e = (logits - Tensor(shift)).exp()
    return e / e.sum(axis=0, keepdims=True)


def kl_divergence(target, pred: Tensor) -> Tensor:
    """Mean-per-pixel KL(target || pred); gradient flows into pred only."""
    t = _as_array(target)
    if t.shape != pred.shape:
        raise LossError(f"KL shape mismatch: {t.shape} vs {pred.shape}")
    npix = _npix(t.shape)
    const = float(_xlogx(t).sum()) / npix
    cross = (Tensor(t) * pred.clamp_min(PROB_EPS).log()).sum() / npix
    return const - cross


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise LossError(f"label out of range for {num_classes} classes")
    out = np.zeros((num_classes,) + labels.shape)
    for c in range(num_classes):
        out[c] = labels == c
    return out


def cross_entropy_hard(labels: np.ndarray, pred: Tensor) -> Tensor:
    """Mean over pixels of -log pred[label]."""
    onehot = one_hot(labels, pred.shape[0])
    npix = _npix(pred.shape)
    return -(Tensor(onehot) * pred.clamp_min(PROB_EPS).log()).sum() / npix


def kd_loss_reference(labels: np.ndarray, p_t, p_s: Tensor, alpha: float) -> Tensor:
    """Same-dimension distillation loss (1-a)*H(q,p_s) + a*KL(p_t,p_s).

    Reference op only: it requires teacher and student to share a channel
    count, which is exactly what the background-label-alignment remaps
    exist to avoid.
    """
    t = _as_array(p_t)
    if t.shape[0] != p_s.shape[0]:
        raise LossError(
            f"kd_loss_reference: channel mismatch {t.shape[0]} vs {p_s.shape[0]}")
    return (1.0 - alpha) * cross_entropy_hard(labels, p_s) + alpha * kl_divergence(t, p_s)


def remap_old(p_s: Tensor, num_old_organs: int) -> Tensor:
    """Fold the new-organ channel into background: [K+2,H,W] -> [K+1,H,W].

    Channels 1..K are copied; channel 0 becomes 1 - sum(channels 1..K),
    i.e. p_s(0) + p_s(K+1).
    """
    k = num_old_organs
    if p_s.shape[0] != k + 2:
        raise LossError(f"remap_old expects {k + 2} channels, got {p_s.shape[0]}")
    organs = p_s.narrow(1, k)
    bg = 1.0 - organs.sum(axis=0, keepdims=True)
    return concat([bg, organs], axis=0)


def remap_new(p_s: Tensor, num_old_organs: int) -> Tensor:
    """Fold background and all old organs together: [K+2,H,W] -> [2,H,W]."""
    k = num_old_organs
    if p_s.shape[0] != k + 2:
        raise LossError(f"remap_new expects {k + 2} channels, got {p_s.shape[0]}")
    bg = p_s.narrow(0, k + 1).sum(axis=0, keepdims=True)
    new = p_s.narrow(k + 1, 1)
    return concat([bg, new], axis=0)


def smooth_labels(hard: np.ndarray, fg: float = 0.7) -> np.ndarray:
    """Binary label map -> [2,H,W] smoothed targets (fg/1-fg)."""
    hard = np.asarray(hard)
    if not np.isin(hard, (0, 1)).all():
        raise LossError("smooth_labels expects a binary label map")
    bg = 1.0 - fg
    out = np.empty((2,) + hard.shape)
    out[0] = np.where(hard == 1, bg, fg)
    out[1] = np.where(hard == 1, fg, bg)
    return out


def loss_old(p_t, p_hat_old: Tensor, u: np.ndarray,
             lambda1: float, lambda2: float) -> Tensor:
    """Uncertainty-weighted old-task loss.

    Mean over pixels of u * [l1 * (-log p_hat_old[argmax p_t])
                             + l2 * KL(p_t || p_hat_old)].
    """
    if lambda1 < 0 or lambda2 < 0:
        raise LossError("loss weights must be nonnegative")
    t = _as_array(p_t)
    if t.shape != p_hat_old.shape:
        raise LossError(f"loss_old shape mismatch: {t.shape} vs {p_hat_old.shape}")
    u = np.asarray(u, dtype=np.float64)
    if u.shape != t.shape[1:]:
        raise LossError(f"weight map shape {u.shape} does not match pixels {t.shape[1:]}")
    if (u < 0).any():
        raise LossError("negative uncertainty weights")

    logp = p_hat_old.clamp_min(PROB_EPS).log()
    hard = one_hot(t.argmax(axis=0), t.shape[0])
    ce_map = -(Tensor(hard) * logp).sum(axis=0)                       # [H,W]
    kl_map = Tensor(_xlogx(t).sum(axis=0)) - (Tensor(t) * logp).sum(axis=0)
    return (Tensor(u) * (lambda1 * ce_map + lambda2 * kl_map)).sum() / u.size


def loss_new(p_hat_new: Tensor, smoothed, order: str = "as-paper") -> Tensor:
    """New-task loss against smoothed labels.

    `as-paper` uses the literal prediction-first order KL(p_hat_new, g);
    `reversed` uses the target-first order KL(g, p_hat_new).
    """
    g = _as_array(smoothed)
    if g.shape != p_hat_new.shape:
        raise LossError(f"loss_new shape mismatch: {g.shape} vs {p_hat_new.shape}")
    if (g <= 0).any():
        raise LossError("smoothed labels must be strictly positive")
    npix = _npix(g.shape)
    if order == "as-paper":
        p = p_hat_new.clamp_min(PROB_EPS)
        inner = p_hat_new * (p.log() - Tensor(np.log(g)))
        return inner.sum() / npix
    if order == "reversed":
        return kl_divergence(g, p_hat_new)
    raise LossError(f"unknown KL order {order!r}")
