"""Training loop for a single network."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericalError
from .network import Network, accuracy, cross_entropy_grad, softmax


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    test_accuracy: list = field(default_factory=list)


def backward_and_step(net: Network, batch, labels, optimizer, *, sample_weights=None,
                      rng=None, clip_weights=True, debug=False) -> float:
    """One training step: forward, weighted CE, backward, update shadows.

    Updates land on the real-valued shadow weights only; binary layers are
    re-packed lazily on the next forward. Raises NumericalError on a
    non-finite loss.
    """
    logits = net.forward(batch, train=True, rng=rng, debug=debug)
    probs = softmax(logits)
    loss, dlogits = cross_entropy_grad(probs, labels, sample_weights)
    if not np.isfinite(loss):
        bad = int(np.argmin(np.isfinite(logits).all(axis=1)))
        raise NumericalError(
            f"non-finite loss {loss}; first bad batch row {bad}, "
            f"logits range [{np.nanmin(logits)}, {np.nanmax(logits)}]"
        )
    net.zero_grad()
    net.backward(dlogits.astype(net.dtype))
    optimizer.step()
    if clip_weights:
        net.clip_binary_shadows()
    net.mark_updated()
    return loss


def train_network(
    net: Network,
    images,
    labels,
    *,
    epochs,
    batch_size,
    optimizer,
    rng,
    sample_weights=None,
    eval_images=None,
    eval_labels=None,
    clip_weights=True,
    patience=None,
    epoch_callback=None,
) -> TrainHistory:
    """Mini-batch training; per-epoch test accuracy feeds stability tracking.

    ``patience`` (optional) stops early when the epoch train loss has not
    improved by 1e-4 for that many consecutive epochs.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(np.random.SeedSequence(int(rng)))
    n = len(labels)
    history = TrainHistory()
    best = np.inf
    stall = 0
    for epoch in range(epochs):
        perm = rng.permutation(n)
        total = 0.0
        batches = 0
        for lo in range(0, n, batch_size):
            idx = perm[lo : lo + batch_size]
            wb = None if sample_weights is None else sample_weights[idx]
            total += backward_and_step(
                net, images[idx], labels[idx], optimizer,
                sample_weights=wb, rng=rng, clip_weights=clip_weights,
            )
            batches += 1
        epoch_loss = total / max(1, batches)
        history.train_loss.append(epoch_loss)
        if eval_images is not None:
            history.test_accuracy.append(accuracy(net, eval_images, eval_labels))
        if epoch_callback is not None:
            epoch_callback(epoch, net, history)
        if patience is not None:
            if epoch_loss < best - 1e-4:
                best = epoch_loss
                stall = 0
            else:
                stall += 1
                if stall >= patience:
                    break
    return history
