"""Network assembly, forward/backward, and the softmax cross-entropy loss."""

from __future__ import annotations

import numpy as np

from ..errors import NumericalError, ShapeError
from . import layers as L
from .config import NetworkConfig

_BUILD_ORDER = ("w", "b", "gamma", "beta")


def _build_layer(spec, in_shape, rng, dtype, init):
    kind = spec.kind
    p = dict(spec.params)
    if kind == "conv":
        if len(in_shape) != 3:
            raise ShapeError(f"conv needs [C, H, W] input, got {in_shape}")
        return L.Conv2d(
            in_shape[0],
            p["out"],
            p["kernel"],
            stride=p["stride"],
            padding=p["pad"],
            weight_bits=p["wbits"],
            act_bits=p["abits"],
            bias=bool(p["bias"]),
            rng=rng,
            dtype=dtype,
            init=init,
        )
    if kind == "fc":
        return L.Linear(
            int(np.prod(in_shape)),
            p["out"],
            weight_bits=p["wbits"],
            act_bits=p["abits"],
            bias=bool(p["bias"]),
            rng=rng,
            dtype=dtype,
            init=init,
        )
    if kind == "batchnorm":
        return L.BatchNorm(in_shape[0], eps=p["eps"], momentum=p["momentum"], dtype=dtype)
    if kind == "relu":
        return L.ReLU()
    if kind == "binact":
        return L.BinaryAct()
    if kind == "quantact":
        return L.QuantAct(p["bits"])
    if kind == "maxpool":
        return L.MaxPool(p["kernel"], p["stride"], p["pad"])
    if kind == "avgpool":
        return L.AvgPool(p["kernel"], p["stride"], p["pad"])
    if kind == "dropout":
        return L.Dropout(p["p"])
    raise ShapeError(f"unknown layer kind {kind!r}")


class Network:
    """Sequential net instantiated from a NetworkConfig.

    Single-writer during training; an immutable snapshot may serve inference
    from any number of threads.
    """

    def __init__(self, config: NetworkConfig, net_layers, dtype):
        self.config = config
        self.layers = net_layers
        self.dtype = dtype
        self.classes = config.classes

    @classmethod
    def from_config(cls, config: NetworkConfig, seed=0, *, dtype=np.float32, init="kaiming"):
        if isinstance(seed, np.random.Generator):
            rng = seed
        else:
            rng = np.random.default_rng(np.random.SeedSequence(seed))
        shape = tuple(config.input_shape)
        net_layers = []
        for i, spec in enumerate(config.layers):
            try:
                lay = _build_layer(spec, shape, rng, dtype, init)
                lay.index = i
                lay.in_shape = shape
                shape = lay.out_shape(shape)
            except (ShapeError, ValueError) as e:
                raise ShapeError(f"layer {i} ({spec.kind}): {e}") from None
            net_layers.append(lay)
        if shape != (config.classes,):
            raise ShapeError(
                f"network output shape {shape} != (classes,) = ({config.classes},)"
            )
        return cls(config, net_layers, dtype)

    # ------------------------------------------------------------- forward

    def forward(self, x, *, train=False, surrogate=False, bn_batch_stats=False,
                rng=None, debug=False) -> np.ndarray:
        ctx = L.ForwardContext(
            train=train, surrogate=surrogate, bn_batch_stats=bn_batch_stats,
            rng=rng, debug=debug,
        )
        x = np.asarray(x, dtype=self.dtype)
        for lay in self.layers:
            if x.shape[1:] != lay.in_shape and lay.kind != "fc":
                raise ShapeError(
                    f"layer {lay.index} ({lay.kind}): expected input {lay.in_shape}, "
                    f"got {x.shape[1:]}"
                )
            if lay.kind == "fc" and int(np.prod(x.shape[1:])) != int(np.prod(lay.in_shape)):
                raise ShapeError(
                    f"layer {lay.index} (fc): expected {int(np.prod(lay.in_shape))} "
                    f"features, got {x.shape[1:]}"
                )
            x = lay.forward(x, ctx)
            if debug and not np.isfinite(x).all():
                raise NumericalError(f"non-finite activations after layer {lay.index} ({lay.kind})")
        return x

    def predict_proba(self, x, **kw) -> np.ndarray:
        return softmax(self.forward(x, **kw))

    def predict(self, x, **kw) -> np.ndarray:
        return np.argmax(self.forward(x, **kw), axis=1)

    # ------------------------------------------------------------ backward

    def backward(self, dlogits) -> np.ndarray:
        """Accumulate parameter grads; returns the gradient w.r.t. the input."""
        dy = np.asarray(dlogits, dtype=self.dtype)
        self.last_input_grads = [None] * len(self.layers)
        for lay in reversed(self.layers):
            dy = lay.backward(dy)
            self.last_input_grads[lay.index] = dy
        return dy

    # ---------------------------------------------------------- bookkeeping

    def parameters(self):
        out = []
        for lay in self.layers:
            out.extend(lay.params().values())
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def mark_updated(self):
        for lay in self.layers:
            lay.mark_updated()

    def refresh(self):
        for lay in self.layers:
            if getattr(lay, "is_stale", None) and lay.is_stale():
                lay.refresh()

    def clip_binary_shadows(self, lo=-1.0, hi=1.0):
        """Clip shadow weights of sub-32-bit layers into the binarization range."""
        for lay in self.layers:
            if getattr(lay, "weight_bits", 32) < 32:
                np.clip(lay.w.value, lo, hi, out=lay.w.value)

    def binary_layers(self):
        return [l for l in self.layers if getattr(l, "weight_bits", 32) == 1]

    # --------------------------------------------------------------- state

    def state_items(self):
        """Deterministically ordered (name, array) pairs for checkpointing."""
        items = []
        for lay in self.layers:
            named = {}
            named.update({k: p.value for k, p in lay.params().items()})
            named.update(lay.buffers().items())
            for key in sorted(named, key=lambda k: (_BUILD_ORDER.index(k) if k in _BUILD_ORDER else 9, k)):
                items.append((f"layer{lay.index:03d}.{key}", named[key]))
        return items

    def load_state_items(self, items: dict):
        expected = dict(self.state_items())
        if set(items) != set(expected):
            missing = sorted(set(expected) - set(items))
            extra = sorted(set(items) - set(expected))
            raise ShapeError(f"state mismatch; missing={missing} extra={extra}")
        for lay in self.layers:
            for key, p in lay.params().items():
                arr = items[f"layer{lay.index:03d}.{key}"]
                if arr.shape != p.value.shape:
                    raise ShapeError(f"layer {lay.index} {key}: shape {arr.shape} != {p.value.shape}")
                p.value = arr.astype(self.dtype).copy()
            for key in lay.buffers():
                arr = items[f"layer{lay.index:03d}.{key}"]
                if key == "scale":
                    lay.scale = arr.astype(self.dtype).copy()
                else:
                    setattr(lay, key, arr.astype(self.dtype).copy())
        self.mark_updated()
        self.refresh()

    def clone(self) -> "Network":
        dup = Network.from_config(self.config, seed=0, dtype=self.dtype, init="zeros")
        dup.load_state_items(dict(self.state_items()))
        for src, dst in zip(self.layers, dup.layers):
            if getattr(src, "scale_frozen", False):
                dst.scale_frozen = True
                dst.scale = src.scale.copy()
                dst.refresh()
        return dup


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_grad(probs, labels, sample_weights=None):
    """Weighted softmax cross-entropy and its logit gradient.

    Per-example weights are normalized to sum to 1 over the batch, so
    uniform weights reproduce the plain mean loss exactly.
    """
    n = len(labels)
    if sample_weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(sample_weights, dtype=np.float64)
        total = w.sum()
        if total <= 0:
            raise ValueError("sample weights sum to zero")
        w = w / total
    picked = probs[np.arange(n), labels]
    loss = float(-(w * np.log(np.maximum(picked, 1e-300))).sum())
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits *= w[:, None]
    return loss, dlogits


def accuracy(net: Network, images, labels, batch_size=512) -> float:
    hits = 0
    for lo in range(0, len(labels), batch_size):
        pred = net.predict(images[lo : lo + batch_size])
        hits += int((pred == labels[lo : lo + batch_size]).sum())
    return hits / len(labels)
