"""Bagging and boosting of weak binary networks.

Members share one NetworkConfig. Bagging and independent-mode members could
train fully in parallel (member RNG streams are isolated by construction);
boosting and warm-restart are sequential by nature. Aggregation is
read-only.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import datio
from .errors import DataError, EnsembleError, NumericalError
from .nn.config import NetworkConfig, config_hash, config_to_text, parse_config
from .nn.network import Network, softmax
from .nn.optim import make_optimizer
from .nn.train import TrainHistory, train_network

ALPHA_CAP = math.log(1e6)  # perfect members get a finite vote


@dataclass
class SampleWeights:
    """Per-example sampling distribution driving bagging/boosting."""

    u: np.ndarray

    @classmethod
    def uniform(cls, m: int) -> "SampleWeights":
        return cls(np.full(m, 1.0 / m))

    def validate(self) -> None:
        if (self.u < 0).any():
            raise ValueError("negative sample weight")
        if abs(self.u.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {self.u.sum()}, not 1")


@dataclass
class MemberTrainSpec:
    """Per-member training budget; 20 epochs is the desk-scale default."""

    epochs: int = 20
    batch_size: int = 64
    optimizer: str = "adam"
    lr: float = 1e-3
    clip_weights: bool = True
    patience: int | None = None


@dataclass
class EnsembleModel:
    members: list
    alphas: np.ndarray
    rule: str  # hard | soft
    strategy: str  # bagging | boosting
    training_mode: str  # independent | warm_restart
    config: NetworkConfig
    seed: int = 0
    member_seeds: list = field(default_factory=list)

    def member_probs(self, images) -> np.ndarray:
        return np.stack([softmax(m.forward(images)) for m in self.members])

    def predict(self, images, rule=None) -> np.ndarray:
        return aggregate(self, images, rule=rule).labels


@dataclass
class AggregateResult:
    member_probs: np.ndarray  # [K, B, C]
    probs: np.ndarray  # [B, C] soft aggregate, rows sum to 1
    labels: np.ndarray  # [B] under the requested rule
    votes: np.ndarray  # [B, C] alpha-weighted argmax votes


def member_seed(seed: int, k: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(k)])


def bagging_sample(dataset_size: int, u: SampleWeights | np.ndarray, rng) -> np.ndarray:
    """Draw dataset_size indices i.i.d. from categorical(u), with replacement."""
    if dataset_size < 1:
        raise ValueError("dataset_size must be >= 1")
    probs = u.u if isinstance(u, SampleWeights) else np.asarray(u, dtype=np.float64)
    total = probs.sum()
    if total <= 0:
        raise ValueError("degenerate sample weights: all zero")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(np.random.SeedSequence(int(rng)))
    return rng.choice(len(probs), size=dataset_size, replace=True, p=probs / total)


def train_member(
    config: NetworkConfig,
    images,
    labels,
    *,
    u: SampleWeights,
    seed_seq,
    spec: MemberTrainSpec,
    eval_images=None,
    eval_labels=None,
    init_from: Network | None = None,
    reweight_gradient: bool = False,
    epoch_callback=None,
) -> tuple[Network, TrainHistory]:
    """Train one weak network under the sampling distribution u.

    Default reweighting is on sampling probabilities: a fresh bootstrap
    multiset of M examples is drawn from u. With ``reweight_gradient`` the
    member instead sees the whole set with u as multiplicative loss weights
    (kept behind a flag; it trains worse).
    """
    init_ss, boot_ss, train_ss = seed_seq.spawn(3)
    if init_from is not None:
        net = init_from.clone()
    else:
        net = Network.from_config(config, seed=np.random.default_rng(init_ss))
    if reweight_gradient:
        train_x, train_y = images, labels
        weights = u.u * len(labels)  # mean weight 1 keeps the loss scale
    else:
        idx = bagging_sample(len(labels), u, np.random.default_rng(boot_ss))
        train_x, train_y = images[idx], labels[idx]
        weights = None
    opt = make_optimizer(spec.optimizer, net.parameters(), spec.lr)
    hist = train_network(
        net,
        train_x,
        train_y,
        epochs=spec.epochs,
        batch_size=spec.batch_size,
        optimizer=opt,
        rng=np.random.default_rng(train_ss),
        sample_weights=weights,
        eval_images=eval_images,
        eval_labels=eval_labels,
        clip_weights=spec.clip_weights,
        patience=spec.patience,
        epoch_callback=epoch_callback,
    )
    return net, hist


def adaboost_round(current_u: SampleWeights, member_predictions, labels, class_count: int):
    """One multiclass-AdaBoost update from a member's training-set predictions.

    Returns (alpha, new_u, err, rejected). err is measured on the full
    training set under the current weights; alpha = ln((1-err)/err) +
    ln(C-1), capped for perfect members. A member is rejected (and the
    weights left untouched) when err >= (C-1)/C, which is exactly
    alpha <= 0: a chance-level member contributes nothing.
    """
    pred = np.asarray(member_predictions)
    if pred.size == 0:
        raise ValueError("empty predictions")
    if pred.ndim == 2:
        pred = pred.argmax(axis=1)
    mis = (pred != np.asarray(labels)).astype(np.float64)
    err = float((current_u.u * mis).sum())
    if err == 0.0:
        alpha = ALPHA_CAP
    elif err >= 1.0:
        alpha = -math.inf
    else:
        alpha = math.log((1.0 - err) / err) + math.log(class_count - 1)
    # boundary inclusive; tolerance absorbs float accumulation in err
    if err >= (class_count - 1) / class_count - 1e-12:
        return alpha, current_u, err, True
    new = current_u.u * np.exp(alpha * mis)
    new = new / new.sum()
    out = SampleWeights(new)
    out.validate()
    return alpha, out, err, False


def _ensemble_epoch_tracker(trained, images, labels, record):
    """Callback factory: test accuracy of completed members + the live one."""

    def cb(epoch, net, hist):
        probs = softmax(net.forward(images))
        for m in trained:
            probs = probs + softmax(m.forward(images))
        acc = float((probs.argmax(axis=1) == labels).mean())
        record.append(acc)

    return cb


def train_bagging(
    config: NetworkConfig,
    images,
    labels,
    *,
    k: int,
    mode: str = "independent",
    seed: int = 0,
    spec: MemberTrainSpec | None = None,
    eval_images=None,
    eval_labels=None,
    track_ensemble_accuracy: bool = False,
) -> tuple[EnsembleModel, dict]:
    """K members on independent bootstrap resamples; alpha_k = 1 for all."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if mode not in ("independent", "warm_restart"):
        raise ValueError(f"mode must be independent or warm_restart, got {mode!r}")
    spec = spec or MemberTrainSpec()
    u = SampleWeights.uniform(len(labels))
    members = []
    histories = []
    ensemble_acc = []
    prev = None
    for ki in range(k):
        cb = None
        if track_ensemble_accuracy and eval_images is not None:
            cb = _ensemble_epoch_tracker(members, eval_images, eval_labels, ensemble_acc)
        kw = dict(
            config=config, images=images, labels=labels, u=u,
            seed_seq=member_seed(seed, ki), spec=spec,
            eval_images=eval_images, eval_labels=eval_labels,
            init_from=prev if mode == "warm_restart" else None,
            epoch_callback=cb,
        )
        try:
            net, hist = train_member(**kw)
        except NumericalError:
            kw["seed_seq"] = np.random.SeedSequence([int(seed), ki, 0xEE7])
            net, hist = train_member(**kw)
        members.append(net)
        histories.append(hist)
        prev = net
    model = EnsembleModel(
        members=members,
        alphas=np.ones(k),
        rule="soft",
        strategy="bagging",
        training_mode=mode,
        config=config,
        seed=seed,
        member_seeds=[[int(seed), ki] for ki in range(k)],
    )
    return model, {"histories": histories, "ensemble_accuracy": ensemble_acc}


def train_boosting(
    config: NetworkConfig,
    images,
    labels,
    *,
    k: int,
    mode: str = "independent",
    seed: int = 0,
    spec: MemberTrainSpec | None = None,
    eval_images=None,
    eval_labels=None,
    reweight_gradient: bool = False,
    track_ensemble_accuracy: bool = False,
) -> tuple[EnsembleModel, dict]:
    """Sequential boosting rounds; rejected members are skipped, weights kept."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if mode not in ("independent", "warm_restart"):
        raise ValueError(f"mode must be independent or warm_restart, got {mode!r}")
    spec = spec or MemberTrainSpec()
    classes = config.classes
    u = SampleWeights.uniform(len(labels))
    members = []
    alphas = []
    seeds_used = []
    histories = []
    rounds = []
    ensemble_acc = []
    prev = None
    for ki in range(k):
        cb = None
        if track_ensemble_accuracy and eval_images is not None:
            cb = _ensemble_epoch_tracker(members, eval_images, eval_labels, ensemble_acc)
        kw = dict(
            config=config, images=images, labels=labels, u=u,
            seed_seq=member_seed(seed, ki), spec=spec,
            eval_images=eval_images, eval_labels=eval_labels,
            init_from=prev if mode == "warm_restart" else None,
            reweight_gradient=reweight_gradient,
            epoch_callback=cb,
        )
        try:
            net, hist = train_member(**kw)
        except NumericalError:
            kw["seed_seq"] = np.random.SeedSequence([int(seed), ki, 0xEE7])
            net, hist = train_member(**kw)
        prev = net
        pred = net.predict(images)
        alpha, u, err, rejected = adaboost_round(u, pred, labels, classes)
        rounds.append({"round": ki, "err": err, "alpha": alpha, "rejected": rejected})
        histories.append(hist)
        if rejected:
            continue
        members.append(net)
        alphas.append(alpha)
        seeds_used.append([int(seed), ki])
    if not members:
        raise EnsembleError(
            f"all {k} boosting members rejected (errors >= chance); rounds: {rounds}"
        )
    model = EnsembleModel(
        members=members,
        alphas=np.asarray(alphas),
        rule="soft",
        strategy="boosting",
        training_mode=mode,
        config=config,
        seed=seed,
        member_seeds=seeds_used,
    )
    return model, {"histories": histories, "rounds": rounds, "ensemble_accuracy": ensemble_acc}


def aggregate(model: EnsembleModel, images, rule=None, weighted=True) -> AggregateResult:
    """Combine member outputs; ties break deterministically to the lowest class.

    soft: probabilities averaged with renormalized alpha weights;
    hard: alpha-weighted votes on member argmax labels. ``weighted=False``
    gives the plain unweighted mean/vote (bagging parity).
    """
    rule = rule or model.rule
    if rule not in ("hard", "soft"):
        raise ValueError(f"rule must be hard or soft, got {rule!r}")
    mp = model.member_probs(images)  # [K, B, C]
    alphas = np.asarray(model.alphas, dtype=np.float64)
    if not weighted:
        alphas = np.ones_like(alphas)
    w = alphas / alphas.sum()
    probs = np.tensordot(w, mp, axes=1)
    probs = probs / probs.sum(axis=1, keepdims=True)
    member_labels = mp.argmax(axis=2)  # [K, B]
    votes = np.zeros(probs.shape)
    for ki in range(mp.shape[0]):
        votes[np.arange(votes.shape[0]), member_labels[ki]] += w[ki]
    labels = votes.argmax(axis=1) if rule == "hard" else probs.argmax(axis=1)
    return AggregateResult(member_probs=mp, probs=probs, labels=labels, votes=votes)


# ----------------------------------------------------------- persistence


def save_ensemble(model: EnsembleModel, out_dir) -> dict:
    """Manifest + member checkpoints stored by content hash."""
    os.makedirs(out_dir, exist_ok=True)
    hashes = []
    for m in model.members:
        blob = datio.checkpoint_bytes(m)
        h = hashlib.sha256(blob).hexdigest()
        hashes.append(h)
        with open(os.path.join(out_dir, f"member-{h[:16]}.ckpt"), "wb") as fh:
            fh.write(blob)
    manifest = {
        "format_version": datio.FORMAT_VERSION,
        "strategy": model.strategy,
        "rule": model.rule,
        "mode": model.training_mode,
        "k": len(model.members),
        "seed": model.seed,
        "member_seeds": model.member_seeds,
        "alphas": [float(a) for a in model.alphas],
        "members": hashes,
        "config_hash": config_hash(model.config),
        "config": config_to_text(model.config),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_ensemble(out_dir) -> EnsembleModel:
    path = os.path.join(out_dir, "manifest.json")
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read ensemble manifest: {e}") from None
    if manifest.get("format_version") != datio.FORMAT_VERSION:
        raise DataError(f"unsupported ensemble format {manifest.get('format_version')}")
    members = []
    for h in manifest["members"]:
        fpath = os.path.join(out_dir, f"member-{h[:16]}.ckpt")
        with open(fpath, "rb") as fh:
            blob = fh.read()
        if hashlib.sha256(blob).hexdigest() != h:
            raise DataError(f"member checkpoint {fpath} fails its content hash")
        members.append(datio.load_checkpoint_bytes(blob))
    cfg = parse_config(manifest["config"])
    return EnsembleModel(
        members=members,
        alphas=np.asarray(manifest["alphas"], dtype=np.float64),
        rule=manifest["rule"],
        strategy=manifest["strategy"],
        training_mode=manifest["mode"],
        config=cfg,
        seed=manifest["seed"],
        member_seeds=manifest["member_seeds"],
    )
