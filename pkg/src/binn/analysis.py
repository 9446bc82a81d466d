"""Statistical investigations of binarized networks.

Covers the input-perturbation robustness metrics (expected squared change
of the output distribution for random networks, squared error-rate change
for trained ones), training-oscillation tracking, numerical evaluation of
the sign-flip variance factor B, and Monte-Carlo verification of the
one-layer and multi-layer output-variation bounds.

Every estimator derives per-chunk RNG streams from (seed, chunk index), so
results do not depend on how work is split across threads. All estimators
report standard errors.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .nn.network import Network, softmax

_CHUNK = 4096


@dataclass(frozen=True)
class PerturbationSpec:
    """Zero-mean Gaussian perturbation of inputs or weights."""

    target: str = "input"  # input | weights
    sigma2: float = 0.01
    trials: int = 100
    seed: int = 0

    def validate(self) -> None:
        if self.target not in ("input", "weights"):
            raise ValueError(f"target must be input or weights, got {self.target!r}")
        # sigma2 == 0 is the exact no-perturbation case
        if self.sigma2 != 0.0 and not 1e-6 <= self.sigma2 <= 10.0:
            raise ValueError(f"sigma2 {self.sigma2} outside [1e-6, 10]")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


@dataclass
class MonteCarloEstimate:
    mean: float
    stderr: float
    trials: int


@dataclass
class StabilityReport:
    accuracies: list
    std: float
    window: int = 20


@dataclass
class RegimeStat:
    measured: float
    stderr: float
    predicted: float

    @property
    def rel_err(self) -> float:
        return abs(self.measured - self.predicted) / self.predicted


@dataclass
class VarianceReport:
    fan_in: int
    sigma_w: float
    sigma: float
    b: float
    r: float
    regimes: dict  # name -> RegimeStat for real/act_bin/weight_bin/both_bin
    bagged: dict  # K -> RegimeStat (both-binarized, bagged)
    bagging_ratio: dict  # K -> measured bagged variance * K / single variance
    thresholds: dict  # {"b_over_r", "inv_sigma_w2", "b_over_r_sigma_w2"}
    threshold_checks: list = field(default_factory=list)
    rel_tol: float = 0.05


def _rng(seed, *tags) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, tags)]))


def _sign(x):
    return np.where(x >= 0, 1.0, -1.0)


def variance_with_se(samples: np.ndarray) -> tuple[float, float]:
    """Sample variance and its standard error from the fourth moment."""
    x = np.asarray(samples, dtype=np.float64)
    n = x.size
    m = x.mean()
    v = x.var(ddof=1)
    m4 = ((x - m) ** 4).mean()
    se2 = (m4 - v * v * (n - 3) / (n - 1)) / n
    return float(v), float(math.sqrt(max(se2, 0.0)))


# ------------------------------------------------------------- B constant


def compute_b(sigma: float) -> float:
    """Variance factor of sign(x + dx) - sign(x) for x ~ N(0,1), dx ~ N(0, sigma^2).

    The difference takes values in {-2, 0, +2}; its variance is
    4 * (Pr(+2) + Pr(-2)) = 8 * Pr(+2) by symmetry. Pr(+2) is evaluated by
    2-D adaptive quadrature of the joint density over a truncated domain
    (|x|, |dx| <= 8 max(1, sigma)); absolute error stays well under 0.005.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    t = 8.0 * max(1.0, sigma)
    inv = 1.0 / (math.sqrt(2 * math.pi))
    inv_s = 1.0 / (math.sqrt(2 * math.pi) * sigma)

    def density(dx, x):
        return inv * math.exp(-0.5 * x * x) * inv_s * math.exp(-0.5 * (dx / sigma) ** 2)

    # the integrand only lives where both |x| and dx are O(sigma); shrinking
    # the domain to 50 sigma discards at most a Phi-bar(50) tail, keeping the
    # adaptive sampler on the sharp inner Gaussian for small sigma
    x_lo = -min(t, 50.0 * sigma)
    dx_hi = lambda x: max(min(t, 50.0 * sigma), -x)
    p2, _ = integrate.dblquad(density, x_lo, 0.0, lambda x: -x, dx_hi)
    return 8.0 * p2


def compute_r(sigma: float) -> float:
    return sigma * sigma


def b_r_table(sigmas) -> list[dict]:
    return [{"sigma": s, "b": compute_b(s), "r": compute_r(s)} for s in sigmas]


def monte_carlo_b(sigma: float, trials: int = 10_000_000, seed: int = 0) -> MonteCarloEstimate:
    """Sampling cross-check of compute_b (gamma^2 has values in {0, 4})."""
    total = 0.0
    total_sq = 0.0
    done = 0
    ci = 0
    while done < trials:
        m = min(_CHUNK * 64, trials - done)
        rng = _rng(seed, 0xB0, ci)
        x = rng.standard_normal(m)
        dx = rng.standard_normal(m) * sigma
        g2 = (_sign(x + dx) - _sign(x)) ** 2
        total += g2.sum()
        total_sq += (g2 * g2).sum()
        done += m
        ci += 1
    mean = total / trials
    var = total_sq / trials - mean * mean
    return MonteCarloEstimate(mean=mean, stderr=math.sqrt(max(var, 0) / trials), trials=trials)


# -------------------------------------------------------- one-layer theorem


def verify_theorem1(
    fan_in: int,
    sigma_w: float,
    sigma: float,
    *,
    k_values=(2, 4, 8, 16),
    trials: int = 100_000,
    seed: int = 0,
    rel_tol: float = 0.05,
) -> VarianceReport:
    """Monte-Carlo one-layer, single-neuron simulation of the four regimes.

    Measures output-change variances for the real, activation-binarized,
    weight-binarized and both-binarized cases plus K-member bagging of the
    both-binarized case (members share x and dx within a trial, weights are
    independent). Compares against the closed forms
    |w| sigma_w^2 sigma^2, B |w| sigma_w^2, |w| sigma^2 and B |w|.
    """
    if fan_in < 1 or sigma_w <= 0 or sigma <= 0:
        raise ValueError("fan_in, sigma_w and sigma must be positive")
    if trials < 10_000:
        widened = max(rel_tol, 3.0 * math.sqrt(2.0 / trials))
        if widened > rel_tol:
            warnings.warn(
                f"{trials} trials is small for rel_tol={rel_tol}; widening to {widened:.3f}"
            )
            rel_tol = widened

    b = compute_b(sigma)
    r = compute_r(sigma)
    names = ("real", "act_bin", "weight_bin", "both_bin")
    collected = {n: [] for n in names}
    bagged_collected = {k: [] for k in k_values}

    done = 0
    ci = 0
    while done < trials:
        m = min(_CHUNK, trials - done)
        rng = _rng(seed, 0x71, ci)
        w = rng.normal(0.0, sigma_w, (m, fan_in))
        x = rng.standard_normal((m, fan_in))
        dx = rng.normal(0.0, sigma, (m, fan_in))
        gamma = _sign(x + dx) - _sign(x)
        collected["real"].append((w * dx).sum(axis=1))
        collected["act_bin"].append((w * gamma).sum(axis=1))
        sw = _sign(w)
        collected["weight_bin"].append((sw * dx).sum(axis=1))
        collected["both_bin"].append((sw * gamma).sum(axis=1))
        for k in k_values:
            wk = rng.normal(0.0, sigma_w, (m, k, fan_in))
            member = (_sign(wk) * gamma[:, None, :]).sum(axis=2)  # [m, k]
            bagged_collected[k].append(member.mean(axis=1))
        done += m
        ci += 1

    predicted = {
        "real": fan_in * sigma_w**2 * sigma**2,
        "act_bin": b * fan_in * sigma_w**2,
        "weight_bin": fan_in * sigma**2,
        "both_bin": b * fan_in,
    }
    regimes = {}
    for n in names:
        v, se = variance_with_se(np.concatenate(collected[n]))
        regimes[n] = RegimeStat(measured=v, stderr=se, predicted=predicted[n])

    bagged = {}
    ratio = {}
    for k in k_values:
        v, se = variance_with_se(np.concatenate(bagged_collected[k]))
        bagged[k] = RegimeStat(measured=v, stderr=se, predicted=predicted["both_bin"] / k)
        ratio[k] = v * k / regimes["both_bin"].measured

    thresholds = {
        "b_over_r": b / r,
        "inv_sigma_w2": 1.0 / sigma_w**2,
        "b_over_r_sigma_w2": b / (r * sigma_w**2),
    }
    checks = []
    for k in k_values:
        predicted_better = k > thresholds["b_over_r_sigma_w2"]
        measured_better = bagged[k].measured < regimes["real"].measured
        checks.append(
            {
                "k": k,
                "predicate": "bagged both-binarized beats real",
                "predicted": predicted_better,
                "measured": measured_better,
                "agree": predicted_better == measured_better,
            }
        )
    return VarianceReport(
        fan_in=fan_in,
        sigma_w=sigma_w,
        sigma=sigma,
        b=b,
        r=r,
        regimes=regimes,
        bagged=bagged,
        bagging_ratio=ratio,
        thresholds=thresholds,
        threshold_checks=checks,
        rel_tol=rel_tol,
    )


# ------------------------------------------------------- multi-layer bounds

THEOREM2_REGIMES = ("real", "act_bin", "weight_bin", "both_bin")


def _stack_forward(ws, x, regime):
    """Batched forward of [chunk] random linear stacks; activation between
    layers is ReLU for real/weight regimes and sign for binarized ones."""
    h = x
    last = len(ws) - 1
    for li, w in enumerate(ws):
        if regime in ("act_bin", "both_bin"):
            h = _sign(h)
        wt = _sign(w) if regime in ("weight_bin", "both_bin") else w
        h = np.matmul(h, wt.transpose(0, 2, 1))
        if li != last and regime in ("real", "weight_bin"):
            h = np.maximum(h, 0.0)
    return h


def theorem2_bound(widths, sigma_w, sigma, b, regime) -> float:
    fans = widths[:-1]
    prod_fan = float(np.prod(fans))
    layers = len(fans)
    if regime == "real":
        return sigma**2 * prod_fan * sigma_w ** (2 * layers)
    if regime == "act_bin":
        return b * prod_fan * sigma_w ** (2 * layers)
    if regime == "weight_bin":
        return sigma**2 * prod_fan
    if regime == "both_bin":
        return b * prod_fan
    raise ValueError(f"unknown regime {regime!r}")


@dataclass
class Theorem2Report:
    widths: tuple
    sigma_w: float
    sigma: float
    b: float
    trials: int
    inner: int
    regimes: dict  # name -> {bound, mean_measured, satisfied_fraction}


def verify_theorem2(
    widths,
    sigma_w: float,
    sigma: float,
    *,
    trials: int = 10_000,
    inner: int = 128,
    seed: int = 0,
) -> Theorem2Report:
    """Check the product bounds on multi-layer output variation.

    A trial draws one random linear stack (widths = [d_in, ..., d_out], no
    batchnorm), estimates its output-change variance from ``inner`` fresh
    (x, dx) pairs, and tests it against the closed-form product bound.
    """
    widths = tuple(int(d) for d in widths)
    if len(widths) < 3:
        raise ValueError("need at least 2 layers (3 widths)")
    b = compute_b(sigma)
    results = {
        reg: {"bound": theorem2_bound(widths, sigma_w, sigma, b, reg), "satisfied": 0, "sum": 0.0}
        for reg in THEOREM2_REGIMES
    }
    done = 0
    ci = 0
    chunk = max(1, _CHUNK // max(1, inner // 8))
    while done < trials:
        m = min(chunk, trials - done)
        rng = _rng(seed, 0x72, ci)
        ws = [
            rng.normal(0.0, sigma_w, (m, widths[li + 1], widths[li]))
            for li in range(len(widths) - 1)
        ]
        x = rng.standard_normal((m, inner, widths[0]))
        dx = rng.normal(0.0, sigma, (m, inner, widths[0]))
        for reg in THEOREM2_REGIMES:
            d = _stack_forward(ws, x + dx, reg) - _stack_forward(ws, x, reg)
            v_hat = (d * d).mean(axis=(1, 2))  # per-network output-change variance
            res = results[reg]
            res["satisfied"] += int((v_hat <= res["bound"]).sum())
            res["sum"] += float(v_hat.sum())
        done += m
        ci += 1
    regimes = {}
    for reg, res in results.items():
        frac = res["satisfied"] / trials
        regimes[reg] = {
            "bound": res["bound"],
            "mean_measured": res["sum"] / trials,
            "satisfied_fraction": frac,
            "satisfied_se": math.sqrt(max(frac * (1 - frac), 0.0) / trials),
        }
    return Theorem2Report(
        widths=widths, sigma_w=sigma_w, sigma=sigma, b=b,
        trials=trials, inner=inner, regimes=regimes,
    )


# --------------------------------------------------------------- robustness


def _model_probs(nets, images, output="softmax", bn_batch_stats=True):
    outs = [net.forward(images, bn_batch_stats=bn_batch_stats) for net in nets]
    if output == "logits":
        stacked = np.stack([o.astype(np.float64) for o in outs])
        return stacked.mean(axis=0)
    return np.stack([softmax(o) for o in outs]).mean(axis=0)


def robustness_random(
    netcfg,
    spec: PerturbationSpec,
    weight_samples: int,
    inputs,
    *,
    output: str = "softmax",
    ensemble_k: int = 1,
) -> MonteCarloEstimate:
    """Expected squared output-distribution change under input noise,
    averaged over random-normal weight draws (the random-network protocol).

    Inputs are expected normalized to [-1, 1]. Batchnorm layers run on
    batch statistics. ``ensemble_k > 1`` averages the distributions of k
    independently drawn-and-binarized networks before measuring the change.
    The standard error is computed across weight-sample means.
    """
    spec.validate()
    if weight_samples < 1:
        raise ValueError("weight_samples must be >= 1")
    sigma = math.sqrt(spec.sigma2)
    per_sample = []
    for s in range(weight_samples):
        nets = [
            Network.from_config(netcfg, seed=_rng(spec.seed, 0xE1, s, k), init="normal")
            for k in range(ensemble_k)
        ]
        noise_rng = _rng(spec.seed, 0xE2, s)
        if spec.target == "input":
            p0 = _model_probs(nets, inputs, output)
            diffs = []
            for _ in range(spec.trials):
                # one noise draw per trial, shared across the batch: same
                # expectation, and the aggregate is exactly batch-order invariant
                dx = noise_rng.normal(0.0, sigma, inputs.shape[1:]).astype(np.float32)
                p1 = _model_probs(nets, inputs + dx[None], output)
                diffs.append(((p1 - p0) ** 2).sum(axis=1).mean())
            per_sample.append(float(np.mean(diffs)))
        else:
            p0 = _model_probs(nets, inputs, output)
            diffs = []
            for _ in range(spec.trials):
                perturbed = [_with_weight_noise(n, noise_rng, sigma) for n in nets]
                p1 = _model_probs(perturbed, inputs, output)
                diffs.append(((p1 - p0) ** 2).sum(axis=1).mean())
            per_sample.append(float(np.mean(diffs)))
    mean = float(np.mean(per_sample))
    se = float(np.std(per_sample, ddof=1) / math.sqrt(len(per_sample))) if len(per_sample) > 1 else 0.0
    return MonteCarloEstimate(mean=mean, stderr=se, trials=weight_samples * spec.trials)


def _with_weight_noise(net: Network, rng, sigma) -> Network:
    noisy = net.clone()
    for lay in noisy.layers:
        if hasattr(lay, "w"):
            lay.w.value = lay.w.value + rng.normal(0.0, sigma, lay.w.value.shape).astype(
                lay.w.value.dtype
            )
            lay.mark_updated()
    noisy.refresh()
    return noisy


def _error_rate(model, images, labels) -> float:
    return float((model.predict(images) != np.asarray(labels)).mean())


def _trained_probs(model, images) -> np.ndarray:
    if hasattr(model, "members"):
        return np.stack([softmax(m.forward(images)) for m in model.members]).mean(axis=0)
    return softmax(model.forward(images))


def output_change_trained(model, images, spec: PerturbationSpec) -> MonteCarloEstimate:
    """Squared output-distribution change of a trained model under noise
    (the random-network metric evaluated at fixed trained weights)."""
    spec.validate()
    if len(images) == 0:
        raise ValueError("empty dataset")
    sigma = math.sqrt(spec.sigma2)
    rng = _rng(spec.seed, 0xE4)
    p0 = _trained_probs(model, images)
    diffs = np.zeros(spec.trials)
    for t in range(spec.trials):
        if spec.target == "input":
            dx = rng.normal(0.0, sigma, images.shape[1:]).astype(np.float32)
            p1 = _trained_probs(model, images + dx[None])
        else:
            members = model.members if hasattr(model, "members") else [model]
            noisy = [_with_weight_noise(m, rng, sigma) for m in members]
            if hasattr(model, "members"):
                import copy

                clone = copy.copy(model)
                clone.members = noisy
                p1 = _trained_probs(clone, images)
            else:
                p1 = _trained_probs(noisy[0], images)
        diffs[t] = ((p1 - p0) ** 2).sum(axis=1).mean()
    se = float(diffs.std(ddof=1) / math.sqrt(spec.trials)) if spec.trials > 1 else 0.0
    return MonteCarloEstimate(mean=float(diffs.mean()), stderr=se, trials=spec.trials)


def robustness_trained(model, images, labels, spec: PerturbationSpec) -> MonteCarloEstimate:
    """Expected squared change of the classification error rate under noise.

    ``model`` is a trained Network or EnsembleModel. The error rate is the
    0/1 error over the evaluation batch; the squared clean-vs-perturbed
    difference is averaged over noise draws.
    """
    spec.validate()
    if len(labels) == 0:
        raise ValueError("empty dataset")
    sigma = math.sqrt(spec.sigma2)
    err0 = _error_rate(model, images, labels)
    diffs = np.zeros(spec.trials)
    rng = _rng(spec.seed, 0xE3)
    for t in range(spec.trials):
        if spec.target == "input":
            dx = rng.normal(0.0, sigma, images.shape).astype(np.float32)
            err_t = _error_rate(model, images + dx, labels)
        else:
            members = model.members if hasattr(model, "members") else [model]
            noisy = [_with_weight_noise(m, rng, sigma) for m in members]
            if hasattr(model, "members"):
                import copy

                clone = copy.copy(model)
                clone.members = noisy
                err_t = _error_rate(clone, images, labels)
            else:
                err_t = _error_rate(noisy[0], images, labels)
        diffs[t] = (err_t - err0) ** 2
    se = float(diffs.std(ddof=1) / math.sqrt(spec.trials)) if spec.trials > 1 else 0.0
    return MonteCarloEstimate(mean=float(diffs.mean()), stderr=se, trials=spec.trials)


# ---------------------------------------------------------------- stability


def stability_track(accuracies, window: int = 20) -> StabilityReport:
    """Sample standard deviation of the last ``window`` recorded accuracies."""
    acc = list(accuracies)
    if len(acc) < window:
        raise ValueError(f"need at least {window} recorded points, got {len(acc)}")
    tail = np.asarray(acc[-window:], dtype=np.float64)
    std = 0.0 if np.all(tail == tail[0]) else float(tail.std(ddof=1))
    return StabilityReport(accuracies=tail.tolist(), std=std, window=window)
