"""Finite-difference verification of every layer op and the assembled
model, shared by the gradcheck subcommand and the test suite.

Every check builds a scalar objective, computes analytic gradients with
the layer's backward pass, then probes the same coordinates with
central differences (h = 1e-6). Pass threshold is a worst-case relative
error of 1e-5 with a unit floor in the denominator.

Known non-smooth points are kept out of the probes: ReLU inputs are
nudged at least 1e-3 away from zero and pooling inputs are built from
distinct values so every window has a unique maximum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import BottomModel, TopModel
from .nn import functional as F
from .nn.gradcheck import finite_difference_grad_at, max_rel_err
from .nn.params import BatchNormState, LayerParams, he_normal
from .presets import config_for

TOLERANCE = 1e-5
H = 1e-6

_CHECK_TAG = 0xC4EC


@dataclass(frozen=True)
class CheckResult:
    name: str
    seed: int
    max_rel_err: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def _rng(seed: int, salt: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed, salt, _CHECK_TAG])))


def _away_from_zero(x: np.ndarray, margin: float = 1e-3) -> np.ndarray:
    """Shift values inside (-margin, margin) out to +-0.5."""
    s = np.where(x >= 0.0, 1.0, -1.0)
    return np.where(np.abs(x) < margin, 0.5 * s, x)


def _distinct_field(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """All-distinct values so pooling maxima are unique; gaps far exceed h."""
    n = int(np.prod(shape))
    return (rng.permutation(n).astype(np.float64) / n).reshape(shape)


def _fd_pair(objective, array: np.ndarray, analytic: np.ndarray) -> float:
    idx = np.arange(array.size)
    numeric = finite_difference_grad_at(objective, array, idx, h=H)
    return max_rel_err(analytic.ravel()[idx], numeric)


def _check_conv2d(seed: int, stride: int, pad: int, kernel: int) -> float:
    rng = _rng(seed, 1 + stride * 16 + kernel)
    cin, cout = 3, 4
    size = 6 if stride == 1 else 8
    x = rng.normal(size=(2, cin, size, size))
    params = LayerParams(
        weights=he_normal(rng, (cout, cin, kernel, kernel), cin * kernel * kernel),
        bias=rng.normal(size=cout))
    out = F.conv2d_forward(x, params, stride=stride, pad=pad)
    proj = rng.normal(size=out.shape)

    def objective() -> float:
        return float(np.sum(F.conv2d_forward(x, params, stride=stride, pad=pad) * proj))

    params.zero_grad()
    grad_x = F.conv2d_backward(proj, x, params, stride=stride, pad=pad)
    worst = _fd_pair(objective, x, grad_x)
    worst = max(worst, _fd_pair(objective, params.weights, params.grad_weights))
    worst = max(worst, _fd_pair(objective, params.bias, params.grad_bias))
    return worst


def _check_conv_transpose2d(seed: int) -> float:
    rng = _rng(seed, 2)
    cin, cout = 4, 3
    x = rng.normal(size=(2, cin, 3, 3))
    params = LayerParams(
        weights=he_normal(rng, (cin, cout, 2, 2), cin),
        bias=rng.normal(size=cout))
    out = F.conv_transpose2d_forward(x, params, stride=2, pad=0)
    proj = rng.normal(size=out.shape)

    def objective() -> float:
        return float(np.sum(F.conv_transpose2d_forward(x, params, stride=2, pad=0) * proj))

    params.zero_grad()
    grad_x = F.conv_transpose2d_backward(proj, x, params, stride=2, pad=0)
    worst = _fd_pair(objective, x, grad_x)
    worst = max(worst, _fd_pair(objective, params.weights, params.grad_weights))
    worst = max(worst, _fd_pair(objective, params.bias, params.grad_bias))
    return worst


def _check_maxpool(seed: int) -> float:
    rng = _rng(seed, 3)
    x = _distinct_field(rng, (2, 3, 6, 6))
    out, indices = F.maxpool2d_forward(x, window=2, stride=2)
    proj = rng.normal(size=out.shape)

    def objective() -> float:
        return float(np.sum(F.maxpool2d_forward(x, window=2, stride=2)[0] * proj))

    grad_x = F.maxpool2d_backward(proj, indices, x.shape, window=2, stride=2)
    return _fd_pair(objective, x, grad_x)


def _check_batchnorm(seed: int, train: bool) -> float:
    rng = _rng(seed, 4 + int(train))
    channels = 3
    x = rng.normal(size=(4, channels, 5, 5))
    params = LayerParams(weights=rng.uniform(0.5, 1.5, size=channels),
                         bias=rng.normal(size=channels))
    state = BatchNormState.create(channels)
    state.running_mean[...] = rng.normal(size=channels)
    state.running_var[...] = rng.uniform(0.5, 2.0, size=channels)
    out = F.batchnorm2d_forward(x, params, state, train=train)
    proj = rng.normal(size=out.shape)

    def objective() -> float:
        return float(np.sum(
            F.batchnorm2d_forward(x, params, state, train=train) * proj))

    params.zero_grad()
    grad_x = F.batchnorm2d_backward(proj, x, params, state, train=train)
    worst = _fd_pair(objective, x, grad_x)
    worst = max(worst, _fd_pair(objective, params.weights, params.grad_weights))
    worst = max(worst, _fd_pair(objective, params.bias, params.grad_bias))
    return worst


def _check_relu(seed: int) -> float:
    rng = _rng(seed, 6)
    x = _away_from_zero(rng.normal(size=(2, 3, 5, 5)))
    proj = rng.normal(size=x.shape)

    def objective() -> float:
        return float(np.sum(F.relu_forward(x) * proj))

    grad_x = F.relu_backward(proj, x)
    return _fd_pair(objective, x, grad_x)


def _check_linear(seed: int) -> float:
    rng = _rng(seed, 7)
    x = rng.normal(size=(3, 7))
    params = LayerParams(weights=rng.normal(size=(4, 7)) * 0.5,
                         bias=rng.normal(size=4))
    out = F.linear_forward(x, params)
    proj = rng.normal(size=out.shape)

    def objective() -> float:
        return float(np.sum(F.linear_forward(x, params) * proj))

    params.zero_grad()
    grad_x = F.linear_backward(proj, x, params)
    worst = _fd_pair(objective, x, grad_x)
    worst = max(worst, _fd_pair(objective, params.weights, params.grad_weights))
    worst = max(worst, _fd_pair(objective, params.bias, params.grad_bias))
    return worst


def _check_bce(seed: int) -> float:
    rng = _rng(seed, 8)
    logits = rng.normal(size=(2, 1, 4, 4))
    targets = (rng.random(size=logits.shape) < 0.5).astype(np.float64)

    def objective() -> float:
        return F.bce_with_logits(logits, targets)[0]

    _, grad = F.bce_with_logits(logits, targets)
    return _fd_pair(objective, logits, grad)


def _nudge_zero_params(models, rng: np.random.Generator) -> None:
    """Move zero-initialized biases to a generic point.

    A fully clipped relu region feeds exact zeros into the next layer,
    whose output there collapses to its bias alone. With biases at 0.0
    those pre-activations sit exactly on the relu kink, where a two-sided
    difference measures half a slope no matter how small h gets. Any
    nonzero bias keeps such positions a fixed distance from the kink.
    """
    for model in models:
        for _, data, _ in model.named_params():
            if data.size and not np.any(data):
                signs = np.where(rng.random(data.shape) < 0.5, -1.0, 1.0)
                data[...] = signs * rng.uniform(0.05, 0.15, size=data.shape)


def _probe(objective, data: np.ndarray, idx: np.ndarray,
           analytic: np.ndarray) -> float:
    """Central-difference error for sampled coordinates, kink-aware.

    A probe interval that happens to cross a relu kink or pooling tie
    reports a half-slope artifact however accurate the analytic gradient
    is. Coordinates failing at h are re-probed at h / 10: the artifact
    collapses once the interval clears the kink, while a genuine gradient
    error is h-independent and keeps failing.
    """
    numeric = finite_difference_grad_at(objective, data, idx, h=H)
    err = max_rel_err(analytic.ravel()[idx], numeric)
    if err > TOLERANCE / 10.0:
        numeric = finite_difference_grad_at(objective, data, idx, h=H / 10.0)
        err = min(err, max_rel_err(analytic.ravel()[idx], numeric))
    return err


def model_gradcheck(seed: int, coords_per_tensor: int = 2,
                    input_coords: int = 8) -> float:
    """Sampled finite-difference check through the whole tiny model.

    The objective is summed (not mean) BCE so gradients stay O(1) and
    the relative comparison has teeth.
    """
    cfg = config_for("tiny")
    bottom = BottomModel(cfg, seed)
    top = TopModel(cfg, seed)
    rng = _rng(seed, 9)
    _nudge_zero_params((bottom, top), rng)
    batch = 2
    x = rng.random((batch, cfg.in_channels, cfg.input_size, cfg.input_size))
    targets = (rng.random((batch, 1, cfg.input_size, cfg.input_size)) < 0.4
               ).astype(np.float64)
    scale = float(targets.size)

    def objective() -> float:
        feats = bottom.forward(x, train=True)
        logits = top.forward(feats, train=True)
        return F.bce_with_logits(logits, targets)[0] * scale

    feats = bottom.forward(x, train=True)
    logits = top.forward(feats, train=True)
    _, grad_logits = F.bce_with_logits(logits, targets)
    bottom.zero_grad()
    top.zero_grad()
    grad_feats = top.backward(grad_logits * scale)
    grad_x = bottom.backward(grad_feats)

    worst = 0.0
    for name, data, grad in bottom.named_params() + top.named_params():
        k = min(coords_per_tensor, data.size)
        idx = rng.choice(data.size, size=k, replace=False)
        worst = max(worst, _probe(objective, data, idx, grad))
    idx = rng.choice(x.size, size=min(input_coords, x.size), replace=False)
    worst = max(worst, _probe(objective, x, idx, grad_x))
    return worst


def run_suite(seeds=(0, 1, 2, 3, 4), include_model: bool = True) -> list[CheckResult]:
    layer_checks = [
        ("conv2d k3 s1 p1", lambda s: _check_conv2d(s, stride=1, pad=1, kernel=3)),
        ("conv2d k2 s2 p0", lambda s: _check_conv2d(s, stride=2, pad=0, kernel=2)),
        ("conv_transpose2d k2 s2", _check_conv_transpose2d),
        ("maxpool2d 2x2", _check_maxpool),
        ("batchnorm2d train", lambda s: _check_batchnorm(s, train=True)),
        ("batchnorm2d eval", lambda s: _check_batchnorm(s, train=False)),
        ("relu", _check_relu),
        ("linear", _check_linear),
        ("bce_with_logits", _check_bce),
    ]
    results = []
    for seed in seeds:
        for name, fn in layer_checks:
            results.append(CheckResult(name, seed, fn(seed)))
        if include_model:
            results.append(CheckResult("full tiny model", seed, model_gradcheck(seed)))
    return results


def format_results(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = []
    for r in results:
        status = "ok" if r.passed else "FAIL"
        lines.append(f"{r.name:<{width}}  seed={r.seed}  "
                     f"max_rel_err={r.max_rel_err:.3e}  {status}")
    worst = max(r.max_rel_err for r in results)
    failed = sum(1 for r in results if not r.passed)
    lines.append(f"{len(results)} checks, {failed} failed, worst {worst:.3e} "
                 f"(tolerance {results[0].tolerance:.0e})")
    return "\n".join(lines)
