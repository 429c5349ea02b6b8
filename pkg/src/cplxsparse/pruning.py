"""Relevance thresholding and compression accounting.

A weight position is retained iff its log-alpha does not exceed the
threshold tau (ties retained).  Counting follows the stored-float rule:
a complex value contributes 2, a real value 1; biases are never pruned
but are included in the totals, which bounds the achievable compression.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_TAU = -0.5


@dataclass(frozen=True)
class SparsityMask:
    """Per-layer retain masks plus float-value accounting.

    n_par counts every stored float of the point-estimate model (weight
    means and biases).  n_zer counts floats removed by the masks.
    n_fixed counts floats that are never subject to masking (biases).
    """

    masks: dict = field(default_factory=dict)
    n_par: int = 0
    n_zer: int = 0
    n_fixed: int = 0

    def __post_init__(self):
        if self.n_zer > self.n_par:
            raise ValueError("n_zer exceeds n_par")
        if self.n_fixed > self.n_par:
            raise ValueError("n_fixed exceeds n_par")


def _layer_iter(model):
    if hasattr(model, "var_layers"):
        layers = list(model.var_layers())
    elif hasattr(model, "log_alpha"):
        layers = [model]
    else:
        raise ValueError("model exposes no variational layers")
    if not layers:
        raise ValueError("model has no variational layers")
    return layers


def _float_count(t) -> int:
    # CTensor stores two floats per position, RTensor one.
    width = 2 if hasattr(t, "re") else 1
    return width * t.size


def compute_masks(model, tau: float = DEFAULT_TAU) -> SparsityMask:
    """Threshold every variational layer at log_alpha <= tau."""
    masks = {}
    n_par = 0
    n_zer = 0
    n_fixed = 0
    for layer in _layer_iter(model):
        la = layer.log_alpha()
        keep = la <= tau
        width = 2 if layer.is_complex else 1
        masks[layer.name] = keep
        n_par += _float_count(layer.mu.value)
        n_zer += width * int(np.count_nonzero(~keep))
        bias_floats = _float_count(layer.bias.value)
        n_par += bias_floats
        n_fixed += bias_floats
    return SparsityMask(masks=masks, n_par=n_par, n_zer=n_zer, n_fixed=n_fixed)


def compression_rate(mask: SparsityMask) -> float:
    """n_par / (n_par - n_zer); errors when nothing survives."""
    kept = mask.n_par - mask.n_zer
    if kept <= 0:
        raise ValueError("all parameters pruned: compression rate is infinite")
    return mask.n_par / kept


def compression_limit(mask: SparsityMask) -> float:
    """Best achievable rate: only the never-pruned floats survive."""
    if mask.n_fixed <= 0:
        raise ValueError("no fixed parameters: compression limit is infinite")
    return mask.n_par / mask.n_fixed


def _chi2_quantile(p: float, k: int) -> float:
    # k=2 has a closed form; k=1 is inverted by bisection on the CDF
    # erf(sqrt(x/2)), tight enough at 1e-10 for the log-threshold use.
    if k == 2:
        return -2.0 * math.log1p(-p)
    lo, hi = 0.0, 1.0
    while math.erf(math.sqrt(hi / 2.0)) < p:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if math.erf(math.sqrt(mid / 2.0)) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-10:
            break
    return 0.5 * (lo + hi)


def threshold_for_tolerance(delta: float, prob: float, k: int) -> float:
    """Log-alpha bound below which |w - mu| <= delta*|mu| holds with
    probability at least prob.

    k is the real dimension of the weight noise (1 real, 2 complex);
    k*|w-mu|^2 / (alpha*|mu|^2) is chi-square with k degrees of freedom,
    so the bound is log(k*delta^2 / Q_k(prob)).  The two k values give
    slightly different numbers near -2.5; callers get the exact one.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0,1), got {delta}")
    if not 0.0 < prob < 1.0:
        raise ValueError(f"prob must lie in (0,1), got {prob}")
    if k not in (1, 2):
        raise ValueError(f"k must be 1 or 2, got {k}")
    q = _chi2_quantile(prob, k)
    return math.log(k * delta * delta / q)
