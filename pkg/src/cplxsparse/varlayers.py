"""Variational layers and their sparsity-inducing divergence penalties.

Every layer keeps a point-estimate bias and a factorized Gaussian posterior
over its weights.  The additive kinds parameterize each weight by a mean `mu`
and `log_sigma2`, the log of its total noise variance, so alpha =
sigma^2/|mu|^2 is derived.  The rscale kind performs inference on real
multiplicative noise W = mu * eps, eps ~ N(1, alpha), and there log_sigma2
stores log alpha itself (the effective variance alpha |mu|^2 is derived).
The stochastic forward pass uses the local reparameterization trick: the
layer output, not the weight matrix, is sampled, from its exact per-output
Gaussian law.

Penalty kinds, all expressed per weight as a function of
t = log alpha = log_sigma2 - log(|mu|^2 + eps):

  cvd     ein(e^-t), the divergence of a circular complex Gaussian posterior
          against the scale-free prior; exact derivative exp(-e^-t) - 1.
  card    log(1 + e^-t), the empirical-Bayes complex ARD penalty.
  rard    half of card (real ARD).
  rvd     the cubic-sigmoid approximation 0.5 log(1 + e^-t)
          + k1 sigmoid(-(k2 + k3 t)) of the real VD divergence; backward can
          use either the approximation's own gradient or the exact
          -x D(x), x = 1/sqrt(2 alpha), with D the Dawson integral.
  rscale  complex weights with real multiplicative noise; same divergence
          functional as rvd in its alpha.

All penalties are nonnegative, decreasing in t, and vanish as t -> +inf.
"""

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import dist
from .ctensor import CTensor, RTensor

EPS_NUM = 1e-12
INIT_LOG_SIGMA2 = -10.0

# sigmoid-approximation constants for the real VD divergence
K1 = 0.63576
K2 = 1.8732
K3 = 1.48695

PENALTY_KINDS = ("cvd", "card", "rvd", "rard", "rscale")
COMPLEX_KINDS = ("cvd", "card", "rscale")
MODES = ("deterministic", "stochastic", "masked")


@dataclass
class PenaltySpec:
    """Which divergence penalty a layer carries.

    exact_grad selects the Dawson-integral derivative for the rvd/rscale
    kinds instead of differentiating the sigmoid approximation.
    """

    kind: str
    exact_grad: bool = False

    def __post_init__(self):
        if self.kind not in PENALTY_KINDS:
            raise ValueError(f"PenaltySpec: unknown kind {self.kind!r}")
        if self.exact_grad and self.kind not in ("rvd", "rscale"):
            raise ValueError("PenaltySpec: exact_grad applies to rvd/rscale only")

    @property
    def is_complex(self):
        return self.kind in COMPLEX_KINDS


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def kl_cvd(t):
    """Penalty of a circular complex Gaussian weight at log alpha = t."""
    return dist.ein(np.exp(-np.clip(t, -700.0, 700.0)))


def kl_cvd_grad(t):
    return np.exp(-np.exp(-np.clip(t, -700.0, 700.0))) - 1.0


def kl_card(t):
    return np.logaddexp(0.0, -t)


def kl_card_grad(t):
    return -_sigmoid(-t)


def kl_rard(t):
    return 0.5 * np.logaddexp(0.0, -t)


def kl_rard_grad(t):
    return -0.5 * _sigmoid(-t)


def kl_rvd(t):
    return 0.5 * np.logaddexp(0.0, -t) + K1 * _sigmoid(-(K2 + K3 * t))


def kl_rvd_grad(t):
    s = _sigmoid(-(K2 + K3 * t))
    return -0.5 * _sigmoid(-t) - K1 * K3 * s * (1.0 - s)


def kl_rvd_grad_exact(t):
    """d/d log alpha of the exact real VD divergence: -x D(x), x = 1/sqrt(2 alpha)."""
    x = np.exp(-0.5 * np.clip(t, -700.0, 700.0)) / np.sqrt(2.0)
    return -x * dist.dawson(x)


def penalty_fns(spec: PenaltySpec):
    """(value, d/dlog_alpha) pair for a penalty spec."""
    if spec.kind == "cvd":
        return kl_cvd, kl_cvd_grad
    if spec.kind == "card":
        return kl_card, kl_card_grad
    if spec.kind == "rard":
        return kl_rard, kl_rard_grad
    # rvd and rscale share the divergence functional
    grad = kl_rvd_grad_exact if spec.exact_grad else kl_rvd_grad
    return kl_rvd, grad


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class _VarLayer:
    """Shared plumbing: parameters, modes, masks, log alpha, penalty."""

    def __init__(self, spec: PenaltySpec, name: str):
        self.penalty = spec
        self.name = name
        self.mode = "deterministic"
        self.mask = None

    @property
    def is_complex(self):
        return self.penalty.is_complex

    def parameters(self):
        return [self.mu, self.log_sigma2, self.bias]

    def _init_weights(self, shape, fan_in, rng):
        if self.is_complex:
            std = np.sqrt(1.0 / (2.0 * fan_in))
            w = CTensor(rng.normal(0.0, std, shape), rng.normal(0.0, std, shape))
        else:
            std = np.sqrt(1.0 / fan_in)
            w = RTensor(rng.normal(0.0, std, shape))
        self.mu = ag.Parameter(w, name=f"{self.name}.mu")
        self.log_sigma2 = ag.Parameter(RTensor(np.zeros(shape)),
                                       name=f"{self.name}.log_sigma2")
        self.reset_log_sigma2()

    def reset_log_sigma2(self):
        """Reset the noise parameter for a fresh stochastic stage.

        Uses the customary log sigma^2 = -10 initialization for sparse
        variational dropout posteriors: per-weight log alpha then starts
        at -10 - log|mu|^2, so weights the pre-train stage already drove
        toward zero begin closer to the pruning threshold.
        """
        if self.penalty.kind == "rscale":
            self.log_sigma2.value.data[...] = \
                INIT_LOG_SIGMA2 - np.log(self._abs2_mu() + EPS_NUM)
        else:
            self.log_sigma2.value.data[...] = INIT_LOG_SIGMA2

    def _init_bias(self, shape):
        b = CTensor.zeros(shape) if self.is_complex else RTensor.zeros(shape)
        self.bias = ag.Parameter(b, name=f"{self.name}.bias")

    def _abs2_mu(self):
        if self.is_complex:
            v = self.mu.value
            return v.re ** 2 + v.im ** 2
        return self.mu.value.data ** 2

    def log_alpha(self) -> np.ndarray:
        """Per-weight log relevance ratio log(sigma2_eff / |mu|^2) as an array.

        For the additive kinds this is log_sigma2 - log(|mu|^2 + eps); for
        rscale log_sigma2 already is log alpha.
        """
        if self.penalty.kind == "rscale":
            return self.log_sigma2.value.data.copy()
        return self.log_sigma2.value.data - np.log(self._abs2_mu() + EPS_NUM)

    def _log_alpha_var(self):
        if self.penalty.kind == "rscale":
            return self.log_sigma2
        if self.is_complex:
            a2 = ag.cabs2(self.mu)
        else:
            a2 = ag.rmul(self.mu, self.mu)
        return ag.rsub(self.log_sigma2, ag.rlog(ag.radd_const(a2, EPS_NUM)))

    def penalty_var(self):
        """The summed divergence penalty of this layer as a graph node."""
        la = self._log_alpha_var()
        if not np.all(np.isfinite(la.value.data)):
            raise ValueError(f"penalty: non-finite log_alpha in {self.name}")
        fn, dfn = penalty_fns(self.penalty)
        return ag.rsum(ag.elementwise(la, fn, dfn))

    def set_mode(self, mode: str):
        if mode not in MODES:
            raise ValueError(f"set_mode: unknown mode {mode!r}")
        if mode == "masked" and self.mask is None:
            raise ValueError("set_mode: masked mode requires an applied mask")
        self.mode = mode

    def apply_mask(self, mask: np.ndarray):
        """Freeze a retain-mask; pruned means are zeroed immediately and the
        forward pass multiplies by the mask so their gradients vanish too."""
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != self.mu.value.shape:
            raise ValueError(
                f"apply_mask: mask shape {mask.shape} != weights {self.mu.value.shape}")
        self.mask = mask
        if self.is_complex:
            self.mu.value.re *= mask
            self.mu.value.im *= mask
        else:
            self.mu.value.data *= mask

    def clamp_log_sigma2(self, lo=-20.0, hi=5.0):
        np.clip(self.log_sigma2.value.data, lo, hi, out=self.log_sigma2.value.data)

    def _effective_mu(self):
        if self.mask is None:
            return self.mu
        m = ag.const(self.mask.astype(np.float64))
        if self.is_complex:
            return ag.rcmul(m, self.mu)
        return ag.rmul(m, self.mu)

    def _check_forward(self, rng):
        if self.mode == "stochastic":
            if self.mask is not None:
                raise ValueError("stochastic forward with an applied mask is undefined")
            if rng is None:
                raise ValueError("stochastic forward needs an rng")

    def _improper_sample(self, m, v, r, rng):
        """Sample y ~ CN(m, v, r) elementwise through the 2x2 Cholesky factor
        of the paired-real covariance 0.5 [[v + Re r, Im r], [Im r, v - Re r]]."""
        a = ag.rscale(ag.radd(v, ag.creal(r)), 0.5)
        bb = ag.rscale(ag.cimag(r), 0.5)
        c = ag.rscale(ag.rsub(v, ag.creal(r)), 0.5)
        l11 = ag.rsqrt(ag.rmax_const(a, 1e-300))
        l21 = ag.rdiv(bb, ag.rmax_const(l11, 1e-300))
        l22 = ag.rsqrt(ag.rmax_const(ag.rsub(c, ag.rmul(l21, l21)), 1e-300))
        e1 = ag.const(rng.standard_normal(v.shape))
        e2 = ag.const(rng.standard_normal(v.shape))
        noise_re = ag.rmul(l11, e1)
        noise_im = ag.radd(ag.rmul(l21, e1), ag.rmul(l22, e2))
        return ag.cadd(m, ag.ccomplex(noise_re, noise_im))

    def _circular_sample(self, m, v, rng):
        s = ag.rsqrt(ag.rscale(v, 0.5))
        e1 = ag.const(rng.standard_normal(v.shape))
        e2 = ag.const(rng.standard_normal(v.shape))
        return ag.cadd(m, ag.ccomplex(ag.rmul(s, e1), ag.rmul(s, e2)))

    def _real_sample(self, m, v, rng):
        s = ag.rsqrt(v)
        return ag.radd(m, ag.rmul(s, ag.const(rng.standard_normal(v.shape))))


class VarLinear(_VarLayer):
    """Variational dense layer y = W x + b over [B, n_in] inputs.

    Stochastic mode samples each output coordinate from its exact law
    CN(b_i + sum_j mu_ij x_j,  sum_j s2_ij |x_j|^2,  sum_j s2_ij xi_ij x_j^2)
    (real kinds: N(m_i, sum_j s2_ij x_j^2)).  The variance matmul requires at
    least one nonzero input entry per row for a finite backward pass.
    """

    def __init__(self, n_in, n_out, spec: PenaltySpec, rng, name="varlinear"):
        super().__init__(spec, name)
        self.n_in, self.n_out = n_in, n_out
        self._init_weights((n_out, n_in), n_in, rng)
        self._init_bias((n_out,))

    def _mean(self, x, mu):
        if self.is_complex:
            return ag.cadd(ag.cmatmul(mu, x), self.bias)
        return ag.radd(ag.rmatmul(x, ag.rtranspose(mu)), self.bias)

    def forward(self, x, rng=None):
        self._check_forward(rng)
        if self.mode != "stochastic":
            return self._mean(x, self._effective_mu())
        m = self._mean(x, self.mu)
        sigma = ag.rexp(self.log_sigma2)
        if not self.is_complex:
            v = ag.rmatmul(ag.rmul(x, x), ag.rtranspose(sigma))
            return self._real_sample(m, v, rng)
        if self.penalty.kind != "rscale":
            v = ag.rmatmul(ag.cabs2(x), ag.rtranspose(sigma))
            return self._circular_sample(m, v, rng)
        # rscale: sigma holds alpha; effective variance alpha |mu|^2,
        # relation kernel alpha mu^2
        v = ag.rmatmul(ag.cabs2(x), ag.rtranspose(ag.rmul(sigma, ag.cabs2(self.mu))))
        cker = ag.rcmul(sigma, ag.cmul(self.mu, self.mu))
        r = ag.cmatmul(cker, ag.cmul(x, x))
        return self._improper_sample(m, v, r, rng)


class VarConv2d(_VarLayer):
    """Variational valid 2D convolution over [B, c, H, W] inputs."""

    def __init__(self, c_in, c_out, k, spec: PenaltySpec, rng,
                 stride=1, name="varconv"):
        super().__init__(spec, name)
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, k, stride
        self._init_weights((c_out, c_in, k, k), c_in * k * k, rng)
        self._init_bias((c_out,))

    def _bias_term(self):
        if self.is_complex:
            return ag.creshape(self.bias, (self.c_out, 1, 1))
        return ag.rreshape(self.bias, (self.c_out, 1, 1))

    def _mean(self, x, mu):
        if self.is_complex:
            return ag.cadd(ag.cconv2d(mu, x, self.stride), self._bias_term())
        return ag.radd(ag.rconv2d(mu, x, self.stride), self._bias_term())

    def forward(self, x, rng=None):
        self._check_forward(rng)
        if self.mode != "stochastic":
            return self._mean(x, self._effective_mu())
        m = self._mean(x, self.mu)
        sigma = ag.rexp(self.log_sigma2)
        if not self.is_complex:
            v = ag.rconv2d(sigma, ag.rmul(x, x), self.stride)
            return self._real_sample(m, v, rng)
        if self.penalty.kind != "rscale":
            v = ag.rconv2d(sigma, ag.cabs2(x), self.stride)
            return self._circular_sample(m, v, rng)
        v = ag.rconv2d(ag.rmul(sigma, ag.cabs2(self.mu)), ag.cabs2(x), self.stride)
        cker = ag.rcmul(sigma, ag.cmul(self.mu, self.mu))
        r = ag.cconv2d(cker, ag.cmul(x, x), self.stride)
        return self._improper_sample(m, v, r, rng)


# ---------------------------------------------------------------------------
# plumbing layers and the container
# ---------------------------------------------------------------------------

class Relu:
    def forward(self, x, rng=None):
        return ag.crelu(x) if x.is_complex else ag.rrelu(x)


class AvgPool2d:
    def __init__(self, k, stride):
        self.k, self.stride = k, stride

    def forward(self, x, rng=None):
        if x.is_complex:
            return ag.cavg_pool2d(x, self.k, self.stride)
        return ag.ravg_pool2d(x, self.k, self.stride)


class Flatten:
    def forward(self, x, rng=None):
        return ag.cflatten(x) if x.is_complex else ag.rflatten(x)


class Sequential:
    """A feed-forward stack.  Variational layers are renamed layer{i} so
    parameter paths are stable across rebuilds."""

    def __init__(self, layers):
        self.layers = list(layers)
        idx = 0
        for layer in self.layers:
            if isinstance(layer, _VarLayer):
                layer.name = f"layer{idx}"
                for p in layer.parameters():
                    p.name = f"{layer.name}.{p.name.rsplit('.', 1)[-1]}"
                idx += 1

    def forward(self, x, rng=None):
        for layer in self.layers:
            x = layer.forward(x, rng)
        return x

    def var_layers(self):
        return [l for l in self.layers if isinstance(l, _VarLayer)]

    def parameters(self):
        out = []
        for layer in self.var_layers():
            out.extend(layer.parameters())
        return out

    def penalty_var(self):
        total = None
        for layer in self.var_layers():
            p = layer.penalty_var()
            total = p if total is None else ag.radd(total, p)
        return total

    def set_mode(self, mode):
        for layer in self.var_layers():
            layer.set_mode(mode)

    def clamp_log_sigma2(self, lo=-20.0, hi=5.0):
        for layer in self.var_layers():
            layer.clamp_log_sigma2(lo, hi)


def set_mode(model_or_layer, mode: str):
    model_or_layer.set_mode(mode)


def apply_mask(layer: _VarLayer, mask: np.ndarray):
    layer.apply_mask(mask)


def forward_sampled_weights(layer, x, rng):
    """One explicit weight-draw forward (value level, dense layers).

    The independent route for checking the local reparameterization trick:
    draw W ~ q(W), return W x + b as a CTensor/RTensor value.
    """
    from . import ctensor as ct

    if not isinstance(layer, VarLinear):
        raise TypeError("forward_sampled_weights supports dense layers")
    s2 = np.exp(layer.log_sigma2.value.data)
    if not layer.is_complex:
        w = layer.mu.value.data + np.sqrt(s2) * rng.standard_normal(s2.shape)
        return RTensor(x.data @ w.T + layer.bias.value.data)
    mu = layer.mu.value
    if layer.penalty.kind == "rscale":
        eps = 1.0 + np.sqrt(s2) * rng.standard_normal(s2.shape)
        w = CTensor(mu.re * eps, mu.im * eps)
    else:
        half = np.sqrt(s2 / 2.0)
        w = CTensor(mu.re + half * rng.standard_normal(s2.shape),
                    mu.im + half * rng.standard_normal(s2.shape))
    y = ct.cmatmul(w, x)
    return ct.cadd(y, CTensor(layer.bias.value.re, layer.bias.value.im))
