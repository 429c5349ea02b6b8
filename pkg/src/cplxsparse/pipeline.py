"""Three-stage training: pre-train, sparsify, fine-tune.

Pre-train and fine-tune optimize the plain classification likelihood with
deterministic forwards; sparsify optimizes mean cross-entropy plus
(C/N) * sum of per-layer KL penalties with stochastic forwards.  At the
end of sparsify, weights are thresholded at plan.tau and the resulting
masks frozen for fine-tuning.  All randomness derives from plan.seed, so
two runs with equal plans and data are bit-identical.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import pruning
from .ctensor import CTensor, RTensor

STAGES = ("pretrain", "sparsify", "finetune")

# rng stream ids: stages use their index in STAGES, init uses its own lane
_INIT_STREAM = 3


@dataclass
class StagePlan:
    stage: str
    epochs: int
    batch_size: int = 128
    base_lr: float = 1e-3
    lr_schedule: tuple = ((10, 0.1),)
    kl_coeff: float = 1e-2
    tau: float = pruning.DEFAULT_TAU
    clip_norm: float = 0.5
    seed: int = 0
    early_stop: tuple | None = None  # (patience, "loss"|"accuracy")

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        marks = [int(e) for e, _ in self.lr_schedule]
        if marks != sorted(set(marks)):
            raise ValueError("lr_schedule epochs must be strictly increasing")
        if self.stage == "sparsify" and not 0.0 < self.kl_coeff <= 1.0:
            raise ValueError(f"kl coefficient must lie in (0,1], got {self.kl_coeff}")
        if self.early_stop is not None:
            patience, metric = self.early_stop
            if patience < 1 or metric not in ("loss", "accuracy"):
                raise ValueError(f"bad early_stop {self.early_stop!r}")

    def lr_at(self, epoch: int) -> float:
        factor = 1.0
        for mark, f in self.lr_schedule:
            if epoch >= mark:
                factor = f
        return self.base_lr * factor


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _grad_stack(g) -> np.ndarray:
    if hasattr(g, "re"):
        return np.stack([g.re, g.im])
    return g.data


def adam_step(params, grads, state: AdamState, lr: float):
    """One ADAM update, componentwise over the (re, im) stacks."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        key = p.name or f"param{i}"
        garr = _grad_stack(g)
        if not np.all(np.isfinite(garr)):
            raise FloatingPointError(
                f"non-finite gradient in parameter '{key}': training aborted")
        m = state.m.get(key)
        if m is None:
            m = np.zeros_like(garr)
            v = np.zeros_like(garr)
        else:
            v = state.v[key]
        m = state.beta1 * m + (1.0 - state.beta1) * garr
        v = state.beta2 * v + (1.0 - state.beta2) * garr * garr
        state.m[key] = m
        state.v[key] = v
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        val = p.value
        if hasattr(val, "re"):
            val.re -= step[0]
            val.im -= step[1]
        else:
            val.data -= step


def clip_global_norm(grads, max_norm: float):
    """Scale all gradients by max_norm/norm when the joint l2 norm over
    every (re, im) component exceeds max_norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = 0.0
    for g in grads:
        if hasattr(g, "re"):
            total += float((g.re * g.re).sum() + (g.im * g.im).sum())
        else:
            total += float((g.data * g.data).sum())
    norm = np.sqrt(total)
    if norm <= max_norm:
        return list(grads)
    s = max_norm / norm
    out = []
    for g in grads:
        if hasattr(g, "re"):
            out.append(CTensor(g.re * s, g.im * s))
        else:
            out.append(RTensor(g.data * s))
    return out


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------

def _model_logits(model, x, rng=None):
    out = model.forward(ag.const(x), rng)
    return ag.creal(out) if out.is_complex else out


def objective_likelihood(model, batch, rng=None):
    x, y = batch
    return ag.softmax_cross_entropy(_model_logits(model, x, rng), y)


def objective_sparsify(model, batch, C: float, N: int, rng=None):
    """Mean cross-entropy on Re(logits) plus (C/N) * sum of KL penalties."""
    if not 0.0 < C <= 1.0:
        raise ValueError(f"kl coefficient must lie in (0,1], got {C}")
    x, y = batch
    ce = ag.softmax_cross_entropy(_model_logits(model, x, rng), y)
    kl = model.penalty_var()
    return ag.radd(ce, ag.rscale(kl, C / float(N)))


# ---------------------------------------------------------------------------
# model state helpers
# ---------------------------------------------------------------------------

def param_state(model) -> dict:
    state = {}
    for p in model.parameters():
        v = p.value
        if hasattr(v, "re"):
            state[p.name] = ("c", v.re.copy(), v.im.copy())
        else:
            state[p.name] = ("r", v.data.copy())
    return state


def load_param_state(model, state: dict):
    for p in model.parameters():
        if p.name not in state:
            raise KeyError(f"state has no entry for parameter '{p.name}'")
        rec = state[p.name]
        v = p.value
        if rec[0] == "c":
            if not hasattr(v, "re") or v.re.shape != rec[1].shape:
                raise ValueError(f"shape/kind mismatch restoring '{p.name}'")
            v.re[...] = rec[1]
            v.im[...] = rec[2]
        else:
            if hasattr(v, "re") or v.data.shape != rec[1].shape:
                raise ValueError(f"shape/kind mismatch restoring '{p.name}'")
            v.data[...] = rec[1]


def reset_variational_state(model):
    """Drop masks and return to deterministic mode (pre-sparsify state)."""
    for layer in model.var_layers():
        layer.mask = None
        layer.mode = "deterministic"


def _take(x, idx):
    if hasattr(x, "re"):
        return CTensor(x.re[idx], x.im[idx])
    return RTensor(x.data[idx])


def _n_rows(x) -> int:
    return x.shape[0]


def evaluate(model, x, y, rng=None):
    """Deterministic-forward loss/accuracy (masked forward when masks are
    applied).  Stochastic mode is temporarily switched off."""
    layers = model.var_layers()
    saved = [l.mode for l in layers]
    for l in layers:
        if l.mode == "stochastic":
            l.mode = "masked" if l.mask is not None else "deterministic"
    try:
        logits = _model_logits(model, x)
        z = logits.value.data
        loss = ag.softmax_cross_entropy(logits, y).value.data
        acc = float(np.mean(np.argmax(z, axis=1) == np.asarray(y)))
        return float(loss), acc
    finally:
        for l, mode in zip(layers, saved):
            l.mode = mode


# ---------------------------------------------------------------------------
# stage runner
# ---------------------------------------------------------------------------

def _compression_snapshot(model, plan) -> float:
    layers = model.var_layers()
    if plan.stage == "finetune" or all(l.mask is not None for l in layers):
        masks = {l.name: l.mask for l in layers}
        n_par = n_zer = n_fixed = 0
        for l in layers:
            width = 2 if l.is_complex else 1
            n_par += width * l.mu.value.size
            n_zer += width * int(np.count_nonzero(~l.mask))
            bias_w = 2 if hasattr(l.bias.value, "re") else 1
            n_par += bias_w * l.bias.value.size
            n_fixed += bias_w * l.bias.value.size
        sm = pruning.SparsityMask(masks=masks, n_par=n_par, n_zer=n_zer,
                                  n_fixed=n_fixed)
    else:
        sm = pruning.compute_masks(model, plan.tau)
    return pruning.compression_rate(sm)


def run_stage(model, data, plan: StagePlan, *, start_epoch: int = 0,
              opt_state: AdamState | None = None, rng=None, on_epoch=None):
    """Train one stage.  Returns (rows, mask) where rows are per-epoch
    metric dicts and mask is the SparsityMask frozen at the sparsify end
    (None for other stages).

    start_epoch/opt_state/rng restore a mid-stage snapshot; on_epoch is
    called as on_epoch(next_epoch, model, opt_state, rng) after each epoch
    so callers can checkpoint.
    """
    (xtr, ytr), (xte, yte) = data
    n_train = _n_rows(xtr)
    if n_train == 0 or _n_rows(xte) == 0:
        raise ValueError("empty dataset")
    if plan.epochs == 0:
        return [], None

    layers = model.var_layers()
    if plan.stage == "finetune":
        missing = [l.name for l in layers if l.mask is None]
        if missing:
            raise ValueError(f"finetune requires masks; missing for {missing}")
        model.set_mode("masked")
    elif plan.stage == "sparsify":
        if start_epoch == 0:
            for l in layers:
                l.reset_log_sigma2()
        model.set_mode("stochastic")
    else:
        model.set_mode("deterministic")

    if rng is None:
        rng = np.random.default_rng([plan.seed, STAGES.index(plan.stage)])
    if opt_state is None:
        opt_state = AdamState()

    params = model.parameters()
    rows = []
    best = None
    misses = 0
    C = plan.kl_coeff
    for epoch in range(start_epoch, plan.epochs):
        lr = plan.lr_at(epoch)
        perm = rng.permutation(n_train)
        loss_sum = 0.0
        hit_sum = 0.0
        for lo in range(0, n_train, plan.batch_size):
            idx = perm[lo:lo + plan.batch_size]
            xb, yb = _take(xtr, idx), np.asarray(ytr)[idx]
            ag.zero_grads(params)
            if plan.stage == "sparsify":
                loss = objective_sparsify(model, (xb, yb), C, n_train, rng)
            else:
                loss = objective_likelihood(model, (xb, yb))
            ag.backward(loss)
            live = [p for p in params if p.grad is not None]
            grads = clip_global_norm([p.grad for p in live], plan.clip_norm)
            adam_step(live, grads, opt_state, lr)
            if plan.stage == "sparsify":
                model.clamp_log_sigma2()
            loss_sum += float(loss.value.data) * len(idx)
        kl_term = 0.0
        if plan.stage == "sparsify":
            kl_term = C / n_train * float(model.penalty_var().value.data)
        comp = _compression_snapshot(model, plan)
        _, tr_acc = evaluate(model, xtr, ytr)
        rows.append(_row(plan, epoch, "train", loss_sum / n_train,
                         tr_acc, kl_term, comp))
        te_loss, te_acc = evaluate(model, xte, yte)
        rows.append(_row(plan, epoch, "test", te_loss, te_acc, kl_term, comp))
        if on_epoch is not None:
            on_epoch(epoch + 1, model, opt_state, rng)
        if plan.early_stop is not None:
            patience, metric = plan.early_stop
            cur = te_loss if metric == "loss" else -te_acc
            if best is None or cur < best:
                best = cur
                misses = 0
            else:
                misses += 1
                if misses >= patience:
                    break

    mask = None
    if plan.stage == "sparsify":
        mask = pruning.compute_masks(model, plan.tau)
        for l in layers:
            l.apply_mask(mask.masks[l.name])
        model.set_mode("masked")
    return rows, mask


def _row(plan, epoch, split, loss, acc, kl_term, comp):
    return {
        "stage": plan.stage, "epoch": epoch, "split": split,
        "loss": loss, "accuracy": acc, "kl_term": kl_term,
        "compression_rate": comp, "tau": plan.tau, "C": plan.kl_coeff,
    }


# ---------------------------------------------------------------------------
# model construction and input shaping
# ---------------------------------------------------------------------------

def build_model(kind: str, arch: str, in_shape, n_classes: int, penalty,
                width: float = 1.0, seed: int = 0, dense_hidden=None,
                exact_grad: bool = False):
    """Assemble the experiment network.

    kind real|complex must agree with the penalty family.  dense expects
    in_shape = flat input size; conv expects (channels, H, W).  width
    scales the hidden layer / channel count.
    """
    from . import varlayers as vl

    if kind not in ("real", "complex"):
        raise ValueError(f"unknown model kind {kind!r}")
    if arch not in ("dense", "conv"):
        raise ValueError(f"unknown arch {arch!r}")
    spec = penalty if isinstance(penalty, vl.PenaltySpec) else \
        vl.PenaltySpec(penalty, exact_grad)
    if spec.is_complex != (kind == "complex"):
        raise ValueError(
            f"penalty kind {spec.kind!r} does not match model kind {kind!r}")
    rng = np.random.default_rng([seed, _INIT_STREAM])
    if arch == "dense":
        n_in = int(in_shape)
        hidden = int(dense_hidden) if dense_hidden else max(1, round(256 * width))
        return vl.Sequential([
            vl.VarLinear(n_in, hidden, spec, rng),
            vl.Relu(),
            vl.VarLinear(hidden, n_classes, spec, rng),
        ])
    c, h, w = in_shape
    ch = max(1, round(8 * width))
    hp, wp = (h - 2) // 2, (w - 2) // 2
    return vl.Sequential([
        vl.VarConv2d(c, ch, 3, spec, rng),
        vl.Relu(),
        vl.AvgPool2d(2, 2),
        vl.Flatten(),
        vl.VarLinear(ch * hp * wp, n_classes, spec, rng),
    ])


def prepare_input(feats, kind: str, arch: str):
    """Shape featurized images [N, H, W] for a model: dense flattens,
    conv adds a channel axis; real models require a zero imaginary part
    (raw features only)."""
    n = feats.shape[0]
    if kind == "real":
        if np.any(feats.im):
            raise ValueError("real models take raw features only "
                             "(imaginary part must be zero)")
        arr = feats.re
        if arch == "dense":
            return RTensor(arr.reshape(n, -1))
        return RTensor(arr[:, None, :, :])
    if arch == "dense":
        return CTensor(feats.re.reshape(n, -1), feats.im.reshape(n, -1))
    return CTensor(feats.re[:, None, :, :], feats.im[:, None, :, :])


# ---------------------------------------------------------------------------
# replication runner
# ---------------------------------------------------------------------------

def run_replications(model_factory, data, plans: dict, c_grid, seeds,
                     on_row=None, on_stage_end=None):
    """Execute the three stages for every (replication seed, C) pair.

    The pre-train stage runs once per replication and its parameters are
    shared across the C grid; sparsify/fine-tune restart from that common
    snapshot.  Returns the full list of metric rows (each carries its
    replication index and C), including one stage='final' trade-off row
    per run.
    """
    for name in STAGES:
        if name not in plans:
            raise ValueError(f"missing plan for stage {name!r}")
    (xtr, ytr), (xte, yte) = data
    all_rows = []

    def emit(rep, c, rows):
        for r in rows:
            r = dict(r)
            r["replication"] = rep
            r["C"] = c
            all_rows.append(r)
            if on_row is not None:
                on_row(r)

    for rep, seed in enumerate(seeds):
        model = model_factory(seed)
        pre_plan = dataclasses.replace(plans["pretrain"], seed=seed)
        pre_rows, _ = run_stage(model, data, pre_plan)
        snapshot = param_state(model)
        for c in c_grid:
            load_param_state(model, snapshot)
            reset_variational_state(model)
            emit(rep, c, pre_rows)
            sp_plan = dataclasses.replace(plans["sparsify"], seed=seed,
                                          kl_coeff=c)
            sp_rows, mask = run_stage(model, data, sp_plan)
            emit(rep, c, sp_rows)
            if on_stage_end is not None:
                on_stage_end(rep, c, "sparsify", model, mask)
            ft_plan = dataclasses.replace(plans["finetune"], seed=seed,
                                          kl_coeff=c, tau=sp_plan.tau)
            ft_rows, _ = run_stage(model, data, ft_plan)
            emit(rep, c, ft_rows)
            if on_stage_end is not None:
                on_stage_end(rep, c, "finetune", model, mask)
            loss, acc = evaluate(model, xte, yte)
            comp = pruning.compression_rate(mask) if mask is not None else 1.0
            last_epoch = ft_rows[-1]["epoch"] if ft_rows else -1
            emit(rep, c, [{
                "stage": "final", "epoch": last_epoch, "split": "test",
                "loss": loss, "accuracy": acc, "kl_term": 0.0,
                "compression_rate": comp, "tau": sp_plan.tau, "C": c,
            }])
    return all_rows
