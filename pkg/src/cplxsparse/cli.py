"""Experiment runner and verification harness.

Subcommands: train (three-stage runs over a replication/C grid with CSV
metrics and binary checkpoints), verify-kl (Monte-Carlo sweep of the KL
penalties and their derivatives), verify-lrt (output-distribution check
of the local reparameterization sampler), gradcheck (finite-difference
sweep over every layer/penalty combination), report (compression vs
accuracy aggregation).  Verification commands exit 0 only when every
tolerance holds.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import struct
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import data as dsets
from . import dist
from . import pipeline as pl
from . import pruning
from . import varlayers as vl
from .ctensor import CTensor, RTensor
from . import ctensor as ct

CSV_COLUMNS = ("replication", "stage", "epoch", "split", "loss", "accuracy",
               "kl_term", "compression_rate", "tau", "C")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration: flat dotted-key text files, strictly parsed
# ---------------------------------------------------------------------------

def _enum(*choices):
    def parse(s):
        if s not in choices:
            raise ConfigError(f"expected one of {choices}, got {s!r}")
        return s
    return parse


def _bool(s):
    if s.lower() in ("true", "yes", "1"):
        return True
    if s.lower() in ("false", "no", "0"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _floats(s):
    return tuple(float(tok) for tok in s.split(",") if tok.strip())


def _ints(s):
    return tuple(int(tok) for tok in s.split(",") if tok.strip())


_SCHEMA = {
    "dataset.kind": (_enum("idx", "synthetic"), "idx"),
    "dataset.path": (str, ""),
    "dataset.subset_n": (int, 0),
    "dataset.seed": (int, 0),
    "dataset.features": (_enum("raw", "fft"), "raw"),
    "dataset.synthetic_per_class": (int, 50),
    "dataset.synthetic_classes": (int, 2),
    "dataset.synthetic_dim": (int, 8),
    "model.kind": (_enum("real", "complex"), "complex"),
    "model.arch": (_enum("dense", "conv"), "dense"),
    "model.width": (float, 1.0),
    "penalty.kind": (_enum(*vl.PENALTY_KINDS), "cvd"),
    "penalty.exact_grad": (_bool, False),
    "stages.pretrain.epochs": (int, 10),
    "stages.pretrain.batch_size": (int, 128),
    "stages.pretrain.base_lr": (float, 1e-3),
    "stages.sparsify.epochs": (int, 20),
    "stages.sparsify.batch_size": (int, 128),
    "stages.sparsify.base_lr": (float, 1e-3),
    "stages.finetune.epochs": (int, 10),
    "stages.finetune.batch_size": (int, 128),
    "stages.finetune.base_lr": (float, 1e-3),
    "stages.finetune.patience": (int, 0),
    "stages.finetune.early_metric": (_enum("loss", "accuracy"), "loss"),
    "stages.lr_drop_epoch": (int, 10),
    "stages.lr_drop_factor": (float, 0.1),
    "train.c_grid": (_floats, (1e-2,)),
    "train.tau": (float, pruning.DEFAULT_TAU),
    "train.clip_norm": (float, 0.5),
    "train.replications": (_ints, (0, 1, 2, 3, 4)),
    "output.dir": (str, "out"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def hash(self) -> str:
        return config_hash(self.values)


def config_hash(values: dict) -> str:
    """Digest of every semantic field (the output directory is not one)."""
    sem = {k: v for k, v in sorted(values.items()) if k != "output.dir"}
    blob = json.dumps(sem, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def parse_config_text(text: str) -> dict:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value.strip()
    return raw


def make_config(raw: dict) -> ExperimentConfig:
    unknown = [k for k in raw if k not in _SCHEMA]
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    values = {}
    for key, (parse, default) in _SCHEMA.items():
        if key in raw:
            try:
                values[key] = parse(raw[key])
            except ConfigError as e:
                raise ConfigError(f"{key}: {e}") from None
            except ValueError as e:
                raise ConfigError(f"{key}: {e}") from None
        else:
            values[key] = default
    if values["model.width"] not in (0.5, 1.0, 2.0):
        raise ConfigError(f"model.width must be 0.5, 1 or 2, "
                          f"got {values['model.width']}")
    for c in values["train.c_grid"]:
        if not 0.0 < c <= 1.0:
            raise ConfigError(f"train.c_grid entries must lie in (0,1], got {c}")
    if values["dataset.kind"] == "idx" and not values["dataset.path"]:
        raise ConfigError("dataset.path is required for dataset.kind = idx")
    return ExperimentConfig(values)


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    with open(path) as f:
        raw = parse_config_text(f.read())
    if overrides:
        raw.update({k: str(v) for k, v in overrides.items()})
    return make_config(raw)


def _plans_from_config(cfg: ExperimentConfig, scale: float = 1.0) -> dict:
    if scale <= 0:
        raise ConfigError("scale must be positive")
    sched = ((cfg["stages.lr_drop_epoch"], cfg["stages.lr_drop_factor"]),)
    plans = {}
    for stage in pl.STAGES:
        epochs = cfg[f"stages.{stage}.epochs"]
        if scale != 1.0 and epochs > 0:
            epochs = max(1, round(epochs / scale))
        early = None
        if stage == "finetune" and cfg["stages.finetune.patience"] > 0:
            early = (cfg["stages.finetune.patience"],
                     cfg["stages.finetune.early_metric"])
        plans[stage] = pl.StagePlan(
            stage=stage, epochs=epochs,
            batch_size=cfg[f"stages.{stage}.batch_size"],
            base_lr=cfg[f"stages.{stage}.base_lr"], lr_schedule=sched,
            kl_coeff=cfg["train.c_grid"][0], tau=cfg["train.tau"],
            clip_norm=cfg["train.clip_norm"], early_stop=early)
    return plans


# ---------------------------------------------------------------------------
# checkpoints: versioned binary container, bit-exact round trip
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"CKPT"
_CKPT_VERSION = 1
_KIND_TAG = {"r": 0, "c": 1, "m": 2}
_TAG_KIND = {v: k for k, v in _KIND_TAG.items()}


@dataclass
class Checkpoint:
    config_hash: str
    stage: str
    epoch: int
    adam_t: int | None
    rng_state: dict | None
    records: dict  # name -> ("r", arr) | ("c", re, im) | ("m", bool arr)

    def params(self) -> dict:
        return {k: v for k, v in self.records.items()
                if not k.startswith(("mask.", "adam."))}

    def masks(self) -> dict:
        return {k[len("mask."):]: v[1] for k, v in self.records.items()
                if k.startswith("mask.")}

    def adam_state(self) -> pl.AdamState | None:
        if self.adam_t is None:
            return None
        state = pl.AdamState(t=self.adam_t)
        for k, rec in self.records.items():
            if k.startswith("adam.m."):
                state.m[k[len("adam.m."):]] = rec[1].copy()
            elif k.startswith("adam.v."):
                state.v[k[len("adam.v."):]] = rec[1].copy()
        return state

    def rng(self):
        if self.rng_state is None:
            return None
        gen = np.random.default_rng()
        gen.bit_generator.state = self.rng_state
        return gen


def make_checkpoint(model, config_hash: str, stage: str, epoch: int,
                    opt_state: pl.AdamState | None = None,
                    rng=None) -> Checkpoint:
    records = dict(pl.param_state(model))
    for layer in model.var_layers():
        if layer.mask is not None:
            records[f"mask.{layer.name}"] = ("m", layer.mask.copy())
    adam_t = None
    if opt_state is not None:
        adam_t = opt_state.t
        for k, arr in opt_state.m.items():
            records[f"adam.m.{k}"] = ("r", np.asarray(arr, dtype=np.float64))
        for k, arr in opt_state.v.items():
            records[f"adam.v.{k}"] = ("r", np.asarray(arr, dtype=np.float64))
    rng_state = None if rng is None else rng.bit_generator.state
    return Checkpoint(config_hash, stage, epoch, adam_t, rng_state, records)


def _write_arr(f, arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    f.write(struct.pack("<B", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.astype("<f8").tobytes())


def save_checkpoint(path, ck: Checkpoint):
    meta = {"stage": ck.stage, "epoch": ck.epoch, "adam_t": ck.adam_t}
    meta_b = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    rng_b = b"" if ck.rng_state is None else json.dumps(
        ck.rng_state, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", _CKPT_VERSION))
        f.write(ck.config_hash.encode())  # 64 hex chars
        f.write(struct.pack("<I", len(meta_b)))
        f.write(meta_b)
        f.write(struct.pack("<I", len(rng_b)))
        f.write(rng_b)
        f.write(struct.pack("<I", len(ck.records)))
        for name, rec in ck.records.items():
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", _KIND_TAG[rec[0]]))
            if rec[0] == "r":
                _write_arr(f, rec[1])
            elif rec[0] == "c":
                _write_arr(f, rec[1])
                _write_arr(f, rec[2])
            else:
                mask = np.asarray(rec[1], dtype=bool)
                f.write(struct.pack("<B", mask.ndim))
                f.write(struct.pack(f"<{mask.ndim}I", *mask.shape))
                f.write(np.packbits(mask.reshape(-1)).tobytes())


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise ValueError("checkpoint truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_arr(r: _Reader):
    (ndim,) = r.unpack("<B")
    shape = r.unpack(f"<{ndim}I")
    n = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).copy()
    return arr


def load_checkpoint(path, expect_hash: str | None = None) -> Checkpoint:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    chash = r.take(64).decode()
    if expect_hash is not None and chash != expect_hash:
        raise ValueError(f"{path}: config hash mismatch "
                         f"(checkpoint {chash[:12]}.., config {expect_hash[:12]}..)")
    (meta_len,) = r.unpack("<I")
    meta = json.loads(r.take(meta_len).decode())
    (rng_len,) = r.unpack("<I")
    rng_state = json.loads(r.take(rng_len).decode()) if rng_len else None
    (n_rec,) = r.unpack("<I")
    records = {}
    for _ in range(n_rec):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (tag,) = r.unpack("<B")
        kind = _TAG_KIND[tag]
        if kind == "r":
            records[name] = ("r", _read_arr(r))
        elif kind == "c":
            re = _read_arr(r)
            im = _read_arr(r)
            records[name] = ("c", re, im)
        else:
            (ndim,) = r.unpack("<B")
            shape = r.unpack(f"<{ndim}I")
            n = int(np.prod(shape)) if ndim else 1
            packed = np.frombuffer(r.take((n + 7) // 8), dtype=np.uint8)
            bits = np.unpackbits(packed, count=n).astype(bool).reshape(shape)
            records[name] = ("m", bits)
    if r.pos != len(r.buf):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return Checkpoint(chash, meta["stage"], meta["epoch"], meta["adam_t"],
                      rng_state, records)


def apply_checkpoint(model, ck: Checkpoint):
    """Restore parameters and masks into a freshly built model."""
    pl.load_param_state(model, ck.params())
    masks = ck.masks()
    by_name = {l.name: l for l in model.var_layers()}
    for name, mask in masks.items():
        if name not in by_name:
            raise ValueError(f"checkpoint mask for unknown layer {name!r}")
        vl.apply_mask(by_name[name], mask)


# ---------------------------------------------------------------------------
# train command
# ---------------------------------------------------------------------------

def _idx_path(root, name):
    for candidate in (os.path.join(root, name), os.path.join(root, name + ".gz")):
        if os.path.exists(candidate):
            return candidate
    raise FileNotFoundError(f"no {name}[.gz] under {root}")


def _load_datasets(cfg: ExperimentConfig):
    if cfg["dataset.kind"] == "synthetic":
        per = cfg["dataset.synthetic_per_class"]
        classes = cfg["dataset.synthetic_classes"]
        dim = cfg["dataset.synthetic_dim"]
        seed = cfg["dataset.seed"]
        train = dsets.synthetic_gaussians(per, classes, dim, seed)
        test = dsets.synthetic_gaussians(per, classes, dim, seed + 1)
        return train, test
    root = cfg["dataset.path"]
    train = dsets.load_idx(_idx_path(root, "train-images-idx3-ubyte"),
                           _idx_path(root, "train-labels-idx1-ubyte"), "train")
    test = dsets.load_idx(_idx_path(root, "t10k-images-idx3-ubyte"),
                          _idx_path(root, "t10k-labels-idx1-ubyte"), "test")
    if cfg["dataset.subset_n"] > 0:
        train = dsets.subset(train, cfg["dataset.subset_n"], cfg["dataset.seed"])
    return train, test


def _fmt_row(row) -> list:
    return [str(row["replication"]), row["stage"], str(row["epoch"]),
            row["split"], repr(float(row["loss"])),
            repr(float(row["accuracy"])), repr(float(row["kl_term"])),
            repr(float(row["compression_rate"])), repr(float(row["tau"])),
            repr(float(row["C"]))]


def cmd_train(cfg: ExperimentConfig, out_dir=None, scale: float = 1.0) -> int:
    out = out_dir or cfg["output.dir"]
    os.makedirs(out, exist_ok=True)
    train_ds, test_ds = _load_datasets(cfg)
    kind, arch = cfg["model.kind"], cfg["model.arch"]
    xtr = pl.prepare_input(dsets.featurize(train_ds, cfg["dataset.features"]),
                           kind, arch)
    xte = pl.prepare_input(dsets.featurize(test_ds, cfg["dataset.features"]),
                           kind, arch)
    ytr, yte = train_ds.labels, test_ds.labels
    n_classes = int(max(ytr.max(), yte.max())) + 1
    in_shape = xtr.shape[1] if arch == "dense" else xtr.shape[1:]
    spec = vl.PenaltySpec(cfg["penalty.kind"], cfg["penalty.exact_grad"])
    width = cfg["model.width"]

    def factory(seed):
        return pl.build_model(kind, arch, in_shape, n_classes, spec,
                              width, seed)

    plans = _plans_from_config(cfg, scale)
    seeds = list(cfg["train.replications"])
    chash = cfg.hash()
    csv_path = os.path.join(out, "metrics.csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)

        def on_row(row):
            writer.writerow(_fmt_row(row))

        def on_stage_end(rep, c, stage, model, mask):
            ck = make_checkpoint(model, chash, stage, plans[stage].epochs)
            save_checkpoint(
                os.path.join(out, f"ckpt_rep{rep}_C{c!r}_{stage}.bin"), ck)

        pl.run_replications(factory, ((xtr, ytr), (xte, yte)), plans,
                            cfg["train.c_grid"], seeds, on_row, on_stage_end)
    print(f"metrics written to {csv_path}")
    return 0


# ---------------------------------------------------------------------------
# verify-kl command
# ---------------------------------------------------------------------------

def _check(lines, name, ok, detail):
    lines.append(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return ok


def cmd_verify_kl(grid: int = 1024, samples: int = 100000, out_dir=None,
                  seed: int = 0) -> int:
    if grid < 2:
        raise ValueError("grid size must be at least 2")
    if samples < 10000:
        raise ValueError("at least 1e4 samples required")
    t0 = time.time()
    ts = np.linspace(-12.0, 12.0, grid)
    h = ts[1] - ts[0]
    theta = np.exp(-0.5 * ts)  # 1/sqrt(alpha)

    # Common random numbers across the grid; accumulate first and second
    # moments of the per-sample integrands and of the per-sample forward
    # differences (the honest SE for the difference quotient).
    r1 = np.zeros(grid)
    r2 = np.zeros(grid)
    c1 = np.zeros(grid)
    c2 = np.zeros(grid)
    d1 = np.zeros(grid - 1)
    d2 = np.zeros(grid - 1)
    rng = np.random.default_rng([seed, 1])
    done = 0
    chunk = 4096
    inv_sqrt2 = 1.0 / np.sqrt(2.0)
    while done < samples:
        m = min(chunk, samples - done)
        eps = rng.standard_normal(m)
        zr = rng.standard_normal(m) * inv_sqrt2
        zi = rng.standard_normal(m) * inv_sqrt2
        fr = 0.5 * np.log((theta[:, None] + eps[None, :]) ** 2)
        r1 += fr.sum(axis=1)
        r2 += (fr * fr).sum(axis=1)
        dr = np.diff(fr, axis=0) / h
        d1 += dr.sum(axis=1)
        d2 += (dr * dr).sum(axis=1)
        re = theta[:, None] + zr[None, :]
        fc = np.log(re * re + zi[None, :] ** 2) + dist.EULER_GAMMA
        c1 += fc.sum(axis=1)
        c2 += (fc * fc).sum(axis=1)
        done += m

    def _stats(s1, s2, n):
        mean = s1 / n
        var = np.maximum(s2 / n - mean * mean, 0.0)
        return mean, np.sqrt(var / n)

    rvd_mc, rvd_se = _stats(r1, r2, samples)
    cvd_mc, cvd_se = _stats(c1, c2, samples)
    fd_mc, fd_se = _stats(d1, d2, samples)

    rvd_impl = vl.kl_rvd(ts)
    rvd_grad_approx = vl.kl_rvd_grad(ts)
    rvd_grad_exact = vl.kl_rvd_grad_exact(ts)
    cvd_impl = vl.kl_cvd(ts)
    cvd_grad = vl.kl_cvd_grad(ts)

    lines = []
    ok = True

    # (a) Molchanov approximation derivative vs the exact one
    live = np.abs(rvd_grad_exact) > 1e-4
    rel = np.abs(rvd_grad_approx[live] - rvd_grad_exact[live]) \
        / np.abs(rvd_grad_exact[live])
    ok &= _check(lines, "rvd approx-vs-exact derivative",
                 float(rel.max()) <= 0.04,
                 f"max rel err {rel.max():.4f} over {live.sum()} points "
                 f"with |exact| > 1e-4 (tol 0.04)")

    # (b) exact derivative vs the MC forward difference, compared at the
    # midpoints where the difference quotient is centered.  The error bar
    # is propagated from the two per-point MC standard errors; the draws
    # are shared across the grid, so this bounds the true SE from above.
    # The paired-path z (SE of the per-sample differences, which credits
    # that covariance) is printed as a diagnostic: being the max of ~1e3
    # standard normals it hovers near 3.3 for a correct implementation,
    # which is why it is not the pass/fail statistic.
    mid = 0.5 * (ts[:-1] + ts[1:])
    exact_mid = vl.kl_rvd_grad_exact(mid)
    prop_se = np.sqrt(rvd_se[:-1] ** 2 + rvd_se[1:] ** 2) / h
    z = np.abs(exact_mid - fd_mc) / np.maximum(prop_se, 1e-12)
    z_paired = np.abs(exact_mid - fd_mc) / np.maximum(fd_se, 1e-12)
    ok &= _check(lines, "rvd exact derivative vs MC forward difference",
                 float(z.max()) <= 3.0,
                 f"max |z| {z.max():.3f} over {grid - 1} pairs (tol 3 SE; "
                 f"paired-path max |z| {z_paired.max():.2f})")

    # constancy of (MC - implemented) for the complex penalty
    diff = cvd_mc - cvd_impl
    pooled = float(np.sqrt(np.mean(cvd_se ** 2)))
    ok &= _check(lines, "cvd MC-minus-penalty constancy",
                 float(diff.std()) < 3.0 * pooled,
                 f"std {diff.std():.3e} vs 3*pooled SE {3 * pooled:.3e} "
                 f"(mean offset {diff.mean():.3e})")

    # registered cvd derivative vs central differences of the penalty
    hh = 1e-4
    fd_pen = (vl.kl_cvd(ts + hh) - vl.kl_cvd(ts - hh)) / (2 * hh)
    rel_pen = np.abs(fd_pen - cvd_grad) / np.maximum(np.abs(cvd_grad), 1e-300)
    ok &= _check(lines, "cvd registered derivative vs central differences",
                 float(rel_pen.max()) <= 1e-6,
                 f"max rel err {rel_pen.max():.2e} (tol 1e-6)")

    # penalty vanishes for large alpha
    ok &= _check(lines, "cvd penalty limit at largest alpha",
                 abs(float(cvd_impl[-1])) < 1e-3,
                 f"K(log alpha = 12) = {cvd_impl[-1]:.2e} (tol 1e-3)")

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "kl_report.csv")
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["log_alpha", "rvd_mc", "rvd_mc_se", "rvd_penalty",
                        "rvd_grad_exact", "rvd_grad_approx", "rvd_fd_mc",
                        "rvd_fd_se", "cvd_mc", "cvd_mc_se", "cvd_penalty",
                        "cvd_grad", "cvd_grad_fd"])
            for i in range(grid):
                row = [repr(float(v)) for v in
                       (ts[i], rvd_mc[i], rvd_se[i], rvd_impl[i],
                        rvd_grad_exact[i], rvd_grad_approx[i])]
                row += ([repr(float(fd_mc[i])), repr(float(fd_se[i]))]
                        if i < grid - 1 else ["", ""])
                row += [repr(float(v)) for v in
                        (cvd_mc[i], cvd_se[i], cvd_impl[i], cvd_grad[i],
                         fd_pen[i])]
                w.writerow(row)
        lines.append(f"report written to {path}")

    lines.append(f"elapsed {time.time() - t0:.1f}s "
                 f"({grid} grid points, {samples} draws)")
    print("\n".join(lines))
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# verify-lrt command
# ---------------------------------------------------------------------------

def _moment_stats(d):
    """Per-output mean/SE of the columns of a [S, n] array."""
    mean = d.mean(axis=0)
    se = d.std(axis=0) / np.sqrt(d.shape[0])
    return mean, np.maximum(se, 1e-300)


def _close3(a, b, se_a, se_b=None):
    se = se_a if se_b is None else np.sqrt(se_a ** 2 + se_b ** 2)
    return float(np.max(np.abs(a - b) / np.maximum(se, 1e-300)))


def cmd_verify_lrt(samples: int = 100000, seed: int = 0, out_dir=None) -> int:
    if samples < 10000:
        raise ValueError("at least 1e4 samples required")
    t0 = time.time()
    n_out, n_in = 4, 6
    lines = []
    ok = True
    for kind in ("cvd", "rscale"):
        rng = np.random.default_rng([seed, 2, vl.PENALTY_KINDS.index(kind)])
        layer = vl.VarLinear(n_in, n_out, vl.PenaltySpec(kind), rng,
                             name=f"probe-{kind}")
        mu = layer.mu.value
        if kind == "rscale":
            layer.log_sigma2.value.data[...] = rng.uniform(-2.0, 0.5,
                                                           (n_out, n_in))
            alpha = np.exp(layer.log_sigma2.value.data)
            s2 = alpha * (mu.re ** 2 + mu.im ** 2)
        else:
            la = rng.uniform(-2.0, 0.5, (n_out, n_in))
            layer.log_sigma2.value.data[...] = \
                np.log(mu.re ** 2 + mu.im ** 2 + vl.EPS_NUM) + la
            s2 = np.exp(layer.log_sigma2.value.data)
            alpha = None
        x = CTensor(rng.standard_normal(n_in), rng.standard_normal(n_in))

        # analytic output law
        m = ct.cadd(ct.cmatmul(mu, x), layer.bias.value)
        v = s2 @ (x.re ** 2 + x.im ** 2)
        if kind == "rscale":
            cker = CTensor(alpha * (mu.re ** 2 - mu.im ** 2),
                           alpha * 2.0 * mu.re * mu.im)
            x2 = ct.cmul(x, x)
            rel = ct.cmatmul(cker, x2)
        else:
            rel = CTensor(np.zeros(n_out), np.zeros(n_out))

        # LRT route: a batch of identical rows gives independent draws
        xb = CTensor(np.broadcast_to(x.re, (samples, n_in)).copy(),
                     np.broadcast_to(x.im, (samples, n_in)).copy())
        layer.set_mode("stochastic")
        y = layer.forward(ag.const(xb), rng).value
        dre, dim = y.re - m.re, y.im - m.im

        # weight-sampling route, vectorized over draws
        nw = rng.standard_normal((samples, n_out, n_in))
        if kind == "rscale":
            epsm = 1.0 + np.sqrt(alpha) * nw
            wre, wim = mu.re * epsm, mu.im * epsm
        else:
            half = np.sqrt(s2 / 2.0)
            wre = mu.re + half * nw
            wim = mu.im + half * rng.standard_normal((samples, n_out, n_in))
        ws_re = (wre @ x.re - wim @ x.im) + layer.bias.value.re
        ws_im = (wre @ x.im + wim @ x.re) + layer.bias.value.im
        ere, eim = ws_re - m.re, ws_im - m.im

        def _agg(dre, dim):
            mre, sre = _moment_stats(dre)
            mim, sim = _moment_stats(dim)
            var, svar = _moment_stats(dre ** 2 + dim ** 2)
            rre, srre = _moment_stats(dre ** 2 - dim ** 2)
            rim, srim = _moment_stats(2.0 * dre * dim)
            return (mre, sre, mim, sim, var, svar, rre, srre, rim, srim)

        lrt = _agg(dre, dim)
        ws = _agg(ere, eim)

        checks = [
            ("mean", max(_close3(lrt[0], 0.0, lrt[1]),
                         _close3(lrt[2], 0.0, lrt[3]))),
            ("variance", _close3(lrt[4], v, lrt[5])),
            ("relation", max(_close3(lrt[6], rel.re, lrt[7]),
                             _close3(lrt[8], rel.im, lrt[9]))),
            ("ws mean", max(_close3(ws[0], 0.0, ws[1]),
                            _close3(ws[2], 0.0, ws[3]))),
            ("ws variance", _close3(ws[4], v, ws[5])),
            ("ws relation", max(_close3(ws[6], rel.re, ws[7]),
                                _close3(ws[8], rel.im, ws[9]))),
            ("lrt-vs-ws variance", _close3(lrt[4], ws[4], lrt[5], ws[5])),
        ]
        # off-diagonal output covariances vanish (independent outputs)
        zmax = 0.0
        for a in range(n_out):
            for b in range(a + 1, n_out):
                cr = dre[:, a] * dre[:, b] + dim[:, a] * dim[:, b]
                cim = dim[:, a] * dre[:, b] - dre[:, a] * dim[:, b]
                for comp in (cr, cim):
                    mean, se = _moment_stats(comp[:, None])
                    zmax = max(zmax, abs(float(mean[0])) / float(se[0]))
        checks.append(("off-diagonal covariance", zmax))
        for name, z in checks:
            ok &= _check(lines, f"{kind} {name}", z <= 3.0,
                         f"max |z| {z:.2f} (tol 3 SE)")

        # forced zero variance: sampling collapses onto the deterministic
        # forward of the same batch, bit for bit
        layer.log_sigma2.value.data[...] = -750.0
        small = CTensor(np.broadcast_to(x.re, (8, n_in)).copy(),
                        np.broadcast_to(x.im, (8, n_in)).copy())
        layer.set_mode("deterministic")
        y0 = layer.forward(ag.const(small)).value
        layer.set_mode("stochastic")
        ys = layer.forward(ag.const(small), rng).value
        exact = bool(np.all(ys.re == y0.re) and np.all(ys.im == y0.im))
        ok &= _check(lines, f"{kind} zero-variance exact equality", exact,
                     "stochastic forward equals deterministic mean")

    lines.append(f"elapsed {time.time() - t0:.1f}s ({samples} draws)")
    report = "\n".join(lines)
    print(report)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "lrt_report.txt"), "w") as f:
            f.write(report + "\n")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# gradcheck command
# ---------------------------------------------------------------------------

def _moderate_alpha(layer, rng):
    # keep log alpha in a smooth region so finite differences are clean
    la = rng.uniform(-3.0, -1.0, layer.log_sigma2.value.shape)
    if layer.penalty.kind == "rscale":
        layer.log_sigma2.value.data[...] = la
    elif layer.is_complex:
        mu = layer.mu.value
        layer.log_sigma2.value.data[...] = \
            np.log(mu.re ** 2 + mu.im ** 2 + vl.EPS_NUM) + la
    else:
        mu = layer.mu.value.data
        layer.log_sigma2.value.data[...] = np.log(mu ** 2 + vl.EPS_NUM) + la


def _gradcheck_layer(layer_kind: str, penalty: str):
    spec = vl.PenaltySpec(penalty)
    rng = np.random.default_rng(
        [17, ("linear", "conv").index(layer_kind),
         vl.PENALTY_KINDS.index(penalty)])
    if layer_kind == "linear":
        layer = vl.VarLinear(3, 2, spec, rng, name=f"linear-{penalty}")
        xshape = (2, 3)
    else:
        layer = vl.VarConv2d(1, 2, 2, spec, rng, name=f"conv-{penalty}")
        xshape = (2, 1, 4, 4)
    _moderate_alpha(layer, rng)
    if spec.is_complex:
        x = CTensor(rng.standard_normal(xshape), rng.standard_normal(xshape))
    else:
        x = RTensor(rng.standard_normal(xshape))
    layer.set_mode("stochastic")

    def build():
        noise = np.random.default_rng(1234)
        y = layer.forward(ag.const(x), noise)
        sq = ag.cabs2(y) if y.is_complex else ag.rmul(y, y)
        return ag.radd(ag.rmean(sq), ag.rscale(layer.penalty_var(), 0.05))

    return ag.gradcheck(build, layer.parameters())


def _gradcheck_dft():
    rng = np.random.default_rng([17, 5])
    p = ag.Parameter(RTensor(rng.standard_normal((3, 4, 4))), name="dft.x")

    def build():
        return ag.rmean(ag.cabs2(ag.dft2d_centered(p)))

    return ag.gradcheck(build, [p])


def _gradcheck_stack():
    rng = np.random.default_rng([17, 6])
    conv = vl.VarConv2d(1, 2, 3, vl.PenaltySpec("cvd"), rng, name="stackconv")
    lin = vl.VarLinear(8, 3, vl.PenaltySpec("card"), rng, name="stacklin")
    _moderate_alpha(conv, rng)
    _moderate_alpha(lin, rng)
    conv.set_mode("stochastic")
    lin.set_mode("stochastic")
    imgs = RTensor(rng.standard_normal((2, 6, 6)))
    labels = np.array([0, 2])

    def build():
        noise = np.random.default_rng(4321)
        z = ag.dft2d_centered(ag.const(imgs))
        z = ag.creshape(z, (2, 1, 6, 6))
        hcv = conv.forward(z, noise)          # [2, 2, 4, 4]
        hcv = ag.crelu(hcv)
        hcv = ag.cavg_pool2d(hcv, 2, 2)       # [2, 2, 2, 2]
        hcv = ag.cflatten(hcv)                # [2, 8]
        logits = lin.forward(hcv, noise)      # [2, 3]
        cev = ag.softmax_cross_entropy(ag.creal(logits), labels)
        pen = ag.radd(conv.penalty_var(), lin.penalty_var())
        return ag.radd(cev, ag.rscale(pen, 0.05))

    return ag.gradcheck(build, conv.parameters() + lin.parameters())


def cmd_gradcheck(out_dir=None) -> int:
    t0 = time.time()
    rows = []
    for layer_kind in ("linear", "conv"):
        for penalty in vl.PENALTY_KINDS:
            rep = _gradcheck_layer(layer_kind, penalty)
            path = "exact" if penalty in ("cvd", "card", "rard") else "approx"
            rows.append((f"{layer_kind}/{penalty}", rep, path))
    rows.append(("composite/dft", _gradcheck_dft(), "exact"))
    rows.append(("composite/dft-conv-pool-dense", _gradcheck_stack(), "exact"))

    lines = []
    ok = True
    worst = 0.0
    for name, rep, path in rows:
        errs = [r["max_rel_err"] for k, r in rep.items() if k != "ok"]
        err = max(errs)
        worst = max(worst, err)
        ok &= _check(lines, name, rep["ok"],
                     f"max rel err {err:.2e} (tol 1e-5, penalty grad {path})")
    lines.append(f"overall max rel err {worst:.2e} over {len(rows)} rows, "
                 f"elapsed {time.time() - t0:.1f}s")
    report = "\n".join(lines)
    print(report)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "gradcheck_report.txt"), "w") as f:
            f.write(report + "\n")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# report command
# ---------------------------------------------------------------------------

def cmd_report(csv_dir, out_path=None) -> int:
    files = sorted(
        os.path.join(csv_dir, f) for f in os.listdir(csv_dir)
        if f.endswith(".csv") and f != "report.csv")
    if not files:
        raise FileNotFoundError(f"no metrics CSV files under {csv_dir}")
    groups = {}
    for path in files:
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                if row["stage"] != "final":
                    continue
                key = float(row["C"])
                groups.setdefault(key, []).append(
                    (float(row["compression_rate"]), float(row["accuracy"])))
    if not groups:
        raise ValueError(f"no final trade-off rows found under {csv_dir}")
    table = []
    for c, pairs in groups.items():
        comps = np.array([p[0] for p in pairs])
        accs = np.array([p[1] for p in pairs])
        table.append((float(np.median(comps)), c, len(pairs),
                      comps.min(), comps.max(),
                      accs.min(), float(np.median(accs)), accs.max()))
    table.sort()
    header = ("C", "runs", "compression_min", "compression_median",
              "compression_max", "accuracy_min", "accuracy_median",
              "accuracy_max")
    out_rows = [(c, n, cmin, cmed, cmax, amin, amed, amax)
                for cmed, c, n, cmin, cmax, amin, amed, amax in table]
    print(" ".join(f"{h:>18}" for h in header))
    for r in out_rows:
        print(" ".join(f"{v:>18.6g}" if isinstance(v, float) else f"{v:>18}"
                       for v in r))
    if out_path:
        with open(out_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(header)
            for r in out_rows:
                w.writerow([repr(float(v)) if isinstance(v, float) else str(v)
                            for v in r])
        print(f"report written to {out_path}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="cplxsparse",
        description="Sparsification experiments for complex-valued networks")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train", help="run the three-stage experiment grid")
    p.add_argument("--config", required=True, help="experiment config file")
    p.add_argument("--out", help="output directory (overrides output.dir)")
    p.add_argument("--seed", type=int,
                   help="replace the replication seed list with this seed")
    p.add_argument("--scale", type=float, default=1.0,
                   help="divide stage lengths for desk runs")

    p = sub.add_parser("verify-kl", help="MC sweep of the KL penalties")
    p.add_argument("--grid", type=int, default=1024)
    p.add_argument("--samples", type=int, default=100000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="directory for the report CSV")

    p = sub.add_parser("verify-lrt",
                       help="distribution check of the output sampler")
    p.add_argument("--samples", type=int, default=100000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="directory for the report")

    p = sub.add_parser("gradcheck",
                       help="finite-difference sweep over layers/penalties")
    p.add_argument("--out", help="directory for the report")

    p = sub.add_parser("report", help="aggregate compression/accuracy CSVs")
    p.add_argument("--out", required=True,
                   help="directory holding metrics CSVs")

    args = ap.parse_args(argv)
    try:
        if args.cmd == "train":
            overrides = {}
            if args.out:
                overrides["output.dir"] = args.out
            if args.seed is not None:
                overrides["train.replications"] = str(args.seed)
            cfg = load_config(args.config, overrides or None)
            return cmd_train(cfg, args.out, args.scale)
        if args.cmd == "verify-kl":
            return cmd_verify_kl(args.grid, args.samples, args.out, args.seed)
        if args.cmd == "verify-lrt":
            return cmd_verify_lrt(args.samples, args.seed, args.out)
        if args.cmd == "gradcheck":
            return cmd_gradcheck(args.out)
        if args.cmd == "report":
            return cmd_report(args.out,
                              os.path.join(args.out, "report.csv"))
    except (ConfigError, dsets.IdxError, ValueError, KeyError,
            FileNotFoundError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 2
