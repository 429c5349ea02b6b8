import csv
import dataclasses
import os

import numpy as np
import pytest

from cplxsparse import cli
from cplxsparse import pipeline as pl
from cplxsparse import varlayers as vl

SYNTH_CFG = """
# tiny synthetic experiment for tests
dataset.kind = synthetic
dataset.synthetic_per_class = 30
dataset.synthetic_classes = 2
dataset.synthetic_dim = 6

model.kind = complex
model.arch = dense
model.width = 0.5

penalty.kind = cvd

stages.pretrain.epochs = 2
stages.sparsify.epochs = 2
stages.finetune.epochs = 1

train.c_grid = 1e-2
train.replications = 0
"""


def write_cfg(tmp_path, text=SYNTH_CFG, name="exp.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------

def test_parse_skips_comments_and_blanks():
    raw = cli.parse_config_text("# c\n\nmodel.kind = real\n  # d\n")
    assert raw == {"model.kind": "real"}


def test_parse_rejects_missing_equals():
    with pytest.raises(cli.ConfigError, match="line 2"):
        cli.parse_config_text("model.kind = real\nmodel.arch dense\n")


def test_parse_rejects_duplicate_key():
    with pytest.raises(cli.ConfigError, match="duplicate"):
        cli.parse_config_text("train.tau = -0.5\ntrain.tau = -1\n")


def test_unknown_key_named_in_error():
    with pytest.raises(cli.ConfigError, match="model.depth"):
        cli.make_config({"model.depth": "3"})


def test_type_error_names_key():
    with pytest.raises(cli.ConfigError, match="stages.pretrain.epochs"):
        cli.make_config({"stages.pretrain.epochs": "three",
                         "dataset.kind": "synthetic"})


def test_enum_error_lists_choices():
    with pytest.raises(cli.ConfigError, match="raw"):
        cli.make_config({"dataset.features": "dct",
                         "dataset.kind": "synthetic"})


def test_defaults_fill_in():
    cfg = cli.make_config({"dataset.kind": "synthetic"})
    assert cfg["model.kind"] == "complex"
    assert cfg["stages.pretrain.batch_size"] == 128
    assert cfg["train.tau"] == -0.5
    assert cfg["train.c_grid"] == (1e-2,)
    assert cfg["train.replications"] == (0, 1, 2, 3, 4)


def test_width_restricted():
    with pytest.raises(cli.ConfigError, match="width"):
        cli.make_config({"dataset.kind": "synthetic", "model.width": "0.7"})


def test_c_grid_range_checked():
    with pytest.raises(cli.ConfigError, match="c_grid"):
        cli.make_config({"dataset.kind": "synthetic",
                         "train.c_grid": "1e-3, 2.0"})


def test_idx_requires_path():
    with pytest.raises(cli.ConfigError, match="dataset.path"):
        cli.make_config({"dataset.kind": "idx"})


def test_load_config_with_overrides(tmp_path):
    path = write_cfg(tmp_path)
    cfg = cli.load_config(path)
    cfg2 = cli.load_config(path, {"train.replications": "7"})
    assert cfg["train.replications"] == (0,)
    assert cfg2["train.replications"] == (7,)
    assert cfg.hash() != cfg2.hash()


# ---------------------------------------------------------------------------
# config hashing
# ---------------------------------------------------------------------------

def test_hash_ignores_formatting(tmp_path):
    a = cli.load_config(write_cfg(tmp_path, name="a.cfg"))
    reordered = "\n".join(reversed([l for l in SYNTH_CFG.splitlines()
                                    if l.strip() and not
                                    l.strip().startswith("#")]))
    b = cli.load_config(write_cfg(tmp_path, reordered, name="b.cfg"))
    assert a.hash() == b.hash()


def test_hash_ignores_output_dir(tmp_path):
    a = cli.load_config(write_cfg(tmp_path))
    b = cli.load_config(write_cfg(tmp_path,
                                  SYNTH_CFG + "\noutput.dir = elsewhere\n",
                                  name="b.cfg"))
    assert a.hash() == b.hash()


@pytest.mark.parametrize("key,value", [
    ("train.tau", "-1.0"),
    ("penalty.kind", "card"),
    ("stages.sparsify.epochs", "3"),
    ("dataset.seed", "5"),
    ("train.c_grid", "1e-2, 1e-1"),
])
def test_hash_tracks_semantic_fields(tmp_path, key, value):
    a = cli.load_config(write_cfg(tmp_path))
    b = cli.load_config(write_cfg(tmp_path), {key: value})
    assert a.hash() != b.hash()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def tiny_model(seed=0):
    return pl.build_model("complex", "dense", 6, 2, "cvd", seed=seed,
                          dense_hidden=5)


def checkpointable_state(seed=3):
    model = tiny_model(seed)
    mask = np.random.default_rng(1).random(
        model.var_layers()[0].mu.value.shape) > 0.5
    mask.flat[0] = True
    model.var_layers()[0].apply_mask(mask)
    opt = pl.AdamState(t=4)
    opt.m["layer0.mu"] = np.random.default_rng(2).standard_normal((2, 5, 6))
    opt.v["layer0.mu"] = np.random.default_rng(3).random((2, 5, 6))
    rng = np.random.default_rng(9)
    rng.standard_normal(17)  # advance so the saved state is nontrivial
    return model, opt, rng


def test_checkpoint_round_trip_bitwise(tmp_path):
    model, opt, rng = checkpointable_state()
    ck = cli.make_checkpoint(model, "a" * 64, "sparsify", 3, opt, rng)
    p1, p2 = tmp_path / "c1.bin", tmp_path / "c2.bin"
    cli.save_checkpoint(p1, ck)
    loaded = cli.load_checkpoint(p1)
    cli.save_checkpoint(p2, loaded)
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.stage == "sparsify" and loaded.epoch == 3
    assert loaded.config_hash == "a" * 64


def test_checkpoint_restores_params_masks_adam_rng(tmp_path):
    model, opt, rng = checkpointable_state()
    ck = cli.make_checkpoint(model, "b" * 64, "sparsify", 2, opt, rng)
    path = tmp_path / "c.bin"
    cli.save_checkpoint(path, ck)
    loaded = cli.load_checkpoint(path)

    fresh = tiny_model(seed=99)  # different init on purpose
    cli.apply_checkpoint(fresh, loaded)
    for a, b in zip(model.parameters(), fresh.parameters()):
        if hasattr(a.value, "re"):
            np.testing.assert_array_equal(a.value.re, b.value.re)
            np.testing.assert_array_equal(a.value.im, b.value.im)
        else:
            np.testing.assert_array_equal(a.value.data, b.value.data)
    np.testing.assert_array_equal(fresh.var_layers()[0].mask,
                                  model.var_layers()[0].mask)

    opt2 = loaded.adam_state()
    assert opt2.t == 4
    np.testing.assert_array_equal(opt2.m["layer0.mu"], opt.m["layer0.mu"])
    np.testing.assert_array_equal(opt2.v["layer0.mu"], opt.v["layer0.mu"])

    rng2 = loaded.rng()
    np.testing.assert_array_equal(rng2.standard_normal(5),
                                  rng.standard_normal(5))


def test_checkpoint_hash_enforced(tmp_path):
    model, opt, rng = checkpointable_state()
    path = tmp_path / "c.bin"
    cli.save_checkpoint(path, cli.make_checkpoint(model, "c" * 64,
                                                  "pretrain", 1))
    cli.load_checkpoint(path, expect_hash="c" * 64)  # matching is fine
    with pytest.raises(ValueError, match="hash mismatch"):
        cli.load_checkpoint(path, expect_hash="d" * 64)


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOPE" + b"\x00" * 40)
    with pytest.raises(ValueError, match="not a checkpoint"):
        cli.load_checkpoint(bad)

    model, _, _ = checkpointable_state()
    good = tmp_path / "good.bin"
    cli.save_checkpoint(good, cli.make_checkpoint(model, "e" * 64,
                                                  "pretrain", 0))
    blob = good.read_bytes()
    trunc = tmp_path / "trunc.bin"
    trunc.write_bytes(blob[:-9])
    with pytest.raises(ValueError, match="truncated"):
        cli.load_checkpoint(trunc)
    fat = tmp_path / "fat.bin"
    fat.write_bytes(blob + b"\x00")
    with pytest.raises(ValueError, match="trailing"):
        cli.load_checkpoint(fat)
    ver = tmp_path / "ver.bin"
    ver.write_bytes(blob[:4] + b"\x09\x00\x00\x00" + blob[8:])
    with pytest.raises(ValueError, match="version"):
        cli.load_checkpoint(ver)


def test_mask_bit_packing_odd_sizes(tmp_path):
    rng = np.random.default_rng(0)
    model = vl.Sequential([vl.VarLinear(5, 3, vl.PenaltySpec("cvd"), rng)])
    mask = rng.random((3, 5)) > 0.5  # 15 bits, not a byte multiple
    mask.flat[0] = True
    model.var_layers()[0].apply_mask(mask)
    path = tmp_path / "m.bin"
    cli.save_checkpoint(path, cli.make_checkpoint(model, "f" * 64,
                                                  "sparsify", 1))
    loaded = cli.load_checkpoint(path)
    np.testing.assert_array_equal(loaded.masks()["layer0"], mask)


# ---------------------------------------------------------------------------
# mid-stage resume
# ---------------------------------------------------------------------------

def resume_data():
    from cplxsparse import data as dt
    ds = dt.synthetic_gaussians(30, 2, 6, seed=0)
    x = pl.prepare_input(dt.featurize(ds, "raw"), "complex", "dense")
    y = ds.labels
    return ((pl._take(x, np.arange(40)), y[:40]),
            (pl._take(x, np.arange(40, 60)), y[40:]))


def test_resume_mid_stage_is_bit_exact(tmp_path):
    data = resume_data()
    plan = pl.StagePlan("pretrain", 4, seed=5, batch_size=16)
    path = tmp_path / "mid.bin"

    # uninterrupted run, checkpointing as it passes epoch 2
    model_a = tiny_model(seed=5)

    def snap(next_epoch, model, opt_state, rng):
        if next_epoch == 2:
            cli.save_checkpoint(path, cli.make_checkpoint(
                model, "0" * 64, "pretrain", next_epoch, opt_state, rng))

    rows_a, _ = pl.run_stage(model_a, data, plan, on_epoch=snap)

    # cold restart from the snapshot
    ck = cli.load_checkpoint(path, expect_hash="0" * 64)
    model_b = tiny_model(seed=77)
    cli.apply_checkpoint(model_b, ck)
    rows_b, _ = pl.run_stage(model_b, data, plan, start_epoch=ck.epoch,
                             opt_state=ck.adam_state(), rng=ck.rng())

    assert rows_b == rows_a[4:]  # two rows per epoch, epochs 2..3
    for a, b in zip(model_a.parameters(), model_b.parameters()):
        if hasattr(a.value, "re"):
            np.testing.assert_array_equal(a.value.re, b.value.re)
            np.testing.assert_array_equal(a.value.im, b.value.im)
        else:
            np.testing.assert_array_equal(a.value.data, b.value.data)


# ---------------------------------------------------------------------------
# commands end to end
# ---------------------------------------------------------------------------

def test_train_command_writes_metrics(tmp_path):
    cfg_path = write_cfg(tmp_path)
    out = tmp_path / "out"
    rc = cli.main(["train", "--config", cfg_path, "--out", str(out)])
    assert rc == 0
    rows = list(csv.DictReader(open(out / "metrics.csv", newline="")))
    assert rows
    assert set(r["stage"] for r in rows) == {"pretrain", "sparsify",
                                             "finetune", "final"}
    finals = [r for r in rows if r["stage"] == "final"]
    assert len(finals) == 1
    assert float(finals[0]["compression_rate"]) >= 1.0
    cks = [f for f in os.listdir(out) if f.startswith("ckpt_")]
    assert len(cks) == 2  # sparsify + finetune ends, one (rep, C) pair


def test_train_rerun_is_byte_identical(tmp_path):
    cfg_path = write_cfg(tmp_path)
    out1, out2 = tmp_path / "o1", tmp_path / "o2"
    assert cli.main(["train", "--config", cfg_path, "--out",
                     str(out1)]) == 0
    assert cli.main(["train", "--config", cfg_path, "--out",
                     str(out2)]) == 0
    assert (out1 / "metrics.csv").read_bytes() == \
        (out2 / "metrics.csv").read_bytes()


def test_seed_flag_replaces_replications(tmp_path):
    cfg_path = write_cfg(tmp_path)
    out = tmp_path / "seeded"
    rc = cli.main(["train", "--config", cfg_path, "--out", str(out),
                   "--seed", "3"])
    assert rc == 0
    rows = list(csv.DictReader(open(out / "metrics.csv", newline="")))
    assert set(r["replication"] for r in rows) == {"0"}
    # a different seed must change the outcome stream
    out2 = tmp_path / "seeded2"
    cli.main(["train", "--config", cfg_path, "--out", str(out2),
              "--seed", "4"])
    assert (out / "metrics.csv").read_bytes() != \
        (out2 / "metrics.csv").read_bytes()


def test_scale_shortens_stages(tmp_path):
    cfg = cli.load_config(write_cfg(tmp_path))
    plans = cli._plans_from_config(cfg, scale=2.0)
    assert plans["pretrain"].epochs == 1
    assert plans["finetune"].epochs == 1  # floors at one epoch
    with pytest.raises(cli.ConfigError):
        cli._plans_from_config(cfg, scale=0.0)


def test_bad_config_exits_2(tmp_path):
    bad = write_cfg(tmp_path, "model.kind = quater\n", name="bad.cfg")
    assert cli.main(["train", "--config", bad]) == 2


def test_missing_config_exits_2(tmp_path):
    missing = str(tmp_path / "nope.cfg")
    assert cli.main(["train", "--config", missing]) == 2


def test_report_on_empty_dir_exits_2(tmp_path):
    assert cli.main(["report", "--out", str(tmp_path)]) == 2


# ---------------------------------------------------------------------------
# report aggregation
# ---------------------------------------------------------------------------

def fake_metrics(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cli.CSV_COLUMNS)
        for rep, stage, comp, acc, c in rows:
            w.writerow([rep, stage, 0, "test", 0.0, acc, 0.0, comp,
                        -0.5, c])


def test_report_aggregates_finals(tmp_path, capsys):
    # three replications at C=1e-2, two at C=1e-1, spread over two files
    fake_metrics(tmp_path / "a.csv", [
        (0, "final", 4.0, 0.90, 1e-2),
        (1, "final", 6.0, 0.92, 1e-2),
        (0, "pretrain", 1.0, 0.5, 1e-2),  # ignored
        (0, "final", 20.0, 0.80, 1e-1),
    ])
    fake_metrics(tmp_path / "b.csv", [
        (2, "final", 5.0, 0.91, 1e-2),
        (1, "final", 30.0, 0.82, 1e-1),
    ])
    out_path = tmp_path / "report.csv"
    rc = cli.cmd_report(str(tmp_path), str(out_path))
    assert rc == 0
    rows = list(csv.DictReader(open(out_path, newline="")))
    assert len(rows) == 2
    # sorted by median compression ascending
    assert float(rows[0]["C"]) == 1e-2
    assert int(rows[0]["runs"]) == 3
    assert float(rows[0]["compression_min"]) == 4.0
    assert float(rows[0]["compression_median"]) == 5.0
    assert float(rows[0]["compression_max"]) == 6.0
    assert float(rows[0]["accuracy_median"]) == 0.91
    assert float(rows[1]["C"]) == 1e-1
    assert int(rows[1]["runs"]) == 2
    assert float(rows[1]["compression_median"]) == 25.0
    assert float(rows[1]["accuracy_min"]) == 0.80


def test_report_single_run(tmp_path):
    fake_metrics(tmp_path / "m.csv", [(0, "final", 7.5, 0.88, 5e-3)])
    out_path = tmp_path / "report.csv"
    assert cli.cmd_report(str(tmp_path), str(out_path)) == 0
    rows = list(csv.DictReader(open(out_path, newline="")))
    assert len(rows) == 1
    assert float(rows[0]["compression_min"]) == 7.5
    assert float(rows[0]["compression_median"]) == 7.5
    assert float(rows[0]["compression_max"]) == 7.5


def test_report_requires_final_rows(tmp_path):
    fake_metrics(tmp_path / "m.csv", [(0, "pretrain", 1.0, 0.5, 1e-2)])
    with pytest.raises(ValueError, match="final"):
        cli.cmd_report(str(tmp_path), None)
