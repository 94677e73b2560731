import csv
from pathlib import Path

import numpy as np
import pytest

from lcdistill.cli import EXIT_DIVERGED, EXIT_IO, EXIT_OK, EXIT_USAGE, model_config_of, run, schedule_of
from lcdistill.config import loads
from lcdistill.denoiser import DenoiserModel
from lcdistill.io import load_latents, load_model, save_latents
from lcdistill.synthdata import GaussianOracle

TINY = """
data.dim = 3
data.n = 256
data.distribution = mixture
model.width = 16
model.cond_width = 8
teacher.iters = 20
teacher.batch = 32
lcd.iters = 10
lcd.batch = 32
lcd.gap_every = 4
lcd.checkpoint_every = 5
inference.n_samples = 40
bench.trials = 5
bench.warmups = 1
"""

TIMING_FILES = {"teacher_wallclock.csv", "distill_wallclock.csv", "bench.csv"}


def cfg_text(extra=""):
    entries = {}
    for line in (TINY + extra).splitlines():
        if line.strip():
            key, value = line.split("=", 1)
            entries[key.strip()] = value.strip()
    return "".join(f"{k} = {v}\n" for k, v in entries.items())


def write_cfg(tmp_path, extra="", name="run.cfg"):
    p = tmp_path / name
    p.write_text(cfg_text(extra))
    return p


def pipeline(cfg, out: Path, seed=0):
    s = ["--seed", str(seed)]
    c = ["--config", str(cfg), "--out", str(out)]
    assert run(["train-teacher", *c, *s]) == EXIT_OK
    assert run(["distill", *c, *s, "--checkpoint", str(out / "teacher.ckpt")]) == EXIT_OK
    for extra in (["--steps", "1"], ["--steps", "4"], ["--steps", "2", "--use-ema"]):
        sub = out / ("ema" if "--use-ema" in extra else "")
        assert run(["sample", "--config", str(cfg), "--out", str(sub), *s, "--checkpoint", str(out / "student.ckpt"), *extra]) == 0
    assert run(["sample", *c, *s, "--checkpoint", str(out / "teacher.ckpt")]) == EXIT_OK
    assert run(["eval", *c, "--samples", *sorted(str(p) for p in out.glob("samples_*.bin"))]) == EXIT_OK
    ckpt = str(out / "student.ckpt")
    assert run(["bench", *c, *s, "--checkpoint", ckpt, "--methods", "teacher-100,lcm-1,lcm-2"]) == EXIT_OK


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(root)
    pipeline(cfg, root / "a")
    pipeline(cfg, root / "b")
    return cfg, root / "a", root / "b"


def test_outputs_exist(runs):
    _, a, _ = runs
    names = {p.name for p in a.iterdir()}
    expected = {
        "teacher.ckpt",
        "teacher_metrics.csv",
        "teacher_wallclock.csv",
        "student.ckpt",
        "ema.ckpt",
        "student_step5.ckpt",
        "student_step10.ckpt",
        "distill_metrics.csv",
        "distill_wallclock.csv",
        "samples_lcm-1.bin",
        "samples_lcm-4.bin",
        "samples_teacher-100.bin",
        "eval_report.csv",
        "bench.csv",
    }
    assert expected <= names
    assert (a / "ema" / "samples_lcm-2.bin").exists()


def test_reruns_are_byte_identical(runs):
    _, a, b = runs
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.name not in TIMING_FILES)
    assert len(files) > 15
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_bench_identical_apart_from_timing(runs):
    _, a, b = runs
    rows = [list(csv.DictReader((d / "bench.csv").open())) for d in (a, b)]
    strip = [[(r["method"], r["steps"], r["dim"], r["batch"], r["trials"]) for r in rr] for rr in rows]
    assert strip[0] == strip[1]
    assert [r[1] for r in strip[0]] == ["100", "1", "2"]


def test_metrics_csv(runs):
    _, a, _ = runs
    rows = list(csv.DictReader((a / "distill_metrics.csv").open()))
    assert [int(r["step"]) for r in rows] == list(range(1, 11))
    assert [r["step"] for r in rows if r["gap"]] == ["4", "8", "10"]
    t = list(csv.DictReader((a / "teacher_metrics.csv").open()))
    assert len(t) == 20 and all(np.isfinite(float(r["loss"])) for r in t)


def test_provenance_and_taus(runs):
    _, a, _ = runs
    _, _, teacher_hash = load_model(a / "teacher.ckpt")
    _, meta, student_hash = load_model(a / "student.ckpt")
    assert meta["teacher_hash"] == teacher_hash and meta["ema_checkpoint"] == "ema.ckpt"
    _, m1 = load_latents(a / "samples_lcm-1.bin")
    _, m4 = load_latents(a / "samples_lcm-4.bin")
    assert m1["taus"] == [] and m4["taus"] == [75, 50, 25]
    assert m1["model_hash"] == student_hash and m1["n_samples"] == 40
    _, me = load_latents(a / "ema" / "samples_lcm-2.bin")
    assert me["use_ema"] is True and me["model_hash"] == load_model(a / "ema.ckpt")[2]


def test_eval_report(runs):
    _, a, _ = runs
    rows = list(csv.DictReader((a / "eval_report.csv").open()))
    assert [r["file"] for r in rows] == ["samples_lcm-1.bin", "samples_lcm-4.bin", "samples_teacher-100.bin"]
    assert [r["steps"] for r in rows] == ["1", "4", "100"]
    assert all(0.0 <= float(r["accuracy"]) <= 1.0 for r in rows)


def test_zero_iterations_checkpoint_is_init(tmp_path):
    cfg = write_cfg(tmp_path, "teacher.iters = 0\n")
    assert run(["train-teacher", "--config", str(cfg), "--out", str(tmp_path), "--seed", "3"]) == 0
    m, _, _ = load_model(tmp_path / "teacher.ckpt")
    c = loads(cfg_text("teacher.iters = 0\n"))
    assert m.param_hash() == DenoiserModel.init(model_config_of(c), 100, seed=3).param_hash()


def test_mu_zero_target_equals_student(tmp_path):
    cfg = write_cfg(tmp_path, "lcd.mu = 0.0\nteacher.iters = 3\n")
    assert run(["train-teacher", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert run(["distill", "--config", str(cfg), "--out", str(tmp_path), "--checkpoint", str(tmp_path / "teacher.ckpt")]) == 0
    s, _, _ = load_model(tmp_path / "student.ckpt")
    e, _, _ = load_model(tmp_path / "ema.ckpt")
    assert s.param_hash() == e.param_hash()


def test_eval_on_reference_samples(tmp_path):
    cfg = write_cfg(tmp_path, "data.distribution = gaussian\n")
    z = GaussianOracle(np.zeros(3), np.ones(3)).sample(20000, np.random.default_rng(0))
    save_latents(tmp_path / "ref.bin", z, {"method": "reference", "component": 0})
    assert run(["eval", "--config", str(cfg), "--out", str(tmp_path), "--samples", str(tmp_path / "ref.bin")]) == 0
    (row,) = csv.DictReader((tmp_path / "eval_report.csv").open())
    # Monte Carlo bands for 20000 draws
    assert float(row["mean_err"]) < 0.04 and float(row["cov_gap"]) < 0.06
    assert row["accuracy"] == ""


def test_usage_errors(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert run(["train-teacher", "--config", str(cfg), "--out", str(tmp_path), "--seed", "1"]) == 0
    ck = str(tmp_path / "teacher.ckpt")
    with pytest.raises(SystemExit) as exc:
        run(["sample"])
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        run(["frobnicate"])
    assert exc.value.code == EXIT_USAGE
    bad = tmp_path / "bad.cfg"
    bad.write_text("lcd.nonsense = 1\n")
    assert run(["train-teacher", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_USAGE
    assert run(["sample", "--config", str(cfg), "--out", str(tmp_path), "--checkpoint", ck, "--steps", "101"]) == 0
    # teacher checkpoints always run the full chain; a student rejects an out-of-range step count
    assert run(["distill", "--config", str(cfg), "--out", str(tmp_path), "--checkpoint", ck]) == 0
    st = str(tmp_path / "student.ckpt")
    assert run(["sample", "--config", str(cfg), "--out", str(tmp_path), "--checkpoint", st, "--steps", "0"]) == EXIT_USAGE
    assert run(["sample", "--config", str(cfg), "--out", str(tmp_path), "--checkpoint", ck, "--use-ema"]) == EXIT_USAGE
    assert run(["bench", "--config", str(cfg), "--out", str(tmp_path), "--checkpoint", st, "--methods", "lcm-x"]) == EXIT_USAGE
    other = write_cfg(tmp_path, "data.dim = 4\n", name="other.cfg")
    assert run(["distill", "--config", str(other), "--out", str(tmp_path), "--checkpoint", ck]) == EXIT_USAGE
    assert run(["eval", "--config", str(other), "--out", str(tmp_path), "--samples", str(tmp_path / "samples_teacher-100.bin")]) == EXIT_USAGE


def test_io_errors(tmp_path):
    cfg = write_cfg(tmp_path)
    missing = str(tmp_path / "nope.ckpt")
    assert run(["distill", "--config", str(cfg), "--out", str(tmp_path), "--checkpoint", missing]) == EXIT_IO
    assert run(["train-teacher", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)]) == EXIT_IO
    corrupt = tmp_path / "c.ckpt"
    corrupt.write_bytes(b"LCDCKPT\x00" + bytes(64))
    assert run(["sample", "--config", str(cfg), "--out", str(tmp_path), "--checkpoint", str(corrupt)]) == EXIT_IO


def test_divergence_exit_code(tmp_path):
    cfg = write_cfg(tmp_path, "teacher.lr = 1e200\nteacher.optimizer = sgd\nteacher.iters = 50\n")
    assert run(["train-teacher", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_DIVERGED
    assert not (tmp_path / "teacher.ckpt").exists()


def test_schedule_from_config():
    s = schedule_of(loads("schedule.T = 50\nschedule.beta_max = 0.02\nlcd.k = 5"))
    assert s.T == 50 and s.beta[-1] == 0.02
