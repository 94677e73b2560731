"""Command-line front end: train-teacher, distill, sample, eval, bench.

Exit codes: 0 success, 1 usage/config error, 2 numerical divergence, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import config as config_mod
from .bench import bench_csv, bench_sampler, parse_method, pin_to_one_cpu
from .config import ExperimentConfig
from .denoiser import DenoiserModel, DivergenceError, ModelConfig
from .diffusion import TeacherTrainState, ancestral_sample, train_teacher
from .io import CheckpointError, atomic_write, load_latents, load_model, save_latents, save_model
from .lcd import BoundaryScaling, GapProbe, distill_step, make_lcd_state
from .lcm import TimestepSequence, lcm_sample, make_tau_sequence
from .metrics import assignment_accuracy, moment_errors
from .optim import cosine_lr, make_optimizer
from .schedule import ConfigError, make_linear_schedule
from .synthdata import DataSpec, build_distribution, sample_dataset

log = logging.getLogger("lcdistill")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


def schedule_of(cfg: ExperimentConfig):
    return make_linear_schedule(cfg.schedule.T, cfg.schedule.beta_min, cfg.schedule.beta_max)


def distribution_of(cfg: ExperimentConfig):
    return build_distribution(DataSpec(**asdict(cfg.data)))


def model_config_of(cfg: ExperimentConfig) -> ModelConfig:
    d, m = cfg.data, cfg.model
    return ModelConfig(
        dim=d.dim,
        content_dim=d.content_dim,
        speaker_dim=d.speaker_dim,
        f0_emb_dim=m.f0_emb_dim,
        t_freqs=m.t_freqs,
        t_emb_dim=m.t_emb_dim,
        cond_width=m.cond_width,
        width=m.width,
        depth=m.depth,
    )


def scaling_of(cfg: ExperimentConfig) -> BoundaryScaling:
    return BoundaryScaling(cfg.schedule.T, cfg.lcd.sigma_data, cfg.lcd.s_c)


def taus_of(cfg: ExperimentConfig, N: int) -> TimestepSequence:
    if cfg.inference.taus and len(cfg.inference.taus) == N - 1:
        return TimestepSequence(cfg.inference.taus)
    return make_tau_sequence(N, cfg.schedule.T)


def sampling_condition(cfg: ExperimentConfig, component: int, n: int, seed: int):
    """Per-sample conditions for ``component``: fresh content and pitch contours."""
    dist = distribution_of(cfg)
    if not 0 <= component < len(dist.components):
        raise UsageError(f"component {component} does not exist")
    rng = np.random.default_rng([seed, 7])
    labels = np.full(n, component)
    content = rng.standard_normal((n, dist.content_dim))
    return dist.condition(content, dist.contours(labels, rng), labels)


def _csv_text(header, rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def _check_model(model: DenoiserModel, cfg: ExperimentConfig) -> None:
    if model.cfg != model_config_of(cfg) or model.T != cfg.schedule.T:
        raise UsageError("checkpoint shapes do not match the configuration")


def cmd_train_teacher(cfg: ExperimentConfig, out: Path, seed: int) -> Path:
    s = schedule_of(cfg)
    data = sample_dataset(distribution_of(cfg), cfg.data.n, cfg.data.seed)
    model = DenoiserModel.init(model_config_of(cfg), s.T, seed=seed)
    tc = cfg.teacher
    opt = make_optimizer(tc.optimizer, tc.lr)
    state = TeacherTrainState(model, opt, np.random.default_rng([seed, 1]), tc.p_uncond, tc.ema)
    rows, clock = [], []
    t0 = time.perf_counter()

    def record(step, loss):
        rows.append((step, _fmt(loss)))
        clock.append((step, f"{time.perf_counter() - t0:.6f}"))

    train_teacher(state, data, s, tc.iters, tc.batch, tc.lr_schedule, on_step=record)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "teacher_metrics.csv", _csv_text(("step", "loss"), rows).encode())
    atomic_write(out / "teacher_wallclock.csv", _csv_text(("step", "elapsed_s"), clock).encode())
    path = out / "teacher.ckpt"
    # downstream commands use the averaged weights when averaging is on
    save_model(path, state.weights, {"kind": "teacher", "seed": seed, "ema": tc.ema, "config": config_mod.dumps(cfg)})
    log.info("teacher: %d steps, final loss %s -> %s", tc.iters, rows[-1][1] if rows else "n/a", path)
    return path


def cmd_distill(cfg: ExperimentConfig, teacher_path: Path, out: Path, seed: int) -> tuple[Path, Path]:
    s = schedule_of(cfg)
    teacher, _, teacher_hash = load_model(teacher_path)
    _check_model(teacher, cfg)
    data = sample_dataset(distribution_of(cfg), cfg.data.n, cfg.data.seed)
    lc = cfg.lcd
    state = make_lcd_state(
        teacher, teacher, make_optimizer(lc.optimizer, lc.lr), seed, scaling_of(cfg), mu=lc.mu, omega=lc.omega, k=lc.k
    )
    probe = GapProbe.build(state, data, s)
    rows, clock = [], []
    t0 = time.perf_counter()
    out.mkdir(parents=True, exist_ok=True)
    meta = {"seed": seed, "teacher_hash": teacher_hash, "config": config_mod.dumps(cfg)}
    for i in range(lc.iters):
        idx = state.rng.integers(0, len(data), size=lc.batch)
        lr = cosine_lr(lc.lr, i, lc.iters) if lc.lr_schedule == "cosine" else lc.lr
        _, loss = distill_step(state, data.take(idx), s, lr)
        gap = probe.gap(state, s, lc.k) if state.step % lc.gap_every == 0 or i == lc.iters - 1 else None
        rows.append((state.step, _fmt(loss), _fmt(gap)))
        clock.append((state.step, f"{time.perf_counter() - t0:.6f}"))
        if lc.checkpoint_every and state.step % lc.checkpoint_every == 0:
            save_model(out / f"student_step{state.step}.ckpt", state.theta, {"kind": "student", **meta})
    atomic_write(out / "distill_metrics.csv", _csv_text(("step", "lcd_loss", "gap"), rows).encode())
    atomic_write(out / "distill_wallclock.csv", _csv_text(("step", "elapsed_s"), clock).encode())
    student, ema = out / "student.ckpt", out / "ema.ckpt"
    save_model(ema, state.theta_minus, {"kind": "ema", **meta})
    save_model(student, state.theta, {"kind": "student", "ema_checkpoint": ema.name, **meta})
    log.info("distilled %d steps; student -> %s, ema -> %s", lc.iters, student, ema)
    return student, ema


def cmd_sample(
    cfg: ExperimentConfig, ckpt: Path, out: Path, seed: int, N: int | None = None, use_ema: bool = False
) -> Path:
    s = schedule_of(cfg)
    inf = cfg.inference
    model, meta, digest = load_model(ckpt)
    if use_ema:
        if "ema_checkpoint" not in meta:
            raise UsageError(f"{ckpt} has no EMA companion")
        model, meta, digest = load_model(Path(ckpt).parent / meta["ema_checkpoint"])
    _check_model(model, cfg)
    cond = sampling_condition(cfg, inf.component, inf.n_samples, seed)
    if meta.get("kind") == "teacher":
        N, taus, method = s.T, None, f"teacher-{s.T}"
        z = ancestral_sample(model, cond, s, seed)
    else:
        N = inf.N if N is None else N
        if not 1 <= N <= s.T:
            raise UsageError(f"steps must lie in [1, {s.T}], got {N}")
        taus, method = taus_of(cfg, N), f"lcm-{N}"
        omega = cfg.lcd.omega if inf.guidance else None
        z = lcm_sample(model, cond, taus, s, seed, scaling_of(cfg), omega)
    path = out / f"samples_{method}.bin"
    side = {
        "method": method,
        "N": N,
        "taus": list(taus) if taus is not None else None,
        "seed": seed,
        "model_hash": digest,
        "use_ema": use_ema,
        "component": inf.component,
        "n_samples": inf.n_samples,
    }
    save_latents(path, z, side)
    log.info("%d samples (%s) -> %s", len(z), method, path)
    return path


EVAL_HEADER = ("file", "method", "steps", "mean_err", "cov_gap", "rel_mean_err", "rel_cov_gap", "total", "accuracy")


def cmd_eval(cfg: ExperimentConfig, sample_paths, out: Path) -> Path:
    dist = distribution_of(cfg)
    means = np.stack([c.oracle.mean for c in dist.components])
    rows = []
    for p in sample_paths:
        z, meta = load_latents(p)
        if z.shape[1] != dist.dim:
            raise UsageError(f"{p}: sample dim {z.shape[1]} does not match data dim {dist.dim}")
        k = meta.get("component")
        if k is None:
            ref_mean, ref_cov, acc = dist.mean(), dist.cov(), None
        else:
            o = dist.components[k].oracle
            ref_mean, ref_cov = o.mean, np.diag(o.var)
            acc = assignment_accuracy(z, means, k) if len(dist.components) > 1 else None
        r = moment_errors(z, ref_mean, ref_cov)
        rows.append(
            (
                Path(p).name,
                meta.get("method", ""),
                meta.get("N", ""),
                _fmt(r.mean_err),
                _fmt(r.cov_gap),
                _fmt(r.rel_mean_err),
                _fmt(r.rel_cov_gap),
                _fmt(r.total),
                _fmt(acc),
            )
        )
    out.mkdir(parents=True, exist_ok=True)
    path = out / "eval_report.csv"
    atomic_write(path, _csv_text(EVAL_HEADER, rows).encode())
    return path


def cmd_bench(cfg: ExperimentConfig, ckpt: Path, out: Path, seed: int, methods=None) -> Path:
    s = schedule_of(cfg)
    model, _, _ = load_model(ckpt)
    _check_model(model, cfg)
    methods = list(methods or cfg.bench.methods)
    for m in methods:
        parse_method(m)
    cond = sampling_condition(cfg, cfg.inference.component, cfg.bench.n_samples, seed)
    pin_to_one_cpu()
    records = [
        bench_sampler(model, m, cond, s, scaling_of(cfg), cfg.bench.trials, cfg.bench.warmups, seed) for m in methods
    ]
    path = out / "bench.csv"
    atomic_write(path, bench_csv(records).encode())
    for r in records:
        log.info("%-12s steps=%-4d median %.1f us/sample", r.method, r.steps, r.wall_ns_median / 1e3)
    return path


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lcdistill", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, checkpoint=False):
        sp.add_argument("--config", type=Path, help="experiment config file (defaults if omitted)")
        sp.add_argument("--seed", type=int, help="overrides run.seed")
        sp.add_argument("--out", type=Path, help="output directory (default paths.out)")
        if checkpoint:
            sp.add_argument("--checkpoint", type=Path, required=True)

    common(sub.add_parser("train-teacher", help="train the noise-prediction teacher"))
    common(sub.add_parser("distill", help="consistency-distill a teacher checkpoint"), checkpoint=True)
    sp = sub.add_parser("sample", help="draw latents from a checkpoint")
    common(sp, checkpoint=True)
    sp.add_argument("--steps", type=int, help="inference steps N (default inference.N)")
    sp.add_argument("--use-ema", action="store_true", help="sample with the EMA target weights")
    sp = sub.add_parser("eval", help="moment errors of sample files against the data distribution")
    common(sp)
    sp.add_argument("--samples", type=Path, nargs="+", required=True)
    sp = sub.add_parser("bench", help="latency per sample for several samplers")
    common(sp, checkpoint=True)
    sp.add_argument("--methods", help="comma-separated list, e.g. teacher-100,lcm-1,lcm-2")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = config_mod.load(args.config) if args.config else ExperimentConfig()
        seed = cfg.run.seed if args.seed is None else args.seed
        out = args.out or Path(cfg.paths.out)
        if args.command == "train-teacher":
            cmd_train_teacher(cfg, out, seed)
        elif args.command == "distill":
            cmd_distill(cfg, args.checkpoint, out, seed)
        elif args.command == "sample":
            cmd_sample(cfg, args.checkpoint, out, seed, args.steps, args.use_ema)
        elif args.command == "eval":
            cmd_eval(cfg, args.samples, out)
        elif args.command == "bench":
            methods = args.methods.split(",") if args.methods else None
            cmd_bench(cfg, args.checkpoint, out, seed, methods)
    except (ConfigError, UsageError, ValueError) as exc:
        print(f"lcdistill: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, FloatingPointError) as exc:
        print(f"lcdistill: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, CheckpointError) as exc:
        print(f"lcdistill: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
