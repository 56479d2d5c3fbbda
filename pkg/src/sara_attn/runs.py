"""Subcommand bodies: each takes a RunConfig, writes artifacts, returns a report."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import theory
from .attention import kernel_attention_linear, kernel_attention_quadratic
from .config import RunConfig
from .feature_maps import FeatureMapSpec, SaraParams, save_sara_params
from .navdemo import KernelSpec, compare_kernels, distill_scene, synthetic_scene
from .numerics import SeededRng, gaussian_matrix, normalize_rows_to_radius
from .uptrain import DistillationConfig, SyntheticTokens, random_teacher, uptrain

log = logging.getLogger(__name__)

THREADS_ENV = "SARA_ATTN_THREADS"


def _out_dir(cfg: RunConfig, name: str) -> Path:
    path = Path(cfg.out) / name
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


# --- verify -----------------------------------------------------------------


def verify_lemma1(cfg: RunConfig) -> dict:
    c = cfg.verify.lemma1
    rng = SeededRng(cfg.seed).child("lemma1")
    checks = []
    for i, (r, th) in enumerate(c.pairs):
        x, y = theory.pair_at_angle(r, th * math.pi, c.dim)
        for m in c.ms:
            rep = theory.mc_unbiasedness(x, y, m, c.trials, rng.child(f"{i}/{m}"))
            checks.append(
                {"r": r, "theta_over_pi": th, **asdict(rep), "passed": rep.within(c.n_stderr)}
            )
    return {"checks": checks, "passed": all(ch["passed"] for ch in checks)}


def verify_lemma2(cfg: RunConfig) -> dict:
    c = cfg.verify.lemma2
    rng = SeededRng(cfg.seed).child("lemma2")
    variance = []
    for i, (r, th) in enumerate(c.pairs):
        x, y = theory.pair_at_angle(r, th * math.pi, c.dim)
        draws = theory.estimator_draws(x, y, c.m, c.trials, rng.child(f"var{i}"))
        empirical = float(draws.var(ddof=1))
        closed = theory.variance_closed_form(x, y, c.m)
        if closed < c.abs_below:
            ok = bool(abs(empirical - closed) <= c.abs_tol)
        else:
            ok = bool(abs(empirical - closed) <= c.rel_tol * closed)
        variance.append(
            {"r": r, "theta_over_pi": th, "m": c.m, "trials": c.trials,
             "empirical": empirical, "closed_form": closed, "passed": ok}
        )
    tail = []
    x, y = theory.pair_at_angle(c.tail_r, c.tail_theta_over_pi * math.pi, c.dim)
    for t in c.tail_ts:
        res = theory.chebyshev_tail_check(x, y, c.tail_m, t, c.tail_trials, rng.child(f"tail{t}"))
        tail.append({"t": t, "m": c.tail_m, "trials": c.tail_trials, **res})
    passed = all(v["passed"] for v in variance) and all(t["passed"] for t in tail)
    return {"variance": variance, "tail": tail, "passed": passed}


def verify_theorem1(cfg: RunConfig) -> dict:
    c = cfg.verify.theorem1
    ref = theory.TheoremSetting(1.0, c.m_rho_over_tau, c.m_delta, c.m_M, c.m_N, c.m_r, c.m_A)
    m_ref = theory.theorem_m(ref)
    layer, Xq, Xk = theory.theorem_inputs(SeededRng(cfg.seed).child("theorem1"), c.M, c.N, c.d, c.d_qk, c.r)
    setting = theory.measured_setting(layer, Xq, Xk, c.delta, c.A)
    seeds = [cfg.seed * 1000 + i for i in range(c.n_seeds)]
    rep = theory.theorem_end_to_end(setting, layer, Xq, Xk, seeds)
    e2e = {
        "errors_per_seed": rep.errors_per_seed,
        "kernel_rel_errors": rep.kernel_rel_errors,
        "m_used": rep.m_used,
        "tau": rep.tau,
        "rho": rep.rho,
        "delta": rep.delta,
        "median_error": rep.median_error,
        "fraction_within_delta": rep.fraction_within_delta,
        "passed": bool(rep.median_error <= c.delta),
    }
    m_check = {"computed": m_ref, "expected": c.m_expected, "passed": m_ref == c.m_expected}
    return {"m_formula": m_check, "end_to_end": e2e, "passed": m_check["passed"] and e2e["passed"]}


def run_verify(cfg: RunConfig, write: bool = True) -> dict:
    report = {
        "seed": cfg.seed,
        "lemma1": verify_lemma1(cfg),
        "lemma2": verify_lemma2(cfg),
        "theorem1": verify_theorem1(cfg),
    }
    report["passed"] = all(report[k]["passed"] for k in ("lemma1", "lemma2", "theorem1"))
    if write:
        _write_json(_out_dir(cfg, "verify") / "report.json", report)
    return report


# --- bench ------------------------------------------------------------------


@dataclass
class BenchRecord:
    engine: str
    N: int
    M: int
    m: int
    wall_time_ns: int
    repeats: int
    flops: int


def _thread_limit(parallel: bool):
    env = os.environ.get(THREADS_ENV)
    limit = int(env) if env else (None if parallel else 1)
    if limit is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=limit)


def bench_inputs(cfg: RunConfig, N: int):
    dims = cfg.dims
    rng = SeededRng(cfg.seed).child(f"bench/{N}")
    X = normalize_rows_to_radius(gaussian_matrix(rng.child("X"), N, dims.d), 1.0)
    V = gaussian_matrix(rng.child("V"), N, dims.d_v)
    prng = SeededRng(cfg.seed).child("bench/params")
    params = SaraParams(
        np.ones(dims.m),
        gaussian_matrix(prng.child("G_Q"), dims.m, dims.d) / math.sqrt(dims.d),
        gaussian_matrix(prng.child("G_K"), dims.m, dims.d) / math.sqrt(dims.d),
    )
    f = cfg.bench.feature
    return FeatureMapSpec.sara(f, "query", params), FeatureMapSpec.sara(f, "key", params), X, V


def _time_engine(engine_fn, args, kwargs, warmup: int, repeats: int) -> tuple[int, int]:
    for _ in range(warmup):
        engine_fn(*args, **kwargs)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        engine_fn(*args, **kwargs)
        times.append(time.perf_counter_ns() - t0)
    flops = engine_fn(*args, **kwargs, profile=True).flops.total
    return max(1, int(np.median(times))), flops


def crossover(records: list[BenchRecord]) -> int | None:
    """Smallest N at which the linear engine is faster than the quadratic one."""
    by = {(r.engine, r.N): r.wall_time_ns for r in records}
    for N in sorted({r.N for r in records}):
        if ("linear", N) in by and ("quadratic", N) in by and by["linear", N] < by["quadratic", N]:
            return N
    return None


def run_bench(cfg: RunConfig, write: bool = True) -> list[BenchRecord]:
    b = cfg.bench
    if not b.grid:
        raise ValueError("sweep grid must be nonempty")
    engines = {"quadratic": kernel_attention_quadratic, "linear": kernel_attention_linear}
    names = list(engines) if b.engine == "both" else [b.engine]
    grid = sorted(set(b.grid))
    records: list[BenchRecord] = []
    with _thread_limit(b.parallel):
        i = 0
        while i < len(grid):
            N = grid[i]
            phi_q, phi_k, X, V = bench_inputs(cfg, N)
            for name in names:
                wall, flops = _time_engine(
                    engines[name], (phi_q, phi_k, X, X, V), {"stabilizer": b.stabilizer}, b.warmup, b.repeats
                )
                records.append(BenchRecord(name, N, N, cfg.dims.m, wall, b.repeats, flops))
                log.info("%s N=%d median %.3f ms", name, N, wall / 1e6)
            i += 1
            if (
                i == len(grid)
                and b.engine == "both"
                and b.extend_to_crossover
                and crossover(records) is None
                and 2 * N <= b.max_len
            ):
                grid.append(2 * N)
    if write:
        out = _out_dir(cfg, "bench")
        _write_csv(
            out / "bench.csv",
            ["engine", "N", "M", "m", "wall_time_ns", "repeats", "flops"],
            [(r.engine, r.N, r.M, r.m, r.wall_time_ns, r.repeats, r.flops) for r in records],
        )
        _write_json(out / "summary.json", {"crossover_N": crossover(records), "records": len(records)})
    return records


# --- uptrain ----------------------------------------------------------------


def distillation_config(cfg: RunConfig) -> DistillationConfig:
    return DistillationConfig(**asdict(cfg.uptrain.distillation), seed=cfg.seed)


def run_uptrain(cfg: RunConfig, write: bool = True) -> dict:
    u = cfg.uptrain
    dcfg = distillation_config(cfg)
    rng = SeededRng(cfg.seed).child("uptrain")
    layer = random_teacher(rng.child("teacher"), u.d, scale=u.teacher_scale)
    data = SyntheticTokens(rng.child("data"), u.n_tokens, u.d, dcfg.batch, resample=u.resample)
    history = uptrain(dcfg, layer, data)
    summary = {
        "steps": dcfg.steps,
        "initial_loss": history.loss[0],
        "final_loss": history.loss[-1],
        "loss_ratio": history.loss[-1] / history.loss[0] if history.loss[0] > 0 else 0.0,
        "passed": history.loss[-1] <= history.loss[0],
    }
    if write:
        out = _out_dir(cfg, "uptrain")
        _write_csv(
            out / "history.csv",
            ["step", "loss", "grad_norm"],
            [(i, l, g) for i, (l, g) in enumerate(zip(history.loss, history.grad_norm))],
        )
        A = dcfg.A if dcfg.init == "theorem_construction" else None
        save_sara_params(out / "params", history.final_params, dcfg.f, A)
        _write_json(out / "summary.json", summary)
    summary["history"] = history
    return summary


# --- demo -------------------------------------------------------------------


def demo_kernels(cfg: RunConfig, scene) -> dict[str, KernelSpec]:
    c = cfg.demo
    rng = SeededRng(cfg.seed).child("demo/projections")
    kernels = {
        "relu": KernelSpec.symmetric(FeatureMapSpec.elementwise("relu", c.d)),
        "exp": KernelSpec.symmetric(FeatureMapSpec.elementwise("exp", c.d)),
    }
    for m in c.random_ms:
        G = gaussian_matrix(rng.child(f"G{m}"), m, c.d)
        kernels[f"relu_gaussian_m{m}"] = KernelSpec.symmetric(FeatureMapSpec.randomized("relu", G))
        kernels[f"exp_gaussian_m{m}"] = KernelSpec.symmetric(FeatureMapSpec.randomized("exp", G))
    dcfg = DistillationConfig(
        f=c.distill_f, m=c.d, init="teacher_projections", loss="row_kl",
        learning_rate=c.distill_lr, steps=c.distill_steps, batch=1, seed=cfg.seed,
    )
    kernels["sara"] = distill_scene(scene, dcfg)
    return kernels


def run_demo(cfg: RunConfig, write: bool = True) -> dict:
    c = cfg.demo
    scene = synthetic_scene(
        SeededRng(cfg.seed).child("demo/scene"), n_patches=c.n_patches, n_targets=c.n_targets,
        d=c.d, d_action=c.d_action, n_clusters=c.n_clusters, radius=c.radius,
    )
    reports = compare_kernels(scene, demo_kernels(cfg, scene))
    summary = {
        name: {"mean_tv": r.mean_tv, "argmax_rate": r.argmax_rate, "mean_entropy_gap": r.mean_entropy_gap}
        for name, r in reports.items()
    }
    checks = {
        "sara_mean_tv_le_0.05": reports["sara"].mean_tv <= 0.05,
        "sara_argmax_all": reports["sara"].argmax_rate == 1.0,
        "relu_flatter": reports["relu"].mean_entropy_gap > 0,
    }
    result = {"kernels": summary, "checks": checks, "passed": all(checks.values())}
    if write:
        out = _out_dir(cfg, "demo")
        rows = []
        for name, r in reports.items():
            for i in range(len(r.tv_distance)):
                rows.append((name, i, float(r.tv_distance[i]), bool(r.argmax_agree[i]), float(r.entropy_gap[i])))
        _write_csv(out / "agreement.csv", ["kernel", "target", "tv_distance", "argmax_agree", "entropy_gap"], rows)
        _write_json(out / "summary.json", result)
    return result
