"""Command-line entry point.

Subcommands: schedule (build/transform noise schedules), train, sample,
eval, verify (analytic harnesses), experiment (end-to-end synthetic runs).

Exit codes: 0 success, 1 verification-suite failure, 2 validation failure,
3 estimator failure, 4 checkpoint/schedule mismatch, 130 interrupted.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import analysis, engine, families as fam, nnet, schedule as sched, tail as tailmod
from .errors import (CheckpointMismatchError, ConfigError, EstimatorError,
                     SsdiffError)
from .utils import atomic_write_text, git_describe, sha256_of, spawn_rng

EXIT_OK = 0
EXIT_SUITE_FAILURE = 1
EXIT_VALIDATION = 2
EXIT_ESTIMATOR = 3
EXIT_MISMATCH = 4


def _stamp(payload: dict, config_like) -> dict:
    payload = dict(payload)
    payload["config_hash"] = sha256_of(config_like)
    payload["git_describe"] = git_describe()
    return payload


def _parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} must look like key=value")
        key, value = pair.split("=", 1)
        out[key] = value
    return out


def _load_config(path: str, overrides) -> engine.ExperimentConfig:
    with open(path) as fh:
        cfg = engine.ExperimentConfig.from_dict(json.load(fh))
    ov = _parse_overrides(overrides)
    return cfg.apply_overrides(ov) if ov else cfg


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_schedule(args) -> int:
    spec = fam.FamilySpec(fam.Family(args.family), args.dim)
    if args.T < 1:
        raise ConfigError("T must be positive (field: T)")
    os.makedirs(args.out, exist_ok=True)

    if args.from_cosine:
        if spec.family is not fam.Family.GAUSSIAN:
            raise ConfigError("--from-cosine applies to the gaussian family only")
        schedule = sched.gaussian_schedule_from_cosine(args.T, args.dim)
        table = None
    elif args.match == "cosine":
        dims = fam.intrinsic_dim(spec)
        target = sched.cosine_target_mi(args.T, dims=dims)
        data_sampler = _default_data_sampler(spec)
        cfg = sched.EstimatorConfig(kraskov_samples=args.mi_samples,
                                    dsivi_m=args.mi_samples, rough_m=2000)
        grid = np.exp(np.linspace(np.log(max(target.min(), 1e-6) / 50.0),
                                  np.log(analysis._nu_upper(spec, target.max())),
                                  args.grid_points))
        freq = np.full(spec.dim, 1.0 / spec.dim) \
            if spec.family is fam.Family.CATEGORICAL else None
        table = sched.build_mi_table(spec, grid, data_sampler,
                                     master_seed=args.seed, config=cfg,
                                     frequencies=freq)
        schedule = sched.match_schedule(table, target, spec)
    else:
        raise ConfigError("pick --from-cosine or --match cosine")

    meta = {"family": args.family, "dim": args.dim, "T": args.T, "seed": args.seed}
    payload = _stamp(schedule.to_dict(), meta)
    atomic_write_text(os.path.join(args.out, "schedule.json"),
                      json.dumps(payload, indent=1))
    if table is not None:
        atomic_write_text(os.path.join(args.out, "mi_table.csv"), table.to_csv())
    print(f"wrote schedule.json (T={args.T}, {schedule.provenance}) to {args.out}")
    return EXIT_OK


def _default_data_sampler(spec: fam.FamilySpec):
    """Reference data law used when matching a schedule without a dataset."""
    f = spec.family
    if f is fam.Family.BETA:
        def sampler(rng, n):
            comp = rng.random(n) < 0.5
            a = np.where(comp, 8.0, 2.0)
            b = np.where(comp, 2.0, 8.0)
            return rng.beta(a, b)[:, None] if spec.dim == 1 else \
                rng.beta(a[:, None], b[:, None], size=(n, spec.dim))
        return sampler
    if f is fam.Family.DIRICHLET:
        return analysis.dirichlet_mixture_sampler()
    if f is fam.Family.VON_MISES_FISHER:
        return analysis.vmf_mixture_sampler()
    if f is fam.Family.WISHART:
        return analysis.wishart_mixture_sampler()
    if f is fam.Family.GAUSSIAN:
        return lambda rng, n: rng.standard_normal((n, spec.dim))
    if f is fam.Family.GAMMA:
        return lambda rng, n: rng.gamma(4.0, 0.5, size=(n, spec.dim))
    if f is fam.Family.VON_MISES:
        return lambda rng, n: rng.vonmises(0.8, 4.0, size=(n, spec.dim))
    if f is fam.Family.CATEGORICAL:
        def sampler(rng, n):
            idx = rng.integers(0, spec.dim, size=n)
            return np.eye(spec.dim)[idx]
        return sampler
    raise ConfigError(f"no default data law for {f.value}")


def cmd_experiment(args) -> int:
    if args.config:
        config = _load_config(args.config, args.override)
    else:
        config = _default_experiment_config(args.name)
        ov = _parse_overrides(args.override)
        if ov:
            config = config.apply_overrides(ov)
    if args.out:
        config = config.apply_overrides({"output_dir": args.out})
    result = analysis.run_synthetic(config)
    print(json.dumps(result.metrics, indent=1, default=float))
    return EXIT_OK


def _default_experiment_config(name: str) -> engine.ExperimentConfig:
    presets = {
        "dirichlet_simplex": dict(family="dirichlet", dim=3, T=64,
                                  iterations=20_000, lr=4e-4, ema_decay=0.999),
        "wishart_pd": dict(family="wishart", dim=2, T=64, iterations=16_000,
                           loss_mode="reweighted", lr=4e-4, lr_decay=0.99996,
                           ema_decay=0.999),
        "vmf_sphere": dict(family="von_mises_fisher", dim=3, T=100,
                           iterations=12_000, lr=4e-4, ema_decay=0.999),
        "gaussian_sanity": dict(family="gaussian", dim=1, T=64,
                                iterations=4_000, ema_decay=0.999,
                                schedule_source="analytic_transform"),
        "beta_toyimage": dict(family="beta", dim=64, T=64, iterations=6_000,
                              ema_decay=0.999),
        "categorical_toytext": dict(family="categorical", dim=8, T=32,
                                    iterations=6_000, ema_decay=0.999,
                                    dataset={"length": 16, "persistence": 0.7}),
    }
    if name not in presets:
        raise ConfigError(f"unknown experiment {name!r} "
                          f"(one of {', '.join(analysis.EXPERIMENTS)})")
    return engine.ExperimentConfig(experiment=name,
                                   output_dir=os.path.join("out", name),
                                   **presets[name])


def cmd_train(args) -> int:
    config = _load_config(args.config, args.override)
    if args.out:
        config = config.apply_overrides({"output_dir": args.out})
    result = analysis.run_synthetic(config)
    print(json.dumps(result.metrics, indent=1, default=float))
    return EXIT_OK


def _load_run(run_dir: str):
    with open(os.path.join(run_dir, "schedule.json")) as fh:
        schedule = sched.NoiseSchedule.from_dict(json.load(fh))
    norm_path = os.path.join(run_dir, "normalizer.json")
    normalizer = None
    if os.path.exists(norm_path):
        normalizer = tailmod.TailNormalizer.from_json(open(norm_path).read())
        if normalizer.schedule_hash != schedule.content_hash():
            raise CheckpointMismatchError("normalizer was fitted on a different schedule")
    net, opt, meta = engine.load_checkpoint(
        os.path.join(run_dir, "checkpoint.npz"),
        expect_schedule_hash=schedule.content_hash(),
        expect_normalizer_hash=None if normalizer is None
        else normalizer.content_hash())
    config = engine.ExperimentConfig.from_dict(meta["config"])
    return config, schedule, normalizer, net, opt


def cmd_sample(args) -> int:
    config, schedule, normalizer, net, opt = _load_run(args.run)
    spec = fam.FamilySpec(fam.Family(config.family), config.dim)
    rng = spawn_rng(args.seed, 7)
    freq = np.full(spec.dim, 1.0 / spec.dim) \
        if spec.family is fam.Family.CATEGORICAL else None
    seq_len = int(config.dataset.get("length", 0)) or None \
        if spec.family is fam.Family.CATEGORICAL else None
    predictor = engine.net_predictor(net, spec, schedule, normalizer,
                                     params=opt.ema)
    if args.steps and args.steps < schedule.T:
        plan = np.unique(np.linspace(1, schedule.T, args.steps).round().astype(int))
        samples = engine.sample_reduced(predictor, spec, schedule, normalizer,
                                        rng, plan, n=args.n, frequencies=freq,
                                        seq_len=seq_len)
    else:
        samples = engine.sample(predictor, spec, schedule, normalizer, rng,
                                n=args.n, frequencies=freq, seq_len=seq_len)
    flat = samples.reshape(samples.shape[0], -1)
    os.makedirs(args.out, exist_ok=True)
    header = ",".join(f"x{i}" for i in range(flat.shape[1]))
    body = "\n".join(",".join(repr(float(v)) for v in row) for row in flat)
    atomic_write_text(os.path.join(args.out, "samples.csv"),
                      header + "\n" + body + "\n")
    meta = _stamp({"n": args.n, "steps": args.steps or schedule.T}, config.to_dict())
    atomic_write_text(os.path.join(args.out, "samples_meta.json"),
                      json.dumps(meta, indent=1))
    print(f"wrote {args.n} samples to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config, schedule, normalizer, net, opt = _load_run(args.run)
    spec = fam.FamilySpec(fam.Family(config.family), config.dim)
    rng = spawn_rng(args.seed, 11)
    _, data_sampler, _, freq = analysis._experiment_setup(config)
    data = data_sampler(rng, args.n)
    predictor = engine.net_predictor(net, spec, schedule, normalizer,
                                     params=opt.ema)
    recon = "categorical_exact" if spec.family is fam.Family.CATEGORICAL \
        else "deterministic"
    ev = engine.elbo(predictor, spec, schedule, normalizer, data,
                     n_mc=args.n_mc, rng=rng, recon=recon, frequencies=freq)
    payload = _stamp({"elbo_nats": ev["elbo_nats"],
                      "bits_per_dim": ev["bits_per_dim"],
                      "recon_dropped": ev["recon_dropped"],
                      "xT_term_dropped": ev["xT_term_dropped"],
                      "n": args.n, "n_mc": args.n_mc}, config.to_dict())
    os.makedirs(args.out, exist_ok=True)
    atomic_write_text(os.path.join(args.out, "metrics.json"),
                      json.dumps(payload, indent=1))
    print(json.dumps(payload, indent=1))
    return EXIT_OK


def cmd_verify(args) -> int:
    suites = args.suite.split(",") if args.suite != "all" else \
        ["equivalence", "sufficiency", "gap", "estimators"]
    report = {}
    failures = []
    rng = spawn_rng(args.seed, 3)

    if "equivalence" in suites:
        abar = sched.cosine_ddpm_schedule(args.T)[1:]
        rep = analysis.gaussian_equivalence_report(abar, n_mc=args.n_mc, rng=rng)
        ok = rep["kl_identity_max_gap"] <= 1e-9 \
            and rep["reverse_moment_max_gap"] <= 1e-9 \
            and rep["forward_max_z"] <= 4.0
        report["equivalence"] = {**rep, "pass": ok}
        if not ok:
            failures.append("equivalence: Gaussian duality identities")

    if "sufficiency" in suites:
        worst = 0.0
        for trial in range(args.stacks):
            trial_rng = spawn_rng(args.seed, 100 + trial)
            qbars = _random_stack(args.D, args.suff_T, trial_rng)
            law = trial_rng.dirichlet(np.ones(args.D))
            worst = max(worst, tailmod.verify_sufficiency(args.D, args.suff_T,
                                                          qbars, law))
        ok = worst <= 1e-10
        report["sufficiency"] = {"max_discrepancy": worst, "pass": ok}
        if not ok:
            failures.append("sufficiency: tail statistic does not screen the tail")

    if "gap" in suites:
        t_list = [int(v) for v in args.gap_T.split(",")]
        gaps = []
        for T in t_list:
            abar_ss = sched.ddpm_to_ss_gaussian(sched.cosine_ddpm_schedule(T)[1:])
            gaps.append(analysis.markov_gap_gaussian(abar_ss).gap)
        ok = all(g > 0 for g in gaps) and all(np.diff(gaps) > 0)
        report["gap"] = {"T": t_list, "gap_nats": gaps, "pass": ok}
        if not ok:
            failures.append("gap: Markov gap must be positive and grow with T")

    if "estimators" in suites:
        n = args.mi_samples
        z = rng.standard_normal((n, 2))
        rho = 0.6
        x = z[:, :1]
        y = rho * x + np.sqrt(1 - rho**2) * z[:, 1:]
        est = sched.mi_kraskov(x, y, k=10)
        ref = -0.5 * np.log(1 - rho**2)
        ok = abs(est - ref) <= 0.05
        report["estimators"] = {"kraskov": est, "analytic": ref, "pass": ok}
        if not ok:
            failures.append("estimators: Kraskov calibration")

    arg_record = {k: v for k, v in vars(args).items() if k != "func"}
    payload = _stamp({"suites": report, "pass": not failures}, arg_record)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        atomic_write_text(os.path.join(args.out, "verify.json"),
                          json.dumps(payload, indent=1, default=float))
    print(json.dumps(payload, indent=1, default=float))
    if failures:
        print("FAILED: " + "; ".join(failures), file=sys.stderr)
        return EXIT_SUITE_FAILURE
    return EXIT_OK


def _random_stack(D: int, T: int, rng) -> list:
    """Random full-support transition stack with deliberate collisions:
    half the time reuse one matrix so distinct tails share statistics."""
    base = rng.dirichlet(np.ones(D) * 2.0, size=D)
    stack = []
    for _ in range(T):
        if rng.random() < 0.5:
            stack.append(base)
        else:
            stack.append(rng.dirichlet(np.ones(D) * 2.0, size=D))
    return stack


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssdiff",
                                     description="star-shaped diffusion toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("schedule", help="build a noise schedule")
    p.add_argument("--family", required=True)
    p.add_argument("--dim", type=int, default=1)
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--from-cosine", action="store_true")
    p.add_argument("--match", choices=["cosine"])
    p.add_argument("--grid-points", type=int, default=64)
    p.add_argument("--mi-samples", type=int, default=20_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out/schedule")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--override", action="append")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample from a finished run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--n", type=int, default=1024)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out/samples")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="evaluate the bound on fresh data")
    p.add_argument("--run", required=True)
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--n-mc", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out/eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run the analytic verification suites")
    p.add_argument("--suite", default="all")
    p.add_argument("--T", type=int, default=100)
    p.add_argument("--n-mc", type=int, default=20_000)
    p.add_argument("--D", type=int, default=3)
    p.add_argument("--suff-T", type=int, default=3)
    p.add_argument("--stacks", type=int, default=5)
    p.add_argument("--gap-T", default="8,16,32,64")
    p.add_argument("--mi-samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("experiment", help="run a named synthetic experiment")
    p.add_argument("--name", required=True)
    p.add_argument("--config")
    p.add_argument("--override", action="append")
    p.add_argument("--out")
    p.set_defaults(func=cmd_experiment)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130
    except ConfigError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except EstimatorError as exc:
        print(f"estimator failure: {exc}", file=sys.stderr)
        return EXIT_ESTIMATOR
    except CheckpointMismatchError as exc:
        print(f"mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except SsdiffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
