"""Command-line entry point: ``dgmreserve <command> [flags]``.

Every command writes ``manifest.json`` (resolved configuration, seed and
library versions) into its output directory before doing any work.  Exit
codes: 0 success, 2 input or configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import platform
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np
import pandas as pd

from . import odp as odp_mod
from . import predict as pr
from .gibbs import NumericalError, PosteriorSamples, diagnostics_table, run_chains
from .model import DgmParams, benchmark_params, identifiable_params, simulate_panel
from .triangles import (InputError, ModelSpec, RunConfig, apply_transform, floor_zeros, load_panel,
                        model_spec_from_config, read_config, run_config_from_config, schema_from_config,
                        write_panel)

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
PRESETS = ("paper-4.1",)


# --- configuration ----------------------------------------------------------------

def _resolve(args) -> dict:
    """Config file values overridden by explicit flags."""
    cfg = read_config(args.config) if args.config else {}
    for flag in ("seed", "chains", "burn_in", "keep", "thin", "p", "threads"):
        value = getattr(args, flag, None)
        if value is not None:
            cfg[flag] = str(value)
    return cfg


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("dgmreserve", "numpy", "scipy", "numba", "pandas"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = "unknown"
    return out


def _write_manifest(out: Path, command: str, args, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    manifest = {"command": command, "config": cfg, "flags": flags, "seed": cfg.get("seed"),
                "versions": _versions(), "created": datetime.now(timezone.utc).isoformat()}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _model_panel(path, cfg: dict, spec: ModelSpec):
    panel = load_panel(path, schema_from_config(cfg))
    if spec.transform.enabled:
        panel = apply_transform(panel, spec.transform)
    return floor_zeros(panel)


def _seed(cfg, default=0) -> int:
    return int(float(cfg.get("seed", default)))


def _floats(cfg, key, default):
    raw = cfg.get(key)
    if raw is None:
        return default
    try:
        return [float(v) for v in str(raw).split(",") if v.strip()]
    except ValueError:
        raise InputError(f"{key}: expected a comma-separated list of numbers, got {raw!r}") from None


# --- commands -----------------------------------------------------------------------

def cmd_simulate(args, cfg, out: Path):
    spec = model_spec_from_config(cfg)
    preset = args.preset or cfg.get("preset")
    if preset is not None and preset not in PRESETS:
        raise InputError(f"unknown preset {preset!r}")
    if preset == "paper-4.1":
        params, p = benchmark_params(), 1
    else:
        if "n" not in cfg or "K" not in cfg:
            raise InputError("simulate needs --preset paper-4.1 or n, K, alpha, beta, gamma in the config")
        n, K = int(cfg["n"]), int(cfg["K"])
        alpha = np.tile(_floats(cfg, "alpha", [1.0] * K), (n, 1)) if "alpha" in cfg else np.ones((n, K))
        gamma = _floats(cfg, "gamma", [1.0] * n)
        if len(gamma) != n or alpha.shape != (n, K):
            raise InputError("alpha needs K values and gamma needs n values")
        beta = _floats(cfg, "beta", [1.0])
        params = DgmParams(alpha=alpha, beta=np.resize(beta, n)[:, None] * np.ones((n, K)),
                           gamma=np.array(gamma)[:, None] * np.ones((n, K)))
        p = spec.p
        spec.check_depth(params.n)
    rng = np.random.default_rng(_seed(cfg))
    panel, z = simulate_panel(params, p, rng)
    write_panel(panel, out / "panel.csv", extra={"z": z})
    report = identifiable_params(params, p)
    rows = []
    for name, arr in (("alpha", params.alpha), ("beta", params.beta), ("gamma", params.gamma),
                      ("alpha_star", report.alpha_star), ("pi_star", report.pi_star)):
        for pos in np.ndindex(*arr.shape):
            rows.append((name, ",".join(str(v + 1) for v in pos), float(arr[pos])))
    for s, arr in report.corr.items():
        for pos in np.ndindex(*arr.shape):
            rows.append((f"rho_lag{s}", ",".join(str(v + 1) for v in pos), float(arr[pos])))
    for name, value in pr.true_reserves(panel).items():
        rows.append(("reserve", name, value))
    pd.DataFrame(rows, columns=["quantity", "index", "value"]).to_csv(out / "truth.csv", index=False)
    print(f"wrote {out / 'panel.csv'} and {out / 'truth.csv'} (n={params.n}, K={params.K}, p={p})")


def cmd_fit(args, cfg, out: Path):
    spec, run = model_spec_from_config(cfg), run_config_from_config(cfg)
    panel = _model_panel(_need(args.data, "--data"), cfg, spec)
    samples = run_chains(panel, spec, run)
    samples.save(out / "samples")
    diag = diagnostics_table(samples)
    diag.to_csv(out / "diagnostics.csv", index=False)
    worst = diag["psrf"].max()
    print(f"fit {run.chains} chain(s) x {run.keep} draws in {samples.meta['wall_time']:.1f}s; "
          f"max psrf {worst:.3f}; samples in {out / 'samples'}")


def _load_fit(args, cfg):
    samples = PosteriorSamples.load(_need(args.samples, "--samples"))
    panel = _model_panel(_need(args.data, "--data"), cfg, samples.spec)
    return samples, panel


def cmd_predict(args, cfg, out: Path):
    samples, panel = _load_fit(args, cfg)
    rng = np.random.default_rng(_seed(cfg, samples.run.seed))
    draws = pr.predictive_draws(samples, panel, scale=args.scale, rng=rng)
    # per-cell predictive median and 95% interval, the data behind fan plots
    rows = []
    for i, j, k in zip(*np.nonzero(draws.target)):
        x = draws.cells[:, i, j, k]
        rows.append({"business_id": panel.business_ids[k], "origin_year": panel.origin_labels[i],
                     "dev_year": panel.dev_labels[j], "median": pr.value_at_risk(x, 0.5), "mean": x.mean(),
                     "lower": pr.value_at_risk(x, 0.025), "upper": pr.value_at_risk(x, 0.975)})
    pd.DataFrame(rows).to_csv(out / "predictive_cells.csv", index=False)
    pr.write_meta(out / "predictive_cells.csv", {"scale": args.scale, **draws.meta})
    if args.cells:
        pr.cells_to_csv(draws, out / "predictive_draws.csv")
    pr.aggregate_draws_to_csv(draws.aggregates(), out / "reserve_draws.csv", {"scale": args.scale, "model": "dgm"})
    print(f"wrote predictive summaries for {len(rows)} cells to {out}")


def cmd_reserves(args, cfg, out: Path):
    samples, panel = _load_fit(args, cfg)
    rng = np.random.default_rng(_seed(cfg, samples.run.seed))
    draws = pr.predictive_draws(samples, panel, scale=args.scale, rng=rng)
    summary = pr.reserve_summary(draws)
    summary.meta["model"] = "dgm"
    summary.to_csv(out / "reserves.csv")
    pr.aggregate_draws_to_csv(draws.aggregates(), out / "reserve_draws.csv", {"scale": args.scale, "model": "dgm"})
    print(summary.wide().loc[["total"]].to_string())


def grid_from_config(cfg: dict, spec: ModelSpec) -> list:
    ps = [int(v) for v in _floats(cfg, "grid_p", list(range(6)))]
    alphas = _floats(cfg, "grid_alpha", [1.0, 10.0])
    betas = _floats(cfg, "grid_beta", [1.0, 10.0])
    gammas = _floats(cfg, "grid_gamma", [10.0])
    if not ps or not alphas or not betas or len(gammas) != 1:
        raise InputError("malformed grid: grid_p, grid_alpha, grid_beta need values and grid_gamma exactly one")
    return pr.prior_grid(ps, alphas, betas, gammas[0], transform=spec.transform)


def cmd_select(args, cfg, out: Path):
    spec, run = model_spec_from_config(cfg), run_config_from_config(cfg)
    panel = _model_panel(_need(args.data, "--data"), cfg, spec)
    grid = grid_from_config(cfg, spec)
    for s in grid:
        s.check_depth(panel.n)
    nu = float(cfg.get("nu", 0.5))
    table = pr.model_grid_run(panel, grid, run, nu=nu,
                              progress=lambda m, total, row: print(f"model {m}/{total}: DIC {row['DIC']:.2f}",
                                                                   file=sys.stderr))
    table.to_csv(out / "model_grid.csv", index=False)
    pr.write_meta(out / "model_grid.csv", {"nu": nu, "run": asdict(run), "L_in_normaliser": "K n (n+1) / 2",
                                           "L_out_normaliser": "K n (n-1) / 2", "scale": "model (transformed)"})
    print(table.head(5).to_string(index=False))


def cmd_odp(args, cfg, out: Path):
    panel = load_panel(_need(args.data, "--data"), schema_from_config(cfg))
    B = int(cfg.get("bootstrap", 1000))
    draws, meta = odp_mod.odp_panel(panel, B, np.random.default_rng(_seed(cfg)))
    summary = pr.reserve_summary(draws)
    summary.scale = "original"
    summary.meta.update(model="odp", bootstrap=B, businesses=meta)
    summary.to_csv(out / "reserves.csv")
    pr.aggregate_draws_to_csv(draws, out / "reserve_draws.csv", {"scale": "original", "model": "odp"})
    print(summary.wide().loc[["total"]].to_string())


def cmd_compare(args, cfg, out: Path):
    dgm = pr.ReserveSummary.from_csv(_need(args.dgm, "--dgm"))
    base = pr.ReserveSummary.from_csv(_need(args.odp, "--odp"))
    truth = None
    if args.data:
        panel = load_panel(args.data, schema_from_config(cfg))
        if panel.has_truth:
            spec = model_spec_from_config(cfg)
            if dgm.scale == "transformed":
                panel = apply_transform(panel, spec.transform)
            truth = pr.true_reserves(panel, scale=dgm.scale)
    table = odp_mod.compare_models(dgm, base, truth)
    table.to_csv(out / "comparison.csv", index=False)
    table[table["aggregate"].str.startswith("origin/")].to_csv(out / "per_origin.csv", index=False)
    pr.write_meta(out / "comparison.csv", {"scale": dgm.scale, "difference": "dgm minus odp"})
    draws = [Path(p).parent / "reserve_draws.csv" for p in (args.dgm, args.odp)]
    if all(p.exists() for p in draws):
        d, o = (pd.read_csv(p) for p in draws)
        hist = odp_mod.histogram_export(d["total"], o["total"], bins=int(cfg.get("bins", 50)),
                                        truth=None if truth is None else truth["total"])
        hist.to_csv(out / "histogram.csv", index=False)
    print(table[table["aggregate"] == "total"].to_string(index=False))


def cmd_diagnose(args, cfg, out: Path):
    samples = PosteriorSamples.load(_need(args.samples, "--samples"))
    table = diagnostics_table(samples, level=float(cfg.get("hpd_level", 0.9)))
    table.to_csv(out / "diagnostics.csv", index=False)
    extra = {}
    if args.data:
        panel = _model_panel(args.data, cfg, samples.spec)
        extra = pr.dic_components(samples, panel)
    summary = {"max_psrf": float(table["psrf"].max()), "parameters": len(table),
               "deviance_mean": float(samples.deviance.mean()), **extra}
    (out / "diagnostics.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(json.dumps(summary, indent=2, sort_keys=True))


def _need(value, flag):
    if value is None:
        raise InputError(f"{flag} is required for this command")
    if not Path(value).exists():
        raise InputError(f"no such file or directory: {value}")
    return value


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "predict": cmd_predict, "reserves": cmd_reserves,
            "select": cmd_select, "odp": cmd_odp, "compare": cmd_compare, "diagnose": cmd_diagnose}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgmreserve", description="Dependent gamma model claims reserving")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path)
        p.add_argument("--data", type=Path, help="long-format panel CSV")
        p.add_argument("--out", type=Path, default=Path("out"))
        p.add_argument("--seed", type=int)
        p.add_argument("--chains", type=int)
        p.add_argument("--burn-in", dest="burn_in", type=int)
        p.add_argument("--keep", type=int)
        p.add_argument("--thin", type=int)
        p.add_argument("--p", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--scale", choices=pr.SCALES, default="original")
        p.add_argument("--preset", choices=PRESETS)
        p.add_argument("--samples", type=Path, help="samples directory written by fit")
        p.add_argument("--dgm", type=Path, help="DGM reserves.csv (compare)")
        p.add_argument("--odp", type=Path, help="ODP reserves.csv (compare)")
        p.add_argument("--cells", action="store_true", help="also write every predictive cell draw")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve(args)
        _write_manifest(args.out, args.command, args, cfg)
        COMMANDS[args.command](args, cfg, args.out)
    except (InputError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalError, ArithmeticError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
