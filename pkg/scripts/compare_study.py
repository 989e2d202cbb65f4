"""Coverage of 95% aggregate-reserve intervals, DGM against the ODP bootstrap, on DGM-generated panels.

    python3 scripts/compare_study.py --replicates 20 --out results/compare
"""
import argparse
from pathlib import Path

import numpy as np
import pandas as pd

from dgmreserve import DgmParams, ModelSpec, RunConfig, run_chains, simulate_panel
from dgmreserve.odp import histogram_export, odp_panel
from dgmreserve.predict import predictive_draws, true_reserves, value_at_risk


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=8)
    ap.add_argument("--K", type=int, default=5)
    ap.add_argument("--gamma-scale", type=float, default=1.0, help="multiplies gamma = (1, 4, 6, 2, ...)")
    ap.add_argument("--replicates", type=int, default=20)
    ap.add_argument("--burn-in", type=int, default=3000)
    ap.add_argument("--keep", type=int, default=2000)
    ap.add_argument("--bootstrap", type=int, default=2000)
    ap.add_argument("--out", type=Path, default=Path("results/compare"))
    args = ap.parse_args()

    n, K = args.n, args.K
    gamma = np.resize([1.0, 4.0, 6.0, 2.0], n) * args.gamma_scale
    params = DgmParams(alpha=np.tile(2.0 * np.arange(1, K + 1), (n, 1)), beta=np.ones((n, K)),
                       gamma=np.tile(gamma[:, None], (1, K)))
    spec = ModelSpec(p=1, a_alpha0=2, b_alpha0=1, a_beta0=2, b_beta0=2, a_gamma0=3, b_gamma0=1)
    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for r in range(args.replicates):
        panel, _ = simulate_panel(params, 1, np.random.default_rng(500 + r))
        truth = true_reserves(panel)["total"]
        samples = run_chains(panel, spec, RunConfig(chains=2, burn_in=args.burn_in, keep=args.keep, seed=r))
        dgm = predictive_draws(samples, panel, rng=np.random.default_rng(r)).total
        odp = odp_panel(panel, args.bootstrap, np.random.default_rng(r))[0]["total"]
        row = {"replicate": r, "truth": truth}
        for name, x in (("dgm", dgm), ("odp", odp)):
            lo, hi = value_at_risk(x, 0.025), value_at_risk(x, 0.975)
            row.update({f"{name}_median": np.median(x), f"{name}_lower": lo, f"{name}_upper": hi,
                        f"{name}_covers": lo <= truth <= hi})
        rows.append(row)
        print(f"replicate {r}: truth {truth:.1f}  dgm [{row['dgm_lower']:.1f}, {row['dgm_upper']:.1f}]  "
              f"odp [{row['odp_lower']:.1f}, {row['odp_upper']:.1f}]", flush=True)
        if r == 0:
            histogram_export(dgm, odp, truth=truth).to_csv(args.out / "histogram_rep0.csv", index=False)
    table = pd.DataFrame(rows)
    table.to_csv(args.out / "coverage.csv", index=False)
    print(f"\ncoverage: DGM {table['dgm_covers'].sum()}/{len(table)}, ODP {table['odp_covers'].sum()}/{len(table)}")


if __name__ == "__main__":
    main()
