#!/usr/bin/env python3
"""Utility-privacy trade-off sweep.

For each noise level epsilon this trains the shared model on a fixed seeded
world, measures held-out accuracy, and runs the difference attack against
the uploads, then writes one CSV row per epsilon.

  python3 scripts/sweep_epsilon.py
  python3 scripts/sweep_epsilon.py --epsilons inf,100,10,1,0.1 --out sweep.csv
"""

import argparse
import csv
import math
import sys
from dataclasses import replace

from fedtte import data, harness, model, privacy
from fedtte.federated import FederatedConfig


def parse_epsilons(text: str) -> list[float]:
    out = []
    for token in text.split(","):
        value = float(token.strip())
        if not value > 0:
            raise ValueError(f"epsilon must be > 0, got {token!r}")
        out.append(value)
    if len(set(out)) < 2:
        raise ValueError("need at least two distinct epsilons to sweep")
    return out


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epsilons", type=parse_epsilons, default=(math.inf, 100.0, 10.0, 1.0, 0.1))
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--attack-seeds", type=int, default=20)
    ap.add_argument("--k", type=int, default=10, help="edges the attacker names per client")
    ap.add_argument("--out", type=str, default=None, help="CSV destination (default stdout table only)")
    args = ap.parse_args()

    spec = data.WorldSpec(
        grid_rows=3, grid_cols=4, n_drivers=10, trips_per_day=8,
        congestion="flat", obs_sigma_s=0.0, bias_spread_s=0.0, seed=args.seed,
    )
    fed = FederatedConfig(seed=0)
    risk_means, _ = privacy.risk_sweep(
        data.generate_world(spec), args.epsilons,
        fed_config=fed, model_cfg=model.ModelConfig(),
        rounds=3, k=args.k, seeds=range(args.attack_seeds),
    )

    rows = []
    for eps in args.epsilons:
        cfg = harness.ExperimentConfig(
            world=spec,
            model=model.ModelConfig(),
            federated=replace(fed, dp_epsilon=eps),
            days=2,
            eval_days=1,
            max_rounds=30,
        )
        rep = harness.run_experiment(cfg).reports["global"]
        rows.append({
            "epsilon": "inf" if math.isinf(eps) else repr(eps),
            "mae_s": f"{rep.mae:.3f}",
            "rmse_s": f"{rep.rmse:.3f}",
            "mape_pct": f"{rep.mape:.3f}",
            "mean_attack_risk": f"{risk_means[eps]:.4f}",
        })
        print(f"eps={rows[-1]['epsilon']:>6}  MAE {rep.mae:>14.2f} s  attack risk {risk_means[eps]:.3f}")

    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
        print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
