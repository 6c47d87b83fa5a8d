"""RMSE of the plug-in and doubly robust estimators as nuisance error shrinks.

Nuisances are the truth plus noise of size n^-alpha. The plug-in error tracks
the nuisance error one for one, while the doubly robust error depends on
products of nuisance errors and so falls twice as fast in alpha, until it
reaches the sampling floor sqrt(bound / n). At very slow rates the DR estimate
is worse: the density noise can push f-hat down to its floor, and dividing by it
produces rare huge errors.

Writes a tidy CSV (n, alpha, estimator, rmse, ...) that any plotting tool can read.

Run: python3 demos/03_rmse_vs_nuisance_rate.py [reps] [out.csv]
"""
import math
import sys

from acme_otr import LognormalDgp, ThresholdRule, analytic_variance_bound, rmse_experiment

reps = int(sys.argv[1]) if len(sys.argv) > 1 else 200
out = sys.argv[2] if len(sys.argv) > 2 else None

dgp = LognormalDgp()
ns = (100, 1000, 5000)
alphas = (0.1, 0.2, 0.3, 0.4, 0.5)
report = rmse_experiment(dgp, ns=ns, alphas=alphas, reps=reps, seed=0)
bound = analytic_variance_bound(dgp, ThresholdRule(0), n_mc=10 ** 6)

for n in ns:
    print(f"\nn={n}  (sampling floor {math.sqrt(bound / n):.4f})")
    print(f"  {'alpha':>6}{'plug-in':>10}{'DR':>10}")
    for a in alphas:
        print(f"  {a:>6}{report.rmse(n, a, 'plug-in'):>10.4f}{report.rmse(n, a, 'doubly-robust'):>10.4f}")

if out:
    with open(out, "w") as fh:
        fh.write(report.to_csv())
    print(f"\nwrote {out}")
