"""Two-group Gaussian examples where the mean-optimal, marginal-median-optimal
and median-optimal (ACME) policies disagree.

Group G2 has a treated arm that is a mixture with a far-right bump. That bump
pulls the treated mean above the control mean, while the treated median sits
well below. Case II shifts a few parameters so that the marginal-median policy
changes its mind on G2 and the ACME policy does not.

Run: python3 demos/01_mean_vs_median_policies.py
"""
from acme_otr import acme_value, case_one, case_two, marginal_median_value, mean_value, optimal_policies

for name, model in (("Case I", case_one()), ("Case II", case_two())):
    table = optimal_policies(model)
    print(f"\n{name}")
    for label in model.labels:
        meds = ", ".join(f"m{a}={model.median(label, a):+.4f}" for a in (0, 1))
        print(f"  {label}: {meds}")
    print(f"  {'policy':<6}{'decisions':>12}{'mean':>10}{'ACME':>10}{'marg. median':>14}")
    for kind in ("mean", "mme", "acme"):
        d = getattr(table, kind)
        print(f"  {kind.upper():<6}{str(d):>12}{mean_value(model, d):>10.4f}"
              f"{acme_value(model, d):>10.4f}{marginal_median_value(model, d):>14.4f}")
