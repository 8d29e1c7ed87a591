"""Reference Welch t-test results for random sample pairs.

Uses scipy.stats.ttest_ind(equal_var=False).
"""
import json
import sys

import numpy as np
from scipy import stats

rng = np.random.default_rng(20240601)
cases = []
for _ in range(100):
    na, nb = rng.integers(2, 40, size=2)
    a = rng.normal(rng.uniform(0, 1), rng.uniform(0.01, 0.5), size=na)
    b = rng.normal(rng.uniform(0, 1), rng.uniform(0.01, 0.5), size=nb)
    r = stats.ttest_ind(a, b, equal_var=False)
    cases.append(
        {"a": a.tolist(), "b": b.tolist(), "t": float(r.statistic), "df": float(r.df), "p": float(r.pvalue)}
    )
json.dump({"cases": cases}, open(sys.argv[1], "w"))
