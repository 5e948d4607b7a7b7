import numpy as np
from scipy import stats


def variance_interval(true_var, n, level=0.997):
    """Range that the unbiased sample variance of n Gaussian draws falls in
    with the given probability."""
    lo, hi = stats.chi2.ppf([(1 - level) / 2, (1 + level) / 2], n - 1)
    return true_var * lo / (n - 1), true_var * hi / (n - 1)


def in_variance_interval(sample, true_var, level=0.997):
    lo, hi = variance_interval(true_var, len(sample), level)
    v = float(np.var(sample, ddof=1))
    return lo <= v <= hi, v, (lo, hi)
