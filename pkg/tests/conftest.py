import numpy as np


def holdout_constant(num, den, n_fit=5, slack=0.1):
    """Fit ``c`` as the largest ratio ``num/den`` on the first ``n_fit`` pairs and
    return ``(c, ok)`` where ``ok`` means no later pair exceeds ``c`` by more than ``slack``."""
    ratio = np.asarray(num, float) / np.asarray(den, float)
    c = float(ratio[:n_fit].max())
    return c, bool(np.all(ratio[n_fit:] <= (1 + slack) * c))
