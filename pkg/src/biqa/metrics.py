"""Evaluation metrics and the differentiable training objective.

Correlations use population (1/n) covariance and variance; the n-convention
cancels in every ratio. Rank correlation handles ties with average ranks
(Spearman) and by dropping tied pairs from the concordance count while
keeping the full n(n-1)/2 denominator (Kendall, tau-a).

The training loss is

    loss = lambda1 * MAE + lambda2 * (1 - PLCC)

with an analytic gradient with respect to the predictions. Inside the loss
the PLCC denominator is guarded by +1e-12 under the square root so constant
early-training predictions stay finite; the evaluation-time plcc() has no
guard and raises DegenerateInput instead.
"""

from dataclasses import dataclass

import numpy as np

from biqa.errors import DegenerateInput, LengthMismatch

_PLCC_GUARD = 1e-12


def _vector(v, name):
    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def _pair(y, yhat, min_n=2):
    a, b = _vector(y, "y"), _vector(yhat, "yhat")
    if a.size != b.size:
        raise LengthMismatch(f"lengths differ: {a.size} vs {b.size}")
    if a.size < min_n:
        raise LengthMismatch(f"need at least {min_n} samples, got {a.size}")
    return a, b


def _is_constant(v):
    return v.min() == v.max()


def plcc(y, yhat):
    """Pearson linear correlation, clamped to [-1, 1] against rounding."""
    a, b = _pair(y, yhat)
    if _is_constant(a) or _is_constant(b):
        raise DegenerateInput("correlation undefined for a constant vector")
    da, db = a - a.mean(), b - b.mean()
    r = (da * db).mean() / np.sqrt(da.var() * db.var())
    return float(min(1.0, max(-1.0, r)))


def average_ranks(v):
    """1-based ranks with ties replaced by the mean rank of the tied group."""
    v = np.asarray(v, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def srocc(y, yhat):
    """Spearman rank correlation: Pearson correlation of the rank vectors.

    Equals 1 - 6*sum(D^2)/(n(n^2-1)) whenever both vectors are tie-free.
    """
    a, b = _pair(y, yhat)
    if _is_constant(a) or _is_constant(b):
        raise DegenerateInput("rank correlation undefined for a constant vector")
    return plcc(average_ranks(a), average_ranks(b))


def krocc(y, yhat):
    """Kendall rank correlation: 2(concordant - discordant)/(n(n-1)).

    Pairs tied in either vector count as neither concordant nor discordant.
    """
    a, b = _pair(y, yhat)
    sa = np.sign(a[:, None] - a[None, :])
    sb = np.sign(b[:, None] - b[None, :])
    prod = sa * sb
    iu = np.triu_indices(a.size, k=1)
    upper = prod[iu]
    if not np.any(upper):
        raise DegenerateInput("every pair is tied in one of the vectors")
    p = upper.sum()
    n = a.size
    return float(2.0 * p / (n * (n - 1)))


def mae(y, yhat):
    a, b = _pair(y, yhat, min_n=1)
    return float(np.abs(a - b).mean())


def rmse(y, yhat):
    a, b = _pair(y, yhat, min_n=1)
    return float(np.sqrt(((a - b) ** 2).mean()))


@dataclass
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 10.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or (self.lambda1 == 0 and self.lambda2 == 0):
            raise ValueError("loss weights must be nonnegative and not both zero")


def combined_loss(y, yhat, cfg=None):
    """Weighted MAE plus correlation penalty; returns (loss, d loss / d yhat).

    The MAE subgradient at yhat_i == y_i is 0. The correlation term stays
    finite for constant predictions thanks to the guarded denominator.
    """
    cfg = cfg or LossConfig()
    a, b = _pair(y, yhat)
    if _is_constant(a):
        raise DegenerateInput("loss undefined for constant ground truth")
    n = a.size

    diff = b - a
    mae_val = np.abs(diff).mean()
    g_mae = np.sign(diff) / n

    da, db = a - a.mean(), b - b.mean()
    cov = (da * db).mean()
    var_a, var_b = da.var(), db.var()
    denom = np.sqrt(var_a * var_b + _PLCC_GUARD)
    r = cov / denom
    # d r / d yhat_i = (1/n) * (da_i / denom - r * var_a * db_i / denom^2... )
    g_r = (da / denom - cov * var_a * db / denom**3) / n

    loss = cfg.lambda1 * mae_val + cfg.lambda2 * (1.0 - r)
    grad = cfg.lambda1 * g_mae - cfg.lambda2 * g_r
    return float(loss), grad


@dataclass
class MetricsReport:
    """Correlations are None when the inputs were degenerate (e.g. a constant
    prediction vector); the error metrics are always present."""

    n: int
    plcc: float | None
    srocc: float | None
    krocc: float | None
    mae: float
    rmse: float

    def to_text(self):
        def fmt(v):
            return "n/a (degenerate)" if v is None else f"{v:.6f}"

        return (
            f"n      {self.n}\n"
            f"plcc   {fmt(self.plcc)}\n"
            f"srocc  {fmt(self.srocc)}\n"
            f"krocc  {fmt(self.krocc)}\n"
            f"mae    {self.mae:.6f}\n"
            f"rmse   {self.rmse:.6f}"
        )

    def to_csv(self):
        def num(v):
            return "nan" if v is None else repr(float(v))

        return (
            "n,plcc,srocc,krocc,mae,rmse\n"
            f"{self.n},{num(self.plcc)},{num(self.srocc)},{num(self.krocc)},"
            f"{repr(self.mae)},{repr(self.rmse)}"
        )


def compute_report(y, yhat):
    """Full metric set over a truth/prediction pair, degeneracy-tolerant."""
    a, b = _pair(y, yhat, min_n=1)
    vals = {}
    for name, fn in (("plcc", plcc), ("srocc", srocc), ("krocc", krocc)):
        try:
            vals[name] = fn(a, b)
        except (DegenerateInput, LengthMismatch):
            vals[name] = None
    return MetricsReport(n=a.size, mae=mae(a, b), rmse=rmse(a, b), **vals)
