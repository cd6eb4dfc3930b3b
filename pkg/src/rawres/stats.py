"""One-way ANOVA and Tukey-Kramer comparisons over repeated-run accuracies.

The F distribution tail comes from a continued-fraction evaluation of the
regularised incomplete beta function.  The studentized range CDF is computed
by two nested Gauss-Legendre quadratures::

    P(Q < q) = integral_0^inf f_s(s) * W(q s) ds
    W(w)     = k * integral phi(z) * [Phi(z) - Phi(z - w)]^(k-1) dz

where ``s`` is the chi-distributed pooled-scale factor with ``df`` degrees of
freedom.
"""

import csv
import functools
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, ndtr

from .resblocks import BLOCK_KINDS

# --- incomplete beta / F tail ------------------------------------------------

_BETA_EPS = 1e-15
_BETA_MAXIT = 10_000


def _beta_cf(a, b, x):
    """Modified Lentz continued fraction for I_x(a, b)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, _BETA_MAXIT + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETA_EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_regularized(a, b, x):
    """I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b


def f_sf(f, df1, df2):
    """Upper tail P(F > f) of the F distribution."""
    if f <= 0:
        return 1.0
    if math.isinf(f):
        return 0.0
    x = df2 / (df2 + df1 * f)
    return betainc_regularized(df2 / 2.0, df1 / 2.0, x)


# --- ANOVA -------------------------------------------------------------------

@dataclass
class AnovaResult:
    F: float
    p: float
    df_between: int
    df_within: int
    ms_within: float
    flags: list = field(default_factory=list)


def _clean_groups(groups):
    arrays = [np.asarray(g, dtype=float) for g in groups]
    if len(arrays) < 2:
        raise ValueError(f"need at least 2 groups, got {len(arrays)}")
    if any(a.size == 0 for a in arrays):
        raise ValueError("empty group")
    n_total = sum(a.size for a in arrays)
    if n_total <= len(arrays):
        raise ValueError(f"need more observations ({n_total}) than groups ({len(arrays)})")
    return arrays


def one_way_anova(groups):
    arrays = _clean_groups(groups)
    k = len(arrays)
    n_total = sum(a.size for a in arrays)
    grand = sum(a.sum() for a in arrays) / n_total
    means = [a.mean() for a in arrays]
    ssb = sum(a.size * (m - grand) ** 2 for a, m in zip(arrays, means))
    ssw = sum(float(np.sum((a - m) ** 2)) for a, m in zip(arrays, means))
    dfb, dfw = k - 1, n_total - k
    msb, msw = ssb / dfb, ssw / dfw
    flags = []
    # relative tolerance so that rounding noise in equal means reads as zero
    scale = max(abs(grand), 1.0)
    if msw <= (1e-24 * scale * scale):
        if ssb <= 1e-24 * scale * scale:
            flags.append("all values identical")
            return AnovaResult(0.0, 1.0, dfb, dfw, 0.0, flags)
        flags.append("zero within-group variance")
        return AnovaResult(math.inf, 0.0, dfb, dfw, 0.0, flags)
    F = float(msb / msw)
    return AnovaResult(F, f_sf(F, dfb, dfw), dfb, dfw, float(msw), flags)


# --- studentized range -------------------------------------------------------

def _gl_panels(lo, hi, panels, order):
    nodes, weights = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(lo, hi, panels + 1)
    half = np.diff(edges) / 2.0
    mid = (edges[:-1] + edges[1:]) / 2.0
    x = (mid[:, None] + half[:, None] * nodes[None, :]).ravel()
    w = (half[:, None] * weights[None, :]).ravel()
    return x, w


# inner: z in [-8.5, 8.5] covers phi(z) to below 1e-15
_Z, _ZW = _gl_panels(-8.5, 8.5, 34, 16)
_PHI_Z = np.exp(-0.5 * _Z * _Z) / math.sqrt(2.0 * math.pi)
_CDF_Z = ndtr(_Z)


def range_cdf(w, k):
    """P(range of k standard normals < w), vectorised over ``w``."""
    w = np.atleast_1d(np.asarray(w, dtype=float))
    inner = np.clip(_CDF_Z[None, :] - ndtr(_Z[None, :] - w[:, None]), 0.0, 1.0)
    vals = k * (_ZW * _PHI_Z * inner ** (k - 1)).sum(axis=1)
    return np.where(w <= 0, 0.0, np.clip(vals, 0.0, 1.0))


def _scale_nodes(df):
    # s = sqrt(chi2_df / df); sd ~ 1/sqrt(2 df) for large df
    spread = 1.0 / math.sqrt(2.0 * df)
    lo = max(0.0, 1.0 - 14.0 * spread)
    hi = 1.0 + 14.0 * spread + (8.0 if df < 5 else 0.0) + (40.0 if df < 2 else 0.0)
    x, w = _gl_panels(lo, hi, 64, 16)
    log_f = (math.log(2.0) + (df / 2.0) * math.log(df / 2.0) - gammaln(df / 2.0)
             + (df - 1.0) * np.log(x) - df * x * x / 2.0)
    return x, w * np.exp(log_f)


def studentized_range_cdf(q, k, df):
    """P(Q < q) for the studentized range with k means and df error degrees
    of freedom (``df=inf`` gives the range of k normals)."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if q <= 0:
        return 0.0
    if math.isinf(df):
        return float(range_cdf(q, k)[0])
    s, ws = _scale_nodes(df)
    return float(np.clip(np.sum(ws * range_cdf(q * s, k)), 0.0, 1.0))


def studentized_range_ppf(p, k, df, tol=1e-10):
    """Quantile of the studentized range by bisection on the CDF."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    lo, hi = 0.0, 1.0
    while studentized_range_cdf(hi, k, df) < p:
        hi *= 2.0
        if hi > 1e6:
            raise ArithmeticError("studentized range quantile out of range")
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if studentized_range_cdf(mid, k, df) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@functools.lru_cache(maxsize=256)
def q_critical(alpha, k, df):
    return studentized_range_ppf(1.0 - alpha, k, df)


# --- Tukey-Kramer ------------------------------------------------------------

@dataclass
class SignificanceMatrix:
    labels: list
    significant: np.ndarray
    F: float
    p: float
    alpha: float
    q_crit: float = float("nan")
    flags: list = field(default_factory=list)
    statistics: np.ndarray = None

    def __post_init__(self):
        self.significant = np.asarray(self.significant, dtype=bool)

    @property
    def k(self):
        return len(self.labels)


def tukey_kramer(groups, alpha=0.05, labels=None):
    """All-pairs Tukey-Kramer test.

    ``groups`` is a sequence of value lists or a mapping label -> values.
    Pair (i, j) is significant iff
    ``|mean_i - mean_j| / sqrt(MSW/2 * (1/n_i + 1/n_j)) >= q_crit``.
    """
    if isinstance(groups, dict):
        labels = list(groups) if labels is None else labels
        groups = [groups[lab] for lab in labels]
    arrays = _clean_groups(groups)
    k = len(arrays)
    labels = list(labels) if labels is not None else [f"G{i + 1}" for i in range(k)]
    anova = one_way_anova(arrays)
    means = np.array([a.mean() for a in arrays])
    sizes = np.array([a.size for a in arrays], dtype=float)
    flags = list(anova.flags)
    sig = np.zeros((k, k), dtype=bool)
    stat = np.zeros((k, k))
    diff = np.abs(means[:, None] - means[None, :])
    scale = max(float(np.max(np.abs(means))), 1.0)
    unequal = diff > 1e-12 * scale
    if anova.ms_within == 0.0:
        if np.any(unequal):
            flags.append("degenerate: zero within-group variance")
        sig = unequal.copy()
        stat = np.where(unequal, np.inf, 0.0)
        qc = float("nan")
    else:
        qc = q_critical(alpha, k, anova.df_within)
        se = np.sqrt(anova.ms_within / 2.0 * (1.0 / sizes[:, None] + 1.0 / sizes[None, :]))
        stat = diff / se
        sig = (stat >= qc) & unequal
    np.fill_diagonal(sig, False)
    return SignificanceMatrix(labels, sig, anova.F, anova.p, alpha, qc, flags, stat)


MATCH_NONE, MATCH_ONE, MATCH_BOTH = "none", "one", "both"


def matching_matrix(a, b):
    """Cellwise agreement of two significance matrices."""
    if list(a.labels) != list(b.labels):
        raise ValueError(f"label ordering mismatch: {a.labels} vs {b.labels}")
    count = a.significant.astype(int) + b.significant.astype(int)
    names = np.array([MATCH_NONE, MATCH_ONE, MATCH_BOTH], dtype=object)
    return names[count]


# --- rendering ---------------------------------------------------------------

def format_footer(F, p):
    return f"F={F:.4g} p={p:.4g}"


def render_grid(matrix, match=None):
    """Aligned text grid: '#' significant, '.' not, '@' significant in both
    datasets (when ``match`` is given), '-' on the diagonal."""
    width = max(len(lab) for lab in matrix.labels)
    lines = [" " * width + "  " + " ".join(f"{lab:>{width}}" for lab in matrix.labels)]
    for i, lab in enumerate(matrix.labels):
        cells = []
        for j in range(matrix.k):
            if i == j:
                ch = "-"
            elif match is not None and match[i, j] == MATCH_BOTH:
                ch = "@"
            elif matrix.significant[i, j]:
                ch = "#"
            else:
                ch = "."
            cells.append(f"{ch:>{width}}")
        lines.append(f"{lab:>{width}}  " + " ".join(cells))
    lines.append(format_footer(matrix.F, matrix.p))
    return "\n".join(lines)


def empty_grid(k):
    return [["." for _ in range(k)] for _ in range(k)]


def matrix_to_csv(matrices):
    """``matrices`` maps block name (e.g. preprocessing) -> SignificanceMatrix."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["block", "row", "col", "significant", "statistic", "F", "p", "alpha", "q_crit"])
    for block, m in matrices.items():
        for i, a in enumerate(m.labels):
            for j, b in enumerate(m.labels):
                st = m.statistics[i, j] if m.statistics is not None else float("nan")
                w.writerow([block, a, b, int(m.significant[i, j]), repr(float(st)), repr(float(m.F)),
                            repr(float(m.p)), m.alpha, repr(float(m.q_crit))])
    return buf.getvalue()


def matrix_from_csv(text):
    rows = list(csv.DictReader(io.StringIO(text)))
    blocks = {}
    for r in rows:
        blocks.setdefault(r["block"], []).append(r)
    out = {}
    for block, rs in blocks.items():
        labels = []
        for r in rs:
            if r["row"] not in labels:
                labels.append(r["row"])
        k = len(labels)
        sig = np.zeros((k, k), dtype=bool)
        stat = np.zeros((k, k))
        for r in rs:
            i, j = labels.index(r["row"]), labels.index(r["col"])
            sig[i, j] = r["significant"] == "1"
            stat[i, j] = float(r["statistic"])
        first = rs[0]
        out[block] = SignificanceMatrix(labels, sig, float(first["F"]), float(first["p"]),
                                        float(first["alpha"]), float(first["q_crit"]), [], stat)
    return out


def render_significance(matrices, matches=None):
    """Text report: one grid per block with its F/p footer and flags."""
    parts = []
    for block, m in matrices.items():
        parts.append(f"[{block}]  alpha={m.alpha}")
        parts.append(render_grid(m, None if matches is None else matches.get(block)))
        for flag in m.flags:
            parts.append(f"flag: {flag}")
        parts.append("")
    return "\n".join(parts)


def order_labels(labels):
    """Residual-block names first in canonical order, then anything else."""
    known = [k for k in BLOCK_KINDS if k in labels]
    return known + sorted(lab for lab in labels if lab not in BLOCK_KINDS)


class ResultsFormatError(ValueError):
    pass


def read_results_csv(path_or_text, is_text=False):
    """Parse rb,preproc,rep,accuracy,epochs rows into
    {preproc: {rb: [acc, ...]}}; malformed rows raise with the line number."""
    if is_text:
        text = path_or_text
    else:
        with open(path_or_text, newline="") as fh:
            text = fh.read()
    lines = text.splitlines()
    if not lines:
        raise ResultsFormatError("line 1: empty results file")
    header = [h.strip() for h in lines[0].split(",")]
    need = ["rb", "preproc", "rep", "accuracy"]
    if any(h not in header for h in need):
        raise ResultsFormatError(f"line 1: header must contain {need}, got {header}")
    pos = {h: header.index(h) for h in need}
    out = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = [c.strip() for c in line.split(",")]
        if len(cells) != len(header):
            raise ResultsFormatError(f"line {lineno}: expected {len(header)} fields, got {len(cells)}")
        try:
            acc = float(cells[pos["accuracy"]])
            int(cells[pos["rep"]])
        except ValueError:
            raise ResultsFormatError(f"line {lineno}: non-numeric accuracy or repetition") from None
        if not math.isfinite(acc):
            raise ResultsFormatError(f"line {lineno}: non-finite accuracy")
        out.setdefault(cells[pos["preproc"]], {}).setdefault(cells[pos["rb"]], []).append(acc)
    return out


def analyze_results(results, alpha=0.05):
    """{preproc: SignificanceMatrix} for every block with usable groups."""
    out = {}
    for preproc in sorted(results):
        groups = results[preproc]
        labels = order_labels([rb for rb, v in groups.items() if len(v) >= 2])
        if len(labels) < 2:
            continue
        out[preproc] = tukey_kramer({lab: groups[lab] for lab in labels}, alpha, labels)
    return out
