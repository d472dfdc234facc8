"""Synthetic campaign data: generation, delay sampling, feature transform, IO, splits.

The generator reproduces the structural facts the predictor depends on rather
than any real traffic log: conversion counts with a pronounced long tail and a
nonzero zero-count mass, a ranking-bias ratio in a narrow range, tracked counts
that undercount true conversions according to per-type delay quantiles, and the
four feature families (campaign profile, delivery counters, bias priors, churn
rates). The bias ratio is recoverable from the prior features up to a small
residual, which is the one simulation assumption that makes the proxy-label
regression learnable at all; real aggregated estimates come from a production
ranking model that cannot be reproduced here.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields as dc_fields, replace
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

INDUSTRIES = ("Games", "Media", "E-commerce", "Life Services")
CAMPAIGN_TYPES = ("APP", "APP_ADVANCE", "SITE_PAGE", "LIVE_STREAM")
N_DAYS = 8

# Conversion delay deciles in minutes, p10..p90 per campaign type.
DELAY_DECILES = {
    "APP": (7.0, 11.0, 17.0, 27.0, 46.0, 103.0, 305.0, 999.0, 2770.0),
    "APP_ADVANCE": (1.0, 3.0, 5.0, 7.0, 20.0, 88.0, 294.0, 569.0, 931.0),
    "SITE_PAGE": (3.0, 4.0, 5.0, 7.0, 9.0, 13.0, 18.0, 29.0, 74.0),
    "LIVE_STREAM": (9.0, 18.0, 26.0, 35.0, 50.0, 85.0, 269.0, 1176.0, 4434.0),
}
_DECILE_US = np.arange(0.1, 0.95, 0.1)


class DatasetFormatError(ValueError):
    """Malformed dataset file (bad header or unparsable row)."""


class CalibrationError(RuntimeError):
    """Generated data missed one of its distribution targets."""


@dataclass(frozen=True)
class CampaignSample:
    """One campaign's aggregates from deployment up to the prediction moment."""

    campaign_id: int
    day: int
    industry: str
    product_id: int
    optimization_objective: int
    campaign_type: str
    impressions: int
    clicks: int
    views: int
    tracked_conversions: int
    z: float  # aggregated per-impression conversion estimates
    pcoc_prior_industry: float
    pcoc_prior_product: float
    pcoc_prior_account: float
    churn_industry: float
    churn_product: float
    churn_account: float
    t0_minutes: float
    tk_minutes: float
    label: int  # conversions attributed to impressions in [t0, tk], 3-day window


COLUMNS = tuple(f.name for f in dc_fields(CampaignSample))
_INT_COLUMNS = {"campaign_id", "day", "product_id", "optimization_objective",
                "impressions", "clicks", "views", "tracked_conversions", "label"}
_STR_COLUMNS = {"industry", "campaign_type"}


@dataclass
class CampaignDataset:
    """Columnar storage; one numpy array per CampaignSample field."""

    columns: dict

    def __post_init__(self) -> None:
        missing = [c for c in COLUMNS if c not in self.columns]
        if missing:
            raise ValueError(f"dataset missing columns {missing}")
        lengths = {len(v) for v in self.columns.values()}
        if len(lengths) > 1:
            raise ValueError("ragged dataset columns")

    def __len__(self) -> int:
        return len(self.columns["label"])

    def __getattr__(self, name: str):
        cols = object.__getattribute__(self, "columns")
        if name in cols:
            return cols[name]
        raise AttributeError(name)

    def subset(self, idx: np.ndarray) -> "CampaignDataset":
        return CampaignDataset({k: v[idx] for k, v in self.columns.items()})

    def row(self, i: int) -> CampaignSample:
        vals = {}
        for name in COLUMNS:
            v = self.columns[name][i]
            if name in _STR_COLUMNS:
                vals[name] = str(v)
            elif name in _INT_COLUMNS:
                vals[name] = int(v)
            else:
                vals[name] = float(v)
        return CampaignSample(**vals)

    @classmethod
    def from_rows(cls, rows: Sequence[CampaignSample]) -> "CampaignDataset":
        cols = {}
        for name in COLUMNS:
            vals = [getattr(r, name) for r in rows]
            if name in _STR_COLUMNS:
                cols[name] = np.array(vals, dtype=np.str_)
            elif name in _INT_COLUMNS:
                cols[name] = np.array(vals, dtype=np.int64)
            else:
                cols[name] = np.array(vals, dtype=np.float64)
        return cls(cols)

    def check_invariants(self) -> None:
        if np.any(self.tracked_conversions > self.label):
            raise ValueError("tracked_conversions must not exceed the label")
        if np.any(self.clicks > self.impressions):
            raise ValueError("clicks must not exceed impressions")
        if np.any((self.z <= 0) & (self.impressions > 0)):
            raise ValueError("z must be positive whenever impressions exist")


@dataclass(frozen=True)
class GeneratorConfig:
    """Distribution knobs with desk-scale defaults.

    The published corpus this emulates had 2,738,705 samples; 1e5 keeps every
    experiment on one CPU. Calibration targets (validated for large draws):
    label mean in [15, 40], zero-label fraction in (0.01, 0.5), max/median
    >= 1000, bias-ratio p99/p50 < 5.
    """

    n_samples: int = 100_000
    seed: int = 0
    scale_median: float = 2.5
    scale_sigma: float = 1.7
    tail_fraction: float = 0.015
    tail_exponent: float = 1.3  # Pareto shape of the mixed-in tail
    tail_min: float = 200.0
    label_cap: int = 33492
    bias_sigma: float = 0.35  # total log-normal sigma of the ranking bias
    z_noise_sigma: float = 0.05
    z_small_noise: float = 0.5  # extra z noise ~ 1/sqrt(conversions): small campaigns aggregate fewer impressions
    prior_noise_sigma: float = 0.05
    n_products: int = 1141
    n_objectives: int = 16
    window_min_minutes: float = 30.0
    window_max_minutes: float = 4320.0

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        if not 0 <= self.tail_fraction < 1:
            raise ValueError("tail_fraction must be in [0, 1)")
        if min(self.bias_sigma, self.z_noise_sigma, self.z_small_noise,
               self.prior_noise_sigma) < 0:
            raise ValueError("sigmas are nonnegative")
        if self.window_min_minutes <= 0 or self.window_max_minutes < self.window_min_minutes:
            raise ValueError("bad window bounds")


# Relative weights of the bias variance split across industry / product /
# account / residual components; the residual is what the regressor cannot see.
_BIAS_WEIGHTS = np.array([0.40, 0.55, 0.55, 0.35])


def _stream(seed: int, stage: int) -> np.random.Generator:
    # Independent stream per stage so a config change in one stage (e.g. window
    # bounds) cannot shift the draws of any other stage.
    return np.random.default_rng([seed, stage])


def sample_delay(campaign_type: str, u: float) -> float:
    """Inverse-CDF delay draw in minutes through the per-type decile table.

    Piecewise-linear through the published deciles; linearly extrapolated to 0
    below p10 and to 2*p90 above p90.
    """
    if campaign_type not in DELAY_DECILES:
        raise ValueError(f"unknown campaign type {campaign_type!r}")
    if not 0.0 <= u <= 1.0:
        raise ValueError("u must be a uniform draw in [0, 1]")
    return float(_delay_curve(campaign_type, np.asarray([u]))[0])


def _delay_curve(campaign_type: str, u: np.ndarray) -> np.ndarray:
    q = DELAY_DECILES[campaign_type]
    xs = np.concatenate([[0.0], _DECILE_US, [1.0]])
    ys = np.concatenate([[0.0], q, [2.0 * q[-1]]])
    return np.interp(u, xs, ys)


def log_transform(values: np.ndarray | float) -> np.ndarray:
    """Count/aggregate features enter the model as log10(1 + v)."""
    values = np.asarray(values, dtype=np.float64)
    if np.any(values < 0):
        raise ValueError("log_transform expects nonnegative inputs")
    return np.log10(1.0 + values)


def generate_campaigns(config: GeneratorConfig, validate: bool | None = None) -> CampaignDataset:
    """Draws a full synthetic dataset; deterministic per config (incl. seed).

    validate=None checks calibration targets only for draws of >= 1e5 samples
    (the targets are statements about large-sample statistics).
    """
    n = config.n_samples
    rng_cat = _stream(config.seed, 0)
    rng_eff = _stream(config.seed, 1)
    rng_scale = _stream(config.seed, 2)
    rng_label = _stream(config.seed, 3)
    rng_noise = _stream(config.seed, 4)
    rng_window = _stream(config.seed, 5)
    rng_conv = _stream(config.seed, 6)
    rng_vol = _stream(config.seed, 7)

    day = rng_cat.integers(1, N_DAYS + 1, size=n)
    industry_idx = rng_cat.choice(4, size=n, p=[0.30, 0.25, 0.30, 0.15])
    ctype_idx = rng_cat.choice(4, size=n, p=[0.45, 0.20, 0.20, 0.15])
    objective = rng_cat.integers(0, config.n_objectives, size=n)
    prod_pop = (1.0 / np.arange(1, config.n_products + 1) ** 0.7)
    product = rng_cat.choice(config.n_products, size=n, p=prod_pop / prod_pop.sum())

    # Ranking-bias components (log scale) and churn rates per entity.
    sig = config.bias_sigma * _BIAS_WEIGHTS / np.sqrt((_BIAS_WEIGHTS**2).sum())
    ind_bias = rng_eff.normal(0.0, sig[0], size=4)
    prod_bias = rng_eff.normal(0.0, sig[1], size=config.n_products)
    churn_ind = rng_eff.uniform(0.05, 0.40, size=4)
    churn_prod = rng_eff.uniform(0.02, 0.60, size=config.n_products)
    acct_bias = rng_eff.normal(0.0, sig[2], size=n)
    resid_bias = rng_eff.normal(0.0, sig[3], size=n)
    churn_acct = rng_eff.beta(2.0, 6.0, size=n)

    log_bias = ind_bias[industry_idx] + prod_bias[product] + acct_bias + resid_bias
    bias = np.exp(log_bias)

    base = rng_scale.lognormal(np.log(config.scale_median), config.scale_sigma, size=n)
    tail_mask = rng_scale.random(n) < config.tail_fraction
    tail_u = rng_scale.random(n)
    tail = config.tail_min * (1.0 - tail_u) ** (-1.0 / config.tail_exponent)
    scale = np.where(tail_mask, np.minimum(tail, 0.98 * config.label_cap), base)
    scale = scale * np.exp(-0.4 * (churn_acct - 0.25))  # churny accounts convert less

    label = np.minimum(rng_label.poisson(scale), config.label_cap).astype(np.int64)

    z_sigma = config.z_noise_sigma + config.z_small_noise / np.sqrt(np.maximum(label, 1))
    z_noise = np.exp(rng_noise.standard_normal(n) * z_sigma)
    z = bias * np.where(label > 0, label.astype(np.float64), scale) * z_noise
    prior_noise = rng_noise.normal(0.0, config.prior_noise_sigma, size=(3, n))
    prior_ind = np.exp(ind_bias[industry_idx] + prior_noise[0])
    prior_prod = np.exp(prod_bias[product] + prior_noise[1])
    prior_acct = np.exp(acct_bias + prior_noise[2])

    window = np.exp(rng_window.uniform(np.log(config.window_min_minutes),
                                       np.log(config.window_max_minutes), size=n))
    t0 = rng_window.uniform(0.0, 1440.0, size=n)

    tracked = _tracked_counts(label, ctype_idx, window, rng_conv)

    cvr_eff = np.exp(rng_vol.normal(np.log(0.004), 0.5, size=n))
    impressions = np.maximum(1, np.rint(scale / cvr_eff)).astype(np.int64)
    clicks = np.minimum(impressions,
                        rng_vol.poisson(scale * np.exp(rng_vol.normal(np.log(15.0), 0.4, size=n)))).astype(np.int64)
    views = rng_vol.poisson(scale * np.exp(rng_vol.normal(np.log(40.0), 0.4, size=n))).astype(np.int64)

    ds = CampaignDataset({
        "campaign_id": np.arange(n, dtype=np.int64),
        "day": day.astype(np.int64),
        "industry": np.array(INDUSTRIES, dtype=np.str_)[industry_idx],
        "product_id": product.astype(np.int64),
        "optimization_objective": objective.astype(np.int64),
        "campaign_type": np.array(CAMPAIGN_TYPES, dtype=np.str_)[ctype_idx],
        "impressions": impressions,
        "clicks": clicks,
        "views": views,
        "tracked_conversions": tracked,
        "z": z,
        "pcoc_prior_industry": prior_ind,
        "pcoc_prior_product": prior_prod,
        "pcoc_prior_account": prior_acct,
        "churn_industry": churn_ind[industry_idx],
        "churn_product": churn_prod[product],
        "churn_account": churn_acct,
        "t0_minutes": t0,
        "tk_minutes": t0 + window,
        "label": label,
    })
    ds.check_invariants()
    if validate or (validate is None and n >= 100_000):
        validate_calibration(ds)
    return ds


def _tracked_counts(label: np.ndarray, ctype_idx: np.ndarray, window: np.ndarray,
                    rng: np.random.Generator) -> np.ndarray:
    """Conversions whose (impression offset + delay) lands inside the window."""
    total = int(label.sum())
    owner = np.repeat(np.arange(len(label)), label)
    frac = rng.random(total)
    u_delay = rng.random(total)
    delay = np.empty(total)
    conv_type = ctype_idx[owner]
    for t, name in enumerate(CAMPAIGN_TYPES):
        sel = conv_type == t
        delay[sel] = _delay_curve(name, u_delay[sel])
    w = window[owner]
    matured = (frac * w + delay) <= w
    return np.bincount(owner, weights=matured, minlength=len(label)).astype(np.int64)


def dataset_stats(ds: CampaignDataset) -> dict:
    from .vrmp import pcoc_label  # local import: vrmp has no data dependency

    y = ds.label
    pcoc = pcoc_label(ds.z, y)
    median = float(np.median(y))
    return {
        "n": len(ds),
        "label_mean": float(y.mean()),
        "label_median": median,
        "label_max": int(y.max()),
        "zero_fraction": float(np.mean(y == 0)),
        "max_over_median": float(y.max() / median) if median > 0 else float("inf"),
        "pcoc_p99_over_p50": float(np.quantile(pcoc, 0.99) / np.quantile(pcoc, 0.50)),
    }


def validate_calibration(ds: CampaignDataset) -> dict:
    stats = dataset_stats(ds)
    checks = [
        ("label mean in [15, 40]", 15.0 <= stats["label_mean"] <= 40.0),
        ("zero-label fraction in (0.01, 0.5)", 0.01 < stats["zero_fraction"] < 0.5),
        ("max/median >= 1000", stats["max_over_median"] >= 1000.0),
        ("pcoc p99/p50 < 5", stats["pcoc_p99_over_p50"] < 5.0),
    ]
    failed = [name for name, ok in checks if not ok]
    if failed:
        raise CalibrationError(f"calibration target violated: {failed[0]} (stats: {stats})")
    return stats


def split_dataset(ds: CampaignDataset, seed: int = 0) -> tuple[CampaignDataset, CampaignDataset, CampaignDataset]:
    """Days 1-7 shuffled into train/validation 9:1; day 8 is the test set."""
    day = ds.day
    if np.any((day < 1) | (day > N_DAYS)):
        raise ValueError(f"day tags must lie in 1..{N_DAYS}")
    early = np.flatnonzero(day < N_DAYS)
    test_idx = np.flatnonzero(day == N_DAYS)
    if early.size == 0:
        raise ValueError("no samples before the test day; cannot form a training set")
    perm = _stream(seed, 99).permutation(early.size)
    n_train = int(round(0.9 * early.size))
    train_idx = early[perm[:n_train]]
    val_idx = early[perm[n_train:]]
    if val_idx.size == 0 or test_idx.size == 0:
        raise ValueError("split produced an empty validation or test set")
    return ds.subset(train_idx), ds.subset(val_idx), ds.subset(test_idx)


def write_dataset(ds: CampaignDataset, path) -> None:
    """Tab-separated text, header row, one sample per line; floats round-trip."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(COLUMNS) + "\n")
        cols = [ds.columns[c] for c in COLUMNS]
        for i in range(len(ds)):
            parts = []
            for name, col in zip(COLUMNS, cols):
                v = col[i]
                if name in _STR_COLUMNS:
                    parts.append(str(v))
                elif name in _INT_COLUMNS:
                    parts.append(str(int(v)))
                else:
                    parts.append(repr(float(v)))
            fh.write("\t".join(parts) + "\n")


def read_dataset(path) -> CampaignDataset:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header:
            raise DatasetFormatError(f"{path}: empty file, expected a header row")
        names = header.rstrip("\n").split("\t")
        unknown = [c for c in names if c not in COLUMNS]
        if unknown:
            raise DatasetFormatError(f"{path}: unknown column {unknown[0]!r}")
        missing = [c for c in COLUMNS if c not in names]
        if missing:
            raise DatasetFormatError(f"{path}: missing column {missing[0]!r}")
        raw: dict = {c: [] for c in COLUMNS}
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != len(names):
                raise DatasetFormatError(f"{path}:{lineno}: expected {len(names)} fields, got {len(parts)}")
            for name, tok in zip(names, parts):
                try:
                    if name in _STR_COLUMNS:
                        raw[name].append(tok)
                    elif name in _INT_COLUMNS:
                        raw[name].append(int(tok))
                    else:
                        raw[name].append(float(tok))
                except ValueError as exc:
                    raise DatasetFormatError(f"{path}:{lineno}: bad value for {name!r}: {tok!r}") from exc
    cols = {}
    for name in COLUMNS:
        if name in _STR_COLUMNS:
            cols[name] = np.array(raw[name], dtype=np.str_)
        elif name in _INT_COLUMNS:
            cols[name] = np.array(raw[name], dtype=np.int64)
        else:
            cols[name] = np.array(raw[name], dtype=np.float64)
    return CampaignDataset(cols)
