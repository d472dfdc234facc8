"""Evaluation metrics, simple baselines, the ablation runner, diagnostic tables.

Conventions for zero-label campaigns: the percentage error is undefined there,
so MAPE is computed over positive labels only and the excluded count is
reported. The compliance rate counts a zero-label campaign as compliant iff the
prediction rounds to zero (<= 0.5); pass zero_mode="exclude" to drop them from
the ratio instead. Both treatments are reported so the choice stays visible.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import vrmp
from .data import INDUSTRIES, CampaignDataset, split_dataset
from .model import (
    DENSE_FEATURES,
    SPARSE_FIELDS,
    FeatureEncoder,
    LdacpModel,
    ModelConfig,
    PredictionBatch,
    TrainConfig,
)
from .nn import AdamState, DenseNet, EmbeddingTable, adam_step, sigmoid, softplus

logger = logging.getLogger(__name__)

DEFAULT_TAUS = tuple(np.round(np.arange(0.05, 0.51, 0.05), 2))
ZERO_COMPLIANT_BELOW = 0.5  # zero-label campaigns: compliant iff prediction rounds to 0


def mape(predictions: np.ndarray, labels: np.ndarray) -> tuple[float, int]:
    """Mean absolute percentage error over positive labels.

    Returns (mape, number of zero-label samples excluded). Raises when no label
    is positive.
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    pos = labels > 0
    if not np.any(pos):
        raise ValueError("MAPE undefined: every label is zero")
    value = float(np.mean(np.abs(predictions[pos] - labels[pos]) / labels[pos]))
    return value, int(np.sum(~pos))


def _compliance_mask(predictions, labels, lo, hi, zero_mode):
    ratio_ok = np.zeros(len(labels), dtype=bool)
    pos = labels > 0
    ratio = predictions[pos] / labels[pos]
    ratio_ok[pos] = (ratio >= lo) & (ratio <= hi)  # closed interval
    if zero_mode == "round":
        ratio_ok[~pos] = predictions[~pos] <= ZERO_COMPLIANT_BELOW
        counted = np.ones(len(labels), dtype=bool)
    elif zero_mode == "exclude":
        counted = pos
    else:
        raise ValueError("zero_mode must be 'round' or 'exclude'")
    return ratio_ok, counted


def compliance_rate(predictions, labels, lo: float = 0.8, hi: float = 1.2,
                    zero_mode: str = "round") -> float:
    """Fraction of campaigns whose prediction/label ratio lies in [lo, hi]."""
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if len(labels) == 0:
        raise ValueError("compliance rate of an empty set")
    ok, counted = _compliance_mask(predictions, labels, lo, hi, zero_mode)
    if not np.any(counted):
        raise ValueError("no samples left after excluding zero labels")
    return float(ok[counted].mean())


def cr_tau_curve(predictions, labels, taus: Sequence[float] = DEFAULT_TAUS,
                 zero_mode: str = "round") -> list[tuple[float, float]]:
    """Compliance under widening bands [1 - tau, 1 + tau]; the 0.2 row is CR."""
    taus = list(taus)
    if taus != sorted(taus) or any(not 0 < t <= 1 for t in taus):
        raise ValueError("taus must be ascending and inside (0, 1]")
    return [(float(t), compliance_rate(predictions, labels, 1 - t, 1 + t, zero_mode))
            for t in taus]


def rm_baseline(ds_or_z) -> np.ndarray:
    """Ranking-model baseline: the aggregated estimate z is the prediction."""
    z = ds_or_z.z if hasattr(ds_or_z, "z") else ds_or_z
    return np.array(z, dtype=np.float64)


class VrBaseline:
    """Direct value regression over the same trunk features.

    mode "N" fits the conversion count with MAE; mode "P" fits the bias ratio
    with MAE and converts back through z at inference (the stronger variant
    under long-tail labels).
    """

    def __init__(self, mode: str, encoder: FeatureEncoder, seed: int = 0,
                 trunk_dims: tuple = (64, 32), embedding_dim: int = 8):
        if mode not in ("N", "P"):
            raise ValueError("mode must be 'N' or 'P'")
        self.mode = mode
        self.encoder = encoder
        rng = np.random.default_rng([seed, 13])
        self.embeddings = {
            fld: EmbeddingTable.init(rng, encoder.vocab_size(fld), embedding_dim)
            for fld in SPARSE_FIELDS
        }
        in_dim = embedding_dim * len(SPARSE_FIELDS) + len(DENSE_FEATURES)
        self.trunk = DenseNet.build(rng, (in_dim, *trunk_dims),
                                    hidden_activation="selu", output_activation="selu")
        self.head = DenseNet.build(rng, (trunk_dims[-1], 1))
        self.embedding_dim = embedding_dim

    def params(self) -> dict:
        out = {f"emb.{fld}": t.rows for fld, t in self.embeddings.items()}
        out.update(dict(self.trunk.param_items("trunk")))
        out.update(dict(self.head.param_items("head")))
        return out

    def _forward(self, ids, dense):
        embs = [self.embeddings[f].lookup(ids[:, j]) for j, f in enumerate(SPARSE_FIELDS)]
        x = np.concatenate(embs + [dense], axis=1)
        trunk_out, trunk_cache = self.trunk.forward_cached(x)
        raw, head_cache = self.head.forward_cached(trunk_out)
        return raw[:, 0], (trunk_cache, head_cache)

    def predict(self, ds: CampaignDataset) -> np.ndarray:
        raw, _ = self._forward(self.encoder.encode_ids(ds), self.encoder.encode_dense(ds))
        if self.mode == "N":
            return softplus(raw)
        return vrmp.infer_yg(ds.z, vrmp.pcoc_from_raw(raw))

    def _loss_grads(self, ids, dense, y, z, pcoc):
        raw, (trunk_cache, head_cache) = self._forward(ids, dense)
        batch = len(y)
        if self.mode == "N":
            pred = softplus(raw)
            loss = float(np.mean(np.abs(pred - y)))
            d_raw = np.sign(pred - y) / batch * sigmoid(raw)
        else:
            pred = vrmp.pcoc_from_raw(raw)
            loss, d_pred = vrmp.vrmp_loss(pred, pcoc)
            d_raw = d_pred * vrmp.pcoc_raw_grad(raw)
        grads = {}
        d_trunk, head_grads = self.head.backward(head_cache, d_raw[:, None])
        for k, (dw, db) in enumerate(head_grads):
            grads[f"head.w{k}"] = dw
            grads[f"head.b{k}"] = db
        d_x, trunk_grads = self.trunk.backward(trunk_cache, d_trunk)
        for k, (dw, db) in enumerate(trunk_grads):
            grads[f"trunk.w{k}"] = dw
            grads[f"trunk.b{k}"] = db
        dim = self.embedding_dim
        for j, fld in enumerate(SPARSE_FIELDS):
            g = np.zeros_like(self.embeddings[fld].rows)
            self.embeddings[fld].scatter_grad(ids[:, j], d_x[:, j * dim:(j + 1) * dim], g)
            grads[f"emb.{fld}"] = g
        return loss, grads


def vr_baseline_train(train_ds: CampaignDataset, val_ds: CampaignDataset, mode: str,
                      config: TrainConfig = TrainConfig(), seed: int | None = None,
                      trunk_dims: tuple = (64, 32)) -> VrBaseline:
    """Trains a VR baseline under the shared protocol (Adam, early stop on val MAPE)."""
    seed = config.seed if seed is None else seed
    model = VrBaseline(mode, FeatureEncoder.build(train_ds), seed=seed, trunk_dims=trunk_dims)
    ids = model.encoder.encode_ids(train_ds)
    dense = model.encoder.encode_dense(train_ds)
    y = train_ds.label.astype(np.float64)
    z = train_ds.z
    pcoc = vrmp.pcoc_label(z, train_ds.label)
    params = model.params()
    adam = AdamState.for_params(params, lr=config.lr)
    rng = np.random.default_rng([seed, 17])
    best = np.inf
    best_epoch = 0
    snap = {k: v.copy() for k, v in params.items()}
    for epoch in range(1, config.max_epochs + 1):
        perm = rng.permutation(len(y))
        for a in range(0, len(y), config.batch_size):
            idx = perm[a:a + config.batch_size]
            _, grads = model._loss_grads(ids[idx], dense[idx], y[idx], z[idx], pcoc[idx])
            adam_step(params, grads, adam)
        val_mape, _ = mape(model.predict(val_ds), val_ds.label)
        if val_mape < best:
            best, best_epoch = val_mape, epoch
            snap = {k: v.copy() for k, v in params.items()}
        elif epoch - best_epoch >= config.patience:
            break
    for k, v in params.items():
        v[...] = snap[k]
    return model


def per_bucket_report(y_f, y_g, y_hat, lambdas, labels,
                      bucket_edges: Sequence[float],
                      zero_mode: str = "round") -> list[dict]:
    """Per label-bucket compliance of each predictor plus the mean gate weight.

    Buckets are [edges[i], edges[i+1]); empty buckets yield rows with null
    metrics so downstream tables keep a fixed shape.
    """
    edges = list(bucket_edges)
    if edges != sorted(edges):
        raise ValueError("bucket edges must ascend")
    labels = np.asarray(labels, dtype=np.float64)
    rows = []
    for lo, hi in zip(edges, edges[1:]):
        inside = (labels >= lo) & (labels < hi)
        row = {"lo": float(lo), "hi": float(hi), "n": int(inside.sum())}
        if row["n"] == 0:
            row.update({"cr_f": None, "cr_g": None, "cr_hat": None, "mean_lambda": None})
        else:
            sel = np.flatnonzero(inside)
            row["cr_f"] = compliance_rate(np.asarray(y_f)[sel], labels[sel], zero_mode=zero_mode)
            row["cr_g"] = compliance_rate(np.asarray(y_g)[sel], labels[sel], zero_mode=zero_mode)
            row["cr_hat"] = compliance_rate(np.asarray(y_hat)[sel], labels[sel], zero_mode=zero_mode)
            row["mean_lambda"] = float(np.mean(np.asarray(lambdas)[sel]))
        rows.append(row)
    return rows


def lambda_tercile_means(lambdas, labels) -> tuple[float, float, float]:
    """Mean gate weight inside the low/mid/high label terciles."""
    labels = np.asarray(labels, dtype=np.float64)
    lambdas = np.asarray(lambdas, dtype=np.float64)
    q1, q2 = np.quantile(labels, [1 / 3, 2 / 3])
    low = lambdas[labels <= q1]
    mid = lambdas[(labels > q1) & (labels <= q2)]
    high = lambdas[labels > q2]
    return float(low.mean()), float(mid.mean()) if mid.size else float("nan"), float(high.mean())


@dataclass
class MetricsReport:
    n: int
    mape: float
    zero_label_count: int
    cr: float
    cr_excluding_zero: float
    cr_tau: list
    per_industry: list
    per_bucket: list
    lambda_terciles: tuple | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def to_text(self) -> str:
        lines = [
            f"samples                {self.n}",
            f"MAPE (y>0)             {self.mape:.4f}   ({self.zero_label_count} zero-label excluded)",
            f"CR                     {self.cr:.4f}",
            f"CR (y>0 only)          {self.cr_excluding_zero:.4f}",
        ]
        if self.lambda_terciles is not None:
            lo, mid, hi = self.lambda_terciles
            lines.append(f"mean gate by tercile   {lo:.3f} / {mid:.3f} / {hi:.3f}")
        lines.append("")
        lines.append("tau    CR_tau")
        lines += [f"{t:<6.2f} {v:.4f}" for t, v in self.cr_tau]
        lines.append("")
        lines.append(f"{'industry':<16} {'n':>7} {'MAPE':>8} {'CR':>8}")
        for row in self.per_industry:
            m = "--" if row["mape"] is None else f"{row['mape']:.4f}"
            lines.append(f"{row['industry']:<16} {row['n']:>7} {m:>8} {row['cr']:>8.4f}")
        lines.append("")
        lines.append(f"{'bucket':<22} {'n':>7} {'CR_f':>7} {'CR_g':>7} {'CR_hat':>7} {'mean_lam':>9}")
        for row in self.per_bucket:
            def fmt(v, spec=".3f"):
                return "--" if v is None else format(v, spec)
            lines.append(f"[{row['lo']:g}, {row['hi']:g}){'':<8} {row['n']:>7} "
                         f"{fmt(row['cr_f']):>7} {fmt(row['cr_g']):>7} "
                         f"{fmt(row['cr_hat']):>7} {fmt(row['mean_lambda']):>9}")
        return "\n".join(lines)


DEFAULT_BUCKET_EDGES = (0.0, 1.0, 3.0, 10.0, 30.0, 100.0, 1000.0, float("inf"))


def evaluate_predictions(pred: PredictionBatch, ds: CampaignDataset,
                         bucket_edges: Sequence[float] = DEFAULT_BUCKET_EDGES,
                         taus: Sequence[float] = DEFAULT_TAUS) -> MetricsReport:
    labels = ds.label
    mape_value, zero_count = mape(pred.y_final, labels)
    per_industry = []
    for industry in INDUSTRIES:
        sel = np.flatnonzero(ds.industry == industry)
        if sel.size == 0:
            continue
        pos = labels[sel] > 0
        per_industry.append({
            "industry": industry,
            "n": int(sel.size),
            "mape": mape(pred.y_final[sel], labels[sel])[0] if pos.any() else None,
            "cr": compliance_rate(pred.y_final[sel], labels[sel]),
        })
    return MetricsReport(
        n=len(ds),
        mape=mape_value,
        zero_label_count=zero_count,
        cr=compliance_rate(pred.y_final, labels),
        cr_excluding_zero=compliance_rate(pred.y_final, labels, zero_mode="exclude"),
        cr_tau=cr_tau_curve(pred.y_final, labels, taus),
        per_industry=per_industry,
        per_bucket=per_bucket_report(pred.y_f, pred.y_g, pred.y_final, pred.lam,
                                     labels, bucket_edges),
        lambda_terciles=lambda_tercile_means(pred.lam, labels),
    )


def evaluate_model(model: LdacpModel, ds: CampaignDataset, **kw) -> MetricsReport:
    return evaluate_predictions(model.predict_dataset(ds), ds, **kw)


def write_report(report: MetricsReport, out_dir) -> None:
    """Human-readable summary plus machine-readable columnar files."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.to_text() + "\n")
    (out / "report.json").write_text(report.to_json() + "\n")
    with open(out / "cr_tau.tsv", "w") as fh:
        fh.write("tau\tcr\n")
        for t, v in report.cr_tau:
            fh.write(f"{t}\t{v}\n")
    with open(out / "per_bucket.tsv", "w") as fh:
        fh.write("lo\thi\tn\tcr_f\tcr_g\tcr_hat\tmean_lambda\n")
        for row in report.per_bucket:
            vals = [row["lo"], row["hi"], row["n"], row["cr_f"], row["cr_g"],
                    row["cr_hat"], row["mean_lambda"]]
            fh.write("\t".join("" if v is None else str(v) for v in vals) + "\n")
    with open(out / "per_industry.tsv", "w") as fh:
        fh.write("industry\tn\tmape\tcr\n")
        for row in report.per_industry:
            fh.write(f"{row['industry']}\t{row['n']}\t"
                     f"{'' if row['mape'] is None else row['mape']}\t{row['cr']}\n")


@dataclass
class AblationReport:
    rows: list  # one dict per (variant, seed): mape, cr
    seeds: list
    variants: list

    def result(self, variant: str, seed: int) -> dict:
        for row in self.rows:
            if row["variant"] == variant and row["seed"] == seed:
                return row
        raise KeyError((variant, seed))

    def majority_wins(self, against: str) -> dict:
        """Does 'full' beat `against` on MAPE and CR for a majority of seeds?"""
        mape_wins = cr_wins = 0
        for seed in self.seeds:
            full = self.result("full", seed)
            other = self.result(against, seed)
            mape_wins += full["mape"] < other["mape"]
            cr_wins += full["cr"] > other["cr"]
        need = len(self.seeds) // 2 + 1
        return {"mape_wins": mape_wins, "cr_wins": cr_wins, "n_seeds": len(self.seeds),
                "mape_majority": mape_wins >= need, "cr_majority": cr_wins >= need}

    def to_text(self) -> str:
        lines = [f"{'variant':<14} {'seed':>4} {'MAPE':>8} {'CR':>8}"]
        for row in sorted(self.rows, key=lambda r: (r["variant"], r["seed"])):
            lines.append(f"{row['variant']:<14} {row['seed']:>4} "
                         f"{row['mape']:>8.4f} {row['cr']:>8.4f}")
        for other in self.variants:
            if other == "full":
                continue
            w = self.majority_wins(other)
            lines.append(f"full vs {other}: MAPE wins {w['mape_wins']}/{w['n_seeds']}, "
                         f"CR wins {w['cr_wins']}/{w['n_seeds']}")
        return "\n".join(lines)

    def to_json(self) -> str:
        summary = {v: self.majority_wins(v) for v in self.variants if v != "full"}
        return json.dumps({"rows": self.rows, "summary": summary}, indent=2)


def run_ablation(ds: CampaignDataset,
                 variants: Sequence[str] = ("full", "wo-smoothing", "wo-vrmp"),
                 seeds: Sequence[int] = (0, 1, 2),
                 model_config: ModelConfig = ModelConfig(),
                 train_config: TrainConfig = TrainConfig()) -> AblationReport:
    """Trains every variant under identical seeds/configs and compares test metrics."""
    rows = []
    for seed in seeds:
        train, val, test = split_dataset(ds, seed=seed)
        for variant in variants:
            cfg = replace(model_config, variant=variant)
            model = LdacpModel.initialize(train, cfg, seed=seed)
            model.fit(train, val, replace(train_config, seed=seed))
            pred = model.predict_dataset(test)
            m, _ = mape(pred.y_final, test.label)
            cr = compliance_rate(pred.y_final, test.label)
            rows.append({"variant": variant, "seed": int(seed), "mape": m, "cr": cr})
            logger.info("ablation %s seed %d: MAPE %.4f CR %.4f", variant, seed, m, cr)
    return AblationReport(rows=rows, seeds=list(seeds), variants=list(variants))
