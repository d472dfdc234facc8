"""The fused conversion-count predictor: shared trunk, three heads, training loop.

Architecture: four sparse features are embedded (8 dims each, shared by every
head), concatenated with twelve log-scaled dense features and pushed through a
SELU trunk. Three heads consume the trunk output: the bucket-classification
edge head, the bias-ratio regression head, and a gate producing a convex fusion
weight. The final prediction is clamped from below by the campaign's real-time
tracked conversions.

The gate is trained with a percentage-error loss so large-count campaigns do
not dominate; by default the two expert outputs are treated as constants inside
that loss (the gate arbitrates, the experts keep their own objectives). Set
routing="joint" to let the fusion loss reach the experts too.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import bcms, vrmp
from .data import CampaignDataset, CampaignSample, log_transform
from .nn import AdamState, DenseNet, EmbeddingTable, GradientError, adam_step, sigmoid
from .tree import BucketTree, SmoothingKernel, build_tree

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

SPARSE_FIELDS = ("industry", "product_id", "optimization_objective", "campaign_type")
DENSE_FEATURES = (
    "log_impressions", "log_clicks", "log_views", "log_tracked", "log_z", "log_window",
    "pcoc_prior_industry", "pcoc_prior_product", "pcoc_prior_account",
    "churn_industry", "churn_product", "churn_account",
)

VARIANTS = ("full", "wo-smoothing", "wo-vrmp")


class TrainingAborted(RuntimeError):
    """Training hit a non-finite loss or gradient; best-so-far params were kept."""


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0  # weight of the bias-ratio loss
    beta: float = 1.0  # weight of the fusion loss
    batch_size: int = 128
    lr: float = 1e-3
    max_epochs: int = 20
    patience: int = 2  # epochs of non-improving validation MAPE before stopping
    mape_floor: float = 1.0  # added to zero labels in the fusion-loss denominator
    seed: int = 0
    routing: str = "gate"  # "gate" | "joint"

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights are nonnegative")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, patience and max_epochs must be >= 1")
        if self.routing not in ("gate", "joint"):
            raise ValueError("routing must be 'gate' or 'joint'")


@dataclass(frozen=True)
class ModelConfig:
    trunk_dims: tuple = (64, 32)
    embedding_dim: int = 8
    num_leaves: int = 64
    kernel_eps: float = 1e-6
    kernel_sharpness: float = 10.0
    leaf_value_mode: str = "distinct-mean"
    variant: str = "full"

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")

    @property
    def smoothing(self) -> bool:
        return self.variant != "wo-smoothing"

    @property
    def use_vrmp(self) -> bool:
        return self.variant != "wo-vrmp"

    @property
    def kernel(self) -> SmoothingKernel:
        return SmoothingKernel(eps=self.kernel_eps, sharpness=self.kernel_sharpness)


class FeatureEncoder:
    """Maps raw campaign columns to (sparse ids, dense feature matrix).

    Sparse vocabularies come from the training set; unseen values encode to the
    reserved id 0. Count/aggregate dense features are log10(1+v) scaled, the
    bias priors and churn rates pass through as-is.
    """

    def __init__(self, vocabs: dict):
        self.vocabs = vocabs
        self._sorted = {f: np.sort(np.asarray(v)) for f, v in vocabs.items()}

    @classmethod
    def build(cls, ds: CampaignDataset) -> "FeatureEncoder":
        return cls({f: np.unique(ds.columns[f]).tolist() for f in SPARSE_FIELDS})

    def vocab_size(self, fld: str) -> int:
        return len(self.vocabs[fld]) + 1  # +1 for the unknown row

    def encode_ids(self, ds: CampaignDataset) -> np.ndarray:
        out = np.empty((len(ds), len(SPARSE_FIELDS)), dtype=np.int64)
        for j, fld in enumerate(SPARSE_FIELDS):
            col = ds.columns[fld]
            ref = self._sorted[fld]
            pos = np.searchsorted(ref, col)
            pos_c = np.minimum(pos, len(ref) - 1)
            known = ref[pos_c] == col
            out[:, j] = np.where(known, pos_c + 1, 0)
        return out

    def encode_dense(self, ds: CampaignDataset) -> np.ndarray:
        window = np.maximum(ds.tk_minutes - ds.t0_minutes, 0.0)
        return np.column_stack([
            log_transform(ds.impressions),
            log_transform(ds.clicks),
            log_transform(ds.views),
            log_transform(ds.tracked_conversions),
            log_transform(ds.z),
            log_transform(window),
            ds.pcoc_prior_industry,
            ds.pcoc_prior_product,
            ds.pcoc_prior_account,
            ds.churn_industry,
            ds.churn_product,
            ds.churn_account,
        ])

    def to_dict(self) -> dict:
        return {f: list(v) for f, v in self.vocabs.items()}

    @classmethod
    def from_dict(cls, data: dict) -> "FeatureEncoder":
        return cls({f: data[f] for f in SPARSE_FIELDS})


# Standalone fusion operations (the model uses the same math vectorized).

def gate_lambda(raw: np.ndarray | float) -> np.ndarray:
    """Gate signal in (0, 1)."""
    return sigmoid(raw)


def combine(lam: np.ndarray | float, y_f: np.ndarray | float, y_g: np.ndarray | float) -> np.ndarray:
    """Convex fusion lam * y_f + (1 - lam) * y_g."""
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam < 0) or np.any(lam > 1):
        raise ValueError("gate weight must lie in [0, 1]")
    return lam * np.asarray(y_f, dtype=np.float64) + (1.0 - lam) * np.asarray(y_g, dtype=np.float64)


def moe_loss(lam, y_f, y_g, y, eps_y: float = 1.0) -> float:
    """Percentage-form fusion loss, |lam*y_f + (1-lam)*y_g - y| / (y + eps_y).

    The floor eps_y keeps zero-label samples defined; for y > 0 and eps_y -> 0
    this is the plain percentage error against target 1.
    """
    y = np.asarray(y, dtype=np.float64)
    denom = y + eps_y
    inner = (combine(lam, y_f, y_g) - y) / denom
    return float(np.mean(np.abs(inner)))


def total_loss(l_bcms: float, l_vrmp: float, l_moe: float, alpha: float = 1.0, beta: float = 1.0) -> float:
    return l_bcms + alpha * l_vrmp + beta * l_moe


def clamp_prediction(y_hat: np.ndarray | float, tracked: np.ndarray | int) -> np.ndarray:
    """Final prediction never falls below the already-tracked conversions."""
    return np.maximum(np.asarray(y_hat, dtype=np.float64), np.asarray(tracked, dtype=np.float64))


@dataclass
class FusionOutput:
    lam: float
    y_f: float
    y_g: float
    y_hat: float
    y_final: float


@dataclass
class PredictionBatch:
    y_f: np.ndarray
    y_g: np.ndarray
    lam: np.ndarray
    y_hat: np.ndarray
    y_final: np.ndarray
    pcoc_hat: np.ndarray


@dataclass
class _EncodedSet:
    ids: np.ndarray
    dense: np.ndarray
    z: np.ndarray
    tracked: np.ndarray
    label: np.ndarray
    pcoc: np.ndarray
    targets: bcms.PathTargets | None = None


class LdacpModel:
    """Trunk + heads with hand-written gradients; float64 end to end."""

    def __init__(self, config: ModelConfig, encoder: FeatureEncoder, tree: BucketTree,
                 seed: int = 0):
        self.config = config
        self.encoder = encoder
        self.tree = tree
        rng = np.random.default_rng([seed, 7])
        dim = config.embedding_dim
        self.embeddings = {
            fld: EmbeddingTable.init(rng, encoder.vocab_size(fld), dim)
            for fld in SPARSE_FIELDS
        }
        in_dim = dim * len(SPARSE_FIELDS) + len(DENSE_FEATURES)
        self.trunk = DenseNet.build(rng, (in_dim, *config.trunk_dims),
                                    hidden_activation="selu", output_activation="selu")
        width = config.trunk_dims[-1]
        self.edge_head = DenseNet.build(rng, (width, 2 * tree.num_nonleaf))
        self.vrmp_head = DenseNet.build(rng, (width, 1))
        self.gate_head = DenseNet.build(rng, (width, 1))
        self.best_val_mape: float | None = None
        self.best_epoch: int | None = None
        self.train_config: TrainConfig | None = None

    @classmethod
    def initialize(cls, train_ds: CampaignDataset, config: ModelConfig = ModelConfig(),
                   seed: int = 0) -> "LdacpModel":
        """Builds vocabularies and the bucket tree from the training set."""
        encoder = FeatureEncoder.build(train_ds)
        tree = build_tree(train_ds.label, config.num_leaves)
        if config.leaf_value_mode != "distinct-mean":
            from .tree import leaf_expectations
            leaf_expectations(tree, train_ds.label, config.leaf_value_mode)
        return cls(config, encoder, tree, seed=seed)

    # -- parameter plumbing ------------------------------------------------

    def params(self) -> dict:
        out = {f"emb.{fld}": t.rows for fld, t in self.embeddings.items()}
        for prefix, net in self._nets():
            out.update(dict(net.param_items(prefix)))
        return out

    def _nets(self):
        return [("trunk", self.trunk), ("edge", self.edge_head),
                ("vrmp", self.vrmp_head), ("gate", self.gate_head)]

    def _snapshot(self) -> dict:
        return {k: v.copy() for k, v in self.params().items()}

    def _restore(self, snap: dict) -> None:
        for k, v in self.params().items():
            v[...] = snap[k]

    # -- forward / backward -------------------------------------------------

    def _encode(self, ds: CampaignDataset, with_targets: bool) -> _EncodedSet:
        targets = None
        if with_targets:
            targets = bcms.path_targets(self.tree, ds.label, self.config.kernel,
                                        smoothing=self.config.smoothing)
        return _EncodedSet(
            ids=self.encoder.encode_ids(ds),
            dense=self.encoder.encode_dense(ds),
            z=ds.z.astype(np.float64),
            tracked=ds.tracked_conversions.astype(np.float64),
            label=ds.label.astype(np.float64),
            pcoc=vrmp.pcoc_label(ds.z, ds.label),
            targets=targets,
        )

    def _trunk_forward(self, ids: np.ndarray, dense: np.ndarray):
        embs = [self.embeddings[f].lookup(ids[:, j]) for j, f in enumerate(SPARSE_FIELDS)]
        x = np.concatenate(embs + [dense], axis=1)
        out, cache = self.trunk.forward_cached(x)
        return out, cache

    def _heads_forward(self, trunk_out: np.ndarray):
        edge_logits, edge_cache = self.edge_head.forward_cached(trunk_out)
        vr_raw, vr_cache = self.vrmp_head.forward_cached(trunk_out)
        gate_raw, gate_cache = self.gate_head.forward_cached(trunk_out)
        return (edge_logits, edge_cache, vr_raw[:, 0], vr_cache, gate_raw[:, 0], gate_cache)

    def _predict_encoded(self, enc: _EncodedSet, idx: np.ndarray | None = None) -> PredictionBatch:
        ids = enc.ids if idx is None else enc.ids[idx]
        dense = enc.dense if idx is None else enc.dense[idx]
        z = enc.z if idx is None else enc.z[idx]
        tracked = enc.tracked if idx is None else enc.tracked[idx]
        trunk_out, _ = self._trunk_forward(ids, dense)
        edge_logits = self.edge_head.forward(trunk_out)
        probs = bcms.edge_probabilities(edge_logits)
        y_f = bcms.infer_yf(self.tree, probs).y_f
        if self.config.use_vrmp:
            pcoc_hat = vrmp.pcoc_from_raw(self.vrmp_head.forward(trunk_out)[:, 0])
            y_g = vrmp.infer_yg(z, pcoc_hat)
            lam = gate_lambda(self.gate_head.forward(trunk_out)[:, 0])
        else:
            pcoc_hat = np.ones_like(z)
            y_g = y_f.copy()
            lam = np.ones_like(y_f)
        y_hat = lam * y_f + (1.0 - lam) * y_g
        return PredictionBatch(y_f=y_f, y_g=y_g, lam=lam, y_hat=y_hat,
                               y_final=clamp_prediction(y_hat, tracked), pcoc_hat=pcoc_hat)

    def predict_dataset(self, ds: CampaignDataset, batch_size: int = 8192) -> PredictionBatch:
        enc = self._encode(ds, with_targets=False)
        parts = [self._predict_encoded(enc, np.arange(a, min(a + batch_size, len(ds))))
                 for a in range(0, len(ds), batch_size)]
        cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
        return PredictionBatch(*(cat(f) for f in
                                 ("y_f", "y_g", "lam", "y_hat", "y_final", "pcoc_hat")))

    def predict_one(self, sample: CampaignSample) -> FusionOutput:
        pred = self.predict_dataset(CampaignDataset.from_rows([sample]))
        return FusionOutput(lam=float(pred.lam[0]), y_f=float(pred.y_f[0]),
                            y_g=float(pred.y_g[0]), y_hat=float(pred.y_hat[0]),
                            y_final=float(pred.y_final[0]))

    def loss_and_grads(self, enc: _EncodedSet, idx: np.ndarray,
                       train_config: TrainConfig) -> tuple[dict, dict]:
        """Batch losses and gradients for every parameter array."""
        cfg = self.config
        tc = train_config
        ids = enc.ids[idx]
        dense = enc.dense[idx]
        z = enc.z[idx]
        y = enc.label[idx]
        pcoc = enc.pcoc[idx]
        targets = enc.targets.take(idx)
        batch = len(idx)

        trunk_out, trunk_cache = self._trunk_forward(ids, dense)
        edge_logits, edge_cache, vr_raw, vr_cache, gate_raw, gate_cache = \
            self._heads_forward(trunk_out)

        l_bcms, d_edge = bcms.bcms_loss(edge_logits, targets)
        losses = {"bcms": l_bcms, "vrmp": 0.0, "moe": 0.0}
        d_vr = np.zeros(batch)
        d_gate = np.zeros(batch)

        if cfg.use_vrmp:
            pcoc_hat = vrmp.pcoc_from_raw(vr_raw)
            l_vrmp, d_pcoc_hat = vrmp.vrmp_loss(pcoc_hat, pcoc)
            d_vr = tc.alpha * d_pcoc_hat * vrmp.pcoc_raw_grad(vr_raw)
            losses["vrmp"] = l_vrmp

            probs = bcms.edge_probabilities(edge_logits)
            pred = bcms.infer_yf(self.tree, probs)
            y_f = pred.y_f
            y_g = vrmp.infer_yg(z, pcoc_hat)
            lam = gate_lambda(gate_raw)
            denom = y + tc.mape_floor
            inner = (lam * y_f + (1.0 - lam) * y_g - y) / denom
            losses["moe"] = float(np.mean(np.abs(inner)))
            d_inner = np.sign(inner) / batch
            d_gate = tc.beta * d_inner * (y_f - y_g) / denom * lam * (1.0 - lam)
            if tc.routing == "joint":
                d_yf = tc.beta * d_inner * lam / denom
                d_yg = tc.beta * d_inner * (1.0 - lam) / denom
                d_edge = d_edge + bcms.yf_logits_grad(self.tree, probs, pred, d_yf)
                d_vr = d_vr + d_yg * (-z / pcoc_hat**2) * vrmp.pcoc_raw_grad(vr_raw)

        losses["total"] = total_loss(losses["bcms"], losses["vrmp"], losses["moe"],
                                     tc.alpha, tc.beta)

        grads: dict = {}
        d_trunk, edge_grads = self.edge_head.backward(edge_cache, d_edge)
        for k, (dw, db) in enumerate(edge_grads):
            grads[f"edge.w{k}"] = dw
            grads[f"edge.b{k}"] = db
        for prefix, net, cache, d_out in [
            ("vrmp", self.vrmp_head, vr_cache, d_vr[:, None]),
            ("gate", self.gate_head, gate_cache, d_gate[:, None]),
        ]:
            d_in, net_grads = net.backward(cache, d_out)
            d_trunk = d_trunk + d_in
            for k, (dw, db) in enumerate(net_grads):
                grads[f"{prefix}.w{k}"] = dw
                grads[f"{prefix}.b{k}"] = db
        d_x, trunk_grads = self.trunk.backward(trunk_cache, d_trunk)
        for k, (dw, db) in enumerate(trunk_grads):
            grads[f"trunk.w{k}"] = dw
            grads[f"trunk.b{k}"] = db
        dim = cfg.embedding_dim
        for j, fld in enumerate(SPARSE_FIELDS):
            g = np.zeros_like(self.embeddings[fld].rows)
            self.embeddings[fld].scatter_grad(ids[:, j], d_x[:, j * dim:(j + 1) * dim], g)
            grads[f"emb.{fld}"] = g
        return losses, grads

    # -- training -----------------------------------------------------------

    def fit(self, train_ds: CampaignDataset, val_ds: CampaignDataset,
            train_config: TrainConfig = TrainConfig()) -> list[dict]:
        """Mini-batch training with early stopping on validation MAPE.

        Returns the per-epoch history; parameters end at the best-validation
        epoch. Non-finite losses abort with the best parameters restored.
        """
        from .metrics import compliance_rate, mape  # cycle-free: metrics imports nothing from model

        if len(train_ds) == 0 or len(val_ds) == 0:
            raise ValueError("train and validation sets must be non-empty")
        self.train_config = train_config
        enc_train = self._encode(train_ds, with_targets=True)
        enc_val = self._encode(val_ds, with_targets=False)
        params = self.params()
        adam = AdamState.for_params(params, lr=train_config.lr)
        rng = np.random.default_rng([train_config.seed, 11])
        n = len(train_ds)
        best = np.inf
        best_epoch = 0
        snap = self._snapshot()
        history: list[dict] = []
        try:
            for epoch in range(1, train_config.max_epochs + 1):
                perm = rng.permutation(n)
                sums = {"bcms": 0.0, "vrmp": 0.0, "moe": 0.0, "total": 0.0}
                batches = 0
                for a in range(0, n, train_config.batch_size):
                    idx = perm[a:a + train_config.batch_size]
                    losses, grads = self.loss_and_grads(enc_train, idx, train_config)
                    if not np.isfinite(losses["total"]):
                        raise GradientError(f"non-finite loss at epoch {epoch}")
                    adam_step(params, grads, adam)
                    for k in sums:
                        sums[k] += losses[k]
                    batches += 1
                val_pred = self._predict_encoded(enc_val)
                val_mape, _ = mape(val_pred.y_final, enc_val.label)
                val_cr = compliance_rate(val_pred.y_final, enc_val.label)
                record = {"epoch": epoch, "val_mape": val_mape, "val_cr": val_cr}
                record.update({f"train_{k}": v / batches for k, v in sums.items()})
                history.append(record)
                logger.info("epoch %d: train total %.4f, val MAPE %.4f, val CR %.4f",
                            epoch, record["train_total"], val_mape, val_cr)
                if val_mape < best:
                    best = val_mape
                    best_epoch = epoch
                    snap = self._snapshot()
                elif epoch - best_epoch >= train_config.patience:
                    logger.info("early stop at epoch %d (best epoch %d)", epoch, best_epoch)
                    break
        except GradientError as exc:
            self._restore(snap)
            self.best_val_mape = None if not np.isfinite(best) else best
            self.best_epoch = best_epoch or None
            raise TrainingAborted(f"training aborted: {exc}; parameters restored "
                                  f"to epoch {best_epoch}") from exc
        self._restore(snap)
        self.best_val_mape = float(best)
        self.best_epoch = best_epoch
        return history

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "version": CHECKPOINT_VERSION,
            "model_config": {**asdict(self.config),
                             "trunk_dims": list(self.config.trunk_dims)},
            "train_config": None if self.train_config is None else asdict(self.train_config),
            "encoder": self.encoder.to_dict(),
            "tree": self.tree.to_dict(),
            "best_val_mape": self.best_val_mape,
            "best_epoch": self.best_epoch,
        }
        arrays = {f"param.{k}": v for k, v in self.params().items()}
        np.savez(path, meta=np.array(json.dumps(meta)), **arrays)

    @classmethod
    def load(cls, path) -> "LdacpModel":
        with np.load(path, allow_pickle=False) as blob:
            meta = json.loads(str(blob["meta"][()]))
            if meta["version"] != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta['version']}")
            mc = meta["model_config"]
            mc["trunk_dims"] = tuple(mc["trunk_dims"])
            config = ModelConfig(**mc)
            encoder = FeatureEncoder.from_dict(meta["encoder"])
            tree = BucketTree.from_dict(meta["tree"])
            model = cls(config, encoder, tree, seed=0)
            params = model.params()
            for k in params:
                params[k][...] = blob[f"param.{k}"]
            model.best_val_mape = meta["best_val_mape"]
            model.best_epoch = meta["best_epoch"]
            if meta["train_config"] is not None:
                model.train_config = TrainConfig(**meta["train_config"])
        return model
