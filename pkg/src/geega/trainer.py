"""Training loop, leave-one-subject-out evaluation and conflict diagnostics."""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import diffcore, losses
from .featuremaps import FeatureSet, Standardizer
from .model import GEEGA, ModelConfig, desk_config, full_config, with_domains

logger = logging.getLogger(__name__)


class ProtocolError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch: int = 32
    epochs: int = 25
    lr: float = 1e-4
    weight_decay: float = 1e-5
    warmup_epochs: int = 5
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    encoder_dropout: float = 0.1
    fc_dropout: float = 0.25
    center_rate: float = 0.5
    val_fraction: float = 0.2
    normalize: bool = True
    model: str = "desk"  # "desk" or "full"
    seed: int = 0
    use_topo: bool = True
    use_spectro: bool = True
    use_git: bool = True
    use_align: bool = True
    git_reduction: str = "sum"  # "sum" (literal) or "mean" over the batch
    select: str = "last"  # model scored on the test subject: "last" epoch or "best_val" loss
    overrides: dict = field(default_factory=dict)  # "encoder.embed_dim" -> 512, "gcn.nodes" -> 6, ...

    def validate(self):
        if self.batch < 1 or self.epochs < 1:
            raise ValueError("batch and epochs must be >= 1")
        if not (self.use_topo or self.use_spectro):
            raise ValueError("at least one of use_topo / use_spectro must be on")
        if self.model not in ("desk", "full"):
            raise ValueError(f"model must be 'desk' or 'full', got {self.model!r}")
        if self.select not in ("last", "best_val"):
            raise ValueError(f"select must be 'last' or 'best_val', got {self.select!r}")
        if self.git_reduction not in ("sum", "mean"):
            raise ValueError(f"git_reduction must be 'sum' or 'mean', got {self.git_reduction!r}")

    @property
    def ablations(self) -> list[str]:
        return [name for name, on in (("topo", self.use_topo), ("spectro", self.use_spectro),
                                      ("git", self.use_git), ("align", self.use_align)) if not on]

    def model_config(self, spectro_channels: int) -> ModelConfig:
        base = desk_config(spectro_channels) if self.model == "desk" else full_config(spectro_channels)
        enc = {"dropout": self.encoder_dropout}
        gcn = {"dropout": self.encoder_dropout}
        for key, value in self.overrides.items():
            section, name = key.split(".", 1)
            (enc if section == "encoder" else gcn)[name] = value
        if "nodes" in gcn or "node_dim" in gcn:
            gcn.setdefault("g2", gcn.get("nodes", base.gcn.nodes) * gcn.get("node_dim", base.gcn.node_dim))
        base = replace(base, fc_dropout=self.fc_dropout,
                       encoder=replace(base.encoder, **enc), gcn=replace(base.gcn, **gcn))
        return with_domains(base, self.use_topo, self.use_spectro)


def active_sites(cfg: TrainConfig) -> list[str]:
    return [s for s, on in (("topo", cfg.use_topo), ("spectro", cfg.use_spectro), ("gcn", True)) if on]


def active_terms(cfg: TrainConfig) -> list[str]:
    sites = active_sites(cfg)
    kinds = ("git", "bce") if cfg.use_git else ("bce",)
    return [f"{k}_{s}" for k in kinds for s in sites]


# --------------------------------------------------------------------------
# metrics

def metrics(predictions, labels) -> tuple[float, float]:
    """Accuracy and macro-F1, both in percent."""
    p = np.asarray(predictions).astype(np.int64).reshape(-1)
    y = np.asarray(labels).astype(np.int64).reshape(-1)
    if p.size == 0 or p.shape != y.shape:
        raise ValueError("metrics need equal-length, non-empty predictions and labels")
    acc = 100.0 * float(np.mean(p == y))
    f1s = []
    for k in sorted(set(y.tolist()) | set(p.tolist())):
        tp = np.sum((p == k) & (y == k))
        fp = np.sum((p == k) & (y != k))
        fn = np.sum((p != k) & (y == k))
        f1s.append(0.0 if tp == 0 else 2.0 * tp / (2.0 * tp + fp + fn))
    return acc, 100.0 * float(np.mean(f1s))


def mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())


def fmt_mean_std(values) -> str:
    m, s = mean_std(values)
    return f"{m:.2f}({s:.2f})"


# --------------------------------------------------------------------------
# conflict diagnostics

CONFLICT_FIELDS = ("epoch", "batch", "pair", "cosine", "conflict")


def write_conflict_log(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CONFLICT_FIELDS)
        for r in records:
            w.writerow([r.epoch, r.batch, r.pair, repr(r.cosine), int(r.conflict)])


def read_conflict_log(path) -> list[losses.ConflictRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [losses.ConflictRecord(int(r["epoch"]), int(r["batch"]), r["pair"], float(r["cosine"]),
                                  bool(int(r["conflict"]))) for r in rows]


def conflict_report(records) -> dict[str, dict[int, float]]:
    """Fraction of conflicting batches, ``{pair: {epoch: fraction}}``."""
    records = list(records)
    if not records:
        raise ValueError("conflict log is empty")
    hits = defaultdict(lambda: defaultdict(list))
    for r in records:
        hits[r.pair][r.epoch].append(bool(r.conflict))
    return {pair: {e: float(np.mean(v)) for e, v in sorted(by_epoch.items())}
            for pair, by_epoch in sorted(hits.items())}


def write_conflict_report(report, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair", "epoch", "conflict_fraction"])
        for pair, by_epoch in report.items():
            for e, frac in by_epoch.items():
                w.writerow([pair, e, repr(frac)])


def window_fraction(report, first: bool, n: int = 5) -> float:
    """Mean conflict fraction over the first or last ``n`` epochs, pooled across pairs."""
    vals = []
    for by_epoch in report.values():
        epochs = sorted(by_epoch)
        pick = epochs[:n] if first else epochs[-n:]
        vals.extend(by_epoch[e] for e in pick)
    return float(np.mean(vals))


# --------------------------------------------------------------------------
# training

@dataclass
class FoldResult:
    test_subject: str
    accuracy: float
    f1: float
    epochs: list[dict] = field(default_factory=list)
    conflicts: list[losses.ConflictRecord] = field(default_factory=list)
    model: GEEGA | None = None
    topo_norm: Standardizer | None = None
    spectro_norm: Standardizer | None = None
    predictions: np.ndarray | None = None


def stratified_split(labels, fraction, rng) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels)
    val = []
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        idx = idx[rng.permutation(idx.size)]
        n_val = int(round(fraction * idx.size))
        if idx.size >= 2:
            n_val = min(max(n_val, 1), idx.size - 1)
        else:
            n_val = 0
        val.extend(idx[:n_val].tolist())
    val = np.array(sorted(val), dtype=np.int64)
    train = np.setdiff1d(np.arange(labels.size), val)
    return train, val


def _tensors(fs: FeatureSet, idx, topo_norm, spectro_norm):
    topo = fs.topo[idx]
    spec = fs.spectro[idx]
    if topo_norm is not None:
        topo, spec = topo_norm(topo), spectro_norm(spec)
    return torch.from_numpy(np.ascontiguousarray(topo)), torch.from_numpy(np.ascontiguousarray(spec))


def loss_terms(out, labels, model: GEEGA, cfg: TrainConfig) -> dict:
    emb = {"topo": out.e_freq, "spectro": out.e_time_freq, "gcn": out.e_gcn}
    logit = {"topo": out.logits_topo, "spectro": out.logits_spectro, "gcn": out.logits_gcn}
    parts = {}
    for site in active_sites(cfg):
        if cfg.use_git:
            g = losses.git_loss(emb[site], labels, model.centers(site))
            parts[f"git_{site}"] = g / labels.numel() if cfg.git_reduction == "mean" else g
        parts[f"bce_{site}"] = losses.bce(logit[site], labels)
    return parts


def site_losses(parts: dict) -> dict:
    out = {}
    for name, value in parts.items():
        site = name.split("_", 1)[1]
        out[site] = out[site] + value if site in out else value
    return out


def _check_finite(parts):
    for name in losses.TERMS:
        if name in parts and not torch.isfinite(parts[name]).all():
            raise TrainingError(f"non-finite loss term {name} = {float(parts[name].detach())}")


def shared_gradients(model: GEEGA, parts: dict, cfg: TrainConfig, *, epoch=0, batch=0):
    """Per-parameter gradients with the GCN/domain pairs aligned on each encoder.

    Returns ``(grads, records)`` where ``grads`` maps every trainable parameter
    to its update gradient.
    """
    groups = diffcore.parameter_groups(model)
    site = site_losses(parts)
    reach = {
        "gcn": [t for t in ("T_topo", "T_spectro", "GCN", "head_GCN") if t in groups],
        "topo": ["T_topo", "head_topo"],
        "spectro": ["T_spectro", "head_spectro"],
    }
    per_site = {}
    for s, loss in site.items():
        params = [p for tag in reach[s] for _, p in groups[tag]]
        flat = diffcore.backward(loss, params)
        pieces = diffcore.unflatten(flat, params)
        per_site[s] = {id(p): g for p, g in zip(params, pieces)}

    grads = {}
    for tag, named in groups.items():
        for _, p in named:
            grads[id(p)] = sum(per_site[s][id(p)] for s in per_site if id(p) in per_site[s])

    records = []
    for domain, tag, pair in (("topo", "T_topo", "GCN-topo"), ("spectro", "T_spectro", "GCN-spectro")):
        if domain not in per_site:
            continue
        params = [p for _, p in groups[tag]]
        g_gcn = diffcore.flatten(per_site["gcn"][id(p)] for p in params)
        g_dom = diffcore.flatten(per_site[domain][id(p)] for p in params)
        h, w, rec = losses.align_pair(g_gcn, g_dom, enabled=cfg.use_align, epoch=epoch, batch=batch, pair=pair)
        records.append(rec)
        if cfg.use_align and rec.conflict:
            losses.check_min_norm(h, g_gcn, g_dom)
            for p, g in zip(params, diffcore.unflatten(h, params)):
                grads[id(p)] = g
    return grads, records


def _eval_loss(model, fs, idx, cfg, norms) -> float:
    model.eval()
    with torch.no_grad():
        topo, spec = _tensors(fs, idx, *norms)
        labels = torch.from_numpy(fs.labels[idx])
        parts = loss_terms(model(topo, spec), labels, model, cfg)
    return float(sum(parts.values()))


def predict(model: GEEGA, topo, spectro, batch=256) -> np.ndarray:
    model.eval()
    preds = []
    with torch.no_grad():
        for i in range(0, len(topo), batch):
            out = model(torch.as_tensor(topo[i:i + batch]), torch.as_tensor(spectro[i:i + batch]))
            preds.append((out.logits_gcn.reshape(-1) >= 0).long().numpy())
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def train_fold(train: FeatureSet, test: FeatureSet | None, cfg: TrainConfig, *, fold: int = 0) -> FoldResult:
    cfg.validate()
    if len(train) == 0:
        raise ProtocolError("empty training split")
    if test is not None and len(test) == 0:
        raise ProtocolError("empty test split")
    seed = cfg.seed * 1000 + fold
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)

    fit_idx, val_idx = stratified_split(train.labels, cfg.val_fraction, rng)
    norms = (None, None)
    if cfg.normalize:
        norms = (Standardizer.fit(train.topo[fit_idx]), Standardizer.fit(train.spectro[fit_idx]))
    model = GEEGA(cfg.model_config(train.spectro.shape[1]))
    optimizer = diffcore.make_optimizer(model, cfg.lr, cfg.weight_decay)
    required = active_terms(cfg)
    params = list(model.parameters())

    history, epochs, conflicts = [], [], []
    best_state = None
    for epoch in range(cfg.epochs):
        lr = cfg.lr * diffcore.lr_schedule(epoch, history, cfg.warmup_epochs, cfg.plateau_factor, cfg.plateau_patience)
        diffcore.set_lr(optimizer, lr)
        model.train()
        order = fit_idx[rng.permutation(fit_idx.size)]
        sums, n_batches, epoch_records = defaultdict(float), 0, []
        for b, start in enumerate(range(0, order.size, cfg.batch)):
            idx = order[start:start + cfg.batch]
            topo, spec = _tensors(train, idx, *norms)
            labels = torch.from_numpy(train.labels[idx])
            out = model(topo, spec)
            parts = loss_terms(out, labels, model, cfg)
            _check_finite(parts)
            total, breakdown = losses.total_loss(parts, required)
            grads, recs = shared_gradients(model, parts, cfg, epoch=epoch, batch=b)
            diffcore.adam_step(params, [grads[id(p)] for p in params], optimizer)
            if cfg.use_git:
                for site, emb in (("topo", out.e_freq), ("spectro", out.e_time_freq), ("gcn", out.e_gcn)):
                    if emb is not None:
                        losses.update_centers(model.centers(site), emb.detach(), labels, cfg.center_rate)
            for k, v in breakdown.items():
                sums[k] += v
            sums["total"] += float(total.detach())
            n_batches += 1
            epoch_records.extend(recs)
        monitor = _eval_loss(model, train, val_idx, cfg, norms) if val_idx.size else sums["total"] / n_batches
        if not math.isfinite(monitor):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        if cfg.select == "best_val" and monitor < min(history, default=math.inf):
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
        history.append(monitor)
        conflicts.extend(epoch_records)
        frac = {}
        for pair in losses.PAIRS:
            flags = [r.conflict for r in epoch_records if r.pair == pair]
            if flags:
                frac[pair] = float(np.mean(flags))
        epochs.append({
            "epoch": epoch, "lr": lr,
            "train": {k: v / n_batches for k, v in sums.items()},
            "val_loss": monitor, "conflict_fraction": frac,
        })
        logger.debug("fold %d epoch %d lr %.2e loss %.4f val %.4f", fold, epoch, lr,
                     sums["total"] / n_batches, monitor)

    if best_state is not None:
        model.load_state_dict(best_state)
    result = FoldResult("", float("nan"), float("nan"), epochs, conflicts, model, *norms)
    if test is not None:
        topo, spec = _tensors(test, np.arange(len(test)), *norms)
        result.predictions = predict(model, topo.numpy(), spec.numpy())
        result.accuracy, result.f1 = metrics(result.predictions, test.labels)
        result.test_subject = ",".join(test.subject_ids)
    return result


@dataclass
class RunMetrics:
    folds: list[FoldResult]
    ablations: list[str]

    @property
    def accuracies(self):
        return [f.accuracy for f in self.folds]

    @property
    def f1s(self):
        return [f.f1 for f in self.folds]

    def summary(self) -> dict:
        acc_m, acc_s = mean_std(self.accuracies)
        f1_m, f1_s = mean_std(self.f1s)
        return {
            "summary": True, "folds": len(self.folds), "ablations": self.ablations,
            "accuracy_mean": acc_m, "accuracy_std": acc_s, "f1_mean": f1_m, "f1_std": f1_s,
            "accuracy": fmt_mean_std(self.accuracies), "f1": fmt_mean_std(self.f1s),
        }

    def records(self):
        """JSON-lines records: one per epoch per fold, one per fold, then the summary."""
        for k, f in enumerate(self.folds):
            for e in f.epochs:
                yield {"fold": k, "test_subject": f.test_subject, **e}
            yield {"fold": k, "test_subject": f.test_subject, "final": True, "accuracy": f.accuracy, "f1": f.f1}
        yield self.summary()


def loso_splits(subjects) -> list[tuple[str, np.ndarray, np.ndarray]]:
    subjects = np.asarray(subjects)
    ids = sorted(set(subjects.tolist()))
    if len(ids) < 2:
        raise ProtocolError(f"leave-one-subject-out needs >= 2 subjects, got {len(ids)}")
    return [(s, np.flatnonzero(subjects != s), np.flatnonzero(subjects == s)) for s in ids]


def loso(features: FeatureSet, cfg: TrainConfig) -> RunMetrics:
    folds = []
    for k, (subject, tr, te) in enumerate(loso_splits(features.subjects)):
        res = train_fold(features.take(tr), features.take(te), cfg, fold=k)
        res.test_subject = subject
        logger.info("fold %d (%s): accuracy %.2f f1 %.2f", k, subject, res.accuracy, res.f1)
        folds.append(res)
    return RunMetrics(folds, cfg.ablations)


def save_fold_checkpoint(res: FoldResult, cfg: TrainConfig, path) -> None:
    extra = {}
    if res.topo_norm is not None:
        extra = {
            "norm.topo.mean": (res.topo_norm.mean, "norm"), "norm.topo.std": (res.topo_norm.std, "norm"),
            "norm.spectro.mean": (res.spectro_norm.mean, "norm"), "norm.spectro.std": (res.spectro_norm.std, "norm"),
        }
    meta = {"train_config": asdict(cfg), "spectro_channels": res.model.cfg.spectro_channels,
            "test_subject": res.test_subject}
    diffcore.save_checkpoint(res.model, path, meta, extra)


def load_fold_checkpoint(path):
    from .container import Container
    box = Container.load(path)
    cfg = TrainConfig(**box.meta["train_config"])
    model = GEEGA(cfg.model_config(box.meta["spectro_channels"]))
    diffcore.load_checkpoint(model, path)
    norms = (None, None)
    if "norm.topo.mean" in box:
        norms = (Standardizer(box["norm.topo.mean"].astype(np.float64), box["norm.topo.std"].astype(np.float64)),
                 Standardizer(box["norm.spectro.mean"].astype(np.float64), box["norm.spectro.std"].astype(np.float64)))
    return model, cfg, norms


def evaluate(model: GEEGA, features: FeatureSet, norms) -> tuple[float, float]:
    topo, spec = _tensors(features, np.arange(len(features)), *norms)
    return metrics(predict(model, topo.numpy(), spec.numpy()), features.labels)
