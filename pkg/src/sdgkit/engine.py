"""Single-source training, checkpoint selection, target evaluation and result tables.

For each (method, source, seed) a network is trained on the source domain's
training split, the epoch with the best held-out source accuracy is kept
(earliest on ties), and that checkpoint is scored on the union of all other
domains.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np
import torch

from . import augment
from .config import Config
from .data import (Collection, DataError, DomainDataset, SyntheticDomainConfig, generate_synthetic_domains,
                   holdout_split, load_camelyon17, make_rng, union_domains)
from .disentangle import disentangle
from .losses import (LossWeights, NonFiniteLossError, classification_loss, contrastive_structure,
                     contrastive_style, reconstruction_loss, total_objective)
from .model import (BackboneConfig, DecoderConfig, NetworkConfig, SDGNet, StylePluginConfig)
from .weights import apply_weights, load_weights

log = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class MethodSpec:
    label: str
    gate: bool
    augment: bool
    contrastive: bool
    reconstruction: bool


METHODS = {
    "erm_noaug": MethodSpec("Vanilla ERM", gate=False, augment=False, contrastive=False, reconstruction=False),
    "erm": MethodSpec("ERM", gate=False, augment=True, contrastive=False, reconstruction=False),
    "condisr": MethodSpec("ConDiSR", gate=True, augment=True, contrastive=True, reconstruction=True),
    # closest in-repo stand-in for contrastive-disentanglement-only SDG
    "condisr_norec": MethodSpec("ConDiSR w/o rec", gate=True, augment=True, contrastive=True, reconstruction=False),
}


# ---------------------------------------------------------------- config adapters

def network_config(cfg: Config, method: str) -> NetworkConfig:
    spec = METHODS[method]
    backbone = BackboneConfig(
        kind=cfg["model.kind"], stem_channels=cfg["model.stem_channels"], stem_stride=cfg["model.stem_stride"],
        widths=tuple(cfg["model.widths"]), pretrained_weights_path=cfg["model.pretrained"],
        plugin_layers=tuple(cfg["plugin.layers"]),
    )
    decoder = DecoderConfig(cfg["decoder.resolution"], tuple(cfg["decoder.widths"])) if spec.reconstruction else None
    plugin = StylePluginConfig(cfg["plugin.kind"], cfg["plugin.p"], cfg["plugin.alpha"])
    return NetworkConfig(backbone=backbone, decoder=decoder, plugin=plugin, use_gate=spec.gate,
                         use_projection=spec.contrastive, tau=cfg["model.tau"], proj_dim=cfg["model.proj_dim"],
                         proj_hidden=cfg["model.proj_hidden"])


def loss_weights(cfg: Config) -> LossWeights:
    return LossWeights(cfg["loss.lambda_cls"], cfg["loss.lambda_str"], cfg["loss.lambda_sty"], cfg["loss.lambda_rec"])


def build_network(cfg: Config, method: str) -> SDGNet:
    net = SDGNet(network_config(cfg, method))
    if cfg["model.pretrained"]:
        apply_weights(net, load_weights(cfg["model.pretrained"]), strict=True, prefixes=("stem.", "body.blocks."))
    return net


def load_datasets(cfg: Config) -> list[DomainDataset]:
    """Datasets named by ``data.source`` (synthetic generation or a WILDS-layout directory)."""
    if cfg["data.source"] == "synthetic":
        syn = SyntheticDomainConfig(n_domains=cfg["data.n_domains"], samples_per_domain=cfg["data.samples_per_domain"])
        return generate_synthetic_domains(syn, cfg["data.seed"])
    root = cfg.data_root()
    if not root:
        raise DataError(f"data.source = {cfg['data.source']} needs data.root")
    return load_camelyon17(root, lazy=cfg["data.lazy"])


class Normalizer:
    """Per-channel ``(x - mean) / std``; ``imagenet`` constants or 0.5/0.5 (``half``)."""

    def __init__(self, mode: str = "half"):
        if mode not in ("imagenet", "half"):
            raise ValueError(f"unknown normalisation {mode!r}")
        self.mode = mode
        mean, std = (IMAGENET_MEAN, IMAGENET_STD) if mode == "imagenet" else ((0.5,) * 3, (0.5,) * 3)
        self.mean = torch.tensor(mean).view(1, 3, 1, 1)
        self.std = torch.tensor(std).view(1, 3, 1, 1)

    @classmethod
    def from_config(cls, cfg: Config) -> "Normalizer":
        mode = cfg["data.norm"]
        if mode == "auto":
            mode = "imagenet" if cfg["model.pretrained"] else "half"
        return cls(mode)

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)


# ---------------------------------------------------------------- records

@dataclass
class EvalResult:
    accuracy: float
    per_domain: dict[int, float]
    n: int


@dataclass
class RunRecord:
    method: str
    source: int
    seed: int
    history: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    val_accuracy: float | None = None
    target_accuracy: float | None = None
    target_per_domain: dict[int, float] = field(default_factory=dict)
    status: str = "ok"
    error: str = ""
    wall_clock: float = 0.0
    variant: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target_per_domain"] = {str(k): v for k, v in self.target_per_domain.items()}
        return d


# ---------------------------------------------------------------- evaluation

@torch.no_grad()
def predict_logits(net: SDGNet, images: np.ndarray, normalize: Normalizer, batch_size: int = 512) -> np.ndarray:
    was_training = net.training
    net.eval()
    out = []
    for i in range(0, len(images), batch_size):
        x = torch.from_numpy(np.asarray(images[i: i + batch_size], dtype=np.float32) / 255.0)
        out.append(net(normalize(x)).reshape(-1).double().numpy())
    net.train(was_training)
    return np.concatenate(out) if out else np.empty(0)


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray, domain_ids: np.ndarray) -> EvalResult:
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty collection")
    correct = (logits >= 0).astype(np.int64) == labels
    per = {int(d): float(correct[domain_ids == d].mean()) for d in np.unique(domain_ids)}
    return EvalResult(float(correct.mean()), per, len(labels))


def evaluate(net: SDGNet, collection: Collection, normalize: Normalizer | None = None,
             batch_size: int = 512) -> EvalResult:
    """Accuracy of ``sigmoid(logit) >= 0.5`` on the inference path (no augmentation or plugins)."""
    if len(collection) == 0:
        raise ValueError("cannot evaluate on an empty collection")
    normalize = normalize or Normalizer()
    logits = predict_logits(net, collection.images, normalize, batch_size)
    return accuracy_from_logits(logits, collection.labels, collection.domain_ids)


# ---------------------------------------------------------------- training

def _aug_configs(cfg: Config):
    return (augment.BezierConfig(cfg["aug.bezier.invert_prob"], cfg["aug.bezier.per_channel"]),
            augment.FdaConfig(cfg["aug.fda.beta_min"], cfg["aug.fda.beta_max"]))


def compute_losses(net: SDGNet, views: list[torch.Tensor], y: torch.Tensor, spec: MethodSpec, cfg: Config,
                   normalize: Normalizer, weights: LossWeights):
    """Forward all views through the network and assemble the objective."""
    n = len(y)
    k = len(views)
    x = torch.cat(views)
    f = net.stem(normalize(x))
    zero = f.new_zeros(())
    c_str = c_sty = rec = zero
    if spec.gate:
        f_str, f_sty = disentangle(f, net.gate)
        f_cls = f_str if cfg["model.gate_cls_grad"] else disentangle(f, net.gate, detach_structure=True)[0]
        if spec.contrastive and net.proj is not None:
            clamp = cfg["loss.clamp"] or None
            p = torch.split(net.proj(f_str), n)
            q = torch.split(net.proj(f_sty), n)
            c_str = contrastive_structure(*p, distance=cfg["loss.distance"], clamp=clamp)
            c_sty = contrastive_style(*q, mode=cfg["loss.style_mode"], margin=cfg["loss.margin"],
                                      distance=cfg["loss.distance"], clamp=clamp)
        if spec.reconstruction and net.decoder is not None:
            recons = torch.split(net.decoder(f_sty), n)
            rec = reconstruction_loss(recons, views, net.decoder.resolution, norm=cfg["loss.rec_norm"])
    else:
        f_cls = f
    logits = torch.split(net.body(f_cls), n)
    cls = classification_loss(logits[:k], y)
    return total_objective(cls, c_str, c_sty, rec, weights)


def _freeze_stem_bn(net: SDGNet):
    net.stem.bn.eval()
    for p in net.stem.bn.parameters():
        p.requires_grad_(False)


def train_one_source(cfg: Config, method: str, train: Collection, val: Collection, seed: int,
                     source: int | None = None, targets: Collection | None = None,
                     progress: Callable[[str], None] | None = None):
    """Train one network; returns ``(RunRecord, best_state_dict, net)``.

    The returned network holds the selected (best-validation) parameters.
    Non-finite losses abort the run with ``status = "aborted"``.
    """
    spec = METHODS[method]
    source = int(train.domain_ids[0]) if source is None else source
    record = RunRecord(method=method, source=source, seed=seed)
    t0 = time.perf_counter()
    init_seed = int(make_rng(seed, f"init/{source}").integers(2**31))
    torch.manual_seed(init_seed)
    net = build_network(cfg, method)
    net.set_plugin_rng(make_rng(seed, f"plugin/{source}"))
    normalize = Normalizer.from_config(cfg)
    weights = loss_weights(cfg)
    opt = torch.optim.Adam([p for p in net.parameters()], lr=cfg["train.lr"])
    batch_rng = make_rng(seed, f"batches/{source}")
    aug_rng = make_rng(seed, f"aug/{source}")
    bez_cfg, fda_cfg = _aug_configs(cfg)
    bs = cfg["train.batch_size"]
    max_steps = cfg["train.max_steps"]

    fixed = None
    if spec.augment and cfg["aug.resample"] == "once":
        trip = augment.make_triplet(np.asarray(train.images[np.arange(len(train))]), aug_rng, bez_cfg, fda_cfg)
        fixed = (trip.x_a, trip.x_b)

    best_state, best_acc, steps = None, -1.0, 0
    try:
        for epoch in range(cfg["train.epochs"]):
            net.train()
            if cfg["model.freeze_stem_bn"]:
                _freeze_stem_bn(net)
            order = batch_rng.permutation(len(train))
            sums: dict[str, float] = {}
            n_batches = 0
            for start in range(0, len(order), bs):
                idx = np.sort(order[start: start + bs])
                raw = np.asarray(train.images[idx])
                xb = raw.astype(np.float32) / np.float32(255.0)
                yb = torch.from_numpy(train.labels[idx])
                if spec.augment:
                    if fixed is not None:
                        xa, xbb = fixed[0][idx], fixed[1][idx]
                    else:
                        trip = augment.make_triplet(raw, aug_rng, bez_cfg, fda_cfg)
                        xa, xbb = trip.x_a, trip.x_b
                    views = [torch.from_numpy(v) for v in (xb, xa, xbb)]
                else:
                    views = [torch.from_numpy(xb)]
                report = compute_losses(net, views, yb, spec, cfg, normalize, weights)
                opt.zero_grad(set_to_none=True)
                report.total.backward()
                opt.step()
                for k, v in report.as_dict().items():
                    sums[k] = sums.get(k, 0.0) + v
                n_batches += 1
                steps += 1
                if max_steps and steps >= max_steps:
                    break
            val_res = evaluate(net, val, normalize, cfg["eval.batch_size"])
            row = {"epoch": epoch, **{k: v / max(n_batches, 1) for k, v in sums.items()},
                   "val_accuracy": val_res.accuracy}
            record.history.append(row)
            if val_res.accuracy > best_acc:
                best_acc = val_res.accuracy
                best_state = copy.deepcopy(net.state_dict())
                record.best_epoch = epoch
            if progress:
                progress(f"{method} C{source} seed {seed} epoch {epoch}: "
                         f"loss {row['total']:.4f} val {val_res.accuracy:.4f}")
            if max_steps and steps >= max_steps:
                break
    except NonFiniteLossError as exc:
        record.status = "aborted"
        record.error = str(exc)
        record.wall_clock = time.perf_counter() - t0
        log.warning("run aborted: %s", exc)
        return record, best_state, net

    net.load_state_dict(best_state)
    record.val_accuracy = best_acc
    if targets is not None:
        res = evaluate(net, targets, normalize, cfg["eval.batch_size"])
        record.target_accuracy = res.accuracy
        record.target_per_domain = res.per_domain
    record.wall_clock = time.perf_counter() - t0
    return record, best_state, net


# ---------------------------------------------------------------- results table

def _percent(v):
    return "" if v is None else f"{100 * v:.6f}"


def _fraction(v):
    return "" if v is None else f"{v:.6f}"


@dataclass
class ResultsTable:
    """Rows of per-source accuracies (fractions) across seeds.

    ``cells[row][source]`` is the list of per-seed accuracies, with ``None``
    for failed runs.  A cell containing a failure is reported as missing.
    """

    rows: list[str]
    sources: list[int]
    seeds: list[int]
    cells: dict[str, dict[int, list[float | None]]]
    title: str = ""

    def cell_values(self, row: str, source: int) -> list[float] | None:
        vals = self.cells.get(row, {}).get(source)
        if not vals or any(v is None for v in vals):
            return None
        return vals

    def mean(self, row, source) -> float | None:
        vals = self.cell_values(row, source)
        return float(np.mean(vals)) if vals is not None else None

    def std(self, row, source) -> float | None:
        vals = self.cell_values(row, source)
        if vals is None:
            return None
        return float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0

    def average(self, row) -> float | None:
        means = [self.mean(row, s) for s in self.sources]
        means = [m for m in means if m is not None]
        return float(np.mean(means)) if means else None

    def is_partial(self, row) -> bool:
        return any(self.mean(row, s) is None for s in self.sources)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["method"]
        for s in self.sources:
            header += [f"C{s}_mean", f"C{s}_std"]
        w.writerow(header + ["average", "partial"])
        fmt = _percent
        for row in self.rows:
            line = [row]
            for s in self.sources:
                line += [fmt(self.mean(row, s)), fmt(self.std(row, s))]
            w.writerow(line + [fmt(self.average(row)), int(self.is_partial(row))])
        return buf.getvalue()

    def to_markdown(self) -> str:
        head = "| | " + " | ".join(f"C{s}" for s in self.sources) + " | Average |"
        sep = "|---|" + "---|" * (len(self.sources) + 1)
        lines = ([f"**{self.title}**", ""] if self.title else []) + [head, sep]
        for row in self.rows:
            cells = []
            for s in self.sources:
                m = self.mean(row, s)
                cells.append("missing" if m is None else f"{100 * m:.1f} ± {100 * self.std(row, s):.1f}")
            avg = self.average(row)
            avg_txt = "missing" if avg is None else f"{100 * avg:.1f}" + ("*" if self.is_partial(row) else "")
            lines.append(f"| {row} | " + " | ".join(cells) + f" | {avg_txt} |")
        if any(self.is_partial(r) for r in self.rows):
            lines += ["", "\\* average over available cells only"]
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return {
            "title": self.title, "sources": self.sources, "seeds": self.seeds,
            "rows": [{
                "method": r,
                "cells": {f"C{s}": {"runs": self.cells.get(r, {}).get(s, []), "mean": self.mean(r, s),
                                    "std": self.std(r, s)} for s in self.sources},
                "average": self.average(r), "partial": self.is_partial(r),
            } for r in self.rows],
        }

    @classmethod
    def from_records(cls, records: Iterable[RunRecord], row_of: Callable[[RunRecord], str], sources, seeds,
                     rows: list[str] | None = None, title: str = "") -> "ResultsTable":
        records = list(records)
        order = rows or list(dict.fromkeys(row_of(r) for r in records))
        cells: dict[str, dict[int, list]] = {r: {s: [] for s in sources} for r in order}
        by_key = {(row_of(r), r.source, r.seed): r for r in records}
        for r in order:
            for s in sources:
                for seed in seeds:
                    rec = by_key.get((r, s, seed))
                    cells[r][s].append(rec.target_accuracy if rec is not None and rec.ok else None)
        return cls(order, list(sources), list(seeds), cells, title)


# ---------------------------------------------------------------- protocol

@dataclass
class RunJob:
    cfg: Config
    method: str
    source: int
    seed: int
    variant: str = ""


@dataclass
class ProtocolResult:
    table: ResultsTable
    records: list[RunRecord]
    checkpoints: dict[tuple[str, str, int, int], dict] = field(default_factory=dict)
    configs: dict[tuple[str, str, int, int], Config] = field(default_factory=dict)


def _split_cache(datasets: list[DomainDataset], cfg: Config):
    return {d.domain_id: holdout_split(d, cfg["data.holdout"], cfg["data.seed"]) for d in datasets}


def _execute(job: RunJob, datasets: list[DomainDataset], splits=None, progress=None):
    splits = splits or _split_cache(datasets, job.cfg)
    train, val = splits[job.source]
    targets = union_domains([d for d in datasets if d.domain_id != job.source])
    record, state, _ = train_one_source(job.cfg, job.method, train, val, job.seed, job.source, targets, progress)
    record.variant = job.variant
    return record, state


def _worker(args):
    job, datasets = args
    torch.set_num_threads(1)
    return _execute(job, datasets)


def run_jobs(jobs: list[RunJob], datasets: list[DomainDataset], workers: int = 1,
             progress: Callable[[str], None] | None = None, keep_checkpoints: bool = False):
    ids = {d.domain_id for d in datasets}
    for job in jobs:
        if job.source not in ids:
            raise ValueError(f"source domain {job.source} not among datasets {sorted(ids)}")
    results = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_worker, [(j, datasets) for j in jobs]))
    else:
        cache = {}
        for job in jobs:
            key = (job.cfg["data.holdout"], job.cfg["data.seed"])
            if key not in cache:
                cache[key] = _split_cache(datasets, job.cfg)
            results.append(_execute(job, datasets, cache[key], progress))
    records = [r for r, _ in results]
    ckpts = {(j.variant, j.method, j.source, j.seed): s for j, (_, s) in zip(jobs, results)} if keep_checkpoints else {}
    return records, ckpts


def _job_configs(jobs: list[RunJob]):
    return {(j.variant, j.method, j.source, j.seed): j.cfg for j in jobs}


def _check_domains(datasets, n=5):
    if len(datasets) < n:
        raise ValueError(f"the protocol needs {n} domains, got {len(datasets)}")


def run_protocol(cfg: Config, datasets: list[DomainDataset], methods: list[str] | None = None,
                 progress=None, keep_checkpoints: bool = False) -> ProtocolResult:
    """Every method x source x seed; each run evaluated on the union of the other domains."""
    _check_domains(datasets, cfg["data.n_domains"] if cfg["data.source"] == "synthetic" else 5)
    methods = list(methods or cfg["experiment.methods"])
    sources, seeds = list(cfg["experiment.sources"]), list(cfg["train.seeds"])
    jobs = [RunJob(cfg, m, s, k, variant=METHODS[m].label) for m in methods for s in sources for k in seeds]
    records, ckpts = run_jobs(jobs, datasets, cfg["train.workers"], progress, keep_checkpoints)
    table = ResultsTable.from_records(records, lambda r: r.variant, sources, seeds,
                                      rows=[METHODS[m].label for m in methods], title="Target accuracy (%)")
    return ProtocolResult(table, records, ckpts, _job_configs(jobs))


RESOLUTIONS = (96, 48, 24)


def run_resolution_ablation(cfg: Config, datasets, progress=None, resolutions=RESOLUTIONS,
                            keep_checkpoints: bool = False) -> ProtocolResult:
    """ConDiSR at each reconstruction resolution; all rows share seeds and splits."""
    _check_domains(datasets, cfg["data.n_domains"] if cfg["data.source"] == "synthetic" else 5)
    sources, seeds = list(cfg["experiment.sources"]), list(cfg["train.seeds"])
    jobs = []
    for r in resolutions:
        sub = cfg.override(**{"decoder.resolution": r})
        jobs += [RunJob(sub, "condisr", s, k, variant=f"{r} x {r}") for s in sources for k in seeds]
    records, ckpts = run_jobs(jobs, datasets, cfg["train.workers"], progress, keep_checkpoints)
    rows = [f"{r} x {r}" for r in resolutions]
    table = ResultsTable.from_records(records, lambda r: r.variant, sources, seeds, rows=rows,
                                      title="Reconstruction resolution ablation (%)")
    return ProtocolResult(table, records, ckpts, _job_configs(jobs))


STYLE_PLUGIN_LABELS = {"mixstyle": "MixStyle", "dsu": "DSU", "csu": "CSU"}


def style_plugin_kinds() -> list[str]:
    from .model import PLUGINS

    builtin = ["mixstyle", "dsu"]
    return builtin + sorted(k for k in PLUGINS if k not in builtin)


def run_style_ablation(cfg: Config, datasets, progress=None, kinds: list[str] | None = None,
                       keep_checkpoints: bool = False) -> ProtocolResult:
    """Each registered plugin on the augmented ERM baseline and on ConDiSR."""
    _check_domains(datasets, cfg["data.n_domains"] if cfg["data.source"] == "synthetic" else 5)
    sources, seeds = list(cfg["experiment.sources"]), list(cfg["train.seeds"])
    jobs, rows = [], []
    for kind in kinds or style_plugin_kinds():
        label = STYLE_PLUGIN_LABELS.get(kind, kind)
        sub = cfg.override(**{"plugin.kind": kind})
        for method, row in (("erm", label), ("condisr", f"{label} + ConDiSR")):
            rows.append(row)
            jobs += [RunJob(sub, method, s, k, variant=row) for s in sources for k in seeds]
    records, ckpts = run_jobs(jobs, datasets, cfg["train.workers"], progress, keep_checkpoints)
    table = ResultsTable.from_records(records, lambda r: r.variant, sources, seeds, rows=rows,
                                      title="Style augmentation plugins (%)")
    return ProtocolResult(table, records, ckpts, _job_configs(jobs))


def records_to_csv(records: list[RunRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "method", "source", "seed", "status", "best_epoch", "val_accuracy", "target_accuracy"])
    for r in records:
        fmt = _fraction
        w.writerow([r.variant, r.method, r.source, r.seed, r.status, "" if r.best_epoch is None else r.best_epoch,
                    fmt(r.val_accuracy), fmt(r.target_accuracy)])
    return buf.getvalue()


def records_to_json(records: list[RunRecord]) -> str:
    return json.dumps([r.to_dict() for r in records], indent=2, allow_nan=True)

