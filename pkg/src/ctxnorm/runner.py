"""Experiment orchestration: data preparation, mixture fitting, training, evaluation, results."""
import csv
import io
import json
import logging
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__, data, gmm, net as nn, norm
from .errors import ConfigError, CtxNormError, NumericalError
from .metrics import GradVarianceTracker, compute_metrics, confusion_matrix
from .tensor_core import channel_vectors

log = logging.getLogger(__name__)

CSV_HEADER = ["run_id", "seed", "epoch", "split", "loss", "accuracy", "precision", "recall", "f1",
              "grad_var_max", "grad_var_mean", "wall_time_s"]
CONTEXT_STRATEGIES = ("given", "none", "superclass_map", "domain_tag", "gmm")


@dataclass
class ExperimentConfig:
    run_id: str = "run"
    preset: str = "mlp2"
    widths: list = None
    norm_choice: object = "bn"
    norm_position: int = None
    norm_affine: bool = False
    force_identity_norm: bool = False
    epsilon: float = norm.EPSILON
    mixture_k: int = 3
    context_init: str = "identity"
    dataset: dict = field(default_factory=dict)
    val_fraction: float = 0.2
    standardize: bool = False
    context_strategy: str = "given"
    superclass_map: str = None
    gmm_path: str = None
    gmm_tap: str = "slot"
    gmm_sample: int = 10000
    lr: object = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    opt_eps: float = 1e-8
    schedule: str = "constant"
    batch_size: int = 256
    eval_batch_size: int = None
    epochs: int = 10
    seeds: list = field(default_factory=lambda: [0])
    eval_mode: str = "auto"
    val_contexts_known: bool = True
    early_stopping: bool = False
    patience: int = 10
    record_wall_time: bool = False
    output_dir: str = "results"

    @classmethod
    def from_dict(cls, doc, base_dir="."):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        cfg = cls(**doc)
        cfg._resolve_paths(base_dir)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_dict(doc, os.path.dirname(os.path.abspath(path)))

    def _resolve_paths(self, base):
        def fix(p):
            return p if p is None or os.path.isabs(p) else os.path.join(base, p)
        self.superclass_map = fix(self.superclass_map)
        self.gmm_path = fix(self.gmm_path)
        ds = dict(self.dataset)
        for key in ("path", "train_images", "train_labels", "test_images", "test_labels"):
            if key in ds:
                ds[key] = fix(ds[key])
        self.dataset = ds

    def validate(self):
        if not self.seeds:
            raise ConfigError("seeds must be a non-empty list")
        if self.preset not in nn.PRESET_DEFAULTS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        if self.context_strategy not in CONTEXT_STRATEGIES:
            raise ConfigError(f"context_strategy must be one of {CONTEXT_STRATEGIES}")
        if self.eval_mode not in ("auto", "per_context", "aggregate"):
            raise ConfigError(f"eval_mode {self.eval_mode!r} not understood")
        if self.context_init not in ("identity", "data"):
            raise ConfigError(f"context_init {self.context_init!r} not understood")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"schedule {self.schedule!r} not understood")
        if self.gmm_tap not in ("slot", "input"):
            raise ConfigError(f"gmm_tap {self.gmm_tap!r} not understood")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        kind = self.dataset.get("kind")
        if kind not in ("synthetic", "domain_synthetic", "idx"):
            raise ConfigError(f"dataset.kind must be synthetic, domain_synthetic or idx, got {kind!r}")
        paths = [self.superclass_map, self.gmm_path]
        paths += [self.dataset.get(k) for k in ("path", "train_images", "train_labels",
                                                "test_images", "test_labels")]
        for p in paths:
            if p is not None and not os.path.exists(p):
                raise ConfigError(f"referenced file {p} does not exist")
        if self.context_strategy == "superclass_map" and self.superclass_map is None:
            raise ConfigError("superclass_map strategy needs a superclass_map path")

    @property
    def lrs(self):
        return list(self.lr) if isinstance(self.lr, (list, tuple)) else [self.lr]

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------
# data

def prepare_data(cfg):
    """Return ``(train, val)`` datasets with contexts per the configured strategy (except gmm)."""
    ds = cfg.dataset
    kind = ds["kind"]
    if kind == "synthetic":
        spec = data.load_synth_spec(ds["path"]) if "path" in ds else ds.get("spec", {})
        full = data.synth_mixture_dataset(spec)
        train, val = data.split(full, cfg.val_fraction, int(spec.get("seed", 0)))
    elif kind == "domain_synthetic":
        n_train = int(ds.get("target_train_per_class", 5))
        n_test = int(ds.get("target_test_per_class", 200))
        src, tgt = data.synth_domain_dataset(
            int(ds.get("classes", 4)), int(ds.get("dim", 16)), int(ds.get("samples_per_class", 300)),
            float(ds.get("mean_scale", 1.0)), float(ds.get("noise_scale", 2.0)),
            float(ds.get("shift", 12.0)), float(ds.get("scale", 2.5)),
            target_samples_per_class=n_train + n_test, seed=int(ds.get("seed", 0)))
        tgt_train, tgt_test = data.head_per_class(tgt, n_train)
        train = data.merge_domains(src, tgt_train)
        val = data.assign_contexts(tgt_test, "domain_tag", domain=1, t=2)
    else:
        train = data.load_idx_dataset(ds["train_images"], ds["train_labels"], ds.get("train_limit"))
        val = data.load_idx_dataset(ds["test_images"], ds["test_labels"], ds.get("test_limit"))
        n_cls = max(train.num_classes, val.num_classes)
        train = data.LabeledDataset(train.features, train.labels, train.contexts, 1, n_cls,
                                    train.provenance)
        val = data.LabeledDataset(val.features, val.labels, val.contexts, 1, n_cls, val.provenance)
    if cfg.standardize:
        stats = data.standardization_stats(train)
        train, val = data.standardize(train, stats), data.standardize(val, stats)
    strategy = cfg.context_strategy
    if strategy == "none":
        train = data.assign_contexts(train, "domain_tag", domain=0, t=1)
        val = data.assign_contexts(val, "domain_tag", domain=0, t=1)
    elif strategy == "superclass_map":
        mapping, t = data.load_superclass_map(cfg.superclass_map)
        train = data.assign_contexts(train, "superclass_map", mapping=mapping, t=t)
        val = data.assign_contexts(val, "superclass_map", mapping=mapping, t=t)
    elif strategy == "domain_tag" and kind != "domain_synthetic":
        raise ConfigError("domain_tag contexts need a domain_synthetic dataset")
    if strategy != "gmm" and train.t != val.t:
        t = max(train.t, val.t)
        train = data.LabeledDataset(train.features, train.labels, train.contexts, t,
                                    train.num_classes, train.provenance)
        val = data.LabeledDataset(val.features, val.labels, val.contexts, t, val.num_classes,
                                  val.provenance)
    return train, val


def build_network(cfg, train, seed):
    choices = "identity" if cfg.force_identity_norm else cfg.norm_choice
    if cfg.force_identity_norm and isinstance(cfg.norm_choice, (list, tuple)):
        choices = ["identity"] * len(cfg.norm_choice)
    t = cfg.mixture_k if cfg.context_strategy == "gmm" else train.t
    return nn.build_preset(cfg.preset, train.input_shape, train.num_classes, cfg.widths, choices,
                           cfg.norm_position, t, cfg.mixture_k, cfg.epsilon, cfg.norm_affine,
                           seed, resolve_inference(cfg))


def resolve_inference(cfg):
    if cfg.eval_mode != "auto":
        return cfg.eval_mode
    return "per_context" if cfg.val_contexts_known else "aggregate"


def slot_layer_index(net, cfg):
    """Index of the normalization layer in the configured slot."""
    slots = net.norm_layers()
    if isinstance(cfg.norm_choice, (list, tuple)):
        pos = 1 + next((i for i, c in enumerate(cfg.norm_choice) if c != "bn"), 0)
    else:
        pos = nn.PRESET_DEFAULTS[cfg.preset]["position"] if cfg.norm_position is None else cfg.norm_position
    return slots[pos - 1][0]


def tap_activations(net, features, stop, batch_size=1024):
    """Eval-mode activations entering layer ``stop``."""
    if any(layer.uses_context for layer in net.layers[:stop]):
        raise ConfigError("cannot tap activations behind a context-consuming layer")
    outs = []
    for start in range(0, features.shape[0], batch_size):
        out, _ = nn.net_forward(net, features[start:start + batch_size], None, train=False,
                                stop=stop)
        outs.append(out)
    return np.concatenate(outs)


def context_features(net, cfg, dataset):
    """Per-sample vectors the context mixture is fitted on / evaluated at."""
    if cfg.gmm_tap == "input":
        return dataset.flat_features()
    acts = tap_activations(net, dataset.features, slot_layer_index(net, cfg))
    return acts.reshape(acts.shape[0], acts.shape[1], -1).mean(axis=2)


def _sample_rows(x, n, seed):
    if x.shape[0] <= n:
        return x
    idx = np.sort(np.random.default_rng(seed).choice(x.shape[0], size=n, replace=False))
    return x[idx]


def fit_context_gmm(net, cfg, train, seed):
    feats = _sample_rows(context_features(net, cfg, train), cfg.gmm_sample, seed)
    return gmm.em_fit(feats, cfg.mixture_k, seed=seed)


def fit_mixture_layers(net, cfg, train, seed):
    for i, layer in enumerate(net.layers):
        if isinstance(layer, norm.MixtureNorm):
            sample = _sample_rows(train.features, cfg.gmm_sample, seed)
            acts = tap_activations(net, sample, i)
            rows = _sample_rows(channel_vectors(acts), cfg.gmm_sample, seed)
            layer.model = gmm.em_fit(rows, layer.k, seed=seed)
            log.info("fitted MN layer %d: K=%d, %d EM iterations, loglik %.4f",
                     i, layer.k, layer.model.iters, layer.model.loglik)


def init_contexts_from_data(net, train):
    """Warm-start context layers at the per-context moments of their inputs."""
    for i, layer in enumerate(net.layers):
        if not isinstance(layer, (norm.ContextNorm, norm.ContextNormBase)):
            continue
        acts = tap_activations(net, train.features, i)
        acts = acts.reshape(acts.shape[0], acts.shape[1], -1)
        t = layer.table.t if isinstance(layer, norm.ContextNorm) else layer.t
        for r in range(t):
            rows = acts[train.contexts == r]
            if rows.shape[0] == 0:
                continue
            mean = rows.mean(axis=(0, 2))
            var = rows.var(axis=(0, 2)) + 1e-3
            if isinstance(layer, norm.ContextNorm):
                layer.table.mu[r] = mean
                layer.table.s[r] = norm.softplus_inv(np.maximum(var - layer.table.var_floor, 1e-3))
            else:
                layer.params["w_mu"][r] = mean - layer.params["b_mu"]
                layer.params["w_var"][r] = norm.softplus_inv(var) - layer.params["b_var"]


# --------------------------------------------------------------------------
# training

def evaluate(net, dataset, batch_size):
    """Mean loss and confusion matrix in eval mode."""
    total_loss = 0.0
    preds = []
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        logits, _ = nn.net_forward(net, dataset.features[sl], dataset.contexts[sl], train=False)
        loss, _ = nn.softmax_cross_entropy(logits, dataset.labels[sl])
        total_loss += loss * logits.shape[0]
        preds.append(logits.argmax(axis=1))
    loss = total_loss / len(dataset)
    if not np.isfinite(loss):
        raise NumericalError("non-finite evaluation loss")
    return loss, confusion_matrix(dataset.labels, np.concatenate(preds), dataset.num_classes)


@dataclass
class MetricsRecord:
    run_id: str
    seed: int
    epoch: int
    split: str
    loss: float
    accuracy: float
    precision: float
    recall: float
    f1: float
    grad_var_max: float = None
    grad_var_mean: float = None
    wall_time_s: float = 0.0


def _records(run_id, seed, epoch, splits, grad_stats, wall):
    out = []
    for name, (loss, cm) in splits:
        m = compute_metrics(cm)
        out.append(MetricsRecord(run_id, seed, epoch, name, loss, m["accuracy"], m["precision"],
                                 m["recall"], m["f1"], grad_stats[0], grad_stats[1], wall))
    return out


@dataclass
class SeedRun:
    seed: int
    lr: float
    net: object = None
    opt: object = None
    context_model: object = None
    records: list = field(default_factory=list)
    error: str = None
    exit_code: int = 0
    wall_time_s: float = 0.0


def setup_seed(cfg, train, val, seed, context_model=None):
    """Build the network, fit mixtures and contexts.  Returns ``(net, train, val, ctx_model)``."""
    net = build_network(cfg, train, seed)
    if cfg.context_strategy == "gmm":
        if context_model is None and cfg.gmm_path is not None:
            context_model = gmm.GmmModel.load(cfg.gmm_path)
        if context_model is None:
            context_model = fit_context_gmm(net, cfg, train, seed)
        train = data.assign_contexts(train, "gmm", model=context_model,
                                     features=context_features(net, cfg, train))
        val = data.assign_contexts(val, "gmm", model=context_model,
                                   features=context_features(net, cfg, val))
    fit_mixture_layers(net, cfg, train, seed)
    if cfg.context_init == "data":
        init_contexts_from_data(net, train)
    return net, train, val, context_model


def train_seed(cfg, train, val, seed, lr, run_id, resume=None, on_epoch=None):
    """Train one seed; returns a :class:`SeedRun`.  ``resume`` is a checkpoint document."""
    run = SeedRun(seed, lr)
    t0 = time.perf_counter()
    start_epoch = 0
    if resume is not None:
        net, opt, extra = nn.restore_checkpoint(resume)
        start_epoch = int(extra.get("epoch", 0))
        model = None if extra.get("context_model") is None else gmm.GmmModel.from_dict(extra["context_model"])
        _, train, val, model = _contexts_only(cfg, net, train, val, model)
    else:
        net, train, val, model = setup_seed(cfg, train, val, seed)
        opt = nn.AdamW(lr, cfg.beta1, cfg.beta2, cfg.opt_eps, cfg.weight_decay)
    run.net, run.opt, run.context_model = net, opt, model
    eval_bs = cfg.eval_batch_size or cfg.batch_size
    wall = lambda t: (time.perf_counter() - t) if cfg.record_wall_time else 0.0

    if start_epoch == 0:
        te = time.perf_counter()
        splits = [("train", evaluate(net, train, eval_bs)), ("val", evaluate(net, val, eval_bs))]
        run.records += _records(run_id, seed, 0, splits, (None, None), wall(te))
    steps_per_epoch = -(-len(train) // cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    best_val, stale = np.inf, 0
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        te = time.perf_counter()
        tracker = GradVarianceTracker()
        for xb, yb, cb in data.batch_iter(train, cfg.batch_size, seed=_epoch_seed(seed, epoch)):
            if cfg.schedule == "cosine":
                opt.lr = nn.cosine_lr(lr, opt.t, total_steps)
            net.zero_grad()
            logits, caches = nn.net_forward(net, xb, cb, train=True)
            loss, grad = nn.softmax_cross_entropy(logits, yb)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite training loss at epoch {epoch}")
            nn.net_backward(net, grad, caches)
            for name, _, g in net.parameters():
                if not np.all(np.isfinite(g)):
                    raise NumericalError(f"non-finite gradient for {name} at epoch {epoch}")
            tracker.update((name, g) for name, _, g in net.parameters())
            nn.adamw_step(net, opt)
        splits = [("train", evaluate(net, train, eval_bs)), ("val", evaluate(net, val, eval_bs))]
        run.records += _records(run_id, seed, epoch, splits, tracker.result(), wall(te))
        if on_epoch is not None:
            on_epoch(run, epoch)
        if cfg.early_stopping:
            val_loss = splits[1][1][0]
            if val_loss < best_val:
                best_val, stale = val_loss, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    log.info("seed %d: early stop at epoch %d", seed, epoch)
                    break
    run.wall_time_s = time.perf_counter() - t0
    return run


def _contexts_only(cfg, net, train, val, model):
    if cfg.context_strategy == "gmm":
        if model is None:
            raise ConfigError("checkpoint lacks the context mixture needed for gmm contexts")
        train = data.assign_contexts(train, "gmm", model=model, features=context_features(net, cfg, train))
        val = data.assign_contexts(val, "gmm", model=model, features=context_features(net, cfg, val))
    return net, train, val, model


def _epoch_seed(seed, epoch):
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def checkpoint_extra(run, epoch):
    return {"epoch": epoch, "seed": run.seed, "lr": run.lr,
            "context_model": None if run.context_model is None else run.context_model.to_dict()}


def run_experiment(cfg, out_dir=None, resume=None, checkpoint_every=0):
    """Train every (lr, seed) pair and write metrics CSV + JSON summary per lr.

    Returns ``{run_id: [SeedRun, ...]}``.  A failing seed is logged with its
    coordinates and recorded; sibling seeds continue.
    """
    out_dir = out_dir or cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    train, val = prepare_data(cfg)
    results = {}
    for lr in cfg.lrs:
        run_id = cfg.run_id if len(cfg.lrs) == 1 else f"{cfg.run_id}-lr{lr:g}"
        runs = []
        for seed in cfg.seeds:
            ckpt_path = os.path.join(out_dir, f"{run_id}_seed{seed}.ckpt.json")

            def on_epoch(run, epoch, path=ckpt_path):
                if checkpoint_every and epoch % checkpoint_every == 0:
                    _atomic_write(path, json.dumps(nn.checkpoint_dict(run.net, run.opt,
                                                                      checkpoint_extra(run, epoch))))
            try:
                run = train_seed(cfg, train, val, seed, lr, run_id, resume, on_epoch)
                last = max((r.epoch for r in run.records), default=0)
                _atomic_write(ckpt_path, json.dumps(nn.checkpoint_dict(run.net, run.opt,
                                                                       checkpoint_extra(run, last))))
            except CtxNormError as exc:
                log.error("run %s seed %d failed: %s", run_id, seed, exc)
                run = SeedRun(seed, lr, error=f"{type(exc).__name__}: {exc}",
                              exit_code=exit_code_for(exc))
            runs.append(run)
        records = [r for run in runs for r in run.records]
        emit_results(records, out_dir, run_id, cfg, runs)
        results[run_id] = runs
    return results


def exit_code_for(exc):
    from .errors import DomainError, FormatError, ShapeError
    if isinstance(exc, NumericalError):
        return 4
    if isinstance(exc, ConfigError):
        return 2
    if isinstance(exc, (FormatError, ShapeError, DomainError)):
        return 3
    return 1


# --------------------------------------------------------------------------
# results

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def records_to_csv(records):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for rec in records:
        writer.writerow([_fmt(getattr(rec, k)) for k in CSV_HEADER])
    return buf.getvalue()


def read_metrics_csv(path_or_text):
    """Parse a metrics CSV back into :class:`MetricsRecord` objects."""
    if "\n" in path_or_text:
        text = path_or_text
    else:
        with open(path_or_text) as fh:
            text = fh.read()
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != CSV_HEADER:
        raise ConfigError(f"unexpected metrics header {reader.fieldnames}")
    out = []
    for row in reader:
        f = lambda k: None if row[k] == "" else float(row[k])
        out.append(MetricsRecord(row["run_id"], int(row["seed"]), int(row["epoch"]), row["split"],
                                 f("loss"), f("accuracy"), f("precision"), f("recall"), f("f1"),
                                 f("grad_var_max"), f("grad_var_mean"), f("wall_time_s")))
    return out


def _atomic_write(path, text):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def best_epoch(records, seed=None):
    """Record with the highest val accuracy; ties go to the earliest epoch."""
    vals = [r for r in records if r.split == "val" and (seed is None or r.seed == seed)]
    if not vals:
        return None
    return min(vals, key=lambda r: (-r.accuracy, r.epoch))


def summarize(records, cfg=None, runs=()):
    seeds = sorted({r.seed for r in records})
    per_seed = {}
    for s in seeds:
        b = best_epoch(records, s)
        per_seed[str(s)] = asdict(b) if b else None
    return {
        "run_id": records[0].run_id if records else (cfg.run_id if cfg else None),
        "code_version": __version__,
        "best": per_seed,
        "failures": {str(r.seed): r.error for r in runs if r.error},
        "wall_time_s": {str(r.seed): r.wall_time_s for r in runs},
        "config": cfg.to_dict() if cfg is not None else None,
    }


def emit_results(records, out_dir, run_id, cfg=None, runs=()):
    """Write ``<run_id>.csv`` and ``<run_id>_summary.json``; returns both paths."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{run_id}.csv")
    json_path = os.path.join(out_dir, f"{run_id}_summary.json")
    try:
        _atomic_write(csv_path, records_to_csv(records))
        _atomic_write(json_path, json.dumps(summarize(records, cfg, runs), indent=2))
    except OSError as exc:
        raise OSError(f"could not write results to {out_dir}: {exc}") from exc
    return csv_path, json_path
