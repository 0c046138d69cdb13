"""Adam training of the ELBO, validation-tracked checkpointing, per-horizon
RMSE/NLL evaluation, and kinematic baselines."""

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, backward
from .data import (EpisodeBatch, NormalizationStats, TARGET_HZ,
                   make_episode, scenes_from_doc, scenes_to_doc)
from .errors import DataError, FormatError, NumericError
from .model import (GranpModel, LOG_2PI, ModelConfig, PredictiveDistribution,
                    PreparedBatch, prepare_scene, sample_latent)

CHECKPOINT_VERSION = 1
HORIZONS_S = (1, 2, 3, 4, 5)
SAMPLE_DT = 1.0 / TARGET_HZ


class AdamState:
    """Adam with bias correction; lr 5e-4 and canonical moment decays."""

    def __init__(self, params, lr: float = 5e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise DataError("duplicate parameter names")
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, grads: dict):
        """One update from a gradient map keyed by parameter name."""
        missing = [p.name for p in self.params if p.name not in grads]
        if missing:
            raise DataError(f"adam_step: missing gradient for {missing[0]!r}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            g = grads[p.name]
            m = self.m[p.name] = self.beta1 * self.m[p.name] + (1 - self.beta1) * g
            v = self.v[p.name] = self.beta2 * self.v[p.name] + (1 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainSettings:
    epochs: int = 200
    lr: float = 5e-4
    batch_size: int = 32
    val_fraction: float = 0.1
    reference_size: int = 64
    patience: int = 0       # epochs without val improvement; 0 disables


@dataclass
class TrainResult:
    model: GranpModel
    stats: NormalizationStats
    reference: list               # raw scenes persisted as inference context
    history: list                 # per-epoch dicts: loss, recon_nll, kl
    val_nll: list                 # per-epoch validation NLL
    best_epoch: int


def validation_nll(model: GranpModel, val_prepared, ref_prepared) -> float:
    """Deterministic held-out reconstruction NLL per target per step,
    normalized units: z is the context-prior mean (zero noise)."""
    h_ctx, ego_ctx, _ = model.encode_pairs(ref_prepared)
    feats = model.pair_features(
        ego_ctx, np.stack([sc.future for sc in ref_prepared]))
    r_ctx = model.enc_det.encode(feats)
    prior = model.latent_path(model.enc_lat.encode(feats))
    z = sample_latent(prior, np.zeros(model.config.latent))
    h_t, _, _ = model.encode_pairs(val_prepared)
    r_star = model.deterministic_path(h_t, h_ctx, r_ctx)
    mu, sigma = model.decode(h_t, r_star, z)
    y = np.stack([sc.future for sc in val_prepared])
    nll = (0.5 * LOG_2PI + np.log(sigma.data)
           + np.square(y - mu.data) / (2.0 * np.square(sigma.data)))
    return float(nll.sum() / (len(val_prepared) * model.config.t_f))


def train(scenes, config: ModelConfig, settings: TrainSettings, seed=0) -> TrainResult:
    """Seeded 90/10 split, per-epoch episode batches, Adam on the ELBO;
    keeps the parameters of the best validation epoch."""
    if settings.epochs < 1:
        raise DataError(f"epochs must be >= 1, got {settings.epochs}")
    n = len(scenes)
    rng = np.random.default_rng(seed)
    n_val = max(1, int(round(settings.val_fraction * n)))
    if n - n_val < 3:
        raise DataError(f"need at least {n_val + 3} scenes, got {n}")
    perm = rng.permutation(n)
    val_raw = [scenes[i] for i in perm[:n_val]]
    train_raw = [scenes[i] for i in perm[n_val:]]

    stats = NormalizationStats.fit(train_raw)
    prep_train = [prepare_scene(s, stats) for s in train_raw]
    prep_val = [prepare_scene(s, stats) for s in val_raw]
    ref_n = min(settings.reference_size, len(train_raw))
    ref_idx = rng.choice(len(train_raw), size=ref_n, replace=False)
    ref_raw = [train_raw[i] for i in ref_idx]
    ref_prep = [prep_train[i] for i in ref_idx]

    model = GranpModel(config, seed=seed)
    adam = AdamState(model.parameters(), lr=settings.lr)
    history = []
    val_hist = []
    best_val = math.inf
    best_params = None
    best_epoch = 0
    since_best = 0
    for epoch in range(1, settings.epochs + 1):
        order = rng.permutation(len(prep_train))
        sums = np.zeros(3)
        batches = 0
        for b, start in enumerate(range(0, len(order), settings.batch_size)):
            chunk = [prep_train[i] for i in order[start:start + settings.batch_size]]
            if len(chunk) < 3:
                continue    # tail too small to form an episode
            ep = make_episode(chunk, rng)
            noise = rng.standard_normal(config.latent)
            model.zero_grads()
            with Tape() as tape:
                try:
                    loss, diag = model.elbo_loss(
                        PreparedBatch(scenes=ep.scenes, m=ep.m), noise)
                except NumericError as err:
                    # Divergence can surface as non-finite sigmas inside the
                    # forward pass before a loss value exists.
                    raise NumericError(
                        f"non-finite loss at epoch {epoch}, batch {b}") from err
            if not np.isfinite(loss.data).all():
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch {b}")
            grads = backward(tape, loss, model.parameters())
            adam.step(grads)
            sums += (loss.item(), diag["recon_nll"], diag["kl"])
            batches += 1
        avg = sums / max(batches, 1)
        history.append({"epoch": epoch, "loss": avg[0],
                        "recon_nll": avg[1], "kl": avg[2]})
        v = validation_nll(model, prep_val, ref_prep)
        val_hist.append(v)
        if v < best_val:
            best_val = v
            best_epoch = epoch
            best_params = [p.data.copy() for p in model.parameters()]
            since_best = 0
        else:
            since_best += 1
            if settings.patience and since_best >= settings.patience:
                break
    for p, data in zip(model.parameters(), best_params):
        p.data = data
    return TrainResult(model=model, stats=stats, reference=ref_raw,
                       history=history, val_nll=val_hist,
                       best_epoch=best_epoch)


def save_history(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "recon_nll", "kl"])
        for row in history:
            writer.writerow([row["epoch"], repr(row["loss"]),
                             repr(row["recon_nll"]), repr(row["kl"])])


# ---------------------------------------------------------------------------
# Evaluation

@dataclass
class EvalReport:
    rmse_m: dict                  # "1s".."5s" -> meters
    nll_nats: dict
    n_scenes: int
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"rmse_m": self.rmse_m, "nll_nats": self.nll_nats,
                           "n_scenes": self.n_scenes},
                          sort_keys=True, separators=(",", ":"))


def _horizon_steps(t_f: int):
    steps = {}
    for h in HORIZONS_S:
        idx = h * TARGET_HZ - 1
        if idx >= t_f:
            raise DataError(f"horizon {h} s needs step {idx + 1}, but the "
                            f"future has {t_f}")
        steps[f"{h}s"] = idx
    return steps


def metrics_from_predictions(predictions, futures_m, t_f: int,
                             config: dict | None = None) -> EvalReport:
    """Per-horizon RMSE of the pooled mean and NLL of the truth under the
    pooled per-axis Gaussians, both in meters."""
    steps = _horizon_steps(t_f)
    mean = np.stack([p.mean for p in predictions])      # [N, t_f, 2]
    sd = np.stack([p.std for p in predictions])
    truth = np.stack(futures_m)
    err2 = np.square(mean - truth).sum(axis=2)          # [N, t_f]
    nll = (0.5 * LOG_2PI + np.log(sd)
           + np.square(truth - mean) / (2.0 * np.square(sd))).sum(axis=2)
    rmse = {k: float(np.sqrt(err2[:, i].mean())) for k, i in steps.items()}
    nlls = {k: float(nll[:, i].mean()) for k, i in steps.items()}
    return EvalReport(rmse_m=rmse, nll_nats=nlls, n_scenes=len(predictions),
                      config=config or {})


def evaluate(model: GranpModel, scenes, stats, reference, samples: int = 30,
             seed=0) -> EvalReport:
    """Pooled predictive metrics on raw scenes against their true futures."""
    if not scenes:
        raise DataError("evaluate: no scenes")
    targets = [prepare_scene(s, stats) for s in scenes]
    context = [prepare_scene(s, stats) for s in reference]
    preds = model.predict(targets, context, stats, samples=samples, seed=seed)
    return metrics_from_predictions(
        preds, [s.future for s in scenes], model.config.t_f,
        config=asdict(model.config))


def cv_baseline(scene, t_f: int = 25) -> PredictiveDistribution:
    """Constant-velocity extrapolation from the last two history positions;
    sigma fixed at 0.5 m."""
    hist = scene.history[scene.ego]
    vel = (hist[-1, :2] - hist[-2, :2]) / SAMPLE_DT
    steps = np.arange(1, t_f + 1)[:, None] * SAMPLE_DT
    mean = hist[-1, :2] + steps * vel
    sd = np.full((t_f, 2), 0.5)
    return PredictiveDistribution(
        mean=mean, std=sd, ci_low=mean - 1.96 * sd, ci_high=mean + 1.96 * sd,
        samples=mean[None])


def constant_position_baseline(scene, t_f: int = 25) -> PredictiveDistribution:
    """Predicts the last observed position forever; sigma 0.5 m."""
    mean = np.tile(scene.history[scene.ego][-1, :2], (t_f, 1))
    sd = np.full((t_f, 2), 0.5)
    return PredictiveDistribution(
        mean=mean, std=sd, ci_low=mean - 1.96 * sd, ci_high=mean + 1.96 * sd,
        samples=mean[None])


def baseline_report(scenes, kind: str = "cv", t_f: int = 25) -> EvalReport:
    fns = {"cv": cv_baseline, "constant_position": constant_position_baseline}
    if kind not in fns:
        raise DataError(f"unknown baseline {kind!r}")
    preds = [fns[kind](s, t_f) for s in scenes]
    return metrics_from_predictions(preds, [s.future for s in scenes], t_f,
                                    config={"baseline": kind})


# ---------------------------------------------------------------------------
# Checkpoints

def save_checkpoint(dir_path, model: GranpModel, stats: NormalizationStats,
                    reference_scenes):
    """manifest.json + params.bin (little-endian float32, manifest order)."""
    os.makedirs(dir_path, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    for p in model.parameters():
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        entries.append({"name": p.name, "shape": list(p.data.shape),
                        "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "precision": ad.get_precision(),
        "config": asdict(model.config),
        "normalization": {"mean": stats.mean.tolist(),
                          "std": stats.std.tolist()},
        "reference_context_ids": [int(sc.ego) for sc in reference_scenes],
        "reference_context": scenes_to_doc(reference_scenes),
        "parameters": entries,
    }
    with open(os.path.join(dir_path, "manifest.json"), "w",
              encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, separators=(",", ":"))
    with open(os.path.join(dir_path, "params.bin"), "wb") as fh:
        fh.write(b"".join(blobs))
    return dir_path


def load_checkpoint(dir_path):
    """Returns (model, stats, reference_scenes)."""
    manifest_path = os.path.join(dir_path, "manifest.json")
    try:
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"{manifest_path}: unreadable manifest ({e})") from None
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{manifest_path}: version {manifest.get('version')}"
                          f", expected {CHECKPOINT_VERSION}")
    try:
        config = ModelConfig(**manifest["config"])
        model = GranpModel(config, seed=0)
        params = model.parameters()
        entries = manifest["parameters"]
        if len(entries) != len(params):
            raise FormatError(f"{manifest_path}: {len(entries)} parameters, "
                              f"model has {len(params)}")
        with open(os.path.join(dir_path, "params.bin"), "rb") as fh:
            blob = fh.read()
        offset = 0
        for p, entry in zip(params, entries):
            shape = tuple(entry["shape"])
            if entry["name"] != p.name or shape != p.data.shape:
                raise FormatError(f"{manifest_path}: parameter "
                                  f"{entry['name']!r} {shape} does not match "
                                  f"model {p.name!r} {p.data.shape}")
            if entry["offset"] != offset:
                raise FormatError(f"{manifest_path}: offset {entry['offset']} "
                                  f"for {p.name!r}, expected {offset}")
            count = int(np.prod(shape)) if shape else 1
            end = offset + 4 * count
            if end > len(blob):
                raise FormatError(f"params.bin truncated at {p.name!r}: need "
                                  f"{end} bytes, have {len(blob)}")
            p.data = np.frombuffer(blob, dtype="<f4", count=count,
                                   offset=offset).reshape(shape)
            offset = end
        if offset != len(blob):
            raise FormatError(
                f"params.bin has {len(blob) - offset} trailing bytes")
        norm = manifest["normalization"]
        stats = NormalizationStats(mean=np.array(norm["mean"]),
                                   std=np.array(norm["std"]))
        reference = scenes_from_doc(manifest["reference_context"],
                                    where=manifest_path)
    except (KeyError, TypeError, ValueError, OSError) as e:
        raise FormatError(f"{manifest_path}: malformed checkpoint "
                          f"({e})") from None
    return model, stats, reference
