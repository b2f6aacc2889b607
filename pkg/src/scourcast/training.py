"""Composite-loss training of the forecasters with jointly optimized
latent equation parameters, plus metrics and the experiment runner.

The objective is the sum of a data term (mean squared error between the
network forecast and the target window) and a physics term (mean squared
error between the calibrated-equation prediction and the same target,
restricted to scouring episodes). Both terms are means by default; the
raw-sum form is available through ``loss_reduction="sum"``.

Everything stochastic flows from one seed: a spawned stream initializes
the model weights, a second drives the per-epoch shuffles, so a run is
bit-reproducible end to end.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import datapipe
from .autodiff import DomainError, Parameter, ShapeError, Tensor
from .models import ModelConfig, build_forecaster
from .physics import (EPS_FLOW_DEPTH, LatentParams, constrain, episode_mask,
                      gtd_scour, spinn_hec18, td_scour)

VARIANTS = ("pure", "spinn_hec18", "spinn_td", "spinn_gtd")
SCOPES = ("site_specific", "general")
MAPE_FLOOR = 0.01  # m; scour depth crosses zero, textbook MAPE is singular


class TrainingError(RuntimeError):
    """Aborted optimization (non-finite loss) with diagnostics attached."""


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 64
    learning_rate: float = 1e-3
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    variant: str = "pure"
    scope: str = "site_specific"
    mask_mode: str = "sequence"   # or "timestep"
    loss_reduction: str = "mean"  # or "sum"
    p1_unbounded: bool = False

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size < 1:
            raise ValueError("epochs must be positive and batch_size >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.scope not in SCOPES:
            raise ValueError(f"unknown scope {self.scope!r}")


@dataclass
class LossBreakdown:
    mse_data: float
    mse_phy: float

    @property
    def total(self):
        return self.mse_data + self.mse_phy


@dataclass
class RunResult:
    variant: str
    architecture: str
    seed: int
    train_losses: list          # per-epoch LossBreakdown
    val_losses: list            # per-epoch data-term MSE
    best_epoch: int
    test_mse: float
    test_mape: float
    test_rmse: float
    latents: dict | None        # constrained values for spinn variants
    state: dict                 # best checkpoint parameter arrays


@dataclass
class Batch:
    """Stacked training-ready arrays for one split."""

    x: np.ndarray       # [N, m_in, F] scaled
    y: np.ndarray       # [N, m_out] m
    y1_out: np.ndarray  # [N, m_out] m
    q_out: np.ndarray   # [N, m_out] m³/s
    mask: np.ndarray    # [N, m_out]
    flag: np.ndarray    # [N]

    def __len__(self):
        return len(self.x)

    def select(self, idx):
        return Batch(self.x[idx], self.y[idx], self.y1_out[idx],
                     self.q_out[idx], self.mask[idx], self.flag[idx])


def stack_pairs(pairs):
    """Turn a list of SequencePairs into contiguous arrays with masks."""
    if not pairs:
        raise ValueError("empty pair list")
    y = np.stack([p.y for p in pairs])
    mask, flag = episode_mask(y)
    return Batch(
        x=np.stack([p.x for p in pairs]),
        y=y,
        y1_out=np.stack([p.y1_out for p in pairs]),
        q_out=np.stack([p.q_out for p in pairs]),
        mask=mask,
        flag=flag,
    )


def data_loss(y, y_hat, reduction="mean"):
    """Squared-error data term over a batch of target windows."""
    y_t = y if isinstance(y, Tensor) else Tensor(y)
    if y_t.shape != tuple(y_hat.shape):
        raise ShapeError("data_loss", f"targets {y_t.shape} vs forecasts "
                                      f"{tuple(y_hat.shape)}")
    sq = (y_hat - y_t) ** 2
    return ad.mean(sq) if reduction == "mean" else ad.total(sq)


def physics_prediction(batch, latents, bridge):
    """Equation-side prediction [B, m_out] for a batch.

    The covariates are recorded data: per-timestep flow depth/discharge for
    the calibrated HEC-18 form, the last output timestep's values for the
    time-dependent forms. Flow depths are floored at the degenerate-depth
    guard and discharge at zero before entering the equations.
    """
    y1 = np.maximum(batch.y1_out, EPS_FLOW_DEPTH * (1 + 1e-9))
    q = np.maximum(batch.q_out, 0.0)
    m_out = batch.y.shape[1]
    variant = latents.variant
    if variant == "hec18":
        return spinn_hec18(y1, q, latents, bridge)
    t = np.arange(m_out, dtype=np.float64)
    y1_max = y1[:, -1]
    q_max = q[:, -1]
    if variant == "td":
        return td_scour(t, y1_max, q_max, latents, bridge)
    return gtd_scour(t, y1_max, q_max, latents)


def physics_loss(y, y_hat_phy, mask, flag, mask_mode="sequence",
                 reduction="mean"):
    """Masked squared-error physics term.

    Sequences whose flag is zero (pure filling) are excluded; with
    ``mask_mode="timestep"`` the per-step scouring mask applies inside the
    remaining sequences as well. Returns an exact scalar zero when no
    sequence is flagged, so the total collapses to the data term bit for
    bit.
    """
    if float(flag.sum()) == 0.0:
        return Tensor(0.0)
    y_t = y if isinstance(y, Tensor) else Tensor(y)
    if tuple(y_t.shape) != tuple(y_hat_phy.shape):
        raise ShapeError("physics_loss", f"targets {y_t.shape} vs predictions "
                                         f"{tuple(y_hat_phy.shape)}")
    weights = mask if mask_mode == "timestep" else np.ones_like(mask)
    weights = weights * flag[:, None]
    denom = float(weights.sum())
    if denom == 0.0:
        return Tensor(0.0)
    sq = (y_hat_phy - y_t) ** 2
    weighted = ad.total(ad.mask_multiply(sq, weights))
    if reduction == "mean":
        return weighted * (1.0 / denom)
    return weighted


class Adam:
    """Adam with bias correction over a list of Parameters."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.tensor.data) for p in self.params]
        self.v = [np.zeros_like(p.tensor.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.tensor.grad = None

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.tensor.grad
            if g is None:
                g = np.zeros_like(p.tensor.data)
            if not np.all(np.isfinite(g)):
                raise DomainError("adam", f"non-finite gradient for {p.name}")
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            m_hat = self.m[i] / (1.0 - self.b1 ** self.t)
            v_hat = self.v[i] / (1.0 - self.b2 ** self.t)
            p.tensor.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def composite_loss(model, batch_t, batch, latents, bridge, config):
    """Forward pass plus both loss terms for one minibatch."""
    y_hat = model(batch_t)
    l_data = data_loss(batch.y, y_hat, reduction=config.loss_reduction)
    if latents is None:
        l_phy = Tensor(0.0)
    else:
        y_phy = physics_prediction(batch, latents, bridge)
        l_phy = physics_loss(batch.y, y_phy, batch.mask, batch.flag,
                             mask_mode=config.mask_mode,
                             reduction=config.loss_reduction)
    return l_data + l_phy, l_data, l_phy


def _dataset_mse(model, batch, batch_size=512):
    """Data-term MSE over a whole split (inference mode, no recording)."""
    model.eval()
    total_sq = 0.0
    with ad.no_grad():
        for lo in range(0, len(batch), batch_size):
            xs = batch.x[lo:lo + batch_size]
            y_hat = model(Tensor(xs)).data
            total_sq += float(((y_hat - batch.y[lo:lo + batch_size]) ** 2).sum())
    model.train()
    return total_sq / batch.y.size


def predict(model, x, batch_size=512):
    """Forecasts for stacked inputs [N, m_in, F] (inference mode)."""
    model.eval()
    outs = []
    with ad.no_grad():
        for lo in range(0, len(x), batch_size):
            outs.append(model(Tensor(x[lo:lo + batch_size])).data)
    model.train()
    return np.concatenate(outs, axis=0)


def _latent_variant(variant):
    return {"spinn_hec18": "hec18", "spinn_td": "td", "spinn_gtd": "gtd"}[variant]


def train(model, splits, bridge, config):
    """Optimize network weights and latent equation parameters jointly.

    ``splits`` is a (train, val, test) triple of Batch objects with scaled
    inputs. Every epoch reshuffles the training set with the seeded
    stream, takes Adam steps on the total loss, and evaluates the data
    term on the validation split; the parameter state with the lowest
    validation MSE is restored before test evaluation.
    """
    train_b, val_b, test_b = splits
    seq = np.random.SeedSequence(config.seed)
    _, shuffle_seed = seq.spawn(2)  # first stream belongs to model init
    shuffle_rng = np.random.default_rng(shuffle_seed)

    latents = None
    latent_params = []
    if config.variant != "pure":
        latents, latent_params = LatentParams.trainable(
            _latent_variant(config.variant), model.config.m_in,
            model.config.m_out, p1_unbounded=config.p1_unbounded)

    opt = Adam(model.parameters() + latent_params, lr=config.learning_rate,
               betas=config.adam_betas, eps=config.adam_eps)

    n = len(train_b)
    train_losses = []
    val_losses = []
    best = (np.inf, -1, None, None)
    model.train()
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        epoch_data = 0.0
        epoch_phy = 0.0
        n_batches = 0
        for lo in range(0, n, config.batch_size):
            mb = train_b.select(order[lo:lo + config.batch_size])
            total, l_data, l_phy = composite_loss(
                model, Tensor(mb.x), mb, latents, bridge, config)
            if not np.isfinite(total.data):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} batch {n_batches}: "
                    f"data={float(l_data.data)!r} physics={float(l_phy.data)!r}")
            opt.zero_grad()
            ad.backward(total)
            opt.step()
            epoch_data += float(l_data.data)
            epoch_phy += float(l_phy.data)
            n_batches += 1
        train_losses.append(LossBreakdown(epoch_data / n_batches,
                                          epoch_phy / n_batches))
        val_mse = _dataset_mse(model, val_b)
        val_losses.append(val_mse)
        if val_mse < best[0]:
            latent_state = {p.name: p.tensor.data.copy() for p in latent_params}
            best = (val_mse, epoch, model.state_copy(), latent_state)

    _, best_epoch, best_state, best_latents = best
    model.load_state(best_state)
    for p in latent_params:
        p.tensor.data = best_latents[p.name].copy()

    test_mse, test_mape, test_rmse = evaluate(model, test_b)

    latent_values = None
    if latents is not None:
        c = constrain(latents)
        latent_values = {k: float(np.asarray(getattr(c, k) if not isinstance(
            getattr(c, k), Tensor) else getattr(c, k).data))
            for k in ("p1", "p2", "p3", "t_l", "alpha", "beta")}

    return RunResult(
        variant=config.variant,
        architecture=model.config.architecture,
        seed=config.seed,
        train_losses=train_losses,
        val_losses=val_losses,
        best_epoch=best_epoch,
        test_mse=test_mse,
        test_mape=test_mape,
        test_rmse=test_rmse,
        latents=latent_values,
        state=best_state,
    )


def forecast_metrics(y, y_hat, mape_floor=MAPE_FLOOR):
    """(MSE, MAPE %, RMSE) over stacked target windows.

    MSE averages over every sequence and timestep. RMSE is the
    per-sequence root of the timestep-mean squared error, averaged over
    sequences. MAPE is the per-sequence mean absolute percentage error
    with |target| floored at ``mape_floor`` meters, averaged over
    sequences.
    """
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ShapeError("forecast_metrics", f"{y.shape} vs {y_hat.shape}")
    err = y_hat - y
    mse = float((err ** 2).mean())
    rmse = float(np.sqrt((err ** 2).mean(axis=1)).mean())
    denom = np.maximum(np.abs(y), mape_floor)
    mape = float((np.abs(err) / denom).mean(axis=1).mean() * 100.0)
    return mse, mape, rmse


def evaluate(model, test_b):
    """Metrics for a trained model on a test split."""
    if len(test_b) == 0:
        raise ValueError("empty test set")
    y_hat = predict(model, test_b.x)
    return forecast_metrics(test_b.y, y_hat)


# ---------------------------------------------------------------------------
# Experiment runner


EXPERIMENT_KEYS = {
    "variant", "scope", "arch", "bridges", "seeds", "epochs", "batch_size",
    "learning_rate", "m_in", "m_out", "hidden", "cnn_channels", "data_root",
    "attrs", "e_ref_mode", "mask_mode",
}


@dataclass
class ExperimentSpec:
    """One row of the experiment matrix, parsed from key=value text."""

    variant: str = "pure"
    scope: str = "site_specific"
    arch: tuple = ("nlinear",)
    bridges: tuple = ()
    seeds: tuple = (0, 1, 2, 3, 4)
    epochs: int = 500
    batch_size: int = 64
    learning_rate: float = 1e-3
    m_in: int = 168
    m_out: int = 168
    hidden: int = 128
    cnn_channels: tuple = (128, 256)
    data_root: str = "."
    attrs: str = "bridges.csv"
    e_ref_mode: str = "auto"
    mask_mode: str = "sequence"


class SpecError(ValueError):
    """Bad experiment spec file."""


def _parse_tuple(text, cast):
    return tuple(cast(part.strip()) for part in text.split(",") if part.strip())


def parse_experiment_spec(path):
    """Read the flat key=value experiment format."""
    spec = ExperimentSpec()
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise SpecError(f"line {lineno}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in EXPERIMENT_KEYS:
                raise SpecError(f"line {lineno}: unknown key {key!r}")
            if key in ("variant", "scope", "data_root", "attrs", "e_ref_mode",
                       "mask_mode"):
                setattr(spec, key, value)
            elif key == "arch":
                spec.arch = _parse_tuple(value, str)
            elif key == "bridges":
                spec.bridges = _parse_tuple(value, str)
            elif key == "seeds":
                spec.seeds = _parse_tuple(value, int)
            elif key == "cnn_channels":
                spec.cnn_channels = _parse_tuple(value, int)
            elif key == "learning_rate":
                spec.learning_rate = float(value)
            else:
                setattr(spec, key, int(value))
    if spec.variant not in VARIANTS:
        raise SpecError(f"unknown variant {spec.variant!r}")
    if spec.scope not in SCOPES:
        raise SpecError(f"unknown scope {spec.scope!r}")
    if not spec.bridges:
        raise SpecError("no bridges listed")
    return spec


def format_experiment_spec(spec):
    lines = []
    for key in sorted(EXPERIMENT_KEYS):
        value = getattr(spec, key)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def resolve_e_ref_mode(spec_mode, variant):
    """Dynamic first-step reference for the time-dependent variants,
    as-built otherwise, unless the spec pins a mode explicitly."""
    if spec_mode != "auto":
        return spec_mode
    return "first_step" if variant in ("spinn_td", "spinn_gtd") else "as_built"


def prepare_bridge_data(csv_path, bridge, m_in, m_out, e_ref_mode, seed):
    """Full pipeline from a sensor CSV to scaled Batch splits.

    Returns (train, val, test, scaler, manifest_rows).
    """
    frame = datapipe.ingest(csv_path, bridge_id=bridge.bridge_id)
    frame = datapipe.clean(frame)
    spans = datapipe.synchronize(frame)
    pairs = datapipe.make_windows(frame, spans, m_in, m_out, e_ref_mode, bridge)
    tr, va, te = datapipe.split(pairs, datapipe.SplitSpec(shuffle_seed=seed))
    scaler = datapipe.fit_scaler(tr)
    rows = datapipe.manifest_rows(bridge.bridge_id, tr, va, te)
    tr = stack_pairs(datapipe.scale_pairs(scaler, tr))
    va = stack_pairs(datapipe.scale_pairs(scaler, va))
    te = stack_pairs(datapipe.scale_pairs(scaler, te))
    return tr, va, te, scaler, rows


def _merge_batches(batches):
    return Batch(*[np.concatenate([getattr(b, f) for b in batches])
                   for f in ("x", "y", "y1_out", "q_out", "mask", "flag")])


@dataclass
class ExperimentRow:
    test_set: str
    base_model: str
    method: str
    physics_loss: str
    training_set: str
    mse_mean: float
    mse_std: float
    mape_mean: float
    mape_std: float
    rmse_mean: float
    rmse_std: float


REPORT_HEADER = ["test_set", "base_model", "method", "physics_loss",
                 "training_set", "test_mse_m2", "test_mape_pct", "test_rmse_m"]


def _report_cell(mean, std):
    return f"{mean!r}±{std!r}"


def write_report(path, rows):
    """Emit the aggregate report: one row per (test set, model, method)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_HEADER)
        for r in rows:
            writer.writerow([
                r.test_set, r.base_model, r.method, r.physics_loss,
                r.training_set,
                _report_cell(r.mse_mean, r.mse_std),
                _report_cell(r.mape_mean, r.mape_std),
                _report_cell(r.rmse_mean, r.rmse_std),
            ])


def _method_labels(variant):
    if variant == "pure":
        return "Pure NN", "N/A"
    return "SPINN", {"spinn_hec18": "HEC18", "spinn_td": "TD",
                     "spinn_gtd": "GTD"}[variant]


def run_experiment(spec, bridges, data_paths, progress=None):
    """Execute one experiment row over its (bridge × arch × seed) grid.

    ``bridges`` maps id -> BridgeAttributes and ``data_paths`` maps id ->
    sensor CSV. Site-specific scope trains per bridge; general scope
    trains one model on the concatenated training splits and evaluates it
    per bridge. Returns (report rows, list of RunResults).
    """
    missing = [b for b in spec.bridges if b not in data_paths or b not in bridges]
    if missing:
        raise SpecError(f"missing bridge dataset(s): {', '.join(missing)}")
    if spec.scope == "general" and spec.variant in ("spinn_hec18", "spinn_td"):
        raise SpecError(f"{spec.variant} is site-specific; pooled training "
                        "supports pure and spinn_gtd")
    e_ref = resolve_e_ref_mode(spec.e_ref_mode, spec.variant)
    method, phys_label = _method_labels(spec.variant)

    prepared = {}
    for b in spec.bridges:
        prepared[b] = prepare_bridge_data(
            data_paths[b], bridges[b], spec.m_in, spec.m_out, e_ref,
            seed=0)  # split shuffle fixed; run seeds vary model/batching

    rows = []
    results = []
    for arch in spec.arch:
        cfg = ModelConfig(architecture=arch, m_in=spec.m_in, m_out=spec.m_out,
                          hidden=spec.hidden,
                          cnn_channels=tuple(spec.cnn_channels))
        if spec.scope == "site_specific":
            for b in spec.bridges:
                tr, va, te, _, _ = prepared[b]
                metrics = {"mse": [], "mape": [], "rmse": []}
                for seed in spec.seeds:
                    result = _single_run(cfg, (tr, va, te), bridges[b], spec,
                                         seed, label=b, progress=progress)
                    results.append(result)
                    metrics["mse"].append(result.test_mse)
                    metrics["mape"].append(result.test_mape)
                    metrics["rmse"].append(result.test_rmse)
                rows.append(_aggregate_row(b, arch, method, phys_label, b,
                                           metrics))
        else:
            tr = _merge_batches([prepared[b][0] for b in spec.bridges])
            va = _merge_batches([prepared[b][1] for b in spec.bridges])
            bridge0 = bridges[spec.bridges[0]]
            per_bridge = {b: {"mse": [], "mape": [], "rmse": []}
                          for b in spec.bridges}
            for seed in spec.seeds:
                result = _single_run(cfg, (tr, va, prepared[spec.bridges[0]][2]),
                                     bridge0, spec, seed, label="all",
                                     progress=progress)
                results.append(result)
                model = build_forecaster(cfg, seed=0)
                model.load_state(result.state)
                for b in spec.bridges:
                    mse, mape, rmse = evaluate(model, prepared[b][2])
                    per_bridge[b]["mse"].append(mse)
                    per_bridge[b]["mape"].append(mape)
                    per_bridge[b]["rmse"].append(rmse)
            for b in spec.bridges:
                rows.append(_aggregate_row(b, arch, method, phys_label, "all",
                                           per_bridge[b]))
    return rows, results


def _single_run(cfg, splits, bridge, spec, seed, label, progress=None):
    init_seed, _ = np.random.SeedSequence(seed).spawn(2)
    model = build_forecaster(cfg, seed=np.random.default_rng(init_seed))
    config = TrainConfig(epochs=spec.epochs, batch_size=spec.batch_size,
                         learning_rate=spec.learning_rate, seed=seed,
                         variant=spec.variant, scope=spec.scope,
                         mask_mode=spec.mask_mode)
    result = train(model, splits, bridge, config)
    if progress is not None:
        progress(f"{label}/{cfg.architecture}/seed{seed}: "
                 f"test MSE {result.test_mse:.6f}")
    return result


def _aggregate_row(test_set, arch, method, phys_label, training_set, metrics):
    def ms(values):
        arr = np.asarray(values, dtype=np.float64)
        return float(arr.mean()), float(arr.std())

    mse_m, mse_s = ms(metrics["mse"])
    mape_m, mape_s = ms(metrics["mape"])
    rmse_m, rmse_s = ms(metrics["rmse"])
    return ExperimentRow(test_set, arch, method, phys_label, training_set,
                         mse_m, mse_s, mape_m, mape_s, rmse_m, rmse_s)


def run_result_summary(result):
    """JSON-ready digest of one run (losses, metrics, calibration)."""
    return {
        "variant": result.variant,
        "architecture": result.architecture,
        "seed": result.seed,
        "best_epoch": result.best_epoch,
        "test_mse_m2": result.test_mse,
        "test_mape_pct": result.test_mape,
        "test_rmse_m": result.test_rmse,
        "latents": result.latents,
        "train_loss": [[lb.mse_data, lb.mse_phy] for lb in result.train_losses],
        "val_mse": result.val_losses,
    }
