"""Objective, optimiser, training loop and evaluation protocols.

The training objective is ``image_loss + lambda * moment_loss``: the mean
squared error over every predicted frame (one-step predictions during the
observed phase plus the multi-step forecasts) and the moment penalty of the
PhyCell derivative filters.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .config import RunConfig
from .datagen import SequenceBatch, generate_split, mask_frames, read_vpt, split_seeds
from .diffops import DiffKernelBank, moment_loss, phi_predict
from .metrics import MetricReport, mean_report, sequence_metrics
from .model import MISSING_SKIP, PhyDNet
from .tensor import ShapeError, Tensor

LOG_FIELDS = ("epoch", "image_loss", "moment_loss", "total", "val_mse", "val_mae", "val_ssim")


class TrainingDiverged(RuntimeError):
    def __init__(self, report: dict):
        self.report = report
        super().__init__(f"training diverged: {json.dumps(report)}")


# -- objective ---------------------------------------------------------------


@dataclass
class LossReport:
    image_loss: float
    moment_loss: float
    total: float
    lam: float


def image_loss(predictions, targets) -> Tensor:
    """Mean squared error over all pixels of all predicted frames.

    ``predictions`` is a list of ``[B,C,H,W]`` tensors (one per step) or a
    single tensor; ``targets`` has the matching ``[B,N,C,H,W]`` layout.
    """
    targets = np.asarray(targets)
    if isinstance(predictions, Tensor):
        predictions = [predictions] if predictions.ndim == 4 else None
    if predictions is None or targets.ndim != 5 or len(predictions) != targets.shape[1]:
        raise ShapeError(
            f"image_loss: {0 if predictions is None else len(predictions)} predicted frames vs targets {targets.shape}"
        )
    total = None
    for n, p in enumerate(predictions):
        tgt = targets[:, n].astype(p.dtype, copy=False)
        if p.shape != tgt.shape:
            raise ShapeError(f"image_loss: prediction {p.shape} vs target {tgt.shape}")
        term = T.sum_all(T.square(T.sub(p, Tensor(tgt))))
        total = term if total is None else T.add(total, term)
    return T.scale(total, 1.0 / targets.size)


def total_loss(predictions, targets, banks, lam: float) -> tuple[Tensor, LossReport]:
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if isinstance(banks, DiffKernelBank):
        banks = [banks]
    img = image_loss(predictions, targets)
    mom = None
    for bank in banks:
        term = moment_loss(bank)
        mom = term if mom is None else T.add(mom, term)
    if mom is None or lam == 0:
        total = img
    else:
        total = T.add(img, T.scale(mom, lam))
    mom_value = 0.0 if mom is None else float(mom.data)
    report = LossReport(float(img.data), mom_value, float(total.data), lam)
    return total, report


# -- optimiser ---------------------------------------------------------------


class Adam:
    """Adam with bias correction. Steps with non-finite gradients are skipped."""

    def __init__(self, params: dict[str, Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0
        self.skipped = 0

    def step(self) -> bool:
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        if not all(np.isfinite(g).all() for g in grads.values()):
            self.skipped += 1
            return False
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype, copy=False)
        return True

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


# -- data --------------------------------------------------------------------


def load_data(cfg: RunConfig, length: int | None = None) -> dict[str, SequenceBatch]:
    """Train/val/test splits from the generator spec or the VPT paths in ``cfg``."""
    d = cfg.data
    length = length or d.T + d.delta
    if d.generator is not None:
        g = d.generator
        seeds = split_seeds(g.seed)
        sizes = {"train": g.n_train, "val": g.n_val, "test": g.n_test}
        return {s: generate_split(g, sizes[s], length, cfg.model.frame_size, seeds[s]) for s in sizes}
    out = {}
    for split, path in d.paths.items():
        frames = read_vpt(path)
        if frames.ndim != 5 or frames.shape[1] < length:
            raise ShapeError(f"{path}: need [B,>={length},C,H,W] frames, got {frames.shape}")
        out[split] = SequenceBatch(frames)
    return out


def _batch_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


# -- evaluation --------------------------------------------------------------


class ModelPredictor:
    """Adapts a model to the ``predict(inputs, horizon, mask)`` interface."""

    def __init__(self, model: PhyDNet, missing_policy: str = MISSING_SKIP):
        self.model = model
        self.missing_policy = missing_policy

    def predict(self, inputs: np.ndarray, horizon: int, mask=None) -> np.ndarray:
        with T.no_grad():
            out = self.model.forward(inputs, horizon, mask=mask, missing_policy=self.missing_policy)
        return np.stack([f.data for f in out.forecasts], axis=1)


class CopyLastFrame:
    """Baseline that repeats the last observed frame."""

    def predict(self, inputs: np.ndarray, horizon: int, mask=None) -> np.ndarray:
        last = inputs[:, -1:]
        return np.repeat(last, horizon, axis=1)


@dataclass
class Protocol:
    kind: str = "standard"
    horizon: int | None = None
    ratio: float = 0.0

    @classmethod
    def parse(cls, text: str) -> "Protocol":
        name, _, arg = text.partition(":")
        if name == "standard" and not arg:
            return cls()
        if name == "longterm":
            try:
                n = int(arg)
            except ValueError:
                raise ValueError(f"longterm protocol needs an integer horizon, got {arg!r}") from None
            if n < 1:
                raise ValueError(f"longterm horizon must be >= 1, got {n}")
            return cls("longterm", horizon=n)
        if name == "missing":
            try:
                r = float(arg)
            except ValueError:
                raise ValueError(f"missing protocol needs a ratio, got {arg!r}") from None
            if not 0.0 <= r <= 0.5:
                raise ValueError(f"missing ratio must lie in [0, 0.5], got {r}")
            return cls("missing", ratio=r)
        raise ValueError(f"unknown protocol {text!r}; expected standard, longterm:N or missing:R")

    def __str__(self) -> str:
        if self.kind == "longterm":
            return f"longterm:{self.horizon}"
        if self.kind == "missing":
            return f"missing:{self.ratio:g}"
        return "standard"


@dataclass
class EvalReport:
    protocol: str
    per_step: list[MetricReport]
    aggregate: MetricReport
    extra: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "mse", "mae", "ssim"])
        for i, r in enumerate(self.per_step, 1):
            w.writerow([i, repr(r.mse), repr(r.mae), repr(r.ssim)])
        return buf.getvalue()

    def aggregate_json(self) -> str:
        doc = {"protocol": self.protocol, "steps": len(self.per_step)}
        doc.update(mse=self.aggregate.mse, mae=self.aggregate.mae, ssim=self.aggregate.ssim)
        doc.update(self.extra)
        return json.dumps(doc, sort_keys=True)


def smoothed_trend(values, window: int = 5) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    window = max(1, min(window, len(values)))
    return np.convolve(values, np.ones(window) / window, mode="valid")


def evaluate(
    predictor,
    data: SequenceBatch,
    T_in: int,
    delta: int,
    protocol: Protocol | str = "standard",
    seed: int = 0,
    batch_size: int = 16,
) -> EvalReport:
    """Forecast metrics per step and on average under a protocol.

    ``standard`` forecasts ``delta`` frames, ``longterm:N`` forecasts ``N``
    and ``missing:R`` hides a fraction ``R`` of the observed frames.
    """
    if isinstance(protocol, str):
        protocol = Protocol.parse(protocol)
    if isinstance(predictor, PhyDNet):
        predictor = ModelPredictor(predictor)
    horizon = protocol.horizon if protocol.kind == "longterm" else delta
    if horizon < 1:
        raise ValueError(f"forecast horizon must be >= 1, got {horizon}")
    frames = data.frames
    if frames.shape[1] < T_in + horizon:
        raise ShapeError(
            f"protocol {protocol} needs sequences of {T_in + horizon} frames, dataset has {frames.shape[1]}"
        )
    inputs = SequenceBatch(frames[:, :T_in])
    if protocol.kind == "missing":
        inputs = mask_frames(inputs, protocol.ratio, seed)
    preds = []
    for lo in range(0, len(frames), batch_size):
        sl = slice(lo, lo + batch_size)
        mask = None if inputs.mask is None else inputs.mask[sl]
        preds.append(predictor.predict(inputs.frames[sl], horizon, mask))
    pred = np.concatenate(preds, axis=0)
    per_step = sequence_metrics(pred, frames[:, T_in : T_in + horizon])
    extra = {}
    if protocol.kind == "longterm":
        trend = smoothed_trend([r.mse for r in per_step])
        extra["smoothed_mse_nondecreasing"] = bool(np.all(np.diff(trend) >= 0))
        extra["final_step_mse"] = per_step[-1].mse
    return EvalReport(str(protocol), per_step, mean_report(per_step), extra)


# -- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    model: PhyDNet
    history: list[dict]
    best_epoch: int
    best_val_mse: float
    stopped_early: bool
    skipped_steps: int
    checkpoint: str | None = None


def log_to_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in history:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def train_step(model: PhyDNet, opt: Adam, frames: np.ndarray, T_in: int, delta: int, lam: float, mask=None) -> LossReport:
    """One optimiser step on a ``[B, T_in + delta, C, H, W]`` batch."""
    inputs = frames[:, :T_in]
    out = model.forward(inputs, delta, mask=mask)
    loss, report = total_loss(out.predictions, frames[:, 1 : T_in + delta], model.banks, lam)
    if not np.isfinite(report.total):
        return report  # the caller aborts on this
    opt.zero_grad()
    T.backward(loss)
    opt.step()
    return report


def train(
    cfg: RunConfig,
    data: dict[str, SequenceBatch] | None = None,
    out_dir: str | None = None,
    progress=None,
) -> TrainResult:
    """Fit a model, early-stopping on validation MSE; the best weights are kept.

    With ``out_dir`` the best checkpoint goes to ``model.ckpt`` and the
    per-epoch log to ``train_log.csv``.
    """
    tc, dc = cfg.train, cfg.data
    dtype = np.dtype(tc.dtype)
    data = data if data is not None else load_data(cfg)
    train_frames = data["train"].frames[:, : dc.T + dc.delta].astype(dtype)
    val = data.get("val")
    model = PhyDNet(cfg.model, seed=tc.seed, dtype=dtype)
    params = model.parameters()
    opt = Adam(params, tc.lr, tc.beta1, tc.beta2, tc.eps)
    rng = np.random.default_rng(tc.seed)
    history: list[dict] = []
    best = (math.inf, 0, {k: p.data.copy() for k, p in params.items()})
    initial = None
    stale = 0
    stopped_early = False
    n = len(train_frames)
    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(n)
        sums = np.zeros(3)
        batches = 0
        for bi, lo in enumerate(range(0, n, tc.batch)):
            frames = train_frames[order[lo : lo + tc.batch]]
            mask = None
            if dc.mask_ratio > 0:
                masked = mask_frames(SequenceBatch(frames[:, : dc.T]), dc.mask_ratio, _batch_seed(tc.seed, epoch, bi))
                mask = masked.mask
            report = train_step(model, opt, frames, dc.T, dc.delta, tc.lam, mask)
            if not np.isfinite(report.total):
                raise TrainingDiverged({"epoch": epoch, "batch": bi, "total": report.total})
            if initial is None:
                initial = report.total
            elif report.total > tc.divergence_factor * initial:
                raise TrainingDiverged(
                    {"epoch": epoch, "batch": bi, "total": report.total, "initial": initial}
                )
            sums += (report.image_loss, report.moment_loss, report.total)
            batches += 1
        img, mom, tot = (float(x) for x in sums / batches)
        row = {"epoch": epoch, "image_loss": img, "moment_loss": mom, "total": tot}
        val_mse = tot
        if val is not None:
            rep = evaluate(model, SequenceBatch(val.frames.astype(dtype)), dc.T, dc.delta).aggregate
            row.update(val_mse=rep.mse, val_mae=rep.mae, val_ssim=rep.ssim)
            val_mse = rep.mse
        else:
            row.update(val_mse=math.nan, val_mae=math.nan, val_ssim=math.nan)
        history.append(row)
        if progress is not None:
            progress(row)
        if val_mse < best[0]:
            best = (val_mse, epoch, {k: p.data.copy() for k, p in params.items()})
            stale = 0
        else:
            stale += 1
            if stale >= tc.patience:
                stopped_early = True
                break
    for k, p in params.items():
        p.data = best[2][k]
    ckpt = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt = os.path.join(out_dir, "model.ckpt")
        save_checkpoint(ckpt, model, cfg)
        with open(os.path.join(out_dir, "train_log.csv"), "w") as fh:
            fh.write(log_to_csv(history))
    return TrainResult(model, history, best[1], best[0], stopped_early, opt.skipped, ckpt)


# -- prediction-only PDE fitting ---------------------------------------------


def pde_predict(u: Tensor, bank: DiffKernelBank) -> Tensor:
    """One prediction-only step in pixel space: ``u + Phi(u)``."""
    return T.add(u, phi_predict(u, bank))


def interior(x: Tensor, margin: int) -> Tensor:
    if margin == 0:
        return x
    h, w = x.shape[-2:]
    return T.narrow(T.narrow(x, -2, margin, h - 2 * margin), -1, margin, w - 2 * margin)


@dataclass
class PdeFit:
    bank: DiffKernelBank
    history: list[LossReport]


def fit_pde_predictor(
    u: np.ndarray,
    u_next: np.ndarray,
    k: int = 5,
    lam: float = 1.0,
    steps: int = 2000,
    lr: float = 1e-2,
    batch: int = 16,
    seed: int = 0,
    dtype=np.float64,
) -> PdeFit:
    """Learn ``u_next ~ u + Phi(u)`` with an identity encoder and K = 0.

    ``u`` and ``u_next`` are ``[N, C, H, W]`` frame pairs. The loss is taken
    on the interior only (a border of ``(k-1)/2`` pixels is excluded), where
    the zero padding of the derivative filters cannot reach.
    """
    u = np.asarray(u, dtype)
    u_next = np.asarray(u_next, dtype)
    rng = np.random.default_rng(seed)
    bank = DiffKernelBank.create(u.shape[1], k, rng, dtype)
    opt = Adam(bank.parameters(), lr=lr)
    margin = (k - 1) // 2
    history = []
    for it in range(steps):
        idx = rng.choice(len(u), size=min(batch, len(u)), replace=False)
        pred = interior(pde_predict(Tensor(u[idx]), bank), margin)
        target = interior(Tensor(u_next[idx]), margin).data[:, None]
        loss, report = total_loss([pred], target, bank, lam)
        opt.zero_grad()
        T.backward(loss)
        opt.step()
        history.append(report)
    return PdeFit(bank, history)
