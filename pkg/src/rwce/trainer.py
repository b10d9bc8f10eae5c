"""Training loop for CE, RWCE, ConfTr and CUT, with run directories and resume."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import losses
from .model import MLP, SGD, IntegrityError, NumericalError, load_checkpoint, save_checkpoint
from .scores import ConfigError, ScoreSpec
from .theory import ledger_row, read_ledger, write_ledger

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("epoch", "loss", "mean_rank", "mean_ce", "rwce", "lr")


@dataclass
class TrainingConfig:
    loss: str = "RWCE"
    hidden: list[int] = field(default_factory=lambda: [64])
    temperature: float = 1.5
    batch_size: int = 128
    epochs: int = 40
    lr: float = 0.04
    momentum: float = 0.9
    weight_decay: float = 8e-4
    milestones: list[int] = field(default_factory=lambda: [25, 35])
    gamma: float = 0.1
    alpha: float = 0.1
    # score used inside the ConfTr/CUT objectives
    train_score: dict = field(default_factory=lambda: {"kind": "HPS"})
    smooth: dict = field(default_factory=lambda: {"kind": "sigmoid", "tau": 0.1})
    # ConfTr/CUT minimize CE + conformal_weight * (conformal term)
    conformal_weight: float = 0.5
    cut_grid: int = 101
    init_seed: int = 0
    shuffle_seed: int = 0
    tiebreak_seed: int = 0
    checkpoint_every: int = 1
    ledger_score: str = "HPS"
    ledger_split: str = "val"
    select_best: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.loss not in losses.LOSS_KINDS:
            raise ConfigError(f"config: unknown loss {self.loss!r}")
        if self.epochs < 1:
            raise ConfigError("config: epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("config: batch_size must be >= 1")
        if self.loss == "ConfTr" and self.batch_size < 2:
            raise ConfigError("config: ConfTr needs batch_size >= 2 to split calibration/prediction halves")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"config: alpha must lie in (0, 1), got {self.alpha}")
        if self.checkpoint_every < 1:
            raise ConfigError("config: checkpoint_every must be >= 1")
        ScoreSpec.from_dict(self.train_score)
        losses.SmoothIndicator(**self.smooth)

    @property
    def score_spec(self) -> ScoreSpec:
        return ScoreSpec.from_dict(self.train_score)

    def optimizer(self) -> SGD:
        return SGD(self.lr, self.momentum, self.weight_decay, list(self.milestones), self.gamma)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainingConfig:
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"config: unknown fields {sorted(extra)}")
        return cls(**d)


@dataclass
class TrainingRun:
    config: TrainingConfig
    model: MLP
    trace: list[dict]
    ledger: list[dict]
    checkpoints: dict[int, MLP]
    optimizer: SGD | None = None
    run_dir: Path | None = None


def _batch_objective(config: TrainingConfig, u_logits, y, rng_u):
    """Returns (objective value, dL/du) for one batch."""
    kind = config.loss
    if kind == "CE":
        return losses.ce_objective(u_logits, y)
    if kind == "RWCE":
        return losses.rwce_objective(u_logits, y)
    ce_val, ce_grad = losses.ce_objective(u_logits, y)
    spec = config.score_spec
    tie = spec.draw_u(len(y), rng_u)
    if kind == "ConfTr":
        val, grad, _ = losses.conftr_objective(u_logits, y, spec, losses.SmoothIndicator(**config.smooth),
                                               config.alpha, tie)
    else:
        val, grad = losses.cut_objective(u_logits, y, spec, config.cut_grid, tie)
    w = config.conformal_weight
    return ce_val + w * val, ce_grad + w * grad


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int):
    """Shuffle without replacement; the last partial batch is kept."""
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def _run_epoch(model: MLP, opt: SGD, config: TrainingConfig, X, y, epoch: int, step0: int) -> dict:
    n = len(y)
    rng_u = np.random.default_rng([config.tiebreak_seed, epoch])
    tot_loss = tot_rank = tot_ce = tot_rwce = 0.0
    step = step0
    for idx in epoch_batches(n, config.batch_size, config.shuffle_seed, epoch):
        u_logits, acts = model.scaled_logits(X[idx], return_cache=True)
        report = losses.rwce_loss(u_logits, y[idx])
        try:
            value, d_u = _batch_objective(config, u_logits, y[idx], rng_u)
            if not np.isfinite(value) or not np.all(np.isfinite(d_u)):
                raise NumericalError("non-finite objective")
            opt.step(model.params(), model.backward(acts, d_u), epoch - 1)
        except NumericalError as exc:
            digest = hashlib.sha256(np.ascontiguousarray(idx).tobytes()).hexdigest()[:16]
            raise NumericalError(f"step {step}: {exc} (batch {digest})", getattr(exc, "index", None)) from exc
        k = len(idx)
        tot_loss += value * k
        tot_rank += report.ranks.sum()
        tot_ce += report.ce.sum()
        tot_rwce += report.loss * k
        step += 1
    return {"epoch": epoch, "loss": tot_loss / n, "mean_rank": tot_rank / n, "mean_ce": tot_ce / n,
            "rwce": tot_rwce / n, "lr": opt.lr_at(epoch - 1), "_steps": step}


def _write_trace(path: Path, trace: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in TRACE_COLUMNS[1:]])


def _read_trace(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]


def checkpoint_path(run_dir: Path, epoch: int) -> Path:
    return Path(run_dir) / "checkpoints" / f"epoch_{epoch:04d}.json"


def _loop(run: TrainingRun, data, first_epoch: int, last_epoch: int) -> TrainingRun:
    config, model, opt = run.config, run.model, run.optimizer
    X, y = data.train.X, data.train.y
    ledger_spec = ScoreSpec(config.ledger_score)
    steps = sum(-(-len(y) // config.batch_size) for _ in range(first_epoch - 1))
    for epoch in range(first_epoch, last_epoch + 1):
        row = _run_epoch(model, opt, config, X, y, epoch, steps)
        steps = row.pop("_steps")
        run.trace.append(row)
        run.ledger.append(ledger_row(model, data, ledger_spec, config.alpha, epoch,
                                     config.ledger_split, config.tiebreak_seed))
        log.debug("epoch %d loss %.4f mean_rank %.3f", epoch, row["loss"], row["mean_rank"])
        if epoch % config.checkpoint_every == 0 or epoch == last_epoch:
            run.checkpoints[epoch] = model.copy()
            if run.run_dir is not None:
                save_checkpoint(checkpoint_path(run.run_dir, epoch), model, opt, epoch)
    if config.select_best and run.ledger:
        best = min((r for r in run.ledger if int(r["epoch"]) in run.checkpoints),
                   key=lambda r: float(r["E_set_size"]))
        run.model = run.checkpoints[int(best["epoch"])].copy()
    if run.run_dir is not None:
        _write_trace(run.run_dir / "trace.csv", run.trace)
        write_ledger(run.run_dir / "ledger.csv", run.ledger)
    return run


def train(config: TrainingConfig, data, run_dir: str | Path | None = None) -> TrainingRun:
    """Run ``config.epochs`` epochs of shuffled mini-batch SGD and return the final model."""
    config.validate()
    model = MLP([data.n_features, *config.hidden, data.n_classes], config.temperature, config.init_seed)
    run = TrainingRun(config, model, [], [], {}, config.optimizer())
    if run_dir is not None:
        run.run_dir = Path(run_dir)
        (run.run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (run.run_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n")
    return _loop(run, data, 1, config.epochs)


def load_run(run_dir: str | Path) -> TrainingRun:
    run_dir = Path(run_dir)
    try:
        config = TrainingConfig.from_dict(json.loads((run_dir / "config.json").read_text()))
    except (OSError, ValueError) as exc:
        raise IntegrityError(f"{run_dir}: unreadable config ({exc})") from exc
    files = sorted((run_dir / "checkpoints").glob("epoch_*.json"))
    if not files:
        raise FileNotFoundError(f"{run_dir}: no checkpoints")
    checkpoints = {}
    opt = config.optimizer()
    for f in files:
        model, epoch = load_checkpoint(f, opt if f == files[-1] else None)
        if model.sizes[1:-1] != list(config.hidden) or model.temperature != config.temperature:
            raise IntegrityError(f"{f}: architecture does not match config")
        checkpoints[int(epoch)] = model
    last = max(checkpoints)
    trace = _read_trace(run_dir / "trace.csv") if (run_dir / "trace.csv").exists() else []
    ledger = read_ledger(run_dir / "ledger.csv") if (run_dir / "ledger.csv").exists() else []
    trace = [r for r in trace if r["epoch"] <= last]
    ledger = [r for r in ledger if int(r["epoch"]) <= last]
    return TrainingRun(config, checkpoints[last].copy(), trace, ledger, checkpoints, opt, run_dir)


def resume(run_dir: str | Path, data, extra_epochs: int) -> TrainingRun:
    """Continue a run from its last checkpoint; the schedule and seeds carry over unchanged."""
    run = load_run(run_dir)
    if extra_epochs < 0:
        raise ConfigError("extra_epochs must be >= 0")
    if run.model.input_dim != data.n_features or run.model.n_classes != data.n_classes:
        raise IntegrityError("checkpoint architecture does not match the dataset")
    if extra_epochs == 0:
        return run
    last = max(run.checkpoints)
    run.config.epochs = last + extra_epochs
    (run.run_dir / "config.json").write_text(json.dumps(run.config.to_dict(), indent=1, sort_keys=True) + "\n")
    return _loop(run, data, last + 1, last + extra_epochs)
