"""Training loop, parameter freezing and multi-step calibration."""

from __future__ import annotations

import copy
import csv
import logging
import math
import operator
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from mfcal.dataset import Batch, MultiSourceDataset
from mfcal.errors import ConfigError, ContractError, NumericError
from mfcal.loss import LossConfig, total_loss
from mfcal.net import DTYPE, Network
from mfcal.seeding import derive_seed

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 4000
    lr: float = 1e-2
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int | None = None  # None = full batch
    seed: int = 0
    frozen: dict[str, float | None] = field(default_factory=dict)
    log_interval: int = 100
    restore_best: bool = True

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.frozen = dict(self.frozen or {})
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if self.log_interval < 1:
            raise ConfigError("log_interval must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    best_val: float = math.inf

    def write(self, path, comment=None):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            if comment:
                for line in comment.splitlines():
                    fh.write(f"# {line}\n")
            if not self.rows:
                return
            w = csv.DictWriter(fh, fieldnames=list(self.rows[0]), lineterminator="\n")
            w.writeheader()
            for row in self.rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def apply_freezes(network: Network, dataset: MultiSourceDataset, frozen: dict):
    """Pin calibration means by parameter name; values are raw units, None keeps the current mean.

    A name shared by several LF sources is pinned in each of them.
    """
    post = network.posterior
    post.unfreeze_all()
    st = dataset.standardizer
    for name, value in frozen.items():
        if name not in dataset.param_names:
            raise ConfigError(f"frozen parameter {name!r} is not a calibration parameter")
        slot = dataset.param_names.index(name)
        for j in post.lf_sources():
            if not post.owned[j, slot]:
                continue
            if value is None:
                with torch.no_grad():
                    v = float(post.clamp(post.effective_mu()[j, slot], torch.tensor([slot]))[0])
            else:
                v = float(st.transform_theta(np.array([value]), slot)[0])
            try:
                post.freeze(j, slot, v)
            except ContractError as exc:
                raise ConfigError(f"cannot freeze {name!r} at {value}: {exc}") from exc


def make_optimizer(network: Network, config: TrainConfig):
    post = network.posterior
    return torch.optim.AdamW(
        [
            {"params": network.weight_parameters(), "weight_decay": config.weight_decay},
            {"params": [post.mu, post.log_std], "weight_decay": 0.0},
        ],
        lr=config.lr,
        betas=config.betas,
    )


def _minibatches(dataset: MultiSourceDataset, size, rng):
    n_batches = max(1, math.ceil(len(dataset) / size))
    chunks = [[] for _ in range(n_batches)]
    for j in range(dataset.ds):
        idx = rng.permutation(np.flatnonzero(dataset.source == j))
        for k, part in enumerate(np.array_split(idx, n_batches)):
            chunks[k].append(part)
    return [np.sort(np.concatenate(c)) for c in chunks]


def _theta_columns(network: Network, dataset: MultiSourceDataset):
    post = network.posterior
    st = dataset.standardizer
    out = {}
    with torch.no_grad():
        mu = post.clamp(post.effective_mu())
        sd = post.sigma()
    for j in post.lf_sources():
        for slot in post.owned_index(j).tolist():
            name = f"{dataset.sources[j].name}.{dataset.param_names[slot]}"
            out[f"theta_mean.{name}"] = float(st.inverse_theta(float(mu[j, slot]), slot))
            out[f"theta_std.{name}"] = float(sd[j, slot]) * float(st.theta_std[slot])
    return out


def train(network: Network, train_set: MultiSourceDataset, val_set: MultiSourceDataset | None,
          loss_config: LossConfig, train_config: TrainConfig):
    """Optimize ``network`` in place and return ``(network, history)``.

    The calibration posterior is optimized without weight decay. When
    ``restore_best`` is set the weights with the lowest validation loss
    (training loss if there is no validation data) are restored at the end.
    """
    if not train_set.is_standardized:
        raise ContractError("train expects standardized data")
    cfg = train_config
    apply_freezes(network, train_set, cfg.frozen)
    opt = make_optimizer(network, cfg)
    eps_gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "eps"))
    batch_rng = np.random.default_rng(derive_seed(cfg.seed, "batch"))
    full = Batch.from_dataset(train_set)
    val = Batch.from_dataset(val_set) if val_set is not None and len(val_set) else None
    val_eps = None
    if val is not None:
        g = torch.Generator().manual_seed(derive_seed(cfg.seed, "val-eps"))
        val_eps = {j: torch.randn(int(network.posterior.owned[j].sum()), dtype=DTYPE, generator=g)
                   for j in network.posterior.lf_sources()}
    names = [s.name for s in train_set.sources]
    history = History()
    best_state = None

    for epoch in range(1, cfg.epochs + 1):
        network.train()
        if cfg.batch_size is None:
            batches = [full]
        else:
            batches = [Batch.from_dataset(train_set.subset(ix))
                       for ix in _minibatches(train_set, cfg.batch_size, batch_rng)]
        epoch_loss = 0.0
        for batch in batches:
            opt.zero_grad(set_to_none=True)
            try:
                report = total_loss(batch, network, loss_config, eps=eps_gen)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}: {exc}", term=exc.term) from exc
            report.total.backward()
            opt.step()
            epoch_loss += float(report.total.detach()) * len(batch) / len(train_set)
        history.train_loss.append(epoch_loss)

        if epoch % cfg.log_interval == 0 or epoch == cfg.epochs:
            network.eval()
            row = {"epoch": epoch}
            row.update({f"train.{k}": v for k, v in report.as_dict(names).items()})
            if val is not None:
                with torch.no_grad():
                    vrep = total_loss(val, network, loss_config, eps=val_eps)
                row.update({f"val.{k}": v for k, v in vrep.as_dict(names).items()})
                score = float(vrep.total)
            else:
                score = epoch_loss
            row.update(_theta_columns(network, train_set))
            history.rows.append(row)
            if score < history.best_val:
                history.best_val = score
                history.best_epoch = epoch
                best_state = copy.deepcopy(network.state_dict())
            log.info("epoch %d train %.5f select %.5f", epoch, epoch_loss, score)

    if cfg.restore_best and best_state is not None:
        network.load_state_dict(best_state)
    network.eval()
    return network, history


_OPS = {"<": operator.lt, "<=": operator.le, ">": operator.gt, ">=": operator.ge}


@dataclass
class RowFilter:
    """Numeric predicate on one raw x or y column, e.g. ``x_1 <= 0.3``."""

    column: str
    op: str
    threshold: float

    def __post_init__(self):
        if self.op not in _OPS:
            raise ConfigError(f"unknown filter operator {self.op!r}")

    def mask(self, dataset: MultiSourceDataset):
        if self.column in dataset.x_names:
            col = dataset.raw_x()[:, dataset.x_names.index(self.column)]
        elif self.column in dataset.y_names:
            col = dataset.raw_y()[:, dataset.y_names.index(self.column)]
        else:
            raise ConfigError(f"filter column {self.column!r} is not an x or y column")
        return _OPS[self.op](col, self.threshold)

    def apply(self, dataset):
        return dataset.subset(np.flatnonzero(self.mask(dataset)))


@dataclass
class CalibrationStep:
    train: TrainConfig
    filter: RowFilter | None = None
    frozen: dict[str, float | None] = field(default_factory=dict)


def two_step_calibrate(network: Network, train_set, val_set, loss_config: LossConfig, steps):
    """Run ``train`` once per step, carrying the network state forward.

    Each step sees only the rows its filter keeps and pins its own frozen
    parameters (merged over the step's TrainConfig.frozen).
    """
    if not steps:
        raise ConfigError("at least one calibration step is required")
    histories = []
    for k, step in enumerate(steps, start=1):
        tr, va = train_set, val_set
        if step.filter is not None:
            tr = step.filter.apply(train_set)
            va = step.filter.apply(val_set) if val_set is not None else None
        if len(tr) == 0:
            raise ConfigError(f"step {k}: filter keeps no training rows")
        cfg = copy.copy(step.train)
        cfg.frozen = {**step.train.frozen, **step.frozen}
        log.info("calibration step %d: %d rows, frozen %s", k, len(tr), sorted(cfg.frozen))
        network, hist = train(network, tr, va, loss_config, cfg)
        histories.append(hist)
    return network, histories
