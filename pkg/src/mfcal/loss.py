"""Composite emulation + calibration loss.

    total = sum_i (NLL_em_i + NLL_cal_i) + beta_is * (IS_em + IS_cal) + beta_kl * KL

Emulation terms score each source's predictions against its own data with
per-source averaging. Calibration terms score every LF source, evaluated
at a posterior draw on the HF inputs, against the HF targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from mfcal.dataset import Batch
from mfcal.errors import ContractError, NumericError
from mfcal.net import DTYPE, CalibPosterior, Network

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)
Z_95 = 1.96


@dataclass
class LossConfig:
    beta_is: float = 0.1
    beta_kl: float = 0.01
    phi: float = 0.05
    sigma_p: float = 1.0

    def __post_init__(self):
        if not 0 < self.phi < 1:
            raise ContractError(f"phi must lie in (0, 1), got {self.phi}")
        if not self.sigma_p > 0:
            raise ContractError(f"sigma_p must be positive, got {self.sigma_p}")
        if self.beta_is < 0 or self.beta_kl < 0:
            raise ContractError("loss weights must be nonnegative")


def _tensors(*arrays):
    return [a if isinstance(a, torch.Tensor) else torch.as_tensor(np.asarray(a, dtype=float), dtype=DTYPE)
            for a in arrays]


def _check_sigma(sigma, what="sigma"):
    # NaN is left to the finiteness check on the reported terms
    if torch.any(sigma <= 0):
        raise ContractError(f"{what} must be strictly positive")


def nll(y, mu, sigma):
    """Mean Gaussian negative log-likelihood over samples (along the first axis)."""
    y, mu, sigma = _tensors(y, mu, sigma)
    _check_sigma(sigma)
    r = (y - mu) / sigma
    return (HALF_LOG_2PI + torch.log(sigma) + 0.5 * r * r).mean(dim=0)


def interval_score(y, mu, sigma, phi=0.05, z=Z_95):
    """Mean interval score of the central interval ``mu +- z * sigma``."""
    if not 0 < phi < 1:
        raise ContractError(f"phi must lie in (0, 1), got {phi}")
    y, mu, sigma = _tensors(y, mu, sigma)
    _check_sigma(sigma)
    lower = mu - z * sigma
    upper = mu + z * sigma
    below = (lower - y) * (y < lower)
    above = (y - upper) * (y > upper)
    return ((upper - lower) + (2.0 / phi) * (below + above)).mean(dim=0)


def kl_elementwise(sigma, sigma_p):
    return torch.log(sigma / sigma_p) + sigma_p / (2 * sigma) - 0.5


def kl_term(posterior, sigma_p=1.0):
    """Std-only divergence summed over LF sources and owned, unfrozen parameters.

    ``posterior`` is a :class:`CalibPosterior` or a tensor of stds.
    """
    if isinstance(posterior, CalibPosterior):
        mask = posterior.owned & ~posterior.frozen
        sigma = torch.exp(posterior.log_std)[mask]
    else:
        (sigma,) = _tensors(posterior)
    _check_sigma(sigma, "posterior std")
    return kl_elementwise(sigma, sigma_p).sum()


def _emulation_parts(batch: Batch, network: Network, phi):
    if len(batch) == 0:
        raise ContractError("emulation loss needs a nonempty batch")
    ds, n_y = network.config.ds, network.config.n_y
    pred = network.emulate(batch)
    nll_rows, is_rows = [], []
    for j in range(ds):
        sel = batch.source == j
        if not bool(sel.any()):
            nll_rows.append(torch.zeros(n_y, dtype=DTYPE))
            is_rows.append(torch.zeros(n_y, dtype=DTYPE))
            continue
        y, mu, sd = batch.y[sel], pred.mean[sel], pred.std[sel]
        nll_rows.append(nll(y, mu, sd))
        is_rows.append(interval_score(y, mu, sd, phi))
    return torch.stack(nll_rows), torch.stack(is_rows)


def _draw_eps(network: Network, eps):
    post = network.posterior
    out = {}
    for j in post.lf_sources():
        k = int(post.owned[j].sum())
        if isinstance(eps, dict):
            out[j] = torch.as_tensor(eps[j], dtype=DTYPE)
        else:
            out[j] = torch.randn(k, dtype=DTYPE, generator=eps)
    return out


def _calibration_parts(batch: Batch, network: Network, eps, phi):
    ds, n_y = network.config.ds, network.config.n_y
    nll_rows = [torch.zeros(n_y, dtype=DTYPE)]
    is_rows = [torch.zeros(n_y, dtype=DTYPE)]
    if ds == 1:
        return torch.stack(nll_rows), torch.stack(is_rows)
    hf = batch.select(batch.source == 0)
    if len(hf) == 0:
        raise ContractError("calibration loss needs HF records in the batch")
    draws = _draw_eps(network, eps)
    for j in range(1, ds):
        pred = network.calibrate(hf, j, draws[j])
        nll_rows.append(nll(hf.y, pred.mean, pred.std))
        is_rows.append(interval_score(hf.y, pred.mean, pred.std, phi))
    return torch.stack(nll_rows), torch.stack(is_rows)


def emulation_loss(batch: Batch, network: Network, phi=0.05):
    """(NLL_em, IS_em): per-source means, summed over sources and outputs."""
    nll_p, is_p = _emulation_parts(batch, network, phi)
    return nll_p.sum(), is_p.sum()


def calibration_loss(batch: Batch, network: Network, eps=None, phi=0.05):
    """(NLL_cal, IS_cal) with one draw per LF source.

    ``eps`` is a mapping ``{source: standard-normal vector}`` or a
    ``torch.Generator`` (``None`` uses the global generator).
    """
    nll_p, is_p = _calibration_parts(batch, network, eps, phi)
    return nll_p.sum(), is_p.sum()


@dataclass
class LossReport:
    total: torch.Tensor
    nll_em: np.ndarray  # (ds, n_y)
    nll_cal: np.ndarray
    is_em: np.ndarray
    is_cal: np.ndarray
    kl: float
    config: LossConfig = field(repr=False)

    def weighted_sum(self):
        c = self.config
        return (self.nll_em.sum() + self.nll_cal.sum()
                + c.beta_is * (self.is_em.sum() + self.is_cal.sum()) + c.beta_kl * self.kl)

    def components(self):
        return {
            "total": float(self.total.detach()),
            "nll_em": float(self.nll_em.sum()),
            "nll_cal": float(self.nll_cal.sum()),
            "is_em": float(self.is_em.sum()),
            "is_cal": float(self.is_cal.sum()),
            "kl": float(self.kl),
        }

    def as_dict(self, source_names=None):
        """Flat mapping with per-source and per-output breakdowns."""
        out = self.components()
        ds, n_y = self.nll_em.shape
        names = source_names or [f"s{j}" for j in range(ds)]
        for term in ("nll_em", "nll_cal", "is_em", "is_cal"):
            m = getattr(self, term)
            for j in range(ds):
                if term.endswith("cal") and j == 0:
                    continue
                out[f"{term}.{names[j]}"] = float(m[j].sum())
            for i in range(n_y):
                out[f"{term}.y{i + 1}"] = float(m[:, i].sum())
        return out


def total_loss(batch: Batch, network: Network, config: LossConfig, eps=None) -> LossReport:
    nll_em, is_em = _emulation_parts(batch, network, config.phi)
    nll_cal, is_cal = _calibration_parts(batch, network, eps, config.phi)
    kl = kl_term(network.posterior, config.sigma_p)
    total = (nll_em.sum() + nll_cal.sum()
             + config.beta_is * (is_em.sum() + is_cal.sum()) + config.beta_kl * kl)
    for name, value in (("nll_em", nll_em), ("nll_cal", nll_cal), ("is_em", is_em),
                        ("is_cal", is_cal), ("kl", kl)):
        if not torch.all(torch.isfinite(value)):
            raise NumericError(f"non-finite loss term {name}", term=name)
    return LossReport(
        total=total,
        nll_em=nll_em.detach().numpy().copy(),
        nll_cal=nll_cal.detach().numpy().copy(),
        is_em=is_em.detach().numpy().copy(),
        is_cal=is_cal.detach().numpy().copy(),
        kl=float(kl.detach()),
        config=config,
    )
