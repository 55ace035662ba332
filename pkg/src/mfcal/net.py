"""Multi-block probabilistic network for joint emulation and calibration.

Block 0 embeds the one-hot source indicator into ``z_s``. Block 1 maps
``z_s`` together with the masked calibration vector to ``z_theta``. Block 2
embeds the one-hot categorical inputs into ``z_c`` and is absent when there
are none. Block 3 maps ``(x, z_theta, z_c)`` to a mean and a standard
deviation per output.

Everything lives in standardized units and float64.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from mfcal.dataset import Batch, CalibDomain, MultiSourceDataset, SourceSpec, Standardizer, mask_theta
from mfcal.errors import ContractError, DataError

DTYPE = torch.float64
CHECKPOINT_FORMAT = "mfcal-checkpoint"
CHECKPOINT_VERSION = 1

# keeps tanh-clamped draws strictly inside the bounds once tanh saturates to +-1
_CLAMP_SHRINK = 1.0 - 1e-9


@dataclass
class NetworkConfig:
    ds: int
    d_theta: int
    n_x: int
    n_y: int
    tc_dim: int = 0
    z_source: int = 2
    z_calib: int = 2
    z_cat: int = 2
    block_hidden: tuple[int, ...] = (5,)
    head_hidden: tuple[int, ...] = (16, 32, 16, 8)
    sigma_init_fraction: float = 0.25

    def __post_init__(self):
        self.block_hidden = tuple(self.block_hidden)
        self.head_hidden = tuple(self.head_hidden)
        if min(self.z_source, self.z_calib, self.z_cat) < 1:
            raise ContractError("latent dimensions must be >= 1")
        if self.ds < 1 or self.n_y < 1:
            raise ContractError("need at least one source and one output")

    @property
    def n_out(self):
        return 2 * self.n_y


class PredictiveDistribution(NamedTuple):
    mean: torch.Tensor
    std: torch.Tensor


@dataclass
class LatentTrace:
    """Latent points grouped by label; ``points[label]`` has shape (n, z_dim)."""

    kind: str
    points: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, label, z):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if label in self.points:
            z = np.concatenate([self.points[label], z])
        self.points[label] = z

    def rows(self):
        for label, pts in self.points.items():
            for p in pts:
                yield (label, *p.tolist())


def mlp(n_in, hidden, n_out):
    layers = []
    for h in hidden:
        layers += [nn.Linear(n_in, h), nn.Tanh()]
        n_in = h
    layers.append(nn.Linear(n_in, n_out))
    return nn.Sequential(*layers)


class CalibPosterior(nn.Module):
    """Independent Gaussian per (LF source, owned parameter), clamped by a scaled tanh.

    ``mu`` and ``log_std`` are (ds, dθ) matrices; only entries in ``owned``
    are used. A draw is ``clamp(mu + exp(log_std) * eps)`` where
    ``clamp(v) = c + h * tanh((v - c) / h)`` with ``c``/``h`` the centre and
    half-width of the standardized domain.
    """

    def __init__(self, owned, lower, upper):
        super().__init__()
        owned = torch.as_tensor(owned, dtype=torch.bool)
        ds, d_theta = owned.shape
        if owned[0].any():
            raise ContractError("the HF source cannot own calibration parameters")
        lower = torch.as_tensor(lower, dtype=DTYPE)
        upper = torch.as_tensor(upper, dtype=DTYPE)
        if torch.any(lower >= upper):
            raise ContractError("calibration domain bounds must satisfy lower < upper")
        self.register_buffer("owned", owned)
        self.register_buffer("center", (lower + upper) / 2)
        self.register_buffer("half_width", (upper - lower) / 2)
        self.register_buffer("frozen", torch.zeros(ds, d_theta, dtype=torch.bool))
        self.register_buffer("pinned", torch.zeros(ds, d_theta, dtype=DTYPE))
        self.mu = nn.Parameter(torch.zeros(ds, d_theta, dtype=DTYPE))
        self.log_std = nn.Parameter(torch.zeros(ds, d_theta, dtype=DTYPE))

    @property
    def lower(self):
        return self.center - self.half_width

    @property
    def upper(self):
        return self.center + self.half_width

    def owned_index(self, j):
        return torch.nonzero(self.owned[j]).flatten()

    def clamp(self, v, index=None):
        c, h = (self.center, self.half_width) if index is None else (self.center[index], self.half_width[index])
        return c + h * _CLAMP_SHRINK * torch.tanh((v - c) / h)

    def unclamp(self, theta, index=None):
        c, h = (self.center, self.half_width) if index is None else (self.center[index], self.half_width[index])
        return c + h * torch.atanh((theta - c) / (h * _CLAMP_SHRINK))

    def effective_mu(self):
        return torch.where(self.frozen, self.pinned, self.mu)

    def sigma(self, j=None):
        """Sampling scale; zero for frozen entries."""
        s = torch.exp(self.log_std) * (~self.frozen)
        return s if j is None else s[j, self.owned_index(j)]

    def sample(self, j, eps):
        """Reparameterized draw for LF source ``j``; ``eps`` spans its owned slots."""
        if j == 0:
            raise ContractError("the HF source has no calibration parameters")
        idx = self.owned_index(j)
        eps = torch.as_tensor(eps, dtype=DTYPE)
        if eps.shape[-1] != idx.numel():
            raise ContractError(f"source {j} owns {idx.numel()} parameters, eps has {eps.shape[-1]}")
        mu = self.effective_mu()[j, idx]
        return self.clamp(mu + self.sigma(j) * eps, idx)

    def mean_theta(self, j):
        """``clamp(mu)`` for source ``j``: the draw at eps = 0."""
        idx = self.owned_index(j)
        return self.clamp(self.effective_mu()[j, idx], idx)

    def fill_slots(self, j, values):
        """Scatter owned-slot values into a full dθ vector with zeros elsewhere."""
        idx = self.owned_index(j)
        out = torch.zeros(values.shape[:-1] + (self.owned.shape[1],), dtype=values.dtype)
        out[..., idx] = values
        return out

    def lf_sources(self):
        return [j for j in range(1, self.owned.shape[0])]

    @torch.no_grad()
    def initialize(self, j, theta_mean, sigma):
        idx = self.owned_index(j)
        theta_mean = torch.as_tensor(theta_mean, dtype=DTYPE)
        # keep the target strictly inside so atanh stays finite
        lim = self.half_width[idx] * _CLAMP_SHRINK * (1 - 1e-6)
        theta_mean = torch.minimum(torch.maximum(theta_mean, self.center[idx] - lim), self.center[idx] + lim)
        self.mu[j, idx] = self.unclamp(theta_mean, idx)
        self.log_std[j, idx] = torch.log(torch.as_tensor(sigma, dtype=DTYPE))

    @torch.no_grad()
    def freeze(self, j, slot, value):
        """Pin the mean of one entry so that ``clamp(mu)`` equals ``value`` (standardized)."""
        if not self.owned[j, slot]:
            raise ContractError(f"source {j} does not own slot {slot}")
        idx = torch.tensor([slot])
        mu = self.unclamp(torch.as_tensor([value], dtype=DTYPE), idx)[0]
        if not torch.isfinite(mu):
            raise ContractError(f"freeze value {value} lies outside the calibration domain")
        self.frozen[j, slot] = True
        self.pinned[j, slot] = mu
        self.mu[j, slot] = mu

    @torch.no_grad()
    def unfreeze_all(self):
        self.frozen.zero_()


class Network(nn.Module):
    def __init__(self, config: NetworkConfig, owned, lower, upper):
        super().__init__()
        self.config = config
        c = config
        self.block0 = mlp(c.ds, c.block_hidden, c.z_source)
        self.block1 = mlp(c.z_source + c.d_theta, c.block_hidden, c.z_calib)
        self.block2 = mlp(c.tc_dim, c.block_hidden, c.z_cat) if c.tc_dim else None
        n_head_in = c.n_x + c.z_calib + (c.z_cat if c.tc_dim else 0)
        self.block3 = mlp(n_head_in, c.head_hidden, c.n_out)
        self.posterior = CalibPosterior(owned, lower, upper)
        self.to(DTYPE)

    def weight_parameters(self):
        """Block parameters; the calibration posterior is excluded."""
        return [p for name, p in self.named_parameters() if not name.startswith("posterior.")]

    def encode_source(self, t_s):
        t_s = torch.as_tensor(t_s, dtype=torch.long)
        if torch.any((t_s < 0) | (t_s >= self.config.ds)):
            raise ContractError(f"source index outside [0, {self.config.ds})")
        return self.block0(nn.functional.one_hot(t_s, self.config.ds).to(DTYPE))

    def encode_calibration(self, z_s, theta_masked):
        return self.block1(torch.cat([z_s, theta_masked], dim=-1))

    def encode_categorical(self, tc_onehot):
        if self.block2 is None:
            return tc_onehot[..., :0]
        return self.block2(tc_onehot)

    def forward(self, t_s, x, theta_masked, tc_onehot=None, return_latents=False):
        x = torch.as_tensor(x, dtype=DTYPE)
        theta_masked = torch.as_tensor(theta_masked, dtype=DTYPE)
        t_s = torch.as_tensor(t_s, dtype=torch.long).expand(x.shape[:-1])
        if tc_onehot is None:
            tc_onehot = torch.zeros(x.shape[:-1] + (self.config.tc_dim,), dtype=DTYPE)
        theta_masked = theta_masked.expand(x.shape[:-1] + theta_masked.shape[-1:])
        z_s = self.encode_source(t_s)
        z_theta = self.encode_calibration(z_s, theta_masked)
        z_c = self.encode_categorical(tc_onehot)
        out = self.block3(torch.cat([x, z_theta, z_c], dim=-1))
        n_y = self.config.n_y
        pred = PredictiveDistribution(out[..., :n_y], torch.exp(out[..., n_y:]))
        if return_latents:
            return pred, {"z_s": z_s, "z_theta": z_theta, "z_c": z_c}
        return pred

    def emulate(self, batch: Batch, return_latents=False):
        """Emulation mode: each record's own calibration data, zero elsewhere."""
        theta = mask_theta(batch.theta, batch.owned, torch.zeros(batch.theta.shape[-1], dtype=DTYPE))
        return self.forward(batch.source, batch.x, theta, batch.tc_onehot, return_latents)

    def calibrate(self, batch: Batch, j, eps, return_latents=False):
        """Calibration mode: HF inputs evaluated as source ``j`` at a posterior draw."""
        if j == 0:
            raise ContractError("calibration mode needs an LF source")
        theta_hat = self.posterior.sample(j, eps)
        theta = self.posterior.fill_slots(j, theta_hat)
        return self.forward(j, batch.x, theta, batch.tc_onehot, return_latents)

    def predict(self, j, x, theta_owned=None, tc_onehot=None):
        """Prediction as source ``j`` with fixed values for its owned parameters."""
        x = torch.as_tensor(x, dtype=DTYPE)
        if theta_owned is None:
            theta = torch.zeros(self.config.d_theta, dtype=DTYPE)
        else:
            theta = self.posterior.fill_slots(j, torch.as_tensor(theta_owned, dtype=DTYPE))
        return self.forward(j, x, theta, tc_onehot)


def build_config(dataset: MultiSourceDataset, **overrides) -> NetworkConfig:
    tc_dim = int(sum(dataset.tc_cardinalities))
    return NetworkConfig(
        ds=dataset.ds,
        d_theta=len(dataset.param_names),
        n_x=len(dataset.x_names),
        n_y=dataset.n_y,
        tc_dim=tc_dim,
        **overrides,
    )


def standardized_bounds(domain: CalibDomain, dataset: MultiSourceDataset):
    st = dataset.standardizer
    names = dataset.param_names
    lo, hi = domain.lower(names), domain.upper(names)
    if st is not None:
        lo, hi = st.transform_theta(lo), st.transform_theta(hi)
    return lo, hi


def init(config: NetworkConfig, dataset: MultiSourceDataset, seed: int, domain: CalibDomain | None = None):
    """Seeded network with posterior means at the per-source sample means of theta."""
    if not dataset.is_standardized:
        raise ContractError("init expects a standardized dataset")
    domain = domain or CalibDomain.from_data(dataset)
    lo, hi = standardized_bounds(domain, dataset)
    owned = dataset.ownership()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = Network(config, owned, lo, hi)
    st = dataset.standardizer
    names = dataset.param_names
    width_raw = domain.upper(names) - domain.lower(names)
    for j in net.posterior.lf_sources():
        idx = np.flatnonzero(owned[j])
        if idx.size == 0:
            continue
        rows = dataset.theta[dataset.source == j][:, idx]
        if rows.shape[0] == 0:
            raise DataError(f"source {dataset.sources[j].name!r} has no records to initialize from")
        sigma = config.sigma_init_fraction * width_raw[idx] / st.theta_std[idx]
        net.posterior.initialize(j, rows.mean(axis=0), sigma)
    return net


def save_checkpoint(path, net: Network, *, standardizer: Standardizer, domain: CalibDomain,
                    sources, param_names, meta=None):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "network_config": asdict(net.config),
        "state_dict": {k: v.detach().clone() for k, v in net.state_dict().items()},
        "standardizer": standardizer.to_dict(),
        "domain": domain.to_dict(),
        "sources": [s.to_dict() for s in sources],
        "param_names": list(param_names),
        "meta": dict(meta or {}),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


class Checkpoint(NamedTuple):
    network: Network
    standardizer: Standardizer
    domain: CalibDomain
    sources: tuple[SourceSpec, ...]
    param_names: tuple[str, ...]
    meta: dict


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint {path} does not exist")
    payload = torch.load(path, weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not an mfcal checkpoint")
    if payload["version"] > CHECKPOINT_VERSION:
        raise DataError(f"{path}: checkpoint version {payload['version']} is newer than supported")
    config = NetworkConfig(**payload["network_config"])
    sd = payload["state_dict"]
    net = Network(config, sd["posterior.owned"], sd["posterior.center"] - sd["posterior.half_width"],
                  sd["posterior.center"] + sd["posterior.half_width"])
    net.load_state_dict(sd)
    return Checkpoint(
        network=net,
        standardizer=Standardizer.from_dict(payload["standardizer"]),
        domain=CalibDomain.from_dict(payload["domain"]),
        sources=tuple(SourceSpec.from_dict(s) for s in payload["sources"]),
        param_names=tuple(payload["param_names"]),
        meta=payload["meta"],
    )
