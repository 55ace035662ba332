"""Accuracy metrics, the grid-search calibration oracle, posterior summaries and latent export."""

from __future__ import annotations

import csv
import itertools
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from mfcal import analytic
from mfcal.dataset import CalibDomain, MultiSourceDataset, Standardizer
from mfcal.errors import ContractError, DataError
from mfcal.net import DTYPE, LatentTrace, Network


def rrmse(y_true, y_pred):
    """RMSE divided by the population std of the targets (column-wise for 2-D input)."""
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    if y_true.shape != y_pred.shape or y_true.shape[0] == 0:
        raise ContractError(f"shape mismatch or empty input: {y_true.shape} vs {y_pred.shape}")
    spread = y_true.std(axis=0)
    if np.any(spread == 0):
        raise DataError("degenerate target: y_true is constant")
    return np.sqrt(np.mean((y_pred - y_true) ** 2, axis=0)) / spread


@dataclass
class OracleResult:
    theta: np.ndarray  # argmin, shape (arity,)
    mse: float
    axes: list[np.ndarray]
    surface: np.ndarray  # MSE over the grid, NaN where skipped
    skipped: list[tuple[float, ...]] = field(default_factory=list)

    def surface_rows(self):
        for idx in itertools.product(*(range(len(a)) for a in self.axes)):
            yield (*[float(a[i]) for a, i in zip(self.axes, idx)], float(self.surface[idx]))


def theta_mse_oracle(lf_eval: Callable, hf_eval: Callable, bounds, resolution=0.01, x_grid=None):
    """Exhaustive grid search for the theta minimizing the noise-free LF-vs-HF MSE.

    ``lf_eval(x, theta)`` maps x of shape (n,) and theta of shape (m, arity)
    to outputs of shape (m, n, n_y); ``hf_eval(x)`` gives (n, n_y). Each
    output's discrepancy is scaled by the HF output's std over ``x_grid``
    and the scaled squared errors are averaged over x and outputs. Grid
    points where the LF model is undefined (NaN) are skipped and recorded.
    """
    if x_grid is None:
        x_grid = np.linspace(-1.0, 2.2, 1000)
    x_grid = np.asarray(x_grid, dtype=float)
    y_hf = np.asarray(hf_eval(x_grid), dtype=float)
    scale = y_hf.std(axis=0)
    scale[scale == 0] = 1.0
    axes = []
    for lo, hi in bounds:
        n = int(round((hi - lo) / resolution)) + 1
        axes.append(np.linspace(lo, hi, n))
    shape = tuple(len(a) for a in axes)
    surface = np.full(shape, np.nan)
    # leading axis is looped, the rest is vectorized
    rest = np.stack(np.meshgrid(*axes[1:], indexing="ij"), axis=-1).reshape(-1, len(axes) - 1) \
        if len(axes) > 1 else np.zeros((1, 0))
    for i, t0 in enumerate(axes[0]):
        theta = np.concatenate([np.full((rest.shape[0], 1), t0), rest], axis=1)
        y_lf = np.asarray(lf_eval(x_grid, theta), dtype=float)
        err = ((y_lf - y_hf[None]) / scale) ** 2
        surface[i] = err.mean(axis=(1, 2)).reshape(shape[1:])
    skipped = [tuple(float(a[k]) for a, k in zip(axes, idx)) for idx in np.argwhere(np.isnan(surface))]
    if np.all(np.isnan(surface)):
        raise DataError("oracle: every grid point was skipped")
    best = np.unravel_index(np.nanargmin(surface), shape)
    theta = np.array([a[k] for a, k in zip(axes, best)])
    return OracleResult(theta=theta, mse=float(surface[best]), axes=axes, surface=surface, skipped=skipped)


def analytic_oracle(source, resolution=0.01, theta_range=(-1.0, 2.2), x_grid=None):
    """Grid oracle for one of the analytic LF sources against noise-free s0."""
    arity = len(analytic.PARAMS[source])
    if arity == 0:
        raise ContractError(f"{source} has no calibration parameters")

    def lf(x, theta):
        return analytic.evaluate(source, x[None, :], theta[:, None, :])

    return theta_mse_oracle(lf, lambda x: analytic.evaluate("s0", x), [theta_range] * arity,
                            resolution, x_grid)


@dataclass
class PosteriorSummary:
    source: str
    param: str
    mean: float
    std: float
    q025: float
    q975: float
    clamp_mu: float
    sigma: float
    lower: float
    upper: float


def _mc_draws(network: Network, j, n_mc, gen):
    idx = network.posterior.owned_index(j)
    eps = torch.randn(n_mc, idx.numel(), dtype=DTYPE, generator=gen)
    with torch.no_grad():
        return network.posterior.sample(j, eps).numpy(), idx.numpy()


def posterior_report(network: Network, standardizer: Standardizer, sources, param_names,
                     n_mc=10000, seed=0):
    """Monte Carlo summaries of each clamped posterior, in raw units."""
    if n_mc < 1000:
        raise ContractError("posterior_report needs n_mc >= 1000")
    gen = torch.Generator().manual_seed(seed)
    post = network.posterior
    out = []
    for j in post.lf_sources():
        draws, idx = _mc_draws(network, j, n_mc, gen)
        raw = standardizer.inverse_theta(draws, idx)
        with torch.no_grad():
            mean_theta = post.mean_theta(j).numpy()
            sigma = post.sigma(j).numpy()
            lo, hi = post.lower[idx].numpy(), post.upper[idx].numpy()
        for k, slot in enumerate(idx):
            col = raw[:, k]
            q025, q975 = np.quantile(col, [0.025, 0.975])
            out.append(PosteriorSummary(
                source=sources[j].name,
                param=param_names[slot],
                mean=float(col.mean()),
                std=float(col.std()),
                q025=float(q025),
                q975=float(q975),
                clamp_mu=float(standardizer.inverse_theta(mean_theta[k], slot)),
                sigma=float(sigma[k] * standardizer.theta_std[slot]),
                lower=float(standardizer.inverse_theta(lo[k], slot)),
                upper=float(standardizer.inverse_theta(hi[k], slot)),
            ))
    return out


def posterior_pdfs(network: Network, standardizer: Standardizer, sources, param_names,
                   n_grid=400, n_mc=100000, bins=80, seed=0):
    """Plot-ready densities per (source, parameter), raw units.

    ``gaussian`` is the unclamped normal density of ``mu + sigma * eps``;
    ``histogram`` is the Monte Carlo density after clamping.
    """
    gen = torch.Generator().manual_seed(seed)
    post = network.posterior
    curves = {}
    for j in post.lf_sources():
        draws, idx = _mc_draws(network, j, n_mc, gen)
        raw = standardizer.inverse_theta(draws, idx)
        with torch.no_grad():
            mu = post.effective_mu()[j, post.owned_index(j)].numpy()
            sigma = post.sigma(j).numpy()
            lo, hi = post.lower[idx].numpy(), post.upper[idx].numpy()
        for k, slot in enumerate(idx):
            s = standardizer.theta_std[slot]
            m = standardizer.inverse_theta(mu[k], slot)
            sd = sigma[k] * s
            a = standardizer.inverse_theta(lo[k], slot)
            b = standardizer.inverse_theta(hi[k], slot)
            grid = np.linspace(a, b, n_grid)
            if sd > 0:
                dens = np.exp(-0.5 * ((grid - m) / sd) ** 2) / (sd * np.sqrt(2 * np.pi))
            else:  # frozen: unit mass on the nearest grid cell
                dens = np.zeros(n_grid)
                dens[np.argmin(np.abs(grid - m))] = 1.0 / (grid[1] - grid[0])
            hist, edges = np.histogram(raw[:, k], bins=bins, range=(a, b), density=True)
            curves[(sources[j].name, param_names[slot])] = {
                "gaussian": np.column_stack([grid, dens]),
                "histogram": np.column_stack([(edges[:-1] + edges[1:]) / 2, hist]),
            }
    return curves


def emulate_hf_suite(network: Network, test_set: MultiSourceDataset, standardizer: Standardizer,
                     posterior: list[PosteriorSummary] | None = None):
    """RRMSE against HF test targets, as HF (t_s = 0) and as each calibrated LF source.

    LF sources are evaluated at their Monte Carlo posterior mean.
    ``test_set`` holds raw values.
    """
    test = test_set.unstandardized()
    hf = test.subset(np.flatnonzero(test.source == 0))
    if len(hf) == 0:
        raise DataError("test set has no HF records")
    names = [s.name for s in test.sources]
    x = torch.as_tensor(standardizer.transform_x(hf.x), dtype=DTYPE)
    rows = []
    with torch.no_grad():
        pred = network.predict(0, x)
    y_hat = standardizer.inverse_y(pred.mean.numpy())
    rows.append({"predictor": names[0], "theta": "", "rrmse": rrmse(hf.y, y_hat)})
    by_source = {}
    for p in posterior or []:
        by_source.setdefault(p.source, {})[p.param] = p.mean
    for j in network.posterior.lf_sources():
        idx = network.posterior.owned_index(j).numpy()
        params = [test.param_names[s] for s in idx]
        if posterior is not None:
            theta_raw = np.array([by_source[names[j]][p] for p in params])
        else:
            with torch.no_grad():
                theta_raw = standardizer.inverse_theta(network.posterior.mean_theta(j).numpy(), idx)
        theta_std = standardizer.transform_theta(theta_raw, idx)
        with torch.no_grad():
            pred = network.predict(j, x, torch.as_tensor(theta_std, dtype=DTYPE))
        y_hat = standardizer.inverse_y(pred.mean.numpy())
        label = ";".join(f"{p}={v:.6g}" for p, v in zip(params, theta_raw))
        rows.append({"predictor": names[j], "theta": label, "rrmse": rrmse(hf.y, y_hat)})
    return rows


def _bbox_area(points):
    span = points.max(axis=0) - points.min(axis=0)
    return float(np.prod(span))


def export_latents(network: Network, standardizer: Standardizer, domain: CalibDomain, sources,
                   param_names, n_probe=500, seed=0):
    """Latent traces: z_s per source and z_theta clouds under prior and posterior draws.

    Returns ``(source_trace, calib_trace, summary)`` where ``summary`` holds
    bounding-box areas and the distances between the HF z_theta point and
    each calibrated LF source.
    """
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    post = network.posterior
    ds = network.config.ds
    d_theta = network.config.d_theta
    src_trace = LatentTrace("z_s")
    cal_trace = LatentTrace("z_theta")
    summary = {"distance": {}, "distance_mc": {}, "bbox_prior": {}, "bbox_posterior": {}}
    with torch.no_grad():
        z_s = network.encode_source(torch.arange(ds))
        for j in range(ds):
            src_trace.add(sources[j].name, z_s[j].numpy())

        # HF: arbitrary dummy values are masked to zero before Block 1
        dummies = torch.as_tensor(rng.normal(size=(n_probe, d_theta)) * 5, dtype=DTYPE)
        masked = torch.where(post.owned[0], dummies, torch.zeros_like(dummies))
        z_hf = network.encode_calibration(z_s[0].expand(n_probe, -1), masked)
        cal_trace.add(f"{sources[0].name}", z_hf.numpy())
        z0 = z_hf[0]

        for j in post.lf_sources():
            idx = post.owned_index(j)
            name = sources[j].name
            names = [param_names[s] for s in idx.tolist()]
            lo, hi = domain.lower(names), domain.upper(names)
            prior_raw = rng.uniform(lo, hi, (n_probe, len(names)))
            prior = torch.as_tensor(standardizer.transform_theta(prior_raw, idx.numpy()), dtype=DTYPE)
            z_prior = network.encode_calibration(z_s[j].expand(n_probe, -1), post.fill_slots(j, prior))
            eps = torch.randn(n_probe, idx.numel(), dtype=DTYPE, generator=gen)
            draws = post.sample(j, eps)
            z_post = network.encode_calibration(z_s[j].expand(n_probe, -1), post.fill_slots(j, draws))
            cal_trace.add(f"{name}:prior", z_prior.numpy())
            cal_trace.add(f"{name}:posterior", z_post.numpy())
            z_mean = network.encode_calibration(z_s[j], post.fill_slots(j, draws.mean(0)))
            summary["distance"][name] = float(torch.linalg.norm(z0 - z_mean))
            summary["distance_mc"][name] = float(torch.linalg.norm(z_post - z0, dim=-1).mean())
            summary["bbox_prior"][name] = _bbox_area(z_prior.numpy())
            summary["bbox_posterior"][name] = _bbox_area(z_post.numpy())
    return src_trace, cal_trace, summary


def write_rows(path, header, rows, comment=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        if comment:
            for line in comment.splitlines():
                fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def write_latents(path, trace: LatentTrace, comment=None):
    width = next(iter(trace.points.values())).shape[1] if trace.points else 2
    write_rows(path, ["label", *[f"z{k + 1}" for k in range(width)]], trace.rows(), comment)


def summaries_as_dicts(summaries):
    return [asdict(s) for s in summaries]
