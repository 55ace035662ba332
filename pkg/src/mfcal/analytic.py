"""Three-source analytic benchmark: one input, three outputs.

``s0`` is the HF source (noisy), ``s1`` has two calibration parameters and
model-form error, ``s2`` has one calibration parameter and reproduces
``s0`` exactly at ``theta = -0.5``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mfcal.dataset import CalibDomain, MultiSourceDataset, SourceSpec
from mfcal.errors import ConfigError, ContractError, DomainError, GenerationError

SOURCE_NAMES = ("s0", "s1", "s2")
PARAMS = {"s0": (), "s1": ("t1_s1", "t2_s1"), "s2": ("t1_s2",)}
Y_NAMES = ("y_1", "y_2", "y_3")


def _outputs(name, x, theta):
    """Vectorized outputs and log arguments. ``theta`` has shape (..., arity)."""
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if name == "s0":
        arg = -0.5 * x**3 + 2.0 * x**2 + 2.0 * x + 11
        y1 = -0.5 * x**3 - 2.0 * x**2 + x + 1
        y3 = -0.5 * x**3 + 2.0 * (x - 0.5) ** 2 - 2
    elif name == "s1":
        a, b = theta[..., 0], theta[..., 1]
        y1 = a * x**3 - b * x**2 + 2
        arg = a * x**3 + b * x**2 + 2.0 * x + 11
        y3 = a * x**3 + b * np.cosh(x - 0.3) - 3.5
    elif name == "s2":
        a = theta[..., 0]
        y1 = a * x**3 - 2.0 * x**2 + x + 1
        arg = a * x**3 + 2.0 * x**2 + 2.0 * x + 11
        y3 = a * x**3 + 2.0 * (x - 0.5) ** 2 - 2
    else:
        raise ContractError(f"unknown analytic source {name!r}")
    with np.errstate(invalid="ignore", divide="ignore"):
        y2 = np.where(arg > 0, np.log(np.where(arg > 0, arg, 1.0)), np.nan)
    return np.stack(np.broadcast_arrays(y1, y2, y3), axis=-1), arg


def _name(source):
    if isinstance(source, str):
        return source
    if source not in (0, 1, 2):
        raise ContractError(f"source id must be 0, 1 or 2, got {source!r}")
    return SOURCE_NAMES[source]


def eval_source(source, x, theta=()):
    """Noise-free outputs of one source at scalar ``x``."""
    name = _name(source)
    theta = tuple(np.atleast_1d(np.asarray(theta, dtype=float)).tolist()) if np.size(theta) else ()
    if len(theta) != len(PARAMS[name]):
        raise ContractError(f"{name} takes {len(PARAMS[name])} calibration values, got {len(theta)}")
    y, arg = _outputs(name, x, np.array(theta))
    if not arg > 0:
        raise DomainError(name, x, theta)
    return y


def evaluate(source, x, theta=None):
    """Vectorized evaluation; invalid log arguments yield NaN in output 2."""
    name = _name(source)
    if theta is None:
        theta = np.zeros(np.shape(x) + (0,))
    return _outputs(name, x, theta)[0]


@dataclass
class AnalyticConfig:
    x_range: tuple[float, float] = (-1.0, 2.2)
    theta_range: tuple[float, float] = (-1.0, 2.2)
    noise_var: tuple[float, float, float] = (0.025, 0.00005, 0.02)
    n_samples: dict[str, int] = field(default_factory=lambda: {"s0": 40, "s1": 200, "s2": 100})
    sources: tuple[str, ...] = SOURCE_NAMES
    seed: int = 0
    max_retries: int = 100

    def __post_init__(self):
        self.x_range = tuple(float(v) for v in self.x_range)
        self.theta_range = tuple(float(v) for v in self.theta_range)
        self.noise_var = tuple(float(v) for v in self.noise_var)
        self.sources = tuple(self.sources)
        if not self.x_range[0] < self.x_range[1] or not self.theta_range[0] < self.theta_range[1]:
            raise ConfigError("analytic ranges must be nonempty")
        if len(self.noise_var) != 3 or min(self.noise_var) < 0:
            raise ConfigError("noise variances must be three nonnegative numbers")
        if not self.sources or self.sources[0] != "s0":
            raise ConfigError("the analytic source list must start with the HF source s0")
        unknown = set(self.sources) - set(SOURCE_NAMES)
        if unknown:
            raise ConfigError(f"unknown analytic sources {sorted(unknown)}")


def schema(sources=SOURCE_NAMES, n_samples=None):
    """Source specs for a subset of the analytic sources, re-indexed contiguously."""
    n_samples = n_samples or {}
    return tuple(
        SourceSpec(
            source_id=k,
            name=name,
            is_hf=name == "s0",
            calib_param_names=PARAMS[name],
            n_samples=n_samples.get(name),
        )
        for k, name in enumerate(sources)
    )


def domain(config: AnalyticConfig):
    names = [p for s in config.sources for p in PARAMS[s]]
    return CalibDomain({n: config.theta_range for n in names})


def _draw(rng, name, n, config):
    lo, hi = config.x_range
    tlo, thi = config.theta_range
    arity = len(PARAMS[name])
    x = rng.uniform(lo, hi, n)
    theta = rng.uniform(tlo, thi, (n, arity))
    y, arg = _outputs(name, x, theta)
    bad = ~(arg > 0)
    retries = 0
    while bad.any():
        if retries >= config.max_retries:
            raise GenerationError(
                f"{name}: {int(bad.sum())} records still violate the log domain after {retries} retries"
            )
        k = int(bad.sum())
        x[bad] = rng.uniform(lo, hi, k)
        theta[bad] = rng.uniform(tlo, thi, (k, arity))
        y, arg = _outputs(name, x, theta)
        bad = ~(arg > 0)
        retries += 1
    if name == "s0":
        y = y + rng.normal(size=y.shape) * np.sqrt(np.array(config.noise_var))
    return x, theta, y


def generate(config: AnalyticConfig, n_samples=None, stream=0) -> MultiSourceDataset:
    """Draw a raw dataset; ``stream`` separates train/test draws under one seed."""
    counts = n_samples or config.n_samples
    specs = schema(config.sources, counts)
    union = tuple(p for s in config.sources for p in PARAMS[s])
    src, xs, thetas, ys = [], [], [], []
    for spec in specs:
        rng = np.random.default_rng([config.seed, stream, SOURCE_NAMES.index(spec.name)])
        n = int(counts[spec.name])
        x, theta, y = _draw(rng, spec.name, n, config)
        full = np.full((n, len(union)), np.nan)
        for k, p in enumerate(PARAMS[spec.name]):
            full[:, union.index(p)] = theta[:, k]
        src.append(np.full(n, spec.source_id, dtype=np.int64))
        xs.append(x[:, None])
        thetas.append(full)
        ys.append(y)
    return MultiSourceDataset(
        sources=specs,
        param_names=union,
        x_names=("x_1",),
        y_names=Y_NAMES,
        source=np.concatenate(src),
        x=np.concatenate(xs),
        theta=np.concatenate(thetas),
        y=np.concatenate(ys),
    ).validate()


def test_grid(n, mode="random", seed=0, x_range=(-1.0, 2.2)):
    """Test inputs: seeded uniform draws, or an evenly spaced grid."""
    if n < 2:
        raise ContractError("test_grid needs n >= 2")
    lo, hi = x_range
    if mode == "grid":
        return np.linspace(lo, hi, n)
    if mode != "random":
        raise ContractError(f"unknown test_grid mode {mode!r}")
    return np.random.default_rng([seed, 99]).uniform(lo, hi, n)


# pytest would otherwise try to collect this as a test
test_grid.__test__ = False
