"""Command-line entry point: ``mfcal {generate,train,two-step,eval}``.

Runs are driven by one YAML config; ``--set dotted.key=value`` and the
dedicated flags override individual entries. All randomness derives from
the root seed.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import yaml

from mfcal import analytic
from mfcal.dataset import (
    Batch,
    CalibDomain,
    SourceSpec,
    Standardizer,
    load_dataset,
    split_train_val,
    standardize,
    write_dataset,
)
from mfcal.errors import ConfigError, DataError, MfcalError
from mfcal.evaluate import (
    analytic_oracle,
    emulate_hf_suite,
    export_latents,
    posterior_pdfs,
    posterior_report,
    write_latents,
    write_rows,
)
from mfcal.loss import LossConfig, total_loss
from mfcal.net import build_config, init, load_checkpoint, save_checkpoint
from mfcal.seeding import derive_seed
from mfcal.trainer import CalibrationStep, RowFilter, TrainConfig, train, two_step_calibrate

log = logging.getLogger("mfcal")

OUT_ENV = "MFCAL_OUT"


@dataclass
class DataOptions:
    dir: str | None = None  # defaults to <out>/data
    schema: list | None = None  # source dicts; read from <dir>/schema.yaml when absent
    domain: dict | None = None  # name -> [lower, upper]; observed range when absent
    val_fraction: float = 0.2
    n_test: int = 1000


@dataclass
class EvalOptions:
    n_mc: int = 10000
    oracle_resolution: float = 0.01
    n_probe: int = 500


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    data: DataOptions = field(default_factory=DataOptions)
    analytic: dict = field(default_factory=dict)
    network: dict = field(default_factory=dict)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    steps: list = field(default_factory=list)
    eval: EvalOptions = field(default_factory=EvalOptions)

    @classmethod
    def from_dict(cls, d):
        d = copy.deepcopy(d or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            cfg = cls(
                seed=int(d.get("seed", 0)),
                out=str(d.get("out", "runs/default")),
                data=DataOptions(**(d.get("data") or {})),
                analytic=dict(d.get("analytic") or {}),
                network=dict(d.get("network") or {}),
                loss=LossConfig(**(d.get("loss") or {})),
                train=TrainConfig(**(d.get("train") or {})),
                steps=list(d.get("steps") or []),
                eval=EvalOptions(**(d.get("eval") or {})),
            )
        except TypeError as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
        cfg.analytic_config()  # validate early
        return cfg

    def to_dict(self):
        return json.loads(json.dumps(asdict(self), default=list))

    def hash(self):
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def analytic_config(self):
        try:
            return analytic.AnalyticConfig(**{**self.analytic, "seed": derive_seed(self.seed, "data")})
        except TypeError as exc:
            raise ConfigError(f"invalid analytic config: {exc}") from exc

    def train_config(self, overrides=None):
        base = asdict(self.train)
        base.update(overrides or {})
        base["seed"] = self.seed
        try:
            return TrainConfig(**base)
        except TypeError as exc:
            raise ConfigError(f"invalid train config: {exc}") from exc


def _set_path(d, dotted, value):
    keys = dotted.split(".")
    cur = d
    for k in keys[:-1]:
        nxt = cur.get(k)
        if nxt is None:
            nxt = cur[k] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"cannot set {dotted!r}: {k!r} is not a mapping")
        cur = nxt
    cur[keys[-1]] = value


def load_config(path=None, overrides=()):
    d = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        d = yaml.safe_load(path.read_text()) or {}
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        key, raw = item.split("=", 1)
        _set_path(d, key.strip(), yaml.safe_load(raw))
    return RunConfig.from_dict(d)


def _header(cfg: RunConfig, extra=None):
    lines = [f"config_hash={cfg.hash()} seed={cfg.seed}"]
    if extra:
        lines.append(extra)
    return "\n".join(lines)


def _file_hash(*paths):
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()[:16]


def _data_dir(cfg: RunConfig):
    return Path(cfg.data.dir) if cfg.data.dir else Path(cfg.out) / "data"


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n")


# ---------------------------------------------------------------- generate

def cmd_generate(cfg: RunConfig, force=False):
    ac = cfg.analytic_config()
    out = _data_dir(cfg)
    files = [out / n for n in ("train.csv", "val.csv", "test.csv", "schema.yaml", "manifest.json")]
    if any(f.exists() for f in files) and not force:
        raise ConfigError(f"{out} already holds a dataset; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    # n training rows plus n/4 validation rows per source at the default fraction
    frac = cfg.data.val_fraction
    totals = {k: int(round(v / (1 - frac))) for k, v in ac.n_samples.items() if k in ac.sources}
    raw = analytic.generate(ac, n_samples=totals, stream=0)
    train_set, val_set = split_train_val(raw, frac, derive_seed(cfg.seed, "split"))
    test = analytic.generate(ac, n_samples={k: cfg.data.n_test for k in ac.sources}, stream=1)
    header = _header(cfg)
    write_dataset(out / "train.csv", train_set, header)
    write_dataset(out / "val.csv", val_set, header)
    write_dataset(out / "test.csv", test, header)
    schema = {
        "analytic": True,
        "sources": [{**s.to_dict(), "n_samples": n}
                    for s, n in zip(train_set.sources, train_set.counts())],
        "domain": analytic.domain(ac).to_dict(),
    }
    (out / "schema.yaml").write_text(yaml.safe_dump(schema, sort_keys=False))
    manifest = {
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "data_seed": ac.seed,
        "sources": list(ac.sources),
        "counts": {
            "train": dict(zip(ac.sources, train_set.counts())),
            "val": dict(zip(ac.sources, val_set.counts())),
            "test": dict(zip(ac.sources, test.counts())),
        },
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


# ---------------------------------------------------------------- data loading

def _load_schema(cfg: RunConfig):
    d = _data_dir(cfg)
    meta = {}
    if (d / "schema.yaml").exists():
        meta = yaml.safe_load((d / "schema.yaml").read_text()) or {}
    sources = cfg.data.schema or meta.get("sources")
    if not sources:
        raise ConfigError("no source schema: set data.schema or provide schema.yaml")
    schema = tuple(SourceSpec.from_dict(s) for s in sources)
    domain = cfg.data.domain or meta.get("domain")
    return schema, domain, bool(meta.get("analytic", False))


def _load_splits(cfg: RunConfig):
    d = _data_dir(cfg)
    schema, domain, is_analytic = _load_schema(cfg)
    train_path, val_path = d / "train.csv", d / "val.csv"
    if not train_path.exists():
        raise DataError(f"training data {train_path} does not exist")
    train_raw = load_dataset(train_path, schema)
    if val_path.exists():
        val_raw = load_dataset(val_path, schema)
        hashed = (train_path, val_path)
    else:
        train_raw, val_raw = split_train_val(train_raw, cfg.data.val_fraction,
                                             derive_seed(cfg.seed, "split"))
        hashed = (train_path,)
    dom = CalibDomain.from_dict(domain) if domain else CalibDomain.from_data(train_raw)
    if train_raw.param_names and not dom.covers(train_raw):
        raise DataError("calibration domain does not cover the observed theta values")
    st = Standardizer.fit(train_raw)
    return {
        "train": standardize(train_raw, st),
        "val": standardize(val_raw, st) if len(val_raw) else None,
        "standardizer": st,
        "domain": dom,
        "schema": schema,
        "data_hash": _file_hash(*hashed),
        "analytic": is_analytic,
    }


# ---------------------------------------------------------------- train

def _finish_training(cfg, data, net, histories, out):
    header = _header(cfg)
    for k, hist in enumerate(histories):
        name = "history.csv" if len(histories) == 1 else f"history_step{k + 1}.csv"
        hist.write(out / name, header)
    g = torch.Generator().manual_seed(derive_seed(cfg.seed, "report-eps"))
    with torch.no_grad():
        rep = total_loss(Batch.from_dataset(data["train"]), net, cfg.loss, eps=g)
    names = [s.name for s in data["schema"]]
    _write_json(out / "loss_report.json", {
        "config_hash": cfg.hash(), "seed": cfg.seed, **rep.as_dict(names),
        "best_epoch": histories[-1].best_epoch,
    })
    meta = {"config_hash": cfg.hash(), "seed": cfg.seed, "data_hash": data["data_hash"],
            "analytic": data["analytic"]}
    save_checkpoint(out / "checkpoint.pt", net, standardizer=data["standardizer"], domain=data["domain"],
                    sources=data["schema"], param_names=data["train"].param_names, meta=meta)
    _write_json(out / "standardizer.json", {"config_hash": cfg.hash(), "seed": cfg.seed,
                                            **data["standardizer"].to_dict()})
    return rep


def _init_network(cfg, data):
    try:
        net_cfg = build_config(data["train"], **cfg.network)
    except TypeError as exc:
        raise ConfigError(f"invalid network config: {exc}") from exc
    return init(net_cfg, data["train"], derive_seed(cfg.seed, "init"), data["domain"])


def cmd_train(cfg: RunConfig):
    data = _load_splits(cfg)
    net = _init_network(cfg, data)
    out = Path(cfg.out)
    t0 = time.perf_counter()
    net, hist = train(net, data["train"], data["val"], cfg.loss, cfg.train_config())
    log.info("training took %.1f s", time.perf_counter() - t0)
    return _finish_training(cfg, data, net, [hist], out)


def _parse_steps(cfg: RunConfig):
    steps = []
    for k, s in enumerate(cfg.steps, start=1):
        s = dict(s)
        flt = s.pop("filter", None)
        frozen = s.pop("frozen", None) or {}
        train_over = s.pop("train", None) or {}
        if s:
            raise ConfigError(f"step {k}: unknown keys {sorted(s)}")
        try:
            row_filter = RowFilter(**flt) if flt else None
        except TypeError as exc:
            raise ConfigError(f"step {k}: invalid filter: {exc}") from exc
        steps.append(CalibrationStep(train=cfg.train_config(train_over), filter=row_filter,
                                     frozen=dict(frozen)))
    if not steps:
        raise ConfigError("two-step needs a non-empty 'steps' list in the config")
    return steps


def cmd_two_step(cfg: RunConfig):
    data = _load_splits(cfg)
    steps = _parse_steps(cfg)
    net = _init_network(cfg, data)
    net, hists = two_step_calibrate(net, data["train"], data["val"], cfg.loss, steps)
    return _finish_training(cfg, data, net, hists, Path(cfg.out))


# ---------------------------------------------------------------- eval

def cmd_eval(cfg: RunConfig, oracle=False, latents=False):
    out = Path(cfg.out)
    ckpt = load_checkpoint(out / "checkpoint.pt")
    data = _load_splits(cfg)
    if ckpt.meta.get("data_hash") != data["data_hash"]:
        raise DataError("checkpoint was trained on different data (dataset hash mismatch)")
    net, st = ckpt.network, ckpt.standardizer
    eval_dir = out / "eval"
    header = _header(cfg)
    report = {"config_hash": cfg.hash(), "seed": cfg.seed}

    posterior = posterior_report(net, st, ckpt.sources, ckpt.param_names, cfg.eval.n_mc,
                                 derive_seed(cfg.seed, "posterior"))
    report["posterior"] = [asdict(p) for p in posterior]
    write_rows(eval_dir / "posterior.csv",
               ["source", "param", "mean", "std", "q025", "q975", "clamp_mu", "sigma", "lower", "upper"],
               [list(asdict(p).values()) for p in posterior], header)
    for (src, param), curves in posterior_pdfs(net, st, ckpt.sources, ckpt.param_names,
                                               seed=derive_seed(cfg.seed, "pdf")).items():
        write_rows(eval_dir / f"pdf_{src}_{param}_gaussian.csv", ["theta", "density"],
                   curves["gaussian"].tolist(), header)
        write_rows(eval_dir / f"pdf_{src}_{param}_histogram.csv", ["theta", "density"],
                   curves["histogram"].tolist(), header)

    test_path = _data_dir(cfg) / "test.csv"
    if test_path.exists():
        test = load_dataset(test_path, ckpt.sources)
        rows = emulate_hf_suite(net, test, st, posterior)
        n_y = len(rows[0]["rrmse"])
        write_rows(eval_dir / "rrmse.csv", ["predictor", "theta", *[f"y{i + 1}" for i in range(n_y)]],
                   [[r["predictor"], r["theta"], *r["rrmse"].tolist()] for r in rows], header)
        report["rrmse"] = [{**r, "rrmse": r["rrmse"].tolist()} for r in rows]
    else:
        log.warning("no test set at %s; skipping RRMSE table", test_path)

    if oracle:
        if not ckpt.meta.get("analytic"):
            raise ConfigError("--oracle needs the built-in analytic sources")
        ac = cfg.analytic_config()
        report["oracle"] = {}
        for s in ckpt.sources[1:]:
            res = analytic_oracle(s.name, cfg.eval.oracle_resolution, ac.theta_range)
            report["oracle"][s.name] = {"theta": res.theta.tolist(), "mse": res.mse,
                                        "params": list(s.calib_param_names), "skipped": len(res.skipped)}
            write_rows(eval_dir / f"oracle_surface_{s.name}.csv",
                       [*s.calib_param_names, "mse"], res.surface_rows(), header)
        write_rows(eval_dir / "oracle.csv", ["source", "param", "theta_mse", "posterior_mean"],
                   [[src, p, th, next(q.mean for q in posterior if q.source == src and q.param == p)]
                    for src, r in report["oracle"].items() for p, th in zip(r["params"], r["theta"])],
                   header)

    if latents:
        src_trace, cal_trace, summary = export_latents(
            net, st, ckpt.domain, ckpt.sources, ckpt.param_names, cfg.eval.n_probe,
            derive_seed(cfg.seed, "latents"))
        write_latents(eval_dir / "latent_source.csv", src_trace, header)
        write_latents(eval_dir / "latent_calib.csv", cal_trace, header)
        report["latents"] = summary

    _write_json(eval_dir / "eval_report.json", report)
    return report


# ---------------------------------------------------------------- main

def build_parser():
    p = argparse.ArgumentParser(prog="mfcal", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run config")
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--out", help=f"output directory (env {OUT_ENV} otherwise)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry by dotted path, e.g. loss.beta_kl=0.1")
    common.add_argument("--sources", help="comma-separated analytic sources, e.g. s0,s2")
    common.add_argument("--epochs", type=int, help="shortcut for train.epochs")
    common.add_argument("-v", "--verbose", action="store_true")

    g = sub.add_parser("generate", parents=[common], help="write the analytic benchmark dataset")
    g.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    sub.add_parser("train", parents=[common], help="train a network")
    sub.add_parser("two-step", parents=[common], help="multi-step calibration with frozen parameters")
    e = sub.add_parser("eval", parents=[common], help="evaluate a trained checkpoint")
    e.add_argument("--oracle", action="store_true", help="run the grid-search calibration oracle")
    e.add_argument("--latents", action="store_true", help="export latent traces")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        out = args.out or os.environ.get(OUT_ENV)
        if out:
            overrides.append(f"out={json.dumps(out)}")
        if args.sources:
            srcs = [s.strip() for s in args.sources.split(",") if s.strip()]
            overrides.append(f"analytic.sources={json.dumps(srcs)}")
        if args.epochs is not None:
            overrides.append(f"train.epochs={args.epochs}")
        cfg = load_config(args.config, overrides)
        if args.command == "generate":
            cmd_generate(cfg, force=args.force)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "two-step":
            cmd_two_step(cfg)
        elif args.command == "eval":
            cmd_eval(cfg, oracle=args.oracle, latents=args.latents)
    except MfcalError as exc:
        print(f"mfcal: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
