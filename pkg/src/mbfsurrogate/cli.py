"""Command-line workflow: simulate -> label -> train -> predict -> render,
plus fit, crossval and benchmark.

Every run reads an optional YAML or JSON config (``--config``) whose keys
mirror the dataclasses below; any field can be overridden on the command
line with its dotted name, e.g. ``--mcmc.n_iter 5000``.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from pathlib import Path

import yaml

from . import formats
from .cnn import NetworkConfig, TrainConfig, train
from .errors import FormatError, PreconditionError
from .mcmc import McmcConfig, Prior, label_dataset, pooled_summary
from .nlls import Bounds, FitConfig, fit_patient
from .phantom import default_suite
from .pipeline import EvalReport, Split, benchmark, make_splits, predict_maps, run_crossval, sample_set


class ConfigError(ValueError):
    pass


def _fields(cls, skip=()) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        if f.default is not dataclasses.MISSING:
            v = f.default
        else:
            v = f.default_factory()
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def default_config() -> dict:
    """Nested defaults. ``null`` seeds inherit the top-level ``seed``."""
    bounds = _fields(Bounds)
    return {
        "seed": 0,
        "workers": 1,
        "out_dir": "run",
        "suite": {"n_patients": 9, "n_diseased": 4, "size": 63,
                  "defect_radius": [6, 12], "noise_sigma": 0.002, "shared_aif": False},
        "prior": {**{k: list(v) for k, v in bounds.items()},
                  "log_sigma": [math.log(1e-4), math.log(1.0)]},
        "mcmc": {**_fields(McmcConfig, skip=("seed",)), "seed": None},
        "fit": {k: v for k, v in _fields(FitConfig, skip=("bounds", "init", "seed")).items()},
        "network": {"convs": [list(c) for c in NetworkConfig.convs], "pool": NetworkConfig.pool,
                    "dense": list(NetworkConfig.dense), "seed": None},
        "train": {**_fields(TrainConfig, skip=("seed",)), "seed": None},
        "splits": {"sizes": [5, 2, 2], "n_splits": 10},
        "render": {"lo": 0.0, "hi": 4.0, "style": "colour", "scale": 4},
    }


def _coerce(old, new, name: str):
    """Match ``new`` to the type of the default ``old``.

    YAML 1.1 reads ``5e-4`` as a string, so numeric strings are converted.
    """
    try:
        if isinstance(old, bool):
            if not isinstance(new, bool):
                raise ValueError
            return new
        if isinstance(old, float) and not isinstance(new, bool):
            return float(new)
        if isinstance(old, int) and not isinstance(new, bool):
            if isinstance(new, str):
                new = float(new)
            if isinstance(new, float) and not new.is_integer():
                raise ValueError
            return int(new)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {name!r}: cannot use {new!r} as {type(old).__name__}") from None
    return new


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for key, value in update.items():
        name = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {name!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {name!r} must be a mapping")
            _merge(base[key], value, name + ".")
        else:
            base[key] = _coerce(base[key], value, name)


def _set_dotted(cfg: dict, dotted: str, raw: str) -> None:
    node = cfg
    parts = dotted.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[p]
    if parts[-1] not in node or isinstance(node[parts[-1]], dict):
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = _coerce(node[parts[-1]], yaml.safe_load(raw), dotted)


def load_config(path=None, overrides=()) -> dict:
    cfg = default_config()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        text = p.read_text()
        data = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
        if data is not None:
            if not isinstance(data, dict):
                raise ConfigError(f"{p}: top level must be a mapping")
            _merge(cfg, data)
    for dotted, raw in overrides:
        _set_dotted(cfg, dotted, raw)
    return cfg


class Run:
    """Typed views of a merged config dict, plus the output layout."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.seed = int(cfg["seed"])
        self.workers = int(cfg["workers"])
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        self.out = Path(str(cfg["out_dir"]))
        try:
            self.prior = Prior(Bounds(**{k: tuple(cfg["prior"][k]) for k in ("fp", "ps", "vp", "ve", "delay")}),
                               tuple(cfg["prior"]["log_sigma"]))
            m = dict(cfg["mcmc"])
            m["seed"] = self.seed if m["seed"] is None else m["seed"]
            self.mcmc = McmcConfig(**m)
            self.fit = FitConfig(bounds=self.prior.bounds, seed=self.seed, **cfg["fit"])
            t = dict(cfg["train"])
            t["seed"] = self.seed if t["seed"] is None else t["seed"]
            self.train = TrainConfig(**t)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def network(self, n_times: int) -> NetworkConfig:
        n = dict(self.cfg["network"])
        n["seed"] = self.seed if n["seed"] is None else n["seed"]
        return NetworkConfig(n_times=n_times, **n)

    def dir(self, name: str) -> Path:
        return self.out / name

    def require(self, path: Path) -> Path:
        if not path.exists():
            raise FileNotFoundError(f"missing prerequisite artifact: {path}")
        return path

    def dataset(self):
        return formats.read_dataset(self.require(self.dir("dataset") / formats.MANIFEST).parent)

    def targets(self, ids):
        self.require(self.dir("targets"))
        return formats.read_maps(self.dir("targets"), ids)

    def plan(self, ids):
        s = self.cfg["splits"]
        return make_splits(ids, self.seed, tuple(s["sizes"]), int(s["n_splits"]))


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def cmd_simulate(run: Run, args) -> None:
    s = run.cfg["suite"]
    ds = default_suite(run.seed, n_patients=s["n_patients"], n_diseased=s["n_diseased"],
                       size=s["size"], defect_radius=tuple(s["defect_radius"]),
                       noise_sigma=s["noise_sigma"], shared_aif=s["shared_aif"])
    formats.write_dataset(ds, run.dir("dataset"))
    _log(f"wrote {len(ds.patients)} patients ({ds.voxel_count()} voxels) to {run.dir('dataset')}")


def cmd_label(run: Run, args) -> None:
    ds = run.dataset()
    if args.method == "mcmc":
        res = label_dataset(ds, run.prior, run.mcmc, run.workers, progress=_log)
        maps, pooled = res.maps, res.pooled
    else:
        maps = {p.id: fit_patient(p, run.fit, progress=_log) for p in ds.patients}
        pooled = pooled_summary(maps, {p.id: p.mask for p in ds.patients})
    formats.write_maps(run.dir("targets"), maps)
    (run.dir("targets") / "summary.json").write_text(
        json.dumps({"method": args.method, **pooled}, indent=2) + "\n")
    _log(f"target median {pooled['median']:.3f} ({pooled['p25']:.3f}, {pooled['p75']:.3f})")


def cmd_fit(run: Run, args) -> None:
    ds = run.dataset()
    maps = {p.id: fit_patient(p, run.fit, progress=_log) for p in ds.patients}
    formats.write_maps(run.dir("fits"), maps)


def cmd_train(run: Run, args) -> None:
    ds = run.dataset()
    targets = run.targets(ds.ids)
    plan = run.plan(ds.ids)
    if not 1 <= args.split <= len(plan):
        raise ConfigError(f"--split must be between 1 and {len(plan)}, got {args.split}")
    split = plan.splits[args.split - 1]
    tr = sample_set(ds, split.train, targets)
    va = sample_set(ds, split.val, targets)
    weights, hist = train(tr, va, run.network(ds.patients[0].grid.n), run.train, progress=_log)
    out = run.dir("model")
    out.mkdir(parents=True, exist_ok=True)
    formats.write_weights(out / "weights.txt", weights)
    (out / "history.json").write_text(json.dumps({
        "split": dataclasses.asdict(split), **dataclasses.asdict(hist)}, indent=2) + "\n")
    _log(f"best epoch {hist.best_epoch}, stopped at {hist.stopped_epoch}")


def _model_split(run: Run) -> Split:
    hist = json.loads(run.require(run.dir("model") / "history.json").read_text())
    s = hist["split"]
    return Split(tuple(s["train"]), tuple(s["val"]), tuple(s["test"]))


def cmd_predict(run: Run, args) -> None:
    ds = run.dataset()
    weights = formats.read_weights(run.require(run.dir("model") / "weights.txt"))
    ids = args.patients.split(",") if args.patients else list(_model_split(run).test)
    maps = predict_maps(weights, [ds[pid] for pid in ids])
    formats.write_maps(run.dir("predictions"), maps)
    _log(f"predicted {', '.join(ids)}")


def cmd_crossval(run: Run, args) -> None:
    ds = run.dataset()
    targets = run.targets(ds.ids)
    report = run_crossval(ds, targets, run.plan(ds.ids), run.network(ds.patients[0].grid.n),
                          run.train, progress=_log)
    out = run.dir("crossval")
    out.mkdir(parents=True, exist_ok=True)
    formats.write_report(out / "report.txt", report)
    for i, preds in enumerate(report.predictions, start=1):
        formats.write_maps(out / f"split{i:02d}", preds)
    print(f"MSE mean (std): {report.mse_line()}")
    print(f"mean relative error: {report.mean_rel_error:.4f}")


def cmd_benchmark(run: Run, args) -> None:
    ds = run.dataset()
    weights = formats.read_weights(run.require(run.dir("model") / "weights.txt"))
    patient = ds[args.patient] if args.patient else ds.patients[0]
    voxels = patient.voxels()
    if args.max_voxels:
        voxels = voxels[:args.max_voxels]
    timing = benchmark(patient, weights, run.prior, run.mcmc, run.workers, voxels)
    out = run.dir("benchmark")
    out.mkdir(parents=True, exist_ok=True)
    formats.write_report(out / "timing.txt", EvalReport([], timing))
    print(f"{patient.id}: {timing.n_voxels} voxels, MCMC {timing.mcmc_seconds:.2f} s, "
          f"surrogate {timing.surrogate_seconds:.3f} s, speedup {timing.speedup:.0f}x")


def cmd_render(run: Run, args) -> None:
    r = run.cfg["render"]
    pred_dir = run.require(run.dir("predictions"))
    out = run.dir("render")
    out.mkdir(parents=True, exist_ok=True)
    for path in sorted(pred_dir.glob("*.map")):
        pid, _, pred = formats.read_map(path)
        _, _, target = formats.read_map(run.require(run.dir("targets") / f"{pid}.map"))
        formats.render_map(out / f"{pid}.ppm", target, r["lo"], r["hi"], r["style"],
                           right=pred, scale=int(r["scale"]))
        _log(f"rendered {out / f'{pid}.ppm'} (target | prediction)")


COMMANDS = {
    "simulate": (cmd_simulate, "generate the phantom suite"),
    "label": (cmd_label, "posterior-median (or NLLS) MBF targets"),
    "fit": (cmd_fit, "NLLS MBF maps"),
    "train": (cmd_train, "train the surrogate on one split"),
    "predict": (cmd_predict, "surrogate MBF maps"),
    "crossval": (cmd_crossval, "cross-validated evaluation report"),
    "benchmark": (cmd_benchmark, "MCMC vs surrogate timing on one slice"),
    "render": (cmd_render, "side-by-side target | prediction PPM images"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mbfsurrogate", description=__doc__.split("\n\n")[0],
                                     allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, allow_abbrev=False)
        p.add_argument("--config", help="YAML or JSON run configuration")
        p.add_argument("--seed", type=int, help="master seed for every stage")
        p.add_argument("--workers", type=int, help="process count for voxel-parallel stages")
        p.add_argument("--out-dir", help="output directory (default: run)")
        if name == "label":
            p.add_argument("--method", choices=("mcmc", "nlls"), default="mcmc")
        if name == "train":
            p.add_argument("--split", type=int, default=1, help="1-based split index in the plan")
        if name == "predict":
            p.add_argument("--patients", help="comma-separated ids (default: the model's test split)")
        if name == "benchmark":
            p.add_argument("--patient", help="patient id (default: first)")
            p.add_argument("--max-voxels", type=int, help="time only the first N masked voxels")
    return parser


def _split_overrides(extra: list[str]) -> list[tuple[str, str]]:
    out = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"missing value for {tok}")
            i += 1
            value = extra[i]
        out.append((key, value))
        i += 1
    return out


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        # argparse reports usage errors with status 2; here they are validation errors
        return 0 if exc.code == 0 else 1
    try:
        overrides = _split_overrides(extra)
        for flag, key in (("seed", "seed"), ("workers", "workers"), ("out_dir", "out_dir")):
            if getattr(args, flag) is not None:
                overrides.append((key, str(getattr(args, flag))))
        run = Run(load_config(args.config, overrides))
        COMMANDS[args.command][0](run, args)
    except (ConfigError, PreconditionError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
