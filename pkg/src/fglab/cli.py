"""Experiment runner: ``fglab run``, ``fglab plot``.

A run is described by a flat TOML file (or one of the bundled presets) plus
command-line overrides. Every run directory gets::

    config.resolved.json   every effective parameter
    metrics.csv            one row per round
    summary.json           max / median / final accuracy, discrepancy stats
    timing.json            wall time (kept apart so the rest is reproducible)
    grouping_audit.json    grouped frameworks only
    pairs.csv              pairwise EDC / MADC of the pre-trained clients
    bound_report.json      with --verify-bounds
    error.json             only when the run failed
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import bounds, clustering, datagen, flcore, models
from .fedgroup import GroupingConfig, run_fedgroup, run_reassigning
from .numkit import rng_stream

FRAMEWORKS = ("fedavg", "fedprox", "fedgroup", "fedgrouprox", "fesem", "ifca")
GROUPED = ("fedgroup", "fedgrouprox", "fesem", "ifca")
PROX = ("fedprox", "fedgrouprox")
PRESETS = ("motivation-digits", "synthetic-bench", "bound-verify", "edc-vs-madc")
REQUIRED = ("framework", "dataset")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    framework: str
    dataset: str                      # synthetic | digits | idx:<images>,<labels>
    T: int = 100
    K: int = 20
    E: int = 20
    B: int = 10
    eta: float | None = None          # 0.03 on images, 0.01 on synthetic
    mu: float | None = None           # 1.0 for the proximal frameworks, else 0
    m: int | None = None              # 3 on images, 5 on synthetic
    alpha: int = 20
    eta_g: float = 0.0
    measure: str = "edc"
    ablation: str = "none"
    classes_per_client: int = 2
    n_clients: int = 100
    seed: int = 0
    output_dir: str = "fglab-out"
    model: str = "mclr"
    hidden_units: int = 0
    synthetic_alpha: float = 1.0
    synthetic_beta: float = 1.0
    digits_per_class: int = 1000
    pool_fraction: float = 1.0
    populations: int = 0              # > 1: relabel clients into planted populations
    verify_bounds: bool = False
    bound_rounds: int = 10

    def resolved(self) -> "ExperimentConfig":
        """Fill the data-dependent defaults."""
        syn = self.dataset == "synthetic"
        eta = self.eta if self.eta is not None else (0.01 if syn else 0.03)
        mu = self.mu if self.mu is not None else (1.0 if self.framework in PROX else 0.0)
        m = self.m if self.m is not None else (5 if syn else 3)
        hidden = self.hidden_units or (100 if self.model == "mlp" else 0)
        return dataclasses.replace(self, eta=eta, mu=mu, m=m, hidden_units=hidden)

    def validate(self) -> "ExperimentConfig":
        c = self
        if c.framework not in FRAMEWORKS:
            raise ConfigError(f"unknown framework {c.framework!r}; expected one of {FRAMEWORKS}")
        if c.dataset not in ("synthetic", "digits") and not c.dataset.startswith("idx:"):
            raise ConfigError(f"unknown dataset {c.dataset!r}")
        if c.measure not in ("edc", "madc"):
            raise ConfigError("measure must be edc or madc")
        if c.ablation not in ("none", "rcc", "rac"):
            raise ConfigError("ablation must be none, rcc or rac")
        if c.model not in ("mclr", "mlp"):
            raise ConfigError("model must be mclr or mlp")
        for key in ("T", "K", "E", "B", "alpha", "n_clients", "classes_per_client",
                    "digits_per_class", "bound_rounds"):
            if getattr(c, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if c.K > c.n_clients:
            raise ConfigError("K cannot exceed n_clients")
        if c.eta is not None and not c.eta > 0:
            raise ConfigError("eta must be positive")
        if c.mu is not None and c.mu < 0:
            raise ConfigError("mu must be >= 0")
        if c.mu and c.framework not in PROX:
            raise ConfigError(f"mu > 0 needs a proximal framework, not {c.framework}")
        if c.m is not None and c.m < 1:
            raise ConfigError("m must be >= 1")
        if c.eta_g < 0:
            raise ConfigError("eta_g must be >= 0")
        if not 0 < c.pool_fraction <= 1:
            raise ConfigError("pool_fraction must be in (0, 1]")
        if c.populations < 0:
            raise ConfigError("populations must be >= 0")
        if c.framework in ("fedgroup", "fedgrouprox") and c.m is not None \
                and c.m * c.alpha > c.n_clients:
            raise ConfigError("alpha * m pre-training clients exceed n_clients")
        return c


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(key: str, value):
    f = _FIELDS[key]
    kind = str(f.type)
    try:
        if kind.startswith("int"):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if kind.startswith("float"):
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        if kind == "bool":
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes"):
                    return True
                if value.lower() in ("0", "false", "no"):
                    return False
                raise ValueError
            return bool(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key}: {value!r}") from None


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; bundled presets: {PRESETS}")
    return resources.files("fglab").joinpath("presets", f"{name}.toml").read_text("utf-8")


def load_config_file(path) -> dict:
    """A TOML file, or a bundled preset given by name."""
    p = Path(path)
    if p.exists():
        text = p.read_text("utf-8")
    elif str(path) in PRESETS:
        text = preset_text(str(path))
    else:
        raise ConfigError(f"config {path} not found and not a preset name")
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    nested = [k for k, v in raw.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"config must be flat; found tables {nested}")
    return raw


def parse_config(source=None, **overrides) -> ExperimentConfig:
    """Build a validated config from a file/preset and keyword overrides.

    ``source`` may also be a mapping. Overrides set to ``None`` are ignored.
    """
    if source is None:
        raw = {}
    elif isinstance(source, dict):
        raw = dict(source)
    else:
        raw = load_config_file(source)
    raw.update({k: v for k, v in overrides.items() if v is not None})
    unknown = sorted(set(raw) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    missing = [k for k in REQUIRED if k not in raw]
    if missing:
        raise ConfigError(f"missing required keys: {missing}")
    cfg = ExperimentConfig(**{k: _coerce(k, v) for k, v in raw.items()})
    return cfg.validate().resolved().validate()


def build_dataset(cfg: ExperimentConfig) -> datagen.FederatedDataset:
    if cfg.dataset == "synthetic":
        ds = datagen.generate_synthetic(cfg.synthetic_alpha, cfg.synthetic_beta, cfg.n_clients,
                                        rng_stream(cfg.seed, "synthetic"))
    else:
        if cfg.dataset == "digits":
            X, y = datagen.make_digits(cfg.digits_per_class, rng_stream(cfg.seed, "digits"))
        else:
            paths = cfg.dataset[len("idx:"):].split(",")
            if len(paths) != 2:
                raise ConfigError("idx dataset needs idx:<images>,<labels>")
            X, y = datagen.load_idx(*paths)
        ds = datagen.partition_noniid(X, y, cfg.n_clients, cfg.classes_per_client,
                                      rng_stream(cfg.seed, "part"),
                                      pool_fraction=cfg.pool_fraction)
    if cfg.populations > 1:
        ds, _ = datagen.plant_populations(ds, cfg.populations, rng_stream(cfg.seed, "pop"))
    return ds


def model_spec(cfg: ExperimentConfig, ds) -> models.ModelSpec:
    kind = models.MCLR if cfg.model == "mclr" else models.MLP
    return models.ModelSpec(kind, ds.input_dim, ds.num_classes, cfg.hidden_units)


def summarize(rows, framework: str) -> dict:
    acc = np.array([r.weighted_accuracy for r in rows])
    disc = np.array([r.discrepancy for r in rows])
    return {
        "framework": framework,
        "rounds": len(rows),
        "max_weighted_accuracy": float(acc.max()),
        "median_weighted_accuracy": float(np.median(acc)),
        "final_weighted_accuracy": float(acc[-1]),
        "final_train_loss": float(rows[-1].mean_train_loss),
        "discrepancy_mean": float(disc.mean()),
        "discrepancy_variance": float(disc.var()),
    }


def pair_table(updates, client_ids, m: int) -> list[dict]:
    """Pairwise EDC and MADC over pre-trained updates, ``i < j``."""
    _, E = clustering.edc(updates, m)
    P = clustering.madc_matrix(clustering.similarity_matrix(updates))
    n = len(client_ids)
    return [dict(i=int(client_ids[a]), j=int(client_ids[b]), edc=float(E[a, b]),
                 madc=float(P[a, b]))
            for a in range(n) for b in range(a + 1, n)]


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64) - np.mean(x)
    y = np.asarray(y, dtype=np.float64) - np.mean(y)
    return float(x @ y / np.sqrt((x @ x) * (y @ y)))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        wr.writerows(rows)


def execute(cfg: ExperimentConfig, workers=None) -> dict:
    """Run the experiment and write every artifact. Returns the summary."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.resolved.json", dataclasses.asdict(cfg))
    t0 = time.perf_counter()
    ds = build_dataset(cfg)
    spec = model_spec(cfg, ds)
    w0 = models.init_params(spec, rng_stream(cfg.seed, "init"))
    train = flcore.TrainParams(cfg.E, cfg.B, cfg.eta, cfg.mu)
    result = None
    if cfg.framework in ("fedavg", "fedprox"):
        rows = flcore.run_fedavg(spec, ds, w0, train, cfg.T, cfg.K, cfg.seed, workers)
    elif cfg.framework in ("fedgroup", "fedgrouprox"):
        ablation = {"none": "none", "rcc": "RCC", "rac": "RAC"}[cfg.ablation]
        grouping = GroupingConfig(m=cfg.m, alpha=cfg.alpha, measure=cfg.measure.upper(),
                                  eta_g=cfg.eta_g, ablation=ablation)
        result = run_fedgroup(spec, ds, w0, train, grouping, cfg.T, cfg.K, cfg.seed, workers)
        rows = result.metrics
    else:
        result = run_reassigning(cfg.framework, spec, ds, w0, train, cfg.m, cfg.T, cfg.K,
                                 cfg.seed, workers=workers)
        rows = result.metrics
    (out / "metrics.csv").write_text(flcore.metrics_csv(rows, cfg.framework), encoding="utf-8")
    summary = summarize(rows, cfg.framework)
    if result is not None:
        _write_json(out / "grouping_audit.json", result.audit())
        cs = result.cold_start
        if cs is not None and len(cs.client_ids) >= 3 and cfg.m <= len(cs.client_ids):
            pairs = pair_table(cs.updates, cs.client_ids, cfg.m)
            _write_rows(out / "pairs.csv", ("i", "j", "edc", "madc"),
                        [(p["i"], p["j"], repr(p["edc"]), repr(p["madc"])) for p in pairs])
            summary["edc_madc_pearson"] = pearson([p["edc"] for p in pairs],
                                                  [p["madc"] for p in pairs])
    if cfg.verify_bounds:
        report = bounds.verify_bounds(bounds.BoundConfig(
            E=cfg.E, rounds=cfg.bound_rounds, eta_g=cfg.eta_g, seed=cfg.seed,
            model=models.MCLR if cfg.model == "mclr" else models.MLP,
            mu=cfg.mu if cfg.framework in PROX else 0.0))
        (out / "bound_report.json").write_text(report.to_json() + "\n", encoding="utf-8")
        summary["bound_violations"] = report.violations
    _write_json(out / "summary.json", summary)
    _write_json(out / "timing.json", {"wall_time_s": time.perf_counter() - t0})
    return summary


def run_experiment(cfg: ExperimentConfig, workers=None) -> int:
    """Exit code: 0 on success, 1 on bound violations, 2 on any failure
    (with ``error.json`` written next to the other artifacts)."""
    try:
        summary = execute(cfg, workers)
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "error.json", {"error": type(exc).__name__, "message": str(exc),
                                         "traceback": traceback.format_exc()})
        return 2
    return 1 if summary.get("bound_violations", 0) else 0


def _sweep_one(args):
    cfg, workers = args
    return cfg.output_dir, run_experiment(cfg, workers)


def sweep_configs(base: ExperimentConfig, key: str, values) -> list[ExperimentConfig]:
    if key not in _FIELDS or key in ("output_dir",):
        raise ConfigError(f"cannot sweep over {key!r}")
    out = []
    for v in values:
        raw = {f: getattr(base, f) for f in _FIELDS}
        raw[key] = v
        raw["output_dir"] = str(Path(base.output_dir) / f"{key}={v}")
        out.append(parse_config(raw))
    return out


def run_sweep(configs, processes: int | None = None) -> dict:
    """Independent runs in separate processes; each owns its directory and seed."""
    processes = processes or flcore.worker_count()
    jobs = [(c, 1) for c in configs]
    if processes <= 1:
        return dict(map(_sweep_one, jobs))
    with ProcessPoolExecutor(max_workers=processes) as ex:
        return dict(ex.map(_sweep_one, jobs))


def _read_metrics(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        header = tuple(next(rd, ()))
        if header != flcore.METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        return [dict(zip(header, row)) for row in rd]


def emit_plot_data(input_dir) -> list[Path]:
    """Long-format series from every ``metrics.csv`` under ``input_dir`` and, if
    a ``pairs.csv`` is present, the EDC-vs-MADC scatter with its Pearson r."""
    root = Path(input_dir)
    files = sorted(root.rglob("metrics.csv"))
    if not files:
        raise FileNotFoundError(f"no metrics.csv under {root}")
    written = []
    series = []
    for f in files:
        rel = f.parent.relative_to(root).as_posix()
        for row in _read_metrics(f):
            name = row["framework"] if rel == "." else f"{row['framework']}:{rel}"
            for metric in ("weighted_accuracy", "mean_train_loss", "discrepancy"):
                series.append((row["round"], row[metric], metric, name))
    _write_rows(root / "plot_series.csv", ("x", "y", "metric", "series"), series)
    written.append(root / "plot_series.csv")
    for pf in sorted(root.rglob("pairs.csv")):
        with open(pf, newline="", encoding="utf-8") as fh:
            rd = csv.DictReader(fh)
            if tuple(rd.fieldnames or ()) != ("i", "j", "edc", "madc"):
                raise ValueError(f"{pf}: unexpected pairs header {rd.fieldnames}")
            pairs = list(rd)
        x = [float(p["edc"]) for p in pairs]
        y = [float(p["madc"]) for p in pairs]
        _write_rows(pf.parent / "plot_scatter.csv", ("x", "y", "i", "j"),
                    [(p["edc"], p["madc"], p["i"], p["j"]) for p in pairs])
        _write_json(pf.parent / "plot_scatter.json", {"n_pairs": len(pairs), "pearson_r": pearson(x, y)})
        written += [pf.parent / "plot_scatter.csv", pf.parent / "plot_scatter.json"]
    return written


def _parse_sweep(text: str):
    key, _, vals = text.partition("=")
    if not key or not vals:
        raise ConfigError("--sweep expects key=v1,v2,...")
    return key.strip(), [v.strip() for v in vals.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fglab", description="Federated grouping experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment or a sweep")
    r.add_argument("--config", required=True, help=f"TOML file or preset name {PRESETS}")
    r.add_argument("--seed", type=int)
    r.add_argument("--output-dir")
    r.add_argument("--framework", choices=FRAMEWORKS)
    r.add_argument("--measure", choices=("edc", "madc"))
    r.add_argument("--ablation", choices=("none", "rcc", "rac"))
    r.add_argument("--verify-bounds", action="store_true", default=None)
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key")
    r.add_argument("--sweep", metavar="KEY=V1,V2,...", help="run one config per value")
    pl = sub.add_parser("plot", help="write plot-ready data files for a run directory")
    pl.add_argument("--input", required=True)
    sub.add_parser("presets", help="list bundled presets")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "presets":
            for name in PRESETS:
                print(name)
            return 0
        if args.command == "plot":
            for path in emit_plot_data(args.input):
                print(path)
            return 0
        extra = {}
        for item in args.set:
            key, sep, val = item.partition("=")
            if not sep:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            extra[key.strip()] = val.strip()
        cfg = parse_config(args.config, seed=args.seed, output_dir=args.output_dir,
                           framework=args.framework, measure=args.measure,
                           ablation=args.ablation, verify_bounds=args.verify_bounds, **extra)
    except (ConfigError, OSError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    if args.sweep:
        try:
            key, values = _parse_sweep(args.sweep)
            configs = sweep_configs(cfg, key, values)
        except ConfigError as exc:
            print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
            return 2
        codes = run_sweep(configs)
        for d, code in codes.items():
            print(f"{d}\texit={code}")
        return max(codes.values())
    code = run_experiment(cfg)
    print(f"{cfg.output_dir}\texit={code}")
    return code


if __name__ == "__main__":
    sys.exit(main())
