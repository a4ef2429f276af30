"""Command-line harness: weigh, evaluate and run seeded experiments.

Exit codes: 0 success, 2 configuration error, 3 every seed failed. With
``--fail-on-pareto-warning`` the bit 0x10 is added when any PSIS fit
reports a tail shape above the threshold.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import metrics, pipeline, postprocess, privacy, synthgen
from .core import (
    PRIVATIZED,
    Provenance,
    Dataset,
    PrivacySpend,
    RngStream,
    Source,
    WeightVector,
    compose_spends,
    minmax_scale,
    read_dataset_csv,
    train_test_split,
)
from .ratio import DpSgdConfig, fit_logistic_l2

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ALL_FAILED = 3
EXIT_PARETO_BIT = 0x10

METRICS = ("wasserstein", "mmd", "auc")
PRESET_BOUNDS = {"gmm-grid": (-2.5, 2.5), "bayes-logistic": (-10.0, 10.0)}


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    preset: Optional[str] = "gmm-grid"
    dgp: Optional[dict] = None
    sdgp: Optional[dict] = None
    real_csv: Optional[str] = None
    synth_csv: Optional[str] = None
    label_column: Optional[str] = None
    n_real: int = 2000
    n_synth: int = 2000
    bounds: Optional[list] = None
    schemes: tuple = ("none", "true", "output_lapl")
    epsilon: float = 6.0
    delta: float = 1e-5
    budget_split: dict = field(default_factory=lambda: {"sdgp": 0.5, "weights": 0.5})
    lam: float = 0.1
    finite_variance: bool = True
    dpsgd: dict = field(default_factory=dict)
    temper: Optional[float] = None
    psis: bool = False
    calibrate: bool = False
    calibration_fraction: float = 0.2
    metrics: tuple = ("wasserstein", "mmd")
    mmd_bandwidth: float = 1.0
    auc_lam: float = 1e-3
    seeds: tuple = (0, 1, 2, 3, 4)
    train_fraction: float = 0.8
    discriminator_probs: Optional[str] = None
    workers: int = 1

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        obj = dict(obj)
        for key in ("schemes", "metrics", "seeds"):
            if key in obj:
                obj[key] = tuple(obj[key])
        cfg = cls(**obj)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("schemes", "metrics", "seeds"):
            out[key] = list(out[key])
        return out

    def validate(self) -> None:
        if self.preset is None and (self.dgp is None or self.sdgp is None) and (
                self.real_csv is None or self.synth_csv is None):
            raise ConfigError("give a preset, dgp and sdgp specs, or real_csv and synth_csv")
        if self.preset is not None:
            try:
                synthgen.preset(self.preset)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        for s in self.schemes:
            if s not in pipeline.SCHEMES:
                raise ConfigError(f"unknown scheme {s!r}; choose from {', '.join(pipeline.SCHEMES)}")
        for m in self.metrics:
            if m not in METRICS:
                raise ConfigError(f"unknown metric {m!r}; choose from {', '.join(METRICS)}")
        split = self.budget_split
        if set(split) != {"sdgp", "weights"} or any(v < 0 for v in split.values()) or \
                not math.isclose(sum(split.values()), 1.0, abs_tol=1e-9):
            raise ConfigError("budget_split needs nonnegative 'sdgp' and 'weights' shares summing to 1")
        if any(s in pipeline.PRIVATE_SCHEMES for s in self.schemes):
            if not self.epsilon > 0 or not split["weights"] > 0:
                raise ConfigError("private schemes need epsilon > 0 and a positive weights share")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.temper is not None and not 0 <= self.temper <= 1:
            raise ConfigError("temper must lie in [0, 1]")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if "discriminator" in self.schemes and self.discriminator_probs is None:
            raise ConfigError("scheme 'discriminator' needs discriminator_probs")
        for path in (self.real_csv, self.synth_csv, self.discriminator_probs):
            if path is not None and not Path(path).exists():
                raise ConfigError(f"file not found: {path}")
        if self.bounds is None and self.preset is None:
            raise ConfigError("public feature bounds are required unless a preset is used")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        try:
            DpSgdConfig(**self.dpsgd)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid dpsgd settings: {exc}") from None

    @property
    def weights_epsilon(self) -> float:
        return self.epsilon * self.budget_split["weights"]

    def weigh_settings(self) -> pipeline.WeighSettings:
        return pipeline.WeighSettings(
            epsilon=self.weights_epsilon, delta=self.delta, lam=self.lam,
            finite_variance=self.finite_variance, dpsgd=DpSgdConfig(**self.dpsgd),
            discriminator_path=self.discriminator_probs)


# --------------------------------------------------------------------------
# Experiment runner
# --------------------------------------------------------------------------

def _specs(cfg: ExperimentConfig):
    if cfg.preset is not None:
        return synthgen.preset(cfg.preset)
    if cfg.dgp is not None and cfg.sdgp is not None:
        return synthgen.spec_from_dict(cfg.dgp), synthgen.spec_from_dict(cfg.sdgp)
    return None, None


def _bounds(cfg: ExperimentConfig, d: int) -> np.ndarray:
    if cfg.bounds is not None:
        b = np.asarray(cfg.bounds, float)
    else:
        key = cfg.preset.split("(")[0].strip()
        b = np.asarray(PRESET_BOUNDS[key], float)
    return np.tile(b, (d, 1)) if b.shape == (2,) else b


def _load_data(cfg: ExperimentConfig, seed_stream: RngStream):
    dgp, sdgp = _specs(cfg)
    if cfg.real_csv is not None:
        real = read_dataset_csv(cfg.real_csv, cfg.label_column, Source.PRIVATE)
        synth = read_dataset_csv(cfg.synth_csv, cfg.label_column, Source.SYNTHETIC)
        return real, synth, dgp, sdgp
    real = synthgen.sample(dgp, cfg.n_real, seed_stream.child(0), Source.PRIVATE)
    synth = synthgen.sample(sdgp, cfg.n_synth, seed_stream.child(1))
    return real, synth, dgp, sdgp


def _feature_view(data: Dataset) -> Dataset:
    """Unlabelled copy for ratio fitting and two-sample metrics."""
    return replace(data, labels=None)


def _metric_values(cfg, synth_pts: Dataset, w: WeightVector, real_test: Dataset,
                   stream: RngStream) -> dict:
    out = {}
    if "wasserstein" in cfg.metrics:
        out["wasserstein"] = metrics.weighted_wasserstein(synth_pts, w, real_test).to_dict()
    if "mmd" in cfg.metrics:
        out["mmd"] = metrics.weighted_mmd2(synth_pts, w, real_test, cfg.mmd_bandwidth,
                                           rng=stream.child(0)).to_dict()
    if "auc" in cfg.metrics:
        if synth_pts.labels is None or real_test.labels is None:
            raise ValueError("metric 'auc' needs labelled data")
        out["auc"] = metrics.downstream_auc(synth_pts, w, real_test, cfg.auc_lam).to_dict()
    return out


def _calibration(cfg, real_cal: Dataset, synth_cal: Dataset, real_fit: Dataset,
                 synth_fit: Dataset):
    """Beta-calibration map for the logistic ratio model on a training holdout."""
    model = fit_logistic_l2(real_fit, synth_fit, cfg.lam)
    x = np.vstack([real_cal.features, synth_cal.features])
    y = np.concatenate([np.ones(real_cal.n), np.zeros(synth_cal.n)])
    probs = np.clip(model.predict_proba(x), 1e-12, 1 - 1e-12)
    return postprocess.beta_calibrate(probs, y)


def run_seed(cfg: ExperimentConfig, seed: int) -> dict:
    """One seed of the pipeline: load, scale, split, weigh, post-process, evaluate.

    The real data is split into training and test parts. The ratio model is
    fitted on the real training part and the whole synthetic sample, whose
    weighted law is then compared with the real test part.
    """
    base = RngStream(int(seed))
    real, synth, dgp, sdgp = _load_data(cfg, base)
    bounds = _bounds(cfg, real.d)
    real_s, synth_s = minmax_scale(real, bounds), minmax_scale(synth, bounds)
    real_tr, real_te = train_test_split(real_s, cfg.train_fraction, base.child(2))
    calib = None
    fit_real, fit_synth = _feature_view(real_tr), _feature_view(synth_s)
    if cfg.calibrate:
        r_fit, r_cal = train_test_split(fit_real, 1 - cfg.calibration_fraction, base.child(4))
        s_fit, s_cal = train_test_split(fit_synth, 1 - cfg.calibration_fraction, base.child(5))
        calib = _calibration(cfg, r_cal, s_cal, r_fit, s_fit)
        fit_real, fit_synth = r_fit, s_fit
    settings = cfg.weigh_settings()
    true_fn = None
    if dgp is not None:
        true_fn = lambda pts: synthgen.true_log_weight(dgp, sdgp, pts)

    result = {"seed": int(seed), "n_real": real.n, "n_synth": synth.n,
              "clamped": {"real": real_s.clamp_count, "synth": synth_s.clamp_count},
              "schemes": {}, "ledger": [], "warnings": [], "pareto_warning": False}
    for k, scheme in enumerate(cfg.schemes):
        stream = base.child(100 + k)
        res = pipeline.weigh(scheme, fit_real, fit_synth, _feature_view(synth_s), settings,
                             stream.child(0), true_weights=true_fn, raw_points=synth)
        w = res.weights
        pts = synth_s if res.subset is None else synth_s.take(res.subset)
        entry = {"provenance_history": list(w.history), "n_weighted": w.n, **res.info}
        if calib is not None:
            if scheme in ("logreg", "beta_noised", "output_lapl", "output_norm", "mlp", "priv_mlp"):
                w = postprocess.calibrate_weights(w, calib, fit_real.n, fit_synth.n)
                entry["calibration"] = calib.to_dict()
            else:
                result["warnings"].append(f"calibration skipped for scheme {scheme!r}")
        if cfg.temper is not None:
            w = postprocess.temper(w, cfg.temper)
        if cfg.psis:
            if w.n >= 25:
                ps = postprocess.psis_smooth(w)
                w = ps.smoothed
                entry["psis"] = ps.to_dict()
                if ps.warning:
                    result["pareto_warning"] = True
                    result["warnings"].append(
                        f"scheme {scheme!r}: Pareto k_hat {ps.k_hat:.3f} above threshold")
            else:
                result["warnings"].append(f"PSIS skipped for scheme {scheme!r}: fewer than 25 weights")
        entry["provenance_history"] = list(w.history)
        entry["metrics"] = _metric_values(cfg, pts, w, real_te, stream.child(1))
        if res.subset is not None:
            uniform = WeightVector.uniform(pts.n)
            entry["metrics_uniform_same_subset"] = _metric_values(cfg, pts, uniform, real_te,
                                                                  stream.child(1))
        for sp in res.spends:
            result["ledger"].append({"seed": int(seed), "scheme": scheme, **sp.to_dict()})
        result["schemes"][scheme] = entry
    return result


def _run_seed_safe(args):
    cfg, seed = args
    try:
        return run_seed(cfg, seed)
    except Exception as exc:  # a failing seed is recorded, the run continues
        return {"seed": int(seed), "error": f"{type(exc).__name__}: {exc}"}


def _aggregate(per_seed: list, schemes, metric_names) -> dict:
    agg = {}
    ok = [r for r in per_seed if "error" not in r]
    for scheme in schemes:
        agg[scheme] = {}
        for m in metric_names:
            vals = np.array([r["schemes"][scheme]["metrics"][m]["value"] for r in ok
                             if scheme in r["schemes"]])
            if vals.size == 0:
                continue
            mean = float(vals.mean())
            half = float(1.96 * vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
            agg[scheme][m] = {"mean": mean, "ci95": [mean - half, mean + half], "n_seeds": int(vals.size)}
    return agg


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run every seed and assemble the report.

    The privacy ledger lists each mechanism invocation; the external SDGP
    share is added as a line item when a private scheme is used.
    """
    cfg.validate()
    jobs = [(cfg, s) for s in cfg.seeds]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            per_seed = list(pool.map(_run_seed_safe, jobs))
    else:
        per_seed = [_run_seed_safe(j) for j in jobs]
    entries = []
    if any(s in pipeline.PRIVATE_SCHEMES for s in cfg.schemes) and cfg.budget_split["sdgp"] > 0:
        entries.append({"seed": None, "scheme": None,
                        **PrivacySpend(cfg.epsilon * cfg.budget_split["sdgp"], 0.0,
                                       "SDGP training (external)").to_dict()})
    warnings = []
    for r in per_seed:
        entries.extend(r.get("ledger", []))
        warnings.extend(f"seed {r['seed']}: {m}" for m in r.get("warnings", []))
        if "error" in r:
            warnings.append(f"seed {r['seed']} failed: {r['error']}")
    spends = [PrivacySpend(e["epsilon"], e["delta"], e["mechanism"]) for e in entries]
    total = compose_spends(spends)
    per_scheme = {}
    for e in entries:
        key = e["scheme"] or "external"
        per_scheme[key] = per_scheme.get(key, 0.0) + e["epsilon"]
    for s in cfg.schemes:
        per_scheme.setdefault(s, 0.0)
    return {
        "config": cfg.to_dict(),
        "per_seed": per_seed,
        "aggregate": _aggregate(per_seed, cfg.schemes, cfg.metrics),
        "privacy_ledger": {"entries": entries, "epsilon_by_scheme": per_scheme,
                           "total": total.to_dict()},
        "warnings": warnings,
        "failed_seeds": [r["seed"] for r in per_seed if "error" in r],
        "pareto_warning": any(r.get("pareto_warning", False) for r in per_seed),
    }


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2, default=_json_default)


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def report_csv_rows(report: dict) -> list:
    """Flat table with one row per scheme and seed plus aggregate rows."""
    names = {"wasserstein": "WST", "mmd": "MMD", "auc": "AUC"}
    cols = [names[m] for m in report["config"]["metrics"]]
    rows = [["scheme", "seed"] + cols]
    for r in report["per_seed"]:
        if "error" in r:
            continue
        for scheme, entry in r["schemes"].items():
            rows.append([scheme, r["seed"]] + [repr(entry["metrics"][m]["value"])
                                               for m in report["config"]["metrics"]])
    for scheme, ms in report["aggregate"].items():
        rows.append([scheme, "mean"] + [repr(ms[m]["mean"]) if m in ms else ""
                                        for m in report["config"]["metrics"]])
    return rows


def _write_outputs(report: dict, out: Optional[str], csv_path: Optional[str]) -> None:
    text = report_json(report)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        sys.stdout.write(text + "\n")
    if csv_path:
        import csv
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerows(report_csv_rows(report))


def _exit_code(report: dict, fail_on_pareto: bool) -> int:
    code = EXIT_ALL_FAILED if len(report["failed_seeds"]) == len(report["per_seed"]) else EXIT_OK
    if fail_on_pareto and report["pareto_warning"]:
        code |= EXIT_PARETO_BIT
    return code


# --------------------------------------------------------------------------
# Release
# --------------------------------------------------------------------------

def cmd_release(weights: WeightVector, out_path, unsafe_release: bool = False) -> Path:
    """Write a weight-release file, enforcing the release policy."""
    return privacy.write_release_csv(weights, out_path, unsafe_release=unsafe_release)


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------

def _parse_seeds(text: str) -> tuple:
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers: {text!r}") from None


def _load_config(path: Optional[str], overrides: dict) -> ExperimentConfig:
    obj = {}
    if path:
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    obj.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(obj)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--seed", type=_parse_seeds, help="comma-separated seeds")
    p.add_argument("--epsilon", type=float, help="total privacy budget")
    p.add_argument("--delta", type=float, help="target delta")
    p.add_argument("--out", help="output path (default: stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpiw", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("weigh", help="fit, privatize and release weights")
    _add_common(p)
    p.add_argument("--scheme", default="output_lapl", choices=pipeline.SCHEMES)
    p.add_argument("--unsafe-release", action="store_true",
                   help="allow releasing weights without a privacy guarantee")
    p.add_argument("--fail-on-pareto-warning", action="store_true")

    p = sub.add_parser("evaluate", help="metrics for given data and weights")
    p.add_argument("--real", required=True, help="real-data CSV")
    p.add_argument("--synth", required=True, help="synthetic-data CSV")
    p.add_argument("--weights", help="weight-release CSV (uniform weights if omitted)")
    p.add_argument("--bounds", required=True, type=float, nargs=2, metavar=("MIN", "MAX"))
    p.add_argument("--label-column")
    p.add_argument("--metrics", default="wasserstein,mmd")
    p.add_argument("--seed", type=_parse_seeds, default=(0,))
    p.add_argument("--out")

    p = sub.add_parser("bayes", help="weighted Bayesian logistic experiment")
    _add_common(p)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--scheme", default="none,true", help="comma-separated schemes")
    p.add_argument("--draws", type=int, default=5000)
    p.add_argument("--csv", help="per-seed table")

    for name, helptext in (("demo-gmm", "GMM-grid versus uniform-mixture experiment"),
                           ("run", "run an experiment from a config file")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        p.add_argument("--scheme", help="comma-separated schemes")
        p.add_argument("--csv", help="flat metric table")
        p.add_argument("--workers", type=int)
        p.add_argument("--fail-on-pareto-warning", action="store_true")

    p = sub.add_parser("accountant", help="privacy ledger arithmetic")
    p.add_argument("--spend", action="append", default=[], metavar="EPS[,DELTA]",
                   help="add a spend line (repeatable)")
    p.add_argument("--lot-size", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--noise-multiplier", type=float)
    p.add_argument("--n-private", type=int)
    p.add_argument("--n-synth", type=int)
    p.add_argument("--delta", type=float, default=1e-5)
    p.add_argument("--out")
    return parser


def _cmd_weigh(args) -> int:
    overrides = {"seeds": args.seed, "epsilon": args.epsilon, "delta": args.delta,
                 "schemes": (args.scheme,)}
    cfg = _load_config(args.config, overrides)
    seed = cfg.seeds[0]
    base = RngStream(int(seed))
    real, synth, dgp, sdgp = _load_data(cfg, base)
    bounds = _bounds(cfg, real.d)
    real_s, synth_s = minmax_scale(_feature_view(real), bounds), minmax_scale(_feature_view(synth), bounds)
    true_fn = (lambda pts: synthgen.true_log_weight(dgp, sdgp, pts)) if dgp is not None else None
    res = pipeline.weigh(args.scheme, real_s, synth_s, synth_s, cfg.weigh_settings(),
                         base.child(100), true_weights=true_fn, raw_points=synth)
    w = res.weights
    pareto = False
    if cfg.psis and w.n >= 25:
        ps = postprocess.psis_smooth(w)
        w, pareto = ps.smoothed, ps.warning
    out = args.out or "weights_release.csv"
    try:
        cmd_release(w, out, args.unsafe_release)
    except PermissionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    summary = {"release": out, "scheme": args.scheme, "n": w.n,
               "subset": None if res.subset is None else res.subset.tolist(),
               "spend": w.spend.to_dict() if w.spend else None, **res.info}
    print(json.dumps(summary, sort_keys=True, default=_json_default))
    return EXIT_PARETO_BIT if (pareto and args.fail_on_pareto_warning) else EXIT_OK


def _read_release(path) -> WeightVector:
    import csv
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "log_weight" not in rows[0]:
        raise ConfigError(f"{path}: expected a weight-release CSV with column 'log_weight'")
    lw = np.array([float(r["log_weight"]) for r in rows])
    eps, delta = float(rows[0]["epsilon"]), float(rows[0]["delta"])
    prov = Provenance(rows[0]["provenance"])
    if prov is Provenance.UNIFORM:
        return WeightVector.uniform(len(lw))
    spend = PrivacySpend(eps, delta, "imported release") if math.isfinite(eps) else None
    if spend is None and prov in PRIVATIZED:
        prov = Provenance.ESTIMATED  # an unsafe release carries no guarantee
    return WeightVector(lw, prov, spend, info={"origin": "release file"})


def _cmd_evaluate(args) -> int:
    real = read_dataset_csv(args.real, args.label_column, Source.PRIVATE)
    synth = read_dataset_csv(args.synth, args.label_column, Source.SYNTHETIC)
    bounds = np.tile(np.asarray(args.bounds, float), (real.d, 1))
    real_s, synth_s = minmax_scale(real, bounds), minmax_scale(synth, bounds)
    w = _read_release(args.weights) if args.weights else WeightVector.uniform(synth.n)
    if w.n != synth.n:
        raise ConfigError(f"{w.n} weights for {synth.n} synthetic rows")
    names = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    for m in names:
        if m not in METRICS:
            raise ConfigError(f"unknown metric {m!r}")
    cfg = ExperimentConfig(preset=None, real_csv=args.real, synth_csv=args.synth,
                           bounds=list(args.bounds), metrics=names, schemes=("none",))
    vals = _metric_values(cfg, synth_s, w, real_s, RngStream(args.seed[0]))
    text = json.dumps({"metrics": vals, "provenance": w.provenance.value}, sort_keys=True,
                      indent=2, default=_json_default)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return EXIT_OK


def _cmd_bayes(args) -> int:
    from .bayes import McmcConfig, bayes_logistic_experiment

    seeds = args.seed or tuple(range(5))
    schemes = tuple(s.strip() for s in args.scheme.split(",") if s.strip())
    for s in schemes:
        if s not in pipeline.SCHEMES:
            raise ConfigError(f"unknown scheme {s!r}")
    settings = pipeline.WeighSettings(epsilon=args.epsilon or 3.0, delta=args.delta or 1e-5)
    rows = bayes_logistic_experiment(args.gamma, args.n, seeds, schemes,
                                     McmcConfig(draws=args.draws), settings)
    report = {"gamma": args.gamma, "n": args.n, "seeds": list(seeds), "rows": rows}
    text = json.dumps(report, sort_keys=True, indent=2, default=_json_default)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    if args.csv:
        import csv
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["seed", "scheme", "mse", "mahalanobis", "n_used", "converged"])
            for r in rows:
                wr.writerow([r["seed"], r["scheme"], repr(r["mse"]), repr(r["mahalanobis"]),
                             r["n_used"], r["converged"]])
    return EXIT_OK


def _cmd_experiment(args, demo: bool) -> int:
    overrides = {"seeds": args.seed, "epsilon": args.epsilon, "delta": args.delta,
                 "workers": args.workers}
    if args.scheme:
        overrides["schemes"] = tuple(s.strip() for s in args.scheme.split(",") if s.strip())
    if demo:
        overrides.setdefault("preset", "gmm-grid")
        if not args.config:
            overrides["preset"] = "gmm-grid"
    elif not args.config:
        raise ConfigError("'run' needs --config")
    cfg = _load_config(args.config, overrides)
    report = run_experiment(cfg)
    _write_outputs(report, args.out, args.csv)
    return _exit_code(report, args.fail_on_pareto_warning)


def _cmd_accountant(args) -> int:
    out = {}
    if args.spend:
        spends = []
        for item in args.spend:
            parts = item.split(",")
            try:
                eps = float(parts[0])
                delta = float(parts[1]) if len(parts) > 1 else 0.0
            except ValueError:
                raise ConfigError(f"bad spend {item!r}; expected EPS[,DELTA]") from None
            spends.append(PrivacySpend(eps, delta, "line item"))
        out["composed"] = compose_spends(spends).to_dict()
    dp_args = (args.lot_size, args.steps, args.noise_multiplier, args.n_private, args.n_synth)
    if any(a is not None for a in dp_args):
        if any(a is None for a in dp_args):
            raise ConfigError("DP-SGD accounting needs --lot-size, --steps, --noise-multiplier, "
                              "--n-private and --n-synth")
        cfg = DpSgdConfig(lot_size=args.lot_size, steps=args.steps,
                          noise_multiplier=args.noise_multiplier, delta=args.delta)
        out["dp_sgd"] = privacy.dp_sgd_accounting(cfg, args.n_private, args.n_synth).to_dict()
    if not out:
        raise ConfigError("nothing to account: give --spend or DP-SGD settings")
    text = json.dumps(out, sort_keys=True, indent=2, default=_json_default)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "weigh":
            return _cmd_weigh(args)
        if args.command == "evaluate":
            return _cmd_evaluate(args)
        if args.command == "bayes":
            return _cmd_bayes(args)
        if args.command in ("demo-gmm", "run"):
            return _cmd_experiment(args, demo=args.command == "demo-gmm")
        return _cmd_accountant(args)
    except (ConfigError, privacy.InfeasibleReleaseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
