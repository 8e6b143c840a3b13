"""Batch command-line front-end.

Subcommands: ``probe`` (evidence-vs-width grid and width cap), ``discover``
(the full discovery loop), ``validate`` (re-run the leave-out test for a
stored model), and ``predict`` (physical-unit predictions for a query CSV).
A run is reproducible from its JSON config plus the ``--seed`` flag alone;
all primary outputs are byte-identical across reruns.

Exit codes: 0 success / not-invalid, 2 configuration error, 3 numerical
failure, 4 all models invalid, 5 artifact version mismatch.  Errors are
reported as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from .data import CsvSchema, Dataset, SliceSpec, Standardizer, load_csv, standardize
from .errors import (
    ArtifactVersionError,
    ConfigError,
    NumericalError,
    OpalError,
)
from .evidence import HierarchicalConfig
from .laplace import OptConfig, predict as predict_posterior
from .network import Activation, ActivationKind
from .opal import (
    FitSettings,
    GridConfig,
    IntegrationAxis,
    OpalConfig,
    ProbeConfig,
    ValidationConfig,
    build_initial_set,
    leave_out_validate,
    run_opal,
)
from .serialize import load_model, save_model
from .sparsify import SparsifyConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_ALL_INVALID = 4
EXIT_ARTIFACT = 5


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except ArtifactVersionError as exc:
        _emit_error(exc)
        return EXIT_ARTIFACT
    except (ConfigError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        _emit_error(exc)
        return EXIT_CONFIG
    except (NumericalError, OpalError) as exc:
        _emit_error(exc)
        return EXIT_NUMERIC


def _emit_error(exc: Exception) -> None:
    payload = {"error": {"type": type(exc).__name__, "message": str(exc)}}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="opal-surrogate", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_config=True):
        if with_config:
            p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--out", default="out", help="output directory")

    p = sub.add_parser("probe", help="evidence grid over single-hidden-layer widths")
    common(p)
    p.set_defaults(handler=cmd_probe)

    p = sub.add_parser("discover", help="run the full surrogate discovery loop")
    common(p)
    p.set_defaults(handler=cmd_discover)

    p = sub.add_parser("validate", help="leave-out validation of a stored model")
    common(p)
    p.add_argument("--model", required=True, help="stored model artifact (JSON)")
    p.set_defaults(handler=cmd_validate)

    p = sub.add_parser("predict", help="predictions for a query CSV")
    common(p, with_config=False)
    p.add_argument("--model", required=True, help="stored model artifact (JSON)")
    p.add_argument("--query", required=True, help="query CSV with the model's input columns")
    p.set_defaults(handler=cmd_predict)
    return parser


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------


def _load_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


_SYNTHETIC_CONFIGS = {
    "energy_like": data_mod.EnergyLikeConfig,
    "regression_rate_like": data_mod.RegressionRateConfig,
    "planted_sparse": data_mod.PlantedSparseConfig,
}


def _dataset_from_config(section: dict, seed: int) -> Dataset:
    source = section.get("source")
    if source == "synthetic":
        task = section.get("task")
        if task not in _SYNTHETIC_CONFIGS:
            raise ConfigError(f"unknown or unsupported synthetic task {task!r}")
        cls = _SYNTHETIC_CONFIGS[task]
        raw = dict(section.get("config", {}))
        for key, val in raw.items():
            if isinstance(val, list):
                raw[key] = tuple(val)
        if "scenario" in raw:
            raw["scenario"] = data_mod.Scenario(raw["scenario"])
        try:
            cfg = cls(**raw)
        except TypeError as exc:
            raise ConfigError(f"bad synthetic config for {task}: {exc}") from exc
        return data_mod.generate_synthetic(task, cfg, seed=section.get("seed", seed))
    if source == "csv":
        schema = CsvSchema.from_dict(section.get("schema", {}))
        return load_csv(section["path"], schema)
    raise ConfigError(f"data source must be 'synthetic' or 'csv', got {source!r}")


def _activation_list(names) -> tuple[Activation, ...]:
    return tuple(Activation.of(n) for n in names)


def _coord_index(value, names: tuple[str, ...]) -> int:
    if isinstance(value, int):
        return value
    if value in names:
        return names.index(value)
    raise ConfigError(f"unknown coordinate {value!r}; known: {list(names)}")


def _slices_from_config(entries, names) -> tuple[SliceSpec, ...]:
    out = []
    for e in entries:
        coord = _coord_index(e["coordinate"], names) if "coordinate" in e else None
        out.append(
            SliceSpec(
                coordinate=coord,
                values=tuple(e["values"]) if "values" in e else None,
                interval=tuple(e["interval"]) if "interval" in e else None,
                indices=tuple(e["indices"]) if "indices" in e else None,
                tol=e.get("tol", 1e-9),
            )
        )
    return tuple(out)


def _axes_from_config(entries, names) -> tuple[IntegrationAxis, ...]:
    return tuple(
        IntegrationAxis(
            coordinate=_coord_index(e["coordinate"], names),
            bounds=tuple(e["bounds"]),
            n_nodes=int(e.get("n_nodes", 41)),
        )
        for e in entries
    )


def _validation_from_config(section: dict, names) -> ValidationConfig:
    try:
        return ValidationConfig(
            tol_dkl=float(section["tol_dkl"]),
            tol_cdf=float(section["tol_cdf"]),
            leave_out=_slices_from_config(section["slices"], names),
            observable_axes=_axes_from_config(section["observable_axes"], names),
            holdout_nodes=int(section.get("holdout_nodes", 21)),
            n_posterior_samples=int(section.get("n_posterior_samples", 300)),
            n_data_samples=int(section.get("n_data_samples", 200)),
            min_data_samples=int(section.get("min_data_samples", 30)),
            mode=section.get("mode", "both"),
            grid=GridConfig(n_grid=int(section.get("n_grid", 512))),
        )
    except KeyError as exc:
        raise ConfigError(f"validation config is missing key {exc}") from exc


def _fit_from_config(section: dict) -> FitSettings:
    hier_raw = section.get("hier", {})
    opt_raw = section.get("opt", {})
    hier = HierarchicalConfig(
        max_outer=int(hier_raw.get("max_outer", 30)),
        tol=float(hier_raw.get("tol", 1e-6)),
        shared_prior=bool(hier_raw.get("shared_prior", False)),
    )
    opt = OptConfig(
        max_iters=int(opt_raw.get("max_iters", 600)),
        step_size=float(opt_raw.get("step_size", 0.05)),
        tolerance=float(opt_raw.get("tolerance", 1e-6)),
        gauss_newton=bool(opt_raw.get("gauss_newton", True)),
    )
    return FitSettings(
        init_sigma_pr=float(section.get("init_sigma_pr", 1.0)),
        init_sigma_noise=float(section.get("init_sigma_noise", 0.5)),
        hier=hier,
        opt=opt,
    )


def _sparsify_from_config(section: dict) -> SparsifyConfig:
    grid = section.get("threshold_grid")
    return SparsifyConfig(
        threshold_grid=tuple(grid) if grid else None,
        beta_rule=section.get("beta_rule", "match_prior_variance"),
        refit=bool(section.get("refit", True)),
        n_grid=int(section.get("n_grid", 12)),
    )


def _probe_from_config(section: dict) -> ProbeConfig:
    try:
        widths = tuple(int(w) for w in section["widths"])
    except KeyError as exc:
        raise ConfigError("probe config needs a 'widths' list") from exc
    acts = _activation_list(section.get("activations", ["tanh", "relu", "leaky_relu", "sigmoid"]))
    return ProbeConfig(widths=widths, activations=acts, cap_factor=float(section.get("cap_factor", 1.10)))


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


def _write_json(path: Path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


def _write_manifest(out: Path, command: str, cfg_hash: str, seed: int) -> None:
    files = {}
    for p in sorted(out.iterdir()):
        if p.name == "manifest.json" or not p.is_file():
            continue
        files[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
    _write_json(
        out / "manifest.json",
        {"command": command, "config_sha256": cfg_hash, "seed": seed, "files": files},
    )


def _prepare_out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_probe(args) -> int:
    cfg = _load_config(args.config)
    out = _prepare_out(args)
    dataset = _dataset_from_config(cfg["data"], args.seed)
    data_std, _ = standardize(dataset)
    probe = build_initial_set(
        data_std,
        _probe_from_config(cfg.get("probe", {})),
        _fit_from_config(cfg.get("fit", {})),
        seed=args.seed,
        workers=args.workers,
    )
    _write_csv(
        out / "probe_grid.csv",
        ["width", "activation", "log_evid_model"],
        [(g["width"], g["activation"], float(g["log_evid_model"])) for g in probe.grid],
    )
    _write_json(
        out / "probe_summary.json",
        {
            "width_cap": probe.width_cap,
            "peak_width": probe.peak_width,
            "interior_peak": probe.interior_peak,
            "warning": probe.warning,
        },
    )
    _write_manifest(out, "probe", _config_hash(cfg), args.seed)
    print(f"width_cap={probe.width_cap} (peak width {probe.peak_width})")
    return EXIT_OK


def _opal_config(cfg: dict, dataset: Dataset, workers: int) -> OpalConfig:
    names = dataset.input_names
    cats = cfg.get("categories", {})
    allowed = _activation_list(
        cfg.get("activations", cfg.get("probe", {}).get("activations", ["tanh", "relu", "leaky_relu", "sigmoid"]))
    )
    return OpalConfig(
        probe=_probe_from_config(cfg.get("probe", {})),
        validation=_validation_from_config(cfg["validation"], names),
        depth_per_category=int(cats.get("depth_per_category", 1)),
        n_categories=int(cats.get("n_categories", 3)),
        allowed_activations=allowed,
        sparsify=_sparsify_from_config(cfg.get("sparsify", {})),
        fit=_fit_from_config(cfg.get("fit", {})),
        width_cap_override=cfg.get("width_cap_override"),
        explore_beyond_valid=bool(cfg.get("explore_beyond_valid", False)),
        workers=workers,
    )


def cmd_discover(args) -> int:
    cfg = _load_config(args.config)
    out = _prepare_out(args)
    dataset = _dataset_from_config(cfg["data"], args.seed)
    pretrain = (
        _dataset_from_config(cfg["pretrain_data"], args.seed + 1) if "pretrain_data" in cfg else None
    )
    config = _opal_config(cfg, dataset, args.workers)
    result = run_opal(dataset, config, pretrain_data=pretrain, seed=args.seed)

    _write_json(out / "trail.json", result.trail)
    for entry in result.trail["categories"]:
        if "sweep" not in entry:
            continue
        sweep = entry["sweep"]
        _write_csv(
            out / f"sparsify_trace_cat{entry['index']}.csv",
            ["threshold", "removed_fraction", "log_evid_model", "log_evid_raw", "selected"],
            [
                (
                    float(t),
                    float(r),
                    float(e),
                    float(raw),
                    int(i == sweep["selected_index"]),
                )
                for i, (t, r, e, raw) in enumerate(
                    zip(
                        sweep["thresholds"],
                        sweep["removed_fraction"],
                        sweep["log_evid_model"],
                        sweep["log_evid_raw"],
                    )
                )
            ],
        )
    if result.best is not None:
        save_model(
            out / "best_model.json",
            result.best,
            result.standardizer,
            dataset.input_names,
            dataset.output_names,
        )
        _write_predictive_curves(out, result, dataset)
    _write_manifest(out, "discover", _config_hash(cfg), args.seed)
    print(f"outcome={result.outcome}")
    if result.outcome == "all_invalid":
        print(result.trail["directive"])
        return EXIT_ALL_INVALID
    print(f"best model: {result.best.label}")
    return EXIT_OK


def _write_predictive_curves(out: Path, result, dataset: Dataset, n_points: int = 101) -> None:
    """Mean and 95% interval along each input coordinate, others at their median."""
    std = result.standardizer
    med = np.median(dataset.inputs, axis=0)
    for k, name in enumerate(dataset.input_names):
        lo, hi = dataset.inputs[:, k].min(), dataset.inputs[:, k].max()
        grid = np.linspace(lo, hi, n_points)
        pts = np.tile(med, (n_points, 1))
        pts[:, k] = grid
        pred = predict_posterior(result.best.posterior, std.transform_inputs(pts))
        mean = std.inverse_outputs(pred.mean)[:, 0]
        var = std.inverse_output_variance(pred.variance)[:, 0]
        half = 1.96 * np.sqrt(var)
        _write_csv(
            out / f"predictive_curve_{name}.csv",
            [name, "mean", "variance", "ci_lo", "ci_hi"],
            [
                (float(g), float(m), float(v), float(m - h), float(m + h))
                for g, m, v, h in zip(grid, mean, var, half)
            ],
        )


def cmd_validate(args) -> int:
    cfg = _load_config(args.config)
    out = _prepare_out(args)
    record, std, meta = load_model(args.model)
    dataset = _dataset_from_config(cfg["data"], args.seed)
    if std is None:
        std = Standardizer.identity(dataset.input_dim, dataset.output_dim)
    vconfig = _validation_from_config(cfg["validation"], dataset.input_names)
    report = leave_out_validate(
        record,
        dataset,
        vconfig,
        std,
        _fit_from_config(cfg.get("fit", {})),
        seed=args.seed,
        workers=args.workers,
    )
    payload = {
        "verdict": report.verdict,
        "slices": [
            {
                "slice": s.slice_index,
                "description": s.description,
                "d_dkl": s.d_dkl,
                "d_cdf": s.d_cdf,
                "pass_dkl": s.pass_dkl,
                "pass_cdf": s.pass_cdf,
                "passed": s.passed,
            }
            for s in report.slices
        ],
    }
    _write_json(out / "validation_report.json", payload)
    _write_manifest(out, "validate", _config_hash(cfg), args.seed)
    print(json.dumps(payload, indent=1, sort_keys=True))
    return EXIT_OK if report.not_invalid else EXIT_ALL_INVALID


def cmd_predict(args) -> int:
    out = _prepare_out(args)
    record, std, meta = load_model(args.model)
    input_names = meta["input_names"] or tuple(
        f"x{k}" for k in range(record.arch.input_dim)
    )
    output_names = meta["output_names"] or tuple(
        f"u{k}" for k in range(record.arch.output_dim)
    )
    schema = CsvSchema(inputs=tuple(input_names), outputs=(), scenario=data_mod.Scenario.PREDICTION)
    query = _load_query_csv(args.query, tuple(input_names))
    if std is None:
        std = Standardizer.identity(record.arch.input_dim, record.arch.output_dim)
    pred = predict_posterior(record.posterior, std.transform_inputs(query))
    mean = std.inverse_outputs(pred.mean)
    var = std.inverse_output_variance(pred.variance)
    header = list(input_names)
    for name in output_names:
        header += [f"mean_{name}", f"variance_{name}", f"ci_lo_{name}", f"ci_hi_{name}"]
    rows = []
    for i in range(query.shape[0]):
        row = [float(v) for v in query[i]]
        for j in range(len(output_names)):
            half = 1.96 * math.sqrt(float(var[i, j]))
            row += [float(mean[i, j]), float(var[i, j]), float(mean[i, j]) - half, float(mean[i, j]) + half]
        rows.append(row)
    _write_csv(out / "predictions.csv", header, rows)
    _write_manifest(out, "predict", hashlib.sha256(Path(args.query).read_bytes()).hexdigest(), args.seed)
    print(f"wrote {len(rows)} predictions")
    return EXIT_OK


def _load_query_csv(path, input_names: tuple[str, ...]) -> np.ndarray:
    from .errors import CsvParseError

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CsvParseError(f"{path}: file is empty") from None
        for name in input_names:
            if name not in header:
                raise CsvParseError(f"{path}: missing query column {name!r}", column=name)
        idx = [header.index(n) for n in input_names]
        rows = []
        for rownum, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([float(row[i]) for i in idx])
            except (ValueError, IndexError) as exc:
                raise CsvParseError(f"{path}: malformed numeric value at row {rownum}", row=rownum) from exc
    if not rows:
        raise CsvParseError(f"{path}: no query rows")
    return np.asarray(rows, dtype=float)


if __name__ == "__main__":
    sys.exit(main())
