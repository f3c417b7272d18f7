"""Command-line entry point: simulate, fit, evaluate.

Every command is a pure function of (config bytes, input files, seed), so
reruns produce byte-identical outputs.  Exit codes: 0 success, 2 config
error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import deconvolver, simulation
from .dataset import ReplicateDataset, read_csv
from .errors import ConfigError, DataError, DeconvError
from .stage1 import Stage1Settings
from .stats_core import RngStream

logger = logging.getLogger("deconv")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _setup_logging() -> None:
    level = os.environ.get("DECONV_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )


def _check_keys(obj: dict, allowed: dict, context: str) -> None:
    """Reject unknown keys and wrong basic types, naming the field."""
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"{context}: unknown key {key!r}")
    for key, value in obj.items():
        expected = allowed[key]
        if expected is None:
            continue
        if not isinstance(value, expected):
            names = (
                expected.__name__
                if isinstance(expected, type)
                else "/".join(t.__name__ for t in expected)
            )
            raise ConfigError(
                f"{context}: field {key!r} must be {names}, got {type(value).__name__}"
            )


def _load_config(path: str) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return obj


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8")


def _write_grid_csvs(grid, out: Path) -> None:
    p = len(grid.axes)
    for d in range(p):
        lines = ["x,density"]
        for xv, dv in zip(grid.axes[d], grid.marginals_1d[d]):
            lines.append(f"{xv:.17g},{dv:.17g}")
        (out / f"marginal_x{d + 1}.csv").write_bytes(
            ("\n".join(lines) + "\n").encode("utf-8")
        )
    for (a, b), dens in grid.marginals_2d.items():
        lines = ["x_a,x_b,density"]
        for i, xa in enumerate(grid.axes[a]):
            for j, xb in enumerate(grid.axes[b]):
                lines.append(f"{xa:.17g},{xb:.17g},{dens[i, j]:.17g}")
        (out / f"marginal2d_x{a + 1}_x{b + 1}.csv").write_bytes(
            ("\n".join(lines) + "\n").encode("utf-8")
        )


SCENARIO_KEYS = {
    "n": int,
    "m": int,
    "p": int,
    "structure": str,
    "error_law": str,
    "heteroscedastic": bool,
    "t_dof": (int, float),
}


def _scenario_from_config(obj: dict) -> simulation.Scenario:
    _check_keys(obj, SCENARIO_KEYS, "scenario")
    for req in ("n", "m"):
        if req not in obj:
            raise ConfigError(f"scenario: missing required field {req!r}")
    structure = obj.get("structure", "I")
    if structure not in ("I", "LF", "AR", "EXP"):
        raise ConfigError(
            f"scenario: field 'structure' must be one of I/LF/AR/EXP, got {structure!r}"
        )
    law = obj.get("error_law", "normal")
    if law not in ("normal", "mixture", "mvt", "mvl"):
        raise ConfigError(
            "scenario: field 'error_law' must be one of "
            f"normal/mixture/mvt/mvl, got {law!r}"
        )
    return simulation.Scenario(
        n=obj["n"],
        m=obj["m"],
        p=obj.get("p", 4),
        structure=structure,
        error_law=law,
        heteroscedastic=obj.get("heteroscedastic", False),
        t_dof=float(obj.get("t_dof", 6.0)),
    )


def cmd_simulate(config_path: str, seed: int | None, out_dir: str, jobs: int) -> int:
    cfg = _load_config(config_path)
    _check_keys(cfg, {"scenario": dict, "seed": int}, "config")
    if "scenario" not in cfg:
        raise ConfigError("config: missing required field 'scenario'")
    scenario = _scenario_from_config(cfg["scenario"])
    use_seed = seed if seed is not None else cfg.get("seed", 0)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = RngStream(use_seed)
    data, truth = simulation.generate_dataset(scenario, rng)
    data.write_csv(out / "dataset.csv")
    truth_doc = truth.to_dict()
    truth_doc["heteroscedastic"] = scenario.heteroscedastic
    truth_doc["error_law"] = scenario.error_law
    truth_doc["structure"] = scenario.structure
    truth_doc["seed"] = use_seed
    (out / "truth.json").write_bytes(_json_bytes(truth_doc))
    logger.info("wrote %s rows to %s", data.n_rows, out / "dataset.csv")
    return 0


FIT_KEYS = {
    "data": str,
    "model": str,
    "heteroscedastic": bool,
    "k_x": (int, type(None)),
    "k_err": (int, type(None)),
    "iterations": int,
    "burn_in": int,
    "thin": int,
    "grid_points": int,
    "seed": int,
    "stage1": dict,
}

STAGE1_KEYS = {"iterations": int, "burn_in": int, "n_error_comps": int,
               "n_x_comps": int}


def cmd_fit(config_path: str, seed: int | None, out_dir: str, jobs: int) -> int:
    cfg = _load_config(config_path)
    _check_keys(cfg, FIT_KEYS, "config")
    if "data" not in cfg:
        raise ConfigError("config: missing required field 'data'")
    model = cfg.get("model", "mlfa")
    if model not in deconvolver.MODELS:
        raise ConfigError(
            f"config: field 'model' must be one of {'/'.join(deconvolver.MODELS)},"
            f" got {model!r}"
        )
    stage1_cfg = cfg.get("stage1", {})
    _check_keys(stage1_cfg, STAGE1_KEYS, "stage1")
    try:
        fit_cfg = deconvolver.FitConfig(
            model=model,
            heteroscedastic=cfg.get("heteroscedastic", False),
            k_x=cfg.get("k_x"),
            k_err=cfg.get("k_err"),
            iterations=cfg.get("iterations", 3000),
            burn_in=cfg.get("burn_in", 1000),
            thin=cfg.get("thin", 5),
            seed=seed if seed is not None else cfg.get("seed", 0),
            grid_points=cfg.get("grid_points", 64),
            stage1=Stage1Settings(**stage1_cfg),
        )
    except ValueError as exc:
        raise ConfigError(f"config: {exc}") from exc
    data = read_csv(cfg["data"])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    result = deconvolver.run_fit(data, fit_cfg, jobs=jobs)
    logger.info("fit completed in %.1f s", time.time() - started)
    _write_grid_csvs(result.grid, out)
    post = result.posterior
    np.savez_compressed(
        out / "posterior.npz",
        weights=post.weights,
        means=post.means,
        covs=post.covs,
        axes=np.asarray(result.grid.axes),
    )
    summary = dict(result.diagnostics)
    summary["retained"] = post.n_retained
    summary["iterations"] = fit_cfg.iterations
    summary["burn_in"] = fit_cfg.burn_in
    summary["thin"] = fit_cfg.thin
    summary["seed"] = fit_cfg.seed
    (out / "summary.json").write_bytes(_json_bytes(summary))
    return 0


EVAL_KEYS = {
    "truth": str,
    "fits": list,
    "m_points": int,
    "p0": str,
    "seed": int,
}


def _load_posterior(path: Path) -> deconvolver.PosteriorSummary:
    npz_path = path / "posterior.npz" if path.is_dir() else path
    if not npz_path.exists():
        raise DataError(f"missing fit output {npz_path}")
    with np.load(npz_path) as z:
        return deconvolver.PosteriorSummary(
            weights=z["weights"],
            means=z["means"],
            covs=z["covs"],
            model="loaded",
            nonempty_x=np.zeros(0, dtype=int),
            nonempty_err=np.zeros(0, dtype=int),
        )


def cmd_evaluate(config_path: str, seed: int | None, out_dir: str, jobs: int) -> int:
    cfg = _load_config(config_path)
    _check_keys(cfg, EVAL_KEYS, "config")
    for req in ("truth", "fits"):
        if req not in cfg:
            raise ConfigError(f"config: missing required field {req!r}")
    p0 = cfg.get("p0", "both")
    if p0 not in ("truth", "uniform", "both"):
        raise ConfigError(
            f"config: field 'p0' must be truth/uniform/both, got {p0!r}"
        )
    truth_path = Path(cfg["truth"])
    if not truth_path.exists():
        raise DataError(f"missing truth file {truth_path}")
    try:
        truth = simulation.TruthDensity.from_dict(
            json.loads(truth_path.read_text(encoding="utf-8"))
        )
    except (json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"{truth_path}: {exc}") from exc
    posts = [_load_posterior(Path(f)) for f in cfg["fits"]]
    for post in posts:
        if post.means.shape[2] != truth.dim:
            raise DataError(
                f"fit dimension {post.means.shape[2]} does not match "
                f"truth dimension {truth.dim}"
            )
    fits = [post.density for post in posts]
    use_seed = seed if seed is not None else cfg.get("seed", 0)
    m_points = cfg.get("m_points", 100000)
    report = {"m_points": m_points, "seed": use_seed, "n_fits": len(fits)}
    variants = ("truth", "uniform") if p0 == "both" else (p0,)
    for variant in variants:
        rng = RngStream(use_seed, 7 if variant == "truth" else 8)
        res = simulation.mise_estimate(truth, fits, variant, m_points, rng)
        report[f"p0_{variant}"] = res.to_dict()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "mise.json").write_bytes(_json_bytes(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deconv",
        description="Multivariate density deconvolution: simulate, fit, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("simulate", cmd_simulate),
        ("fit", cmd_fit),
        ("evaluate", cmd_evaluate),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--out", default=".")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else 0
    try:
        return args.func(args.config, args.seed, args.out, args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DeconvError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
