"""Command-line front end.

    acimlab SUBCOMMAND [CONFIG.json] [--dotted.key VALUE ...]

Subcommands: density, sweep, osc, ly, spectrum, simulate, check.
Exit codes: 0 success, 2 config error, 3 numerical error, 4 failed validation.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .bvspace import DOMAINS, default_r_grid, oscillation_profile, var_norm
from .errors import AcimError, NumericalError, ParameterError, SamplingError, ValidationFailed
from .maps import map_from_config, validate_map
from .noise import NoiseKernel, check_assumption, noise_matrix
from .stability import (
    SolveOptions,
    check_deltas,
    ly_estimate,
    monte_carlo_density,
    perturbed_operator,
    solve_invariant,
    spectral_gap,
    stability_sweep,
)
from .transfer import GridDensity, ulam_matrix

SUBCOMMANDS = ("density", "sweep", "osc", "ly", "spectrum", "simulate", "check")
OUTPUT_ENV = "ACIMLAB_OUTPUT_DIR"

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_VALIDATION = 0, 2, 3, 4

DEFAULT_CONFIG = {
    "map": {"name": "doubling"},
    "noise": {"profile": "biweight", "delta": 0.05},
    "n": 256,
    "p": 2.0,
    "delta_list": [0.2, 0.1, 0.05, 0.01],
    "solver": {"method": "power", "tol": 1e-12, "max_iter": 100000},
    "r_grid": {"num": 64},
    "output_dir": None,
    "seed": 0,
    "ly": {"num_test_functions": 60, "operator": "perturbed"},
    "spectrum": {"operator": "frobenius_perron"},
    "simulate": {"num_samples": 1000000, "bins": 64, "chains": 100, "burn_in": 1000},
    "osc": {"density_file": None, "domain": "interval"},
    "check": {"samples_per_branch": 1000},
}


class ConfigError(AcimError):
    pass


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, pairs) -> dict:
    """Apply ``--a.b.c value`` overrides; values are parsed as JSON when possible."""
    cfg = copy.deepcopy(cfg)
    it = iter(pairs)
    for flag in it:
        if not flag.startswith("--") or len(flag) == 2:
            raise ConfigError(f"unexpected argument {flag!r}")
        try:
            value = next(it)
        except StopIteration:
            raise ConfigError(f"flag {flag} needs a value") from None
        keys = flag[2:].split(".")
        node = cfg
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override inside non-object key in {flag}")
        node[keys[-1]] = _parse_value(value)
    return cfg


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict

    @property
    def n(self) -> int:
        return int(self.raw["n"])

    @property
    def p(self) -> float:
        return float(self.raw["p"])

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def delta_list(self) -> list:
        return [float(d) for d in self.raw["delta_list"]]

    @property
    def content(self) -> dict:
        """The experiment itself; where results land is not part of it."""
        return {k: v for k, v in self.raw.items() if k != "output_dir"}

    @property
    def hash(self) -> str:
        canon = json.dumps(self.content, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def tmap(self):
        return map_from_config(self.raw["map"])

    def kernel(self, delta=None) -> NoiseKernel:
        block = self.raw["noise"]
        return NoiseKernel(block.get("profile", "biweight"), float(block["delta"] if delta is None else delta))

    def solve_options(self) -> SolveOptions:
        s = self.raw["solver"]
        return SolveOptions(method=s.get("method", "power"), tol=float(s.get("tol", 1e-12)),
                            max_iter=int(s.get("max_iter", 100000)))

    def r_grid(self):
        block = self.raw.get("r_grid") or {}
        if "values" in block:
            return np.asarray(block["values"], dtype=float)
        return default_r_grid(self.n, int(block.get("num", 64)))

    def output_dir(self) -> Path:
        out = self.raw.get("output_dir") or os.environ.get(OUTPUT_ENV) or "acimlab_out"
        return Path(out)


def load_config(path, overrides=()) -> ExperimentConfig:
    cfg = DEFAULT_CONFIG
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        cfg = _merge(cfg, user)
    cfg = apply_overrides(cfg, overrides)
    validate_config(cfg)
    return ExperimentConfig(cfg)


def validate_config(cfg: dict) -> None:
    try:
        n, p = int(cfg["n"]), float(cfg["p"])
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"bad n or p: {exc}") from None
    if n < 2:
        raise ConfigError("n must be >= 2")
    if p < 1:
        raise ConfigError("p must be >= 1")
    try:
        check_deltas(cfg["delta_list"])
    except (ParameterError, TypeError) as exc:
        raise ConfigError(f"delta_list: {exc}") from None
    if cfg["osc"].get("domain", "interval") not in DOMAINS:
        raise ConfigError(f"osc.domain must be one of {DOMAINS}")


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _csv_text(cfg: ExperimentConfig, header, rows) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={cfg.hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _json_text(cfg: ExperimentConfig, payload: dict) -> str:
    doc = {"config": cfg.content, "config_hash": cfg.hash, "tool_version": __version__, **payload}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def read_density_csv(path) -> GridDensity:
    """Read the ``h`` column of a density CSV, skipping ``#`` comment lines."""
    try:
        with open(path) as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
    except OSError as exc:
        raise ConfigError(f"cannot read density file {path}: {exc}") from None
    rows = list(csv.DictReader(lines))
    if not rows or "h" not in rows[0]:
        raise ConfigError(f"{path} has no 'h' column")
    return GridDensity(np.array([float(r["h"]) for r in rows]))


# --------------------------------------------------------------------------
# subcommands


def cmd_density(cfg: ExperimentConfig, out):
    sol = solve_invariant(ulam_matrix(cfg.tmap(), cfg.n), cfg.solve_options())
    h = sol.density
    rows = [[i, _fmt(i / h.n), _fmt(v)] for i, v in enumerate(h.values)]
    path = _write(cfg.output_dir() / "density.csv", _csv_text(cfg, ["cell", "left", "h"], rows))
    print(f"density: n={h.n} iterations={sol.iterations} residual={sol.residual:.3e} -> {path}", file=out)


def cmd_sweep(cfg: ExperimentConfig, out):
    rep = stability_sweep(
        cfg.tmap(), cfg.raw["noise"].get("profile", "biweight"), cfg.delta_list, cfg.n, cfg.p,
        cfg.solve_options(), r_grid=cfg.r_grid(),
    )
    rep.provenance.update({"config_hash": cfg.hash, "seed": cfg.seed})
    rows = [[_fmt(r.delta), _fmt(r.l1_error), _fmt(r.var_h_delta), _fmt(r.spectral_gap), r.iterations]
            for r in rep.rows]
    d = cfg.output_dir()
    _write(d / "sweep.csv", _csv_text(cfg, list(rep.CSV_HEADER), rows))
    _write(d / "sweep.json", _json_text(cfg, {"sweep": rep.to_dict()}))
    for r in rep.rows:
        print(f"delta={r.delta:.6g} l1_error={r.l1_error:.6e} var={r.var_h_delta:.6g} "
              f"gap={r.spectral_gap:.6g} iterations={r.iterations}", file=out)
    print(f"rate exponent (diagnostic): {rep.rate_exponent:.4f}", file=out)


def cmd_osc(cfg: ExperimentConfig, out):
    block = cfg.raw["osc"]
    if block.get("density_file"):
        f = read_density_csv(block["density_file"])
    else:
        f = solve_invariant(ulam_matrix(cfg.tmap(), cfg.n), cfg.solve_options()).density
    grid = default_r_grid(f.n, int((cfg.raw.get("r_grid") or {}).get("num", 64)))
    domain = block.get("domain", "interval")
    prof = oscillation_profile(f, grid, domain)
    res = var_norm(f, cfg.p, grid, domain)
    text = f"# config_hash={cfg.hash}\n" + prof.to_csv()
    path = _write(cfg.output_dir() / "osc.csv", text)
    print(f"var_1,1/p={res.var:.10g} (argmax r={res.argmax_r:.6g}) l1={res.l1:.10g} "
          f"norm={res.norm:.10g} -> {path}", file=out)


def _operator(cfg: ExperimentConfig, which: str):
    P = ulam_matrix(cfg.tmap(), cfg.n)
    if which == "frobenius_perron":
        return P
    if which == "noise":
        return noise_matrix(cfg.kernel(), cfg.n)
    if which == "perturbed":
        return perturbed_operator(P, noise_matrix(cfg.kernel(), cfg.n))
    raise ConfigError(f"unknown operator {which!r}")


def cmd_ly(cfg: ExperimentConfig, out):
    block = cfg.raw["ly"]
    M = _operator(cfg, block.get("operator", "perturbed"))
    est = ly_estimate(M, cfg.p, cfg.r_grid(), int(block.get("num_test_functions", 60)),
                      np.random.default_rng(cfg.seed))
    payload = {"ly": {"alpha_hat": est.alpha_hat, "c_hat": est.c_hat,
                      "sample_count": est.sample_count, "violated": est.violated}}
    _write(cfg.output_dir() / "ly.json", _json_text(cfg, payload))
    print(f"alpha_hat={est.alpha_hat:.6g} c_hat={est.c_hat:.6g} samples={est.sample_count} "
          f"violated={est.violated}", file=out)


def cmd_spectrum(cfg: ExperimentConfig, out):
    g = spectral_gap(_operator(cfg, cfg.raw["spectrum"].get("operator", "frobenius_perron")))
    payload = {"spectrum": {"lambda2_modulus": g.lambda2_modulus, "spectral_gap": g.gap,
                            "eigenvalue_one_simple": g.eigenvalue_one_simple,
                            "leading": [[z.real, z.imag] for z in g.leading]}}
    _write(cfg.output_dir() / "spectrum.json", _json_text(cfg, payload))
    print(f"lambda2_modulus={g.lambda2_modulus:.10g} gap={g.gap:.10g} "
          f"eigenvalue_one_simple={g.eigenvalue_one_simple}", file=out)


def cmd_simulate(cfg: ExperimentConfig, out):
    block = cfg.raw["simulate"]
    bins = int(block.get("bins", 64))
    hist = monte_carlo_density(
        cfg.tmap(), cfg.kernel(), int(block.get("num_samples", 10**6)), bins,
        np.random.default_rng(cfg.seed), burn_in=int(block.get("burn_in", 1000)),
        chains=int(block.get("chains", 100)),
    )
    rows = [[i, _fmt(i / bins), _fmt(v)] for i, v in enumerate(hist.values)]
    path = _write(cfg.output_dir() / "histogram.csv", _csv_text(cfg, ["cell", "left", "h"], rows))
    print(f"simulate: {block.get('num_samples', 10**6)} samples in {bins} bins -> {path}", file=out)


def cmd_check(cfg: ExperimentConfig, out):
    tmap = cfg.tmap()
    rep = validate_map(tmap, int(cfg.raw["check"].get("samples_per_branch", 1000)))
    ass = check_assumption(tmap, cfg.kernel(), cfg.p)
    print(f"map {tmap.label}: min|tau'|={rep.min_abs_derivative:.10g} monotone={list(rep.monotone_ok)} "
          f"images={list(rep.image_ok)} holder~{rep.sampled_holder_constant:.4g} "
          f"passed={rep.passed}", file=out)
    a = ass.as_dict()
    print("assumption: " + " ".join(f"{k}={v:.10g}" if isinstance(v, float) else f"{k}={v}"
                                    for k, v in a.items()), file=out)
    payload = {"validation": {"min_abs_derivative": rep.min_abs_derivative,
                              "monotone_ok": list(rep.monotone_ok), "image_ok": list(rep.image_ok),
                              "sampled_holder_constant": rep.sampled_holder_constant,
                              "passed": rep.passed},
               "assumption": a}
    _write(cfg.output_dir() / "check.json", _json_text(cfg, payload))
    if not rep.passed:
        raise ValidationFailed(f"map {tmap.label} failed validation")


COMMANDS = {
    "density": cmd_density,
    "sweep": cmd_sweep,
    "osc": cmd_osc,
    "ly": cmd_ly,
    "spectrum": cmd_spectrum,
    "simulate": cmd_simulate,
    "check": cmd_check,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="acimlab", description=__doc__.splitlines()[0] if __doc__ else None)
    ap.add_argument("command", help="one of: " + ", ".join(SUBCOMMANDS))
    ap.add_argument("config", nargs="?", help="experiment config (JSON)")
    ap.add_argument("--version", action="version", version=__version__)
    return ap


def run(argv, out=None, err=None) -> int:
    out = sys.stdout if out is None else out
    err = sys.stderr if err is None else err
    argv = list(argv)
    if not argv or argv[0] in ("-h", "--help"):
        build_parser().print_help(out)
        return EXIT_OK if argv else EXIT_CONFIG
    if argv[0] == "--version":
        print(__version__, file=out)
        return EXIT_OK
    command, rest = argv[0], argv[1:]
    if command not in COMMANDS:
        print(f"acimlab: unknown subcommand {command!r} (choose from {', '.join(SUBCOMMANDS)})", file=err)
        return EXIT_CONFIG
    path = None
    if rest and not rest[0].startswith("--"):
        path, rest = rest[0], rest[1:]
    try:
        cfg = load_config(path, rest)
        COMMANDS[command](cfg, out)
    except ValidationFailed as exc:
        print(f"acimlab: {exc}", file=err)
        return EXIT_VALIDATION
    except (NumericalError, SamplingError) as exc:
        print(f"acimlab: numerical error: {exc}", file=err)
        return EXIT_NUMERICAL
    except (ConfigError, ParameterError, AcimError, KeyError, TypeError, ValueError) as exc:
        print(f"acimlab: config error: {exc}", file=err)
        return EXIT_CONFIG
    return EXIT_OK


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
