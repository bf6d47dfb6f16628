"""Command-line front end.

Every subcommand reads an optional YAML/JSON config file; each config key has a
matching ``--flag`` (underscores become dashes) that overrides it. Outputs go
to ``output`` (a directory) and are deterministic for a fixed config.

Exit codes: 0 success, 2 configuration or input error, 3 solver
non-convergence, 4 infeasible CC-OPF.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import yaml

from . import ccopf as cc
from .netmodel import CaseError, Network, load_case
from .pce_basis import FAMILY_OF_DISTRIBUTION, PceBasis, build_index_set, make_basis
from .pf_core import PowerFlowError
from .spice_solver import PceCoefficients, SpiceConfig, SpiceError, solve_full_pce, spice
from .stochastic import DISTRIBUTIONS, make_model, sample
from .uq_eval import (BinningMismatch, MonteCarloError, build_report, compare_reports,
                      evaluate_pce, read_report, run_monte_carlo, write_report)

log = logging.getLogger("spice_uq")

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGENCE, EXIT_INFEASIBLE = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    case: str = "case9"
    n_areas: int = 3
    epsilon: float = 0.01
    distribution: str = "normalized_uniform"
    eval_distribution: str | None = None
    seed: int = 0
    samples: int = 10_000
    c_off: float = 1e-10
    truncate_quartic: bool = True
    degree: int = 2
    delta: float = 0.05
    quantities: tuple = ("vm", "sf", "i2", "pg", "qg")
    max_outer_iterations: int = 10
    validation_seed: int | None = None
    output: str = "out"
    threads: int = 1

    def validate(self) -> None:
        if self.degree not in (1, 2):
            raise ConfigError("degree must be 1 or 2")
        for d in (self.distribution, self.eval_distribution):
            if d is not None and d not in DISTRIBUTIONS:
                raise ConfigError(f"unknown distribution {d!r}")
        if self.n_areas < 1 or self.samples < 1 or self.threads < 1:
            raise ConfigError("n_areas, samples and threads must be positive")
        if self.epsilon < 0 or self.c_off < 0:
            raise ConfigError("epsilon and c_off must be nonnegative")
        if not 0 < self.delta < 0.5:
            raise ConfigError("delta must lie in (0, 0.5)")
        bad = set(self.quantities) - {"vm", "sf", "i2", "pg", "qg"}
        if bad:
            raise ConfigError(f"unknown quantities {sorted(bad)}")

    def spice_config(self) -> SpiceConfig:
        return SpiceConfig(c_off=self.c_off, truncate_quartic=self.truncate_quartic,
                           degree=self.degree)


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _coerce(f, value):
    if value is None:
        return None
    if f.name == "quantities":
        return tuple(value.split(",")) if isinstance(value, str) else tuple(value)
    if f.type == "bool":
        if isinstance(value, str):
            if value.lower() not in _BOOL:
                raise ConfigError(f"{f.name}: expected a boolean")
            return _BOOL[value.lower()]
        return bool(value)
    kind = {"int": int, "float": float, "int | None": int}.get(f.type, str)
    try:
        return kind(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{f.name}: {exc}") from None


def load_config(path=None, overrides=None) -> RunConfig:
    data = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    known = {f.name: f for f in fields(RunConfig)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    cfg = RunConfig(**{k: _coerce(known[k], v) for k, v in data.items()})
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# Coefficient file

_COEFF_MAGIC = "# spice-uq coefficients v1"


def write_coefficients(coeffs: PceCoefficients, path, net: Network | None = None) -> None:
    """Header lines then one record per nonzero: variable, element, multi-index, value."""
    net = net or coeffs.net
    basis = coeffs.basis
    iset = basis.index_set
    lines = [
        _COEFF_MAGIC,
        f"# case_hash\t{net.digest() if net is not None else ''}",
        f"# family\t{basis.family}",
        f"# n\t{iset.n}",
        f"# deg\t{iset.deg}",
        "# ordering\tgraded-lex total degree",
        f"# rows\t{coeffs.v_re.shape[0]},{coeffs.gen_p.shape[0]}",
        "variable\telement\tmulti_index\tvalue",
    ]
    for var in PceCoefficients.VARIABLES:
        X = coeffs.variable(var)
        rows, cols = np.nonzero(X)
        for r, k in zip(rows, cols):
            alpha = ",".join(str(int(a)) for a in iset.indices[k])
            lines.append(f"{var}\t{int(r)}\t{alpha}\t{float(X[r, k])!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_coefficients(path, net: Network | None = None) -> PceCoefficients:
    header: dict = {}
    records = []
    with open(path) as fh:
        first = fh.readline().rstrip("\n")
        if first != _COEFF_MAGIC:
            raise ValueError(f"{path} is not a coefficient file")
        for raw in fh:
            line = raw.rstrip("\n")
            if line.startswith("# "):
                k, _, v = line[2:].partition("\t")
                header[k] = v
            elif line and not line.startswith("variable\t"):
                records.append(line.split("\t"))
    if net is not None and header.get("case_hash") and header["case_hash"] != net.digest():
        raise ValueError("coefficient file was computed for a different case")
    iset = build_index_set(int(header["n"]), int(header["deg"]))
    basis = PceBasis(iset, header["family"])
    n_bus, n_gen = (int(x) for x in header["rows"].split(","))
    arrays = {v: np.zeros((n_gen if v.startswith("gen") else n_bus, iset.K))
              for v in PceCoefficients.VARIABLES}
    for var, elem, alpha, value in records:
        arrays[var][int(elem), iset.position([int(a) for a in alpha.split(",")])] = float(value)
    return PceCoefficients(basis=basis, net=net, **arrays)


# ---------------------------------------------------------------------------
# Commands


def _setup(cfg: RunConfig):
    try:
        net = load_case(cfg.case)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from None
    try:
        model = make_model(net, cfg.n_areas, cfg.epsilon, cfg.distribution)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    return net, model, out


def _eval_model(cfg: RunConfig, model):
    return model.with_distribution(cfg.eval_distribution or cfg.distribution)


def _report_meta(cfg: RunConfig, net: Network, method: str) -> dict:
    return {"case": net.name, "case_hash": net.digest(), "method": method,
            "n_areas": cfg.n_areas, "epsilon": cfg.epsilon}


def _pce_outputs(cfg, net, model, coeffs, method):
    out = Path(cfg.output)
    write_coefficients(coeffs, out / "coefficients.tsv", net)
    batch = sample(_eval_model(cfg, model), cfg.samples, cfg.seed)
    samples = evaluate_pce(coeffs, batch, net)
    meta = _report_meta(cfg, net, method)
    meta["sparsity"] = float(coeffs.diagnostics.get("sparsity", 0.0))
    report = build_report(samples, net, cfg.delta, names=cfg.quantities, meta=meta)
    write_report(report, out / "report.tsv")
    return report


def cmd_spice(cfg: RunConfig) -> PceCoefficients:
    net, model, _ = _setup(cfg)
    coeffs = spice(net, model, cfg.spice_config())
    d = coeffs.diagnostics
    log.info("spice: sparsity %.3f, times %s", d.get("sparsity", 0.0), d.get("times"))
    _pce_outputs(cfg, net, model, coeffs, f"spice-deg{cfg.degree}")
    return coeffs


def cmd_pce_full(cfg: RunConfig) -> PceCoefficients:
    net, model, _ = _setup(cfg)
    basis = make_basis(cfg.n_areas, cfg.degree, FAMILY_OF_DISTRIBUTION[model.distribution])
    coeffs = solve_full_pce(net, model, basis, config=cfg.spice_config())
    _pce_outputs(cfg, net, model, coeffs, f"pce-full-deg{cfg.degree}")
    return coeffs


def cmd_mc(cfg: RunConfig):
    net, model, out = _setup(cfg)
    samples = run_monte_carlo(net, _eval_model(cfg, model), cfg.samples, cfg.seed,
                              threads=cfg.threads)
    report = build_report(samples, net, cfg.delta, names=cfg.quantities,
                          meta=_report_meta(cfg, net, "mc"))
    write_report(report, out / "report.tsv")
    return report


def format_tv_table(rows: dict) -> str:
    width = max((len(k) for k in rows), default=0)
    return "\n".join(f"{k:<{width}}\t{v:.6f}" for k, v in rows.items()) + "\n"


def cmd_compare(report_a, report_b, output=None) -> dict:
    a, b = read_report(report_a), read_report(report_b)
    rows = compare_reports(a, b)
    text = format_tv_table(rows)
    if output:
        Path(output).write_text(text)
    sys.stdout.write(text)
    return rows


def cmd_ccopf(cfg: RunConfig):
    net, model, out = _setup(cfg)
    config = cc.CcOpfConfig(delta=cfg.delta, max_outer_iterations=cfg.max_outer_iterations,
                            samples=cfg.samples, seed=cfg.seed,
                            validation_seed=cfg.validation_seed, spice=cfg.spice_config())
    op, cert = cc.solve_cc_opf(net, model, config)
    cc.write_certificate(cert, out / "certificate.tsv")
    lines = ["generator\tbus\tp\tq\tv_set"]
    for g, p, q in zip(op.net.generators, op.pg, op.qg):
        lines.append(f"{len(lines) - 1}\t{g.bus}\t{float(p)!r}\t{float(q)!r}\t{g.v_nom!r}")
    (out / "dispatch.tsv").write_text("\n".join(lines) + "\n")
    if not cert.converged:
        raise cc.OpfError(f"no convergence in {cfg.max_outer_iterations} outer iterations")
    return op, cert


def cmd_partition(cfg: RunConfig):
    net, model, out = _setup(cfg)
    lines = ["load\tbus\tarea"]
    for i, (ld, a) in enumerate(zip(net.loads, model.area_of_load)):
        lines.append(f"{i}\t{ld.bus}\t{a}")
    (out / "areas.tsv").write_text("\n".join(lines) + "\n")
    return model


# ---------------------------------------------------------------------------
# Argument parsing


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON config file")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        p.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spice-uq", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("spice", "sparse iterative PCE"), ("pce-full", "full square PCE solve"),
                       ("mc", "Monte-Carlo baseline"), ("ccopf", "chance-constrained OPF"),
                       ("partition", "dump the load-area assignment")):
        _add_config_flags(sub.add_parser(name, help=text))
    cmp = sub.add_parser("compare", help="TV distances between two reports")
    cmp.add_argument("report_a")
    cmp.add_argument("report_b")
    cmp.add_argument("--output")
    return parser


_COMMANDS = {"spice": cmd_spice, "pce-full": cmd_pce_full, "mc": cmd_mc,
             "ccopf": cmd_ccopf, "partition": cmd_partition}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "compare":
            cmd_compare(args.report_a, args.report_b, args.output)
            return EXIT_OK
        overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
        cfg = load_config(args.config, overrides)
        _COMMANDS[args.command](cfg)
        return EXIT_OK
    except cc.Infeasible as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (PowerFlowError, SpiceError, MonteCarloError, cc.OpfError) as exc:
        print(f"no convergence: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except (ConfigError, CaseError, BinningMismatch, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def config_dict(cfg: RunConfig) -> dict:
    return asdict(cfg)


if __name__ == "__main__":
    sys.exit(main())
