"""Command-line front end: benchmark runs, rate studies, DOF tables.

Subcommands
-----------
run               solve one case over a list of mesh levels, write CSV + JSON
study             like run, for several polynomial degrees at once
dof-table         trace-space sizes of both variants on the square mesh family
compare-variants  run both variants side by side (DOFs, timings, reduction)

Configuration is ``key = value`` lines in a text file (``--config``), with
command-line flags taking precedence.  Mesh levels are case-specific:
level 1 is 2 cells (smooth2d), 6 cells (singular2d), or 160 cells
(hartmann); each level halves h for the square/L-shape families, while
the Hartmann strip uses the level directly as its refinement parameter.

CSV rows use fixed scientific formatting so identical configurations
yield identical result columns; the three trailing timing columns are
wall-clock measurements and naturally vary between runs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .local_solver import PhysParams
from .picard import PicardConfig
from .spaces import Variant, build_dof_layout, count_global_dofs
from .verify import CASE_BUILDERS, convergence_rates, run_case
from .mesh import gen_structured_square

logger = logging.getLogger(__name__)

CSV_HEADER = ("level,h,cells,dofs,err_L_scaled,err_u,err_p,err_J_scaled,"
              "err_b,err_r,divinf_u,divinf_b,t_assembly_s,t_solve_s,t_reconstruct_s")

CONFIG_KEYS = {
    "case": str, "variant": str, "k": int, "levels": str, "alpha1": float,
    "beta": float, "re": float, "rm": float, "kappa": float, "p0": float,
    "epsilon": float, "max_iter": int, "rhat_bc": str, "out": str,
    "dump_matrix": bool, "threads": int, "nonlinear": bool,
}

RHAT_MODES = {"strong-zero": "strong-zero", "normal-constraint": "normal-constraint"}


class ConfigError(Exception):
    pass


def _parse_config_file(path: str) -> dict:
    cfg = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        typ = CONFIG_KEYS[key]
        try:
            cfg[key] = (value.lower() in ("1", "true", "yes")) if typ is bool else typ(value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {value!r}") from exc
    return cfg


def _parse_levels(spec: str) -> list[int]:
    try:
        if ".." in spec:
            lo, hi = spec.split("..")
            levels = list(range(int(lo), int(hi) + 1))
        else:
            levels = [int(tok) for tok in spec.split(",") if tok]
    except ValueError as exc:
        raise ConfigError(f"bad levels spec {spec!r}") from exc
    if not levels or any(l < 1 for l in levels):
        raise ConfigError(f"bad levels spec {spec!r}")
    return levels


def _build_settings(args) -> dict:
    cfg = _parse_config_file(args.config) if args.config else {}
    for key in CONFIG_KEYS:
        cli_val = getattr(args, key.replace("-", "_"), None)
        if cli_val is not None:
            cfg[key] = cli_val
    cfg.setdefault("case", "smooth2d")
    cfg.setdefault("variant", "ehdg")
    cfg.setdefault("k", 1)
    cfg.setdefault("levels", "1,2,3")
    cfg.setdefault("alpha1", 125.0)
    cfg.setdefault("beta", 1.0)
    cfg.setdefault("re", 1.0)
    cfg.setdefault("rm", 1.0)
    cfg.setdefault("kappa", 1.0)
    cfg.setdefault("p0", 1.0)
    cfg.setdefault("epsilon", 1e-10)
    cfg.setdefault("max_iter", 100)
    cfg.setdefault("rhat_bc", "strong-zero")
    cfg.setdefault("out", ".")
    cfg.setdefault("dump_matrix", False)
    cfg.setdefault("threads", 1)
    if cfg["case"] not in CASE_BUILDERS:
        raise ConfigError(f"unknown case {cfg['case']!r} "
                          f"(choose from {sorted(CASE_BUILDERS)})")
    if cfg["variant"] not in ("hdg", "ehdg"):
        raise ConfigError(f"unknown variant {cfg['variant']!r}")
    if cfg["rhat_bc"] not in RHAT_MODES:
        raise ConfigError(f"unknown rhat-bc mode {cfg['rhat_bc']!r}")
    if not 1 <= cfg["k"] <= 6:
        raise ConfigError(f"k = {cfg['k']} out of the supported range 1..6")
    cfg["levels_list"] = _parse_levels(cfg["levels"])
    try:
        cfg["params"] = PhysParams(re=cfg["re"], rm=cfg["rm"], kappa=cfg["kappa"],
                                   alpha1=cfg["alpha1"], beta1=cfg["beta"],
                                   beta2=cfg["beta"])
        cfg["picard"] = PicardConfig(epsilon=cfg["epsilon"], max_iter=cfg["max_iter"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _csv_row(rep) -> str:
    vals = [f"{rep.level}", f"{rep.h:.6e}", f"{rep.cells}", f"{rep.dofs['total']}"]
    vals += [f"{getattr(rep, name):.6e}" for name in
             ("err_L_scaled", "err_u", "err_p", "err_J_scaled", "err_b", "err_r",
              "divinf_u", "divinf_b")]
    vals += [f"{rep.timings.get(phase, 0.0):.6e}"
             for phase in ("assembly", "solve", "reconstruct")]
    return ",".join(vals)


def _report_json(rep) -> dict:
    out = dataclasses.asdict(rep)
    out["timings"] = {f"t_{k}_s": v for k, v in rep.timings.items()}
    return out


def _run_one_study(cfg, k, variant) -> tuple[list, dict, bool]:
    case = CASE_BUILDERS[cfg["case"]](cfg["params"], cfg["p0"])
    reports = []
    ok = True
    for lvl in cfg["levels_list"]:
        _, rep, hist = run_case(case, lvl, k, Variant(variant),
                                rhat_mode=cfg["rhat_bc"], picard=cfg["picard"],
                                threads=cfg["threads"])
        reports.append(rep)
        if hist is not None and not hist.converged:
            ok = False
            logger.error("case %s level %d: fixed-point iteration did not converge",
                         cfg["case"], lvl)
    rates = convergence_rates(reports) if len(reports) >= 2 else {}
    return reports, rates, ok


def cmd_run(args) -> int:
    cfg = _build_settings(args)
    outdir = Path(cfg["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    tag = f"{cfg['case']}_{cfg['variant']}_k{cfg['k']}"
    try:
        reports, rates, ok = _run_one_study(cfg, cfg["k"], cfg["variant"])
    except Exception as exc:
        logger.error("solver failure: %s", exc)
        return 1
    (outdir / f"{tag}.csv").write_text(
        CSV_HEADER + "\n" + "\n".join(_csv_row(r) for r in reports) + "\n")
    summary = {
        "case": cfg["case"], "variant": cfg["variant"], "k": cfg["k"],
        "levels": cfg["levels_list"],
        "params": dataclasses.asdict(cfg["params"]), "p0": cfg["p0"],
        "rhat_bc": cfg["rhat_bc"],
        "rates_last_two": rates,
        "divergence_max": {"u": max(r.divinf_u for r in reports),
                           "b": max(r.divinf_b for r in reports)},
        "levels_detail": [_report_json(r) for r in reports],
    }
    (outdir / f"{tag}.json").write_text(json.dumps(summary, indent=2) + "\n")
    if cfg["dump_matrix"]:
        _dump_system(cfg, outdir / f"{tag}_matrix.txt")
    print(f"wrote {outdir / (tag + '.csv')} and {outdir / (tag + '.json')}")
    return 0 if ok else 1


def _dump_system(cfg, path: Path) -> None:
    from .basis import build_reference_element
    from .global_system import assemble_global, build_condensed_blocks, dump_matrix
    from .spaces import boundary_dof_values

    case = CASE_BUILDERS[cfg["case"]](cfg["params"], cfg["p0"])
    lvl = cfg["levels_list"][0]
    m = case.mesh_for_level(lvl)
    refel = build_reference_element(cfg["k"])
    layout = build_dof_layout(m, cfg["k"], Variant(cfg["variant"]))
    bvals, _ = boundary_dof_values(layout, m, refel, case.u, case.b)
    blocks = build_condensed_blocks(m, refel, cfg["params"], case.conv(),
                                    (case.g, case.f), rhat_mode=cfg["rhat_bc"])
    system = assemble_global(m, layout, blocks, bvals, rhat_mode=cfg["rhat_bc"])
    dump_matrix(system, str(path))


def cmd_study(args) -> int:
    cfg = _build_settings(args)
    ks = [int(tok) for tok in (args.k_list or str(cfg["k"])).split(",")]
    outdir = Path(cfg["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    all_ok = True
    rate_rows = ["k," + ",".join(f"rate_{n}" for n in
                                 ("L_scaled", "u", "p", "J_scaled", "b", "r"))]
    for k in ks:
        try:
            reports, rates, ok = _run_one_study(cfg, k, cfg["variant"])
        except Exception as exc:
            logger.error("solver failure at k=%d: %s", k, exc)
            return 1
        all_ok = all_ok and ok
        tag = f"{cfg['case']}_{cfg['variant']}_k{k}"
        (outdir / f"{tag}.csv").write_text(
            CSV_HEADER + "\n" + "\n".join(_csv_row(r) for r in reports) + "\n")
        rate_rows.append(f"{k}," + ",".join(
            f"{rates['err_' + n]:.4f}" for n in
            ("L_scaled", "u", "p", "J_scaled", "b", "r")))
    (outdir / f"{cfg['case']}_{cfg['variant']}_rates.csv").write_text(
        "\n".join(rate_rows) + "\n")
    print(f"wrote rate table {outdir / (cfg['case'] + '_' + cfg['variant'] + '_rates.csv')}")
    return 0 if all_ok else 1


def cmd_dof_table(args) -> int:
    cfg = _build_settings(args)
    outdir = Path(cfg["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    rows = ["cells,k,hdg,ehdg,reduction_pct"]
    for n in (1, 2, 4, 8, 16):
        m = gen_structured_square(n)
        for k in (1, 2, 3, 4):
            hdg = count_global_dofs(build_dof_layout(m, k, Variant.HDG))["total"]
            ehdg = count_global_dofs(build_dof_layout(m, k, Variant.EHDG))["total"]
            red = (ehdg - hdg) / hdg * 100.0
            rows.append(f"{m.num_cells},{k},{hdg},{ehdg},{red:.2f}")
    path = outdir / "dof_table.csv"
    path.write_text("\n".join(rows) + "\n")
    print(f"wrote {path}")
    return 0


def cmd_compare_variants(args) -> int:
    cfg = _build_settings(args)
    outdir = Path(cfg["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    results = {}
    csv_rows = ["variant," + CSV_HEADER]
    all_ok = True
    for variant in ("hdg", "ehdg"):
        try:
            reports, rates, ok = _run_one_study(cfg, cfg["k"], variant)
        except Exception as exc:
            logger.error("solver failure (%s): %s", variant, exc)
            return 1
        all_ok = all_ok and ok
        csv_rows += [f"{variant}," + _csv_row(r) for r in reports]
        results[variant] = {
            "dofs": [r.dofs["total"] for r in reports],
            "rates_last_two": rates,
            "divergence_max": {"u": max(r.divinf_u for r in reports),
                               "b": max(r.divinf_b for r in reports)},
            "timings": [{f"t_{k}_s": v for k, v in r.timings.items()}
                        for r in reports],
        }
    results["reduction_pct"] = [
        (e - h) / h * 100.0
        for h, e in zip(results["hdg"]["dofs"], results["ehdg"]["dofs"])]
    tag = f"compare_{cfg['case']}_k{cfg['k']}"
    (outdir / f"{tag}.csv").write_text("\n".join(csv_rows) + "\n")
    (outdir / f"{tag}.json").write_text(json.dumps(results, indent=2) + "\n")
    print(f"wrote {outdir / (tag + '.csv')} and {outdir / (tag + '.json')}")
    return 0 if all_ok else 1


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--case", choices=sorted(CASE_BUILDERS))
    p.add_argument("--variant", choices=["hdg", "ehdg"])
    p.add_argument("--k", type=int)
    p.add_argument("--levels", help="comma list or lo..hi range of mesh levels")
    p.add_argument("--alpha1", type=float)
    p.add_argument("--beta", type=float, help="sets beta1 = beta2")
    p.add_argument("--re", type=float)
    p.add_argument("--rm", type=float)
    p.add_argument("--kappa", type=float)
    p.add_argument("--p0", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--max-iter", type=int, dest="max_iter")
    p.add_argument("--rhat-bc", choices=sorted(RHAT_MODES), dest="rhat_bc")
    p.add_argument("--out", help="output directory")
    p.add_argument("--dump-matrix", action="store_const", const=True,
                   dest="dump_matrix")
    p.add_argument("--threads", type=int)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = argparse.ArgumentParser(
        prog="hybridmhd",
        description="Hybridized/embedded-hybridized DG solver for planar "
                    "stationary incompressible visco-resistive MHD")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("run", cmd_run), ("study", cmd_study),
                     ("dof-table", cmd_dof_table),
                     ("compare-variants", cmd_compare_variants)):
        p = sub.add_parser(name)
        _add_common(p)
        if name == "study":
            p.add_argument("--k-list", dest="k_list",
                           help="comma list of polynomial degrees")
        p.set_defaults(fn=fn)
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
