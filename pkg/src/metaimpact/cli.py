"""Batch driver: simulate | estimate | decay | deconvolve | report.

Configuration lives in a JSON file (``--config``); command-line flags
override file values, which override built-in defaults.  Every output
report embeds the fully resolved configuration, the master seed and the
tool version, so a run is reproducible from its report alone.

Exit codes: 0 success, 2 configuration error, 3 data error,
4 fit non-convergence, 1 unexpected failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import datetime as dt
import json
import sys
from pathlib import Path

from . import __version__
from .datamodel import CleaningConfig, Panel, clean_panel, load_panel, write_panel
from .deconvolution import (
    DeconvConfig,
    bootstrap_kernel,
    build_design,
    fit_kernel_asymptote,
    prepare_inputs,
    response_function,
    solve_kernel,
)
from .errors import ConfigError, DataError, MetaImpactError
from .flowstats import daily_imbalance, fit_autocorr, flow_autocorrelation
from .impact import (
    conditional_next_close,
    decay_curve,
    fit_decay_exponent,
    impact_curve,
    impact_ratio_curve,
    zeta_from_autocorr,
)
from .simulator import (
    FlowParams,
    PropagatorParams,
    SimConfig,
    modified_propagator_kernel,
    simulate_panel,
)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CONVERGENCE = 4


DEFAULTS: dict = {
    "seed": 0,
    "out": "run_output",
    "input": None,
    "threads": 1,
    "tranche": None,
    "force": False,
    "simulate": {
        "n_stocks": 20,
        "n_days": 250,
        "noise_scale": 0.01,
        "market_variance": 0.0,
        "overnight_gap_scale": 0.0,
        "capm_beta": 1.0,
        "isolation": False,
        "fixed_duration": 0.1,
        "start_grid": 91,
        "constant_sigma": False,
        "constant_volume": False,
        "kernel": None,
        "kernel_family": None,
        "flow": {
            "autocorr_amplitude": 0.0,
            "autocorr_decay_rate": 0.038,
            "autocorr_exponent": 0.56,
            "size_tail_exponent": 0.7,
            "phi_min": 1e-4,
            "phi_max": 0.4,
            "participation_tail_exponent": 0.8,
            "participation_min": 1e-3,
            "participation_max": 0.5,
            "orders_per_day": 1.0,
        },
        "propagator": {"decay_exponent": 0.22, "prefactor": 0.5},
    },
    "cleaning": {
        "max_participation": 0.5,
        "max_daily_fraction": 1.0,
        "min_duration": 1e-4,
    },
    "impact": {"n_bins": 20},
    "decay": {"n_bins": 20, "clock": "volume"},
    "flowstats": {"max_lag": 50, "fixed_exponent": 0.56},
    "deconvolution": {
        "horizon": 50,
        "bootstrap_replicates": 200,
        "beta_half_width": 20,
        "alpha_lags": 0,
        "ridge": 0.0,
        "max_response_lag": 50,
    },
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}")
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = _deep_merge(cfg, file_cfg)
    for flag in ("seed", "out", "threads", "tranche"):
        value = getattr(args, flag, None)
        if value is not None:
            cfg[flag] = value
    if getattr(args, "input", None) is not None:
        cfg["input"] = args.input
    if getattr(args, "force", False):
        cfg["force"] = True
    cfg["command"] = args.command
    return cfg


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    return repr(float(x))


def _write_rows(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_curve_csv(path: Path, bins) -> None:
    rows = [[_fmt(b.center), _fmt(b.value), _fmt(b.stderr), b.count] for b in bins]
    _write_rows(path, ["bin_center", "value", "stderr", "count"], rows)


def _write_decay_csv(path: Path, points) -> None:
    rows = [[_fmt(p.z), _fmt(p.value), _fmt(p.stderr), p.count] for p in points]
    _write_rows(path, ["bin_center", "value", "stderr", "count"], rows)


def _write_report(path: Path, cfg: dict, payload: dict) -> None:
    report = {
        "tool_version": __version__,
        "generated_at": dt.datetime.now(dt.timezone.utc).isoformat(),
        "config": cfg,
        **payload,
    }
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def _prepare_out(cfg: dict, filenames: list[str]) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    if not cfg.get("force"):
        clashes = [n for n in filenames if (out / n).exists()]
        if clashes:
            raise ConfigError(
                f"refusing to overwrite {clashes} in {out}; pass --force"
            )
    return out


def _load_input_panel(cfg: dict) -> Panel:
    if not cfg.get("input"):
        raise ConfigError("no input directory configured (--in or config 'input')")
    directory = Path(cfg["input"])
    if not directory.exists():
        raise DataError(f"input directory {directory} does not exist")
    panel = load_panel(directory)
    if cfg.get("tranche"):
        panel = panel.restrict_tranche(cfg["tranche"])
    return panel


def _clean(cfg: dict, panel: Panel):
    return clean_panel(panel, CleaningConfig(**cfg["cleaning"]))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

_SIM_FILES = [
    "metaorders.csv",
    "bars.csv",
    "market.csv",
    "stocks.csv",
    "ground_truth.json",
]


def cmd_simulate(cfg: dict) -> int:
    out = _prepare_out(cfg, _SIM_FILES)
    sim = cfg["simulate"]
    flow = FlowParams(**sim["flow"])
    propagator = PropagatorParams(**sim["propagator"])
    kernel = sim.get("kernel")
    kernel_meta = None
    family = sim.get("kernel_family")
    if family:
        if kernel is not None:
            raise ConfigError("give either an explicit kernel or a kernel_family")
        kernel, kernel_meta = modified_propagator_kernel(
            horizon=family.get("horizon", cfg["deconvolution"]["horizon"]),
            asymptote=family["asymptote"],
            decay_rate=family["decay_rate"],
            decay_exponent=family.get("decay_exponent", 0.22),
            scale=family.get("scale", 0.3),
        )
    sim_config = SimConfig(
        n_stocks=sim["n_stocks"],
        n_days=sim["n_days"],
        seed=cfg["seed"],
        noise_scale=sim["noise_scale"],
        market_variance=sim["market_variance"],
        overnight_gap_scale=sim["overnight_gap_scale"],
        capm_beta=sim["capm_beta"],
        kernel=None if kernel is None else tuple(kernel),
        kernel_meta=kernel_meta,
        isolation=sim["isolation"],
        fixed_duration=sim["fixed_duration"],
        start_grid=sim["start_grid"],
        constant_sigma=sim["constant_sigma"],
        constant_volume=sim["constant_volume"],
    )
    result = simulate_panel(flow, sim_config, propagator)
    write_panel(result.panel, out)
    truth = dict(result.ground_truth)
    truth["config"] = cfg
    (out / "ground_truth.json").write_text(
        json.dumps(truth, indent=2, sort_keys=True) + "\n"
    )
    print(f"simulated {truth['n_metaorders']} metaorders -> {out}")
    return EXIT_OK


_ESTIMATE_FILES = [
    "impact_start_end.csv",
    "impact_start_close.csv",
    "impact_start_next_close.csv",
    "decay_same_day.csv",
    "decay_next_day.csv",
    "autocorr.csv",
    "report.json",
]


def _decay_section(cfg: dict, panel: Panel, out: Path | None) -> dict:
    """Decay curves, their propagator fit and the persistence factor."""
    max_lag = cfg["flowstats"]["max_lag"]
    flows = daily_imbalance(panel)
    n_days = flows.phi.shape[1]
    corr = flow_autocorrelation(flows, min(max_lag, n_days - 2))
    zeta = zeta_from_autocorr(float(corr.mean_corr[0]))
    same = decay_curve(
        panel, "same_day", cfg["decay"]["n_bins"], clock=cfg["decay"]["clock"]
    )
    nxt = decay_curve(
        panel, "next_day", cfg["decay"]["n_bins"], zeta=zeta,
        clock=cfg["decay"]["clock"],
    )
    # noisy bins can leave the fit's (0, 1] domain; exclude them and say so
    fittable = [
        p for p in same + nxt
        if 0.0 < p.value <= 1.0 + 3.0 * p.stderr + 1e-9
    ]
    fit = fit_decay_exponent(fittable)
    if out is not None:
        _write_decay_csv(out / "decay_same_day.csv", same)
        _write_decay_csv(out / "decay_next_day.csv", nxt)
    return {
        "zeta": zeta,
        "lag1_autocorr": float(corr.mean_corr[0]),
        "decay_fit": {
            "decay_exponent": fit.decay_exponent,
            "stderr": fit.stderr,
            "converged": fit.converged,
            "at_boundary": fit.at_boundary,
        },
        "n_same_day_points": len(same),
        "n_next_day_points": len(nxt),
        "n_points_outside_fit_domain": len(same) + len(nxt) - len(fittable),
    }


def cmd_estimate(cfg: dict) -> int:
    panel = _load_input_panel(cfg)
    out = _prepare_out(cfg, _ESTIMATE_FILES)
    cleaned = _clean(cfg, panel)
    p = cleaned.panel
    n_bins = cfg["impact"]["n_bins"]

    payload: dict = {
        "counts": {
            "metaorders_in": len(panel.metaorders),
            "metaorders_kept": len(p.metaorders),
            "stocks": p.n_stocks,
            "days": p.n_days,
        },
        "rejections": cleaned.rejections,
    }
    for pair, name in (
        ("start_to_end", "impact_start_end.csv"),
        ("start_to_close", "impact_start_close.csv"),
        ("start_to_next_close", "impact_start_next_close.csv"),
    ):
        curve = impact_curve(p, pair, n_bins)
        _write_curve_csv(out / name, curve.bins)
    _, _, mean_ratio = impact_ratio_curve(p, n_bins)
    payload["mean_close_to_end_ratio"] = mean_ratio

    flows = daily_imbalance(p)
    max_lag = min(cfg["flowstats"]["max_lag"], p.n_days - 2)
    corr = flow_autocorrelation(flows, max_lag)
    _write_rows(
        out / "autocorr.csv",
        ["lag", "mean_corr", "stderr"],
        [
            [int(l), _fmt(c), _fmt(s)]
            for l, c, s in zip(corr.lags, corr.mean_corr, corr.stderr)
        ],
    )
    try:
        ac_fit = fit_autocorr(corr, cfg["flowstats"]["fixed_exponent"])
        payload["autocorr_fit"] = {
            "amplitude": ac_fit.amplitude,
            "decay_rate": ac_fit.decay_rate,
            "exponent": ac_fit.exponent,
            "amplitude_stderr": ac_fit.amplitude_stderr,
            "decay_rate_stderr": ac_fit.decay_rate_stderr,
            "converged": ac_fit.converged,
        }
    except DataError as exc:
        payload["autocorr_fit"] = {"skipped": str(exc)}

    payload.update(_decay_section(cfg, p, out))
    try:
        _, slope, slope_se = conditional_next_close(p, min(10, n_bins))
        payload["next_close_regression"] = {"slope": slope, "stderr": slope_se}
    except (DataError, ConfigError) as exc:
        payload["next_close_regression"] = {"skipped": str(exc)}

    _write_report(out / "report.json", cfg, payload)
    print(f"estimated {len(p.metaorders)} metaorders -> {out}")
    return EXIT_OK


def cmd_decay(cfg: dict) -> int:
    panel = _load_input_panel(cfg)
    out = _prepare_out(
        cfg, ["decay_same_day.csv", "decay_next_day.csv", "report.json"]
    )
    cleaned = _clean(cfg, panel)
    payload = {"rejections": cleaned.rejections}
    payload.update(_decay_section(cfg, cleaned.panel, out))
    _write_report(out / "report.json", cfg, payload)
    print(f"decay curves -> {out}")
    if not payload["decay_fit"]["converged"]:
        return EXIT_CONVERGENCE
    return EXIT_OK


def cmd_deconvolve(cfg: dict) -> int:
    panel = _load_input_panel(cfg)
    dc = cfg["deconvolution"]
    if dc["horizon"] >= panel.n_days:
        raise ConfigError(
            f"horizon {dc['horizon']} must be smaller than the "
            f"{panel.n_days}-day panel"
        )
    out = _prepare_out(cfg, ["kernel.csv", "response.csv", "report.json"])
    cleaned = _clean(cfg, panel)
    p = cleaned.panel
    config = DeconvConfig(
        horizon=dc["horizon"],
        bootstrap_replicates=dc["bootstrap_replicates"],
        beta_half_width=dc["beta_half_width"],
        alpha_lags=dc["alpha_lags"],
        seed=cfg["seed"],
        ridge=dc["ridge"],
        threads=cfg["threads"],
    )
    inputs = prepare_inputs(p, config)
    system = build_design(inputs.flows, inputs.residuals, inputs.sigma, config)
    estimate = solve_kernel(system, ridge=config.ridge)

    max_lag = min(dc["max_response_lag"], p.n_days - 1)
    response = response_function(inputs.flows, inputs.residuals, max_lag)
    _write_rows(
        out / "response.csv",
        ["tau", "R_norm"],
        [[t, _fmt(v)] for t, v in enumerate(response)],
    )

    band = None
    if config.bootstrap_replicates >= 1:
        band = bootstrap_kernel(system, config)
    header = ["tau", "G_cum", "G_norm", "reg_err"]
    if band is not None:
        header += ["boot_lo", "boot_hi"]
    rows = []
    for t in range(estimate.lags.size):
        row = [
            t,
            _fmt(estimate.cumulative[t]),
            _fmt(estimate.normalized[t]),
            _fmt(estimate.cumulative_stderr[t]),
        ]
        if band is not None:
            row += [_fmt(band.lo[t]), _fmt(band.hi[t])]
        rows.append(row)
    _write_rows(out / "kernel.csv", header, rows)

    flows_raw = daily_imbalance(p)
    try:
        corr = flow_autocorrelation(flows_raw, min(50, p.n_days - 2))
        ac_fit = fit_autocorr(corr)
        fixed_rate = ac_fit.decay_rate
        rate_source = "flow_autocorr_fit"
    except (DataError, ConfigError):
        fixed_rate = FlowParams().autocorr_decay_rate
        rate_source = "default"

    boot_se = band.std if band is not None else None
    fits = {}
    all_converged = True
    for mode in ("one_param", "two_param", "b_zero_free_beta"):
        fit = fit_kernel_asymptote(
            estimate.normalized,
            mode=mode,
            decay_rate_fixed=fixed_rate,
            stderr=boot_se,
        )
        all_converged &= fit.converged
        fits[mode] = {
            "asymptote": fit.asymptote,
            "decay_rate": fit.decay_rate,
            "decay_exponent": fit.decay_exponent,
            "asymptote_stderr": fit.asymptote_stderr,
            "decay_rate_stderr": fit.decay_rate_stderr,
            "decay_exponent_stderr": fit.decay_exponent_stderr,
            "converged": fit.converged,
            "at_bounds": fit.at_bounds,
        }
    payload = {
        "counts": {
            "metaorders_kept": len(p.metaorders),
            "stocks": p.n_stocks,
            "days": p.n_days,
            "regression_rows": estimate.n_rows,
            "beta_fallback_days": inputs.beta_fallbacks,
        },
        "rejections": cleaned.rejections,
        "ridge": config.ridge,
        "truncation_rate": {"value": fixed_rate, "source": rate_source},
        "kernel_fits": fits,
        "bootstrap": None
        if band is None
        else {"replicates": band.replicates, "mean_band_std": float(band.std.mean())},
        "alpha_coefficients": [float(a) for a in estimate.alpha_coefficients],
    }
    _write_report(out / "report.json", cfg, payload)
    print(f"kernel over {estimate.lags.size - 1} lags -> {out}")
    return EXIT_OK if all_converged else EXIT_CONVERGENCE


def cmd_report(cfg: dict) -> int:
    target = cfg.get("input") or cfg.get("out")
    if not target:
        raise ConfigError("report needs --in pointing at a run directory")
    directory = Path(target)
    reports = sorted(directory.rglob("report.json"))
    truths = sorted(directory.rglob("ground_truth.json"))
    if not reports and not truths:
        raise DataError(f"no report.json or ground_truth.json under {directory}")
    for path in truths:
        data = json.loads(path.read_text())
        print(f"[simulation] {path}")
        print(f"  mode={data.get('mode')} stocks={data.get('n_stocks')} "
              f"days={data.get('n_days')} orders={data.get('n_metaorders')} "
              f"seed={data.get('seed')}")
    for path in reports:
        data = json.loads(path.read_text())
        print(f"[run] {path}")
        print(f"  command={data['config'].get('command')} "
              f"seed={data['config'].get('seed')} version={data.get('tool_version')}")
        for key in ("decay_fit", "autocorr_fit", "kernel_fits",
                    "mean_close_to_end_ratio", "zeta"):
            if key in data:
                print(f"  {key}: {json.dumps(data[key], sort_keys=True)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metaimpact",
        description="Metaorder impact estimation pipeline and simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("simulate", "generate a synthetic panel with ground truth"),
        ("estimate", "impact curves, decay curves and flow statistics"),
        ("decay", "relaxation curves and the propagator-exponent fit"),
        ("deconvolve", "kernel deconvolution with bootstrap bands"),
        ("report", "summarize reports found in a run directory"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="master RNG seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--in", dest="input", help="input panel directory")
        p.add_argument("--force", action="store_true",
                       help="overwrite existing outputs")
        p.add_argument("--threads", type=int, help="parallel workers")
        p.add_argument("--tranche", help="restrict to one market-cap tranche")
    return parser


_COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "decay": cmd_decay,
    "deconvolve": cmd_deconvolve,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        return _COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MetaImpactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
