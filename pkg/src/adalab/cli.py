"""Command-line front end.

Usage::

    adalab --command sweep --config sweep.json --out results/
    adalab --command noiseopt --config noise.json --out results/
    adalab --command selftest

Experiment configs are JSON objects with the keys ``k``, ``sigma``,
``replications``, ``seed``, ``mechanism``, ``adversary`` and
``conjunction``.  A sweep file holds a list of them, either bare or under
``"configs"``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import sys
import time
from pathlib import Path
from typing import Iterable, Optional, Sequence, TextIO

import numpy as np

from adalab import bounds, harness, signopt
from adalab.adversaries import KINDS as ADVERSARY_KINDS
from adalab.adversaries import AdversaryConfig
from adalab.core import QuerySpec
from adalab.harness import ExperimentConfig, RiskReport, SweepFailure
from adalab.mechanisms import KINDS as MECHANISM_KINDS
from adalab.mechanisms import MechanismConfig, NoiseSpec, default_schedule

COMMANDS = ("game", "sweep", "noiseopt", "bounds", "selftest")

RESULTS_HEADER = [
    "k", "sigma", "adversary", "mechanism", "round", "bias_hat", "bias_se",
    "bias_sq_hat", "mse_hat", "mse_se", "combined_risk", "upper_bound",
    "lower_bound", "sharpness_floor",
]
# Appended after the fixed columns above.
RESULTS_EXTRA = ["cond_bias_sq_hat", "cond_bias_sq_se", "mse_lo_3se", "mse_hi_3se"]
PLOT_HEADER = ["k", "empirical_max_mse", "theorem2_bound", "theorem3_bound"]
TRANSCRIPT_HEADER = [
    "game", "replication", "round", "query_mean", "query_variance",
    "cov_with_history", "family", "noise_mean", "noise_scale", "release",
    "noise_value", "phi",
]
NOISEOPT_HEADER = [
    "sigma", "w", "lp_objective", "margin", "margin_lower_bound",
    "uniform_margin", "dual_u1", "dual_v1", "dual_v2", "dual_objective_bound",
    "tv_to_uniform", "density_file",
]
BOUNDS_HEADER = [
    "k", "sigma", "mechanism", "one_step_bias_sq", "one_step_mse",
    "k_step_bias_sq", "k_step_mse", "minimax_lower", "sharpness_floor",
]

CONFIG_KEYS = {"k", "sigma", "replications", "seed", "mechanism", "adversary", "conjunction"}
MECHANISM_KEYS = {"kind", "w_schedule", "noises"}
ADVERSARY_KEYS = {"kind", "sigma", "queries"}
QUERY_KEYS = {"mean", "variance", "cov_with_history"}
NOISEOPT_KEYS = {"sigma", "w", "n_points", "half_width"}


class ConfigError(ValueError):
    """A configuration file that does not match the schema."""


def fmt(x) -> str:
    """Nine significant digits; integers and strings pass through."""
    if isinstance(x, (bool, np.bool_)):
        return str(x)
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    return format(float(x), ".9g")


# ---------------------------------------------------------------- configs


def _reject_unknown(d: dict, allowed: set, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}; "
                          f"allowed: {', '.join(sorted(allowed))}")


def _int(d: dict, key: str, lo: int, default=None) -> int:
    if key not in d:
        if default is None:
            raise ConfigError(f"missing required key {key!r}")
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{key} must be an integer ≥ {lo}, got {v!r}")
    if v < lo:
        raise ConfigError(f"{key} must be ≥ {lo}, got {v}")
    return v


def _positive(d: dict, key: str, default=None) -> float:
    if key not in d:
        if default is None:
            raise ConfigError(f"missing required key {key!r}")
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0 or not math.isfinite(v):
        raise ConfigError(f"{key} must be a finite number > 0, got {v!r}")
    return float(v)


def config_from_dict(d: dict) -> ExperimentConfig:
    """Validate one experiment config given as a parsed JSON object."""
    _reject_unknown(d, CONFIG_KEYS, "config")
    k = _int(d, "k", 1)
    sigma = _positive(d, "sigma")
    reps = _int(d, "replications", 1, default=100_000)
    seed = _int(d, "seed", 0, default=0)
    conjunction = d.get("conjunction", "max")
    if conjunction not in harness.CONJUNCTIONS:
        raise ConfigError(f"conjunction must be one of {', '.join(harness.CONJUNCTIONS)}, "
                          f"got {conjunction!r}")

    mech = d.get("mechanism", {"kind": "gaussian_schedule"})
    _reject_unknown(mech, MECHANISM_KEYS, "mechanism")
    kind = mech.get("kind")
    if kind not in MECHANISM_KINDS:
        raise ConfigError(f"mechanism.kind must be one of {', '.join(MECHANISM_KINDS)}, "
                          f"got {kind!r}")
    try:
        if kind == "custom":
            noises = [NoiseSpec.from_dict(n) for n in mech.get("noises", [])]
            mechanism = MechanismConfig("custom", mech.get("w_schedule", ()), noises)
        elif "w_schedule" in mech:
            mechanism = MechanismConfig(kind, mech["w_schedule"])
        elif kind == "zero_noise":
            mechanism = MechanismConfig(kind)
        else:
            mechanism = MechanismConfig(kind, default_schedule(k, sigma).w_schedule)
    except ValueError as exc:
        raise ConfigError(f"mechanism: {exc}") from exc

    adv = d.get("adversary")
    if adv is None:
        raise ConfigError("missing required key 'adversary'")
    _reject_unknown(adv, ADVERSARY_KEYS, "adversary")
    if adv.get("kind") not in ADVERSARY_KINDS:
        raise ConfigError(f"adversary.kind must be one of {', '.join(ADVERSARY_KINDS)}, "
                          f"got {adv.get('kind')!r}")
    queries = []
    for j, q in enumerate(adv.get("queries", [])):
        _reject_unknown(q, QUERY_KEYS, f"adversary.queries[{j}]")
        queries.append(QuerySpec(q.get("mean", 0.0), q["variance"], q.get("cov_with_history", [])))
    adv_sigma = _positive(adv, "sigma", default=sigma)
    try:
        adversary = AdversaryConfig(adv["kind"], adv_sigma, tuple(queries))
        return ExperimentConfig(k, sigma, mechanism, adversary, reps, seed, conjunction)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def config_to_dict(config: ExperimentConfig) -> dict:
    """JSON-ready form of a config; :func:`config_from_dict` inverts it."""
    return {
        "k": config.k,
        "sigma": config.sigma,
        "replications": config.replications,
        "seed": config.seed,
        "conjunction": config.conjunction,
        "mechanism": config.mechanism.to_dict(),
        "adversary": config.adversary.to_dict(),
    }


def parse_config(path) -> ExperimentConfig | list[ExperimentConfig]:
    """Read one config, or a list of them, from a JSON file."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if isinstance(data, dict) and set(data) == {"configs"}:
        data = data["configs"]
    if isinstance(data, list):
        out = []
        for i, item in enumerate(data):
            try:
                out.append(config_from_dict(item))
            except ConfigError as exc:
                raise ConfigError(f"configs[{i}]: {exc}") from exc
        return out
    return config_from_dict(data)


@dataclasses.dataclass(frozen=True)
class NoiseOptConfig:
    sigma: float
    ws: tuple
    n_points: int = 2001
    half_width: Optional[float] = None


def parse_noiseopt_config(path) -> NoiseOptConfig:
    data = json.loads(Path(path).read_text())
    _reject_unknown(data, NOISEOPT_KEYS, "noiseopt config")
    sigma = _positive(data, "sigma")
    ws = data.get("w")
    if ws is None:
        raise ConfigError("missing required key 'w'")
    ws = ws if isinstance(ws, list) else [ws]
    for w in ws:
        if isinstance(w, bool) or not isinstance(w, (int, float)) or w < 0:
            raise ConfigError(f"w must be ≥ 0, got {w!r}")
    n = _int(data, "n_points", 3, default=2001)
    hw = data.get("half_width")
    return NoiseOptConfig(sigma, tuple(float(w) for w in ws), n,
                          None if hw is None else float(hw))


# ---------------------------------------------------------------- output


@dataclasses.dataclass(frozen=True)
class RunManifest:
    config_path: Optional[Path]
    output_dir: Path
    command: str
    overrides: dict
    force: bool = False

    def prepare(self, names: Iterable[str]) -> list[Path]:
        """Create the output directory and refuse to clobber without force."""
        self.output_dir.mkdir(parents=True, exist_ok=True)
        paths = [self.output_dir / n for n in names]
        existing = [str(p) for p in paths if p.exists()]
        if existing and not self.force:
            raise FileExistsError(
                f"refusing to overwrite {', '.join(existing)}; pass --force to replace")
        return paths


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(x) for x in row])
    try:
        path.write_text(buf.getvalue())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def results_rows(report: RiskReport):
    c = report.config
    b = report.bound_report
    for i, r in enumerate(report.per_round, start=1):
        yield [c.k, c.sigma, c.adversary.kind, c.mechanism.kind, i, r.bias_hat,
               r.bias_se, r.bias_sq_hat, r.mse_hat, r.mse_se, report.combined_risk,
               b.k_step_mse, b.minimax_lower, b.sharpness_floor,
               r.cond_bias_sq_hat, r.cond_bias_sq_se,
               r.mse_hat - 3 * r.mse_se, r.mse_hat + 3 * r.mse_se]


def plot_rows(reports: Sequence[RiskReport]):
    rows = [[r.config.k, r.max_mse, r.bound_report.k_step_mse, r.bound_report.minimax_lower]
            for r in reports]
    return sorted(rows, key=lambda row: row[0])


def emit_results(reports: Sequence[RiskReport], manifest: RunManifest) -> list[Path]:
    """Write ``results.csv`` and ``plotdata_risk_vs_k.csv``."""
    if not reports:
        raise ValueError("no reports to write")
    results, plot = manifest.prepare(["results.csv", "plotdata_risk_vs_k.csv"])
    _write_csv(results, RESULTS_HEADER + RESULTS_EXTRA,
               (row for rep in reports for row in results_rows(rep)))
    _write_csv(plot, PLOT_HEADER, plot_rows(reports))
    return [results, plot]


# ---------------------------------------------------------------- commands


def _as_list(parsed) -> list[ExperimentConfig]:
    return parsed if isinstance(parsed, list) else [parsed]


def _apply_overrides(configs, reps: Optional[int], seed: Optional[int]):
    out = []
    for c in configs:
        if reps is not None:
            c = dataclasses.replace(c, replications=reps)
        if seed is not None:
            c = dataclasses.replace(c, seed=seed)
        out.append(c)
    return out


def cmd_sweep(configs, manifest: RunManifest, workers: int, log: TextIO) -> int:
    results = harness.sweep(configs, workers)
    reports = [r for r in results if isinstance(r, RiskReport)]
    failures = [(i, r) for i, r in enumerate(results) if isinstance(r, SweepFailure)]
    for i, f in failures:
        print(f"config {i} failed: {f.error}", file=log)
    if reports:
        for path in emit_results(reports, manifest):
            print(f"wrote {path}", file=log)
    return 2 if failures else 0


def transcript_rows(g: int, rep: int, history):
    for i, (s, p) in enumerate(zip(history.shared.rounds, history.player_private), start=1):
        cov = ";".join(fmt(v) for v in s.query.cov_with_history)
        yield [g, rep, i, s.query.mean, s.query.variance, cov, s.noise.family,
               float(s.noise.mean), float(s.noise.scale), s.release, p.noise_value, p.phi]


def cmd_game(configs, manifest: RunManifest, games: int, log: TextIO) -> int:
    (path,) = manifest.prepare(["transcripts.csv"])
    rows = []
    for g, config in enumerate(configs):
        for rep in range(games):
            rows.extend(transcript_rows(g, rep, harness.run_game(config, rep)))
    _write_csv(path, TRANSCRIPT_HEADER, rows)
    print(f"wrote {path}", file=log)
    return 0


def cmd_bounds(configs, manifest: RunManifest, log: TextIO) -> int:
    (path,) = manifest.prepare(["bounds.csv"])
    rows = []
    for c in configs:
        rep = bounds.bound_report(c.k, c.sigma, harness.schedule_for_bounds(c))
        rows.append([c.k, c.sigma, c.mechanism.kind, rep.one_step_bias_sq, rep.one_step_mse,
                     rep.k_step_bias_sq, rep.k_step_mse, rep.minimax_lower,
                     rep.sharpness_floor])
    _write_csv(path, BOUNDS_HEADER, rows)
    print(f"wrote {path}", file=log)
    return 0


def density_filename(w: float) -> str:
    return f"density_w{fmt(w)}.txt"


def cmd_noiseopt(cfg: NoiseOptConfig, manifest: RunManifest, log: TextIO) -> int:
    names = ["noiseopt.csv"] + [density_filename(w) for w in cfg.ws]
    paths = manifest.prepare(names)
    rows = []
    grid = signopt.GridConfig(cfg.n_points, cfg.half_width)
    for w, dpath in zip(cfg.ws, paths[1:]):
        dist, obj = signopt.solve_optimal_noise(cfg.sigma, w, grid)
        lines = [f"{fmt(x)} {fmt(p)}" for x, p in zip(dist.grid, dist.weights)]
        dpath.write_text("\n".join(lines) + "\n")
        uniform = (signopt.margin_risk(NoiseSpec.uniform(w), cfg.sigma) if w > 0
                   else signopt.expected_abs_normal(cfg.sigma))
        if w >= cfg.sigma:
            cert = signopt.dual_certificate(cfg.sigma, w)
            dual = [cert.u1, cert.v1, cert.v2, cert.objective_bound]
        else:
            dual = ["", "", "", ""]
        tv = signopt.tv_to_uniform(dist, w, cfg.sigma) if w > 0 else ""
        rows.append([cfg.sigma, w, obj, obj / 2, signopt.margin_lower_bound(cfg.sigma, w),
                     uniform, *dual, tv, dpath.name])
        print(f"w={fmt(w)}: margin {fmt(obj / 2)}", file=log)
    _write_csv(paths[0], NOISEOPT_HEADER, rows)
    print(f"wrote {paths[0]}", file=log)
    return 0


# ---------------------------------------------------------------- selftest

DEFAULT_TOLERANCES = {
    "operator_identity_A1": 1e-5,
    "operator_identity_Ax": 1e-5,
    "operator_identity_Ax2": 1e-5,
    "operator_identity_Ax3": 1e-5,
    "recursion_oracle": 1e-10,
    "bound_arithmetic": 1e-12,
    "margin_point_mass": 1e-5,
    "determinism": 0.0,
}


def _fk_expectation(r, S, W, v, lam, w_sq):
    """Average of ``f`` over the next release, from Gaussian moment identities."""
    n = r.size
    big_S = np.block([[S, v[:, None]], [v[None, :], np.array([[lam]])]])
    big_W = np.zeros((n + 1, n + 1))
    big_W[:n, :n] = W
    big_W[n, n] = w_sq
    Mi = np.linalg.inv(S + W)
    mean = np.append(r, v @ Mi @ r)
    var = lam + w_sq - v @ Mi @ v
    Mf = np.linalg.inv(big_S + big_W)
    Q = Mf @ big_S @ Mf
    return mean @ Q @ mean + Q[n, n] * var


def selftest(tolerances: Optional[dict] = None, out: TextIO = sys.stdout, seed: int = 0) -> int:
    """Run the fast invariant checks; returns 0 when all pass."""
    tol = dict(DEFAULT_TOLERANCES)
    tol.update(tolerances or {})
    results: list[tuple[str, bool, float]] = []

    sigma = 1.0
    grid = np.linspace(-20, 20, 1601)
    interior = np.abs(grid) <= 11
    identities = {
        "operator_identity_A1": (np.ones_like(grid), np.zeros_like(grid)),
        "operator_identity_Ax": (grid, np.full_like(grid, 2 * sigma**2)),
        "operator_identity_Ax2": (grid**2, 4 * sigma**2 * grid),
        "operator_identity_Ax3": (grid**3, 6 * sigma**2 * grid**2 + 6 * sigma**4),
    }
    for name, (f, expected) in identities.items():
        err = float(np.max(np.abs(signopt.operator_A_apply(f, grid, sigma) - expected)[interior]))
        results.append((name, err <= tol[name], err))

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 7))
        G = rng.normal(size=(n, n))
        full = G @ G.T
        S, v, lam = full[:-1, :-1], full[:-1, -1], full[-1, -1]
        wd = rng.uniform(0.1, 3.0, size=n)
        W, w_sq = np.diag(wd[:-1]), wd[-1]
        r = rng.normal(size=n - 1)
        Mi = np.linalg.inv(S + W)
        f_prev = r @ Mi @ S @ Mi @ r
        got = bounds.recursive_fk_update(f_prev, S, W, v, lam, w_sq)
        want = _fk_expectation(r, S, W, v, lam, w_sq)
        worst = max(worst, abs(got - want) / max(1.0, abs(want)))
    results.append(("recursion_oracle", worst <= tol["recursion_oracle"], worst))

    checks = [
        (bounds.one_step_bias_sq_bound(2, 1.0, 1.0), 1.0),
        (bounds.one_step_mse_bound(10, 1.0), 7.0),
        (bounds.sharpness_floor(2, 1.0, 1.0), 0.5),
        (bounds.k_step_bias_sq_bound(1.0, [math.sqrt(3)] * 9 + [0.0]), 4.0),
        (bounds.k_step_mse_bound(101, 1.0), 22.0),
        (bounds.minimax_lower_bound(4, 1.0), 0.5),
        (signopt.margin_lower_bound(1.0, 1.0), 1 / (2 * math.sqrt(3))),
        (signopt.dual_certificate(1.0, 1.0).objective_bound, 1 / math.sqrt(3)),
    ]
    err = max(abs(a - b) for a, b in checks)
    results.append(("bound_arithmetic", err <= tol["bound_arithmetic"], err))

    err = abs(signopt.margin_risk(signopt.DiscretizedDistribution.point_mass(), sigma)
              - signopt.expected_abs_normal(sigma))
    results.append(("margin_point_mass", err <= tol["margin_point_mass"], err))

    cfg = ExperimentConfig(5, 1.0, default_schedule(5, 1.0),
                           AdversaryConfig("k_step_greedy", 1.0), 500, seed)
    a = harness.estimate_risk(cfg, workers=1)
    b = harness.estimate_risk(cfg, workers=1)
    diff = max(abs(x.mse_hat - y.mse_hat) + abs(x.bias_hat - y.bias_hat)
               for x, y in zip(a.per_round, b.per_round))
    results.append(("determinism", diff <= tol["determinism"], diff))

    failed = [name for name, ok, _ in results if not ok]
    for name, ok, value in results:
        print(f"{'PASS' if ok else 'FAIL'} {name} (error {value:.3g}, tol {tol[name]:.3g})", file=out)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed", file=out)
    if failed:
        print("failed: " + ", ".join(failed), file=out)
        return 1
    return 0


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adalab", description=__doc__.split("\n\n")[0])
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--command", choices=COMMANDS, required=True)
    p.add_argument("--reps", type=int, help="override replications (game: number of transcripts)")
    p.add_argument("--seed", type=int, help="override the seed of every config")
    p.add_argument("--workers", type=int,
                   help="worker processes (default: $ADA_LAB_WORKERS or 1)")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    return p


def main(argv: Optional[Sequence[str]] = None, log: TextIO = sys.stderr) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "selftest":
        return selftest(out=sys.stdout, seed=args.seed or 0)
    if args.config is None:
        print(f"--config is required for --command {args.command}", file=log)
        return 2
    if args.reps is not None and args.reps < 1:
        print("--reps must be ≥ 1", file=log)
        return 2
    if args.seed is not None and args.seed < 0:
        print("--seed must be ≥ 0", file=log)
        return 2
    overrides = {k: v for k, v in (("reps", args.reps), ("seed", args.seed)) if v is not None}
    manifest = RunManifest(args.config, args.out, args.command, overrides, args.force)
    try:
        workers = harness.resolve_workers(args.workers)
        if args.command == "noiseopt":
            return cmd_noiseopt(parse_noiseopt_config(args.config), manifest, log)
        configs = _as_list(parse_config(args.config))
        if args.command == "game":
            configs = _apply_overrides(configs, None, args.seed)
            return cmd_game(configs, manifest, args.reps or 1, log)
        configs = _apply_overrides(configs, args.reps, args.seed)
        if args.command == "bounds":
            return cmd_bounds(configs, manifest, log)
        started = time.perf_counter()
        code = cmd_sweep(configs, manifest, workers, log)
        print(f"sweep finished in {time.perf_counter() - started:.1f}s", file=log)
        return code
    except (ConfigError, FileExistsError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=log)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
