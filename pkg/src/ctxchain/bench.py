"""Benchmark harness: run scenarios A-D on the simulated network and report T1-T6.

Metric definitions (all from the simulated clock unless labelled otherwise):

T1  leader proposal -> first gateway decision, pure-data block creations
T2  leader proposal -> last gateway applied, pure-data block creations
T3  leader proposal -> last gateway applied, context block creations
    (includes the deployment run of the VM)
T4  leader proposal -> first gateway applied, normal appends
T5  device submit -> result back at the device, contract calls
T6  first contract call submitted -> last contract call answered (seconds)

Each repetition contributes one sample per metric (the mean over its
transactions for T1-T5).  Reports give the mean and the Student-t 95%
half-width over repetitions.  Measured wall-clock VM time is reported as a
separate ``wall`` component and never mixed into the simulated columns.
"""
from __future__ import annotations

import argparse
import csv
import io
import math
import sys
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from scipy import stats

from .engine import replayer
from .gateway import DivergenceError, NetConfig, RunTrace, run_network
from .model import validate_chain
from .workload import Scenario, WorkloadSpec, build_lanes

METRICS = ("T1", "T2", "T3", "T4", "T5", "T6")
WALL_METRIC = "VM"
CSV_HEADER = ("scenario", "repetition", "metric", "value_ms", "component")
SIM = "sim"
WALL = "wall"
CONFIG = "config"
DEFAULT_SCALE = 0.3
DEFAULT_GATEWAYS = 10
DEFAULT_REPS = 3


class ConfigError(ValueError):
    pass


class ScaleMismatch(ValueError):
    pass


@dataclass
class BenchConfig:
    scenario: Scenario = Scenario.A
    gateways: int = DEFAULT_GATEWAYS
    reps: int = DEFAULT_REPS
    seed: int = 0
    scale: float = DEFAULT_SCALE
    out: Path = Path("bench-out")
    contexts: int = 10
    latency_ms: float = 1.0
    drop_rate: float = 0.0
    trace: bool = False
    verify: bool = True

    def __post_init__(self):
        try:
            if not isinstance(self.scenario, Scenario):
                self.scenario = Scenario(str(self.scenario).upper())
        except ValueError:
            raise ConfigError(f"unknown scenario {self.scenario!r} (choose A, B, C or D)") from None
        if self.reps < 2:
            raise ConfigError("at least 2 repetitions are needed for a confidence interval")
        if self.gateways < 1:
            raise ConfigError("gateways must be at least 1")
        if not self.scale > 0:
            raise ConfigError("scale must be positive")
        if self.latency_ms < 0 or not 0 <= self.drop_rate < 1:
            raise ConfigError("latency must be non-negative and drop_rate in [0, 1)")
        self.out = Path(self.out)

    def net(self, rep: int) -> NetConfig:
        return NetConfig(latency_ns=round(self.latency_ms * 1e6), drop_rate=self.drop_rate,
                         seed=self.rep_seed(rep))

    def rep_seed(self, rep: int) -> int:
        return self.seed * 1000 + rep

    def workload(self) -> WorkloadSpec:
        return WorkloadSpec.for_scenario(self.scenario, self.scale, self.contexts)


_CONFIG_TYPES = {"scenario": str, "gateways": int, "reps": int, "seed": int, "scale": float, "out": Path,
                 "contexts": int, "latency_ms": float, "drop_rate": float, "trace": bool, "verify": bool}


def _coerce(key: str, raw: str):
    kind = _CONFIG_TYPES[key]
    if kind is bool:
        lowered = raw.strip().lower()
        if lowered not in ("1", "0", "true", "false", "yes", "no"):
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
        return lowered in ("1", "true", "yes")
    try:
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def parse_config(text: str, **overrides) -> BenchConfig:
    """Parse ``key = value`` lines (``#`` starts a comment) into a BenchConfig."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, raw = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _CONFIG_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return BenchConfig(**values)


def load_config(path, **overrides) -> BenchConfig:
    return parse_config(Path(path).read_text(), **overrides)


# -- metrics --------------------------------------------------------------

@dataclass
class RepetitionSample:
    sim_ms: dict          # metric -> value (ms)
    wall_vm_ms: float
    counts: dict          # metric -> number of transactions behind it
    t5_max_ms: float


def _mean(values: Sequence[float]) -> float:
    return sum(values) / len(values) if values else float("nan")


def metrics_from_trace(trace: RunTrace) -> RepetitionSample:
    propose: dict[str, int] = {}
    decided: dict[str, list] = defaultdict(list)
    applied: dict[str, list] = defaultdict(list)
    label: dict[str, str] = {}
    submit: dict[str, int] = {}
    reply: dict[str, int] = {}
    vm_wall: list[int] = []
    for rec in trace.records:
        ev = rec.event
        if ev == "propose":
            propose.setdefault(rec.tx, rec.sim_ns)
        elif ev == "decided":
            decided[rec.tx].append(rec.sim_ns)
        elif ev == "applied":
            applied[rec.tx].append(rec.sim_ns)
            if rec.label == "append" and rec.wall_ns.get("vm"):
                vm_wall.append(rec.wall_ns["vm"])
        elif ev == "submit":
            label[rec.tx] = rec.label
            submit.setdefault(rec.tx, rec.sim_ns)
        elif ev == "reply" and rec.ok:
            reply.setdefault(rec.tx, rec.sim_ns)

    def span(kind: str, ends: dict, pick) -> list[float]:
        return [(pick(ends[tx]) - propose[tx]) / 1e6
                for tx, lab in label.items() if lab == kind and tx in propose and ends.get(tx)]

    samples = {
        "T1": span("pd-block", decided, min),
        "T2": span("pd-block", applied, max),
        "T3": span("c-block", applied, max),
        "T4": span("normal", applied, min),
        "T5": [(reply[tx] - submit[tx]) / 1e6 for tx, lab in label.items() if lab == "call" and tx in reply],
    }
    calls = [tx for tx, lab in label.items() if lab == "call" and tx in reply]
    t6 = (max(reply[tx] for tx in calls) - min(submit[tx] for tx in calls)) / 1e6 if calls else float("nan")
    sim = {m: _mean(v) for m, v in samples.items()}
    sim["T6"] = t6
    counts = {m: len(v) for m, v in samples.items()}
    counts["T6"] = len(calls)
    return RepetitionSample(sim, _mean(vm_wall) / 1e6 if vm_wall else 0.0, counts,
                            max(samples["T5"], default=float("nan")))


def confidence(values: Sequence[float], level: float = 0.95) -> tuple[float, float]:
    """Mean and Student-t half-width."""
    n = len(values)
    if n < 2:
        raise ConfigError("confidence interval needs at least 2 samples")
    mean = sum(values) / n
    var = sum((v - mean) ** 2 for v in values) / (n - 1)
    half = stats.t.ppf(0.5 + level / 2, n - 1) * math.sqrt(var / n)
    return mean, float(half)


@dataclass
class MetricsReport:
    """Per-metric mean and 95% half-width; T1-T5 in ms, T6 in seconds."""
    scenario: str
    repetitions: int
    scale: float
    means: dict = field(default_factory=dict)
    halfwidths: dict = field(default_factory=dict)
    wall_vm_ms: tuple = (float("nan"), float("nan"))
    gateways: int = DEFAULT_GATEWAYS
    seed: int = 0

    @classmethod
    def from_rows(cls, scenario: str, rows: Sequence[dict], scale: float, gateways: int = DEFAULT_GATEWAYS,
                  seed: int = 0) -> "MetricsReport":
        per_metric: dict[str, list] = defaultdict(list)
        wall = []
        reps = set()
        for row in rows:
            reps.add(row["repetition"])
            if row["component"] == SIM:
                per_metric[row["metric"]].append(row["value_ms"])
            elif row["component"] == WALL:
                wall.append(row["value_ms"])
        report = cls(scenario, len(reps), scale, gateways=gateways, seed=seed)
        for m in METRICS:
            values = per_metric.get(m, [])
            if m == "T6":
                values = [v / 1000.0 for v in values]
            mean, half = confidence(values) if len(values) >= 2 else (float("nan"), float("nan"))
            report.means[m], report.halfwidths[m] = mean, half
        if len(wall) >= 2:
            report.wall_vm_ms = confidence(wall)
        return report

    def unit(self, metric: str) -> str:
        return "s" if metric == "T6" else "ms"

    def summary(self) -> str:
        lines = [f"scenario {self.scenario}  scale {self.scale:g}  gateways {self.gateways}  "
                 f"repetitions {self.repetitions}  seed {self.seed}",
                 f"{'metric':<8}{'mean':>14}{'+/- 95%':>14}  unit"]
        for m in METRICS:
            lines.append(f"{m:<8}{self.means[m]:>14.4f}{self.halfwidths[m]:>14.4f}  {self.unit(m)}")
        mean, half = self.wall_vm_ms
        lines.append(f"{'VM wall':<8}{mean:>14.4f}{half:>14.4f}  ms per call (measured, not simulated)")
        return "\n".join(lines) + "\n"


# -- CSV ------------------------------------------------------------------

def _fmt(value: float) -> str:
    return "nan" if value != value else repr(round(value, 6))


def write_csv(path, scenario: str, config: BenchConfig, samples: Sequence[RepetitionSample]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(rows_to_csv(scenario, config, samples))


def rows_to_csv(scenario: str, config: BenchConfig, samples: Sequence[RepetitionSample]) -> str:
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(CSV_HEADER)
    out.writerow([scenario, 0, "scale", _fmt(config.scale), CONFIG])
    out.writerow([scenario, 0, "gateways", config.gateways, CONFIG])
    out.writerow([scenario, 0, "seed", config.seed, CONFIG])
    for rep, sample in enumerate(samples, 1):
        for m in METRICS:
            out.writerow([scenario, rep, m, _fmt(sample.sim_ms[m]), SIM])
        out.writerow([scenario, rep, WALL_METRIC, _fmt(sample.wall_vm_ms), WALL])
    return buf.getvalue()


def read_csv(path) -> MetricsReport:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ConfigError(f"{path}: unexpected header {reader.fieldnames}")
        rows, config, scenario = [], {}, None
        for row in reader:
            scenario = row["scenario"]
            if row["component"] == CONFIG:
                config[row["metric"]] = row["value_ms"]
                continue
            rows.append({"repetition": int(row["repetition"]), "metric": row["metric"],
                         "value_ms": float(row["value_ms"]), "component": row["component"]})
    if scenario is None or "scale" not in config:
        raise ConfigError(f"{path}: missing scenario or scale rows")
    return MetricsReport.from_rows(scenario, rows, float(config["scale"]),
                                   int(config.get("gateways", DEFAULT_GATEWAYS)), int(config.get("seed", 0)))


# -- running --------------------------------------------------------------

@dataclass
class ScenarioRun:
    report: MetricsReport
    samples: list
    traces: list
    csv_path: Optional[Path] = None


def run_repetition(config: BenchConfig, rep: int, keep_trace: bool = False):
    spec = config.workload()
    lanes = build_lanes(spec, config.gateways, config.rep_seed(rep))
    trace, cluster = run_network(config.gateways, config.net(rep), lanes)
    if config.verify:
        for gw in cluster.live():
            report = validate_chain(gw.chain, replayer())
            if not report.ok:
                raise DivergenceError(f"gateway {gw.id} holds an invalid chain: {report.violations[:3]}")
    return metrics_from_trace(trace), (trace if keep_trace else None), cluster


def run_scenario(config: BenchConfig, write: bool = True, progress=None) -> ScenarioRun:
    samples, traces = [], []
    for rep in range(1, config.reps + 1):
        sample, trace, _ = run_repetition(config, rep, keep_trace=config.trace)
        samples.append(sample)
        if trace is not None:
            traces.append(trace)
        if progress:
            progress(rep, sample)
    scenario = config.scenario.value
    rows = [{"repetition": rep, "metric": m, "value_ms": s.sim_ms[m], "component": SIM}
            for rep, s in enumerate(samples, 1) for m in METRICS]
    rows += [{"repetition": rep, "metric": WALL_METRIC, "value_ms": s.wall_vm_ms, "component": WALL}
             for rep, s in enumerate(samples, 1)]
    report = MetricsReport.from_rows(scenario, rows, config.scale, config.gateways, config.seed)
    run = ScenarioRun(report, samples, traces)
    if write:
        config.out.mkdir(parents=True, exist_ok=True)
        run.csv_path = config.out / f"scenario_{scenario}.csv"
        write_csv(run.csv_path, scenario, config, samples)
        (config.out / f"scenario_{scenario}_summary.txt").write_text(report.summary())
        for rep, trace in enumerate(traces, 1):
            trace.write_jsonl(config.out / f"scenario_{scenario}_rep{rep}.jsonl")
    return run


# -- comparison and plot data -----------------------------------------------

@dataclass
class Ratio:
    metric: str
    ratio: float
    low: float
    high: float


def compare(report_a: MetricsReport, report_b: MetricsReport) -> list[Ratio]:
    """``b / a`` per metric, with bounds from the two confidence intervals."""
    if not math.isclose(report_a.scale, report_b.scale):
        raise ScaleMismatch(f"scale {report_a.scale:g} vs {report_b.scale:g}")
    out = []
    for m in METRICS:
        ma, ha = report_a.means[m], report_a.halfwidths[m]
        mb, hb = report_b.means[m], report_b.halfwidths[m]
        if not ma or ma != ma or mb != mb:
            out.append(Ratio(m, float("nan"), float("nan"), float("nan")))
            continue
        ratio = mb / ma
        low = (mb - hb) / (ma + ha) if ma + ha > 0 else float("nan")
        high = (mb + hb) / (ma - ha) if ma - ha > 0 else float("inf")
        out.append(Ratio(m, ratio, low, high))
    return out


def format_ratios(a: MetricsReport, b: MetricsReport, ratios: Iterable[Ratio]) -> str:
    lines = [f"{b.scenario} / {a.scenario}  (scale {a.scale:g})",
             f"{'metric':<8}{'ratio':>10}{'low':>10}{'high':>10}"]
    for r in ratios:
        lines.append(f"{r.metric:<8}{r.ratio:>10.4f}{r.low:>10.4f}{r.high:>10.4f}")
    return "\n".join(lines) + "\n"


def export_plot_data(reports: Sequence[MetricsReport]) -> str:
    """Plot-ready CSV: a metric label column, then one column of means per scenario."""
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["metric"] + [r.scenario for r in reports])
    if reports:
        for m in METRICS:
            out.writerow([m] + [_fmt(r.means[m]) for r in reports])
    return buf.getvalue()


# -- CLI --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bench", description="Run and compare context-chain benchmark scenarios.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario and write CSV plus a summary")
    run.add_argument("--config", help="key=value configuration file; flags override it")
    run.add_argument("--scenario", choices=[s.value for s in Scenario])
    run.add_argument("--gateways", type=int)
    run.add_argument("--reps", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--scale", type=float)
    run.add_argument("--out")
    run.add_argument("--trace", action="store_true", default=None, help="also write JSON-lines traces")

    cmp_ = sub.add_parser("compare", help="ratio table of two scenario CSVs (second over first)")
    cmp_.add_argument("first")
    cmp_.add_argument("second")

    exp = sub.add_parser("export", help="collect scenario CSVs into plot-ready data")
    exp.add_argument("--plots", action="store_true", required=True)
    exp.add_argument("--dir", default="bench-out", help="directory holding scenario_*.csv")
    exp.add_argument("--out", help="output file (default: DIR/plot_data.csv)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            overrides = dict(scenario=args.scenario, gateways=args.gateways, reps=args.reps, seed=args.seed,
                             scale=args.scale, out=args.out, trace=args.trace)
            if args.config:
                config = load_config(args.config, **overrides)
            else:
                config = BenchConfig(**{k: v for k, v in overrides.items() if v is not None})

            def progress(rep, sample):
                print(f"repetition {rep}: T6 = {sample.sim_ms['T6'] / 1000:.4f} s", file=sys.stderr)

            result = run_scenario(config, progress=progress)
            sys.stdout.write(result.report.summary())
            print(f"wrote {result.csv_path}")
        elif args.command == "compare":
            a, b = read_csv(args.first), read_csv(args.second)
            sys.stdout.write(format_ratios(a, b, compare(a, b)))
        else:
            directory = Path(args.dir)
            reports = [read_csv(p) for p in sorted(directory.glob("scenario_*.csv"))]
            target = Path(args.out) if args.out else directory / "plot_data.csv"
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(export_plot_data(reports))
            print(f"wrote {target} ({len(reports)} scenarios)")
    except (ConfigError, ScaleMismatch, DivergenceError) as exc:
        print(f"bench: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
