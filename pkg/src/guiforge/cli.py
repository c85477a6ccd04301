"""``forge`` command line entry point.

Exit codes: 0 success, 1 validation error, 2 transport error, 64 unknown
subcommand. Every run writes a JSON report (effective config plus counts)
and prints a one-line summary to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shlex
import subprocess
import sys
import tempfile
import time
from contextlib import ExitStack
from pathlib import Path
from typing import Any, Callable, Sequence

from . import __version__
from .agent_eval import DEFAULT_F1_THRESHOLD, STRATEGIES, eval_trajectories, load_steps
from .clients import ClientConfig, CoordScale, HttpGrounder, HttpPlanner, TransportError
from .data_model import TaskType, ValidationError, dump_jsonl, read_records, read_samples
from .dedup import dedup_samples
from .denoise import (
    DEFAULT_OCR_THRESHOLD,
    DenoiseStats,
    ExternalRecognizer,
    NullRecognizer,
    OracleRecognizer,
    denoise_record,
)
from .grounding_eval import RunError, eval_benchmarks, load_benchmark
from .ingestion import expand_records, parse_records
from .latency_bench import DEFAULT_TRIALS, DEFAULT_WARMUP, EndpointUnreachable, SSEEndpoint, run_bench, select_median_prompt
from .refine import (
    CoarsePolicy,
    RefinePlan,
    SweepResult,
    build_ratio_sweep,
    coarse_filter,
    compute_stats,
    extract_subset,
    run_sweep,
    select_core_set,
)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("guiforge")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_TRANSPORT = 2
EXIT_USAGE = 64


class UsageError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # noqa: D401
        code = EXIT_USAGE if "invalid choice" in message or "required: command" in message else EXIT_VALIDATION
        raise UsageError(f"{self.prog}: error: {message}\n\n{self.format_usage()}", code)


# ---------------------------------------------------------------------------
# option resolution: flag > env > config file > default

_ENV = {
    "planner": "FORGE_PLANNER_URL",
    "grounder": "FORGE_GROUNDER_URL",
    "token": "FORGE_API_TOKEN",
}


class Settings:
    def __init__(self, args: argparse.Namespace, config: dict[str, Any], section: str):
        self.args = args
        self.config = config
        self.section = section
        self.effective: dict[str, Any] = {}

    def _from_config(self, name: str) -> Any:
        node: Any = self.config
        for part in self.section.split("."):
            node = node.get(part, {}) if isinstance(node, dict) else {}
        for table in (node, self.config):
            if isinstance(table, dict):
                for key in (name, name.replace("_", "-")):
                    if key in table and not isinstance(table[key], dict):
                        return table[key]
        return None

    def get(self, name: str, default: Any = None, required: bool = False, cast: Callable | None = None) -> Any:
        value = getattr(self.args, name, None)
        if value is None and name in _ENV:
            value = os.environ.get(_ENV[name]) or None
        if value is None:
            value = self._from_config(name)
        if value is None:
            value = default
        if value is None and required:
            raise ValidationError(f"missing required option --{name.replace('_', '-')}")
        if value is not None and cast is not None:
            value = cast(value)
        if name != "token":
            self.effective[name] = value
        return value


def _open_in(path: str):
    return sys.stdin if path == "-" else open(path, encoding="utf-8")


def _write_samples(path: str, samples) -> int:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fp:
        return dump_jsonl(samples, fp)


def _read_samples_from(paths: Sequence[str]):
    out = []
    for p in paths:
        with _open_in(p) as fp:
            out.extend(read_samples(fp))
    return out


def _workers(s: Settings) -> int:
    return s.get("workers", default=os.cpu_count() or 1, cast=int)


# ---------------------------------------------------------------------------
# commands; each returns (report dict, one-line summary, report is primary output)


def cmd_ingest(s: Settings):
    inputs = s.get("input", required=True)
    source = s.get("source")
    reg = not s.get("no_reg", default=False)
    widgets = not s.get("no_widget_listing", default=False)
    era_cutoff = s.get("era_cutoff", cast=int)
    out = s.get("out", required=True)
    records, n_malformed = [], 0
    for path in inputs:
        with _open_in(path) as fp:
            parsed = parse_records(fp, source)
        records.extend(parsed.records)
        n_malformed += parsed.n_malformed
    samples, stats = expand_records(records, reg=reg, widget_listing=widgets, era_cutoff=era_cutoff)
    _write_samples(out, samples)
    report = {
        "n_lines": len(records) + n_malformed,
        "n_records": len(records),
        "n_malformed_lines": n_malformed,
        "n_elements": stats.n_elements,
        "n_bad_target_elements": stats.n_bad_target,
        "n_samples": stats.n_samples,
        "per_task_type": stats.per_task_type,
        "reconciled": stats.n_samples == len(samples),
    }
    return report, f"ingest: {len(records)} records -> {len(samples)} samples ({n_malformed} malformed lines)"


def _make_recognizer(ocr: str, records, stack: ExitStack):
    if ocr == "none":
        return None
    if ocr == "oracle":
        return OracleRecognizer(records)
    if ocr == "null":
        return NullRecognizer()
    if ocr.startswith("external:"):
        return stack.enter_context(ExternalRecognizer(ocr[len("external:"):]))
    raise ValidationError(f"unknown --ocr value {ocr!r}")


def cmd_denoise(s: Settings):
    path = s.get("input", required=True)
    out = s.get("out", required=True)
    ocr = s.get("ocr", default="none")
    threshold = s.get("ocr_threshold", default=DEFAULT_OCR_THRESHOLD, cast=float)
    with _open_in(path) as fp:
        records = read_records(fp)
    total = DenoiseStats()
    cleaned = []
    with ExitStack() as stack:
        recognizer = _make_recognizer(ocr, records, stack)
        for rec in records:
            rec2, st = denoise_record(rec, recognizer, threshold)
            cleaned.append(rec2)
            total = total + st
    _write_samples(out, cleaned)
    n_in = sum(len(r.elements) for r in records)
    report = {"n_records": len(records), **total.to_dict(), "reconciled": total.n_input == n_in}
    return report, f"denoise: kept {total.n_kept} of {n_in} elements"


def cmd_dedup(s: Settings):
    path = s.get("input", required=True)
    out = s.get("out", required=True)
    seed = s.get("seed", default=0, cast=int)
    samples = _read_samples_from([path])
    kept, stats = dedup_samples(samples, seed)
    _write_samples(out, kept)
    report = {**stats.to_dict(), "reconciled": stats.kept + stats.dropped == stats.n_input}
    return report, f"dedup: kept {stats.kept} of {stats.n_input} samples in {stats.groups} groups"


def cmd_refine_coarse(s: Settings):
    path = s.get("input", required=True)
    out = s.get("out", required=True)
    policy = CoarsePolicy(
        drop_reg=bool(s.get("drop_reg", default=False)),
        drop_task_types=frozenset(TaskType(t) for t in s.get("drop_task_types", default=[])),
        drop_outdated=bool(s.get("drop_outdated", default=False)),
        outdated_sources=frozenset(s.get("outdated_sources", default=[])),
        era_cutoff_year=s.get("era_cutoff", cast=int),
    )
    samples = _read_samples_from([path])
    kept, stats = coarse_filter(samples, policy)
    _write_samples(out, kept)
    report = {
        "policy": policy.to_dict(),
        **stats.to_dict(),
        "reconciled": stats.n_kept == len(kept) and stats.n_input == len(samples),
    }
    return report, f"coarse: kept {stats.n_kept} of {stats.n_input} samples"


def cmd_refine_plans(s: Settings):
    sources = s.get("sources", required=True)
    task_types = [TaskType(t) for t in s.get("task_types", required=True)]
    ratios = [float(r) for r in s.get("ratios", required=True)]
    plans = build_ratio_sweep(sources, task_types, ratios)
    out = s.get("out", required=True)
    Path(out).write_text(json.dumps([p.to_dict() for p in plans], indent=2) + "\n", encoding="utf-8")
    return {"n_plans": len(plans)}, f"plans: wrote {len(plans)} one-factor plans"


def cmd_refine_subset(s: Settings):
    path = s.get("input", required=True)
    out = s.get("out", required=True)
    seed = s.get("seed", default=0, cast=int)
    plan = RefinePlan.from_dict(json.loads(Path(s.get("plan", required=True)).read_text(encoding="utf-8")))
    samples = _read_samples_from([path])
    subset = extract_subset(samples, plan, seed)
    _write_samples(out, subset)
    report = {"plan": plan.to_dict(), "n_input": len(samples), "n_kept": len(subset), "n_dropped": len(samples) - len(subset)}
    return report, f"subset: kept {len(subset)} of {len(samples)} samples"


def subprocess_evaluator(command: str, timeout: float | None = None):
    """Evaluator that writes the subset to a temp JSONL and runs ``command <path>``.

    The command must print a JSON object of benchmark -> metric on stdout.
    """
    argv = shlex.split(command)

    def evaluate(subset):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "subset.jsonl")
            with open(path, "w", encoding="utf-8") as fp:
                dump_jsonl(subset, fp)
            proc = subprocess.run(argv + [path], capture_output=True, text=True, timeout=timeout)
        if proc.returncode != 0:
            raise RuntimeError(f"evaluator exited {proc.returncode}: {proc.stderr.strip()[:200]}")
        return json.loads(proc.stdout)

    return evaluate


def cmd_refine_sweep(s: Settings):
    path = s.get("input", required=True)
    plans_path = s.get("plans", required=True)
    evaluator = s.get("evaluator", required=True)
    seed = s.get("seed", default=0, cast=int)
    workers = _workers(s)
    plans = [RefinePlan.from_dict(d) for d in json.loads(Path(plans_path).read_text(encoding="utf-8"))]
    samples = _read_samples_from([path])
    results = run_sweep(samples, plans, subprocess_evaluator(evaluator), seed=seed, workers=workers)
    n_failed = sum(r.failed for r in results)
    report = {"n_plans": len(plans), "n_failed": n_failed, "results": [r.to_dict() for r in results]}
    return report, f"sweep: evaluated {len(plans)} plans ({n_failed} failed)"


def cmd_refine_select(s: Settings):
    path = s.get("input", required=True)
    sweep_path = s.get("sweep", required=True)
    out = s.get("out", required=True)
    seed = s.get("seed", default=0, cast=int)
    major = s.get("major_sources")
    doc = json.loads(Path(sweep_path).read_text(encoding="utf-8"))
    if isinstance(doc, dict):
        doc = doc.get("report", doc)["results"]
    results = [SweepResult.from_dict(d) for d in doc]
    samples = _read_samples_from([path])
    plan, core = select_core_set(samples, results, major, seed)
    _write_samples(out, core)
    report = {"plan": plan.to_dict(), "n_input": len(samples), "n_kept": len(core), "n_dropped": len(samples) - len(core)}
    return report, f"select: core set of {len(core)} from {len(samples)} samples"


def cmd_stats(s: Settings):
    samples = _read_samples_from(s.get("input", required=True))
    stats = compute_stats(samples)
    return stats, f"stats: {stats['n_samples']} samples"


def _client_config(s: Settings, kind: str) -> ClientConfig:
    return ClientConfig(
        url=s.get(kind, required=True),
        timeout=s.get("timeout", default=30.0, cast=float),
        retries=s.get("retries", default=2, cast=int),
        backoff=s.get("backoff", default=0.5, cast=float),
        token=s.get("token"),
        image_mode=s.get("image_mode", default="base64"),
    )


def cmd_eval_grounding(s: Settings):
    paths = s.get("benchmark", required=True)
    scale = CoordScale(s.get("scale", default="thousand"))
    workers = _workers(s)
    benchmarks = {}
    for p in paths:
        with _open_in(p) as fp:
            benchmarks[Path(p).stem] = load_benchmark(fp)
    with HttpGrounder(_client_config(s, "grounder")) as grounder:
        result = eval_benchmarks(benchmarks, grounder, workers=workers, scale=scale)
    parts = ", ".join(f"{n}={r['accuracy_percent']:.2f}" for n, r in result["benchmarks"].items())
    return result, f"grounding accuracy: {parts}; average {result['average_accuracy_percent']:.2f}"


def cmd_eval_agent(s: Settings):
    path = s.get("steps", required=True)
    strategy = s.get("strategy", default="two-stage")
    re_mode = s.get("re_mode", default="intent")
    threshold = s.get("f1_threshold", default=DEFAULT_F1_THRESHOLD, cast=float)
    scale = CoordScale(s.get("scale", default="thousand"))
    workers = _workers(s)
    with _open_in(path) as fp:
        steps = load_steps(fp)
    with ExitStack() as stack:
        planner = stack.enter_context(HttpPlanner(_client_config(s, "planner")))
        grounder = None
        if strategy == "two-stage":
            grounder = stack.enter_context(HttpGrounder(_client_config(s, "grounder")))
        report = eval_trajectories(
            steps, strategy, planner, grounder, re_mode=re_mode, f1_threshold=threshold, workers=workers, scale=scale
        )
    if report.outcomes and all(o.status == "error" for o in report.outcomes):
        raise RunError(f"all {report.n_steps} steps failed with transport errors")
    return report.to_dict(), f"agent ({strategy}): Step SR {report.step_sr:.2f} over {report.n_steps} steps"


def cmd_bench_latency(s: Settings):
    url = s.get("endpoint", required=True)
    image = s.get("image", required=True)
    prompt = s.get("prompt")
    if prompt is None and s.get("prompt_file") is not None:
        prompt = Path(s.get("prompt_file")).read_text(encoding="utf-8").strip()
    if prompt is None and s.get("prompts_from") is not None:
        with _open_in(s.get("prompts_from")) as fp:
            prompt = select_median_prompt([b.prompt for b in load_benchmark(fp)])
    if prompt is None:
        raise ValidationError("missing required option --prompt-file (or --prompt / --prompts-from)")
    trials = s.get("trials", default=DEFAULT_TRIALS, cast=int)
    warmup = s.get("warmup", default=DEFAULT_WARMUP, cast=int)
    endpoint = SSEEndpoint(url, timeout=s.get("timeout", default=60.0, cast=float), image_mode=s.get("image_mode", default="uri"))
    try:
        summary = run_bench(endpoint, image, prompt, n_trials=trials, warmup=warmup)
    finally:
        endpoint.close()
    report = summary.to_dict()
    report["prompt_chars"] = len(prompt)
    ttft, tpot = report["ttft_s"]["mean"], report["tpot_s"]["mean"]
    fmt = lambda v: "n/a" if v is None else f"{1000 * v:.2f} ms"  # noqa: E731
    return report, f"latency: TTFT {fmt(ttft)}, TPOT {fmt(tpot)} over {summary.n_trials - summary.n_failed} trials"


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser, out: bool = True, seed: bool = False, workers: bool = False) -> None:
    if out:
        p.add_argument("--out", help="output path")
    p.add_argument("--report", help="JSON report path")
    if seed:
        p.add_argument("--seed", type=int, help="RNG seed (default 0)")
    if workers:
        p.add_argument("--workers", type=int, help="parallel workers (default: core count)")


def _client_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--retries", type=int, help="retries per request (default 2)")
    p.add_argument("--timeout", type=float, help="per-request timeout in seconds")
    p.add_argument("--backoff", type=float, help="initial backoff in seconds (doubles)")
    p.add_argument("--image-mode", choices=["base64", "uri"], help="how images are sent")
    p.add_argument("--scale", choices=[c.value for c in CoordScale], help="scale of model coordinates > 1")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="forge", description="GUI grounding data curation and evaluation toolkit")
    parser.add_argument("--version", action="version", version=f"forge {__version__}")
    parser.add_argument("--config", help="TOML config file")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    p = sub.add_parser("ingest", help="expand GUI metadata records into samples")
    p.add_argument("--input", nargs="+")
    p.add_argument("--source")
    p.add_argument("--no-reg", action="store_true", default=None)
    p.add_argument("--no-widget-listing", action="store_true", default=None)
    p.add_argument("--era-cutoff", type=int, help="records with an earlier era are flagged outdated")
    _common(p)
    p.set_defaults(func=cmd_ingest, section="ingest")

    p = sub.add_parser("denoise", help="drop blank/invisible, out-of-image and OCR-mismatched elements")
    p.add_argument("--input")
    p.add_argument("--ocr", help="none | oracle | null | external:<cmd>")
    p.add_argument("--ocr-threshold", type=float)
    _common(p)
    p.set_defaults(func=cmd_denoise, section="denoise")

    p = sub.add_parser("dedup", help="keep one sample per (discretized box, cleaned RE, task) group")
    p.add_argument("--input")
    _common(p, seed=True)
    p.set_defaults(func=cmd_dedup, section="dedup")

    refine = sub.add_parser("refine", help="progressive data refinement").add_subparsers(
        dest="refine_command", metavar="stage", required=True
    )
    p = refine.add_parser("coarse", help="drop REG / task types / outdated GUIs")
    p.add_argument("--input")
    p.add_argument("--drop-reg", action="store_true", default=None)
    p.add_argument("--drop-task-types", nargs="+", choices=[t.value for t in TaskType])
    p.add_argument("--drop-outdated", action="store_true", default=None)
    p.add_argument("--outdated-sources", nargs="+")
    p.add_argument("--era-cutoff", type=int)
    _common(p)
    p.set_defaults(func=cmd_refine_coarse, section="refine.coarse")

    p = refine.add_parser("plans", help="write a one-factor ratio sweep")
    p.add_argument("--sources", nargs="+")
    p.add_argument("--task-types", nargs="+", choices=[t.value for t in TaskType])
    p.add_argument("--ratios", nargs="+", type=float)
    _common(p)
    p.set_defaults(func=cmd_refine_plans, section="refine.plans")

    p = refine.add_parser("subset", help="extract the subset defined by one plan")
    p.add_argument("--input")
    p.add_argument("--plan")
    _common(p, seed=True)
    p.set_defaults(func=cmd_refine_subset, section="refine.subset")

    p = refine.add_parser("sweep", help="evaluate every plan with an external evaluator")
    p.add_argument("--input")
    p.add_argument("--plans")
    p.add_argument("--evaluator", help="command; receives the subset path, prints a JSON metric map")
    _common(p, seed=True, workers=True)
    p.set_defaults(func=cmd_refine_sweep, section="refine.sweep", report_is_output=True)

    p = refine.add_parser("select", help="compose the best ratios into the core set")
    p.add_argument("--input")
    p.add_argument("--sweep")
    p.add_argument("--major-sources", nargs="+")
    _common(p, seed=True)
    p.set_defaults(func=cmd_refine_select, section="refine.select")

    p = sub.add_parser("stats", help="task/source composition of a sample file")
    p.add_argument("--input", nargs="+")
    _common(p)
    p.set_defaults(func=cmd_stats, section="stats", report_is_output=True)

    ev = sub.add_parser("eval", help="model evaluation").add_subparsers(dest="eval_command", metavar="kind", required=True)
    p = ev.add_parser("grounding", help="point-in-box grounding accuracy")
    p.add_argument("--benchmark", nargs="+")
    p.add_argument("--grounder", help="grounder URL (env FORGE_GROUNDER_URL)")
    _client_flags(p)
    _common(p, workers=True)
    p.set_defaults(func=cmd_eval_grounding, section="eval.grounding", report_is_output=True)

    p = ev.add_parser("agent", help="offline step success rate")
    p.add_argument("--steps")
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--planner", help="planner URL (env FORGE_PLANNER_URL)")
    p.add_argument("--grounder", help="grounder URL (env FORGE_GROUNDER_URL)")
    p.add_argument("--re-mode", choices=["intent", "functionality"])
    p.add_argument("--f1-threshold", type=float)
    _client_flags(p)
    _common(p, workers=True)
    p.set_defaults(func=cmd_eval_agent, section="eval.agent", report_is_output=True)

    bench = sub.add_parser("bench", help="latency benchmarks").add_subparsers(
        dest="bench_command", metavar="kind", required=True
    )
    p = bench.add_parser("latency", help="TTFT/TPOT of a streaming endpoint")
    p.add_argument("--endpoint")
    p.add_argument("--image")
    p.add_argument("--prompt-file")
    p.add_argument("--prompt")
    p.add_argument("--prompts-from", help="benchmark JSONL; uses the median-length prompt")
    p.add_argument("--trials", type=int, help=f"scored trials (default {DEFAULT_TRIALS})")
    p.add_argument("--warmup", type=int, help=f"discarded warmup trials (default {DEFAULT_WARMUP})")
    p.add_argument("--timeout", type=float)
    p.add_argument("--image-mode", choices=["base64", "uri"])
    _common(p)
    p.set_defaults(func=cmd_bench_latency, section="bench.latency", report_is_output=True)
    return parser


def _load_config(path: str | None) -> dict[str, Any]:
    if not path:
        return {}
    with open(path, "rb") as fp:
        return tomllib.load(fp)


def _emit_report(args: argparse.Namespace, s: Settings, report: dict[str, Any], elapsed: float) -> None:
    doc = {
        "command": s.section.replace(".", " "),
        "config": s.effective,
        "elapsed_s": round(elapsed, 6),
        "report": report,
    }
    text = json.dumps(doc, indent=2, sort_keys=False, default=str) + "\n"
    out = getattr(args, "out", None)
    target = args.report
    if target is None and getattr(args, "report_is_output", False):
        target = out
    if target is None and out:
        target = out + ".report.json"
    if target is None:
        sys.stdout.write(text)
    else:
        Path(target).parent.mkdir(parents=True, exist_ok=True)
        Path(target).write_text(text, encoding="utf-8")


def dispatch(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return exc.code
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        config = _load_config(args.config)
        settings = Settings(args, config, args.section)
        t0 = time.perf_counter()
        report, summary = args.func(settings)
        _emit_report(args, settings, report, time.perf_counter() - t0)
    except (TransportError, RunError, EndpointUnreachable) as exc:
        sys.stderr.write(f"forge: transport error: {exc}\n")
        return EXIT_TRANSPORT
    except (ValueError, KeyError, OSError, tomllib.TOMLDecodeError) as exc:
        sys.stderr.write(f"forge: error: {exc}\n")
        return EXIT_VALIDATION
    sys.stderr.write(summary + "\n")
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
