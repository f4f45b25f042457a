"""Command-line surface: analyze, memory, run, compare.

Flags mirror config-file keys (JSON); explicit flags override the file.
Exit codes: 0 success, 2 input error, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import importlib.resources
import json
import sys
from pathlib import Path

from .conversation import (
    decode_text,
    load_attention_trace_file,
    parse_conversation,
    question_texts_from_doc,
)
from .costs import CostModel
from .engine import Model, ModelConfig
from .errors import ConfigError, InputError, InvariantError, RoundKVError
from .pipeline import (
    RoundPipeline,
    analysis_round_index,
    calibrate_watershed,
    capture_all_layers,
    layer_distributions,
)
from .reports import (
    dumps_report,
    make_report,
    write_cost_curves_csv,
    write_ledger_csv,
    write_report,
)
from .selection import SelectionPolicy
from .stats import (
    SEGMENT_ANSWER,
    SEGMENT_QUESTION,
    detect_watershed,
    kl_curve,
    mean_curve,
    spearman_qa,
    write_curve_csv,
    write_distribution_csv,
)
from .store import footprint_report, memory_ratio, save_percent

STRATEGY_NAMES = {
    "fixed": "fixed",
    "top": "top_percent",
    "adaptive": "adaptive",
    "all": "all",
    "token": "token_baseline",
    "baseline": "baseline",
}

DEFAULTS = {
    "model_layers": 6,
    "heads": 4,
    "d_model": 32,
    "seed": 42,
    "strategy": "top",
    "v": 0.1,
    "fraction": 0.10,
    "kappa": 1.0,
    "min_rounds": 1,
    "lw": None,
    "calibrate": None,
    "drop_window": None,  # None disables dropping
    "drop_protect": 2,
    "max_decode_steps": 16,
    "out": None,
    "criterion": "max_drop",
    "tau": 0.1,
    "k": 0.0,
    "t": 1.0,
    "batch": 1,
    "seq": 1024,
    "hidden": 896,
    "policies": None,
}


def reference_rows() -> list[dict]:
    data = importlib.resources.files("roundkv.data").joinpath("model_watershed.json")
    return json.loads(data.read_text(encoding="utf-8"))["rows"]


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON config file; flags override it")
    parser.add_argument("--out", type=Path, help="output directory for report + CSV sidecars")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--model-layers", type=int, dest="model_layers")
    parser.add_argument("--heads", type=int)
    parser.add_argument("--d-model", type=int, dest="d_model")


def _add_policy_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--strategy", choices=sorted(STRATEGY_NAMES))
    parser.add_argument("--v", type=float, help="fixed-strategy mass threshold")
    parser.add_argument("--fraction", type=float, help="top-strategy kept fraction of rounds")
    parser.add_argument("--kappa", type=float, help="adaptive-strategy std multiplier")
    parser.add_argument("--min-rounds", type=int, dest="min_rounds")
    parser.add_argument("--lw", type=int, help="watershed layer override")
    parser.add_argument("--calibrate", type=Path,
                        help="directory of conversations to calibrate the watershed on")
    parser.add_argument("--drop-window", type=float, dest="drop_window",
                        help="turns of inactivity before an upper block is dropped")
    parser.add_argument("--drop-protect", type=int, dest="drop_protect")
    parser.add_argument("--max-decode-steps", type=int, dest="max_decode_steps")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="roundkv",
        description="Round-granularity KV cache analysis, serving simulation, and reports",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_an = sub.add_parser("analyze", help="distribution / watershed analysis of conversations or traces")
    p_an.add_argument("inputs", nargs="+", type=Path,
                      help="conversation JSON files or *.trace.json headers")
    p_an.add_argument("--criterion", choices=["max_drop", "threshold"])
    p_an.add_argument("--tau", type=float, help="threshold-criterion cutoff in nats")
    _add_common_flags(p_an)

    p_mem = sub.add_parser("memory", help="closed-form KV footprint model")
    p_mem.add_argument("--lw", type=int, help="watershed layer (omit for reference table only)")
    p_mem.add_argument("--k", type=float, help="kept rounds K")
    p_mem.add_argument("--t", type=float, help="total rounds T")
    p_mem.add_argument("--batch", type=int)
    p_mem.add_argument("--seq", type=int)
    p_mem.add_argument("--hidden", type=int)
    _add_common_flags(p_mem)

    p_run = sub.add_parser("run", help="serve a conversation through the selective pipeline")
    p_run.add_argument("conversation", type=Path)
    _add_policy_flags(p_run)
    _add_common_flags(p_run)

    p_cmp = sub.add_parser("compare", help="paired policy runs over one conversation")
    p_cmp.add_argument("conversation", type=Path)
    p_cmp.add_argument("--policies", help="comma-separated subset of "
                                          "baseline,all,top,fixed,adaptive,token")
    _add_policy_flags(p_cmp)
    _add_common_flags(p_cmp)

    return parser


def effective_options(args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags."""
    opts = dict(DEFAULTS)
    config_path = getattr(args, "config", None)
    if config_path is not None:
        try:
            loaded = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        opts.update(loaded)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            opts[key] = value
    return opts


def _model(opts: dict) -> Model:
    return Model(ModelConfig(
        num_layers=opts["model_layers"],
        num_heads=opts["heads"],
        d_model=opts["d_model"],
        rng_seed=opts["seed"],
    ))


def _load_corpus(directory: Path) -> list:
    paths = sorted(Path(directory).glob("*.json"))
    if not paths:
        raise ConfigError(f"no *.json conversations in {directory}")
    return [parse_conversation(p.read_bytes()) for p in paths]


def _resolve_watershed(opts: dict, model: Model) -> int:
    has_lw = opts["lw"] is not None
    has_cal = opts["calibrate"] is not None
    if has_lw == has_cal:
        raise ConfigError("provide exactly one of --lw or --calibrate")
    if has_lw:
        return opts["lw"]
    corpus = _load_corpus(opts["calibrate"])
    return calibrate_watershed(model, corpus, criterion=opts["criterion"],
                               tau=opts["tau"]).layer


def _build_pipeline(opts: dict, model: Model, watershed: int,
                    strategy: str) -> RoundPipeline:
    kind = STRATEGY_NAMES.get(strategy)
    if kind is None:
        raise ConfigError(f"unknown strategy {strategy!r}")
    window = opts["drop_window"] if opts["drop_window"] is not None else float("inf")
    if kind == "baseline":
        return RoundPipeline.baseline(model, watershed, cost_model=CostModel())
    if kind == "token_baseline":
        return RoundPipeline(model, watershed, mode="token", cost_model=CostModel())
    policy = SelectionPolicy(
        kind=kind, v=opts["v"], fraction=opts["fraction"],
        kappa=opts["kappa"], min_rounds=opts["min_rounds"],
    )
    return RoundPipeline(
        model, watershed, policy=policy, cost_model=CostModel(),
        drop_window=window, drop_protect=opts["drop_protect"],
    )


# -- analyze -------------------------------------------------------------------


def _analyze_one(path: Path, opts: dict, model_box: list) -> dict:
    """Distributions, rank correlations, and the KL curve for one input."""
    if path.name.endswith(".trace.json"):
        trace = load_attention_trace_file(path)
        rounds, matrices = trace.rounds, list(trace.matrices)
        source = "trace"
    else:
        conv = parse_conversation(path.read_bytes())
        if not model_box:
            model_box.append(_model(opts))
        rounds = conv.rounds
        source = "conversation"
        n_check = analysis_round_index(conv)
        if n_check is None:
            return {"name": path.name, "source": source, "skipped": True,
                    "reason": "no prior completed round to analyze"}
        captures = capture_all_layers(model_box[0], conv)
        matrices = [captures[l] for l in range(len(captures))]

    completed = [r for r in rounds if r.completed]
    inflight = len(rounds) > len(completed)
    if inflight and len(completed) >= 1:
        n = len(rounds) - 1
    elif len(completed) >= 2:
        n = len(completed) - 1
    else:
        return {"name": path.name, "source": source, "skipped": True,
                "reason": "no prior completed round to analyze"}

    pq = layer_distributions(matrices, rounds, n, SEGMENT_QUESTION)
    pa = None
    if rounds[n].completed:
        pa = layer_distributions(matrices, rounds, n, SEGMENT_ANSWER)
    curve = kl_curve([d.masses for d in pq])
    entry = {
        "name": path.name,
        "source": source,
        "skipped": False,
        "layers": len(matrices),
        "analysis_round": n,
        "kl_curve": [float(x) for x in curve.values],
        "pq": [[float(m) for m in d.masses] for d in pq],
    }
    if pa is not None:
        entry["pa"] = [[float(m) for m in d.masses] for d in pa]
        entry["spearman_qa"] = [
            spearman_qa(q.masses, a.masses) for q, a in zip(pq, pa)
        ]
    return entry, pq, pa, curve


def cmd_analyze(args: argparse.Namespace) -> int:
    opts = effective_options(args)
    entries, curves, all_dists = [], [], []
    model_box: list = []
    for path in args.inputs:
        result = _analyze_one(Path(path), opts, model_box)
        if isinstance(result, dict):  # skipped
            entries.append(result)
            continue
        entry, pq, pa, curve = result
        entries.append(entry)
        curves.append(curve)
        all_dists.extend(pq)
        if pa:
            all_dists.extend(pa)
    if not curves:
        raise InputError("no input with at least one prior completed round")
    watershed = detect_watershed(curves, criterion=opts["criterion"], tau=opts["tau"])
    report = make_report("analyze", opts["seed"], {
        "inputs": entries,
        "kl_curve": [float(x) for x in watershed.curve.values],
        "watershed": watershed.layer,
        "criterion": watershed.criterion,
        "corpus_size": watershed.corpus_size,
    })
    _emit(report, opts, "analyze_report.json")
    if opts["out"] is not None:
        out = Path(opts["out"])
        write_curve_csv(out / "kl_curve.csv", mean_curve(curves))
        write_distribution_csv(out / "distributions.csv", all_dists)
    return 0


# -- memory --------------------------------------------------------------------


def cmd_memory(args: argparse.Namespace) -> int:
    opts = effective_options(args)
    layers = opts["model_layers"]
    rows = [
        {**row, "computed_save_percent": save_percent(row["layers"], row["watershed"])}
        for row in reference_rows()
    ]
    payload = {
        "params": {
            "layers": layers, "lw": opts["lw"], "k": opts["k"], "t": opts["t"],
            "batch": opts["batch"], "seq": opts["seq"], "hidden": opts["hidden"],
        },
        "reference_rows": rows,
    }
    if opts["lw"] is not None:
        ratio = memory_ratio(layers, opts["lw"], opts["k"], opts["t"])
        fp = footprint_report(
            opts["batch"], opts["seq"], opts["hidden"], layers, opts["lw"],
            opts["k"], opts["t"],
        )
        payload["ratio"] = ratio
        payload["save_percent_at_k0"] = save_percent(layers, opts["lw"])
        payload["footprint"] = fp
    report = make_report("memory", opts["seed"], payload)
    _emit(report, opts, "memory_report.json")
    return 0


# -- run -----------------------------------------------------------------------


def _turn_row(result) -> dict:
    m = result.metrics
    row = {
        "round": m.round_index,
        "answer_text": decode_text(result.answer_ids),
        "answer_tokens": len(result.answer_ids),
        "kept": list(m.kept),
        "K": m.K,
        "selection_invocations": m.selection_invocations,
        "upper_h2d_events": m.upper_h2d_events,
        "upper_h2d_bytes": m.upper_h2d_bytes,
        "lower_h2d_events": m.lower_h2d_events,
        "lower_h2d_bytes": m.lower_h2d_bytes,
        "d2h_events": m.d2h_events,
        "d2h_bytes": m.d2h_bytes,
        "device_used_peak": m.device_used_peak,
        "hist_tokens": m.hist_tokens,
        "hist_tokens_attended": m.hist_tokens_attended,
        "decode_steps": m.decode_steps,
        "total_cost_us": m.total_cost_us,
        "dropped_rounds": list(m.dropped_rounds),
    }
    if m.token_stats is not None:
        row["token_stats"] = {
            "kept_tokens": m.token_stats.kept_tokens,
            "segments": m.token_stats.segments,
            "layer_touches": m.token_stats.layer_touches,
            "h2d_events": m.token_stats.h2d_events,
            "h2d_bytes": m.token_stats.h2d_bytes,
        }
    return row


def _run_pipeline(opts: dict, strategy: str, questions: list[str]):
    model = _model(opts)
    watershed = _resolve_watershed(opts, model)
    pipe = _build_pipeline(opts, model, watershed, strategy)
    results = pipe.run_conversation(questions, opts["max_decode_steps"])
    return pipe, results, watershed


def cmd_run(args: argparse.Namespace) -> int:
    opts = effective_options(args)
    doc = Path(args.conversation).read_bytes()
    questions = question_texts_from_doc(doc)
    if not questions:
        raise InputError("conversation has no questions to serve")
    pipe, results, watershed = _run_pipeline(opts, opts["strategy"], questions)
    ledger = pipe.store.ledger
    report = make_report("run", opts["seed"], {
        "config": _config_echo(opts, watershed),
        "turns": [_turn_row(r) for r in results],
        "ledger": ledger.report_rows(),
        "totals": {
            "h2d_events": ledger.h2d_events,
            "h2d_bytes": ledger.h2d_bytes,
            "d2h_events": ledger.d2h_events,
            "d2h_bytes": ledger.d2h_bytes,
            "total_cost_us": sum(r.metrics.total_cost_us for r in results),
            "turns_with_history": sum(
                1 for r in results if r.metrics.round_index > 0
            ),
        },
    })
    _emit(report, opts, "run_report.json")
    if opts["out"] is not None:
        out = Path(opts["out"])
        write_cost_curves_csv(
            out / "cost_curves.csv",
            [(r.metrics.round_index, r.metrics.curves) for r in results],
        )
        write_ledger_csv(out / "ledger.csv", ledger.report_rows())
    return 0


def _config_echo(opts: dict, watershed: int) -> dict:
    return {
        "model_layers": opts["model_layers"],
        "heads": opts["heads"],
        "d_model": opts["d_model"],
        "strategy": opts["strategy"],
        "v": opts["v"],
        "fraction": opts["fraction"],
        "kappa": opts["kappa"],
        "min_rounds": opts["min_rounds"],
        "watershed": watershed,
        "drop_window": opts["drop_window"],
        "drop_protect": opts["drop_protect"],
        "max_decode_steps": opts["max_decode_steps"],
    }


# -- compare -------------------------------------------------------------------


def _divergence(answers_a: list[list[int]], answers_b: list[list[int]]) -> int:
    total = 0
    for a, b in zip(answers_a, answers_b):
        total += sum(1 for x, y in zip(a, b) if x != y) + abs(len(a) - len(b))
    return total


def cmd_compare(args: argparse.Namespace) -> int:
    opts = effective_options(args)
    if not opts["policies"]:
        raise ConfigError("--policies is required (comma-separated, at least 2)")
    names = [p.strip() for p in str(opts["policies"]).split(",") if p.strip()]
    if len(names) < 2:
        raise ConfigError("compare needs at least 2 policies")
    for name in names:
        if name not in STRATEGY_NAMES:
            raise ConfigError(f"unknown policy {name!r}")
    doc = Path(args.conversation).read_bytes()
    questions = question_texts_from_doc(doc)
    if not questions:
        raise InputError("conversation has no questions to serve")

    runs = {}
    order = list(dict.fromkeys(["baseline"] + names))  # baseline always runs (reference)
    watershed = None
    for name in order:
        pipe, results, watershed = _run_pipeline(opts, name, questions)
        runs[name] = (pipe, results)

    base_answers = [r.answer_ids for r in runs["baseline"][1]]
    table = []
    for name in names:
        pipe, results = runs[name]
        ledger = pipe.store.ledger
        row = {
            "policy": name,
            "tokens_attended": sum(r.metrics.hist_tokens_attended for r in results),
            "simulated_cost_us": sum(r.metrics.total_cost_us for r in results),
            "transfer_bytes": ledger.h2d_bytes + ledger.d2h_bytes,
            "upper_h2d_events": sum(r.metrics.upper_h2d_events for r in results),
            "divergence_tokens": _divergence(
                [r.answer_ids for r in results], base_answers
            ),
        }
        if name == "token":
            stats = [r.metrics.token_stats for r in results if r.metrics.token_stats]
            row["token_granularity"] = {
                "layer_touches": max((s.layer_touches for s in stats), default=0),
                "max_segments": max((s.segments for s in stats), default=0),
                "h2d_events": sum(s.h2d_events for s in stats),
                "h2d_bytes": sum(s.h2d_bytes for s in stats),
            }
            row["transfer_bytes"] = sum(s.h2d_bytes for s in stats)
        table.append(row)

    report = make_report("compare", opts["seed"], {
        "config": _config_echo(opts, watershed),
        "policies": names,
        "table": table,
    })
    _emit(report, opts, "compare_report.json")
    return 0


# -- entry ---------------------------------------------------------------------


def _emit(report: dict, opts: dict, filename: str) -> None:
    if opts["out"] is not None:
        out = Path(opts["out"])
        out.mkdir(parents=True, exist_ok=True)
        write_report(out / filename, report)
    else:
        sys.stdout.write(dumps_report(report))


COMMANDS = {
    "analyze": cmd_analyze,
    "memory": cmd_memory,
    "run": cmd_run,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except InvariantError as exc:
        print(f"internal invariant violated: {exc}", file=sys.stderr)
        return 3
    except RoundKVError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
