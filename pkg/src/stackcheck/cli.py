"""Pipeline orchestration and the command-line front door.

For every input listing: parse, rebuild the CFG, then build one state
space per user function (descending through user calls), check every
property on each space, and aggregate per-property verdicts keeping the
shortest counterexample. Violated properties are traced back to sinks;
with --patch the sinks are rewritten and with --validate the original
and patched images are executed on the derived (or random) inputs.

A binary is classified vulnerable iff at least one property is violated.
Exit codes: 0 clean, 1 vulnerabilities found, 2 errors.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import checker, ltl, patcher, validator
from .effects import EffectsOracle, extract_concrete_input
from .frontend import (FunctionMap, MalformedLine, DuplicateFunction,
                       ProgramImage, build_bcfg, extract_user_functions,
                       parse_disassembly)
from .memstace import Config, build_memstace, dump_memstace
from .patcher import NoSinkFound, NoTemplate, load_templates

SCHEMA_VERSION = 1


@dataclass
class PropertyResult:
    name: str
    status: str
    cwes: list[str]
    vacuous: bool = False
    root: str | None = None
    trace: checker.Trace | None = None

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "status": self.status,
            "cwes": self.cwes,
            "vacuous": self.vacuous,
            "root": self.root,
            "trace": self.trace.to_json() if self.trace else None,
            "trace_text": self.trace.render() if self.trace else None,
        }


@dataclass
class Report:
    binary: str
    status: str = "clean"
    roots: list[str] = field(default_factory=list)
    properties: list[PropertyResult] = field(default_factory=list)
    sinks: list[dict] = field(default_factory=list)
    patches: list[dict] = field(default_factory=list)
    validations: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    truncated: bool = False
    timings: dict = field(default_factory=dict)
    error: str | None = None
    patched_image: ProgramImage | None = None

    @property
    def vulnerable(self) -> bool:
        return any(p.status == checker.VIOLATED for p in self.properties)

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "binary": self.binary,
            "status": self.status,
            "roots": self.roots,
            "properties": [p.to_json() for p in self.properties],
            "sinks": self.sinks,
            "patches": self.patches,
            "validations": self.validations,
            "notes": self.notes,
            "warnings": self.warnings,
            "truncated": self.truncated,
            "timings": self.timings,
            "error": self.error,
        }


def _load_properties(cfg: Config) -> list[ltl.PropertyAst]:
    """Bundled properties; a user file extends the set and overrides
    same-named entries."""
    props = ltl.load_bundled_properties()
    if cfg.properties_path:
        with open(cfg.properties_path, encoding="utf-8") as fh:
            user = ltl.parse_property_file(fh.read())
        by_name = {p.name: p for p in props}
        for p in user:
            by_name[p.name] = p
        props = list(by_name.values())
    return props


def _load_buffer_overrides(cfg: Config) -> dict:
    if not cfg.buffers_path:
        return {}
    with open(cfg.buffers_path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return {fn: {int(off): size for off, size in table.items()}
            for fn, table in raw.items()}


def analyze_image(image: ProgramImage, name: str, cfg: Config, *,
                  patch: bool = False, validate: bool = False,
                  patch_all: bool = False,
                  export_memstace: str | None = None) -> Report:
    report = Report(binary=name)
    t0 = time.perf_counter()
    deadline = t0 + cfg.timeout if cfg.timeout else None

    bcfg = build_bcfg(image)
    funcs = extract_user_functions(bcfg, image)
    oracle = EffectsOracle(image, bcfg, funcs, cfg)
    properties = _load_properties(cfg)
    monitors = [ltl.compile_monitor(p) for p in properties]
    libc_names = oracle.libc_names()
    cwe_db = dict(checker.load_cwe_map())
    for p in properties:
        if p.cwes:
            cwe_db.setdefault(p.name, list(p.cwes))
    overrides = _load_buffer_overrides(cfg)
    report.warnings.extend(image.warnings)
    report.warnings.extend(bcfg.warnings)
    for lp in oracle.loops:
        if lp.irreducible:
            report.notes.append(f"irreducible loop at {lp.entry:#x} in "
                                f"{lp.function!r}; body walked without a summary")
    for blk in bcfg.blocks.values():
        last = blk.instructions[-1]
        if last.mnemonic == "call" and last.target_symbol() is None \
                and last.target() not in image.instructions:
            report.notes.append(
                f"indirect/unresolved call at {last.address:#x} treated as external sink")

    roots = sorted(funcs.entries.items(), key=lambda kv: kv[1])
    roots = [(n, a) for n, a in roots if not n.startswith("__patch_")]
    report.roots = [n for n, _ in roots]

    spaces = {}
    build_elapsed = 0.0
    for fn_name, entry in roots:
        if deadline and time.perf_counter() > deadline:
            report.notes.append("timeout during state-space construction")
            report.truncated = True
            break
        oracle.set_root(entry)
        b0 = time.perf_counter()
        space = build_memstace(bcfg, funcs, oracle, cfg, image=image,
                               entry=entry, buffer_overrides=overrides)
        build_elapsed += time.perf_counter() - b0
        spaces[fn_name] = space
        report.notes.extend(space.notes)
        report.truncated = report.truncated or space.truncated
        if export_memstace:
            dump_memstace(space, f"{export_memstace}.{fn_name}")
        body = image.function_body(fn_name)
        if body and not any(i.mnemonic == "push" for i in body[:4]):
            report.notes.append(f"function {fn_name!r} lacks a standard prologue; "
                                "base-register checks are vacuous there")

    v0 = time.perf_counter()
    timed_out = False
    for monitor in monitors:
        if deadline and time.perf_counter() > deadline:
            timed_out = True
        if timed_out:
            report.properties.append(PropertyResult(
                name=monitor.name, status=checker.INCONCLUSIVE,
                cwes=checker.map_cwe(monitor.name, db=cwe_db,
                                     warnings=report.warnings)))
            report.notes.append(f"timeout before checking {monitor.name!r}")
            continue
        best: checker.Verdict | None = None
        best_root = None
        any_inconclusive = False
        vacuous_all = True
        vnotes: list[str] = []
        for fn_name, space in spaces.items():
            verdict = checker.check(space, monitor, libc_names)
            vnotes.extend(verdict.vacuity_notes)
            if verdict.status == checker.VIOLATED:
                vacuous_all = False
                if best is None or best.status != checker.VIOLATED or \
                        len(verdict.trace.steps) < len(best.trace.steps):
                    best, best_root = verdict, fn_name
            elif verdict.status == checker.INCONCLUSIVE:
                any_inconclusive = True
            if verdict.status == checker.HOLDS and not verdict.vacuous:
                vacuous_all = False
        cwes = checker.map_cwe(monitor.name, db=cwe_db, warnings=report.warnings)
        if best is not None:
            result = PropertyResult(name=monitor.name, status=checker.VIOLATED,
                                    cwes=cwes, root=best_root, trace=best.trace)
        elif any_inconclusive:
            result = PropertyResult(name=monitor.name, status=checker.INCONCLUSIVE,
                                    cwes=cwes)
        else:
            result = PropertyResult(name=monitor.name, status=checker.HOLDS,
                                    cwes=cwes, vacuous=vacuous_all and bool(spaces))
        report.notes.extend(dict.fromkeys(vnotes))
        report.properties.append(result)

    verify_elapsed = time.perf_counter() - v0
    report.status = "vulnerable" if report.vulnerable else (
        "inconclusive" if report.truncated else "clean")

    # sinks for violated properties
    sink_map: dict[int, patcher.SinkSite] = {}
    for result in report.properties:
        if result.status != checker.VIOLATED or result.trace is None:
            continue
        try:
            sink = patcher.locate_sink(result.trace, bcfg, funcs, libc_names)
        except NoSinkFound:
            report.notes.append(
                f"{result.name}: violation has no call/loop sink; report-only")
            continue
        merged = sink_map.get(sink.address)
        cwes = tuple(sorted(set(result.cwes) | set(merged.cwes if merged else ())))
        sink_map[sink.address] = patcher.SinkSite(
            address=sink.address, function=sink.function, callee=sink.callee,
            kind=sink.kind, cwes=cwes)

    if patch_all:
        templated = {t.target for t in load_templates(cfg.templates_path)}
        if not cfg.enable_scanf_patch:
            templated.discard("scanf")
        for addr in image.order:
            ins = image.instructions[addr]
            if ins.mnemonic != "call":
                continue
            callee = (ins.target_symbol() or "").removesuffix("@plt")
            if callee in templated and addr not in sink_map:
                fn = funcs.function_of(addr) or "?"
                sink_map[addr] = patcher.SinkSite(address=addr, function=fn,
                                                  callee=callee, kind="call")

    report.sinks = [{
        "address": s.address, "function": s.function, "callee": s.callee,
        "kind": s.kind, "cwes": list(s.cwes),
    } for s in sorted(sink_map.values(), key=lambda s: s.address)]

    if patch or validate or patch_all:
        _patch_and_validate(report, image, sink_map, oracle, funcs, cfg,
                            validate=validate)

    report.notes = list(dict.fromkeys(report.notes))
    report.warnings = list(dict.fromkeys(report.warnings))
    report.timings = {
        "build_s": round(build_elapsed, 6),
        "verify_s": round(verify_elapsed, 6),
        "total_s": round(time.perf_counter() - t0, 6),
    }
    return report


def _patch_and_validate(report: Report, image: ProgramImage,
                        sink_map: dict, oracle: EffectsOracle,
                        funcs: FunctionMap, cfg: Config, *, validate: bool) -> None:
    if not funcs.entries:
        return
    templates = load_templates(cfg.templates_path)
    patched = image
    plans = []
    for addr in sorted(sink_map):
        sink = sink_map[addr]
        if sink.kind != "call":
            report.notes.append(f"sink at {addr:#x} is a loop; no template, report-only")
            continue
        root_entry = funcs.entries.get("main") or min(funcs.entries.values())
        oracle.set_root(root_entry)
        effect = oracle.call_effect(addr)
        if effect.opaque:
            # fall back to the sink's own function as the emulation root
            fn_entry = funcs.entries.get(sink.function)
            if fn_entry is not None:
                oracle.set_root(fn_entry)
                effect = oracle.call_effect(addr)
        args = oracle.arguments(addr)
        try:
            plan = patcher.select_template(sink, effect, args, templates,
                                           enable_scanf=cfg.enable_scanf_patch)
        except NoTemplate as exc:
            report.notes.append(f"sink at {addr:#x}: {exc}")
            continue
        patched = patcher.apply_trampoline(patched, plan)
        plans.append((plan, effect))
        report.patches.append({
            "sink": addr,
            "callee": sink.callee,
            "template": plan.template.name,
            "mode": plan.template.mode,
            "bound": plan.bound,
            "trampoline": plan.trampoline_label,
            "return_address": plan.return_address,
        })
    if patched is not image:
        report.patched_image = patched
    if not validate:
        return
    for plan, effect in plans:
        crash_input = extract_concrete_input(effect)
        vr = validator.validate_patch(image, patched, crash_input, cfg)
        report.validations.append({
            "sink": plan.sink.address,
            "input_source": vr.input_source,
            "input_bytes": vr.input_used.decode("latin-1"),
            "success": vr.success,
            "original": {"status": vr.original.status, "cause": vr.original.cause},
            "patched": {"status": vr.patched.status, "cause": vr.patched.cause},
            "notes": vr.notes,
        })


def analyze(paths: list[str], cfg: Config | None = None, *, patch: bool = False,
            validate: bool = False, patch_all: bool = False,
            out_dir: str | None = None,
            export_memstace: str | None = None) -> list[Report]:
    cfg = cfg or Config()
    reports = []
    for path in paths:
        name = Path(path).stem
        try:
            image = parse_disassembly(Path(path).read_text(encoding="utf-8"))
            report = analyze_image(image, name, cfg, patch=patch, validate=validate,
                                   patch_all=patch_all, export_memstace=export_memstace)
        except (MalformedLine, DuplicateFunction, OSError) as exc:
            report = Report(binary=name, status="error", error=str(exc))
        if out_dir and report.patched_image is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            (out / f"{name}.patched.s").write_text(report.patched_image.emit(),
                                                   encoding="utf-8")
        reports.append(report)
    return reports


def report_metrics(reports: list[Report], ground_truth: dict[str, bool]) -> dict:
    """Confusion matrix and the four derived metrics.

    Classification: vulnerable iff at least one property is violated.
    """
    tp = fn = fp = tn = 0
    for r in reports:
        truth = ground_truth.get(r.binary)
        if truth is None:
            continue
        flagged = r.vulnerable
        if truth and flagged:
            tp += 1
        elif truth and not flagged:
            fn += 1
        elif not truth and flagged:
            fp += 1
        else:
            tn += 1
    total = tp + fn + fp + tn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {
        "tp": tp, "fn": fn, "fp": fp, "tn": tn,
        "accuracy": (tp + tn) / total if total else 0.0,
        "precision": precision,
        "recall": recall,
        "f1": f1,
    }


def _render_text(report: Report) -> str:
    lines = [f"== {report.binary}: {report.status}"]
    for p in report.properties:
        mark = {"holds": "ok ", "violated": "VIOLATED", "inconclusive": "???"}[p.status]
        extra = f" ({', '.join(p.cwes)})" if p.status == "violated" and p.cwes else ""
        vac = " [vacuous]" if p.vacuous and p.status == "holds" else ""
        lines.append(f"  [{mark}] {p.name}{extra}{vac}")
        if p.trace is not None:
            lines.extend("    " + ln for ln in p.trace.render().splitlines())
    for s in report.sinks:
        lines.append(f"  sink: {s['callee'] or 'loop'} at 0x{s['address']:x} in {s['function']}")
    for p in report.patches:
        lines.append(f"  patch: {p['template']} ({p['mode']}, bound={p['bound']}) "
                     f"at 0x{p['sink']:x} -> {p['trampoline']}")
    for v in report.validations:
        lines.append(f"  validation at 0x{v['sink']:x}: "
                     f"original={v['original']['status']} patched={v['patched']['status']} "
                     f"success={v['success']}")
    for n in report.notes:
        lines.append(f"  note: {n}")
    return "\n".join(lines)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="stackcheck",
        description="Detect, patch and validate stack buffer overflows in "
                    "disassembled x86-64 programs.")
    sub = parser.add_subparsers(dest="command", required=True)
    pa = sub.add_parser("analyze", help="run the full pipeline on listings")
    pa.add_argument("paths", nargs="+")
    pa.add_argument("--props", help="property file extending/overriding the bundled set")
    pa.add_argument("--templates", help="patch template file or directory")
    pa.add_argument("--libc-db", help="libc function database file")
    pa.add_argument("--buffers", help="sidecar JSON pinning buffer sizes")
    pa.add_argument("--max-states", type=int, default=4096)
    pa.add_argument("--max-loop-iters", type=int, default=64)
    pa.add_argument("--max-input-len", type=int, default=4096)
    pa.add_argument("--step-budget", type=int, default=200_000)
    pa.add_argument("--atomic-writes", action="store_true",
                    help="one transition per written byte")
    pa.add_argument("--export-memstace", metavar="PATH",
                    help="dump each state space as PATH.<fn>.json/.dot")
    pa.add_argument("--patch", action="store_true", help="rewrite flagged sinks")
    pa.add_argument("--patch-all", action="store_true",
                    help="also rewrite non-flagged calls that have templates")
    pa.add_argument("--enable-scanf-patch", action="store_true",
                    help="opt in to the bounded-width scanf template")
    pa.add_argument("--validate", action="store_true",
                    help="execute original and patched images on crash inputs")
    pa.add_argument("--out", help="directory for patched listings")
    pa.add_argument("--report", choices=["json", "text"], default="text")
    pa.add_argument("--timeout", type=float, default=None, help="seconds per binary")
    pa.add_argument("--ground-truth", help="JSON {binary: bool} for batch metrics")
    pa.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    cfg = Config(max_states=args.max_states, max_loop_iters=args.max_loop_iters,
                 max_input_len=args.max_input_len, step_budget=args.step_budget,
                 atomic_writes=args.atomic_writes, timeout=args.timeout,
                 seed=args.seed, properties_path=args.props,
                 templates_path=args.templates, libc_db_path=args.libc_db,
                 buffers_path=args.buffers,
                 enable_scanf_patch=args.enable_scanf_patch)
    reports = analyze(args.paths, cfg, patch=args.patch or bool(args.out),
                      validate=args.validate, patch_all=args.patch_all,
                      out_dir=args.out, export_memstace=args.export_memstace)

    payload = [r.to_json() for r in reports]
    if args.ground_truth:
        with open(args.ground_truth, encoding="utf-8") as fh:
            truth = json.load(fh)
        metrics = report_metrics(reports, truth)
    else:
        metrics = None

    if args.report == "json":
        doc = {"reports": payload}
        if metrics is not None:
            doc["metrics"] = metrics
        json.dump(doc, sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")
    else:
        for r in reports:
            print(_render_text(r))
        if metrics is not None:
            print(f"== metrics: {json.dumps(metrics, sort_keys=True)}")

    if any(r.status == "error" for r in reports):
        return 2
    if any(r.vulnerable for r in reports):
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
