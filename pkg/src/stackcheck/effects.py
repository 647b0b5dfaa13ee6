"""Stack effects of indirect transitions: C library calls and loops.

Effects are computed by bounded concrete emulation. For a call site the
interpreter runs from the analysis root to just before the call, the
stack is snapshotted, the callee's write-extent rule is applied, and the
diff gives the touched bytes. Calls that read stdin/argv get an
input-length search (doubling, then binary refinement over the monotone
corruption predicate) that records the smallest input reaching the saved
return address or canary; that input is kept for patch validation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

from . import interp
from .frontend import BCfg, FunctionMap, ProgramImage, IMM, MEM, REG
from .interp import (CrashSignal, FinishedSignal, Machine, StepBudgetExceeded,
                     TargetUnreachable, UnsupportedFormat)
from .memstace import ByteOp, Config

ARG_REGS = ["rdi", "rsi", "rdx", "rcx", "r8", "r9"]


class UnknownLibc(Exception):
    pass


@dataclass(frozen=True)
class LibcSpec:
    name: str
    arity: int
    roles: tuple[str, ...]           # dest | src | format | value per argument
    input_source: bool
    extent: str                      # write-extent rule id

    def role_register(self, role: str) -> str | None:
        for i, r in enumerate(self.roles):
            if r == role:
                return ARG_REGS[i]
        return None


_DB_CACHE: dict | None = None


def load_libc_db(path: str | None = None) -> dict[str, LibcSpec]:
    global _DB_CACHE
    if path is None and _DB_CACHE is not None:
        return _DB_CACHE
    if path is None:
        raw = resources.files("stackcheck").joinpath("data/libc.json").read_text()
    else:
        with open(path, encoding="utf-8") as fh:
            raw = fh.read()
    data = json.loads(raw)
    db = {name: LibcSpec(name=name, arity=e["arity"], roles=tuple(e["roles"]),
                         input_source=e["input_source"], extent=e["extent"])
          for name, e in data.items()}
    if path is None:
        _DB_CACHE = db
    return db


def lookup_libc(name: str, db: dict[str, LibcSpec] | None = None) -> LibcSpec:
    db = db or load_libc_db()
    key = name.removesuffix("@plt")
    if key not in db:
        raise UnknownLibc(name)
    return db[key]


# --- argument recovery ------------------------------------------------------

CONSTANT = "constant"
FRAME_ADDR = "frame-addr"
FRAME_SLOT = "frame-slot"
UNKNOWN = "unknown"


@dataclass(frozen=True)
class ArgValue:
    kind: str
    value: int | None = None            # constant, or rbp offset for frame kinds
    chain: tuple[int, ...] = ()         # defining instruction addresses


@dataclass
class CallArgs:
    site: int
    spec: LibcSpec
    regs: dict[str, ArgValue]

    def by_role(self, role: str) -> ArgValue:
        reg = self.spec.role_register(role)
        if reg is None:
            return ArgValue(UNKNOWN)
        return self.regs.get(reg, ArgValue(UNKNOWN))


def recover_arguments(bcfg: BCfg, call_site: int, spec: LibcSpec,
                      depth_bound: int = 4) -> CallArgs:
    """Resolve argument registers by scanning backwards from the call.

    The scan covers the containing block and, when that fails, walks the
    unique-predecessor chain up to depth_bound blocks. Unresolved
    registers stay unknown (a legitimate outcome that later selects the
    runtime patch mode).
    """
    block = bcfg.block_containing(call_site)
    preds = _predecessors(bcfg)
    out: dict[str, ArgValue] = {}
    for reg in ARG_REGS[:spec.arity]:
        out[reg] = _resolve(bcfg, preds, block, call_site, reg, depth_bound)
    return CallArgs(site=call_site, spec=spec, regs=out)


def _predecessors(bcfg: BCfg) -> dict[int, list[int]]:
    preds: dict[int, list[int]] = {}
    for blk in bcfg.blocks.values():
        for kind, tgt in blk.edges:
            if isinstance(tgt, int) and kind in ("fallthrough", "taken", "call-return"):
                preds.setdefault(tgt, []).append(blk.start)
    return preds


def _resolve(bcfg, preds, block, before: int, reg: str, depth: int,
             chain: tuple[int, ...] = ()) -> ArgValue:
    if block is None or depth < 0:
        return ArgValue(UNKNOWN, chain=chain)
    body = [i for i in block.instructions if i.address < before]
    for ins in reversed(body):
        defined = _defines(ins, reg)
        if not defined:
            continue
        chain = chain + (ins.address,)
        if ins.mnemonic == "mov":
            src = ins.operands[1]
            if src.kind == IMM:
                return ArgValue(CONSTANT, src.value, chain)
            if src.kind == MEM and src.base == "rbp":
                return ArgValue(FRAME_SLOT, src.disp, chain)
            if src.kind == REG:
                return _resolve(bcfg, preds, block, ins.address, src.reg, depth, chain)
            return ArgValue(UNKNOWN, chain=chain)
        if ins.mnemonic == "lea":
            src = ins.operands[1]
            if src.kind == MEM and src.base == "rbp":
                return ArgValue(FRAME_ADDR, src.disp, chain)
            return ArgValue(UNKNOWN, chain=chain)
        return ArgValue(UNKNOWN, chain=chain)
    sources = preds.get(block.start, [])
    if len(sources) == 1:
        pred = bcfg.blocks[sources[0]]
        return _resolve(bcfg, preds, pred, pred.end + 1, reg, depth - 1, chain)
    return ArgValue(UNKNOWN, chain=chain)


def _defines(ins, reg: str) -> bool:
    if ins.mnemonic in ("mov", "lea", "pop") and ins.operands:
        dst = ins.operands[0]
        return dst.kind == REG and dst.reg == reg
    return False


# --- call effects ----------------------------------------------------------

@dataclass
class CallEffect:
    name: str
    site: int
    touched: tuple[tuple[int, int, ByteOp], ...] = ()
    concrete_input: bytes | None = None
    input_stream: str | None = None
    corrupting_len: int | None = None
    expected_cause: str | None = None
    grew_frames: bool = False
    opaque: bool = False
    truncating: bool = False
    clamped: bool = False
    dest_size: int | None = None
    dest_offset: int | None = None
    notes: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class CrashInput:
    data: bytes
    stream: str = "stdin"


def extract_concrete_input(effect: CallEffect) -> CrashInput | None:
    if effect.concrete_input is None:
        return None
    return CrashInput(data=effect.concrete_input, stream=effect.input_stream or "stdin")


def _opaque(name: str, site: int, note: str, truncating: bool = False) -> CallEffect:
    return CallEffect(name=name, site=site, opaque=True, truncating=truncating,
                      notes=[note])


def emulate_call(image: ProgramImage, call_site: int, args: CallArgs, cfg: Config,
                 entry: int | None = None) -> CallEffect:
    """Interpret from `entry` to the call, apply the callee's write rule,
    and report the stack diff as (frame depth, byte index) touches."""
    spec = args.spec
    name = spec.name
    if entry is None:
        fn = image.function_of(call_site)
        entry = image.function_headers[fn]
    machine = Machine(image, cfg, stdin=b"")
    machine.start(entry)
    try:
        machine.run_to(call_site)
    except (FinishedSignal, TargetUnreachable):
        return _opaque(name, call_site, f"{name} at {call_site:#x} not reached from {entry:#x}",
                       truncating=True)
    except StepBudgetExceeded:
        return _opaque(name, call_site, f"emulation diverged before {call_site:#x}",
                       truncating=True)
    except CrashSignal as c:
        return _opaque(name, call_site, f"crash ({c.cause}) before {call_site:#x}",
                       truncating=True)

    if spec.extent == "none":
        return CallEffect(name=name, site=call_site)

    dest_reg = spec.role_register("dest")
    dest = machine.rd_reg(dest_reg) if dest_reg else None
    if dest is not None and not _plausible_pointer(machine, dest):
        return _opaque(name, call_site,
                       f"{name} at {call_site:#x}: destination unresolved", truncating=True)

    frames = machine.shadow
    dest_size = dest_offset = None
    if dest is not None:
        frame = _frame_for(frames, dest)
        if frame is not None:
            dest_size = frame.protected_floor() - dest
            if frame.rbp_value is not None:
                dest_offset = dest - frame.rbp_value
            # a neighbouring object caps the destination below the
            # protected floor; only the active frame's layout is known here
            if dest_offset is not None and frame is frames[-1]:
                from .memstace import infer_buffer_size, scan_object_boundaries
                fn = image.function_of(call_site)
                bounds = scan_object_boundaries(image.function_body(fn))
                inferred = infer_buffer_size(dest_offset, bounds,
                                             frame.canary_loc is not None)
                if 0 < inferred < dest_size:
                    dest_size = inferred

    try:
        payloads, search = _write_payloads(machine, spec, dest, cfg)
    except UnsupportedFormat as exc:
        return _opaque(name, call_site, f"{name} at {call_site:#x}: {exc}", truncating=True)

    if search is None:
        data, at = payloads
        effect = _diff_effect(machine, name, call_site, at, data)
    else:
        effect = _input_search(machine, name, call_site, dest, cfg, search)
    effect.dest_size = dest_size
    effect.dest_offset = dest_offset
    return effect


def _plausible_pointer(machine: Machine, addr: int) -> bool:
    return machine.in_stack(addr) or addr in machine.aux or (
        interp.ARGV_BASE <= addr < interp.ARGV_BASE + 0x10000)


def _frame_for(frames, addr: int):
    best = None
    for f in frames:
        if addr <= f.top_addr and (best is None or f.top_addr < best.top_addr):
            best = f
    return best


def _write_payloads(machine: Machine, spec: LibcSpec, dest, cfg: Config):
    """(payload bytes, write address) for non-input rules, or the search
    bound for input-source rules."""
    if spec.extent == "strlen_src_plus_1":
        data = _source_string(machine, spec, cfg)
        return (data + b"\0", dest), None
    if spec.extent == "append_src_plus_1":
        data = _source_string(machine, spec, cfg)
        dlen = len(machine.rd_cstr(dest))
        return (data + b"\0", dest + dlen), None
    if spec.extent == "format_output_plus_1":
        fmt_reg = spec.role_register("format")
        fmt = machine.rd_cstr(machine.rd_reg(fmt_reg))
        pos = ARG_REGS.index(fmt_reg)
        out = machine._render_format(fmt, ARG_REGS[pos + 1:])
        return (out + b"\0", dest), None
    if spec.extent == "bounded_format":
        n = machine.rd_reg(spec.role_register("value") or "rsi")
        fmt = machine.rd_cstr(machine.rd_reg("rdx"))
        out = machine._render_format(fmt, ["rcx", "r8", "r9"])
        return (out[:max(n - 1, 0)] + (b"\0" if n > 0 else b""), dest), None
    if spec.extent == "exactly_n":
        n = machine.rd_reg("rdx")
        n = min(n, cfg.max_input_len)
        return (b"A" * n, dest), None
    if spec.extent == "line_plus_1":
        return None, cfg.max_input_len
    if spec.extent == "token_plus_1":
        return None, cfg.max_input_len
    if spec.extent == "bounded_line":
        n = machine.rd_reg("rsi")
        return None, max(min(n - 1, cfg.max_input_len), 0)
    raise UnknownLibc(f"no write-extent rule {spec.extent!r}")


def _source_string(machine: Machine, spec: LibcSpec, cfg: Config) -> bytes:
    src = machine.rd_reg(spec.role_register("src"))
    if not _plausible_pointer(machine, src):
        # unresolvable source: assume attacker-controlled up to the cap
        return b"A" * cfg.max_input_len
    return machine.rd_cstr(src)


def _apply_payload(machine: Machine, addr: int, data: bytes) -> tuple[Machine, bool]:
    clone = machine.fork()
    clamped = False
    for i, b in enumerate(data):
        a = addr + i
        if clone.in_stack(a) or a in clone.aux:
            try:
                clone.wr_mem(a, bytes([b]))
            except CrashSignal:
                clamped = True
                break
        else:
            clamped = True
            break
    return clone, clamped


def _diff_effect(machine: Machine, name: str, site: int, at: int, data: bytes) -> CallEffect:
    snap = machine.snapshot()
    clone, clamped = _apply_payload(machine, at, data)
    changed = clone.diff_stack(snap)
    touched, overflow = _map_touches(machine, changed)
    return CallEffect(name=name, site=site, touched=tuple(touched),
                      clamped=clamped or overflow)


def _map_touches(machine: Machine, changed: dict[int, tuple[int, int]]):
    """Map changed addresses to (depth from the active frame, byte index)."""
    frames = machine.shadow
    spans = []
    for k, f in enumerate(frames):
        low = frames[k + 1].ret_loc + 8 if k + 1 < len(frames) else machine.regs["rsp"]
        spans.append((low, f.top_addr, k))
    touched = []
    overflow = False
    for addr in sorted(changed):
        placed = False
        for low, high, k in spans:
            if low <= addr <= high:
                depth = len(frames) - 1 - k
                touched.append((depth, frames[k].index_of(addr), ByteOp.NRWRITE))
                placed = True
                break
        if not placed:
            overflow = True
    return touched, overflow


def _protected_addresses(machine: Machine) -> set[int]:
    out: set[int] = set()
    for f in machine.shadow:
        out.update(range(f.ret_loc, f.ret_loc + 8))
        if f.canary_loc is not None:
            out.update(range(f.canary_loc, f.canary_loc + 8))
    return out


def _canary_addresses(machine: Machine) -> set[int]:
    out: set[int] = set()
    for f in machine.shadow:
        if f.canary_loc is not None:
            out.update(range(f.canary_loc, f.canary_loc + 8))
    return out


def _input_search(machine: Machine, name: str, site: int, dest: int,
                  cfg: Config, max_len: int) -> CallEffect:
    """Find the smallest input length whose write reaches protected bytes.

    Lengths double up to the cap; corruption is monotone in the length for
    the shipped write rules, so a binary refinement pins the exact minimum.
    """
    protected = _protected_addresses(machine)
    canary = _canary_addresses(machine)

    def write_span(length: int) -> range:
        return range(dest, dest + length + 1)   # payload plus terminator

    def corrupts(length: int) -> bool:
        return any(a in protected for a in write_span(length))

    probe, hit = 1, None
    while probe <= max_len:
        if corrupts(probe):
            hit = probe
            break
        probe *= 2
    if hit is None and max_len > 0 and corrupts(max_len):
        hit = max_len
    if hit is None:
        # bounded input: worst case is the full allowed extent, no crash input
        data = b"A" * max_len + (b"\0" if max_len else b"")
        effect = _diff_effect(machine, name, site, dest, data)
        return effect

    lo, hi = hit // 2 + 1, hit
    while lo < hi:
        mid = (lo + hi) // 2
        if corrupts(mid):
            hi = mid
        else:
            lo = mid + 1
    minimal = lo
    data = b"A" * minimal + b"\0"
    effect = _diff_effect(machine, name, site, dest, data)
    effect.corrupting_len = minimal
    effect.input_stream = "stdin"
    effect.concrete_input = b"A" * minimal + b"\n"
    hits_canary = any(a in canary for a in write_span(minimal))
    effect.expected_cause = interp.CAUSE_CANARY if hits_canary else interp.CAUSE_RET
    return effect


# --- loops ------------------------------------------------------------------

@dataclass(frozen=True)
class LoopInfo:
    function: str
    entry: int                      # back-edge target block address
    back_source: int
    exit: int | None
    body: frozenset[int]
    irreducible: bool = False


def detect_loops(bcfg: BCfg, funcs: FunctionMap | None = None) -> list[LoopInfo]:
    """Natural loops from back-edges found by DFS ancestry, per function."""
    loops: list[LoopInfo] = []
    intra: dict[int, list[int]] = {}
    for blk in bcfg.blocks.values():
        intra[blk.start] = [t for kind, t in blk.edges
                            if isinstance(t, int) and kind in ("fallthrough", "taken", "call-return")]
    preds: dict[int, list[int]] = {}
    for src, targets in intra.items():
        for t in targets:
            preds.setdefault(t, []).append(src)

    entries = sorted({e for e in (funcs.entries.values() if funcs else [bcfg.entry])
                      if e in bcfg.blocks})
    if not entries and bcfg.entry in bcfg.blocks:
        entries = [bcfg.entry]
    seen_edges: set[tuple[int, int]] = set()
    for fn_entry in entries:
        fn_name = funcs.reverse.get(fn_entry, f"sub_{fn_entry:x}") if funcs else "?"
        back_edges = _find_back_edges(fn_entry, intra)
        dom = _dominators(fn_entry, intra, preds)
        for (src, tgt) in sorted(back_edges):
            if (src, tgt) in seen_edges:
                continue
            seen_edges.add((src, tgt))
            irreducible = tgt not in dom.get(src, {src})
            body = _natural_loop_body(src, tgt, preds)
            exit_addr = _loop_exit(body, intra, bcfg)
            loops.append(LoopInfo(function=fn_name, entry=tgt, back_source=src,
                                  exit=exit_addr, body=frozenset(body),
                                  irreducible=irreducible or exit_addr is None))
    return loops


def _find_back_edges(entry: int, intra: dict[int, list[int]]) -> set[tuple[int, int]]:
    back: set[tuple[int, int]] = set()
    on_stack: set[int] = set()
    seen: set[int] = set()

    def visit(b: int) -> None:
        seen.add(b)
        on_stack.add(b)
        for t in intra.get(b, []):
            if t in on_stack:
                back.add((b, t))
            elif t not in seen:
                visit(t)
        on_stack.discard(b)

    if entry in intra:
        visit(entry)
    return back


def _dominators(entry: int, intra, preds) -> dict[int, set[int]]:
    nodes = set()
    work = [entry]
    while work:
        b = work.pop()
        if b in nodes:
            continue
        nodes.add(b)
        work.extend(intra.get(b, []))
    dom = {b: set(nodes) for b in nodes}
    dom[entry] = {entry}
    changed = True
    while changed:
        changed = False
        for b in nodes - {entry}:
            ps = [p for p in preds.get(b, []) if p in nodes]
            new = set(nodes)
            for p in ps:
                new &= dom[p]
            new |= {b}
            if not ps:
                new = {b}
            if new != dom[b]:
                dom[b] = new
                changed = True
    return dom


def _natural_loop_body(src: int, tgt: int, preds) -> set[int]:
    body = {tgt, src}
    work = [src]
    while work:
        b = work.pop()
        if b == tgt:
            continue
        for p in preds.get(b, []):
            if p not in body:
                body.add(p)
                work.append(p)
    return body


def _loop_exit(body: set[int], intra, bcfg: BCfg) -> int | None:
    for b in sorted(body):
        for t in intra.get(b, []):
            if t not in body:
                return t
    return None


def emulate_loop(image: ProgramImage, loop: LoopInfo, cfg: Config,
                 entry: int | None = None) -> CallEffect:
    """Diff the stack between the first arrival at the loop entry and the
    exit (or the iteration budget running out)."""
    if entry is None:
        fn = image.function_of(loop.entry)
        entry = image.function_headers[fn]
    machine = Machine(image, cfg, stdin=b"")
    machine.start(entry)
    try:
        machine.run_to(loop.entry)
    except (FinishedSignal, TargetUnreachable, StepBudgetExceeded, CrashSignal):
        return _opaque("loop", loop.entry,
                       f"loop at {loop.entry:#x} not reached from {entry:#x}", truncating=True)
    snap = machine.snapshot()
    iterations = 0
    notes: list[str] = []
    while True:
        try:
            machine.step()
        except (FinishedSignal, CrashSignal):
            notes.append(f"loop at {loop.entry:#x}: execution left the function")
            break
        except StepBudgetExceeded:
            notes.append(f"loop at {loop.entry:#x}: step budget exhausted")
            break
        if machine.pc == loop.exit:
            break
        if machine.pc == loop.entry:
            iterations += 1
            if iterations >= cfg.max_loop_iters:
                notes.append(f"loop at {loop.entry:#x}: iteration budget "
                             f"({cfg.max_loop_iters}) exhausted; effect may be partial")
                break
    changed = machine.diff_stack(snap)
    touched, overflow = _map_touches(machine, changed)
    return CallEffect(name="loop", site=loop.entry, touched=tuple(touched),
                      clamped=overflow, notes=notes)


# --- the oracle used by the state-space builder ------------------------------

class EffectsOracle:
    """Per-binary cache of call and loop effects, keyed by analysis root."""

    def __init__(self, image: ProgramImage, bcfg: BCfg, funcs: FunctionMap,
                 cfg: Config, libc_db: dict[str, LibcSpec] | None = None):
        self.image = image
        self.bcfg = bcfg
        self.funcs = funcs
        self.cfg = cfg
        self.libc_db = libc_db or load_libc_db(cfg.libc_db_path)
        self.root: int | None = None
        self.loops = detect_loops(bcfg, funcs)
        self._loops_by_entry: dict[int, LoopInfo] = {}
        for lp in self.loops:
            cur = self._loops_by_entry.get(lp.entry)
            if cur is None or len(lp.body) > len(cur.body):
                self._loops_by_entry[lp.entry] = lp
        self._call_cache: dict[tuple[int, int], CallEffect] = {}
        self._loop_cache: dict[tuple[int, int], CallEffect] = {}
        self._args_cache: dict[int, CallArgs] = {}

    def set_root(self, entry: int) -> None:
        self.root = entry

    def libc_names(self) -> set[str]:
        return set(self.libc_db)

    def arguments(self, site: int) -> CallArgs | None:
        if site not in self._args_cache:
            ins = self.image.instructions[site]
            name = (ins.target_symbol() or "").removesuffix("@plt")
            try:
                spec = lookup_libc(name, self.libc_db)
            except UnknownLibc:
                self._args_cache[site] = None
            else:
                self._args_cache[site] = recover_arguments(self.bcfg, site, spec)
        return self._args_cache[site]

    def call_effect(self, site: int) -> CallEffect:
        root = self.root if self.root is not None else self.image.order[0]
        key = (root, site)
        if key not in self._call_cache:
            args = self.arguments(site)
            if args is None:
                ins = self.image.instructions[site]
                name = (ins.target_symbol() or f"sub_{ins.target():x}").removesuffix("@plt")
                self._call_cache[key] = _opaque(
                    name, site, f"unknown library function {name!r}; call treated as opaque")
            else:
                self._call_cache[key] = emulate_call(self.image, site, args,
                                                     self.cfg, entry=root)
        return self._call_cache[key]

    def loop_at(self, pc: int, fn: str) -> LoopInfo | None:
        loop = self._loops_by_entry.get(pc)
        if loop is None or loop.irreducible:
            return None
        return loop

    def loop_effect(self, loop: LoopInfo) -> CallEffect:
        root = self.root if self.root is not None else self.image.order[0]
        key = (root, loop.entry)
        if key not in self._loop_cache:
            self._loop_cache[key] = emulate_loop(self.image, loop, self.cfg, entry=root)
        return self._loop_cache[key]
