"""Disassembly ingestion: parse objdump-style listings, rebuild the CFG,
and collect the user-function map.

Input grammar (Intel syntax, one instruction per line):

    <name>:                      function header
    <hexaddr>: <mnemonic> [ops]  instruction, operands comma-separated
    # ...                        comment, ignored

Operands: registers (``rax`` .. ``r15`` in all widths), immediates
(``0x2a`` or decimal), memory (``[rbp-0x10]``, ``[rax]``, optional
``byte|word|dword|qword`` width prefix), segment reads (``fs:0x28``)
and call/jump targets (``call 0x401030 <strcpy@plt>``).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field


class MalformedLine(Exception):
    """Fatal parse error; carries the 1-based line number."""

    def __init__(self, lineno: int, text: str, why: str):
        self.lineno = lineno
        self.text = text
        super().__init__(f"line {lineno}: {why}: {text!r}")


class DuplicateFunction(Exception):
    pass


class DanglingBranch(Warning):
    pass


KNOWN_MNEMONICS = {
    "endbr64", "push", "pop", "mov", "xchg", "lea", "sub", "add",
    "cmp", "test", "call", "ret", "jmp", "nop", "safecall",
}
JCC = {"je", "jne", "jl", "jle", "jg", "jge", "jb", "jbe", "ja", "jae", "js", "jns"}
CMOV = {"cmove", "cmovne", "cmovl", "cmovle", "cmovg", "cmovge", "cmovz", "cmovnz"}
KNOWN_MNEMONICS |= JCC | CMOV

# register name -> (canonical 64-bit name, width in bytes)
_R64 = ["rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rbp", "rsp"] + [f"r{i}" for i in range(8, 16)]
REGISTERS: dict[str, tuple[str, int]] = {}
for _r in _R64:
    REGISTERS[_r] = (_r, 8)
for _r64, _r32 in [("rax", "eax"), ("rbx", "ebx"), ("rcx", "ecx"), ("rdx", "edx"),
                   ("rsi", "esi"), ("rdi", "edi"), ("rbp", "ebp"), ("rsp", "esp")]:
    REGISTERS[_r32] = (_r64, 4)
for _i in range(8, 16):
    REGISTERS[f"r{_i}d"] = (f"r{_i}", 4)
    REGISTERS[f"r{_i}w"] = (f"r{_i}", 2)
    REGISTERS[f"r{_i}b"] = (f"r{_i}", 1)
for _r64, _r16 in [("rax", "ax"), ("rbx", "bx"), ("rcx", "cx"), ("rdx", "dx"),
                   ("rsi", "si"), ("rdi", "di"), ("rbp", "bp"), ("rsp", "sp")]:
    REGISTERS[_r16] = (_r64, 2)
for _r64, _r8 in [("rax", "al"), ("rbx", "bl"), ("rcx", "cl"), ("rdx", "dl"),
                  ("rsi", "sil"), ("rdi", "dil"), ("rbp", "bpl"), ("rsp", "spl")]:
    REGISTERS[_r8] = (_r64, 1)

_WIDTH_KEYWORDS = {"byte": 1, "word": 2, "dword": 4, "qword": 8}

REG = "register"
IMM = "immediate"
MEM = "memory"
TARGET = "call-target"


@dataclass(frozen=True)
class Operand:
    kind: str
    reg: str | None = None          # canonical 64-bit name for register operands
    value: int | None = None        # immediates and branch/call targets
    base: str | None = None         # memory base register (or "fs" for segment reads)
    disp: int = 0
    symbol: str | None = None       # call-target symbol, e.g. strcpy@plt
    width: int | None = None        # operand width in bytes, where known

    def is_frame_relative(self) -> bool:
        return self.kind == MEM and self.base in ("rbp", "rsp")


@dataclass(frozen=True)
class Instruction:
    address: int
    mnemonic: str
    operands: tuple[Operand, ...]
    raw_text: str

    @property
    def text(self) -> str:
        """The instruction without its address prefix."""
        _, _, rest = self.raw_text.partition(":")
        return rest.strip() if rest else self.raw_text

    @property
    def is_jump(self) -> bool:
        return self.mnemonic == "jmp" or self.mnemonic in JCC

    @property
    def is_conditional(self) -> bool:
        return self.mnemonic in JCC

    def target(self) -> int | None:
        for op in self.operands:
            if op.kind == TARGET:
                return op.value
        return None

    def target_symbol(self) -> str | None:
        for op in self.operands:
            if op.kind == TARGET:
                return op.symbol
        return None


@dataclass
class ProgramImage:
    """Parsed instruction stream plus the function headers it came with."""

    instructions: dict[int, Instruction] = field(default_factory=dict)
    order: list[int] = field(default_factory=list)
    function_headers: dict[str, int] = field(default_factory=dict)  # name -> entry addr
    warnings: list[str] = field(default_factory=list)
    patched_sites: set[int] = field(default_factory=set)

    def next_address(self, addr: int) -> int | None:
        cache = self.__dict__.get("_next_cache")
        if cache is None or len(cache) != len(self.order):
            cache = {a: (self.order[i + 1] if i + 1 < len(self.order) else None)
                     for i, a in enumerate(self.order)}
            self.__dict__["_next_cache"] = cache
        return cache[addr]

    def function_of(self, addr: int) -> str | None:
        """Name of the function whose listing contains addr."""
        best = None
        best_addr = -1
        for name, entry in self.function_headers.items():
            if entry <= addr and entry > best_addr:
                best, best_addr = name, entry
        return best

    def function_body(self, name: str) -> list[Instruction]:
        entry = self.function_headers[name]
        others = [a for a in self.function_headers.values() if a > entry]
        end = min(others) if others else None
        out = []
        for addr in self.order:
            if addr < entry:
                continue
            if end is not None and addr >= end:
                break
            out.append(self.instructions[addr])
        return out

    def emit(self) -> str:
        """Serialize back to the input grammar (round-trips raw_text)."""
        lines = []
        by_entry = sorted(self.function_headers.items(), key=lambda kv: kv[1])
        headers = {addr: name for name, addr in by_entry}
        for addr in self.order:
            if addr in headers:
                lines.append(f"{headers[addr]}:")
            lines.append(self.instructions[addr].raw_text)
        return "\n".join(lines) + "\n"


_HEADER_RE = re.compile(r"^([A-Za-z_.$][\w.$@]*):$")
_LINE_RE = re.compile(r"^([0-9a-f]+):\s+(\S+)(?:\s+(.*))?$")
_MEM_RE = re.compile(r"^\[([a-z0-9]+)(?:(\+|-)0x([0-9a-f]+))?\]$")
_SEG_RE = re.compile(r"^fs:0x([0-9a-f]+)$")
_CALL_RE = re.compile(r"^0x([0-9a-f]+)(?:\s+<([\w.$@]+)>)?$")


def _parse_operand(text: str, lineno: int, raw: str) -> Operand:
    text = text.strip()
    width = None
    parts = text.split(None, 1)
    if len(parts) == 2 and parts[0] in _WIDTH_KEYWORDS:
        width = _WIDTH_KEYWORDS[parts[0]]
        text = parts[1].strip()
    if text in REGISTERS:
        canonical, w = REGISTERS[text]
        return Operand(kind=REG, reg=canonical, width=w, symbol=text)
    m = _MEM_RE.match(text)
    if m:
        base = m.group(1)
        if base not in REGISTERS:
            raise MalformedLine(lineno, raw, f"unknown base register {base!r}")
        disp = 0
        if m.group(2):
            disp = int(m.group(3), 16)
            if m.group(2) == "-":
                disp = -disp
        return Operand(kind=MEM, base=REGISTERS[base][0], disp=disp, width=width)
    m = _SEG_RE.match(text)
    if m:
        return Operand(kind=MEM, base="fs", disp=int(m.group(1), 16), width=width or 8)
    if text.startswith("0x"):
        try:
            return Operand(kind=IMM, value=int(text, 16), width=width)
        except ValueError:
            raise MalformedLine(lineno, raw, f"bad immediate {text!r}")
    if text.lstrip("-").isdigit():
        return Operand(kind=IMM, value=int(text), width=width)
    raise MalformedLine(lineno, raw, f"unrecognized operand {text!r}")


def _parse_target(text: str, lineno: int, raw: str) -> Operand:
    m = _CALL_RE.match(text.strip())
    if not m:
        raise MalformedLine(lineno, raw, f"bad branch target {text!r}")
    return Operand(kind=TARGET, value=int(m.group(1), 16), symbol=m.group(2))


def parse_disassembly(text: str) -> ProgramImage:
    """Parse a listing into a ProgramImage.

    Unknown mnemonics are kept as opaque no-effect instructions with a
    warning; structurally bad lines raise MalformedLine.
    """
    image = ProgramImage()
    current_function = None
    last_addr_in_function = -1
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].rstrip()
        stripped = line.strip()
        if not stripped:
            continue
        m = _HEADER_RE.match(stripped)
        if m:
            name = m.group(1)
            if name in image.function_headers:
                raise DuplicateFunction(f"line {lineno}: duplicate function {name!r}")
            current_function = name
            image.function_headers[name] = -1  # patched on first instruction
            last_addr_in_function = -1
            continue
        m = _LINE_RE.match(stripped)
        if not m:
            raise MalformedLine(lineno, stripped, "not a header or instruction line")
        addr = int(m.group(1), 16)
        mnemonic = m.group(2).lower()
        rest = m.group(3) or ""
        if addr in image.instructions:
            raise MalformedLine(lineno, stripped, f"duplicate address {addr:#x}")
        if last_addr_in_function >= 0 and addr <= last_addr_in_function:
            raise MalformedLine(lineno, stripped, "addresses must strictly increase")
        last_addr_in_function = addr

        if mnemonic not in KNOWN_MNEMONICS:
            image.warnings.append(
                f"line {lineno}: unknown mnemonic {mnemonic!r} at {addr:#x}, treated as no-effect")
            ins = Instruction(addr, mnemonic, (), stripped)
        elif mnemonic in ("call", "jmp") or mnemonic in JCC:
            ins = Instruction(addr, mnemonic, (_parse_target(rest, lineno, stripped),), stripped)
        elif mnemonic == "safecall":
            # safecall <template> <0xbound|rt>; emitted by the patcher
            parts = rest.split()
            if len(parts) != 2:
                raise MalformedLine(lineno, stripped, "safecall takes template and bound")
            bound = None if parts[1] == "rt" else int(parts[1], 16)
            ops = (Operand(kind=IMM, value=bound, symbol=parts[0]),)
            ins = Instruction(addr, mnemonic, ops, stripped)
        else:
            ops = tuple(_parse_operand(p, lineno, stripped) for p in _split_operands(rest)) if rest else ()
            _check_arity(mnemonic, ops, lineno, stripped)
            ins = Instruction(addr, mnemonic, ops, stripped)

        image.instructions[addr] = ins
        image.order.append(addr)
        if current_function is not None and image.function_headers[current_function] == -1:
            image.function_headers[current_function] = addr
    image.function_headers = {n: a for n, a in image.function_headers.items() if a != -1}
    return image


def _split_operands(rest: str) -> list[str]:
    # commas never occur inside our operand forms
    return [p for p in (s.strip() for s in rest.split(",")) if p]


_ARITY = {
    "endbr64": (0,), "nop": (0,), "ret": (0,),
    "push": (1,), "pop": (1,),
    "mov": (2,), "xchg": (2,), "lea": (2,), "sub": (2,), "add": (2,),
    "cmp": (2,), "test": (2,),
}


def _check_arity(mnemonic: str, ops: tuple, lineno: int, raw: str) -> None:
    allowed = _ARITY.get(mnemonic)
    if mnemonic in CMOV:
        allowed = (2,)
    if allowed is not None and len(ops) not in allowed:
        raise MalformedLine(lineno, raw, f"{mnemonic} expects {allowed[0]} operand(s), got {len(ops)}")


# --- CFG -----------------------------------------------------------------

FALLTHROUGH = "fallthrough"
TAKEN = "taken"
CALL = "call"
CALL_RETURN = "call-return"


@dataclass
class BasicBlock:
    start: int
    instructions: list[Instruction]
    # successor edges: (kind, target) where target is an address or an
    # external sink name for unresolved/library targets
    edges: list[tuple[str, int | str]] = field(default_factory=list)

    @property
    def end(self) -> int:
        return self.instructions[-1].address


@dataclass
class BCfg:
    blocks: dict[int, BasicBlock]
    entry: int
    external_sinks: set[str] = field(default_factory=set)
    warnings: list[str] = field(default_factory=list)

    def block_containing(self, addr: int) -> BasicBlock | None:
        for blk in self.blocks.values():
            if any(i.address == addr for i in blk.instructions):
                return blk
        return None

    def reachable_addresses(self, start: int | None = None) -> set[int]:
        start = self.entry if start is None else start
        seen_blocks: set[int] = set()
        work = [start]
        addrs: set[int] = set()
        while work:
            b = work.pop()
            if b in seen_blocks or b not in self.blocks:
                continue
            seen_blocks.add(b)
            blk = self.blocks[b]
            addrs.update(i.address for i in blk.instructions)
            for _, tgt in blk.edges:
                if isinstance(tgt, int):
                    work.append(tgt)
        return addrs


def build_bcfg(image: ProgramImage) -> BCfg:
    """Split the instruction stream into basic blocks and wire edges.

    Calls get a call edge to the callee (or an external sink) plus a
    call-return edge to the next instruction. Unresolvable branch targets
    become external sinks with a warning.
    """
    if not image.order:
        return BCfg(blocks={}, entry=0)
    addrs = set(image.order)
    fn_boundaries = set(image.function_headers.values())

    leaders = set(fn_boundaries)
    leaders.add(image.order[0])
    for addr in image.order:
        ins = image.instructions[addr]
        nxt = image.next_address(addr)
        if ins.is_jump:
            tgt = ins.target()
            if tgt in addrs:
                leaders.add(tgt)
            if nxt is not None:
                leaders.add(nxt)
        elif ins.mnemonic in ("call", "ret", "safecall"):
            if nxt is not None:
                leaders.add(nxt)
            if ins.mnemonic == "call" and ins.target() in addrs:
                leaders.add(ins.target())

    blocks: dict[int, BasicBlock] = {}
    current: list[Instruction] = []
    for addr in image.order:
        if addr in leaders and current:
            blocks[current[0].address] = BasicBlock(current[0].address, current)
            current = []
        current.append(image.instructions[addr])
    if current:
        blocks[current[0].address] = BasicBlock(current[0].address, current)

    cfg = BCfg(blocks=blocks, entry=_pick_entry(image))
    for blk in blocks.values():
        last = blk.instructions[-1]
        nxt = image.next_address(last.address)
        # fallthrough never crosses a function boundary
        nxt_in_fn = nxt if (nxt is not None and nxt not in fn_boundaries) else None
        if last.mnemonic == "jmp":
            _add_branch_edge(cfg, image, blk, last, TAKEN)
        elif last.is_conditional:
            _add_branch_edge(cfg, image, blk, last, TAKEN)
            if nxt_in_fn is not None:
                blk.edges.append((FALLTHROUGH, nxt_in_fn))
        elif last.mnemonic == "call":
            tgt, sym = last.target(), last.target_symbol()
            if tgt in addrs:
                blk.edges.append((CALL, tgt))
            else:
                sink = sym or f"sub_{tgt:x}"
                cfg.external_sinks.add(sink)
                blk.edges.append((CALL, sink))
            if nxt_in_fn is not None:
                blk.edges.append((CALL_RETURN, nxt_in_fn))
        elif last.mnemonic == "ret":
            pass
        else:
            if nxt_in_fn is not None:
                blk.edges.append((FALLTHROUGH, nxt_in_fn))
    return cfg


def _pick_entry(image: ProgramImage) -> int:
    if "main" in image.function_headers:
        return image.function_headers["main"]
    if image.function_headers:
        return min(image.function_headers.values())
    return image.order[0]


def _add_branch_edge(cfg: BCfg, image: ProgramImage, blk: BasicBlock,
                     ins: Instruction, kind: str) -> None:
    tgt = ins.target()
    if tgt in image.instructions:
        blk.edges.append((kind, tgt))
    else:
        sym = ins.target_symbol() or f"loc_{tgt:x}"
        cfg.warnings.append(
            f"dangling branch at {ins.address:#x} to {tgt:#x}, routed to external sink")
        cfg.external_sinks.add(sym)
        blk.edges.append((kind, sym))


# --- user functions ------------------------------------------------------

@dataclass
class FunctionMap:
    entries: dict[str, int]            # user function name -> entry address
    reverse: dict[int, str]
    library: set[str] = field(default_factory=set)  # @plt-suffixed symbols seen

    def function_of(self, addr: int) -> str | None:
        best, best_addr = None, -1
        for name, entry in self.entries.items():
            if entry <= addr and entry > best_addr:
                best, best_addr = name, entry
        return best

    def is_library(self, name: str) -> bool:
        return name.endswith("@plt") or name in self.library


def extract_user_functions(bcfg: BCfg, image: ProgramImage) -> FunctionMap:
    entries = dict(image.function_headers)
    fmap = FunctionMap(entries=entries, reverse={a: n for n, a in entries.items()})
    for addr in image.order:
        ins = image.instructions[addr]
        if ins.mnemonic == "call":
            sym = ins.target_symbol()
            if sym and sym.endswith("@plt"):
                fmap.library.add(sym)
    return fmap
