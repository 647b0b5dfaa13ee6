"""Concrete interpreter for the supported x86-64 subset.

Runs a parsed image on a byte-addressed stack. Each user call records a
shadow copy of the saved return address, saved base register and canary;
at ret the live bytes are compared against the shadow and a mismatch
raises a crash with the matching cause. The same machine serves the
effects module in capture mode (run to a call site, snapshot, diff) and
the validator for full before/after runs. The safecall pseudo-instruction
executes the bounded replacement semantics installed by the patcher.
"""

from __future__ import annotations

from dataclasses import dataclass

from .frontend import Instruction, ProgramImage, IMM, MEM, REG, JCC, CMOV

STACK_BASE = 0x7FFE0000
STACK_SIZE = 0x40000
STACK_TOP = STACK_BASE + STACK_SIZE
ENTRY_RSP = STACK_TOP - 0x1000          # headroom absorbs overflow past the root frame
ARGV_BASE = 0x500000
# no zero bytes: a terminator written over any sentinel byte must show up
# in stack diffs and shadow comparisons
SENTINEL_RET = 0xFEEDFACEFEEDFACE
CANARY_VALUE = 0x00C0FFEE0BADF00D
CANARY_FS_OFFSET = 0x28

R64 = ["rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rbp", "rsp"] + [f"r{i}" for i in range(8, 16)]

CAUSE_RET = "return-address-corrupted"
CAUSE_RBP = "base-register-corrupted"
CAUSE_CANARY = "canary-mismatch"
CAUSE_OOS = "out-of-stack-write"


class CrashSignal(Exception):
    def __init__(self, cause: str):
        self.cause = cause
        super().__init__(cause)


class FinishedSignal(Exception):
    pass


class StepBudgetExceeded(Exception):
    pass


class TargetUnreachable(Exception):
    pass


class UnsupportedFormat(Exception):
    pass


@dataclass
class ShadowFrame:
    func: str
    ret_loc: int
    ret_bytes: bytes
    rbp_loc: int | None = None
    rbp_bytes: bytes | None = None
    rbp_value: int | None = None
    canary_loc: int | None = None
    canary_bytes: bytes | None = None

    @property
    def top_addr(self) -> int:
        # highest address belonging to this frame (last return-address byte)
        return self.ret_loc + 7

    def index_of(self, addr: int) -> int:
        return self.top_addr - addr

    def protected_floor(self) -> int:
        if self.canary_loc is not None:
            return self.canary_loc
        if self.rbp_value is not None:
            return self.rbp_value
        return self.ret_loc


class Machine:
    def __init__(self, image: ProgramImage, cfg, stdin: bytes = b"",
                 argv: tuple[str, ...] = ()):
        self.image = image
        self.cfg = cfg
        self.regs = {r: 0 for r in R64}
        self.flags = {"zf": False, "sf": False, "cf": False, "of": False}
        # classic uninitialized-memory fill; a NUL terminator written over
        # it shows up in stack diffs, unlike a NUL over a zeroed stack
        self.stack = bytearray(b"\xcc" * STACK_SIZE)
        self.aux: dict[int, int] = {}
        self.stdin = stdin
        self.stdin_pos = 0
        self.stdout = bytearray()
        self.shadow: list[ShadowFrame] = []
        self.steps = 0
        self.pc: int | None = None
        self.canary_regs: set[str] = set()
        self.warnings: list[str] = []
        self._wm_lo = STACK_TOP
        self._wm_hi = STACK_BASE
        self._setup_argv(argv)

    def _setup_argv(self, argv: tuple[str, ...]) -> None:
        self.argv = argv
        addr = ARGV_BASE
        ptrs = []
        for a in argv:
            data = a.encode() + b"\0"
            for i, b in enumerate(data):
                self.aux[addr + i] = b
            ptrs.append(addr)
            addr += len(data)
        table = addr
        for i, p in enumerate(ptrs):
            for k, b in enumerate(p.to_bytes(8, "little")):
                self.aux[table + i * 8 + k] = b
        self.regs["rdi"] = len(argv)
        self.regs["rsi"] = table if argv else 0

    # --- memory ---------------------------------------------------------

    def in_stack(self, addr: int) -> bool:
        return STACK_BASE <= addr < STACK_TOP

    def rd_mem(self, addr: int, n: int) -> bytes:
        out = bytearray()
        for a in range(addr, addr + n):
            if self.in_stack(a):
                out.append(self.stack[a - STACK_BASE])
            else:
                out.append(self.aux.get(a, 0))
        return bytes(out)

    def wr_mem(self, addr: int, data: bytes) -> None:
        for i, b in enumerate(data):
            a = addr + i
            if self.in_stack(a):
                self.stack[a - STACK_BASE] = b
                self._wm_lo = min(self._wm_lo, a)
                self._wm_hi = max(self._wm_hi, a)
            elif a in self.aux or ARGV_BASE <= a < ARGV_BASE + 0x10000:
                self.aux[a] = b
            else:
                raise CrashSignal(CAUSE_OOS)

    def rd_cstr(self, addr: int, cap: int | None = None) -> bytes:
        cap = cap if cap is not None else self.cfg.max_input_len * 2
        out = bytearray()
        for k in range(cap):
            b = self.rd_mem(addr + k, 1)[0]
            if b == 0:
                break
            out.append(b)
        return bytes(out)

    # --- registers ------------------------------------------------------

    def rd_reg(self, name: str, width: int = 8) -> int:
        v = self.regs[name]
        return v & ((1 << (width * 8)) - 1)

    def wr_reg(self, name: str, value: int, width: int = 8) -> None:
        mask = (1 << (width * 8)) - 1
        value &= mask
        if width in (8, 4):
            self.regs[name] = value       # 32-bit writes zero-extend
        else:
            old = self.regs[name]
            self.regs[name] = (old & ~mask) | value
        self.canary_regs.discard(name)

    # --- snapshots (capture mode) ----------------------------------------

    def snapshot(self) -> tuple[bytes, int, int]:
        lo, hi = self._wm_lo, self._wm_hi
        self._wm_lo, self._wm_hi = STACK_TOP, STACK_BASE
        return (bytes(self.stack), lo, hi)

    def diff_stack(self, snap: tuple[bytes, int, int]) -> dict[int, tuple[int, int]]:
        """Changed stack addresses since the snapshot: addr -> (old, new)."""
        old, _, _ = snap
        lo = min(self._wm_lo, snap[1]) - STACK_BASE
        hi = max(self._wm_hi, snap[2]) - STACK_BASE
        out: dict[int, tuple[int, int]] = {}
        if lo > hi:
            return out
        lo = max(lo, 0)
        hi = min(hi, STACK_SIZE - 1)
        for off in range(lo, hi + 1):
            if self.stack[off] != old[off]:
                out[STACK_BASE + off] = (old[off], self.stack[off])
        return out

    def fork(self) -> "Machine":
        clone = Machine.__new__(Machine)
        clone.image = self.image
        clone.cfg = self.cfg
        clone.regs = dict(self.regs)
        clone.flags = dict(self.flags)
        clone.stack = bytearray(self.stack)
        clone.aux = dict(self.aux)
        clone.stdin = self.stdin
        clone.stdin_pos = self.stdin_pos
        clone.stdout = bytearray(self.stdout)
        clone.shadow = [ShadowFrame(**vars(f)) for f in self.shadow]
        clone.steps = self.steps
        clone.pc = self.pc
        clone.canary_regs = set(self.canary_regs)
        clone.warnings = list(self.warnings)
        clone._wm_lo = self._wm_lo
        clone._wm_hi = self._wm_hi
        clone.argv = self.argv
        return clone

    # --- execution --------------------------------------------------------

    def start(self, entry: int) -> None:
        self.regs["rsp"] = ENTRY_RSP
        self._push_qword(SENTINEL_RET)
        fn = self.image.function_of(entry) or f"sub_{entry:x}"
        self.shadow.append(ShadowFrame(func=fn, ret_loc=self.regs["rsp"],
                                       ret_bytes=SENTINEL_RET.to_bytes(8, "little")))
        self.pc = entry

    def _push_qword(self, value: int) -> None:
        self.regs["rsp"] -= 8
        self.wr_mem(self.regs["rsp"], value.to_bytes(8, "little"))

    def run(self) -> None:
        """Run to completion; raises FinishedSignal, CrashSignal or budget."""
        while True:
            self.step()

    def run_to(self, stop: int) -> None:
        """Run until the next instruction to execute is `stop`."""
        while self.pc != stop:
            if self.pc is None:
                raise TargetUnreachable(f"execution ended before {stop:#x}")
            self.step()

    def step(self) -> None:
        if self.steps >= self.cfg.step_budget:
            raise StepBudgetExceeded(f"step budget {self.cfg.step_budget} exhausted")
        if self.pc is None or self.pc not in self.image.instructions:
            raise FinishedSignal()
        ins = self.image.instructions[self.pc]
        self.steps += 1
        nxt = self.image.next_address(self.pc)
        self.pc = self._execute(ins, nxt)

    # instruction dispatch

    def _execute(self, ins: Instruction, nxt: int | None) -> int | None:
        m = ins.mnemonic
        if m in ("nop", "endbr64"):
            return nxt
        if m == "push":
            return self._do_push(ins, nxt)
        if m == "pop":
            val = int.from_bytes(self.rd_mem(self.regs["rsp"], 8), "little")
            self.regs["rsp"] += 8
            self.wr_reg(ins.operands[0].reg, val)
            return nxt
        if m == "mov":
            self._do_mov(ins)
            return nxt
        if m in CMOV:
            if self._cond(m[4:]):
                self._do_mov(ins)
            return nxt
        if m == "xchg":
            a, b = ins.operands
            va, wa = self._read_operand(a)
            vb, _ = self._read_operand(b)
            self._write_operand(a, vb, wa)
            self._write_operand(b, va, wa)
            return nxt
        if m == "lea":
            dst, src = ins.operands
            self.wr_reg(dst.reg, self._mem_addr(src))
            return nxt
        if m in ("add", "sub"):
            self._do_arith(ins, m)
            return nxt
        if m == "cmp":
            a, b = ins.operands
            va, w = self._read_operand(a)
            vb, _ = self._read_operand(b, width=w)
            self._set_arith_flags(va, vb, (va - vb), w, sub=True)
            return nxt
        if m == "test":
            a, b = ins.operands
            va, w = self._read_operand(a)
            vb, _ = self._read_operand(b, width=w)
            res = va & vb
            self.flags.update(zf=res == 0, sf=bool(res >> (w * 8 - 1) & 1),
                              cf=False, of=False)
            return nxt
        if m == "jmp":
            return ins.target()
        if m in JCC:
            return ins.target() if self._cond(m[1:]) else nxt
        if m == "call":
            return self._do_call(ins, nxt)
        if m == "ret":
            return self._do_ret()
        if m == "safecall":
            self._do_safecall(ins)
            return nxt
        # unknown mnemonics parse as opaque and execute as no-ops
        self.warnings.append(f"no-op for unknown instruction at {ins.address:#x}")
        return nxt

    def _do_push(self, ins: Instruction, nxt: int | None) -> int | None:
        op = ins.operands[0]
        val, _ = self._read_operand(op)
        self._push_qword(val)
        if (op.kind == REG and op.reg == "rbp" and self.shadow
                and self.shadow[-1].rbp_loc is None
                and self.regs["rsp"] == self.shadow[-1].ret_loc - 8):
            f = self.shadow[-1]
            f.rbp_loc = self.regs["rsp"]
            f.rbp_bytes = self.rd_mem(f.rbp_loc, 8)
            f.rbp_value = f.rbp_loc
        return nxt

    def _do_mov(self, ins: Instruction) -> None:
        dst, src = ins.operands
        if src.kind == MEM and src.base == "fs" and src.disp == CANARY_FS_OFFSET:
            if dst.kind == REG:
                self.wr_reg(dst.reg, CANARY_VALUE)
                self.canary_regs.add(dst.reg)
            return
        width = self._mov_width(dst, src)
        src_is_canary = src.kind == REG and src.reg in self.canary_regs
        val, _ = self._read_operand(src, width=width)
        if dst.kind == REG and src_is_canary:
            self.wr_reg(dst.reg, val, width)
            self.canary_regs.add(dst.reg)
            return
        self._write_operand(dst, val, width)
        if dst.kind == MEM and src_is_canary and self.shadow:
            addr = self._mem_addr(dst)
            f = self._frame_containing(addr) or self.shadow[-1]
            f.canary_loc = addr
            f.canary_bytes = self.rd_mem(addr, 8)

    def _mov_width(self, dst, src) -> int:
        if dst.kind == MEM and dst.width:
            return dst.width
        if src.kind == REG:
            return src.width or 8
        if dst.kind == REG:
            return dst.width or 8
        return src.width or 8

    def _do_arith(self, ins: Instruction, m: str) -> None:
        dst, src = ins.operands
        va, w = self._read_operand(dst)
        vb, _ = self._read_operand(src, width=w)
        res = va - vb if m == "sub" else va + vb
        self._set_arith_flags(va, vb, res, w, sub=(m == "sub"))
        self._write_operand(dst, res & ((1 << (w * 8)) - 1), w)

    def _set_arith_flags(self, a: int, b: int, res: int, w: int, *, sub: bool) -> None:
        bits = w * 8
        mask = (1 << bits) - 1
        r = res & mask
        sa = (a >> (bits - 1)) & 1
        sb = (b >> (bits - 1)) & 1
        sr = (r >> (bits - 1)) & 1
        self.flags["zf"] = r == 0
        self.flags["sf"] = bool(sr)
        if sub:
            self.flags["cf"] = a < b
            self.flags["of"] = (sa != sb) and (sr != sa)
        else:
            self.flags["cf"] = res > mask
            self.flags["of"] = (sa == sb) and (sr != sa)

    def _cond(self, cc: str) -> bool:
        f = self.flags
        table = {
            "e": f["zf"], "z": f["zf"], "ne": not f["zf"], "nz": not f["zf"],
            "l": f["sf"] != f["of"], "ge": f["sf"] == f["of"],
            "le": f["zf"] or f["sf"] != f["of"],
            "g": not f["zf"] and f["sf"] == f["of"],
            "b": f["cf"], "ae": not f["cf"],
            "be": f["cf"] or f["zf"], "a": not f["cf"] and not f["zf"],
            "s": f["sf"], "ns": not f["sf"],
        }
        return table[cc]

    def _mem_addr(self, op) -> int:
        return self.rd_reg(op.base) + op.disp

    def _read_operand(self, op, width: int | None = None) -> tuple[int, int]:
        if op.kind == REG:
            w = width or op.width or 8
            return self.rd_reg(op.reg, op.width or 8), op.width or w
        if op.kind == IMM:
            w = width or op.width or 8
            return op.value & ((1 << (w * 8)) - 1), w
        if op.kind == MEM:
            if op.base == "fs" and op.disp == CANARY_FS_OFFSET:
                return CANARY_VALUE, 8
            w = width or op.width or 8
            return int.from_bytes(self.rd_mem(self._mem_addr(op), w), "little"), w
        raise ValueError(f"cannot read operand {op}")

    def _write_operand(self, op, value: int, width: int) -> None:
        if op.kind == REG:
            self.wr_reg(op.reg, value, op.width or width)
        elif op.kind == MEM:
            self.wr_mem(self._mem_addr(op), value.to_bytes(width, "little"))
        else:
            raise ValueError(f"cannot write operand {op}")

    # --- calls and returns ------------------------------------------------

    def _do_call(self, ins: Instruction, nxt: int | None) -> int | None:
        tgt, sym = ins.target(), ins.target_symbol()
        if tgt in self.image.instructions:
            ret_to = nxt if nxt is not None else SENTINEL_RET
            self._push_qword(ret_to if isinstance(ret_to, int) else SENTINEL_RET)
            fn = self.image.function_of(tgt) or (sym or f"sub_{tgt:x}")
            self.shadow.append(ShadowFrame(func=fn, ret_loc=self.regs["rsp"],
                                           ret_bytes=self.rd_mem(self.regs["rsp"], 8)))
            return tgt
        name = (sym or f"sub_{tgt:x}").removesuffix("@plt")
        self._exec_libc(name)
        return nxt

    def _do_ret(self) -> int | None:
        val = int.from_bytes(self.rd_mem(self.regs["rsp"], 8), "little")
        self.regs["rsp"] += 8
        if self.shadow:
            frame = self.shadow.pop()
            self._shadow_check(frame)
        if val == SENTINEL_RET:
            raise FinishedSignal()
        return val

    def _shadow_check(self, frame: ShadowFrame) -> None:
        if frame.canary_loc is not None and self.rd_mem(frame.canary_loc, 8) != frame.canary_bytes:
            raise CrashSignal(CAUSE_CANARY)
        if self.rd_mem(frame.ret_loc, 8) != frame.ret_bytes:
            raise CrashSignal(CAUSE_RET)
        if frame.rbp_loc is not None and self.rd_mem(frame.rbp_loc, 8) != frame.rbp_bytes:
            raise CrashSignal(CAUSE_RBP)

    def _frame_containing(self, addr: int) -> ShadowFrame | None:
        best = None
        for f in self.shadow:
            if addr <= f.top_addr and (best is None or f.top_addr < best.top_addr):
                best = f
        return best

    # --- C library semantics -----------------------------------------------

    def _exec_libc(self, name: str) -> None:
        handler = getattr(self, f"_libc_{name}", None)
        if handler is None:
            self.warnings.append(f"call to unmodeled function {name!r} skipped")
            return
        handler()

    def _read_line(self) -> bytes | None:
        if self.stdin_pos >= len(self.stdin):
            return None
        end = self.stdin.find(b"\n", self.stdin_pos)
        if end == -1:
            line = self.stdin[self.stdin_pos:]
            self.stdin_pos = len(self.stdin)
        else:
            line = self.stdin[self.stdin_pos:end]
            self.stdin_pos = end + 1
        return line

    def _libc_strcpy(self) -> None:
        dest, src = self.regs["rdi"], self.regs["rsi"]
        data = self.rd_cstr(src)
        self.wr_mem(dest, data + b"\0")
        self.regs["rax"] = dest

    def _libc_strncpy(self) -> None:
        dest, src, n = self.regs["rdi"], self.regs["rsi"], self.regs["rdx"]
        data = self.rd_cstr(src)[:n]
        self.wr_mem(dest, data + b"\0" * (n - len(data)))
        self.regs["rax"] = dest

    def _libc_strcat(self) -> None:
        dest, src = self.regs["rdi"], self.regs["rsi"]
        dlen = len(self.rd_cstr(dest))
        data = self.rd_cstr(src)
        self.wr_mem(dest + dlen, data + b"\0")
        self.regs["rax"] = dest

    def _libc_gets(self) -> None:
        dest = self.regs["rdi"]
        line = self._read_line()
        if line is None:
            self.regs["rax"] = 0
            return
        self.wr_mem(dest, line + b"\0")
        self.regs["rax"] = dest

    def _libc_fgets(self) -> None:
        dest, n = self.regs["rdi"], self.regs["rsi"]
        if n <= 0 or self.stdin_pos >= len(self.stdin):
            self.regs["rax"] = 0
            return
        take = self.stdin[self.stdin_pos:self.stdin_pos + n - 1]
        cut = take.find(b"\n")
        if cut != -1:
            take = take[:cut + 1]
        self.stdin_pos += len(take)
        self.wr_mem(dest, take + b"\0")
        self.regs["rax"] = dest

    def _libc_memset(self) -> None:
        dest, c, n = self.regs["rdi"], self.regs["rsi"] & 0xFF, self.regs["rdx"]
        self.wr_mem(dest, bytes([c]) * n)
        self.regs["rax"] = dest

    def _libc_sprintf(self) -> None:
        dest = self.regs["rdi"]
        out = self._render_format(self.rd_cstr(self.regs["rsi"]),
                                  ["rdx", "rcx", "r8", "r9"])
        self.wr_mem(dest, out + b"\0")
        self.regs["rax"] = len(out)

    def _libc_snprintf(self) -> None:
        dest, n = self.regs["rdi"], self.regs["rsi"]
        out = self._render_format(self.rd_cstr(self.regs["rdx"]), ["rcx", "r8", "r9"])
        if n > 0:
            self.wr_mem(dest, out[:n - 1] + b"\0")
        self.regs["rax"] = len(out)

    def _libc_printf(self) -> None:
        out = self._render_format(self.rd_cstr(self.regs["rdi"]),
                                  ["rsi", "rdx", "rcx", "r8", "r9"])
        self.stdout.extend(out)
        self.regs["rax"] = len(out)

    def _libc_puts(self) -> None:
        self.stdout.extend(self.rd_cstr(self.regs["rdi"]) + b"\n")
        self.regs["rax"] = 1

    def _libc_scanf(self) -> None:
        fmt = self.rd_cstr(self.regs["rdi"]).decode("latin-1")
        dests = ["rsi", "rdx", "rcx", "r8", "r9"]
        count = 0
        for conv, width in _parse_scanf_format(fmt):
            if count >= len(dests):
                break
            ptr = self.regs[dests[count]]
            if conv == "s":
                token = self._read_token(width)
                if token is None:
                    break
                self.wr_mem(ptr, token + b"\0")
            elif conv == "d":
                token = self._read_token(None)
                if token is None:
                    break
                try:
                    value = int(token)
                except ValueError:
                    break
                self.wr_mem(ptr, (value & 0xFFFFFFFF).to_bytes(4, "little"))
            count += 1
        self.regs["rax"] = count

    def _read_token(self, width: int | None) -> bytes | None:
        while self.stdin_pos < len(self.stdin) and self.stdin[self.stdin_pos] in b" \t\n":
            self.stdin_pos += 1
        if self.stdin_pos >= len(self.stdin):
            return None
        out = bytearray()
        while self.stdin_pos < len(self.stdin) and self.stdin[self.stdin_pos] not in b" \t\n":
            if width is not None and len(out) >= width:
                break
            out.append(self.stdin[self.stdin_pos])
            self.stdin_pos += 1
        return bytes(out)

    def _render_format(self, fmt: bytes, arg_regs: list[str]) -> bytes:
        out = bytearray()
        args = list(arg_regs)
        i = 0
        text = fmt.decode("latin-1")
        while i < len(text):
            ch = text[i]
            if ch != "%":
                out.append(ord(ch))
                i += 1
                continue
            i += 1
            if i >= len(text):
                break
            conv = text[i]
            i += 1
            if conv == "%":
                out.append(ord("%"))
                continue
            if not args:
                raise UnsupportedFormat("more conversions than argument registers")
            reg = args.pop(0)
            val = self.regs[reg]
            if conv == "s":
                out.extend(self.rd_cstr(val))
            elif conv == "d":
                signed = val - (1 << 64) if val >> 63 else val
                out.extend(str(signed).encode())
            elif conv == "x":
                out.extend(format(val, "x").encode())
            elif conv == "c":
                out.append(val & 0xFF)
            else:
                raise UnsupportedFormat(f"%{conv} is not supported")
        return bytes(out)

    # --- safecall: bounded replacement semantics ----------------------------

    def _do_safecall(self, ins: Instruction) -> None:
        op = ins.operands[0]
        template = op.symbol
        dest = self.regs["rdi"]
        bound = op.value if op.value is not None else self._runtime_bound(dest)
        bound = max(bound, 1)
        if template == "bounded_copy":
            data = self.rd_cstr(self.regs["rsi"])[:bound - 1]
            self.wr_mem(dest, data + b"\0")
            self.regs["rax"] = dest
        elif template == "bounded_append":
            dlen = len(self.rd_cstr(dest))
            room = bound - 1 - dlen
            if room <= 0:
                self.wr_mem(dest + dlen, b"\0")
            else:
                data = self.rd_cstr(self.regs["rsi"])[:room]
                self.wr_mem(dest + dlen, data + b"\0")
            self.regs["rax"] = dest
        elif template == "bounded_format":
            out = self._render_format(self.rd_cstr(self.regs["rsi"]),
                                      ["rdx", "rcx", "r8", "r9"])
            self.wr_mem(dest, out[:bound - 1] + b"\0")
            self.regs["rax"] = min(len(out), bound - 1)
        elif template == "bounded_readline":
            line = self._read_line()
            if line is None:
                self.regs["rax"] = 0
                return
            self.wr_mem(dest, line[:bound - 1] + b"\0")
            self.regs["rax"] = dest
        elif template == "bounded_scan":
            # scanf-style: rdi holds the format, rsi the destination
            dest = self.regs["rsi"]
            bound = op.value if op.value is not None else self._runtime_bound(dest)
            token = self._read_token(max(bound - 1, 1))
            if token is None:
                self.regs["rax"] = 0
                return
            self.wr_mem(dest, token + b"\0")
            self.regs["rax"] = 1
        else:
            self.warnings.append(f"unknown safecall template {template!r}")

    def _runtime_bound(self, dest: int) -> int:
        best = None
        for f in self.shadow:
            floor = f.protected_floor()
            if floor > dest and (best is None or floor < best):
                best = floor
        if best is None:
            return 16
        return best - dest


def _parse_scanf_format(fmt: str) -> list[tuple[str, int | None]]:
    convs: list[tuple[str, int | None]] = []
    i = 0
    while i < len(fmt):
        if fmt[i] != "%":
            i += 1
            continue
        i += 1
        width = ""
        while i < len(fmt) and fmt[i].isdigit():
            width += fmt[i]
            i += 1
        if i < len(fmt):
            convs.append((fmt[i], int(width) if width else None))
            i += 1
    return convs
