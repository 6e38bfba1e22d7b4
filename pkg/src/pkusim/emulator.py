"""Decode-and-execute engine for the x86-64 subset the simulator runs.

The same decode/execute pair backs both the native step loop and the
monitor's fault-and-emulate path, which keeps the two routes behaviorally
identical by construction. Anything outside the subset decodes to None
(unsupported) instead of guessing.

Register-update instructions relevant to protection keys:
  wrpkru (0F 01 EF)  requires ecx=edx=0, then pkru := eax
  rdpkru (0F 01 EE)  requires ecx=0, then eax := pkru, edx := 0
  xrstor (0F AE /5)  loads pkru from the save area only when eax bit 9 is set

The xrstor save area is reduced to a single 32-bit word at
XRSTOR_PKRU_OFFSET within the memory operand; the real XSAVE layout is out
of scope here.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Optional

from .machine import (
    Access,
    MemStatus,
    Route,
    SimState,
    StepResult,
    StepStatus,
    log_pkru_write,
    mem_access,
)

XRSTOR_PKRU_OFFSET = 0

# modrm register numbering; index 4 is the stack pointer.
REG_NAMES = ("eax", "ecx", "edx", "ebx", "rsp", "ebp", "esi", "edi")
REG_INDEX = {name: i for i, name in enumerate(REG_NAMES)}

MASK32 = 0xFFFFFFFF
MASK64 = 0xFFFFFFFFFFFFFFFF


class Op(enum.Enum):
    NOP = enum.auto()
    MOV_REG_IMM = enum.auto()
    MOV_REG_REG = enum.auto()
    MOV_REG_MEM = enum.auto()
    MOV_MEM_REG = enum.auto()
    ADD_REG_IMM = enum.auto()
    CMP_REG_IMM = enum.auto()
    JMP_REL = enum.auto()
    JCC_REL = enum.auto()
    CALL_REL = enum.auto()
    RET = enum.auto()
    PUSH_REG = enum.auto()
    POP_REG = enum.auto()
    XOR_REG_REG = enum.auto()
    INT3 = enum.auto()
    RDPKRU = enum.auto()
    WRPKRU = enum.auto()
    XRSTOR = enum.auto()


@dataclass(frozen=True)
class MemOperand:
    base: int  # register index
    disp: int = 0


@dataclass(frozen=True)
class Instruction:
    op: Op
    length: int
    dst: Optional[int] = None
    src: Optional[int] = None
    imm: Optional[int] = None
    mem: Optional[MemOperand] = None
    cond: Optional[str] = None  # "e" | "ne"
    rel: Optional[int] = None


def _modrm(b: int) -> tuple[int, int, int]:
    return b >> 6, (b >> 3) & 7, b & 7


def _s8(b: int) -> int:
    return b - 256 if b >= 128 else b


def _s32(raw: bytes) -> int:
    return struct.unpack("<i", raw)[0]


def _u32(raw: bytes) -> int:
    return struct.unpack("<I", raw)[0]


def _mem_operand(raw: bytes, at: int) -> Optional[tuple[MemOperand, int]]:
    """Decode the subset's memory addressing forms starting at the modrm.

    Supported: [reg], [reg+disp8], [reg+disp32] with a plain base register
    (no SIB, no RIP-relative). Returns the operand and total modrm+disp size.
    """
    if at >= len(raw):
        return None
    mod, _reg, rm = _modrm(raw[at])
    if mod == 3 or rm == 4 or (mod == 0 and rm == 5):
        return None
    if mod == 0:
        return MemOperand(rm, 0), 1
    if mod == 1:
        if at + 2 > len(raw):
            return None
        return MemOperand(rm, _s8(raw[at + 1])), 2
    if at + 5 > len(raw):
        return None
    return MemOperand(rm, _s32(raw[at + 1 : at + 5])), 5


def decode(raw: bytes) -> Optional[Instruction]:
    """Decode the instruction at raw[0]; None when outside the subset."""
    if not raw:
        return None
    b0 = raw[0]

    if b0 == 0x90:
        return Instruction(Op.NOP, 1)
    if b0 == 0xCC:
        return Instruction(Op.INT3, 1)
    if b0 == 0xC3:
        return Instruction(Op.RET, 1)
    if 0xB8 <= b0 <= 0xBF:
        if len(raw) < 5:
            return None
        return Instruction(Op.MOV_REG_IMM, 5, dst=b0 - 0xB8, imm=_u32(raw[1:5]))
    if 0x50 <= b0 <= 0x57:
        return Instruction(Op.PUSH_REG, 1, src=b0 - 0x50)
    if 0x58 <= b0 <= 0x5F:
        return Instruction(Op.POP_REG, 1, dst=b0 - 0x58)
    if b0 in (0x89, 0x8B):
        if len(raw) < 2:
            return None
        mod, reg, rm = _modrm(raw[1])
        if mod == 3:
            dst, src = (rm, reg) if b0 == 0x89 else (reg, rm)
            return Instruction(Op.MOV_REG_REG, 2, dst=dst, src=src)
        memop = _mem_operand(raw, 1)
        if memop is None:
            return None
        mem, size = memop
        if b0 == 0x89:
            return Instruction(Op.MOV_MEM_REG, 1 + size, src=reg, mem=mem)
        return Instruction(Op.MOV_REG_MEM, 1 + size, dst=reg, mem=mem)
    if b0 == 0x31:
        if len(raw) < 2:
            return None
        mod, reg, rm = _modrm(raw[1])
        if mod != 3:
            return None
        return Instruction(Op.XOR_REG_REG, 2, dst=rm, src=reg)
    if b0 == 0x81:
        if len(raw) < 6:
            return None
        mod, reg, rm = _modrm(raw[1])
        if mod != 3 or reg not in (0, 7):
            return None
        op = Op.ADD_REG_IMM if reg == 0 else Op.CMP_REG_IMM
        return Instruction(op, 6, dst=rm, imm=_u32(raw[2:6]))
    if b0 == 0x83:
        if len(raw) < 3:
            return None
        mod, reg, rm = _modrm(raw[1])
        if mod != 3 or reg not in (0, 7):
            return None
        op = Op.ADD_REG_IMM if reg == 0 else Op.CMP_REG_IMM
        return Instruction(op, 3, dst=rm, imm=_s8(raw[2]) & MASK32)
    if b0 == 0x3D:
        if len(raw) < 5:
            return None
        return Instruction(Op.CMP_REG_IMM, 5, dst=REG_INDEX["eax"], imm=_u32(raw[1:5]))
    if b0 == 0xEB:
        if len(raw) < 2:
            return None
        return Instruction(Op.JMP_REL, 2, rel=_s8(raw[1]))
    if b0 == 0xE9:
        if len(raw) < 5:
            return None
        return Instruction(Op.JMP_REL, 5, rel=_s32(raw[1:5]))
    if b0 in (0x74, 0x75):
        if len(raw) < 2:
            return None
        return Instruction(
            Op.JCC_REL, 2, cond="e" if b0 == 0x74 else "ne", rel=_s8(raw[1])
        )
    if b0 == 0xE8:
        if len(raw) < 5:
            return None
        return Instruction(Op.CALL_REL, 5, rel=_s32(raw[1:5]))
    if b0 == 0x0F:
        if len(raw) < 3:
            return None
        if raw[1] == 0x01 and raw[2] == 0xEE:
            return Instruction(Op.RDPKRU, 3)
        if raw[1] == 0x01 and raw[2] == 0xEF:
            return Instruction(Op.WRPKRU, 3)
        if raw[1] == 0xAE:
            mod, reg, _rm = _modrm(raw[2])
            if reg != 5 or mod == 3:
                return None
            memop = _mem_operand(raw, 2)
            if memop is None:
                return None
            mem, size = memop
            return Instruction(Op.XRSTOR, 2 + size, mem=mem)
    return None


# ---- execution ---------------------------------------------------------


def _reg64(thr, idx: int) -> int:
    return thr.regs[REG_NAMES[idx]]


def _set32(thr, idx: int, value: int) -> None:
    # 32-bit destination writes zero-extend, as on x86-64
    thr.regs[REG_NAMES[idx]] = value & MASK32


def _set64(thr, idx: int, value: int) -> None:
    thr.regs[REG_NAMES[idx]] = value & MASK64


def _mem_addr(thr, mem: MemOperand) -> int:
    return (_reg64(thr, mem.base) + mem.disp) & MASK64


def _fault(res, rip) -> StepResult:
    if res.status is MemStatus.PKU_FAULT:
        return StepResult(StepStatus.PKU_FAULT, addr=res.fault_addr)
    return StepResult(
        StepStatus.TERMINATED,
        addr=res.fault_addr,
        reason=f"page fault at {res.fault_addr:#x} (rip {rip:#x})",
    )


def execute(state: SimState, tid: int, ins: Instruction) -> StepResult:
    """Apply one decoded instruction to thread tid.

    Memory operands go through the CPU route, so emulated code obeys page
    and protection-key permissions exactly like natively stepped code. No
    state is mutated when the memory operand faults.
    """
    thr = state.thread(tid)
    rip = thr.regs["rip"]
    next_rip = rip + ins.length
    op = ins.op

    if op is Op.NOP:
        pass
    elif op is Op.INT3:
        return StepResult(StepStatus.TERMINATED, addr=rip, reason="int3")
    elif op is Op.MOV_REG_IMM:
        _set32(thr, ins.dst, ins.imm)
    elif op is Op.MOV_REG_REG:
        _set32(thr, ins.dst, _reg64(thr, ins.src) & MASK32)
    elif op is Op.MOV_REG_MEM:
        res = mem_access(
            state, tid, _mem_addr(thr, ins.mem), Access.READ, Route.CPU, length=4
        )
        if not res.ok:
            return _fault(res, rip)
        _set32(thr, ins.dst, _u32(res.data))
    elif op is Op.MOV_MEM_REG:
        res = mem_access(
            state,
            tid,
            _mem_addr(thr, ins.mem),
            Access.WRITE,
            Route.CPU,
            data=struct.pack("<I", _reg64(thr, ins.src) & MASK32),
        )
        if not res.ok:
            return _fault(res, rip)
    elif op is Op.ADD_REG_IMM:
        value = ((_reg64(thr, ins.dst) & MASK32) + ins.imm) & MASK32
        _set32(thr, ins.dst, value)
        thr.zf = value == 0
    elif op is Op.CMP_REG_IMM:
        thr.zf = (_reg64(thr, ins.dst) & MASK32) == (ins.imm & MASK32)
    elif op is Op.XOR_REG_REG:
        value = (_reg64(thr, ins.dst) ^ _reg64(thr, ins.src)) & MASK32
        _set32(thr, ins.dst, value)
        thr.zf = value == 0
    elif op is Op.JMP_REL:
        next_rip = rip + ins.length + ins.rel
    elif op is Op.JCC_REL:
        taken = thr.zf if ins.cond == "e" else not thr.zf
        if taken:
            next_rip = rip + ins.length + ins.rel
    elif op is Op.CALL_REL:
        rsp = thr.regs["rsp"] - 8
        res = mem_access(
            state, tid, rsp, Access.WRITE, Route.CPU, data=struct.pack("<Q", next_rip)
        )
        if not res.ok:
            return _fault(res, rip)
        thr.regs["rsp"] = rsp
        next_rip = rip + ins.length + ins.rel
    elif op is Op.RET:
        res = mem_access(state, tid, thr.regs["rsp"], Access.READ, Route.CPU, length=8)
        if not res.ok:
            return _fault(res, rip)
        thr.regs["rsp"] += 8
        next_rip = struct.unpack("<Q", res.data)[0]
    elif op is Op.PUSH_REG:
        rsp = thr.regs["rsp"] - 8
        res = mem_access(
            state,
            tid,
            rsp,
            Access.WRITE,
            Route.CPU,
            data=struct.pack("<Q", _reg64(thr, ins.src)),
        )
        if not res.ok:
            return _fault(res, rip)
        thr.regs["rsp"] = rsp
    elif op is Op.POP_REG:
        res = mem_access(state, tid, thr.regs["rsp"], Access.READ, Route.CPU, length=8)
        if not res.ok:
            return _fault(res, rip)
        thr.regs["rsp"] += 8
        _set64(thr, ins.dst, struct.unpack("<Q", res.data)[0])
    elif op is Op.RDPKRU:
        if thr.regs["ecx"] & MASK32:
            return StepResult(
                StepStatus.TERMINATED, addr=rip, reason="rdpkru requires ecx=0"
            )
        thr.regs["eax"] = thr.pkru & MASK32
        thr.regs["edx"] = 0
    elif op is Op.WRPKRU:
        if thr.regs["ecx"] & MASK32 or thr.regs["edx"] & MASK32:
            return StepResult(
                StepStatus.TERMINATED, addr=rip, reason="wrpkru requires ecx=edx=0"
            )
        old = thr.pkru
        thr.pkru = thr.regs["eax"] & MASK32
        log_pkru_write(state, tid, old, thr.pkru, "wrpkru", addr=rip)
    elif op is Op.XRSTOR:
        if thr.regs["eax"] >> 9 & 1:
            res = mem_access(
                state,
                tid,
                _mem_addr(thr, ins.mem) + XRSTOR_PKRU_OFFSET,
                Access.READ,
                Route.CPU,
                length=4,
            )
            if not res.ok:
                return _fault(res, rip)
            old = thr.pkru
            thr.pkru = _u32(res.data)
            log_pkru_write(state, tid, old, thr.pkru, "xrstor", addr=rip)
    else:  # pragma: no cover
        raise AssertionError(f"unhandled op {op}")

    thr.regs["rip"] = next_rip & MASK64
    return StepResult(StepStatus.ADVANCED)


# ---- encoding helpers (scenario authoring and round-trip tests) --------


def enc_nop() -> bytes:
    return b"\x90"


def enc_int3() -> bytes:
    return b"\xcc"


def enc_ret() -> bytes:
    return b"\xc3"


def enc_mov_ri(reg: str, imm: int) -> bytes:
    return bytes([0xB8 + REG_INDEX[reg]]) + struct.pack("<I", imm & MASK32)


def enc_mov_rr(dst: str, src: str) -> bytes:
    return bytes([0x89, 0xC0 | (REG_INDEX[src] << 3) | REG_INDEX[dst]])


def _enc_modrm_mem(reg_field: int, base: str, disp: int) -> bytes:
    rm = REG_INDEX[base]
    if rm == 4 or (rm == 5 and disp == 0):
        raise ValueError(f"unencodable base register {base}")
    if disp == 0:
        return bytes([(reg_field << 3) | rm])
    if -128 <= disp < 128:
        return bytes([0x40 | (reg_field << 3) | rm, disp & 0xFF])
    return bytes([0x80 | (reg_field << 3) | rm]) + struct.pack("<i", disp)


def enc_mov_load(dst: str, base: str, disp: int = 0) -> bytes:
    return b"\x8b" + _enc_modrm_mem(REG_INDEX[dst], base, disp)


def enc_mov_store(base: str, src: str, disp: int = 0) -> bytes:
    return b"\x89" + _enc_modrm_mem(REG_INDEX[src], base, disp)


def enc_add_ri(reg: str, imm: int) -> bytes:
    return bytes([0x81, 0xC0 | REG_INDEX[reg]]) + struct.pack("<I", imm & MASK32)


def enc_cmp_ri(reg: str, imm: int) -> bytes:
    if reg == "eax":
        return b"\x3d" + struct.pack("<I", imm & MASK32)
    return bytes([0x81, 0xF8 | REG_INDEX[reg]]) + struct.pack("<I", imm & MASK32)


def enc_jmp(rel: int) -> bytes:
    if -128 <= rel < 128:
        return bytes([0xEB, rel & 0xFF])
    return b"\xe9" + struct.pack("<i", rel)


def enc_je(rel8: int) -> bytes:
    return bytes([0x74, rel8 & 0xFF])


def enc_jne(rel8: int) -> bytes:
    return bytes([0x75, rel8 & 0xFF])


def enc_call(rel32: int) -> bytes:
    return b"\xe8" + struct.pack("<i", rel32)


def enc_push(reg: str) -> bytes:
    return bytes([0x50 + REG_INDEX[reg]])


def enc_pop(reg: str) -> bytes:
    return bytes([0x58 + REG_INDEX[reg]])


def enc_xor_rr(dst: str, src: str) -> bytes:
    return bytes([0x31, 0xC0 | (REG_INDEX[src] << 3) | REG_INDEX[dst]])


def enc_rdpkru() -> bytes:
    return b"\x0f\x01\xee"


def enc_wrpkru() -> bytes:
    return b"\x0f\x01\xef"


def enc_xrstor(base: str, disp: int = 0) -> bytes:
    return b"\x0f\xae" + _enc_modrm_mem(5, base, disp)
