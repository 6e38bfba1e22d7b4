#!/usr/bin/env python3
"""Regenerate the assembler-oracle fixtures under tests/fixtures/.

Requires GNU binutils (as, ld, objdump). The outputs are committed so the
test suite does not depend on a toolchain:

  decode_oracle.json   encoding -> mnemonic/length for the emulator subset,
                       plus the full 256-entry modrm sweep behind 0F AE
  exec_wrpkru.elf      minimal static ELF64 whose only exec segment holds
                       one wrpkru instruction
"""

import json
import re
import subprocess
import tempfile
from pathlib import Path

FIXTURES = Path(__file__).resolve().parent.parent / "tests" / "fixtures"

# AT&T source lines covering every encoding the emulator claims to decode,
# plus a few deliberate non-members (checked as unsupported).
SUBSET_ASM = [
    "nop",
    "movl $0x11223344, %eax",
    "movl $0x0, %ecx",
    "movl $0xdeadbeef, %edi",
    "movl %eax, %ecx",
    "movl %esi, %edi",
    "movl (%rsi), %ebx",
    "movl 0x8(%rsi), %ebx",
    "movl 0x12345678(%rsi), %ebx",
    "movl %ebx, (%rdi)",
    "movl %ebx, 0x10(%rdi)",
    "movl %ebx, 0x1000(%rdi)",
    "addl $0x10, %eax",
    "addl $0x1000, %ebx",
    "cmpl $0xc, %eax",
    "cmpl $0x0, %ecx",
    "jmp .+0x10",
    "jmp .+0x1000",
    "je .+0x10",
    "jne .+0x10",
    "call .+0x1000",
    "ret",
    "push %rax",
    "push %rdi",
    "pop %rax",
    "pop %rdi",
    "xorl %eax, %eax",
    "xorl %ecx, %ecx",
    "xorl %edx, %edx",
    "int3",
    "rdpkru",
    "wrpkru",
    "xrstor (%rax)",
    "xrstor (%rdi)",
    "xrstor 0x8(%rbx)",
    "xrstor 0x12345678(%rcx)",
]


def assemble(line: str) -> bytes:
    with tempfile.TemporaryDirectory() as td:
        src = Path(td) / "a.s"
        obj = Path(td) / "a.o"
        out = Path(td) / "a.bin"
        src.write_text(".text\n" + line + "\n")
        subprocess.run(["as", "--64", "-o", obj, src], check=True)
        subprocess.run(
            ["objcopy", "-O", "binary", "--only-section=.text", obj, out],
            check=True,
        )
        return out.read_bytes()


def disassemble_first(raw: bytes) -> tuple[str, int]:
    """Mnemonic and byte length of the first instruction in raw.

    objdump wraps byte listings at 7 per line; the instruction's true length
    is the offset of the next line that carries a mnemonic.
    """
    with tempfile.TemporaryDirectory() as td:
        binf = Path(td) / "raw.bin"
        binf.write_bytes(raw)
        res = subprocess.run(
            ["objdump", "-D", "-b", "binary", "-m", "i386:x86-64", binf],
            check=True,
            capture_output=True,
            text=True,
        )
    rows = []
    for line in res.stdout.splitlines():
        m = re.match(r"\s+([0-9a-f]+):\t((?:[0-9a-f]{2} )+)\s*\t?(\S*)", line)
        if m:
            rows.append((int(m.group(1), 16), len(m.group(2).split()), m.group(3)))
    if not rows or rows[0][0] != 0:
        return "(bad)", 0
    mnemonic = rows[0][2] or "(bad)"
    for off, _count, mnem in rows[1:]:
        if mnem:
            return mnemonic, off
    return mnemonic, rows[-1][0] + rows[-1][1]


def gen_subset() -> list[dict]:
    entries = []
    for line in SUBSET_ASM:
        raw = assemble(line)
        mnemonic, length = disassemble_first(raw + b"\x90" * 4)
        entries.append(
            {
                "asm": line,
                "bytes": raw.hex(),
                "mnemonic": mnemonic,
                "length": length,
            }
        )
        assert length == len(raw), (line, raw.hex(), length)
    return entries


# Raw sequences objdump classifies for us: canonical long-imm forms the
# assembler optimizes away, gate-suffix bytes, invalid encodings, and the
# sib/disp xrstor shapes with every length-relevant corner (base=5 etc).
EXTRA_SEQUENCES = [
    "3d0c000000",          # cmp eax, imm32
    "3d00000000",
    "81c000100000",        # add eax, imm32
    "81f80c000000",        # cmp eax, imm32 (81 /7 form)
    "a900020000",          # test eax, 0x200 (xrstor gate suffix, data only)
    "06",                  # invalid in 64-bit mode
    "0f0101",              # sgdt-family, outside the subset
    "0fae2c2511223344",    # xrstor: sib with base=5, disp32
    "0fae2c24",            # xrstor: sib base=rsp
    "0fae2d11223344",      # xrstor: rip-relative disp32
    "0faeac2411223344",    # xrstor: mod=2 sib disp32
    "0fae6c2408",          # xrstor: mod=1 sib disp8
]


def gen_extras() -> list[dict]:
    entries = []
    for hexseq in EXTRA_SEQUENCES:
        raw = bytes.fromhex(hexseq)
        mnemonic, length = disassemble_first(raw + b"\x90" * 4)
        entries.append({"bytes": hexseq, "mnemonic": mnemonic, "length": length})
    return entries


def gen_modrm_sweep() -> list[dict]:
    """Disassemble 0F AE <modrm> + trailing junk for all 256 modrm bytes."""
    trailer = bytes([0x11, 0x22, 0x33, 0x44, 0x55, 0x66, 0x77, 0x88])
    entries = []
    for modrm in range(256):
        raw = bytes([0x0F, 0xAE, modrm]) + trailer
        mnemonic, length = disassemble_first(raw)
        entries.append(
            {
                "modrm": modrm,
                "mnemonic": mnemonic,
                "length": length,
            }
        )
    return entries


def gen_elf() -> bytes:
    with tempfile.TemporaryDirectory() as td:
        src = Path(td) / "a.s"
        obj = Path(td) / "a.o"
        exe = Path(td) / "a.elf"
        src.write_text(
            ".text\n.globl _start\n_start:\n"
            "xor %ecx, %ecx\nxor %edx, %edx\nwrpkru\nret\n"
        )
        subprocess.run(["as", "--64", "-o", obj, src], check=True)
        subprocess.run(
            ["ld", "-static", "-o", exe, obj, "--entry=_start"], check=True
        )
        return exe.read_bytes()


def main() -> None:
    FIXTURES.mkdir(parents=True, exist_ok=True)
    oracle = {
        "generator": "GNU binutils (as/objdump), x86-64",
        "subset": gen_subset(),
        "extras": gen_extras(),
        "xrstor_modrm_sweep": gen_modrm_sweep(),
    }
    (FIXTURES / "decode_oracle.json").write_text(
        json.dumps(oracle, indent=1) + "\n"
    )
    (FIXTURES / "exec_wrpkru.elf").write_bytes(gen_elf())
    print("wrote", FIXTURES / "decode_oracle.json")
    print("wrote", FIXTURES / "exec_wrpkru.elf")


if __name__ == "__main__":
    main()
