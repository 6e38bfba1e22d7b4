"""Minimal ELF64 program-header walk: executable PT_LOAD segments only."""

from __future__ import annotations

import struct
from dataclasses import dataclass

ELF_MAGIC = b"\x7fELF"
ELFCLASS64 = 2
ELFDATA2LSB = 1
PT_LOAD = 1
PF_X = 1


class NotElf(ValueError):
    pass


class MalformedElf(ValueError):
    pass


@dataclass(frozen=True)
class ElfExecSegment:
    vaddr: int
    data: bytes
    flags: int


def elf_exec_segments(blob: bytes) -> list[ElfExecSegment]:
    """Executable load segments of a 64-bit little-endian ELF image.

    File bytes are sliced per segment offset/filesz; segments lacking the
    execute flag are skipped (the scanner only cares about fetchable bytes).
    """
    if len(blob) < 16 or blob[:4] != ELF_MAGIC:
        raise NotElf("bad ELF magic")
    if blob[4] != ELFCLASS64 or blob[5] != ELFDATA2LSB:
        raise NotElf("only 64-bit little-endian objects are supported")
    if len(blob) < 64:
        raise MalformedElf("truncated ELF header")
    e_phoff, = struct.unpack_from("<Q", blob, 32)
    e_phentsize, e_phnum = struct.unpack_from("<HH", blob, 54)
    if e_phentsize < 56:
        raise MalformedElf(f"bad program header entry size {e_phentsize}")
    segments = []
    for i in range(e_phnum):
        off = e_phoff + i * e_phentsize
        if off + 56 > len(blob):
            raise MalformedElf(f"program header {i} out of range")
        p_type, p_flags, p_offset, p_vaddr, _paddr, p_filesz = struct.unpack_from(
            "<IIQQQQ", blob, off
        )
        if p_type != PT_LOAD or not p_flags & PF_X:
            continue
        if p_offset + p_filesz > len(blob):
            raise MalformedElf(f"segment {i} data out of range")
        segments.append(
            ElfExecSegment(vaddr=p_vaddr, data=blob[p_offset : p_offset + p_filesz], flags=p_flags)
        )
    return segments
