"""Byte scanner for protection-key-modifying instruction sequences.

x86 instructions have no fixed size, so code bytes are scanned at every
byte offset: a dangerous sequence hidden in the operand of another
instruction is just as executable as an intentional one. Two sequences
matter:

  wrpkru   0F 01 EF (always 3 bytes)
  xrstor   0F AE /5 with a memory operand: modrm.reg == 5 and
           modrm.mod != 3 (mod 3 encodes lfence), plus sib/displacement
           bytes as dictated by the addressing form; 3 to 8 bytes total

Encodings come from the ISA; the committed decode_oracle.json fixture was
generated with a binutils round trip and pins every length above.

An occurrence is safe only when the bytes immediately following it match a
configured suffix pattern (the call-gate validation sequence). Patterns are
data, not code, so deployments can describe their real gates.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

from .machine import Mapping

# Widest sequence we match (xrstor with sib and disp32); the boundary
# window must cover it so no straddling occurrence escapes.
MAX_OCCURRENCE_LEN = 8
BOUNDARY_WINDOW = 8

assert BOUNDARY_WINDOW >= MAX_OCCURRENCE_LEN


class UnsafeKind(enum.Enum):
    WRPKRU = "wrpkru"
    XRSTOR = "xrstor"


@dataclass(frozen=True)
class SafePattern:
    """Suffix template that makes a preceding occurrence a call gate.

    suffix holds one int per byte, with None as a wildcard position.
    """

    name: str
    suffix: tuple[Optional[int], ...]
    applies_to: UnsafeKind

    def __post_init__(self) -> None:
        if not self.suffix:
            raise ValueError("empty suffix template")
        if all(b is None for b in self.suffix):
            raise ValueError("suffix template cannot be all wildcards")

    def matches(self, data: bytes, at: int) -> bool:
        if at + len(self.suffix) > len(data):
            return False
        return all(
            want is None or data[at + i] == want
            for i, want in enumerate(self.suffix)
        )


@dataclass(frozen=True)
class UnsafeOccurrence:
    addr: int
    kind: UnsafeKind
    safe: bool
    spanning: bool
    length: int

    def report_line(self) -> str:
        status = "safe" if self.safe else "unsafe"
        layout = "spanning" if self.spanning else "contig"
        return f"{self.addr:#x} {self.kind.value} {status} {layout} len={self.length}"

    def key(self) -> tuple[int, str, int]:
        """Identity irrespective of classification context."""
        return (self.addr, self.kind.value, self.length)


def match_at(data: bytes, i: int) -> Optional[tuple[UnsafeKind, int]]:
    """Kind and length of the sequence starting at data[i], if complete."""
    if data[i] != 0x0F or i + 3 > len(data):
        return None
    b1 = data[i + 1]
    if b1 == 0x01:
        if data[i + 2] == 0xEF:
            return UnsafeKind.WRPKRU, 3
        return None
    if b1 != 0xAE:
        return None
    modrm = data[i + 2]
    mod, reg, rm = modrm >> 6, (modrm >> 3) & 7, modrm & 7
    if reg != 5 or mod == 3:
        return None
    length = 3
    if rm == 4:  # sib byte
        if i + 4 > len(data):
            return None
        length += 1
        if mod == 0 and data[i + 3] & 7 == 5:
            length += 4
    elif mod == 0 and rm == 5:  # rip-relative
        length += 4
    if mod == 1:
        length += 1
    elif mod == 2:
        length += 4
    if i + length > len(data):
        return None
    return UnsafeKind.XRSTOR, length


def classify(
    data: bytes, at: int, kind: UnsafeKind, length: int, patterns: Sequence[SafePattern]
) -> bool:
    """True when a configured gate suffix immediately follows."""
    return any(
        p.applies_to is kind and p.matches(data, at + length) for p in patterns
    )


def scan_bytes(
    data: bytes, base: int, patterns: Sequence[SafePattern] = ()
) -> list[UnsafeOccurrence]:
    """Every occurrence that begins in data, in ascending address order.

    Sequences truncated by the end of the buffer are not reported; adjacency
    with neighboring bytes is the business of scan_boundary.
    """
    out = []
    for i in range(len(data)):
        if data[i] != 0x0F:
            continue
        m = match_at(data, i)
        if m is None:
            continue
        kind, length = m
        out.append(
            UnsafeOccurrence(
                addr=base + i,
                kind=kind,
                safe=classify(data, i, kind, length, patterns),
                spanning=False,
                length=length,
            )
        )
    return out


def scan_boundary(
    left: Mapping,
    left_bytes: bytes,
    right: Mapping,
    right_bytes: bytes,
    patterns: Sequence[SafePattern] = (),
) -> list[UnsafeOccurrence]:
    """Occurrences that straddle the seam between two adjacent mappings.

    Non-adjacent mappings have no seam and yield nothing. The window is the
    last BOUNDARY_WINDOW bytes of left joined with the head of right; only
    matches that start in left and end past the seam are reported (anything
    else is scan_bytes territory). Extra right-side bytes are kept so
    suffix classification sees the same context a full concatenated scan
    would.
    """
    if left.start + left.length != right.start:
        return []
    take_left = min(BOUNDARY_WINDOW, len(left_bytes))
    max_suffix = max((len(p.suffix) for p in patterns), default=0)
    take_right = min(BOUNDARY_WINDOW + max_suffix, len(right_bytes))
    window = left_bytes[len(left_bytes) - take_left :] + right_bytes[:take_right]
    window_base = right.start - take_left

    out = []
    for occ in scan_bytes(window, window_base, patterns):
        if occ.addr < right.start < occ.addr + occ.length:
            out.append(
                UnsafeOccurrence(
                    addr=occ.addr,
                    kind=occ.kind,
                    safe=occ.safe,
                    spanning=True,
                    length=occ.length,
                )
            )
    return out


def scan_mapping(
    state, mapping: Mapping, patterns: Sequence[SafePattern] = ()
) -> list[UnsafeOccurrence]:
    """scan_bytes over a mapping plus boundary scans with both neighbors."""
    occurrences = scan_bytes(mapping.bytes(), mapping.start, patterns)
    left = state.adjacent_left(mapping)
    if left is not None:
        occurrences += scan_boundary(left, left.bytes(), mapping, mapping.bytes(), patterns)
    right = state.adjacent_right(mapping)
    if right is not None:
        occurrences += scan_boundary(mapping, mapping.bytes(), right, right.bytes(), patterns)
    return sorted(occurrences, key=lambda o: o.addr)


# ---- default gate patterns ----------------------------------------------


def erim_gate_patterns(allowed_values: Sequence[int]) -> list[SafePattern]:
    """Default call-gate suffixes.

    A gate wrpkru is immediately followed by a compare of eax against the
    expected register image and a conditional jump to an abort path:
        cmp eax, imm32 ; jne <abort>
    One pattern per permitted image (entry and exit values). The xrstor
    gate checks that bit 9 of eax is clear:
        test eax, 0x200 ; jne <abort>
    Jump displacements are wildcarded; the paper-described check is
    semantic, so the byte templates are configuration defaults.
    """
    patterns = []
    for value in allowed_values:
        suffix = (
            0x3D,
            value & 0xFF,
            (value >> 8) & 0xFF,
            (value >> 16) & 0xFF,
            (value >> 24) & 0xFF,
            0x75,
            None,
        )
        patterns.append(
            SafePattern(f"wrpkru-gate-{value:#x}", suffix, UnsafeKind.WRPKRU)
        )
    patterns.append(
        SafePattern(
            "xrstor-bit9-check",
            (0xA9, 0x00, 0x02, 0x00, 0x00, 0x75, None),
            UnsafeKind.XRSTOR,
        )
    )
    return patterns
