"""Simulated hardware/OS substrate: address space, PKU checks, thread state.

The protection-key register image is a plain 32-bit int. Key k (0..15) owns
two bits: bit 2k is access-disable (AD), bit 2k+1 is write-disable (WD).
Value 0 permits all data accesses; instruction fetches never consult the
register. Layout follows the ISA / Linux arch/x86 pkru definitions
(PKRU_AD_BIT=1, PKRU_WD_BIT=2, two bits per key).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Union

PAGE_SIZE = 4096
KEY_COUNT = 16
DEFAULT_DEBUG_SLOTS = 4

# Maximum bytes one decoded instruction may occupy (x86 architectural limit).
MAX_INSTR_LEN = 15

REGISTER_NAMES = ("rip", "rsp", "eax", "ecx", "edx", "ebx", "esi", "edi", "ebp")


class Access(enum.Enum):
    READ = "read"
    WRITE = "write"
    FETCH = "fetch"


class Route(enum.Enum):
    """How a memory access reaches memory.

    CPU accesses honor page permissions and protection keys. KERNEL_DIRECT
    models confused-deputy kernel interfaces (process_vm_*, /proc/self/mem,
    ptrace) that only require the address to be mapped.
    """

    CPU = "cpu"
    KERNEL_DIRECT = "kernel-direct"


class Share(enum.Enum):
    PRIVATE = "private"
    SHARED = "shared"
    SHARED_VALIDATE = "shared-validate"


class BackingKind(enum.Enum):
    ANON = "anon"
    FILE = "file"


def pkru_ad(pkru: int, key: int) -> bool:
    return bool(pkru >> (2 * key) & 1)


def pkru_wd(pkru: int, key: int) -> bool:
    return bool(pkru >> (2 * key + 1) & 1)


def pkru_allows(pkru: int, key: int, access: Access) -> bool:
    """Check one access against a register image.

    Fetches always pass. Reads need AD clear; writes need AD and WD clear.
    """
    if not 0 <= key < KEY_COUNT:
        raise ValueError(f"protection key out of range: {key}")
    if access is Access.FETCH:
        return True
    if access is Access.READ:
        return not pkru_ad(pkru, key)
    return not pkru_ad(pkru, key) and not pkru_wd(pkru, key)


def pkru_locked_value(key: int, base: int = 0) -> int:
    """Register image with both AD and WD set for key (domain locked out)."""
    return base | (0b11 << (2 * key))


@dataclass(frozen=True)
class Perms:
    read: bool = False
    write: bool = False
    exec: bool = False

    def __str__(self) -> str:
        return (
            ("r" if self.read else "-")
            + ("w" if self.write else "-")
            + ("x" if self.exec else "-")
        )


@dataclass
class MemObject:
    """Backing bytes of an anonymous mapping (private or shared)."""

    data: bytearray


@dataclass
class FileObject:
    data: bytearray
    mutable: bool = True
    # /proc/self/mem: positions are virtual addresses of the caller,
    # I/O goes through the KERNEL_DIRECT route instead of self.data.
    mem_view: bool = False


@dataclass(eq=False)  # identity semantics: monitors key bookkeeping off it
class Mapping:
    """One contiguous virtual region.

    Bytes live in the backing store (a MemObject or the file's FileObject),
    so writes through any alias of a shared object are visible through all
    aliases and through file I/O.
    """

    start: int
    length: int
    perms: Perms
    pkey: int = 0
    share: Share = Share.PRIVATE
    backing: BackingKind = BackingKind.ANON
    inode: Optional[int] = None
    file_offset: int = 0
    monitor_marked_nonexec: bool = False
    store: Union[MemObject, FileObject, None] = None
    store_offset: int = 0

    def __post_init__(self) -> None:
        if self.start % PAGE_SIZE or self.length % PAGE_SIZE or self.length <= 0:
            raise ValueError(
                f"mapping not page aligned: start={self.start:#x} len={self.length:#x}"
            )
        if self.store is None:
            self.store = MemObject(bytearray(self.length))

    @property
    def end(self) -> int:
        return self.start + self.length

    def contains(self, addr: int) -> bool:
        return self.start <= addr < self.end

    def read_byte(self, addr: int) -> int:
        return self.store.data[self.store_offset + (addr - self.start)]

    def write_byte(self, addr: int, value: int) -> None:
        self.store.data[self.store_offset + (addr - self.start)] = value

    def bytes(self) -> bytes:
        return bytes(self.store.data[self.store_offset : self.store_offset + self.length])

    def executable(self) -> bool:
        return self.perms.exec and not self.monitor_marked_nonexec


@dataclass
class DebugSlot:
    addr: int = 0
    enabled: bool = False


@dataclass
class SeccompFilter:
    """Allow / deny-with-fake-success rules, keyed by syscall name."""

    rules: dict[str, str] = field(default_factory=dict)  # name -> "allow"|"fake_success"

    def fakes(self, name: str) -> bool:
        return self.rules.get(name) == "fake_success"


@dataclass
class ThreadState:
    tid: int
    regs: dict[str, int] = field(default_factory=lambda: {r: 0 for r in REGISTER_NAMES})
    pkru: int = 0
    zf: bool = False
    debug_regs: list[DebugSlot] = field(default_factory=list)
    seccomp: Optional[SeccompFilter] = None
    live: bool = True

    def enabled_breakpoints(self) -> list[int]:
        return [s.addr for s in self.debug_regs if s.enabled]


@dataclass
class LogEvent:
    seq: int
    tid: int
    kind: str
    text: str
    payload: dict = field(default_factory=dict)

    def render(self) -> str:
        return f"{self.seq} t{self.tid} {self.kind} {self.text}".rstrip()


class MemStatus(enum.Enum):
    OK = "ok"
    PAGE_FAULT = "page-fault"
    PKU_FAULT = "pku-fault"


@dataclass
class MemResult:
    status: MemStatus
    data: Optional[bytes] = None
    fault_addr: Optional[int] = None

    @property
    def ok(self) -> bool:
        return self.status is MemStatus.OK


class StepStatus(enum.Enum):
    ADVANCED = "advanced"
    EXEC_FAULT = "exec-fault"
    BREAKPOINT_TRAP = "breakpoint-trap"
    PKU_FAULT = "pku-fault"
    TERMINATED = "terminated"


@dataclass
class StepResult:
    status: StepStatus
    addr: Optional[int] = None
    reason: Optional[str] = None


class SimState:
    """Whole-machine snapshot: one process image with threads and files.

    Mutations happen only through syscall application and instruction
    stepping under the single-threaded engine loop; the event log is
    append-only and drives both the breach oracle and replay checks.
    """

    def __init__(self, trusted_key: int = 1, debug_slots: int = DEFAULT_DEBUG_SLOTS):
        self.mappings: list[Mapping] = []
        self.threads: dict[int, ThreadState] = {}
        self.files: dict[int, FileObject] = {}
        self.path_table: dict[str, int] = {}
        self.fds: dict[int, dict] = {}
        self.shm_objects: dict[str, MemObject] = {}
        self.trusted_key = trusted_key
        self.xom_key: Optional[int] = None
        self.agent = None  # AgentState, attached by the loader
        self.event_log: list[LogEvent] = []
        self.debug_slots = debug_slots
        self.allocated_keys: set[int] = {0, trusted_key}
        self._next_fd = 3
        self._next_inode = 2
        self._seq = 0
        # /proc/self/mem exists in every image and is the canonical
        # sensitive inode.
        self.mem_inode = 1
        self.files[self.mem_inode] = FileObject(bytearray(), mem_view=True)
        self.path_table["/proc/self/mem"] = self.mem_inode

    # ---- bookkeeping -------------------------------------------------

    def log(self, tid: int, kind: str, text: str, **payload) -> LogEvent:
        ev = LogEvent(self._seq, tid, kind, text, payload)
        self._seq += 1
        self.event_log.append(ev)
        return ev

    def thread(self, tid: int) -> ThreadState:
        return self.threads[tid]

    def add_thread(self, tid: Optional[int] = None, pkru: int = 0) -> ThreadState:
        if tid is None:
            tid = max(self.threads, default=-1) + 1
        thr = ThreadState(
            tid=tid,
            pkru=pkru,
            debug_regs=[DebugSlot() for _ in range(self.debug_slots)],
        )
        self.threads[tid] = thr
        return thr

    def live_threads(self) -> list[ThreadState]:
        """Live entries, as /proc/self/task would list them."""
        return [t for t in self.threads.values() if t.live]

    def new_inode(self) -> int:
        self._next_inode += 1
        return self._next_inode

    def new_fd(self) -> int:
        fd = self._next_fd
        self._next_fd += 1
        return fd

    def add_file(self, path: str, data: bytes = b"", mutable: bool = True) -> int:
        inode = self.new_inode()
        self.files[inode] = FileObject(bytearray(data), mutable=mutable)
        self.path_table[path] = inode
        return inode

    # ---- address space -----------------------------------------------

    def mapping_at(self, addr: int) -> Optional[Mapping]:
        for m in self.mappings:
            if m.contains(addr):
                return m
        return None

    def mappings_overlapping(self, start: int, length: int) -> list[Mapping]:
        end = start + length
        return sorted(
            (m for m in self.mappings if m.start < end and start < m.end),
            key=lambda m: m.start,
        )

    def add_mapping(self, m: Mapping) -> Mapping:
        if self.mappings_overlapping(m.start, m.length):
            raise ValueError(f"overlapping mapping at {m.start:#x}")
        self.mappings.append(m)
        self.mappings.sort(key=lambda x: x.start)
        return m

    def remove_mapping(self, m: Mapping) -> None:
        self.mappings.remove(m)

    def adjacent_left(self, m: Mapping) -> Optional[Mapping]:
        for other in self.mappings:
            if other.end == m.start:
                return other
        return None

    def adjacent_right(self, m: Mapping) -> Optional[Mapping]:
        for other in self.mappings:
            if other.start == m.end:
                return other
        return None

    def split_at(self, addr: int) -> None:
        """Split the mapping containing addr so a region edge falls on addr."""
        if addr % PAGE_SIZE:
            raise ValueError(f"split address not page aligned: {addr:#x}")
        m = self.mapping_at(addr)
        if m is None or addr == m.start:
            return
        head_len = addr - m.start
        tail = Mapping(
            start=addr,
            length=m.length - head_len,
            perms=m.perms,
            pkey=m.pkey,
            share=m.share,
            backing=m.backing,
            inode=m.inode,
            file_offset=m.file_offset + head_len,
            monitor_marked_nonexec=m.monitor_marked_nonexec,
            store=m.store,
            store_offset=m.store_offset + head_len,
        )
        m.length = head_len
        self.mappings.append(tail)
        self.mappings.sort(key=lambda x: x.start)

    def find_free(self, length: int, base: int = 0x0100_0000) -> int:
        """Deterministic lowest-free-gap placement for mmap(addr=0)."""
        addr = base
        for m in sorted(self.mappings, key=lambda x: x.start):
            if m.end <= addr:
                continue
            if m.start >= addr + length:
                break
            addr = m.end
        return addr

    def read_raw(self, addr: int, length: int) -> bytes:
        """Bytes at addr irrespective of permissions; stops when unmapped."""
        out = bytearray()
        for i in range(length):
            m = self.mapping_at(addr + i)
            if m is None:
                break
            out.append(m.read_byte(addr + i))
        return bytes(out)


def mem_access(
    state: SimState,
    tid: int,
    addr: int,
    kind: Access,
    route: Route,
    data: Optional[bytes] = None,
    length: Optional[int] = None,
    log: bool = True,
) -> MemResult:
    """One data access, byte-wise over [addr, addr+n).

    The CPU route checks mapping presence, then page permissions, then the
    thread's protection-key register against each byte's mapping key. The
    KERNEL_DIRECT route succeeds whenever every byte is mapped. Writes reach
    the backing store, so all aliases observe them.
    """
    thr = state.thread(tid)
    if kind is Access.WRITE:
        if data is None:
            raise ValueError("write needs data")
        n = len(data)
    else:
        if length is None:
            raise ValueError("read needs length")
        n = length

    result = _access_checked(state, thr, addr, n, kind, route, data)
    if log:
        state.log(
            tid,
            "mem",
            f"{kind.value} {route.value} {addr:#x} len={n} -> {result.status.value}",
            access=kind.value,
            route=route.value,
            addr=addr,
            length=n,
            status=result.status.value,
            pkru=thr.pkru,
        )
    return result


def _access_checked(state, thr, addr, n, kind, route, data) -> MemResult:
    spans: list[Mapping] = []
    for i in range(n):
        m = state.mapping_at(addr + i)
        if m is None:
            return MemResult(MemStatus.PAGE_FAULT, fault_addr=addr + i)
        if route is Route.CPU:
            needed = m.perms.read if kind is Access.READ else m.perms.write
            if not needed:
                return MemResult(MemStatus.PAGE_FAULT, fault_addr=addr + i)
            if not pkru_allows(thr.pkru, m.pkey, kind):
                return MemResult(MemStatus.PKU_FAULT, fault_addr=addr + i)
        spans.append(m)

    if kind is Access.READ:
        out = bytes(spans[i].read_byte(addr + i) for i in range(n))
        return MemResult(MemStatus.OK, data=out)
    for i in range(n):
        spans[i].write_byte(addr + i, data[i])
    return MemResult(MemStatus.OK)


def log_pkru_write(
    state: SimState, tid: int, old: int, new: int, mechanism: str, addr: Optional[int] = None
) -> None:
    """Record a register update; the breach oracle audits these events."""
    at = f" at {addr:#x}" if addr is not None else ""
    state.log(
        tid,
        "pkru",
        f"{mechanism}{at} {old:#010x} -> {new:#010x}",
        mechanism=mechanism,
        old=old,
        new=new,
        addr=addr,
    )


def step(state: SimState, tid: int) -> StepResult:
    """Advance one instruction on thread tid.

    Order of checks: enabled debug-register match (trap before execexecuting,
    no side effects), exec permission of every page the instruction spans
    (fetch never consults protection keys), then decode and execute.
    """
    from . import emulator  # machine <-> emulator are mutually recursive

    thr = state.thread(tid)
    if not thr.live:
        return StepResult(StepStatus.TERMINATED, reason="thread not runnable")
    rip = thr.regs["rip"]

    for slot in thr.debug_regs:
        if slot.enabled and slot.addr == rip:
            return StepResult(StepStatus.BREAKPOINT_TRAP, addr=rip)

    first = state.mapping_at(rip)
    if first is None or not first.executable():
        return StepResult(StepStatus.EXEC_FAULT, addr=rip)

    raw = state.read_raw(rip, MAX_INSTR_LEN)
    ins = emulator.decode(raw)
    if ins is None:
        return StepResult(
            StepStatus.TERMINATED, addr=rip, reason=f"unsupported encoding at {rip:#x}"
        )

    for off in range(ins.length):
        m = state.mapping_at(rip + off)
        if m is None or not m.executable():
            return StepResult(StepStatus.EXEC_FAULT, addr=rip)

    return emulator.execute(state, tid, ins)
