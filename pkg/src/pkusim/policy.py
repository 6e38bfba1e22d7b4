"""Sandbox policies observing forwarded syscalls, traps and thread events.

Five pluggable policies:

  none          no sandbox; the permissive kernel baseline
  erim-model    load/map-time scanning, unsafe pages become non-executable,
                execution from them terminates; no confused-deputy
                interception; domain inferred process-wide (all published
                weaknesses intact, for differential tests)
  hodor-model   breakpoint vetting of unsafe wrpkru only, installed in the
                mapping thread, terminate on any breakpoint; relocation and
                other-thread gaps intact
  garmr-erim    the full defense: agent-routed syscall policy, race-safe
                scan protocol, boundary re-scans on relocation, breakpoint
                vetting frozen at the multi-thread transition with
                fault-and-emulate afterwards, register-probe domain reads
  garmr-xom     garmr-erim adapted to execute-only memory: every thread is
                untrusted, every wrpkru is unsafe, and a page that became
                execute-only keeps those permissions forever

Termination is a scenario outcome, never a host-process exit, so harnesses
can assert on it.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

from . import emulator, kernel, scanner
from .agent import DEFAULT_SLIST, agent_init
from .kernel import Syscall, SysResult
from .machine import (
    PAGE_SIZE,
    Access,
    BackingKind,
    Mapping,
    Perms,
    Share,
    SimState,
    StepResult,
    StepStatus,
    pkru_allows,
    pkru_locked_value,
)
from .scanner import SafePattern, UnsafeOccurrence, erim_gate_patterns

SPECIAL_PAGE_ADDR = 0x000F0000


class PolicyKind(enum.Enum):
    NO_SANDBOX = "none"
    ERIM_MODEL = "erim-model"
    HODOR_MODEL = "hodor-model"
    GARMR_ERIM = "garmr-erim"
    GARMR_XOM = "garmr-xom"


class Domain(enum.Enum):
    T = "T"
    U = "U"


class DecisionKind(enum.Enum):
    ALLOW = "allow"
    DENY = "deny"
    REWRITE = "rewrite"
    TERMINATE = "terminate"


@dataclass
class Decision:
    kind: DecisionKind
    errno: str = "EPERM"
    call: Optional[Syscall] = None  # rewritten call; mmap-family only
    reason: str = ""


def allow(reason: str = "") -> Decision:
    return Decision(DecisionKind.ALLOW, reason=reason)


def deny(reason: str, errno: str = "EPERM") -> Decision:
    return Decision(DecisionKind.DENY, errno=errno, reason=reason)


def rewrite(call: Syscall, reason: str) -> Decision:
    return Decision(DecisionKind.REWRITE, call=call, reason=reason)


class TrapKind(enum.Enum):
    TERMINATE = "terminate"
    CONTINUED = "continued"  # instruction emulated or skipped, rip advanced
    RETRY = "retry"  # monitor changed permissions; re-execute natively


@dataclass
class TrapOutcome:
    kind: TrapKind
    reason: str = ""


class MonitorTerminate(Exception):
    """Raised when the monitor must stop the program (tampering detected)."""


class VetMode(enum.Enum):
    BREAKPOINT = "breakpoint"
    FAULT_EMULATE = "fault-emulate"


@dataclass
class MonitorState:
    trusted_pages: set[int] = field(default_factory=set)
    scanned_exec: dict[Mapping, list[UnsafeOccurrence]] = field(default_factory=dict)
    vetting: dict[int, VetMode] = field(default_factory=dict)
    multi_threaded: bool = False
    frozen_breakpoints: set[int] = field(default_factory=set)
    scan_lock: bool = False
    special_page: Optional[int] = None
    xom_pages: set[int] = field(default_factory=set)


@dataclass
class PublishJob:
    """Pending phases of the race-safe publish protocol for one mapping.

    The owning thread is blocked inside its syscall while phases run; other
    threads' scenario steps interleave between phases.
    """

    owner: int
    mapping: Mapping
    intended: Perms
    phases: list[str]
    apply_xom: bool = False
    occurrences: list[UnsafeOccurrence] = field(default_factory=list)

    def locked_range(self) -> tuple[int, int]:
        return self.mapping.start, self.mapping.length


def pages_of(addr: int, length: int) -> list[int]:
    first = addr - addr % PAGE_SIZE
    last = addr + max(length, 1) - 1
    last -= last % PAGE_SIZE
    return list(range(first, last + 1, PAGE_SIZE))


def _ranges_overlap(a_start, a_len, b_start, b_len) -> bool:
    return a_start < b_start + b_len and b_start < a_start + a_len


def _call_range(call: Syscall) -> Optional[tuple[int, int]]:
    a = call.args
    if call.name == "mremap":
        return a.get("old"), a.get("old_len", 0)
    if "addr" in a and "len" in a:
        return a["addr"], a["len"]
    if call.name == "write" and "offset" in a:
        return a["offset"], len(a.get("data", b""))
    return None


MUTATING_CALLS = frozenset(
    {"mmap", "munmap", "mremap", "mprotect", "pkey_mprotect", "process_vm_writev", "write", "shmat", "shmdt"}
)


class Policy:
    """Base: everything allowed, nothing intercepted."""

    kind = PolicyKind.NO_SANDBOX
    uses_agent = False
    intercepts: frozenset[str] = frozenset()

    def __init__(self, trusted_key: int = 1, patterns: Optional[list[SafePattern]] = None):
        self.trusted_key = trusted_key
        self.patterns: list[SafePattern] = (
            patterns
            if patterns is not None
            else erim_gate_patterns([0, pkru_locked_value(trusted_key)])
        )
        self.mon = MonitorState()
        self.jobs: list[PublishJob] = []

    @property
    def name(self) -> str:
        return self.kind.value

    def attach(self, state: SimState) -> None:
        pass

    def on_syscall(self, state: SimState, tid: int, call: Syscall) -> Decision:
        return allow()

    def after_apply(
        self, state: SimState, tid: int, call: Syscall, result: SysResult, original: Optional[Syscall] = None
    ) -> None:
        pass

    def on_trap(self, state: SimState, tid: int, trap: StepResult) -> TrapOutcome:
        return TrapOutcome(TrapKind.TERMINATE, f"unhandled {trap.status.value} at {trap.addr:#x}")

    def on_thread_event(self, state: SimState, created: bool, tid: int) -> None:
        pass

    def advance_job(self, state: SimState) -> bool:
        return False

    def conflicts_with_scan(self, call: Syscall) -> bool:
        return False

    # shared helper: emulate the instruction at rip so the program state
    # looks as if it had executed natively
    def _emulate_at(self, state: SimState, tid: int) -> TrapOutcome:
        thr = state.thread(tid)
        raw = state.read_raw(thr.regs["rip"], 15)
        ins = emulator.decode(raw)
        if ins is None:
            return TrapOutcome(
                TrapKind.TERMINATE, f"unsupported instruction at {thr.regs['rip']:#x}"
            )
        res = emulator.execute(state, tid, ins)
        if res.status is StepStatus.TERMINATED:
            return TrapOutcome(TrapKind.TERMINATE, res.reason or "terminated")
        return TrapOutcome(TrapKind.CONTINUED)


class NoSandbox(Policy):
    kind = PolicyKind.NO_SANDBOX


# ---- shared vetting machinery for the modeled sandboxes -------------------


def _mark_pages_nonexec(state: SimState, addr: int, length: int) -> None:
    """Flag every page the range touches; splits keep marks page-granular."""
    for page in pages_of(addr, length):
        m = state.mapping_at(page)
        if m is None:
            continue
        state.split_at(page)
        state.split_at(page + PAGE_SIZE)
        target = state.mapping_at(page)
        if target is not None:
            target.monitor_marked_nonexec = True


def _unsafe(occurrences: Iterable[UnsafeOccurrence]) -> list[UnsafeOccurrence]:
    return [o for o in occurrences if not o.safe]


class GarmrPolicy(Policy):
    """Common behavior of the two full-defense sandboxes."""

    uses_agent = True
    treat_all_as_untrusted = False

    def __init__(self, trusted_key: int = 1, patterns: Optional[list[SafePattern]] = None, scan_protocol: bool = True):
        super().__init__(trusted_key, patterns)
        # scan_protocol=False drops the non-writable/non-executable window
        # and the scan lock; it exists so the race suite can demonstrate
        # that the protocol is what actually blocks the attack
        self.scan_protocol = scan_protocol

    # -- loader -----------------------------------------------------------

    def attach(self, state: SimState) -> None:
        self.mon = MonitorState(special_page=SPECIAL_PAGE_ADDR)
        self.jobs = []
        gate_bytes = emulator.enc_rdpkru() + emulator.enc_ret()
        existing = state.mapping_at(SPECIAL_PAGE_ADDR)
        if existing is None:
            m = Mapping(
                start=SPECIAL_PAGE_ADDR,
                length=PAGE_SIZE,
                perms=Perms(read=True, write=False, exec=True),
            )
            state.add_mapping(m)
            for i, b in enumerate(gate_bytes):
                m.write_byte(SPECIAL_PAGE_ADDR + i, b)
        agent_init(state, min(state.threads), DEFAULT_SLIST, {state.mem_inode})
        for m in list(state.mappings):
            if m.pkey == self.trusted_key:
                self.mon.trusted_pages.update(pages_of(m.start, m.length))
            if m.perms.exec and m.start != SPECIAL_PAGE_ADDR:
                self.safe_publish(state, m, m.perms)
        state.log(min(state.threads), "monitor", f"{self.name} attached")

    # -- domain determination ----------------------------------------------

    def _check_special_page(self, state: SimState) -> None:
        m = state.mapping_at(self.mon.special_page or SPECIAL_PAGE_ADDR)
        ok = (
            m is not None
            and m.perms.exec
            and not m.perms.write
            and not m.monitor_marked_nonexec
            and state.read_raw(self.mon.special_page, 3) == emulator.enc_rdpkru()
        )
        if not ok:
            raise MonitorTerminate("special register-probe page tampered with")

    def current_domain(self, state: SimState, tid: int) -> Domain:
        if self.treat_all_as_untrusted:
            return Domain.U
        self._check_special_page(state)
        thr = state.thread(tid)
        saved = (thr.regs["rip"], thr.regs["eax"], thr.regs["ecx"], thr.regs["edx"])
        state.log(tid, "monitor", f"pkru-probe redirect -> {self.mon.special_page:#x}")
        thr.regs["rip"] = self.mon.special_page
        thr.regs["ecx"] = 0
        from .machine import step as machine_step

        res = machine_step(state, tid)
        if res.status is not StepStatus.ADVANCED:
            raise MonitorTerminate("register probe failed to execute")
        pkru_read = thr.regs["eax"]
        state.log(tid, "monitor", f"pkru-probe execute rdpkru -> {pkru_read:#010x}")
        thr.regs["rip"], thr.regs["eax"], thr.regs["ecx"], thr.regs["edx"] = saved
        state.log(tid, "monitor", "pkru-probe restore context")
        return (
            Domain.T if pkru_allows(pkru_read, self.trusted_key, Access.READ) else Domain.U
        )

    # -- syscall policy -----------------------------------------------------

    U_FORBIDDEN = frozenset(
        {"modify_ldt", "seccomp", "ptrace", "pkey_alloc", "pkey_free", "pkey_mprotect", "shmat", "shmdt"}
    )

    def _touches_special(self, call: Syscall) -> bool:
        rng = _call_range(call)
        if rng is None or self.mon.special_page is None:
            return False
        return _ranges_overlap(rng[0], rng[1], self.mon.special_page, PAGE_SIZE)

    def _touches_trusted(self, addr: int, length: int) -> bool:
        return any(p in self.mon.trusted_pages for p in pages_of(addr, length))

    def _touches_xom(self, call: Syscall) -> bool:
        rng = _call_range(call)
        if rng is None:
            return False
        return any(p in self.mon.xom_pages for p in pages_of(rng[0], rng[1]))

    def on_syscall(self, state: SimState, tid: int, call: Syscall) -> Decision:
        name = call.name
        a = call.args

        if name in ("munmap", "mremap", "mprotect", "pkey_mprotect", "mmap") and self._touches_special(call):
            return deny("targets the monitor's register-probe page")

        domain = self.current_domain(state, tid)

        if self.treat_all_as_untrusted and self._touches_xom(call) and name in (
            "mprotect",
            "pkey_mprotect",
            "mremap",
            "munmap",
        ):
            return deny("execute-only pages are immutable for the whole execution")

        if domain is Domain.U:
            if name in self.U_FORBIDDEN:
                return deny(f"{name} forbidden from U")
            if name == "prctl":
                option = a.get("option")
                if option == "seccomp":
                    return deny("prctl installing seccomp forbidden from U")
                if option == "agent_init":
                    return deny("agent re-initialization from U")
                return allow()
            if name in ("process_vm_readv", "process_vm_writev"):
                if self._touches_trusted(a.get("addr", 0), a.get("len", len(a.get("data", b"")))):
                    return deny("process_vm access intersects trusted memory")
                return allow()
            if name in ("munmap", "mremap", "mprotect") and self._trusted_range_call(call):
                return deny(f"{name} changes trusted mappings from U")

        if name == "mmap":
            return self._decide_mmap(call)
        if name == "mprotect":
            return self._decide_mprotect(state, call)
        if name == "mremap":
            return self._decide_mremap(state, tid, call)
        return allow()

    def _trusted_range_call(self, call: Syscall) -> bool:
        rng = _call_range(call)
        return rng is not None and self._touches_trusted(rng[0], rng[1])

    def _decide_mmap(self, call: Syscall) -> Decision:
        a = call.args
        prot: Perms = a.get("prot", Perms())
        share: Share = a.get("share", Share.PRIVATE)
        if prot.write and prot.exec:
            return deny("mapping would be writable and executable")
        if prot.exec and share in (Share.SHARED, Share.SHARED_VALIDATE):
            return deny("executable shared mappings are forbidden")
        file_backed = a.get("backing") == "file"
        if not prot.exec and not file_backed:
            return allow()
        # executable or file-backed requests detour through the publish
        # protocol: map without exec (and anonymous), scan, then grant
        new_args = dict(a)
        if file_backed:
            new_args["backing"] = "anon"
            new_args.pop("fd", None)
            new_args.pop("offset", None)
        if prot.exec:
            new_args["prot"] = Perms(read=prot.read, write=False, exec=False)
        reason = []
        if file_backed:
            reason.append("file backing replaced with an anonymous copy")
        if prot.exec:
            reason.append("executable contents take the scan-then-publish path")
        return rewrite(Syscall("mmap", new_args), "; ".join(reason))

    def _decide_mprotect(self, state: SimState, call: Syscall) -> Decision:
        a = call.args
        prot: Perms = a.get("prot", Perms())
        if a.get("xom"):
            new_args = dict(a)
            new_args["xom"] = False
            new_args["prot"] = Perms(read=True, write=False, exec=False)
            return rewrite(
                Syscall("mprotect", new_args), "execute-only request scanned before applying"
            )
        if prot.write and prot.exec:
            return deny("mapping would be writable and executable")
        if prot.exec:
            new_args = dict(a)
            new_args["prot"] = Perms(read=prot.read, write=False, exec=False)
            return rewrite(
                Syscall("mprotect", new_args), "executable contents take the scan-then-publish path"
            )
        return allow()

    def _decide_mremap(self, state: SimState, tid: int, call: Syscall) -> Decision:
        a = call.args
        m = state.mapping_at(a.get("old", 0))
        if m is not None and m.perms.exec:
            # relocation protocol: drop permissions before the move; the
            # move itself happens in the kernel; scan/re-vet afterwards
            self._pending_remap = (m, m.perms)
            if self.scan_protocol:
                m.perms = Perms(read=m.perms.read, write=False, exec=False)
        else:
            self._pending_remap = None
        return allow()

    # -- post-application hooks ---------------------------------------------

    def after_apply(self, state, tid, call, result, original=None) -> None:
        if not result.ok:
            if call.name == "mremap" and getattr(self, "_pending_remap", None):
                m, perms = self._pending_remap
                m.perms = perms
                self._pending_remap = None
            return
        name = call.name
        requested = original if original is not None else call

        if name == "mmap":
            addr = result.value
            m = state.mapping_at(addr)
            if m is None:
                return
            if original is not None and original.args.get("backing") == "file":
                self._copy_file_contents(state, m, original.args)
            intended: Perms = requested.args.get("prot", Perms())
            if intended.exec:
                self._queue_publish(state, tid, m, intended)
        elif name == "mprotect":
            rng = _call_range(call)
            intended: Perms = requested.args.get("prot", Perms())
            apply_xom = bool(requested.args.get("xom"))
            if intended.exec or apply_xom:
                state.split_at(rng[0])
                state.split_at(rng[0] + rng[1])
                for m in state.mappings_overlapping(*rng):
                    self._queue_publish(
                        state, tid, m, Perms(read=intended.read, write=False, exec=True), apply_xom=apply_xom
                    )
            else:
                self._drop_vetting_in(state, rng[0], rng[1])
        elif name == "pkey_mprotect":
            # only requests issued while the probe reads T extend or shrink
            # the trusted set; the probe ran during on_syscall
            rng = _call_range(call)
            key = call.args.get("key")
            pages = pages_of(*rng)
            if key == self.trusted_key:
                self.mon.trusted_pages.update(pages)
            else:
                self.mon.trusted_pages.difference_update(pages)
        elif name == "mremap":
            pending = getattr(self, "_pending_remap", None)
            self._pending_remap = None
            if pending is not None:
                m, intended = pending
                self._drop_vetting_for_mapping(state, m)
                self._queue_publish(state, tid, m, intended)
        elif name == "munmap":
            rng = _call_range(call)
            self._drop_vetting_in(state, rng[0], rng[1])
            self.mon.trusted_pages.difference_update(pages_of(*rng))
        elif name == "execve":
            # fresh image: the loader runs again
            self.attach(state)

    def _copy_file_contents(self, state: SimState, m: Mapping, original_args: dict) -> None:
        entry = state.fds.get(original_args.get("fd"))
        if entry is None:
            return
        fobj = state.files.get(entry["inode"])
        if fobj is None or fobj.mem_view:
            return
        offset = original_args.get("offset", 0)
        data = bytes(fobj.data[offset : offset + m.length])
        for i, b in enumerate(data):
            m.write_byte(m.start + i, b)

    # -- publish protocol -----------------------------------------------------

    def _queue_publish(self, state, tid, mapping, intended, apply_xom: bool = False) -> None:
        if self.scan_protocol:
            mapping.perms = Perms(read=mapping.perms.read, write=False, exec=False)
            self.mon.scan_lock = True
        self.jobs.append(
            PublishJob(owner=tid, mapping=mapping, intended=intended, phases=["scan", "finalize"], apply_xom=apply_xom)
        )
        state.log(tid, "monitor", f"publish queued for {mapping.start:#x}+{mapping.length:#x}")

    def advance_job(self, state: SimState) -> bool:
        if not self.jobs:
            return False
        job = self.jobs[0]
        phase = job.phases.pop(0)
        if phase == "scan":
            job.occurrences = scanner.scan_mapping(state, job.mapping, self.patterns)
            state.log(
                job.owner,
                "monitor",
                f"scan {job.mapping.start:#x}: {len(job.occurrences)} occurrence(s), "
                f"{len(_unsafe(job.occurrences))} unsafe",
            )
        elif phase == "finalize":
            self._publish_finalize(state, job)
            self.jobs.pop(0)
            if not self.jobs:
                self.mon.scan_lock = False
        return True

    def _publish_finalize(self, state: SimState, job: PublishJob) -> None:
        mode = self.install_vetting(state, job.occurrences)
        m = job.mapping
        m.perms = Perms(read=job.intended.read, write=False, exec=job.intended.exec)
        if mode is VetMode.FAULT_EMULATE:
            for occ in _unsafe(job.occurrences):
                _mark_pages_nonexec(state, occ.addr, occ.length)
        if job.apply_xom:
            kernel._sys_mprotect(
                state, job.owner, {"addr": m.start, "len": m.length, "xom": True}
            )
            self.mon.xom_pages.update(pages_of(m.start, m.length))
            if self.treat_all_as_untrusted:
                self.mon.trusted_pages.update(pages_of(m.start, m.length))
        self.mon.scanned_exec[m] = job.occurrences
        state.log(
            job.owner,
            "monitor",
            f"published {m.start:#x}+{m.length:#x} perms={m.perms} vetting={mode.value}",
        )

    def safe_publish(self, state: SimState, mapping: Mapping, intended: Perms) -> str:
        """Run the whole three-phase protocol synchronously.

        Returns "published"; the fault-and-emulate fallback still publishes
        (the affected pages simply stay non-executable and faults are
        emulated), so rejection is reserved for pathological requests.
        """
        if mapping.start == self.mon.special_page:
            return "rejected"
        job = PublishJob(
            owner=min(state.threads),
            mapping=mapping,
            intended=intended,
            phases=["scan", "finalize"],
        )
        self.jobs.insert(0, job)
        if self.scan_protocol:
            mapping.perms = Perms(read=mapping.perms.read, write=False, exec=False)
            self.mon.scan_lock = True
        while job.phases:
            self.advance_job(state)
        return "published"

    def conflicts_with_scan(self, call: Syscall) -> bool:
        if not self.jobs or not self.scan_protocol:
            return False
        if call.name not in MUTATING_CALLS:
            return False
        rng = _call_range(call)
        if rng is None:
            return True  # conservative: unknown target range
        return any(
            _ranges_overlap(rng[0], rng[1], *job.locked_range()) for job in self.jobs
        )

    # -- vetting ----------------------------------------------------------------

    def install_vetting(self, state: SimState, occurrences) -> VetMode:
        unsafe = _unsafe(occurrences)
        if not unsafe:
            return VetMode.BREAKPOINT
        if not self.mon.multi_threaded:
            threads = state.live_threads()
            free = min(
                (sum(1 for s in t.debug_regs if not s.enabled) for t in threads),
                default=0,
            )
            addrs = {o.addr for o in unsafe}
            already = {
                a
                for a in addrs
                if all(a in t.enabled_breakpoints() for t in threads)
            }
            if len(addrs - already) <= free:
                for t in threads:
                    for a in sorted(addrs - set(t.enabled_breakpoints())):
                        slot = next(s for s in t.debug_regs if not s.enabled)
                        slot.addr = a
                        slot.enabled = True
                for a in addrs:
                    self.mon.vetting[a] = VetMode.BREAKPOINT
                return VetMode.BREAKPOINT
        for o in unsafe:
            self.mon.vetting[o.addr] = VetMode.FAULT_EMULATE
        return VetMode.FAULT_EMULATE

    def _drop_vetting_in(self, state: SimState, addr: int, length: int) -> None:
        for bp_addr in [a for a in self.mon.vetting if addr <= a < addr + length]:
            del self.mon.vetting[bp_addr]
            for t in state.live_threads():
                for slot in t.debug_regs:
                    if slot.enabled and slot.addr == bp_addr:
                        slot.enabled = False
                        slot.addr = 0
        for m in [x for x in self.mon.scanned_exec if _ranges_overlap(x.start, x.length, addr, length)]:
            del self.mon.scanned_exec[m]

    def _drop_vetting_for_mapping(self, state: SimState, m: Mapping) -> None:
        self.mon.scanned_exec.pop(m, None)
        # stale breakpoint addresses from before the move: anything no
        # longer matching a vetted occurrence in scanned ranges
        known = {o.addr for occs in self.mon.scanned_exec.values() for o in occs}
        for t in state.live_threads():
            for slot in t.debug_regs:
                if slot.enabled and slot.addr not in known:
                    self.mon.vetting.pop(slot.addr, None)
                    slot.enabled = False
                    slot.addr = 0

    # -- traps and thread events --------------------------------------------------

    def on_trap(self, state: SimState, tid: int, trap: StepResult) -> TrapOutcome:
        thr = state.thread(tid)
        addr = trap.addr
        window = 8 + max((len(p.suffix) for p in self.patterns), default=0)
        raw = state.read_raw(addr, window)
        m = scanner.match_at(raw, 0) if raw else None
        if m is not None:
            kind, length = m
            safe = scanner.classify(raw, 0, kind, length, self.patterns)
            if kind is scanner.UnsafeKind.WRPKRU:
                if not safe:
                    return TrapOutcome(TrapKind.TERMINATE, f"unsafe wrpkru at {addr:#x}")
                return self._emulate_at(state, tid)
            if safe:
                return self._emulate_at(state, tid)
            if thr.regs["eax"] >> 9 & 1:
                return TrapOutcome(
                    TrapKind.TERMINATE, f"unsafe xrstor at {addr:#x} with eax bit 9 set"
                )
            thr.regs["rip"] += length  # bit 9 clear: nothing to restore here
            return TrapOutcome(TrapKind.CONTINUED)
        return self._emulate_at(state, tid)

    def on_thread_event(self, state: SimState, created: bool, tid: int) -> None:
        if not created:
            return
        if not self.mon.multi_threaded:
            # /proc/self/task now lists more than one entry: freeze the
            # breakpoint set and stop trusting per-thread debug registers
            # for anything new
            if len(state.live_threads()) <= 1:
                return
            self.mon.multi_threaded = True
            frozen = set()
            for t in state.live_threads():
                frozen.update(t.enabled_breakpoints())
            self.mon.frozen_breakpoints = frozen
            for m, occs in list(self.mon.scanned_exec.items()):
                for occ in _unsafe(occs):
                    if occ.addr not in frozen:
                        self.mon.vetting[occ.addr] = VetMode.FAULT_EMULATE
                        _mark_pages_nonexec(state, occ.addr, occ.length)
            state.log(
                tid, "monitor", f"multi-threaded: froze {len(frozen)} breakpoint(s)"
            )
        # the new thread is still stopped: its debug registers can be
        # populated before it runs, unlike those of already-running threads
        child = state.thread(tid)
        for a in sorted(self.mon.frozen_breakpoints):
            slot = next((s for s in child.debug_regs if not s.enabled), None)
            if slot is not None:
                slot.addr = a
                slot.enabled = True


class GarmrErim(GarmrPolicy):
    kind = PolicyKind.GARMR_ERIM


class GarmrXom(GarmrPolicy):
    """Execute-only-memory flavor: all code is untrusted, no user gates."""

    kind = PolicyKind.GARMR_XOM
    treat_all_as_untrusted = True

    def __init__(self, trusted_key: int = 1, patterns=None, scan_protocol: bool = True):
        # every wrpkru is unsafe: inter-domain transitions are performed by
        # the kernel, so user space has no legitimate register writes
        super().__init__(trusted_key, patterns=[], scan_protocol=scan_protocol)


# ---- deliberately weakened models -----------------------------------------


class ErimModel(Policy):
    """Map-time scanning with terminate-on-fault and no deputy interception."""

    kind = PolicyKind.ERIM_MODEL
    intercepts = frozenset({"mmap", "mprotect", "pkey_mprotect"})

    def attach(self, state: SimState) -> None:
        self.mon = MonitorState()
        for m in list(state.mappings):
            if m.pkey == self.trusted_key:
                self.mon.trusted_pages.update(pages_of(m.start, m.length))
            if m.perms.exec:
                self._scan_and_mark(state, m)

    def _inferred_domain(self, state: SimState) -> Domain:
        # the published weakness: a process-wide inference instead of a
        # per-thread register read. Any thread currently inside T makes
        # every concurrent request look trusted.
        for t in state.live_threads():
            if pkru_allows(t.pkru, self.trusted_key, Access.READ):
                return Domain.T
        return Domain.U

    def _scan_and_mark(self, state: SimState, m: Mapping) -> None:
        occs = scanner.scan_bytes(m.bytes(), m.start, self.patterns)
        self.mon.scanned_exec[m] = occs
        for occ in _unsafe(occs):
            _mark_pages_nonexec(state, occ.addr, occ.length)

    def on_syscall(self, state, tid, call) -> Decision:
        if call.name == "pkey_mprotect":
            rng = _call_range(call)
            touches_trusted = any(
                p in self.mon.trusted_pages for p in pages_of(rng[0], rng[1])
            )
            if touches_trusted and self._inferred_domain(state) is Domain.U:
                return deny("pkey_mprotect on trusted mapping (inferred untrusted)")
        return allow()

    def after_apply(self, state, tid, call, result, original=None) -> None:
        if not result.ok:
            return
        if call.name in ("mmap", "mprotect"):
            rng = (
                (result.value, call.args["len"])
                if call.name == "mmap"
                else _call_range(call)
            )
            for m in state.mappings_overlapping(rng[0], rng[1]):
                if m.perms.exec:
                    self._scan_and_mark(state, m)
        elif call.name == "pkey_mprotect":
            if call.args.get("key") == self.trusted_key and self._inferred_domain(state) is Domain.T:
                self.mon.trusted_pages.update(pages_of(*_call_range(call)))

    def on_trap(self, state, tid, trap: StepResult) -> TrapOutcome:
        if trap.status is StepStatus.EXEC_FAULT:
            return TrapOutcome(
                TrapKind.TERMINATE,
                f"execution reached a page holding unsafe instructions ({trap.addr:#x})",
            )
        return TrapOutcome(TrapKind.TERMINATE, f"unexpected trap at {trap.addr:#x}")


class HodorModel(Policy):
    """Breakpoint vetting of unsafe wrpkru only, with the published gaps.

    xrstor is never scanned; breakpoints land only in the thread that
    faulted; relocation is not intercepted, so debug registers go stale.
    """

    kind = PolicyKind.HODOR_MODEL
    intercepts = frozenset({"mmap", "mprotect", "pkey_mprotect", "munmap"})

    def attach(self, state: SimState) -> None:
        self.mon = MonitorState()
        for m in list(state.mappings):
            if m.pkey == self.trusted_key:
                self.mon.trusted_pages.update(pages_of(m.start, m.length))
            if m.perms.exec:
                self._scan_and_mark(state, m)

    def _wrpkru_occurrences(self, m: Mapping) -> list[UnsafeOccurrence]:
        return [
            o
            for o in scanner.scan_bytes(m.bytes(), m.start, self.patterns)
            if o.kind is scanner.UnsafeKind.WRPKRU
        ]

    def _scan_and_mark(self, state: SimState, m: Mapping) -> None:
        occs = self._wrpkru_occurrences(m)
        self.mon.scanned_exec[m] = occs
        if _unsafe(occs):
            m.monitor_marked_nonexec = True

    def on_syscall(self, state, tid, call) -> Decision:
        if call.name in ("mprotect", "pkey_mprotect", "munmap"):
            rng = _call_range(call)
            if any(p in self.mon.trusted_pages for p in pages_of(rng[0], rng[1])):
                return deny("kernel-registered trusted range")
        return allow()

    def after_apply(self, state, tid, call, result, original=None) -> None:
        if not result.ok:
            return
        if call.name in ("mmap", "mprotect"):
            rng = (
                (result.value, call.args["len"])
                if call.name == "mmap"
                else _call_range(call)
            )
            for m in state.mappings_overlapping(rng[0], rng[1]):
                if m.perms.exec:
                    self._scan_and_mark(state, m)

    def on_trap(self, state, tid, trap: StepResult) -> TrapOutcome:
        if trap.status is StepStatus.BREAKPOINT_TRAP:
            return TrapOutcome(
                TrapKind.TERMINATE, f"hardware breakpoint at {trap.addr:#x}"
            )
        m = state.mapping_at(trap.addr)
        if m is None or not m.monitor_marked_nonexec:
            return TrapOutcome(TrapKind.TERMINATE, f"unexpected fault at {trap.addr:#x}")
        occs = _unsafe(self._wrpkru_occurrences(m))
        thr = state.thread(tid)
        free = sum(1 for s in thr.debug_regs if not s.enabled)
        if len(occs) <= free:
            # vet with breakpoints in the faulting thread only and make the
            # page executable again; other threads never learn about them
            for occ in occs:
                slot = next(s for s in thr.debug_regs if not s.enabled)
                slot.addr = occ.addr
                slot.enabled = True
                self.mon.vetting[occ.addr] = VetMode.BREAKPOINT
            m.monitor_marked_nonexec = False
            return TrapOutcome(TrapKind.RETRY)
        # single-step substitute: emulate, terminating only on unsafe wrpkru
        raw = state.read_raw(trap.addr, 8)
        match = scanner.match_at(raw, 0) if raw else None
        if match is not None and match[0] is scanner.UnsafeKind.WRPKRU:
            if not scanner.classify(raw, 0, match[0], match[1], self.patterns):
                return TrapOutcome(TrapKind.TERMINATE, f"unsafe wrpkru at {trap.addr:#x}")
        return self._emulate_at(state, tid)


def make_policy(kind: PolicyKind, trusted_key: int = 1, **kwargs) -> Policy:
    cls = {
        PolicyKind.NO_SANDBOX: NoSandbox,
        PolicyKind.ERIM_MODEL: ErimModel,
        PolicyKind.HODOR_MODEL: HodorModel,
        PolicyKind.GARMR_ERIM: GarmrErim,
        PolicyKind.GARMR_XOM: GarmrXom,
    }[kind]
    return cls(trusted_key=trusted_key, **kwargs)


# ---- state auditor -----------------------------------------------------------


def audit_invariants(state: SimState, policy: Policy) -> list[str]:
    """Check the full-defense invariants against the live state.

    Ground truth comes from re-scanning, not from monitor bookkeeping, so
    bookkeeping bugs surface as violations.
    """
    violations = []
    for m in state.mappings:
        where = f"{m.start:#x}+{m.length:#x}"
        if m.perms.write and m.perms.exec:
            violations.append(f"w^x violated at {where}")
        if m.perms.exec and m.share in (Share.SHARED, Share.SHARED_VALIDATE):
            violations.append(f"executable shared mapping at {where}")
        if m.perms.exec and m.backing is BackingKind.FILE:
            violations.append(f"executable file-backed mapping at {where}")

    live = state.live_threads()
    special = getattr(policy.mon, "special_page", None)
    for m in state.mappings:
        if not m.executable() or m.start == special:
            continue
        for occ in scanner.scan_mapping(state, m, policy.patterns):
            if occ.safe:
                continue
            covered = all(occ.addr in t.enabled_breakpoints() for t in live)
            page_mapping = state.mapping_at(occ.addr)
            marked = page_mapping is not None and page_mapping.monitor_marked_nonexec
            if not covered and not marked:
                violations.append(
                    f"unvetted unsafe {occ.kind.value} at {occ.addr:#x}"
                )

    known = {
        o.addr
        for occs in policy.mon.scanned_exec.values()
        for o in occs
        if not o.safe
    }
    for t in live:
        for addr in t.enabled_breakpoints():
            if addr not in known:
                violations.append(f"stale breakpoint at {addr:#x} in t{t.tid}")

    if special is not None:
        m = state.mapping_at(special)
        if m is None or not m.perms.exec or m.perms.write:
            violations.append("register-probe page integrity lost")

    for page in policy.mon.xom_pages:
        m = state.mapping_at(page)
        if m is None or not m.perms.exec or m.perms.write or m.pkey != state.xom_key:
            violations.append(f"execute-only page mutated at {page:#x}")
    return violations
