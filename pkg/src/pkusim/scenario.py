"""Scenario types, the deterministic engine, and the breach oracle.

A scenario is an ordered list of thread steps and syscalls plus an expected
outcome. The engine drives kernel, agent, policy and machine to completion
and classifies the run:

  Completed   no policy intervention and no breach
  Blocked     a policy/agent denial or a termination stopped progress
  Breach      the machine-level oracle observed untrusted access to
              protected memory or a register unlock outside a gate

The oracle watches only machine-level events (memory accesses with route
and register image, register writes with their mechanism), never policy
bookkeeping, so a buggy policy cannot hide a breach. Identical
(scenario, policy) pairs produce byte-identical event logs.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field, replace
from typing import Optional, Union

from . import kernel, scanner
from .agent import RouteDecision, route_syscall
from .kernel import Syscall, SysResult, apply_syscall
from .machine import (
    DEFAULT_DEBUG_SLOTS,
    Access,
    PAGE_SIZE,
    Perms,
    Route,
    Share,
    SimState,
    StepStatus,
    log_pkru_write,
    mem_access,
    pkru_allows,
    step as machine_step,
)
from .policy import (
    Decision,
    DecisionKind,
    Domain,
    MonitorTerminate,
    Policy,
    PolicyKind,
    TrapKind,
    audit_invariants,
    make_policy,
    pages_of,
)

DEBUG_SLOTS_ENV = "PKUSIM_DEBUG_REGS"


def configured_debug_slots() -> int:
    return int(os.environ.get(DEBUG_SLOTS_ENV, DEFAULT_DEBUG_SLOTS))


# ---- steps -----------------------------------------------------------------


@dataclass(frozen=True)
class Spawn:
    tid: str


@dataclass(frozen=True)
class Step:
    tid: str
    count: int


@dataclass(frozen=True)
class Sys:
    tid: str
    call: Syscall


@dataclass(frozen=True)
class WriteBytes:
    tid: str
    addr: int
    data: bytes


@dataclass(frozen=True)
class SetReg:
    tid: str
    reg: str
    value: int


@dataclass(frozen=True)
class Interleave:
    marker: str


ScenarioStep = Union[Spawn, Step, Sys, WriteBytes, SetReg, Interleave]


class Expectation(enum.Enum):
    BREACH = "breach"
    BLOCKED = "blocked"
    COMPLETED = "completed"


@dataclass
class Scenario:
    name: str
    steps: list[ScenarioStep]
    expectation: Expectation
    # policies the scenario meaningfully applies to; None means all
    policies: Optional[frozenset[PolicyKind]] = None

    def applies_to(self, kind: PolicyKind) -> bool:
        return self.policies is None or kind in self.policies


class OutcomeKind(enum.Enum):
    COMPLETED = "completed"
    BLOCKED = "blocked"
    BREACH = "breach"


class EvidenceKind(enum.Enum):
    TRUSTED_READ = "trusted-read"
    TRUSTED_WRITE = "trusted-write"
    PKRU_UNLOCKED = "pkru-unlocked"


@dataclass(frozen=True)
class BreachEvidence:
    kind: EvidenceKind
    tid: int
    addr: Optional[int]
    seq: int  # index of the offending event in the log

    def __str__(self) -> str:
        at = f" addr={self.addr:#x}" if self.addr is not None else ""
        return f"{self.kind.value} t{self.tid}{at} seq={self.seq}"


@dataclass
class Outcome:
    kind: OutcomeKind
    reason: str = ""
    at_step: Optional[int] = None
    evidence: Optional[BreachEvidence] = None

    def matches(self, expectation: Expectation) -> bool:
        return self.kind.value == expectation.value

    def __str__(self) -> str:
        if self.kind is OutcomeKind.BREACH:
            return f"Breach({self.evidence})"
        if self.kind is OutcomeKind.BLOCKED:
            return f"Blocked({self.reason!r}, at step {self.at_step})"
        return "Completed"


class ScenarioError(Exception):
    pass


class AuditError(Exception):
    """A policy invariant failed after an accepted event."""


# ---- breach oracle -----------------------------------------------------------


class BreachOracle:
    """Machine-level breach detector, independent of policy bookkeeping.

    Protected memory is tracked by *intent*: pages tagged with the trusted
    key in the initial state, pages a trusted-domain thread asked to tag
    (even if a confused deputy faked the call), and pages execute-only
    requests were applied to. A successful data access to protected memory
    from an untrusted register image is a breach, whichever route it took;
    so is any register write that unlocks a protected key outside a
    configured gate sequence.
    """

    def __init__(self, state: SimState, trusted_key: int, patterns) -> None:
        self.trusted_key = trusted_key
        self.patterns = patterns
        self.trusted_pages: set[int] = set()
        self.xom_pages: set[int] = set()
        self.cursor = 0
        self.breach: Optional[BreachEvidence] = None
        for m in state.mappings:
            if m.pkey == trusted_key:
                self.trusted_pages.update(pages_of(m.start, m.length))

    def note_syscall(
        self, state: SimState, tid: int, call: Syscall, result: SysResult, pre_pkru: int
    ) -> None:
        if not result.ok:
            return
        if call.name == "pkey_mprotect":
            caller_trusted = pkru_allows(pre_pkru, self.trusted_key, Access.READ)
            if not caller_trusted:
                return
            pages = set(pages_of(call.args["addr"], call.args["len"]))
            if call.args.get("key") == self.trusted_key:
                self.trusted_pages |= pages
            else:
                self.trusted_pages -= pages
        elif call.name == "mprotect" and call.args.get("xom"):
            self.xom_pages.update(pages_of(call.args["addr"], call.args["len"]))
        elif call.name == "execve":
            self.trusted_pages.clear()
            self.xom_pages.clear()

    def _unlock_is_gated(self, state: SimState, addr: Optional[int]) -> bool:
        if addr is None:
            return False
        raw = state.read_raw(addr, 3 + max((len(p.suffix) for p in self.patterns), default=0))
        m = scanner.match_at(raw, 0) if raw else None
        if m is None or m[0] is not scanner.UnsafeKind.WRPKRU:
            return False
        return scanner.classify(raw, 0, m[0], m[1], self.patterns)

    def scan(self, state: SimState) -> Optional[BreachEvidence]:
        protected_keys = {self.trusted_key}
        if state.xom_key is not None:
            protected_keys.add(state.xom_key)
        events = state.event_log
        while self.cursor < len(events):
            ev = events[self.cursor]
            self.cursor += 1
            if self.breach is not None:
                continue
            if ev.kind == "mem" and ev.payload.get("status") == "ok":
                pages = set(pages_of(ev.payload["addr"], ev.payload["length"]))
                touches_trusted = bool(pages & self.trusted_pages)
                touches_xom = bool(pages & self.xom_pages)
                if not touches_trusted and not touches_xom:
                    continue
                untrusted = not pkru_allows(
                    ev.payload["pkru"], self.trusted_key, Access.READ
                )
                if touches_xom or (touches_trusted and untrusted):
                    kind = (
                        EvidenceKind.TRUSTED_WRITE
                        if ev.payload["access"] == "write"
                        else EvidenceKind.TRUSTED_READ
                    )
                    self.breach = BreachEvidence(kind, ev.tid, ev.payload["addr"], ev.seq)
            elif ev.kind == "pkru":
                old, new = ev.payload["old"], ev.payload["new"]
                for key in protected_keys:
                    was_locked = not pkru_allows(old, key, Access.READ)
                    now_open = pkru_allows(new, key, Access.READ)
                    if not (was_locked and now_open):
                        continue
                    mech = ev.payload["mechanism"]
                    if mech == "wrpkru" and self._unlock_is_gated(
                        state, ev.payload.get("addr")
                    ):
                        continue
                    self.breach = BreachEvidence(
                        EvidenceKind.PKRU_UNLOCKED, ev.tid, ev.payload.get("addr"), ev.seq
                    )
                    break
        return self.breach


def recheck_evidence(state: SimState, evidence: BreachEvidence) -> bool:
    """Validate breach evidence against the final state's event log."""
    if evidence.seq >= len(state.event_log):
        return False
    ev = state.event_log[evidence.seq]
    if ev.tid != evidence.tid:
        return False
    if evidence.kind is EvidenceKind.PKRU_UNLOCKED:
        return ev.kind == "pkru"
    return (
        ev.kind == "mem"
        and ev.payload.get("status") == "ok"
        and ev.payload.get("addr") == evidence.addr
    )


# ---- engine ------------------------------------------------------------------


@dataclass
class RunResult:
    outcome: Outcome
    state: SimState
    policy: Policy
    scenario: Scenario

    def log_lines(self) -> list[str]:
        return [ev.render() for ev in self.state.event_log]

    @property
    def matched(self) -> bool:
        return self.outcome.matches(self.scenario.expectation)


class _Engine:
    def __init__(
        self,
        scenario: Scenario,
        policy: Policy,
        trusted_key: int,
        debug_slots: int,
        audit: Optional[bool],
    ) -> None:
        self.scenario = scenario
        self.policy = policy
        self.state = SimState(trusted_key=trusted_key, debug_slots=debug_slots)
        self.state.add_thread(tid=0, pkru=0)
        self.tids: dict[str, int] = {"t0": 0}
        self.audit = (
            audit
            if audit is not None
            else policy.kind in (PolicyKind.GARMR_ERIM, PolicyKind.GARMR_XOM)
        )
        self.terminated: Optional[tuple[str, int]] = None
        self.denied: Optional[tuple[str, int]] = None
        self.deferred: list[tuple[int, Syscall]] = []
        self.step_index = -1

    # -- helpers ---------------------------------------------------------

    def tid_of(self, name: str) -> int:
        if name not in self.tids:
            raise ScenarioError(f"step references unspawned thread {name!r}")
        return self.tids[name]

    def _note_block(self, reason: str) -> None:
        if self.denied is None:
            self.denied = (reason, self.step_index)

    def _terminate(self, reason: str) -> None:
        if self.terminated is None:
            self.terminated = (reason, self.step_index)

    def _drain_jobs(self, limit: Optional[int] = None) -> None:
        advanced = 0
        while self.policy.jobs and (limit is None or advanced < limit):
            self.policy.advance_job(self.state)
            advanced += 1
        if not self.policy.jobs and self.deferred:
            pending, self.deferred = self.deferred, []
            for tid, call in pending:
                self.do_syscall(tid, call)

    # -- syscall dispatch ---------------------------------------------------

    def do_syscall(self, tid: int, call: Syscall) -> Optional[SysResult]:
        state, policy = self.state, self.policy
        pre_pkru = state.thread(tid).pkru

        if policy.uses_agent and state.agent is not None and state.agent.initialized:
            routing = route_syscall(state, call)
        elif call.name in policy.intercepts:
            routing = RouteDecision.FORWARD
        else:
            routing = RouteDecision.NATIVE

        if routing is RouteDecision.DENY:
            state.log(tid, f"sys:{call.name}", "agent deny sensitive-inode")
            self._note_block(f"agent denied {call.name} (sensitive inode)")
            result = kernel.err("EPERM")
            self.oracle.note_syscall(state, tid, call, result, pre_pkru)
            return result

        original = call
        if routing is RouteDecision.FORWARD:
            try:
                decision = policy.on_syscall(state, tid, call)
            except MonitorTerminate as exc:
                state.log(tid, f"sys:{call.name}", f"{policy.name} terminate {exc}")
                self._terminate(str(exc))
                return None
            state.log(
                tid,
                f"sys:{call.name}",
                f"{policy.name} {decision.kind.value} {decision.reason}".rstrip(),
            )
            if decision.kind is DecisionKind.TERMINATE:
                self._terminate(decision.reason)
                return None
            if decision.kind is DecisionKind.DENY:
                self._note_block(f"{policy.name} denied {call.name}: {decision.reason}")
                result = kernel.err(decision.errno)
                self.oracle.note_syscall(state, tid, call, result, pre_pkru)
                return result
            applied = decision.call if decision.kind is DecisionKind.REWRITE else call
            result = apply_syscall(state, tid, applied)
            policy.after_apply(
                state,
                tid,
                applied,
                result,
                original=original if decision.kind is DecisionKind.REWRITE else None,
            )
        else:
            result = apply_syscall(state, tid, call)

        self.oracle.note_syscall(state, tid, original, result, pre_pkru)
        if result.ok and call.name in ("clone", "fork", "vfork"):
            self.policy.on_thread_event(state, created=True, tid=result.value)
        elif result.ok and call.name == "exit":
            self.policy.on_thread_event(state, created=False, tid=tid)
        return result

    # -- instruction stepping --------------------------------------------------

    def step_instruction(self, tid: int) -> None:
        state, policy = self.state, self.policy
        res = machine_step(state, tid)
        retries = 0
        while True:
            if res.status is StepStatus.ADVANCED:
                return
            if res.status is StepStatus.PKU_FAULT:
                state.log(tid, "fault", f"pku-fault at {res.addr:#x}")
                return
            if res.status is StepStatus.TERMINATED:
                self._terminate(res.reason or "terminated")
                return
            state.log(tid, f"trap:{res.status.value}", f"at {res.addr:#x}")
            try:
                out = policy.on_trap(state, tid, res)
            except MonitorTerminate as exc:
                self._terminate(str(exc))
                return
            state.log(
                tid,
                f"trap:{res.status.value}",
                f"{policy.name} {out.kind.value} {out.reason}".rstrip(),
            )
            if out.kind is TrapKind.TERMINATE:
                self._terminate(out.reason)
                return
            if out.kind is TrapKind.CONTINUED:
                return
            retries += 1
            if retries > 4:
                self._terminate("trap retry loop")
                return
            res = machine_step(state, tid)

    # -- main loop ----------------------------------------------------------------

    def run(self) -> Outcome:
        state, policy = self.state, self.policy
        policy.attach(state)
        self.oracle = BreachOracle(state, state.trusted_key, policy.patterns)

        for idx, item in enumerate(self.scenario.steps):
            self.step_index = idx
            if self.terminated or self.oracle.breach:
                break
            self.dispatch(item)
            self.oracle.scan(state)
            if self.audit and not self.terminated:
                violations = audit_invariants(state, policy)
                if violations:
                    raise AuditError(
                        f"{self.scenario.name!r} step {idx}: " + "; ".join(violations)
                    )

        if not self.terminated and not self.oracle.breach:
            self.step_index = len(self.scenario.steps)
            self._drain_jobs()
            self.oracle.scan(state)

        if self.oracle.breach:
            return Outcome(
                OutcomeKind.BREACH,
                evidence=self.oracle.breach,
                at_step=self.step_index,
            )
        if self.terminated:
            reason, at = self.terminated
            return Outcome(OutcomeKind.BLOCKED, reason=reason, at_step=at)
        if self.denied:
            reason, at = self.denied
            return Outcome(OutcomeKind.BLOCKED, reason=reason, at_step=at)
        return Outcome(OutcomeKind.COMPLETED)

    def dispatch(self, item: ScenarioStep) -> None:
        state = self.state
        if isinstance(item, Interleave):
            state.log(0, "mark", item.marker)
            return
        if isinstance(item, Spawn):
            if item.tid in self.tids:
                raise ScenarioError(f"thread {item.tid!r} spawned twice")
            new_tid = max(self.tids.values()) + 1
            self.tids[item.tid] = new_tid
            self._drain_jobs()
            self.do_syscall(0, Syscall("clone", {"tid": new_tid}))
            return
        tid = self.tid_of(item.tid)
        if isinstance(item, Sys):
            if self.policy.jobs:
                if self.policy.jobs[0].owner == tid:
                    self._drain_jobs()  # the owner is blocked in its own call
                elif self.policy.conflicts_with_scan(item.call):
                    state.log(tid, "monitor", f"scan-lock defers {item.call.name}")
                    self.deferred.append((tid, item.call))
                    return
            self.do_syscall(tid, item.call)
        elif isinstance(item, Step):
            if self.policy.jobs and self.policy.jobs[0].owner == tid:
                if item.count == 0:
                    self._drain_jobs(limit=1)
                    return
                self._drain_jobs()
            for _ in range(item.count):
                if self.terminated or self.oracle.breach:
                    break
                self.step_instruction(tid)
                self.oracle.scan(state)
        elif isinstance(item, WriteBytes):
            mem_access(state, tid, item.addr, Access.WRITE, Route.CPU, data=item.data)
        elif isinstance(item, SetReg):
            thr = state.thread(tid)
            if item.reg == "pkru":
                old = thr.pkru
                thr.pkru = item.value & 0xFFFFFFFF
                log_pkru_write(state, tid, old, thr.pkru, "setreg")
            elif item.reg in thr.regs:
                thr.regs[item.reg] = item.value
            else:
                raise ScenarioError(f"unknown register {item.reg!r}")
        else:  # pragma: no cover
            raise ScenarioError(f"unknown step {item!r}")


def run_scenario(
    scenario: Scenario,
    policy: Union[Policy, PolicyKind],
    trusted_key: int = 1,
    debug_slots: Optional[int] = None,
    audit: Optional[bool] = None,
) -> RunResult:
    """Execute a scenario under a policy and classify the outcome."""
    if isinstance(policy, PolicyKind):
        policy = make_policy(policy, trusted_key=trusted_key)
    engine = _Engine(
        scenario,
        policy,
        trusted_key,
        debug_slots if debug_slots is not None else configured_debug_slots(),
        audit,
    )
    outcome = engine.run()
    return RunResult(outcome=outcome, state=engine.state, policy=policy, scenario=scenario)


# ---- scenario text format -------------------------------------------------------
#
# One step per line:
#   spawn t1
#   step t0 3
#   sys t0 mmap addr=0x10000 len=4096 prot=rx flags=private,anon
#   write t0 0x10000 0f01ef
#   setreg t0 eax 0
#   interleave window-begin
#   expect blocked
# '#' starts a comment; addresses and byte strings are hex.

_SHARE_NAMES = {s.value: s for s in Share}


def _parse_prot(text: str) -> Perms:
    return Perms(read="r" in text, write="w" in text, exec="x" in text)


def _render_prot(p: Perms) -> str:
    out = ("r" if p.read else "") + ("w" if p.write else "") + ("x" if p.exec else "")
    return out or "-"


def _parse_int(text: str) -> int:
    return int(text, 0)


def _parse_sys_args(name: str, pairs: list[str]) -> dict:
    args: dict = {}
    for pair in pairs:
        key, _, raw = pair.partition("=")
        if not _:
            raise ScenarioError(f"malformed argument {pair!r}")
        if key == "prot":
            args["prot"] = _parse_prot(raw)
        elif key == "flags":
            for flag in raw.split(","):
                if flag in _SHARE_NAMES:
                    args["share"] = _SHARE_NAMES[flag]
                elif flag in ("anon", "file"):
                    args["backing"] = flag
                else:
                    raise ScenarioError(f"unknown mmap flag {flag!r}")
        elif key in ("data",):
            args["data"] = bytes.fromhex(raw)
        elif key == "rules":
            rules = {}
            for item in raw.split(","):
                rname, _, action = item.partition(":")
                rules[rname] = action
            args["rules"] = rules
        elif key in ("path", "old", "new", "obj", "option", "req"):
            args[key] = raw
        elif key == "xom":
            args["xom"] = raw not in ("0", "false")
        elif key == "fixed":
            args["fixed"] = raw not in ("0", "false")
        elif key == "regs":
            regs = {}
            for item in raw.split(","):
                rname, _, value = item.partition(":")
                regs[rname] = _parse_int(value)
            args["regs"] = regs
        else:
            args[key] = _parse_int(raw)
    return args


def _render_sys_args(args: dict) -> str:
    parts = []
    share = args.get("share")
    backing = args.get("backing")
    for key, value in args.items():
        if key == "share" or key == "backing":
            continue
        if key == "prot":
            parts.append(f"prot={_render_prot(value)}")
        elif key == "data":
            parts.append(f"data={value.hex()}")
        elif key == "rules":
            inner = ",".join(f"{k}:{v}" for k, v in sorted(value.items()))
            parts.append(f"rules={inner}")
        elif key == "regs":
            inner = ",".join(f"{k}:{v:#x}" for k, v in sorted(value.items()))
            parts.append(f"regs={inner}")
        elif isinstance(value, bool):
            parts.append(f"{key}={int(value)}")
        elif isinstance(value, int):
            parts.append(f"{key}={value:#x}")
        else:
            parts.append(f"{key}={value}")
    if share is not None or backing is not None:
        flags = []
        if share is not None:
            flags.append(share.value)
        if backing is not None:
            flags.append(backing)
        parts.append("flags=" + ",".join(flags))
    return " ".join(parts)


def parse_scenario(text: str, name: str = "scenario") -> Scenario:
    steps: list[ScenarioStep] = []
    expectation: Optional[Expectation] = None
    scn_name = name
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        kind = fields[0]
        try:
            if kind == "name":
                scn_name = " ".join(fields[1:])
            elif kind == "spawn":
                steps.append(Spawn(fields[1]))
            elif kind == "step":
                steps.append(Step(fields[1], int(fields[2], 0)))
            elif kind == "sys":
                call = Syscall(fields[2], _parse_sys_args(fields[2], fields[3:]))
                steps.append(Sys(fields[1], call))
            elif kind == "write":
                steps.append(WriteBytes(fields[1], _parse_int(fields[2]), bytes.fromhex(fields[3])))
            elif kind == "setreg":
                steps.append(SetReg(fields[1], fields[2], _parse_int(fields[3])))
            elif kind == "interleave":
                steps.append(Interleave(fields[1] if len(fields) > 1 else ""))
            elif kind == "expect":
                expectation = Expectation(fields[1])
            else:
                raise ScenarioError(f"unknown step kind {kind!r}")
        except (IndexError, ValueError) as exc:
            raise ScenarioError(f"line {lineno}: {raw_line.strip()!r}: {exc}") from exc
    if expectation is None:
        raise ScenarioError("scenario has no expect line")
    return Scenario(name=scn_name, steps=steps, expectation=expectation)


def render_scenario(scn: Scenario) -> str:
    lines = [f"name {scn.name}"]
    for item in scn.steps:
        if isinstance(item, Spawn):
            lines.append(f"spawn {item.tid}")
        elif isinstance(item, Step):
            lines.append(f"step {item.tid} {item.count}")
        elif isinstance(item, Sys):
            lines.append(f"sys {item.tid} {item.call.name} {_render_sys_args(item.call.args)}".rstrip())
        elif isinstance(item, WriteBytes):
            lines.append(f"write {item.tid} {item.addr:#x} {item.data.hex()}")
        elif isinstance(item, SetReg):
            lines.append(f"setreg {item.tid} {item.reg} {item.value:#x}")
        elif isinstance(item, Interleave):
            lines.append(f"interleave {item.marker}".rstrip())
    lines.append(f"expect {scn.expectation.value}")
    return "\n".join(lines) + "\n"
