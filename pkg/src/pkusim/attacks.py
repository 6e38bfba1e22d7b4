"""Executable corpus: the eleven security-table attacks plus benign runs.

Every scenario is built from the same world: a trusted data page tagged
with the trusted key, a call-gate page whose register writes carry the
configured validation suffixes, an untrusted code page, scratch and stack.
Payload byte arrays come from the encoding helpers whose byte values are
pinned by the committed assembler-oracle fixture.

Scenario expectations record the outcome under the full defense
(garmr-erim); EXPECTED_OUTCOMES holds the per-policy truth table the
matrix is checked against, with None marking combinations the scenario
does not apply to (mirroring the published N/A cells).
"""

from __future__ import annotations

from typing import Optional

from . import emulator as emu
from .kernel import Syscall
from .machine import PAGE_SIZE, Perms, Share, pkru_locked_value
from .policy import PolicyKind
from .scenario import (
    Expectation,
    Interleave,
    Outcome,
    RunResult,
    Scenario,
    ScenarioStep,
    SetReg,
    Spawn,
    Step,
    Sys,
    WriteBytes,
    run_scenario,
)

TRUSTED_KEY = 1
PKRU_OPEN = 0
PKRU_LOCKED = pkru_locked_value(TRUSTED_KEY)

GATE_PAGE = 0x00100000
ENTER_GATE = GATE_PAGE
EXIT_GATE = GATE_PAGE + 0x40
MT_PAGE = 0x00200000
UCODE = 0x00300000
SCRATCH = 0x00400000
STACK = 0x00500000
SECRET = b"TRUSTED-SECRET-0"

RW = Perms(read=True, write=True)
RX = Perms(read=True, exec=True)
XONLY = Perms(exec=True)

# attacker payloads: an ungated register write, and a save-area restore
PAYLOAD_WRPKRU = emu.enc_wrpkru()
PAYLOAD_XRSTOR_RSI = emu.enc_xrstor("esi")
READ_ESI_CODE = emu.enc_mov_load("ebx", "esi")  # mov ebx, [rsi]


def gate_code(value: int) -> bytes:
    """Register-write gate: zero scratch regs, write, validate, or abort."""
    return (
        emu.enc_xor_rr("ecx", "ecx")
        + emu.enc_xor_rr("edx", "edx")
        + emu.enc_mov_ri("eax", value)
        + emu.enc_wrpkru()
        + emu.enc_cmp_ri("eax", value)
        + emu.enc_jne(1)
        + emu.enc_ret()
        + emu.enc_int3()
    )


GATE_STEPS = 6  # xor, xor, mov, wrpkru, cmp, jne


def _mmap(addr, length, prot, share=Share.PRIVATE, backing=None, **extra) -> Syscall:
    args = {"addr": addr, "len": length, "prot": prot, "share": share}
    if backing is not None:
        args["backing"] = backing
    args.update(extra)
    return Syscall("mmap", args)


def _mprotect(addr, length, prot, xom=False) -> Syscall:
    args = {"addr": addr, "len": length, "prot": prot}
    if xom:
        args["xom"] = True
    return Syscall("mprotect", args)


def _pkey_mprotect(addr, length, prot, key) -> Syscall:
    return Syscall("pkey_mprotect", {"addr": addr, "len": length, "prot": prot, "key": key})


def _page_with(content: dict[int, bytes], fill: int = 0xCC) -> bytes:
    page = bytearray([fill]) * PAGE_SIZE
    page = bytearray([fill] * PAGE_SIZE)
    for offset, data in content.items():
        page[offset : offset + len(data)] = data
    return bytes(page)


def _map_code(tid: str, addr: int, content: bytes) -> list[ScenarioStep]:
    """Map rw, plant bytes, then ask for execute permissions."""
    return [
        Sys(tid, _mmap(addr, PAGE_SIZE, RW)),
        WriteBytes(tid, addr, content),
        Sys(tid, _mprotect(addr, PAGE_SIZE, RX)),
    ]


def world_prologue(gate: bool = True, ucode: bytes = b"") -> list[ScenarioStep]:
    """Common trusted-side setup, run while the main thread is trusted."""
    steps: list[ScenarioStep] = []
    if gate:
        gate_page = _page_with({0: gate_code(PKRU_OPEN), 0x40: gate_code(PKRU_LOCKED)})
        steps += _map_code("t0", GATE_PAGE, gate_page)
    steps += [
        Sys("t0", _mmap(MT_PAGE, PAGE_SIZE, RW)),
        Sys("t0", _pkey_mprotect(MT_PAGE, PAGE_SIZE, RW, TRUSTED_KEY)),
        WriteBytes("t0", MT_PAGE, SECRET),
        Sys("t0", _mmap(SCRATCH, PAGE_SIZE, RW)),
        Sys("t0", _mmap(STACK, PAGE_SIZE, RW)),
    ]
    if ucode:
        steps += _map_code("t0", UCODE, _page_with({0: ucode}))
    return steps


def lock_to_untrusted(tid: str = "t0") -> list[ScenarioStep]:
    # entering the untrusted domain is a lock transition; attacks must do
    # their unlocking through real mechanisms, never through setreg
    return [SetReg(tid, "pkru", PKRU_LOCKED)]


def _zero_wrpkru_regs(tid: str) -> list[ScenarioStep]:
    return [SetReg(tid, "eax", 0), SetReg(tid, "ecx", 0), SetReg(tid, "edx", 0)]


def _read_trusted(tid: str, addr: int = MT_PAGE) -> list[ScenarioStep]:
    return [SetReg(tid, "esi", addr), SetReg(tid, "rip", UCODE), Step(tid, 1)]


NOT_ERIM = frozenset(
    {PolicyKind.NO_SANDBOX, PolicyKind.HODOR_MODEL, PolicyKind.GARMR_ERIM}
)
ERIM_WORLD = frozenset(
    {
        PolicyKind.NO_SANDBOX,
        PolicyKind.ERIM_MODEL,
        PolicyKind.HODOR_MODEL,
        PolicyKind.GARMR_ERIM,
    }
)


# ---- the eleven table rows -------------------------------------------------


def attack_pt_permissions() -> Scenario:
    steps = world_prologue()
    steps += lock_to_untrusted()
    steps.append(Sys("t0", Syscall("process_vm_readv", {"addr": MT_PAGE, "len": 16})))
    return Scenario(
        "Inconsistencies of PT permissions", steps, Expectation.BLOCKED, ERIM_WORLD
    )


def attack_pku_permissions() -> Scenario:
    steps = world_prologue()
    steps += lock_to_untrusted()
    steps += [
        Sys("t0", Syscall("open", {"path": "/proc/self/mem"})),
        # links share the target inode, so the alias must be refused too
        Sys("t0", Syscall("link", {"old": "/proc/self/mem", "new": "/tmp/mem-alias"})),
        Sys("t0", Syscall("open", {"path": "/tmp/mem-alias"})),
        Sys("t0", Syscall("write", {"fd": 3, "offset": MT_PAGE, "data": b"\x41" * 4})),
    ]
    return Scenario(
        "Inconsistencies of PKU permissions", steps, Expectation.BLOCKED, ERIM_WORLD
    )


def attack_mutable_backings() -> Scenario:
    alias_w = 0x00600000
    alias_x = 0x00610000
    fcode = 0x00620000
    steps = world_prologue()
    steps += lock_to_untrusted()
    steps += _zero_wrpkru_regs("t0")
    steps += [
        # route 1: double mapping of the same shared object
        Sys("t0", _mmap(alias_w, PAGE_SIZE, RW, share=Share.SHARED, obj="blob")),
        Sys("t0", _mmap(alias_x, PAGE_SIZE, RX, share=Share.SHARED, obj="blob")),
        WriteBytes("t0", alias_w, PAYLOAD_WRPKRU),
        SetReg("t0", "rip", alias_x),
        Step("t0", 1),
        # route 2: mutate the backing file of an executable mapping
        Sys("t0", Syscall("open", {"path": "/tmp/libdemo.so", "create": True})),
        Sys("t0", Syscall("write", {"fd": 3, "data": b"\xcc" * 128})),
        Sys("t0", _mmap(fcode, PAGE_SIZE, RX, backing="file", fd=3, offset=0)),
        Sys("t0", Syscall("write", {"fd": 3, "offset": 0x40, "data": PAYLOAD_WRPKRU})),
        SetReg("t0", "rip", fcode + 0x40),
        Step("t0", 1),
    ]
    return Scenario(
        "Mapping with mutable backings", steps, Expectation.BLOCKED, ERIM_WORLD
    )


def attack_relocation() -> Scenario:
    pa = 0x00600000
    pb = 0x00700000
    seam_left = _page_with({PAGE_SIZE - 2: b"\x0f\x01"}, fill=0x90)
    seam_right = _page_with({0: b"\xef"}, fill=0x90)
    steps = world_prologue()
    steps += _map_code("t0", pa, seam_left)
    steps += _map_code("t0", pb, seam_right)
    steps += lock_to_untrusted()
    steps += _zero_wrpkru_regs("t0")
    steps += [
        Sys(
            "t0",
            Syscall(
                "mremap",
                {"old": pb, "old_len": PAGE_SIZE, "new_len": PAGE_SIZE, "fixed": True, "new_addr": pa + PAGE_SIZE},
            ),
        ),
        SetReg("t0", "rip", pa + PAGE_SIZE - 2),
        Step("t0", 1),
    ]
    return Scenario(
        "Changing code by relocation", steps, Expectation.BLOCKED, ERIM_WORLD
    )


def attack_seccomp() -> Scenario:
    new_secret = 0x00800000
    steps = world_prologue(ucode=READ_ESI_CODE)
    steps += lock_to_untrusted()
    steps += [
        Sys("t0", Syscall("seccomp", {"rules": {"pkey_mprotect": "fake_success"}})),
        # hand control to the trusted side through the entry gate
        SetReg("t0", "rip", ENTER_GATE),
        Step("t0", GATE_STEPS),
        # trusted code believes this page is now isolated
        Sys("t0", _mmap(new_secret, PAGE_SIZE, RW)),
        Sys("t0", _pkey_mprotect(new_secret, PAGE_SIZE, RW, TRUSTED_KEY)),
        WriteBytes("t0", new_secret, b"FRESH-KEY-MATERIAL"),
        # back to untrusted through the exit gate
        SetReg("t0", "rip", EXIT_GATE),
        Step("t0", GATE_STEPS),
    ]
    steps += _read_trusted("t0", new_secret)
    return Scenario(
        "Influencing intra-process behavior with seccomp",
        steps,
        Expectation.BLOCKED,
        ERIM_WORLD,
    )


def attack_modify_trusted() -> Scenario:
    steps = world_prologue(ucode=READ_ESI_CODE)
    steps += lock_to_untrusted()
    steps.append(Sys("t0", _pkey_mprotect(MT_PAGE, PAGE_SIZE, RW, 0)))
    steps += _read_trusted("t0")
    return Scenario("Modifying trusted mappings", steps, Expectation.BLOCKED, ERIM_WORLD)


def attack_scan_race(
    write_position: int = 0, protocolized_window: bool = True
) -> Scenario:
    """Two threads race the scan of a page about to become executable.

    write_position places the injecting thread's store around the publish
    protocol: 0 before the permission change, 1..2 between its phases, 3
    after it. Position 0 is the canonical matrix schedule; the exhaustive
    suite sweeps all of them.
    """
    race_page = 0x00900000
    inject = [WriteBytes("t1", race_page + 16, PAYLOAD_WRPKRU)]
    steps = world_prologue()
    steps += lock_to_untrusted()
    steps += [
        Spawn("t1"),
        Sys("t0", _mmap(race_page, PAGE_SIZE, RW)),
        WriteBytes("t0", race_page, b"\xcc" * 32),
    ]
    window = [
        Sys("t0", _mprotect(race_page, PAGE_SIZE, RX)),
        Step("t0", 0),  # monitor quantum: scan
        Step("t0", 0),  # monitor quantum: finalize
    ]
    slots = [[], [], [], []]
    slots[write_position] = inject
    steps += slots[0] + [window[0]] + slots[1] + [window[1]] + slots[2] + [window[2]] + slots[3]
    steps += _zero_wrpkru_regs("t1")
    steps += [SetReg("t1", "rip", race_page + 16), Step("t1", 1)]
    name = "Race conditions in scanning"
    if write_position != 0:
        name += f" (schedule {write_position})"
    return Scenario(name, steps, Expectation.BLOCKED, ERIM_WORLD)


def attack_trusted_determination() -> Scenario:
    steps = world_prologue(ucode=READ_ESI_CODE)
    steps += [
        # the main thread keeps working inside T while the attacker thread
        # issues the retag request from U
        Spawn("t1"),
        SetReg("t1", "pkru", PKRU_LOCKED),
        Sys("t1", _pkey_mprotect(MT_PAGE, PAGE_SIZE, RW, 0)),
    ]
    steps += _read_trusted("t1")
    return Scenario(
        "Determination of trusted mappings", steps, Expectation.BLOCKED, ERIM_WORLD
    )


def attack_signal_context() -> Scenario:
    steps = world_prologue(ucode=READ_ESI_CODE)
    steps += lock_to_untrusted()
    steps += [
        Sys("t0", Syscall("sigreturn", {"pkru": PKRU_OPEN, "regs": {"rip": UCODE}})),
    ]
    steps += _read_trusted("t0")
    return Scenario("Signal context attacks", steps, Expectation.BREACH, ERIM_WORLD)


def attack_vetted_relocation() -> Scenario:
    vpage = 0x00A00000
    vpage2 = 0x00B00000
    content = _page_with({0: emu.enc_nop(), 16: PAYLOAD_WRPKRU}, fill=0xCC)
    steps = world_prologue()
    steps += _map_code("t0", vpage, content)
    steps += lock_to_untrusted()
    steps += [
        # execute something harmless so breakpoint-based vetting engages
        SetReg("t0", "rip", vpage),
        Step("t0", 1),
        Sys(
            "t0",
            Syscall(
                "mremap",
                {"old": vpage, "old_len": PAGE_SIZE, "new_len": PAGE_SIZE, "fixed": True, "new_addr": vpage2},
            ),
        ),
    ]
    steps += _zero_wrpkru_regs("t0")
    steps += [SetReg("t0", "rip", vpage2 + 16), Step("t0", 1)]
    return Scenario(
        "Vetted unsafe instruction relocation", steps, Expectation.BLOCKED, NOT_ERIM
    )


def attack_incomplete_debug_update() -> Scenario:
    vpage = 0x00A00000
    content = _page_with({0: emu.enc_nop(), 16: PAYLOAD_WRPKRU}, fill=0xCC)
    steps = world_prologue()
    steps += _map_code("t0", vpage, content)
    steps += lock_to_untrusted()
    steps += [
        SetReg("t0", "rip", vpage),
        Step("t0", 1),
        # breakpoints live in per-thread registers; the new thread's set is
        # whatever the sandbox managed to give it
        Spawn("t1"),
    ]
    steps += _zero_wrpkru_regs("t1")
    steps += [SetReg("t1", "rip", vpage + 16), Step("t1", 1)]
    return Scenario(
        "Incomplete debug register update", steps, Expectation.BLOCKED, NOT_ERIM
    )


def attack_unsafe_xrstor() -> Scenario:
    """Unvetted xrstor with eax bit 9 set (the vetting-coverage gap)."""
    xpage = 0x00A00000
    content = _page_with({0: PAYLOAD_XRSTOR_RSI}, fill=0xCC)
    steps = world_prologue()
    steps += [WriteBytes("t0", SCRATCH, b"\x00\x00\x00\x00")]
    steps += _map_code("t0", xpage, content)
    steps += lock_to_untrusted()
    steps += [
        SetReg("t0", "esi", SCRATCH),
        SetReg("t0", "eax", 1 << 9),
        SetReg("t0", "rip", xpage),
        Step("t0", 1),
    ]
    return Scenario("Unsafe xrstor execution", steps, Expectation.BLOCKED, ERIM_WORLD)


# ---- benign workloads --------------------------------------------------------


def benign_gate_transitions() -> Scenario:
    steps = world_prologue(ucode=READ_ESI_CODE)
    steps += [
        SetReg("t0", "rip", EXIT_GATE),
        Step("t0", GATE_STEPS),
        SetReg("t0", "rip", ENTER_GATE),
        Step("t0", GATE_STEPS),
    ]
    steps += _read_trusted("t0")
    steps += [
        SetReg("t0", "rip", EXIT_GATE),
        Step("t0", GATE_STEPS),
    ]
    return Scenario(
        "benign: gate-mediated domain transitions",
        steps,
        Expectation.COMPLETED,
        ERIM_WORLD,
    )


def benign_anonymous_exec() -> Scenario:
    code = 0x00C00000
    steps = [
        Sys("t0", _mmap(code, PAGE_SIZE, RW)),
        WriteBytes("t0", code, emu.enc_nop() * 3),
        Sys("t0", _mprotect(code, PAGE_SIZE, RX)),
        SetReg("t0", "rip", code),
        Step("t0", 3),
    ]
    return Scenario("benign: anonymous executable mapping", steps, Expectation.COMPLETED)


def benign_file_backed_load() -> Scenario:
    code = 0x00C00000
    steps = [
        Sys("t0", Syscall("open", {"path": "/lib/libdemo.so", "create": True})),
        Sys("t0", Syscall("write", {"fd": 3, "data": emu.enc_nop() * 4})),
        Sys("t0", _mmap(code, PAGE_SIZE, RX, backing="file", fd=3, offset=0)),
        SetReg("t0", "rip", code),
        Step("t0", 4),
    ]
    return Scenario("benign: file-backed library load", steps, Expectation.COMPLETED)


def benign_execute_only() -> Scenario:
    code = 0x00C00000
    steps = [
        Sys("t0", _mmap(code, PAGE_SIZE, RW)),
        WriteBytes("t0", code, emu.enc_nop() * 2),
        Sys("t0", _mprotect(code, PAGE_SIZE, XONLY, xom=True)),
        SetReg("t0", "rip", code),
        Step("t0", 2),
    ]
    return Scenario("benign: execute-only code page", steps, Expectation.COMPLETED)


# ---- corpus and matrix -------------------------------------------------------

ATTACK_ROWS = [
    "Inconsistencies of PT permissions",
    "Inconsistencies of PKU permissions",
    "Mapping with mutable backings",
    "Changing code by relocation",
    "Influencing intra-process behavior with seccomp",
    "Modifying trusted mappings",
    "Race conditions in scanning",
    "Determination of trusted mappings",
    "Signal context attacks",
    "Vetted unsafe instruction relocation",
    "Incomplete debug register update",
]


def builtin_attacks() -> list[Scenario]:
    """The eleven table rows, in row order, plus the benign set."""
    return [
        attack_pt_permissions(),
        attack_pku_permissions(),
        attack_mutable_backings(),
        attack_relocation(),
        attack_seccomp(),
        attack_modify_trusted(),
        attack_scan_race(),
        attack_trusted_determination(),
        attack_signal_context(),
        attack_vetted_relocation(),
        attack_incomplete_debug_update(),
        benign_gate_transitions(),
        benign_anonymous_exec(),
        benign_file_backed_load(),
        benign_execute_only(),
    ]


def hodor_flaw_scenarios() -> list[Scenario]:
    """The three published vetting flaws, breach-able under hodor-model."""
    return [
        attack_unsafe_xrstor(),
        attack_vetted_relocation(),
        attack_incomplete_debug_update(),
    ]


_B = Expectation.BLOCKED
_X = Expectation.BREACH
_C = Expectation.COMPLETED

# per-policy truth table; None marks not-applicable combinations
EXPECTED_OUTCOMES: dict[str, dict[PolicyKind, Optional[Expectation]]] = {
    "Inconsistencies of PT permissions": {
        PolicyKind.NO_SANDBOX: _X,
        PolicyKind.ERIM_MODEL: _X,
        PolicyKind.HODOR_MODEL: _X,
        PolicyKind.GARMR_ERIM: _B,
        PolicyKind.GARMR_XOM: None,
    },
    "Inconsistencies of PKU permissions": {
        PolicyKind.NO_SANDBOX: _X,
        PolicyKind.ERIM_MODEL: _X,
        PolicyKind.HODOR_MODEL: _X,
        PolicyKind.GARMR_ERIM: _B,
        PolicyKind.GARMR_XOM: None,
    },
    "Mapping with mutable backings": {
        PolicyKind.NO_SANDBOX: _X,
        PolicyKind.ERIM_MODEL: _X,
        PolicyKind.HODOR_MODEL: _X,
        PolicyKind.GARMR_ERIM: _B,
        PolicyKind.GARMR_XOM: None,
    },
    "Changing code by relocation": {
        PolicyKind.NO_SANDBOX: _X,
        PolicyKind.ERIM_MODEL: _X,
        PolicyKind.HODOR_MODEL: _X,
        PolicyKind.GARMR_ERIM: _B,
        PolicyKind.GARMR_XOM: None,
    },
    "Influencing intra-process behavior with seccomp": {
        PolicyKind.NO_SANDBOX: _X,
        PolicyKind.ERIM_MODEL: _X,
        PolicyKind.HODOR_MODEL: _X,
        PolicyKind.GARMR_ERIM: _B,
        PolicyKind.GARMR_XOM: None,
    },
    "Modifying trusted mappings": {
        PolicyKind.NO_SANDBOX: _X,
        PolicyKind.ERIM_MODEL: _B,
        PolicyKind.HODOR_MODEL: _B,
        PolicyKind.GARMR_ERIM: _B,
        PolicyKind.GARMR_XOM: None,
    },
    "Race conditions in scanning": {
        PolicyKind.NO_SANDBOX: _X,
        PolicyKind.ERIM_MODEL: _B,
        PolicyKind.HODOR_MODEL: _B,
        PolicyKind.GARMR_ERIM: _B,
        PolicyKind.GARMR_XOM: None,
    },
    "Determination of trusted mappings": {
        PolicyKind.NO_SANDBOX: _X,
        PolicyKind.ERIM_MODEL: _X,
        PolicyKind.HODOR_MODEL: _B,
        PolicyKind.GARMR_ERIM: _B,
        PolicyKind.GARMR_XOM: None,
    },
    "Signal context attacks": {
        PolicyKind.NO_SANDBOX: _X,
        PolicyKind.ERIM_MODEL: _X,
        PolicyKind.HODOR_MODEL: _X,
        PolicyKind.GARMR_ERIM: _X,
        PolicyKind.GARMR_XOM: None,
    },
    "Vetted unsafe instruction relocation": {
        PolicyKind.NO_SANDBOX: _X,
        PolicyKind.ERIM_MODEL: None,
        PolicyKind.HODOR_MODEL: _X,
        PolicyKind.GARMR_ERIM: _B,
        PolicyKind.GARMR_XOM: None,
    },
    "Incomplete debug register update": {
        PolicyKind.NO_SANDBOX: _X,
        PolicyKind.ERIM_MODEL: None,
        PolicyKind.HODOR_MODEL: _X,
        PolicyKind.GARMR_ERIM: _B,
        PolicyKind.GARMR_XOM: None,
    },
    "benign: gate-mediated domain transitions": {
        PolicyKind.NO_SANDBOX: _C,
        PolicyKind.ERIM_MODEL: _C,
        PolicyKind.HODOR_MODEL: _C,
        PolicyKind.GARMR_ERIM: _C,
        PolicyKind.GARMR_XOM: None,
    },
    "benign: anonymous executable mapping": {kind: _C for kind in PolicyKind},
    "benign: file-backed library load": {kind: _C for kind in PolicyKind},
    "benign: execute-only code page": {kind: _C for kind in PolicyKind},
}


def attack_matrix(
    policies: list[PolicyKind], scenarios: Optional[list[Scenario]] = None
) -> dict[tuple[str, PolicyKind], Optional[RunResult]]:
    """Full scenario-by-policy cross product; None cells are not applicable."""
    if scenarios is None:
        scenarios = builtin_attacks()
    table: dict[tuple[str, PolicyKind], Optional[RunResult]] = {}
    for scn in scenarios:
        for kind in policies:
            if not scn.applies_to(kind):
                table[(scn.name, kind)] = None
                continue
            table[(scn.name, kind)] = run_scenario(scn, kind, trusted_key=TRUSTED_KEY)
    return table


def race_schedule_results(protocolized: bool = True) -> list[tuple[str, Outcome]]:
    """Run the scan race over every write placement in the critical window."""
    from .policy import GarmrErim

    results = []
    for position in range(4):
        scn = attack_scan_race(write_position=position)
        policy = GarmrErim(trusted_key=TRUSTED_KEY, scan_protocol=protocolized)
        res = run_scenario(scn, policy, trusted_key=TRUSTED_KEY, audit=protocolized)
        results.append((f"write-at-{position}", res.outcome))
    return results
