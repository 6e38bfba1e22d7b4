"""In-kernel syscall agent: routes calls to the monitor or native execution.

The agent holds two lists installed once per process image: syscall names
to forward to the monitor (SList) and inodes whose opening is denied
(IList). Open-like calls are never forwarded; they are either denied by
inode or run natively, which is what keeps hot paths cheap. Hard and soft
links resolve to the same inode, so link aliases of a sensitive file are
denied too.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .kernel import Syscall, resolve_path
from .machine import SimState

# Calls the reference sandbox forwards to its monitor. Open variants are
# deliberately absent: the agent denies them by inode in kernel space.
DEFAULT_SLIST = frozenset(
    {
        "modify_ldt",
        "prctl",
        "seccomp",
        "ptrace",
        "process_vm_readv",
        "process_vm_writev",
        "mprotect",
        "pkey_mprotect",
        "pkey_alloc",
        "pkey_free",
        "mmap",
        "munmap",
        "mremap",
        "execve",
        "shmat",
        "shmdt",
        "clone",
        "fork",
        "vfork",
    }
)

OPEN_LIKE = frozenset({"open", "openat"})


class InitStatus(enum.Enum):
    OK = "ok"
    ALREADY_INITIALIZED = "already-initialized"


class RouteDecision(enum.Enum):
    FORWARD = "forward"
    NATIVE = "native"
    DENY = "deny"


@dataclass
class AgentState:
    slist: frozenset[str] = frozenset()
    ilist: frozenset[int] = frozenset()
    initialized: bool = False


def agent_init(
    state: SimState, tid: int, slist: Iterable[str], ilist: Iterable[int]
) -> InitStatus:
    """Install the lists; repeat attempts fail until execve resets the image."""
    if state.agent is None:
        state.agent = AgentState()
    if state.agent.initialized:
        state.log(tid, "agent", "init rejected: already initialized")
        return InitStatus.ALREADY_INITIALIZED
    state.agent.slist = frozenset(slist)
    state.agent.ilist = frozenset(ilist)
    state.agent.initialized = True
    state.log(tid, "agent", f"init slist={len(state.agent.slist)} ilist={len(state.agent.ilist)}")
    return InitStatus.OK


def agent_route(
    agent: AgentState, call: Syscall, resolved_inode: Optional[int] = None
) -> RouteDecision:
    """Pure routing decision; denial by inode precedes forwarding."""
    if call.name in OPEN_LIKE:
        if resolved_inode is not None and resolved_inode in agent.ilist:
            return RouteDecision.DENY
        return RouteDecision.NATIVE
    if call.name in agent.slist:
        return RouteDecision.FORWARD
    return RouteDecision.NATIVE


def route_syscall(state: SimState, call: Syscall) -> RouteDecision:
    """Route against the process agent, resolving open paths to inodes."""
    if state.agent is None or not state.agent.initialized:
        return RouteDecision.NATIVE
    inode = None
    if call.name in OPEN_LIKE:
        inode = resolve_path(state, call.args.get("path", ""))
    return agent_route(state.agent, call, inode)
