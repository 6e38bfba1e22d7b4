"""Linux-like syscall semantics over SimState, with no sandbox in the loop.

This layer is deliberately permissive: it faithfully reproduces the kernel
interfaces that ignore page-table and protection-key permissions
(process_vm_*, /proc/self/mem I/O, ptrace), mutable file backings,
relocation, seccomp ERRNO-style fake success, and signal-context restore.
Every attack in the corpus must land against this layer alone; defenses are
the policy module's job.

Syscalls are a name plus an argument dict (the scenario DSL maps onto this
directly); results use errno-style string codes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional

from .machine import (
    PAGE_SIZE,
    Access,
    BackingKind,
    FileObject,
    KEY_COUNT,
    Mapping,
    MemObject,
    Perms,
    Route,
    SeccompFilter,
    Share,
    SimState,
    log_pkru_write,
    mem_access,
    pkru_locked_value,
)

XOM_KEY = 15  # reserved for kernel-applied execute-only memory


@dataclass
class Syscall:
    name: str
    args: dict[str, Any] = field(default_factory=dict)

    def __str__(self) -> str:
        inner = " ".join(f"{k}={_fmt_arg(v)}" for k, v in self.args.items())
        return f"{self.name}({inner})"


def _fmt_arg(v) -> str:
    if isinstance(v, int):
        return hex(v)
    if isinstance(v, bytes):
        return v.hex()
    if isinstance(v, Perms):
        return str(v)
    if isinstance(v, (Share,)):
        return v.value
    if isinstance(v, dict):
        return ",".join(f"{k}:{x}" for k, x in sorted(v.items()))
    if isinstance(v, (list, set, frozenset, tuple)):
        return ",".join(str(x) for x in sorted(v, key=str))
    return str(v)


@dataclass
class SysResult:
    ok: bool
    value: Any = None
    error: Optional[str] = None
    faked: bool = False  # seccomp returned success without doing anything

    def __str__(self) -> str:
        if self.ok:
            v = _fmt_arg(self.value) if self.value is not None else "0"
            return f"ok {v}" + (" (faked)" if self.faked else "")
        return f"err {self.error}"


def ok(value=None) -> SysResult:
    return SysResult(True, value=value)


def err(code: str) -> SysResult:
    return SysResult(False, error=code)


def resolve_path(state: SimState, path: str) -> Optional[int]:
    """Inode for a path; hard and soft links share the target's inode."""
    return state.path_table.get(path)


def apply_syscall(state: SimState, tid: int, call: Syscall) -> SysResult:
    """Apply one syscall with default kernel semantics.

    A matching seccomp fake-success rule short-circuits everything: the call
    performs nothing and reports success, exactly the confused-deputy
    behavior a malicious filter needs.
    """
    thr = state.thread(tid)
    if thr.seccomp is not None and thr.seccomp.fakes(call.name):
        res = SysResult(True, faked=True)
    else:
        handler = _HANDLERS.get(call.name)
        if handler is None:
            res = err("ENOSYS")
        else:
            res = handler(state, tid, call.args)
    state.log(tid, "sys", f"{call} -> {res}", name=call.name, ok=res.ok, faked=res.faked)
    return res


# ---- memory management ---------------------------------------------------


def _aligned(*values: int) -> bool:
    return all(v % PAGE_SIZE == 0 for v in values)


def _sys_mmap(state: SimState, tid: int, a: dict) -> SysResult:
    length = a["len"]
    addr = a.get("addr", 0)
    prot: Perms = a.get("prot", Perms())
    share: Share = a.get("share", Share.PRIVATE)
    backing = a.get("backing", "anon")
    if length <= 0 or not _aligned(addr, length):
        return err("EINVAL")
    if addr == 0:
        addr = state.find_free(length)
    elif state.mappings_overlapping(addr, length):
        return err("EEXIST")

    if backing == "file":
        fd = a.get("fd")
        offset = a.get("offset", 0)
        entry = state.fds.get(fd)
        if entry is None or not _aligned(offset):
            return err("EBADF")
        fobj = state.files[entry["inode"]]
        if fobj.mem_view:
            return err("EACCES")
        if len(fobj.data) < offset + length:  # zero-fill beyond EOF
            fobj.data.extend(bytes(offset + length - len(fobj.data)))
        m = Mapping(
            start=addr,
            length=length,
            perms=prot,
            share=share,
            backing=BackingKind.FILE,
            inode=entry["inode"],
            file_offset=offset,
            store=fobj,
            store_offset=offset,
        )
    elif share in (Share.SHARED, Share.SHARED_VALIDATE):
        obj = a.get("obj", f"anon-shm-{addr:#x}")
        store = state.shm_objects.get(obj)
        if store is None:
            store = MemObject(bytearray(length))
            state.shm_objects[obj] = store
        elif len(store.data) < length:
            store.data.extend(bytes(length - len(store.data)))
        m = Mapping(
            start=addr, length=length, perms=prot, share=share, store=store
        )
    else:
        m = Mapping(start=addr, length=length, perms=prot, share=share)
    state.add_mapping(m)
    return ok(addr)


def _sys_munmap(state: SimState, tid: int, a: dict) -> SysResult:
    addr, length = a["addr"], a["len"]
    if length <= 0 or not _aligned(addr, length):
        return err("EINVAL")
    state.split_at(addr)
    state.split_at(addr + length)
    for m in state.mappings_overlapping(addr, length):
        state.remove_mapping(m)
    return ok()


def _sys_mremap(state: SimState, tid: int, a: dict) -> SysResult:
    old, old_len = a["old"], a["old_len"]
    new_len = a.get("new_len", old_len)
    if not _aligned(old, old_len, new_len) or old_len <= 0 or new_len <= 0:
        return err("EINVAL")
    m = state.mapping_at(old)
    if m is None or m.start != old or m.length != old_len:
        return err("EINVAL")
    if new_len != old_len:
        return err("EINVAL")  # moves only; growth is out of corpus scope

    if a.get("fixed"):
        dest = a["new_addr"]
        if not _aligned(dest):
            return err("EINVAL")
        others = [x for x in state.mappings_overlapping(dest, new_len) if x is not m]
        if others:
            return err("EEXIST")
    else:
        dest = state.find_free(new_len)

    # Relocation preserves bytes, permissions and key by carrying the
    # backing store along. Debug registers of every thread are left alone;
    # that gap is precisely what the stale-breakpoint attack exploits.
    state.remove_mapping(m)
    m.start = dest
    state.add_mapping(m)
    return ok(dest)


def _apply_prot_range(state, addr, length, mutate) -> SysResult:
    if length <= 0 or not _aligned(addr, length):
        return err("EINVAL")
    covered = state.mappings_overlapping(addr, length)
    total = sum(m.length for m in covered)
    if total != length:
        return err("ENOMEM")  # hole in range
    state.split_at(addr)
    state.split_at(addr + length)
    for m in state.mappings_overlapping(addr, length):
        mutate(m)
    return ok()


def _sys_mprotect(state: SimState, tid: int, a: dict) -> SysResult:
    prot: Perms = a.get("prot", Perms())
    if a.get("xom"):
        # Enhanced form: the kernel tags the range with a reserved key and
        # locks that key's access-disable bit in every thread, leaving the
        # page-table entry readable. No user-space register write involved.
        if state.xom_key is None:
            if XOM_KEY in state.allocated_keys:
                return err("ENOSPC")
            state.xom_key = XOM_KEY
            state.allocated_keys.add(XOM_KEY)

        def mutate(m):
            m.perms = Perms(read=True, write=False, exec=True)
            m.pkey = state.xom_key

        res = _apply_prot_range(state, a["addr"], a["len"], mutate)
        if res.ok:
            for thr in state.live_threads():
                old = thr.pkru
                new = pkru_locked_value(state.xom_key, base=old)
                if new != old:
                    thr.pkru = new
                    log_pkru_write(state, thr.tid, old, new, "xom-apply")
        return res

    def mutate(m):
        m.perms = prot

    return _apply_prot_range(state, a["addr"], a["len"], mutate)


def _sys_pkey_alloc(state: SimState, tid: int, a: dict) -> SysResult:
    for key in range(1, KEY_COUNT):
        if key not in state.allocated_keys:
            state.allocated_keys.add(key)
            return ok(key)
    return err("ENOSPC")


def _sys_pkey_free(state: SimState, tid: int, a: dict) -> SysResult:
    key = a["key"]
    if key == 0 or key not in state.allocated_keys:
        return err("EINVAL")
    state.allocated_keys.discard(key)
    return ok()


def _sys_pkey_mprotect(state: SimState, tid: int, a: dict) -> SysResult:
    key = a["key"]
    if not 0 <= key < KEY_COUNT or key not in state.allocated_keys:
        return err("EINVAL")
    prot: Perms = a.get("prot", Perms(read=True, write=True))

    def mutate(m):
        m.perms = prot
        m.pkey = key

    return _apply_prot_range(state, a["addr"], a["len"], mutate)


# ---- files and confused deputies -----------------------------------------


def _sys_open(state: SimState, tid: int, a: dict) -> SysResult:
    inode = resolve_path(state, a["path"])
    if inode is None:
        if not a.get("create"):
            return err("ENOENT")
        inode = state.add_file(a["path"])
    fd = state.new_fd()
    state.fds[fd] = {"inode": inode, "cursor": 0}
    return ok(fd)


def _sys_read(state: SimState, tid: int, a: dict) -> SysResult:
    entry = state.fds.get(a["fd"])
    if entry is None:
        return err("EBADF")
    fobj = state.files[entry["inode"]]
    length = a["len"]
    if fobj.mem_view:
        # positions in /proc/self/mem are virtual addresses; I/O ignores
        # page and protection-key permissions
        if "offset" not in a:
            return err("EINVAL")
        res = mem_access(
            state, tid, a["offset"], Access.READ, Route.KERNEL_DIRECT, length=length
        )
        if not res.ok:
            return err("EIO")
        return ok(res.data)
    offset = a.get("offset", entry["cursor"])
    data = bytes(fobj.data[offset : offset + length])
    if "offset" not in a:
        entry["cursor"] = offset + len(data)
    return ok(data)


def _sys_write(state: SimState, tid: int, a: dict) -> SysResult:
    entry = state.fds.get(a["fd"])
    if entry is None:
        return err("EBADF")
    fobj = state.files[entry["inode"]]
    data = a["data"]
    if fobj.mem_view:
        if "offset" not in a:
            return err("EINVAL")
        res = mem_access(
            state, tid, a["offset"], Access.WRITE, Route.KERNEL_DIRECT, data=data
        )
        return ok(len(data)) if res.ok else err("EIO")
    if not fobj.mutable:
        return err("EACCES")
    offset = a.get("offset", entry["cursor"])
    if len(fobj.data) < offset + len(data):
        fobj.data.extend(bytes(offset + len(data) - len(fobj.data)))
    fobj.data[offset : offset + len(data)] = data
    if "offset" not in a:
        entry["cursor"] = offset + len(data)
    return ok(len(data))


def _sys_link(state: SimState, tid: int, a: dict) -> SysResult:
    inode = resolve_path(state, a["old"])
    if inode is None:
        return err("ENOENT")
    if a["new"] in state.path_table:
        return err("EEXIST")
    state.path_table[a["new"]] = inode
    return ok()


def _sys_process_vm_readv(state: SimState, tid: int, a: dict) -> SysResult:
    res = mem_access(
        state, tid, a["addr"], Access.READ, Route.KERNEL_DIRECT, length=a["len"]
    )
    return ok(res.data) if res.ok else err("EFAULT")


def _sys_process_vm_writev(state: SimState, tid: int, a: dict) -> SysResult:
    res = mem_access(
        state, tid, a["addr"], Access.WRITE, Route.KERNEL_DIRECT, data=a["data"]
    )
    return ok(len(a["data"])) if res.ok else err("EFAULT")


def _sys_ptrace(state: SimState, tid: int, a: dict) -> SysResult:
    # Modeled as a request that, when permitted, grants direct kernel-route
    # access; enough to express the permission-inconsistency attacks
    # without a second tracee process.
    req = a.get("req", "attach")
    if req == "attach":
        return ok()
    if req == "peek":
        res = mem_access(
            state, tid, a["addr"], Access.READ, Route.KERNEL_DIRECT, length=a.get("len", 8)
        )
        return ok(res.data) if res.ok else err("EFAULT")
    if req == "poke":
        res = mem_access(
            state, tid, a["addr"], Access.WRITE, Route.KERNEL_DIRECT, data=a["data"]
        )
        return ok() if res.ok else err("EFAULT")
    return err("EINVAL")


# ---- process control ------------------------------------------------------


def _install_seccomp(state: SimState, tid: int, rules: dict) -> SysResult:
    thr = state.thread(tid)
    if thr.seccomp is None:
        thr.seccomp = SeccompFilter()
    thr.seccomp.rules.update(rules)
    return ok()


def _sys_seccomp(state: SimState, tid: int, a: dict) -> SysResult:
    return _install_seccomp(state, tid, a.get("rules", {}))


def _sys_prctl(state: SimState, tid: int, a: dict) -> SysResult:
    option = a.get("option")
    if option == "seccomp":
        return _install_seccomp(state, tid, a.get("rules", {}))
    if option == "agent_init":
        from . import agent as agent_mod

        if state.agent is None:
            state.agent = agent_mod.AgentState()
        status = agent_mod.agent_init(
            state,
            tid,
            a.get("slist", agent_mod.DEFAULT_SLIST),
            a.get("ilist", {state.mem_inode}),
        )
        return ok() if status is agent_mod.InitStatus.OK else err("EBUSY")
    return ok()


def _sys_modify_ldt(state: SimState, tid: int, a: dict) -> SysResult:
    return ok()


def _sys_shmat(state: SimState, tid: int, a: dict) -> SysResult:
    obj = a["obj"]
    length = a["len"]
    addr = a.get("addr", 0)
    prot: Perms = a.get("prot", Perms(read=True, write=True))
    if length <= 0 or not _aligned(addr, length):
        return err("EINVAL")
    store = state.shm_objects.get(obj)
    if store is None:
        store = MemObject(bytearray(length))
        state.shm_objects[obj] = store
    elif len(store.data) < length:
        store.data.extend(bytes(length - len(store.data)))
    if addr == 0:
        addr = state.find_free(length)
    elif state.mappings_overlapping(addr, length):
        return err("EEXIST")
    state.add_mapping(
        Mapping(start=addr, length=length, perms=prot, share=Share.SHARED, store=store)
    )
    return ok(addr)


def _sys_shmdt(state: SimState, tid: int, a: dict) -> SysResult:
    m = state.mapping_at(a["addr"])
    if m is None or m.start != a["addr"] or m.share is not Share.SHARED:
        return err("EINVAL")
    state.remove_mapping(m)
    return ok()


def _sys_clone(state: SimState, tid: int, a: dict) -> SysResult:
    parent = state.thread(tid)
    new_tid = a.get("tid")
    child = state.add_thread(tid=new_tid, pkru=parent.pkru)
    child.seccomp = parent.seccomp
    # debug registers start empty: hardware breakpoints are per-thread state
    return ok(child.tid)


def _sys_execve(state: SimState, tid: int, a: dict) -> SysResult:
    state.mappings.clear()
    state.fds.clear()
    state.shm_objects.clear()
    state.agent = None
    state.allocated_keys = {0, state.trusted_key}
    state.xom_key = None
    for thr in list(state.threads.values()):
        if thr.tid != tid:
            thr.live = False
    caller = state.thread(tid)
    caller.regs = {r: 0 for r in caller.regs}
    caller.pkru = 0
    caller.zf = False
    for slot in caller.debug_regs:
        slot.enabled = False
        slot.addr = 0
    return ok()


def _sys_sigaltstack(state: SimState, tid: int, a: dict) -> SysResult:
    return ok()


def _sys_sigreturn(state: SimState, tid: int, a: dict) -> SysResult:
    # The saved frame is attacker-supplied data: the full context,
    # protection-key register included, is restored without any check.
    thr = state.thread(tid)
    for reg, value in a.get("regs", {}).items():
        if reg in thr.regs:
            thr.regs[reg] = value
    if "pkru" in a:
        old = thr.pkru
        thr.pkru = a["pkru"] & 0xFFFFFFFF
        log_pkru_write(state, tid, old, thr.pkru, "sigreturn")
    return ok()


def _sys_exit(state: SimState, tid: int, a: dict) -> SysResult:
    state.thread(tid).live = False
    return ok()


_HANDLERS = {
    "mmap": _sys_mmap,
    "munmap": _sys_munmap,
    "mremap": _sys_mremap,
    "mprotect": _sys_mprotect,
    "pkey_alloc": _sys_pkey_alloc,
    "pkey_free": _sys_pkey_free,
    "pkey_mprotect": _sys_pkey_mprotect,
    "open": _sys_open,
    "openat": _sys_open,
    "read": _sys_read,
    "write": _sys_write,
    "link": _sys_link,
    "symlink": _sys_link,
    "process_vm_readv": _sys_process_vm_readv,
    "process_vm_writev": _sys_process_vm_writev,
    "ptrace": _sys_ptrace,
    "seccomp": _sys_seccomp,
    "prctl": _sys_prctl,
    "modify_ldt": _sys_modify_ldt,
    "shmat": _sys_shmat,
    "shmdt": _sys_shmdt,
    "clone": _sys_clone,
    "fork": _sys_clone,
    "vfork": _sys_clone,
    "execve": _sys_execve,
    "sigaltstack": _sys_sigaltstack,
    "sigreturn": _sys_sigreturn,
    "exit": _sys_exit,
}

SYSCALL_NAMES = frozenset(_HANDLERS)
