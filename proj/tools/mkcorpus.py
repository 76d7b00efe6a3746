#!/usr/bin/env python3
"""Generates the PMIR fixture corpus (toy servers, libraries, scenarios,
configs and hand-derived labels) under corpus/.

Usage: tools/mkcorpus.py [output-dir]
"""

import json
import os
import sys

INSTR_STEP = 4


class Block:
    def __init__(self, label):
        self.label = label
        self.ins = []
        self.fall = None

    def _add(self, op, **kw):
        d = {"op": op}
        d.update(kw)
        self.ins.append(d)
        return self

    def const(self, dst, imm): return self._add("const", dst=dst, imm=imm)
    def mov(self, dst, src): return self._add("move", dst=dst, src=src)
    def take(self, dst, func): return self._add("take_addr", dst=dst, func=func)
    def take_data(self, dst, obj): return self._add("take_addr_data", dst=dst, object=obj)
    def str(self, dst, s): return self._add("str_const", dst=dst, str=s)
    def load(self, dst): return self._add("load", dst=dst)
    def store(self, src): return self._add("store", src=src)
    def arith(self, dst, src): return self._add("arith", dst=dst, src=src)
    def cmp(self, a, b): return self._add("cmp", a=a, b=b)
    def call(self, func): return self._add("call_direct", func=func)
    def plt(self, sym): return self._add("call_plt", symbol=sym)
    def icall(self, reg): return self._add("call_indirect", reg=reg)
    def jmp(self, target): return self._add("jump", target=target)
    def br(self, taken, not_taken): return self._add("cond_jump", taken=taken, not_taken=not_taken)
    def syscall(self): return self._add("syscall")
    def ret(self): return self._add("ret")

    def successors(self, next_label):
        last = self.ins[-1]
        if last["op"] == "ret":
            return []
        if last["op"] == "jump":
            return [last["target"]]
        if last["op"] == "cond_jump":
            return [last["taken"], last["not_taken"]]
        nxt = self.fall or next_label
        if nxt is None:
            raise ValueError("block %s falls off the function" % self.label)
        return [nxt]


class Func:
    def __init__(self, fid):
        self.fid = fid
        self.blocks = []

    def block(self, label):
        b = Block(label)
        self.blocks.append(b)
        return b


class Module:
    def __init__(self, name, kind, base):
        self.name = name
        self.kind = kind
        self.base = base
        self.funcs = []
        self.exports = {}
        self.objects = []

    def func(self, fid, export=False):
        f = Func(fid)
        self.funcs.append(f)
        if export:
            self.exports[fid if export is True else export] = fid
        return f

    def obj(self, oid, members, symbol=None):
        o = {"id": oid, "members": members}
        if symbol:
            o["symbol"] = symbol
        self.objects.append(o)

    def to_json(self):
        addr = self.base
        funcs = []
        self.addr_of = {}
        for f in self.funcs:
            addr = (addr + 0xff) & ~0xff
            blocks = []
            faddr = addr
            for i, b in enumerate(f.blocks):
                nxt = f.blocks[i + 1].label if i + 1 < len(f.blocks) else None
                ins = []
                baddr = addr
                for d in b.ins:
                    e = {"addr": addr}
                    e.update(d)
                    ins.append(e)
                    addr += INSTR_STEP
                self.addr_of[(f.fid, b.label)] = baddr
                blocks.append({"id": b.label, "address": baddr, "successors": b.successors(nxt),
                               "instructions": ins})
            funcs.append({"id": f.fid, "name": f.fid, "address": faddr, "entry": f.blocks[0].label,
                          "blocks": blocks})
            self.addr_of[f.fid] = faddr
        body = {"name": self.name, "kind": self.kind, "functions": funcs, "exports": self.exports}
        if self.objects:
            body["data_objects"] = self.objects
        return body


def write(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# libc

LIBC_WRAPPERS = [
    ("read", 0), ("write", 1), ("open", 2), ("close", 3), ("fstat", 5), ("poll", 7), ("lseek", 8),
    ("mmap", 9), ("mprotect", 10), ("munmap", 11), ("brk", 12), ("pread64", 17), ("select", 23),
    ("nanosleep", 35), ("getpid", 39), ("socket", 41), ("connect", 42), ("accept", 43),
    ("sendto", 44), ("recvfrom", 45), ("bind", 49), ("listen", 50), ("setsockopt", 54),
    ("clone", 56), ("fork", 57), ("fsync", 74), ("chmod", 90), ("ptrace", 101), ("getuid", 102),
    ("setuid", 105), ("setgid", 106), ("setreuid", 113), ("epoll_wait", 232), ("openat", 257),
    ("fchmodat", 268), ("accept4", 288), ("epoll_create1", 291), ("execveat", 322),
]


def make_libc():
    m = Module("libc.so.6", "shared-library", 0x7f000000)
    for name, nr in LIBC_WRAPPERS:
        m.func(name, export=True).block("b0").const("rax", nr).syscall().ret()
    m.func("exit", export=True).block("b0").const("rax", 231).syscall().ret()
    m.func("_exit", export=True).block("b0").const("rax", 231).syscall().ret()
    m.func("abort", export=True).block("b0").const("rax", 200).syscall().const("rax", 231).syscall().ret()
    m.func("pthread_create", export=True).block("b0").const("rax", 56).syscall().ret()
    m.func("dlopen", export=True).block("b0").const("rax", 257).syscall().const("rax", 9).syscall() \
        .const("rax", 3).syscall().ret()
    m.func("dlsym", export=True).block("b0").ret()
    m.func("execve", export=True).block("b0").const("rax", 59).syscall().ret()
    # lib_apply(fn, arg): calls fn(arg)
    m.func("lib_apply", export=True).block("b0").mov("rax", "rdi").mov("rdi", "rsi").icall("rax").ret()
    # log_line(): writes through an internal call
    m.func("log_line", export=True).block("b0").call("write").ret()
    return m


# ---------------------------------------------------------------------------
# runtime-loaded libraries

def make_dl_libs():
    libs = []
    m = Module("libmod_static.so", "shared-library", 0x20000000)
    m.func("mod_static_handle", export=True).block("b0").mov("rsi", "rdi").plt("recvfrom").plt("sendto").ret()
    libs.append(m)

    m = Module("libmod_cfg.so", "shared-library", 0x21000000)
    m.func("cfg_entry", export=True).block("b0").mov("rsi", "rdi").plt("fstat").plt("pread64").ret()
    libs.append(m)

    m = Module("libdlz_file.so", "shared-library", 0x22000000)
    m.func("dlz_create", export=True).block("b0").mov("rsi", "rdi").plt("lseek").plt("read").ret()
    libs.append(m)

    m = Module("libdlz_ldap.so", "shared-library", 0x23000000)
    m.func("dlz_create", export=True).block("b0").mov("rsi", "rdi").plt("socket").plt("connect").ret()
    libs.append(m)

    m = Module("libunrelated.so", "shared-library", 0x24000000)
    m.func("other_entry", export=True).block("b0").plt("ptrace").ret()
    libs.append(m)
    return libs


# ---------------------------------------------------------------------------
# servers

def exe(name):
    return Module(name, "executable", 0x400000)


def srv_basic():
    m = exe("srv_basic")
    f = m.func("main")
    f.block("entry").plt("socket").plt("bind").plt("listen")
    f.block("loop").call("handler").cmp("rax", "rbx").br("loop", "done")
    f.block("done").plt("close").const("rax", 0).ret()
    h = m.func("handler")
    h.block("b0").const("rdi", 4).plt("read").plt("write").plt("sendto").ret()
    fi = m.func("fini_exit")
    fi.block("b0").const("rax", 231).syscall().ret()
    prog = {"main": "main", "fini": ["fini_exit"]}
    labels = {
        "transition_points": [{"function": "main", "block": "loop"}],
        "partitions": {"main": [0, 1, 44, 3, 231]},
        "exact": True,
        "strict_monotonic": True,
        "sensitive": {"bind": "main-loop", "listen": "main-loop", "socket": "main-loop",
                      "ptrace": "main", "execve": "main", "fork": "main", "clone": "main",
                      "recvfrom": "main", "execveat": "main"},
    }
    return m, prog, [], labels, {}


def srv_indirect():
    m = exe("srv_indirect")
    f = m.func("main")
    f.block("entry").plt("socket").plt("bind").plt("listen") \
        .take("rbx", "on_request").take("r12", "cmp_marker").take("rax", "h_wide").store("rax")
    f.block("loop").const("rdi", 7).icall("rbx")
    f.block("l2").call("pick_handler").mov("r13", "rax").const("rdi", 7).icall("r13")
    f.block("l3").cmp("r12", "rbx").take("rdi", "on_tick").const("rsi", 1).plt("lib_apply").br("loop", "done")
    f.block("done").plt("close").ret()
    p = m.func("pick_handler")
    p.block("b0").br("a", "b")
    p.block("a").take("rax", "h_read").ret()
    p.block("b").take("rax", "h_write").ret()
    m.func("on_request").block("b0").mov("rsi", "rdi").plt("read").plt("write").ret()
    m.func("on_tick").block("b0").plt("getpid").ret()
    m.func("cmp_marker").block("b0").plt("setuid").ret()
    m.func("h_read").block("b0").mov("rsi", "rdi").plt("read").ret()
    m.func("h_write").block("b0").mov("rsi", "rdi").plt("write").ret()
    m.func("h_wide").block("b0").mov("rax", "rdx").plt("ptrace").ret()
    prog = {"main": "main"}
    labels = {
        "transition_points": [{"function": "main", "block": "loop"}],
        "partitions": {"main": [0, 1, 3, 39]},
        "exact": True,
        "edge_reduction": True,
        "at_eliminated": ["on_request", "cmp_marker", "on_tick"],
    }
    return m, prog, [], labels, {}


def srv_threads():
    m = exe("srv_threads")
    f = m.func("main")
    f.block("entry").plt("socket").plt("bind").plt("listen") \
        .take("rdx", "worker_a").call("spawn").take("rdx", "worker_b").call("spawn")
    f.block("loop").plt("accept").plt("write").br("loop", "done")
    f.block("done").plt("close").ret()
    s = m.func("spawn")
    s.block("b0").const("rdi", 0).const("rsi", 0).const("rcx", 9).plt("pthread_create").ret()
    a = m.func("worker_a")
    a.block("entry").plt("epoll_create1")
    a.block("wl").plt("epoll_wait").plt("read").br("wl", "wd")
    a.block("wd").ret()
    b = m.func("worker_b")
    b.block("entry").plt("getuid")
    b.block("wl").plt("nanosleep").plt("write").br("wl", "wd")
    b.block("wd").ret()
    prog = {"main": "main"}
    labels = {
        "transition_points": [{"function": "main", "block": "loop"},
                              {"function": "worker_a", "block": "wl"},
                              {"function": "worker_b", "block": "wl"}],
        "partitions": {"main": [43, 1, 3], "worker_a": [232, 0], "worker_b": [35, 1]},
        "exact": True,
        "thread_starts": ["worker_a", "worker_b"],
    }
    return m, prog, [], labels, {}


def dl_server(name, open_arg, sym_arg):
    """open_arg / sym_arg: a string constant, or None for a value read from memory."""
    m = exe(name)
    f = m.func("main")
    b = f.block("entry").plt("socket").plt("bind").plt("listen")
    if open_arg is None:
        b.take_data("rsi", "config").load("rdi")
    else:
        b.str("rdi", open_arg)
    b.const("rsi", 2).plt("dlopen").mov("rbx", "rax").mov("rdi", "rbx")
    if sym_arg is None:
        b.take_data("rdx", "config").load("rsi")
    else:
        b.str("rsi", sym_arg)
    b.plt("dlsym").mov("r12", "rax")
    f.block("loop").const("rdi", 4).icall("r12").br("loop", "done")
    f.block("done").plt("close").ret()
    m.obj("config", [], symbol="server_config")
    return m


def srv_dl_static():
    m = dl_server("srv_dl_static", "libmod_static.so", "mod_static_handle")
    labels = {
        "transition_points": [{"function": "main", "block": "loop"}],
        "partitions": {"main": [3, 44, 45]},
        "exact": True,
        "dl": {"category": "hardcoded", "dlopen": "full", "dlsym": "full", "observed": True,
               "libraries": ["libmod_static.so"], "heuristic": [], "growth": [44, 45]},
    }
    return m, {"main": "main"}, [], labels, {}


def srv_dl_config():
    m = dl_server("srv_dl_config", None, None)
    labels = {
        "transition_points": [{"function": "main", "block": "loop"}],
        "partitions": {"main": [3, 5, 17]},
        "exact": True,
        "dl": {"category": "config-read", "dlopen": "unresolved", "dlsym": "unresolved", "observed": True,
               "libraries": ["libmod_cfg.so"], "heuristic": [], "growth": [5, 17]},
    }
    return m, {"main": "main"}, [], labels, {"open": "libmod_cfg.so", "sym": "cfg_entry"}


def srv_dl_heur():
    m = dl_server("srv_dl_heur", None, "dlz_create")
    labels = {
        "transition_points": [{"function": "main", "block": "loop"}],
        "partitions": {"main": [0, 3, 8, 41, 42]},
        "exact": False,
        "dl": {"category": "dlsym-resolved", "dlopen": "unresolved", "dlsym": "full", "observed": True,
               "libraries": ["libdlz_file.so", "libdlz_ldap.so"],
               "heuristic": ["libdlz_file.so", "libdlz_ldap.so"], "growth": [0, 8, 41, 42]},
    }
    return m, {"main": "main"}, [], labels, {"open": "libdlz_file.so"}


def srv_execve():
    m = exe("srv_execve")
    f = m.func("main")
    f.block("entry").plt("socket").plt("bind").plt("listen")
    f.block("loop").plt("read").br("cont", "run_exec")
    f.block("cont").plt("write").jmp("loop")
    f.block("run_exec").str("rdi", "helper").const("rsi", 0).plt("execve").jmp("done")
    f.block("done").plt("close").ret()
    labels = {
        "transition_points": [{"function": "main", "block": "loop"}],
        "partitions": {"main": [0, 1, 3, 59]},
        "exec": {"helper": [1, 12, 231]},
        "final_union": [0, 1, 3, 12, 59, 231],
        "exact": True,
    }
    return m, {"main": "main"}, [], labels, {}


def helper_image():
    m = exe("helper")
    f = m.func("main")
    f.block("b0").const("rax", 12).syscall().const("rdi", 1).const("rax", 1).syscall().br("again", "out")
    f.block("again").const("rax", 1).syscall()
    f.block("out").const("rax", 231).syscall().ret()
    return m


def srv_nested():
    m = exe("srv_nested")
    f = m.func("main")
    f.block("entry").plt("socket").call("warmup").call("serve").plt("chmod").ret()
    w = m.func("warmup")
    w.block("entry").const("rcx", 3)
    w.block("wl").plt("getpid").br("wl", "wd")
    w.block("wd").ret()
    s = m.func("serve")
    s.block("entry").plt("bind").plt("listen")
    s.block("outer").plt("accept")
    s.block("inner").plt("read").br("inner", "after_inner")
    s.block("after_inner").plt("write").br("outer", "out")
    s.block("out").plt("close").ret()
    labels = {
        "transition_points": [{"function": "serve", "block": "outer"}],
        "partitions": {"main": [43, 0, 1, 3, 90]},
        "exact": True,
        "strict_monotonic": True,
    }
    return m, {"main": "main"}, [], labels, {"main_decisions": [True, True, False]}


def srv_noreturn():
    m = exe("srv_noreturn")
    f = m.func("main")
    f.block("entry").plt("socket").plt("bind").call("run_forever").plt("chmod").ret()
    r = m.func("run_forever")
    r.block("entry").plt("listen")
    r.block("loop").plt("accept").plt("write").br("loop", "quit")
    r.block("quit").const("rdi", 0).plt("exit").jmp("loop")
    m.func("fini_flush").block("b0").plt("fsync").ret()
    labels = {
        "transition_points": [{"function": "run_forever", "block": "loop"}],
        "partitions": {"main": [43, 1, 231, 74]},
        "exact": True,
        "noreturn": ["run_forever"],
    }
    return m, {"main": "main", "fini": ["fini_flush"]}, [], labels, {}


def srv_preheader():
    m = exe("srv_preheader")
    f = m.func("main")
    f.block("entry").plt("socket").plt("bind").plt("listen").call("serve_loop").plt("close").ret()
    s = m.func("serve_loop")
    s.block("head").plt("accept").plt("read").br("head", "done")
    s.block("done").ret()
    labels = {
        "transition_points": [{"function": "serve_loop", "block": "head"}],
        "partitions": {"main": [43, 0, 3]},
        "exact": True,
        "preheader": True,
    }
    return m, {"main": "main"}, [], labels, {}


def srv_wrapper():
    m = exe("srv_wrapper")
    f = m.func("main")
    f.block("entry").plt("socket").br("pa", "pb")
    f.block("pa").const("rdi", 49).call("do_sys").jmp("loop")
    f.block("pb").const("rdi", 50).call("do_sys").jmp("loop")
    f.block("loop").const("rdi", 0).call("do_sys").br("d1", "d2")
    f.block("d1").const("rbx", 0).jmp("dj")
    f.block("d2").const("rbx", 2).jmp("dj")
    f.block("dj").mov("rax", "rbx").syscall().br("loop", "done")
    f.block("done").const("rdi", 3).call("do_sys").ret()
    m.func("do_sys").block("b0").plt("syscall").ret()
    labels = {
        "transition_points": [{"function": "main", "block": "loop"}],
        "partitions": {"main": [0, 2, 3, 49, 50]},
        "exact": False,
        "preheader": True,
    }
    return m, {"main": "main"}, [], labels, {}


def srv_initfini():
    m = exe("srv_initfini")
    m.func("pre_setup").block("b0").plt("getuid").ret()
    m.func("init_table").block("b0").take_data("rax", "ops_table").store("rax").ret()
    f = m.func("main")
    f.block("entry").plt("socket").plt("bind").plt("listen")
    f.block("loop").const("rdi", 1).call("get_op").mov("r12", "rax").const("rdi", 1).icall("r12") \
        .br("loop", "done")
    f.block("done").plt("close").ret()
    g = m.func("get_op")
    g.block("b0").br("a", "b")
    g.block("a").take("rax", "op_ping").ret()
    g.block("b").take("rax", "op_stat").ret()
    m.func("op_ping").block("b0").mov("rsi", "rdi").plt("sendto").ret()
    m.func("op_stat").block("b0").mov("rsi", "rdi").plt("fstat").ret()
    m.func("op_dead").block("b0").mov("rsi", "rdi").plt("ptrace").ret()
    m.func("fini_a").block("b0").plt("write").ret()
    m.func("fini_b").block("b0").plt("fsync").ret()
    m.obj("ops_table", ["op_ping", "op_stat"], symbol="ops")
    m.obj("dead_table", ["op_dead"], symbol="dead_ops")
    prog = {"main": "main", "preinit": ["pre_setup"], "init": ["init_table"], "fini": ["fini_a", "fini_b"]}
    labels = {
        "transition_points": [{"function": "main", "block": "loop"}],
        "partitions": {"main": [44, 5, 3, 1, 74]},
        "exact": True,
        "not_at": ["op_dead"],
    }
    return m, prog, [], labels, {}


def bad_unresolved():
    m = exe("bad_unresolved")
    f = m.func("main")
    f.block("entry").plt("socket")
    f.block("loop").take_data("rsi", "numbers").load("rax").syscall().br("loop", "done")
    f.block("done").ret()
    m.obj("numbers", [])
    return m, {"main": "main"}, [], {}, {}


SERVERS = [srv_basic, srv_indirect, srv_threads, srv_dl_static, srv_dl_config, srv_dl_heur,
           srv_execve, srv_nested, srv_noreturn, srv_preheader, srv_wrapper, srv_initfini]


def scenario_for(mod, extras):
    sc = {"budget": 10000, "default": {"decisions": [], "default_taken": True}, "threads": {}, "stub_args": {}}
    if "main_decisions" in extras:
        sc["threads"]["0"] = {"decisions": extras["main_decisions"], "default_taken": True}
    sites = {}
    for f in mod.funcs:
        for b in f.blocks:
            for i, d in enumerate(b.ins):
                if d["op"] == "call_plt" and d["symbol"] in ("dlopen", "dlsym"):
                    sites[d["symbol"]] = mod.addr_of[(f.fid, b.label)] + i * INSTR_STEP
    if "open" in extras:
        sc["stub_args"][str(sites["dlopen"])] = extras["open"]
    if "sym" in extras:
        sc["stub_args"][str(sites["dlsym"])] = extras["sym"]
    return {"scenarios": [sc]}


def main():
    out = sys.argv[1] if len(sys.argv) > 1 else os.path.join(os.path.dirname(__file__), "..", "corpus")
    os.makedirs(out, exist_ok=True)
    libc = make_libc()
    write(os.path.join(out, "libc.pmir.json"), {"pmir_version": 1, "module": libc.to_json()})
    for lib in make_dl_libs():
        write(os.path.join(out, lib.name.split(".so")[0] + ".pmir.json"), {"pmir_version": 1, "module": lib.to_json()})
    helper = helper_image()
    write(os.path.join(out, "helper.pmir.json"),
          {"pmir_version": 1, "module": helper.to_json(), "program": {"main": "main"}})

    all_labels = {}
    for gen in SERVERS + [bad_unresolved]:
        mod, prog, _, labels, extras = gen()
        name = mod.name
        body = mod.to_json()
        write(os.path.join(out, name + ".pmir.json"), {"pmir_version": 1, "module": body, "program": prog})
        write(os.path.join(out, name + ".scenario.json"), scenario_for(mod, extras))
        cfg = {"images": [name + ".pmir.json", "libc.pmir.json"], "scenario": name + ".scenario.json",
               "corpus": ".", "unresolved": "error", "deny": "kill-thread", "execve_mode": "union"}
        write(os.path.join(out, name + ".config.json"), cfg)
        if name == "srv_execve":
            cfg = dict(cfg, execve_mode="reduce")
            write(os.path.join(out, name + ".reduce.config.json"), cfg)
        if labels:
            for tp in labels["transition_points"]:
                tp["address"] = mod.addr_of[(tp["function"], tp["block"])]
            labels["config"] = name + ".config.json"
            all_labels[name] = labels
    write(os.path.join(out, "labels.json"), {"servers": all_labels})
    write(os.path.join(out, "payloads.json"), {"payloads": [
        {"name": "exec-shell", "syscalls": ["execve"]},
        {"name": "select-wait", "syscalls": ["select"]},
        {"name": "bind-shell", "syscalls": ["socket", "bind", "listen", "accept", "dup2", "execve"]},
        {"name": "empty", "syscalls": []},
    ]})


if __name__ == "__main__":
    main()
