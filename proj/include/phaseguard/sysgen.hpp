#pragma once

// System-call set generation: numbers at each syscall site, per-function
// reachable sets over the call graph, and the set reachable from a
// transition point.

#include <algorithm>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "phaseguard/fcg.hpp"
#include "phaseguard/image_index.hpp"
#include "phaseguard/syscall_table.hpp"
#include "phaseguard/tracer.hpp"
#include "phaseguard/vfa.hpp"

namespace phaseguard {

struct SyscallSet {
    std::set<std::uint32_t> numbers;
    std::map<std::uint32_t, std::set<std::uint64_t>> provenance;
    std::set<std::uint64_t> unresolved_sites;
    std::set<std::uint64_t> execve_sites;

    bool operator==(const SyscallSet&) const = default;

    void add(std::uint32_t nr, std::uint64_t site) {
        numbers.insert(nr);
        provenance[nr].insert(site);
    }
    void merge(const SyscallSet& o) {
        numbers.insert(o.numbers.begin(), o.numbers.end());
        for (const auto& [nr, sites] : o.provenance) provenance[nr].insert(sites.begin(), sites.end());
        unresolved_sites.insert(o.unresolved_sites.begin(), o.unresolved_sites.end());
        execve_sites.insert(o.execve_sites.begin(), o.execve_sites.end());
    }
    bool contains(std::uint32_t nr) const { return numbers.contains(nr); }
};

inline bool is_runtime_intrinsic(std::string_view s) {
    return s == intrinsic::kSyscall || s == intrinsic::kDlopen || s == intrinsic::kDlsym ||
           s == intrinsic::kExecve || s == intrinsic::kPthreadCreate || intrinsic::is_exit_like(s);
}

/// Numbers used at one syscall site: rax for the instruction, rdi for a
/// call to the `syscall` wrapper. Anything not fully resolved to in-range
/// integers marks the site unresolved; known values are still kept.
inline SyscallSet syscall_site_numbers(UseDefCache& cache, const Fcg& fcg, std::uint64_t site) {
    auto loc = cache.index().find(site);
    if (!loc) throw Error("sysgen", std::to_string(site), "no instruction at address");
    const Instruction& in = cache.index().at(*loc);
    Reg r = in.op == Op::Syscall ? Reg::rax : Reg::rdi;
    BackwardWalker walker(cache, fcg);
    auto vr = walker.resolve(loc->func, loc->block, loc->index, r);
    SyscallSet out;
    bool clean = vr.status == ResolutionStatus::Full;
    for (const auto& v : vr.values) {
        auto i = std::get_if<std::int64_t>(&v);
        if (i && *i >= 0 && *i <= static_cast<std::int64_t>(kMaxSyscall)) out.add(static_cast<std::uint32_t>(*i), site);
        else clean = false;
    }
    if (!clean) out.unresolved_sites.insert(site);
    return out;
}

inline bool is_syscall_site(const Instruction& in) {
    return in.op == Op::Syscall || (in.op == Op::CallPlt && in.text == intrinsic::kSyscall);
}

/// Syscalls issued directly by `f`, plus its execve callsites and calls to
/// symbols nothing provides (whose behaviour is unknown).
inline SyscallSet find_direct_syscalls(UseDefCache& cache, const Fcg& fcg, FuncRef f) {
    SyscallSet out;
    for (const auto& bb : cache.image().function(f).blocks)
        for (const auto& in : bb.instructions) {
            if (is_syscall_site(in)) out.merge(syscall_site_numbers(cache, fcg, in.address));
            if (in.op == Op::CallPlt && in.text == intrinsic::kExecve) out.execve_sites.insert(in.address);
        }
    for (const auto& x : fcg.externals)
        if (x.caller == f && !is_runtime_intrinsic(x.symbol)) out.unresolved_sites.insert(x.site);
    return out;
}

/// reachable(F) = direct(F) plus reachable(C) for every successor C, solved
/// per strongly connected component in reverse topological order.
inline std::map<FuncRef, SyscallSet> reachable_syscalls_per_function(const Fcg& fcg,
                                                                     const std::map<FuncRef, SyscallSet>& direct) {
    std::map<FuncRef, int> idx, low;
    std::map<FuncRef, bool> on_stack;
    std::vector<FuncRef> stack;
    std::vector<std::vector<FuncRef>> sccs;  // emitted in reverse topological order
    int counter = 0;

    std::function<void(FuncRef)> strong = [&](FuncRef v) {
        idx[v] = low[v] = counter++;
        stack.push_back(v);
        on_stack[v] = true;
        for (const auto& e : fcg.callees_of(v)) {
            FuncRef w = e.callee;
            if (!idx.contains(w)) {
                strong(w);
                low[v] = std::min(low[v], low[w]);
            } else if (on_stack[w]) {
                low[v] = std::min(low[v], idx[w]);
            }
        }
        if (low[v] == idx[v]) {
            std::vector<FuncRef> comp;
            FuncRef w;
            do {
                w = stack.back();
                stack.pop_back();
                on_stack[w] = false;
                comp.push_back(w);
            } while (w != v);
            sccs.push_back(std::move(comp));
        }
    };
    for (auto n : fcg.nodes)
        if (!idx.contains(n)) strong(n);

    std::map<FuncRef, SyscallSet> out;
    for (const auto& comp : sccs) {
        SyscallSet s;
        for (auto f : comp) {
            if (auto it = direct.find(f); it != direct.end()) s.merge(it->second);
            for (const auto& e : fcg.callees_of(f))
                if (auto it = out.find(e.callee); it != out.end()) s.merge(it->second);
        }
        for (auto f : comp) out[f] = s;
    }
    return out;
}

/// Greatest fixpoint: a function is noreturn when no CFG path from its entry
/// reaches a ret without first passing a call that cannot return (an exit-like
/// symbol, a noreturn callee, or a syscall that is exit/exit_group on every
/// resolution).
inline std::set<FuncRef> noreturn_analysis(UseDefCache& cache, const Fcg& fcg) {
    std::map<std::uint64_t, SyscallSet> site_numbers;
    auto terminal_syscall = [&](const Instruction& in) {
        auto it = site_numbers.find(in.address);
        if (it == site_numbers.end()) it = site_numbers.emplace(in.address, syscall_site_numbers(cache, fcg, in.address)).first;
        const auto& s = it->second;
        if (!s.unresolved_sites.empty() || s.numbers.empty()) return false;
        return std::all_of(s.numbers.begin(), s.numbers.end(), [](std::uint32_t n) { return n == 60 || n == 231; });
    };

    std::set<FuncRef> nr(fcg.nodes.begin(), fcg.nodes.end());
    auto stops = [&](const Instruction& in) {
        if (is_syscall_site(in)) return terminal_syscall(in);
        if (in.op == Op::CallPlt && intrinsic::is_exit_like(in.text)) return true;
        if (!in.is_call()) return false;
        const auto& es = fcg.edges_at(in.address);
        if (es.empty()) return false;
        return std::all_of(es.begin(), es.end(), [&](const CallEdge& e) { return nr.contains(e.callee); });
    };
    auto can_return = [&](FuncRef f) {
        const auto& fn = cache.image().function(f);
        std::vector<char> seen(fn.blocks.size(), 0);
        std::vector<std::uint32_t> work{fn.entry};
        seen[fn.entry] = 1;
        while (!work.empty()) {
            auto b = work.back();
            work.pop_back();
            bool blocked = false;
            for (const auto& in : fn.blocks[b].instructions) {
                if (stops(in)) {
                    blocked = true;
                    break;
                }
                if (in.op == Op::Ret) return true;
            }
            if (blocked) continue;
            for (auto s : fn.blocks[b].successors)
                if (!seen[s]) {
                    seen[s] = 1;
                    work.push_back(s);
                }
        }
        return false;
    };
    for (bool changed = true; changed;) {
        changed = false;
        for (auto it = nr.begin(); it != nr.end();) {
            if (can_return(*it)) {
                it = nr.erase(it);
                changed = true;
            } else {
                ++it;
            }
        }
    }
    return nr;
}

/// Start routines passed (rdx) to pthread_create anywhere in the graph.
/// An unresolved start routine would hide a whole thread, so it is an error.
inline std::set<FuncRef> thread_start_functions(UseDefCache& cache, const Fcg& fcg) {
    std::set<FuncRef> out;
    for (auto f : fcg.nodes)
        for (const auto& bb : cache.image().function(f).blocks)
            for (const auto& in : bb.instructions) {
                if (in.op != Op::CallPlt || in.text != intrinsic::kPthreadCreate) continue;
                auto vr = resolve_argument(cache, fcg, in.address, 2);
                bool ok = vr.status == ResolutionStatus::Full;
                for (const auto& v : vr.values)
                    if (!std::holds_alternative<FuncRef>(v)) ok = false;
                if (!ok)
                    throw Error("sysgen", cache.image().qualified_name(f) + "@" + std::to_string(in.address),
                                "thread start routine not resolved");
                auto fs = vr.functions();
                out.insert(fs.begin(), fs.end());
            }
    return out;
}

/// Everything the partition computation needs, computed once per graph.
struct SyscallContext {
    const ProgramImage* image = nullptr;
    const Fcg* fcg = nullptr;
    std::map<FuncRef, SyscallSet> direct;
    std::map<FuncRef, SyscallSet> reachable;
    std::map<std::uint64_t, SyscallSet> sites;  // per syscall site
    std::set<FuncRef> noreturns;
    std::set<FuncRef> thread_starts;
};

inline SyscallContext build_syscall_context(UseDefCache& cache, const Fcg& fcg) {
    SyscallContext ctx;
    ctx.image = &cache.image();
    ctx.fcg = &fcg;
    for (auto f : fcg.nodes) {
        ctx.direct[f] = find_direct_syscalls(cache, fcg, f);
        for (const auto& bb : cache.image().function(f).blocks)
            for (const auto& in : bb.instructions)
                if (is_syscall_site(in)) ctx.sites[in.address] = syscall_site_numbers(cache, fcg, in.address);
    }
    ctx.reachable = reachable_syscalls_per_function(fcg, ctx.direct);
    ctx.noreturns = noreturn_analysis(cache, fcg);
    ctx.thread_starts = thread_start_functions(cache, fcg);
    return ctx;
}

/// Syscalls reachable from the transition point: code after it in its
/// function, everything called from there, the code each caller runs after
/// the call returns (unless the function cannot return, is a thread start or
/// a loader root), and the fini functions.
inline SyscallSet partition_syscalls(const SyscallContext& ctx, FuncRef tp_func, std::uint64_t tp_addr) {
    const ProgramImage& image = *ctx.image;
    const Fcg& fcg = *ctx.fcg;
    ImageIndex index(image);
    SyscallSet sc;
    for (auto f : image.fini_functions)
        if (auto it = ctx.reachable.find(f); it != ctx.reachable.end()) sc.merge(it->second);

    std::set<FuncRef> stop(ctx.noreturns);
    stop.insert(ctx.thread_starts.begin(), ctx.thread_starts.end());
    for (auto r : image.roots()) stop.insert(r);

    auto loc0 = index.find(tp_addr);
    if (!loc0 || loc0->func != tp_func)
        throw Error("sysgen", image.qualified_name(tp_func) + "@" + std::to_string(tp_addr),
                    "transition point not found in function");

    auto visit_instruction = [&](const Instruction& in) {
        if (is_syscall_site(in)) {
            if (auto it = ctx.sites.find(in.address); it != ctx.sites.end()) sc.merge(it->second);
            return;
        }
        if (!in.is_call()) return;
        if (in.op == Op::CallPlt && in.text == intrinsic::kExecve) sc.execve_sites.insert(in.address);
        for (const auto& e : fcg.edges_at(in.address))
            if (auto it = ctx.reachable.find(e.callee); it != ctx.reachable.end()) sc.merge(it->second);
        for (const auto& x : fcg.externals)
            if (x.site == in.address && !is_runtime_intrinsic(x.symbol)) sc.unresolved_sites.insert(x.site);
    };

    // (address, function, scan includes the instruction at address)
    struct Item {
        std::uint64_t addr;
        FuncRef fun;
        bool inclusive;
        auto operator<=>(const Item&) const = default;
    };
    std::vector<Item> work{{tp_addr, tp_func, true}};
    std::set<Item> done;
    while (!work.empty()) {
        Item it = work.back();
        work.pop_back();
        if (!done.insert(it).second) continue;
        auto loc = index.find(it.addr);
        if (!loc) throw Error("sysgen", std::to_string(it.addr), "address not found");
        const auto& fn = image.function(it.fun);
        const auto& start = fn.blocks[loc->block];
        for (std::size_t i = loc->index + (it.inclusive ? 0 : 1); i < start.instructions.size(); ++i)
            visit_instruction(start.instructions[i]);
        // The start block is not marked visited: reaching it again runs all of it.
        std::vector<char> seen(fn.blocks.size(), 0);
        std::vector<std::uint32_t> blocks(start.successors.begin(), start.successors.end());
        for (auto b : blocks) seen[b] = 1;
        while (!blocks.empty()) {
            auto b = blocks.back();
            blocks.pop_back();
            for (const auto& in : fn.blocks[b].instructions) visit_instruction(in);
            for (auto s : fn.blocks[b].successors)
                if (!seen[s]) {
                    seen[s] = 1;
                    blocks.push_back(s);
                }
        }
        if (stop.contains(it.fun)) continue;
        for (const auto& e : fcg.callers_of(it.fun)) work.push_back({e.site, e.caller, false});
    }
    return sc;
}

/// Union of reachable sets over the given roots.
inline SyscallSet reachable_from(const SyscallContext& ctx, const std::vector<FuncRef>& roots) {
    SyscallSet out;
    for (auto r : roots)
        if (auto it = ctx.reachable.find(r); it != ctx.reachable.end()) out.merge(it->second);
    return out;
}

/// Syscalls at every site anywhere in the image, reachable or not.
inline SyscallSet whole_image_syscalls(UseDefCache& cache, const Fcg& fcg) {
    SyscallSet out;
    const auto& image = cache.image();
    for (std::uint32_t mi = 0; mi < image.modules.size(); ++mi)
        for (std::uint32_t fi = 0; fi < image.modules[mi].functions.size(); ++fi)
            for (const auto& bb : image.modules[mi].functions[fi].blocks)
                for (const auto& in : bb.instructions)
                    if (is_syscall_site(in)) out.merge(syscall_site_numbers(cache, fcg, in.address));
    return out;
}

/// Every number in the table, attributed to `site`.
inline SyscallSet all_syscalls(std::uint64_t site) {
    SyscallSet out;
    for (std::uint32_t n = 0; n <= kMaxSyscall; ++n) out.add(n, site);
    return out;
}

// ---------------------------------------------------------------------------
// execve composition

enum class ExecveMode : std::uint8_t { UnionPropagate, ReduceOnExec };

inline std::string_view execve_mode_name(ExecveMode m) {
    return m == ExecveMode::UnionPropagate ? "union" : "reduce";
}

struct ExecvePolicy {
    ExecveMode mode = ExecveMode::UnionPropagate;
    std::map<std::uint64_t, std::set<std::string>> targets;  // callsite -> program paths
};

struct ExecTarget {
    std::string path;
    std::set<std::uint32_t> needed;   // whole-program set of the target
    std::set<std::uint32_t> reduced;  // filter installed at exec (reduce mode)
    bool operator==(const ExecTarget&) const = default;
};

struct ComposedSet {
    std::set<std::uint32_t> base;
    std::set<std::uint32_t> final_set;
    std::vector<ExecTarget> exec_filters;
    bool operator==(const ComposedSet&) const = default;
};

/// Union mode adds each target's needs to the filter. Reduce mode also
/// starts from the extended set (filters survive exec) and attaches a
/// narrower filter per target, its needs intersected with that set.
inline ComposedSet compose_execve(ExecveMode mode, const std::set<std::uint32_t>& base,
                                  const std::map<std::string, std::set<std::uint32_t>>& target_needs) {
    ComposedSet out;
    out.base = base;
    out.final_set = base;
    for (const auto& [path, need] : target_needs) out.final_set.insert(need.begin(), need.end());
    if (mode == ExecveMode::ReduceOnExec)
        for (const auto& [path, need] : target_needs) {
            ExecTarget t{path, need, {}};
            std::set_intersection(need.begin(), need.end(), out.final_set.begin(), out.final_set.end(),
                                  std::inserter(t.reduced, t.reduced.end()));
            out.exec_filters.push_back(std::move(t));
        }
    else
        for (const auto& [path, need] : target_needs) out.exec_filters.push_back({path, need, {}});
    return out;
}

inline nlohmann::json syscall_set_json(const SyscallSet& s) {
    using nlohmann::json;
    json prov = json::object();
    for (const auto& [nr, sites] : s.provenance) prov[std::to_string(nr)] = sites;
    return {{"numbers", s.numbers}, {"provenance", prov}, {"unresolved_sites", s.unresolved_sites},
            {"execve_sites", s.execve_sites}};
}

}  // namespace phaseguard
