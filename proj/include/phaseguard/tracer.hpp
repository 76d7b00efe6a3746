#pragma once

// Deterministic PMIR interpreter. Threads are scheduled round-robin one
// instruction at a time; the global instruction counter is the clock. The
// interpreter records, per thread, every executed address with its time,
// the dynamic call edges, and events (syscalls, dl*, execve, spawns, filter
// activity, traps).

#include <deque>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "phaseguard/bpf.hpp"
#include "phaseguard/cfg_loops.hpp"
#include "phaseguard/image_index.hpp"
#include "phaseguard/pmir.hpp"

namespace phaseguard {

struct BranchScript {
    std::vector<bool> decisions;
    bool default_taken = false;
    bool operator==(const BranchScript&) const = default;
};

struct Scenario {
    /// Per-thread scripts keyed by thread id (creation order, main = 0);
    /// threads without an entry use `default_script`.
    std::map<std::uint32_t, BranchScript> threads;
    BranchScript default_script;
    std::uint64_t budget = 10000;
    /// What a dlopen/dlsym/execve stub sees as its argument at a callsite
    /// when the argument register does not hold a string.
    std::map<std::uint64_t, std::string> stub_args;

    bool operator==(const Scenario&) const = default;
};

enum class EventKind { Syscall, Dlopen, Dlsym, Execve, ThreadSpawn, FilterInstall, FilterKill, FilterErrno, Trap };

inline std::string_view event_kind_name(EventKind k) {
    switch (k) {
    case EventKind::Syscall: return "syscall";
    case EventKind::Dlopen: return "dlopen";
    case EventKind::Dlsym: return "dlsym";
    case EventKind::Execve: return "execve";
    case EventKind::ThreadSpawn: return "thread_spawn";
    case EventKind::FilterInstall: return "filter_install";
    case EventKind::FilterKill: return "filter_kill";
    case EventKind::FilterErrno: return "filter_errno";
    case EventKind::Trap: return "trap";
    }
    return "?";
}

struct TraceEvent {
    std::uint64_t time = 0;
    std::uint64_t address = 0;
    EventKind kind = EventKind::Syscall;
    std::int64_t number = 0;   // syscall nr, partition id, spawned thread id
    std::string text;          // dl*/execve argument, spawned function, trap reason
    bool operator==(const TraceEvent&) const = default;
};

struct ThreadTrace {
    std::uint32_t id = 0;
    std::uint64_t root = 0;  // address of the function the thread started in
    std::vector<std::uint64_t> addresses;
    std::vector<std::uint64_t> times;
    std::vector<TraceEvent> events;
    std::set<std::pair<std::uint64_t, std::uint64_t>> call_edges;  // (callsite, callee function address)
    std::string end_reason;
    bool operator==(const ThreadTrace&) const = default;
};

struct TraceLog {
    std::vector<ThreadTrace> threads;
    bool truncated = false;
    bool operator==(const TraceLog&) const = default;
};

struct TracerOptions {
    /// Libraries dlopen may bring in when they are not part of the image.
    std::vector<ModuleUnit> loadable;
};

namespace detail {

struct Unknown {
    bool operator==(const Unknown&) const = default;
};
using Value = std::variant<Unknown, std::int64_t, FuncRef, DataRef, std::string>;

enum class Effect { None, Dlopen, Dlsym, PthreadCreate, Execve };

struct Frame {
    FuncRef func{};
    std::uint32_t block = 0;
    std::uint32_t index = 0;
    std::array<Value, kRegCount> saved{};  // callee-saved registers at entry
    Effect effect = Effect::None;          // applied when this frame returns
    std::string effect_arg;
    Value effect_value{};
    Value effect_value2{};
    std::uint64_t effect_site = 0;
};

struct ThreadState {
    std::uint32_t id = 0;
    std::array<Value, kRegCount> regs{};
    std::vector<Frame> stack;
    std::deque<FuncRef> roots;
    BranchScript script;
    std::size_t script_pos = 0;
    std::vector<const bpf::Program*> filters;
    bool alive = true;
};

inline bool is_callee_saved(Reg r) { return !is_caller_saved(r); }

class Machine {
public:
    Machine(const ProgramImage& image, const Scenario& scenario, const TracerOptions& options)
        : image_(image), scenario_(scenario), options_(options), link_modules_(image.modules.size()) {}

    TraceLog run() {
        ThreadState main;
        main.id = 0;
        for (auto r : image_.preinit_functions) main.roots.push_back(r);
        for (auto r : image_.init_functions) main.roots.push_back(r);
        main.roots.push_back(image_.main_function);
        for (auto r : image_.fini_functions) main.roots.push_back(r);
        main.script = script_for(0);
        log_.threads.push_back(ThreadTrace{0, image_.function(image_.main_function).address, {}, {}, {}, {}, {}});
        threads_.push_back(std::move(main));
        start_next_root(threads_[0]);

        std::size_t cursor = 0;
        while (!process_done_) {
            if (clock_ >= scenario_.budget) {
                log_.truncated = true;
                for (std::size_t i = 0; i < threads_.size(); ++i)
                    if (threads_[i].alive) finish(i, "budget");
                break;
            }
            // Round-robin: first live thread at or after the cursor.
            std::size_t n = threads_.size();
            std::optional<std::size_t> pick;
            for (std::size_t k = 0; k < n; ++k) {
                std::size_t i = (cursor + k) % n;
                if (threads_[i].alive) {
                    pick = i;
                    break;
                }
            }
            if (!pick) break;
            // Filter installation takes no tick and does not yield.
            while (!step(*pick) && threads_[*pick].alive && !process_done_) {
            }
            cursor = *pick + 1;
        }
        return std::move(log_);
    }

private:
    BranchScript script_for(std::uint32_t id) const {
        auto it = scenario_.threads.find(id);
        return it == scenario_.threads.end() ? scenario_.default_script : it->second;
    }

    const FunctionDef& fn(FuncRef r) const { return image_.function(r); }

    void finish(std::size_t t, const std::string& reason) {
        threads_[t].alive = false;
        threads_[t].stack.clear();
        if (log_.threads[t].end_reason.empty()) log_.threads[t].end_reason = reason;
    }

    void end_process(const std::string& reason) {
        for (std::size_t i = 0; i < threads_.size(); ++i)
            if (threads_[i].alive) finish(i, reason);
        process_done_ = true;
    }

    void event(std::size_t t, std::uint64_t addr, EventKind kind, std::int64_t number = 0, std::string text = {}) {
        log_.threads[t].events.push_back(TraceEvent{clock_, addr, kind, number, std::move(text)});
    }

    void trap(std::size_t t, std::uint64_t addr, const std::string& why) {
        event(t, addr, EventKind::Trap, 0, why);
        finish(t, "trap");
    }

    void push_frame(ThreadState& th, FuncRef f) {
        Frame fr;
        fr.func = f;
        fr.block = fn(f).entry;
        fr.index = 0;
        for (std::size_t r = 0; r < kRegCount; ++r)
            if (is_callee_saved(static_cast<Reg>(r))) fr.saved[r] = th.regs[r];
        th.stack.push_back(std::move(fr));
    }

    /// Starts the next queued root function, or ends the thread.
    void start_next_root(ThreadState& th) {
        if (th.roots.empty()) {
            auto idx = static_cast<std::size_t>(&th - threads_.data());
            if (th.id == 0) end_process("exit");
            else finish(idx, "returned");
            return;
        }
        FuncRef f = th.roots.front();
        th.roots.pop_front();
        push_frame(th, f);
    }

    void advance(ThreadState& th) {
        Frame& fr = th.stack.back();
        const auto& bb = fn(fr.func).blocks[fr.block];
        if (fr.index + 1 < bb.instructions.size()) {
            ++fr.index;
        } else {
            fr.block = bb.successors.at(0);
            fr.index = 0;
        }
    }

    void goto_block(ThreadState& th, std::uint32_t b) {
        th.stack.back().block = b;
        th.stack.back().index = 0;
    }

    bool next_decision(ThreadState& th) {
        if (th.script_pos < th.script.decisions.size()) return th.script.decisions[th.script_pos++];
        return th.script.default_taken;
    }

    std::string string_arg(const Value& v, std::uint64_t site) const {
        if (auto s = std::get_if<std::string>(&v)) return *s;
        auto it = scenario_.stub_args.find(site);
        return it == scenario_.stub_args.end() ? std::string() : it->second;
    }

    void do_syscall(std::size_t t, std::uint64_t addr, std::int64_t nr) {
        auto& th = threads_[t];
        if (!th.filters.empty()) {
            bpf::SeccompData data;
            data.nr = static_cast<std::uint32_t>(nr);
            data.instruction_pointer = addr;
            std::uint32_t ret = bpf::kRetAllow;
            for (auto it = th.filters.rbegin(); it != th.filters.rend(); ++it)
                ret = bpf::most_restrictive(ret, bpf::run(**it, data));
            switch (bpf::classify(ret)) {
            case bpf::Action::Allow: break;
            case bpf::Action::Errno:
                event(t, addr, EventKind::FilterErrno, nr);
                th.regs[reg_index(Reg::rax)] = -static_cast<std::int64_t>(ret & 0xffff);
                advance(th);
                return;
            case bpf::Action::KillProcess:
                event(t, addr, EventKind::FilterKill, nr);
                end_process("filter_kill");
                return;
            default:
                event(t, addr, EventKind::FilterKill, nr);
                finish(t, "filter_kill");
                return;
            }
        }
        event(t, addr, EventKind::Syscall, nr);
        if (nr == 60) {  // exit: this thread only
            finish(t, "exit");
            return;
        }
        if (nr == 231) {  // exit_group
            end_process("exit_group");
            return;
        }
        if (nr == 59) {  // execve replaces the process image
            end_process("execve");
            return;
        }
        th.regs[reg_index(Reg::rax)] = std::int64_t{0};
        advance(th);
    }

    std::optional<FuncRef> find_loaded_symbol(const std::string& sym) const {
        for (auto mi : opened_) {
            auto it = image_.modules[mi].exports.find(sym);
            if (it != image_.modules[mi].exports.end()) return FuncRef{mi, it->second};
        }
        return lookup_export(image_, sym);
    }

    void open_library(const std::string& arg) {
        std::string want = normalize_library_name(arg);
        for (std::uint32_t mi = 0; mi < image_.modules.size(); ++mi)
            if (normalize_library_name(image_.modules[mi].name) == want) {
                if (std::find(opened_.begin(), opened_.end(), mi) == opened_.end()) opened_.push_back(mi);
                return;
            }
        for (const auto& mod : options_.loadable)
            if (normalize_library_name(mod.name) == want) {
                opened_.push_back(append_library(image_, mod));
                return;
            }
    }

    void apply_effect(std::size_t t, Frame& fr) {
        auto& th = threads_[t];
        switch (fr.effect) {
        case Effect::None: break;
        case Effect::Dlopen:
            open_library(fr.effect_arg);
            th.regs[reg_index(Reg::rax)] = std::int64_t{1};
            break;
        case Effect::Dlsym: {
            auto f = find_loaded_symbol(fr.effect_arg);
            th.regs[reg_index(Reg::rax)] = f ? Value{*f} : Value{Unknown{}};
            break;
        }
        case Effect::PthreadCreate: {
            auto start = std::get_if<FuncRef>(&fr.effect_value);
            if (!start) {
                trap(t, fr.effect_site, "pthread_create start routine is not a function");
                return;
            }
            ThreadState nt;
            nt.id = static_cast<std::uint32_t>(threads_.size());
            nt.roots.push_back(*start);
            nt.script = script_for(nt.id);
            nt.filters = th.filters;  // seccomp filters are inherited
            nt.regs[reg_index(Reg::rdi)] = fr.effect_value2;
            event(t, fr.effect_site, EventKind::ThreadSpawn, nt.id, image_.qualified_name(*start));
            log_.threads.push_back(ThreadTrace{nt.id, fn(*start).address, {}, {}, {}, {}, {}});
            threads_.push_back(std::move(nt));
            auto& fresh = threads_.back();
            start_next_root(fresh);
            threads_[t].regs[reg_index(Reg::rax)] = std::int64_t{0};
            break;
        }
        case Effect::Execve:
            end_process("execve");
            break;
        }
    }

    void call_plt(std::size_t t, const Instruction& in) {
        auto& th = threads_[t];
        const std::string& sym = in.text;
        if (sym == intrinsic::kSyscall) {
            auto nr = std::get_if<std::int64_t>(&th.regs[reg_index(Reg::rdi)]);
            if (!nr) {
                trap(t, in.address, "syscall() number unknown");
                return;
            }
            do_syscall(t, in.address, *nr);
            return;
        }
        auto target = lookup_export(image_, sym, link_modules_);
        Effect effect = Effect::None;
        std::string arg;
        Value value{};
        Value value2{};
        if (sym == intrinsic::kDlopen) {
            effect = Effect::Dlopen;
            arg = string_arg(th.regs[reg_index(Reg::rdi)], in.address);
            event(t, in.address, EventKind::Dlopen, 0, arg);
        } else if (sym == intrinsic::kDlsym) {
            effect = Effect::Dlsym;
            arg = string_arg(th.regs[reg_index(Reg::rsi)], in.address);
            event(t, in.address, EventKind::Dlsym, 0, arg);
        } else if (sym == intrinsic::kExecve) {
            effect = Effect::Execve;
            arg = string_arg(th.regs[reg_index(Reg::rdi)], in.address);
            event(t, in.address, EventKind::Execve, 0, arg);
        } else if (sym == intrinsic::kPthreadCreate) {
            effect = Effect::PthreadCreate;
            value = th.regs[reg_index(Reg::rdx)];
            value2 = th.regs[reg_index(Reg::rcx)];
        } else if (intrinsic::is_exit_like(sym)) {
            // exit() runs the fini functions first; _exit/abort do not.
            th.stack.clear();
            th.roots.clear();
            if (sym == intrinsic::kExit)
                for (auto r : image_.fini_functions) th.roots.push_back(r);
            if (target) th.roots.push_back(*target);
            if (target) log_.threads[t].call_edges.emplace(in.address, fn(*target).address);
            if (th.roots.empty()) {
                end_process(sym);
                return;
            }
            start_next_root(th);
            return;
        }

        if (!target) {
            if (effect == Effect::None) {
                trap(t, in.address, "unresolved external '" + sym + "'");
                return;
            }
            Frame tmp;
            tmp.effect = effect;
            tmp.effect_arg = arg;
            tmp.effect_value = value;
            tmp.effect_value2 = value2;
            tmp.effect_site = in.address;
            advance(th);
            apply_effect(t, tmp);
            return;
        }
        log_.threads[t].call_edges.emplace(in.address, fn(*target).address);
        advance(th);  // return address
        push_frame(th, *target);
        auto& fr = th.stack.back();
        fr.effect = effect;
        fr.effect_arg = arg;
        fr.effect_value = value;
        fr.effect_value2 = value2;
        fr.effect_site = in.address;
    }

    void do_ret(std::size_t t) {
        auto& th = threads_[t];
        Frame fr = std::move(th.stack.back());
        th.stack.pop_back();
        for (std::size_t r = 0; r < kRegCount; ++r)
            if (is_callee_saved(static_cast<Reg>(r))) th.regs[r] = fr.saved[r];
        apply_effect(t, fr);
        if (!threads_[t].alive || process_done_) return;
        if (threads_[t].stack.empty()) start_next_root(threads_[t]);
    }

    /// Executes one instruction; false when it consumed no clock tick.
    bool step(std::size_t t) {
        auto& th = threads_[t];
        Frame& fr = th.stack.back();
        const FunctionDef& f = fn(fr.func);
        const Instruction& in = f.blocks[fr.block].instructions[fr.index];
        auto& rec = log_.threads[t];
        rec.addresses.push_back(in.address);
        rec.times.push_back(clock_);
        auto& R = th.regs;

        switch (in.op) {
        case Op::Const: R[reg_index(in.dst)] = in.imm; advance(th); break;
        case Op::Move: R[reg_index(in.dst)] = R[reg_index(in.src)]; advance(th); break;
        case Op::TakeAddr: R[reg_index(in.dst)] = in.func; advance(th); break;
        case Op::TakeAddrData: R[reg_index(in.dst)] = in.data; advance(th); break;
        case Op::StrConst: R[reg_index(in.dst)] = in.text; advance(th); break;
        case Op::Load:
        case Op::Arith: R[reg_index(in.dst)] = Unknown{}; advance(th); break;
        case Op::Store:
        case Op::Cmp: advance(th); break;
        case Op::Jump: goto_block(th, in.target); break;
        case Op::CondJump: goto_block(th, next_decision(th) ? in.target : in.target_false); break;
        case Op::CallDirect:
            rec.call_edges.emplace(in.address, fn(in.func).address);
            advance(th);
            push_frame(th, in.func);
            break;
        case Op::CallIndirect: {
            auto target = std::get_if<FuncRef>(&R[reg_index(in.dst)]);
            if (!target) {
                trap(t, in.address, "indirect call through non-function value");
                break;
            }
            FuncRef callee = *target;
            rec.call_edges.emplace(in.address, fn(callee).address);
            advance(th);
            push_frame(th, callee);
            break;
        }
        case Op::CallPlt: call_plt(t, in); break;
        case Op::Syscall: {
            auto nr = std::get_if<std::int64_t>(&R[reg_index(Reg::rax)]);
            if (!nr) {
                trap(t, in.address, "syscall number unknown");
                break;
            }
            do_syscall(t, in.address, *nr);
            break;
        }
        case Op::Ret: do_ret(t); break;
        case Op::InstallFilter: {
            // Synthetic: kept out of the address stream so times stay strictly increasing.
            rec.addresses.pop_back();
            rec.times.pop_back();
            auto it = image_.filters.find(static_cast<std::uint32_t>(in.imm));
            if (it == image_.filters.end()) {
                trap(t, in.address, "no embedded filter for partition " + std::to_string(in.imm));
                break;
            }
            th.filters.push_back(&it->second);
            event(t, in.address, EventKind::FilterInstall, in.imm);
            advance(th);
            return false;
        }
        }
        ++clock_;
        return true;
    }

    ProgramImage image_;  // copy: dlopen may append modules
    const Scenario& scenario_;
    const TracerOptions& options_;
    std::size_t link_modules_;
    std::vector<std::uint32_t> opened_;
    std::vector<ThreadState> threads_;
    TraceLog log_;
    std::uint64_t clock_ = 0;
    bool process_done_ = false;
};

}  // namespace detail

/// Runs the image under `scenario`. Deterministic in (image, scenario, options).
inline TraceLog execute(const ProgramImage& image, const Scenario& scenario, const TracerOptions& options = {}) {
    if (scenario.budget == 0) throw Error("trace", "scenario", "budget must be positive");
    return detail::Machine(image, scenario, options).run();
}

// ---------------------------------------------------------------------------
// Loop profiling over traces.

struct LoopStats {
    FuncRef func{};
    std::uint64_t entry_address = 0;
    std::uint64_t entries = 0;
    std::uint64_t iterations = 0;
    std::uint64_t duration = 0;
    /// True when the last entry was closed by executing an exit address;
    /// false when it was still open at the end of the trace.
    bool finalized = false;
    bool operator==(const LoopStats&) const = default;
};

struct ThreadProfile {
    std::uint32_t thread = 0;
    std::uint64_t root = 0;
    std::uint64_t trace_duration = 0;
    std::map<std::uint64_t, LoopStats> loops;  // by entry address
    bool operator==(const ThreadProfile&) const = default;
};

struct LoopProfile {
    std::vector<ThreadProfile> threads;
    bool operator==(const LoopProfile&) const = default;
};

/// Tracks which top-level loop the thread is in, using the loop entry and
/// exit addresses and the instruction counter as the clock. Exit checks run
/// before entry checks for the same instruction. Durations, iterations and
/// entries accumulate over repeated entries; a loop still open at the end of
/// the trace is closed at the last timestamp.
inline LoopProfile profile_loops(const TraceLog& trace, const std::vector<LoopSite>& loops) {
    std::map<std::uint64_t, const LoopSite*> by_entry;
    for (const auto& l : loops) by_entry.emplace(l.loop.entry_address, &l);
    LoopProfile out;
    for (const auto& th : trace.threads) {
        ThreadProfile tp;
        tp.thread = th.id;
        tp.root = th.root;
        if (!th.times.empty()) tp.trace_duration = th.times.back() - th.times.front();
        const LoopSite* cur = nullptr;
        std::uint64_t start = 0;
        for (std::size_t i = 0; i < th.addresses.size(); ++i) {
            std::uint64_t addr = th.addresses[i];
            std::uint64_t now = th.times[i];
            if (cur && cur->loop.exit_addresses.contains(addr)) {
                auto& st = tp.loops[cur->loop.entry_address];
                st.duration += now - start;
                st.finalized = true;
                cur = nullptr;
            }
            auto it = by_entry.find(addr);
            if (it == by_entry.end()) continue;
            if (!cur) {
                cur = it->second;
                start = now;
                auto& st = tp.loops[addr];
                st.func = cur->func;
                st.entry_address = addr;
                st.entries += 1;
                st.finalized = false;
            } else if (cur == it->second) {
                tp.loops[addr].iterations += 1;
            }
        }
        if (cur && !th.times.empty()) tp.loops[cur->loop.entry_address].duration += th.times.back() - start;
        out.threads.push_back(std::move(tp));
    }
    return out;
}

struct TransitionPoint {
    std::uint32_t thread = 0;
    std::uint64_t thread_root = 0;  // start function address of the thread
    FuncRef func{};
    std::uint64_t addr = 0;         // main-loop entry address
    bool operator==(const TransitionPoint&) const = default;
};

struct MainLoopSelection {
    std::vector<TransitionPoint> points;
    std::vector<std::string> warnings;
};

/// Per thread: among loops entered exactly once, the one with the largest
/// cumulative duration (lowest entry address on ties). Falls back to the
/// overall longest loop with a warning when no loop was entered once.
inline MainLoopSelection select_main_loops(const LoopProfile& profile) {
    MainLoopSelection out;
    for (const auto& th : profile.threads) {
        if (th.loops.empty()) {
            out.warnings.push_back("thread " + std::to_string(th.thread) + ": no top-level loop executed");
            continue;
        }
        auto pick = [&](bool once_only) -> const LoopStats* {
            const LoopStats* best = nullptr;
            for (const auto& [addr, st] : th.loops) {  // ascending address
                if (once_only && st.entries != 1) continue;
                if (!best || st.duration > best->duration) best = &st;
            }
            return best;
        };
        const LoopStats* chosen = pick(true);
        if (!chosen) {
            chosen = pick(false);
            out.warnings.push_back("thread " + std::to_string(th.thread) +
                                   ": no loop entered exactly once; using the longest-running loop");
        }
        out.points.push_back(TransitionPoint{th.thread, th.root, chosen->func, chosen->entry_address});
    }
    return out;
}

}  // namespace phaseguard
