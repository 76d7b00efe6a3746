#pragma once

// Register use-def chains and the value-flow analyses built on them:
//   - forward flow of taken function addresses (prunes the AT set),
//   - backward resolution of indirect-call operands and call arguments,
//   - arity / return-value matching of indirect-call sites and targets.
// Memory is opaque: a load is a dead end, a store is an escape.

#include <map>
#include <memory>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "phaseguard/cfg_loops.hpp"
#include "phaseguard/fcg.hpp"
#include "phaseguard/image_index.hpp"

namespace phaseguard {

enum class DefKind : std::uint8_t { Entry, Instr, CallClobber };

struct DefSite {
    DefKind kind = DefKind::Entry;
    Reg reg = Reg::rax;
    std::uint32_t block = 0;
    std::uint32_t index = 0;
    auto operator<=>(const DefSite&) const = default;
};

enum class UseKind : std::uint8_t {
    Explicit,    // move/store/arith/cmp operand
    CallTarget,  // call_indirect operand
    CallArg,     // argument register live into a call
    SyscallArg,  // rax and argument registers at a syscall instruction
    Return,      // rax at ret
};

struct UseSite {
    std::uint32_t block = 0;
    std::uint32_t index = 0;
    Reg reg = Reg::rax;
    UseKind kind = UseKind::Explicit;
    auto operator<=>(const UseSite&) const = default;
};

/// Registers read by `in`, with the role of each read.
inline std::vector<std::pair<Reg, UseKind>> instruction_uses(const Instruction& in) {
    std::vector<std::pair<Reg, UseKind>> out;
    switch (in.op) {
    case Op::Move: out.emplace_back(in.src, UseKind::Explicit); break;
    case Op::Store: out.emplace_back(in.dst, UseKind::Explicit); break;
    case Op::Arith:
    case Op::Cmp:
        out.emplace_back(in.dst, UseKind::Explicit);
        if (in.src != in.dst) out.emplace_back(in.src, UseKind::Explicit);
        break;
    case Op::CallIndirect:
        out.emplace_back(in.dst, UseKind::CallTarget);
        for (Reg r : kArgRegs)
            if (r != in.dst) out.emplace_back(r, UseKind::CallArg);
        break;
    case Op::CallDirect:
    case Op::CallPlt:
        for (Reg r : kArgRegs) out.emplace_back(r, UseKind::CallArg);
        break;
    case Op::Syscall:
        for (Reg r : {Reg::rax, Reg::rdi, Reg::rsi, Reg::rdx, Reg::r10, Reg::r8, Reg::r9})
            out.emplace_back(r, UseKind::SyscallArg);
        break;
    case Op::Ret: out.emplace_back(Reg::rax, UseKind::Return); break;
    default: break;
    }
    return out;
}

/// Registers written by `in`. Calls clobber every caller-saved register
/// (rax carries the result); the syscall instruction writes rax, rcx, r11.
inline std::vector<std::pair<Reg, DefKind>> instruction_defs(const Instruction& in) {
    std::vector<std::pair<Reg, DefKind>> out;
    switch (in.op) {
    case Op::Const:
    case Op::Move:
    case Op::TakeAddr:
    case Op::TakeAddrData:
    case Op::StrConst:
    case Op::Load:
    case Op::Arith: out.emplace_back(in.dst, DefKind::Instr); break;
    case Op::CallDirect:
    case Op::CallPlt:
    case Op::CallIndirect:
        for (Reg r : kCallerSaved) out.emplace_back(r, DefKind::CallClobber);
        break;
    case Op::Syscall:
        for (Reg r : {Reg::rax, Reg::rcx, Reg::r11}) out.emplace_back(r, DefKind::CallClobber);
        break;
    default: break;
    }
    return out;
}

/// Reaching definitions over registers for one function. Def ids 0..15 are
/// the register values at function entry.
class UseDefChains {
public:
    using DefId = std::uint32_t;
    using RegState = std::array<std::vector<DefId>, kRegCount>;

    explicit UseDefChains(const FunctionDef& fn) : fn_(&fn) {
        for (std::size_t r = 0; r < kRegCount; ++r) defs_.push_back({DefKind::Entry, static_cast<Reg>(r), 0, 0});
        for (std::uint32_t b = 0; b < fn.blocks.size(); ++b)
            for (std::uint32_t i = 0; i < fn.blocks[b].instructions.size(); ++i)
                for (auto [r, k] : instruction_defs(fn.blocks[b].instructions[i])) {
                    defs_at_[{b, i}].push_back(static_cast<DefId>(defs_.size()));
                    defs_.push_back({k, r, b, i});
                }
        solve();
        uses_.resize(defs_.size());
        for (std::uint32_t b = 0; b < fn.blocks.size(); ++b) {
            RegState state = in_[b];
            for (std::uint32_t i = 0; i < fn.blocks[b].instructions.size(); ++i) {
                for (auto [r, k] : instruction_uses(fn.blocks[b].instructions[i]))
                    for (DefId d : state[reg_index(r)]) uses_[d].push_back({b, i, r, k});
                transfer(state, b, i);
            }
        }
    }

    const FunctionDef& function() const { return *fn_; }
    const DefSite& def(DefId d) const { return defs_[d]; }
    std::size_t def_count() const { return defs_.size(); }
    const std::vector<UseSite>& uses(DefId d) const { return uses_[d]; }
    static DefId entry_def(Reg r) { return static_cast<DefId>(reg_index(r)); }

    /// Definitions made by the instruction at (block, index).
    std::vector<DefId> defs_at(std::uint32_t block, std::uint32_t index) const {
        auto it = defs_at_.find({block, index});
        return it == defs_at_.end() ? std::vector<DefId>{} : it->second;
    }

    std::optional<DefId> def_of(std::uint32_t block, std::uint32_t index, Reg r) const {
        for (DefId d : defs_at(block, index))
            if (defs_[d].reg == r) return d;
        return std::nullopt;
    }

    /// Definitions of `r` reaching the point just before (block, index).
    std::vector<DefId> reaching(std::uint32_t block, std::uint32_t index, Reg r) const {
        RegState state = in_[block];
        for (std::uint32_t i = 0; i < index; ++i) transfer(state, block, i);
        return state[reg_index(r)];
    }

    const RegState& block_in(std::uint32_t block) const { return in_[block]; }

private:
    void transfer(RegState& state, std::uint32_t b, std::uint32_t i) const {
        auto it = defs_at_.find({b, i});
        if (it == defs_at_.end()) return;
        for (DefId d : it->second) state[reg_index(defs_[d].reg)] = {d};
    }

    void solve() {
        const auto& blocks = fn_->blocks;
        in_.assign(blocks.size(), RegState{});
        std::vector<RegState> out(blocks.size());
        auto preds = predecessors(*fn_);
        RegState entry_state;
        for (std::size_t r = 0; r < kRegCount; ++r) entry_state[r] = {static_cast<DefId>(r)};
        std::vector<std::uint32_t> work;
        std::vector<char> queued(blocks.size(), 1);
        for (std::uint32_t b = 0; b < blocks.size(); ++b) work.push_back(static_cast<std::uint32_t>(blocks.size() - 1 - b));
        std::vector<char> computed(blocks.size(), 0);
        while (!work.empty()) {
            auto b = work.back();
            work.pop_back();
            queued[b] = 0;
            RegState in = b == fn_->entry ? entry_state : RegState{};
            for (auto p : preds[b])
                for (std::size_t r = 0; r < kRegCount; ++r) {
                    std::vector<DefId> merged;
                    std::set_union(in[r].begin(), in[r].end(), out[p][r].begin(), out[p][r].end(),
                                   std::back_inserter(merged));
                    in[r] = std::move(merged);
                }
            RegState o = in;
            for (std::uint32_t i = 0; i < blocks[b].instructions.size(); ++i) transfer(o, b, i);
            in_[b] = std::move(in);
            if (computed[b] && o == out[b]) continue;
            computed[b] = 1;
            out[b] = std::move(o);
            for (auto s : blocks[b].successors)
                if (!queued[s]) {
                    queued[s] = 1;
                    work.push_back(s);
                }
        }
    }

    const FunctionDef* fn_;
    std::vector<DefSite> defs_;
    std::map<std::pair<std::uint32_t, std::uint32_t>, std::vector<DefId>> defs_at_;
    std::vector<RegState> in_;
    std::vector<std::vector<UseSite>> uses_;
};

inline UseDefChains build_usedef(const FunctionDef& fn) { return UseDefChains(fn); }

/// Lazily built chains for every function of one image.
class UseDefCache {
public:
    explicit UseDefCache(const ProgramImage& image) : image_(&image), index_(image) {}

    const UseDefChains& chains(FuncRef f) {
        auto it = cache_.find(f);
        if (it == cache_.end()) it = cache_.emplace(f, std::make_unique<UseDefChains>(image_->function(f))).first;
        return *it->second;
    }
    const ImageIndex& index() const { return index_; }
    const ProgramImage& image() const { return *image_; }

private:
    const ProgramImage* image_;
    ImageIndex index_;
    std::map<FuncRef, std::unique_ptr<UseDefChains>> cache_;
};

// ---------------------------------------------------------------------------
// Backward resolution

enum class BlockerReason : std::uint8_t { MemoryLoad, Arithmetic, UnknownExternal, DepthLimit, TypeMismatch };

inline std::string_view blocker_name(BlockerReason r) {
    switch (r) {
    case BlockerReason::MemoryLoad: return "memory-load";
    case BlockerReason::Arithmetic: return "arithmetic";
    case BlockerReason::UnknownExternal: return "unknown-external";
    case BlockerReason::DepthLimit: return "depth-limit";
    case BlockerReason::TypeMismatch: return "type-mismatch";
    }
    return "?";
}

struct Blocker {
    std::uint64_t site = 0;
    BlockerReason reason = BlockerReason::UnknownExternal;
    auto operator<=>(const Blocker&) const = default;
};

using ConstValue = std::variant<FuncRef, std::int64_t, std::string, DataRef>;

enum class ResolutionStatus : std::uint8_t { Full, Partial, Unresolved };

inline std::string_view status_name(ResolutionStatus s) {
    switch (s) {
    case ResolutionStatus::Full: return "full";
    case ResolutionStatus::Partial: return "partial";
    case ResolutionStatus::Unresolved: return "unresolved";
    }
    return "?";
}

struct ValueResolution {
    ResolutionStatus status = ResolutionStatus::Unresolved;
    std::set<ConstValue> values;
    std::set<Blocker> blockers;

    bool operator==(const ValueResolution&) const = default;

    void finalize() {
        if (values.empty()) status = ResolutionStatus::Unresolved;
        else if (blockers.empty()) status = ResolutionStatus::Full;
        else status = ResolutionStatus::Partial;
    }

    std::set<FuncRef> functions() const {
        std::set<FuncRef> out;
        for (const auto& v : values)
            if (auto f = std::get_if<FuncRef>(&v)) out.insert(*f);
        return out;
    }
    std::set<std::string> strings() const {
        std::set<std::string> out;
        for (const auto& v : values)
            if (auto s = std::get_if<std::string>(&v)) out.insert(*s);
        return out;
    }
    std::set<std::int64_t> integers() const {
        std::set<std::int64_t> out;
        for (const auto& v : values)
            if (auto i = std::get_if<std::int64_t>(&v)) out.insert(*i);
        return out;
    }
};

inline constexpr std::size_t kDefaultDepthCap = 32;

/// Walks reaching definitions backwards. An entry definition of an argument
/// register continues at every Fcg callsite of the function (up to
/// `depth_cap` caller expansions). Resolution is full only when every path
/// ends at a constant.
class BackwardWalker {
public:
    BackwardWalker(UseDefCache& cache, const Fcg& fcg, std::size_t depth_cap = kDefaultDepthCap,
                   const std::map<std::uint64_t, std::set<FuncRef>>* dlsym_results = nullptr)
        : cache_(cache), fcg_(fcg), depth_cap_(depth_cap), dlsym_results_(dlsym_results) {}

    ValueResolution resolve(FuncRef f, std::uint32_t block, std::uint32_t index, Reg r) {
        ValueResolution out;
        visited_.clear();
        walk(f, block, index, r, 0, out);
        out.finalize();
        return out;
    }

    /// Resolves register `r` as read by the instruction at `site`.
    ValueResolution resolve_at(std::uint64_t site, Reg r) {
        auto loc = cache_.index().find(site);
        if (!loc) throw Error("vfa", std::to_string(site), "no instruction at address");
        return resolve(loc->func, loc->block, loc->index, r);
    }

private:
    void walk(FuncRef f, std::uint32_t block, std::uint32_t index, Reg r, std::size_t depth, ValueResolution& out) {
        const auto& ch = cache_.chains(f);
        for (auto d : ch.reaching(block, index, r)) visit(f, ch, d, depth, out);
    }

    void visit(FuncRef f, const UseDefChains& ch, UseDefChains::DefId d, std::size_t depth, ValueResolution& out) {
        if (!visited_.insert({f, d}).second) return;
        const DefSite& def = ch.def(d);
        const auto& fn = ch.function();
        if (def.kind == DefKind::Entry) {
            if (arg_index(def.reg) < 0) {
                out.blockers.insert({fn.address, BlockerReason::UnknownExternal});
                return;
            }
            const auto& callers = fcg_.callers_of(f);
            if (callers.empty()) {
                out.blockers.insert({fn.address, BlockerReason::UnknownExternal});
                return;
            }
            if (depth + 1 > depth_cap_) {
                out.blockers.insert({fn.address, BlockerReason::DepthLimit});
                return;
            }
            for (const auto& e : callers) {
                auto loc = cache_.index().find(e.site);
                if (!loc) continue;
                walk(e.caller, loc->block, loc->index, def.reg, depth + 1, out);
            }
            return;
        }
        const Instruction& in = fn.blocks[def.block].instructions[def.index];
        if (def.kind == DefKind::CallClobber) {
            if (dlsym_results_ && in.op == Op::CallPlt && in.text == intrinsic::kDlsym && def.reg == Reg::rax) {
                auto it = dlsym_results_->find(in.address);
                if (it != dlsym_results_->end()) {
                    for (auto fr : it->second) out.values.insert(fr);
                    return;
                }
            }
            out.blockers.insert({in.address, BlockerReason::UnknownExternal});
            return;
        }
        switch (in.op) {
        case Op::TakeAddr: out.values.insert(in.func); break;
        case Op::StrConst: out.values.insert(in.text); break;
        case Op::Const: out.values.insert(in.imm); break;
        case Op::TakeAddrData: out.values.insert(in.data); break;
        case Op::Move: walk(f, def.block, def.index, in.src, depth, out); break;
        case Op::Load: out.blockers.insert({in.address, BlockerReason::MemoryLoad}); break;
        case Op::Arith: out.blockers.insert({in.address, BlockerReason::Arithmetic}); break;
        default: out.blockers.insert({in.address, BlockerReason::UnknownExternal}); break;
        }
    }

    UseDefCache& cache_;
    const Fcg& fcg_;
    std::size_t depth_cap_;
    const std::map<std::uint64_t, std::set<FuncRef>>* dlsym_results_;
    std::set<std::pair<FuncRef, UseDefChains::DefId>> visited_;
};

/// Possible targets of the call_indirect at `site`. Non-function constants
/// become type-mismatch blockers.
inline ValueResolution backward_resolve_call(UseDefCache& cache, const Fcg& fcg, std::uint64_t site,
                                             std::size_t depth_cap = kDefaultDepthCap,
                                             const std::map<std::uint64_t, std::set<FuncRef>>* dlsym_results = nullptr) {
    auto loc = cache.index().find(site);
    if (!loc) throw Error("vfa", std::to_string(site), "no instruction at address");
    const Instruction& in = cache.index().at(*loc);
    if (in.op != Op::CallIndirect) throw Error("vfa", std::to_string(site), "not an indirect call");
    BackwardWalker walker(cache, fcg, depth_cap, dlsym_results);
    ValueResolution vr = walker.resolve(loc->func, loc->block, loc->index, in.dst);
    for (auto it = vr.values.begin(); it != vr.values.end();) {
        if (!std::holds_alternative<FuncRef>(*it)) {
            vr.blockers.insert({site, BlockerReason::TypeMismatch});
            it = vr.values.erase(it);
        } else {
            ++it;
        }
    }
    vr.finalize();
    return vr;
}

/// Values that may reach argument `arg` (0-based, SysV order) at a call.
inline ValueResolution resolve_argument(UseDefCache& cache, const Fcg& fcg, std::uint64_t site, std::size_t arg,
                                        std::size_t depth_cap = kDefaultDepthCap) {
    if (arg >= kArgRegs.size()) throw Error("vfa", std::to_string(site), "argument index out of range");
    auto loc = cache.index().find(site);
    if (!loc || !cache.index().at(*loc).is_call()) throw Error("vfa", std::to_string(site), "not a call");
    BackwardWalker walker(cache, fcg, depth_cap);
    return walker.resolve(loc->func, loc->block, loc->index, kArgRegs[arg]);
}

// ---------------------------------------------------------------------------
// Forward flow of taken addresses

struct ForwardOutcome {
    bool escapes = false;
    std::set<std::uint64_t> call_sites;  // call_indirect sites the value reaches as target
};

namespace detail {

class ForwardTracker {
public:
    ForwardTracker(UseDefCache& cache) : cache_(cache) {}

    ForwardOutcome follow(FuncRef f, UseDefChains::DefId d) {
        ForwardOutcome out;
        visited_.clear();
        go(f, d, out);
        return out;
    }

private:
    void go(FuncRef f, UseDefChains::DefId d, ForwardOutcome& out) {
        if (out.escapes || !visited_.insert({f, d}).second) return;
        const auto& ch = cache_.chains(f);
        const auto& fn = ch.function();
        for (const auto& use : ch.uses(d)) {
            const Instruction& in = fn.blocks[use.block].instructions[use.index];
            switch (use.kind) {
            case UseKind::CallTarget: out.call_sites.insert(in.address); break;
            case UseKind::Explicit:
                if (in.op == Op::Cmp) break;
                if (in.op == Op::Move) {
                    if (auto nd = ch.def_of(use.block, use.index, in.dst)) go(f, *nd, out);
                    break;
                }
                out.escapes = true;  // store / arith
                break;
            case UseKind::CallArg: {
                std::optional<FuncRef> callee;
                if (in.op == Op::CallDirect) callee = in.func;
                else if (in.op == Op::CallPlt && !is_runtime_symbol(in.text))
                    callee = lookup_export(cache_.image(), in.text);
                if (!callee) {
                    out.escapes = true;
                    break;
                }
                go(*callee, UseDefChains::entry_def(use.reg), out);
                break;
            }
            case UseKind::SyscallArg:
            case UseKind::Return: out.escapes = true; break;
            }
            if (out.escapes) return;
        }
    }

    static bool is_runtime_symbol(std::string_view s) {
        return s == intrinsic::kSyscall || s == intrinsic::kDlopen || s == intrinsic::kDlsym ||
               s == intrinsic::kExecve || s == intrinsic::kPthreadCreate || intrinsic::is_exit_like(s);
    }

    UseDefCache& cache_;
    std::set<std::pair<FuncRef, UseDefChains::DefId>> visited_;
};

}  // namespace detail

struct ForwardResult {
    std::set<FuncRef> removed;
    std::map<std::uint64_t, std::set<FuncRef>> edges;
};

/// An AT function leaves the AT set when every one of its take sites flows
/// only into indirect-call targets or comparisons; its indirect-call uses
/// become precise edges. Membership of a live data object is an escape.
inline ForwardResult forward_resolve_at(UseDefCache& cache, const Fcg& fcg) {
    ForwardResult res;
    detail::ForwardTracker tracker(cache);
    for (FuncRef fn : fcg.at_set) {
        auto it = fcg.at_sites.find(fn);
        if (it == fcg.at_sites.end()) continue;
        bool escapes = false;
        std::set<std::uint64_t> sites;
        for (const auto& take : it->second) {
            if (take.kind == TakeKind::DataObject) {
                escapes = true;
                break;
            }
            auto loc = cache.index().find(take.address);
            if (!loc) {
                escapes = true;
                break;
            }
            const auto& ch = cache.chains(loc->func);
            Reg r = take.kind == TakeKind::Dlsym ? Reg::rax : cache.index().at(*loc).dst;
            auto d = ch.def_of(loc->block, loc->index, r);
            if (!d) {
                escapes = true;
                break;
            }
            auto outcome = tracker.follow(loc->func, *d);
            if (outcome.escapes) {
                escapes = true;
                break;
            }
            sites.insert(outcome.call_sites.begin(), outcome.call_sites.end());
        }
        if (escapes) continue;
        res.removed.insert(fn);
        for (auto s : sites) res.edges[s].insert(fn);
    }
    return res;
}

// ---------------------------------------------------------------------------
// Arity / return matching

struct CallsiteSignature {
    std::size_t prepared_args = 0;
    bool expects_return = false;
};

struct FunctionSignature {
    std::size_t expected_args = 0;
    bool returns_value = false;
};

inline CallsiteSignature callsite_signature(UseDefCache& cache, std::uint64_t site) {
    auto loc = cache.index().find(site);
    if (!loc) throw Error("vfa", std::to_string(site), "no instruction at address");
    const auto& ch = cache.chains(loc->func);
    CallsiteSignature sig;
    for (Reg r : kArgRegs) {
        bool local = false;
        for (auto d : ch.reaching(loc->block, loc->index, r))
            if (ch.def(d).kind == DefKind::Instr) local = true;
        if (!local) break;
        ++sig.prepared_args;
    }
    if (auto d = ch.def_of(loc->block, loc->index, Reg::rax))
        for (const auto& u : ch.uses(*d))
            if (u.kind != UseKind::Return) sig.expects_return = true;
    return sig;
}

inline FunctionSignature function_signature(UseDefCache& cache, FuncRef f) {
    const auto& ch = cache.chains(f);
    const auto& fn = ch.function();
    FunctionSignature sig;
    for (std::size_t i = 0; i < kArgRegs.size(); ++i)
        for (const auto& u : ch.uses(UseDefChains::entry_def(kArgRegs[i])))
            if (u.kind == UseKind::Explicit || u.kind == UseKind::CallTarget) sig.expected_args = i + 1;
    for (std::uint32_t b = 0; b < fn.blocks.size(); ++b) {
        const auto& bb = fn.blocks[b];
        auto last = static_cast<std::uint32_t>(bb.instructions.size() - 1);
        if (bb.instructions[last].op != Op::Ret) continue;
        for (auto d : ch.reaching(b, last, Reg::rax))
            if (ch.def(d).kind != DefKind::Entry) sig.returns_value = true;
    }
    return sig;
}

/// (site, target) pairs among indirect-AT edges that fail arity/return matching.
inline std::set<std::pair<std::uint64_t, FuncRef>> typearmor_match(UseDefCache& cache, const Fcg& fcg) {
    std::set<std::pair<std::uint64_t, FuncRef>> pruned;
    std::map<std::uint64_t, CallsiteSignature> sites;
    std::map<FuncRef, FunctionSignature> funcs;
    for (const auto& e : fcg.edges) {
        if (e.kind != EdgeKind::IndirectAt) continue;
        auto si = sites.find(e.site);
        if (si == sites.end()) si = sites.emplace(e.site, callsite_signature(cache, e.site)).first;
        auto fi = funcs.find(e.callee);
        if (fi == funcs.end()) fi = funcs.emplace(e.callee, function_signature(cache, e.callee)).first;
        bool keep = fi->second.expected_args <= si->second.prepared_args &&
                    (!si->second.expects_return || fi->second.returns_value);
        if (!keep) pruned.insert({e.site, e.callee});
    }
    return pruned;
}

// ---------------------------------------------------------------------------
// Refinement driver

struct UnresolvedCallsite {
    std::uint64_t site = 0;
    FuncRef caller{};
    ValueResolution resolution;
};

struct RefinementReport {
    std::size_t unrefined_edges = 0;
    std::size_t refined_edges = 0;
    std::size_t removed_forward = 0;
    std::size_t removed_backward = 0;
    std::size_t removed_typearmor = 0;
    std::set<FuncRef> at_eliminated;
    std::vector<UnresolvedCallsite> unresolved;
    std::size_t iterations = 0;

    double reduction_percent() const {
        return unrefined_edges == 0 ? 0.0
                                    : 100.0 * static_cast<double>(unrefined_edges - refined_edges) /
                                          static_cast<double>(unrefined_edges);
    }
};

struct RefineOptions {
    std::vector<DlsymTake> dlsym_takes;
    std::map<std::uint64_t, std::set<FuncRef>> dlsym_results;
    std::size_t depth_cap = kDefaultDepthCap;
    bool forward = true;
    bool backward = true;
    bool typearmor = true;
};

struct RefineResult {
    Fcg unrefined;
    Fcg refined;
    Refinements decisions;
    RefinementReport report;
};

/// Edge identity without the kind: (site, caller, callee).
inline std::set<std::tuple<std::uint64_t, FuncRef, FuncRef>> edge_triples(const Fcg& g) {
    std::set<std::tuple<std::uint64_t, FuncRef, FuncRef>> out;
    for (const auto& e : g.edges) out.emplace(e.site, e.caller, e.callee);
    return out;
}

/// Forward VFA, then backward VFA, then arity matching, each repeated until
/// it stops changing the graph; the whole sequence repeats to a fixpoint.
inline RefineResult refine_fcg(const ProgramImage& image, const RefineOptions& opt = {}) {
    RefineResult res;
    UseDefCache cache(image);
    res.unrefined = build_fcg(image, {}, opt.dlsym_takes);
    Refinements& R = res.decisions;
    Fcg g = res.unrefined;
    auto count = [](const Fcg& x) { return edge_triples(x).size(); };
    res.report.unrefined_edges = count(g);

    for (bool changed = true; changed && res.report.iterations < 64;) {
        changed = false;
        ++res.report.iterations;
        if (opt.forward) {
            for (;;) {
                auto fw = forward_resolve_at(cache, g);
                Refinements next = R;
                next.removed_at.insert(fw.removed.begin(), fw.removed.end());
                for (auto& [s, ts] : fw.edges) next.forward_edges[s].insert(ts.begin(), ts.end());
                if (next == R) break;
                std::size_t before = count(g);
                R = std::move(next);
                g = build_fcg(image, R, opt.dlsym_takes);
                res.report.removed_forward += before - std::min(before, count(g));
                changed = true;
            }
        }
        if (opt.backward) {
            for (;;) {
                Refinements next = R;
                next.resolved_sites.clear();
                for (const auto& [site, caller] : g.indirect_sites) {
                    auto vr = backward_resolve_call(cache, g, site, opt.depth_cap, &opt.dlsym_results);
                    if (vr.status == ResolutionStatus::Full) next.resolved_sites[site] = vr.functions();
                }
                if (next == R) break;
                std::size_t before = count(g);
                R = std::move(next);
                g = build_fcg(image, R, opt.dlsym_takes);
                res.report.removed_backward += before - std::min(before, count(g));
                changed = true;
            }
        }
        if (opt.typearmor) {
            Refinements next = R;
            auto pruned = typearmor_match(cache, g);
            next.typearmor_pruned.insert(pruned.begin(), pruned.end());
            if (!(next == R)) {
                std::size_t before = count(g);
                R = std::move(next);
                g = build_fcg(image, R, opt.dlsym_takes);
                res.report.removed_typearmor += before - std::min(before, count(g));
                changed = true;
            }
        }
    }
    res.refined = std::move(g);
    res.report.refined_edges = count(res.refined);
    for (auto f : res.unrefined.at_set)
        if (!res.refined.at_set.contains(f)) res.report.at_eliminated.insert(f);
    for (const auto& [site, caller] : res.refined.indirect_sites)
        if (!R.resolved_sites.contains(site))
            res.report.unresolved.push_back(
                {site, caller, backward_resolve_call(cache, res.refined, site, opt.depth_cap, &opt.dlsym_results)});
    return res;
}

inline nlohmann::json value_resolution_json(const ProgramImage& image, const ValueResolution& vr) {
    using nlohmann::json;
    json values = json::array(), blockers = json::array();
    for (const auto& v : vr.values) {
        if (auto f = std::get_if<FuncRef>(&v)) values.push_back({{"function", image.qualified_name(*f)}});
        else if (auto i = std::get_if<std::int64_t>(&v)) values.push_back({{"integer", *i}});
        else if (auto s = std::get_if<std::string>(&v)) values.push_back({{"string", *s}});
        else if (auto d = std::get_if<DataRef>(&v))
            values.push_back({{"object", image.modules[d->module].name + "::" + image.object(*d).id}});
    }
    for (const auto& b : vr.blockers) blockers.push_back({{"site", b.site}, {"reason", std::string(blocker_name(b.reason))}});
    return {{"status", std::string(status_name(vr.status))}, {"values", values}, {"blockers", blockers}};
}

inline nlohmann::json refinement_report_json(const ProgramImage& image, const RefinementReport& r) {
    using nlohmann::json;
    json at = json::array(), unresolved = json::array();
    for (auto f : r.at_eliminated) at.push_back(image.qualified_name(f));
    for (const auto& u : r.unresolved)
        unresolved.push_back({{"site", u.site}, {"caller", image.qualified_name(u.caller)},
                              {"resolution", value_resolution_json(image, u.resolution)}});
    char pct[32];
    std::snprintf(pct, sizeof pct, "%.2f", r.reduction_percent());
    return {{"unrefined_edges", r.unrefined_edges}, {"refined_edges", r.refined_edges},
            {"edges_removed", {{"forward", r.removed_forward}, {"backward", r.removed_backward},
                               {"typearmor", r.removed_typearmor}}},
            {"edge_reduction_percent", pct}, {"at_eliminated", at}, {"unresolved_callsites", unresolved},
            {"depth_cap", kDefaultDepthCap}};
}

}  // namespace phaseguard
