#pragma once

// PMIR: the lifted program model. An image is an executable module plus
// shared-library modules, each holding functions made of basic blocks of
// abstract x86-64-flavoured instructions.

#include <array>
#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "phaseguard/error.hpp"

namespace phaseguard {

inline constexpr int kPmirVersion = 1;

enum class Reg : std::uint8_t {
    rax, rbx, rcx, rdx, rsi, rdi, rbp, rsp, r8, r9, r10, r11, r12, r13, r14, r15
};
inline constexpr std::size_t kRegCount = 16;

/// SysV argument order.
inline constexpr std::array<Reg, 6> kArgRegs{Reg::rdi, Reg::rsi, Reg::rdx, Reg::rcx, Reg::r8, Reg::r9};
inline constexpr std::array<Reg, 9> kCallerSaved{Reg::rax, Reg::rcx, Reg::rdx, Reg::rsi, Reg::rdi,
                                                  Reg::r8,  Reg::r9,  Reg::r10, Reg::r11};

inline constexpr std::array<std::string_view, kRegCount> kRegNames{
    "rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rbp", "rsp",
    "r8",  "r9",  "r10", "r11", "r12", "r13", "r14", "r15"};

constexpr std::string_view reg_name(Reg r) { return kRegNames[static_cast<std::size_t>(r)]; }
constexpr std::size_t reg_index(Reg r) { return static_cast<std::size_t>(r); }

inline std::optional<Reg> parse_reg(std::string_view name) {
    for (std::size_t i = 0; i < kRegCount; ++i)
        if (kRegNames[i] == name) return static_cast<Reg>(i);
    return std::nullopt;
}

/// Index of `r` in the argument order, or -1.
constexpr int arg_index(Reg r) {
    for (std::size_t i = 0; i < kArgRegs.size(); ++i)
        if (kArgRegs[i] == r) return static_cast<int>(i);
    return -1;
}

constexpr bool is_caller_saved(Reg r) {
    for (Reg c : kCallerSaved)
        if (c == r) return true;
    return false;
}

struct FuncRef {
    std::uint32_t module = 0;
    std::uint32_t function = 0;
    auto operator<=>(const FuncRef&) const = default;
};

struct DataRef {
    std::uint32_t module = 0;
    std::uint32_t object = 0;
    auto operator<=>(const DataRef&) const = default;
};

enum class Op : std::uint8_t {
    Const,          // dst <- imm
    Move,           // dst <- src
    TakeAddr,       // dst <- &func
    TakeAddrData,   // dst <- &data
    StrConst,       // dst <- "text"
    Load,           // dst <- memory (opaque)
    Store,          // memory <- src (reads `dst` field as the source)
    Arith,          // dst <- dst (op) src
    Cmp,            // flags <- dst ? src
    CallDirect,     // call func
    CallPlt,        // call through PLT slot `text`
    CallIndirect,   // call *dst
    Jump,           // goto target
    CondJump,       // if (flag) goto target else goto target_false
    Syscall,        // syscall instruction, number in rax
    Ret,
    InstallFilter,  // synthetic: install embedded filter `imm`
};

/// Flat instruction record; which fields are meaningful depends on `op`
/// (see the comments on Op). Unused fields keep their defaults so that
/// defaulted equality is structural.
struct Instruction {
    std::uint64_t address = 0;
    Op op = Op::Ret;
    Reg dst = Reg::rax;
    Reg src = Reg::rax;
    std::int64_t imm = 0;
    FuncRef func{};
    DataRef data{};
    std::string text;
    std::uint32_t target = 0;
    std::uint32_t target_false = 0;

    bool operator==(const Instruction&) const = default;

    bool is_call() const { return op == Op::CallDirect || op == Op::CallPlt || op == Op::CallIndirect; }
    bool is_terminator() const { return op == Op::Jump || op == Op::CondJump || op == Op::Ret; }
};

struct BasicBlock {
    std::string id;
    std::uint64_t address = 0;
    std::vector<Instruction> instructions;
    std::vector<std::uint32_t> successors;  // indices into FunctionDef::blocks

    bool operator==(const BasicBlock&) const = default;
};

struct FunctionDef {
    std::string id;
    std::string name;
    std::uint64_t address = 0;
    std::uint32_t entry = 0;
    std::vector<BasicBlock> blocks;

    bool operator==(const FunctionDef&) const = default;

    std::optional<std::uint32_t> block_index(std::string_view block_id) const {
        for (std::uint32_t i = 0; i < blocks.size(); ++i)
            if (blocks[i].id == block_id) return i;
        return std::nullopt;
    }
};

struct DataObject {
    std::string id;
    std::optional<std::string> symbol;
    std::vector<FuncRef> members;

    bool operator==(const DataObject&) const = default;
};

enum class ModuleKind : std::uint8_t { Executable, SharedLibrary };

struct ModuleUnit {
    std::string name;
    ModuleKind kind = ModuleKind::SharedLibrary;
    std::vector<FunctionDef> functions;
    std::map<std::string, std::uint32_t> exports;  // symbol -> function index
    std::vector<DataObject> data_objects;

    bool operator==(const ModuleUnit&) const = default;

    std::optional<std::uint32_t> function_index(std::string_view fid) const {
        for (std::uint32_t i = 0; i < functions.size(); ++i)
            if (functions[i].id == fid) return i;
        return std::nullopt;
    }
};

/// Classic-BPF instruction, the kernel's `struct sock_filter`.
struct SockFilter {
    std::uint16_t code = 0;
    std::uint8_t jt = 0;
    std::uint8_t jf = 0;
    std::uint32_t k = 0;
    bool operator==(const SockFilter&) const = default;
};

/// The whole program. modules[0] is the executable; the rest are shared
/// libraries in dependency order.
struct ProgramImage {
    std::vector<ModuleUnit> modules;
    std::string library_corpus_path;
    FuncRef main_function{};
    std::vector<FuncRef> init_functions;
    std::vector<FuncRef> preinit_functions;
    std::vector<FuncRef> fini_functions;
    /// Filters embedded by hardening, keyed by partition id.
    std::map<std::uint32_t, std::vector<SockFilter>> filters;

    bool operator==(const ProgramImage&) const = default;

    const ModuleUnit& executable() const { return modules.front(); }
    const FunctionDef& function(FuncRef r) const { return modules.at(r.module).functions.at(r.function); }
    FunctionDef& function(FuncRef r) { return modules.at(r.module).functions.at(r.function); }
    const DataObject& object(DataRef r) const { return modules.at(r.module).data_objects.at(r.object); }

    std::string qualified_name(FuncRef r) const {
        return modules.at(r.module).name + "::" + function(r).id;
    }

    std::optional<std::uint32_t> module_index(std::string_view name) const {
        for (std::uint32_t i = 0; i < modules.size(); ++i)
            if (modules[i].name == name) return i;
        return std::nullopt;
    }

    /// Loader-invoked functions plus main.
    std::vector<FuncRef> roots() const {
        std::vector<FuncRef> out{main_function};
        out.insert(out.end(), preinit_functions.begin(), preinit_functions.end());
        out.insert(out.end(), init_functions.begin(), init_functions.end());
        out.insert(out.end(), fini_functions.begin(), fini_functions.end());
        return out;
    }
};

/// PLT symbols the runtime treats specially. `syscall` is never bound to a
/// library body: its number travels in rdi.
namespace intrinsic {
inline constexpr std::string_view kSyscall = "syscall";
inline constexpr std::string_view kDlopen = "dlopen";
inline constexpr std::string_view kDlsym = "dlsym";
inline constexpr std::string_view kExecve = "execve";
inline constexpr std::string_view kPthreadCreate = "pthread_create";
inline constexpr std::string_view kExit = "exit";
inline constexpr std::string_view kUnderscoreExit = "_exit";
inline constexpr std::string_view kAbort = "abort";

inline bool is_exit_like(std::string_view s) { return s == kExit || s == kUnderscoreExit || s == kAbort; }
}  // namespace intrinsic

}  // namespace phaseguard
