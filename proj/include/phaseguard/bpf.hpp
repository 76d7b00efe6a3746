#pragma once

// Classic-BPF seccomp programs: compilation of allow-lists, validation, an
// evaluator over struct seccomp_data, and the binary/text encodings.

#include <algorithm>
#include <array>
#include <cstdio>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "phaseguard/pmir.hpp"

namespace phaseguard::bpf {

// Opcode fields (linux/bpf_common.h).
inline constexpr std::uint16_t kLd = 0x00, kLdx = 0x01, kAlu = 0x04, kJmp = 0x05, kRet = 0x06, kMisc = 0x07;
inline constexpr std::uint16_t kW = 0x00, kH = 0x08, kB = 0x10;
inline constexpr std::uint16_t kImm = 0x00, kAbs = 0x20, kMem = 0x60;
inline constexpr std::uint16_t kJa = 0x00, kJeq = 0x10, kJgt = 0x20, kJge = 0x30, kJset = 0x40;
inline constexpr std::uint16_t kAnd = 0x50;
inline constexpr std::uint16_t kK = 0x00, kX = 0x08, kA = 0x10;

inline constexpr std::uint16_t kLdWAbs = kLd | kW | kAbs;
inline constexpr std::uint16_t kJeqK = kJmp | kJeq | kK;
inline constexpr std::uint16_t kJumpAlways = kJmp | kJa;
inline constexpr std::uint16_t kRetK = kRet | kK;

inline constexpr std::uint32_t kAuditArchX86_64 = 0xC000003E;
inline constexpr std::uint32_t kRetKillProcess = 0x80000000;
inline constexpr std::uint32_t kRetKillThread = 0x00000000;
inline constexpr std::uint32_t kRetErrno = 0x00050000;
inline constexpr std::uint32_t kRetAllow = 0x7fff0000;
inline constexpr std::uint32_t kActionMask = 0xffff0000;

inline constexpr std::size_t kMaxInstructions = 4096;
inline constexpr std::uint32_t kMaxSyscall = 460;

inline constexpr std::uint32_t kOffsetNr = 0;
inline constexpr std::uint32_t kOffsetArch = 4;
inline constexpr std::uint32_t kOffsetIp = 8;
inline constexpr std::uint32_t kOffsetArgs = 16;
inline constexpr std::size_t kSeccompDataSize = 64;

using Program = std::vector<SockFilter>;

/// Mirror of the kernel's struct seccomp_data.
struct SeccompData {
    std::uint32_t nr = 0;
    std::uint32_t arch = kAuditArchX86_64;
    std::uint64_t instruction_pointer = 0;
    std::array<std::uint64_t, 6> args{};

    std::array<std::uint8_t, kSeccompDataSize> bytes() const {
        std::array<std::uint8_t, kSeccompDataSize> out{};
        auto put = [&](std::size_t off, std::uint64_t v, std::size_t width) {
            for (std::size_t i = 0; i < width; ++i) out[off + i] = static_cast<std::uint8_t>(v >> (8 * i));
        };
        put(kOffsetNr, nr, 4);
        put(kOffsetArch, arch, 4);
        put(kOffsetIp, instruction_pointer, 8);
        for (std::size_t i = 0; i < 6; ++i) put(kOffsetArgs + 8 * i, args[i], 8);
        return out;
    }
};

enum class Action { Allow, KillThread, KillProcess, Errno, Other };

inline Action classify(std::uint32_t ret) {
    switch (ret & kActionMask) {
    case kRetAllow: return Action::Allow;
    case kRetKillThread: return Action::KillThread;
    case kRetKillProcess: return Action::KillProcess;
    case kRetErrno: return Action::Errno;
    default: return Action::Other;
    }
}

/// The more restrictive of two filter results, by the kernel's ordering of
/// action values (signed comparison of the action bits).
inline std::uint32_t most_restrictive(std::uint32_t a, std::uint32_t b) {
    auto sa = static_cast<std::int32_t>(a & kActionMask);
    auto sb = static_cast<std::int32_t>(b & kActionMask);
    return sb < sa ? b : a;
}

/// Denial mode for compiled filters.
struct DenyAction {
    std::uint32_t ret = kRetKillThread;

    static DenyAction kill_thread() { return {}; }
    static DenyAction errno_code(std::uint16_t e) { return {kRetErrno | e}; }
    bool operator==(const DenyAction&) const = default;
};

class BpfFault : public Error {
public:
    BpfFault(std::size_t pc, const std::string& what) : Error("bpf", "pc " + std::to_string(pc), what), pc_(pc) {}
    std::size_t pc() const noexcept { return pc_; }

private:
    std::size_t pc_;
};

class InvalidProgram : public Error {
public:
    InvalidProgram(std::size_t pc, const std::string& what) : Error("bpf-validate", "pc " + std::to_string(pc), what) {}
};

namespace detail {
inline bool known_opcode(std::uint16_t code) {
    switch (code) {
    case kLd | kW | kAbs:
    case kLd | kH | kAbs:
    case kLd | kB | kAbs:
    case kLd | kImm:
    case kLdx | kImm:
    case kLd | kMem:
    case kLdx | kMem:
    case kAlu | kAnd | kK:
    case kJmp | kJa:
    case kJmp | kJeq | kK:
    case kJmp | kJgt | kK:
    case kJmp | kJge | kK:
    case kJmp | kJset | kK:
    case kJmp | kJeq | kX:
    case kRet | kK:
    case kRet | kA:
    case kMisc | 0x00:  // tax
    case kMisc | 0x80:  // txa
        return true;
    default:
        return false;
    }
}
}  // namespace detail

/// Structural checks: size bounds, known opcodes, every jump lands in the
/// program, the final instruction is a return, scratch slots in range.
inline void validate(std::span<const SockFilter> prog) {
    if (prog.empty()) throw InvalidProgram(0, "empty program");
    if (prog.size() > kMaxInstructions) throw InvalidProgram(prog.size(), "more than 4096 instructions");
    for (std::size_t pc = 0; pc < prog.size(); ++pc) {
        const auto& ins = prog[pc];
        if (!detail::known_opcode(ins.code)) throw InvalidProgram(pc, "unknown opcode");
        std::uint16_t cls = ins.code & 0x07;
        if (cls == kJmp) {
            if ((ins.code & 0xf0) == kJa) {
                if (ins.k >= prog.size() - pc - 1) throw InvalidProgram(pc, "jump past end");
            } else if (pc + 1 + ins.jt >= prog.size() || pc + 1 + ins.jf >= prog.size()) {
                throw InvalidProgram(pc, "jump past end");
            }
        }
        if ((cls == kLd || cls == kLdx) && (ins.code & 0xe0) == kMem && ins.k >= 16)
            throw InvalidProgram(pc, "scratch slot out of range");
    }
    if ((prog.back().code & 0x07) != kRet) throw InvalidProgram(prog.size() - 1, "program must end in a return");
}

/// True when the program only uses the opcodes the compiler emits.
inline bool uses_compiler_subset(std::span<const SockFilter> prog) {
    return std::all_of(prog.begin(), prog.end(), [](const SockFilter& f) {
        return f.code == kLdWAbs || f.code == kJeqK || f.code == kJumpAlways || f.code == kRetK;
    });
}

/// Runs a validated program over `data` with standard cBPF semantics and
/// returns the 32-bit filter result. Out-of-range loads raise BpfFault.
inline std::uint32_t run(std::span<const SockFilter> prog, const SeccompData& data) {
    validate(prog);
    auto bytes = data.bytes();
    std::uint32_t a = 0, x = 0;
    std::array<std::uint32_t, 16> mem{};
    auto load = [&](std::size_t pc, std::uint32_t off, std::uint32_t width) -> std::uint32_t {
        if (static_cast<std::uint64_t>(off) + width > kSeccompDataSize || off % width != 0) throw BpfFault(pc, "load offset out of range");
        std::uint32_t v = 0;
        for (std::uint32_t i = 0; i < width; ++i) v |= static_cast<std::uint32_t>(bytes[off + i]) << (8 * i);
        return v;
    };
    for (std::size_t pc = 0; pc < prog.size(); ++pc) {
        const auto& ins = prog[pc];
        switch (ins.code) {
        case kLd | kW | kAbs: a = load(pc, ins.k, 4); break;
        case kLd | kH | kAbs: a = load(pc, ins.k, 2); break;
        case kLd | kB | kAbs: a = load(pc, ins.k, 1); break;
        case kLd | kImm: a = ins.k; break;
        case kLdx | kImm: x = ins.k; break;
        case kLd | kMem: a = mem[ins.k]; break;
        case kLdx | kMem: x = mem[ins.k]; break;
        case kAlu | kAnd | kK: a &= ins.k; break;
        case kJmp | kJa: pc += ins.k; break;
        case kJmp | kJeq | kK: pc += (a == ins.k) ? ins.jt : ins.jf; break;
        case kJmp | kJgt | kK: pc += (a > ins.k) ? ins.jt : ins.jf; break;
        case kJmp | kJge | kK: pc += (a >= ins.k) ? ins.jt : ins.jf; break;
        case kJmp | kJset | kK: pc += (a & ins.k) ? ins.jt : ins.jf; break;
        case kJmp | kJeq | kX: pc += (a == x) ? ins.jt : ins.jf; break;
        case kRet | kK: return ins.k;
        case kRet | kA: return a;
        case kMisc | 0x00: x = a; break;
        case kMisc | 0x80: a = x; break;
        default: throw BpfFault(pc, "unknown opcode");
        }
    }
    throw BpfFault(prog.size(), "fell off the end of the program");
}

inline Action eval(std::span<const SockFilter> prog, const SeccompData& data) { return classify(run(prog, data)); }

/// Compiles an allow-list:
///   ld arch; jeq AUDIT_ARCH_X86_64 else deny; ld nr;
///   jeq n_i -> allow (ascending); deny; allow
/// JEQ offsets are 8 bits, so the chain is cut into runs of at most 255
/// comparisons, each ending in a `ja` over a `ja allow` trampoline.
inline Program compile(const std::set<std::uint32_t>& allowed, DenyAction deny = {}) {
    constexpr std::size_t kRun = 255;
    Program prog;
    prog.push_back({kLdWAbs, 0, 0, kOffsetArch});
    prog.push_back({kJeqK, 1, 0, kAuditArchX86_64});
    prog.push_back({kRetK, 0, 0, deny.ret});
    prog.push_back({kLdWAbs, 0, 0, kOffsetNr});

    std::vector<std::uint32_t> nums(allowed.begin(), allowed.end());
    std::vector<std::size_t> trampolines;
    for (std::size_t start = 0; start < nums.size(); start += kRun) {
        std::size_t count = std::min(kRun, nums.size() - start);
        bool last = start + count == nums.size();
        // JEQ i jumps (count - i) ahead: in the final run that skips the
        // remaining comparisons and the deny return; otherwise it lands on the
        // trampoline that follows `ja +1`.
        for (std::size_t i = 0; i < count; ++i)
            prog.push_back({kJeqK, static_cast<std::uint8_t>(count - i), 0, nums[start + i]});
        if (!last) {
            prog.push_back({kJumpAlways, 0, 0, 1});
            trampolines.push_back(prog.size());
            prog.push_back({kJumpAlways, 0, 0, 0});
        }
    }
    prog.push_back({kRetK, 0, 0, deny.ret});
    std::size_t allow_pc = prog.size();
    prog.push_back({kRetK, 0, 0, kRetAllow});
    for (auto t : trampolines) prog[t].k = static_cast<std::uint32_t>(allow_pc - t - 1);
    if (prog.size() > kMaxInstructions) throw InvalidProgram(prog.size(), "allow-list too large");
    return prog;
}

/// Little-endian sock_filter records, 8 bytes each.
inline std::vector<std::uint8_t> to_blob(std::span<const SockFilter> prog) {
    std::vector<std::uint8_t> out;
    out.reserve(prog.size() * 8);
    for (const auto& f : prog) {
        out.push_back(static_cast<std::uint8_t>(f.code));
        out.push_back(static_cast<std::uint8_t>(f.code >> 8));
        out.push_back(f.jt);
        out.push_back(f.jf);
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(f.k >> (8 * i)));
    }
    return out;
}

inline Program from_blob(std::span<const std::uint8_t> blob) {
    if (blob.size() % 8 != 0) throw InvalidProgram(blob.size() / 8, "blob size not a multiple of 8");
    Program prog;
    for (std::size_t i = 0; i < blob.size(); i += 8) {
        SockFilter f;
        f.code = static_cast<std::uint16_t>(blob[i] | (blob[i + 1] << 8));
        f.jt = blob[i + 2];
        f.jf = blob[i + 3];
        f.k = static_cast<std::uint32_t>(blob[i + 4]) | (static_cast<std::uint32_t>(blob[i + 5]) << 8) |
              (static_cast<std::uint32_t>(blob[i + 6]) << 16) | (static_cast<std::uint32_t>(blob[i + 7]) << 24);
        prog.push_back(f);
    }
    return prog;
}

inline std::string disassemble(std::span<const SockFilter> prog) {
    std::string out;
    char line[96];
    for (std::size_t pc = 0; pc < prog.size(); ++pc) {
        const auto& f = prog[pc];
        switch (f.code) {
        case kLdWAbs: std::snprintf(line, sizeof line, "%04zu: ld  [%u]\n", pc, f.k); break;
        case kJeqK:
            std::snprintf(line, sizeof line, "%04zu: jeq #0x%x jt %04zu jf %04zu\n", pc, f.k, pc + 1 + f.jt, pc + 1 + f.jf);
            break;
        case kJumpAlways: std::snprintf(line, sizeof line, "%04zu: ja  %04zu\n", pc, pc + 1 + f.k); break;
        case kRetK: std::snprintf(line, sizeof line, "%04zu: ret #0x%08x\n", pc, f.k); break;
        default:
            std::snprintf(line, sizeof line, "%04zu: .insn code=0x%04x jt=%u jf=%u k=0x%x\n", pc, f.code, f.jt, f.jf, f.k);
            break;
        }
        out += line;
    }
    return out;
}

}  // namespace phaseguard::bpf
