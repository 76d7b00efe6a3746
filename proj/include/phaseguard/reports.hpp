#pragma once

// Security reports over syscall sets: payload blocking with and without
// interchangeable syscalls, and where each sensitive syscall gets filtered.

#include <algorithm>
#include <array>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "phaseguard/error.hpp"
#include "phaseguard/syscall_table.hpp"

namespace phaseguard {

/// Groups of interchangeable syscalls. The first name of each group is the
/// one payload descriptions usually use; `recv` and `send` are libc names
/// with no x86-64 number of their own.
inline const std::vector<std::vector<std::string_view>>& equivalence_groups() {
    static const std::vector<std::vector<std::string_view>> groups{
        {"execve", "execveat"},
        {"accept", "accept4"},
        {"dup", "dup2", "dup3"},
        {"eventfd", "eventfd2"},
        {"chmod", "fchmodat"},
        {"recv", "recvfrom", "read"},
        {"send", "sendto", "write"},
        {"open", "openat"},
        {"select", "pselect6", "epoll_wait", "epoll_wait_old", "poll", "ppoll", "epoll_pwait"},
    };
    return groups;
}

inline bool is_pseudo_syscall(std::string_view name) { return name == "recv" || name == "send"; }

/// `name` and every name sharing a group with it.
inline std::set<std::string> equivalents(std::string_view name) {
    std::set<std::string> out{std::string(name)};
    for (const auto& g : equivalence_groups())
        if (std::find(g.begin(), g.end(), name) != g.end())
            for (auto n : g) out.insert(std::string(n));
    return out;
}

inline constexpr std::array<std::string_view, 17> kSensitiveSyscalls{
    "accept", "accept4", "bind",     "chmod",  "clone",    "connect", "execve", "execveat", "fork",
    "listen", "mprotect", "ptrace", "recvfrom", "setgid", "setreuid", "setuid", "socket"};

inline void check_syscall_name(std::string_view name) {
    if (!syscall_number(name) && !is_pseudo_syscall(name))
        throw Error("report", std::string(name), "unknown syscall name");
}

inline bool name_allowed(const std::set<std::uint32_t>& allowed, std::string_view name) {
    auto nr = syscall_number(name);
    return nr && allowed.contains(*nr);
}

struct PayloadVerdict {
    std::string name;
    std::vector<std::string> requires_syscalls;
    bool stopped_with_equivalence = false;
    bool stopped_without_equivalence = false;
    std::vector<std::string> blocking;  // required names blocked together with all equivalents
};

/// A payload is stopped when one of its required syscalls is denied; with
/// equivalence the denial must also cover every interchangeable syscall.
inline PayloadVerdict evaluate_payload(const std::set<std::uint32_t>& allowed, const std::string& name,
                                       const std::vector<std::string>& required) {
    PayloadVerdict v{name, required, false, false, {}};
    for (const auto& r : required) {
        check_syscall_name(r);
        if (!name_allowed(allowed, r)) v.stopped_without_equivalence = true;
        auto eq = equivalents(r);
        bool all_denied = std::none_of(eq.begin(), eq.end(), [&](const std::string& n) { return name_allowed(allowed, n); });
        if (all_denied) {
            v.stopped_with_equivalence = true;
            v.blocking.push_back(r);
        }
    }
    return v;
}

struct Payload {
    std::string name;
    std::vector<std::string> required;
};

inline std::vector<Payload> payloads_from_json(const nlohmann::json& j) {
    std::vector<Payload> out;
    try {
        for (const auto& p : j.at("payloads"))
            out.push_back({p.at("name").get<std::string>(), p.at("syscalls").get<std::vector<std::string>>()});
    } catch (const nlohmann::json::exception& e) {
        throw Error("report", "payloads", e.what());
    }
    return out;
}

inline std::vector<PayloadVerdict> payload_report(const std::set<std::uint32_t>& allowed,
                                                  const std::vector<Payload>& payloads) {
    std::vector<PayloadVerdict> out;
    for (const auto& p : payloads) out.push_back(evaluate_payload(allowed, p.name, p.required));
    return out;
}

enum class FilterTier : std::uint8_t {
    NotFiltered,   // allowed in the serving phase
    MainLoop,      // needed before the main loop, denied once it starts
    Main,          // only needed outside main(), denied from main() on
    Absent,        // the program never issues it
};

inline std::string_view tier_name(FilterTier t) {
    switch (t) {
    case FilterTier::NotFiltered: return "not-filtered";
    case FilterTier::MainLoop: return "main-loop";
    case FilterTier::Main: return "main";
    case FilterTier::Absent: return "absent";
    }
    return "?";
}

struct SensitiveRow {
    std::string name;
    FilterTier tier = FilterTier::Absent;
};

inline std::vector<SensitiveRow> sensitive_report(const std::set<std::uint32_t>& whole,
                                                  const std::set<std::uint32_t>& main_set,
                                                  const std::set<std::uint32_t>& partition) {
    std::vector<SensitiveRow> out;
    for (auto name : kSensitiveSyscalls) {
        FilterTier t;
        if (name_allowed(partition, name)) t = FilterTier::NotFiltered;
        else if (name_allowed(main_set, name)) t = FilterTier::MainLoop;
        else if (name_allowed(whole, name)) t = FilterTier::Main;
        else t = FilterTier::Absent;
        out.push_back({std::string(name), t});
    }
    return out;
}

inline nlohmann::json payload_report_json(const std::vector<PayloadVerdict>& v) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& p : v)
        arr.push_back({{"name", p.name}, {"syscalls", p.requires_syscalls},
                       {"stopped_with_equivalence", p.stopped_with_equivalence},
                       {"stopped_without_equivalence", p.stopped_without_equivalence}, {"blocking", p.blocking}});
    return arr;
}

inline nlohmann::json sensitive_report_json(const std::vector<SensitiveRow>& rows) {
    nlohmann::json obj = nlohmann::json::object();
    for (const auto& r : rows) obj[r.name] = std::string(tier_name(r.tier));
    return obj;
}

inline std::vector<std::string> syscall_names(const std::set<std::uint32_t>& s) {
    std::vector<std::string> out;
    for (auto n : s) {
        auto name = syscall_name(n);
        out.push_back(name ? std::string(*name) : "sys_" + std::to_string(n));
    }
    return out;
}

}  // namespace phaseguard
