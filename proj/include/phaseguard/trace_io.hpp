#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "phaseguard/cfg_loops.hpp"
#include "phaseguard/error.hpp"
#include "phaseguard/tracer.hpp"

namespace phaseguard {

using nlohmann::json;

inline json branch_script_to_json(const BranchScript& s) {
    return {{"decisions", s.decisions}, {"default_taken", s.default_taken}};
}

inline BranchScript branch_script_from_json(const json& j) {
    BranchScript s;
    s.decisions = j.value("decisions", std::vector<bool>{});
    s.default_taken = j.value("default_taken", false);
    return s;
}

inline json scenario_to_json(const Scenario& sc) {
    json threads = json::object(), stubs = json::object();
    for (const auto& [id, s] : sc.threads) threads[std::to_string(id)] = branch_script_to_json(s);
    for (const auto& [site, arg] : sc.stub_args) stubs[std::to_string(site)] = arg;
    return {{"budget", sc.budget}, {"default", branch_script_to_json(sc.default_script)}, {"threads", threads},
            {"stub_args", stubs}};
}

inline Scenario scenario_from_json(const json& j) {
    try {
        Scenario sc;
        sc.budget = j.value("budget", std::uint64_t{10000});
        if (j.contains("default")) sc.default_script = branch_script_from_json(j["default"]);
        if (j.contains("threads"))
            for (const auto& [k, v] : j["threads"].items())
                sc.threads[static_cast<std::uint32_t>(std::stoul(k))] = branch_script_from_json(v);
        if (j.contains("stub_args"))
            for (const auto& [k, v] : j["stub_args"].items()) sc.stub_args[std::stoull(k)] = v.get<std::string>();
        return sc;
    } catch (const std::exception& e) {
        throw Error("trace", "scenario", e.what());
    }
}

/// A scenario file holds one scenario or {"scenarios": [...]}.
inline std::vector<Scenario> scenarios_from_json(const json& j) {
    std::vector<Scenario> out;
    if (j.contains("scenarios"))
        for (const auto& s : j["scenarios"]) out.push_back(scenario_from_json(s));
    else
        out.push_back(scenario_from_json(j));
    return out;
}

inline EventKind parse_event_kind(std::string_view s) {
    for (auto k : {EventKind::Syscall, EventKind::Dlopen, EventKind::Dlsym, EventKind::Execve, EventKind::ThreadSpawn,
                   EventKind::FilterInstall, EventKind::FilterKill, EventKind::FilterErrno, EventKind::Trap})
        if (event_kind_name(k) == s) return k;
    throw Error("trace", std::string(s), "unknown event kind");
}

inline json trace_to_json(const TraceLog& log) {
    json threads = json::array();
    for (const auto& th : log.threads) {
        json events = json::array(), edges = json::array(), steps = json::array();
        for (const auto& e : th.events)
            events.push_back({{"time", e.time}, {"address", e.address}, {"kind", std::string(event_kind_name(e.kind))},
                              {"number", e.number}, {"text", e.text}});
        for (const auto& [site, callee] : th.call_edges) edges.push_back({site, callee});
        for (std::size_t i = 0; i < th.addresses.size(); ++i) steps.push_back({th.addresses[i], th.times[i]});
        threads.push_back({{"id", th.id}, {"root", th.root}, {"end_reason", th.end_reason}, {"events", events},
                           {"call_edges", edges}, {"steps", steps}});
    }
    return {{"truncated", log.truncated}, {"threads", threads}};
}

inline TraceLog trace_from_json(const json& j) {
    try {
        TraceLog log;
        log.truncated = j.at("truncated").get<bool>();
        for (const auto& t : j.at("threads")) {
            ThreadTrace th;
            th.id = t.at("id").get<std::uint32_t>();
            th.root = t.at("root").get<std::uint64_t>();
            th.end_reason = t.value("end_reason", "");
            for (const auto& e : t.at("events"))
                th.events.push_back({e.at("time").get<std::uint64_t>(), e.at("address").get<std::uint64_t>(),
                                     parse_event_kind(e.at("kind").get<std::string>()),
                                     e.at("number").get<std::int64_t>(), e.value("text", "")});
            for (const auto& ce : t.at("call_edges")) th.call_edges.emplace(ce.at(0).get<std::uint64_t>(), ce.at(1).get<std::uint64_t>());
            for (const auto& s : t.at("steps")) {
                th.addresses.push_back(s.at(0).get<std::uint64_t>());
                th.times.push_back(s.at(1).get<std::uint64_t>());
            }
            log.threads.push_back(std::move(th));
        }
        return log;
    } catch (const nlohmann::json::exception& e) {
        throw Error("trace", "trace log", e.what());
    }
}

inline json loops_to_json(const ProgramImage& image, const std::map<FuncRef, FunctionLoops>& all) {
    json funcs = json::array();
    for (const auto& [f, fl] : all) {
        if (fl.loops.empty() && fl.irreducible_edges.empty()) continue;
        const auto& fn = image.function(f);
        auto ids = [&](const std::vector<std::uint32_t>& bs) {
            json a = json::array();
            for (auto b : bs) a.push_back(fn.blocks[b].id);
            return a;
        };
        json loops = json::array();
        for (const auto& l : fl.loops)
            loops.push_back({{"header", fn.blocks[l.header].id}, {"entry_address", l.entry_address},
                             {"exit_addresses", l.exit_addresses}, {"body", ids(l.body)},
                             {"back_edge_sources", ids(l.back_edge_sources)}, {"top_level", l.top_level}});
        json irr = json::array();
        for (auto [a, b] : fl.irreducible_edges) irr.push_back({fn.blocks[a].id, fn.blocks[b].id});
        funcs.push_back({{"function", image.qualified_name(f)}, {"ref", {f.module, f.function}}, {"loops", loops},
                         {"irreducible_edges", irr}, {"unreachable", ids(fl.unreachable)}});
    }
    return {{"functions", funcs}};
}

/// Top-level loops from a loops document (enough to profile a trace).
inline std::vector<LoopSite> loop_sites_from_json(const json& j) {
    std::vector<LoopSite> out;
    try {
        for (const auto& f : j.at("functions")) {
            FuncRef ref{f.at("ref").at(0).get<std::uint32_t>(), f.at("ref").at(1).get<std::uint32_t>()};
            for (const auto& l : f.at("loops")) {
                if (!l.at("top_level").get<bool>()) continue;
                Loop loop;
                loop.entry_address = l.at("entry_address").get<std::uint64_t>();
                loop.exit_addresses = l.at("exit_addresses").get<std::set<std::uint64_t>>();
                out.push_back({ref, loop});
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error("partition", "loops document", e.what());
    }
    return out;
}

inline json profile_to_json(const LoopProfile& p) {
    json threads = json::array();
    for (const auto& th : p.threads) {
        json loops = json::array();
        for (const auto& [addr, st] : th.loops)
            loops.push_back({{"entry_address", addr}, {"entries", st.entries}, {"iterations", st.iterations},
                             {"duration", st.duration}, {"finalized", st.finalized}});
        threads.push_back({{"thread", th.thread}, {"root", th.root}, {"trace_duration", th.trace_duration}, {"loops", loops}});
    }
    return threads;
}

inline json transition_points_to_json(const MainLoopSelection& sel, const ProgramImage* image = nullptr) {
    json pts = json::array();
    for (const auto& tp : sel.points) {
        json p = {{"thread", tp.thread}, {"thread_root", tp.thread_root}, {"ref", {tp.func.module, tp.func.function}},
                  {"addr", tp.addr}};
        if (image) p["function"] = image->qualified_name(tp.func);
        pts.push_back(std::move(p));
    }
    return {{"transition_points", pts}, {"warnings", sel.warnings}};
}

inline std::vector<TransitionPoint> transition_points_from_json(const json& j) {
    std::vector<TransitionPoint> out;
    try {
        for (const auto& p : j.at("transition_points"))
            out.push_back({p.at("thread").get<std::uint32_t>(), p.at("thread_root").get<std::uint64_t>(),
                           FuncRef{p.at("ref").at(0).get<std::uint32_t>(), p.at("ref").at(1).get<std::uint32_t>()},
                           p.at("addr").get<std::uint64_t>()});
    } catch (const nlohmann::json::exception& e) {
        throw Error("partition", "transition points", e.what());
    }
    return out;
}

}  // namespace phaseguard
