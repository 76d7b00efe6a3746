#pragma once

// End-to-end analysis: loops, profiling run, transition points, refined call
// graph with runtime-loaded code, syscall partitions, filters and the
// hardened image. Output is a bundle of named files with deterministic
// contents.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "phaseguard/bpf.hpp"
#include "phaseguard/cfg_loops.hpp"
#include "phaseguard/dll.hpp"
#include "phaseguard/fcg.hpp"
#include "phaseguard/harden.hpp"
#include "phaseguard/pmir_io.hpp"
#include "phaseguard/reports.hpp"
#include "phaseguard/sysgen.hpp"
#include "phaseguard/trace_io.hpp"
#include "phaseguard/tracer.hpp"
#include "phaseguard/vfa.hpp"

namespace phaseguard {

namespace fs = std::filesystem;

enum class UnresolvedPolicy : std::uint8_t { Error, AllowAll };

struct Config {
    std::vector<fs::path> images;
    fs::path scenario;
    fs::path corpus;
    fs::path observations;
    ExecveMode execve_mode = ExecveMode::UnionPropagate;
    std::map<std::uint64_t, std::set<std::string>> execve_targets;
    UnresolvedPolicy unresolved = UnresolvedPolicy::Error;
    bpf::DenyAction deny{};
    fs::path out;
};

inline bpf::DenyAction parse_deny(std::string_view s) {
    if (s == "kill-thread") return bpf::DenyAction::kill_thread();
    if (s.starts_with("errno:")) {
        auto rest = std::string(s.substr(6));
        try {
            std::size_t used = 0;
            unsigned long v = std::stoul(rest, &used);
            if (used == rest.size() && v <= 0xffff) return bpf::DenyAction::errno_code(static_cast<std::uint16_t>(v));
        } catch (const std::exception&) {
        }
    }
    throw Error("config", std::string(s), "deny must be kill-thread or errno:<0-65535>");
}

inline std::string deny_name(const bpf::DenyAction& d) {
    if (d.ret == bpf::kRetKillThread) return "kill-thread";
    return "errno:" + std::to_string(d.ret & 0xffff);
}

inline ExecveMode parse_execve_mode(std::string_view s) {
    if (s == "union") return ExecveMode::UnionPropagate;
    if (s == "reduce") return ExecveMode::ReduceOnExec;
    throw Error("config", std::string(s), "execve mode must be union or reduce");
}

inline UnresolvedPolicy parse_unresolved(std::string_view s) {
    if (s == "error") return UnresolvedPolicy::Error;
    if (s == "allow-all") return UnresolvedPolicy::AllowAll;
    throw Error("config", std::string(s), "unresolved policy must be error or allow-all");
}

/// {"<callsite>": ["path", ...]}
inline std::map<std::uint64_t, std::set<std::string>> execve_targets_from_json(const json& j) {
    std::map<std::uint64_t, std::set<std::string>> out;
    try {
        for (const auto& [k, v] : j.items()) out[std::stoull(k)] = v.get<std::set<std::string>>();
    } catch (const std::exception& e) {
        throw Error("config", "execve targets", e.what());
    }
    return out;
}

/// Paths in the file are relative to its directory.
inline Config load_config(const fs::path& file) {
    json j = read_json_file(file);
    fs::path base = file.parent_path();
    auto rel = [&](const std::string& p) { return p.empty() ? fs::path{} : (fs::path(p).is_absolute() ? fs::path(p) : base / p); };
    Config c;
    try {
        for (const auto& p : j.at("images")) c.images.push_back(rel(p.get<std::string>()));
        c.scenario = rel(j.value("scenario", ""));
        c.corpus = rel(j.value("corpus", ""));
        c.observations = rel(j.value("observations", ""));
        c.execve_mode = parse_execve_mode(j.value("execve_mode", "union"));
        if (j.contains("execve_targets")) {
            const auto& t = j["execve_targets"];
            c.execve_targets = t.is_string() ? execve_targets_from_json(read_json_file(rel(t.get<std::string>())))
                                             : execve_targets_from_json(t);
        }
        c.unresolved = parse_unresolved(j.value("unresolved", "error"));
        c.deny = parse_deny(j.value("deny", "kill-thread"));
        c.out = rel(j.value("out", ""));
    } catch (const nlohmann::json::exception& e) {
        throw Error("config", file.string(), e.what());
    }
    for (const auto& p : c.images)
        if (!fs::exists(p)) throw Error("config", p.string(), "image file does not exist");
    for (const auto& p : {c.scenario, c.observations})
        if (!p.empty() && !fs::exists(p)) throw Error("config", p.string(), "file does not exist");
    return c;
}

struct PartitionResult {
    std::uint32_t id = 0;
    std::vector<TransitionPoint> points;  // threads sharing this loop
    SyscallSet set;
    ComposedSet composed;
    std::map<std::uint64_t, std::set<std::string>> exec_targets;
    bool filtered = false;
    std::vector<std::string> problems;
};

struct AnalysisBundle {
    std::map<std::string, std::string> files;  // relative name -> contents
    int exit_code = 0;
    std::vector<std::string> warnings;
    std::optional<std::string> error;

    // In-memory results for callers that want more than files.
    ProgramImage image;
    ProgramImage augmented;
    ProgramImage hardened;
    MainLoopSelection selection;
    std::vector<PartitionResult> partitions;
    RefineResult refine;
    SyscallSet whole_set;
    SyscallSet main_set;
    std::vector<CorpusLibrary> corpus;
};

inline std::string dump(const json& j) { return j.dump(2) + "\n"; }

inline std::vector<ModuleUnit> corpus_modules(const std::vector<CorpusLibrary>& corpus) {
    std::vector<ModuleUnit> out;
    for (const auto& c : corpus) out.push_back(c.module);
    return out;
}

/// Finds the PMIR image file for an execve path argument.
inline std::optional<fs::path> find_exec_image(const std::string& target, const fs::path& corpus) {
    std::vector<fs::path> cand{target};
    if (!corpus.empty()) {
        auto name = fs::path(target).filename().string();
        cand.push_back(corpus / target);
        cand.push_back(corpus / name);
        cand.push_back(corpus / (name + ".pmir.json"));
    }
    for (const auto& c : cand)
        if (!c.empty() && fs::is_regular_file(c)) return c;
    return std::nullopt;
}

/// Everything a separately loaded program may issue: all syscalls reachable
/// from its loader roots and main, with its own runtime-loaded code.
inline SyscallSet program_syscalls(const fs::path& file, const std::vector<CorpusLibrary>& corpus) {
    ProgramImage img = load_image({file});
    auto dl = analyze_dl(img, corpus, {});
    UseDefCache cache(dl.image);
    auto ctx = build_syscall_context(cache, dl.refined.refined);
    return reachable_from(ctx, dl.image.roots());
}

/// Runs the whole pipeline. Stage failures are reported in the bundle
/// (error.json, exit code 1); unresolved syscall sites or exec targets
/// give exit code 2 unless the allow-all policy is in effect.
inline AnalysisBundle analyze(const Config& cfg) {
    AnalysisBundle b;
    std::string stage = "load";
    try {
        b.image = load_image(cfg.images);
        fs::path corpus_dir = cfg.corpus;
        if (corpus_dir.empty() && !b.image.library_corpus_path.empty()) {
            corpus_dir = b.image.library_corpus_path;
            if (corpus_dir.is_relative() && !cfg.images.empty()) corpus_dir = cfg.images.front().parent_path() / corpus_dir;
        }
        b.corpus = load_corpus(corpus_dir, &b.warnings);

        stage = "loops";
        auto loops = all_loops(b.image);
        b.files["loops.json"] = dump(loops_to_json(b.image, loops));

        stage = "trace";
        std::vector<Scenario> scenarios{Scenario{}};
        if (!cfg.scenario.empty()) scenarios = scenarios_from_json(read_json_file(cfg.scenario));
        TracerOptions topt{corpus_modules(b.corpus)};
        std::vector<TraceLog> traces;
        for (const auto& sc : scenarios) traces.push_back(execute(b.image, sc, topt));

        stage = "partition";
        auto profile = profile_loops(traces.front(), top_level_loops(loops));
        b.selection = select_main_loops(profile);
        for (const auto& w : b.selection.warnings) b.warnings.push_back(w);
        b.files["profile.json"] = dump(profile_to_json(profile));
        b.files["transition_points.json"] = dump(transition_points_to_json(b.selection, &b.image));

        stage = "dll";
        DynamicObservations obs;
        for (const auto& t : traces) {
            auto o = observations_from_trace(t);
            obs.insert(obs.end(), o.begin(), o.end());
        }
        if (!cfg.observations.empty()) {
            auto o = observations_from_json(read_json_file(cfg.observations));
            obs.insert(obs.end(), o.begin(), o.end());
        }
        std::sort(obs.begin(), obs.end());
        obs.erase(std::unique(obs.begin(), obs.end()), obs.end());
        DlAnalysis dl = analyze_dl(b.image, b.corpus, obs);
        b.augmented = dl.image;
        b.refine = dl.refined;
        b.files["dll.json"] = dump(dl_report_json(dl.image, dl.report));

        stage = "fcg";
        json fcg_doc = fcg_to_json(dl.image, dl.refined.refined);
        fcg_doc["refinement"] = refinement_report_json(dl.image, dl.refined.report);
        b.files["fcg.json"] = dump(fcg_doc);

        stage = "syscalls";
        UseDefCache cache(dl.image);
        const Fcg& g = dl.refined.refined;
        auto ctx = build_syscall_context(cache, g);
        b.whole_set = whole_image_syscalls(cache, g);
        std::vector<FuncRef> main_roots{b.image.main_function};
        main_roots.insert(main_roots.end(), b.image.fini_functions.begin(), b.image.fini_functions.end());
        main_roots.insert(main_roots.end(), ctx.thread_starts.begin(), ctx.thread_starts.end());
        b.main_set = reachable_from(ctx, main_roots);

        std::map<std::pair<FuncRef, std::uint64_t>, std::size_t> by_tp;
        for (const auto& tp : b.selection.points) {
            auto key = std::make_pair(tp.func, tp.addr);
            auto it = by_tp.find(key);
            if (it == by_tp.end()) {
                it = by_tp.emplace(key, b.partitions.size()).first;
                PartitionResult p;
                p.id = static_cast<std::uint32_t>(b.partitions.size());
                b.partitions.push_back(std::move(p));
            }
            b.partitions[it->second].points.push_back(tp);
        }

        json parts = json::array();
        bool soundness_failure = false;
        for (auto& p : b.partitions) {
            const auto& tp = p.points.front();
            p.set = partition_syscalls(ctx, tp.func, tp.addr);
            for (auto site : p.set.unresolved_sites) {
                if (cfg.unresolved == UnresolvedPolicy::AllowAll) {
                    b.warnings.push_back("partition " + std::to_string(p.id) + ": unresolved site " +
                                         std::to_string(site) + "; allowing every syscall");
                    p.set.merge(all_syscalls(site));
                } else {
                    p.problems.push_back("unresolved syscall site " + std::to_string(site));
                }
            }
            std::map<std::string, std::set<std::uint32_t>> needs;
            for (auto site : p.set.execve_sites) {
                std::set<std::string> targets;
                auto vr = resolve_argument(cache, g, site, 0);
                if (vr.status == ResolutionStatus::Full) targets = vr.strings();
                for (const auto& o : obs)
                    if (o.api == DlApi::Execve && o.site == site) targets.insert(o.argument);
                if (auto it = cfg.execve_targets.find(site); it != cfg.execve_targets.end())
                    targets.insert(it->second.begin(), it->second.end());
                if (targets.empty()) {
                    p.problems.push_back("unresolved execve target at site " + std::to_string(site));
                    continue;
                }
                p.exec_targets[site] = targets;
                for (const auto& t : targets) {
                    auto file = find_exec_image(t, corpus_dir);
                    if (!file) {
                        p.problems.push_back("execve target '" + t + "' at site " + std::to_string(site) +
                                             " has no PMIR image");
                        continue;
                    }
                    needs[t] = program_syscalls(*file, b.corpus).numbers;
                }
            }
            p.composed = compose_execve(cfg.execve_mode, p.set.numbers, needs);
            if (!p.problems.empty()) soundness_failure = true;

            json pts = json::array();
            for (const auto& t : p.points)
                pts.push_back({{"thread", t.thread}, {"function", b.image.qualified_name(t.func)}, {"addr", t.addr}});
            json execs = json::array();
            for (const auto& e : p.composed.exec_filters)
                execs.push_back({{"path", e.path}, {"needed", e.needed}, {"reduced", e.reduced}});
            json exec_targets = json::object();
            for (const auto& [site, ts] : p.exec_targets) exec_targets[std::to_string(site)] = ts;
            parts.push_back({{"id", p.id}, {"transition_points", pts}, {"syscalls", syscall_set_json(p.set)},
                             {"final", p.composed.final_set}, {"final_names", syscall_names(p.composed.final_set)},
                             {"exec_targets", exec_targets}, {"exec_filters", execs}, {"problems", p.problems}});
        }
        b.files["partitions.json"] = dump({{"execve_mode", std::string(execve_mode_name(cfg.execve_mode))},
                                           {"unresolved_policy", cfg.unresolved == UnresolvedPolicy::AllowAll ? "allow-all" : "error"},
                                           {"partitions", parts}});

        stage = "filter";
        b.hardened = b.image;
        for (auto& p : b.partitions) {
            if (!p.problems.empty()) continue;
            auto prog = bpf::compile(p.composed.final_set, cfg.deny);
            bpf::validate(prog);
            std::string stem = "filter_" + std::to_string(p.id);
            auto blob = bpf::to_blob(prog);
            b.files[stem + ".bin"] = std::string(blob.begin(), blob.end());
            b.files[stem + ".txt"] = bpf::disassemble(prog);
            const auto& tp = p.points.front();
            insert_filter(b.hardened, tp.func, tp.addr, p.id, prog);
            p.filtered = true;
            for (std::size_t k = 0; k < p.composed.exec_filters.size(); ++k) {
                const auto& e = p.composed.exec_filters[k];
                if (cfg.execve_mode != ExecveMode::ReduceOnExec) break;
                auto ep = bpf::compile(e.reduced, cfg.deny);
                auto eb = bpf::to_blob(ep);
                std::string es = stem + "_exec_" + std::to_string(k);
                b.files[es + ".bin"] = std::string(eb.begin(), eb.end());
                b.files[es + ".txt"] = "# " + e.path + "\n" + bpf::disassemble(ep);
            }
        }
        validate_image(b.hardened);
        b.files["hardened.pmir.json"] = serialize_image(b.hardened);

        stage = "report";
        json tiers = json::array();
        for (const auto& p : b.partitions)
            tiers.push_back({{"partition", p.id},
                             {"sensitive", sensitive_report_json(sensitive_report(b.whole_set.numbers, b.main_set.numbers,
                                                                                  p.composed.final_set))}});
        json summary = {
            {"whole_image", {{"count", b.whole_set.numbers.size()}, {"numbers", b.whole_set.numbers}}},
            {"main", {{"count", b.main_set.numbers.size()}, {"numbers", b.main_set.numbers}}},
            {"partitions", json::array()},
            {"edges", {{"unrefined", dl.refined.report.unrefined_edges}, {"refined", dl.refined.report.refined_edges}}},
            {"deny", deny_name(cfg.deny)},
            {"sensitive_tiers", tiers},
            {"warnings", b.warnings}};
        for (const auto& p : b.partitions)
            summary["partitions"].push_back({{"id", p.id}, {"count", p.composed.final_set.size()}, {"filtered", p.filtered}});
        b.files["report.json"] = dump(summary);
        b.exit_code = soundness_failure ? 2 : 0;
    } catch (const Error& e) {
        b.error = e.what();
        b.files["error.json"] = dump({{"stage", e.stage()}, {"entity", e.entity()}, {"message", e.what()}});
        b.exit_code = 1;
    } catch (const std::exception& e) {
        b.error = e.what();
        b.files["error.json"] = dump({{"stage", stage}, {"entity", ""}, {"message", e.what()}});
        b.exit_code = 1;
    }
    return b;
}

inline void write_bundle(const AnalysisBundle& b, const fs::path& dir) {
    fs::create_directories(dir);
    for (const auto& [name, data] : b.files) {
        std::ofstream out(dir / name, std::ios::binary);
        if (!out) throw Error("io", (dir / name).string(), "cannot write file");
        out.write(data.data(), static_cast<std::streamsize>(data.size()));
    }
}

}  // namespace phaseguard
