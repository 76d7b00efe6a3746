#pragma once

// Runtime-loaded code: which libraries dlopen may load and which symbols
// dlsym may return, from value flow, an export search over a library
// corpus, and recorded observations.

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "phaseguard/pmir_io.hpp"
#include "phaseguard/tracer.hpp"
#include "phaseguard/vfa.hpp"

namespace phaseguard {

enum class DlApi : std::uint8_t { Dlopen, Dlsym, Execve };

inline std::string_view dl_api_name(DlApi a) {
    switch (a) {
    case DlApi::Dlopen: return "dlopen";
    case DlApi::Dlsym: return "dlsym";
    case DlApi::Execve: return "execve";
    }
    return "?";
}

inline DlApi parse_dl_api(std::string_view s) {
    if (s == "dlopen") return DlApi::Dlopen;
    if (s == "dlsym") return DlApi::Dlsym;
    if (s == "execve") return DlApi::Execve;
    throw Error("dll", std::string(s), "unknown observation api");
}

struct Observation {
    std::uint64_t site = 0;
    DlApi api = DlApi::Dlopen;
    std::string argument;
    auto operator<=>(const Observation&) const = default;
};

using DynamicObservations = std::vector<Observation>;

inline DynamicObservations observations_from_trace(const TraceLog& log) {
    std::set<Observation> out;
    for (const auto& th : log.threads)
        for (const auto& ev : th.events) {
            if (ev.kind == EventKind::Dlopen) out.insert({ev.address, DlApi::Dlopen, ev.text});
            else if (ev.kind == EventKind::Dlsym) out.insert({ev.address, DlApi::Dlsym, ev.text});
            else if (ev.kind == EventKind::Execve) out.insert({ev.address, DlApi::Execve, ev.text});
        }
    return {out.begin(), out.end()};
}

inline nlohmann::json observations_to_json(const DynamicObservations& obs) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& o : obs)
        arr.push_back({{"callsite", o.site}, {"api", std::string(dl_api_name(o.api))}, {"argument", o.argument}});
    return {{"observations", arr}};
}

inline DynamicObservations observations_from_json(const nlohmann::json& j) {
    DynamicObservations out;
    try {
        for (const auto& o : j.at("observations"))
            out.push_back({o.at("callsite").get<std::uint64_t>(), parse_dl_api(o.at("api").get<std::string>()),
                           o.at("argument").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
        throw Error("dll", "observations", e.what());
    }
    return out;
}

struct DlSiteReport {
    std::uint64_t site = 0;
    FuncRef caller{};
    DlApi api = DlApi::Dlopen;
    ValueResolution resolution;
    bool observed = false;
    std::set<std::string> observed_values;
};

struct DlResolutionReport {
    std::vector<DlSiteReport> dlopen_sites;
    std::vector<DlSiteReport> dlsym_sites;
    std::set<std::string> static_libraries;
    std::set<std::string> heuristic_libraries;
    std::set<std::string> observed_libraries;
    std::map<std::uint64_t, std::set<std::string>> symbols;  // per dlsym site
    std::vector<std::string> warnings;
};

/// Backward-resolves the filename (dlopen, argument 0) and symbol (dlsym,
/// argument 1) at every call in the graph.
inline DlResolutionReport static_resolve_dl(UseDefCache& cache, const Fcg& fcg) {
    DlResolutionReport rep;
    for (auto f : fcg.nodes)
        for (const auto& bb : cache.image().function(f).blocks)
            for (const auto& in : bb.instructions) {
                if (in.op != Op::CallPlt) continue;
                if (in.text == intrinsic::kDlopen) {
                    DlSiteReport s{in.address, f, DlApi::Dlopen, resolve_argument(cache, fcg, in.address, 0), false, {}};
                    for (const auto& v : s.resolution.strings()) rep.static_libraries.insert(v);
                    rep.dlopen_sites.push_back(std::move(s));
                } else if (in.text == intrinsic::kDlsym) {
                    DlSiteReport s{in.address, f, DlApi::Dlsym, resolve_argument(cache, fcg, in.address, 1), false, {}};
                    rep.symbols[in.address] = s.resolution.strings();
                    rep.dlsym_sites.push_back(std::move(s));
                }
            }
    auto by_site = [](const DlSiteReport& a, const DlSiteReport& b) { return a.site < b.site; };
    std::sort(rep.dlopen_sites.begin(), rep.dlopen_sites.end(), by_site);
    std::sort(rep.dlsym_sites.begin(), rep.dlsym_sites.end(), by_site);
    return rep;
}

struct CorpusLibrary {
    std::filesystem::path path;
    ModuleUnit module;
};

/// Library modules of a corpus directory (files `*.pmir.json` whose module
/// kind is library), sorted by path. Unreadable entries become warnings.
inline std::vector<CorpusLibrary> load_corpus(const std::filesystem::path& dir, std::vector<std::string>* warnings = nullptr) {
    std::vector<CorpusLibrary> out;
    if (dir.empty() || !std::filesystem::is_directory(dir)) return out;
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        auto name = e.path().filename().string();
        if (e.is_regular_file() && name.size() > 10 && name.ends_with(".pmir.json")) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& p : files) {
        try {
            auto j = read_json_file(p);
            if (!j.contains("module")) continue;
            if (j["module"].value("kind", "") != "shared-library") continue;
            out.push_back({p, load_module_file(p)});
        } catch (const std::exception& e) {
            if (warnings) warnings->push_back("skipped corpus entry " + p.string() + ": " + e.what());
        }
    }
    return out;
}

/// Names of every corpus library exporting at least one of `symbols`.
inline std::set<std::string> heuristic_library_search(const std::set<std::string>& symbols,
                                                      const std::vector<CorpusLibrary>& corpus) {
    std::set<std::string> out;
    for (const auto& lib : corpus)
        for (const auto& s : symbols)
            if (lib.module.exports.contains(s)) {
                out.insert(lib.module.name);
                break;
            }
    return out;
}

inline bool heuristic_applies(const DlResolutionReport& rep) {
    bool all_sym = std::all_of(rep.dlsym_sites.begin(), rep.dlsym_sites.end(),
                               [](const DlSiteReport& s) { return s.resolution.status == ResolutionStatus::Full; });
    bool open_gap = std::any_of(rep.dlopen_sites.begin(), rep.dlopen_sites.end(),
                                [](const DlSiteReport& s) { return s.resolution.status != ResolutionStatus::Full; });
    return !rep.dlsym_sites.empty() && all_sym && open_gap;
}

/// Marks observed values on the report's sites.
inline void apply_observations(DlResolutionReport& rep, const DynamicObservations& obs) {
    for (const auto& o : obs) {
        auto mark = [&](std::vector<DlSiteReport>& sites) {
            for (auto& s : sites)
                if (s.site == o.site) {
                    s.observed = true;
                    s.observed_values.insert(o.argument);
                }
        };
        if (o.api == DlApi::Dlopen) {
            mark(rep.dlopen_sites);
            rep.observed_libraries.insert(o.argument);
        } else if (o.api == DlApi::Dlsym) {
            mark(rep.dlsym_sites);
        }
    }
}

struct Incorporation {
    ProgramImage image;
    std::vector<std::string> added_libraries;
    std::vector<DlsymTake> dlsym_takes;
    std::map<std::uint64_t, std::set<FuncRef>> dlsym_results;
};

inline std::optional<std::uint32_t> find_module_by_library_name(const ProgramImage& image, const std::string& lib) {
    auto want = normalize_library_name(lib);
    for (std::uint32_t i = 0; i < image.modules.size(); ++i)
        if (normalize_library_name(image.modules[i].name) == want) return i;
    return std::nullopt;
}

/// Adds every statically resolved, heuristically found, or observed library
/// to the image and marks each function a dlsym site may return as taken at
/// that site. Symbols are looked up in every module, without pairing
/// handles to dlopen calls.
inline Incorporation incorporate(const ProgramImage& image, const DlResolutionReport& rep,
                                 const std::vector<CorpusLibrary>& corpus) {
    Incorporation out{image, {}, {}, {}};
    std::set<std::string> wanted(rep.static_libraries);
    wanted.insert(rep.heuristic_libraries.begin(), rep.heuristic_libraries.end());
    wanted.insert(rep.observed_libraries.begin(), rep.observed_libraries.end());
    std::vector<std::string> missing;
    for (const auto& lib : wanted) {
        if (find_module_by_library_name(out.image, lib)) continue;
        auto want = normalize_library_name(lib);
        auto it = std::find_if(corpus.begin(), corpus.end(), [&](const CorpusLibrary& c) {
            return normalize_library_name(c.module.name) == want;
        });
        if (it == corpus.end()) {
            missing.push_back(lib);
            continue;
        }
        append_library(out.image, it->module);
        out.added_libraries.push_back(it->module.name);
    }
    if (!missing.empty()) {
        std::string list;
        for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
        throw Error("dll", list, "library not found in corpus");
    }
    for (const auto& s : rep.dlsym_sites) {
        std::set<std::string> syms = s.resolution.strings();
        syms.insert(s.observed_values.begin(), s.observed_values.end());
        std::set<FuncRef> fs;
        for (const auto& sym : syms)
            for (std::uint32_t mi = 0; mi < out.image.modules.size(); ++mi)
                if (auto e = out.image.modules[mi].exports.find(sym); e != out.image.modules[mi].exports.end())
                    fs.insert(FuncRef{mi, e->second});
        for (auto f : fs) out.dlsym_takes.push_back({s.site, f});
        if (s.resolution.status == ResolutionStatus::Full) out.dlsym_results[s.site] = fs;
    }
    return out;
}

struct DlAnalysis {
    ProgramImage image;
    DlResolutionReport report;
    RefineResult refined;
    std::vector<std::string> added_libraries;
    RefineOptions options;
};

/// Resolve, incorporate, re-refine; repeated until no new library appears
/// (added libraries may themselves call dlopen).
inline DlAnalysis analyze_dl(const ProgramImage& image, const std::vector<CorpusLibrary>& corpus,
                             const DynamicObservations& obs, RefineOptions base = {}) {
    DlAnalysis out{image, {}, refine_fcg(image, base), {}, base};
    for (int round = 0; round < 16; ++round) {
        UseDefCache cache(out.image);
        DlResolutionReport rep = static_resolve_dl(cache, out.refined.refined);
        if (heuristic_applies(rep)) {
            std::set<std::string> syms;
            for (const auto& [site, ss] : rep.symbols) syms.insert(ss.begin(), ss.end());
            rep.heuristic_libraries = heuristic_library_search(syms, corpus);
        }
        apply_observations(rep, obs);
        // Libraries added in earlier rounds stay part of the request.
        rep.static_libraries.insert(out.report.static_libraries.begin(), out.report.static_libraries.end());
        rep.heuristic_libraries.insert(out.report.heuristic_libraries.begin(), out.report.heuristic_libraries.end());
        Incorporation inc = incorporate(image, rep, corpus);
        RefineOptions opt = base;
        opt.dlsym_takes = inc.dlsym_takes;
        opt.dlsym_results = inc.dlsym_results;
        bool same = inc.added_libraries == out.added_libraries && opt.dlsym_takes == out.options.dlsym_takes &&
                    opt.dlsym_results == out.options.dlsym_results;
        out.report = std::move(rep);
        if (same) break;
        out.image = std::move(inc.image);
        out.added_libraries = std::move(inc.added_libraries);
        out.options = opt;
        out.refined = refine_fcg(out.image, opt);
    }
    return out;
}

inline nlohmann::json dl_report_json(const ProgramImage& image, const DlResolutionReport& rep) {
    using nlohmann::json;
    auto sites = [&](const std::vector<DlSiteReport>& v) {
        json arr = json::array();
        for (const auto& s : v)
            arr.push_back({{"site", s.site}, {"caller", image.qualified_name(s.caller)},
                           {"classification", std::string(status_name(s.resolution.status))},
                           {"observed", s.observed}, {"observed_values", s.observed_values},
                           {"resolution", value_resolution_json(image, s.resolution)}});
        return arr;
    };
    auto summary = [](const std::vector<DlSiteReport>& v) {
        json out = json::object();
        for (auto st : {ResolutionStatus::Full, ResolutionStatus::Partial, ResolutionStatus::Unresolved}) {
            std::size_t n = 0, obs = 0;
            for (const auto& s : v)
                if (s.resolution.status == st) {
                    ++n;
                    if (s.observed) ++obs;
                }
            out[std::string(status_name(st))] = {{"count", n}, {"observed", obs}};
        }
        return out;
    };
    json syms = json::object();
    for (const auto& [site, ss] : rep.symbols) syms[std::to_string(site)] = ss;
    return {{"dlopen", {{"summary", summary(rep.dlopen_sites)}, {"sites", sites(rep.dlopen_sites)}}},
            {"dlsym", {{"summary", summary(rep.dlsym_sites)}, {"sites", sites(rep.dlsym_sites)}}},
            {"libraries", {{"static", rep.static_libraries}, {"heuristic", rep.heuristic_libraries},
                           {"observed", rep.observed_libraries}}},
            {"symbols", syms},
            {"warnings", rep.warnings}};
}

}  // namespace phaseguard
