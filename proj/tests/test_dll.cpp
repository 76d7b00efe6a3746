#include <gtest/gtest.h>

#include "phaseguard/dll.hpp"
#include "phaseguard/sysgen.hpp"
#include "phaseguard/trace_io.hpp"
#include "support.hpp"

using namespace phaseguard;

namespace {

const std::filesystem::path kDir{PHASEGUARD_CORPUS_DIR};

ProgramImage load_server(const std::string& name) {
    return load_image({kDir / (name + ".pmir.json"), kDir / "libc.pmir.json"});
}

DynamicObservations observe(const ProgramImage& img, const std::string& name, const std::vector<CorpusLibrary>& corpus) {
    auto sc = scenarios_from_json(read_json_file(kDir / (name + ".scenario.json")));
    std::vector<ModuleUnit> mods;
    for (const auto& c : corpus) mods.push_back(c.module);
    return observations_from_trace(execute(img, sc.front(), {mods}));
}

std::set<std::uint32_t> loop_partition(const DlAnalysis& dl) {
    UseDefCache cache(dl.image);
    auto ctx = build_syscall_context(cache, dl.refined.refined);
    auto main = dl.image.main_function;
    return partition_syscalls(ctx, main, pgtest::addr_of(dl.image, "main", "loop")).numbers;
}

std::set<std::string> names(const std::set<std::string>& libs) {
    std::set<std::string> out;
    for (const auto& l : libs) out.insert(normalize_library_name(l));
    return out;
}

}  // namespace

TEST(Dll, LibraryNamesNormalize) {
    EXPECT_EQ(normalize_library_name("/usr/lib/libfoo.so.1"), "libfoo");
    EXPECT_EQ(normalize_library_name("libfoo.so"), "libfoo");
    EXPECT_EQ(normalize_library_name("libfoo"), "libfoo");
}

TEST(Dll, CorpusHoldsOnlyLibraries) {
    auto corpus = load_corpus(kDir);
    std::set<std::string> got;
    for (const auto& c : corpus) got.insert(c.module.name);
    EXPECT_TRUE(got.contains("libdlz_file.so"));
    EXPECT_TRUE(got.contains("libc.so.6"));
    for (const auto& n : got) EXPECT_TRUE(n.starts_with("lib")) << n;
    EXPECT_TRUE(load_corpus(kDir / "missing").empty());
}

TEST(Dll, HardcodedArgumentsResolveStatically) {
    auto img = load_server("srv_dl_static");
    auto dl = analyze_dl(img, load_corpus(kDir), {});
    ASSERT_EQ(dl.report.dlopen_sites.size(), 1u);
    EXPECT_EQ(dl.report.dlopen_sites[0].resolution.status, ResolutionStatus::Full);
    EXPECT_EQ(dl.report.dlsym_sites[0].resolution.status, ResolutionStatus::Full);
    EXPECT_EQ(dl.report.static_libraries, std::set<std::string>{"libmod_static.so"});
    EXPECT_EQ(dl.added_libraries, std::vector<std::string>{"libmod_static.so"});
    EXPECT_EQ(loop_partition(dl), (std::set<std::uint32_t>{3, 44, 45}));
}

TEST(Dll, ConfigReadNeedsObservations) {
    auto img = load_server("srv_dl_config");
    auto corpus = load_corpus(kDir);
    auto blind = analyze_dl(img, corpus, {});
    EXPECT_EQ(blind.report.dlopen_sites[0].resolution.status, ResolutionStatus::Unresolved);
    EXPECT_EQ(blind.report.dlsym_sites[0].resolution.status, ResolutionStatus::Unresolved);
    EXPECT_FALSE(heuristic_applies(blind.report));
    EXPECT_TRUE(blind.added_libraries.empty());

    auto obs = observe(img, "srv_dl_config", corpus);
    ASSERT_EQ(obs.size(), 2u);
    auto seen = analyze_dl(img, corpus, obs);
    EXPECT_TRUE(seen.report.dlopen_sites[0].observed);
    EXPECT_EQ(names(seen.report.observed_libraries), std::set<std::string>{"libmod_cfg"});
    EXPECT_EQ(loop_partition(seen), (std::set<std::uint32_t>{3, 5, 17}));
}

TEST(Dll, HeuristicFindsEveryExportingLibrary) {
    auto img = load_server("srv_dl_heur");
    auto corpus = load_corpus(kDir);
    auto dl = analyze_dl(img, corpus, {});
    EXPECT_TRUE(heuristic_applies(dl.report));
    EXPECT_EQ(dl.report.heuristic_libraries, (std::set<std::string>{"libdlz_file.so", "libdlz_ldap.so"}));
    EXPECT_EQ(loop_partition(dl), (std::set<std::uint32_t>{0, 3, 8, 41, 42}));
}

TEST(Dll, HeuristicNeedsFullDlsymAndOpenGap) {
    DlResolutionReport r;
    DlSiteReport open{1, {}, DlApi::Dlopen, {}, false, {}};
    DlSiteReport sym{2, {}, DlApi::Dlsym, {}, false, {}};
    sym.resolution.status = ResolutionStatus::Full;
    r.dlopen_sites = {open};
    r.dlsym_sites = {sym};
    EXPECT_TRUE(heuristic_applies(r));
    r.dlopen_sites[0].resolution.status = ResolutionStatus::Full;
    EXPECT_FALSE(heuristic_applies(r));
    r.dlopen_sites[0].resolution.status = ResolutionStatus::Partial;
    r.dlsym_sites[0].resolution.status = ResolutionStatus::Partial;
    EXPECT_FALSE(heuristic_applies(r));
    r.dlsym_sites.clear();
    EXPECT_FALSE(heuristic_applies(r));
}

TEST(Dll, HeuristicSearchSkipsUnrelated) {
    auto corpus = load_corpus(kDir);
    EXPECT_EQ(heuristic_library_search({"other_entry"}, corpus), std::set<std::string>{"libunrelated.so"});
    EXPECT_TRUE(heuristic_library_search({"nothing_exports_this"}, corpus).empty());
}

TEST(Dll, MissingCorpusLibraryIsAnError) {
    auto img = load_server("srv_dl_static");
    EXPECT_THROW(analyze_dl(img, {}, {}), Error);
}

TEST(Dll, ObservationsRoundTripJson) {
    DynamicObservations o{{10, DlApi::Dlopen, "liba.so"}, {20, DlApi::Execve, "/bin/x"}};
    EXPECT_EQ(observations_from_json(observations_to_json(o)), o);
    EXPECT_THROW(observations_from_json(pgtest::json::parse(R"({"observations":[{"callsite":1,"api":"mmap","argument":""}]})")),
                 Error);
}

TEST(Dll, ReportJsonSummaries) {
    auto img = load_server("srv_dl_heur");
    auto dl = analyze_dl(img, load_corpus(kDir), {});
    auto j = dl_report_json(dl.image, dl.report);
    EXPECT_EQ(j["dlopen"]["summary"]["unresolved"]["count"], 1);
    EXPECT_EQ(j["dlsym"]["summary"]["full"]["count"], 1);
    EXPECT_EQ(j["libraries"]["heuristic"].size(), 2u);
}
