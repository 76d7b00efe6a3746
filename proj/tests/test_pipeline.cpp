#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "phaseguard/pipeline.hpp"

using namespace phaseguard;
namespace fs = std::filesystem;

namespace {

const fs::path kDir{PHASEGUARD_CORPUS_DIR};
const fs::path kGolden{PHASEGUARD_GOLDEN_DIR};

json labels() { return read_json_file(kDir / "labels.json").at("servers"); }

AnalysisBundle run(const std::string& config) { return analyze(load_config(kDir / config)); }

std::string root_name(const AnalysisBundle& b, const TransitionPoint& tp) {
    ImageIndex index(b.image);
    auto loc = index.find(tp.thread_root);
    return loc ? b.image.function(loc->func).id : "?";
}

std::set<std::uint32_t> as_set(const json& j) { return j.get<std::set<std::uint32_t>>(); }

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

int cli(const std::string& args, const fs::path& out) {
    std::string cmd = std::string(PHASEGUARD_CLI) + " " + args + " > " + out.string() + " 2>/dev/null";
    int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

/// Compares against tests/golden/<name>; PHASEGUARD_UPDATE_GOLDEN=1 rewrites it.
void check_golden(const std::string& name, const std::string& actual) {
    auto path = kGolden / name;
    if (std::getenv("PHASEGUARD_UPDATE_GOLDEN")) {
        fs::create_directories(path.parent_path());
        std::ofstream(path, std::ios::binary) << actual;
    }
    ASSERT_TRUE(fs::exists(path)) << path;
    EXPECT_EQ(slurp(path), actual) << name;
}

}  // namespace

TEST(Pipeline, CorpusPartitionsMatchLabels) {
    auto all = labels();
    for (const auto& [name, lab] : all.items()) {
        SCOPED_TRACE(name);
        auto b = run(lab.at("config").get<std::string>());
        ASSERT_EQ(b.exit_code, 0) << b.error.value_or("");
        const auto& want = lab.at("partitions");
        ASSERT_EQ(b.partitions.size(), want.size());
        std::set<std::uint64_t> want_tps;
        for (const auto& tp : lab.at("transition_points")) want_tps.insert(tp.at("address").get<std::uint64_t>());
        for (const auto& p : b.partitions) {
            auto root = root_name(b, p.points.front());
            ASSERT_TRUE(want.contains(root)) << root;
            EXPECT_EQ(p.set.numbers, as_set(want.at(root))) << root;
            EXPECT_TRUE(p.filtered);
            EXPECT_TRUE(want_tps.contains(p.points.front().addr));
        }
    }
}

TEST(Pipeline, SensitiveTiersMatchLabels) {
    auto lab = labels().at("srv_basic");
    auto b = run("srv_basic.config.json");
    auto tiers = sensitive_report_json(sensitive_report(b.whole_set.numbers, b.main_set.numbers,
                                                        b.partitions.at(0).composed.final_set));
    EXPECT_EQ(tiers.size(), 17u);
    for (const auto& [name, want] : lab.at("sensitive").items()) {
        ASSERT_TRUE(tiers.contains(name)) << name;
        EXPECT_EQ(tiers[name], want) << name;
    }
}

TEST(Pipeline, MonotonicSets) {
    auto all = labels();
    for (const auto& [name, lab] : all.items()) {
        auto b = run(lab.at("config").get<std::string>());
        const auto& w = b.whole_set.numbers;
        const auto& m = b.main_set.numbers;
        EXPECT_TRUE(std::includes(w.begin(), w.end(), m.begin(), m.end())) << name;
        for (const auto& p : b.partitions)
            EXPECT_TRUE(std::includes(m.begin(), m.end(), p.set.numbers.begin(), p.set.numbers.end())) << name;
        if (lab.value("strict_monotonic", false)) {
            EXPECT_LT(m.size(), w.size()) << name;
            EXPECT_LT(b.partitions.at(0).set.numbers.size(), m.size()) << name;
        }
    }
}

TEST(Pipeline, ExecveUnionAndReduce) {
    auto lab = labels().at("srv_execve");
    auto u = run("srv_execve.config.json");
    ASSERT_EQ(u.exit_code, 0);
    EXPECT_EQ(u.partitions[0].composed.final_set, as_set(lab.at("final_union")));
    auto r = run("srv_execve.reduce.config.json");
    ASSERT_EQ(r.exit_code, 0);
    const auto& c = r.partitions[0].composed;
    EXPECT_EQ(c.final_set, as_set(lab.at("final_union")));
    ASSERT_EQ(c.exec_filters.size(), 1u);
    EXPECT_EQ(c.exec_filters[0].reduced, as_set(lab.at("exec").at("helper")));
    EXPECT_TRUE(r.files.contains("filter_0_exec_0.bin"));
    EXPECT_FALSE(u.files.contains("filter_0_exec_0.bin"));
}

TEST(Pipeline, UnresolvedSiteGivesExitTwo) {
    auto b = run("bad_unresolved.config.json");
    EXPECT_EQ(b.exit_code, 2);
    auto parts = json::parse(b.files.at("partitions.json"));
    const auto& problems = parts["partitions"][0]["problems"];
    ASSERT_FALSE(problems.empty());
    EXPECT_NE(problems[0].get<std::string>().find("unresolved syscall site"), std::string::npos);
    EXPECT_FALSE(b.files.contains("filter_0.bin"));

    auto cfg = load_config(kDir / "bad_unresolved.config.json");
    cfg.unresolved = UnresolvedPolicy::AllowAll;
    auto allow = analyze(cfg);
    EXPECT_EQ(allow.exit_code, 0);
    EXPECT_EQ(allow.partitions[0].composed.final_set.size(), 461u);
    EXPECT_FALSE(allow.warnings.empty());
}

TEST(Pipeline, StageErrorsReportStageAndEntity) {
    Config cfg;
    cfg.images = {kDir / "does_not_exist.pmir.json"};
    auto b = analyze(cfg);
    EXPECT_EQ(b.exit_code, 1);
    auto err = json::parse(b.files.at("error.json"));
    EXPECT_EQ(err["stage"], "io");
    EXPECT_NE(err["entity"].get<std::string>().find("does_not_exist"), std::string::npos);
    EXPECT_FALSE(err["message"].get<std::string>().empty());
    EXPECT_THROW(load_config(kDir / "missing.config.json"), Error);
}

TEST(Pipeline, ConfigParsing) {
    EXPECT_EQ(parse_deny("kill-thread"), bpf::DenyAction::kill_thread());
    EXPECT_EQ(parse_deny("errno:13"), bpf::DenyAction::errno_code(13));
    EXPECT_THROW(parse_deny("errno:x"), Error);
    EXPECT_THROW(parse_deny("ignore"), Error);
    EXPECT_EQ(parse_execve_mode("reduce"), ExecveMode::ReduceOnExec);
    EXPECT_THROW(parse_execve_mode("fork"), Error);
    EXPECT_EQ(parse_unresolved("allow-all"), UnresolvedPolicy::AllowAll);
}

TEST(Pipeline, DeterministicBundles) {
    auto a = run("srv_threads.config.json");
    auto b = run("srv_threads.config.json");
    EXPECT_EQ(a.files, b.files);
}

TEST(Pipeline, BundleWrittenToDisk) {
    auto dir = fs::temp_directory_path() / "phaseguard_test_bundle";
    fs::remove_all(dir);
    auto b = run("srv_basic.config.json");
    write_bundle(b, dir);
    for (const auto& [name, body] : b.files) EXPECT_EQ(slurp(dir / name), body) << name;
    auto hardened = load_image({dir / "hardened.pmir.json"});
    EXPECT_EQ(hardened.filters.size(), 1u);
}

TEST(Pipeline, FilterBlobMatchesFinalSet) {
    auto b = run("srv_basic.config.json");
    const auto& blob = b.files.at("filter_0.bin");
    auto prog = bpf::from_blob(std::span(reinterpret_cast<const std::uint8_t*>(blob.data()), blob.size()));
    const auto& fin = b.partitions[0].composed.final_set;
    for (std::uint32_t nr = 0; nr <= bpf::kMaxSyscall; ++nr)
        ASSERT_EQ(bpf::run(prog, bpf::SeccompData{nr}) == bpf::kRetAllow, fin.contains(nr)) << nr;
}

TEST(Golden, BasicServerReports) {
    auto b = run("srv_basic.config.json");
    for (const char* f : {"partitions.json", "report.json", "filter_0.txt", "transition_points.json", "loops.json"})
        check_golden(std::string("srv_basic/") + f, b.files.at(f));
}

TEST(Cli, ExitCodesAndTextRendering) {
    auto tmp = fs::temp_directory_path() / "phaseguard_test_cli";
    fs::create_directories(tmp);
    auto cfg = (kDir / "srv_basic.config.json").string();
    EXPECT_EQ(cli("analyze --config " + cfg + " --out " + (tmp / "bundle").string(), tmp / "stdout.json"), 0);
    EXPECT_TRUE(fs::exists(tmp / "bundle" / "filter_0.bin"));
    EXPECT_EQ(json::parse(slurp(tmp / "stdout.json")), json::parse(slurp(tmp / "bundle" / "report.json")));

    EXPECT_EQ(cli("analyze --config " + cfg + " --format text", tmp / "summary.txt"), 0);
    check_golden("srv_basic/summary.txt", slurp(tmp / "summary.txt"));

    EXPECT_EQ(cli("analyze --config " + (kDir / "bad_unresolved.config.json").string(), tmp / "bad.json"), 2);
    EXPECT_EQ(cli("analyze --config " + (kDir / "nope.config.json").string(), tmp / "err.json"), 1);
    EXPECT_EQ(cli("no-such-subcommand", tmp / "err2.json"), 1);
    EXPECT_EQ(cli("filter --allow read,write,exit_group", tmp / "filter.json"), 0);
    EXPECT_EQ(cli("report --config " + cfg + " --payloads " + (kDir / "payloads.json").string(), tmp / "rep.json"), 0);
    auto rep = json::parse(slurp(tmp / "rep.json"));
    EXPECT_FALSE(rep.empty());
}
