// phaseguard command-line driver.

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "phaseguard/pipeline.hpp"

namespace pg = phaseguard;
using pg::json;
namespace fs = std::filesystem;

namespace {

struct Globals {
    std::string config;
    std::string out;
    std::string format = "json";
};

void emit(const Globals& g, const std::string& name, const std::string& json_text, const std::string& text) {
    const std::string& body = g.format == "text" ? text : json_text;
    if (!g.out.empty()) {
        fs::create_directories(g.out);
        std::ofstream f(fs::path(g.out) / name, std::ios::binary);
        if (!f) throw pg::Error("io", (fs::path(g.out) / name).string(), "cannot write file");
        f << body;
    } else {
        std::cout << body;
    }
}

std::string set_line(const std::set<std::uint32_t>& s) {
    std::ostringstream os;
    bool first = true;
    for (const auto& n : pg::syscall_names(s)) {
        os << (first ? "" : " ") << n;
        first = false;
    }
    return os.str();
}

std::vector<fs::path> to_paths(const std::vector<std::string>& v) { return {v.begin(), v.end()}; }

pg::Config config_from(const Globals& g) {
    if (g.config.empty()) throw pg::Error("config", "--config", "this subcommand needs a config file");
    pg::Config c = pg::load_config(g.config);
    if (!g.out.empty()) c.out = g.out;
    return c;
}

pg::AnalysisBundle run_pipeline(const pg::Config& c) {
    auto b = pg::analyze(c);
    for (const auto& w : b.warnings) std::cerr << "warning: " << w << "\n";
    if (b.error) std::cerr << "error: " << *b.error << "\n";
    return b;
}

std::string partitions_text(const pg::AnalysisBundle& b) {
    std::ostringstream os;
    for (const auto& p : b.partitions) {
        os << "partition " << p.id << "\n";
        for (const auto& tp : p.points)
            os << "  thread " << tp.thread << " at " << b.image.qualified_name(tp.func) << " 0x" << std::hex << tp.addr
               << std::dec << "\n";
        os << "  syscalls (" << p.set.numbers.size() << "): " << set_line(p.set.numbers) << "\n";
        if (p.composed.final_set != p.set.numbers)
            os << "  with exec targets (" << p.composed.final_set.size() << "): " << set_line(p.composed.final_set) << "\n";
        for (const auto& pr : p.problems) os << "  problem: " << pr << "\n";
    }
    return os.str();
}

std::string summary_text(const pg::AnalysisBundle& b) {
    std::ostringstream os;
    os << std::left << std::setw(14) << "whole image" << b.whole_set.numbers.size() << "\n";
    os << std::setw(14) << "main()" << b.main_set.numbers.size() << "\n";
    for (const auto& p : b.partitions)
        os << std::setw(14) << ("partition " + std::to_string(p.id)) << p.composed.final_set.size()
           << (p.filtered ? "" : "  (no filter)") << "\n";
    os << std::setw(14) << "fcg edges" << b.refine.report.unrefined_edges << " -> " << b.refine.report.refined_edges << "\n";
    for (const auto& w : b.warnings) os << "warning: " << w << "\n";
    if (b.error) os << "error: " << *b.error << "\n";
    return os.str();
}

int finish(const pg::AnalysisBundle& b) {
    if (b.error) {
        auto it = b.files.find("error.json");
        if (it != b.files.end()) std::cerr << it->second;
    }
    return b.exit_code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Temporal system-call filtering for PMIR programs"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--config", g.config, "Pipeline config file");
    app.add_option("--out", g.out, "Output directory");
    app.add_option("--format", g.format, "Output format")->check(CLI::IsMember({"json", "text"}));

    // analyze
    auto* analyze = app.add_subcommand("analyze", "Run the whole pipeline and write the output bundle");

    // loops
    std::vector<std::string> loop_images;
    auto* loops = app.add_subcommand("loops", "Natural loops per function");
    loops->add_option("images", loop_images, "PMIR files")->required();

    // trace
    std::vector<std::string> trace_images;
    std::string trace_scenario, trace_corpus;
    std::uint64_t trace_budget = 0;
    auto* trace = app.add_subcommand("trace", "Execute a scenario and print the trace log");
    trace->add_option("images", trace_images, "PMIR files")->required();
    trace->add_option("--scenario", trace_scenario, "Scenario JSON");
    trace->add_option("--budget", trace_budget, "Instruction budget (overrides the scenario)");
    trace->add_option("--corpus", trace_corpus, "Directory of loadable libraries");

    // partition
    std::string part_trace, part_loops;
    std::vector<std::string> part_images;
    auto* partition = app.add_subcommand("partition", "Select main loops from a trace");
    partition->add_option("--trace", part_trace, "TraceLog JSON")->required();
    partition->add_option("--loops", part_loops, "Loops JSON")->required();
    partition->add_option("images", part_images, "PMIR files (for function names)");

    // fcg
    std::vector<std::string> fcg_images;
    std::string fcg_corpus, fcg_obs;
    bool fcg_refined = false, fcg_dot = false;
    auto* fcg = app.add_subcommand("fcg", "Function call graph");
    fcg->add_option("images", fcg_images, "PMIR files")->required();
    fcg->add_flag("--refined", fcg_refined, "Apply value-flow refinement");
    fcg->add_flag("--dot", fcg_dot, "Emit Graphviz DOT");
    fcg->add_option("--corpus", fcg_corpus, "Library corpus (with --refined)");
    fcg->add_option("--observations", fcg_obs, "Dynamic observations (with --refined)");

    // dll
    std::vector<std::string> dll_images;
    std::string dll_corpus, dll_obs;
    auto* dll = app.add_subcommand("dll", "Resolve dlopen/dlsym arguments");
    dll->add_option("images", dll_images, "PMIR files")->required();
    dll->add_option("--corpus", dll_corpus, "Library corpus directory");
    dll->add_option("--observations", dll_obs, "Dynamic observations JSON");

    // syscalls
    std::string sc_mode, sc_targets, sc_unresolved;
    auto* syscalls = app.add_subcommand("syscalls", "Per-partition syscall sets");
    syscalls->add_option("--execve-mode", sc_mode, "union or reduce")->check(CLI::IsMember({"union", "reduce"}));
    syscalls->add_option("--execve-targets", sc_targets, "JSON map from execve site to target paths");
    syscalls->add_option("--unresolved", sc_unresolved, "error or allow-all")->check(CLI::IsMember({"error", "allow-all"}));

    // filter
    std::string deny, allow;
    auto* filter = app.add_subcommand("filter", "Compile filters and write the hardened image");
    filter->add_option("--deny", deny, "kill-thread or errno:<n>");
    filter->add_option("--allow", allow, "Compile a filter for this comma-separated syscall list only");
    filter->add_option("--unresolved", sc_unresolved, "error or allow-all")->check(CLI::IsMember({"error", "allow-all"}));

    // report
    std::string payloads;
    auto* report = app.add_subcommand("report", "Payload and sensitive-syscall reports");
    report->add_option("--payloads", payloads, "Payload requirements JSON");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (*analyze) {
            auto c = config_from(g);
            auto b = run_pipeline(c);
            if (!c.out.empty()) pg::write_bundle(b, c.out);
            auto it = b.files.find("report.json");
            std::string j = it != b.files.end() ? it->second : (b.files.count("error.json") ? b.files.at("error.json") : "{}\n");
            std::cout << (g.format == "text" ? summary_text(b) : j);
            return finish(b);
        }
        if (*loops) {
            auto image = pg::load_image(to_paths(loop_images));
            auto all = pg::all_loops(image);
            std::ostringstream os;
            for (const auto& [f, fl] : all)
                for (const auto& l : fl.loops) {
                    const auto& fn = image.function(f);
                    os << image.qualified_name(f) << " " << fn.blocks[l.header].id << " entry=0x" << std::hex
                       << l.entry_address << std::dec << " blocks=" << l.body.size() << (l.top_level ? " top" : " nested")
                       << "\n";
                }
            emit(g, "loops.json", pg::dump(pg::loops_to_json(image, all)), os.str());
            return 0;
        }
        if (*trace) {
            auto image = pg::load_image(to_paths(trace_images));
            std::vector<pg::Scenario> scs{pg::Scenario{}};
            if (!trace_scenario.empty()) scs = pg::scenarios_from_json(pg::read_json_file(trace_scenario));
            pg::TracerOptions opt;
            if (!trace_corpus.empty()) opt.loadable = pg::corpus_modules(pg::load_corpus(trace_corpus));
            json docs = json::array();
            std::ostringstream os;
            for (auto& sc : scs) {
                if (trace_budget) sc.budget = trace_budget;
                auto log = pg::execute(image, sc, opt);
                docs.push_back(pg::trace_to_json(log));
                for (const auto& th : log.threads) {
                    os << "thread " << th.id << " root 0x" << std::hex << th.root << std::dec << " steps "
                       << th.addresses.size() << " end " << th.end_reason << "\n";
                    for (const auto& e : th.events)
                        os << "  " << std::setw(6) << e.time << " 0x" << std::hex << e.address << std::dec << " "
                           << pg::event_kind_name(e.kind) << " " << e.number << (e.text.empty() ? "" : " " + e.text) << "\n";
                }
            }
            emit(g, "trace.json", pg::dump(docs.size() == 1 ? docs[0] : json{{"traces", docs}}), os.str());
            return 0;
        }
        if (*partition) {
            auto log = pg::trace_from_json(pg::read_json_file(part_trace));
            auto sites = pg::loop_sites_from_json(pg::read_json_file(part_loops));
            auto sel = pg::select_main_loops(pg::profile_loops(log, sites));
            std::optional<pg::ProgramImage> image;
            if (!part_images.empty()) image = pg::load_image(to_paths(part_images));
            std::ostringstream os;
            for (const auto& tp : sel.points)
                os << "thread " << tp.thread << " -> " << (image ? image->qualified_name(tp.func) : "?") << " 0x" << std::hex
                   << tp.addr << std::dec << "\n";
            for (const auto& w : sel.warnings) os << "warning: " << w << "\n";
            emit(g, "transition_points.json", pg::dump(pg::transition_points_to_json(sel, image ? &*image : nullptr)), os.str());
            return 0;
        }
        if (*fcg) {
            auto image = pg::load_image(to_paths(fcg_images));
            pg::Fcg graph;
            json doc;
            if (fcg_refined) {
                std::vector<pg::CorpusLibrary> corpus;
                if (!fcg_corpus.empty()) corpus = pg::load_corpus(fcg_corpus);
                pg::DynamicObservations obs;
                if (!fcg_obs.empty()) obs = pg::observations_from_json(pg::read_json_file(fcg_obs));
                auto dl = pg::analyze_dl(image, corpus, obs);
                image = dl.image;
                graph = dl.refined.refined;
                doc = pg::fcg_to_json(image, graph);
                doc["refinement"] = pg::refinement_report_json(image, dl.refined.report);
            } else {
                graph = pg::build_fcg(image);
                doc = pg::fcg_to_json(image, graph);
            }
            if (fcg_dot) {
                std::string dot = pg::fcg_to_dot(image, graph);
                emit(g, "fcg.dot", dot, dot);
            } else {
                std::ostringstream os;
                os << "nodes " << graph.nodes.size() << "\nedges " << graph.edges.size() << "\nat_set " << graph.at_set.size()
                   << "\n";
                emit(g, "fcg.json", pg::dump(doc), os.str());
            }
            return 0;
        }
        if (*dll) {
            auto image = pg::load_image(to_paths(dll_images));
            std::vector<pg::CorpusLibrary> corpus;
            std::vector<std::string> warnings;
            if (!dll_corpus.empty()) corpus = pg::load_corpus(dll_corpus, &warnings);
            pg::DynamicObservations obs;
            if (!dll_obs.empty()) obs = pg::observations_from_json(pg::read_json_file(dll_obs));
            auto dl = pg::analyze_dl(image, corpus, obs);
            for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
            json doc = pg::dl_report_json(dl.image, dl.report);
            std::ostringstream os;
            for (const char* api : {"dlopen", "dlsym"}) {
                const auto& t = doc.at(api).at("summary");
                os << std::left << std::setw(8) << api;
                for (const char* st : {"full", "partial", "unresolved"})
                    os << " " << st << " " << t.at(st).at("count").get<int>() << " (" << t.at(st).at("observed").get<int>() << ")";
                os << "\n";
            }
            emit(g, "dll.json", pg::dump(doc), os.str());
            return 0;
        }
        if (*syscalls) {
            auto c = config_from(g);
            if (!sc_mode.empty()) c.execve_mode = pg::parse_execve_mode(sc_mode);
            if (!sc_targets.empty()) c.execve_targets = pg::execve_targets_from_json(pg::read_json_file(sc_targets));
            if (!sc_unresolved.empty()) c.unresolved = pg::parse_unresolved(sc_unresolved);
            auto b = run_pipeline(c);
            if (auto it = b.files.find("partitions.json"); it != b.files.end())
                emit(g, "partitions.json", it->second, partitions_text(b));
            return finish(b);
        }
        if (*filter) {
            pg::bpf::DenyAction d = deny.empty() ? pg::bpf::DenyAction{} : pg::parse_deny(deny);
            if (!allow.empty()) {
                std::set<std::uint32_t> set;
                std::stringstream ss(allow);
                for (std::string item; std::getline(ss, item, ',');) {
                    if (item.empty()) continue;
                    if (auto nr = pg::syscall_number(item)) set.insert(*nr);
                    else if (std::all_of(item.begin(), item.end(), ::isdigit) && std::stoul(item) <= pg::kMaxSyscall)
                        set.insert(static_cast<std::uint32_t>(std::stoul(item)));
                    else throw pg::Error("filter", item, "unknown syscall");
                }
                auto prog = pg::bpf::compile(set, d);
                pg::bpf::validate(prog);
                auto blob = pg::bpf::to_blob(prog);
                std::string txt = pg::bpf::disassemble(prog);
                if (g.out.empty()) {
                    std::cout << txt;
                } else {
                    fs::create_directories(g.out);
                    std::ofstream(fs::path(g.out) / "filter.bin", std::ios::binary)
                        .write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
                    std::ofstream(fs::path(g.out) / "filter.txt") << txt;
                }
                return 0;
            }
            auto c = config_from(g);
            if (!deny.empty()) c.deny = d;
            if (!sc_unresolved.empty()) c.unresolved = pg::parse_unresolved(sc_unresolved);
            auto b = run_pipeline(c);
            if (!c.out.empty()) {
                fs::create_directories(c.out);
                for (const auto& [name, data] : b.files)
                    if (name.starts_with("filter_") || name == "hardened.pmir.json" || name == "error.json")
                        std::ofstream(c.out / name, std::ios::binary).write(data.data(), static_cast<std::streamsize>(data.size()));
            } else {
                for (const auto& [name, data] : b.files)
                    if (name.starts_with("filter_") && name.ends_with(".txt")) std::cout << "## " << name << "\n" << data;
            }
            return finish(b);
        }
        if (*report) {
            auto c = config_from(g);
            auto b = run_pipeline(c);
            if (b.error) return finish(b);
            std::vector<pg::Payload> pl;
            if (!payloads.empty()) pl = pg::payloads_from_json(pg::read_json_file(payloads));
            json parts = json::array();
            std::ostringstream os;
            for (const auto& p : b.partitions) {
                const auto& allowed = p.composed.final_set;
                auto rows = pg::sensitive_report(b.whole_set.numbers, b.main_set.numbers, allowed);
                auto verdicts = pg::payload_report(allowed, pl);
                parts.push_back({{"partition", p.id}, {"count", allowed.size()},
                                 {"sensitive", pg::sensitive_report_json(rows)},
                                 {"payloads", pg::payload_report_json(verdicts)}});
                os << "partition " << p.id << " (" << allowed.size() << " syscalls)\n";
                for (const auto& r : rows) os << "  " << std::left << std::setw(10) << r.name << " " << pg::tier_name(r.tier) << "\n";
                for (const auto& v : verdicts)
                    os << "  payload " << std::setw(14) << v.name << " equivalence: "
                       << (v.stopped_with_equivalence ? "stopped" : "not stopped")
                       << "  plain: " << (v.stopped_without_equivalence ? "stopped" : "not stopped") << "\n";
            }
            json doc = {{"whole_image", b.whole_set.numbers.size()}, {"main", b.main_set.numbers.size()}, {"partitions", parts}};
            emit(g, "security_report.json", pg::dump(doc), os.str());
            return finish(b);
        }
    } catch (const pg::Error& e) {
        std::cerr << "error [" << e.stage() << "] " << e.entity() << ": " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
