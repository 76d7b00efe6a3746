#include <gtest/gtest.h>

#include "phaseguard/bpf.hpp"
#include "phaseguard/pmir_io.hpp"
#include "support.hpp"

using namespace phaseguard;
using pgtest::json;

namespace {

json minimal_doc() {
    return json::parse(R"({
      "pmir_version": 1,
      "module": {"name": "app", "kind": "executable", "functions": [
        {"id": "main", "address": 4096, "entry": "b0", "blocks": [
          {"id": "b0", "address": 4096, "successors": ["b1"], "instructions": [
            {"addr": 4096, "op": "const", "dst": "rax", "imm": 60}]},
          {"id": "b1", "address": 4100, "instructions": [
            {"addr": 4100, "op": "syscall"}, {"addr": 4104, "op": "ret"}]}]}]},
      "program": {"main": "main"}
    })");
}

std::string invariant_of(const json& doc) {
    try {
        image_from_json({{"doc", doc}});
    } catch (const ValidationError& e) {
        return e.invariant();
    }
    return "";
}

}  // namespace

TEST(Pmir, MinimalImageLoads) {
    auto img = image_from_json({{"doc", minimal_doc()}});
    ASSERT_EQ(img.modules.size(), 1u);
    const auto& fn = img.function(img.main_function);
    EXPECT_EQ(fn.blocks.size(), 2u);
    EXPECT_EQ(fn.blocks[0].successors, std::vector<std::uint32_t>{1});
    EXPECT_EQ(fn.blocks[1].instructions[0].op, Op::Syscall);
}

TEST(Pmir, RoundTripIsIdentity) {
    auto img = image_from_json({{"doc", minimal_doc()}});
    auto again = parse_image_text(serialize_image(img));
    EXPECT_EQ(img, again);
    EXPECT_EQ(serialize_image(img), serialize_image(again));
}

TEST(Pmir, CorpusFilesRoundTrip) {
    for (const auto& e : std::filesystem::directory_iterator(PHASEGUARD_CORPUS_DIR)) {
        auto name = e.path().filename().string();
        if (!name.ends_with(".pmir.json") || name.starts_with("lib")) continue;
        auto doc = read_json_file(e.path());
        if (!doc.contains("program")) continue;
        std::vector<std::filesystem::path> files{e.path()};
        if (name != "helper.pmir.json") files.push_back(std::filesystem::path(PHASEGUARD_CORPUS_DIR) / "libc.pmir.json");
        auto img = load_image(files);
        EXPECT_EQ(parse_image_text(serialize_image(img)), img) << name;
    }
}

TEST(Pmir, FiltersRoundTrip) {
    auto img = image_from_json({{"doc", minimal_doc()}});
    img.filters[3] = bpf::compile({0, 1, 60});
    auto again = parse_image_text(serialize_image(img));
    EXPECT_EQ(again.filters, img.filters);
}

TEST(Pmir, CrossModuleReferencesResolve) {
    pgtest::ModuleB exe{"app"};
    exe.func("main").block("b0").take("rax", "libc.so.6::write").call("libc.so.6::write").ret();
    auto libc = pgtest::make_libc();
    auto img = pgtest::build(exe, pgtest::program("main"), {&libc});
    const auto& in = img.function(img.main_function).blocks[0].instructions[0];
    EXPECT_EQ(img.qualified_name(in.func), "libc.so.6::write");
}

TEST(Pmir, ValidationInvariants) {
    {
        auto d = minimal_doc();
        d["module"]["functions"][0]["blocks"][1]["instructions"][0]["addr"] = 4096;
        EXPECT_EQ(invariant_of(d), "unique-instruction-address");
    }
    {
        auto d = minimal_doc();
        d["module"]["functions"][0]["blocks"][1]["address"] = 4000;
        EXPECT_EQ(invariant_of(d), "block-address-order");
    }
    {
        auto d = minimal_doc();
        d["module"]["functions"][0]["blocks"][0]["successors"] = json::array();
        EXPECT_EQ(invariant_of(d), "successors-match-terminator");
    }
    {
        auto d = minimal_doc();
        auto& ins = d["module"]["functions"][0]["blocks"][1]["instructions"];
        std::swap(ins[0], ins[1]);
        ins[0]["addr"] = 4100;
        ins[1]["addr"] = 4104;
        EXPECT_EQ(invariant_of(d), "terminator-last");
    }
    {
        auto d = minimal_doc();
        d["module"]["functions"][0]["blocks"][0]["instructions"][0]["dst"] = "eax";
        EXPECT_EQ(invariant_of(d), "register-set");
    }
    {
        auto d = minimal_doc();
        d["pmir_version"] = 2;
        EXPECT_EQ(invariant_of(d), "pmir-version");
    }
    {
        auto d = minimal_doc();
        d["module"]["functions"][0]["blocks"][0]["instructions"][0] = {{"addr", 4096}, {"op", "call_direct"}, {"func", "nope"}};
        EXPECT_EQ(invariant_of(d), "function-ref-resolves");
    }
    {
        auto d = minimal_doc();
        d["module"]["kind"] = "shared-library";
        EXPECT_EQ(invariant_of(d), "single-executable");
    }
}

TEST(Pmir, ParseErrorCarriesOffset) {
    try {
        parse_image_text("{\"pmir_version\": 1, \"module\": [", "broken.json");
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.file(), "broken.json");
        EXPECT_GT(e.offset(), 0u);
    }
}

TEST(Pmir, UnknownOpRejected) {
    auto d = minimal_doc();
    d["module"]["functions"][0]["blocks"][0]["instructions"][0]["op"] = "frobnicate";
    EXPECT_EQ(invariant_of(d), "schema");
}
