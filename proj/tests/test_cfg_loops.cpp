#include <gtest/gtest.h>

#include "oracles.hpp"
#include "phaseguard/cfg_loops.hpp"
#include "support.hpp"

using namespace phaseguard;

namespace {

std::set<std::uint32_t> as_set(const BlockSet& b) { return {b.begin(), b.end()}; }

const FunctionDef& main_of(const ProgramImage& img) { return img.function(img.main_function); }

std::uint32_t idx(const FunctionDef& fn, const char* id) { return *fn.block_index(id); }

}  // namespace

TEST(Dominators, Chain) {
    pgtest::ModuleB m{"app"};
    auto& f = m.func("main");
    f.block("A").cnst("rax", 1);
    f.block("B").cnst("rax", 2);
    f.block("C").ret();
    auto img = pgtest::build(m, pgtest::program("main"));
    auto d = compute_dominators(main_of(img));
    EXPECT_EQ(d.dom[2], (BlockSet{0, 1, 2}));
    EXPECT_EQ(d.idom[2], 1u);
}

TEST(Dominators, Diamond) {
    pgtest::ModuleB m{"app"};
    auto& f = m.func("main");
    f.block("A").br("B", "C");
    f.block("B").jmp("D");
    f.block("C").jmp("D");
    f.block("D").ret();
    auto img = pgtest::build(m, pgtest::program("main"));
    auto d = compute_dominators(main_of(img));
    EXPECT_EQ(d.dom[3], (BlockSet{0, 3}));
    EXPECT_EQ(d.idom[3], 0u);
}

TEST(Dominators, UnreachableBlocksReported) {
    pgtest::ModuleB m{"app"};
    auto& f = m.func("main");
    f.block("A").ret();
    f.block("dead").jmp("A");
    auto img = pgtest::build(m, pgtest::program("main"));
    auto d = compute_dominators(main_of(img));
    EXPECT_EQ(d.unreachable, std::vector<std::uint32_t>{1});
    EXPECT_TRUE(d.dom[1].empty());
}

TEST(Loops, SelfEdge) {
    pgtest::ModuleB m{"app"};
    auto& f = m.func("main");
    f.block("entry").cnst("rax", 0);
    f.block("B").br("B", "out");
    f.block("out").ret();
    auto img = pgtest::build(m, pgtest::program("main"));
    const auto& fn = main_of(img);
    auto l = find_loops(fn);
    ASSERT_EQ(l.loops.size(), 1u);
    EXPECT_EQ(l.loops[0].header, idx(fn, "B"));
    EXPECT_EQ(l.loops[0].body, (BlockSet{idx(fn, "B")}));
    EXPECT_EQ(l.loops[0].exit_addresses, (std::set<std::uint64_t>{fn.blocks[2].instructions[0].address}));
    EXPECT_EQ(l.loops[0].entry_address, fn.blocks[1].instructions[0].address);
}

TEST(Loops, SimpleLoopWithExit) {
    pgtest::ModuleB m{"app"};
    auto& f = m.func("main");
    f.block("A").cnst("rax", 0);
    f.block("B").cnst("rbx", 1);
    f.block("C").br("B", "D");
    f.block("D").ret();
    auto img = pgtest::build(m, pgtest::program("main"));
    const auto& fn = main_of(img);
    auto l = find_loops(fn);
    ASSERT_EQ(l.loops.size(), 1u);
    const auto& loop = l.loops[0];
    EXPECT_EQ(loop.header, 1u);
    EXPECT_EQ(loop.back_edge_sources, std::vector<std::uint32_t>{2});
    EXPECT_EQ(loop.body, (BlockSet{1, 2}));
    EXPECT_EQ(loop.exit_sources, (BlockSet{2}));
    EXPECT_TRUE(loop.top_level);
}

TEST(Loops, NestedInnerIsNotTopLevel) {
    pgtest::ModuleB m{"app"};
    auto& f = m.func("main");
    f.block("A").cnst("rax", 0);
    f.block("B").cnst("rbx", 0);
    f.block("C").br("C", "D");
    f.block("D").br("B", "E");
    f.block("E").ret();
    auto img = pgtest::build(m, pgtest::program("main"));
    const auto& fn = main_of(img);
    auto l = find_loops(fn);
    ASSERT_EQ(l.loops.size(), 2u);
    for (const auto& loop : l.loops) {
        if (loop.header == idx(fn, "B")) {
            EXPECT_TRUE(loop.top_level);
            EXPECT_EQ(loop.body, (BlockSet{1, 2, 3}));
        } else {
            EXPECT_EQ(loop.header, idx(fn, "C"));
            EXPECT_FALSE(loop.top_level);
        }
    }
}

TEST(Loops, SharedHeaderBackEdgesMerge) {
    pgtest::ModuleB m{"app"};
    auto& f = m.func("main");
    f.block("A").cnst("rax", 0);
    f.block("H").br("X", "Y");
    f.block("X").br("H", "out");
    f.block("Y").jmp("H");
    f.block("out").ret();
    auto img = pgtest::build(m, pgtest::program("main"));
    auto l = find_loops(main_of(img));
    ASSERT_EQ(l.loops.size(), 1u);
    EXPECT_EQ(l.loops[0].back_edge_sources, (std::vector<std::uint32_t>{2, 3}));
    EXPECT_EQ(l.loops[0].body, (BlockSet{1, 2, 3}));
}

TEST(Loops, IrreducibleRegionIsNotALoop) {
    pgtest::ModuleB m{"app"};
    auto& f = m.func("main");
    f.block("A").br("B", "C");
    f.block("B").br("C", "out");
    f.block("C").br("B", "out");
    f.block("out").ret();
    auto img = pgtest::build(m, pgtest::program("main"));
    auto l = find_loops(main_of(img));
    EXPECT_TRUE(l.loops.empty());
    EXPECT_EQ(l.irreducible_edges.size(), 1u);
}

TEST(Loops, AcyclicImageHasNoLoops) {
    pgtest::ModuleB m{"app"};
    m.func("main").block("A").call("g").ret();
    m.func("g").block("A").ret();
    auto img = pgtest::build(m, pgtest::program("main"));
    for (const auto& [f, fl] : all_loops(img)) EXPECT_TRUE(fl.loops.empty());
}

TEST(Loops, CorpusLabelledLoops) {
    auto img = load_image({std::filesystem::path(PHASEGUARD_CORPUS_DIR) / "srv_nested.pmir.json"});
    std::map<std::string, std::vector<std::pair<std::string, bool>>> got;
    for (const auto& [f, fl] : all_loops(img))
        for (const auto& l : fl.loops) got[img.function(f).id].push_back({img.function(f).blocks[l.header].id, l.top_level});
    std::map<std::string, std::vector<std::pair<std::string, bool>>> want{
        {"warmup", {{"wl", true}}}, {"serve", {{"outer", true}, {"inner", false}}}};
    for (auto& [k, v] : got) std::sort(v.begin(), v.end());
    for (auto& [k, v] : want) std::sort(v.begin(), v.end());
    EXPECT_EQ(got, want);
}

TEST(Loops, RandomCfgsMatchOracles) {
    std::mt19937 rng(7);
    for (int iter = 0; iter < 300; ++iter) {
        std::uint32_t n = 1 + rng() % 12;
        auto fn = oracle::random_cfg(rng, n);
        auto dom = compute_dominators(fn);
        auto want_dom = oracle::dominators(fn);
        for (std::uint32_t b = 0; b < n; ++b) ASSERT_EQ(as_set(dom.dom[b]), want_dom[b]) << "iter " << iter << " block " << b;
        auto loops = find_loops(fn, dom);
        std::map<std::uint32_t, std::set<std::uint32_t>> got;
        for (const auto& l : loops.loops) {
            got[l.header] = as_set(l.body);
            // invariants: header dominates every body block; header in body
            for (auto b : l.body) ASSERT_TRUE(dom.dominates(l.header, b));
        }
        ASSERT_EQ(got, oracle::natural_loops(fn)) << "iter " << iter;
        // top-level loops are pairwise non-nested
        for (const auto& a : loops.loops)
            for (const auto& b : loops.loops)
                if (&a != &b && a.top_level && b.top_level)
                    ASSERT_FALSE(std::includes(b.body.begin(), b.body.end(), a.body.begin(), a.body.end()));
    }
}
