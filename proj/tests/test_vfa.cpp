#include <gtest/gtest.h>

#include "phaseguard/vfa.hpp"
#include "support.hpp"

using namespace phaseguard;

namespace {

struct Fixture {
    ProgramImage img;
    UseDefCache cache;
    Fcg g;
    explicit Fixture(ProgramImage i) : img(std::move(i)), cache(img), g(build_fcg(img)) {}
};

}  // namespace

TEST(UseDef, ReachingDefinitionsMergeAtJoin) {
    pgtest::ModuleB m{"app"};
    auto& f = m.func("main");
    f.block("A").br("B", "C");
    f.block("B").cnst("rax", 1).jmp("D");
    f.block("C").cnst("rax", 2).jmp("D");
    f.block("D").ret();
    auto img = pgtest::build(m, pgtest::program("main"));
    UseDefChains ch(img.function(img.main_function));
    auto r = ch.reaching(3, 0, Reg::rax);
    ASSERT_EQ(r.size(), 2u);
    for (auto d : r) {
        EXPECT_EQ(ch.def(d).kind, DefKind::Instr);
        ASSERT_EQ(ch.uses(d).size(), 1u);
        EXPECT_EQ(ch.uses(d)[0].kind, UseKind::Return);
    }
    EXPECT_EQ(ch.reaching(0, 0, Reg::rbx), std::vector<UseDefChains::DefId>{UseDefChains::entry_def(Reg::rbx)});
}

TEST(UseDef, CallsClobberCallerSavedRegisters) {
    pgtest::ModuleB m{"app"};
    m.func("main").block("A").cnst("rdi", 1).cnst("rbx", 2).call("g").ret();
    m.func("g").block("A").ret();
    auto img = pgtest::build(m, pgtest::program("main"));
    UseDefChains ch(img.function(img.main_function));
    auto rdi = ch.reaching(0, 3, Reg::rdi);
    ASSERT_EQ(rdi.size(), 1u);
    EXPECT_EQ(ch.def(rdi[0]).kind, DefKind::CallClobber);
    auto rbx = ch.reaching(0, 3, Reg::rbx);
    ASSERT_EQ(rbx.size(), 1u);
    EXPECT_EQ(ch.def(rbx[0]).kind, DefKind::Instr);
}

TEST(Backward, ResolvesThroughMovesAndCallers) {
    pgtest::ModuleB m{"app"};
    m.func("main").block("A").take("rdi", "t1").call("apply").take("rdi", "t2").call("apply").ret();
    m.func("apply").block("A").mov("rax", "rdi").icall("rax").ret();
    m.func("t1").block("A").ret();
    m.func("t2").block("A").ret();
    Fixture fx(pgtest::build(m, pgtest::program("main")));
    auto vr = backward_resolve_call(fx.cache, fx.g, pgtest::addr_of(fx.img, "apply", "A", 1));
    EXPECT_EQ(vr.status, ResolutionStatus::Full);
    EXPECT_EQ(vr.functions(), (std::set<FuncRef>{pgtest::ref_of(fx.img, "t1"), pgtest::ref_of(fx.img, "t2")}));
}

TEST(Backward, MemoryLoadMakesPartial) {
    pgtest::ModuleB m{"app"};
    auto& f = m.func("main");
    f.block("A").br("B", "C");
    f.block("B").take("rax", "t1").jmp("D");
    f.block("C").load("rax").jmp("D");
    f.block("D").icall("rax").ret();
    m.func("t1").block("A").ret();
    Fixture fx(pgtest::build(m, pgtest::program("main")));
    auto vr = backward_resolve_call(fx.cache, fx.g, pgtest::addr_of(fx.img, "main", "D"));
    EXPECT_EQ(vr.status, ResolutionStatus::Partial);
    ASSERT_EQ(vr.blockers.size(), 1u);
    EXPECT_EQ(vr.blockers.begin()->reason, BlockerReason::MemoryLoad);
}

TEST(Backward, BlockerKinds) {
    pgtest::ModuleB m{"app"};
    m.func("main").block("A").cnst("rax", 1).arith("rax", "rbx").icall("rax").cnst("rax", 5).icall("rax").ret();
    Fixture fx(pgtest::build(m, pgtest::program("main")));
    auto a = backward_resolve_call(fx.cache, fx.g, pgtest::addr_of(fx.img, "main", "A", 2));
    EXPECT_EQ(a.status, ResolutionStatus::Unresolved);
    EXPECT_EQ(a.blockers.begin()->reason, BlockerReason::Arithmetic);
    auto c = backward_resolve_call(fx.cache, fx.g, pgtest::addr_of(fx.img, "main", "A", 4));
    EXPECT_EQ(c.status, ResolutionStatus::Unresolved);
    EXPECT_EQ(c.blockers.begin()->reason, BlockerReason::TypeMismatch);
}

TEST(Backward, RootArgumentIsUnknownExternal) {
    pgtest::ModuleB m{"app"};
    m.func("main").block("A").icall("rdi").ret();
    Fixture fx(pgtest::build(m, pgtest::program("main")));
    auto vr = backward_resolve_call(fx.cache, fx.g, pgtest::addr_of(fx.img, "main", "A"));
    EXPECT_EQ(vr.status, ResolutionStatus::Unresolved);
    EXPECT_EQ(vr.blockers.begin()->reason, BlockerReason::UnknownExternal);
}

TEST(Backward, DepthCapStopsCallerExpansion) {
    // main -> f0 -> f1 -> ... -> f39, each forwarding rdi; the last calls it.
    pgtest::ModuleB m{"app"};
    constexpr int kChain = 40;
    m.func("main").block("A").take("rdi", "target").call("f0").ret();
    for (int i = 0; i < kChain; ++i) {
        auto& b = m.func("f" + std::to_string(i)).block("A");
        if (i + 1 < kChain) b.call("f" + std::to_string(i + 1)).ret();
        else b.icall("rdi").ret();
    }
    m.func("target").block("A").ret();
    Fixture fx(pgtest::build(m, pgtest::program("main")));
    auto site = pgtest::addr_of(fx.img, "f" + std::to_string(kChain - 1), "A");
    auto capped = backward_resolve_call(fx.cache, fx.g, site);
    EXPECT_EQ(capped.status, ResolutionStatus::Unresolved);
    EXPECT_EQ(capped.blockers.begin()->reason, BlockerReason::DepthLimit);
    auto deep = backward_resolve_call(fx.cache, fx.g, site, 64);
    EXPECT_EQ(deep.status, ResolutionStatus::Full);
}

TEST(Backward, CallerChainWithinCapResolves) {
    pgtest::ModuleB m{"app"};
    constexpr int kChain = 32;
    m.func("main").block("A").take("rdi", "target").call("f0").ret();
    for (int i = 0; i < kChain; ++i) {
        auto& b = m.func("f" + std::to_string(i)).block("A");
        if (i + 1 < kChain) b.call("f" + std::to_string(i + 1)).ret();
        else b.icall("rdi").ret();
    }
    m.func("target").block("A").ret();
    Fixture fx(pgtest::build(m, pgtest::program("main")));
    auto site = pgtest::addr_of(fx.img, "f" + std::to_string(kChain - 1), "A");
    EXPECT_EQ(backward_resolve_call(fx.cache, fx.g, site).status, ResolutionStatus::Full);
}

TEST(Backward, ResolveArgumentStrings) {
    pgtest::ModuleB m{"app"};
    m.func("main").block("A").str("rdi", "libx.so").cnst("rsi", 2).call("g").ret();
    m.func("g").block("A").ret();
    Fixture fx(pgtest::build(m, pgtest::program("main")));
    auto site = pgtest::addr_of(fx.img, "main", "A", 2);
    EXPECT_EQ(resolve_argument(fx.cache, fx.g, site, 0).strings(), std::set<std::string>{"libx.so"});
    EXPECT_EQ(resolve_argument(fx.cache, fx.g, site, 1).integers(), std::set<std::int64_t>{2});
    EXPECT_THROW(resolve_argument(fx.cache, fx.g, site, 6), Error);
}

TEST(Forward, CompareAndCallOnlyIsRemovedFromAt) {
    pgtest::ModuleB m{"app"};
    m.func("main").block("A").take("rax", "cb").cmp("rax", "rbx").icall("rax").ret();
    m.func("cb").block("A").ret();
    Fixture fx(pgtest::build(m, pgtest::program("main")));
    auto fw = forward_resolve_at(fx.cache, fx.g);
    EXPECT_TRUE(fw.removed.contains(pgtest::ref_of(fx.img, "cb")));
    EXPECT_EQ(fw.edges.at(pgtest::addr_of(fx.img, "main", "A", 2)), std::set<FuncRef>{pgtest::ref_of(fx.img, "cb")});
}

TEST(Forward, StoreOrDataObjectEscapes) {
    pgtest::ModuleB m{"app"};
    m.func("main").block("A").take("rax", "stored").store("rax").take_data("rbx", "tbl").ret();
    m.func("stored").block("A").ret();
    m.func("listed").block("A").ret();
    m.object("tbl", {"listed"});
    Fixture fx(pgtest::build(m, pgtest::program("main")));
    auto fw = forward_resolve_at(fx.cache, fx.g);
    EXPECT_TRUE(fw.removed.empty());
}

TEST(Forward, FollowsIntoDirectCallees) {
    pgtest::ModuleB m{"app"};
    m.func("main").block("A").take("rdi", "cb").call("apply").ret();
    m.func("apply").block("A").icall("rdi").ret();
    m.func("cb").block("A").ret();
    Fixture fx(pgtest::build(m, pgtest::program("main")));
    auto fw = forward_resolve_at(fx.cache, fx.g);
    EXPECT_TRUE(fw.removed.contains(pgtest::ref_of(fx.img, "cb")));
}

TEST(TypeArmor, ArityAndReturnMismatchPruned) {
    pgtest::ModuleB m{"app"};
    // site prepares rdi only and uses the return value
    m.func("main").block("A").take("rbx", "one").take("rbx", "two").take("rbx", "noret").load("rax").cnst("rdi", 1)
        .icall("rax").mov("rbx", "rax").ret();
    m.func("one").block("A").mov("rax", "rdi").ret();
    m.func("two").block("A").mov("rax", "rsi").ret();
    m.func("noret").block("A").mov("rbx", "rdi").ret();
    Fixture fx(pgtest::build(m, pgtest::program("main")));
    auto site = pgtest::addr_of(fx.img, "main", "A", 5);
    auto sig = callsite_signature(fx.cache, site);
    EXPECT_EQ(sig.prepared_args, 1u);
    EXPECT_TRUE(sig.expects_return);
    EXPECT_EQ(function_signature(fx.cache, pgtest::ref_of(fx.img, "two")).expected_args, 2u);
    auto pruned = typearmor_match(fx.cache, fx.g);
    EXPECT_FALSE(pruned.contains({site, pgtest::ref_of(fx.img, "one")}));
    EXPECT_TRUE(pruned.contains({site, pgtest::ref_of(fx.img, "two")}));
    EXPECT_TRUE(pruned.contains({site, pgtest::ref_of(fx.img, "noret")}));
}

TEST(TypeArmor, ArgumentOnlyPassedToCallsIsNotARead) {
    pgtest::ModuleB m{"app"};
    m.func("f").block("A").call("g").ret();
    m.func("g").block("A").ret();
    m.func("main").block("A").call("f").ret();
    Fixture fx(pgtest::build(m, pgtest::program("main")));
    EXPECT_EQ(function_signature(fx.cache, pgtest::ref_of(fx.img, "f")).expected_args, 0u);
}

TEST(Refine, RefinedIsSubsetAndReduces) {
    auto dir = std::filesystem::path(PHASEGUARD_CORPUS_DIR);
    auto img = load_image({dir / "srv_indirect.pmir.json", dir / "libc.pmir.json"});
    auto r = refine_fcg(img);
    auto before = edge_triples(r.unrefined), after = edge_triples(r.refined);
    EXPECT_TRUE(std::includes(before.begin(), before.end(), after.begin(), after.end()));
    EXPECT_EQ(r.report.unrefined_edges, 31u);
    EXPECT_EQ(r.report.refined_edges, 16u);
    std::set<std::string> elim;
    for (auto f : r.report.at_eliminated) elim.insert(img.function(f).id);
    EXPECT_EQ(elim, (std::set<std::string>{"on_request", "cmp_marker", "on_tick"}));
}

TEST(Refine, PassesCanBeDisabled) {
    auto dir = std::filesystem::path(PHASEGUARD_CORPUS_DIR);
    auto img = load_image({dir / "srv_indirect.pmir.json", dir / "libc.pmir.json"});
    RefineOptions off;
    off.forward = off.backward = off.typearmor = false;
    auto r = refine_fcg(img, off);
    EXPECT_EQ(edge_triples(r.refined), edge_triples(r.unrefined));
}
