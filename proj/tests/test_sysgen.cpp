#include <gtest/gtest.h>

#include <random>

#include "phaseguard/sysgen.hpp"
#include "support.hpp"

using namespace phaseguard;

namespace {

struct Ctx {
    ProgramImage img;
    UseDefCache cache;
    Fcg g;
    SyscallContext ctx;
    explicit Ctx(ProgramImage i) : img(std::move(i)), cache(img), g(build_fcg(img)), ctx(build_syscall_context(cache, g)) {}

    std::set<std::uint32_t> partition(const std::string& func, const std::string& block, std::size_t index = 0) {
        return partition_syscalls(ctx, pgtest::ref_of(img, func), pgtest::addr_of(img, func, block, index)).numbers;
    }
    std::set<std::string> noreturn_names() const {
        std::set<std::string> out;
        for (auto f : ctx.noreturns) out.insert(img.function(f).id);
        return out;
    }
};

using Nums = std::set<std::uint32_t>;

}  // namespace

TEST(Sysgen, SiteNumbersFromRaxAndWrapper) {
    pgtest::ModuleB m{"app"};
    auto& f = m.func("main");
    f.block("A").br("B", "C");
    f.block("B").cnst("rax", 1).jmp("D");
    f.block("C").cnst("rax", 3).jmp("D");
    f.block("D").sys().cnst("rdi", 39).plt("syscall").ret();
    Ctx c(pgtest::build(m, pgtest::program("main")));
    auto main = c.img.main_function;
    EXPECT_EQ(c.ctx.direct.at(main).numbers, (Nums{1, 3, 39}));
    EXPECT_TRUE(c.ctx.direct.at(main).unresolved_sites.empty());
}

TEST(Sysgen, UnresolvedSiteKeepsKnownValues) {
    pgtest::ModuleB m{"app"};
    auto& f = m.func("main");
    f.block("A").br("B", "C");
    f.block("B").cnst("rax", 1).jmp("D");
    f.block("C").load("rax").jmp("D");
    f.block("D").sys().cnst("rax", 9999).sys().ret();
    Ctx c(pgtest::build(m, pgtest::program("main")));
    const auto& s = c.ctx.direct.at(c.img.main_function);
    EXPECT_EQ(s.numbers, Nums{1});
    EXPECT_EQ(s.unresolved_sites.size(), 2u);
}

TEST(Sysgen, ReachableSetsMatchClosureOnRandomGraphs) {
    std::mt19937 rng(11);
    for (int iter = 0; iter < 60; ++iter) {
        int n = 2 + static_cast<int>(rng() % 10);
        pgtest::ModuleB m{"app"};
        auto& mb = m.func("main").block("A");
        for (int i = 0; i < n; ++i) mb.call("f" + std::to_string(i));
        mb.ret();
        std::vector<std::vector<int>> calls(n);
        for (int i = 0; i < n; ++i) {
            auto& b = m.func("f" + std::to_string(i)).block("A");
            b.cnst("rax", i).sys();
            int k = static_cast<int>(rng() % 3);
            for (int j = 0; j < k; ++j) {
                int t = static_cast<int>(rng() % n);
                calls[i].push_back(t);
                b.call("f" + std::to_string(t));
            }
            b.ret();
        }
        Ctx c(pgtest::build(m, pgtest::program("main")));
        for (int i = 0; i < n; ++i) {
            Nums want;
            std::vector<int> work{i};
            std::set<int> seen{i};
            while (!work.empty()) {
                int x = work.back();
                work.pop_back();
                want.insert(static_cast<std::uint32_t>(x));
                for (int y : calls[x])
                    if (seen.insert(y).second) work.push_back(y);
            }
            ASSERT_EQ(c.ctx.reachable.at(pgtest::ref_of(c.img, "f" + std::to_string(i))).numbers, want)
                << "iter " << iter << " f" << i;
        }
    }
}

TEST(Sysgen, NoreturnGreatestFixpoint) {
    pgtest::ModuleB m{"app"};
    auto& mf = m.func("main");
    mf.block("A").br("B", "C");
    mf.block("B").call("dies").call("spin_a").ret();
    mf.block("C").call("maybe").ret();
    m.func("dies").block("A").plt("exit").ret();
    auto& mb = m.func("maybe");
    mb.block("A").br("B", "C");
    mb.block("B").call("dies").ret();
    mb.block("C").ret();
    m.func("spin_a").block("A").call("spin_b").ret();
    m.func("spin_b").block("A").call("spin_a").ret();
    m.func("raw_exit").block("A").cnst("rax", 231).sys().ret();
    m.func("use_raw").block("A").call("raw_exit").ret();
    auto& e2 = m.func("entry2");
    e2.block("A").br("B", "C");
    e2.block("B").call("use_raw").ret();
    e2.block("C").ret();
    Ctx c(pgtest::build(m, pgtest::program("main", {"entry2"})));
    EXPECT_EQ(c.noreturn_names(), (std::set<std::string>{"dies", "spin_a", "spin_b", "raw_exit", "use_raw"}));
}

TEST(Sysgen, ThreadStartsFromThirdArgument) {
    pgtest::ModuleB m{"app"};
    m.func("main").block("A").take("rdx", "worker").plt("pthread_create").ret();
    m.func("worker").block("A").cnst("rax", 0).sys().ret();
    Ctx c(pgtest::build(m, pgtest::program("main")));
    EXPECT_EQ(c.ctx.thread_starts, std::set<FuncRef>{pgtest::ref_of(c.img, "worker")});
}

TEST(Sysgen, UnresolvedThreadStartIsAnError) {
    pgtest::ModuleB m{"app"};
    m.func("main").block("A").load("rdx").plt("pthread_create").ret();
    auto img = pgtest::build(m, pgtest::program("main"));
    UseDefCache cache(img);
    auto g = build_fcg(img);
    EXPECT_THROW(build_syscall_context(cache, g), Error);
}

TEST(Sysgen, PartitionAscendsToCallers) {
    pgtest::ModuleB m{"app"};
    m.func("main").block("A").call("setup").call("serve").call("teardown").ret();
    m.func("setup").block("A").cnst("rax", 2).sys().ret();
    auto& s = m.func("serve");
    s.block("pre").cnst("rax", 9).sys();
    s.block("loop").cnst("rax", 0).sys().br("loop", "out");
    s.block("out").ret();
    m.func("teardown").block("A").cnst("rax", 3).sys().ret();
    m.func("fini").block("A").cnst("rax", 1).sys().ret();
    Ctx c(pgtest::build(m, pgtest::program("main", {"fini"})));
    EXPECT_EQ(c.partition("serve", "loop"), (Nums{0, 1, 3}));
}

TEST(Sysgen, NoreturnFunctionStopsAscent) {
    pgtest::ModuleB m{"app"};
    m.func("main").block("A").call("serve").cnst("rax", 3).sys().ret();
    auto& s = m.func("serve");
    s.block("loop").cnst("rax", 0).sys().br("loop", "out");
    s.block("out").plt("exit").ret();
    Ctx c(pgtest::build(m, pgtest::program("main")));
    EXPECT_EQ(c.partition("serve", "loop"), (Nums{0}));
}

TEST(Sysgen, ThreadStartDoesNotAscend) {
    pgtest::ModuleB m{"app"};
    m.func("main").block("A").take("rdx", "worker").plt("pthread_create").call("worker").cnst("rax", 7).sys().ret();
    auto& w = m.func("worker");
    w.block("loop").cnst("rax", 0).sys().br("loop", "out");
    w.block("out").ret();
    Ctx c(pgtest::build(m, pgtest::program("main")));
    EXPECT_EQ(c.partition("worker", "loop"), (Nums{0}));
}

TEST(Sysgen, CodeBeforeTransitionPointInLoopIsIncluded) {
    // The header block is re-entered through the back edge, so all of it counts.
    pgtest::ModuleB m{"app"};
    auto& f = m.func("main");
    f.block("pre").cnst("rax", 9).sys();
    f.block("loop").cnst("rax", 0).sys().cnst("rax", 1).sys().br("loop", "out");
    f.block("out").ret();
    Ctx c(pgtest::build(m, pgtest::program("main")));
    EXPECT_EQ(c.partition("main", "loop", 2), (Nums{0, 1}));
}

TEST(Sysgen, ExecveSitesAndExternalsRecorded) {
    pgtest::ModuleB m{"app"};
    auto& f = m.func("main");
    f.block("loop").str("rdi", "/bin/x").plt("execve").plt("mystery").br("loop", "out");
    f.block("out").ret();
    Ctx c(pgtest::build(m, pgtest::program("main")));
    auto s = partition_syscalls(c.ctx, c.img.main_function, pgtest::addr_of(c.img, "main", "loop"));
    EXPECT_EQ(s.execve_sites, std::set<std::uint64_t>{pgtest::addr_of(c.img, "main", "loop", 1)});
    EXPECT_EQ(s.unresolved_sites, std::set<std::uint64_t>{pgtest::addr_of(c.img, "main", "loop", 2)});
}

TEST(Sysgen, BadTransitionPointThrows) {
    pgtest::ModuleB m{"app"};
    m.func("main").block("A").call("g").ret();
    m.func("g").block("A").ret();
    Ctx c(pgtest::build(m, pgtest::program("main")));
    EXPECT_THROW(partition_syscalls(c.ctx, pgtest::ref_of(c.img, "g"), pgtest::addr_of(c.img, "main", "A")), Error);
}

TEST(Sysgen, WholeImageIncludesUnreachableCode) {
    pgtest::ModuleB m{"app"};
    m.func("main").block("A").cnst("rax", 1).sys().ret();
    m.func("dead").block("A").cnst("rax", 101).sys().ret();
    Ctx c(pgtest::build(m, pgtest::program("main")));
    EXPECT_EQ(whole_image_syscalls(c.cache, c.g).numbers, (Nums{1, 101}));
    EXPECT_EQ(reachable_from(c.ctx, {c.img.main_function}).numbers, Nums{1});
}

TEST(Execve, UnionAddsNeeds) {
    auto c = compose_execve(ExecveMode::UnionPropagate, {0, 1, 59}, {{"/bin/h", {1, 12, 231}}});
    EXPECT_EQ(c.final_set, (Nums{0, 1, 12, 59, 231}));
    ASSERT_EQ(c.exec_filters.size(), 1u);
    EXPECT_TRUE(c.exec_filters[0].reduced.empty());
}

TEST(Execve, ReduceAttachesNarrowFilter) {
    auto c = compose_execve(ExecveMode::ReduceOnExec, {0, 1, 59}, {{"/bin/h", {1, 12, 231}}, {"/bin/g", {2}}});
    EXPECT_EQ(c.final_set, (Nums{0, 1, 2, 12, 59, 231}));
    ASSERT_EQ(c.exec_filters.size(), 2u);
    for (const auto& t : c.exec_filters) {
        EXPECT_EQ(t.reduced, t.needed);
        EXPECT_TRUE(std::includes(c.final_set.begin(), c.final_set.end(), t.reduced.begin(), t.reduced.end()));
    }
}

TEST(Execve, NoTargetsKeepsBase) {
    auto c = compose_execve(ExecveMode::ReduceOnExec, {3}, {});
    EXPECT_EQ(c.final_set, Nums{3});
    EXPECT_TRUE(c.exec_filters.empty());
}
