#pragma once

// Dominators, back edges and natural loops over a single function's CFG.

#include <algorithm>
#include <map>
#include <set>
#include <vector>

#include "phaseguard/pmir.hpp"

namespace phaseguard {

using BlockSet = std::vector<std::uint32_t>;  // sorted, unique

inline bool contains(const BlockSet& s, std::uint32_t b) { return std::binary_search(s.begin(), s.end(), b); }

inline std::vector<std::vector<std::uint32_t>> predecessors(const FunctionDef& fn) {
    std::vector<std::vector<std::uint32_t>> preds(fn.blocks.size());
    for (std::uint32_t b = 0; b < fn.blocks.size(); ++b)
        for (auto s : fn.blocks[b].successors)
            if (std::find(preds[s].begin(), preds[s].end(), b) == preds[s].end()) preds[s].push_back(b);
    return preds;
}

struct DomInfo {
    std::vector<bool> reachable;
    std::vector<BlockSet> dom;                  // empty for unreachable blocks
    std::vector<std::optional<std::uint32_t>> idom;
    std::vector<std::uint32_t> unreachable;     // warning set

    bool dominates(std::uint32_t a, std::uint32_t b) const { return reachable[b] && contains(dom[b], a); }
};

/// Reverse postorder of the blocks reachable from the entry.
inline std::vector<std::uint32_t> reverse_postorder(const FunctionDef& fn) {
    std::vector<std::uint32_t> order;
    std::vector<char> state(fn.blocks.size(), 0);
    std::vector<std::pair<std::uint32_t, std::size_t>> stack{{fn.entry, 0}};
    state[fn.entry] = 1;
    while (!stack.empty()) {
        auto& [b, next] = stack.back();
        const auto& succ = fn.blocks[b].successors;
        if (next < succ.size()) {
            auto s = succ[next++];
            if (!state[s]) {
                state[s] = 1;
                stack.emplace_back(s, 0);
            }
        } else {
            order.push_back(b);
            stack.pop_back();
        }
    }
    std::reverse(order.begin(), order.end());
    return order;
}

/// Iterates dom(Z) = {Z} ∪ ⋂ dom(preds(Z)) to a fixpoint. Unreachable
/// blocks take no part and are listed in `unreachable`.
inline DomInfo compute_dominators(const FunctionDef& fn) {
    const auto n = static_cast<std::uint32_t>(fn.blocks.size());
    DomInfo info;
    info.reachable.assign(n, false);
    info.dom.assign(n, {});
    info.idom.assign(n, std::nullopt);
    auto rpo = reverse_postorder(fn);
    for (auto b : rpo) info.reachable[b] = true;
    for (std::uint32_t b = 0; b < n; ++b)
        if (!info.reachable[b]) info.unreachable.push_back(b);

    BlockSet all(rpo.begin(), rpo.end());
    std::sort(all.begin(), all.end());
    for (auto b : rpo) info.dom[b] = all;
    info.dom[fn.entry] = {fn.entry};
    auto preds = predecessors(fn);

    for (bool changed = true; changed;) {
        changed = false;
        for (auto b : rpo) {
            if (b == fn.entry) continue;
            BlockSet acc;
            bool first = true;
            for (auto p : preds[b]) {
                if (!info.reachable[p]) continue;
                if (first) {
                    acc = info.dom[p];
                    first = false;
                } else {
                    BlockSet tmp;
                    std::set_intersection(acc.begin(), acc.end(), info.dom[p].begin(), info.dom[p].end(),
                                          std::back_inserter(tmp));
                    acc.swap(tmp);
                }
            }
            auto pos = std::lower_bound(acc.begin(), acc.end(), b);
            if (pos == acc.end() || *pos != b) acc.insert(pos, b);
            if (acc != info.dom[b]) {
                info.dom[b] = std::move(acc);
                changed = true;
            }
        }
    }
    // The immediate dominator is the strict dominator with the largest dom set.
    for (auto b : rpo) {
        if (b == fn.entry) continue;
        std::size_t best = 0;
        for (auto d : info.dom[b]) {
            if (d == b) continue;
            if (!info.idom[b] || info.dom[d].size() > best) {
                info.idom[b] = d;
                best = info.dom[d].size();
            }
        }
    }
    return info;
}

struct Loop {
    std::uint32_t header = 0;
    std::vector<std::uint32_t> back_edge_sources;  // merged back edges into `header`
    BlockSet body;
    BlockSet exit_sources;
    std::set<std::uint64_t> exit_addresses;
    std::uint64_t entry_address = 0;
    bool top_level = true;

    bool operator==(const Loop&) const = default;
};

struct FunctionLoops {
    std::vector<Loop> loops;
    /// Retreating edges whose target does not dominate the source.
    std::vector<std::pair<std::uint32_t, std::uint32_t>> irreducible_edges;
    std::vector<std::uint32_t> unreachable;

    bool operator==(const FunctionLoops&) const = default;
};

/// Natural loop of back edge `source -> header`: the header plus every block
/// that reaches `source` without passing through the header.
inline BlockSet natural_loop_body(std::uint32_t source, std::uint32_t header,
                                  const std::vector<std::vector<std::uint32_t>>& preds) {
    std::set<std::uint32_t> body{header};
    std::vector<std::uint32_t> work;
    if (body.insert(source).second) work.push_back(source);
    while (!work.empty()) {
        auto b = work.back();
        work.pop_back();
        for (auto p : preds[b])
            if (body.insert(p).second) work.push_back(p);
    }
    return {body.begin(), body.end()};
}

inline FunctionLoops find_loops(const FunctionDef& fn, const DomInfo& dom) {
    FunctionLoops out;
    out.unreachable = dom.unreachable;
    auto preds = predecessors(fn);
    for (auto& ps : preds)
        std::erase_if(ps, [&](std::uint32_t p) { return !dom.reachable[p]; });
    std::map<std::uint32_t, Loop> by_header;

    for (std::uint32_t b = 0; b < fn.blocks.size(); ++b) {
        if (!dom.reachable[b]) continue;
        for (auto s : fn.blocks[b].successors) {
            if (!dom.dominates(s, b)) continue;
            Loop& loop = by_header[s];
            loop.header = s;
            loop.back_edge_sources.push_back(b);
            auto body = natural_loop_body(b, s, preds);
            BlockSet merged;
            std::set_union(loop.body.begin(), loop.body.end(), body.begin(), body.end(), std::back_inserter(merged));
            loop.body = std::move(merged);
        }
    }

    // Retreating edges (to a block on the DFS stack) that are not back edges.
    {
        std::vector<char> state(fn.blocks.size(), 0);
        std::vector<std::pair<std::uint32_t, std::size_t>> stack{{fn.entry, 0}};
        state[fn.entry] = 1;
        while (!stack.empty()) {
            auto& [b, next] = stack.back();
            const auto& succ = fn.blocks[b].successors;
            if (next < succ.size()) {
                auto s = succ[next++];
                if (state[s] == 1 && !dom.dominates(s, b)) out.irreducible_edges.emplace_back(b, s);
                if (!state[s]) {
                    state[s] = 1;
                    stack.emplace_back(s, 0);
                }
            } else {
                state[b] = 2;
                stack.pop_back();
            }
        }
    }

    for (auto& [h, loop] : by_header) {
        std::sort(loop.back_edge_sources.begin(), loop.back_edge_sources.end());
        loop.entry_address = fn.blocks[h].instructions.front().address;
        for (auto b : loop.body)
            for (auto s : fn.blocks[b].successors)
                if (!contains(loop.body, s)) {
                    auto pos = std::lower_bound(loop.exit_sources.begin(), loop.exit_sources.end(), b);
                    if (pos == loop.exit_sources.end() || *pos != b) loop.exit_sources.insert(pos, b);
                    loop.exit_addresses.insert(fn.blocks[s].instructions.front().address);
                }
        out.loops.push_back(loop);
    }
    for (auto& l : out.loops) {
        for (const auto& other : out.loops) {
            if (&other == &l || other.body.size() <= l.body.size()) continue;
            if (std::includes(other.body.begin(), other.body.end(), l.body.begin(), l.body.end())) {
                l.top_level = false;
                break;
            }
        }
    }
    return out;
}

inline FunctionLoops find_loops(const FunctionDef& fn) { return find_loops(fn, compute_dominators(fn)); }

/// Loops of every function in every module.
inline std::map<FuncRef, FunctionLoops> all_loops(const ProgramImage& image) {
    std::map<FuncRef, FunctionLoops> out;
    for (std::uint32_t mi = 0; mi < image.modules.size(); ++mi)
        for (std::uint32_t fi = 0; fi < image.modules[mi].functions.size(); ++fi)
            out.emplace(FuncRef{mi, fi}, find_loops(image.modules[mi].functions[fi]));
    return out;
}

/// A top-level loop together with the function that holds it.
struct LoopSite {
    FuncRef func{};
    Loop loop;
};

inline std::vector<LoopSite> top_level_loops(const std::map<FuncRef, FunctionLoops>& loops) {
    std::vector<LoopSite> out;
    for (const auto& [f, fl] : loops)
        for (const auto& l : fl.loops)
            if (l.top_level) out.push_back({f, l});
    return out;
}

}  // namespace phaseguard
