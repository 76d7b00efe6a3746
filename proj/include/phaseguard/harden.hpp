#pragma once

// Places filter installation in front of a main loop.

#include <algorithm>
#include <string>

#include "phaseguard/bpf.hpp"
#include "phaseguard/cfg_loops.hpp"
#include "phaseguard/pmir.hpp"

namespace phaseguard {

inline std::uint64_t max_instruction_address(const ProgramImage& image) {
    std::uint64_t m = 0;
    for (const auto& mod : image.modules)
        for (const auto& fn : mod.functions)
            for (const auto& bb : fn.blocks) {
                m = std::max(m, bb.address);
                for (const auto& in : bb.instructions) m = std::max(m, in.address);
            }
    return m;
}

struct InsertionSite {
    std::uint32_t block = 0;       // block holding the install instruction
    bool synthesized = false;      // a new preheader block was created
    std::uint64_t address = 0;     // address of the install instruction
};

/// Installs filter `partition` on every path into the loop headed at
/// `header_address` without executing it inside the loop.
///
/// The install goes into the header's sole outside predecessor when that
/// block leads only to the header (and keeps its first instruction);
/// otherwise a preheader holding just the install is created and every
/// outside edge into the header is redirected through it.
inline InsertionSite insert_filter(ProgramImage& image, FuncRef func, std::uint64_t header_address,
                                   std::uint32_t partition, const bpf::Program& program) {
    FunctionDef& fn = image.function(func);
    std::string entity = image.qualified_name(func);
    auto hit = std::find_if(fn.blocks.begin(), fn.blocks.end(), [&](const BasicBlock& b) {
        return b.instructions.front().address == header_address;
    });
    if (hit == fn.blocks.end()) throw Error("harden", entity, "no block starts at the transition point");
    auto h = static_cast<std::uint32_t>(hit - fn.blocks.begin());

    auto loops = find_loops(fn);
    auto lit = std::find_if(loops.loops.begin(), loops.loops.end(), [&](const Loop& l) { return l.header == h; });
    if (lit == loops.loops.end()) throw Error("harden", entity, "transition point is not a loop header");
    const BlockSet body = lit->body;

    auto preds = predecessors(fn);
    std::vector<std::uint32_t> outside;
    for (auto p : preds[h])
        if (!contains(body, p)) outside.push_back(p);

    std::uint64_t addr = max_instruction_address(image) + 1;
    Instruction install;
    install.address = addr;
    install.op = Op::InstallFilter;
    install.imm = partition;
    image.filters[partition] = program;

    InsertionSite site;
    site.address = addr;
    if (outside.size() == 1) {
        auto& b = fn.blocks[outside.front()];
        bool only_header = std::all_of(b.successors.begin(), b.successors.end(), [&](auto s) { return s == h; });
        bool ends_in_terminator = b.instructions.back().is_terminator();
        if (only_header && (!ends_in_terminator || b.instructions.size() >= 2)) {
            auto pos = ends_in_terminator ? b.instructions.end() - 1 : b.instructions.end();
            b.instructions.insert(pos, install);
            site.block = outside.front();
            return site;
        }
    }

    BasicBlock pre;
    pre.id = "preheader." + std::to_string(partition);
    pre.address = addr;
    pre.instructions.push_back(install);
    pre.successors = {h};
    auto n = static_cast<std::uint32_t>(fn.blocks.size());
    for (auto p : outside) {
        auto& b = fn.blocks[p];
        for (auto& s : b.successors)
            if (s == h) s = n;
        auto& last = b.instructions.back();
        if (last.op == Op::Jump || last.op == Op::CondJump) {
            if (last.target == h) last.target = n;
            if (last.op == Op::CondJump && last.target_false == h) last.target_false = n;
        }
    }
    if (fn.entry == h) fn.entry = n;
    fn.blocks.push_back(std::move(pre));
    site.block = n;
    site.synthesized = true;
    return site;
}

/// Copy of `image` with every install instruction and synthesized preheader
/// removed, for comparing analyses before and after hardening.
inline ProgramImage strip_filters(ProgramImage image) {
    image.filters.clear();
    for (auto& mod : image.modules)
        for (auto& fn : mod.functions) {
            for (auto& bb : fn.blocks)
                std::erase_if(bb.instructions, [](const Instruction& in) { return in.op == Op::InstallFilter; });
            // A preheader is left empty; route its predecessors to its successor.
            for (std::uint32_t b = 0; b < fn.blocks.size(); ++b) {
                if (!fn.blocks[b].instructions.empty()) continue;
                std::uint32_t to = fn.blocks[b].successors.front();
                for (auto& other : fn.blocks) {
                    for (auto& s : other.successors)
                        if (s == b) s = to;
                    if (other.instructions.empty()) continue;
                    auto& last = other.instructions.back();
                    if (last.op == Op::Jump || last.op == Op::CondJump) {
                        if (last.target == b) last.target = to;
                        if (last.op == Op::CondJump && last.target_false == b) last.target_false = to;
                    }
                }
                if (fn.entry == b) fn.entry = to;
            }
            std::vector<std::uint32_t> remap(fn.blocks.size());
            std::vector<BasicBlock> kept;
            for (std::uint32_t b = 0; b < fn.blocks.size(); ++b) {
                remap[b] = static_cast<std::uint32_t>(kept.size());
                if (!fn.blocks[b].instructions.empty()) kept.push_back(std::move(fn.blocks[b]));
            }
            for (auto& bb : kept) {
                for (auto& s : bb.successors) s = remap[s];
                auto& last = bb.instructions.back();
                if (last.op == Op::Jump || last.op == Op::CondJump) {
                    last.target = remap[last.target];
                    if (last.op == Op::CondJump) last.target_false = remap[last.target_false];
                }
            }
            fn.entry = remap[fn.entry];
            fn.blocks = std::move(kept);
        }
    return image;
}

}  // namespace phaseguard
