#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <unordered_map>

#include "phaseguard/pmir.hpp"

namespace phaseguard {

struct InstrLoc {
    FuncRef func{};
    std::uint32_t block = 0;
    std::uint32_t index = 0;
    auto operator<=>(const InstrLoc&) const = default;
};

/// Address lookups over an image. Holds a reference; the image must outlive it.
class ImageIndex {
public:
    explicit ImageIndex(const ProgramImage& image) : image_(&image) {
        for (std::uint32_t mi = 0; mi < image.modules.size(); ++mi) {
            const auto& mod = image.modules[mi];
            for (std::uint32_t fi = 0; fi < mod.functions.size(); ++fi) {
                const auto& fn = mod.functions[fi];
                FuncRef ref{mi, fi};
                by_func_addr_.emplace(fn.address, ref);
                for (std::uint32_t bi = 0; bi < fn.blocks.size(); ++bi)
                    for (std::uint32_t ii = 0; ii < fn.blocks[bi].instructions.size(); ++ii)
                        by_addr_.emplace(fn.blocks[bi].instructions[ii].address, InstrLoc{ref, bi, ii});
            }
        }
    }

    const ProgramImage& image() const { return *image_; }

    std::optional<InstrLoc> find(std::uint64_t address) const {
        auto it = by_addr_.find(address);
        if (it == by_addr_.end()) return std::nullopt;
        return it->second;
    }

    std::optional<FuncRef> function_at(std::uint64_t address) const {
        auto it = by_func_addr_.find(address);
        if (it == by_func_addr_.end()) return std::nullopt;
        return it->second;
    }

    const Instruction& at(const InstrLoc& loc) const {
        return image_->function(loc.func).blocks[loc.block].instructions[loc.index];
    }

    std::size_t instruction_count() const { return by_addr_.size(); }

private:
    const ProgramImage* image_;
    std::unordered_map<std::uint64_t, InstrLoc> by_addr_;
    std::unordered_map<std::uint64_t, FuncRef> by_func_addr_;
};

/// Appends a standalone library module (as produced by load_module_file,
/// whose self references carry module index 1) to `image`.
inline std::uint32_t append_library(ProgramImage& image, ModuleUnit mod) {
    auto idx = static_cast<std::uint32_t>(image.modules.size());
    auto fix = [&](std::uint32_t& m) { m = idx; };
    for (auto& fn : mod.functions)
        for (auto& bb : fn.blocks)
            for (auto& in : bb.instructions) {
                if (in.op == Op::TakeAddr || in.op == Op::CallDirect) fix(in.func.module);
                if (in.op == Op::TakeAddrData) fix(in.data.module);
            }
    for (auto& obj : mod.data_objects)
        for (auto& m : obj.members) fix(m.module);
    image.modules.push_back(std::move(mod));
    return idx;
}

/// ELF-style global lookup: the executable's exports first, then each
/// library in dependency order. Only the first `module_limit` modules are
/// searched (all when 0).
inline std::optional<FuncRef> lookup_export(const ProgramImage& image, std::string_view symbol,
                                            std::size_t module_limit = 0) {
    std::size_t n = module_limit ? std::min(module_limit, image.modules.size()) : image.modules.size();
    for (std::uint32_t mi = 0; mi < n; ++mi) {
        const auto& ex = image.modules[mi].exports;
        auto it = ex.find(std::string(symbol));
        if (it != ex.end()) return FuncRef{mi, it->second};
    }
    return std::nullopt;
}

/// Library names compare without directory and without a ".so" suffix
/// (optionally versioned, e.g. "libfoo.so.1").
inline std::string normalize_library_name(std::string_view name) {
    auto slash = name.rfind('/');
    if (slash != std::string_view::npos) name = name.substr(slash + 1);
    auto so = name.find(".so");
    if (so != std::string_view::npos) name = name.substr(0, so);
    return std::string(name);
}

}  // namespace phaseguard
