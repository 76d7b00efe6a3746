#pragma once

// Small builder for PMIR test images. Addresses are assigned in build order
// and every image goes through the normal JSON reader and validator.

#include <deque>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "phaseguard/pmir_io.hpp"

namespace pgtest {

using nlohmann::json;

struct BlockB {
    std::string label;
    json ins = json::array();
    std::string fall;

    BlockB& add(json j) {
        ins.push_back(std::move(j));
        return *this;
    }
    BlockB& cnst(const std::string& d, std::int64_t v) { return add({{"op", "const"}, {"dst", d}, {"imm", v}}); }
    BlockB& mov(const std::string& d, const std::string& s) { return add({{"op", "move"}, {"dst", d}, {"src", s}}); }
    BlockB& take(const std::string& d, const std::string& f) { return add({{"op", "take_addr"}, {"dst", d}, {"func", f}}); }
    BlockB& take_data(const std::string& d, const std::string& o) {
        return add({{"op", "take_addr_data"}, {"dst", d}, {"object", o}});
    }
    BlockB& str(const std::string& d, const std::string& s) { return add({{"op", "str_const"}, {"dst", d}, {"str", s}}); }
    BlockB& load(const std::string& d) { return add({{"op", "load"}, {"dst", d}}); }
    BlockB& store(const std::string& s) { return add({{"op", "store"}, {"src", s}}); }
    BlockB& arith(const std::string& d, const std::string& s) { return add({{"op", "arith"}, {"dst", d}, {"src", s}}); }
    BlockB& cmp(const std::string& a, const std::string& b) { return add({{"op", "cmp"}, {"a", a}, {"b", b}}); }
    BlockB& call(const std::string& f) { return add({{"op", "call_direct"}, {"func", f}}); }
    BlockB& plt(const std::string& s) { return add({{"op", "call_plt"}, {"symbol", s}}); }
    BlockB& icall(const std::string& r) { return add({{"op", "call_indirect"}, {"reg", r}}); }
    BlockB& jmp(const std::string& t) { return add({{"op", "jump"}, {"target", t}}); }
    BlockB& br(const std::string& t, const std::string& f) { return add({{"op", "cond_jump"}, {"taken", t}, {"not_taken", f}}); }
    BlockB& sys() { return add({{"op", "syscall"}}); }
    BlockB& ret() { return add({{"op", "ret"}}); }
    BlockB& then(const std::string& next) {
        fall = next;
        return *this;
    }
};

struct FuncB {
    std::string id;
    std::deque<BlockB> blocks;
    BlockB& block(const std::string& label) {
        blocks.push_back(BlockB{label});
        return blocks.back();
    }
};

struct ModuleB {
    std::string name;
    std::string kind = "executable";
    std::uint64_t base = 0x400000;
    std::deque<FuncB> funcs;
    json exports = json::object();
    json objects = json::array();

    FuncB& func(const std::string& id, bool exported = false) {
        funcs.push_back(FuncB{id, {}});
        if (exported) exports[id] = id;
        return funcs.back();
    }
    void object(const std::string& id, std::vector<std::string> members) {
        objects.push_back({{"id", id}, {"members", members}});
    }

    json to_json() const {
        std::uint64_t addr = base;
        json fs = json::array();
        for (const auto& f : funcs) {
            addr = (addr + 0xff) & ~std::uint64_t{0xff};
            json blocks = json::array();
            std::uint64_t faddr = addr;
            for (std::size_t i = 0; i < f.blocks.size(); ++i) {
                const auto& b = f.blocks[i];
                json ins = json::array();
                std::uint64_t baddr = addr;
                for (auto in : b.ins) {
                    in["addr"] = addr;
                    addr += 4;
                    ins.push_back(in);
                }
                json succ = json::array();
                const json& last = b.ins.back();
                std::string op = last["op"];
                if (op == "jump") succ.push_back(last["target"]);
                else if (op == "cond_jump") succ = {last["taken"], last["not_taken"]};
                else if (op != "ret") succ.push_back(!b.fall.empty() ? b.fall : f.blocks.at(i + 1).label);
                blocks.push_back({{"id", b.label}, {"address", baddr}, {"successors", succ}, {"instructions", ins}});
            }
            fs.push_back({{"id", f.id}, {"address", faddr}, {"entry", f.blocks.front().label}, {"blocks", blocks}});
        }
        json m = {{"name", name}, {"kind", kind}, {"functions", fs}, {"exports", exports}};
        if (!objects.empty()) m["data_objects"] = objects;
        return m;
    }
};

/// libc with one wrapper per (name, nr) plus the runtime entry points.
inline ModuleB make_libc(std::vector<std::pair<std::string, int>> wrappers = {
                             {"read", 0}, {"write", 1}, {"close", 3}, {"socket", 41}, {"bind", 49}, {"listen", 50},
                             {"accept", 43}, {"sendto", 44}, {"getpid", 39}, {"ptrace", 101}}) {
    ModuleB m{"libc.so.6", "shared-library", 0x7f000000};
    for (const auto& [n, nr] : wrappers) m.func(n, true).block("b0").cnst("rax", nr).sys().ret();
    m.func("exit", true).block("b0").cnst("rax", 231).sys().ret();
    m.func("pthread_create", true).block("b0").cnst("rax", 56).sys().ret();
    m.func("dlopen", true).block("b0").cnst("rax", 257).sys().ret();
    m.func("dlsym", true).block("b0").ret();
    m.func("execve", true).block("b0").cnst("rax", 59).sys().ret();
    return m;
}

inline json program(const std::string& main, std::vector<std::string> fini = {}, std::vector<std::string> init = {}) {
    json p = {{"main", main}};
    if (!fini.empty()) p["fini"] = fini;
    if (!init.empty()) p["init"] = init;
    return p;
}

inline phaseguard::ProgramImage build(const ModuleB& exe, const json& prog, const std::vector<const ModuleB*>& libs = {}) {
    std::vector<std::pair<std::string, json>> docs;
    docs.push_back({exe.name, {{"pmir_version", 1}, {"module", exe.to_json()}, {"program", prog}}});
    for (const auto* l : libs) docs.push_back({l->name, {{"pmir_version", 1}, {"module", l->to_json()}}});
    return phaseguard::image_from_json(docs);
}

/// Writes `lib` as a corpus file in `dir` and returns the path.
inline std::filesystem::path write_library(const ModuleB& lib, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    auto path = dir / (lib.name + ".pmir.json");
    std::ofstream(path) << json{{"pmir_version", 1}, {"module", lib.to_json()}}.dump(1);
    return path;
}

inline std::filesystem::path temp_dir(const std::string& name) {
    auto d = std::filesystem::temp_directory_path() / ("phaseguard_test_" + name);
    std::filesystem::remove_all(d);
    std::filesystem::create_directories(d);
    return d;
}

/// Address of instruction `index` in block `block` of `func` in module `m`.
inline std::uint64_t addr_of(const phaseguard::ProgramImage& image, const std::string& func, const std::string& block,
                             std::size_t index = 0, std::uint32_t m = 0) {
    const auto& mod = image.modules.at(m);
    const auto& fn = mod.functions.at(*mod.function_index(func));
    return fn.blocks.at(*fn.block_index(block)).instructions.at(index).address;
}

inline phaseguard::FuncRef ref_of(const phaseguard::ProgramImage& image, const std::string& func, std::uint32_t m = 0) {
    return {m, *image.modules.at(m).function_index(func)};
}

}  // namespace pgtest
