#pragma once

// PMIR JSON reading, validation and canonical serialization.
//
// Two document shapes are accepted, both tagged with "pmir_version":
//   module document: {"module": {...}, "program": {...}?}
//   image document:  {"modules": [...], "program": {...}, "filters": {...}?}
// Function references are a function id local to the referencing module or
// a qualified "module::id". serialize_image always writes an image document.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "phaseguard/pmir.hpp"

namespace phaseguard {

using Json = nlohmann::json;

namespace detail {

struct OpName {
    Op op;
    std::string_view name;
};

inline constexpr std::array<OpName, 17> kOpNames{{
    {Op::Const, "const"},           {Op::Move, "move"},           {Op::TakeAddr, "take_addr"},
    {Op::TakeAddrData, "take_addr_data"}, {Op::StrConst, "str_const"}, {Op::Load, "load"},
    {Op::Store, "store"},           {Op::Arith, "arith"},         {Op::Cmp, "cmp"},
    {Op::CallDirect, "call_direct"}, {Op::CallPlt, "call_plt"},   {Op::CallIndirect, "call_indirect"},
    {Op::Jump, "jump"},             {Op::CondJump, "cond_jump"},  {Op::Syscall, "syscall"},
    {Op::Ret, "ret"},               {Op::InstallFilter, "install_filter"},
}};

}  // namespace detail

inline std::string_view op_name(Op op) {
    for (const auto& e : detail::kOpNames)
        if (e.op == op) return e.name;
    return "?";
}

inline std::optional<Op> parse_op(std::string_view s) {
    for (const auto& e : detail::kOpNames)
        if (e.name == s) return e.op;
    return std::nullopt;
}

inline std::string_view module_kind_name(ModuleKind k) {
    return k == ModuleKind::Executable ? "executable" : "shared-library";
}

namespace detail {

inline std::string hex(std::uint64_t v) {
    std::ostringstream os;
    os << "0x" << std::hex << v;
    return os.str();
}

/// Pulls typed fields out of a JSON object, turning every shape problem
/// into a ValidationError that names the entity being read.
class Reader {
public:
    explicit Reader(std::string entity) : entity_(std::move(entity)) {}

    const Json& field(const Json& obj, const char* key) const {
        if (!obj.is_object() || !obj.contains(key))
            throw ValidationError("schema", entity_, std::string("missing field '") + key + "'");
        return obj.at(key);
    }
    std::string str(const Json& obj, const char* key) const {
        const Json& v = field(obj, key);
        if (!v.is_string()) throw ValidationError("schema", entity_, std::string("'") + key + "' must be a string");
        return v.get<std::string>();
    }
    std::uint64_t u64(const Json& obj, const char* key) const {
        const Json& v = field(obj, key);
        if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
            throw ValidationError("schema", entity_, std::string("'") + key + "' must be a non-negative integer");
        return v.get<std::uint64_t>();
    }
    std::int64_t i64(const Json& obj, const char* key) const {
        const Json& v = field(obj, key);
        if (!v.is_number_integer()) throw ValidationError("schema", entity_, std::string("'") + key + "' must be an integer");
        return v.get<std::int64_t>();
    }
    const Json& array(const Json& obj, const char* key) const {
        const Json& v = field(obj, key);
        if (!v.is_array()) throw ValidationError("schema", entity_, std::string("'") + key + "' must be an array");
        return v;
    }
    Reg reg(const Json& obj, const char* key) const {
        std::string name = str(obj, key);
        auto r = parse_reg(name);
        if (!r) throw ValidationError("register-set", entity_, "unknown register '" + name + "'");
        return *r;
    }
    const std::string& entity() const { return entity_; }

private:
    std::string entity_;
};

struct RawModule {
    Json body;
    std::string file;
};

class ImageBuilder {
public:
    explicit ImageBuilder(std::vector<RawModule> raws) : raws_(std::move(raws)) {}

    ProgramImage build(const Json* program, const Json* filters) {
        ProgramImage image;
        // Executable first, libraries keep their input order.
        std::stable_partition(raws_.begin(), raws_.end(), [](const RawModule& m) {
            return m.body.is_object() && m.body.value("kind", "") == "executable";
        });
        image.modules.resize(raws_.size());
        std::set<std::string> names;
        for (std::size_t i = 0; i < raws_.size(); ++i) {
            Reader rd(raws_[i].file);
            auto& mod = image.modules[i];
            mod.name = rd.str(raws_[i].body, "name");
            if (!names.insert(mod.name).second)
                throw ValidationError("unique-module-names", mod.name, "duplicate module name");
            std::string kind = rd.str(raws_[i].body, "kind");
            if (kind == "executable") mod.kind = ModuleKind::Executable;
            else if (kind == "shared-library") mod.kind = ModuleKind::SharedLibrary;
            else throw ValidationError("schema", mod.name, "unknown module kind '" + kind + "'");
            // Declare functions and objects first so references can resolve in any order.
            for (const Json& f : rd.array(raws_[i].body, "functions")) {
                FunctionDef fn;
                fn.id = Reader(mod.name).str(f, "id");
                if (mod.function_index(fn.id))
                    throw ValidationError("unique-function-ids", mod.name + "::" + fn.id, "duplicate function id");
                mod.functions.push_back(std::move(fn));
            }
            if (raws_[i].body.contains("data_objects")) {
                for (const Json& d : rd.array(raws_[i].body, "data_objects")) {
                    DataObject obj;
                    obj.id = Reader(mod.name).str(d, "id");
                    mod.data_objects.push_back(std::move(obj));
                }
            }
        }
        if (image.modules.empty() || image.modules[0].kind != ModuleKind::Executable)
            throw ValidationError("single-executable", "", "image has no executable module");
        if (image.modules.size() > 1 && image.modules[1].kind == ModuleKind::Executable)
            throw ValidationError("single-executable", image.modules[1].name, "more than one executable module");

        for (std::size_t i = 0; i < raws_.size(); ++i) fill_module(image, static_cast<std::uint32_t>(i));

        if (!program) throw ValidationError("schema", image.modules[0].name, "no 'program' section");
        fill_program(image, *program);
        if (filters) fill_filters(image, *filters);
        return image;
    }

private:
    static FuncRef resolve_func(const ProgramImage& image, std::uint32_t ctx, const std::string& ref,
                                const std::string& entity) {
        auto [mod, id] = split(image, ctx, ref, entity);
        auto fi = image.modules[mod].function_index(id);
        if (!fi) throw ValidationError("function-ref-resolves", entity, "unknown function '" + ref + "'");
        return FuncRef{mod, *fi};
    }

    static DataRef resolve_data(const ProgramImage& image, std::uint32_t ctx, const std::string& ref,
                                const std::string& entity) {
        auto [mod, id] = split(image, ctx, ref, entity);
        const auto& objs = image.modules[mod].data_objects;
        for (std::uint32_t i = 0; i < objs.size(); ++i)
            if (objs[i].id == id) return DataRef{mod, i};
        throw ValidationError("data-ref-resolves", entity, "unknown data object '" + ref + "'");
    }

    static std::pair<std::uint32_t, std::string> split(const ProgramImage& image, std::uint32_t ctx,
                                                       const std::string& ref, const std::string& entity) {
        auto pos = ref.find("::");
        if (pos == std::string::npos) return {ctx, ref};
        auto mi = image.module_index(ref.substr(0, pos));
        if (!mi) throw ValidationError("module-ref-resolves", entity, "unknown module in '" + ref + "'");
        return {*mi, ref.substr(pos + 2)};
    }

    void fill_module(ProgramImage& image, std::uint32_t mi) {
        const Json& body = raws_[mi].body;
        auto& mod = image.modules[mi];
        Reader rd(mod.name);
        const Json& fns = rd.array(body, "functions");
        for (std::size_t fi = 0; fi < fns.size(); ++fi) fill_function(image, mi, fns[fi], mod.functions[fi]);
        if (body.contains("exports")) {
            const Json& ex = rd.field(body, "exports");
            if (!ex.is_object()) throw ValidationError("schema", mod.name, "'exports' must be an object");
            for (auto it = ex.begin(); it != ex.end(); ++it) {
                if (!it.value().is_string()) throw ValidationError("schema", mod.name, "export target must be a string");
                auto fi = mod.function_index(it.value().get<std::string>());
                if (!fi)
                    throw ValidationError("exports-exist", mod.name + "::" + it.key(),
                                          "export names missing function '" + it.value().get<std::string>() + "'");
                mod.exports[it.key()] = *fi;
            }
        }
        if (body.contains("data_objects")) {
            const Json& objs = rd.array(body, "data_objects");
            for (std::size_t oi = 0; oi < objs.size(); ++oi) {
                auto& obj = mod.data_objects[oi];
                std::string entity = mod.name + "::" + obj.id;
                Reader ord(entity);
                if (objs[oi].contains("symbol")) obj.symbol = ord.str(objs[oi], "symbol");
                for (const Json& m : ord.array(objs[oi], "members")) {
                    if (!m.is_string()) throw ValidationError("schema", entity, "member must be a string");
                    obj.members.push_back(resolve_func(image, mi, m.get<std::string>(), entity));
                }
            }
        }
    }

    void fill_function(const ProgramImage& image, std::uint32_t mi, const Json& f, FunctionDef& fn) {
        std::string entity = image.modules[mi].name + "::" + fn.id;
        Reader rd(entity);
        fn.name = f.contains("name") ? rd.str(f, "name") : fn.id;
        fn.address = rd.u64(f, "address");
        const Json& blocks = rd.array(f, "blocks");
        for (const Json& b : blocks) {
            BasicBlock bb;
            bb.id = Reader(entity).str(b, "id");
            if (fn.block_index(bb.id)) throw ValidationError("unique-block-ids", entity + "/" + bb.id, "duplicate block id");
            fn.blocks.push_back(std::move(bb));
        }
        auto block_ref = [&](const std::string& id, const std::string& where) -> std::uint32_t {
            auto bi = fn.block_index(id);
            if (!bi) throw ValidationError("branch-target-exists", where + "->" + id, "no block '" + id + "' in " + entity);
            return *bi;
        };
        std::string entry = rd.str(f, "entry");
        auto ei = fn.block_index(entry);
        if (!ei) throw ValidationError("entry-block-exists", entity + "/" + entry, "entry block missing");
        fn.entry = *ei;
        for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
            auto& bb = fn.blocks[bi];
            std::string bentity = entity + "/" + bb.id;
            Reader brd(bentity);
            bb.address = brd.u64(blocks[bi], "address");
            if (blocks[bi].contains("successors"))
                for (const Json& s : brd.array(blocks[bi], "successors")) {
                    if (!s.is_string()) throw ValidationError("schema", bentity, "successor must be a block id");
                    bb.successors.push_back(block_ref(s.get<std::string>(), bentity));
                }
            for (const Json& ij : brd.array(blocks[bi], "instructions"))
                bb.instructions.push_back(read_instruction(image, mi, ij, bentity, block_ref));
        }
    }

    template <typename BlockRef>
    static Instruction read_instruction(const ProgramImage& image, std::uint32_t mi, const Json& j,
                                        const std::string& bentity, BlockRef&& block_ref) {
        Reader rd(bentity);
        Instruction in;
        in.address = rd.u64(j, "addr");
        std::string entity = bentity + "@" + hex(in.address);
        Reader ird(entity);
        std::string opn = ird.str(j, "op");
        auto op = parse_op(opn);
        if (!op) throw ValidationError("schema", entity, "unknown op '" + opn + "'");
        in.op = *op;
        switch (in.op) {
        case Op::Const:
            in.dst = ird.reg(j, "dst");
            in.imm = ird.i64(j, "imm");
            break;
        case Op::Move:
        case Op::Arith:
            in.dst = ird.reg(j, "dst");
            in.src = ird.reg(j, "src");
            break;
        case Op::TakeAddr:
            in.dst = ird.reg(j, "dst");
            in.func = resolve_func(image, mi, ird.str(j, "func"), entity);
            break;
        case Op::TakeAddrData:
            in.dst = ird.reg(j, "dst");
            in.data = resolve_data(image, mi, ird.str(j, "object"), entity);
            break;
        case Op::StrConst:
            in.dst = ird.reg(j, "dst");
            in.text = ird.str(j, "str");
            break;
        case Op::Load:
            in.dst = ird.reg(j, "dst");
            break;
        case Op::Store:
            in.dst = ird.reg(j, "src");
            break;
        case Op::Cmp:
            in.dst = ird.reg(j, "a");
            in.src = ird.reg(j, "b");
            break;
        case Op::CallDirect:
            in.func = resolve_func(image, mi, ird.str(j, "func"), entity);
            break;
        case Op::CallPlt:
            in.text = ird.str(j, "symbol");
            if (in.text.empty()) throw ValidationError("schema", entity, "empty PLT symbol");
            break;
        case Op::CallIndirect:
            in.dst = ird.reg(j, "reg");
            break;
        case Op::Jump:
            in.target = block_ref(ird.str(j, "target"), entity);
            break;
        case Op::CondJump:
            in.target = block_ref(ird.str(j, "taken"), entity);
            in.target_false = block_ref(ird.str(j, "not_taken"), entity);
            break;
        case Op::InstallFilter:
            in.imm = ird.i64(j, "partition");
            break;
        case Op::Syscall:
        case Op::Ret:
            break;
        }
        return in;
    }

    static void fill_program(ProgramImage& image, const Json& p) {
        Reader rd("program");
        image.main_function = resolve_func(image, 0, rd.str(p, "main"), "program.main");
        auto list = [&](const char* key, std::vector<FuncRef>& out) {
            if (!p.contains(key)) return;
            for (const Json& r : rd.array(p, key)) {
                if (!r.is_string()) throw ValidationError("schema", std::string("program.") + key, "expected function reference");
                out.push_back(resolve_func(image, 0, r.get<std::string>(), std::string("program.") + key));
            }
        };
        list("init", image.init_functions);
        list("preinit", image.preinit_functions);
        list("fini", image.fini_functions);
        if (p.contains("library_corpus_path")) image.library_corpus_path = rd.str(p, "library_corpus_path");
    }

    static void fill_filters(ProgramImage& image, const Json& f) {
        if (!f.is_object()) throw ValidationError("schema", "filters", "'filters' must be an object");
        for (auto it = f.begin(); it != f.end(); ++it) {
            std::uint32_t id = 0;
            try {
                id = static_cast<std::uint32_t>(std::stoul(it.key()));
            } catch (const std::exception&) {
                throw ValidationError("schema", "filters." + it.key(), "partition id must be numeric");
            }
            Reader rd("filters." + it.key());
            std::vector<SockFilter> prog;
            if (!it.value().is_array()) throw ValidationError("schema", rd.entity(), "filter must be an array");
            for (const Json& ins : it.value()) {
                SockFilter sf;
                sf.code = static_cast<std::uint16_t>(rd.u64(ins, "code"));
                sf.jt = static_cast<std::uint8_t>(rd.u64(ins, "jt"));
                sf.jf = static_cast<std::uint8_t>(rd.u64(ins, "jf"));
                sf.k = static_cast<std::uint32_t>(rd.u64(ins, "k"));
                prog.push_back(sf);
            }
            image.filters[id] = std::move(prog);
        }
    }

    std::vector<RawModule> raws_;
};

}  // namespace detail

/// Checks every structural invariant of a resolved image. Throws
/// ValidationError naming the invariant and the entity.
inline void validate_image(const ProgramImage& image) {
    if (image.modules.empty() || image.modules[0].kind != ModuleKind::Executable)
        throw ValidationError("single-executable", "", "image has no executable module");
    std::set<std::string> names;
    std::unordered_set<std::uint64_t> addresses;
    for (std::uint32_t mi = 0; mi < image.modules.size(); ++mi) {
        const auto& mod = image.modules[mi];
        if (mi > 0 && mod.kind == ModuleKind::Executable)
            throw ValidationError("single-executable", mod.name, "more than one executable module");
        if (!names.insert(mod.name).second) throw ValidationError("unique-module-names", mod.name, "duplicate module name");
        std::set<std::uint64_t> fn_addrs;
        std::set<std::string> fn_ids;
        for (const auto& fn : mod.functions) {
            std::string entity = mod.name + "::" + fn.id;
            if (!fn_ids.insert(fn.id).second) throw ValidationError("unique-function-ids", entity, "duplicate function id");
            if (!fn_addrs.insert(fn.address).second)
                throw ValidationError("unique-function-addresses", entity, "function address reused in module");
            if (fn.blocks.empty()) throw ValidationError("nonempty-function", entity, "function has no blocks");
            if (fn.entry >= fn.blocks.size()) throw ValidationError("entry-block-exists", entity, "entry block missing");
            std::set<std::string> block_ids;
            for (std::size_t bi = 0; bi < fn.blocks.size(); ++bi) {
                const auto& bb = fn.blocks[bi];
                std::string bentity = entity + "/" + bb.id;
                if (!block_ids.insert(bb.id).second) throw ValidationError("unique-block-ids", bentity, "duplicate block id");
                if (bi > 0 && bb.address <= fn.blocks[bi - 1].address)
                    throw ValidationError("block-address-order", bentity, "block addresses must strictly increase");
                if (bb.instructions.empty()) throw ValidationError("nonempty-block", bentity, "block has no instructions");
                for (std::size_t ii = 0; ii < bb.instructions.size(); ++ii) {
                    const auto& in = bb.instructions[ii];
                    if (!addresses.insert(in.address).second)
                        throw ValidationError("unique-instruction-address", bentity + "@" + detail::hex(in.address),
                                              "instruction address reused in image");
                    if (in.is_terminator() && ii + 1 != bb.instructions.size())
                        throw ValidationError("terminator-last", bentity + "@" + detail::hex(in.address),
                                              "terminator must end its block");
                    if ((in.op == Op::Jump || in.op == Op::CondJump) &&
                        (in.target >= fn.blocks.size() || in.target_false >= fn.blocks.size()))
                        throw ValidationError("branch-target-exists", bentity, "branch target outside function");
                    if (in.op == Op::TakeAddr || in.op == Op::CallDirect) {
                        if (in.func.module >= image.modules.size() ||
                            in.func.function >= image.modules[in.func.module].functions.size())
                            throw ValidationError("function-ref-resolves", bentity, "dangling function reference");
                    }
                    if (in.op == Op::TakeAddrData) {
                        if (in.data.module >= image.modules.size() ||
                            in.data.object >= image.modules[in.data.module].data_objects.size())
                            throw ValidationError("data-ref-resolves", bentity, "dangling data reference");
                    }
                    if (in.op == Op::CallPlt && in.text.empty())
                        throw ValidationError("schema", bentity, "empty PLT symbol");
                }
                const Instruction& last = bb.instructions.back();
                std::vector<std::uint32_t> expect;
                bool fallthrough = false;
                switch (last.op) {
                case Op::Ret: break;
                case Op::Jump: expect = {last.target}; break;
                case Op::CondJump: expect = {last.target, last.target_false}; break;
                default: fallthrough = true; break;
                }
                if (fallthrough) {
                    if (bb.successors.size() != 1)
                        throw ValidationError("successors-match-terminator", bentity,
                                              "fallthrough block needs exactly one successor");
                    if (bb.successors[0] >= fn.blocks.size())
                        throw ValidationError("branch-target-exists", bentity, "successor outside function");
                } else if (bb.successors != expect) {
                    throw ValidationError("successors-match-terminator", bentity,
                                          "successor list disagrees with " + std::string(op_name(last.op)));
                }
            }
        }
        for (const auto& [sym, fi] : mod.exports)
            if (fi >= mod.functions.size()) throw ValidationError("exports-exist", mod.name + "::" + sym, "export target missing");
        for (const auto& obj : mod.data_objects)
            for (FuncRef m : obj.members)
                if (m.module >= image.modules.size() || m.function >= image.modules[m.module].functions.size())
                    throw ValidationError("data-member-resolves", mod.name + "::" + obj.id, "dangling member");
    }
    if (image.main_function.module != 0 || image.main_function.function >= image.modules[0].functions.size())
        throw ValidationError("main-in-executable", "program.main", "main must resolve inside the executable");
    for (const auto* list : {&image.init_functions, &image.preinit_functions, &image.fini_functions})
        for (FuncRef r : *list)
            if (r.module >= image.modules.size() || r.function >= image.modules[r.module].functions.size())
                throw ValidationError("function-ref-resolves", "program", "dangling loader function");
}

/// Builds and validates an image from already-parsed documents.
inline ProgramImage image_from_json(const std::vector<std::pair<std::string, Json>>& docs) {
    std::vector<detail::RawModule> raws;
    const Json* program = nullptr;
    const Json* filters = nullptr;
    for (const auto& [file, doc] : docs) {
        if (!doc.is_object() || !doc.contains("pmir_version"))
            throw ValidationError("schema", file, "missing pmir_version");
        if (doc.at("pmir_version") != kPmirVersion)
            throw ValidationError("pmir-version", file, "unsupported pmir_version " + doc.at("pmir_version").dump());
        if (doc.contains("module")) raws.push_back({doc.at("module"), file});
        if (doc.contains("modules")) {
            if (!doc.at("modules").is_array()) throw ValidationError("schema", file, "'modules' must be an array");
            for (const Json& m : doc.at("modules")) raws.push_back({m, file});
        }
        if (doc.contains("program")) {
            if (program) throw ValidationError("single-program-section", file, "more than one 'program' section");
            program = &doc.at("program");
        }
        if (doc.contains("filters")) filters = &doc.at("filters");
    }
    ProgramImage image = detail::ImageBuilder(std::move(raws)).build(program, filters);
    validate_image(image);
    return image;
}

inline Json parse_json_text(const std::string& text, const std::string& file) {
    try {
        return Json::parse(text);
    } catch (const Json::parse_error& e) {
        throw ParseError(file, e.byte, e.what());
    }
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("io", path.string(), "cannot open file");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline Json read_json_file(const std::filesystem::path& path) {
    return parse_json_text(read_file(path), path.string());
}

/// Loads one or more PMIR files into a validated image. Link emulation is
/// not performed here.
inline ProgramImage load_image(const std::vector<std::filesystem::path>& paths) {
    std::vector<std::pair<std::string, Json>> docs;
    for (const auto& p : paths) docs.emplace_back(p.string(), read_json_file(p));
    return image_from_json(docs);
}

/// Loads a single module document without a program section (library corpus entries).
inline ModuleUnit load_module_file(const std::filesystem::path& path) {
    Json doc = read_json_file(path);
    if (!doc.is_object() || !doc.contains("module"))
        throw ValidationError("schema", path.string(), "not a module document");
    // Wrap in a throwaway executable so references resolve through the normal path.
    Json shell = {{"name", "__shell__"}, {"kind", "executable"}, {"functions", Json::array({
        {{"id", "m"}, {"address", 0}, {"entry", "b"}, {"blocks", Json::array({
            {{"id", "b"}, {"address", 0}, {"instructions", Json::array({{{"addr", 0}, {"op", "ret"}}})}}})}}})}};
    Json module_body = doc.at("module");
    if (module_body.is_object() && module_body.value("kind", "") == "executable")
        throw ValidationError("schema", path.string(), "corpus entries must be shared libraries");
    std::vector<detail::RawModule> raws{{shell, "<shell>"}, {module_body, path.string()}};
    Json program = {{"main", "m"}};
    ProgramImage img = detail::ImageBuilder(std::move(raws)).build(&program, nullptr);
    for (const auto& fn : img.modules[1].functions)
        for (const auto& bb : fn.blocks)
            for (const auto& in : bb.instructions)
                if ((in.op == Op::TakeAddr || in.op == Op::CallDirect) && in.func.module != 1)
                    throw ValidationError("function-ref-resolves", img.modules[1].name,
                                          "corpus module references another module directly");
    return img.modules[1];
}

// ---------------------------------------------------------------------------
// Serialization

namespace detail {

inline std::string func_ref_string(const ProgramImage& image, std::uint32_t ctx, FuncRef r) {
    if (r.module == ctx) return image.function(r).id;
    return image.qualified_name(r);
}

inline std::string data_ref_string(const ProgramImage& image, std::uint32_t ctx, DataRef r) {
    const auto& id = image.object(r).id;
    if (r.module == ctx) return id;
    return image.modules[r.module].name + "::" + id;
}

inline Json instruction_json(const ProgramImage& image, std::uint32_t mi, const FunctionDef& fn, const Instruction& in) {
    Json j = {{"addr", in.address}, {"op", std::string(op_name(in.op))}};
    auto reg = [](Reg r) { return std::string(reg_name(r)); };
    switch (in.op) {
    case Op::Const: j["dst"] = reg(in.dst); j["imm"] = in.imm; break;
    case Op::Move:
    case Op::Arith: j["dst"] = reg(in.dst); j["src"] = reg(in.src); break;
    case Op::TakeAddr: j["dst"] = reg(in.dst); j["func"] = func_ref_string(image, mi, in.func); break;
    case Op::TakeAddrData: j["dst"] = reg(in.dst); j["object"] = data_ref_string(image, mi, in.data); break;
    case Op::StrConst: j["dst"] = reg(in.dst); j["str"] = in.text; break;
    case Op::Load: j["dst"] = reg(in.dst); break;
    case Op::Store: j["src"] = reg(in.dst); break;
    case Op::Cmp: j["a"] = reg(in.dst); j["b"] = reg(in.src); break;
    case Op::CallDirect: j["func"] = func_ref_string(image, mi, in.func); break;
    case Op::CallPlt: j["symbol"] = in.text; break;
    case Op::CallIndirect: j["reg"] = reg(in.dst); break;
    case Op::Jump: j["target"] = fn.blocks[in.target].id; break;
    case Op::CondJump:
        j["taken"] = fn.blocks[in.target].id;
        j["not_taken"] = fn.blocks[in.target_false].id;
        break;
    case Op::InstallFilter: j["partition"] = in.imm; break;
    case Op::Syscall:
    case Op::Ret: break;
    }
    return j;
}

inline Json module_json(const ProgramImage& image, std::uint32_t mi) {
    const auto& mod = image.modules[mi];
    Json fns = Json::array();
    for (const auto& fn : mod.functions) {
        Json blocks = Json::array();
        for (const auto& bb : fn.blocks) {
            Json ins = Json::array();
            for (const auto& in : bb.instructions) ins.push_back(instruction_json(image, mi, fn, in));
            Json succ = Json::array();
            for (auto s : bb.successors) succ.push_back(fn.blocks[s].id);
            blocks.push_back({{"id", bb.id}, {"address", bb.address}, {"instructions", ins}, {"successors", succ}});
        }
        fns.push_back({{"id", fn.id}, {"name", fn.name}, {"address", fn.address},
                       {"entry", fn.blocks[fn.entry].id}, {"blocks", blocks}});
    }
    Json exports = Json::object();
    for (const auto& [sym, fi] : mod.exports) exports[sym] = mod.functions[fi].id;
    Json objs = Json::array();
    for (const auto& obj : mod.data_objects) {
        Json members = Json::array();
        for (auto m : obj.members) members.push_back(func_ref_string(image, mi, m));
        Json o = {{"id", obj.id}, {"members", members}};
        if (obj.symbol) o["symbol"] = *obj.symbol;
        objs.push_back(o);
    }
    return {{"name", mod.name}, {"kind", std::string(module_kind_name(mod.kind))},
            {"functions", fns}, {"exports", exports}, {"data_objects", objs}};
}

}  // namespace detail

inline Json image_to_json(const ProgramImage& image) {
    Json modules = Json::array();
    for (std::uint32_t mi = 0; mi < image.modules.size(); ++mi) modules.push_back(detail::module_json(image, mi));
    auto refs = [&](const std::vector<FuncRef>& v) {
        Json a = Json::array();
        for (auto r : v) a.push_back(detail::func_ref_string(image, 0, r));
        return a;
    };
    Json program = {{"main", detail::func_ref_string(image, 0, image.main_function)},
                    {"init", refs(image.init_functions)},
                    {"preinit", refs(image.preinit_functions)},
                    {"fini", refs(image.fini_functions)},
                    {"library_corpus_path", image.library_corpus_path}};
    Json doc = {{"pmir_version", kPmirVersion}, {"modules", modules}, {"program", program}};
    if (!image.filters.empty()) {
        Json filters = Json::object();
        for (const auto& [id, prog] : image.filters) {
            Json arr = Json::array();
            for (const auto& f : prog) arr.push_back({{"code", f.code}, {"jt", f.jt}, {"jf", f.jf}, {"k", f.k}});
            filters[std::to_string(id)] = arr;
        }
        doc["filters"] = filters;
    }
    return doc;
}

/// Canonical bytes: object keys sorted, two-space indentation, trailing newline.
inline std::string serialize_image(const ProgramImage& image) { return image_to_json(image).dump(2) + "\n"; }

inline ProgramImage parse_image_text(const std::string& text, const std::string& name = "<memory>") {
    return image_from_json({{name, parse_json_text(text, name)}});
}

}  // namespace phaseguard
