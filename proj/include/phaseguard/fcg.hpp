#pragma once

// Cross-module function-call graph rooted at main and the loader-invoked
// functions. PLT calls are bound by emulating the dynamic linker's global
// lookup; indirect calls fan out to every address-taken (AT) function.

#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "phaseguard/image_index.hpp"
#include "phaseguard/pmir.hpp"

namespace phaseguard {

enum class EdgeKind : std::uint8_t { Direct, Plt, IndirectResolved, IndirectAt };

inline std::string_view edge_kind_name(EdgeKind k) {
    switch (k) {
    case EdgeKind::Direct: return "direct";
    case EdgeKind::Plt: return "plt";
    case EdgeKind::IndirectResolved: return "indirect-resolved";
    case EdgeKind::IndirectAt: return "indirect-at";
    }
    return "?";
}

struct CallEdge {
    std::uint64_t site = 0;
    FuncRef caller{};
    FuncRef callee{};
    EdgeKind kind = EdgeKind::Direct;
    auto operator<=>(const CallEdge&) const = default;
};

enum class TakeKind : std::uint8_t { Instruction, DataObject, Dlsym };

struct TakeSite {
    std::uint64_t address = 0;  // take_addr / take_addr_data / dlsym call address
    TakeKind kind = TakeKind::Instruction;
    auto operator<=>(const TakeSite&) const = default;
};

struct ExternalCall {
    std::uint64_t site = 0;
    FuncRef caller{};
    std::string symbol;
    auto operator<=>(const ExternalCall&) const = default;
};

/// A dlsym result marked address-taken at the dlsym callsite.
struct DlsymTake {
    std::uint64_t site = 0;
    FuncRef function{};
    auto operator<=>(const DlsymTake&) const = default;
};

/// Decisions of the refinement passes, applied while (re)building the graph.
struct Refinements {
    std::set<FuncRef> removed_at;                              // forward VFA
    std::map<std::uint64_t, std::set<FuncRef>> forward_edges;  // forward VFA precise targets per site
    std::map<std::uint64_t, std::set<FuncRef>> resolved_sites; // backward VFA
    std::set<std::pair<std::uint64_t, FuncRef>> typearmor_pruned;
    bool operator==(const Refinements&) const = default;
};

struct Fcg {
    std::set<FuncRef> nodes;
    std::set<CallEdge> edges;
    std::set<FuncRef> at_set;
    std::map<FuncRef, std::set<TakeSite>> at_sites;
    std::set<DataRef> live_objects;
    std::set<ExternalCall> externals;
    std::set<std::pair<std::uint64_t, FuncRef>> indirect_sites;  // (site, caller) in reachable code
    std::vector<std::string> warnings;

    std::map<std::uint64_t, std::vector<CallEdge>> by_site;
    std::map<FuncRef, std::vector<CallEdge>> by_callee;
    std::map<FuncRef, std::vector<CallEdge>> by_caller;

    bool same_graph(const Fcg& o) const {
        return nodes == o.nodes && edges == o.edges && at_set == o.at_set && live_objects == o.live_objects;
    }

    const std::vector<CallEdge>& edges_at(std::uint64_t site) const {
        static const std::vector<CallEdge> none;
        auto it = by_site.find(site);
        return it == by_site.end() ? none : it->second;
    }
    const std::vector<CallEdge>& callers_of(FuncRef f) const {
        static const std::vector<CallEdge> none;
        auto it = by_callee.find(f);
        return it == by_callee.end() ? none : it->second;
    }
    const std::vector<CallEdge>& callees_of(FuncRef f) const {
        static const std::vector<CallEdge> none;
        auto it = by_caller.find(f);
        return it == by_caller.end() ? none : it->second;
    }

    void reindex() {
        by_site.clear();
        by_callee.clear();
        by_caller.clear();
        for (const auto& e : edges) {
            by_site[e.site].push_back(e);
            by_callee[e.callee].push_back(e);
            by_caller[e.caller].push_back(e);
        }
    }
};

class PltError : public Error {
public:
    PltError(const std::string& symbol, const std::string& requester, const std::string& searched)
        : Error("link", requester + " -> " + symbol, "unresolved symbol '" + symbol + "' (searched: " + searched + ")"),
          symbol_(symbol) {}
    const std::string& symbol() const noexcept { return symbol_; }

private:
    std::string symbol_;
};

/// First definition of `symbol` scanning the executable's exports and then
/// the libraries in dependency order.
inline FuncRef resolve_plt(const ProgramImage& image, const std::string& symbol, std::uint32_t requesting_module) {
    if (symbol.empty()) throw Error("link", image.modules.at(requesting_module).name, "empty symbol");
    if (auto r = lookup_export(image, symbol)) return *r;
    std::string searched;
    for (const auto& m : image.modules) searched += (searched.empty() ? "" : ", ") + m.name;
    throw PltError(symbol, image.modules.at(requesting_module).name, searched);
}

/// Worklist construction to a fixpoint: newly reachable code may take new
/// addresses or reference new data objects, which feeds more indirect edges.
/// Functions only listed in data objects that no live code references stay
/// out of the AT set.
inline Fcg build_fcg(const ProgramImage& image, const Refinements& ref = {}, const std::vector<DlsymTake>& dlsym_takes = {}) {
    Fcg g;
    std::vector<FuncRef> work;
    std::set<FuncRef> scanned;
    std::map<FuncRef, std::vector<DlsymTake>> dlsym_by_fn;
    {
        ImageIndex index(image);
        for (const auto& t : dlsym_takes)
            if (auto loc = index.find(t.site)) dlsym_by_fn[loc->func].push_back(t);
    }
    auto add_node = [&](FuncRef f) {
        if (g.nodes.insert(f).second) work.push_back(f);
    };
    for (auto r : image.roots()) add_node(r);

    std::set<std::string> warned;
    for (bool grew = true; grew;) {
        grew = false;
        while (!work.empty()) {
            FuncRef f = work.back();
            work.pop_back();
            if (!scanned.insert(f).second) continue;
            for (const auto& bb : image.function(f).blocks) {
                for (const auto& in : bb.instructions) {
                    switch (in.op) {
                    case Op::CallDirect:
                        g.edges.insert({in.address, f, in.func, EdgeKind::Direct});
                        add_node(in.func);
                        break;
                    case Op::CallPlt: {
                        if (in.text == intrinsic::kSyscall) break;
                        if (auto target = lookup_export(image, in.text)) {
                            g.edges.insert({in.address, f, *target, EdgeKind::Plt});
                            add_node(*target);
                        } else {
                            g.externals.insert({in.address, f, in.text});
                            if (warned.insert(in.text).second)
                                g.warnings.push_back("unresolved external symbol '" + in.text + "' called from " +
                                                     image.qualified_name(f));
                        }
                        break;
                    }
                    case Op::TakeAddr:
                        g.at_sites[in.func].insert({in.address, TakeKind::Instruction});
                        break;
                    case Op::TakeAddrData:
                        g.live_objects.insert(in.data);
                        for (auto m : image.object(in.data).members)
                            g.at_sites[m].insert({in.address, TakeKind::DataObject});
                        break;
                    case Op::CallIndirect:
                        g.indirect_sites.insert({in.address, f});
                        break;
                    default:
                        break;
                    }
                }
            }
            if (auto it = dlsym_by_fn.find(f); it != dlsym_by_fn.end())
                for (const auto& t : it->second) g.at_sites[t.function].insert({t.site, TakeKind::Dlsym});
        }

        g.at_set.clear();
        for (const auto& [fn, sites] : g.at_sites)
            if (!ref.removed_at.contains(fn)) g.at_set.insert(fn);
        // AT functions may be invoked by the runtime (thread entry, callbacks).
        for (auto fn : g.at_set)
            if (!g.nodes.contains(fn)) add_node(fn);

        for (const auto& [site, caller] : g.indirect_sites) {
            auto add = [&](FuncRef t, EdgeKind k) {
                if (g.edges.insert({site, caller, t, k}).second) grew = true;
                if (!g.nodes.contains(t)) {
                    add_node(t);
                    grew = true;
                }
            };
            if (auto fw = ref.forward_edges.find(site); fw != ref.forward_edges.end())
                for (auto t : fw->second) add(t, EdgeKind::IndirectResolved);
            if (auto rs = ref.resolved_sites.find(site); rs != ref.resolved_sites.end()) {
                for (auto t : rs->second) add(t, EdgeKind::IndirectResolved);
                continue;
            }
            for (auto t : g.at_set)
                if (!ref.typearmor_pruned.contains({site, t})) add(t, EdgeKind::IndirectAt);
        }
        if (!work.empty()) grew = true;
    }
    g.reindex();
    return g;
}

inline nlohmann::json fcg_to_json(const ProgramImage& image, const Fcg& g) {
    using nlohmann::json;
    json nodes = json::array(), edges = json::array(), at = json::array(), objs = json::array(), ext = json::array();
    for (auto n : g.nodes) nodes.push_back(image.qualified_name(n));
    for (const auto& e : g.edges)
        edges.push_back({{"site", e.site}, {"caller", image.qualified_name(e.caller)},
                         {"callee", image.qualified_name(e.callee)}, {"kind", std::string(edge_kind_name(e.kind))}});
    for (auto f : g.at_set) at.push_back(image.qualified_name(f));
    for (auto o : g.live_objects) objs.push_back(image.modules[o.module].name + "::" + image.object(o).id);
    for (const auto& x : g.externals)
        ext.push_back({{"site", x.site}, {"caller", image.qualified_name(x.caller)}, {"symbol", x.symbol}});
    return {{"nodes", nodes}, {"edges", edges}, {"at_set", at}, {"live_objects", objs},
            {"externals", ext}, {"warnings", g.warnings}};
}

inline std::string fcg_to_dot(const ProgramImage& image, const Fcg& g) {
    std::ostringstream os;
    os << "digraph fcg {\n";
    for (auto n : g.nodes)
        os << "  \"" << image.qualified_name(n) << "\"" << (g.at_set.contains(n) ? " [shape=box]" : "") << ";\n";
    for (const auto& e : g.edges) {
        os << "  \"" << image.qualified_name(e.caller) << "\" -> \"" << image.qualified_name(e.callee) << "\"";
        if (e.kind == EdgeKind::IndirectAt) os << " [style=dashed]";
        else if (e.kind == EdgeKind::IndirectResolved) os << " [style=bold]";
        os << ";\n";
    }
    os << "}\n";
    return os.str();
}

}  // namespace phaseguard
