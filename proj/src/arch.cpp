#include "calpa/arch.hpp"

#include "calpa/ops.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

namespace calpa {

std::string kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::input: return "input";
        case LayerKind::fixed_preproc: return "fixed_preproc";
        case LayerKind::conv: return "conv";
        case LayerKind::bn: return "bn";
        case LayerKind::activation: return "activation";
        case LayerKind::pool: return "pool";
        case LayerKind::global_pool: return "global_pool";
        case LayerKind::fully_connected: return "fully_connected";
        case LayerKind::add: return "add";
    }
    return "?";
}

LayerKind kind_from_name(const std::string& s) {
    for (LayerKind k : {LayerKind::input, LayerKind::fixed_preproc, LayerKind::conv, LayerKind::bn,
                        LayerKind::activation, LayerKind::pool, LayerKind::global_pool,
                        LayerKind::fully_connected, LayerKind::add})
        if (kind_name(k) == s) return k;
    throw GraphError("unknown layer kind: " + s);
}

bool ArchGraph::has_layer(const std::string& id) const {
    for (const auto& l : layers)
        if (l.id == id) return true;
    return false;
}

const LayerSpec& ArchGraph::layer(const std::string& id) const {
    for (const auto& l : layers)
        if (l.id == id) return l;
    throw GraphError("no such layer: " + id);
}

LayerSpec& ArchGraph::layer(const std::string& id) {
    for (auto& l : layers)
        if (l.id == id) return l;
    throw GraphError("no such layer: " + id);
}

const std::vector<std::string>& ArchGraph::preds(const std::string& id) const {
    static const std::vector<std::string> none;
    auto it = edges.find(id);
    return it == edges.end() ? none : it->second;
}

std::vector<std::string> ArchGraph::successors(const std::string& id) const {
    std::vector<std::string> out;
    for (const auto& l : layers)
        for (const auto& p : preds(l.id))
            if (p == id) out.push_back(l.id);
    return out;
}

std::map<std::string, int> ArchGraph::depths() const {
    std::map<std::string, int> d;
    for (const auto& l : layers) {
        int best = 0;
        for (const auto& p : preds(l.id)) {
            auto it = d.find(p);
            if (it == d.end()) throw GraphError("layer list is not topologically ordered at " + l.id);
            best = std::max(best, it->second + 1);
        }
        d[l.id] = best;
    }
    return d;
}

int prune_count(int channels, double gamma) {
    if (gamma < 0.0 || gamma >= 1.0 + 1e-12) throw GraphError("pruning rate outside [0,1]");
    int t = static_cast<int>(std::floor(channels * gamma + 0.5 + 1e-9));
    return std::min(t, channels - 1);
}

int keep_count(int channels, double zeta) {
    if (!(zeta > 0.0) || zeta > 1.0 + 1e-12) throw GraphError("shrinking rate outside (0,1]");
    return channels - prune_count(channels, 1.0 - zeta);
}

void infer_geometry(ArchGraph& g) {
    std::set<std::string> seen;
    for (auto& l : g.layers) {
        const auto& ps = g.preds(l.id);
        for (const auto& p : ps)
            if (!seen.count(p)) throw GraphError("predecessor " + p + " of " + l.id + " not defined earlier");
        auto pred = [&](std::size_t i) -> const LayerSpec& { return g.layer(ps[i]); };
        switch (l.kind) {
            case LayerKind::input:
                if (!ps.empty()) throw GraphError("input node has predecessors");
                l.in_ch = 0;
                l.out_ch = 1;
                l.out_h = l.out_w = g.input_size;
                break;
            case LayerKind::conv:
            case LayerKind::fixed_preproc: {
                if (ps.size() != 1) throw GraphError(l.id + ": conv wants exactly one predecessor");
                const auto& p = pred(0);
                l.in_ch = p.out_ch;
                if (l.kernel < 1 || l.out_ch < 1 || l.in_ch < 1)
                    throw GraphError(l.id + ": conv needs J, K, kernel >= 1");
                l.out_h = conv_out_dim(p.out_h, l.kernel, l.stride, l.pad);
                l.out_w = conv_out_dim(p.out_w, l.kernel, l.stride, l.pad);
                if (l.kind == LayerKind::fixed_preproc && l.prunable)
                    throw GraphError(l.id + ": fixed preprocessing banks are never prunable");
                break;
            }
            case LayerKind::bn:
            case LayerKind::activation: {
                if (ps.size() != 1) throw GraphError(l.id + ": wants exactly one predecessor");
                const auto& p = pred(0);
                l.in_ch = l.out_ch = p.out_ch;
                l.out_h = p.out_h;
                l.out_w = p.out_w;
                break;
            }
            case LayerKind::pool: {
                if (ps.size() != 1) throw GraphError(l.id + ": wants exactly one predecessor");
                const auto& p = pred(0);
                l.in_ch = l.out_ch = p.out_ch;
                l.out_h = conv_out_dim(p.out_h, l.kernel, l.stride, l.pad);
                l.out_w = conv_out_dim(p.out_w, l.kernel, l.stride, l.pad);
                break;
            }
            case LayerKind::global_pool: {
                if (ps.size() != 1) throw GraphError(l.id + ": wants exactly one predecessor");
                const auto& p = pred(0);
                l.in_ch = l.out_ch = p.out_ch;
                l.out_h = l.out_w = 1;
                break;
            }
            case LayerKind::fully_connected: {
                if (ps.size() != 1) throw GraphError(l.id + ": wants exactly one predecessor");
                const auto& p = pred(0);
                if (p.out_h != 1 || p.out_w != 1)
                    throw GraphError(l.id + ": classifier head wants 1x1 spatial input");
                l.in_ch = p.out_ch;
                l.out_h = l.out_w = 1;
                break;
            }
            case LayerKind::add: {
                if (ps.size() != 2) throw GraphError(l.id + ": add wants exactly two predecessors");
                const auto& a = pred(0);
                const auto& b = pred(1);
                if (a.out_ch != b.out_ch || a.out_h != b.out_h || a.out_w != b.out_w)
                    throw GraphError(l.id + ": add operand shapes differ (" + std::to_string(a.out_ch) +
                                     "," + std::to_string(a.out_h) + "," + std::to_string(a.out_w) +
                                     ") vs (" + std::to_string(b.out_ch) + "," + std::to_string(b.out_h) +
                                     "," + std::to_string(b.out_w) + ")");
                l.in_ch = l.out_ch = a.out_ch;
                l.out_h = a.out_h;
                l.out_w = a.out_w;
                break;
            }
        }
        seen.insert(l.id);
    }
}

void validate_graph(const ArchGraph& g) {
    if (g.layers.empty()) throw GraphError("empty graph");
    std::set<std::string> ids;
    int inputs = 0, heads = 0;
    for (const auto& l : g.layers) {
        if (!ids.insert(l.id).second) throw GraphError("duplicate layer id " + l.id);
        if (l.kind == LayerKind::input) inputs++;
        if (l.kind == LayerKind::fully_connected) heads++;
    }
    if (inputs != 1) throw GraphError("graph must have exactly one input node");
    if (heads != 1) throw GraphError("graph must have exactly one classifier head");
    ArchGraph copy = g;
    infer_geometry(copy); // re-derives everything, throwing on inconsistency
    for (std::size_t i = 0; i < g.layers.size(); ++i) {
        const auto& a = g.layers[i];
        const auto& b = copy.layers[i];
        if (a.in_ch != b.in_ch || a.out_h != b.out_h || a.out_w != b.out_w)
            throw GraphError("stored geometry of " + a.id + " disagrees with predecessors");
    }
    // every conv feeding an add must sit in exactly one group
    auto groups = classify_shortcuts(g);
    std::map<std::string, int> membership;
    for (const auto& grp : groups)
        for (const auto& m : grp.members) membership[m]++;
    for (const auto& [id, n] : membership)
        if (n != 1) throw GraphError("conv " + id + " belongs to " + std::to_string(n) + " groups");
}

// ---- builders ----

namespace {

int scaled_width(int base, int num, int den) {
    long long w = (2LL * base * num + den) / (2LL * den); // round half up
    return std::max(1, static_cast<int>(w));
}

struct Builder {
    ArchGraph g;
    std::string last;

    void node(LayerSpec l, std::vector<std::string> from) {
        g.edges[l.id] = std::move(from);
        g.layers.push_back(std::move(l));
        last = g.layers.back().id;
    }
    void chain(LayerSpec l) { node(std::move(l), {last}); }

    void conv(const std::string& id, int out, int kernel, int stride, int pad, bool prunable = true) {
        LayerSpec l;
        l.id = id;
        l.kind = LayerKind::conv;
        l.out_ch = out;
        l.kernel = kernel;
        l.stride = stride;
        l.pad = pad;
        l.prunable = prunable;
        chain(std::move(l));
    }
    void bn(const std::string& id) {
        LayerSpec l;
        l.id = id;
        l.kind = LayerKind::bn;
        chain(std::move(l));
    }
    void relu(const std::string& id) {
        LayerSpec l;
        l.id = id;
        l.kind = LayerKind::activation;
        l.act = ActKind::relu;
        chain(std::move(l));
    }
};

} // namespace

ArchGraph build_srnet(int input_size, int scale_num, int scale_den) {
    if (input_size < 16 || input_size % 16 != 0) throw GraphError("srnet: input size must be divisible by 16");
    if (scale_num < 1 || scale_den < 1 || scale_num > scale_den)
        throw GraphError("srnet: width scale must be a rational in (0,1]");
    auto w = [&](int base) { return scaled_width(base, scale_num, scale_den); };

    Builder b;
    b.g.name = "srnet";
    b.g.input_size = input_size;
    {
        LayerSpec in;
        in.id = "input";
        in.kind = LayerKind::input;
        b.node(std::move(in), {});
    }
    b.conv("l1_conv", w(64), 3, 1, 1);
    b.bn("l1_bn");
    b.relu("l1_relu");
    b.conv("l2_conv", w(16), 3, 1, 1);
    b.bn("l2_bn");
    b.relu("l2_relu");

    // five unpooled residual blocks with direct shortcuts
    std::string skip = b.last;
    for (int blk = 3; blk <= 7; ++blk) {
        const std::string p = "l" + std::to_string(blk) + "_";
        b.conv(p + "conv1", w(16), 3, 1, 1);
        b.bn(p + "bn1");
        b.relu(p + "relu1");
        b.conv(p + "conv2", w(16), 3, 1, 1);
        b.bn(p + "bn2");
        LayerSpec a;
        a.id = p + "add";
        a.kind = LayerKind::add;
        b.node(std::move(a), {skip, p + "bn2"});
        skip = b.last;
    }

    // downsampling blocks: main branch pooled, shortcut through a strided 1x1 conv
    const int widths[4] = {w(16), w(64), w(128), w(256)};
    for (int i = 0; i < 4; ++i) {
        const int blk = 8 + i;
        const std::string p = "l" + std::to_string(blk) + "_";
        const std::string in_node = b.last;
        b.conv(p + "conv1", widths[i], 3, 1, 1);
        b.bn(p + "bn1");
        b.relu(p + "relu1");
        b.conv(p + "conv2", widths[i], 3, 1, 1);
        b.bn(p + "bn2");
        {
            LayerSpec pool;
            pool.id = p + "pool";
            pool.kind = LayerKind::pool;
            pool.kernel = 3;
            pool.stride = 2;
            pool.pad = 1;
            b.chain(std::move(pool));
        }
        {
            LayerSpec sc;
            sc.id = p + "sc_conv";
            sc.kind = LayerKind::conv;
            sc.out_ch = widths[i];
            sc.kernel = 1;
            sc.stride = 2;
            sc.pad = 0;
            sc.prunable = true;
            b.node(std::move(sc), {in_node});
        }
        b.bn(p + "sc_bn");
        LayerSpec a;
        a.id = p + "add";
        a.kind = LayerKind::add;
        b.node(std::move(a), {p + "pool", p + "sc_bn"});
    }

    // top block: two convs, no shortcut, global pooling
    b.conv("l12_conv1", w(512), 3, 1, 1);
    b.bn("l12_bn1");
    b.relu("l12_relu1");
    b.conv("l12_conv2", w(512), 3, 1, 1);
    b.bn("l12_bn2");
    {
        LayerSpec gp;
        gp.id = "gap";
        gp.kind = LayerKind::global_pool;
        b.chain(std::move(gp));
    }
    {
        LayerSpec fc;
        fc.id = "fc";
        fc.kind = LayerKind::fully_connected;
        fc.out_ch = 2;
        b.chain(std::move(fc));
    }

    infer_geometry(b.g);
    b.g.groups = classify_shortcuts(b.g);
    validate_graph(b.g);
    return b.g;
}

FilterBankF dct_bank_4x4() {
    FilterBankF fb(1, 16, 4);
    const double pi = 3.14159265358979323846;
    auto c = [&](int u) { return u == 0 ? 0.5 : std::sqrt(2.0) * 0.5; };
    for (int u = 0; u < 4; ++u)
        for (int v = 0; v < 4; ++v)
            for (int i = 0; i < 4; ++i)
                for (int j = 0; j < 4; ++j)
                    fb.at(u * 4 + v, 0, i, j) = static_cast<float>(
                        c(u) * c(v) * std::cos((2 * i + 1) * u * pi / 8.0) * std::cos((2 * j + 1) * v * pi / 8.0));
    return fb;
}

ArchGraph build_xunet2(int input_size, const nlohmann::json& topo) {
    if (input_size < 32 || input_size % 32 != 0) throw GraphError("xunet2: input size must be divisible by 32");
    const auto& pre = topo.at("preproc");
    Builder b;
    b.g.name = topo.value("name", std::string("xunet2"));
    b.g.input_size = input_size;
    {
        LayerSpec in;
        in.id = "input";
        in.kind = LayerKind::input;
        b.node(std::move(in), {});
    }
    {
        LayerSpec p;
        p.id = "dct_preproc";
        p.kind = LayerKind::fixed_preproc;
        p.out_ch = pre.at("filters").get<int>();
        p.kernel = pre.at("kernel").get<int>();
        p.stride = pre.value("stride", 1);
        p.pad = pre.value("pad", 0);
        p.prunable = false;
        b.chain(std::move(p));
    }
    {
        LayerSpec t;
        t.id = "trunc";
        t.kind = LayerKind::activation;
        t.act = ActKind::truncate;
        t.threshold = pre.at("truncation_threshold").get<double>();
        b.chain(std::move(t));
    }
    b.conv("stem_conv", topo.at("stem").at("out").get<int>(), 3, 1, 1);
    b.bn("stem_bn");
    b.relu("stem_relu");

    std::string skip = b.last;
    int bi = 0;
    for (const auto& blk : topo.at("blocks")) {
        ++bi;
        const std::string p = "b" + std::to_string(bi) + "_";
        const int out = blk.at("out").get<int>();
        const std::string type = blk.at("type").get<std::string>();
        const std::string in_node = b.last;
        if (type == "direct") {
            b.conv(p + "conv1", out, 3, 1, 1);
            b.bn(p + "bn1");
            b.relu(p + "relu1");
            b.conv(p + "conv2", out, 3, 1, 1);
            b.bn(p + "bn2");
            LayerSpec a;
            a.id = p + "add";
            a.kind = LayerKind::add;
            b.node(std::move(a), {skip, p + "bn2"});
        } else if (type == "transformed") {
            b.conv(p + "conv1", out, 3, 2, 1);
            b.bn(p + "bn1");
            b.relu(p + "relu1");
            b.conv(p + "conv2", out, 3, 1, 1);
            b.bn(p + "bn2");
            {
                LayerSpec sc;
                sc.id = p + "sc_conv";
                sc.kind = LayerKind::conv;
                sc.out_ch = out;
                sc.kernel = 1;
                sc.stride = 2;
                sc.pad = 0;
                sc.prunable = true;
                b.node(std::move(sc), {in_node});
            }
            b.bn(p + "sc_bn");
            LayerSpec a;
            a.id = p + "add";
            a.kind = LayerKind::add;
            b.node(std::move(a), {p + "sc_bn", p + "bn2"});
        } else {
            throw GraphError("xunet2 topology: unknown block type " + type);
        }
        skip = b.last;
    }
    {
        LayerSpec gp;
        gp.id = "gap";
        gp.kind = LayerKind::global_pool;
        b.chain(std::move(gp));
    }
    {
        LayerSpec fc;
        fc.id = "fc";
        fc.kind = LayerKind::fully_connected;
        fc.out_ch = topo.value("classes", 2);
        b.chain(std::move(fc));
    }
    infer_geometry(b.g);
    b.g.groups = classify_shortcuts(b.g);
    validate_graph(b.g);
    return b.g;
}

ArchGraph build_xunet2_from_file(int input_size, const std::string& topology_path) {
    std::ifstream f(topology_path);
    if (!f) throw GraphError("cannot open topology table: " + topology_path);
    nlohmann::json topo;
    f >> topo;
    return build_xunet2(input_size, topo);
}

// ---- cost accounting ----

CostReport cost_report(const ArchGraph& g) {
    CostReport r;
    for (const auto& l : g.layers) {
        CostRow row{l.id, kind_name(l.kind), 0, 0};
        if (l.kind == LayerKind::conv) {
            row.params = static_cast<long long>(l.in_ch) * l.kernel * l.kernel * l.out_ch;
            row.flops = static_cast<long long>(l.out_h) * l.out_w * row.params;
        } else if (l.kind == LayerKind::fixed_preproc) {
            // fixed banks are not learned parameters, but they do compute
            long long weights = static_cast<long long>(l.in_ch) * l.kernel * l.kernel * l.out_ch;
            row.flops = static_cast<long long>(l.out_h) * l.out_w * weights;
        } else if (l.kind == LayerKind::fully_connected) {
            row.params = static_cast<long long>(l.in_ch) * l.out_ch;
            row.flops = row.params;
        }
        r.total_params += row.params;
        r.total_flops += row.flops;
        r.rows.push_back(std::move(row));
    }
    return r;
}

// ---- shortcut classification ----

namespace {
struct UnionFind {
    std::map<std::string, std::string> parent;
    const std::string& find(const std::string& x) {
        auto& p = parent[x];
        if (p.empty()) p = x;
        if (p == x) return parent[x];
        p = find(p);
        return p;
    }
    void unite(const std::string& a, const std::string& b) {
        const std::string ra = find(a), rb = find(b);
        if (ra != rb) parent[rb] = ra;
    }
};
} // namespace

std::map<std::string, std::string> channel_out_classes(const ArchGraph& g) {
    // Each producer (conv-like) output opens a channel class; channelwise
    // layers pass their predecessor's class through; add nodes merge classes.
    UnionFind uf;
    std::map<std::string, std::string> cls; // node id -> class key
    for (const auto& l : g.layers) {
        const auto& ps = g.preds(l.id);
        switch (l.kind) {
            case LayerKind::input:
            case LayerKind::conv:
            case LayerKind::fixed_preproc:
            case LayerKind::fully_connected:
                cls[l.id] = l.id;
                uf.find(l.id);
                break;
            case LayerKind::bn:
            case LayerKind::activation:
            case LayerKind::pool:
            case LayerKind::global_pool:
                if (ps.size() != 1) throw GraphError(l.id + ": wants exactly one predecessor");
                cls[l.id] = cls.at(ps[0]);
                break;
            case LayerKind::add: {
                if (ps.size() != 2) throw GraphError(l.id + ": add wants exactly two predecessors");
                const auto& a = g.layer(ps[0]);
                const auto& b = g.layer(ps[1]);
                if (a.out_ch != b.out_ch || a.out_h != b.out_h || a.out_w != b.out_w)
                    throw GraphError(l.id + ": add operand shapes differ");
                uf.unite(cls.at(ps[0]), cls.at(ps[1]));
                cls[l.id] = cls.at(ps[0]);
                break;
            }
        }
    }
    std::map<std::string, std::string> out;
    for (const auto& [id, key] : cls) out[id] = uf.find(key);
    return out;
}

std::vector<ShortcutGroup> classify_shortcuts(const ArchGraph& g) {
    const auto cls = channel_out_classes(g);

    std::map<std::string, std::vector<std::string>> members; // class root -> producer convs
    for (const auto& l : g.layers)
        if (l.kind == LayerKind::conv || l.kind == LayerKind::fixed_preproc)
            members[cls.at(l.id)].push_back(l.id);

    const auto depth = g.depths();
    std::vector<ShortcutGroup> out;
    for (auto& [root, ms] : members) {
        (void)root;
        if (ms.size() < 2) continue;
        std::sort(ms.begin(), ms.end(), [&](const std::string& a, const std::string& b) {
            if (depth.at(a) != depth.at(b)) return depth.at(a) < depth.at(b);
            return a < b;
        });
        ShortcutGroup grp;
        grp.members = ms;
        int ones = 0;
        std::string one_id;
        for (const auto& m : ms)
            if (g.layer(m).kind == LayerKind::conv && g.layer(m).kernel == 1) {
                ones++;
                one_id = m;
            }
        if (ms.size() == 2 && ones == 1) {
            grp.kind = GroupKind::transformed;
            grp.transform_layer = one_id;
            grp.lowest = ms[0] == one_id ? ms[1] : ms[0]; // the main-branch conv anchors the pair
        } else {
            grp.kind = GroupKind::direct;
            grp.lowest = ms[0];
        }
        out.push_back(std::move(grp));
    }
    std::sort(out.begin(), out.end(), [&](const ShortcutGroup& a, const ShortcutGroup& b) {
        if (depth.at(a.lowest) != depth.at(b.lowest)) return depth.at(a.lowest) < depth.at(b.lowest);
        return a.lowest < b.lowest;
    });
    return out;
}

// ---- plan application ----

void validate_plan(const ArchGraph& g, const ShrinkPlan& plan) {
    for (const auto& l : g.layers) {
        if ((l.kind == LayerKind::conv) && l.prunable) {
            auto it = plan.rates.find(l.id);
            if (it == plan.rates.end()) throw GraphError("plan misses prunable conv " + l.id);
            if (!(it->second > 0.0) || it->second > 1.0 + 1e-12)
                throw GraphError("plan rate for " + l.id + " outside (0,1]");
        }
    }
    for (const auto& grp : g.groups) {
        double r = -1;
        for (const auto& m : grp.members) {
            auto it = plan.rates.find(m);
            if (it == plan.rates.end()) continue; // non-prunable member
            if (r < 0) r = it->second;
            else if (std::abs(r - it->second) > 1e-9)
                throw GraphError("plan rates differ inside shortcut group at " + grp.lowest);
        }
    }
}

ArchGraph apply_shrink_plan(const ArchGraph& g, const ShrinkPlan& plan) {
    validate_plan(g, plan);
    ArchGraph out = g;
    for (auto& l : out.layers) {
        if (l.kind == LayerKind::conv && l.prunable) {
            const double zeta = plan.rates.at(l.id);
            l.out_ch = keep_count(l.out_ch, zeta);
        }
    }
    infer_geometry(out); // refreshes in_ch downstream and re-checks adds
    out.groups = classify_shortcuts(out);
    validate_graph(out);
    return out;
}

// ---- serialization ----

nlohmann::json arch_to_json(const ArchGraph& g) {
    nlohmann::json j;
    j["name"] = g.name;
    j["input_size"] = g.input_size;
    j["layers"] = nlohmann::json::array();
    for (const auto& l : g.layers) {
        nlohmann::json e;
        e["id"] = l.id;
        e["kind"] = kind_name(l.kind);
        e["in"] = l.in_ch;
        e["out"] = l.out_ch;
        e["kernel"] = l.kernel;
        e["stride"] = l.stride;
        e["pad"] = l.pad;
        e["prunable"] = l.prunable;
        if (l.kind == LayerKind::activation) {
            e["act"] = l.act == ActKind::relu ? "relu" : "truncate";
            if (l.act == ActKind::truncate) e["threshold"] = l.threshold;
        }
        j["layers"].push_back(std::move(e));
    }
    j["edges"] = nlohmann::json::object();
    for (const auto& l : g.layers) j["edges"][l.id] = g.preds(l.id);
    j["groups"] = nlohmann::json::array();
    for (const auto& grp : g.groups) {
        nlohmann::json e;
        e["kind"] = grp.kind == GroupKind::direct ? "direct" : "transformed";
        e["members"] = grp.members;
        e["lowest"] = grp.lowest;
        if (grp.kind == GroupKind::transformed) e["transform"] = grp.transform_layer;
        j["groups"].push_back(std::move(e));
    }
    return j;
}

ArchGraph arch_from_json(const nlohmann::json& j) {
    ArchGraph g;
    g.name = j.at("name").get<std::string>();
    g.input_size = j.at("input_size").get<int>();
    for (const auto& e : j.at("layers")) {
        LayerSpec l;
        l.id = e.at("id").get<std::string>();
        l.kind = kind_from_name(e.at("kind").get<std::string>());
        l.out_ch = e.value("out", 0);
        l.kernel = e.value("kernel", 0);
        l.stride = e.value("stride", 1);
        l.pad = e.value("pad", 0);
        l.prunable = e.value("prunable", false);
        if (l.kind == LayerKind::activation) {
            l.act = e.value("act", std::string("relu")) == "truncate" ? ActKind::truncate : ActKind::relu;
            l.threshold = e.value("threshold", 0.0);
        }
        g.layers.push_back(std::move(l));
    }
    for (auto it = j.at("edges").begin(); it != j.at("edges").end(); ++it)
        g.edges[it.key()] = it.value().get<std::vector<std::string>>();
    infer_geometry(g);
    g.groups = classify_shortcuts(g);
    validate_graph(g);
    return g;
}

void save_arch(const std::string& path, const ArchGraph& g) {
    std::ofstream f(path);
    if (!f) throw GraphError("cannot write " + path);
    f << arch_to_json(g).dump(2) << "\n";
}

ArchGraph load_arch(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw GraphError("cannot read " + path);
    nlohmann::json j;
    f >> j;
    return arch_from_json(j);
}

nlohmann::json plan_to_json(const ShrinkPlan& p) {
    nlohmann::json j;
    j["rates"] = nlohmann::json::object();
    for (const auto& [id, r] : p.rates) j["rates"][id] = r;
    j["provenance"] = nlohmann::json::object();
    for (const auto& [id, s] : p.provenance) j["provenance"][id] = s;
    if (!p.meta.is_null()) j["meta"] = p.meta;
    return j;
}

ShrinkPlan plan_from_json(const nlohmann::json& j) {
    ShrinkPlan p;
    for (auto it = j.at("rates").begin(); it != j.at("rates").end(); ++it)
        p.rates[it.key()] = it.value().get<double>();
    if (j.contains("provenance"))
        for (auto it = j["provenance"].begin(); it != j["provenance"].end(); ++it)
            p.provenance[it.key()] = it.value().get<std::string>();
    if (j.contains("meta")) p.meta = j["meta"];
    return p;
}

void save_plan(const std::string& path, const ShrinkPlan& p) {
    std::ofstream f(path);
    if (!f) throw GraphError("cannot write " + path);
    f << plan_to_json(p).dump(2) << "\n";
}

ShrinkPlan load_plan(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw GraphError("cannot read " + path);
    nlohmann::json j;
    f >> j;
    return plan_from_json(j);
}

bool struct_equal(const ArchGraph& a, const ArchGraph& b) {
    if (a.name != b.name || a.input_size != b.input_size || a.layers.size() != b.layers.size())
        return false;
    for (std::size_t i = 0; i < a.layers.size(); ++i) {
        const auto& x = a.layers[i];
        const auto& y = b.layers[i];
        if (x.id != y.id || x.kind != y.kind || x.in_ch != y.in_ch || x.out_ch != y.out_ch ||
            x.kernel != y.kernel || x.stride != y.stride || x.pad != y.pad || x.out_h != y.out_h ||
            x.out_w != y.out_w || x.prunable != y.prunable || x.act != y.act ||
            x.threshold != y.threshold)
            return false;
    }
    if (a.edges != b.edges) return false;
    if (a.groups.size() != b.groups.size()) return false;
    for (std::size_t i = 0; i < a.groups.size(); ++i) {
        const auto& x = a.groups[i];
        const auto& y = b.groups[i];
        if (x.kind != y.kind || x.members != y.members || x.lowest != y.lowest ||
            x.transform_layer != y.transform_layer)
            return false;
    }
    return true;
}

} // namespace calpa
