#include "calpa/search.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace calpa {

namespace {

std::string fmt(const char* spec, double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), spec, v);
    return buf;
}

nlohmann::json config_json(const SearchConfig& cfg) {
    return {{"eps", cfg.eps},
            {"sigma", cfg.sigma},
            {"gamma_cap", cfg.gamma_cap},
            {"cumulative", cfg.cumulative},
            {"val_subsample", cfg.val_subsample},
            {"seed", cfg.seed},
            {"sample", {{"m", cfg.sample.m}, {"n", cfg.sample.n}, {"seed", cfg.sample.seed}}}};
}

double checked_acc(double acc, const std::string& where) {
    if (!(acc >= 0.0 && acc <= 1.0))
        throw SearchError("validator returned " + std::to_string(acc) + " (" + where + ")");
    return acc;
}

// Channel preference order for one layer, longest prefix first. The order is
// a function of the model state and the sample seed only, so re-running it on
// the same state reproduces the same selection.
struct LayerSelector {
    std::vector<int> order;
    Criterion crit = Criterion::thinet;
    bool fellback = false;
};

LayerSelector make_selector(Model& working, const std::string& id,
                            const std::vector<TensorF>& images, const SampleSpec& spec) {
    LayerSelector sel;
    sel.crit = dispatch_criterion(working.graph(), id);
    if (sel.crit == Criterion::thinet) {
        try {
            ThiNetInstance inst = sample_instance(working, id, images, spec);
            sel.order = thinet_greedy_order(inst, inst.J - 1);
            return sel;
        } catch (const GraphError&) {
            // no conv consumer to reconstruct against (e.g. the classifier
            // follows); fall back to magnitude ranking
            sel.fellback = true;
            sel.crit = Criterion::l1_direct;
        }
    }
    sel.order = l1_rank(working.conv_weights(id));
    return sel;
}

std::vector<int> order_prefix(const LayerSelector& sel, int count) {
    if (count > (int)sel.order.size())
        throw SearchError("selection shorter than requested prune count");
    return std::vector<int>(sel.order.begin(), sel.order.begin() + count);
}

// Anchors in bottom-to-top order plus the member set each anchor's rate
// covers. Grouped convs are represented by the group's lowest member alone.
struct Anchors {
    std::vector<std::string> order;
    std::map<std::string, std::vector<std::string>> members;
};

Anchors collect_anchors(const ArchGraph& g) {
    Anchors a;
    std::map<std::string, int> member_group;
    for (size_t gi = 0; gi < g.groups.size(); ++gi)
        for (const auto& m : g.groups[gi].members)
            member_group[m] = (int)gi;
    for (const auto& l : g.layers) {
        if (l.kind != LayerKind::conv || !l.prunable) continue;
        auto it = member_group.find(l.id);
        if (it == member_group.end()) {
            a.order.push_back(l.id);
            a.members[l.id] = {l.id};
        } else if (g.groups[it->second].lowest == l.id) {
            a.order.push_back(l.id);
            a.members[l.id] = g.groups[it->second].members;
        }
    }
    return a;
}

void apply_rate(Model& m, const std::string& id, double zeta, const std::vector<TensorF>& images,
                const SampleSpec& spec) {
    const int out_ch = m.graph().layer(id).out_ch;
    const int count = prune_count(out_ch, 1.0 - zeta);
    if (count == 0) return;
    LayerSelector sel = make_selector(m, id, images, spec);
    m.prune_channels(id, order_prefix(sel, count));
}

} // namespace

void validate_config(const SearchConfig& cfg) {
    if (!(cfg.eps > 0.0) || !(cfg.gamma_cap >= cfg.eps - 1e-12) || !(cfg.gamma_cap < 1.0))
        throw SearchError("rate grid must satisfy 0 < eps <= gamma_cap < 1");
    if (!(cfg.sigma >= 0.0 && cfg.sigma <= 1.0))
        throw SearchError("tolerance must lie in [0,1]");
    if (cfg.val_subsample < 0)
        throw SearchError("val_subsample must be >= 0");
    if (cfg.sample.m <= 0 || cfg.sample.n <= 0)
        throw SearchError("sample spec must draw at least one location");
}

std::string criterion_name(Criterion c) {
    switch (c) {
    case Criterion::thinet: return "thinet";
    case Criterion::l1_direct: return "l1_direct";
    case Criterion::l1_transformed: return "l1_transformed";
    }
    throw SearchError("unknown criterion");
}

Criterion dispatch_criterion(const ArchGraph& g, const std::string& layer_id) {
    const LayerSpec& l = g.layer(layer_id);
    if (l.kind != LayerKind::conv)
        throw SearchError("criterion dispatch on non-conv: " + layer_id);
    for (const auto& grp : g.groups)
        for (const auto& m : grp.members)
            if (m == layer_id)
                return grp.kind == GroupKind::direct ? Criterion::l1_direct
                                                     : Criterion::l1_transformed;
    return Criterion::thinet;
}

RateOutcome decide_rate(const std::function<double(double)>& acc_at, const SearchConfig& cfg) {
    validate_config(cfg);
    const int cap_steps = (int)std::floor(cfg.gamma_cap / cfg.eps + 1e-9);
    RateOutcome out;
    out.acc0 = checked_acc(acc_at(0.0), "gamma 0");
    out.tried.emplace_back(0.0, out.acc0);
    double prev = out.acc0;
    for (int i = 1; i <= cap_steps; ++i) {
        const double gamma = i * cfg.eps;
        const double acc = checked_acc(acc_at(gamma), "gamma " + fmt("%.10g", gamma));
        out.tried.emplace_back(gamma, acc);
        const bool sudden = prev - acc > cfg.sigma + 1e-12;
        const bool total = out.acc0 - acc > cfg.sigma + 1e-12;
        if (sudden || total) {
            // one rollback step: the rate one notch below the offending one
            out.zeta = 1.0 - (i - 1) * cfg.eps;
            out.exit_reason = sudden ? "sudden_drop" : "cumulative_drop";
            out.acc_final = prev;
            return out;
        }
        prev = acc;
    }
    out.zeta = 1.0 - cap_steps * cfg.eps;
    out.exit_reason = "cap";
    out.acc_final = prev;
    return out;
}

RateOutcome determine_rate(Model& working, const std::string& layer_id, const Validator& validate,
                           const std::vector<TensorF>& sample_images, const SearchConfig& cfg,
                           SearchTrace* trace, Criterion* used) {
    validate_config(cfg);
    const LayerSpec& spec = working.graph().layer(layer_id);
    if (spec.kind != LayerKind::conv || !spec.prunable)
        throw SearchError("not a prunable conv: " + layer_id);
    LayerSelector sel = make_selector(working, layer_id, sample_images, cfg.sample);
    if (used) *used = sel.crit;
    const int out_ch = spec.out_ch;
    std::map<int, double> by_count; // grid steps repeat candidates on narrow layers
    auto acc_at = [&](double gamma) {
        const int count = gamma <= 0.0 ? 0 : prune_count(out_ch, gamma);
        auto it = by_count.find(count);
        if (it != by_count.end()) return it->second;
        double acc;
        if (count == 0) {
            acc = validate(working);
        } else {
            Model scratch = working;
            scratch.prune_channels(layer_id, order_prefix(sel, count));
            acc = validate(scratch);
        }
        by_count.emplace(count, acc);
        return acc;
    };
    RateOutcome out = decide_rate(acc_at, cfg);
    if (trace) {
        for (size_t i = 0; i < out.tried.size(); ++i) {
            TraceRow row;
            row.layer = layer_id;
            row.gamma = out.tried[i].first;
            row.acc = out.tried[i].second;
            if (i + 1 == out.tried.size()) row.exit_reason = out.exit_reason;
            trace->rows.push_back(row);
        }
        if (sel.fellback) trace->meta["fallbacks"].push_back(layer_id);
    }
    return out;
}

SearchResult bottom_up_search(Model model, const Validator& validate,
                              const std::vector<TensorF>& sample_images, const SearchConfig& cfg) {
    validate_config(cfg);
    Anchors anchors = collect_anchors(model.graph());
    SearchResult res;
    res.trace.meta["config"] = config_json(cfg);
    res.trace.meta["seed"] = cfg.seed;
    res.trace.meta["model_digest"] = model.params_digest();
    res.trace.meta["fallbacks"] = nlohmann::json::array();
    Model base = model; // non-cumulative searches restart every layer from here
    bool first = true;
    double final_acc = 0.0;
    for (const auto& id : anchors.order) {
        if (res.plan.rates.count(id))
            throw SearchError("layer already assigned: " + id);
        Criterion crit = Criterion::thinet;
        RateOutcome out;
        if (cfg.cumulative) {
            out = determine_rate(model, id, validate, sample_images, cfg, &res.trace, &crit);
        } else {
            Model fresh = base;
            out = determine_rate(fresh, id, validate, sample_images, cfg, &res.trace, &crit);
        }
        if (first) {
            res.trace.acc0 = out.acc0;
            first = false;
        }
        for (const auto& member : anchors.members.at(id)) {
            res.plan.rates[member] = out.zeta;
            res.plan.provenance[member] = criterion_name(crit);
        }
        if (cfg.cumulative && out.zeta < 1.0 - 1e-12)
            apply_rate(model, id, out.zeta, sample_images, cfg.sample);
        final_acc = out.acc_final;
    }
    res.plan.meta["config"] = config_json(cfg);
    res.plan.meta["seed"] = cfg.seed;
    res.plan.meta["model_digest"] = res.trace.meta["model_digest"];
    res.plan.meta["acc0"] = res.trace.acc0;
    res.plan.meta["fallbacks"] = res.trace.meta["fallbacks"];
    if (cfg.cumulative && !anchors.order.empty()) {
        // the accepted accuracy of the last layer is the accuracy of the
        // fully sliced model; replaying the plan must land exactly here
        res.plan.meta["final_acc"] = final_acc;
        res.plan.meta["final_digest"] = model.params_digest();
        res.trace.meta["final_acc"] = final_acc;
        res.trace.meta["final_digest"] = res.plan.meta["final_digest"];
    }
    return res;
}

void apply_plan_with_criteria(Model& model, const ShrinkPlan& plan,
                              const std::vector<TensorF>& sample_images, const SampleSpec& spec) {
    validate_plan(model.graph(), plan);
    Anchors anchors = collect_anchors(model.graph());
    for (const auto& id : anchors.order) {
        auto it = plan.rates.find(id);
        if (it == plan.rates.end())
            throw SearchError("plan misses layer: " + id);
        apply_rate(model, id, it->second, sample_images, spec);
    }
}

ShrinkPlan baseline_plan(const ShrinkPlan& plan, const std::string& kind, double eps) {
    if (plan.rates.empty())
        throw SearchError("baseline of an empty plan");
    if (!(eps > 0.0 && eps < 1.0))
        throw SearchError("baseline eps must lie in (0,1)");
    double uniform = 0.0;
    if (kind == "aggr") {
        uniform = 1.0;
        for (const auto& [id, z] : plan.rates) uniform = std::min(uniform, z);
    } else if (kind == "avg") {
        double sum = 0.0;
        for (const auto& [id, z] : plan.rates) sum += z;
        const double mean = sum / (double)plan.rates.size();
        uniform = std::floor(mean / eps + 0.5 + 1e-9) * eps;
        uniform = std::min(uniform, 1.0);
    } else {
        throw SearchError("unknown baseline kind: " + kind);
    }
    ShrinkPlan out;
    for (const auto& [id, z] : plan.rates) {
        out.rates[id] = uniform;
        out.provenance[id] = "fixed";
    }
    out.meta = plan.meta;
    out.meta["baseline"] = kind;
    out.meta["uniform_zeta"] = uniform;
    return out;
}

SearchTrace rate_sweep(Model model, const Validator& validate,
                       const std::vector<TensorF>& sample_images, const SearchConfig& cfg) {
    validate_config(cfg);
    SearchTrace tr;
    tr.meta["mode"] = "sweep";
    tr.meta["config"] = config_json(cfg);
    tr.meta["seed"] = cfg.seed;
    tr.meta["model_digest"] = model.params_digest();
    tr.acc0 = checked_acc(validate(model), "sweep baseline");
    Anchors anchors = collect_anchors(model.graph());
    const int steps = (int)std::floor(1.0 / cfg.eps + 1e-9);
    for (const auto& id : anchors.order) {
        LayerSelector sel = make_selector(model, id, sample_images, cfg.sample);
        const int out_ch = model.graph().layer(id).out_ch;
        tr.rows.push_back({id, 0.0, tr.acc0, ""});
        std::map<int, double> by_count{{0, tr.acc0}};
        for (int i = 1; i <= steps; ++i) {
            const double gamma = std::min(1.0, i * cfg.eps);
            const int count = prune_count(out_ch, gamma);
            double acc;
            auto it = by_count.find(count);
            if (it != by_count.end()) {
                acc = it->second;
            } else {
                Model scratch = model;
                scratch.prune_channels(id, order_prefix(sel, count));
                acc = checked_acc(validate(scratch), id + " gamma " + fmt("%.10g", gamma));
                by_count.emplace(count, acc);
            }
            tr.rows.push_back({id, gamma, acc, ""});
        }
    }
    return tr;
}

std::string trace_to_csv(const SearchTrace& t) {
    std::ostringstream os;
    os << "# calpa-trace v1\n";
    os << "# acc0 " << fmt("%.17g", t.acc0) << "\n";
    if (!t.meta.is_null()) os << "# meta " << t.meta.dump() << "\n";
    os << "layer,gamma,acc,exit_reason\n";
    for (const auto& r : t.rows)
        os << r.layer << ',' << fmt("%.10g", r.gamma) << ',' << fmt("%.17g", r.acc) << ','
           << r.exit_reason << '\n';
    return os.str();
}

SearchTrace trace_from_csv(const std::string& text) {
    SearchTrace t;
    std::istringstream is(text);
    std::string line;
    bool saw_header = false;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line[0] == '#') {
            if (line.rfind("# acc0 ", 0) == 0) t.acc0 = std::stod(line.substr(7));
            else if (line.rfind("# meta ", 0) == 0) t.meta = nlohmann::json::parse(line.substr(7));
            continue;
        }
        if (!saw_header) {
            if (line.rfind("layer,", 0) != 0)
                throw SearchError("trace csv misses its column header");
            saw_header = true;
            continue;
        }
        std::istringstream ls(line);
        TraceRow row;
        std::string gamma_s, acc_s;
        if (!std::getline(ls, row.layer, ',') || !std::getline(ls, gamma_s, ',') ||
            !std::getline(ls, acc_s, ','))
            throw SearchError("malformed trace row: " + line);
        std::getline(ls, row.exit_reason); // may be empty
        row.gamma = std::stod(gamma_s);
        row.acc = std::stod(acc_s);
        t.rows.push_back(row);
    }
    if (!saw_header) throw SearchError("trace csv misses its column header");
    return t;
}

void save_trace(const std::string& path, const SearchTrace& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw SearchError("cannot write trace: " + path);
    os << trace_to_csv(t);
    if (!os) throw SearchError("short write on trace: " + path);
}

SearchTrace load_trace(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw SearchError("cannot read trace: " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return trace_from_csv(buf.str());
}

std::map<std::string, RateOutcome> replay_trace(const SearchTrace& t, const SearchConfig& cfg) {
    validate_config(cfg);
    std::vector<std::string> layer_order;
    std::map<std::string, std::map<long long, double>> acc;
    for (const auto& r : t.rows) {
        if (!acc.count(r.layer)) layer_order.push_back(r.layer);
        acc[r.layer][std::llround(r.gamma / cfg.eps)] = r.acc;
    }
    std::map<std::string, RateOutcome> out;
    for (const auto& id : layer_order) {
        const auto& m = acc.at(id);
        auto lookup = [&](double gamma) {
            auto it = m.find(std::llround(gamma / cfg.eps));
            if (it == m.end())
                throw SearchError("trace misses a gamma step for " + id);
            return it->second;
        };
        out[id] = decide_rate(lookup, cfg);
    }
    return out;
}

} // namespace calpa
