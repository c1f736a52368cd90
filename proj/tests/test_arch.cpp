#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "calpa/arch.hpp"
#include "calpa/util.hpp"
#include "graph_gen.hpp"

#include <algorithm>
#include <cmath>

using namespace calpa;

namespace {

long long layer_params(const CostReport& r, const std::string& id) {
    for (const auto& row : r.rows)
        if (row.id == id) return row.params;
    FAIL("no cost row for ", id);
    return -1;
}

ArchGraph reordered_by_depth(const ArchGraph& g) {
    ArchGraph out = g;
    auto depth = g.depths();
    std::stable_sort(out.layers.begin(), out.layers.end(), [&](const LayerSpec& a, const LayerSpec& b) {
        if (depth.at(a.id) != depth.at(b.id)) return depth.at(a.id) < depth.at(b.id);
        return a.id < b.id;
    });
    return out;
}

} // namespace

TEST_CASE("reference net cost totals") {
    ArchGraph g = build_srnet(256, 1, 1);
    CostReport r = cost_report(g);
    // conv parameters 4,770,624 plus the 512x2 head
    CHECK(r.total_params == 4770624 + 1024);
    CHECK(r.total_flops == 5951717376LL + 1024);
    CHECK(std::abs(double(r.total_params) / 4.7706e6 - 1.0) <= 0.02);
    CHECK(std::abs(double(r.total_flops) / 5.95e9 - 1.0) <= 0.05);
}

TEST_CASE("reference net widths and spatial sizes") {
    ArchGraph g = build_srnet(256, 1, 1);
    CHECK(g.layer("l9_conv2").out_ch == 64);
    CHECK(g.layer("l10_conv2").out_ch == 128);
    CHECK(g.layer("l11_conv2").out_ch == 256);
    CHECK(g.layer("l12_conv2").out_ch == 512);
    CHECK(g.layer("l9_conv2").out_h == 128);
    CHECK(g.layer("l10_conv2").out_h == 64);
    CHECK(g.layer("l11_conv2").out_h == 32);
    CHECK(g.layer("l12_conv2").out_h == 16);
    CHECK(g.layer("l1_conv").out_ch == 64);
    for (int blk = 2; blk <= 8; ++blk) {
        const std::string id = blk == 2 ? "l2_conv" : "l" + std::to_string(blk) + "_conv1";
        CHECK(g.layer(id).out_ch == 16);
    }
    CHECK(g.layer("fc").in_ch == 512);
    CHECK(g.layer("fc").out_ch == 2);
}

TEST_CASE("width scaling") {
    ArchGraph g = build_srnet(64, 1, 4);
    CHECK(g.layer("l9_conv2").out_ch == 16);
    CHECK(g.layer("l10_conv2").out_ch == 32);
    CHECK(g.layer("l11_conv2").out_ch == 64);
    CHECK(g.layer("l12_conv2").out_ch == 128);
    CHECK(g.layer("l3_conv1").out_ch == 4);
    CHECK_THROWS_AS(build_srnet(100, 1, 1), GraphError); // not divisible by 16
    CHECK_THROWS_AS(build_srnet(64, 2, 1), GraphError); // scale > 1
}

TEST_CASE("per-layer cost formulas") {
    ArchGraph g = build_srnet(256, 1, 1);
    CostReport r = cost_report(g);
    CHECK(layer_params(r, "l3_conv1") == 16 * 9 * 16); // 2304
    for (const auto& row : r.rows)
        if (row.id == "l3_conv1") CHECK(row.flops == 2304LL * 65536); // 150,994,944
    for (const auto& row : r.rows)
        if (row.kind == "bn" || row.kind == "activation" || row.kind == "pool" || row.kind == "add") {
            CHECK(row.params == 0);
            CHECK(row.flops == 0);
        }
    long long sum_p = 0, sum_f = 0;
    for (const auto& row : r.rows) {
        sum_p += row.params;
        sum_f += row.flops;
    }
    CHECK(sum_p == r.total_params);
    CHECK(sum_f == r.total_flops);
}

TEST_CASE("ratio formatting reproduces reported percentages") {
    CHECK(percent_3sig(6.93e4, 477.06e4) == "1.45%");
    CHECK(percent_3sig(1.97e9, 5.95e9) == "33.1%");
}

TEST_CASE("shortcut classification of the reference net") {
    ArchGraph g = build_srnet(256, 1, 1);
    REQUIRE(g.groups.size() == 5);
    const auto& direct = g.groups[0];
    CHECK(direct.kind == GroupKind::direct);
    CHECK(direct.lowest == "l2_conv");
    std::vector<std::string> want{"l2_conv", "l3_conv2", "l4_conv2", "l5_conv2", "l6_conv2", "l7_conv2"};
    CHECK(direct.members == want);
    for (int i = 0; i < 4; ++i) {
        const auto& p = g.groups[1 + i];
        const std::string blk = "l" + std::to_string(8 + i) + "_";
        CHECK(p.kind == GroupKind::transformed);
        CHECK(p.lowest == blk + "conv2");
        CHECK(p.transform_layer == blk + "sc_conv");
        REQUIRE(p.members.size() == 2);
    }
}

TEST_CASE("plain chain has no groups") {
    ArchGraph g;
    g.name = "chain";
    g.input_size = 32;
    LayerSpec in;
    in.id = "input";
    in.kind = LayerKind::input;
    g.layers.push_back(in);
    g.edges["input"] = {};
    LayerSpec c;
    c.id = "c1";
    c.kind = LayerKind::conv;
    c.out_ch = 4;
    c.kernel = 3;
    c.stride = 1;
    c.pad = 1;
    c.prunable = true;
    g.layers.push_back(c);
    g.edges["c1"] = {"input"};
    LayerSpec gp;
    gp.id = "gap";
    gp.kind = LayerKind::global_pool;
    g.layers.push_back(gp);
    g.edges["gap"] = {"c1"};
    LayerSpec fc;
    fc.id = "fc";
    fc.kind = LayerKind::fully_connected;
    fc.out_ch = 2;
    g.layers.push_back(fc);
    g.edges["fc"] = {"gap"};
    infer_geometry(g);
    CHECK(classify_shortcuts(g).empty());
}

TEST_CASE("classification is idempotent and stable under topological re-ordering") {
    for (std::uint64_t seed : {1u, 2u, 3u, 9u}) {
        ArchGraph g = random_residual_graph(seed);
        auto once = classify_shortcuts(g);
        auto twice = classify_shortcuts(g);
        ArchGraph shuffled = reordered_by_depth(g);
        auto other = classify_shortcuts(shuffled);
        REQUIRE(once.size() == twice.size());
        REQUIRE(once.size() == other.size());
        for (std::size_t i = 0; i < once.size(); ++i) {
            CHECK(once[i].members == twice[i].members);
            CHECK(once[i].members == other[i].members);
            CHECK(once[i].lowest == other[i].lowest);
            CHECK(once[i].kind == other[i].kind);
        }
    }
}

TEST_CASE("xunet2 builder") {
    const std::string path = std::string(CALPA_SOURCE_DIR) + "/docs/xunet2_topology.json";
    ArchGraph g = build_xunet2_from_file(64, path);
    const auto& pre = g.layer("dct_preproc");
    CHECK(pre.kind == LayerKind::fixed_preproc);
    CHECK(pre.out_ch == 16);
    CHECK(pre.kernel == 4);
    CHECK(pre.prunable == false);
    const auto& tr = g.layer("trunc");
    CHECK(tr.act == ActKind::truncate);
    CHECK(tr.threshold == 8.0);
    CHECK_THROWS_AS(build_xunet2_from_file(48, path), GraphError);
    // residual middle present: at least one direct and one transformed group
    bool any_direct = false, any_trans = false;
    for (const auto& grp : g.groups) {
        any_direct |= grp.kind == GroupKind::direct;
        any_trans |= grp.kind == GroupKind::transformed;
    }
    CHECK(any_direct);
    CHECK(any_trans);
}

TEST_CASE("dct bank orthogonality") {
    FilterBankF fb = dct_bank_4x4();
    REQUIRE(fb.K == 16);
    REQUIRE(fb.Wk == 4);
    for (int a = 0; a < 16; ++a)
        for (int b = 0; b < 16; ++b) {
            double dot = 0;
            for (int i = 0; i < 4; ++i)
                for (int j = 0; j < 4; ++j) dot += double(fb.at(a, 0, i, j)) * fb.at(b, 0, i, j);
            if (a == b)
                CHECK(dot == doctest::Approx(1.0).epsilon(1e-5));
            else
                CHECK(std::abs(dot) <= 1e-6);
        }
    // every non-DC basis is zero-mean (high-pass at DC)
    for (int k = 1; k < 16; ++k) {
        double s = 0;
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j) s += fb.at(k, 0, i, j);
        CHECK(std::abs(s) <= 1e-6);
    }
}

TEST_CASE("identity plan returns an isomorphic graph") {
    ArchGraph g = build_srnet(64, 1, 4);
    ShrinkPlan plan;
    for (const auto& l : g.layers)
        if (l.kind == LayerKind::conv && l.prunable) {
            plan.rates[l.id] = 1.0;
            plan.provenance[l.id] = "fixed";
        }
    ArchGraph out = apply_shrink_plan(g, plan);
    CHECK(struct_equal(out, g));
}

TEST_CASE("channel rounding") {
    CHECK(keep_count(512, 0.05) == 26); // round(25.6)
    CHECK(keep_count(512, 1.0) == 512);
    CHECK(keep_count(10, 0.05) == 1); // clamped to >= 1
    CHECK(prune_count(512, 0.05) == 26);
    CHECK(prune_count(10, 0.45) == 5); // half rounds up
    CHECK_THROWS_AS(keep_count(8, 0.0), GraphError);
    CHECK_THROWS_AS(keep_count(8, 1.2), GraphError);
}

TEST_CASE("uniform half plan quarters interior conv cost") {
    ArchGraph g = build_srnet(256, 1, 1);
    ShrinkPlan plan;
    for (const auto& l : g.layers)
        if (l.kind == LayerKind::conv && l.prunable) plan.rates[l.id] = 0.5;
    ArchGraph out = apply_shrink_plan(g, plan);
    CostReport before = cost_report(g);
    CostReport after = cost_report(out);
    for (const std::string id : {"l3_conv2", "l5_conv1", "l10_conv2", "l12_conv2"}) {
        double ratio = double(layer_params(after, id)) / double(layer_params(before, id));
        CHECK(ratio == doctest::Approx(0.25).epsilon(0.02));
    }
    // first conv has a fixed single-channel input: scales by zeta only
    double first = double(layer_params(after, "l1_conv")) / double(layer_params(before, "l1_conv"));
    CHECK(first == doctest::Approx(0.5).epsilon(0.02));
}

TEST_CASE("group-inconsistent plans are rejected") {
    ArchGraph g = build_srnet(64, 1, 4);
    ShrinkPlan plan;
    for (const auto& l : g.layers)
        if (l.kind == LayerKind::conv && l.prunable) plan.rates[l.id] = 0.5;
    plan.rates["l3_conv2"] = 0.25; // breaks the direct chain equality
    CHECK_THROWS_AS(apply_shrink_plan(g, plan), GraphError);
    plan.rates["l3_conv2"] = 0.5;
    plan.rates.erase("l5_conv1");
    CHECK_THROWS_AS(apply_shrink_plan(g, plan), GraphError);
}

TEST_CASE("plans keep shortcut groups shape-compatible") {
    for (std::uint64_t seed = 100; seed < 110; ++seed) {
        ArchGraph g = random_residual_graph(seed);
        ShrinkPlan plan;
        Rng rng(seed, "rates");
        for (const auto& grp : g.groups) {
            double zeta = 0.05 * double(1 + rng.below(20));
            for (const auto& m : grp.members) plan.rates[m] = zeta;
        }
        for (const auto& l : g.layers)
            if (l.kind == LayerKind::conv && l.prunable && !plan.rates.count(l.id))
                plan.rates[l.id] = 0.05 * double(1 + rng.below(20));
        ArchGraph out = apply_shrink_plan(g, plan); // validates adds internally
        for (const auto& grp : out.groups) {
            const auto& first = out.layer(grp.members[0]);
            for (const auto& m : grp.members) CHECK(out.layer(m).out_ch == first.out_ch);
        }
    }
}

TEST_CASE("serialization round-trip") {
    const std::string path = std::string(CALPA_SOURCE_DIR) + "/docs/xunet2_topology.json";
    for (ArchGraph g : {build_srnet(64, 1, 4), build_xunet2_from_file(64, path), random_residual_graph(7)}) {
        ArchGraph back = arch_from_json(arch_to_json(g));
        CHECK(struct_equal(back, g));
    }
    ShrinkPlan p;
    p.rates = {{"a", 0.5}, {"b", 1.0}};
    p.provenance = {{"a", "thinet"}, {"b", "l1_direct"}};
    p.meta["seed"] = 42;
    ShrinkPlan q = plan_from_json(plan_to_json(p));
    CHECK(q.rates == p.rates);
    CHECK(q.provenance == p.provenance);
    CHECK(q.meta["seed"] == 42);
}
