#pragma once

// Seeded generator of valid residual graphs: plain convs, direct shortcut
// chains, and strided projection-shortcut blocks in random succession.
// Shared by the unit suites and the acceptance runner.

#include "calpa/arch.hpp"
#include "calpa/rng.hpp"

inline calpa::ArchGraph random_residual_graph(std::uint64_t seed) {
    using namespace calpa;
    Rng rng(seed, "graphgen");
    ArchGraph g;
    g.name = "rnd" + std::to_string(seed);
    g.input_size = 32;

    std::string last;
    auto put = [&](LayerSpec l, std::vector<std::string> preds) {
        g.edges[l.id] = std::move(preds);
        last = l.id;
        g.layers.push_back(std::move(l));
    };
    auto chain = [&](LayerSpec l) {
        auto p = last;
        put(std::move(l), {p});
    };
    auto conv = [&](const std::string& id, int out, int kernel, int stride) {
        LayerSpec l;
        l.id = id;
        l.kind = LayerKind::conv;
        l.out_ch = out;
        l.kernel = kernel;
        l.stride = stride;
        l.pad = kernel == 1 ? 0 : 1;
        l.prunable = true;
        chain(std::move(l));
    };
    auto bn = [&](const std::string& id) {
        LayerSpec l;
        l.id = id;
        l.kind = LayerKind::bn;
        chain(std::move(l));
    };
    auto relu = [&](const std::string& id) {
        LayerSpec l;
        l.id = id;
        l.kind = LayerKind::activation;
        chain(std::move(l));
    };

    {
        LayerSpec in;
        in.id = "input";
        in.kind = LayerKind::input;
        put(std::move(in), {});
    }
    int width = 3 + static_cast<int>(rng.below(6));
    conv("stem", width, 3, 1);
    bn("stem_bn");
    relu("stem_relu");

    int spatial = 32;
    int n = 0;
    const int stages = 2 + static_cast<int>(rng.below(3));
    for (int s = 0; s < stages; ++s) {
        const int kind = static_cast<int>(rng.below(3));
        const std::string p = "s" + std::to_string(++n) + "_";
        if (kind == 0) {
            width = 3 + static_cast<int>(rng.below(8));
            conv(p + "conv", width, 3, 1);
            bn(p + "bn");
            relu(p + "relu");
        } else if (kind == 1) {
            const int blocks = 1 + static_cast<int>(rng.below(3));
            std::string skip = last;
            for (int bi = 0; bi < blocks; ++bi) {
                const std::string q = p + "b" + std::to_string(bi) + "_";
                conv(q + "conv1", width, 3, 1);
                bn(q + "bn1");
                relu(q + "relu1");
                conv(q + "conv2", width, 3, 1);
                bn(q + "bn2");
                LayerSpec a;
                a.id = q + "add";
                a.kind = LayerKind::add;
                put(std::move(a), {skip, q + "bn2"});
                skip = last;
            }
        } else {
            if (spatial < 8) {
                width = 3 + static_cast<int>(rng.below(8));
                conv(p + "conv", width, 3, 1);
                bn(p + "bn");
                relu(p + "relu");
                continue;
            }
            const std::string in_node = last;
            width = 3 + static_cast<int>(rng.below(8));
            conv(p + "conv1", width, 3, 2);
            bn(p + "bn1");
            relu(p + "relu1");
            conv(p + "conv2", width, 3, 1);
            bn(p + "bn2");
            {
                LayerSpec sc;
                sc.id = p + "sc";
                sc.kind = LayerKind::conv;
                sc.out_ch = width;
                sc.kernel = 1;
                sc.stride = 2;
                sc.pad = 0;
                sc.prunable = true;
                put(std::move(sc), {in_node});
            }
            bn(p + "sc_bn");
            LayerSpec a;
            a.id = p + "add";
            a.kind = LayerKind::add;
            put(std::move(a), {p + "sc_bn", p + "bn2"});
            spatial /= 2;
        }
    }
    {
        LayerSpec gp;
        gp.id = "gap";
        gp.kind = LayerKind::global_pool;
        chain(std::move(gp));
    }
    {
        LayerSpec fc;
        fc.id = "fc";
        fc.kind = LayerKind::fully_connected;
        fc.out_ch = 2;
        chain(std::move(fc));
    }
    infer_geometry(g);
    g.groups = classify_shortcuts(g);
    validate_graph(g);
    return g;
}
