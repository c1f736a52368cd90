#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "calpa/harness.hpp"
#include "calpa/rng.hpp"
#include "calpa/util.hpp"
#include "tiny_net.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

namespace fs = std::filesystem;
using namespace calpa;

namespace {

std::string fresh_dir(const std::string& name) {
    fs::remove_all(name);
    return name;
}

// Two classes separated by a large mean shift: solvable by any linear probe,
// so a trainer that works at all must saturate it.
Dataset write_probe_dataset(const std::string& dir, int pairs, int size, std::uint64_t seed) {
    fs::remove_all(dir);
    fs::create_directories(fs::path(dir) / "cover");
    fs::create_directories(fs::path(dir) / "stego");
    Rng rng(seed, "probe");
    for (int i = 0; i < pairs; ++i) {
        std::vector<std::uint8_t> c((std::size_t)size * size), s((std::size_t)size * size);
        for (auto& p : c) p = (std::uint8_t)(60 + rng.below(61));
        for (auto& p : s) p = (std::uint8_t)(160 + rng.below(61));
        char stem[16];
        std::snprintf(stem, sizeof(stem), "%05d.pgm", i);
        save_pgm((fs::path(dir) / "cover" / stem).string(), c, size, size);
        save_pgm((fs::path(dir) / "stego" / stem).string(), s, size, size);
    }
    const int train = pairs * 3 / 5, val = pairs / 5, test = pairs - train - val;
    nlohmann::json manifest = {{"kind", "calpa-dataset"}, {"version", 1},      {"count", pairs},
                               {"size", size},            {"payload", 0.0},    {"smoothing", 0},
                               {"seed", seed},            {"split", {{"train", train}, {"val", val}, {"test", test}}}};
    write_text_file((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
    return open_dataset(dir);
}

long long count_changes(const std::string& cover, const std::string& stego, int* max_abs) {
    int w = 0, h = 0;
    auto c = load_pgm(cover, w, h);
    auto s = load_pgm(stego, w, h);
    long long changed = 0;
    for (std::size_t i = 0; i < c.size(); ++i) {
        const int d = std::abs((int)c[i] - (int)s[i]);
        changed += d != 0;
        if (max_abs) *max_abs = std::max(*max_abs, d);
    }
    return changed;
}

std::string state_digest(const Checkpoint& ckpt) {
    return model_from(ckpt).params_digest();
}

} // namespace

TEST_CASE("pgm io round-trips and rejects malformed files") {
    std::vector<std::uint8_t> pix(12 * 5);
    for (std::size_t i = 0; i < pix.size(); ++i) pix[i] = (std::uint8_t)(i * 7 % 256);
    save_pgm("io_test.pgm", pix, 12, 5);
    int w = 0, h = 0;
    auto back = load_pgm("io_test.pgm", w, h);
    CHECK(w == 12);
    CHECK(h == 5);
    CHECK(back == pix);

    write_text_file("io_bad.pgm", "P2\n2 2\n255\n0 0 0 0\n");
    CHECK_THROWS_AS(load_pgm("io_bad.pgm", w, h), HarnessError);
    write_text_file("io_short.pgm", std::string("P5\n4 4\n255\n") + "ab");
    CHECK_THROWS_AS(load_pgm("io_short.pgm", w, h), HarnessError);
    CHECK_THROWS_AS(load_pgm("io_missing.pgm", w, h), HarnessError);
    CHECK_THROWS_AS(save_pgm("io_test.pgm", pix, 5, 5), HarnessError);
    std::remove("io_test.pgm");
    std::remove("io_bad.pgm");
    std::remove("io_short.pgm");

    // headers with comment lines still parse
    std::string with_comment = "P5\n# a note\n2 1\n255\nAB";
    write_text_file("io_comment.pgm", with_comment);
    auto two = load_pgm("io_comment.pgm", w, h);
    CHECK(w == 2);
    CHECK(two[0] == 'A');
    std::remove("io_comment.pgm");
}

TEST_CASE("dataset generator embeds calibrated changes") {
    SUBCASE("zero payload leaves stegos identical") {
        DatasetSpec spec;
        spec.count = 3;
        spec.size = 32;
        spec.payload = 0.0;
        spec.train = 1;
        spec.val = 1;
        spec.test = 1;
        spec.seed = 5;
        generate_dataset(spec, fresh_dir("ds_zero"));
        Dataset d = open_dataset("ds_zero");
        for (const auto& split : {"train", "val", "test"}) {
            auto [c, s] = d.pair_paths(split, 0);
            int max_abs = 0;
            CHECK(count_changes(c, s, &max_abs) == 0);
            CHECK(max_abs == 0);
        }
    }

    SUBCASE("full payload flips every interior-valued pixel by one") {
        DatasetSpec spec;
        spec.count = 2;
        spec.size = 32;
        spec.payload = 1.0;
        spec.smoothing = 1;
        spec.train = 2;
        spec.val = 0;
        spec.test = 0;
        spec.seed = 6;
        generate_dataset(spec, fresh_dir("ds_full"));
        Dataset d = open_dataset("ds_full");
        for (int i = 0; i < 2; ++i) {
            auto [cp, sp] = d.pair_paths("train", i);
            int w = 0, h = 0;
            auto c = load_pgm(cp, w, h);
            // blurred noise stays interior, so clamping never cancels a flip
            for (auto p : c) REQUIRE((p >= 1 && p <= 254));
            int max_abs = 0;
            CHECK(count_changes(cp, sp, &max_abs) == (long long)c.size());
            CHECK(max_abs == 1);
        }
    }

    SUBCASE("payload 0.4 change counts sit in the binomial band") {
        DatasetSpec spec;
        spec.count = 100;
        spec.size = 64;
        spec.payload = 0.4;
        spec.smoothing = 1;
        spec.train = 60;
        spec.val = 20;
        spec.test = 20;
        spec.seed = 7;
        generate_dataset(spec, fresh_dir("ds_band"));
        Dataset d = open_dataset("ds_band");
        double total = 0.0;
        for (const auto& split : {"train", "val", "test"}) {
            const int n = d.split_count(split);
            for (int i = 0; i < n; ++i) {
                auto [c, s] = d.pair_paths(split, i);
                int max_abs = 0;
                total += (double)count_changes(c, s, &max_abs);
                CHECK(max_abs <= 1);
            }
        }
        const double mean = total / 100.0;
        const double expect = 0.4 * 4096.0;
        const double band = 3.0 * std::sqrt(4096.0 * 0.4 * 0.6 / 100.0);
        CHECK(mean > expect - band);
        CHECK(mean < expect + band);
    }

    SUBCASE("generation is deterministic and self-describing") {
        DatasetSpec spec;
        spec.count = 4;
        spec.size = 32;
        spec.train = 2;
        spec.val = 1;
        spec.test = 1;
        spec.seed = 9;
        generate_dataset(spec, fresh_dir("ds_det_a"));
        generate_dataset(spec, fresh_dir("ds_det_b"));
        for (const auto& rel : {"cover/00000.pgm", "stego/00003.pgm", "manifest.json"})
            CHECK(file_digest_hex((fs::path("ds_det_a") / rel).string()) ==
                  file_digest_hex((fs::path("ds_det_b") / rel).string()));
        Dataset d = open_dataset("ds_det_a");
        CHECK(d.spec.count == 4);
        CHECK(d.split_count("train") == 2);
        CHECK(d.split_count("test") == 1);
        CHECK(fs::exists(d.pair_paths("test", 0).first));
        CHECK_THROWS_AS(d.pair_paths("val", 5), HarnessError);
        CHECK_THROWS_AS(d.pair_paths("half", 0), HarnessError);
        CHECK_THROWS_AS(open_dataset("ds_nowhere"), HarnessError);
    }

    SUBCASE("spec validation") {
        DatasetSpec spec;
        spec.count = 2;
        spec.size = 16;
        spec.train = 2;
        spec.val = 0;
        spec.test = 0;
        CHECK_THROWS_AS(generate_dataset(spec, "ds_reject"), HarnessError);
        spec.size = 32;
        spec.payload = 1.5;
        CHECK_THROWS_AS(generate_dataset(spec, "ds_reject"), HarnessError);
        spec.payload = 0.4;
        spec.val = 1;
        CHECK_THROWS_AS(generate_dataset(spec, "ds_reject"), HarnessError);
    }
}

TEST_CASE("batches pair each cover with its stego") {
    DatasetSpec spec;
    spec.count = 20;
    spec.size = 32;
    spec.train = 12;
    spec.val = 4;
    spec.test = 4;
    TrainConfig cfg;
    cfg.batch_pairs = 5;
    cfg.seed = 3;

    bool differs = false;
    std::vector<std::pair<int, int>> first;
    for (long long it = 1; it <= 5; ++it) {
        auto items = batch_items(spec, cfg, it);
        REQUIRE(items.size() == 10);
        for (std::size_t i = 0; i < items.size(); i += 2) {
            CHECK(items[i].second == 0);
            CHECK(items[i + 1].second == 1);
            CHECK(items[i].first == items[i + 1].first); // the twin
            CHECK(items[i].first >= 0);
            CHECK(items[i].first < 12);
        }
        if (it == 1) first = items;
        else if (items != first) differs = true;
        CHECK(batch_items(spec, cfg, it) == items);
    }
    CHECK(differs);
}

TEST_CASE("learning-rate schedules are stateless functions of the iteration") {
    TrainConfig cfg;
    cfg.initial_lr = 0.002;
    CHECK(lr_at(cfg, 1) == doctest::Approx(0.002));
    CHECK(lr_at(cfg, 100000) == doctest::Approx(0.002));

    cfg.schedule = "step_drop";
    cfg.step_at = 50;
    cfg.step_factor = 0.1;
    CHECK(lr_at(cfg, 50) == doctest::Approx(0.002));
    CHECK(lr_at(cfg, 51) == doctest::Approx(0.0002));

    cfg.schedule = "decay_pct_every";
    cfg.decay_every = 10;
    cfg.decay_pct = 10.0;
    CHECK(lr_at(cfg, 1) == doctest::Approx(0.002));
    CHECK(lr_at(cfg, 10) == doctest::Approx(0.002));
    CHECK(lr_at(cfg, 11) == doctest::Approx(0.002 * 0.9));
    CHECK(lr_at(cfg, 21) == doctest::Approx(0.002 * 0.81));

    TrainConfig bad;
    bad.optimizer = "adagrad";
    CHECK_THROWS_AS(validate_train_config(bad), HarnessError);
    bad = TrainConfig{};
    bad.schedule = "linear";
    CHECK_THROWS_AS(validate_train_config(bad), HarnessError);
    bad = TrainConfig{};
    bad.batch_pairs = 0;
    CHECK_THROWS_AS(validate_train_config(bad), HarnessError);
    bad = TrainConfig{};
    bad.decay_pct = 100.0;
    CHECK_THROWS_AS(validate_train_config(bad), HarnessError);
}

TEST_CASE("optimizer state round-trips through its blob") {
    Rng rng(8, "opt");
    for (const std::string kind : {"adamax", "sgd_momentum"}) {
        OptState o;
        o.kind = kind;
        o.t = 17;
        for (int slot = 0; slot < 3; ++slot) {
            std::vector<float> m(5 + slot);
            for (auto& v : m) v = (float)rng.normal();
            o.m.push_back(m);
            if (kind == "adamax") {
                std::vector<float> u(5 + slot);
                for (auto& v : u) v = (float)std::fabs(rng.normal());
                o.u.push_back(u);
            }
        }
        auto bytes = o.serialize();
        OptState back = OptState::deserialize(bytes);
        CHECK(back.kind == o.kind);
        CHECK(back.t == o.t);
        CHECK(back.m == o.m);
        CHECK(back.u == o.u);

        auto corrupt = bytes;
        corrupt[0] = 'X';
        CHECK_THROWS_AS(OptState::deserialize(corrupt), HarnessError);
        auto trailing = bytes;
        trailing.push_back(0);
        CHECK_THROWS_AS(OptState::deserialize(trailing), HarnessError);
    }
}

TEST_CASE("roc metrics from raw scores") {
    SUBCASE("hand-traced six-item roc") {
        Metrics m = metrics_from_scores({0.9, 0.8, 0.4}, {0.7, 0.3, 0.2});
        CHECK(m.pfa70 == doctest::Approx(1.0 / 3.0));
        CHECK(m.pe == doctest::Approx(1.0 / 6.0));

        // brute-force threshold enumeration over the pooled scores
        std::vector<double> ss = {0.9, 0.8, 0.4}, cs = {0.7, 0.3, 0.2};
        std::vector<double> pool = {0.9, 0.8, 0.7, 0.4, 0.3, 0.2, 1e9};
        double best_pe = 1.0, best_pfa70 = 1.0;
        for (double t : pool) {
            int tp = 0, fp = 0;
            for (double s : ss) tp += s >= t;
            for (double s : cs) fp += s >= t;
            const double tpr = tp / 3.0, fpr = fp / 3.0;
            best_pe = std::min(best_pe, 0.5 * (fpr + 1.0 - tpr));
            if (tpr >= 0.7 - 1e-12) best_pfa70 = std::min(best_pfa70, fpr);
        }
        CHECK(m.pe == doctest::Approx(best_pe));
        CHECK(m.pfa70 == doctest::Approx(best_pfa70));
    }

    SUBCASE("perfect separation") {
        Metrics m = metrics_from_scores({0.9, 0.8, 0.7}, {0.3, 0.2, 0.1});
        CHECK(m.pe == doctest::Approx(0.0));
        CHECK(m.pmd == doctest::Approx(0.0));
        CHECK(m.pfa30 == doctest::Approx(0.0));
        CHECK(m.pfa50 == doctest::Approx(0.0));
        CHECK(m.pfa70 == doctest::Approx(0.0));
        CHECK(m.accuracy == doctest::Approx(1.0));
    }

    SUBCASE("indistinguishable scores sit at chance") {
        Metrics m = metrics_from_scores({0.5, 0.5}, {0.5, 0.5});
        CHECK(m.pe == doctest::Approx(0.5));
    }

    SUBCASE("strictly monotone score transforms leave the roc untouched") {
        Rng rng(12, "roc");
        std::vector<double> ss, cs;
        for (int i = 0; i < 40; ++i) ss.push_back(rng.normal() + 0.5);
        for (int i = 0; i < 40; ++i) cs.push_back(rng.normal());
        Metrics a = metrics_from_scores(ss, cs);
        auto mono = [](double x) { return std::tanh(x) + 3.0 * x + 2.0; };
        for (auto& v : ss) v = mono(v);
        for (auto& v : cs) v = mono(v);
        Metrics b = metrics_from_scores(ss, cs);
        CHECK(a.pfa30 == b.pfa30);
        CHECK(a.pfa50 == b.pfa50);
        CHECK(a.pfa70 == b.pfa70);
        CHECK(a.pmd == b.pmd);
        CHECK(a.pe == b.pe);
    }

    SUBCASE("empty splits are rejected") {
        CHECK_THROWS_AS(metrics_from_scores({}, {0.5}), HarnessError);
        CHECK_THROWS_AS(metrics_from_scores({0.5}, {}), HarnessError);
    }
}

TEST_CASE("probe task saturates and both optimizers reduce the loss") {
    Dataset d = write_probe_dataset("ds_probe", 40, 32, 77);
    ArchGraph g = tiny::plain_net(32);

    TrainConfig cfg;
    cfg.optimizer = "adamax";
    cfg.initial_lr = 0.01;
    cfg.batch_pairs = 4;
    cfg.max_iters = 500;
    cfg.eval_every = 25;
    cfg.seed = 7;
    TrainResult res = train(g, d, cfg);
    CHECK(res.best.best_val >= 0.99);
    REQUIRE(res.curves.size() >= 4);
    CHECK(res.curves.front().loss > res.curves.back().loss);

    // the held-out metrics of the saturated probe
    Model best = model_from(res.best);
    Metrics m = evaluate(best, d, "test");
    CHECK(m.accuracy >= 0.99);
    CHECK(m.pe <= 0.01);
    CHECK(m.pe <= 0.5); // chance bound holds for any sane classifier

    const std::string csv = curves_to_csv(res.curves);
    CHECK(csv.rfind("iteration,train_acc,val_acc\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == (long)res.curves.size() + 1);

    TrainConfig scfg;
    scfg.optimizer = "sgd_momentum";
    scfg.initial_lr = 1e-6;
    scfg.batch_pairs = 4;
    scfg.max_iters = 100;
    scfg.eval_every = 10;
    scfg.seed = 7;
    TrainResult sres = train(g, d, scfg);
    CHECK(sres.curves.front().loss > sres.curves.back().loss);
}

TEST_CASE("training a shrunken graph goes through the same code path") {
    Dataset d = write_probe_dataset("ds_shrunk", 20, 32, 78);
    ArchGraph g = tiny::plain_net(32);
    ShrinkPlan plan;
    plan.rates = {{"conv_a", 0.5}, {"conv_b", 0.6}};
    plan.provenance = {{"conv_a", "fixed"}, {"conv_b", "fixed"}};
    ArchGraph shrunk = apply_shrink_plan(g, plan);

    TrainConfig cfg;
    cfg.batch_pairs = 2;
    cfg.max_iters = 30;
    cfg.eval_every = 10;
    cfg.seed = 4;
    TrainResult res = train(shrunk, d, cfg);
    CHECK(res.last.iteration == 30);
    CHECK(struct_equal(res.last.graph, shrunk));
}

TEST_CASE("same-seed training is bit-identical") {
    Dataset d = write_probe_dataset("ds_det", 20, 32, 79);
    ArchGraph g = tiny::plain_net(32);
    TrainConfig cfg;
    cfg.batch_pairs = 2;
    cfg.max_iters = 30;
    cfg.eval_every = 10;
    cfg.seed = 11;

    TrainResult a = train(g, d, cfg);
    TrainResult b = train(g, d, cfg);
    CHECK(curves_to_csv(a.curves) == curves_to_csv(b.curves));
    CHECK(state_digest(a.last) == state_digest(b.last));
    CHECK(a.last.opt.serialize() == b.last.opt.serialize());

    TrainConfig other = cfg;
    other.seed = 12;
    TrainResult c = train(g, d, other);
    CHECK(state_digest(c.last) != state_digest(a.last));
}

TEST_CASE("checkpoints round-trip and resume without drift") {
    Dataset d = write_probe_dataset("ds_resume", 20, 32, 80);
    ArchGraph g = tiny::plain_net(32);

    TrainConfig cfg19;
    cfg19.batch_pairs = 2;
    cfg19.max_iters = 19;
    cfg19.eval_every = 19;
    cfg19.seed = 23;
    TrainResult part = train(g, d, cfg19);
    REQUIRE(part.last.iteration == 19);

    save_checkpoint("ckpt_resume", part.last);
    Checkpoint loaded = load_checkpoint("ckpt_resume");
    CHECK(loaded.iteration == 19);
    CHECK(state_digest(loaded) == state_digest(part.last));
    CHECK(loaded.opt.serialize() == part.last.opt.serialize());
    CHECK(struct_equal(loaded.graph, g));

    TrainConfig cfg20 = cfg19;
    cfg20.max_iters = 20;
    cfg20.eval_every = 20;
    TrainResult resumed = resume(loaded, d, cfg20);
    TrainResult straight = train(g, d, cfg20);
    CHECK(state_digest(resumed.last) == state_digest(straight.last));
    CHECK(resumed.last.opt.serialize() == straight.last.opt.serialize());

    TrainConfig wrong = cfg20;
    wrong.optimizer = "sgd_momentum";
    CHECK_THROWS_AS(resume(loaded, d, wrong), HarnessError);

    // tampering with the stored stream is caught on load
    auto bytes = read_text_file("ckpt_resume/index.json");
    write_text_file("ckpt_resume/index.json",
                    bytes.substr(0, bytes.find("params_digest")) + "params_digest\": \"00\",\n  \"x" +
                        bytes.substr(bytes.find("params_digest") + 13));
    CHECK_THROWS(load_checkpoint("ckpt_resume"));
}

TEST_CASE("slicing a checkpoint replays the searched criteria exactly") {
    DatasetSpec spec;
    spec.count = 30;
    spec.size = 32;
    spec.payload = 0.4;
    spec.train = 20;
    spec.val = 6;
    spec.test = 4;
    spec.seed = 31;
    generate_dataset(spec, fresh_dir("ds_slice"));
    Dataset d = open_dataset("ds_slice");

    ArchGraph g = tiny::residual_net(32);
    TrainConfig tcfg;
    tcfg.batch_pairs = 2;
    tcfg.max_iters = 20;
    tcfg.eval_every = 10;
    tcfg.seed = 41;
    TrainResult trained = train(g, d, tcfg);

    SearchConfig scfg;
    scfg.seed = 41;
    scfg.sample.m = 3;
    scfg.sample.n = 2;
    scfg.sample.seed = 141;
    scfg.val_subsample = 8;
    Validator validator = make_search_validator(d, "val", scfg.val_subsample, scfg.seed);
    auto images = make_sample_images(d, scfg.sample);
    auto searched = bottom_up_search(model_from(trained.best), validator, images, scfg);
    REQUIRE(searched.plan.meta.count("final_acc"));

    // the sliced-but-untrained model scores exactly the accuracy the search
    // recorded for its final cumulative pruned state
    Model sliced = slice_checkpoint(trained.best, searched.plan, d);
    CHECK(sliced.params_digest() == searched.plan.meta.at("final_digest"));
    CHECK(validator(sliced) == (double)searched.plan.meta.at("final_acc"));

    // surviving-parameter accounting agrees with the shrunken graph's report
    long long conv_fc_params = 0;
    for (const auto& [name, t] : sliced.named_state())
        if (name.size() > 2 && name.substr(name.size() - 2) == ".w")
            conv_fc_params += (long long)t.v.size();
    const LayerSpec& fc = sliced.graph().layer("fc");
    conv_fc_params -= (long long)0; // fc bias lives under .b and is excluded
    CostReport rep = cost_report(apply_shrink_plan(g, searched.plan));
    CHECK(conv_fc_params == rep.total_params);
    CHECK(fc.in_ch == sliced.graph().layer("t_conv2").out_ch);

    // an identity plan slices nothing
    ShrinkPlan identity;
    for (const auto& [id, z] : searched.plan.rates) {
        identity.rates[id] = 1.0;
        identity.provenance[id] = "fixed";
    }
    identity.meta["config"] = searched.plan.meta.at("config");
    Model whole = slice_checkpoint(trained.best, identity, d);
    CHECK(whole.params_digest() == model_from(trained.best).params_digest());

    // finetuning the sliced model runs the ordinary loop
    TrainConfig fcfg = tcfg;
    fcfg.max_iters = 10;
    fcfg.eval_every = 5;
    TrainResult tuned = finetune(trained.best, searched.plan, d, fcfg);
    CHECK(tuned.last.iteration == 10);
    CHECK(struct_equal(tuned.last.graph, sliced.graph()));

    // plans for a different graph are rejected
    ShrinkPlan foreign;
    foreign.rates = {{"conv_a", 0.5}};
    foreign.provenance = {{"conv_a", "fixed"}};
    foreign.meta["config"] = searched.plan.meta.at("config");
    CHECK_THROWS(slice_checkpoint(trained.best, foreign, d));

    ShrinkPlan no_meta = searched.plan;
    no_meta.meta = nlohmann::json::object();
    CHECK_THROWS_AS(slice_checkpoint(trained.best, no_meta, d), HarnessError);
}

TEST_CASE("sample images and validator subsets are deterministic") {
    Dataset d = write_probe_dataset("ds_sub", 20, 32, 81);
    SampleSpec spec;
    spec.m = 4;
    spec.n = 2;
    spec.seed = 9;
    auto a = make_sample_images(d, spec);
    auto b = make_sample_images(d, spec);
    REQUIRE(a.size() == 4);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].v == b[i].v);
    CHECK(a[0].shape == std::vector<int>{1, 32, 32});

    Model m(tiny::plain_net(32), 3);
    Validator v4 = make_search_validator(d, "val", 4, 5);
    Validator v4b = make_search_validator(d, "val", 4, 5);
    CHECK(v4(m) == v4b(m));
    Validator vall = make_search_validator(d, "val", 0, 5);
    CHECK(vall(m) >= 0.0);
    CHECK(vall(m) <= 1.0);
}
