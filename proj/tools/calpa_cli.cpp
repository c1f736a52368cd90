// Command-line front end for the pruning pipeline. Every stage reads and
// writes plain files; pipeline state is the filesystem. An output directory
// always carries resolved_config.json (the merged settings, their digest and
// digests of all inputs), which is enough to replay the stage.

#include "calpa/arch.hpp"
#include "calpa/harness.hpp"
#include "calpa/search.hpp"
#include "calpa/spectra.hpp"
#include "calpa/util.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace calpa;

namespace {

constexpr int kOk = 0;
constexpr int kBadConfig = 2;
constexpr int kMissingInput = 3;
constexpr int kStageOrder = 4;
constexpr int kDiverged = 5;
constexpr int kRunFailure = 6;

const char* kExitHelp =
    "Exit codes:\n"
    "  0  success\n"
    "  2  invalid arguments or malformed config\n"
    "  3  missing input artifact\n"
    "  4  input artifacts exist but are unusable for this stage\n"
    "  5  training diverged\n"
    "  6  runtime failure\n";

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};
struct MissingInput : std::runtime_error {
    explicit MissingInput(const std::string& what) : std::runtime_error(what) {}
};
struct StageError : std::runtime_error {
    explicit StageError(const std::string& what) : std::runtime_error(what) {}
};

// Settings resolve as: flag if given, else config-file value, else default.
// Every consulted key lands in the resolved snapshot; file keys nobody
// consulted are rejected.
struct Merge {
    CLI::App* cmd = nullptr;
    json file = json::object();
    json resolved = json::object();
    std::set<std::string> seen;

    template <class T>
    T pick(const std::string& key, const T& flag_val, const T& dflt) {
        T v = dflt;
        if (file.contains(key)) {
            try {
                v = file.at(key).get<T>();
            } catch (const json::exception& e) {
                throw ConfigError("config key \"" + key + "\": " + e.what());
            }
            seen.insert(key);
        }
        if (cmd->count("--" + key) > 0) v = flag_val;
        resolved[key] = v;
        return v;
    }

    void finish() const {
        for (const auto& it : file.items())
            if (!seen.count(it.key())) throw ConfigError("unknown config key: " + it.key());
    }
};

Merge make_merge(CLI::App* cmd, const std::string& config_path) {
    Merge mg;
    mg.cmd = cmd;
    if (!config_path.empty()) {
        if (!fs::exists(config_path)) throw MissingInput("config file not found: " + config_path);
        try {
            mg.file = json::parse(read_text_file(config_path));
        } catch (const json::exception& e) {
            throw ConfigError(std::string("config file: ") + e.what());
        }
        if (!mg.file.is_object()) throw ConfigError("config file must hold a JSON object");
    }
    return mg;
}

// One stage invocation: resolved settings, registered inputs, output dir.
struct Stage {
    std::string command;
    std::string out;
    Merge mg;
    json inputs = json::object();

    std::string need_file(const std::string& path, const std::string& what) {
        if (path.empty()) throw ConfigError(what + " path required");
        if (!fs::is_regular_file(path)) throw MissingInput(what + " not found: " + path);
        inputs[what] = {{"path", path}, {"digest", file_digest_hex(path)}};
        return path;
    }

    // Directories are registered through their marker file, whose digest
    // already covers the directory's content digests.
    std::string need_dir(const std::string& path, const std::string& what,
                         const std::string& marker) {
        if (path.empty()) throw ConfigError(what + " path required");
        const std::string m = (fs::path(path) / marker).string();
        if (!fs::is_regular_file(m)) throw MissingInput(what + " not found: " + m);
        inputs[what] = {{"path", path}, {"digest", file_digest_hex(m)}};
        return path;
    }

    void open_out() {
        if (out.empty()) throw ConfigError("output directory required (--out)");
        fs::create_directories(out);
        json snap;
        snap["command"] = command;
        snap["config"] = mg.resolved;
        const std::string body = mg.resolved.dump(2);
        snap["config_digest"] = bytes_digest_hex(body.data(), body.size());
        snap["inputs"] = inputs;
        write_text_file((fs::path(out) / "resolved_config.json").string(), snap.dump(2) + "\n");
    }

    std::string path(const std::string& name) const { return (fs::path(out) / name).string(); }
};

// Deserialization failures of existing inputs are stage misuse, not crashes.
ArchGraph read_arch(const std::string& path) {
    try {
        return load_arch(path);
    } catch (const std::exception& e) {
        throw StageError("unusable architecture " + path + ": " + e.what());
    }
}

ShrinkPlan read_plan(const std::string& path) {
    try {
        return load_plan(path);
    } catch (const std::exception& e) {
        throw StageError("unusable plan " + path + ": " + e.what());
    }
}

Checkpoint read_checkpoint(const std::string& dir) {
    try {
        return load_checkpoint(dir);
    } catch (const std::exception& e) {
        throw StageError("unusable checkpoint " + dir + ": " + e.what());
    }
}

Dataset read_dataset(const std::string& dir) {
    try {
        return open_dataset(dir);
    } catch (const std::exception& e) {
        throw StageError("unusable dataset " + dir + ": " + e.what());
    }
}

std::string fmt(const char* spec, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), spec, v);
    return buf;
}

// ---------------------------------------------------------------- flag pools

struct CommonFlags {
    std::string config;
    std::string out;
    std::uint64_t seed = 1;
};

struct DataFlags {
    int count = 2000;
    int size = 64;
    double payload = 0.4;
    int smoothing = 1;
    int train = 1400, val = 200, test = 400;
};

struct ArchFlags {
    std::string family = "srnet";
    int input_size = 256;
    int width_num = 1, width_den = 1;
    std::string topology;
};

struct TrainFlags {
    std::string data, arch, ckpt, plan;
    std::string optimizer = "adamax";
    double initial_lr = 0.001;
    std::string schedule = "none";
    long long step_at = 0;
    double step_factor = 0.1;
    long long decay_every = 5000;
    double decay_pct = 10.0;
    int batch_pairs = 8;
    long long max_iters = 1000;
    long long eval_every = 100;
    int val_subsample = 0;
};

struct SearchFlags {
    std::string data, ckpt;
    double eps = 0.05;
    double sigma = 0.05;
    double gamma_cap = 0.95;
    bool cumulative = true;
    int val_subsample = 0;
    int sample_m = 32;
    int sample_n = 10;
};

struct ShrinkFlags {
    std::string arch, plan, baseline;
    double eps = 0.05;
};

struct ReportFlags {
    std::string arch, ref_arch, ckpt, data;
    std::string split = "test";
};

struct SpectraFlags {
    std::string ckpt, data, mode = "channel", layer;
    int channel = 0;
    double split = 0.25;
    std::string image_split = "val";
    int image_index = 0;
    bool stego = false;
    long long samples = 100000;
    int bins = 64;
    int terms = 2;
    double omega1 = 0.0, omega2 = 0.0;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config, "JSON config file; flags override its values");
    cmd->add_option("--out", f.out, "output directory");
    cmd->add_option("--seed", f.seed, "global seed for this stage");
}

// ------------------------------------------------------------------- stages

int run_gen_data(Stage& st, const CommonFlags& c, const DataFlags& f) {
    DatasetSpec spec;
    spec.count = st.mg.pick("count", f.count, 2000);
    spec.size = st.mg.pick("size", f.size, 64);
    spec.payload = st.mg.pick("payload", f.payload, 0.4);
    spec.smoothing = st.mg.pick("smoothing", f.smoothing, 1);
    spec.train = st.mg.pick("train", f.train, 1400);
    spec.val = st.mg.pick("val", f.val, 200);
    spec.test = st.mg.pick("test", f.test, 400);
    spec.seed = st.mg.pick<std::uint64_t>("seed", c.seed, 1);
    st.mg.finish();
    if (spec.count < 1) throw ConfigError("count must be >= 1");
    if (spec.size < 32) throw ConfigError("size must be >= 32");
    if (!(spec.payload >= 0.0 && spec.payload <= 1.0)) throw ConfigError("payload must lie in [0,1]");
    if (spec.smoothing < 0) throw ConfigError("smoothing must be >= 0");
    if (spec.train < 0 || spec.val < 0 || spec.test < 0 ||
        spec.train + spec.val + spec.test != spec.count)
        throw ConfigError("train+val+test must equal count");
    st.open_out();
    generate_dataset(spec, st.out);
    std::printf("gen-data: %d pairs of %dx%d at payload %.3g under %s\n", spec.count, spec.size,
                spec.size, spec.payload, st.out.c_str());
    return kOk;
}

int run_build_arch(Stage& st, const CommonFlags& c, const ArchFlags& f) {
    const std::string family = st.mg.pick<std::string>("family", f.family, "srnet");
    const int input_size = st.mg.pick("input_size", f.input_size, 256);
    const int num = st.mg.pick("width_num", f.width_num, 1);
    const int den = st.mg.pick("width_den", f.width_den, 1);
    const std::string topology = st.mg.pick<std::string>("topology", f.topology, "");
    st.mg.pick<std::uint64_t>("seed", c.seed, 1);
    st.mg.finish();

    ArchGraph g;
    if (family == "srnet") {
        if (num < 1 || den < 1) throw ConfigError("width_num and width_den must be >= 1");
        g = build_srnet(input_size, num, den);
    } else if (family == "xunet2") {
        const std::string p = st.need_file(topology, "topology");
        try {
            g = build_xunet2_from_file(input_size, p);
        } catch (const std::exception& e) {
            throw StageError("unusable topology " + p + ": " + e.what());
        }
    } else {
        throw ConfigError("family must be srnet or xunet2");
    }
    st.open_out();
    save_arch(st.path("arch.json"), g);
    const CostReport cr = cost_report(g);
    std::printf("build-arch: %s at %d, %lld params, %lld flops -> %s\n", family.c_str(),
                input_size, cr.total_params, cr.total_flops, st.path("arch.json").c_str());
    return kOk;
}

TrainConfig pick_train_config(Stage& st, const CommonFlags& c, const TrainFlags& f) {
    TrainConfig cfg;
    cfg.optimizer = st.mg.pick<std::string>("optimizer", f.optimizer, "adamax");
    cfg.initial_lr = st.mg.pick("initial_lr", f.initial_lr, 0.001);
    cfg.schedule = st.mg.pick<std::string>("schedule", f.schedule, "none");
    cfg.step_at = st.mg.pick("step_at", f.step_at, 0LL);
    cfg.step_factor = st.mg.pick("step_factor", f.step_factor, 0.1);
    cfg.decay_every = st.mg.pick("decay_every", f.decay_every, 5000LL);
    cfg.decay_pct = st.mg.pick("decay_pct", f.decay_pct, 10.0);
    cfg.batch_pairs = st.mg.pick("batch_pairs", f.batch_pairs, 8);
    cfg.max_iters = st.mg.pick("max_iters", f.max_iters, 1000LL);
    cfg.eval_every = st.mg.pick("eval_every", f.eval_every, 100LL);
    cfg.val_subsample = st.mg.pick("val_subsample", f.val_subsample, 0);
    cfg.seed = st.mg.pick<std::uint64_t>("seed", c.seed, 1);
    try {
        validate_train_config(cfg);
    } catch (const HarnessError& e) {
        throw ConfigError(e.what());
    }
    return cfg;
}

void write_train_result(Stage& st, const TrainResult& res) {
    save_checkpoint(st.path("best"), res.best);
    save_checkpoint(st.path("last"), res.last);
    write_text_file(st.path("curves.csv"), curves_to_csv(res.curves));
    std::printf("%s: %lld iterations, best val %.4f at %lld -> %s\n", st.command.c_str(),
                res.last.iteration, res.best.best_val, res.best.iteration, st.out.c_str());
}

int run_train(Stage& st, const CommonFlags& c, const TrainFlags& f) {
    const std::string data = st.mg.pick<std::string>("data", f.data, "");
    const std::string arch = st.mg.pick<std::string>("arch", f.arch, "");
    const TrainConfig cfg = pick_train_config(st, c, f);
    st.mg.finish();
    const Dataset ds = read_dataset(st.need_dir(data, "data", "manifest.json"));
    const ArchGraph g = read_arch(st.need_file(arch, "arch"));
    st.open_out();
    write_train_result(st, train(g, ds, cfg));
    return kOk;
}

int run_finetune(Stage& st, const CommonFlags& c, const TrainFlags& f) {
    const std::string data = st.mg.pick<std::string>("data", f.data, "");
    const std::string ckpt = st.mg.pick<std::string>("ckpt", f.ckpt, "");
    const std::string plan_path = st.mg.pick<std::string>("plan", f.plan, "");
    const TrainConfig cfg = pick_train_config(st, c, f);
    st.mg.finish();
    const Dataset ds = read_dataset(st.need_dir(data, "data", "manifest.json"));
    const Checkpoint ck = read_checkpoint(st.need_dir(ckpt, "ckpt", "index.json"));
    const ShrinkPlan plan = read_plan(st.need_file(plan_path, "plan"));
    try {
        slice_checkpoint(ck, plan, ds); // classify plan/checkpoint mismatches up front
    } catch (const std::exception& e) {
        throw StageError("plan does not fit the checkpoint: " + std::string(e.what()));
    }
    st.open_out();
    write_train_result(st, finetune(ck, plan, ds, cfg));
    return kOk;
}

int run_search(Stage& st, const CommonFlags& c, const SearchFlags& f) {
    const std::string data = st.mg.pick<std::string>("data", f.data, "");
    const std::string ckpt = st.mg.pick<std::string>("ckpt", f.ckpt, "");
    SearchConfig cfg;
    cfg.eps = st.mg.pick("eps", f.eps, 0.05);
    cfg.sigma = st.mg.pick("sigma", f.sigma, 0.05);
    cfg.gamma_cap = st.mg.pick("gamma_cap", f.gamma_cap, 0.95);
    cfg.cumulative = st.mg.pick("cumulative", f.cumulative, true);
    cfg.val_subsample = st.mg.pick("val_subsample", f.val_subsample, 0);
    cfg.sample.m = st.mg.pick("sample_m", f.sample_m, 32);
    cfg.sample.n = st.mg.pick("sample_n", f.sample_n, 10);
    cfg.seed = st.mg.pick<std::uint64_t>("seed", c.seed, 1);
    cfg.sample.seed = cfg.seed;
    st.mg.finish();
    try {
        validate_config(cfg);
    } catch (const SearchError& e) {
        throw ConfigError(e.what());
    }
    const Dataset ds = read_dataset(st.need_dir(data, "data", "manifest.json"));
    const Checkpoint ck = read_checkpoint(st.need_dir(ckpt, "ckpt", "index.json"));
    st.open_out();
    Model model = model_from(ck);
    const Validator validate = make_search_validator(ds, "val", cfg.val_subsample, cfg.seed);
    const std::vector<TensorF> images = make_sample_images(ds, cfg.sample);
    const SearchResult res = bottom_up_search(std::move(model), validate, images, cfg);
    save_plan(st.path("plan.json"), res.plan);
    save_trace(st.path("trace.csv"), res.trace);
    std::printf("search: %zu layer rates, acc0 %.4f", res.plan.rates.size(), res.trace.acc0);
    if (res.plan.meta.contains("final_acc"))
        std::printf(", final %.4f", res.plan.meta.at("final_acc").get<double>());
    std::printf(" -> %s\n", st.out.c_str());
    return kOk;
}

int run_sweep(Stage& st, const CommonFlags& c, const SearchFlags& f) {
    const std::string data = st.mg.pick<std::string>("data", f.data, "");
    const std::string ckpt = st.mg.pick<std::string>("ckpt", f.ckpt, "");
    SearchConfig cfg;
    cfg.eps = st.mg.pick("eps", f.eps, 0.05);
    cfg.val_subsample = st.mg.pick("val_subsample", f.val_subsample, 0);
    cfg.sample.m = st.mg.pick("sample_m", f.sample_m, 32);
    cfg.sample.n = st.mg.pick("sample_n", f.sample_n, 10);
    cfg.seed = st.mg.pick<std::uint64_t>("seed", c.seed, 1);
    cfg.sample.seed = cfg.seed;
    st.mg.finish();
    try {
        validate_config(cfg);
    } catch (const SearchError& e) {
        throw ConfigError(e.what());
    }
    const Dataset ds = read_dataset(st.need_dir(data, "data", "manifest.json"));
    const Checkpoint ck = read_checkpoint(st.need_dir(ckpt, "ckpt", "index.json"));
    st.open_out();
    Model model = model_from(ck);
    const Validator validate = make_search_validator(ds, "val", cfg.val_subsample, cfg.seed);
    const std::vector<TensorF> images = make_sample_images(ds, cfg.sample);
    const SearchTrace trace = rate_sweep(std::move(model), validate, images, cfg);
    save_trace(st.path("sweep.csv"), trace);
    std::printf("sweep: %zu rows, acc0 %.4f -> %s\n", trace.rows.size(), trace.acc0,
                st.path("sweep.csv").c_str());
    return kOk;
}

int run_shrink(Stage& st, const CommonFlags& c, const ShrinkFlags& f) {
    const std::string arch = st.mg.pick<std::string>("arch", f.arch, "");
    const std::string plan_path = st.mg.pick<std::string>("plan", f.plan, "");
    const std::string baseline = st.mg.pick<std::string>("baseline", f.baseline, "");
    const double eps = st.mg.pick("eps", f.eps, 0.05);
    st.mg.pick<std::uint64_t>("seed", c.seed, 1);
    st.mg.finish();
    if (!baseline.empty() && baseline != "aggr" && baseline != "avg")
        throw ConfigError("baseline must be aggr or avg");
    const ArchGraph g = read_arch(st.need_file(arch, "arch"));
    ShrinkPlan plan = read_plan(st.need_file(plan_path, "plan"));
    if (!baseline.empty()) plan = baseline_plan(plan, baseline, eps);
    try {
        validate_plan(g, plan);
    } catch (const std::exception& e) {
        throw StageError("plan does not fit the architecture: " + std::string(e.what()));
    }
    const ArchGraph shrunk = apply_shrink_plan(g, plan);
    st.open_out();
    save_arch(st.path("arch.json"), shrunk);
    save_plan(st.path("plan_used.json"), plan);
    const CostReport before = cost_report(g);
    const CostReport after = cost_report(shrunk);
    std::printf("shrink: params %lld -> %lld (%s), flops %lld -> %lld (%s) -> %s\n",
                before.total_params, after.total_params,
                percent_3sig((double)after.total_params, (double)before.total_params).c_str(),
                before.total_flops, after.total_flops,
                percent_3sig((double)after.total_flops, (double)before.total_flops).c_str(),
                st.out.c_str());
    return kOk;
}

int run_report(Stage& st, const CommonFlags& c, const ReportFlags& f) {
    const std::string arch = st.mg.pick<std::string>("arch", f.arch, "");
    const std::string ref_arch = st.mg.pick<std::string>("ref_arch", f.ref_arch, "");
    const std::string ckpt = st.mg.pick<std::string>("ckpt", f.ckpt, "");
    const std::string data = st.mg.pick<std::string>("data", f.data, "");
    const std::string split = st.mg.pick<std::string>("split", f.split, "test");
    st.mg.pick<std::uint64_t>("seed", c.seed, 1);
    st.mg.finish();
    if (split != "train" && split != "val" && split != "test")
        throw ConfigError("split must be train, val or test");
    if (ckpt.empty() != data.empty())
        throw ConfigError("metrics need both a checkpoint and a dataset");

    const ArchGraph g = read_arch(st.need_file(arch, "arch"));
    const CostReport cr = cost_report(g);
    const bool with_ref = !ref_arch.empty();
    CostReport rr;
    if (with_ref) rr = cost_report(read_arch(st.need_file(ref_arch, "ref_arch")));
    std::map<std::string, const CostRow*> ref_rows;
    for (const auto& r : rr.rows) ref_rows[r.id] = &r;
    Dataset ds;
    Checkpoint ck;
    if (!ckpt.empty()) {
        ds = read_dataset(st.need_dir(data, "data", "manifest.json"));
        ck = read_checkpoint(st.need_dir(ckpt, "ckpt", "index.json"));
    }

    st.open_out();

    std::string csv = with_ref ? "layer,kind,params,params_pct,flops,flops_pct\n"
                               : "layer,kind,params,flops\n";
    std::vector<std::vector<std::string>> tab;
    tab.push_back(with_ref
                      ? std::vector<std::string>{"layer", "kind", "params", "params_pct", "flops",
                                                 "flops_pct"}
                      : std::vector<std::string>{"layer", "kind", "params", "flops"});
    auto emit = [&](const std::string& id, const std::string& kind, long long p, long long fl,
                    long long ref_p, long long ref_f) {
        const std::string pp = ref_p > 0 ? percent_3sig((double)p, (double)ref_p) : "-";
        const std::string fp = ref_f > 0 ? percent_3sig((double)fl, (double)ref_f) : "-";
        std::vector<std::string> row{id, kind, std::to_string(p)};
        csv += id + "," + kind + "," + std::to_string(p);
        if (with_ref) {
            row.push_back(pp);
            csv += "," + pp;
        }
        row.push_back(std::to_string(fl));
        csv += "," + std::to_string(fl);
        if (with_ref) {
            row.push_back(fp);
            csv += "," + fp;
        }
        csv += "\n";
        tab.push_back(std::move(row));
    };
    for (const auto& r : cr.rows) {
        auto it = ref_rows.find(r.id);
        const bool hit = it != ref_rows.end();
        emit(r.id, r.kind, r.params, r.flops, hit ? it->second->params : 0,
             hit ? it->second->flops : 0);
    }
    emit("TOTAL", "", cr.total_params, cr.total_flops, rr.total_params, rr.total_flops);
    write_text_file(st.path("cost.csv"), csv);
    write_text_file(st.path("cost.txt"), format_table(tab));

    if (!ckpt.empty()) {
        Model model = model_from(ck);
        const Metrics m = evaluate(model, ds, split);
        std::string mcsv = "split,accuracy,pe,pfa30,pfa50,pfa70,pmd\n";
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", split.c_str(),
                      m.accuracy, m.pe, m.pfa30, m.pfa50, m.pfa70, m.pmd);
        mcsv += buf;
        write_text_file(st.path("metrics.csv"), mcsv);
        std::vector<std::vector<std::string>> mtab{
            {"split", "accuracy", "pe", "pfa30", "pfa50", "pfa70", "pmd"},
            {split, fmt("%.6f", m.accuracy), fmt("%.6f", m.pe), fmt("%.6f", m.pfa30),
             fmt("%.6f", m.pfa50), fmt("%.6f", m.pfa70), fmt("%.6f", m.pmd)}};
        write_text_file(st.path("metrics.txt"), format_table(mtab));
        std::printf("report: params %lld, flops %lld, %s accuracy %.4f, PE %.4f -> %s\n",
                    cr.total_params, cr.total_flops, split.c_str(), m.accuracy, m.pe,
                    st.out.c_str());
    } else {
        std::printf("report: params %lld, flops %lld -> %s\n", cr.total_params, cr.total_flops,
                    st.out.c_str());
    }
    return kOk;
}

int run_spectra(Stage& st, const CommonFlags& c, const SpectraFlags& f) {
    const std::string mode = st.mg.pick<std::string>("mode", f.mode, "channel");
    const std::uint64_t seed = st.mg.pick<std::uint64_t>("seed", c.seed, 1);

    if (mode == "pdfcheck") {
        const int bins = st.mg.pick("bins", f.bins, 64);
        const int terms = st.mg.pick("terms", f.terms, 2);
        const long long samples = st.mg.pick("samples", f.samples, 100000LL);
        st.mg.finish();
        if (bins < 2) throw ConfigError("bins must be >= 2");
        if (terms < 2) throw ConfigError("terms must be >= 2");
        if (samples < 1) throw ConfigError("samples must be >= 1");
        st.open_out();
        const std::vector<std::vector<double>> hists(
            terms, std::vector<double>(bins, 1.0 / (double)bins));
        const double l1 = pdf_convolution_check(hists, samples, seed);
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%d,%d,%lld,%.9g\n", terms, bins, samples, l1);
        write_text_file(st.path("pdfcheck.csv"), std::string("terms,bins,samples,l1\n") + buf);
        write_text_file(st.path("pdfcheck.txt"),
                        format_table({{"terms", "bins", "samples", "l1"},
                                      {std::to_string(terms), std::to_string(bins),
                                       std::to_string(samples), fmt("%.9g", l1)}}));
        std::printf("spectra: pdfcheck L1 %.6g over %lld samples -> %s\n", l1, samples,
                    st.out.c_str());
        return kOk;
    }
    if (mode != "channel" && mode != "suppression")
        throw ConfigError("mode must be channel, suppression or pdfcheck");

    const std::string ckpt = st.mg.pick<std::string>("ckpt", f.ckpt, "");
    const std::string data = st.mg.pick<std::string>("data", f.data, "");
    const std::string layer = st.mg.pick<std::string>("layer", f.layer, "");
    const int channel = st.mg.pick("channel", f.channel, 0);
    const double split = st.mg.pick("split", f.split, 0.25);
    const std::string image_split = st.mg.pick<std::string>("image_split", f.image_split, "val");
    const int image_index = st.mg.pick("image_index", f.image_index, 0);
    const bool stego = st.mg.pick("stego", f.stego, false);
    const double omega1 = st.mg.pick("omega1", f.omega1, 0.0);
    const double omega2 = st.mg.pick("omega2", f.omega2, 0.0);
    st.mg.finish();
    if (layer.empty()) throw ConfigError("layer required");
    if (image_split != "train" && image_split != "val" && image_split != "test")
        throw ConfigError("image_split must be train, val or test");
    if (!(split > 0.0 && split <= 1.0)) throw ConfigError("split must lie in (0,1]");

    const Dataset ds = read_dataset(st.need_dir(data, "data", "manifest.json"));
    const Checkpoint ck = read_checkpoint(st.need_dir(ckpt, "ckpt", "index.json"));
    if (image_index < 0 || image_index >= ds.split_count(image_split))
        throw ConfigError("image_index outside the " + image_split + " split");
    st.open_out();
    Model model = model_from(ck);
    const auto paths = ds.pair_paths(image_split, image_index);
    const TensorF image = load_image_tensor(stego ? paths.second : paths.first);

    auto energies_table = [&](const std::vector<SpectrumMap>& maps) {
        std::vector<std::vector<std::string>> tab{{"layer", "channel", "low_energy", "high_energy"}};
        for (const auto& m : maps)
            tab.push_back({m.layer, std::to_string(m.channel), fmt("%.9g", m.low_energy),
                           fmt("%.9g", m.high_energy)});
        return format_table(tab);
    };

    if (mode == "channel") {
        const auto maps = channel_spectra(model, image, layer, split);
        write_text_file(st.path("band_energies.csv"), band_energies_csv(maps));
        write_text_file(st.path("band_energies.txt"), energies_table(maps));
        for (const auto& m : maps) {
            char name[128];
            std::snprintf(name, sizeof(name), "spectrum_%s_%03d.pgm", m.layer.c_str(), m.channel);
            save_spectrum_pgm(st.path(name), m);
        }
        std::printf("spectra: %zu channel maps of %s -> %s\n", maps.size(), layer.c_str(),
                    st.out.c_str());
        return kOk;
    }

    const auto maps = presum_spectra(model, image, layer, channel, split);
    write_text_file(st.path("presum_energies.csv"), band_energies_csv(maps));
    write_text_file(st.path("presum_energies.txt"), energies_table(maps));
    std::vector<double> ratios;
    for (const auto& m : maps) {
        if (!(m.high_energy > 0.0))
            throw SpectraError("term " + std::to_string(m.channel) + " has no high-band energy");
        ratios.push_back(m.low_energy / m.high_energy);
    }
    const SuppressionCurve curve = suppression_curve(ratios, omega1, omega2);
    write_text_file(st.path("suppression.csv"), suppression_csv(curve));
    std::vector<std::vector<std::string>> tab{{"J", "ratio"}};
    for (std::size_t j = 0; j < curve.ratios.size(); ++j)
        tab.push_back({std::to_string(j + 1), fmt("%.12g", curve.ratios[j])});
    write_text_file(st.path("suppression.txt"), format_table(tab));
    std::printf("spectra: suppression over %zu terms of %s[%d] -> %s\n", curve.ratios.size(),
                layer.c_str(), channel, st.out.c_str());
    return kOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Channel-pruning pipeline for residual steganalysis CNNs"};
    app.require_subcommand(1);
    app.footer(kExitHelp);

    CommonFlags c;
    DataFlags fd;
    ArchFlags fa;
    TrainFlags ft;
    SearchFlags fs_;
    ShrinkFlags fsh;
    ReportFlags fr;
    SpectraFlags fsp;

    CLI::App* gen = app.add_subcommand("gen-data", "Generate a paired cover/stego dataset");
    add_common(gen, c);
    gen->add_option("--count", fd.count, "cover/stego pairs");
    gen->add_option("--size", fd.size, "image side length");
    gen->add_option("--payload", fd.payload, "per-pixel change probability");
    gen->add_option("--smoothing", fd.smoothing, "cover box-blur radius");
    gen->add_option("--train", fd.train, "training pairs");
    gen->add_option("--val", fd.val, "validation pairs");
    gen->add_option("--test", fd.test, "test pairs");

    CLI::App* barch = app.add_subcommand("build-arch", "Emit an architecture file");
    add_common(barch, c);
    barch->add_option("--family", fa.family, "srnet | xunet2");
    barch->add_option("--input_size", fa.input_size, "input image side");
    barch->add_option("--width_num", fa.width_num, "width scale numerator");
    barch->add_option("--width_den", fa.width_den, "width scale denominator");
    barch->add_option("--topology", fa.topology, "topology file (xunet2)");

    auto add_train_opts = [&](CLI::App* cmd) {
        cmd->add_option("--data", ft.data, "dataset directory");
        cmd->add_option("--optimizer", ft.optimizer, "adamax | sgd_momentum");
        cmd->add_option("--initial_lr", ft.initial_lr, "initial learning rate");
        cmd->add_option("--schedule", ft.schedule, "none | step_drop | decay_pct_every");
        cmd->add_option("--step_at", ft.step_at, "step_drop boundary iteration");
        cmd->add_option("--step_factor", ft.step_factor, "step_drop multiplier");
        cmd->add_option("--decay_every", ft.decay_every, "decay window in iterations");
        cmd->add_option("--decay_pct", ft.decay_pct, "percent decay per window");
        cmd->add_option("--batch_pairs", ft.batch_pairs, "cover/stego pairs per batch");
        cmd->add_option("--max_iters", ft.max_iters, "training iterations");
        cmd->add_option("--eval_every", ft.eval_every, "iterations between evaluations");
        cmd->add_option("--val_subsample", ft.val_subsample, "validation images per eval, 0 = all");
    };

    CLI::App* train_cmd = app.add_subcommand("train", "Train an architecture from scratch");
    add_common(train_cmd, c);
    add_train_opts(train_cmd);
    train_cmd->add_option("--arch", ft.arch, "architecture file");

    CLI::App* retrain_cmd =
        app.add_subcommand("retrain", "Train a shrunken architecture from scratch");
    add_common(retrain_cmd, c);
    add_train_opts(retrain_cmd);
    retrain_cmd->add_option("--arch", ft.arch, "architecture file");

    CLI::App* finetune_cmd =
        app.add_subcommand("finetune", "Slice a checkpoint along a plan and keep training");
    add_common(finetune_cmd, c);
    add_train_opts(finetune_cmd);
    finetune_cmd->add_option("--ckpt", ft.ckpt, "checkpoint directory");
    finetune_cmd->add_option("--plan", ft.plan, "plan file");

    auto add_search_opts = [&](CLI::App* cmd, bool full) {
        cmd->add_option("--data", fs_.data, "dataset directory");
        cmd->add_option("--ckpt", fs_.ckpt, "checkpoint directory");
        cmd->add_option("--eps", fs_.eps, "pruning rate step");
        if (full) {
            cmd->add_option("--sigma", fs_.sigma, "tolerable accuracy loss");
            cmd->add_option("--gamma_cap", fs_.gamma_cap, "highest tried pruning rate");
            cmd->add_option("--cumulative", fs_.cumulative,
                            "apply accepted rates before later layers");
        }
        cmd->add_option("--val_subsample", fs_.val_subsample, "validation images per eval, 0 = all");
        cmd->add_option("--sample_m", fs_.sample_m, "images sampled by the criterion");
        cmd->add_option("--sample_n", fs_.sample_n, "elements sampled per image");
    };

    CLI::App* search_cmd =
        app.add_subcommand("search", "Determine per-layer shrinking rates bottom-up");
    add_common(search_cmd, c);
    add_search_opts(search_cmd, true);

    CLI::App* sweep_cmd =
        app.add_subcommand("sweep", "Exit-disabled per-layer rate sweep to gamma = 1");
    add_common(sweep_cmd, c);
    add_search_opts(sweep_cmd, false);

    CLI::App* shrink_cmd = app.add_subcommand("shrink", "Apply a plan to an architecture file");
    add_common(shrink_cmd, c);
    shrink_cmd->add_option("--arch", fsh.arch, "architecture file");
    shrink_cmd->add_option("--plan", fsh.plan, "plan file");
    shrink_cmd->add_option("--baseline", fsh.baseline, "replace the plan: aggr | avg");
    shrink_cmd->add_option("--eps", fsh.eps, "grid step for the avg baseline");

    CLI::App* report_cmd = app.add_subcommand("report", "Cost and metrics tables");
    add_common(report_cmd, c);
    report_cmd->add_option("--arch", fr.arch, "architecture file");
    report_cmd->add_option("--ref_arch", fr.ref_arch, "reference architecture for ratio columns");
    report_cmd->add_option("--ckpt", fr.ckpt, "checkpoint for metrics");
    report_cmd->add_option("--data", fr.data, "dataset for metrics");
    report_cmd->add_option("--split", fr.split, "metrics split: train | val | test");

    CLI::App* spectra_cmd = app.add_subcommand("spectra", "Frequency-domain diversity analysis");
    add_common(spectra_cmd, c);
    spectra_cmd->add_option("--mode", fsp.mode, "channel | suppression | pdfcheck");
    spectra_cmd->add_option("--ckpt", fsp.ckpt, "checkpoint directory");
    spectra_cmd->add_option("--data", fsp.data, "dataset directory");
    spectra_cmd->add_option("--layer", fsp.layer, "conv layer id");
    spectra_cmd->add_option("--channel", fsp.channel, "output channel (suppression)");
    spectra_cmd->add_option("--split", fsp.split, "radial band split in (0,1]");
    spectra_cmd->add_option("--image_split", fsp.image_split, "probe image split");
    spectra_cmd->add_option("--image_index", fsp.image_index, "probe pair index");
    spectra_cmd->add_option("--stego", fsp.stego, "probe with the stego half of the pair");
    spectra_cmd->add_option("--samples", fsp.samples, "Monte-Carlo draws (pdfcheck)");
    spectra_cmd->add_option("--bins", fsp.bins, "histogram bins (pdfcheck)");
    spectra_cmd->add_option("--terms", fsp.terms, "distributions convolved (pdfcheck)");
    spectra_cmd->add_option("--omega1", fsp.omega1, "low probe frequency tag");
    spectra_cmd->add_option("--omega2", fsp.omega2, "high probe frequency tag");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kBadConfig;
    }

    CLI::App* sub = app.get_subcommands().front();
    Stage st;
    st.command = sub->get_name();
    try {
        st.mg = make_merge(sub, c.config);
        st.out = st.mg.pick<std::string>("out", c.out, "");
        if (st.command == "gen-data") return run_gen_data(st, c, fd);
        if (st.command == "build-arch") return run_build_arch(st, c, fa);
        if (st.command == "train" || st.command == "retrain") return run_train(st, c, ft);
        if (st.command == "finetune") return run_finetune(st, c, ft);
        if (st.command == "search") return run_search(st, c, fs_);
        if (st.command == "sweep") return run_sweep(st, c, fs_);
        if (st.command == "shrink") return run_shrink(st, c, fsh);
        if (st.command == "report") return run_report(st, c, fr);
        if (st.command == "spectra") return run_spectra(st, c, fsp);
        std::fprintf(stderr, "error: unhandled command %s\n", st.command.c_str());
        return kRunFailure;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kBadConfig;
    } catch (const MissingInput& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kMissingInput;
    } catch (const StageError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kStageOrder;
    } catch (const HarnessError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return std::string(e.what()).find("diverged") != std::string::npos ? kDiverged
                                                                           : kRunFailure;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kRunFailure;
    }
}
