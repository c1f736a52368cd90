#include "calpa/harness.hpp"

#include "calpa/util.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <sstream>

namespace fs = std::filesystem;

namespace calpa {

namespace {

std::vector<std::uint8_t> read_bytes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw HarnessError("cannot read: " + path);
    std::vector<std::uint8_t> out((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
    return out;
}

void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw HarnessError("cannot write: " + path);
    os.write(reinterpret_cast<const char*>(bytes.data()), (std::streamsize)bytes.size());
    if (!os) throw HarnessError("short write: " + path);
}

void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
    for (int k = 0; k < 4; ++k) b.push_back((std::uint8_t)(v >> (8 * k)));
}
void put_u64(std::vector<std::uint8_t>& b, std::uint64_t v) {
    for (int k = 0; k < 8; ++k) b.push_back((std::uint8_t)(v >> (8 * k)));
}
std::uint32_t get_u32(const std::uint8_t* p) {
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= (std::uint32_t)p[k] << (8 * k);
    return v;
}
std::uint64_t get_u64(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int k = 0; k < 8; ++k) v |= (std::uint64_t)p[k] << (8 * k);
    return v;
}

std::string pair_stem(int global_index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%05d.pgm", global_index);
    return buf;
}

struct SplitRange {
    int offset = 0;
    int pairs = 0;
};

SplitRange split_range(const DatasetSpec& s, const std::string& name) {
    if (name == "train") return {0, s.train};
    if (name == "val") return {s.train, s.val};
    if (name == "test") return {s.train + s.val, s.test};
    throw HarnessError("unknown split: " + name);
}

void validate_dataset_spec(const DatasetSpec& s) {
    if (s.size < 32) throw HarnessError("dataset size must be >= 32");
    if (s.count < 1) throw HarnessError("dataset needs at least one pair");
    if (!(s.payload >= 0.0 && s.payload <= 1.0)) throw HarnessError("payload must lie in [0,1]");
    if (s.smoothing < 0) throw HarnessError("smoothing radius must be >= 0");
    if (s.train < 0 || s.val < 0 || s.test < 0 || s.train + s.val + s.test != s.count)
        throw HarnessError("split counts must partition the pair count");
}

std::vector<std::uint8_t> box_blur(const std::vector<std::uint8_t>& in, int w, int h, int r) {
    if (r <= 0) return in;
    std::vector<std::uint8_t> out((std::size_t)w * h);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            long long sum = 0;
            int n = 0;
            for (int dy = -r; dy <= r; ++dy) {
                const int yy = std::clamp(y + dy, 0, h - 1);
                for (int dx = -r; dx <= r; ++dx) {
                    const int xx = std::clamp(x + dx, 0, w - 1);
                    sum += in[(std::size_t)yy * w + xx];
                    ++n;
                }
            }
            out[(std::size_t)y * w + x] =
                (std::uint8_t)std::floor((double)sum / n + 0.5);
        }
    }
    return out;
}

nlohmann::json train_config_json(const TrainConfig& cfg) {
    return {{"optimizer", cfg.optimizer},
            {"initial_lr", cfg.initial_lr},
            {"schedule", cfg.schedule},
            {"step_at", cfg.step_at},
            {"step_factor", cfg.step_factor},
            {"decay_every", cfg.decay_every},
            {"decay_pct", cfg.decay_pct},
            {"batch_pairs", cfg.batch_pairs},
            {"max_iters", cfg.max_iters},
            {"eval_every", cfg.eval_every},
            {"val_subsample", cfg.val_subsample},
            {"seed", cfg.seed}};
}

void opt_init(OptState& o, const std::vector<Model::ParamRef>& params, const std::string& kind) {
    o.kind = kind;
    o.t = 0;
    o.m.clear();
    o.u.clear();
    for (const auto& p : params) o.m.emplace_back(p.n, 0.0f);
    if (kind == "adamax")
        for (const auto& p : params) o.u.emplace_back(p.n, 0.0f);
}

void opt_step(OptState& o, std::vector<Model::ParamRef>& params, double lr) {
    if (o.m.size() != params.size())
        throw HarnessError("optimizer state does not match the parameter list");
    o.t += 1;
    if (o.kind == "adamax") {
        const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        const double bias = 1.0 - std::pow(b1, (double)o.t);
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i];
            auto& m = o.m[i];
            auto& u = o.u[i];
            for (std::size_t e = 0; e < p.n; ++e) {
                const double g = p.grad[e];
                const double mv = b1 * m[e] + (1.0 - b1) * g;
                const double uv = std::max(b2 * (double)u[e], std::fabs(g));
                m[e] = (float)mv;
                u[e] = (float)uv;
                p.data[e] = (float)(p.data[e] - lr / bias * mv / (uv + eps));
            }
        }
    } else if (o.kind == "sgd_momentum") {
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i];
            auto& v = o.m[i];
            for (std::size_t e = 0; e < p.n; ++e) {
                const double vv = 0.9 * v[e] + p.grad[e];
                v[e] = (float)vv;
                p.data[e] = (float)(p.data[e] - lr * vv);
            }
        }
    } else {
        throw HarnessError("unknown optimizer: " + o.kind);
    }
}

TensorF stack_images(const std::vector<TensorF>& imgs) {
    if (imgs.empty()) throw HarnessError("empty image batch");
    const int h = imgs[0].shape[1], w = imgs[0].shape[2];
    TensorF out({(int)imgs.size(), 1, h, w});
    std::size_t off = 0;
    for (const auto& im : imgs) {
        if (im.shape != std::vector<int>{1, h, w})
            throw HarnessError("image batch mixes sizes");
        std::copy(im.v.begin(), im.v.end(), out.v.begin() + (std::ptrdiff_t)off);
        off += im.v.size();
    }
    return out;
}

// One item = (pair path, label); covers carry 0, stegos 1.
std::vector<std::pair<std::string, int>> select_items(const Dataset& data,
                                                      const std::string& split, int subsample,
                                                      std::uint64_t seed) {
    SplitRange r = split_range(data.spec, split);
    if (r.pairs == 0) throw HarnessError("empty split: " + split);
    std::vector<int> pairs(r.pairs);
    for (int i = 0; i < r.pairs; ++i) pairs[i] = i;
    if (subsample > 0 && subsample / 2 < r.pairs) {
        Rng rng(seed, "valsub/" + split);
        for (int i = r.pairs - 1; i > 0; --i) {
            const int j = (int)rng.below((std::uint64_t)i + 1);
            std::swap(pairs[i], pairs[j]);
        }
        pairs.resize(std::max(1, subsample / 2));
        std::sort(pairs.begin(), pairs.end());
    }
    std::vector<std::pair<std::string, int>> items;
    for (int p : pairs) {
        auto [c, s] = data.pair_paths(split, p);
        items.emplace_back(c, 0);
        items.emplace_back(s, 1);
    }
    return items;
}

// P(stego) per image from an eval-mode forward.
std::vector<double> score_batch(Model& model, const TensorF& x) {
    TensorF logits = model.forward(x, false);
    std::vector<double> out;
    for (int i = 0; i < logits.shape[0]; ++i) {
        const double z0 = logits.at(i, 0), z1 = logits.at(i, 1);
        const double m = std::max(z0, z1);
        const double e0 = std::exp(z0 - m), e1 = std::exp(z1 - m);
        out.push_back(e1 / (e0 + e1));
    }
    return out;
}

constexpr int kEvalChunk = 16;

double accuracy_over(Model& model, const std::vector<TensorF>& images,
                     const std::vector<int>& labels) {
    long long correct = 0;
    for (std::size_t from = 0; from < images.size(); from += kEvalChunk) {
        const std::size_t n = std::min((std::size_t)kEvalChunk, images.size() - from);
        std::vector<TensorF> chunk(images.begin() + (std::ptrdiff_t)from,
                                   images.begin() + (std::ptrdiff_t)(from + n));
        auto scores = score_batch(model, stack_images(chunk));
        for (std::size_t i = 0; i < n; ++i) {
            const int pred = scores[i] >= 0.5 ? 1 : 0;
            if (pred == labels[from + i]) ++correct;
        }
    }
    return (double)correct / (double)images.size();
}

Checkpoint snapshot(const Model& model, const OptState& opt, long long iter, double val,
                    const TrainConfig& cfg) {
    Checkpoint c;
    c.graph = model.graph();
    c.state = model.named_state();
    c.opt = opt;
    c.iteration = iter;
    c.best_val = val;
    c.meta["train_config"] = train_config_json(cfg);
    c.meta["init_seed"] = model.init_seed();
    return c;
}

TrainResult run_loop(Model model, OptState opt, long long start_iter, const Dataset& data,
                     const TrainConfig& cfg) {
    SplitRange tr = split_range(data.spec, "train");
    if (tr.pairs == 0) throw HarnessError("empty split: train");
    Validator val_acc = make_search_validator(data, "val", cfg.val_subsample, cfg.seed);

    TrainResult res;
    auto params = model.trainable();
    double best = -1.0;
    double acc_sum = 0.0, loss_sum = 0.0;
    long long acc_n = 0;
    bool evaluated = false;
    for (long long it = start_iter + 1; it <= cfg.max_iters; ++it) {
        std::vector<TensorF> imgs;
        std::vector<int> labels;
        for (const auto& [pair, label] : batch_items(data.spec, cfg, it)) {
            auto [c, s] = data.pair_paths("train", pair);
            imgs.push_back(load_image_tensor(label == 1 ? s : c));
            labels.push_back(label);
        }
        TensorF probs;
        const double loss = model.loss_and_grads(stack_images(imgs), labels, &probs);
        if (!std::isfinite(loss))
            throw HarnessError("training diverged at iteration " + std::to_string(it));
        long long correct = 0;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            const int pred = probs.at((int)i, 1) >= probs.at((int)i, 0) ? 1 : 0;
            if (pred == labels[i]) ++correct;
        }
        acc_sum += (double)correct / (double)labels.size();
        loss_sum += loss;
        acc_n += 1;

        opt_step(opt, params, lr_at(cfg, it));
        model.zero_grads();

        if (it % cfg.eval_every == 0 || it == cfg.max_iters) {
            const double va = val_acc(model);
            const double denom = (double)std::max<long long>(1, acc_n);
            res.curves.push_back({it, acc_sum / denom, va, loss_sum / denom});
            acc_sum = 0.0;
            loss_sum = 0.0;
            acc_n = 0;
            if (va > best) {
                best = va;
                res.best = snapshot(model, opt, it, va, cfg);
            }
            res.last = snapshot(model, opt, it, va, cfg);
            evaluated = true;
        }
    }
    if (!evaluated) {
        const double va = val_acc(model);
        res.best = snapshot(model, opt, cfg.max_iters, va, cfg);
        res.last = res.best;
        res.curves.push_back({cfg.max_iters, 0.0, va, 0.0});
    }
    return res;
}

} // namespace

void save_pgm(const std::string& path, const std::vector<std::uint8_t>& pix, int w, int h) {
    if (w <= 0 || h <= 0 || pix.size() != (std::size_t)w * h)
        throw HarnessError("pgm payload does not match its extent");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw HarnessError("cannot write: " + path);
    os << "P5\n" << w << " " << h << "\n255\n";
    os.write(reinterpret_cast<const char*>(pix.data()), (std::streamsize)pix.size());
    if (!os) throw HarnessError("short write: " + path);
}

std::vector<std::uint8_t> load_pgm(const std::string& path, int& w, int& h) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw HarnessError("cannot read: " + path);
    std::string magic;
    is >> magic;
    if (magic != "P5") throw HarnessError("not a P5 pgm: " + path);
    auto next_int = [&]() {
        // PGM headers may carry '#' comment lines between tokens
        for (;;) {
            int c = is.peek();
            if (c == '#') {
                std::string skip;
                std::getline(is, skip);
            } else if (std::isspace(c)) {
                is.get();
            } else {
                break;
            }
        }
        long long v = -1;
        is >> v;
        if (!is || v < 0) throw HarnessError("bad pgm header: " + path);
        return v;
    };
    const long long lw = next_int(), lh = next_int(), maxv = next_int();
    if (maxv != 255) throw HarnessError("pgm must be 8-bit: " + path);
    is.get(); // single whitespace before the raster
    w = (int)lw;
    h = (int)lh;
    std::vector<std::uint8_t> pix((std::size_t)w * h);
    is.read(reinterpret_cast<char*>(pix.data()), (std::streamsize)pix.size());
    if (is.gcount() != (std::streamsize)pix.size())
        throw HarnessError("truncated pgm raster: " + path);
    return pix;
}

void generate_dataset(const DatasetSpec& spec, const std::string& dir) {
    validate_dataset_spec(spec);
    fs::create_directories(fs::path(dir) / "cover");
    fs::create_directories(fs::path(dir) / "stego");
    const int n = spec.size * spec.size;
    for (int i = 0; i < spec.count; ++i) {
        std::vector<std::uint8_t> cover(n);
        Rng rc(spec.seed, "cover/" + std::to_string(i));
        for (auto& p : cover) p = (std::uint8_t)rc.below(256);
        cover = box_blur(cover, spec.size, spec.size, spec.smoothing);

        std::vector<std::uint8_t> stego = cover;
        Rng rs(spec.seed, "stego/" + std::to_string(i));
        for (auto& p : stego) {
            if (rs.uniform() < spec.payload) {
                const int delta = rs.below(2) == 1 ? 1 : -1;
                p = (std::uint8_t)std::clamp((int)p + delta, 0, 255);
            }
        }
        const std::string stem = pair_stem(i);
        save_pgm((fs::path(dir) / "cover" / stem).string(), cover, spec.size, spec.size);
        save_pgm((fs::path(dir) / "stego" / stem).string(), stego, spec.size, spec.size);
    }
    nlohmann::json manifest = {{"kind", "calpa-dataset"},
                               {"version", 1},
                               {"count", spec.count},
                               {"size", spec.size},
                               {"payload", spec.payload},
                               {"smoothing", spec.smoothing},
                               {"seed", spec.seed},
                               {"split",
                                {{"train", spec.train}, {"val", spec.val}, {"test", spec.test}}}};
    write_text_file((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

int Dataset::split_count(const std::string& split) const {
    return split_range(spec, split).pairs;
}

std::pair<std::string, std::string> Dataset::pair_paths(const std::string& split,
                                                        int pair_index) const {
    SplitRange r = split_range(spec, split);
    if (pair_index < 0 || pair_index >= r.pairs)
        throw HarnessError("pair index out of range for split " + split);
    const std::string stem = pair_stem(r.offset + pair_index);
    return {(fs::path(dir) / "cover" / stem).string(), (fs::path(dir) / "stego" / stem).string()};
}

Dataset open_dataset(const std::string& dir) {
    const std::string mpath = (fs::path(dir) / "manifest.json").string();
    if (!fs::exists(mpath)) throw HarnessError("no dataset manifest under " + dir);
    nlohmann::json m = nlohmann::json::parse(read_text_file(mpath));
    if (m.value("kind", "") != "calpa-dataset")
        throw HarnessError("not a dataset manifest: " + mpath);
    Dataset d;
    d.dir = dir;
    d.spec.count = m.at("count");
    d.spec.size = m.at("size");
    d.spec.payload = m.at("payload");
    d.spec.smoothing = m.at("smoothing");
    d.spec.seed = m.at("seed");
    d.spec.train = m.at("split").at("train");
    d.spec.val = m.at("split").at("val");
    d.spec.test = m.at("split").at("test");
    validate_dataset_spec(d.spec);
    return d;
}

TensorF load_image_tensor(const std::string& path) {
    int w = 0, h = 0;
    auto pix = load_pgm(path, w, h);
    TensorF t({1, h, w});
    for (std::size_t i = 0; i < pix.size(); ++i) t.v[i] = (float)pix[i];
    return t;
}

void validate_train_config(const TrainConfig& cfg) {
    if (cfg.optimizer != "adamax" && cfg.optimizer != "sgd_momentum")
        throw HarnessError("unknown optimizer: " + cfg.optimizer);
    if (cfg.schedule != "none" && cfg.schedule != "step_drop" && cfg.schedule != "decay_pct_every")
        throw HarnessError("unknown schedule: " + cfg.schedule);
    if (!(cfg.initial_lr > 0.0)) throw HarnessError("initial_lr must be positive");
    if (cfg.batch_pairs < 1) throw HarnessError("batch needs at least one pair");
    if (cfg.max_iters < 1) throw HarnessError("max_iters must be >= 1");
    if (cfg.eval_every < 1) throw HarnessError("eval_every must be >= 1");
    if (cfg.val_subsample < 0) throw HarnessError("val_subsample must be >= 0");
    if (!(cfg.step_factor > 0.0)) throw HarnessError("step_factor must be positive");
    if (cfg.decay_every < 1) throw HarnessError("decay_every must be >= 1");
    if (!(cfg.decay_pct >= 0.0 && cfg.decay_pct < 100.0))
        throw HarnessError("decay_pct must lie in [0,100)");
}

double lr_at(const TrainConfig& cfg, long long iter) {
    if (cfg.schedule == "step_drop")
        return iter > cfg.step_at ? cfg.initial_lr * cfg.step_factor : cfg.initial_lr;
    if (cfg.schedule == "decay_pct_every") {
        const long long windows = (iter - 1) / cfg.decay_every;
        return cfg.initial_lr * std::pow(1.0 - cfg.decay_pct / 100.0, (double)windows);
    }
    return cfg.initial_lr;
}

std::vector<std::uint8_t> OptState::serialize() const {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), {'C', 'O', 'P', 'T'});
    put_u32(out, 1);
    put_u32(out, kind == "adamax" ? 0u : 1u);
    put_u32(out, (std::uint32_t)m.size());
    put_u64(out, (std::uint64_t)t);
    for (std::size_t i = 0; i < m.size(); ++i) {
        TensorF mt({(int)m[i].size()});
        mt.v = m[i];
        append_blob(out, mt);
        if (kind == "adamax") {
            TensorF ut({(int)u[i].size()});
            ut.v = u[i];
            append_blob(out, ut);
        }
    }
    return out;
}

OptState OptState::deserialize(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 20 || bytes[0] != 'C' || bytes[1] != 'O' || bytes[2] != 'P' ||
        bytes[3] != 'T')
        throw HarnessError("not an optimizer state blob");
    if (get_u32(bytes.data() + 4) != 1) throw HarnessError("unknown optimizer blob version");
    OptState o;
    o.kind = get_u32(bytes.data() + 8) == 0 ? "adamax" : "sgd_momentum";
    const std::uint32_t slots = get_u32(bytes.data() + 12);
    o.t = (long long)get_u64(bytes.data() + 16);
    std::size_t off = 24;
    for (std::uint32_t i = 0; i < slots; ++i) {
        o.m.push_back(read_blob(bytes.data(), bytes.size(), off).v);
        if (o.kind == "adamax") o.u.push_back(read_blob(bytes.data(), bytes.size(), off).v);
    }
    if (off != bytes.size()) throw HarnessError("trailing bytes in optimizer state");
    return o;
}

void save_checkpoint(const std::string& dir, const Checkpoint& ckpt) {
    fs::create_directories(dir);
    save_arch((fs::path(dir) / "arch.json").string(), ckpt.graph);
    std::vector<std::uint8_t> params;
    for (const auto& [name, t] : ckpt.state) append_blob(params, t);
    write_bytes((fs::path(dir) / "params.clpt").string(), params);
    const auto opt = ckpt.opt.serialize();
    write_bytes((fs::path(dir) / "opt.clpt").string(), opt);
    nlohmann::json index = {{"kind", "calpa-checkpoint"},
                            {"version", 1},
                            {"iteration", ckpt.iteration},
                            {"best_val", ckpt.best_val},
                            {"meta", ckpt.meta},
                            {"params_digest", bytes_digest_hex(params.data(), params.size())},
                            {"opt_digest", bytes_digest_hex(opt.data(), opt.size())}};
    write_text_file((fs::path(dir) / "index.json").string(), index.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::string& dir) {
    const std::string ipath = (fs::path(dir) / "index.json").string();
    if (!fs::exists(ipath)) throw HarnessError("no checkpoint index under " + dir);
    nlohmann::json index = nlohmann::json::parse(read_text_file(ipath));
    if (index.value("kind", "") != "calpa-checkpoint")
        throw HarnessError("not a checkpoint index: " + ipath);
    Checkpoint c;
    c.graph = load_arch((fs::path(dir) / "arch.json").string());
    c.iteration = index.at("iteration");
    c.best_val = index.at("best_val");
    c.meta = index.at("meta");

    const auto params = read_bytes((fs::path(dir) / "params.clpt").string());
    if (index.at("params_digest") != bytes_digest_hex(params.data(), params.size()))
        throw HarnessError("checkpoint params digest mismatch under " + dir);
    Model probe(c.graph, 1);
    auto expected = probe.named_state();
    std::size_t off = 0;
    for (auto& [name, t] : expected) {
        t = read_blob(params.data(), params.size(), off);
        c.state.emplace_back(name, t);
    }
    if (off != params.size()) throw HarnessError("trailing bytes in checkpoint params");

    const auto opt = read_bytes((fs::path(dir) / "opt.clpt").string());
    if (index.at("opt_digest") != bytes_digest_hex(opt.data(), opt.size()))
        throw HarnessError("checkpoint optimizer digest mismatch under " + dir);
    c.opt = OptState::deserialize(opt);
    return c;
}

Model model_from(const Checkpoint& ckpt) {
    std::uint64_t seed = 1;
    if (ckpt.meta.contains("init_seed")) seed = ckpt.meta.at("init_seed").get<std::uint64_t>();
    Model m(ckpt.graph, seed);
    m.set_state(ckpt.state);
    return m;
}

std::vector<std::pair<int, int>> batch_items(const DatasetSpec& spec, const TrainConfig& cfg,
                                             long long iter) {
    SplitRange tr = split_range(spec, "train");
    if (tr.pairs == 0) throw HarnessError("empty split: train");
    Rng rng(cfg.seed, "batch/" + std::to_string(iter));
    std::vector<std::pair<int, int>> items;
    for (int p = 0; p < cfg.batch_pairs; ++p) {
        const int pair = (int)rng.below((std::uint64_t)tr.pairs);
        items.emplace_back(pair, 0);
        items.emplace_back(pair, 1);
    }
    return items;
}

std::string curves_to_csv(const std::vector<CurveRow>& rows) {
    std::ostringstream os;
    os << "iteration,train_acc,val_acc\n";
    for (const auto& r : rows) {
        char buf[80];
        std::snprintf(buf, sizeof(buf), "%lld,%.6f,%.6f\n", r.iteration, r.train_acc, r.val_acc);
        os << buf;
    }
    return os.str();
}

TrainResult train(const ArchGraph& g, const Dataset& data, const TrainConfig& cfg) {
    validate_train_config(cfg);
    Model model(g, cfg.seed);
    OptState opt;
    opt_init(opt, model.trainable(), cfg.optimizer);
    return run_loop(std::move(model), std::move(opt), 0, data, cfg);
}

TrainResult resume(const Checkpoint& ckpt, const Dataset& data, const TrainConfig& cfg) {
    validate_train_config(cfg);
    Model model = model_from(ckpt);
    if (ckpt.opt.kind != cfg.optimizer)
        throw HarnessError("checkpoint optimizer does not match the config");
    return run_loop(std::move(model), ckpt.opt, ckpt.iteration, data, cfg);
}

Model slice_checkpoint(const Checkpoint& ckpt, const ShrinkPlan& plan, const Dataset& data) {
    Model m = model_from(ckpt);
    if (!plan.meta.contains("config") || !plan.meta.at("config").contains("sample"))
        throw HarnessError("plan carries no sample spec; its criteria cannot be replayed");
    SampleSpec spec;
    spec.m = plan.meta.at("config").at("sample").at("m");
    spec.n = plan.meta.at("config").at("sample").at("n");
    spec.seed = plan.meta.at("config").at("sample").at("seed");
    auto images = make_sample_images(data, spec);
    apply_plan_with_criteria(m, plan, images, spec);
    return m;
}

TrainResult finetune(const Checkpoint& ckpt, const ShrinkPlan& plan, const Dataset& data,
                     const TrainConfig& cfg) {
    validate_train_config(cfg);
    Model model = slice_checkpoint(ckpt, plan, data);
    OptState opt;
    opt_init(opt, model.trainable(), cfg.optimizer);
    return run_loop(std::move(model), std::move(opt), 0, data, cfg);
}

Metrics metrics_from_scores(const std::vector<double>& stego_scores,
                            const std::vector<double>& cover_scores) {
    if (stego_scores.empty() || cover_scores.empty()) throw HarnessError("empty split");
    std::vector<double> thr;
    thr.reserve(stego_scores.size() + cover_scores.size() + 2);
    thr.insert(thr.end(), stego_scores.begin(), stego_scores.end());
    thr.insert(thr.end(), cover_scores.begin(), cover_scores.end());
    std::sort(thr.begin(), thr.end());
    thr.erase(std::unique(thr.begin(), thr.end()), thr.end());
    thr.insert(thr.begin(), -std::numeric_limits<double>::infinity());
    thr.push_back(std::numeric_limits<double>::infinity());

    const double S = (double)stego_scores.size(), C = (double)cover_scores.size();
    auto tpr_at = [&](double t) {
        long long n = 0;
        for (double s : stego_scores) n += s >= t;
        return (double)n / S;
    };
    auto fpr_at = [&](double t) {
        long long n = 0;
        for (double s : cover_scores) n += s >= t;
        return (double)n / C;
    };

    Metrics out;
    auto pfa = [&](double detect) {
        double best = 1.0;
        for (double t : thr)
            if (tpr_at(t) >= detect - 1e-12) best = std::min(best, fpr_at(t));
        return best;
    };
    out.pfa30 = pfa(0.30);
    out.pfa50 = pfa(0.50);
    out.pfa70 = pfa(0.70);

    out.pe = 1.0;
    double fpr_at_pe = 1.0;
    for (double t : thr) {
        const double fpr = fpr_at(t), pmd = 1.0 - tpr_at(t);
        const double pe = 0.5 * (fpr + pmd);
        if (pe < out.pe - 1e-15 || (std::fabs(pe - out.pe) <= 1e-15 && fpr < fpr_at_pe)) {
            out.pe = pe;
            out.pmd = pmd;
            fpr_at_pe = fpr;
        }
    }

    long long correct = 0;
    for (double s : stego_scores) correct += s >= 0.5;
    for (double s : cover_scores) correct += s < 0.5;
    out.accuracy = (double)correct / (S + C);
    return out;
}

Metrics evaluate(Model& model, const Dataset& data, const std::string& split) {
    auto items = select_items(data, split, 0, 0);
    std::vector<double> stego, cover;
    for (std::size_t from = 0; from < items.size(); from += kEvalChunk) {
        const std::size_t n = std::min((std::size_t)kEvalChunk, items.size() - from);
        std::vector<TensorF> chunk;
        for (std::size_t i = 0; i < n; ++i)
            chunk.push_back(load_image_tensor(items[from + i].first));
        auto scores = score_batch(model, stack_images(chunk));
        for (std::size_t i = 0; i < n; ++i)
            (items[from + i].second == 1 ? stego : cover).push_back(scores[i]);
    }
    return metrics_from_scores(stego, cover);
}

Validator make_search_validator(const Dataset& data, const std::string& split, int subsample,
                                std::uint64_t seed) {
    auto items = select_items(data, split, subsample, seed);
    auto images = std::make_shared<std::vector<TensorF>>();
    auto labels = std::make_shared<std::vector<int>>();
    for (const auto& [path, label] : items) {
        images->push_back(load_image_tensor(path));
        labels->push_back(label);
    }
    return [images, labels](Model& m) { return accuracy_over(m, *images, *labels); };
}

std::vector<TensorF> make_sample_images(const Dataset& data, const SampleSpec& spec) {
    SplitRange tr = split_range(data.spec, "train");
    if (tr.pairs == 0) throw HarnessError("empty split: train");
    Rng rng(spec.seed, "sample-images");
    std::vector<TensorF> out;
    for (int i = 0; i < spec.m; ++i) {
        const int pair = (int)rng.below((std::uint64_t)tr.pairs);
        const bool stego = rng.below(2) == 1;
        auto [c, s] = data.pair_paths("train", pair);
        out.push_back(load_image_tensor(stego ? s : c));
    }
    return out;
}

} // namespace calpa
