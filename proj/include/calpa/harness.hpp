#pragma once

#include "calpa/model.hpp"
#include "calpa/search.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace calpa {

struct HarnessError : std::runtime_error {
    explicit HarnessError(const std::string& what) : std::runtime_error(what) {}
};

// 8-bit grayscale PGM (P5), the on-disk image format of the dataset.
void save_pgm(const std::string& path, const std::vector<std::uint8_t>& pix, int w, int h);
std::vector<std::uint8_t> load_pgm(const std::string& path, int& w, int& h);

struct DatasetSpec {
    int count = 2000; // cover/stego pairs
    int size = 64;
    double payload = 0.4; // per-pixel change probability
    int smoothing = 1;    // box blur radius for cover texture
    std::uint64_t seed = 1;
    int train = 1400;
    int val = 200;
    int test = 400;
};

// Covers are blurred, quantized uniform noise; each stego flips a payload
// fraction of its cover's pixels by +-1, clamped to [0,255]. Pairs share a
// stem under cover/ and stego/; manifest.json records the spec.
void generate_dataset(const DatasetSpec& spec, const std::string& dir);

struct Dataset {
    DatasetSpec spec;
    std::string dir;

    int split_count(const std::string& split) const; // pairs
    // pair_index is split-relative; returns {cover path, stego path}
    std::pair<std::string, std::string> pair_paths(const std::string& split, int pair_index) const;
};
Dataset open_dataset(const std::string& dir);

// PGM file as a (1, H, W) tensor of raw values in [0, 255].
TensorF load_image_tensor(const std::string& path);

struct TrainConfig {
    std::string optimizer = "adamax"; // adamax | sgd_momentum (0.9)
    double initial_lr = 0.001;
    std::string schedule = "none"; // none | step_drop | decay_pct_every
    long long step_at = 0;         // step_drop: iteration after which lr *= step_factor
    double step_factor = 0.1;
    long long decay_every = 5000; // decay_pct_every: lr *= (1 - pct/100) each window
    double decay_pct = 10.0;
    int batch_pairs = 8; // batch = batch_pairs covers + their stegos
    long long max_iters = 1000;
    long long eval_every = 100;
    int val_subsample = 0; // images per validation pass, 0 = whole split
    std::uint64_t seed = 1;
};
void validate_train_config(const TrainConfig& cfg);
double lr_at(const TrainConfig& cfg, long long iter); // schedule is stateless

// Optimizer slots in trainable() order; adamax keeps (m, u) and the step
// count, momentum keeps velocities in m.
struct OptState {
    std::string kind;
    long long t = 0;
    std::vector<std::vector<float>> m, u;

    std::vector<std::uint8_t> serialize() const;
    static OptState deserialize(const std::vector<std::uint8_t>& bytes);
};

struct Checkpoint {
    ArchGraph graph;
    std::vector<std::pair<std::string, TensorF>> state; // model named_state
    OptState opt;
    long long iteration = 0;
    double best_val = 0.0;
    nlohmann::json meta; // config echo, seeds, digests
};
void save_checkpoint(const std::string& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& dir);
Model model_from(const Checkpoint& ckpt);

// Batch composition for one iteration: (train-split pair index, label) with
// each sampled cover immediately followed by its stego twin.
std::vector<std::pair<int, int>> batch_items(const DatasetSpec& spec, const TrainConfig& cfg,
                                             long long iter);

struct CurveRow {
    long long iteration = 0;
    double train_acc = 0.0;
    double val_acc = 0.0;
    double loss = 0.0; // mean since the previous evaluation; not in the CSV
};
std::string curves_to_csv(const std::vector<CurveRow>& rows);

struct TrainResult {
    Checkpoint best; // highest validation accuracy seen
    Checkpoint last;
    std::vector<CurveRow> curves;
};

// Cross-entropy training with paired batches (each sampled cover rides with
// its stego). Evaluates every eval_every iterations and keeps the best
// validation checkpoint. Throws HarnessError on a non-finite loss.
TrainResult train(const ArchGraph& g, const Dataset& data, const TrainConfig& cfg);

// Continues a checkpoint to cfg.max_iters; bit-identical to an uninterrupted
// run of the same config.
TrainResult resume(const Checkpoint& ckpt, const Dataset& data, const TrainConfig& cfg);

// Slices the checkpoint's model along a searched plan (re-running the pruning
// criteria with the plan's recorded sample seeds), keeps surviving weights,
// then trains the sliced model.
TrainResult finetune(const Checkpoint& ckpt, const ShrinkPlan& plan, const Dataset& data,
                     const TrainConfig& cfg);

// The sliced-but-untrained model a finetune starts from.
Model slice_checkpoint(const Checkpoint& ckpt, const ShrinkPlan& plan, const Dataset& data);

struct Metrics {
    double accuracy = 0.0;
    double pfa30 = 0.0, pfa50 = 0.0, pfa70 = 0.0; // false alarms at fixed detection rates
    double pmd = 0.0;                             // missed detections at the P_E threshold
    double pe = 0.0;                              // min over thresholds of (P_FA + P_MD) / 2
};

// ROC statistics from raw stego/cover scores (higher = more stego-like);
// thresholds sweep every distinct score plus the two infinities.
Metrics metrics_from_scores(const std::vector<double>& stego_scores,
                            const std::vector<double>& cover_scores);
Metrics evaluate(Model& model, const Dataset& data, const std::string& split);

// Balanced accuracy of a model over a fixed split subset; the subset is drawn
// once per validator from the subsample knob and seed.
Validator make_search_validator(const Dataset& data, const std::string& split, int subsample,
                                std::uint64_t seed);

// The images the reconstruction criterion samples its patches from, drawn
// deterministically from the train split.
std::vector<TensorF> make_sample_images(const Dataset& data, const SampleSpec& spec);

} // namespace calpa
