#pragma once

#include "calpa/criteria.hpp"
#include "calpa/model.hpp"

#include <functional>
#include <map>
#include <string>
#include <vector>

namespace calpa {

struct SearchError : std::runtime_error {
    explicit SearchError(const std::string& what) : std::runtime_error(what) {}
};

struct SearchConfig {
    double eps = 0.05;       // step rate
    double sigma = 0.05;     // tolerable accuracy loss
    double gamma_cap = 0.95; // highest tried pruning rate; a layer keeps >= 1 channel
    bool cumulative = true;  // later layers searched with earlier prunings applied
    int val_subsample = 0;   // validation images per evaluation, 0 = full split
    std::uint64_t seed = 0;
    SampleSpec sample;
};
void validate_config(const SearchConfig& cfg);

// Yields accuracy in [0,1] for a candidate model; must tolerate repeat calls.
using Validator = std::function<double(Model&)>;

enum class Criterion { thinet, l1_direct, l1_transformed };
std::string criterion_name(Criterion c);

// Hybrid dispatch: plain convs use the reconstruction criterion, shortcut
// groups the magnitude one, anchored at the lowest (direct) or main-branch
// (transformed) member; the anchor's decision covers the whole group.
Criterion dispatch_criterion(const ArchGraph& g, const std::string& layer_id);

struct TraceRow {
    std::string layer;
    double gamma = 0.0;
    double acc = 0.0;
    std::string exit_reason; // set on the final row of a layer
};

struct SearchTrace {
    std::vector<TraceRow> rows;
    double acc0 = 0.0; // accuracy of the model the search started from
    nlohmann::json meta;
};

struct RateOutcome {
    double zeta = 1.0;
    std::string exit_reason;
    double acc0 = 0.0;      // reference accuracy at gamma = 0
    double acc_final = 0.0; // accuracy at the accepted (rolled-back) rate
    std::vector<std::pair<double, double>> tried; // (gamma, acc) incl. gamma = 0
};

// The decision loop alone: acc_at(0) gives the reference accuracy, gamma then
// steps by eps; a sudden per-step drop beyond sigma exits first, then the
// cumulative drop from the reference, else the cap. The accepted rate is one
// step back, and zeta = 1 - gamma.
RateOutcome decide_rate(const std::function<double(double)>& acc_at, const SearchConfig& cfg);

// Shrinking rate for one layer against a live validator. Candidate prunings
// happen on scratch copies; the working model is left untouched.
RateOutcome determine_rate(Model& working, const std::string& layer_id, const Validator& validate,
                           const std::vector<TensorF>& sample_images, const SearchConfig& cfg,
                           SearchTrace* trace = nullptr, Criterion* used = nullptr);

struct SearchResult {
    ShrinkPlan plan;
    SearchTrace trace;
};

// Bottom-to-top traversal over all prunable convs; group members inherit the
// anchor's rate and are never searched on their own. In cumulative mode each
// accepted rate is applied before the next layer is examined.
SearchResult bottom_up_search(Model model, const Validator& validate,
                              const std::vector<TensorF>& sample_images, const SearchConfig& cfg);

// Re-applies a searched plan to a trained model by re-running the criteria
// with the same seeds and traversal order, reproducing the exact channel
// choices (and so the exact accuracy) of the search that emitted the plan.
void apply_plan_with_criteria(Model& model, const ShrinkPlan& plan,
                              const std::vector<TensorF>& sample_images, const SampleSpec& spec);

// Uniform baseline at the minimum (aggr) or the eps-grid-rounded mean (avg)
// of a searched plan's rates.
ShrinkPlan baseline_plan(const ShrinkPlan& plan, const std::string& kind, double eps = 0.05);

// Exit-disabled per-layer sweep to gamma = 1 (keep clamps at one channel);
// every layer is swept independently from the same input model.
SearchTrace rate_sweep(Model model, const Validator& validate,
                       const std::vector<TensorF>& sample_images, const SearchConfig& cfg);

std::string trace_to_csv(const SearchTrace& t);
SearchTrace trace_from_csv(const std::string& text);
void save_trace(const std::string& path, const SearchTrace& t);
SearchTrace load_trace(const std::string& path);

// Feeds recorded accuracies back through the decision loop; a well-formed
// trace reproduces its own zetas and exit reasons layer for layer.
std::map<std::string, RateOutcome> replay_trace(const SearchTrace& t, const SearchConfig& cfg);

} // namespace calpa
