#pragma once

#include "calpa/tensor.hpp"

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace calpa {

struct GraphError : std::runtime_error {
    explicit GraphError(const std::string& what) : std::runtime_error(what) {}
};

enum class LayerKind { input, fixed_preproc, conv, bn, activation, pool, global_pool, fully_connected, add };
enum class ActKind { relu, truncate };

std::string kind_name(LayerKind k);
LayerKind kind_from_name(const std::string& s);

struct LayerSpec {
    std::string id;
    LayerKind kind = LayerKind::conv;
    int in_ch = 0;
    int out_ch = 0;
    int kernel = 0;
    int stride = 1;
    int pad = 0;
    int out_h = 0;
    int out_w = 0;
    bool prunable = false;
    ActKind act = ActKind::relu;
    double threshold = 0.0;
};

enum class GroupKind { direct, transformed };

struct ShortcutGroup {
    GroupKind kind = GroupKind::direct;
    std::vector<std::string> members; // producer convs whose outputs are element-wise linked
    std::string lowest;
    std::string transform_layer; // the 1x1 projection conv, transformed kind only
};

struct ArchGraph {
    std::string name;
    int input_size = 0;
    std::vector<LayerSpec> layers; // topological order (predecessors appear earlier)
    std::map<std::string, std::vector<std::string>> edges; // id -> predecessor ids
    std::vector<ShortcutGroup> groups;

    bool has_layer(const std::string& id) const;
    const LayerSpec& layer(const std::string& id) const;
    LayerSpec& layer(const std::string& id);
    const std::vector<std::string>& preds(const std::string& id) const;
    std::vector<std::string> successors(const std::string& id) const;
    std::map<std::string, int> depths() const; // longest path from the input node
};

struct ShrinkPlan {
    std::map<std::string, double> rates; // layer id -> zeta in (0,1]
    std::map<std::string, std::string> provenance; // thinet | l1_direct | l1_transformed | fixed
    nlohmann::json meta; // config snapshot, seeds, checkpoint digest
};

struct CostRow {
    std::string id;
    std::string kind;
    long long params = 0;
    long long flops = 0;
};

struct CostReport {
    std::vector<CostRow> rows;
    long long total_params = 0;
    long long total_flops = 0;
};

// Channel-count arithmetic shared by criteria, search and plan application:
// pruned = round-half-up(K * gamma) clamped to K-1, kept = K - pruned.
int prune_count(int channels, double gamma);
int keep_count(int channels, double zeta);

// Fills out_h/out_w/in_ch from predecessor geometry; throws GraphError on
// inconsistencies (including add nodes whose operand shapes differ).
void infer_geometry(ArchGraph& g);
void validate_graph(const ArchGraph& g);

ArchGraph build_srnet(int input_size, int scale_num, int scale_den);
ArchGraph build_xunet2(int input_size, const nlohmann::json& topology);
ArchGraph build_xunet2_from_file(int input_size, const std::string& topology_path);

// The 16 orthonormal 4x4 DCT-II basis filters of the fixed bottom bank.
FilterBankF dct_bank_4x4();

CostReport cost_report(const ArchGraph& g);
std::vector<ShortcutGroup> classify_shortcuts(const ArchGraph& g);
// Node id -> channel-class key of the node's output dimension. Producers and
// the input open fresh classes; bn/act/pool inherit; add merges its operands.
std::map<std::string, std::string> channel_out_classes(const ArchGraph& g);
ArchGraph apply_shrink_plan(const ArchGraph& g, const ShrinkPlan& plan);
void validate_plan(const ArchGraph& g, const ShrinkPlan& plan);

nlohmann::json arch_to_json(const ArchGraph& g);
ArchGraph arch_from_json(const nlohmann::json& j);
void save_arch(const std::string& path, const ArchGraph& g);
ArchGraph load_arch(const std::string& path);

nlohmann::json plan_to_json(const ShrinkPlan& p);
ShrinkPlan plan_from_json(const nlohmann::json& j);
void save_plan(const std::string& path, const ShrinkPlan& p);
ShrinkPlan load_plan(const std::string& path);

bool struct_equal(const ArchGraph& a, const ArchGraph& b);

} // namespace calpa
