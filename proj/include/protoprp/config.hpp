#pragma once

#include "protoprp/dataset.hpp"
#include "protoprp/model.hpp"
#include "protoprp/prp.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace protoprp {

struct DatasetConfig {
    int num_classes = 5;
    int image_size = 32;
    int train_per_class = 100;
    int test_per_class = 50;
    std::string dir; // empty -> <output_dir>/dataset
    std::string artifact_kind = "none"; // none | clever_hans | backdoor
    ArtifactSpec artifact;              // fraction/target/relabel/geometry
};

struct ModelConfig {
    std::vector<int> conv_channels{16, 32, 32};
    int prototypes_per_class = 5;
    std::string checkpoint_dir; // empty -> <output_dir>/checkpoint
};

struct ExplainConfig {
    float eps = 1e-4f;
    float alpha = 1.0f;
    float beta = 0.0f;
    std::string method = "prp"; // prp | upsample | spray-lrp
    std::string split = "test-artifact";
    std::vector<int> image_ids{0};
    std::vector<int> prototypes; // empty -> most activated prototype
    int target_class = -1;       // spray-lrp; -1 -> predicted class
};

struct EvalConfig {
    std::string test = "accuracy"; // accuracy | ordering | prune
    std::string split = "test-artifact";
    int ordering_steps = 20;
    int ordering_images = 50;
    int prune_class = -1; // -1 -> dataset artifact target class
};

struct ClusterConfig {
    std::string method = "coreg"; // coreg | spray-prp | spray-lrp
    std::string split = "train";
    int inspect_class = -1; // -1 -> dataset artifact target class
    double lambda_coreg = 0.01;
    double sigma = 0.0; // <= 0 -> median pairwise distance
    int view_side = 80;
    std::string maps_dir; // nonempty -> cluster a precomputed map directory
};

struct ScheduleConfig {
    TrainSchedule schedule;   // seed field is ignored; derived from RunConfig
    LossWeights loss_weights; // lambda_cluster / lambda_separation
};

struct RunConfig {
    std::uint64_t seed = 1;
    std::string output_dir = "out";
    int threads = 1; // advisory; set via PROTO_PRP_THREADS only
    DatasetConfig dataset;
    ModelConfig model;
    ScheduleConfig schedule;
    ExplainConfig explain;
    EvalConfig eval;
    ClusterConfig cluster;

    std::string dataset_dir() const;
    std::string checkpoint_dir() const;
    std::string split_dir(const std::string& split) const;
    void validate() const;
};

// Strict decode: every field optional with a default, unknown keys rejected
// with their full path, wrong types reported with the field path.
RunConfig config_from_json(const nlohmann::json& doc);
nlohmann::json config_to_json(const RunConfig& config);

// CH-100 / CH-50 / CH-20 / BD-15 / CLEAN
bool is_preset_name(const std::string& name);
RunConfig preset_config(const std::string& name);

// `source` is a path to a JSON file or a preset name.
nlohmann::json load_config_document(const std::string& source);

// --key=value override on the raw document; dotted path, value parsed as
// JSON when possible, else taken as a string.
void apply_override(nlohmann::json& doc, const std::string& key, const std::string& value);

} // namespace protoprp
