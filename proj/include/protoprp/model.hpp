#pragma once

#include "protoprp/dataset.hpp"
#include "protoprp/tensor.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace protoprp {

enum class StageKind { Conv, Relu, Pool };

struct Stage {
    StageKind kind = StageKind::Relu;
    ConvLayer conv;      // Conv stages
    int pool_window = 2; // Pool stages
    int pool_stride = 2;
};

// How much of the forward pass to keep. Scores is enough for prediction,
// similarities and prototype pushes; Train adds what backprop needs; Explain
// adds the per-channel patch distances the relevance rules consume.
enum class TraceLevel { Scores, Train, Explain };

struct ForwardTrace {
    TraceLevel level = TraceLevel::Scores;
    std::vector<Tensor> stage_input;     // input to each backbone stage (Train+)
    std::vector<PoolArgmax> pool_argmax; // per stage, filled for pool stages (Train+)
    Tensor features;                     // [D,Hf,Wf]
    Tensor dist;                         // [n,Hf,Wf] squared patch distances (Train+)
    Tensor dist_chan;                    // [n,D,Hf,Wf] per-channel distances (Explain)
    Tensor act_maps;                     // [n,Hf,Wf]
    Tensor similarities;                 // [n]
    std::vector<int> sim_argmax;         // flat Hf*Wf cell per prototype, first max wins
    Tensor logits;                       // [num_classes]
};

struct PrototypeModel {
    int input_c = 3, input_h = 32, input_w = 32;
    int num_classes = 0;
    std::vector<Stage> backbone;
    Tensor prototypes;                   // [n, D]
    std::vector<int> class_of_prototype; // length n
    Tensor last_weight;                  // [num_classes, n]
    Tensor last_bias;                    // [num_classes]
    float eps = 1e-4f;

    int num_prototypes() const { return prototypes.rank() == 2 ? prototypes.dim(0) : 0; }
    int feature_depth() const { return prototypes.rank() == 2 ? prototypes.dim(1) : 0; }
    void feature_dims(int& depth, int& h, int& w) const;
    void validate() const;
};

// Backbone: one conv(3x3, pad 1) + ReLU stage per `conv_channels` entry with
// a 2x2/2 max-pool between consecutive stages; the last entry is the feature
// depth. Prototypes start uniform in [0,1); last layer starts at +1 for
// own-class entries, -0.5 otherwise.
PrototypeModel make_default_model(int num_classes, int protos_per_class, int input_size,
                                  const std::vector<int>& conv_channels,
                                  std::uint64_t seed);

ForwardTrace forward(const PrototypeModel& model, const Tensor& image, TraceLevel level);

// Diverse prototype start: k-means++-style farthest-point seeding over each
// class's own patch latents, so the initial prototypes cover distinct regions
// of patch space instead of clumping wherever uniform noise happens to land.
void init_prototypes_from_patches(PrototypeModel& model, const LabeledDataset& ds,
                                  std::uint64_t seed);

// a = ln((d+1)/(d+eps)) per spatial cell, d = squared L2 patch distance.
Tensor activation_map(const Tensor& zpatches, const Tensor& prototype, float eps = 1e-4f);

struct LossWeights {
    float lambda_clst = 0.8f;
    float lambda_sep = 0.08f;
    void validate() const;
};

struct LossParts {
    double total = 0, ce = 0, cluster = 0, separation = 0;
};

LossParts loss_total(const PrototypeModel& model, const LabeledDataset& batch,
                     const LossWeights& weights);

struct TrainSchedule {
    int total_epochs = 30;
    int push_every = 10;
    int last_layer_epochs_after_push = 20;
    float lr = 0.05f;
    float lr_decay = 0.1f;
    int lr_decay_every = 5;
    float momentum = 0.9f;
    float last_layer_lr = 0.1f;
    int batch_size = 16;
    std::uint64_t seed = 0;
    void validate() const;
};

struct EpochStats {
    int epoch = 0;
    double lr = 0, total = 0, ce = 0, cluster = 0, separation = 0, train_acc = 0;
};

struct PushEntry {
    int prototype = 0;
    int image_id = 0;
    int cell_i = 0, cell_j = 0;
    double distance = 0; // squared distance before replacement
};

struct PushRecord {
    int epoch = 0;
    std::vector<PushEntry> entries;
};

struct TrainReport {
    std::vector<EpochStats> epochs;            // joint (all-but-last-layer) epochs
    std::vector<EpochStats> last_layer_epochs; // convex last-layer refits
    std::vector<PushRecord> pushes;
};

// Alternates joint SGD epochs, a prototype push every `push_every` epochs,
// and a last-layer-only refit after each push. Throws NumericError with the
// epoch index if the loss stops being finite.
TrainReport train(PrototypeModel& model, const LabeledDataset& ds,
                  const TrainSchedule& sched, const LossWeights& weights);

PushRecord push_prototypes(PrototypeModel& model, const LabeledDataset& ds);

void train_last_layer(PrototypeModel& model, const LabeledDataset& ds, int epochs,
                      float lr, int batch_size, std::uint64_t seed,
                      std::vector<EpochStats>* log = nullptr);

PrototypeModel prune_prototypes(const PrototypeModel& model, const std::vector<int>& indices,
                                bool retrain_last_layer, const LabeledDataset& ds,
                                int retrain_epochs = 20, float retrain_lr = 0.1f,
                                std::uint64_t seed = 0);

struct CheckpointMeta {
    TrainSchedule schedule;
    LossWeights weights;
    std::array<float, 3> domain_low{0.0f, 0.0f, 0.0f};  // input pixel bounds
    std::array<float, 3> domain_high{1.0f, 1.0f, 1.0f};
    std::vector<PushRecord> pushes;
};

void save_checkpoint(const std::string& dir, const PrototypeModel& model,
                     const CheckpointMeta& meta);
PrototypeModel load_checkpoint(const std::string& dir, CheckpointMeta* meta = nullptr);

} // namespace protoprp
