#pragma once

#include "protoprp/model.hpp"

#include <vector>

namespace protoprp {

// Per-channel pixel bounds of the input domain (used by the input-layer rule).
struct InputDomain {
    std::vector<float> low, high;

    static InputDomain unit(int channels) {
        InputDomain d;
        d.low.assign(static_cast<std::size_t>(channels), 0.0f);
        d.high.assign(static_cast<std::size_t>(channels), 1.0f);
        return d;
    }
    void validate(int channels) const;
};

enum class RelevanceStage { Similarity, Activation, Conv, Input };

struct RelevanceMap {
    Tensor values;            // layer-shaped during propagation, [C,H,W] at input
    int prototype_index = -1; // set for per-prototype maps
    int class_index = -1;     // set for class maps
    RelevanceStage stage = RelevanceStage::Input;
    long dropped_terms = 0;   // zero-denominator contributions dropped at the input rule
};

struct ExplainSettings {
    float eps = 1e-4f;
    float alpha = 1.0f;
    float beta = 0.0f;
    InputDomain domain; // empty -> unit bounds per channel
    void validate() const;
};

// Winner-take-all: the activation map's (row-major first) argmax cell
// receives the whole similarity score.
RelevanceMap relevance_similarity_to_activation(const ForwardTrace& trace, int m);

// Channel redistribution: gamma_c = 1/(d_c + eps) per channel, cell relevance
// split as gamma_c / (sum_k gamma_k + eps).
RelevanceMap relevance_activation_to_conv(const ForwardTrace& trace, int m,
                                          const RelevanceMap& rel, float eps = 1e-4f);

// alpha/beta rule: R_i = sum_j (alpha z_ij+/z_j+ + beta z_ij-/z_j-) R_j with
// z_ij = x_i w_ij and z_j+- summed over inputs only; 0/0 counts as 0 and the
// bias receives nothing.
Tensor lrp_alphabeta_conv(const Tensor& layer_input, const ConvLayer& layer,
                          const Tensor& rel_out, float alpha = 1.0f, float beta = 0.0f);
Tensor lrp_alphabeta_linear(const Tensor& layer_input, const Tensor& weights,
                            const Tensor& rel_out, float alpha = 1.0f, float beta = 0.0f);

// Relevance follows the recorded pooling winners.
Tensor lrp_maxpool(const PoolArgmax& pool_argmax, const Tensor& rel_out);

// Epsilon rule on a linear layer: R_i = z_ij / (z_j + eps*sign(z_j)) R_j with
// z_j the layer output (bias included, absorbing its share); sign(0) = +1.
Tensor lrp_epsilon(const Tensor& layer_input, const Tensor& weights, const Tensor& bias,
                   const Tensor& rel_out, float eps = 1e-4f);

// Bounded-input rule for the first (pixel-facing) convolution:
// R_i = sum_j (z_ij - l_i w+ - h_i w-) / (sum_i ...) R_j. Output cells whose
// denominator is exactly zero are dropped and counted via `dropped`.
Tensor dtd_zB(const Tensor& input_image, const ConvLayer& first_layer, const Tensor& rel_out,
              const InputDomain& domain, long* dropped = nullptr);

// Composite per-prototype pipeline: similarity -> activation winner ->
// channel redistribution -> conv stack (alpha/beta + pool routing + ReLU
// pass-through) -> bounded input rule at the first convolution.
RelevanceMap prp_map(const PrototypeModel& model, const Tensor& image, int m,
                     const ExplainSettings& settings = {});
RelevanceMap prp_map_from_trace(const PrototypeModel& model, const Tensor& image,
                                const ForwardTrace& trace, int m,
                                const ExplainSettings& settings = {});

// Baseline: bilinear upsampling of the activation map to input size.
RelevanceMap protopnet_heatmap(const PrototypeModel& model, const Tensor& image, int m);

// Class map: class logit split over similarity scores with the epsilon rule,
// then the per-prototype pipeline, all prototypes combined at the conv output.
RelevanceMap spray_lrp_map(const PrototypeModel& model, const Tensor& image, int target_class,
                           const ExplainSettings& settings = {});
RelevanceMap spray_lrp_map_from_trace(const PrototypeModel& model, const Tensor& image,
                                      const ForwardTrace& trace, int target_class,
                                      const ExplainSettings& settings = {});

// [C,H,W] -> [H,W] sum over channels (rendering and clustering views).
Tensor channel_sum(const Tensor& map);

} // namespace protoprp
