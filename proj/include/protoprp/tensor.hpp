#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace protoprp {

// Dense row-major float tensor, rank 1 to 4. All public operations keep
// entries finite; violations throw NumericError.
struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;
    Tensor(std::vector<int> s, float fill = 0.0f);

    static Tensor from(std::vector<int> s, std::vector<float> values);

    int rank() const { return static_cast<int>(shape.size()); }
    std::size_t size() const { return data.size(); }

    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

    // Unchecked indexing helpers for the common ranks.
    float& at(int i) { return data[static_cast<std::size_t>(i)]; }
    float at(int i) const { return data[static_cast<std::size_t>(i)]; }
    float& at(int i, int j) { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
    float at(int i, int j) const { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
    float& at(int c, int h, int w) {
        return data[(static_cast<std::size_t>(c) * shape[1] + h) * shape[2] + w];
    }
    float at(int c, int h, int w) const {
        return data[(static_cast<std::size_t>(c) * shape[1] + h) * shape[2] + w];
    }
    float& at(int a, int b, int c, int d) {
        return data[((static_cast<std::size_t>(a) * shape[1] + b) * shape[2] + c) * shape[3] + d];
    }
    float at(int a, int b, int c, int d) const {
        return data[((static_cast<std::size_t>(a) * shape[1] + b) * shape[2] + c) * shape[3] + d];
    }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }
    bool all_finite() const;
    float max_abs() const;
    std::string shape_str() const;
};

// 2D convolution layer parameters (cross-correlation semantics).
struct ConvLayer {
    Tensor weight; // [outC, inC, kH, kW]
    Tensor bias;   // [outC]
    int stride = 1;
    int padding = 0;

    int out_channels() const { return weight.dim(0); }
    int in_channels() const { return weight.dim(1); }
    void validate() const;
};

// Per output cell, the flat index (into the input's data array) of the
// window maximum recorded by maxpool2d_forward.
struct PoolArgmax {
    std::vector<int> out_shape; // [C, H', W']
    std::vector<int> in_shape;  // [C, H, W]
    std::vector<int> winner;    // flat input index per output cell
};

Tensor conv2d_forward(const Tensor& input, const ConvLayer& layer);
std::pair<Tensor, PoolArgmax> maxpool2d_forward(const Tensor& input, int window, int stride);
Tensor relu(const Tensor& input);
Tensor linear_forward(const Tensor& input, const Tensor& weights, const Tensor& bias);

// Corner-aligned bilinear interpolation. bilinear_upsample rejects targets
// smaller than the source; bilinear_resize accepts any positive target and
// backs both heatmap upsampling and the 80x80 view downscaling.
Tensor bilinear_upsample(const Tensor& input, int out_h, int out_w);
Tensor bilinear_resize(const Tensor& input, int out_h, int out_w);

void verify_finite(const Tensor& t, const char* where);

} // namespace protoprp
