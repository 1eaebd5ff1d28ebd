#include "protoprp/tensor.hpp"

#include "protoprp/errors.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace protoprp {

namespace {

std::size_t checked_numel(const std::vector<int>& shape) {
    if (shape.empty() || shape.size() > 4)
        throw ConfigError("tensor rank must be 1..4, got " + std::to_string(shape.size()));
    std::size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw ConfigError("tensor dimension must be positive");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

} // namespace

Tensor::Tensor(std::vector<int> s, float fill) : shape(std::move(s)) {
    data.assign(checked_numel(shape), fill);
}

Tensor Tensor::from(std::vector<int> s, std::vector<float> values) {
    const std::size_t n = checked_numel(s);
    if (n != values.size())
        throw ConfigError("tensor data length " + std::to_string(values.size()) +
                          " does not match shape product " + std::to_string(n));
    Tensor t;
    t.shape = std::move(s);
    t.data = std::move(values);
    return t;
}

bool Tensor::all_finite() const {
    for (float v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

float Tensor::max_abs() const {
    float m = 0.0f;
    for (float v : data) m = std::max(m, std::fabs(v));
    return m;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i)
        os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

void verify_finite(const Tensor& t, const char* where) {
    if (!t.all_finite())
        throw NumericError(std::string(where) + ": non-finite values in result");
}

void ConvLayer::validate() const {
    if (weight.rank() != 4)
        throw ConfigError("conv weight must be rank 4 [outC,inC,kH,kW], got " + weight.shape_str());
    if (bias.rank() != 1 || bias.dim(0) != weight.dim(0))
        throw ConfigError("conv bias shape " + bias.shape_str() +
                          " inconsistent with weight " + weight.shape_str());
    if (stride < 1) throw ConfigError("conv stride must be >= 1");
    if (padding < 0) throw ConfigError("conv padding must be >= 0");
}

Tensor conv2d_forward(const Tensor& input, const ConvLayer& layer) {
    layer.validate();
    if (input.rank() != 3)
        throw ConfigError("conv input must be rank 3 [C,H,W], got " + input.shape_str());
    const int in_c = input.dim(0), in_h = input.dim(1), in_w = input.dim(2);
    const int out_c = layer.weight.dim(0);
    const int k_h = layer.weight.dim(2), k_w = layer.weight.dim(3);
    if (layer.weight.dim(1) != in_c)
        throw ConfigError("conv expects " + std::to_string(layer.weight.dim(1)) +
                          " input channels, image has " + std::to_string(in_c));
    const int s = layer.stride, p = layer.padding;
    if (in_h + 2 * p < k_h || in_w + 2 * p < k_w)
        throw ConfigError("conv kernel " + std::to_string(k_h) + "x" + std::to_string(k_w) +
                          " larger than padded input " + input.shape_str());
    const int out_h = (in_h + 2 * p - k_h) / s + 1;
    const int out_w = (in_w + 2 * p - k_w) / s + 1;

    Tensor out({out_c, out_h, out_w});
    for (int oc = 0; oc < out_c; ++oc) {
        for (int oh = 0; oh < out_h; ++oh) {
            for (int ow = 0; ow < out_w; ++ow) {
                double acc = layer.bias.at(oc);
                const int h0 = oh * s - p;
                const int w0 = ow * s - p;
                for (int ic = 0; ic < in_c; ++ic) {
                    for (int kh = 0; kh < k_h; ++kh) {
                        const int ih = h0 + kh;
                        if (ih < 0 || ih >= in_h) continue;
                        for (int kw = 0; kw < k_w; ++kw) {
                            const int iw = w0 + kw;
                            if (iw < 0 || iw >= in_w) continue;
                            acc += static_cast<double>(input.at(ic, ih, iw)) *
                                   layer.weight.at(oc, ic, kh, kw);
                        }
                    }
                }
                out.at(oc, oh, ow) = static_cast<float>(acc);
            }
        }
    }
    verify_finite(out, "conv2d_forward");
    return out;
}

std::pair<Tensor, PoolArgmax> maxpool2d_forward(const Tensor& input, int window, int stride) {
    if (input.rank() != 3)
        throw ConfigError("maxpool input must be rank 3 [C,H,W], got " + input.shape_str());
    if (window < 1 || stride < 1)
        throw ConfigError("maxpool window and stride must be >= 1");
    const int c = input.dim(0), h = input.dim(1), w = input.dim(2);
    if (window > h || window > w)
        throw ConfigError("maxpool window " + std::to_string(window) +
                          " larger than input " + input.shape_str());
    const int out_h = (h - window) / stride + 1;
    const int out_w = (w - window) / stride + 1;

    Tensor out({c, out_h, out_w});
    PoolArgmax am;
    am.out_shape = {c, out_h, out_w};
    am.in_shape = {c, h, w};
    am.winner.resize(out.size());

    std::size_t o = 0;
    for (int ch = 0; ch < c; ++ch) {
        for (int oh = 0; oh < out_h; ++oh) {
            for (int ow = 0; ow < out_w; ++ow, ++o) {
                float best = -std::numeric_limits<float>::infinity();
                int best_idx = -1;
                // ties keep the first candidate in row-major scan order
                for (int kh = 0; kh < window; ++kh) {
                    for (int kw = 0; kw < window; ++kw) {
                        const int ih = oh * stride + kh;
                        const int iw = ow * stride + kw;
                        const float v = input.at(ch, ih, iw);
                        if (v > best) {
                            best = v;
                            best_idx = (ch * h + ih) * w + iw;
                        }
                    }
                }
                out.data[o] = best;
                am.winner[o] = best_idx;
            }
        }
    }
    verify_finite(out, "maxpool2d_forward");
    return {std::move(out), std::move(am)};
}

Tensor relu(const Tensor& input) {
    Tensor out = input;
    for (float& v : out.data)
        if (v < 0.0f) v = 0.0f;
    return out;
}

Tensor linear_forward(const Tensor& input, const Tensor& weights, const Tensor& bias) {
    if (input.rank() != 1)
        throw ConfigError("linear input must be rank 1, got " + input.shape_str());
    if (weights.rank() != 2 || weights.dim(1) != input.dim(0))
        throw ConfigError("linear weights " + weights.shape_str() +
                          " incompatible with input " + input.shape_str());
    if (bias.rank() != 1 || bias.dim(0) != weights.dim(0))
        throw ConfigError("linear bias " + bias.shape_str() +
                          " incompatible with weights " + weights.shape_str());
    const int classes = weights.dim(0), n = input.dim(0);
    Tensor out({classes});
    for (int k = 0; k < classes; ++k) {
        double acc = bias.at(k);
        for (int i = 0; i < n; ++i)
            acc += static_cast<double>(weights.at(k, i)) * input.at(i);
        out.at(k) = static_cast<float>(acc);
    }
    verify_finite(out, "linear_forward");
    return out;
}

namespace {

// Corner-aligned sampling: output corners map onto input corners.
Tensor bilinear_sample(const Tensor& input, int out_h, int out_w) {
    const int h = input.dim(input.rank() - 2);
    const int w = input.dim(input.rank() - 1);
    const int channels = input.rank() == 3 ? input.dim(0) : 1;

    std::vector<int> out_shape = input.shape;
    out_shape[out_shape.size() - 2] = out_h;
    out_shape[out_shape.size() - 1] = out_w;
    Tensor out(out_shape);

    const double sy = out_h > 1 ? static_cast<double>(h - 1) / (out_h - 1) : 0.0;
    const double sx = out_w > 1 ? static_cast<double>(w - 1) / (out_w - 1) : 0.0;

    for (int c = 0; c < channels; ++c) {
        const float* src = input.data.data() + static_cast<std::size_t>(c) * h * w;
        float* dst = out.data.data() + static_cast<std::size_t>(c) * out_h * out_w;
        for (int oy = 0; oy < out_h; ++oy) {
            const double fy = oy * sy;
            int y0 = static_cast<int>(fy);
            if (y0 > h - 2) y0 = h > 1 ? h - 2 : 0;
            const double ty = h > 1 ? fy - y0 : 0.0;
            const int y1 = h > 1 ? y0 + 1 : y0;
            for (int ox = 0; ox < out_w; ++ox) {
                const double fx = ox * sx;
                int x0 = static_cast<int>(fx);
                if (x0 > w - 2) x0 = w > 1 ? w - 2 : 0;
                const double tx = w > 1 ? fx - x0 : 0.0;
                const int x1 = w > 1 ? x0 + 1 : x0;
                const double a = src[y0 * w + x0];
                const double b = src[y0 * w + x1];
                const double c2 = src[y1 * w + x0];
                const double d = src[y1 * w + x1];
                const double v = a * (1 - tx) * (1 - ty) + b * tx * (1 - ty) +
                                 c2 * (1 - tx) * ty + d * tx * ty;
                dst[oy * out_w + ox] = static_cast<float>(v);
            }
        }
    }
    return out;
}

} // namespace

Tensor bilinear_resize(const Tensor& input, int out_h, int out_w) {
    if (input.rank() != 2 && input.rank() != 3)
        throw ConfigError("bilinear_resize expects rank 2 or 3, got " + input.shape_str());
    if (out_h < 1 || out_w < 1)
        throw ConfigError("bilinear_resize target must be positive");
    Tensor out = bilinear_sample(input, out_h, out_w);
    verify_finite(out, "bilinear_resize");
    return out;
}

Tensor bilinear_upsample(const Tensor& input, int out_h, int out_w) {
    if (input.rank() != 2 && input.rank() != 3)
        throw ConfigError("bilinear_upsample expects rank 2 or 3, got " + input.shape_str());
    const int h = input.dim(input.rank() - 2);
    const int w = input.dim(input.rank() - 1);
    if (out_h < h || out_w < w)
        throw ConfigError("bilinear_upsample target " + std::to_string(out_h) + "x" +
                          std::to_string(out_w) + " smaller than source " + input.shape_str());
    return bilinear_resize(input, out_h, out_w);
}

} // namespace protoprp
