#include "protoprp/prp.hpp"

#include "protoprp/errors.hpp"

#include <cmath>
#include <cstdlib>

namespace protoprp {

void InputDomain::validate(int channels) const {
    if (low.size() != static_cast<std::size_t>(channels) ||
        high.size() != static_cast<std::size_t>(channels))
        throw ConfigError("input domain must give bounds for all " +
                          std::to_string(channels) + " channels");
    for (std::size_t i = 0; i < low.size(); ++i)
        if (!(low[i] <= high[i]))
            throw ConfigError("input domain low > high on channel " + std::to_string(i));
}

void ExplainSettings::validate() const {
    if (eps <= 0.0f) throw ConfigError("explain.eps must be positive");
    if (std::fabs(alpha + beta - 1.0f) > 1e-6f)
        throw ConfigError("explain rule needs alpha + beta == 1");
    if (alpha < 1.0f) throw ConfigError("explain rule needs alpha >= 1");
}

RelevanceMap relevance_similarity_to_activation(const ForwardTrace& trace, int m) {
    if (trace.act_maps.rank() != 3 || trace.similarities.rank() != 1)
        throw ConfigError("trace lacks activation maps");
    if (m < 0 || m >= trace.act_maps.dim(0))
        throw ConfigError("prototype index " + std::to_string(m) + " out of range");
    RelevanceMap rel;
    rel.prototype_index = m;
    rel.stage = RelevanceStage::Activation;
    rel.values = Tensor({trace.act_maps.dim(1), trace.act_maps.dim(2)});
    rel.values.data[static_cast<std::size_t>(trace.sim_argmax[static_cast<std::size_t>(m)])] =
        trace.similarities.at(m);
    return rel;
}

RelevanceMap relevance_activation_to_conv(const ForwardTrace& trace, int m,
                                          const RelevanceMap& rel, float eps) {
    if (eps <= 0.0f) throw ConfigError("eps must be positive");
    if (trace.level != TraceLevel::Explain || trace.dist_chan.rank() != 4)
        throw ConfigError("trace lacks per-channel distances (need an explain trace)");
    if (rel.stage != RelevanceStage::Activation)
        throw ConfigError("expected an activation-stage relevance map");
    const int depth = trace.dist_chan.dim(1);
    const int fh = trace.dist_chan.dim(2), fw = trace.dist_chan.dim(3);
    if (rel.values.rank() != 2 || rel.values.dim(0) != fh || rel.values.dim(1) != fw)
        throw ConfigError("activation relevance shape " + rel.values.shape_str() +
                          " does not match the feature map");

    RelevanceMap out;
    out.prototype_index = m;
    out.stage = RelevanceStage::Conv;
    out.values = Tensor({depth, fh, fw});
    for (int i = 0; i < fh; ++i) {
        for (int j = 0; j < fw; ++j) {
            const double r = rel.values.at(i, j);
            if (r == 0.0) continue;
            double denom = static_cast<double>(eps);
            for (int c = 0; c < depth; ++c)
                denom += 1.0 / (static_cast<double>(trace.dist_chan.at(m, c, i, j)) + eps);
            for (int c = 0; c < depth; ++c) {
                const double gamma =
                    1.0 / (static_cast<double>(trace.dist_chan.at(m, c, i, j)) + eps);
                out.values.at(c, i, j) = static_cast<float>(gamma / denom * r);
            }
        }
    }
    verify_finite(out.values, "relevance_activation_to_conv");
    return out;
}

namespace {

void check_alpha_beta(float alpha, float beta) {
    if (std::fabs(alpha + beta - 1.0f) > 1e-6f)
        throw ConfigError("alpha + beta must equal 1");
    if (alpha < 1.0f) throw ConfigError("alpha must be >= 1");
}

std::vector<int> conv_out_shape(const Tensor& input, const ConvLayer& layer) {
    const int out_h =
        (input.dim(1) + 2 * layer.padding - layer.weight.dim(2)) / layer.stride + 1;
    const int out_w =
        (input.dim(2) + 2 * layer.padding - layer.weight.dim(3)) / layer.stride + 1;
    return {layer.out_channels(), out_h, out_w};
}

} // namespace

Tensor lrp_alphabeta_conv(const Tensor& layer_input, const ConvLayer& layer,
                          const Tensor& rel_out, float alpha, float beta) {
    layer.validate();
    check_alpha_beta(alpha, beta);
    if (layer_input.rank() != 3 || layer_input.dim(0) != layer.in_channels())
        throw ConfigError("layer input shape " + layer_input.shape_str() +
                          " does not match the convolution");
    const std::vector<int> os = conv_out_shape(layer_input, layer);
    if (rel_out.shape != os)
        throw ConfigError("output relevance shape " + rel_out.shape_str() +
                          " does not match the convolution output");

    const int in_c = layer_input.dim(0), in_h = layer_input.dim(1), in_w = layer_input.dim(2);
    const int k_h = layer.weight.dim(2), k_w = layer.weight.dim(3);
    const int s = layer.stride, p = layer.padding;
    std::vector<double> rin(layer_input.size(), 0.0);

    for (int oc = 0; oc < os[0]; ++oc) {
        for (int oh = 0; oh < os[1]; ++oh) {
            for (int ow = 0; ow < os[2]; ++ow) {
                const double rj = rel_out.at(oc, oh, ow);
                if (rj == 0.0) continue;
                const int h0 = oh * s - p, w0 = ow * s - p;
                double zp = 0.0, zn = 0.0;
                for (int ic = 0; ic < in_c; ++ic)
                    for (int kh = 0; kh < k_h; ++kh) {
                        const int ih = h0 + kh;
                        if (ih < 0 || ih >= in_h) continue;
                        for (int kw = 0; kw < k_w; ++kw) {
                            const int iw = w0 + kw;
                            if (iw < 0 || iw >= in_w) continue;
                            const double z = static_cast<double>(layer_input.at(ic, ih, iw)) *
                                             layer.weight.at(oc, ic, kh, kw);
                            if (z > 0.0) zp += z;
                            else zn += z;
                        }
                    }
                const double fp = (zp > 0.0) ? alpha * rj / zp : 0.0;
                const double fn = (zn < 0.0) ? beta * rj / zn : 0.0;
                if (fp == 0.0 && fn == 0.0) continue;
                for (int ic = 0; ic < in_c; ++ic)
                    for (int kh = 0; kh < k_h; ++kh) {
                        const int ih = h0 + kh;
                        if (ih < 0 || ih >= in_h) continue;
                        for (int kw = 0; kw < k_w; ++kw) {
                            const int iw = w0 + kw;
                            if (iw < 0 || iw >= in_w) continue;
                            const double z = static_cast<double>(layer_input.at(ic, ih, iw)) *
                                             layer.weight.at(oc, ic, kh, kw);
                            const std::size_t idx =
                                (static_cast<std::size_t>(ic) * in_h + ih) * in_w + iw;
                            if (z > 0.0) rin[idx] += fp * z;
                            else if (z < 0.0) rin[idx] += fn * z;
                        }
                    }
            }
        }
    }
    Tensor out(layer_input.shape);
    for (std::size_t i = 0; i < rin.size(); ++i) out.data[i] = static_cast<float>(rin[i]);
    verify_finite(out, "lrp_alphabeta_conv");
    return out;
}

Tensor lrp_alphabeta_linear(const Tensor& layer_input, const Tensor& weights,
                            const Tensor& rel_out, float alpha, float beta) {
    check_alpha_beta(alpha, beta);
    if (layer_input.rank() != 1 || weights.rank() != 2 ||
        weights.dim(1) != layer_input.dim(0))
        throw ConfigError("linear relevance shapes inconsistent");
    if (rel_out.rank() != 1 || rel_out.dim(0) != weights.dim(0))
        throw ConfigError("output relevance shape " + rel_out.shape_str() +
                          " does not match the linear output");
    const int n = layer_input.dim(0), k = weights.dim(0);
    std::vector<double> rin(static_cast<std::size_t>(n), 0.0);
    for (int j = 0; j < k; ++j) {
        const double rj = rel_out.at(j);
        if (rj == 0.0) continue;
        double zp = 0.0, zn = 0.0;
        for (int i = 0; i < n; ++i) {
            const double z = static_cast<double>(layer_input.at(i)) * weights.at(j, i);
            if (z > 0.0) zp += z;
            else zn += z;
        }
        const double fp = (zp > 0.0) ? alpha * rj / zp : 0.0;
        const double fn = (zn < 0.0) ? beta * rj / zn : 0.0;
        for (int i = 0; i < n; ++i) {
            const double z = static_cast<double>(layer_input.at(i)) * weights.at(j, i);
            if (z > 0.0) rin[static_cast<std::size_t>(i)] += fp * z;
            else if (z < 0.0) rin[static_cast<std::size_t>(i)] += fn * z;
        }
    }
    Tensor out({n});
    for (int i = 0; i < n; ++i) out.at(i) = static_cast<float>(rin[static_cast<std::size_t>(i)]);
    verify_finite(out, "lrp_alphabeta_linear");
    return out;
}

Tensor lrp_maxpool(const PoolArgmax& pool_argmax, const Tensor& rel_out) {
    if (rel_out.shape != pool_argmax.out_shape)
        throw ConfigError("pool relevance shape " + rel_out.shape_str() +
                          " does not match the recorded pooling");
    Tensor out(pool_argmax.in_shape);
    for (std::size_t o = 0; o < pool_argmax.winner.size(); ++o)
        out.data[static_cast<std::size_t>(pool_argmax.winner[o])] += rel_out.data[o];
    return out;
}

Tensor lrp_epsilon(const Tensor& layer_input, const Tensor& weights, const Tensor& bias,
                   const Tensor& rel_out, float eps) {
    if (eps <= 0.0f) throw ConfigError("eps must be positive");
    if (layer_input.rank() != 1 || weights.rank() != 2 ||
        weights.dim(1) != layer_input.dim(0))
        throw ConfigError("linear relevance shapes inconsistent");
    if (bias.rank() != 1 || bias.dim(0) != weights.dim(0))
        throw ConfigError("bias shape does not match the linear layer");
    if (rel_out.rank() != 1 || rel_out.dim(0) != weights.dim(0))
        throw ConfigError("output relevance shape does not match the linear output");
    const int n = layer_input.dim(0), k = weights.dim(0);
    std::vector<double> rin(static_cast<std::size_t>(n), 0.0);
    for (int j = 0; j < k; ++j) {
        const double rj = rel_out.at(j);
        if (rj == 0.0) continue;
        double zj = bias.at(j);
        for (int i = 0; i < n; ++i)
            zj += static_cast<double>(layer_input.at(i)) * weights.at(j, i);
        const double denom = zj + (zj >= 0.0 ? eps : -eps); // sign(0) treated as +1
        for (int i = 0; i < n; ++i) {
            const double z = static_cast<double>(layer_input.at(i)) * weights.at(j, i);
            rin[static_cast<std::size_t>(i)] += z / denom * rj;
        }
    }
    Tensor out({n});
    for (int i = 0; i < n; ++i) out.at(i) = static_cast<float>(rin[static_cast<std::size_t>(i)]);
    verify_finite(out, "lrp_epsilon");
    return out;
}

Tensor dtd_zB(const Tensor& input_image, const ConvLayer& first_layer, const Tensor& rel_out,
              const InputDomain& domain, long* dropped) {
    first_layer.validate();
    if (input_image.rank() != 3 || input_image.dim(0) != first_layer.in_channels())
        throw ConfigError("input image shape " + input_image.shape_str() +
                          " does not match the first convolution");
    domain.validate(input_image.dim(0));
    for (int c = 0; c < input_image.dim(0); ++c)
        for (int y = 0; y < input_image.dim(1); ++y)
            for (int x = 0; x < input_image.dim(2); ++x) {
                const float v = input_image.at(c, y, x);
                if (v < domain.low[static_cast<std::size_t>(c)] ||
                    v > domain.high[static_cast<std::size_t>(c)])
                    throw ConfigError("image value outside the declared input domain");
            }
    const std::vector<int> os = conv_out_shape(input_image, first_layer);
    if (rel_out.shape != os)
        throw ConfigError("output relevance shape " + rel_out.shape_str() +
                          " does not match the first convolution output");

    const int in_c = input_image.dim(0), in_h = input_image.dim(1), in_w = input_image.dim(2);
    const int k_h = first_layer.weight.dim(2), k_w = first_layer.weight.dim(3);
    const int s = first_layer.stride, p = first_layer.padding;
    std::vector<double> rin(input_image.size(), 0.0);
    long drops = 0;

    for (int oc = 0; oc < os[0]; ++oc) {
        for (int oh = 0; oh < os[1]; ++oh) {
            for (int ow = 0; ow < os[2]; ++ow) {
                const double rj = rel_out.at(oc, oh, ow);
                if (rj == 0.0) continue;
                const int h0 = oh * s - p, w0 = ow * s - p;
                double denom = 0.0;
                for (int ic = 0; ic < in_c; ++ic) {
                    const double l = domain.low[static_cast<std::size_t>(ic)];
                    const double h = domain.high[static_cast<std::size_t>(ic)];
                    for (int kh = 0; kh < k_h; ++kh) {
                        const int ih = h0 + kh;
                        if (ih < 0 || ih >= in_h) continue;
                        for (int kw = 0; kw < k_w; ++kw) {
                            const int iw = w0 + kw;
                            if (iw < 0 || iw >= in_w) continue;
                            const double w = first_layer.weight.at(oc, ic, kh, kw);
                            const double z =
                                static_cast<double>(input_image.at(ic, ih, iw)) * w;
                            denom += z - l * std::max(w, 0.0) - h * std::min(w, 0.0);
                        }
                    }
                }
                if (denom == 0.0) {
                    ++drops;
                    continue;
                }
                for (int ic = 0; ic < in_c; ++ic) {
                    const double l = domain.low[static_cast<std::size_t>(ic)];
                    const double h = domain.high[static_cast<std::size_t>(ic)];
                    for (int kh = 0; kh < k_h; ++kh) {
                        const int ih = h0 + kh;
                        if (ih < 0 || ih >= in_h) continue;
                        for (int kw = 0; kw < k_w; ++kw) {
                            const int iw = w0 + kw;
                            if (iw < 0 || iw >= in_w) continue;
                            const double w = first_layer.weight.at(oc, ic, kh, kw);
                            const double z =
                                static_cast<double>(input_image.at(ic, ih, iw)) * w;
                            const double num =
                                z - l * std::max(w, 0.0) - h * std::min(w, 0.0);
                            rin[(static_cast<std::size_t>(ic) * in_h + ih) * in_w + iw] +=
                                num / denom * rj;
                        }
                    }
                }
            }
        }
    }
    if (dropped) *dropped = drops;
    Tensor out(input_image.shape);
    for (std::size_t i = 0; i < rin.size(); ++i) out.data[i] = static_cast<float>(rin[i]);
    verify_finite(out, "dtd_zB");
    return out;
}

namespace {

// Shared tail of the composite pipelines: relevance at the conv output back
// to pixels. The first convolution uses the bounded-input rule; other conv
// stages use alpha/beta; pools route to winners; ReLU passes through.
Tensor backprop_conv_stack(const PrototypeModel& model, const ForwardTrace& trace,
                           Tensor cur, const ExplainSettings& settings,
                           const InputDomain& dom, long* drops) {
    int first_conv = -1;
    for (std::size_t s = 0; s < model.backbone.size(); ++s)
        if (model.backbone[s].kind == StageKind::Conv) {
            first_conv = static_cast<int>(s);
            break;
        }
    for (int s = static_cast<int>(model.backbone.size()) - 1; s >= 0; --s) {
        const Stage& st = model.backbone[static_cast<std::size_t>(s)];
        const Tensor& input = trace.stage_input[static_cast<std::size_t>(s)];
        switch (st.kind) {
            case StageKind::Relu:
                break; // pass-through
            case StageKind::Pool:
                cur = lrp_maxpool(trace.pool_argmax[static_cast<std::size_t>(s)], cur);
                break;
            case StageKind::Conv:
                if (s == first_conv) {
                    long d = 0;
                    cur = dtd_zB(input, st.conv, cur, dom, &d);
                    if (drops) *drops += d;
                } else {
                    cur = lrp_alphabeta_conv(input, st.conv, cur, settings.alpha,
                                             settings.beta);
                }
                break;
        }
    }
    return cur;
}

InputDomain resolve_domain(const PrototypeModel& model, const ExplainSettings& settings) {
    if (settings.domain.low.empty() && settings.domain.high.empty())
        return InputDomain::unit(model.input_c);
    return settings.domain;
}

void check_trace_for_explain(const ForwardTrace& trace) {
    if (trace.level != TraceLevel::Explain)
        throw ConfigError("composite relevance needs an explain-level trace");
}

} // namespace

RelevanceMap prp_map_from_trace(const PrototypeModel& model, const Tensor& image,
                                const ForwardTrace& trace, int m,
                                const ExplainSettings& settings) {
    model.validate();
    settings.validate();
    check_trace_for_explain(trace);
    if (m < 0 || m >= model.num_prototypes())
        throw ConfigError("prototype index out of range");
    (void)image;
    const InputDomain dom = resolve_domain(model, settings);

    RelevanceMap act = relevance_similarity_to_activation(trace, m);
    RelevanceMap conv = relevance_activation_to_conv(trace, m, act, settings.eps);
    RelevanceMap out;
    out.prototype_index = m;
    out.stage = RelevanceStage::Input;
    out.dropped_terms = 0;
    out.values = backprop_conv_stack(model, trace, std::move(conv.values), settings, dom,
                                     &out.dropped_terms);
    return out;
}

RelevanceMap prp_map(const PrototypeModel& model, const Tensor& image, int m,
                     const ExplainSettings& settings) {
    const ForwardTrace trace = forward(model, image, TraceLevel::Explain);
    return prp_map_from_trace(model, image, trace, m, settings);
}

RelevanceMap protopnet_heatmap(const PrototypeModel& model, const Tensor& image, int m) {
    const ForwardTrace trace = forward(model, image, TraceLevel::Scores);
    if (m < 0 || m >= model.num_prototypes())
        throw ConfigError("prototype index out of range");
    const int fh = trace.act_maps.dim(1), fw = trace.act_maps.dim(2);
    Tensor act({fh, fw});
    for (int i = 0; i < fh; ++i)
        for (int j = 0; j < fw; ++j) act.at(i, j) = trace.act_maps.at(m, i, j);
    RelevanceMap out;
    out.prototype_index = m;
    out.stage = RelevanceStage::Input;
    out.values = bilinear_upsample(act, model.input_h, model.input_w);
    return out;
}

RelevanceMap spray_lrp_map_from_trace(const PrototypeModel& model, const Tensor& image,
                                      const ForwardTrace& trace, int target_class,
                                      const ExplainSettings& settings) {
    model.validate();
    settings.validate();
    check_trace_for_explain(trace);
    if (target_class < 0 || target_class >= model.num_classes)
        throw ConfigError("target class out of range");
    (void)image;
    const InputDomain dom = resolve_domain(model, settings);

    // class score -> similarity layer with the epsilon rule
    Tensor rel_out({model.num_classes});
    rel_out.at(target_class) = trace.logits.at(target_class);
    const Tensor rel_sim = lrp_epsilon(trace.similarities, model.last_weight, model.last_bias,
                                       rel_out, settings.eps);

    // per-prototype winner routing + channel redistribution, combined at the
    // conv output
    const int n = model.num_prototypes();
    const int depth = model.feature_depth();
    const int fh = trace.act_maps.dim(1), fw = trace.act_maps.dim(2);
    Tensor conv_rel({depth, fh, fw});
    for (int m = 0; m < n; ++m) {
        const double r = rel_sim.at(m);
        if (r == 0.0) continue;
        const int cell = trace.sim_argmax[static_cast<std::size_t>(m)];
        const int i = cell / fw, j = cell % fw;
        double denom = static_cast<double>(settings.eps);
        for (int c = 0; c < depth; ++c)
            denom += 1.0 /
                     (static_cast<double>(trace.dist_chan.at(m, c, i, j)) + settings.eps);
        for (int c = 0; c < depth; ++c) {
            const double gamma =
                1.0 / (static_cast<double>(trace.dist_chan.at(m, c, i, j)) + settings.eps);
            conv_rel.at(c, i, j) += static_cast<float>(gamma / denom * r);
        }
    }

    RelevanceMap out;
    out.class_index = target_class;
    out.stage = RelevanceStage::Input;
    out.dropped_terms = 0;
    out.values = backprop_conv_stack(model, trace, std::move(conv_rel), settings, dom,
                                     &out.dropped_terms);
    return out;
}

RelevanceMap spray_lrp_map(const PrototypeModel& model, const Tensor& image, int target_class,
                           const ExplainSettings& settings) {
    const ForwardTrace trace = forward(model, image, TraceLevel::Explain);
    return spray_lrp_map_from_trace(model, image, trace, target_class, settings);
}

Tensor channel_sum(const Tensor& map) {
    if (map.rank() == 2) return map;
    if (map.rank() != 3) throw ConfigError("channel_sum expects rank 2 or 3");
    const int c = map.dim(0), h = map.dim(1), w = map.dim(2);
    Tensor out({h, w});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) out.at(y, x) += map.at(ch, y, x);
    return out;
}

} // namespace protoprp
