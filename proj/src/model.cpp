#include "protoprp/model.hpp"

#include "protoprp/errors.hpp"
#include "protoprp/ptns.hpp"
#include "protoprp/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <numeric>

namespace protoprp {

using nlohmann::json;

void PrototypeModel::feature_dims(int& depth, int& h, int& w) const {
    int c = input_c;
    h = input_h;
    w = input_w;
    for (std::size_t s = 0; s < backbone.size(); ++s) {
        const Stage& st = backbone[s];
        switch (st.kind) {
            case StageKind::Conv: {
                st.conv.validate();
                if (st.conv.in_channels() != c)
                    throw ConfigError("backbone stage " + std::to_string(s) + " expects " +
                                      std::to_string(st.conv.in_channels()) +
                                      " channels, gets " + std::to_string(c));
                const int k_h = st.conv.weight.dim(2), k_w = st.conv.weight.dim(3);
                h = (h + 2 * st.conv.padding - k_h) / st.conv.stride + 1;
                w = (w + 2 * st.conv.padding - k_w) / st.conv.stride + 1;
                c = st.conv.out_channels();
                break;
            }
            case StageKind::Relu:
                break;
            case StageKind::Pool:
                if (st.pool_window < 1 || st.pool_stride < 1)
                    throw ConfigError("pool stage " + std::to_string(s) + " misconfigured");
                h = (h - st.pool_window) / st.pool_stride + 1;
                w = (w - st.pool_window) / st.pool_stride + 1;
                break;
        }
        if (h < 1 || w < 1)
            throw ConfigError("backbone stage " + std::to_string(s) +
                              " shrinks the feature map to nothing");
    }
    depth = c;
}

void PrototypeModel::validate() const {
    if (num_classes < 2) throw ConfigError("model needs at least 2 classes");
    if (backbone.empty()) throw ConfigError("model backbone is empty");
    if (eps <= 0.0f) throw ConfigError("model eps must be positive");
    if (prototypes.rank() != 2)
        throw ConfigError("prototypes must be [n, depth], got " + prototypes.shape_str());
    int depth = 0, h = 0, w = 0;
    feature_dims(depth, h, w);
    if (prototypes.dim(1) != depth)
        throw ConfigError("prototype depth " + std::to_string(prototypes.dim(1)) +
                          " != backbone output depth " + std::to_string(depth));
    const int n = prototypes.dim(0);
    if (static_cast<int>(class_of_prototype.size()) != n)
        throw ConfigError("class_of_prototype length != prototype count");
    for (int c : class_of_prototype)
        if (c < 0 || c >= num_classes)
            throw ConfigError("class_of_prototype entry out of range");
    if (last_weight.rank() != 2 || last_weight.dim(0) != num_classes ||
        last_weight.dim(1) != n)
        throw ConfigError("last_weight must be [classes, n], got " + last_weight.shape_str());
    if (last_bias.rank() != 1 || last_bias.dim(0) != num_classes)
        throw ConfigError("last_bias must be [classes], got " + last_bias.shape_str());
}

PrototypeModel make_default_model(int num_classes, int protos_per_class, int input_size,
                                  const std::vector<int>& conv_channels,
                                  std::uint64_t seed) {
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (protos_per_class < 1) throw ConfigError("protos_per_class must be >= 1");
    if (conv_channels.empty()) throw ConfigError("conv_channels must be non-empty");
    if (input_size < (1 << (conv_channels.size() - 1)))
        throw ConfigError("input_size too small for the pooling pyramid");

    PrototypeModel m;
    m.input_c = 3;
    m.input_h = m.input_w = input_size;
    m.num_classes = num_classes;

    Rng rng(sub_seed(seed, "model-init"));
    int in_c = 3;
    for (std::size_t s = 0; s < conv_channels.size(); ++s) {
        const int out_c = conv_channels[s];
        if (out_c < 1) throw ConfigError("conv channel count must be positive");
        if (s > 0) { // 2x2 max-pool between conv+ReLU stages
            Stage pool;
            pool.kind = StageKind::Pool;
            pool.pool_window = 2;
            pool.pool_stride = 2;
            m.backbone.push_back(pool);
        }
        Stage conv;
        conv.kind = StageKind::Conv;
        conv.conv.weight = Tensor({out_c, in_c, 3, 3});
        conv.conv.bias = Tensor({out_c});
        conv.conv.stride = 1;
        conv.conv.padding = 1;
        const double scale = std::sqrt(2.0 / (in_c * 9.0));
        for (float& v : conv.conv.weight.data)
            v = static_cast<float>(scale * rng.normal());
        m.backbone.push_back(std::move(conv));
        Stage re;
        re.kind = StageKind::Relu;
        m.backbone.push_back(re);
        in_c = out_c;
    }

    const int depth = conv_channels.back();
    const int n = num_classes * protos_per_class;
    m.prototypes = Tensor({n, depth});
    for (float& v : m.prototypes.data) v = rng.uniform_float();
    m.class_of_prototype.resize(n);
    for (int i = 0; i < n; ++i) m.class_of_prototype[i] = i / protos_per_class;

    m.last_weight = Tensor({num_classes, n});
    for (int k = 0; k < num_classes; ++k)
        for (int i = 0; i < n; ++i)
            m.last_weight.at(k, i) = (m.class_of_prototype[i] == k) ? 1.0f : -0.5f;
    m.last_bias = Tensor({num_classes});
    m.validate();
    return m;
}

Tensor activation_map(const Tensor& zpatches, const Tensor& prototype, float eps) {
    if (eps <= 0.0f) throw ConfigError("activation_map eps must be positive");
    if (zpatches.rank() != 3)
        throw ConfigError("activation_map expects [depth,H,W] patches");
    if (prototype.rank() != 1 || prototype.dim(0) != zpatches.dim(0))
        throw ConfigError("prototype depth " + prototype.shape_str() +
                          " != patch depth " + zpatches.shape_str());
    const int d = zpatches.dim(0), h = zpatches.dim(1), w = zpatches.dim(2);
    Tensor out({h, w});
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            double dist = 0.0;
            for (int c = 0; c < d; ++c) {
                const double diff = static_cast<double>(zpatches.at(c, i, j)) - prototype.at(c);
                dist += diff * diff;
            }
            out.at(i, j) = static_cast<float>(std::log((dist + 1.0) / (dist + eps)));
        }
    }
    verify_finite(out, "activation_map");
    return out;
}

ForwardTrace forward(const PrototypeModel& model, const Tensor& image, TraceLevel level) {
    model.validate();
    if (image.rank() != 3 || image.dim(0) != model.input_c ||
        image.dim(1) != model.input_h || image.dim(2) != model.input_w)
        throw ConfigError("image shape " + image.shape_str() + " does not match model input");

    ForwardTrace tr;
    tr.level = level;
    const bool keep = level != TraceLevel::Scores;
    if (keep) tr.pool_argmax.resize(model.backbone.size());

    Tensor cur = image;
    for (std::size_t s = 0; s < model.backbone.size(); ++s) {
        const Stage& st = model.backbone[s];
        if (keep) tr.stage_input.push_back(cur);
        switch (st.kind) {
            case StageKind::Conv:
                cur = conv2d_forward(cur, st.conv);
                break;
            case StageKind::Relu:
                cur = relu(cur);
                break;
            case StageKind::Pool: {
                auto [pooled, am] = maxpool2d_forward(cur, st.pool_window, st.pool_stride);
                cur = std::move(pooled);
                if (keep) tr.pool_argmax[s] = std::move(am);
                break;
            }
        }
    }
    tr.features = std::move(cur);

    const int n = model.num_prototypes();
    const int depth = model.feature_depth();
    const int fh = tr.features.dim(1), fw = tr.features.dim(2);
    tr.act_maps = Tensor({n, fh, fw});
    tr.similarities = Tensor({n});
    tr.sim_argmax.assign(n, 0);
    if (keep) tr.dist = Tensor({n, fh, fw});
    if (level == TraceLevel::Explain) tr.dist_chan = Tensor({n, depth, fh, fw});

    const double eps = model.eps;
    for (int m = 0; m < n; ++m) {
        float best = -std::numeric_limits<float>::infinity();
        int best_cell = 0;
        for (int i = 0; i < fh; ++i) {
            for (int j = 0; j < fw; ++j) {
                double dist = 0.0;
                for (int c = 0; c < depth; ++c) {
                    const double diff =
                        static_cast<double>(tr.features.at(c, i, j)) - model.prototypes.at(m, c);
                    const double sq = diff * diff;
                    dist += sq;
                    if (level == TraceLevel::Explain)
                        tr.dist_chan.at(m, c, i, j) = static_cast<float>(sq);
                }
                if (keep) tr.dist.at(m, i, j) = static_cast<float>(dist);
                const auto a = static_cast<float>(std::log((dist + 1.0) / (dist + eps)));
                tr.act_maps.at(m, i, j) = a;
                if (a > best) { // first max in row-major order wins
                    best = a;
                    best_cell = i * fw + j;
                }
            }
        }
        tr.similarities.at(m) = best;
        tr.sim_argmax[m] = best_cell;
    }
    verify_finite(tr.act_maps, "forward activation maps");
    tr.logits = linear_forward(tr.similarities, model.last_weight, model.last_bias);
    return tr;
}

void init_prototypes_from_patches(PrototypeModel& model, const LabeledDataset& ds,
                                  std::uint64_t seed) {
    model.validate();
    ds.validate();
    if (ds.count() == 0) throw ConfigError("prototype init on empty dataset");
    const int n = model.num_prototypes();
    const int depth = model.feature_depth();

    // one patch-latent pool per class
    std::vector<std::vector<float>> pool(static_cast<std::size_t>(model.num_classes));
    for (std::size_t i = 0; i < ds.count(); ++i) {
        const ForwardTrace tr = forward(model, ds.images[i], TraceLevel::Scores);
        const int fh = tr.features.dim(1), fw = tr.features.dim(2);
        auto& dst = pool[static_cast<std::size_t>(ds.labels[i])];
        for (int y = 0; y < fh; ++y)
            for (int x = 0; x < fw; ++x)
                for (int c = 0; c < depth; ++c) dst.push_back(tr.features.at(c, y, x));
    }

    for (int k = 0; k < model.num_classes; ++k) {
        std::vector<int> members;
        for (int m = 0; m < n; ++m)
            if (model.class_of_prototype[static_cast<std::size_t>(m)] == k) members.push_back(m);
        if (members.empty()) continue;
        const auto& pts = pool[static_cast<std::size_t>(k)];
        const std::size_t cnt = pts.size() / static_cast<std::size_t>(depth);
        if (cnt == 0)
            throw ConfigError("prototype init: no training patches for class " +
                              std::to_string(k));

        // k-means++ style spread: first pick uniform, later picks weighted by
        // squared distance to the nearest already-chosen start
        Rng rng(sub_seed(seed, "class", static_cast<std::uint64_t>(k)));
        std::vector<double> best_d(cnt, std::numeric_limits<double>::infinity());
        std::size_t pick = rng.uniform_int(static_cast<std::uint64_t>(cnt));
        for (std::size_t slot = 0; slot < members.size(); ++slot) {
            const float* chosen = pts.data() + pick * static_cast<std::size_t>(depth);
            // land near the patch, not on it: an exact hit pins the log
            // similarity at its maximum and saturates the head from step one
            for (int c = 0; c < depth; ++c)
                model.prototypes.at(members[slot], c) =
                    chosen[c] + static_cast<float>(rng.uniform(-0.05, 0.05));
            if (slot + 1 == members.size()) break;
            double total = 0.0;
            for (std::size_t p = 0; p < cnt; ++p) {
                double d = 0.0;
                const float* v = pts.data() + p * static_cast<std::size_t>(depth);
                for (int c = 0; c < depth; ++c) {
                    const double diff = static_cast<double>(v[c]) - chosen[c];
                    d += diff * diff;
                }
                best_d[p] = std::min(best_d[p], d);
                total += best_d[p];
            }
            if (total > 0.0) {
                const double target = rng.uniform() * total;
                double acc = 0.0;
                pick = cnt - 1;
                for (std::size_t p = 0; p < cnt; ++p) {
                    acc += best_d[p];
                    if (acc >= target) { pick = p; break; }
                }
            } else {
                pick = rng.uniform_int(static_cast<std::uint64_t>(cnt));
            }
        }
    }
    verify_finite(model.prototypes, "initialized prototypes");
}

void LossWeights::validate() const {
    if (!std::isfinite(lambda_clst) || !std::isfinite(lambda_sep))
        throw ConfigError("loss weights must be finite");
    if (lambda_clst < 0.0f) throw ConfigError("lambda_clst must be >= 0");
}

namespace {

void softmax_double(const Tensor& logits, std::vector<double>& out) {
    const int k = logits.dim(0);
    out.resize(k);
    double mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < k; ++i) mx = std::max(mx, static_cast<double>(logits.at(i)));
    double sum = 0.0;
    for (int i = 0; i < k; ++i) {
        out[i] = std::exp(static_cast<double>(logits.at(i)) - mx);
        sum += out[i];
    }
    for (int i = 0; i < k; ++i) out[i] /= sum;
}

double cross_entropy(const Tensor& logits, int label) {
    const int k = logits.dim(0);
    double mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < k; ++i) mx = std::max(mx, static_cast<double>(logits.at(i)));
    double sum = 0.0;
    for (int i = 0; i < k; ++i) sum += std::exp(static_cast<double>(logits.at(i)) - mx);
    return std::log(sum) + mx - static_cast<double>(logits.at(label));
}

struct MinCell {
    int m = -1;
    int cell = 0;
    double d = std::numeric_limits<double>::infinity();
};

// First-encountered strict minimum over d[m, cell] restricted by class match.
MinCell min_distance_cell(const PrototypeModel& model, const ForwardTrace& tr, int label,
                          bool own_class) {
    MinCell best;
    const int n = model.num_prototypes();
    const int cells = tr.dist.dim(1) * tr.dist.dim(2);
    for (int m = 0; m < n; ++m) {
        if ((model.class_of_prototype[m] == label) != own_class) continue;
        for (int cell = 0; cell < cells; ++cell) {
            const double d = tr.dist.data[static_cast<std::size_t>(m) * cells + cell];
            if (d < best.d) {
                best.m = m;
                best.cell = cell;
                best.d = d;
            }
        }
    }
    return best;
}

struct ImageLoss {
    double ce = 0, cluster = 0, separation = 0, total = 0;
    MinCell clst, sep;
    int label = 0;
    int predicted = 0;
};

ImageLoss image_loss(const PrototypeModel& model, const ForwardTrace& tr, int label,
                     const LossWeights& w) {
    ImageLoss out;
    out.label = label;
    out.ce = cross_entropy(tr.logits, label);
    out.clst = min_distance_cell(model, tr, label, true);
    out.sep = min_distance_cell(model, tr, label, false);
    if (out.clst.m < 0)
        throw ConfigError("class " + std::to_string(label) + " has no prototype");
    out.cluster = out.clst.d;
    out.separation = out.sep.m >= 0 ? -out.sep.d : 0.0;
    out.total = out.ce + w.lambda_clst * out.cluster + w.lambda_sep * out.separation;
    int arg = 0;
    for (int k = 1; k < tr.logits.dim(0); ++k)
        if (tr.logits.at(k) > tr.logits.at(arg)) arg = k;
    out.predicted = arg;
    return out;
}

struct Grads {
    std::vector<Tensor> conv_w, conv_b; // one slot per backbone stage
    Tensor proto;

    static Grads like(const PrototypeModel& m) {
        Grads g;
        g.conv_w.resize(m.backbone.size());
        g.conv_b.resize(m.backbone.size());
        for (std::size_t s = 0; s < m.backbone.size(); ++s)
            if (m.backbone[s].kind == StageKind::Conv) {
                g.conv_w[s] = Tensor(m.backbone[s].conv.weight.shape);
                g.conv_b[s] = Tensor(m.backbone[s].conv.bias.shape);
            }
        g.proto = Tensor(m.prototypes.shape);
        return g;
    }

    void zero() {
        for (auto& t : conv_w) std::fill(t.data.begin(), t.data.end(), 0.0f);
        for (auto& t : conv_b) std::fill(t.data.begin(), t.data.end(), 0.0f);
        std::fill(proto.data.begin(), proto.data.end(), 0.0f);
    }
};

void conv_backward(const ConvLayer& layer, const Tensor& input,
                   const std::vector<double>& gout, const std::vector<int>& out_shape,
                   Tensor& gw, Tensor& gb, std::vector<double>& gin, float scale) {
    const int in_c = input.dim(0), in_h = input.dim(1), in_w = input.dim(2);
    const int out_c = out_shape[0], out_h = out_shape[1], out_w = out_shape[2];
    const int k_h = layer.weight.dim(2), k_w = layer.weight.dim(3);
    const int s = layer.stride, p = layer.padding;
    gin.assign(input.size(), 0.0);
    for (int oc = 0; oc < out_c; ++oc) {
        for (int oh = 0; oh < out_h; ++oh) {
            for (int ow = 0; ow < out_w; ++ow) {
                const double g = gout[(static_cast<std::size_t>(oc) * out_h + oh) * out_w + ow];
                if (g == 0.0) continue;
                gb.at(oc) += static_cast<float>(scale * g);
                const int h0 = oh * s - p, w0 = ow * s - p;
                for (int ic = 0; ic < in_c; ++ic) {
                    for (int kh = 0; kh < k_h; ++kh) {
                        const int ih = h0 + kh;
                        if (ih < 0 || ih >= in_h) continue;
                        for (int kw = 0; kw < k_w; ++kw) {
                            const int iw = w0 + kw;
                            if (iw < 0 || iw >= in_w) continue;
                            const std::size_t in_idx =
                                (static_cast<std::size_t>(ic) * in_h + ih) * in_w + iw;
                            gw.at(oc, ic, kh, kw) +=
                                static_cast<float>(scale * g * input.data[in_idx]);
                            gin[in_idx] += g * layer.weight.at(oc, ic, kh, kw);
                        }
                    }
                }
            }
        }
    }
}

// Gradients of the per-image loss w.r.t. backbone parameters and prototypes
// (last layer held fixed), accumulated into `g` with weight `scale`.
void backward_image(const PrototypeModel& model, const ForwardTrace& tr,
                    const ImageLoss& loss, const LossWeights& w, float scale, Grads& g) {
    const int n = model.num_prototypes();
    const int depth = model.feature_depth();
    const int fh = tr.features.dim(1), fw = tr.features.dim(2);
    const int cells = fh * fw;
    const double eps = model.eps;

    std::vector<double> dlogit;
    softmax_double(tr.logits, dlogit);
    dlogit[static_cast<std::size_t>(loss.label)] -= 1.0;

    // d(loss)/d(squared distance) per prototype and cell
    std::vector<double> gd(static_cast<std::size_t>(n) * cells, 0.0);
    for (int m = 0; m < n; ++m) {
        double gs = 0.0;
        for (int k = 0; k < model.num_classes; ++k)
            gs += static_cast<double>(model.last_weight.at(k, m)) * dlogit[k];
        const int cell = tr.sim_argmax[m];
        const double d = tr.dist.data[static_cast<std::size_t>(m) * cells + cell];
        gd[static_cast<std::size_t>(m) * cells + cell] +=
            gs * (1.0 / (d + 1.0) - 1.0 / (d + eps));
    }
    gd[static_cast<std::size_t>(loss.clst.m) * cells + loss.clst.cell] += w.lambda_clst;
    if (loss.sep.m >= 0)
        gd[static_cast<std::size_t>(loss.sep.m) * cells + loss.sep.cell] -= w.lambda_sep;

    // through the distances into features and prototypes
    std::vector<double> gz(tr.features.size(), 0.0);
    for (int m = 0; m < n; ++m) {
        for (int cell = 0; cell < cells; ++cell) {
            const double gdv = gd[static_cast<std::size_t>(m) * cells + cell];
            if (gdv == 0.0) continue;
            const int i = cell / fw, j = cell % fw;
            for (int c = 0; c < depth; ++c) {
                const double diff =
                    static_cast<double>(tr.features.at(c, i, j)) - model.prototypes.at(m, c);
                gz[(static_cast<std::size_t>(c) * fh + i) * fw + j] += gdv * 2.0 * diff;
                g.proto.at(m, c) += static_cast<float>(-scale * gdv * 2.0 * diff);
            }
        }
    }

    // backbone, last stage first
    std::vector<double> grad = std::move(gz);
    std::vector<int> grad_shape = tr.features.shape;
    for (int s = static_cast<int>(model.backbone.size()) - 1; s >= 0; --s) {
        const Stage& st = model.backbone[s];
        const Tensor& input = tr.stage_input[static_cast<std::size_t>(s)];
        switch (st.kind) {
            case StageKind::Relu: {
                for (std::size_t i = 0; i < grad.size(); ++i)
                    if (input.data[i] <= 0.0f) grad[i] = 0.0;
                break;
            }
            case StageKind::Pool: {
                const PoolArgmax& am = tr.pool_argmax[static_cast<std::size_t>(s)];
                std::vector<double> gin(input.size(), 0.0);
                for (std::size_t o = 0; o < am.winner.size(); ++o)
                    gin[static_cast<std::size_t>(am.winner[o])] += grad[o];
                grad = std::move(gin);
                break;
            }
            case StageKind::Conv: {
                std::vector<double> gin;
                conv_backward(st.conv, input, grad, grad_shape,
                              g.conv_w[static_cast<std::size_t>(s)],
                              g.conv_b[static_cast<std::size_t>(s)], gin, scale);
                grad = std::move(gin);
                break;
            }
        }
        grad_shape = input.shape;
    }
}

void sgd_step(Tensor& param, const Tensor& grad, Tensor& vel, float lr, float momentum) {
    for (std::size_t i = 0; i < param.data.size(); ++i) {
        vel.data[i] = momentum * vel.data[i] + grad.data[i];
        param.data[i] -= lr * vel.data[i];
    }
}

} // namespace

LossParts loss_total(const PrototypeModel& model, const LabeledDataset& batch,
                     const LossWeights& weights) {
    model.validate();
    weights.validate();
    if (batch.count() == 0) throw ConfigError("loss_total on empty batch");
    for (int l : batch.labels)
        if (l < 0 || l >= model.num_classes)
            throw ConfigError("label " + std::to_string(l) + " outside model class range");
    LossParts parts;
    for (std::size_t i = 0; i < batch.count(); ++i) {
        const ForwardTrace tr = forward(model, batch.images[i], TraceLevel::Train);
        const ImageLoss il = image_loss(model, tr, batch.labels[i], weights);
        parts.ce += il.ce;
        parts.cluster += il.cluster;
        parts.separation += il.separation;
    }
    const auto n = static_cast<double>(batch.count());
    parts.ce /= n;
    parts.cluster /= n;
    parts.separation /= n;
    parts.total = parts.ce + weights.lambda_clst * parts.cluster +
                  weights.lambda_sep * parts.separation;
    if (!std::isfinite(parts.total)) throw NumericError("loss_total is not finite");
    return parts;
}

void TrainSchedule::validate() const {
    if (total_epochs < 0) throw ConfigError("total_epochs must be >= 0");
    if (push_every < 1) throw ConfigError("push_every must be >= 1");
    if (total_epochs > 0 && total_epochs % push_every != 0)
        throw ConfigError("push_every must divide total_epochs");
    if (last_layer_epochs_after_push < 0)
        throw ConfigError("last_layer_epochs_after_push must be >= 0");
    if (!(lr >= 0.0f) || !std::isfinite(lr)) throw ConfigError("lr must be >= 0");
    if (!(last_layer_lr >= 0.0f) || !std::isfinite(last_layer_lr))
        throw ConfigError("last_layer_lr must be >= 0");
    if (!(lr_decay > 0.0f)) throw ConfigError("lr_decay must be > 0");
    if (lr_decay_every < 1) throw ConfigError("lr_decay_every must be >= 1");
    if (momentum < 0.0f || momentum >= 1.0f) throw ConfigError("momentum must be in [0,1)");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
}

TrainReport train(PrototypeModel& model, const LabeledDataset& ds,
                  const TrainSchedule& sched, const LossWeights& weights) {
    sched.validate();
    weights.validate();
    model.validate();
    ds.validate();
    if (ds.count() == 0) throw ConfigError("training set is empty");
    for (int l : ds.labels)
        if (l >= model.num_classes)
            throw ConfigError("dataset label exceeds model class count");

    TrainReport report;
    if (sched.total_epochs == 0) return report;

    Grads grads = Grads::like(model);
    Grads vel = Grads::like(model);
    const auto count = ds.count();
    std::vector<int> order(count);
    std::iota(order.begin(), order.end(), 0);
    int push_count = 0;

    for (int epoch = 1; epoch <= sched.total_epochs; ++epoch) {
        const float lr_now = static_cast<float>(
            sched.lr * std::pow(sched.lr_decay, (epoch - 1) / sched.lr_decay_every));
        Rng rng(sub_seed(sched.seed, "epoch-order", static_cast<std::uint64_t>(epoch)));
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order.data(), order.size());

        double sum_ce = 0, sum_clst = 0, sum_sep = 0;
        std::size_t correct = 0;
        try {
            for (std::size_t start = 0; start < count; start += sched.batch_size) {
                const std::size_t stop = std::min(count, start + sched.batch_size);
                const float scale = 1.0f / static_cast<float>(stop - start);
                grads.zero();
                for (std::size_t bi = start; bi < stop; ++bi) {
                    const int idx = order[bi];
                    const ForwardTrace tr =
                        forward(model, ds.images[static_cast<std::size_t>(idx)],
                                TraceLevel::Train);
                    const int label = ds.labels[static_cast<std::size_t>(idx)];
                    const ImageLoss il = image_loss(model, tr, label, weights);
                    if (!std::isfinite(il.total))
                        throw NumericError("loss is not finite");
                    sum_ce += il.ce;
                    sum_clst += il.cluster;
                    sum_sep += il.separation;
                    if (il.predicted == label) ++correct;
                    backward_image(model, tr, il, weights, scale, grads);
                }
                if (lr_now != 0.0f) {
                    for (std::size_t s = 0; s < model.backbone.size(); ++s)
                        if (model.backbone[s].kind == StageKind::Conv) {
                            sgd_step(model.backbone[s].conv.weight, grads.conv_w[s],
                                     vel.conv_w[s], lr_now, sched.momentum);
                            sgd_step(model.backbone[s].conv.bias, grads.conv_b[s],
                                     vel.conv_b[s], lr_now, sched.momentum);
                        }
                    sgd_step(model.prototypes, grads.proto, vel.proto, lr_now,
                             sched.momentum);
                }
            }
        } catch (const NumericError& e) {
            throw NumericError("training diverged at epoch " + std::to_string(epoch) + ": " +
                               e.what());
        }

        EpochStats st;
        st.epoch = epoch;
        st.lr = lr_now;
        st.ce = sum_ce / static_cast<double>(count);
        st.cluster = sum_clst / static_cast<double>(count);
        st.separation = sum_sep / static_cast<double>(count);
        st.total = st.ce + weights.lambda_clst * st.cluster + weights.lambda_sep * st.separation;
        st.train_acc = static_cast<double>(correct) / static_cast<double>(count);
        report.epochs.push_back(st);

        if (epoch % sched.push_every == 0) {
            PushRecord rec = push_prototypes(model, ds);
            rec.epoch = epoch;
            report.pushes.push_back(std::move(rec));
            // prototypes jumped; their momentum no longer points anywhere useful
            std::fill(vel.proto.data.begin(), vel.proto.data.end(), 0.0f);
            ++push_count;
            train_last_layer(model, ds, sched.last_layer_epochs_after_push,
                             sched.last_layer_lr, sched.batch_size,
                             sub_seed(sched.seed, "last-layer",
                                      static_cast<std::uint64_t>(push_count)),
                             &report.last_layer_epochs);
        }
    }
    return report;
}

PushRecord push_prototypes(PrototypeModel& model, const LabeledDataset& ds) {
    model.validate();
    ds.validate();
    if (ds.count() == 0) throw ConfigError("push on empty dataset");

    std::vector<Tensor> feats(ds.count());
    for (std::size_t i = 0; i < ds.count(); ++i)
        feats[i] = forward(model, ds.images[i], TraceLevel::Scores).features;

    const int n = model.num_prototypes();
    const int depth = model.feature_depth();
    PushRecord rec;
    Tensor new_protos = model.prototypes;
    for (int m = 0; m < n; ++m) {
        const int cls = model.class_of_prototype[m];
        PushEntry best;
        best.prototype = m;
        best.distance = std::numeric_limits<double>::infinity();
        for (std::size_t img = 0; img < ds.count(); ++img) {
            if (ds.labels[img] != cls) continue;
            const Tensor& z = feats[img];
            for (int i = 0; i < z.dim(1); ++i) {
                for (int j = 0; j < z.dim(2); ++j) {
                    double d = 0.0;
                    for (int c = 0; c < depth; ++c) {
                        const double diff =
                            static_cast<double>(z.at(c, i, j)) - model.prototypes.at(m, c);
                        d += diff * diff;
                    }
                    if (d < best.distance) { // ties: lower image id, then row-major cell
                        best.distance = d;
                        best.image_id = static_cast<int>(img);
                        best.cell_i = i;
                        best.cell_j = j;
                    }
                }
            }
        }
        if (!std::isfinite(best.distance))
            throw ConfigError("class " + std::to_string(cls) + " has no training images");
        const Tensor& src = feats[static_cast<std::size_t>(best.image_id)];
        for (int c = 0; c < depth; ++c)
            new_protos.at(m, c) = src.at(c, best.cell_i, best.cell_j);
        rec.entries.push_back(best);
    }
    model.prototypes = std::move(new_protos);
    return rec;
}

void train_last_layer(PrototypeModel& model, const LabeledDataset& ds, int epochs,
                      float lr, int batch_size, std::uint64_t seed,
                      std::vector<EpochStats>* log) {
    model.validate();
    ds.validate();
    if (epochs < 0) throw ConfigError("last-layer epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (ds.count() == 0) throw ConfigError("last-layer refit on empty dataset");
    const int n = model.num_prototypes();
    const int classes = model.num_classes;

    // backbone and prototypes are frozen: similarities are fixed per image
    std::vector<float> sims(ds.count() * static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < ds.count(); ++i) {
        const ForwardTrace tr = forward(model, ds.images[i], TraceLevel::Scores);
        std::copy(tr.similarities.data.begin(), tr.similarities.data.end(),
                  sims.begin() + static_cast<std::ptrdiff_t>(i * n));
    }

    std::vector<int> order(ds.count());
    std::vector<double> logits(classes), soft(classes);
    std::vector<float> gw(static_cast<std::size_t>(classes) * n), gb(classes);
    for (int epoch = 1; epoch <= epochs; ++epoch) {
        Rng rng(sub_seed(seed, "ll-order", static_cast<std::uint64_t>(epoch)));
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order.data(), order.size());
        double sum_ce = 0;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < ds.count(); start += batch_size) {
            const std::size_t stop = std::min(ds.count(), start + batch_size);
            const double scale = 1.0 / static_cast<double>(stop - start);
            std::fill(gw.begin(), gw.end(), 0.0f);
            std::fill(gb.begin(), gb.end(), 0.0f);
            for (std::size_t bi = start; bi < stop; ++bi) {
                const auto idx = static_cast<std::size_t>(order[bi]);
                const float* s = sims.data() + idx * n;
                double mx = -std::numeric_limits<double>::infinity();
                for (int k = 0; k < classes; ++k) {
                    double acc = model.last_bias.at(k);
                    for (int m = 0; m < n; ++m)
                        acc += static_cast<double>(model.last_weight.at(k, m)) * s[m];
                    logits[k] = acc;
                    mx = std::max(mx, acc);
                }
                double z = 0.0;
                for (int k = 0; k < classes; ++k) {
                    soft[k] = std::exp(logits[k] - mx);
                    z += soft[k];
                }
                const int label = ds.labels[idx];
                sum_ce += std::log(z) + mx - logits[label];
                int arg = 0;
                for (int k = 1; k < classes; ++k)
                    if (logits[k] > logits[arg]) arg = k;
                if (arg == label) ++correct;
                for (int k = 0; k < classes; ++k) {
                    const double dl = (soft[k] / z - (k == label ? 1.0 : 0.0)) * scale;
                    gb[static_cast<std::size_t>(k)] += static_cast<float>(dl);
                    for (int m = 0; m < n; ++m)
                        gw[static_cast<std::size_t>(k) * n + m] +=
                            static_cast<float>(dl * s[m]);
                }
            }
            if (lr != 0.0f) {
                for (std::size_t i = 0; i < gw.size(); ++i)
                    model.last_weight.data[i] -= lr * gw[i];
                for (int k = 0; k < classes; ++k)
                    model.last_bias.at(k) -= lr * gb[static_cast<std::size_t>(k)];
            }
        }
        if (!std::isfinite(sum_ce))
            throw NumericError("last-layer refit diverged at epoch " + std::to_string(epoch));
        if (log) {
            EpochStats st;
            st.epoch = epoch;
            st.lr = lr;
            st.ce = sum_ce / static_cast<double>(ds.count());
            st.total = st.ce;
            st.train_acc = static_cast<double>(correct) / static_cast<double>(ds.count());
            log->push_back(st);
        }
    }
}

PrototypeModel prune_prototypes(const PrototypeModel& model, const std::vector<int>& indices,
                                bool retrain_last_layer, const LabeledDataset& ds,
                                int retrain_epochs, float retrain_lr, std::uint64_t seed) {
    model.validate();
    const int n = model.num_prototypes();
    std::vector<char> remove(static_cast<std::size_t>(n), 0);
    for (int idx : indices) {
        if (idx < 0 || idx >= n)
            throw ConfigError("prune index " + std::to_string(idx) + " out of range");
        remove[static_cast<std::size_t>(idx)] = 1;
    }
    std::vector<int> class_left(static_cast<std::size_t>(model.num_classes), 0);
    std::vector<int> class_had(static_cast<std::size_t>(model.num_classes), 0);
    for (int m = 0; m < n; ++m) {
        ++class_had[static_cast<std::size_t>(model.class_of_prototype[m])];
        if (!remove[static_cast<std::size_t>(m)])
            ++class_left[static_cast<std::size_t>(model.class_of_prototype[m])];
    }
    for (int k = 0; k < model.num_classes; ++k)
        if (class_had[static_cast<std::size_t>(k)] > 0 &&
            class_left[static_cast<std::size_t>(k)] == 0)
            throw ConfigError("pruning would remove every prototype of class " +
                              std::to_string(k));

    PrototypeModel out = model;
    const int depth = model.feature_depth();
    int kept = 0;
    for (int m = 0; m < n; ++m) kept += remove[static_cast<std::size_t>(m)] ? 0 : 1;
    out.prototypes = Tensor({kept, depth});
    out.class_of_prototype.clear();
    out.last_weight = Tensor({model.num_classes, kept});
    int t = 0;
    for (int m = 0; m < n; ++m) {
        if (remove[static_cast<std::size_t>(m)]) continue;
        for (int c = 0; c < depth; ++c) out.prototypes.at(t, c) = model.prototypes.at(m, c);
        out.class_of_prototype.push_back(model.class_of_prototype[m]);
        for (int k = 0; k < model.num_classes; ++k)
            out.last_weight.at(k, t) = model.last_weight.at(k, m);
        ++t;
    }
    out.validate();
    if (retrain_last_layer)
        train_last_layer(out, ds, retrain_epochs, retrain_lr, 16,
                         sub_seed(seed, "prune-refit"), nullptr);
    return out;
}

namespace {

json schedule_to_json(const TrainSchedule& s) {
    return json{{"total_epochs", s.total_epochs},
                {"push_every", s.push_every},
                {"last_layer_epochs_after_push", s.last_layer_epochs_after_push},
                {"lr", s.lr},
                {"lr_decay", s.lr_decay},
                {"lr_decay_every", s.lr_decay_every},
                {"momentum", s.momentum},
                {"last_layer_lr", s.last_layer_lr},
                {"batch_size", s.batch_size},
                {"seed", s.seed}};
}

TrainSchedule schedule_from_json(const json& j) {
    TrainSchedule s;
    s.total_epochs = j.at("total_epochs").get<int>();
    s.push_every = j.at("push_every").get<int>();
    s.last_layer_epochs_after_push = j.at("last_layer_epochs_after_push").get<int>();
    s.lr = j.at("lr").get<float>();
    s.lr_decay = j.at("lr_decay").get<float>();
    s.lr_decay_every = j.at("lr_decay_every").get<int>();
    s.momentum = j.at("momentum").get<float>();
    s.last_layer_lr = j.at("last_layer_lr").get<float>();
    s.batch_size = j.at("batch_size").get<int>();
    s.seed = j.at("seed").get<std::uint64_t>();
    return s;
}

} // namespace

void save_checkpoint(const std::string& dir, const PrototypeModel& model,
                     const CheckpointMeta& meta) {
    model.validate();
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir + ": " + ec.message());

    json man;
    man["input"] = {{"channels", model.input_c},
                    {"height", model.input_h},
                    {"width", model.input_w}};
    man["num_classes"] = model.num_classes;
    man["eps"] = model.eps;
    json stages = json::array();
    for (std::size_t s = 0; s < model.backbone.size(); ++s) {
        const Stage& st = model.backbone[s];
        switch (st.kind) {
            case StageKind::Conv:
                stages.push_back({{"kind", "conv"},
                                  {"stride", st.conv.stride},
                                  {"padding", st.conv.padding}});
                break;
            case StageKind::Relu:
                stages.push_back({{"kind", "relu"}});
                break;
            case StageKind::Pool:
                stages.push_back({{"kind", "pool"},
                                  {"window", st.pool_window},
                                  {"stride", st.pool_stride}});
                break;
        }
    }
    man["stages"] = stages;
    man["class_of_prototype"] = model.class_of_prototype;
    man["schedule"] = schedule_to_json(meta.schedule);
    man["loss_weights"] = {{"lambda_clst", meta.weights.lambda_clst},
                           {"lambda_sep", meta.weights.lambda_sep}};
    man["domain_low"] = meta.domain_low;
    man["domain_high"] = meta.domain_high;
    json pushes = json::array();
    for (const PushRecord& rec : meta.pushes) {
        json entries = json::array();
        for (const PushEntry& e : rec.entries)
            entries.push_back({e.prototype, e.image_id, e.cell_i, e.cell_j, e.distance});
        pushes.push_back({{"epoch", rec.epoch}, {"entries", entries}});
    }
    man["pushes"] = pushes;
    write_file_text((std::filesystem::path(dir) / "manifest.json").string(),
                    man.dump(2) + "\n");

    for (std::size_t s = 0; s < model.backbone.size(); ++s)
        if (model.backbone[s].kind == StageKind::Conv) {
            char wname[40], bname[40];
            std::snprintf(wname, sizeof(wname), "stage_%02zu_weight.ptns", s);
            std::snprintf(bname, sizeof(bname), "stage_%02zu_bias.ptns", s);
            write_ptns((std::filesystem::path(dir) / wname).string(),
                       model.backbone[s].conv.weight);
            write_ptns((std::filesystem::path(dir) / bname).string(),
                       model.backbone[s].conv.bias);
        }
    write_ptns((std::filesystem::path(dir) / "prototypes.ptns").string(), model.prototypes);
    write_ptns((std::filesystem::path(dir) / "last_weight.ptns").string(), model.last_weight);
    write_ptns((std::filesystem::path(dir) / "last_bias.ptns").string(), model.last_bias);
}

PrototypeModel load_checkpoint(const std::string& dir, CheckpointMeta* meta) {
    const json man =
        json::parse(read_file_text((std::filesystem::path(dir) / "manifest.json").string()));
    PrototypeModel m;
    m.input_c = man.at("input").at("channels").get<int>();
    m.input_h = man.at("input").at("height").get<int>();
    m.input_w = man.at("input").at("width").get<int>();
    m.num_classes = man.at("num_classes").get<int>();
    m.eps = man.at("eps").get<float>();
    std::size_t s = 0;
    for (const json& js : man.at("stages")) {
        Stage st;
        const auto kind = js.at("kind").get<std::string>();
        if (kind == "conv") {
            st.kind = StageKind::Conv;
            char wname[40], bname[40];
            std::snprintf(wname, sizeof(wname), "stage_%02zu_weight.ptns", s);
            std::snprintf(bname, sizeof(bname), "stage_%02zu_bias.ptns", s);
            st.conv.weight = read_ptns((std::filesystem::path(dir) / wname).string());
            st.conv.bias = read_ptns((std::filesystem::path(dir) / bname).string());
            st.conv.stride = js.at("stride").get<int>();
            st.conv.padding = js.at("padding").get<int>();
        } else if (kind == "relu") {
            st.kind = StageKind::Relu;
        } else if (kind == "pool") {
            st.kind = StageKind::Pool;
            st.pool_window = js.at("window").get<int>();
            st.pool_stride = js.at("stride").get<int>();
        } else {
            throw IoError("unknown stage kind '" + kind + "' in " + dir);
        }
        m.backbone.push_back(std::move(st));
        ++s;
    }
    m.class_of_prototype = man.at("class_of_prototype").get<std::vector<int>>();
    m.prototypes = read_ptns((std::filesystem::path(dir) / "prototypes.ptns").string());
    m.last_weight = read_ptns((std::filesystem::path(dir) / "last_weight.ptns").string());
    m.last_bias = read_ptns((std::filesystem::path(dir) / "last_bias.ptns").string());
    m.validate();
    if (meta) {
        meta->schedule = schedule_from_json(man.at("schedule"));
        meta->weights.lambda_clst = man.at("loss_weights").at("lambda_clst").get<float>();
        meta->weights.lambda_sep = man.at("loss_weights").at("lambda_sep").get<float>();
        for (int i = 0; i < 3; ++i) {
            meta->domain_low[static_cast<std::size_t>(i)] =
                man.at("domain_low").at(i).get<float>();
            meta->domain_high[static_cast<std::size_t>(i)] =
                man.at("domain_high").at(i).get<float>();
        }
        meta->pushes.clear();
        for (const json& jp : man.at("pushes")) {
            PushRecord rec;
            rec.epoch = jp.at("epoch").get<int>();
            for (const json& je : jp.at("entries")) {
                PushEntry e;
                e.prototype = je.at(0).get<int>();
                e.image_id = je.at(1).get<int>();
                e.cell_i = je.at(2).get<int>();
                e.cell_j = je.at(3).get<int>();
                e.distance = je.at(4).get<double>();
                rec.entries.push_back(e);
            }
            meta->pushes.push_back(std::move(rec));
        }
    }
    return m;
}

} // namespace protoprp
