#include "protoprp/eval.hpp"

#include "protoprp/errors.hpp"
#include "protoprp/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

namespace protoprp {

void OrderingCurve::validate() const {
    if (fractions.size() != scores.size() || fractions.size() < 2)
        throw ConfigError("ordering curve needs matching fractions and scores");
    if (fractions.front() != 0.0 || fractions.back() != 1.0)
        throw ConfigError("ordering curve must span fractions 0 to 1");
    for (std::size_t i = 1; i < fractions.size(); ++i)
        if (!(fractions[i] > fractions[i - 1]))
            throw ConfigError("ordering curve fractions must increase strictly");
}

namespace {

// Pixel indices sorted by descending relevance; equal values keep row-major
// order so the ranking is reproducible.
std::vector<int> pixel_order_by_relevance(const Tensor& map_values) {
    const Tensor rel = channel_sum(map_values);
    const int count = rel.dim(0) * rel.dim(1);
    std::vector<int> order(static_cast<std::size_t>(count));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&rel](int a, int b) {
        return rel.data[static_cast<std::size_t>(a)] > rel.data[static_cast<std::size_t>(b)];
    });
    return order;
}

Tensor random_baseline_image(int channels, int h, int w, std::uint64_t seed) {
    Tensor img({channels, h, w});
    Rng rng(seed);
    for (float& v : img.data) v = rng.uniform_float();
    return img;
}

void copy_pixel(Tensor& dst, const Tensor& src, int flat_pixel) {
    const int w = dst.dim(2);
    const int y = flat_pixel / w, x = flat_pixel % w;
    for (int c = 0; c < dst.dim(0); ++c) dst.at(c, y, x) = src.at(c, y, x);
}

double score_of(const ForwardTrace& tr, OrderingTarget target) {
    if (target.kind == OrderingTarget::Similarity) return tr.similarities.at(target.index);
    return tr.logits.at(target.index);
}

std::vector<double> step_fractions(int steps) {
    std::vector<double> f(static_cast<std::size_t>(steps) + 1);
    for (int k = 0; k <= steps; ++k)
        f[static_cast<std::size_t>(k)] = static_cast<double>(k) / steps;
    return f;
}

// Walk the replacement schedule once, recording scores at every fraction; a
// with_trace callback lets averaged variants read all similarities at once.
template <typename OnTrace>
void run_schedule(const PrototypeModel& model, const Tensor& image,
                  const std::vector<int>& order, const Tensor& baseline, int steps,
                  OnTrace&& on_trace) {
    const int pixels = model.input_h * model.input_w;
    Tensor work = baseline;
    int replaced = 0;
    for (int k = 0; k <= steps; ++k) {
        const int want = static_cast<int>(
            std::lround(static_cast<double>(k) / steps * pixels));
        while (replaced < want) {
            copy_pixel(work, image, order[static_cast<std::size_t>(replaced)]);
            ++replaced;
        }
        on_trace(k, forward(model, work, TraceLevel::Scores));
    }
}

std::vector<int> sample_indices(std::size_t count, int num_images, std::uint64_t seed) {
    std::vector<int> idx(count);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(sub_seed(seed, "ordering-images"));
    rng.shuffle(idx.data(), idx.size());
    if (num_images < static_cast<int>(count)) idx.resize(static_cast<std::size_t>(num_images));
    return idx;
}

void check_image_matches(const PrototypeModel& model, const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != model.input_c ||
        image.dim(1) != model.input_h || image.dim(2) != model.input_w)
        throw ConfigError("image shape " + image.shape_str() + " does not match model input");
}

} // namespace

OrderingCurve relevance_ordering(const PrototypeModel& model, const RelevanceMap& map,
                                 const Tensor& image, OrderingTarget target, int steps,
                                 std::uint64_t seed, const std::string& baseline_tag) {
    model.validate();
    check_image_matches(model, image);
    if (steps < 2) throw ConfigError("ordering test needs steps >= 2");
    const Tensor rel = channel_sum(map.values);
    if (rel.dim(0) != model.input_h || rel.dim(1) != model.input_w)
        throw ConfigError("relevance map spatial shape does not match the image");
    if (target.kind == OrderingTarget::Similarity &&
        (target.index < 0 || target.index >= model.num_prototypes()))
        throw ConfigError("ordering target prototype out of range");
    if (target.kind == OrderingTarget::ClassScore &&
        (target.index < 0 || target.index >= model.num_classes))
        throw ConfigError("ordering target class out of range");

    OrderingCurve curve;
    curve.baseline = baseline_tag;
    curve.aggregation = "per-prototype";
    curve.fractions = step_fractions(steps);
    curve.scores.assign(curve.fractions.size(), 0.0);
    const std::vector<int> order = pixel_order_by_relevance(map.values);
    const Tensor baseline = random_baseline_image(model.input_c, model.input_h,
                                                  model.input_w,
                                                  sub_seed(seed, "ordering-baseline"));
    run_schedule(model, image, order, baseline, steps,
                 [&](int k, const ForwardTrace& tr) {
                     curve.scores[static_cast<std::size_t>(k)] = score_of(tr, target);
                 });
    return curve;
}

OrderingCurve averaged_ordering(const PrototypeModel& model, const LabeledDataset& ds,
                                const std::function<Tensor(int, int)>& provider,
                                int num_images, int steps, std::uint64_t seed,
                                const std::string& baseline_tag) {
    model.validate();
    ds.validate();
    if (ds.count() == 0) throw ConfigError("ordering test on empty dataset");
    if (steps < 2) throw ConfigError("ordering test needs steps >= 2");
    if (num_images < 1) throw ConfigError("ordering test needs num_images >= 1");

    OrderingCurve curve;
    curve.baseline = baseline_tag;
    curve.aggregation = "averaged";
    curve.fractions = step_fractions(steps);
    curve.scores.assign(curve.fractions.size(), 0.0);

    const std::vector<int> chosen = sample_indices(ds.count(), num_images, seed);
    const int n = model.num_prototypes();
    for (int idx : chosen) {
        const Tensor& image = ds.images[static_cast<std::size_t>(idx)];
        const Tensor baseline = random_baseline_image(
            model.input_c, model.input_h, model.input_w,
            sub_seed(seed, "baseline", static_cast<std::uint64_t>(idx)));
        for (int m = 0; m < n; ++m) {
            const Tensor map_values = provider(idx, m);
            const std::vector<int> order = pixel_order_by_relevance(map_values);
            run_schedule(model, image, order, baseline, steps,
                         [&](int k, const ForwardTrace& tr) {
                             curve.scores[static_cast<std::size_t>(k)] +=
                                 tr.similarities.at(m);
                         });
        }
    }
    const double denom = static_cast<double>(chosen.size()) * n;
    for (double& s : curve.scores) s /= denom;
    return curve;
}

OrderingCurve random_ordering(const PrototypeModel& model, const LabeledDataset& ds,
                              int num_images, int steps, std::uint64_t seed) {
    model.validate();
    ds.validate();
    if (ds.count() == 0) throw ConfigError("ordering test on empty dataset");
    if (steps < 2) throw ConfigError("ordering test needs steps >= 2");
    if (num_images < 1) throw ConfigError("ordering test needs num_images >= 1");

    OrderingCurve curve;
    curve.baseline = "random";
    curve.aggregation = "averaged";
    curve.fractions = step_fractions(steps);
    curve.scores.assign(curve.fractions.size(), 0.0);

    const std::vector<int> chosen = sample_indices(ds.count(), num_images, seed);
    const int n = model.num_prototypes();
    const int pixels = model.input_h * model.input_w;
    for (int idx : chosen) {
        const Tensor& image = ds.images[static_cast<std::size_t>(idx)];
        const Tensor baseline = random_baseline_image(
            model.input_c, model.input_h, model.input_w,
            sub_seed(seed, "baseline", static_cast<std::uint64_t>(idx)));
        std::vector<int> order(static_cast<std::size_t>(pixels));
        std::iota(order.begin(), order.end(), 0);
        Rng rng(sub_seed(seed, "random-order", static_cast<std::uint64_t>(idx)));
        rng.shuffle(order.data(), order.size());
        // one random schedule serves every prototype: average their scores
        run_schedule(model, image, order, baseline, steps,
                     [&](int k, const ForwardTrace& tr) {
                         double sum = 0.0;
                         for (int m = 0; m < n; ++m) sum += tr.similarities.at(m);
                         curve.scores[static_cast<std::size_t>(k)] += sum / n;
                     });
    }
    for (double& s : curve.scores) s /= static_cast<double>(chosen.size());
    return curve;
}

double curve_auc(const OrderingCurve& curve) {
    curve.validate();
    double auc = 0.0;
    for (std::size_t i = 1; i < curve.fractions.size(); ++i)
        auc += (curve.fractions[i] - curve.fractions[i - 1]) *
               (curve.scores[i] + curve.scores[i - 1]) * 0.5;
    return auc;
}

namespace {

int predict_from_sims(const PrototypeModel& model, const float* sims,
                      const std::vector<char>& removed) {
    int best = 0;
    double best_v = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < model.num_classes; ++k) {
        double acc = model.last_bias.at(k);
        for (int m = 0; m < model.num_prototypes(); ++m) {
            if (removed[static_cast<std::size_t>(m)]) continue;
            acc += static_cast<double>(model.last_weight.at(k, m)) * sims[m];
        }
        if (acc > best_v) { // ties keep the lowest class id
            best_v = acc;
            best = k;
        }
    }
    return best;
}

} // namespace

DropMatrix pruning_matrix(const PrototypeModel& model, const LabeledDataset& ds, int class_c) {
    model.validate();
    ds.validate();
    if (class_c < 0 || class_c >= model.num_classes)
        throw ConfigError("pruning_matrix class out of range");
    DropMatrix dm;
    for (int m = 0; m < model.num_prototypes(); ++m)
        if (model.class_of_prototype[static_cast<std::size_t>(m)] == class_c)
            dm.prototype_ids.push_back(m);
    if (dm.prototype_ids.size() < 2)
        throw ConfigError("pruning_matrix needs at least 2 prototypes in the class");

    std::vector<std::size_t> class_rows;
    for (std::size_t i = 0; i < ds.count(); ++i)
        if (ds.labels[i] == class_c) class_rows.push_back(i);
    if (class_rows.empty())
        throw ConfigError("dataset has no images of the inspected class");

    const int n = model.num_prototypes();
    std::vector<float> sims(class_rows.size() * static_cast<std::size_t>(n));
    for (std::size_t r = 0; r < class_rows.size(); ++r) {
        const ForwardTrace tr = forward(model, ds.images[class_rows[r]], TraceLevel::Scores);
        std::copy(tr.similarities.data.begin(), tr.similarities.data.end(),
                  sims.begin() + static_cast<std::ptrdiff_t>(r * n));
    }

    std::vector<char> removed(static_cast<std::size_t>(n), 0);
    auto class_acc = [&]() {
        std::size_t correct = 0;
        for (std::size_t r = 0; r < class_rows.size(); ++r)
            if (predict_from_sims(model, sims.data() + r * n, removed) == class_c) ++correct;
        return static_cast<double>(correct) / static_cast<double>(class_rows.size());
    };

    dm.base_accuracy = class_acc();
    const std::size_t k = dm.prototype_ids.size();
    dm.drop.assign(k, std::vector<double>(k, 0.0));
    for (std::size_t a = 0; a < k; ++a) {
        for (std::size_t b = a; b < k; ++b) {
            removed[static_cast<std::size_t>(dm.prototype_ids[a])] = 1;
            removed[static_cast<std::size_t>(dm.prototype_ids[b])] = 1;
            const double drop = dm.base_accuracy - class_acc();
            dm.drop[a][b] = drop;
            dm.drop[b][a] = drop;
            removed[static_cast<std::size_t>(dm.prototype_ids[a])] = 0;
            removed[static_cast<std::size_t>(dm.prototype_ids[b])] = 0;
        }
    }
    return dm;
}

AccuracyReport accuracy(const PrototypeModel& model, const LabeledDataset& ds,
                        bool per_class) {
    model.validate();
    ds.validate();
    if (ds.count() == 0) throw ConfigError("accuracy on empty dataset");
    AccuracyReport rep;
    if (per_class) {
        rep.per_class.assign(static_cast<std::size_t>(model.num_classes), 0.0);
        rep.per_class_count.assign(static_cast<std::size_t>(model.num_classes), 0);
    }
    std::size_t correct = 0;
    std::vector<std::size_t> class_correct(static_cast<std::size_t>(model.num_classes), 0);
    std::vector<std::size_t> class_count(static_cast<std::size_t>(model.num_classes), 0);
    for (std::size_t i = 0; i < ds.count(); ++i) {
        const ForwardTrace tr = forward(model, ds.images[i], TraceLevel::Scores);
        int arg = 0;
        for (int kcls = 1; kcls < model.num_classes; ++kcls)
            if (tr.logits.at(kcls) > tr.logits.at(arg)) arg = kcls;
        const int label = ds.labels[i];
        ++class_count[static_cast<std::size_t>(label)];
        if (arg == label) {
            ++correct;
            ++class_correct[static_cast<std::size_t>(label)];
        }
    }
    rep.overall = static_cast<double>(correct) / static_cast<double>(ds.count());
    if (per_class) {
        for (int k = 0; k < model.num_classes; ++k) {
            rep.per_class_count[static_cast<std::size_t>(k)] =
                class_count[static_cast<std::size_t>(k)];
            rep.per_class[static_cast<std::size_t>(k)] =
                class_count[static_cast<std::size_t>(k)] == 0
                    ? 0.0
                    : static_cast<double>(class_correct[static_cast<std::size_t>(k)]) /
                          static_cast<double>(class_count[static_cast<std::size_t>(k)]);
        }
    }
    return rep;
}

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

} // namespace

std::string ordering_curves_csv(const std::vector<OrderingCurve>& curves) {
    if (curves.empty()) throw ConfigError("no curves to export");
    for (const OrderingCurve& c : curves) {
        c.validate();
        if (c.fractions != curves.front().fractions)
            throw ConfigError("curves share one fraction grid in a CSV export");
    }
    std::ostringstream out;
    out << "fraction";
    for (const OrderingCurve& c : curves) out << "," << c.baseline;
    out << "\n";
    for (std::size_t i = 0; i < curves.front().fractions.size(); ++i) {
        out << fmt_double(curves.front().fractions[i]);
        for (const OrderingCurve& c : curves) out << "," << fmt_double(c.scores[i]);
        out << "\n";
    }
    return out.str();
}

std::string drop_matrix_csv(const DropMatrix& dm) {
    std::ostringstream out;
    out << "base_accuracy," << fmt_double(dm.base_accuracy) << "\n";
    out << "prototype";
    for (int id : dm.prototype_ids) out << "," << id;
    out << "\n";
    for (std::size_t a = 0; a < dm.prototype_ids.size(); ++a) {
        out << dm.prototype_ids[a];
        for (std::size_t b = 0; b < dm.prototype_ids.size(); ++b)
            out << "," << fmt_double(dm.drop[a][b]);
        out << "\n";
    }
    return out.str();
}

} // namespace protoprp
