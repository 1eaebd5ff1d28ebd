#include "protoprp/dataset.hpp"

#include "protoprp/errors.hpp"
#include "protoprp/ptns.hpp"
#include "protoprp/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>

namespace protoprp {

using nlohmann::json;

void LabeledDataset::validate() const {
    const std::size_t n = images.size();
    if (labels.size() != n || artifact_flags.size() != n || artifact_box.size() != n)
        throw ConfigError("dataset bookkeeping lengths disagree");
    if (!sign_pose.empty() && sign_pose.size() != n)
        throw ConfigError("dataset sign poses length disagrees");
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes)
            throw ConfigError("dataset label " + std::to_string(labels[i]) +
                              " outside 0.." + std::to_string(num_classes - 1));
        if (images[i].rank() != 3 || images[i].dim(0) != 3)
            throw ConfigError("dataset image " + std::to_string(i) + " not [3,H,W]");
    }
}

void ArtifactSpec::validate(int image_h, int image_w, int num_classes) const {
    if (size < 1) throw ConfigError("artifact.size must be >= 1");
    if (size > image_h || size > image_w)
        throw ConfigError("artifact square does not fit inside the image");
    if (fraction < 0.0f || fraction > 1.0f)
        throw ConfigError("artifact.fraction must lie in [0,1]");
    if (target_class < 0 || target_class >= num_classes)
        throw ConfigError("artifact.target_class out of range");
    if (relabel_to >= num_classes)
        throw ConfigError("artifact.relabel_to out of range");
    if (jitter < 0) throw ConfigError("artifact.jitter must be >= 0");
    if (bottom_margin < 0) throw ConfigError("artifact.bottom_margin must be >= 0");
    if (!(brightness_lo <= brightness_hi))
        throw ConfigError("artifact brightness range inverted");
}

namespace {

struct ClassStyle {
    float r, g, b;
    int shape; // 0 octagon, 1 bar, 2 triangle, 3 square, 4 diamond
};

// one sign-red family: classes must be told apart by silhouette, not hue;
// slight per-class tints stay well under the per-image brightness/gain jitter
// distinct canonical hue+shape per class; none of these sit near the artifact
// yellow so a stamp never masquerades as class paint.  Classes 0 and 1 are
// deliberately the hard pair (red octagon vs orange disc, with hue jitter
// bands that overlap in the middle) so neither paint nor outline separates
// the pair reliably at this resolution.
const ClassStyle kStyles[5] = {
    {0.88f, 0.12f, 0.10f, 0}, // red octagon
    {0.82f, 0.50f, 0.12f, 5}, // orange disc
    {0.12f, 0.70f, 0.25f, 2}, // green triangle
    {0.15f, 0.25f, 0.85f, 1}, // blue horizontal bar
    {0.10f, 0.65f, 0.70f, 4}, // teal diamond
};

bool inside_shape(int shape, double dx0, double dy0, double r, double theta) {
    const double ct = std::cos(theta), st = std::sin(theta);
    const double dx = ct * dx0 + st * dy0;
    const double dy = -st * dx0 + ct * dy0;
    switch (shape) {
        case 0: return std::fabs(dx) <= r && std::fabs(dy) <= r &&
                       std::fabs(dx) + std::fabs(dy) <= 1.35 * r;
        case 1: return std::fabs(dx) <= r && std::fabs(dy) <= 0.42 * r;
        case 2: return dy >= -r && dy <= r && std::fabs(dx) <= 0.62 * (dy + r);
        case 3: return std::fabs(dx) <= 0.85 * r && std::fabs(dy) <= 0.85 * r;
        case 5: return dx0 * dx0 + dy0 * dy0 <= r * r;
        default: return std::fabs(dx) + std::fabs(dy) <= 1.1 * r;
    }
}

float clamp01(double v) {
    if (v < 0.0) return 0.0f;
    if (v > 1.0) return 1.0f;
    return static_cast<float>(v);
}

// Deterministic per-image placement and brightness for the stamped square.
// The square sits at the lower edge of the sign, hanging just below it onto
// the backdrop: high contrast against the dark background instead of being
// swallowed by sign paint.
void stamp_square(Tensor& img, int id, const ArtifactSpec& spec, std::uint64_t ds_seed,
                  const std::array<float, 3>& pose, std::array<int, 3>& box) {
    const int h = img.dim(1), w = img.dim(2);
    Rng rng(sub_seed(ds_seed, "artifact", static_cast<std::uint64_t>(id)));
    const int jx = rng.uniform_int(-spec.jitter, spec.jitter);
    const int jy = rng.uniform_int(-spec.jitter, spec.jitter);
    const float bright =
        static_cast<float>(rng.uniform(spec.brightness_lo, spec.brightness_hi));
    int x0 = static_cast<int>(std::lround(pose[0])) - spec.size / 2 + jx;
    int y0 = static_cast<int>(std::lround(pose[1] + pose[2])) + spec.bottom_margin + jy;
    x0 = std::clamp(x0, 0, w - spec.size);
    y0 = std::clamp(y0, 0, h - spec.size);
    for (int c = 0; c < 3; ++c)
        for (int dy = 0; dy < spec.size; ++dy)
            for (int dx = 0; dx < spec.size; ++dx)
                img.at(c, y0 + dy, x0 + dx) = spec.color[c] * bright;
    box = {x0, y0, spec.size};
}

// Ids eligible for stamping under `spec`, stable across re-application: a
// relabeled backdoor image stays a candidate via its artifact flag.
std::vector<int> candidate_ids(const LabeledDataset& ds, const ArtifactSpec& spec) {
    std::vector<int> ids;
    for (std::size_t i = 0; i < ds.count(); ++i) {
        const int id = static_cast<int>(i);
        if (ds.labels[i] == spec.target_class ||
            (ds.artifact_flags[i] && spec.relabel_to >= 0 && ds.labels[i] == spec.relabel_to))
            ids.push_back(id);
    }
    return ids;
}

std::vector<int> select_ids(const LabeledDataset& ds, const ArtifactSpec& spec) {
    std::vector<int> ids = candidate_ids(ds, spec);
    const auto k = static_cast<std::size_t>(
        std::lround(static_cast<double>(spec.fraction) * static_cast<double>(ids.size())));
    Rng rng(sub_seed(ds.seed, "select", static_cast<std::uint64_t>(spec.target_class)));
    rng.shuffle(ids.data(), ids.size());
    ids.resize(k);
    std::sort(ids.begin(), ids.end());
    return ids;
}

LabeledDataset apply_artifact(const LabeledDataset& ds, const ArtifactSpec& spec,
                              bool relabel) {
    ds.validate();
    if (ds.count() == 0) throw ConfigError("artifact insertion on empty dataset");
    spec.validate(ds.images[0].dim(1), ds.images[0].dim(2), ds.num_classes);

    LabeledDataset out = ds;
    for (std::size_t i = 0; i < out.count(); ++i) {
        out.artifact_flags[i] = 0;
        out.artifact_box[i] = {-1, -1, -1};
    }
    const int h = ds.images[0].dim(1), w = ds.images[0].dim(2);
    const std::array<float, 3> center_pose = {w / 2.0f, 0.44f * h, 0.28f * h};
    for (int id : select_ids(ds, spec)) {
        const auto idx = static_cast<std::size_t>(id);
        const auto& pose = ds.sign_pose.empty() ? center_pose : ds.sign_pose[idx];
        stamp_square(out.images[idx], id, spec, ds.seed, pose, out.artifact_box[idx]);
        out.artifact_flags[idx] = 1;
        if (relabel) out.labels[idx] = spec.relabel_to;
    }
    return out;
}

} // namespace

LabeledDataset gen_base_dataset(int num_classes, int per_class, int image_size,
                                std::uint64_t seed) {
    if (num_classes < 2 || num_classes > 5)
        throw ConfigError("num_classes must be 2..5 (procedural class styles)");
    if (per_class < 1) throw ConfigError("per_class must be >= 1");
    if (image_size < 16) throw ConfigError("image too small for the sign shapes");

    LabeledDataset ds;
    ds.num_classes = num_classes;
    ds.seed = seed;
    ds.split = "train";
    const int n = num_classes * per_class;
    ds.images.reserve(n);
    for (int id = 0; id < n; ++id) {
        const int label = id % num_classes;
        const ClassStyle& st = kStyles[label];
        Rng rng(sub_seed(seed, "img", static_cast<std::uint64_t>(id)));
        // per-image background color + heavy speckle below: uniform backdrops
        // collapse to one latent point and prototypes park there instead of on
        // anything class-specific
        double bgc[3];
        for (double& b : bgc) b = rng.uniform(0.06, 0.30);
        const double bright = rng.uniform(0.82, 1.0);
        // per-channel gain: hue varies image to image, so color alone is a
        // weaker cue and shape has to carry part of the decision
        double gain[3];
        for (double& g : gain) g = rng.uniform(0.82, 1.0);
        // pose variation keeps any single sign patch from being a fixed
        // landmark
        const double cx = image_size / 2.0 + rng.uniform(-3.0, 3.0);
        const double cy = image_size * 0.44 + rng.uniform(-3.0, 3.0);
        const double r = image_size * 0.28 + rng.uniform(-2.0, 2.0);
        const double theta = rng.uniform(-0.35, 0.35);

        Tensor img({3, image_size, image_size});
        for (int y = 0; y < image_size; ++y)
            for (int x = 0; x < image_size; ++x)
                for (int c = 0; c < 3; ++c)
                    img.at(c, y, x) = static_cast<float>(bgc[c] + rng.uniform(-0.10, 0.10));

        // class-irrelevant clutter, drawn under the sign; without it the
        // backdrop is low-information everywhere and a smoothing backbone maps
        // it to a single latent point, which prototype training then prefers
        // over any class-specific patch
        const int n_clutter = rng.uniform_int(2, 4);
        for (int t = 0; t < n_clutter; ++t) {
            double dc[3];
            do {
                for (double& v : dc) v = rng.uniform(0.15, 0.95);
            } while (dc[0] > 0.55 && dc[1] > 0.55 && dc[2] < 0.45); // never artifact-yellow
            const int s = rng.uniform_int(3, 6);
            const int x0 = rng.uniform_int(0, image_size - s);
            const int y0 = rng.uniform_int(0, image_size - s);
            const bool disc = rng.uniform() < 0.5;
            const double h = (s - 1) / 2.0;
            for (int dy = 0; dy < s; ++dy)
                for (int dx = 0; dx < s; ++dx) {
                    if (disc && (dx - h) * (dx - h) + (dy - h) * (dy - h) > h * h + 0.5)
                        continue;
                    for (int c = 0; c < 3; ++c)
                        img.at(c, y0 + dy, x0 + dx) = static_cast<float>(dc[c]);
                }
        }

        // classes 0 and 1 draw their paint from a shared red..orange line,
        // sampled from opposite ends with an overlapping middle band: an
        // instance from the band is colour-ambiguous between the two
        float col[3] = {st.r, st.g, st.b};
        if (label <= 1) {
            const double t = (label == 0) ? rng.uniform(0.0, 0.52) : rng.uniform(0.48, 1.0);
            const float a[3] = {kStyles[0].r, kStyles[0].g, kStyles[0].b};
            const float b[3] = {kStyles[1].r, kStyles[1].g, kStyles[1].b};
            for (int c = 0; c < 3; ++c)
                col[c] = static_cast<float>(a[c] + t * (b[c] - a[c]));
        }
        for (int y = 0; y < image_size; ++y)
            for (int x = 0; x < image_size; ++x)
                if (inside_shape(st.shape, x - cx, y - cy, r, theta))
                    for (int c = 0; c < 3; ++c)
                        img.at(c, y, x) = static_cast<float>(col[c] * bright * gain[c]);

        for (float& v : img.data) v = clamp01(v + 0.04 * rng.normal());
        ds.images.push_back(std::move(img));
        ds.labels.push_back(label);
        ds.artifact_flags.push_back(0);
        ds.artifact_box.push_back({-1, -1, -1});
        ds.sign_pose.push_back(
            {static_cast<float>(cx), static_cast<float>(cy), static_cast<float>(r)});
    }
    return ds;
}

LabeledDataset insert_clever_hans(const LabeledDataset& ds, const ArtifactSpec& spec) {
    if (spec.relabel_to >= 0)
        throw ConfigError("clever-hans spec must leave relabel_to unset");
    return apply_artifact(ds, spec, false);
}

LabeledDataset insert_backdoor(const LabeledDataset& ds, const ArtifactSpec& spec) {
    if (spec.relabel_to < 0)
        throw ConfigError("backdoor spec requires relabel_to");
    if (spec.relabel_to == spec.target_class)
        throw ConfigError("backdoor relabel_to must differ from target_class");
    return apply_artifact(ds, spec, true);
}

std::pair<LabeledDataset, LabeledDataset> make_test_variants(const LabeledDataset& base_test,
                                                             const ArtifactSpec& spec) {
    base_test.validate();
    if (base_test.count() == 0) throw ConfigError("empty base test set");
    spec.validate(base_test.images[0].dim(1), base_test.images[0].dim(2),
                  base_test.num_classes);
    bool has_class = false;
    for (int l : base_test.labels) has_class |= (l == spec.target_class);
    if (!has_class)
        throw ConfigError("base test set has no images of the target class");

    const int h = base_test.images[0].dim(1), w = base_test.images[0].dim(2);
    const std::array<float, 3> center_pose = {w / 2.0f, 0.44f * h, 0.28f * h};
    LabeledDataset artifact = base_test;
    artifact.split = "artifact-test";
    for (std::size_t i = 0; i < artifact.count(); ++i) {
        artifact.artifact_flags[i] = 0;
        artifact.artifact_box[i] = {-1, -1, -1};
        if (artifact.labels[i] == spec.target_class) {
            const auto& pose =
                base_test.sign_pose.empty() ? center_pose : base_test.sign_pose[i];
            stamp_square(artifact.images[i], static_cast<int>(i), spec, base_test.seed,
                         pose, artifact.artifact_box[i]);
            artifact.artifact_flags[i] = 1;
        }
    }

    LabeledDataset clean = base_test;
    clean.split = "clean-test";
    for (std::size_t i = 0; i < clean.count(); ++i) {
        clean.artifact_flags[i] = 0;
        clean.artifact_box[i] = {-1, -1, -1};
    }
    return {std::move(artifact), std::move(clean)};
}

void write_dataset_dir(const std::string& dir, const LabeledDataset& ds,
                       const ArtifactSpec* spec) {
    ds.validate();
    std::error_code ec;
    std::filesystem::create_directories(std::filesystem::path(dir) / "images", ec);
    if (ec) throw IoError("cannot create " + dir + ": " + ec.message());

    std::ostringstream csv;
    csv << "id,label,artifact_flag\n";
    for (std::size_t i = 0; i < ds.count(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "%04zu.ptns", i);
        write_ptns((std::filesystem::path(dir) / "images" / name).string(), ds.images[i]);
        csv << i << "," << ds.labels[i] << "," << int(ds.artifact_flags[i]) << "\n";
    }
    write_file_text((std::filesystem::path(dir) / "labels.csv").string(), csv.str());

    json man;
    man["split"] = ds.split;
    man["seed"] = ds.seed;
    man["num_classes"] = ds.num_classes;
    man["count"] = ds.count();
    if (!ds.images.empty()) {
        man["image_height"] = ds.images[0].dim(1);
        man["image_width"] = ds.images[0].dim(2);
    }
    if (spec) {
        man["artifact"] = {
            {"size", spec->size},
            {"color", {spec->color[0], spec->color[1], spec->color[2]}},
            {"bottom_margin", spec->bottom_margin},
            {"jitter", spec->jitter},
            {"brightness_lo", spec->brightness_lo},
            {"brightness_hi", spec->brightness_hi},
            {"fraction", spec->fraction},
            {"target_class", spec->target_class},
            {"relabel_to", spec->relabel_to},
        };
    } else {
        man["artifact"] = nullptr;
    }
    json boxes = json::array();
    for (std::size_t i = 0; i < ds.count(); ++i)
        if (ds.artifact_flags[i])
            boxes.push_back({i, ds.artifact_box[i][0], ds.artifact_box[i][1],
                             ds.artifact_box[i][2]});
    man["artifact_boxes"] = boxes;
    write_file_text((std::filesystem::path(dir) / "manifest.json").string(),
                    man.dump(2) + "\n");
}

LabeledDataset read_dataset_dir(const std::string& dir) {
    const json man = json::parse(read_file_text((std::filesystem::path(dir) / "manifest.json").string()));
    LabeledDataset ds;
    ds.split = man.at("split").get<std::string>();
    ds.seed = man.at("seed").get<std::uint64_t>();
    ds.num_classes = man.at("num_classes").get<int>();
    const auto n = man.at("count").get<std::size_t>();

    const std::string csv = read_file_text((std::filesystem::path(dir) / "labels.csv").string());
    std::istringstream lines(csv);
    std::string line;
    std::getline(lines, line); // header
    while (std::getline(lines, line)) {
        if (line.empty()) continue;
        std::size_t id = 0;
        int label = 0, flag = 0;
        if (std::sscanf(line.c_str(), "%zu,%d,%d", &id, &label, &flag) != 3)
            throw IoError("bad labels.csv row in " + dir + ": " + line);
        if (id != ds.labels.size())
            throw IoError("labels.csv ids must be dense ascending in " + dir);
        ds.labels.push_back(label);
        ds.artifact_flags.push_back(static_cast<char>(flag != 0));
        ds.artifact_box.push_back({-1, -1, -1});
    }
    if (ds.labels.size() != n)
        throw IoError("labels.csv row count disagrees with manifest in " + dir);
    for (std::size_t i = 0; i < n; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "%04zu.ptns", i);
        ds.images.push_back(read_ptns((std::filesystem::path(dir) / "images" / name).string()));
    }
    if (man.contains("artifact_boxes"))
        for (const auto& b : man.at("artifact_boxes")) {
            const auto id = b.at(0).get<std::size_t>();
            if (id < n) ds.artifact_box[id] = {b.at(1).get<int>(), b.at(2).get<int>(),
                                               b.at(3).get<int>()};
        }
    ds.validate();
    return ds;
}

} // namespace protoprp
