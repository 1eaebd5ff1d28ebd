#include "protoprp/config.hpp"

#include "protoprp/errors.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <initializer_list>
#include <string>

namespace protoprp {

using nlohmann::json;

namespace {

std::string join_path(const std::string& path, const std::string& key) {
    return path.empty() ? key : path + "." + key;
}

void check_keys(const json& j, const std::string& path,
                std::initializer_list<const char*> keys) {
    if (!j.is_object())
        throw ConfigError("config field " + (path.empty() ? std::string("<root>") : path) +
                          ": expected an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        const bool known =
            std::any_of(keys.begin(), keys.end(),
                        [&](const char* k) { return it.key() == k; });
        if (!known) throw ConfigError("unknown config key: " + join_path(path, it.key()));
    }
}

void type_error(const std::string& path, const char* key, const char* want) {
    throw ConfigError("config field " + join_path(path, key) + ": expected " + want);
}

void read_field(const json& j, const std::string& path, const char* key, int& out) {
    if (!j.contains(key)) return;
    if (!j[key].is_number_integer()) type_error(path, key, "an integer");
    out = j[key].get<int>();
}

void read_field(const json& j, const std::string& path, const char* key,
                std::uint64_t& out) {
    if (!j.contains(key)) return;
    if (!j[key].is_number_integer() ||
        (!j[key].is_number_unsigned() && j[key].get<long long>() < 0))
        type_error(path, key, "a nonnegative integer");
    out = j[key].get<std::uint64_t>();
}

void read_field(const json& j, const std::string& path, const char* key, float& out) {
    if (!j.contains(key)) return;
    if (!j[key].is_number()) type_error(path, key, "a number");
    out = j[key].get<float>();
}

void read_field(const json& j, const std::string& path, const char* key, double& out) {
    if (!j.contains(key)) return;
    if (!j[key].is_number()) type_error(path, key, "a number");
    out = j[key].get<double>();
}

void read_field(const json& j, const std::string& path, const char* key,
                std::string& out) {
    if (!j.contains(key)) return;
    if (!j[key].is_string()) type_error(path, key, "a string");
    out = j[key].get<std::string>();
}

void read_field(const json& j, const std::string& path, const char* key,
                std::vector<int>& out) {
    if (!j.contains(key)) return;
    if (!j[key].is_array()) type_error(path, key, "an array of integers");
    std::vector<int> v;
    for (const auto& e : j[key]) {
        if (!e.is_number_integer()) type_error(path, key, "an array of integers");
        v.push_back(e.get<int>());
    }
    out = std::move(v);
}

void read_color(const json& j, const std::string& path, const char* key, float out[3]) {
    if (!j.contains(key)) return;
    if (!j[key].is_array() || j[key].size() != 3) type_error(path, key, "an array of 3 numbers");
    for (int c = 0; c < 3; ++c) {
        if (!j[key][static_cast<std::size_t>(c)].is_number())
            type_error(path, key, "an array of 3 numbers");
        out[c] = j[key][static_cast<std::size_t>(c)].get<float>();
    }
}

DatasetConfig dataset_from_json(const json& j, const std::string& path) {
    DatasetConfig d;
    check_keys(j, path,
               {"num_classes", "image_size", "train_per_class", "test_per_class", "dir",
                "artifact"});
    read_field(j, path, "num_classes", d.num_classes);
    read_field(j, path, "image_size", d.image_size);
    read_field(j, path, "train_per_class", d.train_per_class);
    read_field(j, path, "test_per_class", d.test_per_class);
    read_field(j, path, "dir", d.dir);
    if (j.contains("artifact")) {
        const json& a = j["artifact"];
        const std::string ap = join_path(path, "artifact");
        check_keys(a, ap,
                   {"kind", "fraction", "target_class", "relabel_to", "size",
                    "bottom_margin", "jitter", "brightness_lo", "brightness_hi", "color"});
        read_field(a, ap, "kind", d.artifact_kind);
        read_field(a, ap, "fraction", d.artifact.fraction);
        read_field(a, ap, "target_class", d.artifact.target_class);
        read_field(a, ap, "relabel_to", d.artifact.relabel_to);
        read_field(a, ap, "size", d.artifact.size);
        read_field(a, ap, "bottom_margin", d.artifact.bottom_margin);
        read_field(a, ap, "jitter", d.artifact.jitter);
        read_field(a, ap, "brightness_lo", d.artifact.brightness_lo);
        read_field(a, ap, "brightness_hi", d.artifact.brightness_hi);
        read_color(a, ap, "color", d.artifact.color);
    }
    return d;
}

ModelConfig model_from_json(const json& j, const std::string& path) {
    ModelConfig m;
    check_keys(j, path, {"conv_channels", "prototypes_per_class", "checkpoint_dir"});
    read_field(j, path, "conv_channels", m.conv_channels);
    read_field(j, path, "prototypes_per_class", m.prototypes_per_class);
    read_field(j, path, "checkpoint_dir", m.checkpoint_dir);
    return m;
}

ScheduleConfig schedule_from_json(const json& j, const json& loss, const std::string& path,
                                  const std::string& loss_path) {
    ScheduleConfig s;
    check_keys(j, path,
               {"total_epochs", "push_every", "last_layer_epochs_after_push", "lr",
                "lr_decay", "lr_decay_every", "momentum", "last_layer_lr", "batch_size"});
    read_field(j, path, "total_epochs", s.schedule.total_epochs);
    read_field(j, path, "push_every", s.schedule.push_every);
    read_field(j, path, "last_layer_epochs_after_push",
               s.schedule.last_layer_epochs_after_push);
    read_field(j, path, "lr", s.schedule.lr);
    read_field(j, path, "lr_decay", s.schedule.lr_decay);
    read_field(j, path, "lr_decay_every", s.schedule.lr_decay_every);
    read_field(j, path, "momentum", s.schedule.momentum);
    read_field(j, path, "last_layer_lr", s.schedule.last_layer_lr);
    read_field(j, path, "batch_size", s.schedule.batch_size);
    check_keys(loss, loss_path, {"lambda_cluster", "lambda_separation"});
    read_field(loss, loss_path, "lambda_cluster", s.loss_weights.lambda_clst);
    read_field(loss, loss_path, "lambda_separation", s.loss_weights.lambda_sep);
    return s;
}

ExplainConfig explain_from_json(const json& j, const std::string& path) {
    ExplainConfig e;
    check_keys(j, path,
               {"eps", "alpha", "beta", "method", "split", "image_ids", "prototypes",
                "target_class"});
    read_field(j, path, "eps", e.eps);
    read_field(j, path, "alpha", e.alpha);
    read_field(j, path, "beta", e.beta);
    read_field(j, path, "method", e.method);
    read_field(j, path, "split", e.split);
    read_field(j, path, "image_ids", e.image_ids);
    read_field(j, path, "prototypes", e.prototypes);
    read_field(j, path, "target_class", e.target_class);
    return e;
}

EvalConfig eval_from_json(const json& j, const std::string& path) {
    EvalConfig e;
    check_keys(j, path,
               {"test", "split", "ordering_steps", "ordering_images", "prune_class"});
    read_field(j, path, "test", e.test);
    read_field(j, path, "split", e.split);
    read_field(j, path, "ordering_steps", e.ordering_steps);
    read_field(j, path, "ordering_images", e.ordering_images);
    read_field(j, path, "prune_class", e.prune_class);
    return e;
}

ClusterConfig cluster_from_json(const json& j, const std::string& path) {
    ClusterConfig c;
    check_keys(j, path,
               {"method", "split", "inspect_class", "lambda_coreg", "sigma", "view_side",
                "maps_dir"});
    read_field(j, path, "method", c.method);
    read_field(j, path, "split", c.split);
    read_field(j, path, "inspect_class", c.inspect_class);
    read_field(j, path, "lambda_coreg", c.lambda_coreg);
    read_field(j, path, "sigma", c.sigma);
    read_field(j, path, "view_side", c.view_side);
    read_field(j, path, "maps_dir", c.maps_dir);
    return c;
}

bool valid_split(const std::string& s) {
    return s == "train" || s == "test-artifact" || s == "test-clean";
}

} // namespace

std::string RunConfig::dataset_dir() const {
    return dataset.dir.empty() ? output_dir + "/dataset" : dataset.dir;
}

std::string RunConfig::checkpoint_dir() const {
    return model.checkpoint_dir.empty() ? output_dir + "/checkpoint" : model.checkpoint_dir;
}

std::string RunConfig::split_dir(const std::string& split) const {
    if (!valid_split(split))
        throw ConfigError("unknown dataset split '" + split +
                          "' (expected train, test-artifact or test-clean)");
    return dataset_dir() + "/" + split;
}

void RunConfig::validate() const {
    if (output_dir.empty()) throw ConfigError("config field output_dir: must not be empty");
    if (threads < 1) throw ConfigError("thread count must be >= 1");
    if (dataset.artifact_kind != "none" && dataset.artifact_kind != "clever_hans" &&
        dataset.artifact_kind != "backdoor")
        throw ConfigError("config field dataset.artifact.kind: expected none, "
                          "clever_hans or backdoor");
    if (dataset.num_classes < 2 || dataset.num_classes > 5)
        throw ConfigError("config field dataset.num_classes: expected 2..5");
    if (dataset.train_per_class < 1 || dataset.test_per_class < 1)
        throw ConfigError("config field dataset.*_per_class: expected >= 1");
    if (explain.method != "prp" && explain.method != "upsample" &&
        explain.method != "spray-lrp")
        throw ConfigError("config field explain.method: expected prp, upsample or "
                          "spray-lrp");
    if (!valid_split(explain.split))
        throw ConfigError("config field explain.split: unknown split");
    if (eval.test != "accuracy" && eval.test != "ordering" && eval.test != "prune")
        throw ConfigError("config field eval.test: expected accuracy, ordering or prune");
    if (!valid_split(eval.split)) throw ConfigError("config field eval.split: unknown split");
    if (eval.ordering_steps < 1)
        throw ConfigError("config field eval.ordering_steps: expected >= 1");
    if (eval.ordering_images < 1)
        throw ConfigError("config field eval.ordering_images: expected >= 1");
    if (cluster.method != "coreg" && cluster.method != "spray-prp" &&
        cluster.method != "spray-lrp")
        throw ConfigError("config field cluster.method: expected coreg, spray-prp or "
                          "spray-lrp");
    if (!valid_split(cluster.split))
        throw ConfigError("config field cluster.split: unknown split");
    if (cluster.view_side < 2)
        throw ConfigError("config field cluster.view_side: expected >= 2");
    if (cluster.lambda_coreg < 0.0)
        throw ConfigError("config field cluster.lambda_coreg: expected >= 0");
    if (model.prototypes_per_class < 1)
        throw ConfigError("config field model.prototypes_per_class: expected >= 1");
    if (model.conv_channels.empty())
        throw ConfigError("config field model.conv_channels: expected a non-empty array");
    schedule.schedule.validate();
    schedule.loss_weights.validate();
}

RunConfig config_from_json(const json& doc) {
    RunConfig c;
    check_keys(doc, "",
               {"seed", "output_dir", "dataset", "model", "schedule", "loss", "explain",
                "eval", "cluster"});
    read_field(doc, "", "seed", c.seed);
    read_field(doc, "", "output_dir", c.output_dir);
    if (doc.contains("dataset")) c.dataset = dataset_from_json(doc["dataset"], "dataset");
    if (doc.contains("model")) c.model = model_from_json(doc["model"], "model");
    {
        const json empty = json::object();
        const json& sched = doc.contains("schedule") ? doc["schedule"] : empty;
        const json& loss = doc.contains("loss") ? doc["loss"] : empty;
        c.schedule = schedule_from_json(sched, loss, "schedule", "loss");
    }
    if (doc.contains("explain")) c.explain = explain_from_json(doc["explain"], "explain");
    if (doc.contains("eval")) c.eval = eval_from_json(doc["eval"], "eval");
    if (doc.contains("cluster")) c.cluster = cluster_from_json(doc["cluster"], "cluster");
    if (const char* env = std::getenv("PROTO_PRP_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end == env || *end != '\0' || v < 1)
            throw ConfigError("PROTO_PRP_THREADS must be a positive integer");
        c.threads = static_cast<int>(v);
    }
    c.validate();
    return c;
}

json config_to_json(const RunConfig& c) {
    json doc;
    doc["seed"] = c.seed;
    doc["output_dir"] = c.output_dir;
    doc["dataset"] = {
        {"num_classes", c.dataset.num_classes},
        {"image_size", c.dataset.image_size},
        {"train_per_class", c.dataset.train_per_class},
        {"test_per_class", c.dataset.test_per_class},
        {"dir", c.dataset.dir},
        {"artifact",
         {{"kind", c.dataset.artifact_kind},
          {"fraction", c.dataset.artifact.fraction},
          {"target_class", c.dataset.artifact.target_class},
          {"relabel_to", c.dataset.artifact.relabel_to},
          {"size", c.dataset.artifact.size},
          {"bottom_margin", c.dataset.artifact.bottom_margin},
          {"jitter", c.dataset.artifact.jitter},
          {"brightness_lo", c.dataset.artifact.brightness_lo},
          {"brightness_hi", c.dataset.artifact.brightness_hi},
          {"color",
           {c.dataset.artifact.color[0], c.dataset.artifact.color[1],
            c.dataset.artifact.color[2]}}}},
    };
    doc["model"] = {{"conv_channels", c.model.conv_channels},
                    {"prototypes_per_class", c.model.prototypes_per_class},
                    {"checkpoint_dir", c.model.checkpoint_dir}};
    doc["schedule"] = {
        {"total_epochs", c.schedule.schedule.total_epochs},
        {"push_every", c.schedule.schedule.push_every},
        {"last_layer_epochs_after_push", c.schedule.schedule.last_layer_epochs_after_push},
        {"lr", c.schedule.schedule.lr},
        {"lr_decay", c.schedule.schedule.lr_decay},
        {"lr_decay_every", c.schedule.schedule.lr_decay_every},
        {"momentum", c.schedule.schedule.momentum},
        {"last_layer_lr", c.schedule.schedule.last_layer_lr},
        {"batch_size", c.schedule.schedule.batch_size}};
    doc["loss"] = {{"lambda_cluster", c.schedule.loss_weights.lambda_clst},
                   {"lambda_separation", c.schedule.loss_weights.lambda_sep}};
    doc["explain"] = {{"eps", c.explain.eps},
                      {"alpha", c.explain.alpha},
                      {"beta", c.explain.beta},
                      {"method", c.explain.method},
                      {"split", c.explain.split},
                      {"image_ids", c.explain.image_ids},
                      {"prototypes", c.explain.prototypes},
                      {"target_class", c.explain.target_class}};
    doc["eval"] = {{"test", c.eval.test},
                   {"split", c.eval.split},
                   {"ordering_steps", c.eval.ordering_steps},
                   {"ordering_images", c.eval.ordering_images},
                   {"prune_class", c.eval.prune_class}};
    doc["cluster"] = {{"method", c.cluster.method},
                      {"split", c.cluster.split},
                      {"inspect_class", c.cluster.inspect_class},
                      {"lambda_coreg", c.cluster.lambda_coreg},
                      {"sigma", c.cluster.sigma},
                      {"view_side", c.cluster.view_side},
                      {"maps_dir", c.cluster.maps_dir}};
    return doc;
}

bool is_preset_name(const std::string& name) {
    return name == "CH-100" || name == "CH-50" || name == "CH-20" || name == "BD-15" ||
           name == "CLEAN";
}

RunConfig preset_config(const std::string& name) {
    RunConfig c;
    c.output_dir = "runs/" + name;
    // cooler, flatter schedule than the type defaults; speckled backgrounds
    // make early gradients noisy and the desk-scale run needs usable joint
    // steps after each push
    c.schedule.schedule.lr = 0.03f;
    c.schedule.schedule.lr_decay = 0.5f;
    c.schedule.schedule.last_layer_lr = 0.01f;
    c.model.prototypes_per_class = 10;
    // heavier separation pressure: evicts prototypes from patches that other
    // classes also contain (background), which at this scale is where they
    // otherwise settle
    c.schedule.loss_weights.lambda_sep = 0.25f;
    if (name == "CLEAN") {
        c.seed = 105;
        c.dataset.artifact_kind = "none";
        c.dataset.artifact.fraction = 0.0f;
        return c;
    }
    c.dataset.artifact.target_class = 0;
    if (name == "CH-100") {
        c.seed = 101;
        c.dataset.artifact_kind = "clever_hans";
        c.dataset.artifact.fraction = 1.0f;
    } else if (name == "CH-50") {
        c.seed = 102;
        c.dataset.artifact_kind = "clever_hans";
        c.dataset.artifact.fraction = 0.5f;
    } else if (name == "CH-20") {
        c.seed = 103;
        c.dataset.artifact_kind = "clever_hans";
        c.dataset.artifact.fraction = 0.2f;
    } else if (name == "BD-15") {
        c.seed = 104;
        c.dataset.artifact_kind = "backdoor";
        c.dataset.artifact.fraction = 0.15f;
        c.dataset.artifact.relabel_to = 1;
    } else {
        throw ConfigError("unknown preset '" + name + "'");
    }
    return c;
}

json load_config_document(const std::string& source) {
    if (is_preset_name(source)) return config_to_json(preset_config(source));
    std::ifstream in(source, std::ios::binary);
    if (!in) throw ConfigError("config file not found: " + source);
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config file " + source + ": " + e.what());
    }
    return doc;
}

void apply_override(json& doc, const std::string& key, const std::string& value) {
    if (key.empty()) throw ConfigError("empty override key");
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (start <= key.size()) {
        const std::size_t dot = key.find('.', start);
        const std::size_t end = (dot == std::string::npos) ? key.size() : dot;
        if (end == start) throw ConfigError("malformed override key '" + key + "'");
        parts.push_back(key.substr(start, end - start));
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    json* cur = &doc;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        json& next = (*cur)[parts[i]];
        if (!next.is_object() && !next.is_null())
            throw ConfigError("override key '" + key + "' descends into a non-object");
        if (next.is_null()) next = json::object();
        cur = &next;
    }
    json parsed;
    try {
        parsed = json::parse(value);
    } catch (const json::exception&) {
        parsed = value; // plain string value
    }
    (*cur)[parts.back()] = parsed;
}

} // namespace protoprp
