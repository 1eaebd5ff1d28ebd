#include "protoprp/cli.hpp"

#include "protoprp/errors.hpp"
#include "protoprp/eval.hpp"
#include "protoprp/mvclust.hpp"
#include "protoprp/png.hpp"
#include "protoprp/prp.hpp"
#include "protoprp/ptns.hpp"
#include "protoprp/rng.hpp"
#include "protoprp/runio.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

namespace protoprp {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const char* kUsage =
    "usage: proto-prp <command> [--config <file|preset>] [--key=value ...]\n"
    "\n"
    "commands:\n"
    "  gen-data   generate the synthetic sign dataset (train/test splits)\n"
    "  train      train a prototype model on the generated dataset\n"
    "  explain    write relevance maps (PTNS + PNG) for selected images\n"
    "  eval       accuracy, relevance-ordering or pruning reports\n"
    "  cluster    multi-view clustering of relevance maps\n"
    "\n"
    "presets: CH-100, CH-50, CH-20, BD-15, CLEAN\n"
    "overrides use dotted config paths, e.g. --dataset.artifact.fraction=0.2\n"
    "PROTO_PRP_THREADS caps worker threads (advisory).\n";

std::string fmt_name(const char* pattern, int a, int b = 0) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), pattern, a, b);
    return std::string(buf);
}

std::vector<std::string> list_files_recursive(const std::string& dir) {
    std::vector<std::string> files;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
        if (entry.is_regular_file()) files.push_back(entry.path().generic_string());
    }
    std::sort(files.begin(), files.end());
    return files;
}

int argmax_first(const Tensor& v) {
    int best = 0;
    for (int i = 1; i < v.dim(0); ++i) {
        if (v.data[static_cast<std::size_t>(i)] > v.data[static_cast<std::size_t>(best)])
            best = i;
    }
    return best;
}

ExplainSettings settings_from(const RunConfig& c) {
    ExplainSettings s;
    s.eps = c.explain.eps;
    s.alpha = c.explain.alpha;
    s.beta = c.explain.beta;
    s.domain = InputDomain::unit(3);
    s.validate();
    return s;
}

void write_json_file(const std::string& path, const json& doc) {
    write_file_text(path, doc.dump(2) + "\n");
}

std::vector<int> class_prototypes(const PrototypeModel& model, int cls) {
    std::vector<int> out;
    for (int m = 0; m < model.num_prototypes(); ++m)
        if (model.class_of_prototype[static_cast<std::size_t>(m)] == cls) out.push_back(m);
    return out;
}

struct CsvRow {
    int id = 0, label = 0, flag = 0;
};

std::vector<CsvRow> read_labels_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line.rfind("id,label,artifact_flag", 0) != 0)
        throw IoError(path + ": missing id,label,artifact_flag header");
    std::vector<CsvRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        CsvRow row;
        if (std::sscanf(line.c_str(), "%d,%d,%d", &row.id, &row.label, &row.flag) != 3)
            throw IoError(path + ": malformed row '" + line + "'");
        rows.push_back(row);
    }
    return rows;
}

} // namespace

std::vector<std::string> cmd_gen_data(const RunConfig& c) {
    const std::string root = c.dataset_dir();
    LabeledDataset train =
        gen_base_dataset(c.dataset.num_classes, c.dataset.train_per_class,
                         c.dataset.image_size, sub_seed(c.seed, "data-train"));
    train.split = "train";
    LabeledDataset test =
        gen_base_dataset(c.dataset.num_classes, c.dataset.test_per_class,
                         c.dataset.image_size, sub_seed(c.seed, "data-test"));
    test.split = "test";

    const bool artifact = c.dataset.artifact_kind != "none";
    const ArtifactSpec spec = c.dataset.artifact;
    if (c.dataset.artifact_kind == "clever_hans") {
        train = insert_clever_hans(train, spec);
    } else if (c.dataset.artifact_kind == "backdoor") {
        train = insert_backdoor(train, spec);
    }

    write_dataset_dir(root + "/train", train, artifact ? &spec : nullptr);
    if (artifact) {
        ArtifactSpec test_spec = spec;
        test_spec.relabel_to = -1; // test labels stay truthful
        auto [art_test, clean_test] = make_test_variants(test, test_spec);
        write_dataset_dir(root + "/test-artifact", art_test, &test_spec);
        write_dataset_dir(root + "/test-clean", clean_test, nullptr);
    } else {
        test.split = "test-clean";
        write_dataset_dir(root + "/test-clean", test, nullptr);
    }

    std::size_t flagged = 0;
    for (char f : train.artifact_flags) flagged += f ? 1 : 0;
    std::cout << "wrote dataset to " << root << " (train " << train.images.size()
              << " images, " << flagged << " with artifact)\n";
    return list_files_recursive(root);
}

std::vector<std::string> cmd_train(const RunConfig& c) {
    const LabeledDataset train_ds = read_dataset_dir(c.split_dir("train"));
    if (train_ds.images.empty()) throw ConfigError("training dataset is empty");
    const int size = train_ds.images[0].dim(1);
    PrototypeModel model =
        make_default_model(train_ds.num_classes, c.model.prototypes_per_class, size,
                           c.model.conv_channels, sub_seed(c.seed, "model-init"));

    TrainSchedule sched = c.schedule.schedule;
    sched.seed = sub_seed(c.seed, "train");
    const TrainReport report = train(model, train_ds, sched, c.schedule.loss_weights);

    CheckpointMeta meta;
    meta.schedule = sched;
    meta.weights = c.schedule.loss_weights;
    meta.pushes = report.pushes;
    save_checkpoint(c.checkpoint_dir(), model, meta);

    json tr;
    tr["epochs"] = json::array();
    for (const EpochStats& e : report.epochs)
        tr["epochs"].push_back({{"epoch", e.epoch},
                                {"lr", e.lr},
                                {"total", e.total},
                                {"ce", e.ce},
                                {"cluster", e.cluster},
                                {"separation", e.separation},
                                {"train_acc", e.train_acc}});
    tr["last_layer_epochs"] = json::array();
    for (const EpochStats& e : report.last_layer_epochs)
        tr["last_layer_epochs"].push_back(
            {{"epoch", e.epoch}, {"lr", e.lr}, {"ce", e.ce}, {"train_acc", e.train_acc}});
    tr["pushes"] = json::array();
    for (const PushRecord& p : report.pushes) {
        json entries = json::array();
        for (const PushEntry& e : p.entries)
            entries.push_back({{"prototype", e.prototype},
                               {"image_id", e.image_id},
                               {"cell_i", e.cell_i},
                               {"cell_j", e.cell_j},
                               {"distance", e.distance}});
        tr["pushes"].push_back({{"epoch", p.epoch}, {"entries", entries}});
    }
    const std::string report_path = c.output_dir + "/train_report.json";
    write_json_file(report_path, tr);

    const double final_acc =
        report.epochs.empty() ? 0.0 : report.epochs.back().train_acc;
    std::cout << "trained " << report.epochs.size() << " epochs, final train accuracy "
              << final_acc << ", checkpoint at " << c.checkpoint_dir() << "\n";

    std::vector<std::string> files = list_files_recursive(c.checkpoint_dir());
    files.push_back(report_path);
    return files;
}

std::vector<std::string> cmd_explain(const RunConfig& c) {
    const PrototypeModel model = load_checkpoint(c.checkpoint_dir());
    const LabeledDataset ds = read_dataset_dir(c.split_dir(c.explain.split));
    const ExplainSettings settings = settings_from(c);
    const std::string dir = c.output_dir + "/explain";
    std::vector<std::string> files;

    for (int id : c.explain.image_ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= ds.images.size())
            throw ConfigError("explain.image_ids: image " + std::to_string(id) +
                              " not in split '" + c.explain.split + "'");
        const Tensor& img = ds.images[static_cast<std::size_t>(id)];
        const ForwardTrace trace = forward(model, img, TraceLevel::Explain);

        std::vector<std::pair<std::string, Tensor>> maps;
        if (c.explain.method == "spray-lrp") {
            const int target = c.explain.target_class >= 0 ? c.explain.target_class
                                                           : argmax_first(trace.logits);
            const RelevanceMap rm = spray_lrp_map_from_trace(model, img, trace, target, settings);
            maps.emplace_back(fmt_name("img_%04d_class_%d_spraylrp", id, target),
                              channel_sum(rm.values));
        } else {
            std::vector<int> protos = c.explain.prototypes;
            if (protos.empty()) protos.push_back(argmax_first(trace.similarities));
            for (int m : protos) {
                if (m < 0 || m >= model.num_prototypes())
                    throw ConfigError("explain.prototypes: index " + std::to_string(m) +
                                      " out of range");
                if (c.explain.method == "prp") {
                    const RelevanceMap rm = prp_map_from_trace(model, img, trace, m, settings);
                    maps.emplace_back(fmt_name("img_%04d_proto_%02d_prp", id, m),
                                      channel_sum(rm.values));
                } else {
                    const RelevanceMap rm = protopnet_heatmap(model, img, m);
                    maps.emplace_back(fmt_name("img_%04d_proto_%02d_upsample", id, m),
                                      rm.values);
                }
            }
        }
        for (const auto& [name, map] : maps) {
            const std::string ptns_path = dir + "/" + name + ".ptns";
            const std::string png_path = dir + "/" + name + ".png";
            write_ptns(ptns_path, map);
            write_relevance_png(png_path, map);
            files.push_back(ptns_path);
            files.push_back(png_path);
        }
    }
    std::cout << "wrote " << files.size() / 2 << " relevance maps to " << dir << "\n";
    return files;
}

std::vector<std::string> cmd_eval(const RunConfig& c) {
    const PrototypeModel model = load_checkpoint(c.checkpoint_dir());
    const LabeledDataset ds = read_dataset_dir(c.split_dir(c.eval.split));
    std::vector<std::string> files;
    json metrics;
    metrics["test"] = c.eval.test;
    metrics["split"] = c.eval.split;

    if (c.eval.test == "accuracy") {
        const AccuracyReport rep = accuracy(model, ds, true);
        metrics["accuracy"] = rep.overall;
        metrics["per_class"] = rep.per_class;
        metrics["per_class_count"] = rep.per_class_count;
        std::cout << "accuracy on " << c.eval.split << ": " << rep.overall << "\n";
    } else if (c.eval.test == "ordering") {
        const ExplainSettings settings = settings_from(c);
        const std::uint64_t seed = sub_seed(c.seed, "eval-ordering");
        const auto prp_provider = [&](int idx, int m) {
            return channel_sum(
                prp_map(model, ds.images[static_cast<std::size_t>(idx)], m, settings).values);
        };
        const auto ups_provider = [&](int idx, int m) {
            return protopnet_heatmap(model, ds.images[static_cast<std::size_t>(idx)], m).values;
        };
        const OrderingCurve prp = averaged_ordering(model, ds, prp_provider,
                                                    c.eval.ordering_images,
                                                    c.eval.ordering_steps, seed, "prp");
        const OrderingCurve ups = averaged_ordering(model, ds, ups_provider,
                                                    c.eval.ordering_images,
                                                    c.eval.ordering_steps, seed, "upsample");
        const OrderingCurve rnd = random_ordering(model, ds, c.eval.ordering_images,
                                                  c.eval.ordering_steps, seed);
        const std::string csv_path = c.output_dir + "/ordering.csv";
        write_file_text(csv_path, ordering_curves_csv({prp, ups, rnd}));
        files.push_back(csv_path);
        metrics["images"] = c.eval.ordering_images;
        metrics["steps"] = c.eval.ordering_steps;
        metrics["auc"] = {{"prp", curve_auc(prp)},
                          {"upsample", curve_auc(ups)},
                          {"random", curve_auc(rnd)}};
        std::cout << "ordering AUC prp=" << curve_auc(prp) << " upsample=" << curve_auc(ups)
                  << " random=" << curve_auc(rnd) << "\n";
    } else { // prune
        const int cls = c.eval.prune_class >= 0 ? c.eval.prune_class
                                                : c.dataset.artifact.target_class;
        const DropMatrix dm = pruning_matrix(model, ds, cls);
        const std::string csv_path = c.output_dir + "/drop_matrix.csv";
        write_file_text(csv_path, drop_matrix_csv(dm));
        files.push_back(csv_path);
        metrics["class"] = cls;
        metrics["base_accuracy"] = dm.base_accuracy;
        std::cout << "pruning matrix for class " << cls << " (base accuracy "
                  << dm.base_accuracy << ")\n";
    }
    const std::string metrics_path = c.output_dir + "/metrics.json";
    write_json_file(metrics_path, metrics);
    files.push_back(metrics_path);
    return files;
}

std::vector<std::string> cmd_cluster(const RunConfig& c) {
    std::vector<std::string> files;
    ViewMode mode = ViewMode::PerPrototype;
    if (c.cluster.method == "spray-prp") mode = ViewMode::SummedConcat;
    if (c.cluster.method == "spray-lrp") mode = ViewMode::LrpSingle;

    std::vector<std::vector<Tensor>> maps;
    std::vector<char> flags;
    std::vector<int> ids;

    if (!c.cluster.maps_dir.empty()) {
        const std::vector<CsvRow> rows = read_labels_csv(c.cluster.maps_dir + "/labels.csv");
        for (const CsvRow& row : rows) {
            std::vector<Tensor> item;
            for (int v = 0;; ++v) {
                const std::string path = c.cluster.maps_dir + "/" +
                                         fmt_name("item_%04d_view_%02d.ptns", row.id, v);
                if (!fs::exists(path)) break;
                item.push_back(read_ptns(path));
            }
            if (item.empty())
                throw IoError("no view files for item " + std::to_string(row.id) + " in " +
                              c.cluster.maps_dir);
            maps.push_back(std::move(item));
            flags.push_back(static_cast<char>(row.flag != 0));
            ids.push_back(row.id);
        }
    } else {
        const PrototypeModel model = load_checkpoint(c.checkpoint_dir());
        const LabeledDataset ds = read_dataset_dir(c.split_dir(c.cluster.split));
        const ExplainSettings settings = settings_from(c);
        const int inspect = c.cluster.inspect_class >= 0 ? c.cluster.inspect_class
                                                         : c.dataset.artifact.target_class;
        if (inspect < 0 || inspect >= ds.num_classes)
            throw ConfigError("cluster.inspect_class out of range");
        const std::vector<int> protos = class_prototypes(model, inspect);
        if (protos.empty())
            throw ConfigError("no prototypes belong to class " + std::to_string(inspect));

        const std::string maps_dir = c.output_dir + "/maps";
        std::string csv = "id,label,artifact_flag\n";
        for (std::size_t i = 0; i < ds.images.size(); ++i) {
            if (ds.labels[i] != inspect) continue;
            const Tensor& img = ds.images[i];
            std::vector<Tensor> item;
            if (mode == ViewMode::LrpSingle) {
                item.push_back(channel_sum(spray_lrp_map(model, img, inspect, settings).values));
            } else {
                const ForwardTrace trace = forward(model, img, TraceLevel::Explain);
                for (int m : protos)
                    item.push_back(channel_sum(
                        prp_map_from_trace(model, img, trace, m, settings).values));
            }
            for (std::size_t v = 0; v < item.size(); ++v) {
                const std::string path =
                    maps_dir + "/" +
                    fmt_name("item_%04d_view_%02d.ptns", static_cast<int>(i),
                             static_cast<int>(v));
                write_ptns(path, item[v]);
                files.push_back(path);
            }
            csv += std::to_string(i) + "," + std::to_string(ds.labels[i]) + "," +
                   (ds.artifact_flags[i] ? "1" : "0") + "\n";
            maps.push_back(std::move(item));
            flags.push_back(ds.artifact_flags[i]);
            ids.push_back(static_cast<int>(i));
        }
        write_file_text(maps_dir + "/labels.csv", csv);
        files.push_back(maps_dir + "/labels.csv");
    }

    if (maps.size() < 2) throw ConfigError("clustering needs at least 2 items");
    const ViewSet views = build_views(maps, mode, flags, c.cluster.view_side);
    const std::uint64_t seed = sub_seed(c.seed, "cluster");
    ClusterOutcome outcome;
    if (c.cluster.method == "coreg") {
        outcome = coreg_consensus_cluster(views, 2, c.cluster.lambda_coreg, seed);
    } else {
        outcome = spectral_cluster(views.views[0], views.items, views.dim, 2,
                                   c.cluster.sigma, seed);
    }
    if (outcome.degenerate)
        std::cerr << "warning: all views identical; reporting a single cluster\n";
    if (!outcome.converged)
        std::cerr << "warning: consensus did not converge; using best iterate\n";

    const ClusterScore score = score_clustering(outcome.assignment, flags);

    std::string csv = "id,cluster,is_artifact_cluster\n";
    for (std::size_t i = 0; i < outcome.assignment.size(); ++i) {
        csv += std::to_string(ids[i]) + "," + std::to_string(outcome.assignment[i]) + "," +
               (outcome.assignment[i] == score.artifact_cluster ? "1" : "0") + "\n";
    }
    const std::string csv_path = c.output_dir + "/clusters.csv";
    write_file_text(csv_path, csv);
    files.push_back(csv_path);

    json metrics;
    metrics["method"] = c.cluster.method;
    metrics["items"] = views.items;
    metrics["views"] = views.views.size();
    metrics["view_dim"] = views.dim;
    metrics["acc"] = score.acc;
    metrics["f1"] = score.f1;
    metrics["artifact_cluster"] = score.artifact_cluster;
    metrics["degenerate"] = outcome.degenerate;
    metrics["converged"] = outcome.converged;
    metrics["rounds"] = outcome.rounds;
    const std::string metrics_path = c.output_dir + "/metrics.json";
    write_json_file(metrics_path, metrics);
    files.push_back(metrics_path);

    std::cout << "clustered " << views.items << " items (" << c.cluster.method
              << "): acc " << score.acc << ", artifact F1 " << score.f1 << "\n";
    return files;
}

int run_cli(int argc, const char* const* argv) {
    try {
        if (argc < 2) {
            std::cerr << kUsage;
            return 2;
        }
        const std::string command = argv[1];
        if (command == "-h" || command == "--help" || command == "help") {
            std::cout << kUsage;
            return 0;
        }
        if (command != "gen-data" && command != "train" && command != "explain" &&
            command != "eval" && command != "cluster")
            throw ConfigError("unknown command '" + command + "'");

        std::string config_source;
        std::vector<std::pair<std::string, std::string>> overrides;
        for (int i = 2; i < argc; ++i) {
            const std::string arg = argv[i];
            if (arg == "-h" || arg == "--help") {
                std::cout << kUsage;
                return 0;
            }
            if (arg.rfind("--", 0) != 0)
                throw ConfigError("unexpected argument '" + arg + "'");
            const std::string body = arg.substr(2);
            if (body == "config") {
                if (i + 1 >= argc) throw ConfigError("--config needs a value");
                config_source = argv[++i];
            } else if (body.rfind("config=", 0) == 0) {
                config_source = body.substr(7);
            } else {
                const std::size_t eq = body.find('=');
                if (eq == std::string::npos || eq == 0)
                    throw ConfigError("expected --key=value, got '" + arg + "'");
                overrides.emplace_back(body.substr(0, eq), body.substr(eq + 1));
            }
        }

        json doc = config_source.empty() ? json::object()
                                         : load_config_document(config_source);
        for (const auto& [key, value] : overrides) apply_override(doc, key, value);
        const RunConfig config = config_from_json(doc);

        std::vector<std::string> files;
        if (command == "gen-data") files = cmd_gen_data(config);
        else if (command == "train") files = cmd_train(config);
        else if (command == "explain") files = cmd_explain(config);
        else if (command == "eval") files = cmd_eval(config);
        else files = cmd_cluster(config);

        write_run_record(config.output_dir, command, config_to_json(config), files);
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

} // namespace protoprp
