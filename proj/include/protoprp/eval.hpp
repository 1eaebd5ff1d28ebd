#pragma once

#include "protoprp/model.hpp"
#include "protoprp/prp.hpp"

#include <functional>
#include <string>
#include <vector>

namespace protoprp {

struct OrderingCurve {
    std::vector<double> fractions; // strictly increasing, 0 .. 1
    std::vector<double> scores;
    std::string baseline = "prp";               // prp / upsample / random
    std::string aggregation = "per-prototype"; // per-prototype / averaged
    void validate() const;
};

struct OrderingTarget {
    enum Kind { Similarity, ClassScore };
    Kind kind = Similarity;
    int index = 0; // prototype for Similarity, class for ClassScore
};

// Starts from a seeded uniform-random image and replaces the top-t fraction
// of pixels (by channel-summed map relevance, ties row-major) with the test
// image, recording the target score at each of steps+1 fractions.
OrderingCurve relevance_ordering(const PrototypeModel& model, const RelevanceMap& map,
                                 const Tensor& image, OrderingTarget target, int steps,
                                 std::uint64_t seed, const std::string& baseline_tag);

// Similarity curves averaged over a seeded image sample and all prototypes.
// provider(ds_index, m) returns the relevance values used to order pixels.
OrderingCurve averaged_ordering(const PrototypeModel& model, const LabeledDataset& ds,
                                const std::function<Tensor(int, int)>& provider,
                                int num_images, int steps, std::uint64_t seed,
                                const std::string& baseline_tag);

// Random pixel order control under the same averaging.
OrderingCurve random_ordering(const PrototypeModel& model, const LabeledDataset& ds,
                              int num_images, int steps, std::uint64_t seed);

double curve_auc(const OrderingCurve& curve);

struct DropMatrix {
    double base_accuracy = 0;                // class-c accuracy, nothing pruned
    std::vector<int> prototype_ids;          // the class's prototypes, ascending
    std::vector<std::vector<double>> drop;   // symmetric; diagonal = single removal
};

// Class-c accuracy drop for every single and pairwise removal of that class's
// prototypes, last layer untouched.
DropMatrix pruning_matrix(const PrototypeModel& model, const LabeledDataset& ds, int class_c);

struct AccuracyReport {
    double overall = 0;
    std::vector<double> per_class;
    std::vector<std::size_t> per_class_count;
};

AccuracyReport accuracy(const PrototypeModel& model, const LabeledDataset& ds,
                        bool per_class);

// steps+1 rows; one score column per curve, labeled by its baseline tag.
std::string ordering_curves_csv(const std::vector<OrderingCurve>& curves);
std::string drop_matrix_csv(const DropMatrix& dm);

} // namespace protoprp
