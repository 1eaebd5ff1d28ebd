#pragma once

#include "protoprp/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace protoprp {

// N items, each seen through one or more flattened 80x80 relevance views.
struct ViewSet {
    std::vector<std::vector<float>> views; // views[v]: items x dim, row-major
    std::size_t items = 0;
    std::size_t dim = 0;
    std::vector<char> flags; // ground-truth artifact flags, scoring only
    void validate() const;
};

enum class ViewMode { PerPrototype, SummedConcat, LrpSingle };

// maps[i] holds item i's relevance maps ([C,H,W] or [H,W]). PerPrototype
// turns each map position into its own view; SummedConcat concatenates all of
// an item's downscaled maps into a single long view; LrpSingle expects
// exactly one (class) map per item. Every map is channel-summed and
// bilinearly resized to view_side x view_side first.
ViewSet build_views(const std::vector<std::vector<Tensor>>& maps, ViewMode mode,
                    const std::vector<char>& flags, int view_side = 80);

struct ClusterOutcome {
    std::vector<int> assignment; // cluster ids, relabeled by first occurrence
    bool degenerate = false;     // all-identical inputs: single cluster
    bool converged = true;       // consensus loop reached tolerance
    int rounds = 0;
};

// Gaussian affinity (sigma <= 0 -> median pairwise distance), symmetric
// normalized Laplacian, top-k eigenvectors, row normalization, k-means
// (k-means++, 10 restarts, best inertia). The k-means seed mixes `seed` with
// a row-order-invariant content hash so permuting items permutes the result.
ClusterOutcome spectral_cluster(const std::vector<float>& view, std::size_t items,
                                std::size_t dim, int k, double sigma, std::uint64_t seed);

// Pairwise co-regularized consensus: each round re-solves view v's embedding
// from S_v + lambda * sum_{w != v} U_w U_w^T; stops when every view's
// projection changes < 1e-4 in Frobenius norm or after 50 rounds. View 0 is
// the designated consensus view whose embedding feeds the final k-means, so
// a one-view set reduces exactly to spectral_cluster.
ClusterOutcome coreg_consensus_cluster(const ViewSet& views, int k, double lambda_coreg,
                                       std::uint64_t seed);

struct ClusterScore {
    double acc = 0;
    double f1 = 0;
    int artifact_cluster = -1;
};

// acc under the best of the two cluster-to-{clean,artifact} matchings; F1 of
// the matched artifact cluster (0/0 ratios count as 0).
ClusterScore score_clustering(const std::vector<int>& assignment,
                              const std::vector<char>& flags);

// Dense items x items Gaussian affinity, exposed for diagnostics and tests.
std::vector<double> gaussian_affinity_dense(const std::vector<float>& view,
                                            std::size_t items, std::size_t dim,
                                            double sigma);

} // namespace protoprp
