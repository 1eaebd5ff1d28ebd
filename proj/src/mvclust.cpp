#include "protoprp/mvclust.hpp"

#include "protoprp/errors.hpp"
#include "protoprp/prp.hpp"
#include "protoprp/rng.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace protoprp {

void ViewSet::validate() const {
    if (views.empty()) throw ConfigError("viewset has no views");
    if (items == 0 || dim == 0) throw ConfigError("viewset has empty geometry");
    for (std::size_t v = 0; v < views.size(); ++v) {
        if (views[v].size() != items * dim)
            throw ConfigError("view " + std::to_string(v) + " has wrong size");
    }
    if (flags.size() != items) throw ConfigError("viewset flag count mismatch");
}

ViewSet build_views(const std::vector<std::vector<Tensor>>& maps, ViewMode mode,
                    const std::vector<char>& flags, int view_side) {
    if (maps.empty()) throw ConfigError("build_views: no items");
    if (view_side < 2) throw ConfigError("build_views: view_side must be >= 2");
    if (flags.size() != maps.size()) throw ConfigError("build_views: flag count mismatch");
    const std::size_t items = maps.size();
    const std::size_t per_item = maps[0].size();
    if (per_item == 0) throw ConfigError("build_views: item 0 has no maps");
    for (std::size_t i = 0; i < items; ++i) {
        if (maps[i].size() != per_item)
            throw ConfigError("build_views: item " + std::to_string(i) +
                              " has a different map count");
    }
    if (mode == ViewMode::LrpSingle && per_item != 1)
        throw ConfigError("build_views: LrpSingle expects exactly one map per item");

    const std::size_t cell = static_cast<std::size_t>(view_side) * view_side;
    ViewSet out;
    out.items = items;
    out.flags = flags;
    if (mode == ViewMode::PerPrototype) {
        out.dim = cell;
        out.views.assign(per_item, std::vector<float>(items * cell));
    } else if (mode == ViewMode::SummedConcat) {
        out.dim = per_item * cell;
        out.views.assign(1, std::vector<float>(items * per_item * cell));
    } else {
        out.dim = cell;
        out.views.assign(1, std::vector<float>(items * cell));
    }

    for (std::size_t i = 0; i < items; ++i) {
        for (std::size_t m = 0; m < per_item; ++m) {
            const Tensor flat = channel_sum(maps[i][m]);
            const Tensor small = bilinear_resize(flat, view_side, view_side);
            float* dst = nullptr;
            if (mode == ViewMode::PerPrototype)
                dst = out.views[m].data() + i * cell;
            else if (mode == ViewMode::SummedConcat)
                dst = out.views[0].data() + i * out.dim + m * cell;
            else
                dst = out.views[0].data() + i * cell;
            std::memcpy(dst, small.data.data(), cell * sizeof(float));
        }
    }
    // scale-normalize each item row: total relevance mass varies by an order
    // of magnitude between items, and without this the affinity graph wires
    // every low-mass map to every other low-mass map regardless of where the
    // mass sits.  Direction, not magnitude, is the clustering signal.
    for (auto& view : out.views) {
        const std::size_t dim = view.size() / items;
        for (std::size_t i = 0; i < items; ++i) {
            float* row = view.data() + i * dim;
            double s = 0;
            for (std::size_t j = 0; j < dim; ++j) s += static_cast<double>(row[j]) * row[j];
            if (s > 0) {
                const float inv = static_cast<float>(1.0 / std::sqrt(s));
                for (std::size_t j = 0; j < dim; ++j) row[j] *= inv;
            }
        }
    }
    out.validate();
    return out;
}

namespace {

using Matrix = Eigen::MatrixXd;

bool all_rows_identical(const float* view, std::size_t items, std::size_t dim) {
    for (std::size_t i = 1; i < items; ++i) {
        if (std::memcmp(view, view + i * dim, dim * sizeof(float)) != 0) return false;
    }
    return true;
}

// XOR of per-row hashes: invariant under row permutation, so a permuted
// input reuses the same k-means stream and gets the permuted assignment.
std::uint64_t view_content_hash(const float* view, std::size_t items, std::size_t dim) {
    std::uint64_t h = 0;
    for (std::size_t i = 0; i < items; ++i)
        h ^= fnv1a64(view + i * dim, dim * sizeof(float));
    return h;
}

Matrix gaussian_affinity(const float* view, std::size_t items, std::size_t dim,
                         double sigma) {
    const std::size_t n = items;
    Matrix d2(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        d2(i, i) = 0.0;
        for (std::size_t j = i + 1; j < n; ++j) {
            const float* a = view + i * dim;
            const float* b = view + j * dim;
            double acc = 0.0;
            for (std::size_t c = 0; c < dim; ++c) {
                const double diff = static_cast<double>(a[c]) - b[c];
                acc += diff * diff;
            }
            d2(i, j) = acc;
            d2(j, i) = acc;
        }
    }
    if (sigma <= 0.0) {
        std::vector<double> dists;
        dists.reserve(n * (n - 1) / 2);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) dists.push_back(std::sqrt(d2(i, j)));
        std::sort(dists.begin(), dists.end());
        if (dists.empty()) {
            sigma = 1.0;
        } else {
            const std::size_t m = dists.size();
            sigma = (m % 2 == 1) ? dists[m / 2] : 0.5 * (dists[m / 2 - 1] + dists[m / 2]);
        }
        if (sigma <= 0.0) {
            // median collapsed onto duplicates; fall back to the smallest
            // positive distance so the kernel still discriminates
            auto it = std::upper_bound(dists.begin(), dists.end(), 0.0);
            sigma = (it != dists.end()) ? *it : 1.0;
        }
    }
    const double inv = 1.0 / (2.0 * sigma * sigma);
    Matrix w(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        w(i, i) = 1.0;
        for (std::size_t j = i + 1; j < n; ++j) {
            const double a = std::exp(-d2(i, j) * inv);
            w(i, j) = a;
            w(j, i) = a;
        }
    }
    return w;
}

// D^{-1/2} W D^{-1/2}; top eigenvectors of this are the bottom eigenvectors
// of the symmetric normalized Laplacian I - S.
Matrix normalized_similarity(const Matrix& w) {
    const Eigen::Index n = w.rows();
    Eigen::VectorXd inv_sqrt(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double deg = w.row(i).sum();
        if (!(deg > 0.0)) throw NumericError("affinity row degenerated to zero degree");
        inv_sqrt(i) = 1.0 / std::sqrt(deg);
    }
    Matrix s(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) s(i, j) = w(i, j) * inv_sqrt(i) * inv_sqrt(j);
    return s;
}

// Columns ordered by descending eigenvalue; each column's sign fixed so its
// largest-magnitude entry (first on ties) is nonnegative.
Matrix top_k_eigenvectors(const Matrix& s, int k) {
    Eigen::SelfAdjointEigenSolver<Matrix> solver(s);
    if (solver.info() != Eigen::Success) throw NumericError("eigensolver failed");
    const Eigen::Index n = s.rows();
    Matrix u(n, k);
    for (int c = 0; c < k; ++c) {
        const Eigen::Index src = n - 1 - c;
        u.col(c) = solver.eigenvectors().col(src);
        Eigen::Index pivot = 0;
        double best = -1.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const double mag = std::abs(u(i, c));
            if (mag > best) {
                best = mag;
                pivot = i;
            }
        }
        if (u(pivot, c) < 0.0) u.col(c) = -u.col(c);
    }
    return u;
}

Matrix row_normalized(const Matrix& u) {
    Matrix out = u;
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
        const double norm = out.row(i).norm();
        if (norm > 0.0) out.row(i) /= norm;
    }
    return out;
}

double sq_dist(const Matrix& x, Eigen::Index row, const Eigen::VectorXd& c) {
    double acc = 0.0;
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        const double diff = x(row, j) - c(j);
        acc += diff * diff;
    }
    return acc;
}

struct KmeansResult {
    std::vector<int> assignment;
    double inertia = std::numeric_limits<double>::infinity();
};

KmeansResult kmeans_once(const Matrix& x, int k, Rng& rng) {
    const Eigen::Index n = x.rows();
    std::vector<Eigen::VectorXd> centers;
    centers.reserve(static_cast<std::size_t>(k));
    // k-means++ seeding
    centers.push_back(x.row(static_cast<Eigen::Index>(rng.uniform_int(
                                static_cast<std::uint64_t>(n))))
                          .transpose());
    std::vector<double> best_d2(static_cast<std::size_t>(n));
    for (int c = 1; c < k; ++c) {
        double total = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            double d = sq_dist(x, i, centers[0]);
            for (std::size_t cc = 1; cc < centers.size(); ++cc)
                d = std::min(d, sq_dist(x, i, centers[cc]));
            best_d2[static_cast<std::size_t>(i)] = d;
            total += d;
        }
        Eigen::Index pick = 0;
        if (total > 0.0) {
            const double target = rng.uniform() * total;
            double run = 0.0;
            pick = n - 1;
            for (Eigen::Index i = 0; i < n; ++i) {
                run += best_d2[static_cast<std::size_t>(i)];
                if (run >= target) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = static_cast<Eigen::Index>(rng.uniform_int(static_cast<std::uint64_t>(n)));
        }
        centers.push_back(x.row(pick).transpose());
    }

    std::vector<int> assign(static_cast<std::size_t>(n), 0);
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (int iter = 0; iter < 100; ++iter) {
        bool changed = false;
        std::fill(counts.begin(), counts.end(), 0);
        for (Eigen::Index i = 0; i < n; ++i) {
            int best_c = 0;
            double best = sq_dist(x, i, centers[0]);
            for (int c = 1; c < k; ++c) {
                const double d = sq_dist(x, i, centers[static_cast<std::size_t>(c)]);
                if (d < best) {
                    best = d;
                    best_c = c;
                }
            }
            if (assign[static_cast<std::size_t>(i)] != best_c) {
                assign[static_cast<std::size_t>(i)] = best_c;
                changed = true;
            }
            ++counts[static_cast<std::size_t>(best_c)];
        }
        // revive empty clusters with the point farthest from its own center
        for (int c = 0; c < k; ++c) {
            if (counts[static_cast<std::size_t>(c)] > 0) continue;
            Eigen::Index far = -1;
            double far_d = -1.0;
            for (Eigen::Index i = 0; i < n; ++i) {
                const int a = assign[static_cast<std::size_t>(i)];
                if (counts[static_cast<std::size_t>(a)] <= 1) continue;
                const double d = sq_dist(x, i, centers[static_cast<std::size_t>(a)]);
                if (d > far_d) {
                    far_d = d;
                    far = i;
                }
            }
            if (far < 0) continue; // fewer distinct points than clusters
            --counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(far)])];
            assign[static_cast<std::size_t>(far)] = c;
            counts[static_cast<std::size_t>(c)] = 1;
            centers[static_cast<std::size_t>(c)] = x.row(far).transpose();
            changed = true;
        }
        for (int c = 0; c < k; ++c) {
            if (counts[static_cast<std::size_t>(c)] == 0) continue;
            Eigen::VectorXd mean = Eigen::VectorXd::Zero(x.cols());
            for (Eigen::Index i = 0; i < n; ++i)
                if (assign[static_cast<std::size_t>(i)] == c) mean += x.row(i).transpose();
            centers[static_cast<std::size_t>(c)] =
                mean / counts[static_cast<std::size_t>(c)];
        }
        if (!changed) break;
    }

    KmeansResult res;
    res.assignment = std::move(assign);
    res.inertia = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
        res.inertia += sq_dist(
            x, i, centers[static_cast<std::size_t>(res.assignment[static_cast<std::size_t>(i)])]);
    return res;
}

// Relabel clusters in order of first appearance so equal partitions always
// serialize identically.
void canonicalize_labels(std::vector<int>& assign, int k) {
    std::vector<int> remap(static_cast<std::size_t>(k), -1);
    int next = 0;
    for (int& a : assign) {
        if (remap[static_cast<std::size_t>(a)] < 0) remap[static_cast<std::size_t>(a)] = next++;
        a = remap[static_cast<std::size_t>(a)];
    }
}

std::vector<int> run_kmeans(const Matrix& embedding, int k, std::uint64_t km_seed) {
    KmeansResult best;
    for (int r = 0; r < 10; ++r) {
        Rng rng(sub_seed(km_seed, "restart", static_cast<std::uint64_t>(r)));
        KmeansResult cur = kmeans_once(embedding, k, rng);
        if (cur.inertia < best.inertia) best = std::move(cur);
    }
    canonicalize_labels(best.assignment, k);
    return best.assignment;
}

void check_cluster_args(std::size_t items, std::size_t dim, int k) {
    if (items < 2) throw ConfigError("clustering needs at least 2 items");
    if (dim == 0) throw ConfigError("clustering views must be non-empty");
    if (k < 1 || static_cast<std::size_t>(k) > items)
        throw ConfigError("cluster count must be in [1, items]");
}

} // namespace

std::vector<double> gaussian_affinity_dense(const std::vector<float>& view,
                                            std::size_t items, std::size_t dim,
                                            double sigma) {
    if (view.size() != items * dim) throw ConfigError("affinity: view size mismatch");
    check_cluster_args(items, dim, 1);
    const Matrix w = gaussian_affinity(view.data(), items, dim, sigma);
    std::vector<double> out(items * items);
    for (std::size_t i = 0; i < items; ++i)
        for (std::size_t j = 0; j < items; ++j)
            out[i * items + j] = w(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    return out;
}

ClusterOutcome spectral_cluster(const std::vector<float>& view, std::size_t items,
                                std::size_t dim, int k, double sigma, std::uint64_t seed) {
    if (view.size() != items * dim) throw ConfigError("spectral_cluster: view size mismatch");
    check_cluster_args(items, dim, k);
    ClusterOutcome out;
    if (all_rows_identical(view.data(), items, dim)) {
        out.assignment.assign(items, 0);
        out.degenerate = true;
        return out;
    }
    const Matrix w = gaussian_affinity(view.data(), items, dim, sigma);
    const Matrix s = normalized_similarity(w);
    const Matrix u = top_k_eigenvectors(s, k);
    const std::uint64_t km_seed =
        sub_seed(seed ^ view_content_hash(view.data(), items, dim), "kmeans");
    out.assignment = run_kmeans(row_normalized(u), k, km_seed);
    return out;
}

ClusterOutcome coreg_consensus_cluster(const ViewSet& views, int k, double lambda_coreg,
                                       std::uint64_t seed) {
    views.validate();
    check_cluster_args(views.items, views.dim, k);
    if (lambda_coreg < 0.0) throw ConfigError("lambda_coreg must be >= 0");
    const std::size_t nv = views.views.size();

    ClusterOutcome out;
    bool all_degenerate = true;
    for (std::size_t v = 0; v < nv; ++v)
        if (!all_rows_identical(views.views[v].data(), views.items, views.dim))
            all_degenerate = false;
    if (all_degenerate) {
        out.assignment.assign(views.items, 0);
        out.degenerate = true;
        return out;
    }

    std::vector<Matrix> sims;
    sims.reserve(nv);
    for (std::size_t v = 0; v < nv; ++v)
        sims.push_back(normalized_similarity(
            gaussian_affinity(views.views[v].data(), views.items, views.dim, 0.0)));

    std::vector<Matrix> u(nv);
    for (std::size_t v = 0; v < nv; ++v) u[v] = top_k_eigenvectors(sims[v], k);

    const int max_rounds = 50;
    const double tol = 1e-4;
    out.converged = false;
    for (int round = 0; round < max_rounds; ++round) {
        double change = 0.0;
        for (std::size_t v = 0; v < nv; ++v) {
            Matrix m = sims[v];
            for (std::size_t w = 0; w < nv; ++w) {
                if (w == v) continue;
                m.noalias() += lambda_coreg * (u[w] * u[w].transpose());
            }
            const Matrix fresh = top_k_eigenvectors(m, k);
            // ||UU^T - VV^T||_F^2 = 2k - 2||U^T V||_F^2 for orthonormal cols
            const double overlap = (u[v].transpose() * fresh).squaredNorm();
            const double delta2 = std::max(0.0, 2.0 * k - 2.0 * overlap);
            change = std::max(change, std::sqrt(delta2));
            u[v] = fresh;
        }
        out.rounds = round + 1;
        if (change < tol) {
            out.converged = true;
            break;
        }
    }

    // Consensus view = the view whose post-co-regularization embedding carries
    // the cleanest *balanced* k-way structure.  Quality = balance x explained
    // variance of the view's own k-means: a split that isolates a couple of
    // outliers explains its variance too but has balance near zero, while a
    // genuine grouping keeps both factors high.
    const std::uint64_t km_seed = sub_seed(
        seed ^ view_content_hash(views.views[0].data(), views.items, views.dim), "kmeans");
    std::size_t lead = 0;
    double best_q = -1.0;
    std::vector<std::vector<int>> labels(nv);
    for (std::size_t v = 0; v < nv; ++v) {
        const Matrix e = row_normalized(u[v]);
        labels[v] = run_kmeans(e, k, km_seed);
        std::vector<long> sizes(k, 0);
        Matrix cent = Matrix::Zero(k, e.cols());
        for (std::size_t i = 0; i < views.items; ++i) {
            sizes[labels[v][i]]++;
            cent.row(labels[v][i]) += e.row(static_cast<Eigen::Index>(i));
        }
        long min_size = *std::min_element(sizes.begin(), sizes.end());
        for (int c = 0; c < k; ++c)
            if (sizes[c] > 0) cent.row(c) /= static_cast<double>(sizes[c]);
        const Eigen::RowVectorXd mean = e.colwise().mean();
        double ssw = 0.0, sst = 0.0;
        for (std::size_t i = 0; i < views.items; ++i) {
            const auto row = e.row(static_cast<Eigen::Index>(i));
            ssw += (row - cent.row(labels[v][i])).squaredNorm();
            sst += (row - mean).squaredNorm();
        }
        const double balance = static_cast<double>(min_size) * k / views.items;
        const double explained = sst > 0.0 ? 1.0 - ssw / sst : 0.0;
        const double q = balance * explained;
        if (q > best_q) {
            best_q = q;
            lead = v;
        }
    }
    out.assignment = labels[lead];
    return out;
}

ClusterScore score_clustering(const std::vector<int>& assignment,
                              const std::vector<char>& flags) {
    if (assignment.size() != flags.size() || assignment.empty())
        throw ConfigError("score_clustering: size mismatch");
    // counts[cluster][is_artifact]
    long counts[2][2] = {{0, 0}, {0, 0}};
    for (std::size_t i = 0; i < assignment.size(); ++i) {
        const int a = assignment[i];
        if (a < 0 || a > 1)
            throw ConfigError("score_clustering expects cluster ids 0 or 1");
        ++counts[a][flags[i] ? 1 : 0];
    }
    const double total = static_cast<double>(assignment.size());
    // matching A: cluster 1 is the artifact cluster; matching B: cluster 0
    const long correct_a = counts[0][0] + counts[1][1];
    const long correct_b = counts[1][0] + counts[0][1];
    ClusterScore score;
    score.artifact_cluster = (correct_a >= correct_b) ? 1 : 0;
    score.acc = static_cast<double>(std::max(correct_a, correct_b)) / total;
    const int ac = score.artifact_cluster;
    const double tp = static_cast<double>(counts[ac][1]);
    const double fp = static_cast<double>(counts[ac][0]);
    const double fn = static_cast<double>(counts[1 - ac][1]);
    const double precision = (tp + fp > 0.0) ? tp / (tp + fp) : 0.0;
    const double recall = (tp + fn > 0.0) ? tp / (tp + fn) : 0.0;
    score.f1 = (precision + recall > 0.0) ? 2.0 * precision * recall / (precision + recall)
                                          : 0.0;
    return score;
}

} // namespace protoprp
