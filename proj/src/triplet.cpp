#include "anl/triplet.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

#include "anl/log.hpp"

namespace anl {

namespace {

double row_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
    return std::sqrt(s);
}

// Adds scale * (a - b) / |a - b| to ga and subtracts it from gb.
void push_pair(Mat64& ga, std::size_t ra, std::span<const double> a, Mat64& gb, std::size_t rb,
               std::span<const double> b, double dist, double scale) {
    if (dist == 0.0) return;
    for (std::size_t k = 0; k < a.size(); ++k) {
        const double g = scale * (a[k] - b[k]) / dist;
        ga(ra, k) += g;
        gb(rb, k) -= g;
    }
}

}  // namespace

TripletResult batch_hard_triplet_loss_grad(const Mat64& features, std::span<const int> labels,
                                           const Mat64& outlier_variants, double margin) {
    if (margin < 0.0) throw std::invalid_argument("triplet: margin must be >= 0");
    check_same_size(features.rows(), labels.size(), "triplet: labels");
    const std::size_t n = features.rows();
    std::vector<std::size_t> variant_of(n, 0);
    std::size_t n_out = 0;
    for (std::size_t i = 0; i < n; ++i)
        if (labels[i] < 0) variant_of[i] = n_out++;
    check_same_size(outlier_variants.rows(), n_out, "triplet: one variant per outlier row");
    if (n_out > 0) check_same_size(outlier_variants.cols(), features.cols(), "triplet: variant dim");

    TripletResult r;
    r.grad_features = Mat64(n, features.cols());
    r.grad_variants = Mat64(outlier_variants.rows(), features.cols());

    // Per-anchor choices first; gradients are applied after normalization.
    struct Active {
        std::size_t a, p, neg;
        bool p_is_variant;
        double dp, dn;
    };
    std::vector<Active> active;
    double total = 0.0;

    for (std::size_t a = 0; a < n; ++a) {
        const auto fa = features.row(a);
        const bool outlier = labels[a] < 0;
        double dp = -1.0, dn = 0.0;
        std::size_t p = n, neg = n;
        bool p_is_variant = false;
        if (outlier) {
            p = variant_of[a];
            p_is_variant = true;
            dp = row_distance(fa, outlier_variants.row(p));
        }
        bool have_neg = false;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == a) continue;
            const double d = row_distance(fa, features.row(j));
            const bool positive = !outlier && labels[j] == labels[a];
            if (positive) {
                if (d > dp) {
                    dp = d;
                    p = j;
                }
            } else if (!have_neg || d < dn) {
                dn = d;
                neg = j;
                have_neg = true;
            }
        }
        if (!have_neg || dp < 0.0) {
            ++r.excluded_anchors;
            continue;
        }
        ++r.anchors;
        if (outlier) ++r.outlier_anchors;
        const double hinge = margin + dp - dn;
        if (hinge > 0.0) {
            total += hinge;
            active.push_back({a, p, neg, p_is_variant, dp, dn});
        }
    }
    if (r.excluded_anchors > 0)
        log::warn("triplet: " + std::to_string(r.excluded_anchors) + " anchors without positive or negative excluded");
    if (r.anchors == 0) return r;

    const double inv = 1.0 / static_cast<double>(r.anchors);
    r.loss = total * inv;
    for (const auto& t : active) {
        const auto fa = features.row(t.a);
        if (t.p_is_variant)
            push_pair(r.grad_features, t.a, fa, r.grad_variants, t.p, outlier_variants.row(t.p), t.dp, inv);
        else
            push_pair(r.grad_features, t.a, fa, r.grad_features, t.p, features.row(t.p), t.dp, inv);
        push_pair(r.grad_features, t.a, fa, r.grad_features, t.neg, features.row(t.neg), t.dn, -inv);
    }
    return r;
}

TripletBatch sample_triplet_batch(std::span<const std::size_t> positions, std::span<const int> labels,
                                  std::span<const std::size_t> outlier_pool, int p, int k, int max_outliers,
                                  Rng& rng) {
    check_same_size(positions.size(), labels.size(), "sample_triplet_batch");
    std::map<int, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < positions.size(); ++i) members[labels[i]].push_back(positions[i]);
    std::vector<int> ids;
    for (const auto& kv : members) ids.push_back(kv.first);
    rng.shuffle(ids);
    if (static_cast<int>(ids.size()) > p) ids.resize(static_cast<std::size_t>(p));

    TripletBatch b;
    for (int id : ids) {
        auto pool = members.at(id);
        const auto want = static_cast<std::size_t>(k);
        if (pool.size() >= want) {
            rng.shuffle(pool);
            for (std::size_t t = 0; t < want; ++t) b.labeled.push_back(pool[t]);
        } else {
            for (std::size_t t = 0; t < want; ++t)
                b.labeled.push_back(pool[static_cast<std::size_t>(rng.below(pool.size()))]);
        }
        for (std::size_t t = 0; t < want; ++t) b.labels.push_back(id);
    }
    std::vector<std::size_t> out(outlier_pool.begin(), outlier_pool.end());
    rng.shuffle(out);
    if (static_cast<int>(out.size()) > max_outliers) out.resize(static_cast<std::size_t>(std::max(max_outliers, 0)));
    b.outliers = std::move(out);
    return b;
}

}  // namespace anl
