#include "anl/trainer.hpp"

#include <algorithm>
#include <set>

#include "anl/fda.hpp"
#include "anl/log.hpp"
#include "anl/rng.hpp"
#include "anl/synth_world.hpp"

namespace anl {

MainLoss main_loss_grad(const MainModels& m, const Mat64& x, std::span<const int> batch_labels,
                        std::size_t no, double margin) {
    const std::size_t nl = batch_labels.size();
    if (x.rows() != nl + 2 * no) throw std::invalid_argument("main_loss_grad: row count mismatch");
    MainLoss out;
    const auto enc = forward(m.encoder, x);
    Mat64 labeled_emb(nl, enc.output.cols());
    for (std::size_t r = 0; r < nl; ++r)
        std::copy(enc.output.row(r).begin(), enc.output.row(r).end(), labeled_emb.row(r).begin());
    const auto cls = forward(m.classifier, labeled_emb);
    const auto ce = source_ce_loss_grad(cls.output, batch_labels);
    out.classifier = backward(m.classifier, cls.cache, ce.grad);

    std::vector<double> norms;
    const Mat64 unit = l2_normalize_rows(enc.output, &norms);
    Mat64 feat(nl + no, unit.cols()), var(no, unit.cols());
    for (std::size_t r = 0; r < nl + no; ++r) std::copy(unit.row(r).begin(), unit.row(r).end(), feat.row(r).begin());
    for (std::size_t o = 0; o < no; ++o)
        std::copy(unit.row(nl + no + o).begin(), unit.row(nl + no + o).end(), var.row(o).begin());
    std::vector<int> labels(batch_labels.begin(), batch_labels.end());
    labels.resize(nl + no, -1);
    const auto tri = batch_hard_triplet_loss_grad(feat, labels, var, margin);

    Mat64 d_unit(unit.rows(), unit.cols());
    for (std::size_t r = 0; r < nl + no; ++r)
        std::copy(tri.grad_features.row(r).begin(), tri.grad_features.row(r).end(), d_unit.row(r).begin());
    for (std::size_t o = 0; o < no; ++o)
        std::copy(tri.grad_variants.row(o).begin(), tri.grad_variants.row(o).end(), d_unit.row(nl + no + o).begin());
    Mat64 d_emb = l2_normalize_backward(unit, norms, d_unit);
    for (std::size_t r = 0; r < nl; ++r)
        for (std::size_t k = 0; k < d_emb.cols(); ++k) d_emb(r, k) += out.classifier.input(r, k);

    out.encoder = backward(m.encoder, enc.cache, d_emb);
    out.ce = ce.loss;
    out.triplet = tri.loss;
    out.total = ce.loss + tri.loss;
    out.outlier_anchors = tri.outlier_anchors;
    return out;
}

MainEpochStats main_epoch(MainModels& m, MainOptimizers& opt, const Mat64& features,
                          std::span<const std::size_t> reliable, std::span<const int> reliable_labels,
                          std::span<const std::size_t> outliers, const MainEpochConfig& cfg, int epoch) {
    check_same_size(reliable.size(), reliable_labels.size(), "main_epoch: reliable labels");
    MainEpochStats st;
    if (reliable.empty()) {
        log::warn("main_epoch: no reliable samples; epoch skipped");
        st.skipped = true;
        return st;
    }
    Rng rng(cfg.seed, "main-epoch", static_cast<std::uint64_t>(epoch));
    const auto pk = static_cast<std::size_t>(cfg.p_ids * cfg.k_per_id);
    st.iterations = cfg.iters_per_epoch > 0 ? static_cast<std::size_t>(cfg.iters_per_epoch)
                                            : std::max<std::size_t>(1, (reliable.size() + pk - 1) / pk);
    const std::span<const std::size_t> pool = cfg.instance_outliers ? outliers : std::span<const std::size_t>{};
    const std::uint64_t variant_seed = stream_seed(cfg.seed, "main-variants", static_cast<std::uint64_t>(epoch));
    std::set<std::size_t> ce_seen;

    for (std::size_t it = 0; it < st.iterations; ++it) {
        const auto batch = sample_triplet_batch(reliable, reliable_labels, pool, cfg.p_ids, cfg.k_per_id,
                                                cfg.max_outliers, rng);
        const std::size_t nl = batch.labeled.size();
        const std::size_t no = batch.outliers.size();

        // rows: labeled, outliers, outlier variants
        std::vector<std::size_t> rows = batch.labeled;
        rows.insert(rows.end(), batch.outliers.begin(), batch.outliers.end());
        Mat64 x(nl + 2 * no, features.cols());
        for (std::size_t r = 0; r < nl + no; ++r)
            std::copy(features.row(rows[r]).begin(), features.row(rows[r]).end(), x.row(r).begin());
        for (std::size_t o = 0; o < no; ++o) {
            const auto v = make_variant(features.row(batch.outliers[o]), cfg.variant_sigma,
                                        stream_seed(variant_seed, "row", batch.outliers[o]));
            std::copy(v.begin(), v.end(), x.row(nl + no + o).begin());
        }

        auto loss = main_loss_grad(m, x, batch.labels, no, cfg.margin);
        ce_seen.insert(batch.labeled.begin(), batch.labeled.end());
        adam_step(m.encoder, loss.encoder, opt.encoder);
        adam_step(m.classifier, loss.classifier, opt.classifier);

        st.ce += loss.ce;
        st.triplet += loss.triplet;
        st.outlier_anchors += loss.outlier_anchors;
    }
    const double inv = 1.0 / static_cast<double>(st.iterations);
    st.ce *= inv;
    st.triplet *= inv;
    st.ce_positions.assign(ce_seen.begin(), ce_seen.end());
    return st;
}

}  // namespace anl
