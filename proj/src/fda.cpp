#include "anl/fda.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>

#include "anl/errors.hpp"
#include "anl/kernels.hpp"
#include "anl/log.hpp"
#include "anl/rng.hpp"

namespace anl {

MemoryBank init_bank(const Mat64& variant_features, double alpha) {
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("alpha", "must be in [0,1]");
    return MemoryBank{l2_normalize_rows(variant_features), alpha};
}

bool bank_update(MemoryBank& bank, std::size_t index, std::span<const double> feature, double alpha) {
    if (index >= bank.size()) throw std::out_of_range("bank_update: index out of range");
    check_same_size(feature.size(), bank.dim(), "bank_update: feature dim");
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("alpha", "must be in [0,1]");
    auto cell = bank.cells.row(index);
    std::vector<double> next(cell.size());
    for (std::size_t k = 0; k < cell.size(); ++k) next[k] = alpha * cell[k] + (1.0 - alpha) * feature[k];
    const double n = norm2(next);
    if (!(n > 0.0) || !std::isfinite(n)) {
        log::warn("bank_update: zero-norm cell " + std::to_string(index) + " after update; kept previous value");
        return false;
    }
    for (std::size_t k = 0; k < cell.size(); ++k) cell[k] = next[k] / n;
    return true;
}

namespace {

std::vector<std::size_t> top_r(std::vector<std::pair<double, std::size_t>>& cand, int r) {
    const auto take = std::min(cand.size(), static_cast<std::size_t>(std::max(r, 0)));
    auto better = [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); };
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(take), cand.end(), better);
    std::vector<std::size_t> out;
    for (std::size_t t = 0; t < take; ++t) out.push_back(cand[t].second);
    return out;
}

}  // namespace

NeighborSets build_neighbor_sets(const Mat64& embeddings, const MemoryBank& bank, std::span<const int> cameras,
                                 int r1, int r2) {
    if (r1 < 0) throw ConfigError("r1", "must be >= 0");
    if (r2 < 0) throw ConfigError("r2", "must be >= 0");
    check_same_size(embeddings.rows(), bank.size(), "build_neighbor_sets: embeddings vs bank");
    check_same_size(cameras.size(), bank.size(), "build_neighbor_sets: cameras vs bank");
    const std::size_t n = bank.size();
    NeighborSets sets;
    sets.intra.resize(n);
    sets.cross.resize(n);
    if (r1 == 0 && r2 == 0) return sets;

    Mat64 sim;
    kernels::gemm_abt(l2_normalize_rows(embeddings), bank.cells, sim);
    const auto ni = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(dynamic, 8)
    for (std::int64_t ii = 0; ii < ni; ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        std::vector<std::pair<double, std::size_t>> same, other;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            (cameras[j] == cameras[i] ? same : other).emplace_back(sim(i, j), j);
        }
        sets.intra[i] = top_r(same, r1);
        sets.cross[i] = top_r(other, r2);
    }
    return sets;
}

double SimilarityTargets::at(std::size_t i, std::size_t j) const {
    for (const auto& [k, s] : rows.at(i))
        if (k == j) return s;
    return 0.0;
}

SimilarityTargets similarity_targets(const Mat64& embeddings, const MemoryBank& bank, const NeighborSets& sets,
                                     bool row_normalize) {
    check_same_size(embeddings.rows(), bank.size(), "similarity_targets: embeddings vs bank");
    check_same_size(sets.intra.size(), bank.size(), "similarity_targets: neighbour sets");
    SimilarityTargets t;
    t.rows.resize(bank.size());
    for (std::size_t i = 0; i < bank.size(); ++i) {
        auto& row = t.rows[i];
        row.emplace_back(i, 1.0);
        for (const auto* list : {&sets.intra[i], &sets.cross[i]})
            for (auto j : *list) row.emplace_back(j, cosine_sim(embeddings.row(i), bank.cells.row(j)));
        if (row_normalize) {
            double s = 0.0;
            for (const auto& e : row) s += e.second;
            if (s > 0.0)
                for (auto& e : row) e.second /= s;
        }
    }
    return t;
}

LossGrad contrastive_loss_grad(const Mat64& batch, std::span<const std::size_t> batch_index, const MemoryBank& bank,
                               const SimilarityTargets& targets, double tau) {
    if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("tau", "must be in (0,1)");
    check_same_size(batch.rows(), batch_index.size(), "contrastive_loss_grad: batch index");
    check_same_size(batch.cols(), bank.dim(), "contrastive_loss_grad: feature dim");
    check_same_size(targets.size(), bank.size(), "contrastive_loss_grad: targets");
    const std::size_t b = batch.rows();
    const std::size_t n = bank.size();
    if (b == 0) return {0.0, Mat64(0, batch.cols())};

    std::vector<double> norms;
    const Mat64 unit = l2_normalize_rows(batch, &norms);
    Mat64 logits;
    kernels::gemm_abt(unit, bank.cells, logits);

    Mat64 dlogits(b, n);
    std::vector<double> row_loss(b, 0.0);
    const auto nb = static_cast<std::int64_t>(b);
#pragma omp parallel for schedule(static)
    for (std::int64_t rr = 0; rr < nb; ++rr) {
        const auto r = static_cast<std::size_t>(rr);
        auto l = logits.row(r);
        for (double& v : l) v /= tau;
        const double lse = log_sum_exp(l);
        const auto& srow = targets.rows.at(batch_index[r]);
        double s_total = 0.0, loss = 0.0;
        for (const auto& [j, s] : srow) {
            s_total += s;
            loss += s * (lse - l[j]);
        }
        auto d = dlogits.row(r);
        for (std::size_t k = 0; k < n; ++k) d[k] = s_total * std::exp(l[k] - lse);
        for (const auto& [j, s] : srow) d[j] -= s;
        for (double& v : d) v /= (tau * static_cast<double>(b));
        row_loss[r] = loss;
    }

    Mat64 dunit;
    kernels::gemm_ab(dlogits, bank.cells, dunit);
    LossGrad out;
    for (double v : row_loss) out.loss += v;
    out.loss /= static_cast<double>(b);
    out.grad = l2_normalize_backward(unit, norms, dunit);
    return out;
}

LossGrad source_ce_loss_grad(const Mat64& logits, std::span<const int> labels) {
    check_same_size(logits.rows(), labels.size(), "source_ce_loss_grad: labels");
    LossGrad out{0.0, Mat64(logits.rows(), logits.cols())};
    if (logits.rows() == 0) return out;
    const double inv = 1.0 / static_cast<double>(logits.rows());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= logits.cols())
            throw std::invalid_argument("source_ce_loss_grad: label out of range");
        const auto row = logits.row(i);
        const double lse = log_sum_exp(row);
        out.loss += (lse - row[static_cast<std::size_t>(y)]) * inv;
        for (std::size_t j = 0; j < logits.cols(); ++j) out.grad(i, j) = std::exp(row[j] - lse) * inv;
        out.grad(i, static_cast<std::size_t>(y)) -= inv;
    }
    return out;
}

AdversarialResult adversarial_losses(const DenseNet& disc, const Mat64& source_emb, const Mat64& target_emb) {
    if (source_emb.rows() == 0 || target_emb.rows() == 0)
        throw std::invalid_argument("adversarial_losses: empty embeddings");
    if (disc.out_dim() != 1) throw std::invalid_argument("adversarial_losses: discriminator must output 1 value");
    AdversarialResult r;
    const auto fs = forward(disc, source_emb);
    const auto ft = forward(disc, target_emb);
    const double ns = static_cast<double>(source_emb.rows());
    const double nt = static_cast<double>(target_emb.rows());

    Mat64 dg(target_emb.rows(), 1), dd_t(target_emb.rows(), 1), dd_s(source_emb.rows(), 1);
    for (std::size_t i = 0; i < target_emb.rows(); ++i) {
        const double d = ft.output(i, 0);
        r.generator_loss += (d - 1.0) * (d - 1.0) / nt;
        r.discriminator_loss += d * d / nt;
        dg(i, 0) = 2.0 * (d - 1.0) / nt;
        dd_t(i, 0) = 2.0 * d / nt;
    }
    for (std::size_t i = 0; i < source_emb.rows(); ++i) {
        const double d = fs.output(i, 0);
        r.discriminator_loss += (d - 1.0) * (d - 1.0) / ns;
        dd_s(i, 0) = 2.0 * (d - 1.0) / ns;
    }
    r.grad_target = backward(disc, ft.cache, dg).input;
    r.disc_grad = backward(disc, fs.cache, dd_s);
    r.disc_grad.accumulate(backward(disc, ft.cache, dd_t));
    r.disc_grad.input = Mat64();
    return r;
}

void FdaConfig::validate() const {
    if (epochs < 0) throw ConfigError("fda_epochs", "must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size", "must be >= 1");
    if (iters_per_epoch < 0) throw ConfigError("iters_per_epoch", "must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("lr", "must be > 0");
    if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("tau", "must be in (0,1)");
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("alpha", "must be in [0,1]");
    if (r1 < 0) throw ConfigError("r1", "must be >= 0");
    if (r2 < 0) throw ConfigError("r2", "must be >= 0");
    if (variant_sigma < 0.0) throw ConfigError("variant_sigma", "must be >= 0");
}

Mat64 embed_normalized(const DenseNet& encoder, const Mat64& x) { return l2_normalize_rows(predict(encoder, x)); }

namespace {

// Cycles through seeded permutations of 0..n-1.
class BatchCursor {
public:
    BatchCursor(std::size_t n, std::uint64_t seed) : n_(n), rng_(seed) { reshuffle(); }

    std::vector<std::size_t> next(std::size_t b) {
        std::vector<std::size_t> out;
        b = std::min(b, n_);
        while (out.size() < b) {
            if (pos_ == order_.size()) reshuffle();
            out.push_back(order_[pos_++]);
        }
        return out;
    }

private:
    void reshuffle() {
        order_ = rng_.permutation(n_);
        pos_ = 0;
    }
    std::size_t n_;
    Rng rng_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
};

Mat64 add(const Mat64& a, const Mat64& b) {
    Mat64 c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c.flat()[i] += b.flat()[i];
    return c;
}

}  // namespace

FdaResult fda_train(FdaModels models, const SourceView& source, const TargetView& target, const FdaConfig& cfg) {
    cfg.validate();
    if (source.features.rows() == 0) throw ConfigError("source", "empty domain");
    if (target.features.rows() == 0) throw ConfigError("target", "empty domain");

    auto& enc = models.encoder;
    auto& cls = models.classifier;
    auto& disc = models.disc;
    const std::size_t nt = target.features.rows();

    FdaResult res;
    res.trace = {"fda_trace", {"epoch", "l_ce", "l_cl", "l_g", "l_d"}, {}};

    const std::uint64_t variant_base = stream_seed(cfg.seed, "fda-variants");
    Mat64 variants = make_variants(target.features, cfg.variant_sigma, stream_seed(variant_base, "epoch", 0));
    res.bank = init_bank(predict(enc, variants), cfg.alpha);
    if (cfg.epochs == 0) {
        res.models = std::move(models);
        return res;
    }

    AdamState enc_opt = AdamState::for_net(enc, cfg.lr);
    AdamState cls_opt = AdamState::for_net(cls, cfg.lr);
    AdamState disc_opt = AdamState::for_net(disc, cfg.lr);
    BatchCursor src_cursor(source.features.rows(), stream_seed(cfg.seed, "fda-source-batches"));
    BatchCursor tgt_cursor(nt, stream_seed(cfg.seed, "fda-target-batches"));

    const auto bs = static_cast<std::size_t>(cfg.batch_size);
    const std::size_t larger = std::max(source.features.rows(), nt);
    const std::size_t iters =
        cfg.iters_per_epoch > 0 ? static_cast<std::size_t>(cfg.iters_per_epoch) : (larger + bs - 1) / bs;

    SimilarityTargets targets;
    auto refresh_targets = [&] {
        const Mat64 emb = predict(enc, target.features);
        targets = similarity_targets(emb, res.bank,
                                     build_neighbor_sets(emb, res.bank, target.cameras, cfg.r1, cfg.r2),
                                     cfg.row_normalize_targets);
    };

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (epoch > 0 && !cfg.freeze_variants)
            variants = make_variants(target.features, cfg.variant_sigma,
                                     stream_seed(variant_base, "epoch", static_cast<std::uint64_t>(epoch)));
        if (cfg.use_contrastive) refresh_targets();

        double sum_ce = 0.0, sum_cl = 0.0, sum_g = 0.0, sum_d = 0.0;
        for (std::size_t it = 0; it < iters; ++it) {
            if (cfg.use_contrastive && cfg.per_iter_neighbors && it > 0) refresh_targets();

            const auto sidx = src_cursor.next(bs);
            std::vector<int> slabels;
            for (auto i : sidx) slabels.push_back(source.labels[i]);
            const auto s_fwd = forward(enc, source.features.gather_rows(sidx));
            const auto c_fwd = forward(cls, s_fwd.output);
            const auto ce = source_ce_loss_grad(c_fwd.output, slabels);
            GradTape cls_tape = backward(cls, c_fwd.cache, ce.grad);
            GradTape enc_tape = backward(enc, s_fwd.cache, cls_tape.input);
            sum_ce += ce.loss;

            Mat64 t_emb;
            std::vector<std::size_t> tidx;
            if (cfg.use_contrastive || cfg.use_adversarial) {
                tidx = tgt_cursor.next(bs);
                const auto t_fwd = forward(enc, target.features.gather_rows(tidx));
                t_emb = t_fwd.output;
                Mat64 d_t(t_emb.rows(), t_emb.cols());
                if (cfg.use_contrastive) {
                    const auto cl = contrastive_loss_grad(t_emb, tidx, res.bank, targets, cfg.tau);
                    d_t = add(d_t, cl.grad);
                    sum_cl += cl.loss;
                }
                if (cfg.use_adversarial) {
                    const auto adv = adversarial_losses(disc, s_fwd.output, t_emb);
                    d_t = add(d_t, adv.grad_target);
                    sum_g += adv.generator_loss;
                    sum_d += adv.discriminator_loss;
                    adam_step(disc, adv.disc_grad, disc_opt);
                }
                enc_tape.accumulate(backward(enc, t_fwd.cache, d_t));
            }

            adam_step(cls, cls_tape, cls_opt);
            GradTape enc_params = std::move(enc_tape);
            enc_params.input = Mat64();
            // variant features come from the encoder before this step
            Mat64 v_feat;
            if (cfg.use_contrastive) v_feat = embed_normalized(enc, variants.gather_rows(tidx));
            adam_step(enc, enc_params, enc_opt);
            if (cfg.use_contrastive)
                for (std::size_t r = 0; r < tidx.size(); ++r)
                    bank_update(res.bank, tidx[r], v_feat.row(r), cfg.alpha);
        }
        const double inv = 1.0 / static_cast<double>(iters);
        res.trace.rows.push_back({static_cast<double>(epoch), sum_ce * inv, sum_cl * inv, sum_g * inv, sum_d * inv});
    }
    res.models = std::move(models);
    return res;
}

}  // namespace anl
