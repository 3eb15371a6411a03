#include "anl/rss.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "anl/csv.hpp"
#include "anl/errors.hpp"
#include "anl/log.hpp"
#include "anl/rng.hpp"
#include "anl/triplet.hpp"

namespace anl {

SoftLabelMatrix init_soft_labels(const ClusterAssignment& assignment, double mu, double lr) {
    if (!(mu > 0.0)) throw ConfigError("mu", "must be > 0");
    if (assignment.n_clusters < 1) throw std::invalid_argument("init_soft_labels: no clusters");
    SoftLabelMatrix s;
    s.lr = lr;
    for (std::size_t i = 0; i < assignment.labels.size(); ++i)
        if (assignment.labels[i] != kOutlier) s.members.push_back(i);
    s.logits = Mat64(s.members.size(), static_cast<std::size_t>(assignment.n_clusters));
    for (std::size_t r = 0; r < s.members.size(); ++r)
        s.logits(r, static_cast<std::size_t>(assignment.labels[s.members[r]])) = mu;
    return s;
}

SampleSplit init_clean_set(const Mat64& embeddings, const ClusterAssignment& assignment, int k) {
    if (k < 1) throw ConfigError("k_clean", "must be >= 1");
    if (assignment.n_clusters < 1) throw std::invalid_argument("init_clean_set: no clusters");
    check_same_size(embeddings.rows(), assignment.labels.size(), "init_clean_set");
    const Mat64 c = centroids(embeddings, assignment);
    std::vector<std::vector<std::pair<double, std::size_t>>> by_cluster(static_cast<std::size_t>(assignment.n_clusters));
    for (std::size_t i = 0; i < assignment.labels.size(); ++i) {
        const int l = assignment.labels[i];
        if (l == kOutlier) continue;
        double d = 0.0;
        for (std::size_t k2 = 0; k2 < embeddings.cols(); ++k2) {
            const double diff = embeddings(i, k2) - c(static_cast<std::size_t>(l), k2);
            d += diff * diff;
        }
        by_cluster[static_cast<std::size_t>(l)].emplace_back(std::sqrt(d), i);
    }
    std::vector<char> labeled(assignment.labels.size(), 0);
    for (auto& members : by_cluster) {
        std::sort(members.begin(), members.end());
        const auto take = std::min(members.size(), static_cast<std::size_t>(k));
        for (std::size_t t = 0; t < take; ++t) labeled[members[t].second] = 1;
    }
    SampleSplit s;
    for (std::size_t i = 0; i < assignment.labels.size(); ++i) {
        if (assignment.labels[i] == kOutlier) continue;
        if (labeled[i]) {
            s.labeled.push_back(i);
            s.labeled_labels.push_back(assignment.labels[i]);
        } else {
            s.unlabeled.push_back(i);
        }
    }
    return s;
}

namespace {

// z (x) (g - <z, g>) row-wise: pulls a gradient wrt probabilities back to logits.
void softmax_backward_row(std::span<const double> z, std::span<const double> g, std::span<double> out) {
    double zg = 0.0;
    for (std::size_t j = 0; j < z.size(); ++j) zg += z[j] * g[j];
    for (std::size_t j = 0; j < z.size(); ++j) out[j] = z[j] * (g[j] - zg);
}

std::vector<double> log_softmax(std::span<const double> a) {
    const double lse = log_sum_exp(a);
    std::vector<double> out(a.size());
    for (std::size_t j = 0; j < a.size(); ++j) out[j] = a[j] - lse;
    return out;
}

}  // namespace

RssLosses rss_losses(const Mat64& class_logits, const Mat64& label_logits, std::span<const int> hard,
                     double lambda_c, double lambda_e, bool reverse_kl) {
    check_same_size(class_logits.rows(), label_logits.rows(), "rss_losses: rows");
    check_same_size(class_logits.cols(), label_logits.cols(), "rss_losses: classes");
    check_same_size(class_logits.rows(), hard.size(), "rss_losses: hard labels");
    const std::size_t b = class_logits.rows();
    const std::size_t c = class_logits.cols();
    RssLosses r;
    r.grad_class_logits = Mat64(b, c);
    r.grad_label_logits = Mat64(b, c);
    if (b == 0) return r;
    const double inv = 1.0 / static_cast<double>(b);

    std::vector<double> z(c), y(c), g(c), tmp(c);
    for (std::size_t i = 0; i < b; ++i) {
        const auto lz = log_softmax(class_logits.row(i));
        const auto ly = log_softmax(label_logits.row(i));
        for (std::size_t j = 0; j < c; ++j) {
            z[j] = std::exp(lz[j]);
            y[j] = std::exp(ly[j]);
        }
        const auto h = static_cast<std::size_t>(hard[i]);
        if (hard[i] < 0 || h >= c) throw std::invalid_argument("rss_losses: hard label out of range");

        double kl = 0.0, ent = 0.0;
        auto gz = r.grad_class_logits.row(i);
        auto gy = r.grad_label_logits.row(i);
        if (!reverse_kl) {
            for (std::size_t j = 0; j < c; ++j) {
                kl += z[j] * (lz[j] - ly[j]);
                g[j] = lz[j] - ly[j];
            }
            softmax_backward_row(z, g, gz);
            for (std::size_t j = 0; j < c; ++j) gy[j] = y[j] - z[j];
        } else {
            for (std::size_t j = 0; j < c; ++j) {
                kl += y[j] * (ly[j] - lz[j]);
                g[j] = ly[j] - lz[j];
            }
            for (std::size_t j = 0; j < c; ++j) gz[j] = z[j] - y[j];
            softmax_backward_row(y, g, gy);
        }
        for (std::size_t j = 0; j < c; ++j) {
            ent -= z[j] * lz[j];
            g[j] = -lz[j];
        }
        softmax_backward_row(z, g, tmp);
        for (std::size_t j = 0; j < c; ++j) {
            gz[j] = (gz[j] + lambda_e * tmp[j]) * inv;
            gy[j] = (gy[j] + lambda_c * (y[j] - (j == h ? 1.0 : 0.0))) * inv;
        }
        r.kl += kl * inv;
        r.c += -ly[h] * inv;
        r.e += ent * inv;
    }
    r.total = r.kl + lambda_c * r.c + lambda_e * r.e;
    return r;
}

LossGrad entropy_loss_grad(const Mat64& logits) {
    LossGrad out{0.0, Mat64(logits.rows(), logits.cols())};
    if (logits.rows() == 0) return out;
    const double inv = 1.0 / static_cast<double>(logits.rows());
    std::vector<double> z(logits.cols()), g(logits.cols());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        const auto lz = log_softmax(logits.row(i));
        for (std::size_t j = 0; j < z.size(); ++j) {
            z[j] = std::exp(lz[j]);
            out.loss -= z[j] * lz[j] * inv;
            g[j] = -lz[j] * inv;
        }
        softmax_backward_row(z, g, out.grad.row(i));
    }
    return out;
}

void RssConfig::validate() const {
    if (k_clean < 1) throw ConfigError("k_clean", "must be >= 1");
    if (!(lambda_conf > 0.0 && lambda_conf <= 1.0)) throw ConfigError("lambda_conf", "must be in (0,1]");
    if (!(mu > 0.0)) throw ConfigError("mu", "must be > 0");
    if (lambda_c < 0.0) throw ConfigError("lambda_c", "must be >= 0");
    if (lambda_e < 0.0) throw ConfigError("lambda_e", "must be >= 0");
    if (label_lr < 0.0) throw ConfigError("label_lr", "must be >= 0");
    if (stage1_epochs < 0) throw ConfigError("aux_stage1_epochs", "must be >= 0");
    if (stage2_epochs < 0) throw ConfigError("aux_stage2_epochs", "must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size", "must be >= 1");
    if (p_ids < 1) throw ConfigError("p_ids", "must be >= 1");
    if (k_per_id < 1) throw ConfigError("k_per_id", "must be >= 1");
    if (margin < 0.0) throw ConfigError("margin", "must be >= 0");
}

AuxOptimizers make_aux_optimizers(const AuxModels& m, double lr) {
    return {AdamState::for_net(m.encoder, lr), AdamState::for_net(m.classifier, lr)};
}

namespace {

struct EncodedBatch {
    ForwardResult enc;
    ForwardResult cls;
};

EncodedBatch encode(const AuxModels& m, const Mat64& x) {
    EncodedBatch e{forward(m.encoder, x), {}};
    e.cls = forward(m.classifier, e.enc.output);
    return e;
}

// Backprop from classifier-logit and embedding gradients into both tapes.
void backprop(const AuxModels& m, const EncodedBatch& e, const Mat64& d_logits, const Mat64* d_embedding,
              GradTape& enc_tape, GradTape& cls_tape) {
    GradTape ct = backward(m.classifier, e.cls.cache, d_logits);
    Mat64 d_emb = ct.input;
    if (d_embedding)
        for (std::size_t i = 0; i < d_emb.size(); ++i) d_emb.flat()[i] += d_embedding->flat()[i];
    GradTape et = backward(m.encoder, e.enc.cache, d_emb);
    ct.input = Mat64();
    et.input = Mat64();
    cls_tape.accumulate(ct);
    enc_tape.accumulate(et);
}

std::size_t epoch_iters(int configured, std::size_t n, std::size_t per_batch) {
    if (configured > 0) return static_cast<std::size_t>(configured);
    return std::max<std::size_t>(1, (n + per_batch - 1) / per_batch);
}

}  // namespace

Stage1Stats stage1_epoch(AuxModels& m, AuxOptimizers& opt, SampleSplit& split, const Mat64& features,
                         const RssConfig& cfg, int epoch) {
    if (split.labeled.empty()) throw StageError("rss", "stage 1 needs a non-empty labeled set");
    Stage1Stats st;
    st.labeled_before = split.labeled.size();
    Rng rng(cfg.seed, "stage1", static_cast<std::uint64_t>(epoch));
    const auto pk = static_cast<std::size_t>(cfg.p_ids * cfg.k_per_id);
    const std::size_t iters = epoch_iters(cfg.iters_per_epoch, split.labeled.size(), pk);
    std::vector<std::size_t> u_order = split.unlabeled;
    rng.shuffle(u_order);
    std::size_t u_pos = 0;

    for (std::size_t it = 0; it < iters; ++it) {
        GradTape enc_tape = zero_tape(m.encoder, 0);
        GradTape cls_tape = zero_tape(m.classifier, 0);

        const auto batch = sample_triplet_batch(split.labeled, split.labeled_labels, {}, cfg.p_ids, cfg.k_per_id, 0, rng);
        const auto e = encode(m, features.gather_rows(batch.labeled));
        const auto ce = source_ce_loss_grad(e.cls.output, batch.labels);
        std::vector<double> norms;
        const Mat64 unit = l2_normalize_rows(e.enc.output, &norms);
        const auto tri = batch_hard_triplet_loss_grad(unit, batch.labels, Mat64(0, unit.cols()), cfg.margin);
        const Mat64 d_emb = l2_normalize_backward(unit, norms, tri.grad_features);
        backprop(m, e, ce.grad, &d_emb, enc_tape, cls_tape);
        st.ce += ce.loss;
        st.triplet += tri.loss;

        if (!u_order.empty()) {
            std::vector<std::size_t> ub;
            const auto want = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), u_order.size());
            while (ub.size() < want) {
                if (u_pos == u_order.size()) u_pos = 0;
                ub.push_back(u_order[u_pos++]);
            }
            const auto eu = encode(m, features.gather_rows(ub));
            const auto ent = entropy_loss_grad(eu.cls.output);
            backprop(m, eu, ent.grad, nullptr, enc_tape, cls_tape);
            st.entropy += ent.loss;
        }
        adam_step(m.encoder, enc_tape, opt.encoder);
        adam_step(m.classifier, cls_tape, opt.classifier);
    }
    const double inv = 1.0 / static_cast<double>(iters);
    st.ce *= inv;
    st.triplet *= inv;
    st.entropy *= inv;

    if (!split.unlabeled.empty()) {
        const Mat64 probs = softmax_rows(predict(m.classifier, predict(m.encoder, features.gather_rows(split.unlabeled))));
        std::vector<std::size_t> still;
        for (std::size_t r = 0; r < split.unlabeled.size(); ++r) {
            const auto row = probs.row(r);
            const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
            if (row[best] > cfg.lambda_conf) {
                split.labeled.push_back(split.unlabeled[r]);
                split.labeled_labels.push_back(static_cast<int>(best));
            } else {
                still.push_back(split.unlabeled[r]);
            }
        }
        split.unlabeled = std::move(still);
    }
    st.labeled_after = split.labeled.size();
    return st;
}

Stage2Stats stage2_epoch(AuxModels& m, AuxOptimizers& opt, SoftLabelMatrix& soft, std::span<const int> hard,
                         const Mat64& features, const RssConfig& cfg, int epoch) {
    check_same_size(hard.size(), soft.rows(), "stage2_epoch: hard labels");
    Stage2Stats st;
    if (soft.rows() == 0) return st;
    Rng rng(cfg.seed, "stage2", static_cast<std::uint64_t>(epoch));
    const auto bs = static_cast<std::size_t>(cfg.batch_size);
    const std::size_t iters = epoch_iters(cfg.iters_per_epoch, soft.rows(), bs);
    std::vector<std::size_t> order = rng.permutation(soft.rows());
    std::size_t pos = 0;

    for (std::size_t it = 0; it < iters; ++it) {
        std::vector<std::size_t> rows;
        const auto want = std::min(bs, soft.rows());
        while (rows.size() < want) {
            if (pos == order.size()) {
                order = rng.permutation(soft.rows());
                pos = 0;
            }
            rows.push_back(order[pos++]);
        }
        std::vector<std::size_t> positions;
        std::vector<int> h;
        for (auto r : rows) {
            positions.push_back(soft.members[r]);
            h.push_back(hard[r]);
        }
        const auto e = encode(m, features.gather_rows(positions));
        const Mat64 label_logits = soft.logits.gather_rows(rows);
        const auto l = rss_losses(e.cls.output, label_logits, h, cfg.lambda_c, cfg.lambda_e, cfg.reverse_kl);

        GradTape enc_tape = zero_tape(m.encoder, 0);
        GradTape cls_tape = zero_tape(m.classifier, 0);
        backprop(m, e, l.grad_class_logits, nullptr, enc_tape, cls_tape);
        adam_step(m.encoder, enc_tape, opt.encoder);
        adam_step(m.classifier, cls_tape, opt.classifier);

        // per-sample gradient: undo the batch mean
        const double step = soft.lr * static_cast<double>(rows.size());
        if (step > 0.0)
            for (std::size_t b = 0; b < rows.size(); ++b)
                for (std::size_t j = 0; j < soft.n_classes(); ++j)
                    soft.logits(rows[b], j) -= step * l.grad_label_logits(b, j);

        st.kl += l.kl;
        st.c += l.c;
        st.e += l.e;
        st.total += l.total;
    }
    const double inv = 1.0 / static_cast<double>(iters);
    st.kl *= inv;
    st.c *= inv;
    st.e *= inv;
    st.total *= inv;
    double ent = 0.0;
    for (std::size_t r = 0; r < soft.rows(); ++r) {
        const auto d = soft.distribution(r);
        for (std::size_t j = 0; j < d.size(); ++j) ent -= d[j] * std::log(d[j]);
    }
    st.mean_label_entropy = ent / static_cast<double>(soft.rows());
    return st;
}

ReliableVerdict filter_reliable(const SoftLabelMatrix& soft, std::span<const int> hard) {
    check_same_size(hard.size(), soft.rows(), "filter_reliable: hard labels");
    ReliableVerdict v;
    for (std::size_t r = 0; r < soft.rows(); ++r) {
        const auto row = soft.logits.row(r);
        const double best = *std::max_element(row.begin(), row.end());
        std::size_t n_best = 0, first_best = 0;
        for (std::size_t j = row.size(); j-- > 0;)
            if (row[j] == best) {
                ++n_best;
                first_best = j;
            }
        const int yc = hard[r];
        bool keep = row[static_cast<std::size_t>(yc)] == best;
        int yn = keep ? yc : static_cast<int>(first_best);
        if (n_best > 1) {
            ++v.ties;
            log::warn("filter_reliable: argmax tie for sample " + std::to_string(soft.members[r]));
        }
        v.positions.push_back(soft.members[r]);
        v.original.push_back(yc);
        v.corrected.push_back(yn);
        v.kept.push_back(keep ? 1 : 0);
        (keep ? v.reliable : v.rejected).push_back(soft.members[r]);
    }
    return v;
}

void ReliableVerdict::write_csv(const std::filesystem::path& path) const {
    std::vector<std::vector<std::string>> rows;
    for (std::size_t i = 0; i < positions.size(); ++i)
        rows.push_back({std::to_string(positions[i]), std::to_string(original[i]), std::to_string(corrected[i]),
                        kept[i] ? "1" : "0"});
    csv::write(path, {"index", "y_c", "y_n", "kept"}, rows);
}

ReliableVerdict ReliableVerdict::read_csv(const std::filesystem::path& path) {
    const auto t = csv::read(path);
    const std::string p = path.string();
    if (t.header != std::vector<std::string>{"index", "y_c", "y_n", "kept"})
        throw InputError(p, 1, "expected header index,y_c,y_n,kept");
    ReliableVerdict v;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const auto ln = t.line_numbers[r];
        const auto idx = csv::parse_int(t.rows[r][0], p, ln);
        if (idx < 0) throw InputError(p, ln, "negative index");
        const auto pos = static_cast<std::size_t>(idx);
        const auto kept_flag = csv::parse_int(t.rows[r][3], p, ln);
        if (kept_flag != 0 && kept_flag != 1) throw InputError(p, ln, "kept must be 0 or 1");
        v.positions.push_back(pos);
        v.original.push_back(static_cast<int>(csv::parse_int(t.rows[r][1], p, ln)));
        v.corrected.push_back(static_cast<int>(csv::parse_int(t.rows[r][2], p, ln)));
        v.kept.push_back(static_cast<char>(kept_flag));
        (kept_flag ? v.reliable : v.rejected).push_back(pos);
    }
    return v;
}

RssRoundResult run_rss_round(const DenseNet& main_encoder, const Mat64& features, const ClusterAssignment& assignment,
                             const RssConfig& cfg) {
    cfg.validate();
    if (assignment.n_clusters < 1) throw StageError("rss", "no clusters to refine");
    AuxModels m{main_encoder,
                DenseNet::xavier({main_encoder.out_dim(), static_cast<std::size_t>(assignment.n_clusters)},
                                 {Activation::identity}, stream_seed(cfg.seed, "aux-classifier"))};
    AuxOptimizers opt = make_aux_optimizers(m, cfg.lr);

    RssRoundResult res;
    res.trace = {"rss_trace", {"stage", "epoch", "ce", "triplet", "entropy", "l_kl", "l_c", "l_e", "labeled"}, {}};
    res.split = init_clean_set(embed_normalized(m.encoder, features), assignment, cfg.k_clean);
    for (int e = 0; e < cfg.stage1_epochs; ++e) {
        const auto st = stage1_epoch(m, opt, res.split, features, cfg, e);
        res.labeled_sizes.push_back(st.labeled_after);
        res.trace.rows.push_back({1.0, static_cast<double>(e), st.ce, st.triplet, st.entropy, 0.0, 0.0, 0.0,
                                  static_cast<double>(st.labeled_after)});
    }
    res.soft = init_soft_labels(assignment, cfg.mu, cfg.label_lr);
    std::vector<int> hard;
    for (auto p : res.soft.members) hard.push_back(assignment.labels[p]);
    for (int e = 0; e < cfg.stage2_epochs; ++e) {
        const auto st = stage2_epoch(m, opt, res.soft, hard, features, cfg, e);
        res.trace.rows.push_back({2.0, static_cast<double>(e), 0.0, 0.0, st.mean_label_entropy, st.kl, st.c, st.e,
                                  static_cast<double>(res.split.labeled.size())});
    }
    res.verdict = filter_reliable(res.soft, hard);
    return res;
}

}  // namespace anl
