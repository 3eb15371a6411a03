// Acceptance checks. One line per criterion; exit status is non-zero when
// any criterion fails.

#include <chrono>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "anl/fda.hpp"
#include "anl/pipeline.hpp"
#include "anl/rss.hpp"
#include "anl/trainer.hpp"
#include "anl/triplet.hpp"
#include "cli.hpp"
#include "support.hpp"

using namespace anl;

namespace {

// tolerances
constexpr double kGradTol = 1e-4;
constexpr int kGradPoints = 20;
constexpr double kGradSeconds = 120.0;
constexpr double kMetricTol = 1e-10;
constexpr double kUnitTol = 1e-12;
constexpr double kFdaSeconds = 300.0;
constexpr double kPipelineSeconds = 600.0;
constexpr double kMinSourceAccuracy = 0.9;

// regression locks on the default seed: value measured at the first
// verified run minus a slack for libm differences across platforms
constexpr double kFdaMarginRecorded = 0.4493;
constexpr double kLockSlack = 0.02;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

struct Line {
    bool pass = false;
    std::string detail;
};

int failures = 0;

void emit(int n, const char* name, const std::function<Line()>& body) {
    Line l;
    try {
        l = body();
    } catch (const std::exception& e) {
        l = {false, std::string("exception: ") + e.what()};
    }
    if (!l.pass) ++failures;
    std::printf("criterion %d [%s] %s  %s\n", n, name, l.pass ? "PASS" : "FAIL", l.detail.c_str());
    std::fflush(stdout);
}

// gradient families

struct GradFamily {
    std::string name;
    int points = 0;
    double worst = 0.0;
    void add(double err) {
        ++points;
        worst = std::max(worst, err);
    }
    bool ok() const { return points >= kGradPoints && worst <= kGradTol; }
};

MemoryBank random_bank(std::size_t n, std::size_t d, Rng& rng) { return init_bank(test::random_mat(n, d, rng), 0.2); }

std::vector<int> random_ints(std::size_t n, std::uint64_t k, Rng& rng) {
    std::vector<int> v(n);
    for (int& x : v) x = static_cast<int>(rng.below(k));
    return v;
}

std::vector<GradFamily> gradient_families() {
    std::vector<GradFamily> out;
    Rng rng(1001);

    GradFamily ce{"ce"};
    for (int t = 0; t < kGradPoints; ++t) {
        const auto logits = test::random_mat(5, 4, rng, -3, 3);
        const auto y = random_ints(5, 4, rng);
        const auto g = source_ce_loss_grad(logits, y);
        ce.add(test::fd_error([&](const Mat64& m) { return source_ce_loss_grad(m, y).loss; }, logits, g.grad));
    }
    out.push_back(ce);

    GradFamily con{"contrastive"}, con_enc{"contrastive_encoder"};
    for (int t = 0; t < kGradPoints; ++t) {
        const std::size_t n = 8, d = 4;
        const auto emb = test::random_mat(n, d, rng);
        const auto bank = random_bank(n, d, rng);
        const auto cams = random_ints(n, 2, rng);
        const auto targets = similarity_targets(emb, bank, build_neighbor_sets(emb, bank, cams, 1, 2));
        const std::vector<std::size_t> idx{1, 4, 6};
        const double tau = rng.uniform(0.05, 0.5);
        const auto batch = test::random_mat(3, d, rng);
        const auto g = contrastive_loss_grad(batch, idx, bank, targets, tau);
        con.add(test::fd_error([&](const Mat64& b) { return contrastive_loss_grad(b, idx, bank, targets, tau).loss; },
                               batch, g.grad));

        const auto enc = DenseNet::xavier({5, 6, d}, {Activation::tanh, Activation::identity}, 2000 + t);
        const auto x = test::random_mat(3, 5, rng);
        const auto fwd = forward(enc, x);
        const auto lg = contrastive_loss_grad(fwd.output, idx, bank, targets, tau);
        const auto tape = backward(enc, fwd.cache, lg.grad);
        con_enc.add(test::fd_error_params(
            [&](const DenseNet& e) { return contrastive_loss_grad(predict(e, x), idx, bank, targets, tau).loss; }, enc,
            tape.flat_params()));
    }
    out.push_back(con);

    GradFamily gen{"generator"}, gen_enc{"generator_encoder"}, dis{"discriminator"};
    for (int t = 0; t < kGradPoints; ++t) {
        const auto disc = DenseNet::xavier({4, 6, 1}, {Activation::tanh, Activation::identity}, 3000 + t);
        const auto s = test::random_mat(3, 4, rng), tg = test::random_mat(5, 4, rng);
        const auto r = adversarial_losses(disc, s, tg);
        gen.add(test::fd_error([&](const Mat64& m) { return adversarial_losses(disc, s, m).generator_loss; }, tg,
                               r.grad_target));
        dis.add(test::fd_error_params(
            [&](const DenseNet& d) { return adversarial_losses(d, s, tg).discriminator_loss; }, disc,
            r.disc_grad.flat_params()));

        const auto enc = DenseNet::xavier({3, 5, 4}, {Activation::tanh, Activation::identity}, 3500 + t);
        auto perturbed = enc;
        auto p = perturbed.flat_params();
        for (double& v : p) v += rng.uniform(-0.3, 0.3);
        perturbed.set_flat_params(p);
        const auto x = test::random_mat(5, 3, rng);
        const auto fwd = forward(perturbed, x);
        const auto ar = adversarial_losses(disc, s, fwd.output);
        const auto tape = backward(perturbed, fwd.cache, ar.grad_target);
        gen_enc.add(test::fd_error_params(
            [&](const DenseNet& e) { return adversarial_losses(disc, s, predict(e, x)).generator_loss; }, perturbed,
            tape.flat_params()));
    }
    out.push_back(gen);
    out.push_back(dis);

    GradFamily kl{"kl"}, lc{"label_ce"}, ent{"entropy"}, rss{"rss_total"};
    for (int t = 0; t < kGradPoints; ++t) {
        const auto zl = test::random_mat(6, 4, rng, -3, 3), yl = test::random_mat(6, 4, rng, -3, 3);
        const auto hard = random_ints(6, 4, rng);
        for (bool rev : {false, true}) {
            const auto k0 = rss_losses(zl, yl, hard, 0.0, 0.0, rev);
            kl.add(test::fd_error([&](const Mat64& m) { return rss_losses(m, yl, hard, 0.0, 0.0, rev).kl; }, zl,
                                  k0.grad_class_logits));
            kl.add(test::fd_error([&](const Mat64& m) { return rss_losses(zl, m, hard, 0.0, 0.0, rev).kl; }, yl,
                                  k0.grad_label_logits));
        }
        // with lambda_c = 1 and lambda_e = 0 the label-logit gradient gains exactly dc/dy
        const auto k0 = rss_losses(zl, yl, hard, 0.0, 0.0), k1 = rss_losses(zl, yl, hard, 1.0, 0.0);
        Mat64 dc = k1.grad_label_logits;
        for (std::size_t i = 0; i < dc.size(); ++i) dc.flat()[i] -= k0.grad_label_logits.flat()[i];
        lc.add(test::fd_error([&](const Mat64& m) { return rss_losses(zl, m, hard, 0.0, 0.0).c; }, yl, dc));

        const auto e = entropy_loss_grad(zl);
        ent.add(test::fd_error([](const Mat64& m) { return entropy_loss_grad(m).loss; }, zl, e.grad));

        const double a = rng.uniform(0, 1), b = rng.uniform(0, 1);
        const bool rev = t % 2 == 1;
        const auto full = rss_losses(zl, yl, hard, a, b, rev);
        rss.add(test::fd_error([&](const Mat64& m) { return rss_losses(m, yl, hard, a, b, rev).total; }, zl,
                               full.grad_class_logits));
        rss.add(test::fd_error([&](const Mat64& m) { return rss_losses(zl, m, hard, a, b, rev).total; }, yl,
                               full.grad_label_logits));
    }
    out.push_back(kl);
    out.push_back(lc);
    out.push_back(ent);

    GradFamily tri{"triplet"};
    while (tri.points < kGradPoints) {
        const std::vector<int> labels{0, 0, 1, 1, 2, 2, -1, -1};
        const auto f = test::random_mat(8, 3, rng);
        auto v = test::random_mat(2, 3, rng);
        for (std::size_t o = 0; o < 2; ++o)
            for (std::size_t k = 0; k < 3; ++k) v(o, k) = f(6 + o, k) + 0.3 * rng.uniform(-1, 1);
        if (test::oracle::triplet_kink_gap(f, labels, v, 0.3) <= 1e-3) continue;
        const auto r = batch_hard_triplet_loss_grad(f, labels, v, 0.3);
        const double ef = test::fd_error(
            [&](const Mat64& m) { return batch_hard_triplet_loss_grad(m, labels, v, 0.3).loss; }, f, r.grad_features,
            1e-6);
        const double ev = test::fd_error(
            [&](const Mat64& m) { return batch_hard_triplet_loss_grad(f, labels, m, 0.3).loss; }, v, r.grad_variants,
            1e-6);
        tri.add(std::max(ef, ev));
    }
    out.push_back(tri);

    out.push_back(rss);
    out.push_back(con_enc);
    out.push_back(gen_enc);

    GradFamily main{"main_composite"};
    for (int t = 0; main.points < kGradPoints && t < 500; ++t) {
        const MainModels m{DenseNet::xavier({5, 7, 4}, {Activation::tanh, Activation::identity}, 4000 + t),
                           DenseNet::xavier({4, 3}, {Activation::identity}, 4500 + t)};
        const std::vector<int> labels{0, 0, 1, 1, 2, 2};
        const std::size_t no = 2;
        const auto x = test::random_mat(6 + 2 * no, 5, rng);
        const auto unit = l2_normalize_rows(predict(m.encoder, x));
        Mat64 feat(8, 4), var(2, 4);
        for (std::size_t r = 0; r < 8; ++r) std::copy(unit.row(r).begin(), unit.row(r).end(), feat.row(r).begin());
        for (std::size_t r = 0; r < 2; ++r) std::copy(unit.row(8 + r).begin(), unit.row(8 + r).end(), var.row(r).begin());
        std::vector<int> tl = labels;
        tl.resize(8, -1);
        if (test::oracle::triplet_kink_gap(feat, tl, var, 0.3) < 1e-3) continue;
        const auto loss = main_loss_grad(m, x, labels, no, 0.3);
        const double ee = test::fd_error_params(
            [&](const DenseNet& e) { return main_loss_grad({e, m.classifier}, x, labels, no, 0.3).total; }, m.encoder,
            loss.encoder.flat_params(), 1e-6);
        const double ec = test::fd_error_params(
            [&](const DenseNet& c) { return main_loss_grad({m.encoder, c}, x, labels, no, 0.3).total; }, m.classifier,
            loss.classifier.flat_params(), 1e-6);
        main.add(std::max(ee, ec));
    }
    out.push_back(main);
    return out;
}

Line criterion_gradients() {
    const auto t0 = Clock::now();
    const auto fams = gradient_families();
    const double secs = seconds_since(t0);
    bool ok = secs < kGradSeconds;
    std::ostringstream d;
    for (const auto& f : fams) {
        ok = ok && f.ok();
        d << f.name << ":" << f.points << "@" << fmt("%.1e", f.worst) << " ";
    }
    d << "time=" << fmt("%.1fs", secs) << " tol=" << kGradTol;
    return {ok, d.str()};
}

// clustering oracle

Mat64 random_points(std::size_t n, Rng& rng) {
    Mat64 x(n, 2);
    const std::size_t centres = 1 + rng.below(4);
    for (std::size_t i = 0; i < n; ++i) {
        const double c = static_cast<double>(rng.below(centres)) * 3.0;
        x(i, 0) = c + rng.uniform(-1, 1) * rng.uniform();
        x(i, 1) = rng.uniform(-1, 1) * rng.uniform();
    }
    return x;
}

Line criterion_dbscan() {
    Rng rng(1002);
    int matched = 0;
    const int total = 200;
    for (int t = 0; t < total; ++t) {
        const std::size_t n = 1 + rng.below(50);
        const auto d = test::oracle::distances(random_points(n, rng), rng.below(2) == 1);
        const double eps = rng.uniform(0.01, 1.5);
        const int min_pts = 1 + static_cast<int>(rng.below(6));
        if (dbscan(d, eps, min_pts).labels == test::oracle::dbscan(d, eps, min_pts)) ++matched;
    }
    return {matched == total, std::to_string(matched) + "/" + std::to_string(total) + " exact"};
}

// retrieval oracle

struct RetrievalInstance {
    Mat64 dist;
    RetrievalSet q, g;
};

RetrievalInstance random_retrieval(Rng& rng) {
    const std::size_t nq = 1 + rng.below(10), ng = 1 + rng.below(20);
    const auto ids = 1 + rng.below(5), cams = 1 + rng.below(3);
    RetrievalInstance in;
    in.q.features = Mat64(nq, 1);
    in.g.features = Mat64(ng, 1);
    in.q.ids = random_ints(nq, ids, rng);
    in.q.cameras = random_ints(nq, cams, rng);
    in.g.ids = random_ints(ng, ids, rng);
    in.g.cameras = random_ints(ng, cams, rng);
    in.dist = Mat64(nq, ng);
    // coarse values so that ties occur
    for (double& v : in.dist.flat()) v = static_cast<double>(rng.below(6)) * 0.5;
    return in;
}

Line criterion_metrics() {
    Rng rng(1003);
    int matched = 0;
    const int total = 100;
    double worst = 0.0;
    for (int t = 0; t < total; ++t) {
        const auto in = random_retrieval(rng);
        test::WarningCapture quiet;
        const auto got = cmc_map_from_distances(in.dist, in.q, in.g);
        const auto want =
            test::oracle::retrieval(in.dist, in.q.ids, in.q.cameras, in.g.ids, in.g.cameras, in.g.ids.size());
        double err = std::abs(got.map - want.map);
        bool same = got.evaluated_queries == want.evaluated && got.cmc.size() == want.cmc.size();
        for (std::size_t k = 0; same && k < got.cmc.size(); ++k) err = std::max(err, std::abs(got.cmc[k] - want.cmc[k]));
        worst = std::max(worst, err);
        if (same && err <= kMetricTol) ++matched;
    }
    // relevant gallery entries at ranks 1 and 3
    const RetrievalSet q{Mat64::from_rows({{0.0}}), {1}, {0}};
    const RetrievalSet g{Mat64::from_rows({{0.1}, {0.2}, {0.3}, {0.4}}), {1, 2, 1, 3}, {1, 1, 2, 1}};
    const double ap = cmc_map(q, g).map;
    const bool hand = ap == (1.0 + 2.0 / 3.0) / 2.0 && std::abs(ap - 0.83333) < 5e-6;
    return {matched == total && hand, std::to_string(matched) + "/" + std::to_string(total) + " within " +
                                          fmt("%.0e", kMetricTol) + " (worst " + fmt("%.1e", worst) +
                                          ") hand AP=" + fmt("%.5f", ap)};
}

// default-seed runs, shared between criteria

const PipelineResult& fda_only(double tau) {
    static std::map<double, PipelineResult> cache;
    auto it = cache.find(tau);
    if (it == cache.end()) {
        PipelineConfig cfg;
        cfg.main_epochs = 0;
        cfg.tau = tau;
        it = cache.emplace(tau, run_pipeline(cfg)).first;
    }
    return it->second;
}

double f_of(const PipelineResult& r, const std::string& stage) {
    for (const auto& e : r.report.f_trace)
        if (e.stage == stage) return e.f;
    throw std::runtime_error("no F entry for " + stage);
}

Line criterion_fda() {
    const auto t0 = Clock::now();
    const auto& r = fda_only(PipelineConfig{}.tau);
    const double secs = seconds_since(t0);
    const double before = f_of(r, "direct"), after = f_of(r, "fda");
    const double margin = after - before;
    const bool ok = after > before && margin >= kFdaMarginRecorded - kLockSlack &&
                    r.direct_source_accuracy >= kMinSourceAccuracy && secs < kFdaSeconds;
    return {ok, "F direct=" + fmt("%.4f", before) + " fda=" + fmt("%.4f", after) + " margin=" + fmt("%.4f", margin) +
                    " (locked >= " + fmt("%.4f", kFdaMarginRecorded - kLockSlack) + ") direct source acc=" +
                    fmt("%.4f", r.direct_source_accuracy) + " time=" + fmt("%.1fs", secs)};
}

Line criterion_rss() {
    PipelineConfig cfg;
    const auto ds = generate_world(cfg.world_config());
    const auto src = ds.source_view();
    const auto tgt = ds.target_view();
    const auto truth = ds.target_truth();
    const auto fda = fda_train(init_models(cfg, ds.raw_dim, src.n_classes), src, tgt, cfg.fda_config());
    const auto cr = cluster_embeddings(embed_normalized(fda.models.encoder, tgt.features), cfg);
    std::vector<char> flipped;
    const auto noisy = corrupt_labels(cr.assignment, 0.1, stream_seed(cfg.seed, "corrupt"), &flipped);
    const double before = pairwise_f_value(noisy.labels, truth).f;

    const auto rr = run_rss_round(fda.models.encoder, tgt.features, noisy, cfg.rss_config(0));
    std::vector<int> kept(truth.size(), kOutlier);
    for (auto p : rr.verdict.reliable) kept[p] = noisy.labels[p];
    const double after = pairwise_f_value(kept, truth).f;

    double nk = 0, nr = 0;
    for (auto p : rr.verdict.reliable) nk += flipped[p];
    for (auto p : rr.verdict.rejected) nr += flipped[p];
    const double kept_rate = rr.verdict.reliable.empty() ? 0.0 : nk / static_cast<double>(rr.verdict.reliable.size());
    const double rej_rate = rr.verdict.rejected.empty() ? 0.0 : nr / static_cast<double>(rr.verdict.rejected.size());
    const bool ok = after > before && rej_rate > kept_rate;
    return {ok, "F before=" + fmt("%.4f", before) + " after=" + fmt("%.4f", after) + " noise kept=" +
                    fmt("%.4f", kept_rate) + " (" + std::to_string(rr.verdict.reliable.size()) + ") rejected=" +
                    fmt("%.4f", rej_rate) + " (" + std::to_string(rr.verdict.rejected.size()) + ")"};
}

const PipelineResult& default_run() {
    static std::optional<PipelineResult> r;
    if (!r) r = run_pipeline(PipelineConfig{});
    return *r;
}

Line criterion_instance() {
    PipelineConfig off;
    off.instance_outliers = false;
    const double with = default_run().report.map;
    const double without = run_pipeline(off).report.map;
    return {with >= without, "mAP with=" + fmt("%.4f", with) + " without=" + fmt("%.4f", without)};
}

Line criterion_tau() {
    const double lo = f_of(fda_only(0.01), "fda");
    const double mid = f_of(fda_only(0.05), "fda");
    const double hi = f_of(fda_only(0.5), "fda");
    return {mid > lo && mid > hi,
            "F tau0.01=" + fmt("%.4f", lo) + " tau0.05=" + fmt("%.4f", mid) + " tau0.5=" + fmt("%.4f", hi)};
}

Line criterion_invariants() {
    std::ostringstream d;
    bool ok = true;

    // simplex under label-logit descent
    {
        Rng rng(1008);
        const auto zl = test::random_mat(10, 5, rng, -3, 3);
        auto yl = test::random_mat(10, 5, rng, -3, 3);
        const auto hard = random_ints(10, 5, rng);
        double worst = 0.0;
        for (int s = 0; s < 1000; ++s) {
            const auto r = rss_losses(zl, yl, hard, 0.1, 0.1);
            for (std::size_t i = 0; i < yl.size(); ++i) yl.flat()[i] -= 0.3 * 10.0 * r.grad_label_logits.flat()[i];
            const auto p = softmax_rows(yl);
            for (std::size_t i = 0; i < p.rows(); ++i) {
                double sum = 0.0;
                for (double v : p.row(i)) {
                    if (!(v >= 0.0 && v <= 1.0)) worst = 1.0;
                    sum += v;
                }
                worst = std::max(worst, std::abs(sum - 1.0));
            }
        }
        ok = ok && worst <= kUnitTol;
        d << "simplex=" << fmt("%.1e", worst) << " ";
    }
    // bank rows stay unit length
    {
        Rng rng(1009);
        auto bank = random_bank(20, 6, rng);
        double worst = 0.0;
        for (int t = 0; t < 10000; ++t) {
            const auto i = static_cast<std::size_t>(rng.below(20));
            Vec64 f(6);
            for (double& v : f) v = rng.uniform(-2, 2);
            bank_update(bank, i, f.span(), rng.uniform());
            worst = std::max(worst, std::abs(norm2(bank.cells.row(i)) - 1.0));
        }
        ok = ok && worst <= kUnitTol;
        d << "bank=" << fmt("%.1e", worst) << " ";
    }
    // CMC never decreases
    {
        Rng rng(1010);
        int mono = 0;
        for (int t = 0; t < 100; ++t) {
            const auto in = random_retrieval(rng);
            test::WarningCapture quiet;
            const auto r = cmc_map_from_distances(in.dist, in.q, in.g);
            bool m = true;
            for (std::size_t k = 1; k < r.cmc.size(); ++k) m = m && r.cmc[k] >= r.cmc[k - 1];
            mono += m;
        }
        ok = ok && mono == 100;
        d << "cmc=" << mono << "/100 ";
    }
    // labeled set growth and partitions of the default run
    {
        const auto& r = default_run();
        bool grows = !r.labeled_sizes.empty();
        for (const auto& sizes : r.labeled_sizes)
            for (std::size_t k = 1; k < sizes.size(); ++k) grows = grows && sizes[k] >= sizes[k - 1];
        std::size_t good = 0;
        for (const auto& a : r.audits)
            good += a.covers_all && a.disjoint && a.ce_outlier_violations == 0 &&
                    a.reliable + a.rejected + a.cluster_outliers == a.total;
        ok = ok && grows && !r.audits.empty() && good == r.audits.size();
        d << "S_l monotone=" << (grows ? "yes" : "no") << " over " << r.labeled_sizes.size() << " rounds "
          << "partitions=" << good << "/" << r.audits.size();
    }
    return {ok, d.str()};
}

Line criterion_determinism() {
    test::TempDir dir("acceptance");
    double worst = 0.0;
    std::vector<std::string> reports;
    for (const char* leaf : {"a", "b"}) {
        const std::string out = (dir / leaf).string();
        const char* argv[] = {"anl", "pipeline", "--out", out.c_str()};
        std::ostringstream so, se;
        const auto t0 = Clock::now();
        const int code = cli::run(4, argv, so, se);
        worst = std::max(worst, seconds_since(t0));
        if (code != cli::kOk) return {false, "pipeline exit " + std::to_string(code) + ": " + se.str()};
        reports.push_back(test::slurp(dir / leaf / "report.json"));
    }
    const bool same = !reports[0].empty() && reports[0] == reports[1];
    return {same && worst < kPipelineSeconds, std::string("report.json ") + (same ? "identical" : "differs") + " (" +
                                                  std::to_string(reports[0].size()) + " bytes) slowest=" +
                                                  fmt("%.1fs", worst)};
}

}  // namespace

int main() {
    log::set_sink([](const std::string&) {});
    emit(1, "gradients", criterion_gradients);
    emit(2, "dbscan oracle", criterion_dbscan);
    emit(3, "retrieval oracle", criterion_metrics);
    emit(4, "alignment raises F", criterion_fda);
    emit(5, "reliable selection denoises", criterion_rss);
    emit(6, "outlier instance training", criterion_instance);
    emit(7, "temperature sweep", criterion_tau);
    emit(8, "invariants", criterion_invariants);
    emit(9, "determinism", criterion_determinism);
    std::printf("%d of 9 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
