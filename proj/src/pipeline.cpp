#include "anl/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "anl/csv.hpp"
#include "anl/errors.hpp"
#include "anl/log.hpp"
#include "anl/rng.hpp"

namespace anl {

namespace {

enum class Kind { integer, uinteger, real, boolean, metric };

struct Key {
    const char* name;
    Kind kind;
    std::function<void*(PipelineConfig&)> ref;
};

#define ANL_KEY(name, kind, expr) \
    Key { name, kind, [](PipelineConfig& c) -> void* { return &(expr); } }

const std::vector<Key>& keys() {
    static const std::vector<Key> k = {
        ANL_KEY("n_identities", Kind::integer, c.world.n_identities),
        ANL_KEY("n_cameras", Kind::integer, c.world.n_cameras),
        ANL_KEY("samples_per_identity", Kind::integer, c.world.samples_per_identity),
        ANL_KEY("cameras_per_identity", Kind::integer, c.world.cameras_per_identity),
        ANL_KEY("raw_dim", Kind::integer, c.world.raw_dim),
        ANL_KEY("camera_scale", Kind::real, c.world.camera_scale),
        ANL_KEY("domain_shift", Kind::real, c.world.domain_shift),
        ANL_KEY("noise_sigma", Kind::real, c.world.noise_sigma),
        ANL_KEY("variant_sigma", Kind::real, c.world.variant_sigma),
        ANL_KEY("query_fraction", Kind::real, c.world.query_fraction),
        ANL_KEY("hidden_dim", Kind::integer, c.hidden_dim),
        ANL_KEY("embed_dim", Kind::integer, c.embed_dim),
        ANL_KEY("disc_hidden", Kind::integer, c.disc_hidden),
        ANL_KEY("disc_depth", Kind::integer, c.disc_depth),
        ANL_KEY("batch_size", Kind::integer, c.batch_size),
        ANL_KEY("lr", Kind::real, c.lr),
        ANL_KEY("iters_per_epoch", Kind::integer, c.iters_per_epoch),
        ANL_KEY("fda_epochs", Kind::integer, c.fda_epochs),
        ANL_KEY("tau", Kind::real, c.tau),
        ANL_KEY("alpha", Kind::real, c.alpha),
        ANL_KEY("r1", Kind::integer, c.r1),
        ANL_KEY("r2", Kind::integer, c.r2),
        ANL_KEY("per_iter_neighbors", Kind::boolean, c.per_iter_neighbors),
        ANL_KEY("freeze_variants", Kind::boolean, c.freeze_variants),
        ANL_KEY("row_normalize_targets", Kind::boolean, c.row_normalize_targets),
        ANL_KEY("main_epochs", Kind::integer, c.main_epochs),
        ANL_KEY("rss_period", Kind::integer, c.rss_period),
        ANL_KEY("recluster_every_epoch", Kind::boolean, c.recluster_every_epoch),
        ANL_KEY("cluster_p", Kind::real, c.cluster_p),
        ANL_KEY("min_pts", Kind::integer, c.min_pts),
        ANL_KEY("cluster_metric", Kind::metric, c.cluster_metric),
        ANL_KEY("margin", Kind::real, c.margin),
        ANL_KEY("p_ids", Kind::integer, c.p_ids),
        ANL_KEY("k_per_id", Kind::integer, c.k_per_id),
        ANL_KEY("max_outliers", Kind::integer, c.max_outliers),
        ANL_KEY("instance_outliers", Kind::boolean, c.instance_outliers),
        ANL_KEY("use_rss", Kind::boolean, c.use_rss),
        ANL_KEY("k_clean", Kind::integer, c.k_clean),
        ANL_KEY("lambda_conf", Kind::real, c.lambda_conf),
        ANL_KEY("mu", Kind::real, c.mu),
        ANL_KEY("lambda_c", Kind::real, c.lambda_c),
        ANL_KEY("lambda_e", Kind::real, c.lambda_e),
        ANL_KEY("label_lr", Kind::real, c.label_lr),
        ANL_KEY("reverse_kl", Kind::boolean, c.reverse_kl),
        ANL_KEY("aux_stage1_epochs", Kind::integer, c.aux_stage1_epochs),
        ANL_KEY("aux_stage2_epochs", Kind::integer, c.aux_stage2_epochs),
        ANL_KEY("label_noise", Kind::real, c.label_noise),
        ANL_KEY("eval_max_rank", Kind::integer, c.eval_max_rank),
        ANL_KEY("seed", Kind::uinteger, c.seed),
    };
    return k;
}

#undef ANL_KEY

const Key& find_key(const std::string& name) {
    for (const auto& k : keys())
        if (name == k.name) return k;
    throw ConfigError(name, "unknown key");
}

std::string metric_name(Metric m) { return m == Metric::euclidean ? "euclidean" : "cosine"; }

Metric metric_from_name(const std::string& key, const std::string& s) {
    if (s == "euclidean") return Metric::euclidean;
    if (s == "cosine") return Metric::cosine_dist;
    throw ConfigError(key, "expected euclidean or cosine, got '" + s + "'");
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& s) {
    T v{};
    const auto* end = s.data() + s.size();
    const auto [p, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc() || p != end) throw ConfigError(key, "not a valid number: '" + s + "'");
    return v;
}

void check_int_range(const std::string& key, long long v) {
    if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max())
        throw ConfigError(key, "out of range");
}

}  // namespace

std::vector<std::string> config_keys() {
    std::vector<std::string> out;
    for (const auto& k : keys()) out.emplace_back(k.name);
    return out;
}

void set_config_value(PipelineConfig& cfg, const std::string& key, const std::string& raw) {
    const Key& k = find_key(key);
    const std::string value = trim(raw);
    void* p = k.ref(cfg);
    switch (k.kind) {
    case Kind::integer: {
        const auto v = parse_number<long long>(key, value);
        check_int_range(key, v);
        *static_cast<int*>(p) = static_cast<int>(v);
        break;
    }
    case Kind::uinteger:
        *static_cast<std::uint64_t*>(p) = parse_number<std::uint64_t>(key, value);
        break;
    case Kind::real: {
        const double v = parse_number<double>(key, value);
        if (!std::isfinite(v)) throw ConfigError(key, "must be finite");
        *static_cast<double*>(p) = v;
        break;
    }
    case Kind::boolean:
        if (value == "true" || value == "1") *static_cast<bool*>(p) = true;
        else if (value == "false" || value == "0") *static_cast<bool*>(p) = false;
        else throw ConfigError(key, "expected true or false, got '" + value + "'");
        break;
    case Kind::metric:
        *static_cast<Metric*>(p) = metric_from_name(key, value);
        break;
    }
}

nlohmann::ordered_json config_to_json(const PipelineConfig& cfg) {
    PipelineConfig c = cfg;
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& k : keys()) {
        void* p = k.ref(c);
        switch (k.kind) {
        case Kind::integer: j[k.name] = *static_cast<int*>(p); break;
        case Kind::uinteger: j[k.name] = *static_cast<std::uint64_t*>(p); break;
        case Kind::real: j[k.name] = *static_cast<double*>(p); break;
        case Kind::boolean: j[k.name] = *static_cast<bool*>(p); break;
        case Kind::metric: j[k.name] = metric_name(*static_cast<Metric*>(p)); break;
        }
    }
    return j;
}

PipelineConfig config_from_json(const nlohmann::json& j, PipelineConfig cfg) {
    if (!j.is_object()) throw ConfigError("config", "expected a JSON object");
    for (const auto& [name, v] : j.items()) {
        const Key& k = find_key(name);
        void* p = k.ref(cfg);
        switch (k.kind) {
        case Kind::integer:
            if (!v.is_number_integer()) throw ConfigError(name, "expected an integer");
            check_int_range(name, v.get<long long>());
            *static_cast<int*>(p) = v.get<int>();
            break;
        case Kind::uinteger:
            if (!v.is_number_unsigned()) throw ConfigError(name, "expected a non-negative integer");
            *static_cast<std::uint64_t*>(p) = v.get<std::uint64_t>();
            break;
        case Kind::real:
            if (!v.is_number()) throw ConfigError(name, "expected a number");
            *static_cast<double*>(p) = v.get<double>();
            break;
        case Kind::boolean:
            if (!v.is_boolean()) throw ConfigError(name, "expected true or false");
            *static_cast<bool*>(p) = v.get<bool>();
            break;
        case Kind::metric:
            if (!v.is_string()) throw ConfigError(name, "expected a string");
            *static_cast<Metric*>(p) = metric_from_name(name, v.get<std::string>());
            break;
        }
    }
    return cfg;
}

PipelineConfig config_from_kv(const std::string& text, PipelineConfig cfg) {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
        const std::string t = trim(line);
        if (t.empty()) continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno), "expected key=value, got '" + t + "'");
        set_config_value(cfg, trim(std::string_view(t).substr(0, eq)), t.substr(eq + 1));
    }
    return cfg;
}

PipelineConfig load_config(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot open config " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    const std::string text = ss.str();
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && text[first] == '{') {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(text);
        } catch (const nlohmann::json::parse_error& e) {
            throw InputError(path.string() + ": " + e.what());
        }
        return config_from_json(j);
    }
    return config_from_kv(text);
}

std::string config_hash(const PipelineConfig& cfg) {
    const auto j = config_to_json(cfg);
    std::string canon;
    for (const auto& [k, v] : j.items()) canon += k + "=" + v.dump() + "\n";
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(canon)));
    return buf;
}

WorldConfig PipelineConfig::world_config() const {
    WorldConfig w = world;
    w.seed = stream_seed(seed, "world");
    return w;
}

std::string run_dir_name(const PipelineConfig& cfg) { return config_hash(cfg) + "-s" + std::to_string(cfg.seed); }

void PipelineConfig::validate() const {
    world.validate();
    if (hidden_dim < 1) throw ConfigError("hidden_dim", "must be >= 1");
    if (embed_dim < 1) throw ConfigError("embed_dim", "must be >= 1");
    if (disc_hidden < 1) throw ConfigError("disc_hidden", "must be >= 1");
    if (disc_depth < 1) throw ConfigError("disc_depth", "must be >= 1");
    fda_config().validate();
    if (main_epochs < 0) throw ConfigError("main_epochs", "must be >= 0");
    if (rss_period < 1) throw ConfigError("rss_period", "must be >= 1");
    if (!(cluster_p > 0.0 && cluster_p < 1.0)) throw ConfigError("cluster_p", "must be in (0,1)");
    if (min_pts < 1) throw ConfigError("min_pts", "must be >= 1");
    if (margin < 0.0) throw ConfigError("margin", "must be >= 0");
    if (p_ids < 1) throw ConfigError("p_ids", "must be >= 1");
    if (k_per_id < 1) throw ConfigError("k_per_id", "must be >= 1");
    if (max_outliers < 0) throw ConfigError("max_outliers", "must be >= 0");
    rss_config(0).validate();
    if (label_noise < 0.0 || label_noise >= 1.0) throw ConfigError("label_noise", "must be in [0,1)");
    if (eval_max_rank < 1) throw ConfigError("eval_max_rank", "must be >= 1");
}

FdaConfig PipelineConfig::fda_config() const {
    FdaConfig f;
    f.epochs = fda_epochs;
    f.batch_size = batch_size;
    f.iters_per_epoch = iters_per_epoch;
    f.lr = lr;
    f.tau = tau;
    f.alpha = alpha;
    f.r1 = r1;
    f.r2 = r2;
    f.variant_sigma = world.variant_sigma;
    f.per_iter_neighbors = per_iter_neighbors;
    f.freeze_variants = freeze_variants;
    f.row_normalize_targets = row_normalize_targets;
    f.seed = stream_seed(seed, "fda");
    return f;
}

RssConfig PipelineConfig::rss_config(int round) const {
    RssConfig r;
    r.k_clean = k_clean;
    r.lambda_conf = lambda_conf;
    r.mu = mu;
    r.lambda_c = lambda_c;
    r.lambda_e = lambda_e;
    r.label_lr = label_lr;
    r.reverse_kl = reverse_kl;
    r.stage1_epochs = aux_stage1_epochs;
    r.stage2_epochs = aux_stage2_epochs;
    r.batch_size = batch_size;
    r.iters_per_epoch = iters_per_epoch;
    r.p_ids = p_ids;
    r.k_per_id = k_per_id;
    r.margin = margin;
    r.lr = lr;
    r.seed = stream_seed(seed, "rss", static_cast<std::uint64_t>(round));
    return r;
}

MainEpochConfig PipelineConfig::main_config() const {
    MainEpochConfig m;
    m.p_ids = p_ids;
    m.k_per_id = k_per_id;
    m.max_outliers = max_outliers;
    m.iters_per_epoch = iters_per_epoch;
    m.margin = margin;
    m.variant_sigma = world.variant_sigma;
    m.instance_outliers = instance_outliers;
    m.seed = stream_seed(seed, "main");
    return m;
}

FdaModels init_models(const PipelineConfig& cfg, int raw_dim, int n_source_classes) {
    const auto h = static_cast<std::size_t>(cfg.hidden_dim);
    const auto e = static_cast<std::size_t>(cfg.embed_dim);
    FdaModels m{
        DenseNet::xavier({static_cast<std::size_t>(raw_dim), h, e}, {Activation::relu, Activation::identity},
                         stream_seed(cfg.seed, "init-encoder")),
        DenseNet::xavier({e, static_cast<std::size_t>(n_source_classes)}, {Activation::identity},
                         stream_seed(cfg.seed, "init-source-classifier")),
        {}};
    std::vector<std::size_t> dims{e};
    std::vector<Activation> acts;
    for (int d = 1; d < cfg.disc_depth; ++d) {
        dims.push_back(static_cast<std::size_t>(cfg.disc_hidden));
        acts.push_back(Activation::relu);
    }
    dims.push_back(1);
    acts.push_back(Activation::identity);
    m.disc = DenseNet::xavier(dims, acts, stream_seed(cfg.seed, "init-disc"));
    return m;
}

ClusterRound cluster_embeddings(const Mat64& unit, const PipelineConfig& cfg) {
    const Mat64 dist = pairwise_distance(unit, cfg.cluster_metric);
    ClusterRound out;
    out.eps = select_eps(dist, cfg.cluster_p);
    out.assignment = dbscan(dist, out.eps, cfg.min_pts);
    attach_centroids(out.assignment, unit);
    return out;
}

ClusterAssignment corrupt_labels(const ClusterAssignment& a, double fraction, std::uint64_t seed,
                                 std::vector<char>* flipped) {
    ClusterAssignment out = a;
    std::vector<char> mask(a.size(), 0);
    std::vector<std::size_t> clustered;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a.labels[i] != kOutlier) clustered.push_back(i);
    if (a.n_clusters >= 2 && fraction > 0.0) {
        Rng rng(seed, "corrupt-labels");
        rng.shuffle(clustered);
        const auto n = std::min(clustered.size(),
                                static_cast<std::size_t>(std::llround(fraction * static_cast<double>(clustered.size()))));
        for (std::size_t t = 0; t < n; ++t) {
            const std::size_t i = clustered[t];
            const auto shift = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(a.n_clusters - 1)));
            out.labels[i] = (a.labels[i] + shift) % a.n_clusters;
            mask[i] = 1;
        }
    }
    if (flipped) *flipped = std::move(mask);
    return out;
}

RetrievalResult evaluate_retrieval(const DenseNet& encoder, const Dataset& ds, std::size_t max_rank) {
    Mat64 x(ds.target.size(), static_cast<std::size_t>(ds.raw_dim));
    for (std::size_t i = 0; i < ds.target.size(); ++i)
        std::copy(ds.target[i].raw.begin(), ds.target[i].raw.end(), x.row(i).begin());
    const Mat64 unit = embed_normalized(encoder, x);
    auto make_set = [&](const std::vector<std::size_t>& pos) {
        RetrievalSet s;
        s.features = unit.gather_rows(pos);
        for (auto p : pos) {
            s.ids.push_back(ds.target[p].true_id);
            s.cameras.push_back(ds.target[p].camera);
        }
        return s;
    };
    return cmc_map(make_set(ds.query), make_set(ds.gallery), max_rank);
}

namespace {

FTraceEntry f_entry(const std::string& stage, std::span<const int> predicted, std::span<const int> truth) {
    const auto s = pairwise_f_value(predicted, truth);
    return {stage, s.precision, s.recall, s.f};
}

StageMetrics stage_entry(const std::string& stage, const RetrievalResult& r) { return {stage, r.cmc, r.map}; }

template <typename F>
auto in_stage(const char* stage, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const StageError&) {
        throw;
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(stage, e.what());
    }
}

DenseNet fresh_classifier(const PipelineConfig& cfg, int n_clusters, int round) {
    return DenseNet::xavier({static_cast<std::size_t>(cfg.embed_dim), static_cast<std::size_t>(n_clusters)},
                            {Activation::identity},
                            stream_seed(cfg.seed, "main-classifier", static_cast<std::uint64_t>(round)));
}

}  // namespace

MainStageResult run_main_stage(const DenseNet& encoder, const Dataset& ds, const PipelineConfig& cfg) {
    cfg.validate();
    const TargetView tgt = ds.target_view();
    const std::vector<int> truth = ds.target_truth();
    const bool diagnostics = std::none_of(truth.begin(), truth.end(), [](int t) { return t == kUnknownId; });
    const auto max_rank = static_cast<std::size_t>(cfg.eval_max_rank);

    MainStageResult out;
    out.main_trace = {"main_trace", {"epoch", "ce", "triplet", "reliable", "outliers", "clusters"}, {}};
    out.partition_trace = {"partition_trace",
                           {"round", "epoch", "eps", "clusters", "cluster_outliers", "reliable", "rejected", "ties"},
                           {}};
    out.rss_trace = {"rss_trace",
                     {"round", "stage", "epoch", "ce", "triplet", "entropy", "l_kl", "l_c", "l_e", "labeled"},
                     {}};

    MainModels main{encoder, {}};
    MainOptimizers opt;
    opt.encoder = AdamState::for_net(main.encoder, cfg.lr);
    int n_clusters = -1;
    std::vector<std::size_t> reliable, outliers;
    std::vector<int> reliable_labels;
    int round = 0;

    for (int epoch = 0; epoch < cfg.main_epochs; ++epoch) {
        const bool rss_epoch = epoch % cfg.rss_period == 0;
        if (rss_epoch || cfg.recluster_every_epoch) {
            const Mat64 unit = embed_normalized(main.encoder, tgt.features);
            const auto cr = in_stage("cluster", [&] { return cluster_embeddings(unit, cfg); });
            ClusterAssignment assignment = cr.assignment;
            if (cfg.label_noise > 0.0)
                assignment = corrupt_labels(assignment, cfg.label_noise,
                                            stream_seed(cfg.seed, "label-noise", static_cast<std::uint64_t>(round)));
            const std::string tag = "round" + std::to_string(round);
            if (diagnostics) out.f_trace.push_back(f_entry(tag + "_cluster", assignment.labels, truth));

            PartitionAudit audit;
            audit.round = round;
            audit.epoch = epoch;
            audit.total = assignment.size();
            audit.cluster_outliers = assignment.n_outliers();
            reliable.clear();
            reliable_labels.clear();
            outliers.clear();
            std::vector<std::size_t> rejected;
            std::size_t ties = 0;
            const bool refine = cfg.use_rss && rss_epoch && assignment.n_clusters >= 1;

            if (assignment.n_clusters < 1) {
                log::warn("epoch " + std::to_string(epoch) + ": clustering found no clusters");
            } else if (refine) {
                const auto rr = in_stage("rss", [&] {
                    return run_rss_round(main.encoder, tgt.features, assignment, cfg.rss_config(round));
                });
                for (const auto& row : rr.trace.rows) {
                    std::vector<double> r{static_cast<double>(round)};
                    r.insert(r.end(), row.begin(), row.end());
                    out.rss_trace.rows.push_back(std::move(r));
                }
                out.labeled_sizes.push_back(rr.labeled_sizes);
                reliable = rr.verdict.reliable;
                rejected = rr.verdict.rejected;
                ties = rr.verdict.ties;
            } else {
                for (std::size_t i = 0; i < assignment.size(); ++i)
                    if (assignment.labels[i] != kOutlier) reliable.push_back(i);
            }
            std::vector<int> predicted(assignment.size(), kOutlier);
            for (auto p : reliable) {
                reliable_labels.push_back(assignment.labels[p]);
                predicted[p] = assignment.labels[p];
            }
            if (diagnostics && refine) out.f_trace.push_back(f_entry(tag + "_rss", predicted, truth));

            // everything not reliable is trained as an instance
            const std::set<std::size_t> rel(reliable.begin(), reliable.end());
            const std::set<std::size_t> rej(rejected.begin(), rejected.end());
            std::size_t overlap = 0, covered = 0;
            for (std::size_t i = 0; i < assignment.size(); ++i) {
                const int memberships = static_cast<int>(rel.count(i)) + static_cast<int>(rej.count(i)) +
                                        static_cast<int>(assignment.labels[i] == kOutlier);
                overlap += memberships > 1;
                covered += memberships > 0;
                if (!rel.count(i)) outliers.push_back(i);
            }
            audit.reliable = reliable.size();
            audit.rejected = rejected.size();
            audit.covers_all = covered == assignment.size();
            audit.disjoint = overlap == 0;
            out.audits.push_back(audit);
            out.partition_trace.rows.push_back(
                {static_cast<double>(round), static_cast<double>(epoch), cr.eps,
                 static_cast<double>(assignment.n_clusters), static_cast<double>(audit.cluster_outliers),
                 static_cast<double>(audit.reliable), static_cast<double>(audit.rejected), static_cast<double>(ties)});

            if (assignment.n_clusters >= 1 && assignment.n_clusters != n_clusters) {
                n_clusters = assignment.n_clusters;
                main.classifier = fresh_classifier(cfg, n_clusters, round);
                opt.classifier = AdamState::for_net(main.classifier, cfg.lr);
            }
            if (rss_epoch) {
                if (diagnostics) out.stages.push_back(stage_entry(tag, evaluate_retrieval(main.encoder, ds, max_rank)));
                ++round;
            }
        }

        MainEpochStats st;
        if (n_clusters >= 1) {
            st = in_stage("main", [&] {
                return main_epoch(main, opt, tgt.features, reliable, reliable_labels, outliers, cfg.main_config(),
                                  epoch);
            });
            const std::set<std::size_t> out_set(outliers.begin(), outliers.end());
            for (auto p : st.ce_positions) out.audits.back().ce_outlier_violations += out_set.count(p);
        } else {
            log::warn("epoch " + std::to_string(epoch) + ": no pseudo-labels; epoch skipped");
        }
        out.main_trace.rows.push_back({static_cast<double>(epoch), st.ce, st.triplet,
                                       static_cast<double>(reliable.size()), static_cast<double>(outliers.size()),
                                       static_cast<double>(n_clusters)});
    }
    out.encoder = main.encoder;
    return out;
}

PipelineResult run_pipeline(const PipelineConfig& cfg) {
    cfg.validate();
    PipelineResult out;
    MetricsReport& rep = out.report;
    rep.seed = cfg.seed;
    rep.config = config_to_json(cfg);
    const auto max_rank = static_cast<std::size_t>(cfg.eval_max_rank);

    out.dataset = in_stage("generate", [&] { return generate_world(cfg.world_config()); });
    const Dataset& ds = out.dataset;
    const SourceView src = ds.source_view();
    const TargetView tgt = ds.target_view();
    const std::vector<int> truth = ds.target_truth();
    auto f_of = [&](const char* stage, const DenseNet& enc) {
        const auto cr = in_stage("cluster", [&] { return cluster_embeddings(embed_normalized(enc, tgt.features), cfg); });
        return f_entry(stage, cr.assignment.labels, truth);
    };

    const FdaModels init = init_models(cfg, ds.raw_dim, src.n_classes);
    const FdaConfig fcfg = cfg.fda_config();

    // direct transfer: same initialization, source supervision only
    FdaConfig dcfg = fcfg;
    dcfg.use_contrastive = false;
    dcfg.use_adversarial = false;
    FdaResult direct = in_stage("direct", [&] { return fda_train(init, src, tgt, dcfg); });
    direct.trace.name = "direct_trace";
    rep.stages.push_back(stage_entry("direct", evaluate_retrieval(direct.models.encoder, ds, max_rank)));
    rep.f_trace.push_back(f_of("direct", direct.models.encoder));
    out.direct_source_accuracy = source_accuracy(direct.models, src);

    const FdaResult fda = in_stage("fda", [&] { return fda_train(init, src, tgt, fcfg); });
    const auto fda_eval = evaluate_retrieval(fda.models.encoder, ds, max_rank);
    rep.stages.push_back(stage_entry("fda", fda_eval));
    rep.f_trace.push_back(f_of("fda", fda.models.encoder));
    rep.cmc = fda_eval.cmc;
    rep.map = fda_eval.map;
    rep.traces.push_back(direct.trace);
    rep.traces.push_back(fda.trace);
    out.final_encoder = fda.models.encoder;

    if (cfg.main_epochs > 0) {
        MainStageResult ms = run_main_stage(fda.models.encoder, ds, cfg);
        rep.f_trace.insert(rep.f_trace.end(), ms.f_trace.begin(), ms.f_trace.end());
        rep.stages.insert(rep.stages.end(), ms.stages.begin(), ms.stages.end());
        const auto fin = evaluate_retrieval(ms.encoder, ds, max_rank);
        rep.stages.push_back(stage_entry("final", fin));
        rep.f_trace.push_back(f_of("final", ms.encoder));
        rep.cmc = fin.cmc;
        rep.map = fin.map;
        rep.traces.push_back(ms.main_trace);
        rep.traces.push_back(ms.partition_trace);
        if (!ms.rss_trace.rows.empty()) rep.traces.push_back(ms.rss_trace);
        out.audits = std::move(ms.audits);
        out.labeled_sizes = std::move(ms.labeled_sizes);
        out.final_encoder = std::move(ms.encoder);
    }
    return out;
}

double source_accuracy(const FdaModels& models, const SourceView& source) {
    const Mat64 logits = predict(models.classifier, predict(models.encoder, source.features));
    std::size_t hit = 0;
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        const auto row = logits.row(i);
        hit += static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()) == source.labels[i];
    }
    return logits.rows() ? static_cast<double>(hit) / static_cast<double>(logits.rows()) : 0.0;
}

void write_run_manifest(const PipelineConfig& cfg, const std::filesystem::path& run_dir,
                        const std::vector<std::pair<std::string, std::vector<std::string>>>& stages,
                        const std::string& created_at) {
    nlohmann::ordered_json j;
    j["format"] = "anl-run-manifest";
    j["version"] = 1;
    j["tool_version"] = kToolVersion;
    j["config_hash"] = config_hash(cfg);
    j["seed"] = cfg.seed;
    if (!created_at.empty()) j["created_at"] = created_at;
    j["config"] = config_to_json(cfg);
    nlohmann::ordered_json st = nlohmann::ordered_json::array();
    for (const auto& [name, artifacts] : stages) {
        for (const auto& a : artifacts)
            if (!std::filesystem::exists(run_dir / a))
                throw std::runtime_error("manifest: missing artifact " + (run_dir / a).string());
        nlohmann::ordered_json e;
        e["stage"] = name;
        e["artifacts"] = artifacts;
        st.push_back(e);
    }
    j["stages"] = st;
    std::filesystem::create_directories(run_dir);
    std::ofstream f(run_dir / "run.json", std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + (run_dir / "run.json").string());
    f << j.dump(2) << "\n";
}

}  // namespace anl
