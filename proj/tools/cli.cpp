#include "cli.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "anl/clusterer.hpp"
#include "anl/csv.hpp"
#include "anl/errors.hpp"
#include "anl/fda.hpp"
#include "anl/kernels.hpp"
#include "anl/log.hpp"
#include "anl/metrics.hpp"
#include "anl/pipeline.hpp"
#include "anl/rss.hpp"

namespace fs = std::filesystem;

namespace anl::cli {

void write_embeddings(const fs::path& path, const Mat64& emb) {
    std::vector<std::string> header{"index"};
    for (std::size_t k = 0; k < emb.cols(); ++k) header.push_back("e" + std::to_string(k));
    std::vector<std::vector<std::string>> rows;
    for (std::size_t i = 0; i < emb.rows(); ++i) {
        std::vector<std::string> r{std::to_string(i)};
        for (double v : emb.row(i)) r.push_back(csv::format_double(v));
        rows.push_back(std::move(r));
    }
    csv::write(path, header, rows);
}

Embeddings read_embeddings(const fs::path& path) {
    const auto t = csv::read(path);
    const std::string p = path.string();
    if (t.header.size() < 2 || t.header[0] != "index") throw InputError(p, 1, "expected header index,e0,...");
    Embeddings e;
    e.values = Mat64(t.rows.size(), t.header.size() - 1);
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        e.index.push_back(csv::parse_int(t.rows[r][0], p, t.line_numbers[r]));
        for (std::size_t k = 1; k < t.header.size(); ++k)
            e.values(r, k - 1) = csv::parse_double(t.rows[r][k], p, t.line_numbers[r]);
    }
    return e;
}

void write_meta(const fs::path& path, const Dataset& ds) {
    std::vector<std::string> role(ds.target.size(), "train");
    for (auto q : ds.query) role[q] = "query";
    for (auto g : ds.gallery) role[g] = "gallery";
    std::vector<std::vector<std::string>> rows;
    for (std::size_t i = 0; i < ds.target.size(); ++i) {
        const auto& s = ds.target[i];
        rows.push_back({std::to_string(i), role[i], std::to_string(s.camera),
                        s.true_id == kUnknownId ? std::string() : std::to_string(s.true_id)});
    }
    csv::write(path, {"index", "role", "camera", "true_id"}, rows);
}

std::vector<MetaRow> read_meta(const fs::path& path) {
    const auto t = csv::read(path);
    const std::string p = path.string();
    if (t.header != std::vector<std::string>{"index", "role", "camera", "true_id"})
        throw InputError(p, 1, "expected header index,role,camera,true_id");
    std::vector<MetaRow> out;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const auto& row = t.rows[r];
        const auto line = t.line_numbers[r];
        MetaRow m;
        m.index = csv::parse_int(row[0], p, line);
        m.role = row[1];
        if (m.role != "query" && m.role != "gallery" && m.role != "train")
            throw InputError(p, line, "role must be query, gallery or train");
        m.camera = static_cast<int>(csv::parse_int(row[2], p, line));
        m.true_id = row[3].empty() ? kUnknownId : static_cast<int>(csv::parse_int(row[3], p, line));
        out.push_back(m);
    }
    return out;
}

namespace {

struct Common {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    int threads = 0;
    bool stamp = false;
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("--config", c.config, "key=value or JSON config file");
    app->add_option("--out", c.out, "run directory (default: $ANL_RUN_DIR, else runs/<hash>-s<seed>)");
    app->add_option("--seed", c.seed, "override the config seed");
    app->add_option("--threads", c.threads, "OpenMP threads (0: runtime default)")->check(CLI::NonNegativeNumber);
    app->add_flag("--stamp", c.stamp, "record a creation time in run.json");
}

PipelineConfig load(const Common& c) {
    PipelineConfig cfg;
    if (!c.config.empty()) {
        if (!fs::exists(c.config)) throw InputError("config file not found: " + c.config);
        cfg = load_config(c.config);
    }
    if (c.seed) cfg.seed = *c.seed;
    cfg.validate();
    if (c.threads > 0) kernels::set_num_threads(c.threads);
    return cfg;
}

fs::path out_dir(const Common& c, const PipelineConfig& cfg) {
    fs::path dir;
    if (!c.out.empty()) dir = c.out;
    else if (const char* e = std::getenv("ANL_RUN_DIR"); e && *e) dir = e;
    else dir = fs::path("runs") / run_dir_name(cfg);
    fs::create_directories(dir);
    return dir;
}

std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// Merges this stage into an existing run.json written under the same config.
void record_stage(const Common& c, const PipelineConfig& cfg, const fs::path& dir, const std::string& stage,
                  const std::vector<std::string>& artifacts) {
    std::vector<std::pair<std::string, std::vector<std::string>>> stages;
    std::ifstream in(dir / "run.json");
    if (in) {
        try {
            const auto j = nlohmann::json::parse(in);
            if (j.value("config_hash", "") == config_hash(cfg))
                for (const auto& s : j.at("stages")) {
                    const auto name = s.at("stage").get<std::string>();
                    if (name == stage) continue;
                    std::vector<std::string> kept;
                    for (const auto& a : s.at("artifacts"))
                        if (fs::exists(dir / a.get<std::string>())) kept.push_back(a.get<std::string>());
                    stages.emplace_back(name, kept);
                }
        } catch (const nlohmann::json::exception&) {
            log::warn("ignoring unreadable " + (dir / "run.json").string());
        }
    }
    stages.emplace_back(stage, artifacts);
    write_run_manifest(cfg, dir, stages, c.stamp ? utc_now() : std::string());
}

void write_trace(const fs::path& path, const Trace& t) {
    std::vector<std::vector<std::string>> rows;
    for (const auto& r : t.rows) {
        std::vector<std::string> s;
        for (double v : r) s.push_back(csv::format_double(v));
        rows.push_back(std::move(s));
    }
    csv::write(path, t.columns, rows);
}

fs::path or_default(const std::string& given, const fs::path& fallback) {
    return given.empty() ? fallback : fs::path(given);
}

Dataset load_dataset(const std::string& data, const fs::path& dir) {
    const fs::path d = or_default(data, dir);
    if (!fs::exists(d / "dataset.csv")) throw InputError("no dataset.csv under " + d.string());
    return import_dataset(d);
}

DenseNet load_encoder(const fs::path& path) {
    if (!fs::exists(path)) throw InputError("encoder not found: " + path.string());
    return load_net(path);
}

std::string fmt5(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.5f", v);
    return buf;
}

int cmd_generate(const Common& c, std::ostream& out) {
    const auto cfg = load(c);
    const auto dir = out_dir(c, cfg);
    const Dataset ds = generate_world(cfg.world_config());
    export_dataset(ds, cfg.world_config(), dir);
    record_stage(c, cfg, dir, "generate", {"dataset.csv", "manifest.json"});
    out << "source=" << ds.source.size() << " target=" << ds.target.size() << " query=" << ds.query.size()
        << " gallery=" << ds.gallery.size() << "\n";
    out << "wrote " << dir.string() << "\n";
    return kOk;
}

int cmd_fda(const Common& c, const std::string& data, bool direct, std::ostream& out) {
    const auto cfg = load(c);
    const auto dir = out_dir(c, cfg);
    const Dataset ds = load_dataset(data, dir);
    const auto src = ds.source_view();
    const auto tgt = ds.target_view();
    FdaConfig fc = cfg.fda_config();
    if (direct) fc.use_contrastive = fc.use_adversarial = false;
    const std::string prefix = direct ? "direct" : "fda";
    FdaResult r;
    try {
        r = fda_train(init_models(cfg, ds.raw_dim, src.n_classes), src, tgt, fc);
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(prefix, e.what());
    }
    r.trace.name = prefix + "_trace";
    save_net(r.models.encoder, dir / (prefix + "_encoder.json"));
    write_embeddings(dir / (prefix + "_embeddings.csv"), embed_normalized(r.models.encoder, tgt.features));
    write_meta(dir / "meta.csv", ds);
    write_trace(dir / (r.trace.name + ".csv"), r.trace);
    record_stage(c, cfg, dir, prefix,
                 {prefix + "_encoder.json", prefix + "_embeddings.csv", "meta.csv", r.trace.name + ".csv"});
    out << "source accuracy " << fmt5(source_accuracy(r.models, src)) << "\n";
    out << "wrote " << dir.string() << "\n";
    return kOk;
}

int cmd_cluster(const Common& c, const std::string& embeddings, std::ostream& out) {
    const auto cfg = load(c);
    const auto dir = out_dir(c, cfg);
    const auto path = or_default(embeddings, dir / "fda_embeddings.csv");
    if (!fs::exists(path)) throw InputError("embeddings not found: " + path.string());
    const auto e = read_embeddings(path);
    for (std::size_t i = 0; i < e.index.size(); ++i)
        if (e.index[i] != static_cast<long long>(i))
            throw InputError(path.string(), i + 2, "rows must be indexed 0..N-1 in order");
    ClusterRound cr;
    try {
        cr = cluster_embeddings(l2_normalize_rows(e.values), cfg);
    } catch (const std::exception& ex) {
        throw StageError("cluster", ex.what());
    }
    write_assignment_csv(cr.assignment, dir / "assignment.csv");
    record_stage(c, cfg, dir, "cluster", {"assignment.csv"});
    out << "clusters=" << cr.assignment.n_clusters << " outliers=" << cr.assignment.n_outliers()
        << " eps=" << csv::format_double(cr.eps) << "\n";
    return kOk;
}

int cmd_rss(const Common& c, const std::string& data, const std::string& encoder, const std::string& assignment,
            std::ostream& out) {
    const auto cfg = load(c);
    const auto dir = out_dir(c, cfg);
    const Dataset ds = load_dataset(data, dir);
    const DenseNet enc = load_encoder(or_default(encoder, dir / "fda_encoder.json"));
    const auto apath = or_default(assignment, dir / "assignment.csv");
    if (!fs::exists(apath)) throw InputError("assignment not found: " + apath.string());
    ClusterAssignment a = read_assignment_csv(apath);
    if (a.size() != ds.target.size())
        throw InputError(apath.string() + ": " + std::to_string(a.size()) + " labels for " +
                         std::to_string(ds.target.size()) + " target samples");
    const auto tgt = ds.target_view();
    attach_centroids(a, embed_normalized(enc, tgt.features));
    if (cfg.label_noise > 0.0) a = corrupt_labels(a, cfg.label_noise, stream_seed(cfg.seed, "label-noise", 0));
    RssRoundResult rr;
    try {
        rr = run_rss_round(enc, tgt.features, a, cfg.rss_config(0));
    } catch (const StageError&) {
        throw;
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError("rss", e.what());
    }
    rr.verdict.write_csv(dir / "reliable.csv");
    write_trace(dir / "rss_trace.csv", rr.trace);
    record_stage(c, cfg, dir, "rss", {"reliable.csv", "rss_trace.csv"});
    out << "reliable=" << rr.verdict.reliable.size() << " rejected=" << rr.verdict.rejected.size()
        << " outliers=" << a.n_outliers() << " ties=" << rr.verdict.ties << "\n";
    return kOk;
}

int cmd_train(const Common& c, const std::string& data, const std::string& encoder, std::ostream& out) {
    const auto cfg = load(c);
    const auto dir = out_dir(c, cfg);
    const Dataset ds = load_dataset(data, dir);
    const DenseNet enc = load_encoder(or_default(encoder, dir / "fda_encoder.json"));
    const MainStageResult ms = run_main_stage(enc, ds, cfg);
    save_net(ms.encoder, dir / "main_encoder.json");
    write_embeddings(dir / "main_embeddings.csv", embed_normalized(ms.encoder, ds.target_view().features));
    write_meta(dir / "meta.csv", ds);
    std::vector<std::string> artifacts{"main_encoder.json", "main_embeddings.csv", "meta.csv"};
    for (const Trace* t : {&ms.main_trace, &ms.partition_trace, &ms.rss_trace}) {
        write_trace(dir / (t->name + ".csv"), *t);
        artifacts.push_back(t->name + ".csv");
    }
    record_stage(c, cfg, dir, "train", artifacts);
    out << "epochs=" << cfg.main_epochs << " rounds=" << ms.audits.size() << "\n";
    out << "wrote " << dir.string() << "\n";
    return kOk;
}

int cmd_pipeline(const Common& c, std::ostream& out) {
    const auto cfg = load(c);
    const auto dir = out_dir(c, cfg);
    const PipelineResult r = run_pipeline(cfg);
    write_report(r.report, dir);
    save_net(r.final_encoder, dir / "encoder.json");
    write_embeddings(dir / "embeddings.csv", embed_normalized(r.final_encoder, r.dataset.target_view().features));
    write_meta(dir / "meta.csv", r.dataset);
    std::vector<std::string> artifacts{"report.json", "f_trace.csv", "encoder.json", "embeddings.csv", "meta.csv"};
    for (const auto& t : r.report.traces) artifacts.push_back(t.name + ".csv");
    record_stage(c, cfg, dir, "pipeline", artifacts);
    for (const auto& s : r.report.stages)
        out << s.stage << ": rank1=" << fmt5(s.cmc.empty() ? 0.0 : s.cmc[0]) << " mAP=" << fmt5(s.map) << "\n";
    for (const auto& f : r.report.f_trace) out << "F[" << f.stage << "]=" << fmt5(f.f) << "\n";
    out << "wrote " << dir.string() << "\n";
    return kOk;
}

int cmd_eval(const std::string& emb_path, const std::string& meta_path, const std::string& labels_path,
             std::size_t max_rank, std::ostream& out) {
    const auto emb = read_embeddings(emb_path);
    const auto meta = read_meta(meta_path);
    std::map<long long, std::size_t> row_of;
    for (std::size_t r = 0; r < emb.index.size(); ++r)
        if (!row_of.emplace(emb.index[r], r).second)
            throw InputError(emb_path, r + 2, "duplicate index " + std::to_string(emb.index[r]));

    std::vector<std::size_t> qrows, grows;
    RetrievalSet query, gallery;
    for (std::size_t m = 0; m < meta.size(); ++m) {
        const auto& row = meta[m];
        if (row.role == "train") continue;
        const auto it = row_of.find(row.index);
        if (it == row_of.end())
            throw InputError(meta_path, m + 2, "no embedding for index " + std::to_string(row.index));
        if (row.true_id == kUnknownId) throw InputError(meta_path, m + 2, "query/gallery row without true_id");
        RetrievalSet& s = row.role == "query" ? query : gallery;
        (row.role == "query" ? qrows : grows).push_back(it->second);
        s.ids.push_back(row.true_id);
        s.cameras.push_back(row.camera);
    }
    if (grows.empty()) throw InputError(meta_path + ": empty gallery");
    if (qrows.empty()) throw InputError(meta_path + ": empty query set");
    query.features = emb.values.gather_rows(qrows);
    gallery.features = emb.values.gather_rows(grows);

    const auto r = cmc_map(query, gallery, max_rank);
    out << "queries=" << r.evaluated_queries << " skipped=" << r.skipped_queries << "\n";
    for (std::size_t k : {1, 5, 10}) {
        const double v = r.cmc.empty() ? 0.0 : r.cmc[std::min(k, r.cmc.size()) - 1];
        out << "CMC@" << k << "=" << fmt5(v) << "\n";
    }
    out << "mAP=" << fmt5(r.map) << "\n";

    if (!labels_path.empty()) {
        const auto a = read_assignment_csv(labels_path);
        std::vector<int> pred, truth;
        for (std::size_t m = 0; m < meta.size(); ++m) {
            if (meta[m].true_id == kUnknownId) continue;
            if (meta[m].index < 0 || static_cast<std::size_t>(meta[m].index) >= a.size())
                throw InputError(labels_path + ": no label for index " + std::to_string(meta[m].index));
            pred.push_back(a.labels[static_cast<std::size_t>(meta[m].index)]);
            truth.push_back(meta[m].true_id);
        }
        const auto f = pairwise_f_value(pred, truth);
        out << "precision=" << fmt5(f.precision) << " recall=" << fmt5(f.recall) << " F=" << fmt5(f.f) << "\n";
    }
    return kOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Anti-noise cross-domain pseudo-labeling lab", "anl"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolVersion);

    Common c;
    std::string data, encoder, assignment, embeddings, meta, labels;
    bool direct = false;
    std::size_t max_rank = 0;

    auto* gen = app.add_subcommand("generate", "write a synthetic dataset");
    add_common(gen, c);
    auto* fda = app.add_subcommand("fda", "train the encoder with feature distribution alignment");
    add_common(fda, c);
    fda->add_option("--data", data, "dataset directory (default: run directory)");
    fda->add_flag("--direct", direct, "source supervision only");
    auto* clu = app.add_subcommand("cluster", "cluster target embeddings");
    add_common(clu, c);
    clu->add_option("--embeddings", embeddings, "embeddings CSV (default: <out>/fda_embeddings.csv)");
    auto* rss = app.add_subcommand("rss", "one reliable-sample-selection round");
    add_common(rss, c);
    rss->add_option("--data", data, "dataset directory (default: run directory)");
    rss->add_option("--encoder", encoder, "encoder checkpoint (default: <out>/fda_encoder.json)");
    rss->add_option("--assignment", assignment, "cluster assignment CSV (default: <out>/assignment.csv)");
    auto* train = app.add_subcommand("train", "main-model training from an encoder checkpoint");
    add_common(train, c);
    train->add_option("--data", data, "dataset directory (default: run directory)");
    train->add_option("--encoder", encoder, "encoder checkpoint (default: <out>/fda_encoder.json)");
    auto* ev = app.add_subcommand("eval", "CMC/mAP of an embeddings file");
    ev->add_option("--embeddings", embeddings, "embeddings CSV")->required();
    ev->add_option("--meta", meta, "meta CSV (index,role,camera,true_id)")->required();
    ev->add_option("--f-value", labels, "cluster labels CSV for pairwise precision/recall/F");
    ev->add_option("--max-rank", max_rank, "CMC length (0: full gallery)");
    auto* pipe = app.add_subcommand("pipeline", "end-to-end run");
    add_common(pipe, c);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kUsageError;
    }

    try {
        if (*gen) return cmd_generate(c, out);
        if (*fda) return cmd_fda(c, data, direct, out);
        if (*clu) return cmd_cluster(c, embeddings, out);
        if (*rss) return cmd_rss(c, data, encoder, assignment, out);
        if (*train) return cmd_train(c, data, encoder, out);
        if (*ev) return cmd_eval(embeddings, meta, labels, max_rank, out);
        if (*pipe) return cmd_pipeline(c, out);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kUsageError;
    } catch (const InputError& e) {
        err << "input error: " << e.what() << "\n";
        return kUsageError;
    } catch (const StageError& e) {
        err << "error: " << e.what() << "\n";
        return kRuntimeFailure;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kRuntimeFailure;
    }
    return kUsageError;
}

}  // namespace anl::cli
