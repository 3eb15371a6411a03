#include "anl/synth_world.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "anl/csv.hpp"
#include "anl/errors.hpp"
#include "anl/log.hpp"
#include "anl/rng.hpp"

namespace anl {

std::string to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

void WorldConfig::validate() const {
    if (n_identities < 1) throw ConfigError("n_identities", "must be >= 1");
    if (n_cameras < 1) throw ConfigError("n_cameras", "must be >= 1");
    if (samples_per_identity < 1) throw ConfigError("samples_per_identity", "must be >= 1");
    if (raw_dim < 1) throw ConfigError("raw_dim", "must be >= 1");
    if (cameras_per_identity < 1) throw ConfigError("cameras_per_identity", "must be >= 1");
    if (cameras_per_identity > n_cameras)
        throw ConfigError("cameras_per_identity", "exceeds n_cameras (" + std::to_string(n_cameras) + ")");
    if (camera_scale < 0.0) throw ConfigError("camera_scale", "must be >= 0");
    if (domain_shift < 0.0) throw ConfigError("domain_shift", "must be >= 0");
    if (noise_sigma < 0.0) throw ConfigError("noise_sigma", "must be >= 0");
    if (variant_sigma < 0.0) throw ConfigError("variant_sigma", "must be >= 0");
    if (query_fraction < 0.0 || query_fraction > 1.0) throw ConfigError("query_fraction", "must be in [0,1]");
}

namespace {

// Gram-Schmidt on a Gaussian matrix gives a random orthogonal map.
Mat64 random_orthogonal(std::size_t d, Rng& rng) {
    Mat64 q(d, d);
    for (std::size_t i = 0; i < d; ++i) {
        std::vector<double> v(d);
        double n = 0.0;
        while (n < 1e-6) {
            for (double& x : v) x = rng.normal();
            for (std::size_t j = 0; j < i; ++j) {
                const double p = dot(v, q.row(j));
                for (std::size_t k = 0; k < d; ++k) v[k] -= p * q(j, k);
            }
            n = norm2(v);
        }
        for (std::size_t k = 0; k < d; ++k) q(i, k) = v[k] / n;
    }
    return q;
}

struct CameraEffect {
    Mat64 map;  // (1 - s) I + s Q
    Vec64 bias;
};

CameraEffect make_camera(std::size_t d, double scale, Rng& rng) {
    CameraEffect cam{Mat64::identity(d), Vec64(d)};
    const Mat64 q = random_orthogonal(d, rng);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) cam.map(i, j) = (i == j ? 1.0 - scale : 0.0) + scale * q(i, j);
    for (std::size_t i = 0; i < d; ++i) cam.bias[i] = scale * rng.normal();
    return cam;
}

void generate_domain(const WorldConfig& cfg, Domain domain, std::size_t first_index,
                     std::vector<Sample>& out) {
    const auto d = static_cast<std::size_t>(cfg.raw_dim);
    const std::string tag = to_string(domain);

    std::vector<CameraEffect> cams;
    for (int c = 0; c < cfg.n_cameras; ++c) {
        Rng rng(cfg.seed, "camera/" + tag, static_cast<std::uint64_t>(c));
        cams.push_back(make_camera(d, cfg.camera_scale, rng));
    }

    Vec64 offset(d);
    if (domain == Domain::target && cfg.domain_shift > 0.0) {
        Rng rng(cfg.seed, "domain-offset");
        std::vector<double> u(d);
        for (double& x : u) x = rng.normal();
        const double n = norm2(u);
        for (std::size_t k = 0; k < d; ++k) offset[k] = cfg.domain_shift * u[k] / n;
    }

    std::size_t index = first_index;
    for (int id = 0; id < cfg.n_identities; ++id) {
        Rng rng(cfg.seed, "identity/" + tag, static_cast<std::uint64_t>(id));
        std::vector<double> latent(d);
        for (double& x : latent) x = rng.normal();

        std::vector<int> cam_ids(static_cast<std::size_t>(cfg.n_cameras));
        for (int c = 0; c < cfg.n_cameras; ++c) cam_ids[static_cast<std::size_t>(c)] = c;
        rng.shuffle(cam_ids);
        cam_ids.resize(static_cast<std::size_t>(cfg.cameras_per_identity));
        std::sort(cam_ids.begin(), cam_ids.end());

        for (int s = 0; s < cfg.samples_per_identity; ++s) {
            const int cam = cam_ids[static_cast<std::size_t>(s) % cam_ids.size()];
            const auto& eff = cams[static_cast<std::size_t>(cam)];
            std::vector<double> raw(d);
            for (std::size_t i = 0; i < d; ++i) {
                double v = eff.bias[i] + offset[i];
                for (std::size_t j = 0; j < d; ++j) v += eff.map(i, j) * latent[j];
                raw[i] = v + cfg.noise_sigma * rng.normal();
            }
            out.push_back({Vec64(std::move(raw)), cam, domain, id, index++});
        }
    }
}

}  // namespace

Dataset generate_world(const WorldConfig& cfg) {
    cfg.validate();
    Dataset ds;
    ds.raw_dim = cfg.raw_dim;
    generate_domain(cfg, Domain::source, 0, ds.source);
    generate_domain(cfg, Domain::target, ds.source.size(), ds.target);
    return split_query_gallery(std::move(ds), cfg.query_fraction, stream_seed(cfg.seed, "query-split"));
}

Vec64 make_variant(std::span<const double> x, double sigma, std::uint64_t seed) {
    if (sigma < 0.0) throw std::invalid_argument("make_variant: sigma must be >= 0");
    Rng rng(seed, "variant");
    std::vector<double> v(x.begin(), x.end());
    if (sigma == 0.0) return Vec64(std::move(v));
    for (double& e : v) e += sigma * rng.normal();
    return Vec64(std::move(v));
}

Mat64 make_variants(const Mat64& x, double sigma, std::uint64_t seed) {
    Mat64 out = x;
    if (sigma == 0.0) return out;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        Rng rng(seed, "variant-row", i);
        for (double& e : out.row(i)) e += sigma * rng.normal();
    }
    return out;
}

Dataset split_query_gallery(Dataset ds, double fraction, std::uint64_t seed) {
    if (fraction < 0.0 || fraction > 1.0) throw std::invalid_argument("split_query_gallery: fraction not in [0,1]");
    ds.query.clear();
    ds.gallery.clear();
    // identity -> camera -> positions
    std::map<int, std::map<int, std::vector<std::size_t>>> by_id;
    for (std::size_t p = 0; p < ds.target.size(); ++p)
        by_id[ds.target[p].true_id][ds.target[p].camera].push_back(p);

    std::vector<char> is_query(ds.target.size(), 0);
    for (const auto& [id, cams] : by_id) {
        if (id == kUnknownId) continue;
        const auto n_cams = cams.size();
        auto n_query = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(n_cams)));
        if (n_query == 0) continue;
        if (n_cams < 2) {
            log::warn("identity " + std::to_string(id) + " seen by a single camera; excluded from query");
            continue;
        }
        n_query = std::min(n_query, n_cams - 1);
        Rng rng(seed, "identity", static_cast<std::uint64_t>(id));
        std::vector<int> cam_list;
        for (const auto& kv : cams) cam_list.push_back(kv.first);
        rng.shuffle(cam_list);
        for (std::size_t q = 0; q < n_query; ++q) {
            const auto& members = cams.at(cam_list[q]);
            is_query[members[static_cast<std::size_t>(rng.below(members.size()))]] = 1;
        }
    }
    for (std::size_t p = 0; p < ds.target.size(); ++p) (is_query[p] ? ds.query : ds.gallery).push_back(p);
    return ds;
}

SourceView Dataset::source_view() const {
    SourceView v;
    v.features = Mat64(source.size(), static_cast<std::size_t>(raw_dim));
    std::map<int, int> remap;
    for (const auto& s : source)
        if (s.true_id == kUnknownId) throw std::invalid_argument("source sample without label");
        else remap.emplace(s.true_id, 0);
    int next = 0;
    for (auto& kv : remap) kv.second = next++;
    for (std::size_t i = 0; i < source.size(); ++i) {
        std::copy(source[i].raw.begin(), source[i].raw.end(), v.features.row(i).begin());
        v.labels.push_back(remap.at(source[i].true_id));
        v.cameras.push_back(source[i].camera);
    }
    v.n_classes = next;
    return v;
}

TargetView Dataset::target_view() const {
    TargetView v;
    v.features = Mat64(target.size(), static_cast<std::size_t>(raw_dim));
    for (std::size_t i = 0; i < target.size(); ++i) {
        std::copy(target[i].raw.begin(), target[i].raw.end(), v.features.row(i).begin());
        v.cameras.push_back(target[i].camera);
    }
    return v;
}

std::vector<int> Dataset::target_truth() const {
    std::vector<int> t;
    t.reserve(target.size());
    for (const auto& s : target) t.push_back(s.true_id);
    return t;
}

void write_dataset_csv(const Dataset& ds, const std::filesystem::path& path) {
    std::vector<std::string> header{"index", "domain", "camera"};
    for (int k = 0; k < ds.raw_dim; ++k) header.push_back("f" + std::to_string(k));
    header.push_back("true_id");
    std::vector<std::vector<std::string>> rows;
    for (const auto* part : {&ds.source, &ds.target})
        for (const auto& s : *part) {
            std::vector<std::string> r{std::to_string(s.index), to_string(s.domain), std::to_string(s.camera)};
            for (double v : s.raw) r.push_back(csv::format_double(v));
            r.push_back(s.true_id == kUnknownId ? "" : std::to_string(s.true_id));
            rows.push_back(std::move(r));
        }
    csv::write(path, header, rows);
}

Dataset read_dataset_csv(const std::filesystem::path& path) {
    const auto table = csv::read(path);
    const auto& h = table.header;
    if (h.size() < 5 || h[0] != "index" || h[1] != "domain" || h[2] != "camera" || h.back() != "true_id")
        throw InputError(path.string(), 1, "expected header index,domain,camera,f0..,true_id");
    Dataset ds;
    ds.raw_dim = static_cast<int>(h.size() - 4);
    const std::string p = path.string();
    std::set<std::size_t> seen;
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& row = table.rows[r];
        const auto line = table.line_numbers[r];
        Sample s;
        const auto idx = csv::parse_int(row[0], p, line);
        if (idx < 0 || !seen.insert(static_cast<std::size_t>(idx)).second)
            throw InputError(p, line, "index must be unique and non-negative");
        s.index = static_cast<std::size_t>(idx);
        if (row[1] == "source") s.domain = Domain::source;
        else if (row[1] == "target") s.domain = Domain::target;
        else throw InputError(p, line, "domain must be source|target");
        s.camera = static_cast<int>(csv::parse_int(row[2], p, line));
        std::vector<double> raw;
        for (std::size_t k = 3; k + 1 < row.size(); ++k) raw.push_back(csv::parse_double(row[k], p, line));
        s.raw = Vec64(std::move(raw));
        s.true_id = row.back().empty() ? kUnknownId : static_cast<int>(csv::parse_int(row.back(), p, line));
        (s.domain == Domain::source ? ds.source : ds.target).push_back(std::move(s));
    }
    return ds;
}

void export_dataset(const Dataset& ds, const WorldConfig& cfg, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_dataset_csv(ds, dir / "dataset.csv");
    nlohmann::ordered_json m;
    m["format"] = "anl-dataset";
    m["version"] = 1;
    m["raw_dim"] = ds.raw_dim;
    m["n_source"] = ds.source.size();
    m["n_target"] = ds.target.size();
    m["world"] = {{"n_identities", cfg.n_identities},
                  {"n_cameras", cfg.n_cameras},
                  {"samples_per_identity", cfg.samples_per_identity},
                  {"raw_dim", cfg.raw_dim},
                  {"camera_scale", cfg.camera_scale},
                  {"domain_shift", cfg.domain_shift},
                  {"noise_sigma", cfg.noise_sigma},
                  {"cameras_per_identity", cfg.cameras_per_identity},
                  {"variant_sigma", cfg.variant_sigma},
                  {"query_fraction", cfg.query_fraction},
                  {"seed", cfg.seed}};
    m["query"] = ds.query;
    m["gallery"] = ds.gallery;
    std::ofstream out(dir / "manifest.json", std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
    out << m.dump(2) << '\n';
}

Dataset import_dataset(const std::filesystem::path& dir) {
    Dataset ds = read_dataset_csv(dir / "dataset.csv");
    const auto mpath = dir / "manifest.json";
    std::ifstream in(mpath);
    if (!in) throw InputError("cannot read " + mpath.string());
    nlohmann::json m;
    try {
        in >> m;
    } catch (const nlohmann::json::exception& e) {
        throw InputError(mpath.string() + ": " + e.what());
    }
    if (m.value("format", "") != "anl-dataset") throw InputError(mpath.string() + ": not an anl-dataset manifest");
    ds.query = m.at("query").get<std::vector<std::size_t>>();
    ds.gallery = m.at("gallery").get<std::vector<std::size_t>>();
    for (auto p : ds.query)
        if (p >= ds.target.size()) throw InputError(mpath.string() + ": query position out of range");
    for (auto p : ds.gallery)
        if (p >= ds.target.size()) throw InputError(mpath.string() + ": gallery position out of range");
    return ds;
}

}  // namespace anl
