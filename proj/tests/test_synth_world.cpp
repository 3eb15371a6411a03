#include <doctest.h>

#include <cmath>
#include <set>

#include "anl/errors.hpp"
#include "anl/synth_world.hpp"
#include "support.hpp"

using namespace anl;

template <typename T>
concept carries_identity = requires(T v) { v.true_id; } || requires(T v) { v.labels; } || requires(T v) { v.ids; };
static_assert(!carries_identity<TargetView>, "training view must not carry identities");
static_assert(carries_identity<SourceView>);

namespace {

struct WithinBetween {
    double within = 0.0;
    double between = 0.0;
};

WithinBetween distance_stats(const std::vector<Sample>& s) {
    double w = 0.0, b = 0.0;
    std::size_t nw = 0, nb = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
        for (std::size_t j = i + 1; j < s.size(); ++j) {
            const double d = test::oracle::euclid(s[i].raw.span(), s[j].raw.span());
            if (s[i].true_id == s[j].true_id) {
                w += d;
                ++nw;
            } else {
                b += d;
                ++nb;
            }
        }
    return {w / static_cast<double>(nw), b / static_cast<double>(nb)};
}

}  // namespace

TEST_CASE("degenerate world collapses each identity") {
    WorldConfig cfg;
    cfg.noise_sigma = 0.0;
    cfg.camera_scale = 0.0;
    cfg.domain_shift = 0.0;
    cfg.n_identities = 5;
    const auto ds = generate_world(cfg);
    for (const auto* dom : {&ds.source, &ds.target})
        for (const auto& a : *dom)
            for (const auto& b : *dom)
                if (a.true_id == b.true_id) CHECK(a.raw == b.raw);
}

TEST_CASE("generation is deterministic per seed") {
    WorldConfig cfg;
    const auto a = generate_world(cfg);
    const auto b = generate_world(cfg);
    REQUIRE(a.target.size() == b.target.size());
    for (std::size_t i = 0; i < a.target.size(); ++i) {
        CHECK(a.target[i].raw == b.target[i].raw);
        CHECK(a.source[i].raw == b.source[i].raw);
    }
    CHECK(a.query == b.query);
    cfg.seed = 8;
    CHECK_FALSE(generate_world(cfg).target[0].raw == a.target[0].raw);
}

TEST_CASE("default world: identities are tighter than the between-identity spread") {
    const auto ds = generate_world(WorldConfig{});
    CHECK(ds.source.size() == 400);
    CHECK(ds.target.size() == 400);
    for (const auto* dom : {&ds.source, &ds.target}) {
        const auto st = distance_stats(*dom);
        CAPTURE(st.within);
        CAPTURE(st.between);
        CHECK(st.within < st.between);
    }
}

TEST_CASE("default world: intra-camera similarity exceeds cross-camera similarity") {
    const auto ds = generate_world(WorldConfig{});
    double intra = 0.0, cross = 0.0;
    std::size_t ni = 0, nc = 0;
    for (std::size_t i = 0; i < ds.target.size(); ++i)
        for (std::size_t j = i + 1; j < ds.target.size(); ++j) {
            if (ds.target[i].true_id != ds.target[j].true_id) continue;
            const double c = test::oracle::cosine(ds.target[i].raw.span(), ds.target[j].raw.span());
            if (ds.target[i].camera == ds.target[j].camera) {
                intra += c;
                ++ni;
            } else {
                cross += c;
                ++nc;
            }
        }
    CHECK(intra / static_cast<double>(ni) > cross / static_cast<double>(nc));
}

TEST_CASE("world structure") {
    WorldConfig cfg;
    cfg.n_cameras = 5;
    cfg.cameras_per_identity = 3;
    const auto ds = generate_world(cfg);
    std::set<std::size_t> indices;
    for (const auto* dom : {&ds.source, &ds.target})
        for (const auto& s : *dom) {
            CHECK(s.camera >= 0);
            CHECK(s.camera < cfg.n_cameras);
            CHECK(s.raw.size() == 32);
            indices.insert(s.index);
        }
    CHECK(indices.size() == ds.source.size() + ds.target.size());
    for (const auto& s : ds.source) CHECK(s.domain == Domain::source);
    for (const auto& s : ds.target) CHECK(s.domain == Domain::target);

    std::set<std::size_t> q(ds.query.begin(), ds.query.end()), g(ds.gallery.begin(), ds.gallery.end());
    CHECK(q.size() + g.size() == ds.target.size());
    for (auto p : q) CHECK(g.count(p) == 0);

    const auto tv = ds.target_view();
    CHECK(tv.features.rows() == ds.target.size());
    CHECK(tv.cameras.size() == ds.target.size());
    const auto sv = ds.source_view();
    CHECK(sv.n_classes == cfg.n_identities);
}

TEST_CASE("camera count validation") {
    WorldConfig cfg;
    cfg.n_cameras = 2;
    cfg.cameras_per_identity = 3;
    CHECK_THROWS_AS(generate_world(cfg), ConfigError);
    try {
        cfg.validate();
    } catch (const ConfigError& e) {
        CHECK(e.field() == "cameras_per_identity");
    }
}

TEST_CASE("make_variant") {
    const Vec64 x{1, 2, 3, 4};
    CHECK(make_variant(x.span(), 0.0, 1) == x);
    CHECK(make_variant(x.span(), 0.3, 5) == make_variant(x.span(), 0.3, 5));
    CHECK_FALSE(make_variant(x.span(), 0.3, 5) == make_variant(x.span(), 0.3, 6));
    CHECK_THROWS(make_variant(x.span(), -1.0, 1));
}

TEST_CASE("variant displacement follows the chi distribution") {
    const int dim = 32, draws = 1000;
    const double sigma = 0.1;
    const Vec64 x(static_cast<std::size_t>(dim), 0.5);
    double s = 0.0;
    for (int t = 0; t < draws; ++t) {
        const auto v = make_variant(x.span(), sigma, static_cast<std::uint64_t>(t));
        s += test::oracle::euclid(v.span(), x.span());
    }
    const double mean = s / draws;
    const double mu = test::oracle::chi_mean(sigma, dim);
    // chi_k variance = k - mean^2 (unit sigma)
    const double sd = sigma * std::sqrt(dim - (mu / sigma) * (mu / sigma));
    CAPTURE(mean);
    CAPTURE(mu);
    CHECK(std::abs(mean - mu) < 4.0 * sd / std::sqrt(draws));
    CHECK(std::abs(mean - sigma * std::sqrt(dim)) < 0.01);
}

TEST_CASE("query split hand cases") {
    WorldConfig cfg;
    cfg.n_identities = 1;
    cfg.n_cameras = 2;
    cfg.cameras_per_identity = 2;
    cfg.samples_per_identity = 2;
    const auto ds = generate_world(cfg);
    REQUIRE(ds.query.size() == 1);
    REQUIRE(ds.gallery.size() == 1);
    CHECK(ds.target[ds.query[0]].camera != ds.target[ds.gallery[0]].camera);

    const auto none = split_query_gallery(ds, 0.0, 1);
    CHECK(none.query.empty());
    CHECK(none.gallery.size() == ds.target.size());
}

TEST_CASE("single-camera identities are excluded from the query with a warning") {
    WorldConfig cfg;
    cfg.n_identities = 3;
    cfg.cameras_per_identity = 1;
    test::WarningCapture w;
    const auto ds = generate_world(cfg);
    CHECK(ds.query.empty());
    CHECK(w.contains("single camera"));
}

TEST_CASE("default world: every query has a cross-camera gallery match") {
    const auto ds = generate_world(WorldConfig{});
    REQUIRE_FALSE(ds.query.empty());
    for (auto q : ds.query) {
        bool found = false;
        for (auto g : ds.gallery)
            found |= ds.target[g].true_id == ds.target[q].true_id && ds.target[g].camera != ds.target[q].camera;
        CHECK(found);
    }
}

TEST_CASE("dataset export round trip") {
    WorldConfig cfg;
    cfg.n_identities = 6;
    const auto ds = generate_world(cfg);
    test::TempDir dir("world");
    export_dataset(ds, cfg, dir.path());
    const auto back = import_dataset(dir.path());
    REQUIRE(back.target.size() == ds.target.size());
    for (std::size_t i = 0; i < ds.target.size(); ++i) {
        CHECK(back.target[i].raw == ds.target[i].raw);
        CHECK(back.target[i].camera == ds.target[i].camera);
        CHECK(back.target[i].true_id == ds.target[i].true_id);
        CHECK(back.target[i].index == ds.target[i].index);
    }
    CHECK(back.query == ds.query);
    CHECK(back.gallery == ds.gallery);

    test::TempDir again("world");
    export_dataset(back, cfg, again.path());
    CHECK(test::slurp(dir / "dataset.csv") == test::slurp(again / "dataset.csv"));
}

TEST_CASE("malformed dataset rows report the line") {
    test::TempDir dir("badcsv");
    test::spit(dir / "d.csv", "index,domain,camera,f0,true_id\n0,source,0,1.5,0\n1,target,0,abc,\n");
    try {
        read_dataset_csv(dir / "d.csv");
        FAIL("expected InputError");
    } catch (const InputError& e) {
        CHECK(std::string(e.what()).find(":3:") != std::string::npos);
    }
}
