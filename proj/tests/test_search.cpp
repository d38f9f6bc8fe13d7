#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "oss/errors.hpp"
#include "oss/evaluation.hpp"
#include "oss/rng.hpp"
#include "oss/search.hpp"
#include "synthkg.hpp"
#include "testutil.hpp"

using namespace oss;
using namespace oss::search;
using oss::kg::Triple;

namespace {

ConfigPoint pt(std::initializer_list<double> coords) {
    ConfigPoint p;
    p.coords = coords;
    return p;
}

Dimension continuous_dim(std::string name, double lo, double hi, bool lo_open = false,
                         bool hi_open = false) {
    Dimension d;
    d.name = std::move(name);
    d.kind = DimKind::Continuous;
    d.lo = lo;
    d.hi = hi;
    d.lo_open = lo_open;
    d.hi_open = hi_open;
    return d;
}

Dimension int_dim(std::string name, std::vector<int64_t> values) {
    Dimension d;
    d.name = std::move(name);
    d.kind = DimKind::IntegerSet;
    d.values = std::move(values);
    return d;
}

Dimension cat_dim(std::string name, std::vector<std::string> categories) {
    Dimension d;
    d.name = std::move(name);
    d.kind = DimKind::Categorical;
    d.categories = std::move(categories);
    return d;
}

/// One closed unit-interval dimension named "x".
SearchSpace unit_space() {
    SearchSpace s;
    s.stage = Stage::Sampler;
    s.dims.push_back(continuous_dim("x", 0.0, 1.0));
    return s;
}

/// Smooth single-peak objective on [0,1] with its maximum 1.0 at x = 0.7;
/// stays within [0,1] across the whole domain.
double peak_objective(const ConfigPoint& p) {
    const double x = p.coords[0];
    return 1.0 - (x - 0.7) * (x - 0.7);
}

/// Frozen message-passing parameters that score each entity by its count of
/// directed 2-step walks from the query head: two rounds of multiplicative
/// messages with all-ones weights and a sum readout. Lets sampling tests
/// reason about ranks in closed form.
predictor::PredictorParams walk_counter_params(int32_t n_relations) {
    predictor::PredictorConfig cfg;
    cfg.layers = 2;
    cfg.hidden_dim = 4;
    cfg.dropout = 0.0;
    cfg.act = predictor::Activation::Identity;
    cfg.agg = predictor::Aggregation::Sum;
    cfg.mess = predictor::Message::DRUM;
    cfg.init = predictor::InitScheme::Binary;
    cfg.shortcut = false;
    cfg.concat = false;
    cfg.readout = predictor::Readout::Linear;
    auto params = predictor::PredictorParams::init(cfg, n_relations, 1);
    std::fill(params.flat.begin(), params.flat.end(), 1.0);
    return params;
}

/// Two query relations with irreconcilable entity-ratio needs, built from
/// per-query connected components (so each query's scores live entirely in
/// its own component).
///
/// Relation 0 ("deep"): the answer sits two steps behind a 23-node one-step
/// shell, reached through 3 parallel hubs (walk count 3, the top score once
/// scored). It only enters the subgraph when the keep-count reaches 25 nodes
/// of this component, i.e. at a large entity ratio.
///
/// Relation 1 ("shallow"): the answer (walk count 2 through two parallel
/// paths) is the strongest 2-step node of its component, trailed first by a
/// band of harmless pad nodes (walk count 1, strictly lower score) and then
/// by two flood tiers (walk count 3) that outscore the answer as soon as
/// they enter the subgraph. Ratios that keep the answer plus at most the pad
/// band are perfect; larger ratios admit flood nodes one by one, so the
/// objective falls smoothly over a wide ratio range — a slope a surrogate
/// can follow — before flattening out.
///
/// Entity scores under the pull-style power iteration average each node's
/// out-neighbour scores, so a band's placement is set by its out-degree:
/// leaf-like nodes that point straight back at the query head rank top,
/// wide hubs rank low. The deep answer gets one bridge edge from a shell
/// child so its band sits strictly (not by float luck) above the 2-step
/// bulk.
///
/// Self-facts placed in the test split keep each query's head (and, for the
/// inverse direction, the answer itself) out of its own candidate ranking
/// without adding observable edges.
kg::KnowledgeGraph make_ratio_conflict_kg(int copies) {
    std::vector<Triple> train, valid, test;
    int next = 0;
    auto fresh = [&] { return next++; };
    const int deep = 0, shallow = 1, structural = 2;

    for (int c = 0; c < copies; ++c) {
        const int u = fresh();
        const int bridge = fresh(); // first shell child doubles as the bridge
        train.push_back({u, structural, bridge});
        for (int k = 0; k < 29; ++k) train.push_back({u, structural, fresh()}); // leaf shell
        std::vector<int> hubs;
        for (int k = 0; k < 3; ++k) {
            hubs.push_back(fresh());
            train.push_back({u, structural, hubs.back()});
        }
        const int ans = fresh();
        train.push_back({bridge, structural, ans});
        for (int h : hubs) {
            train.push_back({h, structural, ans});
            for (int k = 0; k < 6; ++k) train.push_back({h, structural, fresh()});
        }
        valid.push_back({u, deep, ans});
        test.push_back({u, deep, u});
        test.push_back({ans, deep, ans});
    }
    for (int c = 0; c < copies; ++c) {
        const int u = fresh(), v1 = fresh(), v2 = fresh();
        std::vector<int> pad_hubs, flood_hubs, far_hubs;
        for (int k = 0; k < 5; ++k) pad_hubs.push_back(fresh());
        for (int k = 0; k < 3; ++k) flood_hubs.push_back(fresh());
        const int ans = fresh();
        train.push_back({u, structural, v1});
        train.push_back({u, structural, v2});
        train.push_back({v1, structural, ans});
        train.push_back({v2, structural, ans});
        for (int h : pad_hubs) {
            train.push_back({u, structural, h});
            for (int k = 0; k < 2; ++k) train.push_back({h, structural, fresh()}); // pads
        }
        std::vector<int> flood;
        for (int k = 0; k < 10; ++k) flood.push_back(fresh());
        for (int h : flood_hubs) {
            train.push_back({u, structural, h});
            for (int f : flood) train.push_back({h, structural, f});
        }
        // Second flood tier: wider hubs place these 60 nodes in a lower
        // band, stretching the penalty slope across keep-counts 36..95.
        for (int k = 0; k < 3; ++k) far_hubs.push_back(fresh());
        std::vector<int> far;
        for (int k = 0; k < 60; ++k) far.push_back(fresh());
        for (int h : far_hubs) {
            train.push_back({u, structural, h});
            for (int f : far) train.push_back({h, structural, f});
        }
        valid.push_back({u, shallow, ans});
        test.push_back({u, shallow, u});
        test.push_back({ans, shallow, ans});
    }
    auto g = testutil::make_kg(next, 3, train, valid, test);
    return kg::augment_inverse(g);
}

} // namespace

TEST_CASE("search space: dimension and space validation") {
    SUBCASE("dimension cardinality") {
        CHECK(cat_dim("c", {"a", "b", "c"}).cardinality() == 3);
        CHECK(int_dim("i", {4, 6}).cardinality() == 2);
        CHECK(continuous_dim("x", 0.0, 1.0).cardinality() == 0);
    }
    SUBCASE("dimension rejects degenerate definitions") {
        CHECK_THROWS_AS(cat_dim("", {"a"}).validate(), ConfigError);
        CHECK_THROWS_AS(cat_dim("c", {}).validate(), ConfigError);
        CHECK_THROWS_AS(int_dim("i", {}).validate(), ConfigError);
        CHECK_THROWS_AS(continuous_dim("x", 0.5, 0.5).validate(), ConfigError);
        CHECK_THROWS_AS(continuous_dim("x", 1.0, 0.0).validate(), ConfigError);
        CHECK_NOTHROW(continuous_dim("x", 0.0, 0.5, true, true).validate());
    }
    SUBCASE("space rejects empty and duplicate-name layouts") {
        SearchSpace empty;
        CHECK_THROWS_AS(empty.validate(), ConfigError);

        SearchSpace dup;
        dup.dims.push_back(continuous_dim("x", 0.0, 1.0));
        dup.dims.push_back(int_dim("x", {1, 2}));
        CHECK_THROWS_AS(dup.validate(), ConfigError);
    }
    SUBCASE("dim_index finds dimensions by name") {
        auto space = predictor_space();
        CHECK(space.dim_index("dropout") == 2);
        CHECK(space.dim_index("layers") == 0);
        CHECK(space.dim_index("no_such_dim") == -1);
    }
}

TEST_CASE("search space: membership, sampling, and encoding") {
    SUBCASE("closed and open interval membership") {
        auto closed = unit_space();
        CHECK(closed.contains(pt({0.0})));
        CHECK(closed.contains(pt({1.0})));
        CHECK_FALSE(closed.contains(pt({-0.01})));
        CHECK_FALSE(closed.contains(pt({1.01})));
        CHECK_FALSE(closed.contains(pt({std::nan("")})));
        CHECK_FALSE(closed.contains(pt({0.5, 0.5}))); // wrong arity

        SearchSpace open;
        open.dims.push_back(continuous_dim("d", 0.0, 0.5, true, true));
        CHECK(open.contains(pt({0.25})));
        CHECK_FALSE(open.contains(pt({0.0})));
        CHECK_FALSE(open.contains(pt({0.5})));
    }
    SUBCASE("option membership requires an exact in-range index") {
        SearchSpace s;
        s.dims.push_back(int_dim("i", {4, 6, 8}));
        CHECK(s.contains(pt({0.0})));
        CHECK(s.contains(pt({2.0})));
        CHECK_FALSE(s.contains(pt({1.5})));
        CHECK_FALSE(s.contains(pt({-1.0})));
        CHECK_FALSE(s.contains(pt({3.0})));
    }
    SUBCASE("samples always land inside the space") {
        auto space = predictor_space();
        space.validate();
        Rng rng(99);
        const auto dropout_idx = static_cast<size_t>(space.dim_index("dropout"));
        for (int i = 0; i < 500; ++i) {
            auto p = space.sample(rng);
            REQUIRE(space.contains(p));
            CHECK(p.coords[dropout_idx] > 0.0);
            CHECK(p.coords[dropout_idx] < 0.5);
        }
    }
    SUBCASE("one-hot plus min-max encoding") {
        auto space = predictor_space();
        CHECK(space.encoded_width() == 26);

        // layers=8, hidden=16, dropout=0.25, relu, sum, drum, relational,
        // shortcut=true, concat=false, readout=linear.
        auto p = pt({2, 0, 0.25, 1, 2, 0, 1, 1, 0, 0});
        REQUIRE(space.contains(p));
        const std::vector<double> expected = {
            0, 0, 1, 0,  // layers one-hot
            1, 0, 0, 0,  // hidden_dim one-hot
            0.5,         // dropout min-max scaled over [0, 0.5]
            0, 1, 0,     // act
            0, 0, 1,     // agg
            1, 0, 0,     // mess
            0, 1,        // init
            0, 1,        // shortcut
            1, 0,        // concat
            1, 0,        // readout
        };
        CHECK(space.encode(p) == expected);
        CHECK_THROWS_AS(space.encode(pt({2, 0, 0.75, 1, 2, 0, 1, 1, 0, 0})), LogicError);
    }
}

TEST_CASE("search space: json round-trips are exact and strict") {
    auto space = predictor_space();
    auto p = pt({2, 0, 0.25, 1, 2, 0, 1, 1, 0, 0});

    SUBCASE("serialized fields are human-readable values") {
        auto j = nlohmann::json::parse(space.point_to_json(p));
        CHECK(j.at("layers").get<int64_t>() == 8);
        CHECK(j.at("hidden_dim").get<int64_t>() == 16);
        CHECK(j.at("dropout").get<double>() == 0.25);
        CHECK(j.at("act").get<std::string>() == "relu");
        CHECK(j.at("agg").get<std::string>() == "sum");
        CHECK(j.at("mess").get<std::string>() == "drum");
        CHECK(j.at("init").get<std::string>() == "relational");
        CHECK(j.at("shortcut").get<std::string>() == "true");
        CHECK(j.at("concat").get<std::string>() == "false");
        CHECK(j.at("readout").get<std::string>() == "linear");
    }
    SUBCASE("round-trip reproduces coordinates bit-for-bit") {
        Rng rng(3);
        for (int i = 0; i < 100; ++i) {
            auto q = space.sample(rng);
            auto back = space.point_from_json(space.point_to_json(q));
            CHECK(back.coords == q.coords);
        }
    }
    SUBCASE("unknown or missing keys are rejected") {
        auto j = nlohmann::json::parse(space.point_to_json(p));
        j["extra_knob"] = 1;
        CHECK_THROWS_AS(space.point_from_json(j.dump()), ParseError);

        auto missing = nlohmann::json::parse(space.point_to_json(p));
        missing.erase("dropout");
        CHECK_THROWS_AS(space.point_from_json(missing.dump()), ParseError);
    }
    SUBCASE("out-of-domain values are rejected") {
        auto j = nlohmann::json::parse(space.point_to_json(p));
        j["act"] = "sigmoid";
        CHECK_THROWS_AS(space.point_from_json(j.dump()), ConfigError);

        j = nlohmann::json::parse(space.point_to_json(p));
        j["layers"] = 7; // not one of {4, 6, 8, 10}
        CHECK_THROWS_AS(space.point_from_json(j.dump()), ConfigError);

        j = nlohmann::json::parse(space.point_to_json(p));
        j["dropout"] = 0.9; // outside (0, 0.5)
        CHECK_THROWS_AS(space.point_from_json(j.dump()), ConfigError);
    }
    SUBCASE("malformed documents are parse errors") {
        CHECK_THROWS_AS(space.point_from_json("not json"), ParseError);
        auto j = nlohmann::json::parse(space.point_to_json(p));
        j["dropout"] = "high";
        CHECK_THROWS_AS(space.point_from_json(j.dump()), ParseError);
    }
}

TEST_CASE("predictor space: decoding points into live configs") {
    auto space = predictor_space();

    SUBCASE("known point decodes field by field") {
        auto cfg = decode_predictor(space, pt({2, 0, 0.25, 1, 2, 0, 1, 1, 0, 0}));
        CHECK(cfg.layers == 8);
        CHECK(cfg.hidden_dim == 16);
        CHECK(cfg.dropout == 0.25);
        CHECK(cfg.act == predictor::Activation::Relu);
        CHECK(cfg.agg == predictor::Aggregation::Sum);
        CHECK(cfg.mess == predictor::Message::DRUM);
        CHECK(cfg.init == predictor::InitScheme::Relational);
        CHECK(cfg.shortcut == true);
        CHECK(cfg.concat == false);
        CHECK(cfg.readout == predictor::Readout::Linear);
    }
    SUBCASE("every sampled point decodes to a valid config") {
        Rng rng(17);
        for (int i = 0; i < 200; ++i) {
            auto cfg = decode_predictor(space, space.sample(rng));
            CHECK_NOTHROW(cfg.validate());
            CHECK((cfg.layers == 4 || cfg.layers == 6 || cfg.layers == 8 || cfg.layers == 10));
            CHECK((cfg.hidden_dim == 16 || cfg.hidden_dim == 32 || cfg.hidden_dim == 64 ||
                   cfg.hidden_dim == 128));
            CHECK(cfg.dropout > 0.0);
            CHECK(cfg.dropout < 0.5);
        }
    }
    SUBCASE("a partial space leaves the remaining fields at their defaults") {
        SearchSpace narrow;
        narrow.stage = Stage::Predictor;
        narrow.dims.push_back(int_dim("layers", {2, 4}));
        auto cfg = decode_predictor(narrow, pt({1}));
        CHECK(cfg.layers == 4);
        CHECK(cfg.hidden_dim == predictor::PredictorConfig{}.hidden_dim);
        CHECK(cfg.mess == predictor::PredictorConfig{}.mess);
    }
    SUBCASE("stage and name mismatches are rejected") {
        CHECK_THROWS_AS(decode_predictor(sampler_space(), pt({0.5, 0.5})), ConfigError);

        SearchSpace alien;
        alien.stage = Stage::Predictor;
        alien.dims.push_back(continuous_dim("temperature", 0.0, 1.0));
        CHECK_THROWS_AS(decode_predictor(alien, pt({0.5})), ConfigError);
    }
}

TEST_CASE("sampler space: global and per-relation ratio application") {
    SUBCASE("global space has two half-open ratio dimensions") {
        auto space = sampler_space();
        REQUIRE(space.dims.size() == 2);
        CHECK(space.dims[0].name == "entity_ratio");
        CHECK(space.dims[1].name == "edge_ratio");
        CHECK(space.contains(pt({1.0, 1.0})));
        CHECK_FALSE(space.contains(pt({0.0, 1.0})));
        CHECK_FALSE(space.contains(pt({1.0, 0.0})));
    }
    SUBCASE("global application overwrites defaults and clears overrides") {
        sampler::SamplerConfig cfg;
        cfg.entity_ratio[1] = 0.7;
        cfg.edge_ratio[0] = 0.4;
        apply_sampler_point(sampler_space(), pt({0.3, 0.9}), cfg);
        CHECK(cfg.entity_ratio_default == 0.3);
        CHECK(cfg.edge_ratio_default == 0.9);
        CHECK(cfg.entity_ratio.empty());
        CHECK(cfg.edge_ratio.empty());
    }
    SUBCASE("per-relation space splits the entity ratio only") {
        auto space = sampler_space({.per_relation = true, .n_relations = 3});
        REQUIRE(space.dims.size() == 4);
        CHECK(space.dims[0].name == "entity_ratio_r0");
        CHECK(space.dims[2].name == "entity_ratio_r2");
        CHECK(space.dims[3].name == "edge_ratio");
        CHECK(space.encoded_width() == 4);

        sampler::SamplerConfig cfg;
        cfg.entity_ratio_default = 0.5;
        apply_sampler_point(space, pt({0.2, 0.4, 0.6, 0.8}), cfg);
        CHECK(cfg.entity_ratio_default == 0.5); // untouched: only overrides are set
        CHECK(cfg.entity_ratio.at(0) == 0.2);
        CHECK(cfg.entity_ratio.at(1) == 0.4);
        CHECK(cfg.entity_ratio.at(2) == 0.6);
        CHECK(cfg.edge_ratio_default == 0.8);
        CHECK(cfg.edge_ratio.empty());
    }
    SUBCASE("per-relation edge overrides are also understood") {
        SearchSpace space;
        space.stage = Stage::Sampler;
        space.dims.push_back(continuous_dim("edge_ratio_r1", 0.0, 1.0, true));
        sampler::SamplerConfig cfg;
        apply_sampler_point(space, pt({0.25}), cfg);
        CHECK(cfg.edge_ratio.at(1) == 0.25);
    }
    SUBCASE("misuse is rejected") {
        CHECK_THROWS_AS(sampler_space({.per_relation = true, .n_relations = 0}), ConfigError);
        sampler::SamplerConfig cfg;
        CHECK_THROWS_AS(apply_sampler_point(predictor_space(),
                                            pt({0, 0, 0.1, 0, 0, 0, 0, 0, 0, 0}), cfg),
                        ConfigError);

        SearchSpace alien;
        alien.stage = Stage::Sampler;
        alien.dims.push_back(continuous_dim("momentum", 0.0, 1.0));
        CHECK_THROWS_AS(apply_sampler_point(alien, pt({0.5}), cfg), ConfigError);
    }
}

TEST_CASE("random forest: regression quality and uncertainty") {
    auto space = unit_space();

    SUBCASE("monotone data yields monotone predictions") {
        std::vector<Trial> trials;
        for (int i = 0; i <= 20; ++i) {
            Trial t;
            t.config = pt({i / 20.0});
            t.measurement = i / 20.0;
            trials.push_back(t);
        }
        auto forest = rf_surrogate_fit(trials, space, {.seed = 7});
        CHECK(forest.trees.size() == 100);
        CHECK(forest.best_ok == 1.0);

        double lo_mean = 0, lo_var = 0, hi_mean = 0, hi_var = 0;
        forest.predict(space.encode(pt({0.1})), lo_mean, lo_var);
        forest.predict(space.encode(pt({0.9})), hi_mean, hi_var);
        CHECK(hi_mean > lo_mean + 0.3);
        CHECK(lo_mean < 0.35);
        CHECK(hi_mean > 0.65);
    }
    SUBCASE("identical observations predict exactly, with zero spread") {
        // 0.25 and 0.75 are binary-exact, so every bootstrap average is too.
        std::vector<Trial> trials;
        for (int i = 0; i < 6; ++i) {
            Trial t;
            t.config = pt({0.25});
            t.measurement = 0.75;
            trials.push_back(t);
        }
        auto forest = rf_surrogate_fit(trials, space, {.seed = 1});
        double mean = 0, var = 0;
        forest.predict(space.encode(pt({0.25})), mean, var);
        CHECK(mean == 0.75);
        CHECK(var == 0.0);
    }
    SUBCASE("failed trials count toward the fit but not the incumbent") {
        std::vector<Trial> trials;
        Trial a, b, c;
        a.config = pt({0.2});
        a.measurement = 0.4;
        b.config = pt({0.6});
        b.measurement = 0.5;
        c.config = pt({0.9});
        c.measurement = 0.0;
        c.status = TrialStatus::Failed;
        trials = {a, b, c};
        auto forest = rf_surrogate_fit(trials, space, {.seed = 2});
        CHECK(forest.best_ok == 0.5);
    }
    SUBCASE("fewer than two successful trials cannot seed a surrogate") {
        std::vector<Trial> trials;
        Trial ok;
        ok.config = pt({0.5});
        ok.measurement = 0.5;
        Trial bad = ok;
        bad.status = TrialStatus::Failed;
        CHECK_THROWS_AS(rf_surrogate_fit({}, space, {}), ConfigError);
        CHECK_THROWS_AS(rf_surrogate_fit({ok, bad, bad}, space, {}), ConfigError);
        CHECK_NOTHROW(rf_surrogate_fit({ok, ok}, space, {}));
    }
}

TEST_CASE("random forest: trial order never changes the fit") {
    SearchSpace space;
    space.stage = Stage::Predictor;
    space.dims.push_back(continuous_dim("x", 0.0, 1.0));
    space.dims.push_back(cat_dim("c", {"p", "q", "r"}));

    Rng rng(41);
    std::vector<Trial> trials;
    for (int i = 0; i < 12; ++i) {
        Trial t;
        t.config = space.sample(rng);
        t.measurement = 0.1 + 0.8 * rng.uniform01();
        if (i % 5 == 4) {
            t.status = TrialStatus::Failed;
            t.measurement = 0.0;
        }
        trials.push_back(t);
    }
    auto shuffled = trials;
    std::rotate(shuffled.begin(), shuffled.begin() + 5, shuffled.end());
    std::reverse(shuffled.begin(), shuffled.end());

    RfOptions opts;
    opts.seed = 13;
    auto f1 = rf_surrogate_fit(trials, space, opts);
    auto f2 = rf_surrogate_fit(shuffled, space, opts);
    CHECK(f1.best_ok == f2.best_ok);

    Rng probe_rng(77);
    for (int i = 0; i < 20; ++i) {
        auto x = space.encode(space.sample(probe_rng));
        double m1 = 0, v1 = 0, m2 = 0, v2 = 0;
        f1.predict(x, m1, v1);
        f2.predict(x, m2, v2);
        CHECK(m1 == m2);
        CHECK(v1 == v2);
    }
}

TEST_CASE("suggest_next: expected-improvement candidate selection") {
    auto space = unit_space();
    std::vector<Trial> trials;
    for (double x : {0.1, 0.5, 0.9}) {
        Trial t;
        t.config = pt({x});
        t.measurement = x * 0.8; // increasing: the right edge looks best
        trials.push_back(t);
    }
    auto forest = rf_surrogate_fit(trials, space, {.seed = 3});

    SUBCASE("a single candidate is returned as-is") {
        Rng rng(5);
        Rng replay = rng; // value copy: same stream
        auto suggestion = suggest_next(forest, space, 1, rng);
        auto expected = space.sample(replay);
        CHECK(suggestion.coords == expected.coords);
    }
    SUBCASE("an uninformative surrogate keeps the earliest draw") {
        std::vector<Trial> flat;
        for (double x : {0.2, 0.5, 0.8}) {
            Trial t;
            t.config = pt({x});
            t.measurement = 0.5;
            flat.push_back(t);
        }
        auto flat_forest = rf_surrogate_fit(flat, space, {.seed = 4});
        Rng rng(6);
        Rng replay = rng;
        auto suggestion = suggest_next(flat_forest, space, 16, rng);
        auto first_draw = space.sample(replay);
        CHECK(suggestion.coords == first_draw.coords);
    }
    SUBCASE("suggestions always lie inside the space") {
        Rng rng(8);
        for (int i = 0; i < 50; ++i) CHECK(space.contains(suggest_next(forest, space, 32, rng)));
    }
    SUBCASE("at least one candidate is required") {
        Rng rng(9);
        CHECK_THROWS_AS(suggest_next(forest, space, 0, rng), ConfigError);
    }
}

TEST_CASE("bo: seeded runs are deterministic and resumable") {
    auto space = unit_space();

    SUBCASE("same seed, same trajectory; different seed, different trajectory") {
        BoOptions opts;
        opts.budget = 12;
        opts.warm_start = 4;
        opts.n_candidates = 64;
        opts.seed = 5;
        auto a = bo_optimize(space, peak_objective, opts);
        auto b = bo_optimize(space, peak_objective, opts);
        REQUIRE(a.trials.size() == 12);
        REQUIRE(b.trials.size() == 12);
        for (size_t i = 0; i < a.trials.size(); ++i) {
            CHECK(a.trials[i].config.coords == b.trials[i].config.coords);
            CHECK(a.trials[i].measurement == b.trials[i].measurement);
            CHECK(a.trials[i].status == TrialStatus::Ok);
        }
        CHECK(a.best_index == b.best_index);
        CHECK(a.best_measurement == b.best_measurement);

        opts.seed = 6;
        auto c = bo_optimize(space, peak_objective, opts);
        bool any_differ = false;
        for (size_t i = 0; i < c.trials.size(); ++i)
            any_differ = any_differ || c.trials[i].config.coords != a.trials[i].config.coords;
        CHECK(any_differ);
    }
    SUBCASE("a run resumed from its audit log matches the uninterrupted run") {
        BoOptions full;
        full.budget = 12;
        full.warm_start = 5;
        full.n_candidates = 64;
        full.seed = 21;
        full.stage_label = "demo";
        auto fresh = bo_optimize(space, peak_objective, full);

        std::ostringstream audit;
        BoOptions half = full;
        half.budget = 6;
        half.audit = &audit;
        bo_optimize(space, peak_objective, half);

        std::istringstream replay(audit.str());
        auto loaded = load_audit(replay, space, "demo");
        REQUIRE(loaded.size() == 6);

        BoOptions rest = full;
        rest.resume = loaded;
        auto resumed = bo_optimize(space, peak_objective, rest);
        REQUIRE(resumed.trials.size() == 12);
        for (size_t i = 0; i < 12; ++i) {
            CHECK(resumed.trials[i].config.coords == fresh.trials[i].config.coords);
            CHECK(resumed.trials[i].measurement == fresh.trials[i].measurement);
        }
        CHECK(resumed.best_index == fresh.best_index);
    }
    SUBCASE("audit records one well-formed line per trial") {
        std::ostringstream audit;
        BoOptions opts;
        opts.budget = 7;
        opts.warm_start = 3;
        opts.n_candidates = 32;
        opts.seed = 2;
        opts.stage_label = "demo";
        opts.audit = &audit;
        auto run = bo_optimize(space, peak_objective, opts);

        std::istringstream lines(audit.str());
        std::string line;
        int n = 0;
        while (std::getline(lines, line)) {
            auto j = nlohmann::json::parse(line);
            CHECK(j.at("stage").get<std::string>() == "demo");
            CHECK(j.at("trial").get<int>() == n);
            CHECK(j.at("measurement").get<double>() == run.trials[static_cast<size_t>(n)].measurement);
            CHECK(j.at("cost_seconds").get<double>() >= 0.0);
            CHECK(j.at("status").get<std::string>() == "ok");
            CHECK(j.at("config").contains("x"));
            ++n;
        }
        CHECK(n == 7);

        std::istringstream other(audit.str());
        CHECK(load_audit(other, space, "another_stage").empty());
    }
    SUBCASE("malformed audit lines carry their line number") {
        std::istringstream bad("{\"stage\": \"demo\"}\nnot json\n");
        CHECK_THROWS_WITH_AS(static_cast<void>(load_audit(bad, space, "demo")),
                             doctest::Contains("line 1"), ParseError);
        std::istringstream bad2(R"({"stage":"demo","trial":0,"config":{"x":0.5},)"
                                R"("measurement":0.5,"cost_seconds":0.1,"status":"weird"})");
        CHECK_THROWS_AS(static_cast<void>(load_audit(bad2, space, "demo")), ConfigError);
    }
}

TEST_CASE("bo: failure handling and measurement contracts") {
    auto space = unit_space();

    SUBCASE("a throwing objective records a failed trial and moves on") {
        auto flaky = [](const ConfigPoint& p) {
            if (p.coords[0] < 0.6) throw std::runtime_error("left half unstable");
            return p.coords[0];
        };
        BoOptions opts;
        opts.budget = 12;
        opts.warm_start = 12;
        opts.n_candidates = 16;
        opts.seed = 3;
        auto run = bo_optimize(space, flaky, opts);
        REQUIRE(run.trials.size() == 12);
        int failed = 0;
        for (const auto& t : run.trials) {
            if (t.config.coords[0] < 0.6) {
                CHECK(t.status == TrialStatus::Failed);
                CHECK(t.measurement == 0.0);
                ++failed;
            } else {
                CHECK(t.status == TrialStatus::Ok);
                CHECK(t.measurement == t.config.coords[0]);
            }
        }
        CHECK(failed > 0);
        REQUIRE(run.best_index >= 0);
        CHECK(run.trials[static_cast<size_t>(run.best_index)].config.coords[0] >= 0.6);
    }
    SUBCASE("a universally failing objective yields no incumbent") {
        auto doomed = [](const ConfigPoint&) -> double {
            throw std::runtime_error("never works");
        };
        BoOptions opts;
        opts.budget = 3;
        opts.warm_start = 3;
        auto run = bo_optimize(space, doomed, opts);
        CHECK(run.trials.size() == 3);
        CHECK(run.best_index == -1);
        for (const auto& t : run.trials) CHECK(t.status == TrialStatus::Failed);
    }
    SUBCASE("measurement ties keep the earliest trial") {
        auto constant = [](const ConfigPoint&) { return 0.5; };
        BoOptions opts;
        opts.budget = 5;
        opts.warm_start = 2;
        opts.n_candidates = 8;
        auto run = bo_optimize(space, constant, opts);
        CHECK(run.best_index == 0);
        CHECK(run.best_measurement == 0.5);
    }
    SUBCASE("out-of-range measurements are caller bugs, not failures") {
        BoOptions opts;
        opts.budget = 2;
        opts.warm_start = 2;
        CHECK_THROWS_AS(
            bo_optimize(space, [](const ConfigPoint&) { return 1.5; }, opts), LogicError);
        CHECK_THROWS_AS(
            bo_optimize(space, [](const ConfigPoint&) { return -0.1; }, opts), LogicError);
        CHECK_THROWS_AS(
            bo_optimize(space, [](const ConfigPoint&) { return std::nan(""); }, opts),
            LogicError);
    }
    SUBCASE("option validation") {
        auto one = [](const ConfigPoint&) { return 0.5; };
        BoOptions opts;
        opts.budget = 0;
        CHECK_THROWS_AS(bo_optimize(space, one, opts), ConfigError);
        opts.budget = 2;
        opts.warm_start = -1;
        CHECK_THROWS_AS(bo_optimize(space, one, opts), ConfigError);
        opts.warm_start = 1;
        opts.n_candidates = 0;
        CHECK_THROWS_AS(bo_optimize(space, one, opts), ConfigError);
        opts.n_candidates = 8;
        opts.pinned.push_back(pt({1.5}));
        CHECK_THROWS_AS(bo_optimize(space, one, opts), ConfigError);
    }
    SUBCASE("pinned configs are evaluated first") {
        auto identity = [](const ConfigPoint& p) { return p.coords[0]; };
        BoOptions opts;
        opts.budget = 4;
        opts.warm_start = 1;
        opts.n_candidates = 8;
        opts.pinned = {pt({0.25}), pt({0.75})};
        auto run = bo_optimize(space, identity, opts);
        REQUIRE(run.trials.size() == 4);
        CHECK(run.trials[0].config.coords[0] == 0.25);
        CHECK(run.trials[1].config.coords[0] == 0.75);
    }
}

TEST_CASE("bo: recovers a smooth optimum far more reliably than chance") {
    auto space = unit_space();
    int bo_near = 0, bo_tight = 0, random_tight = 0;
    const int runs = 100;
    for (int seed = 0; seed < runs; ++seed) {
        BoOptions opts;
        opts.budget = 30;
        opts.warm_start = 5;
        opts.n_candidates = 256;
        opts.seed = static_cast<uint64_t>(seed);
        auto run = bo_optimize(space, peak_objective, opts);
        REQUIRE(run.best_index >= 0);
        const double best_x = run.trials[static_cast<size_t>(run.best_index)].config.coords[0];
        if (std::abs(best_x - 0.7) <= 0.05) ++bo_near;
        if (std::abs(best_x - 0.7) <= 0.01) ++bo_tight;

        BoOptions rnd = opts;
        rnd.warm_start = 30; // pure random search at the same budget
        auto base = bo_optimize(space, peak_objective, rnd);
        const double rx = base.trials[static_cast<size_t>(base.best_index)].config.coords[0];
        if (std::abs(rx - 0.7) <= 0.01) ++random_tight;
    }
    MESSAGE("bo within 0.05: " << bo_near << "/100, within 0.01: " << bo_tight
                               << "/100, random within 0.01: " << random_tight << "/100");
    CHECK(bo_near >= 95);
    CHECK(bo_tight > random_tight);
}

TEST_CASE("search_predictor: trial accounting and incumbent retraining") {
    synthkg::RuleKgOptions kopt;
    kopt.tiers = 3;
    kopt.tier_size = 6;
    kopt.out_per_node = 2;
    kopt.seed = 3;
    auto g = synthkg::make_rule_kg(kopt);

    sampler::SamplerConfig frozen;
    frozen.entity_ratio_default = 1.0;
    frozen.edge_ratio_default = 1.0;

    SearchSpace narrow;
    narrow.stage = Stage::Predictor;
    narrow.dims.push_back(int_dim("layers", {2}));
    narrow.dims.push_back(int_dim("hidden_dim", {8}));

    SUBCASE("a warm-start-only budget still tracks the incumbent") {
        StageOptions opts;
        opts.budget = 3;
        opts.warm_start = 3;
        opts.trial_epochs = 1;
        opts.train.epochs = 2;
        opts.train.batch_size = 8;
        opts.seed = 11;
        auto result = search_predictor(g, frozen, narrow, opts);

        REQUIRE(result.trials.size() == 3);
        double best = -1.0;
        int64_t best_at = -1;
        for (size_t i = 0; i < result.trials.size(); ++i) {
            REQUIRE(result.trials[i].status == TrialStatus::Ok);
            if (result.trials[i].measurement > best) {
                best = result.trials[i].measurement;
                best_at = static_cast<int64_t>(i);
            }
        }
        CHECK(result.best_index == best_at);
        CHECK(result.best_measurement == best);
        CHECK(result.best_config.layers == 2);
        CHECK(result.best_config.hidden_dim == 8);
        CHECK(result.checkpoint.cfg.layers == 2);
        CHECK(result.checkpoint.flat.size() > 0);
        for (double w : result.checkpoint.flat) REQUIRE(std::isfinite(w));
    }
    SUBCASE("argument validation") {
        StageOptions opts;
        opts.budget = 0;
        CHECK_THROWS_AS(search_predictor(g, frozen, narrow, opts), ConfigError);
        opts.budget = 2;
        opts.trial_epochs = 0;
        CHECK_THROWS_AS(search_predictor(g, frozen, narrow, opts), ConfigError);
        opts.trial_epochs = 1;
        CHECK_THROWS_AS(search_predictor(g, frozen, sampler_space(), opts), ConfigError);
    }
    SUBCASE("universal divergence is reported, not hidden") {
        StageOptions opts;
        opts.budget = 2;
        opts.warm_start = 2;
        opts.trial_epochs = 3;
        opts.train.epochs = 1;
        opts.train.learning_rate = 1e200; // guaranteed numeric blow-up
        opts.seed = 1;
        CHECK_THROWS_WITH_AS(search_predictor(g, frozen, narrow, opts),
                             "every predictor trial failed", ConfigError);
    }
}

TEST_CASE("search_predictor: picks a depth that can express a long-range rule") {
    // Four-hop composition rule: predictors with fewer than four rounds of
    // message passing cannot even reach the answers, whatever their weights.
    synthkg::RuleKgOptions kopt;
    kopt.tiers = 5;
    kopt.tier_size = 8;
    kopt.out_per_node = 2;
    kopt.train_share = 0.55;
    kopt.seed = 2;
    auto g = synthkg::make_rule_kg(kopt);

    sampler::SamplerConfig frozen;
    frozen.entity_ratio_default = 1.0;
    frozen.edge_ratio_default = 1.0;

    SearchSpace space;
    space.stage = Stage::Predictor;
    space.dims.push_back(int_dim("layers", {2, 4}));
    space.dims.push_back(int_dim("hidden_dim", {16}));

    for (uint64_t seed : {1u, 2u, 3u}) {
        StageOptions opts;
        opts.budget = 8;
        opts.warm_start = 4;
        opts.n_candidates = 64;
        opts.trial_epochs = 6;
        opts.train.epochs = 6;
        opts.train.batch_size = 8;
        opts.train.learning_rate = 1e-2;
        opts.train.split_fraction = 0.8;
        opts.seed = seed;
        auto result = search_predictor(g, frozen, space, opts);

        double best_shallow = 0.0, best_deep = 0.0;
        for (const auto& t : result.trials) {
            const auto cfg = decode_predictor(space, t.config);
            auto& slot = cfg.layers == 2 ? best_shallow : best_deep;
            slot = std::max(slot, t.measurement);
        }
        CAPTURE(seed);
        MESSAGE("depth selection: seed " << seed << " best 2-layer " << best_shallow
                                         << ", best 4-layer " << best_deep);
        CHECK(result.best_config.layers == 4);
        CHECK(best_deep > best_shallow);
    }
}

TEST_CASE("search_sampler: the base config is always the first trial") {
    synthkg::RuleKgOptions kopt;
    kopt.tiers = 3;
    kopt.tier_size = 8;
    kopt.out_per_node = 2;
    kopt.seed = 4;
    auto g = synthkg::make_rule_kg(kopt);

    sampler::SamplerConfig base;
    base.entity_ratio_default = 1.0;
    base.edge_ratio_default = 1.0;

    training::TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 8;
    tc.seed = 5;
    predictor::PredictorConfig pcfg;
    pcfg.layers = 3;
    pcfg.hidden_dim = 16;
    auto fitres = training::fit(g, base, pcfg, tc);
    const auto& params = fitres.params;

    SUBCASE("budget one returns the base config and its exact measurement") {
        StageOptions opts;
        opts.budget = 1;
        opts.warm_start = 0;
        auto result = search_sampler(g, base, params, sampler_space(), opts);
        REQUIRE(result.trials.size() == 1);
        CHECK(result.best_index == 0);
        CHECK(result.trials[0].config.coords == std::vector<double>{1.0, 1.0});
        CHECK(result.best_config.entity_ratio_default == 1.0);
        CHECK(result.best_config.edge_ratio_default == 1.0);
        CHECK(result.best_config.entity_ratio.empty());

        const double direct = evaluation::evaluate(g, kg::Split::Valid, base, params, 1).mrr;
        CHECK(result.best_measurement == direct);
    }
    SUBCASE("the incumbent never falls below the base and tracks a grid sweep") {
        sampler::SamplerConfig tiny = base;
        tiny.entity_ratio_default = 0.1;
        tiny.edge_ratio_default = 0.1;

        const std::vector<double> grid = {0.1, 0.2, 0.5, 1.0};
        auto sweep = evaluation::extrapolation_sweep(g, kg::Split::Valid, tiny, params, grid,
                                                     grid, 1);
        double grid_best = 0.0;
        for (double v : sweep.mrr) grid_best = std::max(grid_best, v);

        StageOptions opts;
        opts.budget = 16;
        opts.warm_start = 6;
        opts.n_candidates = 256;
        opts.seed = 7;
        auto result = search_sampler(g, tiny, params, sampler_space(), opts);

        MESSAGE("sampler search: grid best " << grid_best << ", search best "
                                             << result.best_measurement << ", base "
                                             << result.trials[0].measurement);
        CHECK(result.best_measurement >= result.trials[0].measurement);
        CHECK(result.best_measurement >= 0.95 * grid_best);
    }
    SUBCASE("argument validation") {
        StageOptions opts;
        CHECK_THROWS_AS(search_sampler(g, base, params, predictor_space(), opts), ConfigError);
        opts.budget = 0;
        CHECK_THROWS_AS(search_sampler(g, base, params, sampler_space(), opts), ConfigError);
    }
}

TEST_CASE("search_sampler: per-relation ratios beat every global setting") {
    auto g = make_ratio_conflict_kg(3);
    REQUIRE(g.n_entities() == 444);
    auto params = walk_counter_params(g.n_relations());

    sampler::SamplerConfig base;
    base.entity_ratio_default = 0.5;
    base.edge_ratio_default = 1.0;

    // Closed-form expectations for hand-picked per-relation ratios: the deep
    // relation fully covered, the shallow relation cut inside the pad band,
    // past its answer but before the flood.
    sampler::SamplerConfig ideal = base;
    ideal.entity_ratio[0] = 0.3;
    ideal.entity_ratio[1] = 0.05;
    const double ideal_mrr = evaluation::evaluate(g, kg::Split::Valid, ideal, params, 1).mrr;
    CHECK(ideal_mrr > 0.99);

    // Exhaustive global oracle: every distinct entity keep-count, crossed
    // with a spread of global edge ratios (edge cuts can thin the flood's
    // walk counts, so the grid probes that escape route too).
    double global_best = 0.0;
    const auto n = static_cast<double>(g.n_entities());
    for (int keep = 1; keep <= g.n_entities(); keep += 2) {
        for (double edge : {0.2, 0.4, 0.6, 0.7, 0.8, 0.9, 0.98, 1.0}) {
            sampler::SamplerConfig cfg = base;
            cfg.entity_ratio_default = keep / n;
            cfg.edge_ratio_default = edge;
            global_best = std::max(
                global_best, evaluation::evaluate(g, kg::Split::Valid, cfg, params, 1).mrr);
        }
    }
    MESSAGE("ratio conflict: best global " << global_best << ", ideal per-relation "
                                           << ideal_mrr);
    CHECK(ideal_mrr > global_best + 0.1);

    // The per-relation search must land strictly above the global optimum.
    SearchSpace space;
    space.stage = Stage::Sampler;
    space.dims.push_back(continuous_dim("entity_ratio_r0", 0.0, 1.0, true));
    space.dims.push_back(continuous_dim("entity_ratio_r1", 0.0, 1.0, true));

    StageOptions opts;
    opts.budget = 30;
    opts.warm_start = 6;
    opts.n_candidates = 512;
    opts.seed = 12;
    auto result = search_sampler(g, base, params, space, opts);

    MESSAGE("ratio conflict: search best " << result.best_measurement << " with deep ratio "
                                           << result.best_config.entity_ratio.at(0)
                                           << ", shallow ratio "
                                           << result.best_config.entity_ratio.at(1));
    CHECK(result.best_measurement > global_best + 0.02);
    CHECK(result.best_config.entity_ratio.at(0) > 34.5 / n);
    CHECK(result.best_config.entity_ratio.at(1) < 0.075);
}

TEST_CASE("bilevel: two stages, one artifact, one audit trail") {
    synthkg::RuleKgOptions kopt;
    kopt.tiers = 3;
    kopt.tier_size = 5;
    kopt.out_per_node = 2;
    kopt.seed = 6;
    auto g = synthkg::make_rule_kg(kopt);

    std::ostringstream audit;
    BilevelOptions opts;
    opts.frozen_sampler.entity_ratio_default = 1.0;
    opts.frozen_sampler.edge_ratio_default = 1.0;
    opts.predictor_stage.budget = 3;
    opts.predictor_stage.warm_start = 3;
    opts.predictor_stage.trial_epochs = 1;
    opts.predictor_stage.train.epochs = 2;
    opts.predictor_stage.train.batch_size = 8;
    opts.predictor_stage.seed = 9;
    opts.predictor_stage.audit = &audit;
    opts.sampler_stage.budget = 4;
    opts.sampler_stage.warm_start = 2;
    opts.sampler_stage.n_candidates = 64;
    opts.sampler_stage.seed = 9;
    opts.sampler_stage.audit = &audit;
    auto result = bilevel_search(g, opts);

    CHECK_NOTHROW(result.predictor.validate());
    CHECK_NOTHROW(result.sampler.validate());
    CHECK(result.stage1.trials.size() == 3);
    CHECK(result.stage2.trials.size() == 4);
    CHECK(result.stage1.checkpoint.flat.size() > 0);
    for (double w : result.stage1.checkpoint.flat) REQUIRE(std::isfinite(w));

    // The stage-1 sampler is pinned as stage 2's first trial, so stage 2 can
    // only improve on it.
    CHECK(result.stage2.best_measurement >= result.stage2.trials[0].measurement);
    CHECK(result.predictor.layers == result.stage1.best_config.layers);
    CHECK(result.sampler.entity_ratio_default ==
          result.stage2.best_config.entity_ratio_default);

    // Audit holds both stages, separable by label.
    std::istringstream lines(audit.str());
    std::string line;
    int predictor_lines = 0, sampler_lines = 0;
    while (std::getline(lines, line)) {
        auto j = nlohmann::json::parse(line);
        const auto stage = j.at("stage").get<std::string>();
        if (stage == "predictor") ++predictor_lines;
        if (stage == "sampler") ++sampler_lines;
    }
    CHECK(predictor_lines == 3);
    CHECK(sampler_lines == 4);

    std::istringstream p_in(audit.str());
    auto p_trials = load_audit(p_in, predictor_space(), "predictor");
    REQUIRE(p_trials.size() == 3);
    for (size_t i = 0; i < 3; ++i)
        CHECK(p_trials[i].config.coords == result.stage1.trials[i].config.coords);

    std::istringstream s_in(audit.str());
    auto s_trials = load_audit(s_in, sampler_space(), "sampler");
    REQUIRE(s_trials.size() == 4);
    for (size_t i = 0; i < 4; ++i)
        CHECK(s_trials[i].measurement == result.stage2.trials[i].measurement);

    SUBCASE("stage budgets are validated up front") {
        BilevelOptions bad = opts;
        bad.predictor_stage.budget = 0;
        CHECK_THROWS_AS(bilevel_search(g, bad), ConfigError);
        bad = opts;
        bad.sampler_stage.budget = 0;
        CHECK_THROWS_AS(bilevel_search(g, bad), ConfigError);
    }
}
