#include "oss/search.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>
#include <span>
#include <sstream>

#include "json.hpp"

#include "oss/evaluation.hpp"

namespace oss::search {

using json = nlohmann::ordered_json;

const char* stage_name(Stage s) {
    switch (s) {
    case Stage::Predictor: return "predictor";
    case Stage::Sampler: return "sampler";
    }
    throw LogicError("unknown stage");
}

const char* trial_status_name(TrialStatus s) {
    switch (s) {
    case TrialStatus::Ok: return "ok";
    case TrialStatus::Failed: return "failed";
    case TrialStatus::Pruned: return "pruned";
    }
    throw LogicError("unknown trial status");
}

TrialStatus parse_trial_status(const std::string& name) {
    if (name == "ok") return TrialStatus::Ok;
    if (name == "failed") return TrialStatus::Failed;
    if (name == "pruned") return TrialStatus::Pruned;
    throw ConfigError("unknown trial status '" + name + "'");
}

// ---------------------------------------------------------------------------
// Dimensions and spaces
// ---------------------------------------------------------------------------

int64_t Dimension::cardinality() const {
    switch (kind) {
    case DimKind::Categorical: return static_cast<int64_t>(categories.size());
    case DimKind::IntegerSet: return static_cast<int64_t>(values.size());
    case DimKind::Continuous: return 0;
    }
    throw LogicError("unknown dimension kind");
}

void Dimension::validate() const {
    if (name.empty()) throw ConfigError("search dimension needs a name");
    switch (kind) {
    case DimKind::Categorical:
        if (categories.empty())
            throw ConfigError("categorical dimension '" + name + "' has no options");
        return;
    case DimKind::IntegerSet:
        if (values.empty())
            throw ConfigError("integer-set dimension '" + name + "' has no values");
        return;
    case DimKind::Continuous:
        if (!(lo < hi))
            throw ConfigError("continuous dimension '" + name + "' needs lo < hi");
        return;
    }
    throw LogicError("unknown dimension kind");
}

namespace {

bool in_interval(const Dimension& d, double x) {
    if (d.lo_open ? !(x > d.lo) : !(x >= d.lo)) return false;
    if (d.hi_open ? !(x < d.hi) : !(x <= d.hi)) return false;
    return true;
}

double sample_continuous(const Dimension& d, Rng& rng) {
    for (;;) {
        const double u = rng.uniform01(); // [0, 1)
        // A closed upper endpoint must stay reachable, so sample downward
        // from hi in that case; otherwise upward from lo.
        const double x = (!d.hi_open && d.lo_open) ? d.hi - (d.hi - d.lo) * u
                                                   : d.lo + (d.hi - d.lo) * u;
        if (in_interval(d, x)) return x;
    }
}

} // namespace

void SearchSpace::validate() const {
    if (dims.empty()) throw ConfigError("search space has no dimensions");
    for (const auto& d : dims) d.validate();
    for (size_t i = 0; i < dims.size(); ++i)
        for (size_t j = i + 1; j < dims.size(); ++j)
            if (dims[i].name == dims[j].name)
                throw ConfigError("duplicate search dimension '" + dims[i].name + "'");
}

bool SearchSpace::contains(const ConfigPoint& p) const {
    if (p.coords.size() != dims.size()) return false;
    for (size_t i = 0; i < dims.size(); ++i) {
        const auto& d = dims[i];
        const double c = p.coords[i];
        if (d.kind == DimKind::Continuous) {
            if (!in_interval(d, c)) return false;
        } else {
            const auto idx = static_cast<int64_t>(c);
            if (static_cast<double>(idx) != c || idx < 0 || idx >= d.cardinality()) return false;
        }
    }
    return true;
}

ConfigPoint SearchSpace::sample(Rng& rng) const {
    ConfigPoint p;
    p.coords.reserve(dims.size());
    for (const auto& d : dims) {
        if (d.kind == DimKind::Continuous)
            p.coords.push_back(sample_continuous(d, rng));
        else
            p.coords.push_back(
                static_cast<double>(rng.uniform_int(static_cast<uint64_t>(d.cardinality()))));
    }
    return p;
}

int64_t SearchSpace::encoded_width() const {
    int64_t w = 0;
    for (const auto& d : dims) w += d.kind == DimKind::Continuous ? 1 : d.cardinality();
    return w;
}

std::vector<double> SearchSpace::encode(const ConfigPoint& p) const {
    if (!contains(p)) throw LogicError("cannot encode a point outside its search space");
    std::vector<double> x;
    x.reserve(static_cast<size_t>(encoded_width()));
    for (size_t i = 0; i < dims.size(); ++i) {
        const auto& d = dims[i];
        if (d.kind == DimKind::Continuous) {
            x.push_back((p.coords[i] - d.lo) / (d.hi - d.lo)); // min-max scaled
        } else {
            const auto idx = static_cast<int64_t>(p.coords[i]);
            for (int64_t k = 0; k < d.cardinality(); ++k) x.push_back(k == idx ? 1.0 : 0.0);
        }
    }
    return x;
}

int64_t SearchSpace::dim_index(const std::string& name) const {
    for (size_t i = 0; i < dims.size(); ++i)
        if (dims[i].name == name) return static_cast<int64_t>(i);
    return -1;
}

std::string SearchSpace::point_to_json(const ConfigPoint& p) const {
    if (!contains(p)) throw LogicError("cannot serialize a point outside its search space");
    json j = json::object();
    for (size_t i = 0; i < dims.size(); ++i) {
        const auto& d = dims[i];
        switch (d.kind) {
        case DimKind::Categorical:
            j[d.name] = d.categories[static_cast<size_t>(p.coords[i])];
            break;
        case DimKind::IntegerSet:
            j[d.name] = d.values[static_cast<size_t>(p.coords[i])];
            break;
        case DimKind::Continuous:
            j[d.name] = p.coords[i];
            break;
        }
    }
    return j.dump();
}

ConfigPoint SearchSpace::point_from_json(const std::string& text) const {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ParseError(std::string("bad config record: ") + e.what());
    }
    if (!j.is_object()) throw ParseError("config record must be a JSON object");
    for (const auto& [key, value] : j.items())
        if (dim_index(key) < 0)
            throw ParseError("config record has unknown dimension '" + key + "'");

    ConfigPoint p;
    p.coords.resize(dims.size(), 0.0);
    for (size_t i = 0; i < dims.size(); ++i) {
        const auto& d = dims[i];
        if (!j.contains(d.name))
            throw ParseError("config record is missing dimension '" + d.name + "'");
        try {
            switch (d.kind) {
            case DimKind::Categorical: {
                const auto name = j.at(d.name).get<std::string>();
                auto it = std::find(d.categories.begin(), d.categories.end(), name);
                if (it == d.categories.end())
                    throw ConfigError("unknown option '" + name + "' for dimension '" + d.name +
                                      "'");
                p.coords[i] = static_cast<double>(it - d.categories.begin());
                break;
            }
            case DimKind::IntegerSet: {
                const auto v = j.at(d.name).get<int64_t>();
                auto it = std::find(d.values.begin(), d.values.end(), v);
                if (it == d.values.end())
                    throw ConfigError("value " + std::to_string(v) +
                                      " is not in the domain of dimension '" + d.name + "'");
                p.coords[i] = static_cast<double>(it - d.values.begin());
                break;
            }
            case DimKind::Continuous:
                p.coords[i] = j.at(d.name).get<double>();
                break;
            }
        } catch (const json::exception& e) {
            throw ParseError("bad value for dimension '" + d.name + "': " + e.what());
        }
    }
    if (!contains(p)) throw ConfigError("config record lies outside the search space");
    return p;
}

SearchSpace predictor_space() {
    using predictor::Activation;
    using predictor::Aggregation;
    using predictor::InitScheme;
    using predictor::Message;
    using predictor::Readout;

    SearchSpace s;
    s.stage = Stage::Predictor;
    auto cat = [&](std::string name, std::vector<std::string> options) {
        Dimension d;
        d.name = std::move(name);
        d.kind = DimKind::Categorical;
        d.categories = std::move(options);
        s.dims.push_back(std::move(d));
    };
    auto ints = [&](std::string name, std::vector<int64_t> values) {
        Dimension d;
        d.name = std::move(name);
        d.kind = DimKind::IntegerSet;
        d.values = std::move(values);
        s.dims.push_back(std::move(d));
    };

    ints("layers", {4, 6, 8, 10});
    ints("hidden_dim", {16, 32, 64, 128});
    {
        Dimension d;
        d.name = "dropout";
        d.kind = DimKind::Continuous;
        d.lo = 0.0;
        d.hi = 0.5;
        d.lo_open = true;
        d.hi_open = true;
        s.dims.push_back(std::move(d));
    }
    cat("act", {predictor::activation_name(Activation::Identity),
                predictor::activation_name(Activation::Relu),
                predictor::activation_name(Activation::Tanh)});
    cat("agg", {predictor::aggregation_name(Aggregation::Max),
                predictor::aggregation_name(Aggregation::Mean),
                predictor::aggregation_name(Aggregation::Sum)});
    cat("mess", {predictor::message_name(Message::DRUM), predictor::message_name(Message::NBFNET),
                 predictor::message_name(Message::REDGNN)});
    cat("init", {predictor::init_scheme_name(InitScheme::Binary),
                 predictor::init_scheme_name(InitScheme::Relational)});
    cat("shortcut", {"false", "true"});
    cat("concat", {"false", "true"});
    cat("readout",
        {predictor::readout_name(Readout::Linear), predictor::readout_name(Readout::Dot)});
    return s;
}

SearchSpace sampler_space(const SamplerSpaceOptions& opts) {
    SearchSpace s;
    s.stage = Stage::Sampler;
    auto ratio = [&](std::string name) {
        Dimension d;
        d.name = std::move(name);
        d.kind = DimKind::Continuous;
        d.lo = 0.0;
        d.hi = 1.0;
        d.lo_open = true;  // a zero ratio would sample nothing
        d.hi_open = false; // 1.0 keeps everything
        s.dims.push_back(std::move(d));
    };
    if (opts.per_relation) {
        if (opts.n_relations < 1)
            throw ConfigError("per-relation sampler space needs the relation count");
        for (int32_t r = 0; r < opts.n_relations; ++r)
            ratio("entity_ratio_r" + std::to_string(r));
    } else {
        ratio("entity_ratio");
    }
    ratio("edge_ratio");
    return s;
}

predictor::PredictorConfig decode_predictor(const SearchSpace& space, const ConfigPoint& p) {
    if (space.stage != Stage::Predictor)
        throw ConfigError("decode_predictor needs a predictor-stage space");
    if (!space.contains(p)) throw LogicError("point lies outside the search space");

    predictor::PredictorConfig cfg;
    for (size_t i = 0; i < space.dims.size(); ++i) {
        const auto& d = space.dims[i];
        const double c = p.coords[i];
        auto cat = [&]() -> const std::string& {
            return d.categories[static_cast<size_t>(c)];
        };
        if (d.name == "layers")
            cfg.layers = static_cast<int>(d.values[static_cast<size_t>(c)]);
        else if (d.name == "hidden_dim")
            cfg.hidden_dim = static_cast<int>(d.values[static_cast<size_t>(c)]);
        else if (d.name == "dropout")
            cfg.dropout = c;
        else if (d.name == "act")
            cfg.act = predictor::parse_activation(cat());
        else if (d.name == "agg")
            cfg.agg = predictor::parse_aggregation(cat());
        else if (d.name == "mess")
            cfg.mess = predictor::parse_message(cat());
        else if (d.name == "init")
            cfg.init = predictor::parse_init_scheme(cat());
        else if (d.name == "shortcut")
            cfg.shortcut = cat() == "true";
        else if (d.name == "concat")
            cfg.concat = cat() == "true";
        else if (d.name == "readout")
            cfg.readout = predictor::parse_readout(cat());
        else
            throw ConfigError("unknown predictor dimension '" + d.name + "'");
    }
    cfg.validate();
    return cfg;
}

void apply_sampler_point(const SearchSpace& space, const ConfigPoint& p,
                         sampler::SamplerConfig& cfg) {
    if (space.stage != Stage::Sampler)
        throw ConfigError("apply_sampler_point needs a sampler-stage space");
    if (!space.contains(p)) throw LogicError("point lies outside the search space");

    for (size_t i = 0; i < space.dims.size(); ++i) {
        const auto& name = space.dims[i].name;
        const double v = p.coords[i];
        if (name == "entity_ratio") {
            cfg.entity_ratio_default = v;
            cfg.entity_ratio.clear();
        } else if (name == "edge_ratio") {
            cfg.edge_ratio_default = v;
            cfg.edge_ratio.clear();
        } else if (name.rfind("entity_ratio_r", 0) == 0) {
            cfg.entity_ratio[static_cast<int32_t>(std::stol(name.substr(14)))] = v;
        } else if (name.rfind("edge_ratio_r", 0) == 0) {
            cfg.edge_ratio[static_cast<int32_t>(std::stol(name.substr(12)))] = v;
        } else {
            throw ConfigError("unknown sampler dimension '" + name + "'");
        }
    }
    cfg.validate();
}

// ---------------------------------------------------------------------------
// Random forest
// ---------------------------------------------------------------------------

double RandomForest::predict_tree(const Tree& t, std::span<const double> x) {
    if (t.nodes.empty()) throw LogicError("empty regression tree");
    int32_t at = 0;
    for (;;) {
        const Node& n = t.nodes[static_cast<size_t>(at)];
        if (n.feature < 0) return n.value;
        at = x[static_cast<size_t>(n.feature)] <= n.threshold ? n.left : n.right;
    }
}

void RandomForest::predict(std::span<const double> x, double& mean, double& variance) const {
    if (trees.empty()) throw LogicError("forest has no trees");
    double sum = 0.0, sumsq = 0.0;
    for (const auto& t : trees) {
        const double p = predict_tree(t, x);
        sum += p;
        sumsq += p * p;
    }
    const auto n = static_cast<double>(trees.size());
    mean = sum / n;
    variance = std::max(0.0, sumsq / n - mean * mean);
}

namespace {

/// One CART regression tree over the bootstrap rows in `idx`.
class TreeBuilder {
public:
    TreeBuilder(const std::vector<std::vector<double>>& xs, const std::vector<double>& ys,
                int max_features, int min_leaf, Rng& rng)
        : xs_(xs), ys_(ys), max_features_(max_features), min_leaf_(min_leaf), rng_(rng) {
        n_features_ = static_cast<int>(xs.empty() ? 0 : xs.front().size());
    }

    RandomForest::Tree build(std::vector<int> idx) {
        RandomForest::Tree t;
        grow(t, std::move(idx));
        return t;
    }

private:
    int32_t grow(RandomForest::Tree& t, std::vector<int> idx) {
        const auto node_id = static_cast<int32_t>(t.nodes.size());
        t.nodes.emplace_back();

        double mean = 0.0;
        for (int i : idx) mean += ys_[static_cast<size_t>(i)];
        mean /= static_cast<double>(idx.size());

        bool pure = true;
        for (int i : idx)
            if (ys_[static_cast<size_t>(i)] != ys_[static_cast<size_t>(idx.front())]) {
                pure = false;
                break;
            }

        int best_feature = -1;
        double best_threshold = 0.0, best_sse = std::numeric_limits<double>::infinity();
        if (!pure && static_cast<int>(idx.size()) > min_leaf_) {
            // Random feature subset, order-deterministic for the given rng.
            std::vector<int> features(static_cast<size_t>(n_features_));
            for (int f = 0; f < n_features_; ++f) features[static_cast<size_t>(f)] = f;
            for (int k = 0; k < max_features_ && k < n_features_; ++k) {
                const auto j = static_cast<int>(
                    rng_.uniform_int(static_cast<uint64_t>(n_features_ - k)));
                std::swap(features[static_cast<size_t>(k)], features[static_cast<size_t>(k + j)]);
            }
            const int tried = std::min(max_features_, n_features_);
            for (int k = 0; k < tried; ++k) best_split(idx, features[static_cast<size_t>(k)],
                                                       best_feature, best_threshold, best_sse);
        }

        auto& node = t.nodes[static_cast<size_t>(node_id)];
        if (best_feature < 0) {
            node.value = mean;
            return node_id;
        }
        node.feature = best_feature;
        node.threshold = best_threshold;

        std::vector<int> left, right;
        for (int i : idx)
            (xs_[static_cast<size_t>(i)][static_cast<size_t>(best_feature)] <= best_threshold
                 ? left
                 : right)
                .push_back(i);
        const auto l = grow(t, std::move(left));
        const auto r = grow(t, std::move(right));
        t.nodes[static_cast<size_t>(node_id)].left = l;
        t.nodes[static_cast<size_t>(node_id)].right = r;
        return node_id;
    }

    /// Scans every midpoint between consecutive distinct values of `feature`,
    /// keeping the strictly best (earliest on ties) SSE split.
    void best_split(const std::vector<int>& idx, int feature, int& best_feature,
                    double& best_threshold, double& best_sse) {
        std::vector<std::pair<double, double>> rows; // (x_f, y), sorted by x_f then y
        rows.reserve(idx.size());
        for (int i : idx)
            rows.emplace_back(xs_[static_cast<size_t>(i)][static_cast<size_t>(feature)],
                              ys_[static_cast<size_t>(i)]);
        std::sort(rows.begin(), rows.end());

        const auto n = rows.size();
        std::vector<double> pre_sum(n + 1, 0.0), pre_sq(n + 1, 0.0);
        for (size_t i = 0; i < n; ++i) {
            pre_sum[i + 1] = pre_sum[i] + rows[i].second;
            pre_sq[i + 1] = pre_sq[i] + rows[i].second * rows[i].second;
        }
        auto sse = [&](size_t lo, size_t hi) { // rows [lo, hi)
            const auto cnt = static_cast<double>(hi - lo);
            const double s = pre_sum[hi] - pre_sum[lo];
            return (pre_sq[hi] - pre_sq[lo]) - s * s / cnt;
        };

        for (size_t cut = 1; cut < n; ++cut) {
            if (rows[cut].first == rows[cut - 1].first) continue; // same value: no boundary
            const double total = sse(0, cut) + sse(cut, n);
            if (total < best_sse) {
                best_sse = total;
                best_feature = feature;
                best_threshold = 0.5 * (rows[cut - 1].first + rows[cut].first);
            }
        }
    }

    const std::vector<std::vector<double>>& xs_;
    const std::vector<double>& ys_;
    int max_features_;
    int min_leaf_;
    int n_features_ = 0;
    Rng& rng_;
};

} // namespace

RandomForest rf_surrogate_fit(const std::vector<Trial>& trials, const SearchSpace& space,
                              const RfOptions& opts) {
    space.validate();
    if (opts.n_trees < 1) throw ConfigError("surrogate needs at least one tree");
    if (opts.min_leaf < 1) throw ConfigError("min_leaf must be >= 1");

    int64_t ok = 0;
    for (const auto& t : trials)
        if (t.status == TrialStatus::Ok) ++ok;
    if (ok < 2) throw ConfigError("surrogate fit needs at least 2 successful trials, got " +
                                  std::to_string(ok));

    // Canonical row order makes the fit invariant to trial permutation.
    struct Row {
        std::vector<double> x;
        double y;
        int status;
    };
    std::vector<Row> rows;
    rows.reserve(trials.size());
    RandomForest forest;
    forest.best_ok = -std::numeric_limits<double>::infinity();
    for (const auto& t : trials) {
        rows.push_back({space.encode(t.config), t.measurement, static_cast<int>(t.status)});
        if (t.status == TrialStatus::Ok) forest.best_ok = std::max(forest.best_ok, t.measurement);
    }
    std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
        if (a.x != b.x) return a.x < b.x;
        if (a.y != b.y) return a.y < b.y;
        return a.status < b.status;
    });

    std::vector<std::vector<double>> xs;
    std::vector<double> ys;
    xs.reserve(rows.size());
    ys.reserve(rows.size());
    for (auto& r : rows) {
        xs.push_back(std::move(r.x));
        ys.push_back(r.y);
    }

    const auto n = static_cast<int>(xs.size());
    const auto width = static_cast<int>(space.encoded_width());
    const int max_features = std::max(1, width / 3);

    forest.trees.reserve(static_cast<size_t>(opts.n_trees));
    for (int t = 0; t < opts.n_trees; ++t) {
        Rng rng(Rng::mix(opts.seed, static_cast<uint64_t>(t), 0x7F0265ull));
        std::vector<int> idx(static_cast<size_t>(n));
        for (auto& i : idx) i = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n)));
        TreeBuilder builder(xs, ys, max_features, opts.min_leaf, rng);
        forest.trees.push_back(builder.build(std::move(idx)));
    }
    return forest;
}

namespace {

/// Expected improvement of a Gaussian belief N(mu, sigma^2) over `best`,
/// with exploration margin xi.
double expected_improvement(double mu, double sigma, double best, double xi) {
    const double delta = mu - best - xi;
    if (!(sigma > 0.0)) return delta > 0.0 ? delta : 0.0;
    const double z = delta / sigma;
    const double cdf = 0.5 * std::erfc(-z / std::numbers::sqrt2);
    const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
    return delta * cdf + sigma * pdf;
}

/// Exploration jitter subtracted from the incumbent inside EI. Kept small:
/// measurements live in [0,1] and near-optimum refinements are often ~1e-3,
/// which a larger jitter would suppress entirely (the acquisition would then
/// actively avoid the peak once the incumbent gets close).
constexpr double kEiXi = 1e-4;

} // namespace

ConfigPoint suggest_next(const RandomForest& surrogate, const SearchSpace& space,
                         int n_candidates, Rng& rng) {
    space.validate();
    if (n_candidates < 1) throw ConfigError("need at least one candidate draw");

    ConfigPoint best_point;
    double best_ei = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < n_candidates; ++c) {
        auto point = space.sample(rng);
        double mean = 0.0, var = 0.0;
        surrogate.predict(space.encode(point), mean, var);
        const double ei = expected_improvement(mean, std::sqrt(var), surrogate.best_ok, kEiXi);
        if (ei > best_ei) { // strict: ties keep the earliest draw
            best_ei = ei;
            best_point = std::move(point);
        }
    }
    return best_point;
}

// ---------------------------------------------------------------------------
// BO driver
// ---------------------------------------------------------------------------

namespace {

void write_audit_line(std::ostream& out, const SearchSpace& space, const std::string& label,
                      int64_t index, const Trial& t) {
    json line;
    line["stage"] = label;
    line["trial"] = index;
    line["config"] = json::parse(space.point_to_json(t.config));
    line["measurement"] = t.measurement;
    line["cost_seconds"] = t.cost_seconds;
    line["status"] = trial_status_name(t.status);
    out << line.dump() << "\n" << std::flush;
}

} // namespace

BoResult bo_optimize(const SearchSpace& space,
                     const std::function<double(const ConfigPoint&)>& objective,
                     const BoOptions& opts) {
    space.validate();
    if (opts.budget < 1) throw ConfigError("search budget must be >= 1");
    if (opts.warm_start < 0) throw ConfigError("warm start count must be >= 0");
    if (opts.n_candidates < 1) throw ConfigError("candidate count must be >= 1");
    for (const auto& p : opts.pinned)
        if (!space.contains(p)) throw ConfigError("pinned config lies outside the search space");

    BoResult result;
    result.trials = opts.resume;
    const auto n_pinned = static_cast<int64_t>(opts.pinned.size());

    for (auto i = static_cast<int64_t>(result.trials.size());
         i < static_cast<int64_t>(opts.budget); ++i) {
        // One decorrelated stream per round: a resumed run replays the same
        // trajectory as an uninterrupted one.
        Rng rng(Rng::mix(opts.seed, static_cast<uint64_t>(i), 0xB00F5EEDull));

        ConfigPoint point;
        if (i < n_pinned) {
            point = opts.pinned[static_cast<size_t>(i)];
        } else if (i < n_pinned + opts.warm_start) {
            point = space.sample(rng);
        } else {
            // SMAC-style interleaving: every fourth guided round takes a pure
            // random draw (a one-candidate suggestion) instead of the
            // acquisition argmax. On plateau objectives the forest's variance
            // concentrates at already-known cliffs, so an acquisition-only
            // loop would stop exploring untouched regions.
            const int64_t guided = i - n_pinned - opts.warm_start;
            const int candidates = (guided % 4 == 3) ? 1 : opts.n_candidates;
            try {
                auto surrogate = rf_surrogate_fit(result.trials, space, opts.rf);
                point = suggest_next(surrogate, space, candidates, rng);
            } catch (const ConfigError&) {
                point = space.sample(rng); // too few successes: stay random
            }
        }

        Trial trial;
        trial.config = point;
        const auto started = std::chrono::steady_clock::now();
        try {
            trial.measurement = objective(point);
            trial.status = TrialStatus::Ok;
            if (!(trial.measurement >= 0.0 && trial.measurement <= 1.0))
                throw LogicError("objective measurement " + std::to_string(trial.measurement) +
                                 " lies outside [0,1]");
        } catch (const LogicError&) {
            throw; // contract violations abort the search
        } catch (const std::exception&) {
            trial.status = TrialStatus::Failed;
            trial.measurement = 0.0; // keeps the surrogate aware of bad regions
        }
        trial.cost_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

        if (opts.audit) write_audit_line(*opts.audit, space, opts.stage_label, i, trial);
        result.trials.push_back(std::move(trial));
    }

    for (size_t i = 0; i < result.trials.size(); ++i) {
        const auto& t = result.trials[i];
        if (t.status != TrialStatus::Ok) continue;
        if (result.best_index < 0 || t.measurement > result.best_measurement) {
            result.best_index = static_cast<int64_t>(i);
            result.best_measurement = t.measurement;
        }
    }
    return result;
}

std::vector<Trial> load_audit(std::istream& in, const SearchSpace& space,
                              const std::string& stage_label) {
    std::vector<Trial> trials;
    std::string line;
    int64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError("audit line " + std::to_string(line_no) + ": " + e.what());
        }
        try {
            if (j.at("stage").get<std::string>() != stage_label) continue;
            Trial t;
            t.config = space.point_from_json(j.at("config").dump());
            t.measurement = j.at("measurement").get<double>();
            t.cost_seconds = j.at("cost_seconds").get<double>();
            t.status = parse_trial_status(j.at("status").get<std::string>());
            trials.push_back(std::move(t));
        } catch (const json::exception& e) {
            throw ParseError("audit line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return trials;
}

// ---------------------------------------------------------------------------
// Stage searches
// ---------------------------------------------------------------------------

PredictorSearchResult search_predictor(const kg::KnowledgeGraph& g,
                                       const sampler::SamplerConfig& frozen,
                                       const SearchSpace& space, const StageOptions& opts) {
    if (space.stage != Stage::Predictor)
        throw ConfigError("search_predictor needs a predictor-stage space");
    space.validate();
    frozen.validate();
    if (opts.budget < 1) throw ConfigError("search budget must be >= 1");
    if (opts.trial_epochs < 1) throw ConfigError("trial schedule needs >= 1 epoch");
    opts.train.validate();

    // Resumed trials already consumed the leading seeds; start the counter
    // past them so a resumed trajectory replays an uninterrupted one.
    int64_t trial_counter = static_cast<int64_t>(opts.resume.size());
    auto objective = [&](const ConfigPoint& point) {
        const auto pcfg = decode_predictor(space, point);
        training::TrainConfig tc = opts.train;
        tc.epochs = opts.trial_epochs;
        tc.threads = opts.threads;
        tc.seed = Rng::mix(opts.seed, static_cast<uint64_t>(trial_counter++), 0x7E1A17ull);
        try {
            return training::fit(g, frozen, pcfg, tc).report.best_valid_mrr;
        } catch (const LogicError& e) {
            // Divergence (non-finite loss) is a legitimate failed trial, not
            // a caller bug; re-throw as a generic failure for the BO driver.
            throw std::runtime_error(e.what());
        }
    };

    BoOptions bo;
    bo.budget = opts.budget;
    bo.warm_start = opts.warm_start;
    bo.n_candidates = opts.n_candidates;
    bo.seed = opts.seed;
    bo.audit = opts.audit;
    bo.stage_label = "predictor";
    bo.resume = opts.resume;
    auto run = bo_optimize(space, objective, bo);
    if (run.best_index < 0) throw ConfigError("every predictor trial failed");

    PredictorSearchResult result;
    result.trials = std::move(run.trials);
    result.best_index = run.best_index;
    result.best_measurement = run.best_measurement;
    result.best_config =
        decode_predictor(space, result.trials[static_cast<size_t>(run.best_index)].config);

    // Full-schedule retrain of the incumbent produces the stage checkpoint.
    training::TrainConfig tc = opts.train;
    tc.threads = opts.threads;
    result.checkpoint = training::fit(g, frozen, result.best_config, tc).params;
    return result;
}

SamplerSearchResult search_sampler(const kg::KnowledgeGraph& g,
                                   const sampler::SamplerConfig& base,
                                   const predictor::PredictorParams& frozen,
                                   const SearchSpace& space, const StageOptions& opts) {
    if (space.stage != Stage::Sampler)
        throw ConfigError("search_sampler needs a sampler-stage space");
    space.validate();
    base.validate();
    if (opts.budget < 1) throw ConfigError("search budget must be >= 1");

    // The base config's own ratios are always measured first, so the
    // incumbent can never fall below the frozen stage-1 sampler.
    ConfigPoint base_point;
    base_point.coords.resize(space.dims.size(), 0.0);
    for (size_t i = 0; i < space.dims.size(); ++i) {
        const auto& name = space.dims[i].name;
        if (name == "entity_ratio")
            base_point.coords[i] = base.entity_ratio_default;
        else if (name == "edge_ratio")
            base_point.coords[i] = base.edge_ratio_default;
        else if (name.rfind("entity_ratio_r", 0) == 0)
            base_point.coords[i] = base.entity_ratio_for(static_cast<int32_t>(
                std::stol(name.substr(14))));
        else if (name.rfind("edge_ratio_r", 0) == 0)
            base_point.coords[i] = base.edge_ratio_for(static_cast<int32_t>(
                std::stol(name.substr(12))));
        else
            throw ConfigError("unknown sampler dimension '" + name + "'");
    }

    auto objective = [&](const ConfigPoint& point) {
        sampler::SamplerConfig cfg = base;
        apply_sampler_point(space, point, cfg);
        return evaluation::evaluate(g, kg::Split::Valid, cfg, frozen, opts.threads).mrr;
    };

    BoOptions bo;
    bo.budget = opts.budget;
    bo.warm_start = opts.warm_start;
    bo.n_candidates = opts.n_candidates;
    bo.seed = opts.seed;
    bo.audit = opts.audit;
    bo.stage_label = "sampler";
    bo.pinned.push_back(base_point);
    bo.resume = opts.resume;
    auto run = bo_optimize(space, objective, bo);
    if (run.best_index < 0) throw ConfigError("every sampler trial failed");

    SamplerSearchResult result;
    result.trials = std::move(run.trials);
    result.best_index = run.best_index;
    result.best_measurement = run.best_measurement;
    result.best_config = base;
    apply_sampler_point(space, result.trials[static_cast<size_t>(run.best_index)].config,
                        result.best_config);
    return result;
}

BilevelResult bilevel_search(const kg::KnowledgeGraph& g, const BilevelOptions& opts) {
    if (opts.predictor_stage.budget < 1 || opts.sampler_stage.budget < 1)
        throw ConfigError("both stage budgets must be >= 1");

    BilevelResult result;
    result.stage1 = search_predictor(g, opts.frozen_sampler, predictor_space(),
                                     opts.predictor_stage);

    SamplerSpaceOptions sopts;
    sopts.per_relation = opts.per_relation;
    sopts.n_relations = static_cast<int32_t>(g.n_relations());
    result.stage2 = search_sampler(g, opts.frozen_sampler, result.stage1.checkpoint,
                                   sampler_space(sopts), opts.sampler_stage);

    result.predictor = result.stage1.best_config;
    result.sampler = result.stage2.best_config;
    return result;
}

} // namespace oss::search
