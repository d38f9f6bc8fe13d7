#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "oss/errors.hpp"
#include "oss/kg.hpp"
#include "oss/predictor.hpp"
#include "oss/rng.hpp"
#include "oss/sampler.hpp"
#include "oss/training.hpp"

namespace oss::search {

// ---------------------------------------------------------------------------
// Search space
// ---------------------------------------------------------------------------

enum class DimKind { Categorical, IntegerSet, Continuous };
enum class Stage { Predictor, Sampler };

const char* stage_name(Stage s);

/// One coordinate of a configuration space. Categorical dimensions carry
/// named options, integer-set dimensions an explicit value list, continuous
/// dimensions an interval whose endpoints may each be open or closed.
struct Dimension {
    std::string name;
    DimKind kind = DimKind::Categorical;
    std::vector<std::string> categories; // Categorical
    std::vector<int64_t> values;         // IntegerSet
    double lo = 0.0, hi = 1.0;           // Continuous
    bool lo_open = false, hi_open = false;

    int64_t cardinality() const; // option count; 0 for continuous
    void validate() const;
};

/// A point in a SearchSpace: one coordinate per dimension, aligned by index.
/// Categorical / integer-set coordinates store the option index; continuous
/// coordinates store the raw value.
struct ConfigPoint {
    std::vector<double> coords;
};

struct SearchSpace {
    Stage stage = Stage::Predictor;
    std::vector<Dimension> dims;

    void validate() const;
    bool contains(const ConfigPoint& p) const;
    ConfigPoint sample(Rng& rng) const;
    /// Width of the surrogate encoding: one-hot per categorical/integer-set
    /// option plus one min-max-scaled slot per continuous dimension.
    int64_t encoded_width() const;
    std::vector<double> encode(const ConfigPoint& p) const;
    /// Index of a dimension by name; -1 when absent.
    int64_t dim_index(const std::string& name) const;

    /// Human-readable {name: value} JSON for audit logs; inverse of
    /// point_from_json.
    std::string point_to_json(const ConfigPoint& p) const;
    ConfigPoint point_from_json(const std::string& text) const;
};

/// The predictor-stage space: depth, width, dropout, and every layer choice,
/// with exactly the ranges the predictor module documents as searchable.
SearchSpace predictor_space();

struct SamplerSpaceOptions {
    bool per_relation = false;  // one entity-ratio dimension per relation
    int32_t n_relations = 0;    // required when per_relation
};

/// The sampler-stage space: entity/edge keep-ratios in (0, 1]. In
/// per-relation mode the entity ratio splits into one dimension per relation
/// while the edge ratio stays global (keeps the space compact).
SearchSpace sampler_space(const SamplerSpaceOptions& opts = {});

/// Decoders from a point back to live configs.
predictor::PredictorConfig decode_predictor(const SearchSpace& space, const ConfigPoint& p);
/// Overwrites the ratio fields of `cfg` (global defaults and, in
/// per-relation mode, the per-relation entity overrides).
void apply_sampler_point(const SearchSpace& space, const ConfigPoint& p,
                         sampler::SamplerConfig& cfg);

// ---------------------------------------------------------------------------
// Trials and the random-forest surrogate
// ---------------------------------------------------------------------------

enum class TrialStatus { Ok, Failed, Pruned };
const char* trial_status_name(TrialStatus s);
TrialStatus parse_trial_status(const std::string& name);

struct Trial {
    ConfigPoint config;
    double measurement = 0.0; // in [0,1] when status == Ok
    double cost_seconds = 0.0;
    TrialStatus status = TrialStatus::Ok;
};

struct RfOptions {
    int n_trees = 100;
    int min_leaf = 1;      // stop splitting at or below this many rows
    uint64_t seed = 0;     // bootstrap + feature-subset stream
};

/// Regression forest over encoded config vectors. Mean prediction is the
/// average across trees; uncertainty is the population variance across trees.
class RandomForest {
public:
    struct Node {
        int32_t feature = -1; // -1: leaf
        double threshold = 0.0;
        int32_t left = -1, right = -1;
        double value = 0.0;
    };
    struct Tree {
        std::vector<Node> nodes; // node 0 is the root
    };

    std::vector<Tree> trees;
    double best_ok = 0.0; // incumbent measurement observed at fit time

    void predict(std::span<const double> x, double& mean, double& variance) const;

    static double predict_tree(const Tree& t, std::span<const double> x);
};

/// Fits the forest on every trial (failed trials keep their recorded 0
/// measurement, marking bad regions). Trials are canonically ordered before
/// fitting, so permuting the input never changes the forest.
/// Throws ConfigError unless at least two trials have status Ok.
RandomForest rf_surrogate_fit(const std::vector<Trial>& trials, const SearchSpace& space,
                              const RfOptions& opts = {});

/// Draws n_candidates random points and returns the one with the highest
/// expected improvement over the surrogate's incumbent; exact ties keep the
/// earliest draw.
ConfigPoint suggest_next(const RandomForest& surrogate, const SearchSpace& space,
                         int n_candidates, Rng& rng);

// ---------------------------------------------------------------------------
// Bayesian-optimization driver
// ---------------------------------------------------------------------------

struct BoOptions {
    int budget = 30;      // total trials, including pinned + warm start
    int warm_start = 5;   // random trials before the surrogate takes over
    int n_candidates = 512;
    uint64_t seed = 0;
    RfOptions rf;
    /// Evaluated first, in order, before any random trial (counts toward the
    /// budget). Used to guarantee a baseline config is always measured.
    std::vector<ConfigPoint> pinned;
    /// Previously completed trials (e.g. reloaded from an audit log); they
    /// count toward the budget and seed the surrogate. Round i of a resumed
    /// run draws from the same stream as round i of a fresh run, so a resumed
    /// trajectory is identical to an uninterrupted one.
    std::vector<Trial> resume;
    /// JSONL audit sink: one record per completed trial.
    std::ostream* audit = nullptr;
    /// Tag written into each audit record.
    std::string stage_label = "search";
};

struct BoResult {
    std::vector<Trial> trials;  // resumed + new, in execution order
    int64_t best_index = -1;    // earliest argmax over Ok trials; -1 if none
    double best_measurement = 0.0;
};

/// Maximizes `objective` over the space. The objective must return a value in
/// [0,1]; a thrown exception records a Failed trial with measurement 0 and
/// the search continues.
BoResult bo_optimize(const SearchSpace& space,
                     const std::function<double(const ConfigPoint&)>& objective,
                     const BoOptions& opts);

/// Parses trials back out of an audit log (one JSON record per line),
/// matching configs by dimension name. Records from other stages are skipped
/// by label; malformed lines throw ParseError.
std::vector<Trial> load_audit(std::istream& in, const SearchSpace& space,
                              const std::string& stage_label);

// ---------------------------------------------------------------------------
// Stage searches
// ---------------------------------------------------------------------------

struct StageOptions {
    int budget = 20;
    int warm_start = 5;
    int n_candidates = 512;
    int trial_epochs = 3; // short schedule used inside predictor trials
    training::TrainConfig train;
    uint64_t seed = 0;
    int threads = 1;
    std::ostream* audit = nullptr;
    /// Trials replayed from a previous audit log (see load_audit). They count
    /// against the budget, so resuming a finished run performs no new work.
    std::vector<Trial> resume;
};

struct PredictorSearchResult {
    predictor::PredictorConfig best_config;
    predictor::PredictorParams checkpoint; // retrained at the full schedule
    std::vector<Trial> trials;
    int64_t best_index = -1;
    double best_measurement = 0.0;
};

/// Stage 1: search predictor hyperparameters with a frozen sampler. Each
/// trial trains at the short schedule and scores validation MRR; failures
/// (non-finite loss) score 0. The incumbent is retrained at the full
/// schedule to produce the returned checkpoint.
PredictorSearchResult search_predictor(const kg::KnowledgeGraph& g,
                                       const sampler::SamplerConfig& frozen,
                                       const SearchSpace& space, const StageOptions& opts);

struct SamplerSearchResult {
    sampler::SamplerConfig best_config;
    std::vector<Trial> trials;
    int64_t best_index = -1;
    double best_measurement = 0.0;
};

/// Stage 2: search sampler ratios around a frozen, already-trained predictor;
/// every trial is a zero-gradient re-evaluation on the validation split. The
/// base config's own ratios are always the first (pinned) trial, so the
/// incumbent can never fall below them.
SamplerSearchResult search_sampler(const kg::KnowledgeGraph& g,
                                   const sampler::SamplerConfig& base,
                                   const predictor::PredictorParams& frozen,
                                   const SearchSpace& space, const StageOptions& opts);

struct BilevelOptions {
    StageOptions predictor_stage;
    StageOptions sampler_stage;
    bool per_relation = false; // per-relation entity ratios in stage 2
    /// Frozen sampler used throughout stage 1 (and as stage 2's base).
    sampler::SamplerConfig frozen_sampler;
};

struct BilevelResult {
    PredictorSearchResult stage1;
    SamplerSearchResult stage2;
    sampler::SamplerConfig sampler;        // stage-2 incumbent
    predictor::PredictorConfig predictor;  // stage-1 incumbent
};

/// Two-stage search: predictor hyperparameters first (frozen sampler), then
/// sampler ratios against stage 1's retrained checkpoint. Audit records are
/// tagged "predictor" / "sampler"; exactly budget1 + budget2 trial records.
BilevelResult bilevel_search(const kg::KnowledgeGraph& g, const BilevelOptions& opts);

} // namespace oss::search
