#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "oss/kg.hpp"

namespace oss::sampler {

enum class Heuristic { RAND, PR, RW, BFS, PPR };
const char* heuristic_name(Heuristic h);
Heuristic parse_heuristic(const std::string& name);

/// Orientation of the power-iteration transition. RowNormalized applies
/// D^{-1}A (each entity averages its out-neighbors' scores); ColumnNormalized
/// applies A·D^{-1} (the classical random-walk mass propagation). They differ
/// on symmetric graphs whenever degrees vary.
enum class PprOrientation { RowNormalized, ColumnNormalized };
const char* orientation_name(PprOrientation o);
PprOrientation parse_orientation(const std::string& name);

struct SamplerConfig {
    Heuristic heuristic = Heuristic::PPR;
    double alpha = 0.85;   // restart probability
    int max_iters = 100;   // power-iteration cap
    double tol = 1e-6;     // L1 early-stop tolerance
    PprOrientation orientation = PprOrientation::RowNormalized;
    double entity_ratio_default = 0.1;
    double edge_ratio_default = 0.1;
    std::map<int32_t, double> entity_ratio; // per-relation overrides
    std::map<int32_t, double> edge_ratio;
    int rw_walks = 2000;
    int rw_length = 10;
    uint64_t seed = 0;

    double entity_ratio_for(int32_t relation) const;
    double edge_ratio_for(int32_t relation) const;
    void validate() const; // throws ConfigError on any out-of-range field
};

/// Immutable view of a knowledge graph restricted to a subset of its facts
/// (the observation set). Built once per edge split and shared read-only by
/// every query sampled against it.
struct ObservedGraph {
    const kg::KnowledgeGraph* source = nullptr;
    std::vector<int64_t> fact_ids; // ascending global fact ids
    std::vector<int32_t> head, rel, tail; // aligned to fact_ids
    int64_t n_entities = 0;

    // CSR over positions into fact_ids, grouped by head / by tail.
    std::vector<int64_t> out_offsets, out_pos;
    std::vector<int64_t> in_offsets, in_pos;

    int64_t n_edges() const { return static_cast<int64_t>(fact_ids.size()); }
    std::span<const int64_t> out_row(int32_t entity) const {
        return {out_pos.data() + out_offsets[static_cast<size_t>(entity)],
                out_pos.data() + out_offsets[static_cast<size_t>(entity) + 1]};
    }
    std::span<const int64_t> in_row(int32_t entity) const {
        return {in_pos.data() + in_offsets[static_cast<size_t>(entity)],
                in_pos.data() + in_offsets[static_cast<size_t>(entity) + 1]};
    }
    int64_t out_degree(int32_t entity) const {
        return out_offsets[static_cast<size_t>(entity) + 1] -
               out_offsets[static_cast<size_t>(entity)];
    }
    bool contains_fact(int64_t fact_id) const;

    static ObservedGraph from_facts(const kg::KnowledgeGraph& g, std::span<const int64_t> facts);
    /// All train facts (include_valid=false) or train+valid facts.
    static ObservedGraph from_splits(const kg::KnowledgeGraph& g, bool include_valid);
};

/// One-shot sampled subgraph with entities remapped to dense local ids.
/// `entities` is sorted ascending, so local id = position; `edges` hold local
/// ids and are ordered by ascending source fact id (`fact_ids` is aligned).
struct Subgraph {
    std::vector<int32_t> entities;
    std::vector<kg::Triple> edges;
    std::vector<int64_t> fact_ids;
    int32_t anchor = -1; // local id of the query entity

    // provenance
    Heuristic heuristic = Heuristic::PPR;
    double entity_ratio = 0;
    double edge_ratio = 0;
    int32_t query_relation = -1;
    int32_t anchor_original = -1;
    int64_t source_entities = 0;
    int64_t source_edges = 0;

    int64_t n_entities() const { return static_cast<int64_t>(entities.size()); }
    /// Dense local id of an original entity id, or -1 when not sampled.
    int32_t local_id(int32_t original) const;

    std::string to_json() const;
    static Subgraph from_json(const std::string& text);
};

/// Per-observed-graph memo for query-independent scores (global PageRank).
struct ScoreCache {
    bool has_pagerank = false;
    std::vector<double> pagerank;
};

/// Power iteration p ← α·s + (1−α)·T·p from p = s = 1(u); dangling entities
/// have an all-zero transition row, so their mass fades rather than teleports.
std::vector<double> ppr_scores(const ObservedGraph& og, int32_t u, const SamplerConfig& cfg);

/// Global PageRank: same iteration with the uniform restart vector s = 1/|V|.
std::vector<double> pagerank_scores(const ObservedGraph& og, const SamplerConfig& cfg);

/// Non-PPR baselines (RAND / PR / RW / BFS). Deterministic given cfg.seed and u.
std::vector<double> heuristic_scores(const ObservedGraph& og, int32_t u, const SamplerConfig& cfg,
                                     const ScoreCache* cache = nullptr);

/// Dispatch on cfg.heuristic (PPR included).
std::vector<double> entity_scores(const ObservedGraph& og, int32_t u, const SamplerConfig& cfg,
                                  const ScoreCache* cache = nullptr);

/// Top-K ids under the ordering (score descending, id ascending); exactly
/// min(K, |ids|) results, returned in that ordering.
std::vector<int32_t> top_k(std::span<const int32_t> ids, std::span<const double> scores,
                           int64_t k);

/// Entity sampling, then edge sampling by the score product p_head·p_tail,
/// then dense remapping. The anchor u is always retained.
Subgraph extract_subgraph(const ObservedGraph& og, int32_t u, int32_t q,
                          const SamplerConfig& cfg, const ScoreCache* cache = nullptr);

/// round-half-up with a floor of 1: subgraph sizes K = round(ratio·total).
int64_t sample_count(double ratio, int64_t total);

} // namespace oss::sampler
