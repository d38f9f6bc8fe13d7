#pragma once

#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

#include "oss/kg.hpp"
#include "oss/predictor.hpp"
#include "oss/sampler.hpp"

namespace oss::evaluation {

/// Aggregate ranking quality over one query set.
struct MetricReport {
    double mrr = 0.0;
    double hits1 = 0.0;
    double hits10 = 0.0;
    int64_t n_queries = 0;
    int64_t missed = 0; // queries whose answer was not among the sampled entities

    /// Checks the identities that genuinely hold: hits1 ≤ hits10 and
    /// hits1 ≤ mrr ≤ 1. (No upper bound linking mrr to hits10 is asserted —
    /// that relation is not an identity.)
    void validate() const;
};

/// All known-true answers per (head, relation), across every split. Used to
/// filter competing true answers out of a ranking.
class FilterIndex {
public:
    explicit FilterIndex(const kg::KnowledgeGraph& g);

    /// Answers t with (head, rel, t) anywhere in the graph, ascending; empty
    /// span when the pair never occurs.
    std::span<const int32_t> answers(int32_t head, int32_t rel) const;

private:
    int64_t n_relations_;
    std::unordered_map<int64_t, std::pair<int64_t, int64_t>> spans_;
    std::vector<int32_t> flat_;
};

/// Score given to entities outside the sampled subgraph: ranked behind every
/// scored entity, tying only among themselves.
double sentinel_score();

/// Filtered rank of `answer` inside `scores`: competitors listed in
/// `filter_out` (sorted ascending, answer excluded) are ignored, ties share
/// their mean rank. rank = 1 + #strictly-greater + #ties/2.
double rank_filtered(std::span<const double> scores, int32_t answer,
                     std::span<const int32_t> filter_out);

/// Filtered-ranking evaluation of a checkpoint over one split. Observations:
/// train facts for the valid split, train+valid facts for the test split.
/// Both query directions are covered because the split stores inverse facts.
MetricReport evaluate(const kg::KnowledgeGraph& g, kg::Split split,
                      const sampler::SamplerConfig& scfg,
                      const predictor::PredictorParams& params, int threads = 1);

/// Coverage table: fraction of queries whose answer survives entity sampling,
/// per heuristic and ratio. Membership is computed in closed form from the
/// score order (no subgraph materialization) and matches extract_subgraph.
struct CoverageTable {
    std::vector<sampler::Heuristic> heuristics;
    std::vector<double> ratios;
    std::vector<double> values; // heuristic-major, ratio-minor
    int64_t n_queries = 0;

    double at(size_t heuristic_idx, size_t ratio_idx) const {
        return values[heuristic_idx * ratios.size() + ratio_idx];
    }
};

CoverageTable coverage_ratio(const kg::KnowledgeGraph& g, kg::Split split,
                             std::span<const sampler::Heuristic> heuristics,
                             std::span<const double> ratios,
                             const sampler::SamplerConfig& base, int threads = 1);

/// MRR of a frozen checkpoint at each (entity-ratio, edge-ratio) grid cell.
struct SweepResult {
    std::vector<double> entity_ratios; // row axis
    std::vector<double> edge_ratios;   // column axis
    std::vector<double> mrr;           // row-major
    int64_t n_queries = 0;

    double at(size_t entity_idx, size_t edge_idx) const {
        return mrr[entity_idx * edge_ratios.size() + edge_idx];
    }
};

SweepResult extrapolation_sweep(const kg::KnowledgeGraph& g, kg::Split split,
                                const sampler::SamplerConfig& base,
                                const predictor::PredictorParams& params,
                                std::span<const double> entity_ratios,
                                std::span<const double> edge_ratios, int threads = 1);

} // namespace oss::evaluation
