#include "oss/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "oss/errors.hpp"
#include "oss/parallel.hpp"

namespace oss::evaluation {

void MetricReport::validate() const {
    if (n_queries == 0) {
        if (mrr != 0.0 || hits1 != 0.0 || hits10 != 0.0)
            throw LogicError("metrics over zero queries must be zero");
        return;
    }
    const double tol = 1e-12;
    if (hits1 > hits10 + tol) throw LogicError("hits@1 exceeds hits@10");
    if (hits1 > mrr + tol) throw LogicError("hits@1 exceeds MRR");
    if (mrr > 1.0 + tol) throw LogicError("MRR exceeds 1");
    if (mrr <= 0.0) throw LogicError("MRR must be positive over a non-empty query set");
}

FilterIndex::FilterIndex(const kg::KnowledgeGraph& g) : n_relations_(g.n_relations()) {
    std::vector<std::pair<int64_t, int32_t>> pairs;
    pairs.reserve(static_cast<size_t>(g.n_facts()));
    for (kg::Split s : {kg::Split::Train, kg::Split::Valid, kg::Split::Test})
        for (const kg::Triple& t : g.split(s))
            pairs.emplace_back(static_cast<int64_t>(t.head) * n_relations_ + t.rel, t.tail);
    std::sort(pairs.begin(), pairs.end());
    flat_.reserve(pairs.size());
    for (size_t i = 0; i < pairs.size();) {
        size_t j = i;
        while (j < pairs.size() && pairs[j].first == pairs[i].first) ++j;
        spans_[pairs[i].first] = {static_cast<int64_t>(flat_.size()),
                                  static_cast<int64_t>(j - i)};
        for (size_t k = i; k < j; ++k) flat_.push_back(pairs[k].second);
        i = j;
    }
}

std::span<const int32_t> FilterIndex::answers(int32_t head, int32_t rel) const {
    auto it = spans_.find(static_cast<int64_t>(head) * n_relations_ + rel);
    if (it == spans_.end()) return {};
    return {flat_.data() + it->second.first, static_cast<size_t>(it->second.second)};
}

double sentinel_score() { return -std::numeric_limits<double>::infinity(); }

double rank_filtered(std::span<const double> scores, int32_t answer,
                     std::span<const int32_t> filter_out) {
    const auto n = static_cast<int64_t>(scores.size());
    if (answer < 0 || answer >= n) throw LogicError("answer id outside the score vector");
    if (std::binary_search(filter_out.begin(), filter_out.end(), answer))
        throw LogicError("the answer itself appears in the filter set");
    const double sv = scores[static_cast<size_t>(answer)];
    int64_t greater = 0, ties = 0;
    size_t fi = 0;
    for (int64_t x = 0; x < n; ++x) {
        while (fi < filter_out.size() && filter_out[fi] < x) ++fi;
        if (fi < filter_out.size() && filter_out[fi] == x) continue;
        if (x == answer) continue;
        const double sx = scores[static_cast<size_t>(x)];
        if (sx > sv)
            ++greater;
        else if (sx == sv)
            ++ties;
    }
    return 1.0 + static_cast<double>(greater) + static_cast<double>(ties) * 0.5;
}

namespace {

struct Partial {
    double rr = 0.0;
    int64_t h1 = 0, h10 = 0, missed = 0, count = 0;
};

/// Shared per-query ranking loop for evaluate() and the sweep.
MetricReport ranked_metrics(const kg::KnowledgeGraph& g, kg::Split split,
                            const sampler::SamplerConfig& scfg,
                            const predictor::PredictorParams& params, int threads,
                            const FilterIndex& filter) {
    if (!g.augmented)
        throw ConfigError("evaluation needs the inverse-augmented graph (run augmentation first)");
    if (params.n_relations != g.n_relations())
        throw ShapeError("checkpoint relation count does not match the graph");
    scfg.validate();
    params.cfg.validate();

    sampler::ObservedGraph og =
        sampler::ObservedGraph::from_splits(g, /*include_valid=*/split == kg::Split::Test);
    sampler::ScoreCache cache;
    if (scfg.heuristic == sampler::Heuristic::PR) {
        cache.pagerank = sampler::pagerank_scores(og, scfg);
        cache.has_pagerank = true;
    }

    const auto queries = g.split(split);
    const auto n_queries = static_cast<int64_t>(queries.size());
    const auto n_entities = static_cast<size_t>(g.n_entities());
    const int nthreads = resolve_threads(threads);
    std::vector<Partial> partials(static_cast<size_t>(nthreads));

    parallel_for(n_queries, nthreads, [&](int64_t begin, int64_t end, int tid) {
        Partial& acc = partials[static_cast<size_t>(tid)];
        std::vector<double> scores(n_entities);
        std::vector<int32_t> filtered;
        for (int64_t qi = begin; qi < end; ++qi) {
            const kg::Triple& t = queries[static_cast<size_t>(qi)];
            sampler::Subgraph sub = sampler::extract_subgraph(og, t.head, t.rel, scfg, &cache);
            predictor::PredGraph pg = predictor::PredGraph::build(sub);
            std::vector<double> logits =
                predictor::forward(sub, pg, t.rel, params, {}, nullptr);
            std::fill(scores.begin(), scores.end(), sentinel_score());
            for (size_t j = 0; j < sub.entities.size(); ++j)
                scores[static_cast<size_t>(sub.entities[j])] = logits[j];

            filtered.clear();
            for (int32_t other : filter.answers(t.head, t.rel))
                if (other != t.tail) filtered.push_back(other);

            const double rank = rank_filtered(scores, t.tail, filtered);
            acc.rr += 1.0 / rank;
            if (rank <= 1.0) ++acc.h1;
            if (rank <= 10.0) ++acc.h10;
            if (sub.local_id(t.tail) < 0) ++acc.missed;
            ++acc.count;
        }
    });

    Partial total;
    for (const Partial& p : partials) {
        total.rr += p.rr;
        total.h1 += p.h1;
        total.h10 += p.h10;
        total.missed += p.missed;
        total.count += p.count;
    }
    MetricReport report;
    report.n_queries = total.count;
    report.missed = total.missed;
    if (total.count > 0) {
        report.mrr = total.rr / static_cast<double>(total.count);
        report.hits1 = static_cast<double>(total.h1) / static_cast<double>(total.count);
        report.hits10 = static_cast<double>(total.h10) / static_cast<double>(total.count);
    }
    report.validate();
    return report;
}

} // namespace

MetricReport evaluate(const kg::KnowledgeGraph& g, kg::Split split,
                      const sampler::SamplerConfig& scfg,
                      const predictor::PredictorParams& params, int threads) {
    FilterIndex filter(g);
    return ranked_metrics(g, split, scfg, params, threads, filter);
}

CoverageTable coverage_ratio(const kg::KnowledgeGraph& g, kg::Split split,
                             std::span<const sampler::Heuristic> heuristics,
                             std::span<const double> ratios,
                             const sampler::SamplerConfig& base, int threads) {
    if (heuristics.empty()) throw ConfigError("coverage needs at least one heuristic");
    if (ratios.empty()) throw ConfigError("coverage needs at least one ratio");
    for (double r : ratios)
        if (!(r > 0.0 && r <= 1.0))
            throw ConfigError("coverage ratio must lie in (0,1], got " + std::to_string(r));

    sampler::ObservedGraph og =
        sampler::ObservedGraph::from_splits(g, /*include_valid=*/split == kg::Split::Test);
    const auto queries = g.split(split);
    const auto n_queries = static_cast<int64_t>(queries.size());
    const auto n_entities = static_cast<int64_t>(g.n_entities());
    const int nthreads = resolve_threads(threads);

    CoverageTable table;
    table.heuristics.assign(heuristics.begin(), heuristics.end());
    table.ratios.assign(ratios.begin(), ratios.end());
    table.n_queries = n_queries;
    table.values.assign(heuristics.size() * ratios.size(), 0.0);

    for (size_t hi = 0; hi < heuristics.size(); ++hi) {
        sampler::SamplerConfig cfg = base;
        cfg.heuristic = heuristics[hi];
        cfg.validate();
        sampler::ScoreCache cache;
        if (cfg.heuristic == sampler::Heuristic::PR) {
            cache.pagerank = sampler::pagerank_scores(og, cfg);
            cache.has_pagerank = true;
        }
        // covered[ratio] counts, accumulated per thread then merged in order
        std::vector<std::vector<int64_t>> per_thread(
            static_cast<size_t>(nthreads), std::vector<int64_t>(ratios.size(), 0));
        parallel_for(n_queries, nthreads, [&](int64_t begin, int64_t end, int tid) {
            std::vector<int64_t>& covered = per_thread[static_cast<size_t>(tid)];
            for (int64_t qi = begin; qi < end; ++qi) {
                const kg::Triple& t = queries[static_cast<size_t>(qi)];
                std::vector<double> scores = sampler::entity_scores(og, t.head, cfg, &cache);
                // rank positions under the selection order (score desc, id asc)
                auto position = [&](int32_t id) {
                    const double s = scores[static_cast<size_t>(id)];
                    int64_t pos = 0;
                    for (int64_t x = 0; x < n_entities; ++x) {
                        if (x == id) continue;
                        const double sx = scores[static_cast<size_t>(x)];
                        if (sx > s || (sx == s && x < id)) ++pos;
                    }
                    return pos;
                };
                if (t.tail == t.head) { // the anchor is always kept
                    for (size_t ri = 0; ri < ratios.size(); ++ri) ++covered[ri];
                    continue;
                }
                const int64_t pos_v = position(t.tail);
                const int64_t pos_u = position(t.head);
                for (size_t ri = 0; ri < ratios.size(); ++ri) {
                    const int64_t k = sampler::sample_count(ratios[ri], n_entities);
                    // when the anchor misses the top-k it evicts the k-th pick
                    const int64_t cut = pos_u < k ? k : k - 1;
                    if (pos_v < cut) ++covered[ri];
                }
            }
        });
        for (size_t ri = 0; ri < ratios.size(); ++ri) {
            int64_t covered = 0;
            for (int tid = 0; tid < nthreads; ++tid)
                covered += per_thread[static_cast<size_t>(tid)][ri];
            table.values[hi * ratios.size() + ri] =
                n_queries == 0 ? 0.0
                               : static_cast<double>(covered) / static_cast<double>(n_queries);
        }
    }
    return table;
}

SweepResult extrapolation_sweep(const kg::KnowledgeGraph& g, kg::Split split,
                                const sampler::SamplerConfig& base,
                                const predictor::PredictorParams& params,
                                std::span<const double> entity_ratios,
                                std::span<const double> edge_ratios, int threads) {
    if (entity_ratios.empty() || edge_ratios.empty())
        throw ConfigError("the extrapolation grid must be non-empty on both axes");
    SweepResult result;
    result.entity_ratios.assign(entity_ratios.begin(), entity_ratios.end());
    result.edge_ratios.assign(edge_ratios.begin(), edge_ratios.end());
    result.mrr.reserve(entity_ratios.size() * edge_ratios.size());
    FilterIndex filter(g);
    for (double rv : entity_ratios)
        for (double re : edge_ratios) {
            sampler::SamplerConfig cfg = base;
            cfg.entity_ratio_default = rv;
            cfg.edge_ratio_default = re;
            cfg.entity_ratio.clear(); // the sweep varies the global ratios
            cfg.edge_ratio.clear();
            MetricReport cell = ranked_metrics(g, split, cfg, params, threads, filter);
            result.mrr.push_back(cell.mrr);
            result.n_queries = cell.n_queries;
        }
    return result;
}

} // namespace oss::evaluation
