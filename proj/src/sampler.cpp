#include "oss/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>

#include "json.hpp"

#include "oss/errors.hpp"
#include "oss/rng.hpp"

namespace oss::sampler {

using json = nlohmann::ordered_json;

const char* heuristic_name(Heuristic h) {
    switch (h) {
        case Heuristic::RAND: return "rand";
        case Heuristic::PR: return "pr";
        case Heuristic::RW: return "rw";
        case Heuristic::BFS: return "bfs";
        case Heuristic::PPR: return "ppr";
    }
    return "?";
}

Heuristic parse_heuristic(const std::string& name) {
    for (Heuristic h : {Heuristic::RAND, Heuristic::PR, Heuristic::RW, Heuristic::BFS,
                        Heuristic::PPR})
        if (name == heuristic_name(h)) return h;
    throw ConfigError("unknown sampling heuristic '" + name + "' (rand|pr|rw|bfs|ppr)");
}

const char* orientation_name(PprOrientation o) {
    return o == PprOrientation::RowNormalized ? "row" : "col";
}

PprOrientation parse_orientation(const std::string& name) {
    if (name == "row") return PprOrientation::RowNormalized;
    if (name == "col") return PprOrientation::ColumnNormalized;
    throw ConfigError("unknown transition orientation '" + name + "' (row|col)");
}

double SamplerConfig::entity_ratio_for(int32_t relation) const {
    auto it = entity_ratio.find(relation);
    return it == entity_ratio.end() ? entity_ratio_default : it->second;
}

double SamplerConfig::edge_ratio_for(int32_t relation) const {
    auto it = edge_ratio.find(relation);
    return it == edge_ratio.end() ? edge_ratio_default : it->second;
}

void SamplerConfig::validate() const {
    if (!(alpha > 0.0 && alpha <= 1.0))
        throw ConfigError("alpha must lie in (0,1], got " + std::to_string(alpha));
    if (max_iters < 1) throw ConfigError("max_iters must be >= 1");
    if (!(tol >= 0.0)) throw ConfigError("tol must be >= 0");
    auto check_ratio = [](double r, const char* what) {
        if (!(r > 0.0 && r <= 1.0))
            throw ConfigError(std::string(what) + " must lie in (0,1], got " + std::to_string(r));
    };
    check_ratio(entity_ratio_default, "entity ratio");
    check_ratio(edge_ratio_default, "edge ratio");
    for (const auto& [r, v] : entity_ratio) check_ratio(v, "entity ratio");
    for (const auto& [r, v] : edge_ratio) check_ratio(v, "edge ratio");
    if (rw_walks < 1) throw ConfigError("rw_walks must be >= 1");
    if (rw_length < 0) throw ConfigError("rw_length must be >= 0");
}

bool ObservedGraph::contains_fact(int64_t fact_id) const {
    return std::binary_search(fact_ids.begin(), fact_ids.end(), fact_id);
}

ObservedGraph ObservedGraph::from_facts(const kg::KnowledgeGraph& g,
                                        std::span<const int64_t> facts) {
    ObservedGraph og;
    og.source = &g;
    og.n_entities = g.n_entities();
    og.fact_ids.assign(facts.begin(), facts.end());
    if (!std::is_sorted(og.fact_ids.begin(), og.fact_ids.end()))
        std::sort(og.fact_ids.begin(), og.fact_ids.end());
    const auto m = static_cast<int64_t>(og.fact_ids.size());
    og.head.resize(static_cast<size_t>(m));
    og.rel.resize(static_cast<size_t>(m));
    og.tail.resize(static_cast<size_t>(m));
    for (int64_t i = 0; i < m; ++i) {
        const kg::Triple& t = g.fact(og.fact_ids[static_cast<size_t>(i)]);
        og.head[static_cast<size_t>(i)] = t.head;
        og.rel[static_cast<size_t>(i)] = t.rel;
        og.tail[static_cast<size_t>(i)] = t.tail;
    }
    auto build = [&](const std::vector<int32_t>& key, std::vector<int64_t>& offsets,
                     std::vector<int64_t>& pos) {
        offsets.assign(static_cast<size_t>(og.n_entities) + 1, 0);
        pos.resize(static_cast<size_t>(m));
        for (int64_t i = 0; i < m; ++i) offsets[static_cast<size_t>(key[static_cast<size_t>(i)]) + 1]++;
        for (size_t i = 1; i < offsets.size(); ++i) offsets[i] += offsets[i - 1];
        std::vector<int64_t> cursor(offsets.begin(), offsets.end() - 1);
        for (int64_t i = 0; i < m; ++i)
            pos[static_cast<size_t>(cursor[static_cast<size_t>(key[static_cast<size_t>(i)])]++)] = i;
    };
    build(og.head, og.out_offsets, og.out_pos);
    build(og.tail, og.in_offsets, og.in_pos);
    return og;
}

ObservedGraph ObservedGraph::from_splits(const kg::KnowledgeGraph& g, bool include_valid) {
    int64_t count = static_cast<int64_t>(g.train.size()) +
                    (include_valid ? static_cast<int64_t>(g.valid.size()) : 0);
    std::vector<int64_t> ids(static_cast<size_t>(count));
    std::iota(ids.begin(), ids.end(), 0);
    return from_facts(g, ids);
}

int32_t Subgraph::local_id(int32_t original) const {
    auto it = std::lower_bound(entities.begin(), entities.end(), original);
    if (it == entities.end() || *it != original) return -1;
    return static_cast<int32_t>(it - entities.begin());
}

int64_t sample_count(double ratio, int64_t total) {
    if (total <= 0) return 0;
    auto k = static_cast<int64_t>(std::floor(ratio * static_cast<double>(total) + 0.5));
    return std::clamp<int64_t>(k, 1, total);
}

namespace {

void check_entity(const ObservedGraph& og, int32_t u) {
    if (u < 0 || u >= og.n_entities)
        throw ConfigError("query entity id " + std::to_string(u) + " outside [0, " +
                          std::to_string(og.n_entities) + ")");
}

/// Shared power iteration: p ← α·s + (1−α)·T·p until the L1 step change
/// drops below tol or max_iters is hit.
std::vector<double> power_iterate(const ObservedGraph& og, const std::vector<double>& restart,
                                  const SamplerConfig& cfg) {
    const auto n = static_cast<size_t>(og.n_entities);
    std::vector<double> p = restart;
    std::vector<double> next(n, 0.0);
    std::vector<double> scaled; // p[x] / outdeg(x), column-normalized only
    if (cfg.orientation == PprOrientation::ColumnNormalized) scaled.resize(n);

    for (int iter = 0; iter < cfg.max_iters; ++iter) {
        if (cfg.orientation == PprOrientation::RowNormalized) {
            // next[i] = α·s[i] + (1−α)·(mean of p over i's out-neighbors)
            for (size_t i = 0; i < n; ++i) {
                double acc = 0.0;
                auto row = og.out_row(static_cast<int32_t>(i));
                for (int64_t pos : row) acc += p[static_cast<size_t>(og.tail[static_cast<size_t>(pos)])];
                next[i] = cfg.alpha * restart[i] +
                          (row.empty() ? 0.0
                                       : (1.0 - cfg.alpha) * acc / static_cast<double>(row.size()));
            }
        } else {
            // next[i] = α·s[i] + (1−α)·Σ_{x→i} p[x]/outdeg(x)
            for (size_t x = 0; x < n; ++x) {
                auto d = og.out_degree(static_cast<int32_t>(x));
                scaled[x] = d > 0 ? p[x] / static_cast<double>(d) : 0.0;
            }
            for (size_t i = 0; i < n; ++i) {
                double acc = 0.0;
                for (int64_t pos : og.in_row(static_cast<int32_t>(i)))
                    acc += scaled[static_cast<size_t>(og.head[static_cast<size_t>(pos)])];
                next[i] = cfg.alpha * restart[i] + (1.0 - cfg.alpha) * acc;
            }
        }
        double l1 = 0.0;
        for (size_t i = 0; i < n; ++i) l1 += std::abs(next[i] - p[i]);
        std::swap(p, next);
        if (l1 < cfg.tol) break;
    }
    return p;
}

std::vector<double> bfs_scores(const ObservedGraph& og, int32_t u) {
    const auto n = static_cast<size_t>(og.n_entities);
    std::vector<int64_t> dist(n, -1);
    std::deque<int32_t> queue;
    dist[static_cast<size_t>(u)] = 0;
    queue.push_back(u);
    while (!queue.empty()) {
        int32_t x = queue.front();
        queue.pop_front();
        for (int64_t pos : og.out_row(x)) {
            int32_t o = og.tail[static_cast<size_t>(pos)];
            if (dist[static_cast<size_t>(o)] < 0) {
                dist[static_cast<size_t>(o)] = dist[static_cast<size_t>(x)] + 1;
                queue.push_back(o);
            }
        }
    }
    std::vector<double> score(n, 0.0);
    for (size_t i = 0; i < n; ++i)
        if (dist[i] >= 0) score[i] = 1.0 / (1.0 + static_cast<double>(dist[i]));
    return score;
}

std::vector<double> rw_scores(const ObservedGraph& og, int32_t u, const SamplerConfig& cfg) {
    const auto n = static_cast<size_t>(og.n_entities);
    std::vector<int64_t> visits(n, 0);
    Rng rng(Rng::mix(cfg.seed, static_cast<uint64_t>(u), 0x5257414c4bULL)); // "RWALK"
    for (int w = 0; w < cfg.rw_walks; ++w) {
        int32_t x = u;
        visits[static_cast<size_t>(x)]++;
        for (int step = 0; step < cfg.rw_length; ++step) {
            auto row = og.out_row(x);
            if (row.empty()) break;
            int64_t pos = row[rng.uniform_int(row.size())];
            x = og.tail[static_cast<size_t>(pos)];
            visits[static_cast<size_t>(x)]++;
        }
    }
    int64_t total = std::accumulate(visits.begin(), visits.end(), int64_t{0});
    std::vector<double> score(n, 0.0);
    for (size_t i = 0; i < n; ++i)
        score[i] = static_cast<double>(visits[i]) / static_cast<double>(total);
    return score;
}

std::vector<double> rand_scores(const ObservedGraph& og, int32_t u, const SamplerConfig& cfg) {
    const auto n = static_cast<size_t>(og.n_entities);
    Rng rng(Rng::mix(cfg.seed, static_cast<uint64_t>(u), 0x52414e44ULL)); // "RAND"
    std::vector<double> score(n);
    for (size_t i = 0; i < n; ++i) score[i] = rng.uniform01();
    score[static_cast<size_t>(u)] = 2.0; // anchor forced maximal
    return score;
}

} // namespace

std::vector<double> ppr_scores(const ObservedGraph& og, int32_t u, const SamplerConfig& cfg) {
    cfg.validate();
    check_entity(og, u);
    std::vector<double> restart(static_cast<size_t>(og.n_entities), 0.0);
    restart[static_cast<size_t>(u)] = 1.0;
    return power_iterate(og, restart, cfg);
}

std::vector<double> pagerank_scores(const ObservedGraph& og, const SamplerConfig& cfg) {
    cfg.validate();
    if (og.n_entities == 0) return {};
    std::vector<double> restart(static_cast<size_t>(og.n_entities),
                                1.0 / static_cast<double>(og.n_entities));
    // Classical PageRank propagates mass along edges (column-normalized
    // transition); the orientation knob applies to the personalized variant
    // only. Under the row-normalized operator a uniform restart is a fixed
    // point on any dangling-free graph, which would degenerate this baseline.
    SamplerConfig pr_cfg = cfg;
    pr_cfg.orientation = PprOrientation::ColumnNormalized;
    return power_iterate(og, restart, pr_cfg);
}

std::vector<double> heuristic_scores(const ObservedGraph& og, int32_t u, const SamplerConfig& cfg,
                                     const ScoreCache* cache) {
    cfg.validate();
    check_entity(og, u);
    switch (cfg.heuristic) {
        case Heuristic::RAND: return rand_scores(og, u, cfg);
        case Heuristic::PR:
            if (cache && cache->has_pagerank) return cache->pagerank;
            return pagerank_scores(og, cfg);
        case Heuristic::RW: return rw_scores(og, u, cfg);
        case Heuristic::BFS: return bfs_scores(og, u);
        case Heuristic::PPR:
            throw ConfigError("heuristic_scores expects a non-PPR baseline heuristic");
    }
    throw ConfigError("unknown heuristic");
}

std::vector<double> entity_scores(const ObservedGraph& og, int32_t u, const SamplerConfig& cfg,
                                  const ScoreCache* cache) {
    if (cfg.heuristic == Heuristic::PPR) return ppr_scores(og, u, cfg);
    return heuristic_scores(og, u, cfg, cache);
}

std::vector<int32_t> top_k(std::span<const int32_t> ids, std::span<const double> scores,
                           int64_t k) {
    if (ids.size() != scores.size()) throw ShapeError("top_k: ids and scores length mismatch");
    const auto n = static_cast<int64_t>(ids.size());
    k = std::clamp<int64_t>(k, 0, n);
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    auto better = [&](int64_t a, int64_t b) {
        if (scores[static_cast<size_t>(a)] != scores[static_cast<size_t>(b)])
            return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
        return ids[static_cast<size_t>(a)] < ids[static_cast<size_t>(b)];
    };
    std::partial_sort(order.begin(), order.begin() + static_cast<size_t>(k), order.end(), better);
    std::vector<int32_t> result(static_cast<size_t>(k));
    for (int64_t i = 0; i < k; ++i)
        result[static_cast<size_t>(i)] = ids[static_cast<size_t>(order[static_cast<size_t>(i)])];
    return result;
}

Subgraph extract_subgraph(const ObservedGraph& og, int32_t u, int32_t q,
                          const SamplerConfig& cfg, const ScoreCache* cache) {
    cfg.validate();
    check_entity(og, u);
    const double r_v = cfg.entity_ratio_for(q);
    const double r_e = cfg.edge_ratio_for(q);
    std::vector<double> p = entity_scores(og, u, cfg, cache);

    const int64_t n = og.n_entities;
    const int64_t k_v = sample_count(r_v, n);
    std::vector<int32_t> all_ids(static_cast<size_t>(n));
    std::iota(all_ids.begin(), all_ids.end(), 0);
    std::vector<int32_t> selected = top_k(all_ids, p, k_v);
    if (std::find(selected.begin(), selected.end(), u) == selected.end())
        selected.back() = u; // evict the lowest-ranked member for the anchor

    Subgraph sub;
    sub.entities.assign(selected.begin(), selected.end());
    std::sort(sub.entities.begin(), sub.entities.end());
    sub.anchor = sub.local_id(u);
    sub.anchor_original = u;
    sub.heuristic = cfg.heuristic;
    sub.entity_ratio = r_v;
    sub.edge_ratio = r_e;
    sub.query_relation = q;
    sub.source_entities = n;
    sub.source_edges = og.n_edges();

    // Candidate edges: observed facts with both endpoints retained, scored by
    // the endpoint-score product; ties broken by ascending fact id.
    std::vector<char> in_set(static_cast<size_t>(n), 0);
    for (int32_t e : sub.entities) in_set[static_cast<size_t>(e)] = 1;
    std::vector<int64_t> cand;
    std::vector<double> cand_score;
    for (int32_t x : sub.entities)
        for (int64_t pos : og.out_row(x)) {
            int32_t o = og.tail[static_cast<size_t>(pos)];
            if (!in_set[static_cast<size_t>(o)]) continue;
            cand.push_back(pos);
            cand_score.push_back(p[static_cast<size_t>(x)] * p[static_cast<size_t>(o)]);
        }
    const int64_t k_e =
        std::min<int64_t>(sample_count(r_e, og.n_edges()), static_cast<int64_t>(cand.size()));
    std::vector<int64_t> order(cand.size());
    std::iota(order.begin(), order.end(), 0);
    auto better = [&](int64_t a, int64_t b) {
        if (cand_score[static_cast<size_t>(a)] != cand_score[static_cast<size_t>(b)])
            return cand_score[static_cast<size_t>(a)] > cand_score[static_cast<size_t>(b)];
        return cand[static_cast<size_t>(a)] < cand[static_cast<size_t>(b)];
    };
    std::partial_sort(order.begin(), order.begin() + static_cast<size_t>(k_e), order.end(),
                      better);
    std::vector<int64_t> keep(order.begin(), order.begin() + static_cast<size_t>(k_e));
    std::sort(keep.begin(), keep.end(),
              [&](int64_t a, int64_t b) { return cand[static_cast<size_t>(a)] < cand[static_cast<size_t>(b)]; });
    for (int64_t idx : keep) {
        int64_t pos = cand[static_cast<size_t>(idx)];
        kg::Triple t{sub.local_id(og.head[static_cast<size_t>(pos)]), og.rel[static_cast<size_t>(pos)],
                     sub.local_id(og.tail[static_cast<size_t>(pos)])};
        sub.edges.push_back(t);
        sub.fact_ids.push_back(og.fact_ids[static_cast<size_t>(pos)]);
    }
    return sub;
}

std::string Subgraph::to_json() const {
    json j;
    j["format"] = "oss.subgraph";
    j["version"] = 1;
    j["heuristic"] = heuristic_name(heuristic);
    j["entity_ratio"] = entity_ratio;
    j["edge_ratio"] = edge_ratio;
    j["query_relation"] = query_relation;
    j["anchor_local"] = anchor;
    j["anchor_original"] = anchor_original;
    j["source_entities"] = source_entities;
    j["source_edges"] = source_edges;
    j["entities"] = entities;
    json edge_rows = json::array();
    for (const kg::Triple& t : edges) edge_rows.push_back({t.head, t.rel, t.tail});
    j["edges"] = std::move(edge_rows);
    j["fact_ids"] = fact_ids;
    return j.dump();
}

Subgraph Subgraph::from_json(const std::string& text) {
    json j = json::parse(text, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded()) throw ParseError("subgraph record is not valid JSON");
    if (!j.is_object() || j.value("format", "") != "oss.subgraph")
        throw ParseError("not a subgraph record (missing format tag)");
    if (j.value("version", -1) != 1)
        throw ParseError("unsupported subgraph record version");
    Subgraph sub;
    try {
        sub.heuristic = parse_heuristic(j.at("heuristic").get<std::string>());
        sub.entity_ratio = j.at("entity_ratio").get<double>();
        sub.edge_ratio = j.at("edge_ratio").get<double>();
        sub.query_relation = j.at("query_relation").get<int32_t>();
        sub.anchor = j.at("anchor_local").get<int32_t>();
        sub.anchor_original = j.at("anchor_original").get<int32_t>();
        sub.source_entities = j.at("source_entities").get<int64_t>();
        sub.source_edges = j.at("source_edges").get<int64_t>();
        sub.entities = j.at("entities").get<std::vector<int32_t>>();
        for (const auto& row : j.at("edges")) {
            if (!row.is_array() || row.size() != 3)
                throw ParseError("subgraph edge rows must be [head, relation, tail]");
            sub.edges.push_back(
                {row[0].get<int32_t>(), row[1].get<int32_t>(), row[2].get<int32_t>()});
        }
        sub.fact_ids = j.at("fact_ids").get<std::vector<int64_t>>();
    } catch (const json::exception& e) {
        throw ParseError(std::string("malformed subgraph record: ") + e.what());
    }
    if (sub.anchor < 0 || sub.anchor >= sub.n_entities())
        throw ParseError("subgraph anchor outside the entity list");
    if (sub.fact_ids.size() != sub.edges.size())
        throw ParseError("subgraph fact-id list length mismatch");
    return sub;
}

} // namespace oss::sampler
