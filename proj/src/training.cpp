#include "oss/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ostream>

#include "json.hpp"

#include "oss/errors.hpp"
#include "oss/parallel.hpp"
#include "oss/rng.hpp"

namespace oss::training {

using json = nlohmann::ordered_json;

const char* optimizer_name(OptimizerKind k) { return k == OptimizerKind::Adam ? "adam" : "sgd"; }

OptimizerKind parse_optimizer(const std::string& name) {
    if (name == "adam") return OptimizerKind::Adam;
    if (name == "sgd") return OptimizerKind::Sgd;
    throw ConfigError("unknown optimizer '" + name + "' (adam|sgd)");
}

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be >= 0 (0 disables)");
    if (!(split_fraction > 0.0 && split_fraction < 1.0))
        throw ConfigError("split_fraction must lie in (0,1)");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
        throw ConfigError("adam betas must lie in [0,1)");
    if (!(eps > 0.0)) throw ConfigError("adam eps must be > 0");
    if (threads < 1) throw ConfigError("threads must be >= 1");
}

Optimizer::Optimizer(const TrainConfig& cfg, int64_t n_params)
    : kind_(cfg.optimizer),
      lr_(cfg.learning_rate),
      wd_(cfg.weight_decay),
      b1_(cfg.beta1),
      b2_(cfg.beta2),
      eps_(cfg.eps),
      clip_(cfg.grad_clip) {
    if (n_params < 0) throw ConfigError("negative parameter count");
    if (kind_ == OptimizerKind::Adam) {
        m_.assign(static_cast<size_t>(n_params), 0.0);
        v_.assign(static_cast<size_t>(n_params), 0.0);
    }
}

void Optimizer::step(std::span<const double> grad, std::span<double> params) {
    if (grad.size() != params.size())
        throw ShapeError("gradient and parameter vectors differ in length");
    if (kind_ == OptimizerKind::Adam && m_.size() != params.size())
        throw ShapeError("optimizer state does not match the parameter count");
    ++t_;
    double scale = 1.0;
    if (clip_ > 0.0) {
        double sq = 0.0;
        for (double gi : grad) sq += gi * gi;
        const double norm = std::sqrt(sq);
        if (norm > clip_) scale = clip_ / norm;
    }
    if (kind_ == OptimizerKind::Sgd) {
        for (size_t i = 0; i < params.size(); ++i) {
            const double gi = grad[i] * scale + wd_ * params[i];
            params[i] -= lr_ * gi;
        }
        return;
    }
    const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (size_t i = 0; i < params.size(); ++i) {
        const double gi = grad[i] * scale + wd_ * params[i];
        m_[i] = b1_ * m_[i] + (1.0 - b1_) * gi;
        v_[i] = b2_ * v_[i] + (1.0 - b2_) * gi * gi;
        const double mhat = m_[i] / bc1;
        const double vhat = v_[i] / bc2;
        params[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
}

double bce_loss(std::span<const double> logits, int32_t answer_local,
                std::span<double> dlogits) {
    const auto n = static_cast<int64_t>(logits.size());
    if (answer_local < 0 || answer_local >= n)
        throw LogicError("answer position outside the logit vector");
    if (!dlogits.empty() && dlogits.size() != logits.size())
        throw ShapeError("dlogits length must match logits");
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double z = logits[static_cast<size_t>(i)];
        const double y = i == answer_local ? 1.0 : 0.0;
        // stable form of y·softplus(−z) + (1−y)·softplus(z)
        loss += std::max(z, 0.0) - y * z + std::log1p(std::exp(-std::fabs(z)));
        if (!dlogits.empty()) {
            const double sig = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z))
                                        : std::exp(z) / (1.0 + std::exp(z));
            dlogits[static_cast<size_t>(i)] = sig - y;
        }
    }
    return loss;
}

namespace {

struct BatchPartial {
    std::vector<double> grad;
    double loss = 0.0;
    int64_t contributed = 0;
    int64_t missed = 0;
    int64_t bad_query = -1; // fact id that produced a non-finite loss, if any
};

} // namespace

EpochStats train_epoch(const kg::KnowledgeGraph& g, const sampler::SamplerConfig& scfg,
                       predictor::PredictorParams& params, Optimizer& opt,
                       const TrainConfig& tcfg, int epoch_index) {
    const auto t_start = std::chrono::steady_clock::now();
    tcfg.validate();
    scfg.validate();
    params.cfg.validate();
    if (!g.augmented)
        throw ConfigError("training needs the inverse-augmented graph (run augmentation first)");
    if (params.n_relations != g.n_relations())
        throw ShapeError("parameter table relation count does not match the graph");

    const uint64_t epoch_seed =
        Rng::mix(tcfg.seed, static_cast<uint64_t>(epoch_index), 0x45504F43ull); // per-epoch stream
    kg::EdgeSplit es = kg::split_train_edges(g, tcfg.split_fraction, epoch_seed);
    sampler::ObservedGraph og = sampler::ObservedGraph::from_facts(g, es.observed);
    sampler::ScoreCache cache;
    if (scfg.heuristic == sampler::Heuristic::PR) {
        cache.pagerank = sampler::pagerank_scores(og, scfg);
        cache.has_pagerank = true;
    }

    std::vector<int64_t> order = es.queries;
    {
        Rng shuffle_rng(Rng::mix(epoch_seed, 0x5348ull));
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<size_t>(shuffle_rng.uniform_int(i))]);
    }

    const int nthreads = resolve_threads(tcfg.threads);
    const auto n_params = static_cast<size_t>(params.layout.total);
    std::vector<double> grad(n_params);

    EpochStats stats;
    stats.epoch = epoch_index;
    double loss_total = 0.0;

    for (size_t batch_start = 0; batch_start < order.size();
         batch_start += static_cast<size_t>(tcfg.batch_size)) {
        const size_t batch_end =
            std::min(order.size(), batch_start + static_cast<size_t>(tcfg.batch_size));
        const auto batch_n = static_cast<int64_t>(batch_end - batch_start);

        std::vector<BatchPartial> partials(static_cast<size_t>(nthreads));
        parallel_for(batch_n, nthreads, [&](int64_t begin, int64_t end, int tid) {
            BatchPartial& acc = partials[static_cast<size_t>(tid)];
            acc.grad.assign(n_params, 0.0);
            std::vector<double> dlogits;
            for (int64_t bi = begin; bi < end; ++bi) {
                const int64_t fact_id = order[batch_start + static_cast<size_t>(bi)];
                const kg::Triple t = g.fact(fact_id);
                sampler::Subgraph sub =
                    sampler::extract_subgraph(og, t.head, t.rel, scfg, &cache);
                // observed-only guarantee: the query fact and its inverse must
                // not appear among the edges the subgraph was built from
                const int64_t inv_id = g.inverse_fact_id(fact_id);
                if (std::binary_search(sub.fact_ids.begin(), sub.fact_ids.end(), fact_id) ||
                    std::binary_search(sub.fact_ids.begin(), sub.fact_ids.end(), inv_id))
                    throw LogicError("training query fact " + std::to_string(fact_id) +
                                     " leaked into its own subgraph");
                const int32_t answer = sub.local_id(t.tail);
                if (answer < 0) {
                    ++acc.missed;
                    continue;
                }
                predictor::PredGraph pg = predictor::PredGraph::build(sub);
                predictor::ForwardOptions opt_fwd;
                opt_fwd.training = true;
                opt_fwd.dropout_seed =
                    Rng::mix(epoch_seed, static_cast<uint64_t>(fact_id), 0xD0ull);
                predictor::ForwardState state;
                std::vector<double> logits =
                    predictor::forward(sub, pg, t.rel, params, opt_fwd, &state);
                dlogits.assign(logits.size(), 0.0);
                const double loss = bce_loss(logits, answer, dlogits);
                if (!std::isfinite(loss)) {
                    acc.bad_query = fact_id;
                    return;
                }
                predictor::backward(sub, pg, t.rel, params, opt_fwd, state, dlogits, acc.grad);
                acc.loss += loss;
                ++acc.contributed;
            }
        });

        int64_t contributed = 0;
        std::fill(grad.begin(), grad.end(), 0.0);
        for (const BatchPartial& p : partials) {
            if (p.bad_query >= 0)
                throw LogicError("non-finite loss at epoch " + std::to_string(epoch_index) +
                                 ", step " + std::to_string(opt.steps_taken() + 1) +
                                 ", query fact " + std::to_string(p.bad_query));
            contributed += p.contributed;
            stats.missed += p.missed;
            loss_total += p.loss;
            if (!p.grad.empty())
                for (size_t i = 0; i < n_params; ++i) grad[i] += p.grad[i];
        }
        if (contributed == 0) continue; // every query in the batch was missed
        stats.n_queries += contributed;
        const double inv = 1.0 / static_cast<double>(contributed); // batch-mean scaling
        for (double& gi : grad) gi *= inv;
        opt.step(grad, params.flat);
        ++stats.steps;
    }

    stats.mean_loss =
        stats.n_queries > 0 ? loss_total / static_cast<double>(stats.n_queries) : 0.0;
    stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return stats;
}

FitResult fit(const kg::KnowledgeGraph& g, const sampler::SamplerConfig& scfg,
              const predictor::PredictorConfig& pcfg, const TrainConfig& tcfg,
              std::ostream* log) {
    tcfg.validate();
    pcfg.validate();
    if (g.split(kg::Split::Valid).empty())
        throw ConfigError("fit needs a non-empty validation split for model selection");

    FitResult result;
    result.params =
        predictor::PredictorParams::init(pcfg, g.n_relations(), Rng::mix(tcfg.seed, 0x1217ull));
    Optimizer opt(tcfg, result.params.layout.total);

    predictor::PredictorParams best = result.params;
    for (int epoch = 1; epoch <= tcfg.epochs; ++epoch) {
        EpochRecord record;
        record.stats = train_epoch(g, scfg, result.params, opt, tcfg, epoch);
        record.valid = evaluation::evaluate(g, kg::Split::Valid, scfg, result.params, tcfg.threads);
        if (result.report.epochs.empty() || record.valid.mrr > result.report.best_valid_mrr) {
            result.report.best_valid_mrr = record.valid.mrr;
            result.report.best_epoch = epoch;
            best = result.params;
        }
        result.report.epochs.push_back(record);
        if (log) {
            json line;
            line["epoch"] = epoch;
            line["loss"] = record.stats.mean_loss;
            line["queries"] = record.stats.n_queries;
            line["missed"] = record.stats.missed;
            line["steps"] = record.stats.steps;
            line["seconds"] = record.stats.seconds;
            line["valid_mrr"] = record.valid.mrr;
            line["valid_hits1"] = record.valid.hits1;
            line["valid_hits10"] = record.valid.hits10;
            (*log) << line.dump() << "\n";
        }
    }
    result.params = std::move(best);
    return result;
}

} // namespace oss::training
