#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "oss/evaluation.hpp"
#include "oss/kg.hpp"
#include "oss/predictor.hpp"
#include "oss/sampler.hpp"

namespace oss::training {

enum class OptimizerKind { Adam, Sgd };
const char* optimizer_name(OptimizerKind k);
OptimizerKind parse_optimizer(const std::string& name);

struct TrainConfig {
    int epochs = 10;
    int batch_size = 16;
    double learning_rate = 1e-3;
    double weight_decay = 0.0;
    OptimizerKind optimizer = OptimizerKind::Adam;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double grad_clip = 0.0;       // max gradient L2 norm; 0 disables clipping
    double split_fraction = 0.95; // share of train facts used as observations per epoch
    uint64_t seed = 0;
    int threads = 1;

    void validate() const;
};

/// Adam/SGD over a flat parameter vector. Weight decay is classic L2 (added to
/// the gradient); clipping rescales the whole gradient to the configured norm.
class Optimizer {
public:
    Optimizer(const TrainConfig& cfg, int64_t n_params);

    void step(std::span<const double> grad, std::span<double> params);
    int64_t steps_taken() const { return t_; }

private:
    OptimizerKind kind_;
    double lr_, wd_, b1_, b2_, eps_, clip_;
    int64_t t_ = 0;
    std::vector<double> m_, v_;
};

/// One-hot binary cross-entropy over every scored entity, summed (not
/// averaged) across the vector; fills dlogits with ∂loss/∂logit when given.
double bce_loss(std::span<const double> logits, int32_t answer_local,
                std::span<double> dlogits);

struct EpochStats {
    int epoch = 0;        // 1-based index
    double mean_loss = 0; // mean over contributing queries
    int64_t n_queries = 0;
    int64_t missed = 0; // skipped queries: answer fell outside the subgraph
    int64_t steps = 0;  // optimizer steps taken
    double seconds = 0;
};

/// One pass over a fresh observation/query split of the train facts.
EpochStats train_epoch(const kg::KnowledgeGraph& g, const sampler::SamplerConfig& scfg,
                       predictor::PredictorParams& params, Optimizer& opt,
                       const TrainConfig& tcfg, int epoch_index);

struct EpochRecord {
    EpochStats stats;
    evaluation::MetricReport valid;
};

struct TrainReport {
    std::vector<EpochRecord> epochs;
    int best_epoch = 0; // 1-based; 0 = no epoch ran
    double best_valid_mrr = 0.0;
};

struct FitResult {
    predictor::PredictorParams params; // checkpoint with the best validation MRR
    TrainReport report;
};

/// Full training run: per-epoch re-split, validation after every epoch, best
/// checkpoint by validation MRR. When `log` is given, one JSON record per
/// epoch is appended to it.
FitResult fit(const kg::KnowledgeGraph& g, const sampler::SamplerConfig& scfg,
              const predictor::PredictorConfig& pcfg, const TrainConfig& tcfg,
              std::ostream* log = nullptr);

} // namespace oss::training
