#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "oss/sampler.hpp"

namespace oss::predictor {

enum class Activation { Identity, Relu, Tanh };
enum class Aggregation { Max, Mean, Sum };
enum class Message { DRUM, NBFNET, REDGNN };
enum class NbfCombine { Sum, Product };
enum class InitScheme { Binary, Relational };
enum class Readout { Linear, Dot };

const char* activation_name(Activation a);
const char* aggregation_name(Aggregation a);
const char* message_name(Message m);
const char* nbf_combine_name(NbfCombine c);
const char* init_scheme_name(InitScheme i);
const char* readout_name(Readout r);
Activation parse_activation(const std::string&);
Aggregation parse_aggregation(const std::string&);
Message parse_message(const std::string&);
NbfCombine parse_nbf_combine(const std::string&);
InitScheme parse_init_scheme(const std::string&);
Readout parse_readout(const std::string&);

struct PredictorConfig {
    int layers = 6;
    int hidden_dim = 32;
    double dropout = 0.1;
    Activation act = Activation::Relu;
    Aggregation agg = Aggregation::Sum;
    Message mess = Message::NBFNET;
    NbfCombine nbf_combine = NbfCombine::Sum; // NBFNET source/relation combiner
    InitScheme init = InitScheme::Binary;
    bool shortcut = true;
    bool concat = false;
    Readout readout = Readout::Linear;

    /// Mechanical feasibility (what forward/backward can execute); the
    /// narrower searchable ranges live in the search module's space.
    void validate() const;
    /// Width of one entity's readout input: hidden_dim, or layers·hidden_dim
    /// when intermediate representations are concatenated.
    int64_t readout_width() const {
        return static_cast<int64_t>(hidden_dim) * (concat ? layers : 1);
    }
};

/// Byte offsets of the named parameter segments inside the flat array.
/// Shapes depend only on (config, |R|) — never on the entity count.
struct ParamLayout {
    int64_t rel_emb = 0;    // layers × |R| × d
    int64_t query_emb = 0;  // |R| × d
    int64_t nbf_w = -1;     // layers × d × d (NBFNET only)
    int64_t att_w1 = -1;    // layers × d × 3d (REDGNN only)
    int64_t att_w2 = -1;    // layers × d     (REDGNN only)
    int64_t readout_w = -1; // 2 × readout_width (linear readout only)
    int64_t readout_b = -1; // 1               (linear readout only)
    int64_t total = 0;

    static ParamLayout compute(const PredictorConfig& cfg, int32_t n_relations);
};

/// Non-owning, layout-aware view over a flat parameter (or gradient) array.
template <typename T>
class ParamView {
public:
    ParamView(const PredictorConfig& cfg, int32_t n_relations, const ParamLayout& layout, T* data)
        : cfg_(&cfg), nrel_(n_relations), lay_(&layout), data_(data) {}

    std::span<T> rel_emb(int layer, int32_t rel) const {
        auto d = static_cast<int64_t>(cfg_->hidden_dim);
        return {data_ + lay_->rel_emb + (static_cast<int64_t>(layer) * nrel_ + rel) * d,
                static_cast<size_t>(d)};
    }
    std::span<T> query_emb(int32_t rel) const {
        auto d = static_cast<int64_t>(cfg_->hidden_dim);
        return {data_ + lay_->query_emb + static_cast<int64_t>(rel) * d, static_cast<size_t>(d)};
    }
    std::span<T> nbf_w(int layer) const { // d×d row-major
        auto d = static_cast<int64_t>(cfg_->hidden_dim);
        return {data_ + lay_->nbf_w + static_cast<int64_t>(layer) * d * d,
                static_cast<size_t>(d * d)};
    }
    std::span<T> att_w1(int layer) const { // d×3d row-major
        auto d = static_cast<int64_t>(cfg_->hidden_dim);
        return {data_ + lay_->att_w1 + static_cast<int64_t>(layer) * d * 3 * d,
                static_cast<size_t>(d * 3 * d)};
    }
    std::span<T> att_w2(int layer) const { // d
        auto d = static_cast<int64_t>(cfg_->hidden_dim);
        return {data_ + lay_->att_w2 + static_cast<int64_t>(layer) * d, static_cast<size_t>(d)};
    }
    std::span<T> readout_w() const { // [w_o ‖ w_u], 2·readout_width
        return {data_ + lay_->readout_w, static_cast<size_t>(2 * cfg_->readout_width())};
    }
    T& readout_b() const { return data_[lay_->readout_b]; }

private:
    const PredictorConfig* cfg_;
    int32_t nrel_;
    const ParamLayout* lay_;
    T* data_;
};

struct PredictorParams {
    PredictorConfig cfg;
    int32_t n_relations = 0;
    ParamLayout layout;
    std::vector<double> flat;

    static PredictorParams init(const PredictorConfig& cfg, int32_t n_relations, uint64_t seed);

    ParamView<double> view() { return {cfg, n_relations, layout, flat.data()}; }
    ParamView<const double> view() const { return {cfg, n_relations, layout, flat.data()}; }
    int64_t size() const { return static_cast<int64_t>(flat.size()); }
};

/// Per-subgraph structure shared by forward and backward: incoming edges
/// grouped per entity (in source-fact order, so aggregation order is stable
/// under relabeling) and breadth-first levels from the anchor. Messages at
/// layer ℓ flow only from sources with level ≤ ℓ, i.e. the active frontier
/// grows one hop per layer; entities beyond L hops keep exactly-zero rows.
struct PredGraph {
    int64_t n_entities = 0;
    int64_t n_edges = 0;
    std::vector<int64_t> in_offsets; // n+1
    std::vector<int64_t> in_edges;   // edge indices grouped by destination
    std::vector<int32_t> level;      // BFS hops from anchor; -1 = unreachable

    static PredGraph build(const sampler::Subgraph& sub);
};

/// Everything backward needs from one forward pass.
struct ForwardState {
    std::vector<std::vector<double>> h;       // layers+1 matrices, n×d each
    std::vector<std::vector<double>> pre_act; // Z per layer, n×d
    std::vector<std::vector<double>> mask;    // dropout factors per layer (training only)
    std::vector<std::vector<int64_t>> argmax; // winning edge per (entity,dim); max-agg only
    std::vector<std::vector<double>> pre_w;   // per-entity aggregate before W; factored NBFNET
    std::vector<std::vector<double>> att;     // per-edge attention; REDGNN only
    std::vector<double> logits;
};

struct ForwardOptions {
    bool training = false;
    uint64_t dropout_seed = 0; // same seed → same masks, so runs are replayable
};

/// H^(0): zero everywhere except the anchor row (all-ones, or the query
/// embedding under relational init).
std::vector<double> init_representations(const sampler::Subgraph& sub, int32_t query_rel,
                                         const PredictorParams& params);

/// One edge's message, spelled per variant. forward() is observationally
/// equivalent to folding this over every active edge (it takes batched
/// shortcuts internally); tests pin that equivalence.
void message_into(const PredictorConfig& cfg, ParamView<const double> p, int layer, int32_t rel,
                  int32_t query_rel, std::span<const double> h_x, std::span<double> out);

/// Full pass: init, `layers` propagation steps, readout. Returns one raw
/// logit per subgraph entity. `state` may be null when no backward follows.
std::vector<double> forward(const sampler::Subgraph& sub, const PredGraph& pg, int32_t query_rel,
                            const PredictorParams& params, const ForwardOptions& opt,
                            ForwardState* state);

/// Accumulates dLoss/dparams into `grad` (layout-aligned, caller-zeroed or
/// carried across a batch) given dLoss/dlogits.
void backward(const sampler::Subgraph& sub, const PredGraph& pg, int32_t query_rel,
              const PredictorParams& params, const ForwardOptions& opt, const ForwardState& state,
              std::span<const double> dlogits, std::vector<double>& grad);

/// Versioned checkpoint (binary, named segments). Loading recomputes the
/// layout from the stored config and validates every segment's length;
/// a caller-supplied relation count must match exactly.
void save_checkpoint(const PredictorParams& params, const std::filesystem::path& path);
PredictorParams load_checkpoint(const std::filesystem::path& path,
                                int32_t expected_relations = -1);

} // namespace oss::predictor
