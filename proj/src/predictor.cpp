#include "oss/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <deque>
#include <fstream>
#include <iterator>

#include "json.hpp"

#include "oss/errors.hpp"
#include "oss/rng.hpp"

namespace oss::predictor {

using json = nlohmann::ordered_json;

// ---- enum plumbing ---------------------------------------------------------

const char* activation_name(Activation a) {
    switch (a) {
        case Activation::Identity: return "identity";
        case Activation::Relu: return "relu";
        case Activation::Tanh: return "tanh";
    }
    return "?";
}
const char* aggregation_name(Aggregation a) {
    switch (a) {
        case Aggregation::Max: return "max";
        case Aggregation::Mean: return "mean";
        case Aggregation::Sum: return "sum";
    }
    return "?";
}
const char* message_name(Message m) {
    switch (m) {
        case Message::DRUM: return "drum";
        case Message::NBFNET: return "nbfnet";
        case Message::REDGNN: return "redgnn";
    }
    return "?";
}
const char* nbf_combine_name(NbfCombine c) {
    return c == NbfCombine::Sum ? "sum" : "product";
}
const char* init_scheme_name(InitScheme i) {
    return i == InitScheme::Binary ? "binary" : "relational";
}
const char* readout_name(Readout r) { return r == Readout::Linear ? "linear" : "dot"; }

namespace {
template <typename E>
E parse_enum(const std::string& name, std::initializer_list<E> values,
             const char* (*to_name)(E), const char* what) {
    for (E v : values)
        if (name == to_name(v)) return v;
    throw ConfigError(std::string("unknown ") + what + " '" + name + "'");
}
} // namespace

Activation parse_activation(const std::string& s) {
    return parse_enum(s, {Activation::Identity, Activation::Relu, Activation::Tanh},
                      activation_name, "activation");
}
Aggregation parse_aggregation(const std::string& s) {
    return parse_enum(s, {Aggregation::Max, Aggregation::Mean, Aggregation::Sum},
                      aggregation_name, "aggregation");
}
Message parse_message(const std::string& s) {
    return parse_enum(s, {Message::DRUM, Message::NBFNET, Message::REDGNN}, message_name,
                      "message function");
}
NbfCombine parse_nbf_combine(const std::string& s) {
    return parse_enum(s, {NbfCombine::Sum, NbfCombine::Product}, nbf_combine_name,
                      "combine function");
}
InitScheme parse_init_scheme(const std::string& s) {
    return parse_enum(s, {InitScheme::Binary, InitScheme::Relational}, init_scheme_name,
                      "representation init");
}
Readout parse_readout(const std::string& s) {
    return parse_enum(s, {Readout::Linear, Readout::Dot}, readout_name, "readout");
}

void PredictorConfig::validate() const {
    if (layers < 1) throw ConfigError("layers must be >= 1");
    if (hidden_dim < 1) throw ConfigError("hidden_dim must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0))
        throw ConfigError("dropout must lie in [0, 1), got " + std::to_string(dropout));
}

// ---- parameters ------------------------------------------------------------

ParamLayout ParamLayout::compute(const PredictorConfig& cfg, int32_t n_relations) {
    cfg.validate();
    if (n_relations < 1) throw ConfigError("parameter layout needs >= 1 relation");
    const auto L = static_cast<int64_t>(cfg.layers);
    const auto d = static_cast<int64_t>(cfg.hidden_dim);
    const auto r = static_cast<int64_t>(n_relations);
    ParamLayout lay;
    int64_t at = 0;
    lay.rel_emb = at;
    at += L * r * d;
    lay.query_emb = at;
    at += r * d;
    if (cfg.mess == Message::NBFNET) {
        lay.nbf_w = at;
        at += L * d * d;
    }
    if (cfg.mess == Message::REDGNN) {
        lay.att_w1 = at;
        at += L * d * 3 * d;
        lay.att_w2 = at;
        at += L * d;
    }
    if (cfg.readout == Readout::Linear) {
        lay.readout_w = at;
        at += 2 * cfg.readout_width();
        lay.readout_b = at;
        at += 1;
    }
    lay.total = at;
    return lay;
}

PredictorParams PredictorParams::init(const PredictorConfig& cfg, int32_t n_relations,
                                      uint64_t seed) {
    PredictorParams p;
    p.cfg = cfg;
    p.n_relations = n_relations;
    p.layout = ParamLayout::compute(cfg, n_relations);
    p.flat.resize(static_cast<size_t>(p.layout.total));
    Rng rng(Rng::mix(seed, 0x70617261u)); // "para"
    const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.hidden_dim));
    for (double& v : p.flat) v = rng.uniform(-bound, bound);
    return p;
}

// ---- graph preprocessing ---------------------------------------------------

PredGraph PredGraph::build(const sampler::Subgraph& sub) {
    PredGraph pg;
    pg.n_entities = sub.n_entities();
    pg.n_edges = static_cast<int64_t>(sub.edges.size());
    if (sub.anchor < 0 || sub.anchor >= pg.n_entities)
        throw LogicError("subgraph anchor outside its entity list");

    auto group = [&](auto key_of, std::vector<int64_t>& offsets, std::vector<int64_t>& idx) {
        offsets.assign(static_cast<size_t>(pg.n_entities) + 1, 0);
        idx.resize(static_cast<size_t>(pg.n_edges));
        for (int64_t e = 0; e < pg.n_edges; ++e)
            offsets[static_cast<size_t>(key_of(sub.edges[static_cast<size_t>(e)])) + 1]++;
        for (size_t i = 1; i < offsets.size(); ++i) offsets[i] += offsets[i - 1];
        std::vector<int64_t> cursor(offsets.begin(), offsets.end() - 1);
        for (int64_t e = 0; e < pg.n_edges; ++e)
            idx[static_cast<size_t>(
                cursor[static_cast<size_t>(key_of(sub.edges[static_cast<size_t>(e)]))]++)] = e;
    };
    group([](const kg::Triple& t) { return t.tail; }, pg.in_offsets, pg.in_edges);

    std::vector<int64_t> out_offsets, out_idx;
    group([](const kg::Triple& t) { return t.head; }, out_offsets, out_idx);

    pg.level.assign(static_cast<size_t>(pg.n_entities), -1);
    std::deque<int32_t> queue;
    pg.level[static_cast<size_t>(sub.anchor)] = 0;
    queue.push_back(sub.anchor);
    while (!queue.empty()) {
        int32_t x = queue.front();
        queue.pop_front();
        for (int64_t at = out_offsets[static_cast<size_t>(x)];
             at < out_offsets[static_cast<size_t>(x) + 1]; ++at) {
            int32_t o = sub.edges[static_cast<size_t>(out_idx[static_cast<size_t>(at)])].tail;
            if (pg.level[static_cast<size_t>(o)] < 0) {
                pg.level[static_cast<size_t>(o)] = pg.level[static_cast<size_t>(x)] + 1;
                queue.push_back(o);
            }
        }
    }
    return pg;
}

// ---- forward ---------------------------------------------------------------

namespace {

inline double act_fn(Activation a, double z) {
    switch (a) {
        case Activation::Identity: return z;
        case Activation::Relu: return z > 0.0 ? z : 0.0;
        case Activation::Tanh: return std::tanh(z);
    }
    return z;
}

inline double act_grad(Activation a, double z) {
    switch (a) {
        case Activation::Identity: return 1.0;
        case Activation::Relu: return z > 0.0 ? 1.0 : 0.0;
        case Activation::Tanh: {
            double t = std::tanh(z);
            return 1.0 - t * t;
        }
    }
    return 1.0;
}

// out = W·x with W row-major (rows × cols)
inline void matvec(std::span<const double> w, std::span<const double> x, double* out,
                   int64_t rows, int64_t cols) {
    for (int64_t i = 0; i < rows; ++i) {
        double acc = 0.0;
        const double* row = w.data() + i * cols;
        for (int64_t j = 0; j < cols; ++j) acc += row[j] * x[static_cast<size_t>(j)];
        out[i] = acc;
    }
}

// out += Wᵀ·y
inline void matvec_t_add(std::span<const double> w, std::span<const double> y, double* out,
                         int64_t rows, int64_t cols) {
    for (int64_t i = 0; i < rows; ++i) {
        const double* row = w.data() + i * cols;
        const double yi = y[static_cast<size_t>(i)];
        if (yi == 0.0) continue;
        for (int64_t j = 0; j < cols; ++j) out[j] += row[j] * yi;
    }
}

struct LayerScratch {
    std::vector<double> wq;       // |R|·d query-modulated relation vectors (NBFNET)
    std::vector<char> wq_set;     // lazily filled per relation
    std::vector<double> msg;      // one message
    std::vector<double> cat;      // [h_x ‖ h_r ‖ h_q] (REDGNN)
    std::vector<double> hidden;   // ReLU(W1·cat) (REDGNN)
    std::vector<int64_t> counts;  // incoming active-edge counts
};

std::span<const double> query_modulated(const PredictorConfig& cfg,
                                        ParamView<const double> p, int layer, int32_t rel,
                                        int32_t query_rel, LayerScratch& s) {
    const auto d = static_cast<size_t>(cfg.hidden_dim);
    if (s.wq_set[static_cast<size_t>(rel)] == 0) {
        auto re = p.rel_emb(layer, rel);
        auto qe = p.query_emb(query_rel);
        double* dst = s.wq.data() + static_cast<size_t>(rel) * d;
        for (size_t j = 0; j < d; ++j) dst[j] = re[j] * qe[j];
        s.wq_set[static_cast<size_t>(rel)] = 1;
    }
    return {s.wq.data() + static_cast<size_t>(rel) * d, d};
}

double attention_score(const PredictorConfig& cfg, ParamView<const double> p, int layer,
                       int32_t rel, int32_t query_rel, std::span<const double> h_x,
                       LayerScratch& s, std::span<double>* hidden_out) {
    const auto d = static_cast<int64_t>(cfg.hidden_dim);
    auto re = p.rel_emb(layer, rel);
    auto qe = p.query_emb(query_rel);
    s.cat.resize(static_cast<size_t>(3 * d));
    std::copy(h_x.begin(), h_x.end(), s.cat.begin());
    std::copy(re.begin(), re.end(), s.cat.begin() + static_cast<size_t>(d));
    std::copy(qe.begin(), qe.end(), s.cat.begin() + static_cast<size_t>(2 * d));
    s.hidden.resize(static_cast<size_t>(d));
    matvec(p.att_w1(layer), s.cat, s.hidden.data(), d, 3 * d);
    for (double& v : s.hidden) v = v > 0.0 ? v : 0.0;
    auto w2 = p.att_w2(layer);
    double score = 0.0;
    for (int64_t j = 0; j < d; ++j) score += w2[static_cast<size_t>(j)] * s.hidden[static_cast<size_t>(j)];
    if (hidden_out) *hidden_out = {s.hidden.data(), static_cast<size_t>(d)};
    return score;
}

inline double sigmoid(double z) {
    return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

} // namespace

std::vector<double> init_representations(const sampler::Subgraph& sub, int32_t query_rel,
                                         const PredictorParams& params) {
    const auto n = static_cast<size_t>(sub.n_entities());
    const auto d = static_cast<size_t>(params.cfg.hidden_dim);
    if (query_rel < 0 || query_rel >= params.n_relations)
        throw ConfigError("query relation id outside the parameter table");
    std::vector<double> h0(n * d, 0.0);
    double* anchor_row = h0.data() + static_cast<size_t>(sub.anchor) * d;
    if (params.cfg.init == InitScheme::Binary) {
        std::fill(anchor_row, anchor_row + d, 1.0);
    } else {
        auto qe = params.view().query_emb(query_rel);
        std::copy(qe.begin(), qe.end(), anchor_row);
    }
    return h0;
}

void message_into(const PredictorConfig& cfg, ParamView<const double> p, int layer, int32_t rel,
                  int32_t query_rel, std::span<const double> h_x, std::span<double> out) {
    const auto d = static_cast<int64_t>(cfg.hidden_dim);
    if (static_cast<int64_t>(h_x.size()) != d || static_cast<int64_t>(out.size()) != d)
        throw ShapeError("message vectors must have length hidden_dim");
    switch (cfg.mess) {
        case Message::DRUM: {
            auto re = p.rel_emb(layer, rel);
            for (int64_t j = 0; j < d; ++j)
                out[static_cast<size_t>(j)] = h_x[static_cast<size_t>(j)] * re[static_cast<size_t>(j)];
            return;
        }
        case Message::NBFNET: {
            auto re = p.rel_emb(layer, rel);
            auto qe = p.query_emb(query_rel);
            std::vector<double> c(static_cast<size_t>(d));
            for (int64_t j = 0; j < d; ++j) {
                double wq = re[static_cast<size_t>(j)] * qe[static_cast<size_t>(j)];
                c[static_cast<size_t>(j)] = cfg.nbf_combine == NbfCombine::Sum
                                                ? h_x[static_cast<size_t>(j)] + wq
                                                : h_x[static_cast<size_t>(j)] * wq;
            }
            matvec(p.nbf_w(layer), c, out.data(), d, d);
            return;
        }
        case Message::REDGNN: {
            LayerScratch s;
            double alpha = sigmoid(attention_score(cfg, p, layer, rel, query_rel, h_x, s, nullptr));
            auto re = p.rel_emb(layer, rel);
            for (int64_t j = 0; j < d; ++j)
                out[static_cast<size_t>(j)] =
                    alpha * (h_x[static_cast<size_t>(j)] + re[static_cast<size_t>(j)]);
            return;
        }
    }
    throw LogicError("unknown message variant");
}

std::vector<double> forward(const sampler::Subgraph& sub, const PredGraph& pg, int32_t query_rel,
                            const PredictorParams& params, const ForwardOptions& opt,
                            ForwardState* state) {
    const PredictorConfig& cfg = params.cfg;
    cfg.validate();
    if (query_rel < 0 || query_rel >= params.n_relations)
        throw ConfigError("query relation id outside the parameter table");
    if (pg.n_entities != sub.n_entities() || pg.n_edges != static_cast<int64_t>(sub.edges.size()))
        throw ShapeError("prediction graph does not match the subgraph");
    const auto n = pg.n_entities;
    const auto d = static_cast<int64_t>(cfg.hidden_dim);
    const auto L = cfg.layers;
    auto p = params.view();

    ForwardState local;
    ForwardState& st = state ? *state : local;
    st.h.assign(static_cast<size_t>(L) + 1, {});
    st.pre_act.assign(static_cast<size_t>(L), {});
    st.mask.assign(static_cast<size_t>(L), {});
    st.argmax.assign(static_cast<size_t>(L), {});
    st.pre_w.assign(static_cast<size_t>(L), {});
    st.att.assign(static_cast<size_t>(L), {});

    st.h[0] = init_representations(sub, query_rel, params);

    const bool use_dropout = opt.training && cfg.dropout > 0.0;
    const bool nbf_factored =
        cfg.mess == Message::NBFNET && cfg.agg != Aggregation::Max;

    LayerScratch scratch;
    scratch.msg.resize(static_cast<size_t>(d));
    scratch.counts.assign(static_cast<size_t>(n), 0);
    if (cfg.mess == Message::NBFNET) {
        scratch.wq.assign(static_cast<size_t>(params.n_relations) * static_cast<size_t>(d), 0.0);
        scratch.wq_set.assign(static_cast<size_t>(params.n_relations), 0);
    }

    for (int layer = 0; layer < L; ++layer) {
        const std::vector<double>& h_prev = st.h[static_cast<size_t>(layer)];
        std::vector<double>& z = st.pre_act[static_cast<size_t>(layer)];
        z.assign(static_cast<size_t>(n * d), 0.0);
        std::fill(scratch.counts.begin(), scratch.counts.end(), 0);
        if (cfg.mess == Message::NBFNET)
            std::fill(scratch.wq_set.begin(), scratch.wq_set.end(), 0);
        if (cfg.agg == Aggregation::Max)
            st.argmax[static_cast<size_t>(layer)].assign(static_cast<size_t>(n * d), -1);
        if (cfg.mess == Message::REDGNN)
            st.att[static_cast<size_t>(layer)].assign(static_cast<size_t>(pg.n_edges), 0.0);

        auto active = [&](int64_t e) {
            int32_t lvl = pg.level[static_cast<size_t>(sub.edges[static_cast<size_t>(e)].head)];
            return lvl >= 0 && lvl <= layer;
        };

        if (nbf_factored) {
            // Z[o] = W·AGG(h_x ⊕ w_q): the transform commutes with sum/mean.
            std::vector<double>& t = st.pre_w[static_cast<size_t>(layer)];
            t.assign(static_cast<size_t>(n * d), 0.0);
            for (int32_t o = 0; o < n; ++o) {
                double* to = t.data() + static_cast<size_t>(o) * static_cast<size_t>(d);
                for (int64_t at = pg.in_offsets[static_cast<size_t>(o)];
                     at < pg.in_offsets[static_cast<size_t>(o) + 1]; ++at) {
                    int64_t e = pg.in_edges[static_cast<size_t>(at)];
                    if (!active(e)) continue;
                    const kg::Triple& edge = sub.edges[static_cast<size_t>(e)];
                    auto wq = query_modulated(cfg, p, layer, edge.rel, query_rel, scratch);
                    const double* hx =
                        h_prev.data() + static_cast<size_t>(edge.head) * static_cast<size_t>(d);
                    if (cfg.nbf_combine == NbfCombine::Sum)
                        for (int64_t j = 0; j < d; ++j) to[j] += hx[j] + wq[static_cast<size_t>(j)];
                    else
                        for (int64_t j = 0; j < d; ++j) to[j] += hx[j] * wq[static_cast<size_t>(j)];
                    scratch.counts[static_cast<size_t>(o)]++;
                }
                int64_t cnt = scratch.counts[static_cast<size_t>(o)];
                if (cnt == 0) continue;
                if (cfg.agg == Aggregation::Mean)
                    for (int64_t j = 0; j < d; ++j) to[j] /= static_cast<double>(cnt);
                matvec(p.nbf_w(layer), {to, static_cast<size_t>(d)},
                       z.data() + static_cast<size_t>(o) * static_cast<size_t>(d), d, d);
            }
        } else {
            for (int32_t o = 0; o < n; ++o) {
                double* zo = z.data() + static_cast<size_t>(o) * static_cast<size_t>(d);
                int64_t* am = cfg.agg == Aggregation::Max
                                  ? st.argmax[static_cast<size_t>(layer)].data() +
                                        static_cast<size_t>(o) * static_cast<size_t>(d)
                                  : nullptr;
                for (int64_t at = pg.in_offsets[static_cast<size_t>(o)];
                     at < pg.in_offsets[static_cast<size_t>(o) + 1]; ++at) {
                    int64_t e = pg.in_edges[static_cast<size_t>(at)];
                    if (!active(e)) continue;
                    const kg::Triple& edge = sub.edges[static_cast<size_t>(e)];
                    std::span<const double> hx{
                        h_prev.data() + static_cast<size_t>(edge.head) * static_cast<size_t>(d),
                        static_cast<size_t>(d)};
                    double* m = scratch.msg.data();
                    switch (cfg.mess) {
                        case Message::DRUM: {
                            auto re = p.rel_emb(layer, edge.rel);
                            for (int64_t j = 0; j < d; ++j)
                                m[j] = hx[static_cast<size_t>(j)] * re[static_cast<size_t>(j)];
                            break;
                        }
                        case Message::NBFNET: { // max aggregation only
                            auto wq = query_modulated(cfg, p, layer, edge.rel, query_rel, scratch);
                            std::vector<double> c(static_cast<size_t>(d));
                            if (cfg.nbf_combine == NbfCombine::Sum)
                                for (int64_t j = 0; j < d; ++j)
                                    c[static_cast<size_t>(j)] =
                                        hx[static_cast<size_t>(j)] + wq[static_cast<size_t>(j)];
                            else
                                for (int64_t j = 0; j < d; ++j)
                                    c[static_cast<size_t>(j)] =
                                        hx[static_cast<size_t>(j)] * wq[static_cast<size_t>(j)];
                            matvec(p.nbf_w(layer), c, m, d, d);
                            break;
                        }
                        case Message::REDGNN: {
                            double alpha = sigmoid(attention_score(cfg, p, layer, edge.rel,
                                                                   query_rel, hx, scratch, nullptr));
                            st.att[static_cast<size_t>(layer)][static_cast<size_t>(e)] = alpha;
                            auto re = p.rel_emb(layer, edge.rel);
                            for (int64_t j = 0; j < d; ++j)
                                m[j] = alpha * (hx[static_cast<size_t>(j)] +
                                                re[static_cast<size_t>(j)]);
                            break;
                        }
                    }
                    scratch.counts[static_cast<size_t>(o)]++;
                    switch (cfg.agg) {
                        case Aggregation::Sum:
                        case Aggregation::Mean:
                            for (int64_t j = 0; j < d; ++j) zo[j] += m[j];
                            break;
                        case Aggregation::Max:
                            // first message initializes; ties keep the earliest edge
                            for (int64_t j = 0; j < d; ++j)
                                if (am[j] < 0 || m[j] > zo[j]) {
                                    zo[j] = m[j];
                                    am[j] = e;
                                }
                            break;
                    }
                }
                if (cfg.agg == Aggregation::Mean && scratch.counts[static_cast<size_t>(o)] > 0)
                    for (int64_t j = 0; j < d; ++j)
                        zo[j] /= static_cast<double>(scratch.counts[static_cast<size_t>(o)]);
            }
        }

        // activation, inverted dropout, optional residual
        std::vector<double>& h_next = st.h[static_cast<size_t>(layer) + 1];
        h_next.assign(static_cast<size_t>(n * d), 0.0);
        if (use_dropout) {
            std::vector<double>& mask = st.mask[static_cast<size_t>(layer)];
            mask.resize(static_cast<size_t>(n * d));
            Rng rng(Rng::mix(opt.dropout_seed, static_cast<uint64_t>(layer) + 1, 0xD70u));
            const double keep_scale = 1.0 / (1.0 - cfg.dropout);
            for (size_t i = 0; i < mask.size(); ++i)
                mask[i] = rng.uniform01() < cfg.dropout ? 0.0 : keep_scale;
            for (int64_t i = 0; i < n * d; ++i)
                h_next[static_cast<size_t>(i)] =
                    act_fn(cfg.act, z[static_cast<size_t>(i)]) * mask[static_cast<size_t>(i)];
        } else {
            for (int64_t i = 0; i < n * d; ++i)
                h_next[static_cast<size_t>(i)] = act_fn(cfg.act, z[static_cast<size_t>(i)]);
        }
        if (cfg.shortcut)
            for (int64_t i = 0; i < n * d; ++i)
                h_next[static_cast<size_t>(i)] += h_prev[static_cast<size_t>(i)];
    }

    // readout
    const int64_t width = cfg.readout_width();
    auto rep_entry = [&](int32_t o, int64_t j) -> double {
        if (!cfg.concat) return st.h[static_cast<size_t>(L)][static_cast<size_t>(o) * static_cast<size_t>(d) + static_cast<size_t>(j)];
        int64_t layer = 1 + j / d;
        return st.h[static_cast<size_t>(layer)][static_cast<size_t>(o) * static_cast<size_t>(d) +
                                                static_cast<size_t>(j % d)];
    };
    std::vector<double> rep_u(static_cast<size_t>(width));
    for (int64_t j = 0; j < width; ++j) rep_u[static_cast<size_t>(j)] = rep_entry(sub.anchor, j);

    std::vector<double> logits(static_cast<size_t>(n), 0.0);
    if (cfg.readout == Readout::Dot) {
        for (int32_t o = 0; o < n; ++o) {
            double acc = 0.0;
            for (int64_t j = 0; j < width; ++j) acc += rep_entry(o, j) * rep_u[static_cast<size_t>(j)];
            logits[static_cast<size_t>(o)] = acc;
        }
    } else {
        auto w = p.readout_w();
        const double b = p.readout_b();
        double anchor_term = b;
        for (int64_t j = 0; j < width; ++j)
            anchor_term += w[static_cast<size_t>(width + j)] * rep_u[static_cast<size_t>(j)];
        for (int32_t o = 0; o < n; ++o) {
            double acc = anchor_term;
            for (int64_t j = 0; j < width; ++j) acc += w[static_cast<size_t>(j)] * rep_entry(o, j);
            logits[static_cast<size_t>(o)] = acc;
        }
    }
    st.logits = logits;
    return logits;
}

// ---- backward --------------------------------------------------------------

void backward(const sampler::Subgraph& sub, const PredGraph& pg, int32_t query_rel,
              const PredictorParams& params, const ForwardOptions& opt, const ForwardState& state,
              std::span<const double> dlogits, std::vector<double>& grad) {
    const PredictorConfig& cfg = params.cfg;
    const auto n = pg.n_entities;
    const auto d = static_cast<int64_t>(cfg.hidden_dim);
    const auto L = cfg.layers;
    if (static_cast<int64_t>(dlogits.size()) != n)
        throw ShapeError("dlogits length must equal the subgraph entity count");
    if (grad.size() != static_cast<size_t>(params.layout.total))
        throw ShapeError("gradient buffer does not match the parameter layout");
    auto p = params.view();
    ParamView<double> g(cfg, params.n_relations, params.layout, grad.data());
    const bool use_dropout = opt.training && cfg.dropout > 0.0;
    const bool nbf_factored = cfg.mess == Message::NBFNET && cfg.agg != Aggregation::Max;

    // dH accumulators per layer
    std::vector<std::vector<double>> dh(static_cast<size_t>(L) + 1,
                                        std::vector<double>(static_cast<size_t>(n * d), 0.0));

    const int64_t width = cfg.readout_width();
    auto rep_entry = [&](int32_t o, int64_t j) -> double {
        if (!cfg.concat)
            return state.h[static_cast<size_t>(L)][static_cast<size_t>(o) * static_cast<size_t>(d) +
                                                   static_cast<size_t>(j)];
        int64_t layer = 1 + j / d;
        return state.h[static_cast<size_t>(layer)][static_cast<size_t>(o) * static_cast<size_t>(d) +
                                                   static_cast<size_t>(j % d)];
    };
    auto drep_add = [&](int32_t o, int64_t j, double v) {
        if (!cfg.concat) {
            dh[static_cast<size_t>(L)][static_cast<size_t>(o) * static_cast<size_t>(d) +
                                       static_cast<size_t>(j)] += v;
            return;
        }
        int64_t layer = 1 + j / d;
        dh[static_cast<size_t>(layer)][static_cast<size_t>(o) * static_cast<size_t>(d) +
                                       static_cast<size_t>(j % d)] += v;
    };

    std::vector<double> rep_u(static_cast<size_t>(width));
    for (int64_t j = 0; j < width; ++j) rep_u[static_cast<size_t>(j)] = rep_entry(sub.anchor, j);

    if (cfg.readout == Readout::Dot) {
        for (int32_t o = 0; o < n; ++o) {
            const double go = dlogits[static_cast<size_t>(o)];
            if (go == 0.0) continue;
            for (int64_t j = 0; j < width; ++j) {
                drep_add(o, j, go * rep_u[static_cast<size_t>(j)]);
                drep_add(sub.anchor, j, go * rep_entry(o, j));
            }
        }
    } else {
        auto w = p.readout_w();
        auto gw = g.readout_w();
        double gsum = 0.0;
        for (int32_t o = 0; o < n; ++o) {
            const double go = dlogits[static_cast<size_t>(o)];
            gsum += go;
            if (go == 0.0) continue;
            for (int64_t j = 0; j < width; ++j) {
                gw[static_cast<size_t>(j)] += go * rep_entry(o, j);
                drep_add(o, j, go * w[static_cast<size_t>(j)]);
            }
        }
        for (int64_t j = 0; j < width; ++j) {
            gw[static_cast<size_t>(width + j)] += gsum * rep_u[static_cast<size_t>(j)];
            drep_add(sub.anchor, j, gsum * w[static_cast<size_t>(width + j)]);
        }
        g.readout_b() += gsum;
    }

    LayerScratch scratch;
    scratch.msg.resize(static_cast<size_t>(d));
    if (cfg.mess == Message::NBFNET) {
        scratch.wq.assign(static_cast<size_t>(params.n_relations) * static_cast<size_t>(d), 0.0);
        scratch.wq_set.assign(static_cast<size_t>(params.n_relations), 0);
    }
    std::vector<int64_t> counts(static_cast<size_t>(n), 0);
    std::vector<double> dz(static_cast<size_t>(n * d));
    std::vector<double> dm(static_cast<size_t>(d));
    std::vector<double> dc(static_cast<size_t>(d));

    for (int layer = L - 1; layer >= 0; --layer) {
        const std::vector<double>& h_prev = state.h[static_cast<size_t>(layer)];
        const std::vector<double>& z = state.pre_act[static_cast<size_t>(layer)];
        std::vector<double>& up = dh[static_cast<size_t>(layer) + 1];
        std::vector<double>& down = dh[static_cast<size_t>(layer)];

        if (cfg.shortcut)
            for (int64_t i = 0; i < n * d; ++i)
                down[static_cast<size_t>(i)] += up[static_cast<size_t>(i)];
        if (use_dropout) {
            const std::vector<double>& mask = state.mask[static_cast<size_t>(layer)];
            for (int64_t i = 0; i < n * d; ++i)
                dz[static_cast<size_t>(i)] = up[static_cast<size_t>(i)] *
                                             mask[static_cast<size_t>(i)] *
                                             act_grad(cfg.act, z[static_cast<size_t>(i)]);
        } else {
            for (int64_t i = 0; i < n * d; ++i)
                dz[static_cast<size_t>(i)] =
                    up[static_cast<size_t>(i)] * act_grad(cfg.act, z[static_cast<size_t>(i)]);
        }

        auto active = [&](int64_t e) {
            int32_t lvl = pg.level[static_cast<size_t>(sub.edges[static_cast<size_t>(e)].head)];
            return lvl >= 0 && lvl <= layer;
        };

        // recount active in-edges (needed by mean division)
        std::fill(counts.begin(), counts.end(), 0);
        for (int32_t o = 0; o < n; ++o)
            for (int64_t at = pg.in_offsets[static_cast<size_t>(o)];
                 at < pg.in_offsets[static_cast<size_t>(o) + 1]; ++at)
                if (active(pg.in_edges[static_cast<size_t>(at)])) counts[static_cast<size_t>(o)]++;

        if (cfg.mess == Message::NBFNET)
            std::fill(scratch.wq_set.begin(), scratch.wq_set.end(), 0);

        if (nbf_factored) {
            const std::vector<double>& t = state.pre_w[static_cast<size_t>(layer)];
            auto gW = g.nbf_w(layer);
            auto W = p.nbf_w(layer);
            for (int32_t o = 0; o < n; ++o) {
                if (counts[static_cast<size_t>(o)] == 0) continue;
                const double* dzo = dz.data() + static_cast<size_t>(o) * static_cast<size_t>(d);
                const double* to = t.data() + static_cast<size_t>(o) * static_cast<size_t>(d);
                // dW += dz_o ⊗ t_o ; dt_o = Wᵀ·dz_o
                for (int64_t i = 0; i < d; ++i) {
                    if (dzo[i] == 0.0) continue;
                    double* grow = gW.data() + i * d;
                    for (int64_t j = 0; j < d; ++j) grow[j] += dzo[i] * to[j];
                }
                std::fill(dc.begin(), dc.end(), 0.0);
                matvec_t_add(W, {dzo, static_cast<size_t>(d)}, dc.data(), d, d);
                double scale = cfg.agg == Aggregation::Mean
                                   ? 1.0 / static_cast<double>(counts[static_cast<size_t>(o)])
                                   : 1.0;
                // distribute dt_o to each active incoming edge's combine input
                for (int64_t at = pg.in_offsets[static_cast<size_t>(o)];
                     at < pg.in_offsets[static_cast<size_t>(o) + 1]; ++at) {
                    int64_t e = pg.in_edges[static_cast<size_t>(at)];
                    if (!active(e)) continue;
                    const kg::Triple& edge = sub.edges[static_cast<size_t>(e)];
                    const double* hx =
                        h_prev.data() + static_cast<size_t>(edge.head) * static_cast<size_t>(d);
                    double* dhx =
                        down.data() + static_cast<size_t>(edge.head) * static_cast<size_t>(d);
                    auto wq = query_modulated(cfg, p, layer, edge.rel, query_rel, scratch);
                    auto gre = g.rel_emb(layer, edge.rel);
                    auto gqe = g.query_emb(query_rel);
                    auto re = p.rel_emb(layer, edge.rel);
                    auto qe = p.query_emb(query_rel);
                    for (int64_t j = 0; j < d; ++j) {
                        double dcj = dc[static_cast<size_t>(j)] * scale;
                        if (dcj == 0.0) continue;
                        double dwq;
                        if (cfg.nbf_combine == NbfCombine::Sum) {
                            dhx[j] += dcj;
                            dwq = dcj;
                        } else {
                            dhx[j] += dcj * wq[static_cast<size_t>(j)];
                            dwq = dcj * hx[j];
                        }
                        gre[static_cast<size_t>(j)] += dwq * qe[static_cast<size_t>(j)];
                        gqe[static_cast<size_t>(j)] += dwq * re[static_cast<size_t>(j)];
                    }
                }
            }
        } else {
            const std::vector<int64_t>* am = cfg.agg == Aggregation::Max
                                                 ? &state.argmax[static_cast<size_t>(layer)]
                                                 : nullptr;
            for (int32_t o = 0; o < n; ++o) {
                if (counts[static_cast<size_t>(o)] == 0) continue;
                const double* dzo = dz.data() + static_cast<size_t>(o) * static_cast<size_t>(d);
                const double inv_cnt =
                    cfg.agg == Aggregation::Mean
                        ? 1.0 / static_cast<double>(counts[static_cast<size_t>(o)])
                        : 1.0;
                for (int64_t at = pg.in_offsets[static_cast<size_t>(o)];
                     at < pg.in_offsets[static_cast<size_t>(o) + 1]; ++at) {
                    int64_t e = pg.in_edges[static_cast<size_t>(at)];
                    if (!active(e)) continue;
                    const kg::Triple& edge = sub.edges[static_cast<size_t>(e)];
                    // dm = gradient reaching this edge's message
                    bool any = false;
                    if (cfg.agg == Aggregation::Max) {
                        const int64_t* amo = am->data() + static_cast<size_t>(o) * static_cast<size_t>(d);
                        for (int64_t j = 0; j < d; ++j) {
                            dm[static_cast<size_t>(j)] = amo[j] == e ? dzo[j] : 0.0;
                            any = any || dm[static_cast<size_t>(j)] != 0.0;
                        }
                    } else {
                        for (int64_t j = 0; j < d; ++j) {
                            dm[static_cast<size_t>(j)] = dzo[j] * inv_cnt;
                            any = any || dm[static_cast<size_t>(j)] != 0.0;
                        }
                    }
                    if (!any) continue;
                    const double* hx =
                        h_prev.data() + static_cast<size_t>(edge.head) * static_cast<size_t>(d);
                    double* dhx =
                        down.data() + static_cast<size_t>(edge.head) * static_cast<size_t>(d);
                    switch (cfg.mess) {
                        case Message::DRUM: {
                            auto re = p.rel_emb(layer, edge.rel);
                            auto gre = g.rel_emb(layer, edge.rel);
                            for (int64_t j = 0; j < d; ++j) {
                                dhx[j] += dm[static_cast<size_t>(j)] * re[static_cast<size_t>(j)];
                                gre[static_cast<size_t>(j)] += dm[static_cast<size_t>(j)] * hx[j];
                            }
                            break;
                        }
                        case Message::NBFNET: { // max aggregation path
                            auto wq = query_modulated(cfg, p, layer, edge.rel, query_rel, scratch);
                            std::vector<double> c(static_cast<size_t>(d));
                            if (cfg.nbf_combine == NbfCombine::Sum)
                                for (int64_t j = 0; j < d; ++j)
                                    c[static_cast<size_t>(j)] = hx[j] + wq[static_cast<size_t>(j)];
                            else
                                for (int64_t j = 0; j < d; ++j)
                                    c[static_cast<size_t>(j)] = hx[j] * wq[static_cast<size_t>(j)];
                            auto W = p.nbf_w(layer);
                            auto gW = g.nbf_w(layer);
                            for (int64_t i = 0; i < d; ++i) {
                                if (dm[static_cast<size_t>(i)] == 0.0) continue;
                                double* grow = gW.data() + i * d;
                                for (int64_t j = 0; j < d; ++j)
                                    grow[j] += dm[static_cast<size_t>(i)] * c[static_cast<size_t>(j)];
                            }
                            std::fill(dc.begin(), dc.end(), 0.0);
                            matvec_t_add(W, dm, dc.data(), d, d);
                            auto re = p.rel_emb(layer, edge.rel);
                            auto qe = p.query_emb(query_rel);
                            auto gre = g.rel_emb(layer, edge.rel);
                            auto gqe = g.query_emb(query_rel);
                            for (int64_t j = 0; j < d; ++j) {
                                double dcj = dc[static_cast<size_t>(j)];
                                if (dcj == 0.0) continue;
                                double dwq;
                                if (cfg.nbf_combine == NbfCombine::Sum) {
                                    dhx[j] += dcj;
                                    dwq = dcj;
                                } else {
                                    dhx[j] += dcj * wq[static_cast<size_t>(j)];
                                    dwq = dcj * hx[j];
                                }
                                gre[static_cast<size_t>(j)] += dwq * qe[static_cast<size_t>(j)];
                                gqe[static_cast<size_t>(j)] += dwq * re[static_cast<size_t>(j)];
                            }
                            break;
                        }
                        case Message::REDGNN: {
                            const double alpha =
                                state.att[static_cast<size_t>(layer)][static_cast<size_t>(e)];
                            auto re = p.rel_emb(layer, edge.rel);
                            auto gre = g.rel_emb(layer, edge.rel);
                            // m = α·(h_x + h_r)
                            double dalpha = 0.0;
                            for (int64_t j = 0; j < d; ++j) {
                                double mj = dm[static_cast<size_t>(j)];
                                dalpha += mj * (hx[j] + re[static_cast<size_t>(j)]);
                                dhx[j] += mj * alpha;
                                gre[static_cast<size_t>(j)] += mj * alpha;
                            }
                            // α = σ(s); s = w2ᵀ·relu(W1·[h_x ‖ h_r ‖ h_q])
                            double ds = dalpha * alpha * (1.0 - alpha);
                            if (ds == 0.0) break;
                            std::span<double> hidden;
                            attention_score(cfg, p, layer, edge.rel, query_rel,
                                            {hx, static_cast<size_t>(d)}, scratch, &hidden);
                            auto w2 = p.att_w2(layer);
                            auto gw2 = g.att_w2(layer);
                            auto W1 = p.att_w1(layer);
                            auto gW1 = g.att_w1(layer);
                            auto gqe = g.query_emb(query_rel);
                            for (int64_t i = 0; i < d; ++i) {
                                gw2[static_cast<size_t>(i)] += ds * hidden[static_cast<size_t>(i)];
                                double du = ds * w2[static_cast<size_t>(i)];
                                if (hidden[static_cast<size_t>(i)] <= 0.0) continue; // relu gate
                                const double* w1row = W1.data() + i * 3 * d;
                                double* gw1row = gW1.data() + i * 3 * d;
                                for (int64_t j = 0; j < 3 * d; ++j)
                                    gw1row[j] += du * scratch.cat[static_cast<size_t>(j)];
                                for (int64_t j = 0; j < d; ++j) {
                                    dhx[j] += du * w1row[j];
                                    gre[static_cast<size_t>(j)] += du * w1row[d + j];
                                    gqe[static_cast<size_t>(j)] += du * w1row[2 * d + j];
                                }
                            }
                            break;
                        }
                    }
                }
            }
        }
    }

    // H^(0) depends on parameters only through relational init.
    if (cfg.init == InitScheme::Relational) {
        auto gqe = g.query_emb(query_rel);
        const double* d0 =
            dh[0].data() + static_cast<size_t>(sub.anchor) * static_cast<size_t>(d);
        for (int64_t j = 0; j < d; ++j) gqe[static_cast<size_t>(j)] += d0[j];
    }
}

// ---- checkpoints -----------------------------------------------------------

namespace {

json config_to_json(const PredictorConfig& c) {
    json j;
    j["layers"] = c.layers;
    j["hidden_dim"] = c.hidden_dim;
    j["dropout"] = c.dropout;
    j["act"] = activation_name(c.act);
    j["agg"] = aggregation_name(c.agg);
    j["mess"] = message_name(c.mess);
    j["nbf_combine"] = nbf_combine_name(c.nbf_combine);
    j["init"] = init_scheme_name(c.init);
    j["shortcut"] = c.shortcut;
    j["concat"] = c.concat;
    j["readout"] = readout_name(c.readout);
    return j;
}

PredictorConfig config_from_json(const json& j) {
    PredictorConfig c;
    c.layers = j.at("layers").get<int>();
    c.hidden_dim = j.at("hidden_dim").get<int>();
    c.dropout = j.at("dropout").get<double>();
    c.act = parse_activation(j.at("act").get<std::string>());
    c.agg = parse_aggregation(j.at("agg").get<std::string>());
    c.mess = parse_message(j.at("mess").get<std::string>());
    c.nbf_combine = parse_nbf_combine(j.at("nbf_combine").get<std::string>());
    c.init = parse_init_scheme(j.at("init").get<std::string>());
    c.shortcut = j.at("shortcut").get<bool>();
    c.concat = j.at("concat").get<bool>();
    c.readout = parse_readout(j.at("readout").get<std::string>());
    return c;
}

struct Segment {
    const char* key;
    int64_t offset;
    int64_t count;
};

std::vector<Segment> segments_of(const PredictorParams& p) {
    const auto L = static_cast<int64_t>(p.cfg.layers);
    const auto d = static_cast<int64_t>(p.cfg.hidden_dim);
    const auto r = static_cast<int64_t>(p.n_relations);
    std::vector<Segment> segs;
    segs.push_back({"relation_embeddings", p.layout.rel_emb, L * r * d});
    segs.push_back({"query_embeddings", p.layout.query_emb, r * d});
    if (p.layout.nbf_w >= 0) segs.push_back({"message_weights", p.layout.nbf_w, L * d * d});
    if (p.layout.att_w1 >= 0) {
        segs.push_back({"attention_w1", p.layout.att_w1, L * d * 3 * d});
        segs.push_back({"attention_w2", p.layout.att_w2, L * d});
    }
    if (p.layout.readout_w >= 0) {
        segs.push_back({"readout_weights", p.layout.readout_w, 2 * p.cfg.readout_width()});
        segs.push_back({"readout_bias", p.layout.readout_b, 1});
    }
    return segs;
}

} // namespace

void save_checkpoint(const PredictorParams& params, const std::filesystem::path& path) {
    json j;
    j["format"] = "oss.checkpoint";
    j["version"] = 1;
    j["config"] = config_to_json(params.cfg);
    j["n_relations"] = params.n_relations;
    json segs;
    for (const Segment& s : segments_of(params)) {
        json arr = json::array();
        for (int64_t i = 0; i < s.count; ++i)
            arr.push_back(params.flat[static_cast<size_t>(s.offset + i)]);
        segs[s.key] = std::move(arr);
    }
    j["segments"] = std::move(segs);
    std::vector<uint8_t> bytes = json::to_cbor(j);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw LoadError("cannot write checkpoint " + path.string());
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw LoadError("short write on checkpoint " + path.string());
}

PredictorParams load_checkpoint(const std::filesystem::path& path, int32_t expected_relations) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw LoadError("cannot open checkpoint " + path.string());
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                               std::istreambuf_iterator<char>());
    json j = json::from_cbor(bytes, true, false);
    if (j.is_discarded() || !j.is_object() || j.value("format", "") != "oss.checkpoint")
        throw ParseError(path.string() + " is not a checkpoint");
    if (j.value("version", -1) != 1)
        throw ParseError("unsupported checkpoint version in " + path.string());
    PredictorParams p;
    try {
        p.cfg = config_from_json(j.at("config"));
        p.n_relations = j.at("n_relations").get<int32_t>();
    } catch (const json::exception& e) {
        throw ParseError(std::string("malformed checkpoint: ") + e.what());
    }
    if (expected_relations >= 0 && p.n_relations != expected_relations)
        throw ShapeError("checkpoint was trained with " + std::to_string(p.n_relations) +
                         " relations but the graph has " + std::to_string(expected_relations));
    p.layout = ParamLayout::compute(p.cfg, p.n_relations);
    p.flat.assign(static_cast<size_t>(p.layout.total), 0.0);
    const json& segs = j.at("segments");
    for (const Segment& s : segments_of(p)) {
        if (!segs.contains(s.key))
            throw ParseError(std::string("checkpoint is missing segment '") + s.key + "'");
        const json& arr = segs.at(s.key);
        if (!arr.is_array() || static_cast<int64_t>(arr.size()) != s.count)
            throw ShapeError(std::string("checkpoint segment '") + s.key +
                             "' has the wrong length");
        for (int64_t i = 0; i < s.count; ++i)
            p.flat[static_cast<size_t>(s.offset + i)] = arr[static_cast<size_t>(i)].get<double>();
    }
    return p;
}

} // namespace oss::predictor
