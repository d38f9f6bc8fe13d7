// Command-line entry point wiring every module: dataset preparation,
// subgraph inspection, coverage benchmarking, training, evaluation,
// extrapolation sweeps, and two-stage hyperparameter search.
//
// Configuration precedence: built-in defaults < --config FILE < explicit
// flags. The resolved configuration is echoed to stdout and, whenever an
// output directory is given, persisted as <out>/config.json; re-running a
// subcommand from that file alone reproduces the run bit-for-bit.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "oss/errors.hpp"
#include "oss/evaluation.hpp"
#include "oss/kg.hpp"
#include "oss/predictor.hpp"
#include "oss/rng.hpp"
#include "oss/sampler.hpp"
#include "oss/search.hpp"
#include "oss/training.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace oss;

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct SearchSettings {
    int predictor_budget = 20;
    int sampler_budget = 20;
    int warm_start = 5;
    int n_candidates = 512;
    int trial_epochs = 3;
    bool per_relation = false;
};

/// Subcommand-scoped settings, persisted under "run" so that a saved config
/// file fully determines the run.
struct RunSettings {
    std::string command;
    std::string dataset;
    std::string checkpoint;
    std::string head;
    std::string relation;
    std::string split = "test";
    std::vector<std::string> heuristics{"rand", "pr", "rw", "bfs", "ppr"};
    std::vector<double> ratios{0.1, 0.2, 0.5};
    std::vector<double> entity_ratios{0.05, 0.1, 0.2, 0.5};
    std::vector<double> edge_ratios{0.1, 0.2, 0.5, 1.0};
    bool resume = false;
};

struct CliConfig {
    uint64_t seed = 0;
    int threads = 1;
    sampler::SamplerConfig sampler;
    predictor::PredictorConfig predictor;
    training::TrainConfig train;
    SearchSettings search;
    RunSettings run;
};

// ---------------------------------------------------------------------------
// Strict JSON (de)serialization
// ---------------------------------------------------------------------------

void check_keys(const ordered_json& j, const std::string& prefix,
                std::initializer_list<const char*> allowed) {
    const std::string where = prefix.empty() ? "top level" : "section '" + prefix + "'";
    if (!j.is_object()) throw ConfigError("config " + where + " must be a JSON object");
    for (const auto& item : j.items()) {
        bool known = false;
        for (const char* a : allowed)
            if (item.key() == a) {
                known = true;
                break;
            }
        if (!known)
            throw ConfigError("unknown config key '" +
                              (prefix.empty() ? item.key() : prefix + "." + item.key()) + "'");
    }
}

template <typename T>
void get_if(const ordered_json& j, const std::string& prefix, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        j.at(key).get_to(out);
    } catch (const ordered_json::exception& e) {
        throw ConfigError("config key '" + prefix + "." + key + "': " + e.what());
    }
}

/// Reads a string-valued key and runs it through a parse_* function, naming
/// the key in any complaint.
template <typename Parse>
void get_enum_if(const ordered_json& j, const std::string& prefix, const char* key, Parse parse,
                 auto& out) {
    if (!j.contains(key)) return;
    std::string text;
    get_if(j, prefix, key, text);
    try {
        out = parse(text);
    } catch (const ConfigError& e) {
        throw ConfigError("config key '" + prefix + "." + key + "': " + e.what());
    }
}

void get_ratio_map_if(const ordered_json& j, const std::string& prefix, const char* key,
                      std::map<int32_t, double>& out) {
    if (!j.contains(key)) return;
    const auto& obj = j.at(key);
    if (!obj.is_object())
        throw ConfigError("config key '" + prefix + "." + key +
                          "': must be an object of relation id -> ratio");
    out.clear();
    for (const auto& item : obj.items()) {
        const std::string& name = item.key();
        if (name.empty() || !std::all_of(name.begin(), name.end(),
                                         [](unsigned char c) { return std::isdigit(c); }))
            throw ConfigError("config key '" + prefix + "." + key + "': relation key '" + name +
                              "' is not a numeric id");
        double v = 0;
        try {
            item.value().get_to(v);
        } catch (const ordered_json::exception& e) {
            throw ConfigError("config key '" + prefix + "." + key + "." + name + "': " + e.what());
        }
        out[static_cast<int32_t>(std::stol(name))] = v;
    }
}

void load_sampler(const ordered_json& j, sampler::SamplerConfig& cfg) {
    check_keys(j, "sampler",
               {"heuristic", "alpha", "max_iters", "tol", "orientation", "entity_ratio",
                "edge_ratio", "entity_ratios", "edge_ratios", "rw_walks", "rw_length"});
    get_enum_if(j, "sampler", "heuristic", sampler::parse_heuristic, cfg.heuristic);
    get_if(j, "sampler", "alpha", cfg.alpha);
    get_if(j, "sampler", "max_iters", cfg.max_iters);
    get_if(j, "sampler", "tol", cfg.tol);
    get_enum_if(j, "sampler", "orientation", sampler::parse_orientation, cfg.orientation);
    get_if(j, "sampler", "entity_ratio", cfg.entity_ratio_default);
    get_if(j, "sampler", "edge_ratio", cfg.edge_ratio_default);
    get_ratio_map_if(j, "sampler", "entity_ratios", cfg.entity_ratio);
    get_ratio_map_if(j, "sampler", "edge_ratios", cfg.edge_ratio);
    get_if(j, "sampler", "rw_walks", cfg.rw_walks);
    get_if(j, "sampler", "rw_length", cfg.rw_length);
}

ordered_json dump_sampler(const sampler::SamplerConfig& cfg) {
    ordered_json j;
    j["heuristic"] = sampler::heuristic_name(cfg.heuristic);
    j["alpha"] = cfg.alpha;
    j["max_iters"] = cfg.max_iters;
    j["tol"] = cfg.tol;
    j["orientation"] = sampler::orientation_name(cfg.orientation);
    j["entity_ratio"] = cfg.entity_ratio_default;
    j["edge_ratio"] = cfg.edge_ratio_default;
    ordered_json em = ordered_json::object(), gm = ordered_json::object();
    for (const auto& [rel, v] : cfg.entity_ratio) em[std::to_string(rel)] = v;
    for (const auto& [rel, v] : cfg.edge_ratio) gm[std::to_string(rel)] = v;
    j["entity_ratios"] = em;
    j["edge_ratios"] = gm;
    j["rw_walks"] = cfg.rw_walks;
    j["rw_length"] = cfg.rw_length;
    return j;
}

void load_predictor(const ordered_json& j, predictor::PredictorConfig& cfg) {
    check_keys(j, "predictor",
               {"layers", "hidden_dim", "dropout", "activation", "aggregation", "message",
                "nbf_combine", "init", "shortcut", "concat", "readout"});
    get_if(j, "predictor", "layers", cfg.layers);
    get_if(j, "predictor", "hidden_dim", cfg.hidden_dim);
    get_if(j, "predictor", "dropout", cfg.dropout);
    get_enum_if(j, "predictor", "activation", predictor::parse_activation, cfg.act);
    get_enum_if(j, "predictor", "aggregation", predictor::parse_aggregation, cfg.agg);
    get_enum_if(j, "predictor", "message", predictor::parse_message, cfg.mess);
    get_enum_if(j, "predictor", "nbf_combine", predictor::parse_nbf_combine, cfg.nbf_combine);
    get_enum_if(j, "predictor", "init", predictor::parse_init_scheme, cfg.init);
    get_if(j, "predictor", "shortcut", cfg.shortcut);
    get_if(j, "predictor", "concat", cfg.concat);
    get_enum_if(j, "predictor", "readout", predictor::parse_readout, cfg.readout);
}

ordered_json dump_predictor(const predictor::PredictorConfig& cfg) {
    ordered_json j;
    j["layers"] = cfg.layers;
    j["hidden_dim"] = cfg.hidden_dim;
    j["dropout"] = cfg.dropout;
    j["activation"] = predictor::activation_name(cfg.act);
    j["aggregation"] = predictor::aggregation_name(cfg.agg);
    j["message"] = predictor::message_name(cfg.mess);
    j["nbf_combine"] = predictor::nbf_combine_name(cfg.nbf_combine);
    j["init"] = predictor::init_scheme_name(cfg.init);
    j["shortcut"] = cfg.shortcut;
    j["concat"] = cfg.concat;
    j["readout"] = predictor::readout_name(cfg.readout);
    return j;
}

void load_train(const ordered_json& j, training::TrainConfig& cfg) {
    check_keys(j, "train",
               {"epochs", "batch_size", "learning_rate", "weight_decay", "optimizer", "beta1",
                "beta2", "eps", "grad_clip", "split_fraction"});
    get_if(j, "train", "epochs", cfg.epochs);
    get_if(j, "train", "batch_size", cfg.batch_size);
    get_if(j, "train", "learning_rate", cfg.learning_rate);
    get_if(j, "train", "weight_decay", cfg.weight_decay);
    get_enum_if(j, "train", "optimizer", training::parse_optimizer, cfg.optimizer);
    get_if(j, "train", "beta1", cfg.beta1);
    get_if(j, "train", "beta2", cfg.beta2);
    get_if(j, "train", "eps", cfg.eps);
    get_if(j, "train", "grad_clip", cfg.grad_clip);
    get_if(j, "train", "split_fraction", cfg.split_fraction);
}

ordered_json dump_train(const training::TrainConfig& cfg) {
    ordered_json j;
    j["epochs"] = cfg.epochs;
    j["batch_size"] = cfg.batch_size;
    j["learning_rate"] = cfg.learning_rate;
    j["weight_decay"] = cfg.weight_decay;
    j["optimizer"] = training::optimizer_name(cfg.optimizer);
    j["beta1"] = cfg.beta1;
    j["beta2"] = cfg.beta2;
    j["eps"] = cfg.eps;
    j["grad_clip"] = cfg.grad_clip;
    j["split_fraction"] = cfg.split_fraction;
    return j;
}

void load_search(const ordered_json& j, SearchSettings& cfg) {
    check_keys(j, "search",
               {"predictor_budget", "sampler_budget", "warm_start", "n_candidates",
                "trial_epochs", "per_relation"});
    get_if(j, "search", "predictor_budget", cfg.predictor_budget);
    get_if(j, "search", "sampler_budget", cfg.sampler_budget);
    get_if(j, "search", "warm_start", cfg.warm_start);
    get_if(j, "search", "n_candidates", cfg.n_candidates);
    get_if(j, "search", "trial_epochs", cfg.trial_epochs);
    get_if(j, "search", "per_relation", cfg.per_relation);
}

ordered_json dump_search(const SearchSettings& cfg) {
    ordered_json j;
    j["predictor_budget"] = cfg.predictor_budget;
    j["sampler_budget"] = cfg.sampler_budget;
    j["warm_start"] = cfg.warm_start;
    j["n_candidates"] = cfg.n_candidates;
    j["trial_epochs"] = cfg.trial_epochs;
    j["per_relation"] = cfg.per_relation;
    return j;
}

void load_run(const ordered_json& j, RunSettings& cfg) {
    check_keys(j, "run",
               {"command", "dataset", "checkpoint", "head", "relation", "split", "heuristics",
                "ratios", "entity_ratios", "edge_ratios", "resume"});
    get_if(j, "run", "command", cfg.command);
    get_if(j, "run", "dataset", cfg.dataset);
    get_if(j, "run", "checkpoint", cfg.checkpoint);
    get_if(j, "run", "head", cfg.head);
    get_if(j, "run", "relation", cfg.relation);
    get_if(j, "run", "split", cfg.split);
    get_if(j, "run", "heuristics", cfg.heuristics);
    get_if(j, "run", "ratios", cfg.ratios);
    get_if(j, "run", "entity_ratios", cfg.entity_ratios);
    get_if(j, "run", "edge_ratios", cfg.edge_ratios);
    get_if(j, "run", "resume", cfg.resume);
}

ordered_json dump_run(const RunSettings& cfg) {
    ordered_json j;
    j["command"] = cfg.command;
    j["dataset"] = cfg.dataset;
    j["checkpoint"] = cfg.checkpoint;
    j["head"] = cfg.head;
    j["relation"] = cfg.relation;
    j["split"] = cfg.split;
    j["heuristics"] = cfg.heuristics;
    j["ratios"] = cfg.ratios;
    j["entity_ratios"] = cfg.entity_ratios;
    j["edge_ratios"] = cfg.edge_ratios;
    j["resume"] = cfg.resume;
    return j;
}

CliConfig load_config_json(const ordered_json& j) {
    check_keys(j, "", {"version", "seed", "threads", "sampler", "predictor", "train", "search",
                       "run"});
    if (j.contains("version")) {
        int version = 0;
        get_if(j, "", "version", version);
        if (version != 1)
            throw ConfigError("config key 'version': unsupported value " +
                              std::to_string(version));
    }
    CliConfig cfg;
    get_if(j, "", "seed", cfg.seed);
    get_if(j, "", "threads", cfg.threads);
    if (j.contains("sampler")) load_sampler(j.at("sampler"), cfg.sampler);
    if (j.contains("predictor")) load_predictor(j.at("predictor"), cfg.predictor);
    if (j.contains("train")) load_train(j.at("train"), cfg.train);
    if (j.contains("search")) load_search(j.at("search"), cfg.search);
    if (j.contains("run")) load_run(j.at("run"), cfg.run);
    return cfg;
}

CliConfig load_config_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open config file '" + path.string() + "'");
    ordered_json j;
    try {
        in >> j;
    } catch (const ordered_json::exception& e) {
        throw ParseError("config file '" + path.string() + "': " + e.what());
    }
    return load_config_json(j);
}

/// Applies one `--set a.b.c=VALUE` override onto the config document. VALUE
/// is parsed as JSON when possible, and taken as a bare string otherwise.
void apply_set(ordered_json& doc, const std::string& kv) {
    const size_t eq = kv.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("--set expects KEY=VALUE, got '" + kv + "'");
    const std::string path = kv.substr(0, eq);
    const std::string text = kv.substr(eq + 1);
    ordered_json value;
    try {
        value = ordered_json::parse(text);
    } catch (const ordered_json::exception&) {
        value = text;
    }
    ordered_json* node = &doc;
    size_t start = 0;
    while (true) {
        const size_t dot = path.find('.', start);
        const std::string key =
            path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (key.empty()) throw ConfigError("--set key '" + path + "' has an empty segment");
        if (dot == std::string::npos) {
            (*node)[key] = value;
            break;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

ordered_json dump_config(const CliConfig& cfg) {
    ordered_json j;
    j["version"] = 1;
    j["seed"] = cfg.seed;
    j["threads"] = cfg.threads;
    j["sampler"] = dump_sampler(cfg.sampler);
    j["predictor"] = dump_predictor(cfg.predictor);
    j["train"] = dump_train(cfg.train);
    j["search"] = dump_search(cfg.search);
    j["run"] = dump_run(cfg.run);
    return j;
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

/// Validates everything, syncs the global seed/thread knobs into the module
/// configs, echoes the resolved config, and persists it when an output
/// directory is given.
void finalize_and_emit(CliConfig& cfg, const std::string& out_dir) {
    if (cfg.threads < 1) throw ConfigError("config key 'threads': must be >= 1");
    cfg.sampler.seed = cfg.seed;
    cfg.train.seed = cfg.seed;
    cfg.train.threads = cfg.threads;
    cfg.sampler.validate();
    cfg.predictor.validate();
    cfg.train.validate();
    if (cfg.search.predictor_budget < 1)
        throw ConfigError("config key 'search.predictor_budget': must be >= 1");
    if (cfg.search.sampler_budget < 1)
        throw ConfigError("config key 'search.sampler_budget': must be >= 1");
    if (cfg.search.warm_start < 0)
        throw ConfigError("config key 'search.warm_start': must be >= 0");
    if (cfg.search.n_candidates < 1)
        throw ConfigError("config key 'search.n_candidates': must be >= 1");
    if (cfg.search.trial_epochs < 1)
        throw ConfigError("config key 'search.trial_epochs': must be >= 1");

    const ordered_json doc = dump_config(cfg);
    std::cout << "config: " << doc.dump() << "\n";
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        const fs::path path = fs::path(out_dir) / "config.json";
        std::ofstream out(path);
        if (!out) throw LoadError("cannot write '" + path.string() + "'");
        out << doc.dump(2) << "\n";
        std::cout << "config written: " << path.string() << "\n";
    }
}

kg::KnowledgeGraph load_graph(const CliConfig& cfg, bool augment) {
    if (cfg.run.dataset.empty())
        throw ConfigError("config key 'run.dataset': a dataset directory is required "
                          "(--dataset DIR)");
    kg::KnowledgeGraph g = kg::load_dataset(cfg.run.dataset);
    if (augment) g = kg::augment_inverse(g);
    return g;
}

kg::Split parse_split(const std::string& s) {
    for (kg::Split sp : {kg::Split::Train, kg::Split::Valid, kg::Split::Test})
        if (s == kg::split_name(sp)) return sp;
    throw ConfigError("config key 'run.split': unknown split '" + s + "' (train|valid|test)");
}

bool all_digits(const std::string& s) {
    return !s.empty() &&
           std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); });
}

int32_t resolve_name(const kg::Vocab& vocab, const std::string& text, const char* what,
                     const char* key) {
    const int32_t id = vocab.find(text);
    if (id >= 0) return id;
    if (all_digits(text)) {
        const long v = std::stol(text);
        if (v >= 0 && v < vocab.size()) return static_cast<int32_t>(v);
    }
    throw ConfigError(std::string("config key '") + key + "': unknown " + what + " '" + text +
                      "'");
}

std::vector<double> checked_ratios(const std::vector<double>& values, const char* key) {
    if (values.empty())
        throw ConfigError(std::string("config key '") + key + "': needs at least one ratio");
    for (double r : values)
        if (!(r > 0.0 && r <= 1.0))
            throw ConfigError(std::string("config key '") + key + "': ratio " +
                              std::to_string(r) + " outside (0, 1]");
    return values;
}

/// Shortest-round-trip decimal text for exact reload comparisons.
std::string full_precision(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

std::string format_ratio(double r) {
    std::ostringstream os;
    os << r;
    return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw LoadError("cannot write '" + path.string() + "'");
    out << text;
}

// Log-scaled degree buckets: 0, 1, 2, 3-4, 5-8, 9-16, ...
struct Bucket {
    int64_t lo = 0;
    int64_t hi = 0;
    int64_t count = 0;
};

std::vector<Bucket> bucketize(const std::vector<int64_t>& values) {
    std::vector<Bucket> buckets;
    buckets.push_back({0, 0, 0});
    buckets.push_back({1, 1, 0});
    buckets.push_back({2, 2, 0});
    int64_t lo = 3, hi = 4;
    const int64_t max_v = values.empty() ? 0 : *std::max_element(values.begin(), values.end());
    while (lo <= max_v) {
        buckets.push_back({lo, hi, 0});
        lo = hi + 1;
        hi *= 2;
    }
    for (int64_t v : values)
        for (auto& b : buckets)
            if (v >= b.lo && v <= b.hi) {
                ++b.count;
                break;
            }
    while (!buckets.empty() && buckets.back().count == 0) buckets.pop_back();
    return buckets;
}

void print_histogram(const std::string& title, const std::vector<Bucket>& buckets,
                     int64_t unreachable = 0) {
    std::cout << title << "\n";
    int64_t max_count = unreachable;
    for (const auto& b : buckets) max_count = std::max(max_count, b.count);
    auto bar = [&](int64_t count) {
        const int width = max_count == 0
                              ? 0
                              : static_cast<int>((40 * count + max_count - 1) / max_count);
        return std::string(static_cast<size_t>(width), '#');
    };
    for (const auto& b : buckets) {
        std::string label =
            b.lo == b.hi ? std::to_string(b.lo) : std::to_string(b.lo) + "-" + std::to_string(b.hi);
        std::cout << "  " << std::left << std::setw(12) << label << std::right << std::setw(8)
                  << b.count << "  " << bar(b.count) << "\n";
    }
    if (unreachable > 0)
        std::cout << "  " << std::left << std::setw(12) << "unreachable" << std::right
                  << std::setw(8) << unreachable << "  " << bar(unreachable) << "\n";
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

int run_prepare(CliConfig& cfg, const std::string& out_dir) {
    finalize_and_emit(cfg, out_dir);
    const kg::KnowledgeGraph base = load_graph(cfg, false);
    const kg::KnowledgeGraph aug = kg::augment_inverse(base);
    std::cout << "dataset: " << cfg.run.dataset << "\n";
    std::cout << "|V|=" << base.n_entities() << "\n";
    std::cout << "|R|=" << base.n_relations() << "\n";
    std::cout << "|E|=" << base.n_facts() << "\n";
    std::cout << "|E^train|=" << base.train.size() << "\n";
    std::cout << "|E^val|=" << base.valid.size() << "\n";
    std::cout << "|E^test|=" << base.test.size() << "\n";
    std::cout << "augmented: |R|=" << aug.n_relations() << " |E|=" << aug.n_facts() << "\n";
    if (!out_dir.empty()) {
        const fs::path dest = fs::path(out_dir) / "dataset";
        kg::save_dataset(base, dest);
        std::cout << "normalized dataset written: " << dest.string() << "\n";
    }
    return 0;
}

int run_sample(CliConfig& cfg, const std::string& out_dir) {
    finalize_and_emit(cfg, out_dir);
    const kg::KnowledgeGraph g = load_graph(cfg, true);
    const kg::Split split = parse_split(cfg.run.split);
    const int32_t head = resolve_name(g.entities, cfg.run.head, "entity", "run.head");
    const int32_t rel = resolve_name(g.relations, cfg.run.relation, "relation", "run.relation");

    // Observe what a model answering on this split is allowed to see:
    // train facts, plus valid facts when answering test queries.
    const auto og = sampler::ObservedGraph::from_splits(g, split == kg::Split::Test);
    const sampler::Subgraph sub = sampler::extract_subgraph(og, head, rel, cfg.sampler);

    std::cout << "query: head=" << g.entities.name(head) << " relation=" << g.relations.name(rel)
              << " split=" << kg::split_name(split) << "\n";
    std::cout << "subgraph: entities=" << sub.n_entities() << "/" << sub.source_entities
              << " edges=" << sub.edges.size() << "/" << sub.source_edges
              << " heuristic=" << sampler::heuristic_name(sub.heuristic)
              << " entity_ratio=" << sub.entity_ratio << " edge_ratio=" << sub.edge_ratio << "\n";

    std::vector<int64_t> degree(static_cast<size_t>(sub.n_entities()), 0);
    for (const kg::Triple& t : sub.edges) {
        ++degree[static_cast<size_t>(t.head)];
        ++degree[static_cast<size_t>(t.tail)];
    }
    print_histogram("degree histogram (within subgraph):", bucketize(degree));

    const predictor::PredGraph pg = predictor::PredGraph::build(sub);
    std::vector<int64_t> dist;
    int64_t unreachable = 0;
    for (int32_t level : pg.level) {
        if (level < 0)
            ++unreachable;
        else
            dist.push_back(level);
    }
    print_histogram("distance-to-anchor histogram:", bucketize(dist), unreachable);

    if (!out_dir.empty()) {
        const fs::path path = fs::path(out_dir) / "subgraph.json";
        write_text(path, sub.to_json() + "\n");
        std::cout << "subgraph written: " << path.string() << "\n";
    }
    return 0;
}

int run_coverage(CliConfig& cfg, const std::string& out_dir) {
    finalize_and_emit(cfg, out_dir);
    const kg::KnowledgeGraph g = load_graph(cfg, true);
    const kg::Split split = parse_split(cfg.run.split);

    std::vector<sampler::Heuristic> heuristics;
    if (cfg.run.heuristics.empty())
        throw ConfigError("config key 'run.heuristics': needs at least one heuristic");
    for (const std::string& name : cfg.run.heuristics) {
        try {
            heuristics.push_back(sampler::parse_heuristic(name));
        } catch (const ConfigError& e) {
            throw ConfigError("config key 'run.heuristics': " + std::string(e.what()));
        }
    }
    const std::vector<double> ratios = checked_ratios(cfg.run.ratios, "run.ratios");

    const evaluation::CoverageTable table =
        evaluation::coverage_ratio(g, split, heuristics, ratios, cfg.sampler, cfg.threads);

    std::cout << "coverage ratio: split=" << kg::split_name(split)
              << " queries=" << table.n_queries << "\n";
    std::cout << std::left << std::setw(10) << "heuristic";
    for (double r : ratios) std::cout << std::right << std::setw(9) << ("r=" + format_ratio(r));
    std::cout << "\n";
    std::ostringstream tsv;
    tsv << "heuristic";
    for (double r : ratios) tsv << "\t" << full_precision(r);
    tsv << "\n";
    for (size_t h = 0; h < heuristics.size(); ++h) {
        std::cout << std::left << std::setw(10) << sampler::heuristic_name(heuristics[h]);
        tsv << sampler::heuristic_name(heuristics[h]);
        for (size_t r = 0; r < ratios.size(); ++r) {
            std::cout << std::right << std::setw(9) << std::fixed << std::setprecision(3)
                      << table.at(h, r);
            std::cout.unsetf(std::ios::fixed);
            std::cout << std::setprecision(6);
            tsv << "\t" << full_precision(table.at(h, r));
        }
        std::cout << "\n";
        tsv << "\n";
    }
    if (!out_dir.empty()) {
        const fs::path path = fs::path(out_dir) / "coverage.tsv";
        write_text(path, tsv.str());
        std::cout << "table written: " << path.string() << "\n";
    }
    return 0;
}

int run_train(CliConfig& cfg, const std::string& out_dir) {
    finalize_and_emit(cfg, out_dir);
    const kg::KnowledgeGraph g = load_graph(cfg, true);

    std::ofstream log(fs::path(out_dir) / "train_log.jsonl");
    if (!log) throw LoadError("cannot write train_log.jsonl under '" + out_dir + "'");
    const training::FitResult fit = training::fit(g, cfg.sampler, cfg.predictor, cfg.train, &log);

    const fs::path ckpt = fs::path(out_dir) / "checkpoint.bin";
    predictor::save_checkpoint(fit.params, ckpt);

    ordered_json report;
    report["epochs"] = fit.report.epochs.size();
    report["best_epoch"] = fit.report.best_epoch;
    report["best_valid_mrr"] = fit.report.best_valid_mrr;
    ordered_json history = ordered_json::array();
    for (const training::EpochRecord& rec : fit.report.epochs) {
        ordered_json e;
        e["epoch"] = rec.stats.epoch;
        e["loss"] = rec.stats.mean_loss;
        e["queries"] = rec.stats.n_queries;
        e["missed"] = rec.stats.missed;
        e["steps"] = rec.stats.steps;
        e["valid_mrr"] = rec.valid.mrr;
        e["valid_hits1"] = rec.valid.hits1;
        e["valid_hits10"] = rec.valid.hits10;
        history.push_back(e);
    }
    report["history"] = history;
    write_text(fs::path(out_dir) / "report.json", report.dump(2) + "\n");

    std::cout << "trained " << fit.report.epochs.size() << " epochs; best epoch "
              << fit.report.best_epoch << " valid MRR=" << std::setprecision(6)
              << fit.report.best_valid_mrr << "\n";
    std::cout << "checkpoint written: " << ckpt.string() << "\n";
    return 0;
}

predictor::PredictorParams load_required_checkpoint(const CliConfig& cfg,
                                                    const kg::KnowledgeGraph& g) {
    if (cfg.run.checkpoint.empty())
        throw ConfigError("config key 'run.checkpoint': a checkpoint file is required "
                          "(--checkpoint FILE)");
    return predictor::load_checkpoint(cfg.run.checkpoint,
                                      static_cast<int32_t>(g.n_relations()));
}

int run_eval(CliConfig& cfg, const std::string& out_dir) {
    finalize_and_emit(cfg, out_dir);
    const kg::KnowledgeGraph g = load_graph(cfg, true);
    const kg::Split split = parse_split(cfg.run.split);
    const predictor::PredictorParams params = load_required_checkpoint(cfg, g);

    const evaluation::MetricReport rep =
        evaluation::evaluate(g, split, cfg.sampler, params, cfg.threads);
    std::cout << "eval: split=" << kg::split_name(split) << " MRR=" << std::setprecision(6)
              << rep.mrr << " hits@1=" << rep.hits1 << " hits@10=" << rep.hits10
              << " queries=" << rep.n_queries << " missed=" << rep.missed << "\n";

    if (!out_dir.empty()) {
        ordered_json report;
        report["split"] = kg::split_name(split);
        report["mrr"] = rep.mrr;
        report["hits1"] = rep.hits1;
        report["hits10"] = rep.hits10;
        report["queries"] = rep.n_queries;
        report["missed"] = rep.missed;
        const fs::path path = fs::path(out_dir) / "report.json";
        write_text(path, report.dump(2) + "\n");
        std::cout << "report written: " << path.string() << "\n";
    }
    return 0;
}

int run_sweep(CliConfig& cfg, const std::string& out_dir) {
    finalize_and_emit(cfg, out_dir);
    const kg::KnowledgeGraph g = load_graph(cfg, true);
    const kg::Split split = parse_split(cfg.run.split);
    const predictor::PredictorParams params = load_required_checkpoint(cfg, g);
    const std::vector<double> entity_ratios =
        checked_ratios(cfg.run.entity_ratios, "run.entity_ratios");
    const std::vector<double> edge_ratios = checked_ratios(cfg.run.edge_ratios, "run.edge_ratios");

    const evaluation::SweepResult res = evaluation::extrapolation_sweep(
        g, split, cfg.sampler, params, entity_ratios, edge_ratios, cfg.threads);

    std::cout << "extrapolation sweep: split=" << kg::split_name(split)
              << " queries=" << res.n_queries << " (rows: entity ratio, columns: edge ratio)\n";
    std::cout << std::left << std::setw(10) << "entity\\edge";
    for (double r : edge_ratios) std::cout << std::right << std::setw(9) << format_ratio(r);
    std::cout << "\n";
    std::ostringstream tsv;
    tsv << "entity_ratio";
    for (double r : edge_ratios) tsv << "\t" << full_precision(r);
    tsv << "\n";
    for (size_t e = 0; e < entity_ratios.size(); ++e) {
        std::cout << std::left << std::setw(10) << format_ratio(entity_ratios[e]);
        tsv << full_precision(entity_ratios[e]);
        for (size_t i = 0; i < edge_ratios.size(); ++i) {
            std::cout << std::right << std::setw(9) << std::fixed << std::setprecision(4)
                      << res.at(e, i);
            std::cout.unsetf(std::ios::fixed);
            std::cout << std::setprecision(6);
            tsv << "\t" << full_precision(res.at(e, i));
        }
        std::cout << "\n";
        tsv << "\n";
    }
    if (!out_dir.empty()) {
        const fs::path path = fs::path(out_dir) / "sweep.tsv";
        write_text(path, tsv.str());
        std::cout << "table written: " << path.string() << "\n";
    }
    return 0;
}

int run_search(CliConfig& cfg, const std::string& out_dir) {
    finalize_and_emit(cfg, out_dir);
    const kg::KnowledgeGraph g = load_graph(cfg, true);

    const search::SearchSpace pspace = search::predictor_space();
    search::SamplerSpaceOptions sopts;
    sopts.per_relation = cfg.search.per_relation;
    sopts.n_relations = static_cast<int32_t>(g.n_relations());
    const search::SearchSpace sspace = search::sampler_space(sopts);

    search::BilevelOptions opts;
    opts.per_relation = cfg.search.per_relation;
    opts.frozen_sampler = cfg.sampler;
    for (search::StageOptions* stage : {&opts.predictor_stage, &opts.sampler_stage}) {
        stage->warm_start = cfg.search.warm_start;
        stage->n_candidates = cfg.search.n_candidates;
        stage->trial_epochs = cfg.search.trial_epochs;
        stage->train = cfg.train;
        stage->threads = cfg.threads;
    }
    opts.predictor_stage.budget = cfg.search.predictor_budget;
    opts.sampler_stage.budget = cfg.search.sampler_budget;
    // Decorrelated stage seeds derived from the global seed; documented in
    // the README so audit replays stay reproducible.
    opts.predictor_stage.seed = Rng::mix(cfg.seed, 1, 0xB11E7E1ull);
    opts.sampler_stage.seed = Rng::mix(cfg.seed, 2, 0xB11E7E1ull);

    const fs::path audit_path = fs::path(out_dir) / "audit.jsonl";
    if (cfg.run.resume && fs::exists(audit_path)) {
        std::ifstream in(audit_path);
        opts.predictor_stage.resume = search::load_audit(in, pspace, "predictor");
        in.clear();
        in.seekg(0);
        opts.sampler_stage.resume = search::load_audit(in, sspace, "sampler");
        if (!opts.sampler_stage.resume.empty() &&
            static_cast<int>(opts.predictor_stage.resume.size()) <
                opts.predictor_stage.budget)
            throw ConfigError(
                "resume: the audit log holds sampler trials but stage 1 still has budget "
                "left; replaying them would reference a stale stage-1 checkpoint (raise "
                "the sampler budget only once stage 1 is complete)");
        std::cout << "resuming: " << opts.predictor_stage.resume.size()
                  << " predictor trials, " << opts.sampler_stage.resume.size()
                  << " sampler trials replayed from " << audit_path.string() << "\n";
    }
    std::ofstream audit(audit_path, cfg.run.resume ? std::ios::app : std::ios::trunc);
    if (!audit) throw LoadError("cannot write '" + audit_path.string() + "'");
    opts.predictor_stage.audit = &audit;
    opts.sampler_stage.audit = &audit;

    const search::BilevelResult result = search::bilevel_search(g, opts);

    const fs::path ckpt = fs::path(out_dir) / "checkpoint.bin";
    predictor::save_checkpoint(result.stage1.checkpoint, ckpt);

    ordered_json summary;
    summary["stage1"] = ordered_json{{"trials", result.stage1.trials.size()},
                                     {"best_index", result.stage1.best_index},
                                     {"best_valid_mrr", result.stage1.best_measurement}};
    summary["stage2"] = ordered_json{{"trials", result.stage2.trials.size()},
                                     {"best_index", result.stage2.best_index},
                                     {"best_valid_mrr", result.stage2.best_measurement}};
    summary["predictor"] = ordered_json::parse(dump_predictor(result.predictor).dump());
    summary["sampler"] = ordered_json::parse(dump_sampler(result.sampler).dump());
    write_text(fs::path(out_dir) / "searched.json", summary.dump(2) + "\n");

    // A ready-to-train config carrying both incumbents.
    CliConfig best = cfg;
    best.predictor = result.predictor;
    best.sampler = result.sampler;
    best.run.resume = false;
    write_text(fs::path(out_dir) / "best_config.json", dump_config(best).dump(2) + "\n");

    std::cout << "stage 1 (predictor): best valid MRR=" << std::setprecision(6)
              << result.stage1.best_measurement << " at trial " << result.stage1.best_index
              << " of " << result.stage1.trials.size() << "\n";
    std::cout << "stage 2 (sampler): best valid MRR=" << result.stage2.best_measurement
              << " at trial " << result.stage2.best_index << " of "
              << result.stage2.trials.size() << "\n";
    std::cout << "checkpoint written: " << ckpt.string() << "\n";
    std::cout << "incumbent config written: "
              << (fs::path(out_dir) / "best_config.json").string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// Argument wiring
// ---------------------------------------------------------------------------

/// Locates --config/-c ahead of full parsing so file values become the
/// defaults that explicit flags then override.
std::string prescan_config(int argc, char** argv) {
    for (int i = 1; i < argc; ++i) {
        const std::string arg = argv[i];
        if (arg == "--config" || arg == "-c") {
            if (i + 1 < argc) return argv[i + 1];
        } else if (arg.rfind("--config=", 0) == 0) {
            return arg.substr(9);
        }
    }
    return {};
}

int dispatch(int argc, char** argv) {
    CliConfig cfg;
    const std::string config_path = prescan_config(argc, argv);
    if (!config_path.empty()) cfg = load_config_file(config_path);
    std::string out_dir; // location only; never part of the persisted config

    CLI::App app{"one-shot subgraph link prediction toolkit"};
    app.require_subcommand(1);
    std::string config_flag;
    std::vector<std::string> set_exprs;

    auto add_common = [&](CLI::App* sub, bool out_required = false) {
        sub->add_option("--dataset", cfg.run.dataset,
                        "dataset directory (train.txt/valid.txt/test.txt)")
            ->capture_default_str();
        sub->add_option("--config,-c", config_flag, "JSON config file (defaults for all flags)");
        sub->add_option("--set", set_exprs,
                        "override any config key, e.g. --set predictor.dropout=0.2 "
                        "(repeatable; applied last)")
            ->allow_extra_args(false);
        auto* out = sub->add_option("--out,-o", out_dir, "output directory");
        if (out_required) out->required();
        sub->add_option("--seed", cfg.seed, "global random seed")->capture_default_str();
        sub->add_option("--threads", cfg.threads, "worker threads (results are thread-count "
                                                  "invariant)")
            ->capture_default_str();
    };
    auto add_sampler = [&](CLI::App* sub) {
        sub->add_option("--heuristic", // parsed post-hoc so config files share the path
                        [&cfg](const CLI::results_t& res) {
                            cfg.sampler.heuristic = sampler::parse_heuristic(res[0]);
                            return true;
                        },
                        "entity scoring heuristic (rand|pr|rw|bfs|ppr)")
            ->default_str(sampler::heuristic_name(cfg.sampler.heuristic))
            ->expected(1);
        sub->add_option("--alpha", cfg.sampler.alpha, "restart probability")
            ->capture_default_str();
        sub->add_option("--entity-ratio", cfg.sampler.entity_ratio_default,
                        "kept fraction of reachable entities")
            ->capture_default_str();
        sub->add_option("--edge-ratio", cfg.sampler.edge_ratio_default,
                        "kept fraction of induced edges")
            ->capture_default_str();
    };
    auto add_split = [&](CLI::App* sub) {
        sub->add_option("--split", cfg.run.split, "evaluation split (train|valid|test)")
            ->capture_default_str();
    };
    auto add_checkpoint = [&](CLI::App* sub) {
        sub->add_option("--checkpoint", cfg.run.checkpoint, "predictor checkpoint file")
            ->capture_default_str();
    };

    CLI::App* prepare = app.add_subcommand(
        "prepare", "load, augment, and validate a dataset; print its statistics");
    add_common(prepare);

    CLI::App* sample =
        app.add_subcommand("sample", "extract one subgraph for a (head, relation) query");
    add_common(sample);
    add_sampler(sample);
    add_split(sample);
    sample->add_option("--head", cfg.run.head, "query head entity (name or id)")
        ->capture_default_str();
    sample->add_option("--relation", cfg.run.relation, "query relation (name or id)")
        ->capture_default_str();

    CLI::App* coverage = app.add_subcommand(
        "coverage", "answer-coverage benchmark across heuristics and entity ratios");
    add_common(coverage);
    add_sampler(coverage);
    add_split(coverage);
    coverage
        ->add_option("--heuristics", cfg.run.heuristics,
                     "comma-separated heuristics (rand|pr|rw|bfs|ppr)")
        ->delimiter(',')
        ->capture_default_str();
    coverage->add_option("--ratios", cfg.run.ratios, "comma-separated entity ratios")
        ->delimiter(',')
        ->capture_default_str();

    CLI::App* train =
        app.add_subcommand("train", "fit the predictor and write a checkpoint");
    add_common(train, /*out_required=*/true);
    add_sampler(train);
    train->add_option("--epochs", cfg.train.epochs, "training epochs")->capture_default_str();
    train->add_option("--batch-size", cfg.train.batch_size, "queries per optimizer step")
        ->capture_default_str();
    train->add_option("--lr", cfg.train.learning_rate, "learning rate")->capture_default_str();
    train->add_option("--layers", cfg.predictor.layers, "message-passing layers")
        ->capture_default_str();
    train->add_option("--hidden-dim", cfg.predictor.hidden_dim, "representation width")
        ->capture_default_str();

    CLI::App* eval_cmd =
        app.add_subcommand("eval", "filtered-ranking metrics for a checkpoint on a split");
    add_common(eval_cmd);
    add_sampler(eval_cmd);
    add_split(eval_cmd);
    add_checkpoint(eval_cmd);

    CLI::App* sweep = app.add_subcommand(
        "sweep", "evaluation matrix over entity-ratio x edge-ratio grids");
    add_common(sweep);
    add_sampler(sweep);
    add_split(sweep);
    add_checkpoint(sweep);
    sweep
        ->add_option("--entity-ratios", cfg.run.entity_ratios,
                     "comma-separated entity ratios (rows)")
        ->delimiter(',')
        ->capture_default_str();
    sweep
        ->add_option("--edge-ratios", cfg.run.edge_ratios,
                     "comma-separated edge ratios (columns)")
        ->delimiter(',')
        ->capture_default_str();

    CLI::App* search_cmd = app.add_subcommand(
        "search", "two-stage hyperparameter search (predictor, then sampler ratios)");
    add_common(search_cmd, /*out_required=*/true);
    add_sampler(search_cmd);
    search_cmd
        ->add_option("--predictor-budget", cfg.search.predictor_budget, "stage-1 trial budget")
        ->capture_default_str();
    search_cmd->add_option("--sampler-budget", cfg.search.sampler_budget, "stage-2 trial budget")
        ->capture_default_str();
    search_cmd->add_option("--warm-start", cfg.search.warm_start, "random trials before the "
                                                                  "surrogate takes over")
        ->capture_default_str();
    search_cmd->add_option("--trial-epochs", cfg.search.trial_epochs,
                           "short training schedule inside stage-1 trials")
        ->capture_default_str();
    search_cmd->add_option("--epochs", cfg.train.epochs, "full schedule for the incumbent "
                                                         "retrain")
        ->capture_default_str();
    search_cmd
        ->add_flag("--per-relation", cfg.search.per_relation,
                   "search one entity ratio per relation instead of one global ratio")
        ->capture_default_str();
    search_cmd->add_flag("--resume", cfg.run.resume, "replay <out>/audit.jsonl before spending "
                                                     "new budget")
        ->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e); // prints the diagnostic
        std::cerr << "usage: oss {prepare|sample|coverage|train|eval|sweep|search} [flags]\n";
        return 2;
    }

    if (!set_exprs.empty()) {
        ordered_json doc = dump_config(cfg);
        for (const std::string& kv : set_exprs) apply_set(doc, kv);
        cfg = load_config_json(doc);
    }

    if (prepare->parsed()) cfg.run.command = "prepare";
    if (sample->parsed()) cfg.run.command = "sample";
    if (coverage->parsed()) cfg.run.command = "coverage";
    if (train->parsed()) cfg.run.command = "train";
    if (eval_cmd->parsed()) cfg.run.command = "eval";
    if (sweep->parsed()) cfg.run.command = "sweep";
    if (search_cmd->parsed()) cfg.run.command = "search";

    if (prepare->parsed()) return run_prepare(cfg, out_dir);
    if (sample->parsed()) return run_sample(cfg, out_dir);
    if (coverage->parsed()) return run_coverage(cfg, out_dir);
    if (train->parsed()) return run_train(cfg, out_dir);
    if (eval_cmd->parsed()) return run_eval(cfg, out_dir);
    if (sweep->parsed()) return run_sweep(cfg, out_dir);
    if (search_cmd->parsed()) return run_search(cfg, out_dir);
    return 2; // unreachable: require_subcommand(1)
}

} // namespace

int main(int argc, char** argv) {
    std::cout << std::setprecision(6);
    try {
        return dispatch(argc, argv);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
