#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace oss::kg {

struct Triple {
    int32_t head = 0;
    int32_t rel = 0;
    int32_t tail = 0;
    auto operator<=>(const Triple&) const = default;
};

/// Ordered name <-> dense-id vocabulary. Ids are assigned in first-appearance
/// order when induced from data, or taken verbatim from a dict file.
class Vocab {
public:
    int32_t add_or_get(const std::string& name);
    /// Lookup only; returns -1 when absent.
    int32_t find(const std::string& name) const;
    const std::string& name(int32_t id) const { return names_.at(static_cast<size_t>(id)); }
    int64_t size() const { return static_cast<int64_t>(names_.size()); }
    const std::vector<std::string>& names() const { return names_; }

private:
    std::vector<std::string> names_;
    std::unordered_map<std::string, int32_t> ids_;
};

/// Compressed sparse row index: for each key entity, a contiguous range of
/// fact indices into the owning fact list.
struct Csr {
    std::vector<int64_t> offsets; // size n_entities + 1
    std::vector<int64_t> facts;   // fact ids grouped by key, ascending within a group

    std::span<const int64_t> row(int32_t entity) const {
        return {facts.data() + offsets[static_cast<size_t>(entity)],
                facts.data() + offsets[static_cast<size_t>(entity) + 1]};
    }
};

enum class Split { Train, Valid, Test };
const char* split_name(Split s);

/// Immutable vocabularies, split triple lists, and a CSR adjacency over the
/// full fact multiset. Global fact ids run train, then valid, then test.
struct KnowledgeGraph {
    Vocab entities;
    Vocab relations;
    std::vector<Triple> train;
    std::vector<Triple> valid;
    std::vector<Triple> test;

    bool augmented = false;
    int32_t base_relations = 0; // |R| before inverse augmentation

    Csr out; // facts grouped by head
    Csr in;  // facts grouped by tail
    std::vector<int64_t> degree; // in+out incident fact count per entity

    int64_t n_entities() const { return entities.size(); }
    int64_t n_relations() const { return relations.size(); }
    int64_t n_facts() const {
        return static_cast<int64_t>(train.size() + valid.size() + test.size());
    }
    const std::vector<Triple>& split(Split s) const;

    /// Global fact id -> triple.
    const Triple& fact(int64_t id) const;
    int64_t split_begin(Split s) const;

    /// Partner id of a fact under inverse augmentation. Identity when the
    /// graph is not augmented. Partners always live in the same split block.
    int64_t inverse_fact_id(int64_t id) const;

    /// Rebuild adjacency + degrees from the split lists; throws on any
    /// invariant violation (out-of-range ids, split overlap).
    void reindex();
};

/// Load train.txt / valid.txt / test.txt (head<TAB>relation<TAB>tail) from a
/// directory, with optional entities.dict / relations.dict ("id<TAB>name").
KnowledgeGraph load_dataset(const std::filesystem::path& dir);

/// Write the three split files (and dict files) back out; inverse-augmented
/// copies are not written, so save(load(dir)) round-trips the input triples.
void save_dataset(const KnowledgeGraph& g, const std::filesystem::path& dir);

/// Add an inverse relation r+|R| and a mirrored fact (o, r+|R|, x) for every
/// fact (x, r, o) in every split.
KnowledgeGraph augment_inverse(const KnowledgeGraph& g);

/// Per-epoch observation/query partition of train fact ids.
struct EdgeSplit {
    std::vector<int64_t> observed; // E^obs, ascending fact ids
    std::vector<int64_t> queries;  // E^query, ascending fact ids
    double requested_fraction = 0; // observed fraction of train facts
    uint64_t seed = 0;

    double achieved_ratio() const { // |E^obs| / |E^query|
        return queries.empty() ? 0.0
                               : static_cast<double>(observed.size()) /
                                     static_cast<double>(queries.size());
    }
};

/// Uniform random partition of train facts at the given observed fraction.
/// On an augmented graph a fact and its inverse copy always land on the same
/// side, so a held-out query is never visible through its mirrored edge.
EdgeSplit split_train_edges(const KnowledgeGraph& g, double observed_fraction, uint64_t seed);

} // namespace oss::kg
