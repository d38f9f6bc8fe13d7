#include "oss/kg.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <unordered_set>

#include "oss/errors.hpp"
#include "oss/rng.hpp"

namespace oss::kg {

namespace fs = std::filesystem;

int32_t Vocab::add_or_get(const std::string& name) {
    auto it = ids_.find(name);
    if (it != ids_.end()) return it->second;
    auto id = static_cast<int32_t>(names_.size());
    names_.push_back(name);
    ids_.emplace(name, id);
    return id;
}

int32_t Vocab::find(const std::string& name) const {
    auto it = ids_.find(name);
    return it == ids_.end() ? -1 : it->second;
}

const char* split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Valid: return "valid";
        case Split::Test: return "test";
    }
    return "?";
}

const std::vector<Triple>& KnowledgeGraph::split(Split s) const {
    switch (s) {
        case Split::Train: return train;
        case Split::Valid: return valid;
        case Split::Test: return test;
    }
    throw LogicError("unknown split");
}

int64_t KnowledgeGraph::split_begin(Split s) const {
    switch (s) {
        case Split::Train: return 0;
        case Split::Valid: return static_cast<int64_t>(train.size());
        case Split::Test: return static_cast<int64_t>(train.size() + valid.size());
    }
    throw LogicError("unknown split");
}

const Triple& KnowledgeGraph::fact(int64_t id) const {
    auto n_train = static_cast<int64_t>(train.size());
    auto n_valid = static_cast<int64_t>(valid.size());
    if (id < 0 || id >= n_facts()) throw LogicError("fact id out of range");
    if (id < n_train) return train[static_cast<size_t>(id)];
    id -= n_train;
    if (id < n_valid) return valid[static_cast<size_t>(id)];
    return test[static_cast<size_t>(id - n_valid)];
}

int64_t KnowledgeGraph::inverse_fact_id(int64_t id) const {
    if (!augmented) return id;
    if (id < 0 || id >= n_facts()) throw LogicError("fact id out of range");
    // Each split block is laid out [base facts..., mirrored facts...].
    int64_t begin = 0;
    for (Split s : {Split::Train, Split::Valid, Split::Test}) {
        auto size = static_cast<int64_t>(split(s).size());
        if (id < begin + size) {
            int64_t half = size / 2;
            int64_t local = id - begin;
            return begin + (local < half ? local + half : local - half);
        }
        begin += size;
    }
    throw LogicError("fact id out of range");
}

void KnowledgeGraph::reindex() {
    const int64_t nv = n_entities();
    const int64_t nr = n_relations();
    const int64_t nf = n_facts();

    std::unordered_set<int64_t> seen;
    seen.reserve(static_cast<size_t>(nf) * 2);
    auto key = [&](const Triple& t) {
        return (static_cast<int64_t>(t.head) * nr + t.rel) * nv + t.tail;
    };
    for (Split s : {Split::Train, Split::Valid, Split::Test}) {
        std::unordered_set<int64_t> mine;
        for (const Triple& t : split(s)) {
            if (t.head < 0 || t.head >= nv || t.tail < 0 || t.tail >= nv)
                throw LogicError("entity id out of vocabulary bounds");
            if (t.rel < 0 || t.rel >= nr)
                throw LogicError("relation id out of vocabulary bounds");
            mine.insert(key(t));
        }
        for (int64_t k : mine)
            if (!seen.insert(k).second)
                throw LoadError(std::string("triple appears in multiple splits (") +
                                split_name(s) + " overlaps an earlier split)");
    }

    auto build = [&](bool by_head, Csr& csr) {
        csr.offsets.assign(static_cast<size_t>(nv) + 1, 0);
        csr.facts.resize(static_cast<size_t>(nf));
        for (int64_t f = 0; f < nf; ++f) {
            const Triple& t = fact(f);
            csr.offsets[static_cast<size_t>(by_head ? t.head : t.tail) + 1]++;
        }
        for (size_t i = 1; i < csr.offsets.size(); ++i) csr.offsets[i] += csr.offsets[i - 1];
        std::vector<int64_t> cursor(csr.offsets.begin(), csr.offsets.end() - 1);
        for (int64_t f = 0; f < nf; ++f) {
            const Triple& t = fact(f);
            csr.facts[static_cast<size_t>(cursor[static_cast<size_t>(by_head ? t.head : t.tail)]++)] = f;
        }
    };
    build(true, out);
    build(false, in);

    degree.assign(static_cast<size_t>(nv), 0);
    for (int64_t e = 0; e < nv; ++e)
        degree[static_cast<size_t>(e)] = static_cast<int64_t>(out.row(static_cast<int32_t>(e)).size() +
                                                              in.row(static_cast<int32_t>(e)).size());
}

namespace {

// Strips one trailing '\r' so CRLF files parse like LF files.
std::vector<std::string> read_lines(const fs::path& file) {
    std::ifstream is(file);
    if (!is) throw LoadError("cannot open " + file.string());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    return lines;
}

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> fields;
    size_t start = 0;
    while (true) {
        size_t pos = line.find('\t', start);
        if (pos == std::string::npos) {
            fields.push_back(line.substr(start));
            break;
        }
        fields.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return fields;
}

// Dict files carry explicit ids; they must cover exactly [0, n) so the
// resulting vocabulary is dense and ordered by id.
bool load_dict(const fs::path& file, Vocab& vocab) {
    if (!fs::exists(file)) return false;
    auto lines = read_lines(file);
    std::vector<std::string> names;
    std::vector<bool> filled;
    for (size_t i = 0; i < lines.size(); ++i) {
        if (lines[i].empty() && i + 1 == lines.size()) break;
        auto fields = split_tabs(lines[i]);
        if (fields.size() != 2)
            throw ParseError(file.string() + ":" + std::to_string(i + 1) +
                             ": expected id<TAB>name, got " + std::to_string(fields.size()) +
                             " field(s)");
        int64_t id = -1;
        auto [ptr, ec] = std::from_chars(fields[0].data(), fields[0].data() + fields[0].size(), id);
        if (ec != std::errc() || ptr != fields[0].data() + fields[0].size() || id < 0)
            throw ParseError(file.string() + ":" + std::to_string(i + 1) +
                             ": malformed integer id '" + fields[0] + "'");
        if (static_cast<size_t>(id) >= names.size()) {
            names.resize(static_cast<size_t>(id) + 1);
            filled.resize(static_cast<size_t>(id) + 1, false);
        }
        if (filled[static_cast<size_t>(id)])
            throw ParseError(file.string() + ":" + std::to_string(i + 1) + ": duplicate id " +
                             fields[0]);
        names[static_cast<size_t>(id)] = fields[1];
        filled[static_cast<size_t>(id)] = true;
    }
    for (size_t id = 0; id < filled.size(); ++id)
        if (!filled[id])
            throw ParseError(file.string() + ": ids are not dense, missing id " +
                             std::to_string(id));
    for (size_t i = 0; i < names.size(); ++i)
        if (vocab.add_or_get(names[i]) != static_cast<int32_t>(i))
            throw ParseError(file.string() + ": duplicate name '" + names[i] + "'");
    return true;
}

std::vector<Triple> load_split_file(const fs::path& file, Vocab& entities, Vocab& relations,
                                    bool strict_vocab) {
    if (!fs::exists(file)) throw LoadError("missing dataset file: " + file.string());
    auto lines = read_lines(file);
    std::vector<Triple> triples;
    triples.reserve(lines.size());
    for (size_t i = 0; i < lines.size(); ++i) {
        if (lines[i].empty() && i + 1 == lines.size()) break;
        auto fields = split_tabs(lines[i]);
        if (fields.size() != 3)
            throw ParseError(file.string() + ":" + std::to_string(i + 1) +
                             ": expected head<TAB>relation<TAB>tail, got " +
                             std::to_string(fields.size()) + " field(s)");
        auto resolve = [&](Vocab& v, const std::string& name, const char* kind) {
            if (strict_vocab) {
                int32_t id = v.find(name);
                if (id < 0)
                    throw VocabError(file.string() + ":" + std::to_string(i + 1) + ": " + kind +
                                     " '" + name + "' not present in the dict file");
                return id;
            }
            return v.add_or_get(name);
        };
        Triple t;
        t.head = resolve(entities, fields[0], "entity");
        t.rel = resolve(relations, fields[1], "relation");
        t.tail = resolve(entities, fields[2], "entity");
        triples.push_back(t);
    }
    return triples;
}

} // namespace

KnowledgeGraph load_dataset(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw LoadError("dataset directory not found: " + dir.string());
    KnowledgeGraph g;
    bool ent_dict = load_dict(dir / "entities.dict", g.entities);
    bool rel_dict = load_dict(dir / "relations.dict", g.relations);
    if (ent_dict != rel_dict)
        throw LoadError("dataset " + dir.string() +
                        " supplies only one of entities.dict / relations.dict; need both or neither");
    const bool strict = ent_dict;
    g.train = load_split_file(dir / "train.txt", g.entities, g.relations, strict);
    g.valid = load_split_file(dir / "valid.txt", g.entities, g.relations, strict);
    g.test = load_split_file(dir / "test.txt", g.entities, g.relations, strict);
    g.base_relations = static_cast<int32_t>(g.relations.size());
    g.reindex();
    return g;
}

void save_dataset(const KnowledgeGraph& g, const fs::path& dir) {
    fs::create_directories(dir);
    // Inverse-augmented copies are derived data; persist base facts only.
    auto base_count = [&](const std::vector<Triple>& s) {
        return g.augmented ? s.size() / 2 : s.size();
    };
    auto write_split = [&](const std::vector<Triple>& s, const fs::path& file) {
        std::ofstream os(file);
        if (!os) throw LoadError("cannot write " + file.string());
        size_t n = base_count(s);
        for (size_t i = 0; i < n; ++i)
            os << g.entities.name(s[i].head) << '\t' << g.relations.name(s[i].rel) << '\t'
               << g.entities.name(s[i].tail) << '\n';
    };
    write_split(g.train, dir / "train.txt");
    write_split(g.valid, dir / "valid.txt");
    write_split(g.test, dir / "test.txt");
    auto write_dict = [&](const std::vector<std::string>& names, size_t n, const fs::path& file) {
        std::ofstream os(file);
        if (!os) throw LoadError("cannot write " + file.string());
        for (size_t i = 0; i < n; ++i) os << i << '\t' << names[i] << '\n';
    };
    write_dict(g.entities.names(), static_cast<size_t>(g.entities.size()), dir / "entities.dict");
    write_dict(g.relations.names(), static_cast<size_t>(g.base_relations), dir / "relations.dict");
}

KnowledgeGraph augment_inverse(const KnowledgeGraph& g) {
    if (g.augmented) throw LogicError("knowledge graph is already inverse-augmented");
    KnowledgeGraph a;
    a.entities = g.entities;
    a.relations = g.relations;
    const auto nr = static_cast<int32_t>(g.relations.size());
    for (int32_t r = 0; r < nr; ++r) {
        std::string inv_name = "INV::" + g.relations.name(r);
        if (a.relations.find(inv_name) >= 0)
            throw LogicError("inverse relation name collides with existing relation: " + inv_name);
        a.relations.add_or_get(inv_name);
    }
    auto mirror = [&](const std::vector<Triple>& src) {
        std::vector<Triple> dst;
        dst.reserve(src.size() * 2);
        dst.insert(dst.end(), src.begin(), src.end());
        for (const Triple& t : src)
            dst.push_back(Triple{t.tail, static_cast<int32_t>(t.rel + nr), t.head});
        return dst;
    };
    a.train = mirror(g.train);
    a.valid = mirror(g.valid);
    a.test = mirror(g.test);
    a.augmented = true;
    a.base_relations = nr;
    a.reindex();
    return a;
}

EdgeSplit split_train_edges(const KnowledgeGraph& g, double observed_fraction, uint64_t seed) {
    if (!(observed_fraction > 0.0 && observed_fraction < 1.0))
        throw ConfigError("observed fraction must lie strictly inside (0, 1), got " +
                          std::to_string(observed_fraction));
    const auto n_train = static_cast<int64_t>(g.train.size());
    if (n_train < 2) throw ConfigError("edge split needs at least 2 train facts");

    // On an augmented graph the unit of partitioning is the (fact, inverse)
    // pair; both members land on the same side.
    const int64_t n_units = g.augmented ? n_train / 2 : n_train;
    auto n_obs_units =
        static_cast<int64_t>(std::floor(observed_fraction * static_cast<double>(n_units) + 0.5));
    n_obs_units = std::clamp<int64_t>(n_obs_units, 1, n_units - 1);

    std::vector<int64_t> units(static_cast<size_t>(n_units));
    for (int64_t i = 0; i < n_units; ++i) units[static_cast<size_t>(i)] = i;
    Rng rng(seed);
    for (int64_t i = n_units - 1; i > 0; --i)
        std::swap(units[static_cast<size_t>(i)],
                  units[static_cast<size_t>(rng.uniform_int(static_cast<uint64_t>(i + 1)))]);

    EdgeSplit split;
    split.requested_fraction = observed_fraction;
    split.seed = seed;
    auto emit = [&](std::vector<int64_t>& dst, int64_t unit) {
        dst.push_back(unit);
        if (g.augmented) dst.push_back(unit + n_units);
    };
    for (int64_t i = 0; i < n_units; ++i)
        emit(i < n_obs_units ? split.observed : split.queries, units[static_cast<size_t>(i)]);
    std::sort(split.observed.begin(), split.observed.end());
    std::sort(split.queries.begin(), split.queries.end());
    return split;
}

} // namespace oss::kg
