#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tipformer/common.hpp"

namespace tipformer {

struct Toxin {
    std::string toxin_id;
    std::string smiles;
};

struct ProteinTarget {
    std::string protein_id;
    std::string sequence;
};

struct InteractionPair {
    std::string toxin_id;
    std::string protein_id;
    int label = 0;
};

inline bool operator==(const InteractionPair& a, const InteractionPair& b) {
    return a.toxin_id == b.toxin_id && a.protein_id == b.protein_id && a.label == b.label;
}

// Residues outside the 20-letter alphabet that UniProt still emits; they all
// collapse onto the unknown residue X.
inline bool is_ambiguous_residue(char c) {
    return c == 'B' || c == 'Z' || c == 'J' || c == 'U' || c == 'O';
}

inline bool is_canonical_residue(char c) {
    static const std::string alphabet = "ACDEFGHIKLMNPQRSTVWY";
    return alphabet.find(c) != std::string::npos;
}

inline std::string normalize_protein_sequence(const std::string& raw, const std::string& where) {
    if (raw.empty()) throw DataError(where + ": empty protein sequence");
    std::string out;
    out.reserve(raw.size());
    for (char c : raw) {
        if (is_canonical_residue(c) || c == 'X') {
            out.push_back(c);
        } else if (is_ambiguous_residue(c)) {
            out.push_back('X');
        } else {
            throw DataError(where + ": illegal residue '" + std::string(1, c) + "'");
        }
    }
    return out;
}

inline void validate_smiles_charset(const std::string& smiles, const std::string& where) {
    if (smiles.empty()) throw DataError(where + ": empty SMILES string");
    for (char c : smiles) {
        const unsigned char u = static_cast<unsigned char>(c);
        if (u < 0x21 || u > 0x7e) {
            throw DataError(where + ": SMILES contains non-printable or whitespace byte " +
                            std::to_string(static_cast<int>(u)));
        }
    }
}

class Corpus {
public:
    void add_toxin(Toxin t, const std::string& where) {
        if (t.toxin_id.empty()) throw DataError(where + ": empty toxin_id");
        validate_smiles_charset(t.smiles, where);
        if (!toxin_index_.emplace(t.toxin_id, toxins_.size()).second) {
            throw DataError(where + ": duplicate toxin_id '" + t.toxin_id + "'");
        }
        toxins_.push_back(std::move(t));
    }

    void add_protein(ProteinTarget p, const std::string& where) {
        if (p.protein_id.empty()) throw DataError(where + ": empty protein_id");
        p.sequence = normalize_protein_sequence(p.sequence, where);
        if (!protein_index_.emplace(p.protein_id, proteins_.size()).second) {
            throw DataError(where + ": duplicate protein_id '" + p.protein_id + "'");
        }
        proteins_.push_back(std::move(p));
    }

    void add_pair(InteractionPair pr, const std::string& where) {
        if (toxin_index_.find(pr.toxin_id) == toxin_index_.end()) {
            throw DataError(where + ": pair references unknown toxin_id '" + pr.toxin_id + "'");
        }
        if (protein_index_.find(pr.protein_id) == protein_index_.end()) {
            throw DataError(where + ": pair references unknown protein_id '" + pr.protein_id + "'");
        }
        if (pr.label != 0 && pr.label != 1) throw DataError(where + ": label must be 0 or 1");
        if (!pair_keys_.insert(pr.toxin_id + "\t" + pr.protein_id).second) {
            throw DataError(where + ": duplicate pair (" + pr.toxin_id + ", " + pr.protein_id + ")");
        }
        pairs_.push_back(std::move(pr));
    }

    const std::vector<Toxin>& toxins() const { return toxins_; }
    const std::vector<ProteinTarget>& proteins() const { return proteins_; }
    const std::vector<InteractionPair>& pairs() const { return pairs_; }

    bool has_pair(const std::string& tid, const std::string& pid) const {
        return pair_keys_.count(tid + "\t" + pid) > 0;
    }

    const Toxin& toxin(const std::string& id) const {
        auto it = toxin_index_.find(id);
        if (it == toxin_index_.end()) throw DataError("unknown toxin_id '" + id + "'");
        return toxins_[it->second];
    }

    const ProteinTarget& protein(const std::string& id) const {
        auto it = protein_index_.find(id);
        if (it == protein_index_.end()) throw DataError("unknown protein_id '" + id + "'");
        return proteins_[it->second];
    }

    bool has_toxin(const std::string& id) const { return toxin_index_.count(id) > 0; }
    bool has_protein(const std::string& id) const { return protein_index_.count(id) > 0; }

private:
    std::vector<Toxin> toxins_;
    std::vector<ProteinTarget> proteins_;
    std::vector<InteractionPair> pairs_;
    std::unordered_map<std::string, std::size_t> toxin_index_;
    std::unordered_map<std::string, std::size_t> protein_index_;
    std::unordered_set<std::string> pair_keys_;
};

namespace detail {

// Splits one TSV line into exactly `fields` columns. Carriage returns from
// CRLF files are stripped before splitting.
inline std::vector<std::string> split_tsv_line(std::string line, std::size_t fields,
                                               const std::string& where) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t tab = line.find('\t', start);
        if (tab == std::string::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, tab - start));
        start = tab + 1;
    }
    if (out.size() != fields) {
        throw DataError(where + ": expected " + std::to_string(fields) + " tab-separated fields, got " +
                        std::to_string(out.size()));
    }
    return out;
}

template <typename Fn>
void for_each_tsv_row(const std::string& path, Fn&& fn) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::string line;
    u64 line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r" || line[0] == '#') continue;
        fn(line, path + ":" + std::to_string(line_no));
    }
}

}  // namespace detail

inline Corpus parse_corpus(const std::string& toxin_file, const std::string& protein_file,
                           const std::string& pair_file) {
    Corpus corpus;
    detail::for_each_tsv_row(toxin_file, [&](const std::string& line, const std::string& where) {
        auto f = detail::split_tsv_line(line, 2, where);
        corpus.add_toxin({std::move(f[0]), std::move(f[1])}, where);
    });
    detail::for_each_tsv_row(protein_file, [&](const std::string& line, const std::string& where) {
        auto f = detail::split_tsv_line(line, 2, where);
        corpus.add_protein({std::move(f[0]), std::move(f[1])}, where);
    });
    detail::for_each_tsv_row(pair_file, [&](const std::string& line, const std::string& where) {
        auto f = detail::split_tsv_line(line, 3, where);
        int label = -1;
        if (f[2] == "0") label = 0;
        else if (f[2] == "1") label = 1;
        else throw DataError(where + ": label must be 0 or 1, got '" + f[2] + "'");
        corpus.add_pair({std::move(f[0]), std::move(f[1]), label}, where);
    });
    return corpus;
}

// Uniform sample without replacement from the complement of the corpus pair
// set over the full toxin x protein grid. Existing pairs of either label are
// excluded so pair uniqueness survives merging. count = round(ratio x |label-1 pairs|).
inline std::vector<InteractionPair> sample_negatives(const Corpus& corpus, double ratio, u64 seed) {
    if (ratio <= 0.0) throw ConfigError("negative ratio must be positive");
    i64 positives = 0;
    for (const auto& p : corpus.pairs())
        if (p.label == 1) ++positives;
    const i64 count = static_cast<i64>(std::llround(ratio * static_cast<double>(positives)));
    if (count == 0) return {};

    const i64 nt = static_cast<i64>(corpus.toxins().size());
    const i64 np = static_cast<i64>(corpus.proteins().size());
    std::vector<std::pair<i64, i64>> complement;
    complement.reserve(static_cast<std::size_t>(nt * np - static_cast<i64>(corpus.pairs().size())));
    for (i64 t = 0; t < nt; ++t)
        for (i64 p = 0; p < np; ++p)
            if (!corpus.has_pair(corpus.toxins()[static_cast<std::size_t>(t)].toxin_id,
                                 corpus.proteins()[static_cast<std::size_t>(p)].protein_id))
                complement.emplace_back(t, p);
    if (count > static_cast<i64>(complement.size())) {
        throw DataError("requested " + std::to_string(count) + " negatives but only " +
                        std::to_string(complement.size()) + " non-positive combinations exist");
    }

    RngStream rng(derive_seed(seed, "negatives"));
    // partial Fisher-Yates: after i swaps the prefix is a uniform sample
    for (i64 i = 0; i < count; ++i) {
        const u64 j = static_cast<u64>(i) + rng.bounded(static_cast<u64>(complement.size() - static_cast<std::size_t>(i)));
        std::swap(complement[static_cast<std::size_t>(i)], complement[static_cast<std::size_t>(j)]);
    }

    std::vector<InteractionPair> out;
    out.reserve(static_cast<std::size_t>(count));
    for (i64 i = 0; i < count; ++i) {
        const auto& [t, p] = complement[static_cast<std::size_t>(i)];
        out.push_back({corpus.toxins()[static_cast<std::size_t>(t)].toxin_id,
                       corpus.proteins()[static_cast<std::size_t>(p)].protein_id, 0});
    }
    return out;
}

enum class SplitPolicy { random, new_toxin, new_target };

inline SplitPolicy parse_split_policy(const std::string& s) {
    if (s == "random") return SplitPolicy::random;
    if (s == "new_toxin") return SplitPolicy::new_toxin;
    if (s == "new_target") return SplitPolicy::new_target;
    throw ConfigError("unknown split policy '" + s + "' (random|new_toxin|new_target)");
}

inline std::string to_string(SplitPolicy p) {
    switch (p) {
        case SplitPolicy::random: return "random";
        case SplitPolicy::new_toxin: return "new_toxin";
        case SplitPolicy::new_target: return "new_target";
    }
    throw InternalError("unreachable split policy");
}

struct SplitFractions {
    double train = 0.8;
    double val = 0.1;
    double test = 0.1;

    void validate() const {
        if (train <= 0 || val <= 0 || test <= 0) {
            throw ConfigError("split fractions must all be positive");
        }
        if (std::abs(train + val + test - 1.0) > 1e-6) {
            throw ConfigError("split fractions must sum to 1");
        }
    }
};

struct DatasetSplit {
    std::vector<InteractionPair> train;
    std::vector<InteractionPair> val;
    std::vector<InteractionPair> test;
    SplitPolicy policy = SplitPolicy::random;
    u64 seed = 0;
};

namespace detail {

// floor each partition, leftovers go to train
struct PartitionSizes {
    i64 train, val, test;
};

inline PartitionSizes partition_sizes(i64 n, const SplitFractions& f) {
    PartitionSizes s{};
    s.train = static_cast<i64>(std::floor(f.train * static_cast<double>(n)));
    s.val = static_cast<i64>(std::floor(f.val * static_cast<double>(n)));
    s.test = static_cast<i64>(std::floor(f.test * static_cast<double>(n)));
    s.train += n - (s.train + s.val + s.test);
    return s;
}

}  // namespace detail

inline DatasetSplit split(const Corpus& corpus, const std::vector<InteractionPair>& negatives,
                          SplitPolicy policy, const SplitFractions& fractions, u64 seed) {
    fractions.validate();
    std::vector<InteractionPair> all = corpus.pairs();
    all.insert(all.end(), negatives.begin(), negatives.end());
    if (all.empty()) throw DataError("cannot split an empty pair set");

    DatasetSplit out;
    out.policy = policy;
    out.seed = seed;

    if (policy == SplitPolicy::random) {
        RngStream rng(derive_seed(seed, "split.random"));
        rng.shuffle(all);
        const auto sz = detail::partition_sizes(static_cast<i64>(all.size()), fractions);
        out.train.assign(all.begin(), all.begin() + sz.train);
        out.val.assign(all.begin() + sz.train, all.begin() + sz.train + sz.val);
        out.test.assign(all.begin() + sz.train + sz.val, all.end());
        return out;
    }

    const bool by_toxin = (policy == SplitPolicy::new_toxin);
    std::vector<std::string> entities;
    if (by_toxin) {
        entities.reserve(corpus.toxins().size());
        for (const auto& t : corpus.toxins()) entities.push_back(t.toxin_id);
    } else {
        entities.reserve(corpus.proteins().size());
        for (const auto& p : corpus.proteins()) entities.push_back(p.protein_id);
    }
    RngStream rng(derive_seed(seed, by_toxin ? "split.new_toxin" : "split.new_target"));
    rng.shuffle(entities);
    const auto sz = detail::partition_sizes(static_cast<i64>(entities.size()), fractions);
    std::unordered_map<std::string, int> bucket;  // 0 train, 1 val, 2 test
    for (i64 i = 0; i < static_cast<i64>(entities.size()); ++i) {
        const int b = (i < sz.train) ? 0 : (i < sz.train + sz.val) ? 1 : 2;
        bucket.emplace(entities[static_cast<std::size_t>(i)], b);
    }
    for (const auto& pr : all) {
        const int b = bucket.at(by_toxin ? pr.toxin_id : pr.protein_id);
        (b == 0 ? out.train : b == 1 ? out.val : out.test).push_back(pr);
    }
    if (out.train.empty() || out.val.empty() || out.test.empty()) {
        throw DataError("cold split left an empty partition (policy " + to_string(policy) +
                        ", sizes " + std::to_string(out.train.size()) + "/" +
                        std::to_string(out.val.size()) + "/" + std::to_string(out.test.size()) + ")");
    }
    return out;
}

inline void write_split_manifest(const DatasetSplit& split, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    auto dump = [&](const std::vector<InteractionPair>& pairs, const char* tag) {
        for (const auto& p : pairs) {
            out << p.toxin_id << '\t' << p.protein_id << '\t' << p.label << '\t' << tag << '\n';
        }
    };
    dump(split.train, "train");
    dump(split.val, "val");
    dump(split.test, "test");
    if (!out) throw DataError("write failed for '" + path + "'");
}

// Reads a manifest back. Ids must resolve in the corpus; pairs labeled 0 that
// the corpus does not contain are accepted (they are sampled negatives).
inline DatasetSplit read_split_manifest(const std::string& path, const Corpus& corpus) {
    DatasetSplit out;
    std::unordered_set<std::string> seen;
    detail::for_each_tsv_row(path, [&](const std::string& line, const std::string& where) {
        auto f = detail::split_tsv_line(line, 4, where);
        if (!corpus.has_toxin(f[0])) throw DataError(where + ": unknown toxin_id '" + f[0] + "'");
        if (!corpus.has_protein(f[1])) throw DataError(where + ": unknown protein_id '" + f[1] + "'");
        int label = -1;
        if (f[2] == "0") label = 0;
        else if (f[2] == "1") label = 1;
        else throw DataError(where + ": label must be 0 or 1, got '" + f[2] + "'");
        if (!seen.insert(f[0] + "\t" + f[1]).second) {
            throw DataError(where + ": duplicate pair (" + f[0] + ", " + f[1] + ")");
        }
        InteractionPair pr{std::move(f[0]), std::move(f[1]), label};
        if (f[3] == "train") out.train.push_back(std::move(pr));
        else if (f[3] == "val") out.val.push_back(std::move(pr));
        else if (f[3] == "test") out.test.push_back(std::move(pr));
        else throw DataError(where + ": partition must be train|val|test, got '" + f[3] + "'");
    });
    if (out.train.empty() && out.val.empty() && out.test.empty()) {
        throw DataError("split manifest '" + path + "' contains no pairs");
    }
    return out;
}

}  // namespace tipformer
