#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "tipformer/common.hpp"
#include "tipformer/corpus.hpp"

namespace tipformer {

// Synthetic corpus for self-contained end-to-end checks. A toxin is "armed"
// when its SMILES contains the marker N, a protein when its sequence contains
// the marker W; a pair interacts exactly when both markers are present. The
// rule is planted at the token level so the fallback embedder can learn it
// from scratch.
struct ToyConfig {
    i64 n_toxins = 60;
    i64 n_proteins = 60;
    i64 pairs_per_toxin = 12;
    double marker_fraction = 0.7;
    u64 seed = 1;

    void validate() const {
        if (n_toxins < 2 || n_proteins < 2) throw ConfigError("toy corpus needs at least 2x2 entities");
        if (pairs_per_toxin < 1 || pairs_per_toxin > n_proteins) {
            throw ConfigError("pairs_per_toxin must be in [1, n_proteins]");
        }
        if (marker_fraction <= 0.0 || marker_fraction >= 1.0) {
            throw ConfigError("marker_fraction must be in (0, 1)");
        }
    }
};

namespace detail {

inline std::string toy_pad_id(const char* prefix, i64 i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s%03lld", prefix, static_cast<long long>(i));
    return buf;
}

// Marker flags with an exact positive count, in a seeded random order.
inline std::vector<bool> toy_marker_flags(i64 n, double fraction, RngStream& rng) {
    const i64 armed = static_cast<i64>(std::llround(fraction * static_cast<double>(n)));
    std::vector<bool> flags(static_cast<std::size_t>(n), false);
    for (i64 i = 0; i < armed && i < n; ++i) flags[static_cast<std::size_t>(i)] = true;
    std::vector<std::size_t> order(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    std::vector<bool> shuffled(flags.size());
    for (std::size_t i = 0; i < flags.size(); ++i) shuffled[order[i]] = flags[i];
    return shuffled;
}

inline std::string toy_sequence(const std::string& alphabet, char marker, bool armed, i64 min_len,
                                i64 max_len, RngStream& rng) {
    const i64 len = min_len + static_cast<i64>(rng.bounded(static_cast<u64>(max_len - min_len + 1)));
    std::string s;
    for (i64 i = 0; i < len; ++i) s += alphabet[rng.bounded(alphabet.size())];
    if (armed) {
        // Two or three marker tokens at distinct positions.
        const i64 copies = 2 + static_cast<i64>(rng.bounded(2));
        std::vector<std::size_t> pos(s.size());
        for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
        rng.shuffle(pos);
        for (i64 c = 0; c < copies && c < static_cast<i64>(pos.size()); ++c) {
            s[pos[static_cast<std::size_t>(c)]] = marker;
        }
    }
    return s;
}

}  // namespace detail

inline Corpus make_toy_corpus(const ToyConfig& cfg) {
    cfg.validate();
    RngStream rng(derive_seed(cfg.seed, "toy"));
    Corpus corpus;

    // The base alphabets exclude the markers, so only armed entities carry them.
    const std::string smiles_base = "CCOS(=)1c";   // plain SMILES syntax, no N
    const std::string protein_base = "ACDEFGHIKLMSTV";  // canonical residues, no W

    const auto toxin_armed = detail::toy_marker_flags(cfg.n_toxins, cfg.marker_fraction, rng);
    const auto protein_armed = detail::toy_marker_flags(cfg.n_proteins, cfg.marker_fraction, rng);

    for (i64 i = 0; i < cfg.n_toxins; ++i) {
        corpus.add_toxin({detail::toy_pad_id("T", i),
                          detail::toy_sequence(smiles_base, 'N', toxin_armed[static_cast<std::size_t>(i)],
                                               8, 12, rng)},
                         "make-toy");
    }
    for (i64 i = 0; i < cfg.n_proteins; ++i) {
        corpus.add_protein({detail::toy_pad_id("P", i),
                            detail::toy_sequence(protein_base, 'W',
                                                 protein_armed[static_cast<std::size_t>(i)], 12, 18, rng)},
                           "make-toy");
    }

    std::vector<std::size_t> protein_order(static_cast<std::size_t>(cfg.n_proteins));
    for (std::size_t i = 0; i < protein_order.size(); ++i) protein_order[i] = i;
    for (i64 t = 0; t < cfg.n_toxins; ++t) {
        rng.shuffle(protein_order);
        for (i64 j = 0; j < cfg.pairs_per_toxin; ++j) {
            const std::size_t p = protein_order[static_cast<std::size_t>(j)];
            const int label = (toxin_armed[static_cast<std::size_t>(t)] && protein_armed[p]) ? 1 : 0;
            corpus.add_pair({detail::toy_pad_id("T", t), detail::toy_pad_id("P", p), label}, "make-toy");
        }
    }
    return corpus;
}

inline void write_toy_corpus(const Corpus& corpus, const std::string& toxin_file,
                             const std::string& protein_file, const std::string& pair_file) {
    {
        std::ofstream out(toxin_file, std::ios::trunc);
        if (!out) throw DataError("cannot open '" + toxin_file + "' for writing");
        for (const auto& t : corpus.toxins()) out << t.toxin_id << "\t" << t.smiles << "\n";
    }
    {
        std::ofstream out(protein_file, std::ios::trunc);
        if (!out) throw DataError("cannot open '" + protein_file + "' for writing");
        for (const auto& p : corpus.proteins()) out << p.protein_id << "\t" << p.sequence << "\n";
    }
    {
        std::ofstream out(pair_file, std::ios::trunc);
        if (!out) throw DataError("cannot open '" + pair_file + "' for writing");
        for (const auto& pr : corpus.pairs()) {
            out << pr.toxin_id << "\t" << pr.protein_id << "\t" << pr.label << "\n";
        }
    }
}

}  // namespace tipformer
