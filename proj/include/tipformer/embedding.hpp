#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "tipformer/autodiff.hpp"
#include "tipformer/common.hpp"
#include "tipformer/corpus.hpp"
#include "tipformer/tensor.hpp"

namespace tipformer {

// ---------------------------------------------------------------------------
// Token vocabularies. Index = position in the documented symbol order.
// ---------------------------------------------------------------------------

inline const std::string& protein_alphabet() {
    static const std::string alphabet = "ACDEFGHIKLMNPQRSTVWYX";
    return alphabet;
}

inline i64 protein_vocab_size() { return static_cast<i64>(protein_alphabet().size()); }

// One index per residue; output position i corresponds to residue i+1
// (1-based). Ambiguous residues collapse to X like the corpus ingest rule.
inline std::vector<i64> tokenize_protein(const std::string& sequence) {
    if (sequence.empty()) throw DataError("tokenize_protein: empty sequence");
    const std::string& alpha = protein_alphabet();
    std::vector<i64> out;
    out.reserve(sequence.size());
    for (char c : sequence) {
        const char n = is_ambiguous_residue(c) ? 'X' : c;
        const std::size_t pos = alpha.find(n);
        if (pos == std::string::npos) {
            throw DataError("tokenize_protein: illegal residue '" + std::string(1, c) + "'");
        }
        out.push_back(static_cast<i64>(pos));
    }
    return out;
}

// Character-level SMILES vocabulary: structural symbols, digits, then the
// upper- and lowercase letters. The final index is UNK.
inline const std::string& smiles_alphabet() {
    static const std::string alphabet =
        "#$%()*+-./0123456789:=@[\\]"
        "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
        "abcdefghijklmnopqrstuvwxyz";
    return alphabet;
}

inline i64 smiles_unk_index() { return static_cast<i64>(smiles_alphabet().size()); }
inline i64 smiles_vocab_size() { return smiles_unk_index() + 1; }

inline std::vector<i64> tokenize_smiles(const std::string& smiles) {
    if (smiles.empty()) throw DataError("tokenize_smiles: empty SMILES string");
    const std::string& alpha = smiles_alphabet();
    std::vector<i64> out;
    out.reserve(smiles.size());
    for (char c : smiles) {
        const std::size_t pos = alpha.find(c);
        out.push_back(pos == std::string::npos ? smiles_unk_index() : static_cast<i64>(pos));
    }
    return out;
}

inline std::string detokenize_smiles(const std::vector<i64>& indices) {
    const std::string& alpha = smiles_alphabet();
    std::string out;
    out.reserve(indices.size());
    for (i64 ix : indices) {
        if (ix < 0 || ix > smiles_unk_index()) {
            throw InternalError("detokenize_smiles: index " + std::to_string(ix) + " out of range");
        }
        out.push_back(ix == smiles_unk_index() ? '?' : alpha[static_cast<std::size_t>(ix)]);
    }
    return out;
}

inline std::string detokenize_protein(const std::vector<i64>& indices) {
    const std::string& alpha = protein_alphabet();
    std::string out;
    out.reserve(indices.size());
    for (i64 ix : indices) {
        if (ix < 0 || ix >= protein_vocab_size()) {
            throw InternalError("detokenize_protein: index " + std::to_string(ix) + " out of range");
        }
        out.push_back(alpha[static_cast<std::size_t>(ix)]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Precomputed embedding matrices and the TPFE container.
// ---------------------------------------------------------------------------

struct EmbeddingMatrix {
    std::string entity_id;
    TensorT<float> values;  // [L x D]
};

class EmbeddingStore {
public:
    explicit EmbeddingStore(i64 dim) : dim_(dim) {
        if (dim <= 0) throw ConfigError("embedding dim must be positive");
    }

    void add(EmbeddingMatrix m) {
        if (m.entity_id.empty()) throw DataError("embedding entry with empty id");
        if (m.values.rank() != 2 || m.values.cols() != dim_ || m.values.rows() < 1) {
            throw DataError("embedding for '" + m.entity_id + "' has shape " + m.values.shape_str() +
                            ", store dim is " + std::to_string(dim_));
        }
        if (!m.values.all_finite()) {
            throw DataError("embedding for '" + m.entity_id + "' contains non-finite values");
        }
        if (!index_.emplace(m.entity_id, entries_.size()).second) {
            throw DataError("duplicate embedding id '" + m.entity_id + "'");
        }
        entries_.push_back(std::move(m));
    }

    i64 dim() const { return dim_; }
    std::size_t size() const { return entries_.size(); }
    const std::vector<EmbeddingMatrix>& entries() const { return entries_; }

    bool has(const std::string& id) const { return index_.count(id) > 0; }

    const TensorT<float>& get(const std::string& id) const {
        auto it = index_.find(id);
        if (it == index_.end()) throw DataError("no embedding for entity '" + id + "'");
        return entries_[it->second].values;
    }

private:
    i64 dim_;
    std::vector<EmbeddingMatrix> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

namespace detail {

inline void put_u32_le(std::string& buf, u32 v) {
    buf.push_back(static_cast<char>(v & 0xff));
    buf.push_back(static_cast<char>((v >> 8) & 0xff));
    buf.push_back(static_cast<char>((v >> 16) & 0xff));
    buf.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline void put_f32_le(std::string& buf, float f) {
    u32 bits;
    std::memcpy(&bits, &f, 4);
    put_u32_le(buf, bits);
}

class ByteReader {
public:
    ByteReader(const std::string& data, std::string name)
        : data_(data), name_(std::move(name)) {}

    u32 u32_le() {
        need(4);
        const unsigned char* p = reinterpret_cast<const unsigned char*>(data_.data()) + pos_;
        pos_ += 4;
        return static_cast<u32>(p[0]) | (static_cast<u32>(p[1]) << 8) |
               (static_cast<u32>(p[2]) << 16) | (static_cast<u32>(p[3]) << 24);
    }

    float f32_le() {
        const u32 bits = u32_le();
        float f;
        std::memcpy(&f, &bits, 4);
        return f;
    }

    std::string bytes(std::size_t n) {
        need(n);
        std::string out = data_.substr(pos_, n);
        pos_ += n;
        return out;
    }

    bool at_end() const { return pos_ == data_.size(); }
    std::size_t remaining() const { return data_.size() - pos_; }

private:
    void need(std::size_t n) {
        if (pos_ + n > data_.size()) {
            throw FormatError(name_ + ": truncated, needed " + std::to_string(n) + " bytes at offset " +
                              std::to_string(pos_));
        }
    }

    const std::string& data_;
    std::string name_;
    std::size_t pos_ = 0;
};

inline std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return data;
}

inline void write_file_bytes(const std::string& path, const std::string& data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw DataError("write failed for '" + path + "'");
}

}  // namespace detail

inline constexpr u32 kTpfeVersion = 1;

inline void save_embeddings(const EmbeddingStore& store, const std::string& path) {
    std::string buf;
    buf += "TPFE";
    detail::put_u32_le(buf, kTpfeVersion);
    detail::put_u32_le(buf, static_cast<u32>(store.dim()));
    detail::put_u32_le(buf, static_cast<u32>(store.size()));
    for (const auto& e : store.entries()) {
        detail::put_u32_le(buf, static_cast<u32>(e.entity_id.size()));
        buf += e.entity_id;
        detail::put_u32_le(buf, static_cast<u32>(e.values.rows()));
        for (i64 i = 0; i < e.values.numel(); ++i) detail::put_f32_le(buf, e.values[i]);
    }
    detail::write_file_bytes(path, buf);
}

// expected_dim 0 accepts whatever dim the file declares.
inline EmbeddingStore load_embeddings(const std::string& path, i64 expected_dim = 0) {
    const std::string data = detail::read_file_bytes(path);
    detail::ByteReader r(data, path);
    if (r.bytes(4) != "TPFE") throw FormatError(path + ": bad magic, not a TPFE file");
    const u32 version = r.u32_le();
    if (version != kTpfeVersion) {
        throw FormatError(path + ": unsupported version " + std::to_string(version));
    }
    const u32 dim = r.u32_le();
    if (dim == 0) throw FormatError(path + ": declared dim is zero");
    if (expected_dim > 0 && static_cast<i64>(dim) != expected_dim) {
        throw FormatError(path + ": declared dim " + std::to_string(dim) + " does not match expected " +
                          std::to_string(expected_dim));
    }
    const u32 count = r.u32_le();
    EmbeddingStore store(static_cast<i64>(dim));
    for (u32 i = 0; i < count; ++i) {
        const u32 id_len = r.u32_le();
        std::string id = r.bytes(id_len);
        const u32 rows = r.u32_le();
        if (rows == 0) throw FormatError(path + ": entity '" + id + "' declares zero rows");
        TensorT<float> values({static_cast<i64>(rows), static_cast<i64>(dim)});
        for (i64 j = 0; j < values.numel(); ++j) values[j] = r.f32_le();
        store.add({std::move(id), std::move(values)});
    }
    if (!r.at_end()) throw FormatError(path + ": trailing bytes after last entity");
    return store;
}

// ---------------------------------------------------------------------------
// Trainable fallback path: one row of a parameter table per token.
// ---------------------------------------------------------------------------

template <typename S>
ValueT<S> fallback_embed(TapeT<S>& tape, const ValueT<S>& table, const std::vector<i64>& indices) {
    return tape.embedding_lookup(table, indices);
}

}  // namespace tipformer
