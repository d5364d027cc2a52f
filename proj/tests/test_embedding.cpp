#include <catch2/catch_amalgamated.hpp>

#include <unistd.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tipformer/embedding.hpp"
#include "tipformer/grad_check.hpp"

using namespace tipformer;

namespace {

std::filesystem::path temp_file(const std::string& name) {
    static int counter = 0;
    return std::filesystem::temp_directory_path() /
           ("tipformer_emb_" + std::to_string(::getpid()) + "_" + std::to_string(counter++) + "_" + name);
}

struct FileGuard {
    std::filesystem::path p;
    explicit FileGuard(std::filesystem::path path) : p(std::move(path)) {}
    ~FileGuard() { std::filesystem::remove(p); }
};

void append_u32_le(std::string& buf, u32 v) {
    buf.push_back(static_cast<char>(v & 0xff));
    buf.push_back(static_cast<char>((v >> 8) & 0xff));
    buf.push_back(static_cast<char>((v >> 16) & 0xff));
    buf.push_back(static_cast<char>((v >> 24) & 0xff));
}

void append_f32_le(std::string& buf, float f) {
    u32 bits;
    std::memcpy(&bits, &f, 4);
    append_u32_le(buf, bits);
}

void write_raw(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("tokenize_protein maps residues to alphabet positions") {
    CHECK(tokenize_protein("MKV") == std::vector<i64>{10, 8, 17});
    CHECK(tokenize_protein("A") == std::vector<i64>{0});
    CHECK(tokenize_protein("MBV") == std::vector<i64>{10, 20, 17});
    CHECK(tokenize_protein("X") == std::vector<i64>{20});
    CHECK_THROWS_AS(tokenize_protein(""), DataError);
    CHECK_THROWS_AS(tokenize_protein("M1K"), DataError);

    SECTION("length and 1-based residue alignment") {
        RngStream rng(2);
        const std::string& alpha = protein_alphabet();
        for (int trial = 0; trial < 50; ++trial) {
            std::string seq;
            const u64 len = 1 + rng.bounded(40);
            for (u64 i = 0; i < len; ++i) seq.push_back(alpha[rng.bounded(alpha.size())]);
            auto ix = tokenize_protein(seq);
            REQUIRE(ix.size() == seq.size());
            for (std::size_t i = 0; i < ix.size(); ++i) {
                // index i of the token list speaks for residue i+1 (1-based)
                CHECK(alpha[static_cast<std::size_t>(ix[i])] == seq[i]);
            }
        }
    }
}

TEST_CASE("tokenize_smiles is character-level with UNK for strangers") {
    auto ix = tokenize_smiles("CCO");
    REQUIRE(ix.size() == 3);
    CHECK(ix[0] == ix[1]);
    CHECK(ix[0] != ix[2]);
    CHECK_THROWS_AS(tokenize_smiles(""), DataError);

    auto unk = tokenize_smiles("C!O");  // '!' is not in the vocabulary
    CHECK(unk[1] == smiles_unk_index());

    SECTION("round-trip for in-vocabulary strings") {
        RngStream rng(9);
        const std::string& alpha = smiles_alphabet();
        for (int trial = 0; trial < 100; ++trial) {
            std::string s;
            const u64 len = 1 + rng.bounded(60);
            for (u64 i = 0; i < len; ++i) s.push_back(alpha[rng.bounded(alpha.size())]);
            CHECK(detokenize_smiles(tokenize_smiles(s)) == s);
        }
    }
}

TEST_CASE("fallback_embed gathers table rows and carries gradients") {
    TapeT<double> tape;
    TensorT<double> tbl({3, 2});
    for (i64 i = 0; i < 6; ++i) tbl[i] = static_cast<double>(i) * 0.5;
    auto table = make_parameter<double>(tbl, "table");

    SECTION("indices [0,0] give identical rows") {
        auto out = fallback_embed(tape, table, {0, 0});
        CHECK(out->value.rows() == 2);
        CHECK(out->value.at(0, 0) == out->value.at(1, 0));
        CHECK(out->value.at(0, 1) == out->value.at(1, 1));
    }

    SECTION("one-hot table passes one-hot rows through") {
        TapeT<double> t2;
        TensorT<double> eye({3, 3});
        for (i64 i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
        auto one_hot = make_parameter<double>(eye, "eye");
        auto out = fallback_embed(t2, one_hot, {2, 0, 1});
        CHECK(out->value.at(0, 2) == 1.0);
        CHECK(out->value.at(1, 0) == 1.0);
        CHECK(out->value.at(2, 1) == 1.0);
        CHECK(out->value.at(0, 0) == 0.0);
    }

    SECTION("gradient of sum(output) counts index occurrences") {
        auto out = fallback_embed(tape, table, {1, 1, 0, 1});
        auto loss = tape.sum(out);
        tape.backward(loss);
        CHECK(table->grad.at(0, 0) == 1.0);
        CHECK(table->grad.at(1, 0) == 3.0);
        CHECK(table->grad.at(2, 0) == 0.0);

        auto report = grad_check<double>([&](TapeT<double>& t, ValueT<double> x) {
            return t.sum(fallback_embed(t, x, {1, 1, 0, 1}));
        }, tbl, 1e-4, 1e-6);
        CHECK(report.pass);
    }

    SECTION("out-of-range index is an internal error") {
        CHECK_THROWS_AS(fallback_embed(tape, table, {3}), InternalError);
    }
}

TEST_CASE("embedding store validates entries") {
    EmbeddingStore store(4);
    TensorT<float> m({2, 4}, {0, 1, 2, 3, 4, 5, 6, 7});
    store.add({"E1", m});
    CHECK(store.size() == 1);
    CHECK(store.get("E1").at(1, 2) == 6.0f);
    CHECK_THROWS_AS(store.add({"E1", m}), DataError);                       // duplicate
    CHECK_THROWS_AS(store.add({"E2", TensorT<float>({2, 3})}), DataError);  // dim mismatch
    TensorT<float> bad({1, 4});
    bad[0] = std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(store.add({"E3", bad}), DataError);
    CHECK_THROWS_AS(store.get("missing"), DataError);
}

TEST_CASE("TPFE save-load round-trip is bit-exact") {
    EmbeddingStore store(3);
    TensorT<float> a({2, 3}, {1.5f, -2.0f, 0.0f, -0.0f, 3.25e-30f, 1e30f});
    TensorT<float> b({1, 3}, {0.1f, 0.2f, 0.3f});
    store.add({"tox-α", a});  // UTF-8 id survives the byte round trip
    store.add({"p2", b});

    auto path = temp_file("rt.tpfe");
    FileGuard guard(path);
    save_embeddings(store, path.string());
    auto loaded = load_embeddings(path.string(), 3);
    REQUIRE(loaded.size() == 2);
    CHECK(loaded.dim() == 3);
    CHECK(bitwise_equal(loaded.get("tox-α"), a));
    CHECK(bitwise_equal(loaded.get("p2"), b));
    // entry order preserved
    CHECK(loaded.entries()[0].entity_id == "tox-α");
    CHECK(loaded.entries()[1].entity_id == "p2");
}

TEST_CASE("hand-built TPFE file with one 1x2 matrix [1.5, -2.0]") {
    std::string bytes = "TPFE";
    append_u32_le(bytes, 1);  // version
    append_u32_le(bytes, 2);  // dim
    append_u32_le(bytes, 1);  // one entity
    append_u32_le(bytes, 2);  // id length
    bytes += "e7";
    append_u32_le(bytes, 1);  // L = 1
    append_f32_le(bytes, 1.5f);
    append_f32_le(bytes, -2.0f);

    auto path = temp_file("hand.tpfe");
    FileGuard guard(path);
    write_raw(path, bytes);

    auto store = load_embeddings(path.string(), 2);
    REQUIRE(store.size() == 1);
    const auto& m = store.get("e7");
    CHECK(m.rows() == 1);
    CHECK(m.cols() == 2);
    CHECK(m[0] == 1.5f);
    CHECK(m[1] == -2.0f);
}

TEST_CASE("TPFE rejects malformed files") {
    auto path = temp_file("bad.tpfe");
    FileGuard guard(path);

    SECTION("bad magic") {
        write_raw(path, "NOPE\x01\x00\x00\x00");
        CHECK_THROWS_AS(load_embeddings(path.string()), FormatError);
    }

    SECTION("unsupported version") {
        std::string bytes = "TPFE";
        append_u32_le(bytes, 9);
        append_u32_le(bytes, 2);
        append_u32_le(bytes, 0);
        write_raw(path, bytes);
        CHECK_THROWS_AS(load_embeddings(path.string()), FormatError);
    }

    SECTION("dim mismatch against expected_dim") {
        EmbeddingStore store(384);
        TensorT<float> m({1, 384});
        store.add({"x", m});
        save_embeddings(store, path.string());
        CHECK_THROWS_AS(load_embeddings(path.string(), 1024), FormatError);
        CHECK_NOTHROW(load_embeddings(path.string(), 384));
        CHECK_NOTHROW(load_embeddings(path.string()));  // 0 = accept declared dim
    }

    SECTION("truncated payload") {
        std::string bytes = "TPFE";
        append_u32_le(bytes, 1);
        append_u32_le(bytes, 2);
        append_u32_le(bytes, 1);
        append_u32_le(bytes, 2);
        bytes += "e7";
        append_u32_le(bytes, 3);   // claims 3 rows
        append_f32_le(bytes, 1.0f);  // provides one value of six
        write_raw(path, bytes);
        CHECK_THROWS_AS(load_embeddings(path.string()), FormatError);
    }

    SECTION("trailing garbage") {
        std::string bytes = "TPFE";
        append_u32_le(bytes, 1);
        append_u32_le(bytes, 1);
        append_u32_le(bytes, 0);
        bytes += "junk";
        write_raw(path, bytes);
        CHECK_THROWS_AS(load_embeddings(path.string()), FormatError);
    }

    SECTION("missing file") {
        CHECK_THROWS_AS(load_embeddings((temp_file("nonexistent")).string()), DataError);
    }
}
