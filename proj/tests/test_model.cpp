#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <vector>

#include "tipformer/grad_check.hpp"
#include "tipformer/model.hpp"

using namespace tipformer;

namespace {

ModelConfig tiny_config(ModelVariant variant = ModelVariant::tipformer) {
    ModelConfig cfg;
    cfg.hidden = 8;
    cfg.heads = 2;
    cfg.num_interaction_layers = 2;
    cfg.conv_kernel = 3;
    cfg.dropout_rate = 0.2;
    cfg.variant = variant;
    cfg.embed_source = EmbedSource::fallback;
    cfg.toxin_input_dim = 6;
    cfg.protein_input_dim = 6;
    return cfg;
}

template <typename S>
TensorT<S> random_matrix(i64 r, i64 c, RngStream& rng, double lo = -1.0, double hi = 1.0) {
    TensorT<S> t({r, c});
    for (i64 i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(rng.uniform(lo, hi));
    return t;
}

// identity-projection attention params so Q/K/V/out equal the raw inputs
template <typename S>
struct RawMha {
    TensorT<S> eye;
    TensorT<S> zero;
    MhaParamsT<S> params;
    explicit RawMha(i64 d) : eye({d, d}), zero({d}) {
        for (i64 i = 0; i < d; ++i) eye.at(i, i) = S(1);
        params.wq = make_parameter<S>(eye, "wq");
        params.bq = make_parameter<S>(zero, "bq");
        params.wk = make_parameter<S>(eye, "wk");
        params.bk = make_parameter<S>(zero, "bk");
        params.wv = make_parameter<S>(eye, "wv");
        params.bv = make_parameter<S>(zero, "bv");
        params.wo = make_parameter<S>(eye, "wo");
        params.bo = make_parameter<S>(zero, "bo");
    }
};

}  // namespace

TEST_CASE("model config validation") {
    ModelConfig cfg = tiny_config();
    CHECK_NOTHROW(ModelT<float>(cfg));

    SECTION("hidden not divisible by heads") {
        cfg.hidden = 10;
        cfg.heads = 4;
        CHECK_THROWS_AS(ModelT<float>(cfg), ConfigError);
    }
    SECTION("even conv kernel") {
        cfg.conv_kernel = 4;
        CHECK_THROWS_AS(ModelT<float>(cfg), ConfigError);
    }
    SECTION("head dims must end in 1") {
        cfg.head_dims = {8, 4};
        CHECK_THROWS_AS(ModelT<float>(cfg), ConfigError);
    }
    SECTION("dropout out of range") {
        cfg.dropout_rate = 1.0;
        CHECK_THROWS_AS(ModelT<float>(cfg), ConfigError);
    }
    SECTION("defaults resolve to the documented widths") {
        ModelConfig d;
        d.resolve();
        CHECK(d.ffn_hidden == 64);
        CHECK(d.head_dims == std::vector<i64>{32, 32, 16, 1});
    }
}

TEST_CASE("model config kv round-trip") {
    ModelConfig cfg = tiny_config();
    cfg.bidirectional_cross = true;
    cfg.hotspot_agg = HotspotAgg::max;
    cfg.resolve();
    std::map<std::string, std::string> kv;
    for (auto& [k, v] : cfg.to_kv()) kv[k] = v;
    ModelConfig back = ModelConfig::from_kv(kv);
    CHECK(back.hidden == cfg.hidden);
    CHECK(back.heads == cfg.heads);
    CHECK(back.head_dims == cfg.head_dims);
    CHECK(back.dropout_rate == cfg.dropout_rate);
    CHECK(back.bidirectional_cross == cfg.bidirectional_cross);
    CHECK(back.hotspot_agg == HotspotAgg::max);
    CHECK(to_string(back.variant) == to_string(cfg.variant));

    kv.erase("model.heads");
    CHECK_THROWS_AS(ModelConfig::from_kv(kv), FormatError);
}

TEST_CASE("encoder forward") {
    ModelConfig cfg = tiny_config();
    ModelT<double> model(cfg);
    model.init_params(7);
    const i64 d = cfg.hidden;

    SECTION("L=1 input keeps shape 1 x d; longer inputs keep their length") {
        for (i64 L : {i64{1}, i64{5}, i64{17}}) {
            TapeT<double> tape(false);
            RngStream rng(3);
            auto x = tape.constant(random_matrix<double>(L, cfg.toxin_input_dim, rng));
            auto act = model.encode(tape, model.toxin_encoder(), x);
            CHECK(act.projected->value.rows() == L);
            CHECK(act.projected->value.cols() == d);
            CHECK(act.gated->value.rows() == L);
            CHECK(act.normalized->value.rows() == L);
            CHECK(act.normalized->value.cols() == d);
        }
    }

    SECTION("zero input with zero biases projects to zero and GLU halves magnitudes") {
        ModelT<double> zero_model(cfg);  // all params zero before init
        // give conv a nonzero bias so the GLU halving is visible: value path b,
        // gate path 0 -> sigmoid(0) = 0.5 -> output b/2
        auto conv_b = zero_model.param("enc_t.conv.b");
        for (i64 i = 0; i < conv_b->value.numel() / 2; ++i) conv_b->value[i] = 0.8;
        TapeT<double> tape(false);
        TensorT<double> zeros({4, cfg.toxin_input_dim});
        auto act = zero_model.encode(tape, zero_model.toxin_encoder(), tape.constant(zeros));
        for (i64 i = 0; i < act.projected->value.numel(); ++i) {
            CHECK(act.projected->value[i] == 0.0);
        }
        for (i64 r = 0; r < 4; ++r)
            for (i64 c = 0; c < d; ++c) CHECK(act.gated->value.at(r, c) == Catch::Approx(0.4));
    }

    SECTION("gradient of the summed output w.r.t. projection weight matches FD") {
        RngStream rng(5);
        auto x0 = random_matrix<double>(4, cfg.toxin_input_dim, rng);
        // plain sum of a layer-normed matrix is identically zero (rows are
        // centered), so probe through a fixed random functional instead
        auto probe = random_matrix<double>(4, d, rng);
        auto report = grad_check_params<double>(
            [&](TapeT<double>& tape) {
                auto act = model.encode(tape, model.toxin_encoder(), tape.constant(x0));
                return tape.sum(tape.mul(act.normalized, tape.constant(probe)));
            },
            {model.param("enc_t.proj.w"), model.param("enc_t.conv.k"), model.param("enc_t.ln.g")},
            1e-4, 1e-3);
        INFO(report.worst << " rel err " << report.max_rel_err);
        CHECK(report.pass);

        // and the degenerate case really does have a vanishing gradient
        TapeT<double> tape;
        model.zero_grads();
        auto act = model.encode(tape, model.toxin_encoder(), tape.constant(x0));
        tape.backward(tape.sum(act.normalized));
        auto w = model.param("enc_t.proj.w");
        for (i64 i = 0; i < w->grad.numel(); ++i) CHECK(std::abs(w->grad[i]) < 1e-10);
        model.zero_grads();
    }

    SECTION("input dim mismatch is a configuration error") {
        TapeT<double> tape(false);
        TensorT<double> wrong({3, cfg.toxin_input_dim + 1});
        EntityInputT<double> tox = EntityInputT<double>::from_matrix(wrong);
        EntityInputT<double> prot = EntityInputT<double>::from_tokens({1, 2});
        ModelConfig file_cfg = tiny_config();
        file_cfg.embed_source = EmbedSource::files;
        ModelT<double> file_model(file_cfg);
        file_model.init_params(1);
        CHECK_THROWS_AS(
            file_model.predict_pair(tape, tox, EntityInputT<double>::from_matrix(wrong), Mode::eval),
            ConfigError);
    }
}

TEST_CASE("multi_head_attention hand cases") {
    SECTION("single head, one key: weight is exactly 1, output is that value row") {
        RawMha<double> raw(2);
        TapeT<double> tape(false);
        auto q = tape.constant(TensorT<double>({1, 2}, {0.3, -0.7}));
        auto kv = tape.constant(TensorT<double>({1, 2}, {5.0, 6.0}));
        std::vector<TensorT<double>> w;
        auto out = multi_head_attention(tape, raw.params, q, kv, 1, &w);
        REQUIRE(w.size() == 1);
        CHECK(w[0].numel() == 1);
        CHECK(w[0][0] == 1.0);
        CHECK(out->value[0] == 5.0);
        CHECK(out->value[1] == 6.0);
    }

    SECTION("queries orthogonal to all keys give uniform weights and the V column mean") {
        RawMha<double> raw(2);
        TapeT<double> tape(false);
        auto q = tape.constant(TensorT<double>({1, 2}, {1.0, 0.0}));
        auto kv = tape.constant(TensorT<double>({3, 2}, {0.0, 1.0, 0.0, 2.0, 0.0, -1.0}));
        std::vector<TensorT<double>> w;
        auto out = multi_head_attention(tape, raw.params, q, kv, 1, &w);
        for (i64 j = 0; j < 3; ++j) CHECK(w[0][j] == Catch::Approx(1.0 / 3.0));
        CHECK(out->value[0] == Catch::Approx(0.0));
        CHECK(out->value[1] == Catch::Approx(2.0 / 3.0));
    }

    SECTION("h=1, d=2 worked example: weights [0.6698, 0.3302]") {
        RawMha<double> raw(2);
        TapeT<double> tape(false);
        auto q = tape.constant(TensorT<double>({1, 2}, {1.0, 0.0}));
        auto kv = tape.constant(TensorT<double>({2, 2}, {1.0, 0.0, 0.0, 1.0}));
        std::vector<TensorT<double>> w;
        auto out = multi_head_attention(tape, raw.params, q, kv, 1, &w);
        CHECK(w[0][0] == Catch::Approx(0.6698).margin(5e-5));
        CHECK(w[0][1] == Catch::Approx(0.3302).margin(5e-5));
        CHECK(out->value[0] == Catch::Approx(0.6698).margin(5e-5));
        CHECK(out->value[1] == Catch::Approx(0.3302).margin(5e-5));
    }

    SECTION("attention rows sum to 1 for random inputs, all heads") {
        RngStream rng(21);
        RawMha<double> raw(8);
        for (int trial = 0; trial < 10; ++trial) {
            TapeT<double> tape(false);
            auto q = tape.constant(random_matrix<double>(5, 8, rng));
            auto kv = tape.constant(random_matrix<double>(7, 8, rng));
            std::vector<TensorT<double>> w;
            multi_head_attention(tape, raw.params, q, kv, 4, &w);
            REQUIRE(w.size() == 4);
            for (const auto& head : w) {
                REQUIRE(head.rows() == 5);
                REQUIRE(head.cols() == 7);
                for (i64 r = 0; r < 5; ++r) {
                    double sum = 0;
                    for (i64 c = 0; c < 7; ++c) sum += head.at(r, c);
                    CHECK(std::abs(sum - 1.0) <= 1e-5);
                }
            }
        }
    }

    SECTION("indivisible head count is a config error") {
        RawMha<double> raw(6);
        TapeT<double> tape(false);
        RngStream rng(1);
        auto q = tape.constant(random_matrix<double>(2, 6, rng));
        CHECK_THROWS_AS(multi_head_attention(tape, raw.params, q, q, 4), ConfigError);
    }
}

TEST_CASE("interaction layer") {
    ModelConfig cfg = tiny_config();
    RngStream rng(13);

    SECTION("zero attention/FFN weights pass both tracks through unchanged") {
        ModelT<double> model(cfg);
        model.init_params(3);
        for (auto& p : model.parameters()) {
            if (p->name.find("layer") == 0 &&
                (p->name.find(".w") != std::string::npos || p->name.find(".b") != std::string::npos)) {
                // zero every attention/FFN weight and bias, keep LN params
                if (p->name.find("_ln") == std::string::npos) p->value.fill(0.0);
            }
        }
        TapeT<double> tape(false);
        auto ht = tape.constant(random_matrix<double>(4, cfg.hidden, rng));
        auto hp = tape.constant(random_matrix<double>(6, cfg.hidden, rng));
        auto [t_out, p_out] = model.interaction_forward(tape, 0, ht, hp);
        CHECK(bitwise_equal(t_out->value, ht->value));
        CHECK(bitwise_equal(p_out->value, hp->value));
    }

    SECTION("cross-attention rows sum to 1 and shapes follow (layers, heads, n, m)") {
        ModelT<double> model(cfg);
        model.init_params(11);
        const i64 n = 5, m = 9;
        TapeT<double> tape(false);
        EntityInputT<double> tox = EntityInputT<double>::from_tokens({0, 1, 2, 3, 4});
        EntityInputT<double> prot = EntityInputT<double>::from_tokens({5, 4, 3, 2, 1, 0, 1, 2, 3});
        auto r = model.predict_pair(tape, tox, prot, Mode::eval, nullptr, true);
        REQUIRE(r.attention.layers.size() == static_cast<std::size_t>(cfg.num_interaction_layers));
        for (const auto& layer : r.attention.layers) {
            REQUIRE(layer.toxin_self.size() == static_cast<std::size_t>(cfg.heads));
            REQUIRE(layer.cross.size() == static_cast<std::size_t>(cfg.heads));
            for (const auto& h : layer.toxin_self) {
                CHECK(h.rows() == n);
                CHECK(h.cols() == n);
            }
            for (const auto& h : layer.cross) {
                CHECK(h.rows() == n);
                CHECK(h.cols() == m);
                for (i64 i = 0; i < n; ++i) {
                    double sum = 0;
                    for (i64 j = 0; j < m; ++j) sum += h.at(i, j);
                    CHECK(std::abs(sum - 1.0) <= 1e-5);
                }
            }
        }
        CHECK(r.attention.interaction_map.rows() == n);
        CHECK(r.attention.interaction_map.cols() == m);
    }

    SECTION("permuting protein rows permutes cross-attention columns identically") {
        ModelT<double> model(cfg);
        model.init_params(17);
        const i64 n = 4, m = 7;
        auto ht0 = random_matrix<double>(n, cfg.hidden, rng);
        auto hp0 = random_matrix<double>(m, cfg.hidden, rng);
        std::vector<i64> perm = {3, 0, 6, 2, 5, 1, 4};
        TensorT<double> hp_perm({m, cfg.hidden});
        for (i64 i = 0; i < m; ++i)
            for (i64 c = 0; c < cfg.hidden; ++c)
                hp_perm.at(i, c) = hp0.at(perm[static_cast<std::size_t>(i)], c);

        TapeT<double> tape(false);
        LayerAttentionT<double> a0, a1;
        model.interaction_forward(tape, 0, tape.constant(ht0), tape.constant(hp0), &a0);
        model.interaction_forward(tape, 0, tape.constant(ht0), tape.constant(hp_perm), &a1);
        for (std::size_t h = 0; h < a0.cross.size(); ++h) {
            for (i64 i = 0; i < n; ++i)
                for (i64 j = 0; j < m; ++j) {
                    CHECK(a1.cross[h].at(i, j) ==
                          Catch::Approx(a0.cross[h].at(i, perm[static_cast<std::size_t>(j)]))
                              .margin(1e-12));
                }
        }
    }

    SECTION("bidirectional flag adds a protein cross track") {
        ModelConfig bi = cfg;
        bi.bidirectional_cross = true;
        ModelT<double> model(bi);
        model.init_params(19);
        TapeT<double> tape(false);
        EntityInputT<double> tox = EntityInputT<double>::from_tokens({0, 1, 2});
        EntityInputT<double> prot = EntityInputT<double>::from_tokens({3, 4});
        auto r = model.predict_pair(tape, tox, prot, Mode::eval, nullptr, true);
        for (const auto& layer : r.attention.layers) {
            REQUIRE(layer.protein_cross.size() == static_cast<std::size_t>(bi.heads));
            CHECK(layer.protein_cross[0].rows() == 2);
            CHECK(layer.protein_cross[0].cols() == 3);
        }
        CHECK_NOTHROW(model.param("layer0.p.cross.wq"));
        ModelT<double> uni(cfg);
        CHECK_THROWS_AS(uni.param("layer0.p.cross.wq"), UsageError);
    }
}

TEST_CASE("weighted_pool") {
    TapeT<double> tape(false);

    SECTION("identical rows collapse to that row") {
        TensorT<double> x({3, 2}, {1.5, -2.0, 1.5, -2.0, 1.5, -2.0});
        auto out = weighted_pool(tape, tape.constant(x));
        CHECK(out->value[0] == Catch::Approx(1.5));
        CHECK(out->value[1] == Catch::Approx(-2.0));
    }

    SECTION("rows [3,4] and [0,0]: weights softmax([5,0])") {
        TensorT<double> x({2, 2}, {3.0, 4.0, 0.0, 0.0});
        auto out = weighted_pool(tape, tape.constant(x));
        CHECK(out->value[0] == Catch::Approx(2.9799).margin(1e-4));
        CHECK(out->value[1] == Catch::Approx(3.9732).margin(1e-4));
    }

    SECTION("single row passes through") {
        TensorT<double> x({1, 3}, {7.0, -1.0, 0.5});
        auto out = weighted_pool(tape, tape.constant(x));
        for (i64 i = 0; i < 3; ++i) CHECK(out->value[i] == Catch::Approx(x[i]));
    }
}

TEST_CASE("predict_pair") {
    ModelConfig cfg = tiny_config();
    EntityInputT<double> tox = EntityInputT<double>::from_tokens({1, 3, 5, 7});
    EntityInputT<double> prot = EntityInputT<double>::from_tokens({0, 2, 4, 6, 8, 10});

    SECTION("all-zero head weights give p = 0.5 exactly") {
        ModelT<double> model(cfg);
        model.init_params(23);
        for (auto& p : model.parameters()) {
            if (p->name.rfind("head", 0) == 0 && p->name.find("_ln") == std::string::npos) {
                p->value.fill(0.0);
            }
        }
        TapeT<double> tape(false);
        auto r = model.predict_pair(tape, tox, prot, Mode::eval);
        CHECK(r.prob->value[0] == 0.5);
    }

    SECTION("eval mode is deterministic bit-for-bit; train mode with dropout is not") {
        ModelT<double> model(cfg);
        model.init_params(29);
        TapeT<double> t1(false), t2(false);
        auto r1 = model.predict_pair(t1, tox, prot, Mode::eval);
        auto r2 = model.predict_pair(t2, tox, prot, Mode::eval);
        CHECK(bitwise_equal(r1.prob->value, r2.prob->value));
        CHECK(bitwise_equal(r1.o1->value, r2.o1->value));
        CHECK(bitwise_equal(r1.o2->value, r2.o2->value));

        RngStream rng(1);
        TapeT<double> t3, t4;
        auto r3 = model.predict_pair(t3, tox, prot, Mode::train, &rng);
        auto r4 = model.predict_pair(t4, tox, prot, Mode::train, &rng);
        CHECK_FALSE(bitwise_equal(r3.prob->value, r4.prob->value));
    }

    SECTION("probability lands strictly inside (0,1) for many shapes") {
        ModelT<double> model(cfg);
        model.init_params(31);
        RngStream rng(8);
        for (int trial = 0; trial < 8; ++trial) {
            const i64 n = 1 + static_cast<i64>(rng.bounded(10));
            const i64 m = 1 + static_cast<i64>(rng.bounded(12));
            std::vector<i64> tt, pt;
            for (i64 i = 0; i < n; ++i) tt.push_back(static_cast<i64>(rng.bounded(20)));
            for (i64 i = 0; i < m; ++i) pt.push_back(static_cast<i64>(rng.bounded(20)));
            TapeT<double> tape(false);
            auto r = model.predict_pair(tape, EntityInputT<double>::from_tokens(tt),
                                        EntityInputT<double>::from_tokens(pt), Mode::eval);
            const double p = r.prob->value[0];
            CHECK(p > 0.0);
            CHECK(p < 1.0);
            CHECK(r.o1->value.cols() == cfg.hidden);
            CHECK(r.o2->value.cols() == cfg.hidden);
        }
    }

    SECTION("full-model gradient check against FD on a toy pair") {
        ModelT<double> model(cfg);
        model.init_params(37);
        auto report = grad_check_params<double>(
            [&](TapeT<double>& tape) {
                auto r = model.predict_pair(tape, tox, prot, Mode::eval);
                return tape.bce(r.prob, 1);
            },
            model.parameters(), 1e-4, 1e-3, 4, 99);
        INFO("worst " << report.worst << " rel err " << report.max_rel_err);
        CHECK(report.pass);
    }
}

TEST_CASE("deepcnn variant") {
    ModelConfig cfg = tiny_config(ModelVariant::deepcnn);
    cfg.conv_kernel = 1;  // width-1 kernel keeps encoding position-wise

    SECTION("zero head weights give 0.5") {
        ModelT<double> model(cfg);
        model.init_params(41);
        for (auto& p : model.parameters())
            if (p->name.rfind("head", 0) == 0 && p->name.find("_ln") == std::string::npos)
                p->value.fill(0.0);
        TapeT<double> tape(false);
        auto r = model.predict_pair(tape, EntityInputT<double>::from_tokens({1, 2}),
                                    EntityInputT<double>::from_tokens({3, 4, 5}), Mode::eval);
        CHECK(r.prob->value[0] == 0.5);
    }

    SECTION("no interaction parameters exist") {
        ModelT<double> model(cfg);
        CHECK_THROWS_AS(model.param("layer0.t.self.wq"), UsageError);
    }

    SECTION("output is invariant to protein token permutation") {
        ModelT<double> model(cfg);
        model.init_params(43);
        std::vector<i64> prot = {0, 5, 9, 2, 7, 1};
        std::vector<i64> perm = {7, 2, 0, 1, 9, 5};
        TapeT<double> t1(false), t2(false);
        auto r1 = model.predict_pair(t1, EntityInputT<double>::from_tokens({1, 2, 3}),
                                     EntityInputT<double>::from_tokens(prot), Mode::eval);
        auto r2 = model.predict_pair(t2, EntityInputT<double>::from_tokens({1, 2, 3}),
                                     EntityInputT<double>::from_tokens(perm), Mode::eval);
        CHECK(r1.prob->value[0] == Catch::Approx(r2.prob->value[0]).margin(1e-12));
    }

    SECTION("with a wide kernel the permutation sensitivity is the conv's doing") {
        ModelConfig wide = tiny_config(ModelVariant::deepcnn);
        ModelT<double> model(wide);
        model.init_params(43);
        std::vector<i64> prot = {0, 5, 9, 2, 7, 1};
        std::vector<i64> perm = {7, 2, 0, 1, 9, 5};
        TapeT<double> t1(false), t2(false);
        auto r1 = model.predict_pair(t1, EntityInputT<double>::from_tokens({1, 2, 3}),
                                     EntityInputT<double>::from_tokens(prot), Mode::eval);
        auto r2 = model.predict_pair(t2, EntityInputT<double>::from_tokens({1, 2, 3}),
                                     EntityInputT<double>::from_tokens(perm), Mode::eval);
        CHECK(r1.prob->value[0] != r2.prob->value[0]);
    }

    SECTION("hotspots are refused") {
        ModelT<double> model(cfg);
        model.init_params(1);
        CHECK_THROWS_AS(model.extract_hotspots(EntityInputT<double>::from_tokens({1}),
                                               EntityInputT<double>::from_tokens({2}), 1, 0),
                        UsageError);
    }
}

TEST_CASE("extract_hotspots") {
    // A model rigged so the interaction map has known column scores: use the
    // real model but override via a direct check of ordering on its output.
    ModelConfig cfg = tiny_config();
    ModelT<double> model(cfg);
    model.init_params(47);
    EntityInputT<double> tox = EntityInputT<double>::from_tokens({1, 2, 3});
    EntityInputT<double> prot = EntityInputT<double>::from_tokens({4, 5, 6, 7, 8});

    SECTION("k equal to m returns every residue exactly once, sorted by score then residue") {
        auto spots = model.extract_hotspots(tox, prot, 5, 0);
        REQUIRE(spots.size() == 5);
        std::set<i64> residues;
        for (const auto& s : spots) residues.insert(s.residue);
        CHECK(residues == std::set<i64>{1, 2, 3, 4, 5});
        for (std::size_t i = 1; i < spots.size(); ++i) {
            const bool ordered = spots[i - 1].score > spots[i].score ||
                                 (spots[i - 1].score == spots[i].score &&
                                  spots[i - 1].residue < spots[i].residue);
            CHECK(ordered);
        }
    }

    SECTION("top-k agrees with a brute-force sort of the interaction map columns") {
        TapeT<double> tape(false);
        auto r = model.predict_pair(tape, tox, prot, Mode::eval, nullptr, true);
        const auto& m = r.attention.interaction_map;
        std::vector<std::pair<double, i64>> ref;
        for (i64 j = 0; j < m.cols(); ++j) {
            double s = 0;
            for (i64 i = 0; i < m.rows(); ++i) s += m.at(i, j);
            ref.emplace_back(s / static_cast<double>(m.rows()), j + 1);
        }
        std::sort(ref.begin(), ref.end(), [](auto& a, auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        auto spots = model.extract_hotspots(tox, prot, 3, 0);
        for (int i = 0; i < 3; ++i) {
            CHECK(spots[static_cast<std::size_t>(i)].residue == ref[static_cast<std::size_t>(i)].second);
            CHECK(spots[static_cast<std::size_t>(i)].score ==
                  Catch::Approx(ref[static_cast<std::size_t>(i)].first));
        }
    }

    SECTION("residue_offset shifts reported numbers") {
        auto base = model.extract_hotspots(tox, prot, 2, 0);
        auto shifted = model.extract_hotspots(tox, prot, 2, 100);
        CHECK(shifted[0].residue == base[0].residue + 100);
        CHECK(shifted[0].score == base[0].score);
    }

    SECTION("k out of range is a usage error") {
        CHECK_THROWS_AS(model.extract_hotspots(tox, prot, 6, 0), UsageError);
        CHECK_THROWS_AS(model.extract_hotspots(tox, prot, 0, 0), UsageError);
    }

    SECTION("max aggregation differs from mean when a single row dominates") {
        ModelConfig mx = cfg;
        mx.hotspot_agg = HotspotAgg::max;
        ModelT<double> mmax(mx);
        mmax.init_params(47);  // same weights as `model`
        auto mean_spots = model.extract_hotspots(tox, prot, 5, 0);
        auto max_spots = mmax.extract_hotspots(tox, prot, 5, 0);
        // same residues available; scores computed differently
        CHECK(max_spots[0].score >= mean_spots[0].score);
    }
}

TEST_CASE("parameter initialization is seed-deterministic and spans both precisions") {
    ModelConfig cfg = tiny_config();
    ModelT<float> a(cfg), b(cfg);
    a.init_params(123);
    b.init_params(123);
    REQUIRE(a.parameters().size() == b.parameters().size());
    for (std::size_t i = 0; i < a.parameters().size(); ++i) {
        CHECK(bitwise_equal(a.parameters()[i]->value, b.parameters()[i]->value));
    }
    ModelT<float> c(cfg);
    c.init_params(124);
    bool any_diff = false;
    for (std::size_t i = 0; i < a.parameters().size(); ++i) {
        if (!bitwise_equal(a.parameters()[i]->value, c.parameters()[i]->value)) any_diff = true;
    }
    CHECK(any_diff);

    // the double model mirrors the float one within cast precision
    ModelT<double> d(cfg);
    d.init_params(123);
    for (std::size_t i = 0; i < a.parameters().size(); ++i) {
        CHECK(a.parameters()[i]->name == d.parameters()[i]->name);
        for (i64 j = 0; j < a.parameters()[i]->value.numel(); ++j) {
            CHECK(static_cast<float>(d.parameters()[i]->value[j]) ==
                  Catch::Approx(a.parameters()[i]->value[j]).margin(1e-6));
        }
    }
}
