#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tipformer/autodiff.hpp"
#include "tipformer/common.hpp"
#include "tipformer/embedding.hpp"
#include "tipformer/tensor.hpp"

namespace tipformer {

enum class ModelVariant { tipformer, deepcnn };
enum class EmbedSource { files, fallback };
enum class HotspotAgg { mean, max };

inline std::string to_string(ModelVariant v) {
    return v == ModelVariant::tipformer ? "tipformer" : "deepcnn";
}

inline std::string to_string(EmbedSource s) {
    return s == EmbedSource::files ? "files" : "fallback";
}

inline std::string to_string(HotspotAgg a) { return a == HotspotAgg::mean ? "mean" : "max"; }

inline ModelVariant parse_variant(const std::string& s) {
    if (s == "tipformer") return ModelVariant::tipformer;
    if (s == "deepcnn") return ModelVariant::deepcnn;
    throw ConfigError("unknown model variant '" + s + "' (tipformer|deepcnn)");
}

inline EmbedSource parse_embed_source(const std::string& s) {
    if (s == "files") return EmbedSource::files;
    if (s == "fallback") return EmbedSource::fallback;
    throw ConfigError("unknown embedding source '" + s + "' (files|fallback)");
}

inline HotspotAgg parse_hotspot_agg(const std::string& s) {
    if (s == "mean") return HotspotAgg::mean;
    if (s == "max") return HotspotAgg::max;
    throw ConfigError("unknown hotspot aggregation '" + s + "' (mean|max)");
}

struct ModelConfig {
    i64 hidden = 32;
    i64 heads = 8;
    i64 num_interaction_layers = 2;
    i64 conv_kernel = 3;
    i64 ffn_hidden = 0;             // 0 resolves to 2*hidden
    double dropout_rate = 0.2;
    std::vector<i64> head_dims;     // output widths; empty resolves to {d, d, d/2, 1}
    ModelVariant variant = ModelVariant::tipformer;
    bool bidirectional_cross = false;
    EmbedSource embed_source = EmbedSource::fallback;
    i64 toxin_input_dim = 64;
    i64 protein_input_dim = 64;
    i64 toxin_vocab = 0;            // 0 resolves to the built-in SMILES vocabulary
    i64 protein_vocab = 0;          // 0 resolves to the built-in residue vocabulary
    HotspotAgg hotspot_agg = HotspotAgg::mean;

    // Fills derived defaults so two configs compare field-by-field.
    void resolve() {
        if (ffn_hidden == 0) ffn_hidden = 2 * hidden;
        if (head_dims.empty()) head_dims = {hidden, hidden, hidden / 2, 1};
        if (toxin_vocab == 0) toxin_vocab = smiles_vocab_size();
        if (protein_vocab == 0) protein_vocab = protein_vocab_size();
    }

    void validate() const {
        if (hidden < 2) throw ConfigError("hidden must be at least 2");
        if (heads < 1) throw ConfigError("heads must be positive");
        if (hidden % heads != 0) {
            throw ConfigError("hidden (" + std::to_string(hidden) + ") must be divisible by heads (" +
                              std::to_string(heads) + ")");
        }
        if (num_interaction_layers < 1) throw ConfigError("need at least one interaction layer");
        if (conv_kernel < 1 || conv_kernel % 2 == 0) {
            throw ConfigError("conv_kernel must be odd and positive, got " + std::to_string(conv_kernel));
        }
        if (ffn_hidden < 1) throw ConfigError("ffn_hidden must be positive");
        if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
            throw ConfigError("dropout_rate must be in [0, 1), got " + std::to_string(dropout_rate));
        }
        if (head_dims.empty() || head_dims.back() != 1) {
            throw ConfigError("head_dims must end in 1");
        }
        for (i64 w : head_dims)
            if (w < 1) throw ConfigError("head_dims must all be positive");
        if (toxin_input_dim < 1 || protein_input_dim < 1) {
            throw ConfigError("input embedding dims must be positive");
        }
        if (embed_source == EmbedSource::fallback && (toxin_vocab < 1 || protein_vocab < 1)) {
            throw ConfigError("fallback embeddings need positive vocabulary sizes");
        }
    }

    std::vector<std::pair<std::string, std::string>> to_kv() const {
        auto fmt_f = [](double v) {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%.17g", v);
            return std::string(buf);
        };
        std::string dims;
        for (std::size_t i = 0; i < head_dims.size(); ++i) {
            if (i) dims += ',';
            dims += std::to_string(head_dims[i]);
        }
        return {
            {"model.hidden", std::to_string(hidden)},
            {"model.heads", std::to_string(heads)},
            {"model.num_interaction_layers", std::to_string(num_interaction_layers)},
            {"model.conv_kernel", std::to_string(conv_kernel)},
            {"model.ffn_hidden", std::to_string(ffn_hidden)},
            {"model.dropout_rate", fmt_f(dropout_rate)},
            {"model.head_dims", dims},
            {"model.variant", to_string(variant)},
            {"model.bidirectional_cross", bidirectional_cross ? "true" : "false"},
            {"model.embed_source", to_string(embed_source)},
            {"model.toxin_input_dim", std::to_string(toxin_input_dim)},
            {"model.protein_input_dim", std::to_string(protein_input_dim)},
            {"model.toxin_vocab", std::to_string(toxin_vocab)},
            {"model.protein_vocab", std::to_string(protein_vocab)},
            {"model.hotspot_agg", to_string(hotspot_agg)},
        };
    }

    static ModelConfig from_kv(const std::map<std::string, std::string>& kv) {
        auto need = [&](const std::string& key) -> const std::string& {
            auto it = kv.find(key);
            if (it == kv.end()) throw FormatError("missing config key '" + key + "'");
            return it->second;
        };
        auto to_i = [&](const std::string& key) {
            const std::string& s = need(key);
            try {
                return static_cast<i64>(std::stoll(s));
            } catch (const std::exception&) {
                throw FormatError("config key '" + key + "' is not an integer: '" + s + "'");
            }
        };
        ModelConfig c;
        c.hidden = to_i("model.hidden");
        c.heads = to_i("model.heads");
        c.num_interaction_layers = to_i("model.num_interaction_layers");
        c.conv_kernel = to_i("model.conv_kernel");
        c.ffn_hidden = to_i("model.ffn_hidden");
        try {
            c.dropout_rate = std::stod(need("model.dropout_rate"));
        } catch (const std::exception&) {
            throw FormatError("config key 'model.dropout_rate' is not a number");
        }
        c.head_dims.clear();
        if (const std::string& dims = need("model.head_dims"); !dims.empty()) {
            std::size_t start = 0;
            while (start <= dims.size()) {
                const std::size_t comma = dims.find(',', start);
                const std::string tok = dims.substr(start, comma == std::string::npos ? std::string::npos
                                                                                      : comma - start);
                if (tok.empty()) throw FormatError("bad model.head_dims entry in '" + dims + "'");
                try {
                    c.head_dims.push_back(static_cast<i64>(std::stoll(tok)));
                } catch (const std::exception&) {
                    throw FormatError("bad model.head_dims entry '" + tok + "'");
                }
                if (comma == std::string::npos) break;
                start = comma + 1;
            }
        }
        c.variant = parse_variant(need("model.variant"));
        const std::string& bc = need("model.bidirectional_cross");
        if (bc != "true" && bc != "false") throw FormatError("model.bidirectional_cross must be true|false");
        c.bidirectional_cross = (bc == "true");
        c.embed_source = parse_embed_source(need("model.embed_source"));
        c.toxin_input_dim = to_i("model.toxin_input_dim");
        c.protein_input_dim = to_i("model.protein_input_dim");
        c.toxin_vocab = to_i("model.toxin_vocab");
        c.protein_vocab = to_i("model.protein_vocab");
        c.hotspot_agg = parse_hotspot_agg(need("model.hotspot_agg"));
        c.resolve();
        c.validate();
        return c;
    }
};

// ---------------------------------------------------------------------------
// Parameter bundles
// ---------------------------------------------------------------------------

template <typename S>
struct MhaParamsT {
    ValueT<S> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename S>
struct LnParamsT {
    ValueT<S> g, b;
};

template <typename S>
struct FfnParamsT {
    ValueT<S> w1, b1, w2, b2;
};

template <typename S>
struct EncoderParamsT {
    ValueT<S> proj_w, proj_b, conv_k, conv_b;
    LnParamsT<S> ln;
};

template <typename S>
struct InteractionLayerParamsT {
    MhaParamsT<S> t_self;
    LnParamsT<S> t_self_ln;
    MhaParamsT<S> t_cross;
    LnParamsT<S> t_cross_ln;
    FfnParamsT<S> t_ffn;
    LnParamsT<S> t_ffn_ln;
    MhaParamsT<S> p_self;
    LnParamsT<S> p_self_ln;
    bool has_p_cross = false;
    MhaParamsT<S> p_cross;
    LnParamsT<S> p_cross_ln;
    FfnParamsT<S> p_ffn;
    LnParamsT<S> p_ffn_ln;
};

// ---------------------------------------------------------------------------
// Free building blocks (also exercised directly by tests)
// ---------------------------------------------------------------------------

template <typename S>
ValueT<S> linear(TapeT<S>& tape, const ValueT<S>& x, const ValueT<S>& w, const ValueT<S>& b) {
    return tape.add_row_vector(tape.matmul(x, w), b);
}

// Scaled dot-product attention over `heads` slices of width d/heads; the
// concatenated head outputs are mixed by wo. Self-attention is q_src == kv_src.
// weights_out, when given, receives one [L_q x L_k] row-stochastic matrix per head.
template <typename S>
ValueT<S> multi_head_attention(TapeT<S>& tape, const MhaParamsT<S>& p, const ValueT<S>& q_src,
                               const ValueT<S>& kv_src, i64 heads,
                               std::vector<TensorT<S>>* weights_out = nullptr) {
    const i64 d = q_src->value.cols();
    if (kv_src->value.cols() != d) {
        throw ShapeError("multi_head_attention: query dim " + std::to_string(d) +
                         " differs from key/value dim " + std::to_string(kv_src->value.cols()));
    }
    if (heads < 1 || d % heads != 0) {
        throw ConfigError("multi_head_attention: dim " + std::to_string(d) +
                          " not divisible into " + std::to_string(heads) + " heads");
    }
    const i64 dk = d / heads;
    auto q = linear(tape, q_src, p.wq, p.bq);
    auto k = linear(tape, kv_src, p.wk, p.bk);
    auto v = linear(tape, kv_src, p.wv, p.bv);
    const S inv_sqrt_dk = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dk)));
    std::vector<ValueT<S>> head_outs;
    head_outs.reserve(static_cast<std::size_t>(heads));
    for (i64 h = 0; h < heads; ++h) {
        auto qi = tape.slice_cols(q, h * dk, dk);
        auto ki = tape.slice_cols(k, h * dk, dk);
        auto vi = tape.slice_cols(v, h * dk, dk);
        auto attn = tape.softmax(tape.scale(tape.matmul_nt(qi, ki), inv_sqrt_dk), 1);
        if (weights_out) weights_out->push_back(attn->value);
        head_outs.push_back(tape.matmul(attn, vi));
    }
    auto cat = (heads == 1) ? head_outs[0] : tape.concat_cols(head_outs);
    return linear(tape, cat, p.wo, p.bo);
}

// Positions weighted by a softmax over their L2 norms, then summed.
template <typename S>
ValueT<S> weighted_pool(TapeT<S>& tape, const ValueT<S>& feats) {
    auto w = tape.softmax(tape.row_l2_norms(feats), 1);  // [1 x L]
    return tape.matmul(w, feats);                        // [1 x d]
}

// ---------------------------------------------------------------------------
// Attention artifacts
// ---------------------------------------------------------------------------

template <typename S>
struct LayerAttentionT {
    std::vector<TensorT<S>> toxin_self;     // heads x [n x n]
    std::vector<TensorT<S>> protein_self;   // heads x [m x m]
    std::vector<TensorT<S>> cross;          // heads x [n x m], toxin queries
    std::vector<TensorT<S>> protein_cross;  // heads x [m x n], only if bidirectional
};

template <typename S>
struct AttentionMapT {
    std::vector<LayerAttentionT<S>> layers;
    TensorT<S> interaction_map;  // [n x m]
};

template <typename S>
struct EncoderActivationT {
    ValueT<S> projected;   // [L x d]
    ValueT<S> gated;       // [L x d]
    ValueT<S> normalized;  // [L x d]
};

template <typename S>
struct ForwardResultT {
    ValueT<S> prob;  // [1 x 1]
    ValueT<S> o1;    // [1 x d] pooled toxin representation
    ValueT<S> o2;    // [1 x d] pooled protein representation
    AttentionMapT<S> attention;  // populated only when requested
};

struct Hotspot {
    i64 residue = 0;
    double score = 0.0;
};

// Model input for one entity: a precomputed [L x D] matrix or a token list
// for the trainable fallback tables.
template <typename S>
struct EntityInputT {
    TensorT<S> matrix;
    std::vector<i64> tokens;
    bool use_matrix = false;

    static EntityInputT from_matrix(TensorT<S> m) {
        EntityInputT e;
        e.matrix = std::move(m);
        e.use_matrix = true;
        return e;
    }

    static EntityInputT from_tokens(std::vector<i64> t) {
        EntityInputT e;
        e.tokens = std::move(t);
        return e;
    }
};

// ---------------------------------------------------------------------------
// The model
// ---------------------------------------------------------------------------

template <typename S>
class ModelT {
public:
    enum class ParamKind { weight, bias, ln_gamma, ln_beta, table };

    explicit ModelT(ModelConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.resolve();
        cfg_.validate();
        const i64 d = cfg_.hidden;

        if (cfg_.embed_source == EmbedSource::fallback) {
            toxin_table_ = make_param("embed.toxin.table", {cfg_.toxin_vocab, cfg_.toxin_input_dim},
                                      ParamKind::table, cfg_.toxin_input_dim);
            protein_table_ = make_param("embed.protein.table",
                                        {cfg_.protein_vocab, cfg_.protein_input_dim},
                                        ParamKind::table, cfg_.protein_input_dim);
        }

        enc_t_ = make_encoder("enc_t", cfg_.toxin_input_dim, d);
        enc_p_ = make_encoder("enc_p", cfg_.protein_input_dim, d);

        if (cfg_.variant == ModelVariant::tipformer) {
            for (i64 l = 0; l < cfg_.num_interaction_layers; ++l) {
                const std::string pre = "layer" + std::to_string(l) + ".";
                InteractionLayerParamsT<S> lp;
                lp.t_self = make_mha(pre + "t.self", d);
                lp.t_self_ln = make_ln(pre + "t.self_ln", d);
                lp.t_cross = make_mha(pre + "t.cross", d);
                lp.t_cross_ln = make_ln(pre + "t.cross_ln", d);
                lp.t_ffn = make_ffn(pre + "t.ffn", d);
                lp.t_ffn_ln = make_ln(pre + "t.ffn_ln", d);
                lp.p_self = make_mha(pre + "p.self", d);
                lp.p_self_ln = make_ln(pre + "p.self_ln", d);
                lp.has_p_cross = cfg_.bidirectional_cross;
                if (lp.has_p_cross) {
                    lp.p_cross = make_mha(pre + "p.cross", d);
                    lp.p_cross_ln = make_ln(pre + "p.cross_ln", d);
                }
                lp.p_ffn = make_ffn(pre + "p.ffn", d);
                lp.p_ffn_ln = make_ln(pre + "p.ffn_ln", d);
                layers_.push_back(std::move(lp));
            }
        }

        i64 in = 2 * d;
        for (std::size_t j = 0; j < cfg_.head_dims.size(); ++j) {
            const i64 out = cfg_.head_dims[j];
            head_w_.push_back(make_param("head" + std::to_string(j) + ".w", {in, out},
                                         ParamKind::weight, in));
            head_b_.push_back(make_param("head" + std::to_string(j) + ".b", {out}, ParamKind::bias));
            if (j + 1 < cfg_.head_dims.size()) {
                head_ln_.push_back(make_ln("head_ln" + std::to_string(j), out));
            }
            in = out;
        }
    }

    const ModelConfig& config() const { return cfg_; }
    const std::vector<ValueT<S>>& parameters() const { return params_; }

    ValueT<S> param(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw UsageError("no parameter named '" + name + "'");
        return params_[it->second];
    }

    i64 scalar_count() const {
        i64 n = 0;
        for (const auto& p : params_) n += p->value.numel();
        return n;
    }

    void init_params(u64 seed) {
        RngStream rng(derive_seed(seed, "model.init"));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& t = params_[i]->value;
            switch (metas_[i].kind) {
                case ParamKind::weight:
                case ParamKind::table:
                    fill_uniform(t, 1.0 / std::sqrt(static_cast<double>(metas_[i].fan_in)), rng);
                    break;
                case ParamKind::bias:
                case ParamKind::ln_beta:
                    t.fill(S(0));
                    break;
                case ParamKind::ln_gamma:
                    t.fill(S(1));
                    break;
            }
            params_[i]->grad.fill(S(0));
        }
    }

    void zero_grads() {
        for (auto& p : params_) p->grad.fill(S(0));
    }

    EncoderActivationT<S> encode(TapeT<S>& tape, const EncoderParamsT<S>& e, const ValueT<S>& input) const {
        EncoderActivationT<S> act;
        act.projected = linear(tape, input, e.proj_w, e.proj_b);
        auto conv = tape.conv1d(act.projected, e.conv_k, e.conv_b);
        act.gated = tape.glu(conv);
        act.normalized = tape.layer_norm(act.gated, e.ln.g, e.ln.b);
        return act;
    }

    const EncoderParamsT<S>& toxin_encoder() const { return enc_t_; }
    const EncoderParamsT<S>& protein_encoder() const { return enc_p_; }
    const InteractionLayerParamsT<S>& layer(i64 i) const {
        return layers_.at(static_cast<std::size_t>(i));
    }

    // One interaction layer: both tracks self-attend, toxin queries attend to
    // protein keys/values (optionally the reverse), then gated FFNs. Every
    // sublayer is x + f(norm(x)), so zeroed sublayer weights pass inputs through.
    std::pair<ValueT<S>, ValueT<S>> interaction_forward(TapeT<S>& tape, i64 layer_index,
                                                        const ValueT<S>& ht, const ValueT<S>& hp,
                                                        LayerAttentionT<S>* attn_out = nullptr) const {
        const auto& lp = layers_.at(static_cast<std::size_t>(layer_index));
        auto self_sub = [&](const MhaParamsT<S>& mp, const LnParamsT<S>& ln, const ValueT<S>& x,
                            std::vector<TensorT<S>>* w) {
            auto n = tape.layer_norm(x, ln.g, ln.b);
            return tape.add(x, multi_head_attention(tape, mp, n, n, cfg_.heads, w));
        };
        auto cross_sub = [&](const MhaParamsT<S>& mp, const LnParamsT<S>& ln, const ValueT<S>& q,
                             const ValueT<S>& kv, std::vector<TensorT<S>>* w) {
            auto nq = tape.layer_norm(q, ln.g, ln.b);
            return tape.add(q, multi_head_attention(tape, mp, nq, kv, cfg_.heads, w));
        };
        auto ffn_sub = [&](const FfnParamsT<S>& fp, const LnParamsT<S>& ln, const ValueT<S>& x) {
            auto n = tape.layer_norm(x, ln.g, ln.b);
            auto h = tape.glu(linear(tape, n, fp.w1, fp.b1));
            return tape.add(x, linear(tape, h, fp.w2, fp.b2));
        };

        auto t1 = self_sub(lp.t_self, lp.t_self_ln, ht, attn_out ? &attn_out->toxin_self : nullptr);
        auto p1 = self_sub(lp.p_self, lp.p_self_ln, hp, attn_out ? &attn_out->protein_self : nullptr);
        auto t2 = cross_sub(lp.t_cross, lp.t_cross_ln, t1, p1, attn_out ? &attn_out->cross : nullptr);
        auto p2 = lp.has_p_cross
                      ? cross_sub(lp.p_cross, lp.p_cross_ln, p1, t1,
                                  attn_out ? &attn_out->protein_cross : nullptr)
                      : p1;
        auto t3 = ffn_sub(lp.t_ffn, lp.t_ffn_ln, t2);
        auto p3 = ffn_sub(lp.p_ffn, lp.p_ffn_ln, p2);
        return {t3, p3};
    }

    ForwardResultT<S> predict_pair(TapeT<S>& tape, const EntityInputT<S>& toxin,
                                   const EntityInputT<S>& protein, Mode mode,
                                   RngStream* rng = nullptr, bool want_attention = false) const {
        auto tox_in = input_node(tape, toxin, toxin_table_, cfg_.toxin_input_dim, "toxin");
        auto prot_in = input_node(tape, protein, protein_table_, cfg_.protein_input_dim, "protein");

        auto ht = encode(tape, enc_t_, tox_in).normalized;
        auto hp = encode(tape, enc_p_, prot_in).normalized;

        ForwardResultT<S> result;
        if (cfg_.variant == ModelVariant::tipformer) {
            for (i64 l = 0; l < cfg_.num_interaction_layers; ++l) {
                LayerAttentionT<S>* slot = nullptr;
                if (want_attention) {
                    result.attention.layers.emplace_back();
                    slot = &result.attention.layers.back();
                }
                auto [t_next, p_next] = interaction_forward(tape, l, ht, hp, slot);
                ht = t_next;
                hp = p_next;
            }
            result.o1 = weighted_pool(tape, ht);
            result.o2 = weighted_pool(tape, hp);
        } else {
            result.o1 = tape.mean_rows(ht);
            result.o2 = tape.mean_rows(hp);
        }
        if (want_attention) result.attention.interaction_map = tape.matmul_nt(ht, hp)->value;

        auto x = tape.concat_cols({result.o1, result.o2});
        for (std::size_t j = 0; j < head_w_.size(); ++j) {
            x = linear(tape, x, head_w_[j], head_b_[j]);
            if (j + 1 < head_w_.size()) {
                x = tape.dropout(x, cfg_.dropout_rate, mode, rng);
                x = tape.layer_norm(x, head_ln_[j].g, head_ln_[j].b);
            }
        }
        result.prob = tape.sigmoid(x);
        return result;
    }

    // Raw input matrix for an entity: the provided matrix in files mode, the
    // gathered table rows in fallback mode. Used by model-free consumers such
    // as the KNN baseline.
    TensorT<S> entity_matrix(const EntityInputT<S>& in, bool is_toxin) const {
        if (in.use_matrix) return in.matrix;
        const auto& table = is_toxin ? toxin_table_ : protein_table_;
        if (!table) throw UsageError("model has no fallback embedding tables");
        if (in.tokens.empty()) throw DataError("empty token list");
        const i64 rows = table->value.rows(), d = table->value.cols();
        TensorT<S> m({static_cast<i64>(in.tokens.size()), d});
        for (std::size_t r = 0; r < in.tokens.size(); ++r) {
            const i64 tok = in.tokens[r];
            if (tok < 0 || tok >= rows) throw InternalError("token index out of range");
            for (i64 c = 0; c < d; ++c) m.at(static_cast<i64>(r), c) = table->value.at(tok, c);
        }
        return m;
    }

    std::vector<Hotspot> extract_hotspots(const EntityInputT<S>& toxin, const EntityInputT<S>& protein,
                                          i64 k, i64 residue_offset) const {
        if (cfg_.variant != ModelVariant::tipformer) {
            throw UsageError("hotspot extraction needs the tipformer variant");
        }
        TapeT<S> tape(false);
        auto r = predict_pair(tape, toxin, protein, Mode::eval, nullptr, true);
        const TensorT<S>& m = r.attention.interaction_map;
        const i64 cols = m.cols(), rows = m.rows();
        if (k < 1 || k > cols) {
            throw UsageError("hotspot k must be in [1, " + std::to_string(cols) + "], got " +
                             std::to_string(k));
        }
        std::vector<Hotspot> scored(static_cast<std::size_t>(cols));
        for (i64 j = 0; j < cols; ++j) {
            double s;
            if (cfg_.hotspot_agg == HotspotAgg::mean) {
                s = 0.0;
                for (i64 i = 0; i < rows; ++i) s += static_cast<double>(m.at(i, j));
                s /= static_cast<double>(rows);
            } else {
                s = static_cast<double>(m.at(0, j));
                for (i64 i = 1; i < rows; ++i) s = std::max(s, static_cast<double>(m.at(i, j)));
            }
            scored[static_cast<std::size_t>(j)] = {j + 1 + residue_offset, s};
        }
        std::sort(scored.begin(), scored.end(), [](const Hotspot& a, const Hotspot& b) {
            if (a.score != b.score) return a.score > b.score;
            return a.residue < b.residue;
        });
        scored.resize(static_cast<std::size_t>(k));
        return scored;
    }

private:
    struct ParamMeta {
        ParamKind kind;
        i64 fan_in;
    };

    ValueT<S> make_param(const std::string& name, std::vector<i64> shape, ParamKind kind,
                         i64 fan_in = 0) {
        auto p = make_parameter<S>(TensorT<S>(std::move(shape)), name);
        if (!index_.emplace(name, params_.size()).second) {
            throw InternalError("duplicate parameter name '" + name + "'");
        }
        params_.push_back(p);
        metas_.push_back({kind, fan_in});
        return p;
    }

    LnParamsT<S> make_ln(const std::string& prefix, i64 dim) {
        LnParamsT<S> ln;
        ln.g = make_param(prefix + ".g", {dim}, ParamKind::ln_gamma);
        ln.b = make_param(prefix + ".b", {dim}, ParamKind::ln_beta);
        return ln;
    }

    MhaParamsT<S> make_mha(const std::string& prefix, i64 d) {
        MhaParamsT<S> m;
        m.wq = make_param(prefix + ".wq", {d, d}, ParamKind::weight, d);
        m.bq = make_param(prefix + ".bq", {d}, ParamKind::bias);
        m.wk = make_param(prefix + ".wk", {d, d}, ParamKind::weight, d);
        m.bk = make_param(prefix + ".bk", {d}, ParamKind::bias);
        m.wv = make_param(prefix + ".wv", {d, d}, ParamKind::weight, d);
        m.bv = make_param(prefix + ".bv", {d}, ParamKind::bias);
        m.wo = make_param(prefix + ".wo", {d, d}, ParamKind::weight, d);
        m.bo = make_param(prefix + ".bo", {d}, ParamKind::bias);
        return m;
    }

    FfnParamsT<S> make_ffn(const std::string& prefix, i64 d) {
        FfnParamsT<S> f;
        f.w1 = make_param(prefix + ".w1", {d, 2 * cfg_.ffn_hidden}, ParamKind::weight, d);
        f.b1 = make_param(prefix + ".b1", {2 * cfg_.ffn_hidden}, ParamKind::bias);
        f.w2 = make_param(prefix + ".w2", {cfg_.ffn_hidden, d}, ParamKind::weight, cfg_.ffn_hidden);
        f.b2 = make_param(prefix + ".b2", {d}, ParamKind::bias);
        return f;
    }

    EncoderParamsT<S> make_encoder(const std::string& prefix, i64 d_in, i64 d) {
        EncoderParamsT<S> e;
        e.proj_w = make_param(prefix + ".proj.w", {d_in, d}, ParamKind::weight, d_in);
        e.proj_b = make_param(prefix + ".proj.b", {d}, ParamKind::bias);
        e.conv_k = make_param(prefix + ".conv.k", {cfg_.conv_kernel, d, 2 * d}, ParamKind::weight,
                              cfg_.conv_kernel * d);
        e.conv_b = make_param(prefix + ".conv.b", {2 * d}, ParamKind::bias);
        e.ln = make_ln(prefix + ".ln", d);
        return e;
    }

    ValueT<S> input_node(TapeT<S>& tape, const EntityInputT<S>& in, const ValueT<S>& table,
                         i64 want_dim, const char* side) const {
        if (cfg_.embed_source == EmbedSource::fallback) {
            if (in.use_matrix) {
                throw UsageError(std::string(side) +
                                 ": model uses fallback token embeddings, pass tokens not a matrix");
            }
            if (in.tokens.empty()) throw DataError(std::string(side) + ": empty token list");
            return tape.embedding_lookup(table, in.tokens);
        }
        if (!in.use_matrix) {
            throw UsageError(std::string(side) + ": model uses file embeddings, pass a matrix");
        }
        if (in.matrix.rank() != 2 || in.matrix.rows() < 1) {
            throw ShapeError(std::string(side) + ": embedding matrix must be [L x D], got " +
                             in.matrix.shape_str());
        }
        if (in.matrix.cols() != want_dim) {
            throw ConfigError(std::string(side) + ": embedding dim " + std::to_string(in.matrix.cols()) +
                              " does not match configured input dim " + std::to_string(want_dim));
        }
        return tape.constant(in.matrix);
    }

    ModelConfig cfg_;
    std::vector<ValueT<S>> params_;
    std::vector<ParamMeta> metas_;
    std::unordered_map<std::string, std::size_t> index_;
    ValueT<S> toxin_table_, protein_table_;
    EncoderParamsT<S> enc_t_, enc_p_;
    std::vector<InteractionLayerParamsT<S>> layers_;
    std::vector<ValueT<S>> head_w_, head_b_;
    std::vector<LnParamsT<S>> head_ln_;
};

using Model = ModelT<float>;

}  // namespace tipformer
