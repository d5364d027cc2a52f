#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <memory>
#include <ostream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tipformer/autodiff.hpp"
#include "tipformer/common.hpp"
#include "tipformer/corpus.hpp"
#include "tipformer/embedding.hpp"
#include "tipformer/model.hpp"
#include "tipformer/optim.hpp"
#include "tipformer/tensor.hpp"

namespace tipformer {

struct TrainConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    i64 lookahead_k = 5;
    double lookahead_alpha = 0.5;
    i64 batch_size = 1;
    double dropout_rate = 0.2;
    i64 max_epochs = 50;
    i64 patience = 10;
    u64 seed = 1;

    void validate() const {
        // learning_rate 0 is allowed so a zero-step run can serve as a
        // no-op determinism probe.
        if (learning_rate < 0.0) throw ConfigError("learning_rate must be non-negative");
        if (beta1 < 0.0 || beta1 >= 1.0) throw ConfigError("beta1 must be in [0, 1)");
        if (beta2 < 0.0 || beta2 >= 1.0) throw ConfigError("beta2 must be in [0, 1)");
        if (eps <= 0.0) throw ConfigError("eps must be positive");
        if (lookahead_k < 1) throw ConfigError("lookahead_k must be at least 1");
        if (lookahead_alpha <= 0.0 || lookahead_alpha > 1.0) {
            throw ConfigError("lookahead_alpha must be in (0, 1]");
        }
        if (batch_size != 1) {
            throw ConfigError("only batch_size 1 is supported, got " + std::to_string(batch_size));
        }
        if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
            throw ConfigError("dropout_rate must be in [0, 1)");
        }
        if (max_epochs < 1) throw ConfigError("max_epochs must be at least 1");
        if (patience < 1) throw ConfigError("patience must be at least 1");
    }

    OptimConfig optim() const { return OptimConfig{learning_rate, beta1, beta2, eps}; }

    std::vector<std::pair<std::string, std::string>> to_kv() const {
        auto fmt_f = [](double v) {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%.17g", v);
            return std::string(buf);
        };
        return {
            {"train.learning_rate", fmt_f(learning_rate)},
            {"train.beta1", fmt_f(beta1)},
            {"train.beta2", fmt_f(beta2)},
            {"train.eps", fmt_f(eps)},
            {"train.lookahead_k", std::to_string(lookahead_k)},
            {"train.lookahead_alpha", fmt_f(lookahead_alpha)},
            {"train.batch_size", std::to_string(batch_size)},
            {"train.dropout_rate", fmt_f(dropout_rate)},
            {"train.max_epochs", std::to_string(max_epochs)},
            {"train.patience", std::to_string(patience)},
            {"train.seed", std::to_string(seed)},
        };
    }

    static TrainConfig from_kv(const std::map<std::string, std::string>& kv) {
        auto need = [&](const std::string& key) -> const std::string& {
            auto it = kv.find(key);
            if (it == kv.end()) throw FormatError("missing config key '" + key + "'");
            return it->second;
        };
        auto to_f = [&](const std::string& key) {
            try {
                return std::stod(need(key));
            } catch (const FormatError&) {
                throw;
            } catch (const std::exception&) {
                throw FormatError("config key '" + key + "' is not a number");
            }
        };
        auto to_i = [&](const std::string& key) {
            try {
                return static_cast<i64>(std::stoll(need(key)));
            } catch (const FormatError&) {
                throw;
            } catch (const std::exception&) {
                throw FormatError("config key '" + key + "' is not an integer");
            }
        };
        TrainConfig c;
        c.learning_rate = to_f("train.learning_rate");
        c.beta1 = to_f("train.beta1");
        c.beta2 = to_f("train.beta2");
        c.eps = to_f("train.eps");
        c.lookahead_k = to_i("train.lookahead_k");
        c.lookahead_alpha = to_f("train.lookahead_alpha");
        c.batch_size = to_i("train.batch_size");
        c.dropout_rate = to_f("train.dropout_rate");
        c.max_epochs = to_i("train.max_epochs");
        c.patience = to_i("train.patience");
        try {
            c.seed = static_cast<u64>(std::stoull(need("train.seed")));
        } catch (const FormatError&) {
            throw;
        } catch (const std::exception&) {
            throw FormatError("config key 'train.seed' is not an integer");
        }
        c.validate();
        return c;
    }
};

// ---------------------------------------------------------------------------
// Examples: a labeled pair plus its two model inputs. Entity inputs are shared
// so a toxin appearing in hundreds of pairs is tokenized or copied once.
// ---------------------------------------------------------------------------

template <typename S>
struct PairExampleT {
    std::shared_ptr<const EntityInputT<S>> toxin;
    std::shared_ptr<const EntityInputT<S>> protein;
    int label = 0;
    std::string toxin_id;
    std::string protein_id;
};

namespace detail {

template <typename S>
TensorT<S> cast_matrix(const TensorT<float>& m) {
    TensorT<S> out(m.shape());
    for (i64 i = 0; i < m.numel(); ++i) out[i] = static_cast<S>(m[i]);
    return out;
}

}  // namespace detail

// Build model-ready examples for a list of pairs. In fallback mode entities
// are tokenized from the corpus; in files mode their matrices come from the
// embedding stores (which must then be provided and cover every entity).
template <typename S>
std::vector<PairExampleT<S>> make_examples(const Corpus& corpus,
                                           const std::vector<InteractionPair>& pairs,
                                           const ModelConfig& cfg,
                                           const EmbeddingStore* toxin_store = nullptr,
                                           const EmbeddingStore* protein_store = nullptr) {
    const bool files = cfg.embed_source == EmbedSource::files;
    if (files) {
        if (!toxin_store || !protein_store) {
            throw UsageError("file embeddings selected but no embedding stores supplied");
        }
        if (toxin_store->dim() != cfg.toxin_input_dim) {
            throw ConfigError("toxin embedding file dim " + std::to_string(toxin_store->dim()) +
                              " does not match configured toxin_input_dim " +
                              std::to_string(cfg.toxin_input_dim));
        }
        if (protein_store->dim() != cfg.protein_input_dim) {
            throw ConfigError("protein embedding file dim " + std::to_string(protein_store->dim()) +
                              " does not match configured protein_input_dim " +
                              std::to_string(cfg.protein_input_dim));
        }
    }

    std::unordered_map<std::string, std::shared_ptr<const EntityInputT<S>>> toxin_cache, protein_cache;
    auto toxin_input = [&](const std::string& id) {
        auto it = toxin_cache.find(id);
        if (it != toxin_cache.end()) return it->second;
        std::shared_ptr<const EntityInputT<S>> in;
        if (files) {
            if (!toxin_store->has(id)) throw DataError("no embedding for toxin '" + id + "'");
            in = std::make_shared<EntityInputT<S>>(
                EntityInputT<S>::from_matrix(detail::cast_matrix<S>(toxin_store->get(id))));
        } else {
            in = std::make_shared<EntityInputT<S>>(
                EntityInputT<S>::from_tokens(tokenize_smiles(corpus.toxin(id).smiles)));
        }
        toxin_cache.emplace(id, in);
        return in;
    };
    auto protein_input = [&](const std::string& id) {
        auto it = protein_cache.find(id);
        if (it != protein_cache.end()) return it->second;
        std::shared_ptr<const EntityInputT<S>> in;
        if (files) {
            if (!protein_store->has(id)) throw DataError("no embedding for protein '" + id + "'");
            in = std::make_shared<EntityInputT<S>>(
                EntityInputT<S>::from_matrix(detail::cast_matrix<S>(protein_store->get(id))));
        } else {
            in = std::make_shared<EntityInputT<S>>(
                EntityInputT<S>::from_tokens(tokenize_protein(corpus.protein(id).sequence)));
        }
        protein_cache.emplace(id, in);
        return in;
    };

    std::vector<PairExampleT<S>> out;
    out.reserve(pairs.size());
    for (const auto& pr : pairs) {
        PairExampleT<S> ex;
        ex.toxin = toxin_input(pr.toxin_id);
        ex.protein = protein_input(pr.protein_id);
        ex.label = pr.label;
        ex.toxin_id = pr.toxin_id;
        ex.protein_id = pr.protein_id;
        out.push_back(std::move(ex));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochLogRow {
    i64 epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double seconds = 0.0;
};

struct FitResult {
    std::vector<EpochLogRow> log;
    i64 best_epoch = 0;  // 1-based
    double best_val_loss = 0.0;
    i64 trained_epochs = 0;
    std::string rng_shuffle_state;
    std::string rng_dropout_state;
};

template <typename S>
double evaluate_loss(const ModelT<S>& model, const std::vector<PairExampleT<S>>& examples) {
    std::vector<double> losses(examples.size(), 0.0);
    parallel_for(static_cast<i64>(examples.size()), [&](i64 i) {
        TapeT<S> tape(false);
        auto r = model.predict_pair(tape, *examples[static_cast<std::size_t>(i)].toxin,
                                    *examples[static_cast<std::size_t>(i)].protein, Mode::eval);
        losses[static_cast<std::size_t>(i)] =
            bce_value(static_cast<double>(r.prob->value[0]), examples[static_cast<std::size_t>(i)].label);
    });
    double total = 0.0;
    for (double l : losses) total += l;  // fixed order keeps the sum reproducible
    return examples.empty() ? 0.0 : total / static_cast<double>(examples.size());
}

// Epoch loop: seeded shuffle, one RAdam+LookAhead step per pair, validation
// loss in eval mode after each epoch; keeps the best-validation weights and
// restores them into the model before returning.
template <typename S>
FitResult fit(ModelT<S>& model, const std::vector<PairExampleT<S>>& train,
              const std::vector<PairExampleT<S>>& val, const TrainConfig& cfg,
              std::ostream* log_stream = nullptr) {
    cfg.validate();
    if (train.empty()) throw UsageError("fit: empty training partition");
    if (val.empty()) throw UsageError("fit: empty validation partition");
    if (cfg.dropout_rate != model.config().dropout_rate) {
        throw ConfigError("train dropout_rate does not match the model's dropout_rate");
    }

    RAdamT<S> radam(model.parameters(), cfg.optim());
    LookAheadT<S> lookahead(model.parameters(), cfg.lookahead_k, cfg.lookahead_alpha);
    RngStream shuffle_rng(derive_seed(cfg.seed, "train.shuffle"));
    RngStream dropout_rng(derive_seed(cfg.seed, "train.dropout"));

    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    FitResult result;
    std::vector<TensorT<S>> best_params;
    double best_val = 0.0;
    i64 stale_epochs = 0;

    for (i64 epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        shuffle_rng.shuffle(order);

        double train_total = 0.0;
        for (std::size_t step = 0; step < order.size(); ++step) {
            const auto& ex = train[order[step]];
            model.zero_grads();
            TapeT<S> tape;
            auto r = model.predict_pair(tape, *ex.toxin, *ex.protein, Mode::train, &dropout_rng);
            auto loss = tape.bce(r.prob, ex.label);
            const double p = static_cast<double>(r.prob->value[0]);
            const double l = static_cast<double>(loss->value[0]);
            if (!std::isfinite(p) || !std::isfinite(l)) {
                char buf[256];
                std::snprintf(buf, sizeof(buf),
                              "non-finite loss at epoch %lld step %zu pair %s/%s: p=%g loss=%g",
                              static_cast<long long>(epoch), step + 1, ex.toxin_id.c_str(),
                              ex.protein_id.c_str(), p, l);
                throw NumericError(buf);
            }
            train_total += l;
            tape.backward(loss);
            radam.step();
            lookahead.after_inner_step();
        }

        const double train_loss = train_total / static_cast<double>(train.size());
        const double val_loss = evaluate_loss(model, val);
        const double seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        result.log.push_back({epoch, train_loss, val_loss, seconds});
        if (log_stream) {
            char buf[160];
            std::snprintf(buf, sizeof(buf), "%lld\t%.6f\t%.6f\t%.3f\n",
                          static_cast<long long>(epoch), train_loss, val_loss, seconds);
            (*log_stream) << buf;
        }

        if (best_params.empty() || val_loss < best_val) {
            best_val = val_loss;
            result.best_epoch = epoch;
            best_params.clear();
            for (const auto& p : model.parameters()) best_params.push_back(p->value);
            stale_epochs = 0;
        } else {
            ++stale_epochs;
        }
        result.trained_epochs = epoch;
        if (stale_epochs >= cfg.patience) break;
    }

    const auto& params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best_params[i];
    result.best_val_loss = best_val;
    result.rng_shuffle_state = shuffle_rng.serialize_state();
    result.rng_dropout_state = dropout_rng.serialize_state();
    return result;
}

// ---------------------------------------------------------------------------
// TPFC checkpoints: "TPFC" | u32 version=1 | u32 header_len | key=value header
// lines | float32 payloads in manifest order.
// ---------------------------------------------------------------------------

inline constexpr u32 kCheckpointVersion = 1;

struct CheckpointMeta {
    i64 best_epoch = 0;
    double best_val_loss = 0.0;
    i64 trained_epochs = 0;
    std::string rng_shuffle_state;
    std::string rng_dropout_state;
};

inline CheckpointMeta checkpoint_meta(const FitResult& fr) {
    CheckpointMeta m;
    m.best_epoch = fr.best_epoch;
    m.best_val_loss = fr.best_val_loss;
    m.trained_epochs = fr.trained_epochs;
    m.rng_shuffle_state = fr.rng_shuffle_state;
    m.rng_dropout_state = fr.rng_dropout_state;
    return m;
}

namespace detail {

inline std::string shape_string(const std::vector<i64>& shape) {
    std::string s;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += 'x';
        s += std::to_string(shape[i]);
    }
    return s;
}

inline std::vector<i64> parse_shape_string(const std::string& s, const std::string& where) {
    std::vector<i64> shape;
    std::size_t start = 0;
    while (start <= s.size()) {
        const std::size_t x = s.find('x', start);
        const std::string tok = s.substr(start, x == std::string::npos ? std::string::npos : x - start);
        if (tok.empty()) throw FormatError(where + ": bad shape '" + s + "'");
        try {
            shape.push_back(static_cast<i64>(std::stoll(tok)));
        } catch (const std::exception&) {
            throw FormatError(where + ": bad shape '" + s + "'");
        }
        if (x == std::string::npos) break;
        start = x + 1;
    }
    if (shape.empty()) throw FormatError(where + ": empty shape");
    return shape;
}

inline std::map<std::string, std::string> parse_header_lines(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::size_t start = 0;
    while (start < text.size()) {
        std::size_t nl = text.find('\n', start);
        if (nl == std::string::npos) nl = text.size();
        const std::string line = text.substr(start, nl - start);
        start = nl + 1;
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw FormatError("malformed checkpoint header line '" + line + "'");
        }
        const std::string key = line.substr(0, eq);
        if (kv.count(key)) throw FormatError("duplicate checkpoint header key '" + key + "'");
        kv[key] = line.substr(eq + 1);
    }
    return kv;
}

}  // namespace detail

template <typename S>
void save_checkpoint(const ModelT<S>& model, const TrainConfig& tcfg, const CheckpointMeta& meta,
                     const std::string& path) {
    std::string header;
    auto put = [&](const std::string& k, const std::string& v) { header += k + "=" + v + "\n"; };
    for (const auto& [k, v] : model.config().to_kv()) put(k, v);
    for (const auto& [k, v] : tcfg.to_kv()) put(k, v);

    const auto& params = model.parameters();
    put("param.count", std::to_string(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        put("param." + std::to_string(i) + ".name", params[i]->name);
        put("param." + std::to_string(i) + ".shape", detail::shape_string(params[i]->value.shape()));
    }
    put("rng.shuffle", meta.rng_shuffle_state);
    put("rng.dropout", meta.rng_dropout_state);
    put("best.epoch", std::to_string(meta.best_epoch));
    {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.17g", meta.best_val_loss);
        put("best.val_loss", buf);
    }
    put("trained.epochs", std::to_string(meta.trained_epochs));

    std::string bytes = "TPFC";
    detail::put_u32_le(bytes, kCheckpointVersion);
    detail::put_u32_le(bytes, static_cast<u32>(header.size()));
    bytes += header;
    for (const auto& p : params) {
        for (i64 j = 0; j < p->value.numel(); ++j) {
            detail::put_f32_le(bytes, static_cast<float>(p->value[j]));
        }
    }
    detail::write_file_bytes(path, bytes);
}

template <typename S>
struct LoadedCheckpointT {
    ModelConfig model_config;
    TrainConfig train_config;
    CheckpointMeta meta;
    std::shared_ptr<ModelT<S>> model;
};

template <typename S>
LoadedCheckpointT<S> load_checkpoint(const std::string& path) {
    const std::string bytes = detail::read_file_bytes(path);
    detail::ByteReader r(bytes, path);
    if (r.bytes(4) != "TPFC") {
        throw FormatError(path + ": not a TPFC checkpoint (bad magic)");
    }
    const u32 version = r.u32_le();
    if (version != kCheckpointVersion) {
        throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
    }
    const u32 header_len = r.u32_le();
    const std::string header = r.bytes(header_len);
    const auto kv = detail::parse_header_lines(header);

    auto need = [&](const std::string& key) -> const std::string& {
        auto it = kv.find(key);
        if (it == kv.end()) throw FormatError(path + ": missing checkpoint key '" + key + "'");
        return it->second;
    };

    LoadedCheckpointT<S> out;
    out.model_config = ModelConfig::from_kv(kv);
    out.train_config = TrainConfig::from_kv(kv);
    try {
        out.meta.best_epoch = static_cast<i64>(std::stoll(need("best.epoch")));
        out.meta.best_val_loss = std::stod(need("best.val_loss"));
        out.meta.trained_epochs = static_cast<i64>(std::stoll(need("trained.epochs")));
    } catch (const FormatError&) {
        throw;
    } catch (const std::exception&) {
        throw FormatError(path + ": malformed checkpoint metadata");
    }
    out.meta.rng_shuffle_state = need("rng.shuffle");
    out.meta.rng_dropout_state = need("rng.dropout");

    out.model = std::make_shared<ModelT<S>>(out.model_config);
    const auto& params = out.model->parameters();

    i64 manifest_count = 0;
    try {
        manifest_count = static_cast<i64>(std::stoll(need("param.count")));
    } catch (const FormatError&) {
        throw;
    } catch (const std::exception&) {
        throw FormatError(path + ": malformed param.count");
    }
    if (manifest_count != static_cast<i64>(params.size())) {
        throw FormatError(path + ": checkpoint lists " + std::to_string(manifest_count) +
                          " parameters but this configuration has " + std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const std::string idx = "param." + std::to_string(i);
        const std::string& name = need(idx + ".name");
        if (name != params[i]->name) {
            throw FormatError(path + ": parameter " + std::to_string(i) + " is '" + name +
                              "' in the checkpoint but '" + params[i]->name + "' in the model");
        }
        const auto shape = detail::parse_shape_string(need(idx + ".shape"), path + ": " + name);
        if (shape != params[i]->value.shape()) {
            throw FormatError(path + ": parameter '" + name + "' has shape " +
                              detail::shape_string(shape) + " in the checkpoint but " +
                              detail::shape_string(params[i]->value.shape()) + " in the model");
        }
    }

    for (const auto& p : params) {
        for (i64 j = 0; j < p->value.numel(); ++j) {
            if (r.remaining() < 4) {
                throw FormatError(path + ": payload truncated inside parameter '" + p->name + "'");
            }
            p->value[j] = static_cast<S>(r.f32_le());
        }
    }
    if (!r.at_end()) throw FormatError(path + ": trailing bytes after parameter payload");
    return out;
}

}  // namespace tipformer
