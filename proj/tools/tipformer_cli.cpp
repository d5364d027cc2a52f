// tipformer: command-line front end for the TTI prediction toolkit.
//
// Exit codes: 0 success, 1 usage/config error, 2 data/format error,
// 3 numeric failure, 4 internal error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tipformer/corpus.hpp"
#include "tipformer/embedding.hpp"
#include "tipformer/metrics.hpp"
#include "tipformer/model.hpp"
#include "tipformer/optim.hpp"
#include "tipformer/toy.hpp"
#include "tipformer/train.hpp"

namespace tf = tipformer;
using tf::i64;
using tf::u64;

namespace {

// ---------------------------------------------------------------------------
// Small utilities
// ---------------------------------------------------------------------------

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string normalize_policy(std::string s) {
    for (char& c : s) {
        if (c == '-') c = '_';
    }
    return s;
}

tf::SplitFractions parse_fractions(const std::string& s) {
    std::vector<double> parts;
    std::size_t start = 0;
    while (start <= s.size()) {
        const std::size_t comma = s.find(',', start);
        const std::string tok =
            s.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
        try {
            parts.push_back(std::stod(tok));
        } catch (const std::exception&) {
            throw tf::ConfigError("bad --fractions value '" + s + "' (want train,val,test)");
        }
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    if (parts.size() != 3) throw tf::ConfigError("--fractions needs exactly three comma-separated values");
    tf::SplitFractions f{parts[0], parts[1], parts[2]};
    f.validate();
    return f;
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw tf::DataError("cannot open '" + path + "' for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw tf::DataError("failed writing '" + path + "'");
}

std::map<std::string, std::string> read_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw tf::DataError("cannot open config file '" + path + "'");
    std::map<std::string, std::string> kv;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw tf::ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
        }
        const std::string key = line.substr(0, eq);
        if (kv.count(key)) {
            throw tf::ConfigError(path + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
        }
        kv[key] = line.substr(eq + 1);
    }
    return kv;
}

// ---------------------------------------------------------------------------
// Option bundles shared across subcommands
// ---------------------------------------------------------------------------

struct CorpusOpts {
    std::string toxins, proteins, pairs;

    void add_to(CLI::App* cmd) {
        cmd->add_option("--toxins", toxins, "Toxin TSV: toxin_id <TAB> smiles")->required();
        cmd->add_option("--proteins", proteins, "Protein TSV: protein_id <TAB> sequence")->required();
        cmd->add_option("--pairs", pairs, "Pair TSV: toxin_id <TAB> protein_id <TAB> label")->required();
    }

    tf::Corpus load() const { return tf::parse_corpus(toxins, proteins, pairs); }
};

struct EmbedOpts {
    std::string toxin_file, protein_file;
    std::optional<tf::EmbeddingStore> toxin_store, protein_store;

    void add_to(CLI::App* cmd) {
        cmd->add_option("--toxin-embeddings", toxin_file,
                        "TPFE file of per-toxin embeddings (switches the model to file mode)");
        cmd->add_option("--protein-embeddings", protein_file, "TPFE file of per-protein embeddings");
    }

    bool files_mode() const { return !toxin_file.empty() || !protein_file.empty(); }

    void load_stores() {
        if (!files_mode()) return;
        if (toxin_file.empty() || protein_file.empty()) {
            throw tf::ConfigError("--toxin-embeddings and --protein-embeddings must be given together");
        }
        toxin_store = tf::load_embeddings(toxin_file);
        protein_store = tf::load_embeddings(protein_file);
    }

    const tf::EmbeddingStore* toxins() const { return toxin_store ? &*toxin_store : nullptr; }
    const tf::EmbeddingStore* proteins() const { return protein_store ? &*protein_store : nullptr; }
};

// Model/train configuration: defaults <- config file <- explicit flags.
struct ConfigOpts {
    std::string config_file;
    std::string variant = "tipformer", head_dims, hotspot_agg = "mean";
    i64 hidden = 0, heads = 0, layers = 0, conv_kernel = 0, ffn_hidden = 0;
    i64 toxin_input_dim = 0, protein_input_dim = 0;
    double dropout = 0.0;
    bool bidirectional_cross = false;
    double lr = 0.0, beta1 = 0.0, beta2 = 0.0, eps = 0.0, lookahead_alpha = 0.0;
    i64 lookahead_k = 0, batch_size = 0, epochs = 0, patience = 0;
    u64 seed = 1;
    CLI::App* cmd = nullptr;

    void add_to(CLI::App* c, bool with_train) {
        cmd = c;
        c->add_option("--config", config_file, "Config file with flat dotted keys (flags win)");
        c->add_option("--variant", variant, "Model variant")
            ->check(CLI::IsMember({"tipformer", "deepcnn"}));
        c->add_option("--hidden", hidden, "Hidden width d");
        c->add_option("--heads", heads, "Attention heads");
        c->add_option("--layers", layers, "Interaction layers");
        c->add_option("--conv-kernel", conv_kernel, "Encoder conv kernel (odd)");
        c->add_option("--ffn-hidden", ffn_hidden, "FFN hidden width (0 = 2*hidden)");
        c->add_option("--dropout", dropout, "Dropout rate in [0,1)");
        c->add_option("--head-dims", head_dims, "Prediction head widths, e.g. 32,32,16,1");
        c->add_flag("--bidirectional-cross", bidirectional_cross,
                    "Also attend protein over toxin in each layer");
        c->add_option("--hotspot-agg", hotspot_agg, "Hotspot column aggregation")
            ->check(CLI::IsMember({"mean", "max"}));
        c->add_option("--toxin-input-dim", toxin_input_dim, "Toxin input embedding width");
        c->add_option("--protein-input-dim", protein_input_dim, "Protein input embedding width");
        c->add_option("--seed", seed, "Seed for init, splits and training order");
        if (with_train) {
            c->add_option("--lr", lr, "Learning rate");
            c->add_option("--beta1", beta1, "RAdam beta1");
            c->add_option("--beta2", beta2, "RAdam beta2");
            c->add_option("--eps", eps, "RAdam epsilon");
            c->add_option("--lookahead-k", lookahead_k, "LookAhead sync period");
            c->add_option("--lookahead-alpha", lookahead_alpha, "LookAhead interpolation");
            c->add_option("--batch-size", batch_size, "Batch size (must be 1)");
            c->add_option("--epochs", epochs, "Maximum training epochs");
            c->add_option("--patience", patience, "Non-improving epochs before stopping");
        }
    }

    // Returns the resolved configs. Embedding stores, when present, switch the
    // source to files and pin the input dims unless flags said otherwise.
    std::pair<tf::ModelConfig, tf::TrainConfig> assemble(const EmbedOpts* embeds) const {
        std::map<std::string, std::string> kv;
        for (const auto& [k, v] : tf::ModelConfig{}.to_kv()) kv[k] = v;
        for (const auto& [k, v] : tf::TrainConfig{}.to_kv()) kv[k] = v;
        if (!config_file.empty()) {
            for (const auto& [k, v] : read_config_file(config_file)) {
                if (!kv.count(k)) throw tf::ConfigError("unknown config key '" + k + "'");
                kv[k] = v;
            }
        }
        if (embeds && embeds->files_mode()) {
            kv["model.embed_source"] = "files";
            kv["model.toxin_input_dim"] = std::to_string(embeds->toxins()->dim());
            kv["model.protein_input_dim"] = std::to_string(embeds->proteins()->dim());
        }
        auto flag = [&](const char* name, const std::string& key, const std::string& value) {
            if (cmd->count(name)) kv[key] = value;
        };
        flag("--variant", "model.variant", variant);
        flag("--hidden", "model.hidden", std::to_string(hidden));
        flag("--heads", "model.heads", std::to_string(heads));
        flag("--layers", "model.num_interaction_layers", std::to_string(layers));
        flag("--conv-kernel", "model.conv_kernel", std::to_string(conv_kernel));
        flag("--ffn-hidden", "model.ffn_hidden", std::to_string(ffn_hidden));
        flag("--dropout", "model.dropout_rate", fmt_double(dropout));
        flag("--head-dims", "model.head_dims", head_dims);
        flag("--bidirectional-cross", "model.bidirectional_cross",
             bidirectional_cross ? "true" : "false");
        flag("--hotspot-agg", "model.hotspot_agg", hotspot_agg);
        flag("--toxin-input-dim", "model.toxin_input_dim", std::to_string(toxin_input_dim));
        flag("--protein-input-dim", "model.protein_input_dim", std::to_string(protein_input_dim));
        flag("--lr", "train.learning_rate", fmt_double(lr));
        flag("--beta1", "train.beta1", fmt_double(beta1));
        flag("--beta2", "train.beta2", fmt_double(beta2));
        flag("--eps", "train.eps", fmt_double(eps));
        flag("--lookahead-k", "train.lookahead_k", std::to_string(lookahead_k));
        flag("--lookahead-alpha", "train.lookahead_alpha", fmt_double(lookahead_alpha));
        flag("--batch-size", "train.batch_size", std::to_string(batch_size));
        flag("--epochs", "train.max_epochs", std::to_string(epochs));
        flag("--patience", "train.patience", std::to_string(patience));
        flag("--seed", "train.seed", std::to_string(seed));
        // If dropout came in on the model side only, keep the two in sync.
        if (cmd->count("--dropout")) kv["train.dropout_rate"] = fmt_double(dropout);

        try {
            auto mc = tf::ModelConfig::from_kv(kv);
            auto tc = tf::TrainConfig::from_kv(kv);
            if (mc.dropout_rate != tc.dropout_rate) {
                throw tf::ConfigError("model.dropout_rate and train.dropout_rate disagree");
            }
            return {mc, tc};
        } catch (const tf::FormatError& e) {
            throw tf::ConfigError(e.what());  // bad values here are config problems
        }
    }
};

std::vector<tf::InteractionPair>& pick_partition(tf::DatasetSplit& split, const std::string& name) {
    if (name == "train") return split.train;
    if (name == "val") return split.val;
    if (name == "test") return split.test;
    throw tf::ConfigError("unknown partition '" + name + "'");
}

std::string format_report_line(const tf::MetricsReport& r) {
    auto fmt = [](const char* name, const std::optional<double>& v) {
        return std::string(name) + "=" + (v ? std::to_string(*v).substr(0, 8) : "undefined");
    };
    return fmt("acc", r.acc) + " " + fmt("sn", r.sn) + " " + fmt("sp", r.sp) + " " +
           fmt("pre", r.pre) + " " + fmt("f1", r.f1) + " " + fmt("mcc", r.mcc) + " " +
           fmt("auc", r.auc);
}

tf::MetricsReport report_from_scores(const std::vector<double>& scores,
                                     const std::vector<int>& labels, double threshold) {
    auto r = tf::compute_metrics(tf::confusion(scores, labels, threshold), threshold);
    bool has_pos = false, has_neg = false;
    for (int y : labels) (y == 1 ? has_pos : has_neg) = true;
    if (has_pos && has_neg) r.auc = tf::roc_auc(scores, labels).auc;
    return r;
}

std::vector<int> labels_of(const std::vector<tf::PairExampleT<float>>& exs) {
    std::vector<int> out;
    out.reserve(exs.size());
    for (const auto& e : exs) out.push_back(e.label);
    return out;
}

std::vector<std::vector<double>> knn_features(const tf::ModelT<float>& model,
                                              const std::vector<tf::PairExampleT<float>>& exs) {
    std::vector<std::vector<double>> out(exs.size());
    tf::parallel_for(static_cast<i64>(exs.size()), [&](i64 i) {
        const auto& e = exs[static_cast<std::size_t>(i)];
        out[static_cast<std::size_t>(i)] = tf::knn_pair_feature(
            model.entity_matrix(*e.toxin, true), model.entity_matrix(*e.protein, false));
    });
    return out;
}

// ---------------------------------------------------------------------------
// Subcommand: make-toy
// ---------------------------------------------------------------------------

struct MakeToyCmd {
    std::string out_dir;
    tf::ToyConfig toy;

    void add_to(CLI::App& app) {
        auto* c = app.add_subcommand("make-toy", "Generate the synthetic separable toy corpus");
        c->add_option("--out", out_dir, "Output directory for toxins/proteins/pairs TSVs")->required();
        c->add_option("--toxins", toy.n_toxins, "Number of toxins");
        c->add_option("--proteins", toy.n_proteins, "Number of proteins");
        c->add_option("--pairs-per-toxin", toy.pairs_per_toxin, "Labeled pairs sampled per toxin");
        c->add_option("--marker-fraction", toy.marker_fraction, "Fraction of entities carrying the marker");
        c->add_option("--seed", toy.seed, "Generator seed");
        cmd = c;
    }

    CLI::App* cmd = nullptr;

    int run() const {
        const tf::Corpus corpus = tf::make_toy_corpus(toy);
        std::filesystem::create_directories(out_dir);
        tf::write_toy_corpus(corpus, out_dir + "/toxins.tsv", out_dir + "/proteins.tsv",
                             out_dir + "/pairs.tsv");
        i64 positives = 0;
        for (const auto& p : corpus.pairs()) positives += p.label;
        std::cout << "toxins=" << corpus.toxins().size() << "\nproteins=" << corpus.proteins().size()
                  << "\npairs=" << corpus.pairs().size() << "\npositives=" << positives
                  << "\nout=" << out_dir << "\n";
        return 0;
    }
};

// ---------------------------------------------------------------------------
// Subcommand: split
// ---------------------------------------------------------------------------

struct SplitCmd {
    CorpusOpts corpus;
    std::string policy = "random", fractions = "0.8,0.1,0.1", out;
    double negatives = 0.0;
    u64 seed = 1;
    CLI::App* cmd = nullptr;

    void add_to(CLI::App& app) {
        auto* c = app.add_subcommand("split", "Partition pairs into train/val/test and write a manifest");
        corpus.add_to(c);
        c->add_option("--policy", policy, "random | new-toxin | new-target")
            ->check(CLI::IsMember({"random", "new-toxin", "new_toxin", "new-target", "new_target"}));
        c->add_option("--fractions", fractions, "train,val,test fractions summing to 1");
        c->add_option("--negatives", negatives,
                      "Sample this many negatives per positive from the unlabeled complement");
        c->add_option("--seed", seed, "Split (and negative sampling) seed");
        c->add_option("--out", out, "Manifest output path")->required();
        cmd = c;
    }

    int run() const {
        const tf::Corpus cp = corpus.load();
        const tf::SplitPolicy pol = tf::parse_split_policy(normalize_policy(policy));
        const tf::SplitFractions frac = parse_fractions(fractions);
        std::vector<tf::InteractionPair> negs;
        if (negatives > 0.0) negs = tf::sample_negatives(cp, negatives, seed);
        const tf::DatasetSplit ds = tf::split(cp, negs, pol, frac, seed);
        tf::write_split_manifest(ds, out);
        std::cout << "train=" << ds.train.size() << "\nval=" << ds.val.size()
                  << "\ntest=" << ds.test.size() << "\n";
        if (pol != tf::SplitPolicy::random) {
            std::set<std::string> held;
            for (const auto& p : ds.test) {
                held.insert(pol == tf::SplitPolicy::new_toxin ? p.toxin_id : p.protein_id);
            }
            std::cout << (pol == tf::SplitPolicy::new_toxin ? "held_out_toxins=" : "held_out_targets=")
                      << held.size() << "\n";
        }
        std::cout << "manifest=" << out << "\n";
        return 0;
    }
};

// ---------------------------------------------------------------------------
// Subcommand: train
// ---------------------------------------------------------------------------

struct TrainCmd {
    CorpusOpts corpus;
    EmbedOpts embeds;
    ConfigOpts config;
    std::string manifest, checkpoint, log_path;
    CLI::App* cmd = nullptr;

    void add_to(CLI::App& app) {
        auto* c = app.add_subcommand("train", "Fit a model on the manifest's train/val partitions");
        corpus.add_to(c);
        embeds.add_to(c);
        config.add_to(c, true);
        c->add_option("--manifest", manifest, "Split manifest from `split`")->required();
        c->add_option("--checkpoint", checkpoint, "TPFC checkpoint output path")->required();
        c->add_option("--log", log_path, "Epoch log TSV path (default: <checkpoint>.log)");
        cmd = c;
    }

    int run() {
        const tf::Corpus cp = corpus.load();
        embeds.load_stores();
        auto [mc, tc] = config.assemble(&embeds);
        tf::DatasetSplit ds = tf::read_split_manifest(manifest, cp);

        tf::ModelT<float> model(mc);
        model.init_params(tc.seed);
        const auto train_ex = tf::make_examples<float>(cp, ds.train, model.config(), embeds.toxins(),
                                                       embeds.proteins());
        const auto val_ex = tf::make_examples<float>(cp, ds.val, model.config(), embeds.toxins(),
                                                     embeds.proteins());

        std::ostringstream log;
        const tf::FitResult fr = tf::fit(model, train_ex, val_ex, tc, &log);
        tf::save_checkpoint(model, tc, tf::checkpoint_meta(fr), checkpoint);
        const std::string lp = log_path.empty() ? checkpoint + ".log" : log_path;
        write_text_file(lp, log.str());

        std::cout << "trained_epochs=" << fr.trained_epochs << "\nbest_epoch=" << fr.best_epoch
                  << "\nbest_val_loss=" << fmt_double(fr.best_val_loss) << "\ncheckpoint=" << checkpoint
                  << "\nlog=" << lp << "\n";
        return 0;
    }
};

// ---------------------------------------------------------------------------
// Subcommand: evaluate
// ---------------------------------------------------------------------------

struct EvaluateCmd {
    CorpusOpts corpus;
    EmbedOpts embeds;
    ConfigOpts config;
    std::string checkpoint, scores_file, manifest, partition = "test", out, roc_out;
    std::string baseline = "none", policy = "random", fractions = "0.8,0.1,0.1";
    double threshold = 0.5, negatives = 0.0;
    i64 repeats = 1, knn_k = 5;
    CLI::App* cmd = nullptr;

    void add_to(CLI::App& app) {
        auto* c = app.add_subcommand(
            "evaluate", "Score a partition with a checkpoint, external scores, or the KNN baseline");
        corpus.add_to(c);
        embeds.add_to(c);
        config.add_to(c, true);
        c->add_option("--checkpoint", checkpoint, "TPFC checkpoint to evaluate");
        c->add_option("--scores", scores_file, "External score TSV: toxin_id <TAB> protein_id <TAB> score");
        c->add_option("--manifest", manifest, "Split manifest (single-run evaluation)");
        c->add_option("--partition", partition, "Partition to score")
            ->check(CLI::IsMember({"train", "val", "test"}));
        c->add_option("--threshold", threshold, "Positive-class threshold (>= rule)");
        c->add_option("--baseline", baseline, "none | knn")->check(CLI::IsMember({"none", "knn"}));
        c->add_option("--knn-k", knn_k, "Neighbors for the KNN baseline");
        c->add_option("--repeats", repeats,
                      "Full protocol: N runs with fresh negatives/split/init at seeds seed..seed+N-1");
        c->add_option("--policy", policy, "Split policy for --repeats mode")
            ->check(CLI::IsMember({"random", "new-toxin", "new_toxin", "new-target", "new_target"}));
        c->add_option("--fractions", fractions, "Split fractions for --repeats mode");
        c->add_option("--negatives", negatives, "Negative sampling ratio for --repeats mode");
        c->add_option("--out", out, "Metrics TSV output path");
        c->add_option("--roc", roc_out, "ROC curve TSV output path (single run only)");
        cmd = c;
    }

    tf::MetricsReport evaluate_split(const tf::Corpus& cp, const tf::ModelConfig& mc,
                                     const tf::TrainConfig& tc, const tf::DatasetSplit& ds,
                                     const std::vector<tf::InteractionPair>& which,
                                     u64 seed, tf::RocResult* roc) const {
        const auto test_ex =
            tf::make_examples<float>(cp, which, mc, embeds.toxins(), embeds.proteins());
        std::vector<double> s;
        if (baseline == "knn") {
            tf::ModelT<float> feature_model(mc);
            if (!checkpoint.empty()) {
                feature_model = *tf::load_checkpoint<float>(checkpoint).model;
            } else {
                feature_model.init_params(seed);
            }
            const auto train_ex = tf::make_examples<float>(cp, ds.train, feature_model.config(),
                                                           embeds.toxins(), embeds.proteins());
            s = tf::knn_scores(knn_features(feature_model, train_ex), labels_of(train_ex),
                               knn_features(feature_model, test_ex), knn_k);
        } else {
            tf::ModelT<float> model(mc);
            if (!checkpoint.empty()) {
                model = *tf::load_checkpoint<float>(checkpoint).model;
                if (model.config().embed_source != mc.embed_source) {
                    throw tf::ConfigError("checkpoint embedding source does not match the given inputs");
                }
            } else {
                model.init_params(seed);
                tf::TrainConfig run_tc = tc;
                run_tc.seed = seed;
                const auto train_ex = tf::make_examples<float>(cp, ds.train, model.config(),
                                                               embeds.toxins(), embeds.proteins());
                const auto val_ex = tf::make_examples<float>(cp, ds.val, model.config(),
                                                             embeds.toxins(), embeds.proteins());
                tf::fit(model, train_ex, val_ex, run_tc);
            }
            s = tf::score_pairs(model, test_ex);
        }
        auto r = report_from_scores(s, labels_of(test_ex), threshold);
        if (roc) *roc = tf::roc_auc(s, labels_of(test_ex));
        return r;
    }

    int run() {
        const tf::Corpus cp = corpus.load();
        embeds.load_stores();
        auto [mc, tc] = config.assemble(&embeds);

        const bool have_scores = !scores_file.empty();
        const bool have_ckpt = !checkpoint.empty();
        if (have_scores && (have_ckpt || baseline != "none")) {
            throw tf::ConfigError("--scores cannot be combined with --checkpoint or --baseline");
        }

        tf::RepeatSummary summary;
        if (repeats > 1) {
            if (have_scores) throw tf::ConfigError("--scores is a single-run input; drop --repeats");
            if (!roc_out.empty()) throw tf::ConfigError("--roc applies to single-run evaluation only");
            if (have_ckpt) {
                throw tf::ConfigError("--repeats retrains per run; a fixed --checkpoint contradicts it");
            }
            if (!manifest.empty()) {
                throw tf::ConfigError("--repeats resplits per run; drop --manifest");
            }
            const tf::SplitPolicy pol = tf::parse_split_policy(normalize_policy(policy));
            const tf::SplitFractions frac = parse_fractions(fractions);
            summary = tf::repeat_evaluate(
                [&](u64 seed) {
                    std::vector<tf::InteractionPair> negs;
                    if (negatives > 0.0) negs = tf::sample_negatives(cp, negatives, seed);
                    const tf::DatasetSplit ds = tf::split(cp, negs, pol, frac, seed);
                    return evaluate_split(cp, mc, tc, ds, ds.test, seed, nullptr);
                },
                repeats, config.seed);
        } else {
            if (manifest.empty()) throw tf::ConfigError("single-run evaluation needs --manifest");
            tf::DatasetSplit ds = tf::read_split_manifest(manifest, cp);
            const auto& which = pick_partition(ds, partition);
            if (which.empty()) throw tf::DataError("partition '" + partition + "' is empty");

            tf::MetricsReport report;
            tf::RocResult roc;
            if (have_scores) {
                const auto rows = tf::read_scores_tsv(scores_file);
                std::map<std::pair<std::string, std::string>, double> by_pair;
                for (const auto& r : rows) by_pair[{r.toxin_id, r.protein_id}] = r.score;
                if (rows.size() != which.size()) {
                    throw tf::DataError("score file has " + std::to_string(rows.size()) +
                                        " rows but partition '" + partition + "' has " +
                                        std::to_string(which.size()) + " pairs");
                }
                std::vector<double> s;
                std::vector<int> labels;
                for (const auto& p : which) {
                    auto it = by_pair.find({p.toxin_id, p.protein_id});
                    if (it == by_pair.end()) {
                        throw tf::DataError("no score for pair " + p.toxin_id + "/" + p.protein_id);
                    }
                    s.push_back(it->second);
                    labels.push_back(p.label);
                }
                report = report_from_scores(s, labels, threshold);
                bool two_class = report.auc.has_value();
                if (two_class) roc = tf::roc_auc(s, labels);
                else if (!roc_out.empty()) throw tf::UsageError("ROC needs both classes present");
            } else if (have_ckpt || baseline == "knn") {
                report = evaluate_split(cp, mc, tc, ds, which, config.seed,
                                        roc_out.empty() ? nullptr : &roc);
            } else {
                throw tf::ConfigError("evaluate needs --checkpoint, --scores, or --baseline knn");
            }
            summary.runs.push_back(report);
            tf::aggregate_runs(summary);
            if (!roc_out.empty()) write_text_file(roc_out, tf::format_roc_tsv(roc));
        }

        const std::string tsv = tf::format_metrics_tsv(summary);
        if (!out.empty()) {
            write_text_file(out, tsv);
        } else {
            std::cout << tsv;
        }
        if (summary.runs.size() == 1) {
            std::cout << format_report_line(summary.runs[0]) << "\n";
        } else {
            std::cout << "runs=" << summary.runs.size() << " mean_acc="
                      << (summary.mean.acc ? fmt_double(*summary.mean.acc) : "undefined")
                      << " mean_auc="
                      << (summary.mean.auc ? fmt_double(*summary.mean.auc) : "undefined") << "\n";
        }
        return 0;
    }
};

// ---------------------------------------------------------------------------
// Subcommand: predict
// ---------------------------------------------------------------------------

struct PredictCmd {
    CorpusOpts corpus;
    EmbedOpts embeds;
    std::string checkpoint, pair_list, out;
    CLI::App* cmd = nullptr;

    void add_to(CLI::App& app) {
        auto* c = app.add_subcommand(
            "predict", "Emit interaction probabilities for a pair list or the full cross product");
        corpus.add_to(c);
        embeds.add_to(c);
        c->add_option("--checkpoint", checkpoint, "TPFC checkpoint")->required();
        c->add_option("--pair-list", pair_list, "Optional TSV of toxin_id <TAB> protein_id rows");
        c->add_option("--out", out, "Predictions TSV output path")->required();
        cmd = c;
    }

    int run() {
        const tf::Corpus cp = corpus.load();
        embeds.load_stores();
        const auto loaded = tf::load_checkpoint<float>(checkpoint);

        std::vector<tf::InteractionPair> wanted;
        if (!pair_list.empty()) {
            tf::detail::for_each_tsv_row(pair_list, [&](const std::string& line, const std::string& where) {
                auto f = tf::detail::split_tsv_line(line, 2, where);
                if (!cp.has_toxin(f[0])) throw tf::DataError(where + ": unknown toxin '" + f[0] + "'");
                if (!cp.has_protein(f[1])) throw tf::DataError(where + ": unknown protein '" + f[1] + "'");
                wanted.push_back({f[0], f[1], 0});
            });
            if (wanted.empty()) throw tf::DataError(pair_list + ": no pairs");
        } else {
            for (const auto& t : cp.toxins()) {
                for (const auto& p : cp.proteins()) wanted.push_back({t.toxin_id, p.protein_id, 0});
            }
        }

        const auto exs = tf::make_examples<float>(cp, wanted, loaded.model->config(), embeds.toxins(),
                                                  embeds.proteins());
        const auto scores = tf::score_pairs(*loaded.model, exs);

        std::string text = "toxin_id\tprotein_id\tprobability\n";
        char buf[48];
        for (std::size_t i = 0; i < exs.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%.9g", scores[i]);
            text += exs[i].toxin_id + "\t" + exs[i].protein_id + "\t" + buf + "\n";
        }
        write_text_file(out, text);
        std::cout << "wrote " << exs.size() << " predictions to " << out << "\n";
        return 0;
    }
};

// ---------------------------------------------------------------------------
// Subcommand: hotspots
// ---------------------------------------------------------------------------

struct HotspotsCmd {
    CorpusOpts corpus;
    EmbedOpts embeds;
    std::string checkpoint, toxin_id, protein_id, out;
    i64 k = 28, offset = 0;
    CLI::App* cmd = nullptr;

    void add_to(CLI::App& app) {
        auto* c = app.add_subcommand("hotspots",
                                     "Rank protein residues by aggregated interaction attention");
        corpus.add_to(c);
        embeds.add_to(c);
        c->add_option("--checkpoint", checkpoint, "TPFC checkpoint")->required();
        c->add_option("--toxin", toxin_id, "Toxin id")->required();
        c->add_option("--protein", protein_id, "Protein id")->required();
        c->add_option("--k", k, "Number of top residues");
        c->add_option("--offset", offset, "Added to 1-based residue numbers");
        c->add_option("--out", out, "Output TSV (stdout when omitted)");
        cmd = c;
    }

    int run() {
        const tf::Corpus cp = corpus.load();
        embeds.load_stores();
        const auto loaded = tf::load_checkpoint<float>(checkpoint);
        if (!cp.has_toxin(toxin_id)) throw tf::DataError("unknown toxin '" + toxin_id + "'");
        if (!cp.has_protein(protein_id)) throw tf::DataError("unknown protein '" + protein_id + "'");

        const std::vector<tf::InteractionPair> one = {{toxin_id, protein_id, 0}};
        const auto exs = tf::make_examples<float>(cp, one, loaded.model->config(), embeds.toxins(),
                                                  embeds.proteins());
        const auto spots = loaded.model->extract_hotspots(*exs[0].toxin, *exs[0].protein, k, offset);

        std::string text = "residue_number\tscore\n";
        char buf[48];
        for (const auto& h : spots) {
            std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(h.score));
            text += std::to_string(h.residue) + "\t" + buf + "\n";
        }
        if (out.empty()) {
            std::cout << text;
        } else {
            write_text_file(out, text);
            std::cout << "wrote " << spots.size() << " hotspots to " << out << "\n";
        }
        return 0;
    }
};

// ---------------------------------------------------------------------------
// Subcommand: export-features
// ---------------------------------------------------------------------------

struct ExportFeaturesCmd {
    CorpusOpts corpus;
    EmbedOpts embeds;
    std::string checkpoint, manifest, partition = "test", out;
    CLI::App* cmd = nullptr;

    void add_to(CLI::App& app) {
        auto* c = app.add_subcommand("export-features",
                                     "Write the pre-head pooled feature vectors as CSV");
        corpus.add_to(c);
        embeds.add_to(c);
        c->add_option("--checkpoint", checkpoint, "TPFC checkpoint")->required();
        c->add_option("--manifest", manifest, "Split manifest")->required();
        c->add_option("--partition", partition, "Partition to export")
            ->check(CLI::IsMember({"train", "val", "test"}));
        c->add_option("--out", out, "CSV output path")->required();
        cmd = c;
    }

    int run() {
        const tf::Corpus cp = corpus.load();
        embeds.load_stores();
        const auto loaded = tf::load_checkpoint<float>(checkpoint);
        tf::DatasetSplit ds = tf::read_split_manifest(manifest, cp);
        const auto& which = pick_partition(ds, partition);
        if (which.empty()) throw tf::DataError("partition '" + partition + "' is empty");
        const auto exs = tf::make_examples<float>(cp, which, loaded.model->config(), embeds.toxins(),
                                                  embeds.proteins());
        std::ostringstream csv;
        tf::export_features(*loaded.model, exs, csv);
        write_text_file(out, csv.str());
        std::cout << "wrote " << exs.size() << " feature rows to " << out << "\n";
        return 0;
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"tipFormer: toxin-protein interaction prediction toolkit"};
    app.set_version_flag("--version", "tipformer 0.1.0");
    app.require_subcommand(1);

    MakeToyCmd make_toy;
    SplitCmd split_cmd;
    TrainCmd train_cmd;
    EvaluateCmd eval_cmd;
    PredictCmd predict_cmd;
    HotspotsCmd hotspots_cmd;
    ExportFeaturesCmd export_cmd;

    make_toy.add_to(app);
    split_cmd.add_to(app);
    train_cmd.add_to(app);
    eval_cmd.add_to(app);
    predict_cmd.add_to(app);
    hotspots_cmd.add_to(app);
    export_cmd.add_to(app);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (make_toy.cmd->parsed()) return make_toy.run();
        if (split_cmd.cmd->parsed()) return split_cmd.run();
        if (train_cmd.cmd->parsed()) return train_cmd.run();
        if (eval_cmd.cmd->parsed()) return eval_cmd.run();
        if (predict_cmd.cmd->parsed()) return predict_cmd.run();
        if (hotspots_cmd.cmd->parsed()) return hotspots_cmd.run();
        if (export_cmd.cmd->parsed()) return export_cmd.run();
        std::cerr << "tipformer: no subcommand selected\n";
        return 1;
    } catch (const tf::ConfigError& e) {
        std::cerr << "tipformer: config error: " << e.what() << "\n";
        return 1;
    } catch (const tf::ShapeError& e) {
        std::cerr << "tipformer: shape error: " << e.what() << "\n";
        return 1;
    } catch (const tf::UsageError& e) {
        std::cerr << "tipformer: usage error: " << e.what() << "\n";
        return 1;
    } catch (const tf::DataError& e) {
        std::cerr << "tipformer: data error: " << e.what() << "\n";
        return 2;
    } catch (const tf::FormatError& e) {
        std::cerr << "tipformer: format error: " << e.what() << "\n";
        return 2;
    } catch (const tf::NumericError& e) {
        std::cerr << "tipformer: numeric error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "tipformer: internal error: " << e.what() << "\n";
        return 4;
    }
}
