#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "tipformer/common.hpp"
#include "tipformer/corpus.hpp"
#include "tipformer/model.hpp"
#include "tipformer/train.hpp"

namespace tipformer {

// ---------------------------------------------------------------------------
// Confusion counts and threshold metrics
// ---------------------------------------------------------------------------

struct ConfusionCounts {
    i64 tp = 0, fp = 0, tn = 0, fn = 0;
    i64 total() const { return tp + fp + tn + fn; }
};

inline ConfusionCounts confusion(const std::vector<double>& scores, const std::vector<int>& labels,
                                 double threshold = 0.5) {
    if (scores.size() != labels.size()) {
        throw UsageError("confusion: " + std::to_string(scores.size()) + " scores vs " +
                         std::to_string(labels.size()) + " labels");
    }
    ConfusionCounts c;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 0 && labels[i] != 1) {
            throw UsageError("confusion: label must be 0 or 1");
        }
        const bool pred = scores[i] >= threshold;  // tie at the threshold counts positive
        if (pred) {
            (labels[i] == 1 ? c.tp : c.fp) += 1;
        } else {
            (labels[i] == 1 ? c.fn : c.tn) += 1;
        }
    }
    return c;
}

// Metrics with zero denominators stay unset so degenerate runs are visible
// instead of silently scoring 0.
struct MetricsReport {
    ConfusionCounts counts;
    double threshold = 0.5;
    std::optional<double> acc, sn, sp, pre, f1, mcc, auc;
};

inline MetricsReport compute_metrics(const ConfusionCounts& c, double threshold = 0.5) {
    if (c.total() <= 0) throw UsageError("compute_metrics: no scored pairs");
    if (c.tp < 0 || c.fp < 0 || c.tn < 0 || c.fn < 0) {
        throw UsageError("compute_metrics: negative counts");
    }
    MetricsReport r;
    r.counts = c;
    r.threshold = threshold;
    const double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp);
    const double tn = static_cast<double>(c.tn), fn = static_cast<double>(c.fn);
    auto ratio = [](double num, double den) -> std::optional<double> {
        if (den == 0.0) return std::nullopt;
        return num / den;
    };
    r.acc = ratio(tp + tn, tp + tn + fp + fn);
    r.sn = ratio(tp, tp + fn);
    r.sp = ratio(tn, tn + fp);
    r.pre = ratio(tp, tp + fp);
    if (r.pre && r.sn && (*r.pre + *r.sn) > 0.0) {
        r.f1 = 2.0 * (*r.pre) * (*r.sn) / (*r.pre + *r.sn);
    }
    const double mcc_den_sq = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
    if (mcc_den_sq > 0.0) r.mcc = (tp * tn - fp * fn) / std::sqrt(mcc_den_sq);
    return r;
}

// ---------------------------------------------------------------------------
// ROC / AUC by pairwise rank counting (ties worth one half)
// ---------------------------------------------------------------------------

struct RocPoint {
    double threshold = 0.0;
    double fpr = 0.0;
    double tpr = 0.0;
};

struct RocResult {
    double auc = 0.0;
    std::vector<RocPoint> points;
};

inline RocResult roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) {
        throw UsageError("roc_auc: score/label length mismatch");
    }
    i64 pos = 0, neg = 0;
    for (int y : labels) {
        if (y != 0 && y != 1) throw UsageError("roc_auc: label must be 0 or 1");
        (y == 1 ? pos : neg) += 1;
    }
    if (pos == 0 || neg == 0) {
        throw UsageError("roc_auc: need at least one positive and one negative label");
    }

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });

    RocResult out;
    out.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
    i64 cum_p = 0, cum_n = 0;
    i64 concordant = 0, tied = 0;
    std::size_t i = 0;
    while (i < order.size()) {
        const double v = scores[order[i]];
        i64 p_at = 0, n_at = 0;
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == v) {
            (labels[order[j]] == 1 ? p_at : n_at) += 1;
            ++j;
        }
        concordant += p_at * (neg - cum_n - n_at);  // negatives strictly below this score
        tied += p_at * n_at;
        cum_p += p_at;
        cum_n += n_at;
        out.points.push_back({v, static_cast<double>(cum_n) / static_cast<double>(neg),
                              static_cast<double>(cum_p) / static_cast<double>(pos)});
        i = j;
    }
    out.auc = static_cast<double>(2 * concordant + tied) / static_cast<double>(2 * pos * neg);
    return out;
}

inline std::string format_roc_tsv(const RocResult& roc) {
    std::string out = "threshold\tfpr\ttpr\n";
    char buf[120];
    for (const auto& p : roc.points) {
        std::snprintf(buf, sizeof(buf), "%g\t%.9g\t%.9g\n", p.threshold, p.fpr, p.tpr);
        out += buf;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Repeat protocol: run with seeds seed_base+0..n-1, aggregate mean and
// sample (n-1) standard deviation per metric.
// ---------------------------------------------------------------------------

struct MetricsAggregate {
    std::optional<double> acc, sn, sp, pre, f1, mcc, auc;
};

struct RepeatSummary {
    std::vector<MetricsReport> runs;
    MetricsAggregate mean, stddev;
};

namespace detail {

constexpr const char* kMetricNames[7] = {"acc", "sn", "sp", "pre", "f1", "mcc", "auc"};

inline const std::optional<double> MetricsReport::* metric_field(int i) {
    static const std::optional<double> MetricsReport::* fields[7] = {
        &MetricsReport::acc, &MetricsReport::sn, &MetricsReport::sp, &MetricsReport::pre,
        &MetricsReport::f1, &MetricsReport::mcc, &MetricsReport::auc};
    return fields[i];
}

inline std::optional<double> MetricsAggregate::* aggregate_field(int i) {
    static std::optional<double> MetricsAggregate::* fields[7] = {
        &MetricsAggregate::acc, &MetricsAggregate::sn, &MetricsAggregate::sp,
        &MetricsAggregate::pre, &MetricsAggregate::f1, &MetricsAggregate::mcc,
        &MetricsAggregate::auc};
    return fields[i];
}

}  // namespace detail

inline void aggregate_runs(RepeatSummary& summary) {
    const std::size_t n = summary.runs.size();
    for (int f = 0; f < 7; ++f) {
        auto rf = detail::metric_field(f);
        auto af = detail::aggregate_field(f);
        bool all_defined = true;
        double sum = 0.0;
        for (const auto& run : summary.runs) {
            if (!(run.*rf)) {
                all_defined = false;
                break;
            }
            sum += *(run.*rf);
        }
        // A metric missing in any run leaves the aggregate undefined rather
        // than averaging over a shifting subset.
        if (!all_defined || n == 0) continue;
        const double mean = sum / static_cast<double>(n);
        summary.mean.*af = mean;
        if (n >= 2) {
            double ss = 0.0;
            for (const auto& run : summary.runs) {
                const double d = *(run.*rf) - mean;
                ss += d * d;
            }
            summary.stddev.*af = std::sqrt(ss / static_cast<double>(n - 1));
        }
    }
}

template <typename RunFn>
RepeatSummary repeat_evaluate(RunFn&& run_fn, i64 n_runs, u64 seed_base) {
    if (n_runs < 1) throw UsageError("repeat_evaluate: need at least one run");
    RepeatSummary out;
    for (i64 i = 0; i < n_runs; ++i) {
        const std::string tag = "run " + std::to_string(i + 1) + ": ";
        try {
            out.runs.push_back(run_fn(seed_base + static_cast<u64>(i)));
        } catch (const ConfigError& e) {
            throw ConfigError(tag + e.what());
        } catch (const ShapeError& e) {
            throw ShapeError(tag + e.what());
        } catch (const UsageError& e) {
            throw UsageError(tag + e.what());
        } catch (const DataError& e) {
            throw DataError(tag + e.what());
        } catch (const FormatError& e) {
            throw FormatError(tag + e.what());
        } catch (const NumericError& e) {
            throw NumericError(tag + e.what());
        } catch (const InternalError& e) {
            throw InternalError(tag + e.what());
        }
    }
    aggregate_runs(out);
    return out;
}

// One row per run plus mean/std rows, mirroring the usual results-table layout.
inline std::string format_metrics_tsv(const RepeatSummary& summary) {
    auto fmt = [](const std::optional<double>& v) {
        if (!v) return std::string("undefined");
        char buf[48];
        std::snprintf(buf, sizeof(buf), "%.6f", *v);
        return std::string(buf);
    };
    std::string out = "run";
    for (const char* name : detail::kMetricNames) out += std::string("\t") + name;
    out += "\n";
    for (std::size_t r = 0; r < summary.runs.size(); ++r) {
        out += std::to_string(r + 1);
        for (int f = 0; f < 7; ++f) out += "\t" + fmt(summary.runs[r].*detail::metric_field(f));
        out += "\n";
    }
    out += "mean";
    for (int f = 0; f < 7; ++f) out += "\t" + fmt(summary.mean.*detail::aggregate_field(f));
    out += "\nstd";
    for (int f = 0; f < 7; ++f) out += "\t" + fmt(summary.stddev.*detail::aggregate_field(f));
    out += "\n";
    return out;
}

// ---------------------------------------------------------------------------
// Model scoring helpers
// ---------------------------------------------------------------------------

template <typename S>
std::vector<double> score_pairs(const ModelT<S>& model, const std::vector<PairExampleT<S>>& examples) {
    std::vector<double> scores(examples.size(), 0.0);
    parallel_for(static_cast<i64>(examples.size()), [&](i64 i) {
        const auto& ex = examples[static_cast<std::size_t>(i)];
        TapeT<S> tape(false);
        scores[static_cast<std::size_t>(i)] =
            static_cast<double>(model.predict_pair(tape, *ex.toxin, *ex.protein, Mode::eval).prob->value[0]);
    });
    return scores;
}

// Threshold metrics plus AUC in one go; AUC stays undefined when only one
// class is present instead of failing the whole evaluation.
template <typename S>
MetricsReport evaluate_examples(const ModelT<S>& model, const std::vector<PairExampleT<S>>& examples,
                                double threshold = 0.5) {
    if (examples.empty()) throw UsageError("evaluate_examples: no pairs to score");
    const auto scores = score_pairs(model, examples);
    std::vector<int> labels;
    labels.reserve(examples.size());
    for (const auto& ex : examples) labels.push_back(ex.label);
    MetricsReport r = compute_metrics(confusion(scores, labels, threshold), threshold);
    const bool has_pos = std::find(labels.begin(), labels.end(), 1) != labels.end();
    const bool has_neg = std::find(labels.begin(), labels.end(), 0) != labels.end();
    if (has_pos && has_neg) r.auc = roc_auc(scores, labels).auc;
    return r;
}

// ---------------------------------------------------------------------------
// KNN baseline: concatenated mean-pooled input embeddings, Euclidean distance,
// distance ties broken by ascending training index.
// ---------------------------------------------------------------------------

template <typename S>
std::vector<double> mean_pool_rows(const TensorT<S>& m) {
    if (m.rank() != 2 || m.rows() < 1) throw ShapeError("mean_pool_rows needs a non-empty matrix");
    std::vector<double> out(static_cast<std::size_t>(m.cols()), 0.0);
    for (i64 r = 0; r < m.rows(); ++r) {
        for (i64 c = 0; c < m.cols(); ++c) out[static_cast<std::size_t>(c)] += static_cast<double>(m.at(r, c));
    }
    for (double& v : out) v /= static_cast<double>(m.rows());
    return out;
}

template <typename S>
std::vector<double> knn_pair_feature(const TensorT<S>& toxin_m, const TensorT<S>& protein_m) {
    std::vector<double> f = mean_pool_rows(toxin_m);
    const std::vector<double> p = mean_pool_rows(protein_m);
    f.insert(f.end(), p.begin(), p.end());
    return f;
}

inline std::vector<double> knn_scores(const std::vector<std::vector<double>>& train_feats,
                                      const std::vector<int>& train_labels,
                                      const std::vector<std::vector<double>>& test_feats, i64 k = 5) {
    if (train_feats.size() != train_labels.size()) {
        throw UsageError("knn_scores: feature/label length mismatch");
    }
    if (train_feats.empty()) throw UsageError("knn_scores: empty training set");
    if (k < 1 || k > static_cast<i64>(train_feats.size())) {
        throw UsageError("knn_scores: k=" + std::to_string(k) + " but training set has " +
                         std::to_string(train_feats.size()) + " pairs");
    }
    const std::size_t dim = train_feats.front().size();
    for (const auto& f : train_feats) {
        if (f.size() != dim) throw UsageError("knn_scores: inconsistent feature widths");
    }
    for (const auto& f : test_feats) {
        if (f.size() != dim) throw UsageError("knn_scores: inconsistent feature widths");
    }
    for (int y : train_labels) {
        if (y != 0 && y != 1) throw UsageError("knn_scores: label must be 0 or 1");
    }

    std::vector<double> scores(test_feats.size(), 0.0);
    parallel_for(static_cast<i64>(test_feats.size()), [&](i64 t) {
        const auto& q = test_feats[static_cast<std::size_t>(t)];
        std::vector<std::pair<double, std::size_t>> dist(train_feats.size());
        for (std::size_t i = 0; i < train_feats.size(); ++i) {
            double d2 = 0.0;
            for (std::size_t c = 0; c < dim; ++c) {
                const double d = q[c] - train_feats[i][c];
                d2 += d * d;
            }
            dist[i] = {d2, i};
        }
        std::sort(dist.begin(), dist.end());  // pair ordering = (distance, train index)
        i64 positives = 0;
        for (i64 i = 0; i < k; ++i) positives += train_labels[dist[static_cast<std::size_t>(i)].second];
        scores[static_cast<std::size_t>(t)] = static_cast<double>(positives) / static_cast<double>(k);
    });
    return scores;
}

// ---------------------------------------------------------------------------
// Feature export: the pre-head concatenated pooled vectors, one CSV row per pair
// ---------------------------------------------------------------------------

namespace detail {

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

}  // namespace detail

template <typename S>
void export_features(const ModelT<S>& model, const std::vector<PairExampleT<S>>& examples,
                     std::ostream& out) {
    const i64 width = 2 * model.config().hidden;
    std::vector<std::vector<S>> feats(examples.size());
    parallel_for(static_cast<i64>(examples.size()), [&](i64 i) {
        const auto& ex = examples[static_cast<std::size_t>(i)];
        TapeT<S> tape(false);
        auto r = model.predict_pair(tape, *ex.toxin, *ex.protein, Mode::eval);
        std::vector<S>& f = feats[static_cast<std::size_t>(i)];
        for (i64 c = 0; c < r.o1->value.numel(); ++c) f.push_back(r.o1->value[c]);
        for (i64 c = 0; c < r.o2->value.numel(); ++c) f.push_back(r.o2->value[c]);
    });

    out << "toxin_id,protein_id,label";
    for (i64 c = 0; c < width; ++c) out << ",f" << c;
    out << "\n";
    char buf[64];
    for (std::size_t i = 0; i < examples.size(); ++i) {
        out << detail::csv_field(examples[i].toxin_id) << ','
            << detail::csv_field(examples[i].protein_id) << ',' << examples[i].label;
        for (S v : feats[i]) {
            std::snprintf(buf, sizeof(buf), "%.*g", std::numeric_limits<S>::max_digits10,
                          static_cast<double>(v));
            out << ',' << buf;
        }
        out << "\n";
    }
}

// ---------------------------------------------------------------------------
// External score files: toxin_id <TAB> protein_id <TAB> score
// ---------------------------------------------------------------------------

struct ExternalScore {
    std::string toxin_id;
    std::string protein_id;
    double score = 0.0;
};

inline std::vector<ExternalScore> read_scores_tsv(const std::string& path) {
    std::vector<ExternalScore> out;
    std::set<std::pair<std::string, std::string>> seen;
    detail::for_each_tsv_row(path, [&](const std::string& line, const std::string& where) {
        auto f = detail::split_tsv_line(line, 3, where);
        ExternalScore s;
        s.toxin_id = f[0];
        s.protein_id = f[1];
        try {
            s.score = std::stod(f[2]);
        } catch (const std::exception&) {
            throw DataError(where + ": score '" + f[2] + "' is not a number");
        }
        if (!std::isfinite(s.score)) throw DataError(where + ": non-finite score");
        if (!seen.emplace(s.toxin_id, s.protein_id).second) {
            throw DataError(where + ": duplicate score for pair " + s.toxin_id + "/" + s.protein_id);
        }
        out.push_back(std::move(s));
    });
    if (out.empty()) throw DataError(path + ": no scores");
    return out;
}

}  // namespace tipformer
