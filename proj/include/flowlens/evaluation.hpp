// Copyright 2026 The flowlens Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "flowlens/contrastive.hpp"
#include "flowlens/rng.hpp"

namespace flowlens {

// ---------------------------------------------------------------------------
// Similarity scoring

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw std::invalid_argument("cosine_similarity: dimension mismatch");
    }
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if (aa == 0.0 || bb == 0.0) {
        throw std::invalid_argument("cosine_similarity: zero-norm vector");
    }
    return ab / (std::sqrt(aa) * std::sqrt(bb));
}

/// Highest cosine similarity between `f` and any row of the (n, d) reference
/// matrix. Lower means more anomalous.
inline double anomaly_score(std::span<const double> f, std::span<const double> reference, std::size_t dim) {
    if (dim == 0 || reference.empty() || reference.size() % dim != 0 || f.size() != dim) {
        throw std::invalid_argument("anomaly_score: empty reference or dimension mismatch");
    }
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < reference.size() / dim; ++r) {
        best = std::max(best, cosine_similarity(f, reference.subspan(r * dim, dim)));
    }
    return best;
}

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline RowMatrix unit_rows(std::span<const double> x, std::size_t dim) {
    const auto n = static_cast<Eigen::Index>(x.size() / dim);
    RowMatrix m = Eigen::Map<const RowMatrix>(x.data(), n, static_cast<Eigen::Index>(dim));
    for (Eigen::Index r = 0; r < n; ++r) {
        const double norm = m.row(r).norm();
        if (norm == 0.0) {
            throw std::invalid_argument("anomaly_scores: zero-norm vector at row " + std::to_string(r));
        }
        m.row(r) /= norm;
    }
    return m;
}

}  // namespace detail

/// anomaly_score for every row of `queries`, computed blockwise with a
/// matrix product over unit-normalized rows.
inline std::vector<double> anomaly_scores(std::span<const double> queries, std::span<const double> reference,
                                          std::size_t dim, std::size_t block = 512) {
    if (dim == 0 || reference.empty() || reference.size() % dim != 0 || queries.size() % dim != 0) {
        throw std::invalid_argument("anomaly_scores: empty reference or dimension mismatch");
    }
    const auto q = detail::unit_rows(queries, dim);
    const auto ref = detail::unit_rows(reference, dim);
    std::vector<double> out(static_cast<std::size_t>(q.rows()), -std::numeric_limits<double>::infinity());
    for (Eigen::Index r0 = 0; r0 < ref.rows(); r0 += static_cast<Eigen::Index>(block)) {
        const Eigen::Index nr = std::min<Eigen::Index>(static_cast<Eigen::Index>(block), ref.rows() - r0);
        const Eigen::MatrixXd sims = q * ref.middleRows(r0, nr).transpose();
        for (Eigen::Index i = 0; i < q.rows(); ++i) {
            out[static_cast<std::size_t>(i)] = std::max(out[static_cast<std::size_t>(i)], sims.row(i).maxCoeff());
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// AUC

struct RocPoint {
    double threshold = 0.0;
    double fpr = 0.0;
    double tpr = 0.0;
};

struct AUCResult {
    double auc = 0.5;
    std::size_t positives = 0;
    std::size_t negatives = 0;
    std::vector<RocPoint> roc;

    [[nodiscard]] nlohmann::json to_json() const {
        return {{"auc", auc}, {"positives", positives}, {"negatives", negatives}, {"roc_points", roc.size()}};
    }

    [[nodiscard]] std::string roc_csv() const {
        std::ostringstream os;
        os << std::setprecision(17) << "threshold,fpr,tpr\n";
        for (const auto& p : roc) {
            os << p.threshold << ',' << p.fpr << ',' << p.tpr << '\n';
        }
        return os.str();
    }
};

/// Rank-based AUC with midranks for ties; positive class = label 1. Higher
/// score means more likely positive.
inline AUCResult auc_roc(std::span<const double> scores, std::span<const std::int32_t> labels) {
    if (scores.size() != labels.size()) {
        throw std::invalid_argument("auc_roc: scores and labels differ in length");
    }
    AUCResult res;
    for (auto y : labels) {
        if (y != 0 && y != 1) {
            throw std::invalid_argument("auc_roc: labels must be 0 or 1");
        }
        (y == 1 ? res.positives : res.negatives) += 1;
    }
    if (res.positives == 0 || res.negatives == 0) {
        throw std::invalid_argument("auc_roc: both classes must be present");
    }
    for (double s : scores) {
        if (std::isnan(s)) {
            throw std::invalid_argument("auc_roc: NaN score");
        }
    }
    std::vector<std::size_t> order(scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double pos_rank_sum = 0.0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            ++j;
        }
        const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
        for (std::size_t k = i; k < j; ++k) {
            if (labels[order[k]] == 1) {
                pos_rank_sum += midrank;
            }
        }
        i = j;
    }
    const double np = static_cast<double>(res.positives), nn = static_cast<double>(res.negatives);
    res.auc = (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);

    // ROC: sweep thresholds from high to low, one point per distinct score.
    res.roc.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = order.size(); i > 0;) {
        const double s = scores[order[i - 1]];
        while (i > 0 && scores[order[i - 1]] == s) {
            (labels[order[i - 1]] == 1 ? tp : fp) += 1;
            --i;
        }
        res.roc.push_back({s, static_cast<double>(fp) / nn, static_cast<double>(tp) / np});
    }
    return res;
}

// ---------------------------------------------------------------------------
// Splits

struct SplitSpec {
    double pretrain_benign_fraction = 0.6;
    double supervised_malicious_fraction = 0.6;
    double fewshot_fraction = 0.001;
    std::uint64_t seed = 0;

    void validate() const {
        for (double f : {pretrain_benign_fraction, supervised_malicious_fraction, fewshot_fraction}) {
            if (!(f > 0.0 && f <= 1.0)) {
                throw std::invalid_argument("SplitSpec: fractions must lie in (0, 1]");
            }
        }
    }

    [[nodiscard]] nlohmann::json to_json() const {
        return {{"pretrain_benign_fraction", pretrain_benign_fraction},
                {"supervised_malicious_fraction", supervised_malicious_fraction},
                {"fewshot_fraction", fewshot_fraction},
                {"seed", seed}};
    }

    static SplitSpec from_json(const nlohmann::json& j) {
        SplitSpec s;
        s.pretrain_benign_fraction = j.value("pretrain_benign_fraction", s.pretrain_benign_fraction);
        s.supervised_malicious_fraction = j.value("supervised_malicious_fraction", s.supervised_malicious_fraction);
        s.fewshot_fraction = j.value("fewshot_fraction", s.fewshot_fraction);
        s.seed = j.value("seed", s.seed);
        s.validate();
        return s;
    }
};

/// Index sets over a labeled corpus (label 1 = malicious).
struct Splits {
    std::vector<std::size_t> pretrain;    // benign training flows
    std::vector<std::size_t> supervised;  // pretrain + malicious training flows
    std::vector<std::size_t> test;        // everything else
};

inline std::size_t fraction_count(double fraction, std::size_t n) {
    return std::min(n, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))));
}

inline Splits make_splits(std::span<const std::int32_t> labels, const SplitSpec& spec) {
    spec.validate();
    std::vector<std::size_t> benign, malicious;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        (labels[i] == 1 ? malicious : benign).push_back(i);
    }
    Rng rng(spec.seed, 0x5a17);
    rng.shuffle(benign);
    rng.shuffle(malicious);
    const std::size_t nb = fraction_count(spec.pretrain_benign_fraction, benign.size());
    const std::size_t nm = fraction_count(spec.supervised_malicious_fraction, malicious.size());
    Splits s;
    s.pretrain.assign(benign.begin(), benign.begin() + static_cast<std::ptrdiff_t>(nb));
    s.supervised = s.pretrain;
    s.supervised.insert(s.supervised.end(), malicious.begin(), malicious.begin() + static_cast<std::ptrdiff_t>(nm));
    s.test.assign(benign.begin() + static_cast<std::ptrdiff_t>(nb), benign.end());
    s.test.insert(s.test.end(), malicious.begin() + static_cast<std::ptrdiff_t>(nm), malicious.end());
    std::sort(s.pretrain.begin(), s.pretrain.end());
    std::sort(s.supervised.begin(), s.supervised.end());
    std::sort(s.test.begin(), s.test.end());
    return s;
}

/// `count` indices drawn from `pool` without replacement, allocated to the
/// classes in proportion to their share of the pool (largest remainder), at
/// least one per class present.
inline std::vector<std::size_t> stratified_sample(std::span<const std::size_t> pool,
                                                  std::span<const std::int32_t> labels, std::size_t count, Rng& rng) {
    std::map<std::int32_t, std::vector<std::size_t>> by_class;
    for (auto i : pool) {
        by_class[labels[i]].push_back(i);
    }
    count = std::min(count, pool.size());
    std::map<std::int32_t, std::size_t> take;
    std::vector<std::pair<double, std::int32_t>> remainders;
    std::size_t assigned = 0;
    for (const auto& [c, idx] : by_class) {
        const double exact = static_cast<double>(count) * static_cast<double>(idx.size()) / static_cast<double>(pool.size());
        take[c] = static_cast<std::size_t>(std::floor(exact));
        assigned += take[c];
        remainders.emplace_back(exact - std::floor(exact), c);
    }
    std::stable_sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t k = 0; assigned < count && k < remainders.size(); ++k, ++assigned) {
        take[remainders[k].second] += 1;
    }
    for (auto& [c, n] : take) {
        if (n == 0 && count >= by_class.size()) {
            // Borrow from the largest allocation so every class appears.
            auto largest = std::max_element(take.begin(), take.end(),
                                            [](const auto& a, const auto& b) { return a.second < b.second; });
            largest->second -= 1;
            n = 1;
        }
    }
    std::vector<std::size_t> out;
    for (auto& [c, idx] : by_class) {
        rng.shuffle(idx);
        const std::size_t n = std::min(take[c], idx.size());
        out.insert(out.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n));
    }
    std::sort(out.begin(), out.end());
    return out;
}

/// Few-shot labeled subset: round(fraction * corpus_size) samples,
/// stratified, from the supervised training pool.
inline std::vector<std::size_t> fewshot_sample(std::span<const std::size_t> supervised,
                                               std::span<const std::int32_t> labels, double fraction,
                                               std::size_t corpus_size, Rng& rng) {
    return stratified_sample(supervised, labels, fraction_count(fraction, corpus_size), rng);
}

template <class X>
std::vector<X> gather(std::span<const X> xs, std::span<const std::size_t> idx) {
    std::vector<X> out;
    out.reserve(idx.size());
    for (auto i : idx) {
        out.push_back(xs[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Protocols

/// Encodes reference (benign training) and test flows in eval mode; decision
/// score is 1 - max cosine, malicious positive.
template <class T, class Enc>
AUCResult run_unsupervised_eval(const Enc& encoder, std::span<const typename Enc::Item> reference,
                                std::span<const typename Enc::Item> test, std::span<const std::int32_t> test_labels,
                                std::vector<double>* decision_scores = nullptr) {
    const std::size_t d = encoder.embedding_dim();
    const auto ref = embed_all<T>(encoder, reference);
    const auto q = embed_all<T>(encoder, test);
    const auto sims = anomaly_scores(q, ref, d);
    std::vector<double> scores(sims.size());
    for (std::size_t i = 0; i < sims.size(); ++i) {
        scores[i] = 1.0 - sims[i];
    }
    auto res = auc_roc(scores, test_labels);
    if (decision_scores) {
        *decision_scores = std::move(scores);
    }
    return res;
}

struct FewshotResult {
    AUCResult auc;
    FinetuneReport finetune;
};

/// Fine-tunes a copy of `init` on the labeled subset and scores the test
/// split by classifier probability.
template <class T, class Enc>
FewshotResult run_fewshot_eval(const ContrastiveModel<T, Enc>& init, std::span<const typename Enc::Item> labeled,
                               std::span<const std::int32_t> labeled_y, std::span<const typename Enc::Item> test,
                               std::span<const std::int32_t> test_y, const TrainConfig& cfg, Rng& rng,
                               bool fit_normalization = false) {
    auto model = init.clone();
    FewshotResult r;
    if constexpr (std::is_same_v<Enc, DnnEncoder<T>>) {
        r.finetune = finetune_baseline(model, labeled, labeled_y, cfg, rng, fit_normalization);
    } else {
        r.finetune = finetune(model, labeled, labeled_y, cfg, rng);
    }
    const auto p = predict_malicious(model, test);
    r.auc = auc_roc(p, test_y);
    return r;
}

// ---------------------------------------------------------------------------
// Tables

/// Labeled grid of AUC values, written as CSV with a leading row-label column.
struct ComparisonTable {
    std::string title;
    std::string corner;
    std::vector<std::string> rows;
    std::vector<std::string> columns;
    std::vector<std::vector<std::optional<double>>> values;

    ComparisonTable(std::string t, std::string c, std::vector<std::string> r, std::vector<std::string> cols)
        : title(std::move(t)), corner(std::move(c)), rows(std::move(r)), columns(std::move(cols)),
          values(rows.size(), std::vector<std::optional<double>>(columns.size())) {}

    void set(std::size_t r, std::size_t c, double v) { values.at(r).at(c) = v; }

    [[nodiscard]] bool complete() const {
        for (const auto& row : values) {
            for (const auto& v : row) {
                if (!v) {
                    return false;
                }
            }
        }
        return true;
    }

    [[nodiscard]] std::string to_csv() const {
        std::ostringstream os;
        os << corner;
        for (const auto& c : columns) {
            os << ',' << c;
        }
        os << '\n';
        for (std::size_t r = 0; r < rows.size(); ++r) {
            os << rows[r];
            for (const auto& v : values[r]) {
                os << ',';
                if (v) {
                    os << std::fixed << std::setprecision(4) << *v;
                }
            }
            os << '\n';
        }
        return os.str();
    }
};

}  // namespace flowlens
