#include "pocketnet/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "pocketnet/errors.hpp"

namespace pocketnet {

double cosine_similarity(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size() || a.empty())
        throw DataError("cosine_similarity needs equal-length non-empty vectors");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    if (na <= 1e-24 || nb <= 1e-24)
        throw NumericError("cosine_similarity of a zero vector");
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

namespace {

// accuracy of accept-iff-score>=threshold over (score, genuine) pairs
double accuracy_at(const std::vector<std::pair<double, bool>>& scored, double threshold) {
    int correct = 0;
    for (const auto& [s, genuine] : scored)
        if ((s >= threshold) == genuine) ++correct;
    return scored.empty() ? 0.0 : static_cast<double>(correct) / scored.size();
}

// best threshold over the candidate set {scores} U {above-max}; the lowest
// maximizing threshold wins ties
double best_threshold(const std::vector<std::pair<double, bool>>& scored) {
    std::vector<double> candidates;
    candidates.reserve(scored.size() + 1);
    double mx = -std::numeric_limits<double>::infinity();
    for (const auto& [s, genuine] : scored) {
        candidates.push_back(s);
        mx = std::max(mx, s);
    }
    candidates.push_back(mx + 1.0);  // reject-all
    std::sort(candidates.begin(), candidates.end());
    double best_t = candidates.front();
    double best_acc = -1.0;
    for (double t : candidates) {
        const double acc = accuracy_at(scored, t);
        if (acc > best_acc) {
            best_acc = acc;
            best_t = t;
        }
    }
    return best_t;
}

}  // namespace

double verification_accuracy(const PairProtocol& protocol,
                             const std::vector<std::vector<float>>& embeddings) {
    if (protocol.fold_count < 1) throw UsageError("fold_count must be >= 1");
    if (static_cast<int>(protocol.pairs.size()) < protocol.fold_count)
        throw DataError("fewer pairs than folds");
    bool any_genuine = false, any_impostor = false;
    std::vector<std::pair<double, bool>> scored;
    scored.reserve(protocol.pairs.size());
    for (const auto& p : protocol.pairs) {
        if (p.a < 0 || p.b < 0 || p.a >= static_cast<int>(embeddings.size()) ||
            p.b >= static_cast<int>(embeddings.size()))
            throw DataError("pair references a missing embedding");
        scored.emplace_back(cosine_similarity(embeddings[p.a], embeddings[p.b]), p.genuine);
        (p.genuine ? any_genuine : any_impostor) = true;
    }
    if (!any_genuine || !any_impostor)
        throw DataError("protocol needs at least one genuine and one impostor pair");

    if (protocol.fold_count == 1) {
        // degenerate split: tune and evaluate on everything
        return accuracy_at(scored, best_threshold(scored));
    }

    double total = 0.0;
    for (int fold = 0; fold < protocol.fold_count; ++fold) {
        std::vector<std::pair<double, bool>> train, test;
        for (size_t i = 0; i < scored.size(); ++i)
            (static_cast<int>(i % protocol.fold_count) == fold ? test : train)
                .push_back(scored[i]);
        if (test.empty() || train.empty()) throw DataError("empty fold in protocol");
        total += accuracy_at(test, best_threshold(train));
    }
    return total / protocol.fold_count;
}

double tar_at_far(std::vector<double> genuine_scores, std::vector<double> impostor_scores,
                  double far_target) {
    if (genuine_scores.empty() || impostor_scores.empty())
        throw DataError("tar_at_far needs non-empty score lists");
    if (!(far_target > 0.0 && far_target < 1.0))
        throw UsageError("far_target must lie in (0, 1)");
    std::sort(impostor_scores.begin(), impostor_scores.end());
    const size_t n = impostor_scores.size();
    // smallest impostor score whose FAR (accepts at >= threshold) meets the
    // target; falls back to just above the impostor maximum
    double threshold = std::numeric_limits<double>::quiet_NaN();
    bool above_max = true;
    for (size_t i = 0; i < n; ++i) {
        const double far = static_cast<double>(n - i) / n;  // fraction >= impostor[i]
        if (far <= far_target) {
            threshold = impostor_scores[i];
            above_max = false;
            break;
        }
    }
    size_t accepted = 0;
    if (above_max) {
        const double mx = impostor_scores.back();
        for (double g : genuine_scores)
            if (g > mx) ++accepted;
    } else {
        for (double g : genuine_scores)
            if (g >= threshold) ++accepted;
    }
    return static_cast<double>(accepted) / genuine_scores.size();
}

double rank1_identification(const std::vector<std::vector<float>>& probe_embeddings,
                            const std::vector<std::vector<float>>& gallery_embeddings,
                            const std::vector<int>& gallery_labels,
                            const std::vector<int>& probe_labels) {
    if (gallery_embeddings.empty()) throw DataError("rank1 needs a non-empty gallery");
    if (gallery_embeddings.size() != gallery_labels.size() ||
        probe_embeddings.size() != probe_labels.size())
        throw DataError("rank1 label/embedding count mismatch");
    if (probe_embeddings.empty()) throw DataError("rank1 needs probes");
    int hits = 0;
    for (size_t p = 0; p < probe_embeddings.size(); ++p) {
        double best = -2.0;
        size_t best_at = 0;
        for (size_t g = 0; g < gallery_embeddings.size(); ++g) {
            const double s = cosine_similarity(probe_embeddings[p], gallery_embeddings[g]);
            if (s > best) {  // strict: first index wins ties
                best = s;
                best_at = g;
            }
        }
        if (gallery_labels[best_at] == probe_labels[p]) ++hits;
    }
    return static_cast<double>(hits) / probe_embeddings.size();
}

}  // namespace pocketnet
