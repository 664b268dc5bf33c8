#pragma once

// Embedding-space evaluation: k-fold pair-verification accuracy, TAR at a
// fixed FAR, and rank-1 identification. Pure functions; score ties at a
// threshold count as accepts.

#include <span>
#include <vector>

namespace pocketnet {

double cosine_similarity(std::span<const float> a, std::span<const float> b);

struct PairProtocol {
    struct Pair {
        int a = 0;
        int b = 0;
        bool genuine = false;
    };
    std::vector<Pair> pairs;
    int fold_count = 10;
};

// Per fold, the accept threshold maximizing accuracy on the other folds is
// applied to the held-out fold; the fold accuracies are averaged. Folds are
// assigned by pair index modulo fold_count.
double verification_accuracy(const PairProtocol& protocol,
                             const std::vector<std::vector<float>>& embeddings);

// threshold = smallest impostor score with FAR <= far_target (above the
// impostor maximum when no such score exists); returns the genuine fraction
// at or above the threshold.
double tar_at_far(std::vector<double> genuine_scores, std::vector<double> impostor_scores,
                  double far_target);

// fraction of probes whose cosine-nearest gallery entry shares their label;
// ties go to the lowest gallery index
double rank1_identification(const std::vector<std::vector<float>>& probe_embeddings,
                            const std::vector<std::vector<float>>& gallery_embeddings,
                            const std::vector<int>& gallery_labels,
                            const std::vector<int>& probe_labels);

}  // namespace pocketnet
