#include "pocketnet/losses.hpp"

#include <cmath>

#include "pocketnet/errors.hpp"

namespace pocketnet {

ArcFaceHead ArcFaceHead::make(int classes, int dim, float s, float m, Rng& rng,
                              const std::string& name) {
    if (s <= 0.0f) throw UsageError("arcface scale must be > 0");
    if (m < 0.0f || m >= static_cast<float>(M_PI) / 2.0f)
        throw UsageError("arcface margin must lie in [0, pi/2)");
    ArcFaceHead head;
    const float stddev = std::sqrt(1.0f / static_cast<float>(dim));
    head.centers = make_param(name, Tensor::randn({classes, dim}, rng, stddev));
    head.s = s;
    head.m = m;
    return head;
}

Tensor arcface_loss(const Tensor& embeddings, std::span<const int> labels, ArcFaceHead& head) {
    if (embeddings.rank() != 2) throw DataError("arcface_loss expects rank-2 embeddings");
    if (embeddings.dim(1) != head.dim())
        throw DataError("arcface_loss embedding dim " + std::to_string(embeddings.dim(1)) +
                        " != head dim " + std::to_string(head.dim()));
    if (static_cast<int>(labels.size()) != embeddings.dim(0))
        throw DataError("arcface_loss needs one label per embedding row");
    for (int lab : labels)
        if (lab < 0 || lab >= head.classes())
            throw DataError("arcface_loss label " + std::to_string(lab) + " out of range");
    Tensor f = l2_normalize_rows(embeddings);
    Tensor w = l2_normalize_rows(head.centers->value);
    Tensor cos = linear_nt(f, w);
    Tensor logits = arcface_logits(cos, labels, head.s, head.m);
    return cross_entropy(logits, labels);
}

Tensor embed_mse(const Tensor& student_embed, const Tensor& teacher_embed) {
    if (student_embed.rank() != 2 || teacher_embed.rank() != 2 ||
        student_embed.shape() != teacher_embed.shape())
        throw DataError("embed_mse expects matching rank-2 embedding batches");
    return mse_mean(student_embed, teacher_embed);
}

Tensor combined_loss(const Tensor& arc, const Tensor& mse, const LossConfig& config) {
    if (config.lambda < 0.0f) throw UsageError("kd lambda must be >= 0");
    if (config.kd_mode == KdMode::none) return arc;
    if (!mse.defined()) throw UsageError("combined_loss needs an mse term when kd is enabled");
    return add(arc, scalar_mul(mse, config.lambda));
}

}  // namespace pocketnet
