#pragma once

// ArcFace margin loss, embedding-distillation MSE, and their weighted
// combination. All pure functions over tensors plus the head parameters.

#include <span>
#include <vector>

#include "pocketnet/tensor.hpp"

namespace pocketnet {

struct ArcFaceHead {
    ParamPtr centers;  // [classes, dim], rows normalized at loss time
    float s = 64.0f;   // scale
    float m = 0.5f;    // additive angular margin, radians

    static ArcFaceHead make(int classes, int dim, float s, float m, Rng& rng,
                            const std::string& name = "head.centers");
    int classes() const { return centers->value.dim(0); }
    int dim() const { return centers->value.dim(1); }
};

// Mean over the batch of -log softmax with the target logit s*cos(theta_y + m)
// and non-target logits s*cos(theta_j). Embeddings are normalized internally;
// zero rows are rejected.
Tensor arcface_loss(const Tensor& embeddings, std::span<const int> labels, ArcFaceHead& head);

// Plain MSE over already-normalized embedding batches; the teacher side is
// expected to be a constant (detached) tensor.
Tensor embed_mse(const Tensor& student_embed, const Tensor& teacher_embed);

enum class KdMode { none, converged, multi_step };

struct LossConfig {
    float lambda = 100.0f;
    KdMode kd_mode = KdMode::none;
};

// arc + lambda*mse; the lambda term is omitted entirely when kd_mode is none.
Tensor combined_loss(const Tensor& arc, const Tensor& mse, const LossConfig& config);

}  // namespace pocketnet
