#include "pocketnet/darts.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "pocketnet/errors.hpp"

namespace pocketnet {

void SearchConfig::validate() const {
    if (epochs < 0) throw UsageError("search epochs must be >= 0");
    if (batch_size < 2) throw UsageError("search batch_size must be >= 2");
    if (!(w_lr_min < w_lr_max)) throw UsageError("w_lr_min must be < w_lr_max");
    if (w_lr_min <= 0.0f || alpha_lr <= 0.0f) throw UsageError("learning rates must be > 0");
    if (init_channels < n_intermediate || init_channels % n_intermediate != 0)
        throw UsageError("init_channels must be a positive multiple of n_intermediate");
    if (n_cells < 1) throw UsageError("search needs at least one cell");
    if (n_intermediate < 1) throw UsageError("n_intermediate must be >= 1");
}

SplitDataset SplitDataset::split(const Dataset& ds, uint32_t seed) {
    ds.validate();
    if (ds.count() < 2) throw DataError("dataset too small to split");
    std::vector<int> idx(ds.count());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    rng.shuffle(idx);
    SplitDataset s;
    s.base = &ds;
    const size_t half = idx.size() / 2;
    s.train_half.assign(idx.begin(), idx.begin() + half);
    s.val_half.assign(idx.begin() + half, idx.end());
    return s;
}

float cosine_lr(int t, int total, float lr_max, float lr_min) {
    if (total < 1) throw UsageError("cosine_lr needs total >= 1");
    if (t < 0 || t > total)
        throw UsageError("cosine_lr step " + std::to_string(t) + " outside [0, " +
                         std::to_string(total) + "]");
    const double cosv = std::cos(M_PI * static_cast<double>(t) / total);
    return static_cast<float>(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + cosv));
}

// ---------------------------------------------------------------------------
// Supernet
// ---------------------------------------------------------------------------

SuperNet::SuperNet(const SearchConfig& config, int n_classes, int input_size, Rng& rng) {
    config.validate();
    if (n_classes < 2) throw DataError("search needs at least 2 classes");
    (void)input_size;
    stem_conv_ = Conv2dLayer::make(3, config.init_channels, 3, 1, 1, 1, "stem.conv", rng);
    stem_bn_ = BatchNorm2dLayer::make(config.init_channels, "stem.bn");

    int c_pp = config.init_channels, c_p = config.init_channels;
    int c_curr = config.init_channels;
    bool red_prev = false;
    for (int i = 0; i < config.n_cells; ++i) {
        const bool reduction =
            i == config.n_cells / 3 || i == (2 * config.n_cells) / 3;
        if (reduction) c_curr *= 2;
        cells_.push_back(SuperCell::make(c_pp, c_p, c_curr,
                                         reduction ? CellKind::reduction : CellKind::normal,
                                         red_prev, config.n_intermediate,
                                         "cells." + std::to_string(i), rng));
        c_pp = c_p;
        c_p = c_curr;
        red_prev = reduction;
    }
    classifier_ = LinearLayer::make(c_p, n_classes, "classifier", rng);
}

Tensor SuperNet::forward(const Tensor& x, const AlphaTable& alphas, bool training) {
    Tensor stem = stem_bn_.forward(stem_conv_.forward(x), training);
    Tensor prev2 = stem, prev1 = stem;
    for (auto& cell : cells_) {
        const Tensor& table = cell.tmpl.kind == CellKind::normal ? alphas.normal->value
                                                                 : alphas.reduce->value;
        Tensor out = cell.forward(prev2, prev1, table, training);
        prev2 = prev1;
        prev1 = out;
    }
    return classifier_.forward(global_avg_pool(prev1));
}

std::vector<ParamPtr> SuperNet::weight_params() const {
    std::vector<ParamPtr> out;
    stem_conv_.collect_params(out);
    stem_bn_.collect_params(out);
    for (const auto& c : cells_) c.collect_params(out);
    classifier_.collect_params(out);
    return out;
}

// ---------------------------------------------------------------------------
// Bi-level stepping
// ---------------------------------------------------------------------------

BilevelStepper::BilevelStepper(SuperNet& net, AlphaTable& alphas, const SearchConfig& config)
    : net_(net),
      alphas_(alphas),
      config_(config),
      weights_(net.weight_params()),
      alpha_opt_(alphas.params(), config.alpha_betas.first, config.alpha_betas.second,
                 config.alpha_weight_decay) {}

float BilevelStepper::alpha_step(const Tensor& val_x, const std::vector<int>& val_y) {
    zero_grads(std::span<const ParamPtr>(alphas_.params()));
    Tensor loss = cross_entropy(net_.forward(val_x, alphas_, true), val_y);
    const float v = loss.item();
    if (!std::isfinite(v)) throw NumericError("non-finite validation loss");
    backward(loss);
    alpha_opt_.step(config_.alpha_lr);
    return v;
}

float BilevelStepper::weight_step(const Tensor& train_x, const std::vector<int>& train_y,
                                  float w_lr) {
    zero_grads(weights_);
    Tensor loss = cross_entropy(net_.forward(train_x, alphas_, true), train_y);
    const float v = loss.item();
    if (!std::isfinite(v)) throw NumericError("non-finite training loss");
    backward(loss);
    if (w_lr > 0.0f)  // zero rate means frozen weights
        sgd_step(weights_, w_lr, config_.w_momentum, config_.w_weight_decay);
    return v;
}

std::pair<float, float> BilevelStepper::step(const Tensor& train_x,
                                             const std::vector<int>& train_y,
                                             const Tensor& val_x,
                                             const std::vector<int>& val_y, float w_lr) {
    const float val_loss = alpha_step(val_x, val_y);
    const float train_loss = weight_step(train_x, train_y, w_lr);
    return {train_loss, val_loss};
}

// ---------------------------------------------------------------------------
// Search loop
// ---------------------------------------------------------------------------

SearchResult search_run(const SplitDataset& data, const SearchConfig& config) {
    config.validate();
    if (!data.base) throw UsageError("search_run needs a split dataset");
    if (data.train_half.empty() || data.val_half.empty())
        throw DataError("both dataset halves must be non-empty");

    Rng init_rng(config.seed);
    Rng order_rng(config.seed + 0x1001u);
    Rng flip_rng(config.seed + 0x2002u);

    SuperNet net(config, static_cast<int>(data.base->classes),
                 static_cast<int>(data.base->height), init_rng);
    SearchResult result{AlphaTable::init(config.n_intermediate, config.alpha_init_sigma,
                                         init_rng),
                        {}};
    if (config.epochs == 0) return result;

    const int steps = static_cast<int>(data.train_half.size()) / config.batch_size;
    if (steps < 1)
        throw DataError("batch_size " + std::to_string(config.batch_size) +
                        " exceeds the train half (" + std::to_string(data.train_half.size()) +
                        " samples)");

    BilevelStepper stepper(net, result.alphas, config);
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const float w_lr = cosine_lr(epoch, config.epochs, config.w_lr_max, config.w_lr_min);
        std::vector<int> train_order = data.train_half;
        std::vector<int> val_order = data.val_half;
        order_rng.shuffle(train_order);
        order_rng.shuffle(val_order);

        double train_sum = 0.0, val_sum = 0.0;
        size_t val_at = 0;
        for (int s = 0; s < steps; ++s) {
            std::vector<int> tb(train_order.begin() + static_cast<size_t>(s) * config.batch_size,
                                train_order.begin() +
                                    static_cast<size_t>(s + 1) * config.batch_size);
            std::vector<int> vb;
            for (int i = 0; i < config.batch_size; ++i) {
                vb.push_back(val_order[val_at]);
                val_at = (val_at + 1) % val_order.size();
            }
            std::vector<int> ty, vy;
            Tensor tx = make_batch(*data.base, tb, &flip_rng, ty);
            Tensor vx = make_batch(*data.base, vb, &flip_rng, vy);
            try {
                auto [tl, vl] = stepper.step(tx, ty, vx, vy, w_lr);
                train_sum += tl;
                val_sum += vl;
            } catch (const NumericError& e) {
                throw NumericError(std::string(e.what()) + " (epoch " +
                                   std::to_string(epoch + 1) + ", batch " + std::to_string(s) +
                                   ")");
            }
        }
        result.history.push_back(
            {epoch + 1, train_sum / steps, val_sum / steps, w_lr});
    }
    return result;
}

// ---------------------------------------------------------------------------
// Genotype derivation
// ---------------------------------------------------------------------------

namespace {

struct EdgeChoice {
    int pred = 0;
    OpKind op = OpKind::identity;
    double weight = 0.0;
};

std::vector<Genotype::NodeSpec> derive_cells(const Tensor& table, int n_intermediate) {
    std::vector<Genotype::NodeSpec> nodes;
    const auto& a = table.data();
    for (int j = 0; j < n_intermediate; ++j) {
        std::vector<EdgeChoice> choices;
        for (int pred = 0; pred < j + 2; ++pred) {
            const int row = CellTemplate::edge_index(j, pred);
            const float* logits = &a[static_cast<size_t>(row) * kNumOps];
            for (int o = 0; o < kNumOps; ++o)
                if (!std::isfinite(logits[o]))
                    throw NumericError("non-finite alpha while deriving genotype");
            // softmax over all ops, including zero
            double mx = logits[0];
            for (int o = 1; o < kNumOps; ++o) mx = std::max(mx, static_cast<double>(logits[o]));
            double denom = 0.0;
            for (int o = 0; o < kNumOps; ++o) denom += std::exp(logits[o] - mx);
            // argmax over non-zero ops, ties to the lower op index
            int best = -1;
            for (int o = 0; o < kNumOps; ++o) {
                if (static_cast<OpKind>(o) == OpKind::zero) continue;
                if (best < 0 || logits[o] > logits[best]) best = o;
            }
            choices.push_back({pred, static_cast<OpKind>(best),
                               std::exp(logits[best] - mx) / denom});
        }
        // top-2 edges by weight; ties by lower predecessor (stable order)
        std::stable_sort(choices.begin(), choices.end(),
                         [](const EdgeChoice& x, const EdgeChoice& y) {
                             return x.weight > y.weight;
                         });
        Genotype::NodeSpec spec;
        EdgeChoice picked[2] = {choices[0], choices[1]};
        if (picked[0].pred > picked[1].pred) std::swap(picked[0], picked[1]);
        spec.edges[0] = {picked[0].pred, picked[0].op};
        spec.edges[1] = {picked[1].pred, picked[1].op};
        nodes.push_back(spec);
    }
    return nodes;
}

}  // namespace

Genotype derive_genotype(const AlphaTable& alphas) {
    Genotype g;
    g.n_intermediate = alphas.n_intermediate;
    g.normal = derive_cells(alphas.normal->value, alphas.n_intermediate);
    g.reduce = derive_cells(alphas.reduce->value, alphas.n_intermediate);
    validate_genotype(g);
    return g;
}

std::string history_csv(const std::vector<EpochStats>& history) {
    std::ostringstream os;
    os << "epoch,train_loss,val_loss,w_lr\n";
    char buf[128];
    for (const auto& h : history) {
        std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,%.6g\n", h.epoch, h.train_loss,
                      h.val_loss, static_cast<double>(h.w_lr));
        os << buf;
    }
    return os.str();
}

}  // namespace pocketnet
