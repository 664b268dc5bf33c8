#include "pocketnet/nn.hpp"

#include <cmath>

namespace pocketnet {

Conv2dLayer Conv2dLayer::make(int in_c, int out_c, int k, int stride, int padding, int groups,
                              const std::string& name, Rng& rng) {
    Conv2dLayer l;
    const int fan_in = (in_c / groups) * k * k;
    const float stddev = std::sqrt(2.0f / static_cast<float>(fan_in));
    l.weight = make_param(name + ".weight",
                          Tensor::randn({out_c, in_c / groups, k, k}, rng, stddev));
    l.stride = stride;
    l.padding = padding;
    l.groups = groups;
    return l;
}

void Conv2dLayer::collect_state(std::vector<NamedTensorRef>& out) const {
    out.push_back({weight->name, weight->value.shape(), &weight->value.data()});
}

BatchNorm2dLayer BatchNorm2dLayer::make(int channels, const std::string& name) {
    BatchNorm2dLayer l;
    l.scale = make_param(name + ".scale", Tensor::full({channels}, 1.0f));
    l.shift = make_param(name + ".shift", Tensor::zeros({channels}));
    l.stats = RunningStats::make(channels);
    l.prefix = name;
    return l;
}

void BatchNorm2dLayer::collect_state(std::vector<NamedTensorRef>& out) {
    out.push_back({scale->name, scale->value.shape(), &scale->value.data()});
    out.push_back({shift->name, shift->value.shape(), &shift->value.data()});
    const int c = static_cast<int>(stats.mean.size());
    out.push_back({prefix + ".running_mean", {c}, &stats.mean});
    out.push_back({prefix + ".running_var", {c}, &stats.var});
}

PReLULayer PReLULayer::make(int channels, const std::string& name) {
    PReLULayer l;
    l.slope = make_param(name + ".slope", Tensor::full({channels}, 0.25f));
    return l;
}

void PReLULayer::collect_state(std::vector<NamedTensorRef>& out) const {
    out.push_back({slope->name, slope->value.shape(), &slope->value.data()});
}

LinearLayer LinearLayer::make(int in_dim, int out_dim, const std::string& name, Rng& rng) {
    LinearLayer l;
    const float stddev = std::sqrt(1.0f / static_cast<float>(in_dim));
    l.weight = make_param(name + ".weight", Tensor::randn({out_dim, in_dim}, rng, stddev));
    return l;
}

void LinearLayer::collect_state(std::vector<NamedTensorRef>& out) const {
    out.push_back({weight->name, weight->value.shape(), &weight->value.data()});
}

}  // namespace pocketnet
