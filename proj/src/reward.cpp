#include "dpolab/reward.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

#include "dpolab/task.hpp"
#include "dpolab/util.hpp"

namespace dpolab {

std::string RewardDescriptor::to_string() const {
    std::ostringstream ss;
    ss << name;
    for (const auto& [k, v] : params) ss << " " << k << "=" << format_double(v, 6);
    return ss.str();
}

double GoldTaskReward::score(const std::vector<int>& prompt, const Response& response) const {
    const auto target = reversal_target(prompt, vocab_);
    const std::size_t n = std::min(target.size(), response.tokens.size());
    std::size_t match = 0;
    while (match < n && response.tokens[match] == target[match]) ++match;
    return static_cast<double>(match) / static_cast<double>(target.size());
}

LengthBiasedProxyReward::LengthBiasedProxyReward(const Vocabulary& vocab, double gamma, int length_cap)
    : gold_(vocab), gamma_(gamma), length_cap_(length_cap) {
    if (gamma < 0.0) throw std::invalid_argument("proxy reward: gamma must be >= 0");
    if (length_cap < 1) throw std::invalid_argument("proxy reward: length cap must be >= 1");
}

double LengthBiasedProxyReward::score(const std::vector<int>& prompt, const Response& response) const {
    const double q = gold_.score(prompt, response);
    const int len = std::min(response.length(), length_cap_);
    return q + gamma_ * static_cast<double>(len) / static_cast<double>(length_cap_);
}

RewardDescriptor LengthBiasedProxyReward::descriptor() const {
    return {"length_biased_proxy", {{"gamma", gamma_}, {"length_cap", static_cast<double>(length_cap_)}}};
}

std::unique_ptr<RewardModel> make_reward(const RewardDescriptor& desc, const Vocabulary& vocab) {
    if (desc.name == "gold") return std::make_unique<GoldTaskReward>(vocab);
    if (desc.name == "length_biased_proxy") {
        const auto g = desc.params.find("gamma");
        const auto c = desc.params.find("length_cap");
        if (g == desc.params.end() || c == desc.params.end()) {
            throw std::invalid_argument("reward descriptor '" + desc.name + "' missing gamma/length_cap");
        }
        return std::make_unique<LengthBiasedProxyReward>(vocab, g->second, static_cast<int>(c->second));
    }
    throw std::invalid_argument("unknown reward descriptor name: '" + desc.name + "'");
}

}  // namespace dpolab
