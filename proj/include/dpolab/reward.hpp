#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "dpolab/model.hpp"
#include "dpolab/vocab.hpp"

namespace dpolab {

// Serialized with every dataset and report so scores can be reproduced.
struct RewardDescriptor {
    std::string name;
    std::map<std::string, double> params;  // ordered map keeps serialization stable

    std::string to_string() const;
    bool operator==(const RewardDescriptor&) const = default;
};

// Deterministic scalar scorer r(x, y). Implementations must be total over
// all valid (prompt, response) and safe for concurrent use.
class RewardModel {
public:
    virtual ~RewardModel() = default;
    virtual double score(const std::vector<int>& prompt, const Response& response) const = 0;
    virtual RewardDescriptor descriptor() const = 0;
};

// Task quality in [0, 1]: longest common prefix of the response against the
// reversed-digit target (terminal EOS included), divided by target length.
// Exactly 1 iff the response is the target.
class GoldTaskReward : public RewardModel {
public:
    explicit GoldTaskReward(const Vocabulary& vocab) : vocab_(vocab) {}
    double score(const std::vector<int>& prompt, const Response& response) const override;
    RewardDescriptor descriptor() const override { return {"gold", {}}; }

private:
    Vocabulary vocab_;
};

// Gold quality plus a saturating length bonus: q + gamma * min(|y|, cap)/cap.
// The labeling proxy for preference collection; monotone nondecreasing in
// response length at fixed quality.
class LengthBiasedProxyReward : public RewardModel {
public:
    LengthBiasedProxyReward(const Vocabulary& vocab, double gamma, int length_cap);
    double score(const std::vector<int>& prompt, const Response& response) const override;
    RewardDescriptor descriptor() const override;

    double gamma() const { return gamma_; }
    int length_cap() const { return length_cap_; }

private:
    GoldTaskReward gold_;
    double gamma_;
    int length_cap_;
};

// Rebuilds a reward model from its descriptor; throws on unknown names or
// missing parameters.
std::unique_ptr<RewardModel> make_reward(const RewardDescriptor& desc, const Vocabulary& vocab);

}  // namespace dpolab
