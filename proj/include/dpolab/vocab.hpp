#pragma once

#include <string>
#include <vector>

namespace dpolab {

// Token inventory for the digit-reversal task: "0".."9" plus begin/separator/
// end markers. Ids are stable: digit d -> id d, then BOS, SEP, EOS.
struct Vocabulary {
    std::vector<std::string> tokens;
    int bos = -1;
    int sep = -1;
    int eos = -1;

    static Vocabulary digits();

    int size() const { return static_cast<int>(tokens.size()); }
    bool valid_id(int id) const { return id >= 0 && id < size(); }
    bool is_digit(int id) const { return id >= 0 && id <= 9; }
    const std::string& token_name(int id) const { return tokens.at(static_cast<std::size_t>(id)); }

    std::string decode(const std::vector<int>& ids) const;

    bool operator==(const Vocabulary& other) const {
        return tokens == other.tokens && bos == other.bos && sep == other.sep && eos == other.eos;
    }
};

}  // namespace dpolab
