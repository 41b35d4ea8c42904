#include "dpolab/vocab.hpp"

namespace dpolab {

Vocabulary Vocabulary::digits() {
    Vocabulary v;
    for (int d = 0; d < 10; ++d) v.tokens.push_back(std::string(1, static_cast<char>('0' + d)));
    v.bos = static_cast<int>(v.tokens.size());
    v.tokens.push_back("<bos>");
    v.sep = static_cast<int>(v.tokens.size());
    v.tokens.push_back("<sep>");
    v.eos = static_cast<int>(v.tokens.size());
    v.tokens.push_back("<eos>");
    return v;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out += " ";
        out += valid_id(ids[i]) ? token_name(ids[i]) : "<bad:" + std::to_string(ids[i]) + ">";
    }
    return out;
}

}  // namespace dpolab
