#include "cxrl/textcond.hpp"

#include <cctype>
#include <map>

namespace cxrl::text {

const std::vector<std::string>& vocabulary() {
    static const std::vector<std::string> table = {
        "<pad>", "<unk>", "no",      "effusion", "opacity", "left",   "right",
        "small", "large", "cardiomegaly", "device", "lungs", "clear", "in",
        "lung",  "the",   "present", "heart",    ".",       "enlarged", "is",
        "seen",  "support", "a",     "round"};
    return table;
}

int lookup_token(const std::string& word) {
    static const std::map<std::string, int> index = [] {
        std::map<std::string, int> m;
        const auto& v = vocabulary();
        for (size_t i = 2; i < v.size(); ++i) m[v[i]] = static_cast<int>(i);
        return m;
    }();
    const auto it = index.find(word);
    return it == index.end() ? kUnk : it->second;
}

std::vector<int> tokenize(const std::string& text) {
    std::vector<int> ids;
    std::string word;
    auto flush = [&] {
        if (!word.empty() && ids.size() < static_cast<size_t>(kMaxTokens))
            ids.push_back(lookup_token(word));
        word.clear();
    };
    for (char raw : text) {
        const auto ch = static_cast<unsigned char>(raw);
        if (std::isalnum(ch)) {
            word += static_cast<char>(std::tolower(ch));
        } else if (std::isspace(ch)) {
            flush();
        } else {
            // punctuation is its own token
            flush();
            if (ids.size() < static_cast<size_t>(kMaxTokens))
                ids.push_back(lookup_token(std::string(1, static_cast<char>(ch))));
        }
    }
    flush();
    if (ids.empty()) ids.push_back(kPad);
    return ids;
}

}  // namespace cxrl::text
