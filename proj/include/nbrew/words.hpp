#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace nbrew {

using Words = std::vector<std::string>;

// Whitespace split; consecutive separators never produce empty words.
Words split_words(std::string_view text);
std::string join_words(const Words& words);

}  // namespace nbrew
