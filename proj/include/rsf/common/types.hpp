#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace rsf {

using TokenId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;

// Reserved vocabulary ids shared by the tokenizer and the model.
inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kUnkId = 1;
inline constexpr std::string_view kPadToken = "<pad>";
inline constexpr std::string_view kUnkToken = "<unk>";

// Binary label; AD is the positive class everywhere.
enum class Label : int { kNC = 0, kAD = 1 };

inline constexpr int class_index(Label label) { return static_cast<int>(label); }

}  // namespace rsf
