#pragma once

#include <string>

namespace klambda {

/// Fixed 9-significant-digit rendering used for every numeric output.
std::string format_number(double value);

/// Rounds to 9 significant digits so JSON serializers emit the same text.
double round_sig9(double value);

}  // namespace klambda
