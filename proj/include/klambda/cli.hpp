#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "klambda/encoder.hpp"

namespace klambda {

inline constexpr const char* kToolkitVersion = "0.4.0";

/// Runs one subcommand. `args` excludes the program name. Returns 0 on
/// success, 1 on validation or runtime errors (reported as one JSON object on
/// `err`) and 2 for an unknown subcommand.
int dispatch(std::vector<std::string> args, std::ostream& out, std::ostream& err);

const std::vector<std::string>& subcommand_names();

/// `synth:demo`, or `synth:` followed by comma-separated key=value pairs over
/// r0, gamma, p0, s, k_star, g, sigma, seed and frames. Returns nullopt for
/// text without the `synth:` prefix; throws InvalidArgument on bad pairs.
std::optional<ClipRef> parse_synth_spec(const std::string& text);

}  // namespace klambda
