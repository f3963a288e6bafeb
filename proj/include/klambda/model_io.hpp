#pragma once

#include <iosfwd>
#include <string>

#include "klambda/mlp.hpp"

namespace klambda {

/// Model container: a magic line, a one-line JSON header (layout version,
/// architecture, layer kinds, normalizer width, metadata), then every
/// parameter, running statistic and normalizer value as raw little-endian
/// doubles in header order. Loading reproduces the model bit for bit.
void save_model(std::ostream& out, const MLPModel& model);
MLPModel load_model(std::istream& in);

void save_model_file(const std::string& path, const MLPModel& model);
MLPModel load_model_file(const std::string& path);

}  // namespace klambda
