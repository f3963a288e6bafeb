#include "klambda/model_io.hpp"

#include <bit>
#include <fstream>
#include <istream>
#include <ostream>

#include <nlohmann/json.hpp>

#include "klambda/error.hpp"

namespace klambda {

namespace {

constexpr const char* kMagic = "KLAMBDA-MLP";
constexpr int kLayoutVersion = 1;

static_assert(std::endian::native == std::endian::little, "model files store little-endian doubles");

template <typename Model, typename Fn>
void for_each_block(Model& model, Fn&& fn) {
  for (auto& layer : model.layers()) {
    if (auto* d = std::get_if<Dense>(&layer)) {
      fn(d->weight.value.data(), d->weight.value.size());
      fn(d->bias.value.data(), d->bias.value.size());
    } else if (auto* b = std::get_if<BatchNorm>(&layer)) {
      fn(b->gamma.value.data(), b->gamma.value.size());
      fn(b->beta.value.data(), b->beta.value.size());
      fn(b->running_mean.data(), b->running_mean.size());
      fn(b->running_var.data(), b->running_var.size());
    }
  }
  fn(model.norm.mean.data(), static_cast<Eigen::Index>(model.norm.mean.size()));
  fn(model.norm.stddev.data(), static_cast<Eigen::Index>(model.norm.stddev.size()));
}

}  // namespace

void save_model(std::ostream& out, const MLPModel& model) {
  const auto& arch = model.architecture();
  nlohmann::ordered_json header;
  header["format"] = kMagic;
  header["version"] = kLayoutVersion;
  nlohmann::ordered_json a;
  a["input"] = arch.input;
  a["dropout_rate"] = arch.dropout_rate;
  a["bn_momentum"] = arch.bn_momentum;
  a["bn_eps"] = arch.bn_eps;
  a["blocks"] = nlohmann::ordered_json::array();
  for (const auto& b : arch.blocks) {
    a["blocks"].push_back({{"units", b.units}, {"batch_norm", b.batch_norm}, {"dropout", b.dropout}});
  }
  header["architecture"] = a;
  header["layers"] = nlohmann::ordered_json::array();
  for (const auto& layer : model.layers()) header["layers"].push_back(layer_kind(layer));
  header["expects_semantic"] = model.expects_semantic;
  header["norm_size"] = model.norm.size();
  header["metadata"] = model.metadata;

  std::size_t count = 0;
  for_each_block(model, [&](const double*, Eigen::Index n) { count += static_cast<std::size_t>(n); });
  header["payload_doubles"] = count;

  out << kMagic << '\n' << header.dump() << '\n';
  for_each_block(model, [&](const double* data, Eigen::Index n) {
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
  });
  if (!out) throw Error(Errc::IoError, "failed to write model");
}

MLPModel load_model(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kMagic) throw Error(Errc::FormatError, "not a model file");
  if (!std::getline(in, line)) throw Error(Errc::FormatError, "model header missing");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::FormatError, std::string("model header: ") + e.what());
  }
  if (header.value("version", 0) != kLayoutVersion) {
    throw Error(Errc::FormatError, "unsupported model layout version");
  }

  try {
    const auto& a = header.at("architecture");
    Architecture arch;
    arch.input = a.at("input").get<int>();
    arch.dropout_rate = a.at("dropout_rate").get<double>();
    arch.bn_momentum = a.at("bn_momentum").get<double>();
    arch.bn_eps = a.at("bn_eps").get<double>();
    for (const auto& b : a.at("blocks")) {
      arch.blocks.push_back({b.at("units").get<int>(), b.at("batch_norm").get<bool>(),
                             b.at("dropout").get<bool>()});
    }

    MLPModel model(arch, 0);
    const auto& kinds = header.at("layers");
    if (kinds.size() != model.layers().size()) throw Error(Errc::FormatError, "layer count mismatch");
    for (std::size_t i = 0; i < kinds.size(); ++i) {
      if (kinds[i].get<std::string>() != layer_kind(model.layers()[i])) {
        throw Error(Errc::FormatError, "layer kind mismatch at " + std::to_string(i));
      }
    }
    model.expects_semantic = header.at("expects_semantic").get<bool>();
    const auto norm_size = header.at("norm_size").get<std::size_t>();
    model.norm.mean.assign(norm_size, 0.0);
    model.norm.stddev.assign(norm_size, 0.0);
    model.metadata = header.at("metadata").get<std::map<std::string, std::string>>();

    std::size_t count = 0;
    for_each_block(model, [&](double*, Eigen::Index n) { count += static_cast<std::size_t>(n); });
    if (count != header.at("payload_doubles").get<std::size_t>()) {
      throw Error(Errc::FormatError, "payload size does not match the architecture");
    }
    for_each_block(model, [&](double* data, Eigen::Index n) {
      in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
      if (!in) throw Error(Errc::FormatError, "model payload truncated");
    });
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::FormatError, std::string("model header: ") + e.what());
  }
}

void save_model_file(const std::string& path, const MLPModel& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::IoError, "cannot write " + path);
  save_model(out, model);
}

MLPModel load_model_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoError, "cannot open " + path);
  return load_model(in);
}

}  // namespace klambda
