#include <gtest/gtest.h>

#include <sstream>

#include "klambda/error.hpp"
#include "klambda/model_io.hpp"
#include "klambda/trainer.hpp"
#include "test_util.hpp"

namespace klambda {
namespace {

MLPModel trained_model() {
  Rng rng(17);
  std::vector<FeatureVector> xs(24);
  std::vector<double> ys;
  for (auto& fv : xs) {
    fv.clip_id = "c";
    for (int i = 0; i < 6; ++i) fv.values.push_back(rng.normal());
    ys.push_back(rng.uniform(0.3, 2.5));
  }
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.batch_size = 8;
  cfg.blocks = {{5, true, true}, {3, false, false}, {1, true, false}};
  return train(xs, ys, cfg).model;
}

void expect_identical(MLPModel& a, MLPModel& b) {
  EXPECT_EQ(a.architecture(), b.architecture());
  EXPECT_EQ(a.expects_semantic, b.expects_semantic);
  EXPECT_EQ(a.metadata, b.metadata);
  EXPECT_EQ(a.norm.mean, b.norm.mean);
  EXPECT_EQ(a.norm.stddev, b.norm.stddev);
  const auto pa = a.params(), pb = b.params();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i]->name, pb[i]->name);
    EXPECT_EQ(pa[i]->value, pb[i]->value);
  }
  for (std::size_t i = 0; i < a.layers().size(); ++i) {
    if (const auto* bn = std::get_if<BatchNorm>(&a.layers()[i])) {
      const auto& other = std::get<BatchNorm>(b.layers()[i]);
      EXPECT_EQ(bn->running_mean, other.running_mean);
      EXPECT_EQ(bn->running_var, other.running_var);
    }
  }
}

TEST(ModelIo, StreamRoundTripIsBitExact) {
  MLPModel model = trained_model();
  std::stringstream buf;
  save_model(buf, model);
  MLPModel loaded = load_model(buf);
  expect_identical(model, loaded);

  Rng rng(3);
  Matrix x(6, 5);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  EXPECT_EQ(model.infer(x), loaded.infer(x));

  std::stringstream again;
  save_model(again, loaded);
  EXPECT_EQ(again.str(), [&] {
    std::stringstream s;
    save_model(s, model);
    return s.str();
  }());
}

TEST(ModelIo, FullSizeLayoutRoundTrip) {
  MLPModel model(Architecture::full(static_cast<int>(kEncodingFeatureSize)), 5);
  testing::TempDir dir;
  save_model_file(dir.file("m.bin"), model);
  MLPModel loaded = load_model_file(dir.file("m.bin"));
  expect_identical(model, loaded);
}

TEST(ModelIo, RejectsForeignOrTruncatedInput) {
  std::stringstream junk("not a model\n{}\n");
  EXPECT_THROW(load_model(junk), Error);

  std::stringstream buf;
  save_model(buf, trained_model());
  const std::string text = buf.str();
  std::stringstream cut(text.substr(0, text.size() - 9));
  try {
    load_model(cut);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::FormatError);
  }
}

TEST(ModelIo, MissingFileIsIoError) {
  try {
    load_model_file("/nonexistent/model.bin");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::IoError);
  }
}

}  // namespace
}  // namespace klambda
