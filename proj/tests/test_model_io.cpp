#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "spen/model_io.hpp"
#include "test_util.hpp"

using namespace spen;

namespace {

std::vector<double> all_values(const SpenParams& p) {
  std::vector<double> out;
  for (const auto& t : tensors(p)) out.insert(out.end(), t.values.begin(), t.values.end());
  return out;
}

Model round_trip(const Model& m) {
  std::stringstream buf;
  write_model(buf, m);
  return read_model(buf);
}

}  // namespace

TEST(ModelIo, SpenRoundTripForEveryArchitecture) {
  Rng rng(1);
  for (auto kind : {GlobalKind::None, GlobalKind::LabelOnly, GlobalKind::Conditioned, GlobalKind::CrfQuadratic}) {
    for (int depth : {1, 2}) {
      for (bool layers : {false, true}) {
        const SpenParams p =
            testutil::random_spen(rng, kind, 4, 5, layers, depth == 2 ? Nonlinearity::HardTanh : Nonlinearity::ReLU, depth);
        const Model back = round_trip(p);
        const auto& q = std::get<SpenParams>(back);
        EXPECT_EQ(q.global_kind(), kind);
        EXPECT_EQ(all_values(q), all_values(p));
        const Vector x = testutil::random_vector(rng, 4);
        const Vector y = testutil::random_interior(rng, 5);
        EXPECT_EQ(total_energy(q, feature_forward(q.features, x), y), total_energy(p, feature_forward(p.features, x), y));
        for (std::size_t k = 0; k < p.features.layers.size(); ++k) {
          EXPECT_EQ(q.features.layers[k].activation, p.features.layers[k].activation);
        }
      }
    }
  }
}

TEST(ModelIo, DmfRoundTrip) {
  Rng rng(2);
  DmfParams p = make_dmf(testutil::random_spen(rng, GlobalKind::None, 3, 4), 7, false);
  p.pairwise(0, 2) = p.pairwise(2, 0) = 0.75;
  p.unary_adjust = testutil::random_vector(rng, 4);
  const auto q = std::get<DmfParams>(round_trip(p));
  EXPECT_EQ(q.iters, 7u);
  EXPECT_FALSE(q.clamp_unaries);
  EXPECT_EQ(q.pairwise.values().size(), p.pairwise.values().size());
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(q.pairwise.values()[i], p.pairwise.values()[i]);
  EXPECT_EQ(q.unary_adjust, p.unary_adjust);
  EXPECT_EQ(all_values(q.unary_source), all_values(p.unary_source));
}

TEST(ModelIo, FileRoundTripAndErrors) {
  Rng rng(3);
  const SpenParams p = testutil::random_spen(rng, GlobalKind::LabelOnly, 3, 4);
  const auto path = std::filesystem::temp_directory_path() / "spen_test_model.spen";
  save_model(path, p);
  EXPECT_EQ(all_values(std::get<SpenParams>(load_model(path))), all_values(p));
  std::filesystem::remove(path);
  EXPECT_THROW(load_model(path), DataError);

  std::stringstream bad("NOTAMODEL and some more bytes");
  EXPECT_THROW(read_model(bad), DataError);

  std::stringstream full;
  write_model(full, p);
  const std::string bytes = full.str();
  std::stringstream truncated(bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(read_model(truncated), DataError);

  std::string wrong_version = bytes;
  wrong_version[8] = 99;
  std::stringstream versioned(wrong_version);
  EXPECT_THROW(read_model(versioned), DataError);
}
