#include "doctest.h"
#include "support.hpp"

#include <filesystem>

using namespace scc;

namespace {

GenParams small_params() {
  GenParams g;
  g.unlabeled_count = 30;
  g.train_count = 20;
  g.validation_count = 5;
  g.test_count = 5;
  return g;
}

}  // namespace

TEST_CASE("generation is a pure function of the parameters") {
  const GenParams g = small_params();
  CHECK(generate_dataset(g) == generate_dataset(g));
  GenParams other = g;
  other.seed = 2;
  CHECK_FALSE(generate_dataset(other).train == generate_dataset(g).train);
}

TEST_CASE("changing one split's size leaves the others untouched") {
  GenParams g = small_params();
  const Dataset a = generate_dataset(g);
  g.test_count = 9;
  const Dataset b = generate_dataset(g);
  CHECK(a.train == b.train);
  CHECK(a.unlabeled == b.unlabeled);
  CHECK(std::equal(a.test.begin(), a.test.end(), b.test.begin()));
}

TEST_CASE("sequences respect the structural parameters") {
  const GenParams g = small_params();
  const Dataset ds = generate_dataset(g);
  CHECK(ds.unlabeled.size() == 30);
  CHECK(ds.train.size() == 20);
  for (const SequenceExample& e : ds.train) {
    const auto n = static_cast<int>(e.labels.size());
    CHECK(n >= g.min_segments);
    CHECK(n <= g.max_segments);
    CHECK(e.length() >= n * g.min_segment_len);
    CHECK(e.length() <= n * g.max_segment_len);
    CHECK(e.observations.cols() == g.obs_dim);
    CHECK(e.regime.size() == static_cast<std::size_t>(e.length()));
    for (Label l : e.labels) CHECK((l >= 0 && l < g.alphabet));
    // Both regimes appear in every multi-segment sequence.
    const auto bursts = std::count(e.regime.begin(), e.regime.end(), Regime::burst);
    CHECK(bursts > 0);
    CHECK(bursts < e.length());
  }
}

TEST_CASE("burst frames are noisier than smooth frames") {
  const Dataset ds = generate_dataset(small_params());
  double burst = 0.0, smooth = 0.0;
  std::size_t nb = 0, ns = 0;
  for (const SequenceExample& e : ds.unlabeled) {
    for (Index t = 1; t < e.length(); ++t) {
      const double step = (e.observations.row(t) - e.observations.row(t - 1)).squaredNorm();
      if (e.regime[static_cast<std::size_t>(t)] == Regime::burst && e.regime[static_cast<std::size_t>(t - 1)] == Regime::burst) {
        burst += step;
        ++nb;
      } else if (e.regime[static_cast<std::size_t>(t)] == Regime::smooth &&
                 e.regime[static_cast<std::size_t>(t - 1)] == Regime::smooth) {
        smooth += step;
        ++ns;
      }
    }
  }
  CHECK(burst / static_cast<double>(nb) > 3.0 * smooth / static_cast<double>(ns));
}

TEST_CASE("invalid parameters are rejected by name") {
  GenParams g = small_params();
  g.max_segments = 1;
  g.min_segments = 2;
  CHECK_THROWS_AS(validate(g), ParameterError);
  g = small_params();
  g.burst_flip = 1.5;
  CHECK_THROWS_WITH_AS(validate(g), doctest::Contains("burst_flip"), ParameterError);
  nlohmann::json j = small_params();
  j["typo"] = 1;
  CHECK_THROWS_AS(j.get<GenParams>(), ParameterError);
  const nlohmann::json ok = small_params();
  CHECK(ok.get<GenParams>() == small_params());
}

TEST_CASE("dataset bytes round-trip exactly") {
  const Dataset ds = generate_dataset(small_params());
  const auto bytes = serialize_dataset(ds);
  const Dataset back = deserialize_dataset(bytes);
  CHECK(back == ds);
  CHECK(serialize_dataset(back) == bytes);

  const auto path = std::filesystem::temp_directory_path() / "scc_test_dataset.bin";
  save_dataset(ds, path);
  CHECK(load_dataset(path) == ds);
  std::filesystem::remove(path);
}

TEST_CASE("corrupt and truncated datasets report where") {
  const auto bytes = serialize_dataset(generate_dataset(small_params()));
  auto flipped = bytes;
  flipped[flipped.size() - 100] ^= 0x40;
  CHECK_THROWS_WITH_AS(deserialize_dataset(flipped), doctest::Contains("checksum"), ParseError);

  const std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + static_cast<long>(bytes.size() / 2));
  CHECK_THROWS_WITH_AS(deserialize_dataset(cut), doctest::Contains("byte offset"), ParseError);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(deserialize_dataset(bad_magic), ParseError);

  auto extra = bytes;
  extra.push_back(0);
  CHECK_THROWS_WITH_AS(deserialize_dataset(extra), doctest::Contains("trailing"), ParseError);
}

TEST_CASE("fnv1a64 matches the published test vectors") {
  const std::string empty, a = "a", foobar = "foobar";
  CHECK(fnv1a64(reinterpret_cast<const std::uint8_t*>(empty.data()), 0) == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64(reinterpret_cast<const std::uint8_t*>(a.data()), 1) == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a64(reinterpret_cast<const std::uint8_t*>(foobar.data()), 6) == 0x85944171f73967e8ULL);
}
