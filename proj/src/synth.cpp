#include "scc/synth.hpp"

#include "binary_io.hpp"
#include "scc/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace scc {

void validate(const GenParams& p) {
  auto fail = [](const std::string& msg) { throw ParameterError("GenParams: " + msg); };
  if (p.obs_dim < 2) fail("obs_dim must be at least 2");
  if (p.alphabet < 2) fail("alphabet must be at least 2");
  if (p.min_segments < 1 || p.max_segments < p.min_segments) fail("segment count range is empty");
  if (p.min_segment_len < 1 || p.max_segment_len < p.min_segment_len) fail("segment length range is empty");
  if (!(p.smooth_noise > 0.0)) fail("smooth_noise must be positive");
  if (!(p.burst_noise > 0.0)) fail("burst_noise must be positive");
  if (!(p.smooth_damping > 0.0 && p.smooth_damping <= 1.0)) fail("smooth_damping must be in (0, 1]");
  if (!(p.burst_prob >= 0.0 && p.burst_prob <= 1.0)) fail("burst_prob must be in [0, 1]");
  if (!(p.burst_separation >= 0.0)) fail("burst_separation must be non-negative");
  if (!(p.burst_flip >= 0.0 && p.burst_flip <= 1.0)) fail("burst_flip must be in [0, 1]");
}

void to_json(nlohmann::json& j, const GenParams& p) {
  j = nlohmann::json{{"obs_dim", p.obs_dim},
                     {"alphabet", p.alphabet},
                     {"min_segments", p.min_segments},
                     {"max_segments", p.max_segments},
                     {"min_segment_len", p.min_segment_len},
                     {"max_segment_len", p.max_segment_len},
                     {"smooth_amplitude", p.smooth_amplitude},
                     {"smooth_damping", p.smooth_damping},
                     {"base_frequency", p.base_frequency},
                     {"frequency_step", p.frequency_step},
                     {"smooth_noise", p.smooth_noise},
                     {"burst_noise", p.burst_noise},
                     {"burst_separation", p.burst_separation},
                     {"burst_prob", p.burst_prob},
                     {"burst_flip", p.burst_flip},
                     {"unlabeled_count", p.unlabeled_count},
                     {"train_count", p.train_count},
                     {"validation_count", p.validation_count},
                     {"test_count", p.test_count},
                     {"seed", p.seed}};
}

void from_json(const nlohmann::json& j, GenParams& p) {
  nlohmann::json defaults;
  to_json(defaults, GenParams{});
  for (const auto& [key, _] : j.items()) {
    if (!defaults.contains(key)) throw ParameterError("GenParams: unknown field '" + key + "'");
  }
  GenParams d;
  p.obs_dim = j.value("obs_dim", d.obs_dim);
  p.alphabet = j.value("alphabet", d.alphabet);
  p.min_segments = j.value("min_segments", d.min_segments);
  p.max_segments = j.value("max_segments", d.max_segments);
  p.min_segment_len = j.value("min_segment_len", d.min_segment_len);
  p.max_segment_len = j.value("max_segment_len", d.max_segment_len);
  p.smooth_amplitude = j.value("smooth_amplitude", d.smooth_amplitude);
  p.smooth_damping = j.value("smooth_damping", d.smooth_damping);
  p.base_frequency = j.value("base_frequency", d.base_frequency);
  p.frequency_step = j.value("frequency_step", d.frequency_step);
  p.smooth_noise = j.value("smooth_noise", d.smooth_noise);
  p.burst_noise = j.value("burst_noise", d.burst_noise);
  p.burst_separation = j.value("burst_separation", d.burst_separation);
  p.burst_prob = j.value("burst_prob", d.burst_prob);
  p.burst_flip = j.value("burst_flip", d.burst_flip);
  p.unlabeled_count = j.value("unlabeled_count", d.unlabeled_count);
  p.train_count = j.value("train_count", d.train_count);
  p.validation_count = j.value("validation_count", d.validation_count);
  p.test_count = j.value("test_count", d.test_count);
  p.seed = j.value("seed", d.seed);
}

namespace {

/// Label-dependent burst means: random sign patterns scaled by the separation.
Matrix burst_patterns(const GenParams& p) {
  Rng rng = make_rng(p.seed, {tag("burst_patterns")});
  Matrix m(p.alphabet, p.obs_dim);
  for (Index l = 0; l < m.rows(); ++l) {
    for (Index d = 0; d < m.cols(); ++d) m(l, d) = (rng() & 1U) ? p.burst_separation : -p.burst_separation;
  }
  return m;
}

SequenceExample generate_sequence(const GenParams& p, const Matrix& patterns, Rng& rng) {
  std::uniform_int_distribution<int> seg_count(p.min_segments, p.max_segments);
  std::uniform_int_distribution<int> seg_len(p.min_segment_len, p.max_segment_len);
  std::uniform_int_distribution<int> label_dist(0, p.alphabet - 1);
  std::normal_distribution<double> normal(0.0, 1.0);

  const int segments = seg_count(rng);
  std::vector<int> lengths(static_cast<std::size_t>(segments));
  SequenceExample ex;
  std::vector<char> burst(static_cast<std::size_t>(segments), 0);
  Index total = 0;
  for (int s = 0; s < segments; ++s) {
    ex.labels.push_back(label_dist(rng));
    lengths[static_cast<std::size_t>(s)] = seg_len(rng);
    total += lengths[static_cast<std::size_t>(s)];
  }
  // Every sequence mixes both regimes in roughly the same proportion.
  int bursts = static_cast<int>(std::lround(p.burst_prob * segments));
  if (segments >= 2 && p.burst_prob > 0.0 && p.burst_prob < 1.0) bursts = std::clamp(bursts, 1, segments - 1);
  std::fill_n(burst.begin(), bursts, 1);
  std::shuffle(burst.begin(), burst.end(), rng);

  ex.observations.resize(total, p.obs_dim);
  ex.regime.reserve(static_cast<std::size_t>(total));
  Index row = 0;
  const double two_pi = 2.0 * std::numbers::pi;
  for (int s = 0; s < segments; ++s) {
    const int label = ex.labels[static_cast<std::size_t>(s)];
    const int len = lengths[static_cast<std::size_t>(s)];
    if (burst[static_cast<std::size_t>(s)]) {
      for (int tau = 0; tau < len; ++tau, ++row) {
        const double sign = uniform01(rng) < p.burst_flip ? -1.0 : 1.0;
        for (Index d = 0; d < p.obs_dim; ++d) {
          ex.observations(row, d) = sign * patterns(label, d) + p.burst_noise * normal(rng);
        }
        ex.regime.push_back(Regime::burst);
      }
    } else {
      const double omega = p.base_frequency + p.frequency_step * label;
      const double phase = two_pi * uniform01(rng);
      double envelope = p.smooth_amplitude;
      for (int tau = 0; tau < len; ++tau, ++row) {
        for (Index d = 0; d < p.obs_dim; ++d) {
          const double offset = two_pi * static_cast<double>(d) / static_cast<double>(p.obs_dim);
          ex.observations(row, d) =
              envelope * std::sin(omega * tau + phase + offset) + p.smooth_noise * normal(rng);
        }
        envelope *= p.smooth_damping;
        ex.regime.push_back(Regime::smooth);
      }
    }
  }
  return ex;
}

std::vector<SequenceExample> generate_split(const GenParams& p, const Matrix& patterns, const char* name,
                                            std::size_t count) {
  Rng rng = make_rng(p.seed, {tag("split"), tag(name)});
  std::vector<SequenceExample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_sequence(p, patterns, rng));
  return out;
}

}  // namespace

Dataset generate_dataset(const GenParams& params) {
  validate(params);
  const Matrix patterns = burst_patterns(params);
  Dataset ds;
  ds.params = params;
  ds.unlabeled = generate_split(params, patterns, "unlabeled", params.unlabeled_count);
  ds.train = generate_split(params, patterns, "train", params.train_count);
  ds.validation = generate_split(params, patterns, "validation", params.validation_count);
  ds.test = generate_split(params, patterns, "test", params.test_count);
  return ds;
}

// ---------------------------------------------------------------------------
// Serialization

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t size) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

constexpr char kMagic[8] = {'S', 'C', 'C', 'D', 'A', 'T', 'A', '1'};

const std::vector<SequenceExample>* splits_of(const Dataset& ds, int i) {
  switch (i) {
    case 0: return &ds.unlabeled;
    case 1: return &ds.train;
    case 2: return &ds.validation;
    default: return &ds.test;
  }
}

std::vector<SequenceExample>* splits_of(Dataset& ds, int i) {
  return const_cast<std::vector<SequenceExample>*>(splits_of(static_cast<const Dataset&>(ds), i));
}

}  // namespace

std::vector<std::uint8_t> serialize_dataset(const Dataset& ds) {
  io::ByteWriter records;
  for (int s = 0; s < 4; ++s) {
    for (const SequenceExample& ex : *splits_of(ds, s)) {
      records.put<std::uint32_t>(static_cast<std::uint32_t>(ex.observations.rows()));
      records.put<std::uint32_t>(static_cast<std::uint32_t>(ex.observations.cols()));
      for (Index t = 0; t < ex.observations.rows(); ++t) {
        for (Index d = 0; d < ex.observations.cols(); ++d) records.put<double>(ex.observations(t, d));
      }
      records.put<std::uint32_t>(static_cast<std::uint32_t>(ex.labels.size()));
      for (Label l : ex.labels) records.put<std::uint32_t>(static_cast<std::uint32_t>(l));
      for (Regime r : ex.regime) records.put<std::uint8_t>(static_cast<std::uint8_t>(r));
    }
  }
  nlohmann::json manifest;
  manifest["params"] = ds.params;
  manifest["splits"] = {ds.unlabeled.size(), ds.train.size(), ds.validation.size(), ds.test.size()};
  const std::string mtext = manifest.dump();

  io::ByteWriter out;
  out.put_bytes(kMagic, sizeof kMagic);
  out.put<std::uint32_t>(kDatasetFormatVersion);
  out.put<std::uint64_t>(fnv1a64(records.bytes().data(), records.size()));
  out.put<std::uint32_t>(static_cast<std::uint32_t>(mtext.size()));
  out.put_string(mtext);
  out.put_bytes(records.bytes().data(), records.size());
  return std::move(out.bytes());
}

Dataset deserialize_dataset(const std::vector<std::uint8_t>& bytes) {
  io::ByteReader in(bytes.data(), bytes.size(), "dataset");
  if (in.get_string(sizeof kMagic, "magic") != std::string(kMagic, sizeof kMagic)) in.fail("bad magic");
  const auto version = in.get<std::uint32_t>("version");
  if (version != kDatasetFormatVersion) in.fail("unsupported format version " + std::to_string(version));
  const auto checksum = in.get<std::uint64_t>("checksum");
  const auto mlen = in.get<std::uint32_t>("manifest length");
  const std::string mtext = in.get_string(mlen, "manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mtext);
  } catch (const nlohmann::json::exception& e) {
    in.fail(std::string("manifest is not valid JSON: ") + e.what());
  }

  // Parse before verifying the checksum so truncation reports its offset.
  const std::size_t records_begin = in.offset();
  Dataset ds;
  try {
    ds.params = manifest.at("params").get<GenParams>();
  } catch (const std::exception& e) {
    in.fail(std::string("bad manifest params: ") + e.what());
  }
  std::vector<std::size_t> counts;
  try {
    counts = manifest.at("splits").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    in.fail(std::string("bad manifest split counts: ") + e.what());
  }
  if (counts.size() != 4) in.fail("manifest must list 4 split counts");
  for (int s = 0; s < 4; ++s) {
    auto& split = *splits_of(ds, s);
    split.reserve(counts[static_cast<std::size_t>(s)]);
    for (std::size_t i = 0; i < counts[static_cast<std::size_t>(s)]; ++i) {
      SequenceExample ex;
      const auto steps = in.get<std::uint32_t>("sequence length");
      const auto dim = in.get<std::uint32_t>("observation width");
      if (steps == 0 || dim == 0) in.fail("empty sequence record");
      if (static_cast<std::size_t>(steps) * dim * sizeof(double) > in.remaining()) {
        in.fail("truncated observation block");
      }
      ex.observations.resize(steps, dim);
      for (Index t = 0; t < steps; ++t) {
        for (Index d = 0; d < dim; ++d) ex.observations(t, d) = in.get<double>("observation");
      }
      const auto nlab = in.get<std::uint32_t>("label count");
      ex.labels.resize(nlab);
      for (auto& l : ex.labels) l = static_cast<Label>(in.get<std::uint32_t>("label"));
      ex.regime.resize(steps);
      for (auto& r : ex.regime) {
        const auto v = in.get<std::uint8_t>("regime");
        if (v > 1) in.fail("bad regime byte");
        r = static_cast<Regime>(v);
      }
      split.push_back(std::move(ex));
    }
  }
  if (in.remaining() != 0) in.fail("trailing bytes after last record");
  if (fnv1a64(bytes.data() + records_begin, bytes.size() - records_begin) != checksum) {
    throw ParseError("dataset: checksum mismatch in record section starting at byte offset " +
                     std::to_string(records_begin));
  }
  return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  io::write_file(path, serialize_dataset(ds));
}

Dataset load_dataset(const std::filesystem::path& path) { return deserialize_dataset(io::read_file(path)); }

}  // namespace scc
