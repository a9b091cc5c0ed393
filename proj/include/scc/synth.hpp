#pragma once

// Synthetic regime-switching sequences. Each sequence is a run of labelled
// segments. Smooth segments follow a damped sinusoid whose frequency encodes
// the label and are easy to predict; burst segments are loud noise around a
// weakly separated label-dependent mean and are both hard to predict and hard
// to label. The regime mask is kept for diagnostics only.

#include "scc/ctc.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace scc {

enum class Regime : std::uint8_t { smooth = 0, burst = 1 };

struct GenParams {
  Index obs_dim = 8;
  int alphabet = 6;
  int min_segments = 3;
  int max_segments = 6;
  int min_segment_len = 8;
  int max_segment_len = 20;
  double smooth_amplitude = 1.0;
  double smooth_damping = 0.97;
  double base_frequency = 0.3;
  double frequency_step = 0.25;
  double smooth_noise = 0.05;
  double burst_noise = 1.0;
  double burst_separation = 0.6;
  /// Fraction of each sequence's segments in the burst regime, rounded; a
  /// sequence of two or more segments always has at least one of each.
  double burst_prob = 0.35;
  /// Probability that a burst frame carries the negated pattern.
  double burst_flip = 0.0;
  std::size_t unlabeled_count = 2000;
  std::size_t train_count = 800;
  std::size_t validation_count = 150;
  std::size_t test_count = 300;
  std::uint64_t seed = 1;

  bool operator==(const GenParams&) const = default;
};

/// Throws ParameterError naming the first invalid field.
void validate(const GenParams& params);
void to_json(nlohmann::json& j, const GenParams& p);
void from_json(const nlohmann::json& j, GenParams& p);

struct SequenceExample {
  Matrix observations;  // [T x D]
  LabelSeq labels;      // one label per segment
  std::vector<Regime> regime;

  Index length() const { return observations.rows(); }
  bool operator==(const SequenceExample&) const = default;
};

struct Dataset {
  GenParams params;
  std::vector<SequenceExample> unlabeled;
  std::vector<SequenceExample> train;
  std::vector<SequenceExample> validation;
  std::vector<SequenceExample> test;

  bool operator==(const Dataset&) const = default;
};

/// Pure function of `params` (each split draws from its own derived seed).
Dataset generate_dataset(const GenParams& params);

/// Binary layout (all integers little-endian):
///   8 bytes  magic "SCCDATA1"
///   u32      format version (1)
///   u64      FNV-1a 64 checksum of everything after the manifest
///   u32      manifest length N, then N bytes of JSON
///            {"params": GenParams, "splits": [4 counts]}
///   then for each split (unlabeled, train, validation, test), each record:
///   u32 T, u32 D, T*D f64 row-major, u32 label count, labels as u32,
///   T bytes regime (0 smooth, 1 burst).
void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

std::vector<std::uint8_t> serialize_dataset(const Dataset& ds);
Dataset deserialize_dataset(const std::vector<std::uint8_t>& bytes);

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t size);

constexpr std::uint32_t kDatasetFormatVersion = 1;

}  // namespace scc
