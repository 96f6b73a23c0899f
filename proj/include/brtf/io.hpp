#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "brtf/inference.hpp"
#include "brtf/model_state.hpp"
#include "brtf/synth.hpp"
#include "brtf/tensor.hpp"

namespace brtf {

enum class IoErrc {
  open_failed,
  write_failed,
  bad_magic,
  unsupported_version,
  truncated_header,
  truncated_payload,
  extent_overflow,
  bad_encoding,
  invalid_mask_value,
  shape_mismatch,
  trailing_data,
  invalid_content,
};

std::string to_string(IoErrc code);

class IoError : public std::runtime_error {
 public:
  IoError(IoErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  IoErrc code() const { return code_; }

 private:
  IoErrc code_;
};

inline constexpr std::uint16_t kFormatVersion = 1;

enum class TensorEncoding : std::uint8_t { dense = 0, nan_missing = 1 };

struct TensorFile {
  DenseTensor data;                     // zero at missing entries
  std::optional<ObservationMask> mask;  // set for NaN-encoded files
};

/// Plain float64 payload.
void write_tensor(const std::filesystem::path& path, const DenseTensor& tensor);
/// NaN at unobserved entries.
void write_tensor(const std::filesystem::path& path, const DenseTensor& tensor, const ObservationMask& mask);
TensorFile read_tensor(const std::filesystem::path& path);

void write_mask(const std::filesystem::path& path, const ObservationMask& mask);
ObservationMask read_mask(const std::filesystem::path& path);

/// Exact posterior parameters, observation mask and hyperpriors.
void save_checkpoint(const std::filesystem::path& path, const ModelState& state);
ModelState load_checkpoint(const std::filesystem::path& path);

/// Byte-level encoders, exposed for tests.
std::string encode_tensor(const DenseTensor& tensor, const ObservationMask* mask = nullptr);
TensorFile decode_tensor(const std::string& bytes);
std::string encode_mask(const ObservationMask& mask);
ObservationMask decode_mask(const std::string& bytes);
std::string encode_checkpoint(const ModelState& state);
ModelState decode_checkpoint(const std::string& bytes);

/// Writes to a sibling temporary file, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

/// Fit report as a JSON document (elbo_trace, inferred_rank, converged,
/// wall_time, ...).
std::string report_json(const FitReport& report, const HyperPriors& priors);

std::string results_csv_header();
std::string results_csv(const std::vector<ExperimentRow>& rows);

}  // namespace brtf
