#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "musefuse/synth.hpp"
#include "musefuse/traineval.hpp"

namespace musefuse::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitDiverged = 3;

/// Exit status for an error code: usage 1, data 2, numeric divergence 3.
int exit_code_for(ErrorCode code);

/// Flat `key = value` settings. Every key has a default; unknown keys are
/// rejected with UsageError.
class RunConfig {
 public:
  RunConfig();

  /// Parses config-file text (`#` starts a comment).
  void merge_text(std::string_view text, const std::string& origin);
  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;

  std::int64_t get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<int> get_ints(const std::string& key) const;

  /// Makes every path-valued entry absolute.
  void resolve_paths();
  /// Sorted `key = value` lines.
  std::string echo() const;
  const std::map<std::string, std::string>& values() const { return values_; }

  std::uint64_t seed() const { return static_cast<std::uint64_t>(get_int("seed")); }
  std::filesystem::path path(const std::string& key) const;

  TrainConfig train_config() const;
  ModelSpec model_spec() const;
  ProtocolSpec protocol_spec() const;
  SynthOptions synth_options() const;
  /// Base mixing with the configured noise levels and perturbation.
  MixingModel mixing_model() const;

 private:
  std::map<std::string, std::string> values_;
};

/// SHA-256 of a byte string as lowercase hex.
std::string sha256_hex(std::span<const std::uint8_t> bytes);

/// Writes manifest.txt into `out`: the subcommand, the config echo, and the
/// SHA-256 of every input and output file.
void write_manifest(const std::filesystem::path& out, std::string_view command, const RunConfig& cfg,
                    const std::vector<std::filesystem::path>& inputs, const std::vector<std::filesystem::path>& outputs);

/// Set directories under a corpus root in (session, set) order.
std::vector<std::filesystem::path> find_set_dirs(const std::filesystem::path& root);

/// Entry point. Diagnostics go to stderr as one line:
/// `musefuse: error=<Code> exit=<n> reason=<text>`.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);

}  // namespace musefuse::cli
