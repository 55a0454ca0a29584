#pragma once

// Synthetic paired benchmark, TNSR/CVXG binary formats, dataset manifests,
// splits, and subject/time pairing of separate image and signal manifests.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cardiovae/model.hpp"
#include "cardiovae/tensor.hpp"

namespace cardiovae {

struct PairedSample {
  std::string id;
  std::optional<Tensor> image;   // (h, w, c), values in [0, 1]
  std::optional<Tensor> signal;  // (1, L)
  std::optional<int> label;      // 0 or 1

  void validate() const;
};

using Dataset = std::vector<PairedSample>;

/// Labels of every sample; throws if any is missing.
std::vector<int> dataset_labels(const Dataset& ds);

// ---------------------------------------------------------------------------
// Synthetic benchmark

struct SynthConfig {
  std::size_t n = 1000;
  std::size_t shared_dim = 1;   // components of s; the rendered score is sum(s)/sqrt(shared_dim)
  double image_noise = 0.05;    // pixel noise sd (clamped to [0, 1] afterwards)
  double signal_noise = 0.05;   // sample noise sd
  double view_noise = 0.5;      // sd of the per-modality perturbation of the shared score
  double threshold = 0.0;       // label = score > threshold
  std::optional<double> positive_fraction;  // overrides threshold with the normal quantile
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> noise_seed;  // nuisance + noise stream; defaults to a function of seed
  std::size_t image_h = 64, image_w = 64, image_c = 1;
  std::size_t signal_len = 4096;

  void validate() const;
  double effective_threshold() const;
  std::uint64_t effective_noise_seed() const;
};

/// Per-sample latent draws behind one rendered pair.
struct SynthFactors {
  double score = 0;           // shared factor (label source)
  double u_img = 0, u_sig = 0;  // modality-specific nuisance
  double view_img = 0, view_sig = 0;  // score as seen by each modality
};

/// Binary ellipse (area grows with `view_score`) over stripes oriented by `u_img`, plus noise.
Tensor render_image(const SynthConfig& cfg, double view_score, double u_img, std::mt19937_64& noise_rng);

/// Spike train (amplitude up, interval down with `view_score`) plus drift scaled by `u_sig`, plus noise.
Tensor render_signal(const SynthConfig& cfg, double view_score, double u_sig, std::mt19937_64& noise_rng);

/// Shared scores, drawn from the seed stream only.
std::vector<double> synth_scores(const SynthConfig& cfg);

Dataset synth_generate(const SynthConfig& cfg, std::vector<SynthFactors>* factors = nullptr);

// ---------------------------------------------------------------------------
// Binary formats (little-endian)

inline constexpr std::uint32_t kTensorVersion = 1;
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_tensor(const Tensor& t);
/// Parses one TNSR record starting at `offset`; advances `offset` past it.
Tensor decode_tensor(const std::string& bytes, std::size_t& offset);

void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

struct Checkpoint {
  ModelParams params;
  ArchConfig arch;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> extra;  // echoed run settings (informational)
};

std::string encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(const std::string& bytes, const std::optional<ArchConfig>& expected = std::nullopt);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
/// Throws FormatError(arch_mismatch) if `expected` differs from the embedded
/// arch, FormatError(missing_tensor) if a layer tensor is absent.
Checkpoint read_checkpoint(const std::filesystem::path& path, const std::optional<ArchConfig>& expected = std::nullopt);

std::string arch_echo(const ArchConfig& a);
ArchConfig parse_arch_echo(const std::map<std::string, std::string>& kv);

// ---------------------------------------------------------------------------
// Manifests

inline constexpr const char* kManifestName = "manifest.csv";

/// Writes <dir>/manifest.csv plus images/<id>.tnsr and signals/<id>.tnsr.
void write_dataset(const std::filesystem::path& dir, const Dataset& ds);

/// Reads a manifest (or a directory containing manifest.csv); paths resolve
/// relative to the manifest's directory.
Dataset read_dataset(const std::filesystem::path& manifest_or_dir);

// ---------------------------------------------------------------------------
// Splits

/// Two disjoint parts: round(n * fraction) and the rest, each non-empty.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> ratio_split(std::size_t n, double fraction,
                                                                          std::uint64_t seed);

/// As ratio_split, but per class, so both parts keep the class mix.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_ratio_split(const std::vector<int>& labels,
                                                                                     double fraction,
                                                                                     std::uint64_t seed);

/// k disjoint folds covering all indices; per-class counts differ by at most
/// one across folds. Throws if a class has fewer than k members.
std::vector<std::vector<std::size_t>> stratified_kfold(const std::vector<int>& labels, std::size_t k,
                                                       std::uint64_t seed);

// ---------------------------------------------------------------------------
// Pairing

struct ManifestRecord {
  std::string subject;
  double time = 0;
  std::filesystem::path path;
};

/// CSV with header `subject_id,timestamp,path`; timestamps are numbers (e.g. seconds).
std::vector<ManifestRecord> read_time_manifest(const std::filesystem::path& path);

/// Same-subject records with |t_img - t_sig| <= window, closest pairs first,
/// each record used at most once. Ids are "<subject>_<k>".
Dataset pair_by_key(const std::filesystem::path& image_manifest, const std::filesystem::path& signal_manifest,
                    double window);

}  // namespace cardiovae
