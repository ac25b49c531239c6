#ifndef REPHOTO_PIPELINE_HPP_
#define REPHOTO_PIPELINE_HPP_

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "rephoto/features.hpp"
#include "rephoto/generator.hpp"
#include "rephoto/image.hpp"
#include "rephoto/imagecore.hpp"
#include "rephoto/losses.hpp"
#include "rephoto/projector.hpp"
#include "rephoto/sibling.hpp"

namespace rephoto {

enum class ExitCode : int {
  Ok = 0,
  Failure = 1,
  Usage = 2,
  MissingAsset = 3,
  MissingEncoder = 4,
  UnreadableInput = 5,
  InvalidEyes = 6,
  Diverged = 7,
};

/// Error that maps onto a process exit status.
struct PipelineError : std::runtime_error {
  PipelineError(ExitCode code, const std::string& what) : std::runtime_error(what), code(code) {}
  ExitCode code;
};

// ---------------------------------------------------------------------------
// Eye regions

struct EyeLandmarks {
  std::vector<Eigen::Vector2d> left, right;  // pixel coordinates
};

/// Seam for a facial landmark detector.
class LandmarkProvider {
 public:
  virtual ~LandmarkProvider() = default;
  virtual EyeLandmarks detect(const Image& img) const = 0;
};

/// Default provider: always fails, asking for explicit boxes.
class NullLandmarkProvider : public LandmarkProvider {
 public:
  EyeLandmarks detect(const Image& img) const override;
};

/// Returns the same landmarks for every image.
class FixedLandmarkProvider : public LandmarkProvider {
 public:
  explicit FixedLandmarkProvider(EyeLandmarks landmarks) : landmarks_(std::move(landmarks)) {}
  EyeLandmarks detect(const Image&) const override { return landmarks_; }

 private:
  EyeLandmarks landmarks_;
};

constexpr double kEyePadding = 0.25;

/// Explicit boxes are validated and returned as given. Otherwise the
/// provider's landmarks are boxed, padded by 25% of the box size on each side
/// and clipped to the image. Throws PipelineError(InvalidEyes).
EyeRegions acquire_eye_regions(const Image& img, const std::optional<EyeRegions>& explicit_boxes,
                               const LandmarkProvider& provider);

/// Parses "x0,y0,x1,y1;x0,y0,x1,y1".
EyeRegions parse_eye_boxes(const std::string& text);
std::string format_eye_boxes(const EyeRegions& eyes);

// ---------------------------------------------------------------------------
// Configuration

/// Film default from the photo's year: blue-sensitive before 1873,
/// orthochromatic through 1907, panchromatic afterwards and when unknown.
FilmModel default_film(std::optional<int> year);
/// Films the photographer could have used in that year.
std::vector<FilmModel> plausible_films(std::optional<int> year);

struct ToyEncoderSettings {
  int samples = 512;
  int epochs = 5;
  uint64_t seed = 11;
};

constexpr double kMaxSigma = 16.0;
constexpr double kRecommendedMaxSigma = 4.0;

struct ProjectionConfig {
  std::filesystem::path input;
  std::filesystem::path output_dir;
  std::optional<FilmModel> film;  // unset: default_film(year)
  std::optional<int> year;
  double sigma = 0.0;
  std::optional<std::string> eyes;  // explicit boxes or "detect"; unset uses toy defaults in toy mode
  bool toy = false;
  std::optional<std::filesystem::path> weights_manifest;
  std::optional<int> stage1_iterations;
  std::optional<int> stage2_iterations;
  uint64_t seed = 0;
  bool diagnostic = false;
  ToyEncoderSettings toy_encoder;  // toy mode trains its encoder at startup

  FilmModel resolved_film() const { return film.value_or(default_film(year)); }
  /// Throws PipelineError(Usage) for out-of-range values.
  void validate() const;
};

// ---------------------------------------------------------------------------
// Assets

struct AssetRecord {
  std::string role;  // generator, encoder:<film>, perceptual, face, context
  std::string id;
  std::string path;  // empty for bundled toy assets
  std::string sha256;
};

/// Everything a projection needs, owned.
struct AssetBundle {
  std::unique_ptr<Generator> generator;
  std::unique_ptr<Backbone> perceptual, face, context;
  std::vector<std::string> perceptual_layers, face_layers, context_layers;
  std::unique_ptr<Encoder> encoder;
  int loss_resolution = 256;
  int context_resolution = 64;
  std::vector<StageConfig> stages = default_stages();
  std::optional<EyeRegions> default_eyes;
  std::vector<AssetRecord> records;

  ProjectionAssets view() const;
};

/// Toy stack: seeded generator and backbones, schedule scaled to the 64 px
/// generator, eye boxes for a 64 px portrait. The encoder is left empty.
AssetBundle toy_bundle();

/// Deterministic small encoder for the toy generator.
Encoder train_toy_encoder(const Generator& generator, FilmModel film,
                          const ToyEncoderSettings& settings = {},
                          std::function<void(int epoch, double mean_l1)> on_epoch = {});

/// Weight manifest (JSON):
///   {"generator": {"id", "path", "sha256"},
///    "encoders": {"<film>": {"id", "path", "sha256"}},
///    "backbones": {"perceptual"|"face"|"context": {"id", "path", "sha256", "layers": [...]}},
///    "loss_resolution": 256, "context_resolution": 64,
///    "stages": [{"cutoff_resolution", "iterations"}, ...],   optional
///    "eyes": "x0,y0,x1,y1;x0,y0,x1,y1"}                      optional, at generator resolution
/// Relative paths resolve against the manifest's directory. A given sha256
/// is checked before loading. Throws PipelineError(MissingAsset) or
/// (MissingEncoder).
AssetBundle load_manifest(const std::filesystem::path& manifest, FilmModel film);

/// Writes the toy generator, backbones and a trained toy encoder for each
/// film, plus a manifest that references them.
std::filesystem::path export_toy_assets(const std::filesystem::path& dir,
                                        const ToyEncoderSettings& settings = {});

// ---------------------------------------------------------------------------
// Artifacts

/// Codes file: "RPWC", u32 version, u32 layer count, u32 code width,
/// layer_count * width float32 codes (row-major), then a, b, gamma as float32.
/// Little-endian.
void write_codes(const std::filesystem::path& path, const ExtendedLatentCode& code,
                 const CRFParams& crf);
std::pair<ExtendedLatentCode, CRFParams> read_codes(const std::filesystem::path& path);

/// One JSON object per line.
std::string trace_line(const TraceRecord& r);
std::string warning_line(const TraceWarning& w);

struct DiagnosticRow {
  int level = 0;
  int resolution = 0;
  double sibling = 0;  // Frobenius norm of the 3x3 tap covariance
  double result = 0;
};

/// Writes torgb_sibling.png and torgb_result.png (one column per level;
/// top row native scale, bottom row amplified to the tap's own range) and
/// torgb_covariance.csv. Throws std::invalid_argument before writing
/// anything when either code is empty.
std::vector<DiagnosticRow> dump_torgb_diagnostic(const Generator& generator,
                                                 const ExtendedLatentCode& sibling,
                                                 const ExtendedLatentCode& result,
                                                 const std::filesystem::path& output_dir);
/// Covariance table only.
std::vector<DiagnosticRow> torgb_covariance_table(const Generator& generator,
                                                  const ExtendedLatentCode& sibling,
                                                  const ExtendedLatentCode& result);

struct RunOutcome {
  ProjectionResult result;
  std::filesystem::path final_image, sibling_image, codes, trace, manifest;
};

/// Full run: resolve assets, read input, acquire eyes, project, write
/// artifacts. Throws PipelineError.
RunOutcome execute(const ProjectionConfig& cfg, const LandmarkProvider& provider);

/// execute() with errors reported on stderr and mapped to exit codes.
int run(const ProjectionConfig& cfg, const LandmarkProvider& provider);

/// Runs every config independently, up to `jobs` at a time. Returns the
/// first non-zero exit status, or 0.
int run_batch(const std::vector<ProjectionConfig>& configs, const LandmarkProvider& provider,
              int jobs);

/// Reads a run manifest back into a config (output_dir replaced).
ProjectionConfig config_from_run_manifest(const std::filesystem::path& manifest,
                                          const std::filesystem::path& output_dir);

}  // namespace rephoto

#endif  // REPHOTO_PIPELINE_HPP_
