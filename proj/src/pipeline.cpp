#include "rephoto/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <future>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "rephoto/tensor_file.hpp"

namespace rephoto {
namespace {

using ordered_json = nlohmann::ordered_json;
namespace fs = std::filesystem;

constexpr char kCodesMagic[4] = {'R', 'P', 'W', 'C'};
constexpr uint32_t kCodesVersion = 1;
constexpr int kToyEyeFrame = 64;  // toy eye boxes are given for a 64 px portrait

PipelineError eyes_error(const std::string& what) {
  return PipelineError(ExitCode::InvalidEyes, what);
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    const size_t pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? pos : pos - start)));
    if (pos == std::string_view::npos) return out;
    start = pos + 1;
  }
}

Box parse_box(const std::string& text) {
  const auto parts = split(text, ',');
  if (parts.size() != 4) throw eyes_error("eye box '" + text + "' needs four integers x0,y0,x1,y1");
  std::array<int, 4> v{};
  for (size_t i = 0; i < 4; ++i) {
    const std::string& p = parts[i];
    const auto [end, ec] = std::from_chars(p.data(), p.data() + p.size(), v[i]);
    if (ec != std::errc() || end != p.data() + p.size() || p.empty())
      throw eyes_error("eye box '" + text + "' has a non-integer coordinate");
  }
  return {v[0], v[1], v[2], v[3]};
}

std::string format_box(const Box& b) {
  return std::to_string(b.x0) + "," + std::to_string(b.y0) + "," + std::to_string(b.x1) + "," +
         std::to_string(b.y1);
}

Box landmark_box(const std::vector<Eigen::Vector2d>& points, int width, int height,
                 const char* which) {
  if (points.empty()) throw eyes_error(std::string("landmark provider returned no ") + which + " eye");
  Eigen::Vector2d lo = points.front(), hi = points.front();
  for (const auto& p : points) {
    if (!p.allFinite()) throw eyes_error(std::string("non-finite ") + which + " eye landmark");
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const Eigen::Vector2d pad = (hi - lo) * kEyePadding;
  Box b{static_cast<int>(std::floor(lo.x() - pad.x())), static_cast<int>(std::floor(lo.y() - pad.y())),
        static_cast<int>(std::ceil(hi.x() + pad.x())), static_cast<int>(std::ceil(hi.y() + pad.y()))};
  // A single landmark still covers its pixel.
  b.x1 = std::max(b.x1, b.x0 + 1);
  b.y1 = std::max(b.y1, b.y0 + 1);
  b.x0 = std::clamp(b.x0, 0, width);
  b.y0 = std::clamp(b.y0, 0, height);
  b.x1 = std::clamp(b.x1, 0, width);
  b.y1 = std::clamp(b.y1, 0, height);
  if (b.width() <= 0 || b.height() <= 0)
    throw eyes_error(std::string(which) + " eye landmarks lie outside the image");
  return b;
}

EyeRegions scale_eyes(const EyeRegions& eyes, int frame, int width, int height) {
  auto scale = [&](const Box& b) {
    const double sx = static_cast<double>(width) / frame, sy = static_cast<double>(height) / frame;
    return Box{static_cast<int>(std::floor(b.x0 * sx)), static_cast<int>(std::floor(b.y0 * sy)),
               std::min(width, static_cast<int>(std::ceil(b.x1 * sx))),
               std::min(height, static_cast<int>(std::ceil(b.y1 * sy)))};
  };
  return {scale(eyes.left), scale(eyes.right)};
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Manifest helpers

std::vector<std::string> default_layers(const std::string& role) {
  if (role == "perceptual") return {"relu1_2", "relu2_2", "relu3_3", "relu4_3"};
  if (role == "face") return {"conv1_1", "conv2_1", "conv3_1", "conv4_1"};
  return {"relu1_2", "relu2_2", "relu3_4"};
}

struct ResolvedAsset {
  fs::path path;
  AssetRecord record;
};

ResolvedAsset resolve_asset(const nlohmann::json& entry, const std::string& role,
                            const fs::path& base, ExitCode missing) {
  if (!entry.is_object() || !entry.contains("path"))
    throw PipelineError(missing, "manifest entry '" + role + "' has no path");
  fs::path path = entry.at("path").get<std::string>();
  if (path.is_relative()) path = base / path;
  if (!fs::is_regular_file(path))
    throw PipelineError(missing, role + " asset not found: " + path.string());
  const std::string hash = sha256_file(path);
  if (entry.contains("sha256") && entry.at("sha256").get<std::string>() != hash)
    throw PipelineError(missing, role + " asset " + path.string() + " does not match its sha256");
  return {path, {role, entry.value("id", path.stem().string()), path.string(), hash}};
}

template <typename F>
auto load_or_fail(const std::string& role, ExitCode code, F&& load) {
  try {
    return load();
  } catch (const PipelineError&) {
    throw;
  } catch (const std::exception& e) {
    throw PipelineError(code, "cannot load " + role + ": " + e.what());
  }
}

ordered_json stage_json(const StageConfig& s) {
  return {{"cutoff_resolution", s.cutoff_resolution}, {"iterations", s.iterations},
          {"style_lr", s.style_lr},                   {"crf_lr", s.crf_lr},
          {"noise_initial", s.noise_initial},         {"noise_ramp_fraction", s.noise_ramp_fraction}};
}

StageConfig stage_from_json(const nlohmann::json& j) {
  StageConfig s;
  s.cutoff_resolution = j.value("cutoff_resolution", s.cutoff_resolution);
  s.iterations = j.value("iterations", s.iterations);
  s.style_lr = j.value("style_lr", s.style_lr);
  s.crf_lr = j.value("crf_lr", s.crf_lr);
  s.noise_initial = j.value("noise_initial", s.noise_initial);
  s.noise_ramp_fraction = j.value("noise_ramp_fraction", s.noise_ramp_fraction);
  return s;
}

ordered_json asset_entry(const std::string& id, const std::string& file, const std::string& hash) {
  return {{"id", id}, {"path", file}, {"sha256", hash}};
}

ordered_json config_json(const ProjectionConfig& cfg, FilmModel film, const std::string& eyes) {
  ordered_json j;
  j["input"] = fs::absolute(cfg.input).string();
  j["film"] = std::string(to_string(film));
  j["year"] = cfg.year ? ordered_json(*cfg.year) : ordered_json(nullptr);
  j["sigma"] = cfg.sigma;
  j["eyes"] = eyes;
  j["toy"] = cfg.toy;
  j["weights_manifest"] =
      cfg.weights_manifest ? ordered_json(fs::absolute(*cfg.weights_manifest).string()) : ordered_json(nullptr);
  j["stage1_iterations"] = cfg.stage1_iterations ? ordered_json(*cfg.stage1_iterations) : ordered_json(nullptr);
  j["stage2_iterations"] = cfg.stage2_iterations ? ordered_json(*cfg.stage2_iterations) : ordered_json(nullptr);
  j["seed"] = cfg.seed;
  j["diagnostic"] = cfg.diagnostic;
  j["toy_encoder"] = {{"samples", cfg.toy_encoder.samples},
                      {"epochs", cfg.toy_encoder.epochs},
                      {"seed", cfg.toy_encoder.seed}};
  return j;
}

// Nearest-neighbour upscaling of one tap into a tile.
void paint_tap(Image& grid, const ad::Mat& tap, int tap_res, int tile, int col, int row,
               bool amplified) {
  double lo = tap.minCoeff(), hi = tap.maxCoeff();
  for (int y = 0; y < tile; ++y)
    for (int x = 0; x < tile; ++x) {
      const Eigen::Index src = static_cast<Eigen::Index>(y * tap_res / tile) * tap_res + x * tap_res / tile;
      for (int c = 0; c < 3; ++c) {
        const double v = tap(c, src);
        grid.at(c, row * tile + y, col * tile + x) =
            amplified ? (hi > lo ? (v - lo) / (hi - lo) : 0.5) : 0.5 + v;
      }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Eye regions

EyeLandmarks NullLandmarkProvider::detect(const Image&) const {
  throw eyes_error("no landmark detector is configured; pass eye boxes as x0,y0,x1,y1;x0,y0,x1,y1");
}

EyeRegions acquire_eye_regions(const Image& img, const std::optional<EyeRegions>& explicit_boxes,
                               const LandmarkProvider& provider) {
  if (explicit_boxes) {
    try {
      explicit_boxes->validate(img.width(), img.height());
    } catch (const std::out_of_range& e) {
      throw eyes_error(e.what());
    }
    return *explicit_boxes;
  }
  const EyeLandmarks lm = provider.detect(img);
  return {landmark_box(lm.left, img.width(), img.height(), "left"),
          landmark_box(lm.right, img.width(), img.height(), "right")};
}

EyeRegions parse_eye_boxes(const std::string& text) {
  const auto parts = split(text, ';');
  if (parts.size() != 2) throw eyes_error("expected two eye boxes separated by ';', got '" + text + "'");
  return {parse_box(parts[0]), parse_box(parts[1])};
}

std::string format_eye_boxes(const EyeRegions& eyes) {
  return format_box(eyes.left) + ";" + format_box(eyes.right);
}

// ---------------------------------------------------------------------------
// Configuration

FilmModel default_film(std::optional<int> year) {
  if (!year) return FilmModel::Panchromatic;
  if (*year < 1873) return FilmModel::BlueSensitive;
  if (*year <= 1907) return FilmModel::Orthochromatic;
  return FilmModel::Panchromatic;
}

std::vector<FilmModel> plausible_films(std::optional<int> year) {
  if (year && *year < 1873) return {FilmModel::BlueSensitive};
  if (year && *year <= 1907) return {FilmModel::BlueSensitive, FilmModel::Orthochromatic};
  return {FilmModel::BlueSensitive, FilmModel::Orthochromatic, FilmModel::Panchromatic};
}

void ProjectionConfig::validate() const {
  auto usage = [](const std::string& what) { return PipelineError(ExitCode::Usage, what); };
  if (input.empty()) throw usage("no input image given");
  if (output_dir.empty()) throw usage("no output directory given");
  if (!std::isfinite(sigma) || sigma < 0.0 || sigma > kMaxSigma)
    throw usage("sigma must lie in [0, " + std::to_string(static_cast<int>(kMaxSigma)) + "]");
  if (toy && weights_manifest) throw usage("--toy and --weights-manifest are mutually exclusive");
  if (!toy && !weights_manifest) throw usage("pass --toy or --weights-manifest");
  if (stage1_iterations && *stage1_iterations < 0) throw usage("stage 1 iterations must be >= 0");
  if (stage2_iterations && *stage2_iterations < 0) throw usage("stage 2 iterations must be >= 0");
  if (toy_encoder.samples < 1 || toy_encoder.epochs < 1)
    throw usage("toy encoder needs at least one sample and one epoch");
}

// ---------------------------------------------------------------------------
// Assets

ProjectionAssets AssetBundle::view() const {
  return {generator.get(),
          {perceptual.get(), perceptual_layers, face.get(), face_layers},
          context.get(),
          context_layers};
}

AssetBundle toy_bundle() {
  AssetBundle b;
  b.generator = std::make_unique<Generator>(Generator::toy(7));
  b.perceptual = std::make_unique<Backbone>(Backbone::toy("toy-vgg", 1));
  b.face = std::make_unique<Backbone>(Backbone::toy("toy-face", 2, Backbone::InputConvention::Caffe));
  b.context = std::make_unique<Backbone>(Backbone::toy("toy-vgg", 1));
  b.perceptual_layers = {"relu1_2", "relu2_2", "relu3_2"};
  b.face_layers = {"relu2_2", "relu3_2"};
  b.context_layers = {"relu2_2"};
  // 64 px renders compared at half resolution, as 1024 px ones are at 256.
  b.loss_resolution = 32;
  b.context_resolution = 32;
  b.stages = default_stages();
  b.stages[0].cutoff_resolution = 16;
  b.stages[0].iterations = 50;
  b.stages[1].cutoff_resolution = 32;
  b.stages[1].iterations = 150;
  b.default_eyes = EyeRegions{{14, 20, 30, 32}, {34, 20, 50, 32}};
  b.records = {{"generator", "toy-generator", "", b.generator->weights().sha256()},
               {"perceptual", b.perceptual->id(), "", b.perceptual->checkpoint().sha256()},
               {"face", b.face->id(), "", b.face->checkpoint().sha256()},
               {"context", b.context->id(), "", b.context->checkpoint().sha256()}};
  return b;
}

Encoder train_toy_encoder(const Generator& generator, FilmModel film,
                          const ToyEncoderSettings& settings,
                          std::function<void(int epoch, double mean_l1)> on_epoch) {
  const EncoderArchitecture arch = EncoderArchitecture::toy();
  EncoderTrainConfig cfg = EncoderTrainConfig::for_film(film);
  cfg.sample_count = settings.samples;
  cfg.epochs = settings.epochs;
  const TrainingSet pairs(generator, film, cfg, settings.seed, arch.input_resolution);
  TrainOptions options;
  options.seed = settings.seed + 2;
  options.on_epoch = std::move(on_epoch);
  return train_encoder(pairs, Encoder::init(arch, film, settings.seed + 1), options);
}

AssetBundle load_manifest(const fs::path& manifest, FilmModel film) {
  if (!fs::is_regular_file(manifest))
    throw PipelineError(ExitCode::MissingAsset, "weight manifest not found: " + manifest.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(manifest));
  } catch (const std::exception& e) {
    throw PipelineError(ExitCode::MissingAsset,
                        "cannot parse weight manifest " + manifest.string() + ": " + e.what());
  }
  const fs::path base = manifest.parent_path();
  AssetBundle b;

  if (!j.contains("generator"))
    throw PipelineError(ExitCode::MissingAsset, "weight manifest lists no generator");
  const ResolvedAsset gen = resolve_asset(j["generator"], "generator", base, ExitCode::MissingAsset);
  b.generator = load_or_fail("generator", ExitCode::MissingAsset,
                             [&] { return std::make_unique<Generator>(Generator::load(gen.path)); });
  b.records.push_back(gen.record);

  const nlohmann::json backbones = j.value("backbones", nlohmann::json::object());
  auto load_backbone = [&](const std::string& role, const std::string& fallback,
                           std::vector<std::string>& layers) {
    const std::string key = backbones.contains(role) ? role : fallback;
    if (!backbones.contains(key))
      throw PipelineError(ExitCode::MissingAsset, "weight manifest lists no " + role + " backbone");
    const nlohmann::json& entry = backbones[key];
    ResolvedAsset a = resolve_asset(entry, role, base, ExitCode::MissingAsset);
    auto net = load_or_fail(role, ExitCode::MissingAsset,
                            [&] { return std::make_unique<Backbone>(Backbone::load(a.path)); });
    layers = backbones.contains(role) && entry.contains("layers")
                 ? entry["layers"].get<std::vector<std::string>>()
                 : default_layers(role);
    for (const auto& name : layers)
      if (!net->has_layer(name))
        throw PipelineError(ExitCode::MissingAsset,
                            role + " backbone '" + net->id() + "' has no layer '" + name + "'");
    b.records.push_back(a.record);
    return net;
  };
  b.perceptual = load_backbone("perceptual", "perceptual", b.perceptual_layers);
  b.face = load_backbone("face", "face", b.face_layers);
  b.context = load_backbone("context", "perceptual", b.context_layers);

  const std::string film_name(to_string(film));
  const nlohmann::json encoders = j.value("encoders", nlohmann::json::object());
  if (!encoders.contains(film_name))
    throw PipelineError(ExitCode::MissingEncoder,
                        "weight manifest has no encoder for " + film_name + " film");
  const ResolvedAsset enc =
      resolve_asset(encoders[film_name], "encoder:" + film_name, base, ExitCode::MissingEncoder);
  b.encoder = load_or_fail("encoder", ExitCode::MissingEncoder,
                           [&] { return std::make_unique<Encoder>(Encoder::load(enc.path)); });
  if (b.encoder->film() != film)
    throw PipelineError(ExitCode::MissingEncoder, "encoder " + enc.path.string() + " was trained for " +
                                                      std::string(to_string(b.encoder->film())) + " film");
  b.records.push_back(enc.record);

  b.loss_resolution = j.value("loss_resolution", b.loss_resolution);
  b.context_resolution = j.value("context_resolution", b.context_resolution);
  if (j.contains("stages")) {
    b.stages.clear();
    for (const auto& s : j["stages"]) b.stages.push_back(stage_from_json(s));
  }
  if (j.contains("eyes")) b.default_eyes = parse_eye_boxes(j["eyes"].get<std::string>());
  return b;
}

fs::path export_toy_assets(const fs::path& dir, const ToyEncoderSettings& settings) {
  fs::create_directories(dir);
  const AssetBundle b = toy_bundle();
  ordered_json m;
  b.generator->save(dir / "generator.rpt");
  m["generator"] = asset_entry("toy-generator", "generator.rpt", sha256_file(dir / "generator.rpt"));
  for (FilmModel film : {FilmModel::BlueSensitive, FilmModel::Orthochromatic, FilmModel::Panchromatic}) {
    const std::string name(to_string(film));
    const std::string file = "encoder_" + name + ".rpt";
    train_toy_encoder(*b.generator, film, settings).save(dir / file);
    m["encoders"][name] = asset_entry("toy-encoder-" + name, file, sha256_file(dir / file));
  }
  auto backbone = [&](const std::string& role, const Backbone& net, const std::vector<std::string>& layers) {
    const std::string file = role + ".rpt";
    net.save(dir / file);
    ordered_json e = asset_entry(net.id(), file, sha256_file(dir / file));
    e["layers"] = layers;
    m["backbones"][role] = e;
  };
  backbone("perceptual", *b.perceptual, b.perceptual_layers);
  backbone("face", *b.face, b.face_layers);
  backbone("context", *b.context, b.context_layers);
  m["loss_resolution"] = b.loss_resolution;
  m["context_resolution"] = b.context_resolution;
  m["stages"] = ordered_json::array();
  for (const auto& s : b.stages) m["stages"].push_back(stage_json(s));
  m["eyes"] = format_eye_boxes(*b.default_eyes);
  const fs::path path = dir / "manifest.json";
  write_text(path, m.dump(2) + "\n");
  return path;
}

// ---------------------------------------------------------------------------
// Artifacts

void write_codes(const fs::path& path, const ExtendedLatentCode& code, const CRFParams& crf) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  auto u32 = [&](uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
  auto f32 = [&](double v) {
    const float f = static_cast<float>(v);
    out.write(reinterpret_cast<const char*>(&f), 4);
  };
  out.write(kCodesMagic, 4);
  u32(kCodesVersion);
  u32(static_cast<uint32_t>(code.layer_count()));
  u32(static_cast<uint32_t>(code.width()));
  for (int k = 0; k < code.layer_count(); ++k)
    for (int j = 0; j < code.width(); ++j) f32(code.matrix()(k, j));
  f32(crf.a);
  f32(crf.b);
  f32(crf.gamma);
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::pair<ExtendedLatentCode, CRFParams> read_codes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path.string());
  auto need = [&](void* dst, size_t n) {
    in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (!in) throw FormatError(path.string() + " is truncated");
  };
  auto u32 = [&] {
    uint32_t v;
    need(&v, 4);
    return v;
  };
  auto f32 = [&] {
    float v;
    need(&v, 4);
    return static_cast<double>(v);
  };
  char magic[4];
  need(magic, 4);
  if (std::memcmp(magic, kCodesMagic, 4) != 0) throw FormatError(path.string() + " is not a codes file");
  if (const uint32_t v = u32(); v != kCodesVersion)
    throw FormatError("unsupported codes version " + std::to_string(v));
  const uint32_t layers = u32(), width = u32();
  if (layers == 0 || width == 0 || layers > 64 || width > 4096)
    throw FormatError(path.string() + " has an implausible code shape");
  ad::Mat m(layers, width);
  for (uint32_t k = 0; k < layers; ++k)
    for (uint32_t j = 0; j < width; ++j) m(k, j) = f32();
  CRFParams crf;
  crf.a = f32();
  crf.b = f32();
  crf.gamma = f32();
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError(path.string() + " has trailing bytes");
  return {ExtendedLatentCode(std::move(m)), crf};
}

std::string trace_line(const TraceRecord& r) {
  const TermValues& t = r.terms;
  ordered_json j{{"stage", r.stage},   {"iteration", r.iteration}, {"vgg", t.vgg},
                 {"face", t.face},     {"eye", t.eye},             {"recon", t.recon},
                 {"color", t.color},   {"ctx", t.ctx},             {"total", t.total},
                 {"noise_scale", r.noise_scale},
                 {"crf", {{"a", r.crf.a}, {"b", r.crf.b}, {"gamma", r.crf.gamma}}}};
  return j.dump();
}

std::string warning_line(const TraceWarning& w) {
  return ordered_json{{"warning", w.message}, {"stage", w.stage}, {"iteration", w.iteration}}.dump();
}

std::vector<DiagnosticRow> torgb_covariance_table(const Generator& generator,
                                                  const ExtendedLatentCode& sibling,
                                                  const ExtendedLatentCode& result) {
  if (sibling.layer_count() == 0 || result.layer_count() == 0)
    throw std::invalid_argument("ToRGB diagnostic needs both a sibling and a result code");
  const SynthesisOutput s = generator.synthesize(sibling);
  const SynthesisOutput r = generator.synthesize(result);
  std::vector<DiagnosticRow> rows;
  for (size_t l = 0; l < s.torgb.size(); ++l)
    rows.push_back({static_cast<int>(l), 4 << l, channel_covariance(s.torgb[l]).value().norm(),
                    channel_covariance(r.torgb[l]).value().norm()});
  return rows;
}

std::vector<DiagnosticRow> dump_torgb_diagnostic(const Generator& generator,
                                                 const ExtendedLatentCode& sibling,
                                                 const ExtendedLatentCode& result,
                                                 const fs::path& output_dir) {
  const std::vector<DiagnosticRow> rows = torgb_covariance_table(generator, sibling, result);
  fs::create_directories(output_dir);
  const int tile = generator.resolution();
  const int levels = static_cast<int>(rows.size());
  for (const auto& [name, code] : {std::pair{"torgb_sibling.png", &sibling}, std::pair{"torgb_result.png", &result}}) {
    const SynthesisOutput out = generator.synthesize(*code);
    Image grid(levels * tile, 2 * tile, 3);
    for (int l = 0; l < levels; ++l) {
      const ad::Var& tap = out.torgb[static_cast<size_t>(l)];
      paint_tap(grid, tap.value(), tap.width(), tile, l, 0, false);
      paint_tap(grid, tap.value(), tap.width(), tile, l, 1, true);
    }
    write_png(output_dir / name, grid);
  }
  std::ostringstream csv;
  csv.precision(9);
  csv << "level,resolution,sibling_cov_norm,result_cov_norm\n";
  for (const auto& r : rows) csv << r.level << "," << r.resolution << "," << r.sibling << "," << r.result << "\n";
  write_text(output_dir / "torgb_covariance.csv", csv.str());
  return rows;
}

// ---------------------------------------------------------------------------
// Runs

RunOutcome execute(const ProjectionConfig& cfg, const LandmarkProvider& provider) {
  cfg.validate();
  const FilmModel film = cfg.resolved_film();
  if (cfg.sigma > kRecommendedMaxSigma)
    std::cerr << "warning: sigma " << cfg.sigma << " is above the recommended maximum of "
              << kRecommendedMaxSigma << "\n";
  if (const auto films = plausible_films(cfg.year);
      std::find(films.begin(), films.end(), film) == films.end())
    std::cerr << "warning: " << to_string(film) << " film was not in use in " << *cfg.year << "\n";

  Image input;
  try {
    input = read_png(cfg.input);
  } catch (const std::exception& e) {
    throw PipelineError(ExitCode::UnreadableInput, e.what());
  }

  AssetBundle assets = cfg.toy ? toy_bundle() : load_manifest(*cfg.weights_manifest, film);
  if (cfg.toy) {
    assets.encoder = std::make_unique<Encoder>(train_toy_encoder(*assets.generator, film, cfg.toy_encoder));
    const std::string name(to_string(film));
    assets.records.push_back(
        {"encoder:" + name, "toy-encoder-" + name, "", assets.encoder->checkpoint().sha256()});
  }
  if (cfg.stage1_iterations && !assets.stages.empty()) assets.stages[0].iterations = *cfg.stage1_iterations;
  if (cfg.stage2_iterations && assets.stages.size() > 1) assets.stages[1].iterations = *cfg.stage2_iterations;

  std::optional<EyeRegions> boxes;
  if (cfg.eyes && *cfg.eyes != "detect") {
    boxes = parse_eye_boxes(*cfg.eyes);
  } else if (!cfg.eyes) {
    if (!assets.default_eyes)
      throw eyes_error("eye boxes are required (pass x0,y0,x1,y1;x0,y0,x1,y1 or 'detect')");
    boxes = scale_eyes(*assets.default_eyes, cfg.toy ? kToyEyeFrame : assets.generator->resolution(),
                       input.width(), input.height());
  }
  const EyeRegions eyes = acquire_eye_regions(input, boxes, provider);
  const int min_eye = assets.perceptual->min_input_size(assets.perceptual_layers);
  for (const Box& b : {eyes.left, eyes.right})
    if (b.width() < min_eye || b.height() < min_eye)
      throw eyes_error("eye box " + format_box(b) + " is smaller than the " + std::to_string(min_eye) +
                       " px the perceptual layers need");

  ProjectorConfig pc;
  pc.film = film;
  pc.sigma = cfg.sigma;
  pc.eyes = eyes;
  pc.loss_resolution = assets.loss_resolution;
  pc.context_resolution = assets.context_resolution;
  pc.stages = assets.stages;
  pc.seed = cfg.seed;

  RunOutcome out;
  fs::create_directories(cfg.output_dir);
  out.final_image = cfg.output_dir / "final.png";
  out.sibling_image = cfg.output_dir / "sibling.png";
  out.codes = cfg.output_dir / "codes.rpwc";
  out.trace = cfg.output_dir / "trace.jsonl";
  out.manifest = cfg.output_dir / "run_manifest.json";

  std::ofstream trace(out.trace, std::ios::binary);
  if (!trace) throw std::runtime_error("cannot write " + out.trace.string());
  try {
    out.result = project(input, *assets.encoder, assets.view(), pc,
                         [&](const TraceRecord& r) { trace << trace_line(r) << "\n"; });
  } catch (const ProjectionDiverged& e) {
    trace.flush();
    throw PipelineError(ExitCode::Diverged, e.what());
  }
  for (const auto& w : out.result.state.warnings) {
    trace << warning_line(w) << "\n";
    std::cerr << "warning: stage " << w.stage + 1 << ", iteration " << w.iteration << ": " << w.message << "\n";
  }
  trace.close();
  if (!trace) throw std::runtime_error("write failed for " + out.trace.string());

  write_png(out.final_image, out.result.image);
  write_png(out.sibling_image, out.result.sibling.image);
  write_codes(out.codes, out.result.state.code, out.result.state.crf);
  const ExtendedLatentCode sibling_code =
      broadcast(out.result.sibling.code, assets.generator->layer_count());
  if (cfg.diagnostic)
    dump_torgb_diagnostic(*assets.generator, sibling_code, out.result.state.code,
                          cfg.output_dir / "diagnostic");

  ordered_json m;
  m["format"] = "rephoto-run-v1";
  m["config"] = config_json(cfg, film, format_eye_boxes(eyes));
  m["input_sha256"] = sha256_file(cfg.input);
  m["assets"] = ordered_json::array();
  for (const auto& r : assets.records)
    m["assets"].push_back({{"role", r.role}, {"id", r.id}, {"path", r.path}, {"sha256", r.sha256}});
  ordered_json& resolved = m["resolved"];
  resolved["film"] = std::string(to_string(film));
  resolved["eyes"] = format_eye_boxes(eyes);
  resolved["loss_resolution"] = pc.loss_resolution;
  resolved["context_resolution"] = pc.context_resolution;
  resolved["weights"] = {{"vgg", pc.weights.vgg}, {"face", pc.weights.face}, {"eye", pc.weights.eye},
                         {"ctx", pc.weights.ctx}, {"color", pc.weights.color}};
  resolved["stages"] = ordered_json::array();
  for (const auto& s : pc.stages) resolved["stages"].push_back(stage_json(s));
  m["summary"] = ordered_json::array();
  for (const auto& s : out.result.state.stages)
    m["summary"].push_back({{"initial_objective", s.initial_objective},
                            {"best_objective", s.best_objective},
                            {"best_iteration", s.best_iteration}});
  m["warnings"] = out.result.state.warnings.size();
  m["outputs"] = {{"final.png", sha256_file(out.final_image)},
                  {"sibling.png", sha256_file(out.sibling_image)},
                  {"codes.rpwc", sha256_file(out.codes)},
                  {"trace.jsonl", sha256_file(out.trace)}};
  write_text(out.manifest, m.dump(2) + "\n");
  return out;
}

int run(const ProjectionConfig& cfg, const LandmarkProvider& provider) {
  try {
    const RunOutcome out = execute(cfg, provider);
    std::cout << "wrote " << out.final_image.string() << "\n";
    return 0;
  } catch (const PipelineError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.code);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::Failure);
  }
}

int run_batch(const std::vector<ProjectionConfig>& configs, const LandmarkProvider& provider,
              int jobs) {
  std::vector<int> status(configs.size(), 0);
  std::atomic<size_t> next{0};
  auto worker = [&] {
    for (size_t i = next++; i < configs.size(); i = next++) status[i] = run(configs[i], provider);
  };
  const size_t n = std::clamp<size_t>(static_cast<size_t>(std::max(jobs, 1)), 1, std::max<size_t>(configs.size(), 1));
  std::vector<std::future<void>> workers;
  for (size_t i = 0; i < n; ++i) workers.push_back(std::async(std::launch::async, worker));
  for (auto& w : workers) w.get();
  for (int s : status)
    if (s != 0) return s;
  return 0;
}

ProjectionConfig config_from_run_manifest(const fs::path& manifest, const fs::path& output_dir) {
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(read_text(manifest));
  } catch (const std::exception& e) {
    throw PipelineError(ExitCode::Usage, "cannot read run manifest " + manifest.string() + ": " + e.what());
  }
  if (m.value("format", "") != "rephoto-run-v1" || !m.contains("config"))
    throw PipelineError(ExitCode::Usage, manifest.string() + " is not a run manifest");
  const nlohmann::json& c = m["config"];
  ProjectionConfig cfg;
  cfg.input = c.at("input").get<std::string>();
  cfg.output_dir = output_dir;
  cfg.film = parse_film(c.at("film").get<std::string>());
  if (!cfg.film) throw PipelineError(ExitCode::Usage, "run manifest names an unknown film");
  if (!c.at("year").is_null()) cfg.year = c["year"].get<int>();
  cfg.sigma = c.at("sigma").get<double>();
  cfg.eyes = c.at("eyes").get<std::string>();
  cfg.toy = c.at("toy").get<bool>();
  if (!c.at("weights_manifest").is_null()) cfg.weights_manifest = c["weights_manifest"].get<std::string>();
  if (!c.at("stage1_iterations").is_null()) cfg.stage1_iterations = c["stage1_iterations"].get<int>();
  if (!c.at("stage2_iterations").is_null()) cfg.stage2_iterations = c["stage2_iterations"].get<int>();
  cfg.seed = c.at("seed").get<uint64_t>();
  cfg.diagnostic = c.at("diagnostic").get<bool>();
  const nlohmann::json& te = c.at("toy_encoder");
  cfg.toy_encoder = {te.at("samples").get<int>(), te.at("epochs").get<int>(), te.at("seed").get<uint64_t>()};

  if (!fs::is_regular_file(cfg.input))
    throw PipelineError(ExitCode::UnreadableInput, "input " + cfg.input.string() + " no longer exists");
  if (sha256_file(cfg.input) != m.value("input_sha256", ""))
    throw PipelineError(ExitCode::UnreadableInput,
                        "input " + cfg.input.string() + " changed since the recorded run");
  return cfg;
}

}  // namespace rephoto
