#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "rephoto/pipeline.hpp"
#include "rephoto/tensor_file.hpp"
#include "support.hpp"

using namespace rephoto;
namespace fs = std::filesystem;

namespace {

const ToyEncoderSettings kTinyEncoder{8, 1, 11};

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "rephoto_test_pipeline" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Degraded toy render, the usual test photo.
fs::path toy_photo(const fs::path& dir) {
  static const Image photo = [] {
    const Generator g = Generator::toy(7);
    return degrade(g.synthesize(broadcast(g.sample_latent(101), 10)).rgb(),
                   {FilmModel::Orthochromatic, 1.0, {}, 64});
  }();
  write_png(dir / "photo.png", photo, 16);
  return dir / "photo.png";
}

ProjectionConfig quick_config(const fs::path& dir) {
  ProjectionConfig cfg;
  cfg.input = toy_photo(dir);
  cfg.output_dir = dir / "out";
  cfg.film = FilmModel::Orthochromatic;
  cfg.sigma = 1.0;
  cfg.toy = true;
  cfg.stage1_iterations = 3;
  cfg.stage2_iterations = 3;
  cfg.seed = 4;
  cfg.toy_encoder = kTinyEncoder;
  return cfg;
}

ExitCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const PipelineError& e) {
    return e.code;
  }
  return ExitCode::Ok;
}

const fs::path& exported_assets() {
  static const fs::path manifest = export_toy_assets(scratch("assets"), kTinyEncoder);
  return manifest;
}

}  // namespace

TEST_CASE("eye box text") {
  const EyeRegions e = parse_eye_boxes("1,2,9,10; 20,2,28,10");
  CHECK(e.left == Box{1, 2, 9, 10});
  CHECK(e.right == Box{20, 2, 28, 10});
  CHECK(parse_eye_boxes(format_eye_boxes(e)) == e);
  for (const char* bad : {"1,2,9,10", "1,2,9;20,2,28,10", "a,2,9,10;20,2,28,10", "1,2,9,10;20,2,28,10;1,1,2,2", ""})
    CHECK(code_of([&] { parse_eye_boxes(bad); }) == ExitCode::InvalidEyes);
}

TEST_CASE("eye acquisition") {
  const Image img(64, 48, 1, 0.5);
  SUBCASE("explicit boxes are returned as given") {
    const EyeRegions e{{1, 2, 9, 10}, {20, 2, 28, 10}};
    CHECK(acquire_eye_regions(img, e, NullLandmarkProvider{}) == e);
  }
  SUBCASE("explicit boxes outside the image are rejected") {
    const EyeRegions e{{1, 2, 9, 10}, {60, 2, 70, 10}};
    CHECK(code_of([&] { acquire_eye_regions(img, e, NullLandmarkProvider{}); }) == ExitCode::InvalidEyes);
  }
  SUBCASE("the null provider asks for explicit boxes") {
    CHECK(code_of([&] { acquire_eye_regions(img, std::nullopt, NullLandmarkProvider{}); }) ==
          ExitCode::InvalidEyes);
  }
  SUBCASE("landmarks are boxed, padded and clipped") {
    EyeLandmarks lm;
    lm.left = {{10, 20}, {18, 24}};
    lm.right = {{50, 20}, {63, 24}};
    const FixedLandmarkProvider fixed(lm);
    const EyeRegions e = acquire_eye_regions(img, std::nullopt, fixed);
    CHECK(e.left == Box{8, 19, 20, 25});
    // Right box pads to 66.25 and is clipped to the image edge.
    CHECK(e.right.x1 == 64);
    CHECK(acquire_eye_regions(img, std::nullopt, fixed) == e);
  }
}

TEST_CASE("film follows the photo's era") {
  CHECK(default_film(1850) == FilmModel::BlueSensitive);
  CHECK(default_film(1872) == FilmModel::BlueSensitive);
  CHECK(default_film(1873) == FilmModel::Orthochromatic);
  CHECK(default_film(1907) == FilmModel::Orthochromatic);
  CHECK(default_film(1908) == FilmModel::Panchromatic);
  CHECK(default_film(std::nullopt) == FilmModel::Panchromatic);
  CHECK(plausible_films(1860) == std::vector<FilmModel>{FilmModel::BlueSensitive});
  CHECK(plausible_films(1900).size() == 2);
  CHECK(plausible_films(1950).size() == 3);
  ProjectionConfig cfg;
  cfg.year = 1890;
  CHECK(cfg.resolved_film() == FilmModel::Orthochromatic);
  cfg.film = FilmModel::Panchromatic;
  CHECK(cfg.resolved_film() == FilmModel::Panchromatic);
}

TEST_CASE("config validation") {
  const fs::path dir = scratch("validate");
  ProjectionConfig ok = quick_config(dir);
  CHECK_NOTHROW(ok.validate());
  auto usage = [](ProjectionConfig c) { return code_of([&] { c.validate(); }); };
  ProjectionConfig c = ok;
  c.sigma = 16.5;
  CHECK(usage(c) == ExitCode::Usage);
  c = ok;
  c.sigma = -1;
  CHECK(usage(c) == ExitCode::Usage);
  c = ok;
  c.weights_manifest = "m.json";
  CHECK(usage(c) == ExitCode::Usage);
  c = ok;
  c.toy = false;
  CHECK(usage(c) == ExitCode::Usage);
  c = ok;
  c.stage2_iterations = -1;
  CHECK(usage(c) == ExitCode::Usage);
  c = ok;
  c.input.clear();
  CHECK(usage(c) == ExitCode::Usage);
}

TEST_CASE("codes file round trip") {
  const fs::path dir = scratch("codes");
  ExtendedLatentCode code = broadcast(Generator::toy(7).sample_latent(3), 10);
  code.matrix().row(9).array() += 0.25;
  write_codes(dir / "c.rpwc", code, {0.1, 0.9, 1.2});
  const auto [back, crf] = read_codes(dir / "c.rpwc");
  CHECK(back.layer_count() == 10);
  CHECK(back.width() == 512);
  CHECK((back.matrix() - code.matrix().cast<float>().cast<double>()).cwiseAbs().maxCoeff() == 0.0);
  CHECK(crf.a == static_cast<double>(0.1f));
  CHECK(crf.gamma == static_cast<double>(1.2f));
  const std::string bytes = slurp(dir / "c.rpwc");
  CHECK(bytes.substr(0, 4) == "RPWC");
  CHECK(bytes.size() == 16 + 4 * (10 * 512 + 3));
  std::ofstream(dir / "short.rpwc", std::ios::binary).write(bytes.data(), 100);
  CHECK_THROWS(read_codes(dir / "short.rpwc"));
}

TEST_CASE("trace lines are single JSON objects") {
  TraceRecord r;
  r.stage = 1;
  r.iteration = 42;
  r.terms.total = 0.5;
  r.noise_scale = 0.01;
  r.crf = {0.1, 0.9, 1.1};
  const std::string line = trace_line(r);
  CHECK(line.find('\n') == std::string::npos);
  const auto j = nlohmann::json::parse(line);
  CHECK(j["stage"] == 1);
  CHECK(j["iteration"] == 42);
  CHECK(j["total"] == 0.5);
  CHECK(j["crf"]["gamma"] == 1.1);
  const auto w = nlohmann::json::parse(warning_line({0, 100, "stalled"}));
  CHECK(w["warning"] == "stalled");
}

TEST_CASE("diagnostic rejects empty codes before writing") {
  const fs::path dir = scratch("diag");
  const Generator g = Generator::toy(7);
  CHECK_THROWS_AS(dump_torgb_diagnostic(g, ExtendedLatentCode{}, broadcast(g.sample_latent(1), 10), dir / "d"),
                  std::invalid_argument);
  CHECK_FALSE(fs::exists(dir / "d"));
  const auto rows = dump_torgb_diagnostic(g, broadcast(g.sample_latent(1), 10), broadcast(g.sample_latent(2), 10), dir / "d");
  CHECK(rows.size() == 5);
  CHECK(fs::exists(dir / "d" / "torgb_sibling.png"));
  CHECK(fs::exists(dir / "d" / "torgb_result.png"));
  CHECK(fs::exists(dir / "d" / "torgb_covariance.csv"));
}

TEST_CASE("weight manifests") {
  const fs::path manifest = exported_assets();
  SUBCASE("a complete manifest loads") {
    const AssetBundle b = load_manifest(manifest, FilmModel::Panchromatic);
    CHECK(b.generator->resolution() == 64);
    CHECK(b.encoder->film() == FilmModel::Panchromatic);
    CHECK(b.perceptual_layers == std::vector<std::string>{"relu1_2", "relu2_2", "relu3_2"});
    CHECK(b.stages.size() == 2);
    CHECK(b.default_eyes.has_value());
  }
  SUBCASE("a missing encoder has its own exit code") {
    const fs::path dir = scratch("no_encoder");
    for (const auto& e : fs::directory_iterator(manifest.parent_path())) fs::copy(e.path(), dir / e.path().filename());
    fs::remove(dir / "encoder_blue.rpt");
    CHECK(code_of([&] { load_manifest(dir / manifest.filename(), FilmModel::BlueSensitive); }) ==
          ExitCode::MissingEncoder);
    CHECK_NOTHROW(load_manifest(dir / manifest.filename(), FilmModel::Orthochromatic));
  }
  SUBCASE("missing and tampered assets") {
    const fs::path dir = scratch("tampered");
    for (const auto& e : fs::directory_iterator(manifest.parent_path())) fs::copy(e.path(), dir / e.path().filename());
    fs::remove(dir / "face.rpt");
    CHECK(code_of([&] { load_manifest(dir / manifest.filename(), FilmModel::Orthochromatic); }) ==
          ExitCode::MissingAsset);
    fs::copy(manifest.parent_path() / "context.rpt", dir / "face.rpt");
    CHECK(code_of([&] { load_manifest(dir / manifest.filename(), FilmModel::Orthochromatic); }) ==
          ExitCode::MissingAsset);
    CHECK(code_of([&] { load_manifest(dir / "nope.json", FilmModel::Orthochromatic); }) == ExitCode::MissingAsset);
  }
}

TEST_CASE("run exit codes") {
  const fs::path dir = scratch("exit");
  const NullLandmarkProvider none;
  ProjectionConfig c = quick_config(dir);
  c.input = dir / "missing.png";
  CHECK(run(c, none) == 5);
  c = quick_config(dir);
  c.eyes = "detect";
  CHECK(run(c, none) == 6);
  c = quick_config(dir);
  c.eyes = "1,1,3,3;10,10,12,12";  // smaller than the deepest perceptual layer allows
  CHECK(run(c, none) == 6);
  c = quick_config(dir);
  c.sigma = 20;
  CHECK(run(c, none) == 2);
  c = quick_config(dir);
  c.toy = false;
  c.weights_manifest = dir / "none.json";
  CHECK(run(c, none) == 3);
}

TEST_CASE("toy run writes its artifacts and replays bit-identically") {
  const fs::path dir = scratch("run");
  ProjectionConfig cfg = quick_config(dir);
  cfg.diagnostic = true;
  const RunOutcome out = execute(cfg, NullLandmarkProvider{});
  for (const fs::path& p : {out.final_image, out.sibling_image, out.codes, out.trace, out.manifest})
    CHECK(fs::exists(p));
  CHECK(fs::exists(cfg.output_dir / "diagnostic" / "torgb_covariance.csv"));

  const auto m = nlohmann::json::parse(slurp(out.manifest));
  CHECK(m["format"] == "rephoto-run-v1");
  CHECK(m["config"]["film"] == "ortho");
  CHECK(m["resolved"]["eyes"] == "14,20,30,32;34,20,50,32");
  CHECK(m["resolved"]["stages"].size() == 2);
  CHECK(m["input_sha256"] == sha256_file(cfg.input));

  std::istringstream trace(slurp(out.trace));
  int lines = 0;
  for (std::string line; std::getline(trace, line); ++lines) CHECK(nlohmann::json::parse(line).contains("total"));
  CHECK(lines == 6);

  const ProjectionConfig again = config_from_run_manifest(out.manifest, dir / "replay");
  execute(again, NullLandmarkProvider{});
  for (const char* f : {"final.png", "sibling.png", "codes.rpwc", "trace.jsonl"})
    CHECK(slurp(cfg.output_dir / f) == slurp(dir / "replay" / f));

  write_png(cfg.input, Image(64, 64, 1, 0.3));
  CHECK(code_of([&] { config_from_run_manifest(out.manifest, dir / "replay2"); }) == ExitCode::UnreadableInput);
}

TEST_CASE("manifest-driven run") {
  const fs::path dir = scratch("manifest_run");
  ProjectionConfig cfg = quick_config(dir);
  cfg.toy = false;
  cfg.weights_manifest = exported_assets();
  const RunOutcome out = execute(cfg, NullLandmarkProvider{});
  const auto m = nlohmann::json::parse(slurp(out.manifest));
  bool has_encoder = false;
  for (const auto& a : m["assets"]) has_encoder |= a["role"] == "encoder:ortho";
  CHECK(has_encoder);
}

TEST_CASE("batch runs are independent") {
  const fs::path dir = scratch("batch");
  std::vector<ProjectionConfig> cfgs;
  for (int i = 0; i < 3; ++i) {
    ProjectionConfig c = quick_config(dir);
    c.stage1_iterations = 1;
    c.stage2_iterations = 1;
    c.output_dir = dir / ("out" + std::to_string(i));
    cfgs.push_back(c);
  }
  cfgs[1].input = dir / "missing.png";
  CHECK(run_batch(cfgs, NullLandmarkProvider{}, 2) == 5);
  CHECK(fs::exists(dir / "out0" / "final.png"));
  CHECK(fs::exists(dir / "out2" / "final.png"));
  CHECK(slurp(dir / "out0" / "codes.rpwc") == slurp(dir / "out2" / "codes.rpwc"));
}

#ifdef REPHOTO_CLI
TEST_CASE("command line") {
  const fs::path dir = scratch("cli");
  const fs::path photo = toy_photo(dir);
  auto sh = [](const std::string& cmd) {
    const int s = std::system((cmd + " >/dev/null 2>&1").c_str());
    return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
  };
  const std::string exe = REPHOTO_CLI;
  CHECK(sh(exe + " --no-such-flag") == 2);
  CHECK(sh(exe + " --toy --input " + photo.string() + " --output-dir " + dir.string() + " --film sepia") == 2);

  // Flags win over the config file.
  std::ofstream(dir / "run.ini") << "film = pan\nstage1-iters = 0\nstage2-iters = 0\ntoy = true\n"
                                    "toy-encoder-samples = 4\ntoy-encoder-epochs = 1\nsigma = 1\n";
  CHECK(sh(exe + " --config " + (dir / "run.ini").string() + " --input " + photo.string() + " --output-dir " +
           (dir / "out").string() + " --film ortho") == 0);
  const auto m = nlohmann::json::parse(slurp(dir / "out" / "run_manifest.json"));
  CHECK(m["config"]["film"] == "ortho");
  CHECK(m["config"]["sigma"] == 1.0);
  CHECK(m["config"]["toy_encoder"]["samples"] == 4);

  CHECK(sh(exe + " replay " + (dir / "out" / "run_manifest.json").string() + " --output-dir " +
           (dir / "replay").string()) == 0);
  CHECK(slurp(dir / "out" / "final.png") == slurp(dir / "replay" / "final.png"));
}
#endif
