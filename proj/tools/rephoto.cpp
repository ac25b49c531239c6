// Command-line front end: projection runs, batch fan-out, replay, encoder
// training and toy asset export.

#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rephoto/pipeline.hpp"

namespace fs = std::filesystem;
using namespace rephoto;

namespace {

struct RunFlags {
  std::string input, output_dir, film, eyes, weights_manifest, batch;
  std::optional<int> year, stage1, stage2;
  double sigma = 0.0;
  bool toy = false, diagnostic = false;
  uint64_t seed = 0;
  int jobs = 1;
  ToyEncoderSettings toy_encoder;
};

ProjectionConfig to_config(const RunFlags& f) {
  ProjectionConfig cfg;
  cfg.input = f.input;
  cfg.output_dir = f.output_dir;
  if (!f.film.empty()) cfg.film = parse_film(f.film);
  cfg.year = f.year;
  cfg.sigma = f.sigma;
  if (!f.eyes.empty()) cfg.eyes = f.eyes;
  cfg.toy = f.toy;
  if (!f.weights_manifest.empty()) cfg.weights_manifest = f.weights_manifest;
  cfg.stage1_iterations = f.stage1;
  cfg.stage2_iterations = f.stage2;
  cfg.seed = f.seed;
  cfg.diagnostic = f.diagnostic;
  cfg.toy_encoder = f.toy_encoder;
  return cfg;
}

// One input path per line; each run writes to <output-dir>/<input stem>.
std::vector<ProjectionConfig> batch_configs(const RunFlags& f) {
  std::ifstream in(f.batch);
  if (!in) throw PipelineError(ExitCode::Usage, "cannot read batch list " + f.batch);
  std::vector<ProjectionConfig> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    RunFlags one = f;
    one.input = line;
    one.output_dir = (fs::path(f.output_dir) / fs::path(line).stem()).string();
    out.push_back(to_config(one));
  }
  if (out.empty()) throw PipelineError(ExitCode::Usage, "batch list " + f.batch + " is empty");
  return out;
}

int train_encoder_command(const std::string& film_name, const std::string& generator_path, bool toy,
                          const std::string& out, int samples, int epochs, int batch, double lr,
                          uint64_t seed, const std::string& checkpoint_dir) {
  const FilmModel film = *parse_film(film_name);
  const Generator gen = toy ? Generator::toy(7) : Generator::load(generator_path);
  const EncoderArchitecture arch = toy ? EncoderArchitecture::toy() : EncoderArchitecture::resnet18();
  EncoderTrainConfig cfg = EncoderTrainConfig::for_film(film);
  if (samples > 0) cfg.sample_count = samples;
  if (epochs > 0) cfg.epochs = epochs;
  if (batch > 0) cfg.batch_size = batch;
  if (lr > 0) cfg.learning_rate = lr;
  cfg.validate();
  const TrainingSet pairs(gen, film, cfg, seed, arch.input_resolution);
  // Progress goes to stdout as one JSON record per line.
  TrainOptions options;
  options.seed = seed + 2;
  options.on_step = [](const TrainingRecord& r) {
    std::cout << nlohmann::ordered_json{{"epoch", r.epoch}, {"step", r.step}, {"l1", r.l1}}.dump() << "\n";
  };
  options.on_epoch = [](int epoch, double l1) {
    std::cout << nlohmann::ordered_json{{"epoch", epoch}, {"mean_l1", l1}}.dump() << std::endl;
  };
  if (!checkpoint_dir.empty()) options.checkpoint_dir = checkpoint_dir;
  const Encoder enc = train_encoder(pairs, Encoder::init(arch, film, seed + 1), options);
  enc.save(out);

  nlohmann::ordered_json dataset{
      {"film", std::string(to_string(film))},
      {"generator", toy ? "toy" : generator_path},
      {"seed", seed},
      {"sample_count", cfg.sample_count},
      {"input_resolution", arch.input_resolution},
      {"latent_distribution", "mapping of z ~ N(0, I), no truncation"},
      {"augmentation", {{"order", "brightness, contrast, hue, then grayscale"},
                        {"brightness", {cfg.brightness.first, cfg.brightness.second}},
                        {"contrast", {cfg.contrast.first, cfg.contrast.second}},
                        {"hue", {cfg.hue.first, cfg.hue.second}}}},
      {"batch_size", cfg.batch_size},
      {"learning_rate", cfg.learning_rate},
      {"epochs", cfg.epochs},
      {"encoder_sha256", sha256_file(out)}};
  std::ofstream(out + ".dataset.json") << dataset.dump(2) << "\n";
  std::cerr << "wrote " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Recover a color portrait from an antique photograph by latent projection."};
  app.set_config("--config", "", "Key-value config file mirroring the flags (flags win)");
  app.require_subcommand(0, 1);

  RunFlags f;
  app.add_option("--input", f.input, "Pre-aligned portrait (PNG)");
  app.add_option("--output-dir", f.output_dir, "Directory for the run artifacts");
  app.add_option("--film", f.film, "Film model; default from --year, else pan")
      ->check(CLI::IsMember({"blue", "ortho", "pan"}));
  app.add_option("--year", f.year, "Year the photo was taken");
  app.add_option("--sigma", f.sigma, "Gaussian blur sigma in pixels, [0,16]");
  app.add_option("--eyes", f.eyes, "\"x0,y0,x1,y1;x0,y0,x1,y1\" or detect");
  app.add_flag("--toy", f.toy, "Use the bundled toy generator and backbones");
  app.add_option("--seed", f.seed, "Seed for the latent noise ramp");
  app.add_option("--stage1-iters", f.stage1, "Override stage 1 iterations");
  app.add_option("--stage2-iters", f.stage2, "Override stage 2 iterations");
  app.add_option("--weights-manifest", f.weights_manifest, "JSON manifest of weight files");
  app.add_flag("--diagnostic", f.diagnostic, "Write the ToRGB diagnostic");
  app.add_option("--toy-encoder-samples", f.toy_encoder.samples, "Pairs for the toy-mode encoder");
  app.add_option("--toy-encoder-epochs", f.toy_encoder.epochs, "Epochs for the toy-mode encoder");
  app.add_option("--batch", f.batch, "File with one input path per line");
  app.add_option("--jobs", f.jobs, "Parallel runs for --batch")->check(CLI::PositiveNumber);

  auto* replay = app.add_subcommand("replay", "Rerun a recorded run manifest");
  std::string replay_manifest, replay_out;
  replay->add_option("manifest", replay_manifest, "run_manifest.json")->required();
  replay->add_option("--output-dir", replay_out, "Where to write the rerun")->required();

  auto* train = app.add_subcommand("train-encoder", "Train a sibling encoder for one film");
  std::string train_film = "pan", train_gen, train_out, train_ckpt;
  bool train_toy = false;
  int samples = 0, epochs = 0, batch = 0;
  double lr = 0;
  uint64_t train_seed = 11;
  train->add_option("--film", train_film)->check(CLI::IsMember({"blue", "ortho", "pan"}));
  train->add_option("--generator", train_gen, "Generator weights");
  train->add_flag("--toy", train_toy, "Toy generator and toy encoder architecture");
  train->add_option("--out", train_out, "Encoder checkpoint to write")->required();
  train->add_option("--samples", samples, "Training pairs (default per film)");
  train->add_option("--epochs", epochs, "Epochs (default per film)");
  train->add_option("--batch-size", batch);
  train->add_option("--lr", lr);
  train->add_option("--seed", train_seed);
  train->add_option("--checkpoint-dir", train_ckpt, "Write a checkpoint after every epoch");

  auto* export_toy = app.add_subcommand("export-toy", "Write toy weights and a manifest");
  std::string export_dir;
  ToyEncoderSettings toy_settings;
  export_toy->add_option("--output-dir", export_dir)->required();
  export_toy->add_option("--samples", toy_settings.samples);
  export_toy->add_option("--epochs", toy_settings.epochs);
  export_toy->add_option("--seed", toy_settings.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ExitCode::Usage);
  }

  const NullLandmarkProvider provider;
  try {
    if (*replay) return run(config_from_run_manifest(replay_manifest, replay_out), provider);
    if (*train) {
      if (!train_toy && train_gen.empty())
        throw PipelineError(ExitCode::Usage, "train-encoder needs --generator or --toy");
      return train_encoder_command(train_film, train_gen, train_toy, train_out, samples, epochs, batch, lr,
                                   train_seed, train_ckpt);
    }
    if (*export_toy) {
      std::cout << "wrote " << export_toy_assets(export_dir, toy_settings).string() << "\n";
      return 0;
    }
    if (!f.batch.empty()) return run_batch(batch_configs(f), provider, f.jobs);
    return run(to_config(f), provider);
  } catch (const PipelineError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.code);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::Failure);
  }
}
