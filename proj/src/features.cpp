#include "rephoto/features.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

#include "rephoto/imagecore.hpp"

namespace rephoto {
namespace {

std::string join(const std::vector<int>& v) {
  std::ostringstream os;
  for (size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

template <typename T>
std::vector<T> split(const std::string& s) {
  std::vector<T> out;
  std::istringstream is(s);
  std::string tok;
  while (std::getline(is, tok, ',')) {
    std::istringstream ts(tok);
    T v;
    if (!(ts >> v)) throw FormatError("malformed list '" + s + "'");
    out.push_back(v);
  }
  return out;
}

std::string conv_key(int b, int i) { return "conv" + std::to_string(b) + "_" + std::to_string(i); }

}  // namespace

const ad::Var& FeatureSet::get(const std::string& name) const {
  for (const auto& [n, v] : layers)
    if (n == name) return v;
  throw std::out_of_range("feature set has no layer '" + name + "'");
}

std::vector<std::string> FeatureSet::names() const {
  std::vector<std::string> out;
  for (const auto& l : layers) out.push_back(l.first);
  return out;
}

Backbone::Architecture Backbone::vgg16_architecture(std::string id) {
  Architecture a;
  a.id = std::move(id);
  a.convs_per_block = {2, 2, 3, 3, 3};
  a.widths = {64, 128, 256, 512, 512};
  a.mean = {0.485, 0.456, 0.406};
  a.std = {0.229, 0.224, 0.225};
  return a;
}

Backbone::Architecture Backbone::vgg19_architecture(std::string id) {
  Architecture a = vgg16_architecture(std::move(id));
  a.convs_per_block = {2, 2, 4, 4, 4};
  return a;
}

Backbone::Backbone(Architecture arch, TensorFile weights)
    : arch_(std::move(arch)), weights_(std::move(weights)) {
  if (arch_.convs_per_block.size() != arch_.widths.size() || arch_.widths.empty())
    throw FormatError("backbone '" + arch_.id + "' has inconsistent block description");
  int in = 3;
  for (size_t b = 0; b < arch_.widths.size(); ++b) {
    for (int i = 1; i <= arch_.convs_per_block[b]; ++i) {
      const std::string conv = conv_key(static_cast<int>(b + 1), i);
      weights_.tensor(conv + ".weight", arch_.widths[b], in * 9);
      weights_.tensor(conv + ".bias", arch_.widths[b], 1);
      names_.push_back(conv);
      names_.push_back("relu" + conv.substr(4));
      in = arch_.widths[b];
    }
    names_.push_back("pool" + std::to_string(b + 1));
  }
}

Backbone Backbone::toy(std::string id, uint64_t seed, InputConvention input) {
  Architecture a;
  a.id = std::move(id);
  a.convs_per_block = {2, 2, 2};
  a.widths = {8, 16, 16};
  if (input == InputConvention::Caffe) {
    a.input_scale = 255.0;
    a.mean = {129.186, 104.762, 93.594};
  } else {
    a.mean = {0.485, 0.456, 0.406};
    a.std = {0.229, 0.224, 0.225};
  }
  std::mt19937_64 rng(seed);
  TensorFile w;
  int in = 3;
  for (size_t b = 0; b < a.widths.size(); ++b) {
    for (int i = 1; i <= a.convs_per_block[b]; ++i) {
      const int out = a.widths[b];
      std::normal_distribution<double> wn(0.0, std::sqrt(2.0 / (in * 9)));
      std::normal_distribution<double> bn(0.0, 0.1);
      ad::Mat weight(out, in * 9), bias(out, 1);
      for (ad::Index k = 0; k < weight.size(); ++k) weight.data()[k] = wn(rng);
      for (ad::Index k = 0; k < bias.size(); ++k) bias.data()[k] = bn(rng);
      const std::string conv = conv_key(static_cast<int>(b + 1), i);
      w.tensors[conv + ".weight"] = std::move(weight);
      w.tensors[conv + ".bias"] = std::move(bias);
      in = out;
    }
  }
  return Backbone(std::move(a), std::move(w));
}

Backbone Backbone::load(const std::filesystem::path& path) {
  TensorFile w = TensorFile::load(path);
  if (w.meta_value("kind") != "backbone")
    throw FormatError(path.string() + " is not a backbone weight file");
  Architecture a;
  a.id = w.meta_value("id");
  a.convs_per_block = split<int>(w.meta_value("convs_per_block"));
  a.widths = split<int>(w.meta_value("widths"));
  a.input_scale = std::stod(w.meta_value("input_scale"));
  const auto mean = split<double>(w.meta_value("mean"));
  const auto sd = split<double>(w.meta_value("std"));
  if (mean.size() != 3 || sd.size() != 3) throw FormatError("backbone normalization needs 3 values");
  std::copy(mean.begin(), mean.end(), a.mean.begin());
  std::copy(sd.begin(), sd.end(), a.std.begin());
  a.bgr = w.meta_value("channel_order") == "bgr";
  return Backbone(std::move(a), std::move(w));
}

TensorFile Backbone::checkpoint() const {
  TensorFile w = weights_;
  w.meta["kind"] = "backbone";
  w.meta["id"] = arch_.id;
  w.meta["convs_per_block"] = join(arch_.convs_per_block);
  w.meta["widths"] = join(arch_.widths);
  std::ostringstream num;
  num.precision(17);
  num << arch_.input_scale;
  w.meta["input_scale"] = num.str();
  auto triple = [](const std::array<double, 3>& v) {
    std::ostringstream os;
    os.precision(17);
    os << v[0] << "," << v[1] << "," << v[2];
    return os.str();
  };
  w.meta["mean"] = triple(arch_.mean);
  w.meta["std"] = triple(arch_.std);
  w.meta["channel_order"] = arch_.bgr ? "bgr" : "rgb";
  return w;
}

void Backbone::save(const std::filesystem::path& path) const { checkpoint().save(path); }

bool Backbone::has_layer(const std::string& name) const {
  return std::find(names_.begin(), names_.end(), name) != names_.end();
}

int Backbone::min_input_size(const std::vector<std::string>& layers) const {
  int pools = 0;
  for (const auto& name : layers) {
    if (!has_layer(name)) throw std::invalid_argument("backbone '" + id() + "' has no layer '" + name + "'");
    const auto pos = std::find(names_.begin(), names_.end(), name) - names_.begin();
    int p = 0;
    for (long i = 0; i <= pos; ++i)
      if (names_[static_cast<size_t>(i)].rfind("pool", 0) == 0) ++p;
    pools = std::max(pools, p);
  }
  return 1 << pools;
}

FeatureSet Backbone::extract(const ad::Var& img, const std::vector<std::string>& layers) const {
  const int min_size = min_input_size(layers);
  if (img.height() < min_size || img.width() < min_size)
    throw std::invalid_argument("input " + std::to_string(img.width()) + "x" +
                                std::to_string(img.height()) + " is below the minimum " +
                                std::to_string(min_size) + " for backbone '" + id() + "'");
  ad::Var x = replicate_channels(img, 3);
  ad::Mat perm = ad::Mat::Identity(3, 3);
  if (arch_.bgr) perm = perm.colwise().reverse().eval();
  ad::Mat scale = ad::Mat::Zero(3, 3);
  ad::Mat shift(3, 1);
  for (int c = 0; c < 3; ++c) {
    scale(c, c) = arch_.input_scale / arch_.std[static_cast<size_t>(c)];
    shift(c, 0) = -arch_.mean[static_cast<size_t>(c)] / arch_.std[static_cast<size_t>(c)];
  }
  // Channel permutation then affine normalization as one 3x3 map.
  x = ad::matmul(ad::constant(scale * perm), x) + ad::constant(shift);

  FeatureSet out;
  out.backbone = id();
  std::vector<std::pair<std::string, ad::Var>> found;
  size_t remaining = layers.size();
  auto capture = [&](const std::string& name, const ad::Var& v) {
    if (std::find(layers.begin(), layers.end(), name) != layers.end()) {
      found.emplace_back(name, v);
      --remaining;
    }
  };
  for (size_t b = 0; b < arch_.widths.size() && remaining > 0; ++b) {
    for (int i = 1; i <= arch_.convs_per_block[b] && remaining > 0; ++i) {
      const std::string conv = conv_key(static_cast<int>(b + 1), i);
      x = ad::conv2d(x, ad::constant(weights_.tensor(conv + ".weight")), 3, 1, 1) +
          ad::constant(weights_.tensor(conv + ".bias"));
      capture(conv, x);
      x = ad::relu(x);
      capture("relu" + conv.substr(4), x);
    }
    if (remaining == 0) break;
    x = ad::max_pool(x, 2, 2, 0);
    capture("pool" + std::to_string(b + 1), x);
  }
  for (const auto& name : layers)
    for (const auto& f : found)
      if (f.first == name) out.layers.push_back(f);
  return out;
}

}  // namespace rephoto
