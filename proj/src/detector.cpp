#include "smoothtail/detector.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "smoothtail/rng.hpp"

namespace smoothtail {

namespace {

constexpr char kMagic[8] = {'S', 'T', 'C', 'K', 'P', 'T', '0', '1'};

Matrix xavier(int in, int out, Rng& rng) {
  const double bound = std::sqrt(6.0 / (in + out));
  Matrix m(in, out);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = static_cast<float>(rng.uniform(-bound, bound));
  }
  return m;
}

double logit(double p) { return std::log(p / (1.0 - p)); }

// DETR-style normalized 2-D sine embedding: first half encodes y, second x.
Matrix sine_embedding(int height, int width, int dim) {
  const int half = dim / 2;
  Matrix pos(height * width, dim);
  auto encode = [&](double coord, int offset, Eigen::Index row) {
    for (int k = 0; k < half; ++k) {
      const double freq = std::pow(10000.0, 2.0 * (k / 2) / half);
      const double v = coord / freq;
      pos(row, offset + k) = static_cast<float>(k % 2 == 0 ? std::sin(v) : std::cos(v));
    }
  };
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const Eigen::Index row = static_cast<Eigen::Index>(y) * width + x;
      encode((y + 1.0) / height * 2.0 * M_PI, 0, row);
      encode((x + 1.0) / width * 2.0 * M_PI, half, row);
    }
  }
  return pos;
}

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

nlohmann::json config_to_json(const DetectorConfig& c) {
  nlohmann::json backbone = nlohmann::json::array();
  for (const auto& s : c.backbone) backbone.push_back({{"channels", s.channels}, {"stride", s.stride}});
  return {{"image_size", c.image_size},       {"backbone", backbone},
          {"feature_dim", c.feature_dim},     {"num_queries", c.num_queries},
          {"num_classes", c.num_classes},     {"num_heads", c.num_heads},
          {"encoder_layers", c.encoder_layers}, {"decoder_layers", c.decoder_layers},
          {"ffn_dim", c.ffn_dim},             {"locality_sigma", c.locality_sigma},
          {"prior_prob", c.prior_prob},       {"init_box_size", c.init_box_size},
          {"seed", c.seed}};
}

DetectorConfig config_from_json(const nlohmann::json& j) {
  DetectorConfig c;
  c.image_size = j.at("image_size");
  c.backbone.clear();
  for (const auto& s : j.at("backbone")) c.backbone.push_back({s.at("channels"), s.at("stride")});
  c.feature_dim = j.at("feature_dim");
  c.num_queries = j.at("num_queries");
  c.num_classes = j.at("num_classes");
  c.num_heads = j.at("num_heads");
  c.encoder_layers = j.at("encoder_layers");
  c.decoder_layers = j.at("decoder_layers");
  c.ffn_dim = j.at("ffn_dim");
  c.locality_sigma = j.at("locality_sigma");
  c.prior_prob = j.at("prior_prob");
  c.init_box_size = j.at("init_box_size");
  c.seed = j.at("seed");
  return c;
}

}  // namespace

void validate(const DetectorConfig& c) {
  if (c.feature_dim < 1 || c.num_queries < 1 || c.num_classes < 1) {
    throw std::invalid_argument("detector: feature_dim, num_queries and num_classes must be >= 1");
  }
  if (c.num_heads < 1 || c.feature_dim % c.num_heads != 0 || c.feature_dim % 4 != 0) {
    throw std::invalid_argument("detector: feature_dim must be divisible by num_heads and by 4");
  }
  if (c.backbone.empty() || c.image_size < 4) {
    throw std::invalid_argument("detector: backbone needs at least one stage");
  }
  for (const auto& s : c.backbone) {
    if (s.channels < 1 || (s.stride != 1 && s.stride != 2)) {
      throw std::invalid_argument("detector: backbone stages need channels >= 1, stride 1 or 2");
    }
  }
  if (c.encoder_layers < 0 || c.decoder_layers < 1 || c.ffn_dim < 1) {
    throw std::invalid_argument("detector: need >= 1 decoder layer");
  }
  if (!(c.prior_prob > 0 && c.prior_prob < 1) || !(c.init_box_size > 0 && c.init_box_size < 1)) {
    throw std::invalid_argument("detector: prior_prob and init_box_size must lie in (0, 1)");
  }
}

int DetectorModel::add_param(std::string name, ParamGroup group, Matrix value) {
  Parameter p;
  p.name = std::move(name);
  p.group = group;
  p.value = std::move(value);
  params_.push_back(std::move(p));
  return static_cast<int>(params_.size()) - 1;
}

DetectorModel::LinearIdx DetectorModel::add_linear(const std::string& name, ParamGroup group,
                                                   int in, int out, Rng& rng) {
  LinearIdx idx;
  idx.weight = add_param(name + ".weight", group, xavier(in, out, rng));
  idx.bias = add_param(name + ".bias", group, Matrix::Zero(1, out));
  return idx;
}

DetectorModel::NormIdx DetectorModel::add_norm(const std::string& name, ParamGroup group, int dim) {
  NormIdx idx;
  idx.gamma = add_param(name + ".gamma", group, Matrix::Ones(1, dim));
  idx.beta = add_param(name + ".beta", group, Matrix::Zero(1, dim));
  return idx;
}

DetectorModel::AttentionIdx DetectorModel::add_attention(const std::string& name, Rng& rng) {
  const int d = config_.feature_dim;
  constexpr auto g = ParamGroup::kClassAgnostic;
  return AttentionIdx{add_linear(name + ".q", g, d, d, rng), add_linear(name + ".k", g, d, d, rng),
                      add_linear(name + ".v", g, d, d, rng),
                      add_linear(name + ".out", g, d, d, rng)};
}

DetectorModel::DetectorModel(DetectorConfig config) : config_(std::move(config)) {
  validate(config_);
  Rng rng(mix_seed(config_.seed, 0x6d6f64656cULL));
  const int d = config_.feature_dim;
  constexpr auto agnostic = ParamGroup::kClassAgnostic;
  constexpr auto specific = ParamGroup::kClassSpecific;

  int channels = 3;
  int size = config_.image_size;
  for (std::size_t i = 0; i < config_.backbone.size(); ++i) {
    const auto& stage = config_.backbone[i];
    LinearIdx conv;
    const double bound = std::sqrt(6.0 / (9.0 * channels));  // He-uniform for ReLU
    Matrix w(9 * channels, stage.channels);
    for (Eigen::Index k = 0; k < w.size(); ++k) {
      w.data()[k] = static_cast<float>(rng.uniform(-bound, bound));
    }
    const std::string name = "backbone.conv" + std::to_string(i);
    conv.weight = add_param(name + ".weight", agnostic, std::move(w));
    conv.bias = add_param(name + ".bias", agnostic, Matrix::Zero(1, stage.channels));
    backbone_.push_back(conv);
    channels = stage.channels;
    size = (size + 2 - 3) / stage.stride + 1;
  }
  feature_height_ = feature_width_ = size;

  input_proj_ = add_linear("input_proj", specific, channels, d, rng);

  for (int l = 0; l < config_.encoder_layers; ++l) {
    const std::string name = "encoder.layer" + std::to_string(l);
    EncoderLayer layer;
    layer.attn = add_attention(name + ".attn", rng);
    layer.norm1 = add_norm(name + ".norm1", agnostic, d);
    layer.ffn1 = add_linear(name + ".ffn1", agnostic, d, config_.ffn_dim, rng);
    layer.ffn2 = add_linear(name + ".ffn2", agnostic, config_.ffn_dim, d, rng);
    layer.norm2 = add_norm(name + ".norm2", agnostic, d);
    encoder_.push_back(layer);
  }
  for (int l = 0; l < config_.decoder_layers; ++l) {
    const std::string name = "decoder.layer" + std::to_string(l);
    DecoderLayer layer;
    layer.self_attn = add_attention(name + ".self_attn", rng);
    layer.norm1 = add_norm(name + ".norm1", agnostic, d);
    layer.cross_attn = add_attention(name + ".cross_attn", rng);
    layer.norm2 = add_norm(name + ".norm2", agnostic, d);
    layer.ffn1 = add_linear(name + ".ffn1", agnostic, d, config_.ffn_dim, rng);
    layer.ffn2 = add_linear(name + ".ffn2", agnostic, config_.ffn_dim, d, rng);
    layer.norm3 = add_norm(name + ".norm3", agnostic, d);
    decoder_.push_back(layer);
  }

  const int nq = config_.num_queries;
  Matrix qpos(nq, d), qcontent(nq, d);
  for (Eigen::Index k = 0; k < qpos.size(); ++k) qpos.data()[k] = static_cast<float>(rng.normal());
  for (Eigen::Index k = 0; k < qcontent.size(); ++k) {
    qcontent.data()[k] = static_cast<float>(rng.normal());
  }
  query_pos_ = add_param("query.pos", agnostic, std::move(qpos));
  query_content_ = add_param("query.content", agnostic, std::move(qcontent));

  class_head_ = add_linear("class_head", specific, d, config_.num_classes, rng);
  params_[class_head_.bias].value.setConstant(
      static_cast<float>(-std::log((1.0 - config_.prior_prob) / config_.prior_prob)));

  box1_ = add_linear("box_head.fc1", agnostic, d, d, rng);
  box2_ = add_linear("box_head.fc2", agnostic, d, d, rng);
  box3_ = add_linear("box_head.fc3", agnostic, d, 4, rng);
  params_[box3_.weight].value.setZero();

  // Fixed reference points on a near-square grid.
  const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(nq))));
  const int rows = (nq + cols - 1) / cols;
  reference_.resize(nq, 2);
  box_prior_.resize(nq, 4);
  for (int q = 0; q < nq; ++q) {
    const double rx = (q % cols + 0.5) / cols;
    const double ry = (q / cols + 0.5) / rows;
    reference_(q, 0) = static_cast<float>(rx);
    reference_(q, 1) = static_cast<float>(ry);
    box_prior_(q, 0) = static_cast<float>(logit(rx));
    box_prior_(q, 1) = static_cast<float>(logit(ry));
    box_prior_(q, 2) = box_prior_(q, 3) = static_cast<float>(logit(config_.init_box_size));
  }

  pos_embed_ = sine_embedding(feature_height_, feature_width_, d);
  cross_bias_ = Matrix::Zero(nq, static_cast<Eigen::Index>(feature_height_) * feature_width_);
  if (config_.locality_sigma > 0) {
    const double denom = 2.0 * config_.locality_sigma * config_.locality_sigma;
    for (int q = 0; q < nq; ++q) {
      for (int y = 0; y < feature_height_; ++y) {
        for (int x = 0; x < feature_width_; ++x) {
          const double dx = (x + 0.5) / feature_width_ - reference_(q, 0);
          const double dy = (y + 0.5) / feature_height_ - reference_(q, 1);
          cross_bias_(q, y * feature_width_ + x) = static_cast<float>(-(dx * dx + dy * dy) / denom);
        }
      }
    }
  }
  set_trainable(TrainableSet::kAll);
}

void DetectorModel::set_trainable(TrainableSet set) {
  trainable_ = set;
  for (auto& p : params_) {
    p.trainable = set == TrainableSet::kAll || p.group == ParamGroup::kClassSpecific;
    p.grad.resize(0, 0);
  }
}

std::size_t DetectorModel::parameter_count(std::optional<ParamGroup> group) const {
  std::size_t n = 0;
  for (const auto& p : params_) {
    if (!group || p.group == *group) n += static_cast<std::size_t>(p.value.size());
  }
  return n;
}

std::uint64_t DetectorModel::parameter_hash(std::optional<ParamGroup> group) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params_) {
    if (group && p.group != *group) continue;
    h = fnv1a(h, p.name.data(), p.name.size());
    h = fnv1a(h, p.value.data(), sizeof(float) * static_cast<std::size_t>(p.value.size()));
  }
  return h;
}

std::vector<float> DetectorModel::flatten(ParamGroup group) const {
  std::vector<float> out;
  for (const auto& p : params_) {
    if (p.group == group) out.insert(out.end(), p.value.data(), p.value.data() + p.value.size());
  }
  return out;
}

DetectorModel::Graph DetectorModel::build(Tape& tape, const Image& image, bool record_grads) {
  return build_impl(tape, image, record_grads);
}

DetectorModel::Graph DetectorModel::build(Tape& tape, const Image& image) const {
  // Without gradient recording the leaves only read parameter values.
  return const_cast<DetectorModel*>(this)->build_impl(tape, image, false);
}

Tape::Var DetectorModel::classify(Tape& tape, Tape::Var queries, bool record_grads) {
  auto leaf = [&](int idx) {
    return record_grads ? tape.param(params_[idx]) : tape.ref(params_[idx].value);
  };
  return tape.linear(queries, leaf(class_head_.weight), leaf(class_head_.bias));
}

DetectorModel::Graph DetectorModel::build_impl(Tape& tape, const Image& image, bool record_grads) {
  if (image.width != config_.image_size || image.height != config_.image_size) {
    throw std::invalid_argument("detector: image is " + std::to_string(image.width) + "x" +
                                std::to_string(image.height) + ", model expects " +
                                std::to_string(config_.image_size));
  }
  auto leaf = [&](int idx) {
    return record_grads ? tape.param(params_[idx]) : tape.ref(params_[idx].value);
  };
  auto linear = [&](Tape::Var x, const LinearIdx& l) {
    return tape.linear(x, leaf(l.weight), leaf(l.bias));
  };
  auto norm = [&](Tape::Var x, const NormIdx& n) {
    return tape.layer_norm(x, leaf(n.gamma), leaf(n.beta));
  };
  const int heads = config_.num_heads;

  Matrix pixels = Eigen::Map<const Matrix>(image.pixels.data(),
                                           static_cast<Eigen::Index>(image.height) * image.width, 3);
  Tape::Var x = tape.constant(std::move(pixels));
  int h = image.height, w = image.width;
  for (std::size_t i = 0; i < backbone_.size(); ++i) {
    const int stride = config_.backbone[i].stride;
    x = tape.relu(tape.conv3x3(x, h, w, leaf(backbone_[i].weight), leaf(backbone_[i].bias), stride));
    h = (h + 2 - 3) / stride + 1;
    w = (w + 2 - 3) / stride + 1;
  }

  Graph g;
  g.features = linear(x, input_proj_);
  Tape::Var pos = tape.ref(pos_embed_);

  Tape::Var memory = g.features;
  for (const auto& layer : encoder_) {
    Tape::Var qk_in = tape.add(memory, pos);
    Tape::Var attn = tape.attention(linear(qk_in, layer.attn.q), linear(qk_in, layer.attn.k),
                                    linear(memory, layer.attn.v), heads);
    memory = norm(tape.add(memory, linear(attn, layer.attn.out)), layer.norm1);
    Tape::Var ffn = linear(tape.relu(linear(memory, layer.ffn1)), layer.ffn2);
    memory = norm(tape.add(memory, ffn), layer.norm2);
  }

  Tape::Var memory_pos = tape.add(memory, pos);
  Tape::Var qpos = leaf(query_pos_);
  Tape::Var tgt = leaf(query_content_);
  for (const auto& layer : decoder_) {
    Tape::Var q_in = tape.add(tgt, qpos);
    Tape::Var self = tape.attention(linear(q_in, layer.self_attn.q), linear(q_in, layer.self_attn.k),
                                    linear(tgt, layer.self_attn.v), heads);
    tgt = norm(tape.add(tgt, linear(self, layer.self_attn.out)), layer.norm1);
    Tape::Var cross = tape.attention(
        linear(tape.add(tgt, qpos), layer.cross_attn.q), linear(memory_pos, layer.cross_attn.k),
        linear(memory, layer.cross_attn.v), heads,
        config_.locality_sigma > 0 ? &cross_bias_ : nullptr);
    tgt = norm(tape.add(tgt, linear(cross, layer.cross_attn.out)), layer.norm2);
    Tape::Var ffn = linear(tape.relu(linear(tgt, layer.ffn1)), layer.ffn2);
    tgt = norm(tape.add(tgt, ffn), layer.norm3);
  }
  g.queries = tgt;
  g.logits = classify(tape, g.queries, record_grads);

  Tape::Var b = tape.relu(linear(g.queries, box1_));
  b = tape.relu(linear(b, box2_));
  b = linear(b, box3_);
  g.boxes = tape.sigmoid(tape.add_const(b, box_prior_));
  return g;
}

ForwardOutput DetectorModel::forward(const Image& image) const {
  Tape tape;
  Graph g = build(tape, image);
  ForwardOutput out;
  out.feature_height = feature_height_;
  out.feature_width = feature_width_;
  out.features = tape.value(g.features);
  out.query_features = tape.value(g.queries);
  out.class_logits = tape.value(g.logits);
  out.boxes = tape.value(g.boxes);
  return out;
}

std::vector<ForwardOutput> DetectorModel::forward(std::span<const Image> images) const {
  std::vector<ForwardOutput> out;
  out.reserve(images.size());
  for (const auto& img : images) out.push_back(forward(img));
  return out;
}

Matrix DetectorModel::classify_external_queries(const Matrix& query_features) const {
  if (query_features.cols() != config_.feature_dim) {
    throw std::invalid_argument("classify_external_queries: query dimension " +
                                std::to_string(query_features.cols()) + " != model dimension " +
                                std::to_string(config_.feature_dim));
  }
  Tape tape;
  Tape::Var q = tape.ref(query_features);
  Tape::Var logits = const_cast<DetectorModel*>(this)->classify(tape, q, false);
  const Matrix& z = tape.value(logits);
  return (1.0f + (-z.array()).exp()).inverse().matrix();
}

void save_checkpoint(const DetectorModel& model, const std::filesystem::path& path) {
  static_assert(std::endian::native == std::endian::little, "checkpoints are little-endian");
  nlohmann::json header;
  header["config"] = config_to_json(model.config());
  header["parameters"] = nlohmann::json::array();
  for (const auto& p : model.parameters()) {
    header["parameters"].push_back({{"name", std::string(group_name(p.group)) + "/" + p.name},
                                    {"rows", p.value.rows()},
                                    {"cols", p.value.cols()}});
  }
  const std::string text = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof(kMagic));
  const auto len = static_cast<std::uint32_t>(text.size());
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : model.parameters()) {
    out.write(reinterpret_cast<const char*>(p.value.data()),
              static_cast<std::streamsize>(sizeof(float) * p.value.size()));
  }
  if (!out) throw std::runtime_error("write failed for checkpoint " + path.string());
}

DetectorModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error(path.string() + " is not a checkpoint");
  }
  std::uint32_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string text(len, '\0');
  in.read(text.data(), len);
  if (!in) throw std::runtime_error(path.string() + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path.string() + ": bad header: " + e.what());
  }
  DetectorModel model(config_from_json(header.at("config")));
  const auto& table = header.at("parameters");
  auto& params = model.parameters();
  if (table.size() != params.size()) {
    throw std::runtime_error(path.string() + ": parameter table does not match the model layout");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    const std::string expected = std::string(group_name(p.group)) + "/" + p.name;
    if (table[i].at("name") != expected || table[i].at("rows") != p.value.rows() ||
        table[i].at("cols") != p.value.cols()) {
      throw std::runtime_error(path.string() + ": unexpected parameter entry " + table[i].dump());
    }
    in.read(reinterpret_cast<char*>(p.value.data()),
            static_cast<std::streamsize>(sizeof(float) * p.value.size()));
  }
  if (!in) throw std::runtime_error(path.string() + ": truncated parameter data");
  return model;
}

}  // namespace smoothtail
