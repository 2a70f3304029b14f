#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "smoothtail/autograd.hpp"
#include "smoothtail/detector.hpp"
#include "smoothtail/rng.hpp"

using namespace smoothtail;

namespace {

DetectorConfig small_config() {
  DetectorConfig c;
  c.backbone = {{8, 2}, {8, 2}};
  c.feature_dim = 16;
  c.num_queries = 6;
  c.num_classes = 5;
  c.num_heads = 2;
  c.encoder_layers = 1;
  c.decoder_layers = 2;
  c.ffn_dim = 24;
  c.seed = 3;
  return c;
}

Image random_image(Rng& rng, int size = 32) {
  Image img{size, size, std::vector<float>(static_cast<std::size_t>(size * size * 3))};
  for (float& v : img.pixels) v = static_cast<float>(rng.uniform());
  return img;
}

Matrix random_float(Rng& rng, int rows, int cols) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.uniform(-1, 1));
  return m;
}

// Weighted sum of an op's output; the weights make every entry matter.
using Builder = std::function<Tape::Var(Tape&, std::vector<Tape::Var>&)>;

double weighted_output(std::vector<Parameter>& params, const Builder& build, const Matrix& weights,
                       bool backward) {
  Tape tape;
  std::vector<Tape::Var> leaves;
  for (auto& p : params) leaves.push_back(tape.param(p));
  const Tape::Var out = build(tape, leaves);
  if (backward) {
    tape.seed(out, weights);
    tape.backward();
  }
  return tape.value(out).cast<double>().cwiseProduct(weights.cast<double>()).sum();
}

// Float32 forward passes, so the step and tolerance are loose.
void check_gradients(std::vector<Parameter> params, const Builder& build, Rng& rng) {
  Matrix probe_shape;
  {
    Tape tape;
    std::vector<Tape::Var> leaves;
    for (auto& p : params) leaves.push_back(tape.param(p));
    probe_shape = tape.value(build(tape, leaves));
  }
  const Matrix weights = random_float(rng, static_cast<int>(probe_shape.rows()),
                                      static_cast<int>(probe_shape.cols()));
  weighted_output(params, build, weights, true);
  for (auto& p : params) {
    for (int trial = 0; trial < 6; ++trial) {
      const auto i = static_cast<Eigen::Index>(rng.uniform_int(static_cast<std::uint64_t>(p.value.size())));
      const float orig = p.value.data()[i];
      const float h = 1e-2f;
      p.value.data()[i] = orig + h;
      std::vector<Parameter> copy = params;
      const double up = weighted_output(copy, build, weights, false);
      p.value.data()[i] = orig - h;
      copy = params;
      const double down = weighted_output(copy, build, weights, false);
      p.value.data()[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = p.grad.data()[i];
      CHECK(std::abs(numeric - analytic) <= 2e-2 * std::max(1.0, std::abs(numeric)));
    }
  }
}

Parameter make(Rng& rng, int rows, int cols, const std::string& name = "p") {
  return Parameter{name, ParamGroup::kClassAgnostic, random_float(rng, rows, cols), {}, true};
}

}  // namespace

TEST_SUITE("detector") {

TEST_CASE("tape ops match finite differences") {
  Rng rng(77);
  SUBCASE("linear + relu") {
    check_gradients({make(rng, 5, 4), make(rng, 4, 3), make(rng, 1, 3)},
                    [](Tape& t, auto& v) { return t.relu(t.linear(v[0], v[1], v[2])); }, rng);
  }
  SUBCASE("sigmoid and add") {
    check_gradients({make(rng, 3, 3), make(rng, 3, 3)},
                    [](Tape& t, auto& v) { return t.sigmoid(t.add(v[0], v[1])); }, rng);
  }
  SUBCASE("matmul") {
    check_gradients({make(rng, 3, 4), make(rng, 4, 2)},
                    [](Tape& t, auto& v) { return t.matmul(v[0], v[1]); }, rng);
  }
  SUBCASE("layer norm") {
    check_gradients({make(rng, 4, 6), make(rng, 1, 6), make(rng, 1, 6)},
                    [](Tape& t, auto& v) { return t.layer_norm(v[0], v[1], v[2]); }, rng);
  }
  SUBCASE("attention with bias") {
    static const Matrix bias = [] {
      Rng r(5);
      return random_float(r, 3, 5);
    }();
    check_gradients({make(rng, 3, 8), make(rng, 5, 8), make(rng, 5, 8)},
                    [](Tape& t, auto& v) { return t.attention(v[0], v[1], v[2], 2, &bias); }, rng);
  }
  SUBCASE("strided convolution") {
    check_gradients({make(rng, 6 * 6, 2), make(rng, 9 * 2, 3), make(rng, 1, 3)},
                    [](Tape& t, auto& v) { return t.conv3x3(v[0], 6, 6, v[1], v[2], 2); }, rng);
  }
}

TEST_CASE("forward contract") {
  Rng rng(1);
  const DetectorModel model(small_config());
  const Image img = random_image(rng);
  const ForwardOutput out = model.forward(img);
  CHECK(out.class_logits.rows() == 6);
  CHECK(out.class_logits.cols() == 5);
  CHECK(out.boxes.rows() == 6);
  CHECK(out.boxes.cols() == 4);
  CHECK(out.features.rows() == 8 * 8);
  CHECK(out.features.cols() == 16);
  CHECK(out.query_features.cols() == 16);
  CHECK(out.boxes.minCoeff() >= 0.0f);
  CHECK(out.boxes.maxCoeff() <= 1.0f);

  const std::vector<Image> batch{img, random_image(rng), img};
  const auto outs = model.forward(batch);
  CHECK(outs[0].class_logits == outs[2].class_logits);
  CHECK(outs[0].boxes == out.boxes);

  CHECK_THROWS(model.forward(random_image(rng, 16)));
  CHECK_THROWS(DetectorModel(DetectorConfig{.feature_dim = 30}));
}

TEST_CASE("external queries reproduce the model's own classification") {
  Rng rng(2);
  const DetectorModel model(small_config());
  for (int i = 0; i < 20; ++i) {
    const ForwardOutput out = model.forward(random_image(rng));
    const Matrix probs = model.classify_external_queries(out.query_features);
    const Matrix expected = (1.0f + (-out.class_logits.array()).exp()).inverse().matrix();
    CHECK((probs - expected).cwiseAbs().maxCoeff() < 1e-6f);
  }
  CHECK_THROWS(model.classify_external_queries(Matrix::Zero(6, 15)));
}

TEST_CASE("parameter partition") {
  const DetectorModel model(small_config());
  std::size_t specific = 0, agnostic = 0;
  for (const auto& p : model.parameters()) {
    const bool is_specific = p.name.rfind("input_proj.", 0) == 0 || p.name.rfind("class_head.", 0) == 0;
    CHECK((p.group == ParamGroup::kClassSpecific) == is_specific);
    (is_specific ? specific : agnostic) += static_cast<std::size_t>(p.value.size());
  }
  CHECK(specific == model.parameter_count(ParamGroup::kClassSpecific));
  CHECK(agnostic == model.parameter_count(ParamGroup::kClassAgnostic));
  CHECK(specific + agnostic == model.parameter_count());
}

TEST_CASE("frozen parameters receive no gradient") {
  Rng rng(4);
  DetectorModel model(small_config());
  model.set_trainable(TrainableSet::kClassSpecificOnly);
  Tape tape;
  const auto g = model.build(tape, random_image(rng), true);
  tape.seed(g.logits, Matrix::Ones(6, 5));
  tape.seed(g.boxes, Matrix::Ones(6, 4));
  tape.seed(g.features, Matrix::Ones(64, 16));
  tape.backward();
  for (const auto& p : model.parameters()) {
    if (p.group == ParamGroup::kClassAgnostic) {
      CHECK(p.grad.size() == 0);
    } else {
      CHECK(p.grad.size() == p.value.size());
      CHECK(p.grad.cwiseAbs().maxCoeff() > 0.0f);
    }
  }
}

TEST_CASE("full-model gradient spot check") {
  Rng rng(9);
  DetectorModel model(small_config());
  const Image img = random_image(rng);
  const Matrix wl = random_float(rng, 6, 5), wb = random_float(rng, 6, 4);
  auto objective = [&](DetectorModel& m, bool backward) {
    Tape tape;
    const auto g = m.build(tape, img, backward);
    if (backward) {
      tape.seed(g.logits, wl);
      tape.seed(g.boxes, wb);
      tape.backward();
    }
    return tape.value(g.logits).cast<double>().cwiseProduct(wl.cast<double>()).sum() +
           tape.value(g.boxes).cast<double>().cwiseProduct(wb.cast<double>()).sum();
  };
  objective(model, true);
  int checked = 0;
  for (std::size_t pi = 0; pi < model.parameters().size(); pi += 3) {
    Parameter& p = model.parameters()[pi];
    const auto i = static_cast<Eigen::Index>(rng.uniform_int(static_cast<std::uint64_t>(p.value.size())));
    const float orig = p.value.data()[i];
    const float h = 1e-2f;
    p.value.data()[i] = orig + h;
    const double up = objective(model, false);
    p.value.data()[i] = orig - h;
    const double down = objective(model, false);
    p.value.data()[i] = orig;
    const double numeric = (up - down) / (2.0 * h);
    const double analytic = p.grad.size() ? p.grad.data()[i] : 0.0;
    CHECK_MESSAGE(std::abs(numeric - analytic) <= 3e-2 * std::max(1.0, std::abs(numeric)), p.name);
    ++checked;
  }
  CHECK(checked > 10);
}

TEST_CASE("checkpoint round trip") {
  Rng rng(6);
  const DetectorModel model(small_config());
  const auto dir = std::filesystem::temp_directory_path() / "smoothtail_tests";
  std::filesystem::create_directories(dir);
  save_checkpoint(model, dir / "m.ckpt");
  const DetectorModel loaded = load_checkpoint(dir / "m.ckpt");
  CHECK(loaded.parameter_hash() == model.parameter_hash());
  CHECK(loaded.config() == model.config());
  const Image img = random_image(rng);
  CHECK(loaded.forward(img).class_logits == model.forward(img).class_logits);

  std::ofstream(dir / "bad.ckpt", std::ios::binary) << "NOTACKPT";
  CHECK_THROWS(load_checkpoint(dir / "bad.ckpt"));
  CHECK_THROWS(load_checkpoint(dir / "missing.ckpt"));
}

TEST_CASE("snapshot is independent") {
  DetectorModel a(small_config());
  DetectorModel b = a.snapshot();
  b.parameters()[0].value(0, 0) += 1.0f;
  CHECK(a.parameter_hash() != b.parameter_hash());
  CHECK(a.parameter_hash(ParamGroup::kClassSpecific) == b.parameter_hash(ParamGroup::kClassSpecific));
}

}  // TEST_SUITE
