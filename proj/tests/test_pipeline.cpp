#include <algorithm>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "smoothtail/pipeline.hpp"

using namespace smoothtail;

namespace {

struct SmokeFixture {
  RunConfig config = preset_config("smoke", 5);
  RenderedDataset train{make_train_data(config)};
  CategoryPartition partition = partition_head_tail(train.dataset(), config.divisions.front());

  DetectorModel pretrained() {
    return pretrain(train, detector_for(config, train.dataset()),
                    stage_config(config, StageKind::kPretrain), nullptr, config.loss);
  }
};

}  // namespace

TEST_SUITE("pipeline") {

TEST_CASE("stage config validation") {
  StageConfig s;
  CHECK_NOTHROW(validate(s));
  s.epochs = 0;
  CHECK_THROWS_AS(validate(s), StageError);
  s = {};
  s.lr = 0.0;
  CHECK_THROWS_AS(validate(s), StageError);
  s = {};
  s.kind = StageKind::kTransfer;
  s.trainable = TrainableSet::kClassSpecificOnly;
  CHECK_THROWS_AS(validate(s), StageError);  // distillation off
  s.distill = true;
  CHECK_NOTHROW(validate(s));
  s.trainable = TrainableSet::kAll;
  CHECK_THROWS_AS(validate(s), StageError);

  StageConfig d;
  d.lr = 1.0;
  d.decay_epoch = 2;
  CHECK(d.lr_at(1) == 1.0);
  CHECK(d.lr_at(2) == doctest::Approx(0.1));
}

TEST_CASE("presets and config text") {
  for (const auto& name : preset_names()) {
    const RunConfig c = preset_config(name, 3);
    CHECK_NOTHROW(validate(c));
    const RunConfig back = config_from_text(config_to_text(c));
    CHECK(config_to_text(back) == config_to_text(c));
    CHECK(config_fingerprint(back) == config_fingerprint(c));
  }
  const RunConfig full = preset_config("paper-full");
  CHECK(full.pretrain.lr == 2e-4);
  CHECK(full.pretrain.epochs == 50);
  CHECK(full.pretrain.decay_epoch == 40);
  CHECK(full.finetune.lr == 2e-5);
  CHECK(full.finetune.epochs == 1);
  CHECK(full.transfer.epochs == 2);
  CHECK(full.divisions == std::vector<int>{30});
  CHECK(full.loss.feature_distill == 0.1);
  CHECK(full.loss.class_distill == 1.0);

  RunConfig c = preset_config("smoke");
  apply_override(c, "division.thresholds", "20,5");
  CHECK(c.divisions == std::vector<int>{20, 5});
  apply_override(c, "replay.head.tail_quota", "all");
  CHECK_FALSE(c.head_budget.tail.has_value());
  apply_override(c, "transfer.rfs_threshold", "none");
  CHECK_FALSE(c.transfer.rfs_threshold.has_value());
  CHECK_THROWS(apply_override(c, "no.such.key", "1"));
  CHECK_THROWS(apply_override(c, "pretrain.epochs", "three"));
  CHECK_THROWS(preset_config("nope"));

  const auto path = std::filesystem::temp_directory_path() / "smoothtail_tests" / "c.conf";
  std::filesystem::create_directories(path.parent_path());
  std::ofstream(path) << "preset = smoke\n# comment\npretrain.epochs = 3  # trailing\n";
  const RunConfig loaded = load_run_config(path, std::nullopt, 9);
  CHECK(loaded.pretrain.epochs == 3);
  CHECK(loaded.seed == 9);
  CHECK(loaded.data.num_categories == 6);
}

TEST_CASE("stage isolation and teacher fixity") {
  SmokeFixture f;
  const DetectorModel base = f.pretrained();
  const auto scores = score_instances(base, f.train.dataset(), f.train.images());
  ReplaySubset d_head = build_head_dominant(f.train.dataset(), scores, f.partition, f.config.head_budget);
  ReplaySubset d_tail = build_tail_dominant(f.train.dataset(), scores, f.partition, f.config.tail_budget);

  StageLog ft_log{"finetune", {}};
  const DetectorModel expert = finetune_head_expert(
      base, f.train, d_head, stage_config(f.config, StageKind::kFinetune), &ft_log, f.config.loss);
  CHECK(expert.flatten(ParamGroup::kClassAgnostic) == base.flatten(ParamGroup::kClassAgnostic));
  CHECK(expert.parameter_hash(ParamGroup::kClassSpecific) != base.parameter_hash(ParamGroup::kClassSpecific));

  const std::uint64_t teacher_hash = expert.parameter_hash();
  // The student starts as an exact copy of the expert.
  const DetectorModel start = expert.snapshot();
  CHECK(start.forward(f.train.images()[0]).class_logits == expert.forward(f.train.images()[0]).class_logits);

  StageLog kt_log{"transfer", {}};
  const DetectorModel unified =
      knowledge_transfer(expert, f.train, d_tail, f.partition.head,
                         stage_config(f.config, StageKind::kTransfer), &kt_log, f.config.loss);
  CHECK(expert.parameter_hash() == teacher_hash);
  CHECK(unified.flatten(ParamGroup::kClassAgnostic) == base.flatten(ParamGroup::kClassAgnostic));

  for (const auto* log : {&ft_log, &kt_log}) {
    REQUIRE_FALSE(log->entries.empty());
    for (const auto& e : log->entries) {
      CHECK(e.loss.total == e.loss.hungarian + e.loss.weighted_feature + e.loss.weighted_class);
      CHECK(std::isfinite(e.loss.total));
    }
  }
  bool any_distill = false;
  for (const auto& e : kt_log.entries) any_distill |= e.loss.class_distill > 0.0;
  CHECK(any_distill);
}

TEST_CASE("batches without head boxes log zero feature distillation") {
  SmokeFixture f;
  const DetectorModel base = f.pretrained();
  // Only tail annotations are valid, so no image contributes a head box.
  ReplaySubset tail_only;
  std::set<ImageId> images;
  for (const auto& a : f.train.dataset().annotations()) {
    if (f.partition.tail.count(a.category)) {
      tail_only.valid.insert(a.id);
      images.insert(a.image_id);
    }
  }
  REQUIRE_FALSE(images.empty());
  tail_only.images.assign(images.begin(), images.end());
  StageLog log{"transfer", {}};
  knowledge_transfer(base, f.train, tail_only, f.partition.head,
                     stage_config(f.config, StageKind::kTransfer), &log, f.config.loss);
  for (const auto& e : log.entries) CHECK(e.loss.feature_distill == 0.0);
}

TEST_CASE("stage errors") {
  SmokeFixture f;
  const DetectorModel base = f.pretrained();
  CHECK_THROWS_AS(finetune_head_expert(base, f.train, ReplaySubset{},
                                       stage_config(f.config, StageKind::kFinetune)),
                  StageError);
  StageConfig diverge = stage_config(f.config, StageKind::kPretrain);
  diverge.lr = 1e30;
  diverge.grad_clip = 0.0;
  diverge.epochs = 3;
  try {
    pretrain(f.train, detector_for(f.config, f.train.dataset()), diverge);
    // Adam's step is bounded, so divergence is not guaranteed; reaching here is fine.
  } catch (const StageError& e) {
    CHECK(std::string(e.what()).rfind("[pretrain]", 0) == 0);
  }
}

TEST_CASE("run is reproducible and persists artifacts") {
  const RunConfig config = preset_config("smoke", 11);
  const auto root = std::filesystem::temp_directory_path() / "smoothtail_tests" / "run";
  std::filesystem::remove_all(root);
  const RunResult a = run_stepwise(config, root);
  const RunResult b = run_stepwise(config);
  CHECK(metrics_to_json(a.report) == metrics_to_json(b.report));
  CHECK(a.model.parameter_hash() == b.model.parameter_hash());

  const RunLayout layout{root};
  for (const auto& p : {layout.config(), layout.train_data(), layout.val_data(), layout.pretrain(),
                        layout.scores(), layout.d_head(0), layout.d_tail(0), layout.expert(0),
                        layout.unified(0), layout.metrics(), layout.report()}) {
    CHECK_MESSAGE(std::filesystem::exists(p), p.string());
  }
  const auto metrics = a.report.metrics;
  CHECK(metrics.count("baseline"));
  CHECK(metrics.count("finetune"));
  CHECK(metrics.count("unified"));
  std::ifstream in(layout.metrics());
  std::stringstream buf;
  buf << in.rdbuf();
  CHECK(metrics_from_json(buf.str()).at("unified").table.ap == metrics.at("unified").table.ap);
}

TEST_CASE("multi-step chain runs every division") {
  RunConfig config = preset_config("smoke", 2);
  // Two thresholds that each leave both halves non-empty on this dataset.
  std::vector<int> sorted;
  for (const auto& [c, n] : count_images_per_category(make_train_data(config))) sorted.push_back(n);
  std::sort(sorted.begin(), sorted.end());
  REQUIRE(sorted.front() < sorted[sorted.size() / 2]);
  config.divisions = {sorted.back(), sorted[sorted.size() / 2]};
  REQUIRE(config.divisions[0] > config.divisions[1]);
  const RunResult r = run_stepwise(config);
  int finetunes = 0, transfers = 0;
  for (const auto& s : r.report.stages) {
    finetunes += s.name.rfind("finetune", 0) == 0;
    transfers += s.name.rfind("transfer", 0) == 0;
  }
  CHECK(finetunes == 2);
  CHECK(transfers == 2);
}

}  // TEST_SUITE
