#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "vat/run.hpp"

using namespace vat;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("vat_test_cli_" + std::to_string(::getpid())) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

int run(const std::string& args, const fs::path& log = {}) {
  std::string cmd = std::string(VAT_CLI_PATH) + " " + args;
  cmd += log.empty() ? " >/dev/null 2>&1" : " >" + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

std::size_t line_count(const std::string& s) { return std::size_t(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

// ---- configuration ----

TEST_CASE("config overlays a preset and names unknown keys") {
  auto c = parse_config(nlohmann::json::parse(R"({"preset":"desk","model":{"dim":32},"train":{"lr":0.001}})"));
  CHECK(c.model.dim == 32);
  CHECK(c.train.lr == 0.001);
  CHECK(c.model.levels.size() == desk_preset().model.levels.size());
  CHECK(c.train.steps == desk_preset().train.steps);

  auto full = parse_config(nlohmann::json::parse(R"({"preset":"full"})"));
  CHECK(full.model.dim == 128);
  CHECK(full.model.image == 128);

  try {
    parse_config(nlohmann::json::parse(R"({"model":{"dimm":3}})"));
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("model.dimm") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_config(nlohmann::json::parse(R"({"preset":"huge"})")), ConfigError);
  CHECK_THROWS_AS(parse_config(nlohmann::json::parse(R"({"train":{"steps":"many"}})")), ConfigError);
  CHECK_THROWS_AS(parse_config(nlohmann::json::parse(R"({"model":{"aggregator":"mlp"}})")), ConfigError);
}

TEST_CASE("config survives a JSON roundtrip") {
  for (const auto& name : {"desk", "full"}) {
    const auto c = preset(name);
    CHECK(to_json(parse_config(to_json(c))) == to_json(c));
  }
}

TEST_CASE("validation rejects an indivisible window") {
  auto m = desk_preset().model;
  m.window = 3;
  CHECK_THROWS_AS(validate(m), ConfigError);
  m = full_preset().model;
  CHECK_NOTHROW(validate(m));
}

// ---- checkpoints ----

TEST_CASE("checkpoint roundtrip gives a bitwise identical forward pass") {
  auto c = desk_preset();
  c.train.steps = 5;
  c.train.val_every = 0;
  const auto dir = scratch("roundtrip");
  auto outcome = run_train(c, dir);
  auto restored = load_model(c, dir / "checkpoint.vat");
  const auto ep = generate_episode(c.data, c.model, 2, 1, 77);
  const auto p = ep.pyramid(0);
  NoGradGuard guard;
  CHECK(outcome.model->forward(p).to_vector() == restored->forward(p).to_vector());

  const auto ck = read_checkpoint(dir / "checkpoint.vat");
  CHECK(ck.step == 5);
  CHECK(to_json(ck.config) == to_json(c));

  // Optimizer state is stored and restored.
  VatModel<float> again(c.model, 123);
  AdamW<float> opt(again.params(), AdamW<float>::from(c.train));
  restore_checkpoint(ck, again.params(), &opt);
  CHECK(again.forward(p).to_vector() == restored->forward(p).to_vector());
  CHECK(std::any_of(opt.first_moments().front().data().begin(), opt.first_moments().front().data().end(),
                    [](float v) { return v != 0.0f; }));
}

TEST_CASE("checkpoint restore rejects shape mismatches and corrupt files") {
  auto c = desk_preset();
  c.train.steps = 1;
  const auto dir = scratch("mismatch");
  run_train(c, dir);
  auto other = c.model;
  other.dim = 8;
  VatModel<float> small(other, 0);
  try {
    restore_checkpoint(read_checkpoint(dir / "checkpoint.vat"), small.params(), nullptr);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("16") != std::string::npos);
    CHECK(msg.find("8") != std::string::npos);
  }
  auto bytes = slurp(dir / "checkpoint.vat");
  write(dir / "truncated.vat", bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS(read_checkpoint(dir / "truncated.vat"));
  write(dir / "trailing.vat", bytes + "x");
  CHECK_THROWS(read_checkpoint(dir / "trailing.vat"));
}

TEST_CASE("periodic checkpoints are written") {
  auto c = desk_preset();
  c.train.steps = 4;
  c.train.checkpoint_every = 2;
  const auto dir = scratch("periodic");
  run_train(c, dir);
  CHECK(fs::exists(dir / "checkpoint-step2.vat"));
  CHECK(fs::exists(dir / "checkpoint-step4.vat"));
  CHECK(read_checkpoint(dir / "checkpoint-step2.vat").step == 2);
}

TEST_CASE("seeded training runs are bit-reproducible") {
  auto c = desk_preset();
  c.train.steps = 12;
  c.train.val_every = 4;
  const auto a = scratch("repro_a"), b = scratch("repro_b"), d = scratch("repro_d");
  run_train(c, a);
  run_train(c, b);
  c.seed = 1;
  run_train(c, d);
  CHECK(slurp(a / "loss.log") == slurp(b / "loss.log"));
  CHECK(slurp(a / "validation.log") == slurp(b / "validation.log"));
  CHECK(slurp(a / "checkpoint.vat") == slurp(b / "checkpoint.vat"));
  CHECK(slurp(a / "loss.log") != slurp(d / "loss.log"));
}

// ---- command line ----

TEST_CASE("cli: train writes one loss row per step") {
  const auto dir = scratch("train200");
  REQUIRE(run("train --steps 200 --quiet --out " + dir.string()) == 0);
  const auto log = slurp(dir / "loss.log");
  CHECK(line_count(log) == 200);
  std::istringstream rows(log);
  std::size_t step = 0;
  double loss = 0;
  std::size_t expected = 0;
  while (rows >> step >> loss) CHECK(step == expected++);
  CHECK(fs::exists(dir / "checkpoint.vat"));
}

TEST_CASE("cli: loss logs are deterministic in the seed") {
  const auto a = scratch("seed_a"), b = scratch("seed_b"), d = scratch("seed_d");
  REQUIRE(run("train --steps 20 --quiet --seed 5 --out " + a.string()) == 0);
  REQUIRE(run("train --steps 20 --quiet --seed 5 --out " + b.string()) == 0);
  REQUIRE(run("train --steps 20 --quiet --seed 6 --out " + d.string()) == 0);
  CHECK(slurp(a / "loss.log") == slurp(b / "loss.log"));
  CHECK(slurp(a / "loss.log") != slurp(d / "loss.log"));
}

TEST_CASE("cli: zero learning rate keeps the initial parameters") {
  const auto dir = scratch("lr0");
  REQUIRE(run("train --steps 5 --lr 0 --quiet --seed 3 --out " + dir.string()) == 0);
  auto c = desk_preset();
  c.seed = 3;
  VatModel<float> fresh(c.model, 3);
  auto loaded = load_model(c, dir / "checkpoint.vat");
  const auto& a = fresh.params().entries();
  const auto& b = loaded->params().entries();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CAPTURE(a[i].first);
    CHECK(a[i].second.to_vector() == b[i].second.to_vector());
  }
}

TEST_CASE("cli: eval with injected ground truth scores perfectly") {
  const auto dir = scratch("inject");
  REQUIRE(run("eval --debug-inject-ground-truth --out " + (dir / "k1.json").string()) == 0);
  REQUIRE(run("eval --debug-inject-ground-truth --k 5 --out " + (dir / "k5.json").string()) == 0);
  const auto k1 = nlohmann::json::parse(slurp(dir / "k1.json"));
  const auto k5 = nlohmann::json::parse(slurp(dir / "k5.json"));
  CHECK(k1["test_miou"].get<double>() == 1.0);
  CHECK(k1["mean_fold_miou"].get<double>() == 1.0);
  CHECK(k1["folds"] == k5["folds"]);
  CHECK(k1["test_fbiou"] == k5["test_fbiou"]);
}

TEST_CASE("cli: eval reports are reproducible and masks are written") {
  const auto dir = scratch("eval");
  REQUIRE(run("train --steps 3 --quiet --out " + dir.string()) == 0);
  const std::string ck = " --checkpoint " + (dir / "checkpoint.vat").string();
  REQUIRE(run("eval" + ck + " --out " + (dir / "a.json").string() + " --masks " + (dir / "masks").string()) == 0);
  REQUIRE(run("eval" + ck + " --out " + (dir / "b.json").string()) == 0);
  CHECK(slurp(dir / "a.json") == slurp(dir / "b.json"));
  CHECK(!fs::is_empty(dir / "masks"));
  const auto report = nlohmann::json::parse(slurp(dir / "a.json"));
  CHECK(report["folds"].size() == desk_preset().data.folds);
  for (const auto& f : report["folds"]) {
    CHECK(f.contains("miou"));
    CHECK(f.contains("fbiou"));
    CHECK(f.contains("class_iou"));
  }
  CHECK(run("eval --k 2 --tau 0" + ck) == 1);
}

TEST_CASE("cli: bench reports one labelled row per aggregator") {
  const auto dir = scratch("bench");
  REQUIRE(run("bench --repeats 5 --out " + (dir / "bench.json").string()) == 0);
  const auto report = nlohmann::json::parse(slurp(dir / "bench.json"));
  CHECK(report["label"] == kBenchLabel);
  REQUIRE(report["rows"].size() == 3);
  std::map<std::string, double> median;
  for (const auto& r : report["rows"]) {
    median[r["aggregator"].get<std::string>()] = r["median_ms"].get<double>();
    CHECK(r["peak_tensor_bytes"].get<std::size_t>() > 0);
  }
  CHECK(median.count("vtm") == 1);
  CHECK(median.count("conv4d-baseline") == 1);
  CHECK(median["identity"] < median["vtm"]);
}

TEST_CASE("cli: shapes prints the full-preset embedding volumes") {
  const auto dir = scratch("shapes");
  write(dir / "full.json", R"({"preset":"full"})");
  REQUIRE(run("shapes --config " + (dir / "full.json").string(), dir / "full.txt") == 0);
  const auto text = slurp(dir / "full.txt");
  for (const char* s : {"8x8x8x8x128", "16x16x8x8x128", "32x32x8x8x128", "128x128x2"}) {
    CAPTURE(s);
    CHECK(text.find(s) != std::string::npos);
  }
  write(dir / "flow.json", R"({"preset":"full","model":{"head":"flow"}})");
  REQUIRE(run("shapes --config " + (dir / "flow.json").string(), dir / "flow.txt") == 0);
  CHECK(slurp(dir / "flow.txt").find("32x32x2") != std::string::npos);
}

TEST_CASE("cli: exit codes") {
  const auto dir = scratch("codes");
  write(dir / "window3.json", R"({"model":{"window":3}})");
  CHECK(run("shapes --config " + (dir / "window3.json").string()) == 1);
  write(dir / "typo.json", R"({"modle":{}})");
  CHECK(run("shapes --config " + (dir / "typo.json").string()) == 1);
  CHECK(run("shapes --config " + (dir / "missing.json").string()) == 1);
  CHECK(run("frobnicate") == 1);
  CHECK(run("eval") == 1);  // no checkpoint
  CHECK(run("shapes --aggregator mlp") == 1);
  // A huge learning rate drives the parameters to overflow.
  CHECK(run("train --steps 5 --quiet --lr 1e30 --out " + (dir / "blowup").string()) == 2);
  bool dumped = false;
  for (const auto& entry : fs::directory_iterator(dir / "blowup"))
    dumped = dumped || entry.path().filename().string().rfind("nonfinite-seed", 0) == 0;
  CHECK(dumped);
}
