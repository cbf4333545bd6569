// SPDX-License-Identifier: Apache-2.0
#include "arlab/harness.hpp"
#include "arlab/presets.hpp"

#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

using namespace arlab;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("arlab_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(ARLAB_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("dataset round trip") {
  const fs::path dir = scratch_dir("dataset");
  const auto dist = bivariate_gaussian(0.8);

  PairDataset empty = make_pairs_bi(dist, TimestepGrid::standard(), 1, 8, 1);
  empty.records.clear();
  save_dataset(empty, dir / "empty.jsonl");
  CHECK(load_dataset(dir / "empty.jsonl") == empty);

  const PairDataset bi = make_pairs_bi(dist, TimestepGrid::standard(), 50, 16, 2);
  REQUIRE(bi.records.size() == 100);
  save_dataset(bi, dir / "bi.jsonl");
  const PairDataset loaded = load_dataset(dir / "bi.jsonl");
  CHECK(loaded == bi);
  save_dataset(loaded, dir / "bi2.jsonl");
  CHECK(slurp(dir / "bi.jsonl") == slurp(dir / "bi2.jsonl"));

  const auto shared_dist = std::make_shared<const SequenceDistribution>(dist);
  const PairDataset causal = make_pairs_causal(dist, OracleArTeacher(shared_dist), TimestepGrid{{1.0, 0.5}}, 5, 8, 3);
  save_dataset(causal, dir / "causal.jsonl");
  CHECK(load_dataset(dir / "causal.jsonl") == causal);

  std::string text = slurp(dir / "bi.jsonl");
  const std::string v1 = "\"version\":1";
  REQUIRE(text.find(v1) != std::string::npos);
  spit(dir / "future.jsonl", std::string(text).replace(text.find(v1), v1.size(), "\"version\":2"));
  CHECK_THROWS_AS(load_dataset(dir / "future.jsonl"), VersionError);

  // Corrupt the third line.
  std::size_t pos = text.find('\n');
  pos = text.find('\n', pos + 1);
  text.insert(pos + 1, "{not json");
  spit(dir / "bad.jsonl", text);
  try {
    load_dataset(dir / "bad.jsonl");
    FAIL("malformed dataset loaded");
  } catch (const VersionError&) {
    FAIL("wrong error type");
  } catch (const FormatError& e) {
    CHECK(e.line() == 3);
  }
  CHECK_THROWS(load_dataset(dir / "missing.jsonl"));
}

TEST_CASE("model round trip") {
  const fs::path dir = scratch_dir("model");
  ChunkwiseStudent model({4, 1, 2}, Role::generator, 32, 0.5, 9);
  Rng rng(1);
  for (Index i = 0; i < model.size(); ++i) model.head(i).set_theta(standard_normal(32, 2, rng));
  save_model(model, dir / "m.json");
  const ChunkwiseStudent back = load_model(dir / "m.json");
  CHECK(back.same_features(model));
  CHECK(back.role() == Role::generator);
  for (Index i = 0; i < model.size(); ++i) CHECK(back.head(i).theta() == model.head(i).theta());
}

TEST_CASE("report formats") {
  DiagnosticsReport r;
  r.add("b.value", Metric{1.0 / 3.0, 1e-17, 10, "00ff", "plain"});
  r.add("a.value", Metric{-2.5e-300, 0.0, 0, "00ff", "needs, \"quoting\"\nacross lines"});
  for (ReportFormat f : {ReportFormat::csv, ReportFormat::jsonl}) {
    const std::string text = format_report(r, f);
    CHECK(parse_report(text, f) == r);
    CHECK(format_report(parse_report(text, f), f) == text);
  }
  const std::string csv = format_report(r, ReportFormat::csv);
  CHECK(csv.rfind("name,value,uncertainty,sample_count,config_digest,note\n", 0) == 0);
  CHECK(csv.find("a.value") < csv.find("b.value"));

  const DiagnosticsReport empty;
  CHECK(format_report(empty, ReportFormat::csv) == "name,value,uncertainty,sample_count,config_digest,note\n");
  CHECK(parse_report(format_report(empty, ReportFormat::jsonl), ReportFormat::jsonl).empty());

  const fs::path dir = scratch_dir("report");
  emit_report(r, ReportFormat::csv, dir / "r.csv");
  CHECK(read_report(dir / "r.csv", ReportFormat::csv) == r);
  CHECK_THROWS_AS(parse_report("name,value\n", ReportFormat::csv), FormatError);
  CHECK_THROWS_AS(report_format_from_string("xml"), DomainError);
}

TEST_CASE("loss trace") {
  const fs::path dir = scratch_dir("trace");
  write_loss_trace({0.5, 0.25}, dir / "t.csv");
  CHECK(slurp(dir / "t.csv") == "step,loss\n1,0.5\n2,0.25\n");
}

TEST_CASE("config parsing") {
  const ExperimentConfig def;
  CHECK(config_from_json(to_json(def)) == def);
  CHECK(config_from_json(Json::object()) == def);

  const ExperimentConfig patched = apply_overrides(def, Json::parse(R"({"distribution":{"rho":0.4},"seed":7})"));
  CHECK(patched.distribution.rho == 0.4);
  CHECK(patched.seed == 7);
  CHECK(patched.grid == def.grid);

  CHECK_THROWS_AS(config_from_json(Json::parse(R"({"bogus":1})")), FormatError);
  CHECK_THROWS_AS(config_from_json(Json::parse(R"({"distribution":{"rho":"high"}})")), FormatError);
  CHECK_THROWS_AS(config_from_json(Json::parse(R"({"solver":"rk4"})")), FormatError);
  CHECK_THROWS_AS(config_from_json(Json::parse(R"({"student":{"m":1.5}})")), FormatError);

  const fs::path dir = scratch_dir("config");
  spit(dir / "c.json", R"({"pair_count": 12, "distribution": {"kind": "ar1", "n_frames": 4}})");
  const ExperimentConfig loaded = load_config(dir / "c.json");
  CHECK(loaded.pair_count == 12);
  CHECK(loaded.distribution.build().spec.n_frames == 4);
  spit(dir / "bad.json", "{");
  CHECK_THROWS_AS(load_config(dir / "bad.json"), FormatError);
}

TEST_CASE("config digest ignores the output directory") {
  ExperimentConfig a, b;
  b.output_dir = "elsewhere";
  CHECK(config_digest(a) == config_digest(b));
  b.seed = 1;
  CHECK(config_digest(a) != config_digest(b));
  CHECK(config_digest(a).size() == 16);
  // Published FNV-1a 64 test vectors.
  CHECK(fnv1a_hex("") == "cbf29ce484222325");
  CHECK(fnv1a_hex("a") == "af63dc4c8601ec8c");
}

TEST_CASE("pipeline validation") {
  ExperimentConfig c;
  c.validate();

  auto rejects = [](ExperimentConfig cfg) { CHECK_THROWS_AS(cfg.validate(), DomainError); };
  {
    ExperimentConfig x = c;
    x.pipeline.cd = CdArm::causal;
    rejects(x);
  }
  {
    ExperimentConfig x = c;
    x.pipeline.dmd = true;
    x.dmd.optimizer = Optimizer::ridge;
    rejects(x);
  }
  {
    ExperimentConfig x = c;
    x.pipeline.ar_diffusion_init = true;
    rejects(x);
  }
  {
    ExperimentConfig x = c;
    x.pipeline.ode = OdeArm::none;
    x.pipeline.dmd = true;
    rejects(x);
  }
  {
    ExperimentConfig x = c;
    x.distribution.rho = 1.0;
    rejects(x);
  }
  {
    ExperimentConfig x = c;
    x.pipeline.ode = OdeArm::none;
    x.pipeline.cd = CdArm::causal;
    x.student.m = 128;
    rejects(x);
    x.student = x.ar_model;
    x.validate();
  }
}

TEST_CASE("pipeline is deterministic") {
  ExperimentConfig c;
  c.teacher = "oracle";
  c.pair_count = 100;
  c.solver_steps = 16;
  c.student.m = 64;
  c.evaluation.n_anchor = 20;
  c.evaluation.n_moment = 500;
  c.evaluation.n_prefix = 3;
  c.evaluation.n_sample = 100;
  c.evaluation.oracle_steps = 16;
  c.evaluation.kl_samples = 20;
  const PipelineResult a = run_pipeline(c, "x");
  const PipelineResult b = run_pipeline(c, "x");
  CHECK(a.report == b.report);
  CHECK(a.report.metrics().count("x.energy_distance") == 1);
  CHECK(a.report.metrics().count("x.flow_rms") == 1);
  CHECK(!a.ar_model.has_value());
  REQUIRE(a.generator.has_value());
  CHECK(a.generator->head(1).theta() == b.generator->head(1).theta());
}

TEST_CASE("presets") {
  CHECK(preset_names().size() == 7);
  CHECK(is_preset("lemma1-audit"));
  CHECK(!is_preset("fig9"));
  CHECK_THROWS_AS(preset_config("fig9"), DomainError);

  const fs::path dir = scratch_dir("preset");
  PresetOptions opt;
  opt.output_dir = dir.string();
  opt.overrides = Json::parse(R"({"rho_sweep":[0.0],"evaluation":{"injectivity_anchors":4,"injectivity_resamples":500}})");
  const PresetOutcome out = run_preset("lemma1-audit", opt);
  CHECK(out.passed());
  CHECK(out.first_failure() == nullptr);
  bool found = false;
  for (const auto& [name, m] : out.report.metrics()) {
    if (name.find("positive_fraction") != std::string::npos) {
      CHECK(m.value == 0.0);
      found = true;
    }
  }
  CHECK(found);
  CHECK(fs::exists(out.directory / "report.csv"));
  CHECK(fs::exists(out.directory / "config.json"));
}

TEST_CASE("command line exit codes") {
  const fs::path dir = scratch_dir("cli");
  CHECK(run_cli("preset fig9 --output-dir " + dir.string()) == 2);
  CHECK(run_cli("gen-data --set bogus=1 --out " + (dir / "d.jsonl").string()) == 2);
  CHECK(run_cli("no-such-verb") == 2);
  CHECK(run_cli("audit --kind injectivity --rho 0 --set evaluation.injectivity_anchors=4 "
                "--set evaluation.injectivity_resamples=200 --out " +
                (dir / "r.csv").string()) == 0);
  CHECK(fs::exists(dir / "r.csv"));
  spit(dir / "future.jsonl", R"({"format":"arlab-pairs","version":99})" "\n");
  CHECK(run_cli("distill --data " + (dir / "future.jsonl").string() + " --out " + (dir / "m.json").string()) == 3);
}
